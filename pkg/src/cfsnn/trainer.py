"""BPTT training loop: loss assembly, SGD with momentum, cosine schedule, evaluation."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .data import Dataset, EncoderConfig, augment_crop_flip, encode_input, inject_noise, make_rng
from .losses import LossConfig, cross_entropy, pnb_network, total_loss
from .network import Network, forward_unroll
from .neurons import SpikeRecord

# spawn keys for the independent random streams derived from the run seed
STREAM_INIT, STREAM_SHUFFLE, STREAM_ENCODE, STREAM_NOISE, STREAM_AUGMENT = 100, 101, 102, 103, 104


@dataclass
class TrainConfig:
    lr: float = 0.025
    momentum: float = 0.9
    weight_decay: float = 1e-4
    epochs: int = 20
    batch_size: int = 64
    schedule: str = "cosine"
    seed: int = 0
    tsg_lr: float | None = None
    augment: bool = False

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("learning rate must be > 0")
        if self.batch_size < 2:
            raise ValueError("batch size must be >= 2 for tdBN statistics")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.schedule not in ("cosine", "constant"):
            raise ValueError("schedule must be 'cosine' or 'constant'")


def cosine_lr(epoch: int, total_epochs: int, eta0: float) -> float:
    if total_epochs <= 0:
        raise ValueError("cosine schedule needs total_epochs > 0")
    if not 0 <= epoch <= total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {total_epochs}]")
    return eta0 * (1.0 + math.cos(math.pi * epoch / total_epochs)) / 2.0


class SGD:
    """Heavy-ball SGD: ``m <- mu*m + (g + wd*w)``; ``w <- w - lr*m``."""

    def __init__(self, params, momentum: float = 0.9, weight_decay: float = 1e-4):
        self.params = list(params)
        self.momentum = momentum
        self.weight_decay = weight_decay

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, lr: float, overrides: dict | None = None) -> None:
        overrides = overrides or {}
        for p in self.params:
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            p.momentum *= self.momentum
            p.momentum += g
            p.data -= overrides.get(p.name, lr) * p.momentum


@dataclass
class StepResult:
    loss: float
    ce: float
    pnb: float


@dataclass
class EvalMetrics:
    accuracy: float
    loss: float
    firing_rates: dict
    record: SpikeRecord
    predictions: np.ndarray = field(repr=False, default=None)

    @property
    def mean_firing_rate(self) -> float:
        return float(np.mean(list(self.firing_rates.values()))) if self.firing_rates else 0.0


def compute_loss(net: Network, encoded: np.ndarray, labels, losscfg: LossConfig, smooth: bool = False):
    """Forward pass plus the combined loss; returns ``(loss, ce, pnb, result)``."""
    want_pnb = losscfg.lam > 0
    result = forward_unroll(net, encoded, smooth=smooth, collect_membranes=want_pnb)
    ce = cross_entropy(result.output, labels)
    pnb = pnb_network(result.membranes, net.neuron_configs(), losscfg) if want_pnb else None
    return total_loss(ce, pnb, losscfg), ce, pnb, result


class Trainer:
    def __init__(self, net: Network, cfg: TrainConfig, losscfg: LossConfig = LossConfig(),
                 encoder: EncoderConfig | None = None):
        self.net = net
        self.cfg = cfg
        self.losscfg = losscfg
        self.encoder = encoder or EncoderConfig("direct", net.spec.time_steps)
        self.optimizer = SGD(net.parameters(), cfg.momentum, cfg.weight_decay)
        self.epoch = 0

    def lr_at(self, epoch: int) -> float:
        if self.cfg.schedule == "constant" or self.cfg.epochs == 0:
            return self.cfg.lr
        return cosine_lr(min(epoch, self.cfg.epochs), self.cfg.epochs, self.cfg.lr)

    def encode(self, x: np.ndarray, temporal: bool, key: tuple) -> np.ndarray:
        rng = make_rng(self.cfg.seed, STREAM_ENCODE, *key) if self.encoder.mode == "rate" else None
        return encode_input(x, self.encoder, rng, temporal=temporal)

    def train_step(self, encoded: np.ndarray, labels, lr: float) -> StepResult:
        self.net.train()
        self.optimizer.zero_grad()
        loss, ce, pnb, _ = compute_loss(self.net, encoded, labels, self.losscfg)
        value = loss.item()
        if not math.isfinite(value):
            raise ad.NumericalError(f"non-finite loss {value}")
        loss.backward()
        overrides = {}
        if self.cfg.tsg_lr is not None and self.net.tsg is not None:
            ratio = self.cfg.tsg_lr / self.cfg.lr
            overrides[self.net.tsg.x.name] = lr * ratio
        self.optimizer.step(lr, overrides)
        return StepResult(value, ce.item(), pnb.item() if pnb is not None else 0.0)

    def train_epoch(self, data: Dataset) -> dict:
        lr = self.lr_at(self.epoch)
        order = make_rng(self.cfg.seed, STREAM_SHUFFLE, self.epoch).permutation(len(data))
        size = self.cfg.batch_size
        totals = np.zeros(3)
        seen = 0
        for b, start in enumerate(range(0, len(data), size)):
            idx = order[start:start + size]
            if len(idx) < 2:
                continue
            x = data.x[idx]
            if self.cfg.augment and x.ndim == 4:
                x = augment_crop_flip(x, make_rng(self.cfg.seed, STREAM_AUGMENT, self.epoch, b))
            encoded = self.encode(x, data.temporal, (self.epoch, b))
            step = self.train_step(encoded, data.y[idx], lr)
            totals += np.array([step.loss, step.ce, step.pnb]) * len(idx)
            seen += len(idx)
        self.epoch += 1
        loss, ce, pnb = totals / max(seen, 1)
        return {"lr": lr, "train_loss": loss, "train_ce": ce, "train_pnb": pnb}


def evaluate(net: Network, data: Dataset, encoder: EncoderConfig, *, batch_size: int = 256,
             losscfg: LossConfig = LossConfig(lam=0.0), seed: int = 0,
             noise: tuple | None = None, count_mode: str = "magnitude") -> EvalMetrics:
    """Accuracy, mean cross-entropy and per-layer firing rates in eval mode."""
    if len(data) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    was_training = net.training
    net.eval()
    record = SpikeRecord()
    preds = np.empty(len(data), dtype=np.int64)
    loss_sum = 0.0
    try:
        with ad.no_grad():
            for b, start in enumerate(range(0, len(data), batch_size)):
                x = data.x[start:start + batch_size]
                y = data.y[start:start + batch_size]
                if noise is not None:
                    kind, eps = noise
                    x = inject_noise(x, kind, eps, make_rng(seed, STREAM_NOISE, b), data.value_range)
                rng = make_rng(seed, STREAM_ENCODE, 10**6, b) if encoder.mode == "rate" else None
                encoded = encode_input(x, encoder, rng, temporal=data.temporal)
                result = forward_unroll(net, encoded, training=False)
                loss_sum += cross_entropy(result.output, y).item() * len(y)
                preds[start:start + len(y)] = np.argmax(result.output.data, axis=1)
                record.merge(result.record)
    finally:
        net.training = was_training
    rates = {name: record.firing_rate(name, count_mode) for name in record.layers}
    return EvalMetrics(float(np.mean(preds == data.y)), loss_sum / len(data), rates, record, preds)


def metrics_header(net: Network) -> list[str]:
    cols = ["epoch", "lr", "train_loss", "train_ce", "train_pnb", "test_acc", "mean_firing_rate"]
    if net.tsg is not None:
        steps, layers = net.tsg.grid
        cols += [f"alpha_t{t}_l{l}" for t in range(steps) for l in range(layers)]
    return cols


def metrics_row(epoch: int, stats: dict, metrics: EvalMetrics, net: Network) -> list[str]:
    row = [str(epoch)] + [repr(float(stats[k])) for k in ("lr", "train_loss", "train_ce", "train_pnb")]
    row += [repr(metrics.accuracy), repr(metrics.mean_firing_rate)]
    if net.tsg is not None:
        row += [repr(float(a)) for a in net.tsg.alpha_table().reshape(-1)]
    return row


def fit(trainer: Trainer, train: Dataset, test: Dataset, *, on_epoch=None) -> str:
    """Train for ``trainer.cfg.epochs`` epochs; returns the metrics CSV text."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(metrics_header(trainer.net))
    while trainer.epoch < trainer.cfg.epochs:
        stats = trainer.train_epoch(train)
        metrics = evaluate(trainer.net, test, trainer.encoder, seed=trainer.cfg.seed)
        row = metrics_row(trainer.epoch, stats, metrics, trainer.net)
        writer.writerow(row)
        if on_epoch is not None:
            on_epoch(trainer.epoch, stats, metrics, ",".join(row) + "\n")
    return buf.getvalue()
