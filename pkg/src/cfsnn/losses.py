"""Readout cross-entropy and the positive-negative balanced (PNB) regularizer."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .neurons import NeuronConfig


@dataclass(frozen=True)
class LossConfig:
    lam: float = 0.25
    epsilon: float = 1e-6
    term_clamp: float = 10.0
    pnb_layers: tuple[str, ...] | None = None  # None = every CF layer
    include_saturated: bool = True

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("loss lambda must be >= 0")
        if not self.epsilon > 0:
            raise ValueError("loss epsilon must be > 0")
        if not self.term_clamp > 0:
            raise ValueError("loss term_clamp must be > 0")


def cross_entropy(scores, labels) -> ad.Tensor:
    """Mean of ``-log softmax(scores)[label]`` over the batch.

    ``scores`` is [C] or [B, C]; ``labels`` an int or an int array of length B.
    """
    scores = scores if isinstance(scores, ad.Tensor) else ad.Tensor(scores)
    if scores.ndim == 1:
        scores = scores.reshape(1, -1)
    labels = np.atleast_1d(np.asarray(labels, dtype=int))
    n, c = scores.shape
    if c < 2:
        raise ValueError("cross_entropy needs at least 2 classes")
    if labels.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {list(labels.shape)}")
    if np.any(labels >= c) or np.any(labels < 0):
        raise ValueError(f"label out of range for {c} classes: {labels.max()}")
    onehot = np.zeros((n, c))
    onehot[np.arange(n), labels] = 1.0
    return -(ad.log_softmax(scores, axis=1) * onehot).sum() * (1.0 / n)


def pnb_partition(u, cfg: NeuronConfig, k: int | None = None,
                  include_saturated: bool = False) -> np.ndarray:
    """Region label per element: ``+k`` for U+(k), ``-k`` for U-(k), 0 for none.

    U+(k) = ((k-1) theta_p, k theta_p] and U-(k) = [-k Θ, -(k-1) Θ) with
    Θ = |theta_n|. With ``include_saturated`` potentials beyond ``K`` levels
    join the outermost region of their sign.
    """
    k = _levels(cfg, k)
    u = np.asarray(u, dtype=float)
    big = abs(cfg.theta_n)
    pos = np.ceil(u / cfg.theta_p)
    neg = np.ceil(-u / big)
    region = np.zeros(u.shape, dtype=int)
    if include_saturated:
        region = np.where(u > 0, np.minimum(pos, k), region)
        region = np.where(u < 0, -np.minimum(neg, k), region)
    else:
        region = np.where((u > 0) & (pos <= k), pos, region)
        region = np.where((u < 0) & (neg <= k), -neg, region)
    return region.astype(int)


def _levels(cfg: NeuronConfig, k: int | None) -> int:
    if cfg.k_p_max != cfg.k_n_max:
        raise ValueError("PNB loss needs K_P == K_N")
    if k is not None and k != cfg.k_p_max:
        raise ValueError(f"K={k} must equal K_P=K_N={cfg.k_p_max}")
    return cfg.k_p_max


def pnb_weighted_mean(members, k: int, side: str, cfg: NeuronConfig, eps: float = 1e-6) -> float:
    """Exponentially weighted mean of one region's members (plain numbers)."""
    members = np.asarray(members, dtype=float).reshape(-1)
    centre = k * (cfg.theta_p if side == "+" else cfg.theta_n)
    w = np.exp(-np.abs(centre - members))
    return float((members * w).sum() / (w.sum() + eps))


def _region_mean(u: ad.Tensor, mask: np.ndarray, centre: float, eps: float) -> ad.Tensor:
    w = ad.exp(-ad.abs(centre - u)) * mask
    return (u * w).sum() / (w.sum() + eps)


def pnb_loss(u, cfg: NeuronConfig, losscfg: LossConfig = LossConfig(),
             region: np.ndarray | None = None) -> ad.Tensor:
    """Mean over levels of the clamped |log| ratio of positive/negative region means.

    Region membership is computed from the values (or taken from ``region``)
    and carries no gradient. Recorded as one fused op; see
    :func:`pnb_loss_reference` for the same quantity built from primitives.
    """
    u = u if isinstance(u, ad.Tensor) else ad.Tensor(u)
    k_max = _levels(cfg, None)
    eps = losscfg.epsilon
    if region is None:
        region = pnb_partition(u.data, cfg, include_saturated=losscfg.include_saturated)
    x = u.data.reshape(-1)
    region = np.asarray(region).reshape(-1)
    slot = region + k_max  # 0 .. 2K, slot K = outside every region
    n_slots = 2 * k_max + 1
    centres = np.array([k * (cfg.theta_p if k > 0 else -cfg.theta_n) for k in range(-k_max, k_max + 1)])
    d = centres[slot] - x
    w = np.exp(-np.abs(d))
    w[slot == k_max] = 0.0
    denom = np.bincount(slot, weights=w, minlength=n_slots) + eps
    mu = np.bincount(slot, weights=x * w, minlength=n_slots) / denom

    # d(term)/d(mu) for every slot
    coef = np.zeros(n_slots)
    total = 0.0
    for k in range(1, k_max + 1):
        mu_p, mu_n = mu[k_max + k], mu[k_max - k]
        a, b = abs(mu_p), abs(mu_n) + eps
        ratio = a / b + eps
        log_ratio = float(np.log(ratio))
        if abs(log_ratio) <= losscfg.term_clamp:
            total += abs(log_ratio)
            d_ratio = np.sign(log_ratio) / ratio
            coef[k_max + k] = d_ratio * np.sign(mu_p) / b
            coef[k_max - k] = -d_ratio * a * np.sign(mu_n) / b**2
        else:
            total += losscfg.term_clamp
    # d(mu)/d(x_i) = (w_i + w_i sign(d_i) (x_i - mu)) / denom within the element's region
    grad = coef[slot] * w * (1.0 + np.sign(d) * (x - mu[slot])) / denom[slot]
    grad = grad.reshape(u.shape) / k_max
    return ad.custom_op("pnb_loss", (u,), total / k_max, lambda g: (g * grad,))


def pnb_loss_reference(u, cfg: NeuronConfig, losscfg: LossConfig = LossConfig(),
                       region: np.ndarray | None = None) -> ad.Tensor:
    """:func:`pnb_loss` composed from autodiff primitives (slow; used to cross-check)."""
    u = u if isinstance(u, ad.Tensor) else ad.Tensor(u)
    k_max = _levels(cfg, None)
    eps = losscfg.epsilon
    if region is None:
        region = pnb_partition(u.data, cfg, include_saturated=losscfg.include_saturated)
    terms = []
    for k in range(1, k_max + 1):
        mu_p = _region_mean(u, region == k, k * cfg.theta_p, eps)
        mu_n = _region_mean(u, region == -k, k * cfg.theta_n, eps)
        ratio = ad.abs(mu_p) / (ad.abs(mu_n) + eps) + eps
        terms.append(ad.minimum(ad.abs(ad.log(ratio)), losscfg.term_clamp))
    total = terms[0]
    for term in terms[1:]:
        total = total + term
    return total * (1.0 / k_max)


def pnb_network(membranes: dict, configs: dict, losscfg: LossConfig) -> ad.Tensor | None:
    """Average :func:`pnb_loss` over every contributing (layer, step) potential.

    ``membranes`` maps ``(layer, t)`` to the pre-firing potential tensor and
    ``configs`` maps layer names to their :class:`NeuronConfig`. LIF layers
    have no negative regions and are skipped.
    """
    terms = []
    for (name, _t), u in membranes.items():
        cfg = configs[name]
        if cfg.kind != "cf":
            continue
        if losscfg.pnb_layers is not None and name not in losscfg.pnb_layers:
            continue
        terms.append(pnb_loss(u, cfg, losscfg))
    if not terms:
        return None
    total = terms[0]
    for term in terms[1:]:
        total = total + term
    return total * (1.0 / len(terms))


def total_loss(ce, pnb, losscfg: LossConfig):
    if pnb is None or losscfg.lam == 0:
        return ce
    return ce + pnb * losscfg.lam
