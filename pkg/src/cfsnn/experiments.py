"""Small reproducible training runs: single tasks and the neuron/loss ablation."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .config import RunConfig
from .data import make_rng
from .network import Network
from .trainer import STREAM_INIT, Trainer, evaluate, fit

# fixed-surrogate baselines use a unit-steepness triangle and no PNB term
ABLATION_VARIANTS = {
    "lif": ["neuron.kind=\"lif\"", "surrogate.family=\"plg\"", "surrogate.alpha=1.0", "loss.lambda=0.0"],
    "cf": ["neuron.kind=\"cf\"", "surrogate.family=\"plg\"", "surrogate.alpha=1.0", "loss.lambda=0.0"],
    "cf_tsg_pnb": ["neuron.kind=\"cf\"", "surrogate.family=\"tsg\"", "loss.lambda=0.25"],
}


@dataclass
class RunResult:
    accuracy: float
    seconds: float
    metrics_csv: str


def run(cfg: RunConfig) -> RunResult:
    """Train from scratch per ``cfg`` and evaluate on its test split."""
    start = time.perf_counter()
    train, test = cfg.datasets()
    net = Network(cfg.network_spec(train.sample_shape), make_rng(cfg["seed"], STREAM_INIT))
    trainer = Trainer(net, cfg.train(), cfg.loss(), cfg.encoder())
    csv_text = fit(trainer, train, test)
    accuracy = evaluate(net, test, trainer.encoder, seed=cfg["seed"]).accuracy
    return RunResult(accuracy, time.perf_counter() - start, csv_text)


def median_accuracy(config_path, overrides=(), seeds=range(5)) -> tuple[float, list[RunResult]]:
    results = [run(RunConfig.load(config_path, overrides, seed)) for seed in seeds]
    return float(np.median([r.accuracy for r in results])), results


def ablation(config_path, seeds=range(5), out_path=None) -> dict:
    """Median test accuracy of LIF, CF and CF+TSG+PNB on one task.

    The result (with per-seed accuracies and the orderings) is written as
    JSON to ``out_path`` when given.
    """
    report = {"version": __version__, "config": str(config_path), "seeds": list(seeds), "variants": {}}
    for name, overrides in ABLATION_VARIANTS.items():
        med, results = median_accuracy(config_path, overrides, seeds)
        report["variants"][name] = {
            "overrides": overrides,
            "accuracies": [r.accuracy for r in results],
            "median": med,
        }
    v = report["variants"]
    report["cf_ge_lif"] = v["cf"]["median"] >= v["lif"]["median"]
    report["full_ge_cf"] = v["cf_tsg_pnb"]["median"] >= v["cf"]["median"]
    if out_path is not None:
        Path(out_path).write_text(json.dumps(report, indent=2) + "\n")
    return report
