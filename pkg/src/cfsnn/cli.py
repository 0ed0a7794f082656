"""Command-line entry point.

Exit codes: 0 ok, 1 check failure, 2 configuration error, 3 numerical
failure, 4 I/O failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from pathlib import Path

from . import __version__
from . import autodiff as ad
from . import checkpoint, gradcheck
from .config import ConfigError, RunConfig
from .data import encode_input, make_rng
from .energy import count_flops, estimate_energy, measure_firing_rate, sops_to_mj
from .network import Network, forward_unroll
from .neurons import membrane_histogram
from .trainer import STREAM_ENCODE, STREAM_INIT, Trainer, evaluate, metrics_header, metrics_row

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3, 4


class UsageError(Exception):
    pass


def _parse_noise(text: str | None):
    if text is None:
        return None
    kind, _, eps = text.partition(":")
    try:
        return kind, float(eps)
    except ValueError:
        raise ConfigError("--noise", f"expected kind:epsilon, got {text!r}") from None


def _load_config(args) -> RunConfig:
    overrides = list(args.set or ())
    noise = _parse_noise(getattr(args, "noise", None))
    if noise is not None:
        overrides += [f'noise.kind="{noise[0]}"', f"noise.epsilon={noise[1]!r}"]
    return RunConfig.load(args.config, overrides, args.seed)


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write(path: Path, text: str) -> None:
    path.write_text(text)


def _network_for(cfg: RunConfig, sample_shape) -> Network:
    return Network(cfg.network_spec(sample_shape), make_rng(cfg["seed"], STREAM_INIT))


def cmd_train(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args)
    train, test = cfg.datasets()
    net = _network_for(cfg, train.sample_shape)
    trainer = Trainer(net, cfg.train(), cfg.loss(), cfg.encoder())
    manifest = {"version": __version__, "seed": cfg["seed"], "config": cfg.to_dict()}
    _write(out / "run_manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    metrics_path = out / "metrics.csv"
    with open(metrics_path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(metrics_header(net))
        fh.flush()
        every = cfg["train.checkpoint_every"]
        while trainer.epoch < trainer.cfg.epochs:
            stats = trainer.train_epoch(train)
            metrics = evaluate(net, test, trainer.encoder, seed=cfg["seed"], noise=cfg.noise())
            writer.writerow(metrics_row(trainer.epoch, stats, metrics, net))
            fh.flush()
            print(f"epoch {trainer.epoch}: loss {stats['train_loss']:.4f} test_acc {metrics.accuracy:.4f}")
            if every and trainer.epoch % every == 0:
                checkpoint.save(out / f"checkpoint_epoch{trainer.epoch}.snn", net, trainer.epoch, cfg["seed"])
    checkpoint.save(out / "final.snn", net, trainer.epoch, cfg["seed"])
    return EXIT_OK


def _restore(args, cfg: RunConfig):
    ckpt = checkpoint.load(args.checkpoint)
    net = ckpt.build_network()
    return net, ckpt


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args)
    net, _ = _restore(args, cfg)
    _, test = cfg.datasets()
    metrics = evaluate(net, test, cfg.encoder(), seed=cfg["seed"], noise=cfg.noise(),
                       count_mode=cfg["energy.count_mode"])
    report = {"accuracy": metrics.accuracy, "loss": metrics.loss, "firing_rates": metrics.firing_rates,
              "noise": cfg.noise()}
    _write(out / "eval.json", json.dumps(report, indent=2, sort_keys=True) + "\n")
    print(json.dumps(report, sort_keys=True))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    cfg = _load_config(args)
    train, _ = cfg.datasets()
    spec = cfg.network_spec(train.sample_shape)
    net = Network(spec, make_rng(cfg["seed"], STREAM_INIT))
    n_params = sum(p.size for p in net.parameters())
    if n_params > cfg["gradcheck.max_params"]:
        raise ConfigError("network.layers", f"{n_params} parameters exceed gradcheck.max_params")
    results = [gradcheck.check_ops()]
    results += gradcheck.check_losses(cfg.loss(), cfg["seed"])
    results.append(gradcheck.end_to_end(spec, cfg["seed"], cfg["gradcheck.batch"]))
    worst = None
    for r in results:
        status = "skipped" if r.skipped else ("ok" if r.passed else "FAIL")
        print(f"{r.name:14s} max_rel_err={r.max_error:.3e} threshold={r.threshold:.0e} {status} worst={r.worst}")
        if not r.passed and worst is None:
            worst = r
    if worst is not None:
        print(f"gradient check failed: {worst.name} worst offender '{worst.worst}'", file=sys.stderr)
        return EXIT_CHECK
    return EXIT_OK


def cmd_energy(args) -> int:
    if args.sops is not None:
        print(f"SOPs {args.sops:.4g} -> {sops_to_mj(args.sops):.3f} mJ")
        return EXIT_OK
    if args.checkpoint is None:
        raise UsageError("energy needs --checkpoint (or --sops for the arithmetic check)")
    cfg = _load_config(args)
    out = _out_dir(args)
    net, _ = _restore(args, cfg)
    _, test = cfg.datasets()
    metrics = evaluate(net, test, cfg.encoder(), seed=cfg["seed"], noise=cfg.noise())
    rates = measure_firing_rate(metrics.record, cfg["energy.count_mode"])
    report = estimate_energy(count_flops(net), rates, cfg["network.time_steps"])
    _write(out / "energy.csv", report.to_csv())
    _write(out / "energy_summary.txt", report.summary())
    print(report.summary(), end="")
    return EXIT_OK


def cmd_inspect(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args)
    net, _ = _restore(args, cfg)
    if args.what == "alphas":
        if net.tsg is None:
            raise UsageError("network has no learnable surrogate steepness")
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t", "layer_index", "layer", "alpha"])
        table = net.tsg.alpha_table()
        for t in range(table.shape[0]):
            for l, layer in enumerate(net.spiking):
                w.writerow([t, l, layer.name, repr(float(table[t, l]))])
        _write(out / "alphas.csv", buf.getvalue())
        return EXIT_OK
    _, test = cfg.datasets()
    limit = min(len(test), args.samples)
    subset = test.subset(slice(0, limit))
    net.eval()
    with ad.no_grad():
        enc = encode_input(subset.x, cfg.encoder(), make_rng(cfg["seed"], STREAM_ENCODE), temporal=subset.temporal)
        result = forward_unroll(net, enc, training=False, log_membranes=True)
    if args.what == "membranes":
        table = membrane_histogram(result.membrane_log, k_tau=net.spec.neuron.k_tau,
                                   theta=net.spec.neuron.theta_p)
        _write(out / "membranes.csv", table.to_csv())
    else:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer", "spike_value", "count"])
        for name, hist in result.record.values.items():
            for value in sorted(hist):
                w.writerow([name, value, hist[value]])
        _write(out / "spikes.csv", buf.getvalue())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cfsnn", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, checkpoint_required=False):
        p.add_argument("--config", help="TOML configuration file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
        p.add_argument("--out", default="cfsnn_out", help="output directory")
        p.add_argument("--seed", type=int, help="override the run seed")
        p.add_argument("--noise", metavar="KIND:EPS", help="corrupt evaluation inputs")
        if checkpoint_required is not None:
            p.add_argument("--checkpoint", required=checkpoint_required)

    common(sub.add_parser("train", help="train a network"), checkpoint_required=None)
    common(sub.add_parser("eval", help="evaluate a checkpoint"), checkpoint_required=True)
    common(sub.add_parser("gradcheck", help="finite-difference gradient checks"), checkpoint_required=None)
    energy = sub.add_parser("energy", help="theoretical energy report")
    common(energy)
    energy.add_argument("--sops", type=float, help="only convert a SOP count to energy")
    inspect = sub.add_parser("inspect", help="dump membranes, alphas or spike counts as CSV")
    common(inspect, checkpoint_required=True)
    inspect.add_argument("what", choices=["membranes", "alphas", "spikes"])
    inspect.add_argument("--samples", type=int, default=64)
    return parser


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "gradcheck": cmd_gradcheck,
            "energy": cmd_energy, "inspect": cmd_inspect}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ad.NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, checkpoint.CheckpointError) as exc:
        print(f"I/O failure: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
