"""Central finite-difference checks for ops, losses and whole networks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .data import make_rng, synth_dataset, encode_input, EncoderConfig
from .losses import LossConfig, cross_entropy, pnb_loss, pnb_partition
from .network import Network, NetworkSpec
from .neurons import NeuronConfig
from .surrogates import SurrogateSpec, smoothed_forward, cf_total_grad, smoothed_forward_dalpha
from .trainer import compute_loss

OPS_TOL = 1e-5
END_TO_END_TOL = 1e-4


def numerical_grad(f, arr: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f()`` with respect to ``arr`` (perturbed in place)."""
    grad = np.zeros_like(arr)
    flat = arr.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def max_rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Largest ``|a - n| / max(|a|, |n|, floor)`` over elements."""
    analytic = np.asarray(analytic, dtype=float)
    numeric = np.asarray(numeric, dtype=float)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def check_function(fn, arrays: list, h: float = 1e-5) -> float:
    """Compare autodiff gradients of scalar ``fn(*tensors)`` against finite differences."""
    leaves = [ad.Tensor(a.copy(), requires_grad=True) for a in arrays]
    fn(*leaves).backward()
    worst = 0.0
    for leaf in leaves:
        def f():
            with ad.no_grad():
                return fn(*[ad.Tensor(l.data) for l in leaves]).item()
        numeric = numerical_grad(f, leaf.data, h)
        worst = max(worst, max_rel_error(leaf.grad, numeric))
    return worst


# ---------------------------------------------------------------- op cases


def _weighted(out: ad.Tensor, seed: int = 7) -> ad.Tensor:
    # random projection so every output element contributes distinctly
    w = make_rng(seed).uniform(0.5, 1.5, out.shape)
    return (out * w).sum()


def _tsg_activation(u, alpha):
    cfg = NeuronConfig()
    a = float(alpha.data)
    return ad.custom_activation(
        u,
        lambda z: smoothed_forward(z, a, cfg),
        lambda z: cf_total_grad(z, a, cfg),
        aux=alpha,
        aux_rule=lambda z: smoothed_forward_dalpha(z, a, cfg),
    )


def _op_cases() -> dict:
    r = make_rng(3)
    n = lambda *s: r.standard_normal(s)  # noqa: E731
    pos = lambda *s: r.uniform(0.5, 2.0, s)  # noqa: E731
    away = lambda *s: r.choice([-1, 1], s) * r.uniform(0.2, 2.0, s)  # noqa: E731
    gamma, beta = pos(3), n(3)
    return {
        "add": ([n(3, 4), n(1, 4)], lambda a, b: _weighted(a + b)),
        "sub": ([n(3, 4), n(3, 1)], lambda a, b: _weighted(a - b)),
        "mul": ([n(3, 4), n(4)], lambda a, b: _weighted(a * b)),
        "scalar_mul": ([n(3, 4)], lambda a: _weighted(a * 2.5)),
        "div": ([n(3, 4), pos(3, 4)], lambda a, b: _weighted(a / b)),
        "pow": ([pos(3, 4)], lambda a: _weighted(a ** -0.5)),
        "matmul": ([n(3, 4), n(4, 2)], lambda a, b: _weighted(a @ b)),
        "conv2d": ([n(2, 2, 5, 5), n(3, 2, 3, 3)], lambda x, w: _weighted(ad.conv2d(x, w, stride=2, padding=1))),
        "reduce_sum": ([n(3, 4, 2)], lambda a: _weighted(a.sum(axis=1))),
        "reduce_mean": ([n(3, 4, 2)], lambda a: _weighted(a.mean(axis=(0, 2), keepdims=True))),
        "exp": ([n(3, 4)], lambda a: _weighted(ad.exp(a))),
        "log": ([pos(3, 4)], lambda a: _weighted(ad.log(a))),
        "abs": ([away(3, 4)], lambda a: _weighted(ad.abs(a))),
        "sigmoid": ([n(3, 4)], lambda a: _weighted(ad.sigmoid(a))),
        "softmax": ([n(3, 4)], lambda a: _weighted(ad.softmax(a, axis=1))),
        "log_softmax": ([n(3, 4)], lambda a: _weighted(ad.log_softmax(a, axis=1))),
        "reshape_transpose": ([n(2, 6)], lambda a: _weighted(a.reshape(3, 4).transpose(1, 0))),
        "getitem_concat": ([n(4, 3)], lambda a: _weighted(ad.concat([a[2:4], a[0:1]], axis=0))),
        "avg_pool2d": ([n(2, 2, 4, 4)], lambda a: _weighted(ad.avg_pool2d(a, 2))),
        "minimum": ([away(3, 4)], lambda a: _weighted(ad.minimum(a, 0.1))),
        "tdbn": (
            [n(6, 3, 2, 2), gamma, beta],
            lambda x, g, b: _weighted(ad.tdbn_forward(x, 1.0, g, b, eps=1e-5)),
        ),
        "custom_activation": ([n(3, 4) * 1.5, np.array(0.7)], lambda u, a: _weighted(_tsg_activation(u, a))),
    }


OP_CASES = _op_cases()


@dataclass
class CategoryResult:
    name: str
    max_error: float
    worst: str
    threshold: float
    skipped: bool = False

    @property
    def passed(self) -> bool:
        return self.skipped or self.max_error < self.threshold


def check_ops(cases: dict | None = None) -> CategoryResult:
    cases = OP_CASES if cases is None else cases
    errors = {name: check_function(fn, arrays) for name, (arrays, fn) in cases.items()}
    worst = max(errors, key=errors.get)
    return CategoryResult("ops", errors[worst], worst, OPS_TOL)


def check_losses(losscfg: LossConfig, seed: int = 0) -> list:
    r = make_rng(seed, 1)
    scores, labels = r.standard_normal((5, 3)), r.integers(0, 3, 5)
    ce_err = check_function(lambda s: cross_entropy(s, labels), [scores])
    results = [CategoryResult("cross_entropy", ce_err, "cross_entropy", OPS_TOL)]
    if losscfg.lam == 0:
        results.append(CategoryResult("pnb", 0.0, "", OPS_TOL, skipped=True))
        return results
    cfg = NeuronConfig()
    u = r.uniform(-2.6, 2.6, 64)
    # keep every sample at least 1e-3 from a region edge
    u = np.where(np.abs(u - np.round(u)) < 1e-3, u + 2e-3, u)
    region = pnb_partition(u, cfg, include_saturated=losscfg.include_saturated)
    lc = LossConfig(lam=losscfg.lam, epsilon=losscfg.epsilon, term_clamp=1e6,
                    include_saturated=losscfg.include_saturated)
    pnb_err = check_function(lambda t: pnb_loss(t, cfg, lc, region=region), [u])
    results.append(CategoryResult("pnb", pnb_err, "pnb_loss", OPS_TOL))
    return results


def default_e2e_spec(time_steps: int = 4, neuron: NeuronConfig | None = None,
                     surrogate: SurrogateSpec | None = None) -> NetworkSpec:
    return NetworkSpec(
        layers=[
            {"type": "linear", "out": 6},
            {"type": "tdbn"},
            {"type": "spike"},
            {"type": "linear", "out": 4},
            {"type": "spike"},
            {"type": "readout", "classes": 2},
        ],
        input_shape=(3,),
        time_steps=time_steps,
        neuron=neuron or NeuronConfig(),
        surrogate=surrogate or SurrogateSpec("tsg"),
    )


def end_to_end(spec: NetworkSpec | None = None, seed: int = 0, batch: int = 8,
               losscfg: LossConfig = LossConfig(lam=0.0), h: float = 1e-5) -> CategoryResult:
    """BPTT gradients of the smoothed network versus finite differences, all parameters."""
    spec = spec or default_e2e_spec()
    net = Network(spec, make_rng(seed, 100))
    if net.tsg is not None:
        # spread the steepness so every (t, l) slot differs
        net.tsg.x.data[...] = make_rng(seed, 5).uniform(-1.0, 1.0, net.tsg.x.shape)
    data = synth_dataset("gaussians", max(batch, 20), seed, dim=spec.input_shape[0], separation=2.0)
    enc = encode_input(data.x[:batch] * 1.5, EncoderConfig("direct", spec.time_steps))
    labels = data.y[:batch]

    net.zero_grad()
    loss, *_ = compute_loss(net, enc, labels, losscfg, smooth=True)
    loss.backward()

    def f():
        with ad.no_grad():
            value, *_ = compute_loss(net, enc, labels, losscfg, smooth=True)
        return value.item()

    worst, worst_name = 0.0, ""
    for p in net.parameters():
        err = max_rel_error(p.grad, numerical_grad(f, p.data, h))
        if err >= worst:
            worst, worst_name = err, p.name
    return CategoryResult("end_to_end", worst, worst_name, END_TO_END_TOL)


def run_suite(losscfg: LossConfig = LossConfig(), spec: NetworkSpec | None = None,
              cases: dict | None = None) -> list:
    results = [check_ops(cases)]
    results += check_losses(losscfg)
    results.append(end_to_end(spec))
    return results
