"""LIF and circulate-firing (CF) neuron state machines.

All functions here are plain numpy reference dynamics. The differentiable
versions used inside networks live in :mod:`cfsnn.network` and are checked
against these.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

RESET_MODES = ("hard", "soft", "none")
KINDS = ("lif", "cf")


@dataclass(frozen=True)
class NeuronConfig:
    """Neuron constants. ``theta_p`` doubles as the LIF threshold.

    ``reset_mode="none"`` disables reset entirely and exists for the
    membrane-variance diagnostic only.
    """

    kind: str = "cf"
    k_tau: float = 0.25
    theta_p: float = 1.0
    theta_n: float = -1.0
    k_p_max: int = 2
    k_n_max: int = 2
    reset_mode: str = "soft"
    u_reset: float = 0.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"neuron kind must be one of {KINDS}, got {self.kind!r}")
        if self.reset_mode not in RESET_MODES:
            raise ValueError(f"reset_mode must be one of {RESET_MODES}, got {self.reset_mode!r}")
        if not self.theta_p > 0:
            raise ValueError(f"theta_p must be positive, got {self.theta_p}")
        if not self.theta_n < 0:
            raise ValueError(f"theta_n must be strictly negative, got {self.theta_n}")
        if self.k_p_max < 1 or self.k_n_max < 1:
            raise ValueError("k_p_max and k_n_max must be >= 1")
        if not 0.0 <= self.k_tau <= 1.0:
            raise ValueError(f"k_tau must lie in [0, 1], got {self.k_tau}")

    @property
    def threshold(self) -> float:
        return self.theta_p

    @property
    def max_spike(self) -> int:
        return 1 if self.kind == "lif" else max(self.k_p_max, self.k_n_max)


@dataclass
class LayerState:
    v: np.ndarray
    step_index: int = 0

    @classmethod
    def zeros(cls, shape) -> "LayerState":
        return cls(np.zeros(shape))


def _check_shape(v: np.ndarray, current: np.ndarray) -> None:
    if np.shape(v) != np.shape(current):
        raise ValueError(
            f"input current shape {list(np.shape(current))} does not match "
            f"membrane shape {list(np.shape(v))}"
        )


def charge(v_prev, current, cfg: NeuronConfig):
    return cfg.k_tau * v_prev + current


def lif_fire(u, cfg: NeuronConfig) -> np.ndarray:
    # H(0) = 1: fires at exactly the threshold
    return (np.asarray(u) >= cfg.theta_p).astype(float)


def lif_reset(u, s, cfg: NeuronConfig) -> np.ndarray:
    if cfg.reset_mode == "hard":
        return u * (1.0 - s) + s * cfg.u_reset
    if cfg.reset_mode == "soft":
        return u - s * cfg.theta_p
    return np.array(u, dtype=float)


def lif_step(state: LayerState, current, cfg: NeuronConfig):
    """One LIF step. Returns ``(spikes, new_state)``; ``u`` is ``k_tau*v + I``."""
    if cfg.kind != "lif":
        raise ValueError("lif_step needs a config with kind='lif'")
    current = np.asarray(current, dtype=float)
    _check_shape(state.v, current)
    u = charge(state.v, current, cfg)
    s = lif_fire(u, cfg)
    return s, LayerState(lif_reset(u, s, cfg), state.step_index + 1)


def cf_fire(u, cfg: NeuronConfig) -> np.ndarray:
    """Signed spike count in ``{-K_N, ..., K_P}`` using strict threshold crossings."""
    u = np.asarray(u, dtype=float)
    s = np.zeros(u.shape)
    for k in range(1, cfg.k_p_max + 1):
        s += u > k * cfg.theta_p
    for k in range(1, cfg.k_n_max + 1):
        s -= u < k * cfg.theta_n
    return s


def cf_reset(u, spikes, cfg: NeuronConfig) -> np.ndarray:
    u = np.asarray(u, dtype=float)
    spikes = np.asarray(spikes, dtype=float)
    if np.any(spikes > cfg.k_p_max) or np.any(spikes < -cfg.k_n_max):
        raise ValueError(
            f"spike counts must lie in [{-cfg.k_n_max}, {cfg.k_p_max}], "
            f"got range [{spikes.min()}, {spikes.max()}]"
        )
    if cfg.reset_mode == "none":
        return u.copy()
    return np.where(
        u > cfg.theta_p,
        u - spikes * cfg.theta_p,
        np.where(u < cfg.theta_n, u + spikes * cfg.theta_n, u),
    )


def cf_step(state: LayerState, current, cfg: NeuronConfig):
    if cfg.kind != "cf":
        raise ValueError("cf_step needs a config with kind='cf'")
    current = np.asarray(current, dtype=float)
    _check_shape(state.v, current)
    u = charge(state.v, current, cfg)
    s = cf_fire(u, cfg)
    return s, LayerState(cf_reset(u, s, cfg), state.step_index + 1)


def step(state: LayerState, current, cfg: NeuronConfig):
    return (lif_step if cfg.kind == "lif" else cf_step)(state, current, cfg)


# ---------------------------------------------------------------- spike accounting


@dataclass
class SpikeRecord:
    """Spike statistics per spiking layer and time step, summed over batches.

    ``magnitude[name][t]`` is the summed ``|s|``; ``nonzero`` counts neurons
    with ``s != 0``; ``elements[name][t]`` counts neuron evaluations.
    ``values`` histograms the signed counts.
    """

    magnitude: dict = field(default_factory=dict)
    nonzero: dict = field(default_factory=dict)
    elements: dict = field(default_factory=dict)
    values: dict = field(default_factory=dict)
    batches: int = 0

    def add(self, name: str, t: int, spikes: np.ndarray) -> None:
        for table in (self.magnitude, self.nonzero, self.elements):
            table.setdefault(name, {})
        self.magnitude[name][t] = self.magnitude[name].get(t, 0.0) + float(np.abs(spikes).sum())
        self.nonzero[name][t] = self.nonzero[name].get(t, 0) + int(np.count_nonzero(spikes))
        self.elements[name][t] = self.elements[name].get(t, 0) + int(spikes.size)
        vals, counts = np.unique(spikes, return_counts=True)
        hist = self.values.setdefault(name, {})
        for v, c in zip(vals.tolist(), counts.tolist()):
            hist[int(v)] = hist.get(int(v), 0) + int(c)

    def merge(self, other: "SpikeRecord") -> "SpikeRecord":
        for name in other.magnitude:
            for table in (self.magnitude, self.nonzero, self.elements):
                table.setdefault(name, {})
            for t in other.magnitude[name]:
                self.magnitude[name][t] = self.magnitude[name].get(t, 0.0) + other.magnitude[name][t]
                self.nonzero[name][t] = self.nonzero[name].get(t, 0) + other.nonzero[name][t]
                self.elements[name][t] = self.elements[name].get(t, 0) + other.elements[name][t]
        for name, hist in other.values.items():
            mine = self.values.setdefault(name, {})
            for v, c in hist.items():
                mine[v] = mine.get(v, 0) + c
        self.batches += other.batches
        return self

    @property
    def layers(self) -> list[str]:
        return list(self.magnitude)

    def firing_rate(self, name: str, count_mode: str = "magnitude") -> float:
        """Mean spike magnitude (or nonzero fraction) per neuron per step."""
        if name not in self.elements:
            raise KeyError(f"no spikes recorded for layer {name!r}")
        table = self.magnitude if count_mode == "magnitude" else self.nonzero
        total = sum(table[name].values())
        elements = sum(self.elements[name].values())
        return total / elements if elements else 0.0


# ---------------------------------------------------------------- membrane diagnostics


def variance_oracle(t: int, k_tau: float, theta: float = 1.0) -> float:
    """Variance of ``u^t`` without reset for i.i.d. N(0, theta^2) inputs.

    Exact for the recurrence ``u^t = k_tau*u^{t-1} + I^t``:
    ``theta^2 * sum_{i<t} k_tau^(2i)``.
    """
    if t < 1:
        raise ValueError("t counts from 1")
    return float(theta**2 * sum(k_tau ** (2 * i) for i in range(t)))


def variance_literal(t: int, k_tau: float, theta: float = 1.0) -> float:
    """The closed form ``(1 + (t-1) k_tau^2) theta^2``; agrees with the oracle for t <= 2."""
    if t < 1:
        raise ValueError("t counts from 1")
    return float((1.0 + (t - 1) * k_tau**2) * theta**2)


def simulate_no_reset(inputs: np.ndarray, k_tau: float) -> np.ndarray:
    """Pre-reset potentials for input currents of shape [T, ...] with reset disabled."""
    u = np.zeros(inputs.shape[1:])
    out = np.empty_like(inputs, dtype=float)
    for t in range(inputs.shape[0]):
        u = k_tau * u + inputs[t]
        out[t] = u
    return out


@dataclass
class HistogramTable:
    edges: np.ndarray
    rows: list  # (layer, step, counts, mean, variance, oracle_variance, literal_variance)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(
            ["layer", "step", "kind", "bin_left", "bin_right", "count",
             "mean", "variance", "oracle_variance", "literal_variance"]
        )
        for layer, step_, counts, mu, var, oracle, literal in self.rows:
            for left, right, c in zip(self.edges[:-1], self.edges[1:], counts):
                writer.writerow([layer, step_, "bin", f"{left:.6g}", f"{right:.6g}", int(c), "", "", "", ""])
            writer.writerow([layer, step_, "summary", "", "", int(counts.sum()),
                             repr(mu), repr(var), _fmt(oracle), _fmt(literal)])
        return buf.getvalue()


def _fmt(x) -> str:
    return "" if x is None else repr(x)


def histogram_edges(lo: float, hi: float, width: float) -> np.ndarray:
    if not hi > lo or not width > 0:
        raise ValueError(f"bad bin spec lo={lo} hi={hi} width={width}")
    n = int(round((hi - lo) / width))
    return lo + width * np.arange(n + 1)


def membrane_histogram(samples: dict, bins=(-3.05, 3.05, 0.1), k_tau: float | None = None,
                       theta: float = 1.0) -> HistogramTable:
    """Histogram pre-reset potentials keyed by ``(layer, step)``.

    ``step`` counts from 0; when ``k_tau`` is given each summary row carries
    the no-reset variance oracle for step ``step + 1``.
    """
    if not samples:
        raise ValueError("membrane_histogram needs at least one recorded step")
    edges = histogram_edges(*bins)
    rows = []
    for (layer, step_), values in samples.items():
        values = np.asarray(values, dtype=float).reshape(-1)
        if values.size == 0:
            raise ValueError(f"empty sample set for layer {layer!r} step {step_}")
        counts, _ = np.histogram(values, bins=edges)
        oracle = literal = None
        if k_tau is not None:
            oracle = variance_oracle(step_ + 1, k_tau, theta)
            literal = variance_literal(step_ + 1, k_tau, theta)
        rows.append((layer, step_, counts, float(values.mean()), float(values.var()), oracle, literal))
    return HistogramTable(edges, rows)
