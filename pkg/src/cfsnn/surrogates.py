"""Surrogate derivatives for spike firing, fixed and learnable.

Every family has an exact antiderivative ``S`` with ``S(0) = 0``. Swapping the
firing function for ``S`` turns a spiking network into an ordinary
differentiable one whose true gradient equals the surrogate gradient, which
is what the finite-difference checks rely on.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .neurons import NeuronConfig

FAMILIES = ("rectangular", "plg", "cf_rectangular", "tsg")
LEVEL_MODES = ("sum", "nearest")


# ---------------------------------------------------------------- scalar families


def sg_rectangular(u, theta: float, alpha: float):
    """``1/alpha`` inside the open window ``|u - theta| < alpha/2``, else 0."""
    _check_alpha(alpha)
    u = np.asarray(u, dtype=float)
    return np.where(np.abs(u - theta) < alpha / 2.0, 1.0 / alpha, 0.0)


def sg_plg(u, theta: float, alpha: float):
    """Triangle of height ``alpha`` and half-width ``1/alpha`` centred at ``theta``."""
    _check_alpha(alpha)
    u = np.asarray(u, dtype=float)
    return np.maximum(0.0, alpha * (1.0 - alpha * np.abs(u - theta)))


def cf_rect_window(cfg: NeuronConfig, sign: int) -> tuple[float, float]:
    # half-width uses |theta_n| on the negative side so the window is non-empty
    if sign > 0:
        centre = (cfg.k_p_max + 1) / 2.0 * cfg.theta_p
        half = cfg.theta_p * cfg.k_p_max / 2.0
    else:
        centre = (cfg.k_n_max + 1) / 2.0 * cfg.theta_n
        half = abs(cfg.theta_n) * cfg.k_n_max / 2.0
    return centre - half, centre + half


def sg_cf_rect(u, cfg: NeuronConfig, alpha: float):
    """One rectangle of height ``alpha`` over all positive levels, mirrored below zero."""
    _check_alpha(alpha)
    u = np.asarray(u, dtype=float)
    lo_p, hi_p = cf_rect_window(cfg, +1)
    lo_n, hi_n = cf_rect_window(cfg, -1)
    pos = (u >= 0) & (u > lo_p) & (u < hi_p)
    neg = (u < 0) & (u > lo_n) & (u < hi_n)
    return np.where(pos | neg, float(alpha), 0.0)


def tsg_eval(u, k: int, sign: str, alpha: float, cfg: NeuronConfig):
    """Per-level learnable triangle centred at ``k*theta_p`` or ``k*theta_n``."""
    if sign not in ("positive", "negative"):
        raise ValueError(f"sign must be 'positive' or 'negative', got {sign!r}")
    bound = cfg.k_p_max if sign == "positive" else cfg.k_n_max
    if not 1 <= k <= bound:
        raise ValueError(f"level {k} outside 1..{bound} for {sign} spikes")
    centre = k * (cfg.theta_p if sign == "positive" else cfg.theta_n)
    return sg_plg(u, centre, alpha)


def level_centres(cfg: NeuronConfig) -> np.ndarray:
    if cfg.kind == "lif":
        return np.array([cfg.theta_p])
    pos = [k * cfg.theta_p for k in range(1, cfg.k_p_max + 1)]
    neg = [k * cfg.theta_n for k in range(1, cfg.k_n_max + 1)]
    return np.array(pos + neg)


def cf_total_grad(u, alpha: float, cfg: NeuronConfig):
    """Sum of the per-level triangles: the CF surrogate for ``ds/du``."""
    _check_alpha(alpha)
    u = np.asarray(u, dtype=float)
    total = np.zeros(u.shape)
    for c in level_centres(cfg):
        total = total + sg_plg(u, c, alpha)
    return total


def _check_alpha(alpha: float) -> None:
    if not alpha > 0:
        raise ValueError(f"surrogate alpha must be positive, got {alpha}")


# ---------------------------------------------------------------- antiderivatives


def _tri_cdf(u, c, alpha):
    z = alpha * (u - c)
    return np.where(
        z <= -1.0, 0.0,
        np.where(z <= 0.0, 0.5 * (1.0 + z) ** 2,
                 np.where(z < 1.0, 1.0 - 0.5 * (1.0 - z) ** 2, 1.0)),
    )


def _tri_cdf_dalpha(u, c, alpha):
    z = alpha * (u - c)
    return np.maximum(0.0, 1.0 - np.abs(z)) * (u - c)


def _rect_cdf(u, c, alpha):
    return np.clip((u - c) / alpha + 0.5, 0.0, 1.0)


def _rect_cdf_dalpha(u, c, alpha):
    inside = np.abs(u - c) < alpha / 2.0
    return np.where(inside, -(u - c) / alpha**2, 0.0)


def smoothed_forward(u, alpha: float, cfg: NeuronConfig):
    """Exact antiderivative of :func:`cf_total_grad` anchored at ``S(0) = 0``."""
    _check_alpha(alpha)
    u = np.asarray(u, dtype=float)
    total = np.zeros(u.shape)
    for c in level_centres(cfg):
        total = total + (_tri_cdf(u, c, alpha) - _tri_cdf(0.0, c, alpha))
    return total


def smoothed_forward_dalpha(u, alpha: float, cfg: NeuronConfig):
    """Partial of :func:`smoothed_forward` with respect to ``alpha``."""
    u = np.asarray(u, dtype=float)
    total = np.zeros(u.shape)
    for c in level_centres(cfg):
        total = total + (_tri_cdf_dalpha(u, c, alpha) - _tri_cdf_dalpha(0.0, c, alpha))
    return total


# ---------------------------------------------------------------- learnable steepness


@dataclass
class TsgParams:
    """Learnable ``alpha[t, l] = scale * sigmoid(x[t, l]) + bias``."""

    x: ad.Parameter
    scale: float = 4.0
    bias: float = 0.5

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError("tsg scale must be positive")
        if self.bias < 0:
            raise ValueError("tsg bias must be non-negative")

    @classmethod
    def create(cls, steps: int, layers: int, scale: float = 4.0, bias: float = 0.5,
               init: float = 0.0) -> "TsgParams":
        return cls(ad.Parameter(np.full((steps, layers), float(init)), name="tsg.x"), scale, bias)

    @property
    def grid(self) -> tuple[int, int]:
        return self.x.shape

    def _check(self, t: int, l: int) -> None:
        steps, layers = self.grid
        if not (0 <= t < steps and 0 <= l < layers):
            raise IndexError(f"(t={t}, l={l}) outside the {steps}x{layers} TSG grid")

    def alpha(self, t: int, l: int) -> ad.Tensor:
        """Differentiable scalar ``alpha[t, l]``."""
        self._check(t, l)
        return ad.sigmoid(self.x[t, l]) * self.scale + self.bias

    def alpha_value(self, t: int, l: int) -> float:
        self._check(t, l)
        return float(self.scale * ad._sigmoid(self.x.data[t, l]) + self.bias)

    def alpha_table(self) -> np.ndarray:
        return self.scale * ad._sigmoid(self.x.data) + self.bias


def tsg_alpha(params: TsgParams, t: int, l: int) -> float:
    return params.alpha_value(t, l)


# ---------------------------------------------------------------- family dispatch


@dataclass(frozen=True)
class SurrogateSpec:
    family: str = "tsg"
    alpha: float = 1.0
    tsg_scale: float = 4.0
    tsg_bias: float = 0.5
    level_mode: str = "sum"

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"surrogate family must be one of {FAMILIES}, got {self.family!r}")
        if self.family != "tsg" and not self.alpha > 0:
            raise ValueError("fixed surrogate alpha must be positive")
        if self.level_mode not in LEVEL_MODES:
            raise ValueError(f"level_mode must be one of {LEVEL_MODES}")

    @property
    def learnable(self) -> bool:
        return self.family == "tsg"


def _nearest_level_mask(u, c, cfg: NeuronConfig):
    if cfg.kind == "lif":
        return np.ones(np.shape(u), dtype=bool)
    if c > 0:
        k = np.clip(np.rint(u / cfg.theta_p), 1, cfg.k_p_max)
        return (u >= 0) & (k * cfg.theta_p == c)
    k = np.clip(np.rint(u / cfg.theta_n), 1, cfg.k_n_max)
    return (u < 0) & (k * cfg.theta_n == c)


def surrogate_grad(u, alpha: float, cfg: NeuronConfig, spec: SurrogateSpec):
    """Per-element ``ds/du`` installed in the backward pass."""
    u = np.asarray(u, dtype=float)
    if spec.family == "cf_rectangular":
        if cfg.kind != "cf":
            raise ValueError("cf_rectangular surrogate needs a CF neuron")
        return sg_cf_rect(u, cfg, alpha)
    kernel = sg_rectangular if spec.family == "rectangular" else sg_plg
    total = np.zeros(u.shape)
    for c in level_centres(cfg):
        term = kernel(u, c, alpha)
        if spec.level_mode == "nearest":
            term = np.where(_nearest_level_mask(u, c, cfg), term, 0.0)
        total = total + term
    return total


def surrogate_antiderivative(u, alpha: float, cfg: NeuronConfig, spec: SurrogateSpec):
    """``S(u) = integral_0^u surrogate_grad``; only defined for ``level_mode='sum'``."""
    if spec.level_mode != "sum":
        raise ValueError("smoothed forward is only defined for level_mode='sum'")
    u = np.asarray(u, dtype=float)
    if spec.family == "cf_rectangular":
        lo_p, hi_p = cf_rect_window(cfg, +1)
        lo_n, hi_n = cf_rect_window(cfg, -1)
        pos = np.clip(np.maximum(u, 0.0), lo_p, hi_p) - lo_p
        neg = np.clip(np.minimum(u, 0.0), lo_n, hi_n) - hi_n
        return alpha * (pos + neg)
    cdf = _rect_cdf if spec.family == "rectangular" else _tri_cdf
    total = np.zeros(u.shape)
    for c in level_centres(cfg):
        total = total + (cdf(u, c, alpha) - cdf(0.0, c, alpha))
    return total


def surrogate_antiderivative_dalpha(u, alpha: float, cfg: NeuronConfig, spec: SurrogateSpec):
    """``dS/dalpha``: the gradient a learnable steepness receives per element."""
    u = np.asarray(u, dtype=float)
    if spec.family == "cf_rectangular":
        return surrogate_antiderivative(u, alpha, cfg, spec) / alpha
    dcdf = _rect_cdf_dalpha if spec.family == "rectangular" else _tri_cdf_dalpha
    total = np.zeros(u.shape)
    for c in level_centres(cfg):
        total = total + (dcdf(u, c, alpha) - dcdf(0.0, c, alpha))
    return total
