"""Network assembly and T-step unrolling.

Activations are kept as ``[T*B, ...]`` tensors (time-major), so stateless
layers run on all steps at once and tdBN statistics are joint over time,
batch and space. Spiking layers slice out one step at a time.
"""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .neurons import NeuronConfig, SpikeRecord, cf_fire, lif_fire
from .surrogates import (
    SurrogateSpec,
    TsgParams,
    surrogate_antiderivative,
    surrogate_antiderivative_dalpha,
    surrogate_grad,
)

LAYER_TYPES = ("linear", "conv2d", "tdbn", "spike", "residual", "avgpool", "flatten", "readout")
AFFINE = ("linear", "conv2d", "tdbn")


@dataclass
class NetworkSpec:
    layers: list
    input_shape: tuple
    time_steps: int = 4
    neuron: NeuronConfig = field(default_factory=NeuronConfig)
    surrogate: SurrogateSpec = field(default_factory=SurrogateSpec)
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1

    def __post_init__(self):
        self.input_shape = tuple(int(d) for d in self.input_shape)
        self.layers = [dict(d) for d in self.layers]

    def validate(self) -> None:
        if self.time_steps < 1:
            raise ValueError("time_steps must be >= 1")
        if not self.layers:
            raise ValueError("network has no layers")
        types = [d.get("type") for d in self.layers]
        for i, t in enumerate(types):
            if t not in LAYER_TYPES:
                raise ValueError(f"layer {i}: unknown type {t!r}; expected one of {LAYER_TYPES}")
        if types.count("readout") != 1 or types[-1] != "readout":
            raise ValueError("exactly one readout layer must terminate the network")
        if len(types) < 2 or types[-2] != "spike":
            raise ValueError("the readout must follow a spiking layer")
        for i, t in enumerate(types):
            if t == "spike" and (i == 0 or types[i - 1] not in AFFINE + ("residual",)):
                raise ValueError(f"layer {i}: spiking layers must follow linear, conv2d, tdbn or residual")
            if t == "residual" and (i + 1 >= len(types) or types[i + 1] != "spike"):
                raise ValueError(f"layer {i}: a residual block must feed a spiking layer")

    def neuron_for(self, desc: dict) -> NeuronConfig:
        overrides = {k: v for k, v in desc.items() if k in NeuronConfig.__dataclass_fields__}
        return NeuronConfig(**{**asdict(self.neuron), **overrides}) if overrides else self.neuron

    def to_dict(self) -> dict:
        return {
            "layers": copy.deepcopy(self.layers),
            "input_shape": list(self.input_shape),
            "time_steps": self.time_steps,
            "neuron": asdict(self.neuron),
            "surrogate": asdict(self.surrogate),
            "bn_eps": self.bn_eps,
            "bn_momentum": self.bn_momentum,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        d = dict(d)
        d["neuron"] = NeuronConfig(**d["neuron"])
        d["surrogate"] = SurrogateSpec(**d["surrogate"])
        return cls(**d)


@dataclass
class RunContext:
    time_steps: int
    batch: int
    training: bool
    smooth: bool = False
    tsg: TsgParams | None = None
    record: SpikeRecord = field(default_factory=SpikeRecord)
    membranes: dict | None = None  # (layer, t) -> pre-firing Tensor, for PNB
    membrane_log: dict | None = None  # (layer, t) -> ndarray copy, for diagnostics


class Layer:
    name = ""

    def forward(self, x: ad.Tensor, run: RunContext) -> ad.Tensor:
        raise NotImplementedError

    def parameters(self) -> list:
        return []

    def buffers(self) -> dict:
        return {}

    def flops(self) -> list:
        """``(layer name, MACs per sample, feeding spiking layer or None)``."""
        return []


class Linear(Layer):
    def __init__(self, name, in_features, out_features, rng, bias=True):
        self.name = name
        bound = 1.0 / np.sqrt(in_features)
        self.weight = ad.Parameter(rng.uniform(-bound, bound, (in_features, out_features)), f"{name}.weight")
        self.bias = ad.Parameter(rng.uniform(-bound, bound, out_features), f"{name}.bias") if bias else None
        self.in_features, self.out_features = in_features, out_features
        self.source = None

    def forward(self, x, run):
        if x.ndim != 2:
            raise ValueError(f"{self.name}: linear expects [N, F] input, got {list(x.shape)}; add a flatten layer")
        y = x @ self.weight
        return y + self.bias if self.bias is not None else y

    def parameters(self):
        return [p for p in (self.weight, self.bias) if p is not None]

    def flops(self):
        return [(self.name, self.in_features * self.out_features, self.source)]


class Conv2d(Layer):
    def __init__(self, name, in_ch, out_ch, kernel, stride, padding, rng, in_hw, bias=False):
        self.name = name
        bound = 1.0 / np.sqrt(in_ch * kernel * kernel)
        self.weight = ad.Parameter(rng.uniform(-bound, bound, (out_ch, in_ch, kernel, kernel)), f"{name}.weight")
        self.bias = ad.Parameter(np.zeros(out_ch), f"{name}.bias") if bias else None
        self.stride, self.padding, self.kernel = stride, padding, kernel
        self.in_ch, self.out_ch = in_ch, out_ch
        h, w = in_hw
        self.out_hw = ((h + 2 * padding - kernel) // stride + 1, (w + 2 * padding - kernel) // stride + 1)
        if min(self.out_hw) <= 0:
            raise ValueError(f"{name}: kernel {kernel} does not fit {h}x{w} input")
        self.source = None

    def forward(self, x, run):
        y = ad.conv2d(x, self.weight, self.stride, self.padding)
        if self.bias is not None:
            y = y + self.bias.reshape(1, -1, 1, 1)
        return y

    def parameters(self):
        return [p for p in (self.weight, self.bias) if p is not None]

    def flops(self):
        ho, wo = self.out_hw
        return [(self.name, self.out_ch * self.in_ch * self.kernel**2 * ho * wo, self.source)]


class TdBN(Layer):
    def __init__(self, name, channels, theta, eps, momentum):
        self.name = name
        self.gamma = ad.Parameter(np.ones(channels), f"{name}.gamma")
        self.beta = ad.Parameter(np.zeros(channels), f"{name}.beta")
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.theta, self.eps, self.momentum = theta, eps, momentum

    def forward(self, x, run):
        return ad.tdbn_forward(
            x, self.theta, self.gamma, self.beta, self.eps,
            self.running_mean, self.running_var, training=run.training, momentum=self.momentum,
        )

    def parameters(self):
        return [self.gamma, self.beta]

    def buffers(self):
        return {f"{self.name}.running_mean": self.running_mean, f"{self.name}.running_var": self.running_var}


class Spiking(Layer):
    """LIF or CF neurons unrolled over time with a surrogate-gradient firing node."""

    def __init__(self, name, cfg: NeuronConfig, surrogate: SurrogateSpec, index: int):
        if cfg.kind == "cf" and cfg.reset_mode == "hard":
            raise ValueError(f"{name}: CF neurons use soft reset")
        self.name, self.cfg, self.surrogate, self.index = name, cfg, surrogate, index

    def _fire(self, u: ad.Tensor, t: int, run: RunContext) -> ad.Tensor:
        cfg, spec = self.cfg, self.surrogate
        alpha = None
        if spec.learnable:
            if run.tsg is None:
                raise ValueError(f"{self.name}: TSG surrogate without TSG parameters")
            alpha = run.tsg.alpha(t, self.index)
            a = float(alpha.data)
        else:
            a = spec.alpha
        if run.smooth:
            forward = lambda z: surrogate_antiderivative(z, a, cfg, spec)  # noqa: E731
        else:
            forward = (lambda z: cf_fire(z, cfg)) if cfg.kind == "cf" else (lambda z: lif_fire(z, cfg))
        return ad.custom_activation(
            u,
            forward,
            lambda z: surrogate_grad(z, a, cfg, spec),
            aux=alpha,
            aux_rule=lambda z: surrogate_antiderivative_dalpha(z, a, cfg, spec),
            name=f"fire[{self.name}]",
        )

    def _reset(self, u: ad.Tensor, s: ad.Tensor) -> ad.Tensor:
        cfg = self.cfg
        if cfg.reset_mode == "none":
            return u
        if cfg.kind == "cf":
            # s is 0 on (theta_n, theta_p), so choosing the coefficient by sign
            # matches the piecewise reset and stays continuous under smoothing
            coef = np.where(u.data >= 0, cfg.theta_p, -cfg.theta_n)
            return u - s * coef
        if cfg.reset_mode == "soft":
            return u - s * cfg.theta_p
        return u * (1.0 - s) + s * cfg.u_reset

    def forward(self, x, run):
        steps = run.time_steps
        batch = x.shape[0] // steps
        v = None
        outputs = []
        for t in range(steps):
            try:
                current = x[t * batch:(t + 1) * batch]
                u = current if v is None else v * self.cfg.k_tau + current
                if not np.all(np.isfinite(u.data)):
                    raise ad.NumericalError("non-finite membrane potential")
                s = self._fire(u, t, run)
                v = self._reset(u, s)
            except ad.NumericalError as exc:
                raise ad.NumericalError(f"layer {self.name}, step {t}: {exc}") from exc
            if run.membranes is not None:
                run.membranes[(self.name, t)] = u
            if run.membrane_log is not None:
                run.membrane_log[(self.name, t)] = u.data.copy()
            run.record.add(self.name, t, s.data)
            outputs.append(s)
        return outputs[0] if steps == 1 else ad.concat(outputs, axis=0)


class AvgPool(Layer):
    def __init__(self, name, kernel):
        self.name, self.kernel = name, kernel

    def forward(self, x, run):
        return ad.avg_pool2d(x, self.kernel)


class Flatten(Layer):
    def __init__(self, name):
        self.name = name

    def forward(self, x, run):
        return x.reshape(x.shape[0], -1)


class Residual(Layer):
    """conv-bn-spike-conv, plus shortcut, then tdBN; the next layer fires."""

    def __init__(self, name, in_ch, out_ch, stride, in_hw, rng, spec: NetworkSpec, cfg, spike_index):
        theta = spec.neuron.theta_p
        self.name = name
        self.conv1 = Conv2d(f"{name}.conv1", in_ch, out_ch, 3, stride, 1, rng, in_hw)
        self.bn1 = TdBN(f"{name}.bn1", out_ch, theta, spec.bn_eps, spec.bn_momentum)
        self.spike1 = Spiking(f"{name}.spike1", cfg, spec.surrogate, spike_index)
        self.conv2 = Conv2d(f"{name}.conv2", out_ch, out_ch, 3, 1, 1, rng, self.conv1.out_hw)
        self.shortcut = None
        if stride != 1 or in_ch != out_ch:
            self.shortcut = Conv2d(f"{name}.shortcut", in_ch, out_ch, 1, stride, 0, rng, in_hw)
        self.bn2 = TdBN(f"{name}.bn2", out_ch, theta, spec.bn_eps, spec.bn_momentum)
        self.out_hw = self.conv1.out_hw
        self.conv2.source = self.spike1.name

    @property
    def source(self):
        return self.conv1.source

    @source.setter
    def source(self, value):
        self.conv1.source = value
        if self.shortcut is not None:
            self.shortcut.source = value

    def forward(self, x, run):
        h = self.spike1.forward(self.bn1.forward(self.conv1.forward(x, run), run), run)
        h = self.conv2.forward(h, run)
        skip = x if self.shortcut is None else self.shortcut.forward(x, run)
        return self.bn2.forward(h + skip, run)

    def _parts(self):
        return [m for m in (self.conv1, self.bn1, self.conv2, self.shortcut, self.bn2) if m is not None]

    def parameters(self):
        return [p for m in self._parts() for p in m.parameters()]

    def buffers(self):
        out = {}
        for m in self._parts():
            out.update(m.buffers())
        return out

    def flops(self):
        return [f for m in self._parts() for f in m.flops()]


class VotingReadout(Layer):
    """``O = (1/T) sum_t M s_t`` with identity or equal-population voting ``M``."""

    def __init__(self, name, in_features, classes):
        if in_features % classes:
            raise ValueError(
                f"{name}: output width {in_features} is not divisible by {classes} classes"
            )
        self.name, self.classes = name, classes
        per = in_features // classes
        self.vote = None if per == 1 else np.kron(np.eye(classes), np.ones((per, 1)))

    def forward(self, x, run):
        if x.ndim != 2:
            raise ValueError(f"{self.name}: readout expects [N, F] spikes, got {list(x.shape)}")
        steps = run.time_steps
        rate = x.reshape(steps, x.shape[0] // steps, x.shape[1]).mean(axis=0)
        return rate if self.vote is None else rate @ self.vote


class Network:
    def __init__(self, spec: NetworkSpec, rng: np.random.Generator):
        spec.validate()
        self.spec = spec
        self.layers: list[Layer] = []
        self.spiking: list[Spiking] = []
        self.training = True
        shape = spec.input_shape
        source = None
        theta = spec.neuron.theta_p
        for i, desc in enumerate(spec.layers):
            kind = desc["type"]
            name = desc.get("name", f"{kind}{i}")
            if kind == "linear":
                if len(shape) != 1:
                    raise ValueError(f"{name}: linear needs a flat input, got per-sample shape {shape}")
                layer = Linear(name, shape[0], int(desc["out"]), rng, bool(desc.get("bias", True)))
                layer.source = source
                shape = (layer.out_features,)
            elif kind == "conv2d":
                if len(shape) != 3:
                    raise ValueError(f"{name}: conv2d needs [C, H, W] input, got {shape}")
                layer = Conv2d(name, shape[0], int(desc["out"]), int(desc.get("kernel", 3)),
                               int(desc.get("stride", 1)), int(desc.get("padding", 0)), rng,
                               shape[1:], bool(desc.get("bias", False)))
                layer.source = source
                shape = (layer.out_ch,) + layer.out_hw
            elif kind == "tdbn":
                layer = TdBN(name, shape[0], theta, spec.bn_eps, spec.bn_momentum)
            elif kind == "spike":
                layer = Spiking(name, spec.neuron_for(desc), spec.surrogate, len(self.spiking))
                self.spiking.append(layer)
                source = name
            elif kind == "residual":
                if len(shape) != 3:
                    raise ValueError(f"{name}: residual needs [C, H, W] input, got {shape}")
                out_ch = int(desc.get("out", shape[0]))
                layer = Residual(name, shape[0], out_ch, int(desc.get("stride", 1)), shape[1:], rng,
                                 spec, spec.neuron_for(desc), len(self.spiking))
                self.spiking.append(layer.spike1)
                layer.source = source
                shape = (out_ch,) + layer.out_hw
            elif kind == "avgpool":
                k = int(desc.get("kernel", 2))
                layer = AvgPool(name, k)
                if len(shape) != 3 or shape[1] % k or shape[2] % k:
                    raise ValueError(f"{name}: cannot pool per-sample shape {shape} by {k}")
                shape = (shape[0], shape[1] // k, shape[2] // k)
            elif kind == "flatten":
                layer = Flatten(name)
                shape = (int(np.prod(shape)),)
            else:
                layer = VotingReadout(name, shape[0], int(desc["classes"]))
                shape = (layer.classes,)
            self.layers.append(layer)
        self.classes = shape[0]
        self.tsg = None
        if spec.surrogate.learnable:
            self.tsg = TsgParams.create(spec.time_steps, len(self.spiking),
                                        spec.surrogate.tsg_scale, spec.surrogate.tsg_bias)

    def parameters(self) -> list[ad.Parameter]:
        params = [p for layer in self.layers for p in layer.parameters()]
        if self.tsg is not None:
            params.append(self.tsg.x)
        return params

    def buffers(self) -> dict:
        out = {}
        for layer in self.layers:
            out.update(layer.buffers())
        return out

    def neuron_configs(self) -> dict:
        return {layer.name: layer.cfg for layer in self.spiking}

    def flops(self) -> list:
        return [f for layer in self.layers for f in layer.flops()]

    def train(self) -> "Network":
        self.training = True
        return self

    def eval(self) -> "Network":
        self.training = False
        return self

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


@dataclass
class ForwardResult:
    output: ad.Tensor
    record: SpikeRecord
    membranes: dict | None
    membrane_log: dict | None


def forward_unroll(net: Network, encoded: np.ndarray, *, training: bool | None = None,
                   smooth: bool = False, collect_membranes: bool = False,
                   log_membranes: bool = False) -> ForwardResult:
    """Run ``encoded`` ([T, B, ...]) through the network with fresh neuron state."""
    encoded = np.asarray(encoded)
    if encoded.ndim < 2 or encoded.shape[0] == 0:
        raise ValueError("encoded input needs a leading time axis with T >= 1")
    steps, batch = encoded.shape[:2]
    if tuple(encoded.shape[2:]) != net.spec.input_shape:
        raise ValueError(
            f"input per-sample shape {list(encoded.shape[2:])} does not match "
            f"network input {list(net.spec.input_shape)}"
        )
    run = RunContext(
        time_steps=steps,
        batch=batch,
        training=net.training if training is None else training,
        smooth=smooth,
        tsg=net.tsg,
        membranes={} if collect_membranes else None,
        membrane_log={} if log_membranes else None,
    )
    run.record.batches = 1
    x = ad.Tensor(encoded.reshape((steps * batch,) + encoded.shape[2:]))
    for layer in net.layers:
        x = layer.forward(x, run)
    return ForwardResult(x, run.record, run.membranes, run.membrane_log)
