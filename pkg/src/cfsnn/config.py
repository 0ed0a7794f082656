"""Run configuration: TOML file plus ``key=value`` overrides, validated against a schema.

Keys are dotted paths (``neuron.k_tau``, ``loss.lambda`` ...). Nested TOML
tables are flattened to that form; unknown keys are errors.
"""

from __future__ import annotations

import copy
import sys
from dataclasses import dataclass
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .data import Dataset, EncoderConfig, load_csv, load_idx, make_split
from .losses import LossConfig
from .network import NetworkSpec
from .neurons import NeuronConfig
from .surrogates import SurrogateSpec
from .trainer import TrainConfig


class ConfigError(ValueError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


DEFAULT_LAYERS = [
    {"type": "linear", "out": 32},
    {"type": "tdbn"},
    {"type": "spike"},
    {"type": "linear", "out": 20},
    {"type": "tdbn"},
    {"type": "spike"},
    {"type": "readout", "classes": 2},
]

# key -> (default, allowed types); None default means optional
SCHEMA = {
    "seed": (0, (int,)),
    "network.layers": (DEFAULT_LAYERS, (list,)),
    "network.time_steps": (4, (int,)),
    "network.bn_eps": (1e-5, (float,)),
    "network.bn_momentum": (0.1, (float,)),
    "neuron.kind": ("cf", (str,)),
    "neuron.k_tau": (0.25, (float,)),
    "neuron.theta_p": (1.0, (float,)),
    "neuron.theta_n": (-1.0, (float,)),
    "neuron.k_p_max": (2, (int,)),
    "neuron.k_n_max": (2, (int,)),
    "neuron.reset_mode": ("soft", (str,)),
    "neuron.u_reset": (0.0, (float,)),
    "surrogate.family": ("tsg", (str,)),
    "surrogate.alpha": (1.0, (float,)),
    "surrogate.level_mode": ("sum", (str,)),
    "surrogate.tsg.scale": (4.0, (float,)),
    "surrogate.tsg.bias": (0.5, (float,)),
    "loss.lambda": (0.25, (float,)),
    "loss.epsilon": (1e-6, (float,)),
    "loss.term_clamp": (10.0, (float,)),
    "loss.pnb_layers": (None, (list,)),
    "pnb.include_saturated": (True, (bool,)),
    "train.lr": (0.025, (float,)),
    "train.momentum": (0.9, (float,)),
    "train.weight_decay": (1e-4, (float,)),
    "train.epochs": (20, (int,)),
    "train.batch_size": (64, (int,)),
    "train.schedule": ("cosine", (str,)),
    "train.tsg_lr": (None, (float,)),
    "train.augment": (False, (bool,)),
    "train.checkpoint_every": (0, (int,)),
    "data.kind": ("gaussians", (str,)),
    "data.n_train": (400, (int,)),
    "data.n_test": (200, (int,)),
    "data.classes": (2, (int,)),
    "data.separation": (6.0, (float,)),
    "data.dim": (2, (int,)),
    "data.train_images": (None, (str,)),
    "data.train_labels": (None, (str,)),
    "data.test_images": (None, (str,)),
    "data.test_labels": (None, (str,)),
    "data.train_csv": (None, (str,)),
    "data.test_csv": (None, (str,)),
    "data.train_limit": (None, (int,)),
    "data.test_limit": (None, (int,)),
    "encoder.mode": ("direct", (str,)),
    "noise.kind": (None, (str,)),
    "noise.epsilon": (0.0, (float,)),
    "energy.count_mode": ("magnitude", (str,)),
    "gradcheck.max_params": (10_000, (int,)),
    "gradcheck.batch": (8, (int,)),
}


PATH_KEYS = ("data.train_images", "data.train_labels", "data.test_images", "data.test_labels",
             "data.train_csv", "data.test_csv")


def flatten(tree: dict, prefix: str = "") -> dict:
    flat = {}
    for key, value in tree.items():
        path = f"{prefix}{key}"
        if isinstance(value, dict) and path not in SCHEMA:
            flat.update(flatten(value, path + "."))
        else:
            flat[path] = value
    return flat


def _check_type(key: str, value):
    _, types = SCHEMA[key]
    if value is None:
        return value
    if float in types and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if int in types and isinstance(value, bool):
        raise ConfigError(key, f"expected integer, got {value!r}")
    if not isinstance(value, types):
        names = "/".join(t.__name__ for t in types)
        raise ConfigError(key, f"expected {names}, got {type(value).__name__} {value!r}")
    return value


def parse_override(item: str) -> tuple[str, object]:
    if "=" not in item:
        raise ConfigError(item, "override must look like key=value")
    key, raw = item.split("=", 1)
    key = key.strip()
    try:
        value = tomllib.loads(f"v = {raw}")["v"]
    except tomllib.TOMLDecodeError:
        value = raw
    return key, value


@dataclass
class RunConfig:
    values: dict

    @classmethod
    def load(cls, path=None, overrides=(), seed: int | None = None) -> "RunConfig":
        values = {k: copy.deepcopy(v[0]) for k, v in SCHEMA.items()}
        given = {}
        if path is not None:
            try:
                text = Path(path).read_text()
            except OSError as exc:
                raise ConfigError(str(path), f"cannot read config: {exc}") from None
            try:
                from_file = flatten(tomllib.loads(text))
            except tomllib.TOMLDecodeError as exc:
                raise ConfigError(str(path), f"invalid TOML: {exc}") from None
            # dataset paths in a file are relative to that file
            for key in PATH_KEYS:
                if isinstance(from_file.get(key), str):
                    from_file[key] = str(Path(path).parent / from_file[key])
            given.update(from_file)
        for item in overrides:
            key, value = parse_override(item)
            given[key] = value
        if seed is not None:
            given["seed"] = seed
        for key, value in given.items():
            if key not in SCHEMA:
                raise ConfigError(key, "unknown configuration key")
            values[key] = _check_type(key, value)
        cfg = cls(values)
        cfg.validate()
        return cfg

    def __getitem__(self, key):
        return self.values[key]

    def validate(self) -> None:
        """Build every typed config once so bad values fail before any compute."""
        for key, build in (("neuron", self.neuron), ("surrogate", self.surrogate),
                           ("loss", self.loss), ("train", self.train), ("encoder", self.encoder)):
            try:
                build()
            except (ValueError, TypeError) as exc:
                raise ConfigError(key, str(exc)) from None
        if self["data.kind"] not in ("gaussians", "moons", "temporal_xor", "idx", "csv"):
            raise ConfigError("data.kind", f"unknown dataset kind {self['data.kind']!r}")
        if self["noise.kind"] is not None and self["noise.kind"] not in ("uniform", "salt_pepper", "gaussian"):
            raise ConfigError("noise.kind", f"unknown noise kind {self['noise.kind']!r}")
        if self["energy.count_mode"] not in ("magnitude", "nonzero"):
            raise ConfigError("energy.count_mode", "must be 'magnitude' or 'nonzero'")
        for i, layer in enumerate(self["network.layers"]):
            if not isinstance(layer, dict) or "type" not in layer:
                raise ConfigError(f"network.layers[{i}]", "each layer needs a 'type'")

    def neuron(self) -> NeuronConfig:
        return NeuronConfig(**{k: self[f"neuron.{k}"] for k in NeuronConfig.__dataclass_fields__})

    def surrogate(self) -> SurrogateSpec:
        return SurrogateSpec(self["surrogate.family"], self["surrogate.alpha"],
                             self["surrogate.tsg.scale"], self["surrogate.tsg.bias"],
                             self["surrogate.level_mode"])

    def loss(self) -> LossConfig:
        layers = self["loss.pnb_layers"]
        return LossConfig(self["loss.lambda"], self["loss.epsilon"], self["loss.term_clamp"],
                          tuple(layers) if layers is not None else None, self["pnb.include_saturated"])

    def train(self) -> TrainConfig:
        return TrainConfig(self["train.lr"], self["train.momentum"], self["train.weight_decay"],
                           self["train.epochs"], self["train.batch_size"], self["train.schedule"],
                           self["seed"], self["train.tsg_lr"], self["train.augment"])

    def encoder(self) -> EncoderConfig:
        return EncoderConfig(self["encoder.mode"], self["network.time_steps"])

    def noise(self):
        return None if self["noise.kind"] is None else (self["noise.kind"], self["noise.epsilon"])

    def network_spec(self, input_shape) -> NetworkSpec:
        spec = NetworkSpec(self["network.layers"], input_shape, self["network.time_steps"],
                           self.neuron(), self.surrogate(), self["network.bn_eps"],
                           self["network.bn_momentum"])
        try:
            spec.validate()
        except ValueError as exc:
            raise ConfigError("network.layers", str(exc)) from None
        return spec

    def datasets(self) -> tuple[Dataset, Dataset]:
        kind = self["data.kind"]
        if kind == "idx":
            paths = [self[f"data.{k}"] for k in ("train_images", "train_labels", "test_images", "test_labels")]
            if None in paths:
                raise ConfigError("data", "idx datasets need train/test image and label paths")
            train = load_idx(paths[0], paths[1], self["data.classes"], "train")
            test = load_idx(paths[2], paths[3], self["data.classes"], "test")
        elif kind == "csv":
            if self["data.train_csv"] is None or self["data.test_csv"] is None:
                raise ConfigError("data", "csv datasets need data.train_csv and data.test_csv")
            train = load_csv(self["data.train_csv"], self["data.classes"], "train")
            test = load_csv(self["data.test_csv"], self["data.classes"], "test")
        else:
            extra = {"time_steps": self["network.time_steps"]} if kind == "temporal_xor" else {
                "classes": self["data.classes"], "separation": self["data.separation"], "dim": self["data.dim"]}
            if kind == "moons":
                extra = {}
            train, test = make_split(kind, self["data.n_train"], self["data.n_test"], self["seed"], **extra)
        if self["data.train_limit"] is not None:
            train = train.subset(slice(0, self["data.train_limit"]))
        if self["data.test_limit"] is not None:
            test = test.subset(slice(0, self["data.test_limit"]))
        return train, test

    def to_dict(self) -> dict:
        return copy.deepcopy(self.values)
