"""Per-client networks: primary/deep extractors, disentanglers, generator,
identifier and the two classifiers."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from fedifl.io import atomic_write_bytes
from fedifl.nn import (
    BatchNorm1d,
    Conv1d,
    Linear,
    MaxPool1d,
    ReLU,
    Reshape,
    Sequential,
    decode_params,
    encode_params,
    sigmoid,
)

NETWORK_IDS = ("P", "D", "DI", "DS", "G", "I", "local_clf", "global_clf")


@dataclass(frozen=True)
class ArchitectureConfig:
    input_length: int = 1024
    input_channels: int = 1
    channels: tuple[int, int, int] = (8, 16, 32)
    deep_channels: int = 32
    feature_dim: int = 128
    generator_hidden: tuple[int, int] = (256, 256)
    noise_dim: int = 64
    classifier_hidden: int = 64
    dtype: str = "float32"

    def __post_init__(self):
        if self.input_length % 16:
            raise ValueError(f"input_length must be divisible by 16, got {self.input_length}")
        if self.input_channels < 1 or min(self.channels) < 1:
            raise ValueError("channel counts must be positive")

    @property
    def primary_shape(self) -> tuple[int, int]:
        return (self.channels[2], self.input_length // 4)

    @property
    def primary_size(self) -> int:
        c, n = self.primary_shape
        return c * n

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    @classmethod
    def desk(cls, **overrides) -> "ArchitectureConfig":
        """Small preset for CPU-scale runs and the acceptance suite."""
        base = cls(input_length=256, channels=(4, 8, 16), deep_channels=16, feature_dim=64)
        return replace(base, **overrides)


def label_index(labels) -> dict[int, int]:
    """Sorted label -> logit column."""
    return {int(y): i for i, y in enumerate(sorted(set(int(v) for v in labels)))}


def _conv_block(name, cin, cout, k, rng, dt):
    return [
        (f"{name}", Conv1d(cin, cout, k, rng, dtype=dt)),
        (f"{name}_bn", BatchNorm1d(cout, dtype=dt)),
        (f"{name}_relu", ReLU()),
    ]


def build_primary(arch: ArchitectureConfig, rng) -> Sequential:
    dt = arch.np_dtype
    c1, c2, c3 = arch.channels
    return Sequential(
        _conv_block("conv1", arch.input_channels, c1, 5, rng, dt)
        + [("pool1", MaxPool1d(2, 2))]
        + _conv_block("conv2", c1, c2, 3, rng, dt)
        + [("pool2", MaxPool1d(2, 2))]
        + _conv_block("conv3", c2, c3, 3, rng, dt)
    )


def build_deep(arch: ArchitectureConfig, rng) -> Sequential:
    dt = arch.np_dtype
    flat = arch.deep_channels * (arch.input_length // 16)
    return Sequential(
        [("pool1", MaxPool1d(2, 2))]
        + _conv_block("conv", arch.channels[2], arch.deep_channels, 3, rng, dt)
        + [
            ("pool2", MaxPool1d(2, 2)),
            ("flatten", Reshape((-1,))),
            ("fc", Linear(flat, arch.feature_dim, rng, dtype=dt)),
            ("fc_relu", ReLU()),
        ]
    )


def build_generator(arch: ArchitectureConfig, n_labels: int, rng) -> Sequential:
    """Input is ``[noise | one-hot label]``; output has the primary-feature shape."""
    dt = arch.np_dtype
    h1, h2 = arch.generator_hidden
    return Sequential([
        ("fc1", Linear(arch.noise_dim + n_labels, h1, rng, dtype=dt)),
        ("relu1", ReLU()),
        ("fc2", Linear(h1, h2, rng, dtype=dt)),
        ("relu2", ReLU()),
        ("fc3", Linear(h2, arch.primary_size, rng, dtype=dt)),
        ("reshape", Reshape(arch.primary_shape)),
    ])


def build_identifier(arch: ArchitectureConfig, rng) -> Sequential:
    """Emits a logit; ``identify`` applies the logistic unit."""
    dt = arch.np_dtype
    h1, h2 = arch.generator_hidden
    return Sequential([
        ("flatten", Reshape((-1,))),
        ("fc1", Linear(arch.primary_size, h1, rng, dtype=dt)),
        ("relu1", ReLU()),
        ("fc2", Linear(h1, h2, rng, dtype=dt)),
        ("relu2", ReLU()),
        ("fc3", Linear(h2, 1, rng, dtype=dt)),
        ("flatten_out", Reshape(())),
    ])


def build_classifier(arch: ArchitectureConfig, n_classes: int, rng) -> Sequential:
    dt = arch.np_dtype
    return Sequential([
        ("fc1", Linear(arch.feature_dim, arch.classifier_hidden, rng, dtype=dt)),
        ("relu", ReLU()),
        ("fc2", Linear(arch.classifier_hidden, n_classes, rng, dtype=dt)),
    ])


def generator_input(labels, label_space, noise) -> np.ndarray:
    """Concatenate noise with the one-hot encoding of ``labels`` over ``label_space``."""
    index = label_index(label_space)
    onehot = np.zeros((len(labels), len(index)), dtype=noise.dtype)
    onehot[np.arange(len(labels)), [index[int(y)] for y in labels]] = 1
    return np.concatenate([noise, onehot], axis=1)


def generate(generator: Sequential, labels, label_space, rng, noise_dim: int, dtype=np.float32):
    noise = rng.standard_normal((len(labels), noise_dim)).astype(dtype)
    return generator(generator_input(labels, label_space, noise))


def identify(identifier: Sequential, features) -> np.ndarray:
    return sigmoid(identifier(features))


@dataclass
class ClientModelBundle:
    arch: ArchitectureConfig
    label_space: tuple[int, ...]
    global_space: tuple[int, ...]
    networks: dict[str, Sequential] = field(repr=False)

    def __getitem__(self, key: str) -> Sequential:
        return self.networks[key]

    @property
    def local_index(self) -> dict[int, int]:
        return label_index(self.label_space)

    @property
    def global_index(self) -> dict[int, int]:
        return label_index(self.global_space)

    def frozen(self) -> dict[str, bool]:
        return {k: net.frozen for k, net in self.networks.items()}

    def snapshot(self, ids=NETWORK_IDS) -> dict[str, dict[str, np.ndarray]]:
        """Independent copy of the state of the selected networks."""
        return {k: {n: v.copy() for n, v in self.networks[k].state().items()} for k in ids}


def build_bundle(arch: ArchitectureConfig, label_space, global_space, seed: int) -> ClientModelBundle:
    label_space = tuple(sorted(set(int(y) for y in label_space)))
    global_space = tuple(sorted(set(int(y) for y in global_space)))
    if not label_space or not global_space:
        raise ValueError("label spaces must be non-empty")
    if not set(label_space) <= set(global_space):
        raise ValueError(f"label space {label_space} is not a subset of {global_space}")
    # one independent stream per network so that changing, say, the number
    # of local labels never perturbs the extractor initialisation
    streams = dict(zip(NETWORK_IDS, np.random.SeedSequence(seed).spawn(len(NETWORK_IDS))))
    rng = {k: np.random.default_rng(s) for k, s in streams.items()}
    nets = {
        "P": build_primary(arch, rng["P"]),
        "D": build_deep(arch, rng["D"]),
        "DI": build_deep(arch, rng["DI"]),
        "DS": build_deep(arch, rng["DS"]),
        "G": build_generator(arch, len(label_space), rng["G"]),
        "I": build_identifier(arch, rng["I"]),
        "local_clf": build_classifier(arch, len(label_space), rng["local_clf"]),
        "global_clf": build_classifier(arch, len(global_space), rng["global_clf"]),
    }
    return ClientModelBundle(arch, label_space, global_space, nets)


def init_disentanglers(bundle: ClientModelBundle) -> ClientModelBundle:
    """Copy the trained deep extractor into the invariant and specific extractors."""
    src = bundle["D"].state()
    for key in ("DI", "DS"):
        dst = bundle[key].state()
        if {k: v.shape for k, v in dst.items()} != {k: v.shape for k, v in src.items()}:
            raise ValueError(f"{key} architecture does not match D")
        bundle[key].load_state(copy.deepcopy(src))
    return bundle


def set_frozen(bundle: ClientModelBundle, ids, flag: bool = True) -> ClientModelBundle:
    ids = [ids] if isinstance(ids, str) else list(ids)
    unknown = [i for i in ids if i not in bundle.networks]
    if unknown:
        raise KeyError(f"unknown network ids {unknown}; valid: {list(bundle.networks)}")
    for i in ids:
        bundle[i].frozen = flag
    return bundle


def save_bundle(bundle: ClientModelBundle, directory, client: int, ids=NETWORK_IDS) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    for key in ids:
        path = directory / f"{client}_{key}.params"
        written.append(atomic_write_bytes(path, encode_params(bundle[key].state())))
    return written


def load_network(net: Sequential, path) -> Sequential:
    dtype = next(iter(net.state().values())).dtype
    return net.load_state(decode_params(Path(path).read_bytes(), dtype=dtype))
