"""Synthetic vibration fleet and the FDS1 sample-file format.

The generator stands in for a proprietary multi-factory dataset: four
clients, fifteen devices, five health states, with per-client and
per-device working-condition shifts (gain, noise floor, frequency offset).
"""

from __future__ import annotations

import json
import struct
import warnings
from collections.abc import Iterator, Mapping
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from fedifl.io import atomic_write_bytes, atomic_write_text

HEALTH_STATES = {
    0: ("Normal", "-"),
    1: ("Coupling Elastic Element Wear Degradation", "Replace Elastic Elements"),
    2: ("Coupling Misalignment", "Adjust coupling alignment"),
    3: ("Bearing Poor Lubrication", "Add lubricant"),
    4: ("Bearing Wear Degradation", "Replace bearings"),
}

BASE_FREQUENCIES = (25.0, 47.0, 68.0, 89.0, 110.0)  # cycles per window, by class
MAGIC = b"FDS1"


class FormatError(ValueError):
    def __init__(self, message: str, offset: int | None = None):
        super().__init__(message if offset is None else f"{message} (at byte {offset})")
        self.offset = offset


# ---------------------------------------------------------------- layout

@dataclass(frozen=True)
class FleetLayout:
    """``clients[client_id] = {device_id: labels}``."""

    clients: Mapping[int, Mapping[int, tuple[int, ...]]]

    def label_space(self, client: int) -> tuple[int, ...]:
        return tuple(sorted({y for labels in self.clients[client].values() for y in labels}))

    @property
    def client_ids(self) -> tuple[int, ...]:
        return tuple(sorted(self.clients))

    def global_space(self, clients=None) -> tuple[int, ...]:
        clients = self.client_ids if clients is None else clients
        return tuple(sorted({y for c in clients for y in self.label_space(c)}))

    def to_manifest(self) -> dict:
        return {
            "clients": [
                {"id": c, "devices": [{"id": d, "labels": list(labels)}
                                      for d, labels in sorted(self.clients[c].items())]}
                for c in self.client_ids
            ]
        }

    @classmethod
    def from_manifest(cls, manifest: Mapping) -> "FleetLayout":
        clients = {}
        for entry in manifest["clients"]:
            devices = {}
            for dev in entry["devices"]:
                labels = tuple(int(y) for y in dev["labels"])
                bad = [y for y in labels if not 0 <= y <= 255]
                if bad:
                    raise FormatError(f"device {dev['id']}: label ids {bad} outside 0..255")
                devices[int(dev["id"])] = labels
            clients[int(entry["id"])] = devices
        return cls(clients)


def default_layout() -> FleetLayout:
    """Four clients, fifteen devices, labels per device as in the reference fleet."""
    return FleetLayout({
        1: {1: (0, 1, 3), 2: (0, 1), 3: (0, 3)},
        2: {4: (0, 3), 5: (0, 3, 4), 6: (0, 2)},
        3: {7: (0, 4), 8: (0, 1), 9: (0, 1), 10: (0, 2), 11: (0, 4), 12: (0, 2)},
        4: {13: (0, 4), 14: (0, 3), 15: (0, 2, 3)},
    })


def label_space_violations(spaces: Mapping[int, tuple[int, ...]]) -> list[str]:
    """Pairs of clients whose label spaces are disjoint or nested."""
    problems = []
    ids = sorted(spaces)
    for i, a in enumerate(ids):
        for b in ids[i + 1:]:
            A, B = set(spaces[a]), set(spaces[b])
            if not A & B:
                problems.append(f"clients {a} and {b} share no label")
            if A <= B or B <= A:
                problems.append(f"label spaces of clients {a} {sorted(A)} and {b} {sorted(B)} are nested")
    return problems


def check_label_spaces(spaces: Mapping[int, tuple[int, ...]], context: str = "") -> list[str]:
    problems = label_space_violations(spaces)
    for p in problems:
        warnings.warn(f"{context}{p}", LabelSpaceWarning, stacklevel=2)
    return problems


class LabelSpaceWarning(UserWarning):
    pass


# ---------------------------------------------------------------- domain shift

@dataclass(frozen=True)
class Shift:
    gain: float = 1.0
    noise: float = 0.0
    freq_offset: float = 0.0

    def __post_init__(self):
        if self.gain <= 0 or self.noise < 0:
            raise ValueError(f"invalid shift {self}")


@dataclass(frozen=True)
class DomainShiftSpec:
    clients: Mapping[int, Shift] = field(default_factory=dict)
    devices: Mapping[int, Shift] = field(default_factory=dict)

    def combined(self, client: int, device: int) -> Shift:
        c = self.clients.get(client, Shift())
        d = self.devices.get(device, Shift())
        return Shift(c.gain * d.gain, c.noise + d.noise, c.freq_offset + d.freq_offset)


def no_shift() -> DomainShiftSpec:
    return DomainShiftSpec()


def default_shift_spec(layout: FleetLayout | None = None) -> DomainShiftSpec:
    layout = layout or default_layout()
    clients = {
        1: Shift(1.00, 0.30, 0.0),
        2: Shift(0.70, 0.40, 3.0),
        3: Shift(1.35, 0.35, -2.5),
        4: Shift(0.90, 0.45, 1.5),
    }
    rng = np.random.default_rng(2022)
    devices = {}
    for c in layout.client_ids:
        for d in sorted(layout.clients[c]):
            devices[d] = Shift(float(rng.uniform(0.9, 1.1)), float(rng.uniform(0.0, 0.05)),
                               float(rng.uniform(-0.5, 0.5)))
    return DomainShiftSpec(clients, devices)


# ---------------------------------------------------------------- datasets

class ClientDataset:
    """Immutable labelled signals of one client.

    Reads of ``signals`` are counted in ``accesses`` so callers can prove a
    dataset was never touched.
    """

    def __init__(self, client_id: int, signals, labels, devices, label_space=None):
        signals = np.asarray(signals, dtype=np.float32)
        if signals.ndim != 3:
            raise ValueError(f"signals must be (N, channels, L), got {signals.shape}")
        labels = np.asarray(labels, dtype=np.int64)
        devices = np.asarray(devices, dtype=np.int64)
        if not len(signals) == len(labels) == len(devices):
            raise ValueError("signals, labels and devices differ in length")
        for arr in (signals, labels, devices):
            arr.setflags(write=False)
        self.client_id = int(client_id)
        self._signals = signals
        self.labels = labels
        self.devices = devices
        self.label_space = tuple(sorted(set(labels.tolist()) if label_space is None else set(label_space)))
        self.accesses = 0

    @property
    def signals(self) -> np.ndarray:
        self.accesses += 1
        return self._signals

    def __len__(self):
        return len(self.labels)

    @property
    def shape(self):
        return self._signals.shape

    def take(self, idx):
        self.accesses += 1
        return self._signals[idx], self.labels[idx]

    def equals(self, other: "ClientDataset") -> bool:
        return (
            self.client_id == other.client_id
            and np.array_equal(self._signals, other._signals)
            and np.array_equal(self.labels, other.labels)
            and np.array_equal(self.devices, other.devices)
            and self.label_space == other.label_space
        )


def _sample(L: int, label: int, shift: Shift, shape_rng, noise_rng) -> np.ndarray:
    # waveform randomness comes from shape_rng, which is shared by every
    # device; only the shift parameters and the white noise tell devices apart
    n = np.arange(L)
    t = n / L
    f = BASE_FREQUENCIES[label] + shift.freq_offset
    ph = 0.9 * label + shape_rng.normal(0.0, 0.2, 2)
    amp = 1.0 + shape_rng.normal(0.0, 0.05)
    x = amp * np.sin(2 * np.pi * f * t + ph[0]) + 0.5 * np.sin(np.pi * f * t + ph[1])
    period = L / (4 + label)
    tau = L / 64
    start = (ph[0] / (2 * np.pi)) % 1.0 * period
    for p0 in np.arange(start, L, period):
        k = n - p0
        on = k >= 0
        x[on] += 1.2 * np.exp(-k[on] / tau) * np.sin(2 * np.pi * 0.3 * k[on])
    x *= shift.gain
    if shift.noise:
        x += shift.noise * noise_rng.standard_normal(L)
    return x


def synth_fleet(layout: FleetLayout | None = None, shift_spec: DomainShiftSpec | None = None,
                n_per_device_per_label: int = 200, L: int = 1024, seed: int = 0,
                start_index: int = 0, clients=None) -> dict[int, ClientDataset]:
    """Deterministic per-client datasets.

    Sample ``m`` of (client, device, label) depends only on
    ``(seed, client, device, label, start_index + m)`` and the shift spec;
    without shift, devices share identical samples. Held-out splits are
    drawn with a different ``start_index``. ``clients`` restricts output to a
    subset without changing any sample.
    """
    layout = layout or default_layout()
    shift_spec = default_shift_spec(layout) if shift_spec is None else shift_spec
    if n_per_device_per_label < 1:
        raise ValueError("need at least one sample per device and label")
    if L < 64:
        raise ValueError(f"signal length must be at least 64, got {L}")
    wanted = layout.client_ids if clients is None else sorted(clients)
    unknown = set(wanted) - set(layout.client_ids)
    if unknown:
        raise KeyError(f"clients {sorted(unknown)} not in layout")
    out = {}
    for c in wanted:
        sig, lab, dev = [], [], []
        for d, labels in sorted(layout.clients[c].items()):
            shift = shift_spec.combined(c, d)
            for y in labels:
                for m in range(start_index, start_index + n_per_device_per_label):
                    shape_rng = np.random.default_rng([seed, y, m])
                    noise_rng = np.random.default_rng([seed, c, d, y, m])
                    sig.append(_sample(L, y, shift, shape_rng, noise_rng))
                    lab.append(y)
                    dev.append(d)
        out[c] = ClientDataset(c, np.asarray(sig, dtype=np.float32)[:, None, :], lab, dev,
                               layout.label_space(c))
    return out


def batch_iter(dataset: ClientDataset, batch_size: int, seed: int, epoch: int = 0
               ) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """One shuffled epoch; devices are interleaved so every batch mixes them."""
    if batch_size < 2:
        raise ValueError(f"batch size must be at least 2, got {batch_size}")
    n = len(dataset)
    if n < batch_size:
        raise ValueError(f"dataset of {n} samples is smaller than one batch of {batch_size}")
    rng = np.random.default_rng([seed, epoch])
    key = np.empty(n)
    for d in np.unique(dataset.devices):
        idx = np.flatnonzero(dataset.devices == d)
        # evenly spaced slots per device, randomly jittered, in random order
        key[rng.permutation(idx)] = (np.arange(len(idx)) + rng.random(len(idx))) / len(idx)
    order = np.argsort(key, kind="stable")
    for b in range(n // batch_size):
        sel = np.sort(order[b * batch_size:(b + 1) * batch_size])
        sel = rng.permutation(sel)
        yield dataset.take(sel)


# ---------------------------------------------------------------- FDS1 files

_HEADER = struct.Struct("<BBBBI")


def save_fleet(datasets: Mapping[int, ClientDataset], path, layout: FleetLayout | None = None) -> Path:
    """Write all clients to one FDS1 file plus a ``.json`` manifest next to it."""
    path = Path(path)
    count = sum(len(ds) for ds in datasets.values())
    chunks = [MAGIC, struct.pack("<I", count)]
    for c in sorted(datasets):
        ds = datasets[c]
        sig = ds._signals
        for x, y, d in zip(sig, ds.labels.tolist(), ds.devices.tolist()):
            chunks.append(_HEADER.pack(c, d, y, x.shape[0], x.shape[1]))
            chunks.append(np.ascontiguousarray(x, dtype="<f4").tobytes())
    atomic_write_bytes(path, b"".join(chunks))
    if layout is None:
        layout = FleetLayout({
            c: {int(d): tuple(sorted(set(ds.labels[ds.devices == d].tolist())))
                for d in np.unique(ds.devices)}
            for c, ds in datasets.items()
        })
    return atomic_write_text(path.with_suffix(".json"), json.dumps(layout.to_manifest(), indent=2))


def load_external(path, manifest=None) -> dict[int, ClientDataset]:
    """Parse an FDS1 file against a manifest (dict or JSON path)."""
    path = Path(path)
    if manifest is None:
        manifest = path.with_suffix(".json")
    if not isinstance(manifest, Mapping):
        manifest = json.loads(Path(manifest).read_text(encoding="utf-8"))
    layout = FleetLayout.from_manifest(manifest)
    buf = path.read_bytes()
    if len(buf) < 8 or buf[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic {buf[:4]!r}, expected {MAGIC!r}", 0)
    (count,) = struct.unpack_from("<I", buf, 4)
    pos = 8
    per_client: dict[int, tuple[list, list, list]] = {c: ([], [], []) for c in layout.client_ids}
    for i in range(count):
        if pos + _HEADER.size > len(buf):
            raise FormatError(f"truncated header of sample {i}", pos)
        c, d, y, ch, length = _HEADER.unpack_from(buf, pos)
        pos += _HEADER.size
        nbytes = 4 * ch * length
        if pos + nbytes > len(buf):
            raise FormatError(f"truncated payload of sample {i}: need {nbytes} bytes", pos)
        if c not in layout.clients or d not in layout.clients[c]:
            raise FormatError(f"sample {i}: client {c} / device {d} not declared in manifest", pos)
        if y not in layout.clients[c][d]:
            raise FormatError(f"sample {i}: unknown label id {y} for device {d}", pos)
        x = np.frombuffer(buf, dtype="<f4", count=ch * length, offset=pos).reshape(ch, length)
        pos += nbytes
        sig, lab, dev = per_client[c]
        if sig and sig[0].shape != x.shape:
            raise FormatError(f"sample {i}: shape {x.shape} differs from {sig[0].shape}", pos - nbytes)
        sig.append(x)
        lab.append(y)
        dev.append(d)
    if pos != len(buf):
        raise FormatError(f"{len(buf) - pos} trailing bytes after {count} samples", pos)
    check_label_spaces({c: layout.label_space(c) for c in layout.client_ids}, f"{path.name}: ")
    return {
        c: ClientDataset(c, np.stack(sig) if sig else np.zeros((0, 1, 0), np.float32), lab, dev,
                         layout.label_space(c))
        for c, (sig, lab, dev) in per_client.items()
    }
