"""Run configuration, experiment grids, summaries, checkpoints and feature export.

Everything the command line does lives here so it can be driven from
Python directly.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from fedifl.datagen import default_layout, save_fleet, synth_fleet
from fedifl.federation import (
    ABLATIONS,
    TASKS,
    FedConfig,
    TaskReport,
    run_fedavg_detailed,
    run_task_detailed,
)
from fedifl.io import atomic_write_bytes, atomic_write_text
from fedifl.models import ArchitectureConfig, build_deep, build_primary
from fedifl.nn import decode_params, encode_params

METHODS = ("fedifl", "fedavg")

PRESETS = {
    "paper": {
        "arch": {},
        "epochs": (100, 150, 250),
        "lrs": (0.008, 0.02, 0.01),
        "batch_size": 256,
        "n_train": 200,
        "n_heldout": 50,
    },
    "desk": {
        "arch": {"input_length": 256, "channels": (4, 8, 16), "deep_channels": 16, "feature_dim": 64},
        "epochs": (20, 30, 50),
        "lrs": (0.05, 0.5, 0.05),
        "batch_size": 32,
        "n_train": 40,
        "n_heldout": 30,
    },
}


class ConfigError(ValueError):
    """Invalid run configuration; the message names the offending field or line."""


class MissingArtifactError(FileNotFoundError):
    pass


@dataclass(frozen=True)
class RunConfig:
    preset: str = "desk"
    arch: dict = field(default_factory=dict)
    epochs: tuple | None = None
    lrs: tuple | None = None
    batch_size: int | None = None
    n_train: int | None = None
    n_heldout: int | None = None
    seeds: tuple = (0,)
    tasks: tuple = (1, 2, 3, 4)
    methods: tuple = ("fedifl",)
    disable: tuple = ()
    aggregate: str = "mean"
    orthogonal_form: str = "squared"
    include_own_generated: bool = True
    fedavg_rounds: int = 1
    grad_clip: float | None = 5.0
    out_dir: str = "runs"
    save_models: bool = False
    workers: int = 1

    def __post_init__(self):
        if self.preset not in PRESETS:
            raise ConfigError(f"field 'preset': expected one of {sorted(PRESETS)}, got {self.preset!r}")
        bad = sorted(set(self.arch) - {f.name for f in dataclasses.fields(ArchitectureConfig)})
        if bad:
            raise ConfigError(f"field 'arch': unknown architecture keys {bad}")
        for name in ("epochs", "lrs"):
            v = getattr(self, name)
            if v is not None and len(v) != 3:
                raise ConfigError(f"field '{name}': expected 3 values, got {list(v)}")
        if not self.seeds or not all(isinstance(v, int) and not isinstance(v, bool) for v in self.seeds):
            raise ConfigError(f"field 'seeds': expected a non-empty list of integers, got {list(self.seeds)}")
        unknown = [t for t in self.tasks if t not in TASKS]
        if unknown or not self.tasks:
            raise ConfigError(f"field 'tasks': task ids must be in {sorted(TASKS)}, got {list(self.tasks)}")
        unknown = [m for m in self.methods if m not in METHODS]
        if unknown or not self.methods:
            raise ConfigError(f"field 'methods': expected a subset of {list(METHODS)}, got {list(self.methods)}")
        unknown = [d for d in self.disable if d not in ABLATIONS]
        if unknown:
            raise ConfigError(f"field 'disable': unknown ablation terms {unknown}; valid: {list(ABLATIONS)}")
        if self.workers < 1:
            raise ConfigError("field 'workers': must be >= 1")

    def resolved(self, name):
        v = getattr(self, name)
        return PRESETS[self.preset][name] if v is None else v

    def architecture(self) -> ArchitectureConfig:
        kw = {**PRESETS[self.preset]["arch"], **self.arch}
        kw = {k: tuple(v) if isinstance(v, list) else v for k, v in kw.items()}
        try:
            return ArchitectureConfig(**kw)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"field 'arch': {e}") from None

    def fed_config(self, disable=None) -> FedConfig:
        try:
            return FedConfig(
                arch=self.architecture(),
                epochs=tuple(int(e) for e in self.resolved("epochs")),
                lrs=tuple(float(v) for v in self.resolved("lrs")),
                batch_size=int(self.resolved("batch_size")),
                n_train=int(self.resolved("n_train")),
                n_heldout=int(self.resolved("n_heldout")),
                aggregate=self.aggregate,
                orthogonal_form=self.orthogonal_form,
                include_own_generated=self.include_own_generated,
                disable=frozenset(self.disable if disable is None else disable),
                fedavg_rounds=self.fedavg_rounds,
                grad_clip=self.grad_clip,
            )
        except ValueError as e:
            raise ConfigError(str(e)) from None

    def output_dir(self) -> Path:
        return Path(self.out_dir)

    def to_dict(self) -> dict:
        return json.loads(json.dumps(dataclasses.asdict(self)))


_FIELD_TYPES = {
    "preset": str, "arch": dict, "epochs": list, "lrs": list, "batch_size": int, "n_train": int,
    "n_heldout": int, "seeds": list, "tasks": list, "methods": list, "disable": list,
    "aggregate": str, "orthogonal_form": str, "include_own_generated": bool, "fedavg_rounds": int,
    "grad_clip": float, "out_dir": str, "save_models": bool, "workers": int,
}


def _coerce(name, value):
    want = _FIELD_TYPES[name]
    if value is None and name in ("epochs", "lrs", "batch_size", "n_train", "n_heldout", "grad_clip"):
        return None
    if want is float and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    if want is list and isinstance(value, tuple):
        value = list(value)
    ok = isinstance(value, want) and not (want in (int, float) and isinstance(value, bool))
    if not ok:
        raise ConfigError(f"field '{name}': expected {want.__name__}, got {type(value).__name__} {value!r}")
    return tuple(value) if want is list else value


def config_from_dict(data: dict, base: RunConfig | None = None) -> RunConfig:
    """Apply ``data`` on top of ``base`` (or the defaults), validating each field."""
    if not isinstance(data, dict):
        raise ConfigError(f"config must be a JSON object, got {type(data).__name__}")
    unknown = sorted(set(data) - set(_FIELD_TYPES))
    if unknown:
        raise ConfigError(f"unknown field(s) {unknown}; valid fields: {sorted(_FIELD_TYPES)}")
    kw = {k: _coerce(k, v) for k, v in data.items()}
    return dataclasses.replace(base or RunConfig(), **kw)


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e.strerror}") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: line {e.lineno} column {e.colno}: {e.msg}") from None
    try:
        return config_from_dict(data)
    except ConfigError as e:
        raise ConfigError(f"{path}: {e}") from None


# ---------------------------------------------------------------- grids

def _stem(report: TaskReport) -> str:
    return f"task{report.task}_{report.method}_s{report.seed}"


def _run_one(job):
    rc, method, task, seed, disable = job
    cfg = rc.fed_config(disable)
    if method == "fedifl":
        report, _, model, _ = run_task_detailed(task, cfg, seed)
        nets = {"P": model.primary.state(), "features": model.invariant.state()}
    else:
        report, state, _ = run_fedavg_detailed(task, cfg, seed)
        nets = {k: {n.split("/", 1)[1]: v for n, v in state.items() if n.startswith(prefix)}
                for k, prefix in (("P", "P/"), ("features", "D/"))}
    out = rc.output_dir()
    report.write(out, _stem(report))
    if rc.save_models:
        save_checkpoint(out / f"{_stem(report)}_model", rc, report, nets)
    return report


def run_grid(rc: RunConfig, disable_sets=None, progress=None) -> list[TaskReport]:
    """Every (method, task, seed) of ``rc``; FedIFL runs once per disable set."""
    disable_sets = [tuple(rc.disable)] if disable_sets is None else [tuple(d) for d in disable_sets]
    jobs = []
    for method in rc.methods:
        for disable in (disable_sets if method == "fedifl" else [()]):
            for task in rc.tasks:
                for seed in rc.seeds:
                    jobs.append((rc, method, task, seed, disable))
    reports = []
    if rc.workers > 1:
        with ProcessPoolExecutor(rc.workers) as pool:
            for r in pool.map(_run_one, jobs):
                reports.append(r)
                if progress:
                    progress(r)
    else:
        for job in jobs:
            r = _run_one(job)
            reports.append(r)
            if progress:
                progress(r)
    return reports


def summarize(reports) -> dict:
    """Per method: mean target accuracy per task (over seeds) and the mean over tasks."""
    acc: dict[str, dict[int, list[float]]] = {}
    for r in reports:
        acc.setdefault(r.method, {}).setdefault(r.task, []).append(r.target_acc)
    out = {}
    for method, per_task in acc.items():
        means = {t: float(np.mean(v)) for t, v in sorted(per_task.items())}
        out[method] = {"per_task": means, "mean": float(np.mean(list(means.values()))),
                       "seeds": max(len(v) for v in per_task.values())}
    return out


def format_summary(summary: dict) -> str:
    methods = list(summary)
    tasks = sorted({t for s in summary.values() for t in s["per_task"]})
    width = max(10, *(len(m) + 2 for m in methods))
    lines = ["target accuracy" + "".join(f"{m:>{width}}" for m in methods)]
    for t in tasks:
        cells = [summary[m]["per_task"].get(t) for m in methods]
        lines.append(f"{'task ' + str(t):<15}" + "".join(
            f"{c:>{width}.4f}" if c is not None else f"{'-':>{width}}" for c in cells))
    lines.append(f"{'mean':<15}" + "".join(f"{summary[m]['mean']:>{width}.4f}" for m in methods))
    return "\n".join(lines)


def write_summary(summary: dict, directory, name: str = "summary") -> tuple[Path, Path]:
    directory = Path(directory)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", "task", "target_acc"])
    for m, s in summary.items():
        for t, a in s["per_task"].items():
            w.writerow([m, t, repr(a)])
        w.writerow([m, "mean", repr(s["mean"])])
    js = {m: {**s, "per_task": {str(t): a for t, a in s["per_task"].items()}} for m, s in summary.items()}
    return (atomic_write_text(directory / f"{name}.json", json.dumps(js, indent=2, sort_keys=True)),
            atomic_write_text(directory / f"{name}.csv", buf.getvalue()))


# ---------------------------------------------------------------- checkpoints and export

def save_checkpoint(directory, rc: RunConfig, report: TaskReport, nets: dict) -> Path:
    directory = Path(directory)
    for name, state in nets.items():
        atomic_write_bytes(directory / f"{name}.params", encode_params(state))
    meta = {"config": rc.to_dict(), "task": report.task, "seed": report.seed, "method": report.method,
            "disabled": report.disabled}
    atomic_write_text(directory / "run.json", json.dumps(meta, indent=2, sort_keys=True))
    return directory


def export_features(model_dir, out_csv) -> int:
    """Write ``client, device, label, f0..`` rows for the task's source and target samples.

    Returns the number of rows written.
    """
    model_dir = Path(model_dir)
    needed = [model_dir / n for n in ("run.json", "P.params", "features.params")]
    missing = [str(p) for p in needed if not p.is_file()]
    if missing:
        raise MissingArtifactError(f"missing checkpoint files: {missing}")
    meta = json.loads((model_dir / "run.json").read_text())
    rc = config_from_dict(meta["config"])
    cfg = rc.fed_config(meta.get("disabled", ()))
    arch = cfg.arch
    rng = np.random.default_rng(0)
    P = build_primary(arch, rng).load_state(decode_params((model_dir / "P.params").read_bytes(), arch.np_dtype))
    feat = build_deep(arch, rng).load_state(
        decode_params((model_dir / "features.params").read_bytes(), arch.np_dtype))
    P.eval(), feat.eval()
    sources, target = TASKS[meta["task"]]
    layout, seed = cfg.fleet_layout(), meta["seed"]
    shift = cfg.shift
    data = dict(synth_fleet(layout, shift, cfg.n_train, arch.input_length, seed, clients=sources))
    data[target] = synth_fleet(layout, shift, cfg.n_heldout, arch.input_length, seed,
                               start_index=cfg.n_train, clients=[target])[target]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["client", "device", "label", *(f"f{i}" for i in range(arch.feature_dim))])
    rows = 0
    for cid in sorted(data):
        ds = data[cid]
        x = ds.signals
        for s in range(0, len(ds), 256):
            f = feat(P(x[s:s + 256]))
            for i, vec in enumerate(f, s):
                w.writerow([cid, int(ds.devices[i]), int(ds.labels[i]), *(repr(float(v)) for v in vec)])
                rows += 1
    atomic_write_text(out_csv, buf.getvalue())
    return rows


def write_fleet(rc: RunConfig, path, seed: int = 0, n_per_device_per_label: int | None = None) -> Path:
    """Generate the default fleet at the configured signal length and save it."""
    arch = rc.architecture()
    n = n_per_device_per_label or int(rc.resolved("n_train"))
    layout = default_layout()
    return save_fleet(synth_fleet(layout, None, n, arch.input_length, seed), path, layout)


def output_root(flag_value: str | None, rc: RunConfig) -> str:
    """Output directory precedence: command-line flag, then FEDIFL_OUT, then the config."""
    if flag_value:
        return flag_value
    return os.environ.get("FEDIFL_OUT") or rc.out_dir
