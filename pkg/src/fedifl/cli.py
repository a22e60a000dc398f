"""Command line: run, ablate, gradcheck, datagen, export-features.

Exit codes: 0 ok, 1 verification failure, 2 config error, 3 divergence,
4 missing artifact.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
import warnings
from pathlib import Path

from fedifl import gradient_suite
from fedifl.datagen import LabelSpaceWarning
from fedifl.experiments import (
    ConfigError,
    MissingArtifactError,
    RunConfig,
    config_from_dict,
    export_features,
    format_summary,
    load_config,
    output_root,
    run_grid,
    summarize,
    write_fleet,
    write_summary,
)
from fedifl.federation import ABLATIONS, DivergenceError

EXIT_OK, EXIT_VERIFY, EXIT_CONFIG, EXIT_DIVERGED, EXIT_MISSING = 0, 1, 2, 3, 4


def _int_list(text: str):
    if text == "all":
        return [1, 2, 3, 4]
    try:
        return [int(v) for v in text.split(",") if v]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _float_list(text: str):
    try:
        return [float(v) for v in text.split(",") if v]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _str_list(text: str):
    return [v for v in text.split(",") if v]


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_CONFIG)


def _add_run_flags(p):
    p.add_argument("--config", help="JSON run configuration; flags override its fields")
    p.add_argument("--preset", choices=["desk", "paper"])
    p.add_argument("--task", type=_int_list, help="task ids, comma separated, or 'all'")
    p.add_argument("--seed", type=_int_list, help="one or more seeds, comma separated")
    p.add_argument("--epochs", type=_int_list, help="E_ipcl,E_ipfg,E_cct")
    p.add_argument("--lrs", type=_float_list, help="three learning rates")
    p.add_argument("--batch-size", type=int)
    p.add_argument("--n-train", type=int, help="training samples per device and label")
    p.add_argument("--n-heldout", type=int, help="target samples per device and label")
    p.add_argument("--input-length", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--out", help="output directory (else FEDIFL_OUT, else the config)")
    p.add_argument("--save-models", action="store_true", default=None,
                   help="write checkpoints needed by export-features")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fedifl", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="show label-space warnings")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("run", help="train and evaluate methods on tasks")
    _add_run_flags(p)
    p.add_argument("--method", type=_str_list, help="fedifl, fedavg or both comma separated")
    p.add_argument("--disable", type=_str_list, help=f"loss terms to zero, from {list(ABLATIONS)}")

    p = sub.add_parser("ablate", help="full method plus each single-term ablation")
    _add_run_flags(p)
    p.add_argument("--disable", type=_str_list,
                   help="ablate only these terms (default: each of %s in turn)" % list(ABLATIONS))

    p = sub.add_parser("gradcheck", help="finite-difference check of every layer and loss")
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--only", type=_str_list, help="restrict to these components")

    p = sub.add_parser("datagen", help="write the synthetic fleet in FDS1 format")
    p.add_argument("path")
    p.add_argument("--config")
    p.add_argument("--preset", choices=["desk", "paper"])
    p.add_argument("--input-length", type=int)
    p.add_argument("--n", type=int, help="samples per device and label")
    p.add_argument("--seed", type=int, default=0, dest="fleet_seed")

    p = sub.add_parser("export-features", help="dump invariant features of a saved run as CSV")
    p.add_argument("model_dir", help="a *_model directory written by run --save-models")
    p.add_argument("--out", help="CSV path (default: <model_dir>/features.csv)")
    return parser


def _run_config(args) -> RunConfig:
    rc = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    overrides = {}
    flag_fields = {"preset": "preset", "task": "tasks", "seed": "seeds", "epochs": "epochs", "lrs": "lrs",
                   "batch_size": "batch_size", "n_train": "n_train", "n_heldout": "n_heldout",
                   "workers": "workers", "save_models": "save_models", "method": "methods",
                   "disable": "disable"}
    for flag, name in flag_fields.items():
        v = getattr(args, flag, None)
        if v is not None:
            overrides[name] = v
    if getattr(args, "input_length", None) is not None:
        overrides["arch"] = {**rc.arch, "input_length": args.input_length}
    rc = config_from_dict(overrides, rc)
    return dataclasses.replace(rc, out_dir=output_root(getattr(args, "out", None), rc))


def _progress(report):
    print(f"task {report.task} {report.method:<16} seed {report.seed}: "
          f"target acc {report.target_acc:.4f} ({report.wall_time_s:.1f}s)", flush=True)


def _report_grid(rc: RunConfig, disable_sets=None) -> int:
    reports = run_grid(rc, disable_sets, _progress)
    summary = summarize(reports)
    print(format_summary(summary))
    write_summary(summary, rc.output_dir())
    return EXIT_OK


def cmd_run(args) -> int:
    rc = _run_config(args)
    rc.fed_config()
    return _report_grid(rc)


def cmd_ablate(args) -> int:
    terms = args.disable
    args.disable = None
    rc = dataclasses.replace(_run_config(args), methods=("fedifl",))
    terms = terms or list(ABLATIONS)
    bad = [t for t in terms if t not in ABLATIONS]
    if bad:
        raise ConfigError(f"field 'disable': unknown ablation terms {bad}; valid: {list(ABLATIONS)}")
    return _report_grid(rc, [()] + [(t,) for t in terms])


def cmd_gradcheck(args) -> int:
    if args.trials < 1:
        raise ConfigError("--trials must be >= 1")
    known = set(gradient_suite.LAYER_CHECKS) | set(gradient_suite.LOSS_CHECKS)
    if args.only and set(args.only) - known:
        raise ConfigError(f"unknown components {sorted(set(args.only) - known)}; valid: {sorted(known)}")
    rows = gradient_suite.run_suite(args.trials, args.seed, args.only)
    print(gradient_suite.format_rows(rows))
    failed = [r.component for r in rows if not r.ok]
    if failed:
        print(f"FAILED: {', '.join(failed)}")
        return EXIT_VERIFY
    print(f"all {len(rows)} components within {gradient_suite.TOLERANCE:g}")
    return EXIT_OK


def cmd_datagen(args) -> int:
    rc = _run_config(args)
    manifest = write_fleet(rc, args.path, args.fleet_seed, args.n)
    print(f"wrote {args.path} and {manifest}")
    return EXIT_OK


def cmd_export_features(args) -> int:
    out = args.out or str(Path(args.model_dir) / "features.csv")
    rows = export_features(args.model_dir, out)
    print(f"wrote {rows} rows to {out}")
    return EXIT_OK


COMMANDS = {"run": cmd_run, "ablate": cmd_ablate, "gradcheck": cmd_gradcheck, "datagen": cmd_datagen,
            "export-features": cmd_export_features}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    if not args.verbose:
        warnings.simplefilter("ignore", LabelSpaceWarning)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as e:
        print(f"training diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except (MissingArtifactError, FileNotFoundError) as e:
        print(f"missing artifact: {e}", file=sys.stderr)
        return EXIT_MISSING


if __name__ == "__main__":
    sys.exit(main())
