"""Command-line front end.

Commands: register, eval, synth, slices, version.  Machine-readable metric
lines go to stdout, diagnostics to stderr.  Every file-writing command
records a manifest JSON (resolved config, input digests, output paths) so
the run can be reproduced exactly.

Exit codes: 0 success, 1 user or validation error, 2 environment/I-O error.

numpy is imported lazily inside command handlers so that --threads (or the
DEFREG_THREADS environment variable) can pin BLAS/OpenMP thread counts
before the first numpy import; --threads 1 is the bit-reproducibility
baseline.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from pathlib import Path

__all__ = ["main", "build_parser"]

_THREAD_ENV_VARS = (
    "OMP_NUM_THREADS",
    "OPENBLAS_NUM_THREADS",
    "MKL_NUM_THREADS",
    "NUMEXPR_NUM_THREADS",
    "VECLIB_MAXIMUM_THREADS",
)


class _Parser(argparse.ArgumentParser):
    # user errors exit 1 (2 is reserved for I/O failures)
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_manifest(path, command, config, inputs, outputs, wall_seconds):
    from . import __version__

    manifest = {
        "command": command,
        "tool_version": __version__,
        "config": config,
        "inputs": {str(p): _sha256(p) for p in inputs},
        "outputs": [str(p) for p in outputs],
        "wall_seconds": wall_seconds,
    }
    Path(path).write_text(json.dumps(manifest, indent=2) + "\n")


def _configure_threads(threads: int | None) -> None:
    if threads is None:
        env = os.environ.get("DEFREG_THREADS")
        if env is None:
            return
        try:
            threads = int(env)
        except ValueError:
            raise ValueError(f"DEFREG_THREADS must be an integer, got {env!r}") from None
    if threads < 1:
        raise ValueError(f"thread count must be >= 1, got {threads}")
    for var in _THREAD_ENV_VARS:
        os.environ[var] = str(threads)


def _load_config_file(path) -> dict:
    if path is None:
        return {}
    cfg = json.loads(Path(path).read_text())
    if not isinstance(cfg, dict):
        raise ValueError(f"{path}: config file must hold a JSON object")
    return cfg


def _pick(flag_value, file_cfg: dict, key: str, default=None):
    # precedence: explicit flag > config file > built-in default
    if flag_value is not None:
        return flag_value
    if key in file_cfg and file_cfg[key] is not None:
        return file_cfg[key]
    return default


# ---------------------------------------------------------------------------
# register


def _cmd_register(args) -> int:
    from .loss import LossConfig
    from .model import ConvNetConfig, save_checkpoint
    from .register import RegistrationConfig, register, report_to_json
    from .volume import load_volume, save_volume
    from .warp import save_field, warp_volume

    t0 = time.monotonic()
    file_cfg = _load_config_file(args.config)
    loss_file = file_cfg.get("loss", {})
    net_file = file_cfg.get("convnet", {})

    mode = _pick(args.mode, file_cfg, "mode", "freeform")
    loss_cfg = LossConfig(
        ncc_window=int(_pick(args.ncc_window, loss_file, "ncc_window", 9)),
        reg_weight=float(_pick(args.reg_weight, loss_file, "reg_weight", 1.0)),
        variance_floor=float(_pick(args.variance_floor, loss_file, "variance_floor", 1e-5)),
    )
    net_cfg = ConvNetConfig(
        levels=int(_pick(args.net_levels, net_file, "levels", 3)),
        base_filters=int(_pick(args.base_filters, net_file, "base_filters", 8)),
        use_batchnorm=bool(_pick(None, net_file, "use_batchnorm", True)),
    )
    schedule = _pick(args.iters_schedule, file_cfg, "iterations_schedule")
    if isinstance(schedule, str):
        schedule = tuple(int(s) for s in schedule.split(",") if s.strip())
    elif schedule is not None:
        schedule = tuple(int(s) for s in schedule)
    levels = _pick(args.levels, file_cfg, "pyramid_levels")
    iters = _pick(args.iters, file_cfg, "iterations_per_level")
    lr = _pick(args.learning_rate, file_cfg, "learning_rate")
    max_seconds = _pick(args.max_seconds, file_cfg, "max_seconds")
    cfg = RegistrationConfig(
        mode=mode,
        pyramid_levels=None if levels is None else int(levels),
        iterations_per_level=None if iters is None else int(iters),
        iterations_schedule=schedule,
        loss=loss_cfg,
        learning_rate=None if lr is None else float(lr),
        convergence_tol=float(_pick(args.convergence_tol, file_cfg, "convergence_tol", 1e-6)),
        max_seconds=None if max_seconds is None else float(max_seconds),
        seed=int(_pick(args.seed, file_cfg, "seed", 0)),
        convnet=net_cfg,
    )
    if args.out_checkpoint and cfg.mode != "convnet":
        raise ValueError("--out-checkpoint requires --mode convnet")

    fixed = load_volume(args.fixed)
    moving = load_volume(args.moving)
    print(
        f"registering {args.fixed} -> {args.moving}: mode={cfg.mode} "
        f"levels={cfg.resolved_levels} dims={fixed.dims}",
        file=sys.stderr,
    )
    report = register(fixed, moving, cfg)

    out_field = Path(args.out_field)
    save_field(report.field, out_field)
    outputs = [out_field, Path(str(out_field) + ".json")]
    if args.out_warped:
        save_volume(warp_volume(moving, report.field), args.out_warped)
        outputs += [Path(args.out_warped), Path(args.out_warped + ".json")]
    checkpoint_path = None
    if args.out_checkpoint:
        save_checkpoint(args.out_checkpoint, report.parameters)
        checkpoint_path = args.out_checkpoint
        outputs.append(Path(checkpoint_path))
    report_path = args.out_report or str(out_field) + ".report.json"
    Path(report_path).write_text(
        json.dumps(report_to_json(report, str(out_field), checkpoint_path), indent=2) + "\n"
    )
    outputs.append(Path(report_path))

    manifest_path = str(out_field) + ".manifest.json"
    _write_manifest(
        manifest_path,
        "register",
        cfg.to_dict(),
        [args.fixed, args.moving] + ([args.config] if args.config else []),
        outputs,
        time.monotonic() - t0,
    )
    final = report.levels[-1].losses[report.levels[-1].best_iteration]
    print(
        f"total={final.total!r} similarity={final.similarity!r} "
        f"smoothness={final.smoothness!r} iterations={report.iterations_executed} "
        f"stop={report.stop_reason}"
    )
    return 0


# ---------------------------------------------------------------------------
# eval


def _read_value_column(path) -> list[float]:
    values = []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line:
            continue
        try:
            values.append(float(line.split(",")[-1]))
        except ValueError:
            if values:
                raise ValueError(f"{path}: malformed value line {line!r}") from None
            # header line
    if not values:
        raise ValueError(f"{path}: no numeric values")
    return values


def _cmd_eval(args) -> int:
    from .evaluate import (
        CaseRecord,
        case_metrics,
        cohort_summary,
        landmark_errors,
        load_landmarks,
        save_long_errors,
        save_metrics,
        transform_landmarks,
    )
    from .warp import jacobian_determinant, load_field

    t0 = time.monotonic()
    if args.summarize:
        values = _read_value_column(args.summarize)
        s = cohort_summary(values)
        print(
            f"n={len(values)} mean={s.mean!r} stddev={s.stddev!r} "
            f"median={s.median!r} q25={s.q25!r} q75={s.q75!r}"
        )
        return 0
    for flag, value in (
        ("--field", args.field),
        ("--fixed-landmarks", args.fixed_landmarks),
        ("--moving-landmarks", args.moving_landmarks),
    ):
        if value is None:
            raise ValueError(f"{flag} is required unless --summarize is used")

    field = load_field(args.field)
    fixed_lms = load_landmarks(args.fixed_landmarks)
    moving_lms = load_landmarks(args.moving_landmarks)
    case = args.case or Path(args.field).stem

    before = landmark_errors(fixed_lms, moving_lms)
    mapped = transform_landmarks(fixed_lms, field)
    after = landmark_errors(mapped, moving_lms)
    jmap = jacobian_determinant(field)
    metrics = case_metrics(after, before, jmap)
    import numpy as np

    initial_median = float(np.median(before))

    outputs = []
    if args.out_prefix:
        prefix = args.out_prefix
        csv_path = prefix + "metrics.csv"
        json_path = prefix + "metrics.json"
        long_path = prefix + "errors_long.csv"
        record = CaseRecord(case=case, initial_mae_median=initial_median, metrics=metrics)
        save_metrics([record], csv_path, json_path)
        rows = [(case, "initial", e) for e in before] + [
            (case, "registered", e) for e in after
        ]
        save_long_errors(rows, long_path)
        outputs = [csv_path, json_path, long_path]
        _write_manifest(
            prefix + "manifest.json",
            "eval",
            {"case": case},
            [args.field, args.fixed_landmarks, args.moving_landmarks],
            outputs,
            time.monotonic() - t0,
        )
    print(
        f"case={case} mae_median={metrics.mae_median!r} mae_mean={metrics.mae_mean!r} "
        f"mtre={metrics.mtre!r} robustness={metrics.robustness!r} "
        f"folding_fraction={metrics.folding_fraction!r} "
        f"initial_mae_median={initial_median!r}"
    )
    return 0


# ---------------------------------------------------------------------------
# synth


def _cmd_synth(args) -> int:
    from .synth import SynthConfig, generate_case, save_case

    t0 = time.monotonic()
    file_cfg = _load_config_file(args.config)
    cfg = SynthConfig(
        dims=tuple(_pick(args.dims, file_cfg, "dims", (48, 48, 48))),
        spacing=tuple(_pick(args.spacing, file_cfg, "spacing", (1.0, 1.0, 1.0))),
        seed=int(_pick(args.seed, file_cfg, "seed", 0)),
        num_blobs=int(_pick(args.num_blobs, file_cfg, "num_blobs", 12)),
        field_bumps=int(_pick(args.field_bumps, file_cfg, "field_bumps", 4)),
        max_displacement=float(_pick(args.max_disp, file_cfg, "max_displacement", 5.0)),
        num_landmarks=int(_pick(args.num_landmarks, file_cfg, "num_landmarks", 20)),
        noise_sigma=float(_pick(args.noise_sigma, file_cfg, "noise_sigma", 0.02)),
        cavity=bool(_pick(args.cavity or None, file_cfg, "cavity", False)),
    )
    case = generate_case(cfg)
    manifest = save_case(case, args.out)
    outdir = Path(args.out)
    _write_manifest(
        outdir / "manifest.json",
        "synth",
        cfg.to_dict(),
        [],
        [outdir / name for name in manifest["files"].values()] + [outdir / "case.json"],
        time.monotonic() - t0,
    )
    print(
        f"case seed={cfg.seed} dims={'x'.join(str(d) for d in cfg.dims)} "
        f"max_disp={cfg.max_displacement!r} residual={case.inversion_residual!r} "
        f"out={args.out}"
    )
    return 0


# ---------------------------------------------------------------------------
# slices


def _cmd_slices(args) -> int:
    from .volume import export_slice, load_volume
    from .warp import jacobian_determinant, load_field

    t0 = time.monotonic()
    if (args.volume is None) == (args.field is None):
        raise ValueError("exactly one of --volume / --field is required")
    if args.volume is not None:
        if args.jacobian:
            raise ValueError("--jacobian applies to --field input only")
        vol = load_volume(args.volume)
        src = args.volume
    else:
        if not args.jacobian:
            raise ValueError("--field input requires --jacobian (renders the Jacobian map)")
        vol = jacobian_determinant(load_field(args.field))
        src = args.field
    export_slice(vol, args.axis, args.index, args.out)
    _write_manifest(
        str(args.out) + ".manifest.json",
        "slices",
        {"axis": args.axis, "index": args.index, "jacobian": bool(args.jacobian)},
        [src],
        [args.out],
        time.monotonic() - t0,
    )
    print(f"wrote {args.out}")
    return 0


def _cmd_version(args) -> int:
    from . import __version__

    print(f"defreg {__version__}")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="defreg", description=__doc__.splitlines()[0])
    parser.add_argument(
        "--threads",
        type=int,
        default=None,
        help="BLAS/OpenMP thread cap; 1 is the bit-reproducibility baseline "
        "(default: DEFREG_THREADS or all cores)",
    )
    sub = parser.add_subparsers(dest="command", metavar="command")

    p = sub.add_parser("register", parents=[], help="register a moving volume to a fixed one")
    p.add_argument("--fixed", required=True, help="fixed volume (.vol)")
    p.add_argument("--moving", required=True, help="moving volume (.vol)")
    p.add_argument("--out-field", required=True, help="output displacement field (.dfield)")
    p.add_argument("--out-warped", help="optional warped moving volume (.vol)")
    p.add_argument("--out-report", help="report JSON path (default: <out-field>.report.json)")
    p.add_argument("--out-checkpoint", help="network checkpoint path (convnet mode)")
    p.add_argument(
        "--mode", choices=("freeform", "convnet"), help="parameterization (default: freeform)"
    )
    p.add_argument(
        "--levels",
        type=int,
        help="pyramid levels (default: 3 freeform, 1 convnet)",
    )
    p.add_argument(
        "--iters",
        type=int,
        help="iterations per level (default: 200 freeform, 100 convnet)",
    )
    p.add_argument(
        "--iters-schedule",
        help="comma-separated per-level iterations, coarsest first (overrides --iters)",
    )
    p.add_argument(
        "--lambda",
        dest="reg_weight",
        type=float,
        help="smoothness weight (default: 1.0)",
    )
    p.add_argument("--ncc-window", type=int, help="NCC window side in voxels (default: 9)")
    p.add_argument(
        "--variance-floor", type=float, help="NCC denominator floor (default: 1e-5)"
    )
    p.add_argument(
        "--learning-rate",
        type=float,
        help="Adam step size (default: 1.0 freeform, 1e-4 convnet)",
    )
    p.add_argument(
        "--convergence-tol",
        type=float,
        help="relative loss-change tolerance over a 10-iteration window (default: 1e-6)",
    )
    p.add_argument("--max-seconds", type=float, help="wall-clock budget (default: none)")
    p.add_argument("--seed", type=int, help="network init seed, convnet mode (default: 0)")
    p.add_argument("--net-levels", type=int, help="encoder depth, convnet mode (default: 3)")
    p.add_argument(
        "--base-filters", type=int, help="first-level filter count, convnet mode (default: 8)"
    )
    p.add_argument("--config", help="JSON config file; flags override its values")
    p.set_defaults(func=_cmd_register)

    p = sub.add_parser("eval", help="landmark evaluation of a displacement field")
    p.add_argument("--field", help="displacement field (.dfield)")
    p.add_argument("--fixed-landmarks", help="fixed-image landmark CSV (id,x,y,z)")
    p.add_argument("--moving-landmarks", help="moving-image landmark CSV (id,x,y,z)")
    p.add_argument("--case", help="case label for output rows (default: field file stem)")
    p.add_argument(
        "--out-prefix", help="write <prefix>metrics.{csv,json} and <prefix>errors_long.csv"
    )
    p.add_argument(
        "--summarize",
        metavar="CSV",
        help="print cohort summary statistics of a single-column value file and exit",
    )
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("synth", help="generate a synthetic ground-truth case")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--dims", type=int, nargs=3, metavar=("NX", "NY", "NZ"),
                   help="grid size (default: 48 48 48)")
    p.add_argument("--spacing", type=float, nargs=3, metavar=("SX", "SY", "SZ"),
                   help="voxel spacing in mm (default: 1 1 1)")
    p.add_argument("--seed", type=int, help="generator seed (default: 0)")
    p.add_argument("--num-blobs", type=int, help="intensity blob count (default: 12)")
    p.add_argument("--field-bumps", type=int, help="vector bump count (default: 4)")
    p.add_argument("--max-disp", type=float, help="peak displacement in mm (default: 5)")
    p.add_argument("--num-landmarks", type=int, help="landmark count (default: 20)")
    p.add_argument("--noise-sigma", type=float, help="moving-image noise sigma (default: 0.02)")
    p.add_argument("--cavity", action="store_true", default=False,
                   help="zero out a spherical region of the moving image (default: off)")
    p.add_argument("--config", help="JSON config file; flags override its values")
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("slices", help="export a 2D PGM slice from a volume or Jacobian map")
    p.add_argument("--volume", help="volume input (.vol)")
    p.add_argument("--field", help="field input (.dfield), rendered via --jacobian")
    p.add_argument("--jacobian", action="store_true", default=False,
                   help="render the field's Jacobian determinant map")
    p.add_argument("--axis", choices=("x", "y", "z"), required=True, help="slice axis")
    p.add_argument("--index", type=int, required=True, help="slice index along the axis")
    p.add_argument("--out", required=True, help="output PGM path")
    p.set_defaults(func=_cmd_slices)

    p = sub.add_parser("version", help="print the tool version")
    p.set_defaults(func=_cmd_version)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if not hasattr(args, "func"):
        parser.print_usage(sys.stderr)
        print("defreg: error: a command is required", file=sys.stderr)
        return 1
    try:
        _configure_threads(args.threads)
        return args.func(args)
    except OSError as exc:
        print(f"defreg: i/o error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"defreg: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
