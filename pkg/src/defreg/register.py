"""Self-supervised registration driver for a single volume pair.

Minimizes windowed-NCC dissimilarity plus displacement-gradient smoothness
with Adam, coarse to fine over a mean-downsampling pyramid.  Two modes:

* freeform: the displacement field is optimized directly; the coarsest level
  starts from zero and each finer level starts from the upsampled result.
* convnet: a small encoder/decoder predicts the field from the image pair
  and its weights are optimized; "levels" become full-resolution rounds with
  re-initialized optimizer state (the network's internal strides already
  form a pyramid), so pyramid_levels defaults to 1 here.

Inputs are z-score normalized on entry if they are not already.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from .loss import LossConfig, LossValue, overall_loss
from .model import (
    AdamState,
    ConvNetConfig,
    adam_step,
    convnet_backward,
    convnet_forward,
    init_convnet_parameters,
    trainable_tensors,
)
from .volume import Volume, zscore_normalize
from .warp import DisplacementField, resample_field

__all__ = [
    "RegistrationConfig",
    "LevelTrace",
    "RegistrationReport",
    "register",
    "downsample_volume",
    "report_to_json",
]

_MODES = ("freeform", "convnet")
_CONVERGENCE_WINDOW = 10


@dataclass(frozen=True)
class RegistrationConfig:
    """Driver settings; None fields resolve to mode-dependent defaults.

    Defaults by mode: pyramid_levels 3 (freeform) / 1 (convnet);
    iterations_per_level 200 / 100; learning_rate 1.0 / 1e-4.  The freeform
    rate is in mm of field motion per iteration (Adam steps are normalized);
    the convnet rate applies to network weights.
    """

    mode: str = "freeform"
    pyramid_levels: int | None = None
    iterations_per_level: int | None = None
    iterations_schedule: tuple[int, ...] | None = None
    loss: LossConfig = field(default_factory=LossConfig)
    learning_rate: float | None = None
    convergence_tol: float = 1e-6
    max_seconds: float | None = None
    seed: int = 0
    convnet: ConvNetConfig = field(default_factory=ConvNetConfig)

    def __post_init__(self):
        if self.mode not in _MODES:
            raise ValueError(f"mode must be one of {_MODES}, got {self.mode!r}")
        if self.pyramid_levels is not None and self.pyramid_levels < 1:
            raise ValueError(f"pyramid_levels must be >= 1, got {self.pyramid_levels}")
        if self.iterations_per_level is not None and self.iterations_per_level < 0:
            raise ValueError(
                f"iterations_per_level must be >= 0, got {self.iterations_per_level}"
            )
        if self.iterations_schedule is not None:
            object.__setattr__(
                self, "iterations_schedule", tuple(self.iterations_schedule)
            )
            if any(i < 0 for i in self.iterations_schedule):
                raise ValueError("iterations_schedule entries must be >= 0")
            if len(self.iterations_schedule) != self.resolved_levels:
                raise ValueError(
                    f"iterations_schedule has {len(self.iterations_schedule)} entries "
                    f"for {self.resolved_levels} levels"
                )
        if self.learning_rate is not None and self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.convergence_tol < 0:
            raise ValueError(f"convergence_tol must be >= 0, got {self.convergence_tol}")
        if self.max_seconds is not None and self.max_seconds <= 0:
            raise ValueError(f"max_seconds must be > 0, got {self.max_seconds}")

    @property
    def resolved_levels(self) -> int:
        if self.pyramid_levels is not None:
            return self.pyramid_levels
        return 3 if self.mode == "freeform" else 1

    @property
    def resolved_learning_rate(self) -> float:
        if self.learning_rate is not None:
            return self.learning_rate
        return 1.0 if self.mode == "freeform" else 1e-4

    def iterations_for(self, level_from_coarsest: int) -> int:
        if self.iterations_schedule is not None:
            return self.iterations_schedule[level_from_coarsest]
        if self.iterations_per_level is not None:
            return self.iterations_per_level
        return 200 if self.mode == "freeform" else 100

    def to_dict(self) -> dict:
        d = {
            "mode": self.mode,
            "pyramid_levels": self.resolved_levels,
            "iterations_per_level": [
                self.iterations_for(l) for l in range(self.resolved_levels)
            ],
            "learning_rate": self.resolved_learning_rate,
            "convergence_tol": self.convergence_tol,
            "max_seconds": self.max_seconds,
            "seed": self.seed,
            "loss": {
                "ncc_window": self.loss.ncc_window,
                "reg_weight": self.loss.reg_weight,
                "variance_floor": self.loss.variance_floor,
            },
        }
        if self.mode == "convnet":
            d["convnet"] = {
                "levels": self.convnet.levels,
                "base_filters": self.convnet.base_filters,
                "use_batchnorm": self.convnet.use_batchnorm,
                "kernel_size": self.convnet.kernel_size,
            }
        return d


@dataclass
class LevelTrace:
    """Per-level diagnostics; losses[0] is the entry loss before any step."""

    level: int  # 0 = coarsest
    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    losses: list[LossValue]
    best_iteration: int
    iterations: int
    stop_reason: str


@dataclass
class RegistrationReport:
    field: DisplacementField
    levels: list[LevelTrace]
    wall_seconds: float
    iterations_executed: int
    stop_reason: str  # max_iters | converged | budget
    dims: tuple[int, int, int]
    padded_dims: tuple[int, int, int]
    config: RegistrationConfig
    parameters: object = None  # ConvNetParameters in convnet mode


def downsample_volume(v: Volume) -> Volume:
    """2x2x2 block mean with doubled spacing; odd trailing voxels average
    over the truncated block, so output dims are ceil(n/2).  Axes of length
    1 pass through unchanged."""
    if all(d == 1 for d in v.dims):
        raise ValueError("volume is already a single voxel; nothing to downsample")
    data = v.data
    for ax in range(3):
        n = data.shape[ax]
        starts = np.arange(0, n, 2)
        sums = np.add.reduceat(data, starts, axis=ax)
        counts = np.diff(np.append(starts, n)).astype(np.float64)
        shape = [1, 1, 1]
        shape[ax] = len(starts)
        data = sums / counts.reshape(shape)
    spacing = tuple(2.0 * s for s in v.spacing)
    return Volume(data=data, spacing=spacing, origin=v.origin)


def _ensure_normalized(v: Volume) -> Volume:
    mean = float(v.data.mean())
    std = float(v.data.std())
    if abs(mean) <= 1e-6 and abs(std - 1.0) <= 1e-6:
        return v
    return zscore_normalize(v)


class _Clock:
    def __init__(self, max_seconds):
        self.t0 = time.monotonic()
        self.max_seconds = max_seconds

    def elapsed(self) -> float:
        return time.monotonic() - self.t0

    def exhausted(self) -> bool:
        return self.max_seconds is not None and self.elapsed() > self.max_seconds


def _converged(totals: list[float], tol: float) -> bool:
    if len(totals) <= _CONVERGENCE_WINDOW:
        return False
    prev = totals[-1 - _CONVERGENCE_WINDOW]
    cur = totals[-1]
    return abs(cur - prev) < tol * max(abs(prev), 1e-12)


def register(fixed: Volume, moving: Volume, cfg: RegistrationConfig) -> RegistrationReport:
    if fixed.dims != moving.dims:
        raise ValueError(f"dims mismatch: fixed {fixed.dims} vs moving {moving.dims}")
    fixed = _ensure_normalized(fixed)
    moving = _ensure_normalized(moving)
    if cfg.mode == "freeform":
        return _register_freeform(fixed, moving, cfg)
    return _register_convnet(fixed, moving, cfg)


def _register_freeform(fixed, moving, cfg) -> RegistrationReport:
    n_levels = cfg.resolved_levels
    pairs = [(fixed, moving)]  # finest first
    for _ in range(n_levels - 1):
        f, m = pairs[-1]
        try:
            pairs.append((downsample_volume(f), downsample_volume(m)))
        except ValueError:
            raise ValueError(
                f"dims {fixed.dims} cannot support {n_levels} pyramid levels"
            ) from None
    pairs.reverse()  # coarsest first

    clock = _Clock(cfg.max_seconds)
    traces: list[LevelTrace] = []
    total_iters = 0
    stop_reason = "max_iters"
    field_cur: DisplacementField | None = None
    budget_hit = False

    for lvl, (f_l, m_l) in enumerate(pairs):
        if field_cur is None:
            field_cur = DisplacementField.zeros(f_l.dims, f_l.spacing, f_l.origin)
        else:
            field_cur = resample_field(field_cur, f_l.dims, spacing=f_l.spacing)
        iters = cfg.iterations_for(lvl)
        params = {"field": field_cur.data}
        state = AdamState.init(params, alpha=cfg.resolved_learning_rate)
        lv, grad = overall_loss(f_l, m_l, field_cur, cfg.loss)
        losses = [lv]
        best_val, best_data, best_it = lv, params["field"], 0
        level_stop = "max_iters"
        for it in range(1, iters + 1):
            params, state = adam_step(params, {"field": grad.data}, state)
            field_cur = DisplacementField(
                data=params["field"], spacing=f_l.spacing, origin=f_l.origin
            )
            lv, grad = overall_loss(f_l, m_l, field_cur, cfg.loss)
            losses.append(lv)
            total_iters += 1
            if lv.total < best_val.total:
                best_val, best_data, best_it = lv, params["field"], it
            if _converged([x.total for x in losses], cfg.convergence_tol):
                level_stop = "converged"
                break
            if clock.exhausted():
                level_stop = "budget"
                budget_hit = True
                break
        if iters == 0:
            level_stop = "max_iters"
        field_cur = DisplacementField(data=best_data, spacing=f_l.spacing, origin=f_l.origin)
        traces.append(
            LevelTrace(
                level=lvl,
                dims=f_l.dims,
                spacing=f_l.spacing,
                losses=losses,
                best_iteration=best_it,
                iterations=len(losses) - 1,
                stop_reason=level_stop,
            )
        )
        stop_reason = level_stop
        if budget_hit:
            break

    if field_cur.dims != fixed.dims:
        field_cur = resample_field(field_cur, fixed.dims, spacing=fixed.spacing)
    return RegistrationReport(
        field=field_cur,
        levels=traces,
        wall_seconds=clock.elapsed(),
        iterations_executed=total_iters,
        stop_reason=stop_reason,
        dims=fixed.dims,
        padded_dims=fixed.dims,
        config=cfg,
    )


def _pad_to_multiple(v: Volume, mult: int) -> Volume:
    pads = [(0, (-d) % mult) for d in v.dims]
    if not any(hi for _, hi in pads):
        return v
    data = np.pad(v.data, pads, mode="edge")
    return Volume(data=data, spacing=v.spacing, origin=v.origin)


def _register_convnet(fixed, moving, cfg) -> RegistrationReport:
    div = 2**cfg.convnet.levels
    f_pad = _pad_to_multiple(fixed, div)
    m_pad = _pad_to_multiple(moving, div)
    params = init_convnet_parameters(cfg.convnet, seed=cfg.seed)

    clock = _Clock(cfg.max_seconds)
    traces: list[LevelTrace] = []
    total_iters = 0
    stop_reason = "max_iters"
    best_val = None
    best_field = None
    best_tensors = dict(params.tensors)
    budget_hit = False

    for rnd in range(cfg.resolved_levels):
        iters = cfg.iterations_for(rnd)
        state = AdamState.init(trainable_tensors(params), alpha=cfg.resolved_learning_rate)
        pred, cache = convnet_forward(params, f_pad, m_pad, train=True)
        lv, grad = overall_loss(f_pad, m_pad, pred, cfg.loss)
        losses = [lv]
        if best_val is None or lv.total < best_val.total:
            best_val, best_field, best_tensors = lv, pred, dict(params.tensors)
        round_best_val, round_best_it = lv, 0
        level_stop = "max_iters"
        for it in range(1, iters + 1):
            grads = convnet_backward(cache, grad)
            new_trainable, state = adam_step(trainable_tensors(params), grads, state)
            params.tensors.update(new_trainable)
            pred, cache = convnet_forward(params, f_pad, m_pad, train=True)
            lv, grad = overall_loss(f_pad, m_pad, pred, cfg.loss)
            losses.append(lv)
            total_iters += 1
            if lv.total < best_val.total:
                best_val, best_field, best_tensors = lv, pred, dict(params.tensors)
            if lv.total < round_best_val.total:
                round_best_val, round_best_it = lv, it
            if _converged([x.total for x in losses], cfg.convergence_tol):
                level_stop = "converged"
                break
            if clock.exhausted():
                level_stop = "budget"
                budget_hit = True
                break
        if iters == 0:
            level_stop = "max_iters"
        traces.append(
            LevelTrace(
                level=rnd,
                dims=f_pad.dims,
                spacing=f_pad.spacing,
                losses=losses,
                best_iteration=round_best_it,
                iterations=len(losses) - 1,
                stop_reason=level_stop,
            )
        )
        stop_reason = level_stop
        if budget_hit:
            break

    params.tensors = best_tensors
    out = best_field
    if out.dims != fixed.dims:
        nx, ny, nz = fixed.dims
        out = DisplacementField(
            data=out.data[:nx, :ny, :nz, :],
            spacing=fixed.spacing,
            origin=fixed.origin,
        )
    return RegistrationReport(
        field=out,
        levels=traces,
        wall_seconds=clock.elapsed(),
        iterations_executed=total_iters,
        stop_reason=stop_reason,
        dims=fixed.dims,
        padded_dims=f_pad.dims,
        config=cfg,
        parameters=params,
    )


def report_to_json(
    report: RegistrationReport,
    field_path: str | None = None,
    checkpoint_path: str | None = None,
) -> dict:
    """Serializable run record: config, traces, timing, stop reason, paths."""
    return {
        "mode": report.config.mode,
        "config": report.config.to_dict(),
        "dims": list(report.dims),
        "padded_dims": list(report.padded_dims),
        "wall_seconds": report.wall_seconds,
        "iterations_executed": report.iterations_executed,
        "stop_reason": report.stop_reason,
        "levels": [
            {
                "level": t.level,
                "dims": list(t.dims),
                "spacing": list(t.spacing),
                "iterations": t.iterations,
                "best_iteration": t.best_iteration,
                "stop_reason": t.stop_reason,
                "losses": [
                    {
                        "total": lv.total,
                        "similarity": lv.similarity,
                        "smoothness": lv.smoothness,
                    }
                    for lv in t.losses
                ],
            }
            for t in report.levels
        ],
        "field_path": field_path,
        "checkpoint_path": checkpoint_path,
    }
