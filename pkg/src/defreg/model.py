"""Deformation parameterizations and their training machinery.

Two ways to produce a displacement field:

* FreeFormModel: the field itself is the parameter vector (identity
  parameterization, gradients pass through unchanged).
* A small 3D convolutional encoder/decoder that predicts the field from the
  stacked image pair.  Forward and backward passes are written out by hand
  on channels-first float64 arrays, so every parameter gradient can be
  checked against finite differences.

Also provides the bias-corrected Adam update used by the registration
driver, and a binary checkpoint format for the network weights.

Network layout (levels L, base filters F): the encoder applies, per level,
two 3x3x3 same-padded convolutions each followed by ReLU, then 2x max
pooling; filter counts double per level starting at F.  The decoder applies,
per level, nearest-neighbor 2x up-sampling, concatenation with the matching
encoder features, one 3x3x3 convolution, optional batch normalization and
ReLU.  A final 1x1x1 convolution maps to 3 channels interpreted as mm
displacements.  The head starts at exactly zero, so an untrained network
predicts the identity transform.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .volume import Volume
from .warp import DisplacementField

__all__ = [
    "FreeFormModel",
    "ConvNetConfig",
    "ConvNetParameters",
    "AdamState",
    "adam_step",
    "init_convnet_parameters",
    "convnet_forward",
    "convnet_backward",
    "freeform_apply",
    "trainable_tensors",
    "save_checkpoint",
    "load_checkpoint",
]

_BN_EPS = 1e-5
_BN_MOMENTUM = 0.9  # keep rate of the running statistics
_CHECKPOINT_MAGIC = b"IRNW"
_CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class FreeFormModel:
    """The displacement field itself as the optimization variable."""

    field: DisplacementField


def freeform_apply(model: FreeFormModel) -> DisplacementField:
    """Identity parameterization: parameters are the field, gradients pass through."""
    return model.field


@dataclass(frozen=True)
class ConvNetConfig:
    levels: int = 3
    base_filters: int = 8
    use_batchnorm: bool = True
    kernel_size: int = 3

    def __post_init__(self):
        if self.levels < 1:
            raise ValueError(f"levels must be >= 1, got {self.levels}")
        if self.base_filters < 1:
            raise ValueError(f"base_filters must be >= 1, got {self.base_filters}")
        if self.kernel_size != 3:
            raise ValueError("interior convolutions are fixed at kernel size 3")


@dataclass
class ConvNetParameters:
    """Named weight tensors in canonical declaration order.

    Batch-norm running statistics live here too but are not trainable; they
    are refreshed in place during training-mode forward passes.
    """

    config: ConvNetConfig
    tensors: dict[str, np.ndarray] = field(default_factory=dict)


def _layer_plan(cfg: ConvNetConfig):
    """(name, shape) pairs in declaration order, plus per-level channel counts."""
    plan = []
    in_ch = 2
    enc_ch = []
    for l in range(cfg.levels):
        f = cfg.base_filters * (2**l)
        plan.append((f"enc{l}_conv1_w", (f, in_ch, 3, 3, 3)))
        plan.append((f"enc{l}_conv1_b", (f,)))
        plan.append((f"enc{l}_conv2_w", (f, f, 3, 3, 3)))
        plan.append((f"enc{l}_conv2_b", (f,)))
        enc_ch.append(f)
        in_ch = f
    up_ch = enc_ch[-1]
    for l in reversed(range(cfg.levels)):
        f = cfg.base_filters * (2**l)
        plan.append((f"dec{l}_conv_w", (f, up_ch + enc_ch[l], 3, 3, 3)))
        plan.append((f"dec{l}_conv_b", (f,)))
        if cfg.use_batchnorm:
            plan.append((f"dec{l}_bn_gamma", (f,)))
            plan.append((f"dec{l}_bn_beta", (f,)))
            plan.append((f"dec{l}_bn_running_mean", (f,)))
            plan.append((f"dec{l}_bn_running_var", (f,)))
        up_ch = f
    plan.append(("head_w", (3, cfg.base_filters, 1, 1, 1)))
    plan.append(("head_b", (3,)))
    return plan


def init_convnet_parameters(cfg: ConvNetConfig, seed: int = 0) -> ConvNetParameters:
    """He-uniform fan-in init for hidden layers; the output head starts at zero."""
    rng = np.random.default_rng(seed)
    tensors: dict[str, np.ndarray] = {}
    for name, shape in _layer_plan(cfg):
        if name.startswith("head"):
            tensors[name] = np.zeros(shape)
        elif name.endswith("_w"):
            fan_in = int(np.prod(shape[1:]))
            bound = np.sqrt(6.0 / fan_in)
            tensors[name] = rng.uniform(-bound, bound, size=shape)
        elif name.endswith(("_gamma", "_running_var")):
            tensors[name] = np.ones(shape)
        else:
            tensors[name] = np.zeros(shape)
    return ConvNetParameters(config=cfg, tensors=tensors)


def trainable_tensors(params: ConvNetParameters) -> dict[str, np.ndarray]:
    """Everything Adam should update (running statistics excluded)."""
    return {k: v for k, v in params.tensors.items() if "running" not in k}


# ---------------------------------------------------------------------------
# layer primitives (channels-first (C, X, Y, Z) float64 arrays)

def _conv3_forward(x, w, b):
    cout = w.shape[0]
    nx, ny, nz = x.shape[1:]
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (1, 1)))
    out = np.broadcast_to(b[:, None, None, None], (cout, nx, ny, nz)).copy()
    for dx in range(3):
        for dy in range(3):
            for dz in range(3):
                out += np.einsum(
                    "oi,ixyz->oxyz",
                    w[:, :, dx, dy, dz],
                    xp[:, dx : dx + nx, dy : dy + ny, dz : dz + nz],
                )
    return out, xp


def _conv3_backward(xp, w, dout):
    nx, ny, nz = dout.shape[1:]
    dw = np.zeros_like(w)
    db = dout.sum(axis=(1, 2, 3))
    dxp = np.zeros_like(xp)
    for dx in range(3):
        for dy in range(3):
            for dz in range(3):
                sl = xp[:, dx : dx + nx, dy : dy + ny, dz : dz + nz]
                dw[:, :, dx, dy, dz] = np.einsum("oxyz,ixyz->oi", dout, sl)
                dxp[:, dx : dx + nx, dy : dy + ny, dz : dz + nz] += np.einsum(
                    "oi,oxyz->ixyz", w[:, :, dx, dy, dz], dout
                )
    return dxp[:, 1:-1, 1:-1, 1:-1], dw, db


def _conv1_forward(x, w, b):
    return np.einsum("oi,ixyz->oxyz", w[:, :, 0, 0, 0], x) + b[:, None, None, None]


def _conv1_backward(x, w, dout):
    dw = np.einsum("oxyz,ixyz->oi", dout, x)[:, :, None, None, None]
    db = dout.sum(axis=(1, 2, 3))
    dx = np.einsum("oi,oxyz->ixyz", w[:, :, 0, 0, 0], dout)
    return dx, dw, db


def _maxpool_forward(x):
    c, nx, ny, nz = x.shape
    win = x.reshape(c, nx // 2, 2, ny // 2, 2, nz // 2, 2)
    # flatten window cells in increasing linear-index order (x fastest) so
    # argmax ties route to the lowest linear index
    win = win.transpose(0, 1, 3, 5, 6, 4, 2).reshape(c, nx // 2, ny // 2, nz // 2, 8)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    return out, (arg, x.shape)


def _maxpool_backward(cache, dout):
    arg, in_shape = cache
    c, nx, ny, nz = in_shape
    dwin = np.zeros((c, nx // 2, ny // 2, nz // 2, 8))
    np.put_along_axis(dwin, arg[..., None], dout[..., None], axis=-1)
    dwin = dwin.reshape(c, nx // 2, ny // 2, nz // 2, 2, 2, 2)
    return dwin.transpose(0, 1, 6, 2, 5, 3, 4).reshape(c, nx, ny, nz)


def _upsample_forward(x):
    return np.repeat(np.repeat(np.repeat(x, 2, axis=1), 2, axis=2), 2, axis=3)


def _upsample_backward(dout):
    c, nx, ny, nz = dout.shape
    return dout.reshape(c, nx // 2, 2, ny // 2, 2, nz // 2, 2).sum(axis=(2, 4, 6))


def _bn_forward(x, gamma, beta, running_mean, running_var, train):
    if train:
        mu = x.mean(axis=(1, 2, 3))
        var = x.var(axis=(1, 2, 3))
        new_mean = _BN_MOMENTUM * running_mean + (1.0 - _BN_MOMENTUM) * mu
        new_var = _BN_MOMENTUM * running_var + (1.0 - _BN_MOMENTUM) * var
    else:
        mu, var = running_mean, running_var
        new_mean, new_var = running_mean, running_var
    inv = 1.0 / np.sqrt(var + _BN_EPS)
    xhat = (x - mu[:, None, None, None]) * inv[:, None, None, None]
    out = gamma[:, None, None, None] * xhat + beta[:, None, None, None]
    return out, (xhat, inv, gamma, train), new_mean, new_var


def _bn_backward(cache, dout):
    xhat, inv, gamma, train = cache
    dgamma = (dout * xhat).sum(axis=(1, 2, 3))
    dbeta = dout.sum(axis=(1, 2, 3))
    if not train:
        dx = dout * (gamma * inv)[:, None, None, None]
        return dx, dgamma, dbeta
    m = xhat[0].size
    s = (gamma * inv)[:, None, None, None]
    mean_dy = dout.mean(axis=(1, 2, 3))[:, None, None, None]
    mean_dy_xhat = (dout * xhat).sum(axis=(1, 2, 3))[:, None, None, None] / m
    dx = s * (dout - mean_dy - xhat * mean_dy_xhat)
    return dx, dgamma, dbeta


# ---------------------------------------------------------------------------


def convnet_forward(
    params: ConvNetParameters,
    fixed: Volume,
    moving: Volume,
    cfg: ConvNetConfig | None = None,
    train: bool = True,
):
    """Predict a displacement field from the stacked pair.

    Returns (field, cache); the cache feeds convnet_backward.  In training
    mode batch-norm uses the current activations' statistics (and refreshes
    the running ones in place); inference mode uses the running statistics.
    """
    if cfg is None:
        cfg = params.config
    elif cfg != params.config:
        raise ValueError(f"config {cfg} does not match parameters' config {params.config}")
    if fixed.dims != moving.dims:
        raise ValueError(f"dims mismatch: fixed {fixed.dims} vs moving {moving.dims}")
    div = 2**cfg.levels
    if any(d % div for d in fixed.dims):
        raise ValueError(f"dims {fixed.dims} not divisible by 2^levels = {div}")
    t = params.tensors
    x = np.stack([fixed.data, moving.data])
    records = []
    skips = []
    for l in range(cfg.levels):
        for conv in (1, 2):
            w, b = t[f"enc{l}_conv{conv}_w"], t[f"enc{l}_conv{conv}_b"]
            x, xp = _conv3_forward(x, w, b)
            records.append(("conv", f"enc{l}_conv{conv}", xp, w))
            mask = x > 0
            x = x * mask
            records.append(("relu", mask))
        skips.append(x)
        x, pool_cache = _maxpool_forward(x)
        records.append(("pool", pool_cache, l))
    for l in reversed(range(cfg.levels)):
        x = _upsample_forward(x)
        records.append(("upsample",))
        split = x.shape[0]
        x = np.concatenate([x, skips[l]], axis=0)
        records.append(("concat", split, l))
        w, b = t[f"dec{l}_conv_w"], t[f"dec{l}_conv_b"]
        x, xp = _conv3_forward(x, w, b)
        records.append(("conv", f"dec{l}_conv", xp, w))
        if cfg.use_batchnorm:
            x, bn_cache, new_mean, new_var = _bn_forward(
                x,
                t[f"dec{l}_bn_gamma"],
                t[f"dec{l}_bn_beta"],
                t[f"dec{l}_bn_running_mean"],
                t[f"dec{l}_bn_running_var"],
                train,
            )
            if train:
                t[f"dec{l}_bn_running_mean"] = new_mean
                t[f"dec{l}_bn_running_var"] = new_var
            records.append(("bn", f"dec{l}_bn", bn_cache))
        mask = x > 0
        x = x * mask
        records.append(("relu", mask))
    out = _conv1_forward(x, t["head_w"], t["head_b"])
    records.append(("head", x, t["head_w"]))
    field_data = np.moveaxis(out, 0, -1)
    pred = DisplacementField(data=field_data, spacing=fixed.spacing, origin=fixed.origin)
    cache = {"records": records, "dims": fixed.dims, "skip_grads": [None] * cfg.levels}
    return pred, cache


def convnet_backward(cache, grad_field: DisplacementField) -> dict[str, np.ndarray]:
    """Backpropagate a loss gradient on the field to all trainable tensors."""
    if grad_field.dims != cache["dims"]:
        raise ValueError(
            f"grad field dims {grad_field.dims} do not match forward dims {cache['dims']}"
        )
    grads: dict[str, np.ndarray] = {}
    skip_grads = cache["skip_grads"]
    dx = np.moveaxis(grad_field.data, -1, 0)
    for rec in reversed(cache["records"]):
        kind = rec[0]
        if kind == "head":
            _, x, w = rec
            dx, dw, db = _conv1_backward(x, w, dx)
            grads["head_w"] = dw
            grads["head_b"] = db
        elif kind == "relu":
            dx = dx * rec[1]
        elif kind == "bn":
            _, name, bn_cache = rec
            dx, dgamma, dbeta = _bn_backward(bn_cache, dx)
            grads[name + "_gamma"] = dgamma
            grads[name + "_beta"] = dbeta
        elif kind == "conv":
            _, name, xp, w = rec
            dx, dw, db = _conv3_backward(xp, w, dx)
            grads[name + "_w"] = dw
            grads[name + "_b"] = db
        elif kind == "concat":
            _, split, level = rec
            skip_grads[level] = dx[split:]
            dx = dx[:split]
        elif kind == "upsample":
            dx = _upsample_backward(dx)
        elif kind == "pool":
            # re-entering the encoder: the tensor below also fed the matching
            # skip connection, so fold that branch's gradient back in
            _, pool_cache, level = rec
            dx = _maxpool_backward(pool_cache, dx)
            if skip_grads[level] is not None:
                dx = dx + skip_grads[level]
        else:  # pragma: no cover
            raise AssertionError(f"unknown record {kind}")
    return grads


# ---------------------------------------------------------------------------
# Adam

@dataclass(frozen=True)
class AdamState:
    """First/second moment accumulators plus the step counter."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0
    alpha: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def init(cls, params: dict[str, np.ndarray], alpha: float) -> "AdamState":
        return cls(
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
            alpha=alpha,
        )


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update; inputs untouched, new dicts returned."""
    t = state.t + 1
    new_params = dict(params)
    m = dict(state.m)
    v = dict(state.v)
    for k, g in grads.items():
        if k not in params:
            raise KeyError(f"gradient for unknown parameter {k!r}")
        if g.shape != params[k].shape:
            raise ValueError(
                f"gradient shape {g.shape} != parameter shape {params[k].shape} for {k!r}"
            )
        mk = state.beta1 * m[k] + (1.0 - state.beta1) * g
        vk = state.beta2 * v[k] + (1.0 - state.beta2) * (g * g)
        mhat = mk / (1.0 - state.beta1**t)
        vhat = vk / (1.0 - state.beta2**t)
        new_params[k] = params[k] - state.alpha * mhat / (np.sqrt(vhat) + state.eps)
        m[k] = mk
        v[k] = vk
    return new_params, replace(state, m=m, v=v, t=t)


# ---------------------------------------------------------------------------
# checkpoints

def save_checkpoint(path, params: ConvNetParameters) -> None:
    """Write config and all tensors (declaration order, f32 little-endian)."""
    cfg = params.config
    plan = _layer_plan(cfg)
    chunks = [
        _CHECKPOINT_MAGIC,
        struct.pack(
            "<5I",
            _CHECKPOINT_VERSION,
            cfg.levels,
            cfg.base_filters,
            int(cfg.use_batchnorm),
            cfg.kernel_size,
        ),
        struct.pack("<I", len(plan)),
    ]
    for name, shape in plan:
        arr = params.tensors[name]
        if arr.shape != shape:
            raise ValueError(f"tensor {name!r} has shape {arr.shape}, expected {shape}")
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path) -> ConvNetParameters:
    raw = Path(path).read_bytes()
    if raw[:4] != _CHECKPOINT_MAGIC:
        raise ValueError(f"bad checkpoint magic {raw[:4]!r}")
    version, levels, base_filters, use_bn, ksize = struct.unpack_from("<5I", raw, 4)
    if version != _CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    cfg = ConvNetConfig(
        levels=levels,
        base_filters=base_filters,
        use_batchnorm=bool(use_bn),
        kernel_size=ksize,
    )
    plan = _layer_plan(cfg)
    (count,) = struct.unpack_from("<I", raw, 24)
    if count != len(plan):
        raise ValueError(f"checkpoint lists {count} tensors, config implies {len(plan)}")
    off = 28
    tensors: dict[str, np.ndarray] = {}
    for name, shape in plan:
        (ndim,) = struct.unpack_from("<I", raw, off)
        off += 4
        dims = struct.unpack_from(f"<{ndim}I", raw, off)
        off += 4 * ndim
        if dims != shape:
            raise ValueError(f"tensor {name!r} has dims {dims}, expected {shape}")
        n = int(np.prod(dims)) if dims else 1
        data = np.frombuffer(raw, dtype="<f4", count=n, offset=off)
        off += 4 * n
        tensors[name] = data.astype(np.float64).reshape(dims)
    if off != len(raw):
        raise ValueError(f"{len(raw) - off} trailing bytes after last tensor")
    return ConvNetParameters(config=cfg, tensors=tensors)
