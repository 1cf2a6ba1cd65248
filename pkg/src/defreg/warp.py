"""Displacement fields, trilinear resampling and Jacobian-determinant analysis.

A displacement field u lives on the fixed-image grid and maps fixed-space
points into moving space: the warped image at grid point x is the moving
image sampled at world(x) + u(x).  Displacements are stored in millimeters,
so values carry unchanged across grid resolutions.

Sampling clamps out-of-grid coordinates to the border.  The derivative of a
sample with respect to its coordinate is the slope of one interpolation
cell; at exact-integer coordinates the cell with the lower base index is
used (deterministic sub-gradient), and the derivative is zero where the
pre-clamp coordinate falls outside the grid.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .volume import Volume, VolumeHeader, _check_triple, _read_raw, _sidecar_path

__all__ = [
    "DisplacementField",
    "JacobianMap",
    "sample_trilinear",
    "warp_volume",
    "warp_volume_with_gradient",
    "jacobian_determinant",
    "folding_fraction",
    "resample_field",
    "load_field",
    "save_field",
]


@dataclass(frozen=True)
class DisplacementField:
    """Dense per-voxel displacement vectors in mm.

    data: float64 array of shape (nx, ny, nz, 3); last axis is (ux, uy, uz)
    """

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        arr = np.ascontiguousarray(self.data, dtype=np.float64)
        if arr.ndim != 4 or arr.shape[3] != 3 or min(arr.shape[:3]) < 1:
            raise ValueError(f"field data must have shape (nx, ny, nz, 3), got {arr.shape}")
        if not np.isfinite(arr).all():
            raise ValueError("field data contains non-finite values")
        if arr is self.data and arr.flags.writeable:
            arr = arr.copy()  # never freeze a caller-owned buffer in place
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "spacing", _check_triple("spacing", self.spacing, positive=True))
        object.__setattr__(self, "origin", _check_triple("origin", self.origin, positive=False))

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape[:3]

    @classmethod
    def zeros(cls, dims, spacing=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0)) -> "DisplacementField":
        nx, ny, nz = (int(d) for d in dims)
        return cls(data=np.zeros((nx, ny, nz, 3)), spacing=spacing, origin=origin)


# A Jacobian-determinant map is just a scalar volume (one value per voxel).
JacobianMap = Volume


def _cell_indices(t: np.ndarray, n: int):
    """Base/upper corner indices and fraction for coordinates already in [0, n-1].

    The base index is ceil(t) - 1 (clamped), so an exact-integer coordinate
    belongs to the cell below it.
    """
    i0 = np.clip(np.ceil(t).astype(np.int64) - 1, 0, max(n - 2, 0))
    i1 = np.minimum(i0 + 1, n - 1)
    return i0, i1, t - i0


def _trilinear(data: np.ndarray, cx, cy, cz, want_grad: bool):
    """Trilinear interpolation of ``data`` at voxel coordinates (cx, cy, cz).

    Coordinates may lie outside the grid; they are clamped.  When
    ``want_grad`` is set, also returns d(value)/d(coordinate) per axis, zero
    wherever the unclamped coordinate is out of grid.
    """
    nx, ny, nz = data.shape
    tx = np.clip(cx, 0.0, nx - 1.0)
    ty = np.clip(cy, 0.0, ny - 1.0)
    tz = np.clip(cz, 0.0, nz - 1.0)
    ix0, ix1, fx = _cell_indices(tx, nx)
    iy0, iy1, fy = _cell_indices(ty, ny)
    iz0, iz1, fz = _cell_indices(tz, nz)

    c000 = data[ix0, iy0, iz0]
    c100 = data[ix1, iy0, iz0]
    c010 = data[ix0, iy1, iz0]
    c110 = data[ix1, iy1, iz0]
    c001 = data[ix0, iy0, iz1]
    c101 = data[ix1, iy0, iz1]
    c011 = data[ix0, iy1, iz1]
    c111 = data[ix1, iy1, iz1]

    # symmetric lerp weights keep node coordinates (f in {0, 1}) bit-exact
    wx = 1.0 - fx
    a00 = wx * c000 + fx * c100
    a10 = wx * c010 + fx * c110
    a01 = wx * c001 + fx * c101
    a11 = wx * c011 + fx * c111
    wy = 1.0 - fy
    b0 = wy * a00 + fy * a10
    b1 = wy * a01 + fy * a11
    value = (1.0 - fz) * b0 + fz * b1
    if not want_grad:
        return value, None

    in_x = (cx >= 0.0) & (cx <= nx - 1.0)
    in_y = (cy >= 0.0) & (cy <= ny - 1.0)
    in_z = (cz >= 0.0) & (cz <= nz - 1.0)

    gx = (wy * (c100 - c000) + fy * (c110 - c010)) * (1.0 - fz) + (
        wy * (c101 - c001) + fy * (c111 - c011)
    ) * fz
    gy = (a10 - a00) * (1.0 - fz) + (a11 - a01) * fz
    gz = b1 - b0
    grad = np.stack([gx * in_x, gy * in_y, gz * in_z], axis=-1)
    return value, grad


def sample_trilinear(v: Volume, p) -> float:
    """Sample a volume at one mm point; out-of-grid points clamp to the border."""
    p = np.asarray(p, dtype=np.float64)
    if p.shape != (3,) or not np.isfinite(p).all():
        raise ValueError(f"point must be a finite 3-vector, got {p!r}")
    coords = p / np.asarray(v.spacing)
    value, _ = _trilinear(v.data, coords[0], coords[1], coords[2], want_grad=False)
    return float(value)


def _warp(moving: Volume, field: DisplacementField, want_grad: bool):
    # Work in the moving grid's index space: ratio 1.0 and zero displacement
    # then leave coordinates exactly on nodes, so the zero field is an exact
    # identity warp.
    nx, ny, nz = field.dims
    rx, ry, rz = (fs / ms for fs, ms in zip(field.spacing, moving.spacing))
    sx, sy, sz = moving.spacing
    cx = np.arange(nx)[:, None, None] * rx + field.data[..., 0] / sx
    cy = np.arange(ny)[None, :, None] * ry + field.data[..., 1] / sy
    cz = np.arange(nz)[None, None, :] * rz + field.data[..., 2] / sz
    value, grad = _trilinear(moving.data, cx, cy, cz, want_grad)
    warped = Volume(data=value, spacing=field.spacing, origin=field.origin)
    if grad is not None:
        grad = grad / np.array([sx, sy, sz])  # d(sample)/d(displacement in mm)
    return warped, grad


def warp_volume(moving: Volume, field: DisplacementField) -> Volume:
    """Resample ``moving`` at world(x) + u(x) for every node x of the field grid."""
    warped, _ = _warp(moving, field, want_grad=False)
    return warped


def warp_volume_with_gradient(moving: Volume, field: DisplacementField):
    """Warp and also return d(warped voxel)/d(u component), shape (nx, ny, nz, 3)."""
    return _warp(moving, field, want_grad=True)


def jacobian_determinant(field: DisplacementField) -> JacobianMap:
    """Per-voxel det(I + grad u), derivatives in mm.

    Central differences on interior voxels, one-sided on faces; needs at
    least 2 voxels along each axis.
    """
    if min(field.dims) < 2:
        raise ValueError(f"jacobian needs dims >= 2 per axis, got {field.dims}")
    # J[a][c] = d u_c / d x_a
    J = [
        np.gradient(field.data[..., c], *field.spacing, edge_order=1)
        for c in range(3)
    ]
    m = [[J[c][a] + (1.0 if a == c else 0.0) for a in range(3)] for c in range(3)]
    det = (
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    )
    return JacobianMap(data=det, spacing=field.spacing, origin=field.origin)


def folding_fraction(jmap: JacobianMap) -> float:
    """Fraction of voxels with non-positive Jacobian determinant."""
    return float(np.mean(jmap.data <= 0.0))


def resample_field(field: DisplacementField, new_dims, spacing=None) -> DisplacementField:
    """Trilinearly resample each component onto a new grid.

    Displacement values (mm) carry unchanged.  Unless an explicit spacing is
    given, spacing is rescaled so the physical extent (n-1)*s of each axis
    is preserved; grid corners map onto grid corners.
    """
    new_dims = tuple(int(d) for d in new_dims)
    if len(new_dims) != 3 or min(new_dims) < 1:
        raise ValueError(f"new_dims must be 3 positive ints, got {new_dims}")
    if new_dims == field.dims and spacing is None:
        return field
    old = field.dims
    coords = []
    out_spacing = []
    for a in range(3):
        n_new, n_old, s_old = new_dims[a], old[a], field.spacing[a]
        if n_new == 1:
            coords.append(np.zeros(1))
            out_spacing.append(s_old * n_old)
        else:
            coords.append(np.arange(n_new) * (n_old - 1) / (n_new - 1))
            out_spacing.append(s_old * (n_old - 1) / (n_new - 1))
    cx = coords[0][:, None, None] + np.zeros(new_dims)
    cy = coords[1][None, :, None] + np.zeros(new_dims)
    cz = coords[2][None, None, :] + np.zeros(new_dims)
    out = np.empty(new_dims + (3,))
    for c in range(3):
        out[..., c], _ = _trilinear(field.data[..., c], cx, cy, cz, want_grad=False)
    if spacing is None:
        spacing = tuple(out_spacing)
    return DisplacementField(data=out, spacing=spacing, origin=field.origin)


def load_field(path) -> DisplacementField:
    """Load a ``.dfield`` raw file (3 interleaved f32 components per voxel)."""
    header, flat = _read_raw(path, expected_channels=3)
    nx, ny, nz = header.dims
    data = flat.reshape(nz, ny, nx, 3).transpose(2, 1, 0, 3)
    return DisplacementField(data=data, spacing=header.spacing, origin=header.origin)


def save_field(field: DisplacementField, path) -> None:
    """Write raw little-endian float32 payload plus JSON sidecar with channels=3."""
    from pathlib import Path

    path = Path(path)
    header = VolumeHeader(dims=field.dims, spacing=field.spacing, origin=field.origin, channels=3)
    payload = field.data.transpose(2, 1, 0, 3).astype("<f4").tobytes()
    path.write_bytes(payload)
    _sidecar_path(path).write_text(header.to_json())
