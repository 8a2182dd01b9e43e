"""Diffeomorphic deformations parameterized by stationary velocity fields.

Value types are immutable-by-convention numpy containers (float32 storage);
the operations are pure functions computed in float64 via the torch kernels
in :mod:`dsynth.interp` and rounded back to float32 on return.

Coordinate/layout conventions:

- arrays are indexed ``[i, j, k]`` = (x, y, z); vector fields carry a leading
  component axis, ``[3, nx, ny, nz]``
- velocity vectors and deformation maps are in voxel units; a deformation map
  stores absolute sampling positions (the identity map is ``map[., i, j, k] =
  (i, j, k)`` exactly), displacements are ``map - identity``
- sampling outside the grid is edge-clamped

Serialization (``DSYN1``): the payload file holds raw little-endian float32
values in x-fastest order, components stored as consecutive scalar blocks;
a text sidecar header at ``<path>.hdr`` carries the magic string, dims,
spacing and component count.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import ValidationError
from . import interp

_MAGIC = "DSYN1"


@dataclass(frozen=True)
class Grid3:
    """Regular 3-D voxel grid: dims (nx, ny, nz), spacing (sx, sy, sz)."""

    dims: tuple[int, int, int]
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if len(self.dims) != 3 or any(int(d) < 2 for d in self.dims):
            raise ValidationError(f"grid dims must be three counts >= 2, got {self.dims}")
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise ValidationError(f"grid spacing must be three positive lengths, got {self.spacing}")
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))

    @property
    def voxel_count(self) -> int:
        nx, ny, nz = self.dims
        return nx * ny * nz


def _check_field(values: np.ndarray, grid: Grid3, components: int, what: str) -> np.ndarray:
    expected = (components, *grid.dims) if components > 1 else grid.dims
    arr = np.asarray(values, dtype=np.float32)
    if arr.shape != expected:
        raise ValidationError(f"{what} shape {arr.shape} does not match grid {expected}")
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{what} contains non-finite values")
    return arr


@dataclass(frozen=True)
class Volume:
    """Scalar image on a grid."""

    grid: Grid3
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        object.__setattr__(self, "values", _check_field(self.values, self.grid, 1, "volume"))


@dataclass(frozen=True)
class VelocityField:
    """Stationary velocity field, three components per voxel, voxel units."""

    grid: Grid3
    vectors: np.ndarray = field(repr=False)

    def __post_init__(self):
        object.__setattr__(self, "vectors", _check_field(self.vectors, self.grid, 3, "velocity field"))


@dataclass(frozen=True)
class DeformationField:
    """Coordinate map: absolute sampling positions per voxel, voxel units."""

    grid: Grid3
    map: np.ndarray = field(repr=False)

    def __post_init__(self):
        object.__setattr__(self, "map", _check_field(self.map, self.grid, 3, "deformation map"))


def _t(arr: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(arr, dtype=np.float64)).unsqueeze(0)

def _back(t: torch.Tensor) -> np.ndarray:
    return t.squeeze(0).numpy().astype(np.float32)


def identity_deformation(grid: Grid3) -> DeformationField:
    m = interp.identity_map(grid.dims, dtype=torch.float64).squeeze(0).numpy()
    return DeformationField(grid, m.astype(np.float32))


def zero_velocity(grid: Grid3) -> VelocityField:
    return VelocityField(grid, np.zeros((3, *grid.dims), dtype=np.float32))


def required_steps(v: VelocityField, steps: int) -> int:
    """Raise ``steps`` until the first Euler step stays within half a voxel."""
    if steps < 1:
        raise ValidationError("steps must be >= 1")
    vmax = float(np.abs(v.vectors).max()) if v.vectors.size else 0.0
    while vmax / (2.0**steps) > 0.5:
        steps += 1
    return steps


def exp_velocity(v: VelocityField, steps: int = 6) -> DeformationField:
    """phi = exp(v) by scaling and squaring.

    phi_0 = Id + v / 2**steps, then ``steps`` self-compositions. The step
    count is raised automatically if max|v| / 2**steps exceeds half a voxel.
    """
    steps = required_steps(v, steps)
    phi = interp.exp_velocity_map(_t(v.vectors), steps)
    return DeformationField(v.grid, _back(phi))


def invert(v: VelocityField, steps: int = 6) -> DeformationField:
    """exp(-v): the group inverse of exp(v) up to discretization."""
    return exp_velocity(VelocityField(v.grid, -v.vectors), steps)


def compose(outer: DeformationField, inner: DeformationField) -> DeformationField:
    """(outer o inner)(p) = outer(inner(p)); trilinear, edge-clamped."""
    if outer.grid != inner.grid:
        raise ValidationError("compose requires both fields on the same grid")
    m = interp.compose_maps(_t(outer.map), _t(inner.map))
    return DeformationField(outer.grid, _back(m))


def warp(x: Volume, phi: DeformationField, mode: str = "trilinear") -> Volume:
    """Resample ``x`` through ``phi``: output(p) = x(phi(p))."""
    if x.grid != phi.grid:
        raise ValidationError("warp requires volume and deformation on the same grid")
    if mode not in ("trilinear", "nearest"):
        raise ValidationError(f"unknown warp mode: {mode!r}")
    out = interp.warp_image(_t(x.values).unsqueeze(0), _t(phi.map), mode=mode)
    return Volume(x.grid, _back(out.squeeze(0)))


def displacement(phi: DeformationField) -> np.ndarray:
    """map - identity, float32 [3, nx, ny, nz]."""
    ident = interp.identity_map(phi.grid.dims, dtype=torch.float64).squeeze(0).numpy()
    return (phi.map.astype(np.float64) - ident).astype(np.float32)


def jacobian_det(phi: DeformationField) -> Volume:
    """Per-voxel determinant of the central-difference Jacobian of the map."""
    det = interp.jacobian_determinant_batch(_t(phi.map), spacing=phi.grid.spacing)
    return Volume(phi.grid, _back(det))


def diffusion_energy(v: VelocityField) -> float:
    """Sum of squared forward differences over all components and axes.

    float64 pairwise accumulation: the result is independent of any internal
    parallelisation of the voxel loops.
    """
    acc = 0.0
    vec = v.vectors.astype(np.float64)
    for axis in (1, 2, 3):
        d = np.diff(vec, axis=axis)
        acc += float(np.sum(d * d))
    return acc


def max_displacement(phi: DeformationField) -> float:
    return float(np.abs(displacement(phi)).max())


def resample_velocity(v: VelocityField, factor: int) -> VelocityField:
    """Integer-factor trilinear upsampling of a velocity field.

    The fine grid has ``dims * factor`` voxels and ``spacing / factor``; vector
    magnitudes are multiplied by ``factor`` so displacements are unchanged in
    physical units.
    """
    if factor < 1 or int(factor) != factor:
        raise ValidationError("resample factor must be a positive integer")
    if factor == 1:
        return v
    fine = interp.upsample_field(_t(v.vectors), int(factor)) * float(factor)
    grid = Grid3(
        tuple(d * factor for d in v.grid.dims),
        tuple(s / factor for s in v.grid.spacing),
    )
    return VelocityField(grid, _back(fine))


# ---------------------------------------------------------------------------
# DSYN1 raw serialization


def _write_header(path: Path, grid: Grid3, components: int) -> None:
    lines = [
        _MAGIC,
        f"dims: {grid.dims[0]} {grid.dims[1]} {grid.dims[2]}",
        f"spacing: {grid.spacing[0]!r} {grid.spacing[1]!r} {grid.spacing[2]!r}",
        f"components: {components}",
        "order: x-fastest",
    ]
    path.write_text("\n".join(lines) + "\n")


def _read_header(path: Path) -> tuple[Grid3, int]:
    if not path.exists():
        raise ValidationError(f"missing sidecar header: {path}")
    lines = [ln.strip() for ln in path.read_text().splitlines() if ln.strip()]
    if not lines or lines[0] != _MAGIC:
        raise ValidationError(f"{path}: not a {_MAGIC} header")
    kv = {}
    for ln in lines[1:]:
        key, _, val = ln.partition(":")
        kv[key.strip()] = val.strip()
    try:
        dims = tuple(int(t) for t in kv["dims"].split())
        spacing = tuple(float(t) for t in kv["spacing"].split())
        components = int(kv["components"])
    except (KeyError, ValueError) as exc:
        raise ValidationError(f"{path}: malformed header ({exc})") from exc
    if kv.get("order", "x-fastest") != "x-fastest":
        raise ValidationError(f"{path}: unsupported voxel order {kv.get('order')!r}")
    return Grid3(dims, spacing), components


def _save_payload(path: Path, arr: np.ndarray, grid: Grid3, components: int) -> None:
    path = Path(path)
    blocks = arr.reshape(components, *grid.dims)
    payload = np.concatenate([b.ravel(order="F") for b in blocks])
    path.write_bytes(payload.astype("<f4").tobytes())
    _write_header(Path(str(path) + ".hdr"), grid, components)


def _load_payload(path: Path) -> tuple[Grid3, int, np.ndarray]:
    path = Path(path)
    grid, components = _read_header(Path(str(path) + ".hdr"))
    raw = np.frombuffer(path.read_bytes(), dtype="<f4")
    if raw.size != components * grid.voxel_count:
        raise ValidationError(
            f"{path}: payload holds {raw.size} values, header implies {components * grid.voxel_count}"
        )
    blocks = raw.reshape(components, grid.voxel_count)
    arr = np.stack([b.reshape(grid.dims, order="F") for b in blocks])
    return grid, components, arr


def save_volume(path, vol: Volume) -> None:
    _save_payload(Path(path), vol.values[None], vol.grid, 1)


def load_volume(path) -> Volume:
    grid, components, arr = _load_payload(Path(path))
    if components != 1:
        raise ValidationError(f"{path}: expected 1 component, header says {components}")
    return Volume(grid, arr[0])


def save_velocity(path, v: VelocityField) -> None:
    _save_payload(Path(path), v.vectors, v.grid, 3)


def load_velocity(path) -> VelocityField:
    grid, components, arr = _load_payload(Path(path))
    if components != 3:
        raise ValidationError(f"{path}: expected 3 components, header says {components}")
    return VelocityField(grid, arr)


def save_deformation(path, phi: DeformationField) -> None:
    _save_payload(Path(path), phi.map, phi.grid, 3)


def load_deformation(path) -> DeformationField:
    grid, components, arr = _load_payload(Path(path))
    if components != 3:
        raise ValidationError(f"{path}: expected 3 components, header says {components}")
    return DeformationField(grid, arr)
