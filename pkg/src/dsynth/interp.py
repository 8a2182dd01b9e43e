"""Differentiable field operations on torch tensors.

Everything here works on batched tensors and stays on the autograd tape, so
the synthesis path (velocity -> deformation -> warped image) can be trained
end to end. Conventions:

- scalar images are ``[N, C, X, Y, Z]``
- coordinate maps and vector fields are ``[N, 3, X, Y, Z]`` with components
  ordered (x, y, z) and values in voxel units of the grid they index into
- a deformation map stores absolute sampling positions; the identity map is
  ``map[:, :, i, j, k] = (i, j, k)``

Sampling is edge-clamped: positions outside the grid are clamped to the
nearest border voxel, which keeps every warp defined and subdifferentiable.
The trilinear kernel is written out by hand (floor/gather/lerp) rather than
delegated to ``grid_sample`` so that sampling at exact lattice points
reproduces the stored values bit for bit.
"""

from __future__ import annotations

import torch

Tensor = torch.Tensor


def identity_map(dims: tuple[int, int, int], dtype=torch.float32, device=None) -> Tensor:
    """Identity coordinate map of shape [1, 3, X, Y, Z]."""
    nx, ny, nz = dims
    ax = torch.arange(nx, dtype=dtype, device=device)
    ay = torch.arange(ny, dtype=dtype, device=device)
    az = torch.arange(nz, dtype=dtype, device=device)
    gx, gy, gz = torch.meshgrid(ax, ay, az, indexing="ij")
    return torch.stack([gx, gy, gz], dim=0).unsqueeze(0)


def _flat_corner_index(ix: Tensor, iy: Tensor, iz: Tensor, dims) -> Tensor:
    nx, ny, nz = dims
    return (ix * ny + iy) * nz + iz


def sample_trilinear(values: Tensor, coords: Tensor) -> Tensor:
    """Sample ``values`` [N,C,X,Y,Z] at ``coords`` [N,3,X',Y',Z'], edge-clamped.

    Differentiable with respect to both arguments; the coordinate gradient is
    the in-cell finite difference of the corner values, which is the exact
    derivative of the piecewise-trilinear interpolant.
    """
    n, c = values.shape[:2]
    dims = values.shape[2:]
    out_shape = coords.shape[2:]
    nx, ny, nz = dims

    x = coords[:, 0].reshape(n, -1).clamp(0, nx - 1)
    y = coords[:, 1].reshape(n, -1).clamp(0, ny - 1)
    z = coords[:, 2].reshape(n, -1).clamp(0, nz - 1)

    ix0 = x.floor().long().clamp(0, nx - 1)
    iy0 = y.floor().long().clamp(0, ny - 1)
    iz0 = z.floor().long().clamp(0, nz - 1)
    ix1 = (ix0 + 1).clamp(max=nx - 1)
    iy1 = (iy0 + 1).clamp(max=ny - 1)
    iz1 = (iz0 + 1).clamp(max=nz - 1)

    fx = x - ix0.to(x.dtype)
    fy = y - iy0.to(y.dtype)
    fz = z - iz0.to(z.dtype)

    flat = values.reshape(n, c, -1)

    def corner(ix, iy, iz):
        idx = _flat_corner_index(ix, iy, iz, dims)
        return flat.gather(2, idx.unsqueeze(1).expand(n, c, idx.shape[1]))

    wx0, wy0, wz0 = 1 - fx, 1 - fy, 1 - fz
    out = (
        corner(ix0, iy0, iz0) * (wx0 * wy0 * wz0).unsqueeze(1)
        + corner(ix1, iy0, iz0) * (fx * wy0 * wz0).unsqueeze(1)
        + corner(ix0, iy1, iz0) * (wx0 * fy * wz0).unsqueeze(1)
        + corner(ix0, iy0, iz1) * (wx0 * wy0 * fz).unsqueeze(1)
        + corner(ix1, iy1, iz0) * (fx * fy * wz0).unsqueeze(1)
        + corner(ix1, iy0, iz1) * (fx * wy0 * fz).unsqueeze(1)
        + corner(ix0, iy1, iz1) * (wx0 * fy * fz).unsqueeze(1)
        + corner(ix1, iy1, iz1) * (fx * fy * fz).unsqueeze(1)
    )
    return out.reshape(n, c, *out_shape)


def sample_nearest(values: Tensor, coords: Tensor) -> Tensor:
    """Nearest-neighbour sampling, edge-clamped. Differentiable in ``values`` only."""
    n, c = values.shape[:2]
    dims = values.shape[2:]
    out_shape = coords.shape[2:]
    nx, ny, nz = dims
    ix = coords[:, 0].reshape(n, -1).clamp(0, nx - 1).round().long()
    iy = coords[:, 1].reshape(n, -1).clamp(0, ny - 1).round().long()
    iz = coords[:, 2].reshape(n, -1).clamp(0, nz - 1).round().long()
    idx = _flat_corner_index(ix, iy, iz, dims)
    flat = values.reshape(n, c, -1)
    out = flat.gather(2, idx.unsqueeze(1).expand(n, c, idx.shape[1]))
    return out.reshape(n, c, *out_shape)


def compose_maps(outer: Tensor, inner: Tensor) -> Tensor:
    """(outer o inner)(p) = outer(inner(p)); both maps [N,3,X,Y,Z]."""
    return sample_trilinear(outer, inner)


def exp_velocity_map(v: Tensor, steps: int) -> Tensor:
    """Integrate a stationary velocity field [N,3,X,Y,Z] to a deformation map.

    phi_0 = Id + v / 2**steps, then phi <- phi o phi, ``steps`` times.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    ident = identity_map(tuple(v.shape[2:]), dtype=v.dtype, device=v.device)
    phi = ident + v / (2.0**steps)
    for _ in range(steps):
        phi = compose_maps(phi, phi)
    return phi


def warp_image(image: Tensor, phi: Tensor, mode: str = "trilinear") -> Tensor:
    """Resample ``image`` [N,C,X,Y,Z] through the deformation map ``phi``."""
    if mode == "trilinear":
        return sample_trilinear(image, phi)
    if mode == "nearest":
        return sample_nearest(image, phi)
    raise ValueError(f"unknown interpolation mode: {mode!r}")


def upsample_field(field: Tensor, factor: int) -> Tensor:
    """Trilinear upsampling of a field [N,C,x,y,z] to [N,C,x*f,y*f,z*f].

    Fine voxel I corresponds to coarse position I / factor (spacing shrinks by
    the same factor, so physical locations are preserved exactly). Component
    magnitudes are returned unscaled; callers converting voxel-unit vectors to
    the fine grid multiply by ``factor`` themselves.
    """
    if factor == 1:
        return field
    dims = tuple(int(d) * factor for d in field.shape[2:])
    coords = identity_map(dims, dtype=field.dtype, device=field.device) / factor
    return sample_trilinear(field, coords.expand(field.shape[0], -1, -1, -1, -1))


def diffusion_energy_batch(v: Tensor) -> Tensor:
    """Per-item sum of squared forward differences of every component, [N].

    Differences are taken only where the forward neighbour exists. Accumulates
    in float64 so the result does not depend on reduction order.
    """
    acc = torch.zeros(v.shape[0], dtype=torch.float64, device=v.device)
    for axis in (2, 3, 4):
        d = torch.diff(v, dim=axis)
        acc = acc + d.double().pow(2).sum(dim=(1, 2, 3, 4))
    return acc


def jacobian_determinant_batch(phi: Tensor, spacing=(1.0, 1.0, 1.0)) -> Tensor:
    """Determinant of the central-difference Jacobian of a map, [N,X,Y,Z].

    One-sided differences at boundaries; derivatives are taken with respect to
    physical position, so anisotropic spacing is handled.
    """
    cols = []
    for axis in range(3):
        step = spacing[axis]
        comp_derivs = []
        for comp in range(3):
            f = phi[:, comp] * spacing[comp]
            d = torch.empty_like(f)
            ax = axis + 1
            n = f.shape[ax]
            mid = [slice(None)] * 4
            mid[ax] = slice(1, n - 1)
            hi = [slice(None)] * 4
            hi[ax] = slice(2, n)
            lo = [slice(None)] * 4
            lo[ax] = slice(0, n - 2)
            d[tuple(mid)] = (f[tuple(hi)] - f[tuple(lo)]) / (2.0 * step)
            first, second = [slice(None)] * 4, [slice(None)] * 4
            first[ax], second[ax] = slice(0, 1), slice(1, 2)
            d[tuple(first)] = (f[tuple(second)] - f[tuple(first)]) / step
            last, prev = [slice(None)] * 4, [slice(None)] * 4
            last[ax], prev[ax] = slice(n - 1, n), slice(n - 2, n - 1)
            d[tuple(last)] = (f[tuple(last)] - f[tuple(prev)]) / step
            comp_derivs.append(d)
        cols.append(comp_derivs)
    # cols[a][c] = d(phi_c)/d(x_a); determinant of J[c][a]
    j = cols
    det = (
        j[0][0] * (j[1][1] * j[2][2] - j[2][1] * j[1][2])
        - j[1][0] * (j[0][1] * j[2][2] - j[2][1] * j[0][2])
        + j[2][0] * (j[0][1] * j[1][2] - j[1][1] * j[0][2])
    )
    return det
