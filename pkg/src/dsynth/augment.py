"""Stochastic discriminator augmentation (SDA).

With probability ``p`` an input volume is passed through a randomly
parameterized pipeline: small random affine warp (rotations up to 5
degrees, translations up to 3 voxels, isotropic scale within 5%), a smooth
random elastic warp of at most 2 voxels, a monotone gamma curve in
[0.7, 1.4], a contrast scale in [0.8, 1.2] about the image mean, and
additive Gaussian noise with sigma in [0, 0.05]; otherwise it is returned
unchanged. The same operator is applied to real and synthesized images
entering the discriminator.

Geometric components are fused into a single trilinear resampling pass.
All randomness is drawn from a caller-supplied numpy Generator; the
``item_rng`` helper derives per-item streams keyed by (seed, epoch, item)
so training order never perturbs the draws.
"""

from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn.functional as F

from . import interp
from .deform import Volume
from .errors import ValidationError

ROT_MAX_DEG = 5.0
TRANS_MAX_VOX = 3.0
SCALE_MAX = 0.05
ELASTIC_MAX_VOX = 2.0
GAMMA_RANGE = (0.7, 1.4)
CONTRAST_RANGE = (0.8, 1.2)
NOISE_SIGMA_MAX = 0.05
_ELASTIC_CONTROL = 4


def item_rng(seed: int, epoch: int, item: int) -> np.random.Generator:
    """Deterministic per-item stream, independent of processing order."""
    return np.random.default_rng(np.random.SeedSequence((seed, epoch, item)))


def _rotation_matrix(rx: float, ry: float, rz: float) -> np.ndarray:
    cx, sx = math.cos(rx), math.sin(rx)
    cy, sy = math.cos(ry), math.sin(ry)
    cz, sz = math.cos(rz), math.sin(rz)
    mx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    my = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    mz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return mz @ my @ mx


def _geometric_map(dims, rng: np.random.Generator, dtype) -> torch.Tensor:
    """Sampling map combining random affine and elastic components."""
    deg = math.pi / 180.0
    angles = rng.uniform(-ROT_MAX_DEG * deg, ROT_MAX_DEG * deg, size=3)
    trans = rng.uniform(-TRANS_MAX_VOX, TRANS_MAX_VOX, size=3)
    scale = 1.0 + rng.uniform(-SCALE_MAX, SCALE_MAX)
    rot = _rotation_matrix(*angles) * scale

    ident = interp.identity_map(dims, dtype=dtype)
    center = torch.tensor([(d - 1) / 2.0 for d in dims], dtype=dtype)
    centered = ident - center.reshape(1, 3, 1, 1, 1)
    rot_t = torch.from_numpy(rot).to(dtype)
    affine = torch.einsum("ab,nbxyz->naxyz", rot_t, centered)
    affine = affine + (center + torch.from_numpy(trans).to(dtype)).reshape(1, 3, 1, 1, 1)

    coarse = rng.standard_normal((1, 3, _ELASTIC_CONTROL, _ELASTIC_CONTROL, _ELASTIC_CONTROL))
    amp = rng.uniform(0.0, ELASTIC_MAX_VOX)
    smooth = F.interpolate(
        torch.from_numpy(coarse).to(dtype), size=dims, mode="trilinear", align_corners=True
    )
    peak = float(smooth.abs().max())
    if peak > 0:
        smooth = smooth * (amp / peak)
    return affine + smooth


def _intensity(x: torch.Tensor, rng: np.random.Generator) -> torch.Tensor:
    gamma = rng.uniform(*GAMMA_RANGE)
    contrast = rng.uniform(*CONTRAST_RANGE)
    sigma = rng.uniform(0.0, NOISE_SIGMA_MAX)
    out = x.clamp(min=0.0) ** gamma
    mean = out.mean()
    out = (out - mean) * contrast + mean
    noise = torch.from_numpy(rng.standard_normal(tuple(x.shape))).to(x.dtype)
    return (out + sigma * noise).clamp(0.0, 1.0)


def _augment_one(x: torch.Tensor, rng: np.random.Generator) -> torch.Tensor:
    """Pipeline body for a [1,1,X,Y,Z] tensor; draws are order-fixed."""
    coords = _geometric_map(tuple(x.shape[2:]), rng, x.dtype)
    warped = interp.sample_trilinear(x, coords)
    return _intensity(warped, rng)


def sda_augment_batch(x: torch.Tensor, p: float, rngs) -> torch.Tensor:
    """Independently augment each item of [N,1,X,Y,Z] with its own stream."""
    if not 0.0 <= p <= 1.0:
        raise ValidationError(f"SDA probability must lie in [0,1], got {p}")
    if x.ndim != 5:
        raise ValidationError(f"expected a batch [N,1,X,Y,Z], got shape {tuple(x.shape)}")
    if len(rngs) != x.shape[0]:
        raise ValidationError(f"need one rng per item: {len(rngs)} rngs for {x.shape[0]} items")
    out = []
    for i, rng in enumerate(rngs):
        item = x[i : i + 1]
        if rng.random() < p:
            item = _augment_one(item, rng)
        out.append(item)
    return torch.cat(out, dim=0)


def sda_augment(x: Volume, p: float, rng: np.random.Generator) -> Volume:
    """Single-volume form of the stochastic augmentation operator."""
    t = torch.from_numpy(x.values).unsqueeze(0).unsqueeze(0)
    out = sda_augment_batch(t, p, [rng])
    return Volume(x.grid, out.squeeze(0).squeeze(0).numpy().astype(np.float32))
