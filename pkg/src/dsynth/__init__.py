"""Counterfactual volumetric synthesis via conditional diffeomorphic deformations.

Subpackage map:

- ``deform``     grids, volumes, velocity/deformation fields, warping, raw-format io
- ``diffnet``    differentiable layer set, parameter store, Adam, checkpoints
- ``model``      conditional deformation generator + dual-head discriminator and losses
- ``train_gan``  adversarial training loop with discriminator augmentation
- ``phantom``    synthetic attribute-driven 3-D head phantoms and cohort samplers
- ``downstream`` predictor training under ERM/DRO with counterfactual augmentation
- ``metrics``    per-group statistics, equity indices, Fréchet distance, voxelwise OLS
- ``cli``        experiment orchestration commands
"""

import os

import torch

__version__ = "0.1.0"


def _configure_threads() -> int:
    """Cap torch worker threads from DSYN_THREADS (default: leave torch's choice)."""
    raw = os.environ.get("DSYN_THREADS")
    if raw:
        n = max(1, int(raw))
        torch.set_num_threads(n)
    return torch.get_num_threads()


_configure_threads()
