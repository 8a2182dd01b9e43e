"""Conditional deformation generator, dual-head discriminator, and losses.

The generator is a 3-level U-Net (16 then 32 channels, single convolution
per block, max-pool down, nearest-neighbour up, skip connections) whose
output head emits a stationary velocity field; the counterfactual image is
the input warped through exp(v). The head is zero-initialized so an
untrained generator is an exact identity operator. By default the head runs
at half resolution and the velocity is trilinearly upsampled to the image
grid (vectors are in full-grid voxel units either way); ``head_resolution=
"full"`` adds the final decoder level.

The discriminator is a fully-convolutional stack that halves resolution
until the spatial extent is at most 4, then global-average-pools into two
affine heads: a real/fake probability (sigmoid) and a distribution over
domain labels (softmax).

Loss conventions: the optimized discriminator objective uses the standard
Bernoulli form -log D(x) - mean log(1 - D(y)) and the generator uses the
non-saturating surrogate -mean log D(y); the recorded adversarial scalar
L_adv = mean log D(x) - mean log D(y) (zero when D is constant at 0.5) is
kept separately for logging, where the assembly L_disc = -L_adv + L_cls^real
+ R1 and L_gen = L_adv + L_cls^fake + L_smooth holds symbolically.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from . import deform, interp
from .diffnet import (
    ParamStore,
    ce_loss,
    check_finite,
    clamped_log,
    concat_channels,
    conv3,
    conv_init,
    global_avg_pool,
    leaky_relu,
    linear,
    linear_init,
    maxpool3,
    sigmoid,
    softmax,
    upsample_nearest3,
)
from .errors import NumericalAbort, ValidationError

_MODES = ("binary", "one_hot", "continuous")


@dataclass(frozen=True)
class LabelEncoding:
    """Conditioning attribute mapped to constant-valued spatial channels."""

    attribute: str
    num_domains: int
    mode: str = "one_hot"

    def __post_init__(self):
        if self.mode not in _MODES:
            raise ValidationError(f"label mode must be one of {_MODES}, got {self.mode!r}")
        if self.mode == "binary" and self.num_domains != 2:
            raise ValidationError("binary label mode requires exactly 2 domains")
        if self.num_domains < 2:
            raise ValidationError("conditioning requires at least 2 domains")

    @property
    def channels(self) -> int:
        return self.num_domains if self.mode == "one_hot" else 1

    def encode(self, values) -> torch.Tensor:
        """Domain values [N] -> channel values [N, channels] in [0, 1]."""
        t = torch.as_tensor(np.asarray(values))
        if t.ndim != 1:
            raise ValidationError(f"labels must be 1-D, got shape {tuple(t.shape)}")
        if self.mode == "continuous":
            out = t.to(torch.float32).unsqueeze(1)
            if float(out.min()) < 0.0 or float(out.max()) > 1.0:
                raise ValidationError("continuous labels must be prescaled to [0, 1]")
            return out
        idx = t.long()
        if int(idx.min()) < 0 or int(idx.max()) >= self.num_domains:
            raise ValidationError(
                f"domain index out of range [0, {self.num_domains}) for {self.attribute!r}"
            )
        if self.mode == "binary":
            return idx.to(torch.float32).unsqueeze(1)
        return torch.eye(self.num_domains, dtype=torch.float32)[idx]

    def counterfactual_domains(self, true_domain: int) -> list[int]:
        """All domains except the subject's own (the support of u-bar)."""
        if not 0 <= true_domain < self.num_domains:
            raise ValidationError(f"domain {true_domain} out of range")
        return [d for d in range(self.num_domains) if d != true_domain]


@dataclass(frozen=True)
class GeneratorConfig:
    in_channels: int
    base_channels: int = 16
    head_resolution: str = "half"
    steps: int = 6
    gain: float = 1.0

    def __post_init__(self):
        if self.head_resolution not in ("half", "full"):
            raise ValidationError("head_resolution must be 'half' or 'full'")
        if self.in_channels < 2:
            raise ValidationError("generator input needs image + at least one label channel")
        if self.steps < 1:
            raise ValidationError("steps must be >= 1")


@dataclass
class Generator:
    config: GeneratorConfig
    params: ParamStore


@dataclass(frozen=True)
class DiscriminatorConfig:
    num_domains: int
    input_size: int
    in_channels: int = 1
    base_channels: int = 16
    max_channels: int = 256

    def __post_init__(self):
        if self.num_domains < 2:
            raise ValidationError("discriminator needs at least 2 domains")
        size, levels = self.input_size, 0
        while size > 4:
            if size % 2:
                raise ValidationError(f"input size {self.input_size} not repeatedly halvable to <= 4")
            size //= 2
            levels += 1
        object.__setattr__(self, "_levels", levels)

    @property
    def levels(self) -> int:
        return self._levels

    def channel_plan(self) -> list[int]:
        """Output channels of each convolution, doubling up to the cap."""
        plan = []
        c = self.base_channels
        for _ in range(self.levels + 1):
            plan.append(c)
            c = min(2 * c, self.max_channels)
        return plan


@dataclass
class Discriminator:
    config: DiscriminatorConfig
    params: ParamStore


@dataclass(frozen=True)
class LossWeights:
    adv: float = 1.0
    cls_real: float = 1.0
    cls_fake: float = 1.0
    smooth: float = 1.0
    r1: float = 1.0

    def __post_init__(self):
        for name in ("adv", "cls_real", "cls_fake", "smooth", "r1"):
            if getattr(self, name) < 0:
                raise ValidationError(f"loss weight {name!r} must be non-negative")


def build_generator(rng: np.random.Generator, encoding: LabelEncoding,
                    base_channels: int = 16, head_resolution: str = "half",
                    steps: int = 6, gain: float = 1.0) -> Generator:
    cfg = GeneratorConfig(1 + encoding.channels, base_channels, head_resolution, steps, gain)
    c1, c2 = cfg.base_channels, 2 * cfg.base_channels
    p = ParamStore()
    p.register("enc1.weight", conv_init(rng, c1, cfg.in_channels, 3))
    p.register("enc1.bias", np.zeros(c1, dtype=np.float32))
    p.register("enc2.weight", conv_init(rng, c2, c1, 3))
    p.register("enc2.bias", np.zeros(c2, dtype=np.float32))
    p.register("bott.weight", conv_init(rng, c2, c2, 3))
    p.register("bott.bias", np.zeros(c2, dtype=np.float32))
    p.register("dec2.weight", conv_init(rng, c2, 2 * c2, 3))
    p.register("dec2.bias", np.zeros(c2, dtype=np.float32))
    if head_resolution == "full":
        p.register("dec1.weight", conv_init(rng, c1, c2 + c1, 3))
        p.register("dec1.bias", np.zeros(c1, dtype=np.float32))
        head_in = c1
    else:
        head_in = c2
    p.register("head.weight", np.zeros((3, head_in, 3, 3, 3), dtype=np.float32))
    p.register("head.bias", np.zeros(3, dtype=np.float32))
    return Generator(cfg, p)


def build_discriminator(rng: np.random.Generator, num_domains: int, input_size: int,
                        in_channels: int = 1, base_channels: int = 16,
                        max_channels: int = 256) -> Discriminator:
    cfg = DiscriminatorConfig(num_domains, input_size, in_channels, base_channels, max_channels)
    plan = cfg.channel_plan()
    p = ParamStore()
    prev = in_channels
    for i, ch in enumerate(plan):
        p.register(f"conv{i}.weight", conv_init(rng, ch, prev, 3))
        p.register(f"conv{i}.bias", np.zeros(ch, dtype=np.float32))
        prev = ch
    p.register("src.weight", linear_init(rng, 1, prev))
    p.register("src.bias", np.zeros(1, dtype=np.float32))
    p.register("cls.weight", linear_init(rng, num_domains, prev))
    p.register("cls.bias", np.zeros(num_domains, dtype=np.float32))
    return Discriminator(cfg, p)


# ---------------------------------------------------------------------------
# forward passes


def _label_volume(c: torch.Tensor, dims) -> torch.Tensor:
    """[N,C] channel values -> [N,C,X,Y,Z] constant spatial channels."""
    return c[:, :, None, None, None].expand(-1, -1, *dims)


def velocity(gen: Generator, x: torch.Tensor, c: torch.Tensor) -> torch.Tensor:
    """U-Net forward: image batch + label channels -> velocity [N,3,X,Y,Z]."""
    if x.ndim != 5 or x.shape[1] != 1:
        raise ValidationError(f"expected image batch [N,1,X,Y,Z], got {tuple(x.shape)}")
    dims = x.shape[2:]
    if any(d % 4 for d in dims):
        raise ValidationError(f"generator grid {tuple(dims)} must be divisible by 4")
    if c.shape != (x.shape[0], gen.config.in_channels - 1):
        raise ValidationError(
            f"label channels {tuple(c.shape)} do not match batch "
            f"({x.shape[0]}, {gen.config.in_channels - 1})"
        )
    p = gen.params
    h = concat_channels(x, _label_volume(c.to(x.dtype), dims))
    h1 = leaky_relu(conv3(h, p["enc1.weight"].to(x.dtype), p["enc1.bias"].to(x.dtype), padding=1))
    h2 = leaky_relu(conv3(maxpool3(h1), p["enc2.weight"].to(x.dtype), p["enc2.bias"].to(x.dtype), padding=1))
    hb = leaky_relu(conv3(maxpool3(h2), p["bott.weight"].to(x.dtype), p["bott.bias"].to(x.dtype), padding=1))
    d2 = leaky_relu(
        conv3(concat_channels(upsample_nearest3(hb), h2),
              p["dec2.weight"].to(x.dtype), p["dec2.bias"].to(x.dtype), padding=1)
    )
    if gen.config.head_resolution == "full":
        d1 = leaky_relu(
            conv3(concat_channels(upsample_nearest3(d2), h1),
                  p["dec1.weight"].to(x.dtype), p["dec1.bias"].to(x.dtype), padding=1)
        )
        v = conv3(d1, p["head.weight"].to(x.dtype), p["head.bias"].to(x.dtype), padding=1)
    else:
        v_half = conv3(d2, p["head.weight"].to(x.dtype), p["head.bias"].to(x.dtype), padding=1)
        v = interp.upsample_field(v_half, 2)
    return v * gen.config.gain


def exponentiation_steps(v: torch.Tensor, steps: int) -> int:
    """Raise the squaring count until the first Euler step is <= 0.5 voxel."""
    vmax = float(v.detach().abs().max())
    if not math.isfinite(vmax):
        raise NumericalAbort("velocity", vmax)
    while vmax / (2.0**steps) > 0.5:
        steps += 1
    return steps


def synthesize_batch(gen: Generator, x: torch.Tensor, c: torch.Tensor
                     ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Velocity, deformation map, and warped batch; differentiable end-to-end."""
    lo, hi = float(x.detach().min()), float(x.detach().max())
    if lo < -1e-6 or hi > 1.0 + 1e-6:
        raise ValidationError(f"images must be normalized to [0,1], found range [{lo}, {hi}]")
    v = velocity(gen, x, c)
    phi = interp.exp_velocity_map(v, exponentiation_steps(v, gen.config.steps))
    y = interp.warp_image(x, phi)
    return v, phi, y


def synthesize(gen: Generator, x: deform.Volume, encoding: LabelEncoding, target_domain
               ) -> tuple[deform.VelocityField, deform.DeformationField, deform.Volume]:
    """Single-volume convenience wrapper over synthesize_batch."""
    xt = torch.from_numpy(x.values).unsqueeze(0).unsqueeze(0)
    c = encoding.encode([target_domain])
    v, phi, y = synthesize_batch(gen, xt, c)
    g = x.grid
    return (
        deform.VelocityField(g, v.detach().squeeze(0).numpy().astype(np.float32)),
        deform.DeformationField(g, phi.detach().squeeze(0).numpy().astype(np.float32)),
        deform.Volume(g, y.detach().squeeze(0).squeeze(0).numpy().astype(np.float32)),
    )


def discriminate(disc: Discriminator, x: torch.Tensor
                 ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Returns (src probability [N], cls distribution [N,K], src logit [N])."""
    cfg = disc.config
    if x.ndim != 5 or x.shape[1] != cfg.in_channels:
        raise ValidationError(f"expected [N,{cfg.in_channels},X,Y,Z], got {tuple(x.shape)}")
    if x.shape[2:] != (cfg.input_size,) * 3:
        raise ValidationError(
            f"discriminator built for {cfg.input_size}^3 input, got {tuple(x.shape[2:])}"
        )
    p = disc.params
    h = x
    for i in range(cfg.levels + 1):
        h = leaky_relu(conv3(h, p[f"conv{i}.weight"].to(x.dtype), p[f"conv{i}.bias"].to(x.dtype), padding=1))
        if i < cfg.levels:
            h = maxpool3(h)
    feats = global_avg_pool(h)
    src_logit = linear(feats, p["src.weight"].to(x.dtype), p["src.bias"].to(x.dtype)).squeeze(1)
    cls = softmax(linear(feats, p["cls.weight"].to(x.dtype), p["cls.bias"].to(x.dtype)))
    return sigmoid(src_logit), cls, src_logit


# ---------------------------------------------------------------------------
# loss terms


def loss_adv_disc(disc: Discriminator, x_real: torch.Tensor, y_fake: torch.Tensor) -> torch.Tensor:
    """-mean log D(x) - mean log(1 - D(y)); minimized by the discriminator."""
    d_real, _, _ = discriminate(disc, x_real)
    d_fake, _, _ = discriminate(disc, y_fake)
    return -clamped_log(d_real).mean() - clamped_log(1.0 - d_fake).mean()


def loss_adv_gen(disc: Discriminator, y_fake: torch.Tensor) -> torch.Tensor:
    """Non-saturating surrogate -mean log D(y); minimized by the generator."""
    d_fake, _, _ = discriminate(disc, y_fake)
    return -clamped_log(d_fake).mean()


def loss_adv_recorded(disc: Discriminator, x_real: torch.Tensor, y_fake: torch.Tensor) -> float:
    """The adversarial scalar mean log D(x) - mean log D(y), for logging."""
    with torch.no_grad():
        d_real, _, _ = discriminate(disc, x_real)
        d_fake, _, _ = discriminate(disc, y_fake)
        return float(clamped_log(d_real).mean() - clamped_log(d_fake).mean())


def loss_cls_real(disc: Discriminator, x: torch.Tensor, c_true: torch.Tensor) -> torch.Tensor:
    _, cls, _ = discriminate(disc, x)
    return ce_loss(cls, c_true)


def loss_cls_fake(disc: Discriminator, y: torch.Tensor, c_target: torch.Tensor,
                  c_true: torch.Tensor) -> torch.Tensor:
    """Cross-entropy against counterfactual targets; own labels are invalid."""
    if bool((c_target == c_true).any()):
        raise ValidationError("counterfactual target equals the subject's own label")
    _, cls, _ = discriminate(disc, y)
    return ce_loss(cls, c_target)


def loss_smooth(v: torch.Tensor) -> torch.Tensor:
    """Mean over the batch of the diffusion energy of the velocity field."""
    return interp.diffusion_energy_batch(v).mean().to(v.dtype)


def r1_penalty(disc: Discriminator, x_real: torch.Tensor) -> torch.Tensor:
    """Mean per-item squared gradient norm of the pre-sigmoid src logit."""
    x = x_real.detach().requires_grad_(True)
    _, _, logit = discriminate(disc, x)
    (g,) = torch.autograd.grad(logit.sum(), x, create_graph=True)
    return g.reshape(g.shape[0], -1).pow(2).sum(dim=1).mean()


@dataclass
class LossParts:
    """Scalar tensors entering the two objectives, by term name."""

    adv_disc: torch.Tensor | None = None
    adv_gen: torch.Tensor | None = None
    cls_real: torch.Tensor | None = None
    cls_fake: torch.Tensor | None = None
    smooth: torch.Tensor | None = None
    r1: torch.Tensor | None = None


def assemble_losses(parts: LossParts, w: LossWeights
                    ) -> tuple[torch.Tensor | None, torch.Tensor | None]:
    """(L_disc, L_gen) as weighted sums; aborts on any non-finite part.

    A side's objective is None when none of its parts are present (for
    callers assembling the two steps separately).
    """
    for name in ("adv_disc", "adv_gen", "cls_real", "cls_fake", "smooth", "r1"):
        t = getattr(parts, name)
        if t is not None:
            check_finite(t, name)
    zero = torch.zeros(())

    def tot(pairs):
        present = [(wt, t) for wt, t in pairs if t is not None]
        if not present:
            return None
        return sum((wt * t for wt, t in present), zero.to(present[0][1].dtype))

    l_disc = tot([(w.adv, parts.adv_disc), (w.cls_real, parts.cls_real), (w.r1, parts.r1)])
    l_gen = tot([(w.adv, parts.adv_gen), (w.cls_fake, parts.cls_fake), (w.smooth, parts.smooth)])
    return l_disc, l_gen


def recorded_objectives(scalars: dict, w: LossWeights) -> tuple[float, float]:
    """Logging-side assembly from recorded scalars.

    Uses the recorded adversarial term with the symbolic layout
    L_disc = -adv + cls_real + r1 and L_gen = adv + cls_fake + smooth.
    """
    l_disc = -w.adv * scalars["L_adv"] + w.cls_real * scalars["L_cls_real"] + w.r1 * scalars["R1"]
    l_gen = w.adv * scalars["L_adv"] + w.cls_fake * scalars["L_cls_fake"] + w.smooth * scalars["L_smooth"]
    return l_disc, l_gen


def min_jacobian(phi: torch.Tensor) -> float:
    """Smallest Jacobian determinant across the batch, for diagnostics."""
    with torch.no_grad():
        return float(interp.jacobian_determinant_batch(phi).min())
