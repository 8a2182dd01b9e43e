"""Differentiable layer set, losses, optimizer, and gradient-check harness.

Thin functional wrappers over torch ops, restricted to exactly the layer
vocabulary the networks here need: 3-D convolution, max pooling, nearest
upsampling, channel concatenation, leaky rectifier, global average pooling,
affine heads, sigmoid/softmax, clamped log losses. Reverse-mode gradients
come from torch autograd; ``grad_check`` verifies them against central
finite differences and is itself part of the public surface.

Parameters live in a :class:`ParamStore` (insertion-ordered, unique names);
``adam_step`` applies bias-corrected Adam with decoupled L2 decay on
non-bias parameters. Checkpoints serialize any flat name -> array mapping
to the ``DSYNCKPT1`` container and round-trip bit-exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping

import numpy as np
import torch
import torch.nn.functional as F

from .errors import NumericalAbort, ValidationError

_CKPT_MAGIC = "DSYNCKPT1"
_PROB_EPS = 1e-7
LEAKY_SLOPE = 0.2


def check_finite(t: torch.Tensor, term: str) -> torch.Tensor:
    if not bool(torch.isfinite(t).all()):
        bad = t[~torch.isfinite(t)]
        raise NumericalAbort(term, float(bad.flatten()[0]))
    return t


# ---------------------------------------------------------------------------
# layers


def conv3(x: torch.Tensor, w: torch.Tensor, b: torch.Tensor | None = None,
          stride: int = 1, padding: int = 0) -> torch.Tensor:
    """Cross-correlation over [N,C,X,Y,Z] with weights [Co,Ci,kx,ky,kz]."""
    if x.ndim != 5 or w.ndim != 5:
        raise ValidationError(f"conv3 expects 5-D input and weights, got {x.ndim}-D/{w.ndim}-D")
    if x.shape[1] != w.shape[1]:
        raise ValidationError(
            f"conv3 channel mismatch: input has {x.shape[1]}, weights expect {w.shape[1]}"
        )
    for ax in range(3):
        if w.shape[2 + ax] > x.shape[2 + ax] + 2 * padding:
            raise ValidationError(
                f"conv3 kernel extent {tuple(w.shape[2:])} exceeds padded input {tuple(x.shape[2:])}"
            )
    if b is not None and b.shape != (w.shape[0],):
        raise ValidationError(f"conv3 bias shape {tuple(b.shape)} != ({w.shape[0]},)")
    return F.conv3d(x, w, b, stride=stride, padding=padding)


def maxpool3(x: torch.Tensor, window: int = 2) -> torch.Tensor:
    """Per-window maximum; gradient goes to the first maximal element."""
    if x.ndim != 5:
        raise ValidationError(f"maxpool3 expects a 5-D tensor, got {x.ndim}-D")
    for ax in range(3):
        if x.shape[2 + ax] % window != 0:
            raise ValidationError(
                f"maxpool3 extent {x.shape[2 + ax]} on axis {ax} not divisible by window {window}"
            )
    return F.max_pool3d(x, kernel_size=window)


def upsample_nearest3(x: torch.Tensor, factor: int = 2) -> torch.Tensor:
    """Replicate each voxel factor^3 times; adjoint sums over each block."""
    if x.ndim != 5:
        raise ValidationError(f"upsample_nearest3 expects a 5-D tensor, got {x.ndim}-D")
    if factor == 1:
        return x
    return F.interpolate(x, scale_factor=factor, mode="nearest")


def concat_channels(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ValidationError(
            f"concat_channels extent mismatch: {tuple(a.shape)} vs {tuple(b.shape)}"
        )
    return torch.cat([a, b], dim=1)


def leaky_relu(x: torch.Tensor, slope: float = LEAKY_SLOPE) -> torch.Tensor:
    return F.leaky_relu(x, negative_slope=slope)


def global_avg_pool(x: torch.Tensor) -> torch.Tensor:
    """[N,C,X,Y,Z] -> [N,C]."""
    if x.ndim != 5:
        raise ValidationError(f"global_avg_pool expects a 5-D tensor, got {x.ndim}-D")
    return x.mean(dim=(2, 3, 4))


def linear(x: torch.Tensor, w: torch.Tensor, b: torch.Tensor | None = None) -> torch.Tensor:
    """[N,Fin] x [Fout,Fin] (+ bias) -> [N,Fout]."""
    if x.shape[1] != w.shape[1]:
        raise ValidationError(f"linear feature mismatch: input {x.shape[1]}, weights {w.shape[1]}")
    return F.linear(x, w, b)


def sigmoid(x: torch.Tensor) -> torch.Tensor:
    return torch.sigmoid(x)


def softmax(x: torch.Tensor) -> torch.Tensor:
    return F.softmax(x, dim=1)


# ---------------------------------------------------------------------------
# losses (probability inputs, clamped before every log)


def clamped_log(p: torch.Tensor) -> torch.Tensor:
    return torch.log(p.clamp(min=_PROB_EPS, max=1.0 - _PROB_EPS))


def bce_loss(prob: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean negative Bernoulli log-likelihood; ``prob`` already in (0,1)."""
    if prob.shape != target.shape:
        raise ValidationError(f"bce_loss shape mismatch: {tuple(prob.shape)} vs {tuple(target.shape)}")
    return -(target * clamped_log(prob) + (1.0 - target) * clamped_log(1.0 - prob)).mean()


def ce_loss(probs: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean negative log of the probability assigned to the integer label."""
    if probs.ndim != 2:
        raise ValidationError(f"ce_loss expects [N,K] probabilities, got {tuple(probs.shape)}")
    if labels.shape != (probs.shape[0],):
        raise ValidationError(f"ce_loss labels shape {tuple(labels.shape)} != ({probs.shape[0]},)")
    picked = probs.gather(1, labels.long().unsqueeze(1)).squeeze(1)
    return -clamped_log(picked).mean()


# ---------------------------------------------------------------------------
# parameters and optimizer


class ParamStore:
    """Insertion-ordered named parameters with autograd-tracked tensors."""

    def __init__(self):
        self._params: dict[str, torch.Tensor] = {}

    def register(self, name: str, value: np.ndarray | torch.Tensor) -> torch.Tensor:
        if name in self._params:
            raise ValidationError(f"duplicate parameter name: {name!r}")
        if " " in name:
            raise ValidationError(f"parameter names must not contain spaces: {name!r}")
        if isinstance(value, np.ndarray):
            t = torch.from_numpy(np.ascontiguousarray(value))
        else:
            t = value.detach().clone()
        t.requires_grad_(True)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> torch.Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self) -> Iterable[tuple[str, torch.Tensor]]:
        return self._params.items()

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.detach().numpy().copy() for k, v in self._params.items()}

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        missing = set(self._params) - set(state)
        extra = set(state) - set(self._params)
        if missing or extra:
            raise ValidationError(
                f"parameter set mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}"
            )
        with torch.no_grad():
            for k, v in self._params.items():
                src = torch.from_numpy(np.ascontiguousarray(state[k]))
                if src.shape != v.shape:
                    raise ValidationError(
                        f"parameter {k!r} shape {tuple(src.shape)} != stored {tuple(v.shape)}"
                    )
                v.copy_(src.to(v.dtype))


def is_bias(name: str) -> bool:
    return name == "bias" or name.endswith(".bias")


@dataclass
class OptState:
    """Adam accumulators plus hyperparameters, keyed by parameter name."""

    lr: float
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, torch.Tensor] = field(default_factory=dict)
    v: dict[str, torch.Tensor] = field(default_factory=dict)

    def ensure(self, params: ParamStore) -> None:
        for name, p in params.items():
            if name not in self.m:
                self.m[name] = torch.zeros_like(p, requires_grad=False)
                self.v[name] = torch.zeros_like(p, requires_grad=False)


def adam_step(params: ParamStore, state: OptState) -> None:
    """Bias-corrected Adam with decoupled L2 decay on non-bias parameters."""
    state.ensure(params)
    for name, p in params.items():
        if p.grad is None:
            raise ValidationError(f"adam_step: parameter {name!r} has no gradient")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    with torch.no_grad():
        for name, p in params.items():
            g = p.grad
            m = state.m[name]
            v = state.v[name]
            m.mul_(b1).add_(g, alpha=1.0 - b1)
            v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
            m_hat = m / (1.0 - b1**t)
            v_hat = v / (1.0 - b2**t)
            p.add_(-state.lr * m_hat / (v_hat.sqrt() + state.eps))
            if state.weight_decay > 0.0 and not is_bias(name):
                p.add_(p, alpha=-state.lr * state.weight_decay)


# ---------------------------------------------------------------------------
# initialization


def fan_in_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(float(fan_in))
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


def conv_init(rng: np.random.Generator, c_out: int, c_in: int, k: int) -> np.ndarray:
    return fan_in_uniform(rng, (c_out, c_in, k, k, k), c_in * k**3)


def linear_init(rng: np.random.Generator, f_out: int, f_in: int) -> np.ndarray:
    return fan_in_uniform(rng, (f_out, f_in), f_in)


# ---------------------------------------------------------------------------
# gradient checking


def grad_check(
    f: Callable[[Mapping[str, torch.Tensor]], torch.Tensor],
    point: Mapping[str, torch.Tensor],
    eps: float = 1e-5,
    max_coords_per_tensor: int = 24,
    rng: np.random.Generator | None = None,
) -> float:
    """Worst relative error between autograd and central differences.

    ``f`` maps a name -> tensor dict to a scalar. Evaluation happens in
    float64 copies of ``point``. Large tensors are spot-checked on a random
    subset of coordinates.
    """
    rng = rng or np.random.default_rng(0)
    base = {k: v.detach().double().clone().requires_grad_(True) for k, v in point.items()}
    out = f(base)
    if out.numel() != 1:
        raise ValidationError("grad_check requires a scalar-valued function")
    grads = torch.autograd.grad(out, list(base.values()), allow_unused=True)
    worst = 0.0
    for (name, tensor), g in zip(base.items(), grads):
        flat = tensor.detach().reshape(-1)
        n = flat.numel()
        idxs = range(n) if n <= max_coords_per_tensor else rng.choice(n, size=max_coords_per_tensor, replace=False)
        g_flat = (
            torch.zeros_like(flat) if g is None else g.reshape(-1)
        )
        for i in idxs:
            orig = float(flat[i])
            vals = []
            for delta in (eps, -eps):
                with torch.no_grad():
                    flat[i] = orig + delta
                probe = {k: v.detach() for k, v in base.items()}
                vals.append(float(f(probe).detach()))
            with torch.no_grad():
                flat[i] = orig
            numeric = (vals[0] - vals[1]) / (2.0 * eps)
            analytic = float(g_flat[i])
            denom = max(abs(numeric), abs(analytic), 1e-8)
            worst = max(worst, abs(numeric - analytic) / denom)
    return worst


# ---------------------------------------------------------------------------
# DSYNCKPT1 checkpoint container

_DTYPES = {"f4": np.float32, "f8": np.float64, "i8": np.int64}


def save_checkpoint(path, tensors: Mapping[str, np.ndarray | torch.Tensor]) -> None:
    """Write a flat name -> array mapping; round-trips bit-exactly."""
    path = Path(path)
    arrays: dict[str, np.ndarray] = {}
    for name, value in tensors.items():
        if " " in name or "\n" in name:
            raise ValidationError(f"checkpoint entry names must not contain whitespace: {name!r}")
        arr = value.detach().numpy() if isinstance(value, torch.Tensor) else np.asarray(value)
        code = {np.dtype(v): k for k, v in _DTYPES.items()}.get(arr.dtype)
        if code is None:
            raise ValidationError(f"unsupported checkpoint dtype {arr.dtype} for {name!r}")
        # no ascontiguousarray here: it would promote 0-d scalars to 1-D,
        # and tobytes() already emits C order for any layout
        arrays[name] = arr
    lines = [_CKPT_MAGIC, str(len(arrays))]
    for name, arr in arrays.items():
        code = {np.dtype(v): k for k, v in _DTYPES.items()}[arr.dtype]
        shape = ",".join(str(d) for d in arr.shape) or "-"
        lines.append(f"{name} {code} {shape}")
    manifest = ("\n".join(lines) + "\n").encode()
    with open(path, "wb") as fh:
        fh.write(manifest)
        for arr in arrays.values():
            fh.write(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    path = Path(path)
    blob = path.read_bytes()
    nl = blob.find(b"\n")
    if nl < 0 or blob[:nl].decode(errors="replace") != _CKPT_MAGIC:
        raise ValidationError(f"{path}: not a {_CKPT_MAGIC} checkpoint")
    pos = nl + 1
    nl = blob.find(b"\n", pos)
    try:
        count = int(blob[pos:nl])
    except ValueError as exc:
        raise ValidationError(f"{path}: malformed entry count") from exc
    pos = nl + 1
    entries = []
    for _ in range(count):
        nl = blob.find(b"\n", pos)
        if nl < 0:
            raise ValidationError(f"{path}: truncated manifest")
        parts = blob[pos:nl].decode().split(" ")
        if len(parts) != 3 or parts[1] not in _DTYPES:
            raise ValidationError(f"{path}: malformed manifest line {blob[pos:nl]!r}")
        name, code, shape_s = parts
        shape = () if shape_s == "-" else tuple(int(d) for d in shape_s.split(","))
        entries.append((name, code, shape))
        pos = nl + 1
    out: dict[str, np.ndarray] = {}
    for name, code, shape in entries:
        dtype = np.dtype(_DTYPES[code]).newbyteorder("<")
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize if shape else dtype.itemsize
        chunk = blob[pos : pos + nbytes]
        if len(chunk) != nbytes:
            raise ValidationError(f"{path}: truncated payload for {name!r}")
        out[name] = np.frombuffer(chunk, dtype=dtype).reshape(shape).astype(_DTYPES[code])
        pos += nbytes
    if pos != len(blob):
        raise ValidationError(f"{path}: {len(blob) - pos} trailing bytes after payloads")
    return out
