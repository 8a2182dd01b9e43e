"""Evaluation machinery: group statistics, equity indices, Fréchet
distance with slice selection, and voxelwise morphometry.

Equity orientation convention: the indices are defined for "higher is
better" scores.  For regression tasks the mean absolute error is negated
before entering the deltas, and the normalizers use absolute values, so a
report reads the same way for both task kinds.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from scipy import stats as _sstats

from .errors import ValidationError

# --------------------------------------------------------------------------
# per-group statistics


@dataclass(frozen=True)
class GroupPerformance:
    """Mean performance of one subpopulation."""

    group_key: tuple
    task: str
    a_k: float                      # balanced accuracy, or MAE for regression
    n: int
    precision: float | None = None  # positive class, classification only
    recall: float | None = None

    def __post_init__(self):
        if self.n < 1:
            raise ValidationError(f"group {self.group_key} is empty")
        if not np.isfinite(self.a_k):
            raise ValidationError(f"group {self.group_key} metric is not finite")


def group_stats(predictions, truths, group_keys, task: str,
                expected_groups=None) -> list[GroupPerformance]:
    """Per-group balanced accuracy / precision / recall, or MAE.

    Balanced accuracy averages the recalls of the classes present in the
    group's ground truth.  Precision and recall are reported for class 1.
    """
    if task not in ("classification", "regression"):
        raise ValidationError(f"unknown task {task!r}")
    preds = np.asarray(predictions)
    truth = np.asarray(truths)
    keys = list(group_keys)
    if len(preds) != len(truth) or len(preds) != len(keys):
        raise ValidationError("predictions, truths and group keys must align")
    if len(preds) == 0:
        raise ValidationError("empty evaluation set")

    by_group: dict[tuple, list[int]] = {}
    for i, k in enumerate(keys):
        by_group.setdefault(tuple(np.atleast_1d(k)), []).append(i)
    if expected_groups is not None:
        for g in expected_groups:
            if tuple(np.atleast_1d(g)) not in by_group:
                raise ValidationError(f"group {g} has no members")

    out = []
    for gkey in sorted(by_group):
        idx = np.array(by_group[gkey])
        p, t = preds[idx], truth[idx]
        if task == "regression":
            out.append(GroupPerformance(gkey, task, float(np.mean(np.abs(p - t))), len(idx)))
            continue
        recalls = []
        for cls in np.unique(t):
            mask = t == cls
            recalls.append(float(np.mean(p[mask] == cls)))
        bal = float(np.mean(recalls))
        pos_t, pos_p = t == 1, p == 1
        recall = float(np.mean(pos_p[pos_t])) if pos_t.any() else None
        precision = float(np.mean(pos_t[pos_p])) if pos_p.any() else None
        out.append(GroupPerformance(gkey, task, bal, len(idx), precision, recall))
    return out


# --------------------------------------------------------------------------
# equity indices


def delta_global(base: Sequence[float], new: Sequence[float]) -> float:
    """Normalised global change: sum(new - base) / sum(base)."""
    b = np.asarray(base, dtype=np.float64)
    n = np.asarray(new, dtype=np.float64)
    if b.shape != n.shape or b.ndim != 1 or b.size == 0:
        raise ValidationError("delta_global needs two aligned non-empty per-group lists")
    denom = float(b.sum())
    if denom <= 0:
        raise ValidationError("delta_global needs a positive base aggregate")
    return float((n - b).sum() / denom)


def delta_local(base: Sequence[float], new: Sequence[float]) -> float:
    """Worst-group change: (min(new) - min(base)) / min(base).

    The worst group may differ between the two runs; each min is taken
    independently.
    """
    b = np.asarray(base, dtype=np.float64)
    n = np.asarray(new, dtype=np.float64)
    if b.shape != n.shape or b.ndim != 1 or b.size == 0:
        raise ValidationError("delta_local needs two aligned non-empty per-group lists")
    worst_base = float(b.min())
    if worst_base <= 0:
        raise ValidationError("delta_local needs a positive base worst-group score")
    return float((n.min() - worst_base) / worst_base)


def hei(base: Sequence[float], new: Sequence[float]) -> float | None:
    """Holistic equity index (ΔG + ΔL) / 2, scaled by 100.

    Returns None (not applicable) when the worst group did not improve.
    """
    dl = delta_local(base, new)
    if dl <= 0:
        return None
    return 100.0 * (delta_global(base, new) + dl) / 2.0


@dataclass(frozen=True)
class EquityReport:
    task: str
    group_keys: tuple
    base: tuple                     # a_k of the baseline run, raw orientation
    new: tuple
    delta_g: float
    delta_l: float
    hei: float | None

    def to_json(self) -> str:
        payload = {
            "task": self.task,
            "groups": [list(g) for g in self.group_keys],
            "base": list(self.base),
            "new": list(self.new),
            "delta_global": self.delta_g,
            "delta_local": self.delta_l,
            "hei": self.hei,
            "hei_applicable": self.hei is not None,
        }
        return json.dumps(payload, indent=2)


def equity_report(base_stats: list[GroupPerformance],
                  new_stats: list[GroupPerformance]) -> EquityReport:
    """Compare two runs over the same groups.

    Regression MAEs are negated so that every index reads "positive is
    more equitable"; the normalizers then use absolute values.
    """
    bmap = {g.group_key: g for g in base_stats}
    nmap = {g.group_key: g for g in new_stats}
    if set(bmap) != set(nmap):
        raise ValidationError(
            f"group sets differ: {sorted(set(bmap) ^ set(nmap))}"
        )
    if not bmap:
        raise ValidationError("no groups to compare")
    tasks = {g.task for g in list(bmap.values()) + list(nmap.values())}
    if len(tasks) != 1:
        raise ValidationError("cannot mix classification and regression runs")
    task = tasks.pop()
    keys = sorted(bmap)
    b = np.array([bmap[k].a_k for k in keys], dtype=np.float64)
    n = np.array([nmap[k].a_k for k in keys], dtype=np.float64)
    if task == "classification":
        dg = delta_global(b, n)
        dl = delta_local(b, n)
    else:
        denom_g = float(b.sum())
        worst_b = float(b.max())          # largest error is the worst group
        if denom_g <= 0 or worst_b <= 0:
            raise ValidationError("regression equity needs positive base errors")
        dg = float((b - n).sum() / denom_g)
        dl = float((worst_b - n.max()) / worst_b)
    h = 100.0 * (dg + dl) / 2.0 if dl > 0 else None
    return EquityReport(task=task, group_keys=tuple(keys), base=tuple(b.tolist()),
                        new=tuple(n.tolist()), delta_g=dg, delta_l=dl, hei=h)


# --------------------------------------------------------------------------
# Fréchet distance


def _sym_sqrt(m: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh((m + m.T) / 2.0)
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def frechet_distance(feats_a: np.ndarray, feats_b: np.ndarray) -> float:
    """||μa - μb||² + tr(Σa + Σb - 2(Σa Σb)^{1/2}) on sample moments (ddof=1)."""
    a = np.asarray(feats_a, dtype=np.float64)
    b = np.asarray(feats_b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ValidationError("feature sets must be [n, d] with matching d")
    d = a.shape[1]
    if a.shape[0] < d + 1 or b.shape[0] < d + 1:
        raise ValidationError(
            f"need at least {d + 1} samples per set for a rank-{d} covariance, "
            f"got {a.shape[0]} and {b.shape[0]}"
        )
    mu_a, mu_b = a.mean(axis=0), b.mean(axis=0)
    cov_a = np.cov(a, rowvar=False, ddof=1)
    cov_b = np.cov(b, rowvar=False, ddof=1)
    cov_a, cov_b = np.atleast_2d(cov_a), np.atleast_2d(cov_b)
    root_a = _sym_sqrt(cov_a)
    inner = root_a @ cov_b @ root_a
    vals = np.clip(np.linalg.eigvalsh((inner + inner.T) / 2.0), 0.0, None)
    tr_sqrt = float(np.sqrt(vals).sum())
    fid = float(np.sum((mu_a - mu_b) ** 2) + np.trace(cov_a) + np.trace(cov_b) - 2.0 * tr_sqrt)
    return max(fid, 0.0)


# --------------------------------------------------------------------------
# slice embedding


@dataclass(frozen=True)
class FeatureEmbedder:
    """Frozen random convolutional embedder for 2-D slices.

    Three conv/pool stages, global average pooling, then a linear map to
    `dim` features.  Weights are a pure function of the seed and never
    change afterwards, so distances are comparable across calls within an
    experiment.
    """

    seed: int = 0
    dim: int = 64
    _weights: tuple = field(repr=False, default=())

    def __post_init__(self):
        if self.dim < 1:
            raise ValidationError("embedding dimension must be positive")
        rng = np.random.default_rng(np.random.SeedSequence((int(self.seed), 5309)))
        chans = [1, 8, 16, 32]
        ws = []
        for cin, cout in zip(chans, chans[1:]):
            w = rng.standard_normal((cout, cin, 3, 3)) / np.sqrt(cin * 9)
            ws.append(torch.from_numpy(w.astype(np.float32)))
        lin = rng.standard_normal((self.dim, chans[-1])) / np.sqrt(chans[-1])
        ws.append(torch.from_numpy(lin.astype(np.float32)))
        object.__setattr__(self, "_weights", tuple(ws))

    def embed(self, slices: np.ndarray) -> np.ndarray:
        """[N, S, S] slices -> [N, dim] float64 features."""
        arr = np.asarray(slices, dtype=np.float32)
        if arr.ndim != 3:
            raise ValidationError(f"expected [N, S, S] slices, got shape {arr.shape}")
        if arr.shape[1] < 4 or arr.shape[2] < 4:
            raise ValidationError("slices must be at least 4x4")
        with torch.no_grad():
            h = torch.from_numpy(arr).unsqueeze(1)
            for w in self._weights[:-1]:
                h = F.leaky_relu(F.conv2d(h, w, padding=1), 0.2)
                if min(h.shape[-2:]) >= 2:
                    h = F.avg_pool2d(h, 2)
            feats = h.mean(dim=(2, 3))
            out = feats @ self._weights[-1].T
        return out.numpy().astype(np.float64)


@dataclass(frozen=True)
class SliceFeatures:
    indices: tuple[int, int, int]
    features: dict                   # axis name -> [N, dim]


def slice_select_and_embed(volumes: np.ndarray, t_map: np.ndarray,
                           embedder: FeatureEmbedder) -> SliceFeatures:
    """Pick the slice through the max-|t| voxel on each axis and embed it."""
    vols = np.asarray(volumes, dtype=np.float32)
    t = np.asarray(t_map, dtype=np.float64)
    if vols.ndim != 4 or vols.shape[1:] != t.shape:
        raise ValidationError(
            f"volumes {vols.shape} do not share the t-map grid {t.shape}"
        )
    if np.all(t == 0) or not np.all(np.isfinite(t)):
        warnings.warn("degenerate t-map; falling back to center slices", stacklevel=2)
        idx = tuple(s // 2 for s in t.shape)
    else:
        idx = tuple(int(i) for i in np.unravel_index(np.argmax(np.abs(t)), t.shape))
    feats = {
        "axis0": embedder.embed(vols[:, idx[0], :, :]),
        "axis1": embedder.embed(vols[:, :, idx[1], :]),
        "axis2": embedder.embed(vols[:, :, :, idx[2]]),
    }
    return SliceFeatures(indices=idx, features=feats)


# --------------------------------------------------------------------------
# voxelwise morphometry


DESIGN_COLUMNS = ("age", "sex", "origin", "total_volume", "intercept")


def design_matrix(ages, sexes, origins, total_volumes) -> np.ndarray:
    cols = [np.asarray(c, dtype=np.float64) for c in (ages, sexes, origins, total_volumes)]
    n = cols[0].shape[0]
    if any(c.shape != (n,) for c in cols):
        raise ValidationError("design columns must be aligned 1-D vectors")
    return np.column_stack(cols + [np.ones(n)])


def total_volume(volumes: np.ndarray, threshold: float = 0.1) -> np.ndarray:
    """Supra-threshold voxel count per volume (intracranial-volume analog)."""
    vols = np.asarray(volumes)
    if vols.ndim != 4:
        raise ValidationError(f"expected [N,X,Y,Z] volumes, got shape {vols.shape}")
    return (vols > threshold).reshape(vols.shape[0], -1).sum(axis=1).astype(np.float64)


@dataclass(frozen=True)
class OlsResult:
    beta: dict                      # column name -> [X,Y,Z]
    t: dict                         # column name -> [X,Y,Z]
    df: int
    columns: tuple


def _name_collinear(design: np.ndarray, names) -> list[str]:
    # A column is implicated if dropping it does not lower the rank.
    full = np.linalg.matrix_rank(design)
    flagged = []
    for j in range(design.shape[1]):
        rest = np.delete(design, j, axis=1)
        if np.linalg.matrix_rank(rest) == full:
            flagged.append(names[j])
    return flagged


def voxelwise_ols(volumes: np.ndarray, design: np.ndarray,
                  columns=DESIGN_COLUMNS) -> OlsResult:
    """Mass-univariate OLS: per-voxel t = beta / se with n - p degrees of freedom."""
    vols = np.asarray(volumes, dtype=np.float64)
    x = np.asarray(design, dtype=np.float64)
    if vols.ndim != 4:
        raise ValidationError(f"expected [N,X,Y,Z] volumes, got shape {vols.shape}")
    n, p = x.shape
    names = tuple(columns)
    if len(names) != p:
        raise ValidationError(f"{p} design columns but {len(names)} names")
    if vols.shape[0] != n:
        raise ValidationError("one design row per volume required")
    if n <= p:
        raise ValidationError(f"need more subjects ({n}) than regressors ({p})")
    if np.linalg.matrix_rank(x) < p:
        raise ValidationError(
            f"design matrix is rank deficient; collinear columns: {_name_collinear(x, names)}"
        )
    dims = vols.shape[1:]
    y = vols.reshape(n, -1)
    xtx = x.T @ x
    xtx_inv = np.linalg.inv(xtx)
    beta = xtx_inv @ (x.T @ y)                      # [p, V]
    resid = y - x @ beta
    df = n - p
    rss = (resid**2).sum(axis=0)                    # [V]
    s2 = rss / df
    se = np.sqrt(np.outer(np.diag(xtx_inv), s2))    # [p, V]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(se > 0, beta / se, 0.0)
    # A numerically perfect fit leaves round-off in both beta and se; the
    # ratio is then pure noise, so report t = 0 there instead.
    perfect = rss <= 1e-16 * np.maximum((y**2).sum(axis=0), np.finfo(np.float64).tiny)
    t[:, perfect] = 0.0
    return OlsResult(
        beta={nm: beta[j].reshape(dims) for j, nm in enumerate(names)},
        t={nm: t[j].reshape(dims) for j, nm in enumerate(names)},
        df=df,
        columns=names,
    )


def t_pvalues(t_map: np.ndarray, df: int, tails: int = 2) -> np.ndarray:
    if tails not in (1, 2):
        raise ValidationError("tails must be 1 or 2")
    t = np.asarray(t_map, dtype=np.float64)
    if tails == 1:
        return _sstats.t.sf(t, df)
    return 2.0 * _sstats.t.sf(np.abs(t), df)


@dataclass(frozen=True)
class OverlapReport:
    dice: float
    fraction_real: float
    fraction_synth: float
    t_threshold: float
    alpha: float


def threshold_and_compare(t_real: np.ndarray, t_synth: np.ndarray, df: int,
                          alpha: float = 0.05) -> OverlapReport:
    """Bonferroni-thresholded masks compared by Dice overlap.

    Two empty masks count as perfect agreement; one empty mask as none.
    """
    a = np.asarray(t_real, dtype=np.float64)
    b = np.asarray(t_synth, dtype=np.float64)
    if a.shape != b.shape:
        raise ValidationError(f"t-maps differ in shape: {a.shape} vs {b.shape}")
    if not 0.0 < alpha < 1.0:
        raise ValidationError(f"alpha must lie in (0,1), got {alpha}")
    v = a.size
    t_crit = float(_sstats.t.isf(alpha / (2.0 * v), df))
    mask_a, mask_b = np.abs(a) > t_crit, np.abs(b) > t_crit
    na, nb = int(mask_a.sum()), int(mask_b.sum())
    if na + nb == 0:
        dice = 1.0
    else:
        dice = 2.0 * int((mask_a & mask_b).sum()) / (na + nb)
    return OverlapReport(dice=float(dice), fraction_real=na / v, fraction_synth=nb / v,
                         t_threshold=t_crit, alpha=alpha)
