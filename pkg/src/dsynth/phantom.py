"""Deterministic synthetic head phantoms and cohort samplers.

Each phantom is a smooth ellipsoidal head on a regular grid: a bright
cortical shell, mid-grey white matter, a dark central ventricle, and
optional bright lesion blobs in the deep white matter.  Morphology is
driven by subject attributes so that downstream tasks have learnable,
disentangled signal:

* sex sets the anteroposterior/width aspect ratio of the head,
* age widens the ventricle and thins the shell (and nudges the aspect
  ratio, so the sex cue is age dependent),
* lesion load only touches intensity, never geometry.

Cohort samplers produce attribute sets with engineered imbalance,
age-lesion confounding, or sex-lesion collider structure, and report
the correlations they actually achieved.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import stats as _sstats
from scipy.special import ndtri

from .deform import Grid3, Volume, load_volume, save_volume
from .errors import ValidationError

AGE_LO = 38.0
AGE_HI = 80.0
AGE_BINS = ("younger", "middle", "older")
LESION_BINS = ("bottom3q", "topq")

DEFAULT_GRID = Grid3((24, 24, 24))
DEFAULT_LOAD_SCALE = 120.0

# Intensity bands (before noise).
_BG = 0.02
_WM = 0.55
_SHELL = 0.85
_VENTRICLE = 0.08
_LESION_CAP = 0.95
_NOISE_SIGMA = 0.02

# Geometry in normalised ellipsoid coordinates.
_SEMI_Y = 0.80
_SEMI_Z = 0.72
_RATIO_BASE = (0.88, 1.06)        # female, male aspect ratio at the youngest age
_RATIO_AGE_GAIN = 0.16            # added to the ratio over the full age range
_RATIO_JITTER = 0.025
_VENT_BASE, _VENT_AGE_GAIN = 0.12, 0.20
_SHELL_BASE, _SHELL_AGE_LOSS = 0.16, 0.06
_EDGE_WIDTH = 0.10                # smoothstep half-width, roughly one voxel
_LESION_RHO = (0.35, 0.70)        # annulus that may contain lesion blobs
_LESION_AMP = 0.40
_LESION_SIGMA_VOX = (1.2, 2.0)


@dataclass(frozen=True)
class PhantomAttributes:
    """Per-subject generative attributes."""

    subject_id: str
    age: float
    sex: int
    lesion_load: float
    seed: int

    def __post_init__(self):
        if not (AGE_LO <= self.age <= AGE_HI):
            raise ValidationError(
                f"age {self.age} outside the supported range [{AGE_LO}, {AGE_HI}]"
            )
        if self.sex not in (0, 1):
            raise ValidationError(f"sex must be 0 or 1, got {self.sex}")
        if self.lesion_load < 0:
            raise ValidationError(f"lesion_load must be non-negative, got {self.lesion_load}")


@dataclass(frozen=True)
class AttributeBins:
    age_bin: str
    lesion_bin: str

    def __post_init__(self):
        if self.age_bin not in AGE_BINS:
            raise ValidationError(f"unknown age bin {self.age_bin!r}")
        if self.lesion_bin not in LESION_BINS:
            raise ValidationError(f"unknown lesion bin {self.lesion_bin!r}")


def age_bin(age: float) -> str:
    """younger = [0, 50], middle = (50, 55], older = above 55."""
    if age <= 50.0:
        return "younger"
    if age <= 55.0:
        return "middle"
    return "older"


def age_bin_index(name: str) -> int:
    return AGE_BINS.index(name)


def lesion_quartile_cut(loads) -> float:
    """75th-percentile lesion load; compute on the training cohort only."""
    arr = np.asarray(loads, dtype=np.float64)
    if arr.size < 4:
        raise ValidationError(f"need at least 4 loads for a quartile cut, got {arr.size}")
    return float(np.quantile(arr, 0.75))


def bin_attributes(attrs: PhantomAttributes, lesion_cut: float) -> AttributeBins:
    """Assign age and lesion bins; the top quartile is strictly above the cut."""
    lesion = "topq" if attrs.lesion_load > lesion_cut else "bottom3q"
    return AttributeBins(age_bin=age_bin(attrs.age), lesion_bin=lesion)


def pearson(xs, ys) -> tuple[float, float]:
    """Sample Pearson correlation with a two-sided t-test p-value."""
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValidationError(f"pearson needs two equal-length 1-D series, got {x.shape} and {y.shape}")
    if x.size < 3:
        raise ValidationError(f"pearson needs at least 3 samples, got {x.size}")
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        raise ValidationError("pearson is undefined for a zero-variance series")
    r, p = _sstats.pearsonr(x, y)
    return float(r), float(p)


# --------------------------------------------------------------------------
# rendering


def _age_norm(age: float) -> float:
    return (age - AGE_LO) / (AGE_HI - AGE_LO)


def _smoothstep(u: np.ndarray) -> np.ndarray:
    t = np.clip(u, 0.0, 1.0)
    return t * t * (3.0 - 2.0 * t)


def _inside(edge: float, rho: np.ndarray, width: float = _EDGE_WIDTH) -> np.ndarray:
    # 1 well inside the edge, 0 well outside, 0.5 exactly on it.
    return _smoothstep((edge - rho) / (2.0 * width) + 0.5)


def render_phantom(attrs: PhantomAttributes, grid: Grid3 = DEFAULT_GRID) -> Volume:
    """Render one phantom; a pure function of (attrs, grid).

    The per-subject seed drives aspect-ratio jitter, lesion placement and
    the additive noise.  The draw order is fixed so that re-rendering with
    a changed age or sex (same seed) yields the true counterfactual: the
    jitter, blob geometry and noise realisation all stay identical.
    """
    rng = np.random.default_rng(np.random.SeedSequence((int(attrs.seed), 311)))
    a_n = _age_norm(attrs.age)

    ratio = _RATIO_BASE[attrs.sex] + _RATIO_AGE_GAIN * a_n + _RATIO_JITTER * rng.standard_normal()
    semi = np.array([_SEMI_Y * ratio, _SEMI_Y, _SEMI_Z])

    axes = [np.linspace(-1.0, 1.0, n) for n in grid.dims]
    xx, yy, zz = np.meshgrid(*axes, indexing="ij")
    rho = np.sqrt((xx / semi[0]) ** 2 + (yy / semi[1]) ** 2 + (zz / semi[2]) ** 2)

    shell_t = _SHELL_BASE - _SHELL_AGE_LOSS * a_n
    vent_r = _VENT_BASE + _VENT_AGE_GAIN * a_n

    head = _inside(1.0, rho)
    wm = _inside(1.0 - shell_t, rho)
    vent = _inside(vent_r, rho)

    img = _BG + (_SHELL - _BG) * head + (_WM - _SHELL) * wm + (_VENTRICLE - _WM) * vent

    if attrs.lesion_load > 0:
        lesions = _render_lesions(attrs.lesion_load, semi, grid, rng)
        # Lesions live strictly in white matter, outside the ventricle.
        img = img + lesions * wm * (1.0 - vent)
        img = np.minimum(img, _LESION_CAP)

    img = img + _NOISE_SIGMA * rng.standard_normal(grid.dims)
    return Volume(grid, np.clip(img, 0.0, 1.0).astype(np.float32))


def _render_lesions(load: float, semi: np.ndarray, grid: Grid3,
                    rng: np.random.Generator) -> np.ndarray:
    """Bright Gaussian blobs in the deep-WM annulus summing to `load` volume units.

    Centres are drawn in material (ellipsoid) coordinates with a fixed
    number of rng draws per blob, so an age or sex counterfactual moves
    each blob with the anatomy instead of resampling it.
    """
    axes = [np.arange(n, dtype=np.float64) for n in grid.dims]
    ii, jj, kk = np.meshgrid(*axes, indexing="ij")
    half = (np.asarray(grid.dims, dtype=np.float64) - 1.0) / 2.0
    lo, hi = _LESION_RHO
    out = np.zeros(grid.dims)
    remaining = float(load)
    guard = 0
    while remaining > 1e-9 and guard < 64:
        guard += 1
        direction = rng.standard_normal(3)
        norm = float(np.linalg.norm(direction))
        direction = direction / norm if norm > 1e-12 else np.array([1.0, 0.0, 0.0])
        radius = rng.uniform(lo**3, hi**3) ** (1.0 / 3.0)  # uniform over the shell volume
        centre = half * (1.0 + direction * radius * semi)
        sigma = rng.uniform(*_LESION_SIGMA_VOX)
        nominal = _LESION_AMP * (2.0 * math.pi) ** 1.5 * sigma**3
        amp = _LESION_AMP * min(1.0, remaining / nominal)
        d2 = (ii - centre[0]) ** 2 + (jj - centre[1]) ** 2 + (kk - centre[2]) ** 2
        out += amp * np.exp(-0.5 * d2 / sigma**2)
        remaining -= min(nominal, remaining)
    return out


# --------------------------------------------------------------------------
# cohort sampling


@dataclass(frozen=True)
class CohortSpec:
    """Recipe for an attribute cohort.

    mode "natural"    uniform ages, balanced sex, age-lesion coupling rho.
    mode "minority"   equal younger/middle counts, `minority_fraction` older.
    mode "balanced"   every sex x age-bin cell as close to n/6 as possible.
    mode "confounder" natural ages with a configurable age-lesion coupling.
    mode "collider"   selection jointly on sex, age and lesion load, tuned
                      so Pearson(sex, top-quartile flag) lands near 0.83.
    """

    n: int
    mode: str = "natural"
    minority_fraction: float = 0.0
    coupling: float = 0.4
    load_scale: float = DEFAULT_LOAD_SCALE
    grid: Grid3 = DEFAULT_GRID

    def __post_init__(self):
        if self.n < 1:
            raise ValidationError(f"cohort size must be at least 1, got {self.n}")
        if self.mode not in ("natural", "minority", "balanced", "confounder", "collider"):
            raise ValidationError(f"unknown cohort mode {self.mode!r}")
        if not (0.0 <= self.minority_fraction <= 1.0):
            raise ValidationError(f"minority fraction must lie in [0, 1], got {self.minority_fraction}")
        if not (-0.99 <= self.coupling <= 0.99):
            raise ValidationError(f"coupling must lie in (-1, 1), got {self.coupling}")
        if self.load_scale <= 0:
            raise ValidationError(f"load scale must be positive, got {self.load_scale}")


@dataclass(frozen=True)
class SubjectRecord:
    attrs: PhantomAttributes
    bins: AttributeBins
    volume: Volume | None = None


@dataclass(frozen=True)
class Cohort:
    records: tuple[SubjectRecord, ...]
    lesion_cut: float
    achieved: dict = field(default_factory=dict)
    spec: CohortSpec | None = None

    def __len__(self) -> int:
        return len(self.records)


_COLLIDER_ADMIT = 0.25   # sex=1, older, near-maximal load
_COLLIDER_CONTROL = 0.62  # sex=0, younger, low load
# remainder sampled naturally


def _coupled_load(u_age: np.ndarray, coupling: float, scale: float,
                  rng: np.random.Generator) -> np.ndarray:
    # Gaussian-copula coupling: the load stays marginally uniform on
    # [0, scale] for uniform ages at any coupling strength.
    g = ndtri(np.clip(u_age, 1e-6, 1.0 - 1e-6))
    z = coupling * g + math.sqrt(1.0 - coupling**2) * rng.standard_normal(u_age.shape)
    return scale * _sstats.norm.cdf(z)


def sample_cohort(spec: CohortSpec, seed: int, render: bool = True) -> Cohort:
    """Draw a cohort realising the spec; optionally render every volume.

    Returns the records (shuffled), the lesion-load quartile cut computed
    on this cohort, and the achieved sample correlations.
    """
    rng = np.random.default_rng(np.random.SeedSequence((int(seed), 7021)))
    if spec.mode == "minority":
        ages, sexes = _minority_attrs(spec, rng)
        loads = _coupled_load((ages - AGE_LO) / (AGE_HI - AGE_LO), spec.coupling,
                              spec.load_scale, rng)
    elif spec.mode == "balanced":
        ages, sexes = _balanced_attrs(spec, rng)
        loads = _coupled_load((ages - AGE_LO) / (AGE_HI - AGE_LO), spec.coupling,
                              spec.load_scale, rng)
    elif spec.mode == "collider":
        ages, sexes, loads = _collider_attrs(spec, rng)
    else:  # natural / confounder differ only in the coupling value
        ages = rng.uniform(AGE_LO, AGE_HI, size=spec.n)
        sexes = rng.integers(0, 2, size=spec.n)
        loads = _coupled_load((ages - AGE_LO) / (AGE_HI - AGE_LO), spec.coupling,
                              spec.load_scale, rng)

    order = rng.permutation(spec.n)
    ages, sexes, loads = ages[order], sexes[order], loads[order]
    seeds = rng.integers(0, 2**62, size=spec.n)

    cut = lesion_quartile_cut(loads) if spec.n >= 4 else float(np.max(loads))
    records = []
    for i in range(spec.n):
        attrs = PhantomAttributes(
            subject_id=f"s{i:05d}",
            age=float(ages[i]),
            sex=int(sexes[i]),
            lesion_load=float(loads[i]),
            seed=int(seeds[i]),
        )
        bins = bin_attributes(attrs, cut)
        vol = render_phantom(attrs, spec.grid) if render else None
        records.append(SubjectRecord(attrs=attrs, bins=bins, volume=vol))

    achieved = _achieved_stats(records, cut)
    return Cohort(records=tuple(records), lesion_cut=cut, achieved=achieved, spec=spec)


def _minority_attrs(spec: CohortSpec, rng: np.random.Generator):
    n_old = int(round(spec.minority_fraction * spec.n))
    if spec.minority_fraction > 0 and n_old == 0:
        raise ValidationError(
            f"minority fraction {spec.minority_fraction} rounds to zero subjects at n={spec.n}"
        )
    rest = spec.n - n_old
    n_young = (rest + 1) // 2
    n_mid = rest - n_young
    if n_young == 0 or n_mid == 0:
        raise ValidationError(
            f"cohort of {spec.n} with minority fraction {spec.minority_fraction} "
            "empties the younger or middle stratum"
        )
    ages = np.concatenate([
        rng.uniform(AGE_LO, 50.0, size=n_young),
        rng.uniform(50.0, 55.0, size=n_mid),
        rng.uniform(55.0, AGE_HI, size=n_old),
    ])
    # Uniform draws land on the open end of each bin with probability zero,
    # but nudge exact boundary hits inward so binning stays consistent.
    ages[n_young:n_young + n_mid] = np.maximum(ages[n_young:n_young + n_mid], np.nextafter(50.0, 80.0))
    if n_old:
        ages[n_young + n_mid:] = np.maximum(ages[n_young + n_mid:], np.nextafter(55.0, 80.0))
    sexes = rng.integers(0, 2, size=spec.n)
    return ages, sexes


def _balanced_attrs(spec: CohortSpec, rng: np.random.Generator):
    if spec.n < 6:
        raise ValidationError(f"balanced mode needs at least 6 subjects, got {spec.n}")
    base, extra = divmod(spec.n, 6)
    ages_parts, sex_parts = [], []
    cell = 0
    for sex in (0, 1):
        for lo, hi in ((AGE_LO, 50.0), (50.0, 55.0), (55.0, AGE_HI)):
            count = base + (1 if cell < extra else 0)
            cell += 1
            a = rng.uniform(lo, hi, size=count)
            if lo > AGE_LO:
                a = np.maximum(a, np.nextafter(lo, AGE_HI))
            ages_parts.append(a)
            sex_parts.append(np.full(count, sex, dtype=np.int64))
    return np.concatenate(ages_parts), np.concatenate(sex_parts)


def _collider_attrs(spec: CohortSpec, rng: np.random.Generator):
    n_admit = int(round(_COLLIDER_ADMIT * spec.n))
    n_control = int(round(_COLLIDER_CONTROL * spec.n))
    n_nat = spec.n - n_admit - n_control
    if min(n_admit, n_control, n_nat) < 1:
        raise ValidationError(f"collider mode needs all three strata populated; n={spec.n} is too small")
    ages = np.concatenate([
        np.maximum(rng.uniform(55.0, AGE_HI, size=n_admit), np.nextafter(55.0, 80.0)),
        rng.uniform(AGE_LO, 50.0, size=n_control),
        rng.uniform(AGE_LO, AGE_HI, size=n_nat),
    ])
    sexes = np.concatenate([
        np.ones(n_admit, dtype=np.int64),
        np.zeros(n_control, dtype=np.int64),
        rng.integers(0, 2, size=n_nat),
    ])
    loads = np.concatenate([
        rng.uniform(0.92, 1.0, size=n_admit) * spec.load_scale,
        rng.uniform(0.0, 0.5, size=n_control) * spec.load_scale,
        _coupled_load((ages[-n_nat:] - AGE_LO) / (AGE_HI - AGE_LO), spec.coupling,
                      spec.load_scale, rng),
    ])
    return ages, sexes, loads


def _achieved_stats(records, cut: float) -> dict:
    ages = np.array([r.attrs.age for r in records])
    sexes = np.array([float(r.attrs.sex) for r in records])
    loads = np.array([r.attrs.lesion_load for r in records])
    topq = (loads > cut).astype(np.float64)
    out = {}
    for name, a, b in (("age_load", ages, loads), ("sex_topq", sexes, topq)):
        try:
            r, p = pearson(a, b)
        except ValidationError:
            r, p = None, None
        out[f"r_{name}"] = r
        out[f"p_{name}"] = p
    return out


# --------------------------------------------------------------------------
# manifest I/O


def save_cohort(cohort: Cohort, directory) -> None:
    """Write one raw volume per subject plus a manifest.json."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for rec in cohort.records:
        entry = {
            "id": rec.attrs.subject_id,
            "age": rec.attrs.age,
            "sex": rec.attrs.sex,
            "lesion_load": rec.attrs.lesion_load,
            "seed": rec.attrs.seed,
            "age_bin": rec.bins.age_bin,
            "lesion_bin": rec.bins.lesion_bin,
            "volume": None,
        }
        if rec.volume is not None:
            rel = f"{rec.attrs.subject_id}.dsyn"
            save_volume(directory / rel, rec.volume)
            entry["volume"] = rel
        entries.append(entry)
    manifest = {
        "format": "dsynth-cohort-v1",
        "lesion_cut": cohort.lesion_cut,
        "achieved": cohort.achieved,
        "subjects": entries,
    }
    if cohort.spec is not None:
        s = cohort.spec
        manifest["spec"] = {
            "n": s.n, "mode": s.mode, "minority_fraction": s.minority_fraction,
            "coupling": s.coupling, "load_scale": s.load_scale,
            "size": s.grid.dims[0],
        }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2))


def load_cohort(directory) -> Cohort:
    directory = Path(directory)
    path = directory / "manifest.json"
    if not path.exists():
        raise ValidationError(f"no manifest.json under {directory}")
    manifest = json.loads(path.read_text())
    if manifest.get("format") != "dsynth-cohort-v1":
        raise ValidationError(f"unrecognised cohort manifest format {manifest.get('format')!r}")
    records = []
    for entry in manifest["subjects"]:
        attrs = PhantomAttributes(
            subject_id=entry["id"], age=entry["age"], sex=entry["sex"],
            lesion_load=entry["lesion_load"], seed=entry["seed"],
        )
        bins = AttributeBins(age_bin=entry["age_bin"], lesion_bin=entry["lesion_bin"])
        vol = load_volume(directory / entry["volume"]) if entry["volume"] else None
        records.append(SubjectRecord(attrs=attrs, bins=bins, volume=vol))
    spec = None
    if "spec" in manifest:
        s = manifest["spec"]
        spec = CohortSpec(n=s["n"], mode=s["mode"],
                          minority_fraction=s["minority_fraction"],
                          coupling=s["coupling"], load_scale=s["load_scale"],
                          grid=Grid3((s["size"],) * 3))
    return Cohort(records=tuple(records), lesion_cut=manifest["lesion_cut"],
                  achieved=manifest["achieved"], spec=spec)


def counterfactual_attrs(attrs: PhantomAttributes, *, age: float | None = None,
                         sex: int | None = None) -> PhantomAttributes:
    """Same subject, altered age and/or sex; the seed is kept so rendering
    produces the ground-truth counterfactual image."""
    if age is None and sex is None:
        raise ValidationError("counterfactual_attrs changes nothing")
    return replace(attrs, age=attrs.age if age is None else age,
                   sex=attrs.sex if sex is None else sex)
