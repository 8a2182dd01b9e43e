"""Downstream predictors and training strategies.

Covers the six strategies: empirical risk minimisation (ERM), group DRO,
and each combined with balancing (BCF) or exhaustive (ACF) counterfactual
augmentation, plus the oversampling operator.

Conventions
* Group keys are (sex, age_bin) cells unless stated otherwise.
* BCF synthesises a fresh counterfactual set for the minority label every
  epoch; ACF expands the set once (it is deterministic) and then
  oversamples the demographic cells.
* Synthesised items are flagged `synthetic` and never mutate the real
  items they were generated from.
* Test sets must come from the natural phantom distribution; nothing in
  this module ever adds synthetic items to an evaluation set it did not
  itself augment for validation selection.
"""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass, field, replace

import numpy as np
import torch

from .augment import item_rng, sda_augment_batch
from .diffnet import (
    OptState,
    ParamStore,
    adam_step,
    clamped_log,
    conv3,
    conv_init,
    global_avg_pool,
    leaky_relu,
    linear,
    linear_init,
    load_checkpoint,
    maxpool3,
    save_checkpoint,
    softmax,
)
from .errors import ValidationError
from .model import Generator, LabelEncoding, synthesize_batch
from .phantom import AGE_BINS, LESION_BINS, Cohort
from . import metrics as metrics_mod

STRATEGY_NAMES = ("ERM", "DRO", "ERM-BCF", "ERM-ACF", "DRO-BCF", "DRO-ACF")
TASKS = ("sex", "age", "lesion")
AGE_BIN_CENTERS = {"younger": 44.0, "middle": 52.5, "older": 67.5}
AGE_SPAN = (38.0, 80.0)

RESULTS_COLUMNS = ("task", "strategy", "minority_pct", "repeat", "group_key",
                   "balanced_acc", "precision", "recall", "mae", "n")


@dataclass(frozen=True)
class Item:
    """One training or evaluation example with its demographic metadata."""

    volume: np.ndarray = field(repr=False)
    age: float
    sex: int
    age_bin: str
    lesion_bin: str
    subject_id: str
    synthetic: bool = False

    def __post_init__(self):
        if self.age_bin not in AGE_BINS or self.lesion_bin not in LESION_BINS:
            raise ValidationError(f"item {self.subject_id} has unknown bins")


def items_from_cohort(cohort: Cohort) -> list[Item]:
    out = []
    for rec in cohort.records:
        if rec.volume is None:
            raise ValidationError(f"subject {rec.attrs.subject_id} has no rendered volume")
        out.append(Item(volume=rec.volume.values, age=rec.attrs.age, sex=rec.attrs.sex,
                        age_bin=rec.bins.age_bin, lesion_bin=rec.bins.lesion_bin,
                        subject_id=rec.attrs.subject_id))
    return out


GROUP_FIELDS = ("sex", "age_bin", "lesion_bin")
DEFAULT_GROUP_BY = ("sex", "age_bin")


def make_group_key(fields=DEFAULT_GROUP_BY):
    """Key function over demographic cells, e.g. ("sex", "lesion_bin")."""
    fields = tuple(fields)
    bad = [f for f in fields if f not in GROUP_FIELDS]
    if not fields or bad:
        raise ValidationError(
            f"group fields must be drawn from {GROUP_FIELDS}, got {fields}"
        )

    def key(item: Item) -> tuple:
        return tuple(getattr(item, f) for f in fields)

    return key


def group_key(item: Item) -> tuple:
    return (item.sex, item.age_bin)


@dataclass(frozen=True)
class Strategy:
    name: str
    eta_q: float = 0.01
    dro_l2: float = 0.01

    def __post_init__(self):
        if self.name not in STRATEGY_NAMES:
            raise ValidationError(f"unknown strategy {self.name!r}")
        if self.is_dro and self.eta_q <= 0:
            raise ValidationError("DRO needs a positive step size eta_q")

    @property
    def is_dro(self) -> bool:
        return self.name.startswith("DRO")

    @property
    def uses_bcf(self) -> bool:
        return self.name.endswith("BCF")

    @property
    def uses_acf(self) -> bool:
        return self.name.endswith("ACF")


def task_kind(task: str) -> str:
    if task not in TASKS:
        raise ValidationError(f"unknown task {task!r}; expected one of {TASKS}")
    return "regression" if task == "age" else "classification"


def item_target(item: Item, task: str):
    if task == "sex":
        return item.sex
    if task == "lesion":
        return LESION_BINS.index(item.lesion_bin)
    lo, hi = AGE_SPAN
    return (item.age - lo) / (hi - lo)


# --------------------------------------------------------------------------
# dataset operators


def oversample(items: list[Item], key_fn, rng: np.random.Generator,
               expected_keys=None) -> list[Item]:
    """Duplicate items (by reference) until all key cells match the largest.

    Originals are always retained; duplicates are drawn with replacement.
    """
    cells: dict[tuple, list[Item]] = {}
    for it in items:
        cells.setdefault(key_fn(it), []).append(it)
    if not cells:
        raise ValidationError("cannot oversample an empty dataset")
    if expected_keys is not None:
        missing = [k for k in expected_keys if k not in cells]
        if missing:
            raise ValidationError(
                f"cells {missing} are empty; oversampling cannot create them "
                "(counterfactual balancing exists for that case)"
            )
    target = max(len(v) for v in cells.values())
    out = list(items)
    for key in sorted(cells):
        members = cells[key]
        deficit = target - len(members)
        if deficit > 0:
            picks = rng.integers(0, len(members), size=deficit)
            out.extend(members[int(i)] for i in picks)
    return out


@dataclass(frozen=True)
class CounterfactualModel:
    """A trained synthesizer bound to the attribute it counterfacts."""

    gen: Generator
    encoding: LabelEncoding
    attribute: str                 # "age_bin" or "sex"

    def __post_init__(self):
        if self.attribute not in ("age_bin", "sex"):
            raise ValidationError(f"unsupported counterfactual attribute {self.attribute!r}")
        want = 3 if self.attribute == "age_bin" else 2
        if self.encoding.num_domains != want:
            raise ValidationError(
                f"{self.attribute} counterfactuals need {want} domains, "
                f"encoding has {self.encoding.num_domains}"
            )

    def domain_of(self, item: Item) -> int:
        return AGE_BINS.index(item.age_bin) if self.attribute == "age_bin" else item.sex


def _counterfactual_item(cf: CounterfactualModel, donor: Item, target: int,
                         volume: np.ndarray) -> Item:
    if cf.attribute == "age_bin":
        new_bin = AGE_BINS[target]
        return replace(donor, volume=volume, age_bin=new_bin,
                       age=AGE_BIN_CENTERS[new_bin], synthetic=True,
                       subject_id=f"{donor.subject_id}+cf_{new_bin}")
    return replace(donor, volume=volume, sex=target, synthetic=True,
                   subject_id=f"{donor.subject_id}+cf_sex{target}")


def synthesize_items(cf: CounterfactualModel, donors: list[Item], targets,
                     batch_size: int = 16) -> list[Item]:
    """Batch the generator over (donor, target label) pairs."""
    targets = list(targets)
    if len(targets) != len(donors):
        raise ValidationError("one target label per donor required")
    out = []
    with torch.no_grad():
        for start in range(0, len(donors), batch_size):
            chunk = donors[start:start + batch_size]
            tchunk = targets[start:start + batch_size]
            x = torch.from_numpy(np.stack([d.volume for d in chunk])).unsqueeze(1)
            _, _, y = synthesize_batch(cf.gen, x, cf.encoding.encode(tchunk))
            vols = y.squeeze(1).numpy().astype(np.float32)
            out.extend(_counterfactual_item(cf, d, int(t), np.clip(vols[i], 0.0, 1.0))
                       for i, (d, t) in enumerate(zip(chunk, tchunk)))
    return out


def parity_deficits(counts: dict[int, int]) -> dict[int, int]:
    """Per-label shortfall against the largest label cell."""
    if not counts:
        raise ValidationError("no label counts given")
    target = max(counts.values())
    return {d: target - c for d, c in sorted(counts.items()) if c < target}


def augment_bcf(items: list[Item], cf: CounterfactualModel,
                rng: np.random.Generator) -> list[Item]:
    """Synthesize minority-label counterfactuals up to parity with the largest cell.

    Donors are drawn evenly (with replacement) from the labels that are not
    under-represented.  Returns only the synthesized items; callers append
    them to the real set, so real items are never touched.
    """
    if not items:
        raise ValidationError("cannot balance an empty dataset")
    counts = {d: 0 for d in range(cf.encoding.num_domains)}
    by_domain: dict[int, list[Item]] = {d: [] for d in counts}
    for it in items:
        d = cf.domain_of(it)
        counts[d] += 1
        by_domain[d].append(it)
    target_count = max(counts.values())
    synthesized: list[Item] = []
    for domain, deficit in parity_deficits(counts).items():
        donor_domains = [d for d, c in counts.items() if c == target_count]
        donors_pool = [it for d in donor_domains for it in by_domain[d]]
        if not donors_pool:
            raise ValidationError("no donors available for counterfactual balancing")
        # even draw across the non-under-represented labels
        weights = np.concatenate([
            np.full(len(by_domain[d]), 1.0 / (len(donor_domains) * len(by_domain[d])))
            for d in donor_domains
        ])
        picks = rng.choice(len(donors_pool), size=deficit, replace=True,
                           p=weights / weights.sum())
        donors = [donors_pool[int(i)] for i in picks]
        synthesized.extend(synthesize_items(cf, donors, [domain] * deficit))
    return synthesized


def augment_acf(items: list[Item], cf: CounterfactualModel,
                rng: np.random.Generator,
                group_fields=DEFAULT_GROUP_BY) -> list[Item]:
    """All counterfactual labels for every subject, then cell oversampling.

    Returns the complete augmented dataset (real + synthetic), balanced
    on the demographic cells.
    """
    if not items:
        raise ValidationError("cannot augment an empty dataset")
    donors, targets = [], []
    for it in items:
        for d in cf.encoding.counterfactual_domains(cf.domain_of(it)):
            donors.append(it)
            targets.append(d)
    combined = list(items) + synthesize_items(cf, donors, targets)
    return oversample(combined, make_group_key(group_fields), rng)


def dro_weight_update(q: np.ndarray, group_losses: np.ndarray, eta_q: float) -> np.ndarray:
    """Exponentiated-gradient ascent on the group simplex."""
    q = np.asarray(q, dtype=np.float64)
    losses = np.asarray(group_losses, dtype=np.float64)
    if q.shape != losses.shape or q.ndim != 1 or q.size == 0:
        raise ValidationError("q and group losses must be aligned 1-D vectors")
    if eta_q <= 0:
        raise ValidationError(f"eta_q must be positive, got {eta_q}")
    if np.any(q < 0) or abs(q.sum() - 1.0) > 1e-6:
        raise ValidationError("q must be a probability vector")
    if not np.all(np.isfinite(losses)):
        raise ValidationError("group losses must be finite")
    w = q * np.exp(eta_q * losses)
    return w / w.sum()


# --------------------------------------------------------------------------
# predictor model


@dataclass(frozen=True)
class PredictorConfig:
    epochs: int = 25
    batch_size: int = 16
    lr: float = 1e-3
    weight_decay: float = 1e-4
    augment_prob: float = 0.2
    val_fraction: float = 0.2
    seed: int = 0
    base_channels: int = 16
    repeats: int = 3

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.repeats < 1:
            raise ValidationError("epochs, batch size, and repeats must be positive")
        if self.lr <= 0 or self.weight_decay < 0:
            raise ValidationError("bad optimizer settings")
        if not 0.0 <= self.augment_prob <= 1.0:
            raise ValidationError("augment probability must lie in [0,1]")
        if not 0.0 < self.val_fraction < 1.0:
            raise ValidationError("validation fraction must lie in (0,1)")


@dataclass
class Predictor:
    task: str
    input_size: int
    num_outputs: int
    base_channels: int
    params: ParamStore


def build_predictor(rng: np.random.Generator, task: str, input_size: int,
                    base_channels: int = 16) -> Predictor:
    kind = task_kind(task)
    if input_size < 8 or input_size % 8:
        raise ValidationError(
            f"predictor needs an input size divisible by 8, got {input_size}"
        )
    num_outputs = 1 if kind == "regression" else 2
    c = base_channels
    plan = [(1, c), (c, 2 * c), (2 * c, 4 * c)]
    p = ParamStore()
    for i, (cin, cout) in enumerate(plan):
        p.register(f"conv{i}.weight", conv_init(rng, cout, cin, 3))
        p.register(f"conv{i}.bias", np.zeros(cout, dtype=np.float32))
    p.register("head.weight", linear_init(rng, num_outputs, 4 * c))
    p.register("head.bias", np.zeros(num_outputs, dtype=np.float32))
    return Predictor(task, input_size, num_outputs, base_channels, p)


def predictor_forward(pred: Predictor, x: torch.Tensor) -> torch.Tensor:
    if x.ndim != 5 or x.shape[1] != 1 or x.shape[2:] != (pred.input_size,) * 3:
        raise ValidationError(
            f"predictor built for [N,1,{pred.input_size}^3], got {tuple(x.shape)}"
        )
    p = pred.params
    h = x
    for i in range(3):
        h = leaky_relu(conv3(h, p[f"conv{i}.weight"].to(x.dtype),
                             p[f"conv{i}.bias"].to(x.dtype), padding=1))
        h = maxpool3(h)
    feats = global_avg_pool(h)
    return linear(feats, p["head.weight"].to(x.dtype), p["head.bias"].to(x.dtype))


def predict_batch(pred: Predictor, volumes: np.ndarray) -> np.ndarray:
    """Class distributions [N,K], or predicted ages in years [N]."""
    vols = np.asarray(volumes, dtype=np.float32)
    if vols.ndim != 4:
        raise ValidationError(f"expected [N,X,Y,Z] volumes, got shape {vols.shape}")
    with torch.no_grad():
        out = predictor_forward(pred, torch.from_numpy(vols).unsqueeze(1))
        if pred.task == "age":
            lo, hi = AGE_SPAN
            return (out.squeeze(1).numpy().astype(np.float64)) * (hi - lo) + lo
        return softmax(out).numpy().astype(np.float64)


def predict(pred: Predictor, volume: np.ndarray):
    """Single-volume forward pass: a distribution, or a real age in years."""
    vol = np.asarray(volume, dtype=np.float32)
    if vol.ndim != 3:
        raise ValidationError(f"expected one [X,Y,Z] volume, got shape {vol.shape}")
    out = predict_batch(pred, vol[None])
    return out[0] if pred.task != "age" else float(out[0])


def _per_item_losses(pred: Predictor, x: torch.Tensor, targets) -> torch.Tensor:
    out = predictor_forward(pred, x)
    if pred.task == "age":
        t = torch.as_tensor(np.asarray(targets, dtype=np.float32))
        return (out.squeeze(1) - t).abs()
    t = torch.as_tensor(np.asarray(targets, dtype=np.int64))
    probs = softmax(out)
    return -clamped_log(probs.gather(1, t.unsqueeze(1)).squeeze(1))


# --------------------------------------------------------------------------
# training


@dataclass
class PredictorResult:
    predictor: Predictor
    log: list[dict]
    best_epoch: int
    best_val: float                 # balanced accuracy, or MAE in years
    groups: tuple
    val_items: list[Item]


def _validate_pairing(task: str, strategy: Strategy, cf) -> None:
    task_kind(task)
    if strategy.is_dro and task == "age":
        raise ValidationError("group DRO is not supported for the regression objective")
    if (strategy.uses_bcf or strategy.uses_acf) and cf is None:
        raise ValidationError(
            f"strategy {strategy.name} needs a trained counterfactual model checkpoint"
        )


def evaluate_predictor(pred: Predictor, items: list[Item]) -> dict:
    """Overall validation-style metric plus raw predictions."""
    if not items:
        raise ValidationError("cannot evaluate on an empty set")
    vols = np.stack([it.volume for it in items])
    out = predict_batch(pred, vols)
    truths = np.array([item_target(it, pred.task) for it in items])
    if pred.task == "age":
        truths_years = np.array([it.age for it in items])
        return {"mae": float(np.mean(np.abs(out - truths_years))), "predictions": out}
    preds = out.argmax(axis=1)
    recalls = [float(np.mean(preds[truths == c] == c)) for c in np.unique(truths)]
    return {"balanced_acc": float(np.mean(recalls)), "predictions": preds}


def train_predictor(items: list[Item], task: str, strategy: Strategy,
                    cfg: PredictorConfig, cf: CounterfactualModel | None = None,
                    group_fields=DEFAULT_GROUP_BY) -> PredictorResult:
    """Train one predictor under one strategy; select on validation metric.

    Classification selects the highest balanced accuracy, regression the
    lowest MAE.  Validation sets receive the same counterfactual
    augmentation as training (recorded in the run manifest).
    ``group_fields`` picks the demographic cells used for DRO weighting
    and for the cell oversampling inside the ACF strategies.
    """
    _validate_pairing(task, strategy, cf)
    if len(items) < 4:
        raise ValidationError("need at least 4 items to split train/validation")
    kind = task_kind(task)
    key_fn = make_group_key(group_fields)

    split_rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 601)))
    perm = split_rng.permutation(len(items))
    n_val = int(round(cfg.val_fraction * len(items)))
    if n_val < 1 or n_val >= len(items):
        raise ValidationError("validation split is empty")
    val_items = [items[i] for i in perm[:n_val]]
    train_items = [items[i] for i in perm[n_val:]]

    aug_rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 602)))
    if strategy.uses_acf:
        train_items = augment_acf(train_items, cf, aug_rng, group_fields)
        val_items = augment_acf(val_items, cf, aug_rng, group_fields)
    elif strategy.uses_bcf:
        val_items = val_items + augment_bcf(val_items, cf, aug_rng)

    build_rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 603)))
    input_size = int(train_items[0].volume.shape[0])
    pred = build_predictor(build_rng, task, input_size, cfg.base_channels)
    decay = strategy.dro_l2 if strategy.is_dro else cfg.weight_decay
    opt = OptState(lr=cfg.lr, weight_decay=decay)

    # DRO bookkeeping: the group set is every cell reachable under the
    # strategy (donor resampling can move synthesized items between cells
    # from one epoch to the next)
    epoch_rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 604, 0)))
    first_train = train_items + (augment_bcf(train_items, cf, epoch_rng)
                                 if strategy.uses_bcf else [])
    groups = _dro_groups(train_items, strategy, cf, group_fields)
    q = np.full(len(groups), 1.0 / len(groups))
    group_index = {g: i for i, g in enumerate(groups)}

    best_val = -math.inf if kind == "classification" else math.inf
    best_epoch = -1
    best_state = pred.params.state_dict()
    log: list[dict] = []
    for epoch in range(cfg.epochs):
        if epoch == 0:
            epoch_items = first_train
        elif strategy.uses_bcf:
            erng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 604, epoch)))
            epoch_items = train_items + augment_bcf(train_items, cf, erng)
        else:
            epoch_items = train_items
        order = np.random.default_rng(
            np.random.SeedSequence((cfg.seed, 605, epoch))).permutation(len(epoch_items))

        losses = []
        pos = 0
        for start in range(0, len(order), cfg.batch_size):
            batch = [epoch_items[i] for i in order[start:start + cfg.batch_size]]
            x = torch.from_numpy(np.stack([it.volume for it in batch])).unsqueeze(1)
            rngs = [item_rng(cfg.seed, epoch, pos + i) for i in range(len(batch))]
            pos += len(batch)
            x = sda_augment_batch(x, cfg.augment_prob, rngs)
            targets = [item_target(it, task) for it in batch]
            per_item = _per_item_losses(pred, x, targets)
            if strategy.is_dro:
                loss, q = _dro_batch_loss(per_item, batch, q, groups, group_index,
                                          strategy.eta_q, key_fn)
            else:
                loss = per_item.mean()
            pred.params.zero_grad()
            loss.backward()
            adam_step(pred.params, opt)
            losses.append(float(loss.detach()))

        stats = evaluate_predictor(pred, val_items)
        val_metric = stats["balanced_acc"] if kind == "classification" else stats["mae"]
        improved = (val_metric > best_val) if kind == "classification" else (val_metric < best_val)
        if improved:
            best_val, best_epoch = val_metric, epoch
            best_state = pred.params.state_dict()
        log.append({"epoch": epoch, "train_loss": float(np.mean(losses)),
                    "val_metric": val_metric})

    pred.params.load_state_dict(best_state)
    return PredictorResult(predictor=pred, log=log, best_epoch=best_epoch,
                           best_val=best_val, groups=groups, val_items=val_items)


def _dro_groups(train_items: list[Item], strategy: Strategy,
                cf: CounterfactualModel | None,
                group_fields=DEFAULT_GROUP_BY) -> tuple:
    """Cells a training item can occupy, including synthesized ones."""
    values = {}
    for f in group_fields:
        if f == "age_bin":
            values[f] = sorted({it.age_bin for it in train_items},
                               key=AGE_BINS.index)
        else:
            values[f] = sorted({getattr(it, f) for it in train_items})
    if strategy.uses_bcf or strategy.uses_acf:
        # parity fill reaches every value of the counterfactual attribute;
        # lesion_bin is never widened (deformations preserve lesions)
        if cf.attribute == "age_bin" and "age_bin" in values:
            values["age_bin"] = list(AGE_BINS)
        elif cf.attribute == "sex" and "sex" in values:
            values["sex"] = [0, 1]
    return tuple(sorted(itertools.product(*(values[f] for f in group_fields))))


def _dro_batch_loss(per_item: torch.Tensor, batch: list[Item], q: np.ndarray,
                    groups: tuple, group_index: dict, eta_q: float,
                    key_fn=group_key):
    keys = [key_fn(it) for it in batch]
    for k in keys:
        if k not in group_index:
            raise ValidationError(f"group {k} is outside the DRO group set")
    group_losses = np.zeros(len(groups))
    masks = {}
    for g, j in group_index.items():
        mask = np.array([k == g for k in keys])
        if mask.any():
            masks[j] = torch.from_numpy(mask)
            group_losses[j] = float(per_item[masks[j]].mean().detach())
    q_new = dro_weight_update(q, group_losses, eta_q)
    total = per_item.sum() * 0.0
    for j, mask in masks.items():
        total = total + float(q_new[j]) * per_item[mask].mean()
    return total, q_new


# --------------------------------------------------------------------------
# persistence and result tables


_TASK_IDS = {t: i for i, t in enumerate(TASKS)}


def save_predictor(path, pred: Predictor) -> None:
    payload = {f"params/{k}": v for k, v in pred.params.state_dict().items()}
    payload["meta/task"] = np.int64(_TASK_IDS[pred.task])
    payload["meta/input_size"] = np.int64(pred.input_size)
    payload["meta/num_outputs"] = np.int64(pred.num_outputs)
    payload["meta/base_channels"] = np.int64(pred.base_channels)
    save_checkpoint(path, payload)


def load_predictor(path) -> Predictor:
    state = load_checkpoint(path)
    try:
        task = TASKS[int(state["meta/task"])]
        pred = build_predictor(np.random.default_rng(0), task,
                               int(state["meta/input_size"]),
                               int(state["meta/base_channels"]))
    except KeyError as exc:
        raise ValidationError(f"predictor checkpoint is missing {exc}") from None
    pred.params.load_state_dict(
        {k[7:]: v for k, v in state.items() if k.startswith("params/")})
    return pred


def results_rows(task: str, strategy: str, minority_pct: float, repeat: int,
                 stats: list[metrics_mod.GroupPerformance]) -> list[dict]:
    rows = []
    for g in stats:
        is_cls = g.task == "classification"
        rows.append({
            "task": task, "strategy": strategy, "minority_pct": minority_pct,
            "repeat": repeat, "group_key": "|".join(str(f) for f in g.group_key),
            "balanced_acc": g.a_k if is_cls else math.nan,
            "precision": g.precision if g.precision is not None else math.nan,
            "recall": g.recall if g.recall is not None else math.nan,
            "mae": math.nan if is_cls else g.a_k,
            "n": g.n,
        })
    return rows


def write_results_csv(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=RESULTS_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row[k] for k in RESULTS_COLUMNS})
