"""Adversarial training loop for the counterfactual synthesizer.

Alternating updates at a 1:1 ratio: one discriminator step on an
augmented batch, then one generator step that accumulates gradients over
every counterfactual label before a single optimizer step.

Determinism contract: every random decision in an epoch flows from rng
streams keyed by (seed, epoch, item position), so a future worker pool
could not change results.  Parameters have a single writer (the optimizer
step); augmentation never touches the stores.  Stochastic augmentation is
applied to both the real and the synthesized stream of the discriminator
update only; the generator step sees clean images, keeping its objective
a deterministic function of the parameters.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import interp
from .augment import item_rng, sda_augment_batch
from .diffnet import OptState, adam_step, load_checkpoint, save_checkpoint
from .errors import ValidationError
from .model import (
    Discriminator,
    Generator,
    LabelEncoding,
    LossParts,
    LossWeights,
    assemble_losses,
    build_discriminator,
    build_generator,
    discriminate,
    loss_adv_disc,
    loss_adv_gen,
    loss_adv_recorded,
    loss_cls_fake,
    loss_cls_real,
    loss_smooth,
    r1_penalty,
    recorded_objectives,
    synthesize_batch,
)

METRIC_COLUMNS = ("epoch", "step", "L_disc", "L_gen", "L_adv", "L_cls_real",
                  "L_cls_fake", "L_smooth", "R1", "min_jac_det", "val_metric")


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters for one adversarial run (desk-scale defaults)."""

    batch_size: int = 16
    epochs: int = 100
    lr_gen: float = 1e-3
    lr_disc: float = 2e-4
    weight_decay: float = 1e-4
    sda_prob: float = 0.8
    seed: int = 0
    val_fraction: float = 0.15
    checkpoint_every: int = 0
    early_stop_patience: int = 20
    base_channels: int = 16
    head_resolution: str = "half"
    steps: int = 6
    max_channels: int = 256
    val_energy_weight: float = 1e-4
    weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValidationError(f"batch size must be positive, got {self.batch_size}")
        if self.epochs < 0:
            raise ValidationError(f"epochs must be non-negative, got {self.epochs}")
        if self.lr_gen <= 0 or self.lr_disc <= 0:
            raise ValidationError("learning rates must be positive")
        if self.weight_decay < 0:
            raise ValidationError(f"weight decay must be non-negative, got {self.weight_decay}")
        if not 0.0 <= self.sda_prob <= 1.0:
            raise ValidationError(f"SDA probability must lie in [0,1], got {self.sda_prob}")
        if not 0.0 < self.val_fraction < 1.0:
            raise ValidationError(f"validation fraction must lie in (0,1), got {self.val_fraction}")
        if self.checkpoint_every < 0 or self.early_stop_patience < 0:
            raise ValidationError("checkpoint cadence and patience must be non-negative")
        if self.val_energy_weight < 0:
            raise ValidationError("validation energy weight must be non-negative")


@dataclass
class TrainerState:
    cfg: TrainConfig
    encoding: LabelEncoding
    gen: Generator
    disc: Discriminator
    opt_gen: OptState
    opt_disc: OptState


def init_trainer(cfg: TrainConfig, encoding: LabelEncoding, input_size: int) -> TrainerState:
    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 402)))
    gen = build_generator(rng, encoding, cfg.base_channels, cfg.head_resolution, cfg.steps)
    disc = build_discriminator(rng, encoding.num_domains, input_size,
                               base_channels=cfg.base_channels, max_channels=cfg.max_channels)
    return TrainerState(
        cfg=cfg, encoding=encoding, gen=gen, disc=disc,
        opt_gen=OptState(lr=cfg.lr_gen, weight_decay=cfg.weight_decay),
        opt_disc=OptState(lr=cfg.lr_disc, weight_decay=cfg.weight_decay),
    )


def _counterfactual_targets(enc: LabelEncoding, labels: np.ndarray, rngs) -> np.ndarray:
    out = np.empty(len(labels), dtype=np.int64)
    for i, lab in enumerate(labels):
        cands = enc.counterfactual_domains(int(lab))
        # Always consume one draw so the per-item stream layout does not
        # depend on the number of domains.
        out[i] = cands[rngs[i].integers(len(cands))]
    return out


def discriminator_step(st: TrainerState, x: torch.Tensor, labels: np.ndarray, rngs) -> dict:
    """One update of the discriminator on an SDA-augmented batch."""
    enc = st.encoding
    targets = _counterfactual_targets(enc, labels, rngs)
    with torch.no_grad():
        _, _, y = synthesize_batch(st.gen, x, enc.encode(targets))
    x_aug = sda_augment_batch(x, st.cfg.sda_prob, rngs)
    y_aug = sda_augment_batch(y, st.cfg.sda_prob, rngs)
    labels_t = torch.as_tensor(labels, dtype=torch.long)
    parts = LossParts(
        adv_disc=loss_adv_disc(st.disc, x_aug, y_aug),
        cls_real=loss_cls_real(st.disc, x_aug, labels_t),
        r1=r1_penalty(st.disc, x_aug),
    )
    recorded_adv = loss_adv_recorded(st.disc, x_aug, y_aug)
    l_disc, _ = assemble_losses(parts, st.cfg.weights)
    st.disc.params.zero_grad()
    l_disc.backward()
    adam_step(st.disc.params, st.opt_disc)
    return {
        "L_adv": recorded_adv,
        "L_cls_real": float(parts.cls_real.detach()),
        "R1": float(parts.r1.detach()),
    }


def generator_step(st: TrainerState, x: torch.Tensor, labels: np.ndarray) -> dict:
    """One generator update, accumulating gradients over all counterfactual labels.

    Pass j synthesizes toward the j-th counterfactual label of every item;
    each pass backpropagates its objective divided by the pass count, so the
    accumulated gradient equals a single pass over the label-expanded batch.
    """
    enc = st.encoding
    passes = enc.num_domains - 1
    labels_t = torch.as_tensor(labels, dtype=torch.long)
    st.gen.params.zero_grad()
    adv_vals, cls_vals, smooth_vals = [], [], []
    min_det, neg_voxels = math.inf, 0
    for slot in range(passes):
        targets = np.array([enc.counterfactual_domains(int(l))[slot] for l in labels],
                           dtype=np.int64)
        v, phi, y = synthesize_batch(st.gen, x, enc.encode(targets))
        parts = LossParts(
            adv_gen=loss_adv_gen(st.disc, y),
            cls_fake=loss_cls_fake(st.disc, y, torch.as_tensor(targets), labels_t),
            smooth=loss_smooth(v),
        )
        _, l_gen = assemble_losses(parts, st.cfg.weights)
        (l_gen / passes).backward()
        with torch.no_grad():
            det = interp.jacobian_determinant_batch(phi)
            min_det = min(min_det, float(det.min()))
            neg_voxels += int((det <= 0).sum())
        adv_vals.append(float(parts.adv_gen.detach()))
        cls_vals.append(float(parts.cls_fake.detach()))
        smooth_vals.append(float(parts.smooth.detach()))
    adam_step(st.gen.params, st.opt_gen)
    return {
        "L_adv_gen_surrogate": float(np.mean(adv_vals)),
        "L_cls_fake": float(np.mean(cls_vals)),
        "L_smooth": float(np.mean(smooth_vals)),
        "min_jac_det": min_det,
        "neg_jac_voxels": neg_voxels,
    }


def train_step(st: TrainerState, x: torch.Tensor, labels: np.ndarray, rngs) -> dict:
    """Discriminator update then generator update; returns all loss scalars."""
    if x.shape[0] == 0:
        raise ValidationError("empty batch")
    scalars = discriminator_step(st, x, labels, rngs)
    scalars.update(generator_step(st, x, labels))
    l_disc, l_gen = recorded_objectives(scalars, st.cfg.weights)
    scalars["L_disc"], scalars["L_gen"] = l_disc, l_gen
    return scalars


# --------------------------------------------------------------------------
# checkpoint state


def _model_meta(cfg: TrainConfig, encoding: LabelEncoding, input_size: int) -> dict[str, np.ndarray]:
    # The checkpoint payload holds arrays only, so the rebuild recipe is
    # encoded as integers; the label mode maps through _ENC_MODES.
    return {
        "meta/base_channels": np.int64(cfg.base_channels),
        "meta/head_full": np.int64(1 if cfg.head_resolution == "full" else 0),
        "meta/steps": np.int64(cfg.steps),
        "meta/max_channels": np.int64(cfg.max_channels),
        "meta/num_domains": np.int64(encoding.num_domains),
        "meta/enc_mode": np.int64(_ENC_MODES.index(encoding.mode)),
        "meta/input_size": np.int64(input_size),
    }


_ENC_MODES = ("one_hot", "binary", "continuous")


def rebuild_models(state: dict[str, np.ndarray], attribute: str = "label"
                   ) -> tuple[Generator, Discriminator, LabelEncoding]:
    """Reconstruct trained models from a checkpoint payload's meta recipe."""
    try:
        encoding = LabelEncoding(attribute, int(state["meta/num_domains"]),
                                 _ENC_MODES[int(state["meta/enc_mode"])])
        head = "full" if int(state["meta/head_full"]) else "half"
        rng = np.random.default_rng(0)
        gen = build_generator(rng, encoding, int(state["meta/base_channels"]),
                              head, int(state["meta/steps"]))
        disc = build_discriminator(rng, encoding.num_domains, int(state["meta/input_size"]),
                                   base_channels=int(state["meta/base_channels"]),
                                   max_channels=int(state["meta/max_channels"]))
    except KeyError as exc:
        raise ValidationError(f"checkpoint is missing rebuild metadata: {exc}") from None
    cut = {k: v for k, v in state.items() if k.startswith("gen/") or k.startswith("disc/")}
    gen_p, disc_p = _split_params(cut)
    gen.params.load_state_dict(gen_p)
    disc.params.load_state_dict(disc_p)
    return gen, disc, encoding


def trainer_state_dict(st: TrainerState, next_epoch: int, best_epoch: int,
                       best_val: float, last_val: float,
                       best_params: dict[str, np.ndarray],
                       input_size: int) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    for prefix, store in (("gen", st.gen.params), ("disc", st.disc.params)):
        for name, arr in store.state_dict().items():
            out[f"{prefix}/{name}"] = arr
    for prefix, opt in (("optg", st.opt_gen), ("optd", st.opt_disc)):
        opt.ensure(st.gen.params if prefix == "optg" else st.disc.params)
        for kind, table in (("m", opt.m), ("v", opt.v)):
            for name, t in table.items():
                out[f"{prefix}/{kind}/{name}"] = t.numpy().copy()
    out["meta/optg_step"] = np.int64(st.opt_gen.step)
    out["meta/optd_step"] = np.int64(st.opt_disc.step)
    out["meta/next_epoch"] = np.int64(next_epoch)
    out["meta/best_epoch"] = np.int64(best_epoch)
    out["meta/best_val"] = np.float64(best_val)
    out["meta/last_val"] = np.float64(last_val)
    out.update(_model_meta(st.cfg, st.encoding, input_size))
    for name, arr in best_params.items():
        out[f"best/{name}"] = arr
    return out


def restore_trainer(st: TrainerState, state: dict[str, np.ndarray], input_size: int
                    ) -> tuple[int, int, float, float, dict[str, np.ndarray]]:
    """Load a trainer checkpoint in place; returns the loop bookkeeping."""
    want = _model_meta(st.cfg, st.encoding, input_size)
    for key, val in want.items():
        if key not in state or int(state[key]) != int(val):
            raise ValidationError(
                f"checkpoint was written for a different model: {key} is "
                f"{state.get(key)}, config needs {int(val)}"
            )

    def subset(prefix):
        cut = len(prefix) + 1
        return {k[cut:]: v for k, v in state.items() if k.startswith(prefix + "/")}

    st.gen.params.load_state_dict(subset("gen"))
    st.disc.params.load_state_dict(subset("disc"))
    for prefix, opt, store in (("optg", st.opt_gen, st.gen.params),
                               ("optd", st.opt_disc, st.disc.params)):
        for kind, table in (("m", opt.m), ("v", opt.v)):
            sub = subset(f"{prefix}/{kind}")
            if set(sub) != set(store.names()):
                raise ValidationError(f"checkpoint optimizer table {prefix}/{kind} does not match parameters")
            for name in store.names():
                table[name] = torch.from_numpy(np.ascontiguousarray(sub[name]))
    st.opt_gen.step = int(state["meta/optg_step"])
    st.opt_disc.step = int(state["meta/optd_step"])
    next_epoch = int(state["meta/next_epoch"])
    best_epoch = int(state["meta/best_epoch"])
    best_val = float(state["meta/best_val"])
    last_val = float(state["meta/last_val"])
    best_params = subset("best")
    if not best_params:
        raise ValidationError("checkpoint is missing the best-parameter snapshot")
    return next_epoch, best_epoch, best_val, last_val, best_params


def _split_params(best_params: dict[str, np.ndarray]) -> tuple[dict, dict]:
    gen = {k[4:]: v for k, v in best_params.items() if k.startswith("gen/")}
    disc = {k[5:]: v for k, v in best_params.items() if k.startswith("disc/")}
    return gen, disc


# --------------------------------------------------------------------------
# fit


@dataclass
class FitResult:
    gen: Generator                       # parameters of the selected epoch
    disc: Discriminator
    log: list[dict]
    val_history: list[dict]              # per-epoch d_cls_acc / mean_energy / val_metric
    best_epoch: int                      # -1 when no validation pass ran
    best_val_metric: float
    state: dict[str, np.ndarray]         # resume-ready final trainer state
    best_params: dict[str, np.ndarray]


def _check_dataset(images, labels, encoding: LabelEncoding) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(images, dtype=np.float32)
    lab = np.asarray(labels)
    if x.ndim != 4:
        raise ValidationError(f"images must be [N,X,Y,Z], got shape {x.shape}")
    if not (x.shape[1] == x.shape[2] == x.shape[3]):
        raise ValidationError(f"the discriminator needs cubic volumes, got {x.shape[1:]}")
    if lab.ndim != 1 or lab.shape[0] != x.shape[0]:
        raise ValidationError("labels must be one integer per image")
    lab = lab.astype(np.int64)
    if x.shape[0] and (int(lab.min()) < 0 or int(lab.max()) >= encoding.num_domains):
        raise ValidationError(f"labels must lie in [0, {encoding.num_domains})")
    if len(np.unique(lab)) < 2:
        raise ValidationError(
            "dataset holds a single observed domain; counterfactual training "
            "needs at least two"
        )
    if float(x.min()) < 0.0 or float(x.max()) > 1.0:
        raise ValidationError("images must be normalized to [0, 1]")
    return x, lab


def _validate(st: TrainerState, x_val: np.ndarray, val_targets: np.ndarray) -> dict:
    accs, energies = [], []
    with torch.no_grad():
        for start in range(0, x_val.shape[0], st.cfg.batch_size):
            sl = slice(start, start + st.cfg.batch_size)
            xb = torch.from_numpy(x_val[sl]).unsqueeze(1)
            tb = val_targets[sl]
            v, _, y = synthesize_batch(st.gen, xb, st.encoding.encode(tb))
            _, cls, _ = discriminate(st.disc, y)
            hits = (cls.argmax(dim=1) == torch.as_tensor(tb)).to(torch.float64)
            accs.append(hits.numpy())
            energies.append(interp.diffusion_energy_batch(v).numpy())
    acc = float(np.concatenate(accs).mean())
    energy = float(np.concatenate(energies).mean())
    return {"d_cls_acc": acc, "mean_energy": energy,
            "val_metric": acc - st.cfg.val_energy_weight * energy}


def fit(images, labels, encoding: LabelEncoding, cfg: TrainConfig,
        out_dir=None, resume_from=None) -> FitResult:
    """Train with validation-based selection; returns the best checkpoint.

    The selection metric is the discriminator's classification accuracy on
    synthesized validation counterfactuals minus an energy penalty, so a
    generator cannot win by tearing the image apart.  Counterfactual
    targets for validation are drawn once from the run seed and reused
    every epoch, keeping the metric comparable across epochs.
    """
    x_all, lab = _check_dataset(images, labels, encoding)
    n = x_all.shape[0]
    n_val = int(round(cfg.val_fraction * n))
    if n_val < 1 or n_val >= n:
        raise ValidationError(
            f"validation fraction {cfg.val_fraction} of {n} items leaves an empty split"
        )
    perm = np.random.default_rng(np.random.SeedSequence((cfg.seed, 401))).permutation(n)
    val_idx, train_idx = perm[:n_val], perm[n_val:]

    vrng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 404)))
    val_targets = np.array(
        [st_cands[vrng.integers(len(st_cands))]
         for st_cands in (encoding.counterfactual_domains(int(lab[i])) for i in val_idx)],
        dtype=np.int64)
    x_val = x_all[val_idx]

    input_size = x_all.shape[1]
    st = init_trainer(cfg, encoding, input_size)
    start_epoch, best_epoch = 0, -1
    best_val, last_val = -math.inf, math.nan
    best_params = _current_params(st)
    if resume_from is not None:
        start_epoch, best_epoch, best_val, last_val, best_params = restore_trainer(
            st, load_checkpoint(resume_from), input_size)

    out_dir = Path(out_dir) if out_dir is not None else None
    rows: list[dict] = []
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        csv_path = out_dir / "metrics.csv"
        if resume_from is not None and csv_path.exists():
            rows = [r for r in read_metrics_csv(csv_path) if r["epoch"] < start_epoch]
            if start_epoch > 0 and (not rows or rows[-1]["epoch"] != start_epoch - 1):
                raise ValidationError(
                    f"metric log under {out_dir} is not contiguous with the "
                    f"checkpoint (resuming at epoch {start_epoch})"
                )

    val_history: list[dict] = []
    epochs_since_best = 0
    next_epoch = start_epoch
    for epoch in range(start_epoch, cfg.epochs):
        erng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 403, epoch)))
        order = train_idx[erng.permutation(len(train_idx))]
        pos = 0
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            xb = torch.from_numpy(x_all[batch]).unsqueeze(1)
            rngs = [item_rng(cfg.seed, epoch, pos + i) for i in range(len(batch))]
            scalars = train_step(st, xb, lab[batch], rngs)
            row = {"epoch": epoch, "step": start // cfg.batch_size,
                   "val_metric": last_val,
                   "neg_jac_voxels": scalars["neg_jac_voxels"]}
            row.update({k: scalars[k] for k in METRIC_COLUMNS if k in scalars})
            rows.append(row)
            pos += len(batch)
        next_epoch = epoch + 1

        stats = _validate(st, x_val, val_targets)
        last_val = stats["val_metric"]
        val_history.append({"epoch": epoch, **stats})
        if last_val > best_val:
            best_val, best_epoch = last_val, epoch
            best_params = _current_params(st)
            epochs_since_best = 0
            if out_dir is not None:
                payload = dict(best_params)
                payload.update(_model_meta(cfg, encoding, input_size))
                payload["meta/epoch"] = np.int64(epoch)
                payload["meta/val_metric"] = np.float64(best_val)
                save_checkpoint(out_dir / "best.dsynckpt", payload)
        else:
            epochs_since_best += 1

        if out_dir is not None:
            state = trainer_state_dict(st, next_epoch, best_epoch, best_val, last_val,
                                       best_params, input_size)
            save_checkpoint(out_dir / "last.dsynckpt", state)
            if cfg.checkpoint_every and next_epoch % cfg.checkpoint_every == 0:
                save_checkpoint(out_dir / f"epoch{epoch:04d}.dsynckpt", state)
            write_metrics_csv(rows, csv_path)

        if cfg.early_stop_patience and epochs_since_best >= cfg.early_stop_patience:
            break

    final_state = trainer_state_dict(st, next_epoch, best_epoch, best_val, last_val,
                                     best_params, input_size)
    if out_dir is not None and next_epoch == start_epoch:
        # no epoch ran (epochs=0, or resume already complete): still leave a
        # loadable checkpoint behind; the zero-initialized head makes the
        # untrained generator an identity model
        if not (out_dir / "best.dsynckpt").exists():
            payload = dict(best_params)
            payload.update(_model_meta(cfg, encoding, input_size))
            payload["meta/epoch"] = np.int64(best_epoch)
            payload["meta/val_metric"] = np.float64(best_val if best_epoch >= 0 else math.nan)
            save_checkpoint(out_dir / "best.dsynckpt", payload)
        if not (out_dir / "last.dsynckpt").exists():
            save_checkpoint(out_dir / "last.dsynckpt", final_state)
            write_metrics_csv(rows, csv_path)
    gen_best, disc_best = _split_params(best_params)
    st.gen.params.load_state_dict(gen_best)
    st.disc.params.load_state_dict(disc_best)
    return FitResult(
        gen=st.gen, disc=st.disc, log=rows, val_history=val_history,
        best_epoch=best_epoch,
        best_val_metric=best_val if best_epoch >= 0 else math.nan,
        state=final_state, best_params=best_params,
    )


def _current_params(st: TrainerState) -> dict[str, np.ndarray]:
    out = {}
    for prefix, store in (("gen", st.gen.params), ("disc", st.disc.params)):
        for name, arr in store.state_dict().items():
            out[f"{prefix}/{name}"] = arr
    return out


def write_metrics_csv(rows: list[dict], path) -> None:
    """One row per training step, fixed column order."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRIC_COLUMNS)
        for row in rows:
            writer.writerow([row.get(col, math.nan) for col in METRIC_COLUMNS])


def read_metrics_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != list(METRIC_COLUMNS):
            raise ValidationError(f"unexpected metric columns {reader.fieldnames}")
        out = []
        for row in reader:
            parsed = {"epoch": int(row["epoch"]), "step": int(row["step"])}
            for col in METRIC_COLUMNS[2:]:
                parsed[col] = float(row[col])
            out.append(parsed)
        return out
