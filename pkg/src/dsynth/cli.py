"""Experiment orchestration commands.

Every command writes a `manifest.json` (the full option set, including any
config-file values) before computation starts, and a `summary.json` with
wall-clock timings and headline numbers afterwards.  A run can be repeated
from its manifest alone via `dsynth rerun`, and repeated runs produce
byte-identical metric CSVs.

Config files are flat `key = value` text: one pair per line, `#` comments,
unknown keys rejected with a line diagnostic.

Exit codes: 0 success, 2 validation failure, 3 numerical abort.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from . import __version__, interp
from .deform import Grid3, Volume, load_volume, save_volume
from .downstream import (
    CounterfactualModel,
    PredictorConfig,
    Strategy,
    item_target,
    items_from_cohort,
    load_predictor,
    make_group_key,
    predict_batch,
    results_rows,
    save_predictor,
    task_kind,
    train_predictor,
    write_results_csv,
)
from .errors import NumericalAbort, ValidationError
from .metrics import GroupPerformance, equity_report, group_stats
from .model import discriminate, exponentiation_steps, velocity
from .phantom import AGE_BINS, CohortSpec, load_cohort, sample_cohort, save_cohort
from .train_gan import (
    LossWeights,
    TrainConfig,
    fit,
    load_checkpoint,
    rebuild_models,
)

MANIFEST_FORMAT = "dsynth-manifest-v1"

# (type, default) per key; `None` default means the key is required
PHANTOM_SCHEMA = {
    "n": (int, 200),
    "mode": (str, "natural"),
    "minority_fraction": (float, 0.0),
    "coupling": (float, 0.4),
    "load_scale": (float, 120.0),
    "size": (int, 24),
}
TRAIN_GAN_SCHEMA = {
    "batch_size": (int, 16),
    "epochs": (int, 100),
    "lr_gen": (float, 1e-3),
    "lr_disc": (float, 2e-4),
    "weight_decay": (float, 1e-4),
    "sda_prob": (float, 0.8),
    "seed": (int, 0),
    "val_fraction": (float, 0.15),
    "checkpoint_every": (int, 0),
    "early_stop_patience": (int, 20),
    "base_channels": (int, 16),
    "head_resolution": (str, "half"),
    "steps": (int, 6),
    "max_channels": (int, 256),
    "val_energy_weight": (float, 1e-4),
    "w_adv": (float, 1.0),
    "w_cls_real": (float, 1.0),
    "w_cls_fake": (float, 1.0),
    "w_smooth": (float, 1.0),
    "w_r1": (float, 1.0),
}
TRAIN_CLF_SCHEMA = {
    "epochs": (int, 25),
    "batch_size": (int, 16),
    "lr": (float, 1e-3),
    "weight_decay": (float, 1e-4),
    "augment_prob": (float, 0.2),
    "val_fraction": (float, 0.2),
    "seed": (int, 0),
    "base_channels": (int, 16),
    "repeats": (int, 3),
    "eta_q": (float, 0.01),
    "dro_l2": (float, 0.01),
}


def parse_kv_config(text: str, schema: dict, source: str = "<config>") -> dict:
    """Flat typed key=value parsing with per-line diagnostics."""
    out = {k: d for k, (_, d) in schema.items()}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValidationError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key not in schema:
            raise ValidationError(f"{source}:{lineno}: unknown key {key!r}")
        typ = schema[key][0]
        try:
            if typ is bool:
                if value.lower() not in ("true", "false"):
                    raise ValueError(value)
                out[key] = value.lower() == "true"
            else:
                out[key] = typ(value)
        except ValueError:
            raise ValidationError(
                f"{source}:{lineno}: cannot parse {value!r} as {typ.__name__} "
                f"for key {key!r}"
            ) from None
    return out


def _load_config(path: str | None, schema: dict) -> dict:
    if path is None:
        return {k: d for k, (_, d) in schema.items()}
    p = Path(path)
    if not p.exists():
        raise ValidationError(f"config file {path} does not exist")
    return parse_kv_config(p.read_text(), schema, source=str(path))


def _deviations(opts: dict, schema: dict) -> list[str]:
    return sorted(f"{k}={opts[k]}" for k, (_, d) in schema.items()
                  if k in opts and opts[k] != d)


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def write_manifest(out_dir: Path, command: str, options: dict,
                   deviations: list[str], outputs: list[str]) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_json(out_dir / "manifest.json", {
        "format": MANIFEST_FORMAT,
        "version": __version__,
        "command": command,
        "options": options,
        "deviations": deviations,
        "outputs": outputs,
    })


# --------------------------------------------------------------------------
# phantom-gen


def run_phantom_gen(options: dict, out_dir: Path) -> dict:
    spec = CohortSpec(
        n=options["n"], mode=options["mode"],
        minority_fraction=options["minority_fraction"],
        coupling=options["coupling"], load_scale=options["load_scale"],
        grid=Grid3((options["size"],) * 3),
    )
    write_manifest(out_dir, "phantom-gen", options,
                   _deviations(options, PHANTOM_SCHEMA), ["cohort/"])
    t0 = time.perf_counter()
    cohort = sample_cohort(spec, seed=options["seed"])
    save_cohort(cohort, out_dir / "cohort")
    summary = {
        "n": len(cohort),
        "mode": spec.mode,
        "achieved": cohort.achieved,
        "lesion_cut": cohort.lesion_cut,
        "wall_seconds": {"total": time.perf_counter() - t0},
    }
    _write_json(out_dir / "summary.json", summary)
    for key, val in sorted(cohort.achieved.items()):
        print(f"{key}: {'n/a' if val is None else f'{val:.4f}'}")
    return summary


# --------------------------------------------------------------------------
# train-gan


def _cohort_training_arrays(cohort, attr: str):
    from .model import LabelEncoding

    vols, labels = [], []
    for rec in cohort.records:
        if rec.volume is None:
            raise ValidationError("cohort contains unrendered subjects")
        vols.append(rec.volume.values)
        labels.append(AGE_BINS.index(rec.bins.age_bin) if attr == "age"
                      else rec.attrs.sex)
    if attr == "age":
        encoding = LabelEncoding("age_bin", 3, "one_hot")
    else:
        encoding = LabelEncoding("sex", 2, "binary")
    return np.stack(vols), np.array(labels, dtype=np.int64), encoding


def run_train_gan(options: dict, out_dir: Path) -> dict:
    cohort = load_cohort(Path(options["cohort"]))
    images, labels, encoding = _cohort_training_arrays(cohort, options["attr"])
    weights = LossWeights(adv=options["w_adv"], cls_real=options["w_cls_real"],
                          cls_fake=options["w_cls_fake"],
                          smooth=options["w_smooth"], r1=options["w_r1"])
    cfg = TrainConfig(
        batch_size=options["batch_size"], epochs=options["epochs"],
        lr_gen=options["lr_gen"], lr_disc=options["lr_disc"],
        weight_decay=options["weight_decay"], sda_prob=options["sda_prob"],
        seed=options["seed"], val_fraction=options["val_fraction"],
        checkpoint_every=options["checkpoint_every"],
        early_stop_patience=options["early_stop_patience"],
        base_channels=options["base_channels"],
        head_resolution=options["head_resolution"], steps=options["steps"],
        max_channels=options["max_channels"],
        val_energy_weight=options["val_energy_weight"], weights=weights,
    )
    write_manifest(out_dir, "train-gan", options,
                   _deviations(options, TRAIN_GAN_SCHEMA),
                   ["metrics.csv", "best.dsynckpt", "last.dsynckpt"])
    resume_from = out_dir / "last.dsynckpt" if options.get("resume") else None
    if resume_from is not None and not resume_from.exists():
        raise ValidationError(f"cannot resume: {resume_from} does not exist")
    t0 = time.perf_counter()
    result = fit(images, labels, encoding, cfg, out_dir=out_dir,
                 resume_from=resume_from)
    summary = {
        "attr": options["attr"],
        "subjects": len(cohort),
        "best_epoch": result.best_epoch,
        "best_val_metric": result.best_val_metric,
        "epochs_logged": len({r["epoch"] for r in result.log}),
        "wall_seconds": {"total": time.perf_counter() - t0},
    }
    _write_json(out_dir / "summary.json", summary)
    return summary


# --------------------------------------------------------------------------
# synth


def _checkpoint_attribute(state: dict) -> str:
    return "age_bin" if int(state["meta/num_domains"]) == 3 else "sex"


def _parse_target(attr: str, raw: str) -> int:
    if attr == "age_bin" and raw in AGE_BINS:
        return AGE_BINS.index(raw)
    try:
        return int(raw)
    except ValueError:
        raise ValidationError(
            f"target {raw!r} is neither a domain index nor a bin name"
        ) from None


def _resize_trilinear(t: torch.Tensor, size: int) -> torch.Tensor:
    return F.interpolate(t, size=(size,) * 3, mode="trilinear", align_corners=True)


def run_synth(options: dict, out_file: Path) -> dict:
    state = load_checkpoint(options["ckpt"])
    attr = _checkpoint_attribute(state)
    gen, disc, encoding = rebuild_models(state, attribute=attr)
    target = _parse_target(attr, str(options["target"]))
    if not 0 <= target < encoding.num_domains:
        raise ValidationError(f"target domain {target} out of range")
    factor = int(options["resample"])
    if factor < 1:
        raise ValidationError(f"resample factor must be >= 1, got {factor}")

    vol = load_volume(Path(options["input"]))
    model_size = disc.config.input_size
    want = model_size * factor
    if vol.grid.dims != (want,) * 3:
        raise ValidationError(
            f"checkpoint expects {want}^3 input at resample factor {factor}, "
            f"cohort volume is {vol.grid.dims}"
        )
    # per-output manifest: several synth calls may share one directory
    out_file.parent.mkdir(parents=True, exist_ok=True)
    _write_json(Path(str(out_file) + ".manifest.json"), {
        "format": MANIFEST_FORMAT, "version": __version__,
        "command": "synth", "options": options, "deviations": [],
        "outputs": [out_file.name],
    })
    t0 = time.perf_counter()
    x_hi = torch.from_numpy(vol.values)[None, None]
    x_lo = _resize_trilinear(x_hi, model_size) if factor > 1 else x_hi
    x_lo = x_lo.clamp(0.0, 1.0)

    with torch.no_grad():
        _, cls, _ = discriminate(disc, x_lo)
        inferred = int(cls.argmax(dim=1)[0])
        if inferred == target:
            print(f"warning: target label {target} equals the inferred source "
                  f"label; output will be near-identity", file=sys.stderr)
        v = velocity(gen, x_lo, encoding.encode([target]))
        if factor > 1:
            # upsample the stationary field and rescale to the fine voxel size
            v = _resize_trilinear(v, want) * factor
        phi = interp.exp_velocity_map(v, exponentiation_steps(v, gen.config.steps))
        y = interp.warp_image(x_hi, phi)
    out = y[0, 0].numpy().astype(np.float32)
    save_volume(out_file, Volume(vol.grid, np.clip(out, 0.0, 1.0)))
    summary = {
        "inferred_source": inferred,
        "target": target,
        "attr": attr,
        "resample": factor,
        "max_displacement": float(v.abs().max()),
        "wall_seconds": {"total": time.perf_counter() - t0},
    }
    _write_json(Path(str(out_file) + ".summary.json"), summary)
    return summary


# --------------------------------------------------------------------------
# train-clf / evaluate


def _counterfactual_from_ckpt(path: str | None) -> CounterfactualModel | None:
    if path is None:
        return None
    state = load_checkpoint(path)
    attr = _checkpoint_attribute(state)
    gen, _, encoding = rebuild_models(state, attribute=attr)
    return CounterfactualModel(gen, encoding, attr)


def _parse_group_by(spec: str) -> tuple:
    fields = tuple(f.strip() for f in str(spec).split(",") if f.strip())
    make_group_key(fields)   # validates field names
    return fields


def run_train_clf(options: dict, out_dir: Path) -> dict:
    cohort = load_cohort(Path(options["cohort"]))
    items = items_from_cohort(cohort)
    strategy = Strategy(options["strategy"], eta_q=options["eta_q"],
                        dro_l2=options["dro_l2"])
    group_fields = _parse_group_by(options.get("group_by", "sex,age_bin"))
    cf = _counterfactual_from_ckpt(options.get("gan_ckpt"))
    if (strategy.uses_bcf or strategy.uses_acf) and cf is None:
        raise ValidationError(
            f"strategy {strategy.name} requires --gan-ckpt"
        )
    cfg = PredictorConfig(
        epochs=options["epochs"], batch_size=options["batch_size"],
        lr=options["lr"], weight_decay=options["weight_decay"],
        augment_prob=options["augment_prob"],
        val_fraction=options["val_fraction"], seed=options["seed"],
        base_channels=options["base_channels"], repeats=options["repeats"],
    )
    outputs = [f"predictor_r{r}.dsynckpt" for r in range(cfg.repeats)]
    write_manifest(out_dir, "train-clf", options,
                   _deviations(options, TRAIN_CLF_SCHEMA),
                   outputs + ["train_log.csv"])
    t0 = time.perf_counter()
    log_rows, best_vals = [], []
    for r in range(cfg.repeats):
        rcfg = replace(cfg, seed=cfg.seed + r)
        res = train_predictor(items, options["task"], strategy, rcfg, cf=cf,
                              group_fields=group_fields)
        save_predictor(out_dir / f"predictor_r{r}.dsynckpt", res.predictor)
        best_vals.append(res.best_val)
        log_rows.extend({"repeat": r, **row} for row in res.log)
    _write_train_log(log_rows, out_dir / "train_log.csv")
    summary = {
        "task": options["task"],
        "strategy": strategy.name,
        "repeats": cfg.repeats,
        "best_vals": best_vals,
        "wall_seconds": {"total": time.perf_counter() - t0},
    }
    _write_json(out_dir / "summary.json", summary)
    return summary


def _write_train_log(rows: list[dict], path: Path) -> None:
    import csv

    cols = ("repeat", "epoch", "train_loss", "val_metric")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(cols)
        for row in rows:
            writer.writerow([row[c] for c in cols])


def _predictions_for(pred, items):
    vols = np.stack([it.volume for it in items])
    out = predict_batch(pred, vols)
    if pred.task == "age":
        return out, np.array([it.age for it in items], dtype=np.float64)
    return out.argmax(axis=1), np.array(
        [item_target(it, pred.task) for it in items], dtype=np.int64)


def run_evaluate(options: dict, out_dir: Path) -> dict:
    pred_dir = Path(options["pred_dir"])
    manifest_path = pred_dir / "manifest.json"
    if not manifest_path.exists():
        raise ValidationError(f"no manifest.json under {pred_dir}")
    train_opts = json.loads(manifest_path.read_text())["options"]
    task, strategy = train_opts["task"], train_opts["strategy"]
    repeats = train_opts["repeats"]
    # group on the same cells the predictors were trained to balance
    key_fn = make_group_key(_parse_group_by(train_opts.get("group_by",
                                                           "sex,age_bin")))

    cohort = load_cohort(Path(options["test_cohort"]))
    if cohort.spec is not None and cohort.spec.mode != "natural":
        raise ValidationError(
            f"test sets must come from the natural distribution, cohort mode "
            f"is {cohort.spec.mode!r}"
        )
    items = items_from_cohort(cohort)
    if any(it.synthetic for it in items):
        raise ValidationError("synthetic items must never enter a test set")
    kind = task_kind(task)

    write_manifest(out_dir, "evaluate", options, [],
                   ["results.csv", "equity.json"])
    t0 = time.perf_counter()
    rows = []
    for r in range(repeats):
        pred = load_predictor(pred_dir / f"predictor_r{r}.dsynckpt")
        if pred.task != task:
            raise ValidationError("predictor task does not match the manifest")
        preds, truths = _predictions_for(pred, items)
        keys = [key_fn(it) for it in items]
        stats = group_stats(preds, truths, keys, kind)
        rows.extend(results_rows(task, strategy,
                                 options.get("minority_pct", float("nan")),
                                 r, stats))
    write_results_csv(rows, out_dir / "results.csv")

    summary = {
        "task": task,
        "strategy": strategy,
        "repeats": repeats,
        "group_means": _group_means(rows, kind),
        "wall_seconds": {"total": time.perf_counter() - t0},
    }
    if options.get("base"):
        base_rows = _read_results_csv(Path(options["base"]) / "results.csv")
        report = equity_report(_rows_to_stats(base_rows, kind),
                               _rows_to_stats(rows, kind))
        (out_dir / "equity.json").write_text(report.to_json() + "\n")
        summary["delta_global"] = report.delta_g
        summary["delta_local"] = report.delta_l
        summary["hei"] = report.hei
    _write_json(out_dir / "summary.json", summary)
    return summary


def _read_results_csv(path: Path) -> list[dict]:
    import csv

    if not path.exists():
        raise ValidationError(f"no results.csv at {path}")
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _group_means(rows: list[dict], kind: str) -> dict:
    col = "balanced_acc" if kind == "classification" else "mae"
    acc: dict[str, list[float]] = {}
    for row in rows:
        acc.setdefault(str(row["group_key"]), []).append(float(row[col]))
    return {k: float(np.mean(v)) for k, v in sorted(acc.items())}


def _rows_to_stats(rows: list[dict], kind: str) -> list[GroupPerformance]:
    """Aggregate per-repeat rows into one mean a_k per group."""
    col = "balanced_acc" if kind == "classification" else "mae"
    acc: dict[tuple, list] = {}
    ns: dict[tuple, int] = {}
    for row in rows:
        key = tuple(int(p) if p.lstrip("-").isdigit() else p
                    for p in str(row["group_key"]).split("|"))
        acc.setdefault(key, []).append(float(row[col]))
        ns[key] = int(float(row["n"]))
    return [GroupPerformance(group_key=k, task=kind,
                             a_k=float(np.mean(v)), n=ns[k])
            for k, v in sorted(acc.items())]


# --------------------------------------------------------------------------
# rerun


def run_from_manifest(manifest_path: Path, out: Path) -> dict:
    if not manifest_path.exists():
        raise ValidationError(f"manifest {manifest_path} does not exist")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format") != MANIFEST_FORMAT:
        raise ValidationError(
            f"unrecognised manifest format {manifest.get('format')!r}"
        )
    command, options = manifest["command"], manifest["options"]
    if command == "train-gan":
        # a resumed run's CSV is bitwise-equal to the uninterrupted run, so
        # reproduction always replays from scratch
        options = {**options, "resume": False}
    runners = {
        "phantom-gen": run_phantom_gen,
        "train-gan": run_train_gan,
        "train-clf": run_train_clf,
        "evaluate": run_evaluate,
        "synth": run_synth,
    }
    if command not in runners:
        raise ValidationError(f"manifest names unknown command {command!r}")
    if command == "synth":
        return run_synth(options, out)
    return runners[command](options, out)


# --------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dsynth",
        description="Counterfactual volumetric synthesis experiments",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom-gen", help="materialize a phantom cohort")
    p.add_argument("--spec", help="flat key=value cohort spec file")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("train-gan", help="train a counterfactual synthesizer")
    p.add_argument("--cohort", required=True)
    p.add_argument("--attr", choices=("age", "sex"), required=True)
    p.add_argument("--config", help="flat key=value training config file")
    p.add_argument("--out", required=True)
    p.add_argument("--resume", action="store_true",
                   help="continue from <out>/last.dsynckpt")

    p = sub.add_parser("synth", help="synthesize one counterfactual volume")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--target", required=True,
                   help="domain index, or an age bin name")
    p.add_argument("--out", required=True)
    p.add_argument("--resample", type=int, default=1,
                   help="integer field-resampling factor for a finer input grid")

    p = sub.add_parser("train-clf", help="train downstream predictors")
    p.add_argument("--cohort", required=True)
    p.add_argument("--task", choices=("sex", "age", "lesion"), required=True)
    p.add_argument("--strategy", required=True,
                   choices=("ERM", "DRO", "ERM-BCF", "ERM-ACF", "DRO-BCF", "DRO-ACF"))
    p.add_argument("--gan-ckpt", dest="gan_ckpt")
    p.add_argument("--group-by", dest="group_by", default="sex,age_bin",
                   help="comma-separated demographic fields defining cells")
    p.add_argument("--config")
    p.add_argument("--out", required=True)

    p = sub.add_parser("evaluate", help="evaluate predictors on a test cohort")
    p.add_argument("--pred-dir", dest="pred_dir", required=True)
    p.add_argument("--test-cohort", dest="test_cohort", required=True)
    p.add_argument("--minority-pct", dest="minority_pct", type=float,
                   default=float("nan"))
    p.add_argument("--base", help="evaluate output dir of the ERM base run")
    p.add_argument("--out", required=True)

    p = sub.add_parser("rerun", help="repeat a run from its manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    return parser


def _dispatch(args: argparse.Namespace) -> dict:
    if args.command == "phantom-gen":
        options = _load_config(args.spec, PHANTOM_SCHEMA)
        options["seed"] = args.seed
        return run_phantom_gen(options, Path(args.out))
    if args.command == "train-gan":
        options = _load_config(args.config, TRAIN_GAN_SCHEMA)
        options.update(cohort=args.cohort, attr=args.attr, resume=args.resume)
        return run_train_gan(options, Path(args.out))
    if args.command == "synth":
        options = {"ckpt": args.ckpt, "input": args.input,
                   "target": args.target, "resample": args.resample}
        return run_synth(options, Path(args.out))
    if args.command == "train-clf":
        options = _load_config(args.config, TRAIN_CLF_SCHEMA)
        options.update(cohort=args.cohort, task=args.task,
                       strategy=args.strategy, gan_ckpt=args.gan_ckpt,
                       group_by=args.group_by)
        return run_train_clf(options, Path(args.out))
    if args.command == "evaluate":
        options = {"pred_dir": args.pred_dir, "test_cohort": args.test_cohort,
                   "minority_pct": args.minority_pct, "base": args.base}
        return run_evaluate(options, Path(args.out))
    if args.command == "rerun":
        return run_from_manifest(Path(args.manifest), Path(args.out))
    raise ValidationError(f"unknown command {args.command!r}")


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        _dispatch(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericalAbort as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
