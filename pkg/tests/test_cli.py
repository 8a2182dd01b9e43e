import hashlib
import json
from pathlib import Path

import numpy as np
import pytest
import torch

from dsynth import cli
from dsynth.deform import Grid3, Volume, load_volume, save_volume
from dsynth.diffnet import save_checkpoint
from dsynth.errors import ValidationError
from dsynth.model import LabelEncoding, build_discriminator, build_generator, synthesize
from dsynth.phantom import load_cohort
from dsynth.train_gan import read_metrics_csv


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    return tmp_path_factory.mktemp("cliruns")


@pytest.fixture(scope="module")
def cohort_dir(workdir):
    out = workdir / "cohort_run"
    opts = {k: d for k, (_, d) in cli.PHANTOM_SCHEMA.items()}
    opts.update(n=24, size=16, seed=7)
    cli.run_phantom_gen(opts, out)
    return out / "cohort"


@pytest.fixture(scope="module")
def identity_gan_dir(workdir, cohort_dir):
    out = workdir / "gan_identity"
    opts = {k: d for k, (_, d) in cli.TRAIN_GAN_SCHEMA.items()}
    opts.update(epochs=0, base_channels=4, batch_size=8, val_fraction=0.25,
                cohort=str(cohort_dir), attr="age", resume=False)
    cli.run_train_gan(opts, out)
    return out


@pytest.fixture(scope="module")
def clf_dir(workdir, cohort_dir):
    out = workdir / "clf_erm"
    rc = cli.main(["train-clf", "--cohort", str(cohort_dir), "--task", "sex",
                   "--strategy", "ERM", "--out", str(out), "--config",
                   str(_clf_cfg(out.parent))])
    assert rc == 0
    return out


def _clf_cfg(parent):
    path = parent / "clf.cfg"
    if not path.exists():
        path.write_text(
            "epochs = 2\nbatch_size = 8\nrepeats = 2\nbase_channels = 4\n"
            "val_fraction = 0.25\n")
    return path


def _dir_digest(directory: Path) -> str:
    # summary.json carries wall-clock timings and is the one file allowed
    # to differ between identical runs
    h = hashlib.sha256()
    for p in sorted(directory.rglob("*")):
        if p.is_file() and p.name != "summary.json":
            h.update(p.name.encode())
            h.update(p.read_bytes())
    return h.hexdigest()


# --------------------------------------------------------------------------
# config parsing


def test_parse_kv_config_defaults_and_overrides():
    text = "# comment\n\nn = 50\nmode = collider  # trailing comment\n"
    opts = cli.parse_kv_config(text, cli.PHANTOM_SCHEMA)
    assert opts["n"] == 50 and opts["mode"] == "collider"
    assert opts["size"] == 24          # untouched default


def test_parse_kv_config_unknown_key_names_line():
    with pytest.raises(ValidationError, match=r"cfg:3: unknown key 'frobnicate'"):
        cli.parse_kv_config("n = 5\n\nfrobnicate = 1\n", cli.PHANTOM_SCHEMA, "cfg")


def test_parse_kv_config_bad_value_names_key_and_line():
    with pytest.raises(ValidationError, match=r"cfg:1: cannot parse 'many' as int for key 'n'"):
        cli.parse_kv_config("n = many\n", cli.PHANTOM_SCHEMA, "cfg")
    with pytest.raises(ValidationError, match=r"expected 'key = value'"):
        cli.parse_kv_config("just words\n", cli.PHANTOM_SCHEMA, "cfg")


# --------------------------------------------------------------------------
# phantom-gen


def test_phantom_gen_outputs(cohort_dir):
    run_dir = cohort_dir.parent
    manifest = json.loads((run_dir / "manifest.json").read_text())
    assert manifest["format"] == cli.MANIFEST_FORMAT
    assert manifest["command"] == "phantom-gen"
    assert manifest["options"]["n"] == 24
    assert "n=24" in manifest["deviations"]
    summary = json.loads((run_dir / "summary.json").read_text())
    assert summary["n"] == 24
    cohort = load_cohort(cohort_dir)
    assert len(cohort) == 24 and cohort.spec.mode == "natural"


def test_phantom_gen_seed_reproducible(workdir, tmp_path):
    spec = tmp_path / "spec.cfg"
    spec.write_text("n = 6\nsize = 16\n")
    for out in (tmp_path / "a", tmp_path / "b"):
        rc = cli.main(["phantom-gen", "--spec", str(spec), "--out", str(out),
                       "--seed", "3"])
        assert rc == 0
    assert _dir_digest(tmp_path / "a") == _dir_digest(tmp_path / "b")


def test_phantom_gen_invalid_spec_exit2(tmp_path, capsys):
    spec = tmp_path / "spec.cfg"
    spec.write_text("n = 0\n")
    rc = cli.main(["phantom-gen", "--spec", str(spec), "--out", str(tmp_path / "o")])
    assert rc == 2
    assert "error:" in capsys.readouterr().err

    spec.write_text("banana = 1\n")
    rc = cli.main(["phantom-gen", "--spec", str(spec), "--out", str(tmp_path / "o")])
    assert rc == 2
    assert "unknown key" in capsys.readouterr().err


# --------------------------------------------------------------------------
# train-gan


def test_epochs0_checkpoint_is_identity(identity_gan_dir, cohort_dir):
    from dsynth.train_gan import load_checkpoint, rebuild_models

    ckpt = identity_gan_dir / "best.dsynckpt"
    assert ckpt.exists()
    gen, disc, encoding = rebuild_models(load_checkpoint(ckpt), attribute="age_bin")
    vol = load_cohort(cohort_dir).records[0].volume
    _, _, warped = synthesize(gen, vol, encoding, 2)
    assert np.allclose(warped.values, vol.values, atol=1e-6)
    assert (identity_gan_dir / "metrics.csv").exists()
    assert read_metrics_csv(identity_gan_dir / "metrics.csv") == []


def test_train_gan_resume_contiguous(workdir, cohort_dir):
    cfg1 = workdir / "gan1.cfg"
    cfg1.write_text("epochs = 1\nbatch_size = 8\nbase_channels = 4\n"
                    "val_fraction = 0.25\nearly_stop_patience = 0\n")
    cfg2 = workdir / "gan2.cfg"
    cfg2.write_text("epochs = 2\nbatch_size = 8\nbase_channels = 4\n"
                    "val_fraction = 0.25\nearly_stop_patience = 0\n")
    out = workdir / "gan_resumed"
    assert cli.main(["train-gan", "--cohort", str(cohort_dir), "--attr", "age",
                     "--config", str(cfg1), "--out", str(out)]) == 0
    assert cli.main(["train-gan", "--cohort", str(cohort_dir), "--attr", "age",
                     "--config", str(cfg2), "--out", str(out), "--resume"]) == 0
    rows = read_metrics_csv(out / "metrics.csv")
    assert sorted({r["epoch"] for r in rows}) == [0, 1]

    straight = workdir / "gan_straight"
    assert cli.main(["train-gan", "--cohort", str(cohort_dir), "--attr", "age",
                     "--config", str(cfg2), "--out", str(straight)]) == 0
    assert (out / "metrics.csv").read_bytes() == (straight / "metrics.csv").read_bytes()


def test_train_gan_resume_without_checkpoint_exit2(workdir, cohort_dir, capsys):
    rc = cli.main(["train-gan", "--cohort", str(cohort_dir), "--attr", "age",
                   "--out", str(workdir / "gan_nochkpt"), "--resume"])
    assert rc == 2
    assert "cannot resume" in capsys.readouterr().err


# --------------------------------------------------------------------------
# synth


def test_synth_identity_roundtrip(identity_gan_dir, cohort_dir, tmp_path, capsys):
    cohort = load_cohort(cohort_dir)
    src = cohort_dir / f"{cohort.records[0].attrs.subject_id}.dsyn"
    out = tmp_path / "cf.dsyn"
    rc = cli.main(["synth", "--ckpt", str(identity_gan_dir / "best.dsynckpt"),
                   "--in", str(src), "--target", "older", "--out", str(out)])
    assert rc == 0
    warped = load_volume(out)
    assert np.allclose(warped.values, cohort.records[0].volume.values, atol=1e-6)
    manifest = json.loads((tmp_path / "cf.dsyn.manifest.json").read_text())
    assert manifest["command"] == "synth"

    # asking for the inferred source label warns but proceeds
    capsys.readouterr()
    summary = json.loads((tmp_path / "cf.dsyn.summary.json").read_text())
    rc = cli.main(["synth", "--ckpt", str(identity_gan_dir / "best.dsynckpt"),
                   "--in", str(src), "--target", str(summary["inferred_source"]),
                   "--out", str(tmp_path / "cf2.dsyn")])
    assert rc == 0
    assert "inferred source" in capsys.readouterr().err


def test_synth_bad_target_exit2(identity_gan_dir, cohort_dir, tmp_path, capsys):
    src = next(cohort_dir.glob("*.dsyn"))
    rc = cli.main(["synth", "--ckpt", str(identity_gan_dir / "best.dsynckpt"),
                   "--in", str(src), "--target", "ancient",
                   "--out", str(tmp_path / "x.dsyn")])
    assert rc == 2
    assert "target" in capsys.readouterr().err


def constant_field_ckpt(path, size, shift, base=4):
    """Checkpoint whose generator emits a constant x-velocity of `shift`."""
    enc = LabelEncoding("age_bin", 3, "one_hot")
    gen = build_generator(np.random.default_rng(0), enc, base_channels=base, steps=4)
    with torch.no_grad():
        gen.params["head.bias"].copy_(torch.tensor([shift, 0.0, 0.0]))
    disc = build_discriminator(np.random.default_rng(1), 3, size, base_channels=base)
    payload = {}
    for prefix, store in (("gen", gen.params), ("disc", disc.params)):
        for k, v in store.state_dict().items():
            payload[f"{prefix}/{k}"] = v
    payload.update({
        "meta/num_domains": np.int64(3), "meta/enc_mode": np.int64(0),
        "meta/head_full": np.int64(0), "meta/base_channels": np.int64(base),
        "meta/steps": np.int64(4), "meta/max_channels": np.int64(256),
        "meta/input_size": np.int64(size),
    })
    save_checkpoint(path, payload)


def test_synth_resample_doubles_displacement(tmp_path):
    ckpt = tmp_path / "const.dsynckpt"
    constant_field_ckpt(ckpt, size=16, shift=0.5)
    rng = np.random.default_rng(0)
    hi = rng.uniform(0.0, 1.0, (32, 32, 32)).astype(np.float32)
    save_volume(tmp_path / "hi.dsyn", Volume(Grid3((32, 32, 32)), hi))

    summary = cli.run_synth(
        {"ckpt": str(ckpt), "input": str(tmp_path / "hi.dsyn"),
         "target": "older", "resample": 2},
        tmp_path / "out.dsyn")
    # voxel-unit magnitudes double with the grid factor
    assert summary["max_displacement"] == pytest.approx(1.0, abs=1e-6)
    out = load_volume(tmp_path / "out.dsyn").values
    # phi = id + 1 along x: warped[i] = input[i + 1] away from the edge clamp
    assert np.allclose(out[8:-9, 8:-8, 8:-8], hi[9:-8, 8:-8, 8:-8], atol=1e-5)

    lo = rng.uniform(0.0, 1.0, (16, 16, 16)).astype(np.float32)
    save_volume(tmp_path / "lo.dsyn", Volume(Grid3((16, 16, 16)), lo))
    summary1 = cli.run_synth(
        {"ckpt": str(ckpt), "input": str(tmp_path / "lo.dsyn"),
         "target": "older", "resample": 1},
        tmp_path / "out1.dsyn")
    assert summary1["max_displacement"] == pytest.approx(0.5, abs=1e-6)


def test_synth_size_mismatch_exit2(tmp_path, capsys):
    ckpt = tmp_path / "const.dsynckpt"
    constant_field_ckpt(ckpt, size=16, shift=0.25)
    vol = np.zeros((16, 16, 16), np.float32)
    save_volume(tmp_path / "v.dsyn", Volume(Grid3((16, 16, 16)), vol))
    rc = cli.main(["synth", "--ckpt", str(ckpt), "--in", str(tmp_path / "v.dsyn"),
                   "--target", "1", "--out", str(tmp_path / "o.dsyn"),
                   "--resample", "2"])
    assert rc == 2
    assert "32" in capsys.readouterr().err


# --------------------------------------------------------------------------
# train-clf / evaluate


def test_train_clf_outputs(clf_dir):
    manifest = json.loads((clf_dir / "manifest.json").read_text())
    assert manifest["command"] == "train-clf"
    assert manifest["options"]["task"] == "sex"
    assert (clf_dir / "predictor_r0.dsynckpt").exists()
    assert (clf_dir / "predictor_r1.dsynckpt").exists()
    log = (clf_dir / "train_log.csv").read_text().splitlines()
    assert log[0] == "repeat,epoch,train_loss,val_metric"
    assert len(log) == 1 + 2 * 2       # repeats x epochs


def test_train_clf_group_by_flows_to_evaluate(cohort_dir, tmp_path, capsys):
    out = tmp_path / "clf_lesion"
    rc = cli.main(["train-clf", "--cohort", str(cohort_dir), "--task", "lesion",
                   "--strategy", "DRO", "--group-by", "sex,lesion_bin",
                   "--out", str(out), "--config", str(_clf_cfg(tmp_path))])
    assert rc == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["options"]["group_by"] == "sex,lesion_bin"

    ev = tmp_path / "eval_lesion"
    rc = cli.main(["evaluate", "--pred-dir", str(out),
                   "--test-cohort", str(cohort_dir), "--out", str(ev)])
    assert rc == 0
    rows = cli._read_results_csv(ev / "results.csv")
    parts = {tuple(r["group_key"].split("|")) for r in rows}
    assert all(p[1] in ("bottom3q", "topq") for p in parts)

    rc = cli.main(["train-clf", "--cohort", str(cohort_dir), "--task", "sex",
                   "--strategy", "ERM", "--group-by", "sex,height",
                   "--out", str(tmp_path / "bad"),
                   "--config", str(_clf_cfg(tmp_path))])
    assert rc == 2
    assert "group fields" in capsys.readouterr().err


def test_train_clf_bcf_needs_ckpt(cohort_dir, tmp_path, capsys):
    rc = cli.main(["train-clf", "--cohort", str(cohort_dir), "--task", "sex",
                   "--strategy", "ERM-BCF", "--out", str(tmp_path / "o")])
    assert rc == 2
    assert "--gan-ckpt" in capsys.readouterr().err


def test_evaluate_outputs_and_equity(clf_dir, cohort_dir, tmp_path):
    out = tmp_path / "eval"
    rc = cli.main(["evaluate", "--pred-dir", str(clf_dir),
                   "--test-cohort", str(cohort_dir),
                   "--minority-pct", "1.0", "--out", str(out)])
    assert rc == 0
    rows = cli._read_results_csv(out / "results.csv")
    assert {r["repeat"] for r in rows} == {"0", "1"}
    assert all(r["task"] == "sex" and r["strategy"] == "ERM" for r in rows)
    assert all(r["minority_pct"] == "1.0" for r in rows)

    # equity vs a hand base whose every group sits at 0.5
    base = tmp_path / "base"
    base.mkdir()
    group_keys = sorted({r["group_key"] for r in rows})
    lines = [",".join(cli_cols())]
    for g in group_keys:
        lines.append(f"sex,ERM,1.0,0,{g},0.5,0.5,0.5,nan,4")
    (base / "results.csv").write_text("\n".join(lines) + "\n")
    out2 = tmp_path / "eval_vs_base"
    rc = cli.main(["evaluate", "--pred-dir", str(clf_dir),
                   "--test-cohort", str(cohort_dir),
                   "--out", str(out2), "--base", str(base)])
    assert rc == 0
    equity = json.loads((out2 / "equity.json").read_text())
    assert set(equity) >= {"delta_global", "delta_local", "hei", "hei_applicable"}
    summary = json.loads((out2 / "summary.json").read_text())
    assert "delta_global" in summary


def cli_cols():
    from dsynth.downstream import RESULTS_COLUMNS

    return RESULTS_COLUMNS


def test_evaluate_rejects_biased_test_set(clf_dir, tmp_path, capsys):
    spec = tmp_path / "m.cfg"
    spec.write_text("n = 12\nsize = 16\nmode = minority\nminority_fraction = 0.2\n")
    assert cli.main(["phantom-gen", "--spec", str(spec),
                     "--out", str(tmp_path / "m")]) == 0
    rc = cli.main(["evaluate", "--pred-dir", str(clf_dir),
                   "--test-cohort", str(tmp_path / "m" / "cohort"),
                   "--out", str(tmp_path / "e")])
    assert rc == 2
    assert "natural" in capsys.readouterr().err


# --------------------------------------------------------------------------
# rerun


def test_rerun_reproduces_train_clf(clf_dir, tmp_path):
    out2 = tmp_path / "clf_again"
    rc = cli.main(["rerun", "--manifest", str(clf_dir / "manifest.json"),
                   "--out", str(out2)])
    assert rc == 0
    assert (out2 / "train_log.csv").read_bytes() == \
        (clf_dir / "train_log.csv").read_bytes()
    assert (out2 / "predictor_r0.dsynckpt").read_bytes() == \
        (clf_dir / "predictor_r0.dsynckpt").read_bytes()


def test_rerun_bad_manifest_exit2(tmp_path, capsys):
    assert cli.main(["rerun", "--manifest", str(tmp_path / "nope.json"),
                     "--out", str(tmp_path / "o")]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"format": "other"}))
    assert cli.main(["rerun", "--manifest", str(bad),
                     "--out", str(tmp_path / "o")]) == 2
    capsys.readouterr()
