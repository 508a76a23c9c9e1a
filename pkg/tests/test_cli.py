"""End-to-end command tests; everything runs in-process through main()
except one subprocess smoke check of the installed entry point."""

import json
import subprocess
import sys

import numpy as np
import pytest

from fakefinder import augment as aug
from fakefinder import checkpoint as ckpt
from fakefinder import cli
from fakefinder import data as datamod
from fakefinder import metrics


def write_cfg(tmp_path, name="cfg.json", *, seed=3, out="run", n_real=40,
              n_fake=36, corpus_seed=2, amp=0.35, epochs=2, lr=1e-3,
              batch_size=16, stage2=True):
    doc = {
        "seed": seed,
        "output_dir": str(tmp_path / out),
        "data": {"synthetic": {
            "n_real": n_real, "n_fake": n_fake, "image_size": 32,
            "seed": corpus_seed, "signal_amplitude": amp,
        }},
        "stage1": {"epochs": epochs, "batch_size": batch_size,
                   "learning_rate": lr, "early_stopping": None},
        "stage2": {"epochs": 1, "batch_size": batch_size,
                   "learning_rate": lr / 2} if stage2 else None,
    }
    path = tmp_path / name
    path.write_text(json.dumps(doc))
    return str(path)


def run_dir_of(tmp_path, out="run"):
    return tmp_path / out


# ---------------------------------------------------------------------------
# prepare


def test_prepare_balances_and_splits(tmp_path, capsys):
    cfg = write_cfg(tmp_path, n_real=200, n_fake=180)
    assert cli.main(["--config", cfg, "prepare"]) == 0
    out = capsys.readouterr().out
    assert "200 real, 180 fake" in out
    data_dir = run_dir_of(tmp_path) / "data"
    train = datamod.load_manifest(data_dir / "train.tsv")
    val = datamod.load_manifest(data_dir / "val.tsv")
    test = datamod.load_manifest(data_dir / "test.tsv")
    # 380 oversampled to 400, then 360/40, then 324/36 off the train side
    assert (len(train), len(val), len(test)) == (324, 36, 40)
    for m in (train, val, test):
        counts = m.class_counts()
        assert abs(counts[datamod.LABEL_FAKE] - counts[datamod.LABEL_REAL]) <= 1
    assert all(r.image_ref.count("/warp=") == 1 for r in test.records)
    assert not any("/warp=" in r.image_ref for r in train.records)


def test_prepare_rerun_is_byte_identical(tmp_path):
    cfg = write_cfg(tmp_path)
    assert cli.main(["--config", cfg, "prepare"]) == 0
    files = ["data/train.tsv", "data/val.tsv", "data/test.tsv",
             "data/summary.txt", "config.json"]
    first = {f: (run_dir_of(tmp_path) / f).read_bytes() for f in files}
    assert cli.main(["--config", cfg, "prepare"]) == 0
    for f in files:
        assert (run_dir_of(tmp_path) / f).read_bytes() == first[f]


def test_prepare_seed_changes_the_split(tmp_path):
    cfg = write_cfg(tmp_path)
    assert cli.main(["--config", cfg, "--seed", "1", "prepare"]) == 0
    one = (run_dir_of(tmp_path) / "data" / "train.tsv").read_bytes()
    assert cli.main(["--config", cfg, "--seed", "2", "prepare"]) == 0
    two = (run_dir_of(tmp_path) / "data" / "train.tsv").read_bytes()
    assert one != two


def test_prepare_from_manifest_files(tmp_path):
    root = tmp_path / "imgs"
    root.mkdir()
    rng = np.random.default_rng(0)
    lines = []
    for i in range(12):
        name = f"img{i}.png"
        aug.save_png(aug.ImageBuffer(rng.random((8, 8, 3), dtype=np.float32)),
                     root / name)
        lines.append(f"{name}\t{'fake' if i % 3 == 0 else 'real'}")
    src = tmp_path / "src.tsv"
    src.write_text("\n".join(lines) + "\n")
    doc = {
        "output_dir": str(tmp_path / "run"),
        "data": {"manifest": str(src), "root": str(root),
                 "train_fraction": 0.75, "val_fraction": 0.25},
    }
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps(doc))
    assert cli.main(["--config", str(cfg), "prepare"]) == 0
    test = datamod.load_manifest(tmp_path / "run" / "data" / "test.tsv")
    counts = test.class_counts()
    # 4/8 oversampled to 8/8, split 0.75 -> 12 train / 4 test
    assert counts == {datamod.LABEL_FAKE: 2, datamod.LABEL_REAL: 2}
    assert not any("/warp=" in r.image_ref for r in test.records)


def test_prepare_without_source_fails(tmp_path):
    doc = {"output_dir": str(tmp_path / "run"),
           "data": {"synthetic": None}}
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps(doc))
    assert cli.main(["--config", str(cfg), "prepare"]) == 2


# ---------------------------------------------------------------------------
# train


def prepared_cfg(tmp_path, **kw):
    cfg = write_cfg(tmp_path, **kw)
    assert cli.main(["--config", cfg, "prepare"]) == 0
    return cfg


def test_train_stage1_writes_artifacts(tmp_path, capsys):
    cfg = prepared_cfg(tmp_path)
    assert cli.main(["--config", cfg, "train", "--stage", "1"]) == 0
    out = capsys.readouterr().out
    assert "train_loss" in out and "test metrics" in out
    stage_dir = run_dir_of(tmp_path) / "train" / "stage1"
    logs = [json.loads(l) for l in
            (stage_dir / "epochs.jsonl").read_text().splitlines()]
    assert [e["epoch"] for e in logs] == [1, 2]
    assert (stage_dir / "best.ckpt").exists()
    assert (stage_dir / "last.ckpt").exists()
    rep = metrics.read_report(run_dir_of(tmp_path) / "reports" /
                              "stage1_report.txt")
    assert 0.0 <= rep.auroc <= 1.0 and np.isfinite(rep.loss)


def test_train_both_writes_both_stages(tmp_path, capsys):
    cfg = prepared_cfg(tmp_path)
    assert cli.main(["--config", cfg, "train", "--stage", "both"]) == 0
    out = capsys.readouterr().out
    assert "Stage-II" in out
    run = run_dir_of(tmp_path)
    assert (run / "train" / "stage1" / "best.ckpt").exists()
    assert (run / "train" / "stage2" / "best.ckpt").exists()
    s2_logs = (run / "train" / "stage2" / "epochs.jsonl").read_text()
    assert len(s2_logs.splitlines()) == 1
    metrics.read_report(run / "reports" / "stage2_report.txt")


def test_train_unprepared_fails(tmp_path):
    cfg = write_cfg(tmp_path)
    assert cli.main(["--config", cfg, "train"]) == 2


def test_train_stage2_needs_resume(tmp_path):
    cfg = prepared_cfg(tmp_path)
    assert cli.main(["--config", cfg, "train", "--stage", "2"]) == 2


def test_train_both_rejects_resume(tmp_path):
    cfg = prepared_cfg(tmp_path)
    assert cli.main(["--config", cfg, "train", "--stage", "both",
                     "--resume", "x"]) == 2


def test_train_stage2_resumes_stage1_best(tmp_path):
    cfg = prepared_cfg(tmp_path)
    assert cli.main(["--config", cfg, "train", "--stage", "1"]) == 0
    run = run_dir_of(tmp_path)
    s1_dir = run / "train" / "stage1"
    assert cli.main(["--config", cfg, "train", "--stage", "2",
                     "--resume", str(s1_dir)]) == 0
    best1 = ckpt.load_checkpoint(s1_dir / "best.ckpt")
    last2 = ckpt.load_checkpoint(run / "train" / "stage2" / "last.ckpt")
    assert last2.stage == "stage2" and last2.epoch == 1
    assert best1.stage == "stage1"
    assert last2.config == best1.config


def test_train_resume_matches_uninterrupted(tmp_path):
    # one 3-epoch run vs a 1-epoch run continued for two more
    full_cfg = prepared_cfg(tmp_path, name="full.json", out="full", epochs=3)
    assert cli.main(["--config", full_cfg, "train", "--stage", "1"]) == 0
    short_cfg = prepared_cfg(tmp_path, name="short.json", out="part", epochs=1)
    assert cli.main(["--config", short_cfg, "train", "--stage", "1"]) == 0
    part_stage = run_dir_of(tmp_path, "part") / "train" / "stage1"
    resume_cfg = write_cfg(tmp_path, name="resume.json", out="part", epochs=3)
    assert cli.main(["--config", resume_cfg, "train", "--stage", "1",
                     "--resume", str(part_stage)]) == 0
    full_stage = run_dir_of(tmp_path, "full") / "train" / "stage1"
    for f in ("epochs.jsonl", "best.ckpt", "last.ckpt"):
        assert (part_stage / f).read_bytes() == (full_stage / f).read_bytes()


def test_train_rerun_is_bitwise_identical(tmp_path):
    cfg = prepared_cfg(tmp_path)
    files = ["train/stage1/epochs.jsonl", "train/stage1/best.ckpt",
             "train/stage1/last.ckpt", "reports/stage1_report.txt",
             "reports/stage1_roc.csv"]
    assert cli.main(["--config", cfg, "train", "--stage", "1"]) == 0
    first = {f: (run_dir_of(tmp_path) / f).read_bytes() for f in files}
    assert cli.main(["--config", cfg, "train", "--stage", "1"]) == 0
    for f in files:
        assert (run_dir_of(tmp_path) / f).read_bytes() == first[f]


def test_dump_augment_writes_step_images(tmp_path):
    cfg = prepared_cfg(tmp_path)
    dump = tmp_path / "steps"
    assert cli.main(["--config", cfg, "train", "--stage", "1",
                     "--dump-augment", str(dump)]) == 0
    stage1 = sorted(p.name for p in (dump / "stage1").iterdir())
    assert stage1[0] == "00_input.png"
    assert any("resize" in n for n in stage1)
    stage2 = sorted(p.name for p in (dump / "stage2").iterdir())
    assert any("elastic" in n for n in stage2)
    assert any("perspective" in n for n in stage2)
    img = aug.load_png(dump / "stage1" / "00_input.png")
    assert img.data.shape == (32, 32, 3)


# ---------------------------------------------------------------------------
# eval / infer


def trained_run(tmp_path, **kw):
    cfg = prepared_cfg(tmp_path, **kw)
    assert cli.main(["--config", cfg, "train", "--stage", "1"]) == 0
    run = run_dir_of(tmp_path, kw.get("out", "run"))
    return cfg, run


def test_eval_twice_is_identical(tmp_path, capsys):
    cfg, run = trained_run(tmp_path)
    best = str(run / "train" / "stage1" / "best.ckpt")
    test_tsv = str(run / "data" / "test.tsv")
    capsys.readouterr()  # drop setup output
    assert cli.main(["--config", cfg, "eval", best, test_tsv]) == 0
    out1 = capsys.readouterr().out
    rep1 = (run / "reports" / "eval_report.txt").read_bytes()
    assert cli.main(["--config", cfg, "eval", best, test_tsv]) == 0
    assert capsys.readouterr().out == out1
    assert (run / "reports" / "eval_report.txt").read_bytes() == rep1
    assert (run / "reports" / "eval_roc.csv").read_text().startswith("fpr,tpr")


def test_eval_matches_stage_report(tmp_path):
    cfg, run = trained_run(tmp_path)
    best = str(run / "train" / "stage1" / "best.ckpt")
    assert cli.main(["--config", cfg, "eval", best,
                     str(run / "data" / "test.tsv")]) == 0
    got = metrics.read_report(run / "reports" / "eval_report.txt")
    want = metrics.read_report(run / "reports" / "stage1_report.txt")
    assert got == want


def test_eval_corrupt_checkpoint_exits_3(tmp_path):
    cfg, run = trained_run(tmp_path)
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"not a checkpoint")
    assert cli.main(["--config", cfg, "eval", str(bad),
                     str(run / "data" / "test.tsv")]) == 3


def test_eval_missing_inputs_exit_2(tmp_path):
    cfg, run = trained_run(tmp_path)
    best = str(run / "train" / "stage1" / "best.ckpt")
    assert cli.main(["--config", cfg, "eval", "missing.ckpt",
                     str(run / "data" / "test.tsv")]) == 2
    assert cli.main(["--config", cfg, "eval", best, "missing.tsv"]) == 2


def test_infer_overfit_set_recovers_labels(tmp_path, capsys):
    # enough epochs to pin the training set, then infer on train refs;
    # last.ckpt is the overfit endpoint (best.ckpt can be an early epoch
    # because validation saturates immediately at this scale)
    cfg, run = trained_run(tmp_path, epochs=8)
    best = str(run / "train" / "stage1" / "last.ckpt")
    train = datamod.load_manifest(run / "data" / "train.tsv")
    by_label = {r.label: r.image_ref for r in train.records}
    fake_ref = by_label[datamod.LABEL_FAKE]
    real_ref = by_label[datamod.LABEL_REAL]
    capsys.readouterr()  # drop setup output
    assert cli.main(["--config", cfg, "infer", best, fake_ref, real_ref,
                     fake_ref]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert len(lines) == 3
    rows = [line.split("\t") for line in lines]
    assert rows[0][0] == fake_ref and rows[0][1] == "fake"
    assert float(rows[0][2]) > 0.9
    assert rows[1][1] == "real" and float(rows[1][2]) < 0.1
    assert rows[0] == rows[2]  # same image twice -> identical output


def test_infer_partial_and_total_failure(tmp_path, capsys):
    cfg, run = trained_run(tmp_path)
    best = str(run / "train" / "stage1" / "best.ckpt")
    train = datamod.load_manifest(run / "data" / "train.tsv")
    good = train.records[0].image_ref
    capsys.readouterr()  # drop setup output
    assert cli.main(["--config", cfg, "infer", best, good, "nope.png"]) == 0
    captured = capsys.readouterr()
    assert "nope.png" in captured.err
    assert len(captured.out.splitlines()) == 1
    assert cli.main(["--config", cfg, "infer", best, "a.png", "b.png"]) == 1


def test_infer_without_images_is_usage_error(tmp_path):
    cfg = write_cfg(tmp_path)
    with pytest.raises(SystemExit) as exc:
        cli.main(["--config", cfg, "infer", "model.ckpt"])
    assert exc.value.code == 2


# ---------------------------------------------------------------------------
# ablate / report


def test_ablate_three_rows_and_bitwise_rerun(tmp_path, capsys):
    cfg = write_cfg(tmp_path)  # unprepared: ablate prepares on its own
    assert cli.main(["--config", cfg, "ablate"]) == 0
    out = capsys.readouterr().out
    run = run_dir_of(tmp_path)
    table = (run / "ablation" / "ablation.txt").read_bytes()
    # the auto-prepare summary precedes the table on stdout
    lines = out.splitlines()
    lines = lines[next(i for i, l in enumerate(lines) if l.startswith("Case")):]
    assert lines[0].split() == ["Case", "Epochs", "Affine", "Accuracy%",
                                "F1", "Macro", "AUC-ROC"]
    assert [l.split()[0] for l in lines[1:4]] == ["T1", "T2", "T3"]
    assert lines[1].split()[1:3] == ["2", "no"]
    assert lines[2].split()[1:3] == ["3", "no"]
    assert lines[3].split()[1:3] == ["3", "yes"]
    for case in ("base", "t2", "t3"):
        assert (run / "ablation" / case / "best.ckpt").exists()
    assert cli.main(["--config", cfg, "ablate"]) == 0
    assert (run / "ablation" / "ablation.txt").read_bytes() == table


def test_report_renders_stored_artifacts(tmp_path, capsys):
    cfg = prepared_cfg(tmp_path)
    assert cli.main(["--config", cfg, "train", "--stage", "both"]) == 0
    capsys.readouterr()
    # no --config: the stored config.json names the run
    assert cli.main(["--output-dir", str(run_dir_of(tmp_path)),
                     "report"]) == 0
    out = capsys.readouterr().out
    assert "data summary" in out
    assert "stage1 epochs" in out
    assert "stage2 epochs" in out
    assert "Stage-II" in out


def test_report_on_empty_directory_fails(tmp_path):
    assert cli.main(["--preset", "desk", "--output-dir",
                     str(tmp_path / "nothing"), "report"]) == 2


# ---------------------------------------------------------------------------
# entry point


def test_console_script_smoke(tmp_path):
    cfg = write_cfg(tmp_path)
    proc = subprocess.run(
        [sys.executable, "-m", "fakefinder.cli", "--config", cfg, "prepare"],
        capture_output=True, text=True)
    assert proc.returncode == 0
    assert "data summary" in proc.stdout
    assert (run_dir_of(tmp_path) / "data" / "train.tsv").exists()
