"""Command-line entry point.

Subcommands cover the whole pipeline: `prepare` builds balanced
train/val/test manifests, `train` runs the one- or two-stage schedule,
`eval` scores a checkpoint on a manifest, `infer` classifies single
images, `ablate` runs the three-recipe comparison, and `report` renders
whatever artifacts a run directory holds.

Artifact layout under --output-dir:

    config.json            resolved run configuration
    data/{train,val,test}.tsv, data/summary.txt
    train/stage1/          epochs.jsonl, best.ckpt, last.ckpt
    train/stage2/
    reports/               per-stage and eval reports plus ROC CSVs
    ablation/              per-recipe runs and ablation.txt

Exit codes: 0 success, 1 runtime failure, 2 input or validation error,
3 checkpoint/config compatibility error. Every command is a pure
function of (config, seed): reruns produce byte-identical artifacts.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from . import augment as aug
from . import checkpoint as ckpt
from . import config as cfgmod
from . import data as datamod
from . import metrics
from . import train as trainmod
from . import vit
from .errors import (
    CompatibilityError,
    ContractError,
    NumericsError,
    ShapeError,
    ValidationError,
)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fakefinder",
        description="Train and run a real/fake image classifier built on a "
                    "small vision transformer with a staged augmentation "
                    "curriculum.",
    )
    _add_global_args(parser)
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("prepare", help="build balanced train/val/test manifests")
    _add_global_args(p, suppress=True)

    p = sub.add_parser("train", help="run the training schedule")
    _add_global_args(p, suppress=True)
    p.add_argument("--stage", choices=("1", "2", "both"), default="both",
                   help="which stage(s) to run (default: both)")
    p.add_argument("--resume", metavar="PATH",
                   help="checkpoint file or stage run directory to resume "
                       "from (required for --stage 2)")
    p.add_argument("--dump-augment", metavar="DIR",
                   help="write each augmentation step of the first training "
                        "sample as PNG files under DIR")

    p = sub.add_parser("eval", help="score a checkpoint on a manifest")
    _add_global_args(p, suppress=True)
    p.add_argument("checkpoint", help="checkpoint file")
    p.add_argument("manifest", help="manifest to evaluate")
    p.add_argument("--root", help="directory image refs are relative to")
    p.add_argument("--batch-size", type=int, default=64)

    p = sub.add_parser("infer", help="classify individual images")
    _add_global_args(p, suppress=True)
    p.add_argument("checkpoint", help="checkpoint file")
    p.add_argument("images", nargs="+", help="image files or synth:// refs")
    p.add_argument("--root", help="directory image paths are relative to")

    p = sub.add_parser("ablate", help="run the three-recipe comparison")
    _add_global_args(p, suppress=True)

    p = sub.add_parser("report", help="render stored run artifacts")
    _add_global_args(p, suppress=True)
    return parser


def _add_global_args(parser, suppress: bool = False) -> None:
    # registered on the root parser and again on every subparser so the
    # flags work in either position; SUPPRESS keeps a subparser default
    # from clobbering a value parsed at the root
    d = argparse.SUPPRESS if suppress else None
    parser.add_argument("--config", default=d, metavar="FILE",
                        help="JSON run config, merged over the preset")
    parser.add_argument("--preset", default=d, choices=sorted(cfgmod.PRESETS),
                        help="base configuration (default: desk)")
    parser.add_argument("--seed", default=d, type=int,
                        help="run seed; all component seeds derive from it")
    parser.add_argument("--output-dir", default=d, metavar="DIR",
                        help="artifact directory (default: from config)")
    parser.add_argument("--threads", default=d, type=int,
                        help="augmentation worker threads (default: serial)")


def _load_run_config(args) -> cfgmod.RunConfig:
    """Preset <- config file <- flags, then seed resolution.

    Without --config/--preset, a config.json already present in the
    output directory is picked up, so follow-up commands reuse exactly
    what prepare resolved.
    """
    preset = args.preset or "desk"
    path = args.config
    if path is None and args.preset is None:
        candidate_dir = args.output_dir or cfgmod.PRESETS[preset]().output_dir
        candidate = os.path.join(candidate_dir, "config.json")
        if os.path.exists(candidate):
            path = candidate
    if path is not None:
        try:
            cfg = cfgmod.load_config(path, preset)
        except OSError as exc:
            raise ValidationError(f"cannot read config {path}: {exc}") from exc
    else:
        cfg = cfgmod.PRESETS[preset]()
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    if args.output_dir is not None:
        cfg = dataclasses.replace(cfg, output_dir=args.output_dir)
    return cfgmod.resolve_seeds(cfg)


# ---------------------------------------------------------------------------
# prepare


def _data_dir(cfg) -> str:
    return os.path.join(cfg.output_dir, "data")


def _source_manifest(cfg) -> datamod.SampleManifest:
    d = cfg.data
    if d.synthetic is not None:
        return datamod.make_synthetic_manifest(d.synthetic)
    if d.manifest is not None:
        try:
            return datamod.load_manifest(d.manifest, root=d.root)
        except OSError as exc:
            raise ValidationError(f"cannot read manifest {d.manifest}: {exc}") from exc
    raise ValidationError("config has no data source: set data.synthetic or "
                          "data.manifest")


def _split_counts(m: datamod.SampleManifest) -> str:
    c = m.class_counts()
    return f"{len(m):>6}  fake={c[datamod.LABEL_FAKE]}  real={c[datamod.LABEL_REAL]}"


def prepare_splits(cfg) -> tuple[datamod.DatasetSplits, str]:
    """Balance, split, carve validation, optionally warp the test refs.
    Returns the splits plus the provenance summary text."""
    d = cfg.data
    source = _source_manifest(cfg)
    ds = cfgmod.derive_seed(cfg.seed, cfgmod.SEED_DATA)
    balance_rng = aug.RngStream([ds, 0])
    split_rng = aug.RngStream([ds, 1])
    val_rng = aug.RngStream([ds, 2])

    if d.split_first:
        train, test = datamod.stratified_split(source, d.train_fraction, split_rng)
        if d.balance:
            train = datamod.oversample_balance(train, balance_rng)
    else:
        pool = datamod.oversample_balance(source, balance_rng) if d.balance else source
        train, test = datamod.stratified_split(pool, d.train_fraction, split_rng)
    train, val = datamod.stratified_split(train, 1.0 - d.val_fraction, val_rng)

    warped = False
    if d.synthetic is not None and d.synthetic.warp_test:
        test = datamod.warp_test_manifest(
            test, d.synthetic, cfgmod.derive_seed(cfg.seed, cfgmod.SEED_WARP))
        warped = True

    if d.synthetic is not None:
        s = d.synthetic
        src_line = (f"source: synthetic corpus seed={s.seed} "
                    f"({s.n_real} real, {s.n_fake} fake, {s.image_size} px)")
    else:
        src_line = f"source: manifest {d.manifest} (root {d.root or '.'})"
    order = "split then balance train" if d.split_first else "balance then split"
    summary = "\n".join([
        "data summary",
        src_line,
        f"balance: {order if d.balance else 'off'}",
        f"train_fraction: {d.train_fraction:g}  val_fraction: {d.val_fraction:g}",
        f"test warp: {'perspective+elastic baked into test refs' if warped else 'off'}",
        f"train: {_split_counts(train)}",
        f"val:   {_split_counts(val)}",
        f"test:  {_split_counts(test)}",
    ]) + "\n"
    splits = datamod.DatasetSplits(train=train, val=val, test=test, root=d.root)
    return splits, summary


def cmd_prepare(cfg) -> int:
    data_dir = _data_dir(cfg)
    os.makedirs(data_dir, exist_ok=True)
    splits, summary = prepare_splits(cfg)
    datamod.write_manifest(splits.train, os.path.join(data_dir, "train.tsv"))
    datamod.write_manifest(splits.val, os.path.join(data_dir, "val.tsv"))
    datamod.write_manifest(splits.test, os.path.join(data_dir, "test.tsv"))
    with open(os.path.join(data_dir, "summary.txt"), "w", encoding="utf-8") as fh:
        fh.write(summary)
    with open(os.path.join(cfg.output_dir, "config.json"), "w",
              encoding="utf-8") as fh:
        fh.write(cfgmod.dump_config(cfg))
    print(summary, end="")
    print(f"wrote manifests under {data_dir}")
    return 0


def _load_splits(cfg) -> datamod.DatasetSplits:
    data_dir = _data_dir(cfg)
    paths = {k: os.path.join(data_dir, f"{k}.tsv") for k in ("train", "val", "test")}
    missing = [p for p in paths.values() if not os.path.exists(p)]
    if missing:
        raise ValidationError(
            f"missing manifest {missing[0]}; run `fakefinder prepare` first")
    return datamod.DatasetSplits(
        train=datamod.load_manifest(paths["train"], root=cfg.data.root),
        val=datamod.load_manifest(paths["val"], root=cfg.data.root),
        test=datamod.load_manifest(paths["test"], root=cfg.data.root),
        root=cfg.data.root,
    )


def _load_or_prepare_splits(cfg) -> datamod.DatasetSplits:
    data_dir = _data_dir(cfg)
    if not os.path.exists(os.path.join(data_dir, "train.tsv")):
        cmd_prepare(cfg)
    return _load_splits(cfg)


# ---------------------------------------------------------------------------
# train


def _load_ckpt(path) -> ckpt.Checkpoint:
    if not os.path.exists(path):
        raise ValidationError(f"checkpoint not found: {path}")
    return ckpt.load_checkpoint(path)


def _load_resume(path) -> tuple[ckpt.Checkpoint, ckpt.Checkpoint | None]:
    """A stage run directory yields (last, best); a file yields (it, None)."""
    if os.path.isdir(path):
        last = _load_ckpt(os.path.join(path, "last.ckpt"))
        best_path = os.path.join(path, "best.ckpt")
        best = ckpt.load_checkpoint(best_path) if os.path.exists(best_path) else None
        return last, best
    return _load_ckpt(path), None


def _render_report(title: str, rep: metrics.MetricsReport) -> str:
    c = rep.confusion
    return "\n".join([
        title,
        f"  loss:      {rep.loss:.5f}",
        f"  accuracy:  {rep.accuracy:.5f}",
        f"  f1_macro:  {rep.f1_macro:.5f}",
        f"  auroc:     {rep.auroc:.5f}",
        f"  confusion: tp={c.tp} fp={c.fp} tn={c.tn} fn={c.fn}",
    ])


def _render_epochs(logs) -> str:
    head = (f"{'epoch':>5} {'train_loss':>10} {'val_loss':>10} "
            f"{'accuracy':>9} {'f1_macro':>9} {'auroc':>8}")
    rows = [head]
    for e in logs:
        d = e if isinstance(e, dict) else e.to_dict()
        rows.append(
            f"{d['epoch']:>5} {d['train_loss']:>10.5f} {d['val_loss']:>10.5f} "
            f"{d['accuracy']:>9.5f} {d['f1_macro']:>9.5f} {d['auroc']:>8.5f}")
    return "\n".join(rows)


def _eval_spec(cfg_augment: aug.AugmentSpec, model_cfg: vit.ModelConfig):
    # evaluation always resizes to whatever the checkpoint was built for
    return dataclasses.replace(cfg_augment, resize_to=model_cfg.image_size)


def _write_stage_report(cfg, name: str, rep: metrics.MetricsReport | None) -> None:
    if rep is None:
        return
    reports = os.path.join(cfg.output_dir, "reports")
    os.makedirs(reports, exist_ok=True)
    metrics.emit_report(rep, os.path.join(reports, f"{name}_report.txt"),
                        roc_csv_path=os.path.join(reports, f"{name}_roc.csv"))


def _test_report(cfg, best: ckpt.Checkpoint, splits,
                 stage_cfg: trainmod.StageConfig,
                 threads) -> metrics.MetricsReport | None:
    if splits.test is None:
        return None
    model = ckpt.build_model(best)
    pipe = aug.build_eval_pipeline(_eval_spec(stage_cfg.augment, best.config))
    return trainmod.evaluate(model, splits.test, pipe, root=splits.root,
                             batch_size=stage_cfg.batch_size, threads=threads)


def _dump_augment_steps(cfg, splits, dump_dir: str) -> None:
    rec = splits.train.records[0]
    img = datamod.load_image(rec.image_ref, splits.root)
    stages = [("stage1", cfg.stage1)]
    if cfg.stage2 is not None:
        stages.append(("stage2", cfg.stage2))
    for name, stage_cfg in stages:
        steps = aug.build_pipeline(stage_cfg.pipeline, stage_cfg.augment)
        out = os.path.join(dump_dir, name)
        os.makedirs(out, exist_ok=True)
        rng = aug.RngStream.for_sample(stage_cfg.seed, 1, 0)
        aug.run_pipeline(img, steps, rng, dump_dir=out)
    print(f"wrote augmentation step images under {dump_dir}")


def cmd_train(cfg, stage: str, resume: str | None, threads: int | None,
              dump_augment: str | None) -> int:
    splits = _load_splits(cfg)
    if dump_augment:
        _dump_augment_steps(cfg, splits, dump_augment)
    train_dir = os.path.join(cfg.output_dir, "train")
    model = vit.DeitModel(cfg.model,
                          seed=cfgmod.derive_seed(cfg.seed, cfgmod.SEED_MODEL))

    if stage == "both":
        if resume is not None:
            raise ValidationError(
                "--resume works with --stage 1 or --stage 2; rerun the "
                "interrupted stage, then continue with --stage 2")
        result = trainmod.run_two_stage(model, splits, cfg.stage1, cfg.stage2,
                                        run_dir=train_dir, threads=threads)
        print(_render_epochs(result.stage1_logs))
        _write_stage_report(cfg, "stage1", result.stage1_report)
        if result.stage2_checkpoint is not None:
            print(_render_epochs(result.stage2_logs))
            _write_stage_report(cfg, "stage2", result.stage2_report)
        if result.stage1_report and result.stage2_report:
            print(metrics.render_stage_comparison(result.stage1_report,
                                                  result.stage2_report))
        elif result.stage1_report:
            print(_render_report("test metrics", result.stage1_report))
        return 0

    if stage == "1":
        last = best_prev = None
        if resume is not None:
            last, best_prev = _load_resume(resume)
        best, logs = trainmod.run_stage(
            model, splits, cfg.stage1, last, resume_best=best_prev,
            stage_name="stage1", run_dir=os.path.join(train_dir, "stage1"),
            threads=threads)
        rep = _test_report(cfg, best, splits, cfg.stage1, threads)
        name = "stage1"
    else:
        if resume is None:
            raise ValidationError("--stage 2 needs --resume pointing at a "
                                  "stage-1 checkpoint or run directory")
        if cfg.stage2 is None:
            raise ValidationError("config disables stage2 (stage2: null)")
        last, best_prev = _load_resume(resume)
        if last.stage != "stage2":
            # fresh stage 2 seeded from a stage-1 run: its best checkpoint
            # when a directory was given, otherwise the file itself
            start, best_prev = (best_prev or last), None
        else:
            start = last  # continue an interrupted stage-2 run
        best, logs = trainmod.run_stage(
            model, splits, cfg.stage2, start, resume_best=best_prev,
            stage_name="stage2", run_dir=os.path.join(train_dir, "stage2"),
            threads=threads)
        rep = _test_report(cfg, best, splits, cfg.stage2, threads)
        name = "stage2"

    print(_render_epochs(logs))
    _write_stage_report(cfg, name, rep)
    if rep is not None:
        print(_render_report("test metrics", rep))
    return 0


# ---------------------------------------------------------------------------
# eval / infer


def cmd_eval(cfg, args) -> int:
    ck = _load_ckpt(args.checkpoint)
    model = vit.DeitModel(ck.config, seed=0)
    ckpt.restore_into(model, ck)
    try:
        manifest = datamod.load_manifest(args.manifest, root=args.root)
    except OSError as exc:
        raise ValidationError(f"cannot read manifest {args.manifest}: {exc}") from exc
    pipe = aug.build_eval_pipeline(_eval_spec(cfg.stage1.augment, ck.config))
    rep = trainmod.evaluate(model, manifest, pipe, root=args.root,
                            batch_size=args.batch_size, threads=args.threads)
    reports = os.path.join(cfg.output_dir, "reports")
    os.makedirs(reports, exist_ok=True)
    metrics.emit_report(rep, os.path.join(reports, "eval_report.txt"),
                        roc_csv_path=os.path.join(reports, "eval_roc.csv"))
    print(_render_report(f"eval {args.manifest}", rep))
    return 0


def cmd_infer(cfg, args) -> int:
    ck = _load_ckpt(args.checkpoint)
    model = vit.DeitModel(ck.config, seed=0)
    ckpt.restore_into(model, ck)
    pipe = aug.build_eval_pipeline(_eval_spec(cfg.stage1.augment, ck.config))
    failures = 0
    for ref in args.images:
        try:
            img = datamod.load_image(ref, args.root)
            x = aug.run_pipeline(img, pipe, None)
            arr = x.data if hasattr(x, "data") else np.asarray(x)
            # single-sample batch and the same log-softmax as evaluate,
            # so infer and eval assign one image identical probabilities
            logits = model.forward(arr[None]).data[0].astype(np.float64)
            shifted = logits - logits.max()
            logp = shifted - np.log(np.exp(shifted).sum())
            p_fake = float(np.exp(logp[metrics.LABEL_FAKE]))
            label = "fake" if p_fake >= 0.5 else "real"
            print(f"{ref}\t{label}\t{p_fake:.6f}")
        except Exception as exc:  # noqa: BLE001  per-file isolation
            failures += 1
            print(f"fakefinder: error: {ref}: {exc}", file=sys.stderr)
    return 1 if failures == len(args.images) else 0


# ---------------------------------------------------------------------------
# ablate / report


def cmd_ablate(cfg, threads: int | None) -> int:
    if cfg.stage2 is None:
        raise ValidationError("ablation needs a stage2 recipe in the config")
    splits = _load_or_prepare_splits(cfg)
    extra_seed = cfg.stage2.seed
    recipes = trainmod.AblationRecipes(
        # fixed-epoch recipes: early stopping would blur the epoch counts
        base=dataclasses.replace(cfg.stage1, early_stopping=None),
        t2_extra=dataclasses.replace(cfg.stage1, epochs=1,
                                     early_stopping=None, seed=extra_seed),
        t3_extra=dataclasses.replace(cfg.stage2, epochs=1,
                                     early_stopping=None, seed=extra_seed),
    )
    result = trainmod.run_ablation(
        splits, recipes, model_config=cfg.model,
        model_seed=cfgmod.derive_seed(cfg.seed, cfgmod.SEED_MODEL),
        run_dir=os.path.join(cfg.output_dir, "ablation"), threads=threads)
    print(result.render())
    return 0


def cmd_report(cfg) -> int:
    out = cfg.output_dir
    sections: list[str] = []

    summary_path = os.path.join(out, "data", "summary.txt")
    if os.path.exists(summary_path):
        with open(summary_path, encoding="utf-8") as fh:
            sections.append(fh.read().rstrip("\n"))

    for stage in ("stage1", "stage2"):
        log_path = os.path.join(out, "train", stage, "epochs.jsonl")
        if os.path.exists(log_path):
            with open(log_path, encoding="utf-8") as fh:
                logs = [json.loads(line) for line in fh if line.strip()]
            sections.append(f"{stage} epochs\n" + _render_epochs(logs))

    reps = {}
    for name in ("stage1", "stage2", "eval"):
        path = os.path.join(out, "reports", f"{name}_report.txt")
        if os.path.exists(path):
            reps[name] = metrics.read_report(path)
            sections.append(_render_report(f"{name} test metrics", reps[name]))
    if "stage1" in reps and "stage2" in reps:
        sections.append(metrics.render_stage_comparison(reps["stage1"],
                                                        reps["stage2"]))

    ablation_path = os.path.join(out, "ablation", "ablation.txt")
    if os.path.exists(ablation_path):
        with open(ablation_path, encoding="utf-8") as fh:
            sections.append(fh.read().rstrip("\n"))

    if not sections:
        raise ValidationError(f"no run artifacts under {out}")
    print("\n\n".join(sections))
    return 0


# ---------------------------------------------------------------------------
# entry point


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = _load_run_config(args)
        if args.command == "prepare":
            return cmd_prepare(cfg)
        if args.command == "train":
            return cmd_train(cfg, args.stage, args.resume, args.threads,
                             args.dump_augment)
        if args.command == "eval":
            return cmd_eval(cfg, args)
        if args.command == "infer":
            return cmd_infer(cfg, args)
        if args.command == "ablate":
            return cmd_ablate(cfg, args.threads)
        return cmd_report(cfg)
    except (ValidationError, ContractError) as exc:
        print(f"fakefinder: error: {exc}", file=sys.stderr)
        return 2
    except (CompatibilityError, ShapeError) as exc:
        print(f"fakefinder: error: {exc}", file=sys.stderr)
        return 3
    except (NumericsError, OSError) as exc:
        print(f"fakefinder: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
