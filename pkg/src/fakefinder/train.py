"""Loss, optimizer, the epoch loop, early stopping, and the two-stage
curriculum with its T1/T2/T3 ablation protocol.

A stage run is a pure function of (seed, config, data): sample-level
augmentation streams are keyed by (stage seed, epoch, manifest position)
and batch order by (stage seed, epoch), so an interrupted run resumed
from its last checkpoint replays the remaining epochs bit-identically.
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, asdict

import numpy as np

from . import augment as aug
from . import checkpoint as ckpt
from . import data as datamod
from . import metrics
from . import tensor as T
from . import vit
from .errors import (CompatibilityError, ContractError, NumericsError,
                     ShapeError, ValidationError)
from .tensor import Tensor


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class EarlyStoppingConfig:
    """Stop when the validation metric has not improved for `patience`
    consecutive epochs. Only max-mode AUROC is meaningful here."""

    metric: str = "auroc"
    patience: int = 2
    mode: str = "max"

    def __post_init__(self):
        if self.metric != "auroc":
            raise ValidationError(f"unsupported early-stopping metric {self.metric!r}")
        if self.mode != "max":
            raise ValidationError(f"unsupported early-stopping mode {self.mode!r}")
        if self.patience < 1:
            raise ValidationError("patience must be >= 1")


@dataclass(frozen=True)
class StageConfig:
    epochs: int = 5
    batch_size: int = 128
    learning_rate: float = 2e-5
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    pipeline: str = "stage1"
    augment: aug.AugmentSpec = aug.AugmentSpec()
    freeze: vit.FreezeSpec | None = None
    early_stopping: EarlyStoppingConfig | None = EarlyStoppingConfig()
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValidationError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1")
        if self.learning_rate < 0:
            raise ValidationError("learning_rate must be >= 0")
        if self.weight_decay < 0:
            raise ValidationError("weight_decay must be >= 0")
        b1, b2 = self.betas
        if not (0.0 <= b1 < 1.0 and 0.0 <= b2 < 1.0):
            raise ValidationError("betas must lie in [0, 1)")
        if self.eps <= 0:
            raise ValidationError("eps must be > 0")
        if self.pipeline not in ("stage1", "stage2"):
            raise ValidationError(f"pipeline must be stage1 or stage2, "
                                  f"got {self.pipeline!r}")
        if self.pipeline == "stage2":
            a = self.augment
            if a.color_jitter is None or a.perspective is None or a.elastic is None:
                raise ValidationError(
                    "stage2 config needs color_jitter, perspective and elastic specs"
                )


@dataclass
class EpochLog:
    """One row of training history; core metrics are on the validation
    split, the optional test_* twins come from an extra test-split pass."""

    epoch: int
    train_loss: float
    val_loss: float
    accuracy: float
    f1_macro: float
    auroc: float
    test_loss: float | None = None
    test_accuracy: float | None = None
    test_f1_macro: float | None = None
    test_auroc: float | None = None

    def __post_init__(self):
        if self.epoch < 1:
            raise ValidationError("epoch must be >= 1")
        for name, value in asdict(self).items():
            if name == "epoch" or value is None:
                continue
            if not np.isfinite(value):
                raise ValidationError(f"EpochLog.{name} is not finite: {value}")

    def to_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}


# ---------------------------------------------------------------------------
# loss


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean softmax cross-entropy in the fused log-softmax form."""
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects (B, C) logits, got {logits.shape}")
    y = np.asarray(labels)
    if y.ndim != 1 or y.shape[0] != logits.shape[0]:
        raise ShapeError(
            f"labels shape {y.shape} does not match batch of {logits.shape[0]}"
        )
    if y.size == 0:
        raise ShapeError("cross_entropy needs a non-empty batch")
    if not np.issubdtype(y.dtype, np.integer):
        raise ContractError(f"labels must be integers, got dtype {y.dtype}")
    n, c = logits.shape
    if y.min() < 0 or y.max() >= c:
        raise ContractError(f"labels must lie in [0, {c}), got {sorted(set(y.tolist()))}")

    z = logits.data
    shifted = z - z.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    val = -np.mean(logp[np.arange(n), y], dtype=np.float64)
    out = np.asarray(val, dtype=z.dtype)

    def bwd(g):
        if not logits.requires_grad:
            return (None,)
        gz = np.exp(logp)
        gz[np.arange(n), y] -= 1.0
        gz *= g / n
        return (gz.astype(z.dtype, copy=False),)

    return T.apply_op(out, (logits,), bwd, "cross_entropy")


# ---------------------------------------------------------------------------
# optimizer


class OptimizerState:
    """AdamW moments for every parameter plus the shared step counter.

    Frozen parameters keep (zero) buffers so shapes always match the
    model; they are skipped at update time.
    """

    def __init__(self, params: dict[str, Tensor]):
        self.step = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def snapshot(self) -> ckpt.OptimizerSnapshot:
        return ckpt.OptimizerSnapshot(
            self.step,
            {k: a.copy() for k, a in self.m.items()},
            {k: a.copy() for k, a in self.v.items()},
        )

    @classmethod
    def from_snapshot(cls, snap: ckpt.OptimizerSnapshot,
                      params: dict[str, Tensor]) -> "OptimizerState":
        state = cls(params)
        if set(snap.m) != set(params) or set(snap.v) != set(params):
            raise ContractError("optimizer snapshot does not match parameter set")
        state.step = int(snap.step)
        state.m = {k: a.copy() for k, a in snap.m.items()}
        state.v = {k: a.copy() for k, a in snap.v.items()}
        return state


def adamw_step(params: dict[str, Tensor], state: OptimizerState,
               cfg: StageConfig) -> None:
    """One decoupled-weight-decay Adam update with bias correction.

    The update is applied as θ·(1−ηλ) − η·m̂/(√v̂+ε), the algebraic
    regrouping of θ − η(m̂/(√v̂+ε) + λθ); it makes the zero-gradient
    decay case exact. Gradients are read from the tensors; a parameter
    without one receives only decay. Frozen parameters are untouched.
    """
    state.step += 1
    t = state.step
    b1, b2 = cfg.betas
    corr1 = 1.0 - b1 ** t
    corr2 = 1.0 - b2 ** t
    decay = 1.0 - cfg.learning_rate * cfg.weight_decay
    for name, p in params.items():
        if not p.requires_grad:
            continue
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if not np.all(np.isfinite(g)):
            raise NumericsError(
                f"non-finite gradient for parameter {name!r} at step {t}"
            )
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        mhat = m / corr1
        vhat = v / corr2
        p.data = p.data * decay - cfg.learning_rate * (mhat / (np.sqrt(vhat) + cfg.eps))


# ---------------------------------------------------------------------------
# epoch loop


def _prepare_batch(manifest, positions, pipeline, seed, epoch, root, pool):
    """Augment one batch; per-sample streams make the result independent
    of loader order and worker count."""

    def one(pos):
        rec = manifest.records[pos]
        img = datamod.load_image(rec.image_ref, root)
        rng = aug.RngStream.for_sample(seed, epoch, pos)
        out = aug.run_pipeline(img, pipeline, rng)
        return out.data if isinstance(out, Tensor) else out

    arrays = list(pool.map(one, positions)) if pool else [one(p) for p in positions]
    x = np.stack(arrays)
    y = np.array([manifest.records[p].label for p in positions], dtype=np.int64)
    return x, y


def train_epoch(model: vit.DeitModel, manifest, pipeline, optimizer: OptimizerState,
                cfg: StageConfig, *, root=None, epoch: int = 1,
                threads: int | None = None) -> float:
    """One full pass: augment, forward, loss, backward, AdamW, zero grads.
    Returns the sample-weighted mean training loss."""
    if len(manifest) == 0:
        raise ContractError("train_epoch needs a non-empty manifest")
    shuffle_rng = aug.RngStream([cfg.seed, epoch])
    pool = ThreadPoolExecutor(threads) if threads and threads > 1 else None
    try:
        total = 0.0
        seen = 0
        for positions in datamod.batch_iter(manifest, cfg.batch_size,
                                            shuffle=True, rng=shuffle_rng):
            x, y = _prepare_batch(manifest, positions, pipeline,
                                  cfg.seed, epoch, root, pool)
            with T.GradTape() as tape:
                loss = cross_entropy(model.forward(x), y)
            T.backward(loss, tape)
            adamw_step(model.params, optimizer, cfg)
            model.zero_grads()
            total += float(loss.data) * len(positions)
            seen += len(positions)
        return total / seen
    finally:
        if pool is not None:
            pool.shutdown()


def evaluate(model: vit.DeitModel, manifest, pipeline, *, root=None,
             batch_size: int = 64, threads: int | None = None) -> metrics.MetricsReport:
    """Deterministic full-split pass producing a MetricsReport; never
    mutates parameters. The pipeline must be randomness-free."""
    if len(manifest) == 0:
        raise ContractError("evaluate needs a non-empty manifest")
    pool = ThreadPoolExecutor(threads) if threads and threads > 1 else None
    try:
        chunks = []
        for positions in datamod.batch_iter(manifest, batch_size, shuffle=False):
            x, _ = _prepare_batch(manifest, positions, pipeline, 0, 0, root, pool)
            chunks.append(model.forward(x).data)
    finally:
        if pool is not None:
            pool.shutdown()
    logits = np.concatenate(chunks, axis=0).astype(np.float64)
    y = np.array([rec.label for rec in manifest.records], dtype=np.int64)
    shifted = logits - logits.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    loss = float(-np.mean(logp[np.arange(len(y)), y]))
    p_fake = np.exp(logp[:, metrics.LABEL_FAKE])
    return metrics.build_report(p_fake, y, loss=loss)


# ---------------------------------------------------------------------------
# stage runner


def _write_epoch_logs(run_dir, history: list[dict]) -> None:
    path = os.path.join(run_dir, "epochs.jsonl")
    with open(path, "w", encoding="utf-8") as fh:
        for row in history:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def run_stage(model: vit.DeitModel, data: datamod.DatasetSplits, cfg: StageConfig,
              resume_from: ckpt.Checkpoint | None = None, *,
              resume_best: ckpt.Checkpoint | None = None,
              stage_name: str = "stage1", run_dir=None,
              eval_test_each_epoch: bool = False,
              metric_hook=None, threads: int | None = None,
              ) -> tuple[ckpt.Checkpoint, list[EpochLog]]:
    """Train one stage with per-epoch validation and early stopping.

    Resuming with a checkpoint of the *same* stage continues its epoch
    count, optimizer, and history; pass that run's best checkpoint as
    `resume_best` to also continue best-model tracking (without it the
    tracking restarts from the resume point, though the metric bar and
    patience window are still recovered from the history). A checkpoint
    from a different stage seeds the parameters only: fresh optimizer,
    epoch count restarts. Returns the best-validation-AUROC checkpoint
    and this call's epoch logs. `metric_hook(epoch, report) -> float`,
    when given, replaces the monitored value; logs are unchanged.
    """
    if run_dir is not None:
        os.makedirs(run_dir, exist_ok=True)

    start_epoch = 1
    history: list[dict] = []
    optimizer = OptimizerState(model.params)
    best_metric = -np.inf
    best_ck: ckpt.Checkpoint | None = None
    stall = 0
    if resume_from is not None:
        ckpt.restore_into(model, resume_from)
        if resume_from.stage == stage_name:
            start_epoch = resume_from.epoch + 1
            history = [dict(h) for h in resume_from.history]
            if resume_from.optimizer is not None:
                optimizer = OptimizerState.from_snapshot(
                    resume_from.optimizer, model.params
                )
            if resume_best is not None:
                if resume_best.stage != stage_name:
                    raise CompatibilityError(
                        f"best checkpoint is from stage {resume_best.stage!r}, "
                        f"resuming {stage_name!r}"
                    )
                ckpt.check_compatible(model, resume_best)
                best_ck = resume_best
            if history:
                aurocs = [float(h["auroc"]) for h in history]
                best_metric = max(aurocs)
                # improvement is strict, so nothing after the earliest
                # max ever reset the counter
                stall = len(aurocs) - 1 - aurocs.index(best_metric)
    vit.apply_freeze(model, cfg.freeze)

    train_pipe = aug.build_pipeline(cfg.pipeline, cfg.augment)
    eval_pipe = aug.build_eval_pipeline(cfg.augment)
    rng_note = {"stage_seed": cfg.seed}
    logs: list[EpochLog] = []

    end_epoch = cfg.epochs
    if cfg.early_stopping is not None and stall >= cfg.early_stopping.patience:
        end_epoch = start_epoch - 1  # patience was already exhausted
    for epoch in range(start_epoch, end_epoch + 1):
        train_loss = train_epoch(model, data.train, train_pipe, optimizer, cfg,
                                 root=data.root, epoch=epoch, threads=threads)
        val_report = evaluate(model, data.val, eval_pipe, root=data.root,
                              batch_size=cfg.batch_size, threads=threads)
        extra = {}
        if eval_test_each_epoch and data.test is not None:
            test_report = evaluate(model, data.test, eval_pipe, root=data.root,
                                   batch_size=cfg.batch_size, threads=threads)
            extra = {
                "test_loss": test_report.loss,
                "test_accuracy": test_report.accuracy,
                "test_f1_macro": test_report.f1_macro,
                "test_auroc": test_report.auroc,
            }
        log = EpochLog(
            epoch=epoch,
            train_loss=train_loss,
            val_loss=val_report.loss,
            accuracy=val_report.accuracy,
            f1_macro=val_report.f1_macro,
            auroc=val_report.auroc,
            **extra,
        )
        logs.append(log)
        history.append(log.to_dict())

        monitored = float(metric_hook(epoch, val_report)) if metric_hook \
            else val_report.auroc
        if monitored > best_metric:
            best_metric = monitored
            best_ck = ckpt.from_model(model, stage_name, epoch,
                                      optimizer=optimizer.snapshot(),
                                      rng=rng_note, history=history)
            stall = 0
        else:
            stall += 1

        if run_dir is not None:
            _write_epoch_logs(run_dir, history)
            last_ck = ckpt.from_model(model, stage_name, epoch,
                                      optimizer=optimizer.snapshot(),
                                      rng=rng_note, history=history)
            ckpt.save_checkpoint(last_ck, os.path.join(run_dir, "last.ckpt"))
            ckpt.save_checkpoint(best_ck, os.path.join(run_dir, "best.ckpt"))

        if cfg.early_stopping is not None and stall >= cfg.early_stopping.patience:
            break

    if best_ck is None:
        # nothing ran (resume already finished) and no best was handed in:
        # the resume point itself is the best state available
        best_ck = ckpt.from_model(model, stage_name, start_epoch - 1,
                                  optimizer=optimizer.snapshot(),
                                  rng=rng_note, history=history)
    return best_ck, logs


# ---------------------------------------------------------------------------
# curriculum


@dataclass
class TwoStageResult:
    stage1_checkpoint: ckpt.Checkpoint
    stage1_logs: list[EpochLog]
    stage1_report: metrics.MetricsReport | None
    stage2_checkpoint: ckpt.Checkpoint | None = None
    stage2_logs: list[EpochLog] = field(default_factory=list)
    stage2_report: metrics.MetricsReport | None = None

    @property
    def final_checkpoint(self) -> ckpt.Checkpoint:
        return self.stage2_checkpoint or self.stage1_checkpoint


def _test_report(ck: ckpt.Checkpoint, data: datamod.DatasetSplits,
                 spec: aug.AugmentSpec, batch_size: int,
                 threads) -> metrics.MetricsReport | None:
    if data.test is None:
        return None
    model = ckpt.build_model(ck)
    pipe = aug.build_eval_pipeline(spec)
    return evaluate(model, data.test, pipe, root=data.root,
                    batch_size=batch_size, threads=threads)


def run_two_stage(model: vit.DeitModel, data: datamod.DatasetSplits,
                  stage1: StageConfig, stage2: StageConfig | None, *,
                  run_dir=None, metric_hook=None,
                  threads: int | None = None) -> TwoStageResult:
    """Stage-I, then stage-II resumed from the stage-I best checkpoint.
    stage2=None degenerates to a pure stage-I run."""
    s1_dir = os.path.join(run_dir, "stage1") if run_dir else None
    best1, logs1 = run_stage(model, data, stage1, None, stage_name="stage1",
                             run_dir=s1_dir, metric_hook=metric_hook,
                             threads=threads)
    result = TwoStageResult(
        stage1_checkpoint=best1,
        stage1_logs=logs1,
        stage1_report=_test_report(best1, data, stage1.augment,
                                   stage1.batch_size, threads),
    )
    if stage2 is None:
        return result

    s2_dir = os.path.join(run_dir, "stage2") if run_dir else None
    best2, logs2 = run_stage(model, data, stage2, best1, stage_name="stage2",
                             run_dir=s2_dir, metric_hook=metric_hook,
                             threads=threads)
    result.stage2_checkpoint = best2
    result.stage2_logs = logs2
    result.stage2_report = _test_report(best2, data, stage2.augment,
                                        stage2.batch_size, threads)
    return result


# ---------------------------------------------------------------------------
# ablation protocol


@dataclass(frozen=True)
class AblationRecipes:
    """T1: the shared base stage. T2: one extra epoch, standard
    augmentations. T3: one extra epoch, full advanced augmentations."""

    base: StageConfig
    t2_extra: StageConfig
    t3_extra: StageConfig

    def __post_init__(self):
        if self.t2_extra.pipeline != "stage1":
            raise ValidationError("the T2 extra epoch uses the standard pipeline")
        if self.t3_extra.pipeline != "stage2":
            raise ValidationError("the T3 extra epoch uses the advanced pipeline")


@dataclass
class AblationRow:
    name: str
    epochs: int
    affine: bool
    report: metrics.MetricsReport


@dataclass
class AblationResult:
    rows: list[AblationRow]
    base_logs: list[EpochLog]

    def render(self) -> str:
        return metrics.render_ablation_table(
            [(r.name, r.epochs, r.affine, r.report) for r in self.rows]
        )


def run_ablation(data: datamod.DatasetSplits, recipes: AblationRecipes, *,
                 model_config: vit.ModelConfig | None = None,
                 model_seed: int = 0, run_dir=None,
                 threads: int | None = None) -> AblationResult:
    """Three-recipe comparison sharing one base run.

    The base stage is trained once; T1 reports its best checkpoint, T2
    and T3 each resume it for one extra epoch (standard vs advanced
    augmentations), so the recipes differ only where the protocol says
    they do.
    """
    cfg = model_config or vit.ModelConfig()
    model = vit.DeitModel(cfg, seed=model_seed)
    base_dir = os.path.join(run_dir, "base") if run_dir else None
    base_ck, base_logs = run_stage(model, data, recipes.base, None,
                                   stage_name="stage1", run_dir=base_dir,
                                   threads=threads)

    rows = [AblationRow(
        "T1", recipes.base.epochs, False,
        _test_report(base_ck, data, recipes.base.augment,
                     recipes.base.batch_size, threads),
    )]
    for name, extra in (("T2", recipes.t2_extra), ("T3", recipes.t3_extra)):
        follow = ckpt.build_model(base_ck)
        extra_dir = os.path.join(run_dir, name.lower()) if run_dir else None
        best, _ = run_stage(follow, data, extra, base_ck, stage_name="stage2",
                            run_dir=extra_dir, threads=threads)
        rows.append(AblationRow(
            name, recipes.base.epochs + extra.epochs, name == "T3",
            _test_report(best, data, extra.augment, extra.batch_size, threads),
        ))
    result = AblationResult(rows=rows, base_logs=base_logs)
    if run_dir is not None:
        with open(os.path.join(run_dir, "ablation.txt"), "w", encoding="utf-8") as fh:
            fh.write(result.render() + "\n")
    return result
