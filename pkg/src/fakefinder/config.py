"""Run configuration: presets, JSON round-trip, and seed derivation.

A run is described by one JSON document that mirrors the dataclasses
below. Loading merges the document over the desk preset, so a config
file only needs the keys it changes. The run-level seed is the single
source of randomness: component seeds (model init, per-stage streams,
data operations, test-split warps) are derived from it with fixed
ordinals, never taken from the file.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass

import numpy as np

from . import augment as aug
from . import data as datamod
from . import train as trainmod
from . import vit
from .errors import ValidationError

#: Ordinals for derive_seed; every consumer of randomness gets its own.
SEED_MODEL = 0
SEED_STAGE1 = 1
SEED_STAGE2 = 2
SEED_DATA = 3
SEED_WARP = 4

_U64 = 0xFFFFFFFFFFFFFFFF


def derive_seed(seed: int, ordinal: int) -> int:
    """Stable 64-bit child seed for one component of a run."""
    ss = np.random.SeedSequence([seed & _U64, int(ordinal)])
    return int(ss.generate_state(1, np.uint64)[0])


@dataclass(frozen=True)
class DataConfig:
    """Where samples come from and how they are prepared.

    Exactly one of `synthetic` / `manifest` must be set by the time
    prepare runs. Balancing happens before the split unless
    `split_first` flips the order; `val_fraction` is carved out of the
    train side afterwards.
    """

    synthetic: datamod.SyntheticSpec | None = None
    manifest: str | None = None
    root: str | None = None
    balance: bool = True
    split_first: bool = False
    train_fraction: float = 0.9
    val_fraction: float = 0.1

    def __post_init__(self):
        if self.synthetic is not None and self.manifest is not None:
            raise ValidationError("set either synthetic or manifest, not both")
        if not 0.0 < self.train_fraction < 1.0:
            raise ValidationError("train_fraction must be in (0, 1)")
        if not 0.0 < self.val_fraction < 1.0:
            raise ValidationError("val_fraction must be in (0, 1)")


@dataclass(frozen=True)
class RunConfig:
    model: vit.ModelConfig
    stage1: trainmod.StageConfig
    stage2: trainmod.StageConfig | None
    data: DataConfig
    output_dir: str = "runs/desk"
    seed: int = 0


def _desk_stage2_augment() -> aug.AugmentSpec:
    # elastic alpha/sigma are the full-scale 50/5 scaled to 32 px
    return aug.AugmentSpec(
        resize_to=32,
        color_jitter=aug.ColorJitterSpec(0.2, 0.2, 0.2, 0.1),
        perspective=aug.PerspectiveSpec(0.2, 0.5),
        elastic=aug.ElasticSpec(4.0, 2.0),
    )


def desk_run_config() -> RunConfig:
    """Laptop-scale defaults: a small transformer on the synthetic
    corpus, with training constants tuned for that scale."""
    return RunConfig(
        model=vit.ModelConfig(),
        stage1=trainmod.StageConfig(
            epochs=5,
            batch_size=32,
            learning_rate=3e-4,
            weight_decay=0.01,
            pipeline="stage1",
            augment=aug.AugmentSpec(resize_to=32),
        ),
        stage2=trainmod.StageConfig(
            epochs=1,
            batch_size=32,
            learning_rate=3e-4,
            weight_decay=0.01,
            pipeline="stage2",
            augment=_desk_stage2_augment(),
            freeze=vit.FreezeSpec(block_range=(0, 1), freeze_embeddings=True),
        ),
        data=DataConfig(
            synthetic=datamod.SyntheticSpec(
                n_real=288, n_fake=288, image_size=32, seed=1,
                signal_amplitude=0.35,
            ),
        ),
        output_dir="runs/desk",
        seed=0,
    )


def full_scale_run_config() -> RunConfig:
    """The published recipe: 224 px, 86M parameters, lr 2e-5, weight
    decay 0.01, batch 128, 5 + 1 epochs, 15 degree rotations, 0.2
    jitter/perspective, elastic 50/5, ImageNet normalization. Needs a
    real manifest; tests never run it."""
    stage2_augment = aug.AugmentSpec(
        resize_to=224,
        color_jitter=aug.ColorJitterSpec(0.2, 0.2, 0.2, 0.1),
        perspective=aug.PerspectiveSpec(0.2, 0.5),
        elastic=aug.ElasticSpec(50.0, 5.0),
    )
    return RunConfig(
        model=vit.FULL_SCALE,
        stage1=trainmod.StageConfig(
            epochs=5,
            batch_size=128,
            learning_rate=2e-5,
            weight_decay=0.01,
            pipeline="stage1",
            augment=aug.AugmentSpec(resize_to=224),
        ),
        stage2=trainmod.StageConfig(
            epochs=1,
            batch_size=128,
            learning_rate=2e-5,
            weight_decay=0.01,
            pipeline="stage2",
            augment=stage2_augment,
            freeze=vit.FreezeSpec(block_range=(0, 6), freeze_embeddings=True),
        ),
        data=DataConfig(),
        output_dir="runs/full",
        seed=0,
    )


PRESETS = {
    "desk": desk_run_config,
    "full_scale": full_scale_run_config,
}


# ---------------------------------------------------------------------------
# serialization


def config_to_dict(cfg: RunConfig) -> dict:
    return dataclasses.asdict(cfg)


def dump_config(cfg: RunConfig) -> str:
    def default(o):
        raise TypeError(f"unserializable config value {o!r}")

    return json.dumps(config_to_dict(cfg), indent=2, sort_keys=True,
                      default=default) + "\n"


def _merge(base, override, path=""):
    """Dict-over-dict deep merge; scalars and lists replace wholesale.
    Setting a mapping-valued key to null clears it."""
    if not isinstance(override, dict) or not isinstance(base, dict):
        return override
    out = dict(base)
    for key, value in override.items():
        if key not in base:
            raise ValidationError(f"unknown config key {path + key!r}")
        out[key] = _merge(base[key], value, path + key + ".")
    return out


def _opt(builder, d):
    return None if d is None else builder(d)


def _augment_from_dict(d: dict) -> aug.AugmentSpec:
    return aug.AugmentSpec(
        resize_to=d["resize_to"],
        hflip_p=d["hflip_p"],
        rotation_max_deg=d["rotation_max_deg"],
        color_jitter=_opt(lambda s: aug.ColorJitterSpec(**s), d["color_jitter"]),
        perspective=_opt(lambda s: aug.PerspectiveSpec(**s), d["perspective"]),
        elastic=_opt(lambda s: aug.ElasticSpec(**s), d["elastic"]),
        normalize_mean=tuple(d["normalize_mean"]),
        normalize_std=tuple(d["normalize_std"]),
    )


def _stage_from_dict(d: dict) -> trainmod.StageConfig:
    return trainmod.StageConfig(
        epochs=d["epochs"],
        batch_size=d["batch_size"],
        learning_rate=d["learning_rate"],
        weight_decay=d["weight_decay"],
        betas=tuple(d["betas"]),
        eps=d["eps"],
        pipeline=d["pipeline"],
        augment=_augment_from_dict(d["augment"]),
        freeze=_opt(
            lambda s: vit.FreezeSpec(block_range=tuple(s["block_range"]),
                                     freeze_embeddings=s["freeze_embeddings"]),
            d["freeze"],
        ),
        early_stopping=_opt(lambda s: trainmod.EarlyStoppingConfig(**s),
                            d["early_stopping"]),
        seed=d["seed"],
    )


def _data_from_dict(d: dict) -> DataConfig:
    return DataConfig(
        synthetic=_opt(lambda s: datamod.SyntheticSpec(**s), d["synthetic"]),
        manifest=d["manifest"],
        root=d["root"],
        balance=d["balance"],
        split_first=d["split_first"],
        train_fraction=d["train_fraction"],
        val_fraction=d["val_fraction"],
    )


def config_from_dict(d: dict) -> RunConfig:
    return RunConfig(
        model=vit.ModelConfig(**d["model"]),
        stage1=_stage_from_dict(d["stage1"]),
        stage2=_opt(_stage_from_dict, d["stage2"]),
        data=_data_from_dict(d["data"]),
        output_dir=d["output_dir"],
        seed=d["seed"],
    )


def loads_config(text: str, preset: str = "desk") -> RunConfig:
    """Parse a JSON document and merge it over a preset's defaults."""
    try:
        user = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(user, dict):
        raise ValidationError("config root must be a JSON object")
    if preset not in PRESETS:
        raise ValidationError(f"unknown preset {preset!r}")
    base = config_to_dict(PRESETS[preset]())
    # pointing data at a manifest implicitly drops the preset's corpus
    data_section = user.get("data")
    if isinstance(data_section, dict) and data_section.get("manifest") \
            and "synthetic" not in data_section:
        data_section = dict(data_section, synthetic=None)
        user = dict(user, data=data_section)
    merged = _merge(base, user)
    return config_from_dict(merged)


def load_config(path, preset: str = "desk") -> RunConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return loads_config(fh.read(), preset)


def resolve_seeds(cfg: RunConfig) -> RunConfig:
    """Overwrite component seeds from the run seed; applied once at
    command start so every artifact records the derived values."""
    stage1 = dataclasses.replace(cfg.stage1, seed=derive_seed(cfg.seed, SEED_STAGE1))
    stage2 = None if cfg.stage2 is None else dataclasses.replace(
        cfg.stage2, seed=derive_seed(cfg.seed, SEED_STAGE2))
    return dataclasses.replace(cfg, stage1=stage1, stage2=stage2)
