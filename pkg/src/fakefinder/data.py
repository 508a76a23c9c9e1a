"""Manifests, class balancing, stratified splitting and image loading.

A manifest is a TSV file, one sample per line: ``<image_ref>\t<label>``
with label ``real`` or ``fake``; lines starting with ``#`` are
comments. Labels map to class ids fake=0, real=1 (the fake class is
the positive class everywhere in this package).

An ``image_ref`` is either a path relative to a dataset root, or a
self-contained synthetic descriptor (``synth://...``) that renders a
procedural image, so synthetic manifests need no files on disk.
"""

from __future__ import annotations

import os
import warnings
from dataclasses import dataclass, field, replace
from typing import Iterator, Sequence

import numpy as np

from . import augment as aug
from .errors import ContractError, ManifestError, ValidationError
from .metrics import LABEL_FAKE, LABEL_REAL

LABEL_NAMES = {"real": LABEL_REAL, "fake": LABEL_FAKE}
NAME_OF_LABEL = {v: k for k, v in LABEL_NAMES.items()}

ORIGIN_ORIGINAL = "original"
ORIGIN_DUPLICATE = "oversampled-duplicate"


@dataclass(frozen=True)
class SampleRecord:
    image_ref: str
    label: int
    origin: str = ORIGIN_ORIGINAL

    def __post_init__(self):
        if self.label not in (LABEL_FAKE, LABEL_REAL):
            raise ValidationError(f"label must be 0 (fake) or 1 (real), got {self.label}")


@dataclass
class SampleManifest:
    records: list[SampleRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def class_counts(self) -> dict[int, int]:
        counts = {LABEL_FAKE: 0, LABEL_REAL: 0}
        for r in self.records:
            counts[r.label] += 1
        return counts

    def labels(self) -> np.ndarray:
        return np.array([r.label for r in self.records], dtype=np.int64)


def load_manifest(path, root=None) -> SampleManifest:
    """Parse a manifest file; malformed lines raise with their line number.

    With ``root`` given, non-synthetic refs are checked for existence.
    """
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ManifestError(
                    f"{path}:{lineno}: expected '<image_ref>\\t<label>', got {line!r}"
                )
            ref, label_name = parts[0].strip(), parts[1].strip().lower()
            if not ref:
                raise ManifestError(f"{path}:{lineno}: empty image_ref")
            if label_name not in LABEL_NAMES:
                raise ManifestError(
                    f"{path}:{lineno}: unknown label {label_name!r} "
                    f"(expected 'real' or 'fake')"
                )
            if root is not None and not ref.startswith("synth://"):
                full = os.path.join(root, ref)
                if not os.path.exists(full):
                    raise ValidationError(f"{path}:{lineno}: missing image file {full}")
            records.append(SampleRecord(ref, LABEL_NAMES[label_name]))
    return SampleManifest(records)


def write_manifest(manifest: SampleManifest, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# image_ref\tlabel\n")
        for r in manifest.records:
            fh.write(f"{r.image_ref}\t{NAME_OF_LABEL[r.label]}\n")


# ---------------------------------------------------------------------------
# balancing and splitting


def oversample_balance(manifest: SampleManifest, rng: aug.RngStream) -> SampleManifest:
    """Equalize class counts by duplicating minority records, drawn
    uniformly with replacement; originals keep their order, duplicates
    are appended and tagged."""
    counts = manifest.class_counts()
    if counts[LABEL_FAKE] == 0 or counts[LABEL_REAL] == 0:
        raise ContractError("oversample needs at least one sample of each class")
    if counts[LABEL_FAKE] == counts[LABEL_REAL]:
        return SampleManifest(list(manifest.records))
    minority = LABEL_FAKE if counts[LABEL_FAKE] < counts[LABEL_REAL] else LABEL_REAL
    need = abs(counts[LABEL_FAKE] - counts[LABEL_REAL])
    pool = [r for r in manifest.records if r.label == minority]
    picks = rng.integers(0, len(pool), size=need)
    dupes = [replace(pool[int(i)], origin=ORIGIN_DUPLICATE) for i in picks]
    return SampleManifest(list(manifest.records) + dupes)


def stratified_split(manifest: SampleManifest, train_fraction: float,
                     rng: aug.RngStream) -> tuple[SampleManifest, SampleManifest]:
    """Seeded per-class split.

    The train side gets floor(len * fraction) samples in total: each
    class contributes floor(count * fraction), and the remainder goes
    to the classes with the largest fractional parts (ties broken by
    class label order). Output manifests are in seeded shuffle order.
    """
    if not 0.0 < train_fraction < 1.0:
        raise ContractError(f"train_fraction must be in (0, 1), got {train_fraction}")
    if len(manifest) == 0:
        raise ContractError("cannot split an empty manifest")
    total_train = int(np.floor(len(manifest) * train_fraction))
    by_class: dict[int, list[int]] = {}
    for i, r in enumerate(manifest.records):
        by_class.setdefault(r.label, []).append(i)
    labels = sorted(by_class)
    base = {}
    fracpart = {}
    for lab in labels:
        raw = len(by_class[lab]) * train_fraction
        base[lab] = int(np.floor(raw))
        fracpart[lab] = raw - base[lab]
    leftover = total_train - sum(base.values())
    for lab in sorted(labels, key=lambda l: (-fracpart[l], l))[:leftover]:
        base[lab] += 1
    train_idx: list[int] = []
    test_idx: list[int] = []
    for lab in labels:
        idx = by_class[lab]
        order = rng.permutation(len(idx))
        shuffled = [idx[int(j)] for j in order]
        take = base[lab]
        if take == 0 or take == len(idx):
            warnings.warn(f"class {NAME_OF_LABEL[lab]} is empty in one split")
        train_idx.extend(shuffled[:take])
        test_idx.extend(shuffled[take:])
    # interleave classes deterministically by reshuffling the unions
    train_order = rng.permutation(len(train_idx))
    test_order = rng.permutation(len(test_idx))
    train = SampleManifest([manifest.records[train_idx[int(i)]] for i in train_order])
    test = SampleManifest([manifest.records[test_idx[int(i)]] for i in test_order])
    return train, test


def batch_iter(manifest: SampleManifest, batch_size: int, shuffle: bool,
               rng: aug.RngStream | None = None) -> Iterator[list[int]]:
    """Yield batches of manifest positions; the tail batch may be short.

    Shuffle order comes only from ``rng``, so an epoch's order is a pure
    function of the stream's seed material.
    """
    if batch_size < 1:
        raise ContractError(f"batch_size must be >= 1, got {batch_size}")
    n = len(manifest)
    if shuffle:
        if rng is None:
            raise ContractError("shuffle=True needs an RngStream")
        order = [int(i) for i in rng.permutation(n)]
    else:
        order = list(range(n))
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


@dataclass
class DatasetSplits:
    """The three manifests a training run consumes."""

    train: SampleManifest
    val: SampleManifest
    test: SampleManifest | None = None
    root: str | None = None


# ---------------------------------------------------------------------------
# synthetic corpus


@dataclass(frozen=True)
class SyntheticSpec:
    """Procedural two-class image corpus.

    Real images are smooth low-frequency color fields; fake images add
    a high-frequency oriented grating whose amplitude is the label
    signal. ``warp_test`` bakes a fixed perspective + elastic
    perturbation into the test split's descriptors, producing a
    distribution shift at evaluation time.
    """

    n_real: int = 400
    n_fake: int = 400
    image_size: int = 32
    seed: int = 0
    signal_amplitude: float = 0.18
    warp_test: bool = True
    warp_distortion: float = 0.3
    warp_elastic_alpha: float = 4.0
    warp_elastic_sigma: float = 2.0

    def __post_init__(self):
        if self.n_real < 1 or self.n_fake < 1:
            raise ValidationError("synthetic corpus needs n_real, n_fake >= 1")
        if self.image_size < 8:
            raise ValidationError("synthetic image_size must be >= 8")
        if not 0.0 < self.signal_amplitude <= 0.5:
            raise ValidationError("signal_amplitude must be in (0, 0.5]")


def make_synthetic_manifest(spec: SyntheticSpec) -> SampleManifest:
    records = []
    for i in range(spec.n_real):
        records.append(SampleRecord(_synth_ref(spec, "real", i), LABEL_REAL))
    for i in range(spec.n_fake):
        records.append(SampleRecord(_synth_ref(spec, "fake", i), LABEL_FAKE))
    return SampleManifest(records)


def _synth_ref(spec: SyntheticSpec, label_name: str, index: int) -> str:
    return (
        f"synth://texture/seed={spec.seed}/size={spec.image_size}"
        f"/amp={spec.signal_amplitude:g}/label={label_name}/idx={index}"
    )


def warp_test_manifest(manifest: SampleManifest, spec: SyntheticSpec,
                       warp_seed: int) -> SampleManifest:
    """Append warp parameters to every descriptor so the perturbation is
    part of the sample's identity; row position salts the warp."""
    out = []
    for pos, r in enumerate(manifest.records):
        if not r.image_ref.startswith("synth://"):
            raise ContractError("warp_test_manifest only applies to synthetic refs")
        ref = (
            f"{r.image_ref}/warp={warp_seed}/wrow={pos}"
            f"/wd={spec.warp_distortion:g}/wa={spec.warp_elastic_alpha:g}"
            f"/ws={spec.warp_elastic_sigma:g}"
        )
        out.append(replace(r, image_ref=ref))
    return SampleManifest(out)


def _parse_synth_ref(ref: str) -> dict[str, str]:
    body = ref[len("synth://"):]
    parts = body.split("/")
    if parts[0] != "texture":
        raise ValidationError(f"unknown synthetic family {parts[0]!r} in {ref!r}")
    kv = {}
    for part in parts[1:]:
        if "=" not in part:
            raise ValidationError(f"malformed synthetic descriptor segment {part!r}")
        k, v = part.split("=", 1)
        kv[k] = v
    for needed in ("seed", "size", "amp", "label", "idx"):
        if needed not in kv:
            raise ValidationError(f"synthetic descriptor missing {needed!r}: {ref!r}")
    return kv


def render_synthetic(ref: str) -> aug.ImageBuffer:
    """Deterministically render a synthetic descriptor."""
    kv = _parse_synth_ref(ref)
    seed = int(kv["seed"])
    size = int(kv["size"])
    amp = float(kv["amp"])
    label = LABEL_NAMES[kv["label"]]
    idx = int(kv["idx"])
    rng = aug.RngStream([seed, label, idx])
    ys, xs = np.mgrid[0:size, 0:size] / float(size)
    base = np.zeros((size, size), dtype=np.float64)
    for _ in range(3):
        fx = rng.uniform(0.5, 2.5)
        fy = rng.uniform(0.5, 2.5)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        base += rng.uniform(0.06, 0.14) * np.sin(2 * np.pi * (fx * xs + fy * ys) + phase)
    field = np.stack([base, base, base], axis=-1)
    for c in range(3):
        field[..., c] *= rng.uniform(0.75, 1.0)
        field[..., c] += rng.uniform(-0.06, 0.06)
    if label == LABEL_FAKE:
        # oriented high-frequency grating: the forgery fingerprint; kept
        # well under Nyquist so bilinear warps attenuate but never erase it
        freq = rng.uniform(0.18, 0.28) * size  # cycles across the image
        angle = rng.uniform(0.0, np.pi)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        carrier = np.sin(
            2 * np.pi * freq * (xs * np.cos(angle) + ys * np.sin(angle)) + phase
        )
        tint = np.array([rng.uniform(0.7, 1.0) for _ in range(3)])
        field += amp * carrier[..., None] * tint
    img = aug.ImageBuffer(np.clip(0.5 + field, 0.0, 1.0))
    if "warp" in kv:
        wrng = aug.RngStream([int(kv["warp"]), int(kv["wrow"])])
        img = aug.random_perspective(
            img,
            aug.PerspectiveSpec(distortion_scale=float(kv["wd"]), p=1.0),
            wrng,
        )
        img = aug.elastic_transform(
            img,
            aug.ElasticSpec(alpha=float(kv["wa"]), sigma=float(kv["ws"])),
            wrng,
        )
    return img


def load_image(ref: str, root: str | None = None) -> aug.ImageBuffer:
    """Resolve an image_ref: synthetic descriptors render procedurally,
    anything else is read from disk under ``root``."""
    if ref.startswith("synth://"):
        return render_synthetic(ref)
    path = ref if root is None else os.path.join(root, ref)
    if not os.path.exists(path):
        raise ValidationError(f"image file not found: {path}")
    return aug.load_png(path)
