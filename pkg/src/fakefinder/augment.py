"""Deterministic image augmentation pipeline.

Images are ``ImageBuffer`` values: (H, W, 3) float32, channels RGB,
every value in [0, 1]. Ops are pure functions ``(image, rng) -> image``
that never mutate their input; randomness comes only from the
``RngStream`` handed in, so a pipeline is a pure function of (image,
seed material).

Geometry conventions, shared by every warp in this module:

* pixel centers sit at integer coordinates (0 .. W-1, 0 .. H-1);
* resampling is bilinear via inverse mapping;
* resize aligns half-pixel centers, so same-size resize is bit-exact;
* rotation/perspective fill with 0 outside the source, elastic
  replicates the border by clamping sample coordinates.

Randomized ops draw in a documented, fixed order (see each op); an op
whose probability is 0 or whose magnitude is 0 returns its input
unchanged, bit for bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.ndimage import convolve1d

from .errors import ContractError, ValidationError
from .tensor import Tensor

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


class ImageBuffer:
    """Row-major (H, W, 3) float32 RGB image with values in [0, 1]."""

    __slots__ = ("data",)

    def __init__(self, data):
        arr = np.asarray(data, dtype=np.float32)
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise ContractError(f"image must be (H, W, 3), got {arr.shape}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ContractError("zero-sized image")
        if not np.all(np.isfinite(arr)):
            raise ContractError("image contains non-finite values")
        if arr.min() < 0.0 or arr.max() > 1.0:
            raise ContractError("image values must lie in [0, 1]")
        self.data = arr

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    def __repr__(self) -> str:
        return f"ImageBuffer({self.height}x{self.width})"


class RngStream:
    """Counter-tracked deterministic random stream.

    Seeded from an int or a sequence of ints; identical seed material
    yields an identical draw sequence on any platform (PCG64 behind a
    SeedSequence). ``counter`` records how many scalar draws were made.
    """

    def __init__(self, seed):
        if isinstance(seed, (int, np.integer)):
            parts = [int(seed)]
        else:
            parts = [int(s) for s in seed]
        parts = [p & 0xFFFFFFFFFFFFFFFF for p in parts]
        self.seed_material = tuple(parts)
        self.counter = 0
        self._gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence(parts)))

    @classmethod
    def for_sample(cls, seed: int, epoch: int, sample_index: int) -> "RngStream":
        """Stream for one sample of one epoch; independent of loader order."""
        return cls([seed, epoch, sample_index])

    def random(self) -> float:
        self.counter += 1
        return float(self._gen.random())

    def uniform(self, low: float, high: float, size=None):
        n = 1 if size is None else int(np.prod(size))
        self.counter += n
        out = self._gen.uniform(low, high, size)
        return float(out) if size is None else out

    def integers(self, low: int, high: int, size=None):
        n = 1 if size is None else int(np.prod(size))
        self.counter += n
        out = self._gen.integers(low, high, size)
        return int(out) if size is None else out

    def permutation(self, n: int) -> np.ndarray:
        self.counter += n
        return self._gen.permutation(n)


# ---------------------------------------------------------------------------
# resampling core


def _bilinear_sample(data: np.ndarray, xs: np.ndarray, ys: np.ndarray,
                     fill: float | None) -> np.ndarray:
    """Sample (H, W, 3) at float coordinate grids.

    fill=None clamps coordinates to the border (replication); a float
    fill paints samples whose coordinates leave [0, W-1] x [0, H-1].
    """
    h, w = data.shape[:2]
    if fill is None:
        xs = np.clip(xs, 0.0, w - 1.0)
        ys = np.clip(ys, 0.0, h - 1.0)
        outside = None
    else:
        outside = (xs < 0.0) | (xs > w - 1.0) | (ys < 0.0) | (ys > h - 1.0)
        xs = np.clip(xs, 0.0, w - 1.0)
        ys = np.clip(ys, 0.0, h - 1.0)
    x0 = np.floor(xs).astype(np.int64)
    y0 = np.floor(ys).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (xs - x0)[..., None]
    fy = (ys - y0)[..., None]
    v00 = data[y0, x0]
    v01 = data[y0, x1]
    v10 = data[y1, x0]
    v11 = data[y1, x1]
    out = (
        (1.0 - fy) * ((1.0 - fx) * v00 + fx * v01)
        + fy * ((1.0 - fx) * v10 + fx * v11)
    )
    if outside is not None:
        out[outside] = fill
    return out.astype(np.float32)


def resize_bilinear(img: ImageBuffer, target: int) -> ImageBuffer:
    """Square resize with half-pixel center alignment; same-size input
    is returned unchanged (bit-exact)."""
    if target < 1:
        raise ContractError(f"resize target must be >= 1, got {target}")
    h, w = img.height, img.width
    if h == target and w == target:
        return img
    xs = (np.arange(target, dtype=np.float64) + 0.5) * (w / target) - 0.5
    ys = (np.arange(target, dtype=np.float64) + 0.5) * (h / target) - 0.5
    gx, gy = np.meshgrid(xs, ys)
    return ImageBuffer(_bilinear_sample(img.data, gx, gy, fill=None))


# ---------------------------------------------------------------------------
# randomized geometric ops


def random_hflip(img: ImageBuffer, p: float, rng: RngStream) -> ImageBuffer:
    """Mirror left-right with probability p. Draws one uniform."""
    if not 0.0 <= p <= 1.0:
        raise ContractError(f"flip probability must be in [0, 1], got {p}")
    if rng.random() < p:
        return ImageBuffer(img.data[:, ::-1, :].copy())
    return img


def sample_rotation_angle(rng: RngStream, max_deg: float) -> float:
    return rng.uniform(-max_deg, max_deg)


def random_rotation(img: ImageBuffer, max_deg: float, rng: RngStream) -> ImageBuffer:
    """Rotate about the pixel-center midpoint by a uniform angle in
    [-max_deg, +max_deg]; bilinear, zero fill. Draws one uniform."""
    if max_deg < 0:
        raise ContractError(f"rotation bound must be >= 0, got {max_deg}")
    theta = sample_rotation_angle(rng, max_deg)
    if theta == 0.0:
        return img
    return rotate(img, theta)


def rotate(img: ImageBuffer, degrees: float) -> ImageBuffer:
    """Deterministic rotation; positive angles turn content counter-clockwise."""
    if degrees == 0.0:
        return img
    h, w = img.height, img.width
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    rad = math.radians(degrees)
    cos, sin = math.cos(rad), math.sin(rad)
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    dx = xs - cx
    dy = ys - cy
    # inverse map: rotate destination offsets by -theta
    src_x = cos * dx + sin * dy + cx
    src_y = -sin * dx + cos * dy + cy
    return ImageBuffer(_bilinear_sample(img.data, src_x, src_y, fill=0.0))


@dataclass(frozen=True)
class PerspectiveSpec:
    distortion_scale: float = 0.2
    p: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.distortion_scale <= 1.0:
            raise ValidationError("distortion_scale must be in [0, 1]")
        if not 0.0 <= self.p <= 1.0:
            raise ValidationError("perspective p must be in [0, 1]")


def sample_perspective_corners(rng: RngStream, width: int, height: int,
                               distortion_scale: float):
    """Draw displaced corners: for each corner, in order top-left,
    top-right, bottom-right, bottom-left, draw dx then dy uniformly in
    +/- distortion_scale * (half extent). Returns (src, dst) 4x2 arrays."""
    sx = distortion_scale * (width - 1) / 2.0
    sy = distortion_scale * (height - 1) / 2.0
    src = np.array(
        [[0, 0], [width - 1, 0], [width - 1, height - 1], [0, height - 1]],
        dtype=np.float64,
    )
    dst = src.copy()
    for i in range(4):
        dst[i, 0] += rng.uniform(-sx, sx)
        dst[i, 1] += rng.uniform(-sy, sy)
    return src, dst


def _homography(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """3x3 map H with src ~ H @ dst (match i-th corner pairs)."""
    a = np.zeros((8, 8), dtype=np.float64)
    b = np.zeros(8, dtype=np.float64)
    for i in range(4):
        X, Y = dst[i]
        x, y = src[i]
        a[2 * i] = [X, Y, 1, 0, 0, 0, -x * X, -x * Y]
        b[2 * i] = x
        a[2 * i + 1] = [0, 0, 0, X, Y, 1, -y * X, -y * Y]
        b[2 * i + 1] = y
    try:
        h = np.linalg.solve(a, b)
    except np.linalg.LinAlgError:
        raise ContractError("degenerate perspective corners") from None
    return np.append(h, 1.0).reshape(3, 3)


def random_perspective(img: ImageBuffer, spec: PerspectiveSpec,
                       rng: RngStream) -> ImageBuffer:
    """Perspective warp with probability spec.p. Draws one uniform for
    the gate; when it fires, eight more for the corner displacements."""
    if rng.random() >= spec.p:
        return img
    if spec.distortion_scale == 0.0:
        return img
    src, dst = sample_perspective_corners(rng, img.width, img.height,
                                          spec.distortion_scale)
    hmat = _homography(src, dst)
    h, w = img.height, img.width
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    denom = hmat[2, 0] * xs + hmat[2, 1] * ys + hmat[2, 2]
    src_x = (hmat[0, 0] * xs + hmat[0, 1] * ys + hmat[0, 2]) / denom
    src_y = (hmat[1, 0] * xs + hmat[1, 1] * ys + hmat[1, 2]) / denom
    return ImageBuffer(_bilinear_sample(img.data, src_x, src_y, fill=0.0))


@dataclass(frozen=True)
class ElasticSpec:
    alpha: float = 50.0
    sigma: float = 5.0

    def __post_init__(self):
        if self.alpha < 0:
            raise ValidationError("elastic alpha must be >= 0")
        if self.sigma <= 0:
            raise ValidationError("elastic sigma must be > 0")


def _gaussian_kernel(sigma: float) -> np.ndarray:
    radius = max(1, int(math.ceil(3.0 * sigma)))
    xs = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (xs / sigma) ** 2)
    return k / k.sum()


def elastic_field(rng: RngStream, height: int, width: int, alpha: float,
                  sigma: float) -> tuple[np.ndarray, np.ndarray]:
    """Smoothed per-pixel displacement fields (dy, dx).

    Unit noise is averaged with a sum-normalized truncated Gaussian
    (radius 3 sigma, reflect padding), so each smoothed value is a
    convex combination of [-1, 1] draws: |displacement| <= alpha at any
    image size. Draw order: the full dy field, then the full dx field.
    """
    noise_y = rng.uniform(-1.0, 1.0, size=(height, width))
    noise_x = rng.uniform(-1.0, 1.0, size=(height, width))
    k = _gaussian_kernel(sigma)
    fields = []
    for noise in (noise_y, noise_x):
        sm = convolve1d(noise, k, axis=0, mode="reflect")
        sm = convolve1d(sm, k, axis=1, mode="reflect")
        fields.append(alpha * sm)
    return fields[0], fields[1]


def elastic_transform(img: ImageBuffer, spec: ElasticSpec,
                      rng: RngStream) -> ImageBuffer:
    """Smooth random warp; border replication. alpha = 0 is the identity
    (no draws consumed)."""
    if spec.alpha == 0.0:
        return img
    h, w = img.height, img.width
    dy, dx = elastic_field(rng, h, w, spec.alpha, spec.sigma)
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    return ImageBuffer(_bilinear_sample(img.data, xs + dx, ys + dy, fill=None))


# ---------------------------------------------------------------------------
# photometric ops


@dataclass(frozen=True)
class ColorJitterSpec:
    brightness: float = 0.2
    contrast: float = 0.2
    saturation: float = 0.2
    hue: float = 0.1

    def __post_init__(self):
        for name in ("brightness", "contrast", "saturation"):
            v = getattr(self, name)
            if not 0.0 <= v < 1.0:
                raise ValidationError(f"{name} delta must be in [0, 1)")
        if not 0.0 <= self.hue <= 0.5:
            raise ValidationError("hue delta must be in [0, 0.5]")


_GRAY = np.array([0.299, 0.587, 0.114], dtype=np.float32)


def _rgb_to_hsv(rgb: np.ndarray) -> np.ndarray:
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    maxc = rgb.max(axis=-1)
    minc = rgb.min(axis=-1)
    v = maxc
    delta = maxc - minc
    s = np.where(maxc > 0, delta / np.where(maxc > 0, maxc, 1.0), 0.0)
    dz = np.where(delta > 0, delta, 1.0)
    h = np.where(
        maxc == r, (g - b) / dz,
        np.where(maxc == g, 2.0 + (b - r) / dz, 4.0 + (r - g) / dz),
    )
    h = np.where(delta > 0, (h / 6.0) % 1.0, 0.0)
    return np.stack([h, s, v], axis=-1)


def _hsv_to_rgb(hsv: np.ndarray) -> np.ndarray:
    h, s, v = hsv[..., 0], hsv[..., 1], hsv[..., 2]
    i = np.floor(h * 6.0)
    f = h * 6.0 - i
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    i = i.astype(np.int64) % 6
    r = np.choose(i, [v, q, p, p, t, v])
    g = np.choose(i, [t, v, v, q, p, p])
    b = np.choose(i, [p, p, t, v, v, q])
    return np.stack([r, g, b], axis=-1)


def sample_jitter_factors(rng: RngStream, spec: ColorJitterSpec):
    """Factors drawn in the application order: brightness, contrast,
    saturation multipliers from [1-delta, 1+delta]; hue shift from
    [-hue, +hue]."""
    b = rng.uniform(1.0 - spec.brightness, 1.0 + spec.brightness)
    c = rng.uniform(1.0 - spec.contrast, 1.0 + spec.contrast)
    s = rng.uniform(1.0 - spec.saturation, 1.0 + spec.saturation)
    h = rng.uniform(-spec.hue, spec.hue)
    return b, c, s, h


def color_jitter(img: ImageBuffer, spec: ColorJitterSpec,
                 rng: RngStream) -> ImageBuffer:
    """Brightness, contrast, saturation, hue, in that fixed order.

    All four factors are drawn every call (stream stability); a sub-op
    whose delta is 0 is skipped entirely, so the all-zero spec is the
    bit-exact identity. Multiplicative steps clamp back to [0, 1].
    """
    fb, fc, fs, fh = sample_jitter_factors(rng, spec)
    out = img.data
    if spec.brightness > 0.0:
        out = np.clip(out * fb, 0.0, 1.0)
    if spec.contrast > 0.0:
        mean_gray = np.float32((out @ _GRAY).mean())
        out = np.clip(fc * out + (1.0 - fc) * mean_gray, 0.0, 1.0)
    if spec.saturation > 0.0:
        gray = (out @ _GRAY)[..., None]
        out = np.clip(fs * out + (1.0 - fs) * gray, 0.0, 1.0)
    if spec.hue > 0.0:
        hsv = _rgb_to_hsv(out.astype(np.float64))
        hsv[..., 0] = (hsv[..., 0] + fh) % 1.0
        out = np.clip(_hsv_to_rgb(hsv), 0.0, 1.0).astype(np.float32)
    if out is img.data:
        return img
    return ImageBuffer(out.astype(np.float32))


# ---------------------------------------------------------------------------
# normalization boundary


def normalize(img: ImageBuffer, mean: Sequence[float] = IMAGENET_MEAN,
              std: Sequence[float] = IMAGENET_STD) -> Tensor:
    """Per-channel (x - mean) / std, emitted as a (3, H, W) model input."""
    mean = np.asarray(mean, dtype=np.float32)
    std = np.asarray(std, dtype=np.float32)
    if mean.shape != (3,) or std.shape != (3,):
        raise ContractError("normalize needs 3 means and 3 stds")
    if np.any(std <= 0):
        raise ContractError("normalize std must be > 0")
    chw = ((img.data - mean) / std).transpose(2, 0, 1)
    return Tensor(np.ascontiguousarray(chw))


def denormalize(x, mean: Sequence[float] = IMAGENET_MEAN,
                std: Sequence[float] = IMAGENET_STD) -> ImageBuffer:
    """Inverse of normalize; float rounding is clipped back into [0, 1]."""
    arr = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float32)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise ContractError(f"denormalize needs (3, H, W), got {arr.shape}")
    mean = np.asarray(mean, dtype=np.float32)
    std = np.asarray(std, dtype=np.float32)
    hwc = arr.transpose(1, 2, 0) * std + mean
    return ImageBuffer(np.clip(hwc, 0.0, 1.0))


# ---------------------------------------------------------------------------
# pipelines


@dataclass(frozen=True)
class AugmentSpec:
    """Knobs for every augmentation the pipelines can apply."""

    resize_to: int = 32
    hflip_p: float = 0.5
    rotation_max_deg: float = 15.0
    color_jitter: ColorJitterSpec | None = None
    perspective: PerspectiveSpec | None = None
    elastic: ElasticSpec | None = None
    normalize_mean: tuple[float, float, float] = IMAGENET_MEAN
    normalize_std: tuple[float, float, float] = IMAGENET_STD

    def __post_init__(self):
        if self.resize_to < 1:
            raise ValidationError("resize_to must be >= 1")
        if not 0.0 <= self.hflip_p <= 1.0:
            raise ValidationError("hflip_p must be in [0, 1]")
        if self.rotation_max_deg < 0:
            raise ValidationError("rotation_max_deg must be >= 0")


@dataclass(frozen=True)
class PipelineStep:
    name: str
    apply: Callable[[ImageBuffer, RngStream | None], ImageBuffer | Tensor]


def _resize_step(spec):
    return PipelineStep("resize", lambda img, rng: resize_bilinear(img, spec.resize_to))


def _normalize_step(spec):
    return PipelineStep(
        "normalize",
        lambda img, rng: normalize(img, spec.normalize_mean, spec.normalize_std),
    )


def build_stage1_pipeline(spec: AugmentSpec) -> list[PipelineStep]:
    """Standard pipeline: resize, hflip, rotation, normalize."""
    return [
        _resize_step(spec),
        PipelineStep("hflip", lambda img, rng: random_hflip(img, spec.hflip_p, rng)),
        PipelineStep(
            "rotation",
            lambda img, rng: random_rotation(img, spec.rotation_max_deg, rng),
        ),
        _normalize_step(spec),
    ]


def build_stage2_pipeline(spec: AugmentSpec) -> list[PipelineStep]:
    """Advanced pipeline: the standard ops plus color jitter, perspective
    and elastic warps (in that order), then normalize."""
    if spec.color_jitter is None or spec.perspective is None or spec.elastic is None:
        raise ValidationError(
            "stage2 pipeline needs color_jitter, perspective and elastic specs"
        )
    return [
        _resize_step(spec),
        PipelineStep("hflip", lambda img, rng: random_hflip(img, spec.hflip_p, rng)),
        PipelineStep(
            "rotation",
            lambda img, rng: random_rotation(img, spec.rotation_max_deg, rng),
        ),
        PipelineStep(
            "color_jitter", lambda img, rng: color_jitter(img, spec.color_jitter, rng)
        ),
        PipelineStep(
            "perspective",
            lambda img, rng: random_perspective(img, spec.perspective, rng),
        ),
        PipelineStep(
            "elastic", lambda img, rng: elastic_transform(img, spec.elastic, rng)
        ),
        _normalize_step(spec),
    ]


def build_eval_pipeline(spec: AugmentSpec) -> list[PipelineStep]:
    """Deterministic pipeline: resize and normalize only."""
    return [_resize_step(spec), _normalize_step(spec)]


def build_pipeline(selector: str, spec: AugmentSpec) -> list[PipelineStep]:
    builders = {
        "stage1": build_stage1_pipeline,
        "stage2": build_stage2_pipeline,
        "eval": build_eval_pipeline,
    }
    if selector not in builders:
        raise ValidationError(f"unknown pipeline selector {selector!r}")
    return builders[selector](spec)


def run_pipeline(img: ImageBuffer, steps: Sequence[PipelineStep],
                 rng: RngStream | None, dump_dir=None):
    """Apply steps in order. With dump_dir set, every intermediate that
    is still an image is written as a lossless PNG for debugging."""
    out = img
    if dump_dir is not None:
        save_png(img, f"{dump_dir}/00_input.png")
    for i, step in enumerate(steps, start=1):
        out = step.apply(out, rng)
        if dump_dir is not None and isinstance(out, ImageBuffer):
            save_png(out, f"{dump_dir}/{i:02d}_{step.name}.png")
    return out


def save_png(img: ImageBuffer, path) -> None:
    from PIL import Image

    arr = np.clip(np.rint(img.data * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG")


def load_png(path) -> ImageBuffer:
    from PIL import Image

    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return ImageBuffer(arr)
