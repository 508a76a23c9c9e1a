"""DeiT-style vision transformer built on the local autodiff engine.

Architecture: non-overlapping patches, linear patch embedding, a class
token (plus an optional distillation-style extra token that rides along
but is never read), learned positional embeddings, N pre-norm encoder
blocks (multi-head self-attention + GELU MLP), a final layer norm, and
a linear head that reads the class-token position.

Parameters live in an insertion-ordered ``name -> Tensor`` dict; the
names are the checkpoint schema.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError, ShapeError, ValidationError
from .tensor import Tensor


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 32
    patch_size: int = 8
    hidden_dim: int = 64
    num_layers: int = 2
    num_heads: int = 4
    mlp_ratio: float = 4.0
    num_classes: int = 2
    use_distillation_token: bool = False
    layer_norm_eps: float = 1e-6

    def __post_init__(self):
        if self.image_size < 1 or self.patch_size < 1:
            raise ValidationError("image_size and patch_size must be >= 1")
        if self.image_size % self.patch_size != 0:
            raise ValidationError(
                f"patch_size {self.patch_size} must divide image_size {self.image_size}"
            )
        if self.hidden_dim < 1 or self.num_layers < 1:
            raise ValidationError("hidden_dim and num_layers must be >= 1")
        if self.num_heads < 1 or self.hidden_dim % self.num_heads != 0:
            raise ValidationError(
                f"num_heads {self.num_heads} must divide hidden_dim {self.hidden_dim}"
            )
        if self.mlp_ratio <= 0:
            raise ValidationError("mlp_ratio must be > 0")
        if self.num_classes < 2:
            raise ValidationError("num_classes must be >= 2")
        if self.layer_norm_eps <= 0:
            raise ValidationError("layer_norm_eps must be > 0")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid * self.grid

    @property
    def patch_dim(self) -> int:
        return 3 * self.patch_size * self.patch_size

    @property
    def num_special_tokens(self) -> int:
        return 2 if self.use_distillation_token else 1

    @property
    def seq_len(self) -> int:
        return self.num_patches + self.num_special_tokens

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.num_heads

    @property
    def mlp_dim(self) -> int:
        return int(self.hidden_dim * self.mlp_ratio)


#: The reference full-scale configuration (not exercised by training tests).
FULL_SCALE = ModelConfig(
    image_size=224,
    patch_size=16,
    hidden_dim=768,
    num_layers=12,
    num_heads=12,
    mlp_ratio=4.0,
    num_classes=2,
)


def patchify(image, patch_size: int):
    """Cut (3, H, W) or (B, 3, H, W) into flattened non-overlapping
    patches, row-major scan order, channel-major within a patch.

    Data-layout only: inputs are pixel data, no gradients flow here.
    """
    if isinstance(image, Tensor):
        if image.requires_grad:
            raise ContractError("patchify does not propagate gradients")
        arr = image.data
    else:
        arr = np.asarray(image, dtype=np.float32)
    single = arr.ndim == 3
    if single:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[1] != 3:
        raise ShapeError(f"patchify expects (B, 3, H, W), got {arr.shape}")
    b, c, h, w = arr.shape
    if h != w:
        raise ShapeError(f"patchify expects square images, got {h}x{w}")
    if h % patch_size != 0:
        raise ShapeError(f"patch size {patch_size} does not divide image size {h}")
    n = h // patch_size
    out = (
        arr.reshape(b, c, n, patch_size, n, patch_size)
        .transpose(0, 2, 4, 1, 3, 5)
        .reshape(b, n * n, c * patch_size * patch_size)
    )
    out = np.ascontiguousarray(out)
    return out[0] if single else out


def _trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) with draws outside 2 std rejected and redrawn."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2.0 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2.0 * std
    return out.astype(np.float32)


class DeitModel:
    """Desk-scale DeiT-style encoder with a binary head.

    ``dtype`` defaults to float32; float64 exists so verification
    tooling can build a wide twin for finite-difference checks.
    """

    def __init__(self, config: ModelConfig, seed: int = 0, dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype)
        self.params: dict[str, Tensor] = {}
        self._build(seed)

    # -- construction -------------------------------------------------------

    def _param(self, name: str, value: np.ndarray) -> None:
        self.params[name] = Tensor(value, requires_grad=True, dtype=self.dtype)

    def _build(self, seed: int) -> None:
        cfg = self.config
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed])))
        d = cfg.hidden_dim
        self._param("patch_embed.weight", _trunc_normal(rng, (cfg.patch_dim, d)))
        self._param("patch_embed.bias", np.zeros(d, dtype=np.float32))
        self._param("cls_token", _trunc_normal(rng, (1, d)))
        if cfg.use_distillation_token:
            self._param("dist_token", _trunc_normal(rng, (1, d)))
        self._param("pos_embed", _trunc_normal(rng, (cfg.seq_len, d)))
        for i in range(cfg.num_layers):
            p = f"blocks.{i}."
            self._param(p + "ln1.gain", np.ones(d, dtype=np.float32))
            self._param(p + "ln1.bias", np.zeros(d, dtype=np.float32))
            for proj in ("q", "k", "v", "out"):
                self._param(p + f"attn.{proj}.weight", _trunc_normal(rng, (d, d)))
                self._param(p + f"attn.{proj}.bias", np.zeros(d, dtype=np.float32))
            self._param(p + "ln2.gain", np.ones(d, dtype=np.float32))
            self._param(p + "ln2.bias", np.zeros(d, dtype=np.float32))
            self._param(p + "mlp.fc1.weight", _trunc_normal(rng, (d, cfg.mlp_dim)))
            self._param(p + "mlp.fc1.bias", np.zeros(cfg.mlp_dim, dtype=np.float32))
            self._param(p + "mlp.fc2.weight", _trunc_normal(rng, (cfg.mlp_dim, d)))
            self._param(p + "mlp.fc2.bias", np.zeros(d, dtype=np.float32))
        self._param("final_norm.gain", np.ones(d, dtype=np.float32))
        self._param("final_norm.bias", np.zeros(d, dtype=np.float32))
        self._param("head.weight", _trunc_normal(rng, (d, cfg.num_classes)))
        self._param("head.bias", np.zeros(cfg.num_classes, dtype=np.float32))

    # -- forward ------------------------------------------------------------

    def forward(self, batch, capture: dict | None = None) -> Tensor:
        """Logits for a (B, 3, S, S) batch. ``capture``, when given,
        collects per-block attention probabilities under "attention"."""
        cfg = self.config
        arr = batch.data if isinstance(batch, Tensor) else np.asarray(batch, np.float32)
        if arr.ndim != 4 or arr.shape[1:] != (3, cfg.image_size, cfg.image_size):
            raise ShapeError(
                f"forward expects (B, 3, {cfg.image_size}, {cfg.image_size}), "
                f"got {arr.shape}"
            )
        b = arr.shape[0]
        if b < 1:
            raise ShapeError("forward needs a non-empty batch")
        P = self.params
        patches = Tensor(patchify(arr, cfg.patch_size), dtype=self.dtype)
        x = T.add(T.matmul(patches, P["patch_embed.weight"]), P["patch_embed.bias"])
        toks = [T.expand_leading(P["cls_token"], b)]
        if cfg.use_distillation_token:
            toks.append(T.expand_leading(P["dist_token"], b))
        x = T.concat(toks + [x], axis=1)
        x = T.add(x, P["pos_embed"])
        for i in range(cfg.num_layers):
            x = self._block(x, i, b, capture)
        x = T.layer_norm(x, P["final_norm.gain"], P["final_norm.bias"],
                         eps=cfg.layer_norm_eps)
        cls = T.select(x, 0, axis=1)  # class token is always position 0
        # The stacked (B, 1, D) product keeps each sample's reduction
        # independent of batch composition; a flat (B, D) gemm does not,
        # and batch order must never perturb a sample's logits.
        cls = T.reshape(cls, (b, 1, cfg.hidden_dim))
        logits = T.matmul(cls, P["head.weight"])
        logits = T.reshape(logits, (b, cfg.num_classes))
        return T.add(logits, P["head.bias"])

    def _block(self, x: Tensor, i: int, b: int, capture) -> Tensor:
        cfg = self.config
        P = self.params
        p = f"blocks.{i}."
        h = T.layer_norm(x, P[p + "ln1.gain"], P[p + "ln1.bias"], eps=cfg.layer_norm_eps)
        x = T.add(x, self._attention(h, i, b, capture))
        h = T.layer_norm(x, P[p + "ln2.gain"], P[p + "ln2.bias"], eps=cfg.layer_norm_eps)
        h = T.matmul(h, P[p + "mlp.fc1.weight"])
        h = T.add(h, P[p + "mlp.fc1.bias"])
        h = T.gelu(h)
        h = T.matmul(h, P[p + "mlp.fc2.weight"])
        h = T.add(h, P[p + "mlp.fc2.bias"])
        return T.add(x, h)

    def _attention(self, x: Tensor, i: int, b: int, capture) -> Tensor:
        cfg = self.config
        P = self.params
        p = f"blocks.{i}.attn."
        n, d, nh, hd = cfg.seq_len, cfg.hidden_dim, cfg.num_heads, cfg.head_dim

        def heads(t: Tensor) -> Tensor:
            return T.transpose(T.reshape(t, (b, n, nh, hd)), (0, 2, 1, 3))

        q = heads(T.add(T.matmul(x, P[p + "q.weight"]), P[p + "q.bias"]))
        k = heads(T.add(T.matmul(x, P[p + "k.weight"]), P[p + "k.bias"]))
        v = heads(T.add(T.matmul(x, P[p + "v.weight"]), P[p + "v.bias"]))
        scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(hd))
        attn = T.softmax(scores)
        if capture is not None:
            capture.setdefault("attention", []).append(attn.data)
        ctx = T.matmul(attn, v)
        ctx = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (b, n, d))
        return T.add(T.matmul(ctx, P[p + "out.weight"]), P[p + "out.bias"])

    # -- parameter plumbing --------------------------------------------------

    def trainable(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.params.items() if v.requires_grad}

    def zero_grads(self) -> None:
        T.zero_grads(self.params.values())

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        if set(arrays) != set(self.params):
            missing = set(self.params) - set(arrays)
            extra = set(arrays) - set(self.params)
            raise ContractError(
                f"parameter name mismatch (missing={sorted(missing)}, "
                f"extra={sorted(extra)})"
            )
        for k, v in arrays.items():
            if v.shape != self.params[k].shape:
                raise ContractError(
                    f"parameter {k}: shape {v.shape} != expected {self.params[k].shape}"
                )
            self.params[k].data = v.astype(self.dtype, copy=True)
            self.params[k].grad = None


def parameter_count(model: DeitModel) -> int:
    return sum(p.size for p in model.params.values())


def replace_head(model: DeitModel, num_classes: int, seed: int = 0) -> DeitModel:
    """Swap in a freshly initialized classification head; every other
    parameter keeps its exact bytes. Same seed, same new head."""
    if num_classes < 2:
        raise ValidationError("num_classes must be >= 2")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed])))
    d = model.config.hidden_dim
    model.config = dataclasses.replace(model.config, num_classes=num_classes)
    model.params["head.weight"] = Tensor(
        _trunc_normal(rng, (d, num_classes)), requires_grad=True, dtype=model.dtype
    )
    model.params["head.bias"] = Tensor(
        np.zeros(num_classes, dtype=np.float32), requires_grad=True, dtype=model.dtype
    )
    return model


@dataclass(frozen=True)
class FreezeSpec:
    """Which parameter groups stay fixed during a stage.

    ``block_range`` is a half-open [start, stop) range of encoder block
    indices; ``freeze_embeddings`` covers the patch projection, the
    tokens and the positional embeddings. The final layer norm is
    frozen exactly when the range covers the last block. The head is
    never frozen.
    """

    block_range: tuple[int, int] = (0, 0)
    freeze_embeddings: bool = False


def apply_freeze(model: DeitModel, spec: FreezeSpec | None) -> None:
    """Set requires_grad flags per ``spec``; passing None (or an empty
    spec) marks everything trainable, so the call is idempotent."""
    spec = spec or FreezeSpec()
    start, stop = spec.block_range
    layers = model.config.num_layers
    if not (0 <= start <= stop <= layers):
        raise ContractError(
            f"block_range {spec.block_range} invalid for {layers} blocks"
        )
    freeze_final = stop == layers and start < stop
    for name, p in model.params.items():
        if name.startswith("blocks."):
            idx = int(name.split(".")[1])
            p.requires_grad = not (start <= idx < stop)
        elif name.split(".")[0] in ("patch_embed", "cls_token", "dist_token",
                                    "pos_embed"):
            p.requires_grad = not spec.freeze_embeddings
        elif name.startswith("final_norm."):
            p.requires_grad = not freeze_final
        else:  # head
            p.requires_grad = True
