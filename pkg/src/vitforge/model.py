"""The Vision Transformer classifier.

Pipeline: non-overlapping patch flattening, linear projection with learned
positional embeddings, a stack of pre-layernorm encoder layers (multi-head
self-attention and a two-layer MLP, each wrapped in residual connections),
a final layernorm, then an MLP head over all flattened token features.

Parameters live in an ordered name -> Tensor dict so the optimizer and the
checkpoint format can address them uniformly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

__all__ = [
    "ViTConfig",
    "param_shapes",
    "init_params",
    "patchify",
    "unpatchify",
    "embed",
    "mhsa",
    "encoder_layer",
    "forward",
    "count_parameters",
]

# conventional power-of-two alternative to the default (2042, 1048) head
POWER_OF_TWO_HEAD_DIMS = (2048, 1024)


@dataclass
class ViTConfig:
    """Architecture hyperparameters.

    Defaults give the 72x72x3 / patch-6 / depth-8 configuration: 144 patches
    of 108 raw values projected to 64 dims, encoder MLPs of (128, 64), and a
    (2042, 1048) classification head. ``head_dims`` accepts
    ``POWER_OF_TWO_HEAD_DIMS`` for the conventional sizing.
    """

    image_size: tuple[int, int, int] = (72, 72, 3)
    patch_size: int = 6
    projection_dim: int = 64
    num_layers: int = 8
    num_heads: int = 4
    encoder_mlp_dims: tuple[int, ...] = (128, 64)
    head_dims: tuple[int, ...] = (2042, 1048)
    num_classes: int = 4
    dropout_rate: float = 0.1
    head_dropout_rate: float = 0.5
    activation: str = "gelu"
    layernorm_eps: float = 1e-6

    def __post_init__(self):
        self.image_size = tuple(int(v) for v in self.image_size)
        self.encoder_mlp_dims = tuple(int(v) for v in self.encoder_mlp_dims)
        self.head_dims = tuple(int(v) for v in self.head_dims)
        h, w, c = self.image_size
        p = self.patch_size
        dims = (h, w, c, p, self.projection_dim, self.num_heads,
                self.num_classes, *self.encoder_mlp_dims, *self.head_dims)
        if any(d <= 0 for d in dims):
            raise ValueError(f"all dimensions must be positive: {self}")
        if self.num_layers < 0:
            raise ValueError("num_layers must be nonnegative")
        if h % p != 0 or w % p != 0:
            raise ValueError(
                f"image size {h}x{w} not divisible by patch size {p}"
            )
        if self.projection_dim % self.num_heads != 0:
            raise ValueError(
                f"projection_dim {self.projection_dim} not divisible by "
                f"num_heads {self.num_heads}"
            )
        if self.encoder_mlp_dims[-1] != self.projection_dim:
            raise ValueError(
                f"encoder MLP must end at projection_dim "
                f"{self.projection_dim}, got {self.encoder_mlp_dims}"
            )
        if not 0.0 <= self.dropout_rate < 1.0 or not 0.0 <= self.head_dropout_rate < 1.0:
            raise ValueError("dropout rates must be in [0, 1)")
        if self.activation not in ("gelu", "relu"):
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def num_patches(self) -> int:
        h, w, _ = self.image_size
        return (h // self.patch_size) * (w // self.patch_size)

    @property
    def patch_elements(self) -> int:
        return self.patch_size * self.patch_size * self.image_size[2]


def _trunc_normal(rng: np.random.Generator, shape, std=0.02, dtype=np.float32):
    """Normal(0, std) resampled until everything lies within two deviations."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2.0 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2.0 * std
    return out.astype(dtype)


def param_shapes(cfg: ViTConfig) -> dict[str, tuple[tuple[int, ...], str]]:
    """Ordered name -> (shape, init kind) table; kinds are ``weight``
    (truncated normal), ``zeros``, and ``ones``."""
    spec: dict[str, tuple[tuple[int, ...], str]] = {}
    d = cfg.projection_dim
    spec["patch_embed.w"] = ((cfg.patch_elements, d), "weight")
    spec["patch_embed.b"] = ((d,), "zeros")
    spec["pos_embed"] = ((cfg.num_patches, d), "weight")
    for i in range(cfg.num_layers):
        prefix = f"enc{i}"
        spec[f"{prefix}.ln1.gain"] = ((d,), "ones")
        spec[f"{prefix}.ln1.bias"] = ((d,), "zeros")
        for proj in ("q", "k", "v", "out"):
            spec[f"{prefix}.attn.{proj}.w"] = ((d, d), "weight")
            spec[f"{prefix}.attn.{proj}.b"] = ((d,), "zeros")
        spec[f"{prefix}.ln2.gain"] = ((d,), "ones")
        spec[f"{prefix}.ln2.bias"] = ((d,), "zeros")
        fan_in = d
        for j, units in enumerate(cfg.encoder_mlp_dims):
            spec[f"{prefix}.mlp.fc{j}.w"] = ((fan_in, units), "weight")
            spec[f"{prefix}.mlp.fc{j}.b"] = ((units,), "zeros")
            fan_in = units
    spec["head.ln.gain"] = ((d,), "ones")
    spec["head.ln.bias"] = ((d,), "zeros")
    fan_in = cfg.num_patches * d
    for j, units in enumerate(cfg.head_dims):
        spec[f"head.fc{j}.w"] = ((fan_in, units), "weight")
        spec[f"head.fc{j}.b"] = ((units,), "zeros")
        fan_in = units
    spec["head.out.w"] = ((fan_in, cfg.num_classes), "weight")
    spec["head.out.b"] = ((cfg.num_classes,), "zeros")
    return spec


def init_params(cfg: ViTConfig, rng: np.random.Generator,
                dtype=np.float32) -> dict[str, Tensor]:
    """Fresh trainable parameters: truncated-normal weights and positional
    table (sigma 0.02), zero biases, unit layernorm gains."""
    builders = {
        "weight": lambda shape: _trunc_normal(rng, shape, dtype=dtype),
        "zeros": lambda shape: np.zeros(shape, dtype=dtype),
        "ones": lambda shape: np.ones(shape, dtype=dtype),
    }
    return {
        name: Tensor(builders[kind](shape), requires_grad=True)
        for name, (shape, kind) in param_shapes(cfg).items()
    }


def patchify(images: Tensor, patch_size: int) -> Tensor:
    """Cut [B,H,W,C] images into the row-major grid of non-overlapping
    patches, each flattened row-major: output [B, N, P*P*C] with N = HW/P^2."""
    if images.ndim != 4:
        raise ShapeError(f"expected [B,H,W,C] images, got {images.shape}")
    b, h, w, c = images.shape
    p = patch_size
    if h % p != 0 or w % p != 0:
        raise ShapeError(f"image {h}x{w} not divisible by patch size {p}")
    gh, gw = h // p, w // p
    x = T.reshape(images, (b, gh, p, gw, p, c))
    x = T.transpose(x, (0, 1, 3, 2, 4, 5))
    return T.reshape(x, (b, gh * gw, p * p * c))


def unpatchify(patches: Tensor, image_size: tuple[int, int, int],
               patch_size: int) -> Tensor:
    """Exact inverse of :func:`patchify`."""
    h, w, c = image_size
    p = patch_size
    gh, gw = h // p, w // p
    b = patches.shape[0]
    x = T.reshape(patches, (b, gh, gw, p, p, c))
    x = T.transpose(x, (0, 1, 3, 2, 4, 5))
    return T.reshape(x, (b, h, w, c))


def _linear(x: Tensor, params: dict, name: str) -> Tensor:
    return T.linear(x, params[f"{name}.w"], params[f"{name}.b"])


def embed(patches: Tensor, params: dict) -> Tensor:
    """Project flattened patches to the model width and add the learned
    per-position embedding (shared across the batch)."""
    projected = _linear(patches, params, "patch_embed")
    return T.add(projected, params["pos_embed"])


def mhsa(x: Tensor, params: dict, prefix: str, num_heads: int,
         collect_attention: list | None = None) -> Tensor:
    """Multi-head self-attention: per head, softmax(Q K^T / sqrt(d_h)) V;
    heads are concatenated and output-projected."""
    b, n, d = x.shape
    if d % num_heads != 0:
        raise ShapeError(f"width {d} not divisible by {num_heads} heads")
    dh = d // num_heads

    def heads(t: Tensor) -> Tensor:
        return T.transpose(T.reshape(t, (b, n, num_heads, dh)), (0, 2, 1, 3))

    q = heads(_linear(x, params, f"{prefix}.attn.q"))
    k = heads(_linear(x, params, f"{prefix}.attn.k"))
    v = heads(_linear(x, params, f"{prefix}.attn.v"))
    attn = T.attention_probs(q, k, 1.0 / math.sqrt(dh))
    if collect_attention is not None:
        collect_attention.append(attn)
    ctx = T.matmul(attn, v)
    merged = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (b, n, d))
    return _linear(merged, params, f"{prefix}.attn.out")


def _activation(cfg: ViTConfig):
    return T.gelu if cfg.activation == "gelu" else T.relu


def encoder_layer(x: Tensor, params: dict, prefix: str, cfg: ViTConfig,
                  training: bool = False, rng: np.random.Generator | None = None,
                  collect_attention: list | None = None) -> Tensor:
    """Pre-layernorm block: x + Drop(MHSA(LN(x))), then y + Drop(MLP(LN(y)))."""
    act = _activation(cfg)
    eps = cfg.layernorm_eps
    normed = T.layernorm(x, params[f"{prefix}.ln1.gain"], params[f"{prefix}.ln1.bias"], eps)
    attended = mhsa(normed, params, prefix, cfg.num_heads, collect_attention)
    y = T.add(x, T.dropout(attended, cfg.dropout_rate, rng, training))
    normed = T.layernorm(y, params[f"{prefix}.ln2.gain"], params[f"{prefix}.ln2.bias"], eps)
    h = normed
    for j in range(len(cfg.encoder_mlp_dims)):
        h = act(_linear(h, params, f"{prefix}.mlp.fc{j}"))
    return T.add(y, T.dropout(h, cfg.dropout_rate, rng, training))


def forward(images: Tensor, params: dict, cfg: ViTConfig,
            training: bool = False, rng: np.random.Generator | None = None,
            collect_attention: list | None = None) -> Tensor:
    """Full classifier forward pass to [B, num_classes] logits.

    Eval mode (``training=False``) is deterministic; train mode needs an
    explicit RNG for dropout.
    """
    expected = cfg.image_size
    if images.ndim != 4 or tuple(images.shape[1:]) != expected:
        raise ShapeError(
            f"images shaped {images.shape} do not match configured {expected}"
        )
    x = embed(patchify(images, cfg.patch_size), params)
    for i in range(cfg.num_layers):
        x = encoder_layer(x, params, f"enc{i}", cfg, training, rng, collect_attention)
    x = T.layernorm(x, params["head.ln.gain"], params["head.ln.bias"], cfg.layernorm_eps)
    b = x.shape[0]
    h = T.reshape(x, (b, cfg.num_patches * cfg.projection_dim))
    act = _activation(cfg)
    for j in range(len(cfg.head_dims)):
        h = act(_linear(h, params, f"head.fc{j}"))
        h = T.dropout(h, cfg.head_dropout_rate, rng, training)
    return _linear(h, params, "head.out")


def count_parameters(params: dict) -> tuple[int, dict[str, int]]:
    """Total scalar count plus a per-component breakdown keyed by the first
    dotted name segment."""
    breakdown: dict[str, int] = {}
    for name, tensor in params.items():
        component = name.split(".", 1)[0]
        breakdown[component] = breakdown.get(component, 0) + tensor.size
    return sum(breakdown.values()), breakdown
