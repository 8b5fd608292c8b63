"""Minimal ViT encoder: patchify, patch embedding, [CLS], 2D sin-cos PE, blocks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError
from .tensor import Tensor

LN_EPS = 1e-6
INIT_STD = 0.02


@dataclass
class ViTConfig:
    image_size: int = 32
    patch_size: int = 4
    channels: int = 3
    embed_dim: int = 64
    depth: int = 4
    heads: int = 4
    mlp_ratio: float = 4.0
    decoder_dim: int = 32
    decoder_depth: int = 2
    decoder_heads: int = 4

    def __post_init__(self):
        if self.patch_size < 1 or self.image_size % self.patch_size:
            raise ConfigError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.embed_dim % self.heads:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.embed_dim % 4:
            raise ConfigError(f"embed_dim {self.embed_dim} must be a multiple of 4 for 2D sin-cos")
        if self.decoder_depth and self.decoder_dim % self.decoder_heads:
            raise ConfigError(
                f"decoder_dim {self.decoder_dim} not divisible by decoder_heads {self.decoder_heads}")

    @property
    def grid_size(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid_size ** 2

    @property
    def patch_dim(self) -> int:
        return self.patch_size ** 2 * self.channels


def patchify(images: np.ndarray, patch_size: int) -> np.ndarray:
    """``[..., H, W, C]`` -> ``[..., N, P*P*C]`` with patches in raster order."""
    *lead, h, w, c = images.shape
    p = patch_size
    if h % p or w % p:
        raise ConfigError(f"image {h}x{w} not divisible by patch size {p}")
    gh, gw = h // p, w // p
    x = images.reshape(*lead, gh, p, gw, p, c)
    nl = len(lead)
    x = x.transpose(*range(nl), nl, nl + 2, nl + 1, nl + 3, nl + 4)
    return np.ascontiguousarray(x.reshape(*lead, gh * gw, p * p * c))


def unpatchify(patches: np.ndarray, patch_size: int, channels: int) -> np.ndarray:
    *lead, n, _ = patches.shape
    p = patch_size
    g = int(round(np.sqrt(n)))
    if g * g != n:
        raise ConfigError(f"{n} patches do not form a square grid")
    x = patches.reshape(*lead, g, g, p, p, channels)
    nl = len(lead)
    x = x.transpose(*range(nl), nl, nl + 2, nl + 1, nl + 3, nl + 4)
    return np.ascontiguousarray(x.reshape(*lead, g * p, g * p, channels))


def _sincos_1d(dim: int, pos: np.ndarray) -> np.ndarray:
    # pe[2k] = sin(pos * w_k), pe[2k+1] = cos(pos * w_k), w_k = 10000^(-2k/dim)
    k = np.arange(dim // 2, dtype=np.float64)
    omega = 10000.0 ** (-2.0 * k / dim)
    ang = pos.astype(np.float64)[:, None] * omega[None, :]
    out = np.empty((len(pos), dim))
    out[:, 0::2] = np.sin(ang)
    out[:, 1::2] = np.cos(ang)
    return out


def build_sincos_pe(grid_h: int, grid_w: int, dim: int, dtype=np.float32) -> np.ndarray:
    """Fixed 2D sine-cosine table of shape ``[grid_h*grid_w + 1, dim]``.

    Row 0 belongs to [CLS] and is all zeros.  For patch ``(r, c)`` the first
    ``dim/2`` entries encode the row, the second half encodes the column.
    """
    if dim % 4:
        raise ConfigError(f"sin-cos PE needs dim divisible by 4, got {dim}")
    rows, cols = np.divmod(np.arange(grid_h * grid_w), grid_w)
    half = dim // 2
    table = np.zeros((grid_h * grid_w + 1, dim))
    table[1:, :half] = _sincos_1d(half, rows)
    table[1:, half:] = _sincos_1d(half, cols)
    return table.astype(dtype)


def trunc_normal(rng: np.random.Generator, shape, std: float = INIT_STD) -> np.ndarray:
    x = rng.standard_normal(shape)
    bad = np.abs(x) > 2.0
    while bad.any():
        x[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(x) > 2.0
    return x * std


def init_block(rng: np.random.Generator, prefix: str, dim: int, mlp_ratio: float) -> dict:
    hidden = int(dim * mlp_ratio)
    return {
        f"{prefix}.norm1.weight": np.ones(dim),
        f"{prefix}.norm1.bias": np.zeros(dim),
        f"{prefix}.attn.qkv.weight": trunc_normal(rng, (dim, 3 * dim)),
        f"{prefix}.attn.qkv.bias": np.zeros(3 * dim),
        f"{prefix}.attn.proj.weight": trunc_normal(rng, (dim, dim)),
        f"{prefix}.attn.proj.bias": np.zeros(dim),
        f"{prefix}.norm2.weight": np.ones(dim),
        f"{prefix}.norm2.bias": np.zeros(dim),
        f"{prefix}.mlp.fc1.weight": trunc_normal(rng, (dim, hidden)),
        f"{prefix}.mlp.fc1.bias": np.zeros(hidden),
        f"{prefix}.mlp.fc2.weight": trunc_normal(rng, (hidden, dim)),
        f"{prefix}.mlp.fc2.bias": np.zeros(dim),
    }


def init_encoder(cfg: ViTConfig, rng: np.random.Generator) -> dict:
    d = cfg.embed_dim
    params = {
        "encoder.patch_embed.weight": trunc_normal(rng, (cfg.patch_dim, d)),
        "encoder.patch_embed.bias": np.zeros(d),
        "encoder.cls_token": trunc_normal(rng, (d,)),
    }
    for i in range(cfg.depth):
        params.update(init_block(rng, f"encoder.blocks.{i}", d, cfg.mlp_ratio))
    params["encoder.norm.weight"] = np.ones(d)
    params["encoder.norm.bias"] = np.zeros(d)
    return params


def attention(x: Tensor, p: dict, prefix: str, heads: int, record: list | None = None) -> Tensor:
    b, n, d = x.shape
    dh = d // heads
    qkv = T.linear(x, p[f"{prefix}.qkv.weight"], p[f"{prefix}.qkv.bias"])
    qkv = qkv.reshape(b, n, 3, heads, dh).transpose(2, 0, 3, 1, 4)
    q, k, v = qkv[0], qkv[1], qkv[2]
    scores = (q @ T.swap_last(k)) * (1.0 / np.sqrt(dh))
    attn = T.softmax(scores, axis=-1)
    if record is not None:
        record.append(attn.data)
    out = (attn @ v).transpose(0, 2, 1, 3).reshape(b, n, d)
    return T.linear(out, p[f"{prefix}.proj.weight"], p[f"{prefix}.proj.bias"])


def block(x: Tensor, p: dict, prefix: str, heads: int, record: list | None = None) -> Tensor:
    """Pre-norm transformer block: x + MHSA(LN(x)), then x + MLP(LN(x))."""
    h = T.layer_norm(x, p[f"{prefix}.norm1.weight"], p[f"{prefix}.norm1.bias"], LN_EPS)
    x = x + attention(h, p, f"{prefix}.attn", heads, record)
    h = T.layer_norm(x, p[f"{prefix}.norm2.weight"], p[f"{prefix}.norm2.bias"], LN_EPS)
    h = T.gelu(T.linear(h, p[f"{prefix}.mlp.fc1.weight"], p[f"{prefix}.mlp.fc1.bias"]))
    return x + T.linear(h, p[f"{prefix}.mlp.fc2.weight"], p[f"{prefix}.mlp.fc2.bias"])


def embed_patches(patches: np.ndarray, p: dict) -> Tensor:
    w = p["encoder.patch_embed.weight"]
    return T.linear(Tensor(patches.astype(w.dtype, copy=False)), w, p["encoder.patch_embed.bias"])


def encode(z: Tensor, p: dict, cfg: ViTConfig, record: list | None = None) -> Tensor:
    """Run the encoder on ``z' = [x_cls; x_vis] + p'`` of shape ``[B, n+1, D]``.

    Output row 0 is the [CLS] feature, rows ``1..n`` the patch features.
    """
    if z.ndim == 2:
        return encode(z.reshape(1, *z.shape), p, cfg, record).reshape(z.shape)
    if z.shape[-1] != cfg.embed_dim or z.shape[1] < 2:
        raise ContractError(f"encoder input {z.shape} incompatible with embed_dim {cfg.embed_dim}")
    for i in range(cfg.depth):
        z = block(z, p, f"encoder.blocks.{i}", cfg.heads, record)
    return T.layer_norm(z, p["encoder.norm.weight"], p["encoder.norm.bias"], LN_EPS)
