"""Frozen toy ViT image encoder and hashing text encoder.

Both encoders are randomly initialised from a seed and never trained. The
visual path has no class token: all N = (image_size / patch_size)^2 tokens
map onto the square grid used by the adapters and heads.
"""

from __future__ import annotations

import hashlib
import math
import re
import zlib
from dataclasses import dataclass, field, fields
from functools import lru_cache
from typing import Callable

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, DimensionError, InputError
from .tensor import Tensor


def default_taps(depth):
    """Blocks at 3/12, 6/12 and 9/12 of the depth (3, 6, 9 for twelve blocks)."""
    return [int(math.floor(depth * k / 12 + 0.5)) for k in (3, 6, 9)]


@dataclass
class ViTConfig:
    image_size: int = 224
    patch_size: int = 16
    depth: int = 4
    width: int = 64
    heads: int = 4
    mlp_ratio: int = 4
    in_channels: int = 1
    tap_indices: list = field(default_factory=list)

    def __post_init__(self):
        if not self.tap_indices:
            self.tap_indices = default_taps(self.depth)
        self.tap_indices = [int(i) for i in self.tap_indices]
        self.validate()

    def validate(self):
        if self.image_size % self.patch_size:
            raise ConfigurationError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.width % self.heads:
            raise ConfigurationError(f"width {self.width} not divisible by heads {self.heads}")
        taps = self.tap_indices
        if any(b <= a for a, b in zip(taps, taps[1:])) or taps[0] < 0 or taps[-1] >= self.depth:
            raise ConfigurationError(f"tap_indices {taps} must be strictly increasing and < depth {self.depth}")

    @property
    def grid(self):
        return self.image_size // self.patch_size

    @property
    def num_tokens(self):
        return self.grid**2

    def to_header(self):
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = " ".join(map(str, v)) if isinstance(v, list) else v
        return out

    @classmethod
    def from_header(cls, header):
        kw = {}
        for f in fields(cls):
            if f.name in header:
                raw = header[f.name]
                kw[f.name] = [int(x) for x in raw.split()] if f.name == "tap_indices" else int(raw)
        return cls(**kw)


VIT_B16 = dict(image_size=224, patch_size=16, depth=12, width=768, heads=12, mlp_ratio=4)


def vit_param_shapes(config: ViTConfig):
    """Name -> shape of every backbone tensor, without allocating any."""
    d, hid = config.width, config.width * config.mlp_ratio
    patch_dim = config.patch_size**2 * config.in_channels
    shapes = {
        "patch_embed.weight": (patch_dim, d),
        "patch_embed.bias": (d,),
        "pos_embed": (config.num_tokens, d),
    }
    for i in range(config.depth):
        p = f"blocks.{i}."
        shapes[p + "ln1.weight"] = (d,)
        shapes[p + "ln1.bias"] = (d,)
        for proj in ("q", "k", "v", "o"):
            shapes[p + f"attn.{proj}.weight"] = (d, d)
            shapes[p + f"attn.{proj}.bias"] = (d,)
        shapes[p + "ln2.weight"] = (d,)
        shapes[p + "ln2.bias"] = (d,)
        shapes[p + "mlp.fc1.weight"] = (d, hid)
        shapes[p + "mlp.fc1.bias"] = (hid,)
        shapes[p + "mlp.fc2.weight"] = (hid, d)
        shapes[p + "mlp.fc2.bias"] = (d,)
    shapes["norm.weight"] = (d,)
    shapes["norm.bias"] = (d,)
    return shapes


def trunc_normal(rng, shape, std=0.02, dtype=np.float32):
    """Normal(0, std) truncated to +-2 std by resampling."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return (out * std).astype(dtype)


class ViTWeights:
    """Read-only backbone parameters.

    Arrays are flagged non-writeable; :meth:`checksum` hashes every byte so
    callers can prove nothing changed across a training run.
    """

    def __init__(self, config: ViTConfig, arrays: dict):
        self.config = config
        expected = vit_param_shapes(config)
        if set(arrays) != set(expected):
            missing = sorted(set(expected) ^ set(arrays))[:3]
            raise ConfigurationError(f"weights do not match config (e.g. {missing})")
        self.arrays = {}
        for name, arr in arrays.items():
            if tuple(arr.shape) != expected[name]:
                raise DimensionError(f"{name}: shape {arr.shape} != {expected[name]}")
            a = np.array(arr)
            a.flags.writeable = False
            self.arrays[name] = a
        self._tensors = {name: Tensor(a, dtype=a.dtype) for name, a in self.arrays.items()}

    def __getitem__(self, name) -> Tensor:
        return self._tensors[name]

    @property
    def dtype(self):
        return self.arrays["pos_embed"].dtype

    def num_params(self):
        return sum(a.size for a in self.arrays.values())

    def checksum(self):
        h = hashlib.sha256()
        for name in sorted(self.arrays):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.arrays[name]).tobytes())
        return h.hexdigest()

    def save(self, path):
        T.write_named_tensors(path, {"kind": "vit", **self.config.to_header()}, self.arrays)

    @classmethod
    def load(cls, path):
        header, tensors = T.read_named_tensors(path)
        return cls(ViTConfig.from_header(header), tensors)


def init_backbone(config: ViTConfig, seed: int, dtype=np.float32) -> ViTWeights:
    if not isinstance(config, ViTConfig):
        raise ConfigurationError("init_backbone needs a ViTConfig")
    config.validate()
    rng = np.random.default_rng(np.uint64(seed))
    arrays = {}
    for name, shape in vit_param_shapes(config).items():
        if name.endswith("ln1.weight") or name.endswith("ln2.weight") or name == "norm.weight":
            arrays[name] = np.ones(shape, dtype=dtype)
        elif name.endswith("bias"):
            arrays[name] = np.zeros(shape, dtype=dtype)
        else:
            arrays[name] = trunc_normal(rng, shape, dtype=dtype)
    return ViTWeights(config, arrays)


@dataclass
class TapSet:
    taps: dict
    final: Tensor

    def __getitem__(self, idx):
        return self.taps[idx]


def patchify(images, patch_size):
    """B x C x H x W array -> B x N x (C*P*P) array, row-major over the patch grid."""
    b, c, h, w = images.shape
    g_h, g_w = h // patch_size, w // patch_size
    x = images.reshape(b, c, g_h, patch_size, g_w, patch_size)
    x = x.transpose(0, 2, 4, 1, 3, 5)
    return x.reshape(b, g_h * g_w, c * patch_size * patch_size)


def tokens_to_map(tokens: Tensor) -> Tensor:
    """B x N x D tokens -> B x D x sqrt(N) x sqrt(N) map; token t sits at (t // s, t % s)."""
    b, n, d = tokens.shape
    s = math.isqrt(n)
    if s * s != n:
        raise DimensionError(f"token count {n} is not a perfect square")
    return T.reshape(T.transpose(tokens, (0, 2, 1)), (b, d, s, s))


def map_to_tokens(fmap: Tensor) -> Tensor:
    b, d, h, w = fmap.shape
    return T.transpose(T.reshape(fmap, (b, d, h * w)), (0, 2, 1))


def _layer_norm_affine(x, weight, bias):
    return T.add(T.mul(T.layer_norm(x), weight), bias)


def _projection(x, weights, prefix, lora, block, proj):
    y = T.linear(x, weights[f"{prefix}.weight"], weights[f"{prefix}.bias"])
    if lora is not None:
        y = lora.apply(x, y, block, proj)
    return y


def attention(x, weights, block, heads, lora=None):
    b, n, d = x.shape
    dh = d // heads
    p = f"blocks.{block}.attn"

    def split(t):
        return T.transpose(T.reshape(t, (b, n, heads, dh)), (0, 2, 1, 3))

    q = split(_projection(x, weights, f"{p}.q", lora, block, "q"))
    k = split(_projection(x, weights, f"{p}.k", lora, block, "k"))
    v = split(_projection(x, weights, f"{p}.v", lora, block, "v"))
    scores = T.mul(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    ctx = T.matmul(T.softmax(scores, axis=-1), v)
    ctx = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (b, n, d))
    return _projection(ctx, weights, f"{p}.o", lora, block, "o")


def block_forward(x, weights, block, heads, lora=None):
    p = f"blocks.{block}."
    h = _layer_norm_affine(x, weights[p + "ln1.weight"], weights[p + "ln1.bias"])
    x = T.add(x, attention(h, weights, block, heads, lora))
    h = _layer_norm_affine(x, weights[p + "ln2.weight"], weights[p + "ln2.bias"])
    h = T.gelu(T.linear(h, weights[p + "mlp.fc1.weight"], weights[p + "mlp.fc1.bias"]))
    h = T.linear(h, weights[p + "mlp.fc2.weight"], weights[p + "mlp.fc2.bias"])
    return T.add(x, h)


def embed(images, weights: ViTWeights, config: ViTConfig):
    arr = images.data if isinstance(images, Tensor) else np.asarray(images)
    expect = (config.in_channels, config.image_size, config.image_size)
    if arr.ndim != 4 or arr.shape[1:] != expect:
        raise DimensionError(f"image batch {arr.shape} does not match B x {expect[0]} x {expect[1]} x {expect[2]}")
    patches = Tensor(patchify(arr.astype(weights.dtype, copy=False), config.patch_size))
    x = T.linear(patches, weights["patch_embed.weight"], weights["patch_embed.bias"])
    return T.add(x, weights["pos_embed"])


def vit_forward(
    images,
    weights: ViTWeights,
    config: ViTConfig | None = None,
    *,
    post_block: Callable | None = None,
    lora=None,
    depth: int | None = None,
) -> TapSet:
    """Run the frozen encoder; ``post_block(i, tokens)`` may rewrite each block's output.

    Taps are taken after ``post_block`` so adapted models expose adapted features.
    ``depth`` truncates the stack (used to check tap consistency).
    """
    config = config or weights.config
    x = embed(images, weights, config)
    taps = {}
    n_blocks = config.depth if depth is None else depth
    for i in range(n_blocks):
        x = block_forward(x, weights, i, config.heads, lora)
        if post_block is not None:
            x = post_block(i, x)
        if i in config.tap_indices:
            taps[i] = x
    return TapSet(taps=taps, final=x)


# ---------------------------------------------------------------- text encoder

VOCAB = 1024
_TOKEN_SPLIT = re.compile(r"[^0-9a-z]+")


def tokenize(caption: str):
    """Lowercase, split on non-alphanumerics, id = crc32(token) mod 1024."""
    words = [w for w in _TOKEN_SPLIT.split(caption.lower()) if w]
    return [zlib.crc32(w.encode("utf-8")) % VOCAB for w in words]


class TextEncoder:
    """Frozen two-block transformer over hashed tokens; mean-pooled, unit-norm output."""

    def __init__(self, width=64, heads=4, depth=2, max_len=64, vocab_seed=0):
        self.config = ViTConfig(image_size=16, patch_size=16, depth=depth, width=width, heads=heads,
                                tap_indices=[depth - 1])
        self.max_len = max_len
        rng = np.random.default_rng(np.uint64(vocab_seed))
        self.token_embed = trunc_normal(rng, (VOCAB, width), std=1.0, dtype=np.float64)
        self.pos_embed = trunc_normal(rng, (max_len, width), std=0.02, dtype=np.float64)
        arrays = {}
        for name, shape in vit_param_shapes(self.config).items():
            if not name.startswith("blocks.") and name != "norm.weight" and name != "norm.bias":
                continue
            if name.endswith(("ln1.weight", "ln2.weight")) or name == "norm.weight":
                arrays[name] = np.ones(shape)
            elif name.endswith("bias"):
                arrays[name] = np.zeros(shape)
            else:
                arrays[name] = trunc_normal(rng, shape, std=0.02, dtype=np.float64)
        self.blocks = {k: Tensor(v) for k, v in arrays.items()}

    def __call__(self, caption: str) -> np.ndarray:
        if not caption or not caption.strip():
            raise InputError("caption is empty")
        ids = tokenize(caption)[: self.max_len]
        if not ids:
            raise InputError(f"caption {caption!r} has no alphanumeric tokens")
        x = Tensor((self.token_embed[ids] + self.pos_embed[: len(ids)])[None])
        for i in range(self.config.depth):
            x = block_forward(x, self.blocks, i, self.config.heads)
        x = _layer_norm_affine(x, self.blocks["norm.weight"], self.blocks["norm.bias"])
        v = x.data[0].mean(axis=0)
        return v / np.linalg.norm(v)


@lru_cache(maxsize=8)
def _text_encoder(vocab_seed, width):
    return TextEncoder(width=width, vocab_seed=vocab_seed)


def text_encode(caption: str, vocab_seed: int = 0, width: int = 64) -> np.ndarray:
    return _text_encoder(int(vocab_seed), int(width))(caption)
