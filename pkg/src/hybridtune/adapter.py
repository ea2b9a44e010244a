"""Hybrid Tuning adapter, the LoRA comparison arm, and parameter accounting.

One :class:`HTParams` sits after every transformer block::

    Z_in   = (LN(Z) * gamma + Z * gamma_x) @ W_down + b_down     -> F_in  (B x d x s x s)
    F_freq = irfft2(rfft2(F_in) * theta)
    w      = softmax(W2 relu(W1 GAP(F_freq)))                    (B x 3 x 1 x 1)
    F_sum  = sum_i w_i * DWConv_{k_i}(F_freq) + F_in
    F_multi= PWConv(F_sum) + F_sum
    H      = Z + dropout(gelu(tokens(F_multi))) @ W_up + b_up

``W_up`` and ``b_up`` start at zero, so a fresh adapter is an exact identity.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np

from . import tensor as T
from .backbone import ViTWeights, map_to_tokens, tokens_to_map, trunc_normal, vit_forward
from .errors import ConfigurationError, DimensionError
from .tensor import Tensor

KERNELS = (3, 5, 7)


@dataclass
class HTConfig:
    D: int = 64
    d: int = 16
    h: int = 8
    kernels: tuple = KERNELS
    dropout: float = 0.1

    def __post_init__(self):
        self.kernels = tuple(int(k) for k in self.kernels)
        if not 0 < self.d < self.D:
            raise ConfigurationError(f"bottleneck d={self.d} must satisfy 0 < d < D={self.D}")
        if self.h < 1:
            raise ConfigurationError(f"squeeze width h={self.h} must be positive")
        if len(self.kernels) != 3:
            raise ConfigurationError(f"need exactly 3 kernel sizes, got {self.kernels}")
        if any(k % 2 == 0 for k in self.kernels):
            raise ConfigurationError(f"kernel sizes {self.kernels} must be odd")

    def to_header(self):
        return {"D": self.D, "d": self.d, "h": self.h,
                "kernels": " ".join(map(str, self.kernels)), "dropout": self.dropout}

    @classmethod
    def from_header(cls, header):
        return cls(D=int(header["D"]), d=int(header["d"]), h=int(header["h"]),
                   kernels=tuple(int(k) for k in header["kernels"].split()),
                   dropout=float(header["dropout"]))


HT_B16 = HTConfig(D=768, d=64, h=16)


@dataclass
class HTParams:
    gamma: Tensor
    gamma_x: Tensor
    ln_weight: Tensor
    ln_bias: Tensor
    w_down: Tensor
    b_down: Tensor
    theta: Tensor
    ne_w1: Tensor
    ne_b1: Tensor
    ne_w2: Tensor
    ne_b2: Tensor
    dw_kernels: list
    dw_biases: list
    pw_weight: Tensor
    pw_bias: Tensor
    w_up: Tensor
    b_up: Tensor
    config: HTConfig = field(default_factory=HTConfig)

    @classmethod
    def init(cls, config: HTConfig, rng, dtype=np.float32):
        D, d, h = config.D, config.d, config.h

        def p(arr):
            return Tensor(np.asarray(arr, dtype=dtype), requires_grad=True)

        return cls(
            gamma=p(np.ones(D)),
            gamma_x=p(np.ones(D)),
            ln_weight=p(np.ones(D)),
            ln_bias=p(np.zeros(D)),
            w_down=p(trunc_normal(rng, (D, d), std=D**-0.5, dtype=dtype)),
            b_down=p(np.zeros(d)),
            theta=p(np.ones(d)),
            ne_w1=p(trunc_normal(rng, (h, d), std=d**-0.5, dtype=dtype)),
            ne_b1=p(np.zeros(h)),
            ne_w2=p(np.zeros((3, h))),  # equal branch weights until trained
            ne_b2=p(np.zeros(3)),
            dw_kernels=[p(trunc_normal(rng, (d, k, k), std=1.0 / k, dtype=dtype)) for k in config.kernels],
            dw_biases=[p(np.zeros(d)) for _ in config.kernels],
            pw_weight=p(trunc_normal(rng, (d, d), std=d**-0.5, dtype=dtype)),
            pw_bias=p(np.zeros(d)),
            w_up=p(np.zeros((d, D))),
            b_up=p(np.zeros(D)),
            config=config,
        )

    def named_tensors(self):
        out = {}
        for f in fields(self):
            if f.name == "config":
                continue
            v = getattr(self, f.name)
            if isinstance(v, list):
                for k, t in zip(self.config.kernels, v):
                    out[f"{f.name}.{k}"] = t
            else:
                out[f.name] = v
        return out

    def num_params(self):
        return sum(t.size for t in self.named_tensors().values())

    def load_arrays(self, arrays: dict):
        for name, t in self.named_tensors().items():
            if arrays[name].shape != t.shape:
                raise DimensionError(f"{name}: checkpoint {arrays[name].shape} vs {t.shape}")
            t.data = np.array(arrays[name], dtype=t.dtype)


def ht_param_count(D, d, h, kernels=KERNELS):
    """Closed-form trainable parameter count of one adapter."""
    return (
        2 * D  # gamma, gamma_x
        + 2 * D  # LayerNorm affine
        + D * d + d  # down projection
        + d  # theta
        + d * h + h  # squeeze conv 1
        + 3 * h + 3  # squeeze conv 2
        + d * sum(k * k for k in kernels) + len(kernels) * d  # depthwise bank
        + d * d + d  # pointwise
        + d * D + D  # up projection
    )


def ff_apply(f_in: Tensor, theta: Tensor) -> Tensor:
    return T.rfft2_filter(f_in, theta)


def ne_weights(f_freq: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> Tensor:
    """GAP -> 1x1 conv -> ReLU -> 1x1 conv to 3 -> softmax; returns B x 3 x 1 x 1."""
    pooled = T.global_avg_pool(f_freq)
    hidden = T.relu(T.pointwise_conv2d(pooled, w1, b1))
    return T.softmax(T.pointwise_conv2d(hidden, w2, b2), axis=1)


_ONE_HOT = {}


def _branch_weight(w: Tensor, i: int) -> Tensor:
    key = (i, w.dtype)
    if key not in _ONE_HOT:
        e = np.zeros((1, 3, 1, 1), dtype=w.dtype)
        e[0, i] = 1.0
        _ONE_HOT[key] = e
    return T.tsum(T.mul(w, _ONE_HOT[key]), axis=1, keepdims=True)


def ne_mix(f_freq: Tensor, f_in: Tensor, w: Tensor, dw_bank, pointwise) -> Tensor:
    """F_multi from the weighted depthwise bank; ``dw_bank`` is three (kernel, bias) pairs."""
    if len(dw_bank) != 3:
        raise ConfigurationError(f"depthwise bank needs 3 branches, got {len(dw_bank)}")
    f_sum = f_in
    for i, (kernel, bias) in enumerate(dw_bank):
        f_sum = T.add(f_sum, T.mul(_branch_weight(w, i), T.depthwise_conv2d(f_freq, kernel, bias)))
    pw_weight, pw_bias = pointwise
    return T.add(T.pointwise_conv2d(f_sum, pw_weight, pw_bias), f_sum)


def ht_forward(z: Tensor, params: HTParams, training=False, rng=None, probe=None) -> Tensor:
    """Apply one adapter to B x N x D tokens; ``probe`` (a dict) receives F_in, F_freq and w."""
    cfg = params.config
    if z.ndim != 3 or z.shape[2] != cfg.D:
        raise DimensionError(f"adapter expects B x N x {cfg.D} tokens, got {z.shape}")
    normed = T.add(T.mul(T.layer_norm(z), params.ln_weight), params.ln_bias)
    mixed = T.add(T.mul(normed, params.gamma), T.mul(z, params.gamma_x))
    z_in = T.linear(mixed, params.w_down, params.b_down)
    f_in = tokens_to_map(z_in)
    f_freq = ff_apply(f_in, params.theta)
    w = ne_weights(f_freq, params.ne_w1, params.ne_b1, params.ne_w2, params.ne_b2)
    f_multi = ne_mix(f_freq, f_in, w, list(zip(params.dw_kernels, params.dw_biases)),
                     (params.pw_weight, params.pw_bias))
    if probe is not None:
        probe.update(f_in=f_in.data, f_freq=f_freq.data, w=w.data)
    z_out = T.gelu(map_to_tokens(f_multi))
    z_out = T.dropout(z_out, cfg.dropout, training=training, rng=rng)
    return T.add(z, T.linear(z_out, params.w_up, params.b_up))


def save_adapters(path, adapters):
    tensors = {}
    for i, a in enumerate(adapters):
        for name, t in a.named_tensors().items():
            tensors[f"layer{i}.{name}"] = t.data
    T.write_named_tensors(path, {"kind": "ht", "layers": len(adapters), **adapters[0].config.to_header()}, tensors)


def load_adapters(path, dtype=np.float32):
    header, tensors = T.read_named_tensors(path)
    config = HTConfig.from_header(header)
    out = []
    for i in range(int(header["layers"])):
        a = HTParams.init(config, np.random.default_rng(0), dtype=dtype)
        prefix = f"layer{i}."
        a.load_arrays({k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)})
        out.append(a)
    return out


# ---------------------------------------------------------------- LoRA

LORA_TARGETS = ("q", "k", "v", "o")


class LoRAParams:
    """Low-rank updates W + (alpha / r) A B on the q/k/v/o projections of every block."""

    def __init__(self, width, depth, r, alpha=None, rng=None, dtype=np.float32, targets=LORA_TARGETS):
        if r < 1:
            raise ConfigurationError(f"LoRA rank must be >= 1, got {r}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.r = int(r)
        self.alpha = float(r if alpha is None else alpha)
        self.scale = self.alpha / self.r
        self.targets = tuple(targets)
        self.pairs = {}
        for block in range(depth):
            for proj in self.targets:
                a = Tensor(trunc_normal(rng, (width, r), std=width**-0.5, dtype=dtype), requires_grad=True)
                b = Tensor(np.zeros((r, width), dtype=dtype), requires_grad=True)
                self.pairs[(block, proj)] = (a, b)

    def apply(self, x, y, block, proj):
        pair = self.pairs.get((block, proj))
        if pair is None:
            return y
        a, b = pair
        return T.add(y, T.mul(T.matmul(T.matmul(x, a), b), self.scale))

    def named_tensors(self):
        out = {}
        for (block, proj), (a, b) in self.pairs.items():
            out[f"blocks.{block}.{proj}.A"] = a
            out[f"blocks.{block}.{proj}.B"] = b
        return out

    def num_params(self):
        return sum(t.size for t in self.named_tensors().values())


def lora_param_count(width, depth, r, n_targets=len(LORA_TARGETS)):
    return n_targets * 2 * width * r * depth


def lora_attach(weights: ViTWeights, r, alpha=None, seed=0):
    """Returns (forward(images) -> TapSet, LoRAParams); frozen weights stay untouched."""
    cfg = weights.config
    lora = LoRAParams(cfg.width, cfg.depth, r, alpha, rng=np.random.default_rng(seed), dtype=weights.dtype)

    def forward(images):
        return vit_forward(images, weights, lora=lora)

    return forward, lora


# ---------------------------------------------------------------- attaching HT


class AdaptedBackbone:
    """Frozen ViT with one HT adapter piped after each block (or none: frozen baseline)."""

    def __init__(self, weights: ViTWeights, adapters=None, lora=None):
        cfg = weights.config
        if adapters is not None and len(adapters) != cfg.depth:
            raise ConfigurationError(f"{len(adapters)} adapters for a {cfg.depth}-block backbone")
        if adapters is not None and any(a.config.D != cfg.width for a in adapters):
            raise DimensionError("adapter width does not match backbone width")
        self.weights = weights
        self.config = cfg
        self.adapters = adapters
        self.lora = lora

    def forward(self, images, training=False, rng=None, probes=None):
        """TapSet for a batch; ``probes`` (a list) collects one adapter probe dict per block."""

        def post(i, x):
            probe = None
            if probes is not None:
                probe = {}
                probes.append(probe)
            return ht_forward(x, self.adapters[i], training=training, rng=rng, probe=probe)

        return vit_forward(images, self.weights, post_block=post if self.adapters is not None else None,
                           lora=self.lora)

    def named_tensors(self):
        out = {}
        for i, a in enumerate(self.adapters or []):
            for name, t in a.named_tensors().items():
                out[f"adapters.{i}.{name}"] = t
        if self.lora is not None:
            for name, t in self.lora.named_tensors().items():
                out[f"lora.{name}"] = t
        return out


def attach_ht(weights: ViTWeights, config: HTConfig | list, seed=0, dtype=None) -> AdaptedBackbone:
    """Build an adapted backbone; ``config`` may be an HTConfig or a ready list of HTParams."""
    if isinstance(config, HTConfig):
        rng = np.random.default_rng(seed)
        adapters = [HTParams.init(config, rng, dtype=dtype or weights.dtype) for _ in range(weights.config.depth)]
    else:
        adapters = list(config)
    return AdaptedBackbone(weights, adapters)
