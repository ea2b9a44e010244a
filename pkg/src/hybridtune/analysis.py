"""Spectral probes of trained adapters, parameter/FLOP accounting and a latency benchmark."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .adapter import KERNELS, AdaptedBackbone, HTConfig, HTParams, LoRAParams
from .backbone import ViTConfig, ViTWeights
from .errors import ConfigurationError, DegenerateSampleError, DimensionError, InputError, UnsupportedError

# ---------------------------------------------------------------- spectral probes


@dataclass
class ThetaStats:
    layer: int
    mean: float
    std: float
    min: float
    max: float

    @property
    def deviation(self):
        return self.mean - 1.0

    def formatted(self):
        return f"{self.mean:.4f}±{self.std:.4f}"


def _adapter_list(adapters):
    if isinstance(adapters, AdaptedBackbone):
        adapters = adapters.adapters
    if hasattr(adapters, "backbone"):
        adapters = adapters.backbone.adapters
    return list(adapters or [])


def probe_theta(adapters) -> list:
    """Per-layer statistics of the learned frequency filter."""
    out = []
    for i, a in enumerate(_adapter_list(adapters)):
        th = np.asarray(a.theta.data, dtype=np.float64)
        out.append(ThetaStats(i, float(th.mean()), float(th.std()), float(th.min()), float(th.max())))
    return out


def grand_mean_theta(adapters):
    return float(np.mean([s.mean for s in probe_theta(adapters)]))


def spectral_energy(f):
    """Sum of squared 2-D spectral magnitudes over the trailing two axes."""
    spec = np.fft.fft2(np.asarray(f, dtype=np.float64), axes=(-2, -1))
    return float((spec.real**2 + spec.imag**2).sum())


def spectral_energy_change(f_in, f_freq):
    f_in, f_freq = np.asarray(f_in), np.asarray(f_freq)
    if f_in.shape != f_freq.shape:
        raise DimensionError(f"shapes differ: {f_in.shape} vs {f_freq.shape}")
    e_in = spectral_energy(f_in)
    if e_in == 0:
        raise DegenerateSampleError("input has zero spectral energy")
    return 100.0 * (spectral_energy(f_freq) - e_in) / e_in


def _probe_forward(backbone: AdaptedBackbone, images, batch_size=16):
    images = np.asarray(images, dtype=backbone.weights.dtype)
    if images.ndim == 3:
        images = images[:, None]
    if len(images) == 0:
        raise InputError("probe set is empty")
    if backbone.adapters is None:
        raise ConfigurationError("spectral probes need an HT-adapted backbone")
    per_batch = []
    for start in range(0, len(images), batch_size):
        probes = []
        backbone.forward(images[start : start + batch_size], probes=probes)
        per_batch.append(probes)
    return per_batch


def ne_weight_profile(backbone: AdaptedBackbone, probe_images, batch_size=16):
    """L x 3 array of mean NE branch weights (k = 3, 5, 7) over the probe images."""
    per_batch = _probe_forward(backbone, probe_images, batch_size)
    layers = len(per_batch[0])
    sums = np.zeros((layers, len(KERNELS)))
    count = 0
    for probes in per_batch:
        for i, p in enumerate(probes):
            sums[i] += p["w"].reshape(len(p["w"]), -1).sum(axis=0)
        count += len(probes[0]["w"])
    return sums / count


@dataclass
class SpectralReport:
    theta: list
    energy_change: list
    ne_weights: np.ndarray = field(repr=False)

    def rows(self):
        out = []
        for s, e, w in zip(self.theta, self.energy_change, self.ne_weights):
            out.append({"layer": s.layer, "theta": s.formatted(), "theta_mean": f"{s.mean:.6f}",
                        "theta_std": f"{s.std:.6f}", "theta_deviation": f"{s.deviation:.6f}",
                        "energy_change_pct": f"{e:.6f}", "w3": f"{w[0]:.6f}", "w5": f"{w[1]:.6f}",
                        "w7": f"{w[2]:.6f}"})
        return out


def spectral_report(backbone: AdaptedBackbone, probe_images, batch_size=16) -> SpectralReport:
    per_batch = _probe_forward(backbone, probe_images, batch_size)
    layers = len(per_batch[0])
    energy = []
    for i in range(layers):
        e_in = sum(spectral_energy(probes[i]["f_in"]) for probes in per_batch)
        e_out = sum(spectral_energy(probes[i]["f_freq"]) for probes in per_batch)
        if e_in == 0:
            raise DegenerateSampleError(f"layer {i} input has zero spectral energy")
        energy.append(100.0 * (e_out - e_in) / e_in)
    weights = ne_weight_profile(backbone, probe_images, batch_size)
    return SpectralReport(probe_theta(backbone), energy, weights)


# ---------------------------------------------------------------- parameter accounting


@dataclass
class ParamCount:
    trainable: int
    total: int
    breakdown: dict = field(default_factory=dict)


def count_params(model) -> ParamCount:
    """Counts parameters of a Model, AdaptedBackbone, ViTWeights, LoRAParams or list of HTParams."""
    if isinstance(model, ViTWeights):
        return ParamCount(0, model.num_params(), {"backbone": model.num_params()})
    if isinstance(model, LoRAParams):
        n = model.num_params()
        return ParamCount(n, n, {"lora": n})
    if isinstance(model, HTParams):
        model = [model]
    if isinstance(model, (list, tuple)):
        n = sum(a.num_params() for a in model)
        return ParamCount(n, n, {"adapters": n})
    breakdown = {}
    backbone = model if isinstance(model, AdaptedBackbone) else getattr(model, "backbone", None)
    if backbone is None:
        raise ConfigurationError(f"cannot count parameters of {type(model).__name__}")
    breakdown["backbone"] = backbone.weights.num_params()
    if backbone.adapters is not None:
        breakdown["adapters"] = sum(a.num_params() for a in backbone.adapters)
    if backbone.lora is not None:
        breakdown["lora"] = backbone.lora.num_params()
    head = getattr(model, "head", None)
    if head is not None:
        breakdown["head"] = head.num_params()
    projection = getattr(model, "projection", None)
    if projection is not None:
        breakdown["projection"] = projection.size
    trainable = sum(v for k, v in breakdown.items() if k != "backbone")
    return ParamCount(trainable, trainable + breakdown["backbone"], breakdown)


# ---------------------------------------------------------------- FLOPs


@dataclass
class ModelShape:
    """Static description sufficient for FLOP counting without materialising weights."""

    vit: ViTConfig
    ht: HTConfig | None = None
    lora_rank: int | None = None


def linear_flops(m, n, positions=1):
    return 2 * m * n * positions


def fft2_flops(h, w, channels):
    """5 HW log2(HW) per channel and transform (a common radix-2 estimate)."""
    hw = h * w
    return 5.0 * hw * math.log2(hw) * channels if hw > 1 else 0.0


@dataclass
class FlopReport:
    backbone: float
    adapter: float
    lora: float

    @property
    def total(self):
        return self.backbone + self.adapter + self.lora

    @property
    def overhead_pct(self):
        return 100.0 * (self.adapter + self.lora) / self.backbone


def _vit_block_flops(n, d, mlp_ratio):
    proj = 4 * linear_flops(d, d, n)
    attn = 2 * (2 * n * n * d)
    mlp = linear_flops(d, mlp_ratio * d, n) + linear_flops(mlp_ratio * d, d, n)
    return proj + attn + mlp


def ht_flops(cfg: HTConfig, n):
    """Adapter cost per image: projections, forward+inverse FFT, squeeze, depthwise bank, pointwise."""
    s = math.isqrt(n)
    down_up = linear_flops(cfg.D, cfg.d, n) + linear_flops(cfg.d, cfg.D, n)
    fft = 2 * fft2_flops(s, s, cfg.d)
    squeeze = linear_flops(cfg.d, cfg.h) + linear_flops(cfg.h, len(cfg.kernels))
    depthwise = sum(2 * k * k * cfg.d * n for k in cfg.kernels)
    pointwise = linear_flops(cfg.d, cfg.d, n)
    return down_up + fft + squeeze + depthwise + pointwise


def estimate_flops(model, input_shape) -> FlopReport:
    """Analytic FLOP count (2 per multiply-add) for a B x C x H x W input.

    Elementwise work (norms, activations, residual adds) is not counted.
    """
    if any(not isinstance(s, (int, np.integer)) or s <= 0 for s in input_shape):
        raise UnsupportedError(f"static positive shape required, got {input_shape}")
    if len(input_shape) != 4:
        raise DimensionError(f"input shape must be B x C x H x W, got {input_shape}")
    shape = _model_shape(model)
    b, c, h, w = (int(s) for s in input_shape)
    vit = shape.vit
    if (h, w) != (vit.image_size, vit.image_size) or c != vit.in_channels:
        raise DimensionError(f"input {input_shape} does not match the backbone configuration")
    n = vit.num_tokens
    backbone = linear_flops(c * vit.patch_size**2, vit.width, n)
    backbone += vit.depth * _vit_block_flops(n, vit.width, vit.mlp_ratio)
    adapter = vit.depth * ht_flops(shape.ht, n) if shape.ht is not None else 0.0
    lora = 0.0
    if shape.lora_rank:
        lora = vit.depth * 4 * 2 * linear_flops(vit.width, shape.lora_rank, n)
    return FlopReport(b * float(backbone), b * float(adapter), b * float(lora))


def _model_shape(model) -> ModelShape:
    if isinstance(model, ModelShape):
        return model
    if isinstance(model, ViTConfig):
        return ModelShape(model)
    backbone = model if isinstance(model, AdaptedBackbone) else getattr(model, "backbone", None)
    if backbone is None:
        raise ConfigurationError(f"cannot derive FLOPs for {type(model).__name__}")
    ht = backbone.adapters[0].config if backbone.adapters else None
    rank = backbone.lora.r if backbone.lora is not None else None
    return ModelShape(backbone.config, ht, rank)


# ---------------------------------------------------------------- latency


@dataclass
class LatencyReport:
    ms_per_image: float
    std_ms: float
    fps: float
    reps: int
    batch: int

    def interval(self, k=3.0):
        return self.ms_per_image - k * self.std_ms, self.ms_per_image + k * self.std_ms


def bench_latency(model, batch=1, reps=10, warmup=3, image_size=None, seed=0) -> LatencyReport:
    """Wall-clock inference time on a fixed random batch.

    ``model`` is anything with ``forward(images)`` or ``taps(images)``, or a plain callable.
    Run it on an otherwise idle machine; numpy threading is whatever the process was started with.
    """
    if reps < 10:
        raise ConfigurationError(f"reps must be >= 10, got {reps}")
    if warmup < 3:
        raise ConfigurationError(f"warmup must be >= 3, got {warmup}")
    if batch < 1:
        raise ConfigurationError("batch must be >= 1")
    fn = getattr(model, "taps", None) or getattr(model, "forward", None) or model
    cfg = getattr(getattr(model, "backbone", model), "config", None)
    size = image_size or (cfg.image_size if cfg is not None else 224)
    channels = cfg.in_channels if cfg is not None else 1
    images = np.random.default_rng(seed).random((batch, channels, size, size), dtype=np.float32)
    for _ in range(warmup):
        fn(images)
    times = []
    for _ in range(reps):
        t0 = time.perf_counter()
        fn(images)
        times.append((time.perf_counter() - t0) * 1000.0 / batch)
    ms = float(np.mean(times))
    return LatencyReport(ms, float(np.std(times, ddof=1)), 1000.0 / ms, reps, batch)
