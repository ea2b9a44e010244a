"""Losses, AdamW, cosine schedule, dataset splitting, and the two training loops."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, fields

import numpy as np

from . import tensor as T
from .adapter import AdaptedBackbone, HTConfig, LoRAParams, attach_ht
from .backbone import ViTConfig, ViTWeights, init_backbone, text_encode, trunc_normal
from .errors import ConfigurationError, DimensionError, InputError, SamplingError
from .evaluation import auc_rank, overlap
from .heads import HeadParams, aggregate, cls_forward, seg_forward
from .tensor import Tensor

# ---------------------------------------------------------------- config


@dataclass
class TrainConfig:
    epochs_finetune: int = 32
    epochs_downstream: int = 200
    base_lr: float = 1e-4
    lr_floor: float = 0.0
    weight_decay: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    batch_size: int = 32
    seeds: tuple = (0, 1, 2)
    loss: str = "auto"
    tau: float = 0.07
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    dice_weight: float = 0.5
    ce_weight: float = 0.5
    image_size: int = 224
    patch_size: int = 16
    vit_width: int = 64
    vit_depth: int = 4
    vit_heads: int = 4
    ht_d: int = 16
    ht_h: int = 8
    dropout: float = 0.1
    d_red: int = 64
    cls_hidden: int = 256
    embed_dim: int = 64
    split: tuple = (0.8, 0.1, 0.1)
    backbone_seed: int = 0

    def __post_init__(self):
        self.seeds = tuple(int(s) for s in self.seeds)
        self.split = tuple(float(r) for r in self.split)
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, (int, float)) and not isinstance(v, bool) and f.name not in (
                "epochs_finetune", "epochs_downstream", "lr_floor", "focal_gamma", "backbone_seed", "dropout"
            ) and v <= 0:
                raise ConfigurationError(f"{f.name} must be positive, got {v}")
        if min(self.epochs_finetune, self.epochs_downstream, self.lr_floor, self.focal_gamma, self.dropout) < 0:
            raise ConfigurationError("epochs, lr_floor, focal_gamma and dropout must be non-negative")
        if self.dropout >= 1:
            raise ConfigurationError(f"dropout must be below 1, got {self.dropout}")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigurationError(f"seeds must be distinct: {self.seeds}")

    def vit_config(self):
        return ViTConfig(image_size=self.image_size, patch_size=self.patch_size, depth=self.vit_depth,
                         width=self.vit_width, heads=self.vit_heads)

    def ht_config(self):
        return HTConfig(D=self.vit_width, d=self.ht_d, h=self.ht_h, dropout=self.dropout)

    def to_text(self):
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name}={' '.join(map(str, v)) if isinstance(v, tuple) else v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text):
        kinds = {f.name: f.default for f in fields(cls)}
        kw = {}
        for raw in text.splitlines():
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if not sep or key not in kinds:
                raise ConfigurationError(f"unknown config line {raw!r}")
            default = kinds[key]
            if isinstance(default, tuple):
                conv = int if key == "seeds" else float
                kw[key] = tuple(conv(x) for x in value.replace(",", " ").split())
            elif isinstance(default, bool):
                kw[key] = value.lower() in ("1", "true", "yes")
            elif isinstance(default, int):
                kw[key] = int(value)
            elif isinstance(default, float):
                kw[key] = float(value)
            else:
                kw[key] = value
        return cls(**kw)

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_text(fh.read())


# ---------------------------------------------------------------- losses


def _one_hot(labels, n, dtype):
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= n):
        raise InputError(f"label out of range [0, {n})")
    return np.eye(n, dtype=dtype)[labels]


def info_nce(img_emb: Tensor, txt_emb: Tensor, tau=0.07) -> Tensor:
    """Symmetric cross-entropy over the B x B similarity matrix scaled by 1/tau."""
    b = img_emb.shape[0]
    if b == 0:
        raise InputError("InfoNCE needs a non-empty batch")
    if tau <= 0:
        raise InputError("temperature must be positive")
    logits = T.mul(T.matmul(img_emb, T.transpose(txt_emb, (1, 0))), 1.0 / tau)
    eye = np.eye(b, dtype=img_emb.dtype)
    row = T.mean(T.tsum(T.mul(T.log_softmax(logits, axis=1), eye), axis=1))
    col = T.mean(T.tsum(T.mul(T.log_softmax(logits, axis=0), eye), axis=0))
    return T.mul(T.add(row, col), -0.5)


def dice_ce_loss(logits: Tensor, mask, dice_weight=0.5, ce_weight=0.5, smooth=1.0) -> Tensor:
    """Soft Dice over foreground classes (per sample, smoothed) plus pixel cross-entropy."""
    b, c, h, w = logits.shape
    mask = np.asarray(mask)
    if mask.shape != (b, h, w):
        raise DimensionError(f"mask {mask.shape} vs logits {logits.shape}")
    target = np.moveaxis(_one_hot(mask.astype(np.int64), c, logits.dtype), -1, 1)
    logp = T.log_softmax(logits, axis=1)
    ce = T.mul(T.mean(T.tsum(T.mul(logp, target), axis=1)), -1.0)
    prob = T.exp(logp)
    fg_p = T.mul(prob, _fg_selector(c, logits.dtype))
    fg_t = target[:, 1:] if c > 1 else target
    inter = T.tsum(T.mul(fg_p, target), axis=(2, 3))
    denom = T.add(T.tsum(fg_p, axis=(2, 3)), target.sum(axis=(2, 3)))
    ratio = T.div(T.add(T.mul(inter, 2.0), smooth), T.add(denom, smooth))
    # background channel of ratio is (0 + s) / (sum g_bg + s); exclude it from the mean
    keep = _fg_selector(c, logits.dtype).reshape(1, c)
    dice = T.sub(1.0, T.mul(T.tsum(T.mul(ratio, keep)), 1.0 / (b * fg_t.shape[1])))
    return T.add(T.mul(dice, dice_weight), T.mul(ce, ce_weight))


def _fg_selector(c, dtype):
    sel = np.ones((1, c, 1, 1), dtype=dtype)
    if c > 1:
        sel[0, 0] = 0.0
    return sel


def focal_loss(logits: Tensor, labels, alpha=0.25, gamma=2.0) -> Tensor:
    """mean of -alpha_t (1 - p_t)^gamma log p_t; alpha_t = alpha for class 1, 1 - alpha otherwise."""
    if gamma < 0:
        raise InputError("focal gamma must be >= 0")
    b, c = logits.shape
    labels = np.asarray(labels).astype(np.int64)
    onehot = _one_hot(labels, c, logits.dtype)
    logpt = T.tsum(T.mul(T.log_softmax(logits, axis=1), onehot), axis=1)
    pt = T.exp(logpt)
    alpha_t = np.where(labels == 1, alpha, 1.0 - alpha).astype(logits.dtype)
    modulator = T.power(T.sub(1.0, pt), gamma)
    return T.mul(T.mean(T.mul(T.mul(modulator, logpt), alpha_t)), -1.0)


# ---------------------------------------------------------------- optimizer


@dataclass
class AdamState:
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(params: dict, grads: dict, state: AdamState, lr, beta1=0.9, beta2=0.95, eps=1e-8, wd=0.0):
    """One AdamW update on dicts of arrays; returns new (params, state) without mutating inputs."""
    t = state.t + 1
    new_p, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise DimensionError(f"{name}: grad {g.shape} vs param {p.shape}")
        m = state.m.get(name, np.zeros_like(p))
        v = state.v.get(name, np.zeros_like(p))
        if m.shape != p.shape:
            raise DimensionError(f"{name}: optimizer state {m.shape} vs param {p.shape}")
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        m_hat = m / (1 - beta1**t)
        v_hat = v / (1 - beta2**t)
        q = p - lr * wd * p
        new_p[name] = (q - lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.dtype, copy=False)
        new_m[name], new_v[name] = m, v
    return new_p, AdamState(t, new_m, new_v)


class AdamW:
    """Applies :func:`adamw_step` in place to a dict of trainable Tensors."""

    def __init__(self, tensors: dict, beta1=0.9, beta2=0.95, eps=1e-8, weight_decay=1e-2):
        self.tensors = tensors
        self.beta1, self.beta2, self.eps, self.wd = beta1, beta2, eps, weight_decay
        self.state = AdamState()

    def step(self, grads: dict, lr):
        params = {k: t.data for k, t in self.tensors.items()}
        grads = {k: grads.get(k, np.zeros_like(params[k])) for k in params}
        new, self.state = adamw_step(params, grads, self.state, lr, self.beta1, self.beta2, self.eps, self.wd)
        for k, t in self.tensors.items():
            t.data = new[k]


def cosine_lr(step, total_steps, base, floor=0.0):
    if step < 0 or step > total_steps:
        raise InputError(f"step {step} outside [0, {total_steps}]")
    if total_steps == 0:
        return base
    return floor + 0.5 * (base - floor) * (1 + math.cos(math.pi * step / total_steps))


# ---------------------------------------------------------------- splits


@dataclass
class SplitSpec:
    ratios: tuple = (0.8, 0.1, 0.1)
    seed: int = 0
    stratify: bool = False

    def __post_init__(self):
        r = tuple(float(x) for x in self.ratios)
        if len(r) == 2:
            r = r + (0.0,)
        if len(r) != 3 or r[0] <= 0 or min(r) < 0:
            raise ConfigurationError(f"split ratios {self.ratios} need a positive train share and no negatives")
        if abs(sum(r) - 1.0) > 1e-9:
            raise ConfigurationError(f"split ratios {self.ratios} do not sum to 1")
        self.ratios = r


def _split_block(idx, ratios):
    n = len(idx)
    n_val = int(math.floor(n * ratios[1] + 1e-9))
    n_test = int(math.floor(n * ratios[2] + 1e-9))
    n_train = n - n_val - n_test
    return idx[:n_train], idx[n_train : n_train + n_val], idx[n_train + n_val :]


def split_dataset(items, spec: SplitSpec, labels=None):
    """Seeded shuffle, floor-allocated val/test, remainder to train. Returns three index lists."""
    n = len(items)
    if n == 0:
        raise InputError("cannot split an empty dataset")
    rng = np.random.default_rng(spec.seed)
    perm = [int(i) for i in rng.permutation(n)]
    if not spec.stratify:
        return tuple(list(p) for p in _split_block(perm, spec.ratios))
    if labels is None:
        labels = [getattr(x, "label") for x in items]
    out = ([], [], [])
    for cls in sorted(set(labels)):
        block = [i for i in perm if labels[i] == cls]
        for dst, part in zip(out, _split_block(block, spec.ratios)):
            dst.extend(part)
    return out


FEWSHOT_RATIOS = (0.01, 0.02, 0.05, 0.10, 0.20, 0.35, 0.50)


def fewshot_sample(train_indices, labels, ratio, seed=0, classes=None):
    """Per-class sampling of max(1, round(ratio * class_count)) items, returned in train order."""
    if not 0 < ratio <= 1:
        raise SamplingError(f"ratio {ratio} outside (0, 1]")
    train_indices = list(train_indices)
    if not train_indices:
        raise SamplingError("empty training set")
    by_class = {}
    for i in train_indices:
        by_class.setdefault(labels[i], []).append(i)
    for c in classes or ():
        if c not in by_class:
            raise SamplingError(f"class {c!r} has no training items")
    rng = np.random.default_rng(seed)
    chosen = set()
    for c in sorted(by_class):
        members = by_class[c]
        k = max(1, int(math.floor(ratio * len(members) + 0.5)))
        pick = rng.choice(len(members), size=min(k, len(members)), replace=False)
        chosen.update(members[j] for j in pick)
    return [i for i in train_indices if i in chosen]


# ---------------------------------------------------------------- model


class Model:
    """Frozen backbone (+ optional adapters / LoRA) with a task head or embedding projection."""

    def __init__(self, backbone: AdaptedBackbone, head: HeadParams | None = None,
                 projection: Tensor | None = None):
        self.backbone = backbone
        self.head = head
        self.projection = projection

    @classmethod
    def build(cls, config: TrainConfig, variant="ht", task="seg", num_classes=2, seed=0,
              weights: ViTWeights | None = None, lora_rank=16):
        """``variant`` is "ht", "lora" or "frozen"; ``task`` is "seg", "cls" or "embed"."""
        weights = weights or init_backbone(config.vit_config(), config.backbone_seed)
        rng = np.random.default_rng(seed)
        if variant == "ht":
            backbone = attach_ht(weights, config.ht_config(), seed=int(rng.integers(2**31)))
        elif variant == "lora":
            lora = LoRAParams(weights.config.width, weights.config.depth, lora_rank,
                              rng=np.random.default_rng(int(rng.integers(2**31))), dtype=weights.dtype)
            backbone = AdaptedBackbone(weights, lora=lora)
        elif variant == "frozen":
            backbone = AdaptedBackbone(weights)
        else:
            raise ConfigurationError(f"unknown variant {variant!r}")
        head_rng = np.random.default_rng(int(rng.integers(2**31)))
        if task in ("seg", "cls"):
            head = HeadParams(weights.config.width, weights.config.tap_indices, role=task,
                              num_classes=num_classes, d_red=config.d_red, hidden=config.cls_hidden,
                              dropout=config.dropout, rng=head_rng, dtype=weights.dtype)
            return cls(backbone, head=head)
        if task == "embed":
            width = weights.config.width
            proj = Tensor(trunc_normal(head_rng, (width, config.embed_dim), std=width**-0.5, dtype=weights.dtype),
                          requires_grad=True)
            return cls(backbone, projection=proj)
        raise ConfigurationError(f"unknown task {task!r}")

    @property
    def variant(self):
        if self.backbone.adapters is not None:
            return "ht"
        return "lora" if self.backbone.lora is not None else "frozen"

    def trainable(self):
        out = dict(self.backbone.named_tensors())
        if self.head is not None:
            out.update({f"head.{k}": t for k, t in self.head.named_tensors().items()})
        if self.projection is not None:
            out["projection"] = self.projection
        return out

    def state_arrays(self):
        return {k: t.data.copy() for k, t in self.trainable().items()}

    def load_state(self, arrays):
        for k, t in self.trainable().items():
            if arrays[k].shape != t.shape:
                raise DimensionError(f"{k}: {arrays[k].shape} vs {t.shape}")
            t.data = np.array(arrays[k], dtype=t.dtype)

    def save(self, path):
        header = {"kind": "model", "variant": self.variant,
                  "role": self.head.role if self.head is not None else "embed",
                  "num_classes": self.head.num_classes if self.head is not None else 0,
                  "lora_rank": self.backbone.lora.r if self.backbone.lora is not None else 0,
                  "backbone_checksum": self.backbone.weights.checksum()}
        T.write_named_tensors(path, header, self.state_arrays())

    @classmethod
    def from_checkpoint(cls, path, config: TrainConfig):
        """Rebuild the architecture recorded in a checkpoint header, then load its tensors."""
        header, _ = T.read_named_tensors(path)
        if header.get("kind") != "model":
            raise ConfigurationError(f"{path} is not a model checkpoint")
        model = cls.build(config, header["variant"], header["role"], num_classes=int(header["num_classes"]) or 2,
                          lora_rank=int(header["lora_rank"]) or 16)
        model.load(path)
        return model

    def load(self, path):
        header, arrays = T.read_named_tensors(path)
        if header.get("backbone_checksum") != self.backbone.weights.checksum():
            raise ConfigurationError(f"{path} was trained against a different backbone")
        self.load_state(arrays)

    @property
    def frozen_features(self):
        return self.backbone.adapters is None and self.backbone.lora is None

    def taps(self, images, training=False, rng=None):
        return self.backbone.forward(images, training=training, rng=rng)

    def seg_logits(self, images=None, training=False, rng=None, taps=None):
        taps = taps if taps is not None else self.taps(images, training, rng)
        return seg_forward(aggregate(taps, self.head), self.head, out_size=self.backbone.config.image_size)

    def cls_logits(self, images=None, training=False, rng=None, taps=None):
        taps = taps if taps is not None else self.taps(images, training, rng)
        return cls_forward(aggregate(taps, self.head), self.head, training=training, rng=rng)

    def embed_images(self, images, training=False, rng=None):
        final = self.taps(images, training, rng).final
        weights = self.backbone.weights
        normed = T.add(T.mul(T.layer_norm(final), weights["norm.weight"]), weights["norm.bias"])
        pooled = T.mean(normed, axis=1)
        z = T.matmul(pooled, self.projection)
        return T.div(z, T.sqrt(T.tsum(T.mul(z, z), axis=1, keepdims=True)))


def prompt_encoder(config: TrainConfig):
    """Text encoder matching the embedding width used in fine-tuning."""
    return lambda caption: text_encode(caption, width=config.embed_dim)


def _images(samples):
    return np.stack([s.image for s in samples])[:, None].astype(np.float32)


def _grads_of(loss, tensors: dict):
    grads = T.backward(loss, wrt=list(tensors.values()))
    return dict(zip(tensors.keys(), grads))


def _batches(indices, batch_size, rng):
    order = [indices[i] for i in rng.permutation(len(indices))]
    return [order[i : i + batch_size] for i in range(0, len(order), batch_size)]


@dataclass
class TraceRow:
    epoch: int
    split: str
    loss: float
    metric: float


def write_trace_csv(path, trace):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "split", "loss", "metric"])
        for r in trace:
            w.writerow([r.epoch, r.split, f"{r.loss:.8g}", f"{r.metric:.8g}"])


@dataclass
class RunResult:
    checkpoint: dict
    trace: list
    best_epoch: int = -1
    best_metric: float = float("nan")
    backbone_checksum: tuple = ("", "")


# ---------------------------------------------------------------- contrastive fine-tuning


def run_finetune(corpus, model: Model, config: TrainConfig, seed=0, log=None) -> RunResult:
    """InfoNCE over (image, caption) pairs; only adapters and the projection move."""
    if not corpus:
        raise InputError("fine-tuning corpus is empty")
    if model.projection is None:
        raise ConfigurationError("fine-tuning needs a model built with task='embed'")
    checksum_before = model.backbone.weights.checksum()
    images = np.stack([np.asarray(img, dtype=np.float32).reshape(1, *np.shape(img)[-2:]) for img, _ in corpus])
    txt = np.stack([text_encode(cap, width=config.embed_dim) for _, cap in corpus]).astype(images.dtype)
    train_idx, val_idx, _ = split_dataset(corpus, SplitSpec((0.9, 0.1), seed=seed))
    params = model.trainable()
    opt = AdamW(params, config.beta1, config.beta2, config.eps, config.weight_decay)
    rng = np.random.default_rng(seed)
    trace = []

    def epoch_loss(indices, training):
        total, count = 0.0, 0
        for batch in _batches(indices, config.batch_size, rng) if training else [indices]:
            emb = model.embed_images(images[batch], training=training, rng=rng)
            loss = info_nce(emb, Tensor(txt[batch]), config.tau)
            if training:
                opt.step(_grads_of(loss, params), lr)
            total += float(loss.data) * len(batch)
            count += len(batch)
        return total / max(count, 1)

    for epoch in range(config.epochs_finetune):
        lr = cosine_lr(epoch, config.epochs_finetune, config.base_lr, config.lr_floor)
        tr = epoch_loss(train_idx, True)
        trace.append(TraceRow(epoch, "train", tr, float("nan")))
        if val_idx:
            va = epoch_loss(val_idx, False)
            trace.append(TraceRow(epoch, "val", va, float("nan")))
        if log:
            log(f"finetune epoch {epoch} train {tr:.4f}")
    return RunResult(model.state_arrays(), trace,
                     backbone_checksum=(checksum_before, model.backbone.weights.checksum()))


# ---------------------------------------------------------------- supervised downstream


def predict_masks(model: Model, samples, batch_size=16, taps_cache=None, indices=None):
    preds = []
    indices = list(range(len(samples))) if indices is None else indices
    for start in range(0, len(indices), batch_size):
        chunk = indices[start : start + batch_size]
        taps = _cached_taps(taps_cache, chunk) if taps_cache is not None else None
        logits = model.seg_logits(_images([samples[i] for i in chunk]) if taps is None else None, taps=taps)
        preds.extend(list(logits.data.argmax(axis=1) > 0))
    return preds


def predict_scores(model: Model, samples, batch_size=16, taps_cache=None, indices=None):
    scores = []
    indices = list(range(len(samples))) if indices is None else indices
    for start in range(0, len(indices), batch_size):
        chunk = indices[start : start + batch_size]
        taps = _cached_taps(taps_cache, chunk) if taps_cache is not None else None
        logits = model.cls_logits(_images([samples[i] for i in chunk]) if taps is None else None, taps=taps)
        z = logits.data - logits.data.max(axis=1, keepdims=True)
        p = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
        scores.extend(p[:, -1].tolist())
    return scores


def _cached_taps(cache, chunk):
    return {i: Tensor(np.stack([cache[j][i] for j in chunk])) for i in cache[chunk[0]]}


def build_taps_cache(model: Model, samples, batch_size=16):
    """Per-sample tap arrays for a model whose features cannot change (frozen backbone)."""
    cache = {}
    for start in range(0, len(samples), batch_size):
        chunk = list(range(start, min(start + batch_size, len(samples))))
        taps = model.taps(_images([samples[i] for i in chunk]))
        for k, j in enumerate(chunk):
            cache[j] = {i: t.data[k] for i, t in taps.taps.items()}
    return cache


def mean_dice(preds, samples, indices):
    return float(np.mean([overlap(p, samples[i].mask)[0] for p, i in zip(preds, indices)]))


def evaluate_split(model: Model, samples, indices, task, taps_cache=None):
    if task == "seg":
        return mean_dice(predict_masks(model, samples, taps_cache=taps_cache, indices=indices), samples, indices)
    scores = predict_scores(model, samples, taps_cache=taps_cache, indices=indices)
    auc = auc_rank(scores, [samples[i].label for i in indices])
    return 50.0 if math.isnan(auc) else auc


def run_downstream(dataset, model: Model, task, config: TrainConfig, seed=0, splits=None, log=None,
                   epochs=None) -> RunResult:
    """Supervised training of adapters + head; keeps the best-validation checkpoint.

    Selection metric: Dice (seg) or AUC (cls) on the validation split.
    """
    if task not in ("seg", "cls"):
        raise ConfigurationError(f"unknown task {task!r}")
    if model.head is None or model.head.role != task:
        raise ConfigurationError(f"model head role does not match task {task!r}")
    if task == "seg" and any(getattr(s, "mask", None) is None for s in dataset):
        raise ConfigurationError("segmentation needs masks on every sample")
    if not dataset:
        raise InputError("empty dataset")
    epochs = config.epochs_downstream if epochs is None else epochs
    checksum_before = model.backbone.weights.checksum()
    if splits is None:
        splits = split_dataset(dataset, SplitSpec(config.split, seed=seed))
    train_idx, val_idx = list(splits[0]), list(splits[1]) or list(splits[0])
    cache = build_taps_cache(model, dataset) if model.frozen_features else None
    params = model.trainable()
    opt = AdamW(params, config.beta1, config.beta2, config.eps, config.weight_decay)
    rng = np.random.default_rng(seed)
    trace = []
    best = (-1, -math.inf, model.state_arrays())
    for epoch in range(epochs):
        lr = cosine_lr(epoch, epochs, config.base_lr, config.lr_floor)
        total = 0.0
        for batch in _batches(train_idx, config.batch_size, rng):
            taps = _cached_taps(cache, batch) if cache is not None else None
            imgs = None if taps is not None else _images([dataset[i] for i in batch])
            if task == "seg":
                logits = model.seg_logits(imgs, training=True, rng=rng, taps=taps)
                target = np.stack([dataset[i].mask for i in batch]).astype(np.int64)
                loss = dice_ce_loss(logits, target, config.dice_weight, config.ce_weight)
            else:
                logits = model.cls_logits(imgs, training=True, rng=rng, taps=taps)
                loss = focal_loss(logits, [dataset[i].label for i in batch], config.focal_alpha, config.focal_gamma)
            opt.step(_grads_of(loss, params), lr)
            total += float(loss.data) * len(batch)
        metric = evaluate_split(model, dataset, val_idx, task, cache)
        trace.append(TraceRow(epoch, "train", total / len(train_idx), float("nan")))
        trace.append(TraceRow(epoch, "val", float("nan"), metric))
        if metric > best[1]:
            best = (epoch, metric, model.state_arrays())
        if log:
            log(f"{task} epoch {epoch} loss {total / len(train_idx):.4f} val {metric:.2f}")
    if epochs == 0:
        best = (-1, evaluate_split(model, dataset, val_idx, task, cache), best[2])
    model.load_state(best[2])
    return RunResult(best[2], trace, best[0], best[1],
                     backbone_checksum=(checksum_before, model.backbone.weights.checksum()))
