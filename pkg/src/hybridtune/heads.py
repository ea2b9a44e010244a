"""Multi-level feature aggregation plus segmentation and classification heads."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .backbone import TapSet, tokens_to_map, trunc_normal
from .errors import ConfigurationError
from .tensor import Tensor

D_RED = 64
CLS_HIDDEN = 256
CLS_DROPOUT = 0.1


class HeadParams:
    """Per-tap projections plus one task head (``role`` is "seg" or "cls")."""

    def __init__(self, width, tap_indices, role="seg", num_classes=2, d_red=D_RED,
                 hidden=CLS_HIDDEN, dropout=CLS_DROPOUT, rng=None, dtype=np.float32):
        if role not in ("seg", "cls"):
            raise ConfigurationError(f"unknown head role {role!r}")
        if num_classes < 1:
            raise ConfigurationError("num_classes must be >= 1")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.role, self.num_classes, self.d_red = role, num_classes, d_red
        self.hidden, self.dropout = hidden, dropout
        self.tap_indices = list(tap_indices)
        self.width = width

        def p(arr):
            return Tensor(np.asarray(arr, dtype=dtype), requires_grad=True)

        self.tensors = {}
        for i in self.tap_indices:
            pre = f"tap{i}."
            self.tensors[pre + "proj.weight"] = p(trunc_normal(rng, (width, d_red), std=width**-0.5, dtype=dtype))
            self.tensors[pre + "proj.bias"] = p(np.zeros(d_red))
            self.tensors[pre + "ln.weight"] = p(np.ones(d_red))
            self.tensors[pre + "ln.bias"] = p(np.zeros(d_red))
            self.tensors[pre + "refine.weight"] = p(trunc_normal(rng, (d_red, d_red), std=d_red**-0.5, dtype=dtype))
            self.tensors[pre + "refine.bias"] = p(np.zeros(d_red))
        if role == "seg":
            self.tensors["seg.weight"] = p(trunc_normal(rng, (num_classes, d_red), std=d_red**-0.5, dtype=dtype))
            self.tensors["seg.bias"] = p(np.zeros(num_classes))
        else:
            self.tensors["cls.fc1.weight"] = p(trunc_normal(rng, (d_red, hidden), std=d_red**-0.5, dtype=dtype))
            self.tensors["cls.fc1.bias"] = p(np.zeros(hidden))
            self.tensors["cls.fc2.weight"] = p(trunc_normal(rng, (hidden, num_classes), std=hidden**-0.5, dtype=dtype))
            self.tensors["cls.fc2.bias"] = p(np.zeros(num_classes))

    def __getitem__(self, name):
        return self.tensors[name]

    def named_tensors(self):
        return dict(self.tensors)

    def num_params(self):
        return sum(t.size for t in self.tensors.values())

    def header(self):
        return {"kind": "head", "role": self.role, "num_classes": self.num_classes, "d_red": self.d_red,
                "hidden": self.hidden, "dropout": self.dropout, "width": self.width,
                "tap_indices": " ".join(map(str, self.tap_indices))}

    def save(self, path):
        T.write_named_tensors(path, self.header(), {k: t.data for k, t in self.tensors.items()})

    @classmethod
    def load(cls, path, dtype=np.float32):
        header, arrays = T.read_named_tensors(path)
        head = cls(int(header["width"]), [int(x) for x in header["tap_indices"].split()], role=header["role"],
                   num_classes=int(header["num_classes"]), d_red=int(header["d_red"]),
                   hidden=int(header["hidden"]), dropout=float(header["dropout"]), dtype=dtype)
        for k, t in head.tensors.items():
            t.data = np.array(arrays[k], dtype=dtype)
        return head


def refine_tap(tokens: Tensor, params: HeadParams, index: int) -> Tensor:
    pre = f"tap{index}."
    x = T.linear(tokens, params[pre + "proj.weight"], params[pre + "proj.bias"])
    x = T.add(T.mul(T.layer_norm(x), params[pre + "ln.weight"]), params[pre + "ln.bias"])
    return T.gelu(T.linear(x, params[pre + "refine.weight"], params[pre + "refine.bias"]))


def aggregate(taps: TapSet | dict, params: HeadParams) -> Tensor:
    """Project, refine and sum the tapped token sets into a B x d_red x s x s map."""
    tap_dict = taps.taps if isinstance(taps, TapSet) else taps
    total = None
    for i in params.tap_indices:
        if i not in tap_dict:
            raise ConfigurationError(f"tap {i} missing (have {sorted(tap_dict)})")
        y = refine_tap(tap_dict[i], params, i)
        total = y if total is None else T.add(total, y)
    return tokens_to_map(total)


def seg_forward(f_agg: Tensor, params: HeadParams, out_size=224, literal=False) -> Tensor:
    """Bilinear upsample to ``out_size`` then 1x1 conv to class logits.

    Both stages are linear, the conv acts across channels and the upsample
    within channels, and bilinear weights sum to one (so the bias passes
    through unchanged); the default path therefore runs the conv first on
    the small map. ``literal=True`` runs the stages in the stated order.
    """
    w, b = params["seg.weight"], params["seg.bias"]
    if literal:
        up = T.bilinear_upsample(f_agg, out_size, out_size)
        return T.pointwise_conv2d(up, w, b)
    return T.bilinear_upsample(T.pointwise_conv2d(f_agg, w, b), out_size, out_size)


def cls_forward(f_agg: Tensor, params: HeadParams, training=False, rng=None) -> Tensor:
    b = f_agg.shape[0]
    pooled = T.reshape(T.adaptive_avg_pool(f_agg, (1, 1)), (b, f_agg.shape[1]))
    h = T.relu(T.linear(pooled, params["cls.fc1.weight"], params["cls.fc1.bias"]))
    h = T.dropout(h, params.dropout, training=training, rng=rng)
    return T.linear(h, params["cls.fc2.weight"], params["cls.fc2.bias"])
