"""Dense tensors with reverse-mode differentiation over a fixed primitive set.

A :class:`Tensor` wraps a numpy array. Applying a registered primitive to
tensors that require gradients records a node (primitive, parents, saved
context, attributes). :class:`Graph` orders the nodes reachable from a root
and runs the reverse sweep; it can also replay the forward pass from the
recorded attributes, which is how determinism is checked.

Layout is batch-major throughout (B x N x D for token sequences,
B x C x H x W for feature maps).
"""

from __future__ import annotations

from dataclasses import dataclass
from types import MappingProxyType
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

from .errors import (
    ConfigurationError,
    ContractError,
    DimensionError,
    LifecycleError,
    NumericError,
)

LN_EPS = 1e-5
_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


@dataclass(frozen=True)
class Primitive:
    """Forward rule plus its exact reverse-mode derivative.

    ``forward(*arrays, **attrs)`` returns ``(out, ctx)``.
    ``backward(ctx, grad_out, needs)`` returns one gradient (or None) per input;
    ``needs[i]`` says whether input ``i`` wants a gradient.
    """

    name: str
    forward: Callable
    backward: Callable
    arity: int


@dataclass
class Node:
    op: Primitive
    parents: tuple
    ctx: object
    attrs: dict
    consumed: bool = False


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.node = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def backward(self, seed=None, retain_graph=False):
        """Accumulate gradients into ``.grad`` of every reachable leaf."""
        graph = Graph(self)
        grads = graph.backward(seed, retain_graph=retain_graph)
        for leaf, g in grads.items():
            leaf.grad = g if leaf.grad is None else leaf.grad + g

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _check_finite(arrays, opname):
    for a in arrays:
        if not np.isfinite(a).all():
            raise NumericError(f"non-finite input to {opname}")


def apply(op: Primitive, *inputs, **attrs):
    """Run ``op`` forward; record a node if any input requires a gradient."""
    like = next((x for x in inputs if isinstance(x, Tensor)), None)
    tensors = tuple(as_tensor(x, like) for x in inputs)
    arrays = [t.data for t in tensors]
    _check_finite(arrays, op.name)
    out, ctx = op.forward(*arrays, **attrs)
    result = Tensor(out, dtype=out.dtype)
    if any(t.requires_grad for t in tensors):
        result.requires_grad = True
        result.node = Node(op, tensors, ctx, dict(attrs))
    return result


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_check(a, b, opname):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{opname}: operands {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------- elementwise


def _add_fwd(a, b):
    _broadcast_check(a, b, "add")
    return a + b, (a.shape, b.shape)


def _add_bwd(ctx, g, needs):
    sa, sb = ctx
    return (_unbroadcast(g, sa) if needs[0] else None, _unbroadcast(g, sb) if needs[1] else None)


def _sub_fwd(a, b):
    _broadcast_check(a, b, "sub")
    return a - b, (a.shape, b.shape)


def _sub_bwd(ctx, g, needs):
    sa, sb = ctx
    return (_unbroadcast(g, sa) if needs[0] else None, _unbroadcast(-g, sb) if needs[1] else None)


def _mul_fwd(a, b):
    _broadcast_check(a, b, "mul")
    return a * b, (a, b)


def _mul_bwd(ctx, g, needs):
    a, b = ctx
    return (
        _unbroadcast(g * b, a.shape) if needs[0] else None,
        _unbroadcast(g * a, b.shape) if needs[1] else None,
    )


def _div_fwd(a, b):
    _broadcast_check(a, b, "div")
    return a / b, (a, b)


def _div_bwd(ctx, g, needs):
    a, b = ctx
    return (
        _unbroadcast(g / b, a.shape) if needs[0] else None,
        _unbroadcast(-g * a / (b * b), b.shape) if needs[1] else None,
    )


def _neg_fwd(a):
    return -a, None


def _neg_bwd(ctx, g, needs):
    return (-g,)


def _pow_fwd(a, exponent):
    return a**exponent, (a, exponent)


def _pow_bwd(ctx, g, needs):
    a, p = ctx
    if p == 0:
        return (np.zeros_like(a),)
    return (g * p * a ** (p - 1),)


def _exp_fwd(a):
    y = np.exp(a)
    return y, y


def _exp_bwd(y, g, needs):
    return (g * y,)


def _log_fwd(a):
    if np.any(a <= 0):
        raise NumericError("log of non-positive value")
    return np.log(a), a


def _log_bwd(a, g, needs):
    return (g / a,)


def _sqrt_fwd(a):
    y = np.sqrt(a)
    return y, y


def _sqrt_bwd(y, g, needs):
    return (g * 0.5 / y,)


def _relu_fwd(a):
    return np.maximum(a, 0), a > 0


def _relu_bwd(mask, g, needs):
    return (g * mask,)


def _gelu_fwd(a):
    cdf = 0.5 * (1.0 + erf(a / _SQRT2))
    return (a * cdf).astype(a.dtype, copy=False), (a, cdf)


def _gelu_bwd(ctx, g, needs):
    a, cdf = ctx
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * a * a)
    return ((g * (cdf + a * pdf)).astype(a.dtype, copy=False),)


def _dropout_fwd(a, p=0.1, training=False, seed=None):
    if not training or p == 0.0:
        return a.copy(), None
    if seed is None:
        raise ContractError("dropout in training mode needs a seed")
    keep = np.random.default_rng(seed).random(a.shape) >= p
    scale = (keep / (1.0 - p)).astype(a.dtype)
    return a * scale, scale


def _dropout_bwd(scale, g, needs):
    return (g if scale is None else g * scale,)


# ---------------------------------------------------------------- linear algebra / reductions


def _matmul_fwd(a, b):
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: operands {a.shape} and {b.shape} are incompatible")
    return a @ b, (a, b)


def _matmul_bwd(ctx, g, needs):
    a, b = ctx
    ga = _unbroadcast(g @ np.swapaxes(b, -1, -2), a.shape) if needs[0] else None
    gb = _unbroadcast(np.swapaxes(a, -1, -2) @ g, b.shape) if needs[1] else None
    return ga, gb


def _sum_fwd(a, axis=None, keepdims=False):
    return np.asarray(a.sum(axis=axis, keepdims=keepdims)), (a.shape, axis, keepdims)


def _expand_reduced(g, shape, axis, keepdims):
    if axis is not None and not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(ax % len(shape) for ax in axes)
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def _sum_bwd(ctx, g, needs):
    shape, axis, keepdims = ctx
    return (np.array(_expand_reduced(g, shape, axis, keepdims)),)


def _mean_fwd(a, axis=None, keepdims=False):
    out = np.asarray(a.mean(axis=axis, keepdims=keepdims))
    return out, (a.shape, axis, keepdims, a.size // max(out.size, 1))


def _mean_bwd(ctx, g, needs):
    shape, axis, keepdims, count = ctx
    return (np.array(_expand_reduced(g, shape, axis, keepdims)) / count,)


def _reshape_fwd(a, shape=()):
    try:
        return a.reshape(shape), a.shape
    except ValueError:
        raise DimensionError(f"reshape: cannot view {a.shape} as {shape}") from None


def _reshape_bwd(shape, g, needs):
    return (g.reshape(shape),)


def _transpose_fwd(a, axes=None):
    return np.transpose(a, axes), axes


def _transpose_bwd(axes, g, needs):
    if axes is None:
        return (np.transpose(g),)
    return (np.transpose(g, np.argsort(axes)),)


# ---------------------------------------------------------------- normalization


def _layer_norm_fwd(a, eps=LN_EPS):
    mu = a.mean(axis=-1, keepdims=True)
    xc = a - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat, (xhat, rstd)


def _layer_norm_bwd(ctx, g, needs):
    xhat, rstd = ctx
    gm = g.mean(axis=-1, keepdims=True)
    gxm = (g * xhat).mean(axis=-1, keepdims=True)
    return (rstd * (g - gm - xhat * gxm),)


def _softmax_fwd(a, axis=-1):
    z = a - a.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    return y, (y, axis)


def _softmax_bwd(ctx, g, needs):
    y, axis = ctx
    return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)


def _log_softmax_fwd(a, axis=-1):
    z = a - a.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse
    return y, (y, axis)


def _log_softmax_bwd(ctx, g, needs):
    y, axis = ctx
    return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)


# ---------------------------------------------------------------- pooling / resampling


def _gap_fwd(a):
    if a.ndim != 4:
        raise DimensionError(f"global_avg_pool expects B x C x H x W, got {a.shape}")
    return a.mean(axis=(2, 3), keepdims=True), a.shape


def _gap_bwd(shape, g, needs):
    return (np.broadcast_to(g / (shape[2] * shape[3]), shape).copy(),)


def adaptive_pool_matrix(n_in, n_out, dtype=np.float64):
    """Row i averages input cells floor(i*n_in/n_out) .. ceil((i+1)*n_in/n_out)-1."""
    m = np.zeros((n_out, n_in), dtype=dtype)
    for i in range(n_out):
        start = (i * n_in) // n_out
        end = -(-((i + 1) * n_in) // n_out)
        m[i, start:end] = 1.0 / (end - start)
    return m


def _aap_fwd(a, out_hw=(1, 1)):
    if a.ndim != 4:
        raise DimensionError(f"adaptive_avg_pool expects B x C x H x W, got {a.shape}")
    ph = adaptive_pool_matrix(a.shape[2], out_hw[0], a.dtype)
    pw = adaptive_pool_matrix(a.shape[3], out_hw[1], a.dtype)
    return ph @ a @ pw.T, (ph, pw)


def _aap_bwd(ctx, g, needs):
    ph, pw = ctx
    return (ph.T @ g @ pw,)


def bilinear_matrix(n_in, n_out, dtype=np.float64):
    """Interpolation weights for half-pixel-centre sampling with edge clamping."""
    m = np.zeros((n_out, n_in), dtype=dtype)
    scale = n_in / n_out
    for o in range(n_out):
        src = min(max((o + 0.5) * scale - 0.5, 0.0), n_in - 1)
        i0 = int(np.floor(src))
        i1 = min(i0 + 1, n_in - 1)
        frac = src - i0
        m[o, i0] += 1.0 - frac
        m[o, i1] += frac
    return m


def _upsample_fwd(a, size=(1, 1)):
    h_out, w_out = size
    if h_out <= 0 or w_out <= 0:
        raise ConfigurationError(f"bilinear_upsample: zero output extent {size}")
    if a.ndim != 4:
        raise DimensionError(f"bilinear_upsample expects B x C x H x W, got {a.shape}")
    if h_out < a.shape[2] or w_out < a.shape[3]:
        raise ConfigurationError(f"bilinear_upsample: output {size} smaller than input {a.shape[2:]}")
    mh = bilinear_matrix(a.shape[2], h_out, a.dtype)
    mw = bilinear_matrix(a.shape[3], w_out, a.dtype)
    return mh @ a @ mw.T, (mh, mw)


def _upsample_bwd(ctx, g, needs):
    mh, mw = ctx
    return (mh.T @ g @ mw,)


# ---------------------------------------------------------------- spectral filter


def _hermitian_weights(w):
    """Multiplicity of each rfft column in the full spectrum (1 or 2)."""
    n_half = w // 2 + 1
    mult = np.full(n_half, 2.0)
    mult[0] = 1.0
    if w % 2 == 0:
        mult[-1] = 1.0
    return mult


def _rfft2_filter_fwd(f, theta):
    if f.ndim != 4:
        raise DimensionError(f"rfft2_filter expects B x C x H x W, got {f.shape}")
    if theta.shape != (f.shape[1],):
        raise DimensionError(f"rfft2_filter: theta {theta.shape} does not match {f.shape[1]} channels")
    h, w = f.shape[2:]
    spec = np.fft.rfft2(f)
    out = np.fft.irfft2(spec * theta[None, :, None, None], s=(h, w)).astype(f.dtype, copy=False)
    return out, (spec, theta, (h, w))


def _rfft2_filter_bwd(ctx, g, needs):
    spec, theta, (h, w) = ctx
    gf = gtheta = None
    gspec = np.fft.rfft2(g)
    if needs[0]:
        # real per-channel multiplier: the operator is self-adjoint
        gf = np.fft.irfft2(gspec * theta[None, :, None, None], s=(h, w)).astype(g.dtype, copy=False)
    if needs[1]:
        # <G, irfft2(theta X)> summed over the full spectrum; half storage counts
        # every non-self-conjugate column twice
        mult = _hermitian_weights(w)
        prod = np.real(np.conj(gspec) * spec) * mult
        gtheta = (prod.sum(axis=(0, 2, 3)) / (h * w)).astype(g.dtype, copy=False)
    return gf, gtheta


# ---------------------------------------------------------------- convolutions


def _dwconv_fwd(f, k, b=None):
    if f.ndim != 4 or k.ndim != 3 or k.shape[0] != f.shape[1]:
        raise DimensionError(f"depthwise_conv2d: input {f.shape} vs kernel {k.shape}")
    kh, kw = k.shape[1:]
    if kh % 2 == 0 or kw % 2 == 0:
        raise ConfigurationError(f"depthwise_conv2d: kernel size {kh}x{kw} must be odd")
    ph, pw = kh // 2, kw // 2
    _, _, h, w = f.shape
    fp = np.pad(f, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    out = np.zeros_like(f)
    for i in range(kh):
        for j in range(kw):
            out += k[None, :, i, j, None, None] * fp[:, :, i : i + h, j : j + w]
    if b is not None:
        out += b[None, :, None, None]
    return out, (fp, k, b is not None)


def _dwconv_bwd(ctx, g, needs):
    fp, k, has_b = ctx
    kh, kw = k.shape[1:]
    h, w = g.shape[2:]
    gf = gk = None
    if needs[0]:
        gfp = np.zeros_like(fp)
        for i in range(kh):
            for j in range(kw):
                gfp[:, :, i : i + h, j : j + w] += k[None, :, i, j, None, None] * g
        gf = gfp[:, :, kh // 2 : kh // 2 + h, kw // 2 : kw // 2 + w]
    if needs[1]:
        gk = np.empty_like(k)
        for i in range(kh):
            for j in range(kw):
                gk[:, i, j] = np.einsum("bchw,bchw->c", g, fp[:, :, i : i + h, j : j + w])
    gb = g.sum(axis=(0, 2, 3)) if has_b and len(needs) > 2 and needs[2] else None
    return gf, gk, gb


def _pwconv_fwd(f, wt, b=None):
    if f.ndim != 4 or wt.ndim != 2 or wt.shape[1] != f.shape[1]:
        raise DimensionError(f"pointwise_conv2d: input {f.shape} vs weight {wt.shape}")
    if b is not None and b.shape != (wt.shape[0],):
        raise DimensionError(f"pointwise_conv2d: bias {b.shape} vs {wt.shape[0]} outputs")
    out = np.einsum("oc,bchw->bohw", wt, f, optimize=True)
    if b is not None:
        out = out + b[None, :, None, None]
    return out, (f, wt, b is not None)


def _pwconv_bwd(ctx, g, needs):
    f, wt, has_b = ctx
    gf = np.einsum("oc,bohw->bchw", wt, g, optimize=True) if needs[0] else None
    gw = np.einsum("bohw,bchw->oc", g, f, optimize=True) if needs[1] else None
    gb = g.sum(axis=(0, 2, 3)) if has_b and len(needs) > 2 and needs[2] else None
    return gf, gw, gb


def core_op_set():
    """Build the immutable registry of differentiable primitives."""
    prims = [
        Primitive("add", _add_fwd, _add_bwd, 2),
        Primitive("sub", _sub_fwd, _sub_bwd, 2),
        Primitive("mul", _mul_fwd, _mul_bwd, 2),
        Primitive("div", _div_fwd, _div_bwd, 2),
        Primitive("neg", _neg_fwd, _neg_bwd, 1),
        Primitive("pow", _pow_fwd, _pow_bwd, 1),
        Primitive("exp", _exp_fwd, _exp_bwd, 1),
        Primitive("log", _log_fwd, _log_bwd, 1),
        Primitive("sqrt", _sqrt_fwd, _sqrt_bwd, 1),
        Primitive("matmul", _matmul_fwd, _matmul_bwd, 2),
        Primitive("sum", _sum_fwd, _sum_bwd, 1),
        Primitive("mean", _mean_fwd, _mean_bwd, 1),
        Primitive("reshape", _reshape_fwd, _reshape_bwd, 1),
        Primitive("transpose", _transpose_fwd, _transpose_bwd, 1),
        Primitive("layer_norm", _layer_norm_fwd, _layer_norm_bwd, 1),
        Primitive("softmax", _softmax_fwd, _softmax_bwd, 1),
        Primitive("log_softmax", _log_softmax_fwd, _log_softmax_bwd, 1),
        Primitive("gelu", _gelu_fwd, _gelu_bwd, 1),
        Primitive("relu", _relu_fwd, _relu_bwd, 1),
        Primitive("dropout", _dropout_fwd, _dropout_bwd, 1),
        Primitive("global_avg_pool", _gap_fwd, _gap_bwd, 1),
        Primitive("adaptive_avg_pool", _aap_fwd, _aap_bwd, 1),
        Primitive("bilinear_upsample", _upsample_fwd, _upsample_bwd, 1),
        Primitive("rfft2_filter", _rfft2_filter_fwd, _rfft2_filter_bwd, 2),
        Primitive("depthwise_conv2d", _dwconv_fwd, _dwconv_bwd, 3),
        Primitive("pointwise_conv2d", _pwconv_fwd, _pwconv_bwd, 3),
    ]
    return MappingProxyType({p.name: p for p in prims})


OPS = core_op_set()


# ---------------------------------------------------------------- public functional API


def add(a, b):
    return apply(OPS["add"], a, b)


def sub(a, b):
    return apply(OPS["sub"], a, b)


def mul(a, b):
    return apply(OPS["mul"], a, b)


def div(a, b):
    return apply(OPS["div"], a, b)


def neg(a):
    return apply(OPS["neg"], a)


def power(a, exponent):
    return apply(OPS["pow"], a, exponent=exponent)


def exp(a):
    return apply(OPS["exp"], a)


def log(a):
    return apply(OPS["log"], a)


def sqrt(a):
    return apply(OPS["sqrt"], a)


def matmul(a, b):
    return apply(OPS["matmul"], a, b)


def tsum(a, axis=None, keepdims=False):
    return apply(OPS["sum"], a, axis=axis, keepdims=keepdims)


def mean(a, axis=None, keepdims=False):
    return apply(OPS["mean"], a, axis=axis, keepdims=keepdims)


def reshape(a, shape):
    return apply(OPS["reshape"], a, shape=tuple(shape))


def transpose(a, axes=None):
    return apply(OPS["transpose"], a, axes=None if axes is None else tuple(axes))


def layer_norm(a, eps=LN_EPS):
    """Normalize over the last axis, no affine."""
    return apply(OPS["layer_norm"], a, eps=eps)


def softmax(a, axis=-1):
    return apply(OPS["softmax"], a, axis=axis)


def log_softmax(a, axis=-1):
    return apply(OPS["log_softmax"], a, axis=axis)


def gelu(a):
    return apply(OPS["gelu"], a)


def relu(a):
    return apply(OPS["relu"], a)


def dropout(a, p=0.1, training=False, rng=None, seed=None):
    """Inverted dropout. The mask seed is drawn from ``rng`` and recorded on the node."""
    if training and p > 0.0 and seed is None:
        if rng is None:
            raise ContractError("dropout in training mode needs an rng or seed")
        seed = int(rng.integers(0, 2**63 - 1))
    return apply(OPS["dropout"], a, p=p, training=training, seed=seed)


def global_avg_pool(a):
    return apply(OPS["global_avg_pool"], a)


def adaptive_avg_pool(a, out_hw):
    return apply(OPS["adaptive_avg_pool"], a, out_hw=tuple(out_hw))


def bilinear_upsample(a, h_out, w_out):
    return apply(OPS["bilinear_upsample"], a, size=(int(h_out), int(w_out)))


def rfft2_filter(f, theta):
    """irfft2(rfft2(f) * theta_c) with theta_c scaling every bin of channel c."""
    return apply(OPS["rfft2_filter"], f, theta)


def depthwise_conv2d(f, kernel, bias=None):
    """Per-channel cross-correlation with zero 'same' padding; kernel is C x k x k."""
    if bias is None:
        return apply(OPS["depthwise_conv2d"], f, kernel)
    return apply(OPS["depthwise_conv2d"], f, kernel, bias)


def pointwise_conv2d(f, weight, bias=None):
    """1x1 convolution; weight is C_out x C_in."""
    if bias is None:
        return apply(OPS["pointwise_conv2d"], f, weight)
    return apply(OPS["pointwise_conv2d"], f, weight, bias)


def linear(x, weight, bias=None):
    """x @ weight (+ bias); weight is in_features x out_features."""
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


# ---------------------------------------------------------------- graph


class Graph:
    """Nodes reachable from ``root`` in topological order (parents first)."""

    def __init__(self, root: Tensor):
        self.root = root
        order, seen = [], set()
        stack = [(root, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                order.append(t)
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            stack.append((t, True))
            if t.node is not None:
                for p in t.node.parents:
                    if id(p) not in seen:
                        stack.append((p, False))
        self.order = order

    @property
    def leaves(self):
        return [t for t in self.order if t.node is None and t.requires_grad]

    def backward(self, seed=None, retain_graph=False):
        """Reverse sweep; returns {leaf: gradient} for every leaf that requires grad."""
        root = self.root
        if seed is None:
            seed = np.ones_like(root.data)
        seed = seed.data if isinstance(seed, Tensor) else np.asarray(seed, dtype=root.dtype)
        if seed.shape != root.shape:
            raise DimensionError(f"backward: seed {seed.shape} vs root {root.shape}")
        grads = {id(root): seed}
        for t in reversed(self.order):
            node = t.node
            g = grads.pop(id(t), None) if node is not None else grads.get(id(t))
            if node is None or g is None:
                continue
            if node.consumed:
                raise LifecycleError(f"graph through '{node.op.name}' was already consumed by backward")
            needs = [p.requires_grad for p in node.parents]
            pgrads = node.op.backward(node.ctx, g, needs)
            for p, pg, need in zip(node.parents, pgrads, needs):
                if not need or pg is None:
                    continue
                key = id(p)
                grads[key] = pg if key not in grads else grads[key] + pg
            if not retain_graph:
                node.consumed = True
                node.ctx = None
        return {t: grads.get(id(t), np.zeros_like(t.data)) for t in self.leaves}

    def replay(self):
        """Recompute every node's value from the leaves and recorded attributes."""
        values = {}
        for t in self.order:
            if t.node is None:
                values[id(t)] = t.data
            else:
                args = [values[id(p)] for p in t.node.parents]
                values[id(t)], _ = t.node.op.forward(*args, **t.node.attrs)
        return values[id(self.root)]


def backward(root: Tensor, seed=None, wrt: Sequence[Tensor] | None = None, retain_graph=False):
    """Gradients of ``root`` (contracted with ``seed``) w.r.t. ``wrt`` leaves.

    Leaves that the root does not depend on get zero gradients.
    """
    grads = Graph(root).backward(seed, retain_graph=retain_graph)
    if wrt is None:
        return grads
    return [grads.get(t, np.zeros_like(t.data)) for t in wrt]


def finite_diff_grad(f: Callable[[np.ndarray], float], x, eps=1e-5):
    """Central-difference gradient of scalar ``f`` at ``x`` (numpy in, float out)."""
    if eps <= 0:
        raise ContractError("eps must be positive")
    x = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    f0 = float(f(x.copy()))
    if float(f(x.copy())) != f0:
        raise ContractError("function is not deterministic (unseeded dropout?)")
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f(x.copy()))
        flat[i] = orig - eps
        fm = float(f(x.copy()))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * eps)
    return g


def rel_error(a, b, floor=1e-8):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), floor))


# ---------------------------------------------------------------- tensor files

def write_tensor(fh_or_path, array):
    """``shape: d0 d1 ...`` header line, then little-endian float32 payload."""
    arr = np.asarray(array.data if isinstance(array, Tensor) else array)
    header = ("shape: " + " ".join(str(n) for n in arr.shape) + "\n").encode("utf-8")
    payload = arr.astype("<f4").tobytes()
    if hasattr(fh_or_path, "write"):
        fh_or_path.write(header)
        fh_or_path.write(payload)
    else:
        with open(fh_or_path, "wb") as fh:
            fh.write(header)
            fh.write(payload)


def read_tensor(fh_or_path):
    if not hasattr(fh_or_path, "readline"):
        with open(fh_or_path, "rb") as fh:
            return read_tensor(fh)
    line = fh_or_path.readline().decode("utf-8").strip()
    if not line.startswith("shape:"):
        raise DimensionError(f"bad tensor header {line!r}")
    shape = tuple(int(s) for s in line[len("shape:"):].split())
    count = int(np.prod(shape)) if shape else 1
    buf = fh_or_path.read(4 * count)
    if len(buf) != 4 * count:
        raise DimensionError(f"tensor payload truncated: expected {count} floats")
    return np.frombuffer(buf, dtype="<f4").reshape(shape).astype(np.float32)


def write_named_tensors(path, header: dict, tensors: dict):
    """Checkpoint: ``key=value`` header lines, blank line, then ``name:`` + tensor records."""
    with open(path, "wb") as fh:
        for k, v in header.items():
            fh.write(f"{k}={v}\n".encode("utf-8"))
        fh.write(f"tensors={len(tensors)}\n\n".encode("utf-8"))
        for name, arr in tensors.items():
            fh.write(f"name: {name}\n".encode("utf-8"))
            write_tensor(fh, arr)


def read_named_tensors(path):
    header, tensors = {}, {}
    with open(path, "rb") as fh:
        while True:
            line = fh.readline()
            if not line:
                raise DimensionError(f"{path}: unterminated checkpoint header")
            line = line.decode("utf-8").rstrip("\n")
            if line == "":
                break
            k, _, v = line.partition("=")
            header[k] = v
        for _ in range(int(header.pop("tensors", 0))):
            name = fh.readline().decode("utf-8").strip()
            if not name.startswith("name:"):
                raise DimensionError(f"{path}: bad record header {name!r}")
            tensors[name[5:].strip()] = read_tensor(fh)
    return header, tensors
