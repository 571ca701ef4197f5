"""Forward/backward kernels for the layers the segmentation network uses.

Every op returns a :class:`GradPair`: the forward value plus a ``backward``
closure that maps the upstream gradient to a tuple of gradients, one per
differentiable argument, in argument order. There is no tape; callers chain
the closures by hand.

Tensors are plain ``numpy`` arrays shaped ``(n, c, h, w)``. Ops keep the
input dtype, so float32 in training and float64 in the gradient checker.
"""
from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np

from . import kernels
from .errors import ShapeError, StateError, NonFiniteError

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


@dataclass
class GradPair:
    value: np.ndarray
    backward: Callable[[np.ndarray], tuple]
    # extra forward products (e.g. updated batch-norm running stats)
    state: Any = None


@dataclass(frozen=True)
class BNState:
    mean: np.ndarray
    var: np.ndarray


def _check_rank4(x, what="input"):
    if x.ndim != 4:
        raise ShapeError(f"{what} rank", 4, x.ndim)


# ------------------------------------------------------------------ conv


def conv2d(x, weights, bias, padding, input_grad=True):
    """Stride-1 cross-correlation, ``out[n, o] = sum_c x[n, c] * w[o, c] + b[o]``.

    With ``input_grad=False`` the backward skips the input gradient and
    returns ``None`` in its place.
    """
    _check_rank4(x)
    if weights.ndim != 4:
        raise ShapeError("weights rank", 4, weights.ndim)
    out_c, in_c, kh, kw = weights.shape
    n, c, h, w = x.shape
    if c != in_c:
        raise ShapeError("conv2d in_channels", in_c, c)
    if bias.shape != (out_c,):
        raise ShapeError("conv2d bias", (out_c,), bias.shape)
    oh, ow = h + 2 * padding - kh + 1, w + 2 * padding - kw + 1
    if (oh, ow) != (h, w):
        raise ShapeError("conv2d padding (output must keep spatial size)", (h, w), (oh, ow))

    wmat = weights.reshape(out_c, -1)
    if kh == 1 and kw == 1:
        cols = x.transpose(1, 0, 2, 3).reshape(c, -1)
    else:
        cols = kernels.im2col(x, kh, kw, padding)
    out = wmat @ cols
    out += bias[:, None]
    value = np.ascontiguousarray(out.reshape(out_c, n, h, w).transpose(1, 0, 2, 3))

    def backward(dout):
        dy = dout.transpose(1, 0, 2, 3).reshape(out_c, -1)
        dw = (dy @ cols.T).reshape(weights.shape)
        db = dy.sum(axis=1)
        if not input_grad:
            return None, dw, db
        dcols = wmat.T @ dy
        if kh == 1 and kw == 1:
            dx = np.ascontiguousarray(dcols.reshape(c, n, h, w).transpose(1, 0, 2, 3))
        else:
            dx = kernels.col2im(dcols, x.shape, kh, kw, padding)
        return dx, dw, db

    return GradPair(value, backward)


# ----------------------------------------------------------- activations


def relu(x):
    mask = x > 0
    value = np.maximum(x, 0)

    def backward(dout):
        return (dout * mask,)

    return GradPair(value, backward)


def sigmoid(x):
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    s = np.where(x >= 0, 1 / (1 + e), e / (1 + e)).astype(x.dtype, copy=False)

    def backward(dout):
        return (dout * s * (1 - s),)

    return GradPair(s, backward)


# ------------------------------------------------------------ batch norm


def batchnorm(x, gamma, beta, running=None, mode="train", eps=BN_EPS, momentum=BN_MOMENTUM):
    """Per-channel batch normalization over ``(n, h, w)``.

    In train mode the returned pair's ``state`` carries the updated running
    statistics; ``running`` itself is never modified. A ``None`` running
    state starts from mean 0 / variance 1.
    """
    _check_rank4(x)
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError("batchnorm gamma/beta", (c,), (gamma.shape, beta.shape))
    if eps <= 0:
        raise ValueError("eps must be positive")
    shp = (1, c, 1, 1)

    if mode == "eval":
        if running is None:
            raise StateError("batchnorm in eval mode needs populated running statistics")
        inv = (1 / np.sqrt(running.var + eps)).astype(x.dtype)
        mu = running.mean.astype(x.dtype)
        xhat = (x - mu.reshape(shp)) * inv.reshape(shp)
        value = xhat * gamma.reshape(shp) + beta.reshape(shp)

        def backward_eval(dout):
            dgamma = (dout * xhat).sum(axis=(0, 2, 3))
            dbeta = dout.sum(axis=(0, 2, 3))
            return dout * (gamma * inv).reshape(shp), dgamma, dbeta

        return GradPair(value, backward_eval, running)
    if mode != "train":
        raise ValueError(f"unknown batchnorm mode {mode!r}")

    value, xhat, mean, var, inv = kernels.bn_forward(x, gamma.astype(x.dtype), beta.astype(x.dtype), eps)

    if running is None:
        old_mean, old_var = np.zeros(c, np.float32), np.ones(c, np.float32)
    else:
        old_mean, old_var = running.mean, running.var
    new_state = BNState(
        ((1 - momentum) * old_mean + momentum * mean).astype(np.float32),
        ((1 - momentum) * old_var + momentum * var).astype(np.float32),
    )

    def backward(dout):
        return kernels.bn_backward(dout.astype(x.dtype, copy=False), xhat, gamma.astype(x.dtype), inv)

    return GradPair(value, backward, new_state)


# --------------------------------------------------------------- pooling


def global_pool(x, kind):
    """Pool every channel to a single value; returns shape ``(n, c, 1, 1)``."""
    _check_rank4(x)
    n, c, h, w = x.shape
    if h * w < 1:
        raise ShapeError("global_pool spatial size", ">= 1", h * w)
    if kind == "avg":
        value = x.mean(axis=(2, 3), keepdims=True)

        def backward(dout):
            dx = np.broadcast_to(dout / (h * w), x.shape)
            return (np.ascontiguousarray(dx, dtype=x.dtype),)

    elif kind == "max":
        vals, idx = kernels.global_max(x)
        value = vals.reshape(n, c, 1, 1)

        def backward(dout):
            dx = np.zeros((n, c, h * w), dtype=x.dtype)
            np.put_along_axis(dx, idx[:, :, None], dout.reshape(n, c, 1), axis=2)
            return (dx.reshape(x.shape),)

    else:
        raise ValueError(f"unknown pool kind {kind!r}")
    return GradPair(value, backward)


# ----------------------------------------------------------------- dense


def dense(x, weights, bias):
    """Affine map ``W @ x + b``. ``x`` is ``(c_in,)`` or a batch ``(n, c_in)``."""
    if weights.ndim != 2:
        raise ShapeError("dense weights rank", 2, weights.ndim)
    c_out, c_in = weights.shape
    if x.shape[-1] != c_in:
        raise ShapeError("dense input features", c_in, x.shape[-1])
    if bias.shape != (c_out,):
        raise ShapeError("dense bias", (c_out,), bias.shape)
    value = x @ weights.T + bias

    def backward(dout):
        dx = dout @ weights
        if dout.ndim == 1:
            dw = np.outer(dout, x)
            db = dout.copy()
        else:
            dw = dout.T @ x
            db = dout.sum(axis=0)
        return dx, dw, db

    return GradPair(value, backward)


# ----------------------------------------------------- gradient checking


@dataclass
class _Registered:
    func: Callable[..., GradPair]
    grad_args: tuple
    static: dict = field(default_factory=dict)


OPS = {}


def register_op(name, func, grad_args, **static):
    """Make ``func`` checkable by :func:`finite_difference_check`.

    ``grad_args`` names the keyword arguments that the GradPair's backward
    differentiates, in the order its returned tuple lists them.
    """
    OPS[name] = _Registered(func, tuple(grad_args), static)


register_op("conv2d", lambda x, weights, bias, padding=1: conv2d(x, weights, bias, padding),
            ["x", "weights", "bias"])
register_op("relu", relu, ["x"])
register_op("sigmoid", sigmoid, ["x"])
register_op("batchnorm", lambda x, gamma, beta: batchnorm(x, gamma, beta, mode="train"),
            ["x", "gamma", "beta"])
register_op("global_pool_avg", lambda x: global_pool(x, "avg"), ["x"])
register_op("global_pool_max", lambda x: global_pool(x, "max"), ["x"])
register_op("dense", dense, ["x", "weights", "bias"])


def finite_difference_check(op_id, sample_point, step=1e-5, *, seed=0, max_coords=None):
    """Compare an op's analytic backward with central differences.

    The op output is contracted with a fixed random upstream tensor ``u``
    so that a single scalar ``sum(u * out)`` is differentiated. Returns the
    largest ``|analytic - numeric| / max(1, |numeric|)`` over every checked
    coordinate of every differentiable argument. ``max_coords`` limits the
    check to that many randomly chosen coordinates per argument.
    """
    if op_id not in OPS:
        raise KeyError(f"no registered op {op_id!r}; known: {sorted(OPS)}")
    if not 1e-6 <= step <= 1e-3:
        raise ValueError("step must lie in [1e-6, 1e-3]")
    reg = OPS[op_id]
    point = {}
    for k, v in sample_point.items():
        v = np.asarray(v)
        # integer arguments (labels, permutations) pass through untouched
        point[k] = np.array(v, dtype=np.float64) if k in reg.grad_args else v
    kwargs = dict(reg.static)
    rng = np.random.default_rng(seed)

    def run(pt):
        return reg.func(**pt, **kwargs)

    base = run(point)
    upstream = rng.standard_normal(np.shape(base.value))
    analytic = base.backward(upstream)

    worst = 0.0
    for name, grad in zip(reg.grad_args, analytic):
        arr = point[name]
        flat = arr.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, max_coords, replace=False))
        gflat = np.asarray(grad, dtype=np.float64).reshape(-1)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + step
            fp = float(np.sum(upstream * run(point).value))
            flat[i] = orig - step
            fm = float(np.sum(upstream * run(point).value))
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                idx = [int(v) for v in np.unravel_index(i, arr.shape)]
                raise NonFiniteError(f"{op_id}: non-finite output when perturbing {name}{idx}")
            numeric = (fp - fm) / (2 * step)
            err = abs(gflat[i] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    return worst
