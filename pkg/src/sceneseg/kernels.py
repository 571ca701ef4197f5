"""Hot inner loops, each in a compiled and a pure-numpy flavour.

The public names at the bottom of the module are bound to the numba
versions unless ``SCENESEG_NUMBA=0`` was set at import time. Both flavours
stay importable under their private names so they can be cross-checked and
benchmarked against each other.

Convolution columns use a "transposed" layout: ``cols[c*kh*kw + i*kw + j,
n*h*w + y*w + x] = x_pad[n, c, y + i, x + j]``. Each row is a shifted copy
of one input plane, which keeps reads and writes contiguous.
"""
import numpy as np

from ._accel import USE_NUMBA, optional_njit


# ---------------------------------------------------------------- im2col


def _im2col_numpy(x, kh, kw, pad):
    n, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    cols = np.empty((c, kh, kw, n, h, w), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xp[:, :, i : i + h, j : j + w].transpose(1, 0, 2, 3)
    return cols.reshape(c * kh * kw, n * h * w)


@optional_njit()
def _im2col_numba(x, kh, kw, pad):
    n, c, h, w = x.shape
    xf = x.ravel()
    hw = h * w
    nhw = n * hw
    cols = np.empty(c * kh * kw * nhw, dtype=x.dtype)
    for r in range(c * kh * kw):
        ci = r // (kh * kw)
        i = (r // kw) % kh
        dx = r % kw - pad
        x0 = max(0, -dx)
        x1 = min(w, w - dx)
        for b in range(n):
            sbase = (b * c + ci) * hw
            obase = r * nhw + b * hw
            for y in range(h):
                o = obase + y * w
                sy = y + i - pad
                if sy < 0 or sy >= h:
                    for xx in range(w):
                        cols[o + xx] = 0
                else:
                    s = sbase + sy * w + dx
                    for xx in range(x0):
                        cols[o + xx] = 0
                    for xx in range(x0, x1):
                        cols[o + xx] = xf[s + xx]
                    for xx in range(x1, w):
                        cols[o + xx] = 0
    return cols.reshape(c * kh * kw, nhw)


def _col2im_numpy(cols, shape, kh, kw, pad):
    n, c, h, w = shape
    dxp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    blocks = cols.reshape(c, kh, kw, n, h, w)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i : i + h, j : j + w] += blocks[:, i, j].transpose(1, 0, 2, 3)
    if pad:
        return np.ascontiguousarray(dxp[:, :, pad:-pad, pad:-pad])
    return dxp


@optional_njit()
def _col2im_numba(cols, n, c, h, w, kh, kw, pad):
    hw = h * w
    nhw = n * hw
    cf = cols.ravel()
    dx = np.zeros(n * c * hw, dtype=cols.dtype)
    # same (i, j) accumulation order as the numpy path
    for i in range(kh):
        for j in range(kw):
            ddx = j - pad
            x0 = max(0, -ddx)
            x1 = min(w, w - ddx)
            for ci in range(c):
                rbase = ((ci * kh + i) * kw + j) * nhw
                for b in range(n):
                    dbase = (b * c + ci) * hw
                    for y in range(h):
                        sy = y + i - pad
                        if sy < 0 or sy >= h:
                            continue
                        o = rbase + b * hw + y * w
                        d = dbase + sy * w + ddx
                        for xx in range(x0, x1):
                            dx[d + xx] += cf[o + xx]
    return dx.reshape(n, c, h, w)


# ------------------------------------------------------------ batch norm


def _bn_forward_numpy(x, gamma, beta, eps):
    """Train-mode batch norm; returns ``(y, xhat, mean, var, inv_std)``."""
    mean = x.mean(axis=(0, 2, 3), dtype=np.float64)
    centered = x - mean[None, :, None, None].astype(x.dtype)
    var = np.mean(np.square(centered, dtype=np.float64), axis=(0, 2, 3))
    inv = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = centered * inv[None, :, None, None]
    y = xhat * gamma[None, :, None, None] + beta[None, :, None, None]
    return y.astype(x.dtype, copy=False), xhat, mean.astype(x.dtype), var.astype(x.dtype), inv


@optional_njit()
def _bn_forward_numba(x, gamma, beta, eps):
    n, c, h, w = x.shape
    hw = h * w
    count = n * hw
    xf = x.ravel()
    y = np.empty(x.size, dtype=x.dtype)
    xhat = np.empty(x.size, dtype=x.dtype)
    mean = np.empty(c, dtype=x.dtype)
    var = np.empty(c, dtype=x.dtype)
    inv = np.empty(c, dtype=x.dtype)
    for ci in range(c):
        s = 0.0
        for b in range(n):
            base = (b * c + ci) * hw
            for p in range(hw):
                s += xf[base + p]
        m = s / count
        s2 = 0.0
        for b in range(n):
            base = (b * c + ci) * hw
            for p in range(hw):
                d = xf[base + p] - m
                s2 += d * d
        v = s2 / count
        iv = 1.0 / np.sqrt(v + eps)
        mean[ci] = m
        var[ci] = v
        inv[ci] = iv
        g = gamma[ci]
        bt = beta[ci]
        mc = mean[ci]
        ic = inv[ci]
        for b in range(n):
            base = (b * c + ci) * hw
            for p in range(hw):
                xh = (xf[base + p] - mc) * ic
                xhat[base + p] = xh
                y[base + p] = xh * g + bt
    return y.reshape(x.shape), xhat.reshape(x.shape), mean, var, inv


def _bn_backward_numpy(dy, xhat, gamma, inv):
    """Full train-mode gradient; returns ``(dx, dgamma, dbeta)``."""
    n, c, h, w = dy.shape
    count = n * h * w
    sdy = dy.sum(axis=(0, 2, 3), dtype=np.float64).astype(dy.dtype)
    sdyx = np.einsum("nchw,nchw->c", dy, xhat, dtype=np.float64).astype(dy.dtype)
    shp = (1, c, 1, 1)
    # dx = gamma*inv/N * (N*dy - sum(dy) - xhat*sum(dy*xhat))
    scale = (gamma * inv / count).reshape(shp)
    dx = scale * (count * dy - sdy.reshape(shp) - xhat * sdyx.reshape(shp))
    return dx.astype(dy.dtype, copy=False), sdyx, sdy


@optional_njit()
def _bn_backward_numba(dy, xhat, gamma, inv):
    n, c, h, w = dy.shape
    hw = h * w
    count = n * hw
    df = dy.ravel()
    xf = xhat.ravel()
    dx = np.empty(dy.size, dtype=dy.dtype)
    dgamma = np.empty(c, dtype=dy.dtype)
    dbeta = np.empty(c, dtype=dy.dtype)
    scales = np.empty(c, dtype=dy.dtype)
    for ci in range(c):
        a = 0.0
        bs = 0.0
        for b in range(n):
            base = (b * c + ci) * hw
            for p in range(hw):
                g = df[base + p]
                a += g
                bs += g * xf[base + p]
        dbeta[ci] = a
        dgamma[ci] = bs
        scales[ci] = gamma[ci] * inv[ci] / count
        scale = scales[ci]
        ac = dbeta[ci]
        bc = dgamma[ci]
        for b in range(n):
            base = (b * c + ci) * hw
            for p in range(hw):
                dx[base + p] = scale * (count * df[base + p] - ac - xf[base + p] * bc)
    return dx.reshape(dy.shape), dgamma, dbeta


# ------------------------------------------------------ global max pool


def _global_max_numpy(x):
    n, c = x.shape[:2]
    flat = x.reshape(n, c, -1)
    idx = flat.argmax(axis=2)
    vals = np.take_along_axis(flat, idx[:, :, None], axis=2)[:, :, 0]
    return vals, idx


# ------------------------------------------------------------- losses


def _softmax_xent_numpy(y):
    """Argmax labels, mean cross-entropy against them, and its gradient."""
    b, k, h, w = y.shape
    labels = y.argmax(axis=1)
    shifted = y - y.max(axis=1, keepdims=True)
    ex = np.exp(shifted)
    denom = ex.sum(axis=1, keepdims=True)
    logp = shifted - np.log(denom)
    picked = np.take_along_axis(logp, labels[:, None], axis=1)[:, 0]
    count = b * h * w
    loss = float(-picked.sum(dtype=np.float64) / count)
    grad = ex / denom
    np.put_along_axis(grad, labels[:, None], np.take_along_axis(grad, labels[:, None], axis=1) - 1, axis=1)
    grad /= count
    return labels, loss, grad.astype(y.dtype, copy=False)


@optional_njit()
def _softmax_xent_numba(y):
    # whole pixel planes per channel so the inner loops vectorize
    b, k, h, w = y.shape
    hw = h * w
    count = b * hw
    yf = y.reshape(b, k, hw)
    labels = np.empty((b, hw), dtype=np.int64)
    grad = np.empty_like(yf)
    best = np.empty(hw, dtype=y.dtype)
    denom = np.empty(hw, dtype=y.dtype)
    scale = 1.0 / count
    total = 0.0
    for n in range(b):
        lab = labels[n]
        best[:] = yf[n, 0]
        lab[:] = 0
        for q in range(1, k):
            for p in range(hw):
                v = yf[n, q, p]
                if v > best[p]:
                    best[p] = v
                    lab[p] = q
        denom[:] = 0
        for q in range(k):
            for p in range(hw):
                e = np.exp(yf[n, q, p] - best[p])
                grad[n, q, p] = e
                denom[p] += e
        for p in range(hw):
            total += np.log(np.float64(denom[p]))  # -log softmax at the argmax
            denom[p] = scale / denom[p]
        for q in range(k):
            for p in range(hw):
                grad[n, q, p] = grad[n, q, p] * denom[p] - scale * (lab[p] == q)
    return labels.reshape(b, h, w), total / count, grad.reshape(b, k, h, w)


def _contrastive_numpy(y, perm):
    b, k, h, w = y.shape
    diff = y - y[perm]
    term = np.exp(-np.abs(diff).sum(axis=1, dtype=y.dtype))
    count = b * h * w
    loss = float(term.sum(dtype=np.float64) / count)
    g = (term[:, None] * np.sign(diff)) / count
    grad = -g
    grad[perm] += g
    return loss, grad.astype(y.dtype, copy=False)


@optional_njit()
def _contrastive_numba(y, perm):
    b, k, h, w = y.shape
    hw = h * w
    count = b * hw
    yf = y.reshape(b, k, hw)
    grad = np.zeros_like(yf)
    term = np.empty(hw, dtype=y.dtype)
    scale = 1.0 / count
    total = 0.0
    for n in range(b):
        m = perm[n]
        term[:] = 0
        for q in range(k):
            for p in range(hw):
                term[p] += abs(yf[n, q, p] - yf[m, q, p])
        for p in range(hw):
            term[p] = np.exp(-term[p])
            total += term[p]
            term[p] *= scale
        for q in range(k):
            for p in range(hw):
                d = yf[n, q, p] - yf[m, q, p]
                # sign(d) * t; a zero difference gets a zero subgradient
                s = term[p] * ((d > 0) - np.float32(d < 0))
                grad[n, q, p] -= s
                grad[m, q, p] += s
    return total / count, grad.reshape(b, k, h, w)


# --------------------------------------------------------------- dispatch


def _col2im_numba_call(cols, shape, kh, kw, pad):
    n, c, h, w = shape
    return _col2im_numba(np.ascontiguousarray(cols), n, c, h, w, kh, kw, pad)


def _contig(fn):
    def wrapped(*args):
        return fn(*(np.ascontiguousarray(a) if isinstance(a, np.ndarray) else a for a in args))

    wrapped.__name__ = fn.__name__
    return wrapped


NUMPY_KERNELS = {
    "im2col": _im2col_numpy,
    "col2im": _col2im_numpy,
    "bn_forward": _bn_forward_numpy,
    "bn_backward": _bn_backward_numpy,
    "global_max": _global_max_numpy,
    "softmax_xent": _softmax_xent_numpy,
    "contrastive": _contrastive_numpy,
}

NUMBA_KERNELS = {
    "im2col": _contig(_im2col_numba),
    "col2im": _col2im_numba_call,
    "bn_forward": _contig(_bn_forward_numba),
    "bn_backward": _contig(_bn_backward_numba),
    # numpy argmax is SIMD; a compiled float max reduction does not vectorize
    "global_max": _global_max_numpy,
    "softmax_xent": _contig(_softmax_xent_numba),
    "contrastive": lambda y, perm: _contrastive_numba(
        np.ascontiguousarray(y), np.asarray(perm, dtype=np.int64)
    ),
}

ACTIVE = NUMBA_KERNELS if USE_NUMBA else NUMPY_KERNELS
BACKEND = "numba" if USE_NUMBA else "numpy"

im2col = ACTIVE["im2col"]
col2im = ACTIVE["col2im"]
bn_forward = ACTIVE["bn_forward"]
bn_backward = ACTIVE["bn_backward"]
global_max = ACTIVE["global_max"]
softmax_xent = ACTIVE["softmax_xent"]
contrastive = ACTIVE["contrastive"]
