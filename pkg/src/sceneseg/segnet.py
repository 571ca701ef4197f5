"""The lightweight segmentation network and whole-scene inference.

Layout, top to bottom::

    5 x [conv 3x3 (64) -> relu -> batchnorm]
    channel attention (shared MLP over avg- and max-pooled channels)
    conv 1x1 (K) -> batchnorm (no affine)

No stride and no pooling anywhere, so every layer keeps the patch size.
"""
from dataclasses import dataclass, replace

import numpy as np

from .autodiff import GradPair, batchnorm, conv2d, dense, global_pool, relu, sigmoid, register_op
from .errors import ConfigError, InputError, ShapeError, StateError

WIDTH = 64
N_BLOCKS = 5
RATIOS = (4, 8, 16)


@dataclass
class ModelParams:
    """All trainable tensors plus batch-norm running statistics.

    ``tensors`` is ordered as the layers run: ``conv1.*`` .. ``conv5.*``,
    ``attn.*``, ``conv6.*``. ``running[i]`` is the running state of the
    batch norm after conv ``i + 1`` (the last entry belongs to the output
    layer), or ``None`` before the first training step.
    """

    tensors: dict
    running: list
    K: int
    ratio: int
    seed: int = 0
    digest: str = ""

    @property
    def bands(self):
        return self.tensors["conv1.weight"].shape[1]

    @property
    def trained(self):
        return all(r is not None for r in self.running)

    def copy(self):
        return replace(self, tensors={k: v.copy() for k, v in self.tensors.items()},
                       running=list(self.running))

    def layer_geometry(self):
        """``(out_channels, kernel_h, kernel_w)`` for each conv, in order."""
        geo = []
        for i in range(1, N_BLOCKS + 2):
            o, _, kh, kw = self.tensors[f"conv{i}.weight"].shape
            geo.append((o, kh, kw))
        return geo


def param_shapes(bands, K, ratio):
    shapes = {}
    in_c = bands
    for i in range(1, N_BLOCKS + 1):
        shapes[f"conv{i}.weight"] = (WIDTH, in_c, 3, 3)
        shapes[f"conv{i}.bias"] = (WIDTH,)
        shapes[f"conv{i}.gamma"] = (WIDTH,)
        shapes[f"conv{i}.beta"] = (WIDTH,)
        in_c = WIDTH
    hidden = WIDTH // ratio
    shapes["attn.fc1.weight"] = (hidden, WIDTH)
    shapes["attn.fc1.bias"] = (hidden,)
    shapes["attn.fc2.weight"] = (WIDTH, hidden)
    shapes["attn.fc2.bias"] = (WIDTH,)
    shapes[f"conv{N_BLOCKS + 1}.weight"] = (K, WIDTH, 1, 1)
    shapes[f"conv{N_BLOCKS + 1}.bias"] = (K,)
    return shapes


def init_params(seed, K, r=8, bands=3, digest=""):
    """He-normal weights, zero biases, unit gamma, zero beta."""
    if K < 2:
        raise ConfigError(f"K must be at least 2, got {K}")
    if r not in RATIOS:
        raise ConfigError(f"attention ratio must be one of {RATIOS}, got {r}")
    if bands < 1:
        raise ConfigError("need at least one input band")
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in param_shapes(bands, K, r).items():
        kind = name.rsplit(".", 1)[1]
        if kind == "weight":
            fan_in = int(np.prod(shape[1:]))
            tensors[name] = (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(np.float32)
        elif kind == "gamma":
            tensors[name] = np.ones(shape, np.float32)
        else:
            tensors[name] = np.zeros(shape, np.float32)
    return ModelParams(tensors, [None] * (N_BLOCKS + 1), K, r, seed, digest)


# ------------------------------------------------------- channel attention


def _attention(x, w1, b1, w2, b2):
    if x.ndim != 4 or x.shape[1] != w1.shape[1]:
        raise ShapeError("channel_attention channels", w1.shape[1], x.shape[1] if x.ndim == 4 else x.shape)
    n, c = x.shape[:2]
    avg = global_pool(x, "avg")
    mx = global_pool(x, "max")

    branches = []
    z = 0
    for pooled in (avg, mx):
        h1 = dense(pooled.value.reshape(n, c), w1, b1)
        a1 = relu(h1.value)
        h2 = dense(a1.value, w2, b2)
        branches.append((pooled, h1, a1, h2))
        z = z + h2.value
    gate = sigmoid(z)
    g = gate.value
    value = x * g[:, :, None, None]

    def backward(dout):
        dx = dout * g[:, :, None, None]
        dg = (dout * x).sum(axis=(2, 3))
        (dz,) = gate.backward(dg)
        dw1 = np.zeros_like(w1)
        db1 = np.zeros_like(b1)
        dw2 = np.zeros_like(w2)
        db2 = np.zeros_like(b2)
        for pooled, h1, a1, h2 in branches:
            da1, gw2, gb2 = h2.backward(dz)
            (dh1,) = a1.backward(da1)
            dp, gw1, gb1 = h1.backward(dh1)
            (dxp,) = pooled.backward(dp.reshape(n, c, 1, 1))
            dx = dx + dxp
            dw1 += gw1
            db1 += gb1
            dw2 += gw2
            db2 += gb2
        return dx, dw1, db1, dw2, db2

    return GradPair(value, backward)


def channel_attention(features, params):
    """Rescale each channel by a sigmoid gate computed from pooled statistics.

    Returns a GradPair whose backward yields ``(d_features, grads)`` where
    ``grads`` maps the ``attn.*`` parameter names to their gradients.
    """
    t = params.tensors
    names = ("attn.fc1.weight", "attn.fc1.bias", "attn.fc2.weight", "attn.fc2.bias")
    pair = _attention(features, *(t[k] for k in names))

    def backward(dout):
        dx, *grads = pair.backward(dout)
        return dx, dict(zip(names, grads))

    return GradPair(pair.value, backward)


# ----------------------------------------------------------------- forward


def forward(batch, params, mode="train", input_grad=True):
    """Run the network on ``(B, bands, R', C')`` patches.

    Returns a GradPair with value ``(B, K, R', C')``. Its backward maps the
    feature gradient to ``(d_batch, grads)``; ``grads`` is keyed like
    ``params.tensors``; ``d_batch`` is ``None`` when ``input_grad`` is off.
    ``state`` holds the new running stats, one per batch norm.
    """
    if batch.ndim != 4:
        raise ShapeError("forward input rank", 4, batch.ndim)
    if batch.shape[1] != params.bands:
        raise ShapeError("forward input bands", params.bands, batch.shape[1])
    if mode == "eval" and not params.trained:
        raise StateError("model has no batch-norm running statistics; train it first")
    t = params.tensors
    h, w = batch.shape[2:]
    x = batch
    stack = []
    new_running = []
    for i in range(1, N_BLOCKS + 1):
        conv = conv2d(x, t[f"conv{i}.weight"], t[f"conv{i}.bias"], 1, input_grad or i > 1)
        act = relu(conv.value)
        bn = batchnorm(act.value, t[f"conv{i}.gamma"], t[f"conv{i}.beta"],
                       params.running[i - 1], mode)
        new_running.append(bn.state)
        stack.append((i, conv, act, bn))
        x = bn.value
        assert x.shape[2:] == (h, w)
    att = channel_attention(x, params)
    last = N_BLOCKS + 1
    head = conv2d(att.value, t[f"conv{last}.weight"], t[f"conv{last}.bias"], 0)
    # plain standardization of the K outputs keeps any single cluster from
    # swamping the argmax
    unit = np.ones(params.K, dtype=head.value.dtype)
    out = batchnorm(head.value, unit, np.zeros_like(unit), params.running[last - 1], mode)
    new_running.append(out.state)

    def backward(dout):
        grads = {}
        dout, _, _ = out.backward(dout)
        dx, grads[f"conv{last}.weight"], grads[f"conv{last}.bias"] = head.backward(dout)
        dx, agrads = att.backward(dx)
        grads.update(agrads)
        for i, conv, act, bn in reversed(stack):
            dx, grads[f"conv{i}.gamma"], grads[f"conv{i}.beta"] = bn.backward(dx)
            (dx,) = act.backward(dx)
            dx, grads[f"conv{i}.weight"], grads[f"conv{i}.bias"] = conv.backward(dx)
        return dx, grads

    return GradPair(out.value, backward, new_running)


# ---------------------------------------------------------------- inference


def tile_offsets(length, tile):
    """Non-overlapping tile starts; the last one is pulled back to fit."""
    if length < tile:
        raise InputError(f"scene side {length} is smaller than the tile size {tile}")
    offs = []
    for o in range(0, length, tile):
        o = min(o, length - tile)
        if not offs or offs[-1] != o:
            offs.append(o)
    return offs


def segment_scene(scene, params, tile=(128, 128)):
    """Cluster index per pixel for a whole scene, as a SegmentationMap."""
    from .sceneio import SegmentationMap

    data = np.asarray(scene) if isinstance(scene, np.ndarray) else scene.data
    bands, R, C = data.shape
    if bands != params.bands:
        raise ShapeError("scene bands", params.bands, bands)
    th, tw = tile
    labels = np.zeros((R, C), dtype=np.int64)
    for r in tile_offsets(R, th):
        for c in tile_offsets(C, tw):
            patch = data[None, :, r : r + th, c : c + tw].astype(np.float32)
            y = forward(patch, params, mode="eval").value
            labels[r : r + th, c : c + tw] = y[0].argmax(axis=0)
    return SegmentationMap(labels, params.K)


register_op("channel_attention", _attention, ["x", "w1", "b1", "w2", "b2"])


def register_forward_check(params):
    """Register ``forward`` for gradient checking around ``params``.

    The op is differentiated w.r.t. the input ``x`` and every tensor of
    ``params``; a sample point passes them by name.
    """

    def run(x, **tensors):
        p = replace(params, tensors={**params.tensors, **tensors})
        pair = forward(x, p, "train")

        def backward(dout):
            dx, grads = pair.backward(dout)
            return (dx, *(grads[k] for k in params.tensors))

        return GradPair(pair.value, backward)

    register_op("forward", run, ["x", *params.tensors])
