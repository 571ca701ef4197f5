"""Self-supervised training on patches of a single scene."""
import logging
import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from ._accel import tune_allocator
from .errors import ConfigError, InputError, NonFiniteError
from .losses import LossReport, contrastive_loss, self_clustering_loss, shuffle_pairing
from .segnet import forward, init_params

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 2
    inner_iters: int = 50
    batch_size: int = 10
    K: int = 8
    patch_height: int = 128
    patch_width: int = 128
    extraction_stride: int = 64
    learning_rate: float = 0.1
    momentum: float = 0.9
    seed: int = 0
    attention_ratio: int = 8

    def __post_init__(self):
        for name in ("epochs", "inner_iters", "batch_size", "extraction_stride"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.patch_height < 3 or self.patch_width < 3:
            raise ConfigError("patches must be at least 3x3")
        if self.K < 2:
            raise ConfigError(f"K must be >= 2, got {self.K}")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must lie in [0, 1)")

    @classmethod
    def field_names(cls):
        return [f.name for f in fields(cls)]

    def as_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class LogRecord:
    step: int
    epoch: int
    chunk: int
    j: int
    clustering: float
    contrastive: float

    @property
    def total(self):
        return self.clustering + self.contrastive

    def line(self):
        return (f"{self.step}\t{self.epoch}\t{self.chunk}\t{self.j}\t"
                f"{self.clustering!r}\t{self.contrastive!r}\t{self.total!r}")


LOG_HEADER = "step\tepoch\tchunk\tj\tclustering\tcontrastive\ttotal"


def write_log(records, path):
    with open(path, "w") as f:
        f.write(LOG_HEADER + "\n")
        for rec in records:
            f.write(rec.line() + "\n")


def read_log(path):
    records = []
    with open(path) as f:
        header = f.readline().rstrip("\n")
        if header != LOG_HEADER:
            raise InputError(f"{path}: not a training log")
        for line in f:
            s, e, c, j, cl, co, _ = line.rstrip("\n").split("\t")
            records.append(LogRecord(int(s), int(e), int(c), int(j), float(cl), float(co)))
    return records


def _axis_offsets(length, patch, stride):
    offs = list(range(0, length - patch + 1, stride))
    if offs[-1] != length - patch:
        offs.append(length - patch)
    return offs


def extract_patches(scene_dims, cfg):
    """Row-major ``(row, col)`` offsets of a strided grid covering the scene.

    A final edge-aligned row/column is added when the stride does not land
    on the bottom/right border.
    """
    R, C = scene_dims
    if R < cfg.patch_height or C < cfg.patch_width:
        raise InputError(
            f"scene {R}x{C} is smaller than the {cfg.patch_height}x{cfg.patch_width} patch"
        )
    rows = _axis_offsets(R, cfg.patch_height, cfg.extraction_stride)
    cols = _axis_offsets(C, cfg.patch_width, cfg.extraction_stride)
    return [(r, c) for r in rows for c in cols]


def sgd_update(params, grads, lr, momentum, velocity=None):
    """Heavy-ball SGD: ``v = momentum * v + g``; ``w = w - lr * v``.

    Returns new ``(params, velocity)``; the inputs are left untouched.
    Running batch-norm statistics are not optimizer state and pass through.
    """
    velocity = dict(velocity or {})
    new = params.copy()
    for name, w in params.tensors.items():
        g = grads[name]
        if g.shape != w.shape:
            raise ConfigError(f"gradient for {name} has shape {g.shape}, expected {w.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for {name}")
        v = velocity.get(name)
        v = g.astype(np.float32) if v is None else (np.float32(momentum) * v + g).astype(np.float32)
        velocity[name] = v
        new.tensors[name] = w - np.float32(lr) * v
    return new, velocity


def train(scene, cfg, on_step=None):
    """Train a fresh model on one scene; returns ``(params, log_records)``.

    Every epoch visits a random permutation of all patches in chunks of
    ``batch_size``; each chunk gets ``inner_iters`` SGD steps, recomputing
    the argmax pseudo-labels and the shuffled pairing every step.
    """
    from .sceneio import config_digest

    tune_allocator()
    data = np.asarray(scene, dtype=np.float32) if isinstance(scene, np.ndarray) else scene.data
    bands, R, C = data.shape
    index = extract_patches((R, C), cfg)
    seeds = np.random.SeedSequence(cfg.seed).spawn(2)
    params = init_params(int(seeds[0].generate_state(1)[0]), cfg.K, cfg.attention_ratio, bands,
                         config_digest(cfg.as_dict()))
    params.seed = cfg.seed
    rng = np.random.default_rng(seeds[1])
    velocity = None
    records = []
    ph, pw = cfg.patch_height, cfg.patch_width
    n_chunks = math.ceil(len(index) / cfg.batch_size)
    log.info("training on %d patches, %d chunks/epoch", len(index), n_chunks)

    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(index))
        for chunk in range(n_chunks):
            picked = order[chunk * cfg.batch_size : (chunk + 1) * cfg.batch_size]
            batch = np.stack([data[:, r : r + ph, c : c + pw] for r, c in (index[i] for i in picked)])
            batch = batch.astype(np.float32, copy=False)
            for j in range(cfg.inner_iters):
                out = forward(batch, params, "train", input_grad=False)
                y = out.value
                _, l_clu, grad = self_clustering_loss(y)
                l_con = 0.0
                if len(batch) >= 2:
                    perm = shuffle_pairing(len(batch), rng)
                    l_con, g_con = contrastive_loss(y, perm)
                    grad = grad + g_con
                rep = LossReport(float(l_clu), float(l_con))
                if not math.isfinite(rep.total):
                    raise NonFiniteError(f"non-finite loss at step {step}")
                _, grads = out.backward(grad)
                params, velocity = sgd_update(params, grads, cfg.learning_rate, cfg.momentum, velocity)
                params.running = out.state
                rec = LogRecord(step, epoch, chunk, j, rep.clustering, rep.contrastive)
                records.append(rec)
                if on_step is not None:
                    on_step(rec)
                step += 1
            log.info("epoch %d chunk %d: loss %.4f", epoch, chunk, records[-1].total)
    return params, records
