"""Synthetic scenes with known region layout, for smoke tests and benchmarks."""
import numpy as np

# per-band means on a [0, 1] range; every band differs by >= 0.2 between regions
REGION_MEANS = np.array([
    [0.2, 0.7, 0.2],
    [0.8, 0.3, 0.5],
    [0.5, 0.5, 0.8],
])


def three_region_scene(size=192, noise=0.05, seed=0):
    """Return ``(raw, labels)``: a 3-band ``(3, size, size)`` raster and its regions.

    Region 0 is the top half, regions 1 and 2 split the bottom half into
    left and right. Gaussian noise with std ``noise`` (fraction of the unit
    dynamic range) is added independently per band and pixel.
    """
    half = size // 2
    labels = np.zeros((size, size), dtype=np.int64)
    labels[half:, :half] = 1
    labels[half:, half:] = 2
    rng = np.random.default_rng(seed)
    raw = REGION_MEANS[labels].transpose(2, 0, 1)
    raw = raw + rng.normal(0.0, noise, raw.shape)
    return raw, labels


def majority_accuracy(pred, labels):
    """Pixel accuracy once every cluster is named after its majority region."""
    from .evaluator import confusion

    cm = confusion(pred, labels, M=int(labels.max()) + 1)
    return float(cm.counts.max(axis=1).sum() / cm.counts.sum())


def synthetic_run(seed, size=192, patch=64, stride=32, scene_seed=0, threads=None, **overrides):
    """Train on a fresh three-region scene and score the result.

    Returns ``(accuracy, params, log_records, seconds)``; the whole scene is
    segmented in ``patch``-sized tiles.
    """
    import time

    from ._accel import set_threads
    from .sceneio import scene_from_array
    from .segnet import segment_scene
    from .trainer import TrainConfig, train

    if threads:
        from threadpoolctl import threadpool_limits

        threadpool_limits(threads)
        set_threads(threads)
    raw, labels = three_region_scene(size, seed=scene_seed)
    scene = scene_from_array(raw)
    cfg = TrainConfig(patch_height=patch, patch_width=patch, extraction_stride=stride, seed=seed,
                      **overrides)
    start = time.perf_counter()
    params, records = train(scene, cfg)
    seg = segment_scene(scene, params, (patch, patch))
    elapsed = time.perf_counter() - start
    return majority_accuracy(seg, labels), params, records, elapsed
