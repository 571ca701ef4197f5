"""Compiled vs pure-numpy kernels at training sizes, plus one full SGD step.

    python benchmarks/bench_kernels.py [--repeat 5] [--batch 10] [--size 64]

The step benchmark runs in a subprocess per backend because the backend is
picked once, from ``SCENESEG_NUMBA``, when ``sceneseg.kernels`` is imported.
"""
import argparse
import json
import os
import subprocess
import sys
import timeit

import numpy as np

from sceneseg import kernels
from sceneseg._accel import tune_allocator


def kernel_cases(batch, size, rng):
    x = rng.standard_normal((batch, 64, size, size)).astype(np.float32)
    g = np.ones(64, np.float32)
    b = np.zeros(64, np.float32)
    cols = rng.standard_normal((64 * 9, batch * size * size)).astype(np.float32)
    y = rng.standard_normal((batch, 8, size, size)).astype(np.float32)
    _, xhat, _, _, inv = kernels.NUMPY_KERNELS["bn_forward"](x, g, b, 1e-5)
    perm = np.roll(np.arange(batch), 1)
    return {
        "im2col": lambda k: k["im2col"](x, 3, 3, 1),
        "col2im": lambda k: k["col2im"](cols, x.shape, 3, 3, 1),
        "bn_forward": lambda k: k["bn_forward"](x, g, b, 1e-5),
        "bn_backward": lambda k: k["bn_backward"](x, xhat, g, inv),
        "global_max": lambda k: k["global_max"](x),
        "softmax_xent": lambda k: k["softmax_xent"](y),
        "contrastive": lambda k: k["contrastive"](y, perm),
    }


def best_of(fn, repeat):
    fn()  # warm up (and compile)
    return min(timeit.repeat(fn, number=1, repeat=repeat))


STEP_SNIPPET = """
import json, sys, timeit
import numpy as np
from sceneseg._accel import tune_allocator
from sceneseg.losses import contrastive_loss, self_clustering_loss
from sceneseg.segnet import forward, init_params
from sceneseg.trainer import sgd_update
tune_allocator()
batch, size, repeat = map(int, sys.argv[1:4])
x = np.random.default_rng(0).standard_normal((batch, 3, size, size)).astype(np.float32)
state = {"p": init_params(0, 8), "v": None}
perm = np.roll(np.arange(batch), 1)
def step():
    out = forward(x, state["p"], "train", input_grad=False)
    _, _, g = self_clustering_loss(out.value)
    _, g2 = contrastive_loss(out.value, perm)
    _, grads = out.backward(g + g2)
    state["p"], state["v"] = sgd_update(state["p"], grads, 0.1, 0.9, state["v"])
step()
print(json.dumps(min(timeit.repeat(step, number=1, repeat=repeat))))
"""


def step_time(backend, batch, size, repeat):
    env = dict(os.environ, SCENESEG_NUMBA="1" if backend == "numba" else "0")
    out = subprocess.run([sys.executable, "-c", STEP_SNIPPET, str(batch), str(size), str(repeat)],
                         env=env, capture_output=True, text=True, check=True)
    return json.loads(out.stdout)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--batch", type=int, default=10)
    ap.add_argument("--size", type=int, default=64)
    ap.add_argument("--no-step", action="store_true", help="skip the full training-step comparison")
    args = ap.parse_args(argv)
    tune_allocator()  # as in training; otherwise page faults dominate

    cases = kernel_cases(args.batch, args.size, np.random.default_rng(0))
    print(f"batch {args.batch}, {args.size}x{args.size}, 64 channels; best of {args.repeat}, ms")
    print(f"{'kernel':<14}{'numpy':>10}{'numba':>10}{'speedup':>10}")
    for name, call in cases.items():
        t_np = best_of(lambda: call(kernels.NUMPY_KERNELS), args.repeat) * 1e3
        t_nb = best_of(lambda: call(kernels.NUMBA_KERNELS), args.repeat) * 1e3
        print(f"{name:<14}{t_np:>10.2f}{t_nb:>10.2f}{t_np / t_nb:>9.2f}x")
    if not args.no_step:
        t_np = step_time("numpy", args.batch, args.size, args.repeat) * 1e3
        t_nb = step_time("numba", args.batch, args.size, args.repeat) * 1e3
        print(f"{'sgd step':<14}{t_np:>10.1f}{t_nb:>10.1f}{t_np / t_nb:>9.2f}x")


if __name__ == "__main__":
    main()
