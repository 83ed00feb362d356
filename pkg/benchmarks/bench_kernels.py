"""Compiled vs numpy kernels: per-kernel timings and one end-to-end MAE step.

    python3 benchmarks/bench_kernels.py [--repeat 20] [--quick]

Kernel timings import both backends side by side. The end-to-end timing runs
in a subprocess per backend, because the backend is fixed at import.
"""

import argparse
import json
import os
import subprocess
import sys
import timeit

import numpy as np

from fedmim import kernels

SHAPES = [(64, 64), (1024, 64), (4096, 256)]

E2E = """
import time, numpy as np
from fedmim import kernels, optim, vit
from fedmim import tensor as T
cfg = vit.ViTConfig(image_size=32, patch_size=4, enc_dim=64, enc_depth=4, enc_heads=4)
rng = np.random.default_rng(0)
enc, dec = vit.init_encoder(cfg, rng), vit.init_decoder(cfg, rng)
params = {**{"e." + k: v for k, v in enc.items()}, **{"d." + k: v for k, v in dec.items()}}
opt = optim.init_optimizer("adamw", params, lr=1e-3)
imgs = rng.random((8, 3, 32, 32)).astype(np.float32)
def step():
    masks = [vit.sample_mask(cfg.num_patches, cfg.mask_ratio, rng) for _ in range(8)]
    T.zero_grad(params)
    _, loss = vit.mae_forward(imgs, enc, dec, cfg, masks)
    T.backward(loss)
    optim.optimizer_step(opt, params)
step()
t0 = time.perf_counter()
for _ in range({steps}):
    step()
print(kernels.BACKEND, (time.perf_counter() - t0) / {steps})
"""


def _cases(rows, cols, rng):
    x = rng.standard_normal((rows, cols)).astype(np.float32)
    gy = rng.standard_normal((rows, cols)).astype(np.float32)
    flat, gflat = x.ravel().copy(), gy.ravel().copy()
    arrays = [rng.standard_normal(rows * cols).astype(np.float32) for _ in range(6)]
    w = np.full(6, 1 / 6, np.float32)

    def ln(b):
        y, r = b.layer_norm_fwd(x, 1e-5)
        b.layer_norm_bwd(gy, y, r)

    def sm(b):
        y = b.softmax_fwd(x)
        b.softmax_bwd(y, gy)

    return {
        "layer_norm fwd+bwd": ln,
        "gelu fwd+bwd": lambda b: (b.gelu_fwd(flat), b.gelu_bwd(flat, gflat)),
        "softmax fwd+bwd": sm,
        "weighted_sum (6 clients)": lambda b: b.weighted_sum(arrays, w),
    }


def bench_kernels(repeat):
    rng = np.random.default_rng(0)
    rows = []
    for shape in SHAPES:
        for name, fn in _cases(*shape, rng).items():
            t_np = min(timeit.repeat(lambda: fn(kernels.numpy_backend), number=1, repeat=repeat))
            t_cy = min(timeit.repeat(lambda: fn(kernels.compiled_backend), number=1, repeat=repeat))
            rows.append((name, shape, t_np, t_cy))
    return rows


def bench_e2e(steps):
    out = {}
    for forced in ("1", "0"):
        env = dict(os.environ, FEDMIM_PURE_PYTHON=forced)
        res = subprocess.run([sys.executable, "-c", E2E.replace("{steps}", str(steps))],
                             env=env, capture_output=True, text=True, check=True)
        backend, seconds = res.stdout.split()
        out[backend] = float(seconds)
    return out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--steps", type=int, default=10, help="MAE steps timed per backend")
    ap.add_argument("--quick", action="store_true", help="3 repeats, 2 steps")
    ap.add_argument("--json", action="store_true", help="machine-readable output")
    args = ap.parse_args(argv)
    if kernels.compiled_backend is None:
        sys.exit("compiled extension not built; reinstall with `pip install -e . --no-build-isolation`")
    repeat, steps = (3, 2) if args.quick else (args.repeat, args.steps)

    rows = bench_kernels(repeat)
    e2e = bench_e2e(steps)
    if args.json:
        print(json.dumps({"kernels": [{"kernel": n, "shape": list(s), "numpy_s": a, "cython_s": b}
                                      for n, s, a, b in rows], "mae_step_s": e2e}, indent=2))
        return
    print(f"{'kernel':<26}{'shape':>12}{'numpy ms':>11}{'cython ms':>11}{'speedup':>9}")
    for name, shape, t_np, t_cy in rows:
        print(f"{name:<26}{str(shape):>12}{1e3 * t_np:>11.3f}{1e3 * t_cy:>11.3f}{t_np / t_cy:>8.2f}x")
    print(f"\nMAE train step (batch 8, 64 patches, dim 64, depth 4):"
          f" numpy {1e3 * e2e['numpy']:.1f} ms, cython {1e3 * e2e['cython']:.1f} ms,"
          f" speedup {e2e['numpy'] / e2e['cython']:.2f}x")


if __name__ == "__main__":
    main()
