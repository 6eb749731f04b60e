"""Time the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat N]

Shapes match one training step of the default DepthNet at 128x48 with batch 4.
Each pair is also checked for agreement before timing. The last line times a
whole training step (synthesis, warp, network, update) under each backend, since the
kernels are only part of a step.
"""
import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from mde_harden.autodiff import _kernels_py, backend


def cases(rng):
    img = rng.random((4, 3, 48, 128), dtype=np.float32)
    grid = np.stack([rng.uniform(-2, 130, (4, 48, 128)), rng.uniform(-2, 50, (4, 48, 128))], -1).astype(np.float32)
    gout = rng.random((4, 3, 48, 128), dtype=np.float32)
    feat = rng.random((4, 32, 24, 64), dtype=np.float32)
    cols = _kernels_py.im2col(feat, 3, 1)
    return {
        "grid_sample_forward": ((img, grid), {}),
        "grid_sample_backward": ((img, grid, gout), {}),
        "im2col 3x3": ((feat, 3, 1), {}),
        "col2im 3x3": ((cols, feat.shape, 3, 1), {}),
    }


STEP = """
import timeit
from mde_harden.assets import make_car_asset
from mde_harden.scenes import SyntheticSceneSpec, generate_scenes
from mde_harden.training import TrainConfig, make_state, train_step
scenes = generate_scenes(SyntheticSceneSpec(), 4, 0)
asset = make_car_asset()
state = make_state(TrainConfig(mode="from-scratch", perturbation="none", batch_size=4))
train_step(state, scenes, asset)
print(min(timeit.repeat(lambda: train_step(state, scenes, asset), number=1, repeat=REPEAT)) * 1e3)
"""


def step_ms(pure, repeat):
    env = {k: v for k, v in os.environ.items() if k != "MDE_HARDEN_PURE"}
    if pure:
        env["MDE_HARDEN_PURE"] = "1"
    out = subprocess.run([sys.executable, "-c", STEP.replace("REPEAT", str(repeat))], env=env,
                         capture_output=True, text=True, check=True)
    return float(out.stdout.strip())


def fn_name(label):
    return label.split()[0]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if backend._compiled is None:
        raise SystemExit("compiled extension not available; build with `pip install -e . --no-build-isolation`")
    rng = np.random.default_rng(0)
    print(f"{'kernel':24s} {'cython ms':>10s} {'numpy ms':>10s} {'speedup':>8s}")
    for label, (a, kw) in cases(rng).items():
        name = fn_name(label)
        fast, slow = getattr(backend._compiled, name), getattr(_kernels_py, name)
        ra, rb = fast(*a, **kw), slow(*a, **kw)
        for x, y in zip(ra if isinstance(ra, tuple) else (ra,), rb if isinstance(rb, tuple) else (rb,)):
            np.testing.assert_allclose(np.asarray(x), y, rtol=1e-4, atol=1e-4)
        tf = min(timeit.repeat(lambda: fast(*a, **kw), number=1, repeat=args.repeat)) * 1e3
        ts = min(timeit.repeat(lambda: slow(*a, **kw), number=1, repeat=args.repeat)) * 1e3
        print(f"{label:24s} {tf:10.2f} {ts:10.2f} {ts / tf:7.1f}x")
    tf, ts = step_ms(False, args.repeat), step_ms(True, args.repeat)
    print(f"{'train step':24s} {tf:10.2f} {ts:10.2f} {ts / tf:7.1f}x")


if __name__ == "__main__":
    main()
