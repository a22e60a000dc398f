"""Compare the compiled and numpy kernels on desk-scale shapes.

    python3 benchmarks/bench_kernels.py [--repeat 20]

Also times one training epoch of the primary/deep extractors end to end
under each backend (each in a fresh interpreter, since the backend is
chosen at import).
"""

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from fedifl.nn import _pykernels

try:
    from fedifl.nn import _ckernels
except ImportError:
    _ckernels = None

# (batch, in channels, length, out channels, kernel): the three primary convs and the deep conv
CONV_SHAPES = [(32, 1, 256, 4, 5), (32, 4, 128, 8, 3), (32, 8, 64, 16, 3), (32, 16, 32, 16, 3)]

EPOCH_SNIPPET = """
import time, warnings
import numpy as np
warnings.simplefilter("ignore")
from fedifl.datagen import synth_fleet
from fedifl.federation import Client, model_seed, run_ipcl
from fedifl.models import ArchitectureConfig, build_bundle
from fedifl.nn import BACKEND
arch = ArchitectureConfig.desk()
ds = synth_fleet(None, None, 40, 256, 0, clients=[1])[1]
b = build_bundle(arch, ds.label_space, range(5), model_seed(0))
c = Client(1, ds, b, 0)
t = time.perf_counter()
run_ipcl(c, ds, 3, 0.05)
print(BACKEND, (time.perf_counter() - t) / 3)
"""


def time_kernels(mod, repeat):
    rng = np.random.default_rng(0)
    rows = []
    for B, cin, L, cout, k in CONV_SHAPES:
        x = rng.standard_normal((B, cin, L)).astype(np.float32)
        w = rng.standard_normal((cout, cin, k)).astype(np.float32)
        b = np.zeros(cout, np.float32)
        pad = (k - 1) // 2
        out = mod.conv1d_forward(x, w, b, 1, pad)
        dout = np.ascontiguousarray(rng.standard_normal(out.shape).astype(np.float32))
        fwd = timeit.timeit(lambda: mod.conv1d_forward(x, w, b, 1, pad), number=repeat) / repeat
        bwd = timeit.timeit(lambda: mod.conv1d_backward(dout, x, w, 1, pad), number=repeat) / repeat
        rows.append((f"conv1d {B}x{cin}x{L} -> {cout} k{k}", fwd, bwd))
    x = rng.standard_normal((32, 16, 256)).astype(np.float32)
    out, idx = mod.maxpool1d_forward(x, 2, 2)
    dout = np.ascontiguousarray(np.ones_like(out))
    fwd = timeit.timeit(lambda: mod.maxpool1d_forward(x, 2, 2), number=repeat) / repeat
    bwd = timeit.timeit(lambda: mod.maxpool1d_backward(dout, idx, 256), number=repeat) / repeat
    rows.append(("maxpool1d 32x16x256", fwd, bwd))
    return rows


def epoch_time(backend):
    env = dict(os.environ, FEDIFL_KERNELS=backend)
    out = subprocess.run([sys.executable, "-c", EPOCH_SNIPPET], env=env, capture_output=True, text=True, check=True)
    name, seconds = out.stdout.split()
    return name, float(seconds)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    py = time_kernels(_pykernels, args.repeat)
    cy = time_kernels(_ckernels, args.repeat) if _ckernels else None
    print(f"{'kernel':<34}{'numpy fwd':>11}{'numpy bwd':>11}{'cython fwd':>12}{'cython bwd':>12}{'speedup':>9}")
    for i, (name, f, b) in enumerate(py):
        if cy:
            cf, cb = cy[i][1:]
            print(f"{name:<34}{f * 1e3:>9.2f}ms{b * 1e3:>9.2f}ms{cf * 1e3:>10.2f}ms{cb * 1e3:>10.2f}ms"
                  f"{(f + b) / (cf + cb):>8.2f}x")
        else:
            print(f"{name:<34}{f * 1e3:>9.2f}ms{b * 1e3:>9.2f}ms{'n/a':>12}{'n/a':>12}")
    for backend in ("python", "cython") if cy else ("python",):
        name, sec = epoch_time(backend)
        print(f"one prototype-learning epoch, client 1, desk preset, {name} backend: {sec:.3f}s")


if __name__ == "__main__":
    main()
