"""Throughput comparison of the compiled rendering kernels against the
pure-numpy fallback.

Micro benchmarks time each kernel on the refiner's production shapes
(64x64 canvas, 128 splats, 15x15 blob). ``--end-to-end`` additionally
times one full refinement job per backend in subprocesses, since backend
selection happens at import.

Usage: python3 benchmarks/bench_kernels.py [--repeat N] [--end-to-end]
"""

from __future__ import annotations

import argparse
import os
import subprocess
import sys
import time

import numpy as np

from slenderfit._kernels import _fallback

try:
    from slenderfit._kernels import _core
except ImportError:
    _core = None

RES = 64
SAMPLES = 128
GRID = 15


def _workload(rng: np.random.Generator):
    blob = np.exp(-3.0 * rng.uniform(0.0, 1.0, (GRID, GRID)))
    xs = rng.uniform(5.0, RES - 5.0, SAMPLES)
    ys = rng.uniform(5.0, RES - 5.0, SAMPLES)
    scales = rng.uniform(0.8, 2.5, SAMPLES)
    img = rng.uniform(0.0, 1.0, (RES, RES))
    kernel = rng.uniform(0.0, 1.0, (3, 3))
    kernel /= kernel.sum()
    dout = rng.standard_normal((RES, RES))
    return blob, xs, ys, scales, img, kernel, dout


def _time(fn, repeat: int) -> float:
    """Best-of-3 mean seconds per call over ``repeat`` calls."""
    best = np.inf
    for _ in range(3):
        t0 = time.perf_counter()
        for _ in range(repeat):
            fn()
        best = min(best, (time.perf_counter() - t0) / repeat)
    return best


def bench_micro(repeat: int) -> None:
    rng = np.random.default_rng(0)
    blob, xs, ys, scales, img, kernel, dout = _workload(rng)
    canvas = np.zeros((RES, RES))

    cases = {
        "splat_fwd": lambda mod: mod.splat_fwd(blob, xs, ys, scales, canvas),
        "splat_bwd": lambda mod: mod.splat_bwd(blob, xs, ys, scales, dout),
        "conv3x3_fwd": lambda mod: mod.conv3x3_fwd(img, kernel),
        "conv3x3_bwd": lambda mod: mod.conv3x3_bwd(img, kernel, dout),
    }
    backends = [("numpy", _fallback)]
    if _core is not None:
        backends.append(("compiled", _core))

    print(f"canvas {RES}x{RES}, {SAMPLES} splats, blob {GRID}x{GRID}, "
          f"{repeat} calls per timing")
    header = f"{'kernel':<14}" + "".join(f"{name:>14}" for name, _ in backends)
    if _core is not None:
        header += f"{'speedup':>10}"
    print(header)
    for label, call in cases.items():
        times = []
        for _, mod in backends:
            canvas.fill(0.0)
            times.append(_time(lambda m=mod: call(m), repeat))
        row = f"{label:<14}" + "".join(f"{t * 1e6:>12.1f}us" for t in times)
        if len(times) == 2:
            row += f"{times[0] / times[1]:>9.1f}x"
        print(row)
    if _core is None:
        print("compiled extension not importable; numpy fallback only")


_E2E_SNIPPET = r"""
import time
import numpy as np
from slenderfit._kernels import get_backend
from slenderfit.geometry import KnotChain, resample_polyline
from slenderfit.optimizer import RefineSettings, refine
from slenderfit.synth import GenConfig, gen_labeled_frame, perturb

frame = gen_labeled_frame(GenConfig(n_bodies=1), 3, 0)
label = frame.labels[0]
init = perturb(label, "rotation", 20.0)
chain = KnotChain.from_points(resample_polyline(init, 8))
t0 = time.perf_counter()
refine(frame.image, [chain], RefineSettings(seeds=2))
print(f"{get_backend()}: {time.perf_counter() - t0:.2f}s per frame")
"""


def bench_end_to_end() -> None:
    print("\none refinement job per backend (64x64, 1 body, 2 seeds):")
    for backend in ("compiled", "numpy"):
        if backend == "compiled" and _core is None:
            print("compiled: extension not importable, skipped")
            continue
        env = dict(os.environ, SLENDERFIT_BACKEND=backend)
        out = subprocess.run([sys.executable, "-c", _E2E_SNIPPET], env=env,
                             capture_output=True, text=True)
        print(out.stdout.strip() or out.stderr.strip())


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=200,
                        help="calls per micro timing (default 200)")
    parser.add_argument("--end-to-end", action="store_true",
                        help="also time a full refinement per backend")
    args = parser.parse_args()
    bench_micro(args.repeat)
    if args.end_to_end:
        bench_end_to_end()


if __name__ == "__main__":
    main()
