"""Compare the compiled and numpy kernel backends.

Times each kernel on tables shaped like the acceptance instance (8 x 16) and a
larger one (8 x 1024), then times a short exact-mode training run under each
backend in a fresh interpreter.

    python benchmarks/bench_kernels.py [--repeat 2000] [--steps 5000]
"""

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from gvpolab import kernels

TRAIN_SNIPPET = """
import time
from gvpolab import default_instance, init_uniform, train, TrainConfig, BACKEND
task = default_instance(0)
cfg = TrainConfig(beta=1.0, steps={steps}, sampler={{"kind": "reference"}}, log_every={steps})
t = time.perf_counter()
train(task, init_uniform(task), cfg)
print(BACKEND, (time.perf_counter() - t) / {steps} * 1e6)
"""


def kernel_cases(p, n, k, rng):
    z = rng.normal(size=(p, n))
    ref = kernels.log_softmax(rng.normal(size=(p, n)))
    ps = np.exp(kernels.log_softmax(rng.normal(size=(p, n))))
    r = rng.random((p, n))
    a = rng.normal(size=(p, k))
    u = rng.random((p, k))
    ids = rng.integers(0, n, size=(p, k))
    return {
        "log_softmax": lambda m: m.log_softmax(z),
        "exact_gvpo_flat": lambda m: m.exact_gvpo_flat(z, ref, ps, r, 1.0),
        "policy_metrics": lambda m: m.policy_metrics(ref, ref, ref, r),
        "centered_weights": lambda m: m.centered_weights(a, 0.1),
        "sample_inverse_cdf": lambda m: m.sample_inverse_cdf(ps, u),
        "scatter_coefficients": lambda m: m.scatter_coefficients(ids, a, n),
    }


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=2000)
    ap.add_argument("--steps", type=int, default=5000)
    args = ap.parse_args()

    backends = kernels.backends()
    if "cython" not in backends:
        print("compiled backend not built; only the numpy fallback is available")
    rng = np.random.default_rng(0)
    names = list(backends)
    print(f"{'kernel':<22}{'shape':>10}" + "".join(f"{b + ' us':>14}" for b in names) + f"{'speedup':>10}")
    for p, n in ((8, 16), (8, 1024)):
        for name, fn in kernel_cases(p, n, 8, rng).items():
            times = [min(timeit.repeat(lambda: fn(backends[b]), number=args.repeat, repeat=3)) / args.repeat * 1e6
                     for b in names]
            speed = f"{times[0] / times[-1]:.1f}x" if len(times) > 1 else "-"
            print(f"{name:<22}{f'{p}x{n}':>10}" + "".join(f"{t:>14.2f}" for t in times) + f"{speed:>10}")

    print("\nexact GVPO training step, default instance (us/step)")
    for pure in ("1", "0"):
        env = dict(os.environ, GVPOLAB_PURE_PYTHON=pure)
        out = subprocess.run([sys.executable, "-c", TRAIN_SNIPPET.format(steps=args.steps)],
                             env=env, capture_output=True, text=True, check=True)
        backend, us = out.stdout.split()
        print(f"  {backend:<8}{float(us):8.1f}")


if __name__ == "__main__":
    main()
