"""Compare the compiled kernels against the numpy fallback on typical batch sizes.

Usage: python benchmarks/bench_kernels.py [--repeats N]
"""

import argparse
import timeit

import numpy as np

from gaitprior import _pykernels, kernels
from gaitprior.environment import EnvConfig


def plant_args(cfg):
    lim = cfg.limits()
    return (cfg.dt, cfg.kp, cfg.kd, cfg.damping, cfg.inertia(), lim.q_lim, lim.dq_lim, lim.tau_lim,
            cfg.coupling_matrix(), cfg.drag(), cfg.roll_relax, cfg.roll_coupling, cfg.knee_thresh,
            cfg.knee_width, cfg.reflex_gain, cfg.reflex_scale, cfg.sigma_v, cfg.sigma_w)


def cases(rng):
    cfg = EnvConfig()
    args = plant_args(cfg)
    out = {}
    for n in (1, 32, 1024):
        s, a, c = rng.normal(size=(n, 20)) * 0.3, rng.normal(size=(n, 8)) * 0.3, rng.normal(size=(n, 3))
        out[f"plant_step n={n}"] = lambda impl, s=s, a=a, c=c: impl.plant_step(s, a, c, *args)
    r, v = rng.normal(size=(32, 32)), rng.normal(size=(32, 32))
    d, last = rng.random((32, 32)) < 0.05, rng.normal(size=32)
    out["gae 32x32"] = lambda impl: impl.gae(r, v, d, last, 0.99, 0.95)
    x = rng.normal(size=(500, 3))
    out["moving_average T=500 w=25"] = lambda impl: impl.centered_moving_average(x, 25)
    return out


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeats", type=int, default=5)
    args = parser.parse_args()
    if kernels.BACKEND != "cython":
        print("compiled kernels are not built; only the numpy fallback is available")
    rng = np.random.default_rng(0)
    print(f"{'kernel':<28}{'python us':>12}{'cython us':>12}{'speedup':>10}")
    for name, fn in cases(rng).items():
        number = 200

        def best(impl):
            return min(timeit.repeat(lambda: fn(impl), number=number, repeat=args.repeats)) / number * 1e6

        py = best(_pykernels)
        if kernels.BACKEND == "cython":
            cy = best(kernels._impl)
            print(f"{name:<28}{py:>12.1f}{cy:>12.1f}{py / cy:>9.1f}x")
        else:
            print(f"{name:<28}{py:>12.1f}{'-':>12}{'-':>10}")


if __name__ == "__main__":
    main()
