"""Compiled vs numpy kernels: per-kernel timings and one end-to-end stage fit.

    python benchmarks/bench_kernels.py [--repeat 50] [--sizes 1000,100000,221445]

Every timed pair is also checked for bit-identical output.
"""
import argparse
import time

import numpy as np

from msgtl import _kernels_py, engine, kernels
from msgtl.engine import TrainConfig
from msgtl.funnelgen import generate, paper_like_config
from msgtl.pipeline import train_msgtl

try:
    from msgtl import _kernels as _compiled
except ImportError:
    _compiled = None

NAMES = ("blend", "gate", "relu_forward", "relu_backward", "masked_adam", "masked_sgd")


def _inputs(n, rng):
    live, snap, grad = (rng.standard_normal(n) for _ in range(3))
    mask = (rng.random(n) < 0.3).astype(np.uint8)
    scale = np.where(rng.random(n) < 0.5, 2.0, 0.0)
    m, v = rng.standard_normal(n) * 0.01, rng.random(n) * 0.01
    return dict(live=live, snap=snap, grad=grad, mask=mask, scale=scale, m=m, v=v)


def _call(mod, name, d):
    """Run one kernel on fresh copies; returns the arrays it wrote."""
    if name == "blend":
        return [mod.blend(d["live"], d["snap"], d["mask"], np.empty_like(d["live"]))]
    if name == "gate":
        return [mod.gate(d["grad"].copy(), d["mask"])]
    if name == "relu_forward":
        return [mod.relu_forward(d["live"], d["scale"], np.empty_like(d["live"]))]
    if name == "relu_backward":
        return [mod.relu_backward(d["grad"], d["live"], d["scale"], np.empty_like(d["live"]))]
    if name == "masked_adam":
        p, m, v = d["live"].copy(), d["m"].copy(), d["v"].copy()
        mod.masked_adam(p, d["grad"], m, v, d["mask"], 1e-3, 0.9, 0.999, 1e-8, 0.1, 0.001)
        return [p, m, v]
    p = d["live"].copy()
    return [mod.masked_sgd(p, d["grad"], d["mask"], 1e-2)]


def _best_of(fn, repeat):
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench_kernels(sizes, repeat):
    rng = np.random.default_rng(0)
    print(f"{'kernel':<15} {'n':>8} {'numpy us':>10} {'cython us':>10} {'speedup':>8}  identical")
    for n in sizes:
        d = _inputs(n, rng)
        for name in NAMES:
            t_py = _best_of(lambda: _call(_kernels_py, name, d), repeat)
            if _compiled is None:
                print(f"{name:<15} {n:>8} {t_py * 1e6:>10.1f} {'-':>10} {'-':>8}  -")
                continue
            t_c = _best_of(lambda: _call(_compiled, name, d), repeat)
            same = all(np.array_equal(a, b) for a, b in
                       zip(_call(_kernels_py, name, d), _call(_compiled, name, d)))
            print(f"{name:<15} {n:>8} {t_py * 1e6:>10.1f} {t_c * 1e6:>10.1f} "
                  f"{t_py / t_c:>7.2f}x  {same}")


def _use(mod):
    for name in NAMES:
        setattr(kernels, name, getattr(mod, name))


def bench_pipeline(m0, stages, epochs):
    """Fit the first stages of the paper-like funnel with each backend."""
    ds = generate(paper_like_config(seed=0, m0=m0))
    ds.stages = ds.stages[:stages]
    cfg = TrainConfig(epochs=epochs, seed=0)
    results = {}
    backends = [("numpy", _kernels_py)] + ([("cython", _compiled)] if _compiled else [])
    for label, mod in backends:
        _use(mod)
        t0 = time.perf_counter()
        reg = train_msgtl(ds, cfg)
        results[label] = (time.perf_counter() - t0, reg)
    _use(_compiled or _kernels_py)
    print(f"\nend to end: {stages} stages, m0={m0}, {epochs} max epochs "
          f"(engine module {engine.__name__})")
    for label, (t, _) in results.items():
        print(f"  {label:<7} {t:8.2f} s")
    if len(results) == 2:
        a, b = results["numpy"][1], results["cython"][1]
        same = all(np.array_equal(la.W, lb.W) and np.array_equal(la.b, lb.b)
                   for q in a.stages() for la, lb in zip(a.networks[q].layers,
                                                         b.networks[q].layers))
        print(f"  speedup {results['numpy'][0] / results['cython'][0]:.2f}x, "
              f"registries identical: {same}")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=50)
    ap.add_argument("--sizes", default="1000,100000,221445",
                    help="array lengths; 221445 is the widest paper-like weight matrix")
    ap.add_argument("--m0", type=int, default=3000)
    ap.add_argument("--stages", type=int, default=7)
    ap.add_argument("--epochs", type=int, default=10)
    ap.add_argument("--skip-pipeline", action="store_true")
    args = ap.parse_args()
    print(f"active backend: {kernels.BACKEND}")
    bench_kernels([int(s) for s in args.sizes.split(",")], args.repeat)
    if not args.skip_pipeline:
        bench_pipeline(args.m0, args.stages, args.epochs)


if __name__ == "__main__":
    main()
