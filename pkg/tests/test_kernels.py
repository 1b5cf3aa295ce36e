import numpy as np
import pytest
from hypothesis import given, strategies as st

from msgtl import _kernels_py as py
from msgtl import kernels

compiled = pytest.importorskip("msgtl._kernels")


def _arrays(seed, shape):
    rng = np.random.default_rng(seed)
    return (rng.standard_normal(shape), rng.standard_normal(shape),
            (rng.random(shape) < 0.4).astype(np.uint8))


shapes = st.sampled_from([(1,), (7,), (3, 5), (40, 17), (1, 1)])


@given(st.integers(0, 10 ** 6), shapes)
def test_blend_gate_relu_match(seed, shape):
    a, b, m = _arrays(seed, shape)
    assert np.array_equal(compiled.blend(a, b, m, np.empty_like(a)), py.blend(a, b, m, np.empty_like(a)))
    g1, g2 = a.copy(), a.copy()
    compiled.gate(g1, m)
    py.gate(g2, m)
    assert np.array_equal(g1, g2)
    scale = (m / 0.5).astype(float)
    for sc in (None, scale):
        assert np.array_equal(compiled.relu_forward(a, sc, np.empty_like(a)),
                              py.relu_forward(a, sc, np.empty_like(a)))
        assert np.array_equal(compiled.relu_backward(b, a, sc, np.empty_like(a)),
                              py.relu_backward(b, a, sc, np.empty_like(a)))


@given(st.integers(0, 10 ** 6), shapes, st.integers(1, 20))
def test_optimizers_match_bitwise(seed, shape, steps):
    a, _, m = _arrays(seed, shape)
    rng = np.random.default_rng(seed + 1)
    states = [[a.copy(), np.zeros(shape), np.zeros(shape)] for _ in range(2)]
    sgd = [a.copy(), a.copy()]
    for t in range(1, steps + 1):
        g = rng.standard_normal(shape)
        bc1, bc2 = 1 - 0.9 ** t, 1 - 0.999 ** t
        for impl, (p, mm, vv) in zip((compiled, py), states):
            impl.masked_adam(p, g, mm, vv, m, 1e-3, 0.9, 0.999, 1e-8, bc1, bc2)
        compiled.masked_sgd(sgd[0], g, m, 0.01)
        py.masked_sgd(sgd[1], g, m, 0.01)
    for x, y in zip(*states):
        assert np.array_equal(x, y)
    assert np.array_equal(*sgd)
    # masked entries never move
    off = m == 0
    assert np.array_equal(states[0][0][off], a[off])


def test_backend_selected():
    assert kernels.BACKEND in ("cython", "python")


_TRAIN_SCRIPT = """
import hashlib
from msgtl import kernels, registry_io
from msgtl.engine import TrainConfig
from msgtl.funnelgen import generate, minimal_config
from msgtl.pipeline import train_msgtl
reg = train_msgtl(generate(minimal_config(n_stages=3, m0=300, seed=2)),
                  TrainConfig(epochs=4, patience=2, seed=1))
print(kernels.BACKEND, hashlib.sha256(registry_io.dumps(reg)).hexdigest())
"""


def _train_in_subprocess(pure):
    import os
    import subprocess
    import sys
    env = dict(os.environ)
    env.pop("MSGTL_PURE_PYTHON", None)
    if pure:
        env["MSGTL_PURE_PYTHON"] = "1"
    out = subprocess.run([sys.executable, "-c", _TRAIN_SCRIPT], env=env, check=True,
                         capture_output=True, text=True)
    return out.stdout.split()


def test_pure_python_fallback_gives_identical_registry():
    backend_py, digest_py = _train_in_subprocess(pure=True)
    backend_c, digest_c = _train_in_subprocess(pure=False)
    assert backend_py == "python" and backend_c == "cython"
    assert digest_py == digest_c
