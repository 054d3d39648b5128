import os
import subprocess
import sys

import numpy as np
import pytest

from tabml import kernels

needs_numba = pytest.mark.skipif(not kernels.HAVE_NUMBA, reason="numba not installed")


@pytest.fixture
def backend():
    before = kernels.get_backend()
    yield kernels.set_backend
    kernels.set_backend(before)


def case(B, T, H, seed=0, min_len=1):
    rng = np.random.default_rng(seed)
    return (
        rng.normal(size=(B, T, 4 * H)),
        rng.integers(min_len, T + 1, size=B),
        rng.normal(scale=0.5, size=(H, 4 * H)),
        rng.normal(size=(B, H)),
    )


def run(xproj, lengths, w_h, dh, reverse):
    h, cache = kernels.lstm_forward(xproj, lengths, w_h, reverse)
    dx, dw = kernels.lstm_backward(dh, lengths, w_h, cache, reverse)
    return h, dx, dw


@needs_numba
@pytest.mark.parametrize("reverse", [False, True])
@pytest.mark.parametrize("shape", [(1, 1, 1), (7, 5, 3), (40, 6, 16), (5, 30, 8)])
def test_backends_agree(backend, shape, reverse):
    xproj, lengths, w_h, dh = case(*shape)
    backend("numpy")
    ref = run(xproj, lengths, w_h, dh, reverse)
    backend("numba")
    got = run(xproj, lengths, w_h, dh, reverse)
    for a, b in zip(ref, got):
        np.testing.assert_allclose(b, a, rtol=1e-12, atol=1e-13)


@pytest.mark.parametrize("name", ["numpy", pytest.param("numba", marks=needs_numba)])
def test_reverse_equals_running_the_flipped_sequence(backend, name):
    backend(name)
    xproj, lengths, w_h, dh = case(6, 5, 4, seed=1)
    flipped = np.zeros_like(xproj)
    for r, n in enumerate(lengths):
        flipped[r, :n] = xproj[r, :n][::-1]
    h_rev, dx_rev, dw_rev = run(xproj, lengths, w_h, dh, True)
    h_fl, dx_fl, dw_fl = run(flipped, lengths, w_h, dh, False)
    np.testing.assert_allclose(h_rev, h_fl, atol=1e-14)
    np.testing.assert_allclose(dw_rev, dw_fl, atol=1e-12)
    for r, n in enumerate(lengths):
        np.testing.assert_allclose(dx_rev[r, :n], dx_fl[r, :n][::-1], atol=1e-13)


@pytest.mark.parametrize("name", ["numpy", pytest.param("numba", marks=needs_numba)])
def test_padding_is_ignored(backend, name):
    backend(name)
    xproj, lengths, w_h, dh = case(4, 6, 3, seed=2)
    lengths = np.array([6, 3, 1, 4])
    noisy = xproj.copy()
    for r, n in enumerate(lengths):
        noisy[r, n:] = 1e3
    a = run(xproj, lengths, w_h, dh, False)
    b = run(noisy, lengths, w_h, dh, False)
    np.testing.assert_array_equal(a[0], b[0])
    for r, n in enumerate(lengths):
        assert not a[1][r, n:].any()


@pytest.mark.parametrize("name", ["numpy", pytest.param("numba", marks=needs_numba)])
def test_zero_length_rows_keep_zero_state(backend, name):
    backend(name)
    xproj, _, w_h, dh = case(3, 4, 2)
    lengths = np.array([0, 4, 0])
    h, dx, _ = run(xproj, lengths, w_h, dh, False)
    assert not h[[0, 2]].any() and not dx[[0, 2]].any()


def test_extreme_preactivations_stay_finite(backend):
    for name in ["numpy"] + (["numba"] if kernels.HAVE_NUMBA else []):
        backend(name)
        xproj, lengths, w_h, dh = case(5, 4, 3)
        h, dx, dw = run(xproj * 1e4, lengths, w_h, dh, False)
        assert np.isfinite(h).all() and np.isfinite(dx).all() and np.isfinite(dw).all()
        assert np.abs(h).max() <= 1.0


def test_unknown_backend_rejected():
    with pytest.raises(ValueError):
        kernels.set_backend("cuda")


def test_env_flag_selects_numpy():
    code = "from tabml import kernels; print(kernels.get_backend())"
    env = {**os.environ, "TABML_NUMBA": "0"}
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "numpy"
    if kernels.HAVE_NUMBA:
        env["TABML_NUMBA"] = "1"
        out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
        assert out.stdout.strip() == "numba"
