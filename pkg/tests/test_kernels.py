"""Compiled rollout kernel vs the pure-numpy fallback."""
import numpy as np
import pytest

from netren._accel import HAVE_COMPILED, python_ref
from netren.ren import RenDims, build_ren

needs_compiled = pytest.mark.skipif(not HAVE_COMPILED,
                                    reason="compiled kernel not built")


def _call_args(seed=0, T=60, act="tanh"):
    rng = np.random.default_rng(seed)
    dims = RenDims(c=7, s=9, q=4, r=3)
    mat = build_ren(rng.standard_normal(dims.n_theta), 1.2, dims)
    inputs = rng.standard_normal((T, dims.q))
    return (mat.A1, mat.B1, mat.B2, mat.C1, mat.D11, mat.D12,
            mat.C2, mat.D21, mat.D22, inputs, act)


@needs_compiled
@pytest.mark.parametrize("act", ["tanh", "relu"])
def test_rollout_kernels_agree(act):
    from netren._accel import _kernels
    args = _call_args(act=act)
    z_py, xi_py = python_ref.ren_rollout_kernel(*args)
    z_cy, xi_cy = _kernels.ren_rollout_kernel(*args)
    assert np.max(np.abs(z_py - z_cy)) <= 1e-13
    assert np.max(np.abs(xi_py - xi_cy)) <= 1e-13


@needs_compiled
@pytest.mark.parametrize("act", ["tanh", "relu"])
def test_step_kernels_agree(act):
    from netren._accel import _kernels
    rng = np.random.default_rng(1)
    dims = RenDims(c=5, s=4, q=3, r=2)
    mat = build_ren(rng.standard_normal(dims.n_theta), 0.7, dims)
    xi = rng.standard_normal(dims.c)
    v = rng.standard_normal(dims.q)
    args = (mat.A1, mat.B1, mat.B2, mat.C1, mat.D11, mat.D12,
            mat.C2, mat.D21, mat.D22, xi, v, act)
    xi_py, z_py = python_ref.ren_step_kernel(*args)
    xi_cy, z_cy = _kernels.ren_step_kernel(*args)
    assert np.max(np.abs(xi_py - xi_cy)) <= 1e-14
    assert np.max(np.abs(z_py - z_cy)) <= 1e-14


def test_fallback_import_path():
    # the fallback module must always be importable and self-consistent
    args = _call_args(seed=2, T=5)
    z, xi = python_ref.ren_rollout_kernel(*args)
    assert z.shape == (5, 3) and xi.shape == (5, 7)
