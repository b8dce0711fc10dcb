import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from resrecon.baselines import (SamplerConfig, cg_data_consistency, ddim_timesteps, is_unconditional,
                                reconstruct_dds3d, reconstruct_l1wavelet, soft_threshold_complex)
from resrecon.operators import MulticoilKSpace, forward, mvue, scale_measurements
from resrecon.sampling import full_mask, gen_poisson_mask
from resrecon.volume import ComplexVolume, CoilSensitivities, generate_phantom, synth_coil_maps
from resrecon.wavelet import analysis_matrix, padded_shape, wavedec3, waverec3


def test_soft_threshold_examples():
    assert soft_threshold_complex(np.array([0.3 + 0.3j]), 0.5)[0] == 0
    assert soft_threshold_complex(np.array([2.0 + 0j]), 0.5)[0] == 1.5
    assert np.isclose(soft_threshold_complex(np.array([3 + 4j]), 1.0)[0], 2.4 + 3.2j)
    with pytest.raises(ValueError):
        soft_threshold_complex(np.ones(2), -1)


@settings(max_examples=30, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3), st.floats(0, 2))
def test_soft_threshold_is_prox(re, im, tau):
    c = re + 1j * im
    z = soft_threshold_complex(np.array([c]), tau)[0]
    g = np.linspace(-3.5, 3.5, 701)
    Z = g[:, None] + 1j * g[None, :]
    obj = 0.5 * np.abs(Z - c) ** 2 + tau * np.abs(Z)
    best = Z.flat[np.argmin(obj)]
    h = g[1] - g[0]
    assert abs(best - z) <= 1.5 * h
    f = lambda v: 0.5 * abs(v - c) ** 2 + tau * abs(v)  # noqa: E731
    assert f(z) <= obj.min() + 1e-12


@pytest.mark.parametrize("n", [8, 16, 24])
def test_wavelet_orthonormal(n):
    M = analysis_matrix(n)
    assert np.allclose(M @ M.T, np.eye(n), atol=1e-12)
    rng = np.random.default_rng(n)
    x = rng.normal(size=(n, n, n)) + 1j * rng.normal(size=(n, n, n))
    c = wavedec3(x)
    assert abs(np.linalg.norm(c) - np.linalg.norm(x)) <= 1e-6 * np.linalg.norm(x)
    assert np.allclose(waverec3(c), x, atol=1e-10)


def test_wavelet_vanishing_moments():
    n = 32
    t = np.arange(n, dtype=float)
    for p in range(4):
        # detail rows of the finest level annihilate polynomials of degree < 4 away from the wrap
        d = analysis_matrix(n)[n // 2:] @ (t ** p)
        assert np.allclose(d[:-4], 0, atol=1e-6 * n ** p)
    assert padded_shape((20, 16, 9)) == (24, 16, 16)


@pytest.fixture(scope="module")
def prob():
    vol = generate_phantom(3, (16, 16, 16))
    maps = synth_coil_maps((16, 16, 16), 4, 3)
    return vol, maps


def test_l1_mu0_full_mask_is_mvue(prob):
    vol, maps = prob
    ksp, _ = scale_measurements(forward(vol, maps, full_mask((16, 16))), maps)
    out = reconstruct_l1wavelet(ksp, maps, mu=0.0, iters=50)
    ref = mvue(ksp, maps).data / ksp.scale
    assert np.linalg.norm(out.data - ref) <= 1e-3 * np.linalg.norm(ref)


def test_l1_monotone_and_huge_mu(prob):
    vol, maps = prob
    dims = (12, 16, 16)  # exercises the padding path
    v = ComplexVolume(vol.data[:12])
    m = CoilSensitivities(maps.maps[:, :12])
    ksp, _ = scale_measurements(forward(v, m, gen_poisson_mask((16, 16), 4, seed=0)), m)
    log = {}
    out = reconstruct_l1wavelet(ksp, m, mu=0.01, iters=60, tol=0, run_log=log)
    assert out.dims == dims
    tr = np.asarray(log["objective_trace"])
    assert np.all(np.diff(tr) <= 1e-9 * tr[0])
    assert not np.any(reconstruct_l1wavelet(ksp, m, mu=1e6, iters=5).data)


def test_cg_examples(prob):
    vol, maps = prob
    ksp, _ = scale_measurements(forward(vol, maps, full_mask((16, 16))), maps)
    x0 = ComplexVolume(np.random.default_rng(0).normal(size=vol.dims).astype(np.complex64))
    out = cg_data_consistency(x0, ksp, maps, 1e6, 5)
    assert np.linalg.norm(out.data - x0.data) <= 1e-3 * np.linalg.norm(x0.data)
    out = cg_data_consistency(x0, ksp, maps, 1e-6, 20)
    ref = mvue(ksp, maps).data
    assert np.linalg.norm(out.data - ref) <= 1e-3 * np.linalg.norm(ref)
    under, _ = scale_measurements(forward(vol, maps, gen_poisson_mask((16, 16), 4, seed=1)), maps)
    info = {}
    cg_data_consistency(x0, under, maps, 0.1, 15, info)
    tr = np.asarray(info["objective_trace"])
    assert np.all(np.diff(tr) <= 1e-12 * tr[0])
    with pytest.raises(ValueError):
        cg_data_consistency(x0, ksp, maps, 0.0, 5)


def test_ddim_schedule_and_uncond():
    s = ddim_timesteps(1000, 100)
    assert s[0] == 999 and s[-1] == 0 and np.all(np.diff(s) < 0)
    assert [is_unconditional(i, 3) for i in range(6)] == [False, False, True, False, False, True]
    with pytest.raises(ValueError):
        ddim_timesteps(10, 11)
    with pytest.raises(ValueError):
        SamplerConfig(eta=1.5)


def _stub_eps(x, t):
    return 0.1 * np.tanh(x)


@pytest.fixture(scope="module")
def dds_prob(prob):
    vol, maps = prob
    ksp, _ = scale_measurements(forward(vol, maps, gen_poisson_mask((16, 16), 2, seed=0), 0.01, seed=0), maps)
    return ksp, maps


def test_dds_deterministic_and_axis_visits(tiny_ckpt, dds_prob):
    ksp, maps = dds_prob
    cfg = SamplerConfig(n_steps=9, cg_iters=2, seed=4)
    log = {}
    a = reconstruct_dds3d(ksp, maps, None, tiny_ckpt, cfg, run_log=log, eps_fn=_stub_eps)
    b = reconstruct_dds3d(ksp, maps, None, tiny_ckpt, cfg, eps_fn=_stub_eps)
    assert np.array_equal(a.data, b.data)
    assert set(log["axis_visits"].values()) == {3}
    assert len(log["cg_residuals"]) == 6


def test_dds_uncond_every_one_ignores_data(tiny_ckpt, dds_prob):
    ksp, maps = dds_prob
    other = MulticoilKSpace(np.flip(ksp.coils, 1).copy(), ksp.mask, ksp.noise_sigma, ksp.scale, ksp.voxel_size)
    cfg = SamplerConfig(n_steps=6, uncond_every=1, seed=1)
    a = reconstruct_dds3d(ksp, maps, None, tiny_ckpt, cfg, eps_fn=_stub_eps)
    b = reconstruct_dds3d(other, maps, None, tiny_ckpt, cfg, eps_fn=_stub_eps)
    assert np.array_equal(a.data, b.data)


def test_dds_with_real_checkpoint_runs(tiny_ckpt, dds_prob):
    ksp, maps = dds_prob
    out = reconstruct_dds3d(ksp, maps, None, tiny_ckpt, SamplerConfig(n_steps=3, cg_iters=1))
    assert out.dims == ksp.dims and np.all(np.isfinite(out.data))
