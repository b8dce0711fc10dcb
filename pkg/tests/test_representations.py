import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from scipy.stats import spearmanr

from resrecon.operators import DegenerateInputError
from resrecon.representations import (INN, GaussianCloud, GridRepr, eval_inn, init_gaussians_from_volume,
                                      make_backend, make_mesh2_for_view, rasterize_gaussians, rasterize_tensors,
                                      resample_grid)
from resrecon.volume import ComplexVolume, generate_phantom, make_mesh3


def _iso(mu, log_s, amp=(1.0, 0.0)):
    return GaussianCloud(np.atleast_2d(mu), np.full((1, 3), log_s), [[1, 0, 0, 0]], [amp])


def test_mesh2_examples():
    fov = (256.0, 256.0, 256.0)
    assert make_mesh2_for_view(fov, 1.0, "axial", 0.0).shape == (256, 256)
    assert make_mesh2_for_view(fov, 2.0, "axial", 0.0).shape == (128, 128)
    with pytest.raises(ValueError):
        make_mesh2_for_view(fov, 0.0, "axial", 0.0)


@pytest.mark.parametrize("plane,axis", [("sagittal", 0), ("coronal", 1), ("axial", 2)])
def test_mesh2_matches_mesh3(plane, axis):
    dims = (8, 10, 12)
    m3 = make_mesh3(dims)
    i = 3
    pos = m3.coords[(slice(None),) * axis + (i,)][..., axis].flat[0]
    m2 = make_mesh2_for_view(dims, 1.0, plane, pos)
    assert np.allclose(m2.coords, np.take(m3.coords, i, axis=axis), atol=1e-9)


def test_resample_identity_and_affine():
    rng = np.random.default_rng(0)
    g = rng.normal(size=(6, 7, 8)) + 1j * rng.normal(size=(6, 7, 8))
    mesh = make_mesh3(g.shape)
    assert np.allclose(resample_grid(GridRepr(g), mesh), g, atol=1e-9)
    coeff = rng.normal(size=4) + 1j * rng.normal(size=4)
    aff = lambda p: coeff[0] + p @ coeff[1:]  # noqa: E731
    grid = aff(mesh.coords)
    # stay inside the outermost cell centres where trilinear is exact
    pts = rng.uniform(-1, 1, size=(500, 3)) * (1 - 1 / np.array([6, 7, 8]))
    assert np.allclose(resample_grid(GridRepr(grid), pts), aff(pts), atol=1e-6)


def test_resample_adjoint():
    rng = np.random.default_rng(1)
    grid = torch.tensor(rng.normal(size=(2, 5, 6, 7)), requires_grad=True)
    from resrecon.representations import grid_sample_points
    pts = torch.tensor(rng.uniform(-1, 1, size=(300, 3)))
    w = torch.tensor(rng.normal(size=(300, 2)))
    out = grid_sample_points(grid, pts)
    (out * w).sum().backward()
    lhs = float((out * w).sum().detach())
    rhs = float((grid.grad * grid).sum())
    assert abs(lhs - rhs) <= 1e-6 * max(1.0, abs(lhs))


def test_nearest_idempotent():
    rng = np.random.default_rng(2)
    g = GridRepr(rng.normal(size=(5, 5, 5)) + 0j, "nearest")
    pts = rng.uniform(-1, 1, size=(100, 3))
    assert np.array_equal(resample_grid(g, pts), resample_grid(g, pts))


def test_inn_zero_head_and_finite():
    net = INN(width=32, depth=2, n_features=16)
    mesh = make_mesh3((4, 4, 4))
    assert np.all(np.isfinite(eval_inn(net, mesh)))
    with torch.no_grad():
        net.head.weight.zero_()
        net.head.bias.zero_()
    assert not np.any(eval_inn(net, mesh))
    with torch.no_grad():
        net.head.weight.fill_(np.nan)
    with pytest.raises(ValueError):
        eval_inn(net, mesh)


def test_gaussian_point_values():
    c = _iso([0.1, -0.2, 0.3], np.log(0.2))
    assert np.isclose(rasterize_gaussians(c, np.array([[0.1, -0.2, 0.3]]))[0], 1.0)
    v = rasterize_gaussians(c, np.array([[0.3, -0.2, 0.3]]))[0]
    assert abs(v - np.exp(-0.5)) < 1e-12


def _random_cloud(rng, G, scale=(-3.0, -1.5)):
    q = rng.normal(size=(G, 4))
    return GaussianCloud(rng.uniform(-1, 1, (G, 3)), rng.uniform(*scale, (G, 3)), q, rng.normal(size=(G, 2)))


def _brute(cloud, pts):
    t = cloud.tensors()
    from resrecon.representations import covariances
    cov = covariances(t["log_scales"], t["quats"]).numpy()
    d = pts[:, None, :] - cloud.means[None]
    m2 = np.einsum("pgi,gij,pgj->pg", d, np.linalg.inv(cov), d)
    amp = cloud.amplitudes[:, 0] + 1j * cloud.amplitudes[:, 1]
    return (np.exp(-0.5 * m2) * amp).sum(1)


def test_tiled_matches_bruteforce():
    rng = np.random.default_rng(3)
    cloud = _random_cloud(rng, 800)
    pts = make_mesh3((12, 12, 12)).points
    bound = cloud.G * np.abs(cloud.amplitudes[:, 0] + 1j * cloud.amplitudes[:, 1]).max() * np.exp(-4.5)
    assert np.max(np.abs(rasterize_gaussians(cloud, pts) - _brute(cloud, pts))) <= bound


def test_gaussian_gradients_fd():
    rng = np.random.default_rng(4)
    cloud = _random_cloud(rng, 6, scale=(-1.2, -0.6))
    pts = torch.tensor(make_mesh3((6, 6, 6)).points)
    t = cloud.tensors(requires_grad=True)
    w = torch.tensor(rng.normal(size=(len(pts), 2)))

    def f(d):
        return (rasterize_tensors(d["means"], d["log_scales"], d["quats"], d["amplitudes"], pts, 10.0) * w).sum()

    f(t).backward()
    h = 1e-6
    for name in ("amplitudes", "means", "log_scales"):
        g = t[name].grad.numpy()
        for idx in [(0, 0), (3, 1), (5, 2)] if name != "amplitudes" else [(0, 0), (4, 1)]:
            d_p = {k: v.detach().clone() for k, v in t.items()}
            d_m = {k: v.detach().clone() for k, v in t.items()}
            d_p[name][idx] += h
            d_m[name][idx] -= h
            fd = float(f(d_p) - f(d_m)) / (2 * h)
            assert abs(fd - g[idx]) <= 1e-4 * max(abs(fd), 1e-3), (name, idx)


def test_gaussian_rotation_invariance():
    rng = np.random.default_rng(5)
    cloud = _random_cloud(rng, 40, scale=(-2.0, -1.0))
    pts = rng.uniform(-1, 1, (200, 3))
    base = rasterize_gaussians(cloud, pts)
    # 90 degrees about the z axis
    Rg = np.array([[0, -1, 0], [1, 0, 0], [0, 0, 1]], float)
    qg = np.array([np.cos(np.pi / 4), 0, 0, np.sin(np.pi / 4)])

    def qmul(a, b):
        w1, x1, y1, z1 = a
        w2, x2, y2, z2 = b.T
        return np.stack([w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2, w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
                         w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2, w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2], 1)

    rot = GaussianCloud(cloud.means @ Rg.T, cloud.log_scales, qmul(qg, cloud.quats), cloud.amplitudes)
    assert np.allclose(rasterize_gaussians(rot, pts @ Rg.T), base, atol=1e-6)


def test_gaussian_bad_covariance():
    c = _random_cloud(np.random.default_rng(0), 3)
    c.log_scales[1, 0] = np.inf
    with pytest.raises(ValueError, match="gaussian 1"):
        rasterize_gaussians(c, np.zeros((1, 3)))


def test_init_gaussians():
    vol = generate_phantom(0, (16, 16, 16))
    a = init_gaussians_from_volume(vol, 10_000, seed=1)
    b = init_gaussians_from_volume(vol, 10_000, seed=1)
    assert np.array_equal(a.means, b.means)
    assert np.allclose(np.linalg.norm(a.quats, axis=1), 1)
    idx = np.round((a.means + 1) / 2 * 16 - 0.5).astype(int)
    counts = np.zeros(vol.dims)
    np.add.at(counts, tuple(idx.T), 1)
    assert spearmanr(counts.ravel(), np.abs(vol.data).ravel()).correlation > 0.5
    with pytest.raises(DegenerateInputError):
        init_gaussians_from_volume(ComplexVolume(np.zeros((4, 4, 4))), 5)


@settings(max_examples=5, deadline=None)
@given(st.sampled_from(["grid_resample", "inn", "gaussian"]), st.integers(0, 7))
def test_backend_plane_consistency(name, i):
    vol = generate_phantom(1, (8, 8, 8))
    opts = {"inn": dict(width=16, depth=2, n_features=8), "gaussian": dict(G=300)}.get(name, {})
    be = make_backend(name, vol, **opts)
    with torch.no_grad():
        v3 = be.volume().numpy()
        pos = make_mesh3(vol.dims).coords[0, 0, i, 2]
        m2 = make_mesh2_for_view(vol.fov, 1.0, "axial", pos)
        v2 = be.evaluate(torch.tensor(m2.points, dtype=torch.float32)).numpy()
    assert np.allclose(v2.T.reshape(2, 8, 8), v3[:, :, :, i], atol=1e-6)


def test_gaussian_quats_renormalized():
    vol = generate_phantom(1, (8, 8, 8))
    be = make_backend("gaussian", vol, G=50)
    with torch.no_grad():
        be.quats.mul_(3.0)
    be.post_step()
    assert torch.allclose(be.quats.norm(dim=1), torch.ones(50, dtype=be.quats.dtype))
