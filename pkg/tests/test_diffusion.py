import numpy as np
import pytest
import torch

from resrecon.diffusion.data import (augment_diverse, draw_factor, extract_slices, from_channels,
                                     to_channels)
from resrecon.diffusion.schedule import build_schedule
from resrecon.diffusion.training import (Checkpoint, TrainingError, ddpm_loss, denoise_eps, init_checkpoint,
                                         pad_to_multiple, crop_back, train)
from resrecon.diffusion.unet import DenoiserConfig, UNet, count_parameters
from resrecon.volume import ComplexVolume, generate_phantom

from conftest import TINY


def test_schedule_examples(schedule):
    assert schedule.beta[0] == pytest.approx(1e-4, abs=1e-15)
    assert abs(schedule.beta[500] - 0.010050) < 1e-9
    assert schedule.sigma[-1] > 0.999
    prod = np.cumprod(1 - schedule.beta)
    assert np.max(np.abs(schedule.sigma ** 2 - (1 - prod))) < 1e-9
    assert np.all(np.diff(schedule.sigma) > 0)
    assert np.allclose(schedule.sigma ** 2 + schedule.alpha ** 2, 1, atol=1e-9)
    with pytest.raises(ValueError):
        build_schedule(10, 0.5, 0.1)


def test_extract_slices_examples():
    v = ComplexVolume(np.random.default_rng(0).standard_normal((8, 8, 8)) + 0j)
    assert len(extract_slices([v])) == 24
    w = ComplexVolume(np.random.default_rng(1).standard_normal((4, 6, 8)) + 0j, (0.6, 0.5, 0.5))
    ds = extract_slices([w], planes=["sagittal"])
    assert len(ds) == 4 and ds.slices[0].shape == (6, 8)
    assert ds.pixel_sizes[0] == (0.5, 0.5)
    with pytest.raises(ValueError):
        extract_slices([])


def test_slices_restack_losslessly():
    v = generate_phantom(0, (8, 10, 12))
    ds = extract_slices([v], planes=["sagittal"], normalize=False)
    assert np.array_equal(np.stack(ds.slices), v.data)


def test_augment_diverse():
    v = generate_phantom(0, (64, 64, 64))
    rng = np.random.default_rng(0)
    assert augment_diverse(v, rng, factor=1.0).dims == v.dims
    half = augment_diverse(v, rng, factor=0.5)
    assert half.dims == (32, 32, 32) and half.voxel_size == (2.0, 2.0, 2.0)
    factors = [draw_factor(v.dims, rng) for _ in range(1000)]
    assert 0.52 <= np.mean(factors) <= 0.58
    for _ in range(5):
        out = augment_diverse(v, rng)
        assert np.allclose(out.fov, v.fov, rtol=1e-6)


def test_channels_roundtrip():
    z = np.random.default_rng(0).standard_normal((3, 4, 5)) * (1 + 1j)
    assert np.allclose(from_channels(to_channels(z)), z, atol=1e-6)


def test_ddpm_loss_stubs(schedule):
    batch = torch.randn(64, 2, 8, 8)
    gen = torch.Generator().manual_seed(0)
    # oracle that knows eps: recover it from s_t given the clean batch is unknown -> use zero images
    zeros = torch.zeros(64, 2, 8, 8)
    alpha = torch.as_tensor(schedule.alpha, dtype=torch.float32)
    sigma = torch.as_tensor(schedule.sigma, dtype=torch.float32)
    oracle = lambda x, t: x / sigma[t][:, None, None, None]  # noqa: E731
    assert float(ddpm_loss(oracle, zeros, schedule, gen)) < 1e-10
    zero_stub = lambda x, t: torch.zeros_like(x)  # noqa: E731
    loss = float(ddpm_loss(zero_stub, batch, schedule, gen))
    assert abs(loss - 1.0) < 0.05
    del alpha
    with pytest.raises(ValueError):
        ddpm_loss(zero_stub, torch.randn(2, 3, 8, 8), schedule, gen)


def test_unet_shapes_and_params():
    net = UNet(DenoiserConfig(**TINY))
    out = net(torch.randn(3, 2, 16, 12), torch.tensor([0, 10, 999]))
    assert out.shape == (3, 2, 16, 12)
    assert count_parameters(net) > 0
    inf = UNet(DenoiserConfig(arch="inf_unet", **TINY))
    assert len(inf.depthwise_blocks()) == 2


def test_train_zero_steps_and_roundtrip(tmp_path):
    vols = [generate_phantom(s, (8, 8, 8)) for s in range(2)]
    ds = extract_slices(vols)
    ck = train(DenoiserConfig(**TINY), ds, 0)
    for k, v in ck.params.items():
        assert torch.equal(v, ck.ema_params[k])
    ref = init_checkpoint(DenoiserConfig(**TINY), ck.schedule, seed=0)
    for k in ref.params:
        assert torch.equal(ref.params[k], ck.params[k])
    ck = train(DenoiserConfig(**TINY), ds, 3, ema_start=1)
    ck.save(tmp_path / "ck")
    back = Checkpoint.load(tmp_path / "ck")
    x = np.random.default_rng(0).standard_normal((2, 2, 8, 8)).astype(np.float32)
    assert np.array_equal(denoise_eps(ck, x, [5, 50]), denoise_eps(back, x, [5, 50]))
    assert back.config.train_voxel_sizes == [(1.0, 1.0)]


def test_train_is_deterministic():
    ds = extract_slices([generate_phantom(0, (8, 8, 8))])
    a = train(DenoiserConfig(**TINY), ds, 4, seed=3)
    b = train(DenoiserConfig(**TINY), ds, 4, seed=3)
    for k in a.params:
        assert torch.equal(a.params[k], b.params[k])


def test_ema_fixed_for_constant_weights():
    ds = extract_slices([generate_phantom(0, (8, 8, 8))])
    ck = train(DenoiserConfig(**TINY), ds, 3, lr=0.0, ema_start=0)
    for k in ck.params:
        assert torch.allclose(ck.params[k], ck.ema_params[k])


def test_training_loss_decreases():
    ds = extract_slices([generate_phantom(s, (16, 16, 16)) for s in range(3)])
    ck = train(DenoiserConfig(**TINY), ds, 300, lr=1e-3, batch_size=8, ema_start=50)
    tr = np.array(ck.loss_trace)
    assert tr[-50:].mean() < 0.9 * tr[:20].mean()


def test_divergence_raises():
    ds = extract_slices([generate_phantom(0, (8, 8, 8))])
    with pytest.raises(TrainingError):
        train(DenoiserConfig(**TINY), ds, 50, lr=1e6)


def test_denoise_batching_and_determinism(tiny_ckpt):
    x = np.random.default_rng(0).standard_normal((4, 2, 12, 10)).astype(np.float32)
    t = np.array([0, 100, 500, 999])
    batched = denoise_eps(tiny_ckpt, x, t)
    single = np.concatenate([denoise_eps(tiny_ckpt, x[i:i + 1], t[i:i + 1]) for i in range(4)])
    assert np.allclose(batched, single, atol=1e-5)
    assert np.array_equal(batched, denoise_eps(tiny_ckpt, x, t))
    assert batched.shape == x.shape


def test_kernel_override_errors(tiny_ckpt, tiny_inf_ckpt):
    x = np.zeros((1, 2, 8, 8), np.float32)
    with pytest.raises(ValueError):
        denoise_eps(tiny_ckpt, x, [1], kernel_override=[np.zeros((8, 7, 7))])
    with pytest.raises(ValueError):
        denoise_eps(tiny_inf_ckpt, x, [1], kernel_override=[np.zeros((8, 7, 7))])


def test_pad_crop_roundtrip():
    x = torch.randn(1, 2, 9, 13)
    p, size = pad_to_multiple(x, 8)
    assert p.shape[-2:] == (16, 16)
    assert torch.equal(crop_back(p, size), x)
