import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from skimage.metrics import structural_similarity

from resrecon.metrics import psnr, ssim_2d, ssim_sagittal_avg
from resrecon.volume import ComplexVolume, generate_phantom


@pytest.fixture(scope="module")
def ref():
    return generate_phantom(5, (16, 16, 16))


def test_psnr_examples(ref):
    assert psnr(ref, ref) is None
    mag = np.abs(ref.data) / np.abs(ref.data).max()
    r = ComplexVolume(mag)
    assert psnr(ComplexVolume(mag + 0.1), r) == pytest.approx(20.0, abs=1e-5)  # complex64 storage
    with pytest.raises(ValueError):
        psnr(ComplexVolume(np.zeros((4, 4, 4))), r)


@settings(max_examples=20, deadline=None)
@given(st.floats(0, 2 * np.pi))
def test_psnr_phase_invariant(phi):
    ref = generate_phantom(5, (8, 8, 8))
    noisy = ComplexVolume(ref.data + 0.05 * np.random.default_rng(0).normal(size=ref.dims))
    rotated = ComplexVolume(noisy.data * np.exp(1j * phi))
    assert psnr(rotated, ref) == pytest.approx(psnr(noisy, ref), abs=1e-4)


def test_ssim_examples(ref):
    assert abs(ssim_sagittal_avg(ref, ref) - 1.0) <= 1e-9
    assert abs(ssim_sagittal_avg(ComplexVolume(-ref.data), ref) - 1.0) <= 1e-9
    rng = np.random.default_rng(0)
    scale = np.abs(ref.data).max()
    noise = ComplexVolume(scale * (rng.normal(size=ref.dims) + 1j * rng.normal(size=ref.dims)))
    assert ssim_sagittal_avg(noise, ref) < 0.2


def test_ssim_matches_skimage_with_11_window():
    rng = np.random.default_rng(1)
    x = rng.uniform(0, 1, (32, 32))
    y = x + 0.1 * rng.normal(size=(32, 32))
    ours = ssim_2d(y, x, 1.0, win=11)
    ref = structural_similarity(y, x, data_range=1.0, gaussian_weights=True, sigma=1.5,
                                use_sample_covariance=False)
    assert abs(ours - ref) < 1e-6
