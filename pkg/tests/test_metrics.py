import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from skimage.metrics import peak_signal_noise_ratio, structural_similarity

from ebt.metrics import PSNR_CAP, EvalReport, e_exp, e_ldmk, evaluate, gaussian_taps, psnr, ssim


def test_uniform_shift_gives_five():
    rng = np.random.default_rng(0)
    pts = rng.uniform(0, 100, (20, 2))
    assert e_ldmk(pts + [3.0, 4.0], pts) == 5.0


def test_e_exp_is_mean_absolute_difference():
    assert e_exp([1.0, -2.0, 0.5], [0.0, 0.0, 0.0]) == pytest.approx(3.5 / 3)


def test_errors_are_symmetric_and_zero_on_identity():
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=(5, 8)), rng.normal(size=(5, 8))
    assert e_exp(a, b) == e_exp(b, a) and e_exp(a, a) == 0.0
    assert e_ldmk(a, b) == e_ldmk(b, a) and e_ldmk(a, a) == 0.0


def test_shape_mismatch_raises():
    with pytest.raises(ValueError, match="shape"):
        e_ldmk(np.zeros((3, 2)), np.zeros((4, 2)))


def test_ssim_of_identical_is_one():
    img = np.random.default_rng(2).uniform(0, 1, (32, 40, 3))
    assert ssim(img, img) == pytest.approx(1.0, abs=1e-12)


def test_psnr_cap():
    img = np.random.default_rng(3).uniform(0, 1, (16, 16, 3))
    assert psnr(img, img) == PSNR_CAP
    assert psnr(img, img + 1e-9) == PSNR_CAP


def test_psnr_known_value():
    a = np.zeros((8, 8))
    assert psnr(a, a + 0.1) == pytest.approx(20.0)


@pytest.mark.parametrize("seed", range(5))
def test_psnr_matches_skimage(seed):
    rng = np.random.default_rng(seed)
    a = rng.uniform(0, 1, (24, 24, 3))
    b = np.clip(a + rng.normal(0, 0.05, a.shape), 0, 1)
    assert psnr(a, b) == pytest.approx(peak_signal_noise_ratio(a, b, data_range=1.0), rel=1e-10)


@pytest.mark.parametrize("seed", range(5))
def test_ssim_matches_skimage(seed):
    rng = np.random.default_rng(seed)
    a = rng.uniform(0, 1, (32, 36))
    b = np.clip(a + rng.normal(0, 0.1, a.shape), 0, 1)
    ref = structural_similarity(
        a, b, data_range=1.0, gaussian_weights=True, sigma=1.5, use_sample_covariance=False
    )
    assert ssim(a, b) == pytest.approx(ref, abs=1e-9)


def test_ssim_uses_channel_mean():
    rng = np.random.default_rng(9)
    a = rng.uniform(0, 1, (20, 20, 3))
    b = rng.uniform(0, 1, (20, 20, 3))
    assert ssim(a, b) == pytest.approx(ssim(a.mean(-1), b.mean(-1)), abs=1e-12)


def test_gaussian_taps_normalised():
    g = gaussian_taps()
    assert g.size == 11 and g.sum() == pytest.approx(1.0) and g[5] == g.max()


def test_ssim_rejects_small_images():
    with pytest.raises(ValueError, match="11"):
        ssim(np.zeros((8, 8)), np.zeros((8, 8)))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_ssim_bounded_and_symmetric(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.uniform(0, 1, (16, 16)), rng.uniform(0, 1, (16, 16))
    v = ssim(a, b)
    assert -1.0 <= v <= 1.0
    assert v == pytest.approx(ssim(b, a), abs=1e-12)


def test_report_round_trip_and_csv():
    rng = np.random.default_rng(4)
    frames = rng.uniform(0, 1, (2, 16, 16, 3))
    rep = evaluate(np.zeros((3, 4)), np.ones((3, 4)), np.zeros((3, 5, 2)), np.full((3, 5, 2), [3.0, 4.0]), frames, frames)
    assert rep.e_exp == 1.0 and rep.e_ldmk == 5.0 and rep.psnr_db == PSNR_CAP and rep.ssim == pytest.approx(1.0)
    assert (rep.n_exp, rep.n_ldmk, rep.n_frames) == (12, 15, 2)
    assert EvalReport.from_text(rep.to_text()) == rep
    lines = rep.csv_row("s1", header=True).splitlines()
    assert lines[0].startswith("sequence,e_exp") and lines[1].startswith("s1,1.0,5.0")


def test_report_without_frames_has_nan_image_metrics():
    rep = evaluate(np.zeros(2), np.zeros(2), np.zeros((1, 2)), np.zeros((1, 2)))
    assert np.isnan(rep.psnr_db) and np.isnan(rep.ssim) and rep.n_frames == 0
