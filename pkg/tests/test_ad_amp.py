import numpy as np
import pytest
from scipy.integrate import dblquad

from ura_feedback.ad_amp import (
    ActivityEstimate,
    AmpConfig,
    amp_detect,
    classify_detection,
    denoise,
    denoiser_derivative,
    threshold_prune,
)
from ura_feedback.channel import draw_noise


def cn_density(x, var):
    return np.exp(-abs(x) ** 2 / var) / (np.pi * var)


def posterior_mean_by_quadrature(r, tau2, eps):
    def weighted(re, im, moment):
        h = re + 1j * im
        return (h.real if moment else 1.0) * cn_density(r - h, tau2) * cn_density(h, 1.0)

    numerator = eps * dblquad(lambda im, re: weighted(re, im, True), -10, 10, -10, 10, epsabs=1e-12)[0]
    evidence = (1 - eps) * cn_density(r, tau2) + eps * cn_density(r, 1.0 + tau2)
    return numerator / evidence


def unit_phases(rng, k):
    return np.exp(2j * np.pi * rng.random(k))


class TestDenoiser:
    def test_zero_input_maps_to_zero(self):
        assert denoise(np.zeros(3), 0.5, 0.1).tolist() == [0, 0, 0]

    def test_noiseless_limit_is_identity(self):
        r = np.array([5.0 + 1j, -4.0j])
        assert np.allclose(denoise(r, 1e-10, 0.01), r, atol=1e-8)
        assert np.array_equal(denoise(r, 0.0, 0.01), r)

    def test_matches_quadrature_posterior_mean(self):
        value = denoise(np.array([2.0 + 0j]), 1.0, 0.5)[0]
        assert value.real == pytest.approx(posterior_mean_by_quadrature(2.0, 1.0, 0.5), abs=1e-6)
        assert value.imag == pytest.approx(0.0, abs=1e-12)

    def test_derivative_matches_finite_difference(self):
        r, tau2, eps, step = np.array([0.7 + 0.2j]), 0.3, 0.05, 1e-6
        along_real = (denoise(r + step, tau2, eps) - denoise(r - step, tau2, eps)).real / (2 * step)
        along_imag = (denoise(r + 1j * step, tau2, eps) - denoise(r - 1j * step, tau2, eps)).imag / (2 * step)
        expected = 0.5 * (along_real + along_imag)
        assert denoiser_derivative(r, tau2, eps)[0] == pytest.approx(expected[0], rel=1e-5)

    def test_negative_variance_raises(self):
        with pytest.raises(ValueError):
            denoise(np.ones(2), -1.0, 0.1)


class TestThresholdPrune:
    def test_strictly_above_is_kept(self):
        pruned, kept = threshold_prune(np.array([3.03, 3.0, 0.1]), 3.0, 1.0)
        assert kept.tolist() == [0]
        assert pruned.tolist() == [3.03, 0.0, 0.0]

    def test_all_zero_input(self):
        _, kept = threshold_prune(np.zeros(5), 3.0, 0.2)
        assert kept.size == 0


class TestAmpDetect:
    def test_single_user_noiseless(self, small_matrix):
        y = small_matrix.column(321).copy()
        cfg = AmpConfig.for_load(1, small_matrix.n_columns, c=3.0)
        estimate = amp_detect(y, small_matrix, cfg, n0=0.0)
        assert estimate.detected_set == {321}
        assert abs(estimate.h_hat[0] - 1.0) < 1e-3
        assert estimate.tau >= 0

    def test_pure_noise_yields_no_detections(self, small_matrix, rng):
        cfg = AmpConfig.for_load(0, small_matrix.n_columns, c=3.0)
        empty = sum(
            len(amp_detect(draw_noise(rng, small_matrix.n_preamble, 0.01), small_matrix, cfg).detected) == 0
            for _ in range(20)
        )
        assert empty >= 19

    def test_noiseless_sparse_support_recovery(self, small_matrix, rng):
        cfg = AmpConfig.for_load(10, small_matrix.n_columns, c=3.0)
        hits = 0
        for _ in range(20):
            active = rng.choice(small_matrix.n_columns, 10, replace=False)
            y = small_matrix.entries[:, active] @ unit_phases(rng, 10)
            hits += amp_detect(y, small_matrix, cfg).detected_set == set(active.tolist())
        assert hits >= 19

    def test_detected_entries_exceed_threshold(self, small_matrix, rng):
        cfg = AmpConfig.for_load(5, small_matrix.n_columns, c=3.0)
        active = rng.choice(small_matrix.n_columns, 5, replace=False)
        y = small_matrix.entries[:, active] @ unit_phases(rng, 5) + draw_noise(rng, 400, 1e-3)
        estimate = amp_detect(y, small_matrix, cfg)
        assert np.all(np.abs(estimate.h_hat) > cfg.c * estimate.tau)
        assert len(estimate.per_iteration_tau) >= 1
        assert estimate.iterations_run <= cfg.max_iters

    @pytest.mark.slow
    def test_two_users_at_twenty_db(self, small_matrix, rng):
        n0 = 1.0 / (small_matrix.n_preamble * 100)
        cfg = AmpConfig.for_load(2, small_matrix.n_columns, c=3.0)
        good = 0
        for _ in range(100):
            active = rng.choice(small_matrix.n_columns, 2, replace=False)
            h = unit_phases(rng, 2)
            y = small_matrix.entries[:, active] @ h + draw_noise(rng, small_matrix.n_preamble, n0)
            found = amp_detect(y, small_matrix, cfg, n0=n0).estimates()
            good += set(found) == set(active.tolist()) and all(
                abs(found[int(nu)] - g) < 0.05 for nu, g in zip(active, h)
            )
        assert good >= 90

    def test_wrong_length_raises(self, small_matrix):
        with pytest.raises(ValueError):
            amp_detect(np.zeros(10), small_matrix, AmpConfig())

    def test_config_validation(self):
        with pytest.raises(ValueError):
            AmpConfig(damping=1.0)
        assert AmpConfig.for_load(0, 1024).sparsity == pytest.approx(1 / 1024)


def test_classify_detection():
    estimate = ActivityEstimate(detected=np.array([1, 4, 9]), h_hat=np.ones(3), tau=0.1, iterations_run=3)
    missed, false_alarms = classify_detection([1, 2, 4], estimate)
    assert missed == {2}
    assert false_alarms == {9}
