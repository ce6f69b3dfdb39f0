import numpy as np
import pytest

from ura_feedback.channel import draw_channels, draw_noise, draw_slot, superpose


def test_no_users_gives_empty_vector(rng):
    assert draw_channels(rng, 0).shape == (0,)


def test_channels_are_reproducible():
    a = draw_channels(np.random.default_rng(4), 10)
    b = draw_channels(np.random.default_rng(4), 10)
    assert np.array_equal(a, b)


def test_channel_power_is_unit(rng):
    h = draw_channels(rng, 100_000)
    assert np.mean(np.abs(h) ** 2) == pytest.approx(1.0, rel=0.02)


def test_single_user_noiseless(rng):
    x = rng.standard_normal(16) + 1j * rng.standard_normal(16)
    assert np.allclose(superpose([x], [0.3 - 0.2j], 0.0, rng), (0.3 - 0.2j) * x)


def test_pure_noise_variance(rng):
    y = superpose([], [], 2.0, rng, length=100_000)
    assert np.var(y.real) == pytest.approx(1.0, rel=0.05)
    assert np.var(y.imag) == pytest.approx(1.0, rel=0.05)


def test_orthogonal_users_separate():
    x1 = np.array([1, 1, 1, 1], dtype=complex)
    x2 = np.array([1, -1, 1, -1], dtype=complex)
    y = superpose([x1, x2], [0.5 + 1j, -2.0], 0.0, np.random.default_rng(0))
    assert np.vdot(x1, y) == pytest.approx((0.5 + 1j) * 4)


def test_mismatched_inputs_raise(rng):
    with pytest.raises(ValueError):
        superpose([np.ones(4)], [1.0, 2.0], 0.0, rng)
    with pytest.raises(ValueError):
        superpose([], [], 1.0, rng)
    with pytest.raises(ValueError):
        superpose([np.ones(4)], [1.0], 0.0, rng, length=5)
    with pytest.raises(ValueError):
        draw_noise(rng, 4, -1.0)


def test_slot_draw_matches_plain_draw():
    slot = draw_slot(np.random.default_rng(11), 5, 1.0)
    assert slot.k_active == 5 and slot.noise_power == 1.0
    assert np.array_equal(slot.h, draw_channels(np.random.default_rng(11), 5))
    with pytest.raises(ValueError):
        draw_slot(np.random.default_rng(11), 5, -1.0)
