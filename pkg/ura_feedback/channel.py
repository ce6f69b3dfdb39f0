"""Block Rayleigh fading and AWGN. One channel draw per user per slot serves both links."""
import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SlotChannels:
    """Per-user gains of one slot, shared by the feed-forward and feedback links."""
    h: np.ndarray
    noise_power: float

    @property
    def k_active(self) -> int:
        return len(self.h)


def draw_channels(rng: np.random.Generator, k_a: int) -> np.ndarray:
    """i.i.d. CN(0, 1) gains."""
    if k_a < 0:
        raise ValueError(f"k_a must be >= 0, got {k_a}")
    return (rng.standard_normal(k_a) + 1j * rng.standard_normal(k_a)) / np.sqrt(2.0)


def draw_noise(rng: np.random.Generator, length: int, n0: float) -> np.ndarray:
    """i.i.d. CN(0, n0) samples."""
    if n0 < 0:
        raise ValueError(f"n0 must be >= 0, got {n0}")
    if n0 == 0:
        return np.zeros(length, dtype=np.complex128)
    return np.sqrt(n0 / 2.0) * (rng.standard_normal(length) + 1j * rng.standard_normal(length))


def superpose(signals: Sequence[np.ndarray], h, n0: float, rng: np.random.Generator,
              length: Optional[int] = None) -> np.ndarray:
    """y = sum_k h_k x_k + z with z ~ CN(0, n0). `length` is required when there are no signals."""
    h = np.atleast_1d(np.asarray(h, dtype=np.complex128))
    if len(signals) != len(h):
        raise ValueError(f"got {len(signals)} signals but {len(h)} channel gains")
    if len(signals) == 0:
        if length is None:
            raise ValueError("length is required when no signals are given")
        return draw_noise(rng, length, n0)

    stacked = np.asarray(signals, dtype=np.complex128)
    if stacked.ndim != 2:
        raise ValueError("all signals must have the same length")
    if length is not None and stacked.shape[1] != length:
        raise ValueError(f"signals have length {stacked.shape[1]}, expected {length}")
    return h @ stacked + draw_noise(rng, stacked.shape[1], n0)


def draw_slot(rng: np.random.Generator, k_a: int, n0: float) -> SlotChannels:
    if n0 < 0:
        raise ValueError(f"n0 must be >= 0, got {n0}")
    return SlotChannels(h=draw_channels(rng, k_a), noise_power=n0)
