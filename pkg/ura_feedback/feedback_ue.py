"""
User-side feedback reception. A user estimates its channel from the feedback pilot,
recovers the broadcast threshold(s) and, when needed, correlates its own preamble
signature against the targeted superposition before deciding whether to re-transmit.
"""
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Hashable, Optional, Tuple

import numpy as np

from ura_feedback.feedback_bs import FeedbackPacket, UserSets
from ura_feedback.models import FeedbackVariant

logger = logging.getLogger(__name__)

UNRELIABLE_CHANNEL = 1e-9


class Stage(str, Enum):
    PILOT = "pilot"
    UPPER_THRESHOLD = "upper_threshold"
    LOWER_THRESHOLD = "lower_threshold"
    CORRELATOR = "correlator"


@dataclass(frozen=True)
class UeConfig:
    gamma_bar: float = 0.5
    sigma_z2: float = 0.0

    def __post_init__(self):
        if self.gamma_bar <= 0:
            raise ValueError(f"gamma_bar must be > 0, got {self.gamma_bar}")
        if self.sigma_z2 < 0:
            raise ValueError(f"sigma_z2 must be >= 0, got {self.sigma_z2}")


@dataclass
class UeDecision:
    retransmit: bool
    stage_reached: Stage
    h_hat_ue: complex = 0j
    threshold_estimates: Tuple[float, ...] = field(default_factory=tuple)
    gamma: Optional[complex] = None
    reliable: bool = True

    @property
    def used_correlator(self) -> bool:
        return self.stage_reached == Stage.CORRELATOR


def estimate_channel(y1: np.ndarray, p: np.ndarray, sigma_z2: float) -> complex:
    """Scalar LMMSE estimate of h from y1 = h p + z with h ~ CN(0, 1)."""
    y1 = np.asarray(y1)
    if y1.shape != np.shape(p):
        raise ValueError(f"y1 has shape {y1.shape}, pilot has shape {np.shape(p)}")
    return complex(np.vdot(p, y1) / (sigma_z2 + np.vdot(p, p).real))


def estimate_threshold(y2: np.ndarray, p: np.ndarray, h_hat: complex, sigma_z2: float) -> Tuple[float, bool]:
    """
    Recover the real threshold carried by y2 = h (c~ tau) p + z using the pilot-stage
    channel estimate. Returns (value, reliable); a deep-faded estimate is unreliable.
    """
    if abs(h_hat) < UNRELIABLE_CHANNEL:
        return 0.0, False
    p_energy = np.vdot(p, p).real
    value = abs(np.conj(h_hat) * np.vdot(p, y2)) / (sigma_z2 + abs(h_hat) ** 2 * p_energy)
    return float(value), True


def correlate(y3: np.ndarray, a_k: np.ndarray, h_hat: complex) -> complex:
    """gamma = <a_k, y3> / h_hat; nan when the channel estimate is unusable."""
    if len(y3) != len(a_k):
        raise ValueError(f"y3 has length {len(y3)}, signature has length {len(a_k)}")
    if abs(h_hat) < UNRELIABLE_CHANNEL:
        return complex(np.nan, np.nan)
    return complex(np.vdot(a_k, y3) / h_hat)


def decide_single(h_hat: complex, threshold_est: float, gamma: complex, gamma_bar: float,
                  reliable: bool = True) -> UeDecision:
    """Single-threshold rule: targeted users flip the decision their channel magnitude implies."""
    if not reliable or np.isnan(gamma):
        return UeDecision(retransmit=True, stage_reached=Stage.PILOT, h_hat_ue=h_hat,
                          threshold_estimates=(threshold_est,), gamma=None, reliable=False)
    strong = abs(h_hat) >= threshold_est
    if abs(gamma) > gamma_bar:
        retransmit = strong
    else:
        retransmit = not strong
    return UeDecision(retransmit=retransmit, stage_reached=Stage.CORRELATOR, h_hat_ue=h_hat,
                      threshold_estimates=(threshold_est,), gamma=gamma)


def decide_double(h_hat: complex, upper_est: float, lower_est: float, gamma_provider: Callable[[], complex],
                  gamma_bar: float, reliable: bool = True) -> UeDecision:
    """
    Double-threshold rule. Strong users stop after the upper threshold, weak users after
    the lower one; only users in between call `gamma_provider` and run the correlator.
    """
    thresholds = (upper_est, lower_est)
    if not reliable:
        return UeDecision(retransmit=True, stage_reached=Stage.PILOT, h_hat_ue=h_hat,
                          threshold_estimates=thresholds, reliable=False)
    magnitude = abs(h_hat)
    if magnitude >= upper_est:
        return UeDecision(retransmit=False, stage_reached=Stage.UPPER_THRESHOLD, h_hat_ue=h_hat,
                          threshold_estimates=thresholds)
    if magnitude < lower_est:
        return UeDecision(retransmit=True, stage_reached=Stage.LOWER_THRESHOLD, h_hat_ue=h_hat,
                          threshold_estimates=thresholds)
    gamma = gamma_provider()
    if np.isnan(gamma):
        return UeDecision(retransmit=True, stage_reached=Stage.CORRELATOR, h_hat_ue=h_hat,
                          threshold_estimates=thresholds, gamma=gamma, reliable=False)
    return UeDecision(retransmit=not abs(gamma) > gamma_bar, stage_reached=Stage.CORRELATOR,
                      h_hat_ue=h_hat, threshold_estimates=thresholds, gamma=gamma)


def decide_positive(gamma: complex, gamma_bar: float, h_hat: complex = 0j) -> UeDecision:
    """Acknowledged users stay silent, everyone else re-transmits."""
    if np.isnan(gamma):
        return UeDecision(retransmit=True, stage_reached=Stage.PILOT, h_hat_ue=h_hat, reliable=False)
    return UeDecision(retransmit=not abs(gamma) > gamma_bar, stage_reached=Stage.CORRELATOR,
                      h_hat_ue=h_hat, gamma=gamma)


def decide_negative(gamma: complex, gamma_bar: float, h_hat: complex = 0j) -> UeDecision:
    """Only users whose signature is present re-transmit."""
    if np.isnan(gamma):
        return UeDecision(retransmit=True, stage_reached=Stage.PILOT, h_hat_ue=h_hat, reliable=False)
    return UeDecision(retransmit=abs(gamma) > gamma_bar, stage_reached=Stage.CORRELATOR,
                      h_hat_ue=h_hat, gamma=gamma)


def _threshold_count(variant: FeedbackVariant) -> int:
    return {FeedbackVariant.SINGLE_THRESHOLD: 1, FeedbackVariant.DOUBLE_THRESHOLD: 2}.get(variant, 0)


def receive_feedback(variant: FeedbackVariant, received: np.ndarray, pilot: np.ndarray,
                     signature: np.ndarray, cfg: UeConfig) -> UeDecision:
    """
    Run the staged reception for one user. `received` is the user's copy of the
    normalized feedback vector [p, threshold blocks..., x_bar]; `signature` is the
    user's own preamble truncated to the broadcast signature length.
    """
    if variant == FeedbackVariant.NONE:
        raise ValueError("the feed-forward only variant carries no feedback to receive")
    l_p, l_f = len(pilot), len(signature)
    n_blocks = _threshold_count(variant)
    expected = l_p * (1 + n_blocks) + l_f
    if len(received) != expected:
        raise ValueError(f"received feedback has length {len(received)}, expected {expected}")

    h_hat = estimate_channel(received[:l_p], pilot, cfg.sigma_z2)
    blocks = [received[l_p * (i + 1):l_p * (i + 2)] for i in range(n_blocks)]
    y3 = received[l_p * (1 + n_blocks):]

    if variant == FeedbackVariant.POSITIVE_ONLY:
        return decide_positive(correlate(y3, signature, h_hat), cfg.gamma_bar, h_hat)
    if variant == FeedbackVariant.NEGATIVE_ONLY:
        return decide_negative(correlate(y3, signature, h_hat), cfg.gamma_bar, h_hat)

    estimates = [estimate_threshold(block, pilot, h_hat, cfg.sigma_z2) for block in blocks]
    reliable = all(ok for _, ok in estimates)
    if not reliable:
        logger.debug(f"Unreliable feedback channel estimate |h|={abs(h_hat):.2e}; re-transmitting")
    if variant == FeedbackVariant.SINGLE_THRESHOLD:
        threshold = estimates[0][0]
        gamma = correlate(y3, signature, h_hat) if reliable else complex(np.nan, np.nan)
        return decide_single(h_hat, threshold, gamma, cfg.gamma_bar, reliable)
    (upper, _), (lower, _) = estimates
    return decide_double(h_hat, upper, lower, lambda: correlate(y3, signature, h_hat), cfg.gamma_bar, reliable)


def genie_decision(variant: FeedbackVariant, user_id: Hashable, sets: UserSets,
                   packet: FeedbackPacket, gamma_bar: float = 0.5) -> UeDecision:
    """
    Error-free reception: the user sees the magnitude the BS classified it with, the
    exact thresholds, and gamma = 1 exactly when it is one of the targeted users.
    """
    magnitude = sets.magnitude[user_id]
    gamma = 1.0 + 0j if user_id in packet.targeted_users else 0j
    if variant == FeedbackVariant.POSITIVE_ONLY:
        return decide_positive(gamma, gamma_bar, magnitude)
    if variant == FeedbackVariant.NEGATIVE_ONLY:
        return decide_negative(gamma, gamma_bar, magnitude)
    if variant == FeedbackVariant.SINGLE_THRESHOLD:
        return decide_single(magnitude, packet.thresholds[0], gamma, gamma_bar)
    if variant == FeedbackVariant.DOUBLE_THRESHOLD:
        upper, lower = packet.thresholds
        return decide_double(magnitude, upper, lower, lambda: gamma, gamma_bar)
    raise ValueError("the feed-forward only variant carries no feedback to receive")
