"""
Activity detection and channel estimation on the preamble segment with approximate
message passing (AMP), a Bernoulli-Gaussian posterior-mean denoiser and hard
thresholding at c * tau.
"""
import logging
from dataclasses import dataclass, field, replace
from typing import Dict, FrozenSet, Iterable, List, Optional, Tuple

import numpy as np
from scipy.special import expit

from ura_feedback.tx_chain import SensingMatrix

logger = logging.getLogger(__name__)

STOP_RELATIVE_TAU = 1e-4
TAU_FLOOR = 1e-12
DIVERGENCE_STREAK = 3
RETRY_DAMPING = 0.5


@dataclass(frozen=True)
class AmpConfig:
    c: float = 3.0
    max_iters: int = 25
    damping: float = 0.0
    sparsity: float = 0.01

    def __post_init__(self):
        if self.c <= 0:
            raise ValueError(f"c must be > 0, got {self.c}")
        if not 0.0 <= self.damping < 1.0:
            raise ValueError(f"damping must be in [0, 1), got {self.damping}")
        if not 0.0 < self.sparsity <= 1.0:
            raise ValueError(f"sparsity must be in (0, 1], got {self.sparsity}")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")

    @classmethod
    def for_load(cls, k_a: int, n_columns: int, **kwargs) -> "AmpConfig":
        """Prior activity K_a / N, never below one active column."""
        return cls(sparsity=min(1.0, max(k_a, 1) / n_columns), **kwargs)


@dataclass
class ActivityEstimate:
    detected: np.ndarray
    h_hat: np.ndarray
    tau: float
    iterations_run: int
    per_iteration_tau: List[float] = field(default_factory=list)
    diverged: bool = False
    trace: List[Dict[str, float]] = field(default_factory=list)

    @property
    def detected_set(self) -> FrozenSet[int]:
        return frozenset(int(i) for i in self.detected)

    def estimates(self) -> Dict[int, complex]:
        return {int(i): complex(h) for i, h in zip(self.detected, self.h_hat)}


def denoise(r: np.ndarray, tau2: float, eps: float) -> np.ndarray:
    """
    Posterior mean of h_j given r_j = h_j + CN(0, tau2) under the prior
    (1 - eps) * delta_0 + eps * CN(0, 1).
    """
    if tau2 < 0:
        raise ValueError(f"tau2 must be >= 0, got {tau2}")
    r = np.asarray(r, dtype=np.complex128)
    if tau2 == 0:
        return r.copy()
    return _activity_weight(np.abs(r) ** 2, tau2, eps) * r / (1.0 + tau2)


def _activity_weight(mag2: np.ndarray, tau2: float, eps: float) -> np.ndarray:
    log_odds = np.log((1.0 - eps) / eps) + np.log1p(1.0 / tau2) - mag2 / (tau2 * (1.0 + tau2))
    return expit(-log_odds)


def denoiser_derivative(r: np.ndarray, tau2: float, eps: float) -> np.ndarray:
    """Average of the real and imaginary partial derivatives of the denoiser."""
    if tau2 == 0:
        return np.ones(len(r))
    mag2 = np.abs(r) ** 2
    w = _activity_weight(mag2, tau2, eps)
    return w / (1.0 + tau2) + mag2 * w * (1.0 - w) / (tau2 * (1.0 + tau2) ** 2)


def threshold_prune(h_tilde: np.ndarray, c: float, tau: float) -> Tuple[np.ndarray, np.ndarray]:
    """Zero every entry with |h| <= c * tau. Returns (pruned vector, kept indices)."""
    if c <= 0:
        raise ValueError(f"c must be > 0, got {c}")
    if tau < 0:
        raise ValueError(f"tau must be >= 0, got {tau}")
    keep = np.abs(h_tilde) > c * tau
    return np.where(keep, h_tilde, 0), np.flatnonzero(keep)


def _run_amp(y_p: np.ndarray, entries: np.ndarray, cfg: AmpConfig) -> ActivityEstimate:
    n_p, n = entries.shape
    ratio = n / n_p
    h = np.zeros(n, dtype=np.complex128)
    z_prev = np.zeros(n_p, dtype=np.complex128)
    onsager = 0.0

    taus: List[float] = []
    trace: List[Dict[str, float]] = []
    best = (np.inf, h)
    prev_support: Optional[np.ndarray] = None
    growth = 0
    diverged = False
    iteration = 0

    for iteration in range(1, cfg.max_iters + 1):
        z = y_p - entries @ h + onsager * z_prev
        tau = float(np.sqrt(np.vdot(z, z).real / n_p))
        taus.append(tau)

        if tau < TAU_FLOOR:
            break

        r = h + entries.conj().T @ z
        tau2 = tau * tau
        h_tilde = denoise(r, tau2, cfg.sparsity)
        h_new, support = threshold_prune(h_tilde, cfg.c, tau)

        derivative = np.zeros(n)
        derivative[support] = denoiser_derivative(r[support], tau2, cfg.sparsity)
        onsager = ratio * float(derivative.mean())
        z_prev = z
        h = cfg.damping * h + (1.0 - cfg.damping) * h_new

        trace.append({"iteration": iteration, "tau": tau, "detected": int(len(support))})
        logger.debug(f"AMP iteration {iteration}: tau={tau:.4e} detected={len(support)}")

        if tau < best[0]:
            best = (tau, h)

        if len(taus) > 1 and tau > taus[-2]:
            growth += 1
            if growth >= DIVERGENCE_STREAK:
                diverged = True
                break
        else:
            growth = 0

        if (len(taus) > 1 and prev_support is not None
                and abs(tau - taus[-2]) < STOP_RELATIVE_TAU * taus[-2]
                and np.array_equal(support, prev_support)):
            break
        prev_support = support

    if diverged:
        final_tau, h_final = best
    else:
        final_tau, h_final = taus[-1], h
    pruned, detected = threshold_prune(h_final, cfg.c, final_tau)
    return ActivityEstimate(detected=detected, h_hat=pruned[detected], tau=final_tau,
                            iterations_run=iteration, per_iteration_tau=taus,
                            diverged=diverged, trace=trace)


def amp_detect(y_p: np.ndarray, matrix: SensingMatrix, cfg: AmpConfig, n0: Optional[float] = None) -> ActivityEstimate:
    """
    Recover active preamble indices and their channel gains from y_p = A h + z.

    n0 is only used for logging; AMP tracks the effective noise through tau. A run whose
    tau grows for three consecutive iterations is flagged as diverged and, when it ran
    undamped, retried once with damping.
    """
    y_p = np.asarray(y_p, dtype=np.complex128)
    if y_p.shape != (matrix.n_preamble,):
        raise ValueError(f"y_p must have length {matrix.n_preamble}, got {y_p.shape}")

    estimate = _run_amp(y_p, matrix.entries, cfg)
    if estimate.diverged and cfg.damping == 0.0:
        logger.warning(f"AMP diverged after {estimate.iterations_run} iterations; retrying with damping {RETRY_DAMPING}")
        retry = _run_amp(y_p, matrix.entries, replace(cfg, damping=RETRY_DAMPING))
        if not retry.diverged or retry.tau < estimate.tau:
            estimate = retry
    logger.debug(f"AMP detected {len(estimate.detected)} preambles, tau={estimate.tau:.4e}, n0={n0}")
    return estimate


def classify_detection(true_indices: Iterable[int], estimate: ActivityEstimate) -> Tuple[FrozenSet[int], FrozenSet[int]]:
    """(missed, false_alarms): active-but-undetected and detected-but-inactive indices."""
    truth = frozenset(int(i) for i in true_indices)
    detected = estimate.detected_set
    return truth - detected, detected - truth
