"""
Iterative multi-user payload detection.

Each iteration matched-filters the payload segment for every detected preamble,
cancels the re-modulated estimates of all other users (Jacobi order: every user reads
the previous iteration's estimates), computes per-replica LLRs, and either decodes
(combined SINR at or above alpha) or falls back to extrinsic soft bits. A user is
decoded once the same codeword passes its check in two consecutive iterations; decoded
users are cancelled with hard symbols and their channels are re-estimated by LMMSE
using the decoded data as pilots, accepted only when that lowers the residual
noise-plus-interference power.
"""
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Dict, List, NamedTuple, Optional

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from ura_feedback.ad_amp import ActivityEstimate
from ura_feedback.fec import CodeSpec, decode, encode
from ura_feedback.models import SinrEstimator
from ura_feedback.tx_chain import (
    SQRT2,
    SequencePair,
    derive_sequences,
    descramble_payload,
    index_to_bits,
    inverse_permute,
    n_payload_symbols,
    spread_rails,
)

logger = logging.getLogger(__name__)

DECODE_STREAK = 2
LMMSE_REGULARIZATION = 1e-9
MAX_SINR = 1e10

# (preamble index, decoded info bits) -> whether a higher layer confirms the message
MessageCheck = Callable[[int, np.ndarray], bool]


class MudStateError(Exception):
    """Detector state cannot produce LLRs (non-positive interference power)."""
    pass


class UserStatus(str, Enum):
    ACTIVE = "active"
    DECODED = "decoded"
    FAILED = "failed"


def alpha_schedule(k_a: int) -> float:
    """FEC activation threshold in dB: -20 dB up to 50 users, -11 dB from 300 users, linear between."""
    return float(np.interp(k_a, [50, 300], [-20.0, -11.0]))


def estimate_sinr_db(h: complex, sigma2: float, m: int,
                     estimator: SinrEstimator = SinrEstimator.COMBINED) -> float:
    """
    SINR compared against alpha. Symbols have unit energy, so one matched-filtered
    symbol sees |h|^4 / sigma2; COMBINED adds the 10 log10(M) gain of summing the M
    replica LLRs before the decoder.
    """
    per_symbol = 10.0 * np.log10(np.abs(h) ** 4 / sigma2)
    if estimator == SinrEstimator.COMBINED:
        return float(per_symbol + 10.0 * np.log10(m))
    if estimator == SinrEstimator.PER_SYMBOL:
        return float(per_symbol)
    raise ValueError(f"unknown SINR estimator: {estimator}")


@dataclass(frozen=True)
class MudConfig:
    alpha_db: float = -20.0
    max_iters: int = 30
    sinr_estimator: SinrEstimator = SinrEstimator.COMBINED

    @classmethod
    def for_load(cls, k_a: int, alpha_db: Optional[float] = None, **kwargs) -> "MudConfig":
        return cls(alpha_db=alpha_schedule(k_a) if alpha_db is None else alpha_db, **kwargs)


@dataclass(frozen=True)
class PayloadLayout:
    """What the receiver needs to regenerate a detected user's payload chain."""
    global_seed: int
    repetition: int
    b_preamble: int
    b_payload: int
    n_payload: int

    @property
    def n_symbols(self) -> int:
        return n_payload_symbols(self.repetition, self.b_payload)

    def sequences(self, nu: int) -> SequencePair:
        return derive_sequences(self.global_seed, nu, self.repetition, self.b_payload, self.n_payload)


@dataclass
class MudState:
    """Per-detected-user detector state, one row per detected preamble."""
    preamble_index: np.ndarray
    pairs: List[SequencePair]
    h_hat: np.ndarray
    symbols: np.ndarray
    contributions: np.ndarray
    sigma2: np.ndarray
    crc_pass_streak: np.ndarray
    status: List[UserStatus]
    codewords: Dict[int, np.ndarray] = field(default_factory=dict)
    infos: Dict[int, np.ndarray] = field(default_factory=dict)
    # codeword behind the current pass streak
    candidates: Dict[int, np.ndarray] = field(default_factory=dict)
    iteration: int = 0

    @classmethod
    def start(cls, activity: ActivityEstimate, layout: PayloadLayout) -> "MudState":
        k = len(activity.detected)
        return cls(
            preamble_index=np.asarray(activity.detected, dtype=np.int64),
            pairs=[layout.sequences(int(nu)) for nu in activity.detected],
            h_hat=np.asarray(activity.h_hat, dtype=np.complex128).copy(),
            symbols=np.zeros((k, layout.n_payload), dtype=np.complex128),
            contributions=np.zeros((k, layout.n_payload), dtype=np.complex128),
            sigma2=np.ones(k),
            crc_pass_streak=np.zeros(k, dtype=np.int64),
            status=[UserStatus.ACTIVE] * k,
        )

    def indices(self, status: UserStatus) -> List[int]:
        return [k for k, s in enumerate(self.status) if s == status]


@dataclass(frozen=True)
class DecodedUser:
    preamble_index: int
    info_bits: np.ndarray
    codeword_bits: np.ndarray
    h_hat: complex


@dataclass
class MudResult:
    decoded: List[DecodedUser]
    failed: List[int]
    status: Dict[int, UserStatus]
    trace: List[Dict[str, float]]
    iterations: int

    def decoded_messages(self) -> Dict[int, np.ndarray]:
        return {d.preamble_index: d.info_bits for d in self.decoded}


class LmmseResult(NamedTuple):
    estimates: np.ndarray
    regularized: bool


# ---------------------------------------------------------------- building blocks

def matched_filter(y_d: np.ndarray, h_hat_k: complex) -> np.ndarray:
    return np.conj(h_hat_k) * np.asarray(y_d)


def symbol_llrs(r: np.ndarray, sigma2: float) -> np.ndarray:
    """2 * r / sigma2 per real dimension; complex input is split into interleaved rails."""
    if not sigma2 > 0:
        raise MudStateError(f"interference-plus-noise power must be > 0, got {sigma2}")
    r = np.asarray(r)
    if np.iscomplexobj(r):
        rails = np.empty(2 * r.size)
        rails[0::2] = r.real.ravel()
        rails[1::2] = r.imag.ravel()
        r = rails
    return 2.0 * r / sigma2


def combine_replicas(llrs: np.ndarray, m: int) -> np.ndarray:
    """Sum the M replica LLRs of every payload bit; llrs has shape (B_d, M)."""
    llrs = np.asarray(llrs, dtype=np.float64)
    if llrs.ndim != 2 or llrs.shape[1] != m:
        raise ValueError(f"expected replica LLRs of shape (B_d, {m}), got {llrs.shape}")
    return llrs.sum(axis=1)


def soft_bits(llrs: np.ndarray, m: int) -> np.ndarray:
    """Extrinsic soft bits tanh(sum of the other M - 1 replica LLRs)."""
    total = combine_replicas(llrs, m)
    return np.tanh(total[:, None] - llrs)


def remodulate(rail_values: np.ndarray, pair: SequencePair, h_hat: complex, m: int,
               n_d: Optional[int] = None) -> np.ndarray:
    """
    h_hat times the payload rebuilt from bit amplitudes (+1 <=> bit 0). rail_values is
    either one amplitude per bit (repeated M times) or one per replica, shape (B_d, M).
    """
    values = np.asarray(rail_values, dtype=np.float64)
    if values.ndim == 1:
        values = np.repeat(values, m)
    n_d = len(pair.scrambler) if n_d is None else n_d
    return h_hat * spread_rails(values.ravel(), pair, n_d)


def interference_cancel(y_d: np.ndarray, h_hat: np.ndarray, contributions: np.ndarray, k: int,
                        n_symbols: Optional[int] = None):
    """
    r_k = conj(h_k) y - sum_{k' != k} conj(h_k) h_k' x_k', and the empirical variance of
    what remains after also removing user k's own estimate.

    contributions holds h_k' x_k' row by row.
    """
    residual = np.asarray(y_d) - contributions.sum(axis=0)
    return _cancel_user(residual, contributions[k], h_hat[k], n_symbols)


def _cancel_user(residual: np.ndarray, own: np.ndarray, h_k: complex, n_symbols: Optional[int]):
    r_k = np.conj(h_k) * (residual + own)
    sigma2 = float(np.var(np.conj(h_k) * residual[:n_symbols]))
    return r_k, sigma2


def residual_power(y_c: np.ndarray, x_t: np.ndarray, h: np.ndarray) -> float:
    diff = y_c - x_t @ h
    return float(np.vdot(diff, diff).real)


def lmmse_reestimate(y_c: np.ndarray, x_t: np.ndarray, sigma2_nip: float) -> LmmseResult:
    """
    LMMSE channel estimates with the decoded symbols as pilots, in the small
    (|decoded| x |decoded|) form (X^H X + sigma2 I)^-1 X^H y_c.
    """
    x_t = np.atleast_2d(np.asarray(x_t, dtype=np.complex128))
    if x_t.shape[0] != len(y_c):
        raise ValueError(f"X has {x_t.shape[0]} rows, y_c has {len(y_c)} samples")
    gram = x_t.conj().T @ x_t + sigma2_nip * np.eye(x_t.shape[1])
    rhs = x_t.conj().T @ y_c
    regularized = False
    try:
        factor = cho_factor(gram)
    except LinAlgError:
        logger.warning("LMMSE Gram matrix is singular; adding diagonal loading")
        gram = gram + LMMSE_REGULARIZATION * np.eye(gram.shape[0])
        factor = cho_factor(gram)
        regularized = True
    return LmmseResult(cho_solve(factor, rhs), regularized)


def nip_gate(y_c: np.ndarray, x_t: np.ndarray, h_new: np.ndarray, nip_before: float) -> bool:
    """Accept re-estimated channels only when they lower ||y_c - X h||^2."""
    if x_t.size == 0:
        return False
    return residual_power(y_c, x_t, h_new) < nip_before


# ---------------------------------------------------------------- detector loop

def _replica_llrs(r_k: np.ndarray, h: complex, sigma2: float, pair: SequencePair,
                  m: int, b_d: int) -> np.ndarray:
    gain = np.abs(h) ** 2
    rails = descramble_payload(r_k, pair) * SQRT2 / gain
    llrs = symbol_llrs(rails, sigma2 / gain ** 2)
    return inverse_permute(llrs, pair).reshape(b_d, m)


def _try_decode(spec: CodeSpec, theta: np.ndarray, known: np.ndarray, preamble: int,
                verify: Optional[MessageCheck] = None):
    llrs = np.concatenate([np.zeros(len(known)), theta])
    result = decode(spec, llrs, frozen_bits_known=known)
    if verify is None:
        if not result.crc_ok:
            return None
    elif not (result.crc_ok or result.corrected) or not verify(preamble, result.info_bits):
        return None
    codeword = encode(spec, result.info_bits)
    if not np.array_equal(codeword.bits[:len(known)], known):
        return None
    return codeword


def mud_decode(y_d: np.ndarray, activity: ActivityEstimate, cfg: MudConfig, fec: CodeSpec,
               layout: PayloadLayout, verify: Optional[MessageCheck] = None) -> MudResult:
    """
    Decode the payloads of every detected preamble. Always stops within cfg.max_iters.

    verify, when given, replaces the decoder's own acceptance: a candidate word (CRC
    pass, or a Hamming single-bit correction) counts only if verify confirms it.
    """
    y_d = np.asarray(y_d, dtype=np.complex128)
    if y_d.shape != (layout.n_payload,):
        raise ValueError(f"y_d must have length {layout.n_payload}, got {y_d.shape}")
    if len(activity.detected) == 0:
        return MudResult(decoded=[], failed=[], status={}, trace=[], iterations=0)

    state = MudState.start(activity, layout)
    m, b_p, b_d = layout.repetition, layout.b_preamble, layout.b_payload
    n_sym = layout.n_symbols
    known = [index_to_bits(int(nu), b_p) for nu in state.preamble_index]
    trace: List[Dict[str, float]] = []

    for t in range(1, cfg.max_iters + 1):
        state.iteration = t
        residual = y_d - state.contributions.sum(axis=0)
        symbols = state.symbols.copy()
        tentative: Dict[int, np.ndarray] = {}

        for k in state.indices(UserStatus.ACTIVE):
            h = state.h_hat[k]
            pair = state.pairs[k]
            r_k, sigma2 = _cancel_user(residual, state.contributions[k], h, n_sym)
            sigma2 = max(sigma2, np.abs(h) ** 4 / MAX_SINR, np.finfo(float).tiny)
            state.sigma2[k] = sigma2

            llrs = _replica_llrs(r_k, h, sigma2, pair, m, b_d)
            sinr_db = estimate_sinr_db(h, sigma2, m, cfg.sinr_estimator)

            codeword = None
            if sinr_db >= cfg.alpha_db:
                codeword = _try_decode(fec, combine_replicas(llrs, m), known[k],
                                       int(state.preamble_index[k]), verify)

            if codeword is not None:
                previous = state.candidates.get(k)
                same = previous is not None and np.array_equal(previous, codeword.bits)
                state.crc_pass_streak[k] = state.crc_pass_streak[k] + 1 if same else 1
                state.candidates[k] = codeword.bits
                tentative[k] = codeword
                rails = np.repeat(1.0 - 2.0 * codeword.bits[b_p:], m)
            else:
                state.crc_pass_streak[k] = 0
                state.candidates.pop(k, None)
                rails = soft_bits(llrs, m).ravel()
            symbols[k] = spread_rails(rails, pair, layout.n_payload)

        state.symbols = symbols
        state.contributions = state.h_hat[:, None] * symbols

        for k, codeword in tentative.items():
            if state.crc_pass_streak[k] >= DECODE_STREAK:
                state.status[k] = UserStatus.DECODED
                state.codewords[k] = codeword.bits
                state.infos[k] = codeword.info_bits

        _reestimate_decoded(y_d, state, n_sym)

        active = state.indices(UserStatus.ACTIVE)
        row = {
            "iteration": t,
            "decoded": len(state.indices(UserStatus.DECODED)),
            "active": len(active),
            "mean_sigma2": float(np.mean(state.sigma2[active])) if active else 0.0,
        }
        trace.append(row)
        logger.debug(f"MUD iteration {t}: decoded={row['decoded']} active={row['active']} "
                     f"mean_sigma2={row['mean_sigma2']:.4e}")
        if not active:
            break

    for k in state.indices(UserStatus.ACTIVE):
        state.status[k] = UserStatus.FAILED

    decoded = [
        DecodedUser(preamble_index=int(state.preamble_index[k]), info_bits=state.infos[k],
                    codeword_bits=state.codewords[k], h_hat=complex(state.h_hat[k]))
        for k in state.indices(UserStatus.DECODED)
    ]
    failed = [int(state.preamble_index[k]) for k in state.indices(UserStatus.FAILED)]
    status = {int(nu): s for nu, s in zip(state.preamble_index, state.status)}
    return MudResult(decoded=decoded, failed=failed, status=status, trace=trace, iterations=state.iteration)


def _reestimate_decoded(y_d: np.ndarray, state: MudState, n_sym: int) -> None:
    decoded = state.indices(UserStatus.DECODED)
    if not decoded:
        return
    others = [k for k in range(len(state.status)) if state.status[k] != UserStatus.DECODED]
    y_c = y_d[:n_sym] - state.contributions[others, :n_sym].sum(axis=0)
    x_t = state.symbols[decoded, :n_sym].T
    nip_before = residual_power(y_c, x_t, state.h_hat[decoded])
    estimate = lmmse_reestimate(y_c, x_t, nip_before / n_sym)
    if nip_gate(y_c, x_t, estimate.estimates, nip_before):
        state.h_hat[decoded] = estimate.estimates
        state.contributions[decoded] = state.h_hat[decoded, None] * state.symbols[decoded]
