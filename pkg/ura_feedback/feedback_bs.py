"""
Base-station side of the feedback link: classify the slot's users into success /
failed / missed sets refined by channel-magnitude thresholds, and build the
broadcast feedback packet for each feedback variant.
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, FrozenSet, Hashable, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from ura_feedback.ad_amp import ActivityEstimate
from ura_feedback.models import FeedbackVariant
from ura_feedback.mud import DecodedUser
from ura_feedback.tx_chain import SensingMatrix, UserPacket

logger = logging.getLogger(__name__)

PILOT_STREAM = 0x50494C4F54


@dataclass(frozen=True)
class UserSets:
    """
    Set membership of every active user (by user id). With one threshold the refinement
    is above (>=) / below; with two thresholds users between lower (inclusive) and
    upper (exclusive) go to the *_between sets, "above" means >= upper and "below"
    means < lower.
    """
    success: FrozenSet[Hashable]
    failed: FrozenSet[Hashable]
    missed: FrozenSet[Hashable]
    success_above: FrozenSet[Hashable]
    success_below: FrozenSet[Hashable]
    failed_above: FrozenSet[Hashable]
    failed_below: FrozenSet[Hashable]
    missed_above: FrozenSet[Hashable]
    missed_below: FrozenSet[Hashable]
    success_between: FrozenSet[Hashable] = frozenset()
    failed_between: FrozenSet[Hashable] = frozenset()
    missed_between: FrozenSet[Hashable] = frozenset()
    thresholds: Tuple[float, ...] = ()
    preamble_index: Mapping[Hashable, int] = field(default_factory=dict, hash=False, compare=False)
    magnitude: Mapping[Hashable, float] = field(default_factory=dict, hash=False, compare=False)

    @property
    def k_active(self) -> int:
        return len(self.success) + len(self.failed) + len(self.missed)

    def cardinalities(self) -> Dict[str, int]:
        names = ("success", "failed", "missed", "success_above", "success_below", "failed_above",
                 "failed_below", "missed_above", "missed_below", "success_between",
                 "failed_between", "missed_between")
        return {f"n_{name}": len(getattr(self, name)) for name in names}


@dataclass
class FeedbackPacket:
    variant: FeedbackVariant
    pilot: Optional[np.ndarray]
    threshold_blocks: List[np.ndarray]
    targeted: np.ndarray
    signature_length: int
    thresholds: Tuple[float, ...]
    included_user_count: int
    targeted_users: FrozenSet[Hashable] = frozenset()
    targeted_preambles: FrozenSet[int] = frozenset()

    @property
    def pilot_length(self) -> int:
        return 0 if self.pilot is None else len(self.pilot)

    def to_vector(self) -> np.ndarray:
        """Flat broadcast vector [p, threshold blocks..., x_bar]."""
        parts = ([] if self.pilot is None else [self.pilot]) + list(self.threshold_blocks) + [self.targeted]
        return np.concatenate(parts)

    def header(self) -> Dict[str, object]:
        return {
            "variant": self.variant.value,
            "pilot_length": self.pilot_length,
            "signature_length": self.signature_length,
            "threshold_count": len(self.threshold_blocks),
        }


def make_pilot(length: int, seed: int) -> np.ndarray:
    """Unit-norm pseudo-random pilot shared by the BS and every user."""
    rng = np.random.default_rng([seed, PILOT_STREAM])
    p = rng.standard_normal(length) + 1j * rng.standard_normal(length)
    return p / np.linalg.norm(p)


def truncate_signature(a_k: np.ndarray, length: int) -> np.ndarray:
    """First `length` entries of a preamble, renormalized to unit norm."""
    if not 1 <= length <= len(a_k):
        raise ValueError(f"signature length must be in [1, {len(a_k)}], got {length}")
    head = np.asarray(a_k[:length], dtype=np.complex128)
    return head / np.linalg.norm(head)


def classify_users(truth: Sequence[UserPacket], activity: ActivityEstimate,
                   decoded: Iterable[DecodedUser], thresholds: Sequence[float]) -> UserSets:
    """
    Score the slot against ground truth and split each base set by channel magnitude.

    A decoded (preamble, message) pair credits at most one user. Detected users are
    compared through the AD estimate |h_hat| of their preamble, missed users through
    their true |h|.
    """
    thresholds = tuple(float(t) for t in thresholds)
    if not thresholds or any(t <= 0 for t in thresholds):
        raise ValueError(f"thresholds must be positive, got {thresholds}")
    if len(thresholds) == 2 and not thresholds[0] < thresholds[1]:
        raise ValueError(f"lower threshold must be below the upper one, got {thresholds}")
    if len(thresholds) > 2:
        raise ValueError("at most two thresholds are supported")

    estimates = activity.estimates()
    available: Dict[int, List[np.ndarray]] = {}
    for d in decoded:
        available.setdefault(int(d.preamble_index), []).append(np.asarray(d.info_bits))

    success, failed, missed = set(), set(), set()
    preamble_index: Dict[Hashable, int] = {}
    magnitude: Dict[Hashable, float] = {}
    for user in truth:
        nu = int(user.preamble_index)
        preamble_index[user.user_id] = nu
        if nu not in estimates:
            missed.add(user.user_id)
            magnitude[user.user_id] = float(np.abs(user.channel))
            continue
        magnitude[user.user_id] = float(np.abs(estimates[nu]))
        candidates = available.get(nu, [])
        match = next((i for i, bits in enumerate(candidates) if np.array_equal(bits, user.info_bits)), None)
        if match is None:
            failed.add(user.user_id)
        else:
            candidates.pop(match)
            success.add(user.user_id)

    def split(group):
        if len(thresholds) == 1:
            above = frozenset(u for u in group if magnitude[u] >= thresholds[0])
            return above, frozenset(group) - above, frozenset()
        lower, upper = thresholds
        above = frozenset(u for u in group if magnitude[u] >= upper)
        below = frozenset(u for u in group if magnitude[u] < lower)
        return above, below, frozenset(group) - above - below

    s_hi, s_lo, s_mid = split(success)
    f_hi, f_lo, f_mid = split(failed)
    m_hi, m_lo, m_mid = split(missed)
    return UserSets(
        success=frozenset(success), failed=frozenset(failed), missed=frozenset(missed),
        success_above=s_hi, success_below=s_lo, failed_above=f_hi, failed_below=f_lo,
        missed_above=m_hi, missed_below=m_lo, success_between=s_mid, failed_between=f_mid,
        missed_between=m_mid, thresholds=thresholds, preamble_index=preamble_index, magnitude=magnitude,
    )


def _superpose_signatures(users: Iterable[Hashable], sets: UserSets, matrix: SensingMatrix,
                          length: int) -> Tuple[np.ndarray, FrozenSet[int]]:
    preambles = sorted({sets.preamble_index[u] for u in users})
    x_bar = np.zeros(length, dtype=np.complex128)
    for nu in preambles:
        x_bar += truncate_signature(matrix.column(nu), length)
    return x_bar, frozenset(preambles)


def _packet(variant, sets, matrix, length, users, pilot, blocks, thresholds) -> FeedbackPacket:
    users = frozenset(users)
    x_bar, preambles = _superpose_signatures(users, sets, matrix, length)
    return FeedbackPacket(variant=variant, pilot=pilot, threshold_blocks=blocks, targeted=x_bar,
                          signature_length=length, thresholds=thresholds,
                          included_user_count=len(users), targeted_users=users,
                          targeted_preambles=preambles)


def build_positive(sets: UserSets, matrix: SensingMatrix, length: int,
                   pilot: Optional[np.ndarray] = None) -> FeedbackPacket:
    """Acknowledge every successful user."""
    return _packet(FeedbackVariant.POSITIVE_ONLY, sets, matrix, length, sets.success, pilot, [], ())


def build_negative(sets: UserSets, matrix: SensingMatrix, length: int,
                   pilot: Optional[np.ndarray] = None) -> FeedbackPacket:
    """Target every detected-but-undecoded user."""
    return _packet(FeedbackVariant.NEGATIVE_ONLY, sets, matrix, length, sets.failed, pilot, [], ())


def build_single(sets: UserSets, matrix: SensingMatrix, c_tilde: float, tau: float,
                 pilot: np.ndarray, length: int) -> FeedbackPacket:
    """[p, c~ tau p, x_bar] with x_bar over failed-above and success-below users."""
    threshold = c_tilde * tau
    users = sets.failed_above | sets.success_below
    return _packet(FeedbackVariant.SINGLE_THRESHOLD, sets, matrix, length, users, pilot,
                   [threshold * pilot], (threshold,))


def build_double(sets: UserSets, matrix: SensingMatrix, c_low: float, c_high: float, tau: float,
                 pilot: np.ndarray, length: int) -> FeedbackPacket:
    """[p, c~2 tau p, c~1 tau p, x_bar] with x_bar over successful users between the thresholds."""
    if not c_low < c_high:
        raise ValueError(f"c_low ({c_low}) must be smaller than c_high ({c_high})")
    upper, lower = c_high * tau, c_low * tau
    packet = _packet(FeedbackVariant.DOUBLE_THRESHOLD, sets, matrix, length, sets.success_between, pilot,
                     [upper * pilot, lower * pilot], (upper, lower))
    costs = cost_table(sets, FeedbackVariant.DOUBLE_THRESHOLD)
    logger.debug(f"Double-threshold BS cost {costs['c_bs']} (table form {costs['c_bs_table']})")
    return packet


def cost_table(sets: UserSets, variant: FeedbackVariant) -> Dict[str, int]:
    """BS cost (signatures in x_bar) and, for two thresholds, the tabulated alternative."""
    if variant == FeedbackVariant.POSITIVE_ONLY:
        c_bs = len(sets.success)
        return {"c_bs": c_bs, "c_bs_table": c_bs}
    if variant == FeedbackVariant.NEGATIVE_ONLY:
        c_bs = len(sets.failed)
        return {"c_bs": c_bs, "c_bs_table": c_bs}
    if variant == FeedbackVariant.SINGLE_THRESHOLD:
        c_bs = len(sets.success_below) + len(sets.failed_above)
        return {"c_bs": c_bs, "c_bs_table": c_bs}
    if variant == FeedbackVariant.DOUBLE_THRESHOLD:
        return {"c_bs": len(sets.success_between),
                "c_bs_table": len(sets.success_between) + len(sets.failed_between)}
    return {"c_bs": 0, "c_bs_table": 0}


def build_feedback(variant: FeedbackVariant, sets: UserSets, matrix: SensingMatrix, tau: float,
                   pilot: np.ndarray, length: int, c_tilde: float = 4.0, c_low: float = 4.0,
                   c_high: float = 12.0) -> Optional[FeedbackPacket]:
    """
    Packet for one slot, or None for feed-forward only operation. Baseline packets are
    framed with the common pilot so users can normalize their correlator output.
    """
    if variant == FeedbackVariant.NONE:
        return None
    if variant == FeedbackVariant.POSITIVE_ONLY:
        return build_positive(sets, matrix, length, pilot)
    if variant == FeedbackVariant.NEGATIVE_ONLY:
        return build_negative(sets, matrix, length, pilot)
    if variant == FeedbackVariant.SINGLE_THRESHOLD:
        return build_single(sets, matrix, c_tilde, tau, pilot, length)
    return build_double(sets, matrix, c_low, c_high, tau, pilot, length)


def feedback_amplitude(n_info: int, feedback_ebn0_db: float, n0: float = 1.0) -> float:
    """Amplitude giving each unit-norm block the energy of n_info bits at the feedback Eb/N0."""
    return float(np.sqrt(n_info * n0 * 10.0 ** (feedback_ebn0_db / 10.0)))
