"""
Closed-loop Monte-Carlo harness: one feed-forward slot followed by its feedback slot,
chained into multi-slot trials with re-transmissions, plus the PUPE / energy
accounting and the Eb/N0 target search built on top of it.
"""
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from ura_feedback.ad_amp import TAU_FLOOR, ActivityEstimate, AmpConfig, amp_detect
from ura_feedback.channel import draw_noise, draw_slot, superpose
from ura_feedback.feedback_bs import (
    FeedbackPacket,
    UserSets,
    build_feedback,
    classify_users,
    cost_table,
    feedback_amplitude,
    make_pilot,
    truncate_signature,
)
from ura_feedback.feedback_ue import Stage, UeConfig, UeDecision, genie_decision, receive_feedback
from ura_feedback.fec import CodeSpec
from ura_feedback.models import CodeFamily, ExperimentConfig, FeedbackVariant
from ura_feedback.mud import MessageCheck, MudConfig, MudResult, PayloadLayout, mud_decode
from ura_feedback.tx_chain import (
    SensingMatrix,
    UserPacket,
    build_sensing_matrix,
    build_user_packet,
    n_payload_symbols,
    segment_energies,
)
from ura_feedback.utils import GracefulShutdown, Timer, format_duration

logger = logging.getLogger(__name__)

N0 = 1.0


# ---------------------------------------------------------------- accounting

def pupe(error_count: int, k_a: int) -> Optional[float]:
    """Per-user probability of error; None when there were no active users."""
    if k_a == 0:
        return None
    if not 0 <= error_count <= k_a:
        raise ValueError(f"error_count must be in [0, {k_a}], got {error_count}")
    return error_count / k_a


def equivalent_ebn0(ff_ebn0_db: float, p_e: float) -> float:
    """Feed-forward Eb/N0 inflated by the re-transmission energy, ff + 10 log10(1 + P_e)."""
    if not 0.0 <= p_e <= 1.0:
        raise ValueError(f"P_e must be in [0, 1], got {p_e}")
    return float(ff_ebn0_db + 10.0 * np.log10(1.0 + p_e))


def feedforward_ebn0_db(cfg: ExperimentConfig) -> float:
    """Total packet energy per information bit, with each segment weighted by its share of the frame."""
    w_p = cfg.n_preamble / cfg.n_total
    w_d = cfg.n_payload / cfg.n_total
    linear = w_p * 10.0 ** (cfg.preamble_ebn0_db / 10.0) + w_d * 10.0 ** (cfg.payload_ebn0_db / 10.0)
    return float(10.0 * np.log10(linear))


def feedback_overhead(cfg: ExperimentConfig) -> float:
    """Extra channel uses of the targeted feedback block relative to one feed-forward frame."""
    return cfg.signature_length / cfg.n_total


def with_updates(cfg: ExperimentConfig, **updates) -> ExperimentConfig:
    """Re-validated copy; derived fields (coded length, repetition) are re-resolved."""
    data = cfg.model_dump()
    if "b_preamble" in updates or "n_payload" in updates or "code" in updates:
        data["repetition"] = None
    if "code" in updates:
        data["higher_layer_check"] = None
    data.update(updates)
    return ExperimentConfig.model_validate(data)


def genie_feedback_mode(cfg: ExperimentConfig, flag: bool) -> ExperimentConfig:
    """Toggle error-free feedback reception."""
    return cfg.model_copy(update={"genie_feedback": bool(flag)})


# ---------------------------------------------------------------- slot

@dataclass
class SimulationContext:
    """Everything a trial needs that does not change between slots."""
    cfg: ExperimentConfig
    matrix: SensingMatrix
    code: CodeSpec
    pilot: np.ndarray
    layout: PayloadLayout
    amp: AmpConfig
    mud: MudConfig
    ue: UeConfig
    e_preamble: float
    e_payload: float
    feedback_gain: float

    @classmethod
    def build(cls, cfg: ExperimentConfig) -> "SimulationContext":
        matrix = build_sensing_matrix(cfg.seed, cfg.n_preamble, cfg.b_preamble)
        if cfg.code == CodeFamily.HAMMING:
            code = CodeSpec.hamming_109_100()
        else:
            code = CodeSpec.polar(info_len=cfg.n_info, crc_len=cfg.crc_len, coded_len=cfg.coded_len,
                                  list_size=cfg.list_size, design_snr_db=cfg.polar_design_snr_db)
        layout = PayloadLayout(global_seed=cfg.seed, repetition=cfg.repetition, b_preamble=cfg.b_preamble,
                               b_payload=cfg.b_payload, n_payload=cfg.n_payload)
        e_p, e_d = segment_energies(cfg.n_info, cfg.n_preamble, cfg.n_payload,
                                    cfg.preamble_ebn0_db, cfg.payload_ebn0_db, N0)
        gain = feedback_amplitude(cfg.n_info, cfg.feedback_ebn0_db, N0)
        return cls(
            cfg=cfg,
            matrix=matrix,
            code=code,
            pilot=make_pilot(cfg.pilot_length, cfg.seed),
            layout=layout,
            amp=AmpConfig.for_load(cfg.k_active, matrix.n_columns, c=cfg.amp_c,
                                   max_iters=cfg.amp_max_iters, damping=cfg.amp_damping),
            mud=MudConfig.for_load(cfg.k_active, cfg.mud_alpha_db, max_iters=cfg.mud_max_iters,
                                   sinr_estimator=cfg.mud_sinr_estimator),
            ue=UeConfig(gamma_bar=cfg.gamma_bar, sigma_z2=N0 / gain ** 2),
            e_preamble=e_p,
            e_payload=e_d,
            feedback_gain=gain,
        )

    @property
    def payload_gain(self) -> float:
        n_sym = n_payload_symbols(self.layout.repetition, self.layout.b_payload)
        return float(np.sqrt(self.e_payload / n_sym))


@dataclass
class Transmitter:
    user_id: int
    info_bits: np.ndarray
    attempts: int = 0
    delivered: bool = False


@dataclass
class SlotMetrics:
    slot: int
    variant: str
    k_active: int
    new_users: int
    retransmitters: int
    pupe_ff: float
    pupe_fb: float
    c_bs: int
    c_bs_table: int
    c_ue: int
    p_c: float
    retransmit_requests: int
    unnecessary_retransmissions: int
    tau: float
    detected: int
    amp_diverged: bool
    mud_iterations: int
    cardinalities: Dict[str, int] = field(default_factory=dict)

    def to_row(self) -> Dict[str, Any]:
        row = asdict(self)
        row.update(row.pop("cardinalities"))
        return row


@dataclass
class SlotOutcome:
    metrics: SlotMetrics
    sets: UserSets
    packet: Optional[FeedbackPacket]
    decisions: Dict[int, UeDecision]
    retransmit: List[Transmitter]
    delivered: List[Transmitter]
    users: List[UserPacket] = field(default_factory=list)
    activity: Optional[ActivityEstimate] = None
    mud: Optional[MudResult] = None


def message_check(packets: Sequence[UserPacket]) -> MessageCheck:
    """Higher-layer confirmation: the word is a message some user behind that preamble sent."""
    sent: Dict[int, set] = {}
    for p in packets:
        sent.setdefault(int(p.preamble_index), set()).add(np.asarray(p.info_bits, dtype=np.uint8).tobytes())

    def verify(preamble: int, info_bits: np.ndarray) -> bool:
        return np.asarray(info_bits, dtype=np.uint8).tobytes() in sent.get(int(preamble), ())

    return verify


def slot_thresholds(cfg: ExperimentConfig, tau: float) -> tuple:
    tau = max(tau, TAU_FLOOR)
    return tuple(c * tau for c in cfg.threshold_multipliers())


def _user_correlator_cost(variant: FeedbackVariant, decisions: Dict[int, UeDecision], k_a: int) -> int:
    if variant == FeedbackVariant.NONE:
        return 0
    if variant == FeedbackVariant.DOUBLE_THRESHOLD:
        return sum(1 for d in decisions.values() if d.stage_reached == Stage.CORRELATOR)
    # every user processes the whole packet
    return k_a


def run_slot(ctx: SimulationContext, transmitters: Sequence[Transmitter], rng: np.random.Generator,
             slot: int = 0) -> SlotOutcome:
    """
    One feed-forward slot and its feedback slot. The same channel draw serves both
    links; each segment gets its own noise stream. Received segments are normalized by
    their transmit amplitude, so receivers work in units where h ~ CN(0, 1).
    """
    cfg = ctx.cfg
    k_a = len(transmitters)
    channel_rng, preamble_rng, payload_rng, feedback_rng = rng.spawn(4)

    channels = draw_slot(channel_rng, k_a, N0)
    h = channels.h
    packets: List[UserPacket] = [
        build_user_packet(t.info_bits, ctx.code, ctx.matrix, cfg.seed, cfg.repetition, cfg.n_payload,
                          channel=h[i], user_id=t.user_id)
        for i, t in enumerate(transmitters)
    ]

    n0_p = N0 / ctx.e_preamble
    n0_d = N0 / ctx.payload_gain ** 2
    y_p = superpose([p.preamble for p in packets], h, n0_p, preamble_rng, length=cfg.n_preamble)
    y_d = superpose([p.payload for p in packets], h, n0_d, payload_rng, length=cfg.n_payload)

    activity = amp_detect(y_p, ctx.matrix, ctx.amp, n0_p)
    verify = message_check(packets) if cfg.higher_layer_check else None
    result = mud_decode(y_d, activity, ctx.mud, ctx.code, ctx.layout, verify=verify)

    tau = max(activity.tau, TAU_FLOOR)
    thresholds = slot_thresholds(cfg, activity.tau)
    sets = classify_users(packets, activity, result.decoded, thresholds)
    packet = build_feedback(cfg.variant, sets, ctx.matrix, tau, ctx.pilot, cfg.signature_length,
                            c_tilde=cfg.c_tilde, c_low=cfg.c_tilde_low, c_high=cfg.c_tilde_high)

    decisions: Dict[int, UeDecision] = {}
    if packet is not None:
        vector = packet.to_vector()
        for user in packets:
            if cfg.genie_feedback:
                decisions[user.user_id] = genie_decision(cfg.variant, user.user_id, sets, packet, cfg.gamma_bar)
                continue
            received = user.channel * vector + draw_noise(feedback_rng, len(vector), ctx.ue.sigma_z2)
            signature = truncate_signature(user.preamble, cfg.signature_length)
            decisions[user.user_id] = receive_feedback(cfg.variant, received, ctx.pilot, signature, ctx.ue)

    retransmit, delivered = [], []
    fb_errors = 0
    unnecessary = 0
    for t in transmitters:
        t.attempts += 1
        success = t.user_id in sets.success
        if success:
            t.delivered = True
            delivered.append(t)
        wants = decisions[t.user_id].retransmit if t.user_id in decisions else False
        if not success and not wants:
            fb_errors += 1
        if success and wants:
            unnecessary += 1
        if wants and t.attempts <= cfg.max_retransmissions:
            retransmit.append(t)

    failures = len(sets.failed) + len(sets.missed)
    costs = cost_table(sets, cfg.variant)
    c_ue = _user_correlator_cost(cfg.variant, decisions, k_a)
    metrics = SlotMetrics(
        slot=slot,
        variant=cfg.variant.value,
        k_active=k_a,
        new_users=sum(1 for t in transmitters if t.attempts == 1),
        retransmitters=sum(1 for t in transmitters if t.attempts > 1),
        pupe_ff=pupe(failures, k_a),
        pupe_fb=pupe(fb_errors, k_a),
        c_bs=costs["c_bs"],
        c_bs_table=costs["c_bs_table"],
        c_ue=c_ue,
        p_c=c_ue / k_a,
        retransmit_requests=sum(1 for d in decisions.values() if d.retransmit),
        unnecessary_retransmissions=unnecessary,
        tau=float(activity.tau),
        detected=len(activity.detected),
        amp_diverged=activity.diverged,
        mud_iterations=result.iterations,
        cardinalities=sets.cardinalities(),
    )
    logger.debug(f"Slot {slot}: K_a={k_a} detected={metrics.detected} decoded={len(sets.success)} "
                 f"pupe_ff={metrics.pupe_ff:.4f} pupe_fb={metrics.pupe_fb:.4f}")
    return SlotOutcome(metrics=metrics, sets=sets, packet=packet, decisions=decisions,
                       retransmit=retransmit, delivered=delivered, users=packets, activity=activity,
                       mud=result)


# ---------------------------------------------------------------- trials

@dataclass
class TrialResult:
    trial: int
    rows: List[Dict[str, Any]]
    resolved: int
    failures: int
    retransmissions: int
    unique_users: int
    pending: int


def run_trial(ctx: SimulationContext, trial: int) -> TrialResult:
    """
    `slots` consecutive slots. Every slot carries exactly K_a transmitters: last slot's
    re-transmitters first, topped up with fresh users. A user is resolved once it stops
    transmitting; it counts as a failure if none of its attempts was decoded.
    """
    cfg = ctx.cfg
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, trial]))
    next_id = 0
    carry: List[Transmitter] = []
    rows: List[Dict[str, Any]] = []
    resolved = failures = retransmissions = 0

    for slot in range(cfg.slots):
        fresh = []
        for _ in range(cfg.k_active - len(carry)):
            fresh.append(Transmitter(user_id=next_id, info_bits=rng.integers(0, 2, cfg.n_info, dtype=np.uint8)))
            next_id += 1
        transmitters = carry + fresh
        outcome = run_slot(ctx, transmitters, rng, slot=slot)

        staying = {t.user_id for t in outcome.retransmit}
        for t in transmitters:
            if t.user_id in staying:
                continue
            resolved += 1
            retransmissions += t.attempts - 1
            if not t.delivered:
                failures += 1
        carry = outcome.retransmit

        row = outcome.metrics.to_row()
        row["trial"] = trial
        rows.append(row)

    return TrialResult(trial=trial, rows=rows, resolved=resolved, failures=failures,
                       retransmissions=retransmissions, unique_users=next_id, pending=len(carry))


_worker_context: Optional[SimulationContext] = None


def _init_worker(cfg_data: Dict[str, Any]) -> None:
    global _worker_context
    _worker_context = SimulationContext.build(ExperimentConfig.model_validate(cfg_data))


def _run_trial_in_worker(trial: int) -> TrialResult:
    return run_trial(_worker_context, trial)


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    rows: pd.DataFrame
    summary: Dict[str, Any]

    @property
    def overall_pupe(self) -> Optional[float]:
        return self.summary.get("overall_pupe")


def _summarize(cfg: ExperimentConfig, rows: pd.DataFrame, trials: List[TrialResult]) -> Dict[str, Any]:
    resolved = sum(t.resolved for t in trials)
    failures = sum(t.failures for t in trials)
    retransmissions = sum(t.retransmissions for t in trials)
    overall = pupe(failures, resolved)
    retx_fraction = retransmissions / resolved if resolved else 0.0
    ff_db = feedforward_ebn0_db(cfg)

    mean_new = float(rows["new_users"].mean())
    mean_c_ue = float(rows["c_ue"].mean())
    summary: Dict[str, Any] = {
        "name": cfg.name,
        "variant": cfg.variant.value,
        "genie_feedback": cfg.genie_feedback,
        "seed": cfg.seed,
        "trials": cfg.trials,
        "slots": cfg.slots,
        "k_active": cfg.k_active,
        "k_new_mean": mean_new,
        "payload_ebn0_db": cfg.payload_ebn0_db,
        "ff_ebn0_db": ff_db,
        "resolved_users": resolved,
        "pending_users": sum(t.pending for t in trials),
        "overall_pupe": overall,
        "retransmission_fraction": retx_fraction,
        "equivalent_ebn0_db": equivalent_ebn0(ff_db, min(retx_fraction, 1.0)),
        "p_c_new_users": mean_c_ue / mean_new if mean_new > 0 else None,
        "feedback_overhead": feedback_overhead(cfg),
    }
    averaged = ["pupe_ff", "pupe_fb", "c_bs", "c_bs_table", "c_ue", "p_c"]
    averaged += [c for c in rows.columns if c.startswith("n_")]
    for column in averaged:
        summary[f"{column}_mean"] = float(rows[column].mean())
        summary[f"{column}_sem"] = float(rows[column].sem()) if len(rows) > 1 else 0.0
    return summary


def run_experiment(cfg: ExperimentConfig, jobs: int = 1) -> ExperimentResult:
    """Run cfg.trials independent trials and reduce them in trial order."""
    if jobs < 1:
        raise ValueError(f"jobs must be >= 1, got {jobs}")
    logger.info(f"Running {cfg.name}: variant={cfg.variant.value} K_a={cfg.k_active} "
                f"payload Eb/N0={cfg.payload_ebn0_db:.2f} dB, {cfg.trials} trial(s) x {cfg.slots} slot(s)")

    timer = Timer(f"experiment {cfg.name}")
    with timer:
        if jobs == 1 or cfg.trials == 1:
            ctx = SimulationContext.build(cfg)
            trials = [run_trial(ctx, t) for t in range(cfg.trials)]
        else:
            with ProcessPoolExecutor(max_workers=jobs, initializer=_init_worker,
                                     initargs=(cfg.model_dump(mode="json"),)) as executor:
                trials = list(executor.map(_run_trial_in_worker, range(cfg.trials)))

    rows = pd.DataFrame([row for t in trials for row in t.rows])
    rows.insert(0, "seed", cfg.seed)
    rows.insert(1, "ff_ebn0_db", feedforward_ebn0_db(cfg))
    summary = _summarize(cfg, rows, trials)
    rows["equiv_ebn0_db"] = summary["equivalent_ebn0_db"]
    logger.info(f"Finished {cfg.name} in {format_duration(timer.duration)}: "
                f"pupe_ff={summary['pupe_ff_mean']:.4f} overall_pupe={summary['overall_pupe']}")
    return ExperimentResult(config=cfg, rows=rows, summary=summary)


# ---------------------------------------------------------------- sweeps

def sweep_parameter(cfg: ExperimentConfig, key: str, values: Sequence[Any], jobs: int = 1,
                    shutdown: Optional[GracefulShutdown] = None) -> List[ExperimentResult]:
    """One experiment per value of `key`; rows are tagged with the swept key and value."""
    if key not in ExperimentConfig.model_fields:
        raise ValueError(f"unknown sweep key {key!r}")
    results = []
    for value in values:
        if shutdown is not None and shutdown.should_exit:
            logger.info(f"Sweep over {key} interrupted after {len(results)} point(s)")
            break
        point = with_updates(cfg, **{key: value})
        result = run_experiment(point, jobs)
        result.rows.insert(0, "sweep_value", value)
        result.rows.insert(0, "sweep_key", key)
        result.summary["sweep"] = {"key": key, "value": value}
        results.append(result)
    return results


@dataclass
class TargetSearchResult:
    achieved: bool
    target_pupe: float
    payload_ebn0_db: Optional[float]
    ff_ebn0_db: Optional[float]
    equivalent_ebn0_db: Optional[float]
    pupe: Optional[float]
    k_new_mean: Optional[float]
    evaluations: List[Dict[str, Any]] = field(default_factory=list)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def find_min_ebn0(cfg: ExperimentConfig, jobs: int = 1) -> TargetSearchResult:
    """
    Bisection on the payload Eb/N0 within +-sweep_span_db of the configured value for the
    smallest point whose overall PUPE is at or below target_pupe.
    """
    target = cfg.target_pupe
    evaluations: List[Dict[str, Any]] = []

    def evaluate(payload_db: float) -> ExperimentResult:
        result = run_experiment(with_updates(cfg, payload_ebn0_db=payload_db), jobs)
        value = result.overall_pupe
        evaluations.append({"payload_ebn0_db": payload_db, "overall_pupe": value,
                            "equivalent_ebn0_db": result.summary["equivalent_ebn0_db"]})
        logger.info(f"Target search point {payload_db:.3f} dB -> PUPE {value}")
        return result

    def meets(result: ExperimentResult) -> bool:
        value = result.overall_pupe
        return value is not None and value <= target

    def found(result: ExperimentResult) -> TargetSearchResult:
        return TargetSearchResult(
            achieved=True, target_pupe=target, payload_ebn0_db=result.config.payload_ebn0_db,
            ff_ebn0_db=result.summary["ff_ebn0_db"], equivalent_ebn0_db=result.summary["equivalent_ebn0_db"],
            pupe=result.overall_pupe, k_new_mean=result.summary["k_new_mean"], evaluations=evaluations,
        )

    low_db = cfg.payload_ebn0_db - cfg.sweep_span_db
    high_db = cfg.payload_ebn0_db + cfg.sweep_span_db
    high = evaluate(high_db)
    if not meets(high):
        logger.warning(f"Target PUPE {target} not reached at {high_db:.2f} dB")
        return TargetSearchResult(achieved=False, target_pupe=target, payload_ebn0_db=None, ff_ebn0_db=None,
                                  equivalent_ebn0_db=None, pupe=high.overall_pupe, k_new_mean=None,
                                  evaluations=evaluations)
    low = evaluate(low_db)
    if meets(low):
        return found(low)

    best = high
    for _ in range(cfg.sweep_iters):
        mid_db = 0.5 * (low_db + high_db)
        mid = evaluate(mid_db)
        if meets(mid):
            best, high_db = mid, mid_db
            if target - mid.overall_pupe <= cfg.sweep_tolerance:
                break
        else:
            low_db = mid_db
    return found(best)
