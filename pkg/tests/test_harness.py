from types import SimpleNamespace

import numpy as np
import pandas as pd
import pytest
from pandas.testing import assert_frame_equal

from ura_feedback import harness
from ura_feedback.harness import (
    ExperimentResult,
    SimulationContext,
    Transmitter,
    equivalent_ebn0,
    feedback_overhead,
    find_min_ebn0,
    genie_feedback_mode,
    message_check,
    pupe,
    run_experiment,
    run_slot,
    slot_thresholds,
    sweep_parameter,
    with_updates,
)
from ura_feedback.models import FeedbackVariant

# Lossy link: preamble misses and payload failures both show up within a handful of users.
LOSSY = dict(k_active=6, preamble_ebn0_db=8.0, payload_ebn0_db=2.0, genie_feedback=True)


def transmitters(count, n_info, seed=99, attempts=0):
    rng = np.random.default_rng(seed)
    return [Transmitter(user_id=i, info_bits=rng.integers(0, 2, n_info, dtype=np.uint8), attempts=attempts)
            for i in range(count)]


def slot_with(cfg, seed=7, attempts=0):
    ctx = SimulationContext.build(cfg)
    return run_slot(ctx, transmitters(cfg.k_active, cfg.n_info, attempts=attempts), np.random.default_rng(seed))


class TestAccounting:
    def test_pupe(self):
        assert pupe(3, 300) == pytest.approx(0.01)
        assert pupe(0, 10) == 0.0
        assert pupe(10, 10) == 1.0
        assert pupe(0, 0) is None
        with pytest.raises(ValueError):
            pupe(11, 10)

    def test_equivalent_ebn0(self):
        assert equivalent_ebn0(2.0, 0.0) == pytest.approx(2.0)
        assert equivalent_ebn0(2.0, 1.0) == pytest.approx(2.0 + 3.0103, abs=1e-4)
        assert equivalent_ebn0(0.0, 0.05) == pytest.approx(0.2119, abs=1e-4)
        with pytest.raises(ValueError):
            equivalent_ebn0(0.0, 1.5)

    def test_feedback_overhead(self, small_config):
        cfg = small_config(signature_fraction=0.1)
        assert cfg.signature_length == 30
        assert feedback_overhead(cfg) == pytest.approx(30 / 900)

    def test_with_updates_revalidates(self, small_config):
        cfg = small_config()
        assert with_updates(cfg, payload_ebn0_db=5.0).repetition == cfg.repetition
        assert with_updates(cfg, b_preamble=8).repetition == (2 * 600) // 120
        with pytest.raises(ValueError):
            with_updates(cfg, k_active=0)

    def test_genie_mode_toggle(self, small_config):
        assert genie_feedback_mode(small_config(), True).genie_feedback
        assert not genie_feedback_mode(small_config(genie_feedback=True), False).genie_feedback

    def test_higher_layer_check_follows_code(self, small_config):
        cfg = small_config()
        assert cfg.higher_layer_check is False
        hamming = with_updates(cfg, code="hamming", n_info=100, crc_len=0, coded_len=109)
        assert hamming.higher_layer_check is True
        assert with_updates(hamming, code="polar", n_info=32, crc_len=11, coded_len=128).higher_layer_check is False
        assert small_config(higher_layer_check=True).higher_layer_check is True

    def test_message_check(self):
        packets = [SimpleNamespace(preamble_index=5, info_bits=np.array([1, 0, 1], dtype=np.uint8)),
                   SimpleNamespace(preamble_index=5, info_bits=np.array([0, 0, 1], dtype=np.uint8)),
                   SimpleNamespace(preamble_index=9, info_bits=np.array([1, 1, 1], dtype=np.uint8))]
        verify = message_check(packets)
        assert verify(5, np.array([1, 0, 1]))
        assert verify(5, np.array([0, 0, 1]))
        assert not verify(5, np.array([1, 1, 1]))
        assert not verify(7, np.array([1, 0, 1]))

    def test_thresholds_follow_variant(self, small_config):
        assert slot_thresholds(small_config(c_tilde=4.0), 0.5) == (2.0,)
        double = small_config(variant="double_threshold", c_tilde_low=2.0, c_tilde_high=6.0)
        assert slot_thresholds(double, 0.5) == (1.0, 3.0)
        assert slot_thresholds(small_config(), 0.0)[0] > 0


class TestRunSlot:
    def test_clean_link_needs_no_retransmissions(self, small_config):
        clean = 0
        for seed in range(5):
            outcome = slot_with(small_config(), seed=seed)
            clean += outcome.metrics.pupe_ff == 0 and not outcome.retransmit
        assert clean >= 4

    def test_same_channel_draw_serves_both_links(self, small_config):
        outcome = slot_with(small_config(variant="positive_only", genie_feedback=False))
        assert set(outcome.decisions) == {0, 1}
        assert outcome.metrics.c_ue == 2

    def test_positive_only_genie_never_adds_errors(self, small_config):
        outcome = slot_with(small_config(variant="positive_only", **LOSSY))
        assert outcome.metrics.pupe_fb == 0.0
        failed = outcome.sets.failed | outcome.sets.missed
        assert {t.user_id for t in outcome.retransmit} == failed

    def test_negative_only_genie_loses_missed_users(self, small_config):
        outcome = slot_with(small_config(variant="negative_only", **LOSSY))
        metrics = outcome.metrics
        assert metrics.pupe_fb == pytest.approx(metrics.cardinalities["n_missed"] / metrics.k_active)
        assert metrics.c_bs == metrics.cardinalities["n_failed"]

    def test_threshold_variants_on_identical_slot(self, small_config):
        single = slot_with(small_config(variant="single_threshold", c_tilde=8.0, **LOSSY)).metrics
        double = slot_with(small_config(variant="double_threshold", c_tilde_low=2.0, c_tilde_high=8.0,
                                        **LOSSY)).metrics
        k = single.k_active
        assert single.tau == double.tau
        assert single.pupe_fb == pytest.approx(single.cardinalities["n_missed_above"] / k)
        assert double.pupe_fb - single.pupe_fb == pytest.approx(single.cardinalities["n_failed_above"] / k)
        assert single.c_bs == single.cardinalities["n_success_below"] + single.cardinalities["n_failed_above"]
        assert double.c_bs == double.cardinalities["n_success_between"]
        between = sum(double.cardinalities[f"n_{s}_between"] for s in ("success", "failed", "missed"))
        assert double.c_ue == between
        assert double.p_c == pytest.approx(between / k)
        assert single.c_ue == k

    def test_no_feedback_variant(self, small_config):
        outcome = slot_with(small_config(variant="none", **LOSSY))
        assert outcome.packet is None
        assert outcome.retransmit == []
        assert outcome.metrics.pupe_fb == outcome.metrics.pupe_ff
        assert outcome.metrics.c_ue == 0

    def test_spent_budget_blocks_retransmission(self, small_config):
        outcome = slot_with(small_config(variant="positive_only", max_retransmissions=1, **LOSSY), attempts=1)
        assert outcome.retransmit == []
        assert outcome.metrics.retransmitters == 6


class TestExperiment:
    def test_same_seed_same_rows(self, small_config):
        cfg = small_config(trials=2, slots=2)
        first, second = run_experiment(cfg), run_experiment(cfg)
        assert_frame_equal(first.rows, second.rows)
        assert first.summary == second.summary

    def test_rows_and_summary(self, small_config):
        cfg = small_config(trials=2, slots=3)
        result = run_experiment(cfg)
        assert len(result.rows) == 6
        assert {"seed", "trial", "slot", "pupe_ff", "pupe_fb", "c_bs", "n_success", "equiv_ebn0_db"} <= set(result.rows)
        assert (result.rows["k_active"] == 2).all()
        summary = result.summary
        assert summary["resolved_users"] + summary["pending_users"] >= 2 * 2
        assert 0.0 <= summary["overall_pupe"] <= 1.0
        assert summary["equivalent_ebn0_db"] >= summary["ff_ebn0_db"]

    @pytest.mark.slow
    def test_parallel_trials_match_serial(self, small_config):
        cfg = small_config(trials=3, slots=2)
        assert_frame_equal(run_experiment(cfg, jobs=1).rows, run_experiment(cfg, jobs=2).rows)

    def test_invalid_jobs(self, small_config):
        with pytest.raises(ValueError):
            run_experiment(small_config(), jobs=0)


class TestEnergyAccounting:
    def test_average_user_energy_matches_equivalent_ebn0(self, small_config, monkeypatch):
        cfg = small_config(variant="positive_only", slots=4, trials=2, **LOSSY)
        recorded = []
        real_run_slot = harness.run_slot

        def recording(ctx, transmitters, rng, slot=0):
            outcome = real_run_slot(ctx, transmitters, rng, slot=slot)
            recorded.append((ctx, outcome))
            return outcome

        monkeypatch.setattr(harness, "run_slot", recording)
        result = run_experiment(cfg)

        spent, total, resolved, trial = {}, 0.0, 0, -1
        for ctx, outcome in recorded:
            if outcome.metrics.slot == 0:
                trial += 1
            staying = {t.user_id for t in outcome.retransmit}
            for user in outcome.users:
                key = (trial, user.user_id)
                spent[key] = spent.get(key, 0.0) + (ctx.e_preamble * np.vdot(user.preamble, user.preamble).real
                                                    + ctx.payload_gain ** 2 * np.vdot(user.payload, user.payload).real)
                if user.user_id not in staying:
                    total += spent[key]
                    resolved += 1

        assert resolved == result.summary["resolved_users"]
        assert result.summary["retransmission_fraction"] > 0
        average_ebn0_db = 10.0 * np.log10(total / resolved / cfg.n_info / harness.N0)
        assert average_ebn0_db == pytest.approx(result.summary["equivalent_ebn0_db"], abs=1e-5)


def fake_experiment(curve):
    def run(cfg, jobs=1):
        value = curve(cfg.payload_ebn0_db)
        summary = {"overall_pupe": value, "ff_ebn0_db": cfg.payload_ebn0_db, "k_new_mean": 2.0,
                   "equivalent_ebn0_db": equivalent_ebn0(cfg.payload_ebn0_db, 0.1)}
        return ExperimentResult(config=cfg, rows=pd.DataFrame({"pupe_ff": [value]}), summary=summary)
    return run


class TestTargetSearch:
    def test_bisection_brackets_target(self, small_config, monkeypatch):
        monkeypatch.setattr(harness, "run_experiment", fake_experiment(lambda db: min(1.0, max(0.0, 0.2 - 0.02 * db))))
        result = find_min_ebn0(small_config(payload_ebn0_db=6.0, target_pupe=0.05, sweep_span_db=6.0))
        assert result.achieved
        assert 7.5 <= result.payload_ebn0_db <= 7.75
        assert result.pupe <= 0.05
        assert result.evaluations[0]["payload_ebn0_db"] == 12.0

    def test_low_end_already_meets_target(self, small_config, monkeypatch):
        monkeypatch.setattr(harness, "run_experiment", fake_experiment(lambda db: 0.0))
        result = find_min_ebn0(small_config(payload_ebn0_db=6.0, sweep_span_db=6.0))
        assert result.achieved and result.payload_ebn0_db == 0.0
        assert len(result.evaluations) == 2

    def test_unreachable_target(self, small_config, monkeypatch):
        monkeypatch.setattr(harness, "run_experiment", fake_experiment(lambda db: 0.3))
        result = find_min_ebn0(small_config())
        assert not result.achieved
        assert result.payload_ebn0_db is None
        assert len(result.evaluations) == 1


class TestSweep:
    def test_rows_are_tagged(self, small_config, monkeypatch):
        monkeypatch.setattr(harness, "run_experiment", fake_experiment(lambda db: 0.1))
        results = sweep_parameter(small_config(), "payload_ebn0_db", [1.0, 2.0])
        assert [r.config.payload_ebn0_db for r in results] == [1.0, 2.0]
        assert results[1].rows.loc[0, "sweep_key"] == "payload_ebn0_db"
        assert results[1].summary["sweep"] == {"key": "payload_ebn0_db", "value": 2.0}

    def test_unknown_key(self, small_config):
        with pytest.raises(ValueError):
            sweep_parameter(small_config(), "not_a_key", [1])

    def test_shutdown_stops_sweep(self, small_config, monkeypatch):
        monkeypatch.setattr(harness, "run_experiment", fake_experiment(lambda db: 0.1))
        stop = SimpleNamespace(should_exit=True)
        assert sweep_parameter(small_config(), "c_tilde", [2.0, 4.0], shutdown=stop) == []
