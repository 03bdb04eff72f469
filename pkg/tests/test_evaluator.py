import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from acfilter.evaluator import (
    EvalError,
    auc_score,
    binary_entropy,
    default_bin_edges,
    dwell_analysis,
    evaluate,
    logloss_lift,
    threshold_sweep,
)
from acfilter.events import EventBatch
from acfilter.model import ConstantSnapshot
from acfilter.pipeline import RunConfig, simulated_source
from acfilter.simulator import OracleSnapshot, WorldConfig, build_world, iter_events, sample_events

from conftest import bernoulli_batch, labelled_batch


class TableSnapshot:
    """Prediction looked up by event id."""

    def __init__(self, table):
        self.table = table

    def predict_batch(self, batch):
        return np.array([self.table[int(i)] for i in batch.event_id])


def test_three_event_fixture_by_hand():
    b = labelled_batch(["skip", "ic", "skip"])
    rep = evaluate(TableSnapshot({0: 0.2, 1: 0.7, 2: 0.9}), b)
    want = -(math.log(0.8) + math.log(0.7) + math.log(0.1)) / 3
    assert rep.logloss_mean == pytest.approx(want, rel=1e-14)
    assert rep.sum_pred == pytest.approx(1.8)
    assert rep.sum_label == 1.0
    assert rep.calibration_ratio == pytest.approx(1.8)
    assert rep.n_events == 3


def test_matched_constant_prediction():
    b = bernoulli_batch(0.1, 50_000, seed=4)
    q = b.clicked.mean()
    rep = evaluate(ConstantSnapshot(q), b)
    assert rep.logloss_mean == pytest.approx(binary_entropy(q), rel=1e-10)
    assert rep.calibration_ratio == pytest.approx(1.0, rel=1e-10)


def test_half_gives_ln2():
    rep = evaluate(ConstantSnapshot(0.5), bernoulli_batch(0.3, 1000, seed=1))
    assert rep.logloss_mean == pytest.approx(math.log(2), rel=1e-14)


@settings(max_examples=80, deadline=None)
@given(p=st.floats(0.001, 0.999), q=st.floats(0.01, 0.6), seed=st.integers(0, 50))
def test_gibbs_inequality_for_constant_predictors(p, q, seed):
    b = bernoulli_batch(q, 2000, seed=seed)
    rate = b.clicked.mean()
    assert evaluate(ConstantSnapshot(p), b, with_auc=False).logloss_mean >= binary_entropy(rate) - 1e-9


def test_errors():
    with pytest.raises(EvalError, match="no events to evaluate"):
        evaluate(ConstantSnapshot(0.5), labelled_batch([]))
    with pytest.raises(EvalError, match="no events to evaluate"):
        evaluate(ConstantSnapshot(0.5), labelled_batch(["skip"]), "dwell_logged=false")
    with pytest.raises(EvalError):
        logloss_lift(0.5, 0.0)


def test_lift_formula():
    rep = evaluate(ConstantSnapshot(0.3), bernoulli_batch(0.2, 1000, seed=2))
    assert logloss_lift(rep, rep) == 0.0
    assert logloss_lift(0.99, 1.0) == pytest.approx(1.0, abs=1e-12)


def test_filter_and_per_segment_breakdown(small_world):
    b = sample_events(small_world, 20_000, seed=1)
    rep = evaluate(OracleSnapshot(small_world), b, "dwell_logged=false")
    assert rep.n_events == int((~b.dwell_logged).sum())
    assert sum(s.n_events for s in rep.per_segment.values()) == rep.n_events
    assert sum(s.sum_label for s in rep.per_segment.values()) == pytest.approx(rep.sum_label)
    logged = {small_world.segment_names[j] for j in np.flatnonzero(small_world.dwell_logged)}
    assert not logged & set(rep.per_segment)
    rows = rep.csv_rows()
    assert rows[0]["segment"] == "ALL" and len(rows) == 1 + len(rep.per_segment)


def test_auc():
    assert auc_score(np.array([0.1, 0.2, 0.8, 0.9]), np.array([0, 0, 1, 1])) == 1.0
    assert auc_score(np.array([0.5, 0.5]), np.array([0, 1])) == 0.5
    assert auc_score(np.array([0.5]), np.array([1])) is None


def test_oracle_calibration_on_a_million_events():
    w = build_world(WorldConfig(ac_share=0.2, seed=1))
    rep = evaluate(OracleSnapshot(w), lambda: iter_events(w, 1_000_000, seed=1), with_auc=False)
    assert 0.99 <= rep.calibration_ratio <= 1.01


# ---------------------------------------------------------------- dwell analysis


def test_default_bins():
    e = default_bin_edges()
    assert e[0] == 0 and e[-2] == 30 and np.isinf(e[-1]) and len(e) == 62
    with pytest.raises(EvalError):
        default_bin_edges(0.7, 30)


def test_pmf_sums_to_one_and_zero_threshold(small_world):
    b = sample_events(small_world, 50_000, seed=2)
    rep = dwell_analysis(b, thresholds=[0.0, 3.0], slice_keys=["device", "involvement", "segment"])
    assert sum(rep.pmf) == pytest.approx(1.0)
    assert rep.n_clicks == int(b.clicked.sum())
    assert rep.n_unlogged == int((b.clicked & np.isnan(b.dwell_s)).sum())
    assert rep.ac_share_at["0.0"] == 0.0
    for vals in rep.slices.values():
        assert sum(r.n_clicks for r in vals.values()) == rep.n_clicks
        for r in vals.values():
            assert sum(r.pmf) == pytest.approx(1.0)
            assert r.ac_share_at["0.0"] == 0.0
    n_slices = sum(len(v) for v in rep.slices.values())
    assert len(rep.pmf_rows()) == len(rep.pmf) * (1 + n_slices)
    assert len(rep.share_rows()) == 1 + n_slices
    assert max(rep.normalized_pmf()) == 1.0


def test_long_dwell_lands_in_terminal_bins():
    b = labelled_batch(["ic", "ic", "unk", "skip"], dwell_ic=45.0)
    rep = dwell_analysis(b)
    assert rep.counts[-2:] == [2, 1]
    assert sum(rep.counts[:-2]) == 0
    assert rep.pmf[-2] == pytest.approx(2 / 3)


def test_share_counts_unlogged_clicks_in_denominator():
    b = labelled_batch(["ac", "ic", "unk", "unk", "skip"], dwell_ac=1.0, dwell_ic=5.0)
    rep = dwell_analysis(b, thresholds=[3.0])
    assert rep.ac_share_at["3.0"] == pytest.approx(25.0)


def test_dwell_analysis_order_and_shard_invariant(small_world):
    b = sample_events(small_world, 30_000, seed=3)
    perm = np.random.default_rng(0).permutation(len(b))
    ref = dwell_analysis(b, slice_keys=["device"]).to_dict()
    assert dwell_analysis(b.take(perm), slice_keys=["device"]).to_dict() == ref
    assert dwell_analysis(list(b.chunks(777)), slice_keys=["device"]).to_dict() == ref


def test_dwell_errors():
    with pytest.raises(EvalError, match="no clicks"):
        dwell_analysis(labelled_batch(["skip", "skip"]))
    with pytest.raises(EvalError):
        dwell_analysis(labelled_batch(["ic"]), bin_edges=[1.0, 2.0])
    with pytest.raises(EvalError, match="multi-value"):
        dwell_analysis(labelled_batch(["ic"]), slice_keys=["tech"])


# ---------------------------------------------------------------- threshold sweep


def _sweep_rc(**kw):
    world = WorldConfig(n_users=2000, n_ads=200, n_campaigns=30, n_segments=8, ac_share=0.2,
                        dwell_logged_fraction=0.5, probe_pairs=20_000, seed=4)
    return RunConfig(world=world, seed=4, n_train=150_000, n_holdout=100_000, **kw)


def test_sweep_grid_of_one_is_argmax():
    rc = _sweep_rc()
    train, hold = simulated_source(rc)
    rows = threshold_sweep(train, hold, [3.0], rc)
    assert len(rows) == 1 and rows[0].argmax


def test_sweep_threshold_below_every_dwell_matches_agnostic():
    rc = _sweep_rc()
    train, hold = simulated_source(rc)
    tau = 0.0005
    n_below = sum(int((b.dwell_s[b.clicked] < tau).sum()) for b in train())
    rows = threshold_sweep(train, hold, [tau], rc)
    assert rows[0].n_ac_train == n_below
    assert abs(rows[0].logloss_lift) < 0.1


def test_sweep_rejects_bad_grid():
    rc = _sweep_rc()
    with pytest.raises(EvalError):
        threshold_sweep([], [], [], rc)
    with pytest.raises(EvalError):
        threshold_sweep([], [], [0.0, 3.0], rc)
