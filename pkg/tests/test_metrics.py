import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dpanomaly.metrics import (
    HIGHER,
    LOWER,
    ConfusionCounts,
    ScoreRecord,
    aggregate_session,
    as_scores,
    aupr,
    auroc,
    confusion_stats,
    make_scores,
    ranked_tokens,
    score_losses,
    session_max,
    threshold_detect,
    token_ranks,
    topk_detect,
)

# -- oracles ----------------------------------------------------------------------


def pairwise_auroc(scores, truth):
    """P(pos > neg) + 0.5 P(pos == neg) by enumerating every pair."""
    pos = [s for s, t in zip(scores, truth) if t]
    neg = [s for s, t in zip(scores, truth) if not t]
    total = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return total / (len(pos) * len(neg))


def enumerated_aupr(scores, truth):
    """Average precision by enumerating every distinct threshold from the top."""
    n_pos = sum(truth)
    area, prev_recall = 0.0, 0.0
    for tau in sorted(set(scores), reverse=True):
        flagged = [t for s, t in zip(scores, truth) if s >= tau]
        tp = sum(flagged)
        recall = tp / n_pos
        area += (recall - prev_recall) * (tp / len(flagged))
        prev_recall = recall
    return area


def random_record_set(rng):
    n = int(rng.integers(2, 201))
    # a coarse grid forces many tied scores
    levels = int(rng.integers(2, 30))
    scores = rng.integers(0, levels, n) / levels + (0 if rng.random() < 0.5 else rng.normal(0, 1e-3, n))
    truth = rng.random(n) < rng.uniform(0.05, 0.95)
    truth[0], truth[1] = True, False
    return scores, truth


@pytest.mark.parametrize("block", range(5))
def test_curves_match_oracles_on_random_sets(block):
    rng = np.random.default_rng(7000 + block)
    for _ in range(100):
        scores, truth = random_record_set(rng)
        s = make_scores(scores, truth)
        assert abs(auroc(s).area - pairwise_auroc(scores, truth)) <= 1e-12
        assert abs(aupr(s).area - enumerated_aupr(scores, truth)) <= 1e-12


def test_hand_example():
    s = make_scores([0.9, 0.4, 0.6, 0.1], [True, True, False, False])
    assert auroc(s).area == pytest.approx(0.75, abs=1e-15)
    assert aupr(s).area == pytest.approx((1 / 1 + 2 / 3) / 2, abs=1e-15)


def test_perfect_separation():
    s = make_scores([0.9, 0.8, 0.2, 0.1], [True, True, False, False])
    assert auroc(s).area == 1.0 and aupr(s).area == 1.0


def test_single_class_rejected():
    with pytest.raises(ValueError):
        auroc(make_scores([0.1, 0.2], [False, False]))
    with pytest.raises(ValueError):
        aupr(make_scores([0.1, 0.2], [True, True]))


@given(st.lists(st.integers(-1000, 1000), min_size=4, max_size=60), st.integers(0, 2**32 - 1))
def test_auroc_invariances(raw, seed):
    rng = np.random.default_rng(seed)
    # a grid of eighths keeps the transform below strictly monotone in floating point
    scores = np.array(raw) / 8
    truth = rng.random(len(scores)) < 0.5
    truth[0], truth[1] = True, False
    base = auroc(make_scores(scores, truth)).area
    # strictly monotone transform
    assert auroc(make_scores(np.arctan(scores / 100) * 3 + 1, truth)).area == pytest.approx(base, abs=1e-12)
    # flipping the direction mirrors the curve
    assert auroc(make_scores(scores, truth, direction=LOWER)).area == pytest.approx(1 - base, abs=1e-12)
    c = auroc(make_scores(scores, truth))
    assert np.all(np.diff(c.x) >= 0) and 0 <= c.area <= 1


# -- threshold detection ------------------------------------------------------------


def test_threshold_hand_example():
    c = threshold_detect(make_scores([0.9, 0.6, 0.4, 0.1], [True, False, True, False]), 0.5)
    assert (c.tp, c.fp, c.fn, c.tn) == (1, 1, 1, 1)


def test_minus_infinity_flags_everything():
    c = threshold_detect(make_scores([0.9, 0.6, 0.4], [True, False, True]), -math.inf)
    assert c.fn == 0 and c.tn == 0


def test_probability_threshold_example():
    # predicted next-key probabilities {D: 0.8, A: 0.2, B: 0.0}; lower means more anomalous
    s = make_scores([0.8, 0.2, 0.0], [False, False, True], ids=["D", "A", "B"], direction=LOWER)
    c = threshold_detect(s, 0.001)
    assert (c.tp, c.fp, c.tn, c.fn) == (1, 0, 2, 0)


def test_mixed_directions_rejected():
    recs = [ScoreRecord("a", 0.1, True, HIGHER), ScoreRecord("b", 0.2, False, LOWER)]
    with pytest.raises(ValueError):
        threshold_detect(recs, 0.5)


def test_nan_threshold_rejected():
    with pytest.raises(ValueError):
        threshold_detect(make_scores([0.1, 0.2], [True, False]), math.nan)


@given(st.lists(st.floats(-10, 10), min_size=1, max_size=40), st.floats(-10, 10), st.floats(0, 5))
def test_threshold_monotone(scores, tau, bump):
    truth = [i % 2 == 0 for i in range(len(scores))]
    lo = threshold_detect(make_scores(scores, truth), tau)
    hi = threshold_detect(make_scores(scores, truth), tau + bump)
    assert hi.tp + hi.fp <= lo.tp + lo.fp
    assert lo.total == len(scores)


def test_records_round_trip():
    s = make_scores([0.3, 0.1], [True, False], ids=["x", "y"])
    back = as_scores(s.records())
    assert back.ids.tolist() == ["x", "y"] and back.scores.tolist() == [0.3, 0.1]


# -- top-k ---------------------------------------------------------------------------


def _example_dist():
    p = np.zeros(29)
    p[[26, 5, 9, 11]] = [0.7, 0.2, 0.08, 0.01]
    p[0] = 0.01
    return p


def test_ranking_example():
    assert ranked_tokens(_example_dist())[:3].tolist() == [26, 5, 9]
    assert topk_detect(_example_dist(), 9, 2).anomalous
    assert not topk_detect(_example_dist(), 9, 3).anomalous
    # 0 and 11 tie at 0.01; the lower id ranks first
    assert ranked_tokens(_example_dist())[3:5].tolist() == [0, 11]


def test_k_equal_vocabulary_never_flags():
    p = _example_dist()
    assert not any(topk_detect(p, t, len(p)).anomalous for t in range(len(p)))


@pytest.mark.parametrize("k,actual", [(0, 1), (30, 1), (3, 29)])
def test_topk_domain(k, actual):
    with pytest.raises(ValueError):
        topk_detect(_example_dist(), actual, k)


@given(st.lists(st.integers(0, 5), min_size=3, max_size=12), st.data())
def test_topk_monotone_in_k_and_batched_ranks_agree(weights, data):
    p = np.array(weights, dtype=float) + 1e-9
    p /= p.sum()
    actual = data.draw(st.integers(0, len(p) - 1))
    verdicts = [topk_detect(p, actual, k).anomalous for k in range(1, len(p) + 1)]
    for k in range(1, len(verdicts)):
        assert verdicts[k] <= verdicts[k - 1]
    rank = token_ranks(p[None], np.array([actual]))[0]
    assert verdicts == [rank >= k for k in range(1, len(p) + 1)]


def test_session_aggregation():
    assert not aggregate_session([False] * 5)
    assert aggregate_session([False] * 99 + [True])
    with pytest.raises(ValueError):
        aggregate_session([])
    np.testing.assert_array_equal(session_max([1, 5, 2, 0], [0, 0, 1, 2], 3), [5, 2, 0])


# -- confusion statistics ---------------------------------------------------------------


def test_confusion_stats_hand_cases():
    st_ = confusion_stats(ConfusionCounts(tp=8, fp=2, tn=5, fn=2))
    assert st_["precision"] == pytest.approx(0.8) and st_["recall"] == pytest.approx(0.8) and st_["f_measure"] == pytest.approx(0.8)
    assert confusion_stats(ConfusionCounts(tp=3, fp=0, tn=4, fn=0))["f_measure"] == 1.0
    undefined = confusion_stats(ConfusionCounts(tp=0, fp=0, tn=4, fn=2))
    assert math.isnan(undefined["precision"]) and undefined["recall"] == 0.0
    assert confusion_stats(ConfusionCounts(0, 0, 0, 0))["fpr"] != 0.0  # NaN, never silently 0


def test_score_losses_on_reproduced_sample():
    from dpanomaly.nn.model import ModelArch, build_model

    m = build_model(ModelArch("mlp", widths=(3, 3)), 0)
    m.params["dense0.W"][:] = np.eye(3)
    s = score_losses(m, np.array([[0.1, 0.2, 0.3]]))
    assert len(s) == 1 and s.scores[0] == 0.0 and s.direction == HIGHER
