import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from comptag.aggregate import (
    AggregationConfig,
    map_resource,
    prefilter_predictions,
    resource_score_to_record,
    score_resource,
)
from comptag.reconcile import ReconciledSet
from comptag.tagger import TagPrediction


def rset(fid, *pairs):
    preds = tuple(
        TagPrediction(fid, cid, conf, 0, 1, "x") for cid, conf in pairs
    )
    return ReconciledSet(fid, preds, ())


def test_single_prediction_all_aggregators():
    frags = [rset("f1", ("c1", 0.9))]
    assert score_resource(frags, AggregationConfig(agg="max")) == {"c1": 0.9}
    assert score_resource(frags, AggregationConfig(agg="weighted_sum")) == {"c1": 0.9}
    assert score_resource(frags, AggregationConfig(agg="weighted_mean")) == {"c1": 0.9}


def test_two_fragments_aggregator_semantics():
    frags = [rset("f1", ("c1", 0.4)), rset("f2", ("c1", 0.6))]
    assert score_resource(frags, AggregationConfig(agg="max"))["c1"] == 0.6
    assert score_resource(frags, AggregationConfig(agg="weighted_sum"))["c1"] == pytest.approx(1.0)
    assert score_resource(frags, AggregationConfig(agg="weighted_mean"))["c1"] == pytest.approx(0.5)


def test_unpredicted_fragment_dilutes_mean_but_not_max():
    frags = [rset("f1", ("c1", 0.9)), rset("f2"), rset("f3")]
    assert score_resource(frags, AggregationConfig(agg="weighted_mean"))["c1"] == pytest.approx(0.3)
    assert score_resource(frags, AggregationConfig(agg="max"))["c1"] == 0.9
    assert score_resource(frags, AggregationConfig(agg="weighted_sum"))["c1"] == pytest.approx(0.9)


def test_repeated_competency_in_one_fragment_collapses_to_max():
    frags = [rset("f1", ("c1", 0.2), ("c1", 0.7))]
    assert score_resource(frags, AggregationConfig(agg="weighted_sum"))["c1"] == pytest.approx(0.7)


def test_kind_weights_scale_scores():
    cfg = AggregationConfig(agg="weighted_sum", weights={"quiz": 2.0})
    frags = [rset("f1", ("c1", 0.4))]
    assert score_resource(frags, cfg, kind="quiz")["c1"] == pytest.approx(0.8)
    assert score_resource(frags, cfg, kind="page")["c1"] == pytest.approx(0.4)  # default 1.0
    assert score_resource(frags, cfg, kind=None)["c1"] == pytest.approx(0.4)


def test_weight_cancels_out_of_weighted_mean():
    cfg_heavy = AggregationConfig(agg="weighted_mean", weights={"quiz": 5.0})
    cfg_plain = AggregationConfig(agg="weighted_mean")
    frags = [rset("f1", ("c1", 0.4)), rset("f2", ("c1", 0.8))]
    assert score_resource(frags, cfg_heavy, kind="quiz") == pytest.approx(
        score_resource(frags, cfg_plain, kind="quiz")
    )


def test_empty_resource_scores_nothing():
    assert score_resource([], AggregationConfig()) == {}


def test_never_predicted_competency_absent():
    scores = score_resource([rset("f1", ("c1", 0.9)), rset("f2")], AggregationConfig())
    assert "c2" not in scores


def test_threshold_inclusive():
    rs = map_resource("r1", {"c1": 0.4, "c2": 0.39999}, AggregationConfig(tau=0.4))
    assert rs.mapping == frozenset({"c1"})


def test_mapping_worked_threshold_case():
    scores = {"c3": 0.8, "c5": 0.35}
    rs = map_resource("r1", scores, AggregationConfig(tau=0.4))
    assert rs.mapping == frozenset({"c3"})
    assert rs.scores == scores


def test_topk_independent_of_tau():
    scores = {"c1": 0.9, "c2": 0.2, "c3": 0.1}
    rs = map_resource("r1", scores, AggregationConfig(tau=0.5, topk=2))
    assert rs.mapping == frozenset({"c1"})
    assert rs.topk == ("c1", "c2")


def test_topk_ties_ascending_id():
    rs = map_resource("r1", {"b": 0.5, "a": 0.5, "c": 0.5}, AggregationConfig(topk=2))
    assert rs.topk == ("a", "b")


def test_topk_none_by_default():
    assert map_resource("r1", {"a": 1.0}, AggregationConfig()).topk is None


def test_prefilter_keeps_at_or_above_tau(make_pred):
    preds = [make_pred("a", confidence=0.4), make_pred("b", confidence=0.39)]
    assert [p.competency_id for p in prefilter_predictions(preds, 0.4)] == ["a"]


@pytest.mark.parametrize(
    "kwargs",
    [
        {"agg": "median"},
        {"tau": -0.1},
        {"tau": 1.1},
        {"weights": {"quiz": -1.0}},
        {"topk": 0},
    ],
)
def test_config_validation(kwargs):
    with pytest.raises(ValueError):
        AggregationConfig(**kwargs)


def test_record_shape_sorted():
    rs = map_resource("r1", {"b": 0.5, "a": 0.9}, AggregationConfig(tau=0.4, topk=1))
    record = resource_score_to_record(rs)
    assert list(record["scores"]) == ["a", "b"]
    assert record["mapping"] == ["a", "b"]
    assert record["topk"] == ["a"]
    rs_plain = map_resource("r1", {"a": 0.9}, AggregationConfig())
    assert "topk" not in resource_score_to_record(rs_plain)


_frag_strategy = st.lists(
    st.lists(
        st.tuples(
            st.sampled_from(["c1", "c2", "c3"]),
            st.floats(min_value=0.0, max_value=1.0, allow_nan=False),
        ),
        max_size=4,
    ),
    min_size=1,
    max_size=5,
)


@settings(max_examples=200)
@given(
    _frag_strategy,
    st.sampled_from(["max", "weighted_mean", "weighted_sum"]),
    st.floats(min_value=0.0, max_value=1.0),
    st.floats(min_value=0.0, max_value=1.0),
)
def test_mapping_shrinks_as_tau_grows(frag_specs, agg, tau_a, tau_b):
    lo, hi = sorted((tau_a, tau_b))
    frags = [rset(f"f{i}", *pairs) for i, pairs in enumerate(frag_specs)]
    scores = score_resource(frags, AggregationConfig(agg=agg))
    loose = map_resource("r", scores, AggregationConfig(agg=agg, tau=lo)).mapping
    tight = map_resource("r", scores, AggregationConfig(agg=agg, tau=hi)).mapping
    assert tight <= loose


@settings(max_examples=200)
@given(_frag_strategy)
def test_max_bounded_by_sum_and_dominates_mean(frag_specs):
    frags = [rset(f"f{i}", *pairs) for i, pairs in enumerate(frag_specs)]
    s_max = score_resource(frags, AggregationConfig(agg="max"))
    s_sum = score_resource(frags, AggregationConfig(agg="weighted_sum"))
    s_mean = score_resource(frags, AggregationConfig(agg="weighted_mean"))
    assert set(s_max) == set(s_sum) == set(s_mean)
    for cid in s_max:
        assert s_max[cid] <= s_sum[cid] + 1e-12
        assert s_mean[cid] <= s_max[cid] + 1e-12
        assert 0.0 <= s_mean[cid] <= 1.0
