from __future__ import annotations

import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dualtrack.coremath import (
    DialogueSample,
    DivergenceUndefinedError,
    EmptyCandidateError,
    LossWeights,
    TabularOracle,
    UnknownTokenError,
    ValidationError,
    Vocabulary,
    TokenDistribution,
    coherence_from_perplexities,
    coherence_loss,
    confidence,
    confidence_from_entropies,
    connective_distribution,
    curriculum_plan,
    entropy,
    mean_connective_entropy,
    perplexity,
    prior_regularization_loss,
    sequence_nll,
    style_consistency_loss,
    total_loss,
    truncate_sample,
)
from dualtrack.policy import ConnectiveCandidate
from helpers import ConstOracle, entropy_dist, direct_entropy, dist, point_candidate


# -- distributions -------------------------------------------------------------


def test_distribution_rejects_bad_mass():
    with pytest.raises(ValidationError):
        dist((0.5, 0.6))
    with pytest.raises(ValidationError):
        dist((1.2, -0.2))


def test_vocabulary_rejects_duplicates():
    with pytest.raises(ValidationError):
        Vocabulary(("a", "a"))


def test_from_mapping_fills_missing_tokens_with_zero():
    v = Vocabulary(("a", "b", "c"))
    d = TokenDistribution.from_mapping(v, {"a": 0.25, "c": 0.75})
    assert d.prob("b") == 0.0
    with pytest.raises(UnknownTokenError):
        TokenDistribution.from_mapping(v, {"z": 1.0})


# -- entropy -------------------------------------------------------------------


def test_entropy_point_mass_is_zero():
    assert entropy(dist((1.0, 0.0, 0.0))) == 0.0


def test_entropy_uniform_four():
    assert entropy(dist((0.25,) * 4)) == pytest.approx(math.log(4), abs=1e-12)
    assert entropy(dist((0.25,) * 4)) == pytest.approx(1.386294, abs=1e-6)


def test_entropy_half_quarter_quarter():
    # 0.5 ln 2 + 2 * 0.25 ln 4
    assert entropy(dist((0.5, 0.25, 0.25))) == pytest.approx(1.039721, abs=1e-6)


@settings(max_examples=300, deadline=None)
@given(st.lists(st.floats(0.0, 1.0), min_size=1, max_size=40).filter(lambda w: sum(w) > 1e-6))
def test_entropy_matches_direct_sum_and_bounds(weights):
    total = sum(weights)
    probs = [w / total for w in weights]
    probs[-1] = max(0.0, 1.0 - math.fsum(probs[:-1]))
    d = dist(probs)
    h = entropy(d)
    assert h == pytest.approx(direct_entropy(probs), abs=1e-9)
    assert -1e-12 <= h <= math.log(len(probs)) + 1e-9


# -- mean entropy and confidence ----------------------------------------------


def test_mean_entropy_single_deterministic_token():
    assert mean_connective_entropy(point_candidate(("Well,",))) == 0.0


def test_mean_entropy_averages_tokens():
    c = ConnectiveCandidate(("a", "b"), (entropy_dist(0.5), entropy_dist(0.25)))
    assert mean_connective_entropy(c) == pytest.approx(0.375, abs=1e-9)


def test_mean_entropy_skips_marker():
    d = dist((0.25,) * 4)
    c = ConnectiveCandidate(
        ("</c>", "a", "b"),
        (d, entropy_dist(0.6), entropy_dist(0.2)),
        is_marker=(True, False, False),
    )
    assert mean_connective_entropy(c) == pytest.approx(0.4, abs=1e-9)


def test_mean_entropy_all_markers_raises():
    c = ConnectiveCandidate(("</c>",), (dist((1.0, 0.0)),), is_marker=(True,))
    with pytest.raises(EmptyCandidateError):
        mean_connective_entropy(c)


def test_confidence_examples():
    assert confidence([point_candidate(), point_candidate(("Oh,",))], 2.0) == 1.0
    assert confidence_from_entropies([1.0], 2.0) == pytest.approx(0.5)
    assert confidence_from_entropies([0.4, 0.8], 2.0) == pytest.approx(0.7, abs=1e-12)


def test_confidence_clamps_to_unit_interval():
    assert confidence_from_entropies([5.0], 2.0) == 0.0


def test_confidence_rejects_empty_and_bad_hmax():
    with pytest.raises(ValidationError):
        confidence([], 2.0)
    with pytest.raises(ValidationError):
        confidence_from_entropies([0.1], 0.0)


# -- likelihood and perplexity ------------------------------------------------


def test_sequence_nll_examples():
    assert sequence_nll(ConstOracle(1.0), [], ["a", "a"]) == 0.0
    assert sequence_nll(ConstOracle(0.5), [], ["a"] * 3) == pytest.approx(3 * math.log(2), abs=1e-12)
    assert sequence_nll(ConstOracle(math.exp(-1)), [], ["a"] * 4) == pytest.approx(4.0, abs=1e-12)


def test_sequence_nll_errors():
    with pytest.raises(ValidationError):
        sequence_nll(ConstOracle(0.5), [], [])
    with pytest.raises(UnknownTokenError):
        sequence_nll(ConstOracle(0.5), [], ["zzz"])
    assert sequence_nll(ConstOracle(1.0), [], ["b"]) == math.inf


def test_perplexity_examples():
    assert perplexity(ConstOracle(1.0), ["a"], [], ["a", "a"]) == 1.0
    assert perplexity(ConstOracle(0.5), ["a"], ["a"], ["a"] * 5) == pytest.approx(2.0, abs=1e-12)
    assert perplexity(ConstOracle(0.1), [], [], ["a"] * 7) == pytest.approx(10.0, abs=1e-9)


def test_style_loss_equals_sequence_nll():
    o = ConstOracle(0.3)
    u, c, r = ["a"], ["b"], ["a", "b", "a"]
    assert style_consistency_loss(o, u, c, r) == sequence_nll(o, u + c, r)
    assert style_consistency_loss(ConstOracle(math.exp(-1)), [], [], ["a"] * 4) == pytest.approx(4.0)


def test_coherence_examples():
    assert coherence_from_perplexities(2.0, 1.0) == 1.0
    assert coherence_from_perplexities(3.0, 5.0) == 4.0
    o = ConstOracle(0.4)
    assert coherence_loss(o, o, ["a"], ["a"], ["a", "a"], ["a", "a"]) == 0.0


def test_coherence_from_oracles():
    # pair perplexities are 1/0.5 and 1/0.25
    got = coherence_loss(ConstOracle(0.5), ConstOracle(0.25), [], ["a"], ["a"], ["a", "a"])
    assert got == pytest.approx(4.0, abs=1e-9)


# -- prior regularization -----------------------------------------------------


def test_kl_examples():
    assert prior_regularization_loss({"x": 0.5, "y": 0.5}, {"x": 0.5, "y": 0.5}) == 0.0
    expected = 0.5 * math.log(2) + 0.5 * math.log(2 / 3)
    got = prior_regularization_loss({"x": 0.5, "y": 0.5}, {"x": 0.25, "y": 0.75})
    assert got == pytest.approx(expected, abs=1e-12)
    assert got == pytest.approx(0.143841, abs=1e-6)


def test_kl_errors():
    with pytest.raises(ValidationError):
        prior_regularization_loss({"x": 1.0}, {"y": 1.0})
    with pytest.raises(DivergenceUndefinedError):
        prior_regularization_loss({"x": 0.5, "y": 0.5}, {"x": 1.0, "y": 0.0})
    # zero mass on the left is fine
    assert prior_regularization_loss({"x": 1.0, "y": 0.0}, {"x": 0.5, "y": 0.5}) == pytest.approx(math.log(2))


def test_connective_distribution_renormalises():
    rows = {"": {"a": 0.5, "b": 0.5}, "a": {"a": 0.8, "b": 0.2}}
    oracle = TabularOracle(rows)
    p = connective_distribution(oracle, ["b"], [("a",), ("b",), ("a", "a")])
    # raw scores: 0.5, 0.5, 0.5 * 0.8
    assert p["a"] == pytest.approx(0.5 / 1.4)
    assert p["a a"] == pytest.approx(0.4 / 1.4)
    assert math.fsum(p.values()) == pytest.approx(1.0)


def test_tabular_oracle_backoff(tmp_path):
    rows = {"": {"x": 1.0, "y": 0.0}, "q r": {"x": 0.0, "y": 1.0}}
    o = TabularOracle(rows)
    assert o.next_token(["p", "q", "r"]).prob("y") == 1.0
    assert o.next_token(["r"]).prob("x") == 1.0
    path = tmp_path / "o.json"
    path.write_text('["not", "a", "table"]')
    with pytest.raises(ValidationError):
        TabularOracle.load(path)


# -- total loss ---------------------------------------------------------------


def test_total_loss_examples():
    assert total_loss(0, 0, 0) == 0.0
    assert total_loss(2.0, 1.0, 0.5, LossWeights(1.0, 0.5, 0.1)) == pytest.approx(2.55, abs=1e-12)
    assert total_loss(3.0, 9.0, 9.0, LossWeights(1, 0, 0)) == 3.0


def test_total_loss_rejects_nan_and_negative_weights():
    with pytest.raises(ValidationError):
        total_loss(math.nan, 0, 0)
    with pytest.raises(ValidationError):
        LossWeights(-1.0, 0.5, 0.1)


# -- curriculum ---------------------------------------------------------------


def _samples(chunks):
    return [DialogueSample(f"s{i}", ("w",) * 3, audio_ms=500 * c) for i, c in enumerate(chunks)]


def test_curriculum_four_samples_hard_to_easy():
    plan = curriculum_plan(_samples([3, 1, 4, 2]), 4, (5, 3, 3, 2))
    assert [s.sample_ids for s in plan.stages] == [("s1",), ("s3",), ("s0",), ("s2",)]
    assert [s.epochs for s in plan.stages] == [5, 3, 3, 2]
    assert plan.total_steps == 13


def test_curriculum_easy_to_hard_reverses():
    plan = curriculum_plan(_samples([3, 1, 4, 2]), 4, (5, 3, 3, 2), order="easy_to_hard")
    assert [s.chunk_range for s in plan.stages] == [(4, 4), (3, 3), (2, 2), (1, 1)]


def test_curriculum_single_stage():
    plan = curriculum_plan(_samples([2, 2, 5]), 1, (1,))
    assert plan.total_steps == 3


def test_curriculum_validation():
    with pytest.raises(ValidationError):
        curriculum_plan(_samples([1, 2]), 4, (5, 3, 3, 2))
    with pytest.raises(ValidationError):
        curriculum_plan(_samples([1, 2, 3, 4]), 4, (5, 3))
    with pytest.raises(ValidationError):
        curriculum_plan([DialogueSample("x", ("a",))] * 4, 4, (5, 3, 3, 2))
    with pytest.raises(ValidationError):
        curriculum_plan(_samples([1, 2, 3, 4]), 4, (5, 3, 3, 2), order="sideways")


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(1, 20), min_size=4, max_size=60), st.integers(0, 10_000))
def test_curriculum_partition_property(chunks, seed):
    samples = _samples(chunks)
    plan = curriculum_plan(samples, 4, (5, 3, 3, 2), seed=seed)
    ids = [i for s in plan.stages for i in s.sample_ids]
    assert sorted(ids) == sorted(s.id for s in samples)
    assert plan.total_steps == sum(len(s.sample_ids) * s.epochs for s in plan.stages)
    # stage 1 is never easier than stage 4
    assert plan.stages[0].chunk_range[1] <= plan.stages[-1].chunk_range[0] or len(set(chunks)) == 1


# -- truncation ---------------------------------------------------------------


def test_truncate_examples():
    s = DialogueSample("a", tuple("abcdefgh"), audio_ms=2000)
    assert truncate_sample(s, 4) is s
    t = truncate_sample(s, 2)
    assert t.u == tuple("abcd") and t.chunk_count == 2 and t.audio_ms == 1000
    three = DialogueSample("b", ("x", "y", "z"), audio_ms=2000)
    assert truncate_sample(three, 1).u == ("x",)


def test_truncate_bounds():
    s = DialogueSample("a", ("x",), audio_ms=1000)
    with pytest.raises(ValidationError):
        truncate_sample(s, 0)
    with pytest.raises(ValidationError):
        truncate_sample(s, 3)


def test_sample_chunk_count_consistency():
    assert DialogueSample("a", ("x",), audio_ms=1001).chunk_count == 3
    with pytest.raises(ValidationError):
        DialogueSample("a", ("x",), audio_ms=1000, chunk_count=5)
    with pytest.raises(ValidationError):
        DialogueSample("a", ())
