"""Acceptance criteria, one marked group per criterion; a summary line per criterion is printed at the end."""

from __future__ import annotations

import json
import math
import random
import time

import pytest

from dualtrack.cli import run
from dualtrack.components import TabularSmallModel, TimingConfig, load_scenarios, remote_large_model
from dualtrack.config import DEFAULT_SEED
from dualtrack.coremath import (
    DialogueSample,
    LossWeights,
    coherence_loss,
    confidence,
    confidence_from_entropies,
    curriculum_plan,
    entropy,
    perplexity,
    prior_regularization_loss,
    total_loss,
)
from dualtrack.metrics import aggregate, breakdowns, bucket_of, latency_breakdown, overall_reduction, stratify
from dualtrack.miner import TaggedToken, extract_connective, normalized_label_entropy
from dualtrack.orchestrator import SimulationSetup, Strategy, run_batch, run_session, simulated_components
from dualtrack.policy import CommitDecision, PolicyConfig, commit_point
from dualtrack.components import ProtocolError, RemoteTimeout
from dualtrack.stub import StubLlmServer
from dualtrack.synth import synthetic_batch
from helpers import FIXTURES, ConstOracle, direct_entropy, dist, point_candidate


def _batch_breakdowns(scenarios, dialogues, strategies=tuple(Strategy)):
    setup = SimulationSetup(TimingConfig(), TabularSmallModel(dialogues))
    traces = {s: run_batch(scenarios, s, setup) for s in strategies}
    return traces, [b for ts in traces.values() for b in breakdowns(ts)]


# -- 1 ------------------------------------------------------------------------------


@pytest.mark.acceptance(1)
def test_latency_ordering_and_reduction_band():
    start = time.perf_counter()
    scenarios, dialogues = synthetic_batch(50, seed=DEFAULT_SEED, commit_rate=0.94)
    for sc in scenarios:
        assert 350 <= sc.timing["asr.final_tail_ms"] <= 400
        assert 500 <= sc.timing["llm.first_token_ms"] <= 700
        assert sc.timing["tts.first_chunk_ms"] == 150
    traces, items = _batch_breakdowns(scenarios, dialogues)
    elapsed = time.perf_counter() - start
    assert not any(t.failed for ts in traces.values() for t in ts)
    report = aggregate(items)
    waiting = {s: report.row(s).get("waiting", "avg") for s in Strategy}
    red = overall_reduction(items)
    print(f"mean waiting SSC={waiting[Strategy.SSC]:.1f} SDC={waiting[Strategy.SDC]:.1f} "
          f"DDTSR={waiting[Strategy.DDTSR]:.1f} reduction={red:.3f} runtime={elapsed:.2f}s")
    assert waiting[Strategy.DDTSR] < waiting[Strategy.SDC] < waiting[Strategy.SSC]
    assert 0.19 <= red <= 0.51
    assert elapsed < 5.0


# -- 2 ------------------------------------------------------------------------------


@pytest.mark.acceptance(2)
def test_decomposition_identity_every_trace():
    scenarios, dialogues = synthetic_batch(50, seed=DEFAULT_SEED)
    traces, _ = _batch_breakdowns(scenarios, dialogues)
    fixture = load_scenarios(FIXTURES / "three_sessions.jsonl")
    _, more = _batch_breakdowns(fixture, dialogues)
    count = 0
    for ts in traces.values():
        for t in ts:
            b = latency_breakdown(t)
            assert all(isinstance(v, int) for v in (b.perception_ms, b.reaction_ms, b.waiting_ms))
            assert b.waiting_ms == b.perception_ms + b.reaction_ms
            count += 1
    for b in more:
        assert b.waiting_ms == b.perception_ms + b.reaction_ms
    assert count == 150


# -- 3 ------------------------------------------------------------------------------


@pytest.mark.acceptance(3)
def test_commit_minimality_10000_sequences():
    rng = random.Random(2024)
    for _ in range(10_000):
        n = rng.randint(0, 40)
        density = rng.random()
        sigs = [rng.random() < density for _ in range(n)]
        decisions = [CommitDecision(i + 1, (), 0.0, s) for i, s in enumerate(sigs)]
        brute = next((i + 1 for i, s in enumerate(sigs) if s), None)
        assert commit_point(decisions) == brute


# -- 4 ------------------------------------------------------------------------------


@pytest.mark.acceptance(4)
def test_confidence_math():
    assert abs(confidence_from_entropies([0.4, 0.8], 2.0) - 0.7) <= 1e-12
    assert confidence([point_candidate(), point_candidate(("Oh,",))], 2.0) == 1.0
    for n in range(2, 1025):
        probs = (1.0 / n,) * n
        h = entropy(dist(probs))
        assert abs(h - direct_entropy(probs)) <= 1e-9
        assert abs(h - math.log(n)) <= 1e-9


# -- 5 ------------------------------------------------------------------------------


@pytest.mark.acceptance(5)
def test_perplexity_closed_form():
    for p in (0.1, 0.25, 0.5):
        oracle = ConstOracle(p)
        for length in range(1, 65):
            assert abs(perplexity(oracle, ["a"], [], ["a"] * length) - 1 / p) <= 1e-9


# -- 6 ------------------------------------------------------------------------------


@pytest.mark.acceptance(6)
def test_loss_suite():
    o = ConstOracle(0.3)
    assert coherence_loss(o, ConstOracle(0.3), ["a"], ["a"], ["a", "a"], ["a", "a", "a"]) == 0.0
    rng = random.Random(7)
    for _ in range(1000):
        k = rng.randint(2, 12)
        p = [rng.random() + 1e-6 for _ in range(k)]
        q = [rng.random() + 1e-6 for _ in range(k)]
        p = {str(i): v / sum(p) for i, v in enumerate(p)}
        q = {str(i): v / sum(q) for i, v in enumerate(q)}
        assert prior_regularization_loss(p, q) >= 0.0
        assert abs(prior_regularization_loss(p, dict(p))) <= 1e-9
    assert abs(total_loss(2.0, 1.0, 0.5, LossWeights(1.0, 0.5, 0.1)) - 2.55) <= 1e-12


# -- 7 ------------------------------------------------------------------------------


@pytest.mark.acceptance(7)
def test_curriculum_plan():
    rng = random.Random(11)
    samples = [DialogueSample(f"s{i}", ("w",), audio_ms=rng.randint(200, 9000)) for i in range(97)]
    plan = curriculum_plan(samples, 4, (5, 3, 3, 2), seed=3)
    assert len(plan.stages) == 4 and [s.epochs for s in plan.stages] == [5, 3, 3, 2]
    ids = [i for s in plan.stages for i in s.sample_ids]
    assert len(ids) == len(set(ids)) and set(ids) == {s.id for s in samples}
    assert plan.total_steps == sum(len(s.sample_ids) * s.epochs for s in plan.stages)
    assert curriculum_plan(samples, 4, (5, 3, 3, 2), seed=3) == plan
    # hard (few chunks) first
    assert plan.stages[0].chunk_range[1] <= plan.stages[1].chunk_range[0]


# -- 8 ------------------------------------------------------------------------------

CASES = json.loads((FIXTURES / "extraction_cases.json").read_text())


@pytest.mark.acceptance(8)
@pytest.mark.parametrize("case", CASES, ids=[c["id"] for c in CASES])
def test_extraction_fixtures(case):
    assert case["walkthrough"], "every fixture records its hand walk-through"
    tokens = [TaggedToken.from_json(t) for t in case["tokens"]]
    ext = extract_connective(case["s2"], tokens)
    assert [ext.connective, ext.remainder] == case["expected"]


@pytest.mark.acceptance(8)
def test_extraction_fixture_coverage():
    assert len(CASES) == 10
    stops = {c["stop"] for c in CASES}
    assert stops == {"content", "pos", "length"}
    assert sum(1 for c in CASES if c["expected"][0].count(",") >= 2) >= 1


# -- 9 ------------------------------------------------------------------------------


@pytest.mark.acceptance(9)
def test_length_stratification_monotone():
    assert [bucket_of(x) for x in (2500, 4000, 7000)] == ["0-3s", "3-6s", "6-9+s"]
    scenarios, dialogues = synthetic_batch(
        60, seed=DEFAULT_SEED, length_scaled=True, lengths_ms=(2500, 4000, 7000)
    )
    _, items = _batch_breakdowns(scenarios, dialogues, (Strategy.SSC, Strategy.DDTSR))
    rep = stratify(items)
    r = [rep.reduction[b] for b in ("0-3s", "3-6s", "6-9+s")]
    print("per-bucket reduction", [f"{x:.3f}" for x in r])
    assert {rep.counts[(b, Strategy.SSC)] for b in ("0-3s", "3-6s", "6-9+s")} == {20}
    assert r[0] < r[1] < r[2]


# -- 10 -----------------------------------------------------------------------------


@pytest.mark.acceptance(10)
def test_simulate_byte_deterministic(tmp_path):
    assert run(["synth", "--n", "20", "--seed", "5", "--out", str(tmp_path / "data")]) == 0
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        code = run(["simulate", "--scenarios", str(tmp_path / "data" / "scenarios.jsonl"),
                    "--dialogues", str(tmp_path / "data" / "dialogues.jsonl"),
                    "--strategy", "all", "--seed", "42", "--out", str(out)])
        assert code == 0
        outs.append({p.name: p.read_bytes() for p in sorted(out.iterdir())})
    assert outs[0] == outs[1]
    assert "traces_ddtsr.jsonl" in outs[0] and "report.md" in outs[0]


# -- 11 -----------------------------------------------------------------------------


@pytest.mark.acceptance(11)
def test_normalized_entropy_stats():
    assert normalized_label_entropy(["a", "b", "a", "b"]) == (2, pytest.approx(1.0, abs=1e-12))
    assert normalized_label_entropy(["a"] * 5) == (1, 0.0)
    rng = random.Random(5)
    for _ in range(1000):
        labels = [rng.choice("abcdefghij"[: rng.randint(1, 10)]) for _ in range(rng.randint(0, 50))]
        _, h = normalized_label_entropy(labels)
        assert 0.0 <= h <= 1.0


# -- 12 -----------------------------------------------------------------------------


@pytest.mark.acceptance(12)
def test_remote_protocol_against_stub():
    with StubLlmServer(lambda p: "alpha beta gamma delta", token_delay_ms=3) as srv:
        toks = list(remote_large_model(srv.url, 2000).generate("hi", 0))
    assert [t.text.strip() for t in toks] == ["alpha", "beta", "gamma", "delta"]
    assert all(b.t_ms > a.t_ms for a, b in zip(toks, toks[1:]))
    with StubLlmServer(stall_ms=1500) as srv:
        t0 = time.perf_counter()
        with pytest.raises(RemoteTimeout):
            list(remote_large_model(srv.url, 250).generate("hi", 0))
        assert time.perf_counter() - t0 < 1.4
    with StubLlmServer(malformed_line=2) as srv:
        with pytest.raises(ProtocolError, match="line 2"):
            list(remote_large_model(srv.url, 2000).generate("hi", 0))


@pytest.mark.acceptance(12)
def test_realtime_ddtsr_session_against_stub():
    scenario = load_scenarios(FIXTURES / "three_sessions.jsonl")[0]
    small = TabularSmallModel([DialogueSample(f"d{i}", tuple(f"x{i} what do you think".split()), ("Well,",))
                               for i in range(2)] + [DialogueSample("o", ("is", "that", "right"), ("Hmm,",))]
                              + [DialogueSample(f"e{i}", (f"w{i}",), (c,)) for i, c in enumerate(
                                  ["Oh,", "So,", "Sure,", "Honestly,"])])
    with StubLlmServer(lambda p: "Sure. That works for me.", first_token_ms=100, token_delay_ms=10) as srv:
        comp = simulated_components(scenario, TimingConfig(), small, remote_large_model(srv.url, 3000))
        trace = run_session(scenario, Strategy.DDTSR, comp, PolicyConfig(), clock="realtime")
    assert not trace.failed, trace.events[-1]
    kinds = [e.kind for e in trace.events]
    for kind in ("input_chunk_sent", "asr_final", "commit", "large_invoked", "large_first_token",
                 "audio_play_start", "handoff"):
        assert kind in kinds, kind
    times = [e.t_ms for e in trace.events]
    assert times == sorted(times)
    assert trace.first("audio_play_start").payload["stream"] == "connective"
    b = latency_breakdown(trace)
    assert b.waiting_ms == b.perception_ms + b.reaction_ms
