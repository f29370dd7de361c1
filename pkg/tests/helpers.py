"""Small builders shared by the test modules."""

from __future__ import annotations

import math
from pathlib import Path

from dualtrack.components import Scenario, ScheduledPartial, TimingConfig
from dualtrack.coremath import DialogueSample, TokenDistribution, Vocabulary
from dualtrack.policy import ConnectiveCandidate

FIXTURES = Path(__file__).parent / "fixtures"


def dist(probs, tokens=None) -> TokenDistribution:
    tokens = tokens or tuple(f"t{i}" for i in range(len(probs)))
    return TokenDistribution(Vocabulary(tuple(tokens)), tuple(probs))


def direct_entropy(probs) -> float:
    """Reference entropy by plain left-to-right summation."""
    total = 0.0
    for p in probs:
        if p > 0:
            total -= p * math.log(p)
    return total


class ConstOracle:
    """Every next token is "a" with probability p (the rest goes to "b")."""

    name = "const"

    def __init__(self, p: float):
        self.vocab = Vocabulary(("a", "b"))
        self._dist = TokenDistribution(self.vocab, (p, 1.0 - p))

    def next_token(self, context):
        return self._dist


def point_candidate(tokens=("Well,",)) -> ConnectiveCandidate:
    d = dist((1.0, 0.0), ("x", "y"))
    return ConnectiveCandidate(tuple(tokens), tuple(d for _ in tokens))


def entropy_dist(h: float) -> TokenDistribution:
    """Eight-outcome distribution (1 - q, q/7, ...) with entropy ``h`` nats (0 <= h <= ln 8), by bisection."""
    k = 8

    def probs(q):
        return (1 - q,) + (q / (k - 1),) * (k - 1)

    lo, hi = 0.0, (k - 1) / k
    for _ in range(200):
        mid = (lo + hi) / 2
        if direct_entropy(probs(mid)) < h:
            lo = mid
        else:
            hi = mid
    return dist(probs((lo + hi) / 2), tuple("abcdefgh"))


# Hand-scheduled example turn: four partials, the cue only complete at 2000 ms.
EXAMPLE_TIMING = TimingConfig(
    {
        "asr.final_tail_ms": 350,
        "llm.first_token_ms": 500,
        "llm.per_token_ms": 30,
        "tts.first_chunk_ms": 150,
        "small.eval_ms": 90,
        "small.connective_ms": 285,
    }
)


def example_scenario(sid: str = "ex", cue: bool = True) -> Scenario:
    ending = "what do you think" if cue else "the violet umbrella"
    words = ("so the weekend plan " + ending).split()
    cuts = [2, 4, len(words) - 1, len(words)]
    chunks = tuple(ScheduledPartial(500 * (i + 1), " ".join(words[:c])) for i, c in enumerate(cuts))
    return Scenario(
        id=sid,
        input_audio_ms=2000,
        chunks=chunks,
        final_transcript=" ".join(words),
        reference_connective="Well," if cue else None,
        reference_response="Sure. That works for me.",
    )


def training_dialogues() -> list[DialogueSample]:
    rows = [
        ("what do you think", "Well,"),
        ("is that right", "Hmm,"),
        ("how was your day", "Oh,"),
        ("tell me more", "So,"),
        ("should I go", "Honestly,"),
        ("could you help", "Sure,"),
    ]
    out = []
    for i, (u, c) in enumerate(rows):
        for j in range(2):
            out.append(DialogueSample(f"d{i}{j}", tuple(f"filler{j} {u}".split()), (c,), ("Sure.", "Okay.")))
    return out
