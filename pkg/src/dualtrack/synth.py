"""Synthetic scenario batches for desk-scale latency studies.

Each scenario is a user turn streamed in 500 ms chunks.  Turns that should
let the small model commit end in a cue phrase whose connective is fixed in
the companion training dialogues; the rest end in words the model has never
seen, so its confidence stays under threshold.
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass

from .components import Scenario, ScheduledPartial
from .coremath import CHUNK_MS, DialogueSample

CUES = (
    ("what do you think", "Well,"),
    ("could you help", "Sure,"),
    ("is that right", "Hmm,"),
    ("how was your day", "Oh,"),
    ("tell me more", "So,"),
    ("any suggestions", "Let me see,"),
    ("did you hear the news", "Oh really,"),
    ("should I go", "Honestly,"),
)

FILLER = (
    "yesterday", "morning", "walked", "through", "market", "bought", "fresh", "bread",
    "neighbour", "garden", "weekend", "planning", "trip", "mountains", "friends",
    "called", "earlier", "finished", "project", "office", "lunch", "coffee", "rain",
    "started", "dinner", "cooking", "evening", "bus", "late", "again", "quiet",
)

OPEN_ENDINGS = (
    "zebra crossing", "quantum flux", "violet umbrella", "copper kettle", "paper lantern", "silent orbit",
)

RESPONSES = (
    "Good question. I think the honest answer depends on a few things.",
    "Sure. Here is what I would try first.",
    "That sounds lovely. Tell me what happened next.",
    "I see. Let me walk you through it step by step.",
    "Okay. The short version is that it went well.",
)


@dataclass(frozen=True)
class TimingRanges:
    final_tail_ms: tuple[int, int] = (350, 400)
    first_token_ms: tuple[int, int] = (500, 700)
    tts_first_chunk_ms: int = 150


def _partials(words: list[str], audio_ms: int) -> tuple[ScheduledPartial, ...]:
    n = math.ceil(audio_ms / CHUNK_MS)
    out = []
    for i in range(1, n + 1):
        end = min(i * CHUNK_MS, audio_ms)
        shown = words[: (len(words) * i) // n]
        out.append(ScheduledPartial(end, " ".join(shown)))
    return tuple(out)


def synthetic_batch(
    n: int = 50,
    seed: int = 0,
    commit_rate: float = 0.94,
    ranges: TimingRanges = TimingRanges(),
    ms_per_word: int = 350,
    length_scaled: bool = False,
    lengths_ms: tuple[int, ...] | None = None,
) -> tuple[list[Scenario], list[DialogueSample]]:
    """Scenarios plus the dialogues the tabular small model is trained on.

    With ``length_scaled`` the ASR tail and large-model first-token delay grow
    with input length (longer audio to finalise, longer prompt to prefill).
    ``lengths_ms`` cycles through fixed input lengths instead of drawing them;
    each length then gets the same share of committing turns so per-length
    comparisons are not skewed by the commit draw.
    """
    rng = random.Random(seed)
    training = []
    for i, (cue, conn) in enumerate(CUES):
        for j in range(3):
            u = rng.sample(FILLER, 3 + j) + cue.split()
            training.append(
                DialogueSample(
                    id=f"train-{i}-{j}",
                    u=tuple(u),
                    c=tuple(conn.split()),
                    R=tuple(RESPONSES[(i + j) % len(RESPONSES)].split()),
                    audio_ms=len(u) * ms_per_word,
                )
            )
    quota = None
    if lengths_ms is not None:
        quota = []
        for j in range(len(lengths_ms)):
            size = len(range(j, n, len(lengths_ms)))
            flags = [i < round(commit_rate * size) for i in range(size)]
            rng.shuffle(flags)
            quota.append(flags)
    scenarios = []
    for k in range(n):
        if quota is not None:
            commits = quota[k % len(lengths_ms)][k // len(lengths_ms)]
        else:
            commits = rng.random() < commit_rate
        if lengths_ms is not None:
            target = lengths_ms[k % len(lengths_ms)]
            n_words = max(4, target // ms_per_word)
        else:
            n_words = rng.randint(5, 24)
        if commits:
            cue, conn = CUES[rng.randrange(len(CUES))]
            ending = cue.split()
        else:
            cue, conn = rng.choice(OPEN_ENDINGS), None
            ending = cue.split()
        filler = [rng.choice(FILLER) for _ in range(max(0, n_words - len(ending)))]
        words = filler + ending
        audio_ms = len(words) * ms_per_word + rng.randint(0, ms_per_word // 2)
        if lengths_ms is not None:
            audio_ms = lengths_ms[k % len(lengths_ms)]
        timing = {
            "asr.final_tail_ms": rng.randint(*ranges.final_tail_ms),
            "llm.first_token_ms": rng.randint(*ranges.first_token_ms),
            "tts.first_chunk_ms": ranges.tts_first_chunk_ms,
        }
        if length_scaled:
            timing["asr.final_tail_ms"] += audio_ms // 25
            timing["llm.first_token_ms"] += audio_ms // 20
        transcript = " ".join(words)
        scenarios.append(
            Scenario(
                id=f"syn-{k:03d}",
                input_audio_ms=audio_ms,
                chunks=_partials(words, audio_ms),
                final_transcript=transcript,
                reference_connective=conn,
                reference_response=rng.choice(RESPONSES),
                timing=timing,
            )
        )
    return scenarios, training
