"""Pluggable ASR / small model / large model / TTS components.

The scripted and simulated implementations are deterministic functions of
(scenario, timing), which is what makes virtual-clock sessions replayable.
``RemoteLargeModel`` talks to a real endpoint over newline-delimited JSON.
"""

from __future__ import annotations

import json
import logging
import math
import re
import socket
import time
import urllib.error
import urllib.request
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping, Protocol, Sequence

from .coremath import DialogueSample, TokenDistribution, ValidationError, Vocabulary
from .policy import ConnectiveCandidate, PartialHypothesis

logger = logging.getLogger(__name__)

END_MARKER = "</c>"
CONNECTIVE = "connective"
MAIN = "main"

DEFAULT_TIMING: dict[str, float] = {
    "asr.final_tail_ms": 350,
    "small.eval_ms": 90,
    "small.connective_ms": 350,
    "small.step_ms": 0,
    "llm.first_token_ms": 600,
    "llm.per_token_ms": 30,
    "tts.first_chunk_ms": 150,
    "tts.chunk_duration_ms": 400,
    "tts.synth_speed": 2.0,
    "tts.ms_per_word": 300,
}


@dataclass(frozen=True)
class TimingConfig:
    """Component latencies in milliseconds (``tts.synth_speed`` is audio-ms per synth-ms)."""

    values: Mapping[str, float] = field(default_factory=lambda: dict(DEFAULT_TIMING))

    def __post_init__(self) -> None:
        merged = dict(DEFAULT_TIMING)
        for key, value in self.values.items():
            if key not in DEFAULT_TIMING:
                raise ValidationError(f"unknown timing key {key!r}")
            merged[key] = float(value)
        for key, value in merged.items():
            if value < 0 or math.isnan(value):
                raise ValidationError(f"timing {key} must be >= 0, got {value!r}")
        for key in ("tts.chunk_duration_ms", "tts.synth_speed", "tts.ms_per_word"):
            if merged[key] <= 0:
                raise ValidationError(f"timing {key} must be > 0")
        object.__setattr__(self, "values", merged)

    def __getitem__(self, key: str) -> float:
        return self.values[key]

    def ms(self, key: str) -> int:
        return int(round(self.values[key]))

    def with_overrides(self, overrides: Mapping[str, float] | None) -> TimingConfig:
        if not overrides:
            return self
        return TimingConfig({**self.values, **overrides})


# ---------------------------------------------------------------------------
# scenarios and ASR
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ScheduledPartial:
    end_ms: int
    partial: str


@dataclass(frozen=True)
class Scenario:
    id: str
    input_audio_ms: int
    chunks: tuple[ScheduledPartial, ...]
    final_transcript: str
    reference_connective: str | None = None
    reference_response: str | None = None
    timing: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.input_audio_ms <= 0:
            raise ValidationError(f"scenario {self.id!r}: input_audio_ms must be positive")
        prev = 0
        for ch in self.chunks:
            if ch.end_ms < prev:
                raise ValidationError(f"scenario {self.id!r}: partial times must be non-decreasing")
            if ch.end_ms > self.input_audio_ms:
                raise ValidationError(f"scenario {self.id!r}: partial at {ch.end_ms} ms after input end")
            prev = ch.end_ms
        if not self.final_transcript.strip():
            raise ValidationError(f"scenario {self.id!r}: final transcript is empty")
        for key in self.timing:
            if key not in DEFAULT_TIMING:
                raise ValidationError(f"scenario {self.id!r}: unknown timing key {key!r}")

    @classmethod
    def from_json(cls, row: Mapping) -> Scenario:
        try:
            ref = row.get("reference") or {}
            return cls(
                id=str(row["id"]),
                input_audio_ms=int(row["input_audio_ms"]),
                chunks=tuple(ScheduledPartial(int(c["end_ms"]), str(c["partial"])) for c in row["chunks"]),
                final_transcript=str(row["final_transcript"]),
                reference_connective=ref.get("connective"),
                reference_response=ref.get("response"),
                timing=dict(row.get("timing") or {}),
            )
        except KeyError as exc:
            raise ValidationError(f"scenario missing field {exc.args[0]!r}") from None
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ValidationError):
                raise
            raise ValidationError(f"malformed scenario: {exc}") from None

    def to_json(self) -> dict:
        row: dict = {
            "id": self.id,
            "input_audio_ms": self.input_audio_ms,
            "chunks": [{"end_ms": c.end_ms, "partial": c.partial} for c in self.chunks],
            "final_transcript": self.final_transcript,
        }
        if self.reference_connective is not None or self.reference_response is not None:
            row["reference"] = {"connective": self.reference_connective, "response": self.reference_response}
        if self.timing:
            row["timing"] = dict(self.timing)
        return row

    def input_chunk_times(self, chunk_ms: int = 500) -> list[int]:
        n = math.ceil(self.input_audio_ms / chunk_ms)
        return [min((i + 1) * chunk_ms, self.input_audio_ms) for i in range(n)]


def load_scenarios(path: str | Path) -> list[Scenario]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(Scenario.from_json(json.loads(line)))
            except (json.JSONDecodeError, ValidationError) as exc:
                raise ValidationError(f"{path}:{lineno}: {exc}") from None
    return out


def dump_scenarios(scenarios: Sequence[Scenario], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for sc in scenarios:
            fh.write(json.dumps(sc.to_json()) + "\n")


class AsrSource(Protocol):
    def hypotheses(self) -> Iterator[PartialHypothesis]: ...


class ScriptedAsr:
    """Replays a scenario's partial transcripts, then the final one after a tail."""

    def __init__(self, scenario: Scenario, final_tail_ms: int):
        self.scenario = scenario
        self.final_tail_ms = final_tail_ms

    def hypotheses(self) -> Iterator[PartialHypothesis]:
        step = 0
        for ch in self.scenario.chunks:
            step += 1
            yield PartialHypothesis(step, ch.partial, ch.end_ms, False, ch.end_ms)
        end = self.scenario.input_audio_ms
        yield PartialHypothesis(step + 1, self.scenario.final_transcript, end, True, end + self.final_tail_ms)


def scripted_asr_stream(scenario: Scenario, timing: TimingConfig | None = None) -> ScriptedAsr:
    timing = (timing or TimingConfig()).with_overrides(scenario.timing)
    return ScriptedAsr(scenario, timing.ms("asr.final_tail_ms"))


# ---------------------------------------------------------------------------
# small model
# ---------------------------------------------------------------------------

_WORD = re.compile(r"[a-z0-9']+")


def normalize_words(text: str) -> tuple[str, ...]:
    return tuple(_WORD.findall(text.lower()))


class TabularSmallModel:
    """Frequency-table connective predictor conditioned on the last words heard.

    The table maps the trailing 1..``order`` words of each user turn to the
    connectives that followed it.  A query uses the longest trailing context
    present in the table; with none, it falls back to the global connective
    counts mixed with a uniform distribution, so an unseen context always
    reads as less certain than a determined one.
    """

    def __init__(
        self,
        dataset: Sequence[DialogueSample],
        m: int = 5,
        order: int = 3,
        alpha: float = 1e-3,
        backoff_mix: float = 0.5,
    ):
        if not dataset:
            raise ValidationError("small model needs a non-empty dataset")
        self.m = m
        self.order = order
        self.alpha = alpha
        self.backoff_mix = backoff_mix
        self._context: dict[tuple[str, ...], Counter] = defaultdict(Counter)
        self._responses: dict[tuple[str, ...], Counter] = defaultdict(Counter)
        self._global: Counter = Counter()
        tokens = {END_MARKER}
        for sample in dataset:
            words = normalize_words(" ".join(sample.u))
            conn = tuple(sample.c)
            tokens.update(conn)
            self._global[conn] += 1
            self._responses[()][tuple(sample.R)] += 1
            for k in range(1, min(order, len(words)) + 1):
                self._context[words[-k:]][conn] += 1
                self._responses[words[-k:]][tuple(sample.R)] += 1
        self.vocab = Vocabulary(tuple(sorted(tokens)))
        self._connectives = sorted(c for c in self._global if c)

    def _lookup(self, words: tuple[str, ...]) -> tuple[tuple[str, ...] | None, Counter]:
        for k in range(min(self.order, len(words)), 0, -1):
            key = words[-k:]
            if key in self._context:
                return key, self._context[key]
        return None, self._global

    def _next_counts(self, counts: Counter, history: tuple[str, ...]) -> Counter:
        nxt: Counter = Counter()
        i = len(history)
        for conn, n in counts.items():
            if conn[:i] == history:
                nxt[conn[i] if len(conn) > i else END_MARKER] += n
        return nxt

    def _distribution(self, counts: Counter, history: tuple[str, ...], seen: bool) -> TokenDistribution:
        nxt = self._next_counts(counts, history)
        if not nxt:
            nxt = self._next_counts(self._global, history)
        V = self.vocab.size
        total = sum(nxt.values())
        probs = [(nxt.get(tok, 0) + self.alpha) / (total + self.alpha * V) for tok in self.vocab.tokens]
        if not seen:
            probs = [(1 - self.backoff_mix) * p + self.backoff_mix / V for p in probs]
        s = math.fsum(probs)
        return TokenDistribution(self.vocab, tuple(p / s for p in probs))

    def candidates(self, text: str, m: int | None = None) -> list[ConnectiveCandidate]:
        m = self.m if m is None else m
        words = normalize_words(text)
        key, counts = self._lookup(words)
        seen = key is not None
        ranked = sorted(self._connectives, key=lambda c: (-(counts.get(c, 0) + self.alpha), c))
        out = []
        for conn in ranked[:m]:
            toks = conn + (END_MARKER,)
            dists = tuple(self._distribution(counts, toks[:i], seen) for i in range(len(toks)))
            score = math.prod(d.prob(t) for d, t in zip(dists, toks))
            out.append(
                ConnectiveCandidate(
                    tokens=toks,
                    per_token_dists=dists,
                    is_marker=tuple(t == END_MARKER for t in toks),
                    model_score=min(1.0, score),
                )
            )
        return out

    def respond(self, text: str) -> list[str]:
        key, _ = self._lookup(normalize_words(text))
        table = self._responses[key if key is not None else ()]
        if not table:
            return []
        best = min(table.items(), key=lambda kv: (-kv[1], kv[0]))[0]
        return list(best)


def tabular_small_model(dataset: Sequence[DialogueSample], m: int = 5) -> TabularSmallModel:
    return TabularSmallModel(dataset, m=m)


# ---------------------------------------------------------------------------
# large model
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ResponseToken:
    text: str
    t_ms: int


class LargeModel(Protocol):
    def generate(self, transcript: str, t0: int) -> Iterator[ResponseToken]: ...


FALLBACK_RESPONSE = ("Sure.", "Let", "me", "think", "about", "that", "for", "you.")


class ScriptedLargeModel:
    def __init__(
        self,
        first_token_ms: int,
        per_token_ms: int,
        response_lookup: Mapping[str, Sequence[str]] | None = None,
        fallback: Sequence[str] = FALLBACK_RESPONSE,
    ):
        if first_token_ms < 0 or per_token_ms < 0:
            raise ValidationError("large-model durations must be non-negative")
        self.first_token_ms = first_token_ms
        self.per_token_ms = per_token_ms
        self.lookup = {k: tuple(v) for k, v in (response_lookup or {}).items()}
        self._normalized = {normalize_words(k): v for k, v in self.lookup.items()}
        self.fallback = tuple(fallback)

    def response_for(self, transcript: str) -> tuple[str, ...]:
        if transcript in self.lookup:
            return self.lookup[transcript]
        return self._normalized.get(normalize_words(transcript), self.fallback)

    def generate(self, transcript: str, t0: int) -> Iterator[ResponseToken]:
        for i, tok in enumerate(self.response_for(transcript)):
            yield ResponseToken(tok, t0 + self.first_token_ms + i * self.per_token_ms)


def scripted_large_model(first_token_ms, per_token_ms, response_lookup=None) -> ScriptedLargeModel:
    return ScriptedLargeModel(first_token_ms, per_token_ms, response_lookup)


class RemoteError(RuntimeError):
    """Large-model endpoint failed (connection refused, HTTP error, ...)."""


class RemoteTimeout(RemoteError):
    pass


class ProtocolError(RemoteError):
    def __init__(self, lineno: int, message: str):
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno


class RemoteLargeModel:
    """Streams tokens from an endpoint speaking newline-delimited JSON.

    Request: POST ``{"prompt": transcript, "stream": true}``.
    Response: one ``{"token": "..."}`` object per line until the connection closes.
    ``timeout_ms`` bounds every wait for bytes, including the first.
    """

    def __init__(self, endpoint: str, timeout_ms: int = 5000):
        self.endpoint = endpoint
        self.timeout_ms = timeout_ms

    def _open(self, transcript: str):
        body = json.dumps({"prompt": transcript, "stream": True}).encode()
        req = urllib.request.Request(
            self.endpoint, data=body, method="POST", headers={"Content-Type": "application/json"}
        )
        try:
            return urllib.request.urlopen(req, timeout=self.timeout_ms / 1000)
        except (socket.timeout, TimeoutError) as exc:
            raise RemoteTimeout(f"no response from {self.endpoint} within {self.timeout_ms} ms") from exc
        except urllib.error.URLError as exc:
            if isinstance(exc.reason, (socket.timeout, TimeoutError)):
                raise RemoteTimeout(f"no response from {self.endpoint} within {self.timeout_ms} ms") from exc
            raise RemoteError(f"cannot reach {self.endpoint}: {exc.reason}") from exc
        except OSError as exc:
            raise RemoteError(f"cannot reach {self.endpoint}: {exc}") from exc

    def generate(self, transcript: str, t0: int) -> Iterator[ResponseToken]:
        start = time.monotonic()
        resp = self._open(transcript)
        with resp:
            lineno = 0
            last_t = t0 - 1
            while True:
                try:
                    raw = resp.readline()
                except (socket.timeout, TimeoutError) as exc:
                    raise RemoteTimeout(f"stream stalled for {self.timeout_ms} ms after line {lineno}") from exc
                if not raw:
                    return
                lineno += 1
                line = raw.decode("utf-8", errors="replace").strip()
                if not line:
                    continue
                try:
                    event = json.loads(line)
                except json.JSONDecodeError:
                    raise ProtocolError(lineno, f"malformed JSON: {line[:60]!r}") from None
                if not isinstance(event, dict) or not isinstance(event.get("token"), str):
                    raise ProtocolError(lineno, "expected an object with a string 'token'")
                t = t0 + int((time.monotonic() - start) * 1000)
                t = max(t, last_t + 1)
                last_t = t
                yield ResponseToken(event["token"], t)


def remote_large_model(endpoint: str, timeout_ms: int = 5000) -> RemoteLargeModel:
    return RemoteLargeModel(endpoint, timeout_ms)


# ---------------------------------------------------------------------------
# TTS and playback
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AudioChunk:
    stream_id: str
    ready_ms: int
    play_start_ms: int
    duration_ms: int
    text_covered: str

    @property
    def play_end_ms(self) -> int:
        return self.play_start_ms + self.duration_ms


class TtsEngine(Protocol):
    def submit(self, stream_id: str, text: str, t_ms: int) -> list[AudioChunk]: ...


class SimulatedTts:
    """Chunked synthesis with a fixed first-chunk delay and a constant speed.

    Each stream keeps a playback cursor so later submissions queue behind
    earlier audio.  When synthesis falls behind playback the chunk starts at
    its ready time and the stream has an underrun gap.
    """

    def __init__(self, first_chunk_ms: int, ms_audio_per_ms_synth: float, chunk_duration_ms: int, ms_per_word: int = 300):
        if first_chunk_ms < 0 or ms_audio_per_ms_synth <= 0 or chunk_duration_ms <= 0 or ms_per_word <= 0:
            raise ValidationError("TTS timings must be positive")
        self.first_chunk_ms = first_chunk_ms
        self.speed = ms_audio_per_ms_synth
        self.chunk_duration_ms = chunk_duration_ms
        self.ms_per_word = ms_per_word
        self._cursor: dict[str, int] = {}
        self._synth_free: dict[str, int] = {}

    def submit(self, stream_id: str, text: str, t_ms: int) -> list[AudioChunk]:
        words = text.split()
        if not words:
            return []
        n = math.ceil(len(words) * self.ms_per_word / self.chunk_duration_ms)
        start = max(t_ms, self._synth_free.get(stream_id, t_ms))
        per_chunk = self.chunk_duration_ms / self.speed
        cursor = self._cursor.get(stream_id)
        chunks = []
        for i in range(n):
            ready = start + self.first_chunk_ms + int(round(i * per_chunk))
            play = ready if cursor is None else max(ready, cursor)
            lo, hi = (i * len(words)) // n, ((i + 1) * len(words)) // n
            chunks.append(AudioChunk(stream_id, ready, play, self.chunk_duration_ms, " ".join(words[lo:hi])))
            cursor = play + self.chunk_duration_ms
        self._cursor[stream_id] = cursor
        self._synth_free[stream_id] = start + self.first_chunk_ms + int(round((n - 1) * per_chunk))
        return chunks


def simulated_tts(first_chunk_ms, ms_audio_per_ms_synth, chunk_duration_ms, ms_per_word=300) -> SimulatedTts:
    return SimulatedTts(first_chunk_ms, ms_audio_per_ms_synth, chunk_duration_ms, ms_per_word)


def _check_stream(chunks: Sequence[AudioChunk], name: str) -> None:
    for prev, cur in zip(chunks, chunks[1:]):
        if cur.play_start_ms < prev.play_end_ms:
            raise ValidationError(f"{name} stream chunks overlap at {cur.play_start_ms} ms")
    for ch in chunks:
        if ch.play_start_ms < ch.ready_ms:
            raise ValidationError(f"{name} chunk plays at {ch.play_start_ms} before it is ready at {ch.ready_ms}")


def concat_streams(
    connective_chunks: Sequence[AudioChunk],
    main_chunks: Sequence[AudioChunk],
    not_before_ms: int | None = None,
) -> list[AudioChunk]:
    """Play the connective first, then the main response as soon as both allow.

    ``not_before_ms`` holds all playback until that time (the user is still
    talking); chunks keep their order and the player never runs ahead of synthesis.
    """
    _check_stream(connective_chunks, CONNECTIVE)
    _check_stream(main_chunks, MAIN)
    merged = []
    cursor = not_before_ms
    for ch in [*connective_chunks, *main_chunks]:
        start = ch.ready_ms if cursor is None else max(ch.ready_ms, cursor)
        if ch.stream_id == CONNECTIVE:
            start = max(start, ch.play_start_ms)
        moved = AudioChunk(ch.stream_id, ch.ready_ms, start, ch.duration_ms, ch.text_covered)
        merged.append(moved)
        cursor = moved.play_end_ms
    return merged
