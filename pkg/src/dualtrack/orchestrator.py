"""Run one dialogue turn under SSC, SDC or DDTSR and record a timestamped trace.

The same session logic drives both clocks.  ``VirtualScheduler`` is a
discrete-event queue ordered by (time, insertion sequence), so runs are
bit-reproducible.  ``RealtimeScheduler`` keeps the same single-threaded
event loop but waits on the wall clock, and lets worker threads (the large
model stream) post results into an ordered inbox.
"""

from __future__ import annotations

import enum
import heapq
import itertools
import json
import logging
import queue
import re
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Iterator, Sequence

from .components import (
    CONNECTIVE,
    MAIN,
    AsrSource,
    AudioChunk,
    LargeModel,
    ResponseToken,
    Scenario,
    ScriptedAsr,
    ScriptedLargeModel,
    SimulatedTts,
    TimingConfig,
    TtsEngine,
    concat_streams,
)
from .coremath import DialogueSample, ValidationError
from .policy import CommitDecision, CommitLatch, PartialHypothesis, PolicyConfig, SmallModel, evaluate_step

logger = logging.getLogger(__name__)

UNIT_MAX_TOKENS = 12
_SENTENCE_END = re.compile(r"[.!?]['\")\]]*$")

EVENT_KINDS = (
    "input_chunk_sent",
    "asr_partial",
    "asr_final",
    "small_eval",
    "commit",
    "connective_text",
    "large_invoked",
    "large_first_token",
    "tts_chunk_ready",
    "audio_play_start",
    "audio_play_end",
    "handoff",
    "error",
)


class Strategy(str, enum.Enum):
    SSC = "SSC"
    SDC = "SDC"
    DDTSR = "DDTSR"

    @classmethod
    def parse(cls, value: str) -> Strategy:
        try:
            return cls(value.upper())
        except ValueError:
            raise ValidationError(f"unknown strategy {value!r}") from None


class SessionError(RuntimeError):
    pass


@dataclass(frozen=True)
class TraceEvent:
    kind: str
    t_ms: int
    payload: dict = field(default_factory=dict)


@dataclass
class SessionTrace:
    session_id: str
    strategy: Strategy
    events: list[TraceEvent] = field(default_factory=list)

    @property
    def connective_emitted(self) -> bool:
        return any(e.kind == "commit" for e in self.events)

    @property
    def failed(self) -> bool:
        return any(e.kind == "error" for e in self.events)

    @property
    def input_audio_ms(self) -> int | None:
        sent = self.times("input_chunk_sent")
        return sent[-1] if sent else None

    def times(self, kind: str) -> list[int]:
        return [e.t_ms for e in self.events if e.kind == kind]

    def first(self, kind: str) -> TraceEvent | None:
        return next((e for e in self.events if e.kind == kind), None)

    def to_jsonl(self) -> str:
        lines = []
        for seq, ev in enumerate(self.events):
            row = {
                "session": self.session_id,
                "strategy": self.strategy.value,
                "seq": seq,
                "kind": ev.kind,
                "t_ms": ev.t_ms,
                "payload": dict(sorted(ev.payload.items())),
            }
            lines.append(json.dumps(row, ensure_ascii=False))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_jsonl(cls, text: str) -> list[SessionTrace]:
        traces: dict[tuple[str, str], SessionTrace] = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                key = (row["session"], row["strategy"])
                ev = TraceEvent(row["kind"], int(row["t_ms"]), row.get("payload") or {})
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ValidationError(f"trace line {lineno}: {exc}") from None
            if key not in traces:
                traces[key] = cls(key[0], Strategy.parse(key[1]))
            traces[key].events.append(ev)
        return list(traces.values())


# ---------------------------------------------------------------------------
# schedulers
# ---------------------------------------------------------------------------


class VirtualScheduler:
    def __init__(self) -> None:
        self._queue: list[tuple[int, int, Callable, tuple]] = []
        self._seq = itertools.count()
        self._now = 0
        self._stopped = False

    def now(self) -> int:
        return self._now

    def call_at(self, t_ms: int, fn: Callable, *args: Any) -> None:
        heapq.heappush(self._queue, (max(int(t_ms), self._now), next(self._seq), fn, args))

    def stream(self, items: Iterator[ResponseToken], on_item: Callable, on_done: Callable, on_error: Callable) -> None:
        last = self._now
        try:
            for item in items:
                self.call_at(item.t_ms, on_item, item)
                last = max(last, item.t_ms)
        except Exception as exc:  # component failure becomes a trace event
            self.call_at(self._now, on_error, exc)
            return
        self.call_at(last, on_done)

    def stop(self) -> None:
        self._stopped = True

    def run(self) -> None:
        while self._queue and not self._stopped:
            t, _, fn, args = heapq.heappop(self._queue)
            self._now = t
            fn(*args)


class RealtimeScheduler:
    """Wall-clock event loop; timers and worker results are handled on one thread."""

    def __init__(self, deadline_ms: int = 60_000) -> None:
        self._t0 = time.monotonic()
        self._timers: list[tuple[int, int, Callable, tuple]] = []
        self._seq = itertools.count()
        self._inbox: queue.Queue = queue.Queue()
        self._workers = 0
        self._stopped = False
        self.deadline_ms = deadline_ms

    def now(self) -> int:
        return int((time.monotonic() - self._t0) * 1000)

    def call_at(self, t_ms: int, fn: Callable, *args: Any) -> None:
        heapq.heappush(self._timers, (int(t_ms), next(self._seq), fn, args))

    def _sleep_until(self, t_ms: int) -> None:
        delay = (t_ms - self.now()) / 1000
        if delay > 0:
            time.sleep(delay)

    def stream(self, items: Iterator[ResponseToken], on_item: Callable, on_done: Callable, on_error: Callable) -> None:
        self._workers += 1

        def worker() -> None:
            try:
                for item in items:
                    self._sleep_until(item.t_ms)
                    self._inbox.put((on_item, (item,)))
                self._inbox.put((on_done, ()))
            except Exception as exc:  # component failure becomes a trace event
                self._inbox.put((on_error, (exc,)))
            finally:
                self._inbox.put(None)

        threading.Thread(target=worker, daemon=True).start()

    def stop(self) -> None:
        self._stopped = True

    def run(self) -> None:
        while not self._stopped and (self._timers or self._workers or not self._inbox.empty()):
            if self.now() > self.deadline_ms:
                raise SessionError(f"session exceeded {self.deadline_ms} ms")
            if self._timers and self._timers[0][0] <= self.now():
                _, _, fn, args = heapq.heappop(self._timers)
                fn(*args)
                continue
            wait = (self._timers[0][0] - self.now()) / 1000 if self._timers else 0.05
            try:
                msg = self._inbox.get(timeout=max(0.0, min(wait, 0.05)))
            except queue.Empty:
                continue
            if msg is None:
                self._workers -= 1
                continue
            fn, args = msg
            fn(*args)


# ---------------------------------------------------------------------------
# components bundle
# ---------------------------------------------------------------------------


@dataclass
class Components:
    asr: AsrSource
    small: SmallModel | None
    large: LargeModel
    tts_connective: TtsEngine
    tts_main: TtsEngine
    timing: TimingConfig


def simulated_components(
    scenario: Scenario,
    timing: TimingConfig,
    small: SmallModel | None,
    large: LargeModel | None = None,
    response_lookup: dict[str, Sequence[str]] | None = None,
) -> Components:
    t = timing.with_overrides(scenario.timing)
    if large is None:
        lookup = dict(response_lookup or {})
        if scenario.reference_response:
            lookup.setdefault(scenario.final_transcript, scenario.reference_response.split())
        large = ScriptedLargeModel(t.ms("llm.first_token_ms"), t.ms("llm.per_token_ms"), lookup)

    def tts() -> SimulatedTts:
        return SimulatedTts(
            t.ms("tts.first_chunk_ms"), t["tts.synth_speed"], t.ms("tts.chunk_duration_ms"), t.ms("tts.ms_per_word")
        )

    return Components(ScriptedAsr(scenario, t.ms("asr.final_tail_ms")), small, large, tts(), tts(), t)


@dataclass
class SimulationSetup:
    """Default per-session component factory for scripted simulation."""

    timing: TimingConfig
    small: SmallModel | None
    large: LargeModel | None = None
    response_lookup: dict[str, Sequence[str]] | None = None

    def __call__(self, scenario: Scenario, seed: int = 0) -> Components:
        return simulated_components(scenario, self.timing, self.small, self.large, self.response_lookup)


def dialogues_from_scenarios(scenarios: Iterable[Scenario]) -> list[DialogueSample]:
    """Training rows for the tabular small model from scenario references."""
    out = []
    for sc in scenarios:
        if sc.reference_connective is None:
            continue
        out.append(
            DialogueSample(
                id=sc.id,
                u=tuple(sc.final_transcript.split()),
                c=tuple(sc.reference_connective.split()),
                R=tuple((sc.reference_response or "").split()),
                audio_ms=sc.input_audio_ms,
            )
        )
    return out


# ---------------------------------------------------------------------------
# session
# ---------------------------------------------------------------------------


class _Session:
    def __init__(self, scenario: Scenario, strategy: Strategy, comp: Components, policy: PolicyConfig, sched):
        self.sc = scenario
        self.strategy = strategy
        self.comp = comp
        self.policy = policy
        self.sched = sched
        self.trace = SessionTrace(scenario.id, strategy)
        self.latch = CommitLatch()
        self.busy = False
        self.pending: PartialHypothesis | None = None
        self.last_eval_ms: int | None = None
        self.conn_chunks: list[AudioChunk] = []
        self.main_chunks: list[AudioChunk] = []
        self.unit: list[str] = []
        self.n_tokens = 0
        self.dead = False
        if strategy is not Strategy.SSC and comp.small is None:
            raise ValidationError(f"{strategy.value} needs a small model")

    # -- bookkeeping ---------------------------------------------------------

    def log(self, kind: str, t_ms: int | None = None, **payload: Any) -> None:
        self.trace.events.append(TraceEvent(kind, self.sched.now() if t_ms is None else int(t_ms), payload))

    def guarded(self, fn: Callable) -> Callable:
        def wrapper(*args: Any) -> None:
            if self.dead:
                return
            try:
                fn(*args)
            except Exception as exc:
                self.fail(exc)

        return wrapper

    def fail(self, exc: BaseException) -> None:
        if self.dead:
            return
        logger.warning("session %s (%s) failed: %s", self.sc.id, self.strategy.value, exc)
        self.log("error", type=type(exc).__name__, message=str(exc))
        self.dead = True
        self.sched.stop()

    # -- input and ASR --------------------------------------------------------

    def start(self) -> None:
        for i, t in enumerate(self.sc.input_chunk_times(), 1):
            self.sched.call_at(t, self.guarded(self.on_input_chunk), i)
        for hyp in self.comp.asr.hypotheses():
            self.sched.call_at(hyp.t_ms, self.guarded(self.on_hypothesis), hyp)

    def on_input_chunk(self, index: int) -> None:
        self.log("input_chunk_sent", index=index)

    def on_hypothesis(self, hyp: PartialHypothesis) -> None:
        kind = "asr_final" if hyp.is_final else "asr_partial"
        self.log(kind, step=hyp.step, text=hyp.text, audio_offset_ms=hyp.audio_offset_ms)
        if self.strategy is Strategy.DDTSR and hyp.text.strip():
            self.request_eval(hyp)
        if hyp.is_final:
            if self.strategy is Strategy.SDC:
                self.request_eval(hyp)
            self.invoke_large(hyp.text)

    # -- small model ----------------------------------------------------------

    def request_eval(self, hyp: PartialHypothesis) -> None:
        if self.latch.committed:
            return
        step_ms = self.comp.timing.ms("small.step_ms")
        now = self.sched.now()
        if (
            step_ms
            and not hyp.is_final
            and self.last_eval_ms is not None
            and now - self.last_eval_ms < step_ms
        ):
            return
        if self.busy:
            self.pending = hyp
            return
        self.start_eval(hyp)

    def start_eval(self, hyp: PartialHypothesis) -> None:
        self.busy = True
        self.last_eval_ms = self.sched.now()
        decision = evaluate_step(self.comp.small, hyp, self.policy)
        done = self.sched.now() + self.comp.timing.ms("small.eval_ms")
        self.sched.call_at(done, self.guarded(self.finish_eval), decision)

    def finish_eval(self, decision: CommitDecision) -> None:
        self.busy = False
        if self.latch.committed:
            return  # late evaluation after commit, dropped
        self.log(
            "small_eval",
            step=decision.step,
            conf=round(decision.conf, 9),
            sig=decision.sig,
            candidates=[c.text for c in decision.candidates],
        )
        if self.latch.offer(decision):
            text = decision.chosen.text
            self.log("commit", step=decision.step, connective=text, conf=round(decision.conf, 9))
            ready = self.sched.now() + self.comp.timing.ms("small.connective_ms")
            self.sched.call_at(ready, self.guarded(self.emit_connective), text)
            self.pending = None
            return
        if self.pending is not None:
            nxt, self.pending = self.pending, None
            self.start_eval(nxt)

    def emit_connective(self, text: str) -> None:
        self.log("connective_text", text=text)
        chunks = self.comp.tts_connective.submit(CONNECTIVE, text, self.sched.now())
        self.conn_chunks.extend(chunks)
        for i, ch in enumerate(chunks):
            self.sched.call_at(ch.ready_ms, self.guarded(self.on_chunk_ready), ch, i)

    # -- large model and main TTS --------------------------------------------

    def invoke_large(self, transcript: str) -> None:
        self.log("large_invoked", transcript=transcript)
        items = self.comp.large.generate(transcript, self.sched.now())
        self.sched.stream(items, self.guarded(self.on_token), self.guarded(self.on_large_done), self.fail)

    def on_token(self, tok: ResponseToken) -> None:
        if self.n_tokens == 0:
            self.log("large_first_token", t_ms=tok.t_ms, token=tok.text)
        self.n_tokens += 1
        self.unit.append(tok.text)
        if _SENTENCE_END.search(tok.text) or len(self.unit) >= UNIT_MAX_TOKENS:
            self.flush_unit()

    def on_large_done(self) -> None:
        if self.n_tokens == 0:
            raise SessionError("large model returned no tokens")
        self.flush_unit()

    def flush_unit(self) -> None:
        if not self.unit:
            return
        text, self.unit = " ".join(self.unit), []
        start = len(self.main_chunks)
        chunks = self.comp.tts_main.submit(MAIN, text, self.sched.now())
        self.main_chunks.extend(chunks)
        for i, ch in enumerate(chunks, start):
            self.sched.call_at(ch.ready_ms, self.guarded(self.on_chunk_ready), ch, i)

    def on_chunk_ready(self, chunk: AudioChunk, index: int) -> None:
        self.log("tts_chunk_ready", stream=chunk.stream_id, index=index, text=chunk.text_covered)

    # -- playback -------------------------------------------------------------

    def finish(self) -> SessionTrace:
        if not self.dead:
            try:
                self.lay_out_playback()
            except Exception as exc:
                self.fail(exc)
        self.trace.events.sort(key=lambda e: e.t_ms)
        return self.trace

    def lay_out_playback(self) -> None:
        if not self.main_chunks:
            raise SessionError("no main-stream audio was produced")
        timeline = concat_streams(self.conn_chunks, self.main_chunks, self.trace.input_audio_ms)
        counters = {CONNECTIVE: 0, MAIN: 0}
        conn_end = None
        for ch in timeline:
            i = counters[ch.stream_id]
            counters[ch.stream_id] += 1
            if ch.stream_id == CONNECTIVE:
                conn_end = ch.play_end_ms
            if ch.stream_id == MAIN and i == 0 and conn_end is not None:
                self.log("handoff", t_ms=ch.play_start_ms, handoff_gap_ms=ch.play_start_ms - conn_end)
            self.log("audio_play_start", t_ms=ch.play_start_ms, stream=ch.stream_id, index=i)
            self.log("audio_play_end", t_ms=ch.play_end_ms, stream=ch.stream_id, index=i)


def run_session(
    scenario: Scenario,
    strategy: Strategy | str,
    components: Components,
    policy: PolicyConfig = PolicyConfig(),
    clock: str = "virtual",
) -> SessionTrace:
    """Execute one turn; failures end the trace with an ``error`` event instead of raising."""
    strategy = Strategy.parse(strategy) if isinstance(strategy, str) else strategy
    if clock == "virtual":
        sched = VirtualScheduler()
    elif clock == "realtime":
        sched = RealtimeScheduler()
    else:
        raise ValidationError(f"unknown clock {clock!r}")
    session = _Session(scenario, strategy, components, policy, sched)
    try:
        session.start()
        sched.run()
    except Exception as exc:
        session.fail(exc)
    return session.finish()


def run_batch(
    scenarios: Sequence[Scenario],
    strategy: Strategy | str,
    factory: Callable[[Scenario, int], Components],
    policy: PolicyConfig = PolicyConfig(),
    seed: int = 0,
    clock: str = "virtual",
    jobs: int = 1,
) -> list[SessionTrace]:
    """Independent sessions, returned in input order whatever the completion order."""

    def one(item: tuple[int, Scenario]) -> SessionTrace:
        idx, sc = item
        try:
            comp = factory(sc, seed + idx)
        except Exception as exc:
            trace = SessionTrace(sc.id, Strategy.parse(strategy) if isinstance(strategy, str) else strategy)
            trace.events.append(TraceEvent("error", 0, {"type": type(exc).__name__, "message": str(exc)}))
            return trace
        return run_session(sc, strategy, comp, policy, clock)

    items = list(enumerate(scenarios))
    if jobs <= 1:
        return [one(it) for it in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(one, items))


def dump_traces(traces: Iterable[SessionTrace]) -> str:
    return "".join(t.to_jsonl() for t in traces)
