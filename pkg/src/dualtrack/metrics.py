"""Perception / reaction / waiting latency from session traces, and reports over them."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from statistics import fmean
from typing import Iterable, Sequence

from .coremath import ValidationError
from .orchestrator import SessionTrace, Strategy

METRICS = ("perception", "reaction", "waiting")
SPLITS = ("opt", "rem", "avg")
BUCKETS = (("0-3s", 0, 3000), ("3-6s", 3000, 6000), ("6-9+s", 6000, None))
STRATEGY_ORDER = (Strategy.SSC, Strategy.SDC, Strategy.DDTSR)


class MeasurementError(ValueError):
    """Trace lacks an event the latency definitions need."""


@dataclass(frozen=True)
class LatencyBreakdown:
    session_id: str
    strategy: Strategy
    perception_ms: int
    reaction_ms: int
    waiting_ms: int
    connective_emitted: bool
    input_audio_ms: int

    def value(self, metric: str) -> int:
        return getattr(self, f"{metric}_ms")


def response_trigger_ms(trace: SessionTrace) -> int:
    """When the system starts producing content: the commit if a connective went out, else the large-model call."""
    kind = "commit" if trace.connective_emitted else "large_invoked"
    t = trace.times(kind)
    if not t:
        raise MeasurementError(f"trace {trace.session_id}: missing {kind} event")
    return t[0]


def latency_breakdown(trace: SessionTrace) -> LatencyBreakdown:
    sent = trace.times("input_chunk_sent")
    if not sent:
        raise MeasurementError(f"trace {trace.session_id}: missing input_chunk_sent event")
    audio = trace.times("audio_play_start")
    if not audio:
        raise MeasurementError(f"trace {trace.session_id}: missing audio_play_start event")
    input_end = sent[-1]
    response_start = max(input_end, response_trigger_ms(trace))
    perception = response_start - input_end
    reaction = min(audio) - response_start
    if reaction < 0:
        raise MeasurementError(f"trace {trace.session_id}: audio starts before the response trigger")
    return LatencyBreakdown(
        session_id=trace.session_id,
        strategy=trace.strategy,
        perception_ms=perception,
        reaction_ms=reaction,
        waiting_ms=perception + reaction,
        connective_emitted=trace.connective_emitted,
        input_audio_ms=input_end,
    )


def breakdowns(traces: Iterable[SessionTrace]) -> list[LatencyBreakdown]:
    """Breakdowns for every trace that did not end in an error."""
    return [latency_breakdown(t) for t in traces if not t.failed]


# ---------------------------------------------------------------------------
# Opt / Rem / Avg aggregation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AggregateRow:
    dataset: str
    strategy: Strategy
    model: str
    n_opt: int
    n_rem: int
    cells: dict[tuple[str, str], float | None] = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.n_opt + self.n_rem

    def get(self, metric: str, split: str) -> float | None:
        return self.cells[(metric, split)]


@dataclass(frozen=True)
class AggregateReport:
    rows: tuple[AggregateRow, ...]

    def row(self, strategy: Strategy | str, dataset: str | None = None, model: str | None = None) -> AggregateRow:
        strategy = Strategy.parse(strategy) if isinstance(strategy, str) else strategy
        for r in self.rows:
            if r.strategy is strategy and dataset in (None, r.dataset) and model in (None, r.model):
                return r
        raise KeyError(strategy)


def _mean(values: Sequence[int]) -> float | None:
    return fmean(values) if values else None


def aggregate(items: Sequence[LatencyBreakdown], dataset: str = "synthetic", model: str = "scripted") -> AggregateReport:
    """Per-strategy means over sessions with a connective (Opt), without (Rem) and all (Avg).

    SSC never produces a connective, so its split columns are left absent
    rather than repeating the overall mean.
    """
    rows = []
    for strategy in STRATEGY_ORDER:
        group = [b for b in items if b.strategy is strategy]
        if not group:
            continue
        opt = [b for b in group if b.connective_emitted]
        rem = [b for b in group if not b.connective_emitted]
        cells: dict[tuple[str, str], float | None] = {}
        for metric in METRICS:
            cells[(metric, "avg")] = _mean([b.value(metric) for b in group])
            if strategy is Strategy.SSC:
                cells[(metric, "opt")] = cells[(metric, "rem")] = None
            else:
                cells[(metric, "opt")] = _mean([b.value(metric) for b in opt])
                cells[(metric, "rem")] = _mean([b.value(metric) for b in rem])
        rows.append(AggregateRow(dataset, strategy, model, len(opt), len(rem), cells))
    return AggregateReport(tuple(rows))


def merge_reports(*reports: AggregateReport) -> AggregateReport:
    return AggregateReport(tuple(r for rep in reports for r in rep.rows))


# ---------------------------------------------------------------------------
# audio-length stratification
# ---------------------------------------------------------------------------


def bucket_of(input_audio_ms: int) -> str:
    for name, lo, hi in BUCKETS:
        if input_audio_ms >= lo and (hi is None or input_audio_ms < hi):
            return name
    raise ValidationError(f"negative input length {input_audio_ms}")


@dataclass(frozen=True)
class LengthStratifiedReport:
    means: dict[tuple[str, Strategy, str], float]
    counts: dict[tuple[str, Strategy], int]
    reduction: dict[str, float]

    def mean(self, bucket: str, strategy: Strategy | str, metric: str) -> float | None:
        strategy = Strategy.parse(strategy) if isinstance(strategy, str) else strategy
        return self.means.get((bucket, strategy, metric))


def stratify(items: Sequence[LatencyBreakdown]) -> LengthStratifiedReport:
    grouped: dict[tuple[str, Strategy], list[LatencyBreakdown]] = {}
    for b in items:
        grouped.setdefault((bucket_of(b.input_audio_ms), b.strategy), []).append(b)
    means = {}
    counts = {}
    for (bucket, strategy), group in grouped.items():
        counts[(bucket, strategy)] = len(group)
        for metric in METRICS:
            means[(bucket, strategy, metric)] = fmean(b.value(metric) for b in group)
    reduction = {}
    for name, _, _ in BUCKETS:
        ours = means.get((name, Strategy.DDTSR, "waiting"))
        base = means.get((name, Strategy.SSC, "waiting"))
        if ours is not None and base:
            reduction[name] = 1.0 - ours / base
    return LengthStratifiedReport(means, counts, reduction)


def overall_reduction(items: Sequence[LatencyBreakdown], strategy: Strategy = Strategy.DDTSR) -> float:
    ours = [b.waiting_ms for b in items if b.strategy is strategy]
    base = [b.waiting_ms for b in items if b.strategy is Strategy.SSC]
    if not ours or not base:
        raise ValidationError("reduction needs both strategies")
    return 1.0 - fmean(ours) / fmean(base)


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------


def _cell(value: float | None) -> str:
    return "-" if value is None else str(int(round(value)))


def _aggregate_table(report: AggregateReport) -> tuple[list[str], list[list[str]]]:
    header = ["Dataset", "Strategy", "Large Model", "N", "N Opt", "N Rem"]
    header += [f"{m.capitalize()} {s.capitalize()}" for m in METRICS for s in SPLITS]
    body = []
    for r in report.rows:
        line = [r.dataset, r.strategy.value, r.model, str(r.n), str(r.n_opt), str(r.n_rem)]
        line += [_cell(r.get(m, s)) for m in METRICS for s in SPLITS]
        body.append(line)
    return header, body


def _stratified_table(report: LengthStratifiedReport) -> tuple[list[str], list[list[str]]]:
    header = ["Bucket", "Strategy", "N"] + [m.capitalize() for m in METRICS] + ["Waiting Reduction vs SSC"]
    body = []
    for name, _, _ in BUCKETS:
        for strategy in STRATEGY_ORDER:
            if (name, strategy) not in report.counts:
                continue
            line = [name, strategy.value, str(report.counts[(name, strategy)])]
            line += [_cell(report.means[(name, strategy, m)]) for m in METRICS]
            red = report.reduction.get(name) if strategy is Strategy.DDTSR else None
            line.append("-" if red is None else f"{red * 100:.1f}%")
            body.append(line)
    return header, body


def render(report: AggregateReport | LengthStratifiedReport, format: str = "markdown") -> str:
    if isinstance(report, AggregateReport):
        header, body = _aggregate_table(report)
    elif isinstance(report, LengthStratifiedReport):
        header, body = _stratified_table(report)
    else:
        raise ValidationError(f"cannot render {type(report).__name__}")
    if format == "markdown":
        lines = ["| " + " | ".join(header) + " |", "|" + "|".join("---" for _ in header) + "|"]
        lines += ["| " + " | ".join(row) + " |" for row in body]
        return "\n".join(lines) + "\n"
    if format == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(body)
        return buf.getvalue()
    raise ValidationError(f"unknown report format {format!r}")


def plot_data(report: LengthStratifiedReport) -> str:
    """Long-format CSV (bucket, strategy, metric, value) of per-bucket mean latencies."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["bucket", "strategy", "metric", "value"])
    for name, _, _ in BUCKETS:
        for strategy in STRATEGY_ORDER:
            for metric in METRICS:
                value = report.means.get((name, strategy, metric))
                if value is not None:
                    writer.writerow([name, strategy.value, metric, repr(value)])
    return buf.getvalue()


def reduction_data(report: LengthStratifiedReport) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["bucket", "waiting_reduction"])
    for name, _, _ in BUCKETS:
        if name in report.reduction:
            writer.writerow([name, repr(report.reduction[name])])
    return buf.getvalue()
