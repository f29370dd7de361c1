"""Command-line entry point: ``dualtrack <subcommand> ...``.

Exit codes: 0 success, 1 validation or configuration error, 2 runtime or
session error, 3 remote-endpoint error.  Logs go to stderr; data goes to
files under ``--out`` or to stdout.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

from . import __version__
from .components import (
    ProtocolError,
    RemoteError,
    RemoteLargeModel,
    TabularSmallModel,
    dump_scenarios,
    load_scenarios,
)
from .config import DEFAULT_SEED, DEFAULTS, RunConfig
from .coremath import (
    EmptyCandidateError,
    LossWeights,
    TabularOracle,
    UnknownTokenError,
    ValidationError,
    coherence_loss,
    connective_distribution,
    curriculum_plan,
    load_dialogues,
    prior_regularization_loss,
    style_consistency_loss,
    total_loss,
)
from .metrics import (
    aggregate,
    breakdowns,
    merge_reports,
    overall_reduction,
    plot_data,
    reduction_data,
    render,
    stratify,
)
from .miner import (
    LlmAnnotator,
    Lexicons,
    ParseError,
    dataset_stats,
    load_corpus,
    load_records,
    mine,
    record_from_json,
    record_to_json,
    split_dataset,
)
from .orchestrator import SimulationSetup, Strategy, dialogues_from_scenarios, dump_traces, run_batch
from .synth import synthetic_batch

logger = logging.getLogger("dualtrack")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME, EXIT_REMOTE = 0, 1, 2, 3
REMOTE_ERRORS = {"RemoteError", "RemoteTimeout", "ProtocolError"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# ---------------------------------------------------------------------------
# simulate / compare
# ---------------------------------------------------------------------------


def _load_run(args) -> tuple[RunConfig, list, TabularSmallModel | None]:
    overrides = {"seed": args.seed}
    if getattr(args, "dialogues", None):
        overrides["paths.dialogues"] = str(Path(args.dialogues).resolve())
    cfg = RunConfig.load(args.config, overrides)
    scenarios = load_scenarios(args.scenarios)
    if not scenarios:
        raise ValidationError(f"{args.scenarios}: no scenarios")
    path = cfg.dialogues_path
    dialogues = load_dialogues(path) if path else dialogues_from_scenarios(scenarios)
    small = TabularSmallModel(dialogues, m=cfg.policy.m) if dialogues else None
    return cfg, scenarios, small


def _run_strategies(args, cfg: RunConfig, scenarios, small, strategies: Sequence[Strategy]):
    large = None
    clock = "virtual"
    if getattr(args, "realtime", False):
        large = RemoteLargeModel(args.llm_endpoint, int(cfg["llm.timeout_ms"]))
        clock = "realtime"
    if small is None and any(s is not Strategy.SSC for s in strategies):
        raise ValidationError("no dialogues with connectives to build the small model from (see --dialogues)")
    setup = SimulationSetup(cfg.timing, small, large)
    out = {}
    for strategy in strategies:
        out[strategy] = run_batch(scenarios, strategy, setup, cfg.policy, cfg.seed, clock, args.jobs)
    return out


def _failure_code(traces_by_strategy) -> int:
    code = EXIT_OK
    for traces in traces_by_strategy.values():
        for t in traces:
            if t.failed:
                err = t.first("error")
                if err.payload.get("type") in REMOTE_ERRORS:
                    return EXIT_REMOTE
                code = EXIT_RUNTIME
    return code


def _write(out_dir: Path, name: str, text: str) -> None:
    (out_dir / name).write_text(text, encoding="utf-8")


def cmd_simulate(args) -> int:
    if args.realtime and not args.llm_endpoint:
        raise ValidationError("--realtime requires --llm-endpoint")
    cfg, scenarios, small = _load_run(args)
    strategies = list(Strategy) if args.strategy == "all" else [Strategy.parse(args.strategy)]
    results = _run_strategies(args, cfg, scenarios, small, strategies)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    items = []
    for strategy, traces in results.items():
        _write(out, f"traces_{strategy.value.lower()}.jsonl", dump_traces(traces))
        items += breakdowns(traces)
    model = cfg["report.model"]
    if args.realtime and model == DEFAULTS["report.model"]:
        model = "remote"
    report = aggregate(items, cfg["report.dataset"], model)
    strat = stratify(items)
    _write(out, "report.md", render(report, "markdown"))
    _write(out, "report.csv", render(report, "csv"))
    _write(out, "stratified.md", render(strat, "markdown"))
    _write(out, "plot.csv", plot_data(strat))
    _write(out, "reduction.csv", reduction_data(strat))
    sys.stdout.write(render(report, "markdown"))
    return _failure_code(results)


def cmd_compare(args) -> int:
    cfg, scenarios, small = _load_run(args)
    results = _run_strategies(args, cfg, scenarios, small, list(Strategy))
    items = [b for traces in results.values() for b in breakdowns(traces)]
    report = merge_reports(aggregate(items, cfg["report.dataset"], cfg["report.model"]))
    text = render(report, "markdown")
    try:
        red = overall_reduction(items)
        text += f"\nDDTSR waiting reduction vs SSC: {red * 100:.1f}%\n"
    except ValidationError:
        pass
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write(out, "compare.md", text)
    sys.stdout.write(text)
    return _failure_code(results)


# ---------------------------------------------------------------------------
# dataset tools
# ---------------------------------------------------------------------------


def cmd_mine(args) -> int:
    rows = load_corpus(args.input)
    lexicons = Lexicons.load(args.lexicons)
    annotator = None
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    if args.llm_endpoint:
        progress = out.with_name(out.name + ".progress")
        annotator = LlmAnnotator.remote(args.llm_endpoint, progress_path=progress, max_in_flight=args.jobs)
    records = mine(rows, lexicons, annotator, args.max_tokens)
    skipped = 0
    with open(out, "w", encoding="utf-8") as fh:
        for i, (row, rec) in enumerate(zip(rows, records)):
            if rec is None:
                skipped += 1
                continue
            fh.write(json.dumps(record_to_json(rec, i, row.extra)) + "\n")
    logger.info("mined %d records (%d skipped)", len(records) - skipped, skipped)
    return EXIT_OK


def cmd_stats(args) -> int:
    records = [record_from_json(r) for r in load_records(args.input)]
    stats = dataset_stats(records)
    sys.stdout.write(json.dumps(stats.to_json(), sort_keys=True) + "\n")
    return EXIT_OK


def cmd_split(args) -> int:
    path = Path(args.input)
    try:
        lines = [ln for ln in path.read_text(encoding="utf-8").splitlines() if ln.strip()]
    except FileNotFoundError:
        raise ValidationError(f"input not found: {path}") from None
    parts = split_dataset(lines, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name, part in zip(("train", "validation", "test"), parts):
        _write(out, f"{name}.jsonl", "".join(ln + "\n" for ln in part))
    sys.stdout.write(json.dumps({"train": len(parts[0]), "validation": len(parts[1]), "test": len(parts[2])}) + "\n")
    return EXIT_OK


def _parse_floats(text: str, n: int, flag: str) -> list[float]:
    try:
        values = [float(x) for x in text.split(",")]
    except ValueError:
        raise ValidationError(f"{flag} expects {n} comma-separated numbers") from None
    if len(values) != n:
        raise ValidationError(f"{flag} expects {n} comma-separated numbers")
    return values


def cmd_loss(args) -> int:
    f_s = TabularOracle.load(args.oracle, "f_s")
    f_s0 = TabularOracle.load(args.oracle_base, "f_s0")
    weights = LossWeights(*_parse_floats(args.weights, 3, "--weights"))
    samples = load_dialogues(args.data)
    raw = load_records(args.data)
    candidates = sorted({s.c for s in samples if s.c})
    if not candidates:
        raise ValidationError("loss needs at least one sample with a connective")
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["id", "l_con", "l_coh", "l_prior", "total"])
    sums = [0.0, 0.0, 0.0, 0.0]
    for sample, row in zip(samples, raw):
        if not sample.R:
            raise ValidationError(f"sample {sample.id!r} has an empty response")
        r_s = tuple(str(row.get("R_S") or "").split()) or sample.R
        l_con = style_consistency_loss(f_s, sample.u, sample.c, sample.R)
        l_coh = coherence_loss(f_s, f_s0, sample.u, sample.c, sample.R, r_s)
        l_prior = prior_regularization_loss(
            connective_distribution(f_s, sample.u, candidates), connective_distribution(f_s0, sample.u, candidates)
        )
        tot = total_loss(l_con, l_coh, l_prior, weights)
        values = [l_con, l_coh, l_prior, tot]
        sums = [a + b for a, b in zip(sums, values)]
        writer.writerow([sample.id, *(repr(v) for v in values)])
    n = len(samples)
    writer.writerow(["mean", *(repr(v / n) for v in sums)])
    sys.stdout.write(buf.getvalue())
    return EXIT_OK


def cmd_curriculum(args) -> int:
    epochs = [int(x) for x in _parse_floats(args.epochs, args.stages, "--epochs")]
    samples = load_dialogues(args.data)
    plan = curriculum_plan(samples, args.stages, epochs, args.order, args.seed)
    sys.stdout.write(json.dumps(plan.to_json(), indent=2) + "\n")
    return EXIT_OK


def cmd_synth(args) -> int:
    scenarios, dialogues = synthetic_batch(
        args.n, args.seed, args.commit_rate, length_scaled=args.length_scaled
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dump_scenarios(scenarios, out / "scenarios.jsonl")
    _write(out, "dialogues.jsonl", "".join(json.dumps(d.to_json()) + "\n" for d in dialogues))
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="dualtrack", description="Dual-track streaming dialogue simulation and data tools.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("-v", "--verbose", action="count", default=0, help="more logging on stderr")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def run_flags(p: argparse.ArgumentParser) -> None:
        p.add_argument("--scenarios", required=True, help="scenario JSONL")
        p.add_argument("--config", help="JSON run config (dotted keys)")
        p.add_argument("--dialogues", help="dialogue JSONL for the small model (default: scenario references)")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None, help=f"default {DEFAULT_SEED}")
        p.add_argument("--jobs", type=int, default=1, help="concurrent sessions")

    p = sub.add_parser("simulate", help="run sessions and write traces and reports")
    run_flags(p)
    p.add_argument("--strategy", default="all", choices=["ssc", "sdc", "ddtsr", "all"])
    p.add_argument("--realtime", action="store_true", help="wall-clock run against --llm-endpoint")
    p.add_argument("--llm-endpoint", help="URL of a streaming large-model endpoint")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("compare", help="side-by-side latency table for all strategies")
    run_flags(p)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("mine", help="extract connectives from dialogue pairs")
    p.add_argument("--input", required=True)
    p.add_argument("--lexicons", help="lexicon directory (default: bundled)")
    p.add_argument("--out", required=True, help="output JSONL file")
    p.add_argument("--llm-endpoint")
    p.add_argument("--max-tokens", type=int, default=6)
    p.add_argument("--jobs", type=int, default=4, help="concurrent LLM requests")
    p.set_defaults(func=cmd_mine)

    p = sub.add_parser("stats", help="dataset statistics for mined records")
    p.add_argument("--input", required=True)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("split", help="seeded 8:1:1 train/validation/test split")
    p.add_argument("--input", required=True)
    p.add_argument("--seed", type=int, default=DEFAULT_SEED)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("loss", help="per-sample training losses from two tabular oracles")
    p.add_argument("--oracle", required=True)
    p.add_argument("--oracle-base", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--weights", default="1.0,0.5,0.1")
    p.set_defaults(func=cmd_loss)

    p = sub.add_parser("curriculum", help="staged training plan as JSON")
    p.add_argument("--data", required=True)
    p.add_argument("--stages", type=int, default=4)
    p.add_argument("--epochs", default="5,3,3,2")
    p.add_argument("--order", default="hard_to_easy", choices=["hard_to_easy", "easy_to_hard"])
    p.add_argument("--seed", type=int, default=DEFAULT_SEED)
    p.set_defaults(func=cmd_curriculum)

    p = sub.add_parser("synth", help="write a synthetic scenario batch and its training dialogues")
    p.add_argument("--n", type=int, default=50)
    p.add_argument("--seed", type=int, default=DEFAULT_SEED)
    p.add_argument("--commit-rate", type=float, default=0.94)
    p.add_argument("--length-scaled", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)
    return ap


def run(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_INVALID
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except (ValidationError, UnknownTokenError, EmptyCandidateError, ParseError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (RemoteError, ProtocolError) as exc:
        print(f"remote error: {exc}", file=sys.stderr)
        return EXIT_REMOTE
    except Exception as exc:  # noqa: BLE001 - top-level boundary
        logger.debug("unhandled", exc_info=True)
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
