"""Entropy, confidence, perplexity, training losses and curriculum scheduling.

Everything here is pure and works over abstract next-token oracles, so the
same code scores a toy tabular model in tests and anything else that can
hand back a next-token distribution.  Logs are natural (nats) throughout.
"""

from __future__ import annotations

import json
import math
import random
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Protocol, Sequence

PROB_TOL = 1e-9
CHUNK_MS = 500


class ValidationError(ValueError):
    """Input violates a documented precondition."""


class UnknownTokenError(KeyError):
    """A scored token is not in the oracle's vocabulary."""


class EmptyCandidateError(ValueError):
    """A connective candidate has no scorable (non-marker) tokens."""


class DivergenceUndefinedError(ValueError):
    """KL divergence requested where the reference has no support."""


@dataclass(frozen=True)
class Vocabulary:
    tokens: tuple[str, ...]
    _index: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        if not self.tokens:
            raise ValidationError("vocabulary must contain at least one token")
        index = {tok: i for i, tok in enumerate(self.tokens)}
        if len(index) != len(self.tokens):
            raise ValidationError("vocabulary contains duplicate tokens")
        object.__setattr__(self, "_index", index)

    @property
    def size(self) -> int:
        return len(self.tokens)

    def index(self, token: str) -> int:
        try:
            return self._index[token]
        except KeyError:
            raise UnknownTokenError(token) from None

    def __contains__(self, token: object) -> bool:
        return token in self._index


@dataclass(frozen=True)
class TokenDistribution:
    vocab: Vocabulary
    probs: tuple[float, ...]

    def __post_init__(self) -> None:
        if len(self.probs) != self.vocab.size:
            raise ValidationError(
                f"distribution has {len(self.probs)} entries, vocabulary has {self.vocab.size}"
            )
        if any(p < 0 or math.isnan(p) for p in self.probs):
            raise ValidationError("probabilities must be non-negative")
        total = math.fsum(self.probs)
        if abs(total - 1.0) > PROB_TOL:
            raise ValidationError(f"probabilities sum to {total!r}, expected 1")

    @classmethod
    def from_mapping(cls, vocab: Vocabulary, probs: Mapping[str, float]) -> TokenDistribution:
        row = [0.0] * vocab.size
        for tok, p in probs.items():
            row[vocab.index(tok)] = float(p)
        return cls(vocab, tuple(row))

    def prob(self, token: str) -> float:
        return self.probs[self.vocab.index(token)]

    def as_dict(self) -> dict[str, float]:
        return dict(zip(self.vocab.tokens, self.probs))


class ProbabilityOracle(Protocol):
    """Next-token model: context tokens in, distribution over the vocabulary out."""

    name: str
    vocab: Vocabulary

    def next_token(self, context: Sequence[str]) -> TokenDistribution: ...


class TabularOracle:
    """Lookup-table language model keyed by the joined context.

    A context that is not in the table backs off by dropping its oldest
    tokens until a row matches; the empty key ``""`` acts as the unigram row.
    """

    def __init__(self, rows: Mapping[str, Mapping[str, float]], name: str = "f_s"):
        if not rows:
            raise ValidationError("oracle table is empty")
        tokens: list[str] = []
        seen: set[str] = set()
        for key in sorted(rows):
            for tok in rows[key]:
                if tok not in seen:
                    seen.add(tok)
                    tokens.append(tok)
        self.name = name
        self.vocab = Vocabulary(tuple(tokens))
        self._rows = {key: TokenDistribution.from_mapping(self.vocab, row) for key, row in rows.items()}
        self._max_order = max(len(k.split()) for k in self._rows)

    @classmethod
    def load(cls, path: str | Path, name: str = "f_s") -> TabularOracle:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
        if not isinstance(data, dict) or not all(isinstance(v, dict) for v in data.values()):
            raise ValidationError(f"{path}: expected an object of context -> {{token: prob}}")
        try:
            return cls(data, name=name)
        except ValidationError as exc:
            raise ValidationError(f"{path}: {exc}") from None

    def next_token(self, context: Sequence[str]) -> TokenDistribution:
        tail = list(context)[-self._max_order:] if self._max_order else []
        while True:
            key = " ".join(tail)
            if key in self._rows:
                return self._rows[key]
            if not tail:
                raise ValidationError(f"no table row covers context {' '.join(context)!r}")
            tail = tail[1:]


@dataclass(frozen=True)
class DialogueSample:
    id: str
    u: tuple[str, ...]
    c: tuple[str, ...] = ()
    R: tuple[str, ...] = ()
    audio_ms: int | None = None
    chunk_count: int | None = None

    def __post_init__(self) -> None:
        if not self.u:
            raise ValidationError(f"sample {self.id!r}: user input is empty")
        if self.audio_ms is not None and self.chunk_count is None:
            object.__setattr__(self, "chunk_count", math.ceil(self.audio_ms / CHUNK_MS))
        if self.audio_ms is not None and self.chunk_count != math.ceil(self.audio_ms / CHUNK_MS):
            raise ValidationError(f"sample {self.id!r}: chunk_count disagrees with audio_ms")

    def render(self) -> str:
        return " ".join(self.c + self.R)

    def to_json(self) -> dict:
        row: dict = {"id": self.id, "u": " ".join(self.u), "c": " ".join(self.c), "R": " ".join(self.R)}
        if self.audio_ms is not None:
            row["audio_ms"] = self.audio_ms
        return row


def _as_tokens(value) -> tuple[str, ...]:
    if value is None:
        return ()
    if isinstance(value, str):
        return tuple(value.split())
    return tuple(str(v) for v in value)


def sample_from_json(row: Mapping) -> DialogueSample:
    try:
        sample_id = str(row["id"])
        u = row["u"]
    except KeyError as exc:
        raise ValidationError(f"dialogue record missing field {exc.args[0]!r}") from None
    audio_ms = row.get("audio_ms")
    return DialogueSample(
        id=sample_id,
        u=_as_tokens(u),
        c=_as_tokens(row.get("c")),
        R=_as_tokens(row.get("R")),
        audio_ms=int(audio_ms) if audio_ms is not None else None,
        chunk_count=row.get("chunk_count"),
    )


def load_dialogues(path: str | Path) -> list[DialogueSample]:
    samples = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                samples.append(sample_from_json(json.loads(line)))
            except (json.JSONDecodeError, ValidationError) as exc:
                raise ValidationError(f"{path}:{lineno}: {exc}") from None
    return samples


# ---------------------------------------------------------------------------
# entropy and confidence
# ---------------------------------------------------------------------------


def entropy(dist: TokenDistribution) -> float:
    """Shannon entropy in nats, with 0 ln 0 taken as 0."""
    return -math.fsum(p * math.log(p) for p in dist.probs if p > 0.0)


def mean_connective_entropy(candidate) -> float:
    """Mean per-token entropy of a candidate, skipping marker tokens."""
    values = [
        entropy(dist)
        for dist, marker in zip(candidate.per_token_dists, candidate.is_marker)
        if not marker
    ]
    if not values:
        raise EmptyCandidateError(f"candidate {candidate.tokens!r} has only marker tokens")
    return math.fsum(values) / len(values)


def confidence_from_entropies(mean_entropies: Sequence[float], h_max: float) -> float:
    if not mean_entropies:
        raise ValidationError("confidence needs at least one candidate")
    if not h_max > 0:
        raise ValidationError(f"h_max must be positive, got {h_max!r}")
    conf = 1.0 - math.fsum(mean_entropies) / (len(mean_entropies) * h_max)
    return min(1.0, max(0.0, conf))


def confidence(candidates: Sequence, h_max: float) -> float:
    """Entropy-normalised confidence over the top-m candidates, clamped to [0, 1]."""
    if not candidates:
        raise ValidationError("confidence needs at least one candidate")
    return confidence_from_entropies([mean_connective_entropy(c) for c in candidates], h_max)


# ---------------------------------------------------------------------------
# likelihood, perplexity, losses
# ---------------------------------------------------------------------------


def sequence_nll(oracle: ProbabilityOracle, context: Sequence[str], target: Sequence[str]) -> float:
    """Summed negative log-likelihood of ``target`` given ``context``, teacher-forced."""
    if not target:
        raise ValidationError("target sequence is empty")
    history = list(context)
    terms = []
    for tok in target:
        if tok not in oracle.vocab:
            raise UnknownTokenError(tok)
        p = oracle.next_token(history).prob(tok)
        terms.append(math.inf if p == 0.0 else -math.log(p))
        history.append(tok)
    return math.fsum(terms)


def perplexity(
    oracle: ProbabilityOracle, u: Sequence[str], c: Sequence[str], R: Sequence[str]
) -> float:
    """exp of the mean per-token NLL of ``R`` given ``u`` followed by ``c``."""
    nll = sequence_nll(oracle, list(u) + list(c), R)
    return math.exp(nll / len(R))


def style_consistency_loss(f_s: ProbabilityOracle, u, c, R_L) -> float:
    return sequence_nll(f_s, list(u) + list(c), R_L)


def pair_perplexity(oracle: ProbabilityOracle, u, c, R) -> float:
    """Perplexity of the connective-response pair ``c + R`` given ``u``."""
    return perplexity(oracle, u, (), list(c) + list(R))


def coherence_from_perplexities(ppl_trained: float, ppl_base: float) -> float:
    return (ppl_trained - ppl_base) ** 2


def coherence_loss(f_s: ProbabilityOracle, f_s0: ProbabilityOracle, u, c, R_L, R_S) -> float:
    if not R_L or not R_S:
        raise ValidationError("coherence loss needs non-empty responses")
    return coherence_from_perplexities(pair_perplexity(f_s, u, c, R_L), pair_perplexity(f_s0, u, c, R_S))


def prior_regularization_loss(p_fs: Mapping[str, float], p_fs0: Mapping[str, float]) -> float:
    """KL(p_fs || p_fs0) over a shared finite connective set."""
    if set(p_fs) != set(p_fs0):
        raise ValidationError("distributions must share the same connective set")
    for probs in (p_fs, p_fs0):
        if abs(math.fsum(probs.values()) - 1.0) > PROB_TOL or any(v < 0 for v in probs.values()):
            raise ValidationError("prior distributions must be normalised and non-negative")
    terms = []
    for key, p in p_fs.items():
        if p == 0.0:
            continue
        q = p_fs0[key]
        if q == 0.0:
            raise DivergenceUndefinedError(f"reference assigns zero mass to {key!r}")
        terms.append(p * math.log(p / q))
    return max(0.0, math.fsum(terms))


def connective_distribution(
    oracle: ProbabilityOracle, u: Sequence[str], connectives: Iterable[Sequence[str]]
) -> dict[str, float]:
    """P(c | u) over a finite candidate set, renormalised from token products."""
    scores: dict[str, float] = {}
    for conn in connectives:
        key = " ".join(conn)
        if key in scores:
            continue
        scores[key] = math.exp(-sequence_nll(oracle, u, conn)) if conn else 0.0
    total = math.fsum(scores.values())
    if total <= 0.0:
        raise ValidationError("oracle assigns zero mass to every candidate connective")
    return {k: v / total for k, v in scores.items()}


@dataclass(frozen=True)
class LossWeights:
    lambda_con: float = 1.0
    lambda_coh: float = 0.5
    lambda_prior: float = 0.1

    def __post_init__(self) -> None:
        if min(self.lambda_con, self.lambda_coh, self.lambda_prior) < 0:
            raise ValidationError("loss weights must be non-negative")


def total_loss(l_con: float, l_coh: float, l_prior: float, w: LossWeights = LossWeights()) -> float:
    for value in (l_con, l_coh, l_prior):
        if math.isnan(value):
            raise ValidationError("component loss is NaN")
    return w.lambda_con * l_con + w.lambda_coh * l_coh + w.lambda_prior * l_prior


# ---------------------------------------------------------------------------
# curriculum
# ---------------------------------------------------------------------------

HARD_TO_EASY = "hard_to_easy"
EASY_TO_HARD = "easy_to_hard"


@dataclass(frozen=True)
class CurriculumStage:
    index: int
    sample_ids: tuple[str, ...]
    epochs: int
    chunk_range: tuple[int, int]


@dataclass(frozen=True)
class CurriculumPlan:
    stages: tuple[CurriculumStage, ...]
    order: str

    @property
    def total_steps(self) -> int:
        return sum(len(s.sample_ids) * s.epochs for s in self.stages)

    def to_json(self) -> dict:
        return {
            "order": self.order,
            "total_steps": self.total_steps,
            "stages": [
                {
                    "stage": s.index,
                    "epochs": s.epochs,
                    "min_chunks": s.chunk_range[0],
                    "max_chunks": s.chunk_range[1],
                    "samples": list(s.sample_ids),
                }
                for s in self.stages
            ],
        }


def curriculum_plan(
    samples: Sequence[DialogueSample],
    stage_count: int = 4,
    epochs: Sequence[int] = (5, 3, 3, 2),
    order: str = HARD_TO_EASY,
    seed: int = 0,
) -> CurriculumPlan:
    """Group samples into difficulty stages by quantiles of available audio chunks.

    Fewer chunks means less of the utterance is available, which is the
    harder condition.  ``hard_to_easy`` therefore puts the lowest-chunk
    quantile first.  Epochs are assigned to stages by position after ordering.
    Within a stage, sample order is a seeded shuffle.
    """
    if order not in (HARD_TO_EASY, EASY_TO_HARD):
        raise ValidationError(f"unknown curriculum order {order!r}")
    if stage_count < 1 or len(epochs) != stage_count:
        raise ValidationError("epochs list must have one entry per stage")
    if any(e < 0 for e in epochs):
        raise ValidationError("epochs must be non-negative")
    if len(samples) < stage_count:
        raise ValidationError(f"{len(samples)} samples cannot fill {stage_count} stages")
    for s in samples:
        if s.chunk_count is None:
            raise ValidationError(f"sample {s.id!r} has no chunk_count")
    ranked = sorted(samples, key=lambda s: (s.chunk_count, s.id))
    n = len(ranked)
    groups = [ranked[(g * n) // stage_count:((g + 1) * n) // stage_count] for g in range(stage_count)]
    if order == EASY_TO_HARD:
        groups.reverse()
    rng = random.Random(seed)
    stages = []
    for i, (group, ep) in enumerate(zip(groups, epochs), start=1):
        ids = [s.id for s in group]
        rng.shuffle(ids)
        counts = [s.chunk_count for s in group]
        stages.append(CurriculumStage(i, tuple(ids), int(ep), (min(counts), max(counts))))
    return CurriculumPlan(tuple(stages), order)


def truncate_sample(sample: DialogueSample, chunks_available: int) -> DialogueSample:
    """Cut the user input to the share of audio chunks that has arrived."""
    if sample.chunk_count is None:
        raise ValidationError(f"sample {sample.id!r} has no chunk_count")
    if not 1 <= chunks_available <= sample.chunk_count:
        raise ValidationError(
            f"chunks_available={chunks_available} outside [1, {sample.chunk_count}]"
        )
    if chunks_available == sample.chunk_count:
        return sample
    keep = max(1, math.ceil(len(sample.u) * chunks_available / sample.chunk_count))
    audio_ms = None
    if sample.audio_ms is not None:
        audio_ms = min(chunks_available * CHUNK_MS, sample.audio_ms)
    return replace(sample, u=sample.u[:keep], audio_ms=audio_ms, chunk_count=chunks_available)
