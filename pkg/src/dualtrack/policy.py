"""Confidence-gated commit decisions on streaming ASR hypotheses."""

from __future__ import annotations

import logging
import math
import threading
from dataclasses import dataclass, field
from typing import Iterable, Protocol, Sequence

from .coremath import TokenDistribution, ValidationError, confidence, mean_connective_entropy

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PartialHypothesis:
    step: int
    text: str
    audio_offset_ms: int
    is_final: bool = False
    t_ms: int = 0  # emission time on the session clock


@dataclass(frozen=True)
class ConnectiveCandidate:
    tokens: tuple[str, ...]
    per_token_dists: tuple[TokenDistribution, ...]
    is_marker: tuple[bool, ...] = ()
    model_score: float = 0.0

    def __post_init__(self) -> None:
        if not self.tokens:
            raise ValidationError("connective candidate has no tokens")
        if not self.is_marker:
            object.__setattr__(self, "is_marker", (False,) * len(self.tokens))
        if len(self.per_token_dists) != len(self.tokens) or len(self.is_marker) != len(self.tokens):
            raise ValidationError("candidate needs one distribution and one marker flag per token")
        if not 0.0 <= self.model_score <= 1.0:
            raise ValidationError(f"model_score {self.model_score!r} outside [0, 1]")

    @property
    def text(self) -> str:
        return " ".join(t for t, marker in zip(self.tokens, self.is_marker) if not marker)


@dataclass(frozen=True)
class CommitDecision:
    step: int
    candidates: tuple[ConnectiveCandidate, ...]
    conf: float
    sig: bool
    chosen: ConnectiveCandidate | None = None


@dataclass(frozen=True)
class PolicyConfig:
    tau: float = 0.45
    h_max: float = 2.0
    m: int = 5

    def __post_init__(self) -> None:
        if not 0.0 <= self.tau <= 1.0:
            raise ValidationError(f"policy.tau must be in [0, 1], got {self.tau!r}")
        if not self.h_max > 0:
            raise ValidationError(f"policy.h_max must be positive, got {self.h_max!r}")
        if self.m < 1:
            raise ValidationError(f"policy.m must be >= 1, got {self.m!r}")


class SmallModel(Protocol):
    def candidates(self, text: str, m: int) -> list[ConnectiveCandidate]: ...

    def respond(self, text: str) -> list[str]: ...


def select_connective(candidates: Sequence[ConnectiveCandidate]) -> ConnectiveCandidate:
    """Lowest mean entropy wins; ties go to the higher model score, then token order."""
    if not candidates:
        raise ValidationError("no candidates to select from")
    return min(
        candidates,
        key=lambda c: (mean_connective_entropy(c), -c.model_score, c.tokens),
    )


def evaluate_step(small: SmallModel, hyp: PartialHypothesis, cfg: PolicyConfig) -> CommitDecision:
    if not hyp.text.strip():
        raise ValidationError("empty hypotheses are skipped before evaluation")
    cands = tuple(small.candidates(hyp.text, cfg.m))[: cfg.m]
    if not cands:
        return CommitDecision(hyp.step, (), 0.0, False, None)
    conf = confidence(cands, cfg.h_max)
    sig = conf > cfg.tau
    return CommitDecision(hyp.step, cands, conf, sig, select_connective(cands) if sig else None)


def commit_point(decisions: Iterable[CommitDecision]) -> int | None:
    """Earliest step whose decision carries a positive commit signal."""
    prev = -math.inf
    found = None
    for d in decisions:
        if d.step <= prev:
            raise ValidationError(f"decision steps out of order: {d.step} after {prev}")
        prev = d.step
        if d.sig and found is None:
            found = d.step
    return found


@dataclass
class CommitLatch:
    """Single-assignment holder for the committed decision."""

    decision: CommitDecision | None = None
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def offer(self, decision: CommitDecision) -> bool:
        if not decision.sig:
            return False
        with self._lock:
            if self.decision is not None:
                return False
            self.decision = decision
            return True

    @property
    def committed(self) -> bool:
        return self.decision is not None
