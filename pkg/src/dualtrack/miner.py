"""Turn-initial connective mining: POS-pattern extraction, LLM annotation, dataset statistics."""

from __future__ import annotations

import enum
import json
import logging
import math
import random
import re
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Callable, Iterable, Mapping, NamedTuple, Sequence

from .coremath import ValidationError

logger = logging.getLogger(__name__)

POS_TAGS = frozenset(
    {"INTJ", "ADV", "PRON", "AUX", "VERB", "PART", "ADJ", "NOUN", "SCONJ", "PROPN", "NUM", "other"}
)
CATEGORIES = ("CDM", "EDM", "IDM", "TOM", "DMM", "AM", "NONE")
POS_EXTRACTION = "pos_extraction"
LLM_GENERATION = "llm_generation"
DEFAULT_MAX_TOKENS = 6

_PUNCT_ONLY = re.compile(r"^[^\w]+$")
_SPLIT = re.compile(r"[^,.!?;:]*[,.!?;:]+|[^,.!?;:]+$")


@dataclass(frozen=True)
class TaggedToken:
    text: str
    pos: str
    is_meta_verb: bool = False
    is_abstract_noun: bool = False
    is_concrete_entity: bool = False

    def __post_init__(self) -> None:
        if self.pos not in POS_TAGS:
            object.__setattr__(self, "pos", "other")
        if self.is_meta_verb and self.pos != "VERB":
            raise ValidationError(f"{self.text!r}: meta-verb flag on a {self.pos} token")
        if self.is_abstract_noun and self.pos != "NOUN":
            raise ValidationError(f"{self.text!r}: abstract-noun flag on a {self.pos} token")

    @property
    def is_punct(self) -> bool:
        return bool(_PUNCT_ONLY.match(self.text))

    @classmethod
    def from_json(cls, row: Sequence) -> TaggedToken:
        if len(row) < 2:
            raise ValidationError(f"tagged token needs [text, pos, flags...], got {row!r}")
        flags = {str(f) for f in row[2:]}
        return cls(
            str(row[0]),
            str(row[1]),
            is_meta_verb="meta_verb" in flags,
            is_abstract_noun="abstract_noun" in flags,
            is_concrete_entity="concrete" in flags or "concrete_entity" in flags,
        )


class PrefixClass(str, enum.Enum):
    TYPE_A = "TypeA"
    TYPE_B = "TypeB"
    MIXED = "Mixed"
    REJECT = "Reject"


@dataclass(frozen=True)
class ConnectiveRecord:
    s1: str
    connective: str
    remainder: str
    category: str | None
    source: str

    def __post_init__(self) -> None:
        if self.category is not None and self.category not in CATEGORIES:
            raise ValidationError(f"unknown connective category {self.category!r}")
        if (self.category == "NONE") != (self.connective == ""):
            raise ValidationError("category NONE goes with an empty connective and only then")

    @property
    def s2(self) -> str:
        return " ".join(p for p in (self.connective, self.remainder) if p)


# ---------------------------------------------------------------------------
# lexicons and tagging
# ---------------------------------------------------------------------------

_LEXICON_FILES = {
    "interjections": "INTJ",
    "sconj": "SCONJ",
    "pronouns": "PRON",
    "auxiliaries": "AUX",
    "particles": "PART",
    "adverbs": "ADV",
    "adjectives": "ADJ",
    "meta_verbs": "VERB",
    "abstract_nouns": "NOUN",
    "concrete_entities": "NOUN",
}


def read_lexicon(path: Path) -> list[str]:
    out = []
    for line in path.read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if line and not line.startswith("#"):
            out.append(line.lower())
    return out


class Lexicons:
    """Closed word lists for the built-in tagger; one plain-text file per list."""

    def __init__(self, lists: Mapping[str, Iterable[str]]):
        self.lists = {name: frozenset(words) for name, words in lists.items()}

    @classmethod
    def load(cls, directory: str | Path | None = None) -> Lexicons:
        base = Path(directory) if directory else Path(str(resources.files("dualtrack") / "lexicons"))
        lists = {}
        for name in _LEXICON_FILES:
            path = base / f"{name}.txt"
            if not path.exists():
                raise ValidationError(f"lexicon file missing: {path}")
            lists[name] = read_lexicon(path)
        return cls(lists)

    def tag_word(self, word: str, sentence_initial: bool) -> TaggedToken:
        low = word.lower()
        if _PUNCT_ONLY.match(word):
            return TaggedToken(word, "other")
        for name, pos in _LEXICON_FILES.items():
            if low in self.lists.get(name, ()):
                return TaggedToken(
                    word,
                    pos,
                    is_meta_verb=name == "meta_verbs",
                    is_abstract_noun=name == "abstract_nouns",
                    is_concrete_entity=name == "concrete_entities",
                )
        if low.isdigit():
            return TaggedToken(word, "NUM")
        if word[:1].isupper() and not sentence_initial:
            return TaggedToken(word, "PROPN")
        return TaggedToken(word, "other")

    def tag(self, text: str) -> list[TaggedToken]:
        out = []
        initial = True
        for word in re.findall(r"[\w']+|[^\w\s]+", text):
            out.append(self.tag_word(word, initial))
            if not _PUNCT_ONLY.match(word):
                initial = False
            elif word in {".", "!", "?"}:
                initial = True
        return out


# ---------------------------------------------------------------------------
# extraction
# ---------------------------------------------------------------------------


def split_by_punctuation(text: str) -> list[str]:
    """Split after each run of , . ! ? ; : keeping delimiters on their segment."""
    return [m.group(0) for m in _SPLIT.finditer(text) if m.group(0)]


def _in_a(t: TaggedToken) -> bool:
    return t.pos in {"INTJ", "ADV", "PRON", "AUX", "PART"} or (t.pos == "VERB" and t.is_meta_verb)


def _in_b(t: TaggedToken) -> bool:
    return t.pos in {"ADJ", "ADV", "SCONJ"} or (t.pos == "NOUN" and t.is_abstract_noun)


def has_substantial_content(tokens: Sequence[TaggedToken]) -> bool:
    return any(
        t.pos == "PROPN" or t.is_concrete_entity or (t.pos == "VERB" and not t.is_meta_verb)
        for t in tokens
        if not t.is_punct
    )


def classify_prefix(tokens: Sequence[TaggedToken]) -> PrefixClass:
    words = [t for t in tokens if not t.is_punct]
    if not words:
        raise ValidationError("cannot classify an empty prefix")
    if has_substantial_content(words):
        return PrefixClass.REJECT
    if not all(_in_a(t) or _in_b(t) for t in words):
        return PrefixClass.REJECT
    if all(_in_a(t) for t in words):
        return PrefixClass.TYPE_A
    if all(_in_b(t) for t in words):
        if any(t.pos == "ADJ" for t in words):
            return PrefixClass.TYPE_B
        # all-B without an adjective is acceptable only with an A-side feature present
        return PrefixClass.MIXED if any(_in_a(t) for t in words) else PrefixClass.REJECT
    return PrefixClass.MIXED


class Extraction(NamedTuple):
    connective: str
    remainder: str
    stop: str  # "content", "pos", "length", or "end"


def _align(text: str, tokens: Sequence[TaggedToken]) -> list[int]:
    offsets = []
    cursor = 0
    for t in tokens:
        pos = text.find(t.text, cursor)
        if pos < 0:
            raise ValidationError(f"token {t.text!r} not found in {text!r} after offset {cursor}")
        offsets.append(pos)
        cursor = pos + len(t.text)
    return offsets


def extract_connective(
    s2: str, tokens: Sequence[TaggedToken], max_tokens: int = DEFAULT_MAX_TOKENS
) -> Extraction:
    """Grow a connective from whole leading punctuation segments while they stay marker-like."""
    if not s2.strip():
        raise ValidationError("S2 is empty")
    offsets = _align(s2, tokens)
    end = 0
    accepted: list[TaggedToken] = []
    stop = "end"
    seg_start = 0
    for seg in split_by_punctuation(s2):
        seg_end = seg_start + len(seg)
        new = [t for t, off in zip(tokens, offsets) if seg_start <= off < seg_end and not t.is_punct]
        seg_start = seg_end
        candidate = accepted + new
        if not candidate:
            stop = "length"
            break
        if has_substantial_content(candidate):
            stop = "content"
            break
        if classify_prefix(candidate) is PrefixClass.REJECT:
            stop = "pos"
            break
        if len(candidate) > max_tokens:
            stop = "length"
            break
        accepted = candidate
        end = seg_end
    return Extraction(s2[:end].strip(), s2[end:].strip(), stop)


# ---------------------------------------------------------------------------
# LLM annotation
# ---------------------------------------------------------------------------

_PROMPT = """\
## Role and input
You analyse conversation structure.
Input:
S1 (Speaker A): {s1}
S2 (Speaker B): {s2}

## What to look for
A turn-taking connective opening S2: it sits at the start of the turn, spans a short
stretch of words, does not change whether S2 is true, and adds no new proposition.

## Category space
CDM | EDM | IDM | TOM | DMM | AM | NONE

## Procedure
1. Decide whether S2 already opens with such a connective.
2. If it does not, propose one that fits the transition, or NONE.

## Output
Output exactly two lines:
CONNECTIVE PRESENT: YES | NO
CONNECTIVE: <CONNECTIVE or NONE>
"""


def build_llm_prompt(s1: str, s2: str, examples: str | None = None) -> str:
    if not s1.strip() or not s2.strip():
        raise ValidationError("prompt needs both S1 and S2")
    prompt = _PROMPT.format(s1=s1.strip(), s2=s2.strip())
    if examples:
        prompt += "\n## Calibration examples\n" + examples.strip() + "\n"
    return prompt


class ParseError(ValueError):
    pass


class Annotation(NamedTuple):
    present: bool
    connective: str
    category: str | None


_PRESENT_LINE = re.compile(r"^connective present:\s*(yes|no)$", re.IGNORECASE)
_CONN_LINE = re.compile(r"^connective:\s*(.+)$", re.IGNORECASE)


def parse_llm_output(text: str) -> Annotation:
    """Read the two-line reply; PRESENT: NO with a connective means one was generated."""
    lines = [ln.strip() for ln in text.strip().splitlines() if ln.strip()]
    if len(lines) != 2:
        raise ParseError(f"expected exactly two lines, got {len(lines)}")
    m1, m2 = _PRESENT_LINE.match(lines[0]), _CONN_LINE.match(lines[1])
    if not m1 or not m2:
        raise ParseError(f"unrecognised reply: {text.strip()[:80]!r}")
    present = m1.group(1).lower() == "yes"
    conn = m2.group(1).strip()
    if conn.upper() == "NONE":
        if present:
            raise ParseError("reply says a connective is present but names NONE")
        return Annotation(False, "", "NONE")
    return Annotation(present, conn, None)


class LlmAnnotator:
    """Batch annotation over the remote token-stream protocol, resumable via a progress file."""

    def __init__(
        self,
        complete: Callable[[str], str],
        progress_path: str | Path | None = None,
        max_in_flight: int = 4,
        examples: str | None = None,
    ):
        self.complete = complete
        self.progress_path = Path(progress_path) if progress_path else None
        self.max_in_flight = max(1, max_in_flight)
        self.examples = examples

    @classmethod
    def remote(cls, endpoint: str, timeout_ms: int = 30_000, **kw) -> LlmAnnotator:
        from .components import RemoteLargeModel

        model = RemoteLargeModel(endpoint, timeout_ms)

        def complete(prompt: str) -> str:
            return "".join(tok.text for tok in model.generate(prompt, 0))

        return cls(complete, **kw)

    def _load_progress(self) -> dict[int, str]:
        done: dict[int, str] = {}
        if self.progress_path and self.progress_path.exists():
            for line in self.progress_path.read_text(encoding="utf-8").splitlines():
                if line.strip():
                    row = json.loads(line)
                    done[int(row["index"])] = row["reply"]
        return done

    def annotate(self, pairs: Sequence[tuple[int, str, str]]) -> dict[int, Annotation | None]:
        """Map each (index, s1, s2) to its parsed annotation, or None when the reply was unusable."""
        done = self._load_progress()
        todo = [p for p in pairs if p[0] not in done]

        def ask(pair: tuple[int, str, str]) -> tuple[int, str]:
            idx, s1, s2 = pair
            return idx, self.complete(build_llm_prompt(s1, s2, self.examples))

        with ThreadPoolExecutor(max_workers=self.max_in_flight) as pool:
            replies = list(pool.map(ask, todo))
        if self.progress_path:
            with open(self.progress_path, "a", encoding="utf-8") as fh:
                for idx, reply in sorted(replies):
                    fh.write(json.dumps({"index": idx, "reply": reply}) + "\n")
        done.update(replies)
        out: dict[int, Annotation | None] = {}
        for idx, _, _ in pairs:
            try:
                out[idx] = parse_llm_output(done[idx])
            except ParseError as exc:
                logger.warning("skipping record %d: %s", idx, exc)
                out[idx] = None
        return out


# ---------------------------------------------------------------------------
# corpus pipeline
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CorpusRow:
    s1: str
    s2: str
    tokens: tuple[TaggedToken, ...] | None = None
    extra: Mapping = None


def load_corpus(path: str | Path) -> list[CorpusRow]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                toks = obj.get("s2_tokens")
                rows.append(
                    CorpusRow(
                        str(obj["s1"]),
                        str(obj["s2"]),
                        tuple(TaggedToken.from_json(t) for t in toks) if toks is not None else None,
                        {k: v for k, v in obj.items() if k not in ("s1", "s2", "s2_tokens")},
                    )
                )
            except (json.JSONDecodeError, KeyError, ValidationError) as exc:
                raise ValidationError(f"{path}:{lineno}: {exc}") from None
    return rows


def _strip_prefix(s2: str, connective: str) -> str | None:
    if s2.lower().startswith(connective.lower()):
        return s2[len(connective):].strip()
    return None


def mine(
    rows: Sequence[CorpusRow],
    lexicons: Lexicons | None = None,
    annotator: LlmAnnotator | None = None,
    max_tokens: int = DEFAULT_MAX_TOKENS,
) -> list[ConnectiveRecord | None]:
    """POS extraction first; rows without a connective go to the LLM when one is configured.

    Entries are None where the LLM reply could not be parsed.
    """
    lexicons = lexicons or Lexicons.load()
    records: list[ConnectiveRecord | None] = []
    ask = []
    for i, row in enumerate(rows):
        tokens = row.tokens if row.tokens is not None else tuple(lexicons.tag(row.s2))
        ext = extract_connective(row.s2, tokens, max_tokens)
        if ext.connective:
            records.append(ConnectiveRecord(row.s1, ext.connective, ext.remainder, None, POS_EXTRACTION))
        else:
            records.append(ConnectiveRecord(row.s1, "", row.s2.strip(), "NONE", POS_EXTRACTION))
            ask.append((i, row.s1, row.s2))
    if annotator is not None and ask:
        for idx, ann in annotator.annotate(ask).items():
            row = rows[idx]
            if ann is None:
                records[idx] = None
            elif not ann.connective:
                records[idx] = ConnectiveRecord(row.s1, "", row.s2.strip(), "NONE", LLM_GENERATION)
            else:
                rest = _strip_prefix(row.s2.strip(), ann.connective) if ann.present else None
                remainder = rest if rest is not None else row.s2.strip()
                records[idx] = ConnectiveRecord(row.s1, ann.connective, remainder, ann.category, LLM_GENERATION)
    return records


def record_to_json(rec: ConnectiveRecord, index: int, extra: Mapping | None = None) -> dict:
    row = {"id": str((extra or {}).get("id", index)), "u": rec.s1, "c": rec.connective, "R": rec.remainder}
    if extra and "audio_ms" in extra:
        row["audio_ms"] = extra["audio_ms"]
    row["category"] = rec.category
    row["source"] = rec.source
    return row


def record_from_json(row: Mapping) -> ConnectiveRecord:
    try:
        return ConnectiveRecord(
            str(row["u"]), str(row.get("c") or ""), str(row.get("R") or ""),
            row.get("category") if row.get("c") else "NONE",
            str(row.get("source") or POS_EXTRACTION),
        )
    except KeyError as exc:
        raise ValidationError(f"record missing field {exc.args[0]!r}") from None


def load_records(path: str | Path) -> list[dict]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if line.strip():
                try:
                    out.append(json.loads(line))
                except json.JSONDecodeError as exc:
                    raise ValidationError(f"{path}:{lineno}: {exc}") from None
    return out


# ---------------------------------------------------------------------------
# statistics and splits
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DatasetStats:
    total_samples: int
    samples_with_connectives: int
    connective_types: int
    normalized_entropy: float

    def to_json(self) -> dict:
        return {
            "total_samples": self.total_samples,
            "samples_with_connectives": self.samples_with_connectives,
            "connective_types": self.connective_types,
            "normalized_entropy": round(self.normalized_entropy, 6),
        }

    def render(self, name: str = "dataset") -> str:
        return (
            "| Dataset | #Samp. | #Conn. | #Types | Entropy |\n|---|---|---|---|---|\n"
            f"| {name} | {self.total_samples} | {self.samples_with_connectives} | "
            f"{self.connective_types} | {self.normalized_entropy:.2f} |\n"
        )


def connective_label(connective: str) -> str:
    return re.sub(r"[\s,.!?;:]+$", "", connective.strip().lower())


def normalized_label_entropy(labels: Iterable[str]) -> tuple[int, float]:
    counts = Counter(labels)
    n_types = len(counts)
    if n_types <= 1:
        return n_types, 0.0
    total = sum(counts.values())
    h = -math.fsum((c / total) * math.log(c / total) for c in counts.values())
    return n_types, min(1.0, max(0.0, h / math.log(n_types)))


def dataset_stats(records: Sequence[ConnectiveRecord]) -> DatasetStats:
    labels = [connective_label(r.connective) for r in records if r.connective]
    n_types, h = normalized_label_entropy(labels)
    return DatasetStats(len(records), len(labels), n_types, h)


def split_dataset(records: Sequence, ratios: Sequence[float] = (0.8, 0.1, 0.1), seed: int = 0):
    """Seeded shuffle, then contiguous cuts at the cumulative ratio floors."""
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(math.fsum(ratios) - 1.0) > 1e-9:
        raise ValidationError(f"split ratios must be three non-negative parts summing to 1, got {ratios!r}")
    if len(records) < 10:
        logger.warning("splitting only %d records", len(records))
    items = list(records)
    random.Random(seed).shuffle(items)
    n = len(items)
    a = math.floor(n * ratios[0] + 1e-9)
    b = math.floor(n * (ratios[0] + ratios[1]) + 1e-9)
    return items[:a], items[a:b], items[b:]
