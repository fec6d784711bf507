"""Review records, JSON-lines I/O, normalization, deduplication and corpus statistics."""

from __future__ import annotations

import html
import json
import re
import statistics
import unicodedata
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Iterable, Protocol

VALID_RATINGS = (1, 2, 4, 5)
LOW_CONFIDENCE = 0.95


class Language(str, Enum):
    IT = "it"
    RO = "ro"


class Domain(str, Enum):
    BOOKS = "books"
    MOVIES = "movies"
    MUSIC = "music"


class Split(str, Enum):
    TRAIN = "train"
    VALID = "valid"
    TEST = "test"


class SchemaError(ValueError):
    """A record violates the dataset schema. ``line`` is 1-based when known."""

    def __init__(self, message: str, line: int | None = None, field: str | None = None):
        self.line = line
        self.field = field
        prefix = f"line {line}: " if line is not None else ""
        super().__init__(prefix + message)


class EmptyDatasetError(ValueError):
    pass


@dataclass(frozen=True)
class Review:
    title: str
    text: str
    rating: int
    language: Language
    domain: Domain
    split: Split

    def __post_init__(self):
        if isinstance(self.rating, bool) or self.rating not in VALID_RATINGS:
            raise SchemaError(f"rating must be one of {VALID_RATINGS}, got {self.rating!r}", field="rating")
        object.__setattr__(self, "language", _enum(Language, self.language, "language"))
        object.__setattr__(self, "domain", _enum(Domain, self.domain, "domain"))
        object.__setattr__(self, "split", _enum(Split, self.split, "split"))

    def to_dict(self) -> dict:
        return {"title": self.title, "text": self.text, "rating": self.rating,
                "language": self.language.value, "domain": self.domain.value, "split": self.split.value}


def _enum(cls, value, name):
    try:
        return cls(value)
    except ValueError:
        allowed = "|".join(m.value for m in cls)
        raise SchemaError(f"{name} must be one of {allowed}, got {value!r}", field=name) from None


@dataclass
class Dataset:
    records: list[Review]
    provenance: str = ""

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def __getitem__(self, i):
        return self.records[i]

    def where(self, **conditions) -> "Dataset":
        """Filter by field equality, e.g. ``ds.where(split="train", language="it")``."""
        def keep(r):
            return all(getattr(getattr(r, k), "value", getattr(r, k)) == getattr(v, "value", v)
                       for k, v in conditions.items())
        return Dataset([r for r in self.records if keep(r)], self.provenance)


_FIELDS = ("title", "text", "rating", "language", "domain", "split")


def parse_record(obj, line: int | None = None) -> Review:
    if not isinstance(obj, dict):
        raise SchemaError("record must be a JSON object", line)
    for name in _FIELDS:
        if name not in obj:
            raise SchemaError(f"missing field {name!r}", line, name)
    extra = set(obj) - set(_FIELDS)
    if extra:
        raise SchemaError(f"unexpected field(s) {sorted(extra)}", line, sorted(extra)[0])
    for name in ("title", "text"):
        if not isinstance(obj[name], str):
            raise SchemaError(f"field {name!r} must be a string", line, name)
    if not isinstance(obj["rating"], int) or isinstance(obj["rating"], bool):
        raise SchemaError(f"field 'rating' must be an integer, got {obj['rating']!r}", line, "rating")
    try:
        return Review(**{k: obj[k] for k in _FIELDS})
    except SchemaError as exc:
        raise SchemaError(str(exc), line, exc.field) from None


def read_jsonl(path, provenance: str | None = None) -> Dataset:
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            if not raw.strip():
                continue
            try:
                obj = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"invalid JSON ({exc.msg})", lineno) from None
            records.append(parse_record(obj, lineno))
    return Dataset(records, provenance if provenance is not None else str(path))


def write_jsonl(ds: Dataset | Iterable[Review], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in ds:
            fh.write(json.dumps(rec.to_dict(), ensure_ascii=False) + "\n")


# --- normalization -----------------------------------------------------------

URL_RE = re.compile(r"(?:https?://|www\.)\S+")
EMAIL_RE = re.compile(r"[A-Za-z0-9._%+-]+@[A-Za-z0-9.-]+\.[A-Za-z]{2,}")
_TAG_RE = re.compile(r"<!--.*?-->|</?([A-Za-z][A-Za-z0-9]*)\b[^<>]*>", re.DOTALL)
_BLOCK_TAGS = {"br", "p", "div", "li", "ul", "ol", "tr", "td", "th", "table", "hr",
               "h1", "h2", "h3", "h4", "h5", "h6", "blockquote"}
_TERMINAL_RUN_RE = re.compile(r"[.!?]{4,}")
_WS_RE = re.compile(r"\s+")


def _tag_sub(m: re.Match) -> str:
    name = (m.group(1) or "").lower()
    return " " if name in _BLOCK_TAGS else ""


def _strip_controls(s: str) -> str:
    return "".join(ch for ch in s if ch.isspace() or unicodedata.category(ch) not in ("Cc", "Cf"))


def strip_markup(s: str) -> str:
    """Remove tags, decode entities and drop control characters until stable.

    Every pass that changes the string shortens it, so the loop terminates.
    """
    while True:
        out = _strip_controls(html.unescape(_TAG_RE.sub(_tag_sub, s)))
        if out == s:
            return s
        s = out


def _is_punct(ch: str) -> bool:
    return unicodedata.category(ch).startswith("P")


def collapse_punctuation(s: str) -> str:
    s = _TERMINAL_RUN_RE.sub(lambda m: m.group(0)[:3], s)
    out: list[str] = []
    run = 0
    for i, ch in enumerate(s):
        run = run + 1 if i and ch == s[i - 1] else 1
        if run > 3 and _is_punct(ch):
            continue
        out.append(ch)
    return "".join(out)


_MAX_PASSES = 32


def _normalize_once(s: str) -> str:
    s = strip_markup(s)
    s = URL_RE.sub("[URL]", s)
    s = EMAIL_RE.sub("[EMAIL]", s)
    s = collapse_punctuation(s)
    s = _WS_RE.sub(" ", s)
    return s.strip()


def normalize_text(raw: str) -> str:
    """Clean one field: markup, URLs/emails, punctuation runs, whitespace, in that order.

    A later step can expose work for an earlier one (a URL match swallowing
    the ``>`` of a would-be tag, say), so the pipeline is repeated until the
    text stops changing. Real text settles in one or two passes.
    """
    s = _normalize_once(raw)
    for _ in range(_MAX_PASSES):
        nxt = _normalize_once(s)
        if nxt == s:
            break
        s = nxt
    return s


def normalize_review(r: Review) -> Review:
    return Review(normalize_text(r.title), normalize_text(r.text), r.rating, r.language, r.domain, r.split)


def normalize_dataset(ds: Dataset) -> Dataset:
    return Dataset([normalize_review(r) for r in ds], ds.provenance)


def deduplicate(ds: Dataset) -> tuple[Dataset, int]:
    """Keep the first record of every (title, text) pair. Returns the dataset and the number removed."""
    seen: set[tuple[str, str]] = set()
    kept = []
    for r in ds:
        key = (r.title, r.text)
        if key in seen:
            continue
        seen.add(key)
        kept.append(r)
    return Dataset(kept, ds.provenance), len(ds) - len(kept)


# --- language verification ---------------------------------------------------

class LanguageDetector(Protocol):
    def __call__(self, text: str) -> tuple[str, float]: ...


class QualityReason(str, Enum):
    LOW_CONFIDENCE = "LowConfidence"
    LANGUAGE_MISMATCH = "LanguageMismatch"


@dataclass(frozen=True)
class QualityFlag:
    index: int
    reason: QualityReason
    detected: str
    confidence: float

    def to_dict(self) -> dict:
        return {"index": self.index, "reason": self.reason.value, "detected": self.detected,
                "confidence": self.confidence}


def verify_language(ds: Dataset, detector: Callable[[str], tuple[str, float]],
                    threshold: float = LOW_CONFIDENCE) -> list[QualityFlag]:
    """Flag records whose detected language is unreliable or differs from the declared one.

    A detection below ``threshold`` is reported as LowConfidence whatever the
    label; a confident detection of another language is a LanguageMismatch.
    Detector exceptions become LowConfidence flags with confidence 0.
    """
    flags = []
    for i, r in enumerate(ds):
        sample = f"{r.title} {r.text}".strip()
        try:
            label, conf = detector(sample)
            conf = float(conf)
        except Exception:
            flags.append(QualityFlag(i, QualityReason.LOW_CONFIDENCE, "", 0.0))
            continue
        label = str(label).lower()
        if conf < threshold:
            flags.append(QualityFlag(i, QualityReason.LOW_CONFIDENCE, label, conf))
        elif label != r.language.value:
            flags.append(QualityFlag(i, QualityReason.LANGUAGE_MISMATCH, label, conf))
    return flags


_STOPWORDS = {
    "it": {"il", "lo", "la", "gli", "le", "di", "che", "e", "è", "non", "per", "un", "una", "con",
           "del", "della", "sono", "ma", "anche", "questo", "molto", "libro", "film", "come", "più"},
    "ro": {"și", "si", "este", "în", "in", "nu", "cu", "un", "o", "pe", "care", "mai", "foarte",
           "din", "la", "cartea", "filmul", "dar", "sunt", "acest", "această", "pentru", "ce", "să"},
}


class KeywordDetector:
    """Deterministic stand-in for a language identifier.

    Tokens carrying an ``it_``/``ro_`` prefix (as produced by the synthetic
    generator) and a short list of function words vote for a language. The
    confidence is the winning share of votes; no votes gives ("und", 0.0).
    """

    def __call__(self, text: str) -> tuple[str, float]:
        votes = {"it": 0, "ro": 0}
        for tok in text.lower().split():
            for lang in votes:
                if tok.startswith(lang + "_") or tok.strip(".,;:!?\"'()") in _STOPWORDS[lang]:
                    votes[lang] += 1
        total = sum(votes.values())
        if total == 0:
            return "und", 0.0
        lang = max(votes, key=lambda k: (votes[k], k == "it"))
        return lang, votes[lang] / total


# --- statistics --------------------------------------------------------------

def count_tokens(t: str) -> int:
    return len(t.split())


@dataclass
class TokenSummary:
    mean: float
    median: float
    std: float
    min: int
    max: int
    count: int

    @classmethod
    def of(cls, counts: list[int]) -> "TokenSummary":
        if not counts:
            raise EmptyDatasetError("token summary of no records")
        return cls(statistics.fmean(counts), float(statistics.median(counts)),
                   statistics.pstdev(counts), min(counts), max(counts), len(counts))


@dataclass
class CorpusStats:
    size: int
    rating_histogram: dict[int, int]
    fields: dict[str, TokenSummary]
    by_language: dict[str, dict[str, TokenSummary]]
    by_domain: dict[str, dict[str, TokenSummary]]
    titles_present: int
    cells: dict[str, int] = field(default_factory=dict)

    def to_dict(self) -> dict:
        def summ(group):
            return {k: {f: vars(s) for f, s in v.items()} for k, v in group.items()}
        return {
            "size": self.size,
            "rating_histogram": {str(k): v for k, v in self.rating_histogram.items()},
            "fields": {k: vars(v) for k, v in self.fields.items()},
            "by_language": summ(self.by_language),
            "by_domain": summ(self.by_domain),
            "titles_present": self.titles_present,
            "cells": self.cells,
        }

    def to_table(self) -> str:
        lines = [f"records: {self.size}    titles present: {self.titles_present}", "",
                 "rating  count"]
        lines += [f"{r:>6}  {c:>5}" for r, c in self.rating_histogram.items()]
        lines += ["", f"{'group':<14}{'field':<7}{'mean':>9}{'median':>9}{'std':>9}{'min':>7}{'max':>7}{'n':>8}"]

        def row(name, fname, s):
            return f"{name:<14}{fname:<7}{s.mean:>9.2f}{s.median:>9.1f}{s.std:>9.2f}{s.min:>7}{s.max:>7}{s.count:>8}"

        for fname, s in self.fields.items():
            lines.append(row("all", fname, s))
        for group in (self.by_language, self.by_domain):
            for name, fs in group.items():
                for fname, s in fs.items():
                    lines.append(row(name, fname, s))
        return "\n".join(lines)


def compute_stats(ds: Dataset) -> CorpusStats:
    if len(ds) == 0:
        raise EmptyDatasetError("cannot compute statistics of an empty dataset")
    hist = {r: 0 for r in VALID_RATINGS}
    for r in ds:
        hist[r.rating] += 1

    def summaries(recs):
        return {"text": TokenSummary.of([count_tokens(r.text) for r in recs]),
                "title": TokenSummary.of([count_tokens(r.title) for r in recs])}

    by_language = {lang.value: summaries(rs) for lang in Language
                   if (rs := [r for r in ds if r.language is lang])}
    by_domain = {d.value: summaries(rs) for d in Domain if (rs := [r for r in ds if r.domain is d])}
    cells: dict[str, int] = {}
    for r in ds:
        key = f"{r.split.value}/{r.language.value}/{r.domain.value}"
        cells[key] = cells.get(key, 0) + 1
    return CorpusStats(
        size=len(ds),
        rating_histogram=hist,
        fields=summaries(ds.records),
        by_language=by_language,
        by_domain=by_domain,
        titles_present=sum(1 for r in ds if r.title.strip()),
        cells=dict(sorted(cells.items())),
    )


def load_many(paths: Iterable[str | Path]) -> Dataset:
    records: list[Review] = []
    names = []
    for p in paths:
        records.extend(read_jsonl(p).records)
        names.append(str(p))
    return Dataset(records, ",".join(names))
