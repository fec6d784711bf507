"""Accuracy / macro-F1 and the per-domain, per-language report table."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from fractions import Fraction
from typing import Sequence

RATING_CLASSES = (1, 2, 4, 5)
DOMAINS = ("books", "movies", "music")
LANGUAGES = ("it", "ro")
COLUMNS = ("Books", "Movies", "Music", "IT", "RO", "Avg")


def _check_pair(gold: Sequence, pred: Sequence) -> None:
    if len(gold) != len(pred):
        raise ValueError(f"length mismatch: {len(gold)} gold vs {len(pred)} predicted")
    if not gold:
        raise ValueError("empty input")


def accuracy(gold: Sequence[int], pred: Sequence[int | None]) -> float:
    """Percentage of exact matches. ``None`` predictions (parse failures) count as wrong."""
    _check_pair(gold, pred)
    correct = sum(1 for g, p in zip(gold, pred) if g == p)
    return 100.0 * correct / len(gold)


def macro_f1(gold: Sequence[int], pred: Sequence[int | None], classes: Sequence[int] = RATING_CLASSES) -> float:
    """Unweighted mean of per-class F1 over ``classes``.

    A class with no gold and no predicted instances contributes 0. A ``None``
    prediction is a miss for its gold class and a false positive for nobody.
    The sum is kept in exact rationals, so the result is correctly rounded.
    """
    _check_pair(gold, pred)
    known = set(classes)
    for g in gold:
        if g not in known:
            raise ValueError(f"unknown gold label {g!r}")
    for p in pred:
        if p is not None and p not in known:
            raise ValueError(f"unknown predicted label {p!r}")
    total = Fraction(0)
    for c in classes:
        tp = sum(1 for g, p in zip(gold, pred) if g == c and p == c)
        fp = sum(1 for g, p in zip(gold, pred) if g != c and p == c)
        fn = sum(1 for g, p in zip(gold, pred) if g == c and p != c)
        denom = 2 * tp + fp + fn
        if denom:
            total += Fraction(2 * tp, denom)
    return float(100 * total / len(classes))


@dataclass
class CellMetrics:
    acc: float
    f1: float
    count: int


@dataclass
class MetricsReport:
    """Cells keyed ``"<lang>/<domain>"``; absent cells are ``None``."""

    cells: dict[str, CellMetrics | None]
    domains: dict[str, CellMetrics | None]
    languages: dict[str, CellMetrics | None]
    average: CellMetrics | None
    aggregate: str = "pool"
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        def conv(m):
            return None if m is None else asdict(m)
        return {
            "aggregate": self.aggregate,
            "cells": {k: conv(v) for k, v in self.cells.items()},
            "domains": {k: conv(v) for k, v in self.domains.items()},
            "languages": {k: conv(v) for k, v in self.languages.items()},
            "average": conv(self.average),
            **({"extra": self.extra} if self.extra else {}),
        }

    def columns(self) -> list[CellMetrics | None]:
        return [self.domains[d] for d in DOMAINS] + [self.languages[lang] for lang in LANGUAGES] + [self.average]

    def to_table(self, label: str = "model") -> str:
        """Fixed-width text table: Books/Movies/Music/IT/RO/Avg x Acc/F1."""
        width = max(12, len(label))
        top = f"{'':<{width}}" + "".join(f"| {c:^15} " for c in COLUMNS) + "|"
        sub = f"{'':<{width}}" + "| {:>6}  {:>6} ".format("Acc.", "F1") * len(COLUMNS) + "|"
        cells = []
        for m in self.columns():
            cells.append("|     --      -- " if m is None else f"| {m.acc:6.2f}  {m.f1:6.2f} ")
        row = f"{label:<{width}}" + "".join(cells) + "|"
        rule = "-" * len(top)
        return "\n".join([rule, top, sub, rule, row, rule])


def _metrics(pairs: list[tuple[int, int | None]]) -> CellMetrics | None:
    if not pairs:
        return None
    gold = [g for g, _ in pairs]
    pred = [p for _, p in pairs]
    return CellMetrics(accuracy(gold, pred), macro_f1(gold, pred), len(pairs))


def _mean_metrics(parts: list[CellMetrics | None]) -> CellMetrics | None:
    present = [m for m in parts if m is not None]
    if not present:
        return None
    n = len(present)
    return CellMetrics(sum(m.acc for m in present) / n, sum(m.f1 for m in present) / n,
                       sum(m.count for m in present))


def build_report(records, predictions: Sequence[int | None], aggregate: str = "pool") -> MetricsReport:
    """Per-cell, per-domain, per-language metrics and the unweighted six-cell average.

    ``records`` need ``rating``, ``language`` and ``domain`` attributes (enum
    or plain string values). With ``aggregate="pool"`` the domain and
    language columns pool predictions; ``"mean"`` averages the cell scores.
    """
    if aggregate not in ("pool", "mean"):
        raise ValueError(f"aggregate must be 'pool' or 'mean', got {aggregate!r}")
    records = list(records)
    if len(records) != len(predictions):
        raise ValueError(f"{len(records)} records but {len(predictions)} predictions")
    buckets: dict[tuple[str, str], list] = {(lang, d): [] for lang in LANGUAGES for d in DOMAINS}
    for rec, p in zip(records, predictions):
        key = (_val(rec.language), _val(rec.domain))
        if key not in buckets:
            raise ValueError(f"record with unknown language/domain {key}")
        buckets[key].append((int(rec.rating), p))

    cells = {f"{lang}/{d}": _metrics(buckets[(lang, d)]) for lang in LANGUAGES for d in DOMAINS}
    if aggregate == "pool":
        domains = {d: _metrics([x for lang in LANGUAGES for x in buckets[(lang, d)]]) for d in DOMAINS}
        languages = {lang: _metrics([x for d in DOMAINS for x in buckets[(lang, d)]]) for lang in LANGUAGES}
    else:
        domains = {d: _mean_metrics([cells[f"{lang}/{d}"] for lang in LANGUAGES]) for d in DOMAINS}
        languages = {lang: _mean_metrics([cells[f"{lang}/{d}"] for d in DOMAINS]) for lang in LANGUAGES}
    return MetricsReport(cells, domains, languages, _mean_metrics(list(cells.values())), aggregate)


def _val(x) -> str:
    return getattr(x, "value", x)
