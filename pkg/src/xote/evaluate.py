"""Exact character-span precision, recall and F1, micro-averaged."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass
from typing import Iterable, Mapping

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class EvalReport:
    true_positives: int
    predicted_count: int
    gold_count: int

    @property
    def precision(self) -> float:
        return self.true_positives / self.predicted_count if self.predicted_count else 0.0

    @property
    def recall(self) -> float:
        return self.true_positives / self.gold_count if self.gold_count else 0.0

    @property
    def f1(self) -> float:
        p, r = self.precision, self.recall
        return 2 * p * r / (p + r) if p + r > 0 else 0.0

    def __add__(self, other: "EvalReport") -> "EvalReport":
        return EvalReport(
            self.true_positives + other.true_positives,
            self.predicted_count + other.predicted_count,
            self.gold_count + other.gold_count,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d.update(precision=self.precision, recall=self.recall, f1=self.f1)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def to_tsv(self) -> str:
        return "\t".join(
            [str(self.true_positives), str(self.predicted_count), str(self.gold_count)]
            + [repr(x) for x in (self.precision, self.recall, self.f1)]
        )


def _offsets(spans: Iterable) -> set[tuple[int, int]]:
    return {(s.start, s.end) for s in spans}


def exact_span_f1(gold: Mapping[str, Iterable], pred: Mapping[str, Iterable]) -> EvalReport:
    """Score predictions against gold, both keyed by sentence id.

    A prediction counts only when its (start, end) equals a gold span of the
    same sentence. Identical spans within a sentence count once.
    """
    missing = sorted(set(gold) ^ set(pred))
    if missing:
        raise ValueError(f"sentence ids not present on both sides: {missing[:10]}")
    tp = n_pred = n_gold = 0
    for sid in gold:
        g_list = list(gold[sid])
        g = _offsets(g_list)
        if len(g) != len(g_list):
            logger.warning("sentence %s: duplicate gold spans deduplicated", sid)
        p = _offsets(pred[sid])
        tp += len(g & p)
        n_pred += len(p)
        n_gold += len(g)
    return EvalReport(tp, n_pred, n_gold)
