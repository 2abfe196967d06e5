"""Evaluation metrics: classification, plausibility, faithfulness, agreement.

All functions are pure and deterministic. Empty-vs-empty comparisons use the
perfect-agreement convention (token F1, IOU F1, Jaccard all return 1.0) so
corpus-level averages stay defined.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Sequence

import numpy as np

from .errors import ContractError, DataError


def macro_f1(gold: Sequence, pred: Sequence, classes: Sequence | None = None,
             exclude_absent: bool = False) -> float:
    """Unweighted mean of per-class F1 scores.

    A class absent from both gold and predictions contributes F1=0 unless
    exclude_absent drops it from the average.
    """
    if len(gold) != len(pred):
        raise ContractError(f"macro_f1: {len(gold)} gold vs {len(pred)} predictions")
    if len(gold) == 0:
        raise DataError("macro_f1 of empty input")
    if classes is None:
        classes = sorted(set(gold) | set(pred), key=str)
    else:
        missing = (set(gold) | set(pred)) - set(classes)
        if missing:
            raise ContractError(f"labels {missing} outside declared class set")
    scores = []
    for c in classes:
        tp = sum(1 for g, p in zip(gold, pred) if g == c and p == c)
        fp = sum(1 for g, p in zip(gold, pred) if g != c and p == c)
        fn = sum(1 for g, p in zip(gold, pred) if g == c and p != c)
        if tp + fp + fn == 0:
            if exclude_absent:
                continue
            scores.append(0.0)
            continue
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        scores.append(2 * prec * rec / (prec + rec) if prec + rec else 0.0)
    if not scores:
        raise DataError("macro_f1: every class excluded")
    return float(np.mean(scores))


class TokenF1(NamedTuple):
    precision: float
    recall: float
    f1: float


def token_f1(pred_mask: Sequence[int], gold_mask: Sequence[int]) -> TokenF1:
    """Token-level precision/recall/F1 between two binary masks."""
    if len(pred_mask) != len(gold_mask):
        raise ContractError(f"token_f1: mask lengths {len(pred_mask)} vs {len(gold_mask)}")
    pred = {i for i, v in enumerate(pred_mask) if v}
    gold = {i for i, v in enumerate(gold_mask) if v}
    if not pred and not gold:
        return TokenF1(1.0, 1.0, 1.0)
    tp = len(pred & gold)
    p = tp / len(pred) if pred else 0.0
    r = tp / len(gold) if gold else 0.0
    f = 2 * p * r / (p + r) if p + r else 0.0
    return TokenF1(p, r, f)


@dataclass(frozen=True)
class Span:
    """Half-open token range [start, end)."""

    start: int
    end: int

    def __post_init__(self):
        if not (0 <= self.start < self.end):
            raise ContractError(f"invalid span [{self.start}, {self.end})")

    def __len__(self):
        return self.end - self.start


def _as_spans(spans) -> list[Span]:
    out = [s if isinstance(s, Span) else Span(*s) for s in spans]
    for a, b in zip(out, out[1:]):
        if b.start < a.end:
            raise ContractError(f"spans {a} and {b} overlap or are unsorted")
    return out


def mask_to_spans(mask: Sequence[int]) -> list[Span]:
    """Maximal consecutive runs of 1s as sorted disjoint spans."""
    spans = []
    start = None
    for i, v in enumerate(mask):
        if v and start is None:
            start = i
        elif not v and start is not None:
            spans.append(Span(start, i))
            start = None
    if start is not None:
        spans.append(Span(start, len(mask)))
    return spans


def _span_iou(a: Span, b: Span) -> float:
    overlap = max(0, min(a.end, b.end) - max(a.start, b.start))
    union = len(a) + len(b) - overlap
    return overlap / union


def iou_f1(pred_spans, gold_spans, threshold: float = 0.5) -> float:
    """Span-level F1 with partial credit: IOU >= threshold counts as a match."""
    pred = _as_spans(pred_spans)
    gold = _as_spans(gold_spans)
    if not pred and not gold:
        return 1.0
    if not pred or not gold:
        return 0.0
    matched_pred = sum(1 for p in pred if max(_span_iou(p, g) for g in gold) >= threshold)
    matched_gold = sum(1 for g in gold if max(_span_iou(p, g) for p in pred) >= threshold)
    precision = matched_pred / len(pred)
    recall = matched_gold / len(gold)
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def auprc(scores: Sequence[float], gold_mask: Sequence[int]) -> float:
    """Average precision of gold positives under a descending-score ranking.

    Ties are broken toward the lower index. Requires at least one positive.
    """
    if len(scores) != len(gold_mask):
        raise ContractError(f"auprc: {len(scores)} scores vs {len(gold_mask)} labels")
    gold = np.asarray(gold_mask) != 0
    n_pos = int(gold.sum())
    if n_pos == 0:
        raise DataError("auprc undefined without positive tokens")
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    hits = 0
    total = 0.0
    for rank, idx in enumerate(order, start=1):
        if gold[idx]:
            hits += 1
            total += hits / rank
    return total / n_pos


def jaccard_overlap(mask_a: Sequence[int], mask_b: Sequence[int]) -> float:
    """|a n b| / |a u b| over token index sets; both empty -> 1.0."""
    if len(mask_a) != len(mask_b):
        raise ContractError(f"jaccard: mask lengths {len(mask_a)} vs {len(mask_b)}")
    a = {i for i, v in enumerate(mask_a) if v}
    b = {i for i, v in enumerate(mask_b) if v}
    if not a and not b:
        return 1.0
    return len(a & b) / len(a | b)


# -- faithfulness --

Predictor = Callable[[list[str]], np.ndarray]


@dataclass
class FaithfulnessInput:
    """Predictor m, post tokens x, rationale index set r, predicted class j."""

    predictor: Predictor
    tokens: list[str]
    rationale: set[int]
    predicted_class: int

    def __post_init__(self):
        bad = [i for i in self.rationale if not (0 <= i < len(self.tokens))]
        if bad:
            raise ContractError(f"rationale indices {bad} outside post of {len(self.tokens)} tokens")


def comprehensiveness(inp: FaithfulnessInput) -> float:
    """Probability drop when the rationale tokens are deleted from the post."""
    full = float(inp.predictor(inp.tokens)[inp.predicted_class])
    reduced = [t for i, t in enumerate(inp.tokens) if i not in inp.rationale]
    if len(reduced) == len(inp.tokens):
        return 0.0
    return full - float(inp.predictor(reduced)[inp.predicted_class])


def sufficiency(inp: FaithfulnessInput) -> float:
    """Probability gap between the full post and the rationale-only post."""
    full = float(inp.predictor(inp.tokens)[inp.predicted_class])
    kept = [t for i, t in enumerate(inp.tokens) if i in inp.rationale]
    if len(kept) == len(inp.tokens):
        return 0.0
    return full - float(inp.predictor(kept)[inp.predicted_class])


@dataclass
class MetricsReport:
    """Per-run record of scores plus provenance."""

    run_id: str
    seed: int
    k: int | None = None
    dataset: str = ""
    method: str = ""
    macro_f1: float | None = None
    auprc: float | None = None
    token_f1: float | None = None
    iou_f1: float | None = None
    comprehensiveness: float | None = None
    sufficiency: float | None = None
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = {
            "run_id": self.run_id,
            "seed": self.seed,
            "k": self.k,
            "dataset": self.dataset,
            "method": self.method,
            "macro_f1": self.macro_f1,
            "auprc": self.auprc,
            "token_f1": self.token_f1,
            "iou_f1": self.iou_f1,
            "comprehensiveness": self.comprehensiveness,
            "sufficiency": self.sufficiency,
        }
        d.update(self.extra)
        return d
