"""Binary-classification, ranking, reward, and serving-cost arithmetic.

The defect-labelling convention follows production usage: the positive class
is non-defect and the negative class is defect, with the polarity
configurable per dataset.  Balanced accuracy is the mean of the two class
recalls; defect rate is the gold negative-class fraction and model defect
rate the predicted one.  All percentage metrics are kept at full precision;
two-decimal display rounding (half away from zero) happens only at the
reporting edge.

AUC is the Mann-Whitney statistic with ties counted 1/2.  NDCG uses the
graded gain 2^rel - 1 with a 1/log2(rank+1) discount.  The batch reward is
a shaping of the metric delta between pipelines with and without the
generated outputs, broadcast identically onto every sample of the batch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from decimal import ROUND_HALF_UP, Decimal
from typing import Hashable, Sequence

from .errors import DegenerateInput, InvalidInput, InvalidValue

__all__ = [
    "ConfusionCounts",
    "BinaryMetrics",
    "RankedList",
    "Shaping",
    "RewardBatch",
    "confusion",
    "binary_metrics",
    "bacc",
    "f1",
    "auc",
    "recall_at_k",
    "ndcg_at_k",
    "batch_reward",
    "cost_per_million",
    "round_percent",
]

DEFECT = "defect"
NON_DEFECT = "non-defect"


def round_percent(x: float, ndigits: int = 2) -> float:
    """Two-decimal display rounding, ties away from zero (report-table style)."""
    q = Decimal(1).scaleb(-ndigits)
    return float(Decimal(repr(x)).quantize(q, rounding=ROUND_HALF_UP))


@dataclass(frozen=True)
class ConfusionCounts:
    """Binary confusion counts; the positive class defaults to non-defect."""

    tp: int
    fp: int
    tn: int
    fn: int

    def __post_init__(self) -> None:
        if min(self.tp, self.fp, self.tn, self.fn) < 0:
            raise InvalidInput("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def flipped(self) -> "ConfusionCounts":
        """Swap which class is treated as positive."""
        return ConfusionCounts(tp=self.tn, fp=self.fn, tn=self.tp, fn=self.fp)


@dataclass(frozen=True)
class BinaryMetrics:
    """Percentage metrics in [0, 100], unrounded.

    ``defect_rate`` is the gold negative-class fraction, ``model_defect_rate``
    the predicted negative-class fraction; under default polarity those are
    the defect fractions of the dataset and of the model's predictions.
    """

    acc: float
    bacc: float
    pos_acc: float
    pos_prec: float
    neg_acc: float
    neg_prec: float
    pos_f1: float
    neg_f1: float
    defect_rate: float
    model_defect_rate: float

    def as_dict(self, rounded: bool = True) -> dict[str, float]:
        fields = {
            "defect_rate": self.defect_rate,
            "model_defect_rate": self.model_defect_rate,
            "bacc": self.bacc,
            "acc": self.acc,
            "pos_acc": self.pos_acc,
            "pos_prec": self.pos_prec,
            "neg_acc": self.neg_acc,
            "neg_prec": self.neg_prec,
            "pos_f1": self.pos_f1,
            "neg_f1": self.neg_f1,
        }
        if rounded:
            return {k: round_percent(v) for k, v in fields.items()}
        return fields


def confusion(
    gold: Sequence[str],
    pred: Sequence[str],
    positive: str = NON_DEFECT,
    negative: str = DEFECT,
) -> ConfusionCounts:
    """Tally a confusion matrix from parallel gold/pred label lists."""
    if len(gold) != len(pred):
        raise InvalidInput(f"gold has {len(gold)} labels, pred has {len(pred)}")
    if len(gold) == 0:
        raise InvalidInput("confusion requires at least one example")
    tp = fp = tn = fn = 0
    for i, (g, q) in enumerate(zip(gold, pred)):
        for side, label in (("gold", g), ("pred", q)):
            if label not in (positive, negative):
                raise InvalidInput(
                    f"row {i}: {side} label {label!r} is neither "
                    f"{positive!r} nor {negative!r}"
                )
        if g == positive:
            if q == positive:
                tp += 1
            else:
                fn += 1
        else:
            if q == positive:
                fp += 1
            else:
                tn += 1
    return ConfusionCounts(tp=tp, fp=fp, tn=tn, fn=fn)


def binary_metrics(c: ConfusionCounts) -> BinaryMetrics:
    """The full percentage metric suite from confusion counts.

    A gold class with zero examples leaves its recall (and bacc) undefined
    and raises DegenerateInput; a predicted class with zero examples gets
    precision 0 by convention.
    """
    if c.total == 0:
        raise InvalidInput("binary_metrics requires at least one example")
    gold_pos = c.tp + c.fn
    gold_neg = c.tn + c.fp
    if gold_pos == 0 or gold_neg == 0:
        raise DegenerateInput(
            f"recall undefined: gold has {gold_pos} positive and {gold_neg} "
            "negative examples"
        )
    pos_acc = 100.0 * c.tp / gold_pos
    neg_acc = 100.0 * c.tn / gold_neg
    pred_pos = c.tp + c.fp
    pred_neg = c.tn + c.fn
    pos_prec = 100.0 * c.tp / pred_pos if pred_pos else 0.0
    neg_prec = 100.0 * c.tn / pred_neg if pred_neg else 0.0
    return BinaryMetrics(
        acc=100.0 * (c.tp + c.tn) / c.total,
        bacc=(pos_acc + neg_acc) / 2.0,
        pos_acc=pos_acc,
        pos_prec=pos_prec,
        neg_acc=neg_acc,
        neg_prec=neg_prec,
        pos_f1=f1(pos_prec, pos_acc),
        neg_f1=f1(neg_prec, neg_acc),
        defect_rate=100.0 * gold_neg / c.total,
        model_defect_rate=100.0 * pred_neg / c.total,
    )


def f1(precision: float, recall: float) -> float:
    """Harmonic mean of precision and recall; 0 when both are 0."""
    for name, v in (("precision", precision), ("recall", recall)):
        if v < 0:
            raise InvalidInput(f"{name} must be >= 0, got {v}")
    if precision + recall == 0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def bacc(pos_recall: float, neg_recall: float) -> float:
    """Balanced accuracy from the two class recalls, in percent."""
    for name, v in (("pos_recall", pos_recall), ("neg_recall", neg_recall)):
        if not 0.0 <= v <= 100.0:
            raise InvalidInput(f"{name} must be in [0, 100], got {v}")
    return (pos_recall + neg_recall) / 2.0


def auc(scores: Sequence[tuple[float, bool]]) -> float:
    """P(random positive outscores random negative), ties counted 1/2.

    ``scores`` pairs each score with True for the positive class.  Computed
    via midranks in O(n log n); equals the pairwise Mann-Whitney count.
    """
    pos = sum(1 for _, is_pos in scores if is_pos)
    neg = len(scores) - pos
    if pos == 0 or neg == 0:
        raise DegenerateInput(
            f"AUC needs both classes, got {pos} positive / {neg} negative"
        )
    ranked = sorted(scores, key=lambda sp: sp[0])
    rank_sum_pos = 0.0
    i = 0
    while i < len(ranked):
        j = i
        while j < len(ranked) and ranked[j][0] == ranked[i][0]:
            j += 1
        midrank = (i + 1 + j) / 2.0  # average of 1-based ranks i+1..j
        rank_sum_pos += midrank * sum(1 for k in range(i, j) if ranked[k][1])
        i = j
    u = rank_sum_pos - pos * (pos + 1) / 2.0
    return u / (pos * neg)


@dataclass(frozen=True)
class RankedList:
    """An ordered candidate ranking with graded relevance judgments.

    ``items`` lists candidate ids best-first (rank 1 first).  ``judgments``
    maps item -> relevance >= 0 and may cover items that were not retrieved;
    unjudged items count as relevance 0.
    """

    items: tuple[Hashable, ...]
    judgments: dict[Hashable, float] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if len(set(self.items)) != len(self.items):
            raise InvalidInput("ranked items must be distinct")
        for item, rel in self.judgments.items():
            if rel < 0 or not math.isfinite(rel):
                raise InvalidInput(f"judgment for {item!r} must be finite and >= 0")

    def gain(self, item: Hashable) -> float:
        return self.judgments.get(item, 0.0)


def recall_at_k(r: RankedList, k: int) -> float:
    """Fraction of all relevant items appearing in the top k ranks."""
    if k <= 0:
        raise InvalidInput(f"k must be positive, got {k}")
    relevant = {item for item, rel in r.judgments.items() if rel > 0}
    if not relevant:
        raise DegenerateInput("recall@k needs at least one relevant item")
    top = set(r.items[:k])
    return len(relevant & top) / len(relevant)


def ndcg_at_k(r: RankedList, k: int) -> float:
    """DCG@k with gain 2^rel - 1 and 1/log2(rank+1) discount, normalised."""
    if k <= 0:
        raise InvalidInput(f"k must be positive, got {k}")
    gains = sorted((r.gain(i) for i in r.judgments), reverse=True)
    if not gains or gains[0] <= 0:
        raise DegenerateInput("ndcg@k needs at least one positive-gain item")
    dcg = sum(
        (2.0 ** r.gain(item) - 1.0) / math.log2(rank + 1)
        for rank, item in enumerate(r.items[:k], start=1)
    )
    idcg = sum(
        (2.0**rel - 1.0) / math.log2(rank + 1)
        for rank, rel in enumerate(gains[:k], start=1)
    )
    return dcg / idcg


# ── batch rewards ───────────────────────────────────────────────────────────

@dataclass(frozen=True)
class Shaping:
    """Reward shaping g applied to the metric delta: identity, scale, or
    clip-after-scale."""

    kind: str = "identity"
    scale: float = 1.0
    lo: float = -math.inf
    hi: float = math.inf

    def __post_init__(self) -> None:
        if self.kind not in ("identity", "scale", "clip"):
            raise InvalidValue(f"unknown shaping kind {self.kind!r}")
        if self.lo > self.hi:
            raise InvalidValue(f"clip bounds inverted: [{self.lo}, {self.hi}]")

    @classmethod
    def identity(cls) -> "Shaping":
        return cls()

    @classmethod
    def scaled(cls, c: float) -> "Shaping":
        return cls(kind="scale", scale=c)

    @classmethod
    def clipped(cls, lo: float, hi: float, scale: float = 1.0) -> "Shaping":
        return cls(kind="clip", scale=scale, lo=lo, hi=hi)

    def apply(self, delta: float) -> float:
        if self.kind == "identity":
            return delta
        scaled = self.scale * delta
        if self.kind == "scale":
            return scaled
        return min(max(scaled, self.lo), self.hi)


@dataclass
class RewardBatch:
    """A task's generated batch and the scalar reward shared by its samples."""

    task: str
    samples: list[tuple[str, str]]
    m_with: float | None = None
    m_base: float | None = None
    shaping: Shaping = field(default_factory=Shaping.identity)
    reward: float | None = None

    def sample_rewards(self) -> dict[tuple[str, str], float]:
        if self.reward is None:
            raise InvalidInput("batch reward has not been assigned yet")
        return {s: self.reward for s in self.samples}


def batch_reward(
    m_with: float, m_base: float, shaping: Shaping, batch: RewardBatch
) -> RewardBatch:
    """Assign g(m_with - m_base) as the identical reward of every sample."""
    return replace(
        batch,
        m_with=m_with,
        m_base=m_base,
        shaping=shaping,
        reward=shaping.apply(m_with - m_base),
    )


def cost_per_million(gpu_cost_per_second: float, throughput: float) -> float:
    """Dollar cost of labelling one million samples at the given throughput."""
    if throughput <= 0:
        raise InvalidInput(f"throughput must be positive, got {throughput}")
    if gpu_cost_per_second < 0:
        raise InvalidInput(f"cost must be non-negative, got {gpu_cost_per_second}")
    return gpu_cost_per_second / throughput * 1e6
