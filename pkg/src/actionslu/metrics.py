"""Confusion counts, precision/recall/F1 in two modes, and span-level F1.

"standard" mode uses the textbook formulas and always lands in [0, 1].
"paper-literal" mode reproduces the printed formulas of the source write-up,
which deviate from the standard ones (the accuracy denominator drops TN and
the recall is the negative-predictive-value form) and can exceed 1; reports
carry a flag whenever that mode is used.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .errors import InvalidInputError
from .labels import OUTSIDE, bio_to_spans

STANDARD = "standard"
PAPER_LITERAL = "paper-literal"


@dataclass
class ConfusionCounts:
    tp: int = 0
    tn: int = 0
    fp: int = 0
    fn: int = 0

    def __post_init__(self):
        if min(self.tp, self.tn, self.fp, self.fn) < 0:
            raise InvalidInputError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn

    def add(self, other: "ConfusionCounts") -> None:
        self.tp += other.tp
        self.tn += other.tn
        self.fp += other.fp
        self.fn += other.fn


@dataclass
class PRF1:
    accuracy: float
    precision: float
    recall: float
    f1: float
    mode: str
    zero_denominator: bool = False


def _ratio(num, den):
    return (num / den, False) if den else (0.0, True)


def prf1(counts: ConfusionCounts, mode: str = STANDARD) -> PRF1:
    """Accuracy, precision, recall, F1 from pooled confusion counts."""
    c = counts
    flagged = False
    if mode == STANDARD:
        acc, z1 = _ratio(c.tp + c.tn, c.total)
        rec, z3 = _ratio(c.tp, c.tp + c.fn)
    elif mode == PAPER_LITERAL:
        # Formulas exactly as printed: Acc omits TN from the denominator and
        # R is TN/(TN+FN); Acc can exceed 1.
        acc, z1 = _ratio(c.tp + c.tn, c.tp + c.fp + c.fn)
        rec, z3 = _ratio(c.tn, c.tn + c.fn)
    else:
        raise InvalidInputError(f"unknown metrics mode {mode!r}")
    prec, z2 = _ratio(c.tp, c.tp + c.fp)
    f1, z4 = _ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn)
    return PRF1(accuracy=acc, precision=prec, recall=rec, f1=f1, mode=mode,
                zero_denominator=z1 or z2 or z3 or z4)


def token_confusion(gold_sequences, pred_sequences,
                    labels) -> ConfusionCounts:
    """Pooled one-vs-rest counts per (token, class) over all non-O classes.

    TN is only well defined for multi-class tagging in this pooled view,
    which is why the pooling is spelled out here rather than left implicit.
    """
    positive = [lab for lab in labels if lab != OUTSIDE]
    counts = ConfusionCounts()
    for gold, pred in zip(gold_sequences, pred_sequences):
        if len(gold) != len(pred):
            raise InvalidInputError("gold/pred length mismatch")
        for g, p in zip(gold, pred):
            for lab in positive:
                if g == lab and p == lab:
                    counts.tp += 1
                elif g == lab:
                    counts.fn += 1
                elif p == lab:
                    counts.fp += 1
                else:
                    counts.tn += 1
    return counts


def span_confusion(gold_sequences, pred_sequences) -> ConfusionCounts:
    """Micro span counts: a predicted span is TP only on exact type+boundary."""
    counts = ConfusionCounts()
    for gold, pred in zip(gold_sequences, pred_sequences):
        if len(gold) != len(pred):
            raise InvalidInputError("gold/pred length mismatch")
        gold_spans = set(bio_to_spans(gold))
        pred_spans = set(bio_to_spans(pred))
        counts.tp += len(gold_spans & pred_spans)
        counts.fp += len(pred_spans - gold_spans)
        counts.fn += len(gold_spans - pred_spans)
    return counts


def span_f1(gold_sequences, pred_sequences) -> float:
    return prf1(span_confusion(gold_sequences, pred_sequences)).f1


@dataclass
class MetricsReport:
    intent_accuracy: float
    token_precision: float
    token_recall: float
    token_f1: float
    span_f1: float
    per_class: dict = field(default_factory=dict)
    mode: str = STANDARD
    zero_denominator: bool = False

    def row(self) -> dict:
        return {"intent_acc": self.intent_accuracy,
                "token_f1": self.token_f1, "span_f1": self.span_f1}


def evaluate(params, vocab, corpus, alpha: float = 0.0,
             mode: str = STANDARD) -> MetricsReport:
    """Run fused tagging over a labeled corpus and aggregate the metrics."""
    from .decoding import predict_slu  # local import avoids a cycle

    schema = params.schema
    intent_hits = 0
    gold_tags, pred_tags = [], []
    for rec in corpus:
        pred = predict_slu(params, vocab, rec.tokens, alpha=alpha)
        intent_hits += int(pred.intent == rec.intent)
        gold_tags.append(rec.slots)
        pred_tags.append(pred.slots)
    return report_from_predictions(schema, [r.intent for r in corpus],
                                   intent_hits, gold_tags, pred_tags, mode)


def report_from_predictions(schema, gold_intents, intent_hits, gold_tags,
                            pred_tags, mode: str = STANDARD) -> MetricsReport:
    token_counts = token_confusion(gold_tags, pred_tags, schema.slots)
    token_scores = prf1(token_counts, mode)
    span_counts = span_confusion(gold_tags, pred_tags)
    span_scores = prf1(span_counts, mode)

    per_class = {}
    for lab in schema.slots:
        if lab == OUTSIDE:
            continue
        counts = token_confusion(gold_tags, pred_tags, [lab, OUTSIDE])
        per_class[lab] = prf1(counts, mode)

    n = len(gold_intents)
    return MetricsReport(
        intent_accuracy=intent_hits / n if n else 0.0,
        token_precision=token_scores.precision,
        token_recall=token_scores.recall,
        token_f1=token_scores.f1,
        span_f1=span_scores.f1,
        per_class=per_class,
        mode=mode,
        zero_denominator=token_scores.zero_denominator
        or span_scores.zero_denominator)
