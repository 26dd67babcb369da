"""Binary classification metrics for the positive (fire) class.

Scores at or above the threshold count as positive predictions. Ratios with a
zero denominator are reported as 0 and listed in ``degenerate``.
"""
import dataclasses

import numpy as np

from .errors import ContractError

REPORT_COLUMNS = ("TP", "FP", "TN", "FN", "Precision", "Recall", "F1", "AUROC", "OA")


@dataclasses.dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.tn, self.fn) < 0:
            raise ContractError("confusion counts must be non-negative")

    @property
    def total(self):
        return self.tp + self.fp + self.tn + self.fn


@dataclasses.dataclass(frozen=True)
class PRF:
    precision: float
    recall: float
    f1: float
    oa: float
    degenerate: tuple = ()


def confusion(scores, labels, threshold=0.5):
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    if scores.shape != labels.shape:
        raise ContractError(f"{scores.size} scores for {labels.size} labels")
    pred = scores >= threshold
    pos = labels == 1
    return ConfusionCounts(
        tp=int(np.sum(pred & pos)), fp=int(np.sum(pred & ~pos)),
        tn=int(np.sum(~pred & ~pos)), fn=int(np.sum(~pred & pos)),
    )


def _ratio(num, den):
    return (100.0 * num / den, False) if den > 0 else (0.0, True)


def prf_oa(c):
    """Precision, recall, F1 and overall accuracy in percent."""
    p, p_bad = _ratio(c.tp, c.tp + c.fp)
    r, r_bad = _ratio(c.tp, c.tp + c.fn)
    oa, oa_bad = _ratio(c.tp + c.tn, c.total)
    if p + r > 0:
        f1, f_bad = 2 * p * r / (p + r), False
    else:
        f1, f_bad = 0.0, True
    flags = tuple(name for name, bad in
                  (("precision", p_bad), ("recall", r_bad), ("f1", f_bad), ("oa", oa_bad)) if bad)
    return PRF(p, r, f1, oa, flags)


def auroc(scores, labels):
    """Area under the ROC curve by trapezoidal integration over distinct score thresholds."""
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    n_pos = int(np.sum(labels == 1))
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ContractError("AUROC needs at least one positive and one negative sample")
    order = np.argsort(-scores, kind="mergesort")
    s = scores[order]
    y = labels[order] == 1
    # last index of each block of tied scores
    ends = np.r_[np.flatnonzero(np.diff(s) != 0), s.size - 1]
    tps = np.cumsum(y)[ends]
    fps = (ends + 1) - tps
    tpr = np.r_[0, tps] / n_pos
    fpr = np.r_[0, fps] / n_neg
    return float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2))


UNDEFINED = None


def per_class_recall(scores, labels, threshold=0.5):
    """``(recall_pos, recall_neg)`` in percent; ``None`` for a class without samples."""
    c = confusion(scores, labels, threshold)
    pos = 100.0 * c.tp / (c.tp + c.fn) if c.tp + c.fn else UNDEFINED
    neg = 100.0 * c.tn / (c.tn + c.fp) if c.tn + c.fp else UNDEFINED
    return pos, neg


def report(scores, labels, threshold=0.5):
    """Full metric battery as an ordered dict keyed by :data:`REPORT_COLUMNS` plus extras."""
    c = confusion(scores, labels, threshold)
    m = prf_oa(c)
    try:
        auc = 100.0 * auroc(scores, labels)
        flags = m.degenerate
    except ContractError:
        auc = None
        flags = m.degenerate + ("auroc",)
    rp, rn = per_class_recall(scores, labels, threshold)
    return {
        "TP": c.tp, "FP": c.fp, "TN": c.tn, "FN": c.fn,
        "Precision": m.precision, "Recall": m.recall, "F1": m.f1, "AUROC": auc, "OA": m.oa,
        "RecallPos": rp, "RecallNeg": rn, "Threshold": threshold, "Samples": c.total,
        "Flags": ",".join(flags) if flags else "",
    }


def _fmt(v):
    if v is None:
        return "-"
    if isinstance(v, float):
        return f"{v:.2f}"
    return str(v)


def format_table(rep, sep="\t"):
    """Two-line delimited table with exactly the :data:`REPORT_COLUMNS` headers."""
    return sep.join(REPORT_COLUMNS) + "\n" + sep.join(_fmt(rep[k]) for k in REPORT_COLUMNS) + "\n"


def format_keyvalue(rep):
    lines = []
    for k, v in rep.items():
        if isinstance(v, float):
            v = repr(v)
        lines.append(f"{k}={'' if v is None else v}")
    return "\n".join(lines) + "\n"


def parse_keyvalue(text):
    out = {}
    for line in text.splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            out[k] = v
    return out
