"""Evaluation metrics: instance-level (AUC, accuracy), bag-level (L1,
proportion intersection-over-union), and the class-awareness diagnostic.

All functions operate on plain numpy arrays and are pure.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata


def auc(scores, labels):
    """Exact area under the ROC curve via the Mann-Whitney rank statistic.

    Equals the probability that a random positive outranks a random
    negative, counting ties as one half. Both classes must be present.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    n_pos = int(np.sum(labels == 1))
    n_neg = int(np.sum(labels == 0))
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC undefined: both classes must be present")
    ranks = rankdata(scores, method="average")
    u = ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def accuracy(predicted, labels):
    """Fraction of exact class matches."""
    predicted = np.asarray(predicted)
    labels = np.asarray(labels)
    if predicted.size == 0:
        raise ValueError("accuracy of an empty prediction set")
    return float(np.mean(predicted == labels))


def l1_bag(p_hat, p_bar):
    """Total absolute difference between two proportion vectors."""
    p_hat = np.asarray(p_hat, dtype=np.float64)
    p_bar = np.asarray(p_bar, dtype=np.float64)
    if p_hat.shape != p_bar.shape:
        raise ValueError(f"proportion length mismatch: {p_hat.shape} vs {p_bar.shape}")
    return float(np.abs(p_hat - p_bar).sum())


def mpiou(p_hat, p_bar):
    """Mean per-class min/max ratio of two proportion vectors.

    Classes where both entries are zero are excluded from the mean; if every
    class has zero union the value is undefined and raises.
    """
    p_hat = np.asarray(p_hat, dtype=np.float64)
    p_bar = np.asarray(p_bar, dtype=np.float64)
    if p_hat.shape != p_bar.shape:
        raise ValueError(f"proportion length mismatch: {p_hat.shape} vs {p_bar.shape}")
    hi = np.maximum(p_hat, p_bar)
    active = hi > 0
    if not active.any():
        raise ValueError("mPIoU undefined: zero union for every class")
    lo = np.minimum(p_hat, p_bar)
    return float(np.mean(lo[active] / hi[active]))


def cas(representations, labels):
    """Class awareness of a representation space, in [0, 1].

    Mean cosine similarity over same-class pairs and over cross-class pairs,
    each mapped from [-1, 1] to [0, 1] by (x + 1) / 2; the score is the
    intra share of the intra + inter total. 0.5 means the representation
    carries no class signal; rows with zero norm contribute similarity 0.
    """
    z = np.asarray(representations, dtype=np.float64)
    labels = np.asarray(labels)
    classes = np.unique(labels)
    if classes.size < 2:
        raise ValueError("CAS undefined: needs at least two classes")

    norms = np.linalg.norm(z, axis=1)
    unit = np.divide(z, norms[:, None], out=np.zeros_like(z), where=norms[:, None] > 0)
    gram = unit @ unit.T
    same = labels[:, None] == labels[None, :]
    upper = np.triu(np.ones_like(gram, dtype=bool), k=1)

    intra_mask = same & upper
    inter_mask = ~same & upper
    if not intra_mask.any():
        raise ValueError("CAS undefined: no same-class pairs")
    s_intra = (gram[intra_mask].mean() + 1.0) / 2.0
    s_inter = (gram[inter_mask].mean() + 1.0) / 2.0
    denom = s_intra + s_inter
    if denom == 0.0:
        warnings.warn("CAS denominator is zero; returning 0.5", stacklevel=2)
        return 0.5
    return float(s_intra / denom)


@dataclass
class MetricsReport:
    """Named scalar results plus optional per-bag detail rows."""

    scalars: dict = field(default_factory=dict)
    per_bag: list = field(default_factory=list)  # dicts: bag_id + metric values

    def to_text_table(self):
        width = max((len(k) for k in self.scalars), default=6)
        lines = [f"{'metric':<{width}}  value", f"{'-' * width}  -----"]
        for name, value in self.scalars.items():
            lines.append(f"{name:<{width}}  {value:.6f}")
        return "\n".join(lines) + "\n"

    def write_records(self, path, header=None):
        """Line-delimited JSON: optional metadata record, scalar records,
        then per-bag records."""
        with open(path, "w", encoding="utf-8") as fh:
            if header:
                fh.write(json.dumps({"kind": "meta", **header}) + "\n")
            for name, value in self.scalars.items():
                fh.write(json.dumps({"kind": "scalar", "metric": name, "value": value}) + "\n")
            for row in self.per_bag:
                fh.write(json.dumps({"kind": "bag", **row}) + "\n")

    @staticmethod
    def read_records(path):
        report = MetricsReport()
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                rec = json.loads(line)
                kind = rec.pop("kind", "meta")
                if kind == "scalar":
                    report.scalars[rec["metric"]] = rec["value"]
                elif kind == "bag":
                    report.per_bag.append(rec)
        return report
