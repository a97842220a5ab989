"""Training objectives for both pipeline stages.

Fine-tuning combines a bag-level KL proportion-matching loss with the
difference-contrastive loss over pseudo-positive cross-bag pairs, mixed by
an exponential ramp that shifts weight from the former to the latter over
the epochs. Pretraining combines a bag-level metric loss (cosine similarity
of aggregated bag representations tracking the proportion overlap) with an
instance-level pool of InfoNCE plus denoising reconstruction.

Losses return engine tensors and are differentiable end to end; the
instance cross-entropy is evaluation-only and returns a float.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .metrics import mpiou


@dataclass
class LossConfig:
    temperature: float = 0.5
    margin: float = 0.0
    kappa: float = 1.0
    alpha: float = 1.0
    beta: float = 1.0
    total_epochs: int = 300

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError(f"temperature must be > 0, got {self.temperature}")
        if not 0.0 <= self.margin < 1.0:
            raise ValueError(f"margin must be in [0, 1), got {self.margin}")
        if self.kappa < 0 or self.alpha < 0 or self.beta < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.total_epochs < 1:
            raise ValueError(f"total_epochs must be >= 1, got {self.total_epochs}")


def llp_loss(p_hat, p_bar):
    """KL divergence from the true bag proportion to the predicted one.

    ``p_hat`` is the mean of the instance probability rows over the bag
    (clamped at 1e-12 inside the log); ``p_bar`` is a constant. Terms with
    a zero true proportion contribute exactly zero.
    """
    p_hat = p_hat if isinstance(p_hat, Tensor) else Tensor(p_hat)
    p_bar = np.asarray(p_bar, dtype=np.float64)
    if p_hat.values.shape != p_bar.shape:
        raise ValueError(
            f"proportion length mismatch: {p_hat.values.shape} vs {p_bar.shape}"
        )
    base = float(np.sum(np.where(p_bar > 0, p_bar * np.log(np.maximum(p_bar, 1e-300)), 0.0)))
    cross = ad.tsum(ad.mul(Tensor(p_bar), ad.log(p_hat)))
    return ad.sub(Tensor(np.float64(base)), cross)


def instance_ce(probs, one_hot):
    """Mean instance cross-entropy; evaluation and oracle use only."""
    probs = np.asarray(probs, dtype=np.float64)
    one_hot = np.asarray(one_hot, dtype=np.float64)
    clamped = np.maximum(probs, 1e-12)
    return float(-(one_hot * np.log(clamped)).sum() / probs.shape[0])


def diff_contrastive(z1, z2, positives, temperature):
    """Contrastive loss over pseudo-positive cross-bag pairs.

    Each positive (i, j) is pulled together against all instances of the
    opposite bag (including j) as negatives, symmetrized by anchoring from
    both bags and averaging the two directions. An empty positive set
    contributes exactly zero.
    """
    if temperature <= 0:
        raise ValueError(f"temperature must be > 0, got {temperature}")
    if not positives:
        return Tensor(np.float64(0.0))
    rows = np.array([i for i, _ in positives])
    cols = np.array([j for _, j in positives])
    inv_t = 1.0 / temperature

    logits12 = ad.mul(ad.cosine_similarity(z1, z2), Tensor(np.float64(inv_t)))
    picked12 = ad.log(ad.softmax(logits12))[rows, cols]
    logits21 = ad.mul(ad.cosine_similarity(z2, z1), Tensor(np.float64(inv_t)))
    picked21 = ad.log(ad.softmax(logits21))[cols, rows]

    scale = np.float64(-0.5 / len(positives))
    return ad.mul(Tensor(scale), ad.add(ad.tsum(picked12), ad.tsum(picked21)))


def cosine_embedding(z1, z2, positives, negatives, margin):
    """Ablation variant: hinge on negatives, 1 - cosine on positives.

    ``positives`` and ``negatives`` together form the full one-to-one
    assignment; an empty side contributes zero.
    """
    terms = []
    if positives:
        rows = np.array([i for i, _ in positives])
        cols = np.array([j for _, j in positives])
        sims = ad.cosine_similarity(z1, z2)[rows, cols]
        terms.append(ad.tmean(ad.sub(Tensor(np.float64(1.0)), sims)))
    if negatives:
        rows = np.array([i for i, _ in negatives])
        cols = np.array([j for _, j in negatives])
        sims = ad.cosine_similarity(z1, z2)[rows, cols]
        terms.append(ad.tmean(ad.relu(ad.sub(sims, Tensor(np.float64(margin))))))
    if not terms:
        return Tensor(np.float64(0.0))
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return total


def self_contrastive(proj1, proj2, temperature):
    """InfoNCE between two row-aligned projected views of one batch.

    Projections are unit-normalized (cosine logits), positives on the
    diagonal, summed over the batch.
    """
    if temperature <= 0:
        raise ValueError(f"temperature must be > 0, got {temperature}")
    if proj1.values.shape[0] != proj2.values.shape[0]:
        raise ValueError(
            f"view row counts differ: {proj1.values.shape[0]} vs {proj2.values.shape[0]}"
        )
    n = proj1.values.shape[0]
    logits = ad.mul(ad.cosine_similarity(proj1, proj2), Tensor(np.float64(1.0 / temperature)))
    diag = ad.log(ad.softmax(logits))[np.arange(n), np.arange(n)]
    return ad.mul(Tensor(np.float64(-1.0)), ad.tsum(diag))


def reconstruction_loss(decoded, schema, rows, missing, kappa):
    """Denoising reconstruction error against the uncorrupted batch.

    Cross-entropy over the original levels for categorical columns, squared
    error for numeric ones; missing cells are excluded; the column sums are
    averaged over the batch and scaled by ``kappa``.
    """
    rows = np.asarray(rows, dtype=np.float64)
    missing = np.asarray(missing, dtype=bool)
    n = rows.shape[0]
    total = Tensor(np.float64(0.0))
    for k, col in enumerate(schema):
        keep = (~missing[:, k]).astype(np.float64)
        out = decoded[col.name]
        if col.kind == "categorical":
            targets = np.where(missing[:, k], 0, rows[:, k]).astype(np.int64)
            logp = ad.log(ad.softmax(out))[np.arange(n), targets]
            term = ad.mul(Tensor(np.float64(-1.0)), ad.tsum(ad.mul(logp, Tensor(keep))))
        else:
            diff = ad.sub(out[:, 0], Tensor(rows[:, k]))
            term = ad.tsum(ad.mul(ad.mul(diff, diff), Tensor(keep)))
        total = ad.add(total, term)
    return ad.mul(Tensor(np.float64(kappa / n)), total)


def bag_contrastive(b1, b2, p1, p2, margin):
    """Metric loss tying bag-representation similarity to proportion overlap.

    With overlap s = mPIoU(p1, p2): dissimilar bags (small s) are pushed
    below the margin, similar bags (large s) are pulled toward cosine 1.
    """
    s = mpiou(p1, p2)
    c = ad.cosine_similarity(b1, b2)
    push = ad.relu(ad.sub(c, Tensor(np.float64(margin))))
    pull = ad.sub(Tensor(np.float64(1.0)), c)
    return ad.add(
        ad.mul(Tensor(np.float64(1.0 - s)), push),
        ad.mul(Tensor(np.float64(s)), pull),
    )


def ramp_weights(t, total):
    """Exponential ramp pair (contrastive weight, proportion-loss weight).

    The contrastive weight is exp(-5 (1 - t/total)^2); the proportion-loss
    weight is its complement, so the two always sum to exactly 1.
    """
    if total < 1:
        raise ValueError(f"total epochs must be >= 1, got {total}")
    if not 0 <= t <= total:
        raise ValueError(f"epoch {t} outside [0, {total}]")
    lam = math.exp(-5.0 * (1.0 - t / total) ** 2)
    return lam, 1.0 - lam


@dataclass
class BagPairState:
    """Forward results for one fine-tuning bag pair."""

    z1: Tensor
    z2: Tensor
    positives: list
    pred1: Tensor  # instance probability rows, bag 1
    pred2: Tensor
    prop1: np.ndarray
    prop2: np.ndarray


def finetune_loss(state, t, total, temperature, weights=None):
    """Ramped combination of the contrastive and proportion losses.

    ``weights`` overrides the ramp (the plain proportion-matching baseline
    passes (0, 1)); when the contrastive weight is zero the contrastive term
    is skipped entirely.
    """
    lam, gam = ramp_weights(t, total) if weights is None else weights
    p_hat1 = ad.tmean(state.pred1, axis=0)
    p_hat2 = ad.tmean(state.pred2, axis=0)
    kl = ad.mul(
        Tensor(np.float64(gam / 2.0)),
        ad.add(llp_loss(p_hat1, state.prop1), llp_loss(p_hat2, state.prop2)),
    )
    if lam == 0.0:
        return kl
    diff = diff_contrastive(state.z1, state.z2, state.positives, temperature)
    return ad.add(ad.mul(Tensor(np.float64(lam)), diff), kl)


@dataclass
class PretrainPairState:
    """Forward results for one pretraining bag pair (union batch)."""

    proj1: Tensor  # projected view 1 of the union batch
    proj2: Tensor  # projected view 2 (corrupted or feature view)
    decoded: dict  # per-column reconstruction outputs
    schema: list
    rows: np.ndarray  # uncorrupted preprocessed batch
    missing: np.ndarray
    b1: Tensor  # aggregated bag representations
    b2: Tensor
    prop1: np.ndarray
    prop2: np.ndarray


def pretrain_loss(state, alpha, beta, kappa, temperature, margin):
    """Bag metric loss plus the weighted instance-level pretraining pool."""
    bag = bag_contrastive(state.b1, state.b2, state.prop1, state.prop2, margin)
    pool = ad.add(
        self_contrastive(state.proj1, state.proj2, temperature),
        reconstruction_loss(state.decoded, state.schema, state.rows, state.missing, kappa),
    )
    return ad.add(
        ad.mul(Tensor(np.float64(alpha)), bag),
        ad.mul(Tensor(np.float64(beta)), pool),
    )
