"""Pseudo-positive pair generation between two bags.

Given the label proportions of two equal-size bags, the number of cross-bag
pairs guaranteed to share a label under any optimal matching is
``round(m * sum_c min(p1_c, p2_c))``. A maximum-similarity one-to-one
assignment is solved on the cosine similarity matrix of the two bags'
representations, and the top-n_pos matched pairs by similarity become the
positive set; the remaining matched pairs are the implicit negatives.

All operations here are pure numpy functions over detached representation
values; gradients never flow through pair selection.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment


@dataclass(frozen=True)
class Assignment:
    """A one-to-one bag matching plus its selected positive subset.

    ``mapping[i]`` is the bag-2 index matched to bag-1 instance ``i``;
    ``positives`` is the list of (i, mapping[i]) pairs chosen as
    pseudo-positives, of length ``n_pos``.
    """

    mapping: np.ndarray
    positives: list

    def __post_init__(self):
        m = len(self.mapping)
        if sorted(self.mapping.tolist()) != list(range(m)):
            raise ValueError("assignment mapping is not a permutation")


def n_pos(p1, p2, m):
    """Count of guaranteed same-label cross-bag pairs for bag size ``m``.

    Round-half-up of ``m * sum_c min(p1_c, p2_c)``, clamped to [0, m].
    """
    p1 = np.asarray(p1, dtype=np.float64)
    p2 = np.asarray(p2, dtype=np.float64)
    if p1.shape != p2.shape:
        raise ValueError(f"proportion length mismatch: {p1.shape} vs {p2.shape}")
    raw = m * np.minimum(p1, p2).sum()
    return int(np.clip(np.floor(raw + 0.5), 0, m))


def similarity_matrix(z1, z2):
    """Pairwise cosine similarities between rows of two equal-size bags.

    Rows with zero norm get similarity 0 against everything.
    """
    z1 = np.asarray(z1, dtype=np.float64)
    z2 = np.asarray(z2, dtype=np.float64)
    if z1.shape != z2.shape:
        raise ValueError(f"bag representation shape mismatch: {z1.shape} vs {z2.shape}")
    n1 = np.linalg.norm(z1, axis=1)
    n2 = np.linalg.norm(z2, axis=1)
    u1 = np.divide(z1, n1[:, None], out=np.zeros_like(z1), where=n1[:, None] > 0)
    u2 = np.divide(z2, n2[:, None], out=np.zeros_like(z2), where=n2[:, None] > 0)
    return u1 @ u2.T


def solve_lsa(sim):
    """Permutation maximizing the assignment sum of a square matrix.

    Solved by the Jonker-Volgenant family on the negated matrix; the sum is
    exactly optimal (verified against brute-force enumeration in tests).
    Ties are broken deterministically toward the lexicographically smallest
    permutation via sum-preserving pairwise swaps.
    """
    sim = np.asarray(sim, dtype=np.float64)
    if sim.ndim != 2 or sim.shape[0] != sim.shape[1]:
        raise ValueError(f"similarity matrix must be square, got {sim.shape}")
    if not np.isfinite(sim).all():
        raise ValueError("similarity matrix contains non-finite entries")

    _, cols = linear_sum_assignment(-sim)
    perm = cols.astype(np.int64)

    # Tie canonicalization: selection pass over rows; swap perm[i] with a
    # later row's column when the pairwise sums are exactly equal and the
    # swap lowers perm[i].
    m = len(perm)
    rows = np.arange(m)
    for i in range(m - 1):
        tail = rows[i:]
        own = sim[i, perm[i]] + sim[tail, perm[tail]]
        swapped = sim[i, perm[tail]] + sim[tail, perm[i]]
        eligible = (swapped == own) & (perm[tail] < perm[i])
        if eligible.any():
            candidates = perm[tail][eligible]
            j = tail[eligible][np.argmin(candidates)]
            perm[i], perm[j] = perm[j], perm[i]
    return perm


def solve_greedy(sim):
    """Ablation variant: repeatedly take the best unused (row, column) pair.

    Ties broken by smaller row, then smaller column (numpy argmax order).
    Can be suboptimal; tests check its sum never exceeds the exact solver's.
    """
    sim = np.asarray(sim, dtype=np.float64)
    if sim.ndim != 2 or sim.shape[0] != sim.shape[1]:
        raise ValueError(f"similarity matrix must be square, got {sim.shape}")
    if not np.isfinite(sim).all():
        raise ValueError("similarity matrix contains non-finite entries")

    m = sim.shape[0]
    work = sim.copy()
    perm = np.full(m, -1, dtype=np.int64)
    for _ in range(m):
        flat = np.argmax(work)  # first occurrence: smallest row, then column
        i, j = divmod(int(flat), m)
        perm[i] = j
        work[i, :] = -np.inf
        work[:, j] = -np.inf
    return perm


def select_positives(sim, perm, k):
    """Top-``k`` matched pairs by similarity; ties prefer the smaller row."""
    m = len(perm)
    if not 0 <= k <= m:
        raise ValueError(f"positive count {k} outside [0, {m}]")
    matched = sim[np.arange(m), perm]
    order = np.lexsort((np.arange(m), -matched))
    return [(int(i), int(perm[i])) for i in order[:k]]


def assign_pairs(z1, z2, p1, p2):
    """Full pipeline: similarity, exact assignment, top-n_pos selection."""
    sim = similarity_matrix(z1, z2)
    perm = solve_lsa(sim)
    k = n_pos(p1, p2, sim.shape[0])
    return Assignment(mapping=perm, positives=select_positives(sim, perm, k))


def pair_accuracy(positives, labels1, labels2):
    """Fraction of positive pairs whose instances share a true label.

    Evaluation-only (reads labels). An empty positive set returns 1.0 with
    the ``empty`` flag set so callers can exclude it from aggregates.
    Returns (accuracy, empty).
    """
    labels1 = np.asarray(labels1)
    labels2 = np.asarray(labels2)
    if not positives:
        return 1.0, True
    hits = sum(1 for i, j in positives if labels1[i] == labels2[j])
    return hits / len(positives), False


def dump_assignment(fh, sim, perm, positives):
    """Text audit dump of a similarity matrix, its assignment, and the
    selected positives."""
    fh.write(f"similarity ({sim.shape[0]}x{sim.shape[1]}):\n")
    for row in sim:
        fh.write("  " + " ".join(f"{v: .6f}" for v in row) + "\n")
    fh.write("assignment: " + " ".join(str(int(j)) for j in perm) + "\n")
    fh.write("positives: " + " ".join(f"({i},{j})" for i, j in positives) + "\n")
