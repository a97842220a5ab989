"""Aggregation of a bag's instance representations into one vector.

Two variants, both permutation invariant and both producing a convex
combination of the rows (before any projection):

* ``weighted-sum-cosine``: each row is weighted by the softmax over rows of
  its summed cosine similarity to every row of the bag (no parameters);
* ``query-softmax``: row-softmax attention ``A = softmax(Z W Z^T)`` with a
  learned square query matrix, attended rows ``A Z`` reduced by their mean.

An optional learned projection MLP is applied to the aggregate.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoder import Mlp, _init

VARIANTS = ("weighted-sum-cosine", "query-softmax")


@dataclass
class AggregatorConfig:
    variant: str = "weighted-sum-cosine"
    use_projection: bool = False

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown aggregator variant {self.variant!r}")


class AggregatorParams:
    """Learned pieces of the aggregator: the query matrix (query-softmax
    variant) and the optional projection head."""

    def __init__(self, config, d_rep, d_proj, rng):
        self.config = config
        self.query = None
        self.projector = None
        if config.variant == "query-softmax":
            self.query = Tensor(_init(rng, d_rep, (d_rep, d_rep)), requires_grad=True)
        if config.use_projection:
            self.projector = Mlp([d_rep, d_proj, d_proj, d_proj], rng, "agg.proj")

    def named_params(self):
        out = {}
        if self.query is not None:
            out["agg.query"] = self.query
        if self.projector is not None:
            out.update(self.projector.named_params())
        return out


def aggregate(z, params):
    """Bag representation vector from an (m, d_rep) representation matrix."""
    if z.values.shape[0] == 0:
        raise ValueError("cannot aggregate an empty bag")
    config = params.config
    if config.variant == "query-softmax":
        scores = ad.matmul(ad.matmul(z, params.query), z, transpose_b=True)
        attended = ad.matmul(ad.softmax(scores), z)
        bag = ad.tmean(attended, axis=0)
    else:
        sims = ad.cosine_similarity(z, z)
        weights = ad.softmax(ad.tsum(sims, axis=1))
        bag = ad.matmul(weights, z)
    if params.projector is not None:
        bag = params.projector(bag)
    return bag
