"""Desk-scale toolkit for learning from label proportions on tabular data.

Implements a two-stage pipeline: bag-level contrastive pretraining followed
by difference-contrastive fine-tuning, with a plain proportion-matching
baseline, bagging/pairing utilities, and the evaluation metrics used to
validate both stages.
"""

__version__ = "0.1.0"
