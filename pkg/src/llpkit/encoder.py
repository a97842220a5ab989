"""Differentiable tabular encoder and its heads.

Per-column embeddings (learned tables for categorical columns, affine maps
plus a learned missing-indicator vector for numeric ones) are concatenated
and pushed through a small normalized MLP trunk to a representation of width
``d_rep``. The first ``d_cls`` coordinates form the cls view used by the
augmentation-free separated-representation mode; the rest is the feature
view feeding the per-column reconstruction decoders.

Checkpoints are a flat binary file of named float64 arrays with a magic
header; see :func:`save_arrays`.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

CHECKPOINT_MAGIC = b"LLPKIT-CKPT-v1\n"


@dataclass
class EncoderConfig:
    d_embed: int = 8
    d_hidden: int = 128
    d_rep: int = 64
    d_cls: int = 16
    d_proj: int = 32

    def __post_init__(self):
        if not (8 <= self.d_cls < self.d_rep):
            raise ValueError(f"d_cls must be in [8, d_rep); got {self.d_cls} of {self.d_rep}")


def _init(rng, fan_in, shape):
    bound = 1.0 / np.sqrt(max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape)


class Mlp:
    """Fully connected stack, rectifier between layers.

    ``norm_hidden`` inserts layer normalization before each hidden rectifier
    (used by the trunk only).
    """

    def __init__(self, widths, rng, name, norm_hidden=False):
        self.name = name
        self.norm_hidden = norm_hidden
        self.weights = []
        self.biases = []
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            self.weights.append(Tensor(_init(rng, fan_in, (fan_in, fan_out)), requires_grad=True))
            self.biases.append(Tensor(_init(rng, fan_in, (fan_out,)), requires_grad=True))

    def __call__(self, x):
        last = len(self.weights) - 1
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            x = ad.add(ad.matmul(x, w), b)
            if k < last:
                if self.norm_hidden:
                    x = ad.layer_norm(x)
                x = ad.relu(x)
        return x

    def named_params(self):
        out = {}
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"{self.name}.w{k}"] = w
            out[f"{self.name}.b{k}"] = b
        return out


class EncoderParams:
    """Column embeddings plus the trunk MLP."""

    def __init__(self, schema, config, rng):
        self.schema = list(schema)
        self.config = config
        d = config.d_embed
        self.tables = {}  # categorical: name -> (cardinality+1, d_embed)
        self.numeric = {}  # numeric: name -> (weight, bias, missing vector)
        for col in self.schema:
            if col.kind == "categorical":
                self.tables[col.name] = Tensor(
                    _init(rng, d, (col.cardinality + 1, d)), requires_grad=True
                )
            else:
                self.numeric[col.name] = (
                    Tensor(_init(rng, 1, (d,)), requires_grad=True),
                    Tensor(_init(rng, 1, (d,)), requires_grad=True),
                    Tensor(_init(rng, 1, (d,)), requires_grad=True),
                )
        width_in = len(self.schema) * d
        self.trunk = Mlp(
            [width_in, config.d_hidden, config.d_hidden, config.d_rep],
            rng,
            "trunk",
            norm_hidden=True,
        )

    def embed(self, rows, missing):
        """Concatenated per-column embeddings for a preprocessed batch.

        Missing cells use the categorical column's reserved table row or, for
        numeric columns, value 0 plus the learned missing-indicator vector.
        """
        rows = np.asarray(rows, dtype=np.float64)
        missing = np.asarray(missing, dtype=bool)
        pieces = []
        for k, col in enumerate(self.schema):
            if col.kind == "categorical":
                idx = np.where(missing[:, k], col.cardinality, rows[:, k]).astype(np.int64)
                if idx.size and (idx.min() < 0 or idx.max() > col.cardinality):
                    raise ValueError(
                        f"column {col.name!r}: categorical index outside "
                        f"[0, {col.cardinality}]"
                    )
                pieces.append(self.tables[col.name][idx])
            else:
                weight, bias, miss_vec = self.numeric[col.name]
                value = np.where(missing[:, k], 0.0, rows[:, k])[:, None]
                flag = missing[:, k].astype(np.float64)[:, None]
                e = ad.add(ad.add(ad.mul(Tensor(value), weight), bias),
                           ad.mul(Tensor(flag), miss_vec))
                pieces.append(e)
        return ad.concat(pieces, axis=1)

    def encode_embedding(self, embedded):
        """Trunk applied to an (already built) embedding matrix."""
        return self.trunk(embedded)

    def encode(self, rows, missing):
        """Representation matrix Z, shape (batch, d_rep)."""
        return self.encode_embedding(self.embed(rows, missing))

    def views(self, z):
        """(cls_view, feature_view): a partition of Z's coordinates."""
        d_cls = self.config.d_cls
        return z[:, :d_cls], z[:, d_cls:]

    def corrupt(self, rows, missing, p_cutmix, mixup_weight, rng):
        """Corrupted embedding matrix from cell swapping plus embedding blend.

        Each cell keeps its own value with probability ``p_cutmix``,
        otherwise takes the cell (value and missing flag) of a uniformly
        drawn partner row; the swapped batch is embedded and each embedding
        row is blended with another row's embedding at ``mixup_weight``.
        Categorical cells always move whole (the swap mask is binary per
        cell). Deterministic given ``rng``.
        """
        rng = np.random.default_rng(rng)
        rows = np.asarray(rows, dtype=np.float64)
        missing = np.asarray(missing, dtype=bool)
        n = rows.shape[0]
        if n < 2:
            raise ValueError("corrupt needs a batch of at least 2 rows")
        if not 0.0 < p_cutmix <= 1.0:
            raise ValueError(f"p_cutmix must be in (0, 1], got {p_cutmix}")
        if not 0.0 < mixup_weight <= 1.0:
            raise ValueError(f"mixup weight must be in (0, 1], got {mixup_weight}")

        keep = rng.random(rows.shape) < p_cutmix
        partners_a = _partners_excluding_self(rng, n)
        swapped_rows = np.where(keep, rows, rows[partners_a])
        swapped_missing = np.where(keep, missing, missing[partners_a])

        partners_b = _partners_excluding_self(rng, n)
        e = self.embed(swapped_rows, swapped_missing)
        blend = ad.add(ad.mul(Tensor(np.float64(mixup_weight)), e),
                       ad.mul(Tensor(np.float64(1.0 - mixup_weight)), e[partners_b]))
        return blend

    def named_params(self):
        out = {}
        for name, table in self.tables.items():
            out[f"embed.{name}.table"] = table
        for name, (weight, bias, miss_vec) in self.numeric.items():
            out[f"embed.{name}.weight"] = weight
            out[f"embed.{name}.bias"] = bias
            out[f"embed.{name}.missing"] = miss_vec
        out.update(self.trunk.named_params())
        return out


def _partners_excluding_self(rng, n):
    partners = rng.integers(0, n - 1, size=n)
    partners[partners >= np.arange(n)] += 1
    return partners


class HeadParams:
    """Prediction head, the two self-contrastive projectors, and the
    per-column reconstruction decoders.

    Projector input widths follow the view mode: the full representation
    for mixup-cutmix corruption, or the cls/feature views for the separated
    representation mode.
    """

    def __init__(self, schema, config, n_classes, view_mode, rng, decoder_hidden=32):
        self.schema = list(schema)
        self.config = config
        self.n_classes = int(n_classes)
        self.view_mode = view_mode
        d_rep, d_cls, d_proj = config.d_rep, config.d_cls, config.d_proj
        self.prediction = Mlp([d_rep, d_rep, d_rep, n_classes], rng, "head.predict")
        if view_mode == "separated-representation":
            g1_in, g2_in = d_cls, d_rep - d_cls
        elif view_mode == "mixup-cutmix":
            g1_in = g2_in = d_rep
        else:
            raise ValueError(f"unknown view mode {view_mode!r}")
        self.g1 = Mlp([g1_in, d_proj, d_proj, d_proj], rng, "head.g1")
        self.g2 = Mlp([g2_in, d_proj, d_proj, d_proj], rng, "head.g2")
        self.decoders = {}
        feat_width = d_rep - d_cls
        for col in self.schema:
            out_width = col.cardinality if col.kind == "categorical" else 1
            self.decoders[col.name] = Mlp(
                [feat_width, decoder_hidden, out_width], rng, f"head.decode.{col.name}"
            )

    def predict(self, z):
        """Class probability rows (softmax over the prediction logits)."""
        return ad.softmax(self.prediction(z))

    def reconstruct(self, feature_view):
        """Per-column predictions from the feature view: logits over the
        original levels for categorical columns, a scalar for numeric."""
        return {name: mlp(feature_view) for name, mlp in self.decoders.items()}

    def named_params(self):
        out = {}
        out.update(self.prediction.named_params())
        out.update(self.g1.named_params())
        out.update(self.g2.named_params())
        for mlp in self.decoders.values():
            out.update(mlp.named_params())
        return out


# ---------------------------------------------------------------------------
# Checkpoint file format
# ---------------------------------------------------------------------------

def save_arrays(path, arrays, meta=None):
    """Write named float64 arrays to a flat binary checkpoint.

    Layout: magic line, one JSON manifest line ({"meta": ..., "params":
    [{"name", "shape"}, ...]}), then the raw little-endian float64 buffers
    concatenated in manifest order. Round-trips bit-for-bit.
    """
    manifest = {
        "meta": meta or {},
        "params": [{"name": n, "shape": list(np.shape(a))} for n, a in arrays.items()],
    }
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write((json.dumps(manifest) + "\n").encode("utf-8"))
        for a in arrays.values():
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_arrays(path):
    """Read a checkpoint written by :func:`save_arrays`.

    Returns (arrays, meta).
    """
    with open(path, "rb") as fh:
        magic = fh.readline()
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file (bad magic {magic!r})")
        manifest = json.loads(fh.readline().decode("utf-8"))
        arrays = {}
        for entry in manifest["params"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            buf = fh.read(count * 8)
            if len(buf) != count * 8:
                raise ValueError(f"{path}: truncated checkpoint at {entry['name']!r}")
            arrays[entry["name"]] = np.frombuffer(buf, dtype="<f8").reshape(shape).copy()
    return arrays, manifest["meta"]
