"""Two-stage training orchestration plus the proportion-only baseline.

Phase 1 pretrains the encoder, projectors, decoders, and bag aggregator on
the bag-metric loss plus the instance-level pool. Phase 2 fine-tunes the
encoder and the prediction head on the ramped combination of the
difference-contrastive loss and the proportion-matching loss, with early
stopping on a fine-grained (instance) or coarse-grained (bag) validation
score. The ``dllp`` method is the configuration collapse with zero
contrastive weight and no pair generation.

Training code paths never read instance labels; bag proportions are the
only supervision. Label access is confined to evaluation (and to bag
construction, which simulates the black-box provider).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from . import pairing
from .autodiff import Tensor
from .bagops import AggregatorConfig, AggregatorParams, aggregate
from .data import pair_bags
from .encoder import EncoderConfig, EncoderParams, HeadParams, load_arrays, save_arrays
from .losses import (
    BagPairState,
    LossConfig,
    PretrainPairState,
    bag_contrastive,
    finetune_loss,
    pretrain_loss,
    ramp_weights,
    reconstruction_loss,
    self_contrastive,
)
from .metrics import MetricsReport, accuracy, auc, cas, l1_bag, mpiou

# rng stream ids, combined with the config seed and epoch
_INIT, _PRETRAIN_PAIRS, _CORRUPT, _FINETUNE_PAIRS, _VAL_PAIRS = range(5)


def _rng(seed, stream, epoch=0):
    return np.random.default_rng(np.random.SeedSequence([int(seed), stream, int(epoch)]))


@dataclass
class TrainConfig:
    bag_size: int = 64
    pretrain_epochs: int = 50
    finetune_epochs: int = 300
    early_stop_patience: int = 20
    validation_mode: str = "fine"  # fine | coarse
    coarse_metric: str = "mpiou"  # mpiou | l1
    learning_rate: float = 1e-3
    seed: int = 0
    method: str = "bdc"  # bdc | dllp
    augmentation: str = "mixup-cutmix"  # mixup-cutmix | separated-representation
    bag_strategy: str = "ordered"  # random | ordered
    p_keep_cell: float = 0.7  # cutmix: probability a cell keeps its own value
    mixup_weight: float = 0.7
    loss: LossConfig = field(default_factory=LossConfig)
    aggregator: AggregatorConfig = field(default_factory=AggregatorConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)

    def __post_init__(self):
        if self.bag_size < 2:
            raise ValueError(f"bag size must be >= 2, got {self.bag_size}")
        if self.early_stop_patience > self.finetune_epochs:
            raise ValueError("early-stop patience exceeds the fine-tuning epoch budget")
        if self.validation_mode not in ("fine", "coarse"):
            raise ValueError(f"unknown validation mode {self.validation_mode!r}")
        if self.coarse_metric not in ("mpiou", "l1"):
            raise ValueError(f"unknown coarse metric {self.coarse_metric!r}")
        if self.method not in ("bdc", "dllp"):
            raise ValueError(f"unknown method {self.method!r}")
        if self.augmentation not in ("mixup-cutmix", "separated-representation"):
            raise ValueError(f"unknown augmentation mode {self.augmentation!r}")
        # the ramp total is the fine-tuning epoch budget
        self.loss.total_epochs = self.finetune_epochs

    def fingerprint(self):
        """Stable hash of the resolved configuration."""
        flat = json.dumps(asdict(self), sort_keys=True, default=str)
        return hashlib.sha256(flat.encode("utf-8")).hexdigest()[:16]


@dataclass
class Checkpoint:
    """Named parameter arrays plus training provenance."""

    arrays: dict
    epoch: int
    best_score: float
    config_fingerprint: str

    def save(self, path):
        save_arrays(
            path,
            self.arrays,
            meta={
                "epoch": self.epoch,
                "best_score": self.best_score,
                "config_fingerprint": self.config_fingerprint,
            },
        )

    @staticmethod
    def load(path):
        arrays, meta = load_arrays(path)
        return Checkpoint(
            arrays=arrays,
            epoch=meta["epoch"],
            best_score=meta["best_score"],
            config_fingerprint=meta["config_fingerprint"],
        )


class Model:
    """Encoder, heads, and aggregator for one schema, as one bundle."""

    def __init__(self, schema, n_classes, config):
        rng = _rng(config.seed, _INIT)
        self.config = config
        self.encoder = EncoderParams(schema, config.encoder, rng)
        self.heads = HeadParams(schema, config.encoder, n_classes, config.augmentation, rng)
        self.aggregator = AggregatorParams(
            config.aggregator, config.encoder.d_rep, config.encoder.d_proj, rng
        )

    def named_params(self):
        return {
            **self.encoder.named_params(),
            **self.heads.named_params(),
            **self.aggregator.named_params(),
        }

    def pretrain_params(self):
        """Everything except the prediction head."""
        prediction = set(self.heads.prediction.named_params())
        return {n: p for n, p in self.named_params().items() if n not in prediction}

    def finetune_params(self):
        """Encoder plus prediction head; projectors/decoders/aggregator are
        frozen after pretraining."""
        return {**self.encoder.named_params(), **self.heads.prediction.named_params()}

    def state_arrays(self):
        return {name: p.values.copy() for name, p in self.named_params().items()}

    def load_state(self, arrays):
        params = self.named_params()
        for name, p in params.items():
            if name not in arrays:
                raise ValueError(f"checkpoint missing parameter {name!r}")
            if arrays[name].shape != p.values.shape:
                raise ValueError(
                    f"checkpoint parameter {name!r} has shape {arrays[name].shape}, "
                    f"expected {p.values.shape}"
                )
            p.values[...] = arrays[name]
            p.grad = None


class AdamState:
    """First/second moment accumulators for the adaptive update."""

    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {}
        self.v = {}


def optimizer_step(params, lr, state):
    """One bias-corrected adaptive-moment update; consumes gradients.

    Parameters with no gradient this step are treated as zero-gradient.
    Non-finite gradients abort.
    """
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.values)
        if not np.all(np.isfinite(g)):
            raise RuntimeError(f"non-finite gradient for parameter {name!r}; aborting")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.values)
            v = np.zeros_like(p.values)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        state.m[name] = m
        state.v[name] = v
        m_hat = m / (1 - b1**state.t)
        v_hat = v / (1 - b2**state.t)
        p.values -= lr * m_hat / (np.sqrt(v_hat) + state.eps)
        p.grad = None


def _union_batch(dataset, bag1, bag2):
    idx = np.concatenate([bag1.member_indices, bag2.member_indices])
    return dataset.rows[idx], dataset.missing[idx]


def _pretrain_pair_state(model, dataset, bag1, bag2, config, corrupt_rng):
    rows, missing = _union_batch(dataset, bag1, bag2)
    z = model.encoder.encode(rows, missing)
    if config.augmentation == "mixup-cutmix":
        corrupted = model.encoder.corrupt(
            rows, missing, config.p_keep_cell, config.mixup_weight, corrupt_rng
        )
        z_corrupt = model.encoder.encode_embedding(corrupted)
        proj1 = model.heads.g1(z)
        proj2 = model.heads.g2(z_corrupt)
        _, feat = model.encoder.views(z_corrupt)
    else:
        cls_view, feat = model.encoder.views(z)
        proj1 = model.heads.g1(cls_view)
        proj2 = model.heads.g2(feat)
    decoded = model.heads.reconstruct(feat)
    m1 = bag1.size
    b1 = aggregate(z[:m1], model.aggregator)
    b2 = aggregate(z[m1:], model.aggregator)
    return PretrainPairState(
        proj1=proj1,
        proj2=proj2,
        decoded=decoded,
        schema=model.encoder.schema,
        rows=rows,
        missing=missing,
        b1=b1,
        b2=b2,
        prop1=bag1.proportion.entries,
        prop2=bag2.proportion.entries,
    )


def pretrain(dataset, bags, config, model=None):
    """Phase 1: bag-metric plus instance-pool pretraining.

    Returns (checkpoint, epoch log records). The prediction head is not in
    the optimized set and receives no gradient.
    """
    if len(bags) < 2:
        raise ValueError(f"pretraining needs at least 2 bags, got {len(bags)}")
    model = model or Model(dataset.schema, dataset.n_classes, config)
    trainable = model.pretrain_params()
    adam = AdamState()
    lc = config.loss
    logs = []
    for epoch in range(1, config.pretrain_epochs + 1):
        pairs = pair_bags(bags, seed=_rng(config.seed, _PRETRAIN_PAIRS, epoch))
        corrupt_rng = _rng(config.seed, _CORRUPT, epoch)
        epoch_loss = 0.0
        for pair_index, (bag1, bag2) in enumerate(pairs):
            state = _pretrain_pair_state(model, dataset, bag1, bag2, config, corrupt_rng)
            loss = pretrain_loss(
                state, lc.alpha, lc.beta, lc.kappa, lc.temperature, lc.margin
            )
            if not np.isfinite(loss.values):
                components = {
                    "bag": bag_contrastive(
                        state.b1, state.b2, state.prop1, state.prop2, lc.margin
                    ).item(),
                    "self": self_contrastive(state.proj1, state.proj2, lc.temperature).item(),
                    "reconstruction": reconstruction_loss(
                        state.decoded, state.schema, state.rows, state.missing, lc.kappa
                    ).item(),
                }
                raise RuntimeError(
                    f"non-finite pretraining loss at epoch {epoch}, pair {pair_index}: "
                    f"{components}"
                )
            ad.backward(loss)
            optimizer_step(trainable, config.learning_rate, adam)
            epoch_loss += loss.item()
        logs.append(
            {
                "epoch": epoch,
                "split": "train",
                "metric": "pretrain_loss",
                "value": epoch_loss / max(len(pairs), 1),
                "lambda": None,
                "gamma": None,
            }
        )
    checkpoint = Checkpoint(
        arrays=model.state_arrays(),
        epoch=config.pretrain_epochs,
        best_score=float("nan"),
        config_fingerprint=config.fingerprint(),
    )
    return checkpoint, logs


def _predict_rows(model, dataset, indices):
    """Probability rows for a set of dataset rows (forward only)."""
    rows = dataset.rows[indices]
    missing = dataset.missing[indices]
    z = model.encoder.encode(rows, missing)
    return model.heads.predict(z).values, z.values


def _validation_score(model, dataset, config, val_indices, val_bags):
    """(score, metric name); higher is better (L1 enters negated)."""
    if config.validation_mode == "fine":
        probs, _ = _predict_rows(model, dataset, val_indices)
        labels = dataset.read_labels(val_indices)
        if dataset.n_classes == 2:
            return auc(probs[:, 1], labels), "auc"
        return accuracy(probs.argmax(axis=1), labels), "accuracy"
    values = []
    for bag in val_bags:
        probs, _ = _predict_rows(model, dataset, bag.member_indices)
        p_hat = probs.mean(axis=0)
        if config.coarse_metric == "mpiou":
            values.append(mpiou(p_hat, bag.proportion.entries))
        else:
            values.append(-l1_bag(p_hat, bag.proportion.entries))
    name = "mpiou" if config.coarse_metric == "mpiou" else "neg_l1"
    return float(np.mean(values)), name


def finetune(dataset, bags, config, init_checkpoint=None, val_indices=None, val_bags=None):
    """Phase 2: ramped contrastive + proportion-matching fine-tuning.

    Starts from a pretraining checkpoint when given, otherwise from a fresh
    seeded init. Early stopping restores the best checkpoint after
    ``early_stop_patience`` non-improving epochs. Returns (checkpoint,
    epoch log records).
    """
    if len(bags) < 2:
        raise ValueError(f"fine-tuning needs at least 2 bags, got {len(bags)}")
    if config.validation_mode == "fine" and val_indices is None:
        raise ValueError("fine-grained validation needs validation indices")
    if config.validation_mode == "coarse" and not val_bags:
        raise ValueError("coarse-grained validation needs validation bags")

    model = Model(dataset.schema, dataset.n_classes, config)
    if init_checkpoint is not None:
        model.load_state(init_checkpoint.arrays)
    trainable = model.finetune_params()
    adam = AdamState()
    total = config.finetune_epochs
    baseline = config.method == "dllp"

    logs = []
    best_score = -np.inf
    best_arrays = model.state_arrays()
    best_epoch = 0
    stale = 0
    for epoch in range(1, total + 1):
        lam, gam = (0.0, 1.0) if baseline else ramp_weights(epoch, total)
        pairs = pair_bags(bags, seed=_rng(config.seed, _FINETUNE_PAIRS, epoch))
        epoch_loss = 0.0
        for pair_index, (bag1, bag2) in enumerate(pairs):
            rows, missing = _union_batch(dataset, bag1, bag2)
            z = model.encoder.encode(rows, missing)
            m1 = bag1.size
            z1, z2 = z[:m1], z[m1:]
            if baseline:
                positives = []
            else:
                assignment = pairing.assign_pairs(
                    z1.values, z2.values, bag1.proportion.entries, bag2.proportion.entries
                )
                positives = assignment.positives
            state = BagPairState(
                z1=z1,
                z2=z2,
                positives=positives,
                pred1=model.heads.predict(z1),
                pred2=model.heads.predict(z2),
                prop1=bag1.proportion.entries,
                prop2=bag2.proportion.entries,
            )
            loss = finetune_loss(
                state, epoch, total, config.loss.temperature, weights=(lam, gam)
            )
            if not np.isfinite(loss.values):
                raise RuntimeError(
                    f"non-finite fine-tuning loss at epoch {epoch}, pair {pair_index} "
                    f"(lambda={lam:.6f}, gamma={gam:.6f})"
                )
            ad.backward(loss)
            optimizer_step(trainable, config.learning_rate, adam)
            epoch_loss += loss.item()

        score, metric_name = _validation_score(model, dataset, config, val_indices, val_bags)
        logs.append(
            {
                "epoch": epoch,
                "split": "train",
                "metric": "finetune_loss",
                "value": epoch_loss / max(len(pairs), 1),
                "lambda": lam,
                "gamma": gam,
            }
        )
        logs.append(
            {
                "epoch": epoch,
                "split": "val",
                "metric": metric_name,
                "value": score,
                "lambda": lam,
                "gamma": gam,
            }
        )
        if score > best_score:
            best_score = score
            best_arrays = model.state_arrays()
            best_epoch = epoch
            stale = 0
        else:
            stale += 1
            if stale >= config.early_stop_patience:
                break

    model.load_state(best_arrays)
    checkpoint = Checkpoint(
        arrays=best_arrays,
        epoch=best_epoch,
        best_score=float(best_score),
        config_fingerprint=config.fingerprint(),
    )
    return checkpoint, logs


def evaluate(model, dataset, test_indices, mode, test_bags=None, val_bags=None, config=None):
    """Metrics report for a trained model.

    ``fine`` reports instance AUC (binary) or accuracy (multi-class) on the
    test split; ``coarse`` reports mean bag mPIoU and L1 over the test bags
    (no instance-level entries). Both always include the class-awareness
    diagnostic on the test representations and, when validation bags are
    supplied, pseudo-pair accuracy with its label-agreement base rate on
    seeded validation bag pairs (pairs with empty positive sets are counted
    separately, not averaged).
    """
    if mode not in ("fine", "coarse"):
        raise ValueError(f"unknown evaluation mode {mode!r}")
    if mode == "coarse" and not test_bags:
        raise ValueError("coarse evaluation needs test bags")
    report = MetricsReport()
    probs, z_test = _predict_rows(model, dataset, test_indices)

    if mode == "fine":
        labels = dataset.read_labels(test_indices)
        if dataset.n_classes == 2:
            report.scalars["auc"] = auc(probs[:, 1], labels)
        else:
            report.scalars["accuracy"] = accuracy(probs.argmax(axis=1), labels)
    if test_bags:
        piou_values, l1_values = [], []
        for bag_id, bag in enumerate(test_bags):
            bag_probs, _ = _predict_rows(model, dataset, bag.member_indices)
            p_hat = bag_probs.mean(axis=0)
            piou = mpiou(p_hat, bag.proportion.entries)
            l1 = l1_bag(p_hat, bag.proportion.entries)
            piou_values.append(piou)
            l1_values.append(l1)
            report.per_bag.append({"bag_id": bag_id, "mpiou": piou, "l1": l1})
        report.scalars["mpiou"] = float(np.mean(piou_values))
        report.scalars["l1"] = float(np.mean(l1_values))

    test_labels = dataset.read_labels(test_indices)
    report.scalars["cas"] = cas(z_test, test_labels)

    if val_bags is not None and len(val_bags) >= 2:
        seed = config.seed if config is not None else 0
        pairs = pair_bags(val_bags, seed=_rng(seed, _VAL_PAIRS))
        accs, bases = [], []
        empty = 0
        for bag1, bag2 in pairs:
            rows1, miss1 = dataset.rows[bag1.member_indices], dataset.missing[bag1.member_indices]
            rows2, miss2 = dataset.rows[bag2.member_indices], dataset.missing[bag2.member_indices]
            z1 = model.encoder.encode(rows1, miss1).values
            z2 = model.encoder.encode(rows2, miss2).values
            assignment = pairing.assign_pairs(
                z1, z2, bag1.proportion.entries, bag2.proportion.entries
            )
            value, is_empty = pairing.pair_accuracy(
                assignment.positives,
                dataset.read_labels(bag1.member_indices),
                dataset.read_labels(bag2.member_indices),
            )
            if is_empty:
                empty += 1
                continue
            accs.append(value)
            bases.append(float(bag1.proportion.entries @ bag2.proportion.entries))
        if accs:
            report.scalars["pair_accuracy"] = float(np.mean(accs))
            report.scalars["pair_base_rate"] = float(np.mean(bases))
        report.scalars["pair_empty_pairs"] = float(empty)
    return report


@dataclass
class PipelineResult:
    split: object
    train_bags: list
    val_bags: list
    test_bags: list
    pretrain_checkpoint: object  # None when skipped
    checkpoint: Checkpoint
    report: MetricsReport
    logs: list
    model: Model


def run_pipeline(raw_dataset, config, skip_pretrain=False):
    """ingest-to-report pipeline on an in-memory dataset.

    Splits, preprocesses (fit on train), bags all three splits, pretrains
    (unless skipped or the method is the baseline with no pretraining
    budget), fine-tunes with early stopping, and evaluates on the test
    split. Deterministic given the config seed.
    """
    from .data import make_bags, preprocess, split as split_dataset

    split = split_dataset(raw_dataset, seed=config.seed)
    dataset = preprocess(raw_dataset, split.train)
    train_bags = make_bags(
        dataset, split.train, config.bag_size, strategy=config.bag_strategy, seed=config.seed
    )
    val_bags = make_bags(
        dataset, split.val, min(config.bag_size, len(split.val)),
        strategy=config.bag_strategy, seed=config.seed,
    )
    test_bags = make_bags(
        dataset, split.test, min(config.bag_size, len(split.test)),
        strategy=config.bag_strategy, seed=config.seed,
    )

    pretrain_ckpt = None
    logs = []
    if not skip_pretrain and config.pretrain_epochs > 0:
        pretrain_ckpt, pre_logs = pretrain(dataset, train_bags, config)
        logs.extend({"phase": "pretrain", **rec} for rec in pre_logs)

    checkpoint, fine_logs = finetune(
        dataset,
        train_bags,
        config,
        init_checkpoint=pretrain_ckpt,
        val_indices=split.val,
        val_bags=val_bags,
    )
    logs.extend({"phase": "finetune", **rec} for rec in fine_logs)

    model = Model(dataset.schema, dataset.n_classes, config)
    model.load_state(checkpoint.arrays)
    mode = "fine" if config.validation_mode == "fine" else "coarse"
    report = evaluate(
        model,
        dataset,
        split.test,
        mode,
        test_bags=test_bags,
        val_bags=val_bags,
        config=config,
    )
    return PipelineResult(
        split=split,
        train_bags=train_bags,
        val_bags=val_bags,
        test_bags=test_bags,
        pretrain_checkpoint=pretrain_ckpt,
        checkpoint=checkpoint,
        report=report,
        logs=logs,
        model=model,
    )
