"""Cost head, loss, training loop, cross-validation, and checkpoints.

Labels are preprocessed with a natural-log transform followed by min-max
scaling over the *training* split, matching the sigmoid output of the MLP
head.  The reported loss is the plain sum of squared differences between
scaled labels and head outputs; optimization steps use the batch mean of
the same quantity so learning rates stay scale-free.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from . import models, numerics as nm
from .encoding import encode_raw, encoder_output_dim, init_encoder_params, raw_plan_features
from .plans import binarize

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"BIGGCKPT"
CHECKPOINT_VERSION = 1


class EstimatorError(ValueError):
    """Bad training input, label domain violation, or checkpoint mismatch."""


@dataclass(frozen=True)
class LabelScaler:
    """Min/max of natural-log labels over the training split."""

    log_min: float
    log_max: float

    def __post_init__(self):
        if not self.log_min < self.log_max:
            raise EstimatorError(
                f"degenerate label scaler: log_min {self.log_min} >= log_max {self.log_max}")

    def scale(self, latency_ms):
        y = np.asarray(latency_ms, dtype=np.float64)
        if np.any(y <= 0):
            raise EstimatorError("latencies must be strictly positive")
        return (np.log(y) - self.log_min) / (self.log_max - self.log_min)

    def unscale(self, y_out):
        return np.exp(np.asarray(y_out, dtype=np.float64) * (self.log_max - self.log_min) + self.log_min)


def fit_scaler(latencies_ms):
    y = np.asarray(list(latencies_ms), dtype=np.float64)
    if y.size == 0:
        raise EstimatorError("cannot fit a label scaler on an empty split")
    if np.any(y <= 0):
        raise EstimatorError("latencies must be strictly positive")
    logs = np.log(y)
    return LabelScaler(float(logs.min()), float(logs.max()))


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 32
    max_epochs: int = 200
    patience: int = 20
    dropout: float | None = None  # overrides ModelConfig.dropout when set
    seed: int = 0
    folds: int = 10

    def __post_init__(self):
        if self.learning_rate <= 0 or self.batch_size <= 0 or self.max_epochs <= 0:
            raise EstimatorError("learning_rate, batch_size and max_epochs must be positive")
        if self.patience < 0:
            raise EstimatorError("patience must be >= 0")
        if self.folds < 2:
            raise EstimatorError("fold count must be >= 2")


@dataclass
class PlanSample:
    """A plan prepared for one model kind: tree, cached raw features, label."""

    plan: "object"
    raw: "object"
    latency_ms: float

    @property
    def query_id(self):
        return self.plan.query_id


def prepare_samples(trees, catalog, model_kind):
    """Featurize labeled plans; binarizes automatically for tree_cnn."""
    needs_binary = model_kind == "tree_cnn"
    if needs_binary:
        log.info("binarizing %d plans for tree_cnn", len(trees))
    samples = []
    for tree in trees:
        if tree.latency_ms is None:
            raise EstimatorError(f"plan {tree.plan_id!r} has no latency label")
        shaped = binarize(tree) if needs_binary else tree
        samples.append(PlanSample(shaped, raw_plan_features(shaped, catalog), float(tree.latency_ms)))
    return samples


# ---------------------------------------------------------------------------
# Head and loss


def init_head_params(config, rng):
    params = {}
    dims = [config.hidden_dim, *config.head_dims, 1]
    for i in range(len(dims) - 1):
        params[f"head.L{i}.W"] = nm.Parameter(f"head.L{i}.W", nm.uniform_init((dims[i], dims[i + 1]), dims[i], rng))
        params[f"head.L{i}.b"] = nm.Parameter(f"head.L{i}.b", nm.uniform_init((1, dims[i + 1]), dims[i], rng))
    return params


def mlp_head(embedding, params, n_hidden=None):
    """ReLU MLP ending in a sigmoid; output strictly inside (0, 1)."""
    if n_hidden is None:
        n_hidden = sum(1 for name in params if name.startswith("head.L") and name.endswith(".W")) - 1
    x = embedding
    for i in range(n_hidden):
        x = nm.relu(nm.linear(x, params[f"head.L{i}.W"].tensor, params[f"head.L{i}.b"].tensor))
    return nm.sigmoid(nm.linear(x, params[f"head.L{n_hidden}.W"].tensor, params[f"head.L{n_hidden}.b"].tensor))


def loss(y_out, y_al, scaler):
    """Sum over the batch of (scaled log label - output)^2.

    Labels outside the training range scale past [0, 1] without clamping.
    """
    targets = scaler.scale(y_al)[:, None]
    if targets.shape != y_out.shape:
        raise EstimatorError(f"{targets.shape[0]} labels for outputs of shape {y_out.shape}")
    diff = nm.subtract(nm.const(targets, y_out.data.dtype), y_out)
    return nm.sum_reduce(nm.multiply(diff, diff))


def init_all_params(catalog, config, rng):
    """Encoder + tree model + head parameters in one named set."""
    params = init_encoder_params(catalog, config.d_type, config.d_col, rng)
    d_node = encoder_output_dim(catalog, config.d_type, config.d_col)
    params.update(models.init_model_params(config, d_node, rng))
    params.update(init_head_params(config, rng))
    return params


# ---------------------------------------------------------------------------
# Checkpoints


@dataclass
class Checkpoint:
    model_config: models.ModelConfig
    tensors: dict
    scaler: LabelScaler
    catalog_fingerprint: str
    metadata: dict = field(default_factory=dict)
    format_version: int = CHECKPOINT_VERSION

    def to_params(self, precision="64-bit"):
        dtype = np.float64 if precision == "64-bit" else np.float32
        return {
            name: nm.Parameter(name, nm.Tensor._wrap(np.ascontiguousarray(arr, dtype=dtype)))
            for name, arr in self.tensors.items()
        }


def save_checkpoint(checkpoint, path):
    """Binary layout: magic, little-endian u32 version, ASCII JSON header
    (config, scaler, tensor manifest with byte offsets), raw LE blobs."""
    manifest = []
    blobs = []
    offset = 0
    for name in sorted(checkpoint.tensors):
        arr = checkpoint.tensors[name]
        precision = "64-bit" if arr.dtype == np.float64 else "32-bit"
        raw = arr.astype("<f8" if precision == "64-bit" else "<f4").tobytes()
        manifest.append({"name": name, "shape": list(arr.shape), "precision": precision, "offset": offset})
        blobs.append(raw)
        offset += len(raw)
    header = {
        "format_version": checkpoint.format_version,
        "model_config": checkpoint.model_config.to_dict(),
        "scaler": {"log_min": checkpoint.scaler.log_min, "log_max": checkpoint.scaler.log_max},
        "catalog_fingerprint": checkpoint.catalog_fingerprint,
        "metadata": checkpoint.metadata,
        "tensors": manifest,
    }
    header_bytes = json.dumps(header, sort_keys=True, ensure_ascii=True).encode("ascii")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", checkpoint.format_version))
        f.write(header_bytes)
        for blob in blobs:
            f.write(blob)


def load_checkpoint(path):
    with open(path, "rb") as f:
        data = f.read()
    if data[:8] != CHECKPOINT_MAGIC:
        raise EstimatorError(f"{path}: not a checkpoint file (bad magic)")
    (version,) = struct.unpack("<I", data[8:12])
    if version != CHECKPOINT_VERSION:
        raise EstimatorError(f"{path}: unsupported checkpoint version {version}")
    # The header is ASCII JSON; latin-1 keeps byte offsets == char offsets.
    header, end = json.JSONDecoder().raw_decode(data[12:].decode("latin-1"))
    blob_start = 12 + end
    tensors = {}
    for entry in header["tensors"]:
        dtype = "<f8" if entry["precision"] == "64-bit" else "<f4"
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        arr = np.frombuffer(data, dtype=dtype, count=count, offset=blob_start + entry["offset"])
        tensors[entry["name"]] = arr.reshape(shape)
    return Checkpoint(
        model_config=models.ModelConfig.from_dict(header["model_config"]),
        tensors=tensors,
        scaler=LabelScaler(header["scaler"]["log_min"], header["scaler"]["log_max"]),
        catalog_fingerprint=header["catalog_fingerprint"],
        metadata=header["metadata"],
        format_version=version,
    )


class Predictor:
    """Frozen checkpoint bound to a catalog; pure and thread-safe."""

    def __init__(self, checkpoint, catalog, precision="64-bit", check_fingerprint=True):
        if check_fingerprint and checkpoint.catalog_fingerprint != catalog.fingerprint():
            raise EstimatorError("checkpoint was trained against a different catalog (fingerprint mismatch)")
        self.catalog = catalog
        self.config = checkpoint.model_config
        self.scaler = checkpoint.scaler
        self.params = checkpoint.to_params(precision)

    def output_raw(self, raw):
        """Head output in (0, 1) for cached raw plan features."""
        batch = encode_raw(raw, self.params, self.catalog)
        emb = models.forward(batch, self.params, self.config, training=False)
        return mlp_head(emb, self.params).item()

    def predict_raw(self, raw):
        return float(self.scaler.unscale(self.output_raw(raw)))

    def predict_plan(self, tree):
        shaped = binarize(tree) if self.config.model_kind == "tree_cnn" else tree
        return self.predict_raw(raw_plan_features(shaped, self.catalog))


def predict_latency_ms(checkpoint, tree, catalog, check_fingerprint=True):
    """Latency prediction in milliseconds; strictly positive."""
    return Predictor(checkpoint, catalog, check_fingerprint=check_fingerprint).predict_plan(tree)


# ---------------------------------------------------------------------------
# Training


@dataclass
class EpochStats:
    epoch: int
    train_loss_sum: float
    val_loss_sum: float


@dataclass
class FitResult:
    checkpoint: Checkpoint
    history: list


def _loss_sum(samples, params, catalog, config, scaler):
    total = 0.0
    for s in samples:
        batch = encode_raw(s.raw, params, catalog)
        emb = models.forward(batch, params, config, training=False)
        y = mlp_head(emb, params).item()
        target = float(scaler.scale(s.latency_ms))
        total += (target - y) ** 2
    return total


def fit(train_samples, val_samples, catalog, model_config, train_config):
    """Mini-batch Adam with early stopping on the validation loss.

    Fully deterministic given the seed: initialization, batch order, and
    dropout masks all come from one seeded generator.  Returns the
    parameters of the best validation epoch.
    """
    if not train_samples or not val_samples:
        raise EstimatorError("empty train or validation split")
    if train_config.dropout is not None:
        model_config = replace(model_config, dropout=train_config.dropout)
    rng = np.random.default_rng(train_config.seed)
    params = init_all_params(catalog, model_config, rng)
    scaler = fit_scaler([s.latency_ms for s in train_samples])

    best_tensors = {name: p.tensor.data.copy() for name, p in params.items()}
    best_val = np.inf
    best_epoch = -1
    stale = 0
    history = []
    n = len(train_samples)
    for epoch in range(train_config.max_epochs):
        order = rng.permutation(n)
        train_sum = 0.0
        for start in range(0, n, train_config.batch_size):
            chunk = order[start:start + train_config.batch_size]
            with nm.Tape() as tape:
                for p in params.values():
                    tape.watch(p)
                outs = []
                labels = []
                for si in chunk:
                    s = train_samples[int(si)]
                    batch = encode_raw(s.raw, params, catalog)
                    emb = models.forward(batch, params, model_config, training=True, rng=rng)
                    outs.append(mlp_head(emb, params))
                    labels.append(s.latency_ms)
                y_out = nm.concat(outs, axis=0) if len(outs) > 1 else outs[0]
                batch_sum = loss(y_out, labels, scaler)
                objective = nm.scale(batch_sum, 1.0 / len(outs))
            grads = nm.backward(tape, objective)
            for name, g in grads.items():
                params[name].accumulate(g)
            nm.adam_step(params, train_config.learning_rate)
            train_sum += batch_sum.item()
        val_sum = _loss_sum(val_samples, params, catalog, model_config, scaler)
        history.append(EpochStats(epoch, train_sum, val_sum))
        log.info("epoch %d: train loss (sum) %.6f, val loss (sum) %.6f", epoch, train_sum, val_sum)
        if val_sum < best_val:
            best_val = val_sum
            best_epoch = epoch
            best_tensors = {name: p.tensor.data.copy() for name, p in params.items()}
            stale = 0
        else:
            stale += 1
        if stale >= train_config.patience:
            break

    checkpoint = Checkpoint(
        model_config=model_config,
        tensors=best_tensors,
        scaler=scaler,
        catalog_fingerprint=catalog.fingerprint(),
        metadata={
            "seed": train_config.seed,
            "epochs_run": len(history),
            "best_epoch": best_epoch,
            "best_val_loss_sum": best_val,
        },
    )
    return FitResult(checkpoint=checkpoint, history=history)


def kfold(dataset, k, seed):
    """Deterministic k-fold partitions grouped by query_id.

    Items sharing a query_id always land in the same fold; fold sizes (in
    query groups) differ by at most one.
    """
    if k < 2:
        raise EstimatorError("k must be >= 2")
    groups = []
    members = {}
    for i, item in enumerate(dataset):
        qid = item.query_id
        if qid not in members:
            members[qid] = []
            groups.append(qid)
        members[qid].append(i)
    if len(groups) < k:
        raise EstimatorError(f"{len(groups)} query groups cannot fill {k} folds")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(groups))
    folds = []
    for chunk in np.array_split(perm, k):
        test = [i for g in chunk for i in members[groups[int(g)]]]
        in_test = set(test)
        train = [i for i in range(len(dataset)) if i not in in_test]
        folds.append((train, test))
    return folds
