"""SGD/Nesterov training loop with exponential lr decay and early stopping."""
from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from . import losses
from .core import Dataset, RunConfig, SemanticTable, SplitSpec, training_set, validation_sets
from .mixup import make_mixup_batch, pure_batch
from .model import ModelDims, SnMpModel, dump_bytes, embed, forward_vars, init, load_bytes
from .retrieval import evaluate_features

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


def lr_at(epoch, lr_start, lr_end, decay_epochs) -> float:
    """Exponential interpolation from ``lr_start`` to ``lr_end``, then constant."""
    if lr_start <= 0 or lr_end <= 0:
        raise ValueError("learning rates must be positive")
    if decay_epochs < 1:
        raise ValueError("decay_epochs must be >= 1")
    t = min(epoch, decay_epochs) / decay_epochs
    return lr_start * (lr_end / lr_start) ** t


@dataclass
class TrainState:
    model: SnMpModel
    velocity: np.ndarray
    epoch: int = 0
    best_val_map: float = -1.0
    best_epoch: int = -1
    rng_state: dict = field(default_factory=dict)
    diverged: bool = False


def sgd_nesterov_step(state: TrainState, grad, lr, momentum) -> TrainState:
    """``v <- mu v - lr g``; ``theta <- theta + mu v - lr g``."""
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != state.velocity.shape:
        raise ValueError("gradient is not aligned with the parameters")
    if not np.all(np.isfinite(grad)):
        state.diverged = True
        raise TrainingError("non-finite gradient; step aborted")
    v = momentum * state.velocity - lr * grad
    theta = state.model.params.flat() + momentum * v - lr * grad
    state.model = state.model.with_params(state.model.params.with_flat(theta))
    state.velocity = v
    return state


@dataclass(frozen=True)
class EpochLog:
    epoch: int
    loss: float
    ce_mix: float
    mp: float
    sn: float
    lr: float
    val_map: float
    wall_time: float = field(default=0.0, compare=False)

    FIELDS = ("epoch", "loss", "ce_mix", "mp", "sn", "lr", "val_map")


def write_log(logs, path):
    # wall time is left out so that the file is reproducible byte for byte
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(EpochLog.FIELDS)
        for row in logs:
            w.writerow([row.epoch] + [repr(getattr(row, f)) for f in EpochLog.FIELDS[1:]])


def save_checkpoint(state: TrainState, path):
    blob = json.dumps(state.rng_state, sort_keys=True).encode()
    data = dump_bytes(
        state.model, (state.velocity, state.epoch, state.best_epoch, state.best_val_map, blob)
    )
    with open(path, "wb") as fh:
        fh.write(data)


def load_checkpoint(path) -> TrainState:
    with open(path, "rb") as fh:
        model, state = load_bytes(fh.read())
    if state is None:
        return TrainState(model, np.zeros(model.params.size))
    velocity, epoch, best_epoch, best_val, blob = state
    return TrainState(model, velocity, epoch, best_val, best_epoch, json.loads(blob.decode()))


def batch_loss(model_dims, batch, anchors, config):
    """Loss closure for :func:`autodiff.value_and_grad` on one mixup batch."""
    parts = {}

    def loss(tape, p):
        _, logits, f = forward_vars(model_dims, p, tape.const(batch.inputs))
        total, breakdown = losses.combined_loss(
            batch, f, logits, anchors, config.kappa, config.gamma1, config.gamma2
        )
        parts["breakdown"] = breakdown
        return total

    return loss, parts


def _model_for(ds, split, sem, config):
    m = sem.dim if config.latent_dim is None else config.latent_dim
    if m != sem.dim:
        raise ValueError(f"latent_dim {m} must equal the semantic dimension {sem.dim}")
    dims = ModelDims(ds.input_dim, config.widths, len(split.seen_classes), m)
    return init(dims, config.seed, class_ids=split.seen_classes)


def validation_map(model, val_queries, val_search, k) -> float:
    if len(val_queries) == 0 or len(val_search) == 0:
        return 0.0
    report = evaluate_features(
        embed(model, val_queries.inputs),
        val_queries.class_ids,
        val_queries.sample_ids,
        embed(model, val_search.inputs),
        val_search.class_ids,
        val_search.sample_ids,
        k=min(k, len(val_search)),
    )
    return report.map_at_k


def train(
    ds: Dataset,
    split: SplitSpec,
    sem: SemanticTable,
    config: RunConfig,
    resume: Optional[TrainState] = None,
    on_epoch=None,
):
    """Train on the split's seen classes and training domains.

    Returns ``(best_model, logs, final_state)``. The best model is the one
    with the highest validation mAP; training stops after ``patience``
    epochs without improvement or at ``max_epochs``.
    """
    train_ds = training_set(ds, split)
    if len(train_ds) < 2:
        raise ValueError("training set needs at least two samples")
    val_q, val_s = validation_sets(ds, split)
    if len(val_q) == 0 or len(val_s) == 0:
        raise ValueError("validation query or search set is empty")
    index = {c: i for i, c in enumerate(split.seen_classes)}
    labels = np.array([index[c] for c in train_ds.class_ids], dtype=np.int64)
    anchors = sem.matrix(split.seen_classes)

    if resume is None:
        state = TrainState(_model_for(ds, split, sem, config), np.zeros(0))
        state.velocity = np.zeros(state.model.params.size)
        rng = np.random.default_rng(config.seed)
        best_model = state.model
    else:
        state = resume
        rng = np.random.default_rng()
        rng.bit_generator.state = state.rng_state
        best_model = state.model
    logs = []
    dims = state.model.dims

    while state.epoch < config.max_epochs:
        epoch = state.epoch
        t0 = time.perf_counter()
        lr = lr_at(epoch, config.lr_start, config.lr_end, config.decay_epochs)
        perm = rng.permutation(len(train_ds))
        sums = np.zeros(4)
        n_batches = 0
        for b, start in enumerate(range(0, len(perm), config.batch_size)):
            idx = perm[start:start + config.batch_size]
            if len(idx) < 2:
                continue
            x, y, d = train_ds.inputs[idx], labels[idx], train_ds.domain_ids[idx]
            if config.use_mixup:
                batch = make_mixup_batch(x, y, d, anchors, config.mix_lambda, config.gamma_mix, rng)
            else:
                batch = pure_batch(x, y, d, anchors)
            loss_fn, parts = batch_loss(dims, batch, anchors, config)
            result = ad.value_and_grad(loss_fn, state.model.params)
            if not np.isfinite(result.value):
                state.diverged = True
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {b}")
            bd = parts["breakdown"]
            sums += (bd.total, bd.ce_mix, bd.mp, bd.sn)
            n_batches += 1
            try:
                sgd_nesterov_step(state, result.gradient, lr, config.momentum)
            except TrainingError as exc:
                raise TrainingError(f"{exc} (epoch {epoch}, batch {b})") from None
        means = sums / max(n_batches, 1)
        val = validation_map(state.model, val_q, val_s, config.val_k)
        state.epoch = epoch + 1
        if val > state.best_val_map:
            state.best_val_map, state.best_epoch = val, epoch
            best_model = state.model
        state.rng_state = rng.bit_generator.state
        row = EpochLog(epoch, *map(float, means), lr, val, time.perf_counter() - t0)
        logs.append(row)
        log.info("epoch %d loss %.4f val mAP %.4f", epoch, row.loss, val)
        if on_epoch is not None:
            on_epoch(row, state)
        if epoch - state.best_epoch >= config.patience:
            break
    return best_model, logs, state
