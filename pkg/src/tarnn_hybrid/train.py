"""Weighted-BCE training with Adam, early stopping and F2-optimal thresholds."""

from __future__ import annotations

import copy
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch

from .errors import ConfigError, NumericError, TrainingError
from .metrics import auc, fbeta
from .model import (ModelConfig, TarnnHybrid, batch_tensors, build_model, l2_penalty,
                    weighted_bce_logits)
from .preprocess import WindowBatch, WindowSample, stack_samples

log = logging.getLogger(__name__)

_EPS = 1e-7


@dataclass
class TrainConfig:
    delta: float = 0.7
    learning_rate: float = 1e-3
    batch_size: int = 32
    max_epochs: int = 100
    patience: int = 10
    l2_coefficient: float = 1e-5
    validation_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.delta < 1:
            raise ConfigError("delta must lie in (0, 1)")
        if self.patience < 1 or self.batch_size < 1 or self.max_epochs < 1:
            raise ConfigError("patience, batch_size and max_epochs must be >= 1")
        if not 0 < self.validation_fraction < 1:
            raise ConfigError("validation_fraction must lie in (0, 1)")
        if self.learning_rate <= 0 or self.l2_coefficient < 0:
            raise ConfigError("learning_rate must be > 0 and l2_coefficient >= 0")

    def to_dict(self) -> Dict:
        return asdict(self)


@dataclass
class TrainHistory:
    train_loss: List[float] = field(default_factory=list)
    val_loss: List[float] = field(default_factory=list)
    val_auc: List[float] = field(default_factory=list)
    val_f2: List[float] = field(default_factory=list)
    best_epoch: int = -1
    chosen_threshold: float = 0.5

    @property
    def epochs_run(self) -> int:
        return len(self.train_loss)

    def to_dict(self) -> Dict:
        return asdict(self)

    def to_tsv(self) -> str:
        lines = ["epoch\ttrain_loss\tval_loss\tval_auc\tval_f2"]
        for i in range(self.epochs_run):
            lines.append(f"{i}\t{self.train_loss[i]!r}\t{self.val_loss[i]!r}\t{self.val_auc[i]!r}\t{self.val_f2[i]!r}")
        return "\n".join(lines) + "\n"


def weighted_bce(scores, labels, delta: float) -> float:
    """``-mean(delta y log p + (1 - delta)(1 - y) log(1 - p))``, evaluated in logit space.

    Scores at exactly 0 or 1 are clamped to ``[1e-7, 1 - 1e-7]`` with a warning.
    """
    p = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if p.shape != y.shape or p.size == 0:
        raise ConfigError("scores and labels must be non-empty and equally long")
    if np.any((p <= 0) | (p >= 1)):
        warnings.warn("scores at 0 or 1 clamped to [1e-7, 1 - 1e-7]", RuntimeWarning, stacklevel=2)
        p = np.clip(p, _EPS, 1 - _EPS)
    z = np.log(p) - np.log1p(-p)
    return float(np.mean(delta * y * np.logaddexp(0.0, -z) + (1 - delta) * (1 - y) * np.logaddexp(0.0, z)))


def optimize_threshold(val_scores, val_labels, beta: float = 2.0) -> float:
    """Threshold maximizing F-beta over ``{0, 1}`` and midpoints of consecutive unique scores.

    Prediction is positive when ``score >= threshold``.  Ties go to the
    lowest threshold.  All-positive labels give 0; all-negative labels fall
    back to 0.5; both cases warn.
    """
    scores = np.asarray(val_scores, dtype=np.float64)
    labels = np.asarray(val_labels).astype(bool)
    if labels.size == 0:
        raise ConfigError("empty validation set")
    if labels.all():
        warnings.warn("validation labels are all positive; threshold 0", RuntimeWarning, stacklevel=2)
        return 0.0
    if not labels.any():
        warnings.warn("validation labels are all negative; threshold falls back to 0.5", RuntimeWarning, stacklevel=2)
        return 0.5
    uniq = np.unique(scores)
    cands = np.unique(np.concatenate([[0.0, 1.0], (uniq[:-1] + uniq[1:]) / 2.0]))
    pos = np.sort(scores[labels])
    neg = np.sort(scores[~labels])
    tp = len(pos) - np.searchsorted(pos, cands, side="left")
    fp = len(neg) - np.searchsorted(neg, cands, side="left")
    precision = np.divide(tp, tp + fp, out=np.zeros(len(cands)), where=(tp + fp) > 0)
    recall = tp / len(pos)
    b2 = beta * beta
    denom = b2 * precision + recall
    f = np.divide((1 + b2) * precision * recall, denom, out=np.zeros(len(cands)), where=denom > 0)
    return float(cands[int(np.argmax(f))])


class EarlyStopping:
    """Tracks the best validation loss; ``step`` returns True once patience is exhausted."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = math.inf
        self.best_epoch = -1
        self.bad_epochs = 0

    def step(self, epoch: int, loss: float) -> bool:
        if loss < self.best:
            self.best, self.best_epoch, self.bad_epochs = loss, epoch, 0
            return False
        self.bad_epochs += 1
        return self.bad_epochs >= self.patience


def split_validation(batch: WindowBatch, fraction: float, seed: int) -> Tuple[np.ndarray, np.ndarray]:
    """Patient-level train/validation index split."""
    patients = sorted(set(batch.patient_ids))
    if len(patients) < 2:
        raise ConfigError("need at least two patients to carve a validation split")
    n_val = min(max(int(round(fraction * len(patients))), 1), len(patients) - 1)
    order = np.random.default_rng([seed, 0x7A11]).permutation(len(patients))
    val_patients = {patients[i] for i in order[:n_val]}
    is_val = np.array([p in val_patients for p in batch.patient_ids])
    return np.flatnonzero(~is_val), np.flatnonzero(is_val)


def predict(model: TarnnHybrid, batch: WindowBatch, chunk: int = 4096) -> np.ndarray:
    """Eval-mode risk scores for every window in ``batch``."""
    model.eval()
    out = []
    with torch.no_grad():
        for start in range(0, len(batch), chunk):
            part = batch.take(np.arange(start, min(start + chunk, len(batch))))
            code_ids, elapsed, demo, _ = batch_tensors(part, model.embedding.dtype)
            out.append(model(code_ids, elapsed, demo).logit.double())
    logits = torch.cat(out).numpy()
    return 1.0 / (1.0 + np.exp(-logits))


def _val_logits(model, batch):
    model.eval()
    with torch.no_grad():
        code_ids, elapsed, demo, targets = batch_tensors(batch, model.embedding.dtype)
        return model(code_ids, elapsed, demo).logit, targets


def train_model(
    samples: Union[Sequence[WindowSample], WindowBatch],
    config: TrainConfig,
    model_config: ModelConfig,
    matrix,
    model: Optional[TarnnHybrid] = None,
) -> Tuple[TarnnHybrid, TrainHistory]:
    """Fit the network end to end and pick the F2-optimal threshold on validation data.

    The best-validation-loss parameters are restored before returning.
    Deterministic for a given ``config.seed``.
    """
    batch = samples if isinstance(samples, WindowBatch) else stack_samples(list(samples))
    if len(batch) < 2:
        raise TrainingError("need at least two training samples")
    train_idx, val_idx = split_validation(batch, config.validation_fraction, config.seed)
    train, val = batch.take(train_idx), batch.take(val_idx)
    if len(np.unique(train.targets)) < 2:
        raise TrainingError("training portion contains a single label class")

    if model is None:
        model = build_model(model_config, matrix, seed=config.seed)
    params = [p for p in model.parameters() if p.requires_grad]
    optimizer = torch.optim.Adam(params, lr=config.learning_rate)
    history = TrainHistory()
    stopper = EarlyStopping(config.patience)
    best_state = copy.deepcopy(model.state_dict())
    rng = np.random.default_rng([config.seed, 0xBA7C])
    dtype = model.embedding.dtype
    t_code, t_elapsed, t_demo, t_target = batch_tensors(train, dtype)
    val_has_both = len(np.unique(val.targets)) == 2

    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        for epoch in range(config.max_epochs):
            model.train()
            order = torch.from_numpy(rng.permutation(len(train)))
            total, seen = 0.0, 0
            for start in range(0, len(train), config.batch_size):
                idx = order[start : start + config.batch_size]
                out = model(t_code[idx], t_elapsed[idx], t_demo[idx], check_finite=False)
                data_loss = weighted_bce_logits(out.logit, t_target[idx], config.delta)
                loss = data_loss + config.l2_coefficient * l2_penalty(model) if config.l2_coefficient else data_loss
                if not torch.isfinite(loss):
                    raise NumericError(f"non-finite training loss at epoch {epoch}")
                optimizer.zero_grad(set_to_none=True)
                loss.backward()
                optimizer.step()
                total += float(data_loss.detach()) * len(idx)
                seen += len(idx)
            logits, targets = _val_logits(model, val)
            val_loss = float(weighted_bce_logits(logits, targets, config.delta))
            if not math.isfinite(val_loss):
                raise NumericError(f"non-finite validation loss at epoch {epoch}")
            scores = torch.sigmoid(logits.double()).numpy()
            history.train_loss.append(total / seen)
            history.val_loss.append(val_loss)
            if val_has_both:
                history.val_auc.append(auc(scores, val.targets))
                history.val_f2.append(_f2_at(scores, val.targets, optimize_threshold(scores, val.targets)))
            else:
                history.val_auc.append(float("nan"))
                history.val_f2.append(float("nan"))
            stop = stopper.step(epoch, val_loss)
            if stopper.best_epoch == epoch:
                best_state = copy.deepcopy(model.state_dict())
            log.debug("epoch %d train %.4f val %.4f auc %.4f", epoch, total / seen, val_loss, history.val_auc[-1])
            if stop:
                break

    model.load_state_dict(best_state)
    history.best_epoch = stopper.best_epoch
    logits, _ = _val_logits(model, val)
    scores = torch.sigmoid(logits.double()).numpy()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore" if not val_has_both else "default")
        history.chosen_threshold = optimize_threshold(scores, val.targets)
    model.eval()
    return model, history


def _f2_at(scores, labels, threshold):
    pred = scores >= threshold
    labels = np.asarray(labels).astype(bool)
    tp = np.sum(pred & labels)
    fp = np.sum(pred & ~labels)
    fn = np.sum(~pred & labels)
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    return float(fbeta(precision, recall, 2.0))
