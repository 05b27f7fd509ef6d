"""Splitting, the Adam training loop and the threshold-accuracy evaluation."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .attribution import Attribution, build_labels
from .errors import DegenerateSplit, NonFiniteLoss
from .features import NormMethod
from .model import ModelConfig, ModelParams, backward, batch_loss, forward_batch, init_params, pack, predict

log = logging.getLogger(__name__)

WIDE_BAND = (0.5, 2.0)
TIGHT_BAND = (0.8, 1.25)


@dataclass
class TrainConfig:
    attribution: Attribution = Attribution.LINEAR
    normalization: NormMethod = NormMethod.MINMAX
    epochs: int = 50
    learning_rate: float = 1e-3
    batch_size: int = 16
    seed: int = 0
    clip_norm: float | None = None
    val_fraction: float = 0.2
    hidden: int = 30
    fc_hidden: int = 60
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    decay_base: float = 2.0

    def __post_init__(self):
        self.attribution = Attribution.parse(self.attribution)
        self.normalization = NormMethod.parse(self.normalization)
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.clip_norm is not None and not self.clip_norm > 0:
            raise ValueError("clip_norm must be positive when set")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["attribution"] = self.attribution.value
        d["normalization"] = self.normalization.value
        return d


@dataclass
class EvalReport:
    mse: float
    acc_wide: float
    acc_tight: float
    per_class_acc: dict  # band label -> 6 accuracies
    n_journeys: int = 0

    def to_text(self, attribution: str = "", normalization: str = "") -> str:
        lines = []
        if attribution:
            lines.append(f"attribution: {attribution}")
        if normalization:
            lines.append(f"normalization: {normalization}")
        lines += [
            f"loss: {self.mse:.6f}",
            f"accuracy_0.5/2.0: {self.acc_wide:.6f}",
            f"accuracy_0.8/1.25: {self.acc_tight:.6f}",
        ]
        for band, accs in self.per_class_acc.items():
            lines.append(f"per_class_{band}: " + " ".join(f"{a:.6f}" for a in accs))
        lines.append(f"journeys: {self.n_journeys}")
        return "\n".join(lines) + "\n"


def band_label(band) -> str:
    return f"{band[0]:g}/{band[1]:g}"


def split_by_user(journeys: Sequence, val_fraction: float, seed: int):
    """Partition whole journeys; ``floor(n * val_fraction)`` go to validation.

    The shuffle runs over journeys sorted by client id, so the split does
    not depend on input order.
    """
    if not 0 < val_fraction < 1:
        raise ValueError("val_fraction must lie strictly between 0 and 1")
    ordered = sorted(journeys, key=lambda j: j.client_id)
    n_val = int(math.floor(len(ordered) * val_fraction + 1e-9))
    if n_val == 0 or n_val == len(ordered):
        raise DegenerateSplit(f"{len(ordered)} journeys at fraction {val_fraction} leaves a side empty")
    perm = np.random.default_rng(seed).permutation(len(ordered))
    val_idx = set(perm[:n_val].tolist())
    train = [j for i, j in enumerate(ordered) if i not in val_idx]
    val = [j for i, j in enumerate(ordered) if i in val_idx]
    return train, val


def journey_labels(journeys: Sequence, attribution, base: float = 2.0) -> list:
    return [build_labels(j.class_ids, attribution, base=base) for j in journeys]


# --- optimisation -------------------------------------------------------------------


class Adam:
    def __init__(self, params: ModelParams, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.arrays.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.arrays.items()}
        self.t = 0

    def step(self, params: ModelParams, grads: ModelParams) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for k, g in grads.arrays.items():
            self.m[k] = self.beta1 * self.m[k] + (1 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1 - self.beta2) * g * g
            params.arrays[k] -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def _clip(grads: ModelParams, max_norm: float) -> float:
    norm = float(np.sqrt(sum((g * g).sum() for g in grads.arrays.values())))
    if norm > max_norm:
        for g in grads.arrays.values():
            g *= max_norm / norm
    return norm


def dataset_mse(params: ModelParams, journeys: Sequence, labels: Sequence) -> float:
    """MSE over every (session, class) cell of a journey set."""
    preds = predict(params, journeys)
    sq = sum(float(((p - t) ** 2).sum()) for p, t in zip(preds, labels))
    cells = sum(t.size for t in labels)
    return sq / cells


@dataclass
class TrainResult:
    params: ModelParams
    history: list = field(default_factory=list)  # (epoch, train_mse, val_mse)
    best_epoch: int = 0


def model_config_for(cfg: TrainConfig, journeys: Sequence) -> ModelConfig:
    j = journeys[0]
    return ModelConfig(
        hit_dim=j.hit_vecs[0].shape[1],
        session_dim=j.session_vecs.shape[1],
        user_dim=len(j.user_vec),
        hidden=cfg.hidden,
        fc_hidden=cfg.fc_hidden,
    )


def train(train_set: Sequence, val_set: Sequence, cfg: TrainConfig, init: ModelParams | None = None) -> TrainResult:
    """Mini-batch Adam on normalized journeys; returns the best-validation-MSE parameters.

    With an empty ``val_set`` the training MSE is used for model selection.
    """
    if not train_set:
        raise ValueError("empty training set")
    rng = np.random.default_rng(cfg.seed)
    params = init.copy() if init is not None else init_params(model_config_for(cfg, train_set), cfg.seed)
    train_labels = journey_labels(train_set, cfg.attribution, cfg.decay_base)
    val_labels = journey_labels(val_set, cfg.attribution, cfg.decay_base)
    opt = Adam(params, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps)

    result = TrainResult(params.copy())
    best = math.inf
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(train_set))
        for bi, start in enumerate(range(0, len(order), cfg.batch_size)):
            idx = order[start : start + cfg.batch_size]
            batch = pack([train_set[i] for i in idx], [train_labels[i] for i in idx])
            _, trace = forward_batch(params, batch)
            loss = batch_loss(trace)
            if not math.isfinite(loss):
                raise NonFiniteLoss(f"non-finite batch loss at epoch {epoch}, batch {bi}")
            grads = backward(params, trace)
            if cfg.clip_norm is not None:
                _clip(grads, cfg.clip_norm)
            opt.step(params, grads)
            if not params.all_finite():
                raise NonFiniteLoss(f"parameters became non-finite at epoch {epoch}, batch {bi} (loss {loss:.4g})")

        train_mse = dataset_mse(params, train_set, train_labels)
        val_mse = dataset_mse(params, val_set, val_labels) if val_set else train_mse
        if not (math.isfinite(train_mse) and math.isfinite(val_mse)):
            raise NonFiniteLoss(f"epoch {epoch}: train {train_mse}, val {val_mse}")
        result.history.append((epoch, train_mse, val_mse))
        log.info("epoch %d train_mse %.6f val_mse %.6f", epoch, train_mse, val_mse)
        if val_mse < best:
            best = val_mse
            result.params = params.copy()
            result.best_epoch = epoch
    return result


# --- evaluation ------------------------------------------------------------------------


def threshold_accuracy(pred_last, counts_last, n_sessions: int, band) -> np.ndarray:
    """Per-class correctness of the implied event count at a user's last session.

    The predicted count is ``pred * n_sessions``. A positive actual count
    ``k`` is matched when ``lo*k <= predicted <= hi*k``; a zero count only
    when the predicted count stays below ``lo``.
    """
    lo, hi = band
    if n_sessions < 1:
        raise ValueError("n_sessions must be >= 1")
    if not lo < 1 < hi:
        raise ValueError("band must satisfy lo < 1 < hi")
    predicted = np.asarray(pred_last, dtype=np.float64) * n_sessions
    k = np.asarray(counts_last, dtype=np.float64)
    in_band = (lo * k <= predicted) & (predicted <= hi * k)
    return np.where(k > 0, in_band, predicted < lo)


def last_session_counts(journey, attribution, base: float = 2.0) -> np.ndarray:
    """Reference counts for the accuracy check.

    Linear: class occurrences over all sessions. Time decay: the last label
    row scaled by the session count, which makes the band test read
    ``lo*t <= pred <= hi*t`` on the decayed label itself.
    """
    n = len(journey.class_ids)
    if Attribution.parse(attribution) is Attribution.LINEAR:
        return np.bincount(journey.class_ids, minlength=6).astype(np.float64)
    return build_labels(journey.class_ids, Attribution.TIME_DECAY, base=base)[-1] * n


def evaluate(params: ModelParams, journeys: Sequence, attribution, bands=(WIDE_BAND, TIGHT_BAND),
             base: float = 2.0, predictions: Sequence | None = None) -> EvalReport:
    if not journeys:
        raise ValueError("cannot evaluate on zero journeys")
    labels = journey_labels(journeys, attribution, base)
    preds = predictions if predictions is not None else predict(params, journeys)
    sq = sum(float(((p - t) ** 2).sum()) for p, t in zip(preds, labels))
    mse = sq / sum(t.size for t in labels)

    per_class = {}
    for band in bands:
        hits = np.stack(
            [
                threshold_accuracy(p[-1], last_session_counts(j, attribution, base), len(j.class_ids), band)
                for p, j in zip(preds, journeys)
            ]
        )
        per_class[band_label(band)] = hits.mean(axis=0).tolist()
    accs = [float(np.mean(v)) for v in per_class.values()]
    return EvalReport(
        mse=mse,
        acc_wide=accs[0],
        acc_tight=accs[1] if len(accs) > 1 else accs[0],
        per_class_acc=per_class,
        n_journeys=len(journeys),
    )


def prevalence_baseline(train_set: Sequence, attribution, base: float = 2.0) -> np.ndarray:
    """Per-class mean label over every training session; the constant predictor to beat."""
    labels = np.concatenate(journey_labels(train_set, attribution, base))
    return labels.mean(axis=0)


def constant_predictions(journeys: Sequence, row) -> list:
    row = np.asarray(row, dtype=np.float64)
    return [np.tile(row, (len(j.class_ids), 1)) for j in journeys]
