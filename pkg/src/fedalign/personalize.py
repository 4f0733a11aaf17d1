"""Freeze-and-fine-tune personalization, F1 threshold selection, prediction."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from fedalign.nn import AdamState, FreezeMask, ModelParams, ShapeError, predict_proba, train_online

FAULT = "Fault"
NORMAL = "Normal"


class ThresholdError(ValueError):
    pass


def params_digest(params: ModelParams) -> str:
    return hashlib.sha256(params.flat.astype("<f8").tobytes()).hexdigest()


def prefix_digest(params: ModelParams, n_layers: int) -> str:
    """sha256 over the flat coordinates of the first ``n_layers`` layers."""
    end = params.layer_slice(n_layers - 1).stop if n_layers > 0 else 0
    return hashlib.sha256(params.flat[:end].astype("<f8").tobytes()).hexdigest()


@dataclass
class PersonalizedModel:
    params: ModelParams
    threshold: float
    client_id: str
    provenance: str

    @property
    def input_dim(self) -> int:
        return self.params.input_dim

    def score(self, X) -> np.ndarray:
        return predict_proba(self.params, X)


def personalize_finetune(global_params: ModelParams, tune_data, lr: float = 1e-5, epochs: int = 10) -> ModelParams:
    """Fine-tune the second half of the layers; the first floor(L/2) stay frozen."""
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    mask = FreezeMask.freeze_first_half(global_params.n_layers)
    tuned, _ = train_online(global_params, AdamState.zeros(global_params.size, lr=lr), tune_data, mask=mask,
                            epochs=epochs)
    return tuned


def _confusion(pred: np.ndarray, labels: np.ndarray) -> tuple[int, int, int]:
    tp = int(np.sum(pred & labels))
    fp = int(np.sum(pred & ~labels))
    fn = int(np.sum(~pred & labels))
    return tp, fp, fn


def _f1(tp: int, fp: int, fn: int) -> float:
    # 2PR/(P+R) == 2TP/(2TP+FP+FN); 0 when there are no true positives.
    denom = 2 * tp + fp + fn
    return 2.0 * tp / denom if tp > 0 else 0.0


def f1_score(predictions, labels) -> float:
    pred = np.asarray(predictions).astype(bool)
    lab = np.asarray(labels).astype(bool)
    if pred.shape != lab.shape:
        raise ShapeError(f"length mismatch {pred.shape} vs {lab.shape}")
    if pred.size == 0:
        raise ValueError("empty input")
    return _f1(*_confusion(pred, lab))


def f1_at(scores, labels, tau: float) -> float:
    return f1_score(np.asarray(scores) > tau, labels)


def threshold_candidates(scores) -> np.ndarray:
    """Observed scores, 0.5, and 0.0 (the predict-everything-positive cut)."""
    return np.unique(np.concatenate([np.asarray(scores, dtype=np.float64), [0.0, 0.5]]))


def best_threshold(scores, labels) -> tuple[float, float]:
    """Return ``(tau, f1)``; ties go to the candidate nearest 0.5, then the smaller."""
    scores = np.asarray(scores, dtype=np.float64)
    lab = np.asarray(labels).astype(bool)
    if lab.all() or not lab.any():
        raise ThresholdError("validation labels need at least one positive and one negative")
    cands = threshold_candidates(scores)
    pred = scores[None, :] > cands[:, None]
    tp = (pred & lab).sum(axis=1)
    fp = (pred & ~lab).sum(axis=1)
    fn = (~pred & lab).sum(axis=1)
    f1 = np.array([_f1(int(a), int(b), int(c)) for a, b, c in zip(tp, fp, fn)])
    best = f1.max()
    tied = cands[f1 == best]
    tau = min(tied, key=lambda t: (abs(t - 0.5), t))
    return float(tau), float(best)


def optimize_threshold(model: ModelParams, X_val, y_val) -> float:
    return best_threshold(predict_proba(model, X_val), y_val)[0]


def predict(bundle, x) -> str:
    """'Fault' iff score > threshold (a score equal to the threshold is Normal)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.shape[0] != bundle.input_dim:
        raise ShapeError(f"input has shape {x.shape}, model expects {bundle.input_dim} features")
    score = float(bundle.score(x[None, :])[0])
    return FAULT if score > bundle.threshold else NORMAL


def predict_labels(bundle, X) -> np.ndarray:
    return (bundle.score(X) > bundle.threshold).astype(np.int64)
