"""Evaluation metrics: clean accuracy, attack success rate, macro-F1 and
the normalized area under the robustness-vs-ENL curve."""

from __future__ import annotations

import numpy as np

from fedsar import model as nn
from fedsar.adversary import TriggerPattern, embed_trigger
from fedsar.datasim import I_MAX, ChipSet
from fedsar.errors import ContractViolation
from fedsar.numerics import RngStream


def confusion_matrix(y_true, y_pred, num_classes: int) -> np.ndarray:
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(y_true, dtype=np.int64), np.asarray(y_pred, dtype=np.int64)), 1)
    return cm


def macro_f1_from_confusion(cm) -> float:
    """Unweighted mean of per-class F1; a class with P + R = 0 scores 0."""
    cm = np.asarray(cm, dtype=np.float64)
    scores = []
    for k in range(cm.shape[0]):
        tp = cm[k, k]
        predicted = cm[:, k].sum()
        actual = cm[k, :].sum()
        precision = tp / predicted if predicted else 0.0
        recall = tp / actual if actual else 0.0
        denom = precision + recall
        scores.append(2 * precision * recall / denom if denom else 0.0)
    return float(np.mean(scores))


def attack_success_rate(y_true, y_pred_triggered, target: int) -> float:
    y_true = np.asarray(y_true)
    keep = y_true != target
    if not keep.any():
        return 0.0
    return float(np.mean(np.asarray(y_pred_triggered)[keep] == target))


def evaluate(params: nn.ModelParams, test: ChipSet, trigger: TriggerPattern,
             target: int) -> tuple[float, float, float]:
    """``(ACC, ASR, macro-F1)`` of ``params`` on the clean test set."""
    if len(test) == 0:
        raise ContractViolation("empty test set")
    pred = nn.predict(params, test.images)
    acc = float(np.mean(pred == test.labels))
    f1 = macro_f1_from_confusion(confusion_matrix(test.labels, pred, params.arch.num_classes))
    keep = test.labels != target
    if keep.any():
        triggered = embed_trigger(test.images[keep], trigger)
        asr = float(np.mean(nn.predict(params, triggered) == target))
    else:
        asr = 0.0
    return acc, asr, f1


def normalized_trapezoid(values) -> float:
    """Trapezoidal area over equally spaced points, divided by the span."""
    v = np.asarray(values, dtype=np.float64)
    if v.size < 2:
        raise ContractViolation("need at least two points")
    return float(np.sum((v[1:] + v[:-1]) * 0.5) / (v.size - 1))


def robustness_curve(params: nn.ModelParams, test: ChipSet, looks_list, stream: RngStream) -> list[float]:
    accs = []
    for i, looks in enumerate(looks_list):
        gen = stream.child(i).generator()
        speckle = gen.gamma(shape=looks, scale=1.0 / looks, size=test.images.shape)
        noisy = np.clip(test.images * speckle, 0.0, I_MAX)
        accs.append(float(np.mean(nn.predict(params, noisy) == test.labels)))
    return accs


def auc_ra(params: nn.ModelParams, test: ChipSet, looks_list, stream: RngStream) -> float:
    if len(looks_list) < 2:
        raise ContractViolation("AUC-RA needs at least two ENL values")
    return normalized_trapezoid(robustness_curve(params, test, looks_list, stream))
