"""Forecast and segmentation evaluation plus the two training losses.

Evaluation metrics operate on plain numpy arrays (no gradients needed);
the losses operate on taped tensors so they can drive training.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError, NumericError
from .tensor import Tensor

CLOUD_CLASSES = (0, 1)   # white cloud, gray cloud
NUM_CLASSES = 4


def _paired(y, y_hat) -> tuple[np.ndarray, np.ndarray]:
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    y_hat = np.asarray(y_hat, dtype=np.float64).reshape(-1)
    if y.shape != y_hat.shape or y.size == 0:
        raise ContractError(
            f"metric needs equal nonzero lengths, got {y.shape} vs {y_hat.shape}")
    return y, y_hat


def mae(y, y_hat) -> float:
    y, y_hat = _paired(y, y_hat)
    return float(np.abs(y - y_hat).mean())


def mse(y, y_hat) -> float:
    y, y_hat = _paired(y, y_hat)
    return float(((y - y_hat) ** 2).mean())


def nrmse(y, y_hat) -> float:
    """Root-mean-square error over the observed range, in percent."""
    y, y_hat = _paired(y, y_hat)
    rng = y.max() - y.min()
    if rng <= 0:
        raise NumericError("nrmse undefined: ground truth has zero range")
    return float(np.sqrt(((y - y_hat) ** 2).mean()) / rng * 100.0)


def r2(y, y_hat) -> float:
    y, y_hat = _paired(y, y_hat)
    if y.size < 2:
        raise ContractError("r2 needs at least two samples")
    ss_tot = ((y - y.mean()) ** 2).sum()
    if ss_tot <= 0:
        raise ContractError("r2 undefined: ground truth has zero variance")
    ss_res = ((y - y_hat) ** 2).sum()
    return float(1.0 - ss_res / ss_tot)


def confusion_matrix(pred, truth, num_classes: int) -> np.ndarray:
    """counts[t, p] = number of pixels labeled t predicted as p."""
    pred = np.asarray(pred).reshape(-1)
    truth = np.asarray(truth).reshape(-1)
    if pred.shape != truth.shape:
        raise ContractError(f"shape mismatch {pred.shape} vs {truth.shape}")
    both = np.concatenate([pred, truth])
    if both.size and (both.min() < 0 or both.max() >= num_classes):
        raise ContractError(
            f"labels must lie in [0, {num_classes}), got range "
            f"[{both.min()}, {both.max()}]")
    idx = truth.astype(np.int64) * num_classes + pred.astype(np.int64)
    counts = np.bincount(idx, minlength=num_classes * num_classes)
    return counts.reshape(num_classes, num_classes)


def seg_metrics(pred, truth, num_classes: int = NUM_CLASSES,
                cloud_classes=CLOUD_CLASSES) -> tuple[float, float, float]:
    """(precision, recall, MIoU).

    Precision/recall are micro-averaged over the cloud classes (pooled
    TP/FP/FN); MIoU averages IoU over every class present in prediction or
    truth (classes absent from both are excluded from the mean).
    """
    cm = confusion_matrix(pred, truth, num_classes)
    tp = np.diag(cm).astype(np.float64)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp

    cloud = list(cloud_classes)
    tp_c, fp_c, fn_c = tp[cloud].sum(), fp[cloud].sum(), fn[cloud].sum()
    precision = tp_c / (tp_c + fp_c) if tp_c + fp_c > 0 else 0.0
    recall = tp_c / (tp_c + fn_c) if tp_c + fn_c > 0 else 0.0

    denom = tp + fp + fn
    present = denom > 0
    if not present.any():
        raise ContractError("empty maps: no class present")
    iou = tp[present] / denom[present]
    return float(precision), float(recall), float(iou.mean())


def mse_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Differentiable mean squared error."""
    if pred.shape != target.shape:
        raise ContractError(f"mse_loss shapes differ: {pred.shape} vs {target.shape}")
    d = T.sub(pred, target)
    return T.mean(T.mul(d, d))


def bce_loss(logits: Tensor, targets: Tensor) -> Tensor:
    """Binary cross entropy from logits, in the overflow-proof form
    t*softplus(-x) + (1-t)*softplus(x)."""
    if logits.shape != targets.shape:
        raise ContractError(
            f"bce_loss shapes differ: {logits.shape} vs {targets.shape}")
    tv = targets.data
    if tv.min() < 0 or tv.max() > 1:
        raise ContractError(
            f"bce targets must lie in [0,1], got [{tv.min()}, {tv.max()}]")
    pos = T.mul(targets, T.softplus(T.neg(logits)))
    neg = T.mul(T.sub(Tensor(np.asarray(1.0)), targets), T.softplus(logits))
    return T.mean(T.add(pos, neg))


@dataclass
class HorizonMetrics:
    step: int
    mae: float
    mse: float
    nrmse_pct: float
    r2: float


@dataclass
class MetricReport:
    """Per-horizon rows plus the pooled aggregate."""

    rows: list
    aggregate: HorizonMetrics

    CSV_HEADER = "horizon_step,mae,mse,nrmse_pct,r2"

    def to_csv(self) -> str:
        lines = [self.CSV_HEADER]
        for r in self.rows:
            lines.append(f"{r.step},{r.mae:.6f},{r.mse:.6f},"
                         f"{r.nrmse_pct:.6f},{r.r2:.6f}")
        a = self.aggregate
        lines.append(f"all,{a.mae:.6f},{a.mse:.6f},{a.nrmse_pct:.6f},{a.r2:.6f}")
        return "\n".join(lines) + "\n"

    def summary(self) -> str:
        a = self.aggregate
        lines = [f"aggregate: MAE {a.mae:.3f}  MSE {a.mse:.3f}  "
                 f"NRMSE {a.nrmse_pct:.2f}%  R2 {a.r2:.4f}"]
        for r in self.rows:
            lines.append(f"  step {r.step}: MAE {r.mae:.3f}  MSE {r.mse:.3f}  "
                         f"NRMSE {r.nrmse_pct:.2f}%  R2 {r.r2:.4f}")
        return "\n".join(lines)


def forecast_report(y: np.ndarray, y_hat: np.ndarray) -> MetricReport:
    """Build the per-step report from (n_windows, tau) truth/prediction."""
    y = np.asarray(y, dtype=np.float64)
    y_hat = np.asarray(y_hat, dtype=np.float64)
    if y.shape != y_hat.shape or y.ndim != 2:
        raise ContractError(f"need matching (n, tau) arrays, got {y.shape} vs {y_hat.shape}")
    rows = []
    for j in range(y.shape[1]):
        rows.append(HorizonMetrics(
            step=j + 1, mae=mae(y[:, j], y_hat[:, j]), mse=mse(y[:, j], y_hat[:, j]),
            nrmse_pct=nrmse(y[:, j], y_hat[:, j]), r2=r2(y[:, j], y_hat[:, j])))
    agg = HorizonMetrics(step=0, mae=mae(y, y_hat), mse=mse(y, y_hat),
                         nrmse_pct=nrmse(y, y_hat), r2=r2(y, y_hat))
    return MetricReport(rows=rows, aggregate=agg)


__all__ = [
    "mae", "mse", "nrmse", "r2", "confusion_matrix", "seg_metrics",
    "mse_loss", "bce_loss", "HorizonMetrics", "MetricReport",
    "forecast_report", "CLOUD_CLASSES", "NUM_CLASSES",
]
