"""Per-class logistic regression heads over the latent code and multi-label metrics."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

BCE_CLIP = 1e-7
METRICS_SCHEMA = "dirlat-metrics-v1"


class MetricsError(ValueError):
    pass


class ClassifierEnsemble(nn.Module):
    """One independent logistic regression per class over the latent code.

    Weights start at zero, so an untrained ensemble scores every image 0.5.
    """

    def __init__(self, latent_dim: int, class_names: Sequence[str]):
        super().__init__()
        self.class_names = list(class_names)
        self.latent_dim = int(latent_dim)
        self.weight = nn.Parameter(torch.zeros(len(self.class_names), self.latent_dim))
        self.bias = nn.Parameter(torch.zeros(len(self.class_names)))

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def logits(self, code: torch.Tensor) -> torch.Tensor:
        if code.shape[-1] != self.latent_dim:
            raise ValueError(f"code length {code.shape[-1]} != latent_dim {self.latent_dim}")
        return code @ self.weight.t().to(code.dtype) + self.bias.to(code.dtype)

    def forward(self, code: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.logits(code))


def predict_probs(code, ensemble: ClassifierEnsemble) -> torch.Tensor:
    """Per-class probabilities for a latent code (or a batch of codes)."""
    if hasattr(code, "code"):
        code = code.code
    return ensemble(torch.as_tensor(code))


def ensemble_bce(probabilities, targets) -> torch.Tensor:
    """Mean over classes of the per-class mean binary cross entropy."""
    p = torch.as_tensor(probabilities)
    y = torch.as_tensor(targets, dtype=p.dtype)
    if p.dim() == 1:
        p, y = p.unsqueeze(0), y.reshape(1, -1)
    if p.shape != y.shape:
        raise ValueError(f"probabilities {tuple(p.shape)} vs targets {tuple(y.shape)}")
    p = p.clamp(BCE_CLIP, 1 - BCE_CLIP)
    per_class = -(y * torch.log(p) + (1 - y) * torch.log1p(-p)).mean(0)
    return per_class.mean()


@dataclass
class PredictionRecord:
    probabilities: np.ndarray  # [N, C]
    threshold: np.ndarray  # [C]

    @property
    def decisions(self) -> np.ndarray:
        return (self.probabilities >= self.threshold).astype(np.int64)


def make_predictions(probabilities, threshold=0.5) -> PredictionRecord:
    p = np.asarray(probabilities, dtype=np.float64)
    if p.ndim == 1:
        p = p[None, :]
    thr = np.broadcast_to(np.asarray(threshold, dtype=np.float64), (p.shape[1],)).copy()
    return PredictionRecord(p, thr)


@dataclass
class MetricReport:
    class_names: list[str]
    accuracy: list[float]
    precision: list[float]
    recall: list[float]
    precision_undefined: list[bool]
    exact_match_rate: float
    hamming_loss: float
    n_samples: int
    auc: list[float | None] = field(default_factory=list)
    provenance: str = ""

    @property
    def mean_auc(self) -> float | None:
        vals = [a for a in self.auc if a is not None]
        return float(np.mean(vals)) if vals else None

    def to_dict(self) -> dict:
        out: dict = {
            "schema": METRICS_SCHEMA,
            "provenance": self.provenance,
            "n_samples": self.n_samples,
            "exact_match_rate": self.exact_match_rate,
            "hamming_loss": self.hamming_loss,
            "mean_auc": self.mean_auc,
        }
        for i, name in enumerate(self.class_names):
            out[f"{name}/accuracy"] = self.accuracy[i]
            out[f"{name}/precision"] = self.precision[i]
            out[f"{name}/precision_undefined"] = self.precision_undefined[i]
            out[f"{name}/recall"] = self.recall[i]
            if self.auc:
                out[f"{name}/auc"] = self.auc[i]
        return out


def multilabel_metrics(predictions, targets, class_names: Sequence[str] | None = None) -> MetricReport:
    """Per-class accuracy/precision/recall plus exact match rate and Hamming loss.

    Precision with no predicted positives is reported as 0 and flagged in
    ``precision_undefined``; recall with no true positives likewise reports 0.
    """
    yhat = predictions.decisions if isinstance(predictions, PredictionRecord) else np.asarray(predictions)
    y = np.asarray(targets)
    if yhat.ndim == 1:
        yhat, y = yhat[None, :], y.reshape(1, -1)
    if y.shape != yhat.shape:
        raise MetricsError(f"decisions {yhat.shape} vs targets {y.shape}")
    n, c = y.shape
    if n == 0:
        raise MetricsError("empty batch")
    yhat = yhat.astype(bool)
    y = y.astype(bool)
    correct = yhat == y
    tp = (yhat & y).sum(0)
    pred_pos = yhat.sum(0)
    true_pos = y.sum(0)
    precision = np.where(pred_pos > 0, tp / np.maximum(pred_pos, 1), 0.0)
    recall = np.where(true_pos > 0, tp / np.maximum(true_pos, 1), 0.0)
    names = list(class_names) if class_names is not None else [f"class_{i}" for i in range(c)]
    accuracy = correct.mean(0)
    return MetricReport(
        class_names=names,
        accuracy=accuracy.tolist(),
        precision=precision.tolist(),
        recall=recall.tolist(),
        precision_undefined=(pred_pos == 0).tolist(),
        exact_match_rate=float(correct.all(1).mean()),
        # defined through the class accuracies so 1 - mean(accuracy) == hamming holds bitwise
        hamming_loss=float(1.0 - np.mean(accuracy)),
        n_samples=int(n),
    )


def roc_curve_auc(scores, labels) -> tuple[np.ndarray, np.ndarray, float]:
    """ROC points (fpr, tpr) over all distinct-score thresholds and trapezoidal AUC.

    Equal scores form one threshold step, so ties contribute half credit.
    """
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(bool)
    if s.shape != y.shape:
        raise MetricsError("scores and labels differ in length")
    n_pos = int(y.sum())
    n_neg = int(y.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise MetricsError("ROC needs both positive and negative labels")
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    # last index of each run of equal scores
    step_end = np.r_[np.flatnonzero(np.diff(s) != 0), s.size - 1]
    tps = np.cumsum(y)[step_end]
    fps = (step_end + 1) - tps
    tpr = np.r_[0.0, tps / n_pos]
    fpr = np.r_[0.0, fps / n_neg]
    auc = float(np.trapezoid(tpr, fpr))
    return fpr, tpr, auc


def youden_thresholds(probabilities, targets) -> np.ndarray:
    """Per-class threshold maximizing TPR - FPR; 0.5 for single-class columns."""
    p = np.asarray(probabilities, dtype=np.float64)
    y = np.asarray(targets).astype(bool)
    out = np.full(p.shape[1], 0.5)
    for c in range(p.shape[1]):
        if y[:, c].all() or not y[:, c].any():
            continue
        cand = np.unique(p[:, c])
        tpr = np.array([(p[y[:, c], c] >= t).mean() for t in cand])
        fpr = np.array([(p[~y[:, c], c] >= t).mean() for t in cand])
        out[c] = cand[int(np.argmax(tpr - fpr))]
    return out


def evaluate(probabilities, targets, class_names: Sequence[str], threshold=0.5, provenance: str = "") -> MetricReport:
    """Threshold probabilities, then fill in metrics and per-class AUC."""
    record = make_predictions(probabilities, threshold)
    report = multilabel_metrics(record, targets, class_names)
    y = np.asarray(targets)
    aucs: list[float | None] = []
    for c in range(y.shape[1]):
        try:
            aucs.append(roc_curve_auc(record.probabilities[:, c], y[:, c])[2])
        except MetricsError:
            aucs.append(None)
    report.auc = aucs
    report.provenance = provenance
    return report


def write_metrics(report: MetricReport, path: Path, extra: dict | None = None) -> None:
    payload = report.to_dict()
    if extra:
        payload.update(extra)
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def write_roc_csv(fpr: np.ndarray, tpr: np.ndarray, path: Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["fpr", "tpr"])
        for a, b in zip(fpr, tpr):
            w.writerow([repr(float(a)), repr(float(b))])
