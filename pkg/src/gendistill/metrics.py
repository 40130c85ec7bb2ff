"""Confusion-matrix segmentation metrics."""
import numpy as np
import torch


class SegMetric:
    def __init__(self, num_classes: int, ignore_index: int = 255):
        self.num_classes = num_classes
        self.ignore_index = ignore_index
        self.confusion = np.zeros((num_classes, num_classes), dtype=np.int64)

    def add_batch(self, preds, labels) -> None:
        """Accumulate; rows index ground truth, columns prediction."""
        preds = torch.as_tensor(preds).reshape(-1).numpy()
        labels = torch.as_tensor(labels).reshape(-1).numpy()
        if preds.shape != labels.shape:
            raise ValueError(f"prediction/label size mismatch {preds.shape} vs {labels.shape}")
        keep = (labels != self.ignore_index) & (labels >= 0) & (labels < self.num_classes)
        idx = self.num_classes * labels[keep].astype(np.int64) + preds[keep].astype(np.int64)
        self.confusion += np.bincount(idx, minlength=self.num_classes**2).reshape(self.num_classes, self.num_classes)

    def iou(self) -> np.ndarray:
        """Per-class IoU; NaN for classes absent from both prediction and truth."""
        tp = np.diag(self.confusion).astype(np.float64)
        union = self.confusion.sum(0) + self.confusion.sum(1) - tp
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(union > 0, tp / np.maximum(union, 1), np.nan)

    def miou(self) -> float:
        """Mean IoU in percent."""
        iou = self.iou()
        return float(np.nanmean(iou) * 100) if np.isfinite(iou).any() else 0.0

    def pixel_accuracy(self) -> float:
        total = self.confusion.sum()
        return float(np.diag(self.confusion).sum() / total * 100) if total else 0.0
