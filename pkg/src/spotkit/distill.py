"""Reconstruction and attention-distillation objectives with IoU-based slot matching."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .config import ConfigError
from .autodiff import tensor as T
from .autodiff.tensor import ContractError, ShapeError, Tensor

DEFAULT_LAMBDA = {"ar": 0.005, "mlp": 0.001}
LOG_CLAMP = 1e-9


@dataclass
class MaskAssignment:
    perm: np.ndarray    # perm[a] = student column matched to teacher column a
    total_iou: float


@dataclass
class LossReport:
    rec: Tensor
    att: Tensor
    total: Tensor
    lam: float

    def as_dict(self) -> dict:
        return {"L_REC": self.rec.item(), "L_ATT": self.att.item(), "L": self.total.item(), "lambda": self.lam}


def reconstruction_loss(targets, recon) -> Tensor:
    """Sum of squared errors divided by the element count n * d_y (batch-averaged)."""
    targets = T.as_tensor(targets, like=recon if isinstance(recon, Tensor) else None)
    recon = T.as_tensor(recon, like=targets)
    if targets.shape != recon.shape:
        raise ShapeError(f"reconstruction_loss: shapes differ {targets.shape} vs {recon.shape}")
    return T.mse(recon, targets)


def harden_masks(attn: np.ndarray) -> np.ndarray:
    """Row-wise one-hot of the argmax (first maximum wins)."""
    a = np.asarray(attn)
    hard = np.zeros_like(a, dtype=np.float64)
    np.put_along_axis(hard, np.argmax(a, axis=-1)[..., None], 1.0, axis=-1)
    return hard


def iou_cost(teacher_hard: np.ndarray, student: np.ndarray) -> np.ndarray:
    """IoU between teacher column a and hardened student column b; (..., k, k).

    Pairs whose union is empty score 0.
    """
    t = np.asarray(teacher_hard, dtype=np.float64)
    s = harden_masks(student)
    if t.shape != s.shape:
        raise ShapeError(f"iou_cost: shapes differ {t.shape} vs {s.shape}")
    inter = np.swapaxes(t, -1, -2) @ s
    union = t.sum(axis=-2)[..., :, None] + s.sum(axis=-2)[..., None, :] - inter
    return np.divide(inter, union, out=np.zeros_like(inter), where=union > 0)


def _row_order_total(iou: np.ndarray, perm) -> float:
    return sum(float(iou[i, perm[i]]) for i in range(len(perm)))


def _best_total(iou: np.ndarray) -> float:
    if iou.shape[0] == 0:
        return 0.0
    perm = _kernels.solve_assignment(1.0 - iou)
    return _row_order_total(iou, perm)


def hungarian_match(iou) -> MaskAssignment:
    """Max-total-IoU bijection; among optimal ones, the lexicographically smallest."""
    iou = np.asarray(iou, dtype=np.float64)
    if iou.ndim != 2 or iou.shape[0] != iou.shape[1]:
        raise ShapeError(f"hungarian_match needs a square matrix, got shape {iou.shape}")
    k = iou.shape[0]
    best = _best_total(iou)
    tol = 1e-12 * max(1, k)
    perm = np.empty(k, dtype=np.int64)
    free = list(range(k))
    prefix = 0.0
    for row in range(k):
        for col in free:
            rest_cols = [c for c in free if c != col]
            rest = _best_total(iou[np.ix_(range(row + 1, k), rest_cols)])
            if prefix + iou[row, col] + rest >= best - tol:
                perm[row] = col
                prefix += iou[row, col]
                free.remove(col)
                break
    return MaskAssignment(perm=perm, total_iou=_row_order_total(iou, perm))


def reorder_teacher(teacher_hard: np.ndarray, perm: np.ndarray) -> np.ndarray:
    """Move teacher column a to position perm[a]."""
    out = np.zeros_like(teacher_hard)
    out[..., perm] = teacher_hard
    return out


def match_teacher_masks(teacher_attn: np.ndarray, student_attn: np.ndarray) -> np.ndarray:
    """Harden teacher masks and align their columns to the student's, per image."""
    hard = harden_masks(teacher_attn)
    ious = iou_cost(hard, student_attn)
    if hard.ndim == 2:
        return reorder_teacher(hard, hungarian_match(ious).perm)
    return np.stack([reorder_teacher(h, hungarian_match(m).perm) for h, m in zip(hard, ious)])


def attn_distill_loss(teacher_matched, student: Tensor) -> Tensor:
    """-(1/n) <A''_T, log A_S>_F, averaged over a leading batch axis if present."""
    t = np.asarray(teacher_matched, dtype=student.dtype)
    if t.shape != student.shape:
        raise ShapeError(f"attn_distill_loss: shapes differ {t.shape} vs {student.shape}")
    if not np.all((t == 0) | (t == 1)):
        raise ContractError("teacher masks must be binary")
    rows = t.size // t.shape[-1]
    log_s = T.log(T.clamp_min(student, LOG_CLAMP))
    return T.scale(T.tsum(Tensor(t) * log_s), -1.0 / rows)


def total_loss(rec: Tensor, att: Tensor, lam: float) -> LossReport:
    if lam < 0:
        raise ConfigError(f"distillation weight must be >= 0, got {lam}")
    total = rec + T.scale(att, lam)
    return LossReport(rec=rec, att=att, total=total, lam=float(lam))
