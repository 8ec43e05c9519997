"""Pose-estimation error metrics (all distances in millimetres)."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .errors import DegenerateFrameError, ShapeError, TooShortError

PCK_THRESHOLD = 150.0
AUC_THRESHOLDS = np.arange(0.0, 150.0 + 1e-9, 5.0)  # 31 points


def _pair(pred, gt):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction shape {pred.shape} != ground truth shape {gt.shape}")
    if pred.ndim == 2:
        pred, gt = pred[None], gt[None]
    if pred.ndim != 3 or pred.shape[-1] != 3:
        raise ShapeError(f"expected (T, j, 3) arrays, got {pred.shape}")
    return pred, gt


def joint_errors(pred, gt) -> np.ndarray:
    pred, gt = _pair(pred, gt)
    return np.linalg.norm(pred - gt, axis=-1)


def mpjpe(pred, gt) -> float:
    return float(joint_errors(pred, gt).mean())


def similarity_align(pred, gt) -> np.ndarray:
    """Per-frame least-squares similarity transform of ``pred`` onto ``gt`` (no reflections)."""
    pred, gt = _pair(pred, gt)
    mu_p = pred.mean(axis=1, keepdims=True)
    mu_g = gt.mean(axis=1, keepdims=True)
    P = pred - mu_p
    G = gt - mu_g
    var_g = (G ** 2).sum(axis=(1, 2))
    if np.any(var_g <= 0.0):
        raise DegenerateFrameError(f"ground-truth frame {int(np.argmax(var_g <= 0))} has all joints coincident")
    var_p = (P ** 2).sum(axis=(1, 2))
    H = np.einsum("tji,tjk->tik", P, G)
    U, S, Vt = np.linalg.svd(H)
    V = np.swapaxes(Vt, 1, 2)
    sign = np.sign(np.linalg.det(V @ np.swapaxes(U, 1, 2)))
    sign[sign == 0] = 1.0
    D = np.ones((len(pred), 3))
    D[:, 2] = sign
    R = np.einsum("tij,tj,tkj->tik", V, D, U)
    trace = (S * D).sum(axis=1)
    scale = np.where(var_p > 0, trace / np.where(var_p > 0, var_p, 1.0), 0.0)
    return scale[:, None, None] * np.einsum("tij,tkj->tki", R, P) + mu_g


def p_mpjpe(pred, gt) -> float:
    pred, gt = _pair(pred, gt)
    return mpjpe(similarity_align(pred, gt), gt)


def mpjve(pred, gt) -> float:
    pred, gt = _pair(pred, gt)
    if pred.shape[0] < 2:
        raise TooShortError("velocity error needs at least two frames")
    return mpjpe(np.diff(pred, axis=0), np.diff(gt, axis=0))


def pck(pred, gt, threshold_mm: float = PCK_THRESHOLD) -> float:
    if threshold_mm < 0:
        raise ValueError("threshold must be non-negative")
    return float((joint_errors(pred, gt) <= threshold_mm).mean())


def auc(pred, gt) -> float:
    err = joint_errors(pred, gt).ravel()
    return float(np.mean([(err <= th).mean() for th in AUC_THRESHOLDS]))


@dataclass
class MetricReport:
    mpjpe_mm: float
    p_mpjpe_mm: float
    mpjve_mm: float | None  # None when a sequence is shorter than two frames
    pck150: float
    auc: float
    frames: int
    per_frame_errors: list[float]

    def to_dict(self, include_frames: bool = False) -> dict:
        d = asdict(self)
        if not include_frames:
            d.pop("per_frame_errors")
        return d


def evaluate_sequences(preds, gts) -> MetricReport:
    """Metrics over a list of (T_i, j, 3) sequences, aggregated in sequence order.

    MPJVE is computed within each sequence and averaged over all velocity
    samples; sequences with a single frame contribute no velocity samples.
    """
    preds = [np.asarray(p, dtype=np.float64) for p in preds]
    gts = [np.asarray(g, dtype=np.float64) for g in gts]
    if len(preds) != len(gts):
        raise ShapeError(f"{len(preds)} predicted sequences for {len(gts)} ground-truth sequences")
    if not preds:
        raise ShapeError("no sequences to evaluate")
    per_frame = []
    aligned = []
    vel_sum, vel_count = 0.0, 0
    for p, g in zip(preds, gts):
        err = joint_errors(p, g)
        per_frame.append(err.mean(axis=1))
        aligned.append(joint_errors(similarity_align(p, g), g))
        if p.shape[0] >= 2:
            v = np.linalg.norm(np.diff(p, axis=0) - np.diff(g, axis=0), axis=-1)
            vel_sum += float(v.sum())
            vel_count += v.size
    all_p = np.concatenate(preds)
    all_g = np.concatenate(gts)
    frame_err = np.concatenate(per_frame)
    return MetricReport(
        mpjpe_mm=float(frame_err.mean()),
        p_mpjpe_mm=float(np.concatenate(aligned).mean()),
        mpjve_mm=vel_sum / vel_count if vel_count else None,
        pck150=pck(all_p, all_g),
        auc=auc(all_p, all_g),
        frames=int(frame_err.size),
        per_frame_errors=frame_err.tolist(),
    )
