"""Voxel and lesion-wise segmentation metrics.

A lesion is a 27-connected component. A ground-truth lesion counts as
detected when any of its voxels is predicted; a predicted lesion is a false
positive when none of its voxels is ground truth.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import _kernels
from .errors import ShapeError


@dataclass
class LabeledComponents:
    labels: np.ndarray
    count: int


@dataclass
class CaseMetrics:
    case_id: str
    dice: float
    ltpr: float
    lfpr: float
    fp_count: int


def connected_components_27(mask: np.ndarray) -> LabeledComponents:
    mask = np.asarray(mask)
    if mask.ndim != 3:
        raise ShapeError(f"expected a 3D mask, got shape {mask.shape}")
    labels, count = _kernels.label27(mask != 0)
    return LabeledComponents(labels, count)


def _check(a, b):
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")


def dice(pred_bin: np.ndarray, gt: np.ndarray) -> float:
    p = np.asarray(pred_bin) != 0
    g = np.asarray(gt) != 0
    _check(p, g)
    total = int(p.sum()) + int(g.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((p & g).sum()) / total


def lesion_metrics(pred_prob: np.ndarray, gt: np.ndarray, threshold: float = 0.5,
                   case_id: str = "") -> CaseMetrics:
    if not 0 < threshold < 1:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    pred_prob = np.asarray(pred_prob)
    g = np.asarray(gt) != 0
    _check(pred_prob, g)
    p = pred_prob >= threshold
    pc = connected_components_27(p)
    gc = connected_components_27(g)

    detected = np.unique(gc.labels[p & g])
    overlapping = np.unique(pc.labels[p & g])
    ltpr = detected.size / gc.count if gc.count else 1.0
    fp = pc.count - overlapping.size
    lfpr = fp / pc.count if pc.count else 0.0
    return CaseMetrics(case_id, dice(p, g), float(ltpr), float(lfpr), fp)


def aggregate(reports: Sequence[CaseMetrics]) -> dict:
    """Unweighted per-case means; ``fp_count`` may become fractional."""
    reports = list(reports)
    if not reports:
        raise ValueError("cannot aggregate an empty list of reports")
    out = {k: float(np.mean([getattr(r, k) for r in reports]))
           for k in ("dice", "ltpr", "lfpr", "fp_count")}
    out["n_cases"] = len(reports)
    return out


def report_document(reports: Sequence[CaseMetrics]) -> str:
    """Canonical key-sorted JSON report: per-case records plus the aggregate."""
    doc = {"cases": [asdict(r) for r in reports], "aggregate": aggregate(reports)}
    return json.dumps(doc, sort_keys=True, indent=2) + "\n"
