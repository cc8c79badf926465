"""Amodal segmentation metrics: full and occluded mIoU, COCO-style AP/AR."""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .synth_data import AmodalInstance

IOU_THRESHOLDS = np.round(np.linspace(0.5, 0.95, 10), 2)


class EmptySelectionError(ValueError):
    pass


@dataclass
class EvalRecord:
    prediction: np.ndarray
    score: float
    gt: AmodalInstance

    def __post_init__(self):
        if self.prediction.shape != self.gt.amodal.shape:
            raise ValueError(f"prediction {self.prediction.shape} vs gt {self.gt.amodal.shape}")


def iou(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, bool)
    b = np.asarray(b, bool)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


def occluded_iou(pred_amodal: np.ndarray, gt_visible: np.ndarray, gt_amodal: np.ndarray) -> float | None:
    """IoU of the occluded parts, with GT visible pixels removed from both sides.

    Returns None when the GT occluded region is empty; such instances are
    left out of dataset averages.
    """
    gt_visible = np.asarray(gt_visible, bool)
    gt_occ = np.asarray(gt_amodal, bool) & ~gt_visible
    if not gt_occ.any():
        return None
    return iou(np.asarray(pred_amodal, bool) & ~gt_visible, gt_occ)


def miou_occ(pred_amodal: np.ndarray, gt: AmodalInstance) -> float | None:
    return occluded_iou(pred_amodal, gt.visible, gt.amodal)


def _window_select(occlusion: np.ndarray, window) -> np.ndarray:
    if window is None:
        return np.ones(len(occlusion), bool)
    lo, hi = window
    return (occlusion >= lo) & (occlusion <= hi)


def miou_full(
    preds: Sequence[np.ndarray],
    gts: Sequence[np.ndarray],
    occlusion: Sequence[float] | None = None,
    occlusion_window: tuple[float, float] | None = None,
) -> float:
    """Mean amodal IoU over instances, optionally restricted to an occlusion-rate window."""
    if len(preds) != len(gts):
        raise ValueError("predictions and ground truths are not aligned")
    occ = np.zeros(len(gts)) if occlusion is None else np.asarray(occlusion, float)
    keep = _window_select(occ, occlusion_window)
    scores = [iou(p, g) for p, g, k in zip(preds, gts, keep) if k]
    if not scores:
        raise EmptySelectionError(f"no instances with occlusion rate in {occlusion_window}")
    return float(np.mean(scores))


def mean_occluded_iou(
    preds: Sequence[np.ndarray],
    visibles: Sequence[np.ndarray],
    amodals: Sequence[np.ndarray],
    occlusion: Sequence[float] | None = None,
    occlusion_window: tuple[float, float] | None = None,
) -> float:
    occ = np.zeros(len(amodals)) if occlusion is None else np.asarray(occlusion, float)
    keep = _window_select(occ, occlusion_window)
    scores = [occluded_iou(p, v, a) for p, v, a, k in zip(preds, visibles, amodals, keep) if k]
    scores = [s for s in scores if s is not None]
    if not scores:
        raise EmptySelectionError("no instances with a non-empty occluded region")
    return float(np.mean(scores))


def _match(preds, gts, thr: float) -> tuple[np.ndarray, np.ndarray]:
    """Greedy matching in score order. Returns per-prediction TP flags and scores, sorted."""
    order = sorted(range(len(preds)), key=lambda i: -preds[i][2])
    by_image: dict = {}
    for g in gts:
        by_image.setdefault(g[0], []).append(g[1])
    taken = {img: np.zeros(len(masks), bool) for img, masks in by_image.items()}
    tp = np.zeros(len(order), bool)
    for rank, i in enumerate(order):
        img, mask, _ = preds[i]
        best, best_iou = -1, thr
        for j, gmask in enumerate(by_image.get(img, [])):
            if taken[img][j]:
                continue
            v = iou(mask, gmask)
            if v >= best_iou:
                best, best_iou = j, v
        if best >= 0:
            taken[img][best] = True
            tp[rank] = True
    return tp, np.array([preds[i][2] for i in order])


def _interpolated_ap(tp: np.ndarray, n_gt: int) -> tuple[float, float]:
    if len(tp) == 0:
        return 0.0, 0.0
    ctp = np.cumsum(tp)
    cfp = np.cumsum(~tp)
    recall = ctp / n_gt
    precision = ctp / (ctp + cfp)
    # right-to-left running max gives the precision envelope
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    points = np.linspace(0.0, 1.0, 101)
    idx = np.searchsorted(recall, points, side="left")
    interp = np.where(idx < len(recall), envelope[np.minimum(idx, len(recall) - 1)], 0.0)
    return float(interp.mean()), float(recall[-1])


def average_precision(
    predictions: Sequence[tuple],
    ground_truths: Sequence[tuple],
    iou_thresholds: Sequence[float] = IOU_THRESHOLDS,
    max_dets: int = 100,
) -> dict[str, float]:
    """COCO-style mask AP/AR for a single category.

    ``predictions`` are ``(image_id, mask, score)``; ``ground_truths`` are
    ``(image_id, mask)``. AP averages 101-point interpolated precision over
    the IoU thresholds; AR averages the final recall.
    """
    if not ground_truths:
        warnings.warn("no ground-truth instances; AP defined as 0")
        return {"AP": 0.0, "AP50": 0.0, "AP75": 0.0, "AR": 0.0}
    per_image: dict = {}
    for p in sorted(predictions, key=lambda p: -p[2]):
        per_image.setdefault(p[0], []).append(p)
    kept = [p for plist in per_image.values() for p in plist[:max_dets]]
    aps, ars = {}, {}
    for thr in iou_thresholds:
        tp, _ = _match(kept, ground_truths, float(thr))
        aps[float(thr)], ars[float(thr)] = _interpolated_ap(tp, len(ground_truths))
    return {
        "AP": float(np.mean(list(aps.values()))),
        "AP50": aps.get(0.5, float("nan")),
        "AP75": aps.get(0.75, float("nan")),
        "AR": float(np.mean(list(ars.values()))),
    }


def records_ap(records: Sequence[EvalRecord], **kw) -> dict[str, float]:
    preds, gts, seen = [], [], set()
    for r in records:
        key = (r.gt.image_id, r.gt.instance_id, r.gt.frame_index)
        preds.append((key, r.prediction, r.score))
        if key not in seen:
            seen.add(key)
            gts.append((key, r.gt.amodal))
    return average_precision(preds, gts, **kw)


def occlusion_buckets(occlusion: np.ndarray, edges=(0.0, 0.1, 0.3, 0.5, 0.7, 1.0)) -> list[tuple[float, float]]:
    return [(lo, hi) for lo, hi in zip(edges[:-1], edges[1:])]


def evaluation_report(
    preds: Sequence[np.ndarray],
    visibles: Sequence[np.ndarray],
    amodals: Sequence[np.ndarray],
    occlusion: Sequence[float],
    scores: Sequence[float] | None = None,
    occlusion_window: tuple[float, float] | None = None,
) -> dict:
    """All metrics for one prediction set, plus per-occlusion-bucket mIoU."""
    occ = np.asarray(occlusion, float)
    keep = _window_select(occ, occlusion_window)
    idx = np.flatnonzero(keep)
    if len(idx) == 0:
        raise EmptySelectionError(f"no instances with occlusion rate in {occlusion_window}")
    sel = lambda xs: [xs[i] for i in idx]  # noqa: E731
    report = {
        "count": int(len(idx)),
        "occlusion_window": list(occlusion_window) if occlusion_window else None,
        "miou_full": miou_full(sel(preds), sel(amodals)),
        "miou_occ": mean_occluded_iou(sel(preds), sel(visibles), sel(amodals)),
    }
    if scores is not None:
        preds_ap = [(i, preds[i], float(scores[i])) for i in idx]
        gts_ap = [(i, amodals[i]) for i in idx]
        report.update(average_precision(preds_ap, gts_ap))
    buckets = {}
    for lo, hi in occlusion_buckets(occ):
        b = [i for i in idx if lo <= occ[i] < hi or (hi == 1.0 and occ[i] == 1.0)]
        if not b:
            continue
        entry = {"count": len(b), "miou_full": float(np.mean([iou(preds[i], amodals[i]) for i in b]))}
        occs = [occluded_iou(preds[i], visibles[i], amodals[i]) for i in b]
        occs = [o for o in occs if o is not None]
        if occs:
            entry["miou_occ"] = float(np.mean(occs))
        buckets[f"{lo:.1f}-{hi:.1f}"] = entry
    report["buckets"] = buckets
    return report


def format_report(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True)
