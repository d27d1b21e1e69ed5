"""Instance-mask evaluation: greedy matching, COCO-style AP and mean mask IoU.

AP is pooled across images: every prediction from every image enters one
score-ranked precision/recall curve per IoU threshold, the precision envelope
is sampled at 101 recall points and the ten thresholds 0.50:0.05:0.95 are
averaged.

Tie rule: predictions with equal scores are admitted to the PR curve as one
group, so their relative order never changes AP. Within an image, an
equal-score group is matched highest-IoU pair first, so the order in which
tied predictions are listed does not change the matching either.

Mask average IoU is the mean over ground-truth instances of the IoU of the
prediction greedily matched to it (highest-scoring prediction first, each
taking its best overlapping free instance); unmatched instances count as 0.
"""

from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from nucleo.maskops import mask_iou_matrix

THRESHOLDS = np.round(np.linspace(0.5, 0.95, 10), 2)
RECALL_POINTS = np.linspace(0.0, 1.0, 101)
CSV_HEADER = ("image_id", "n_gt", "n_pred", "ap50", "ap", "mean_iou")

Prediction = tuple[np.ndarray, float]


@dataclass(frozen=True)
class MatchResult:
    threshold: float
    pairs: list[tuple[int, int, float]]
    unmatched_preds: list[int]
    unmatched_gts: list[int]


def score_order(scores) -> np.ndarray:
    """Indices by descending score, ties by ascending index."""
    return np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")


def match_iou(iou: np.ndarray, scores, threshold: float) -> MatchResult:
    """Greedy one-to-one matching on a precomputed ``(P, G)`` IoU matrix.

    Predictions are visited by descending score; each claims the free
    ground-truth instance of highest IoU, provided that IoU is positive and at
    least ``threshold``. Predictions sharing a score are resolved together by
    taking their eligible pairs in descending IoU order. Remaining IoU ties go
    to the lower prediction, then the lower ground-truth index.
    """
    iou = np.asarray(iou, dtype=np.float64)
    scores = np.asarray(scores, dtype=np.float64)
    n_pred, n_gt = iou.shape
    free = np.ones(n_gt, dtype=bool)
    pairs, unmatched = [], []
    order = score_order(scores)
    start = 0
    while start < n_pred:
        stop = start + 1
        while stop < n_pred and scores[order[stop]] == scores[order[start]]:
            stop += 1
        group = np.sort(order[start:stop])
        start = stop
        cand = np.where(free[None, :], iou[group], -1.0)
        cand[(cand <= 0) | (cand < threshold)] = -1.0
        pending = np.ones(len(group), dtype=bool)
        while n_gt and cand.max() >= 0:
            k, g = np.unravel_index(int(np.argmax(cand)), cand.shape)
            pairs.append((int(group[k]), int(g), float(iou[group[k], g])))
            free[g] = False
            pending[k] = False
            cand[k, :] = -1.0
            cand[:, g] = -1.0
        unmatched.extend(int(p) for p in group[pending])
    return MatchResult(float(threshold), pairs, sorted(unmatched), [int(g) for g in np.flatnonzero(free)])


def match_instances(preds: Sequence[Prediction], gts: Sequence[np.ndarray], threshold: float) -> MatchResult:
    iou = mask_iou_matrix([m for m, _ in preds], gts)
    return match_iou(iou, [s for _, s in preds], threshold)


def _ap_from_ranked(scores: np.ndarray, tp: np.ndarray, n_gt: int) -> float:
    # scores/tp already in ranking order
    if len(scores) == 0:
        return 0.0
    tp_c = np.cumsum(tp)
    fp_c = np.cumsum(~tp)
    group_end = np.r_[scores[1:] != scores[:-1], True]
    recall = tp_c[group_end] / n_gt
    precision = tp_c[group_end] / (tp_c[group_end] + fp_c[group_end])
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    sampled = np.where(idx < len(envelope), envelope[np.minimum(idx, len(envelope) - 1)], 0.0)
    return float(sampled.mean())


@dataclass
class _ImageData:
    image_id: str
    scores: np.ndarray
    iou: np.ndarray

    @property
    def n_pred(self):
        return self.iou.shape[0]

    @property
    def n_gt(self):
        return self.iou.shape[1]

    def tp_flags(self, threshold: float) -> np.ndarray:
        flags = np.zeros(self.n_pred, dtype=bool)
        for p, _, _ in match_iou(self.iou, self.scores, threshold).pairs:
            flags[p] = True
        return flags


def _prepare(images: Sequence[tuple[Sequence[Prediction], Sequence[np.ndarray]]], ids=None) -> list[_ImageData]:
    out = []
    for k, (preds, gts) in enumerate(images):
        scores = np.asarray([s for _, s in preds], dtype=np.float64)
        iou = mask_iou_matrix([m for m, _ in preds], gts)
        out.append(_ImageData(ids[k] if ids is not None else str(k), scores, iou))
    return out


def _pooled_ap(data: Sequence[_ImageData], threshold: float) -> float | None:
    n_gt = sum(d.n_gt for d in data)
    if n_gt == 0:
        return None
    scores, tps, img, idx = [], [], [], []
    for k, d in enumerate(data):
        scores.append(d.scores)
        tps.append(d.tp_flags(threshold))
        img.append(np.full(d.n_pred, k))
        idx.append(np.arange(d.n_pred))
    scores = np.concatenate(scores)
    tps = np.concatenate(tps)
    order = np.lexsort((np.concatenate(idx), np.concatenate(img), -scores))
    return _ap_from_ranked(scores[order], tps[order], n_gt)


def _per_threshold(data: Sequence[_ImageData]) -> np.ndarray | None:
    values = [_pooled_ap(data, t) for t in THRESHOLDS]
    return None if values[0] is None else np.asarray(values)


def average_precision(images) -> tuple[np.ndarray | None, float | None]:
    """Per-threshold AP and their mean over ``[(preds, gts), ...]``.

    Both are ``None`` when there are no ground-truth instances at all.
    """
    per = _per_threshold(_prepare(images))
    return per, (None if per is None else float(per.mean()))


def _iou_sum(d: _ImageData) -> float:
    return sum(iou for _, _, iou in match_iou(d.iou, d.scores, 0.0).pairs)


def mean_mask_iou(images) -> float | None:
    data = _prepare(images)
    n_gt = sum(d.n_gt for d in data)
    if n_gt == 0:
        return None
    return sum(_iou_sum(d) for d in data) / n_gt


@dataclass(frozen=True)
class ImageResult:
    image_id: str
    n_gt: int
    n_pred: int
    tp50: int
    fp50: int
    fn50: int
    ap50: float | None
    ap: float | None
    mean_iou: float | None


@dataclass(frozen=True)
class EvalReport:
    ap: float | None
    mean_mask_iou: float | None
    per_threshold_ap: np.ndarray | None
    per_image: list[ImageResult] = field(default_factory=list)

    @property
    def ap50(self) -> float | None:
        return None if self.per_threshold_ap is None else float(self.per_threshold_ap[0])

    @property
    def n_gt(self) -> int:
        return sum(r.n_gt for r in self.per_image)

    @property
    def n_pred(self) -> int:
        return sum(r.n_pred for r in self.per_image)


def evaluate_dataset(
    predictions: Mapping[str, Sequence[Prediction]],
    ground_truth: Mapping[str, Sequence[np.ndarray]],
) -> EvalReport:
    """Score predictions against ground truth keyed by the same image ids.

    Raises:
        ValueError: if the two mappings do not cover the same ids.
    """
    if set(predictions) != set(ground_truth):
        missing = sorted(set(ground_truth) - set(predictions))
        extra = sorted(set(predictions) - set(ground_truth))
        raise ValueError(f"image id mismatch: missing predictions {missing}, unknown ids {extra}")
    ids = sorted(ground_truth)
    data = _prepare([(predictions[i], ground_truth[i]) for i in ids], ids)
    rows = []
    for d in data:
        per = _per_threshold([d])
        tp50 = int(d.tp_flags(THRESHOLDS[0]).sum())
        rows.append(
            ImageResult(
                d.image_id,
                d.n_gt,
                d.n_pred,
                tp50,
                d.n_pred - tp50,
                d.n_gt - tp50,
                None if per is None else float(per[0]),
                None if per is None else float(per.mean()),
                None if d.n_gt == 0 else _iou_sum(d) / d.n_gt,
            )
        )
    per = _per_threshold(data)
    n_gt = sum(d.n_gt for d in data)
    miou = None if n_gt == 0 else sum(_iou_sum(d) for d in data) / n_gt
    return EvalReport(None if per is None else float(per.mean()), miou, per, rows)


def _fmt(v) -> str:
    return "nan" if v is None else f"{v:.6f}"


def report_csv(report: EvalReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in report.per_image:
        w.writerow([r.image_id, r.n_gt, r.n_pred, _fmt(r.ap50), _fmt(r.ap), _fmt(r.mean_iou)])
    w.writerow(["ALL", report.n_gt, report.n_pred, _fmt(report.ap50), _fmt(report.ap), _fmt(report.mean_mask_iou)])
    return buf.getvalue()


def write_report_csv(report: EvalReport, path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(report_csv(report))


def format_summary(report: EvalReport) -> str:
    def pct(v):
        return "n/a" if v is None else f"{100 * v:.2f}"

    lines = [f"AP: {pct(report.ap)}", f"Mask Average IoU: {pct(report.mean_mask_iou)}"]
    if report.per_threshold_ap is not None:
        lines.append(
            "AP per threshold: "
            + " ".join(f"{t:.2f}={100 * a:.2f}" for t, a in zip(THRESHOLDS, report.per_threshold_ap))
        )
    return "\n".join(lines)
