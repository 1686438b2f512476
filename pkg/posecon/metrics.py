"""
Segmentation metrics -- frame accuracy, segmental IoU, edit score and F1@k.

Segment-level metrics decompose both label streams into maximal constant runs
and drop background runs. Predicted and ground-truth segments of the same class
are matched greedily by descending intersection (earlier predicted start wins a
tie), each ground-truth segment at most once.
"""

import logging
from dataclasses import dataclass, field
from typing import Collection, Hashable, Sequence

import numpy as np

from posecon.errors import LengthMismatch

logger = logging.getLogger(__name__)

DEFAULT_F1_THRESHOLD = 0.5
REPORT_F1_THRESHOLDS = (0.10, 0.25, 0.50)


@dataclass(frozen=True)
class Segment:
    label: Hashable
    start: int
    end: int  # exclusive

    @property
    def length(self) -> int:
        return self.end - self.start


@dataclass
class MetricReport:
    acc: float
    iou: float
    edit: float
    f1_at_50: float
    per_class: dict = field(default_factory=dict)
    f1_sweep: dict = field(default_factory=dict)
    empty_iou: bool = False
    empty_f1: bool = False

    def row(self) -> dict:
        return {"acc": self.acc, "iou": self.iou, "edit": self.edit, "f1_at_50": self.f1_at_50}


# ---------------------------------------------------------------------------
# Run-length helpers
# ---------------------------------------------------------------------------

def _check_lengths(pred: Sequence, gt: Sequence) -> None:
    if len(pred) != len(gt):
        raise LengthMismatch(f"prediction has {len(pred)} frames, ground truth {len(gt)}")


def segments_from_labels(labels: Sequence, background: Collection = ()) -> list[Segment]:
    """Maximal constant-label runs, background runs removed."""
    segments: list[Segment] = []
    start = 0
    for i in range(1, len(labels) + 1):
        if i == len(labels) or labels[i] != labels[start]:
            if labels[start] not in background:
                segments.append(Segment(labels[start], start, i))
            start = i
    return segments


def transcript_from_labels(labels: Sequence, background: Collection = ()) -> list:
    return [s.label for s in segments_from_labels(labels, background)]


def _match_segments(pred: list[Segment], gt: list[Segment]) -> dict[int, tuple[int, float]]:
    """Greedy same-class matching; maps pred index -> (gt index, IoU)."""
    candidates = []
    for i, p in enumerate(pred):
        for j, g in enumerate(gt):
            if p.label != g.label:
                continue
            inter = min(p.end, g.end) - max(p.start, g.start)
            if inter > 0:
                candidates.append((-inter, p.start, g.start, i, j))
    candidates.sort()

    matches: dict[int, tuple[int, float]] = {}
    used_gt: set[int] = set()
    for neg_inter, _, _, i, j in candidates:
        if i in matches or j in used_gt:
            continue
        p, g = pred[i], gt[j]
        union = max(p.end, g.end) - min(p.start, g.start)
        matches[i] = (j, -neg_inter / union)
        used_gt.add(j)
    return matches


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def frame_accuracy(pred: Sequence, gt: Sequence) -> float:
    _check_lengths(pred, gt)
    if len(gt) == 0:
        raise LengthMismatch("cannot score an empty video")
    return float(np.mean(np.asarray(pred) == np.asarray(gt)))


def segmental_iou(pred: Sequence, gt: Sequence, background_classes: Collection = ()) -> float:
    """Mean IoU over non-background predicted segments; 0 when there are none."""
    _check_lengths(pred, gt)
    pred_segs = segments_from_labels(pred, background_classes)
    if not pred_segs:
        return 0.0
    gt_segs = segments_from_labels(gt, background_classes)
    matches = _match_segments(pred_segs, gt_segs)
    return float(sum(iou for _, iou in matches.values()) / len(pred_segs))


def levenshtein(a: Sequence, b: Sequence) -> int:
    dist = np.zeros((len(a) + 1, len(b) + 1), dtype=np.int64)
    dist[:, 0] = np.arange(len(a) + 1)
    dist[0, :] = np.arange(len(b) + 1)
    for i in range(1, len(a) + 1):
        for j in range(1, len(b) + 1):
            cost = 0 if a[i - 1] == b[j - 1] else 1
            dist[i, j] = min(dist[i - 1, j] + 1, dist[i, j - 1] + 1, dist[i - 1, j - 1] + cost)
    return int(dist[-1, -1])


def edit_score(pred_transcript: Sequence, gt_transcript: Sequence) -> float:
    """100 * (1 - Levenshtein / max length); 100 when both are empty."""
    longest = max(len(pred_transcript), len(gt_transcript))
    if longest == 0:
        return 100.0
    return 100.0 * (1.0 - levenshtein(pred_transcript, gt_transcript) / longest)


def _per_class_f1(pred: Sequence, gt: Sequence, threshold: float, background_classes: Collection) -> dict:
    pred_segs = segments_from_labels(pred, background_classes)
    gt_segs = segments_from_labels(gt, background_classes)
    matches = _match_segments(pred_segs, gt_segs)

    classes = sorted({g.label for g in gt_segs}, key=str)
    table = {}
    for label in classes:
        tp = sum(1 for i, (_, iou) in matches.items() if pred_segs[i].label == label and iou >= threshold)
        n_pred = sum(1 for p in pred_segs if p.label == label)
        n_gt = sum(1 for g in gt_segs if g.label == label)
        fp, fn = n_pred - tp, n_gt - tp
        f1 = 2.0 * tp / (2.0 * tp + fp + fn) if tp else 0.0
        table[label] = {"tp": tp, "fp": fp, "fn": fn, "f1": f1}
    return table


def f1_at_threshold(
    pred: Sequence,
    gt: Sequence,
    threshold: float = DEFAULT_F1_THRESHOLD,
    background_classes: Collection = (),
) -> float:
    """Unweighted mean per-class F1 over classes present in the ground truth."""
    _check_lengths(pred, gt)
    table = _per_class_f1(pred, gt, threshold, background_classes)
    if not table:
        return 0.0
    return float(np.mean([row["f1"] for row in table.values()]))


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

def evaluate_video(pred: Sequence, gt: Sequence, background_classes: Collection = ()) -> MetricReport:
    _check_lengths(pred, gt)
    pred_list, gt_list = list(pred), list(gt)
    table = _per_class_f1(pred_list, gt_list, DEFAULT_F1_THRESHOLD, background_classes)
    return MetricReport(
        acc=frame_accuracy(pred_list, gt_list),
        iou=segmental_iou(pred_list, gt_list, background_classes),
        edit=edit_score(
            transcript_from_labels(pred_list, background_classes),
            transcript_from_labels(gt_list, background_classes),
        ),
        f1_at_50=f1_at_threshold(pred_list, gt_list, DEFAULT_F1_THRESHOLD, background_classes),
        per_class=table,
        f1_sweep={
            k: f1_at_threshold(pred_list, gt_list, k, background_classes) for k in REPORT_F1_THRESHOLDS
        },
        empty_iou=not segments_from_labels(pred_list, background_classes),
        empty_f1=not table,
    )


def evaluate_dataset(reports: dict[str, MetricReport]) -> dict:
    """Mean of every metric over videos."""
    if not reports:
        return {"acc": 0.0, "iou": 0.0, "edit": 0.0, "f1_at_50": 0.0}
    rows = [r.row() for r in reports.values()]
    return {key: float(np.mean([row[key] for row in rows])) for key in rows[0]}
