"""Frame, segment, and open-set evaluation metrics.

All functions return fractions in [0, 1]; serialized reports show the metric
fields as percentages.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import NamedTuple, Sequence

import numpy as np
from scipy.stats import rankdata


class Segment(NamedTuple):
    """Maximal run of one label; ``end`` is exclusive."""

    label: int
    start: int
    end: int


def to_segments(labels: np.ndarray) -> list[Segment]:
    """Run-length encode a frame label stream."""
    labels = np.asarray(labels)
    if labels.ndim != 1:
        raise ValueError(f"labels must be 1-d, got shape {labels.shape}")
    segments: list[Segment] = []
    if labels.size == 0:
        return segments
    boundaries = np.flatnonzero(np.diff(labels)) + 1
    starts = np.concatenate(([0], boundaries))
    ends = np.concatenate((boundaries, [labels.size]))
    for s, e in zip(starts, ends):
        segments.append(Segment(int(labels[s]), int(s), int(e)))
    return segments


def flatten_segments(segments: Sequence[Segment], length: int) -> np.ndarray:
    """Inverse of :func:`to_segments` for contiguous, gap-free segments."""
    out = np.full(length, -1, dtype=np.int64)
    for label, start, end in segments:
        if not 0 <= start < end <= length:
            raise ValueError(f"segment ({label}, {start}, {end}) out of range for length {length}")
        out[start:end] = label
    if (out == -1).any():
        raise ValueError("segments do not cover the full stream")
    return out


def segment_iou(a: Segment, b: Segment) -> float:
    intersection = max(0, min(a.end, b.end) - max(a.start, b.start))
    union = max(a.end, b.end) - min(a.start, b.start)
    return intersection / union if union > 0 else 0.0


def frame_accuracy(pred: np.ndarray, gt: np.ndarray, mask: np.ndarray | None = None) -> float:
    """Fraction of unmasked frames where prediction equals ground truth."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape or pred.ndim != 1:
        raise ValueError("pred and gt must be equal-length 1-d arrays")
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != pred.shape:
            raise ValueError("mask shape must match the label streams")
        pred = pred[mask]
        gt = gt[mask]
    if pred.size == 0:
        raise ValueError("no frames left to score")
    return float((pred == gt).mean())


def _match_count(
    pred_segments: Sequence[Segment], gt_segments: Sequence[Segment], threshold: float
) -> int:
    """One-to-one greedy matching by descending overlap.

    Candidate pairs share a class and reach the overlap threshold; pairs are
    claimed best-first, and the tie order is chosen so that swapping the two
    segmentations cannot change the matched count.
    """
    candidates = []
    for i, p in enumerate(pred_segments):
        for j, g in enumerate(gt_segments):
            if p.label != g.label:
                continue
            iou = segment_iou(p, g)
            if iou >= threshold and iou > 0.0:
                candidates.append((-iou, min(i, j), max(i, j), i, j))
    candidates.sort()
    pred_used = np.zeros(len(pred_segments), dtype=bool)
    gt_used = np.zeros(len(gt_segments), dtype=bool)
    matched = 0
    for _, _, _, i, j in candidates:
        if not pred_used[i] and not gt_used[j]:
            pred_used[i] = True
            gt_used[j] = True
            matched += 1
    return matched


def _f1_from_counts(tp: int, fp: int, fn: int) -> float:
    if tp + fp + fn == 0:
        return 1.0
    precision = tp / (tp + fp) if tp + fp > 0 else 0.0
    recall = tp / (tp + fn) if tp + fn > 0 else 0.0
    if precision + recall == 0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def f1_at_k(
    pred_segments: Sequence[Segment], gt_segments: Sequence[Segment], k_percent: float
) -> float:
    """Segmental F1 at an overlap threshold of ``k_percent`` / 100."""
    if not 0 < k_percent <= 100:
        raise ValueError(f"k_percent must be in (0, 100], got {k_percent}")
    if pred_segments and gt_segments and pred_segments[-1][2] != gt_segments[-1][2]:
        raise ValueError("pred and truth segmentations cover different lengths")
    tp = _match_count(pred_segments, gt_segments, k_percent / 100.0)
    return _f1_from_counts(tp, len(pred_segments) - tp, len(gt_segments) - tp)


def corpus_f1_at_k(
    pred_streams: Sequence[np.ndarray], gt_streams: Sequence[np.ndarray], k_percent: float
) -> float:
    """Segmental F1 over a corpus, pooling matched counts across sequences."""
    if not 0 < k_percent <= 100:
        raise ValueError(f"k_percent must be in (0, 100], got {k_percent}")
    if len(pred_streams) != len(gt_streams):
        raise ValueError("need one prediction stream per ground-truth stream")
    threshold = k_percent / 100.0
    tp = fp = fn = 0
    for pred, gt in zip(pred_streams, gt_streams):
        pred = np.asarray(pred)
        gt = np.asarray(gt)
        if pred.shape != gt.shape:
            raise ValueError("prediction and ground truth lengths differ")
        pred_segs = to_segments(pred)
        gt_segs = to_segments(gt)
        matched = _match_count(pred_segs, gt_segs, threshold)
        tp += matched
        fp += len(pred_segs) - matched
        fn += len(gt_segs) - matched
    return _f1_from_counts(tp, fp, fn)


def auroc(id_scores: np.ndarray, ood_scores: np.ndarray) -> float:
    """Probability that an in-distribution frame outscores an
    out-of-distribution frame, ties counting half.

    Computed from average ranks, which equals the area under the ROC curve
    without enumerating thresholds.
    """
    id_scores = np.asarray(id_scores, dtype=np.float64)
    ood_scores = np.asarray(ood_scores, dtype=np.float64)
    if id_scores.size == 0 or ood_scores.size == 0:
        raise ValueError("both score sets must be non-empty")
    pooled = np.concatenate([id_scores, ood_scores])
    ranks = rankdata(pooled)
    n_id = id_scores.size
    n_ood = ood_scores.size
    rank_sum = ranks[:n_id].sum()
    return float((rank_sum - n_id * (n_id + 1) / 2.0) / (n_id * n_ood))


def acc_ood(mapped_labels: np.ndarray, true_labels: np.ndarray) -> float:
    """Classification accuracy on correctly flagged novel frames, after
    cluster ids have been mapped to evaluation labels."""
    mapped_labels = np.asarray(mapped_labels)
    true_labels = np.asarray(true_labels)
    if mapped_labels.shape != true_labels.shape or mapped_labels.ndim != 1:
        raise ValueError("mapped and true labels must be equal-length 1-d arrays")
    if mapped_labels.size == 0:
        raise ValueError("no qualifying novel frames to score")
    return float((mapped_labels == true_labels).mean())


def h_score(auroc_value: float, acc_ood_value: float) -> float:
    """Harmonic mean of detection quality and novel-class accuracy."""
    for name, v in (("auroc", auroc_value), ("acc_ood", acc_ood_value)):
        if not 0.0 <= v <= 1.0:
            raise ValueError(f"{name} must be in [0, 1], got {v}")
    if auroc_value == 0.0 or acc_ood_value == 0.0:
        return 0.0
    return 2.0 / (1.0 / auroc_value + 1.0 / acc_ood_value)


def openness(num_train_classes: int, num_test_classes: int, num_target_classes: int) -> float:
    """How open the recognition problem is; 0 means closed world."""
    for name, v in (
        ("num_train_classes", num_train_classes),
        ("num_test_classes", num_test_classes),
        ("num_target_classes", num_target_classes),
    ):
        if v < 1:
            raise ValueError(f"{name} must be >= 1, got {v}")
    ratio = 2.0 * num_train_classes / (num_test_classes + num_target_classes)
    if ratio > 1.0:
        raise ValueError(
            "test plus target classes must number at least twice the training classes"
        )
    return float(1.0 - np.sqrt(ratio))


def split_openness(num_known: int, num_novel: int) -> float:
    """Openness when testing spans known plus novel classes while recognition
    targets only the known set."""
    return openness(num_known, num_known + num_novel, num_known)


UNKNOWN_LABEL = -1


def open_set_streams(
    known_pred: np.ndarray,
    is_known: np.ndarray,
    mapped_label: np.ndarray,
    gt: np.ndarray,
    known_classes: Sequence[int] | frozenset[int] | set[int],
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Build label streams for open-set accuracy.

    Returns (unified_pred, mapped_pred, unified_gt). In the unified streams
    every novel identity collapses to ``UNKNOWN_LABEL``; the mapped prediction
    stream keeps cluster-derived labels on frames flagged novel, to be scored
    against the raw ground truth.
    """
    known_pred = np.asarray(known_pred)
    is_known = np.asarray(is_known, dtype=bool)
    mapped_label = np.asarray(mapped_label)
    gt = np.asarray(gt)
    if not (known_pred.shape == is_known.shape == mapped_label.shape == gt.shape):
        raise ValueError("all streams must share one shape")
    known_mask = np.isin(gt, sorted(known_classes))
    unified_gt = np.where(known_mask, gt, UNKNOWN_LABEL)
    unified_pred = np.where(is_known, known_pred, UNKNOWN_LABEL)
    mapped_pred = np.where(is_known, known_pred, mapped_label)
    return unified_pred, mapped_pred, unified_gt


_PERCENT_FIELDS = (
    "acc_close",
    "acc_open",
    "acc_open_mapped",
    "f1_10",
    "f1_25",
    "f1_50",
    "auroc",
    "acc_ood",
    "h_score",
    "openness",
)


@dataclass
class MetricReport:
    """One evaluation scenario's scores.

    Metric fields hold fractions in [0, 1] and serialize as percentages;
    ``None`` marks a metric that does not apply to the scenario (written as
    n/a).
    """

    scenario: str
    num_sequences: int
    num_frames: int
    alpha: float | None = None
    acc_close: float | None = None
    acc_open: float | None = None
    acc_open_mapped: float | None = None
    f1_10: float | None = None
    f1_25: float | None = None
    f1_50: float | None = None
    auroc: float | None = None
    acc_ood: float | None = None
    h_score: float | None = None
    openness: float | None = None

    @staticmethod
    def field_names() -> list[str]:
        return [f.name for f in fields(MetricReport)]

    def format_value(self, name: str) -> str:
        value = getattr(self, name)
        if value is None:
            return "n/a"
        if name in _PERCENT_FIELDS:
            return f"{value * 100.0:.4f}"
        if isinstance(value, float):
            return f"{value:.6f}"
        return str(value)

    def to_text(self) -> str:
        return "".join(f"{name}: {self.format_value(name)}\n" for name in self.field_names())

    @classmethod
    def from_text(cls, text: str) -> "MetricReport":
        values: dict[str, object] = {}
        valid = set(cls.field_names())
        for raw in text.splitlines():
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, rest = line.partition(":")
            key = key.strip()
            rest = rest.strip()
            if not sep or key not in valid:
                raise ValueError(f"unknown report field {key!r}")
            if rest == "n/a":
                values[key] = None
            elif key == "scenario":
                values[key] = rest
            elif key in ("num_sequences", "num_frames"):
                values[key] = int(rest)
            elif key in _PERCENT_FIELDS:
                values[key] = float(rest) / 100.0
            else:
                values[key] = float(rest)
        missing = {"scenario", "num_sequences", "num_frames"} - values.keys()
        if missing:
            raise ValueError(f"report is missing fields: {sorted(missing)}")
        return cls(**values)  # type: ignore[arg-type]

    def to_csv_row(self) -> str:
        return ",".join(self.format_value(name) for name in self.field_names())

    @classmethod
    def csv_header(cls) -> str:
        return ",".join(cls.field_names())

    @classmethod
    def from_csv_row(cls, header: str, row: str) -> "MetricReport":
        names = header.split(",")
        cells = row.split(",")
        if len(names) != len(cells):
            raise ValueError("CSV row width does not match header")
        lines = "".join(f"{n}: {c}\n" for n, c in zip(names, cells))
        return cls.from_text(lines)
