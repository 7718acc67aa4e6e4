"""Open-world inference: closed-set recognition, confidence-threshold novelty
detection, K-means pseudo-labeling of novel frames, and assignment of pseudo
classes to evaluation labels."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .clustering import kmeans, map_clusters
from .data import SkeletonSequence
from .metrics import (
    MetricReport,
    acc_ood,
    auroc,
    corpus_f1_at_k,
    frame_accuracy,
    h_score,
    open_set_streams,
    split_openness,
)
from .model import SegmentationModel, forward_in_length_groups


def softmax_confidence(logits: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-frame argmax class index and max softmax probability.

    ``logits`` is (K, T). The shift by the per-frame max keeps the exponentials
    stable without moving the argmax.
    """
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 2:
        raise ValueError(f"logits must be (K, T), got shape {logits.shape}")
    if not np.isfinite(logits).all():
        raise ValueError("logits must be finite")
    shifted = logits - logits.max(axis=0, keepdims=True)
    exp = np.exp(shifted)
    probs = exp / exp.sum(axis=0, keepdims=True)
    pred = probs.argmax(axis=0)
    confidence = probs[pred, np.arange(probs.shape[1])]
    return pred.astype(np.int64), confidence


def recognize(logits: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Closed-set recognition over a batch of per-frame logits (N, K, T).

    Returns (class indices (N, T), confidences (N, T)); argmax ties go to the
    lowest class index.
    """
    logits = np.asarray(logits)
    if logits.ndim != 3:
        raise ValueError(f"logits must be (N, K, T), got shape {logits.shape}")
    preds = []
    confs = []
    for n in range(logits.shape[0]):
        p, c = softmax_confidence(logits[n])
        preds.append(p)
        confs.append(c)
    return np.stack(preds), np.stack(confs)


@dataclass(frozen=True)
class NoveltyDetector:
    """Confidence threshold with its calibration metadata."""

    alpha: float
    percentile: float
    num_calibration_frames: int

    def is_known(self, confidence: np.ndarray) -> np.ndarray:
        """A frame is known only when its confidence strictly exceeds alpha."""
        return np.asarray(confidence) > self.alpha


def calibrate_threshold(val_confidences: np.ndarray, percentile: float = 5.0) -> NoveltyDetector:
    """Set alpha at the nearest-rank lower percentile of in-distribution
    validation confidences.

    ``percentile`` must lie in (0, 50]: the threshold is meant to trim the low
    tail of known-class confidence, never its upper half.
    """
    confidences = np.asarray(val_confidences, dtype=np.float64).ravel()
    if confidences.size == 0:
        raise ValueError("cannot calibrate on an empty confidence set")
    if not 0.0 < percentile <= 50.0:
        raise ValueError(f"percentile must be in (0, 50], got {percentile}")
    ordered = np.sort(confidences)
    rank = math.ceil(percentile / 100.0 * ordered.size)
    alpha = float(ordered[max(rank, 1) - 1])
    return NoveltyDetector(alpha, percentile, int(confidences.size))


def detect(confidence: float | np.ndarray, detector: NoveltyDetector) -> bool | np.ndarray:
    """True (known) iff confidence strictly exceeds the threshold."""
    result = detector.is_known(np.asarray(confidence))
    return bool(result) if result.ndim == 0 else result


def cluster_novel(embeddings: np.ndarray, num_clusters: int, seed: int) -> np.ndarray:
    """Group novel-frame embeddings into pseudo-classes with seeded K-means."""
    embeddings = np.asarray(embeddings, dtype=np.float64)
    if embeddings.ndim != 2:
        raise ValueError(f"embeddings must be (frames, d), got shape {embeddings.shape}")
    if embeddings.shape[0] < num_clusters:
        raise ValueError(
            f"cannot form {num_clusters} clusters from {embeddings.shape[0]} novel frames"
        )
    labels, _ = kmeans(embeddings, num_clusters, seed)
    return labels


NO_LABEL = -1


@dataclass
class SequenceOutcome:
    """Per-frame open-world decisions for one sequence.

    ``cluster_id`` and ``mapped_label`` are ``NO_LABEL`` exactly where the
    frame was flagged known.
    """

    sequence_index: int
    subject_id: int
    gt: np.ndarray
    known_pred: np.ndarray
    confidence: np.ndarray
    is_known: np.ndarray
    cluster_id: np.ndarray
    mapped_label: np.ndarray


@dataclass
class PipelineResult:
    outcomes: list[SequenceOutcome]
    alpha: float
    cluster_mapping: dict[int, int]
    num_flagged_novel: int


def sequence_forward(
    model: SegmentationModel, sequence: SkeletonSequence
) -> tuple[np.ndarray, np.ndarray]:
    """Run one sequence through the model, dropping padded frames.

    Returns (logits (K, T), detector embedding (T, d)). A lone sequence is its
    own normalization population; when scoring a corpus, prefer the grouped
    forward used by :func:`run_pipeline` so scores share statistics.
    """
    logits_t, _, detector_t = forward_in_length_groups(model, [sequence])[0]
    return logits_t.numpy(), detector_t.numpy().T


def run_pipeline(
    model: SegmentationModel,
    detector: NoveltyDetector,
    sequences: Sequence[SkeletonSequence],
    num_clusters: int,
    *,
    class_order: Sequence[int],
    known_classes: Sequence[int] | frozenset[int],
    seed: int = 0,
) -> PipelineResult:
    """Recognize every frame, flag low-confidence frames as novel, cluster the
    flagged frames into pseudo-classes, and map those to evaluation labels.

    ``class_order`` gives the dataset class id behind each classifier output
    index. The cluster-to-label assignment is fitted on flagged frames whose
    ground truth really is novel; it exists for evaluation only.
    """
    if not sequences:
        raise ValueError("no sequences to process")
    model.eval()
    class_order = np.asarray(list(class_order), dtype=np.int64)
    known_set = set(int(c) for c in known_classes)
    outcomes: list[SequenceOutcome] = []
    flagged_embeddings: list[np.ndarray] = []
    flagged_where: list[tuple[int, np.ndarray]] = []
    forwarded = forward_in_length_groups(model, list(sequences))
    for idx, seq in enumerate(sequences):
        logits_t, _, detector_t = forwarded[idx]
        logits = logits_t.numpy()
        embedding = detector_t.numpy().T
        pred_idx, confidence = softmax_confidence(logits)
        known_flags = detector.is_known(confidence)
        t = confidence.shape[0]
        outcome = SequenceOutcome(
            sequence_index=idx,
            subject_id=seq.subject_id,
            gt=seq.labels.astype(np.int64),
            known_pred=class_order[pred_idx],
            confidence=confidence,
            is_known=known_flags,
            cluster_id=np.full(t, NO_LABEL, dtype=np.int64),
            mapped_label=np.full(t, NO_LABEL, dtype=np.int64),
        )
        outcomes.append(outcome)
        novel_at = np.flatnonzero(~known_flags)
        if novel_at.size:
            flagged_embeddings.append(embedding[novel_at])
            flagged_where.append((idx, novel_at))

    mapping: dict[int, int] = {}
    total_flagged = sum(e.shape[0] for e in flagged_embeddings)
    if total_flagged > 0:
        stacked = np.concatenate(flagged_embeddings, axis=0)
        effective = min(num_clusters, total_flagged)
        cluster_ids, _ = kmeans(stacked, effective, seed)
        offset = 0
        for idx, novel_at in flagged_where:
            outcomes[idx].cluster_id[novel_at] = cluster_ids[offset : offset + novel_at.size]
            offset += novel_at.size
        flagged_gt = np.concatenate([outcomes[i].gt[at] for i, at in flagged_where])
        truly_novel = ~np.isin(flagged_gt, sorted(known_set))
        if truly_novel.any():
            mapping = map_clusters(cluster_ids[truly_novel], flagged_gt[truly_novel])
        fresh = int(max(max(known_set, default=0), int(flagged_gt.max()))) + 1
        for c in np.unique(cluster_ids):
            if int(c) not in mapping:
                mapping[int(c)] = fresh
                fresh += 1
        for idx, novel_at in flagged_where:
            ids = outcomes[idx].cluster_id[novel_at]
            outcomes[idx].mapped_label[novel_at] = np.array(
                [mapping[int(c)] for c in ids], dtype=np.int64
            )
    return PipelineResult(outcomes, detector.alpha, mapping, total_flagged)


def collect_validation_confidences(
    model: SegmentationModel, sequences: Sequence[SkeletonSequence]
) -> np.ndarray:
    """Max softmax probability of every frame in the given sequences."""
    if not sequences:
        raise ValueError("no sequences to calibrate on")
    model.eval()
    confidences = []
    for logits_t, _, _ in forward_in_length_groups(model, list(sequences)):
        _, conf = softmax_confidence(logits_t.numpy())
        confidences.append(conf)
    return np.concatenate(confidences)


def evaluate_outcomes(
    outcomes: Sequence[SequenceOutcome],
    known_classes: Sequence[int] | frozenset[int],
    scenario: str,
    *,
    alpha: float | None = None,
    num_novel_classes: int = 0,
) -> MetricReport:
    """Score pipeline outcomes under one of the three deployment scenarios.

    ``closed`` ignores the detector and scores raw recognition. ``open``
    reports the full suite with every novel identity collapsed to a single
    unknown label for the headline open accuracy. ``ood`` scores novel-only
    data, where open accuracy means flagging the frame and mapping it to the
    right novel class.
    """
    if scenario not in ("closed", "open", "ood"):
        raise ValueError(f"unknown scenario {scenario!r}")
    if not outcomes:
        raise ValueError(f"scenario {scenario!r} has no sequences to evaluate")
    known_sorted = sorted(int(c) for c in known_classes)
    gt_all = np.concatenate([o.gt for o in outcomes])
    pred_all = np.concatenate([o.known_pred for o in outcomes])
    conf_all = np.concatenate([o.confidence for o in outcomes])
    flag_all = np.concatenate([o.is_known for o in outcomes])
    mapped_all = np.concatenate([o.mapped_label for o in outcomes])
    known_mask = np.isin(gt_all, known_sorted)
    report = MetricReport(
        scenario=scenario,
        num_sequences=len(outcomes),
        num_frames=int(gt_all.size),
        alpha=alpha,
    )

    if scenario == "closed":
        report.acc_close = frame_accuracy(pred_all, gt_all)
        preds = [o.known_pred for o in outcomes]
        gts = [o.gt for o in outcomes]
        report.f1_10 = corpus_f1_at_k(preds, gts, 10)
        report.f1_25 = corpus_f1_at_k(preds, gts, 25)
        report.f1_50 = corpus_f1_at_k(preds, gts, 50)
        report.openness = 0.0
        return report

    unified_preds = []
    mapped_preds = []
    unified_gts = []
    for o in outcomes:
        u_pred, m_pred, u_gt = open_set_streams(
            o.known_pred, o.is_known, o.mapped_label, o.gt, known_sorted
        )
        unified_preds.append(u_pred)
        mapped_preds.append(m_pred)
        unified_gts.append(u_gt)
    unified_pred_all = np.concatenate(unified_preds)
    mapped_pred_all = np.concatenate(mapped_preds)
    unified_gt_all = np.concatenate(unified_gts)

    report.openness = split_openness(len(known_sorted), num_novel_classes)
    report.acc_open_mapped = frame_accuracy(mapped_pred_all, gt_all)
    qualifying = ~flag_all & ~known_mask
    if qualifying.any():
        report.acc_ood = acc_ood(mapped_all[qualifying], gt_all[qualifying])

    if scenario == "ood":
        report.acc_open = report.acc_open_mapped
        report.f1_10 = corpus_f1_at_k(mapped_preds, [o.gt for o in outcomes], 10)
        report.f1_25 = corpus_f1_at_k(mapped_preds, [o.gt for o in outcomes], 25)
        report.f1_50 = corpus_f1_at_k(mapped_preds, [o.gt for o in outcomes], 50)
        return report

    if known_mask.any():
        report.acc_close = frame_accuracy(pred_all[known_mask], gt_all[known_mask])
    report.acc_open = frame_accuracy(unified_pred_all, unified_gt_all)
    report.f1_10 = corpus_f1_at_k(unified_preds, unified_gts, 10)
    report.f1_25 = corpus_f1_at_k(unified_preds, unified_gts, 25)
    report.f1_50 = corpus_f1_at_k(unified_preds, unified_gts, 50)
    if known_mask.any() and (~known_mask).any():
        report.auroc = auroc(conf_all[known_mask], conf_all[~known_mask])
        if report.acc_ood is not None:
            report.h_score = h_score(report.auroc, report.acc_ood)
    return report


def outcomes_to_text(outcomes: Sequence[SequenceOutcome]) -> str:
    """Line-delimited per-frame export of the open-world decisions."""
    lines = ["sequence,frame,known_pred,confidence,is_known,cluster_id,mapped_label"]
    for o in outcomes:
        for t in range(o.gt.size):
            lines.append(
                f"{o.sequence_index},{t},{int(o.known_pred[t])},{o.confidence[t]:.6f},"
                f"{'true' if o.is_known[t] else 'false'},{int(o.cluster_id[t])},"
                f"{int(o.mapped_label[t])}"
            )
    return "\n".join(lines) + "\n"
