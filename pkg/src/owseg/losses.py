"""Training objective: masked cross-entropy, the temporal clustering terms
(momentum class means, intra-class compactness, inter-class repulsion), and
Mixup interpolation.

Class means are running statistics, never gradient targets: the trainer
detaches embeddings before updating them, and the losses treat the means as
constants within a step.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Mapping

import numpy as np
import torch

from .config import LossConfig
from .errors import PrototypeStateError


@dataclass
class ClassPrototype:
    """Momentum-averaged mean embedding of one class."""

    class_id: int
    mean: torch.Tensor
    initialized: bool = True


PrototypeMap = dict[int, ClassPrototype]


def update_class_means(
    prototypes: Mapping[int, ClassPrototype],
    batch_embeddings: Mapping[int, torch.Tensor],
    gamma: float,
) -> PrototypeMap:
    """Momentum update of the per-class means from one batch.

    ``batch_embeddings`` maps class id -> (frames, d) embedding rows for that
    class. Classes absent from the batch keep their prototype; classes seen
    for the first time are set directly to the batch mean.
    """
    if not 0.0 <= gamma < 1.0:
        raise ValueError(f"gamma must be in [0, 1), got {gamma}")
    updated: PrototypeMap = dict(prototypes)
    for class_id, rows in sorted(batch_embeddings.items()):
        if rows.ndim != 2 or rows.shape[0] == 0:
            raise ValueError(f"class {class_id}: expected a non-empty (frames, d) tensor")
        batch_mean = rows.detach().mean(dim=0)
        existing = updated.get(class_id)
        if existing is not None and existing.mean.shape != batch_mean.shape:
            raise ValueError(
                f"class {class_id}: embedding dim {batch_mean.shape[0]} != "
                f"prototype dim {existing.mean.shape[0]}"
            )
        if existing is None or not existing.initialized or gamma == 0.0:
            mean = batch_mean.clone()
        else:
            # old + (1-gamma)(batch - old) keeps an unchanged batch mean an
            # exact fixed point in floating point.
            mean = existing.mean + (1.0 - gamma) * (batch_mean - existing.mean)
        updated[class_id] = ClassPrototype(class_id, mean, initialized=True)
    return updated


def intra_loss(
    embeddings: torch.Tensor, labels: torch.Tensor, prototypes: Mapping[int, ClassPrototype]
) -> torch.Tensor:
    """Mean squared deviation of frame embeddings from their class mean,
    averaged per class and then over the classes present."""
    if embeddings.ndim != 2 or embeddings.shape[0] != labels.shape[0]:
        raise ValueError("embeddings must be (frames, d) aligned with labels")
    class_ids = sorted(set(int(c) for c in labels.tolist()))
    if not class_ids:
        raise ValueError("no frames to evaluate")
    per_class = []
    for class_id in class_ids:
        proto = prototypes.get(class_id)
        if proto is None or not proto.initialized:
            raise PrototypeStateError(f"class {class_id} has no initialized prototype")
        rows = embeddings[labels == class_id]
        per_class.append(((rows - proto.mean) ** 2).sum(dim=1).mean())
    return torch.stack(per_class).mean()


def inter_loss(
    prototypes: Mapping[int, ClassPrototype] | list[torch.Tensor], delta: float
) -> torch.Tensor:
    """Inverse squared-distance repulsion between class means over ordered
    pairs, scaled by 1/N. Warns and returns 0 when fewer than two means exist."""
    if delta <= 0:
        raise ValueError(f"delta must be > 0, got {delta}")
    if isinstance(prototypes, Mapping):
        means = [p.mean for _, p in sorted(prototypes.items()) if p.initialized]
    else:
        means = list(prototypes)
    if len(means) < 2:
        warnings.warn("inter-class loss needs >= 2 class means; returning 0", stacklevel=2)
        zero = torch.zeros(())
        return zero if not means else zero.to(means[0].dtype)
    stacked = torch.stack(means)
    sq_dist = ((stacked[:, None, :] - stacked[None, :, :]) ** 2).sum(dim=2)
    n = len(means)
    off_diagonal = ~torch.eye(n, dtype=torch.bool)
    return (1.0 / (sq_dist[off_diagonal] + delta)).sum() / n


@dataclass
class LossBreakdown:
    """Scalar loss terms; ``total`` carries the autograd graph."""

    total: torch.Tensor
    cross_entropy: torch.Tensor
    intra: torch.Tensor
    inter: torch.Tensor


def masked_cross_entropy(
    logits: torch.Tensor, labels: torch.Tensor, mask: torch.Tensor | None = None
) -> torch.Tensor:
    """Frame-averaged cross-entropy over unmasked frames.

    ``labels`` is either (N, T) integer classes (padding entries -1 must be
    masked) or (N, K, T) soft rows from Mixup.
    """
    if logits.ndim != 3:
        raise ValueError(f"logits must be (N, K, T), got shape {tuple(logits.shape)}")
    n, k, t = logits.shape
    if mask is None:
        mask = torch.ones((n, t), dtype=torch.bool, device=logits.device)
    if not mask.any():
        raise ValueError("all frames are masked out")
    log_probs = torch.log_softmax(logits, dim=1)
    if labels.ndim == 2:
        safe = labels.clamp(min=0)
        picked = log_probs.gather(1, safe.unsqueeze(1)).squeeze(1)
        return -(picked[mask]).mean()
    if labels.shape != logits.shape:
        raise ValueError(f"soft labels shape {tuple(labels.shape)} != logits shape {tuple(logits.shape)}")
    per_frame = -(labels * log_probs).sum(dim=1)
    return per_frame[mask].mean()


def total_loss(
    logits: torch.Tensor,
    labels: torch.Tensor,
    frame_embeddings: torch.Tensor | None,
    prototypes: Mapping[int, ClassPrototype] | None,
    config: LossConfig,
    mask: torch.Tensor | None = None,
    embedding_labels: torch.Tensor | None = None,
    embedding_mask: torch.Tensor | None = None,
) -> LossBreakdown:
    """Cross-entropy plus beta times the clustering terms.

    The clustering terms use ``frame_embeddings`` of shape (N, d, T) with
    integer ``embedding_labels``; these default to the classification stream
    but are supplied separately when Mixup makes the classification labels
    soft. With beta = 0 or no embeddings the clustering terms are skipped.
    """
    ce = masked_cross_entropy(logits, labels, mask)
    zero = torch.zeros((), dtype=ce.dtype)
    if config.beta == 0.0 or frame_embeddings is None:
        return LossBreakdown(ce, ce, zero, zero)
    if prototypes is None:
        raise ValueError("clustering terms require prototypes")
    same_stream = embedding_labels is None
    if same_stream:
        if labels.ndim != 2:
            raise ValueError("soft classification labels need explicit embedding_labels")
        embedding_labels = labels
    if embedding_mask is None:
        if same_stream and mask is not None:
            embedding_mask = mask
        else:
            embedding_mask = torch.ones_like(embedding_labels, dtype=torch.bool)
    if not embedding_mask.any():
        raise ValueError("all embedding frames are masked out")
    flat = frame_embeddings.permute(0, 2, 1)[embedding_mask]
    flat_labels = embedding_labels[embedding_mask]
    intra = intra_loss(flat, flat_labels, prototypes)
    present = {c: p for c, p in prototypes.items() if int(c) in set(flat_labels.tolist())}
    if len(present) >= 2:
        inter = inter_loss(present, config.delta)
    else:
        inter = zero
    total = ce + config.beta * (intra + inter)
    return LossBreakdown(total, ce, intra, inter)


def one_hot_labels(labels: torch.Tensor, num_classes: int) -> torch.Tensor:
    """(N, T) integer labels -> (N, K, T) one-hot floats; -1 padding becomes
    an all-zero row (mask it out of any loss)."""
    n, t = labels.shape
    out = torch.zeros((n, num_classes, t), dtype=torch.float32, device=labels.device)
    valid = labels >= 0
    idx = labels.clamp(min=0).unsqueeze(1)
    out.scatter_(1, idx, 1.0)
    out = out * valid.unsqueeze(1)
    return out


def mixup_pair(x_i, y_i, x_j, y_j, lam: float):
    """Convex combination of two samples and their (soft) label tensors."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must be in [0, 1], got {lam}")
    if x_i.shape != x_j.shape:
        raise ValueError(f"input shapes differ: {tuple(x_i.shape)} vs {tuple(x_j.shape)}")
    if y_i.shape != y_j.shape:
        raise ValueError(f"label shapes differ: {tuple(y_i.shape)} vs {tuple(y_j.shape)}")
    mixed_x = lam * x_i + (1.0 - lam) * x_j
    mixed_y = lam * y_i + (1.0 - lam) * y_j
    return mixed_x, mixed_y


def sample_mixup_lambdas(rng: np.random.Generator, alpha: float, count: int) -> np.ndarray:
    """Draw Mixup interpolation weights from Beta(alpha, alpha)."""
    if alpha <= 0:
        raise ValueError(f"alpha must be > 0, got {alpha}")
    return rng.beta(alpha, alpha, size=count)
