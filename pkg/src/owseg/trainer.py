"""Deterministic training loop: Nesterov SGD, exponential learning-rate decay,
optional Mixup and clustering loss, per-epoch validation, best-checkpoint
selection."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
import torch

from .checkpoint import Checkpoint
from .config import LossConfig, TrainConfig
from .data import OpenWorldSplit, SkeletonGraph, SkeletonSequence
from .errors import TrainingError
from .losses import (
    PrototypeMap,
    masked_cross_entropy,
    one_hot_labels,
    sample_mixup_lambdas,
    total_loss,
    update_class_means,
)
from .model import (
    SegmentationModel,
    assemble_batch,
    build_model,
    forward_in_length_groups,
)


def sgd_step(
    params: dict[str, torch.Tensor],
    grads: dict[str, torch.Tensor],
    velocity: dict[str, torch.Tensor],
    lr: float,
    momentum: float,
    weight_decay: float,
) -> tuple[dict[str, torch.Tensor], dict[str, torch.Tensor]]:
    """One Nesterov momentum update over a named parameter set.

    With d = lr * (g + wd * theta): v' = mu * v - d, theta' = theta + mu * v' - d.
    Parameters are visited in sorted name order so accumulation is bitwise
    reproducible.
    """
    new_params: dict[str, torch.Tensor] = {}
    new_velocity: dict[str, torch.Tensor] = {}
    for name in sorted(params):
        theta = params[name]
        grad = grads[name]
        if grad.shape != theta.shape or velocity[name].shape != theta.shape:
            raise ValueError(f"misaligned shapes for parameter {name}")
        if not torch.isfinite(grad).all():
            raise FloatingPointError(f"non-finite gradient for parameter {name}")
        d = lr * (grad + weight_decay * theta)
        vel = momentum * velocity[name] - d
        new_params[name] = theta + momentum * vel - d
        new_velocity[name] = vel
    return new_params, new_velocity


def gather_class_embeddings(
    embeddings: torch.Tensor, labels: torch.Tensor, mask: torch.Tensor
) -> dict[int, torch.Tensor]:
    """Split (N, d, T) frame embeddings into per-class (frames, d) blocks."""
    flat = embeddings.permute(0, 2, 1)[mask]
    flat_labels = labels[mask]
    out: dict[int, torch.Tensor] = {}
    for class_id in sorted(set(int(c) for c in flat_labels.tolist())):
        out[class_id] = flat[flat_labels == class_id]
    return out


@dataclass
class EpochStats:
    epoch: int
    lr: float
    train_loss: float
    ce: float
    l_intra: float
    l_inter: float
    val_acc: float
    val_loss: float


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    history: list[EpochStats]

    def log_csv(self) -> str:
        lines = ["epoch,lr,train_loss,ce,l_intra,l_inter,val_acc"]
        for s in self.history:
            lines.append(
                f"{s.epoch},{s.lr!r},{s.train_loss!r},{s.ce!r},"
                f"{s.l_intra!r},{s.l_inter!r},{s.val_acc!r}"
            )
        return "\n".join(lines) + "\n"


def _remap_labels(labels: torch.Tensor, class_to_index: dict[int, int]) -> torch.Tensor:
    out = torch.full_like(labels, -1)
    for class_id, index in class_to_index.items():
        out[labels == class_id] = index
    return out


def _validate(
    model: SegmentationModel,
    sequences: list[SkeletonSequence],
    class_to_index: dict[int, int],
) -> tuple[float, float]:
    model.eval()
    correct = 0
    total = 0
    loss_sum = 0.0
    forwarded = forward_in_length_groups(model, sequences)
    for seq, (logits, _, _) in zip(sequences, forwarded):
        targets = _remap_labels(
            torch.from_numpy(seq.labels.copy()).long(), class_to_index
        )
        ce = masked_cross_entropy(
            logits.unsqueeze(0), targets.unsqueeze(0), torch.ones(1, targets.numel(), dtype=torch.bool)
        )
        frames = targets.numel()
        correct += int((logits.argmax(dim=0) == targets).sum())
        total += frames
        loss_sum += float(ce) * frames
    return correct / total, loss_sum / total


def _forward_step(
    model: SegmentationModel,
    config: TrainConfig,
    loss_cfg: LossConfig,
    coords: torch.Tensor,
    targets: torch.Tensor,
    mask: torch.Tensor,
    prototypes: PrototypeMap,
    rng: np.random.Generator,
) -> tuple[object, dict[int, torch.Tensor], PrototypeMap, object]:
    """Run the forward pass(es) for one batch and compute the loss.

    Classes appearing for the first time seed their prototype from the clean
    batch mean before the loss sees them. Returns the clean decoder output
    (None when the clustering terms are off), the per-class embedding rows,
    the possibly extended prototype map, and the loss breakdown.
    """
    n = coords.shape[0]
    clean_out = None
    class_rows: dict[int, torch.Tensor] = {}
    if config.tc_loss_enabled:
        clean_out = model(coords)
        class_rows = gather_class_embeddings(
            clean_out.cluster_embedding.detach(), targets, mask
        )
        unseen = {
            c: rows for c, rows in class_rows.items()
            if c not in prototypes or not prototypes[c].initialized
        }
        if unseen:
            prototypes = update_class_means(prototypes, unseen, gamma=0.0)

    if config.mixup_enabled:
        perm = torch.from_numpy(rng.permutation(n))
        lam = torch.from_numpy(
            sample_mixup_lambdas(rng, config.loss.mixup_alpha, n)
        ).to(coords.dtype)
        mixed_coords = lam.view(n, 1, 1, 1) * coords + (1 - lam.view(n, 1, 1, 1)) * coords[perm]
        soft = one_hot_labels(targets, model.num_known_classes)
        mixed_labels = lam.view(n, 1, 1) * soft + (1 - lam.view(n, 1, 1)) * soft[perm]
        mixed_mask = mask & mask[perm]
        mixed_out = model(mixed_coords)
        loss = total_loss(
            mixed_out.logits,
            mixed_labels,
            clean_out.cluster_embedding if clean_out is not None else None,
            prototypes,
            loss_cfg,
            mask=mixed_mask,
            embedding_labels=targets,
            embedding_mask=mask,
        )
    else:
        if clean_out is None:
            clean_out = model(coords)
        loss = total_loss(
            clean_out.logits,
            targets,
            clean_out.cluster_embedding if config.tc_loss_enabled else None,
            prototypes,
            loss_cfg,
            mask=mask,
        )
    return clean_out, class_rows, prototypes, loss


def train(split: OpenWorldSplit, config: TrainConfig) -> TrainResult:
    """Run the full seeded training loop and return the best checkpoint.

    Selection maximizes validation frame accuracy, breaking ties by lower
    validation loss (earliest epoch on exact ties). A non-finite loss or
    gradient aborts with the offending epoch and step named.
    """
    config.validate()
    if not split.train or not split.val:
        raise ValueError("train and validation sets must be non-empty")
    torch.set_num_threads(1)
    rng = np.random.default_rng(config.seed)
    known = sorted(split.known_classes)
    class_to_index = {c: i for i, c in enumerate(known)}
    joints = split.train[0].num_joints
    graph = SkeletonGraph.default(joints)
    model = build_model(graph, len(known), config.model, seed=config.seed)

    loss_cfg = config.loss if config.tc_loss_enabled else replace(config.loss, beta=0.0)
    named = dict(model.named_parameters())
    velocity = {n: torch.zeros_like(p) for n, p in named.items()}
    prototypes: PrototypeMap = {}
    history: list[EpochStats] = []
    best: tuple[float, float] | None = None
    best_state: tuple[dict[str, torch.Tensor], PrototypeMap, int, float, float] | None = None

    lengths = np.array([seq.num_frames for seq in split.train])
    for epoch in range(config.epochs):
        lr = config.lr0 * config.lr_decay**epoch
        order = rng.permutation(len(split.train))
        # Batch normalization statistics are computed over every frame in the
        # batch, padding included, so batches are bucketed by length: shuffled
        # indices are stably sorted by sequence length, chunked, and the chunk
        # order reshuffled. Equal-length sequences then share a batch and no
        # padded frames dilute the statistics.
        order = order[np.argsort(lengths[order], kind="stable")]
        batches = [
            order[s : s + config.batch_size]
            for s in range(0, len(order), config.batch_size)
        ]
        batch_order = rng.permutation(len(batches))
        model.train()
        sums = {"total": 0.0, "ce": 0.0, "intra": 0.0, "inter": 0.0}
        steps = 0
        for batch_pos in batch_order:
            batch_ids = batches[batch_pos]
            batch = [split.train[i] for i in batch_ids]
            coords, raw_labels, mask = assemble_batch(batch)
            targets = _remap_labels(raw_labels, class_to_index)
            try:
                clean_out, class_rows, prototypes, loss = _forward_step(
                    model, config, loss_cfg, coords, targets, mask, prototypes, rng
                )
            except FloatingPointError as exc:
                raise TrainingError(f"at epoch {epoch}, step {steps}: {exc}") from exc
            if not torch.isfinite(loss.total):
                raise TrainingError(f"non-finite loss at epoch {epoch}, step {steps}")
            model.zero_grad(set_to_none=True)
            loss.total.backward()
            grads = {
                n: (p.grad if p.grad is not None else torch.zeros_like(p))
                for n, p in named.items()
            }
            try:
                new_params, velocity = sgd_step(
                    {n: p.detach() for n, p in named.items()},
                    grads,
                    velocity,
                    lr,
                    config.momentum,
                    config.weight_decay,
                )
            except FloatingPointError as exc:
                raise TrainingError(f"at epoch {epoch}, step {steps}: {exc}") from exc
            with torch.no_grad():
                for n_, p in named.items():
                    p.copy_(new_params[n_])

            if config.tc_loss_enabled and class_rows:
                prototypes = update_class_means(prototypes, class_rows, config.loss.gamma)

            sums["total"] += float(loss.total.detach())
            sums["ce"] += float(loss.cross_entropy.detach())
            sums["intra"] += float(loss.intra.detach())
            sums["inter"] += float(loss.inter.detach())
            steps += 1

        val_acc, val_loss = _validate(model, list(split.val), class_to_index)
        history.append(
            EpochStats(
                epoch=epoch,
                lr=lr,
                train_loss=sums["total"] / steps,
                ce=sums["ce"] / steps,
                l_intra=sums["intra"] / steps,
                l_inter=sums["inter"] / steps,
                val_acc=val_acc,
                val_loss=val_loss,
            )
        )
        if best is None or val_acc > best[0] or (val_acc == best[0] and val_loss < best[1]):
            best = (val_acc, val_loss)
            best_state = (
                {n: p.detach().clone() for n, p in named.items()},
                {c: replace(p, mean=p.mean.clone()) for c, p in prototypes.items()},
                epoch,
                val_acc,
                val_loss,
            )

    assert best_state is not None
    params, protos, best_epoch, val_acc, val_loss = best_state
    checkpoint = Checkpoint(
        params=params,
        prototypes=protos,
        epoch=best_epoch,
        val_acc=val_acc,
        val_loss=val_loss,
        config=config,
        known_classes=tuple(known),
        joints=joints,
    )
    return TrainResult(checkpoint=checkpoint, history=history)
