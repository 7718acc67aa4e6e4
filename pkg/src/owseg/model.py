"""Full encoder-decoder model and batch assembly."""

from __future__ import annotations

import numpy as np
import torch
from torch import nn

from .config import ModelConfig
from .data import SkeletonGraph, SkeletonSequence
from .decoder import DecoderOutput, PyramidPoolingDecoder, TemporalUpsamplingDecoder
from .encoder import FeatureMap, PyramidEncoder, init_parameters


def padded_length(length: int) -> int:
    """Next multiple of 4 at or above ``length``."""
    return -(-length // 4) * 4


def assemble_batch(
    sequences: list[SkeletonSequence], dtype: torch.dtype = torch.float32
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Stack sequences into (coords, labels, mask) tensors.

    Every sequence is zero-padded symmetrically to the batch's common padded
    length; ``mask`` marks real frames and padded label slots hold -1.
    """
    if not sequences:
        raise ValueError("cannot assemble an empty batch")
    joints = {s.num_joints for s in sequences}
    if len(joints) != 1:
        raise ValueError(f"batch mixes joint counts: {sorted(joints)}")
    target = padded_length(max(s.num_frames for s in sequences))
    n = len(sequences)
    coords = torch.zeros((n, 3, target, joints.pop()), dtype=dtype)
    labels = torch.full((n, target), -1, dtype=torch.long)
    mask = torch.zeros((n, target), dtype=torch.bool)
    for i, seq in enumerate(sequences):
        start = (target - seq.num_frames) // 2
        stop = start + seq.num_frames
        coords[i, :, start:stop] = torch.from_numpy(seq.coords.copy()).to(dtype)
        labels[i, start:stop] = torch.from_numpy(seq.labels.copy()).long()
        mask[i, start:stop] = True
    return coords, labels, mask


def forward_in_length_groups(
    model: "SegmentationModel", sequences: list[SkeletonSequence]
) -> list[tuple[torch.Tensor, torch.Tensor, torch.Tensor]]:
    """Run inference over sequences grouped by equal frame count.

    The normalization layers derive their statistics from whatever shares a
    batch, so equal-length sequences are forwarded together: every frame in a
    group is normalized against the same population and per-frame scores stay
    comparable across sequences. Groups are visited in ascending length and
    preserve input order internally, so the output (one
    (logits (K, T), cluster_embedding (d, T), detector_embedding (d, T))
    triple per sequence, in input order) is deterministic.
    """
    results: list[tuple[torch.Tensor, torch.Tensor, torch.Tensor] | None]
    results = [None] * len(sequences)
    groups: dict[int, list[int]] = {}
    for idx, seq in enumerate(sequences):
        groups.setdefault(seq.num_frames, []).append(idx)
    with torch.no_grad():
        for length in sorted(groups):
            indices = groups[length]
            coords, _, mask = assemble_batch([sequences[i] for i in indices])
            out = model(coords)
            for row, idx in enumerate(indices):
                keep = mask[row]
                results[idx] = (
                    out.logits[row, :, keep],
                    out.cluster_embedding[row, :, keep],
                    out.detector_embedding[row, :, keep],
                )
    return results  # type: ignore[return-value]


class SegmentationModel(nn.Module):
    """Pyramid encoder plus one of the two decoder variants."""

    def __init__(self, graph: SkeletonGraph, num_known_classes: int, config: ModelConfig):
        super().__init__()
        config.validate()
        if num_known_classes < 1:
            raise ValueError("num_known_classes must be >= 1")
        self.config = config
        self.num_known_classes = num_known_classes
        self.encoder = PyramidEncoder(
            graph,
            in_channels=3,
            channel_plan=config.channel_plan,
            temporal_kernel=config.temporal_kernel,
        )
        decoder_cls = TemporalUpsamplingDecoder if config.decoder == "teu" else PyramidPoolingDecoder
        self.decoder = decoder_cls(
            config.channel_plan,
            config.attention_channels,
            config.cluster_embedding_dim,
            config.detector_embedding_dim,
            num_known_classes,
        )

    def encode(self, coords: torch.Tensor) -> tuple[FeatureMap, FeatureMap, FeatureMap]:
        return self.encoder(coords)

    def forward(self, coords: torch.Tensor) -> DecoderOutput:
        full, half, quarter = self.encoder(coords)
        output = self.decoder(full, half, quarter)
        output.validate(coords.shape[2])
        return output


def build_model(
    graph: SkeletonGraph, num_known_classes: int, config: ModelConfig, seed: int
) -> SegmentationModel:
    """Construct and deterministically initialize a model."""
    model = SegmentationModel(graph, num_known_classes, config)
    init_parameters(model, seed)
    return model
