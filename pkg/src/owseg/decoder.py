"""Decoders that turn the encoder pyramid into per-frame logits and embeddings.

Two variants share the pyramid-pooling head:

* :class:`TemporalUpsamplingDecoder`: dual pathway. The downsampling path
  gates a value map with a temporal softmax attention map at quarter rate;
  the upsampling path rebuilds a full-rate detail map enriched with the
  pooled value map; the two are fused by scaled dot-product cross-attention
  (full-rate queries, quarter-rate keys/values).
* :class:`PyramidPoolingDecoder`: baseline without the attention pathways,
  the upsampled pyramid is merged by a 1x1 convolution and fed to the head.

Both emit a :class:`DecoderOutput` with classification logits, a clustering
embedding, and a novelty-detection embedding, all at the padded input rate.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .encoder import FeatureMap


@dataclass
class DecoderOutput:
    """Per-frame decoder products for a batch.

    logits: (N, num_known_classes, T); cluster_embedding: (N, C_f, T) feeds
    the clustering loss; detector_embedding: (N, C_i, T) feeds novelty
    detection and pseudo-class clustering.
    """

    logits: torch.Tensor
    cluster_embedding: torch.Tensor
    detector_embedding: torch.Tensor

    def validate(self, padded_length: int) -> None:
        for name in ("logits", "cluster_embedding", "detector_embedding"):
            tensor = getattr(self, name)
            if tensor.shape[-1] != padded_length:
                raise ValueError(f"{name} length {tensor.shape[-1]} != padded length {padded_length}")
            if not torch.isfinite(tensor).all():
                raise ValueError(f"{name} contains non-finite values")


def temporal_resample(x: torch.Tensor, length: int) -> torch.Tensor:
    """Nearest-neighbor resampling along the time axis of an (N, C, T, V) map."""
    source = x.shape[2]
    if source == length:
        return x
    index = torch.div(
        torch.arange(length, device=x.device) * source, length, rounding_mode="floor"
    )
    return x.index_select(2, index)


def _check_pyramid(full: FeatureMap, half: FeatureMap, quarter: FeatureMap) -> None:
    joints = {m.data.shape[3] for m in (full, half, quarter)}
    if len(joints) != 1:
        raise ValueError(f"pyramid levels disagree on joint count: {sorted(joints)}")
    if (full.stride, half.stride, quarter.stride) != (1, 2, 4):
        raise ValueError("pyramid must be (stride 1, stride 2, stride 4)")


class TemporalPyramidHead(nn.Module):
    """Hierarchical temporal pooling plus the projection/classification heads.

    Pool the input over 1, 2, and 4 equal time bins, broadcast each level back
    to full length, concatenate with the input along channels, reduce over the
    joint axis, then project to the two embeddings and the class logits.
    """

    LEVELS = (1, 2, 4)

    def __init__(self, in_channels: int, cluster_dim: int, detector_dim: int, num_classes: int):
        super().__init__()
        stacked = in_channels * (len(self.LEVELS) + 1)
        self.cluster_proj = nn.Conv1d(stacked, cluster_dim, kernel_size=1)
        self.detector_proj = nn.Conv1d(stacked, detector_dim, kernel_size=1)
        self.classifier = nn.Conv1d(detector_dim, num_classes, kernel_size=1)

    def forward(self, feature_map: torch.Tensor) -> DecoderOutput:
        length = feature_map.shape[2]
        if length < 4:
            raise ValueError(f"pyramid pooling undefined for T={length} < 4")
        if length % 4 != 0:
            raise RuntimeError(f"padded length {length} not divisible by 4")
        n, channels, _, joints = feature_map.shape
        pooled = []
        for level in self.LEVELS:
            bins = feature_map.view(n, channels, level, length // level, joints)
            means = bins.mean(dim=3, keepdim=True)
            pooled.append(means.expand_as(bins).reshape(n, channels, length, joints))
        stacked = torch.cat(pooled + [feature_map], dim=1)
        per_frame = stacked.mean(dim=3)
        cluster_embedding = self.cluster_proj(per_frame)
        detector_embedding = self.detector_proj(per_frame)
        logits = self.classifier(detector_embedding)
        return DecoderOutput(logits, cluster_embedding, detector_embedding)


class TemporalUpsamplingDecoder(nn.Module):
    def __init__(
        self,
        channel_plan: tuple[int, int, int],
        attention_channels: int,
        cluster_dim: int,
        detector_dim: int,
        num_classes: int,
    ):
        super().__init__()
        merged = sum(channel_plan)
        self.attention_channels = attention_channels
        self.attn_conv = nn.Conv2d(merged, attention_channels, kernel_size=1)
        self.value_conv = nn.Conv2d(merged, attention_channels, kernel_size=1)
        self.detail_conv = nn.Conv2d(merged, attention_channels, kernel_size=1)
        self.refine_conv = nn.Conv2d(attention_channels, attention_channels, kernel_size=1)
        self.head = TemporalPyramidHead(2 * attention_channels, cluster_dim, detector_dim, num_classes)

    def downsampling_path(
        self, full: FeatureMap, half: FeatureMap, quarter: FeatureMap
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Quarter-rate context path: gate = softmax over time of one 1x1 map,
        applied elementwise to a second. Returns (context, value)."""
        _check_pyramid(full, half, quarter)
        length = quarter.data.shape[2]
        merged = torch.cat(
            [
                temporal_resample(full.data, length),
                temporal_resample(half.data, length),
                quarter.data,
            ],
            dim=1,
        )
        gate = torch.softmax(self.attn_conv(merged), dim=2)
        value = self.value_conv(merged)
        return gate * value, value

    def upsampling_path(
        self, full: FeatureMap, half: FeatureMap, quarter: FeatureMap, value: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Full-rate detail path. The value map is averaged over time,
        replicated to full rate, added to the detail map, then refined.
        Returns (detail, refined_detail)."""
        _check_pyramid(full, half, quarter)
        length = full.data.shape[2]
        merged = torch.cat(
            [
                full.data,
                temporal_resample(half.data, length),
                temporal_resample(quarter.data, length),
            ],
            dim=1,
        )
        detail = self.detail_conv(merged)
        pooled = value.mean(dim=2, keepdim=True).expand(-1, -1, length, -1)
        refined = self.refine_conv(detail + pooled)
        return detail, refined

    def fuse(
        self, context: torch.Tensor, refined_detail: torch.Tensor, detail: torch.Tensor
    ) -> torch.Tensor:
        """Cross-attention: queries from the full-rate refined detail map,
        keys/values from the quarter-rate context map, independently per
        sample and joint; concatenated channel-wise with the detail map."""
        scale = self.attention_channels ** -0.5
        scores = torch.einsum("nctv,ncsv->ntsv", refined_detail, context) * scale
        if not torch.isfinite(scores).all():
            raise FloatingPointError("non-finite attention scores; decoder inputs must be finite")
        weights = torch.softmax(scores, dim=2)
        attended = torch.einsum("ntsv,ncsv->nctv", weights, context)
        return torch.cat([attended, detail], dim=1)

    def forward(self, full: FeatureMap, half: FeatureMap, quarter: FeatureMap) -> DecoderOutput:
        context, value = self.downsampling_path(full, half, quarter)
        detail, refined = self.upsampling_path(full, half, quarter, value)
        fused = self.fuse(context, refined, detail)
        return self.head(fused)


class PyramidPoolingDecoder(nn.Module):
    def __init__(
        self,
        channel_plan: tuple[int, int, int],
        attention_channels: int,
        cluster_dim: int,
        detector_dim: int,
        num_classes: int,
    ):
        super().__init__()
        merged = sum(channel_plan)
        self.merge_conv = nn.Conv2d(merged, 2 * attention_channels, kernel_size=1)
        self.head = TemporalPyramidHead(2 * attention_channels, cluster_dim, detector_dim, num_classes)

    def forward(self, full: FeatureMap, half: FeatureMap, quarter: FeatureMap) -> DecoderOutput:
        _check_pyramid(full, half, quarter)
        length = full.data.shape[2]
        merged = torch.cat(
            [
                full.data,
                temporal_resample(half.data, length),
                temporal_resample(quarter.data, length),
            ],
            dim=1,
        )
        return self.head(self.merge_conv(merged))
