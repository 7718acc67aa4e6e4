"""Checkpoint file format: named float32 tensors plus the run configuration.

Layout mirrors the dataset container: a magic line, ``key: value`` header
lines (including one ``tensor:`` declaration per array and the embedded
config), a ``data:`` separator, then the raw little-endian float32 blobs in
declaration order. Reload reproduces forward outputs bit-exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .config import TrainConfig, config_from_text, config_hash, config_to_text
from .data import SkeletonGraph
from .errors import DatasetFormatError
from .losses import ClassPrototype, PrototypeMap
from .model import SegmentationModel

MAGIC = b"OWCK1"
_PROTO_PREFIX = "prototype."


@dataclass
class Checkpoint:
    """Trained parameters with enough context to rebuild the model."""

    params: dict[str, torch.Tensor]
    prototypes: PrototypeMap
    epoch: int
    val_acc: float
    val_loss: float
    config: TrainConfig
    known_classes: tuple[int, ...]
    joints: int
    config_hash: str = field(default="")

    def __post_init__(self):
        if not self.config_hash:
            self.config_hash = config_hash(self.config)


def _tensor_entries(checkpoint: Checkpoint) -> list[tuple[str, np.ndarray]]:
    entries = []
    for name in sorted(checkpoint.params):
        tensor = checkpoint.params[name].detach().cpu()
        if tensor.dtype != torch.float32:
            raise ValueError(f"parameter {name} must be float32, got {tensor.dtype}")
        entries.append((name, np.ascontiguousarray(tensor.numpy(), dtype="<f4")))
    for class_id in sorted(checkpoint.prototypes):
        proto = checkpoint.prototypes[class_id]
        if not proto.initialized:
            continue
        mean = np.ascontiguousarray(proto.mean.detach().cpu().numpy(), dtype="<f4")
        entries.append((f"{_PROTO_PREFIX}{class_id}", mean))
    return entries


def save_checkpoint(checkpoint: Checkpoint, path) -> None:
    entries = _tensor_entries(checkpoint)
    lines = [MAGIC.decode() ]
    lines.append(f"joints: {checkpoint.joints}")
    lines.append(f"epoch: {checkpoint.epoch}")
    lines.append(f"val_acc: {checkpoint.val_acc!r}")
    lines.append(f"val_loss: {checkpoint.val_loss!r}")
    lines.append("known_classes: " + ",".join(str(c) for c in checkpoint.known_classes))
    lines.append(f"config_hash: {checkpoint.config_hash}")
    for config_line in config_to_text(checkpoint.config).splitlines():
        lines.append(f"config.{config_line}")
    for name, array in entries:
        if " " in name:
            raise ValueError(f"tensor name {name!r} may not contain spaces")
        dims = "x".join(str(d) for d in array.shape) or "1"
        lines.append(f"tensor: {name} {dims}")
    lines.append("data:")
    header = ("\n".join(lines) + "\n").encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(header)
        for _, array in entries:
            fh.write(array.tobytes())


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        blob = fh.read()
    newline = blob.find(b"\n")
    if newline < 0 or blob[:newline] != MAGIC:
        raise DatasetFormatError("not a checkpoint file (bad magic)", 0)

    header: dict[str, str] = {}
    config_lines: list[str] = []
    declared: list[tuple[str, tuple[int, ...]]] = []
    pos = newline + 1
    while True:
        end = blob.find(b"\n", pos)
        if end < 0:
            raise DatasetFormatError("header ended before 'data:' separator", pos)
        line = blob[pos:end].decode("utf-8")
        line_start = pos
        pos = end + 1
        if line == "data:":
            break
        key, sep, value = line.partition(":")
        if not sep:
            raise DatasetFormatError(f"malformed header line {line!r}", line_start)
        key = key.strip()
        value = value.strip()
        if key == "tensor":
            parts = value.split(" ")
            if len(parts) != 2:
                raise DatasetFormatError(f"malformed tensor declaration {value!r}", line_start)
            name, dims = parts
            try:
                shape = tuple(int(d) for d in dims.split("x"))
            except ValueError:
                raise DatasetFormatError(f"bad tensor shape {dims!r}", line_start) from None
            declared.append((name, shape))
        elif key.startswith("config."):
            config_lines.append(f"{key[len('config.'):]}: {value}")
        else:
            header[key] = value

    for required in ("joints", "epoch", "val_acc", "val_loss", "known_classes", "config_hash"):
        if required not in header:
            raise DatasetFormatError(f"missing header field {required!r}", newline + 1)
    config = config_from_text("\n".join(config_lines) + "\n")
    stored_hash = header["config_hash"]
    if config_hash(config) != stored_hash:
        raise DatasetFormatError("config hash does not match the embedded config", 0)

    params: dict[str, torch.Tensor] = {}
    prototypes: PrototypeMap = {}
    for name, shape in declared:
        count = int(np.prod(shape))
        nbytes = count * 4
        if pos + nbytes > len(blob):
            raise DatasetFormatError(f"tensor {name!r} truncated", pos)
        array = np.frombuffer(blob, dtype="<f4", count=count, offset=pos).reshape(shape)
        pos += nbytes
        tensor = torch.from_numpy(array.copy())
        if name.startswith(_PROTO_PREFIX):
            class_id = int(name[len(_PROTO_PREFIX):])
            prototypes[class_id] = ClassPrototype(class_id, tensor, initialized=True)
        else:
            params[name] = tensor
    if pos != len(blob):
        raise DatasetFormatError(f"{len(blob) - pos} trailing bytes after tensor data", pos)

    known = tuple(int(c) for c in header["known_classes"].split(",") if c != "")
    return Checkpoint(
        params=params,
        prototypes=prototypes,
        epoch=int(header["epoch"]),
        val_acc=float(header["val_acc"]),
        val_loss=float(header["val_loss"]),
        config=config,
        known_classes=known,
        joints=int(header["joints"]),
        config_hash=stored_hash,
    )


def restore_model(checkpoint: Checkpoint) -> SegmentationModel:
    """Rebuild the architecture from the embedded config and load the weights."""
    graph = SkeletonGraph.default(checkpoint.joints)
    model = SegmentationModel(graph, len(checkpoint.known_classes), checkpoint.config.model)
    model.load_state_dict(checkpoint.params, strict=True)
    model.eval()
    return model
