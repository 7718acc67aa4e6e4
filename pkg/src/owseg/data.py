"""Skeleton sequences, graph topology, open-world splits, and the OWAS1 file format.

A dataset is a list of :class:`SkeletonSequence`; every sequence carries
frame-wise action labels. Classes are split into a known set (seen in
training) and a novel set (test-time only) by :func:`make_split`.

The OWAS1 container is a text header (magic ``OWAS1``, ``key:value`` lines
for the sequence count, joint count, and per-sequence length/subject)
followed by raw little-endian float32 coordinate blocks in (3, T, V)
row-major order and int32 label blocks, one pair per sequence. Round-trips
are bit-exact.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DatasetFormatError

MAGIC = b"OWAS1"


@dataclass(frozen=True)
class SkeletonSequence:
    """One untrimmed recording: (3, T, V) joint coordinates plus per-frame labels."""

    coords: np.ndarray
    labels: np.ndarray
    subject_id: int = 0

    def __post_init__(self):
        coords = np.ascontiguousarray(self.coords, dtype=np.float32)
        labels = np.ascontiguousarray(self.labels, dtype=np.int32)
        if coords.ndim != 3 or coords.shape[0] != 3:
            raise ValueError(f"coords must have shape (3, T, V), got {coords.shape}")
        if coords.shape[1] < 1 or coords.shape[2] < 1:
            raise ValueError("T and V must both be >= 1")
        if labels.shape != (coords.shape[1],):
            raise ValueError(f"labels must have shape (T,), got {labels.shape}")
        if not np.isfinite(coords).all():
            raise ValueError("coords contains non-finite values")
        if (labels < 0).any():
            raise ValueError("labels must be >= 0")
        coords.flags.writeable = False
        labels.flags.writeable = False
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "labels", labels)

    @property
    def num_frames(self) -> int:
        return self.coords.shape[1]

    @property
    def num_joints(self) -> int:
        return self.coords.shape[2]

    def classes(self) -> set[int]:
        return set(np.unique(self.labels).tolist())

    def __eq__(self, other) -> bool:
        if not isinstance(other, SkeletonSequence):
            return NotImplemented
        return (
            self.subject_id == other.subject_id
            and self.coords.shape == other.coords.shape
            and np.array_equal(self.coords, other.coords)
            and np.array_equal(self.labels, other.labels)
        )


def chain_with_branches(num_joints: int) -> list[tuple[int, int]]:
    """Default synthetic topology: a spine chain with leaf joints hanging off it.

    Joints 0 .. ceil(V/2)-1 form a chain; each remaining joint j attaches to
    spine joint j - ceil(V/2). Connected for every V >= 1.
    """
    if num_joints < 1:
        raise ValueError("num_joints must be >= 1")
    spine = (num_joints + 1) // 2
    edges = [(i, i + 1) for i in range(spine - 1)]
    edges += [(j - spine, j) for j in range(spine, num_joints)]
    return edges


@dataclass(frozen=True)
class SkeletonGraph:
    """Joint connectivity and its symmetric-normalized adjacency D^-1/2 (A+I) D^-1/2."""

    num_joints: int
    edges: tuple[tuple[int, int], ...]
    adjacency: np.ndarray = field(init=False)

    def __post_init__(self):
        if self.num_joints < 1:
            raise ValueError("num_joints must be >= 1")
        edges = tuple(tuple(sorted(e)) for e in self.edges)
        for a, b in edges:
            if not (0 <= a < self.num_joints and 0 <= b < self.num_joints):
                raise ValueError(f"edge ({a}, {b}) out of range for V={self.num_joints}")
            if a == b:
                raise ValueError("explicit self-loops are not allowed; they are added internally")
        raw = np.zeros((self.num_joints, self.num_joints), dtype=np.float64)
        for a, b in edges:
            raw[a, b] = raw[b, a] = 1.0
        raw += np.eye(self.num_joints)
        degree = raw.sum(axis=1)
        inv_sqrt = 1.0 / np.sqrt(degree)
        adjacency = (raw * inv_sqrt[:, None] * inv_sqrt[None, :]).astype(np.float32)
        adjacency.flags.writeable = False
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "adjacency", adjacency)

    @classmethod
    def default(cls, num_joints: int) -> "SkeletonGraph":
        return cls(num_joints, tuple(chain_with_branches(num_joints)))

    def permuted(self, perm: np.ndarray) -> "SkeletonGraph":
        """Graph with joints relabeled by ``perm`` (joint i becomes perm[i])."""
        mapped = tuple((int(perm[a]), int(perm[b])) for a, b in self.edges)
        return SkeletonGraph(self.num_joints, mapped)


@dataclass(frozen=True)
class OpenWorldSplit:
    """Dataset partition for the open-world protocol.

    train/val contain only known-class frames; test_open is everything not
    used for training, test_ood_only the subset whose frames are all novel.
    """

    known_classes: frozenset[int]
    novel_classes: frozenset[int]
    train: tuple[SkeletonSequence, ...]
    val: tuple[SkeletonSequence, ...]
    test_closed: tuple[SkeletonSequence, ...]
    test_open: tuple[SkeletonSequence, ...]
    test_ood_only: tuple[SkeletonSequence, ...]

    def __post_init__(self):
        if self.known_classes & self.novel_classes:
            raise ValueError("known and novel classes must be disjoint")
        for name in ("train", "val"):
            for seq in getattr(self, name):
                if not seq.classes() <= self.known_classes:
                    raise ValueError(f"{name} contains novel-class frames")
        for seq in self.test_ood_only:
            if not seq.classes() <= self.novel_classes:
                raise ValueError("test_ood_only contains known-class frames")


def _rest_pose(num_joints: int) -> np.ndarray:
    """Static base pose shared by all classes: joints spread along x with
    alternating y offsets, shape (3, V)."""
    pose = np.zeros((3, num_joints))
    pose[0] = 0.3 * np.arange(num_joints)
    pose[1] = 0.2 * (np.arange(num_joints) % 2)
    return pose


def _archetype(class_id: int, num_classes: int, length: int, num_joints: int) -> np.ndarray:
    """Deterministic motion for one segment of ``class_id``: a class-specific
    static stance plus a sinusoidal trajectory whose frequency, phase,
    per-joint phase lag, and axis mix are all class-specific. The stance gives
    every class a distinct mean joint displacement (the oscillation alone
    averages to zero over a segment). Pure in (class, frame-within-segment,
    joint, axis)."""
    t = np.arange(length)[None, :, None] / float(length)
    v = np.arange(num_joints)[None, None, :]
    freq = 1.0 + class_id
    phase = 2.0 * np.pi * class_id / max(num_classes, 1)
    joint_lag = 2.0 * np.pi * (class_id + 1) / (num_joints + 1)
    angle = 2.0 * np.pi * freq * t + phase + joint_lag * v
    axis_mix = np.array(
        [
            np.cos(phase),
            np.sin(phase),
            np.cos(2.0 * phase + 1.0),
        ]
    )[:, None, None]
    # stance directions form a Fibonacci-sphere lattice so any subset of
    # classes is well spread in displacement space
    z = 1.0 - 2.0 * (class_id + 0.5) / max(num_classes, 1)
    ring = np.sqrt(max(1.0 - z * z, 0.0))
    golden = np.pi * (3.0 - np.sqrt(5.0))
    stance_dir = np.array(
        [
            ring * np.cos(golden * class_id),
            ring * np.sin(golden * class_id),
            z,
        ]
    )[:, None, None]
    joint_weight = 0.5 + 0.5 * np.cos(2.0 * np.pi * v / num_joints)
    stance = 0.25 * stance_dir * joint_weight
    return _rest_pose(num_joints)[:, None, :] + stance + 0.25 * axis_mix * np.sin(angle)


def generate_synthetic(
    seed: int,
    num_classes: int,
    frames_per_segment: int,
    V: int,
    noise_std: float,
    num_sequences: int = 32,
) -> list[SkeletonSequence]:
    """Generate a deterministic synthetic dataset.

    Each sequence concatenates 2-6 segments of ``frames_per_segment`` frames;
    every segment plays one class archetype (adjacent segments never repeat a
    class, so segment boundaries are observable) plus Gaussian coordinate
    noise. Identical seeds yield identical output.
    """
    if num_classes < 2:
        raise ValueError(f"num_classes must be >= 2, got {num_classes}")
    if frames_per_segment < 4:
        raise ValueError(f"frames_per_segment must be >= 4, got {frames_per_segment}")
    if V < 1:
        raise ValueError(f"V must be >= 1, got {V}")
    if noise_std < 0:
        raise ValueError(f"noise_std must be >= 0, got {noise_std}")
    if num_sequences < 1:
        raise ValueError(f"num_sequences must be >= 1, got {num_sequences}")

    rng = np.random.default_rng(seed)
    sequences = []
    for _ in range(num_sequences):
        num_segments = int(rng.integers(2, 7))
        classes = []
        for _ in range(num_segments):
            choices = [c for c in range(num_classes) if not classes or c != classes[-1]]
            classes.append(int(choices[rng.integers(0, len(choices))]))
        coords = np.concatenate(
            [_archetype(c, num_classes, frames_per_segment, V) for c in classes], axis=1
        )
        if noise_std > 0:
            coords = coords + rng.normal(0.0, noise_std, size=coords.shape)
        labels = np.repeat(np.asarray(classes, dtype=np.int32), frames_per_segment)
        subject = int(rng.integers(0, 6))
        sequences.append(SkeletonSequence(coords.astype(np.float32), labels, subject))
    return sequences


def make_split(
    sequences: list[SkeletonSequence],
    novel_classes: set[int],
    ratios: tuple[float, float] = (0.6, 0.2),
) -> OpenWorldSplit:
    """Partition sequences into the open-world splits.

    ``ratios`` = (train, val) fractions of the sequences whose frames are all
    known-class; assignment is order-preserving, so a fixed input order gives
    a fixed split. Remaining pure-known sequences form test_closed; test_open
    is every sequence outside train/val.
    """
    if not sequences:
        raise ValueError("sequences must be non-empty")
    train_ratio, val_ratio = ratios
    if train_ratio <= 0 or val_ratio <= 0 or train_ratio + val_ratio >= 1:
        raise ValueError(f"ratios must be positive and sum to < 1, got {ratios}")
    observed: set[int] = set()
    for seq in sequences:
        observed |= seq.classes()
    novel = set(int(c) for c in novel_classes)
    missing = novel - observed
    if missing:
        raise ValueError(f"novel classes never observed in the data: {sorted(missing)}")
    known = observed - novel

    pure_known = [s for s in sequences if s.classes() <= known]
    pure_novel = [s for s in sequences if s.classes() <= novel]
    n_train = round(train_ratio * len(pure_known))
    n_val = round(val_ratio * len(pure_known))
    train = pure_known[:n_train]
    val = pure_known[n_train : n_train + n_val]
    test_closed = pure_known[n_train + n_val :]
    held_out = set(id(s) for s in train) | set(id(s) for s in val)
    test_open = [s for s in sequences if id(s) not in held_out]

    return OpenWorldSplit(
        known_classes=frozenset(known),
        novel_classes=frozenset(novel),
        train=tuple(train),
        val=tuple(val),
        test_closed=tuple(test_closed),
        test_open=tuple(test_open),
        test_ood_only=tuple(pure_novel),
    )


def save_dataset(path, sequences: list[SkeletonSequence]) -> None:
    """Write an OWAS1 file. All sequences must share the same joint count."""
    joint_counts = {s.num_joints for s in sequences}
    if len(joint_counts) > 1:
        raise ValueError(f"sequences have mixed joint counts: {sorted(joint_counts)}")
    V = joint_counts.pop() if joint_counts else 0
    header = [MAGIC.decode(), f"count:{len(sequences)}", f"V:{V}"]
    for seq in sequences:
        header.append(f"T:{seq.num_frames}")
        header.append(f"subject:{seq.subject_id}")
    header.append("data:")
    blob = bytearray("\n".join(header).encode("ascii") + b"\n")
    for seq in sequences:
        blob += np.ascontiguousarray(seq.coords, dtype="<f4").tobytes()
        blob += np.ascontiguousarray(seq.labels, dtype="<i4").tobytes()
    with open(path, "wb") as fh:
        fh.write(bytes(blob))


def _read_header_int(line: bytes, line_start: int, key: str) -> int:
    prefix = f"{key}:".encode("ascii")
    if not line.startswith(prefix):
        raise DatasetFormatError(f"expected '{key}:' header line, got {line[:40]!r}", line_start)
    try:
        return int(line[len(prefix):])
    except ValueError:
        raise DatasetFormatError(f"non-integer value in '{key}:' line", line_start) from None


def load_dataset(path) -> list[SkeletonSequence]:
    """Read an OWAS1 file written by :func:`save_dataset`."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if not raw.startswith(MAGIC + b"\n"):
        raise DatasetFormatError(f"bad magic: expected {MAGIC!r}", 0)
    offset = len(MAGIC) + 1

    def next_line() -> tuple[bytes, int]:
        nonlocal offset
        start = offset
        end = raw.find(b"\n", offset)
        if end < 0:
            raise DatasetFormatError("truncated header", start)
        offset = end + 1
        return raw[start:end], start

    count = _read_header_int(*next_line(), key="count")
    V = _read_header_int(*next_line(), key="V")
    if count < 0 or V < 0:
        raise DatasetFormatError("negative count or V", offset)
    shapes = []
    for _ in range(count):
        T = _read_header_int(*next_line(), key="T")
        subject = _read_header_int(*next_line(), key="subject")
        shapes.append((T, subject))
    line, start = next_line()
    if line != b"data:":
        raise DatasetFormatError("expected 'data:' separator", start)

    sequences = []
    for T, subject in shapes:
        coord_bytes = 3 * T * V * 4
        label_bytes = T * 4
        if offset + coord_bytes + label_bytes > len(raw):
            raise DatasetFormatError("truncated coordinate/label block", offset)
        coords = np.frombuffer(raw, dtype="<f4", count=3 * T * V, offset=offset).reshape(3, T, V)
        offset += coord_bytes
        labels = np.frombuffer(raw, dtype="<i4", count=T, offset=offset)
        offset += label_bytes
        sequences.append(SkeletonSequence(coords.copy(), labels.copy(), subject))
    if offset != len(raw):
        raise DatasetFormatError(f"{len(raw) - offset} trailing bytes after last block", offset)
    return sequences
