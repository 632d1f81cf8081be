"""Deterministic synthetic frame-level dataset with planted class structure,
train/validate splitting, and the on-disk ".vds" container.

Every video's frames are the mean of its labels' prototype vectors plus
Gaussian noise, so labels are recoverable and end-to-end learning can be
verified without a real corpus.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO, Sequence

import numpy as np

from .errors import CorruptionError, FormatError, ValidationError
from .model import FrameFeatures

DATASET_MAGIC = b"VDSF"
DATASET_VERSION = 1


@dataclass(frozen=True)
class SyntheticDatasetConfig:
    num_videos: int
    vocab_size: int
    d_video: int = 64
    d_audio: int = 16
    max_frames: int = 30
    mean_labels_per_video: float = 3.0
    noise_sigma: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.num_videos < 1 or self.vocab_size < 1:
            raise ValidationError("num_videos and vocab_size must be positive")
        if self.d_video < 1 or self.d_audio < 1 or self.max_frames < 1:
            raise ValidationError("feature dims and max_frames must be positive")
        if not 0 < self.mean_labels_per_video <= self.vocab_size:
            raise ValidationError("mean_labels_per_video must be in (0, vocab_size]")
        if self.noise_sigma < 0:
            raise ValidationError("noise_sigma must be non-negative")


@dataclass(frozen=True)
class VideoExample:
    video_id: str
    frames: FrameFeatures
    labels: frozenset[int]

    def __post_init__(self):
        object.__setattr__(self, "labels", frozenset(int(x) for x in self.labels))
        if not self.labels:
            raise ValidationError(f"video {self.video_id!r} has no labels")
        if min(self.labels) < 0:
            raise ValidationError("label ids must be non-negative")


def generate(cfg: SyntheticDatasetConfig) -> list[VideoExample]:
    """Draw the planted dataset; a pure function of the config."""
    rng = np.random.default_rng(cfg.seed)
    video_protos = rng.normal(0.0, 1.0, size=(cfg.vocab_size, cfg.d_video))
    audio_protos = rng.normal(0.0, 1.0, size=(cfg.vocab_size, cfg.d_audio))
    min_frames = max(1, cfg.max_frames // 2)
    examples = []
    for i in range(cfg.num_videos):
        count = int(rng.poisson(cfg.mean_labels_per_video))
        count = min(max(count, 1), cfg.vocab_size)
        labels = np.sort(rng.choice(cfg.vocab_size, size=count, replace=False))
        n = int(rng.integers(min_frames, cfg.max_frames + 1))
        base_v = video_protos[labels].mean(axis=0)
        base_a = audio_protos[labels].mean(axis=0)
        video = base_v + rng.normal(0.0, cfg.noise_sigma, size=(n, cfg.d_video))
        audio = base_a + rng.normal(0.0, cfg.noise_sigma, size=(n, cfg.d_audio))
        examples.append(VideoExample(
            video_id=f"video-{i:06d}",
            frames=FrameFeatures(video=video, audio=audio),
            labels=frozenset(int(x) for x in labels),
        ))
    return examples


def split(
    dataset: Sequence[VideoExample],
    validate_fraction: float,
    seed: int,
) -> tuple[list[VideoExample], list[VideoExample]]:
    """Seeded disjoint partition preserving the original order inside each side."""
    if not 0.0 < validate_fraction < 1.0:
        raise ValidationError("validate_fraction must be strictly between 0 and 1")
    n = len(dataset)
    n_validate = int(round(n * validate_fraction))
    if n_validate == 0 or n_validate == n:
        raise ValidationError(
            f"split of {n} videos at fraction {validate_fraction} leaves one side empty")
    perm = np.random.default_rng(seed).permutation(n)
    validate_idx = set(int(i) for i in perm[:n_validate])
    train = [dataset[i] for i in range(n) if i not in validate_idx]
    validate = [dataset[i] for i in range(n) if i in validate_idx]
    return train, validate


def truth_map(dataset: Sequence[VideoExample]) -> dict[str, frozenset[int]]:
    return {ex.video_id: ex.labels for ex in dataset}


def write_dataset(dataset: Sequence[VideoExample], destination: str | Path | BinaryIO) -> None:
    """Length-prefixed record stream; float32 payloads, bit-exact round trip."""
    if isinstance(destination, (str, Path)):
        with open(destination, "wb") as fh:
            write_dataset(dataset, fh)
        return
    if not dataset:
        raise ValidationError("refusing to write an empty dataset")
    d_video = dataset[0].frames.video.shape[1]
    d_audio = dataset[0].frames.audio.shape[1]
    out = destination
    out.write(DATASET_MAGIC)
    out.write(struct.pack("<HII", DATASET_VERSION, d_video, d_audio))
    out.write(struct.pack("<I", len(dataset)))
    for ex in dataset:
        if ex.frames.video.shape[1] != d_video or ex.frames.audio.shape[1] != d_audio:
            raise ValidationError("all videos in a dataset must share feature dims")
        raw_id = ex.video_id.encode("utf-8")
        out.write(struct.pack("<I", len(raw_id)))
        out.write(raw_id)
        out.write(struct.pack("<I", ex.frames.num_frames))
        labels = sorted(ex.labels)
        out.write(struct.pack("<I", len(labels)))
        out.write(struct.pack(f"<{len(labels)}I", *labels))
        out.write(ex.frames.video.astype("<f4").tobytes())
        out.write(ex.frames.audio.astype("<f4").tobytes())


def read_dataset(source: str | Path | BinaryIO | bytes) -> list[VideoExample]:
    if isinstance(source, (str, Path)):
        data = Path(source).read_bytes()
    elif isinstance(source, bytes):
        data = source
    else:
        data = source.read()

    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(data):
            raise CorruptionError("dataset stream is truncated")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    if take(4) != DATASET_MAGIC:
        raise FormatError("not a dataset file (bad magic)")
    version, d_video, d_audio = struct.unpack("<HII", take(10))
    if version != DATASET_VERSION:
        raise FormatError(f"unsupported dataset version {version}")
    (count,) = struct.unpack("<I", take(4))
    examples = []
    for _ in range(count):
        (id_len,) = struct.unpack("<I", take(4))
        video_id = take(id_len).decode("utf-8")
        (n_frames,) = struct.unpack("<I", take(4))
        (n_labels,) = struct.unpack("<I", take(4))
        labels = struct.unpack(f"<{n_labels}I", take(4 * n_labels))
        video = np.frombuffer(take(4 * n_frames * d_video), dtype="<f4").reshape(n_frames, d_video)
        audio = np.frombuffer(take(4 * n_frames * d_audio), dtype="<f4").reshape(n_frames, d_audio)
        examples.append(VideoExample(video_id, FrameFeatures(video, audio), frozenset(labels)))
    if pos != len(data):
        raise CorruptionError("trailing bytes after the last video record")
    return examples
