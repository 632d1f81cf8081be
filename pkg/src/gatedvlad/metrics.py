"""Global average precision at k over pooled, confidence-sorted predictions,
plus the prediction CSV format.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence, TextIO

import numpy as np

from .errors import ValidationError


@dataclass(frozen=True)
class PredictionRecord:
    video_id: str
    label_id: int
    confidence: float

    def __post_init__(self):
        if not np.isfinite(self.confidence):
            raise ValidationError("prediction confidence must be finite")


@dataclass(frozen=True)
class GapResult:
    gap: float
    pooled_count: int
    total_positives: int


def top_k_predictions(probs: Sequence[float], video_id: str, k: int = 20) -> list[PredictionRecord]:
    """The k most confident labels, confidence descending, ties by label id."""
    if k < 1:
        raise ValidationError("k must be at least 1")
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 1:
        raise ValidationError("probs must be a vector")
    order = np.lexsort((np.arange(p.size), -p))[: min(k, p.size)]
    return [PredictionRecord(video_id, int(i), float(p[i])) for i in order]


def gap_at_k(
    records: Iterable[PredictionRecord],
    truth: Mapping[str, Iterable[int]],
) -> GapResult:
    """Pooled global average precision.

    All records are ranked together by confidence (descending), ties broken
    by video id then label id.  Precision at each rank is the fraction of
    hits so far; each hit contributes a recall increment of 1/P where P is
    the total ground-truth label count over all videos in ``truth``.
    """
    records = list(records)
    truth_sets = {vid: frozenset(int(x) for x in labels) for vid, labels in truth.items()}
    for r in records:
        if r.video_id not in truth_sets:
            raise ValidationError(f"record references unknown video {r.video_id!r}")
    total_positives = sum(len(s) for s in truth_sets.values())
    if total_positives == 0:
        raise ValidationError("ground truth contains no positive labels")
    ranked = sorted(records, key=lambda r: (-r.confidence, r.video_id, r.label_id))
    gap = 0.0
    hits = 0
    for i, r in enumerate(ranked, start=1):
        if r.label_id in truth_sets[r.video_id]:
            hits += 1
            gap += (hits / i) / total_positives
    return GapResult(gap=gap, pooled_count=len(ranked), total_positives=total_positives)


def pooled_gap(
    confidences: np.ndarray,
    video_keys: np.ndarray,
    relevant: np.ndarray,
    total_positives: int,
) -> float:
    """Array form of :func:`gap_at_k` for tight loops.

    ``video_keys`` must order videos the same way their ids sort; labels are
    the implicit tie-break and must be passed pre-sorted per (conf, video)
    group, which holds when records are generated per video in label order.
    """
    if total_positives == 0:
        raise ValidationError("ground truth contains no positive labels")
    order = np.lexsort((np.arange(confidences.size), video_keys, -confidences))
    rel = relevant[order].astype(np.float64)
    ranks = np.arange(1, rel.size + 1, dtype=np.float64)
    cum = np.cumsum(rel)
    terms = np.where(rel > 0.0, (cum / ranks) / total_positives, 0.0)
    return float(np.cumsum(terms)[-1]) if terms.size else 0.0


CSV_HEADER = ("VideoId", "LabelConfidencePairs")


def format_prediction_row(video_id: str, records: Sequence[PredictionRecord]) -> list[str]:
    pairs = " ".join(f"{r.label_id} {r.confidence:.6f}" for r in records)
    return [video_id, pairs]


def write_predictions_csv(
    destination: str | Path | TextIO,
    rows: Iterable[tuple[str, Sequence[PredictionRecord]]],
) -> None:
    """Write the competition-style CSV: one row per video, space-separated
    "label confidence" pairs sorted by descending confidence."""
    if isinstance(destination, (str, Path)):
        with open(destination, "w", newline="") as fh:
            write_predictions_csv(fh, rows)
        return
    writer = csv.writer(destination, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for video_id, records in rows:
        writer.writerow(format_prediction_row(video_id, records))


def read_predictions_csv(source: str | Path | TextIO) -> dict[str, list[PredictionRecord]]:
    if isinstance(source, (str, Path)):
        with open(source, newline="") as fh:
            return read_predictions_csv(fh)
    reader = csv.reader(source)
    header = next(reader, None)
    if header is None or tuple(header) != CSV_HEADER:
        raise ValidationError(f"unexpected prediction CSV header: {header}")
    out: dict[str, list[PredictionRecord]] = {}
    for row in reader:
        if len(row) != 2:
            raise ValidationError(f"malformed prediction row: {row}")
        video_id, pairs = row
        fields = pairs.split()
        if len(fields) % 2 != 0:
            raise ValidationError(f"odd label/confidence field count for {video_id!r}")
        records = [
            PredictionRecord(video_id, int(fields[i]), float(fields[i + 1]))
            for i in range(0, len(fields), 2)
        ]
        out[video_id] = records
    return out
