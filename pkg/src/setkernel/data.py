"""Domain types and CSV ingestion for multi-sample single-cell data.

A sample is a set of cells; each cell is a vector of d marker values.
Sample files are plain CSV (header row of marker names, one numeric row per
cell). A manifest CSV (header "sample_id,path,label") ties samples to their
binary labels.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DataError

FLOAT_FMT = ".17g"  # shortest round-trippable decimal for float64

MANIFEST_HEADER = ("sample_id", "path", "label")


def _readonly(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, dtype=np.float64)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class SampleSet:
    """One biological sample: an (n, d) matrix of cell marker values.

    Row order is storage order only and carries no meaning.
    """

    cells: np.ndarray
    sample_id: str
    marker_names: tuple[str, ...]

    def __post_init__(self):
        cells = np.atleast_2d(np.asarray(self.cells, dtype=np.float64))
        if cells.ndim != 2 or cells.shape[0] < 1 or cells.shape[1] < 1:
            raise ValueError(f"cells must be a non-empty 2-D matrix, got shape {cells.shape}")
        if not np.all(np.isfinite(cells)):
            raise ValueError(f"sample {self.sample_id!r} contains non-finite values")
        if len(self.marker_names) != cells.shape[1]:
            raise ValueError(
                f"sample {self.sample_id!r}: {len(self.marker_names)} marker names "
                f"for {cells.shape[1]} columns"
            )
        object.__setattr__(self, "cells", _readonly(cells))
        object.__setattr__(self, "marker_names", tuple(str(m) for m in self.marker_names))

    @property
    def n(self) -> int:
        return self.cells.shape[0]

    @property
    def d(self) -> int:
        return self.cells.shape[1]


@dataclass(frozen=True)
class LabeledDataset:
    """N (sample, label) pairs with labels in {-1, +1} and shared markers.

    label_names maps -1/+1 back to the original label strings.
    """

    samples: tuple[SampleSet, ...]
    labels: tuple[int, ...]
    label_names: dict[int, str] = field(default_factory=lambda: {-1: "-1", +1: "+1"})

    def __post_init__(self):
        object.__setattr__(self, "samples", tuple(self.samples))
        object.__setattr__(self, "labels", tuple(int(y) for y in self.labels))
        if len(self.samples) != len(self.labels):
            raise ValueError("samples and labels must have equal length")
        if len(self.samples) < 2:
            raise ValueError(f"N >= 2 required, got {len(self.samples)} sample(s)")
        if not set(self.labels) == {-1, +1}:
            raise ValueError("labels must contain both -1 and +1")
        markers = self.samples[0].marker_names
        for s in self.samples[1:]:
            if s.marker_names != markers:
                raise ValueError(
                    f"sample {s.sample_id!r} markers {s.marker_names} "
                    f"differ from {markers}"
                )

    @property
    def N(self) -> int:
        return len(self.samples)

    @property
    def d(self) -> int:
        return self.samples[0].d

    @property
    def marker_names(self) -> tuple[str, ...]:
        return self.samples[0].marker_names


@dataclass(frozen=True)
class Standardizer:
    """Per-feature location/scale fitted on pooled training cells."""

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64).ravel()
        std = np.asarray(self.std, dtype=np.float64).ravel()
        if mean.shape != std.shape:
            raise ValueError("mean and std must have the same length")
        if not np.all(std > 0):
            raise ValueError("std entries must be positive")
        object.__setattr__(self, "mean", _readonly(mean))
        object.__setattr__(self, "std", _readonly(std))

    @property
    def d(self) -> int:
        return self.mean.shape[0]


def load_sample_set(path, expected_markers: Sequence[str] | None = None,
                    sample_id: str | None = None) -> SampleSet:
    """Load one sample CSV (header of marker names, one numeric row per cell).

    If expected_markers is given, columns are permuted to that order; a
    mismatch in the marker set is an error. Row/column positions in error
    messages are 1-based and count data rows (header excluded).
    """
    path = Path(path)
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as e:
        raise DataError(f"cannot read sample file {path}: {e}") from e
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise DataError(f"{path}: empty file")
        markers = tuple(h.strip() for h in header)
        d = len(markers)
        rows = []
        for r, row in enumerate(reader, start=1):
            if not row:
                continue
            if len(row) != d:
                raise DataError(f"{path}: row {r} has {len(row)} fields, expected {d}")
            try:
                rows.append([float(v) for v in row])
            except ValueError:
                for c, v in enumerate(row, start=1):
                    try:
                        float(v)
                    except ValueError:
                        raise DataError(
                            f"{path}: non-numeric value at row {r}, column {c}"
                        ) from None
    if not rows:
        raise DataError(f"{path}: no cell rows")
    cells = np.asarray(rows, dtype=np.float64)
    bad = np.argwhere(~np.isfinite(cells))
    if bad.size:
        r, c = bad[0]
        raise DataError(f"{path}: non-finite value at row {r + 1}, column {c + 1}")
    if expected_markers is not None:
        expected = tuple(str(m) for m in expected_markers)
        if sorted(markers) != sorted(expected):
            raise DataError(
                f"{path}: marker mismatch: file has {markers}, expected {expected}"
            )
        perm = [markers.index(m) for m in expected]
        cells = cells[:, perm]
        markers = expected
    return SampleSet(cells=cells, sample_id=sample_id or path.stem, marker_names=markers)


def save_sample_set(sample: SampleSet, path) -> None:
    """Write a sample CSV with full-precision decimals (round-trips exactly)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(sample.marker_names)
        for row in sample.cells:
            writer.writerow([format(v, FLOAT_FMT) for v in row])


def load_manifest(path) -> LabeledDataset:
    """Load a manifest CSV and all sample files it references.

    The two distinct label strings map to -1/+1 by lexicographic order
    (smaller string -> -1). Sample paths are resolved relative to the
    manifest's directory.
    """
    path = Path(path)
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as e:
        raise DataError(f"cannot read manifest {path}: {e}") from e
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != MANIFEST_HEADER:
            raise DataError(
                f"{path}: manifest header must be exactly "
                f"{','.join(MANIFEST_HEADER)!r}, got {header}"
            )
        entries = []
        for r, row in enumerate(reader, start=1):
            if not row:
                continue
            if len(row) != 3:
                raise DataError(f"{path}: manifest row {r} has {len(row)} fields, expected 3")
            entries.append((row[0].strip(), row[1].strip(), row[2].strip()))
    if len(entries) < 2:
        raise DataError(f"{path}: N >= 2 required, manifest lists {len(entries)} sample(s)")
    label_values = sorted(set(e[2] for e in entries))
    if len(label_values) != 2:
        raise DataError(
            f"{path}: exactly two label values required, got {label_values}"
        )
    label_map = {label_values[0]: -1, label_values[1]: +1}
    base = path.parent
    samples, labels = [], []
    expected = None
    for sample_id, rel, label_str in entries:
        sample_path = Path(rel)
        if not sample_path.is_absolute():
            sample_path = base / sample_path
        s = load_sample_set(sample_path, expected_markers=expected, sample_id=sample_id)
        expected = expected or s.marker_names
        samples.append(s)
        labels.append(label_map[label_str])
    if len(set(labels)) != 2:  # unreachable given two distinct strings, kept as guard
        raise DataError(f"{path}: both labels must be present")
    return LabeledDataset(
        samples=tuple(samples),
        labels=tuple(labels),
        label_names={-1: label_values[0], +1: label_values[1]},
    )


def write_manifest(entries: Sequence[tuple[str, str, str]], path) -> None:
    """Write manifest rows of (sample_id, relative path, label string)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_HEADER)
        writer.writerows(entries)


def fit_standardizer(train: Sequence[SampleSet]) -> Standardizer:
    """Per-feature mean/std over the pooled cells of the training samples.

    Zero-variance features get std 1 so they pass through after centering.
    """
    if not train:
        raise ValueError("fit_standardizer requires at least one sample")
    pooled = np.concatenate([s.cells for s in train], axis=0)
    mean = pooled.mean(axis=0)
    std = pooled.std(axis=0)
    std = np.where(std > 0.0, std, 1.0)
    return Standardizer(mean=mean, std=std)


def apply_standardizer(std: Standardizer, sample: SampleSet) -> SampleSet:
    """Replace each cell x with (x - mean) / std."""
    if std.d != sample.d:
        raise ValueError(f"standardizer d={std.d} does not match sample d={sample.d}")
    cells = (sample.cells - std.mean) / std.std
    return SampleSet(cells=cells, sample_id=sample.sample_id,
                     marker_names=sample.marker_names)


def arcsinh_transform(sample: SampleSet, cofactor: float) -> SampleSet:
    """Apply the standard cytometry variance-stabilizer asinh(x / cofactor)."""
    if not cofactor > 0:
        raise ValueError(f"cofactor must be positive, got {cofactor}")
    cells = np.arcsinh(sample.cells / cofactor)
    return SampleSet(cells=cells, sample_id=sample.sample_id,
                     marker_names=sample.marker_names)
