"""Class prototypes: per-sample mean features, per-class local prototypes,
and server-side aggregation into global prototypes.

A prototype set never contains zero-filled placeholders: classes a client
has no samples for are simply absent, so they cannot drag the global mean.
Aggregation sums in ascending client-id order to keep results bit-stable.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import DimensionMismatch, EmptyInput, LengthMismatch, RaggedInput

GLOBAL = "global"


@dataclass(frozen=True)
class MeanFeature:
    """Mean of one sample's augmented-view features."""
    vector: np.ndarray
    sample_id: int | None = None


@dataclass(frozen=True)
class PrototypeSet:
    """Per-class d-dimensional prototypes with contribution counts."""

    vectors: Mapping[int, np.ndarray]
    support: Mapping[int, int]
    owner: int | str = GLOBAL

    def __post_init__(self):
        if set(self.vectors) != set(self.support):
            raise DimensionMismatch("vectors and support must cover the same classes")
        if any(c < 1 for c in self.support.values()):
            raise DimensionMismatch("support counts must be >= 1")

    @property
    def classes(self) -> list[int]:
        return sorted(self.vectors)

    @property
    def dim(self) -> int | None:
        for v in self.vectors.values():
            return int(v.shape[0])
        return None

    def is_empty(self) -> bool:
        return not self.vectors

    def __eq__(self, other) -> bool:
        if not isinstance(other, PrototypeSet):
            return NotImplemented
        return (self.owner == other.owner
                and dict(self.support) == dict(other.support)
                and self.classes == other.classes
                and all(self.vectors[c].tobytes() == other.vectors[c].tobytes()
                        for c in self.classes))


def empty_set(owner: int | str = GLOBAL) -> PrototypeSet:
    return PrototypeSet({}, {}, owner)


def mean_feature(view_features: Sequence[np.ndarray],
                 sample_id: int | None = None) -> MeanFeature:
    """Elementwise arithmetic mean of the views of one sample."""
    if len(view_features) == 0:
        raise EmptyInput("mean_feature needs at least one view")
    d = len(view_features[0])
    if any(len(v) != d for v in view_features):
        raise RaggedInput("view features have differing lengths")
    acc = np.zeros(d, dtype=np.float64)
    for v in view_features:
        acc = acc + np.asarray(v, dtype=np.float64)
    return MeanFeature(acc / len(view_features), sample_id)


def local_prototypes(mean_features: Sequence[MeanFeature | np.ndarray],
                     labels: Sequence[int],
                     owner: int | str = GLOBAL) -> PrototypeSet:
    """Per-class mean of mean features; absent classes are omitted."""
    if len(mean_features) != len(labels):
        raise LengthMismatch(
            f"{len(mean_features)} mean features vs {len(labels)} labels")
    sums: dict[int, np.ndarray] = {}
    counts: dict[int, int] = {}
    for mf, y in zip(mean_features, labels):
        vec = mf.vector if isinstance(mf, MeanFeature) else np.asarray(mf, dtype=np.float64)
        y = int(y)
        if y in sums:
            if vec.shape != sums[y].shape:
                raise RaggedInput("mean feature dimensions differ")
            sums[y] = sums[y] + vec
            counts[y] += 1
        else:
            sums[y] = vec.astype(np.float64, copy=True)
            counts[y] = 1
    vectors = {y: sums[y] / counts[y] for y in sums}
    return PrototypeSet(vectors, counts, owner)


def aggregate_global(local_sets: Iterable[PrototypeSet],
                     mode: str = "average") -> PrototypeSet:
    """Combine client prototype sets per class, over contributing clients only.

    mode "average" divides by the number of clients holding the class;
    mode "sum" keeps the raw accumulation.
    """
    ordered = sorted(local_sets, key=lambda s: (isinstance(s.owner, str), s.owner))
    if not ordered:
        raise EmptyInput("aggregate_global needs at least one local set")
    if mode not in ("average", "sum"):
        raise ValueError(f"unknown aggregation mode: {mode}")

    dim = None
    sums: dict[int, np.ndarray] = {}
    contributors: dict[int, int] = {}
    for pset in ordered:
        for cls in sorted(pset.vectors):
            vec = pset.vectors[cls]
            if dim is None:
                dim = vec.shape[0]
            elif vec.shape[0] != dim:
                raise DimensionMismatch(
                    f"prototype dim {vec.shape[0]} != {dim}")
            if cls in sums:
                sums[cls] = sums[cls] + vec
                contributors[cls] += 1
            else:
                sums[cls] = vec.astype(np.float64, copy=True)
                contributors[cls] = 1

    if mode == "average":
        vectors = {c: sums[c] / contributors[c] for c in sums}
    else:
        vectors = sums
    return PrototypeSet(vectors, contributors, GLOBAL)
