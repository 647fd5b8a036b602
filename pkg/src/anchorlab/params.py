"""Flat parameter vectors with named segments, plus scope masks over them.

Every model in this package stores its weights as one contiguous float64
vector partitioned into named segments.  Gradients share the same layout,
and perturbation scopes are expressed as 0/1 masks resolved against the
segment table.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

__all__ = ["Segment", "ParamVector", "Gradient", "ScopeMask", "LayoutError"]


class LayoutError(ValueError):
    """Segment table does not partition the vector, or layouts disagree."""


@dataclass(frozen=True)
class Segment:
    name: str
    offset: int
    length: int

    @property
    def stop(self) -> int:
        return self.offset + self.length


def _check_segments(segments: Sequence[Segment], n: int) -> tuple[Segment, ...]:
    segs = tuple(segments)
    if not segs:
        raise LayoutError("at least one segment is required")
    names = [s.name for s in segs]
    if len(set(names)) != len(names):
        raise LayoutError(f"duplicate segment names: {names}")
    cursor = 0
    for s in segs:
        if s.offset != cursor or s.length <= 0:
            raise LayoutError(
                f"segment {s.name!r} at [{s.offset}, {s.stop}) breaks the "
                f"partition (expected offset {cursor})"
            )
        cursor = s.stop
    if cursor != n:
        raise LayoutError(f"segments cover [0, {cursor}) but vector has length {n}")
    return segs


class ParamVector:
    """Contiguous float64 parameter store whose segments partition [0, len).

    ``values`` is owned by the instance; in-place mutation is reserved for
    the trainer and the perturb/restore protocol, which hold exclusive
    access for the duration of the mutation.
    """

    __slots__ = ("values", "segments", "_index")

    def __init__(self, values: np.ndarray, segments: Sequence[Segment]):
        arr = np.asarray(values, dtype=np.float64)
        if arr.ndim != 1:
            raise LayoutError("parameter values must be a flat vector")
        if not np.all(np.isfinite(arr)):
            raise LayoutError("parameter values must be finite")
        self.values = arr
        self.segments = _check_segments(segments, arr.shape[0])
        self._index = {s.name: s for s in self.segments}

    def __len__(self) -> int:
        return self.values.shape[0]

    @classmethod
    def from_named(cls, parts: Sequence[tuple[str, np.ndarray]]) -> "ParamVector":
        """Build from (name, array) pairs; arrays are flattened in order."""
        segs, chunks, off = [], [], 0
        for name, arr in parts:
            flat = np.asarray(arr, dtype=np.float64).ravel()
            segs.append(Segment(name, off, flat.size))
            chunks.append(flat)
            off += flat.size
        return cls(np.concatenate(chunks) if chunks else np.zeros(0), segs)

    def segment(self, name: str) -> Segment:
        try:
            return self._index[name]
        except KeyError:
            raise LayoutError(f"unknown segment {name!r}; have {self.names()}") from None

    def names(self) -> tuple[str, ...]:
        return tuple(s.name for s in self.segments)

    def view(self, name: str) -> np.ndarray:
        """Writable view of one segment (no copy)."""
        s = self.segment(name)
        return self.values[s.offset : s.stop]

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), self.segments)

    def same_layout(self, other: "ParamVector | Gradient") -> bool:
        return self.segments == other.segments

    def check_finite(self) -> None:
        if not np.all(np.isfinite(self.values)):
            bad = int(np.flatnonzero(~np.isfinite(self.values))[0])
            raise LayoutError(f"non-finite parameter at index {bad}")


class Gradient:
    """A real vector layout-compatible with the ParamVector it differentiates."""

    __slots__ = ("values", "segments")

    def __init__(self, values: np.ndarray, segments: Sequence[Segment]):
        arr = np.asarray(values, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise LayoutError("gradient has non-finite entries")
        _check_segments(segments, arr.shape[0])
        self.values = arr
        self.segments = tuple(segments)

    def __len__(self) -> int:
        return self.values.shape[0]

    def norm(self) -> float:
        return float(np.linalg.norm(self.values))


class ScopeMask:
    """Subset of segments selected for perturbation or curvature probing."""

    __slots__ = ("included_segments",)

    def __init__(self, included_segments: Iterable[str]):
        names = frozenset(included_segments)
        if not names:
            raise LayoutError("a scope mask must include at least one segment")
        self.included_segments = names

    @classmethod
    def full(cls, params: ParamVector) -> "ScopeMask":
        return cls(params.names())

    def resolve(self, params: ParamVector) -> np.ndarray:
        """0/1 float mask over parameter indices; unknown names are an error."""
        unknown = self.included_segments - set(params.names())
        if unknown:
            raise LayoutError(f"scope names {sorted(unknown)} not in {params.names()}")
        mask = np.zeros(len(params), dtype=np.float64)
        for s in params.segments:
            if s.name in self.included_segments:
                mask[s.offset : s.stop] = 1.0
        return mask

    def dim(self, params: ParamVector) -> int:
        return int(self.resolve(params).sum())

    def indices(self, params: ParamVector) -> np.ndarray:
        return np.flatnonzero(self.resolve(params) > 0)

    def __repr__(self) -> str:
        return f"ScopeMask({sorted(self.included_segments)})"

    def __eq__(self, other) -> bool:
        return isinstance(other, ScopeMask) and self.included_segments == other.included_segments

    def __hash__(self) -> int:
        return hash(self.included_segments)
