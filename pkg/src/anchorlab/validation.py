"""Input validation helpers shared by the estimator facade and the CLI."""

from __future__ import annotations

from typing import Sequence

from .datagen import PreferenceDataset
from .objectives import PreferencePair

__all__ = ["as_pairs", "check_in", "check_range"]


def as_pairs(X) -> list[PreferencePair]:
    """Coerce estimator input to a non-empty list of preference pairs.

    Accepts a PreferenceDataset (its train split), a sequence of
    PreferencePair, or a sequence of (x, y_w, y_l) token triples.
    """
    if isinstance(X, PreferenceDataset):
        pairs = list(X.train)
    else:
        pairs = []
        for i, item in enumerate(X):
            if isinstance(item, PreferencePair):
                pairs.append(item)
            else:
                x, y_w, y_l = item
                pairs.append(PreferencePair(tuple(x), tuple(y_w), tuple(y_l),
                                            pair_id=i))
    if not pairs:
        raise ValueError("need at least one preference pair")
    return pairs


def check_in(name: str, value, allowed: Sequence):
    if value not in allowed:
        raise ValueError(f"{name} must be one of {tuple(allowed)}, got {value!r}")
    return value


def check_range(name: str, value: float, lo: float | None = None,
                hi: float | None = None, open_lo: bool = False) -> float:
    if lo is not None and (value <= lo if open_lo else value < lo):
        raise ValueError(f"{name} must be {'>' if open_lo else '>='} {lo}, got {value}")
    if hi is not None and value > hi:
        raise ValueError(f"{name} must be <= {hi}, got {value}")
    return value
