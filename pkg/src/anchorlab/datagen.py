"""Synthetic preference corpora with a known ground-truth reward.

The true reward of a response is its density of semantic tokens (count of
tokens from the semantic set divided by length), which is length-invariant
by construction; the optional length bias makes chosen responses tend to
be longer without touching the reward, planting a genuinely spurious
correlation.  Noise injectors swap (y_w, y_l) order only - token content
and the test split are never modified - and every swapped pair carries
``true_label_swapped`` so metrics can score against pre-noise labels.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import policy as pol
from .objectives import PreferencePair, swap_pair

__all__ = [
    "CorpusConfig",
    "PreferenceDataset",
    "DatasetFormatError",
    "DegenerateCorpusError",
    "generate_corpus",
    "inject_random_flips",
    "inject_length_flips",
    "true_reward",
    "reward_accuracy",
    "pairs_reward_accuracy",
    "write_jsonl",
    "read_jsonl",
    "meta_path",
]

TIE_TOLERANCE = 1e-12


class DatasetFormatError(ValueError):
    def __init__(self, line: int, reason: str):
        super().__init__(f"line {line}: {reason}")
        self.line = line


class DegenerateCorpusError(RuntimeError):
    """Could not realize strictly ordered rewards within the resample bound."""


@dataclass(frozen=True)
class CorpusConfig:
    vocab_size: int = 16
    n_pairs: int = 1000
    prompt_len: tuple[int, int] = (2, 6)
    resp_len: tuple[int, int] = (4, 12)
    semantic_tokens: tuple[int, ...] = (1, 2, 3)
    length_bias: float = 0.0
    test_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        sem = frozenset(self.semantic_tokens)
        if not sem:
            raise ValueError("semantic token set must be non-empty")
        if any(t < 0 or t >= self.vocab_size for t in sem):
            raise ValueError("semantic tokens must lie in [0, vocab_size)")
        if len(sem) >= self.vocab_size:
            raise ValueError("semantic set must leave a non-empty filler set")
        if not (0 <= self.length_bias <= 1):
            raise ValueError("length_bias must be in [0, 1]")
        if not (0 <= self.test_fraction < 1):
            raise ValueError("test_fraction must be in [0, 1)")
        plo, phi = self.prompt_len
        rlo, rhi = self.resp_len
        if plo < 0 or phi < plo or rlo < 1 or rhi < rlo:
            raise ValueError("invalid length ranges")


@dataclass
class PreferenceDataset:
    train: list[PreferencePair]
    test: list[PreferencePair]
    provenance: dict = field(default_factory=dict)

    def split(self, name: str) -> list[PreferencePair]:
        if name not in ("train", "test"):
            raise ValueError(f"unknown split {name!r}")
        return self.train if name == "train" else self.test


def true_reward(tokens: Sequence[int], semantic_tokens) -> float:
    """Density of semantic tokens; the planted, length-invariant ground truth."""
    sem = frozenset(semantic_tokens)
    toks = tuple(tokens)
    return sum(t in sem for t in toks) / len(toks)


def _sample_response(rng, length: int, p_sem: float, sem: np.ndarray,
                     filler: np.ndarray) -> tuple[int, ...]:
    is_sem = rng.random(length) < p_sem
    toks = np.where(is_sem,
                    sem[rng.integers(0, len(sem), size=length)],
                    filler[rng.integers(0, len(filler), size=length)])
    return tuple(int(t) for t in toks)


def generate_corpus(cfg: CorpusConfig) -> PreferenceDataset:
    """Deterministic corpus where every emitted pair has trueReward(y_w) > trueReward(y_l)."""
    rng = np.random.default_rng(cfg.seed)
    sem = np.array(sorted(set(cfg.semantic_tokens)))
    filler = np.array(sorted(set(range(cfg.vocab_size)) - set(cfg.semantic_tokens)))
    plo, phi = cfg.prompt_len
    rlo, rhi = cfg.resp_len
    pairs: list[PreferencePair] = []
    for pid in range(cfg.n_pairs):
        x = tuple(int(t) for t in rng.integers(0, cfg.vocab_size,
                                               size=rng.integers(plo, phi + 1)))
        for attempt in range(100):
            dens = rng.uniform(0.05, 0.95, size=2)
            if abs(dens[0] - dens[1]) < 0.15:
                continue
            p_w, p_l = max(dens), min(dens)
            lens = rng.integers(rlo, rhi + 1, size=2)
            if rng.random() < cfg.length_bias:
                len_w, len_l = int(lens.max()), int(lens.min())
            else:
                len_w, len_l = int(lens[0]), int(lens[1])
            y_w = _sample_response(rng, len_w, p_w, sem, filler)
            y_l = _sample_response(rng, len_l, p_l, sem, filler)
            if true_reward(y_w, sem) > true_reward(y_l, sem):
                break
        else:
            raise DegenerateCorpusError(f"pair {pid}: no strictly ordered sample in 100 tries")
        pairs.append(PreferencePair(x, y_w, y_l, False, pid))
    n_test = round(cfg.test_fraction * cfg.n_pairs)
    n_train = cfg.n_pairs - n_test
    return PreferenceDataset(pairs[:n_train], pairs[n_train:],
                             {"config": asdict(cfg), "noise": []})


def _with_noise(ds: PreferenceDataset, train: list[PreferencePair],
                descriptor: dict) -> PreferenceDataset:
    prov = {k: v for k, v in ds.provenance.items()}
    prov["noise"] = list(prov.get("noise", [])) + [descriptor]
    return PreferenceDataset(train, ds.test, prov)


def inject_random_flips(ds: PreferenceDataset, rate: float, seed: int) -> PreferenceDataset:
    """Swap each train pair independently with probability ``rate``."""
    if not (0 <= rate <= 1):
        raise ValueError("rate must be in [0, 1]")
    rng = np.random.default_rng(seed)
    draws = rng.random(len(ds.train))
    train = [swap_pair(p) if u < rate else p for p, u in zip(ds.train, draws)]
    return _with_noise(ds, train, {"kind": "random", "rate": rate, "seed": seed})


def inject_length_flips(ds: PreferenceDataset, rate: float, seed: int) -> PreferenceDataset:
    """Swap the ceil(rate * n_train) eligible pairs with the largest length gap.

    Eligible pairs are those where the swap makes the shorter response
    preferred (|y_w| > |y_l|); ties break by ascending pair_id.  If fewer
    eligible pairs exist, all are swapped and a shortfall is recorded.
    """
    if not (0 <= rate <= 1):
        raise ValueError("rate must be in [0, 1]")
    target = math.ceil(rate * len(ds.train))
    eligible = [p for p in ds.train if len(p.y_w) > len(p.y_l)]
    eligible.sort(key=lambda p: (-(len(p.y_w) - len(p.y_l)), p.pair_id))
    chosen = {p.pair_id for p in eligible[:target]}
    train = [swap_pair(p) if p.pair_id in chosen else p for p in ds.train]
    descriptor = {"kind": "length", "rate": rate, "seed": seed,
                  "flipped": len(chosen)}
    if len(eligible) < target:
        descriptor["shortfall"] = target - len(eligible)
    return _with_noise(ds, train, descriptor)


def pairs_reward_accuracy(model: pol.PolicyModel, pairs: Sequence[PreferencePair],
                          use_true_labels: bool = False) -> float:
    """Fraction of pairs whose implicit reward ranks (a, b) correctly; ties 0.5."""
    if not pairs:
        raise ValueError("split must be non-empty")
    ordered = []
    for p in pairs:
        a, b = p.y_w, p.y_l
        if use_true_labels and p.true_label_swapped:
            a, b = b, a
        ordered.append((p.x, a, b))
    seqs = [(x, a) for x, a, _ in ordered] + [(x, b) for x, _, b in ordered]
    lps = pol.sequence_logprob_values(model, seqs)
    n = len(ordered)
    r_a = lps[:n] / np.array([len(a) for _, a, _ in ordered])
    r_b = lps[n:] / np.array([len(b) for _, _, b in ordered])
    diff = r_a - r_b
    tie = np.abs(diff) <= TIE_TOLERANCE * np.maximum(1.0, np.abs(r_a))
    score = np.where(tie, 0.5, (diff > 0).astype(np.float64))
    return float(score.mean())


def reward_accuracy(model: pol.PolicyModel, ds: PreferenceDataset, split: str = "test",
                    use_true_labels: bool = False) -> float:
    return pairs_reward_accuracy(model, ds.split(split), use_true_labels)


# ---------------------------------------------------------------------------
# JSONL persistence (one pair per line, provenance in a .meta sidecar)
# ---------------------------------------------------------------------------


def meta_path(path) -> Path:
    return Path(path).with_suffix(".meta")


def _pair_to_json(p: PreferencePair) -> str:
    return json.dumps({"pair_id": p.pair_id, "x": list(p.x), "y_w": list(p.y_w),
                       "y_l": list(p.y_l), "true_label_swapped": p.true_label_swapped},
                      separators=(",", ":"))


def write_jsonl(ds: PreferenceDataset, path) -> None:
    """Write train then test pairs, one JSON object per newline-terminated line."""
    path = Path(path)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for p in list(ds.train) + list(ds.test):
            fh.write(_pair_to_json(p))
            fh.write("\n")
    meta = dict(ds.provenance)
    meta["n_train"] = len(ds.train)
    meta["n_test"] = len(ds.test)
    with open(meta_path(path), "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2)
        fh.write("\n")


def read_jsonl(path) -> PreferenceDataset:
    """Inverse of :func:`write_jsonl`; the sidecar restores the split boundary."""
    path = Path(path)
    with open(path, "r", encoding="utf-8", newline="") as fh:
        raw = fh.read()
    pairs: list[PreferencePair] = []
    if raw:
        for lineno, line in enumerate(raw.splitlines(keepends=True), start=1):
            if not line.endswith("\n"):
                raise DatasetFormatError(lineno, "truncated line (missing newline)")
            try:
                rec = json.loads(line)
                pairs.append(PreferencePair(tuple(rec["x"]), tuple(rec["y_w"]),
                                            tuple(rec["y_l"]),
                                            bool(rec["true_label_swapped"]),
                                            int(rec["pair_id"])))
            except DatasetFormatError:
                raise
            except Exception as err:
                raise DatasetFormatError(lineno, str(err)) from err
    mp = meta_path(path)
    provenance: dict = {}
    n_train = len(pairs)
    if mp.exists():
        with open(mp, "r", encoding="utf-8") as fh:
            provenance = json.load(fh)
        n_train = int(provenance.get("n_train", n_train))
    return PreferenceDataset(pairs[:n_train], pairs[n_train:], provenance)
