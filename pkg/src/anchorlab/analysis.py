"""Curvature probing and anchor-gap data valuation.

The Lanczos probe tridiagonalizes the scope-restricted Hessian of a scalar
objective using only Hessian-vector products, with full reorthogonalization
(cheap at desk scale, and it removes ghost eigenvalues).  A dense oracle
builds the same restricted Hessian column by column for cross-checking.

Valuation runs repeated no-update anchor passes over a training split and
ranks pairs by mean gap ascending: low gap = stable supervision.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import engine as eg
from . import objectives as obj
from . import policy as pol
from .datagen import PreferenceDataset
from .params import ParamVector, ScopeMask

__all__ = [
    "SpectrumReport",
    "ValuationRecord",
    "DimensionCapError",
    "lanczos_spectrum",
    "dense_hessian_eigs",
    "valuate_dataset",
    "select_subset",
    "write_spectrum_csv",
    "write_valuation_csv",
    "read_valuation_csv",
]

DENSE_DIM_CAP = 300

LANCZOS_BREAKDOWN_TOL = 1e-12

VALUATION_CSV_HEADER = ["pair_id", "mean_gap", "rank"]


class DimensionCapError(ValueError):
    """Scope too large for the dense Hessian oracle."""


@dataclass(frozen=True)
class SpectrumReport:
    """Ritz values (descending) plus the scope and probe settings behind them."""

    ritz_values: tuple[float, ...]
    scope: ScopeMask
    iterations: int
    objective_tag: str = ""
    checkpoint_id: str = ""
    breakdown: bool = False

    @property
    def lambda_max(self) -> float:
        return self.ritz_values[0]

    @property
    def lambda_min(self) -> float:
        return self.ritz_values[-1]

    def top_k_mean(self, k: int = 5) -> float:
        return float(np.mean(self.ritz_values[:k]))


@dataclass(frozen=True)
class ValuationRecord:
    pair_id: int
    mean_gap: float
    rank: int


def _params_of(model_or_params) -> ParamVector:
    if isinstance(model_or_params, ParamVector):
        return model_or_params
    if isinstance(model_or_params, pol.PolicyModel):
        return model_or_params.params
    arr = np.asarray(model_or_params, dtype=np.float64)
    from .params import Segment

    return ParamVector(arr, [Segment("params", 0, arr.shape[0])])


def _masked_matvec(objective, params: ParamVector, scope: ScopeMask,
                   hvp_mode: str) -> tuple[Callable, np.ndarray]:
    idx = scope.indices(params)
    dim = idx.shape[0]

    def matvec(v_sub: np.ndarray) -> np.ndarray:
        full = np.zeros(len(params))
        full[idx] = v_sub
        hv = eg.hvp(objective, params, full, mode=hvp_mode).values
        return hv[idx]

    return matvec, np.arange(dim)


def lanczos_spectrum(objective, model_or_params, scope: ScopeMask | None,
                     k_iters: int, seed: int = 0,
                     hvp_mode: str = "fd", objective_tag: str = "",
                     checkpoint_id: str = "") -> SpectrumReport:
    """Ritz values of the scope-restricted Hessian via Lanczos.

    Stops early with a breakdown flag if the residual norm vanishes; the
    values found so far are still returned.
    """
    params = _params_of(model_or_params)
    scope = scope if scope is not None else ScopeMask.full(params)
    dim = scope.dim(params)
    if not (1 <= k_iters <= dim):
        raise ValueError(f"k_iters must be in [1, {dim}], got {k_iters}")
    matvec, _ = _masked_matvec(objective, params, scope, hvp_mode)

    rng = np.random.default_rng(seed)
    q = rng.standard_normal(dim)
    q /= np.linalg.norm(q)
    basis = [q]
    alphas: list[float] = []
    betas: list[float] = []
    breakdown = False
    for j in range(k_iters):
        w = matvec(basis[j])
        alpha = float(np.dot(basis[j], w))
        alphas.append(alpha)
        w = w - alpha * basis[j]
        if j > 0:
            w = w - betas[j - 1] * basis[j - 1]
        # full reorthogonalization, twice for numerical safety
        for _ in range(2):
            for qi in basis:
                w = w - np.dot(qi, w) * qi
        if j == k_iters - 1:
            break
        beta = float(np.linalg.norm(w))
        if beta <= LANCZOS_BREAKDOWN_TOL:
            breakdown = True
            break
        betas.append(beta)
        basis.append(w / beta)
    k = len(alphas)
    tri = np.diag(alphas)
    for j, b in enumerate(betas[: k - 1]):
        tri[j, j + 1] = tri[j + 1, j] = b
    ritz = np.sort(np.linalg.eigvalsh(tri))[::-1]
    return SpectrumReport(tuple(float(v) for v in ritz), scope, k_iters,
                          objective_tag, checkpoint_id, breakdown)


def dense_hessian_eigs(objective, model_or_params, scope: ScopeMask | None = None,
                       hvp_mode: str = "fd", cap: int = DENSE_DIM_CAP) -> np.ndarray:
    """All eigenvalues (descending) of the symmetrized scope-restricted Hessian.

    Feasible only for small scopes; columns are HVPs on basis vectors.
    """
    params = _params_of(model_or_params)
    scope = scope if scope is not None else ScopeMask.full(params)
    dim = scope.dim(params)
    if dim > cap:
        raise DimensionCapError(f"scope dimension {dim} exceeds cap {cap}")
    matvec, _ = _masked_matvec(objective, params, scope, hvp_mode)
    H = np.empty((dim, dim))
    basis = np.eye(dim)
    for i in range(dim):
        H[:, i] = matvec(basis[i])
    H = 0.5 * (H + H.T)
    return np.sort(np.linalg.eigvalsh(H))[::-1]


def valuate_dataset(model: pol.PolicyModel, ds: PreferenceDataset,
                    cfg: obj.GapoConfig, passes: int = 3, seed: int = 0,
                    batch_size: int = 16) -> list[ValuationRecord]:
    """Mean anchor gap per train pair over seeded evaluation passes.

    No parameter update happens; each pass re-batches the train split so
    batch-shared perturbations see different compositions.  Records are
    returned rank-ordered (ascending mean gap, ties by pair_id).
    """
    if passes < 1:
        raise ValueError("need at least one evaluation pass")
    pairs = ds.train
    if not pairs:
        raise ValueError("train split is empty")
    sums = np.zeros(len(pairs))
    for e in range(passes):
        rng = np.random.default_rng(seed + e)
        order = rng.permutation(len(pairs))
        for lo in range(0, len(pairs), batch_size):
            chunk = order[lo: lo + batch_size]
            records = obj.anchor_records(model, [pairs[i] for i in chunk], cfg)
            for i, r in zip(chunk, records):
                sums[i] += r.gap
    means = sums / passes
    by_gap = sorted(range(len(pairs)), key=lambda i: (means[i], pairs[i].pair_id))
    return [ValuationRecord(pairs[i].pair_id, float(means[i]), rank)
            for rank, i in enumerate(by_gap)]


def select_subset(records: Sequence[ValuationRecord], ds: PreferenceDataset,
                  fraction: float, mode: str, seed: int = 0) -> PreferenceDataset:
    """Keep a fraction of the train split by gap rank (or at random).

    ``stable`` keeps the lowest-gap pairs, ``unstable`` the highest-gap,
    ``random`` a seeded uniform sample; the test split passes through.
    """
    if not (0 < fraction <= 1):
        raise ValueError("fraction must be in (0, 1]")
    if mode not in ("stable", "unstable", "random"):
        raise ValueError(f"unknown mode {mode!r}")
    n = len(ds.train)
    k = int(np.floor(fraction * n))
    ranked = sorted(records, key=lambda r: r.rank)
    if mode == "stable":
        keep = {r.pair_id for r in ranked[:k]}
    elif mode == "unstable":
        keep = {r.pair_id for r in ranked[n - k:]}
    else:
        rng = np.random.default_rng(seed)
        ids = [p.pair_id for p in ds.train]
        keep = {ids[i] for i in rng.choice(n, size=k, replace=False)}
    train = [p for p in ds.train if p.pair_id in keep]
    prov = dict(ds.provenance)
    prov["subset"] = {"mode": mode, "fraction": fraction, "seed": seed, "kept": k}
    return PreferenceDataset(train, ds.test, prov)


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------


def write_spectrum_csv(report: SpectrumReport, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "ritz_value"])
        for i, v in enumerate(report.ritz_values):
            w.writerow([i, repr(v)])


def write_valuation_csv(records: Sequence[ValuationRecord], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(VALUATION_CSV_HEADER)
        for r in records:
            w.writerow([r.pair_id, repr(r.mean_gap), r.rank])


def read_valuation_csv(path) -> list[ValuationRecord]:
    with open(path, "r", newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != VALUATION_CSV_HEADER:
        raise ValueError(f"expected header {VALUATION_CSV_HEADER}, got {rows[:1]}")
    return [ValuationRecord(int(pid), float(g), int(rank))
            for pid, g, rank in rows[1:]]
