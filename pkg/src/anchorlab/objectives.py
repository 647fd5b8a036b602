"""Preference margins, adversarial anchors, and the training losses.

The length-normalized margin of a pair is the difference of implicit
rewards between its chosen and rejected responses.  The anchor is the
current policy perturbed by the radius-rho, margin-decreasing direction
(batch-shared or per-instance); the anchor gap is the margin drop under
that perturbation, evaluated with no gradient flow and with parameters
restored bit-exactly afterwards.  The gap feeds a logistic loss whose
gradient is, analytically, a per-instance reweighting of the plain margin
gradients: weight = beta * sigmoid(gamma - beta * gap), in (0, beta).

Losses:

* ``gapo_loss``  — logistic loss on beta * gap - gamma.
* ``dpo_loss``   — logistic loss on the implicit-reward difference of
  policy vs a frozen reference (unnormalized log-likelihood ratios).
* ``simpo_loss`` — reference-free logistic loss on beta * margin - gamma.

``anchor_records`` mutates and restores model parameters; it requires
exclusive access to the model for its full duration.  Everything else is
a pure function of immutable inputs.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit

from . import engine as eg
from . import policy as pol
from .params import ParamVector, ScopeMask

__all__ = [
    "PreferencePair",
    "AnchorRecord",
    "GapoConfig",
    "Perturbation",
    "RestoreMismatchError",
    "swap_pair",
    "margin",
    "margin_values",
    "margins_node",
    "batch_perturbation",
    "instance_perturbation",
    "anchor_records",
    "gapo_objective",
    "gapo_loss",
    "gapo_weights",
    "dpo_objective",
    "dpo_loss",
    "simpo_objective",
    "simpo_loss",
    "reference_logprob_cache",
    "write_anchor_records_csv",
    "read_anchor_records_csv",
]

DEGENERATE_GRAD_NORM = 1e-12

ANCHOR_CSV_HEADER = ["pair_id", "margin", "anchor_margin", "gap", "weight"]


class RestoreMismatchError(RuntimeError):
    """Parameters differ after a perturb/restore cycle; state is corrupt."""


@dataclass
class PreferencePair:
    """One preference instance; ``true_label_swapped`` tracks injected noise."""

    x: tuple[int, ...]
    y_w: tuple[int, ...]
    y_l: tuple[int, ...]
    true_label_swapped: bool = False
    pair_id: int = 0

    def __post_init__(self):
        self.x = tuple(int(t) for t in self.x)
        self.y_w = tuple(int(t) for t in self.y_w)
        self.y_l = tuple(int(t) for t in self.y_l)
        if not self.y_w or not self.y_l:
            raise ValueError("responses must be non-empty")
        if self.y_w == self.y_l:
            raise ValueError("chosen and rejected responses must differ")


def swap_pair(pair: PreferencePair) -> PreferencePair:
    """Exchange chosen/rejected and toggle the noise flag."""
    return replace(pair, y_w=pair.y_l, y_l=pair.y_w,
                   true_label_swapped=not pair.true_label_swapped)


@dataclass(frozen=True)
class AnchorRecord:
    """Per-instance margin, anchor margin, gap, and induced weight."""

    pair_id: int
    margin: float
    anchor_margin: float
    gap: float
    weight: float


@dataclass(frozen=True)
class GapoConfig:
    """Hyperparameters of the anchored objective.

    ``scope=None`` means the full parameter vector is perturbed.
    """

    beta: float = 2.5
    gamma: float = 0.1
    rho: float = 0.05
    strategy: str = "batch"
    scope: ScopeMask | None = None

    def __post_init__(self):
        if self.beta <= 0:
            raise ValueError("beta must be > 0")
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if self.rho < 0:
            raise ValueError("rho must be >= 0")
        if self.strategy not in ("batch", "instance"):
            raise ValueError(f"unknown strategy {self.strategy!r}")

    def resolve_mask(self, params: ParamVector) -> np.ndarray:
        scope = self.scope if self.scope is not None else ScopeMask.full(params)
        return scope.resolve(params)


@dataclass(frozen=True)
class Perturbation:
    """A scope-masked direction of norm rho (or zero when degenerate)."""

    epsilon: np.ndarray
    degenerate: bool = False


# ---------------------------------------------------------------------------
# margins
# ---------------------------------------------------------------------------


def _margin_seqs(batch: Sequence[PreferencePair]):
    seqs = [(p.x, p.y_w) for p in batch] + [(p.x, p.y_l) for p in batch]
    inv_w = np.array([1.0 / len(p.y_w) for p in batch])
    inv_l = np.array([1.0 / len(p.y_l) for p in batch])
    return seqs, inv_w, inv_l


def margins_node(model: pol.PolicyModel, th, batch: Sequence[PreferencePair]):
    """Engine node of shape (n,): length-normalized margins of the batch."""
    n = len(batch)
    seqs, inv_w, inv_l = _margin_seqs(batch)
    lps = pol.batch_logprobs(model, th, seqs)
    p_w = eg.mul(eg.take(lps, np.arange(n)), inv_w)
    p_l = eg.mul(eg.take(lps, np.arange(n, 2 * n)), inv_l)
    return eg.sub(p_w, p_l)


def margin_values(model: pol.PolicyModel, batch: Sequence[PreferencePair]) -> np.ndarray:
    """Margins without differentiation."""
    n = len(batch)
    seqs, inv_w, inv_l = _margin_seqs(batch)
    lps = pol.sequence_logprob_values(model, seqs)
    return lps[:n] * inv_w - lps[n:] * inv_l


def margin(model: pol.PolicyModel, pair: PreferencePair) -> float:
    """p_reward(x, y_w) - p_reward(x, y_l)."""
    return float(margin_values(model, [pair])[0])


def _mean_margin_objective(model, batch) -> Callable:
    def objective(th):
        return eg.mean(margins_node(model, th, batch))

    return objective


# ---------------------------------------------------------------------------
# perturbations
# ---------------------------------------------------------------------------


def _normalized_perturbation(g: np.ndarray, mask: np.ndarray, rho: float) -> Perturbation:
    g = g * mask
    if rho == 0.0:
        return Perturbation(np.zeros_like(g), degenerate=False)
    norm = float(np.linalg.norm(g))
    if norm <= DEGENERATE_GRAD_NORM:
        return Perturbation(np.zeros_like(g), degenerate=True)
    return Perturbation(-rho * g / norm, degenerate=False)


def batch_perturbation(model: pol.PolicyModel, batch: Sequence[PreferencePair],
                       rho: float, scope: ScopeMask | None = None) -> Perturbation:
    """Steepest margin-decreasing direction for the batch-mean margin.

    epsilon = -rho * g / ||g|| with g the scope-masked gradient of the mean
    margin; zero (with a degenerate flag) when ||g|| <= 1e-12.
    """
    if not batch:
        raise ValueError("batch must be non-empty")
    if rho < 0:
        raise ValueError("rho must be >= 0")
    mask = (scope or ScopeMask.full(model.params)).resolve(model.params)
    g = eg.grad(_mean_margin_objective(model, batch), model.params).values
    return _normalized_perturbation(g, mask, rho)


def instance_perturbation(model: pol.PolicyModel, pair: PreferencePair,
                          rho: float, scope: ScopeMask | None = None) -> Perturbation:
    """Per-instance variant: the direction comes from this pair's own margin."""
    return batch_perturbation(model, [pair], rho, scope)


# ---------------------------------------------------------------------------
# anchor construction (perturb, evaluate, restore)
# ---------------------------------------------------------------------------


def _margins_at_offset(model: pol.PolicyModel, batch, epsilon: np.ndarray) -> np.ndarray:
    """Evaluate margins at params + epsilon, restoring params bit-exactly."""
    values = model.params.values
    snapshot = values.copy()
    try:
        values += epsilon
        out = margin_values(model, batch)
    finally:
        values[:] = snapshot
    if not np.array_equal(model.params.values, snapshot):
        raise RestoreMismatchError("parameters differ after perturbation restore")
    return out


def anchor_records(model: pol.PolicyModel, batch: Sequence[PreferencePair],
                   cfg: GapoConfig) -> list[AnchorRecord]:
    """Margins, anchor margins, gaps, and weights for one training step.

    The anchor margin is evaluated at the perturbed parameters with no
    gradient recording and parameters are restored to bit-identical values
    before returning.  Requires exclusive access to the model.
    """
    if not batch:
        raise ValueError("batch must be non-empty")
    base = margin_values(model, batch)
    if cfg.strategy == "batch":
        pert = batch_perturbation(model, batch, cfg.rho, cfg.scope)
        anchors = _margins_at_offset(model, batch, pert.epsilon)
    else:
        anchors = np.empty(len(batch))
        for i, pair in enumerate(batch):
            pert = instance_perturbation(model, pair, cfg.rho, cfg.scope)
            anchors[i] = _margins_at_offset(model, [pair], pert.epsilon)[0]
    gaps = base - anchors
    weights = gapo_weights(gaps, cfg.beta, cfg.gamma)
    return [
        AnchorRecord(p.pair_id, float(base[i]), float(anchors[i]),
                     float(gaps[i]), float(weights[i]))
        for i, p in enumerate(batch)
    ]


def gapo_weights(gaps, beta: float, gamma: float) -> np.ndarray:
    """Instance weights beta * sigmoid(gamma - beta * gap), in (0, beta)."""
    if beta <= 0:
        raise ValueError("beta must be > 0")
    return beta * expit(gamma - beta * np.asarray(gaps, dtype=np.float64))


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def gapo_objective(model: pol.PolicyModel, batch: Sequence[PreferencePair],
                   cfg: GapoConfig, anchor_margins: np.ndarray) -> Callable:
    """Engine objective with the anchor margins baked in as constants.

    Freezing the anchors implements the stop-gradient: differentiation
    never touches the perturbed forward pass.
    """
    anchors = np.asarray(anchor_margins, dtype=np.float64).copy()

    def objective(th):
        gaps = eg.sub(margins_node(model, th, batch), anchors)
        z = eg.sub(eg.mul(gaps, cfg.beta), cfg.gamma)
        return eg.mean(eg.neg(eg.logsigmoid(z)))

    return objective


def gapo_loss(model: pol.PolicyModel, batch: Sequence[PreferencePair],
              cfg: GapoConfig) -> tuple[float, list[AnchorRecord]]:
    """Anchored logistic loss and the records behind it."""
    records = anchor_records(model, batch, cfg)
    anchors = np.array([r.anchor_margin for r in records])
    loss = eg.value(gapo_objective(model, batch, cfg, anchors), model.params)
    return loss, records


def reference_logprob_cache(reference: pol.ReferenceModel,
                            batch: Sequence[PreferencePair]) -> dict[int, tuple[float, float]]:
    """Frozen-reference log-likelihoods keyed by pair_id (reusable across steps)."""
    n = len(batch)
    seqs = [(p.x, p.y_w) for p in batch] + [(p.x, p.y_l) for p in batch]
    lps = pol.sequence_logprob_values(reference, seqs)
    return {p.pair_id: (float(lps[i]), float(lps[n + i])) for i, p in enumerate(batch)}


def dpo_objective(model: pol.PolicyModel, reference: pol.PolicyModel,
                  batch: Sequence[PreferencePair], beta: float,
                  ref_cache: dict[int, tuple[float, float]] | None = None) -> Callable:
    if model.vocab_size != reference.vocab_size or model.arch != reference.arch:
        raise ValueError("reference must be layout-compatible with the policy")
    n = len(batch)
    if ref_cache is None:
        ref_cache = reference_logprob_cache(reference, batch)
    ref_diff = np.array([ref_cache[p.pair_id][0] - ref_cache[p.pair_id][1]
                         for p in batch])

    def objective(th):
        lps = pol.batch_logprobs(model, th, [(p.x, p.y_w) for p in batch]
                                 + [(p.x, p.y_l) for p in batch])
        pol_diff = eg.sub(eg.take(lps, np.arange(n)), eg.take(lps, np.arange(n, 2 * n)))
        z = eg.mul(eg.sub(pol_diff, ref_diff), beta)
        return eg.mean(eg.neg(eg.logsigmoid(z)))

    return objective


def dpo_loss(model: pol.PolicyModel, reference: pol.PolicyModel,
             batch: Sequence[PreferencePair], beta: float) -> float:
    """Reference-anchored logistic loss on unnormalized log-likelihood ratios."""
    return eg.value(dpo_objective(model, reference, batch, beta), model.params)


def simpo_objective(model: pol.PolicyModel, batch: Sequence[PreferencePair],
                    beta: float, gamma: float) -> Callable:
    if beta <= 0:
        raise ValueError("beta must be > 0")

    def objective(th):
        z = eg.sub(eg.mul(margins_node(model, th, batch), beta), gamma)
        return eg.mean(eg.neg(eg.logsigmoid(z)))

    return objective


def simpo_loss(model: pol.PolicyModel, batch: Sequence[PreferencePair],
               beta: float, gamma: float) -> float:
    """Reference-free logistic loss on beta * margin - gamma."""
    return eg.value(simpo_objective(model, batch, beta, gamma), model.params)


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------


def write_anchor_records_csv(records: Sequence[AnchorRecord], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(ANCHOR_CSV_HEADER)
        for r in records:
            w.writerow([r.pair_id, repr(r.margin), repr(r.anchor_margin),
                        repr(r.gap), repr(r.weight)])


def read_anchor_records_csv(path) -> list[AnchorRecord]:
    with open(path, "r", newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ANCHOR_CSV_HEADER:
        raise ValueError(f"expected header {ANCHOR_CSV_HEADER}, got {rows[:1]}")
    return [AnchorRecord(int(pid), float(m), float(am), float(g), float(w))
            for pid, m, am, g, w in rows[1:]]
