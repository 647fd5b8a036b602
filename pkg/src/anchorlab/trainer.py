"""Optimizers and the perturb-evaluate-restore training loop.

Each step snapshots the parameters before any anchor or SAM perturbation
and verifies, bit for bit, that they are unchanged when the optimizer
update is applied; restoration is always a copy-back of saved values,
never an arithmetic inverse.  A training run owns its model exclusively;
independent runs share nothing and may execute in parallel.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import engine as eg
from . import objectives as obj
from . import policy as pol
from .params import ParamVector, ScopeMask

__all__ = [
    "OptimizerState",
    "StepMetrics",
    "TrainConfig",
    "apply_update",
    "train_step",
    "sam_step",
    "train_run",
    "peek_gradient",
    "write_metrics_csv",
    "cosine_similarity",
]

OBJECTIVE_KINDS = ("gapo", "dpo", "simpo", "simpo_sam")

METRICS_HEADER = ["step", "loss", "mean_margin", "mean_gap", "mean_weight",
                  "grad_norm", "wall_time"]


@dataclass
class OptimizerState:
    """SGD or Adam state over one flat parameter vector."""

    kind: str
    lr: float
    m: np.ndarray | None = None
    v: np.ndarray | None = None
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def create(cls, kind: str, lr: float, dim: int) -> "OptimizerState":
        if kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {kind!r}")
        if kind == "adam":
            return cls(kind, lr, np.zeros(dim), np.zeros(dim))
        return cls(kind, lr)


def apply_update(opt: OptimizerState, params: ParamVector, grad: np.ndarray) -> None:
    """One in-place descent step; raises if the update produces non-finite values."""
    if grad.shape != params.values.shape:
        raise ValueError("gradient does not match parameter layout")
    if opt.kind == "sgd":
        params.values -= opt.lr * grad
    else:
        opt.step += 1
        opt.m = opt.beta1 * opt.m + (1.0 - opt.beta1) * grad
        opt.v = opt.beta2 * opt.v + (1.0 - opt.beta2) * grad * grad
        m_hat = opt.m / (1.0 - opt.beta1 ** opt.step)
        v_hat = opt.v / (1.0 - opt.beta2 ** opt.step)
        params.values -= opt.lr * m_hat / (np.sqrt(v_hat) + opt.eps)
    params.check_finite()


@dataclass(frozen=True)
class StepMetrics:
    step: int
    loss: float
    mean_margin: float
    mean_gap: float
    mean_weight: float
    grad_norm: float
    wall_time: float

    def row(self) -> list:
        return [self.step, repr(self.loss), repr(self.mean_margin),
                repr(self.mean_gap), repr(self.mean_weight),
                repr(self.grad_norm), repr(self.wall_time)]


@dataclass(frozen=True)
class TrainConfig:
    """Everything a preference-training run needs besides the data."""

    method: str = "gapo"
    beta: float = 2.5
    gamma: float = 0.1
    rho: float = 0.05
    strategy: str = "batch"
    scope_segments: tuple[str, ...] | None = None  # None = full parameters
    optimizer: str = "adam"
    lr: float = 5e-3
    batch_size: int = 16
    epochs: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.method not in OBJECTIVE_KINDS:
            raise ValueError(f"unknown method {self.method!r}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("need batch_size >= 1 and epochs >= 0")

    def gapo_config(self) -> obj.GapoConfig:
        scope = ScopeMask(self.scope_segments) if self.scope_segments else None
        return obj.GapoConfig(self.beta, self.gamma, self.rho, self.strategy, scope)


def _loss_weights(margins: np.ndarray, beta: float, gamma: float) -> np.ndarray:
    # effective per-pair logistic weight of a margin loss at the current state
    return obj.gapo_weights(margins, beta, gamma)


def _method_gradient(model: pol.PolicyModel, batch, cfg: TrainConfig,
                     reference: pol.PolicyModel | None,
                     ref_cache) -> tuple[np.ndarray, float, dict]:
    """Gradient, loss, and summary stats for one batch without updating."""
    if cfg.method == "gapo":
        gcfg = cfg.gapo_config()
        records = obj.anchor_records(model, batch, gcfg)
        anchors = np.array([r.anchor_margin for r in records])
        g, loss = eg.grad_and_value(obj.gapo_objective(model, batch, gcfg, anchors),
                                    model.params)
        stats = {
            "mean_margin": float(np.mean([r.margin for r in records])),
            "mean_gap": float(np.mean([r.gap for r in records])),
            "mean_weight": float(np.mean([r.weight for r in records])),
        }
        return g.values, loss, stats
    if cfg.method == "dpo":
        if reference is None:
            raise ValueError("dpo requires a frozen reference model")
        g, loss = eg.grad_and_value(
            obj.dpo_objective(model, reference, batch, cfg.beta, ref_cache),
            model.params)
        margins = obj.margin_values(model, batch)
        stats = {
            "mean_margin": float(margins.mean()),
            "mean_gap": 0.0,
            "mean_weight": float(_loss_weights(margins, cfg.beta, 0.0).mean()),
        }
        return g.values, loss, stats
    # simpo and the simpo half of simpo_sam
    g, loss = eg.grad_and_value(
        obj.simpo_objective(model, batch, cfg.beta, cfg.gamma), model.params)
    margins = obj.margin_values(model, batch)
    stats = {
        "mean_margin": float(margins.mean()),
        "mean_gap": 0.0,
        "mean_weight": float(_loss_weights(margins, cfg.beta, cfg.gamma).mean()),
    }
    return g.values, loss, stats


def sam_step(model: pol.PolicyModel, batch, cfg: TrainConfig,
             opt: OptimizerState, step_index: int = 0) -> StepMetrics:
    """Two-step sharpness-aware update of the reference-free loss.

    Ascend to theta + rho * grad/||grad|| without recording, take the
    gradient there, restore theta by copy-back, and apply that gradient
    at the original point.
    """
    t0 = time.perf_counter()
    objective = obj.simpo_objective(model, batch, cfg.beta, cfg.gamma)
    g1, loss = eg.grad_and_value(objective, model.params)
    norm1 = g1.norm()
    values = model.params.values
    snapshot = values.copy()
    if cfg.rho > 0 and norm1 > obj.DEGENERATE_GRAD_NORM:
        try:
            values += cfg.rho * g1.values / norm1
            g2, _ = eg.grad_and_value(objective, model.params)
        finally:
            values[:] = snapshot
        if not np.array_equal(model.params.values, snapshot):
            raise obj.RestoreMismatchError("SAM ascent restore failed")
        grad = g2.values
    else:
        grad = g1.values
    margins = obj.margin_values(model, batch)
    if not np.isfinite(loss):
        raise pol.TrainingDivergedError(step_index)
    apply_update(opt, model.params, grad)
    return StepMetrics(step_index, loss, float(margins.mean()), 0.0,
                       float(_loss_weights(margins, cfg.beta, cfg.gamma).mean()),
                       float(np.linalg.norm(grad)), time.perf_counter() - t0)


def train_step(model: pol.PolicyModel, batch, cfg: TrainConfig, opt: OptimizerState,
               reference: pol.PolicyModel | None = None, ref_cache=None,
               step_index: int = 0) -> StepMetrics:
    """One optimization step with the bit-exact restore guarantee.

    For gapo this performs exactly one anchor construction followed by one
    gradient step on the frozen-anchor loss; the parameters seen by the
    optimizer are bit-identical to those before the anchor was built.
    """
    if cfg.method == "simpo_sam":
        return sam_step(model, batch, cfg, opt, step_index)
    t0 = time.perf_counter()
    snapshot = model.params.values.copy()
    grad, loss, stats = _method_gradient(model, batch, cfg, reference, ref_cache)
    if not np.array_equal(model.params.values, snapshot):
        raise obj.RestoreMismatchError(f"parameters changed during step {step_index}")
    if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
        raise pol.TrainingDivergedError(step_index)
    apply_update(opt, model.params, grad)
    return StepMetrics(step_index, loss, stats["mean_margin"], stats["mean_gap"],
                       stats["mean_weight"], float(np.linalg.norm(grad)),
                       time.perf_counter() - t0)


def peek_gradient(model: pol.PolicyModel, batch, cfg: TrainConfig,
                  reference: pol.PolicyModel | None = None) -> np.ndarray:
    """The raw gradient a method would use on this batch, without updating.

    For simpo_sam this is the gradient taken at the ascended point (the
    vector SAM hands to its base optimizer).
    """
    if cfg.method == "simpo_sam":
        objective = obj.simpo_objective(model, batch, cfg.beta, cfg.gamma)
        g1 = eg.grad(objective, model.params)
        norm1 = g1.norm()
        if cfg.rho == 0 or norm1 <= obj.DEGENERATE_GRAD_NORM:
            return g1.values
        values = model.params.values
        snapshot = values.copy()
        try:
            values += cfg.rho * g1.values / norm1
            g2 = eg.grad(objective, model.params)
        finally:
            values[:] = snapshot
        if not np.array_equal(model.params.values, snapshot):
            raise obj.RestoreMismatchError("SAM ascent restore failed")
        return g2.values
    grad, _, _ = _method_gradient(model, batch, cfg, reference, None)
    return grad


def train_run(model: pol.PolicyModel, dataset, cfg: TrainConfig,
              reference: pol.PolicyModel | None = None,
              metrics_sink: Callable[[StepMetrics], None] | None = None,
              metrics_path=None, checkpoint_path=None) -> tuple[pol.PolicyModel, list[StepMetrics]]:
    """Seeded epochs of shuffled fixed-size batches; returns model and log.

    ``dataset`` is a list of preference pairs or anything with a ``train``
    attribute holding one.  The shuffle is a Fisher-Yates permutation drawn
    from the run seed and advanced once per epoch.
    """
    pairs = list(getattr(dataset, "train", dataset))
    if not pairs:
        raise ValueError("dataset must be non-empty")
    if cfg.method == "dpo" and reference is None:
        raise ValueError("dpo requires a frozen reference model")
    ref_cache = (obj.reference_logprob_cache(reference, pairs)
                 if cfg.method == "dpo" else None)
    opt = OptimizerState.create(cfg.optimizer, cfg.lr, model.n_params())
    rng = np.random.default_rng(cfg.seed)
    log: list[StepMetrics] = []
    step = 0
    for _ in range(cfg.epochs):
        order = rng.permutation(len(pairs))
        for lo in range(0, len(pairs), cfg.batch_size):
            batch = [pairs[i] for i in order[lo: lo + cfg.batch_size]]
            metrics = train_step(model, batch, cfg, opt, reference, ref_cache, step)
            log.append(metrics)
            if metrics_sink is not None:
                metrics_sink(metrics)
            step += 1
    if metrics_path is not None:
        write_metrics_csv(log, metrics_path)
    if checkpoint_path is not None:
        pol.save_checkpoint(model, checkpoint_path)
    return model, log


def write_metrics_csv(log: Sequence[StepMetrics], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(METRICS_HEADER)
        for m in log:
            w.writerow(m.row())


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.dot(a, b) / (na * nb))
