"""Scikit-learn style facade over the preference-optimization lab.

``PreferenceOptimizer`` is a conventional estimator: hyperparameters are
stored verbatim in ``__init__`` (so ``get_params``/``set_params``/``clone``
work), all validation and work happen in ``fit``, and fitted state lives in
trailing-underscore attributes.  ``X`` is a sequence of preference pairs
(or a PreferenceDataset, whose train split is used).
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from . import analysis, datagen, objectives, policy, trainer
from .validation import as_pairs, check_in, check_range

__all__ = ["PreferenceOptimizer"]


class PreferenceOptimizer(BaseEstimator):
    """Fit a desk-scale policy to pairwise preferences and score its reward ranking.

    Parameters mirror the training configuration: ``method`` selects the
    objective (gapo, dpo, simpo, simpo_sam), ``beta``/``gamma``/``rho``
    the loss and perturbation, ``strategy`` and ``scope`` the anchor
    construction.  ``fit`` builds a fresh seeded model, optionally runs
    supervised warm-up on chosen responses (which also provides the frozen
    reference for dpo), then trains with the selected objective.
    """

    def __init__(self, method: str = "gapo", arch: str = "mlp-lm",
                 vocab_size: int = 16, context_window: int = 12,
                 beta: float = 2.5, gamma: float = 0.1, rho: float = 0.05,
                 strategy: str = "batch", scope: str = "full",
                 optimizer: str = "adam", lr: float = 5e-3,
                 batch_size: int = 16, epochs: int = 3,
                 sft_epochs: int = 2, sft_lr: float = 5e-3, seed: int = 0):
        self.method = method
        self.arch = arch
        self.vocab_size = vocab_size
        self.context_window = context_window
        self.beta = beta
        self.gamma = gamma
        self.rho = rho
        self.strategy = strategy
        self.scope = scope
        self.optimizer = optimizer
        self.lr = lr
        self.batch_size = batch_size
        self.epochs = epochs
        self.sft_epochs = sft_epochs
        self.sft_lr = sft_lr
        self.seed = seed

    def _train_config(self) -> trainer.TrainConfig:
        scope_segments = None if self.scope == "full" else (self.scope,)
        return trainer.TrainConfig(
            method=self.method, beta=self.beta, gamma=self.gamma, rho=self.rho,
            strategy=self.strategy, scope_segments=scope_segments,
            optimizer=self.optimizer, lr=self.lr, batch_size=self.batch_size,
            epochs=self.epochs, seed=self.seed,
        )

    def fit(self, X, y=None):
        check_in("method", self.method, trainer.OBJECTIVE_KINDS)
        check_in("arch", self.arch, policy.ARCHS)
        check_range("beta", self.beta, 0.0, open_lo=True)
        check_range("gamma", self.gamma, 0.0)
        check_range("rho", self.rho, 0.0)
        pairs = as_pairs(X)
        model = policy.make_model(self.arch, self.vocab_size, self.context_window,
                                  seed=self.seed)
        for p in pairs:
            for tok in p.x + p.y_w + p.y_l:
                if tok >= self.vocab_size:
                    raise ValueError(f"token id {tok} out of range for vocab_size "
                                     f"{self.vocab_size}")
        if self.sft_epochs > 0:
            _, self.sft_nll_ = policy.sft_train(
                model, [(p.x, p.y_w) for p in pairs], self.sft_epochs,
                self.sft_lr, self.seed, self.batch_size, self.optimizer)
        else:
            self.sft_nll_ = None
        self.reference_ = (policy.freeze_reference(model)
                           if self.method == "dpo" else None)
        cfg = self._train_config()
        self.model_, self.history_ = trainer.train_run(model, pairs, cfg,
                                                       reference=self.reference_)
        self.n_steps_ = len(self.history_)
        return self

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise NotFittedError("call fit before using this estimator")

    def decision_function(self, X) -> np.ndarray:
        """Length-normalized reward margins of the stored (chosen, rejected) order."""
        self._check_fitted()
        return objectives.margin_values(self.model_, as_pairs(X))

    def predict(self, X) -> np.ndarray:
        """1 where the fitted policy strictly prefers the stored chosen response."""
        return (self.decision_function(X) > 0).astype(int)

    def score(self, X, y=None) -> float:
        """Reward accuracy against the stored labels (ties count 0.5)."""
        self._check_fitted()
        return datagen.pairs_reward_accuracy(self.model_, as_pairs(X))

    def anchor_gaps(self, X, passes: int = 3, seed: int = 0) -> np.ndarray:
        """Mean anchor gap per pair (aligned with X order); no parameters change."""
        self._check_fitted()
        pairs = as_pairs(X)
        ds = datagen.PreferenceDataset(pairs, [])
        gcfg = self._train_config().gapo_config()
        records = analysis.valuate_dataset(self.model_, ds, gcfg, passes=passes,
                                           seed=seed, batch_size=self.batch_size)
        by_id = {r.pair_id: r.mean_gap for r in records}
        return np.array([by_id[p.pair_id] for p in pairs])
