"""Desk-scale autoregressive policies over integer token vocabularies.

Two architectures:

* ``tabular-bigram`` — a V x V logit table (single segment ``lm_head``);
  fully transparent, small enough for dense-Hessian oracles.
* ``mlp-lm`` — mean embedding of the last ``context_window`` prefix tokens,
  one tanh hidden layer, and an ``lm_head`` projection; its parameters are
  genuinely coupled across contexts.

Conditioning convention: an empty prefix (no prompt, first response token)
conditions on token id 0.  Sequence log-likelihoods are sums of next-token
log-softmax terms; the length-normalized reward divides by the response
length.  All forward passes are built from engine primitives so the same
code path serves evaluation, gradients, and Hessian-vector products.
"""

from __future__ import annotations

import base64
import json
from functools import lru_cache
from typing import Iterable, Sequence

import numpy as np

from . import engine as eg
from .params import ParamVector, Segment

__all__ = [
    "PolicyError",
    "TrainingDivergedError",
    "PolicyModel",
    "ReferenceModel",
    "make_model",
    "log_prob",
    "p_reward",
    "sequence_logprob_values",
    "batch_logprobs",
    "next_token_probs",
    "sft_train",
    "freeze_reference",
    "save_checkpoint",
    "load_checkpoint",
]

TokenSeq = tuple[int, ...]

ARCHS = ("tabular-bigram", "mlp-lm")


class PolicyError(ValueError):
    """Invalid tokens or model configuration."""


class TrainingDivergedError(RuntimeError):
    def __init__(self, step: int):
        super().__init__(f"training diverged at step {step}: non-finite loss")
        self.step = step


class PolicyModel:
    """An autoregressive policy with flat, segment-named parameters."""

    def __init__(self, arch: str, vocab_size: int, context_window: int,
                 params: ParamVector, dims: dict):
        if arch not in ARCHS:
            raise PolicyError(f"unknown arch {arch!r}; expected one of {ARCHS}")
        if vocab_size < 2 or context_window < 1:
            raise PolicyError("need vocab_size >= 2 and context_window >= 1")
        if "lm_head" not in params.names():
            raise PolicyError("parameter layout must include an 'lm_head' segment")
        self.arch = arch
        self.vocab_size = vocab_size
        self.context_window = context_window
        self.params = params
        self.dims = dict(dims)

    @property
    def frozen(self) -> bool:
        return not self.params.values.flags.writeable

    def n_params(self) -> int:
        return len(self.params)

    def copy(self) -> "PolicyModel":
        return PolicyModel(self.arch, self.vocab_size, self.context_window,
                           self.params.copy(), self.dims)

    def seg_indices(self, name: str) -> np.ndarray:
        s = self.params.segment(name)
        return np.arange(s.offset, s.stop)


class ReferenceModel(PolicyModel):
    """Frozen deep copy of a policy; its parameter buffer is read-only."""

    def __init__(self, source: PolicyModel):
        frozen = source.params.copy()
        frozen.values.setflags(write=False)
        super().__init__(source.arch, source.vocab_size, source.context_window,
                         frozen, source.dims)


def make_model(arch: str = "mlp-lm", vocab_size: int = 16, context_window: int = 12,
               seed: int = 0, init_scale: float = 0.1,
               embed_dim: int = 32, hidden_dim: int = 16) -> PolicyModel:
    """Build a freshly initialized policy (``init_scale=0`` gives the uniform model)."""
    rng = np.random.default_rng(seed)
    V = vocab_size
    if arch == "tabular-bigram":
        parts = [("lm_head", rng.standard_normal((V, V)) * init_scale)]
        dims = {}
    elif arch == "mlp-lm":
        parts = [
            ("embed", rng.standard_normal((V, embed_dim)) * init_scale),
            ("hidden_w", rng.standard_normal((embed_dim, hidden_dim)) * init_scale),
            ("hidden_b", np.zeros(hidden_dim)),
            ("lm_head", rng.standard_normal((hidden_dim, V)) * init_scale),
            ("out_b", np.zeros(V)),
        ]
        dims = {"embed_dim": embed_dim, "hidden_dim": hidden_dim}
    else:
        raise PolicyError(f"unknown arch {arch!r}; expected one of {ARCHS}")
    return PolicyModel(arch, V, context_window, ParamVector.from_named(parts), dims)


# ---------------------------------------------------------------------------
# position plans: static index arrays feeding the engine graph
# ---------------------------------------------------------------------------


def _validate_seq(tokens: Iterable[int], vocab_size: int, what: str) -> TokenSeq:
    seq = tuple(int(t) for t in tokens)
    for t in seq:
        if not 0 <= t < vocab_size:
            raise PolicyError(f"{what} token id {t} out of range [0, {vocab_size})")
    return seq


@lru_cache(maxsize=None)
def _bigram_plan(x: TokenSeq, y: TokenSeq, vocab_size: int):
    _validate_seq(x, vocab_size, "prompt")
    _validate_seq(y, vocab_size, "response")
    if not y:
        raise PolicyError("response must be non-empty")
    full = x + y
    start = len(x)
    prev = np.array([full[start + t - 1] if start + t >= 1 else 0
                     for t in range(len(y))], dtype=np.intp)
    tgt = np.asarray(y, dtype=np.intp)
    return prev, tgt


@lru_cache(maxsize=None)
def _window_plan(x: TokenSeq, y: TokenSeq, vocab_size: int, window: int):
    _validate_seq(x, vocab_size, "prompt")
    _validate_seq(y, vocab_size, "response")
    if not y:
        raise PolicyError("response must be non-empty")
    full = x + y
    start = len(x)
    flat, counts = [], []
    for t in range(len(y)):
        prefix = full[max(0, start + t - window): start + t]
        if not prefix:
            prefix = (0,)
        flat.extend(prefix)
        counts.append(len(prefix))
    return (np.asarray(flat, dtype=np.intp),
            np.asarray(counts, dtype=np.intp),
            np.asarray(y, dtype=np.intp))


def _batch_plan(model: PolicyModel, seqs: Sequence[tuple[TokenSeq, TokenSeq]]):
    V, w = model.vocab_size, model.context_window
    if model.arch == "tabular-bigram":
        prevs, tgts, seq_ids = [], [], []
        for i, (x, y) in enumerate(seqs):
            p, t = _bigram_plan(tuple(x), tuple(y), V)
            prevs.append(p)
            tgts.append(t)
            seq_ids.append(np.full(t.shape[0], i, dtype=np.intp))
        return {
            "prev": np.concatenate(prevs),
            "tgt": np.concatenate(tgts),
            "seq": np.concatenate(seq_ids),
        }
    windows, slots, tgts, seq_ids, counts = [], [], [], [], []
    pos = 0
    for i, (x, y) in enumerate(seqs):
        f, c, t = _window_plan(tuple(x), tuple(y), V, w)
        windows.append(f)
        slots.append(np.repeat(np.arange(pos, pos + t.shape[0], dtype=np.intp), c))
        counts.append(c)
        tgts.append(t)
        seq_ids.append(np.full(t.shape[0], i, dtype=np.intp))
        pos += t.shape[0]
    return {
        "window": np.concatenate(windows),
        "slot": np.concatenate(slots),
        "inv_count": (1.0 / np.concatenate(counts))[:, None],
        "tgt": np.concatenate(tgts),
        "seq": np.concatenate(seq_ids),
    }


def batch_logprobs(model: PolicyModel, th, seqs: Sequence[tuple[TokenSeq, TokenSeq]]):
    """Engine node of shape (n,) holding log pi(y_i | x_i) for each sequence.

    ``th`` is the parameter leaf (Var or DualVar) of the enclosing objective.
    """
    plan = _batch_plan(model, seqs)
    n = len(seqs)
    V = model.vocab_size
    if model.arch == "tabular-bigram":
        table = eg.reshape(eg.take(th, model.seg_indices("lm_head")), (V, V))
        logits = eg.take_rows(table, plan["prev"])
    else:
        d, h = model.dims["embed_dim"], model.dims["hidden_dim"]
        E = eg.reshape(eg.take(th, model.seg_indices("embed")), (V, d))
        W1 = eg.reshape(eg.take(th, model.seg_indices("hidden_w")), (d, h))
        b1 = eg.take(th, model.seg_indices("hidden_b"))
        W2 = eg.reshape(eg.take(th, model.seg_indices("lm_head")), (h, V))
        b2 = eg.take(th, model.seg_indices("out_b"))
        gathered = eg.take_rows(E, plan["window"])
        ctx = eg.mul(eg.segment_sum(gathered, plan["slot"], plan["tgt"].shape[0]),
                     plan["inv_count"])
        hidden = eg.tanh(eg.add(eg.matmul(ctx, W1), b1))
        logits = eg.add(eg.matmul(hidden, W2), b2)
    P = plan["tgt"].shape[0]
    lse = eg.logsumexp(logits, axis=1)
    picked = eg.take(eg.reshape(logits, (P * V,)), np.arange(P) * V + plan["tgt"])
    return eg.segment_sum(eg.sub(picked, lse), plan["seq"], n)


def sequence_logprob_values(model: PolicyModel,
                            seqs: Sequence[tuple[TokenSeq, TokenSeq]]) -> np.ndarray:
    """Evaluate log-likelihoods without differentiation (fresh tape)."""
    tape = eg.Tape()
    th = eg.Var(tape, model.params.values, (), None, "leaf")
    return batch_logprobs(model, th, seqs).value.copy()


def log_prob(model: PolicyModel, x: Sequence[int], y: Sequence[int]) -> float:
    """Sum over response positions of log pi(y_t | x, y_<t); always <= 0."""
    return float(sequence_logprob_values(model, [(tuple(x), tuple(y))])[0])


def p_reward(model: PolicyModel, x: Sequence[int], y: Sequence[int]) -> float:
    """Length-normalized implicit reward: log_prob / |y|."""
    y = tuple(y)
    if not y:
        raise PolicyError("response must be non-empty")
    return log_prob(model, x, y) / len(y)


def next_token_probs(model: PolicyModel, prefix: Sequence[int]) -> np.ndarray:
    """Next-token distribution after ``prefix`` (sums to 1 within 1e-9)."""
    prefix = tuple(prefix)
    V = model.vocab_size
    # probe every candidate token in one batch; softmax terms share the prefix
    lps = sequence_logprob_values(model, [(prefix, (v,)) for v in range(V)])
    return np.exp(lps)


def freeze_reference(model: PolicyModel) -> ReferenceModel:
    """Deep-copy and freeze; later training of the source leaves it bit-identical."""
    return ReferenceModel(model)


def sft_train(model: PolicyModel, corpus: Sequence[tuple[Sequence[int], Sequence[int]]],
              epochs: int, lr: float, seed: int, batch_size: int = 16,
              optimizer: str = "adam") -> tuple[PolicyModel, float]:
    """Maximize mean sequence log-likelihood of chosen responses.

    Returns the trained model (mutated in place) and the final mean NLL.
    """
    from .trainer import OptimizerState, apply_update

    if not corpus:
        raise PolicyError("sft corpus must be non-empty")
    pairs = [(tuple(x), tuple(y)) for x, y in corpus]
    opt = OptimizerState.create(optimizer, lr, model.n_params())
    rng = np.random.default_rng(seed)
    step = 0
    nll = float("nan")
    for _ in range(epochs):
        order = rng.permutation(len(pairs))
        for lo in range(0, len(pairs), batch_size):
            batch = [pairs[i] for i in order[lo: lo + batch_size]]

            def objective(th, batch=batch):
                return eg.neg(eg.mean(batch_logprobs(model, th, batch)))

            try:
                g = eg.grad(objective, model.params)
                nll = eg.value(objective, model.params)
            except eg.NonFiniteError as err:
                raise TrainingDivergedError(step) from err
            if not np.isfinite(nll):
                raise TrainingDivergedError(step)
            apply_update(opt, model.params, g.values)
            step += 1
    if epochs == 0 or step == 0:
        nll = -float(np.mean(sequence_logprob_values(model, pairs)))
    return model, float(nll)


# ---------------------------------------------------------------------------
# checkpoint format: single JSON file, bit-exact float64 round trip
# ---------------------------------------------------------------------------


def save_checkpoint(model: PolicyModel, path) -> None:
    payload = {
        "arch": model.arch,
        "vocab_size": model.vocab_size,
        "context_window": model.context_window,
        "dims": model.dims,
        "segments": [[s.name, s.offset, s.length] for s in model.params.segments],
        "dtype": "float64",
        "values_b64": base64.b64encode(
            np.ascontiguousarray(model.params.values).tobytes()
        ).decode("ascii"),
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh)
        fh.write("\n")


def load_checkpoint(path) -> PolicyModel:
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    values = np.frombuffer(
        base64.b64decode(payload["values_b64"]), dtype=np.float64
    ).copy()
    segments = [Segment(name, off, ln) for name, off, ln in payload["segments"]]
    params = ParamVector(values, segments)
    return PolicyModel(payload["arch"], payload["vocab_size"],
                       payload["context_window"], params, payload.get("dims", {}))
