"""Command-line front end for reproducible experiments.

Commands: gen, sft, train, eval, valuate, prune, spectrum, sweep.  Every
option can come from a ``key=value`` config file (``--config``, ``#``
comments allowed) with explicit flags taking precedence; unknown config
keys are rejected.  Each run writes its fully resolved configuration next
to its outputs.  Exit codes: 0 success, 2 configuration error, 1 runtime
error.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import analysis, datagen, objectives, policy, trainer
from .params import ScopeMask

__all__ = ["main", "ConfigError"]


class ConfigError(Exception):
    """Bad flag/config value; maps to exit code 2."""


_REQUIRED = object()


def _parse_bool(s) -> bool:
    if isinstance(s, bool):
        return s
    if str(s).lower() in ("1", "true", "yes", "on"):
        return True
    if str(s).lower() in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {s!r}")


def _csv_ints(s) -> tuple[int, ...]:
    return tuple(int(v) for v in str(s).split(",") if v != "")


def _csv_floats(s) -> tuple[float, ...]:
    return tuple(float(v) for v in str(s).split(",") if v != "")


def _csv_strs(s) -> tuple[str, ...]:
    return tuple(v.strip() for v in str(s).split(",") if v.strip())


@dataclass(frozen=True)
class Opt:
    key: str
    type: Callable
    default: object
    help: str = ""
    is_flag: bool = False


def _table(*opts: Opt) -> dict[str, Opt]:
    return {o.key: o for o in opts}


_COMMON_TRAIN = [
    Opt("beta", float, 2.5, "inverse temperature"),
    Opt("gamma", float, 0.1, "target margin"),
    Opt("rho", float, 0.05, "perturbation radius"),
    Opt("strategy", str, "batch", "anchor strategy: batch|instance"),
    Opt("scope", str, "full", "perturbation scope: full or a segment name"),
    Opt("optimizer", str, "adam", "sgd|adam"),
    Opt("lr", float, 5e-3, "learning rate"),
    Opt("batch_size", int, 16, "pairs per step"),
    Opt("epochs", int, 3, "training epochs"),
    Opt("seed", int, 0, "run seed"),
]

TABLES: dict[str, dict[str, Opt]] = {
    "gen": _table(
        Opt("out", str, _REQUIRED, "output JSONL path"),
        Opt("pairs", int, 1000, "total pairs (train + test)"),
        Opt("vocab", int, 16, "vocabulary size"),
        Opt("prompt_min", int, 2, ""),
        Opt("prompt_max", int, 6, ""),
        Opt("resp_min", int, 4, ""),
        Opt("resp_max", int, 12, ""),
        Opt("semantic", _csv_ints, (1, 2, 3), "semantic token ids"),
        Opt("length_bias", float, 0.0, "spurious length bias in [0,1]"),
        Opt("test_fraction", float, 0.2, ""),
        Opt("seed", int, 0, ""),
        Opt("flip_random", float, 0.0, "random label flip rate"),
        Opt("flip_length", float, 0.0, "length-dependent flip rate"),
    ),
    "sft": _table(
        Opt("data", str, _REQUIRED, "dataset JSONL"),
        Opt("out", str, _REQUIRED, "output directory"),
        Opt("arch", str, "mlp-lm", "tabular-bigram|mlp-lm"),
        Opt("vocab", int, 16, ""),
        Opt("context_window", int, 12, ""),
        Opt("embed_dim", int, 32, ""),
        Opt("hidden_dim", int, 16, ""),
        Opt("init_scale", float, 0.1, "0 gives the uniform model"),
        Opt("epochs", int, 3, ""),
        Opt("lr", float, 5e-3, ""),
        Opt("batch_size", int, 16, ""),
        Opt("optimizer", str, "adam", ""),
        Opt("seed", int, 0, ""),
    ),
    "train": _table(
        Opt("data", str, _REQUIRED, "dataset JSONL"),
        Opt("init", str, _REQUIRED, "initial checkpoint"),
        Opt("out", str, _REQUIRED, "output directory"),
        Opt("method", str, "gapo", "gapo|dpo|simpo|simpo_sam"),
        Opt("reference", str, None, "frozen reference checkpoint (dpo)"),
        *_COMMON_TRAIN,
    ),
    "eval": _table(
        Opt("ckpt", str, _REQUIRED, "model checkpoint"),
        Opt("data", str, _REQUIRED, "dataset JSONL"),
        Opt("split", str, "test", "train|test"),
        Opt("true_labels", bool, False, "score against pre-noise labels", is_flag=True),
        Opt("out", str, None, "summary JSON path (default: <ckpt>.eval.json)"),
    ),
    "valuate": _table(
        Opt("ckpt", str, _REQUIRED, ""),
        Opt("data", str, _REQUIRED, ""),
        Opt("out", str, _REQUIRED, "valuation CSV path"),
        Opt("beta", float, 2.5, ""),
        Opt("gamma", float, 0.1, ""),
        Opt("rho", float, 0.05, ""),
        Opt("strategy", str, "batch", ""),
        Opt("scope", str, "full", ""),
        Opt("passes", int, 3, "evaluation passes to average"),
        Opt("batch_size", int, 16, ""),
        Opt("seed", int, 0, ""),
    ),
    "prune": _table(
        Opt("data", str, _REQUIRED, ""),
        Opt("records", str, _REQUIRED, "valuation CSV from cmd_valuate"),
        Opt("out", str, _REQUIRED, "pruned JSONL path"),
        Opt("fraction", float, 0.3, "fraction of train pairs to keep"),
        Opt("mode", str, "stable", "stable|unstable|random"),
        Opt("seed", int, 0, ""),
    ),
    "spectrum": _table(
        Opt("ckpt", str, _REQUIRED, ""),
        Opt("data", str, _REQUIRED, ""),
        Opt("out", str, _REQUIRED, "spectrum CSV path"),
        Opt("method", str, "gapo", "loss whose Hessian is probed"),
        Opt("reference", str, None, "reference checkpoint (dpo)"),
        Opt("scope", str, "lm_head", "lm_head|full|<segment>"),
        Opt("iters", int, 32, "Lanczos iterations"),
        Opt("probe_pairs", int, 200, "train pairs in the probe batch"),
        Opt("hvp_mode", str, "fd", "fd|exact"),
        Opt("beta", float, 2.5, ""),
        Opt("gamma", float, 0.1, ""),
        Opt("rho", float, 0.05, ""),
        Opt("seed", int, 0, ""),
    ),
    "sweep": _table(
        Opt("out", str, _REQUIRED, "sweep output directory"),
        Opt("methods", _csv_strs, ("gapo", "dpo", "simpo"), ""),
        Opt("kinds", _csv_strs, ("random",), "noise kinds: random,length"),
        Opt("rates", _csv_floats, (0.0, 0.1, 0.2, 0.3, 0.4), ""),
        Opt("seeds", _csv_ints, (0, 1, 2, 3, 4), ""),
        Opt("pairs", int, 1000, ""),
        Opt("vocab", int, 16, ""),
        Opt("length_bias", float, 0.0, ""),
        Opt("arch", str, "mlp-lm", ""),
        Opt("sft_epochs", int, 2, ""),
        Opt("sft_lr", float, 5e-3, ""),
        Opt("beta", float, 2.5, ""),
        Opt("gamma", float, 0.1, ""),
        Opt("rho", float, 0.05, ""),
        Opt("strategy", str, "batch", ""),
        Opt("scope", str, "full", ""),
        Opt("optimizer", str, "adam", ""),
        Opt("lr", float, 5e-3, ""),
        Opt("batch_size", int, 16, ""),
        Opt("epochs", int, 3, ""),
    ),
}


def _read_config_file(path: str) -> dict[str, str]:
    values: dict[str, str] = {}
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as err:
        raise ConfigError(f"cannot read config file {path}: {err}") from err
    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, val = line.split("=", 1)
        values[key.strip()] = val.strip()
    return values


def _resolve(cmd: str, args: argparse.Namespace) -> dict:
    table = TABLES[cmd]
    file_values: dict[str, str] = {}
    if getattr(args, "config", None):
        file_values = _read_config_file(args.config)
        unknown = set(file_values) - set(table)
        if unknown:
            raise ConfigError(f"unknown config keys for {cmd}: {sorted(unknown)}")
    resolved = {}
    for key, opt in table.items():
        flag_val = getattr(args, key)
        if flag_val is not None:
            raw = flag_val
        elif key in file_values:
            raw = file_values[key]
        else:
            if opt.default is _REQUIRED:
                raise ConfigError(f"missing required option --{key.replace('_', '-')}")
            resolved[key] = opt.default
            continue
        try:
            resolved[key] = _parse_bool(raw) if opt.type is bool else opt.type(raw)
        except ConfigError:
            raise
        except Exception as err:
            raise ConfigError(f"bad value for {key}: {raw!r} ({err})") from err
    return resolved


def _format_value(v) -> str:
    if isinstance(v, (tuple, list)):
        return ",".join(str(x) for x in v)
    return str(v)


def _write_resolved(cfg: dict, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"{k}={_format_value(v)}" for k, v in sorted(cfg.items()) if v is not None]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _scope_for(model: policy.PolicyModel, name: str) -> ScopeMask | None:
    if name == "full":
        return None
    return ScopeMask([name])


def _scope_segments(name: str) -> tuple[str, ...] | None:
    return None if name == "full" else (name,)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_gen(cfg: dict) -> int:
    corpus_cfg = datagen.CorpusConfig(
        vocab_size=cfg["vocab"], n_pairs=cfg["pairs"],
        prompt_len=(cfg["prompt_min"], cfg["prompt_max"]),
        resp_len=(cfg["resp_min"], cfg["resp_max"]),
        semantic_tokens=tuple(cfg["semantic"]), length_bias=cfg["length_bias"],
        test_fraction=cfg["test_fraction"], seed=cfg["seed"])
    ds = datagen.generate_corpus(corpus_cfg)
    if cfg["flip_random"] > 0:
        ds = datagen.inject_random_flips(ds, cfg["flip_random"], cfg["seed"])
    if cfg["flip_length"] > 0:
        ds = datagen.inject_length_flips(ds, cfg["flip_length"], cfg["seed"])
    out = Path(cfg["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    datagen.write_jsonl(ds, out)
    _write_resolved(cfg, out.with_suffix(".config"))
    return 0


def cmd_sft(cfg: dict) -> int:
    ds = datagen.read_jsonl(cfg["data"])
    model = policy.make_model(cfg["arch"], cfg["vocab"], cfg["context_window"],
                              seed=cfg["seed"], init_scale=cfg["init_scale"],
                              embed_dim=cfg["embed_dim"], hidden_dim=cfg["hidden_dim"])
    corpus = [(p.x, p.y_w) for p in ds.train]
    model, nll = policy.sft_train(model, corpus, cfg["epochs"], cfg["lr"],
                                  cfg["seed"], cfg["batch_size"], cfg["optimizer"])
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    policy.save_checkpoint(model, out / "model.ckpt")
    (out / "summary.json").write_text(
        json.dumps({"final_nll": nll, "n_train": len(ds.train)}, indent=2) + "\n",
        encoding="utf-8")
    _write_resolved(cfg, out / "config.txt")
    return 0


def cmd_train(cfg: dict) -> int:
    if cfg["method"] == "dpo" and not cfg.get("reference"):
        raise ConfigError("method=dpo requires --reference")
    ds = datagen.read_jsonl(cfg["data"])
    model = policy.load_checkpoint(cfg["init"])
    reference = None
    if cfg["method"] == "dpo":
        reference = policy.freeze_reference(policy.load_checkpoint(cfg["reference"]))
    run_cfg = trainer.TrainConfig(
        method=cfg["method"], beta=cfg["beta"], gamma=cfg["gamma"], rho=cfg["rho"],
        strategy=cfg["strategy"], scope_segments=_scope_segments(cfg["scope"]),
        optimizer=cfg["optimizer"], lr=cfg["lr"], batch_size=cfg["batch_size"],
        epochs=cfg["epochs"], seed=cfg["seed"])
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    model, log = trainer.train_run(model, ds.train, run_cfg, reference=reference,
                                   metrics_path=out / "metrics.csv",
                                   checkpoint_path=out / "model.ckpt")
    summary = {
        "steps": len(log),
        "final_loss": log[-1].loss if log else None,
        "test_accuracy": (datagen.reward_accuracy(model, ds, "test", True)
                          if ds.test else None),
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n",
                                      encoding="utf-8")
    _write_resolved(cfg, out / "config.txt")
    return 0


def cmd_eval(cfg: dict) -> int:
    ds = datagen.read_jsonl(cfg["data"])
    model = policy.load_checkpoint(cfg["ckpt"])
    acc = datagen.reward_accuracy(model, ds, cfg["split"], cfg["true_labels"])
    print(f"{acc:.6f}")
    out = Path(cfg["out"]) if cfg["out"] else Path(str(cfg["ckpt"]) + ".eval.json")
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps({"accuracy": acc, "split": cfg["split"],
                               "true_labels": cfg["true_labels"],
                               "n_pairs": len(ds.split(cfg["split"]))}, indent=2) + "\n",
                   encoding="utf-8")
    _write_resolved(cfg, out.with_suffix(out.suffix + ".config"))
    return 0


def cmd_valuate(cfg: dict) -> int:
    ds = datagen.read_jsonl(cfg["data"])
    model = policy.load_checkpoint(cfg["ckpt"])
    gcfg = objectives.GapoConfig(cfg["beta"], cfg["gamma"], cfg["rho"],
                                 cfg["strategy"], _scope_for(model, cfg["scope"]))
    records = analysis.valuate_dataset(model, ds, gcfg, passes=cfg["passes"],
                                       seed=cfg["seed"], batch_size=cfg["batch_size"])
    out = Path(cfg["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    analysis.write_valuation_csv(records, out)
    _write_resolved(cfg, out.with_suffix(".config"))
    return 0


def cmd_prune(cfg: dict) -> int:
    ds = datagen.read_jsonl(cfg["data"])
    records = analysis.read_valuation_csv(cfg["records"])
    subset = analysis.select_subset(records, ds, cfg["fraction"], cfg["mode"],
                                    cfg["seed"])
    out = Path(cfg["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    datagen.write_jsonl(subset, out)
    _write_resolved(cfg, out.with_suffix(".config"))
    return 0


def _probe_objective(cfg: dict, model: policy.PolicyModel, ds) -> tuple:
    probe = ds.train[: cfg["probe_pairs"]]
    if not probe:
        raise ConfigError("no train pairs available for the probe batch")
    method = cfg["method"]
    if method == "gapo":
        gcfg = objectives.GapoConfig(cfg["beta"], cfg["gamma"], cfg["rho"], "batch", None)
        records = objectives.anchor_records(model, probe, gcfg)
        anchors = np.array([r.anchor_margin for r in records])
        return objectives.gapo_objective(model, probe, gcfg, anchors), "gapo"
    if method == "dpo":
        if not cfg.get("reference"):
            raise ConfigError("method=dpo requires --reference")
        reference = policy.freeze_reference(policy.load_checkpoint(cfg["reference"]))
        return objectives.dpo_objective(model, reference, probe, cfg["beta"]), "dpo"
    if method in ("simpo", "simpo_sam"):
        return objectives.simpo_objective(model, probe, cfg["beta"], cfg["gamma"]), "simpo"
    raise ConfigError(f"unknown method {method!r}")


def cmd_spectrum(cfg: dict) -> int:
    ds = datagen.read_jsonl(cfg["data"])
    model = policy.load_checkpoint(cfg["ckpt"])
    objective, tag = _probe_objective(cfg, model, ds)
    scope = (ScopeMask.full(model.params) if cfg["scope"] == "full"
             else ScopeMask([cfg["scope"]]))
    report = analysis.lanczos_spectrum(objective, model, scope, cfg["iters"],
                                       seed=cfg["seed"], hvp_mode=cfg["hvp_mode"],
                                       objective_tag=tag,
                                       checkpoint_id=str(cfg["ckpt"]))
    out = Path(cfg["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    analysis.write_spectrum_csv(report, out)
    _write_resolved(cfg, out.with_suffix(".config"))
    return 0


def _sweep_cells(cfg: dict):
    for method in cfg["methods"]:
        for kind in cfg["kinds"]:
            for rate in cfg["rates"]:
                for seed in cfg["seeds"]:
                    yield method, kind, rate, seed


def cmd_sweep(cfg: dict) -> int:
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    _write_resolved(cfg, out / "config.txt")
    sft_dir = out / "_sft"
    sft_dir.mkdir(exist_ok=True)

    base_cache: dict[int, datagen.PreferenceDataset] = {}

    def base_corpus(seed: int) -> datagen.PreferenceDataset:
        if seed not in base_cache:
            base_cache[seed] = datagen.generate_corpus(datagen.CorpusConfig(
                vocab_size=cfg["vocab"], n_pairs=cfg["pairs"],
                length_bias=cfg["length_bias"], seed=seed))
        return base_cache[seed]

    def sft_checkpoint(seed: int) -> Path:
        path = sft_dir / f"seed{seed}.ckpt"
        if not path.exists():
            ds = base_corpus(seed)
            model = policy.make_model(cfg["arch"], cfg["vocab"], seed=seed)
            policy.sft_train(model, [(p.x, p.y_w) for p in ds.train],
                             cfg["sft_epochs"], cfg["sft_lr"], seed,
                             cfg["batch_size"], cfg["optimizer"])
            policy.save_checkpoint(model, path)
        return path

    rows = []
    for method, kind, rate, seed in _sweep_cells(cfg):
        cell = out / "cells" / f"{method}_{kind}_{rate:g}_{seed}"
        summary_path = cell / "summary.json"
        if not summary_path.exists():
            ds = base_corpus(seed)
            if rate > 0:
                ds = (datagen.inject_random_flips(ds, rate, seed) if kind == "random"
                      else datagen.inject_length_flips(ds, rate, seed))
            model = policy.load_checkpoint(sft_checkpoint(seed))
            reference = None
            if method == "dpo":
                reference = policy.freeze_reference(
                    policy.load_checkpoint(sft_checkpoint(seed)))
            run_cfg = trainer.TrainConfig(
                method=method, beta=cfg["beta"], gamma=cfg["gamma"], rho=cfg["rho"],
                strategy=cfg["strategy"], scope_segments=_scope_segments(cfg["scope"]),
                optimizer=cfg["optimizer"], lr=cfg["lr"],
                batch_size=cfg["batch_size"], epochs=cfg["epochs"], seed=seed)
            cell.mkdir(parents=True, exist_ok=True)
            model, log = trainer.train_run(model, ds.train, run_cfg,
                                           reference=reference,
                                           metrics_path=cell / "metrics.csv",
                                           checkpoint_path=cell / "model.ckpt")
            acc = datagen.reward_accuracy(model, ds, "test", use_true_labels=True)
            summary_path.write_text(json.dumps({
                "method": method, "kind": kind, "rate": rate, "seed": seed,
                "accuracy": acc, "steps": len(log)}, indent=2) + "\n",
                encoding="utf-8")
        summary = json.loads(summary_path.read_text(encoding="utf-8"))
        rows.append((method, kind, rate, seed, summary["accuracy"]))

    rows.sort(key=lambda r: (r[0], r[1], r[2], r[3]))
    with open(out / "sweep.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "kind", "rate", "seed", "accuracy"])
        for row in rows:
            w.writerow(row)
    return 0


COMMANDS = {
    "gen": cmd_gen,
    "sft": cmd_sft,
    "train": cmd_train,
    "eval": cmd_eval,
    "valuate": cmd_valuate,
    "prune": cmd_prune,
    "spectrum": cmd_spectrum,
    "sweep": cmd_sweep,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="anchorlab",
                                     description="anchored preference-optimization lab")
    sub = parser.add_subparsers(dest="command", required=True)
    for cmd, table in TABLES.items():
        p = sub.add_parser(cmd, help=f"{cmd} command")
        p.add_argument("--config", default=None, help="key=value config file")
        for opt in table.values():
            flag = "--" + opt.key.replace("_", "-")
            if opt.is_flag:
                p.add_argument(flag, dest=opt.key, action="store_const", const=True,
                               default=None, help=opt.help)
            else:
                p.add_argument(flag, dest=opt.key, default=None, help=opt.help)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        cfg = _resolve(args.command, args)
        return COMMANDS[args.command](cfg)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2
    except Exception as err:  # runtime failure
        print(f"error: {type(err).__name__}: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
