"""Command-line entry point: train targets, run attack matrices, dissect and serve models.

Every command writes its outputs under ``--out`` and stamps them with a
short hash of the effective configuration, so reruns with the same inputs
produce byte-identical files.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import spearmanr

from . import worlds
from .defenses import DefensePolicy
from .extraction import AttackConfig, MhConfig, run_black_box_accuracy, run_partial_black_box, run_white_box
from .extraction import transfer_learning_study
from .gan import (ConfigError, LatentPrior, TrainConfig, generate, load_checkpoint, save_checkpoint,
                  train_target)
from .metrics import REPORT_FIELDS, Judge, class_proportions, frechet_between, js_divergence, kmeans
from .provider import Capability, ProviderServer, QuotaError, TargetProvider
from .worlds import SampleBatch, high_quality_fraction

log = logging.getLogger("ganextract")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3
SCENARIOS = ("black_box", "partial_black_box", "white_box")
ATTACK_COLUMNS = ("config_hash", "scenario", "budget", "real_fraction", "defense", "seed", *REPORT_FIELDS,
                  "selected_step", "error")


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:12]


def load_config(path) -> dict:
    if path is None:
        return {}
    try:
        with open(path) as fh:
            data = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file {path} does not exist") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    return data


def parse_world(value) -> worlds.MixtureSpec:
    if value is None or value == "grid25":
        return worlds.grid25()
    if value == "shifted_grid25":
        return worlds.shifted_grid25()
    if isinstance(value, dict):
        try:
            return worlds.MixtureSpec.from_dict(value)
        except (KeyError, ValueError) as exc:
            raise ConfigError(f"invalid world: {exc}") from None
    raise ConfigError(f"unknown world {value!r}")


def _train_config(data: dict | None, **overrides) -> TrainConfig:
    try:
        return TrainConfig(**{**(data or {}), **overrides})
    except TypeError as exc:
        raise ConfigError(f"invalid training config: {exc}") from None


def _write_csv(path: Path, header, rows):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def _write_json(path: Path, data):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


def _fmt(value):
    if isinstance(value, float):
        return repr(value)
    return "" if value is None else value


# -- experiment config -----------------------------------------------------

@dataclass
class ExperimentConfig:
    """Attack matrix: scenario x budget x real fraction x defense x seed."""

    target: str
    world: dict | str = "grid25"
    scenarios: list = field(default_factory=lambda: ["black_box"])
    budgets: list = field(default_factory=lambda: [50_000])
    real_fractions: list = field(default_factory=lambda: [0.1])
    defenses: list = field(default_factory=lambda: [{"kind": "none"}])
    seeds: list = field(default_factory=lambda: [0])
    attack: dict = field(default_factory=dict)
    mh: dict = field(default_factory=dict)
    eval_n: int = 50_000
    k: int = 30

    def __post_init__(self):
        if not self.seeds:
            raise ConfigError("seeds must not be empty")
        if not self.budgets or any(b >= c for b, c in zip(self.budgets, self.budgets[1:])):
            raise ConfigError("budgets must be non-empty and strictly increasing")
        unknown = set(self.scenarios) - set(SCENARIOS)
        if unknown:
            raise ConfigError(f"unknown scenarios {sorted(unknown)}")
        for d in self.defenses:
            DefensePolicy.from_dict(d)

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(f"invalid experiment config: {exc}") from None


def _cells(exp: ExperimentConfig):
    for scenario in exp.scenarios:
        fractions = [0.0] if scenario == "black_box" else exp.real_fractions
        for budget in exp.budgets:
            for fraction in fractions:
                for defense in exp.defenses:
                    for seed in exp.seeds:
                        yield scenario, budget, fraction, defense, seed


_JUDGES: dict = {}


def _run_cell(args):
    exp, scenario, budget, fraction, defense, seed = args
    target = load_checkpoint(exp.target)
    corpus_path = Path(exp.target) / "corpus.npz"
    corpus = SampleBatch.load_npz(corpus_path) if corpus_path.exists() else None
    world = parse_world(exp.world)
    key = (exp.target, seed)
    if key not in _JUDGES:
        _JUDGES[key] = Judge(target, world, n=exp.eval_n, seed=seed, k=exp.k)
    judge = _JUDGES[key]
    policy = DefensePolicy.from_dict(defense)
    attack = AttackConfig.from_dict(exp.attack)
    attack.train = attack.train.replace(seed=seed)
    grant = max(exp.real_fractions + [0.1]) if corpus is not None else 0.0
    cap = Capability(real_fraction=grant, discriminator_access=scenario == "white_box")
    provider = TargetProvider(target, cap, corpus=corpus, defense=None if policy.kind == "none" else policy,
                              seed=seed)
    row = {"scenario": scenario, "budget": budget, "real_fraction": fraction, "defense": policy.kind,
           "seed": seed, "error": ""}
    try:
        if scenario == "black_box":
            run = run_black_box_accuracy(provider, budget, attack, judge)
        elif scenario == "partial_black_box":
            run = run_partial_black_box(provider, budget, fraction, attack, judge)
        else:
            run = run_white_box(provider, budget, attack, judge, mh=MhConfig(**exp.mh), real_fraction=fraction,
                                seed=seed)
        row.update(run.report.as_dict())
        row["selected_step"] = run.selected_step
    except QuotaError as exc:
        row["error"] = f"quota: {exc}"
    return row


def cmd_attack(cfg: dict, out: Path, threads: int = 1) -> dict:
    exp = ExperimentConfig.from_dict(cfg)
    digest = config_hash(cfg)
    cells = [(exp, *c) for c in _cells(exp)]
    if threads > 1:
        with ProcessPoolExecutor(threads) as pool:
            rows = list(pool.map(_run_cell, cells))
    else:
        rows = [_run_cell(c) for c in cells]
    _write_csv(out / "results.csv", ATTACK_COLUMNS,
               [[digest] + [_fmt(r.get(c)) for c in ATTACK_COLUMNS[1:]] for r in rows])
    summary = {"config_hash": digest, "cells": len(rows), "trends": []}
    if len(exp.budgets) > 1:
        groups: dict = {}
        for r in rows:
            if not r["error"]:
                groups.setdefault((r["scenario"], r["real_fraction"], r["defense"], r["seed"]), []).append(
                    (r["budget"], r["accuracy"]))
        for (scenario, fraction, defense, seed), pts in groups.items():
            if len(pts) < 2:
                continue
            budgets, accs = zip(*pts)
            rho = float(spearmanr(budgets, accs)[0]) if len(set(accs)) > 1 else 0.0
            summary["trends"].append({"scenario": scenario, "real_fraction": fraction, "defense": defense,
                                      "seed": seed, "spearman": rho, "monotone": rho == -1.0})
    _write_json(out / "summary.json", summary)
    return summary


# -- other commands --------------------------------------------------------

def cmd_train_target(cfg: dict, out: Path, seed: int | None = None) -> dict:
    world = parse_world(cfg.get("world"))
    train = _train_config(cfg.get("train"), **({} if seed is None else {"seed": seed}))
    prior = LatentPrior(**cfg.get("prior", {}))
    corpus_size = int(cfg.get("corpus_size", 200_000))
    model, corpus = train_target(world, train, corpus_size=corpus_size, prior=prior)
    save_checkpoint(model, out)
    corpus.save_npz(out / "corpus.npz")
    eval_n = int(cfg.get("eval_n", 50_000))
    samples = generate(model, eval_n, seed=[train.seed, 5])
    real = worlds.sample(world, eval_n, seed=[train.seed, 6])
    effective = {**cfg, "train": asdict(train)}
    row = {"config_hash": config_hash(effective), "seed": train.seed, "steps": train.steps,
           "frechet_to_world": frechet_between(samples, real), "hq_fraction": high_quality_fraction(samples, world)}
    _write_csv(out / "metrics.csv", list(row), [[_fmt(v) for v in row.values()]])
    return row


def cmd_dissect(inputs, k: int, out: Path, world_spec=None, n: int = 50_000, seed: int = 0) -> dict:
    """Shared k-means on world samples, then per-input class proportions and pairwise JS.

    Checkpoints share latent codes (common random numbers); each ``world``
    entry is an independent resample.
    """
    if len(inputs) < 2:
        raise ConfigError("dissect needs at least two checkpoints or world references")
    world = parse_world(world_spec)
    reference = kmeans(worlds.sample(world, n, seed=[seed, 0]).points, k, seed=seed)
    props = []
    for i, item in enumerate(inputs):
        if item == "world":
            pts = worlds.sample(world, n, seed=[seed, 1000 + i]).points
        else:
            pts = generate(load_checkpoint(item), n, seed=[seed, 1]).points
        props.append(class_proportions(pts, reference))
    table = [[js_divergence(p, q) for q in props] for p in props]
    result = {"config_hash": config_hash({"inputs": list(inputs), "k": k, "n": n, "seed": seed,
                                          "world": world.to_dict()}),
              "inputs": list(inputs), "centroids": reference.centroids.tolist(),
              "world_proportions": reference.proportions.tolist(),
              "proportions": [p.tolist() for p in props],
              "js_to_world": [js_divergence(p, reference.proportions) for p in props], "js": table}
    _write_json(out / "dissect.json", result)
    return result


def cmd_transfer(cfg: dict, out: Path, seed: int | None = None) -> dict:
    if "extracted" not in cfg:
        raise ConfigError("transfer config needs an 'extracted' checkpoint")
    extracted = load_checkpoint(cfg["extracted"])
    world = parse_world(cfg.get("world", "shifted_grid25"))
    train = _train_config(cfg.get("train"), **({} if seed is None else {"seed": seed}))
    rec = transfer_learning_study(extracted, world, train, data_size=int(cfg.get("data_size", 50_000)),
                                  eval_n=int(cfg.get("eval_n", 20_000)), eval_every=int(cfg.get("eval_every", 500)),
                                  seed=train.seed)
    digest = config_hash({**cfg, "train": asdict(train)})
    _write_csv(out / "transfer.csv", ["config_hash", "step", "finetune", "scratch"],
               [[digest, s, repr(a), repr(b)] for s, a, b in zip(rec.steps, rec.finetune, rec.scratch)])
    return {"config_hash": digest, "final_finetune": rec.final_finetune, "final_scratch": rec.final_scratch}


def build_server(checkpoint, capabilities=(), real_fraction: float = 0.0, budget: int | None = None,
                 defense: dict | None = None, host="127.0.0.1", port: int = 0, seed: int = 0) -> ProviderServer:
    target = load_checkpoint(checkpoint)
    corpus_path = Path(checkpoint) / "corpus.npz"
    corpus = SampleBatch.load_npz(corpus_path) if corpus_path.exists() else None
    policy = DefensePolicy.from_dict(defense) if defense else None
    cap = Capability.from_names(capabilities, real_fraction)
    provider = TargetProvider(target, cap, budget=budget, corpus=corpus, defense=policy, seed=seed)
    return ProviderServer(provider, host, port)


# -- argument handling -----------------------------------------------------

def make_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--seed", type=int, default=None, help="override the config seed(s)")
    common.add_argument("--out", default="out", help="output directory")
    common.add_argument("--threads", type=int, default=1, help="worker processes for attack matrices")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="ganextract", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("train-target", parents=[common], help="train a target GAN and save its checkpoint")
    sub.add_parser("attack", parents=[common], help="run an extraction matrix and write results.csv")
    p = sub.add_parser("dissect", parents=[common], help="class-distribution and JS table")
    p.add_argument("inputs", nargs="+", help="checkpoint directories or the word 'world'")
    p.add_argument("--k", type=int, default=30)
    p.add_argument("--n", type=int, default=50_000)
    p.add_argument("--world", default="grid25")
    p = sub.add_parser("serve", parents=[common], help="serve a checkpoint over the wire protocol")
    p.add_argument("checkpoint")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=0)
    p.add_argument("--capabilities", default="", help="comma list of latent,real,discriminator")
    p.add_argument("--real-fraction", type=float, default=0.0)
    p.add_argument("--budget", type=int, default=None)
    p.add_argument("--defense", default=None, help='JSON such as {"kind":"linear_interp","k":9}')
    sub.add_parser("transfer", parents=[common], help="fine-tune vs scratch on a new world")
    return parser


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    out = Path(args.out)
    try:
        if args.command == "train-target":
            print(json.dumps(cmd_train_target(load_config(args.config), out, args.seed)))
        elif args.command == "attack":
            cfg = load_config(args.config)
            if args.seed is not None:
                cfg["seeds"] = [args.seed]
            summary = cmd_attack(cfg, out, args.threads)
            print(json.dumps({k: summary[k] for k in ("config_hash", "cells")}))
        elif args.command == "dissect":
            cfg = load_config(args.config)
            res = cmd_dissect(args.inputs, cfg.get("k", args.k), out, cfg.get("world", args.world),
                              cfg.get("n", args.n), args.seed or 0)
            print(json.dumps({"config_hash": res["config_hash"], "js_to_world": res["js_to_world"]}))
        elif args.command == "serve":
            try:
                defense = json.loads(args.defense) if args.defense else None
            except json.JSONDecodeError as exc:
                raise ConfigError(f"invalid defense JSON: {exc}") from None
            names = [c for c in args.capabilities.split(",") if c]
            server = build_server(args.checkpoint, names, args.real_fraction, args.budget, defense, args.host,
                                  args.port, args.seed or 0)
            print(f"listening on {args.host}:{server.port}", flush=True)
            try:
                server.serve_forever()
            except KeyboardInterrupt:
                pass
            finally:
                server.server_close()
        elif args.command == "transfer":
            print(json.dumps(cmd_transfer(load_config(args.config), out, args.seed)))
    except (ConfigError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
