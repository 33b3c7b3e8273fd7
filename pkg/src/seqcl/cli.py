"""Command-line interface: dataset generation, training, sequential
experiments, weight tuning, evaluation and report aggregation.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import glob as globmod
import json
import sys
from pathlib import Path

import numpy as np
import yaml

from . import harness as hn
from . import ndgrad, taskforge
from .clstrat import STRATEGY_NAMES, StrategyError, make_strategy
from .exemplar import FixedPolicy, GrowingPolicy
from .harness import HarnessError, TrainConfig, TrainingDivergedError
from .lambdatune import LambdaSearchConfig, LambdaSearchError
from .ndgrad import NonFiniteError
from .seqmodel import Model, ModelConfig, corpus_error_rate, decode
from .taskforge import DataFormatError, GenParams

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

TASK_FILES = ["task0_a_main.seqcl", "task1_b_main.seqcl",
              "task2_a_rest.seqcl", "task3_b_rest.seqcl"]


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit(2); usage errors are exit 1
        raise UsageError(message)


# ---------------------------------------------------------------------------
# config file

CONFIG_SCHEMA = {
    "experiment": {"methods", "seeds", "output_dir"},
    "data": {"dir", "master_seed", "similarity", "sizes"},
    "model": {"d", "h", "enc_layers", "o", "ctc_weight"},
    "train": {"max_epochs", "patience", "snapshot_count", "batch_size",
              "lr_factor_first", "lr_factor_later", "warmup_steps",
              "fisher_samples", "decode_mode", "beam"},
    "memory": {"policy", "n_per_task", "capacity"},
    "methods": None,  # free-form per-method hyper dicts
}


def load_config(path) -> dict:
    try:
        with open(path) as fh:
            cfg = yaml.safe_load(fh) or {}
    except FileNotFoundError as e:
        raise UsageError(f"config file not found: {path}") from e
    if not isinstance(cfg, dict):
        raise UsageError("config root must be a mapping")
    for section, content in cfg.items():
        if section not in CONFIG_SCHEMA:
            raise UsageError(f"unknown config section {section!r}")
        allowed = CONFIG_SCHEMA[section]
        if allowed is None:
            continue
        if not isinstance(content, dict):
            raise UsageError(f"config section {section!r} must be a mapping")
        for key in content:
            if key not in allowed:
                raise UsageError(f"unknown key {section}.{key!r}; "
                                 f"allowed: {sorted(allowed)}")
    return cfg


def _model_cfg(cfg: dict) -> ModelConfig:
    return ModelConfig(**cfg.get("model", {}))


def _train_cfg(cfg: dict) -> TrainConfig:
    return TrainConfig(**cfg.get("train", {}))


def _memory_policy(cfg: dict):
    mem = cfg.get("memory")
    if not mem:
        return None
    kind = mem.get("policy", "growing")
    if kind == "growing":
        return GrowingPolicy(int(mem.get("n_per_task", 500)))
    if kind == "fixed":
        return FixedPolicy(int(mem.get("capacity", 500)))
    raise UsageError(f"unknown memory policy {kind!r}")


def _datasets(cfg: dict) -> list[taskforge.TaskDataset]:
    data = cfg.get("data", {})
    if "dir" in data:
        root = Path(data["dir"])
        sets = []
        for name in TASK_FILES:
            path = root / name
            if not path.exists():
                raise FileNotFoundError(f"missing dataset file {path}")
            sets.append(taskforge.load_dataset(path))
        return sets
    if "master_seed" in data:
        sizes = tuple(data.get("sizes", (200, 50, 50)))
        return taskforge.generate_family(int(data["master_seed"]),
                                         float(data.get("similarity", 0.8)),
                                         sizes=sizes)
    raise UsageError("config data section needs either 'dir' or 'master_seed'")


# ---------------------------------------------------------------------------
# subcommands

def cmd_gen(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    sizes = tuple(int(x) for x in args.sizes.split(","))
    if len(sizes) != 3:
        raise UsageError("--sizes needs three comma-separated counts")
    family = taskforge.generate_family(args.seed, args.similarity, sizes=sizes)
    for ds, name in zip(family, TASK_FILES):
        path = out / name
        taskforge.save_dataset(ds, path)
        print(path)
    return EXIT_OK


def cmd_train(args) -> int:
    ds = taskforge.load_dataset(args.data)
    cfg = load_config(args.config) if args.config else {}
    model_cfg = _model_cfg(cfg)
    train_cfg = _train_cfg(cfg)
    model = Model(ModelConfig(**{**model_cfg.__dict__, "seed": args.seed}))
    if args.init:
        params = ndgrad.load_checkpoint(args.init)
        lr_factor = train_cfg.lr_factor_later
    else:
        params = model.init_params()
        lr_factor = train_cfg.lr_factor_first
    from .clstrat import Strategy, TrainContext
    ctx = TrainContext(model=model, params=params,
                       rng=np.random.default_rng(args.seed),
                       batch_size=train_cfg.batch_size)
    trained, log = hn.train_task(model, params, ds.train, ds.valid, Strategy(),
                                 ctx, train_cfg, lr_factor,
                                 np.random.default_rng(args.seed + 1))
    ndgrad.save_checkpoint(trained, args.out)
    ter = hn.evaluate_ter(model, trained, ds.test, train_cfg)
    print(f"epochs={log.epochs_run} steps={log.steps} "
          f"valid_ter={log.best_valid_ter * 100:.1f} test_ter={ter * 100:.1f}")
    print(args.out)
    return EXIT_OK


def _parse_seeds(arg, cfg) -> list[int]:
    if arg:
        return [int(s) for s in str(arg).split(",")]
    seeds = cfg.get("experiment", {}).get("seeds", [0])
    if isinstance(seeds, int):
        return list(range(seeds))
    return [int(s) for s in seeds]


def cmd_run(args) -> int:
    cfg = load_config(args.config)
    methods = [args.method] if args.method else \
        cfg.get("experiment", {}).get("methods", ["FT"])
    if isinstance(methods, str):
        methods = [methods]
    seeds = _parse_seeds(args.seeds, cfg)
    out_dir = Path(args.out or cfg.get("experiment", {}).get("output_dir", "out"))
    datasets = _datasets(cfg)
    model_cfg, train_cfg = _model_cfg(cfg), _train_cfg(cfg)
    policy = _memory_policy(cfg)
    hypers = cfg.get("methods", {}) or {}

    for m in methods:
        make_strategy("FT" if m in hn.BASELINES else m,
                      {"lam": 0.5, **{k: v for k, v in (hypers.get(m) or {}).items()
                                      if k not in ("lam", "lam0")}})

    results: dict[str, dict[int, hn.RunResult]] = {}
    for method in methods:
        for seed in seeds:
            res = hn.run_sequence(datasets, method, seed,
                                  hyper=hypers.get(method) or {},
                                  model_cfg=model_cfg, train_cfg=train_cfg,
                                  memory_policy=policy)
            results.setdefault(method, {})[seed] = res
            print(f"{method} seed={seed} awer={res.awer:.1f} "
                  f"bwt={'-' if res.bwt is None else f'{res.bwt:+.1f}'}")

    if "FT" in results:
        for method, by_seed in results.items():
            if method == "FT":
                continue
            for seed, res in by_seed.items():
                ft = results["FT"].get(seed)
                cjt = results.get("CJT", {}).get(seed)
                if ft is not None:
                    hn.comparative_metrics(res, ft, cjt)
    rows = []
    for method, by_seed in results.items():
        for seed, res in by_seed.items():
            path = out_dir / method / f"seed{seed}" / "result.json"
            hn.write_result(res, path)
            rows.append(res.to_jsonable())
    if {"FT"} <= set(results):
        report = hn.aggregate_report(rows)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "aggregate.csv").write_text(hn.report_csv(report))
        (out_dir / "aggregate.json").write_text(json.dumps(report, indent=1) + "\n")
        if report["cov_per_task"]:
            (out_dir / "cov_per_task.csv").write_text(hn.cov_per_task_csv(report))
        print(out_dir / "aggregate.csv")
    return EXIT_OK


def cmd_tune_lambda(args) -> int:
    cfg = load_config(args.config)
    datasets = _datasets(cfg)
    hypers = (cfg.get("methods", {}) or {}).get(args.method, {}) or {}
    hyper = {k: v for k, v in hypers.items() if k != "lam0"}
    hyper["lam"] = "auto"
    hyper["lam0"] = args.lambda0
    res = hn.run_sequence(datasets[:2], args.method, args.seed, hyper=hyper,
                          model_cfg=_model_cfg(cfg), train_cfg=_train_cfg(cfg),
                          memory_policy=_memory_policy(cfg),
                          tune_cfg=LambdaSearchConfig(lam0=args.lambda0))
    trace_csv = res.lambda_search.trace_csv()
    if args.out:
        Path(args.out).write_text(trace_csv)
        print(args.out)
    else:
        sys.stdout.write(trace_csv)
    print(f"lambda={res.lambda_search.lam:g} probes={res.lambda_search.n_probes}")
    return EXIT_OK


def cmd_eval(args) -> int:
    ds = taskforge.load_dataset(args.data)
    params = ndgrad.load_checkpoint(args.ckpt)
    cfg = load_config(args.config) if args.config else {}
    model_cfg = _model_cfg(cfg)
    model = Model(model_cfg)
    if params.total_len != model.n_params():
        raise DataFormatError(
            f"checkpoint holds {params.total_len} parameters, model expects "
            f"{model.n_params()}; pass the matching --config")
    utts = getattr(ds, args.split)
    pairs = [(decode(model, params, u.frames, mode=args.mode, beam=args.beam),
              u.tokens) for u in utts]
    print(f"wer={100.0 * corpus_error_rate(pairs):.1f} n={len(utts)}")
    return EXIT_OK


def cmd_report(args) -> int:
    paths: list[str] = []
    for pattern in args.results:
        hits = globmod.glob(pattern, recursive=True)
        paths.extend(hits if hits else [pattern])
    rows = [hn.load_result(p) for p in paths]
    if not rows:
        raise UsageError("no result files given")
    report = hn.aggregate_report(rows)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "aggregate.csv").write_text(hn.report_csv(report))
        if report["cov_per_task"]:
            (out / "cov_per_task.csv").write_text(hn.cov_per_task_csv(report))
        print(out / "aggregate.csv")
    else:
        sys.stdout.write(hn.report_csv(report))
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser() -> _Parser:
    p = _Parser(prog="seqcl", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic four-task family")
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--similarity", type=float, default=0.8)
    g.add_argument("--out", required=True)
    g.add_argument("--sizes", default="200,50,50")
    g.set_defaults(fn=cmd_gen)

    t = sub.add_parser("train", help="train on a single task dataset")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--init", help="checkpoint to adapt from")
    t.add_argument("--config")
    t.add_argument("--seed", type=int, default=0)
    t.set_defaults(fn=cmd_train)

    r = sub.add_parser("run", help="full sequential experiment from a config file")
    r.add_argument("--config", required=True)
    r.add_argument("--method", choices=list(STRATEGY_NAMES) + ["JT", "CJT"])
    r.add_argument("--seeds", help="comma-separated or count via config")
    r.add_argument("--out")
    r.set_defaults(fn=cmd_run)

    l = sub.add_parser("tune-lambda", help="determine the regularization weight")
    l.add_argument("--config", required=True)
    l.add_argument("--method", required=True)
    l.add_argument("--lambda0", type=float, default=1e4)
    l.add_argument("--seed", type=int, default=0)
    l.add_argument("--out")
    l.set_defaults(fn=cmd_tune_lambda)

    e = sub.add_parser("eval", help="WER of a checkpoint on a dataset split")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", choices=("train", "valid", "test"), default="test")
    e.add_argument("--mode", choices=("greedy", "hybrid"), default="greedy")
    e.add_argument("--beam", type=int, default=4)
    e.add_argument("--config")
    e.set_defaults(fn=cmd_eval)

    rep = sub.add_parser("report", help="aggregate result JSONs into tables")
    rep.add_argument("results", nargs="+")
    rep.add_argument("--out")
    rep.set_defaults(fn=cmd_report)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.fn(args)
    except UsageError as e:
        print(f"seqcl: usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except StrategyError as e:
        print(f"seqcl: usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DataFormatError, ndgrad.CheckpointError, FileNotFoundError,
            json.JSONDecodeError) as e:
        print(f"seqcl: data error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingDivergedError, NonFiniteError, LambdaSearchError) as e:
        print(f"seqcl: numeric failure: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except HarnessError as e:
        print(f"seqcl: error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
