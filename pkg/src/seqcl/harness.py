"""Training loop and sequential-task experiment orchestration.

One run = one (method, seed): adapt through the task list, consolidate at
task ends, evaluate every earlier task after each one, and emit the results
matrix with metrics and a storage ledger. Baselines FT/JT/CJT share the loop;
the joint baselines train on the union of tasks seen so far and are exempt
from the data-access firewall.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import clmetrics, ndgrad
from .clstrat import Strategy, TrainContext, make_strategy
from .exemplar import ExemplarMemory, FixedPolicy, GrowingPolicy
from .lambdatune import LambdaSearchConfig, LambdaSearchResult, determine_lambda
from .ndgrad import ParamVector, Tape, Tensor
from .seqmodel import (Model, ModelConfig, Utterance, decode, error_rate,
                       feasible, snapshot_average)
from .taskforge import TaskDataset

RESULT_VERSION = 1

BASELINES = ("FT", "JT", "CJT")


class HarnessError(Exception):
    pass


class TrainingDivergedError(HarnessError):
    def __init__(self, diagnostics: dict):
        super().__init__(f"training diverged: {diagnostics}")
        self.diagnostics = diagnostics


@dataclass
class TrainConfig:
    max_epochs: int = 60            # paper-scale constant: 230
    patience: int = 10
    snapshot_count: int = 10
    batch_size: int = 8
    lr_factor_first: float = 10.0
    lr_factor_later: float = 1.0
    warmup_steps: int = 100
    fisher_samples: int = 64
    decode_mode: str = "greedy"
    beam: int = 4

    def __post_init__(self):
        if self.patience > self.max_epochs and self.max_epochs > 0:
            raise HarnessError("patience exceeds max_epochs")
        if self.snapshot_count < 1:
            raise HarnessError("snapshot_count must be >= 1")


class AdamNoam:
    """Adam under an inverse-square-root schedule with linear warmup."""

    def __init__(self, layout: ParamVector, width: int, lr_factor: float,
                 warmup: int, beta1: float = 0.9, beta2: float = 0.98,
                 eps: float = 1e-9):
        self.m = layout.zeros_like()
        self.v = layout.zeros_like()
        self.t = 0
        self.scale = lr_factor * width ** -0.5
        self.warmup = max(1, warmup)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps

    def lr(self) -> float:
        return self.scale * min(self.t ** -0.5, self.t * self.warmup ** -1.5)

    def step(self, params: ParamVector, g: ParamVector) -> ParamVector:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        lr = self.lr()
        out = {}
        for name, p in params.items():
            gm = g[name]
            m = b1 * self.m[name] + (1 - b1) * gm
            v = b2 * self.v[name] + (1 - b2) * gm * gm
            self.m._segments[name] = m
            self.v._segments[name] = v
            mhat = m / (1 - b1 ** self.t)
            vhat = v / (1 - b2 ** self.t)
            out[name] = p - lr * mhat / (np.sqrt(vhat) + self.eps)
        return ParamVector(out)


class AccessMonitor:
    """Data-access firewall: records every utterance whose loss is computed
    and flags reads outside the allowed set."""

    def __init__(self):
        self.allowed: set[int] = set()
        self.exempt = False
        self.reads = 0
        self.violations = 0

    def allow(self, utts, exempt: bool = False) -> None:
        self.allowed = {id(u) for u in utts}
        self.exempt = exempt

    def record(self, utts) -> None:
        self.reads += len(utts)
        if self.exempt:
            return
        for u in utts:
            if id(u) not in self.allowed:
                self.violations += 1


# ---------------------------------------------------------------------------
# evaluation

def decode_hyps(model: Model, params: ParamVector, utts: list[Utterance],
                cfg: TrainConfig) -> list[np.ndarray]:
    return [decode(model, params, u.frames, mode=cfg.decode_mode, beam=cfg.beam)
            for u in utts]


def evaluate_cells(model: Model, params: ParamVector, utts: list[Utterance],
                   cfg: TrainConfig) -> list[tuple[int, int]]:
    return [error_rate(h, u.tokens)
            for h, u in zip(decode_hyps(model, params, utts, cfg), utts)]


def evaluate_ter(model: Model, params: ParamVector, utts: list[Utterance],
                 cfg: TrainConfig) -> float:
    cells = evaluate_cells(model, params, utts, cfg)
    return sum(e for e, _ in cells) / sum(r for _, r in cells)


# ---------------------------------------------------------------------------
# single-task training

@dataclass
class TaskTrainLog:
    epochs_run: int = 0
    steps: int = 0
    stopped_early: bool = False
    best_valid_ter: float = float("inf")
    valid_ter_per_epoch: list[float] = field(default_factory=list)
    skipped_utterances: int = 0


def train_task(model: Model, params: ParamVector, train: list[Utterance],
               valid: list[Utterance], strategy: Strategy, ctx: TrainContext,
               cfg: TrainConfig, lr_factor: float,
               batch_rng: np.random.Generator,
               monitor: AccessMonitor | None = None,
               max_epochs: int | None = None,
               use_early_stop: bool = True,
               use_snapshots: bool = True) -> tuple[ParamVector, TaskTrainLog]:
    """Adapt `params` on one task under the strategy's hooks.

    Per step: compose batches (replay), loss = hybrid + strategy extra,
    gradient transformed (projection), Adam with warmup scaled by lr_factor.
    Early stop on the new task's validation TER; the returned model is the
    average of the last `snapshot_count` end-of-epoch snapshots.
    """
    max_epochs = cfg.max_epochs if max_epochs is None else max_epochs
    opt = AdamNoam(params, model.cfg.h, lr_factor, cfg.warmup_steps)
    log = TaskTrainLog()
    snapshots: list[ParamVector] = []
    params = params.copy()
    ctx.params = params
    stale = 0

    for epoch in range(max_epochs):
        epoch_list = strategy.compose_epoch(train, ctx)
        order = batch_rng.permutation(len(epoch_list))
        for start in range(0, len(epoch_list), cfg.batch_size):
            batch = [epoch_list[i] for i in order[start:start + cfg.batch_size]]
            usable = [u for u in batch if feasible(u)]
            if len(usable) < len(batch):
                log.skipped_utterances += len(batch) - len(usable)
                warnings.warn(f"skipped {len(batch) - len(usable)} utterances "
                              "with infeasible CTC alignments")
            if not usable:
                continue
            weighted = strategy.compose_batch(usable, ctx)
            with Tape() as tape:
                leaves = model.leaves(params)
                total = None
                for part_batch, weight in weighted:
                    if monitor is not None:
                        monitor.record(part_batch)
                    part = model.batch_hybrid_loss(leaves, part_batch)
                    if weight != 1.0:
                        part = ndgrad.mul(part, weight)
                    total = part if total is None else ndgrad.add(total, part)
                extra = strategy.extra_loss(leaves, usable, ctx)
                if extra is not None:
                    total = ndgrad.add(total, extra)
            loss_val = float(total.data)
            if not np.isfinite(loss_val):
                raise TrainingDivergedError({
                    "epoch": epoch, "step": log.steps, "loss": loss_val,
                    "lr": opt.lr() if opt.t else 0.0,
                    "param_norm": params.norm(),
                    "batch_tokens": [u.n_tokens for u in usable],
                })
            g = ndgrad.backward(total, tape).param_grads(leaves)
            g = strategy.transform_grad(g, ctx)
            params = opt.step(params, g)
            ctx.params = params
            log.steps += 1

        log.epochs_run = epoch + 1
        if use_snapshots:
            snapshots.append(params.copy())
            if len(snapshots) > cfg.snapshot_count:
                snapshots.pop(0)
        if valid and use_early_stop:
            ter = evaluate_ter(model, params, valid, cfg)
            log.valid_ter_per_epoch.append(ter)
            if ter < log.best_valid_ter:
                log.best_valid_ter = ter
                stale = 0
            else:
                stale += 1
            if stale >= cfg.patience:
                log.stopped_early = True
                break

    final = snapshot_average(snapshots) if snapshots else params
    ctx.params = final
    return final, log


# ---------------------------------------------------------------------------
# experiment orchestration

@dataclass
class RunResult:
    method: str
    seed: int
    hyper: dict
    matrix: clmetrics.ResultsMatrix
    awer: float
    bwt: float | None
    fwt: float | None = None
    cov: float | None = None
    awer_per_task: list[float] = field(default_factory=list)
    ledger: clmetrics.StorageLedger | None = None
    ledger_per_task: list[float] = field(default_factory=list)
    lambda_search: LambdaSearchResult | None = None
    train_logs: list[TaskTrainLog] = field(default_factory=list)
    firewall_reads: int = 0
    firewall_violations: int = 0
    agem_trace: list[dict] = field(default_factory=list)
    memory_report: dict | None = None

    def to_jsonable(self) -> dict:
        return {
            "result_version": RESULT_VERSION,
            "method": self.method,
            "seed": self.seed,
            "hypers": {k: v for k, v in self.hyper.items()},
            "R": self.matrix.to_jsonable(),
            "awer": self.awer,
            "bwt": self.bwt,
            "fwt": self.fwt,
            "cov": self.cov,
            "awer_per_task": self.awer_per_task,
            "storage_ledger": self.ledger.to_jsonable() if self.ledger else None,
            "storage_per_task": self.ledger_per_task,
            "per_utterance_errors": [[cell for cell in row]
                                     for row in self.matrix.cell_errors],
            "per_utterance_ref_lens": [[cell for cell in row]
                                       for row in self.matrix.cell_ref_lens],
            "memory_report": self.memory_report,
        }


def _tune_lambda(model: Model, params: ParamVector, strategy: Strategy,
                 task: TaskDataset, ctx: TrainContext, cfg: TrainConfig,
                 tune_cfg: LambdaSearchConfig, probe_seed: int) -> LambdaSearchResult:
    """Probe trainer for the weight search: restart from the incoming model,
    train five epochs on the new task, read its validation TER."""
    tau_init = 100.0 * evaluate_ter(model, params, task.valid, cfg)

    def probe(lam: float, epochs: int) -> float:
        probe_strategy = Strategy() if lam == 0.0 else strategy
        if lam != 0.0:
            strategy.set_strength(lam)
        probe_ctx = TrainContext(model=model, params=params.copy(),
                                 memory=ctx.memory,
                                 rng=np.random.default_rng(probe_seed),
                                 batch_size=ctx.batch_size,
                                 fisher_samples=ctx.fisher_samples)
        out, _ = train_task(model, params, task.train, task.valid,
                            probe_strategy, probe_ctx, cfg,
                            lr_factor=cfg.lr_factor_later,
                            batch_rng=np.random.default_rng(probe_seed),
                            max_epochs=epochs, use_early_stop=False,
                            use_snapshots=False)
        return 100.0 * evaluate_ter(model, out, task.valid, cfg)

    result = determine_lambda(probe, tau_init, tune_cfg)
    strategy.set_strength(result.lam)
    return result


def run_sequence(datasets: list[TaskDataset], method: str, seed: int,
                 hyper: dict | None = None,
                 model_cfg: ModelConfig | None = None,
                 train_cfg: TrainConfig | None = None,
                 memory_policy=None,
                 tune_cfg: LambdaSearchConfig | None = None,
                 probe_task: int = 0) -> RunResult:
    """Learn the task list in order and fill the results matrix row by row.

    The first task is always trained plain (consolidation happens at its
    end). Non-joint methods may only read the current task plus the memory;
    an access monitor asserts this throughout.
    """
    if not datasets:
        raise HarnessError("no datasets")
    hyper = dict(hyper or {})
    model_cfg = model_cfg or ModelConfig()
    train_cfg = train_cfg or TrainConfig()
    model = Model(ModelConfig(**{**model_cfg.__dict__, "seed": seed}))
    joint = method in ("JT", "CJT")

    auto_lambda = hyper.get("lam") == "auto"
    strat_hyper = {k: v for k, v in hyper.items()
                   if k not in ("lam0",) and not (k == "lam" and v == "auto")}
    if auto_lambda:
        strat_hyper["lam"] = 1.0  # placeholder until the first adaptation
        if tune_cfg is None:
            tune_cfg = LambdaSearchConfig(lam0=float(hyper.get("lam0", 100.0)))
    strategy = make_strategy("FT" if method in BASELINES else method, strat_hyper)

    root = np.random.SeedSequence(seed)
    strat_seq, mem_seq, *task_seqs = root.spawn(2 + len(datasets))
    memory = None
    if strategy.uses_memory:
        if memory_policy is None:
            raise HarnessError(f"{method} needs a memory policy")
        memory = ExemplarMemory(memory_policy,
                                seed=int(mem_seq.generate_state(1)[0]))

    ctx = TrainContext(model=model, params=model.init_params(), memory=memory,
                       rng=np.random.default_rng(strat_seq),
                       batch_size=train_cfg.batch_size,
                       fisher_samples=train_cfg.fisher_samples)
    params = ctx.params
    monitor = AccessMonitor()
    n_tasks = len(datasets)
    rm = clmetrics.ResultsMatrix(n_tasks)
    result = RunResult(method=method, seed=seed, hyper=hyper, matrix=rm,
                       awer=float("nan"), bwt=None)
    mem_probe_params = None

    for t, task in enumerate(datasets):
        first = t == 0
        if method == "JT":
            params = model.init_params()
        if joint:
            train_data = [u for d in datasets[:t + 1] for u in d.train]
        else:
            train_data = list(task.train)
        allowed = list(train_data) + (memory.utterances() if memory else [])
        monitor.allow(allowed, exempt=joint)
        batch_seq, probe_seq = task_seqs[t].spawn(2)

        if not first and auto_lambda and result.lambda_search is None:
            result.lambda_search = _tune_lambda(
                model, params, strategy, task, ctx, train_cfg, tune_cfg,
                probe_seed=int(probe_seq.generate_state(1)[0]))

        lr_factor = (train_cfg.lr_factor_first if (first or method == "JT")
                     else train_cfg.lr_factor_later)
        active = Strategy() if first else strategy
        batch_rng = np.random.default_rng(batch_seq)
        params, log = train_task(model, params, train_data, task.valid, active,
                                 ctx, train_cfg, lr_factor, batch_rng,
                                 monitor=monitor)
        result.train_logs.append(log)

        if not joint:
            strategy.on_task_end(params, list(task.train), ctx)
        if memory is not None:
            memory.task_end_update(list(task.train), t)
        if memory is not None and t == probe_task + 1:
            mem_probe_params = params.copy()

        for j in range(t + 1):
            rm.record(t, j, evaluate_cells(model, params, datasets[j].test, train_cfg))
        result.awer_per_task.append(clmetrics.awer(rm, t))
        extra_data = 0
        if joint:
            extra_data = sum(u.nbytes() for d in datasets[:t + 1] for u in d.train)
        ledger = clmetrics.storage_report(
            model.n_params(), strategy.aux_state(),
            memory_bytes=memory.nbytes() if memory else 0,
            extra_dataset_bytes=extra_data)
        if method == "JT":
            ledger.count_model = False
        result.ledger_per_task.append(ledger.model_equivalents)
        result.ledger = ledger

    result.awer = clmetrics.awer(rm)
    result.bwt = clmetrics.bwt(rm) if n_tasks > 1 else None
    result.firewall_reads = monitor.reads
    result.firewall_violations = monitor.violations
    if monitor.violations:
        raise HarnessError(
            f"data-access firewall violated {monitor.violations} times")
    if hasattr(strategy, "trace"):
        result.agem_trace = strategy.trace
    if memory is not None and mem_probe_params is not None and n_tasks > 1:
        result.memory_report = memory_generalization_report(
            model, mem_probe_params, memory, probe_task,
            datasets[probe_task].test, train_cfg)
    return result


def memory_generalization_report(model: Model, params: ParamVector,
                                 memory: ExemplarMemory, task_id: int,
                                 old_task_test: list[Utterance],
                                 cfg: TrainConfig) -> dict:
    """Corpus WER on the probed task's memory vs its test set; a ratio well
    below 1 flags memorization of the rehearsal memory."""
    mem_utts = [u for u, tid in memory.entries if tid == task_id]
    if not mem_utts:
        raise HarnessError(f"memory holds no utterances of task {task_id}")
    mem_ids = {id(u) for u in mem_utts}
    if any(id(u) in mem_ids for u in old_task_test):
        raise HarnessError("memory and test set overlap")
    wer_memory = 100.0 * evaluate_ter(model, params, mem_utts, cfg)
    wer_test = 100.0 * evaluate_ter(model, params, old_task_test, cfg)
    return {
        "task_id": task_id,
        "wer_memory": wer_memory,
        "wer_test": wer_test,
        "ratio": wer_memory / wer_test if wer_test > 0 else float("inf"),
        "n_memory": len(mem_utts),
        "n_test": len(old_task_test),
    }


# ---------------------------------------------------------------------------
# cross-run metrics and report emission

def comparative_metrics(result: RunResult, ft: RunResult,
                        cjt: RunResult | None = None) -> RunResult:
    result.fwt = clmetrics.fwt(result.matrix, ft.matrix)
    if cjt is not None:
        result.cov = clmetrics.cov(result.awer, ft.awer, cjt.awer)
    return result


def write_result(result: RunResult, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(result.to_jsonable(), fh, indent=1)
        fh.write("\n")


def load_result(path) -> dict:
    with open(path) as fh:
        data = json.load(fh)
    if data.get("result_version") != RESULT_VERSION:
        raise HarnessError(
            f"unsupported result_version {data.get('result_version')!r} in {path}")
    return data


def _pooled_errors(rows: list[dict]) -> list[int]:
    """Final-row per-utterance error counts pooled over tasks, seed-ordered."""
    pooled = []
    for data in sorted(rows, key=lambda d: d["seed"]):
        final = data["per_utterance_errors"][-1]
        for cell in final:
            pooled.extend(cell)
    return pooled


def aggregate_report(result_dicts: list[dict]) -> dict:
    """Comparison table across methods: median AWER/BWT/FWT/COV, storage, and
    significance stars vs the FT baseline (paired per-utterance errors)."""
    by_method: dict[str, list[dict]] = {}
    for d in result_dicts:
        by_method.setdefault(d["method"], []).append(d)
    if "FT" not in by_method:
        raise HarnessError("aggregate report needs FT runs as the baseline")
    ft_rows = by_method["FT"]
    ft_awer = float(np.median([d["awer"] for d in ft_rows]))
    cjt_awer = (float(np.median([d["awer"] for d in by_method["CJT"]]))
                if "CJT" in by_method else None)
    ft_pooled = _pooled_errors(ft_rows)

    table = []
    for method, rows in sorted(by_method.items()):
        med = lambda key: (float(np.median([d[key] for d in rows]))
                           if all(d.get(key) is not None for d in rows) else None)
        awer_med = med("awer")
        cov = None
        if cjt_awer is not None and method != "JT":
            cov = clmetrics.cov(awer_med, ft_awer, cjt_awer)
        stars = ""
        if method != "FT":
            pooled = _pooled_errors(rows)
            if len(pooled) == len(ft_pooled) and pooled:
                res = clmetrics.wilcoxon_signed_rank(pooled, ft_pooled)
                stars = clmetrics.significance_stars(res.p_value)
        storage = float(np.median(
            [d["storage_ledger"]["model_equivalents"]
             for d in rows if d.get("storage_ledger")] or [np.nan]))
        table.append({
            "method": method, "awer": awer_med, "bwt": med("bwt"),
            "fwt": med("fwt"), "cov": cov, "storage": storage,
            "stars": stars, "n_seeds": len(rows),
        })
    cov_per_task = []
    if cjt_awer is not None:
        n_tasks = len(ft_rows[0]["awer_per_task"])
        for t in range(1, n_tasks):
            ft_t = float(np.median([d["awer_per_task"][t] for d in ft_rows]))
            cjt_t = float(np.median([d["awer_per_task"][t]
                                     for d in by_method["CJT"]]))
            for method, rows in sorted(by_method.items()):
                if method in ("FT", "JT", "CJT") or ft_t == cjt_t:
                    continue
                m_t = float(np.median([d["awer_per_task"][t] for d in rows]))
                cov_per_task.append({"method": method, "task_idx": t,
                                     "cov": clmetrics.cov(m_t, ft_t, cjt_t)})
    return {"table": table, "cov_per_task": cov_per_task}


def report_csv(report: dict) -> str:
    lines = ["method,n_seeds,awer,bwt,fwt,cov,storage,stars"]
    fmt = lambda v: "" if v is None else f"{v:.1f}"
    for row in report["table"]:
        lines.append(",".join([
            row["method"], str(row["n_seeds"]), fmt(row["awer"]), fmt(row["bwt"]),
            fmt(row["fwt"]), fmt(row["cov"]), f"{row['storage']:.2f}", row["stars"]]))
    return "\n".join(lines) + "\n"


def cov_per_task_csv(report: dict) -> str:
    lines = ["method,task_idx,cov"]
    for row in report["cov_per_task"]:
        lines.append(f"{row['method']},{row['task_idx']},{row['cov']:.2f}")
    return "\n".join(lines) + "\n"
