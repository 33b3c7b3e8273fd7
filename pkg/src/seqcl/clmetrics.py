"""Evaluation suite: WER results matrix, transfer metrics, coverage of the
fine-tune-to-joint gap, Wilcoxon signed-rank significance, storage accounting."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np


class MetricsError(Exception):
    pass


class ResultsMatrix:
    """Lower-triangular WER grid: R[i][j] = WER% on task j after learning
    through task i (0-based, j <= i). Per-cell per-utterance edit counts are
    retained for significance testing."""

    def __init__(self, n_tasks: int):
        if n_tasks < 1:
            raise MetricsError("need at least one task")
        self.n_tasks = n_tasks
        self.wer = np.full((n_tasks, n_tasks), np.nan)
        self.cell_errors: list[list[list[int] | None]] = [
            [None] * n_tasks for _ in range(n_tasks)]
        self.cell_ref_lens: list[list[list[int] | None]] = [
            [None] * n_tasks for _ in range(n_tasks)]

    def record(self, after_task: int, on_task: int,
               per_utt: list[tuple[int, int]]) -> None:
        """Store a cell from per-utterance (edits, ref_len) pairs."""
        if on_task > after_task:
            raise MetricsError(f"cell ({after_task},{on_task}) above the diagonal")
        if not per_utt:
            raise MetricsError("empty evaluation cell")
        edits = [e for e, _ in per_utt]
        refs = [r for _, r in per_utt]
        self.wer[after_task, on_task] = 100.0 * sum(edits) / sum(refs)
        self.cell_errors[after_task][on_task] = edits
        self.cell_ref_lens[after_task][on_task] = refs

    def row(self, i: int) -> np.ndarray:
        return self.wer[i, :i + 1]

    def require_row(self, i: int) -> np.ndarray:
        r = self.row(i)
        if np.isnan(r).any():
            raise MetricsError(f"row {i} incomplete: {r}")
        return r

    def to_jsonable(self) -> list[list[float | None]]:
        return [[None if math.isnan(v) else v for v in row] for row in self.wer.tolist()]

    @classmethod
    def from_values(cls, rows: list[list[float]]) -> "ResultsMatrix":
        rm = cls(len(rows))
        for i, row in enumerate(rows):
            for j, v in enumerate(row[:i + 1]):
                if v is not None:
                    rm.wer[i, j] = v
        return rm


# ---------------------------------------------------------------------------
# scalar metrics

def awer(rm: ResultsMatrix, t: int | None = None) -> float:
    """Mean WER over tasks seen so far, from row t of the matrix."""
    t = rm.n_tasks - 1 if t is None else t
    return float(rm.require_row(t).mean())


def bwt(rm: ResultsMatrix, t: int | None = None) -> float:
    """(1/(T−1)) Σ_{i<T} −(R[T,i] − R[i,i]); negative means forgetting."""
    t = rm.n_tasks - 1 if t is None else t
    if t < 1:
        raise MetricsError("backward transfer needs at least two tasks")
    last = rm.require_row(t)
    diag = np.array([rm.wer[i, i] for i in range(t)])
    if np.isnan(diag).any():
        raise MetricsError("diagonal incomplete")
    return float(np.mean(-(last[:t] - diag)))


def fwt(rm: ResultsMatrix, rm_ft: ResultsMatrix, t: int | None = None) -> float:
    """(1/(T−1)) Σ_{i=2..T} −(R[i,i] − R_ft[i,i]); positive beats fine-tuning."""
    t = rm.n_tasks - 1 if t is None else t
    if t < 1:
        raise MetricsError("forward transfer needs at least two tasks")
    diffs = []
    for i in range(1, t + 1):
        a, b = rm.wer[i, i], rm_ft.wer[i, i]
        if math.isnan(a) or math.isnan(b):
            raise MetricsError("missing diagonal entry for forward transfer")
        diffs.append(-(a - b))
    return float(np.mean(diffs))


def cov(awer_method: float, awer_ft: float, awer_cjt: float) -> float:
    """Percentage of the fine-tune-to-continued-joint gap closed."""
    gap = awer_ft - awer_cjt
    if gap == 0.0:
        raise MetricsError("degenerate gap: fine-tune and joint upper bound coincide")
    return 100.0 * (awer_ft - awer_method) / gap


# ---------------------------------------------------------------------------
# Wilcoxon signed-rank test

class WilcoxonResult(NamedTuple):
    statistic: float
    p_value: float
    n_effective: int
    all_zero: bool


def _signed_ranks(diff: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    order = np.argsort(np.abs(diff), kind="stable")
    ranks = np.empty(len(diff))
    absd = np.abs(diff)[order]
    i = 0
    while i < len(absd):
        j = i
        while j + 1 < len(absd) and absd[j + 1] == absd[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0  # average rank for ties
        i = j + 1
    return ranks, np.sign(diff)


def _exact_tail_probs(ranks: np.ndarray, w_small: float) -> float:
    """P(min(W+, W−) <= w_small) by dynamic programming over rank sums.

    Doubled ranks are integers even with midpoint ties, so the distribution
    of 2·W+ lives on an integer grid.
    """
    doubled = np.rint(2.0 * ranks).astype(np.int64)
    total = int(doubled.sum())
    counts = np.zeros(total + 1)
    counts[0] = 1.0
    for r in doubled:
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[:counts.size - r]
        counts = counts + shifted
    counts /= counts.sum()
    w2 = int(round(2.0 * w_small))
    lo = counts[:w2 + 1].sum()                      # P(2W+ <= 2w)
    hi = counts[total - w2:].sum()                  # P(2W+ >= total - 2w)
    return float(min(1.0, lo + hi))


def wilcoxon_signed_rank(errors_a, errors_b, exact_limit: int = 25) -> WilcoxonResult:
    """Two-sided paired test on per-utterance error counts.

    Zero differences are dropped; ties get average ranks. Exact enumeration
    for n <= 25 non-zero differences, a normal approximation with continuity
    and tie corrections above.
    """
    a = np.asarray(errors_a, dtype=np.float64)
    b = np.asarray(errors_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise MetricsError(f"paired series must share shape: {a.shape} vs {b.shape}")
    diff = a - b
    diff = diff[diff != 0.0]
    n = len(diff)
    if n == 0:
        return WilcoxonResult(statistic=0.0, p_value=1.0, n_effective=0, all_zero=True)
    ranks, signs = _signed_ranks(diff)
    w_plus = float(ranks[signs > 0].sum())
    w_minus = float(ranks[signs < 0].sum())
    w = min(w_plus, w_minus)
    if n <= exact_limit:
        p = _exact_tail_probs(ranks, w)
        return WilcoxonResult(w, p, n, False)
    mean = n * (n + 1) / 4.0
    _, tie_counts = np.unique(np.abs(diff), return_counts=True)
    tie_term = float(((tie_counts ** 3 - tie_counts).sum())) / 48.0
    sigma = math.sqrt(n * (n + 1) * (2 * n + 1) / 24.0 - tie_term)
    if sigma == 0.0:
        return WilcoxonResult(w, 1.0, n, False)
    z = (w - mean + 0.5) / sigma  # continuity correction toward the mean
    p = min(1.0, 2.0 * 0.5 * math.erfc(-z / math.sqrt(2.0)))
    return WilcoxonResult(w, p, n, False)


def significance_stars(p: float) -> str:
    if p < 0.001:
        return "***"
    if p < 0.01:
        return "**"
    if p < 0.05:
        return "*"
    return ""


# ---------------------------------------------------------------------------
# storage accounting

@dataclass
class StorageLedger:
    """Byte tally in model-checkpoint units.

    The teacher snapshot of the distillation methods is physically the
    previous task's checkpoint, so it adds no bytes of its own.
    """
    model_bytes: int
    omega_bytes: int = 0
    lowrank_bytes: int = 0
    teacher_bytes: int = 0
    exemplar_bytes: int = 0
    extra_dataset_bytes: int = 0  # joint baselines keeping all training data
    count_model: bool = True      # retrain-from-scratch stores no model
    parts: dict = field(default_factory=dict)

    @property
    def total_bytes(self) -> int:
        return ((self.model_bytes if self.count_model else 0)
                + self.omega_bytes + self.lowrank_bytes
                + self.teacher_bytes + self.exemplar_bytes + self.extra_dataset_bytes)

    @property
    def model_equivalents(self) -> float:
        if self.model_bytes <= 0:
            raise MetricsError("model byte size must be positive")
        return self.total_bytes / self.model_bytes

    def to_jsonable(self) -> dict:
        return {
            "model_bytes": self.model_bytes,
            "omega_bytes": self.omega_bytes,
            "lowrank_bytes": self.lowrank_bytes,
            "teacher_bytes": self.teacher_bytes,
            "exemplar_bytes": self.exemplar_bytes,
            "extra_dataset_bytes": self.extra_dataset_bytes,
            "total_bytes": self.total_bytes,
            "model_equivalents": self.model_equivalents,
        }


def storage_report(n_params: int, strategy_aux: dict | None = None,
                   memory_bytes: int = 0, extra_dataset_bytes: int = 0) -> StorageLedger:
    """Ledger for one method state: the live model checkpoint, auxiliary
    strategy tensors (importance diagonals, low-rank factors), exemplars."""
    model_bytes = 8 * n_params
    omega = lowrank = 0
    for name, arr in (strategy_aux or {}).items():
        nbytes = 8 * int(np.asarray(arr).size)
        if ".diag." in name or name.startswith("curv.diag"):
            omega += nbytes
        else:
            lowrank += nbytes
    return StorageLedger(model_bytes=model_bytes, omega_bytes=omega,
                         lowrank_bytes=lowrank, teacher_bytes=0,
                         exemplar_bytes=memory_bytes,
                         extra_dataset_bytes=extra_dataset_bytes)
