"""Rehearsal memory: length-filtered uniform exemplar sampling at task end,
growing or fixed-capacity policies, and mini-batch sampling for replay."""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import taskforge
from .seqmodel import Utterance

LENGTH_FILTER_FACTOR = 0.40


class MemoryError_(Exception):
    pass


@dataclass(frozen=True)
class GrowingPolicy:
    n_per_task: int


@dataclass(frozen=True)
class FixedPolicy:
    capacity: int


def sample_exemplars(train_set: list[Utterance], n: int,
                     rng: np.random.Generator) -> list[Utterance]:
    """Uniform sample (without replacement) among utterances whose token
    length exceeds 0.40 x the training-set mean token length."""
    if not train_set:
        raise MemoryError_("cannot sample exemplars from an empty training set")
    lengths = np.array([u.n_tokens for u in train_set], dtype=np.float64)
    threshold = LENGTH_FILTER_FACTOR * lengths.mean()
    eligible = [u for u, l in zip(train_set, lengths) if l > threshold]
    if not eligible:
        raise MemoryError_("no utterance passes the exemplar length filter")
    if len(eligible) <= n:
        if len(eligible) < n:
            warnings.warn(f"only {len(eligible)} eligible exemplars for request of {n}")
        return list(eligible)
    idx = rng.choice(len(eligible), size=n, replace=False)
    return [eligible[i] for i in idx]


class ExemplarMemory:
    """Stored (utterance, task_id) pairs under a growth policy."""

    def __init__(self, policy, seed: int = 0):
        if not isinstance(policy, (GrowingPolicy, FixedPolicy)):
            raise MemoryError_(f"unknown memory policy: {policy!r}")
        self.policy = policy
        self.entries: list[tuple[Utterance, int]] = []
        self._rng = np.random.default_rng(seed)
        self._seed = seed

    def __len__(self) -> int:
        return len(self.entries)

    def tasks_seen(self) -> list[int]:
        seen: list[int] = []
        for _, tid in self.entries:
            if tid not in seen:
                seen.append(tid)
        return seen

    def counts_per_task(self) -> dict[int, int]:
        counts: dict[int, int] = {}
        for _, tid in self.entries:
            counts[tid] = counts.get(tid, 0) + 1
        return counts

    def nbytes(self) -> int:
        return sum(u.nbytes() for u, _ in self.entries)

    def utterances(self) -> list[Utterance]:
        return [u for u, _ in self.entries]

    # -- updates -------------------------------------------------------------

    def task_end_update(self, train_set: list[Utterance], task_id: int) -> None:
        if any(tid == task_id for _, tid in self.entries):
            raise MemoryError_(f"task {task_id} already contributed exemplars")
        if isinstance(self.policy, GrowingPolicy):
            picked = sample_exemplars(train_set, self.policy.n_per_task, self._rng)
            self.entries.extend((u, task_id) for u in picked)
            return

        cap = self.policy.capacity
        t = len(self.tasks_seen()) + 1
        base, rem = divmod(cap, t)
        order = self.tasks_seen() + [task_id]  # earliest first
        quotas = {tid: base + (1 if i < rem else 0) for i, tid in enumerate(order)}
        for tid in self.tasks_seen():
            held = [i for i, (_, t_) in enumerate(self.entries) if t_ == tid]
            excess = len(held) - quotas[tid]
            if excess > 0:
                evict = set(self._rng.choice(held, size=excess, replace=False).tolist())
                self.entries = [e for i, e in enumerate(self.entries) if i not in evict]
        picked = sample_exemplars(train_set, quotas[task_id], self._rng)
        self.entries.extend((u, task_id) for u in picked)

    # -- sampling ------------------------------------------------------------

    def sample_minibatch(self, batch_size: int,
                         rng: np.random.Generator) -> list[Utterance]:
        """Uniform with replacement across all entries, task-agnostic."""
        if not self.entries:
            raise MemoryError_("cannot sample a mini-batch from empty memory")
        idx = rng.integers(0, len(self.entries), size=batch_size)
        return [self.entries[i][0] for i in idx]

    # -- persistence ----------------------------------------------------------

    def save(self, path) -> None:
        if isinstance(self.policy, GrowingPolicy):
            pol = {"policy": "growing", "n_per_task": self.policy.n_per_task}
        else:
            pol = {"policy": "fixed", "capacity": self.policy.capacity}
        d = self.entries[0][0].frames.shape[1] if self.entries else 0
        meta = {"kind": "exemplar_memory", "d": d, "seed": self._seed, **pol}
        taskforge.write_container(path, meta, {}, {"memory": list(self.entries)})

    @classmethod
    def load(cls, path) -> "ExemplarMemory":
        meta, _, splits = taskforge.read_container(path)
        if meta.get("kind") != "exemplar_memory":
            raise taskforge.DataFormatError(
                f"container is not an exemplar memory: {meta.get('kind')!r}")
        if meta["policy"] == "growing":
            policy = GrowingPolicy(int(meta["n_per_task"]))
        else:
            policy = FixedPolicy(int(meta["capacity"]))
        mem = cls(policy, seed=int(meta.get("seed", 0)))
        mem.entries = list(splits.get("memory", []))
        return mem
