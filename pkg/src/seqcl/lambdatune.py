"""Validation-set-free search for the regularization weight.

Probes train briefly at decreasing weights λ0, pλ0, p²λ0, ... and return the
first λ whose short run closes at least 100a% of the error gap between the
initial model and an unregularized probe, all measured on the *new* task's
validation error only.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field


class LambdaSearchError(Exception):
    pass


@dataclass(frozen=True)
class LambdaSearchConfig:
    lam0: float
    closure_threshold: float = 0.85   # a
    decay: float = 0.10               # p
    probe_epochs: int = 5
    lam_min: float | None = None      # defaults to 1e-6 * lam0

    def __post_init__(self):
        if not 0.0 < self.closure_threshold < 1.0:
            raise LambdaSearchError(f"threshold a must be in (0,1): {self.closure_threshold}")
        if not 0.0 < self.decay < 1.0:
            raise LambdaSearchError(f"decay p must be in (0,1): {self.decay}")
        if self.lam0 <= 0:
            raise LambdaSearchError(f"initial weight must be positive: {self.lam0}")
        floor = self.floor()
        if not 0.0 < floor < self.lam0:
            raise LambdaSearchError(
                f"need 0 < lam_min < lam0, got {floor} vs {self.lam0}")

    def floor(self) -> float:
        return self.lam_min if self.lam_min is not None else 1e-6 * self.lam0

    def max_probes(self) -> int:
        """Grid length bound: ceil(log_p(lam_min / lam0)) + 1."""
        return math.ceil(math.log(self.floor() / self.lam0)
                         / math.log(self.decay)) + 1


@dataclass
class ProbeRecord:
    lam: float
    ter: float
    ratio: float


@dataclass
class LambdaSearchResult:
    lam: float
    tau_init: float
    tau_no_reg: float
    trace: list[ProbeRecord] = field(default_factory=list)
    warning: str | None = None

    @property
    def n_probes(self) -> int:
        """Regularized probes only (the λ=0 baseline probe is not counted)."""
        return sum(1 for r in self.trace if r.lam > 0.0)

    def trace_csv(self) -> str:
        lines = ["lambda,ter,ratio"]
        lines += [f"{r.lam:.10g},{r.ter:.10g},{r.ratio:.10g}" for r in self.trace]
        return "\n".join(lines) + "\n"


def _checked(ter: float, lam: float) -> float:
    ter = float(ter)
    if not math.isfinite(ter):
        raise LambdaSearchError(f"probe at weight {lam} returned non-finite error {ter}")
    return ter


def determine_lambda(trainer_probe, tau_init: float,
                     cfg: LambdaSearchConfig) -> LambdaSearchResult:
    """Pick the regularization weight from short probe trainings.

    `trainer_probe(lam, epochs)` trains a fresh copy of the current model for
    `epochs` epochs with regularization weight `lam` and returns the token
    error rate on the new task's validation set. The weight is determined once
    (at the first adaptation) and then kept fixed.
    """
    tau_init = _checked(tau_init, 0.0)
    tau_no_reg = _checked(trainer_probe(0.0, cfg.probe_epochs), 0.0)
    result = LambdaSearchResult(lam=cfg.lam0, tau_init=tau_init, tau_no_reg=tau_no_reg)
    result.trace.append(ProbeRecord(0.0, tau_no_reg, 1.0))

    if tau_no_reg >= tau_init:
        result.warning = ("unregularized probe does not improve on the initial "
                          "model; regularization cost is moot, keeping lam0")
        warnings.warn(result.warning)
        return result

    gap = tau_no_reg - tau_init  # negative: lower is better
    floor = cfg.floor()
    lam = cfg.lam0
    while lam >= floor * (1.0 - 1e-12):
        tau = _checked(trainer_probe(lam, cfg.probe_epochs), lam)
        ratio = (tau - tau_init) / gap
        result.trace.append(ProbeRecord(lam, tau, ratio))
        if ratio > cfg.closure_threshold:
            result.lam = lam
            return result
        lam *= cfg.decay

    result.lam = floor
    result.warning = (f"no weight above the floor {floor} closed "
                      f"{100 * cfg.closure_threshold:.0f}% of the gap")
    warnings.warn(result.warning)
    return result
