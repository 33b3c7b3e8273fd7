"""Continual-learning strategies behind one hook interface.

Every method is expressed through four hooks consumed by the training loop:
compose_batch (replay), extra_loss (penalties and distillation),
transform_grad (gradient projection) and on_task_end (consolidation). A
strategy implementing none of them is exactly fine-tuning. BER additionally
rewrites the epoch's training list (compose_epoch).
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import ndgrad
from .exemplar import ExemplarMemory
from .ndgrad import ParamVector, Tape, Tensor
from .seqmodel import Model, Utterance

STRATEGY_NAMES = ("FT", "EWC", "MAS", "CSQN", "CSQN-BT", "LWF",
                  "ER", "ER_LAMBDA", "BER", "AGEM", "KD")

_ALIASES = {"ER_λ": "ER_LAMBDA", "ER(λ)": "ER_LAMBDA", "ER(LAMBDA)": "ER_LAMBDA",
            "A-GEM": "AGEM", "CSQN_BT": "CSQN-BT", "CSQNBT": "CSQN-BT"}


class StrategyError(Exception):
    pass


@dataclass
class TrainContext:
    """Everything a hook may need beyond its direct arguments."""
    model: Model
    params: ParamVector
    memory: ExemplarMemory | None = None
    rng: np.random.Generator = field(default_factory=np.random.default_rng)
    batch_size: int = 8
    fisher_samples: int = 64


# ---------------------------------------------------------------------------
# importance estimation

def ewc_fisher(loss_fn, params: ParamVector, samples) -> ParamVector:
    """Empirical Fisher diagonal: mean over samples of squared gradients.

    `loss_fn(leaves, sample)` must build the scalar training loss of one
    sample on the active tape.
    """
    if not samples:
        raise StrategyError("fisher estimation needs at least one sample")
    acc = params.zeros_like()
    for sample in samples:
        with Tape() as tape:
            leaves = {n: Tensor(a) for n, a in params.items()}
            loss = loss_fn(leaves, sample)
        g = ndgrad.backward(loss, tape).param_grads(leaves)
        acc = acc + ParamVector({n: a * a for n, a in g.items()})
    return acc * (1.0 / len(samples))


def mas_importance(outputs_fn, params: ParamVector, samples, c: float) -> ParamVector:
    """Output-sensitivity importance: E |∂(c·‖f_c‖² + (1−c)·‖f_d‖²)/∂θ|.

    `outputs_fn(leaves, sample)` returns the two head outputs (either may be
    None) whose squared L2 norms are combined with weights c and 1−c; labels
    are used only to drive the teacher-forced decoder input, never as targets.
    """
    if not samples:
        raise StrategyError("importance estimation needs at least one sample")
    acc = params.zeros_like()
    for sample in samples:
        with Tape() as tape:
            leaves = {n: Tensor(a) for n, a in params.items()}
            out_c, out_d = outputs_fn(leaves, sample)
            terms = []
            if out_c is not None and c != 0.0:
                terms.append(ndgrad.mul(ndgrad.sq_l2norm(out_c), c))
            if out_d is not None and c != 1.0:
                terms.append(ndgrad.mul(ndgrad.sq_l2norm(out_d), 1.0 - c))
            if not terms:
                raise StrategyError("no head output to take the norm of")
            obj = terms[0]
            for t in terms[1:]:
                obj = ndgrad.add(obj, t)
        g = ndgrad.backward(obj, tape).param_grads(leaves)
        acc = acc + ParamVector({n: np.abs(a) for n, a in g.items()})
    return acc * (1.0 / len(samples))


# ---------------------------------------------------------------------------
# curvature containers and the quadratic penalty

@dataclass
class DenseLowRank:
    """B ≈ diag + U M Uᵀ over the full flattened parameter vector."""
    U: np.ndarray  # [n, k]
    M: np.ndarray  # [k, k] symmetric PSD

    def storage_floats(self) -> int:
        return self.U.size + self.M.size


@dataclass
class BlockLowRank:
    """Per-segment factors of the M-whitened term: W_s ≈ A_s Q_sᵀ.

    The quadratic keeps cross-segment coupling through the shared k-dim
    inner space: penalty contribution = ‖Σ_s Q_s (A_sᵀ d_s)‖².
    """
    factors: dict[str, tuple[np.ndarray, np.ndarray]]  # name -> (A [n_s,r], Q [k,r])
    k: int

    def storage_floats(self) -> int:
        return sum(a.size + q.size for a, q in self.factors.values())


@dataclass
class Curvature:
    """Importance diagonal plus optional low-rank terms, anchored at θ^t."""
    diag: ParamVector
    anchor: ParamVector
    strength: float
    lowrank: list = field(default_factory=list)

    def __post_init__(self):
        if self.strength <= 0:
            raise StrategyError(f"penalty strength must be positive: {self.strength}")
        for _, a in self.diag.items():
            if (a < 0).any():
                raise StrategyError("importance diagonal has negative entries")

    def storage_floats(self) -> int:
        return self.diag.total_len + sum(t.storage_floats() for t in self.lowrank)

    def accumulate(self, omega: ParamVector) -> None:
        self.diag = self.diag + omega

    def penalty_value(self, params: ParamVector) -> float:
        return float(quad_penalty(self, {n: Tensor(a) for n, a in params.items()}).data)


def _lowrank_apply(term, diffs: dict[str, np.ndarray], flat_diff: np.ndarray,
                   offsets: dict[str, int]):
    """Returns (quadratic value, dict of per-segment gradients of that value)."""
    if isinstance(term, DenseLowRank):
        z = term.U.T @ flat_diff
        mz = term.M @ z
        grad_flat = 2.0 * (term.U @ mz)
        grads = {}
        for name, d in diffs.items():
            off = offsets[name]
            grads[name] = grad_flat[off:off + d.size].reshape(d.shape)
        return float(z @ mz), grads
    if isinstance(term, BlockLowRank):
        v = np.zeros(term.k)
        for name, (a, q) in term.factors.items():
            v += q @ (a.T @ diffs[name].ravel())
        grads = {}
        for name, (a, q) in term.factors.items():
            grads[name] = (2.0 * (a @ (q.T @ v))).reshape(diffs[name].shape)
        return float(v @ v), grads
    raise StrategyError(f"unknown low-rank term {type(term)!r}")


def quad_penalty(curv: Curvature, leaves: dict[str, Tensor]) -> Tensor:
    """(λ/2)·[(θ−a)ᵀ diag (θ−a) + low-rank quadratics], one fused op."""
    names = curv.diag.names()
    if sorted(names) != sorted(leaves.keys()):
        raise StrategyError("parameter layout does not match curvature layout")
    diffs = {n: leaves[n].data - curv.anchor[n] for n in names}
    offsets, off = {}, 0
    for n in names:
        offsets[n] = off
        off += diffs[n].size
    flat_diff = np.concatenate([diffs[n].ravel() for n in names]) if names else np.zeros(0)

    lam = curv.strength
    value = sum(float((curv.diag[n] * diffs[n] * diffs[n]).sum()) for n in names)
    seg_grads = {n: 2.0 * curv.diag[n] * diffs[n] for n in names}
    for term in curv.lowrank:
        v, grads = _lowrank_apply(term, diffs, flat_diff, offsets)
        value += v
        for n, g in grads.items():
            seg_grads[n] = seg_grads[n] + g
    value *= 0.5 * lam

    parents = tuple(leaves[n] for n in names)
    scaled = [0.5 * lam * seg_grads[n] for n in names]

    def grad_fn(g):
        return tuple(g * sg for sg in scaled)

    return ndgrad.record("quad_penalty", np.asarray(value), parents, grad_fn)


# ---------------------------------------------------------------------------
# sampled quasi-Newton curvature (limited-memory SR1 compact form)

SR1_SAFEGUARD = 1e-8


def _sr1_middle(b0: np.ndarray, s_mat: np.ndarray, y_mat: np.ndarray) -> np.ndarray:
    """W = D + L + Lᵀ − Sᵀ B0 S from SᵀY = L + D + R (strictly-upper R dropped)."""
    t = s_mat.T @ y_mat
    w = np.tril(t) + np.tril(t, -1).T - s_mat.T @ (b0[:, None] * s_mat)
    return w


def sr1_compact(b0: np.ndarray, s_list: list[np.ndarray],
                y_list: list[np.ndarray]):
    """Limited-memory SR1 in compact form with the standard pair safeguard.

    Processes (s, y) pairs in order; a pair is retained only if
    |sᵀ(y − B s)| >= 1e-8·‖s‖·‖y − B s‖ against the approximation built so
    far. Returns (retained indices, U, W) with B = diag(b0) + U W⁻¹ Uᵀ.
    """
    retained: list[int] = []
    s_cols: list[np.ndarray] = []
    y_cols: list[np.ndarray] = []

    def apply_b(v: np.ndarray) -> np.ndarray:
        out = b0 * v
        if s_cols:
            s_mat = np.column_stack(s_cols)
            y_mat = np.column_stack(y_cols)
            u = y_mat - b0[:, None] * s_mat
            w = _sr1_middle(b0, s_mat, y_mat)
            try:
                coef = np.linalg.solve(w, u.T @ v)
            except np.linalg.LinAlgError:
                coef = np.linalg.pinv(w) @ (u.T @ v)
            out = out + u @ coef
        return out

    for k, (s, y) in enumerate(zip(s_list, y_list)):
        r = y - apply_b(s)
        nr = np.linalg.norm(r)
        # a residual at float-noise level means the secant already holds;
        # its direction is junk and would make the middle matrix singular
        if nr <= 1e-12 * np.linalg.norm(y):
            continue
        if abs(s @ r) >= SR1_SAFEGUARD * np.linalg.norm(s) * nr:
            retained.append(k)
            s_cols.append(s)
            y_cols.append(y)

    if not s_cols:
        return retained, None, None
    s_mat = np.column_stack(s_cols)
    y_mat = np.column_stack(y_cols)
    u = y_mat - b0[:, None] * s_mat
    w = _sr1_middle(b0, s_mat, y_mat)
    return retained, u, w


def _psd_clamp(m: np.ndarray) -> np.ndarray:
    sym = (m + m.T) / 2.0
    vals, vecs = np.linalg.eigh(sym)
    return (vecs * np.maximum(vals, 0.0)) @ vecs.T


def csqn_build(grad_fn, params: ParamVector, samples, base_diag: ParamVector,
               k_pairs: int, lam: float, rng: np.random.Generator,
               b0_eps: float = 1e-6) -> Curvature:
    """Curvature from sampled directions and empirical-Fisher-vector products.

    Directions are unit Gaussians; responses y = (1/|B|) Σ_b g_b (g_bᵀ s) use
    first-order per-sample gradients only. The retained SR1 pairs form
    B = B0 + U M Uᵀ with B0 = diag(base_diag + ε); M is clamped to its PSD
    part so the resulting penalty is nonnegative everywhere.
    """
    n = params.total_len
    if k_pairs > n:
        raise StrategyError(f"K={k_pairs} exceeds parameter count {n}")
    curv = Curvature(diag=base_diag.copy(), anchor=params.copy(), strength=lam)
    if k_pairs == 0:
        return curv
    if not samples:
        raise StrategyError("curvature sampling needs a non-empty batch")

    grads = np.stack([grad_fn(params, s).flat() for s in samples])  # [B, n]
    if np.allclose(grads, 0.0):
        raise StrategyError("degenerate batch: all sampled gradients vanish")
    b0 = base_diag.flat() + b0_eps
    s_list, y_list = [], []
    for _ in range(k_pairs):
        s = rng.normal(size=n)
        s /= np.linalg.norm(s)
        y = grads.T @ (grads @ s) / len(samples)
        s_list.append(s)
        y_list.append(y)
    retained, u, w = sr1_compact(b0, s_list, y_list)
    if len(retained) < len(s_list):
        warnings.warn(f"SR1 safeguard dropped {len(s_list) - len(retained)} pairs")
    if u is not None:
        try:
            m = np.linalg.inv(w)
        except np.linalg.LinAlgError:
            m = np.linalg.pinv(w)
        curv.lowrank.append(DenseLowRank(U=u, M=_psd_clamp(m)))
    return curv


def csqn_bt_reduce(curv: Curvature, per_block_rank: int) -> Curvature:
    """Storage reduction: split the whitened factor by parameter segment and
    keep each block's top-r spectral components."""
    if per_block_rank < 1:
        raise StrategyError("per-block rank must be >= 1")
    reduced = Curvature(diag=curv.diag.copy(), anchor=curv.anchor.copy(),
                        strength=curv.strength)
    names = curv.diag.names()
    sizes = {n: curv.diag[n].size for n in names}
    for term in curv.lowrank:
        if isinstance(term, BlockLowRank):
            reduced.lowrank.append(term)
            continue
        k = term.U.shape[1]
        if per_block_rank > k:
            raise StrategyError(f"per-block rank {per_block_rank} exceeds k={k}")
        vals, vecs = np.linalg.eigh((term.M + term.M.T) / 2.0)
        msqrt = (vecs * np.sqrt(np.maximum(vals, 0.0))) @ vecs.T
        whitened = term.U @ msqrt  # [n, k]
        factors = {}
        off = 0
        for n in names:
            w_s = whitened[off:off + sizes[n]]
            off += sizes[n]
            p, sing, qt = np.linalg.svd(w_s, full_matrices=False)
            r = min(per_block_rank, len(sing))
            factors[n] = (p[:, :r] * sing[:r], qt[:r].T)
        reduced.lowrank.append(BlockLowRank(factors=factors, k=k))
    return reduced


# ---------------------------------------------------------------------------
# distillation

def tempered_probs(logprobs: np.ndarray, gamma: float) -> np.ndarray:
    scaled = np.asarray(logprobs) / gamma
    scaled = scaled - scaled.max(axis=-1, keepdims=True)
    e = np.exp(scaled)
    return e / e.sum(axis=-1, keepdims=True)


def distill_loss(teacher_ctc: np.ndarray, teacher_dec: np.ndarray,
                 student_ctc: Tensor, student_dec: Tensor,
                 lam: float, gamma: float = 1.0, c: float = 0.3) -> Tensor:
    """λ·[c·Σ p_T·(−log p_S) over the CTC grid + (1−c)·same over the decoder
    grid], teacher and student both tempered by γ inside the softmax."""
    if gamma <= 0:
        raise StrategyError(f"temperature must be positive: {gamma}")
    if teacher_ctc.shape != student_ctc.data.shape \
            or teacher_dec.shape != student_dec.data.shape:
        raise ndgrad.ShapeError("distill_loss", (teacher_ctc.shape, student_ctc.data.shape,
                                                 teacher_dec.shape, student_dec.data.shape))
    if lam == 0.0:
        return ndgrad.as_tensor(0.0)

    def head(teacher_lp, student_lp, weight):
        p_t = tempered_probs(teacher_lp, gamma)
        log_p_s = ndgrad.log_softmax(ndgrad.mul(student_lp, 1.0 / gamma))
        return ndgrad.sum_(ndgrad.mul(log_p_s, -weight * lam * p_t))

    return ndgrad.add(head(teacher_ctc, student_ctc, c),
                      head(teacher_dec, student_dec, 1.0 - c))


# ---------------------------------------------------------------------------
# gradient projection and replay composition

def agem_transform(g: ParamVector, g_ref: ParamVector) -> ParamVector:
    """Remove the interfering component: g ← g − (gᵀg_ref / g_refᵀg_ref)·g_ref
    when gᵀg_ref < 0; otherwise g is returned untouched."""
    ref_sq = g_ref.dot(g_ref)
    if ref_sq == 0.0:
        return g
    dot = g.dot(g_ref)
    if dot >= 0.0:
        return g
    return g - g_ref * (dot / ref_sq)


def er_compose(task_batch: list[Utterance], memory: ExemplarMemory | None,
               mode: str, lam: float | None, rng: np.random.Generator,
               mem_batch_size: int | None = None):
    """Weighted batch sets for the replay family.

    ER/ER_LAMBDA pair the task batch with a memory batch (weight 1 or λ);
    BER merges the given set with the whole memory and shuffles (the training
    loop calls it once per epoch with the full task training list).
    """
    if mode in ("ER", "ER_LAMBDA"):
        if memory is None or len(memory) == 0:
            raise StrategyError(f"{mode} requires a non-empty memory")
        weight = 1.0
        if mode == "ER_LAMBDA":
            if lam is None or not 0.0 < lam < 1.0:
                raise StrategyError(f"ER_LAMBDA weight must lie in (0,1): {lam}")
            weight = float(lam)
        mem_batch = memory.sample_minibatch(mem_batch_size or len(task_batch), rng)
        return [(list(task_batch), 1.0), (mem_batch, weight)]
    if mode == "BER":
        merged = list(task_batch) + (memory.utterances() if memory else [])
        order = rng.permutation(len(merged))
        return [([merged[i] for i in order], 1.0)]
    raise StrategyError(f"unknown replay mode {mode!r}")


# ---------------------------------------------------------------------------
# model adapters

def model_loss_fn(model: Model, c: float | None = None):
    def fn(leaves, utt):
        return model.batch_hybrid_loss(leaves, [utt], c=c)
    return fn


def model_grad_fn(model: Model, c: float | None = None):
    loss_fn = model_loss_fn(model, c)

    def fn(params: ParamVector, utt) -> ParamVector:
        with Tape() as tape:
            leaves = {n: Tensor(a) for n, a in params.items()}
            loss = loss_fn(leaves, utt)
        return ndgrad.backward(loss, tape).param_grads(leaves)
    return fn


def model_prob_outputs_fn(model: Model):
    """Probability-space head outputs for importance estimation."""
    def fn(leaves, utt):
        out = model.forward(leaves, utt)
        return (ndgrad.softmax(out.ctc_logprobs), ndgrad.softmax(out.dec_logprobs))
    return fn


def _batch_distill(model: Model, teacher: ParamVector, leaves: dict,
                   utts: list[Utterance], lam: float, gamma: float) -> Tensor:
    """Mean over the batch of the per-utterance distillation loss."""
    s_ctc, s_dec, f_off, d_off = model.batch_outputs(leaves, utts)
    teacher_outs = [model.np_outputs(teacher, u) for u in utts]
    t_ctc = np.vstack([t[0] for t in teacher_outs])
    t_dec = np.vstack([t[1] for t in teacher_outs])
    total = distill_loss(t_ctc, t_dec, s_ctc, s_dec, lam=lam, gamma=gamma,
                         c=model.cfg.ctc_weight)
    return ndgrad.mul(total, 1.0 / len(utts))


# ---------------------------------------------------------------------------
# strategies

class Strategy:
    """Fine-tuning: every hook is the identity."""

    name = "FT"
    uses_memory = False

    def __init__(self, **hyper):
        self.hyper = hyper

    def compose_batch(self, batch: list[Utterance], ctx: TrainContext):
        return [(batch, 1.0)]

    def compose_epoch(self, train: list[Utterance], ctx: TrainContext):
        return list(train)

    def extra_loss(self, leaves: dict, batch: list[Utterance], ctx: TrainContext):
        return None

    def transform_grad(self, g: ParamVector, ctx: TrainContext) -> ParamVector:
        return g

    def on_task_end(self, params: ParamVector, train: list[Utterance],
                    ctx: TrainContext) -> None:
        pass

    def aux_state(self) -> dict:
        """Auxiliary tensors persisted between tasks (for storage accounting)."""
        return {}

    def set_strength(self, lam: float) -> None:
        self.hyper["lam"] = float(lam)


class _PenaltyStrategy(Strategy):
    """Shared plumbing for the quadratic-penalty family."""

    def __init__(self, lam: float, **hyper):
        super().__init__(lam=lam, **hyper)
        self.curv: Curvature | None = None

    def extra_loss(self, leaves, batch, ctx):
        if self.curv is None:
            return None
        return quad_penalty(self.curv, leaves)

    def set_strength(self, lam):
        super().set_strength(lam)
        if self.curv is not None:
            self.curv.strength = float(lam)

    def aux_state(self):
        if self.curv is None:
            return {}
        state = {f"curv.diag.{n}": a for n, a in self.curv.diag.items()}
        for i, term in enumerate(self.curv.lowrank):
            if isinstance(term, DenseLowRank):
                state[f"curv.lr{i}.U"] = term.U
                state[f"curv.lr{i}.M"] = term.M
            else:
                for n, (a, q) in term.factors.items():
                    state[f"curv.lr{i}.A.{n}"] = a
                    state[f"curv.lr{i}.Q.{n}"] = q
        return state

    def _omega(self, params, train, ctx) -> ParamVector:
        raise NotImplementedError

    def on_task_end(self, params, train, ctx):
        n = min(ctx.fisher_samples, len(train))
        idx = ctx.rng.choice(len(train), size=n, replace=False)
        samples = [train[i] for i in idx]
        omega = self._omega(params, samples, ctx)
        if self.curv is None:
            self.curv = Curvature(diag=omega, anchor=params.copy(),
                                  strength=self.hyper["lam"])
        else:
            self.curv.accumulate(omega)
            self.curv.anchor = params.copy()


class EwcStrategy(_PenaltyStrategy):
    name = "EWC"

    def _omega(self, params, samples, ctx):
        return ewc_fisher(model_loss_fn(ctx.model), params, samples)


class MasStrategy(_PenaltyStrategy):
    name = "MAS"

    def _omega(self, params, samples, ctx):
        return mas_importance(model_prob_outputs_fn(ctx.model), params, samples,
                              c=ctx.model.cfg.ctc_weight)


class CsqnStrategy(_PenaltyStrategy):
    name = "CSQN"

    def __init__(self, lam: float, k_pairs: int = 8, fvp_batch: int = 32, **hyper):
        super().__init__(lam=lam, k_pairs=k_pairs, fvp_batch=fvp_batch, **hyper)

    def _build(self, params, samples, ctx) -> Curvature:
        base = ewc_fisher(model_loss_fn(ctx.model), params, samples)
        fvp_n = min(self.hyper["fvp_batch"], len(samples))
        return csqn_build(model_grad_fn(ctx.model), params, samples[:fvp_n],
                          base_diag=base, k_pairs=self.hyper["k_pairs"],
                          lam=self.hyper["lam"], rng=ctx.rng)

    def on_task_end(self, params, train, ctx):
        n = min(ctx.fisher_samples, len(train))
        idx = ctx.rng.choice(len(train), size=n, replace=False)
        built = self._build(params, [train[i] for i in idx], ctx)
        if self.curv is None:
            self.curv = built
        else:
            self.curv.accumulate(built.diag)
            self.curv.lowrank.extend(built.lowrank)
            self.curv.anchor = params.copy()
            self.curv.strength = self.hyper["lam"]


class CsqnBtStrategy(CsqnStrategy):
    name = "CSQN-BT"

    def __init__(self, lam: float, k_pairs: int = 8, block_rank: int = 2, **hyper):
        super().__init__(lam=lam, k_pairs=k_pairs, **hyper)
        self.hyper["block_rank"] = block_rank

    def _build(self, params, samples, ctx):
        return csqn_bt_reduce(super()._build(params, samples, ctx),
                              self.hyper["block_rank"])


class LwfStrategy(Strategy):
    """Distill the pre-adaptation model into the student on new-task batches."""

    name = "LWF"

    def __init__(self, lam: float, gamma: float = 1.0, **hyper):
        super().__init__(lam=lam, gamma=gamma, **hyper)
        self.teacher: ParamVector | None = None

    def extra_loss(self, leaves, batch, ctx):
        if self.teacher is None:
            return None
        return _batch_distill(ctx.model, self.teacher, leaves, batch,
                              self.hyper["lam"], self.hyper["gamma"])

    def on_task_end(self, params, train, ctx):
        self.teacher = params.copy()


class KdStrategy(LwfStrategy):
    """Same loss as LWF, computed on a memory mini-batch instead."""

    name = "KD"
    uses_memory = True

    def extra_loss(self, leaves, batch, ctx):
        if self.teacher is None or ctx.memory is None or len(ctx.memory) == 0:
            return None
        mem_batch = ctx.memory.sample_minibatch(ctx.batch_size, ctx.rng)
        return _batch_distill(ctx.model, self.teacher, leaves, mem_batch,
                              self.hyper["lam"], self.hyper["gamma"])


class AgemStrategy(Strategy):
    name = "AGEM"
    uses_memory = True

    def __init__(self, **hyper):
        super().__init__(**hyper)
        self.trace: list[dict] = []

    def transform_grad(self, g, ctx):
        if ctx.memory is None or len(ctx.memory) == 0:
            return g
        mem_batch = ctx.memory.sample_minibatch(ctx.batch_size, ctx.rng)
        with Tape() as tape:
            leaves = {n: Tensor(a) for n, a in ctx.params.items()}
            loss = ctx.model.batch_hybrid_loss(leaves, mem_batch)
        g_ref = ndgrad.backward(loss, tape).param_grads(leaves)
        out = agem_transform(g, g_ref)
        self.trace.append({
            "dot_before": g.dot(g_ref),
            "dot_after": out.dot(g_ref),
            "projected": out is not g,
            "unchanged": out is g,
        })
        return out


class ErStrategy(Strategy):
    name = "ER"
    uses_memory = True
    mode = "ER"

    def compose_batch(self, batch, ctx):
        if ctx.memory is None or len(ctx.memory) == 0:
            return [(batch, 1.0)]  # nothing to rehearse before the first task ends
        return er_compose(batch, ctx.memory, self.mode, self.hyper.get("lam"),
                          ctx.rng, ctx.batch_size)


class ErLambdaStrategy(ErStrategy):
    name = "ER_LAMBDA"
    mode = "ER_LAMBDA"

    def __init__(self, lam: float, **hyper):
        if not 0.0 < lam < 1.0:
            raise StrategyError(f"ER_LAMBDA weight must lie in (0,1): {lam}")
        super().__init__(lam=lam, **hyper)


class BerStrategy(Strategy):
    name = "BER"
    uses_memory = True

    def compose_epoch(self, train, ctx):
        if ctx.memory is None or len(ctx.memory) == 0:
            return list(train)
        (merged, _), = er_compose(train, ctx.memory, "BER", None, ctx.rng)
        return merged


def make_strategy(name: str, hyper: dict | None = None) -> Strategy:
    """Instantiate a strategy by canonical name (aliases accepted)."""
    hyper = dict(hyper or {})
    canonical = _ALIASES.get(name, name)
    classes = {
        "FT": Strategy, "EWC": EwcStrategy, "MAS": MasStrategy,
        "CSQN": CsqnStrategy, "CSQN-BT": CsqnBtStrategy, "LWF": LwfStrategy,
        "ER": ErStrategy, "ER_LAMBDA": ErLambdaStrategy, "BER": BerStrategy,
        "AGEM": AgemStrategy, "KD": KdStrategy,
    }
    if canonical not in classes:
        raise StrategyError(
            f"unknown strategy {name!r}; valid names: {', '.join(STRATEGY_NAMES)}")
    cls = classes[canonical]
    needs_lam = canonical in ("EWC", "MAS", "CSQN", "CSQN-BT", "LWF", "KD", "ER_LAMBDA")
    if needs_lam and "lam" not in hyper:
        raise StrategyError(f"{canonical} requires hyper-parameter 'lam'")
    try:
        return cls(**hyper)
    except TypeError as e:
        raise StrategyError(f"bad hyper-parameters for {canonical}: {e}") from e
