"""CTC loss via log-space forward-backward over blank-extended label sequences.

The batched kernel runs the alpha/beta recursions for a whole mini-batch at
once (states vectorized, one Python loop over time); the gradient with respect
to the per-frame log-probabilities is the negative state-occupancy posterior.
A prefix scorer supports hybrid beam decoding.
"""
from __future__ import annotations

import numpy as np

from . import ndgrad
from .ndgrad import Tensor

BLANK = 0

NEG_INF = -np.inf


class CtcInfeasibleError(Exception):
    """Raised when the frame count cannot accommodate the label sequence."""

    def __init__(self, n_frames: int, tokens) -> None:
        need = min_frames(tokens)
        super().__init__(
            f"CTC alignment infeasible: {n_frames} frames < {need} required "
            f"for target of length {len(tokens)}")
        self.n_frames = n_frames
        self.required = need


def extended_labels(tokens) -> np.ndarray:
    """Blank-extended label sequence: ∅ t1 ∅ t2 ∅ ... ∅."""
    tokens = np.asarray(tokens, dtype=np.int64)
    ext = np.full(2 * len(tokens) + 1, BLANK, dtype=np.int64)
    ext[1::2] = tokens
    return ext


def min_frames(tokens) -> int:
    tokens = np.asarray(tokens, dtype=np.int64)
    repeats = int(np.sum(tokens[1:] == tokens[:-1])) if len(tokens) > 1 else 0
    return len(tokens) + repeats


def _skip_allowed(ext: np.ndarray) -> np.ndarray:
    allowed = np.zeros(len(ext), dtype=bool)
    if len(ext) > 2:
        allowed[2:] = (ext[2:] != BLANK) & (ext[2:] != ext[:-2])
    return allowed


def _batch_alphas(stacked: np.ndarray, offsets: np.ndarray, lengths: np.ndarray,
                  ext_mat: np.ndarray, s_lens: np.ndarray, skip_mat: np.ndarray):
    """Forward recursion for all utterances at once; returns per-t alphas."""
    b, s_max = ext_mat.shape
    t_max = int(lengths.max())
    alphas = np.full((t_max, b, s_max), NEG_INF)

    emis0 = stacked[offsets[:, None], ext_mat]
    a = np.full((b, s_max), NEG_INF)
    a[:, 0] = emis0[:, 0]
    has2 = s_lens >= 2
    a[has2, 1] = emis0[has2, 1]
    alphas[0] = a

    for t in range(1, t_max):
        active = t < lengths
        rows = offsets + np.minimum(t, lengths - 1)  # clamp finished utterances
        emis = stacked[rows[:, None], ext_mat]
        shift1 = np.full_like(a, NEG_INF)
        shift1[:, 1:] = a[:, :-1]
        shift2 = np.full_like(a, NEG_INF)
        shift2[:, 2:] = a[:, :-2]
        shift2 = np.where(skip_mat, shift2, NEG_INF)
        merged = np.logaddexp(np.logaddexp(a, shift1), shift2) + emis
        a = np.where(active[:, None], merged, a)
        alphas[t] = a
    return alphas


def ctc_losses_batch_raw(stacked: np.ndarray, offsets: np.ndarray,
                         token_seqs: list) -> tuple[np.ndarray, callable]:
    """Negative log-likelihoods for a batch plus a closure for the gradient.

    `stacked` is the row-concatenation of per-utterance [L×o] log-prob
    matrices, `offsets[i]` the first row of utterance i. Returns the loss
    vector and `grad(gout) -> d(losses·gout)/d(stacked)`.
    """
    b = len(token_seqs)
    lengths = np.array([offsets[i + 1] - offsets[i] for i in range(b)], dtype=np.int64)
    exts = [extended_labels(t) for t in token_seqs]
    s_lens = np.array([len(e) for e in exts], dtype=np.int64)
    for i in range(b):
        if lengths[i] < min_frames(token_seqs[i]):
            raise CtcInfeasibleError(int(lengths[i]), token_seqs[i])
    s_max = int(s_lens.max())
    ext_mat = np.zeros((b, s_max), dtype=np.int64)
    skip_mat = np.zeros((b, s_max), dtype=bool)
    for i, e in enumerate(exts):
        ext_mat[i, :len(e)] = e
        skip_mat[i, :len(e)] = _skip_allowed(e)

    starts = offsets[:-1].astype(np.int64)
    alphas = _batch_alphas(stacked, starts, lengths, ext_mat, s_lens, skip_mat)

    rows = np.arange(b)
    # rows freeze once t >= length, so the last slab holds every final row
    a_last = alphas[-1]
    tail = np.logaddexp(a_last[rows, s_lens - 1],
                        np.where(s_lens >= 2, a_last[rows, s_lens - 2], NEG_INF))
    losses = -tail

    def grad(gout: np.ndarray) -> np.ndarray:
        g = np.zeros_like(stacked)
        t_max = alphas.shape[0]
        beta = np.full((b, s_max), NEG_INF)
        log_p = tail
        for t in range(t_max - 1, -1, -1):
            init_now = t == lengths - 1
            if init_now.any():
                idx = np.where(init_now)[0]
                beta[idx, s_lens[idx] - 1] = 0.0
                has2 = idx[s_lens[idx] >= 2]
                beta[has2, s_lens[has2] - 2] = 0.0
            step = t < lengths - 1
            if step.any():
                rows = starts + np.minimum(t + 1, lengths - 1)
                emis_next = stacked[rows[:, None], ext_mat]
                term = beta + emis_next
                shift1 = np.full_like(term, NEG_INF)
                shift1[:, :-1] = term[:, 1:]
                shift2 = np.full_like(term, NEG_INF)
                shift2[:, :-2] = term[:, 2:]
                skip_from = np.zeros_like(skip_mat)
                skip_from[:, :-2] = skip_mat[:, 2:]
                shift2 = np.where(skip_from, shift2, NEG_INF)
                merged = np.logaddexp(np.logaddexp(term, shift1), shift2)
                beta = np.where(step[:, None], merged, beta)
            active = t < lengths
            with np.errstate(invalid="ignore"):
                occ = alphas[t] + beta - log_p[:, None]
            gamma = np.where(np.isfinite(occ), np.exp(occ), 0.0)
            gamma *= active[:, None]
            rows = starts + np.minimum(t, lengths - 1)  # inactive rows carry zeros
            np.add.at(g, (rows[:, None], ext_mat), -gamma * gout[:, None])
        return g

    return losses, grad


def ctc_loss_batch(stacked: Tensor, offsets: np.ndarray, token_seqs: list) -> Tensor:
    """Vector of per-utterance CTC losses, differentiable w.r.t. `stacked`."""
    offsets = np.asarray(offsets, dtype=np.int64)
    losses, grad = ctc_losses_batch_raw(stacked.data, offsets, token_seqs)
    return ndgrad.record("ctc_loss", losses, (stacked,), lambda g: (grad(g),))


def ctc_loss(logprobs: Tensor, tokens) -> Tensor:
    """Scalar −log P(tokens | logprobs) for one utterance."""
    logprobs = ndgrad.as_tensor(logprobs)
    n = logprobs.data.shape[0]
    losses, grad = ctc_losses_batch_raw(logprobs.data, np.array([0, n]), [tokens])
    return ndgrad.record("ctc_loss", np.asarray(losses[0]), (logprobs,),
                         lambda g: (grad(np.asarray([g])),))


# ---------------------------------------------------------------------------
# prefix scoring for hybrid beam decoding

class PrefixState:
    __slots__ = ("r_n", "r_b", "last")

    def __init__(self, r_n: np.ndarray, r_b: np.ndarray, last: int):
        self.r_n = r_n
        self.r_b = r_b
        self.last = last


class CtcPrefixScorer:
    """Incremental prefix log-probabilities log P(output starts with h)."""

    def __init__(self, logprobs: np.ndarray):
        self.lp = np.asarray(logprobs, dtype=np.float64)
        self.t = self.lp.shape[0]

    def initial(self) -> PrefixState:
        r_b = np.cumsum(self.lp[:, BLANK])
        r_n = np.full(self.t, NEG_INF)
        return PrefixState(r_n, r_b, -1)

    def extend(self, state: PrefixState, c: int) -> tuple[PrefixState, float]:
        """State for prefix h·c and its prefix score."""
        if c == BLANK:
            raise ValueError("cannot extend a prefix with the blank symbol")
        lp_c = self.lp[:, c]
        r_n = np.full(self.t, NEG_INF)
        r_b = np.full(self.t, NEG_INF)
        prev_b = 0.0 if state.last == -1 else NEG_INF
        prev_n = NEG_INF
        score = NEG_INF
        for t in range(self.t):
            phi = prev_b if state.last == c else np.logaddexp(prev_b, prev_n)
            r_n[t] = np.logaddexp(r_n[t - 1] if t else NEG_INF, phi) + lp_c[t]
            r_b[t] = np.logaddexp(r_b[t - 1] if t else NEG_INF,
                                  r_n[t - 1] if t else NEG_INF) + self.lp[t, BLANK]
            score = np.logaddexp(score, phi + lp_c[t])
            prev_b = state.r_b[t]
            prev_n = state.r_n[t]
        return PrefixState(r_n, r_b, c), float(score)

    def full_logprob(self, state: PrefixState) -> float:
        """log P(output equals the prefix exactly)."""
        return float(np.logaddexp(state.r_n[-1], state.r_b[-1]))
