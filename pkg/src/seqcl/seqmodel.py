"""Desk-scale hybrid CTC/attention recognizer.

Encoder: stacked-context MLP over frames. Two heads: a CTC head over encoder
states and a teacher-forced decoder head (token embedding, single-head dot
attention over encoder states, affine output). Training loss is the weighted
hybrid of CTC and decoder cross-entropy.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ctc as ctcmod
from . import ndgrad
from .ndgrad import ParamVector, Tensor

START_END = 1  # decoder start/end token; 0 is the CTC blank


@dataclass
class Utterance:
    frames: np.ndarray  # [L, d] float64
    tokens: np.ndarray  # [W] int64, ids in [2, o)

    def __post_init__(self):
        self.frames = np.ascontiguousarray(self.frames, dtype=np.float64)
        self.tokens = np.ascontiguousarray(self.tokens, dtype=np.int64)
        if self.frames.ndim != 2 or self.frames.shape[0] < 1:
            raise ValueError(f"frames must be [L>=1, d], got {self.frames.shape}")
        if self.tokens.ndim != 1 or self.tokens.shape[0] < 1:
            raise ValueError(f"tokens must be non-empty 1-D, got {self.tokens.shape}")
        if self.tokens.min() < 2:
            raise ValueError("token ids below 2 are reserved (blank, start/end)")
        if not np.isfinite(self.frames).all():
            raise ValueError("frames contain non-finite values")

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def n_tokens(self) -> int:
        return self.tokens.shape[0]

    def nbytes(self) -> int:
        return self.frames.nbytes + self.tokens.nbytes


@dataclass(frozen=True)
class ModelConfig:
    d: int = 6
    h: int = 32
    enc_layers: int = 2
    o: int = 8
    ctc_weight: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if min(self.d, self.h, self.enc_layers) < 1:
            raise ValueError("d, h and enc_layers must be positive")
        if self.o < 3:
            raise ValueError("alphabet must hold blank, start/end and a content token")
        if not 0.0 <= self.ctc_weight <= 1.0:
            raise ValueError(f"ctc_weight outside [0, 1]: {self.ctc_weight}")


@dataclass
class ModelOutputs:
    ctc_logprobs: Tensor  # [L, o]
    dec_logprobs: Tensor  # [W+1, o], teacher-forced, end token included


def stack_context(frames: np.ndarray) -> np.ndarray:
    """±1-frame context stacking with zero edge padding: [L, d] -> [L, 3d]."""
    prev = np.vstack([np.zeros_like(frames[:1]), frames[:-1]])
    nxt = np.vstack([frames[1:], np.zeros_like(frames[:1])])
    return np.hstack([prev, frames, nxt])


class Model:
    """Parameter layout plus forward passes (graph-recording or plain)."""

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        d, h, o = cfg.d, cfg.h, cfg.o
        layout: list[tuple[str, tuple]] = [("enc0.W", (3 * d, h)), ("enc0.b", (h,))]
        for i in range(1, cfg.enc_layers):
            layout += [(f"enc{i}.W", (h, h)), (f"enc{i}.b", (h,))]
        layout += [
            ("ctc.W", (h, o)), ("ctc.b", (o,)),
            ("dec.emb", (o, h)),
            ("dec.Wq", (h, h)), ("dec.bq", (h,)),
            ("dec.We", (h, o)),
            ("dec.Wo", (h, o)), ("dec.bo", (o,)),
        ]
        self.layout = layout

    # -- parameters ---------------------------------------------------------

    def init_params(self) -> ParamVector:
        rng = np.random.default_rng(self.cfg.seed)
        segs = {}
        for name, shape in self.layout:
            if name.endswith(".b"):
                segs[name] = np.zeros(shape)
            else:
                fan_in = self.cfg.h if name == "dec.emb" else shape[0]
                bound = 1.0 / np.sqrt(fan_in)
                segs[name] = rng.uniform(-bound, bound, size=shape)
        return ParamVector(segs)

    def n_params(self) -> int:
        return sum(int(np.prod(s)) for _, s in self.layout)

    def leaves(self, params) -> dict[str, Tensor]:
        if isinstance(params, ParamVector):
            return {name: Tensor(arr) for name, arr in params.items()}
        return params

    def _check_utt(self, utt: Utterance) -> None:
        if utt.frames.shape[1] != self.cfg.d:
            raise ValueError(
                f"feature dim {utt.frames.shape[1]} != model d={self.cfg.d}")
        if utt.tokens.max() >= self.cfg.o:
            raise ValueError("token id outside alphabet")

    # -- graph forward ------------------------------------------------------

    def encode(self, leaves: dict, stacked: np.ndarray) -> Tensor:
        hdn = ndgrad.as_tensor(stacked)
        for i in range(self.cfg.enc_layers):
            hdn = ndgrad.tanh(ndgrad.affine(hdn, leaves[f"enc{i}.W"], leaves[f"enc{i}.b"]))
        return hdn

    def ctc_head(self, leaves: dict, enc: Tensor) -> Tensor:
        return ndgrad.log_softmax(ndgrad.affine(enc, leaves["ctc.W"], leaves["ctc.b"]))

    def _dec_logits(self, leaves: dict, emb: Tensor, ctx: Tensor) -> Tensor:
        return ndgrad.add(ndgrad.affine(ctx, leaves["dec.Wo"], leaves["dec.bo"]),
                          ndgrad.affine(emb, leaves["dec.We"]))

    def forward(self, params, utt: Utterance) -> ModelOutputs:
        """Single-utterance forward; decoder teacher-forced on ground truth."""
        self._check_utt(utt)
        leaves = self.leaves(params)
        enc = self.encode(leaves, stack_context(utt.frames))
        ctc_lp = self.ctc_head(leaves, enc)
        ids_in = np.concatenate([[START_END], utt.tokens])
        emb = ndgrad.embedding(leaves["dec.emb"], ids_in)
        q = ndgrad.affine(emb, leaves["dec.Wq"], leaves["dec.bq"])
        ctx = ndgrad.attention(q, enc, enc)
        dec_lp = ndgrad.log_softmax(self._dec_logits(leaves, emb, ctx))
        return ModelOutputs(ctc_lp, dec_lp)

    def batch_outputs(self, leaves: dict, utts: list[Utterance]):
        """One graph over a whole mini-batch.

        Returns (ctc_logprobs [ΣL×o], dec_logprobs [Σ(W+1)×o], frame_offsets,
        dec_offsets); per-utterance rows live between consecutive offsets.
        """
        if not utts:
            raise ValueError("empty batch")
        for u in utts:
            self._check_utt(u)
        stacked = np.vstack([stack_context(u.frames) for u in utts])
        frame_offsets = np.cumsum([0] + [u.n_frames for u in utts])
        enc_all = self.encode(leaves, stacked)
        ctc_all = self.ctc_head(leaves, enc_all)

        ids_in = np.concatenate([np.concatenate([[START_END], u.tokens]) for u in utts])
        dec_offsets = np.cumsum([0] + [u.n_tokens + 1 for u in utts])
        emb_all = ndgrad.embedding(leaves["dec.emb"], ids_in)
        q_all = ndgrad.affine(emb_all, leaves["dec.Wq"], leaves["dec.bq"])
        ctxs = []
        for i in range(len(utts)):
            q_u = ndgrad.slice_rows(q_all, dec_offsets[i], dec_offsets[i + 1])
            enc_u = ndgrad.slice_rows(enc_all, frame_offsets[i], frame_offsets[i + 1])
            ctxs.append(ndgrad.attention(q_u, enc_u, enc_u))
        ctx_all = ctxs[0] if len(utts) == 1 else ndgrad.concat_rows(ctxs)
        dec_all = ndgrad.log_softmax(self._dec_logits(leaves, emb_all, ctx_all))
        return ctc_all, dec_all, frame_offsets, dec_offsets

    def batch_hybrid_loss(self, leaves: dict, utts: list[Utterance],
                          c: float | None = None) -> Tensor:
        """Mean over the batch of the per-utterance hybrid loss (one graph)."""
        c = self.cfg.ctc_weight if c is None else float(c)
        b = len(utts)
        ctc_all, dec_lp, frame_offsets, _ = self.batch_outputs(leaves, utts)
        ctc_vec = ctcmod.ctc_loss_batch(ctc_all, frame_offsets, [u.tokens for u in utts])

        targets = np.concatenate([np.concatenate([u.tokens, [START_END]]) for u in utts])
        picks = ndgrad.take_rc(dec_lp, np.arange(len(targets)), targets)
        w = np.concatenate([np.full(u.n_tokens + 1, -(1.0 - c) / (b * (u.n_tokens + 1)))
                            for u in utts])
        ce_term = ndgrad.sum_(ndgrad.mul(picks, w))
        ctc_term = ndgrad.mul(ndgrad.sum_(ctc_vec), c / b)
        return ndgrad.add(ctc_term, ce_term)

    # -- plain numpy forward (decoding, frozen teachers) --------------------

    def np_encode(self, params: ParamVector, frames: np.ndarray) -> np.ndarray:
        hdn = stack_context(frames)
        for i in range(self.cfg.enc_layers):
            hdn = np.tanh(hdn @ params[f"enc{i}.W"] + params[f"enc{i}.b"])
        return hdn

    def np_ctc_logprobs(self, params: ParamVector, frames: np.ndarray) -> np.ndarray:
        logits = self.np_encode(params, frames) @ params["ctc.W"] + params["ctc.b"]
        return _log_softmax_rows(logits)

    def np_decoder_step(self, params: ParamVector, enc: np.ndarray,
                        prev_token: int) -> np.ndarray:
        e = params["dec.emb"][prev_token]
        q = e @ params["dec.Wq"] + params["dec.bq"]
        scores = enc @ q / np.sqrt(self.cfg.h)
        a = np.exp(scores - scores.max())
        a /= a.sum()
        ctx = a @ enc
        logits = ctx @ params["dec.Wo"] + params["dec.bo"] + e @ params["dec.We"]
        return _log_softmax_rows(logits)

    def np_outputs(self, params: ParamVector, utt: Utterance) -> tuple[np.ndarray, np.ndarray]:
        """(ctc_logprobs, dec_logprobs) as plain arrays, teacher-forced."""
        self._check_utt(utt)
        enc = self.np_encode(params, utt.frames)
        ctc_lp = _log_softmax_rows(enc @ params["ctc.W"] + params["ctc.b"])
        ids_in = np.concatenate([[START_END], utt.tokens])
        e = params["dec.emb"][ids_in]
        q = e @ params["dec.Wq"] + params["dec.bq"]
        scores = q @ enc.T / np.sqrt(self.cfg.h)
        a = np.exp(scores - scores.max(axis=1, keepdims=True))
        a /= a.sum(axis=1, keepdims=True)
        ctx = a @ enc
        logits = ctx @ params["dec.Wo"] + params["dec.bo"] + e @ params["dec.We"]
        return ctc_lp, _log_softmax_rows(logits)


def _log_softmax_rows(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


# ---------------------------------------------------------------------------
# losses

def ce_loss(outputs: ModelOutputs, tokens) -> Tensor:
    """Mean over target positions (tokens then end) of −log p(correct)."""
    targets = np.concatenate([np.asarray(tokens, dtype=np.int64), [START_END]])
    n_rows = outputs.dec_logprobs.data.shape[0]
    if n_rows != len(targets):
        raise ValueError(f"decoder rows {n_rows} != target positions {len(targets)}")
    picks = ndgrad.take_rc(outputs.dec_logprobs, np.arange(len(targets)), targets)
    return ndgrad.mul(ndgrad.mean_(picks), -1.0)


def ctc_loss(outputs: ModelOutputs, tokens) -> Tensor:
    return ctcmod.ctc_loss(outputs.ctc_logprobs, tokens)


def hybrid_combine(ctc_term, ce_term, c: float) -> Tensor:
    return ndgrad.add(ndgrad.mul(ndgrad.as_tensor(ctc_term), float(c)),
                      ndgrad.mul(ndgrad.as_tensor(ce_term), 1.0 - float(c)))


def hybrid_loss(model: Model, params, utt: Utterance, c: float | None = None) -> Tensor:
    c = model.cfg.ctc_weight if c is None else float(c)
    outputs = model.forward(params, utt)
    return hybrid_combine(ctc_loss(outputs, utt.tokens), ce_loss(outputs, utt.tokens), c)


def feasible(utt: Utterance) -> bool:
    return utt.n_frames >= ctcmod.min_frames(utt.tokens)


# ---------------------------------------------------------------------------
# decoding

def collapse(path) -> np.ndarray:
    """Collapse repeats, then drop blanks."""
    path = np.asarray(path, dtype=np.int64)
    if path.size == 0:
        return path
    keep = np.concatenate([[True], path[1:] != path[:-1]])
    dedup = path[keep]
    return dedup[dedup != ctcmod.BLANK]


def greedy_decode(model: Model, params: ParamVector, frames: np.ndarray) -> np.ndarray:
    logp = model.np_ctc_logprobs(params, frames)
    return collapse(logp.argmax(axis=1))


def _mix(c: float, ctc_score: float, dec_score: float) -> float:
    # 0·(−inf) must read as 0, not NaN, for the boundary weights
    left = c * ctc_score if c != 0.0 else 0.0
    right = (1.0 - c) * dec_score if c != 1.0 else 0.0
    return left + right


def hybrid_decode(model: Model, params: ParamVector, frames: np.ndarray,
                  beam: int = 4, c: float | None = None,
                  max_len: int | None = None) -> np.ndarray:
    """Decoder beam search rescored by c·CTC-prefix + (1−c)·decoder score.

    The end token competes inside the beam (a finished hypothesis scored with
    the full CTC probability); search stops when the top hypothesis is
    finished, so beam=1 with c=0 reduces to greedy decoder decoding.
    """
    c = model.cfg.ctc_weight if c is None else float(c)
    enc = model.np_encode(params, frames)
    ctc_lp = _log_softmax_rows(enc @ params["ctc.W"] + params["ctc.b"])
    scorer = ctcmod.CtcPrefixScorer(ctc_lp)
    max_len = frames.shape[0] if max_len is None else max_len

    # hyp = (score, tokens tuple, decoder logprob sum, ctc prefix state, done)
    hyps = [(0.0, (), 0.0, scorer.initial(), False)]
    for _ in range(max_len):
        if hyps[0][4]:
            break
        candidates = []
        for score, tokens, dec_lp, state, done in hyps:
            if done:
                candidates.append((score, tokens, dec_lp, state, True))
                continue
            prev = tokens[-1] if tokens else START_END
            row = model.np_decoder_step(params, enc, int(prev))
            end_score = _mix(c, scorer.full_logprob(state), dec_lp + row[START_END])
            candidates.append((end_score, tokens, dec_lp, state, True))
            for tok in range(2, model.cfg.o):
                new_state, prefix_score = scorer.extend(state, tok)
                new_dec = dec_lp + row[tok]
                combined = _mix(c, prefix_score, new_dec)
                candidates.append((combined, tokens + (tok,), new_dec, new_state, False))
        candidates.sort(key=lambda x: x[0], reverse=True)
        hyps = candidates[:beam]
    finished = [h for h in hyps if h[4]]
    if not finished:  # length cap hit: close out the surviving hypotheses
        for score, tokens, dec_lp, state, _ in hyps:
            prev = tokens[-1] if tokens else START_END
            row = model.np_decoder_step(params, enc, int(prev))
            end_score = _mix(c, scorer.full_logprob(state), dec_lp + row[START_END])
            finished.append((end_score, tokens, dec_lp, state, True))
        finished.sort(key=lambda x: x[0], reverse=True)
    return np.asarray(finished[0][1], dtype=np.int64)


def decode(model: Model, params: ParamVector, frames: np.ndarray,
           mode: str = "greedy", beam: int = 4, c: float | None = None) -> np.ndarray:
    if mode == "greedy":
        return greedy_decode(model, params, frames)
    if mode == "hybrid":
        return hybrid_decode(model, params, frames, beam=beam, c=c)
    raise ValueError(f"unknown decode mode {mode!r}")


# ---------------------------------------------------------------------------
# scoring

def error_rate(hyp, ref) -> tuple[int, int]:
    """Levenshtein edits against the reference and the reference length."""
    hyp = list(np.asarray(hyp, dtype=np.int64).ravel())
    ref = list(np.asarray(ref, dtype=np.int64).ravel())
    if len(ref) == 0:
        raise ValueError("empty reference")
    prev = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, start=1):
        cur = [i]
        for j, h in enumerate(hyp, start=1):
            cost = 0 if h == r else 1
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + cost))
        prev = cur
    return prev[-1], len(ref)


def corpus_error_rate(pairs) -> float:
    """Σ edits / Σ reference length over (hyp, ref) pairs."""
    edits = 0
    total = 0
    for hyp, ref in pairs:
        e, n = error_rate(hyp, ref)
        edits += e
        total += n
    if total == 0:
        raise ValueError("no reference tokens")
    return edits / total


def snapshot_average(snapshots: list[ParamVector]) -> ParamVector:
    """Elementwise mean, anchored at the first snapshot so that averaging n
    identical snapshots returns them bit-exactly."""
    if not snapshots:
        raise ValueError("need at least one snapshot")
    first = snapshots[0]
    acc = first.zeros_like()
    for s in snapshots[1:]:
        acc = acc + (s - first)
    return first + acc * (1.0 / len(snapshots))
