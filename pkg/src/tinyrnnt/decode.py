"""Inference: greedy decoding, alignment-length synchronous beam search,
density-ratio LM fusion, and token error rate measurement.

The beam search advances every hypothesis by exactly one alignment symbol per
round (emit a token, or emit null and consume a frame), so all live
hypotheses share the same alignment length.  Hypotheses with identical token
sequences at the same alignment length sit on the same lattice node and are
merged by log-sum of their scores, which makes an exhaustive beam equal to
full marginalization per token sequence.  A hypothesis finalizes when it
takes the null transition on the last frame.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import networks, tokenlm
from .errors import ContractError, DomainError
from .networks import NULL_ID, LstmState, ModelParams


@dataclass
class FusionWeights:
    """Weights of the density-ratio decoding objective
    score - mu*log p_src(y) + lam*log p_ext(y) + rho*|y|."""

    mu: float = 0.0
    lam: float = 0.0
    rho: float = 0.0


@dataclass
class Hypothesis:
    tokens: list[int]
    rnnt_log_prob: float
    pred_state: LstmState | None
    alignment_length: int
    fused_score: float | None = None
    truncated: bool = False


def fuse_scores(rnnt_log_prob: float, tokens, src_lm, ext_lm, weights: FusionWeights) -> float:
    """The density-ratio combination, exactly as written."""
    if src_lm.vocab.symbols != ext_lm.vocab.symbols:
        raise ContractError("source and external LMs use different vocabularies")
    return (
        rnnt_log_prob
        - weights.mu * tokenlm.lm_log_prob(src_lm, tokens)
        + weights.lam * tokenlm.lm_log_prob(ext_lm, tokens)
        + weights.rho * len(tokens)
    )


# ---------------------------------------------------------------------------
# greedy


def greedy_decode(params: ModelParams, frames, max_symbols_per_frame: int = 4):
    """Frame-synchronous argmax decoding; emits until null (or the per-frame
    cap) then advances to the next frame."""
    if max_symbols_per_frame < 1:
        raise DomainError("max_symbols_per_frame must be at least 1")
    F, _ = networks.transcription_forward(params, frames)
    g, state = networks.prediction_initial(params)
    tokens: list[int] = []
    for t in range(F.shape[0]):
        emitted = 0
        while emitted < max_symbols_per_frame:
            lp = networks.joint_distribution(params, F[t], g)
            best = int(np.argmax(lp))
            if best == NULL_ID:
                break
            tokens.append(best)
            g, state = networks.prediction_step(params, state, best)
            emitted += 1
    return tokens


# ---------------------------------------------------------------------------
# beam search


@dataclass
class _Item:
    tokens: tuple
    frames_consumed: int
    score: float
    g: np.ndarray
    state: LstmState


def beam_search_alsd(
    params: ModelParams,
    frames,
    beam_width: int,
    max_alignment_length: int | None = None,
    fusion: FusionWeights | None = None,
    src_lm=None,
    ext_lm=None,
    fuse_in_beam: bool = False,
):
    """Alignment-length synchronous beam search.

    Returns up to beam_width finalized hypotheses ranked by fused score when
    fusion weights and both LMs are given (rescoring after finalization by
    default; ``fuse_in_beam`` also applies partial fusion scores during
    pruning).  If nothing finalizes within max_alignment_length, the best
    partial hypothesis is returned with ``truncated`` set.
    """
    if beam_width < 1:
        raise DomainError("beam_width must be at least 1")
    use_fusion = fusion is not None
    if use_fusion and (src_lm is None or ext_lm is None):
        raise ContractError("fusion weights given but LMs are missing")
    F, _ = networks.transcription_forward(params, frames)
    T = int(F.shape[0])
    V = params.vocab.size
    if max_alignment_length is None:
        # every frame may plausibly emit a token, so cap at T + 2*T
        max_alignment_length = 3 * T
    g0, s0 = networks.prediction_initial(params)
    beams: dict[tuple, _Item] = {(): _Item((), 0, 0.0, g0, s0)}
    finalized: dict[tuple, float] = {}
    # a hypothesis with u tokens still needs T - t nulls, so its final
    # alignment length is at least u + T; longer expansions cannot finalize
    # within the budget and are pruned up front
    max_tokens = max_alignment_length - T

    def partial_fusion(tokens_tuple) -> float:
        if not (use_fusion and fuse_in_beam):
            return 0.0
        toks = list(tokens_tuple)
        return (
            -fusion.mu * tokenlm.lm_prefix_log_prob(src_lm, toks)
            + fusion.lam * tokenlm.lm_prefix_log_prob(ext_lm, toks)
            + fusion.rho * len(toks)
        )

    for _ in range(max_alignment_length):
        if not beams:
            break
        candidates: dict[tuple, list] = {}  # key -> [score, parent, emitted]
        for key in sorted(beams):
            item = beams[key]
            lp = networks.joint_distribution(params, F[item.frames_consumed], item.g)
            blank_score = item.score + float(lp[NULL_ID])
            if item.frames_consumed + 1 == T:
                if key in finalized:
                    finalized[key] = float(np.logaddexp(finalized[key], blank_score))
                else:
                    finalized[key] = blank_score
            else:
                _merge(candidates, key, blank_score, item, None)
            if len(key) < max_tokens:
                for k in range(1, V + 1):
                    _merge(candidates, key + (k,), item.score + float(lp[k]), item, k)
        ranked = sorted(
            candidates.items(),
            key=lambda kv: (-(kv[1][0] + partial_fusion(kv[0])), kv[0]),
        )
        beams = {}
        for key, (score, parent, emitted) in ranked[:beam_width]:
            if emitted is None:
                g, state = parent.g, parent.state
                t = parent.frames_consumed + 1
            else:
                g, state = networks.prediction_step(params, parent.state, emitted)
                t = parent.frames_consumed
            beams[key] = _Item(key, t, score, g, state)

    if not finalized:
        best = max(beams.values(), key=lambda it: (it.score, it.tokens)) if beams else None
        if best is None:
            raise DomainError("no hypotheses explored; check max_alignment_length")
        return [
            Hypothesis(
                list(best.tokens),
                best.score,
                best.state,
                best.frames_consumed + len(best.tokens),
                truncated=True,
            )
        ]

    hyps = []
    for key, score in finalized.items():
        fused = (
            fuse_scores(score, list(key), src_lm, ext_lm, fusion) if use_fusion else None
        )
        hyps.append(Hypothesis(list(key), score, None, T + len(key), fused_score=fused))
    if use_fusion:
        hyps.sort(key=lambda h: (-h.fused_score, tuple(h.tokens)))
    else:
        hyps.sort(key=lambda h: (-h.rnnt_log_prob, tuple(h.tokens)))
    return hyps[:beam_width]


def _merge(candidates, key, score, parent, emitted):
    entry = candidates.get(key)
    if entry is None:
        candidates[key] = [score, parent, emitted]
    else:
        entry[0] = float(np.logaddexp(entry[0], score))


# ---------------------------------------------------------------------------
# token error rate


@dataclass
class EditCounts:
    substitutions: int = 0
    deletions: int = 0
    insertions: int = 0

    @property
    def errors(self) -> int:
        return self.substitutions + self.deletions + self.insertions

    def __iadd__(self, other):
        self.substitutions += other.substitutions
        self.deletions += other.deletions
        self.insertions += other.insertions
        return self


@dataclass
class WerResult:
    rate: float
    counts: EditCounts
    per_pair: list


def edit_alignment(ref, hyp) -> EditCounts:
    """Minimal-edit S/D/I counts with unit costs.

    When several minimal alignments exist, the traceback prefers a
    substitution/match over a deletion over an insertion.
    """
    R, H = len(ref), len(hyp)
    d = np.zeros((R + 1, H + 1), dtype=np.int64)
    d[:, 0] = np.arange(R + 1)
    d[0, :] = np.arange(H + 1)
    for i in range(1, R + 1):
        for j in range(1, H + 1):
            sub = d[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1])
            dele = d[i - 1, j] + 1
            ins = d[i, j - 1] + 1
            d[i, j] = min(sub, dele, ins)
    counts = EditCounts()
    i, j = R, H
    while i > 0 or j > 0:
        if i > 0 and j > 0 and d[i, j] == d[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]):
            if ref[i - 1] != hyp[j - 1]:
                counts.substitutions += 1
            i, j = i - 1, j - 1
        elif i > 0 and d[i, j] == d[i - 1, j] + 1:
            counts.deletions += 1
            i -= 1
        else:
            counts.insertions += 1
            j -= 1
    return counts


def word_error_rate(refs, hyps) -> WerResult:
    """Corpus-level token error rate: summed edits over summed ref lengths."""
    if len(refs) != len(hyps):
        raise ContractError(f"{len(refs)} references vs {len(hyps)} hypotheses")
    total = EditCounts()
    per_pair = []
    ref_len = 0
    for ref, hyp in zip(refs, hyps):
        counts = edit_alignment(list(ref), list(hyp))
        per_pair.append(counts)
        total += counts
        ref_len += len(ref)
    if ref_len == 0:
        raise DomainError("error rate undefined: all references are empty")
    return WerResult(total.errors / ref_len, total, per_pair)
