"""LSTM token language models.

One model class serves three roles: the sampling LM that drives scheduled
sampling, and the source/external LMs consumed by density-ratio fusion at
decode time.  The output layer covers V + 1 symbols: index 0 is the
end-of-sequence marker (only meaningful for full-sequence scoring), indices
1..V are the real tokens.  Inputs are embedded like the transducer's
prediction network, with the begin-of-sequence marker at row V + 1.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import checkpoint
from .errors import ContractError, DomainError
from .networks import (
    LstmState,
    LstmWeights,
    Vocabulary,
    init_lstm,
    log_softmax,
    lstm_backward,
    lstm_forward,
    lstm_step,
    zero_state,
)
from .numerics import AdamW, LrSchedule, derived_rng, lr_at_epoch, make_rng

EOS_ID = 0  # output-space index of the end-of-sequence symbol


@dataclass
class TokenLM:
    vocab: Vocabulary
    embedding: np.ndarray  # (V+2, E)
    lstm: LstmWeights
    w_out: np.ndarray  # (V+1, H)
    b_out: np.ndarray  # (V+1,)
    corpus_tag: str = "train_transcripts"  # or "target_domain"

    def named_arrays(self):
        return [
            ("embedding", self.embedding),
            ("lstm.w_x", self.lstm.w_x),
            ("lstm.w_h", self.lstm.w_h),
            ("lstm.b", self.lstm.b),
            ("w_out", self.w_out),
            ("b_out", self.b_out),
        ]

    def param_dict(self):
        return dict(self.named_arrays())


@dataclass
class LmConfig:
    hidden_size: int = 16
    embed_dim: int = 16
    epochs: int = 20
    batch_size: int = 16
    seed: int = 0
    schedule: LrSchedule | None = None
    weight_decay: float = 0.0

    def resolved_schedule(self) -> LrSchedule:
        if self.schedule is not None:
            return self.schedule
        return LrSchedule(
            lr_start=2e-3,
            lr_peak=2e-2,
            warmup_epochs=2,
            hold_epochs=max(1, self.epochs // 2),
            total_epochs=self.epochs,
        )


@dataclass
class LmEpochReport:
    epoch: int
    mean_nll_per_token: float
    perplexity: float
    learning_rate: float


def init_lm(vocab: Vocabulary, config: LmConfig, corpus_tag: str = "train_transcripts") -> TokenLM:
    rng = make_rng(config.seed)
    V = vocab.size
    lim = 1.0 / np.sqrt(config.embed_dim)
    embedding = rng.uniform(-lim, lim, (V + 2, config.embed_dim))
    lstm = init_lstm(config.embed_dim, config.hidden_size, rng)
    lim_o = 1.0 / np.sqrt(config.hidden_size)
    w_out = rng.uniform(-lim_o, lim_o, (V + 1, config.hidden_size))
    b_out = np.zeros(V + 1)
    return TokenLM(vocab, embedding, lstm, w_out, b_out, corpus_tag)


# ---------------------------------------------------------------------------
# scoring


def lm_initial_state(lm: TokenLM) -> LstmState:
    """State after consuming the begin-of-sequence marker."""
    _, state = lstm_step(lm.lstm, lm.embedding[lm.vocab.bos_id], zero_state(lm.lstm.hidden_size))
    return state


def lm_advance(lm: TokenLM, state: LstmState, token: int) -> LstmState:
    if not (1 <= token <= lm.vocab.size):
        raise ContractError(f"token id {token} outside 1..{lm.vocab.size}")
    _, new_state = lstm_step(lm.lstm, lm.embedding[token], state)
    return new_state


def lm_next_log_probs(lm: TokenLM, state: LstmState) -> np.ndarray:
    """Log-distribution over [eos, token 1..V] given the encoded history."""
    return log_softmax(lm.w_out @ state.hidden + lm.b_out)


def lm_step_scores(lm: TokenLM, tokens) -> np.ndarray:
    """Per-step conditional log-probabilities, ending with the eos score."""
    lm.vocab.check_tokens(tokens)
    state = lm_initial_state(lm)
    scores = np.empty(len(tokens) + 1)
    for u, tok in enumerate(tokens):
        scores[u] = lm_next_log_probs(lm, state)[tok]
        state = lm_advance(lm, state, tok)
    scores[-1] = lm_next_log_probs(lm, state)[EOS_ID]
    return scores


def lm_log_prob(lm: TokenLM, tokens) -> float:
    """log p(tokens, eos); always <= 0."""
    return float(lm_step_scores(lm, tokens).sum())


def lm_prefix_log_prob(lm: TokenLM, tokens) -> float:
    """log p(tokens ...) without the eos term, for scoring partial hypotheses."""
    if not tokens:
        return 0.0
    return float(lm_step_scores(lm, tokens)[:-1].sum())


def lm_topk(lm: TokenLM, history, k: int):
    """The k most probable next real tokens (eos excluded), descending.

    ``history`` is either a token list (rolled from scratch) or an LstmState.
    Ties at equal probability break toward the lower token id.
    """
    if not (1 <= k <= lm.vocab.size):
        raise DomainError(f"k = {k} outside 1..{lm.vocab.size}")
    if isinstance(history, LstmState):
        state = history
    else:
        lm.vocab.check_tokens(history)
        state = lm_initial_state(lm)
        for tok in history:
            state = lm_advance(lm, state, tok)
    scores = lm_next_log_probs(lm, state)[1:]  # drop eos
    ids = np.arange(1, lm.vocab.size + 1)
    order = np.lexsort((ids, -scores))
    return [int(ids[i]) for i in order[:k]]


def lm_perplexity(lm: TokenLM, corpus) -> float:
    """exp(mean negative log-likelihood per predicted token, eos included)."""
    total_nll = 0.0
    total_tokens = 0
    for tokens in corpus:
        total_nll -= lm_log_prob(lm, tokens)
        total_tokens += len(tokens) + 1
    if total_tokens == 0:
        raise DomainError("perplexity of an empty corpus")
    return float(np.exp(total_nll / total_tokens))


# ---------------------------------------------------------------------------
# training


def _sequence_grads(lm: TokenLM, tokens):
    """NLL and parameter gradients for one sequence (targets include eos)."""
    ids_in = np.array([lm.vocab.bos_id] + list(tokens), dtype=np.int64)
    targets = np.array(list(tokens) + [EOS_ID], dtype=np.int64)
    inputs = lm.embedding[ids_in]
    hs, cache = lstm_forward(lm.lstm, inputs)
    logits = hs @ lm.w_out.T + lm.b_out
    log_probs = log_softmax(logits)
    nll = -float(log_probs[np.arange(len(targets)), targets].sum())

    d_logits = np.exp(log_probs)
    d_logits[np.arange(len(targets)), targets] -= 1.0
    g_w_out = d_logits.T @ hs
    g_b_out = d_logits.sum(axis=0)
    d_hs = d_logits @ lm.w_out
    d_inputs, lstm_grads = lstm_backward(lm.lstm, cache, d_hs)
    g_emb = np.zeros_like(lm.embedding)
    np.add.at(g_emb, ids_in, d_inputs)
    grads = {
        "embedding": g_emb,
        "lstm.w_x": lstm_grads.w_x,
        "lstm.w_h": lstm_grads.w_h,
        "lstm.b": lstm_grads.b,
        "w_out": g_w_out,
        "b_out": g_b_out,
    }
    return nll, len(targets), grads


def lm_train(corpus, vocab: Vocabulary, config: LmConfig | None = None,
             corpus_tag: str = "train_transcripts"):
    """Fit a token LM by next-token maximum likelihood.

    Gradients are averaged per predicted token within each batch.  Returns
    (lm, per-epoch reports); warns when the loss fails to decrease
    monotonically over the first three epochs, which indicates a schedule
    misconfiguration for the corpus at hand.
    """
    corpus = [list(seq) for seq in corpus]
    if not corpus:
        raise DomainError("cannot train a language model on an empty corpus")
    for seq in corpus:
        vocab.check_tokens(seq)
    config = config or LmConfig()
    schedule = config.resolved_schedule()
    lm = init_lm(vocab, config, corpus_tag)
    params = lm.param_dict()
    opt = AdamW(weight_decay=config.weight_decay)
    reports: list[LmEpochReport] = []
    for epoch in range(1, config.epochs + 1):
        lr = lr_at_epoch(schedule, epoch)
        order = derived_rng(config.seed, "lm-order", epoch).permutation(len(corpus))
        epoch_nll = 0.0
        epoch_tokens = 0
        for start in range(0, len(order), config.batch_size):
            batch = order[start : start + config.batch_size]
            total = {name: np.zeros_like(a) for name, a in params.items()}
            batch_tokens = 0
            for idx in batch:
                nll, n_targets, grads = _sequence_grads(lm, corpus[idx])
                epoch_nll += nll
                epoch_tokens += n_targets
                batch_tokens += n_targets
                for name in total:
                    total[name] += grads[name]
            for name in total:
                total[name] /= batch_tokens
            opt.step(params, total, lr)
        mean_nll = epoch_nll / epoch_tokens
        reports.append(LmEpochReport(epoch, mean_nll, float(np.exp(mean_nll)), lr))
    if len(reports) >= 3 and not (
        reports[0].mean_nll_per_token
        > reports[1].mean_nll_per_token
        > reports[2].mean_nll_per_token
    ):
        warnings.warn(
            "token-LM loss did not decrease over the first three epochs; "
            "check the learning-rate schedule",
            RuntimeWarning,
        )
    return lm, reports


# ---------------------------------------------------------------------------
# checkpoints


def save_lm(lm: TokenLM, path) -> None:
    meta = {
        "hidden_size": lm.lstm.hidden_size,
        "embed_dim": lm.embedding.shape[1],
        "corpus_tag": lm.corpus_tag,
    }
    checkpoint.save_container(path, "token_lm", lm.vocab.symbols, meta, lm.param_dict())


def load_lm(path) -> TokenLM:
    payload = checkpoint.load_container(path, expect_kind="token_lm")
    vocab = Vocabulary(payload["vocab_symbols"])
    arrays = payload["arrays"]
    lstm = LstmWeights(arrays["lstm.w_x"], arrays["lstm.w_h"], arrays["lstm.b"])
    return TokenLM(
        vocab,
        arrays["embedding"],
        lstm,
        arrays["w_out"],
        arrays["b_out"],
        payload["meta"].get("corpus_tag", "train_transcripts"),
    )
