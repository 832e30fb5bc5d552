"""The three neural pieces of the transducer and their hand-written gradients.

* transcription network: stacked bidirectional LSTM over acoustic frames,
  producing one embedding f_t per frame (forward/backward halves concatenated)
* prediction network: one unidirectional LSTM over a learned begin-of-sequence
  marker followed by the label tokens, producing history embeddings g_0..g_U
* joint head: softmax(W_out . tanh(W_enc f  *  W_pred g + b)) with elementwise
  multiplication in the shared latent space

Backward passes are written by hand (full BPTT); there is no autodiff tape.
All forward functions return a cache that the matching backward consumes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DomainError
from .numerics import ParamDict

NULL_ID = 0  # the non-emitting output symbol; never appears in label sequences


@dataclass
class Vocabulary:
    """Real tokens occupy ids 1..V; id 0 is the null output, id V+1 is the
    internal begin-of-sequence marker consumed only by the prediction net."""

    symbols: list[str]

    def __post_init__(self):
        if len(set(self.symbols)) != len(self.symbols):
            raise DomainError("vocabulary symbols must be unique")
        if not self.symbols:
            raise DomainError("vocabulary must contain at least one symbol")

    @property
    def size(self) -> int:
        return len(self.symbols)

    @property
    def null_id(self) -> int:
        return NULL_ID

    @property
    def bos_id(self) -> int:
        return self.size + 1

    def check_tokens(self, tokens) -> None:
        for t in tokens:
            if not (1 <= t <= self.size):
                raise ContractError(f"token id {t} outside 1..{self.size}")


def default_vocabulary(size: int) -> Vocabulary:
    """Printable single/double-character symbols t1..tV."""
    return Vocabulary([f"t{i}" for i in range(1, size + 1)])


# ---------------------------------------------------------------------------
# LSTM cell
#
# Gates are packed along axis 0 in blocks of H rows: input, forget, candidate,
# output.  w_x is (4H, D), w_h is (4H, H), b is (4H,).


@dataclass
class LstmWeights:
    w_x: np.ndarray
    w_h: np.ndarray
    b: np.ndarray

    @property
    def hidden_size(self) -> int:
        return self.w_h.shape[1]

    @property
    def input_size(self) -> int:
        return self.w_x.shape[1]


@dataclass
class LstmState:
    hidden: np.ndarray
    cell: np.ndarray


def zero_state(hidden_size: int) -> LstmState:
    return LstmState(np.zeros(hidden_size), np.zeros(hidden_size))


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def lstm_step(weights: LstmWeights, x: np.ndarray, state: LstmState):
    """One cell update; returns (hidden output, new state)."""
    H = weights.hidden_size
    if x.shape != (weights.input_size,):
        raise ContractError(
            f"lstm input shape {x.shape} != ({weights.input_size},)"
        )
    if state.hidden.shape != (H,) or state.cell.shape != (H,):
        raise ContractError("lstm state does not match hidden size")
    z = weights.w_x @ x + weights.w_h @ state.hidden + weights.b
    i = _sigmoid(z[:H])
    f = _sigmoid(z[H : 2 * H])
    g = np.tanh(z[2 * H : 3 * H])
    o = _sigmoid(z[3 * H :])
    c = f * state.cell + i * g
    h = o * np.tanh(c)
    return h, LstmState(h, c)


def lstm_forward(weights: LstmWeights, inputs: np.ndarray, init: LstmState | None = None):
    """Run the cell over a (T, D) sequence; returns (hs (T, H), cache)."""
    T = inputs.shape[0]
    H = weights.hidden_size
    state = init if init is not None else zero_state(H)
    cache = {
        "inputs": inputs,
        "h_prev": np.empty((T, H)),
        "c_prev": np.empty((T, H)),
        "i": np.empty((T, H)),
        "f": np.empty((T, H)),
        "g": np.empty((T, H)),
        "o": np.empty((T, H)),
        "c": np.empty((T, H)),
    }
    hs = np.empty((T, H))
    for t in range(T):
        cache["h_prev"][t] = state.hidden
        cache["c_prev"][t] = state.cell
        z = weights.w_x @ inputs[t] + weights.w_h @ state.hidden + weights.b
        i = _sigmoid(z[:H])
        f = _sigmoid(z[H : 2 * H])
        g = np.tanh(z[2 * H : 3 * H])
        o = _sigmoid(z[3 * H :])
        c = f * state.cell + i * g
        h = o * np.tanh(c)
        cache["i"][t], cache["f"][t], cache["g"][t], cache["o"][t] = i, f, g, o
        cache["c"][t] = c
        hs[t] = h
        state = LstmState(h, c)
    return hs, cache


@dataclass
class LstmGrads:
    w_x: np.ndarray
    w_h: np.ndarray
    b: np.ndarray


def lstm_backward(weights: LstmWeights, cache: dict, d_hs: np.ndarray):
    """BPTT given per-step output gradients d_hs (T, H).

    Returns (d_inputs (T, D), LstmGrads).
    """
    inputs = cache["inputs"]
    T, H = d_hs.shape
    g_wx = np.zeros_like(weights.w_x)
    g_wh = np.zeros_like(weights.w_h)
    g_b = np.zeros_like(weights.b)
    d_inputs = np.empty_like(inputs)
    dh_carry = np.zeros(H)
    dc_carry = np.zeros(H)
    dz = np.empty(4 * H)
    for t in range(T - 1, -1, -1):
        i, f, g, o = cache["i"][t], cache["f"][t], cache["g"][t], cache["o"][t]
        c, c_prev = cache["c"][t], cache["c_prev"][t]
        tanh_c = np.tanh(c)
        dh = d_hs[t] + dh_carry
        dc = dc_carry + dh * o * (1.0 - tanh_c * tanh_c)
        dz[:H] = dc * g * i * (1.0 - i)
        dz[H : 2 * H] = dc * c_prev * f * (1.0 - f)
        dz[2 * H : 3 * H] = dc * i * (1.0 - g * g)
        dz[3 * H :] = dh * tanh_c * o * (1.0 - o)
        g_wx += np.outer(dz, inputs[t])
        g_wh += np.outer(dz, cache["h_prev"][t])
        g_b += dz
        d_inputs[t] = weights.w_x.T @ dz
        dh_carry = weights.w_h.T @ dz
        dc_carry = dc * f
    return d_inputs, LstmGrads(g_wx, g_wh, g_b)


def init_lstm(input_size: int, hidden_size: int, rng: np.random.Generator) -> LstmWeights:
    """Uniform +-1/sqrt(fan_in) weights; forget-gate bias starts at 1."""
    lim_x = 1.0 / np.sqrt(input_size)
    lim_h = 1.0 / np.sqrt(hidden_size)
    w_x = rng.uniform(-lim_x, lim_x, (4 * hidden_size, input_size))
    w_h = rng.uniform(-lim_h, lim_h, (4 * hidden_size, hidden_size))
    b = np.zeros(4 * hidden_size)
    b[hidden_size : 2 * hidden_size] = 1.0
    return LstmWeights(w_x, w_h, b)


# ---------------------------------------------------------------------------
# model parameters


@dataclass
class BiLstmLayer:
    fwd: LstmWeights
    bwd: LstmWeights


@dataclass
class ModelParams:
    vocab: Vocabulary
    feature_dim: int
    transcription: list[BiLstmLayer]
    embedding: np.ndarray  # (V+2, E); row 0 unused, row V+1 is the bos marker
    prediction: LstmWeights
    w_enc: np.ndarray  # (J, 2*trans_hidden)
    w_pred: np.ndarray  # (J, pred_hidden)
    b_joint: np.ndarray  # (J,)
    w_out: np.ndarray  # (V+1, J)

    def named_arrays(self) -> list[tuple[str, np.ndarray]]:
        out: list[tuple[str, np.ndarray]] = []
        for idx, layer in enumerate(self.transcription):
            for direction, w in (("fwd", layer.fwd), ("bwd", layer.bwd)):
                prefix = f"transcription.{idx}.{direction}"
                out.append((f"{prefix}.w_x", w.w_x))
                out.append((f"{prefix}.w_h", w.w_h))
                out.append((f"{prefix}.b", w.b))
        out.append(("prediction.embedding", self.embedding))
        out.append(("prediction.lstm.w_x", self.prediction.w_x))
        out.append(("prediction.lstm.w_h", self.prediction.w_h))
        out.append(("prediction.lstm.b", self.prediction.b))
        out.append(("joint.w_enc", self.w_enc))
        out.append(("joint.w_pred", self.w_pred))
        out.append(("joint.b", self.b_joint))
        out.append(("joint.w_out", self.w_out))
        return out

    def param_dict(self) -> ParamDict:
        return dict(self.named_arrays())

    def num_params(self) -> int:
        return sum(int(a.size) for _, a in self.named_arrays())


def init_model(
    vocab: Vocabulary,
    feature_dim: int,
    trans_layers: int = 2,
    trans_hidden: int = 32,
    pred_hidden: int = 32,
    embed_dim: int | None = None,
    joint_dim: int = 32,
    rng: np.random.Generator | None = None,
) -> ModelParams:
    if rng is None:
        raise DomainError("init_model needs an explicit rng for reproducibility")
    if embed_dim is None:
        embed_dim = pred_hidden
    V = vocab.size
    layers = []
    in_dim = feature_dim
    for _ in range(trans_layers):
        layers.append(
            BiLstmLayer(
                fwd=init_lstm(in_dim, trans_hidden, rng),
                bwd=init_lstm(in_dim, trans_hidden, rng),
            )
        )
        in_dim = 2 * trans_hidden
    lim_e = 1.0 / np.sqrt(embed_dim)
    embedding = rng.uniform(-lim_e, lim_e, (V + 2, embed_dim))
    prediction = init_lstm(embed_dim, pred_hidden, rng)
    enc_dim = 2 * trans_hidden
    w_enc = rng.uniform(-1 / np.sqrt(enc_dim), 1 / np.sqrt(enc_dim), (joint_dim, enc_dim))
    w_pred = rng.uniform(
        -1 / np.sqrt(pred_hidden), 1 / np.sqrt(pred_hidden), (joint_dim, pred_hidden)
    )
    b_joint = np.zeros(joint_dim)
    w_out = rng.uniform(-1 / np.sqrt(joint_dim), 1 / np.sqrt(joint_dim), (V + 1, joint_dim))
    return ModelParams(
        vocab=vocab,
        feature_dim=feature_dim,
        transcription=layers,
        embedding=embedding,
        prediction=prediction,
        w_enc=w_enc,
        w_pred=w_pred,
        b_joint=b_joint,
        w_out=w_out,
    )


# ---------------------------------------------------------------------------
# transcription network


def transcription_forward(params: ModelParams, frames: np.ndarray):
    """Per-frame embeddings over the whole utterance; returns (F (T, 2H), cache)."""
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 2 or frames.shape[0] < 1:
        raise ContractError("frames must be a (T>=1, d) array")
    if frames.shape[1] != params.feature_dim:
        raise ContractError(
            f"feature dim {frames.shape[1]} != model's {params.feature_dim}"
        )
    x = frames
    layer_caches = []
    for layer in params.transcription:
        fwd_hs, fwd_cache = lstm_forward(layer.fwd, x)
        bwd_hs_rev, bwd_cache = lstm_forward(layer.bwd, x[::-1])
        x = np.concatenate([fwd_hs, bwd_hs_rev[::-1]], axis=1)
        layer_caches.append((fwd_cache, bwd_cache))
    return x, layer_caches


def transcription_backward(params: ModelParams, layer_caches, d_out: np.ndarray):
    """Backprop through the stack; returns grads keyed by canonical names."""
    grads: ParamDict = {}
    d = d_out
    for idx in range(len(params.transcription) - 1, -1, -1):
        layer = params.transcription[idx]
        fwd_cache, bwd_cache = layer_caches[idx]
        H = layer.fwd.hidden_size
        d_fwd = d[:, :H]
        d_bwd_rev = d[:, H:][::-1]
        d_in_f, g_f = lstm_backward(layer.fwd, fwd_cache, np.ascontiguousarray(d_fwd))
        d_in_b, g_b = lstm_backward(layer.bwd, bwd_cache, np.ascontiguousarray(d_bwd_rev))
        prefix = f"transcription.{idx}"
        grads[f"{prefix}.fwd.w_x"] = g_f.w_x
        grads[f"{prefix}.fwd.w_h"] = g_f.w_h
        grads[f"{prefix}.fwd.b"] = g_f.b
        grads[f"{prefix}.bwd.w_x"] = g_b.w_x
        grads[f"{prefix}.bwd.w_h"] = g_b.w_h
        grads[f"{prefix}.bwd.b"] = g_b.b
        d = d_in_f + d_in_b[::-1]
    return grads, d


# ---------------------------------------------------------------------------
# prediction network


def prediction_forward(params: ModelParams, tokens):
    """History embeddings g_0..g_U for a label sequence.

    g_0 encodes the empty history (the learned bos marker run through the
    LSTM from a zero state); g_u encodes tokens[0..u-1] plus that marker.
    Returns (G (U+1, H), cache).
    """
    params.vocab.check_tokens(tokens)
    ids = np.array([params.vocab.bos_id] + list(tokens), dtype=np.int64)
    inputs = params.embedding[ids]
    hs, cache = lstm_forward(params.prediction, inputs)
    return hs, {"ids": ids, "lstm": cache}


def prediction_backward(params: ModelParams, cache, d_G: np.ndarray):
    d_inputs, lstm_grads = lstm_backward(params.prediction, cache["lstm"], d_G)
    d_emb = np.zeros_like(params.embedding)
    np.add.at(d_emb, cache["ids"], d_inputs)
    return {
        "prediction.embedding": d_emb,
        "prediction.lstm.w_x": lstm_grads.w_x,
        "prediction.lstm.w_h": lstm_grads.w_h,
        "prediction.lstm.b": lstm_grads.b,
    }


def prediction_initial(params: ModelParams):
    """State and embedding after consuming only the bos marker (g_0)."""
    h, state = lstm_step(params.prediction, params.embedding[params.vocab.bos_id], zero_state(params.prediction.hidden_size))
    return h, state


def prediction_step(params: ModelParams, state: LstmState, token: int):
    """Advance the history encoding by one token; returns (g, new state)."""
    if not (1 <= token <= params.vocab.size):
        raise ContractError(f"token id {token} outside 1..{params.vocab.size}")
    return lstm_step(params.prediction, params.embedding[token], state)


# ---------------------------------------------------------------------------
# joint head


def log_softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = logits - logits.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def joint_distribution(params: ModelParams, f_t: np.ndarray, g_u: np.ndarray) -> np.ndarray:
    """Log-probabilities over the V+1 outputs at a single lattice node."""
    a = (params.w_enc @ f_t) * (params.w_pred @ g_u) + params.b_joint
    return log_softmax(params.w_out @ np.tanh(a))


def joint_forward(params: ModelParams, F: np.ndarray, G: np.ndarray):
    """Log-probability grid over all (t, u) nodes; returns (grid, cache)."""
    E = F @ params.w_enc.T  # (T, J)
    P = G @ params.w_pred.T  # (U+1, J)
    TH = np.tanh(E[:, None, :] * P[None, :, :] + params.b_joint)
    logits = TH @ params.w_out.T  # (T, U+1, V+1)
    return log_softmax(logits), {"F": F, "G": G, "E": E, "P": P, "TH": TH}


def joint_backward(params: ModelParams, cache, d_logits: np.ndarray):
    """Gradients of the joint head given d(loss)/d(logits) over the grid."""
    TH, E, P = cache["TH"], cache["E"], cache["P"]
    d_th = d_logits @ params.w_out  # (T, U+1, J)
    g_w_out = np.einsum("tuv,tuj->vj", d_logits, TH)
    d_a = d_th * (1.0 - TH * TH)
    g_b = d_a.sum(axis=(0, 1))
    d_E = (d_a * P[None, :, :]).sum(axis=1)  # (T, J)
    d_P = (d_a * E[:, None, :]).sum(axis=0)  # (U+1, J)
    grads = {
        "joint.w_enc": d_E.T @ cache["F"],
        "joint.w_pred": d_P.T @ cache["G"],
        "joint.b": g_b,
        "joint.w_out": g_w_out,
    }
    d_F = d_E @ params.w_enc
    d_G = d_P @ params.w_pred
    return grads, d_F, d_G


# ---------------------------------------------------------------------------
# full model


@dataclass
class ModelCache:
    trans_cache: list = field(repr=False, default=None)
    pred_cache: dict = field(repr=False, default=None)
    joint_cache: dict = field(repr=False, default=None)


def model_forward(params: ModelParams, frames: np.ndarray, pred_tokens):
    """Joint log-probability grid for an utterance; prediction-network input
    may differ from the emission targets (they are not consulted here)."""
    F, trans_cache = transcription_forward(params, frames)
    G, pred_cache = prediction_forward(params, pred_tokens)
    grid, joint_cache = joint_forward(params, F, G)
    return grid, ModelCache(trans_cache, pred_cache, joint_cache)


def model_backward(params: ModelParams, cache: ModelCache, d_logits: np.ndarray) -> ParamDict:
    """Exact reverse-mode gradients for every parameter array.

    d_logits is d(loss)/d(pre-softmax logits), shape (T, U+1, V+1).
    """
    if cache is None or cache.joint_cache is None:
        raise ContractError("model_backward needs the cache from model_forward")
    expected = cache.joint_cache["TH"].shape[:2] + (params.vocab.size + 1,)
    if d_logits.shape != expected:
        raise ContractError(
            f"d_logits shape {d_logits.shape} != grid shape {expected}"
        )
    grads, d_F, d_G = joint_backward(params, cache.joint_cache, d_logits)
    grads.update(prediction_backward(params, cache.pred_cache, d_G))
    trans_grads, _ = transcription_backward(params, cache.trans_cache, d_F)
    grads.update(trans_grads)
    return grads


def zero_grads(params: ModelParams) -> ParamDict:
    return {name: np.zeros_like(a) for name, a in params.named_arrays()}


def accumulate_grads(total: ParamDict, part: ParamDict, scale: float = 1.0) -> None:
    for name, g in part.items():
        total[name] += scale * g
