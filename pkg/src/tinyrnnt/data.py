"""Synthetic transduction task: a token sequence is rendered as a run of
noisy prototype frames per token.

Each vocabulary token owns a fixed prototype vector (one-hot when the feature
dimension equals the vocabulary size, otherwise seeded unit-norm random
directions).  An utterance draws tokens from the configured prior, emits a
random number of frames per token, and adds per-split Gaussian noise.  The
test split uses a larger noise level than training, which forces recognition
errors and makes robustness to errorful label histories observable.

Datasets are JSON-lines files, one utterance per line:
    {"id": "...", "frames": [[...], ...], "tokens": [...]}
A meta.json with the generating parameters sits next to the splits.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass

import numpy as np

from .errors import ContractError, DomainError
from .networks import Vocabulary, default_vocabulary
from .numerics import derived_rng

TOKEN_PRIORS = ("uniform", "chain")
CHAIN_SUCCESSOR_WEIGHT = 0.6  # default mass on the favored successor token


@dataclass
class SyntheticTaskSpec:
    vocab_size: int = 8
    feature_dim: int = 16
    # a 1..2 frame/token rate keeps null and token transitions balanced on
    # the lattice; heavier frame rates push early training into the
    # all-null collapse at this scale
    frames_per_token: tuple = (1, 2)
    noise_sigma_train: float = 0.1
    noise_sigma_test: float = 0.3
    utterance_count: int = 200  # training split; dev/test are a quarter each
    token_length: tuple = (3, 8)
    seed: int = 0
    token_prior: str = "chain"
    chain_weight: float = CHAIN_SUCCESSOR_WEIGHT

    def __post_init__(self):
        self.frames_per_token = tuple(self.frames_per_token)
        self.token_length = tuple(self.token_length)
        if self.vocab_size < 2:
            raise DomainError("vocab_size must be at least 2")
        if self.frames_per_token[0] < 1 or self.frames_per_token[0] > self.frames_per_token[1]:
            raise DomainError("frames_per_token range is empty")
        if self.token_length[0] < 1 or self.token_length[0] > self.token_length[1]:
            raise DomainError("token_length range is empty")
        if self.noise_sigma_train < 0 or self.noise_sigma_test < 0:
            raise DomainError("noise sigmas must be nonnegative")
        if self.token_prior not in TOKEN_PRIORS:
            raise DomainError(f"unknown token prior {self.token_prior!r}")
        if not (0.0 < self.chain_weight < 1.0):
            raise DomainError("chain_weight must lie in (0, 1)")

    def vocabulary(self) -> Vocabulary:
        return default_vocabulary(self.vocab_size)


@dataclass
class Utterance:
    utterance_id: str
    frames: np.ndarray
    tokens: list


def token_prototypes(spec: SyntheticTaskSpec) -> np.ndarray:
    """(V, d) prototype matrix; one-hot rows when d == V."""
    V, d = spec.vocab_size, spec.feature_dim
    if d == V:
        return np.eye(V)
    rng = derived_rng(spec.seed, "prototypes")
    protos = rng.normal(size=(V, d))
    return protos / np.linalg.norm(protos, axis=1, keepdims=True)


def chain_transitions(V: int, weight: float = CHAIN_SUCCESSOR_WEIGHT) -> np.ndarray:
    """First-order prior: token i favors successor (i mod V) + 1."""
    P = np.full((V, V), (1.0 - weight) / (V - 1))
    for i in range(V):  # row i is token i+1; favored successor is (i+1) % V + 1
        P[i, (i + 1) % V] = weight
    return P


def sample_tokens(spec: SyntheticTaskSpec, rng: np.random.Generator) -> list:
    lo, hi = spec.token_length
    length = int(rng.integers(lo, hi + 1))
    if spec.token_prior == "uniform":
        return [int(t) for t in rng.integers(1, spec.vocab_size + 1, size=length)]
    P = chain_transitions(spec.vocab_size, spec.chain_weight)
    tokens = [int(rng.integers(1, spec.vocab_size + 1))]
    for _ in range(length - 1):
        prev = tokens[-1]
        nxt = int(rng.choice(spec.vocab_size, p=P[prev - 1])) + 1
        tokens.append(nxt)
    return tokens


def render_utterance(
    spec: SyntheticTaskSpec,
    tokens,
    sigma: float,
    utterance_id: str,
    rng: np.random.Generator,
    prototypes: np.ndarray | None = None,
) -> Utterance:
    if prototypes is None:
        prototypes = token_prototypes(spec)
    lo, hi = spec.frames_per_token
    frames = []
    for tok in tokens:
        count = int(rng.integers(lo, hi + 1))
        base = prototypes[tok - 1]
        for _ in range(count):
            frames.append(base + sigma * rng.normal(size=spec.feature_dim))
    return Utterance(utterance_id, np.array(frames), list(tokens))


def _split_plan(spec: SyntheticTaskSpec):
    side = max(spec.utterance_count // 4, 8)
    return [
        ("train", spec.utterance_count, spec.noise_sigma_train),
        ("dev", side, spec.noise_sigma_train),
        ("test", side, spec.noise_sigma_test),
    ]


def generate_dataset(spec: SyntheticTaskSpec, out_dir, lm_corpus_size: int = 0) -> dict:
    """Write train/dev/test splits (and optionally a larger token-only corpus
    drawn from the same prior for the external LM); returns split paths.

    Deterministic given the spec: the same spec and seed produce
    byte-identical files.  Utterance ids are disjoint across splits.
    """
    os.makedirs(out_dir, exist_ok=True)
    prototypes = token_prototypes(spec)
    paths = {}
    for split, count, sigma in _split_plan(spec):
        rng = derived_rng(spec.seed, "split", split)
        path = os.path.join(out_dir, f"{split}.jsonl")
        with open(path, "w") as fh:
            for i in range(count):
                utt_id = f"{split}-{i:05d}"
                tokens = sample_tokens(spec, rng)
                utt = render_utterance(spec, tokens, sigma, utt_id, rng, prototypes)
                fh.write(
                    json.dumps(
                        {
                            "id": utt.utterance_id,
                            "frames": utt.frames.tolist(),
                            "tokens": utt.tokens,
                        }
                    )
                )
                fh.write("\n")
        paths[split] = path
    if lm_corpus_size > 0:
        rng = derived_rng(spec.seed, "split", "lm_corpus")
        path = os.path.join(out_dir, "lm_corpus.jsonl")
        with open(path, "w") as fh:
            for i in range(lm_corpus_size):
                tokens = sample_tokens(spec, rng)
                fh.write(json.dumps({"id": f"lm-{i:05d}", "tokens": tokens}))
                fh.write("\n")
        paths["lm_corpus"] = path
    meta = asdict(spec)
    meta["format_version"] = 1
    meta["vocab_symbols"] = spec.vocabulary().symbols
    with open(os.path.join(out_dir, "meta.json"), "w") as fh:
        json.dump(meta, fh, indent=1)
    paths["meta"] = os.path.join(out_dir, "meta.json")
    return paths


def load_meta(dataset_dir) -> dict:
    with open(os.path.join(dataset_dir, "meta.json")) as fh:
        return json.load(fh)


def load_utterances(path) -> list:
    """Read a JSONL split; frames are optional (token-only LM corpora)."""
    utterances = []
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            row = json.loads(line)
            frames = np.array(row["frames"]) if "frames" in row and row["frames"] else np.zeros((0, 0))
            utt = Utterance(row["id"], frames, [int(t) for t in row["tokens"]])
            if utt.frames.size and not np.isfinite(utt.frames).all():
                raise ContractError(f"non-finite frames in utterance {utt.utterance_id}")
            utterances.append(utt)
    return utterances


def load_corpus_tokens(path) -> list:
    return [utt.tokens for utt in load_utterances(path)]
