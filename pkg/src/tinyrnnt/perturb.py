"""Label-preserving perturbation of the prediction-network input sequence.

Two strategies produce a corrupted copy of the label sequence with the same
length; the training loss is always computed against the untouched targets:

* random token replacement ("switchout"): draw how many tokens to corrupt
  from a temperature-controlled distribution, then flip positions at that
  per-sequence rate, replacing each flipped token with a uniformly chosen
  different real token
* scheduled sampling from a token LM: walk left to right, keeping each ground
  truth token with the teacher-forcing probability and otherwise substituting
  a uniform draw from the LM's top-k next-token candidates given the already
  perturbed history

An optional anneal epoch lifts the perturbation late in training.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DomainError
from .networks import Vocabulary

KINDS = ("none", "switchout", "scheduled_sampling")


@dataclass
class PerturbPolicy:
    kind: str = "none"
    tau: float = 0.1
    teacher_p: float = 0.9
    top_k: int = 3
    anneal_epoch: int | None = None
    post_anneal_lr: float | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise DomainError(f"unknown perturbation kind {self.kind!r}")
        if self.kind == "switchout" and not self.tau > 0:
            raise DomainError("switchout temperature must be positive")
        if self.kind == "scheduled_sampling":
            if not (0.0 <= self.teacher_p <= 1.0):
                raise DomainError("teacher forcing probability must lie in [0, 1]")
            if self.top_k < 1:
                raise DomainError("top_k must be at least 1")


@dataclass
class PerturbRecord:
    """One perturbation event.

    ``corrupted_positions`` are the indices where the output differs from the
    input.  ``sampled_count`` is the drawn corruption count for switchout and
    the number of LM-sampled positions for scheduled sampling (a sampled
    token may coincide with the ground truth, so it can exceed the number of
    corrupted positions).
    """

    original: list[int]
    perturbed: list[int]
    corrupted_positions: list[int]
    sampled_count: int


def corruption_count_pmf(U: int, tau: float) -> np.ndarray:
    """p(n) proportional to exp(-n/tau) for n = 0..U."""
    if U < 0:
        raise DomainError("sequence length must be nonnegative")
    if not tau > 0:
        raise DomainError("temperature must be positive")
    weights = np.exp(-np.arange(U + 1, dtype=np.float64) / tau)
    return weights / weights.sum()


def sample_corruption_count(U: int, tau: float, rng: np.random.Generator) -> int:
    """Draw how many tokens to corrupt, in 0..U."""
    pmf = corruption_count_pmf(U, tau)
    # a draw can land above cumsum[-1] when rounding leaves it just under 1
    idx = int(np.searchsorted(np.cumsum(pmf), rng.random(), side="right"))
    return min(idx, U)


def switchout(tokens, tau: float, vocab: Vocabulary, rng: np.random.Generator) -> PerturbRecord:
    """Corrupt a temperature-controlled number of tokens by uniform replacement.

    Each position flips independently at the per-sequence rate n_hat/U; a
    flipped token is replaced by a uniform draw over the other real tokens
    (never the null symbol, never itself).  With a single-token vocabulary
    there is no valid replacement and the position is left unchanged.
    """
    original = list(tokens)
    U = len(original)
    if U < 1:
        raise DomainError("switchout needs a non-empty token sequence")
    vocab.check_tokens(original)
    n_hat = sample_corruption_count(U, tau, rng)
    rate = n_hat / U
    flips = rng.random(U) < rate
    perturbed = list(original)
    corrupted = []
    V = vocab.size
    for u in range(U):
        if not flips[u]:
            continue
        if V < 2:
            continue  # no replacement candidate exists
        draw = int(rng.integers(1, V))  # uniform over V-1 candidates
        if draw >= original[u]:
            draw += 1
        perturbed[u] = draw
        corrupted.append(u)
    return PerturbRecord(original, perturbed, corrupted, n_hat)


def scheduled_sample(tokens, policy: PerturbPolicy, lm, rng: np.random.Generator) -> PerturbRecord:
    """Teacher-forced/LM-sampled walk over the sequence.

    The LM state advances over the perturbed sequence, not the ground truth,
    so substitutions condition later samples.
    """
    from . import tokenlm  # deferred: tokenlm depends on networks only

    if policy.kind != "scheduled_sampling":
        raise ContractError("policy kind is not scheduled_sampling")
    original = list(tokens)
    lm.vocab.check_tokens(original)
    if policy.top_k > lm.vocab.size:
        raise DomainError("top_k exceeds vocabulary size")
    state = tokenlm.lm_initial_state(lm)
    perturbed = []
    corrupted = []
    sampled = 0
    for u, truth in enumerate(original):
        if rng.random() < policy.teacher_p:
            chosen = truth
        else:
            sampled += 1
            candidates = tokenlm.lm_topk(lm, state, policy.top_k)
            chosen = int(candidates[int(rng.integers(policy.top_k))])
            if chosen != truth:
                corrupted.append(u)
        perturbed.append(chosen)
        state = tokenlm.lm_advance(lm, state, chosen)
    return PerturbRecord(original, perturbed, corrupted, sampled)


def apply_policy(
    tokens,
    policy: PerturbPolicy,
    epoch: int,
    vocab: Vocabulary | None = None,
    lm=None,
    rng: np.random.Generator | None = None,
):
    """Dispatch to the configured perturbation; always length-preserving.

    Past the anneal epoch (when set) this is the identity regardless of kind.
    """
    return perturb_record(tokens, policy, epoch, vocab=vocab, lm=lm, rng=rng).perturbed


def perturb_record(
    tokens,
    policy: PerturbPolicy,
    epoch: int,
    vocab: Vocabulary | None = None,
    lm=None,
    rng: np.random.Generator | None = None,
) -> PerturbRecord:
    """Like apply_policy but returns the full record (for dumps and tests)."""
    if epoch < 1:
        raise DomainError("epoch indices start at 1")
    tokens = list(tokens)
    identity = PerturbRecord(tokens, list(tokens), [], 0)
    if policy.kind == "none" or not tokens:
        return identity
    if policy.anneal_epoch is not None and epoch > policy.anneal_epoch:
        return identity
    if rng is None:
        raise ContractError("perturbation needs an explicit rng stream")
    if policy.kind == "switchout":
        if vocab is None:
            raise ContractError("switchout needs the vocabulary")
        return switchout(tokens, policy.tau, vocab, rng)
    if lm is None:
        raise ContractError("scheduled sampling needs a trained token LM")
    return scheduled_sample(tokens, policy, lm, rng)
