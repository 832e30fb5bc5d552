"""Transducer objective on the (t, u) lattice.

A lattice node (t, u) holds a log-distribution over the V+1 outputs given
frame t and label history u.  Paths start at (1, 0); emitting the null symbol
advances t, emitting the next target token advances u, and every complete
path ends with a mandatory null at (T, U), for a total length of T + U
symbols.  Arrays are 0-indexed, so node (t, u) lives at [t-1, u].

The log-likelihood of the target sequence marginalizes all such paths: either
by the forward/backward recursions here, or by the brute-force alignment
enumeration that serves as the independent oracle on small instances.

The prediction-network input sequence may differ from the emission targets
(label-preserving perturbation): embeddings come from ``pred_inputs`` while
transition selection and the loss use ``targets``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np

from . import networks
from .errors import ContractError, DomainError, RefusalError
from .networks import NULL_ID, ModelParams

ENUMERATION_LIMIT = 12  # max T + U accepted by the brute-force oracle


@dataclass
class Lattice:
    log_probs: np.ndarray  # (T, U+1, V+1)
    targets: list[int]
    pred_inputs: list[int]
    alpha: np.ndarray | None = None
    beta: np.ndarray | None = None

    def __post_init__(self):
        self.targets = list(self.targets)
        self.pred_inputs = list(self.pred_inputs)
        if len(self.targets) != len(self.pred_inputs):
            raise ContractError(
                "targets and prediction inputs must have equal length "
                f"({len(self.targets)} != {len(self.pred_inputs)}); "
                "perturbations are length-preserving by construction"
            )
        T, U_plus_1, _ = self.log_probs.shape
        if T < 1 or U_plus_1 != len(self.targets) + 1:
            raise ContractError(
                f"log_probs shape {self.log_probs.shape} inconsistent with "
                f"{len(self.targets)} targets"
            )

    @property
    def T(self) -> int:
        return self.log_probs.shape[0]

    @property
    def U(self) -> int:
        return len(self.targets)


def build_lattice(params: ModelParams, frames, targets, pred_inputs=None):
    """Evaluate the joint grid for an utterance; returns (Lattice, cache).

    ``pred_inputs`` feeds the prediction network; ``targets`` (the ground
    truth) is stored for transition selection only.  Defaults to the
    teacher-forced case pred_inputs = targets.
    """
    if pred_inputs is None:
        pred_inputs = list(targets)
    params.vocab.check_tokens(targets)
    grid, cache = networks.model_forward(params, frames, pred_inputs)
    return Lattice(grid, list(targets), list(pred_inputs)), cache


def forward_variables(lattice: Lattice) -> np.ndarray:
    """Fill alpha: log-probability of reaching each node from (1, 0)."""
    T, U = lattice.T, lattice.U
    lp = lattice.log_probs
    y = lattice.targets
    alpha = np.full((T, U + 1), -np.inf)
    alpha[0, 0] = 0.0
    for t in range(1, T):
        alpha[t, 0] = alpha[t - 1, 0] + lp[t - 1, 0, NULL_ID]
    for u in range(1, U + 1):
        alpha[0, u] = alpha[0, u - 1] + lp[0, u - 1, y[u - 1]]
    for t in range(1, T):
        for u in range(1, U + 1):
            alpha[t, u] = np.logaddexp(
                alpha[t - 1, u] + lp[t - 1, u, NULL_ID],
                alpha[t, u - 1] + lp[t, u - 1, y[u - 1]],
            )
    lattice.alpha = alpha
    return alpha


def backward_variables(lattice: Lattice) -> np.ndarray:
    """Fill beta: log-probability of completing a path from each node."""
    T, U = lattice.T, lattice.U
    lp = lattice.log_probs
    y = lattice.targets
    beta = np.full((T, U + 1), -np.inf)
    beta[T - 1, U] = lp[T - 1, U, NULL_ID]
    for t in range(T - 2, -1, -1):
        beta[t, U] = beta[t + 1, U] + lp[t, U, NULL_ID]
    for u in range(U - 1, -1, -1):
        beta[T - 1, u] = beta[T - 1, u + 1] + lp[T - 1, u, y[u]]
    for t in range(T - 2, -1, -1):
        for u in range(U - 1, -1, -1):
            beta[t, u] = np.logaddexp(
                beta[t + 1, u] + lp[t, u, NULL_ID],
                beta[t, u + 1] + lp[t, u, y[u]],
            )
    lattice.beta = beta
    return beta


def _require_variables(lattice: Lattice) -> None:
    if lattice.alpha is None:
        forward_variables(lattice)
    if lattice.beta is None:
        backward_variables(lattice)


def antidiagonal_sums(lattice: Lattice) -> np.ndarray:
    """logsumexp of alpha+beta along each anti-diagonal t + u = n, n = 1..T+U.

    Every entry equals the total log-likelihood; exposed for invariant tests.
    """
    _require_variables(lattice)
    T, U = lattice.T, lattice.U
    combined = lattice.alpha + lattice.beta
    sums = np.empty(T + U)
    for n in range(1, T + U + 1):
        terms = [
            combined[t - 1, n - t]
            for t in range(max(1, n - U), min(T, n) + 1)
        ]
        m = max(terms)
        if m == -np.inf:
            sums[n - 1] = -np.inf
        else:
            sums[n - 1] = m + math.log(sum(math.exp(v - m) for v in terms))
    return sums


def rnnt_log_likelihood(lattice: Lattice) -> float:
    """Total log-probability of the targets, from the n = 1 anti-diagonal
    (alpha(1,0) = 0, so this is just beta at the origin)."""
    _require_variables(lattice)
    return float(lattice.alpha[0, 0] + lattice.beta[0, 0])


def lattice_grad(lattice: Lattice) -> np.ndarray:
    """d(log-likelihood)/d(pre-softmax logits) at every node.

    Uses the occupancy form: at node (t, u) the gradient is
    gamma_k - p_k * occupancy, where gamma is the posterior probability of
    actually taking transition k there (nonzero only for the null symbol and
    the next target token) and occupancy = exp(alpha + beta - loglik).
    """
    _require_variables(lattice)
    T, U = lattice.T, lattice.U
    lp = lattice.log_probs
    y = lattice.targets
    alpha, beta = lattice.alpha, lattice.beta
    total = alpha[0, 0] + beta[0, 0]
    if total == -np.inf:
        raise DomainError("targets have zero probability; gradient undefined")
    gamma = np.zeros_like(lp)
    if T > 1:
        gamma[:-1, :, NULL_ID] = np.exp(
            alpha[:-1, :] + lp[:-1, :, NULL_ID] + beta[1:, :] - total
        )
    gamma[T - 1, U, NULL_ID] = np.exp(alpha[T - 1, U] + lp[T - 1, U, NULL_ID] - total)
    for u in range(U):
        gamma[:, u, y[u]] += np.exp(alpha[:, u] + lp[:, u, y[u]] + beta[:, u + 1] - total)
    occupancy = np.exp(alpha + beta - total)
    return gamma - np.exp(lp) * occupancy[:, :, None]


# ---------------------------------------------------------------------------
# brute-force oracle


@dataclass
class Alignment:
    """A path: T nulls and the U target tokens in order, ending in null."""

    symbols: list[int] = field(default_factory=list)


def enumerate_alignments(lattice: Lattice):
    """Yield every alignment of the targets; C(T+U-1, U) of them."""
    T, U = lattice.T, lattice.U
    y = lattice.targets
    # the last symbol is always the terminal null; tokens occupy U of the
    # first T + U - 1 slots
    for token_slots in combinations(range(T + U - 1), U):
        slots = set(token_slots)
        symbols = []
        u = 0
        for pos in range(T + U - 1):
            if pos in slots:
                symbols.append(y[u])
                u += 1
            else:
                symbols.append(NULL_ID)
        symbols.append(NULL_ID)
        yield Alignment(symbols)


def alignment_log_prob(lattice: Lattice, alignment: Alignment) -> float:
    lp = lattice.log_probs
    t, u = 0, 0
    total = 0.0
    for sym in alignment.symbols:
        if sym == NULL_ID:
            total += lp[t, u, NULL_ID]
            t += 1
        else:
            total += lp[t, u, sym]
            u += 1
    return total


def brute_force_log_likelihood(lattice: Lattice) -> float:
    """Sum path probabilities over all enumerated alignments, in log space.

    Refuses instances with T + U above the enumeration guard.
    """
    T, U = lattice.T, lattice.U
    if T + U > ENUMERATION_LIMIT:
        raise RefusalError(
            f"enumeration guard: T + U = {T + U} exceeds {ENUMERATION_LIMIT}"
        )
    scores = [alignment_log_prob(lattice, a) for a in enumerate_alignments(lattice)]
    m = max(scores)
    if m == -np.inf:
        return -np.inf
    return float(m + math.log(sum(math.exp(s - m) for s in scores)))


# ---------------------------------------------------------------------------
# debug dump


def _jsonable(array: np.ndarray):
    def conv(x):
        if isinstance(x, list):
            return [conv(v) for v in x]
        return x if math.isfinite(x) else "-inf"

    return conv(array.tolist())


def dump_lattice(lattice: Lattice, path) -> None:
    """Write log_probs, alpha, beta, and the anti-diagonal sums as JSON.

    Non-finite values are serialized as the string "-inf" to keep the file
    standard JSON.
    """
    _require_variables(lattice)
    payload = {
        "targets": lattice.targets,
        "pred_inputs": lattice.pred_inputs,
        "log_probs": _jsonable(lattice.log_probs),
        "alpha": _jsonable(lattice.alpha),
        "beta": _jsonable(lattice.beta),
        "antidiagonal_sums": _jsonable(antidiagonal_sums(lattice)),
        "log_likelihood": rnnt_log_likelihood(lattice),
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=1)
