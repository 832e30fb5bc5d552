"""Numeric substrate: stable log-space reductions, the decoupled-weight-decay
optimizer, the warmup/hold/decay learning-rate schedule, seeded random
streams, and the finite-difference gradient oracle.

Everything runs in 64-bit floats.  Randomness comes from numpy's Philox
counter-based bit generator, which is splittable by key: independent streams
are derived by hashing a tuple of tags (e.g. seed, epoch, utterance id) into
a 128-bit Philox key, so draws are reproducible regardless of the order in
which streams are consumed.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, ContractError, OracleError

RNG_ALGORITHM = "philox4x64"

#: name -> parameter array, the flat view every optimizer/gradient routine uses
ParamDict = dict[str, np.ndarray]


# ---------------------------------------------------------------------------
# random streams


def make_rng(seed: int) -> np.random.Generator:
    """Root generator for a run; same seed, same stream of draws."""
    return np.random.Generator(np.random.Philox(key=_philox_key(int(seed))))


def derived_rng(seed: int, *tags) -> np.random.Generator:
    """Independent substream keyed by (seed, *tags).

    Tags are stringified and hashed, so any mix of ints and strings works;
    per-utterance perturbation streams use (seed, epoch, utterance_id).
    """
    return np.random.Generator(np.random.Philox(key=_philox_key(int(seed), *tags)))


def _philox_key(*parts) -> int:
    joined = "\x1f".join(str(p) for p in parts)
    digest = hashlib.blake2b(joined.encode("utf-8"), digest_size=16).digest()
    return int.from_bytes(digest, "little")


# ---------------------------------------------------------------------------
# log-space reduction


def logsumexp(values) -> float:
    """log(sum(exp(v))) computed by max-shifting.

    Entries may be -inf (they contribute nothing); +inf and NaN are rejected.
    Returns -inf iff all entries are -inf.
    """
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        raise DomainError("logsumexp of an empty collection")
    if np.isnan(arr).any() or np.isposinf(arr).any():
        raise DomainError("logsumexp input contains NaN or +inf")
    m = arr.max()
    if m == -np.inf:
        return -np.inf
    return float(m + np.log(np.exp(arr - m).sum()))


# ---------------------------------------------------------------------------
# learning-rate schedule


@dataclass
class LrSchedule:
    """Linear warmup to a peak, a hold, then geometric decay per epoch."""

    lr_start: float
    lr_peak: float
    warmup_epochs: int
    hold_epochs: int
    total_epochs: int
    decay_factor: float = 1.0 / math.sqrt(2.0)

    def __post_init__(self):
        if not (0 < self.lr_start <= self.lr_peak):
            raise DomainError("need 0 < lr_start <= lr_peak")
        if self.warmup_epochs < 1:
            raise DomainError("warmup_epochs must be >= 1")
        if not (0 < self.decay_factor < 1):
            raise DomainError("decay_factor must lie in (0, 1)")


def lr_at_epoch(schedule: LrSchedule, epoch: int) -> float:
    """Learning rate for a 1-based epoch index."""
    if not (1 <= epoch <= schedule.total_epochs):
        raise DomainError(
            f"epoch {epoch} outside [1, {schedule.total_epochs}]"
        )
    w = schedule.warmup_epochs
    if epoch <= w:
        if w == 1:
            return schedule.lr_peak
        frac = (epoch - 1) / (w - 1)
        return schedule.lr_start + frac * (schedule.lr_peak - schedule.lr_start)
    if epoch <= w + schedule.hold_epochs:
        return schedule.lr_peak
    n_decays = epoch - w - schedule.hold_epochs
    return schedule.lr_peak * schedule.decay_factor ** n_decays


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamW:
    """Bias-corrected adaptive-moment optimizer with decoupled weight decay.

    The decay shrinks parameters directly (theta <- theta - lr*wd*theta)
    before the moment update; it is never folded into the gradients.  State
    (first/second moments, step count) lives on the instance, keyed by
    parameter name, and the update is bit-reproducible for identical inputs.
    """

    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    weight_decay: float = 0.01
    step_count: int = 0
    first_moment: dict = field(default_factory=dict)
    second_moment: dict = field(default_factory=dict)

    def step(self, params: ParamDict, grads: ParamDict, lr: float) -> None:
        """One update, in place, over every named parameter array."""
        if lr <= 0:
            raise DomainError("lr must be positive")
        if set(params) != set(grads):
            raise ContractError("params and grads name different arrays")
        self.step_count += 1
        bc1 = 1.0 - self.beta1 ** self.step_count
        bc2 = 1.0 - self.beta2 ** self.step_count
        for name in params:
            theta, g = params[name], grads[name]
            if theta.shape != g.shape:
                raise ContractError(
                    f"gradient shape {g.shape} != parameter shape "
                    f"{theta.shape} for '{name}'"
                )
            if name not in self.first_moment:
                self.first_moment[name] = np.zeros_like(theta)
                self.second_moment[name] = np.zeros_like(theta)
            m, v = self.first_moment[name], self.second_moment[name]
            if self.weight_decay != 0.0:
                theta *= 1.0 - lr * self.weight_decay
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            theta -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.epsilon)


# ---------------------------------------------------------------------------
# finite-difference oracle


def finite_diff_grad(loss_fn, params: ParamDict, step: float = 1e-4) -> ParamDict:
    """Central-difference gradient of loss_fn with respect to every entry.

    loss_fn takes no arguments and must read the arrays in ``params`` (they
    are perturbed in place and restored).  A non-finite probe value raises
    OracleError naming the parameter and flat index.
    """
    if step <= 0:
        raise DomainError("step must be positive")
    grads: ParamDict = {}
    for name, theta in params.items():
        flat = theta.reshape(-1)
        g = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = loss_fn()
            flat[i] = orig - step
            down = loss_fn()
            flat[i] = orig
            if not (math.isfinite(up) and math.isfinite(down)):
                raise OracleError(
                    f"non-finite loss while probing '{name}' index {i}"
                )
            g[i] = (up - down) / (2.0 * step)
        grads[name] = g.reshape(theta.shape)
    return grads
