import math

import numpy as np
import pytest

from tinyrnnt.errors import ContractError, DomainError
from tinyrnnt.networks import default_vocabulary
from tinyrnnt.numerics import derived_rng, make_rng
from tinyrnnt.perturb import (
    PerturbPolicy,
    apply_policy,
    corruption_count_pmf,
    sample_corruption_count,
    scheduled_sample,
    switchout,
)
from tinyrnnt.tokenlm import LmConfig, init_lm, lm_advance, lm_initial_state, lm_topk


@pytest.fixture
def vocab():
    return default_vocabulary(8)


@pytest.fixture
def random_lm(vocab):
    return init_lm(vocab, LmConfig(hidden_size=8, embed_dim=8, seed=5))


# ---------------------------------------------------------------------------
# corruption-count distribution


def test_pmf_closed_form_u1():
    pmf = corruption_count_pmf(1, 0.1)
    assert pmf[0] == pytest.approx(1.0 / (1.0 + math.exp(-10.0)), abs=1e-12)
    assert pmf.sum() == pytest.approx(1.0, abs=1e-12)


def test_tiny_temperature_forces_zero():
    rng = make_rng(0)
    draws = [sample_corruption_count(10, 1e-6, rng) for _ in range(1000)]
    assert all(d == 0 for d in draws)


def test_count_stays_in_range():
    rng = make_rng(1)
    for _ in range(500):
        n = sample_corruption_count(5, 0.7, rng)
        assert 0 <= n <= 5


def test_count_empirical_mean_matches_analytic():
    rng = make_rng(2)
    tau, U, trials = 0.3, 10, 20000
    pmf = corruption_count_pmf(U, tau)
    expected_mean = float((np.arange(U + 1) * pmf).sum())
    draws = np.array([sample_corruption_count(U, tau, rng) for _ in range(trials)])
    assert draws.mean() == pytest.approx(expected_mean, abs=0.02)


def test_pmf_rejects_bad_args():
    with pytest.raises(DomainError):
        corruption_count_pmf(3, 0.0)
    with pytest.raises(DomainError):
        corruption_count_pmf(-1, 0.5)


# ---------------------------------------------------------------------------
# switchout


def test_switchout_zero_count_is_identity(vocab):
    rng = make_rng(3)
    rec = switchout([1, 2, 3], 1e-6, vocab, rng)
    assert rec.perturbed == rec.original == [1, 2, 3]
    assert rec.corrupted_positions == []
    assert rec.sampled_count == 0


def test_switchout_replacements_differ_and_avoid_null(vocab):
    rng = make_rng(4)
    for _ in range(300):
        tokens = rng.integers(1, 9, size=10).tolist()
        rec = switchout(tokens, 5.0, vocab, rng)
        assert len(rec.perturbed) == len(tokens)
        for u in range(10):
            if u in rec.corrupted_positions:
                assert rec.perturbed[u] != rec.original[u]
                assert 1 <= rec.perturbed[u] <= 8
            else:
                assert rec.perturbed[u] == rec.original[u]


def test_switchout_conditional_corruption_rate(vocab):
    # flat temperature so the drawn count covers 0..10; conditioned on
    # n_hat = 4 the per-position flip rate is 0.4
    rng = make_rng(5)
    counts = []
    for _ in range(100_000):
        rec = switchout(list(range(1, 9)) + [1, 2], 1e6, vocab, rng)
        if rec.sampled_count == 4:
            counts.append(len(rec.corrupted_positions))
    assert len(counts) > 5000
    assert np.mean(counts) == pytest.approx(4.0, abs=0.05)


def test_switchout_single_token_vocab_leaves_tokens():
    vocab1 = default_vocabulary(1)
    rng = make_rng(6)
    rec = switchout([1, 1, 1], 1e6, vocab1, rng)
    assert rec.perturbed == [1, 1, 1]
    assert rec.corrupted_positions == []


def test_switchout_rejects_empty(vocab):
    with pytest.raises(DomainError):
        switchout([], 0.5, vocab, make_rng(0))


# ---------------------------------------------------------------------------
# scheduled sampling


def test_full_teacher_forcing_is_identity(random_lm):
    policy = PerturbPolicy(kind="scheduled_sampling", teacher_p=1.0, top_k=3)
    rng = make_rng(7)
    tokens = [3, 1, 4, 1, 5]
    rec = scheduled_sample(tokens, policy, random_lm, rng)
    assert rec.perturbed == tokens
    assert rec.sampled_count == 0
    assert rec.corrupted_positions == []


def test_zero_teacher_forcing_k1_is_greedy_rollout(random_lm):
    policy = PerturbPolicy(kind="scheduled_sampling", teacher_p=0.0, top_k=1)
    rng = make_rng(8)
    tokens = [2, 2, 2, 2]
    rec = scheduled_sample(tokens, policy, random_lm, rng)

    state = lm_initial_state(random_lm)
    expected = []
    for _ in tokens:
        nxt = lm_topk(random_lm, state, 1)[0]
        expected.append(nxt)
        state = lm_advance(random_lm, state, nxt)
    assert rec.perturbed == expected
    assert rec.sampled_count == len(tokens)

    # the rollout ignores the ground truth except for its length
    rec2 = scheduled_sample([5, 5, 5, 5], policy, random_lm, make_rng(8))
    assert rec2.perturbed == expected


def test_substitutions_lie_in_topk_and_condition_on_perturbed_history(random_lm):
    policy = PerturbPolicy(kind="scheduled_sampling", teacher_p=0.5, top_k=3)
    rng = make_rng(9)
    tokens = make_rng(10).integers(1, 9, size=50).tolist()
    rec = scheduled_sample(tokens, policy, random_lm, rng)
    assert len(rec.perturbed) == len(tokens)
    # replay the LM over the perturbed prefix
    state = lm_initial_state(random_lm)
    for u, chosen in enumerate(rec.perturbed):
        if chosen != rec.original[u]:
            assert chosen in lm_topk(random_lm, state, 3)
        state = lm_advance(random_lm, state, chosen)


def test_sampled_rate_matches_schedule(random_lm):
    policy = PerturbPolicy(kind="scheduled_sampling", teacher_p=0.7, top_k=2)
    rng = make_rng(11)
    total_positions = 0
    total_sampled = 0
    for _ in range(400):
        tokens = rng.integers(1, 9, size=25).tolist()
        rec = scheduled_sample(tokens, policy, random_lm, rng)
        total_positions += len(tokens)
        total_sampled += rec.sampled_count
    assert total_sampled / total_positions == pytest.approx(0.3, abs=0.02)


# ---------------------------------------------------------------------------
# policy dispatch


def test_policy_none_is_identity(vocab):
    policy = PerturbPolicy(kind="none")
    assert apply_policy([1, 2, 3], policy, epoch=1) == [1, 2, 3]


def test_anneal_lifts_perturbation(vocab, random_lm):
    policy = PerturbPolicy(
        kind="scheduled_sampling", teacher_p=0.0, top_k=1, anneal_epoch=5
    )
    tokens = [1, 2, 3]
    out = apply_policy(tokens, policy, epoch=6, lm=random_lm, rng=make_rng(12))
    assert out == tokens
    out_active = apply_policy(tokens, policy, epoch=5, lm=random_lm, rng=make_rng(12))
    assert out_active != tokens  # greedy rollout replaces everything here


def test_switchout_dispatch_transparency(vocab):
    policy = PerturbPolicy(kind="switchout", tau=2.0, anneal_epoch=10)
    tokens = [4, 5, 6, 7]
    direct = switchout(tokens, 2.0, vocab, derived_rng(1, 3, "utt"))
    via_policy = apply_policy(
        tokens, policy, epoch=3, vocab=vocab, rng=derived_rng(1, 3, "utt")
    )
    assert via_policy == direct.perturbed


def test_length_preservation_property(vocab, random_lm):
    rng = make_rng(13)
    policies = [
        PerturbPolicy(kind="none"),
        PerturbPolicy(kind="switchout", tau=1.0),
        PerturbPolicy(kind="scheduled_sampling", teacher_p=0.4, top_k=3),
    ]
    for _ in range(50):
        U = int(rng.integers(1, 12))
        tokens = rng.integers(1, 9, size=U).tolist()
        for policy in policies:
            out = apply_policy(
                tokens, policy, epoch=2, vocab=vocab, lm=random_lm, rng=rng
            )
            assert len(out) == U


def test_empty_sequence_passes_through(vocab):
    policy = PerturbPolicy(kind="switchout", tau=0.5)
    assert apply_policy([], policy, epoch=1, vocab=vocab, rng=make_rng(0)) == []


def test_epoch_streams_are_independent(vocab):
    policy = PerturbPolicy(kind="switchout", tau=5.0)
    tokens = list(range(1, 9))
    outs = {
        epoch: apply_policy(
            tokens, policy, epoch, vocab=vocab, rng=derived_rng(7, epoch, "utt-0")
        )
        for epoch in (1, 2)
    }
    assert outs[1] != outs[2]
    repeat = apply_policy(
        tokens, policy, 1, vocab=vocab, rng=derived_rng(7, 1, "utt-0")
    )
    assert outs[1] == repeat


def test_policy_validation():
    with pytest.raises(DomainError):
        PerturbPolicy(kind="bogus")
    with pytest.raises(DomainError):
        PerturbPolicy(kind="switchout", tau=0.0)
    with pytest.raises(DomainError):
        PerturbPolicy(kind="scheduled_sampling", teacher_p=1.5)
    with pytest.raises(DomainError):
        PerturbPolicy(kind="scheduled_sampling", top_k=0)


def test_missing_collaborators_rejected(vocab):
    with pytest.raises(ContractError):
        apply_policy([1], PerturbPolicy(kind="switchout"), 1, rng=make_rng(0))
    with pytest.raises(ContractError):
        apply_policy(
            [1], PerturbPolicy(kind="scheduled_sampling"), 1, rng=make_rng(0)
        )
    with pytest.raises(ContractError):
        apply_policy([1], PerturbPolicy(kind="switchout"), 1, vocab=vocab)
