"""Acceptance suite: one test per criterion, each printing a PASS line with
the measured quantity next to its bound.  Run with `pytest tests/test_acceptance.py -v -s`.

The decoder-optimality and headline tests instantiate "random miniature
models" with sharpened joint outputs (see tests/test_decode.py for why flat
random models are excluded from the width-monotonicity sweep).
"""

import itertools
import sys
import time

import numpy as np
import pytest
from conftest import random_lattice

from tinyrnnt import harness
from tinyrnnt.decode import FusionWeights, beam_search_alsd, fuse_scores
from tinyrnnt.networks import default_vocabulary, init_model
from tinyrnnt.numerics import make_rng
from tinyrnnt.perturb import (
    PerturbPolicy,
    corruption_count_pmf,
    sample_corruption_count,
    scheduled_sample,
    switchout,
)
from tinyrnnt.tokenlm import LmConfig, init_lm, lm_advance, lm_initial_state, lm_topk
from tinyrnnt.transducer import (
    antidiagonal_sums,
    brute_force_log_likelihood,
    build_lattice,
    rnnt_log_likelihood,
)


def announce(line: str) -> None:
    """Criterion verdicts bypass pytest's capture so that every run shows
    one pass/fail line per criterion."""
    print(line)
    if sys.stdout is not sys.__stdout__:
        print(line, file=sys.__stdout__)


def test_criterion_1_oracle_equivalence():
    started = time.perf_counter()
    rng = make_rng(1001)
    worst = 0.0
    for _ in range(200):
        T = int(rng.integers(1, 5))
        U = int(rng.integers(0, 4))
        V = int(rng.integers(2, 5))
        lat = random_lattice(T, U, V, rng)
        delta = abs(rnnt_log_likelihood(lat) - brute_force_log_likelihood(lat))
        worst = max(worst, delta)
        assert delta < 1e-10
    elapsed = time.perf_counter() - started
    assert elapsed < 10.0
    announce(
        f"\ncriterion 1 PASS: DP vs enumeration on 200 lattices, "
        f"max |delta| = {worst:.2e} < 1e-10, {elapsed:.2f}s < 10s"
    )


def test_criterion_2_antidiagonal_invariance():
    rng = make_rng(1002)
    worst = 0.0
    for _ in range(100):
        T = int(rng.integers(1, 5))
        U = int(rng.integers(0, 4))
        V = int(rng.integers(2, 5))
        lat = random_lattice(T, U, V, rng)
        sums = antidiagonal_sums(lat)
        spread = float(sums.max() - sums.min())
        worst = max(worst, spread)
        assert spread < 1e-10
    announce(
        f"\ncriterion 2 PASS: anti-diagonal sums agree pairwise on 100 "
        f"lattices, max spread = {worst:.2e} < 1e-10"
    )


def test_criterion_3_gradient_fidelity():
    started = time.perf_counter()
    report = harness.grad_check(seed=0)
    elapsed = time.perf_counter() - started
    assert report.passed
    assert report.max_rel_err < 1e-5
    assert elapsed < 60.0
    announce(
        f"\ncriterion 3 PASS: grad-check max relative error "
        f"{report.max_rel_err:.2e} < 1e-5 over {len(report.per_group)} "
        f"parameter groups, {elapsed:.1f}s < 60s"
    )


def test_criterion_4_perturbation_laws():
    from scipy.stats import chisquare

    vocab = default_vocabulary(8)
    lm = init_lm(vocab, LmConfig(hidden_size=8, embed_dim=8, seed=41))

    # (a) exact identities
    rng = make_rng(1004)
    tokens = [int(t) for t in rng.integers(1, 9, size=12)]
    policy_p1 = PerturbPolicy(kind="scheduled_sampling", teacher_p=1.0, top_k=3)
    assert scheduled_sample(tokens, policy_p1, lm, make_rng(7)).perturbed == tokens
    rec = switchout(tokens, 1e-9, vocab, make_rng(8))  # temperature forces n_hat = 0
    assert rec.sampled_count == 0 and rec.perturbed == tokens

    # (b) corruption-count distribution vs the analytic law, chi-square at 0.01
    U, draws = 10, 100_000
    pvalues = {}
    for tau in (0.1, 0.3, 0.5):
        rng = make_rng(int(tau * 1000))
        counts = np.zeros(U + 1, dtype=np.int64)
        for _ in range(draws):
            counts[sample_corruption_count(U, tau, rng)] += 1
        expected = draws * corruption_count_pmf(U, tau)
        # merge low-expectation bins; the leftover tail stays its own bin so
        # at least two bins survive (sharp tau puts ~all mass on n = 0)
        obs, exp = [], []
        acc_o, acc_e = 0, 0.0
        for o, e in zip(counts, expected):
            acc_o += int(o)
            acc_e += float(e)
            if acc_e >= 5.0:
                obs.append(acc_o)
                exp.append(acc_e)
                acc_o, acc_e = 0, 0.0
        if acc_e > 0:
            if acc_e >= 1.0 or len(obs) < 2:
                obs.append(acc_o)
                exp.append(acc_e)
            else:
                obs[-1] += acc_o
                exp[-1] += acc_e
        stat, p = chisquare(obs, exp)
        pvalues[tau] = p
        assert p > 0.01, (tau, p)

    # (c) every substitution lies in the LM's top-k set given the perturbed prefix
    policy = PerturbPolicy(kind="scheduled_sampling", teacher_p=0.5, top_k=3)
    rng = make_rng(1005)
    positions = 0
    while positions < 100_000:
        tokens = [int(t) for t in rng.integers(1, 9, size=50)]
        rec = scheduled_sample(tokens, policy, lm, rng)
        state = lm_initial_state(lm)
        for u, chosen in enumerate(rec.perturbed):
            if chosen != rec.original[u]:
                assert chosen in lm_topk(lm, state, 3)
            state = lm_advance(lm, state, chosen)
        positions += len(tokens)
    announce(
        "\ncriterion 4 PASS: identities exact; chi-square p-values "
        + ", ".join(f"tau={t}: {p:.3f}" for t, p in pvalues.items())
        + " all > 0.01 (1e5 draws); "
        f"{positions} scheduled-sampling positions, all substitutions in top-3"
    )


def _sharp_mini_model(seed, V=2):
    rng = make_rng(seed)
    m = init_model(
        default_vocabulary(V), feature_dim=3, trans_layers=1, trans_hidden=3,
        pred_hidden=4, embed_dim=4, joint_dim=3, rng=rng,
    )
    m.w_out *= 5.0
    m.b_joint[:] = make_rng(seed + 1).normal(size=m.b_joint.shape)
    return m


def test_criterion_5_decoder_optimality():
    U_max, T = 2, 3
    checked = 0
    for seed in range(50):
        m = _sharp_mini_model(seed + 2000)
        frames = make_rng(seed + 3000).normal(size=(T, 3))
        # brute-force argmax over every token sequence up to U_max
        best_tokens, best_ll = None, -np.inf
        for length in range(U_max + 1):
            for seq in itertools.product(range(1, 3), repeat=length):
                lat, _ = build_lattice(m, frames, list(seq))
                ll = rnnt_log_likelihood(lat)
                if ll > best_ll:
                    best_tokens, best_ll = list(seq), ll
        hyps = beam_search_alsd(m, frames, beam_width=64, max_alignment_length=T + U_max)
        assert hyps[0].tokens == best_tokens, seed
        assert hyps[0].rnnt_log_prob == pytest.approx(best_ll, abs=1e-9)

        scores = [
            beam_search_alsd(m, frames, beam_width=w)[0].rnnt_log_prob
            for w in (1, 2, 4, 8)
        ]
        for a, b in zip(scores, scores[1:]):
            assert b >= a - 1e-12, (seed, scores)
        checked += 1
    announce(
        f"\ncriterion 5 PASS: exhaustive ALSD equals brute-force argmax and "
        f"the best score is non-decreasing in beam width on {checked} models"
    )


def test_criterion_6_fusion_correctness():
    vocab = default_vocabulary(2)
    src = init_lm(vocab, LmConfig(hidden_size=4, embed_dim=4, seed=61))
    ext = init_lm(vocab, LmConfig(hidden_size=4, embed_dim=4, seed=62), "target_domain")
    m = _sharp_mini_model(66)
    frames = make_rng(67).normal(size=(3, 3))

    raw = beam_search_alsd(m, frames, beam_width=4)
    fused = beam_search_alsd(
        m, frames, beam_width=4, fusion=FusionWeights(0.0, 0.0, 0.0),
        src_lm=src, ext_lm=ext,
    )
    assert [h.tokens for h in raw] == [h.tokens for h in fused]
    for a, b in zip(raw, fused):
        assert a.rnnt_log_prob == b.rnnt_log_prob
        assert b.fused_score == b.rnnt_log_prob  # bit-exact with zero weights

    from tinyrnnt.tokenlm import lm_log_prob

    tokens, base = [2, 1], -1.4
    for attr, slope in (
        ("mu", -lm_log_prob(src, tokens)),
        ("lam", lm_log_prob(ext, tokens)),
        ("rho", len(tokens)),
    ):
        vals = []
        for x in (0.0, 0.7, 1.4):
            w = FusionWeights()
            setattr(w, attr, x)
            vals.append(fuse_scores(base, tokens, src, ext, w))
        assert vals[1] - vals[0] == pytest.approx(0.7 * slope, abs=1e-12)
        assert vals[2] - vals[1] == pytest.approx(0.7 * slope, abs=1e-12)
    announce(
        "\ncriterion 6 PASS: zero-weight fusion reproduces raw decoding "
        "bit-exactly; affinity slopes match in mu, lambda, rho"
    )


# ---------------------------------------------------------------------------
# the headline experiment (criteria 7 and 8)


@pytest.fixture(scope="session")
def headline_first_run(tmp_path_factory):
    workdir = tmp_path_factory.mktemp("headline-a")
    return harness.run_headline_experiment(str(workdir))


def test_criterion_7_headline_experiment(headline_first_run):
    result = headline_first_run
    assert result.seconds < 1800.0, "headline experiment exceeded 30 minutes"
    base_test = result.mean_wer[("baseline", "test", "none")]
    ss_test = result.mean_wer[("scheduled_sampling", "test", "none")]
    sw_test = result.mean_wer[("switchout", "test", "none")]
    base_dev = result.mean_wer[("baseline", "dev", "none")]
    ss_dev = result.mean_wer[("scheduled_sampling", "dev", "none")]

    assert ss_test <= base_test, (
        f"scheduled sampling should not lose on the stressed split: "
        f"{ss_test:.4f} vs {base_test:.4f}"
    )
    assert ss_dev <= base_dev + 0.005, (
        f"clean-split regression beyond +0.5% absolute: {ss_dev:.4f} vs {base_dev:.4f}"
    )
    assert sw_test <= base_test + 0.002, (
        f"switchout exceeded baseline by more than 0.2% absolute: "
        f"{sw_test:.4f} vs {base_test:.4f}"
    )
    announce(
        "\ncriterion 7 PASS: stressed-test mean WER "
        f"baseline {base_test*100:.2f}% vs scheduled sampling {ss_test*100:.2f}% "
        f"(switchout {sw_test*100:.2f}%); clean-dev baseline {base_dev*100:.2f}% "
        f"vs scheduled sampling {ss_dev*100:.2f}% (bound +0.5%); "
        f"runtime {result.seconds/60:.1f} min < 30 min"
    )


def test_criterion_8_determinism(headline_first_run, tmp_path_factory):
    workdir = tmp_path_factory.mktemp("headline-b")
    second = harness.run_headline_experiment(str(workdir))
    assert second.csv_text == headline_first_run.csv_text
    announce(
        "\ncriterion 8 PASS: two runs with identical seeds produced "
        f"byte-identical metrics CSVs ({len(second.csv_text)} bytes)"
    )
