"""Training loop, evaluation orchestration, gradient checking, and the flat
key=value config format used by the CLI.

Batching follows a length curriculum when enabled (shortest utterances
first); gradients are averaged over the utterances of each batch
(mean-over-batch semantics).  Perturbation streams are derived from
(seed, epoch, utterance_id), so they do not depend on data order, and every
run is bit-deterministic for a fixed config and seed.
"""

from __future__ import annotations

import json
import math
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import checkpoint, data, networks, tokenlm, transducer
from .decode import FusionWeights, beam_search_alsd, fuse_scores, word_error_rate
from .errors import ContractError, DomainError, TrainingError
from .networks import ModelParams, Vocabulary, default_vocabulary
from .numerics import AdamW, LrSchedule, derived_rng, finite_diff_grad, lr_at_epoch
from .perturb import PerturbPolicy, perturb_record


@dataclass
class TrainConfig:
    trans_layers: int = 2
    trans_hidden: int = 32
    pred_hidden: int = 32
    embed_dim: int | None = None
    joint_dim: int = 32
    schedule: LrSchedule | None = None
    batch_size: int = 16
    epochs: int = 30
    policy: PerturbPolicy = field(default_factory=PerturbPolicy)
    curriculum: bool = True
    seed: int = 0
    checkpoint_dir: str | None = None
    checkpoint_every: int = 1  # 0 keeps only the final checkpoint
    weight_decay: float = 0.01
    # hook point for weight-masking regularizers (dropout/DropConnect style):
    # called as regularizer(params, epoch, utterance_id) before each forward
    # pass and may return a transformed parameter view; None is a no-op
    regularizer: object = None

    def __post_init__(self):
        if self.batch_size < 1:
            raise DomainError("batch_size must be at least 1")
        if self.epochs < 1:
            raise DomainError("epochs must be at least 1")

    def resolved_schedule(self) -> LrSchedule:
        if self.schedule is not None:
            return self.schedule
        # desk-scale shape of the long-warmup/long-hold recipe; the peak is
        # high because only a few hundred optimizer steps fit in a run
        return LrSchedule(
            lr_start=1e-3,
            lr_peak=4e-2,
            warmup_epochs=min(6, max(1, self.epochs // 3)),
            hold_epochs=max(1, self.epochs // 3),
            total_epochs=self.epochs,
        )


@dataclass
class EpochReport:
    epoch: int
    mean_neg_log_lik: float
    learning_rate: float
    perturbation_active: bool
    wall_time_s: float


def effective_lr(schedule: LrSchedule, policy: PerturbPolicy, epoch: int) -> float:
    """Schedule value, with the post-anneal restart when configured: the
    first epoch past the anneal boundary uses post_anneal_lr, decayed
    geometrically afterwards."""
    if (
        policy.anneal_epoch is not None
        and policy.post_anneal_lr is not None
        and epoch > policy.anneal_epoch
    ):
        return policy.post_anneal_lr * schedule.decay_factor ** (
            epoch - policy.anneal_epoch - 1
        )
    return lr_at_epoch(schedule, epoch)


def perturbation_active(policy: PerturbPolicy, epoch: int) -> bool:
    if policy.kind == "none":
        return False
    return policy.anneal_epoch is None or epoch <= policy.anneal_epoch


def init_model_for(config: TrainConfig, vocab: Vocabulary, feature_dim: int) -> ModelParams:
    rng = derived_rng(config.seed, "init")
    return networks.init_model(
        vocab,
        feature_dim=feature_dim,
        trans_layers=config.trans_layers,
        trans_hidden=config.trans_hidden,
        pred_hidden=config.pred_hidden,
        embed_dim=config.embed_dim,
        joint_dim=config.joint_dim,
        rng=rng,
    )


def epoch_order(config: TrainConfig, utterances, epoch: int) -> list:
    """Curriculum: shortest utterances first (stable by id); otherwise a
    seeded shuffle per epoch."""
    if config.curriculum:
        return sorted(
            range(len(utterances)),
            key=lambda i: (len(utterances[i].frames), utterances[i].utterance_id),
        )
    return derived_rng(config.seed, "order", epoch).permutation(len(utterances)).tolist()


def train(
    config: TrainConfig,
    utterances,
    vocab: Vocabulary,
    lm=None,
    dump_perturbations: int = 0,
    dump_path=None,
):
    """Fit a model on the utterances; returns (params, per-epoch reports).

    The perturbation policy is applied per utterance per epoch to the
    prediction-network input only; the loss stays the likelihood of the
    untouched targets.  Aborts on a non-finite loss, naming the utterance.
    """
    if not utterances:
        raise DomainError("empty training set")
    if config.policy.kind == "scheduled_sampling" and lm is None:
        raise ContractError("scheduled sampling needs a token LM")
    schedule = config.resolved_schedule()
    params = init_model_for(config, vocab, utterances[0].frames.shape[1])
    param_arrays = params.param_dict()
    opt = AdamW(weight_decay=config.weight_decay)
    reports: list[EpochReport] = []
    dump_fh = None
    if dump_perturbations > 0:
        dump_fh = open(dump_path or "perturbations.jsonl", "w")
    try:
        for epoch in range(1, config.epochs + 1):
            started = time.perf_counter()
            lr = effective_lr(schedule, config.policy, epoch)
            active = perturbation_active(config.policy, epoch)
            order = epoch_order(config, utterances, epoch)
            loss_sum = 0.0
            dumped = 0
            for start in range(0, len(order), config.batch_size):
                batch = order[start : start + config.batch_size]
                total = networks.zero_grads(params)
                for idx in batch:
                    utt = utterances[idx]
                    rng_u = derived_rng(config.seed, "perturb", epoch, utt.utterance_id)
                    record = perturb_record(
                        utt.tokens, config.policy, epoch, vocab=vocab, lm=lm, rng=rng_u
                    )
                    if dump_fh is not None and dumped < dump_perturbations:
                        dump_fh.write(
                            json.dumps(
                                {
                                    "epoch": epoch,
                                    "utterance_id": utt.utterance_id,
                                    "original": record.original,
                                    "perturbed": record.perturbed,
                                    "corrupted_positions": record.corrupted_positions,
                                    "sampled_count": record.sampled_count,
                                }
                            )
                            + "\n"
                        )
                        dumped += 1
                    forward_params = params
                    if config.regularizer is not None:
                        forward_params = config.regularizer(
                            params, epoch, utt.utterance_id
                        )
                    lattice, cache = transducer.build_lattice(
                        forward_params, utt.frames, utt.tokens, record.perturbed
                    )
                    ll = transducer.rnnt_log_likelihood(lattice)
                    if not math.isfinite(ll):
                        raise TrainingError(
                            f"non-finite loss at epoch {epoch}, "
                            f"utterance {utt.utterance_id}"
                        )
                    loss_sum += -ll
                    d_logits = -transducer.lattice_grad(lattice)  # loss is -loglik
                    networks.accumulate_grads(
                        total, networks.model_backward(forward_params, cache, d_logits)
                    )
                for name in total:
                    total[name] /= len(batch)
                opt.step(param_arrays, total, lr)
            reports.append(
                EpochReport(
                    epoch=epoch,
                    mean_neg_log_lik=loss_sum / len(utterances),
                    learning_rate=lr,
                    perturbation_active=active,
                    wall_time_s=time.perf_counter() - started,
                )
            )
            if config.checkpoint_dir and config.checkpoint_every:
                if epoch % config.checkpoint_every == 0 or epoch == config.epochs:
                    save_model(
                        params, os.path.join(config.checkpoint_dir, f"epoch_{epoch:03d}.json")
                    )
    finally:
        if dump_fh is not None:
            dump_fh.close()
    if config.checkpoint_dir:
        save_model(params, os.path.join(config.checkpoint_dir, "final.json"))
    return params, reports


def reports_to_csv(reports) -> str:
    lines = ["epoch,mean_neg_log_lik,learning_rate,perturbation_active,wall_time_s"]
    for r in reports:
        lines.append(
            f"{r.epoch},{r.mean_neg_log_lik!r},{r.learning_rate!r},"
            f"{int(r.perturbation_active)},{r.wall_time_s:.3f}"
        )
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# model checkpoints


def save_model(params: ModelParams, path) -> None:
    meta = {
        "feature_dim": params.feature_dim,
        "trans_layers": len(params.transcription),
        "trans_hidden": params.transcription[0].fwd.hidden_size,
        "pred_hidden": params.prediction.hidden_size,
        "embed_dim": params.embedding.shape[1],
        "joint_dim": params.b_joint.shape[0],
    }
    checkpoint.save_container(path, "rnnt", params.vocab.symbols, meta, params.param_dict())


def load_model(path) -> ModelParams:
    payload = checkpoint.load_container(path, expect_kind="rnnt")
    vocab = Vocabulary(payload["vocab_symbols"])
    meta = payload["meta"]
    arrays = payload["arrays"]
    layers = []
    for i in range(meta["trans_layers"]):
        layers.append(
            networks.BiLstmLayer(
                fwd=networks.LstmWeights(
                    arrays[f"transcription.{i}.fwd.w_x"],
                    arrays[f"transcription.{i}.fwd.w_h"],
                    arrays[f"transcription.{i}.fwd.b"],
                ),
                bwd=networks.LstmWeights(
                    arrays[f"transcription.{i}.bwd.w_x"],
                    arrays[f"transcription.{i}.bwd.w_h"],
                    arrays[f"transcription.{i}.bwd.b"],
                ),
            )
        )
    prediction = networks.LstmWeights(
        arrays["prediction.lstm.w_x"],
        arrays["prediction.lstm.w_h"],
        arrays["prediction.lstm.b"],
    )
    return ModelParams(
        vocab=vocab,
        feature_dim=meta["feature_dim"],
        transcription=layers,
        embedding=arrays["prediction.embedding"],
        prediction=prediction,
        w_enc=arrays["joint.w_enc"],
        w_pred=arrays["joint.w_pred"],
        b_joint=arrays["joint.b"],
        w_out=arrays["joint.w_out"],
    )


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class MetricsRow:
    split: str
    beam: int
    fusion: str  # "none" or "density_ratio"
    wer: float
    sub: int
    dele: int
    ins: int


def decode_split(params, utterances, beam: int, max_alignment_length=None):
    """Raw n-best per utterance (fusion enters only as rescoring later)."""
    results = []
    for utt in utterances:
        hyps = beam_search_alsd(
            params, utt.frames, beam_width=beam, max_alignment_length=max_alignment_length
        )
        results.append((utt, hyps))
    return results


def evaluate(
    params,
    utterances,
    split: str,
    beam: int = 8,
    src_lm=None,
    ext_lm=None,
    weights: FusionWeights | None = None,
    max_alignment_length=None,
):
    """Token error rates over a split, without fusion and (when both LMs are
    given) with density-ratio rescoring of the finalized n-best."""
    if not utterances:
        raise DomainError("empty evaluation split")
    decoded = decode_split(params, utterances, beam, max_alignment_length)
    refs = [utt.tokens for utt, _ in decoded]
    raw_best = [hyps[0].tokens for _, hyps in decoded]
    rows = []
    result = word_error_rate(refs, raw_best)
    rows.append(
        MetricsRow(
            split,
            beam,
            "none",
            result.rate,
            result.counts.substitutions,
            result.counts.deletions,
            result.counts.insertions,
        )
    )
    if src_lm is not None and ext_lm is not None:
        if src_lm.vocab.symbols != params.vocab.symbols:
            raise ContractError("source LM vocabulary differs from the model's")
        weights = weights or FusionWeights()
        fused_best = []
        for _, hyps in decoded:
            best = max(
                hyps,
                key=lambda h: (
                    fuse_scores(h.rnnt_log_prob, h.tokens, src_lm, ext_lm, weights),
                    tuple(h.tokens),
                ),
            )
            fused_best.append(best.tokens)
        result = word_error_rate(refs, fused_best)
        rows.append(
            MetricsRow(
                split,
                beam,
                "density_ratio",
                result.rate,
                result.counts.substitutions,
                result.counts.deletions,
                result.counts.insertions,
            )
        )
    return rows


def metrics_to_csv(rows) -> str:
    lines = ["split,beam,fusion,wer,sub,del,ins"]
    for r in rows:
        lines.append(f"{r.split},{r.beam},{r.fusion},{r.wer!r},{r.sub},{r.dele},{r.ins}")
    return "\n".join(lines) + "\n"


def sweep_fusion_weights(params, utterances, src_lm, ext_lm, beam: int = 8,
                         mu_grid=(0.0, 0.2, 0.4), lam_grid=(0.0, 0.2, 0.4),
                         rho_grid=(0.0, 0.3, 0.6)):
    """Grid-search fusion weights on a held-out split by n-best rescoring."""
    decoded = decode_split(params, utterances, beam)
    refs = [utt.tokens for utt, _ in decoded]
    best_weights, best_rate = FusionWeights(), float("inf")
    for mu in mu_grid:
        for lam in lam_grid:
            for rho in rho_grid:
                w = FusionWeights(mu, lam, rho)
                hyp_best = []
                for _, hyps in decoded:
                    top = max(
                        hyps,
                        key=lambda h: (
                            fuse_scores(h.rnnt_log_prob, h.tokens, src_lm, ext_lm, w),
                            tuple(h.tokens),
                        ),
                    )
                    hyp_best.append(top.tokens)
                rate = word_error_rate(refs, hyp_best).rate
                if rate < best_rate:
                    best_rate, best_weights = rate, w
    return best_weights, best_rate


# ---------------------------------------------------------------------------
# gradient check


@dataclass
class GradCheckReport:
    per_group: dict
    max_rel_err: float
    passed: bool
    failures: list

    def summary(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        lines = [f"grad-check {status}: max relative error {self.max_rel_err:.3e}"]
        for name in sorted(self.per_group):
            lines.append(f"  {name}: {self.per_group[name]:.3e}")
        if self.failures:
            lines.append("failing groups: " + ", ".join(self.failures))
        return "\n".join(lines)


GRAD_CHECK_FAIL_THRESHOLD = 1e-4


def grad_check(seed: int = 0, corrupt_group: str | None = None,
               zero_weights: bool = False) -> GradCheckReport:
    """Analytic vs central-difference gradients on a sub-1k-parameter model.

    Per parameter group the error is ||a - f|| / max(||a||, ||f||); groups
    where both norms sit below 1e-8 are compared absolutely (covers the
    zero-weight model, whose gradients vanish identically).  ``corrupt_group``
    scales one analytic gradient group (test fixture for fault injection).
    """
    rng = derived_rng(seed, "grad-check")
    vocab = default_vocabulary(3)
    params = networks.init_model(
        vocab, feature_dim=4, trans_layers=1, trans_hidden=4,
        pred_hidden=4, embed_dim=4, joint_dim=4, rng=rng,
    )
    if zero_weights:
        for _, a in params.named_arrays():
            a[:] = 0.0
    assert params.num_params() <= 1000
    frames = rng.normal(size=(3, 4))
    tokens = [int(t) for t in rng.integers(1, 4, size=2)]

    def loss():
        lat, _ = transducer.build_lattice(params, frames, tokens)
        return transducer.rnnt_log_likelihood(lat)

    lat, cache = transducer.build_lattice(params, frames, tokens)
    analytic = networks.model_backward(params, cache, transducer.lattice_grad(lat))
    if corrupt_group is not None:
        if corrupt_group not in analytic:
            raise DomainError(f"unknown parameter group {corrupt_group!r}")
        analytic[corrupt_group] = analytic[corrupt_group] * 1.5 + 0.01
    fd = finite_diff_grad(loss, params.param_dict(), step=1e-4)
    per_group = {}
    for name in fd:
        a, f = analytic[name], fd[name]
        norm_a, norm_f = np.linalg.norm(a), np.linalg.norm(f)
        if max(norm_a, norm_f) < 1e-8:
            per_group[name] = float(np.linalg.norm(a - f))
        else:
            per_group[name] = float(np.linalg.norm(a - f) / max(norm_a, norm_f))
    max_err = max(per_group.values())
    failures = sorted(n for n, e in per_group.items() if e > GRAD_CHECK_FAIL_THRESHOLD)
    return GradCheckReport(per_group, max_err, not failures, failures)


# ---------------------------------------------------------------------------
# the headline robustness experiment
#
# Three models per seed (no perturbation, scheduled sampling at p=0.9/k=3,
# and switchout at temperature 0.1) are trained on the same data and scored
# on the clean dev split and the noise-stressed test split, with and without
# density-ratio fusion.  The direction of interest: perturbation-trained
# models should not lose on the stressed split, without regressing the clean
# split.

HEADLINE_POLICIES = (
    ("baseline", lambda: PerturbPolicy(kind="none")),
    ("scheduled_sampling", lambda: PerturbPolicy(kind="scheduled_sampling", teacher_p=0.9, top_k=3)),
    ("switchout", lambda: PerturbPolicy(kind="switchout", tau=0.1)),
)


def headline_task_spec(seed: int) -> data.SyntheticTaskSpec:
    # a strongly structured token prior makes label histories load-bearing,
    # and the 2.5x test noise forces the recognition errors that expose them
    return data.SyntheticTaskSpec(
        vocab_size=8,
        feature_dim=16,
        frames_per_token=(1, 2),
        noise_sigma_train=0.2,
        noise_sigma_test=0.5,
        utterance_count=200,
        token_length=(3, 8),
        seed=seed,
        token_prior="chain",
        chain_weight=0.75,
    )


def headline_train_config(seed: int, policy: PerturbPolicy) -> TrainConfig:
    return TrainConfig(
        schedule=LrSchedule(
            lr_start=1e-3, lr_peak=4e-2, warmup_epochs=6, hold_epochs=12, total_epochs=30
        ),
        batch_size=16,
        epochs=30,
        policy=policy,
        curriculum=True,
        seed=seed,
        weight_decay=0.01,
    )


@dataclass
class HeadlineResult:
    csv_text: str
    mean_wer: dict  # (config, split, fusion) -> mean WER over seeds
    seconds: float


def run_headline_experiment(workdir, seeds=(1, 2, 3, 4, 5), beam: int = 8) -> HeadlineResult:
    started = time.perf_counter()
    os.makedirs(workdir, exist_ok=True)
    rows = []
    for seed in seeds:
        spec = headline_task_spec(seed)
        ds_dir = os.path.join(workdir, f"data-{seed}")
        paths = data.generate_dataset(spec, ds_dir, lm_corpus_size=400)
        train_utts = data.load_utterances(paths["train"])
        dev_utts = data.load_utterances(paths["dev"])
        test_utts = data.load_utterances(paths["test"])
        vocab = spec.vocabulary()
        src_lm, _ = tokenlm.lm_train(
            [u.tokens for u in train_utts], vocab,
            tokenlm.LmConfig(epochs=12, seed=seed), corpus_tag="train_transcripts",
        )
        ext_lm, _ = tokenlm.lm_train(
            data.load_corpus_tokens(paths["lm_corpus"]), vocab,
            tokenlm.LmConfig(epochs=12, seed=seed + 1000), corpus_tag="target_domain",
        )
        fusion_weights = None
        for name, make_policy in HEADLINE_POLICIES:
            config = headline_train_config(seed, make_policy())
            params, _ = train(config, train_utts, vocab, lm=src_lm)
            if fusion_weights is None:
                # swept once per seed, on dev with the baseline model
                fusion_weights, _ = sweep_fusion_weights(
                    params, dev_utts, src_lm, ext_lm, beam=beam
                )
            for split_name, utts in (("dev", dev_utts), ("test", test_utts)):
                for metrics in evaluate(
                    params, utts, split_name, beam=beam,
                    src_lm=src_lm, ext_lm=ext_lm, weights=fusion_weights,
                ):
                    rows.append((name, seed, metrics))
    lines = ["config,seed,split,beam,fusion,wer,sub,del,ins"]
    for name, seed, m in rows:
        lines.append(
            f"{name},{seed},{m.split},{m.beam},{m.fusion},{m.wer!r},{m.sub},{m.dele},{m.ins}"
        )
    csv_text = "\n".join(lines) + "\n"
    mean_wer = {}
    for name, _ in HEADLINE_POLICIES:
        for split_name in ("dev", "test"):
            for fusion in ("none", "density_ratio"):
                wers = [
                    m.wer
                    for cfg, _, m in rows
                    if cfg == name and m.split == split_name and m.fusion == fusion
                ]
                mean_wer[(name, split_name, fusion)] = float(np.mean(wers))
    return HeadlineResult(csv_text, mean_wer, time.perf_counter() - started)


# ---------------------------------------------------------------------------
# flat key=value config files


def parse_config_file(path) -> dict:
    """key=value lines; '#' starts a comment; keys are dotted flat names."""
    values = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            stripped = line.split("#", 1)[0].strip()
            if not stripped:
                continue
            if "=" not in stripped:
                raise DomainError(f"{path}:{lineno}: expected key=value")
            key, val = stripped.split("=", 1)
            values[key.strip()] = val.strip()
    return values


def config_value(values: dict, key: str, cast, default):
    if key not in values:
        return default
    raw = values[key]
    if cast is bool:
        return raw.lower() in ("1", "true", "yes", "on")
    return cast(raw)


_get = config_value  # local shorthand


def task_spec_from_config(values: dict, seed: int | None = None) -> data.SyntheticTaskSpec:
    spec = data.SyntheticTaskSpec(
        vocab_size=_get(values, "data.vocab_size", int, 8),
        feature_dim=_get(values, "data.feature_dim", int, 16),
        frames_per_token=(
            _get(values, "data.frames_per_token_min", int, 2),
            _get(values, "data.frames_per_token_max", int, 4),
        ),
        noise_sigma_train=_get(values, "data.noise_sigma_train", float, 0.1),
        noise_sigma_test=_get(values, "data.noise_sigma_test", float, 0.3),
        utterance_count=_get(values, "data.utterance_count", int, 120),
        token_length=(
            _get(values, "data.token_length_min", int, 3),
            _get(values, "data.token_length_max", int, 8),
        ),
        seed=seed if seed is not None else _get(values, "data.seed", int, 0),
        token_prior=_get(values, "data.token_prior", str, "chain"),
        chain_weight=_get(values, "data.chain_weight", float, data.CHAIN_SUCCESSOR_WEIGHT),
    )
    return spec


def policy_from_config(values: dict) -> PerturbPolicy:
    anneal = _get(values, "perturb.anneal_epoch", int, None)
    post_lr = _get(values, "perturb.post_anneal_lr", float, None)
    return PerturbPolicy(
        kind=_get(values, "perturb.kind", str, "none"),
        tau=_get(values, "perturb.tau", float, 0.1),
        teacher_p=_get(values, "perturb.teacher_p", float, 0.9),
        top_k=_get(values, "perturb.top_k", int, 3),
        anneal_epoch=anneal,
        post_anneal_lr=post_lr,
    )


def train_config_from_config(values: dict, seed: int | None = None) -> TrainConfig:
    epochs = _get(values, "train.epochs", int, 30)
    schedule = None
    if any(k.startswith("lr.") for k in values):
        schedule = LrSchedule(
            lr_start=_get(values, "lr.start", float, 1e-3),
            lr_peak=_get(values, "lr.peak", float, 8e-3),
            warmup_epochs=_get(values, "lr.warmup_epochs", int, 4),
            hold_epochs=_get(values, "lr.hold_epochs", int, max(1, epochs // 2)),
            total_epochs=epochs,
            decay_factor=_get(values, "lr.decay_factor", float, 1.0 / math.sqrt(2.0)),
        )
    return TrainConfig(
        trans_layers=_get(values, "model.trans_layers", int, 2),
        trans_hidden=_get(values, "model.trans_hidden", int, 32),
        pred_hidden=_get(values, "model.pred_hidden", int, 32),
        embed_dim=_get(values, "model.embed_dim", int, None),
        joint_dim=_get(values, "model.joint_dim", int, 32),
        schedule=schedule,
        batch_size=_get(values, "train.batch_size", int, 16),
        epochs=epochs,
        policy=policy_from_config(values),
        curriculum=_get(values, "train.curriculum", bool, True),
        seed=seed if seed is not None else _get(values, "train.seed", int, 0),
        checkpoint_every=_get(values, "train.checkpoint_every", int, 1),
        weight_decay=_get(values, "train.weight_decay", float, 0.01),
    )
