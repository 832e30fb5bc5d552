"""Command-line interface.

Subcommands: gen-data, train, train-lm, decode, eval, grad-check.  Every
subcommand accepts --config (flat key=value file) and --seed; flags override
config values.  Contract/domain/refusal errors exit nonzero with the message
on stderr.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from . import data, harness
from .decode import FusionWeights, beam_search_alsd, word_error_rate
from .errors import ContractError, DomainError, OracleError, RefusalError, TrainingError
from .harness import (
    evaluate,
    grad_check,
    load_model,
    metrics_to_csv,
    parse_config_file,
    reports_to_csv,
    task_spec_from_config,
    train,
    train_config_from_config,
)
from .networks import Vocabulary, default_vocabulary
from .tokenlm import LmConfig, lm_train, load_lm, save_lm


def _load_config(args) -> dict:
    if getattr(args, "config", None):
        return parse_config_file(args.config)
    return {}


def _write(path, text):
    with open(path, "w") as fh:
        fh.write(text)


def cmd_gen_data(args) -> int:
    values = _load_config(args)
    spec = task_spec_from_config(values, seed=args.seed)
    paths = data.generate_dataset(spec, args.out, lm_corpus_size=args.lm_corpus_size)
    for split, path in sorted(paths.items()):
        print(f"{split}: {path}")
    return 0


def _auto_lm(utterances, vocab, values, seed):
    corpus = [u.tokens for u in utterances]
    lm_config = LmConfig(
        hidden_size=harness.config_value(values, "lm.hidden_size", int, 16),
        embed_dim=harness.config_value(values, "lm.embed_dim", int, 16),
        epochs=harness.config_value(values, "lm.epochs", int, 15),
        seed=seed,
    )
    lm, _ = lm_train(corpus, vocab, lm_config, corpus_tag="train_transcripts")
    return lm


def cmd_train(args) -> int:
    values = _load_config(args)
    config = train_config_from_config(values, seed=args.seed)
    config.checkpoint_dir = args.out
    utterances = data.load_utterances(os.path.join(args.data, "train.jsonl"))
    meta = data.load_meta(args.data)
    vocab = Vocabulary(meta["vocab_symbols"])
    lm = None
    if config.policy.kind == "scheduled_sampling":
        if args.lm:
            lm = load_lm(args.lm)
        else:
            print("training a token LM on the training transcripts", file=sys.stderr)
            lm = _auto_lm(utterances, vocab, values, config.seed)
            if args.out:
                save_lm(lm, os.path.join(args.out, "perturb_lm.json"))
    os.makedirs(args.out, exist_ok=True)
    params, reports = train(
        config,
        utterances,
        vocab,
        lm=lm,
        dump_perturbations=args.dump_perturbations,
        dump_path=os.path.join(args.out, "perturbations.jsonl"),
    )
    _write(os.path.join(args.out, "epoch_reports.csv"), reports_to_csv(reports))
    for r in reports:
        print(
            f"epoch {r.epoch:3d}  nll/utt {r.mean_neg_log_lik:9.4f}  "
            f"lr {r.learning_rate:.5f}  perturb {'on' if r.perturbation_active else 'off'}"
        )
    print(f"final checkpoint: {os.path.join(args.out, 'final.json')}")
    return 0


def cmd_train_lm(args) -> int:
    values = _load_config(args)
    corpus = data.load_corpus_tokens(args.corpus)
    vocab_size = max((max(seq) for seq in corpus if seq), default=0)
    vocab_size = max(vocab_size, harness.config_value(values, "data.vocab_size", int, vocab_size))
    vocab = default_vocabulary(vocab_size)
    config = LmConfig(
        hidden_size=harness.config_value(values, "lm.hidden_size", int, 16),
        embed_dim=harness.config_value(values, "lm.embed_dim", int, 16),
        epochs=harness.config_value(values, "lm.epochs", int, 15),
        seed=args.seed if args.seed is not None else 0,
    )
    lm, reports = lm_train(corpus, vocab, config, corpus_tag=args.tag)
    save_lm(lm, args.out)
    for r in reports:
        print(f"epoch {r.epoch:3d}  perplexity {r.perplexity:8.4f}  lr {r.learning_rate:.5f}")
    print(f"saved LM: {args.out}")
    return 0


def cmd_decode(args) -> int:
    params = load_model(args.model)
    utterances = data.load_utterances(args.data)
    src_lm = load_lm(args.src_lm) if args.src_lm else None
    ext_lm = load_lm(args.ext_lm) if args.ext_lm else None
    fusion = None
    if src_lm is not None and ext_lm is not None:
        fusion = FusionWeights(mu=args.mu, lam=args.lam, rho=args.rho)
    out = open(args.out, "w") if args.out else sys.stdout
    try:
        for utt in utterances:
            hyps = beam_search_alsd(
                params,
                utt.frames,
                beam_width=args.beam,
                max_alignment_length=args.max_alignment_length,
                fusion=fusion,
                src_lm=src_lm,
                ext_lm=ext_lm,
                fuse_in_beam=args.fuse_in_beam,
            )
            best = hyps[0]
            out.write(
                json.dumps(
                    {
                        "utterance_id": utt.utterance_id,
                        "hypothesis": best.tokens,
                        "rnnt_score": best.rnnt_log_prob,
                        "fused_score": best.fused_score,
                    }
                )
                + "\n"
            )
    finally:
        if args.out:
            out.close()
    return 0


def cmd_eval(args) -> int:
    if args.hyps:
        refs = {u.utterance_id: u.tokens for u in data.load_utterances(args.data)}
        hyp_rows = []
        with open(args.hyps) as fh:
            for line in fh:
                if line.strip():
                    hyp_rows.append(json.loads(line))
        missing = [r["utterance_id"] for r in hyp_rows if r["utterance_id"] not in refs]
        if missing:
            raise ContractError(f"hypotheses for unknown utterances: {missing[:5]}")
        ref_list = [refs[r["utterance_id"]] for r in hyp_rows]
        hyp_list = [[int(t) for t in r["hypothesis"]] for r in hyp_rows]
        result = word_error_rate(ref_list, hyp_list)
        split = os.path.splitext(os.path.basename(args.data))[0]
        rows = [
            harness.MetricsRow(
                split,
                args.beam,
                "none",
                result.rate,
                result.counts.substitutions,
                result.counts.deletions,
                result.counts.insertions,
            )
        ]
    else:
        if not args.model:
            raise DomainError("eval needs either --hyps or --model")
        params = load_model(args.model)
        utterances = data.load_utterances(args.data)
        split = os.path.splitext(os.path.basename(args.data))[0]
        src_lm = load_lm(args.src_lm) if args.src_lm else None
        ext_lm = load_lm(args.ext_lm) if args.ext_lm else None
        weights = FusionWeights(mu=args.mu, lam=args.lam, rho=args.rho)
        rows = evaluate(
            params,
            utterances,
            split,
            beam=args.beam,
            src_lm=src_lm,
            ext_lm=ext_lm,
            weights=weights,
            max_alignment_length=args.max_alignment_length,
        )
    csv_text = metrics_to_csv(rows)
    if args.out:
        _write(args.out, csv_text)
    print(csv_text, end="")
    return 0


def cmd_grad_check(args) -> int:
    report = grad_check(seed=args.seed if args.seed is not None else 0)
    print(report.summary())
    return 0 if report.passed else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tinyrnnt",
        description="desk-scale RNN-transducer toolkit with label-preserving "
        "input perturbation",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="flat key=value config file")
        p.add_argument("--seed", type=int, default=None, help="run seed")

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    common(p)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--lm-corpus-size", type=int, default=0,
                   help="also write a token-only corpus of this many sequences")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a transducer model")
    common(p)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="checkpoint directory")
    p.add_argument("--lm", help="token LM checkpoint for scheduled sampling")
    p.add_argument("--dump-perturbations", type=int, default=0, metavar="N",
                   help="write the first N perturbation records per epoch")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("train-lm", help="train a token language model")
    common(p)
    p.add_argument("--corpus", required=True, help="JSONL corpus (tokens field)")
    p.add_argument("--out", required=True, help="LM checkpoint path")
    p.add_argument("--tag", default="train_transcripts",
                   choices=("train_transcripts", "target_domain"))
    p.set_defaults(func=cmd_train_lm)

    def decode_flags(p):
        p.add_argument("--beam", type=int, default=8)
        p.add_argument("--src-lm", help="source LM checkpoint")
        p.add_argument("--ext-lm", help="external LM checkpoint")
        p.add_argument("--mu", type=float, default=0.0)
        p.add_argument("--lambda", dest="lam", type=float, default=0.0)
        p.add_argument("--rho", type=float, default=0.0)
        p.add_argument("--max-alignment-length", type=int, default=None)

    p = sub.add_parser("decode", help="beam-search decode a split")
    common(p)
    p.add_argument("--model", required=True, help="model checkpoint")
    p.add_argument("--data", required=True, help="JSONL split to decode")
    decode_flags(p)
    p.add_argument("--fuse-in-beam", action="store_true",
                   help="apply fusion during pruning, not just rescoring")
    p.add_argument("--out", help="output JSONL (default stdout)")
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("eval", help="score hypotheses or run a full evaluation")
    common(p)
    p.add_argument("--data", required=True, help="reference JSONL split")
    p.add_argument("--hyps", help="decode output JSONL to score")
    p.add_argument("--model", help="model checkpoint (decodes the split)")
    decode_flags(p)
    p.add_argument("--out", help="metrics CSV path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("grad-check", help="verify analytic gradients")
    common(p)
    p.set_defaults(func=cmd_grad_check)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (DomainError, ContractError, RefusalError, OracleError, TrainingError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
