"""Command-line entry point: ``narasr <subcommand>``.

Exit codes: 0 success, 2 format error, 3 contract violation,
4 training divergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

from .checkpoint import load_checkpoint, save_checkpoint
from .decoder import DecodeConfig
from .errors import ContractViolation, CtcInfeasibleError, FormatError, TrainingDivergence
from .model import ModelConfig, init_params
from .pipeline import bench, decode_corpus
from .synthetic import (SyntheticSpec, gen_synthetic, load_dataset, load_split, read_token_corpus,
                        save_dataset, write_transcripts)
from .training import MlmConfig, TrainConfig, mlm_pretrain, train
from .vocab import ErrorCounts, edit_distance, load_vocab

log = logging.getLogger("narasr")

EXIT_FORMAT, EXIT_CONTRACT, EXIT_DIVERGED = 2, 3, 4


def _read_json(path) -> dict:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(raw, dict):
        raise FormatError(f"{path}: expected a JSON object")
    return raw


def _build(cls, raw: dict, where: str):
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise FormatError(f"{where}: unknown keys {unknown}")
    return cls(**raw)


def cmd_gen_data(args):
    spec = SyntheticSpec.from_json(args.spec) if args.spec else SyntheticSpec()
    ds = gen_synthetic(spec, args.seed)
    save_dataset(ds, args.out)
    sizes = ", ".join(f"{k}={len(v)}" for k, v in ds.splits.items())
    print(f"wrote {args.out}: V={ds.vocab.V} {sizes} lm_corpus={len(ds.lm_corpus)}")


def cmd_train(args):
    ds = load_dataset(args.data, splits=("train",))
    raw = _read_json(args.config) if args.config else {}
    tcfg = _build(TrainConfig, raw.get("train", {}), f"{args.config}: train")
    if args.init:
        params = load_checkpoint(args.init, expected_vocab=ds.vocab)
    else:
        mraw = dict(raw.get("model", {}))
        mraw.setdefault("vocab_size", ds.vocab.V)
        mraw.setdefault("d_in", ds["train"][0].features.shape[1])
        mcfg = _build(ModelConfig, mraw, f"{args.config}: model")
        params = init_params(mcfg, ds.vocab, seed=raw.get("init_seed", tcfg.seed))
    try:
        ckpt = train(ds["train"], tcfg, params)
    except TrainingDivergence as exc:
        if exc.last_good is not None:
            save_checkpoint(exc.last_good, f"{args.out}.last_good")
            print(f"last good parameters saved to {args.out}.last_good", file=sys.stderr)
        raise
    save_checkpoint(ckpt.params, args.out)
    last = ckpt.history[-1] if ckpt.history else {}
    print(f"trained {tcfg.steps} steps; final loss {last.get('total', float('nan')):.4f}; wrote {args.out}")


def cmd_pretrain_lm(args):
    params = load_checkpoint(args.ckpt)
    corpus = read_token_corpus(args.corpus, params.vocab)
    cfg = _build(MlmConfig, _read_json(args.config), str(args.config)) if args.config else MlmConfig()
    params, curve = mlm_pretrain(params, corpus, cfg)
    save_checkpoint(params, args.out)
    k = max(1, len(curve) // 10)
    if curve:
        print(f"masked-LM loss {sum(curve[:k]) / k:.4f} -> {sum(curve[-k:]) / k:.4f}; wrote {args.out}")


def _decode_config(args) -> DecodeConfig:
    return DecodeConfig(beam_width=args.beam, mu=args.mu)


def cmd_decode(args):
    vocab = load_vocab(Path(args.data) / "vocab.txt")
    params = load_checkpoint(args.ckpt, expected_vocab=vocab)
    utts = load_split(args.data, args.split, vocab)
    res = decode_corpus(params, utts, args.mode, _decode_config(args), workers=args.workers)
    write_transcripts(args.out, [(u.utt_id, h) for u, h in zip(utts, res.hypotheses)], vocab)
    c = res.counts
    print(f"{args.mode}: {len(utts)} utterances, CER {c.rate:.4f} "
          f"(S={c.substitutions} I={c.insertions} D={c.deletions} N={c.reference_length}), "
          f"{1e3 * res.mean_seconds:.3f} ms/utt; wrote {args.out}")


def _read_plain(path) -> dict[str, list[str]]:
    out = {}
    with open(path, encoding="utf-8") as f:
        for n, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            utt_id, sep, text = line.partition("\t")
            if not sep:
                raise FormatError(f"{path}:{n}: expected 'utt_id<TAB>tokens'")
            out[utt_id] = text.split()
    return out


def cmd_eval(args):
    ref = _read_plain(args.ref)
    hyp = _read_plain(args.hyp)
    missing = [k for k in ref if k not in hyp]
    if missing:
        raise FormatError(f"{args.hyp}: no hypothesis for {len(missing)} utterances, e.g. {missing[0]}")
    total = ErrorCounts()
    for k, r in ref.items():
        total = total + edit_distance(r, hyp[k])
    print(f"utterances {len(ref)}  N={total.reference_length}  S={total.substitutions}  "
          f"I={total.insertions}  D={total.deletions}  CER={total.rate:.4f}")


def cmd_bench(args):
    vocab = load_vocab(Path(args.data) / "vocab.txt")
    params = load_checkpoint(args.ckpt, expected_vocab=vocab)
    utts = load_split(args.data, args.split, vocab)
    if args.limit:
        utts = utts[: args.limit]
    report = bench(params, utts, _decode_config(args))
    print(report.table())


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="narasr", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-data", help="generate a synthetic speech dataset")
    s.add_argument("--spec", help="SyntheticSpec JSON (defaults if omitted)")
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("train", help="joint CTC/CE training")
    s.add_argument("--data", required=True)
    s.add_argument("--config", help='JSON with optional "model", "train" and "init_seed" entries')
    s.add_argument("--out", required=True)
    s.add_argument("--init", help="start from this checkpoint instead of a fresh model")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("pretrain-lm", help="masked-LM pretraining of the LM part of a checkpoint")
    s.add_argument("--corpus", required=True)
    s.add_argument("--ckpt", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--config", help="MlmConfig JSON")
    s.set_defaults(func=cmd_pretrain_lm)

    s = sub.add_parser("decode", help="decode a dataset split")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--mode", choices=("greedy", "joint"), required=True)
    s.add_argument("--beam", type=int, default=10)
    s.add_argument("--mu", type=float, default=0.3)
    s.add_argument("--out", required=True)
    s.add_argument("--split", default="test")
    s.add_argument("--workers", type=int, default=1)
    s.set_defaults(func=cmd_decode)

    s = sub.add_parser("eval", help="CER of a hypothesis file against a reference file")
    s.add_argument("--ref", required=True)
    s.add_argument("--hyp", required=True)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("bench", help="greedy vs joint decoding timing")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--beam", type=int, default=10)
    s.add_argument("--mu", type=float, default=0.3)
    s.add_argument("--split", default="test")
    s.add_argument("--limit", type=int, default=0)
    s.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (FormatError, FileNotFoundError) as exc:
        print(f"format error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except (ContractViolation, CtcInfeasibleError) as exc:
        print(f"contract violation: {exc}", file=sys.stderr)
        return EXIT_CONTRACT
    except TrainingDivergence as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    return 0


if __name__ == "__main__":
    sys.exit(main())
