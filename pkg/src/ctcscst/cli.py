"""Command-line entry point: synth, train, eval, decode, gradcheck."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .alphabet import Alphabet
from .data import load_alphabet, read_split
from .decoder import beam_search
from .errors import CtcScstError
from .gradcheck import run_all
from .model import model_forward_batch
from .synthdata import SynthSpec, generate
from .trainer import TrainConfig, evaluate, load_checkpoint, train

GRADCHECK_TOLERANCE = {"ctc": 1e-6, "sepconv": 1e-5, "model": 1e-5}


def cmd_synth(args) -> int:
    spec = SynthSpec.load(args.spec)
    if args.seed is not None:
        spec = SynthSpec.from_dict({**spec.to_dict(), "seed": args.seed})
    out = generate(spec, args.out)
    print(json.dumps({"out": str(out), "seed": spec.seed, **spec.sizes()}))
    return 0


def cmd_train(args) -> int:
    config = TrainConfig.load(args.config) if args.config else TrainConfig()
    if args.seed is not None:
        config = TrainConfig.from_dict({**config.to_dict(), "seed": args.seed})
    alphabet = load_alphabet(args.data)
    state, history = train(
        read_split(args.data, "train"),
        read_split(args.data, "val"),
        alphabet,
        config,
        out_dir=args.out,
        resume=args.resume,
    )
    summary = {"epochs": state.epoch, "seed": state.seed, "lr": state.lr, "lambda": state.lam}
    if history:
        summary.update(val_loss=history[-1]["val_loss"], val_wer=history[-1]["val_wer"])
    print(json.dumps(summary))
    return 0


def cmd_eval(args) -> int:
    state, config, alphabet = load_checkpoint(args.ckpt)
    if load_alphabet(args.data) != alphabet:
        raise CtcScstError("checkpoint alphabet does not match the dataset")
    records = read_split(args.data, args.split)
    ev = evaluate(
        state.params,
        records,
        alphabet,
        batch_size=config.batch_size,
        beam_width=args.beam_width,
        word_separator=args.word_sep,
    )
    ev.pop("hypotheses")
    print(json.dumps({"split": args.split, "utterances": len(records), "seed": state.seed, **ev}))
    return 0


def _emit_nbest(name, logits, alphabet, args):
    hyps = beam_search(logits, args.beam_width, alphabet)[: args.nbest]
    row = {
        "name": name,
        "nbest": [{"text": " ".join(alphabet.decode(y)), "labels": list(y), "log_prob": s} for y, s in hyps],
    }
    print(json.dumps(row))


def cmd_decode(args) -> int:
    if args.logits:
        if not args.alphabet:
            raise CtcScstError("--logits needs --alphabet")
        alphabet = Alphabet.load(args.alphabet)
        logits = np.load(args.logits)
        batch = logits if logits.ndim == 3 else logits[None]
        for i, lg in enumerate(batch):
            _emit_nbest(f"{Path(args.logits).name}[{i}]", lg, alphabet, args)
        return 0
    if not (args.ckpt and args.data):
        raise CtcScstError("decode needs either --logits/--alphabet or --ckpt/--data")
    state, config, alphabet = load_checkpoint(args.ckpt)
    records = read_split(args.data, args.split)
    for i in range(0, len(records), config.batch_size):
        chunk = records[i : i + config.batch_size]
        logits, _ = model_forward_batch([r.features for r in chunk], state.params)
        for rec, lg in zip(chunk, logits):
            _emit_nbest(rec.name, lg, alphabet, args)
    return 0


def cmd_gradcheck(args) -> int:
    errors = run_all(args.seed)
    ok = True
    for name, err in errors.items():
        tol = GRADCHECK_TOLERANCE[name]
        passed = err < tol
        ok &= passed
        print(f"{name:8s} max rel error {err:.3e}  (tol {tol:.0e})  {'PASS' if passed else 'FAIL'}")
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ctcscst", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic corpus")
    s.add_argument("--spec", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="train on a dataset directory")
    s.add_argument("--config")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--resume")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="corpus-level WER/CER of a checkpoint")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--split", default="test")
    s.add_argument("--beam-width", type=int, default=0, help="0 = best-path decoding")
    s.add_argument("--word-sep", help="symbol separating words; default treats each symbol as a word")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("decode", help="prefix beam search over model outputs or a saved logit array")
    s.add_argument("--ckpt")
    s.add_argument("--data")
    s.add_argument("--split", default="test")
    s.add_argument("--logits", help=".npy file, T x K or N x T x K")
    s.add_argument("--alphabet", help="alphabet JSON for --logits")
    s.add_argument("--beam-width", type=int, default=100)
    s.add_argument("--nbest", type=int, default=1)
    s.set_defaults(func=cmd_decode)

    s = sub.add_parser("gradcheck", help="finite-difference gradient suites")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (CtcScstError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
