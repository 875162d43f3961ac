"""Command-line pipeline: corpus generation, two-stage training, synthesis,
evaluation, and self-tests. Exit codes: 0 ok, 2 validation error, 3 divergence."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import nn
from .audio import AudioConfig
from .config import TrainConfig, build_settings, dataclass_from_flat, parse_set_overrides
from .corpus import CorpusSpec, gen_corpus
from .errors import DivergenceError, ValidationError
from .lm import LmConfig, SamplerConfig
from .vqvae import VqvaeConfig

GRADCHECK_TOL = 1e-4


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--preset", default="toy", help="toy | small | default")
    p.add_argument("--config", default=None, help="key = value settings file")
    p.add_argument("--set", dest="overrides", action="append", default=[],
                   metavar="KEY=VALUE", help="override one setting (repeatable)")
    p.add_argument("--seed", type=int, default=None)


def _settings(args) -> dict[str, str]:
    settings = build_settings(args.preset, args.config, parse_set_overrides(args.overrides))
    if args.seed is not None:
        settings["train.seed"] = str(args.seed)
        settings["corpus.seed"] = str(args.seed)
    return settings


def _train_cfg(settings: dict[str, str], stage: str) -> TrainConfig:
    forced: dict = {"stage": stage}
    stage_key = f"train.{stage}_iterations"
    if "train.iterations" not in settings and stage_key in settings:
        forced["iterations"] = int(settings[stage_key])
    return dataclass_from_flat(TrainConfig, "train", settings, **forced)


def _cmd_gen_corpus(args) -> int:
    settings = _settings(args)
    audio = dataclass_from_flat(AudioConfig, "audio", settings)
    spec = dataclass_from_flat(CorpusSpec, "corpus", settings)
    manifest = gen_corpus(spec, audio, args.out_dir)
    print(f"wrote {len(manifest['clips'])} clips to {args.out_dir} "
          f"({manifest['fingerprint']})")
    return 0


def _cmd_train_vqvae(args) -> int:
    from .training import train_vqvae

    settings = _settings(args)
    audio = dataclass_from_flat(AudioConfig, "audio", settings)
    vq_cfg = dataclass_from_flat(VqvaeConfig, "vqvae", settings)
    cfg = _train_cfg(settings, "vqvae")
    metrics = train_vqvae(args.corpus, args.out_dir, cfg, audio, vq_cfg)
    print(json.dumps(metrics, indent=1, sort_keys=True))
    return 0


def _cmd_extract_codes(args) -> int:
    from .pipeline import extract_codes

    manifest = extract_codes(args.corpus, args.vq, args.out_dir)
    print(f"extracted codes for {len(manifest['clips'])} clips to {args.out_dir}")
    return 0


def _cmd_train_lm(args) -> int:
    from .training import train_lm

    settings = _settings(args)
    lm_cfg = dataclass_from_flat(LmConfig, "lm", settings)
    cfg = _train_cfg(settings, "lm")
    metrics = train_lm(args.codes, args.out_dir, cfg, lm_cfg)
    print(json.dumps(metrics, indent=1, sort_keys=True))
    return 0


def _cmd_synthesize(args) -> int:
    from .pipeline import synthesize

    sampler = SamplerConfig(nucleus_p=args.nucleus_p, temperature=args.temperature,
                            seed=args.seed if args.seed is not None else 0,
                            max_top_len=args.max_top_len)
    prev = nn.default_dtype()
    nn.set_default_dtype(np.float32)
    try:
        info = synthesize(args.lyrics, args.lexicon, args.vq, args.lm, sampler,
                          args.out, gl_iters=args.gl_iters,
                          window=args.window, hop=args.hop)
    finally:
        nn.set_default_dtype(prev)
    print(json.dumps(info, indent=1, sort_keys=True))
    return 0


def _cmd_evaluate(args) -> int:
    from .evaluation import evaluate

    prev = nn.default_dtype()
    nn.set_default_dtype(np.float32)
    try:
        report = evaluate(args.vq, args.lm, args.corpus)
    finally:
        nn.set_default_dtype(prev)
    payload = json.dumps(report.as_dict(), indent=1, sort_keys=True)
    if args.out:
        Path(args.out).write_text(payload + "\n", encoding="utf-8")
    print(payload)
    return 0


def _cmd_gradcheck(args) -> int:
    from .checks import run_gradient_checks

    results = run_gradient_checks(include_full=not args.quick)
    failed = False
    for name, err in results:
        status = "ok" if err < GRADCHECK_TOL else "FAIL"
        if err >= GRADCHECK_TOL:
            failed = True
        print(f"{status:4s} {name}: max rel err {err:.3e}")
    if failed:
        raise ValidationError(f"gradient checks above tolerance {GRADCHECK_TOL}")
    return 0


def _cmd_ctc_selftest(args) -> int:
    from .checks import ctc_selftest

    result = ctc_selftest(n_cases=args.cases, seed=args.seed or 0)
    print(f"{result['cases']} cases, max abs err {result['max_abs_err']:.3e} "
          f"(tol {result['tol']:g})")
    if not result["passed"]:
        raise ValidationError("CTC selftest exceeded tolerance")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vqsing",
                                     description="score-free singing synthesis pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-corpus", help="generate the synthetic sung corpus")
    _add_common(p)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(fn=_cmd_gen_corpus)

    p = sub.add_parser("train-vqvae", help="train the mel codec")
    _add_common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(fn=_cmd_train_vqvae)

    p = sub.add_parser("extract-codes", help="dump frozen codec codes for LM training")
    _add_common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--vq", required=True)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(fn=_cmd_extract_codes)

    p = sub.add_parser("train-lm", help="train the code language model")
    _add_common(p)
    p.add_argument("--codes", required=True)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(fn=_cmd_train_lm)

    p = sub.add_parser("synthesize", help="lyrics to WAV")
    p.add_argument("--lyrics", required=True, help="lyric text; '|' separates sections")
    p.add_argument("--lexicon", required=True)
    p.add_argument("--vq", required=True)
    p.add_argument("--lm", required=True)
    p.add_argument("--out", required=True, help="output WAV path")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--nucleus-p", type=float, default=0.9)
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--max-top-len", type=int, default=128)
    p.add_argument("--window", type=int, default=None)
    p.add_argument("--hop", type=int, default=None)
    p.add_argument("--gl-iters", type=int, default=60)
    p.set_defaults(fn=_cmd_synthesize)

    p = sub.add_parser("evaluate", help="score checkpoints against a corpus")
    p.add_argument("--corpus", required=True)
    p.add_argument("--vq", required=True)
    p.add_argument("--lm", required=True)
    p.add_argument("--out", default=None, help="also write the report JSON here")
    p.set_defaults(fn=_cmd_evaluate)

    p = sub.add_parser("gradcheck", help="finite-difference checks for every layer")
    p.add_argument("--quick", action="store_true", help="skip the full-objective check")
    p.set_defaults(fn=_cmd_gradcheck)

    p = sub.add_parser("ctc-selftest", help="CTC forward vs brute-force enumeration")
    p.add_argument("--cases", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=_cmd_ctc_selftest)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except DivergenceError as exc:
        print(f"divergence: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
