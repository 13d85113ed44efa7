"""Command-line entry point: ``tcembed {distill,encode,bench,gradcheck,selftest}``."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .bench import bench_latency, parse_grid, results_to_csv
from .compression import CompressionPolicy
from .encoder import EncoderConfig, EncoderModel, load_checkpoint, save_checkpoint, toy_tokenize
from .gradcheck import run_all
from .io import CorpusRecord, format_embeddings, load_config, load_corpus
from .losses import LossWeights
from .selftest import run_selftest
from .teacher import SyntheticTeacher, TeacherFusionConfig, load_teacher_file
from .training import (
    StageOrderError,
    TrainingError,
    TrainingExample,
    default_stage_config,
    run_stage,
    write_metrics,
)

CONFIG_ENV = "TCEMBED_CONFIG"

MODEL_KEYS = ("vocab_size", "d_model", "n_layers", "n_heads", "mlp_hidden", "output_dim", "max_seq_len")
STAGE_KEYS = ("steps", "learning_rate", "micro_batch", "grad_accum", "warmup_ratio", "seed",
              "n_negatives", "temperature", "soft_temperature")
WEIGHT_KEYS = ("w_cosine", "w_similarity", "w_cl", "w_soft")
OTHER_KEYS = ("corpus", "checkpoint_in", "checkpoint_out", "metrics_out", "teacher_file", "teacher_seed",
              "teacher_latent_dim", "tokenizer", "init_seed", "length_threshold", "ratio", "query_prefix")
CONFIG_KEYS = frozenset(MODEL_KEYS + STAGE_KEYS + WEIGHT_KEYS + OTHER_KEYS)


class CliError(Exception):
    """Reported as ``error: ...`` with exit status 1."""


def _tokenize(text: str, cfg: dict, vocab_size: int, max_len: int) -> list[int]:
    return toy_tokenize(text, vocab_size, cfg.get("tokenizer", "whitespace"), max_len=max_len).ids


def _examples(records: Sequence[CorpusRecord], cfg: dict, model_cfg: EncoderConfig,
              stage: int) -> list[TrainingExample]:
    def tok(text: str) -> list[int]:
        return _tokenize(text, cfg, model_cfg.vocab_size, model_cfg.max_seq_len)

    prefix = cfg.get("query_prefix") or ""
    out = []
    for rec in records:
        if stage == 4:
            if rec.positive is None or rec.negatives is None:
                raise CliError(f"stage 4 record {rec.id!r} needs 'positive' and 'negatives'")
            out.append(TrainingExample(rec.id, tok(prefix + rec.text), tok(rec.positive),
                                       [tok(n) for n in rec.negatives]))
        else:
            out.append(TrainingExample(rec.id, tok(rec.text)))
    return out


def _teacher_fn(cfg: dict, output_dim: int, vocab_size: int):
    if cfg.get("teacher_file"):
        fusion = TeacherFusionConfig.for_output_dim(output_dim)
        pairs = load_teacher_file(cfg["teacher_file"], fusion)

        def lookup(rid, ids):
            if rid not in pairs:
                raise TrainingError(f"teacher file has no record {rid!r}")
            return pairs[rid].e_fused

        return lookup
    teacher = SyntheticTeacher(TeacherFusionConfig.for_output_dim(output_dim), vocab_size,
                               seed=int(cfg.get("teacher_seed", 0)),
                               latent_dim=cfg.get("teacher_latent_dim", 16))
    return lambda rid, ids: teacher(ids).e_fused


def _stage_config(stage: int, cfg: dict):
    sc = default_stage_config(stage, **{k: cfg[k] for k in STAGE_KEYS if k in cfg})
    if any(k in cfg for k in WEIGHT_KEYS):
        w = sc.loss_weights
        sc = replace(sc, loss_weights=LossWeights(**{k: float(cfg.get(k, getattr(w, k))) for k in WEIGHT_KEYS}))
    if sc.compression is not None and ("length_threshold" in cfg or "ratio" in cfg):
        sc = replace(sc, compression=CompressionPolicy(int(cfg.get("length_threshold", 80)),
                                                       float(cfg.get("ratio", sc.compression.ratio)),
                                                       sc.compression.mode))
    return sc


def cmd_distill(args) -> int:
    config_path = args.config or os.environ.get(CONFIG_ENV)
    if not config_path:
        raise CliError(f"no config given; pass --config or set {CONFIG_ENV}")
    cfg = load_config(config_path)
    unknown = sorted(set(cfg) - CONFIG_KEYS)
    if unknown:
        raise CliError(f"unknown config keys: {', '.join(unknown)}")
    for key in ("corpus", "checkpoint_out"):
        if not cfg.get(key):
            raise CliError(f"config needs '{key}'")

    if args.stage == 1 and not cfg.get("checkpoint_in"):
        model_cfg = EncoderConfig(**{k: cfg[k] for k in MODEL_KEYS if k in cfg})
        model = EncoderModel.init(model_cfg, seed=int(cfg.get("init_seed", 42)))
    else:
        if not cfg.get("checkpoint_in"):
            raise StageOrderError(f"stage {args.stage} needs 'checkpoint_in' from stage {args.stage - 1}")
        model = load_checkpoint(cfg["checkpoint_in"])
        model_cfg = model.config

    examples = _examples(load_corpus(cfg["corpus"]), cfg, model_cfg, args.stage)
    stage = _stage_config(args.stage, cfg)
    result = run_stage(stage, examples, _teacher_fn(cfg, model_cfg.output_dim, model_cfg.vocab_size), model)
    save_checkpoint(result.model, cfg["checkpoint_out"])
    if cfg.get("metrics_out"):
        write_metrics(cfg["metrics_out"], result.metrics)
    final = result.metrics[-1]
    print(f"stage {args.stage}: {stage.steps} steps, final loss {final['total']:.6f}; "
          f"checkpoint written to {cfg['checkpoint_out']}")
    return 0


def cmd_encode(args) -> int:
    model = load_checkpoint(args.checkpoint)
    records = load_corpus(args.input)
    cfg = {"tokenizer": args.tokenizer}
    ids = [_tokenize(args.prefix + r.text, cfg, model.config.vocab_size, model.config.max_seq_len)
           for r in records]
    policy = CompressionPolicy(args.threshold, args.ratio)
    values = model.embed_numpy(ids, policy, ratio=args.ratio) if ids else np.zeros((0, model.config.output_dim))
    text = format_embeddings([r.id for r in records], values)
    if args.output:
        Path(args.output).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return 0


def cmd_bench(args) -> int:
    lengths, ratios = parse_grid(args.grid)
    if args.checkpoint:
        model = load_checkpoint(args.checkpoint)
    else:
        model = EncoderModel.init(EncoderConfig(), seed=args.seed, with_compressor=True)
    results = bench_latency(model, lengths, ratios, batch=args.batch, reps=args.reps,
                            warmup=args.warmup, seed=args.seed, length_threshold=args.threshold)
    text = results_to_csv(results)
    if args.output:
        Path(args.output).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return 0


def cmd_gradcheck(args) -> int:
    results = run_all(args.configs, seed=args.seed)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name:<18} rel_err={r.max_rel_error:.2e} tol={r.tolerance:.0e}")
    failed = sum(not r.passed for r in results)
    print(f"{len(results) - failed}/{len(results)} checks passed")
    return 1 if failed else 0


def cmd_selftest(args) -> int:
    results = run_selftest()
    for name, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
    return 0 if all(ok for _, ok, _ in results) else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tcembed", description="Token-compression embedding toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("distill", help="run one training stage")
    p.add_argument("--stage", type=int, choices=(1, 2, 3, 4), required=True)
    p.add_argument("--config", help=f"key = value config file (default: ${CONFIG_ENV})")
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("encode", help="embed a corpus file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True, help="corpus JSONL with id/text fields")
    p.add_argument("--ratio", type=float, default=0.33)
    p.add_argument("--threshold", type=int, default=80, help="length threshold for compression")
    p.add_argument("--tokenizer", choices=("whitespace", "byte"), default="whitespace")
    p.add_argument("--prefix", default="", help="string prepended to every text (e.g. a query instruction)")
    p.add_argument("--output", help="output JSONL (default: stdout)")
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("bench", help="latency over input lengths and compression ratios")
    p.add_argument("--checkpoint", help="model to time (default: freshly initialised toy model)")
    p.add_argument("--grid", default="default", help='e.g. "lengths=128,512;ratios=1.0,0.1"')
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--reps", type=int, default=50)
    p.add_argument("--warmup", type=int, default=3)
    p.add_argument("--threshold", type=int, default=80)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--output", help="CSV path (default: stdout)")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("gradcheck", help="finite-difference checks of losses and encoder")
    p.add_argument("--configs", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("selftest", help="fast oracle checks")
    p.set_defaults(func=cmd_selftest)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits with status 2 on usage errors
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (CliError, TrainingError, ValueError, FileNotFoundError, ArithmeticError) as exc:
        kind = "sequencing error" if isinstance(exc, StageOrderError) else "error"
        print(f"tcembed: {kind}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
