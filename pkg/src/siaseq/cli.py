"""Command-line entry point: data generation, staged training, generation,
evaluation, sweeps, and the full three-stage run.

Every subcommand takes --out and writes all of its artifacts (including the
fully-resolved config it actually ran with) under that directory. Flag
overrides always win over config-file values. Failures print one
machine-parsable line `error:<category>: <message>` and exit 3 (usage errors
exit 2, per argparse).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .data import (
    GeneratorSpec, Vocabulary, build_vocab, generate_corpus, load_jsonl,
    save_jsonl,
)
from .decode import DecodeConfig, batch_generate
from .errors import (
    CheckpointError, ConfigError, DataError, NumericError, ShapeError,
    SiaSeqError,
)
from .losses import SIAConfig
from .metrics import MetricsReport, build_rep_ref
from .model import load_model, save_model, SeqModel
from .pipeline import (
    PipelineConfig, TrainConfig, evaluate_model, prepare_data,
    resolve_model_config, run_pas, sweep, train_stage,
)

_ERROR_CATEGORIES = {
    ConfigError: "config",
    DataError: "data",
    CheckpointError: "checkpoint",
    ShapeError: "shape",
    NumericError: "numeric",
}


def _category(err: Exception) -> str:
    for cls, name in _ERROR_CATEGORIES.items():
        if isinstance(err, cls):
            return name
    return "internal"


def _load_pipeline_config(args) -> PipelineConfig:
    if getattr(args, "config", None):
        cfg = PipelineConfig.from_json_file(args.config)
    else:
        cfg = PipelineConfig()
    return _apply_overrides(cfg, args)


def _apply_overrides(cfg: PipelineConfig, args) -> PipelineConfig:
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "skip_adapt", False):
        cfg.skip_adapt = True
    if getattr(args, "loss", None):
        cfg.finetune = dataclasses.replace(cfg.finetune, loss=args.loss)
    sia = cfg.finetune.sia
    if getattr(args, "alpha", None) is not None:
        sia = dataclasses.replace(sia, alpha=args.alpha)
    if getattr(args, "beta", None) is not None:
        sia = dataclasses.replace(sia, beta=args.beta)
    cfg.finetune = dataclasses.replace(cfg.finetune, sia=sia)
    decode = cfg.decode
    if getattr(args, "beam_size", None) is not None:
        decode = dataclasses.replace(decode, beam_size=args.beam_size)
    if getattr(args, "temperature", None) is not None:
        decode = dataclasses.replace(decode, temperature=args.temperature)
    if getattr(args, "length_norm_lambda", None) is not None:
        decode = dataclasses.replace(decode, length_norm_lambda=args.length_norm_lambda)
    cfg.decode = decode
    cfg.validate()
    return cfg


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, indent=2, ensure_ascii=False),
                    encoding="utf-8")


# -- subcommands -----------------------------------------------------------------


def _cmd_gen_data(args) -> int:
    out = _out_dir(args)
    payload = {}
    if args.config:
        try:
            payload = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except OSError as e:
            raise ConfigError(f"cannot read config file {args.config}: {e}") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {args.config} is not valid JSON: {e}") from e
    unknown = set(payload) - {"generator", "splits", "min_freq"}
    if unknown:
        raise ConfigError(f"unknown gen-data config keys: {sorted(unknown)}")
    spec = GeneratorSpec.from_dict(payload.get("generator", {}))
    if args.seed is not None:
        spec = dataclasses.replace(spec, seed=args.seed)
    splits = payload.get("splits", {"train": 2000, "valid": 200, "test": 200})
    if set(splits) != {"train", "valid", "test"}:
        raise ConfigError("splits must define train, valid and test sizes")
    min_freq = int(payload.get("min_freq", 3))
    total = splits["train"] + splits["valid"] + splits["test"]
    if spec.n_examples < total:
        spec = dataclasses.replace(spec, n_examples=total)

    corpus = generate_corpus(spec)
    train = corpus[:splits["train"]]
    valid = corpus[splits["train"]:splits["train"] + splits["valid"]]
    test = corpus[splits["train"] + splits["valid"]:total]
    save_jsonl(train, out / "train.jsonl")
    save_jsonl(valid, out / "valid.jsonl")
    save_jsonl(test, out / "test.jsonl")
    vocab = build_vocab([t for ex in train for t in (ex.body, ex.original, ex.edited)],
                        min_freq=min_freq)
    vocab.save(out / "vocab.json")
    _write_json(out / "resolved_config.json",
                {"generator": spec.to_dict(), "splits": splits,
                 "min_freq": min_freq})
    print(f"wrote {len(train)}/{len(valid)}/{len(test)} examples and a "
          f"{len(vocab)}-token vocabulary to {out}")
    return 0


def _cmd_stage(args, stage: str) -> int:
    out = _out_dir(args)
    cfg = _load_pipeline_config(args)
    if args.data:
        cfg.data_dir = args.data
    train, valid, _test, vocab = prepare_data(cfg)
    vocab.save(out / "vocab.json")

    stage_cfg = dataclasses.replace(getattr(cfg, stage), seed=cfg.seed)
    if args.checkpoint_in:
        model = load_model(args.checkpoint_in)
    else:
        if stage != "pretrain":
            raise ConfigError(f"stage {stage} needs --checkpoint-in (chain from the previous stage)")
        model = SeqModel(resolve_model_config(cfg, vocab))
    stage_cfg = dataclasses.replace(stage_cfg, checkpoint_out=str(out / f"{stage}.npz"),
                                    checkpoint_in=args.checkpoint_in)
    record = train_stage(stage_cfg, model, train, valid, vocab)
    _write_json(out / "resolved_config.json", cfg.to_dict())
    _write_json(out / f"{stage}_record.json", record.to_dict())
    print(f"{stage}: {record.steps_run} steps, final loss {record.final_train_loss:.4f}, "
          f"best val ppl {min(p for _, p in record.val_perplexities):.4f}")
    return 0


def _cmd_generate(args) -> int:
    out = _out_dir(args)
    model = load_model(args.model)
    vocab = Vocabulary.load(args.vocab)
    examples = load_jsonl(args.data)
    decode = DecodeConfig(
        beam_size=args.beam_size if args.beam_size is not None else 10,
        temperature=args.temperature if args.temperature is not None else 1.0,
        length_norm_lambda=(args.length_norm_lambda
                            if args.length_norm_lambda is not None else 0.6),
        max_len=args.max_len, min_len=1)
    decode.validate()
    generated = batch_generate(model, examples, vocab, decode)
    with (out / "generations.jsonl").open("w", encoding="utf-8") as f:
        for ex, gen in zip(examples, generated):
            f.write(json.dumps({"body": ex.body, "original": ex.original,
                                "edited": ex.edited, "generated": gen},
                               ensure_ascii=False))
            f.write("\n")
    _write_json(out / "resolved_config.json",
                {"model": str(args.model), "data": str(args.data),
                 "decode": decode.to_dict()})
    print(f"wrote {len(generated)} generations to {out / 'generations.jsonl'}")
    return 0


def _cmd_evaluate(args) -> int:
    out = _out_dir(args)
    model = load_model(args.model)
    vocab = Vocabulary.load(args.vocab)
    test = load_jsonl(args.data)
    train = load_jsonl(args.train_data)
    rep_ref = build_rep_ref([list(ex.edited) for ex in train])
    decode = DecodeConfig(
        beam_size=args.beam_size if args.beam_size is not None else 10,
        temperature=args.temperature if args.temperature is not None else 1.0,
        length_norm_lambda=(args.length_norm_lambda
                            if args.length_norm_lambda is not None else 0.6),
        max_len=args.max_len, min_len=1)
    decode.validate()
    report, generated = evaluate_model(model, test, vocab, decode, rep_ref)
    (out / "metrics.json").write_text(report.to_json(), encoding="utf-8")
    (out / "metrics.csv").write_text(
        MetricsReport.csv_header() + "\n" + report.csv_row() + "\n",
        encoding="utf-8")
    with (out / "generations.jsonl").open("w", encoding="utf-8") as f:
        for ex, gen in zip(test, generated):
            f.write(json.dumps({"edited": ex.edited, "generated": gen},
                               ensure_ascii=False))
            f.write("\n")
    _write_json(out / "resolved_config.json",
                {"model": str(args.model), "data": str(args.data),
                 "train_data": str(args.train_data), "decode": decode.to_dict()})
    print(report.to_json())
    return 0


def _cmd_run_pas(args) -> int:
    out = _out_dir(args)
    cfg = _load_pipeline_config(args)
    if args.data:
        cfg.data_dir = args.data
    result = run_pas(cfg, out)
    print((out / "metrics.json").read_text(encoding="utf-8").strip())
    return 0


def _parse_grid(param: str, raw: str):
    try:
        if param == "joint":
            return [tuple(float(x) for x in pair.split(":"))
                    for pair in raw.split(",") if pair]
        return [float(x) for x in raw.split(",") if x]
    except ValueError as e:
        raise ConfigError(f"cannot parse grid {raw!r}: {e}") from e


def _cmd_sweep(args) -> int:
    out = _out_dir(args)
    cfg = _load_pipeline_config(args)
    if args.data:
        cfg.data_dir = args.data
    grid = _parse_grid(args.param, args.grid)
    if args.param == "joint" and any(len(p) != 2 for p in grid):
        raise ConfigError("joint grid points must be alpha:beta pairs")
    rows = sweep(cfg, args.param, grid, out)
    print(f"swept {len(rows)} {args.param} points; wrote {out / 'sweep.csv'}")
    return 0


# -- argument parsing ----------------------------------------------------------


def _add_common_overrides(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--beta", type=float, default=None)
    p.add_argument("--loss", choices=["mle", "sia"], default=None)
    p.add_argument("--skip-adapt", action="store_true")
    p.add_argument("--beam-size", type=int, default=None)
    p.add_argument("--temperature", type=float, default=None)
    p.add_argument("--length-norm-lambda", type=float, default=None)


def _add_decode_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--beam-size", type=int, default=None)
    p.add_argument("--temperature", type=float, default=None)
    p.add_argument("--length-norm-lambda", type=float, default=None)
    p.add_argument("--max-len", type=int, default=32)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="siaseq",
        description="Headline-editing seq2seq: staged training with an "
                    "importance-aware loss, beam decoding, repetition metrics.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic corpus + vocabulary")
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_gen_data)

    for stage in ("pretrain", "adapt", "finetune"):
        p = sub.add_parser(stage, help=f"run the {stage} training stage")
        p.add_argument("--config", default=None)
        p.add_argument("--data", default=None, help="gen-data output directory")
        p.add_argument("--checkpoint-in", default=None)
        p.add_argument("--out", required=True)
        _add_common_overrides(p)
        p.set_defaults(func=lambda a, s=stage: _cmd_stage(a, s))

    p = sub.add_parser("generate", help="beam-decode headlines for a corpus")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--out", required=True)
    _add_decode_flags(p)
    p.set_defaults(func=_cmd_generate)

    p = sub.add_parser("evaluate", help="score a model on a test corpus")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--train-data", required=True,
                   help="training targets; builds the repeated-4-gram set")
    p.add_argument("--out", required=True)
    _add_decode_flags(p)
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("sweep", help="grid of fine-tunes from one adapted checkpoint")
    p.add_argument("--config", default=None)
    p.add_argument("--data", default=None)
    p.add_argument("--param", choices=["alpha", "beta", "joint"], required=True)
    p.add_argument("--grid", required=True,
                   help="comma-separated values, or alpha:beta pairs for joint")
    p.add_argument("--out", required=True)
    _add_common_overrides(p)
    p.set_defaults(func=_cmd_sweep)

    p = sub.add_parser("run-pas", help="full pretrain/adapt/finetune run + metrics")
    p.add_argument("--config", default=None)
    p.add_argument("--data", default=None)
    p.add_argument("--out", required=True)
    _add_common_overrides(p)
    p.set_defaults(func=_cmd_run_pas)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if e.code is not None else 0
    try:
        return args.func(args)
    except SiaSeqError as e:
        print(f"error:{_category(e)}: {e}", file=sys.stderr)
        return 3
    except Exception as e:  # pragma: no cover - defensive
        print(f"error:internal: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
