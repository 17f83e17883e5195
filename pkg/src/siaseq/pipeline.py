"""Three-stage training orchestration: pretrain the decoder as a causal LM on
bodies, adapt the encoder-decoder on body -> edited headline, then fine-tune
on body <sep> original -> edited headline with either MLE or the
importance-aware objective. Checkpoints chain between stages; every stage
early-stops on validation perplexity and restores its best parameters.

All randomness (corpus, init, batch order) is seed-driven, so a config fully
determines the metrics it produces.
"""

from __future__ import annotations

import dataclasses
import json
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import metrics as metrics_mod
from .data import (
    Example, GeneratorSpec, Vocabulary, build_vocab, generate_corpus,
    load_jsonl, make_batches, save_jsonl,
)
from .decode import DecodeConfig, batch_generate
from .errors import CheckpointError, ConfigError, DataError
from .losses import SIAConfig, mle_loss, sia_loss
from .metrics import MetricsReport, RepRefSet, build_rep_ref
from .model import ModelConfig, SeqModel, load_model, save_model
from .numcore import Tape

STAGE_TASKS = {"pretrain": "pretrain", "adapt": "adapt", "finetune": "edit"}


def thread_cap() -> int:
    """Internal parallelism cap from SIA_SEQ_THREADS (default 1, for
    deterministic sequential execution)."""
    raw = os.environ.get("SIA_SEQ_THREADS", "1")
    try:
        n = int(raw)
    except ValueError as e:
        raise ConfigError(f"SIA_SEQ_THREADS must be an integer, got {raw!r}") from e
    if n < 1:
        raise ConfigError(f"SIA_SEQ_THREADS must be >= 1, got {n}")
    return n


class Adam:
    """Adaptive-moment gradient descent with a fixed learning rate."""

    def __init__(self, params: dict, lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        correct1 = 1.0 - b1 ** self.t
        correct2 = 1.0 - b2 ** self.t
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            self.m[k] = b1 * self.m[k] + (1.0 - b1) * g
            self.v[k] = b2 * self.v[k] + (1.0 - b2) * g * g
            m_hat = self.m[k] / correct1
            v_hat = self.v[k] / correct2
            p.data = p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


@dataclass
class TrainConfig:
    stage: str
    loss: str = "mle"
    sia: SIAConfig = field(default_factory=SIAConfig)
    lr: float = 2e-3
    batch_size: int = 16
    max_steps: int = 300
    eval_every: int = 50
    patience: int = 3
    seed: int = 1
    max_src_len: int = 256
    max_tgt_len: int = 32
    checkpoint_in: str | None = None
    checkpoint_out: str | None = None

    def validate(self) -> None:
        if self.stage not in STAGE_TASKS:
            raise ConfigError(f"unknown stage {self.stage!r}")
        if self.loss not in ("mle", "sia"):
            raise ConfigError(f"loss must be 'mle' or 'sia', got {self.loss!r}")
        if self.stage in ("pretrain", "adapt") and self.loss != "mle":
            raise ConfigError(f"stage {self.stage!r} trains with MLE only")
        if self.lr <= 0 or self.batch_size < 1 or self.max_steps < 1:
            raise ConfigError("lr, batch_size and max_steps must be positive")
        if self.eval_every < 1 or self.patience < 1:
            raise ConfigError("eval_every and patience must be >= 1")
        self.sia.validate()

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["sia"] = self.sia.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown TrainConfig keys: {sorted(unknown)}")
        kwargs = dict(d)
        if "sia" in kwargs and isinstance(kwargs["sia"], dict):
            kwargs["sia"] = SIAConfig.from_dict(kwargs["sia"])
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg


@dataclass
class RunRecord:
    stage: str
    config: dict
    seed: int
    steps_run: int
    first_train_loss: float
    final_train_loss: float
    val_perplexities: list  # [[step, ppl], ...], step 0 is the pre-training baseline
    wall_clock_sec: float
    metrics: dict | None = None

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _loss_fn(cfg: TrainConfig):
    if cfg.loss == "sia":
        return lambda logp, tgt, mask: sia_loss(logp, tgt, mask, cfg.sia)
    return mle_loss


def train_stage(cfg: TrainConfig, model: SeqModel, train_examples,
                valid_examples, vocab: Vocabulary) -> RunRecord:
    """Train `model` in place; early-stop on validation perplexity and leave
    the best-validation parameters loaded."""
    cfg.validate()
    if not train_examples or not valid_examples:
        raise DataError(f"stage {cfg.stage} needs non-empty train and valid sets")
    task = STAGE_TASKS[cfg.stage]
    loss_fn = _loss_fn(cfg)
    started = time.perf_counter()

    def val_ppl() -> float:
        return metrics_mod.perplexity(model, valid_examples, vocab, task=task,
                                      batch_size=cfg.batch_size,
                                      max_src_len=cfg.max_src_len,
                                      max_tgt_len=cfg.max_tgt_len)

    optimizer = Adam(model.params, cfg.lr)
    best_ppl = val_ppl()
    best_state = model.state_snapshot()
    history = [[0, best_ppl]]
    bad_evals = 0
    first_loss = None
    last_loss = None

    epoch = 0
    batches = make_batches(train_examples, vocab, task, cfg.batch_size,
                           max_src_len=cfg.max_src_len,
                           max_tgt_len=cfg.max_tgt_len, seed=cfg.seed)
    cursor = 0
    steps_run = 0
    for step in range(1, cfg.max_steps + 1):
        if cursor >= len(batches):
            epoch += 1
            batches = make_batches(train_examples, vocab, task, cfg.batch_size,
                                   max_src_len=cfg.max_src_len,
                                   max_tgt_len=cfg.max_tgt_len,
                                   seed=cfg.seed + epoch)
            cursor = 0
        batch = batches[cursor]
        cursor += 1

        with Tape() as tape:
            logp = model.forward(batch, train=True)
            out = loss_fn(logp, batch.decoder_target_ids, batch.target_mask)
            tape.backward(out.loss)
        optimizer.step()
        model.zero_grad()

        loss_val = out.loss.item()
        if first_loss is None:
            first_loss = loss_val
        last_loss = loss_val
        steps_run = step

        # the final step always competes for best-validation, whatever
        # eval_every divides
        if step % cfg.eval_every == 0 or step == cfg.max_steps:
            ppl = val_ppl()
            history.append([step, ppl])
            if ppl < best_ppl:
                best_ppl = ppl
                best_state = model.state_snapshot()
                bad_evals = 0
            else:
                bad_evals += 1
                if bad_evals >= cfg.patience:
                    break

    model.load_snapshot(best_state)
    if cfg.checkpoint_out:
        save_model(model, cfg.checkpoint_out)
    return RunRecord(
        stage=cfg.stage, config=cfg.to_dict(), seed=cfg.seed,
        steps_run=steps_run, first_train_loss=first_loss,
        final_train_loss=last_loss, val_perplexities=history,
        wall_clock_sec=time.perf_counter() - started,
    )


# -- whole-experiment configuration -------------------------------------------


def _default_stage(stage: str) -> TrainConfig:
    if stage == "pretrain":
        return TrainConfig(stage="pretrain", lr=3e-3, max_steps=250,
                           eval_every=50, patience=2, max_tgt_len=96)
    if stage == "adapt":
        return TrainConfig(stage="adapt", lr=3e-3, max_steps=400,
                           eval_every=50, patience=3)
    return TrainConfig(stage="finetune", loss="sia",
                       sia=SIAConfig(alpha=0.2, beta=40.0), lr=2e-3,
                       max_steps=300, eval_every=50, patience=3)


@dataclass
class PipelineConfig:
    seed: int = 1
    data_dir: str | None = None
    generator: GeneratorSpec = field(default_factory=GeneratorSpec)
    splits: tuple[int, int, int] = (2000, 200, 200)
    min_freq: int = 3
    model: dict = field(default_factory=dict)  # ModelConfig overrides
    pretrain: TrainConfig = field(default_factory=lambda: _default_stage("pretrain"))
    adapt: TrainConfig = field(default_factory=lambda: _default_stage("adapt"))
    finetune: TrainConfig = field(default_factory=lambda: _default_stage("finetune"))
    decode: DecodeConfig = field(default_factory=DecodeConfig)
    skip_adapt: bool = False

    def validate(self) -> None:
        if self.data_dir is None:
            self.generator.validate()
            if sum(self.splits) > self.generator.n_examples:
                raise ConfigError(
                    f"splits {self.splits} need more examples than the generator's "
                    f"{self.generator.n_examples}")
        if any(s < 1 for s in self.splits):
            raise ConfigError("every split must have at least one example")
        if self.min_freq < 1:
            raise ConfigError("min_freq must be >= 1")
        for stage_cfg, stage in ((self.pretrain, "pretrain"), (self.adapt, "adapt"),
                                 (self.finetune, "finetune")):
            if stage_cfg.stage != stage:
                raise ConfigError(f"{stage} section declares stage {stage_cfg.stage!r}")
            stage_cfg.validate()
        self.decode.validate()

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "data_dir": self.data_dir,
            "generator": self.generator.to_dict(),
            "splits": list(self.splits),
            "min_freq": self.min_freq,
            "model": dict(self.model),
            "pretrain": self.pretrain.to_dict(),
            "adapt": self.adapt.to_dict(),
            "finetune": self.finetune.to_dict(),
            "decode": self.decode.to_dict(),
            "skip_adapt": self.skip_adapt,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown pipeline config keys: {sorted(unknown)}")
        kwargs = dict(d)
        if "generator" in kwargs:
            kwargs["generator"] = GeneratorSpec.from_dict(kwargs["generator"])
        if "splits" in kwargs:
            kwargs["splits"] = tuple(kwargs["splits"])
        for stage in ("pretrain", "adapt", "finetune"):
            if stage in kwargs and isinstance(kwargs[stage], dict):
                section = dict(kwargs[stage])
                section.setdefault("stage", stage)
                base = _default_stage(stage).to_dict()
                base.update(section)
                kwargs[stage] = TrainConfig.from_dict(base)
        if "decode" in kwargs and isinstance(kwargs["decode"], dict):
            kwargs["decode"] = DecodeConfig.from_dict(kwargs["decode"])
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg

    @classmethod
    def from_json_file(cls, path) -> "PipelineConfig":
        try:
            payload = json.loads(Path(path).read_text(encoding="utf-8"))
        except OSError as e:
            raise ConfigError(f"cannot read config file {path}: {e}") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {path} is not valid JSON: {e}") from e
        if not isinstance(payload, dict):
            raise ConfigError(f"config file {path} must hold a JSON object")
        return cls.from_dict(payload)


def prepare_data(cfg: PipelineConfig) -> tuple[list, list, list, Vocabulary]:
    """Load train/valid/test from data_dir, or generate and split the
    synthetic corpus. The vocabulary is always built from the train split."""
    if cfg.data_dir is not None:
        root = Path(cfg.data_dir)
        train = load_jsonl(root / "train.jsonl")
        valid = load_jsonl(root / "valid.jsonl")
        test = load_jsonl(root / "test.jsonl")
        vocab_path = root / "vocab.json"
        if vocab_path.exists():
            vocab = Vocabulary.load(vocab_path)
        else:
            vocab = build_vocab(_vocab_texts(train), min_freq=cfg.min_freq)
        return train, valid, test, vocab
    n_train, n_valid, n_test = cfg.splits
    corpus = generate_corpus(cfg.generator)
    if len(corpus) < n_train + n_valid + n_test:
        raise ConfigError("generator produced fewer examples than the splits need")
    train = corpus[:n_train]
    valid = corpus[n_train:n_train + n_valid]
    test = corpus[n_train + n_valid:n_train + n_valid + n_test]
    vocab = build_vocab(_vocab_texts(train), min_freq=cfg.min_freq)
    return train, valid, test, vocab


def _vocab_texts(examples) -> list[str]:
    texts = []
    for ex in examples:
        texts.extend((ex.body, ex.original, ex.edited))
    return texts


def resolve_model_config(cfg: PipelineConfig, vocab: Vocabulary) -> ModelConfig:
    max_pos = max(cfg.pretrain.max_tgt_len, cfg.adapt.max_tgt_len,
                  cfg.finetune.max_tgt_len,
                  cfg.adapt.max_src_len, cfg.finetune.max_src_len) + 2
    fields = {"vocab_size": len(vocab), "max_positions": max_pos,
              "seed": cfg.seed}
    fields.update(cfg.model)
    return ModelConfig.from_dict(fields)


def evaluate_model(model: SeqModel, test_examples, vocab: Vocabulary,
                   decode_cfg: DecodeConfig, rep_ref: RepRefSet,
                   max_src_len: int = 256, max_tgt_len: int = 32,
                   batch_size: int = 32) -> tuple[MetricsReport, list[str]]:
    """Beam-decode the test set and score all six metrics (character-level
    tokens, same tokenization as training)."""
    generated = batch_generate(model, test_examples, vocab, decode_cfg,
                               task="edit", max_src_len=max_src_len)
    cands = [list(g) for g in generated]
    refs = [list(ex.edited) for ex in test_examples]
    report = MetricsReport(
        perplexity=metrics_mod.perplexity(model, test_examples, vocab, task="edit",
                                          batch_size=batch_size,
                                          max_src_len=max_src_len,
                                          max_tgt_len=max_tgt_len),
        bleu4=metrics_mod.bleu4(cands, refs),
        rouge_l=metrics_mod.rouge_l(cands, refs),
        token_rep4=metrics_mod.token_rep4(cands),
        sent_rep4=metrics_mod.sent_rep4(cands, rep_ref),
        unique4=metrics_mod.unique4(cands),
    )
    return report, generated


def _stage_with_seed(cfg: TrainConfig, seed: int, checkpoint_out=None) -> TrainConfig:
    return dataclasses.replace(cfg, seed=seed, sia=dataclasses.replace(cfg.sia),
                               checkpoint_out=str(checkpoint_out) if checkpoint_out else None)


def run_pas(cfg: PipelineConfig, out_dir) -> dict:
    """Full staged run: pretrain -> (adapt) -> finetune -> test metrics.
    Writes the resolved config, per-stage records, checkpoints, generations
    and the metrics report under `out_dir`; returns everything as a dict."""
    cfg.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved_config.json").write_text(
        json.dumps(cfg.to_dict(), indent=2), encoding="utf-8")

    train, valid, test, vocab = prepare_data(cfg)
    vocab.save(out / "vocab.json")
    model_cfg = resolve_model_config(cfg, vocab)
    model = SeqModel(model_cfg)

    records: list[RunRecord] = []
    stage_list = ["pretrain"] + ([] if cfg.skip_adapt else ["adapt"]) + ["finetune"]
    for stage in stage_list:
        stage_cfg = _stage_with_seed(getattr(cfg, stage), cfg.seed,
                                     out / f"{stage}.npz")
        records.append(train_stage(stage_cfg, model, train, valid, vocab))

    rep_ref = build_rep_ref([list(ex.edited) for ex in train])
    report, generated = evaluate_model(
        model, test, vocab, cfg.decode, rep_ref,
        max_src_len=cfg.finetune.max_src_len,
        max_tgt_len=cfg.finetune.max_tgt_len,
        batch_size=cfg.finetune.batch_size)
    records[-1].metrics = report.to_dict()

    (out / "records.json").write_text(
        json.dumps([r.to_dict() for r in records], indent=2), encoding="utf-8")
    (out / "metrics.json").write_text(report.to_json(), encoding="utf-8")
    (out / "metrics.csv").write_text(
        MetricsReport.csv_header() + "\n" + report.csv_row() + "\n", encoding="utf-8")
    with (out / "generations.jsonl").open("w", encoding="utf-8") as f:
        for ex, gen in zip(test, generated):
            f.write(json.dumps({"body": ex.body, "original": ex.original,
                                "edited": ex.edited, "generated": gen},
                               ensure_ascii=False))
            f.write("\n")
    return {"records": records, "report": report, "generated": generated,
            "model": model, "vocab": vocab}


# -- hyper-parameter sweeps ------------------------------------------------------


def _normalize_columns(rows: list[dict]) -> list[dict]:
    """Min-max normalize each metric column across the sweep (for trend
    plots); constant columns normalize to 0."""
    out = [dict(alpha=r["alpha"], beta=r["beta"]) for r in rows]
    for col in metrics_mod.CSV_COLUMNS:
        vals = [r[col] for r in rows]
        lo, hi = min(vals), max(vals)
        for tgt, v in zip(out, vals):
            tgt[col] = 0.0 if hi == lo else (v - lo) / (hi - lo)
    return out


def sweep(cfg: PipelineConfig, param: str, grid, out_dir) -> list[dict]:
    """Fine-tune once per grid point from a shared adapted checkpoint and the
    same seed; emit per-point metrics plus min-max-normalized trend data.

    `param` picks which exponent the grid drives: "alpha", "beta", or
    "joint" with (alpha, beta) pairs.
    """
    if param not in ("alpha", "beta", "joint"):
        raise ConfigError(f"param must be alpha, beta or joint, got {param!r}")
    grid = list(grid)
    if not grid:
        raise ConfigError("sweep grid must be non-empty")
    cfg.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved_config.json").write_text(
        json.dumps({"pipeline": cfg.to_dict(), "param": param,
                    "grid": [list(g) if isinstance(g, (tuple, list)) else g
                             for g in grid]}, indent=2),
        encoding="utf-8")

    train, valid, test, vocab = prepare_data(cfg)
    model_cfg = resolve_model_config(cfg, vocab)
    model = SeqModel(model_cfg)
    train_stage(_stage_with_seed(cfg.pretrain, cfg.seed), model, train, valid, vocab)
    if not cfg.skip_adapt:
        train_stage(_stage_with_seed(cfg.adapt, cfg.seed), model, train, valid, vocab)
    shared_state = model.state_snapshot()
    rep_ref = build_rep_ref([list(ex.edited) for ex in train])

    def point_params(point) -> tuple[float, float]:
        base = cfg.finetune.sia
        if param == "alpha":
            return float(point), base.beta
        if param == "beta":
            return base.alpha, float(point)
        a, b = point
        return float(a), float(b)

    def run_point(point) -> dict:
        alpha, beta = point_params(point)
        arm = model.clone()
        arm.load_snapshot(shared_state)
        ft = dataclasses.replace(
            cfg.finetune, loss="sia", seed=cfg.seed,
            sia=dataclasses.replace(cfg.finetune.sia, alpha=alpha, beta=beta),
            checkpoint_out=None)
        train_stage(ft, arm, train, valid, vocab)
        report, _ = evaluate_model(arm, test, vocab, cfg.decode, rep_ref,
                                   max_src_len=cfg.finetune.max_src_len,
                                   max_tgt_len=cfg.finetune.max_tgt_len,
                                   batch_size=cfg.finetune.batch_size)
        return {"alpha": alpha, "beta": beta, **report.to_dict()}

    workers = thread_cap()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(run_point, grid))
    else:
        rows = [run_point(p) for p in grid]

    normalized = _normalize_columns(rows)
    header = "alpha,beta," + MetricsReport.csv_header()
    lines = [header]
    for r in rows:
        lines.append(",".join(repr(r[c]) for c in ["alpha", "beta"] + metrics_mod.CSV_COLUMNS))
    (out / "sweep.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    (out / "sweep.json").write_text(
        json.dumps({"rows": rows, "normalized": normalized}, indent=2),
        encoding="utf-8")
    return rows
