"""Greedy and beam-search decoding with temperature scaling and length
normalization.

Scores: a hypothesis accumulates the post-temperature log-probability of each
chosen token; its ranking score divides that sum by the length penalty
lp(n) = ((5 + n) / 6) ** lambda over the generated-token count n (everything
after BOS, EOS included). Reserved tokens other than EOS are never emitted,
and EOS itself is suppressed while the hypothesis is shorter than min_len.
Ties break toward the lexicographically smaller token-id sequence so decoding
is deterministic everywhere.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import BOS_ID, EOS_ID, PAD_ID, SEP_ID, UNK_ID, Vocabulary, source_ids
from .errors import ConfigError, SiaSeqError

_SUPPRESSED_IDS = (PAD_ID, BOS_ID, SEP_ID, UNK_ID)


@dataclass
class DecodeConfig:
    beam_size: int = 10
    temperature: float = 1.0
    length_norm_lambda: float = 0.6
    max_len: int = 32
    min_len: int = 1

    def validate(self) -> None:
        if self.beam_size < 1:
            raise ConfigError("beam_size must be >= 1")
        if self.temperature <= 0.0:
            raise ConfigError("temperature must be > 0")
        if self.length_norm_lambda < 0.0:
            raise ConfigError("length_norm_lambda must be >= 0")
        if not 1 <= self.min_len <= self.max_len:
            raise ConfigError("need max_len >= min_len >= 1")

    def to_dict(self) -> dict:
        return {"beam_size": self.beam_size, "temperature": self.temperature,
                "length_norm_lambda": self.length_norm_lambda,
                "max_len": self.max_len, "min_len": self.min_len}

    @classmethod
    def from_dict(cls, d: dict) -> "DecodeConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown DecodeConfig keys: {sorted(unknown)}")
        cfg = cls(**d)
        cfg.validate()
        return cfg


@dataclass
class Hypothesis:
    token_ids: list[int]   # BOS-prefixed, possibly EOS-terminated
    logprob_sum: float
    norm_score: float

    @property
    def finished(self) -> bool:
        return len(self.token_ids) > 1 and self.token_ids[-1] == EOS_ID


def length_penalty(n_generated: int, lam: float) -> float:
    return ((5.0 + n_generated) / 6.0) ** lam


def _log_softmax_rows(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def _step_logprobs(model, state, prefix_rows: np.ndarray, cfg: DecodeConfig,
                   step_idx: int) -> np.ndarray:
    """Post-temperature, suppression-masked log-probs for each prefix row.
    `step_idx` is the 1-based index of the token about to be generated."""
    lp = model.step(state, prefix_rows)
    if cfg.temperature != 1.0:
        lp = _log_softmax_rows(lp / cfg.temperature)
    lp = lp.copy()
    v = lp.shape[-1]
    for fid in _SUPPRESSED_IDS:
        if fid < v:
            lp[:, fid] = -np.inf
    if step_idx < cfg.min_len:
        lp[:, EOS_ID] = -np.inf
    return lp


def _encode(model, encoder_ids):
    if encoder_ids is None:
        encoder_ids = np.zeros((1, 0), dtype=np.int64)
    encoder_ids = np.asarray(encoder_ids, dtype=np.int64)
    if encoder_ids.ndim == 1:
        encoder_ids = encoder_ids[None, :]
    return model.encode_source(encoder_ids)


def greedy_decode(model, encoder_ids, cfg: DecodeConfig) -> Hypothesis:
    """Argmax decoding. Ties resolve to the lowest token id, except that a
    tie between EOS and a content token resolves to the content token, so a
    degenerate uniform model keeps generating instead of stopping at once."""
    cfg.validate()
    state = _encode(model, encoder_ids)
    tokens = [BOS_ID]
    total = 0.0
    for step_idx in range(1, cfg.max_len + 1):
        lp = _step_logprobs(model, state, np.array([tokens]), cfg, step_idx)[0]
        best = lp.max()
        if not np.isfinite(best):
            raise SiaSeqError("no emittable token: vocabulary too small for decoding")
        at_max = np.flatnonzero(lp == best)
        non_eos = at_max[at_max != EOS_ID]
        tok = int(non_eos[0]) if non_eos.size else int(at_max[0])
        tokens.append(tok)
        total += float(lp[tok])
        if tok == EOS_ID:
            break
    n = len(tokens) - 1
    return Hypothesis(tokens, total, total / length_penalty(n, cfg.length_norm_lambda))


def beam_search(model, encoder_ids, cfg: DecodeConfig) -> list[Hypothesis]:
    """Standard beam expansion. Live hypotheses expand over every emittable
    token each step; the top `beam_size` by cumulative log-probability
    survive, finished ones moving to a completed pool. The search stops once
    `beam_size` hypotheses complete or max_len is reached; hypotheses still
    live at max_len count as finished-by-length. Final ranking is by
    norm_score, descending."""
    cfg.validate()
    state = _encode(model, encoder_ids)
    live: list[tuple[list[int], float]] = [([BOS_ID], 0.0)]
    completed: list[tuple[list[int], float]] = []
    pool_filled = False

    for step_idx in range(1, cfg.max_len + 1):
        rows = np.array([toks for toks, _ in live])
        lp = _step_logprobs(model, state, rows, cfg, step_idx)
        candidates = []
        for i, (toks, base) in enumerate(live):
            row = lp[i]
            for tok in np.flatnonzero(np.isfinite(row)):
                candidates.append((base + float(row[tok]), toks + [int(tok)]))
        if not candidates:
            break
        candidates.sort(key=lambda c: (-c[0], c[1]))
        live = []
        for score, toks in candidates[: cfg.beam_size]:
            if toks[-1] == EOS_ID:
                completed.append((toks, score))
            else:
                live.append((toks, score))
        if len(completed) >= cfg.beam_size:
            pool_filled = True
            break
        if not live:
            break

    pool = list(completed)
    if not pool_filled:
        pool.extend(live)
    lam = cfg.length_norm_lambda
    hyps = [Hypothesis(toks, score, score / length_penalty(len(toks) - 1, lam))
            for toks, score in pool]
    hyps.sort(key=lambda h: (-h.norm_score, h.token_ids))
    assert hyps and hyps[0].norm_score == max(h.norm_score for h in hyps)
    return hyps


def batch_generate(model, examples, vocab: Vocabulary, cfg: DecodeConfig,
                   task: str = "edit", max_src_len: int = 256) -> list[str]:
    """Top-1 beam output per example, decoded back to text; order preserving
    and deterministic."""
    out = []
    for idx, ex in enumerate(examples):
        try:
            src = source_ids(ex, vocab, task, max_src_len)
            hyps = beam_search(model, np.array([src], dtype=np.int64), cfg)
            out.append(vocab.decode(hyps[0].token_ids))
        except SiaSeqError as e:
            raise type(e)(f"example {idx}: {e}") from e
    return out
