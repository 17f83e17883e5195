"""Evaluation metrics for generated headlines: perplexity, BLEU-4, ROUGE-L,
and three repetition/diversity measures over token 4-grams.

Token-REP-4 counts, inside each headline, the sliding 4-grams whose exact
gram already occurred at an earlier start position in the same headline.
Sent-REP-4 measures how much of a headline is built from 4-grams that occur
more than once across the training-set target headlines (a proxy for generic,
dull outputs). Unique-4 counts distinct 4-grams across the whole output
corpus. REP scores are normalized per headline and macro-averaged; headlines
shorter than 4 tokens score 0.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from . import data as data_mod
from .errors import DataError, ShapeError
from .model import SeqModel

_N = 4  # gram size shared by the repetition metrics

CSV_COLUMNS = ["perplexity", "bleu4", "rouge_l", "token_rep4", "sent_rep4", "unique4"]


@dataclass
class MetricsReport:
    perplexity: float
    bleu4: float
    rouge_l: float
    token_rep4: float
    sent_rep4: float
    unique4: int

    def to_dict(self) -> dict:
        return {c: getattr(self, c) for c in CSV_COLUMNS}

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    def csv_row(self) -> str:
        return ",".join(repr(getattr(self, c)) for c in CSV_COLUMNS)

    @staticmethod
    def csv_header() -> str:
        return ",".join(CSV_COLUMNS)


def _ngrams(tokens, n: int) -> list[tuple]:
    return [tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1)]


# -- perplexity ---------------------------------------------------------------


def perplexity(model: SeqModel, examples, vocab, task: str = "edit",
               batch_size: int = 32, max_src_len: int = 256,
               max_tgt_len: int = 32) -> float:
    """exp of the token-level micro-averaged negative log-likelihood over all
    unmasked target tokens."""
    examples = list(examples)
    if not examples:
        raise DataError("perplexity needs at least one example")
    total_nll = 0.0
    total_tokens = 0
    for batch in data_mod.make_batches(examples, vocab, task, batch_size,
                                       max_src_len=max_src_len,
                                       max_tgt_len=max_tgt_len, seed=0):
        logp = model.forward(batch).data
        picked = np.take_along_axis(logp, batch.decoder_target_ids[..., None],
                                    axis=-1)[..., 0]
        total_nll += float(-(picked * batch.target_mask).sum())
        total_tokens += int(batch.target_mask.sum())
    mean_nll = total_nll / total_tokens
    # a model diverged far enough to overflow exp() has effectively infinite
    # perplexity; report it as such instead of crashing early stopping
    return math.exp(mean_nll) if mean_nll < 700.0 else math.inf


# -- BLEU-4 ---------------------------------------------------------------------


def bleu4(candidates, references) -> float:
    """Corpus-level BLEU over n = 1..4 with clipped modified precisions,
    add-one smoothing when an n >= 2 count is zero, and the usual brevity
    penalty. Scaled to [0, 100]."""
    candidates, references = list(candidates), list(references)
    if len(candidates) != len(references):
        raise ShapeError(
            f"got {len(candidates)} candidates but {len(references)} references")
    matches = [0] * (_N + 1)
    totals = [0] * (_N + 1)
    cand_len = 0
    ref_len = 0
    for cand, ref in zip(candidates, references):
        cand, ref = list(cand), list(ref)
        cand_len += len(cand)
        ref_len += len(ref)
        for n in range(1, _N + 1):
            cand_grams = _ngrams(cand, n)
            totals[n] += len(cand_grams)
            ref_counts: dict[tuple, int] = {}
            for g in _ngrams(ref, n):
                ref_counts[g] = ref_counts.get(g, 0) + 1
            cand_counts: dict[tuple, int] = {}
            for g in cand_grams:
                cand_counts[g] = cand_counts.get(g, 0) + 1
            matches[n] += sum(min(c, ref_counts.get(g, 0))
                              for g, c in cand_counts.items())
    if cand_len == 0 or totals[1] == 0 or matches[1] == 0:
        return 0.0
    log_sum = 0.0
    for n in range(1, _N + 1):
        m, t = matches[n], totals[n]
        if n >= 2 and m == 0:
            m, t = m + 1, t + 1
        log_sum += math.log(m / t)
    bp = math.exp(1.0 - ref_len / cand_len) if cand_len < ref_len else 1.0
    return 100.0 * bp * math.exp(log_sum / _N)


# -- ROUGE-L ----------------------------------------------------------------------


def _lcs_length(a: list, b: list) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0] * (len(b) + 1)
        for j, y in enumerate(b, start=1):
            cur[j] = prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1])
        prev = cur
    return prev[-1]


def rouge_l(candidates, references) -> float:
    """Macro-averaged LCS F1 (balanced) scaled to [0, 100]."""
    candidates, references = list(candidates), list(references)
    if len(candidates) != len(references):
        raise ShapeError(
            f"got {len(candidates)} candidates but {len(references)} references")
    if not candidates:
        return 0.0
    scores = []
    for cand, ref in zip(candidates, references):
        cand, ref = list(cand), list(ref)
        lcs = _lcs_length(cand, ref)
        if lcs == 0 or not cand or not ref:
            scores.append(0.0)
            continue
        p = lcs / len(cand)
        r = lcs / len(ref)
        scores.append(2.0 * p * r / (p + r))
    return 100.0 * sum(scores) / len(scores)


# -- repetition / diversity -------------------------------------------------------


def token_rep4(headlines) -> float:
    """Share of sliding 4-grams already seen earlier in the same headline,
    macro-averaged and scaled to [0, 100]."""
    scores = []
    for tokens in headlines:
        grams = _ngrams(list(tokens), _N)
        if not grams:
            scores.append(0.0)
            continue
        seen: set[tuple] = set()
        repeats = 0
        for g in grams:
            if g in seen:
                repeats += 1
            seen.add(g)
        scores.append(repeats / len(grams))
    if not scores:
        return 0.0
    return 100.0 * sum(scores) / len(scores)


@dataclass(frozen=True)
class RepRefSet:
    """4-grams occurring more than once across the training-set target
    headlines."""
    grams: frozenset


def build_rep_ref(train_targets) -> RepRefSet:
    counts: dict[tuple, int] = {}
    for tokens in train_targets:
        for g in _ngrams(list(tokens), _N):
            counts[g] = counts.get(g, 0) + 1
    return RepRefSet(grams=frozenset(g for g, c in counts.items() if c >= 2))


def sent_rep4(headlines, ref: RepRefSet) -> float:
    """Share of a headline's 4-gram occurrences that belong to the training
    repetition set, macro-averaged and scaled to [0, 100]."""
    scores = []
    for tokens in headlines:
        grams = _ngrams(list(tokens), _N)
        if not grams:
            scores.append(0.0)
            continue
        scores.append(sum(g in ref.grams for g in grams) / len(grams))
    if not scores:
        return 0.0
    return 100.0 * sum(scores) / len(scores)


def unique4(headlines) -> int:
    grams: set[tuple] = set()
    for tokens in headlines:
        grams.update(_ngrams(list(tokens), _N))
    return len(grams)
