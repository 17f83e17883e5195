"""Corpus handling: text cleaning, character vocabulary, a seeded synthetic
corpus of (body, original headline, edited headline) triples, JSONL I/O, and
batch assembly for the three training layouts.

The synthetic generator mixes two kinds of edited headlines: "generic" ones
drawn verbatim from a small template pool (easy, repeated targets) and
"specific" ones that embed the body's salient words (hard, mostly unique
targets). The generic fraction is the knob that controls how repetitive the
target distribution is.
"""

from __future__ import annotations

import json
import random
import re
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError

PAD_ID = 0
BOS_ID = 1
EOS_ID = 2
SEP_ID = 3
UNK_ID = 4
RESERVED_TOKENS = ["<pad>", "<bos>", "<eos>", "<sep>", "<unk>"]

TASKS = ("pretrain", "adapt", "edit")

_URL_RE = re.compile(r"(?:https?://|www\.)\S+", re.IGNORECASE)
_LONG_DIGITS_RE = re.compile(r"\d{7,}")
_WS_RE = re.compile(r"\s+")

# fancy punctuation folded onto a canonical ascii set
_PUNCT_MAP = str.maketrans({
    "“": '"', "”": '"', "‘": "'", "’": "'",
    "—": "-", "–": "-", "…": "...",
    "，": ",", "。": ".", "！": "!", "？": "?",
    "、": ",", "：": ":", "；": ";",
})


def clean_text(raw: str) -> str:
    """Strip URL-like substrings and long digit runs, fold punctuation to a
    canonical set, and collapse whitespace runs to single spaces."""
    s = _URL_RE.sub("", raw)
    s = _LONG_DIGITS_RE.sub("", s)
    s = s.translate(_PUNCT_MAP)
    return _WS_RE.sub(" ", s)


@dataclass
class Example:
    body: str
    original: str
    edited: str
    domain: str | None = None

    def to_dict(self) -> dict:
        return {"body": self.body, "original": self.original,
                "edited": self.edited, "domain": self.domain}


class Vocabulary:
    """Character vocabulary with five reserved ids (PAD/BOS/EOS/SEP/UNK)."""

    def __init__(self, tokens: list[str]):
        if tokens[: len(RESERVED_TOKENS)] != RESERVED_TOKENS:
            raise ConfigError("vocabulary must start with the reserved tokens")
        if len(set(tokens)) != len(tokens):
            raise ConfigError("vocabulary tokens must be unique")
        self.id_to_token = list(tokens)
        self.token_to_id = {t: i for i, t in enumerate(tokens)}

    def __len__(self) -> int:
        return len(self.id_to_token)

    def encode(self, text: str) -> list[int]:
        return [self.token_to_id.get(ch, UNK_ID) for ch in text]

    def decode(self, ids) -> str:
        out = []
        for i in ids:
            i = int(i)
            if not 0 <= i < len(self.id_to_token):
                raise DataError(f"token id {i} out of range for vocabulary of size {len(self)}")
            if i == SEP_ID:
                out.append("|")
            elif i < len(RESERVED_TOKENS):
                continue
            else:
                out.append(self.id_to_token[i])
        return "".join(out)

    def save(self, path) -> None:
        payload = {"version": 1, "tokens": self.id_to_token}
        Path(path).write_text(json.dumps(payload, ensure_ascii=False), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        try:
            payload = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as e:
            raise DataError(f"cannot read vocabulary file {path}: {e}") from e
        if not isinstance(payload, dict) or payload.get("version") != 1:
            raise DataError(f"unsupported vocabulary file format in {path}")
        return cls(payload["tokens"])


def build_vocab(corpus, min_freq: int = 1) -> Vocabulary:
    """Character vocabulary over `corpus`, keeping characters with count >=
    min_freq. Ids are assigned by descending frequency, ties broken by
    codepoint order."""
    if min_freq < 1:
        raise ConfigError(f"min_freq must be >= 1, got {min_freq}")
    counts: dict[str, int] = {}
    n_texts = 0
    for text in corpus:
        n_texts += 1
        for ch in text:
            counts[ch] = counts.get(ch, 0) + 1
    if n_texts == 0:
        raise DataError("cannot build a vocabulary from an empty corpus")
    kept = sorted((t for t, c in counts.items() if c >= min_freq),
                  key=lambda t: (-counts[t], t))
    return Vocabulary(RESERVED_TOKENS + kept)


# -- synthetic corpus ---------------------------------------------------------

_SYLLABLES = [c + v for c in "bcdfglmnprstvz" for v in "aeiou"]

_TEMPLATE_WORDS = [
    "top", "story", "must", "read", "now", "big", "news", "hot", "wow", "best",
]

_PATTERN_GLUE = ["report", "update", "brief", "watch", "daily", "recap", "alert", "notes"]

_DOMAINS = ["sports", "health", "finance", "parenting", "tech", "gadgets"]


@dataclass
class GeneratorSpec:
    seed: int = 1
    n_examples: int = 2400
    generic_fraction: float = 0.4
    template_pool_size: int = 12
    content_vocab_size: int = 3000
    body_length_range: tuple[int, int] = (5, 8)
    headline_length_range: tuple[int, int] = (4, 6)

    def validate(self) -> None:
        if not 0.0 <= self.generic_fraction <= 1.0:
            raise ConfigError(f"generic_fraction must be in [0, 1], got {self.generic_fraction}")
        if self.n_examples < 1:
            raise ConfigError("n_examples must be >= 1")
        if self.template_pool_size < 1:
            raise ConfigError("template_pool_size must be >= 1")
        if not 2 <= self.content_vocab_size <= len(_SYLLABLES) ** 2:
            raise ConfigError("content_vocab_size out of range")
        for name in ("body_length_range", "headline_length_range"):
            lo, hi = getattr(self, name)
            if not 1 <= lo <= hi:
                raise ConfigError(f"{name} must satisfy 1 <= lo <= hi, got ({lo}, {hi})")
        if self.body_length_range[0] < 5:
            raise ConfigError("body_length_range lower bound must be >= 5 (salient words need room)")

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "n_examples": self.n_examples,
            "generic_fraction": self.generic_fraction,
            "template_pool_size": self.template_pool_size,
            "content_vocab_size": self.content_vocab_size,
            "body_length_range": list(self.body_length_range),
            "headline_length_range": list(self.headline_length_range),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorSpec":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown GeneratorSpec keys: {sorted(unknown)}")
        kwargs = dict(d)
        for name in ("body_length_range", "headline_length_range"):
            if name in kwargs:
                kwargs[name] = tuple(kwargs[name])
        spec = cls(**kwargs)
        spec.validate()
        return spec


def _assets(spec: GeneratorSpec) -> tuple[random.Random, list[str], list[list[str]]]:
    """Content vocabulary and template pool, derived from the seed before any
    per-example draws so template_pool(spec) matches generate_corpus(spec)."""
    rng = random.Random(spec.seed)
    pairs = [a + b for a in _SYLLABLES for b in _SYLLABLES]
    content = rng.sample(pairs, spec.content_vocab_size)
    templates: list[list[str]] = []
    seen = set()
    while len(templates) < spec.template_pool_size:
        k = rng.randint(*spec.headline_length_range)
        # drawn with replacement from a small word pool: clickbait templates
        # repeat intensifiers ("hot hot take"), which gives the generic mode
        # a real within-headline repetition signature
        words = tuple(rng.choices(_TEMPLATE_WORDS, k=k))
        if words not in seen:
            seen.add(words)
            templates.append(list(words))
    return rng, content, templates


def template_pool(spec: GeneratorSpec) -> list[str]:
    spec.validate()
    _, _, templates = _assets(spec)
    return [" ".join(t) for t in templates]


_SPECIFIC_ORDERS = (
    ("a", "b", "g"), ("g", "a", "b"), ("a", "g", "b"), ("b", "a", "g"),
)


def _specific_headline(s1: str, s2: str) -> list[str]:
    """Content-specific hard target: a pure function of the salient-word
    pair, so the body fixes the headline exactly and a trained model can
    commit beam mass to one specific string instead of a memorized
    template."""
    a, b = sorted((s1, s2))
    h = zlib.crc32(f"{a}|{b}".encode("ascii"))
    glue = _PATTERN_GLUE[h % len(_PATTERN_GLUE)]
    order = _SPECIFIC_ORDERS[(h >> 8) % len(_SPECIFIC_ORDERS)]
    words = {"a": a, "b": b, "g": glue}
    out = [words[k] for k in order]
    if (h >> 16) % 2:
        # second glue word, always distinct from the first
        shift = 1 + (h >> 24) % (len(_PATTERN_GLUE) - 1)
        out.append(_PATTERN_GLUE[(h + shift) % len(_PATTERN_GLUE)])
    return out


def _corrupt(words: list[str], rng: random.Random) -> list[str]:
    """Fake an amateur original headline: always drop one word (so restoring
    the target requires the body), sometimes swap neighbors too."""
    out = list(words)
    if len(out) >= 3:
        out.pop(rng.randrange(len(out)))
    if len(out) >= 2 and rng.random() < 0.5:
        i = rng.randrange(len(out) - 1)
        out[i], out[i + 1] = out[i + 1], out[i]
    return out


def generate_corpus(spec: GeneratorSpec) -> list[Example]:
    """Deterministic synthetic corpus; identical spec gives byte-identical
    output."""
    spec.validate()
    rng, content, templates = _assets(spec)
    examples = []
    for _ in range(spec.n_examples):
        s1, s2 = rng.sample(content, 2)
        body_len = rng.randint(*spec.body_length_range)
        # salient words appear exactly once: duplicate anchors in the body
        # invite copy stutter ("noza noza ...") in partially trained models
        filler = rng.choices([w for w in content if w not in (s1, s2)],
                             k=max(0, body_len - 2))
        body_words = filler + [s1, s2]
        rng.shuffle(body_words)

        if rng.random() < spec.generic_fraction:
            edited_words = list(rng.choice(templates))
        else:
            edited_words = _specific_headline(s1, s2)

        original_words = _corrupt(edited_words, rng)
        examples.append(Example(
            body=" ".join(body_words),
            original=" ".join(original_words),
            edited=" ".join(edited_words),
            domain=rng.choice(_DOMAINS),
        ))
    return examples


# -- JSONL I/O ---------------------------------------------------------------


def save_jsonl(examples, path) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8") as f:
        for ex in examples:
            f.write(json.dumps(ex.to_dict(), ensure_ascii=False))
            f.write("\n")


def load_jsonl(path) -> list[Example]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such corpus file: {path}")
    examples = []
    with path.open("r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise DataError(f"{path}: line {lineno}: invalid JSON ({e.msg})") from e
            if not isinstance(obj, dict):
                raise DataError(f"{path}: line {lineno}: expected a JSON object")
            missing = {"body", "original", "edited"} - set(obj)
            if missing:
                raise DataError(f"{path}: line {lineno}: missing keys {sorted(missing)}")
            if not obj["body"] or not obj["edited"]:
                raise DataError(f"{path}: line {lineno}: body and edited must be non-empty")
            examples.append(Example(
                body=obj["body"], original=obj["original"],
                edited=obj["edited"], domain=obj.get("domain"),
            ))
    return examples


# -- batching ----------------------------------------------------------------


@dataclass
class Batch:
    encoder_ids: np.ndarray       # int64 [B, S], PAD padded; S may be 0
    decoder_in_ids: np.ndarray    # int64 [B, T], starts with BOS
    decoder_target_ids: np.ndarray  # int64 [B, T], ends with EOS, PAD padded
    target_mask: np.ndarray       # bool [B, T], true exactly on non-PAD targets


def source_ids(ex: Example, vocab: Vocabulary, task: str, max_src_len: int) -> list[int]:
    """Encoder-side token ids for one example under the given task layout."""
    if task == "pretrain":
        return []
    body = vocab.encode(ex.body)
    if task == "adapt":
        return body[:max_src_len]
    if task == "edit":
        original = vocab.encode(ex.original)[: max(0, max_src_len - 2)]
        body = body[: max(1, max_src_len - 1 - len(original))]
        return body + [SEP_ID] + original
    raise ConfigError(f"unknown task {task!r}; expected one of {TASKS}")


def target_ids(ex: Example, vocab: Vocabulary, task: str, max_tgt_len: int) -> list[int]:
    text = ex.body if task == "pretrain" else ex.edited
    return vocab.encode(text)[: max_tgt_len - 1]


def make_batches(examples, vocab: Vocabulary, task: str, batch_size: int,
                 max_src_len: int = 256, max_tgt_len: int = 32,
                 seed: int = 0) -> list[Batch]:
    """Shuffle (seed-driven), lay out, truncate and pad one epoch of batches.

    pretrain: empty encoder input, the decoder trains on the body as a causal
    LM. adapt: body -> edited headline. edit: body <sep> original -> edited
    headline.
    """
    if task not in TASKS:
        raise ConfigError(f"unknown task {task!r}; expected one of {TASKS}")
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    order = list(range(len(examples)))
    random.Random(seed).shuffle(order)

    batches = []
    for start in range(0, len(order), batch_size):
        chunk = [examples[i] for i in order[start:start + batch_size]]
        srcs = [source_ids(ex, vocab, task, max_src_len) for ex in chunk]
        tgts = [target_ids(ex, vocab, task, max_tgt_len) for ex in chunk]
        b = len(chunk)
        s = max((len(x) for x in srcs), default=0)
        t = max(len(y) + 1 for y in tgts)

        enc = np.full((b, s), PAD_ID, dtype=np.int64)
        dec_in = np.full((b, t), PAD_ID, dtype=np.int64)
        dec_tgt = np.full((b, t), PAD_ID, dtype=np.int64)
        for i, (src, tgt) in enumerate(zip(srcs, tgts)):
            enc[i, :len(src)] = src
            dec_in[i, 0] = BOS_ID
            dec_in[i, 1:len(tgt) + 1] = tgt
            dec_tgt[i, :len(tgt)] = tgt
            dec_tgt[i, len(tgt)] = EOS_ID
        batches.append(Batch(
            encoder_ids=enc,
            decoder_in_ids=dec_in,
            decoder_target_ids=dec_tgt,
            target_mask=dec_tgt != PAD_ID,
        ))
    return batches
