"""Miniature transformer encoder-decoder over the numcore tape.

Pre-norm residual blocks, learned position embeddings, tied input/output
token embeddings. The encoder is bidirectional with PAD keys masked out
everywhere; the decoder applies a causal (lower-triangular-inclusive) mask
and cross-attends to the final encoder layer output. An empty encoder input
turns the decoder into a pure causal language model, which is what the
pretraining stage uses.
"""

from __future__ import annotations

import dataclasses
import json
import math
import zipfile
from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .data import BOS_ID, PAD_ID, Batch
from .errors import CheckpointError, ConfigError, ShapeError
from .numcore import Tensor

_LN_EPS = 1e-5
_MASK_FILL = -1e30
_CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    max_positions: int
    n_layers: int = 2
    hidden: int = 64
    heads: int = 4
    ffn_mult: int = 4
    dropout_rate: float = 0.0
    init_std: float = 0.02
    seed: int = 0

    def validate(self) -> None:
        if self.vocab_size < 6:
            raise ConfigError(f"vocab_size must be >= 6, got {self.vocab_size}")
        if self.max_positions < 1:
            raise ConfigError("max_positions must be >= 1")
        if self.n_layers < 1 or self.hidden < 1 or self.ffn_mult < 1:
            raise ConfigError("n_layers, hidden and ffn_mult must be >= 1")
        if self.heads < 1 or self.hidden % self.heads != 0:
            raise ConfigError(f"hidden ({self.hidden}) must be divisible by heads ({self.heads})")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError("dropout_rate must be in [0, 1)")
        if self.init_std < 0.0:
            raise ConfigError("init_std must be >= 0")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown ModelConfig keys: {sorted(unknown)}")
        cfg = cls(**d)
        cfg.validate()
        return cfg


@dataclass
class EncoderState:
    """Cached encoder output for repeated decoding steps. `output` is None
    when the source sequence is empty (pure causal-LM mode)."""
    output: Tensor | None
    key_pad_mask: np.ndarray | None  # bool [B, 1, 1, S]


class SeqModel:
    """Parameter container plus the forward passes. Training mutates
    parameters in place and needs exclusive access; inference is read-only."""

    def __init__(self, cfg: ModelConfig):
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        d = cfg.hidden
        f = cfg.hidden * cfg.ffn_mult
        params: dict[str, Tensor] = {}

        def normal(name, *shape):
            params[name] = Tensor(rng.normal(0.0, cfg.init_std, size=shape),
                                  requires_grad=True)

        def constant(name, shape, value):
            params[name] = Tensor(np.full(shape, value, dtype=np.float64),
                                  requires_grad=True)

        def layer_norm(base):
            constant(f"{base}_g", (d,), 1.0)
            constant(f"{base}_b", (d,), 0.0)

        def attention(prefix):
            # no key bias: softmax scores are invariant to a per-query
            # constant shift, so it would be a zero-gradient dead parameter
            normal(f"{prefix}_wq", d, d)
            constant(f"{prefix}_bq", (d,), 0.0)
            normal(f"{prefix}_wk", d, d)
            for w, b in (("wv", "bv"), ("wo", "bo")):
                normal(f"{prefix}_{w}", d, d)
                constant(f"{prefix}_{b}", (d,), 0.0)

        def ffn(base):
            normal(f"{base}.ffn_w1", d, f)
            constant(f"{base}.ffn_b1", (f,), 0.0)
            normal(f"{base}.ffn_w2", f, d)
            constant(f"{base}.ffn_b2", (d,), 0.0)

        normal("tok_emb", cfg.vocab_size, d)
        normal("pos_emb", cfg.max_positions, d)
        for i in range(cfg.n_layers):
            base = f"enc.{i}"
            layer_norm(f"{base}.ln1")
            attention(f"{base}.self")
            layer_norm(f"{base}.ln2")
            ffn(base)
        for i in range(cfg.n_layers):
            base = f"dec.{i}"
            layer_norm(f"{base}.ln1")
            attention(f"{base}.self")
            layer_norm(f"{base}.ln2")
            attention(f"{base}.cross")
            layer_norm(f"{base}.ln3")
            ffn(base)
        layer_norm("enc_ln")
        layer_norm("dec_ln")
        constant("out_bias", (cfg.vocab_size,), 0.0)
        self.params = params

    # -- parameter bookkeeping ------------------------------------------

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def n_params(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def state_snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_snapshot(self, snapshot: dict[str, np.ndarray]) -> None:
        for k, p in self.params.items():
            p.data = snapshot[k].copy()

    def clone(self) -> "SeqModel":
        other = SeqModel.__new__(SeqModel)
        other.cfg = self.cfg
        other.params = {k: Tensor(v.data.copy(), requires_grad=True)
                        for k, v in self.params.items()}
        return other

    # -- building blocks --------------------------------------------------

    def _p(self, name: str) -> Tensor:
        return self.params[name]

    def _layer_norm(self, x: Tensor, g: Tensor, b: Tensor) -> Tensor:
        mu = x.mean(axis=-1, keepdims=True)
        centered = x - mu
        var = (centered * centered).mean(axis=-1, keepdims=True)
        inv = nc.power(var + _LN_EPS, -0.5)
        return centered * inv * g + b

    def _dropout(self, x: Tensor, train: bool, rng) -> Tensor:
        rate = self.cfg.dropout_rate
        if not train or rate <= 0.0 or rng is None:
            return x
        keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
        return x * keep

    def _attention(self, q_in: Tensor, kv_in: Tensor, prefix: str,
                   mask: np.ndarray | None) -> Tensor:
        d = self.cfg.hidden
        h = self.cfg.heads
        dk = d // h
        b_q, t_q = q_in.shape[0], q_in.shape[1]
        b_kv, t_kv = kv_in.shape[0], kv_in.shape[1]

        def heads(x: Tensor, b: int, t: int) -> Tensor:
            return x.reshape((b, t, h, dk)).transpose((0, 2, 1, 3))

        q = heads(nc.matmul(q_in, self._p(f"{prefix}_wq")) + self._p(f"{prefix}_bq"), b_q, t_q)
        k = heads(nc.matmul(kv_in, self._p(f"{prefix}_wk")), b_kv, t_kv)
        v = heads(nc.matmul(kv_in, self._p(f"{prefix}_wv")) + self._p(f"{prefix}_bv"), b_kv, t_kv)

        scores = nc.matmul(q, k.transpose((0, 1, 3, 2))) * (1.0 / math.sqrt(dk))
        if mask is not None:
            scores = nc.mask_fill(scores, mask, _MASK_FILL)
        mixed = nc.matmul(nc.softmax(scores), v)
        merged = mixed.transpose((0, 2, 1, 3)).reshape((b_q, t_q, d))
        return nc.matmul(merged, self._p(f"{prefix}_wo")) + self._p(f"{prefix}_bo")

    def _ffn(self, x: Tensor, base: str) -> Tensor:
        hid = nc.matmul(x, self._p(f"{base}.ffn_w1")) + self._p(f"{base}.ffn_b1")
        act = _gelu(hid)
        return nc.matmul(act, self._p(f"{base}.ffn_w2")) + self._p(f"{base}.ffn_b2")

    def _embed(self, ids: np.ndarray) -> Tensor:
        b, t = ids.shape
        if t > self.cfg.max_positions:
            raise ShapeError(f"sequence length {t} exceeds max_positions {self.cfg.max_positions}")
        tok = nc.embedding(self._p("tok_emb"), ids)
        pos = nc.embedding(self._p("pos_emb"), np.arange(t))
        return tok + pos

    # -- encoder / decoder stacks ----------------------------------------

    def encode_source(self, encoder_ids: np.ndarray, train: bool = False,
                      rng=None) -> EncoderState:
        encoder_ids = np.asarray(encoder_ids, dtype=np.int64)
        if encoder_ids.ndim == 1:
            encoder_ids = encoder_ids[None, :]
        if encoder_ids.shape[1] == 0:
            return EncoderState(output=None, key_pad_mask=None)
        pad = encoder_ids == PAD_ID
        key_mask = pad[:, None, None, :]
        x = self._embed(encoder_ids)
        for i in range(self.cfg.n_layers):
            base = f"enc.{i}"
            normed = self._layer_norm(x, self._p(f"{base}.ln1_g"), self._p(f"{base}.ln1_b"))
            x = x + self._dropout(self._attention(normed, normed, f"{base}.self", key_mask),
                                  train, rng)
            normed = self._layer_norm(x, self._p(f"{base}.ln2_g"), self._p(f"{base}.ln2_b"))
            x = x + self._dropout(self._ffn(normed, base), train, rng)
        x = self._layer_norm(x, self._p("enc_ln_g"), self._p("enc_ln_b"))
        return EncoderState(output=x, key_pad_mask=key_mask)

    def _decode_stack(self, decoder_ids: np.ndarray, enc: EncoderState,
                      train: bool = False, rng=None) -> Tensor:
        b, t = decoder_ids.shape
        causal = np.triu(np.ones((t, t), dtype=bool), k=1)
        x = self._embed(decoder_ids)
        for i in range(self.cfg.n_layers):
            base = f"dec.{i}"
            normed = self._layer_norm(x, self._p(f"{base}.ln1_g"), self._p(f"{base}.ln1_b"))
            x = x + self._dropout(self._attention(normed, normed, f"{base}.self", causal),
                                  train, rng)
            if enc.output is not None:
                normed = self._layer_norm(x, self._p(f"{base}.ln2_g"), self._p(f"{base}.ln2_b"))
                x = x + self._dropout(
                    self._attention(normed, enc.output, f"{base}.cross", enc.key_pad_mask),
                    train, rng)
            normed = self._layer_norm(x, self._p(f"{base}.ln3_g"), self._p(f"{base}.ln3_b"))
            x = x + self._dropout(self._ffn(normed, base), train, rng)
        return self._layer_norm(x, self._p("dec_ln_g"), self._p("dec_ln_b"))

    def _logits(self, dec_out: Tensor) -> Tensor:
        proj = nc.matmul(dec_out, self._p("tok_emb").transpose((1, 0)))
        return proj + self._p("out_bias")

    # -- public passes ----------------------------------------------------

    def forward(self, batch: Batch, train: bool = False, rng=None) -> Tensor:
        """Log-softmax over the vocabulary at each target position, teacher
        forced on `batch.decoder_in_ids`."""
        enc = self.encode_source(batch.encoder_ids, train=train, rng=rng)
        dec_out = self._decode_stack(np.asarray(batch.decoder_in_ids, dtype=np.int64),
                                     enc, train=train, rng=rng)
        return nc.log_softmax(self._logits(dec_out))

    def step(self, enc: EncoderState, prefix_ids: np.ndarray) -> np.ndarray:
        """Next-token log-probabilities for one or more BOS-prefixed rows;
        equal to the last position of forward() on the same prefix."""
        prefix = np.asarray(prefix_ids, dtype=np.int64)
        squeeze = prefix.ndim == 1
        if squeeze:
            prefix = prefix[None, :]
        if prefix.shape[1] == 0:
            raise ShapeError("step needs a non-empty prefix starting with BOS")
        if not (prefix[:, 0] == BOS_ID).all():
            raise ShapeError("step prefix must start with BOS")
        dec_out = self._decode_stack(prefix, enc)
        logp = nc.log_softmax(self._logits(dec_out)).data[:, -1, :]
        return logp[0] if squeeze else logp


def _gelu(x: Tensor) -> Tensor:
    # tanh approximation; smooth everywhere, which finite-difference
    # gradient checks rely on. Cube via muls: float-exponent pow is slow.
    c = math.sqrt(2.0 / math.pi)
    inner = (x + x * x * x * 0.044715) * c
    return x * 0.5 * (nc.tanh(inner) + 1.0)


# -- checkpoints ---------------------------------------------------------------


def save_model(model: SeqModel, path) -> None:
    meta = {"version": _CHECKPOINT_VERSION, "config": model.cfg.to_dict()}
    arrays = {k: v.data for k, v in model.params.items()}
    with open(path, "wb") as f:
        np.savez(f, __meta__=np.array(json.dumps(meta)), **arrays)


def load_model(path, expected_cfg: ModelConfig | None = None) -> SeqModel:
    try:
        archive = np.load(path, allow_pickle=False)
    except (OSError, ValueError, zipfile.BadZipFile) as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    with archive:
        if "__meta__" not in archive:
            raise CheckpointError(f"checkpoint {path} has no metadata entry")
        meta = json.loads(str(archive["__meta__"]))
        if meta.get("version") != _CHECKPOINT_VERSION:
            raise CheckpointError(
                f"checkpoint {path} has version {meta.get('version')}, "
                f"expected {_CHECKPOINT_VERSION}")
        cfg = ModelConfig.from_dict(meta["config"])
        if expected_cfg is not None and cfg != expected_cfg:
            diffs = [f.name for f in dataclasses.fields(ModelConfig)
                     if getattr(cfg, f.name) != getattr(expected_cfg, f.name)]
            raise CheckpointError(f"checkpoint {path} config mismatch on fields: {diffs}")
        model = SeqModel(cfg)
        stored = set(archive.files) - {"__meta__"}
        expected = set(model.params)
        if stored != expected:
            raise CheckpointError(
                f"checkpoint {path} parameter set mismatch: "
                f"missing {sorted(expected - stored)}, unexpected {sorted(stored - expected)}")
        for name, p in model.params.items():
            arr = archive[name]
            if arr.shape != p.data.shape:
                raise CheckpointError(
                    f"checkpoint {path}: parameter {name} has shape {arr.shape}, "
                    f"expected {p.data.shape}")
            p.data = arr.astype(np.float64)
    return model
