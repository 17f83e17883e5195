"""Training objectives over per-token log-probabilities.

`mle_loss` is teacher-forced cross entropy: per sequence the sum of
-log p(y_t | y_<t) over unmasked positions, averaged over the batch.

`sia_loss` re-weights that objective by the model's own confidence so easy,
already-mastered targets stop dominating training:

    token weight     w_t = (1 - p(y_t | y_<t)) ** alpha
    sentence weight  w_s = (1 - prod_t p(y_t | y_<t)) ** beta
    per-sequence     L   = -w_s * sum_t w_t * log p(y_t | y_<t)

Both weights live in [0, 1] and shrink as confidence grows; alpha = beta = 0
recovers MLE exactly. The sentence confidence product is evaluated in log
space (sum of log p clamped to <= -1e-12) because products of hundreds of
probabilities underflow in linear space.

With `detach_weights` (default) the weights scale gradients but are not
differentiated through: the gradient is that of the weighted-MLE surrogate
with the weights frozen at their current values. Setting it false
differentiates through both weights (the focal-loss convention).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .errors import ConfigError, ShapeError
from .numcore import Tensor

_SENT_LOGCONF_CAP = -1e-12


@dataclass
class SIAConfig:
    alpha: float = 0.0
    beta: float = 0.0
    detach_weights: bool = True

    def validate(self) -> None:
        if self.alpha < 0.0 or self.beta < 0.0:
            raise ConfigError(f"alpha and beta must be >= 0, got ({self.alpha}, {self.beta})")

    def to_dict(self) -> dict:
        return {"alpha": self.alpha, "beta": self.beta,
                "detach_weights": self.detach_weights}

    @classmethod
    def from_dict(cls, d: dict) -> "SIAConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown SIAConfig keys: {sorted(unknown)}")
        cfg = cls(**d)
        cfg.validate()
        return cfg


@dataclass
class LossOutput:
    loss: Tensor                 # scalar, differentiable
    per_token_conf: np.ndarray   # [B, T] p(y_t | y_<t)
    sent_conf: np.ndarray        # [B]    prod over unmasked t
    w_t: np.ndarray              # [B, T]
    w_s: np.ndarray              # [B]


def _gather_token_logp(log_probs: Tensor, targets: np.ndarray,
                       mask: np.ndarray) -> tuple[Tensor, np.ndarray]:
    targets = np.asarray(targets, dtype=np.int64)
    mask = np.asarray(mask, dtype=bool)
    if log_probs.ndim != 3:
        raise ShapeError(f"log_probs must be [B, T, V], got shape {log_probs.shape}")
    if targets.shape != log_probs.shape[:2] or mask.shape != targets.shape:
        raise ShapeError(
            f"targets/mask shape {targets.shape}/{mask.shape} must match "
            f"log_probs leading shape {log_probs.shape[:2]}")
    v = log_probs.shape[-1]
    if targets.size and (targets.min() < 0 or targets.max() >= v):
        raise ShapeError(f"target ids out of range for vocabulary of size {v}")
    return nc.take_along_last(log_probs, targets), mask


def _reduce(tok_logp: Tensor, maskf: np.ndarray, w_t, w_s) -> Tensor:
    """mean over sequences of -w_s * sum_t w_t * mask * log p. Shared by both
    losses so the alpha=beta=0 case reduces to MLE bit for bit."""
    term = nc.mul(nc.mul(tok_logp, w_t), maskf)
    per_seq = nc.mul(term.sum(axis=1), w_s)
    return nc.mul(per_seq.mean(), -1.0)


def mle_loss(log_probs: Tensor, targets: np.ndarray, mask: np.ndarray) -> LossOutput:
    tok_logp, mask = _gather_token_logp(log_probs, targets, mask)
    maskf = mask.astype(np.float64)
    b, t = mask.shape
    conf = np.exp(tok_logp.data)
    sent_conf = np.exp((tok_logp.data * maskf).sum(axis=1))
    loss = _reduce(tok_logp, maskf, 1.0, 1.0)
    return LossOutput(loss=loss, per_token_conf=conf, sent_conf=sent_conf,
                      w_t=np.ones((b, t)), w_s=np.ones(b))


def sia_weights(per_token_conf: np.ndarray, mask: np.ndarray,
                cfg: SIAConfig) -> tuple[np.ndarray, np.ndarray]:
    """Modulating factors from detached confidences; both land in [0, 1]."""
    cfg.validate()
    conf = np.clip(np.asarray(per_token_conf, dtype=np.float64), 1e-300, 1.0)
    maskf = np.asarray(mask, dtype=bool).astype(np.float64)
    w_t = np.power(1.0 - conf, cfg.alpha)
    log_sent = np.minimum((np.log(conf) * maskf).sum(axis=1), _SENT_LOGCONF_CAP)
    w_s = np.exp(cfg.beta * np.log1p(-np.exp(log_sent)))
    return w_t, w_s


def sia_loss(log_probs: Tensor, targets: np.ndarray, mask: np.ndarray,
             cfg: SIAConfig) -> LossOutput:
    cfg.validate()
    tok_logp, mask = _gather_token_logp(log_probs, targets, mask)
    maskf = mask.astype(np.float64)
    conf = np.exp(tok_logp.data)
    sent_conf = np.exp((tok_logp.data * maskf).sum(axis=1))

    if cfg.detach_weights:
        w_t, w_s = sia_weights(conf, mask, cfg)
        loss = _reduce(tok_logp, maskf, w_t, w_s)
        return LossOutput(loss=loss, per_token_conf=conf, sent_conf=sent_conf,
                          w_t=w_t, w_s=w_s)

    # differentiate through the weights as well
    p = nc.exp(tok_logp)
    w_t_t = nc.power(nc.sub(1.0, p), cfg.alpha)
    log_sent = nc.clamp_max(nc.mul(tok_logp, maskf).sum(axis=1), _SENT_LOGCONF_CAP)
    w_s_t = nc.exp(nc.mul(nc.log(nc.sub(1.0, nc.exp(log_sent))), cfg.beta))
    loss = _reduce(tok_logp, maskf, w_t_t, w_s_t)
    return LossOutput(loss=loss, per_token_conf=conf, sent_conf=sent_conf,
                      w_t=w_t_t.data.copy(), w_s=w_s_t.data.copy())
