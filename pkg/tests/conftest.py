import numpy as np
import pytest

from siaseq.data import BOS_ID, EOS_ID, PAD_ID, Batch
from siaseq.model import ModelConfig, SeqModel

# smallest architecture the config validator allows; ~520 parameters, small
# enough for full finite-difference sweeps
TINY_CFG = ModelConfig(vocab_size=8, max_positions=8, n_layers=1, hidden=4,
                       heads=2, ffn_mult=2, seed=0)


def make_tiny_model(seed: int = 0, init_std: float = 0.02) -> SeqModel:
    cfg = ModelConfig(vocab_size=TINY_CFG.vocab_size,
                      max_positions=TINY_CFG.max_positions,
                      n_layers=TINY_CFG.n_layers, hidden=TINY_CFG.hidden,
                      heads=TINY_CFG.heads, ffn_mult=TINY_CFG.ffn_mult,
                      init_std=init_std, seed=seed)
    return SeqModel(cfg)


def random_batch(rng: np.random.Generator, vocab_size: int = 8, b: int = 2,
                 s: int = 4, t: int = 4, with_pad: bool = True) -> Batch:
    """Random content ids in [5, vocab_size); realistic layout with BOS,
    EOS and optional PAD tail."""
    content = lambda size: rng.integers(5, vocab_size, size=size)
    enc = np.full((b, s), PAD_ID, dtype=np.int64)
    dec_in = np.full((b, t), PAD_ID, dtype=np.int64)
    dec_tgt = np.full((b, t), PAD_ID, dtype=np.int64)
    for i in range(b):
        src_len = int(rng.integers(1, s + 1)) if with_pad else s
        tgt_len = int(rng.integers(1, t)) if with_pad else t - 1
        enc[i, :src_len] = content(src_len)
        body = content(tgt_len)
        dec_in[i, 0] = BOS_ID
        dec_in[i, 1:tgt_len + 1] = body
        dec_tgt[i, :tgt_len] = body
        dec_tgt[i, tgt_len] = EOS_ID
    return Batch(encoder_ids=enc, decoder_in_ids=dec_in,
                 decoder_target_ids=dec_tgt, target_mask=dec_tgt != PAD_ID)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
