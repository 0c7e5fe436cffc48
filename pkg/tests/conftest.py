import numpy as np
import pytest

from learnpruner.decoder import DecoderConfig, ToyDecoder
from learnpruner.encoder import EncoderConfig, VisionEncoder
from learnpruner.lpm import LpmParams
from learnpruner.pipeline import Checkpoint


def central_diff(f, arr, step=1e-5):
    """Independent finite-difference oracle: perturbs ``arr`` in place."""
    out = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = arr[i]
        arr[i] = old + step
        fp = f()
        arr[i] = old - step
        fm = f()
        arr[i] = old
        out[i] = (fp - fm) / (2 * step)
    return out


def relerr(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return np.abs(a - b).max() / max(np.abs(a).max(), np.abs(b).max(), 1e-12)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def small_checkpoint(grid=(4, 4), n_layers=4, seed=0, trained_head=True, max_positions=64):
    enc = VisionEncoder(EncoderConfig(patch_grid=grid, d_model=16, n_layers=2, n_heads=2, seed=seed))
    dec = ToyDecoder(DecoderConfig(n_layers=n_layers, d_model=16, n_heads=2, d_ffn=32,
                                   max_positions=max_positions, seed=seed), 16)
    dec.freeze(True)
    lpm = LpmParams.init(16, seed=seed)
    if trained_head:
        r = np.random.default_rng([seed, 77])
        lpm.w2.data = r.normal(0.0, 1.0, lpm.w2.shape)
        lpm.b2.data = r.normal(0.0, 0.1, 2)
    return Checkpoint(enc, dec, lpm, seed)


@pytest.fixture
def ckpt():
    return small_checkpoint()


TINY = """
encoder.grid_rows = 4
encoder.grid_cols = 4
encoder.d_model = 16
encoder.n_layers = 2
encoder.n_heads = 2
decoder.d_model = 16
decoder.n_heads = 2
decoder.d_ffn = 32
decoder.max_positions = 32
data.n_train = 24
data.n_eval = 6
data.n_planted = 3
pretrain.steps = 10
pretrain.batch_size = 8
train.steps = 8
train.batch_size = 4
budget.T = 3
"""

# L = 32 with room for 144 vision tokens; used for the reference budget table
WIDE = """
encoder.grid_rows = 12
encoder.grid_cols = 12
encoder.d_model = 8
encoder.n_layers = 1
encoder.n_heads = 1
decoder.n_layers = 32
decoder.d_model = 8
decoder.n_heads = 1
decoder.d_ffn = 8
decoder.max_positions = 160
data.n_train = 4
data.n_eval = 2
pretrain.steps = 0
train.steps = 0
budget.T = 64
"""


def tiny_config(text=TINY, **over):
    from learnpruner.pipeline import parse_config, set_config
    cfg = parse_config(text)
    for k, v in over.items():
        cfg = set_config(cfg, k.replace("__", "."), v)
    return cfg
