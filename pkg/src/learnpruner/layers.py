"""Pre-norm transformer block shared by the toy encoder and decoder."""
from __future__ import annotations

import numpy as np

from .autodiff import Tensor, causal_mask, masked_softmax_pruned, rms_norm, softmax_rows


def init_block(rng: np.random.Generator, d: int, d_ffn: int) -> dict[str, np.ndarray]:
    s = 1.0 / np.sqrt(d)
    return {
        "n1": np.ones(d),
        "wq": rng.normal(0.0, s, (d, d)),
        "wk": rng.normal(0.0, s, (d, d)),
        "wv": rng.normal(0.0, s, (d, d)),
        "wo": rng.normal(0.0, s, (d, d)),
        "n2": np.ones(d),
        "w1": rng.normal(0.0, s, (d, d_ffn)),
        "b1": np.zeros(d_ffn),
        "w2": rng.normal(0.0, 1.0 / np.sqrt(d_ffn), (d_ffn, d)),
        "b2": np.zeros(d),
    }


def split_heads(x: Tensor, n_heads: int) -> Tensor:
    *lead, n, d = x.shape
    nd = len(lead)
    y = x.reshape(*lead, n, n_heads, d // n_heads)
    return y.transpose(*range(nd), nd + 1, nd, nd + 2)


def merge_heads(x: Tensor) -> Tensor:
    *lead, h, n, dh = x.shape
    nd = len(lead)
    return x.transpose(*range(nd), nd + 1, nd, nd + 2).reshape(*lead, n, h * dh)


def attention(p: dict, x: Tensor, n_heads: int, causal: bool, keep: Tensor | None = None):
    """Multi-head self-attention over ``x`` of shape ``(..., N, d)``.

    Returns ``(output, probs, k, v)`` with ``probs`` of shape ``(..., H, N, N)``
    and per-head keys/values ``(..., H, N, dh)``.
    """
    n, d = x.shape[-2], x.shape[-1]
    dh = d // n_heads
    q = split_heads(x @ p["wq"], n_heads)
    k = split_heads(x @ p["wk"], n_heads)
    v = split_heads(x @ p["wv"], n_heads)
    logits = q @ k.transpose(*range(k.ndim - 2), k.ndim - 1, k.ndim - 2)
    scale = 1.0 / np.sqrt(dh)
    if keep is None:
        probs = softmax_rows(logits, causal_mask(n) if causal else None, scale=scale)
    else:
        # keep: (..., N) -> insert head axis so it broadcasts over (..., H, N, N)
        kk = keep.reshape(*keep.shape[:-1], 1, keep.shape[-1])
        probs = masked_softmax_pruned(logits, kk, causal=causal, scale=scale)
    out = merge_heads(probs @ v) @ p["wo"]
    return out, probs, k, v


def feed_forward(p: dict, x: Tensor) -> Tensor:
    return ((x @ p["w1"] + p["b1"]).relu() @ p["w2"]) + p["b2"]


def block(p: dict, x: Tensor, n_heads: int, causal: bool, keep: Tensor | None = None):
    att, probs, k, v = attention(p, rms_norm(x, p["n1"]), n_heads, causal, keep)
    h = x + att
    out = h + feed_forward(p, rms_norm(h, p["n2"]))
    return out, probs, k, v
