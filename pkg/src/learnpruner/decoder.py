"""Toy causal language model with KV cache, stage-2 pruning hook and
mask-simulated pruning for training."""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, Optional

import numpy as np

from . import layers
from .autodiff import Tensor, concat, cross_entropy, rms_norm, softmax_rows, take


@dataclass(frozen=True)
class DecoderConfig:
    n_layers: int = 6
    d_model: int = 32
    n_heads: int = 4
    d_ffn: int = 64
    vocab_size: int = 16
    max_positions: int = 96
    seed: int = 0

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.n_layers < 4:
            raise ValueError(f"decoder needs at least 4 layers, got {self.n_layers}")


@dataclass(frozen=True)
class SequenceLayout:
    """Contiguous vision -> query -> answer ranges."""

    n_vision: int
    n_query: int
    n_answer: int = 0

    def __post_init__(self):
        if self.n_query < 1:
            raise ValueError("layout needs at least one query token")
        if self.n_vision < 0 or self.n_answer < 0:
            raise ValueError("negative range length in layout")

    @property
    def vision(self) -> slice:
        return slice(0, self.n_vision)

    @property
    def query(self) -> slice:
        return slice(self.n_vision, self.n_vision + self.n_query)

    @property
    def answer(self) -> slice:
        start = self.n_vision + self.n_query
        return slice(start, start + self.n_answer)

    @property
    def n_text(self) -> int:
        return self.n_query + self.n_answer

    @property
    def total(self) -> int:
        return self.n_vision + self.n_query + self.n_answer


@dataclass
class KVCache:
    keys: list[np.ndarray]        # per layer (H, n_l, dh)
    values: list[np.ndarray]
    positions: list[np.ndarray]   # per layer, original position indices retained
    next_position: int

    def lengths(self) -> list[int]:
        return [len(p) for p in self.positions]

    def total_entries(self) -> int:
        return sum(self.lengths())


@dataclass
class PrefillResult:
    hidden: list[np.ndarray]      # per layer output hidden states (N_l, d)
    attention: list[np.ndarray]   # per layer (H, N_l, N_l)
    cache: KVCache
    logits: np.ndarray            # last-position next-token logits
    layouts: list[SequenceLayout]
    vision_rows: list[np.ndarray]  # per layer, input vision row indices still present


PruneHook = Callable[[int, np.ndarray, SequenceLayout], Optional[np.ndarray]]


class HookError(ValueError):
    pass


class ToyDecoder:
    def __init__(self, cfg: DecoderConfig, d_vision: int, params: dict[str, np.ndarray] | None = None):
        self.cfg = cfg
        self.d_vision = d_vision
        if params is None:
            params = self._init_params()
        self.params = {k: Tensor(v) for k, v in params.items()}

    def _init_params(self) -> dict[str, np.ndarray]:
        cfg = self.cfg
        rng = np.random.default_rng([cfg.seed, 2])
        d = cfg.d_model
        p = {
            "proj_w": rng.normal(0.0, 1.0 / np.sqrt(self.d_vision), (self.d_vision, d)),
            "proj_b": np.zeros(d),
            "tok": rng.normal(0.0, 1.0, (cfg.vocab_size, d)),
            "pos": rng.normal(0.0, 0.1, (cfg.max_positions, d)),
            "norm": np.ones(d),
            "head": rng.normal(0.0, 1.0 / np.sqrt(d), (d, cfg.vocab_size)),
        }
        for i in range(cfg.n_layers):
            for k, v in layers.init_block(rng, d, cfg.d_ffn).items():
                p[f"L{i}.{k}"] = v
        return p

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def freeze(self, flag: bool = True):
        for t in self.params.values():
            t.requires_grad = not flag

    def _layer(self, i: int) -> dict[str, Tensor]:
        pre = f"L{i}."
        return {k[len(pre):]: v for k, v in self.params.items() if k.startswith(pre)}

    # -- embedding -----------------------------------------------------------

    def embed(self, vision_feats, text_ids, vision_pos=None, text_pos=None) -> Tensor:
        """Build ``[proj(vision) || tok(text)]`` plus absolute position embeddings.

        Accepts a single sequence (``(n_v, d_vision)``, ``(n_t,)``) or a batch
        with a leading axis.  Positions default to ``arange`` over the full
        sequence; pruned sequences pass their original indices.
        """
        p = self.params
        vf = vision_feats if isinstance(vision_feats, Tensor) else Tensor(vision_feats)
        ids = np.asarray(text_ids, dtype=np.int64)
        if ids.size and (ids.min() < 0 or ids.max() >= self.cfg.vocab_size):
            raise ValueError(f"token id out of vocabulary range [0, {self.cfg.vocab_size})")
        nv, nt = vf.shape[-2], ids.shape[-1]
        if vision_pos is None:
            vision_pos = np.arange(nv)
        if text_pos is None:
            text_pos = np.arange(nv, nv + nt)
        pos = np.concatenate([np.asarray(vision_pos, dtype=np.int64), np.asarray(text_pos, dtype=np.int64)], axis=-1)
        if pos.size and pos.max() >= self.cfg.max_positions:
            raise ValueError(f"position {pos.max()} exceeds max_positions={self.cfg.max_positions}")
        vis = vf @ p["proj_w"] + p["proj_b"]
        txt = take(p["tok"], ids, axis=0)
        return concat([vis, txt], axis=-2) + take(p["pos"], pos, axis=0)

    def logits(self, hidden) -> Tensor:
        h = hidden if isinstance(hidden, Tensor) else Tensor(hidden)
        return rms_norm(h, self.params["norm"]) @ self.params["head"]

    # -- inference -----------------------------------------------------------

    def run_layers(self, x, start: int = 0, stop: int | None = None) -> np.ndarray:
        """Apply layers ``start..stop-1`` to hidden states without pruning."""
        h = x if isinstance(x, Tensor) else Tensor(x)
        stop = self.cfg.n_layers if stop is None else stop
        for i in range(start, stop):
            h, _, _, _ = layers.block(self._layer(i), h, self.cfg.n_heads, causal=True)
        return h.data

    def prefill(self, embeddings, layout: SequenceLayout, positions=None,
                prune_hook: PruneHook | None = None) -> PrefillResult:
        """Causal forward over one sequence, materializing every attention map.

        After layer ``i`` the hook may return the vision rows (indices into the
        current vision range) that later layers keep; text rows always stay.
        """
        x = embeddings if isinstance(embeddings, Tensor) else Tensor(embeddings)
        if x.ndim != 2 or x.shape[0] != layout.total:
            raise ValueError(f"embeddings {x.shape} do not match layout total {layout.total}")
        pos = np.arange(layout.total) if positions is None else np.asarray(positions, dtype=np.int64)
        vrows = np.arange(layout.n_vision)
        keys, values, kpos, hidden, maps, layouts, rows_trace = [], [], [], [], [], [], []
        for i in range(self.cfg.n_layers):
            layouts.append(layout)
            rows_trace.append(vrows)
            x, probs, k, v = layers.block(self._layer(i), x, self.cfg.n_heads, causal=True)
            keys.append(k.data)
            values.append(v.data)
            kpos.append(pos)
            hidden.append(x.data)
            maps.append(probs.data)
            if prune_hook is None:
                continue
            keep = prune_hook(i, probs.data, layout)
            if keep is None:
                continue
            keep = np.asarray(keep, dtype=np.int64)
            if keep.size == 0:
                raise HookError(f"prune hook at layer {i} returned an empty set")
            if keep.min() < 0 or keep.max() >= layout.n_vision:
                raise HookError(f"prune hook at layer {i} returned indices outside [0, {layout.n_vision})")
            keep = np.unique(keep)
            rows = np.concatenate([keep, np.arange(layout.n_vision, layout.total)])
            if len(rows) != layout.total:
                x = Tensor(x.data[rows])
                pos = pos[rows]
                vrows = vrows[keep]
                layout = replace(layout, n_vision=len(keep))
        last = self.logits(Tensor(x.data[-1:])).data[0]
        cache = KVCache(keys, values, kpos, next_position=int(np.max(kpos[0])) + 1 if layout.total else 0)
        return PrefillResult(hidden, maps, cache, last, layouts, rows_trace)

    def decode_step(self, cache: KVCache, token: int):
        """Feed one token; it attends to each layer's retained cache entries."""
        cfg = self.cfg
        if not 0 <= int(token) < cfg.vocab_size:
            raise ValueError(f"token {token} outside vocabulary of size {cfg.vocab_size}")
        pos = cache.next_position
        if pos >= cfg.max_positions:
            raise ValueError(f"position {pos} exceeds max_positions={cfg.max_positions}")
        p = self.params
        x = Tensor((p["tok"].data[int(token)] + p["pos"].data[pos])[None, :])
        nk, nv, np_ = [], [], []
        h_dim = cfg.d_model // cfg.n_heads
        for i in range(cfg.n_layers):
            lp = self._layer(i)
            h = rms_norm(x, lp["n1"])
            q = layers.split_heads(h @ lp["wq"], cfg.n_heads).data
            k = layers.split_heads(h @ lp["wk"], cfg.n_heads).data
            v = layers.split_heads(h @ lp["wv"], cfg.n_heads).data
            K = np.concatenate([cache.keys[i], k], axis=-2)
            V = np.concatenate([cache.values[i], v], axis=-2)
            probs = softmax_rows(Tensor(q @ np.swapaxes(K, -1, -2)), scale=1.0 / np.sqrt(h_dim))
            att = layers.merge_heads(Tensor(probs.data @ V)) @ lp["wo"]
            hh = x + att
            x = hh + layers.feed_forward(lp, rms_norm(hh, lp["n2"]))
            nk.append(K)
            nv.append(V)
            np_.append(np.append(cache.positions[i], pos))
        logits = self.logits(x).data[0]
        return logits, KVCache(nk, nv, np_, pos + 1)

    # -- training ------------------------------------------------------------

    def masked_forward(self, embeddings: Tensor, layout: SequenceLayout, vision_keep) -> Tensor:
        """Full-length forward with pruned vision columns masked out of attention.

        Returns final hidden states ``(..., N, d)``; differentiable in both the
        embeddings and ``vision_keep``.
        """
        vk = vision_keep if isinstance(vision_keep, Tensor) else Tensor(vision_keep)
        if vk.shape[-1] != layout.n_vision:
            raise ValueError(f"vision_keep length {vk.shape[-1]} != n_vision {layout.n_vision}")
        lead = embeddings.shape[:-2]
        if vk.shape[:-1] != lead:
            vk = vk + Tensor(np.zeros((*lead, layout.n_vision)))
        ones = Tensor(np.ones((*lead, layout.n_text)))
        keep = concat([vk, ones], axis=-1)
        x = embeddings
        for i in range(self.cfg.n_layers):
            x, _, _, _ = layers.block(self._layer(i), x, self.cfg.n_heads, causal=True, keep=keep)
        return x

    def answer_logits(self, embeddings: Tensor, layout: SequenceLayout, vision_keep) -> Tensor:
        """Logits at the positions that predict the answer tokens."""
        h = self.masked_forward(embeddings, layout, vision_keep)
        rows = np.arange(layout.answer.start - 1, layout.answer.stop - 1)
        return self.logits(take(h, rows, axis=-2))

    def training_forward(self, embeddings: Tensor, layout: SequenceLayout, vision_keep, targets) -> Tensor:
        """Mean next-token cross-entropy over the answer positions."""
        if layout.n_answer < 1:
            raise ValueError("training_forward needs at least one answer token")
        return cross_entropy(self.answer_logits(embeddings, layout, vision_keep), targets)


def text_to_vision_attention(attn, layout: SequenceLayout, layer: int | None = None) -> np.ndarray:
    """Mean attention from query rows to vision columns, averaged over heads.

    ``attn`` is either one layer's ``(H, N, N)`` map or a per-layer list /
    stack indexed by ``layer``.
    """
    if layer is not None:
        if not 0 <= layer < len(attn):
            raise IndexError(f"layer {layer} out of range for {len(attn)} layers")
        attn = attn[layer]
    a = np.asarray(attn)
    return a[:, layout.query, layout.vision].mean(axis=(0, 1))
