"""Toy vision encoder: patch tokens plus a prepended [CLS] under global attention."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import layers
from .autodiff import Tensor, rms_norm


@dataclass(frozen=True)
class EncoderConfig:
    patch_grid: tuple[int, int] = (8, 8)
    patch_dim: int = 12
    d_model: int = 32
    n_layers: int = 4
    n_heads: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.n_vision < 4:
            raise ValueError(f"patch grid {self.patch_grid} gives fewer than 4 patches")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")

    @property
    def n_vision(self) -> int:
        return self.patch_grid[0] * self.patch_grid[1]


@dataclass
class EncodedImage:
    tokens: np.ndarray           # (N_v, d), [CLS] excluded
    attention: np.ndarray        # (E, H, N_v + 1, N_v + 1)

    @property
    def n_vision(self) -> int:
        return self.tokens.shape[-2]


class VisionEncoder:
    """Frozen, seeded random-weight stand-in for a pretrained ViT."""

    def __init__(self, cfg: EncoderConfig, params: dict[str, np.ndarray] | None = None):
        self.cfg = cfg
        if params is None:
            params = self._init_params()
        self.params = {k: Tensor(v) for k, v in params.items()}

    def _init_params(self) -> dict[str, np.ndarray]:
        cfg = self.cfg
        rng = np.random.default_rng([cfg.seed, 1])
        d = cfg.d_model
        p = {
            "patch_w": rng.normal(0.0, 1.0 / np.sqrt(cfg.patch_dim), (cfg.patch_dim, d)),
            "patch_b": np.zeros(d),
            "cls": rng.normal(0.0, 1.0, d),
            "pos": rng.normal(0.0, 0.1, (cfg.n_vision + 1, d)),
            "norm": np.ones(d),
        }
        for i in range(cfg.n_layers):
            for k, v in layers.init_block(rng, d, 2 * d).items():
                p[f"L{i}.{k}"] = v
        return p

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def _layer(self, i: int) -> dict[str, Tensor]:
        pre = f"L{i}."
        return {k[len(pre):]: v for k, v in self.params.items() if k.startswith(pre)}

    def encode(self, image) -> EncodedImage:
        """Encode a ``(rows, cols, C)`` patch grid, or a batch ``(B, rows, cols, C)``."""
        cfg = self.cfg
        img = np.asarray(image, dtype=np.float64)
        if img.shape[-3:-1] != tuple(cfg.patch_grid) or img.shape[-1] != cfg.patch_dim:
            raise ValueError(
                f"image grid {img.shape} does not match patch_grid={cfg.patch_grid}, patch_dim={cfg.patch_dim}")
        lead = img.shape[:-3]
        patches = Tensor(img.reshape(*lead, cfg.n_vision, cfg.patch_dim))
        p = self.params
        x = patches @ p["patch_w"] + p["patch_b"]
        cls = np.broadcast_to(p["cls"].data, (*lead, 1, cfg.d_model))
        x = Tensor(np.concatenate([cls, x.data], axis=-2)) + p["pos"]
        maps = []
        for i in range(cfg.n_layers):
            x, probs, _, _ = layers.block(self._layer(i), x, cfg.n_heads, causal=False)
            maps.append(probs.data)
        x = rms_norm(x, p["norm"])
        # layer axis leads for a single image, follows the batch axis otherwise
        att = np.stack(maps, axis=len(lead))
        return EncodedImage(tokens=x.data[..., 1:, :], attention=att)


def encode(image, encoder: VisionEncoder) -> EncodedImage:
    return encoder.encode(image)


def cls_scores(enc: EncodedImage, layer: int | None = None) -> np.ndarray:
    """Head-averaged [CLS]-row attention over patch columns at ``layer``.

    Defaults to the second-to-last encoder layer.
    """
    n_layers = enc.attention.shape[-4]
    if layer is None:
        layer = n_layers - 2
    if not 0 <= layer < n_layers:
        raise IndexError(f"layer {layer} out of range for {n_layers} encoder layers")
    return enc.attention[..., layer, :, 0, 1:].mean(axis=-2)
