"""Synthetic planted-object VQA task.

Each image is a grid of patch vectors laid out as

    [marker | color one-hot (4) | shape one-hot (4) | texture (3)]

A planted object occupies ``n_planted`` random patches: they carry a raised
marker and share the object's color and shape.  Every other patch carries a
random distractor color/shape with no marker.  The query asks for either the
color or the shape; the answer token is read off the planted patches only.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

N_COLORS = 4
N_SHAPES = 4
N_TEXTURE = 3
PATCH_DIM = 1 + N_COLORS + N_SHAPES + N_TEXTURE

COLOR_TOKENS = tuple(range(0, N_COLORS))
SHAPE_TOKENS = tuple(range(N_COLORS, N_COLORS + N_SHAPES))
ASK_COLOR = 8
ASK_SHAPE = 9
QUESTION = 10
MIN_VOCAB = 11

MARKER = 1.5
# per-patch attribute noise on the object: one patch alone is an unreliable
# witness, so answering well needs most of the planted set
SIGNAL_NOISE = 0.6
# strength of the random color/shape one-hots carried by background patches
DISTRACTOR = 0.5
_COLOR = slice(1, 1 + N_COLORS)
_SHAPE = slice(1 + N_COLORS, 1 + N_COLORS + N_SHAPES)
_TEXTURE = slice(1 + N_COLORS + N_SHAPES, PATCH_DIM)

FORMAT_VERSION = 1


@dataclass
class SyntheticSample:
    image: np.ndarray      # (rows, cols, PATCH_DIM)
    planted: np.ndarray    # sorted flat patch indices
    query: np.ndarray      # token ids
    answer: int


@dataclass
class Dataset:
    images: np.ndarray     # (n, rows, cols, PATCH_DIM)
    planted: np.ndarray    # (n, n_planted)
    queries: np.ndarray    # (n, 2)
    answers: np.ndarray    # (n, 1)
    seed: int = 0
    vocab: int = 16

    def __len__(self):
        return len(self.images)

    def __getitem__(self, i) -> SyntheticSample:
        return SyntheticSample(self.images[i], self.planted[i], self.queries[i], int(self.answers[i, 0]))

    @property
    def grid(self) -> tuple[int, int]:
        return self.images.shape[1], self.images.shape[2]

    @property
    def n_vision(self) -> int:
        return self.images.shape[1] * self.images.shape[2]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.images[idx], self.planted[idx], self.queries[idx], self.answers[idx], self.seed, self.vocab)


def label(image, planted, query) -> int:
    """Answer token implied by the planted patches' contents and the query."""
    flat = np.asarray(image).reshape(-1, PATCH_DIM)[np.asarray(planted)]
    ask = int(query[-1])
    if ask == ASK_COLOR:
        return COLOR_TOKENS[int(np.argmax(flat[:, _COLOR].mean(axis=0)))]
    if ask == ASK_SHAPE:
        return SHAPE_TOKENS[int(np.argmax(flat[:, _SHAPE].mean(axis=0)))]
    raise ValueError(f"unknown query token {ask}")


def _background(rng, n):
    patch = np.zeros((n, PATCH_DIM))
    patch[:, 0] = rng.normal(0.0, 0.3, n)
    patch[np.arange(n), 1 + rng.integers(0, N_COLORS, n)] = DISTRACTOR
    patch[np.arange(n), 1 + N_COLORS + rng.integers(0, N_SHAPES, n)] = DISTRACTOR
    patch[:, 1:] += rng.normal(0.0, 0.15, (n, PATCH_DIM - 1))
    patch[:, _TEXTURE] = rng.normal(0.0, 1.0, (n, N_TEXTURE))
    return patch


def resample_background(image, planted, rng) -> np.ndarray:
    """Redraw every non-planted patch; the label must not change."""
    img = np.array(image, dtype=np.float64)
    flat = img.reshape(-1, PATCH_DIM)
    mask = np.ones(len(flat), dtype=bool)
    mask[np.asarray(planted)] = False
    flat[mask] = _background(rng, int(mask.sum()))
    return img


def generate_dataset(n_samples: int, grid=(8, 8), n_planted: int = 6, vocab: int = 16, seed: int = 0) -> Dataset:
    rows, cols = grid
    n_vision = rows * cols
    if not 1 <= n_planted <= n_vision:
        raise ValueError(f"n_planted={n_planted} infeasible for a {rows}x{cols} grid")
    if vocab < MIN_VOCAB:
        raise ValueError(f"vocab must be at least {MIN_VOCAB}")
    if n_samples < 0:
        raise ValueError("n_samples must be nonnegative")
    rng = np.random.default_rng([seed, 5])
    images = np.zeros((n_samples, rows, cols, PATCH_DIM))
    planted = np.zeros((n_samples, n_planted), dtype=np.int64)
    queries = np.zeros((n_samples, 2), dtype=np.int64)
    answers = np.zeros((n_samples, 1), dtype=np.int64)
    classes = np.arange(n_samples)
    rng.shuffle(classes)
    for i in range(n_samples):
        c = int(classes[i])
        ask_color = c % 2 == 0
        value = (c // 2) % 4
        color = value if ask_color else int(rng.integers(N_COLORS))
        shape = int(rng.integers(N_SHAPES)) if ask_color else value
        flat = _background(rng, n_vision)
        where = np.sort(rng.choice(n_vision, n_planted, replace=False))
        obj = np.zeros((n_planted, PATCH_DIM))
        obj[:, 0] = MARKER + rng.normal(0.0, 0.2, n_planted)
        obj[:, 1 + color] = 1.0
        obj[:, 1 + N_COLORS + shape] = 1.0
        obj[:, 1:] += rng.normal(0.0, SIGNAL_NOISE, (n_planted, PATCH_DIM - 1))
        obj[:, _TEXTURE] = rng.normal(0.0, 1.0, (n_planted, N_TEXTURE))
        flat[where] = obj
        images[i] = flat.reshape(rows, cols, PATCH_DIM)
        planted[i] = where
        queries[i] = (QUESTION, ASK_COLOR if ask_color else ASK_SHAPE)
        answers[i, 0] = label(images[i], where, queries[i])
    return Dataset(images, planted, queries, answers, seed, vocab)


# -- persistence ------------------------------------------------------------

def _u32(n):
    return struct.pack("<I", int(n))


def _encode_sample(s: SyntheticSample) -> bytes:
    rows, cols, ch = s.image.shape
    out = [_u32(rows), _u32(cols), _u32(ch), np.ascontiguousarray(s.image, dtype="<f8").tobytes()]
    out += [_u32(len(s.planted))] + [_u32(i) for i in s.planted]
    out += [_u32(len(s.query))] + [_u32(t) for t in s.query]
    out.append(_u32(s.answer))
    return b"".join(out)


def _decode_sample(buf: bytes) -> SyntheticSample:
    off = 0

    def u32():
        nonlocal off
        (v,) = struct.unpack_from("<I", buf, off)
        off += 4
        return v

    rows, cols, ch = u32(), u32(), u32()
    n = rows * cols * ch
    image = np.frombuffer(buf, dtype="<f8", count=n, offset=off).reshape(rows, cols, ch).astype(np.float64)
    off += 8 * n
    planted = np.array([u32() for _ in range(u32())], dtype=np.int64)
    query = np.array([u32() for _ in range(u32())], dtype=np.int64)
    answer = u32()
    if off != len(buf):
        raise ValueError("trailing bytes in sample record")
    return SyntheticSample(image, planted, query, answer)


def save_dataset(ds: Dataset, path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    rows, cols = ds.grid
    manifest = {
        "format": FORMAT_VERSION,
        "n_samples": len(ds),
        "grid_rows": rows,
        "grid_cols": cols,
        "patch_dim": PATCH_DIM,
        "n_planted": ds.planted.shape[1],
        "vocab": ds.vocab,
        "seed": ds.seed,
    }
    (path / "manifest").write_text("".join(f"{k} = {v}\n" for k, v in manifest.items()))
    for i in range(len(ds)):
        (path / f"sample_{i:06d}.bin").write_bytes(_encode_sample(ds[i]))


def load_dataset(path) -> Dataset:
    path = Path(path)
    manifest = {}
    for line in (path / "manifest").read_text().splitlines():
        if line.strip():
            k, _, v = line.partition("=")
            manifest[k.strip()] = int(v.strip())
    if manifest.get("format") != FORMAT_VERSION:
        raise ValueError(f"unsupported dataset format {manifest.get('format')}")
    samples = [_decode_sample((path / f"sample_{i:06d}.bin").read_bytes()) for i in range(manifest["n_samples"])]
    rows, cols = manifest["grid_rows"], manifest["grid_cols"]
    if not samples:
        return Dataset(np.zeros((0, rows, cols, PATCH_DIM)), np.zeros((0, manifest["n_planted"]), dtype=np.int64),
                       np.zeros((0, 2), dtype=np.int64), np.zeros((0, 1), dtype=np.int64),
                       manifest["seed"], manifest["vocab"])
    return Dataset(
        np.stack([s.image for s in samples]),
        np.stack([s.planted for s in samples]),
        np.stack([s.query for s in samples]),
        np.array([[s.answer] for s in samples], dtype=np.int64),
        manifest["seed"], manifest["vocab"],
    )
