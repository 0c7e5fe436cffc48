"""Budget allocation, two-stage pruned inference, checkpoints and config files."""
from __future__ import annotations

import math
import struct
import zlib
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from .cost import CostConfig, CostReport, cost_report, transformer_flops
from .decoder import DecoderConfig, SequenceLayout, ToyDecoder, text_to_vision_attention
from .encoder import EncoderConfig, VisionEncoder
from .lpm import LpmParams, predict
from .selector import SelectionResult, round_half_up, stage1_select


class BudgetError(ValueError):
    pass


# -- budget -----------------------------------------------------------------

def default_layer(n_layers: int) -> int:
    """Stage-2 layer at the same depth fraction as 12 of 32."""
    return min(max(1, math.floor(0.375 * n_layers)), n_layers - 1)


def allocate_budget(T: float, L: int, k: int, ratio: float = 3, n_vision: int | None = None) -> tuple[int, int]:
    """Resolve an average vision-token target into ``(R1, R2)``.

    ``R2 = ceil(T L / (k ratio + L - k))`` and ``R1 = ratio * R2``, so the
    layer-averaged count ``(k R1 + (L - k) R2) / L`` never falls below ``T``.
    """
    if T < 1:
        raise BudgetError(f"target T={T} must be at least 1")
    if not 0 < k < L:
        raise BudgetError(f"stage-2 layer k={k} must satisfy 0 < k < L={L}")
    if ratio < 1:
        raise BudgetError(f"ratio {ratio} must be at least 1")
    r2 = math.ceil(_exact(T) * L / (k * _exact(ratio) + (L - k)))
    if float(ratio).is_integer():
        r1 = int(ratio) * r2
    else:
        r1 = round_half_up(ratio * r2)
        if k * r1 + (L - k) * r2 < T * L:
            r1 = math.ceil(ratio * r2)
    if n_vision is not None and r1 > n_vision:
        raise BudgetError(f"budget infeasible: R1={r1} exceeds the {n_vision} available vision tokens "
                          f"(T={T}, L={L}, k={k}, ratio={ratio})")
    return r1, r2


def _exact(x):
    # ceil must not be fooled by binary float noise (e.g. 6.4 * 4)
    return Fraction(str(x)) if isinstance(x, float) else x


@dataclass(frozen=True)
class BudgetPlan:
    T: float
    L: int
    k: int
    ratio: float
    lambda_div: float
    r1: int
    r2: int

    @property
    def average_tokens(self) -> float:
        return (self.k * self.r1 + (self.L - self.k) * self.r2) / self.L


def make_plan(T: float, L: int, k: int | None = None, ratio: float = 3, lambda_div: float = 0.1,
              n_vision: int | None = None) -> BudgetPlan:
    if not 0.0 <= lambda_div <= 1.0:
        raise BudgetError(f"lambda_div={lambda_div} must lie in [0, 1]")
    k = default_layer(L) if k is None else k
    r1, r2 = allocate_budget(T, L, k, ratio, n_vision)
    return BudgetPlan(T, L, k, ratio, lambda_div, r1, r2)


def identity_plan(n_vision: int, L: int, k: int | None = None) -> BudgetPlan:
    return make_plan(n_vision, L, k, ratio=1, lambda_div=0.0, n_vision=n_vision)


# -- checkpoint --------------------------------------------------------------

MAGIC = b"LPRN"
VERSION = 1


class CheckpointError(ValueError):
    pass


class ChecksumError(CheckpointError):
    pass


class VersionError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    encoder: VisionEncoder
    decoder: ToyDecoder
    lpm: LpmParams
    seed: int = 0
    extra: dict[str, float] = field(default_factory=dict)

    @property
    def n_vision(self) -> int:
        return self.encoder.cfg.n_vision


_ENC_FIELDS = ("patch_dim", "d_model", "n_layers", "n_heads", "seed")
_DEC_FIELDS = ("n_layers", "d_model", "n_heads", "d_ffn", "vocab_size", "max_positions", "seed")


def _records(ckpt: Checkpoint) -> dict[str, np.ndarray]:
    ec, dc = ckpt.encoder.cfg, ckpt.decoder.cfg
    rec = {"config/seed": np.array(float(ckpt.seed))}
    rec["config/encoder.grid_rows"] = np.array(float(ec.patch_grid[0]))
    rec["config/encoder.grid_cols"] = np.array(float(ec.patch_grid[1]))
    for f in _ENC_FIELDS:
        rec[f"config/encoder.{f}"] = np.array(float(getattr(ec, f)))
    for f in _DEC_FIELDS:
        rec[f"config/decoder.{f}"] = np.array(float(getattr(dc, f)))
    rec["config/decoder.d_vision"] = np.array(float(ckpt.decoder.d_vision))
    for k, v in ckpt.extra.items():
        rec[f"extra/{k}"] = np.array(float(v))
    for k, v in ckpt.encoder.state().items():
        rec[f"encoder/{k}"] = v
    for k, v in ckpt.decoder.state().items():
        rec[f"decoder/{k}"] = v
    for k, v in ckpt.lpm.state().items():
        rec[f"lpm/{k}"] = v
    return rec


def checkpoint_bytes(ckpt: Checkpoint, version: int = VERSION) -> bytes:
    out = [MAGIC, struct.pack("<H", version)]
    recs = _records(ckpt)
    out.append(struct.pack("<I", len(recs)))
    for name, arr in recs.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr, dtype="<f8")
        out.append(struct.pack("<I", len(raw)) + raw)
        out.append(struct.pack("<I", arr.ndim) + b"".join(struct.pack("<Q", s) for s in arr.shape))
        body = np.ascontiguousarray(arr).tobytes()
        out.append(struct.pack("<Q", len(body)) + body)
    blob = b"".join(out)
    return blob + struct.pack("<I", zlib.crc32(blob))


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(checkpoint_bytes(ckpt))
    tmp.replace(path)


def parse_checkpoint(blob: bytes) -> dict[str, np.ndarray]:
    if len(blob) < 10 or blob[:4] != MAGIC:
        if len(blob) >= 4 and blob[:4] == MAGIC:
            raise ChecksumError("checkpoint truncated")
        raise CheckpointError("not a checkpoint file (bad magic)")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise ChecksumError("checkpoint checksum mismatch (truncated or corrupted file)")
    (version,) = struct.unpack_from("<H", body, 4)
    if version != VERSION:
        raise VersionError(f"checkpoint version {version} is not supported (expected {VERSION})")
    off = 6
    (count,) = struct.unpack_from("<I", body, off)
    off += 4
    recs = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", body, off)
        name = body[off + 4: off + 4 + n].decode("utf-8")
        off += 4 + n
        (ndim,) = struct.unpack_from("<I", body, off)
        shape = struct.unpack_from(f"<{ndim}Q", body, off + 4)
        off += 4 + 8 * ndim
        (nbytes,) = struct.unpack_from("<Q", body, off)
        off += 8
        recs[name] = np.frombuffer(body, dtype="<f8", count=nbytes // 8, offset=off).reshape(shape).astype(np.float64)
        off += nbytes
    if off != len(body):
        raise CheckpointError("trailing bytes after checkpoint records")
    return recs


def load_checkpoint(path) -> Checkpoint:
    recs = parse_checkpoint(Path(path).read_bytes())

    def cfg(name):
        return int(recs[f"config/{name}"])

    def group(prefix):
        return {k[len(prefix):]: v for k, v in recs.items() if k.startswith(prefix)}

    ec = EncoderConfig(patch_grid=(cfg("encoder.grid_rows"), cfg("encoder.grid_cols")),
                       **{f: cfg(f"encoder.{f}") for f in _ENC_FIELDS})
    dc = DecoderConfig(**{f: cfg(f"decoder.{f}") for f in _DEC_FIELDS})
    enc = VisionEncoder(ec, group("encoder/"))
    dec = ToyDecoder(dc, cfg("decoder.d_vision"), group("decoder/"))
    lpm = LpmParams.from_state(group("lpm/"))
    extra = {k: float(v) for k, v in group("extra/").items()}
    return Checkpoint(enc, dec, lpm, cfg("seed"), extra)


# -- inference ---------------------------------------------------------------

@dataclass
class RetainedTrace:
    stage1: SelectionResult
    stage2: np.ndarray          # original patch indices kept from layer k on
    scores: np.ndarray          # LPM keep probabilities per patch


@dataclass
class InferenceResult:
    answer: list[int]
    trace: RetainedTrace
    cost: CostReport
    first_logits: np.ndarray


def cost_config_for(ckpt: Checkpoint, n_text: int, n_decode: int = 0) -> CostConfig:
    ec, dc = ckpt.encoder.cfg, ckpt.decoder.cfg
    enc_flops = transformer_flops(ec.n_layers, ec.d_model, 2 * ec.d_model, ec.n_vision + 1)
    return CostConfig(dc.n_layers, dc.d_model, dc.d_ffn, dc.n_heads, ec.n_vision, n_text, n_decode,
                      encoder_flops=enc_flops)


def _top_rows(scores: np.ndarray, count: int) -> np.ndarray:
    # highest first, ties to the lower index
    return np.sort(np.argsort(-scores, kind="stable")[:count])


def stage2_hook(k: int, r2: int):
    """Hook keeping the ``r2`` vision rows with the highest query attention after layer ``k - 1``."""
    def hook(i, probs, layout):
        if i != k - 1 or r2 >= layout.n_vision:
            return None
        return _top_rows(text_to_vision_attention(probs, layout), r2)
    return hook


def run_inference(ckpt: Checkpoint, image, query, plan: BudgetPlan | None = None,
                  max_new_tokens: int = 1, features: np.ndarray | None = None,
                  scores: np.ndarray | None = None) -> InferenceResult:
    """Two-stage pruned greedy generation; ``plan=None`` runs unpruned.

    ``features`` skips the encoder when already computed; ``scores``
    replaces the LPM importance scores (used by the random baseline).
    """
    n_vision = ckpt.n_vision
    query = np.asarray(query, dtype=np.int64)
    if features is None:
        features = ckpt.encoder.encode(np.asarray(image)).tokens
    if scores is None:
        scores = predict(ckpt.lpm, features).soft.data
    if plan is None:
        sel = SelectionResult(np.arange(n_vision), np.zeros(0, dtype=np.int64))
        hook = None
    else:
        if plan.L != ckpt.decoder.cfg.n_layers:
            raise BudgetError(f"plan is for L={plan.L} but the decoder has {ckpt.decoder.cfg.n_layers} layers")
        if plan.r1 > n_vision:
            raise BudgetError(f"budget infeasible: R1={plan.r1} exceeds {n_vision} vision tokens")
        sel = stage1_select(scores, features, plan.r1, plan.lambda_div)
        hook = stage2_hook(plan.k, plan.r2)
    kept = sel.all
    layout = SequenceLayout(len(kept), len(query))
    emb = ckpt.decoder.embed(features[kept], query, vision_pos=kept,
                             text_pos=np.arange(n_vision, n_vision + len(query)))
    res = ckpt.decoder.prefill(emb, layout, positions=np.concatenate([kept, np.arange(n_vision, n_vision + len(query))]),
                               prune_hook=hook)
    stage2 = kept if plan is None else kept[res.vision_rows[plan.k]]
    logits = res.logits
    answer, cache = [], res.cache
    for step in range(max_new_tokens):
        tok = int(np.argmax(logits))
        answer.append(tok)
        if step + 1 < max_new_tokens:
            logits, cache = ckpt.decoder.decode_step(cache, tok)
    ccfg = cost_config_for(ckpt, len(query), max(max_new_tokens - 1, 0))
    cost = cost_report(ccfg, plan, None if plan is not None else "full")
    return InferenceResult(answer, RetainedTrace(sel, stage2, scores), cost, res.logits)


# -- config file ---------------------------------------------------------------

class ConfigError(ValueError):
    pass


# key -> (type, default, description)
CONFIG_KEYS: dict[str, tuple[type, object, str]] = {
    "seed": (int, 0, "master seed for weights, data and training"),
    "encoder.grid_rows": (int, 8, "patch grid rows"),
    "encoder.grid_cols": (int, 8, "patch grid columns"),
    "encoder.d_model": (int, 32, "encoder width"),
    "encoder.n_layers": (int, 4, "encoder blocks"),
    "encoder.n_heads": (int, 4, "encoder heads"),
    "decoder.n_layers": (int, 4, "decoder blocks L"),
    "decoder.d_model": (int, 32, "decoder width"),
    "decoder.n_heads": (int, 4, "decoder heads"),
    "decoder.d_ffn": (int, 64, "decoder feed-forward width"),
    "decoder.vocab_size": (int, 16, "token vocabulary"),
    "decoder.max_positions": (int, 96, "position table size"),
    "data.n_train": (int, 2000, "training samples"),
    "data.n_eval": (int, 300, "evaluation samples"),
    "data.n_planted": (int, 6, "planted patches per image"),
    "data.fraction": (float, 1.0, "fraction of the training set used for LPM training"),
    "data.path": (str, "", "dataset directory; empty means generate in memory"),
    "pretrain.steps": (int, 1200, "decoder fitting steps before freezing"),
    "pretrain.lr": (float, 3e-3, "decoder fitting learning rate"),
    "pretrain.batch_size": (int, 32, "decoder fitting batch size"),
    "train.steps": (int, 2000, "LPM gradient steps"),
    "train.lr": (float, 0.1, "LPM learning rate"),
    "train.batch_size": (int, 16, "LPM batch size"),
    "train.lambda_loss": (float, 1.0, "weight of the keep-rate loss"),
    "train.tau": (float, 0.0, "target keep ratio"),
    "train.clip_norm": (float, 1.0, "global gradient-norm clip; 0 disables"),
    "train.optimizer": (str, "sgd", "sgd (plain gradient descent) or adam"),
    "budget.T": (float, 6.4, "target average vision tokens per layer"),
    "budget.k": (int, 0, "stage-2 layer; 0 picks floor(0.375 L)"),
    "budget.ratio": (float, 3.0, "R1:R2 ratio"),
    "budget.lambda_div": (float, 0.1, "diversity fraction of R1"),
    "infer.max_new_tokens": (int, 1, "greedy decode length"),
}


def default_config() -> dict:
    return {k: v[1] for k, v in CONFIG_KEYS.items()}


def _coerce(key: str, raw: str):
    typ = CONFIG_KEYS[key][0]
    try:
        if typ is int:
            val = float(raw)
            if not val.is_integer():
                raise ValueError
            return int(val)
        return typ(raw)
    except ValueError:
        raise ConfigError(f"config key {key!r}: cannot parse {raw!r} as {typ.__name__}") from None


def parse_config(text: str, base: dict | None = None) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    cfg = dict(default_config() if base is None else base)
    for no, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {no}: expected 'key = value', got {line!r}")
        key, _, raw = (s.strip() for s in line.partition("="))
        if key not in CONFIG_KEYS:
            raise ConfigError(f"line {no}: unknown config key {key!r}")
        cfg[key] = _coerce(key, raw)
    return cfg


def load_config(path) -> dict:
    return parse_config(Path(path).read_text())


def set_config(cfg: dict, key: str, value) -> dict:
    if key not in CONFIG_KEYS:
        raise ConfigError(f"unknown config key {key!r}")
    out = dict(cfg)
    out[key] = _coerce(key, str(value))
    return out


def format_config(cfg: dict) -> str:
    lines = []
    for key, (_, _, doc) in CONFIG_KEYS.items():
        lines.append(f"# {doc}")
        lines.append(f"{key} = {cfg[key]}")
    return "\n".join(lines) + "\n"
