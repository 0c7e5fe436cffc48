"""Analytic prefill/decode FLOPs and KV-cache size for full and pruned runs.

All counts are exact Python integers.  A multiply-accumulate counts as two
FLOPs.  Per decoder layer with ``N`` live tokens the prefill cost is

    2 N (4 d^2 + 2 d d_ffn)  +  4 N^2 d

(Q/K/V/O projections and the two FFN matrices, then QK^T and AV).
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, replace
from typing import Iterable, Sequence


@dataclass(frozen=True)
class CostConfig:
    n_layers: int
    d_model: int
    d_ffn: int
    n_heads: int
    n_vision: int
    n_text: int = 32
    n_decode: int = 0
    bytes_per_kv_element: int = 2
    encoder_flops: int = 0

    def __post_init__(self):
        for name in ("n_layers", "d_model", "d_ffn", "n_heads", "bytes_per_kv_element"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        for name in ("n_vision", "n_text", "n_decode", "encoder_flops"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")


def transformer_flops(n_layers: int, d: int, d_ffn: int, n_tokens: int) -> int:
    """Dense forward FLOPs of a uniform stack; also used for encoder constants."""
    n = int(n_tokens)
    return n_layers * (2 * n * (4 * d * d + 2 * d * d_ffn) + 4 * n * n * d)


# vision tower of the 7B preset (ViT-L/14 at 336 px: 576 patches + CLS)
VIT_L14_336_FLOPS = transformer_flops(24, 1024, 4096, 577)

LLAVA7B = CostConfig(
    n_layers=32, d_model=4096, d_ffn=11008, n_heads=32, n_vision=576,
    n_text=32, n_decode=16, bytes_per_kv_element=2, encoder_flops=VIT_L14_336_FLOPS,
)

PRESETS = {"llava7b": LLAVA7B}


def vision_per_layer(cfg: CostConfig, r1: int | None = None, r2: int | None = None,
                     k: int | None = None) -> list[int]:
    """Vision tokens alive in each decoder layer; ``None`` budget means unpruned."""
    if r1 is None:
        return [cfg.n_vision] * cfg.n_layers
    if r2 is None or k is None:
        raise ValueError("a pruned run needs r1, r2 and k")
    if not 0 <= k <= cfg.n_layers:
        raise ValueError(f"k={k} outside [0, {cfg.n_layers}]")
    return [int(r1)] * k + [int(r2)] * (cfg.n_layers - k)


def _budget(plan):
    if plan is None:
        return None, None, None
    return plan.r1, plan.r2, plan.k


def prefill_flops(cfg: CostConfig, plan=None, quadratic: bool = True) -> int:
    """``plan`` is anything with ``r1``, ``r2``, ``k`` attributes, or ``None``."""
    d, f = cfg.d_model, cfg.d_ffn
    total = cfg.encoder_flops
    for nv in vision_per_layer(cfg, *_budget(plan)):
        n = nv + cfg.n_text
        total += 2 * n * (4 * d * d + 2 * d * f)
        if quadratic:
            total += 4 * n * n * d
    return total


def decode_flops(cfg: CostConfig, plan=None) -> int:
    """FLOPs of ``n_decode`` single-token steps against the retained cache."""
    d, f = cfg.d_model, cfg.d_ffn
    total = 0
    for nv in vision_per_layer(cfg, *_budget(plan)):
        ctx = nv + cfg.n_text
        for t in range(cfg.n_decode):
            total += 2 * (4 * d * d + 2 * d * f) + 4 * (ctx + t + 1) * d
    return total


def kv_bytes(cfg: CostConfig, plan=None) -> int:
    per_token = 2 * cfg.d_model * cfg.bytes_per_kv_element
    return sum((nv + cfg.n_text + cfg.n_decode) * per_token for nv in vision_per_layer(cfg, *_budget(plan)))


@dataclass(frozen=True)
class CostReport:
    scenario: str
    prefill_flops: int
    decode_flops: int
    kv_bytes: int
    ratio_flops: float = 1.0
    ratio_kv: float = 1.0

    def against(self, reference: "CostReport") -> "CostReport":
        """Reduction ratios ``reference / self`` (>= 1 when self is cheaper)."""
        rf = reference.prefill_flops / self.prefill_flops if self.prefill_flops else float("inf")
        rk = reference.kv_bytes / self.kv_bytes if self.kv_bytes else float("inf")
        return replace(self, ratio_flops=rf, ratio_kv=rk)


def cost_report(cfg: CostConfig, plan=None, scenario: str | None = None) -> CostReport:
    """Report for ``plan``, with ratios against the unpruned run of ``cfg``."""
    if scenario is None:
        scenario = "full" if plan is None else f"T={_fmt(plan.T)}"
    full = CostReport("full", prefill_flops(cfg), decode_flops(cfg), kv_bytes(cfg))
    rep = CostReport(scenario, prefill_flops(cfg, plan), decode_flops(cfg, plan), kv_bytes(cfg, plan))
    return rep.against(full)


def _fmt(x) -> str:
    return str(int(x)) if float(x).is_integer() else repr(float(x))


CSV_COLUMNS = ("scenario", "prefill_flops", "kv_bytes", "ratio_flops", "ratio_kv")


def reports_to_csv(reports: Iterable[CostReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in reports:
        w.writerow([r.scenario, r.prefill_flops, r.kv_bytes, f"{r.ratio_flops:.6f}", f"{r.ratio_kv:.6f}"])
    return buf.getvalue()


def write_csv(reports: Sequence[CostReport], path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(reports_to_csv(reports))
