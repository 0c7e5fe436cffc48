"""Build, evaluate and analyse toy systems on the synthetic task."""
from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .. import lpm
from ..decoder import DecoderConfig, SequenceLayout, ToyDecoder, text_to_vision_attention
from ..encoder import EncoderConfig, VisionEncoder
from ..pipeline import (BudgetError, BudgetPlan, Checkpoint, default_layer, make_plan, run_inference,
                        stage2_hook, _top_rows)
from ..selector import round_half_up
from . import plots
from .data import PATCH_DIM, Dataset, generate_dataset, load_dataset
from .pretrain import pretrain_decoder

log = logging.getLogger(__name__)


# -- building ------------------------------------------------------------------

def build_models(cfg: dict) -> tuple[VisionEncoder, ToyDecoder]:
    seed = cfg["seed"]
    ec = EncoderConfig(patch_grid=(cfg["encoder.grid_rows"], cfg["encoder.grid_cols"]), patch_dim=PATCH_DIM,
                       d_model=cfg["encoder.d_model"], n_layers=cfg["encoder.n_layers"],
                       n_heads=cfg["encoder.n_heads"], seed=seed)
    dc = DecoderConfig(n_layers=cfg["decoder.n_layers"], d_model=cfg["decoder.d_model"],
                       n_heads=cfg["decoder.n_heads"], d_ffn=cfg["decoder.d_ffn"],
                       vocab_size=cfg["decoder.vocab_size"], max_positions=cfg["decoder.max_positions"], seed=seed)
    return VisionEncoder(ec), ToyDecoder(dc, ec.d_model)


def datasets(cfg: dict) -> tuple[Dataset, Dataset]:
    """Train and eval splits: ``data.path/{train,eval}`` if given, else generated."""
    if cfg["data.path"]:
        root = Path(cfg["data.path"])
        return load_dataset(root / "train"), load_dataset(root / "eval")
    grid = (cfg["encoder.grid_rows"], cfg["encoder.grid_cols"])
    kw = dict(grid=grid, n_planted=cfg["data.n_planted"], vocab=cfg["decoder.vocab_size"])
    seed = cfg["seed"]
    return (generate_dataset(cfg["data.n_train"], seed=2 * seed, **kw),
            generate_dataset(cfg["data.n_eval"], seed=2 * seed + 1, **kw))


def train_config(cfg: dict, steps: int | None = None) -> lpm.TrainConfig:
    return lpm.TrainConfig(
        lambda_loss=cfg["train.lambda_loss"], tau=cfg["train.tau"], lr=cfg["train.lr"],
        steps=cfg["train.steps"] if steps is None else steps, batch_size=cfg["train.batch_size"],
        clip_norm=cfg["train.clip_norm"] or None, optimizer=cfg["train.optimizer"], seed=cfg["seed"])


def fraction_subset(ds: Dataset, fraction: float) -> Dataset:
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"data fraction {fraction} must lie in (0, 1]")
    return ds.subset(np.arange(max(1, math.ceil(fraction * len(ds)))))


@dataclass
class System:
    ckpt: Checkpoint
    train: Dataset
    eval: Dataset
    lpm_trace: list = field(default_factory=list)
    pretrain_losses: list = field(default_factory=list)


def pretrained_system(cfg: dict) -> System:
    """Encoder + fitted, frozen decoder + untrained LPM."""
    enc, dec = build_models(cfg)
    train, ev = datasets(cfg)
    feats = enc.encode(train.images).tokens
    losses = []
    if cfg["pretrain.steps"] > 0:
        losses = pretrain_decoder(dec, feats, train.queries, train.answers, steps=cfg["pretrain.steps"],
                                  lr=cfg["pretrain.lr"], batch_size=cfg["pretrain.batch_size"], seed=cfg["seed"])
    dec.freeze(True)
    params = lpm.LpmParams.init(enc.cfg.d_model, seed=cfg["seed"])
    return System(Checkpoint(enc, dec, params, cfg["seed"]), train, ev, [], losses)


def train_lpm(system: System, cfg: dict, steps: int | None = None, fraction: float | None = None) -> System:
    frac = cfg["data.fraction"] if fraction is None else fraction
    data = fraction_subset(system.train, frac)
    enc, dec = system.ckpt.encoder, system.ckpt.decoder
    res = lpm.train(system.ckpt.lpm, enc, dec, data, train_config(cfg, steps))
    ckpt = Checkpoint(enc, dec, res.params, system.ckpt.seed, dict(system.ckpt.extra))
    return System(ckpt, system.train, system.eval, res.trace, system.pretrain_losses)


def build_system(cfg: dict, steps: int | None = None) -> System:
    return train_lpm(pretrained_system(cfg), cfg, steps)


def plan_for(cfg: dict, ckpt: Checkpoint, T=None, k=None, ratio=None, lambda_div=None) -> BudgetPlan:
    L = ckpt.decoder.cfg.n_layers
    k = k if k is not None else (cfg["budget.k"] or default_layer(L))
    return make_plan(cfg["budget.T"] if T is None else T, L, k,
                     cfg["budget.ratio"] if ratio is None else ratio,
                     cfg["budget.lambda_div"] if lambda_div is None else lambda_div,
                     n_vision=ckpt.n_vision)


# -- evaluation ------------------------------------------------------------------

@dataclass
class EvalReport:
    n: int
    accuracy: float
    recall_stage1: float
    recall_stage2: float
    keep_rate: float
    T: float | None = None
    k: int | None = None
    ratio: float | None = None
    lambda_div: float | None = None
    r1: int | None = None
    r2: int | None = None

    def as_row(self) -> dict:
        return asdict(self)


def random_scores(seed: int, index: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, 9, index]).random(n)


def evaluate(ckpt: Checkpoint, dataset: Dataset, plan: BudgetPlan | None, scorer: str = "lpm",
             seed: int = 0, max_new_tokens: int = 1) -> EvalReport:
    """Greedy accuracy and planted recall of both stages over ``dataset``.

    ``scorer='random'`` swaps LPM scores for seeded uniform noise.
    """
    if scorer not in ("lpm", "random"):
        raise ValueError(f"unknown scorer {scorer!r}")
    n = len(dataset)
    feats = ckpt.encoder.encode(dataset.images).tokens if n else np.zeros((0, ckpt.n_vision, 1))
    correct, rec1, rec2, keep = 0, 0.0, 0.0, 0.0
    for i in range(n):
        scores = random_scores(seed, i, ckpt.n_vision) if scorer == "random" else None
        res = run_inference(ckpt, None, dataset.queries[i], plan, max_new_tokens, features=feats[i], scores=scores)
        planted = np.asarray(dataset.planted[i])
        correct += int(res.answer[0] == int(dataset.answers[i, 0]))
        rec1 += np.isin(planted, res.trace.stage1.all).mean()
        rec2 += np.isin(planted, res.trace.stage2).mean()
        keep += float((res.trace.scores >= 0.5).mean())
    d = max(n, 1)
    extra = {} if plan is None else dict(T=plan.T, k=plan.k, ratio=plan.ratio, lambda_div=plan.lambda_div,
                                         r1=plan.r1, r2=plan.r2)
    return EvalReport(n, correct / d, rec1 / d, rec2 / d, keep / d, **extra)


def expected_random_recall(r1: int, n_vision: int) -> float:
    """Hypergeometric mean fraction of planted patches inside a uniform R1-subset."""
    return min(r1, n_vision) / n_vision


# -- CSV helpers -------------------------------------------------------------------

def _cell(v):
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.6f}"
    return str(v)


def rows_to_csv(rows: Sequence[dict], columns: Sequence[str] | None = None) -> str:
    columns = list(columns or (rows[0].keys() if rows else []))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_cell(r.get(c)) for c in columns])
    return buf.getvalue()


# -- attention shift -----------------------------------------------------------------

@dataclass
class ShiftCurves:
    layer: int
    vision: np.ndarray    # mean attention received from vision-token sources
    text: np.ndarray      # mean attention received from text-token sources


def _unpruned_maps(ckpt: Checkpoint, feats: np.ndarray, query) -> tuple[list, SequenceLayout]:
    n_vision = feats.shape[0]
    layout = SequenceLayout(n_vision, len(query))
    emb = ckpt.decoder.embed(feats, query)
    return ckpt.decoder.prefill(emb, layout).attention, layout


def attention_shift_analysis(ckpt: Checkpoint, dataset: Dataset, layer: int) -> ShiftCurves:
    """Per vision index, the attention it receives split by source modality.

    Each entry averages over samples, heads and every source row of that
    modality (rows that cannot see the column under the causal mask count as 0).
    """
    L = ckpt.decoder.cfg.n_layers
    if not 0 <= layer < L:
        raise IndexError(f"layer {layer} out of range for {L} decoder layers")
    if len(dataset) == 0:
        raise ValueError("attention shift analysis needs a nonempty dataset")
    feats = ckpt.encoder.encode(dataset.images).tokens
    vis = np.zeros(ckpt.n_vision)
    txt = np.zeros(ckpt.n_vision)
    for i in range(len(dataset)):
        maps, lay = _unpruned_maps(ckpt, feats[i], dataset.queries[i])
        a = maps[layer]
        vis += a[:, lay.vision, lay.vision].mean(axis=(0, 1))
        txt += a[:, lay.query, lay.vision].mean(axis=(0, 1))
    return ShiftCurves(layer, vis / len(dataset), txt / len(dataset))


def shift_csv(curves: ShiftCurves) -> str:
    rows = [{"index": j, "vision_source": curves.vision[j], "text_source": curves.text[j]}
            for j in range(len(curves.vision))]
    return rows_to_csv(rows, ["index", "vision_source", "text_source"])


def shift_svg(curves: ShiftCurves) -> str:
    return plots.line_chart({"from vision tokens": curves.vision, "from text tokens": curves.text},
                            f"attention received per vision index, layer {curves.layer}",
                            "vision token index", "mean attention")


# -- criteria comparison ------------------------------------------------------------

CRITERIA = ("vision-mean", "text-mean", "last-query", "all-mean")


def criterion_scores(attn: np.ndarray, layout: SequenceLayout, criterion: str) -> np.ndarray:
    """Vision importance from one layer's ``(H, N, N)`` map."""
    a = attn.mean(axis=0)
    if criterion == "vision-mean":
        return a[layout.vision, layout.vision].mean(axis=0)
    if criterion == "text-mean":
        return text_to_vision_attention(attn, layout)
    if criterion == "last-query":
        return a[layout.query.stop - 1, layout.vision]
    if criterion == "all-mean":
        return a[:, layout.vision].mean(axis=0)
    raise ValueError(f"unknown criterion {criterion!r}")


def criteria_comparison(ckpt: Checkpoint, dataset: Dataset, guidance_layers: Sequence[int],
                        prune_layer: int = 2, keep_ratio: float = 0.1) -> list[dict]:
    """Accuracy per (criterion, guidance layer) when vision tokens are pruned
    after ``prune_layer - 1`` using rankings from a precomputed unpruned map."""
    L = ckpt.decoder.cfg.n_layers
    if not 0 < prune_layer < L:
        raise ValueError(f"prune layer {prune_layer} must satisfy 0 < p < {L}")
    for g in guidance_layers:
        if not 0 <= g < L:
            raise IndexError(f"guidance layer {g} out of range for {L} layers")
    if not 0.0 < keep_ratio <= 1.0:
        raise ValueError("keep_ratio must lie in (0, 1]")
    n_vision = ckpt.n_vision
    count = max(1, round_half_up(keep_ratio * n_vision))
    feats = ckpt.encoder.encode(dataset.images).tokens
    hits = {(c, g): 0 for c in CRITERIA for g in guidance_layers}
    dec = ckpt.decoder
    for i in range(len(dataset)):
        q = dataset.queries[i]
        maps, lay = _unpruned_maps(ckpt, feats[i], q)
        emb = dec.embed(feats[i], q)
        gold = int(dataset.answers[i, 0])
        for g in guidance_layers:
            for c in CRITERIA:
                keep = _top_rows(criterion_scores(maps[g], lay, c), count)
                hook = (lambda kp: lambda j, probs, layout: kp if j == prune_layer - 1 and len(kp) < layout.n_vision
                        else None)(keep)
                out = dec.prefill(emb, lay, prune_hook=hook)
                hits[(c, g)] += int(np.argmax(out.logits) == gold)
    n = max(len(dataset), 1)
    return [{"criterion": c, "layer": g, "accuracy": hits[(c, g)] / n} for c in CRITERIA for g in guidance_layers]


def criteria_table(rows: Sequence[dict]) -> str:
    """Criterion x layer accuracy grid."""
    layers = sorted({r["layer"] for r in rows})
    grid = []
    for c in CRITERIA:
        cells = {r["layer"]: r["accuracy"] for r in rows if r["criterion"] == c}
        if cells:
            grid.append({"criterion": c, **{f"layer_{g}": cells[g] for g in layers}})
    return rows_to_csv(grid, ["criterion"] + [f"layer_{g}" for g in layers])


def criteria_svg(rows: Sequence[dict]) -> str:
    layers = sorted({r["layer"] for r in rows})
    series = {c: [next(r["accuracy"] for r in rows if r["criterion"] == c and r["layer"] == g) for g in layers]
              for c in CRITERIA if any(r["criterion"] == c for r in rows)}
    return plots.line_chart(series, "accuracy by pruning criterion", "guidance layer", "accuracy", x=layers)


# -- ablation sweeps --------------------------------------------------------------------

SWEEP_AXES = ("k", "ratio", "lambda_div", "data_fraction")
SWEEP_COLUMNS = ("axis", "value", "T", "L", "k", "ratio", "lambda_div", "r1", "r2", "feasible",
                 "accuracy", "recall_stage1", "recall_stage2", "keep_rate")


def ablation_sweep(axis: str, values: Sequence[float], cfg: dict, system: System) -> list[dict]:
    """One row per value.  ``data_fraction`` retrains the LPM on a prefix of the
    training set; the other axes reuse ``system``'s checkpoint."""
    if axis not in SWEEP_AXES:
        raise ValueError(f"unknown sweep axis {axis!r}; choose from {SWEEP_AXES}")
    rows = []
    L = system.ckpt.decoder.cfg.n_layers
    for v in values:
        over = {}
        ckpt = system.ckpt
        if axis == "k":
            over["k"] = int(v)
        elif axis == "ratio":
            over["ratio"] = v
        elif axis == "lambda_div":
            over["lambda_div"] = v
        else:
            ckpt = train_lpm(system, cfg, fraction=float(v)).ckpt
        k = over.get("k", cfg["budget.k"] or default_layer(L))
        ratio = over.get("ratio", cfg["budget.ratio"])
        lam = over.get("lambda_div", cfg["budget.lambda_div"])
        row = {"axis": axis, "value": v, "T": cfg["budget.T"], "L": L, "k": k, "ratio": ratio, "lambda_div": lam}
        try:
            plan = plan_for(cfg, ckpt, **over)
        except BudgetError as exc:
            log.info("sweep %s=%s infeasible: %s", axis, v, exc)
            row["feasible"] = False
            rows.append(row)
            continue
        rep = evaluate(ckpt, system.eval, plan)
        row.update(r1=plan.r1, r2=plan.r2, feasible=True, accuracy=rep.accuracy,
                   recall_stage1=rep.recall_stage1, recall_stage2=rep.recall_stage2, keep_rate=rep.keep_rate)
        rows.append(row)
    return rows


def sweep_csv(rows: Sequence[dict]) -> str:
    return rows_to_csv(rows, SWEEP_COLUMNS)


def sweep_svg(rows: Sequence[dict]) -> str:
    ok = [r for r in rows if r.get("feasible")]
    axis = rows[0]["axis"] if rows else ""
    xs = [float(r["value"]) for r in ok] or [0.0]
    series = {"accuracy": [r["accuracy"] for r in ok] or [0.0],
              "stage-1 recall": [r["recall_stage1"] for r in ok] or [0.0]}
    return plots.line_chart(series, f"ablation over {axis}", axis, "rate", x=xs)
