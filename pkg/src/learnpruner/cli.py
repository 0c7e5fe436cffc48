"""Command-line entry point.

    learnpruner train   --config C --out DIR [--steps N]
    learnpruner eval    --ckpt P --config C --out DIR [--avg-tokens T --layer k --ratio r --lambda-div l]
    learnpruner trace   --ckpt P --config C --out DIR --index i [budget flags]
    learnpruner analyze {shift,criteria,cost,sweep} ...
    learnpruner make-data --config C --out DIR

Exit codes: 0 success, 2 configuration or budget error, 3 I/O or checkpoint
error, 4 numeric failure.  Seed precedence: ``--seed``, then ``TPL_SEED``,
then the config file.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from . import cost as costmod
from .autodiff import DegenerateRowError
from .bench import harness
from .bench.data import save_dataset
from .bench.plots import patch_grid
from .lpm import NonFiniteLoss
from .pipeline import (BudgetError, CheckpointError, ConfigError, default_config, format_config,
                       load_checkpoint, load_config, make_plan, run_inference, save_checkpoint, set_config)

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("learnpruner")


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


# -- shared plumbing -------------------------------------------------------------

def _resolve_config(args) -> dict:
    cfg = load_config(args.config) if getattr(args, "config", None) else default_config()
    seed = getattr(args, "seed", None)
    if seed is None and os.environ.get("TPL_SEED", "").strip():
        seed = os.environ["TPL_SEED"].strip()
    if seed is not None:
        cfg = set_config(cfg, "seed", seed)
    return cfg


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write(path: Path, text: str):
    path.write_text(text)
    log.info("wrote %s", path)


def _plan(args, cfg, ckpt):
    return harness.plan_for(cfg, ckpt, T=args.avg_tokens, k=args.layer, ratio=args.ratio,
                            lambda_div=args.lambda_div)


def _plan_header(plan) -> str:
    return (f"plan: T={plan.T:g} L={plan.L} k={plan.k} ratio={plan.ratio:g} lambda_div={plan.lambda_div:g} "
            f"R1={plan.r1} R2={plan.r2}")


def _eval_set(args, cfg):
    if getattr(args, "data", None):
        from .bench.data import load_dataset
        return load_dataset(args.data)
    return harness.datasets(cfg)[1]


# -- subcommands -------------------------------------------------------------------

def cmd_make_data(args) -> int:
    cfg = _resolve_config(args)
    out = _out_dir(args)
    train, ev = harness.datasets(set_config(cfg, "data.path", ""))
    save_dataset(train, out / "train")
    save_dataset(ev, out / "eval")
    print(f"wrote {len(train)} train and {len(ev)} eval samples under {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    if args.steps is not None:
        if args.steps < 0:
            raise ConfigError("--steps must be nonnegative")
        cfg = set_config(cfg, "train.steps", args.steps)
    out = _out_dir(args)
    system = harness.build_system(cfg)
    save_checkpoint(system.ckpt, out / "checkpoint.lprn")
    rows = [{"step": r.step, "l_ntp": r.l_ntp, "l_prune": r.l_prune, "keep_rate": r.keep_rate}
            for r in system.lpm_trace]
    _write(out / "loss_trace.csv", harness.rows_to_csv(rows, ["step", "l_ntp", "l_prune", "keep_rate"]))
    _write(out / "config.cfg", format_config(cfg))
    if rows:
        print(f"trained {len(rows)} steps: keep_rate {rows[0]['keep_rate']:.3f} -> {rows[-1]['keep_rate']:.3f}")
    else:
        print("wrote initialized checkpoint (0 training steps)")
    return EXIT_OK


EVAL_COLUMNS = ("scenario", "T", "k", "ratio", "lambda_div", "r1", "r2", "n", "accuracy",
                "recall_stage1", "recall_stage2", "keep_rate")


def cmd_eval(args) -> int:
    cfg = _resolve_config(args)
    ckpt = load_checkpoint(args.ckpt)
    plan = _plan(args, cfg, ckpt)
    print(_plan_header(plan))
    out = _out_dir(args)
    ds = _eval_set(args, cfg)
    rows = []
    for name, p, scorer in (("full", None, "lpm"), ("pruned", plan, "lpm"), ("random", plan, "random")):
        rep = harness.evaluate(ckpt, ds, p, scorer=scorer, seed=cfg["seed"])
        rows.append({"scenario": name, **rep.as_row()})
    print(f"{'scenario':<8} {'accuracy':>9} {'recall1':>8} {'recall2':>8} {'keep':>6}")
    for r in rows:
        print(f"{r['scenario']:<8} {r['accuracy']:>9.4f} {r['recall_stage1']:>8.4f} "
              f"{r['recall_stage2']:>8.4f} {r['keep_rate']:>6.3f}")
    _write(out / "eval.csv", harness.rows_to_csv(rows, EVAL_COLUMNS))
    return EXIT_OK


def cmd_trace(args) -> int:
    cfg = _resolve_config(args)
    ckpt = load_checkpoint(args.ckpt)
    plan = _plan(args, cfg, ckpt)
    ds = _eval_set(args, cfg)
    if not 0 <= args.index < len(ds):
        raise CliError(EXIT_CONFIG, f"sample index {args.index} out of range [0, {len(ds)})")
    s = ds[args.index]
    res = run_inference(ckpt, s.image, s.query, plan, cfg["infer.max_new_tokens"])
    tr = res.trace
    out = _out_dir(args)
    fmt = lambda xs: " ".join(str(int(x)) for x in xs)
    text = "\n".join([
        _plan_header(plan),
        f"sample: {args.index}",
        f"planted: {fmt(s.planted)}",
        f"stage1_informative: {fmt(tr.stage1.informative)}",
        f"stage1_diverse: {fmt(tr.stage1.diverse)}",
        f"stage2: {fmt(tr.stage2)}",
        f"answer: {fmt(res.answer)} (gold {s.answer})",
    ]) + "\n"
    print(text, end="")
    _write(out / f"trace_{args.index}.txt", text)
    svg = patch_grid(ckpt.encoder.cfg.patch_grid, tr.stage1.informative, tr.stage1.diverse, tr.stage2,
                     s.planted, title=f"sample {args.index}: R1={plan.r1}, R2={plan.r2}")
    _write(out / f"trace_{args.index}.svg", svg)
    return EXIT_OK


def _int_list(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v.strip()]


def _float_list(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def cmd_analyze(args) -> int:
    out = _out_dir(args)
    if args.kind == "cost":
        return _analyze_cost(args, out)
    cfg = _resolve_config(args)
    ckpt = load_checkpoint(args.ckpt)
    ds = _eval_set(args, cfg)
    if args.kind == "shift":
        layer = args.layer if args.layer is not None else ckpt.decoder.cfg.n_layers // 2
        curves = harness.attention_shift_analysis(ckpt, ds, layer)
        _write(out / f"shift_layer{layer}.csv", harness.shift_csv(curves))
        _write(out / f"shift_layer{layer}.svg", harness.shift_svg(curves))
        print(f"attention shift at layer {layer}: {len(curves.vision)} vision indices")
    elif args.kind == "criteria":
        layers = _int_list(args.layers) if args.layers else list(range(ckpt.decoder.cfg.n_layers))
        rows = harness.criteria_comparison(ckpt, ds, layers, args.prune_layer, args.keep_ratio)
        _write(out / "criteria.csv", harness.criteria_table(rows))
        _write(out / "criteria.svg", harness.criteria_svg(rows))
        print(harness.criteria_table(rows), end="")
    elif args.kind == "sweep":
        if not args.axis or not args.values:
            raise ConfigError("sweep needs --axis and --values")
        values = _float_list(args.values)
        if args.axis == "k":
            values = [int(v) for v in values]
        system = harness.System(ckpt, harness.datasets(cfg)[0] if args.axis == "data_fraction" else None, ds)
        rows = harness.ablation_sweep(args.axis, values, cfg, system)
        _write(out / f"sweep_{args.axis}.csv", harness.sweep_csv(rows))
        _write(out / f"sweep_{args.axis}.svg", harness.sweep_svg(rows))
        print(harness.sweep_csv(rows), end="")
    return EXIT_OK


def _analyze_cost(args, out: Path) -> int:
    if args.preset:
        if args.preset not in costmod.PRESETS:
            raise ConfigError(f"unknown preset {args.preset!r}; choose from {sorted(costmod.PRESETS)}")
        ccfg = costmod.PRESETS[args.preset]
        budgets = [args.avg_tokens] if args.avg_tokens is not None else [128, 32]
        k = args.layer if args.layer is not None else 12
    else:
        if not args.ckpt:
            raise ConfigError("analyze cost needs --preset or --ckpt")
        cfg = _resolve_config(args)
        ckpt = load_checkpoint(args.ckpt)
        from .pipeline import cost_config_for
        ccfg = cost_config_for(ckpt, n_text=2, n_decode=max(cfg["infer.max_new_tokens"] - 1, 0))
        budgets = [args.avg_tokens if args.avg_tokens is not None else cfg["budget.T"]]
        k = args.layer if args.layer is not None else (cfg["budget.k"] or None)
    ratio = args.ratio if args.ratio is not None else 3
    reports = [costmod.cost_report(ccfg, None)]
    for T in budgets:
        plan = make_plan(T, ccfg.n_layers, k, ratio, n_vision=ccfg.n_vision)
        reports.append(costmod.cost_report(ccfg, plan))
    text = costmod.reports_to_csv(reports)
    _write(out / "cost.csv", text)
    print(text, end="")
    return EXIT_OK


# -- parser ----------------------------------------------------------------------------

def _common(p, ckpt=False, budget=False, data=False):
    p.add_argument("--config", help="key = value config file (defaults when omitted)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=None, help="seed override")
    if ckpt:
        p.add_argument("--ckpt", required=True, help="checkpoint written by 'train'")
    if data:
        p.add_argument("--data", help="evaluation dataset directory (overrides the config's eval split)")
    if budget:
        p.add_argument("--avg-tokens", dest="avg_tokens", type=float, default=None, help="average vision tokens T")
        p.add_argument("--layer", type=int, default=None, help="stage-2 layer k")
        p.add_argument("--ratio", type=float, default=None, help="R1:R2 ratio")
        p.add_argument("--lambda-div", dest="lambda_div", type=float, default=None, help="diversity fraction")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="learnpruner", description="Two-stage visual token pruning on a toy VLM.")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("make-data", help="write the train/eval datasets to disk")
    _common(p)
    p.set_defaults(fn=cmd_make_data)

    p = sub.add_parser("train", help="fit the toy decoder, then train the pruning module")
    _common(p)
    p.add_argument("--steps", type=int, default=None, help="override train.steps")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint under a token budget")
    _common(p, ckpt=True, budget=True, data=True)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("trace", help="dump and draw the retained patches of one sample")
    _common(p, ckpt=True, budget=True, data=True)
    p.add_argument("--index", type=int, required=True)
    p.set_defaults(fn=cmd_trace)

    p = sub.add_parser("analyze", help="attention shift, criteria comparison, cost model, sweeps")
    p.add_argument("kind", choices=("shift", "criteria", "cost", "sweep"))
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--ckpt")
    p.add_argument("--data")
    p.add_argument("--layer", type=int, default=None, help="analysis layer (shift) or stage-2 layer (cost)")
    p.add_argument("--layers", help="comma-separated guidance layers (criteria)")
    p.add_argument("--prune-layer", dest="prune_layer", type=int, default=2)
    p.add_argument("--keep-ratio", dest="keep_ratio", type=float, default=0.1)
    p.add_argument("--preset", help="cost preset, e.g. llava7b")
    p.add_argument("--avg-tokens", dest="avg_tokens", type=float, default=None)
    p.add_argument("--ratio", type=float, default=None)
    p.add_argument("--axis", choices=harness.SWEEP_AXES)
    p.add_argument("--values", help="comma-separated sweep values")
    p.set_defaults(fn=cmd_analyze)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    level = logging.WARNING if args.verbose == 0 else logging.INFO if args.verbose == 1 else logging.DEBUG
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    if args.cmd == "analyze" and args.kind != "cost" and not args.ckpt:
        print(f"error: analyze {args.kind} needs --ckpt", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.fn(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (ConfigError, BudgetError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NonFiniteLoss, DegenerateRowError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, CheckpointError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
