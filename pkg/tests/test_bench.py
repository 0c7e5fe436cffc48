import csv
import io

import numpy as np
import pytest

from learnpruner.bench import harness, plots
from learnpruner.bench.data import (PATCH_DIM, generate_dataset, label, load_dataset, resample_background,
                                    save_dataset)
from learnpruner.decoder import SequenceLayout
from learnpruner.pipeline import identity_plan, make_plan

from conftest import WIDE, small_checkpoint, tiny_config


@pytest.fixture(scope="module")
def system():
    return harness.build_system(tiny_config())


# -- data ------------------------------------------------------------------------

def test_dataset_is_deterministic():
    a, b = generate_dataset(20, seed=3), generate_dataset(20, seed=3)
    for f in ("images", "planted", "queries", "answers"):
        assert np.array_equal(getattr(a, f), getattr(b, f))
    assert not np.array_equal(a.images, generate_dataset(20, seed=4).images)


def test_dataset_shapes_and_balance():
    ds = generate_dataset(80, grid=(3, 5), n_planted=4)
    assert ds.images.shape == (80, 3, 5, PATCH_DIM) and ds.n_vision == 15
    assert all(len(set(p)) == 4 and list(p) == sorted(p) for p in ds.planted)
    _, counts = np.unique(ds.answers, return_counts=True)
    assert counts.min() >= 80 // 8 - 2
    full = generate_dataset(3, grid=(2, 2), n_planted=4)
    assert all(list(p) == [0, 1, 2, 3] for p in full.planted)


def test_labels_survive_background_resampling():
    ds = generate_dataset(60, seed=1)
    rng = np.random.default_rng(0)
    for s in (ds[i] for i in range(len(ds))):
        assert label(s.image, s.planted, s.query) == s.answer
        for _ in range(3):
            img = resample_background(s.image, s.planted, rng)
            assert label(img, s.planted, s.query) == s.answer
            flat, orig = img.reshape(-1, PATCH_DIM), s.image.reshape(-1, PATCH_DIM)
            assert np.array_equal(flat[s.planted], orig[s.planted])


def test_dataset_errors():
    with pytest.raises(ValueError):
        generate_dataset(2, grid=(2, 2), n_planted=5)
    with pytest.raises(ValueError):
        generate_dataset(2, vocab=4)


def test_dataset_round_trip(tmp_path):
    ds = generate_dataset(5, grid=(3, 3), n_planted=2, seed=9)
    save_dataset(ds, tmp_path / "d")
    back = load_dataset(tmp_path / "d")
    for f in ("images", "planted", "queries", "answers"):
        assert np.array_equal(getattr(ds, f), getattr(back, f))
    assert back.seed == 9 and (tmp_path / "d" / "manifest").exists()
    raw = (tmp_path / "d" / "sample_000000.bin").read_bytes()
    assert int.from_bytes(raw[:4], "little") == 3


# -- evaluation -----------------------------------------------------------------

def test_identity_plan_has_full_recall(ckpt):
    ds = generate_dataset(6, grid=(4, 4), n_planted=3)
    rep = harness.evaluate(ckpt, ds, identity_plan(16, 4))
    assert rep.recall_stage1 == 1.0 and rep.recall_stage2 == 1.0
    assert rep.accuracy == harness.evaluate(ckpt, ds, None).accuracy


def test_random_baseline_converges_to_budget_fraction():
    ck = small_checkpoint()
    ds = generate_dataset(1000, grid=(4, 4), n_planted=3, seed=2)
    plan = make_plan(5, 4, 1, 2, 0.0, 16)
    rep = harness.evaluate(ck, ds, plan, scorer="random", seed=5)
    expect = harness.expected_random_recall(plan.r1, 16)
    # per-sample recall variance of a hypergeometric fraction
    n, K, m = 16, 3, plan.r1
    var = (m * (n - m) * (n - K)) / (n * n * (n - 1)) / K
    assert abs(rep.recall_stage1 - expect) <= 2 * np.sqrt(var / len(ds))


def test_evaluation_is_deterministic(system):
    plan = harness.plan_for(tiny_config(), system.ckpt)
    a = harness.evaluate(system.ckpt, system.eval, plan)
    b = harness.evaluate(system.ckpt, system.eval, plan)
    assert a == b
    assert all(0 <= x <= 1 for x in (a.accuracy, a.recall_stage1, a.recall_stage2, a.keep_rate))


# -- analyses -------------------------------------------------------------------------

def test_shift_curves_match_direct_loop(ckpt):
    ds = generate_dataset(3, grid=(4, 4), n_planted=3)
    curves = harness.attention_shift_analysis(ckpt, ds, 2)
    assert curves.vision.shape == (16,) and curves.text.shape == (16,)
    assert np.all(curves.vision >= 0) and np.all(curves.text >= 0)
    feats = ckpt.encoder.encode(ds.images).tokens
    vis, txt = np.zeros(16), np.zeros(16)
    for i in range(3):
        lay = SequenceLayout(16, 2)
        a = ckpt.decoder.prefill(ckpt.decoder.embed(feats[i], ds.queries[i]), lay).attention[2]
        for j in range(16):
            vis[j] += sum(a[h, s, j] for h in range(2) for s in range(16)) / 32
            txt[j] += sum(a[h, s, j] for h in range(2) for s in (16, 17)) / 4
    assert np.abs(curves.vision - vis / 3).max() <= 1e-12
    assert np.abs(curves.text - txt / 3).max() <= 1e-12
    rows = list(csv.reader(io.StringIO(harness.shift_csv(curves))))
    assert rows[0] == ["index", "vision_source", "text_source"] and len(rows) == 17
    with pytest.raises(IndexError):
        harness.attention_shift_analysis(ckpt, ds, 4)


def test_criteria_keep_everything_ties_at_baseline(ckpt):
    ds = generate_dataset(5, grid=(4, 4), n_planted=3)
    base = harness.evaluate(ckpt, ds, None).accuracy
    rows = harness.criteria_comparison(ckpt, ds, [0, 1], keep_ratio=1.0)
    assert {r["accuracy"] for r in rows} == {base}


def test_criteria_table_layout(ckpt):
    ds = generate_dataset(4, grid=(4, 4), n_planted=3)
    rows = harness.criteria_comparison(ckpt, ds, [0, 1, 3])
    assert rows == harness.criteria_comparison(ckpt, ds, [0, 1, 3])
    table = list(csv.reader(io.StringIO(harness.criteria_table(rows))))
    assert table[0] == ["criterion", "layer_0", "layer_1", "layer_3"]
    assert [r[0] for r in table[1:]] == list(harness.CRITERIA)
    assert "<svg" in harness.criteria_svg(rows)


def test_criterion_scores_by_hand(rng):
    lay = SequenceLayout(3, 2)
    attn = rng.random((2, 5, 5))
    a = attn.mean(axis=0)
    assert np.allclose(harness.criterion_scores(attn, lay, "last-query"), a[4, :3])
    assert np.allclose(harness.criterion_scores(attn, lay, "vision-mean"), a[:3, :3].mean(axis=0))
    assert np.allclose(harness.criterion_scores(attn, lay, "all-mean"), a[:, :3].mean(axis=0))
    with pytest.raises(ValueError):
        harness.criterion_scores(attn, lay, "nope")


def test_single_value_sweep_equals_evaluate(system):
    cfg = tiny_config()
    rows = harness.ablation_sweep("lambda_div", [0.5], cfg, system)
    rep = harness.evaluate(system.ckpt, system.eval, harness.plan_for(cfg, system.ckpt, lambda_div=0.5))
    assert rows[0]["accuracy"] == rep.accuracy and rows[0]["recall_stage1"] == rep.recall_stage1


def test_lambda_sweep_axis_and_infeasible_rows(system):
    cfg = tiny_config()
    values = [round(0.1 * i, 1) for i in range(11)]
    rows = harness.ablation_sweep("lambda_div", values, cfg, system)
    assert [r["value"] for r in rows] == values
    rows = harness.ablation_sweep("ratio", [1, 40], cfg, system)
    assert rows[0]["feasible"] and not rows[1]["feasible"]
    text = harness.sweep_csv(rows)
    assert text.splitlines()[0].split(",") == list(harness.SWEEP_COLUMNS)
    with pytest.raises(ValueError):
        harness.ablation_sweep("depth", [1], cfg, system)


def test_data_fraction_sweep_retrains(system):
    rows = harness.ablation_sweep("data_fraction", [0.25, 1.0], tiny_config(), system)
    assert len(rows) == 2 and all(r["feasible"] for r in rows)


def test_k_sweep_reproduces_reference_pairs():
    cfg = tiny_config(WIDE)
    system = harness.build_system(cfg)
    rows = harness.ablation_sweep("k", [8, 10, 12, 14, 16], cfg, system)
    assert [(r["r1"], r["r2"]) for r in rows] == [(129, 43), (120, 40), (111, 37), (105, 35), (96, 32)]


def test_plots_embed_data():
    svg = plots.line_chart({"a": [0.0, 1.0, 0.5]}, "t", "x", "y")
    assert svg.startswith("<svg") and "<desc>" in svg
    grid = plots.patch_grid((2, 2), [0], [1], [0], [0, 3], "g")
    assert grid.count("<rect") >= 4
