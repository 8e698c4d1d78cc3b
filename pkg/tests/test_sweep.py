import json
import math
import statistics

import numpy as np
import pytest

from implicitreg import sweep
from implicitreg.optim import DivergenceError
from implicitreg.sweep import (CSV_COLUMNS, CSV_SCHEMA, ERROR_COLUMNS, SweepConfig, SweepRecord,
                               aggregate, canonical_order, emit_aggregate_csv, emit_csv, read_csv,
                               run_sweep, select_weight_decay)

TINY = {"kind": "planted", "d": 4, "H0": 2, "k": 3, "n_train": 40, "n_validation": 20,
        "n_test": 30, "input_mean": 1.0, "input_std": 2.0}


def tiny_cfg(**kw):
    base = dict(H_grid=[1], variants=["original"], seeds=[0], dataset=TINY, max_epochs=3,
                batch_size=10)
    base.update(kw)
    return SweepConfig(**base)


def rec(variant="original", seed=0, H=1, lam=0.0, errs=(0.1,) * 5, diverged=0):
    return SweepRecord(variant, seed, H, lam, 10, *errs, diverged)


def test_config_validation(tmp_path):
    with pytest.raises(ValueError):
        SweepConfig(H_grid=[4, 2])
    with pytest.raises(ValueError):
        SweepConfig(H_grid=[])
    with pytest.raises(ValueError):
        SweepConfig(seeds=[])
    with pytest.raises(ValueError):
        SweepConfig(variants=["dropout"])
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"H_grid": [1], "bogus": 1}))
    with pytest.raises(ValueError, match="bogus"):
        SweepConfig.from_json(p)
    p.write_text(json.dumps({"H_grid": [1, 2], "seeds": [3]}))
    assert SweepConfig.from_json(p).seeds == [3]


def test_single_h_gives_one_record_per_variant_and_seed():
    cfg = tiny_cfg(variants=["original", "censored", "censored_noisy"], seeds=[0, 1])
    recs = run_sweep(cfg)
    assert len(recs) == 6
    assert {(r.variant, r.seed) for r in recs} == {(v, s) for v in cfg.variants for s in (0, 1)}
    for r in recs:
        for c in ERROR_COLUMNS:
            assert 0.0 <= getattr(r, c) <= 1.0


def test_weight_decay_keeps_one_lambda_per_cell():
    cfg = tiny_cfg(variants=["weight_decay"], H_grid=[1, 2], lambda_grid=[1e-4, 1e-2])
    recs = run_sweep(cfg)
    assert [(r.H, r.seed) for r in recs] == [(1, 0), (2, 0)]
    assert all(r.lam in (1e-4, 1e-2) for r in recs)


def test_select_weight_decay_prefers_smaller_lambda_on_ties():
    recs = [rec("weight_decay", lam=0.1), rec("weight_decay", lam=0.01),
            rec("weight_decay", lam=1.0, errs=(0.1, 0.1, 0.05, 0.1, 0.1)),
            rec("weight_decay", lam=1e-3, diverged=1, errs=(math.nan,) * 5)]
    out = select_weight_decay(recs)
    assert len(out) == 1 and out[0].lam == 1.0
    out = select_weight_decay(recs[:2])
    assert out[0].lam == 0.01


def test_sweep_is_deterministic_across_workers():
    cfg = tiny_cfg(H_grid=[1, 2], variants=["original", "censored"], seeds=[0, 1])
    assert run_sweep(cfg, seed=5, workers=1) == run_sweep(cfg, seed=5, workers=2)
    assert run_sweep(cfg, seed=5) != run_sweep(cfg, seed=6)


def test_diverged_cells_are_recorded(monkeypatch):
    def boom(*a, **kw):
        raise DivergenceError("non-finite objective at epoch 1")

    monkeypatch.setattr(sweep, "train", boom)
    recs = run_sweep(tiny_cfg(H_grid=[8]))
    r = recs[0]
    assert r.diverged == 1 and math.isnan(r.test_error_final)
    agg = aggregate(recs + [rec(H=8, errs=(0.2,) * 5)])
    assert agg[0]["diverged"] == 1 and agg[0]["count"] == 2
    assert agg[0]["test_error_final_mean"] == 0.2


def test_aggregate_single_and_pair():
    a = aggregate([rec(errs=(0.1, 0.2, 0.3, 0.4, 0.5))])
    assert a[0]["train_error_final_mean"] == 0.1 and a[0]["train_error_final_std"] == 0.0
    b = aggregate([rec(errs=(0.1,) * 5), rec(seed=1, errs=(0.3,) * 5)])
    assert b[0]["test_error_final_mean"] == pytest.approx(0.2, rel=1e-15)


def test_aggregate_matches_independent_recomputation():
    rng = np.random.default_rng(11)
    recs = []
    for v in ("censored", "original"):
        for H in (2, 4):
            for seed in range(5):
                recs.append(rec(v, seed, H, errs=tuple(rng.random(5).round(4))))
    rows = aggregate(list(reversed(recs)))
    assert [(r["variant"], r["H"]) for r in rows] == [("original", 2), ("original", 4),
                                                     ("censored", 2), ("censored", 4)]
    for row in rows:
        group = [r for r in recs if r.variant == row["variant"] and r.H == row["H"]]
        assert row["count"] == 5
        for c in ERROR_COLUMNS:
            vals = [getattr(r, c) for r in group]
            assert row[f"{c}_mean"] == pytest.approx(statistics.fmean(vals), rel=1e-14)
            assert row[f"{c}_std"] == pytest.approx(statistics.pstdev(vals), rel=1e-12, abs=1e-15)


def test_aggregate_empty():
    with pytest.raises(ValueError):
        aggregate([])


def test_canonical_order():
    recs = [rec("censored", 1, 4), rec("original", 0, 8), rec("original", 1, 2), rec("censored", 0, 4)]
    out = canonical_order(recs)
    assert [(r.variant, r.H, r.seed) for r in out] == [
        ("original", 2, 1), ("original", 8, 0), ("censored", 4, 0), ("censored", 4, 1)]


def test_csv_header_only(tmp_path):
    p = tmp_path / "e.csv"
    emit_csv([], p)
    assert p.read_text() == f"# schema: {CSV_SCHEMA}\n" + ",".join(CSV_COLUMNS) + "\n"


def test_csv_schema_columns():
    assert CSV_COLUMNS == ["variant", "seed", "H", "lam", "epochs_run", "train_error_final",
                           "train_error_earlystop", "validation_error_best", "test_error_final",
                           "test_error_earlystop", "diverged"]


def test_csv_round_trip(tmp_path):
    recs = [rec("original", 0, 2, 0.0, (0.125, 0.5, 0.25, 0.0625, 1.0)),
            rec("weight_decay", 3, 64, 1e-5, (0.0, 0.001, 0.002, 0.003, 0.004)),
            rec("censored", 1, 4, 0.0, (math.nan,) * 5, diverged=1)]
    p = tmp_path / "r.csv"
    emit_csv(recs, p)
    back = read_csv(p)
    for a, b in zip(recs, back):
        assert (a.variant, a.seed, a.H, a.lam, a.diverged) == (b.variant, b.seed, b.H, b.lam, b.diverged)
        for c in ERROR_COLUMNS:
            x, y = getattr(a, c), getattr(b, c)
            assert (math.isnan(x) and math.isnan(y)) or x == y


def test_csv_six_significant_digits(tmp_path):
    p = tmp_path / "r.csv"
    emit_csv([rec(errs=(1 / 3,) * 5)], p)
    assert "0.333333," in p.read_text()


def test_aggregate_csv(tmp_path):
    p = tmp_path / "a.csv"
    emit_aggregate_csv(aggregate([rec(), rec(seed=1)]), p)
    lines = p.read_text().splitlines()
    assert lines[0] == f"# schema: {CSV_SCHEMA}-aggregate"
    assert lines[1].startswith("variant,H,count,diverged,train_error_final_mean")


def test_read_csv_rejects_wrong_columns(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("a,b\n1,2\n")
    with pytest.raises(ValueError):
        read_csv(p)
