import csv
import io
import json

import pytest

from aesthdist import ablation as A
from aesthdist import data as D
from aesthdist import model as M
from aesthdist import training as T

TINY_MODEL = M.ModelConfig(stem_widths=(2, 4), roi_out=8, backbone_widths=(4, 4, 4), adaptive_out=2,
                           theme_width=4, head_hidden=8, init_gain=2.449)


def tiny_config(**kw):
    base = dict(n_records=16, seeds=(0, 1), size_sweep=(4,), align_parity=True,
                train=T.TrainConfig(epochs=1, batch_size=8, canvas=32, model=TINY_MODEL))
    base.update(kw)
    return A.AblationConfig(**base)


@pytest.fixture(scope="module")
def records():
    return D.synth_gen(D.SynthConfig(n=16, min_extent=16, max_extent=32, period_range=(3.0, 8.0)), 0)


@pytest.fixture(scope="module")
def report(records, tmp_path_factory):
    cache = tmp_path_factory.mktemp("abl") / "runs"
    return A.ablate(tiny_config(), records, cache_dir=cache), cache


def test_plan_covers_every_table():
    plan = A.planned_runs(tiny_config(augmentation_contrast=True))
    tables = [t for t, _, _ in plan]
    assert tables.count("variants") == 2 * len(M.MODES)
    assert tables.count("roi_size") == tables.count("augmentation") == tables.count("pooling") == 2
    assert all(tc.variant == "pad_roi_theme" for t, _, tc in plan if t != "variants")


def test_report_layout(report):
    rep, _ = report
    assert [r["variant"] for r in rep["variants"]] == list(M.MODES)
    for r in rep["variants"]:
        assert set(A.TABLE_COLUMNS) <= set(r) and len(r["per_seed"]) == 2
    assert [r["roi_out"] for r in rep["roi_size"]] == [4, 8]
    assert [r["pool"] for r in rep["pooling"]] == ["max", "align"]
    assert "align_emd_r1_gap" in rep["checks"]
    rows = list(csv.reader(io.StringIO(A.report_csv(rep))))
    assert rows[0] == ["table", "setting", *A.TABLE_COLUMNS]
    assert len([r for r in rows if r[0] == "variants"]) == 5


def test_row_is_mean_of_seeds(report):
    rep, _ = report
    for r in rep["variants"]:
        for k in A.TABLE_COLUMNS:
            vals = [s[k] for s in r["per_seed"]]
            if r[k] is not None:
                assert r[k] == pytest.approx(sum(vals) / len(vals), abs=1e-15)


def test_cache_reuse_is_byte_identical(report, records, tmp_path):
    rep, cache = report
    results = [p for p in cache.glob("*.json") if not p.name.endswith(".time.json")]
    assert len(results) == len(A.planned_runs(tiny_config()))
    timing = A.recorded_seconds(tiny_config(), cache, records)
    assert timing["runs"] == len(results) and timing["missing"] == 0 and timing["seconds"] > 0
    again = A.ablate(tiny_config(), records, cache_dir=cache)
    assert A.report_json(again) == A.report_json(rep)


def test_fresh_rerun_is_byte_identical(records, tmp_path):
    cfg = tiny_config(seeds=(0,), variants=("resize", "pad_roi"), size_sweep=(), align_parity=False)
    a = A.ablate(cfg, records, cache_dir=tmp_path / "a")
    b = A.ablate(cfg, records, cache_dir=tmp_path / "b")
    assert A.report_json(a) == A.report_json(b)
    pa, pb = A.write_report(a, tmp_path / "ra"), A.write_report(b, tmp_path / "rb")
    assert all(x.read_bytes() == y.read_bytes() for x, y in zip(pa, pb))


def test_parallel_jobs_match_serial(records, tmp_path):
    cfg = tiny_config(seeds=(0,), variants=("resize", "pad_roi", "pad_roi_theme"), size_sweep=(), align_parity=False)
    serial = A.ablate(cfg, records)
    parallel = A.ablate(cfg, records, cache_dir=tmp_path, jobs=2)
    assert A.report_json(serial) == A.report_json(parallel)


def test_cache_key_tracks_config():
    fp = "0" * 64
    a = T.TrainConfig(epochs=1)
    assert A.run_key(a, fp, fp) == A.run_key(T.TrainConfig(epochs=1), fp, fp)
    assert A.run_key(a, fp, fp) != A.run_key(T.TrainConfig(epochs=2), fp, fp)
    assert A.run_key(a, fp, fp) != A.run_key(a, "1" * 64, fp)


def test_split_holds_out_tail(records):
    tr, va = A.split(records, 0.25)
    assert len(va) == 4 and va == records[-4:] and tr == records[:-4]


def test_config_round_trip():
    cfg = tiny_config()
    assert A.AblationConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg
    with pytest.raises(ValueError):
        A.AblationConfig.from_dict({"n_records": 3, "folds": 2})
    with pytest.raises(ValueError):
        tiny_config(variants=("pad_roi", "crop"))


def row(variant, srcc_mean, srcc_std, emd, kl, seeds=None):
    seeds = seeds or [srcc_mean] * 3
    return {"variant": variant, "srcc_mean": srcc_mean, "srcc_std": srcc_std, "emd_r1": emd, "kl": kl,
            "per_seed": [{"srcc_mean": s, "srcc_std": srcc_std, "emd_r1": emd, "kl": kl} for s in seeds]}


def test_directional_checks_on_known_table():
    rep = {"variants": [row("resize", 0.5, 0.1, 0.10, 0.5), row("pad_roi", 0.6, 0.2, 0.09, 0.4),
                        row("pad_roi_theme", 0.7, 0.6, 0.08, 0.3)],
           "roi_size": [{"roi_out": 16, "per_seed": [{"srcc_mean": v} for v in (0.5, 0.6, 0.7)]},
                        {"roi_out": 32, "per_seed": [{"srcc_mean": v} for v in (0.6, 0.5, 0.8)]}],
           "pooling": [{"pool": "max", "emd_r1": 0.080}, {"pool": "align", "emd_r1": 0.083}]}
    checks = A.directional_checks(rep)
    assert all(checks[k] for k in ("pad_roi_beats_resize_srcc_mean", "pad_roi_beats_resize_emd_r1",
                                   "theme_beats_blind_srcc_mean", "theme_beats_blind_srcc_std",
                                   "theme_beats_blind_kl", "std_gain_is_largest", "theme_row_best_srcc_mean",
                                   "theme_row_best_srcc_mean_seed_majority", "larger_roi_output_wins_majority",
                                   "align_parity_within_0.005"))
    assert checks["align_emd_r1_gap"] == pytest.approx(0.003, abs=1e-15)


def test_directional_checks_detect_failures():
    rep = {"variants": [row("resize", 0.7, 0.1, 0.08, 0.5), row("pad_roi", 0.6, 0.5, 0.09, 0.4),
                        row("pad_roi_theme", 0.65, 0.5, 0.08, 0.45)],
           "pooling": [{"pool": "max", "emd_r1": 0.08}, {"pool": "align", "emd_r1": 0.09}]}
    checks = A.directional_checks(rep)
    assert not checks["pad_roi_beats_resize_srcc_mean"]
    assert not checks["theme_beats_blind_srcc_std"]
    assert not checks["theme_beats_blind_kl"]
    assert not checks["theme_row_best_srcc_mean"]
    assert not checks["align_parity_within_0.005"]
