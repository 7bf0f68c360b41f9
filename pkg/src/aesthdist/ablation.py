"""Desk-scale ablation driver: the five input-handling variants, the ROI
output-size sweep, the augmentation contrast and pooling-vs-align parity.

Every training run is cached on disk under a key derived from its full
configuration, the dataset fingerprint and the package source, so an
interrupted sweep resumes where it stopped and reruns are free. Independent
runs can be spread over worker processes; the report does not depend on how
many are used. Wall-clock time per run goes to a sidecar ``<key>.time.json``
so the cached result itself stays byte-reproducible.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .data import DatasetRecord, SynthConfig, synth_gen
from .model import MODES
from .training import TrainConfig, evaluate, train

log = logging.getLogger(__name__)

TABLE_COLUMNS = ("srcc_mean", "srcc_std", "emd_r1", "kl")
_SOURCES = ("tensor_core.py", "roi_ops.py", "model.py", "data.py", "distmetrics.py", "training.py")


@dataclass(frozen=True)
class AblationConfig:
    n_records: int = 2000
    data_seed: int = 0
    val_fraction: float = 0.25
    seeds: tuple = (0, 1, 2)
    variants: tuple = MODES
    size_sweep: tuple = (16,)  # extra ROI output sizes for pad_roi_theme; () disables
    augmentation_contrast: bool = False  # also train pad_roi_theme with flip-only augmentation
    align_parity: bool = True  # also train pad_roi_theme with ROI align
    train: TrainConfig = TrainConfig(epochs=15)

    def __post_init__(self):
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        object.__setattr__(self, "variants", tuple(self.variants))
        object.__setattr__(self, "size_sweep", tuple(int(s) for s in self.size_sweep))
        if not 0 < self.val_fraction < 1:
            raise ValueError("val_fraction must lie in (0, 1)")
        if not self.seeds:
            raise ValueError("need at least one seed")
        for v in self.variants:
            if v not in MODES:
                raise ValueError(f"unknown variant {v!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["train"] = self.train.to_dict()
        for k in ("seeds", "variants", "size_sweep"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AblationConfig":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown ablation config keys: {sorted(unknown)}")
        if isinstance(d.get("train"), dict):
            d["train"] = TrainConfig.from_dict(d["train"])
        return cls(**d)


def split(records: Sequence[DatasetRecord], val_fraction: float):
    """Deterministic head/tail split: the last ``val_fraction`` is held out."""
    n_val = max(1, int(round(len(records) * val_fraction)))
    return list(records[:-n_val]), list(records[-n_val:])


def dataset_fingerprint(records: Sequence[DatasetRecord]) -> str:
    h = hashlib.sha256()
    for r in records:
        h.update(np.ascontiguousarray(r.votes, dtype="<i8").tobytes())
        h.update(int(r.theme).to_bytes(4, "little"))
        px = r.pixels if r.pixels is not None else (r.image() * 255).round().astype(np.uint8)
        h.update(np.asarray(px.shape, dtype="<i8").tobytes())
        h.update(np.ascontiguousarray(px).tobytes())
    return h.hexdigest()


def code_fingerprint() -> str:
    here = Path(__file__).parent
    h = hashlib.sha256()
    for name in _SOURCES:
        h.update(name.encode())
        h.update((here / name).read_bytes())
    return h.hexdigest()


def run_key(config: TrainConfig, data_fp: str, code_fp: str) -> str:
    blob = json.dumps({"train": config.to_dict(), "data": data_fp, "code": code_fp}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:24]


def run_one(config: TrainConfig, train_recs, val_recs, cache_dir: Path | None = None,
            data_fp: str | None = None, code_fp: str | None = None) -> dict:
    """Train one configuration and evaluate it on ``val_recs`` (cached)."""
    path = None
    if cache_dir is not None:
        path = _cache_path(config, train_recs, val_recs, cache_dir, data_fp, code_fp)
        if path.exists():
            return json.loads(path.read_text())
    start = time.perf_counter()
    params, history = train(replace(config, eval_every=0), train_recs)
    report = evaluate(params, val_recs, config.variant, config.canvas, config.batch_size)
    result = {
        "config": config.to_dict(),
        "history": [{k: v for k, v in e.items() if k != "metrics"} for e in history],
        "metrics": report.metrics,
    }
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        _atomic_write(path.with_suffix(".time.json"), json.dumps({"seconds": time.perf_counter() - start}) + "\n")
        _atomic_write(path, json.dumps(result, sort_keys=True, indent=1) + "\n")
    return result


def _cache_path(config, train_recs, val_recs, cache_dir, data_fp=None, code_fp=None) -> Path:
    data_fp = data_fp or dataset_fingerprint(list(train_recs) + list(val_recs))
    return Path(cache_dir) / f"{run_key(config, data_fp, code_fp or code_fingerprint())}.json"


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)


_WORKER: dict = {}


def _init_worker(train_recs, val_recs, cache_dir, data_fp, code_fp):
    from threadpoolctl import threadpool_limits
    _WORKER.update(args=(train_recs, val_recs, cache_dir, data_fp, code_fp), limits=threadpool_limits(limits=1))


def _work(config: TrainConfig) -> dict:
    train_recs, val_recs, cache_dir, data_fp, code_fp = _WORKER["args"]
    return run_one(config, train_recs, val_recs, cache_dir, data_fp, code_fp)


def _summarise(label: dict, runs: list[dict]) -> dict:
    row = dict(label)
    per_seed = [r["metrics"] for r in runs]
    for k in TABLE_COLUMNS:
        vals = [m[k] for m in per_seed]
        row[k] = float(np.mean(vals)) if all(v is not None for v in vals) else None
    row["per_seed"] = [{k: m[k] for k in TABLE_COLUMNS} for m in per_seed]
    return row


def planned_runs(cfg: AblationConfig) -> list[tuple[str, dict, TrainConfig]]:
    """(table, label, train config) for every run of the sweep, in order."""
    base = cfg.train
    plan = []
    for seed in cfg.seeds:
        for v in cfg.variants:
            plan.append(("variants", {"variant": v}, replace(base, variant=v, seed=seed)))
    for size in cfg.size_sweep:
        for seed in cfg.seeds:
            model = replace(base.model, roi_out=size)
            plan.append(("roi_size", {"roi_out": size}, replace(base, variant="pad_roi_theme", seed=seed, model=model)))
    if cfg.augmentation_contrast:
        for seed in cfg.seeds:
            plan.append(("augmentation", {"augmentation": "flip"},
                         replace(base, variant="pad_roi_theme", seed=seed, augmentation="flip")))
    if cfg.align_parity:
        for seed in cfg.seeds:
            model = replace(base.model, pool="align")
            plan.append(("pooling", {"pool": "align"}, replace(base, variant="pad_roi_theme", seed=seed, model=model)))
    return plan


def _records_for(cfg: AblationConfig, records):
    if records is None:
        records = synth_gen(SynthConfig(n=cfg.n_records, n_themes=cfg.train.model.n_themes,
                                        n_bins=cfg.train.model.n_bins), cfg.data_seed)
    return records


def ablate(cfg: AblationConfig, records: Sequence[DatasetRecord] | None = None, cache_dir=None,
           progress: Callable[[int, int, dict], None] | None = None, jobs: int = 1) -> dict:
    """Run the sweep and return the report dict (deterministic in ``cfg``)."""
    records = _records_for(cfg, records)
    train_recs, val_recs = split(records, cfg.val_fraction)
    data_fp = dataset_fingerprint(records)
    code_fp = code_fingerprint()
    plan = planned_runs(cfg)
    results = []

    def collect(outcomes):
        for (table, label, tc), res in zip(plan, outcomes):
            results.append((table, label, tc, res))
            if progress is not None:
                progress(len(results), len(plan), {"table": table, **label, "seed": tc.seed,
                                                   **{k: res["metrics"][k] for k in TABLE_COLUMNS}})

    if jobs > 1:
        init = (train_recs, val_recs, cache_dir, data_fp, code_fp)
        with ProcessPoolExecutor(max_workers=jobs, initializer=_init_worker, initargs=init) as pool:
            collect(pool.map(_work, [tc for _, _, tc in plan]))
    else:
        collect(run_one(tc, train_recs, val_recs, cache_dir, data_fp, code_fp) for _, _, tc in plan)

    def rows(table, key):
        groups: dict = {}
        for t, label, tc, res in results:
            if t == table:
                groups.setdefault(json.dumps(label, sort_keys=True), (label, []))[1].append(res)
        return [_summarise(label, runs) for label, runs in groups.values()]

    ref = [res for t, label, tc, res in results if t == "variants" and label["variant"] == "pad_roi_theme"]
    report = {
        "config": cfg.to_dict(),
        "dataset": {"fingerprint": data_fp, "n_train": len(train_recs), "n_val": len(val_recs)},
        "variants": rows("variants", "variant"),
    }
    default_roi, default_pool = cfg.train.model.roi_out, cfg.train.model.pool
    if cfg.size_sweep:
        sweep = rows("roi_size", "roi_out")
        if ref:
            sweep.append(_summarise({"roi_out": default_roi}, ref))
        report["roi_size"] = sorted(sweep, key=lambda r: r["roi_out"])
    if cfg.augmentation_contrast:
        report["augmentation"] = rows("augmentation", "augmentation") + (
            [_summarise({"augmentation": cfg.train.augmentation}, ref)] if ref else [])
    if cfg.align_parity:
        report["pooling"] = ([_summarise({"pool": default_pool}, ref)] if ref else []) + rows("pooling", "pool")
    report["checks"] = directional_checks(report)
    return report


def recorded_seconds(cfg: AblationConfig, cache_dir, records=None, tables=None) -> dict:
    """Sum of the wall-clock times recorded for the cached runs of ``cfg``.

    Returns ``{"seconds": total, "runs": n_timed, "missing": n_untimed}``.
    """
    records = _records_for(cfg, records)
    train_recs, val_recs = split(records, cfg.val_fraction)
    data_fp, code_fp = dataset_fingerprint(records), code_fingerprint()
    total, timed, missing = 0.0, 0, 0
    for table, _, tc in planned_runs(cfg):
        if tables is not None and table not in tables:
            continue
        side = _cache_path(tc, train_recs, val_recs, cache_dir, data_fp, code_fp).with_suffix(".time.json")
        if side.exists():
            total += json.loads(side.read_text())["seconds"]
            timed += 1
        else:
            missing += 1
    return {"seconds": total, "runs": timed, "missing": missing}


def _row(rows, key, value):
    for r in rows:
        if r[key] == value:
            return r
    return None


def _per_seed_wins(a, b, metric, higher=True) -> int:
    wins = 0
    for x, y in zip(a["per_seed"], b["per_seed"]):
        if x[metric] is None or y[metric] is None:
            continue
        wins += (x[metric] > y[metric]) if higher else (x[metric] < y[metric])
    return wins


def directional_checks(report: dict) -> dict:
    """The ordering claims the sweep is meant to reproduce, as named booleans."""
    out = {}
    rows = report.get("variants", [])
    theme, blind, resize = (_row(rows, "variant", v) for v in ("pad_roi_theme", "pad_roi", "resize"))

    def gt(a, b, k):
        return a is not None and b is not None and a[k] is not None and b[k] is not None and a[k] > b[k]

    def lt(a, b, k):
        return a is not None and b is not None and a[k] is not None and b[k] is not None and a[k] < b[k]

    if blind and resize:
        out["pad_roi_beats_resize_srcc_mean"] = gt(blind, resize, "srcc_mean")
        out["pad_roi_beats_resize_emd_r1"] = lt(blind, resize, "emd_r1")
    if theme and blind:
        out["theme_beats_blind_srcc_mean"] = gt(theme, blind, "srcc_mean")
        out["theme_beats_blind_srcc_std"] = gt(theme, blind, "srcc_std")
        out["theme_beats_blind_kl"] = lt(theme, blind, "kl")
        gains = {}
        for k in ("srcc_mean", "srcc_std"):
            if theme[k] is not None and blind[k] is not None:
                gains[k] = (theme[k] - blind[k]) / max(abs(blind[k]), 1e-12)
        if blind["kl"] and theme["kl"] is not None:
            gains["kl"] = (blind["kl"] - theme["kl"]) / blind["kl"]
        out["std_gain_is_largest"] = bool(gains) and max(gains, key=gains.get) == "srcc_std"
    if rows and theme:
        best = max((r for r in rows if r["srcc_mean"] is not None), key=lambda r: r["srcc_mean"], default=None)
        out["theme_row_best_srcc_mean"] = best is not None and best["variant"] == "pad_roi_theme"
        n_seeds = len(theme["per_seed"])
        majority = 0
        for s in range(n_seeds):
            vals = [(r["per_seed"][s]["srcc_mean"], r["variant"]) for r in rows if r["per_seed"][s]["srcc_mean"] is not None]
            majority += bool(vals) and max(vals)[1] == "pad_roi_theme"
        out["theme_row_best_srcc_mean_seed_majority"] = majority * 2 > n_seeds
    sizes = report.get("roi_size")
    if sizes and len(sizes) >= 2:
        small, large = sizes[0], sizes[-1]
        wins = _per_seed_wins(large, small, "srcc_mean")
        out["larger_roi_output_wins_majority"] = wins * 2 > len(large["per_seed"])
    pools = report.get("pooling")
    if pools and len(pools) == 2 and pools[0]["emd_r1"] is not None and pools[1]["emd_r1"] is not None:
        out["align_emd_r1_gap"] = abs(pools[0]["emd_r1"] - pools[1]["emd_r1"])
        out["align_parity_within_0.005"] = out["align_emd_r1_gap"] <= 0.005
    return out


def report_json(report: dict) -> str:
    return json.dumps(report, sort_keys=True, indent=2) + "\n"


def report_csv(report: dict) -> str:
    """One row per table line with the four Table-III metric columns."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["table", "setting", *TABLE_COLUMNS])
    for table, key in (("variants", "variant"), ("roi_size", "roi_out"), ("augmentation", "augmentation"), ("pooling", "pool")):
        for r in report.get(table, []):
            w.writerow([table, r[key], *("" if r[k] is None else repr(float(r[k])) for k in TABLE_COLUMNS)])
    return buf.getvalue()


def write_report(report: dict, out_dir) -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    jp, cp = out / "ablation.json", out / "ablation.csv"
    jp.write_text(report_json(report))
    cp.write_text(report_csv(report))
    return jp, cp
