"""Command-line interface: ``aesthdist {synth,train,eval,predict,verify,ablate}``.

Every option can also come from a flat JSON config file passed with
``--config``; keys are the long option names with dashes replaced by
underscores (``"batch_size": 8``). Flags given on the command line win.

Exit codes: 0 success, 1 verification failure, 2 I/O error, 3 numeric
error, 4 configuration mismatch, 5 input constraint violated.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import ablation, verify
from .data import (ManifestError, PaddedBatch, SizeError, SynthConfig, batch_mode, fit_to_canvas, load_manifest,
                   read_ppm, synth_gen, test_time_views, write_dataset)
from .distmetrics import dist_mean, dist_std
from .model import MODES, CheckpointError, ModelConfig, forward, load_checkpoint, save_checkpoint, theme_encode
from .roi_ops import Region
from .tensor_core import NumericError, softmax
from .training import METRIC_KEYS, Schedule, TrainConfig, evaluate, train

log = logging.getLogger("aesthdist")

EXIT_OK, EXIT_VERIFY, EXIT_IO, EXIT_NUMERIC, EXIT_CONFIG, EXIT_INPUT = 0, 1, 2, 3, 4, 5


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file with default values for any option")
    p.add_argument("--seed", type=int)
    p.add_argument("--canvas", type=int)
    p.add_argument("--variant", choices=MODES)
    p.add_argument("--out", help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="aesthdist", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate the synthetic dataset")
    _common(p)
    p.add_argument("--n", type=int)
    p.add_argument("--n-themes", type=int)

    p = sub.add_parser("train", help="train one model variant")
    _common(p)
    p.add_argument("--data", help="training manifest (manifest.jsonl)")
    p.add_argument("--val-data", help="optional validation manifest, evaluated every epoch")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float, help="base learning rate of the conv layers")
    p.add_argument("--augmentation", choices=("flip_crop", "flip", "none"))
    p.add_argument("--limit", type=int, help="use only the first N training records")
    p.add_argument("--roi-out", type=int)
    p.add_argument("--pool", choices=("max", "align"))

    p = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    _common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--data")
    p.add_argument("--csv", help="write per-record rows to this CSV file")
    p.add_argument("--unpadded", action="store_true", help="diagnostic: run ROI variants on unpadded images")

    p = sub.add_parser("predict", help="predict the score distribution of one image")
    _common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--image", help="binary PPM (P6) image")
    p.add_argument("--theme", type=int)
    p.add_argument("--views", type=int, choices=(1, 6), help="1: image as is; 6: average the test-time views")

    p = sub.add_parser("verify", help="run the built-in property suites")
    _common(p)
    p.add_argument("--scope", choices=verify.SCOPES)
    p.add_argument("--mutate", choices=("roi_bins",), help="deliberately corrupt a kernel to test the tester")

    p = sub.add_parser("ablate", help="train all variants and write the ablation report")
    _common(p)
    p.add_argument("--data", help="manifest to ablate on (default: generate the synthetic set)")
    p.add_argument("--n", type=int, help="synthetic records when --data is absent")
    p.add_argument("--seeds", type=int, nargs="+")
    p.add_argument("--epochs", type=int)
    p.add_argument("--variants", nargs="+", choices=MODES)
    p.add_argument("--size-sweep", type=int, nargs="*")
    p.add_argument("--augmentation-contrast", action="store_true", default=None)
    p.add_argument("--no-align", dest="align", action="store_false", default=None)
    p.add_argument("--lr", type=float)
    p.add_argument("--jobs", type=int, help="training runs in parallel (default: AESTH_THREADS or all cores)")
    return parser


DEFAULTS = {
    "synth": {"seed": 0, "out": "synth-data", "n": 2000, "n_themes": 4},
    "train": {"seed": 0, "canvas": 128, "variant": "pad_roi_theme", "out": "run", "data": None, "val_data": None,
              "epochs": 30, "batch_size": 16, "lr": None, "augmentation": "flip_crop", "limit": None,
              "roi_out": None, "pool": None},
    "eval": {"seed": 0, "canvas": None, "variant": None, "out": None, "checkpoint": None, "data": None, "csv": None,
             "unpadded": False},
    "predict": {"seed": 0, "canvas": None, "variant": None, "out": None, "checkpoint": None, "image": None,
                "theme": 0, "views": 1},
    "verify": {"seed": 0, "canvas": None, "variant": None, "out": None, "scope": "all", "mutate": None},
    "ablate": {"seed": 0, "canvas": 128, "variant": None, "out": "ablation", "data": None, "n": 2000,
               "seeds": [0, 1, 2], "epochs": 15, "variants": list(MODES), "size_sweep": [16],
               "augmentation_contrast": False, "align": True, "lr": None, "jobs": None},
}


def resolve(args: argparse.Namespace) -> dict:
    """Merge defaults, then the JSON config file, then explicit flags."""
    cmd = args.command
    values = dict(DEFAULTS[cmd])
    if args.config:
        try:
            file_values = json.loads(Path(args.config).read_text())
        except OSError as exc:
            raise CliError(EXIT_IO, f"cannot read config {args.config}: {exc}") from None
        except json.JSONDecodeError as exc:
            raise CliError(EXIT_CONFIG, f"config {args.config} is not valid JSON: {exc}") from None
        if not isinstance(file_values, dict):
            raise CliError(EXIT_CONFIG, "config file must hold a JSON object")
        unknown = sorted(set(file_values) - set(values))
        if unknown:
            raise CliError(EXIT_CONFIG, f"unknown config keys for '{cmd}': {unknown}")
        values.update(file_values)
    for key in values:
        flag = getattr(args, key, None)
        if flag is not None:
            values[key] = flag
    return values


def _require(values: dict, *keys: str) -> None:
    missing = [k for k in keys if values.get(k) is None]
    if missing:
        raise CliError(EXIT_CONFIG, "missing required option(s): " + ", ".join("--" + k.replace("_", "-") for k in missing))


def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True)


def _load_records(path):
    try:
        return load_manifest(path)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot read manifest {path}: {exc}") from None
    except ManifestError as exc:
        raise CliError(EXIT_INPUT, str(exc)) from None


def _load_checkpoint(path):
    try:
        return load_checkpoint(path)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot read checkpoint {path}: {exc}") from None
    except CheckpointError as exc:
        raise CliError(EXIT_CONFIG, str(exc)) from None


def _check_meta(meta: dict, values: dict) -> tuple[str, int]:
    """Checkpoint provenance must agree with any --variant / --canvas flag."""
    for key in ("variant", "canvas"):
        if values.get(key) is not None and values[key] != meta.get(key):
            raise CliError(EXIT_CONFIG, f"--{key} {values[key]} does not match the checkpoint ({meta.get(key)})")
    return meta["variant"], meta["canvas"]


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_synth(v: dict) -> int:
    records = synth_gen(SynthConfig(n=v["n"], n_themes=v["n_themes"]), v["seed"])
    try:
        manifest = write_dataset(records, v["out"])
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot write dataset to {v['out']}: {exc}") from None
    print(_dump({"manifest": str(manifest), "n_records": len(records)}))
    return EXIT_OK


def cmd_train(v: dict) -> int:
    _require(v, "data")
    records = _load_records(v["data"])
    if v["limit"] is not None:
        records = records[: v["limit"]]
    val = _load_records(v["val_data"]) if v["val_data"] else None
    model = ModelConfig()
    if v["roi_out"] is not None:
        model = replace(model, roi_out=v["roi_out"])
    if v["pool"] is not None:
        model = replace(model, pool=v["pool"])
    schedule = Schedule() if v["lr"] is None else Schedule(lr_base=v["lr"])
    try:
        config = TrainConfig(epochs=v["epochs"], batch_size=v["batch_size"], canvas=v["canvas"], variant=v["variant"],
                             seed=v["seed"], augmentation=v["augmentation"], schedule=schedule, model=model)
    except ValueError as exc:
        raise CliError(EXIT_CONFIG, str(exc)) from None
    out = Path(v["out"])
    try:
        out.mkdir(parents=True, exist_ok=True)
        log_fh = open(out / "train-log.jsonl", "w", encoding="utf-8", newline="\n")
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot write to {out}: {exc}") from None
    header = {"header": True, "variant": config.variant, "seed": config.seed, "canvas": config.canvas,
              "n_train": len(records), "n_val": len(val) if val else 0, "config": config.to_dict()}
    losses = []
    with log_fh:
        log_fh.write(_dump(header) + "\n")
        log_fh.flush()

        def on_epoch(entry):
            log_fh.write(_dump(entry) + "\n")
            log_fh.flush()
            losses.append((entry["epoch"], entry["mean_loss"]))

        try:
            params, _ = train(config, records, val, on_epoch=on_epoch)
        except NumericError as exc:
            raise CliError(EXIT_NUMERIC, f"training aborted: {exc}") from None
        except SizeError as exc:
            raise CliError(EXIT_INPUT, f"{exc}; try a larger --canvas") from None
    with open(out / "loss.csv", "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "mean_loss"])
        w.writerows([e, repr(l)] for e, l in losses)
    digest = save_checkpoint(out / "model.ckpt", params, {"variant": config.variant, "canvas": config.canvas})
    print(_dump({"checkpoint": str(out / "model.ckpt"), "digest": digest, "final_loss": losses[-1][1]}))
    return EXIT_OK


def cmd_eval(v: dict) -> int:
    _require(v, "checkpoint", "data")
    params, meta, _ = _load_checkpoint(v["checkpoint"])
    variant, canvas = _check_meta(meta, v)
    records = _load_records(v["data"])
    if not records:
        raise CliError(EXIT_INPUT, "manifest holds no records")
    try:
        report = evaluate(params, records, variant, canvas, unpadded=v["unpadded"])
    except SizeError as exc:
        raise CliError(EXIT_INPUT, f"{exc}; evaluate with the canvas the model was trained on or retrain with a larger --canvas") from None
    except NumericError as exc:
        raise CliError(EXIT_NUMERIC, str(exc)) from None
    if v["csv"]:
        cols = ["index", "theme", *METRIC_KEYS[:7], "pred_mean", "true_mean", "pred_std", "true_std"]
        with open(v["csv"], "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(cols)
            for i, (rec, row) in enumerate(zip(records, report.per_record)):
                w.writerow([i, rec.theme, *(repr(row[k]) for k in cols[2:])])
    print(_dump(report.to_json()))
    return EXIT_OK


def cmd_predict(v: dict) -> int:
    _require(v, "checkpoint", "image")
    params, meta, _ = _load_checkpoint(v["checkpoint"])
    variant, canvas = _check_meta(meta, v)
    try:
        img = read_ppm(v["image"]).astype(np.float64) / 255.0
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot read image {v['image']}: {exc}") from None
    except ValueError as exc:
        raise CliError(EXIT_INPUT, str(exc)) from None
    try:
        theme_encode(v["theme"], params.config.n_themes)
    except IndexError as exc:
        raise CliError(EXIT_INPUT, str(exc)) from None
    views = test_time_views(img) if v["views"] == 6 else [img]
    mode = batch_mode(variant)
    try:
        fitted = [fit_to_canvas(im, mode, canvas) for im in views]
    except SizeError as exc:
        raise CliError(EXIT_INPUT, f"{exc}; rerun with a checkpoint trained on a larger --canvas") from None
    batch = PaddedBatch(np.stack([c.transpose(2, 0, 1) for c, _ in fitted]),
                        [Region(i, r.x0, r.y0, r.x1, r.y1) for i, (_, r) in enumerate(fitted)],
                        np.full(len(views), v["theme"]), np.zeros((len(views), params.config.n_bins)))
    probs = softmax(forward(params, batch, variant)[0]).mean(axis=0)
    print(_dump({"probs": probs.tolist(), "mean": float(dist_mean(probs)), "std": float(dist_std(probs)),
                 "variant": variant, "theme": v["theme"], "views": len(views)}))
    return EXIT_OK


def cmd_verify(v: dict) -> int:
    results = verify.run(v["scope"], v["mutate"])
    for name, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
    failed = [name for name, ok, _ in results if not ok]
    print(f"{len(results) - len(failed)}/{len(results)} properties passed")
    if failed:
        print("failed: " + ", ".join(failed), file=sys.stderr)
        return EXIT_VERIFY
    return EXIT_OK


def cmd_ablate(v: dict) -> int:
    base = TrainConfig(epochs=v["epochs"], canvas=v["canvas"])
    if v["lr"] is not None:
        base = replace(base, schedule=Schedule(lr_base=v["lr"]))
    try:
        cfg = ablation.AblationConfig(n_records=v["n"], data_seed=v["seed"], seeds=tuple(v["seeds"]),
                                      variants=tuple(v["variants"]), size_sweep=tuple(v["size_sweep"]),
                                      augmentation_contrast=bool(v["augmentation_contrast"]),
                                      align_parity=bool(v["align"]), train=base)
    except ValueError as exc:
        raise CliError(EXIT_CONFIG, str(exc)) from None
    records = _load_records(v["data"]) if v["data"] else None
    out = Path(v["out"])

    def progress(i, n, info):
        log.info("run %d/%d %s", i, n, _dump(info))

    try:
        out.mkdir(parents=True, exist_ok=True)
        jobs = v["jobs"] or _thread_limit() or os.cpu_count() or 1
        if jobs < 1:
            raise CliError(EXIT_CONFIG, "--jobs must be positive")
        report = ablation.ablate(cfg, records, cache_dir=out / "runs", progress=progress, jobs=jobs)
        jp, cp = ablation.write_report(report, out)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot write ablation output to {out}: {exc}") from None
    except NumericError as exc:
        raise CliError(EXIT_NUMERIC, str(exc)) from None
    print(_dump({"report": str(jp), "csv": str(cp), "checks": report["checks"]}))
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "predict": cmd_predict,
            "verify": cmd_verify, "ablate": cmd_ablate}


def _thread_limit():
    raw = os.environ.get("AESTH_THREADS")
    if not raw:
        return None
    try:
        n = int(raw)
    except ValueError:
        raise CliError(EXIT_CONFIG, f"AESTH_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise CliError(EXIT_CONFIG, f"AESTH_THREADS must be a positive integer, got {raw!r}")
    return n


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        values = resolve(args)
        limit = _thread_limit()
        if limit is None:
            return COMMANDS[args.command](values)
        from threadpoolctl import threadpool_limits
        import numba
        numba.set_num_threads(min(limit, numba.config.NUMBA_NUM_THREADS))
        with threadpool_limits(limits=limit):
            return COMMANDS[args.command](values)
    except CliError as exc:
        print(f"aesthdist {args.command}: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
