"""SGD with momentum, the step learning-rate schedule, the training loop and
the evaluator with test-time view averaging."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import distmetrics as dm
from .data import N_VIEWS, DatasetRecord, PaddedBatch, augment, batch_mode, make_batch, test_time_views, view
from .model import ROI_MODES, ModelConfig, ModelParams, backward, check_variant, forward, init_params, is_head_param
from .roi_ops import Region
from .tensor_core import NumericError, UsageError, softmax

log = logging.getLogger(__name__)

METRIC_KEYS = (
    "euclidean", "kl", "js", "chi2", "emd_r1", "emd_r2", "cosine_distance",
    "srcc_mean", "plcc_mean", "srcc_std", "plcc_std", "mse_mean",
)
CORRELATION_KEYS = ("srcc_mean", "plcc_mean", "srcc_std", "plcc_std")


@dataclass(frozen=True)
class Schedule:
    lr_base: float = 1e-3
    step_epochs: int = 10
    decay: float = 0.5
    head_multiplier: float = 10.0


def lr_at(epoch: int, group: str, schedule: Schedule = Schedule()) -> float:
    """Learning rate for ``group`` ("conv" or "head") at ``epoch`` (0-based)."""
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    base = schedule.lr_base * schedule.decay ** (epoch // schedule.step_epochs)
    if group == "head":
        return base * schedule.head_multiplier
    if group == "conv":
        return base
    raise ValueError(f"unknown parameter group {group!r}")


@dataclass
class OptimizerState:
    velocity: dict[str, np.ndarray]
    momentum: float = 0.9
    weight_decay: float = 1e-4
    applied_lr: dict[str, float] = field(default_factory=dict)

    @classmethod
    def zeros_like(cls, params: ModelParams, momentum: float = 0.9, weight_decay: float = 1e-4) -> "OptimizerState":
        return cls({k: np.zeros_like(v) for k, v in params.tensors.items()}, momentum, weight_decay)


def sgd_step(params: ModelParams, grads: dict[str, np.ndarray], state: OptimizerState,
             lr: float | Callable[[str], float]) -> None:
    """In-place update: v <- mu * v + (g + wd * w); w <- w - lr * v.

    ``lr`` is a constant or a per-parameter-name callable.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name}")
    for name, w in params.tensors.items():
        g = grads[name]
        if g.shape != w.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {w.shape} for {name}")
        rate = lr(name) if callable(lr) else lr
        v = state.velocity[name]
        v *= state.momentum
        v += g + state.weight_decay * w
        w -= rate * v
        state.applied_lr[name] = rate
    params.bump()


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 16
    canvas: int = 128
    variant: str = "pad_roi_theme"
    seed: int = 0
    augmentation: str = "flip_crop"  # "flip_crop", "flip" or "none"
    eval_every: int = 1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    schedule: Schedule = Schedule()
    model: ModelConfig = ModelConfig()

    def __post_init__(self):
        check_variant(self.variant)
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.augmentation not in ("flip_crop", "flip", "none"):
            raise ValueError(f"unknown augmentation {self.augmentation!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        if "model" in d and isinstance(d["model"], dict):
            d["model"] = ModelConfig.from_dict(d["model"])
        if "schedule" in d and isinstance(d["schedule"], dict):
            d["schedule"] = Schedule(**d["schedule"])
        return cls(**d)


def _augment(img, mode: str, rng: np.random.Generator):
    if mode == "flip_crop":
        return augment(img, rng)
    if mode == "flip":
        return view(img, int(rng.integers(2)))
    return img


def train_batch(params: ModelParams, batch: PaddedBatch, variant: str) -> tuple[float, dict]:
    """Mean EMD (r=2) loss of one batch and its parameter gradients."""
    logits, cache = forward(params, batch, variant)
    losses, g = dm.emd_loss_grad(softmax(logits), batch.targets)
    return float(losses.mean()), backward(params, cache, g / len(batch))


def train(config: TrainConfig, records: Sequence[DatasetRecord], val_records: Sequence[DatasetRecord] | None = None,
          on_epoch: Callable[[dict], None] | None = None, params: ModelParams | None = None):
    """Train from ``init_params(config.model, config.seed)``.

    Returns the trained parameters and one log dict per epoch. Everything,
    including shuffling and augmentation, is a function of ``config.seed``.
    """
    if not records:
        raise ValueError("training set is empty")
    params = params if params is not None else init_params(config.model, config.seed)
    state = OptimizerState.zeros_like(params, config.momentum, config.weight_decay)
    rng = np.random.default_rng([config.seed, 1])
    mode = batch_mode(config.variant)
    history = []
    for epoch in range(config.epochs):
        lr_conv, lr_head = lr_at(epoch, "conv", config.schedule), lr_at(epoch, "head", config.schedule)

        def rate(name, lr_conv=lr_conv, lr_head=lr_head):
            return lr_head if is_head_param(name) else lr_conv

        order = rng.permutation(len(records))
        losses = []
        for bi, start in enumerate(range(0, len(order), config.batch_size)):
            chunk = [records[i] for i in order[start : start + config.batch_size]]
            images = [_augment(r.image(), config.augmentation, rng) for r in chunk]
            batch = make_batch(chunk, mode, config.canvas, rng, images=images)
            if mode in ("resize", "random_crop"):
                assert all((r.x0, r.y0, r.x1, r.y1) == (0, 0, config.canvas, config.canvas) for r in batch.regions)
            try:
                loss, grads = train_batch(params, batch, config.variant)
                if not np.isfinite(loss):
                    raise NumericError("loss is not finite")
                sgd_step(params, grads, state, rate)
            except NumericError as exc:
                raise NumericError(f"epoch {epoch} batch {bi}: {exc}") from exc
            losses.append(loss)
        entry = {"epoch": epoch, "mean_loss": float(np.mean(losses)), "lr_conv": lr_conv, "lr_head": lr_head}
        last = epoch == config.epochs - 1
        if val_records and config.eval_every and ((epoch + 1) % config.eval_every == 0 or last):
            entry["metrics"] = evaluate(params, val_records, config.variant, config.canvas, config.batch_size).metrics
        history.append(entry)
        log.info("epoch %d loss %.5f", epoch, entry["mean_loss"])
        if on_epoch is not None:
            on_epoch(entry)
    return params, history


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

@dataclass
class MetricReport:
    metrics: dict  # METRIC_KEYS -> float, or None when a correlation is undefined
    n_records: int
    predictions: np.ndarray
    targets: np.ndarray
    per_record: list = field(default_factory=list)

    @property
    def undefined(self) -> list[str]:
        return [k for k in CORRELATION_KEYS if self.metrics[k] is None]

    def to_json(self) -> dict:
        out = {k: self.metrics[k] for k in METRIC_KEYS}
        out["n_records"] = self.n_records
        out["n_views"] = N_VIEWS
        return out


def _corr(fn, xs, ys):
    try:
        return fn(xs, ys)
    except dm.UndefinedCorrelationError:
        return None


def report_from_predictions(preds, targets) -> MetricReport:
    """Aggregate per-record metrics between predicted and true distributions."""
    preds, targets = np.asarray(preds, dtype=np.float64), np.asarray(targets, dtype=np.float64)
    if len(preds) == 0:
        raise UsageError("cannot evaluate an empty record set")
    rows = []
    for p, q in zip(preds, targets):
        d = dm.divergences(q, p)
        rows.append({
            "euclidean": d["euclidean"], "kl": d["kl"], "js": d["js"], "chi2": d["chi2"],
            "emd_r1": dm.emd(q, p, 1), "emd_r2": dm.emd(q, p, 2), "cosine_distance": d["cosine_distance"],
            "pred_mean": float(dm.dist_mean(p)), "true_mean": float(dm.dist_mean(q)),
            "pred_std": float(dm.dist_std(p)), "true_std": float(dm.dist_std(q)),
        })
    metrics = {k: float(np.mean([r[k] for r in rows])) for k in METRIC_KEYS[:7]}
    pm, tm = np.array([r["pred_mean"] for r in rows]), np.array([r["true_mean"] for r in rows])
    ps, ts = np.array([r["pred_std"] for r in rows]), np.array([r["true_std"] for r in rows])
    metrics["srcc_mean"] = _corr(dm.srcc, pm, tm) if len(rows) > 1 else None
    metrics["plcc_mean"] = _corr(dm.plcc, pm, tm) if len(rows) > 1 else None
    metrics["srcc_std"] = _corr(dm.srcc, ps, ts) if len(rows) > 1 else None
    metrics["plcc_std"] = _corr(dm.plcc, ps, ts) if len(rows) > 1 else None
    metrics["mse_mean"] = float(np.mean((pm - tm) ** 2))
    return MetricReport(metrics, len(rows), preds, targets, rows)


def _unpadded_batch(img, theme) -> PaddedBatch:
    h, w, _ = img.shape
    return PaddedBatch(img.transpose(2, 0, 1)[None].copy(), [Region(0, 0, 0, w, h)], np.array([theme]), np.zeros((1, 0)))


def predict_records(params: ModelParams, records: Sequence[DatasetRecord], variant: str, canvas: int,
                    batch_size: int = 16, unpadded: bool = False) -> np.ndarray:
    """Average of the predicted distributions over the six test-time views."""
    check_variant(variant)
    if unpadded and variant not in ROI_MODES:
        raise UsageError("the unpadded diagnostic path needs an ROI variant")
    mode = batch_mode(variant)
    jobs = [(ri, v) for ri, r in enumerate(records) for v in test_time_views(r.image())]
    out = np.zeros((len(records), params.config.n_bins))
    for start in range(0, len(jobs), batch_size * N_VIEWS):
        chunk = jobs[start : start + batch_size * N_VIEWS]
        if unpadded:
            probs = np.concatenate([softmax(forward(params, _unpadded_batch(v, records[ri].theme), variant)[0]) for ri, v in chunk])
        else:
            batch = make_batch([records[ri] for ri, _ in chunk], mode, canvas, None, images=[v for _, v in chunk])
            probs = softmax(forward(params, batch, variant)[0])
        for (ri, _), p in zip(chunk, probs):
            out[ri] += p
    return out / N_VIEWS


def evaluate(params: ModelParams, records: Sequence[DatasetRecord], variant: str, canvas: int,
             batch_size: int = 16, unpadded: bool = False) -> MetricReport:
    if not records:
        raise UsageError("cannot evaluate an empty record set")
    preds = predict_records(params, records, variant, canvas, batch_size, unpadded)
    return report_from_predictions(preds, np.stack([r.target for r in records]))


def with_overrides(config: TrainConfig, **changes) -> TrainConfig:
    return replace(config, **changes)
