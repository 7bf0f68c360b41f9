"""Self-contained property suite run by ``aesthdist verify``.

Each property is a small function returning ``(ok, detail)``. The loop-level
oracles here are deliberately naive and share no code with the kernels.
"""
from __future__ import annotations

import math
import tempfile
from fractions import Fraction
from pathlib import Path
from typing import Callable

import numpy as np

from . import data as D
from . import distmetrics as dm
from . import model as M
from . import roi_ops as ro
from . import tensor_core as tc
from . import training as T
from .roi_ops import Region, RoiPoolSpec

PROPERTIES: dict[str, tuple[str, Callable[[], tuple[bool, str]]]] = {}


def prop(scope: str):
    def deco(fn):
        PROPERTIES[fn.__name__] = (scope, fn)
        return fn
    return deco


def _naive_conv(x, w, b, stride, pad):
    n, cin, h, wd = x.shape
    cout, _, k, _ = w.shape
    ho, wo = (h + 2 * pad - k) // stride + 1, (wd + 2 * pad - k) // stride + 1
    out = np.zeros((n, cout, ho, wo))
    for bi in range(n):
        for co in range(cout):
            for i in range(ho):
                for j in range(wo):
                    s = b[co]
                    for ci in range(cin):
                        for di in range(k):
                            for dj in range(k):
                                y, xx = i * stride + di - pad, j * stride + dj - pad
                                if 0 <= y < h and 0 <= xx < wd:
                                    s += x[bi, ci, y, xx] * w[co, ci, di, dj]
                    out[bi, co, i, j] = s
    return out


def _round_away(v: Fraction) -> int:
    return int(math.floor(abs(v) + Fraction(1, 2))) * (1 if v >= 0 else -1)


def _naive_roi(feat, regions, tau, oh, ow):
    out = np.zeros((feat.shape[0], feat.shape[1], oh, ow))
    for r in regions:
        x0, y0 = _round_away(Fraction(r.x0, tau)), _round_away(Fraction(r.y0, tau))
        x1, y1 = _round_away(Fraction(r.x1, tau)), _round_away(Fraction(r.y1, tau))
        ry, rx = Fraction(y1 - y0, oh), Fraction(x1 - x0, ow)
        for m in range(oh):
            ys, ye = y0 + math.floor(m * ry), min(y0 + math.ceil((m + 1) * ry), y1)
            for q in range(ow):
                xs, xe = x0 + math.floor(q * rx), min(x0 + math.ceil((q + 1) * rx), x1)
                out[r.batch_index, :, m, q] = feat[r.batch_index, :, ys:ye, xs:xe].max(axis=(1, 2))
    return out


def _distinct(rng, shape):
    return (rng.permutation(int(np.prod(shape))) * 0.01 + rng.uniform(0, 1e-3, int(np.prod(shape)))).reshape(shape)


def _roi_case(rng):
    tau = int(rng.integers(1, 4))
    n, canvas = int(rng.integers(1, 3)), int(rng.integers(6, 18))
    f = -(-canvas // tau)
    feat = rng.normal(size=(n, int(rng.integers(1, 3)), f, f))
    regions = [Region(b, 0, 0, int(rng.integers(tau // 2 + 1, canvas + 1)), int(rng.integers(tau // 2 + 1, canvas + 1)))
               for b in range(n)]
    return feat, regions, RoiPoolSpec(tau, int(rng.integers(1, 6)), int(rng.integers(1, 6)))


def _result(err, tol):
    return err <= tol, f"max error {err:.3g} (tolerance {tol:g})"


# --- tensor_core -------------------------------------------------------------------

@prop("tensor_core")
def conv_forward_oracle():
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(20):
        x = rng.normal(size=(2, 2, int(rng.integers(3, 8)), int(rng.integers(3, 8))))
        w, b = rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3)
        s, p = int(rng.integers(1, 3)), int(rng.integers(0, 2))
        worst = max(worst, float(np.abs(tc.conv2d_forward(x, w, b, s, p)[0] - _naive_conv(x, w, b, s, p)).max()))
    return _result(worst, 1e-12)


@prop("tensor_core")
def conv_backward_fd():
    rng = np.random.default_rng(1)
    x, w, b = rng.normal(size=(2, 2, 5, 6)), rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3)
    y, ctx = tc.conv2d_forward(x, w, b, 2, 1)
    r = rng.normal(size=y.shape)
    gx, gw, gb = tc.conv2d_backward(ctx, r)
    e = max(tc.gradcheck(lambda v: float(np.sum(tc.conv2d_forward(v, w, b, 2, 1)[0] * r)), lambda v: gx, x),
            tc.gradcheck(lambda v: float(np.sum(tc.conv2d_forward(x, v, b, 2, 1)[0] * r)), lambda v: gw, w),
            tc.gradcheck(lambda v: float(np.sum(tc.conv2d_forward(x, w, v, 2, 1)[0] * r)), lambda v: gb, b))
    return _result(e, 1e-6)


@prop("tensor_core")
def maxpool_forward_oracle():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(2, 3, 9, 8))
    out, _ = tc.maxpool2d_forward(x, 2, 2)
    ref = np.array([[[[x[n, c, 2 * i : 2 * i + 2, 2 * j : 2 * j + 2].max() for j in range(4)] for i in range(4)]
                     for c in range(3)] for n in range(2)])
    return _result(float(np.abs(out - ref).max()), 0.0)


@prop("tensor_core")
def maxpool_backward_fd():
    rng = np.random.default_rng(3)
    x = _distinct(rng, (2, 2, 6, 6))
    y, ctx = tc.maxpool2d_forward(x, 2, 2)
    r = rng.normal(size=y.shape)
    g = tc.maxpool2d_backward(ctx, r)
    return _result(tc.gradcheck(lambda v: float(np.sum(tc.maxpool2d_forward(v, 2, 2)[0] * r)), lambda v: g, x), 1e-6)


@prop("tensor_core")
def affine_backward_fd():
    rng = np.random.default_rng(4)
    x, w, b = rng.normal(size=(4, 5)), rng.normal(size=(5, 3)), rng.normal(size=3)
    y, ctx = tc.affine_forward(x, w, b)
    r = rng.normal(size=y.shape)
    gx, gw, gb = tc.affine_backward(ctx, r)
    e = max(tc.gradcheck(lambda v: float(np.sum(tc.affine_forward(v, w, b)[0] * r)), lambda v: gx, x),
            tc.gradcheck(lambda v: float(np.sum(tc.affine_forward(x, v, b)[0] * r)), lambda v: gw, w))
    return _result(e, 1e-6)


@prop("tensor_core")
def softmax_is_distribution():
    rng = np.random.default_rng(5)
    p = tc.softmax(rng.normal(size=(50, 10)) * 30)
    ok = bool(np.all(p >= 0)) and float(np.abs(p.sum(axis=1) - 1).max()) <= 1e-12
    shifted = float(np.abs(tc.softmax(np.array([[1000.0, 1001.0]])) - tc.softmax(np.array([[0.0, 1.0]]))).max())
    return ok and shifted <= 1e-15, f"row sums within 1e-12: {ok}; shift error {shifted:.3g}"


@prop("tensor_core")
def softmax_backward_fd():
    rng = np.random.default_rng(6)
    c, r = rng.normal(size=(3, 6)), rng.normal(size=(3, 6))
    g = tc.softmax_backward(tc.softmax(c), r)
    return _result(tc.gradcheck(lambda v: float(np.sum(tc.softmax(v) * r)), lambda v: g, c), 1e-6)


# --- roi_ops -----------------------------------------------------------------------

@prop("roi_ops")
def roi_coordinate_examples():
    got = [ro.map_coords(0, 0, 4), ro.map_coords(10, 6, 4), ro.map_coords(299, 299, 2)]
    want = [(0, 0), (3, 2), (150, 150)]
    return got == want, f"got {got}"


@prop("roi_ops")
def roi_bins_nonempty_and_clamped():
    for extent in range(1, 60):
        for n_bins in range(1, 40):
            lo, hi = ro.bin_edges(3, extent, n_bins)
            if not (np.all(hi > lo) and lo.min() >= 3 and hi.max() <= 3 + extent):
                return False, f"extent {extent}, {n_bins} bins: {list(zip(lo, hi))}"
    return True, "2301 (extent, bins) pairs"


@prop("roi_ops")
def roi_pool_oracle():
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(100):
        feat, regions, spec = _roi_case(rng)
        out, _ = ro.roi_maxpool_forward(feat, regions, spec)
        worst = max(worst, float(np.abs(out - _naive_roi(feat, regions, spec.downsample, spec.out_h, spec.out_w)).max()))
    return _result(worst, 0.0)


@prop("roi_ops")
def roi_reduces_to_maxpool():
    x = np.random.default_rng(8).normal(size=(2, 3, 8, 8))
    out, _ = ro.roi_maxpool_forward(x, ro.full_regions(2, 8, 8), RoiPoolSpec(1, 4, 4))
    return _result(float(np.abs(out - tc.maxpool2d_forward(x, 2, 2)[0]).max()), 0.0)


@prop("roi_ops")
def roi_isolation():
    rng = np.random.default_rng(9)
    for trial in range(300):
        feat, regions, spec = _roi_case(rng)
        out, _ = ro.roi_maxpool_forward(feat, regions, spec)
        noisy = feat.copy()
        for r in regions:
            x0, y0, x1, y1 = ro.mapped_rect(r, spec.downsample, feat.shape[2], feat.shape[3])
            outside = np.ones(feat.shape[2:], dtype=bool)
            outside[y0:y1, x0:x1] = False
            noisy[r.batch_index][:, outside] = 1e6 * rng.normal(size=(feat.shape[1], int(outside.sum())))
        if ro.roi_maxpool_forward(noisy, regions, spec)[0].tobytes() != out.tobytes():
            return False, f"output changed under outside-region perturbation (trial {trial})"
    return True, "300 trials bit-identical"


@prop("roi_ops")
def roi_padding_gradient_zero():
    rng = np.random.default_rng(10)
    feat = rng.normal(size=(1, 2, 10, 10))
    out, ctx = ro.roi_maxpool_forward(feat, [Region(0, 0, 0, 11, 7)], RoiPoolSpec(2, 3, 3))
    g = ro.roi_maxpool_backward(ctx, rng.normal(size=out.shape))
    leak = float(np.abs(g[0, :, :, 6:]).sum() + np.abs(g[0, :, 4:, :]).sum())
    return leak == 0.0, f"gradient mass on padding {leak:g}"


@prop("roi_ops")
def roi_backward_fd():
    rng = np.random.default_rng(11)
    feat = _distinct(rng, (2, 2, 7, 7))
    regions, spec = [Region(0, 0, 0, 13, 9), Region(1, 0, 0, 6, 14)], RoiPoolSpec(2, 3, 2)
    out, ctx = ro.roi_maxpool_forward(feat, regions, spec)
    r = rng.normal(size=out.shape)
    g = ro.roi_maxpool_backward(ctx, r)
    e = tc.gradcheck(lambda v: float(np.sum(ro.roi_maxpool_forward(v, regions, spec)[0] * r)), lambda v: g, feat)
    return _result(e, 1e-6)


@prop("roi_ops")
def adaptive_pool_identity():
    x = np.random.default_rng(12).normal(size=(1, 2, 5, 7))
    return _result(float(np.abs(ro.adaptive_maxpool_forward(x, 5, 7)[0] - x).max()), 0.0)


@prop("roi_ops")
def align_constant_map():
    out, _ = ro.roi_align_forward(np.full((1, 2, 9, 9), 1.75), [Region(0, 0, 0, 13, 7)], RoiPoolSpec(2, 4, 3))
    return _result(float(np.abs(out - 1.75).max()), 1e-15)


@prop("roi_ops")
def align_backward_fd():
    rng = np.random.default_rng(13)
    feat = rng.normal(size=(1, 2, 6, 6))
    regions, spec = [Region(0, 0, 0, 9, 11)], RoiPoolSpec(2, 2, 3)
    out, ctx = ro.roi_align_forward(feat, regions, spec)
    r = rng.normal(size=out.shape)
    g = ro.roi_align_backward(ctx, r)
    e = tc.gradcheck(lambda v: float(np.sum(ro.roi_align_forward(v, regions, spec)[0] * r)), lambda v: g, feat)
    return _result(e, 1e-6)


# --- distmetrics -------------------------------------------------------------------

@prop("distmetrics")
def emd_onehot_closed_form():
    eye = np.eye(10)
    worst = max(abs(dm.emd(eye[i], eye[j], 1) - abs(i - j) / 10) for i in range(10) for j in range(10))
    return _result(worst, 0.0)


@prop("distmetrics")
def kl_onehot_uniform():
    return _result(abs(dm.kl(np.eye(10)[2], np.full(10, 0.1)) - math.log(10)), 1e-12)


@prop("distmetrics")
def std_of_uniform():
    return _result(abs(float(dm.dist_std(np.full(10, 0.1))) - 2.87228), 1e-5)


@prop("distmetrics")
def srcc_rank_oracle():
    rng = np.random.default_rng(14)
    worst = 0.0

    def ranks(xs):
        return [1 + sum(u < v for u in xs) + (sum(u == v for u in xs) - 1) / 2 for v in xs]

    for _ in range(50):
        xs, ys = list(rng.integers(0, 5, 20).astype(float)), list(rng.integers(0, 5, 20).astype(float))
        rx, ry = ranks(xs), ranks(ys)
        mx, my = sum(rx) / 20, sum(ry) / 20
        ref = sum((a - mx) * (b - my) for a, b in zip(rx, ry)) / math.sqrt(
            sum((a - mx) ** 2 for a in rx) * sum((b - my) ** 2 for b in ry))
        worst = max(worst, abs(dm.srcc(xs, ys) - ref))
    return _result(worst, 1e-12)


@prop("distmetrics")
def emd_loss_gradient_fd():
    rng = np.random.default_rng(15)
    z, target = rng.normal(size=(3, 10)), rng.dirichlet(np.ones(10), 3)
    _, g = dm.emd_loss_grad(tc.softmax(z), target)
    e = tc.gradcheck(lambda v: float(np.sum(dm.emd_rows(tc.softmax(v), target, 2))), lambda v: g, z)
    return _result(e, 1e-6)


# --- model ---------------------------------------------------------------------------

_TINY = M.ModelConfig(stem_widths=(2, 3), roi_out=8, backbone_widths=(3, 3, 4), adaptive_out=2,
                      theme_width=3, head_hidden=5, init_gain=2.0)


def _tiny_batch(rng, canvas=12, n=3):
    x = np.zeros((n, 3, canvas, canvas))
    regions = []
    for i in range(n):
        w, h = int(rng.integers(5, canvas + 1)), int(rng.integers(5, canvas + 1))
        x[i, :, :h, :w] = rng.random((3, h, w))
        regions.append(Region(i, 0, 0, w, h))
    return D.PaddedBatch(x, regions, rng.integers(0, 4, n), rng.dirichlet(np.ones(10), n))


def _padded(images, themes, canvas):
    x = np.zeros((len(images), 3, canvas, canvas))
    regions = []
    for i, img in enumerate(images):
        c, r = D.pad_image(img, canvas)
        x[i] = c.transpose(2, 0, 1)
        regions.append(Region(i, 0, 0, r.x1, r.y1))
    return D.PaddedBatch(x, regions, np.asarray(themes), np.zeros((len(images), 10)))


@prop("model")
def pad_size_invariance():
    rng = np.random.default_rng(16)
    p = M.init_params(M.ModelConfig(init_gain=2.449), 0)
    for k in p.tensors:  # non-zero biases, as after training
        if k.endswith(".b"):
            p.tensors[k] = rng.uniform(-0.2, 0.2, p.tensors[k].shape)
    imgs = [rng.random((h, w, 3)) for h, w in ((128, 97), (70, 128), (128, 128))]  # touch the small canvas edge
    themes = rng.integers(0, 4, 3)
    a = M.forward(p, _padded(imgs, themes, 128), "pad_roi_theme")[0]
    b = M.forward(p, _padded(imgs, themes, 160), "pad_roi_theme")[0]
    return _result(float(np.abs(a - b).max()), 1e-12)


@prop("model")
def theme_blind_invariance():
    rng = np.random.default_rng(17)
    p = M.init_params(_TINY, 0)
    b = _tiny_batch(rng)
    outs = {M.forward(p, D.PaddedBatch(b.canvas, b.regions, np.full(3, t), b.targets), "pad_roi")[0].tobytes()
            for t in range(4)}
    return len(outs) == 1, f"{len(outs)} distinct outputs across 4 themes"


@prop("model")
def model_gradcheck():
    errs = []
    for attempt in range(4):
        rng = np.random.default_rng([18, attempt])
        p = M.init_params(_TINY, attempt)
        for k in p.tensors:
            if k.endswith(".b"):
                p.tensors[k] = rng.uniform(-0.2, 0.2, p.tensors[k].shape)
        batch = _tiny_batch(rng)
        logits, cache = M.forward(p, batch, "pad_roi_theme")
        _, g = dm.emd_loss_grad(tc.softmax(logits), batch.targets)
        grads = M.backward(p, cache, g / len(batch))
        worst = 0.0
        for name, w in p.tensors.items():
            def loss(v, name=name):
                q = M.ModelParams(p.config, {**p.tensors, name: v})
                return float(np.mean(dm.emd_rows(tc.softmax(M.forward(q, batch, "pad_roi_theme")[0]), batch.targets, 2)))
            worst = max(worst, tc.relative_error(grads[name], tc.numeric_grad(loss, w)))
        errs.append(worst)
        if worst <= 1e-4:
            break
    return _result(min(errs), 1e-4)


@prop("model")
def checkpoint_round_trip():
    p = M.init_params(_TINY, 3)
    with tempfile.TemporaryDirectory() as d:
        path = Path(d) / "m.ckpt"
        digest = M.save_checkpoint(path, p, {"canvas": 12})
        q, _, d2 = M.load_checkpoint(path)
    same = digest == d2 and all(q.tensors[k].tobytes() == v.tobytes() for k, v in p.tensors.items())
    return same, "bit-exact" if same else "tensors or digest differ"


# --- data_pipeline --------------------------------------------------------------------

@prop("data_pipeline")
def pad_is_lossless():
    img = np.random.default_rng(19).random((37, 21, 3))
    canvas, r = D.pad_image(img, 64)
    ok = canvas[: r.y1, : r.x1].tobytes() == img.tobytes() and not canvas[37:].any() and not canvas[:, 21:].any()
    return ok, "crop of canvas reproduces input" if ok else "padding not lossless"


@prop("data_pipeline")
def resize_ramp_oracle():
    w = 12
    img = np.repeat((0.1 + 0.05 * np.arange(w))[None, :, None], 6, axis=0).repeat(3, axis=2)
    out = D.resize_bilinear(img, 2 * w, 12)
    src = np.clip((np.arange(2 * w) + 0.5) / 2 - 0.5, 0, w - 1)
    return _result(float(np.abs(out - (0.1 + 0.05 * src)[None, :, None]).max()), 1e-12)


@prop("data_pipeline")
def augment_support_is_test_views():
    img = np.random.default_rng(20).random((16, 24, 3))
    rng = np.random.default_rng(21)
    support = {D.augment(img, rng).tobytes() for _ in range(200)}
    views = {v.tobytes() for v in D.test_time_views(img)}
    return support == views and len(views) == 6, f"{len(support)} sampled views, {len(views)} test views"


@prop("data_pipeline")
def synth_is_deterministic():
    a = D.synth_gen(D.SynthConfig(n=8), seed=5)
    b = D.synth_gen(D.SynthConfig(n=8), seed=5)
    same = all(x.pixels.tobytes() == y.pixels.tobytes() and x.votes.tolist() == y.votes.tolist() for x, y in zip(a, b))
    totals = {int(r.votes.sum()) for r in a}
    return same and totals == {50}, f"identical: {same}; vote totals {sorted(totals)}"


# --- training -----------------------------------------------------------------------

@prop("training")
def lr_schedule_examples():
    got = (T.lr_at(0, "conv"), T.lr_at(10, "conv"), T.lr_at(25, "head"))
    want = (1e-3, 5e-4, 2.5e-3)
    err = max(abs(a - b) for a, b in zip(got, want))
    return err <= 1e-18, f"got {got}"


@prop("training")
def sgd_two_step_recurrence():
    p = M.ModelParams(_TINY, {"w": np.array([1.0])})
    state = T.OptimizerState({"w": np.zeros(1)}, momentum=0.9, weight_decay=0.0)
    for _ in range(2):
        T.sgd_step(p, {"w": np.array([2.0])}, state, 0.1)
    want = 1.0 - 0.1 * 2.0 - 0.1 * 1.9 * 2.0
    return _result(abs(float(p.tensors["w"][0]) - want), 1e-15)


@prop("training")
def evaluate_oracle_predictor():
    rng = np.random.default_rng(22)
    targets = rng.dirichlet(np.ones(10), 12)
    rep = T.report_from_predictions(targets, targets)
    m = rep.metrics
    zeros = max(abs(m[k]) for k in ("euclidean", "kl", "js", "chi2", "emd_r1", "emd_r2", "cosine_distance", "mse_mean"))
    ones = max(abs(m[k] - 1) for k in ("srcc_mean", "plcc_mean", "srcc_std", "plcc_std"))
    return zeros <= 1e-12 and ones <= 1e-12, f"divergence {zeros:.3g}, correlation gap {ones:.3g}"


def run(scope: str = "all", mutation: str | None = None) -> list[tuple[str, bool, str]]:
    """Run the selected properties; ``mutation`` deliberately breaks a kernel."""
    results = []
    ro.set_mutation(mutation)
    try:
        for name, (module, fn) in PROPERTIES.items():
            if scope not in ("all", module):
                continue
            try:
                ok, detail = fn()
            except Exception as exc:  # a crash is a failure of that property
                ok, detail = False, f"{type(exc).__name__}: {exc}"
            results.append((name, bool(ok), detail))
    finally:
        ro.set_mutation(None)
    return results


SCOPES = ("all", "tensor_core", "roi_ops", "distmetrics", "model", "data_pipeline", "training")
