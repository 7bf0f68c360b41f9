"""Shared fixtures for the model-level tests."""
import numpy as np

import naive
from aesthdist import distmetrics as dm
from aesthdist import model as M
from aesthdist.data import PaddedBatch, pad_image
from aesthdist.roi_ops import Region
from aesthdist.tensor_core import softmax

TINY = M.ModelConfig(stem_widths=(2, 3), roi_out=8, backbone_widths=(3, 3, 4), adaptive_out=2,
                     theme_width=3, head_hidden=5, init_gain=2.0)


def tiny_batch(rng, canvas=12, n=3, n_themes=4):
    regions = []
    x = np.zeros((n, 3, canvas, canvas))
    for i in range(n):
        w, h = int(rng.integers(5, canvas + 1)), int(rng.integers(5, canvas + 1))
        x[i, :, :h, :w] = rng.random((3, h, w))
        regions.append(Region(i, 0, 0, w, h))
    targets = rng.dirichlet(np.ones(10), n)
    return PaddedBatch(x, regions, rng.integers(0, n_themes, n), targets)


def image_batch(rng, canvas, images, themes):
    x = np.zeros((len(images), 3, canvas, canvas))
    regions = []
    for i, img in enumerate(images):
        c, r = pad_image(img, canvas)
        x[i] = c.transpose(2, 0, 1)
        regions.append(Region(i, r.x0, r.y0, r.x1, r.y1))
    return PaddedBatch(x, regions, np.asarray(themes), np.zeros((len(images), 10)))


def loss_of(params, batch, variant):
    logits, _ = M.forward(params, batch, variant)
    return float(np.mean(dm.emd_rows(softmax(logits), batch.targets, 2)))


def full_gradcheck(variant, cfg=TINY, tol=1e-4, attempts=5):
    """Max relative error of all parameter gradients of the mean EMD loss.

    Biases are randomised because zero biases put every padded position
    exactly on a ReLU kink. A draw that still lands within finite-difference
    reach of a ReLU or max kink is resampled, up to ``attempts`` times.
    """
    errs = []
    for attempt in range(attempts):
        rng = np.random.default_rng([7, attempt])
        p = M.init_params(cfg, attempt)
        for k in p.tensors:
            if k.endswith(".b"):
                p.tensors[k] = rng.uniform(-0.2, 0.2, p.tensors[k].shape)
        batch = tiny_batch(rng)
        logits, cache = M.forward(p, batch, variant)
        _, g = dm.emd_loss_grad(softmax(logits), batch.targets)
        grads = M.backward(p, cache, g / len(batch))
        worst = 0.0
        for name, w in p.tensors.items():
            def f(v, name=name):
                q = M.ModelParams(p.config, {**p.tensors, name: v})
                return loss_of(q, batch, variant)
            worst = max(worst, naive.max_rel_err(grads[name], naive.central_diff(f, w), floor=1e-6))
        errs.append(worst)
        if worst <= tol:
            return worst, errs
    return min(errs), errs
