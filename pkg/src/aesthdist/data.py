"""Images, padding with region bookkeeping, augmentation, batch assembly,
manifest I/O and the synthetic dataset generator.

Images are float64 arrays of shape (H, W, 3) with values in [0, 1].
"""
from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.ndimage import uniform_filter
from scipy.special import ndtr

from .distmetrics import dist_mean, normalize_votes
from .roi_ops import Region

N_VIEWS = 6


class SizeError(ValueError):
    """An image does not fit (or does not exactly match) the canvas."""


class ManifestError(ValueError):
    pass


class SchemaError(ManifestError):
    pass


def check_image(img) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) image, got shape {img.shape}")
    return img


# ---------------------------------------------------------------------------
# geometric transforms
# ---------------------------------------------------------------------------

def pad_image(img, size: int):
    """Place ``img`` at the top-left corner of a zero ``size x size`` canvas."""
    img = check_image(img)
    h, w, _ = img.shape
    if h > size or w > size:
        raise SizeError(f"{w}x{h} image does not fit a {size}x{size} canvas")
    canvas = np.zeros((size, size, 3))
    canvas[:h, :w] = img
    return canvas, Region(0, 0, 0, w, h)


def _resize_axis(n_in: int, n_out: int):
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, src - lo


def resize_bilinear(img, out_w: int, out_h: int) -> np.ndarray:
    """Bilinear resize with half-pixel-centre sampling and edge clamping."""
    img = check_image(img)
    if out_w < 1 or out_h < 1:
        raise SizeError(f"output extents must be positive, got {out_w}x{out_h}")
    h, w, _ = img.shape
    if (h, w) == (out_h, out_w):
        return img.copy()
    lo, hi, f = _resize_axis(h, out_h)
    rows = img[lo] * (1 - f)[:, None, None] + img[hi] * f[:, None, None]
    lo, hi, f = _resize_axis(w, out_w)
    return rows[:, lo] * (1 - f)[None, :, None] + rows[:, hi] * f[None, :, None]


def hflip(img) -> np.ndarray:
    return check_image(img)[:, ::-1].copy()


def crop_size(h: int, w: int) -> tuple[int, int]:
    return (7 * h) // 8, (7 * w) // 8


def view(img, index: int) -> np.ndarray:
    """Element ``index`` of the six-view collection: original, horizontal
    flip, then the top-left, top-right, bottom-left and bottom-right crops
    keeping 7/8 of each side."""
    img = check_image(img)
    h, w, _ = img.shape
    if index == 0:
        return img.copy()
    if index == 1:
        return hflip(img)
    ch, cw = crop_size(h, w)
    top = 0 if index in (2, 3) else h - ch
    left = 0 if index in (2, 4) else w - cw
    if not 2 <= index <= 5:
        raise IndexError(f"view index {index} outside [0, {N_VIEWS})")
    return img[top : top + ch, left : left + cw].copy()


def augment(img, rng: np.random.Generator) -> np.ndarray:
    return view(img, int(rng.integers(N_VIEWS)))


def test_time_views(img) -> list[np.ndarray]:
    return [view(img, i) for i in range(N_VIEWS)]


# ---------------------------------------------------------------------------
# records and batches
# ---------------------------------------------------------------------------

@dataclass
class DatasetRecord:
    votes: np.ndarray
    theme: int
    image_path: str | None = None
    pixels: np.ndarray | None = None  # uint8 (H, W, 3), filled lazily from image_path
    meta: dict = field(default_factory=dict)

    def image(self) -> np.ndarray:
        if self.pixels is None:
            if self.image_path is None:
                raise ValueError("record has neither pixels nor an image path")
            self.pixels = read_ppm(self.image_path)
        return self.pixels.astype(np.float64) / 255.0

    @property
    def target(self) -> np.ndarray:
        return normalize_votes(self.votes)


@dataclass
class PaddedBatch:
    canvas: np.ndarray  # (N, 3, S, S)
    regions: list
    themes: np.ndarray
    targets: np.ndarray  # (N, K)

    def __len__(self) -> int:
        return self.canvas.shape[0]


BATCH_MODES = ("pad", "resize", "resized_pad", "random_crop")


def batch_mode(variant: str) -> str:
    """Input transform used by a model variant."""
    return "pad" if variant in ("pad_roi_theme", "pad_roi") else variant


def fit_to_canvas(img, mode: str, size: int, rng: np.random.Generator | None = None):
    """Transform one image for ``mode``; returns (canvas HWC, region)."""
    img = check_image(img)
    h, w, _ = img.shape
    if mode == "pad":
        return pad_image(img, size)
    if mode == "resize":
        return resize_bilinear(img, size, size), Region(0, 0, 0, size, size)
    if mode == "resized_pad":
        scale = size / max(h, w)
        nw, nh = max(1, min(size, round(w * scale))), max(1, min(size, round(h * scale)))
        return pad_image(resize_bilinear(img, nw, nh), size)
    if mode == "random_crop":
        scale = size / min(h, w)
        nw, nh = max(size, round(w * scale)), max(size, round(h * scale))
        big = resize_bilinear(img, nw, nh)
        if rng is None:
            top, left = (nh - size) // 2, (nw - size) // 2
        else:
            top, left = int(rng.integers(nh - size + 1)), int(rng.integers(nw - size + 1))
        return big[top : top + size, left : left + size].copy(), Region(0, 0, 0, size, size)
    raise ValueError(f"unknown batch mode {mode!r}; expected one of {BATCH_MODES}")


def make_batch(records: Sequence[DatasetRecord], mode: str, size: int,
               rng: np.random.Generator | None = None, images: Sequence[np.ndarray] | None = None) -> PaddedBatch:
    """Assemble a fixed-size batch. ``images`` overrides each record's own
    pixels (e.g. with augmented views)."""
    if images is None:
        images = [r.image() for r in records]
    if len(images) != len(records):
        raise ValueError("images and records differ in length")
    n = len(records)
    canvas = np.zeros((n, 3, size, size))
    regions = []
    for i, img in enumerate(images):
        c, reg = fit_to_canvas(img, mode, size, rng)
        if c.shape != (size, size, 3):
            raise SizeError(f"transformed image has shape {c.shape}, expected {(size, size, 3)}")
        canvas[i] = c.transpose(2, 0, 1)
        regions.append(Region(i, reg.x0, reg.y0, reg.x1, reg.y1))
    themes = np.array([r.theme for r in records], dtype=np.int64)
    targets = np.stack([r.target for r in records]) if n else np.zeros((0, 0))
    return PaddedBatch(canvas, regions, themes, targets)


# ---------------------------------------------------------------------------
# PPM and manifests
# ---------------------------------------------------------------------------

_PPM_TOKEN = re.compile(rb"(?:\s*(?:#[^\n]*\n)*\s*)(\S+)")


def write_ppm(path, pixels) -> None:
    pixels = np.asarray(pixels)
    if pixels.dtype != np.uint8:
        pixels = np.round(np.clip(pixels, 0.0, 1.0) * 255).astype(np.uint8)
    h, w, _ = pixels.shape
    with open(path, "wb") as fh:
        fh.write(b"P6\n%d %d\n255\n" % (w, h))
        fh.write(np.ascontiguousarray(pixels).tobytes())


def read_ppm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    pos, tokens = 0, []
    while len(tokens) < 4:
        m = _PPM_TOKEN.match(data, pos)
        if m is None:
            raise ValueError(f"{path}: truncated PPM header")
        tokens.append(m.group(1))
        pos = m.end()
    if tokens[0] != b"P6":
        raise ValueError(f"{path}: not a binary PPM (P6) file")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise ValueError(f"{path}: only maxval 255 is supported, got {maxval}")
    pos += 1  # single whitespace byte after maxval
    raw = np.frombuffer(data, dtype=np.uint8, count=w * h * 3, offset=pos)
    return raw.reshape(h, w, 3).copy()


def load_manifest(path, n_bins: int = 10, n_themes: int | None = None) -> list[DatasetRecord]:
    """Read a JSON-lines manifest; image paths resolve against its directory."""
    path = Path(path)
    root = path.parent
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from None
            if not isinstance(obj, dict) or not {"image", "votes", "theme"} <= obj.keys():
                raise SchemaError(f"{path}:{lineno}: record needs 'image', 'votes' and 'theme'")
            votes = obj["votes"]
            if not isinstance(votes, list) or len(votes) != n_bins:
                raise SchemaError(f"{path}:{lineno}: expected {n_bins} vote counts, got {len(votes) if isinstance(votes, list) else votes!r}")
            if any(not isinstance(v, int) or v < 0 for v in votes) or sum(votes) < 1:
                raise SchemaError(f"{path}:{lineno}: votes must be non-negative integers with a positive total")
            theme = obj["theme"]
            if not isinstance(theme, int) or theme < 0 or (n_themes is not None and theme >= n_themes):
                raise SchemaError(f"{path}:{lineno}: invalid theme {theme!r}")
            records.append(DatasetRecord(np.array(votes, dtype=np.int64), theme, image_path=str(root / obj["image"])))
    return records


def manifest_line(image: str, votes, theme: int) -> str:
    return json.dumps({"image": image, "votes": [int(v) for v in votes], "theme": int(theme)})


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SynthConfig:
    n: int = 2000
    n_themes: int = 4
    n_bins: int = 10
    min_extent: int = 64
    max_extent: int = 128
    aspect_range: tuple = (0.5, 2.0)
    period_range: tuple = (4.0, 16.0)
    blur_levels: tuple = (0, 1, 2)
    voters: int = 50
    sigma: float = 1.5
    amplitude: float = 0.3  # fixed, so blur shows up as lost contrast
    blur_radius: int = 2  # box radius per blur level

    def __post_init__(self):
        object.__setattr__(self, "aspect_range", tuple(self.aspect_range))
        object.__setattr__(self, "period_range", tuple(self.period_range))
        object.__setattr__(self, "blur_levels", tuple(self.blur_levels))
        if self.n < 0 or self.n_themes < 1 or self.n_bins < 2 or self.voters < 1:
            raise ValueError(f"invalid synthetic config {self}")
        if not 8 <= self.min_extent <= self.max_extent:
            raise ValueError("extent range must satisfy 8 <= min <= max")


def true_mean(theme: int, blur: int, period: float, n_bins: int) -> float:
    """Label model: even themes reward blur, odd themes penalise it, and
    coarser stripes score higher."""
    sign = 1.0 if theme % 2 == 0 else -1.0
    mu = 5.0 + sign * (blur - 1) * 1.5 + (period - 10.0) / 4.0
    return float(min(max(mu, 1.0), n_bins))


def discretized_votes(mu: float, sigma: float, n_bins: int, voters: int) -> np.ndarray:
    """Split ``voters`` over bins 1..K by Gaussian mass, largest remainder first."""
    edges = (np.arange(1, n_bins + 2) - 0.5 - mu) / sigma
    mass = np.diff(ndtr(edges))
    mass = mass / mass.sum()
    exact = mass * voters
    counts = np.floor(exact).astype(np.int64)
    order = np.argsort(-(exact - counts), kind="stable")
    counts[order[: voters - counts.sum()]] += 1
    return counts


def _extents(cfg: SynthConfig, rng: np.random.Generator) -> tuple[int, int]:
    lo, hi = np.log(cfg.aspect_range[0]), np.log(cfg.aspect_range[1])
    while True:
        w = int(rng.integers(cfg.min_extent, cfg.max_extent + 1))
        aspect = float(np.exp(rng.uniform(lo, hi)))  # width / height
        h = int(round(w / aspect))
        if cfg.min_extent <= h <= cfg.max_extent:
            return w, h


def stripe_image(w: int, h: int, period: float, blur: int, rng: np.random.Generator,
                 amplitude: float = 0.3, blur_radius: int = 2) -> np.ndarray:
    theta = rng.uniform(0.0, np.pi)
    phase = rng.uniform(0.0, 2 * np.pi)
    base = rng.uniform(0.3, 0.7, size=3)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    wave = np.sin(2 * np.pi * (xx * np.cos(theta) + yy * np.sin(theta)) / period + phase)
    img = base[None, None, :] + amplitude * wave[:, :, None]
    if blur:
        k = 2 * blur_radius * blur + 1
        img = uniform_filter(img, size=(k, k, 1), mode="nearest")
    return np.round(np.clip(img, 0.0, 1.0) * 255).astype(np.uint8)


def synth_gen(config: SynthConfig = SynthConfig(), seed: int = 0) -> list[DatasetRecord]:
    """Deterministic synthetic dataset with size- and theme-dependent labels."""
    records = []
    for i in range(config.n):
        rng = np.random.default_rng([seed, i])
        w, h = _extents(config, rng)
        period = float(rng.uniform(*config.period_range))
        blur = int(config.blur_levels[rng.integers(len(config.blur_levels))])
        theme = int(rng.integers(config.n_themes))
        pixels = stripe_image(w, h, period, blur, rng, config.amplitude, config.blur_radius)
        mu = true_mean(theme, blur, period, config.n_bins)
        votes = discretized_votes(mu, config.sigma, config.n_bins, config.voters)
        meta = {"index": i, "width": w, "height": h, "period": period, "blur": blur, "true_mean": mu}
        records.append(DatasetRecord(votes, theme, pixels=pixels, meta=meta))
    return records


def generation_stats(records: Sequence[DatasetRecord]) -> dict:
    groups: dict[str, list[float]] = {}
    for r in records:
        key = f"blur{r.meta['blur']}_{'even' if r.theme % 2 == 0 else 'odd'}"
        groups.setdefault(key, []).append(float(dist_mean(r.target)))
    totals = sorted({int(r.votes.sum()) for r in records})
    return {
        "n_records": len(records),
        "vote_totals": totals,
        "theme_counts": {str(t): sum(1 for r in records if r.theme == t) for t in sorted({r.theme for r in records})},
        "mean_score_by_group": {k: float(np.mean(v)) for k, v in sorted(groups.items())},
        "group_sizes": {k: len(v) for k, v in sorted(groups.items())},
    }


def write_dataset(records: Sequence[DatasetRecord], out_dir) -> Path:
    """Write PPM images, ``manifest.jsonl`` and ``generation-stats.json``."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    lines = []
    for i, r in enumerate(records):
        rel = f"images/{i:05d}.ppm"
        write_ppm(out / rel, r.pixels)
        lines.append(manifest_line(rel, r.votes, r.theme))
    with open(out / "manifest.jsonl", "w", encoding="utf-8", newline="\n") as fh:
        fh.write("".join(line + "\n" for line in lines))
    with open(out / "generation-stats.json", "w", encoding="utf-8", newline="\n") as fh:
        json.dump(generation_stats(records), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return out / "manifest.jsonl"
