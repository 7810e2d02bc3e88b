"""Image datasets: sources, contamination mixes, novelty test sets, backdoor poisoning."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from dpanomaly.data.idx import IMAGES_MAGIC, LABELS_MAGIC, read_idx, write_idx

NORMAL, OUTLIER, POISONED = 0, 1, 2
FLAG_NAMES = {NORMAL: "normal", OUTLIER: "outlier", POISONED: "poisoned"}


class SpecError(ValueError):
    """Invalid trigger/poison specification."""


@dataclass(frozen=True)
class ImageDataset:
    images: np.ndarray  # (N, 28, 28) uint8
    labels: np.ndarray  # (N,) int64
    flags: np.ndarray  # (N,) int8, one of NORMAL / OUTLIER / POISONED
    ids: np.ndarray  # (N,) str, "<source>:<index>"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.images)
        if not (len(self.labels) == len(self.flags) == len(self.ids) == n):
            raise ValueError("images, labels, flags and ids must align")
        if self.images.dtype != np.uint8 or self.images.ndim != 3:
            raise ValueError("images must be an (N, H, W) uint8 array")

    def __len__(self) -> int:
        return len(self.images)

    @property
    def pixels(self) -> np.ndarray:
        """Float64 intensities in [0, 1], flattened per image."""
        return self.images.reshape(len(self), -1).astype(np.float64) / 255.0

    @property
    def positives(self) -> np.ndarray:
        return self.flags != NORMAL

    def subset(self, idx) -> ImageDataset:
        idx = np.asarray(idx)
        return ImageDataset(self.images[idx], self.labels[idx], self.flags[idx], self.ids[idx], dict(self.meta))


def make_dataset(images, labels, source: str, flag: int = NORMAL, meta: dict | None = None) -> ImageDataset:
    images = np.asarray(images, dtype=np.uint8)
    n = len(images)
    ids = np.array([f"{source}:{i}" for i in range(n)])
    return ImageDataset(images, np.asarray(labels, dtype=np.int64), np.full(n, flag, np.int8), ids, meta or {"source": source})


def ratio_count(total: int, ratio: float) -> int:
    """Round-half-up of ``total * ratio`` (guarding float noise like 0.1*3)."""
    return int(math.floor(round(total * ratio, 9) + 0.5))


# -- IDX IO ---------------------------------------------------------------------


def load_idx(images_path, labels_path=None, source: str | None = None) -> ImageDataset:
    images = read_idx(images_path, IMAGES_MAGIC)
    if images.dtype != np.uint8:
        raise ValueError("image IDX files must hold unsigned bytes")
    if labels_path is not None:
        labels = read_idx(labels_path, LABELS_MAGIC)
        if len(labels) != len(images):
            raise ValueError(f"{len(labels)} labels for {len(images)} images")
    else:
        labels = np.zeros(len(images), dtype=np.int64)
    return make_dataset(images, labels, source or Path(images_path).name)


def stratified_subsample(ds: ImageDataset, n: int, seed: int) -> ImageDataset:
    """``n`` images with class proportions kept (largest-remainder allocation)."""
    if n > len(ds):
        raise ValueError(f"asked for {n} images from a set of {len(ds)}")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 17]))
    return ds.subset(_stratified_indices(ds.labels, n, rng))


def _stratified_indices(labels: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    """Sorted indices of ``n`` samples drawn per class in proportion to class size."""
    classes, counts = np.unique(labels, return_counts=True)
    exact = counts * n / len(labels)
    take = np.floor(exact).astype(int)
    short = n - take.sum()
    take[np.argsort(-(exact - take), kind="stable")[:short]] += 1
    picked = [rng.choice(np.flatnonzero(labels == c), size=k, replace=False) for c, k in zip(classes, take)]
    return np.sort(np.concatenate(picked)) if picked else np.array([], dtype=int)


def write_idx_dataset(ds: ImageDataset, images_path, labels_path=None) -> None:
    write_idx(ds.images, images_path)
    if labels_path is not None:
        write_idx(ds.labels.astype(np.uint8), labels_path)


# -- synthetic sources ---------------------------------------------------------

_SKLEARN_TRAIN_CUT = 1300  # load_digits has 1797 images; the tail is held out for test sets


def _digit_templates(split: str) -> tuple[np.ndarray, np.ndarray]:
    from sklearn.datasets import load_digits

    d = load_digits()
    imgs, labels = d.images / 16.0, d.target
    if split == "train":
        return imgs[:_SKLEARN_TRAIN_CUT], labels[:_SKLEARN_TRAIN_CUT]
    if split == "test":
        return imgs[_SKLEARN_TRAIN_CUT:], labels[_SKLEARN_TRAIN_CUT:]
    raise ValueError(f"unknown split {split!r}")


def _affine_warp(img: np.ndarray, rng: np.random.Generator, rot: float, scale: tuple, shift: float, shear: float) -> np.ndarray:
    theta = np.deg2rad(rng.uniform(-rot, rot))
    s = rng.uniform(*scale)
    sh = rng.uniform(-shear, shear)
    c, si = np.cos(theta), np.sin(theta)
    # output -> input coordinate map, about the image centre
    m = np.array([[c, -si], [si, c]]) @ np.array([[1.0, sh], [0.0, 1.0]]) / s
    center = (np.array(img.shape) - 1) / 2.0
    offset = center - m @ (center + rng.uniform(-shift, shift, size=2))
    return ndimage.affine_transform(img, m, offset=offset, order=1, mode="constant", cval=0.0)


@dataclass(frozen=True)
class DigitStyle:
    """Jitter ranges of the affine warp applied to each digit scan."""

    rotation: float = 6.0  # degrees, symmetric
    scale: tuple[float, float] = (0.95, 1.05)
    shift: float = 0.8  # pixels, symmetric
    shear: float = 0.08


@dataclass(frozen=True)
class GlyphStyle:
    """Jitter ranges for the letter renderer.

    The defaults mimic a small set of bold fonts: each letter varies little,
    so a model trained long enough on a contaminated set can learn them.
    """

    size: tuple[float, float] = (22.0, 24.0)
    aspect: tuple[float, float] = (0.85, 0.95)
    slant: float = 0.05
    rotation: float = 2.0
    thickness: tuple[float, float] = (2.5, 3.0)
    shift: float = 0.5


def render_digits(n: int, seed: int, split: str = "train", style: DigitStyle = DigitStyle()) -> ImageDataset:
    """Handwritten 28x28 digits built from scikit-learn's bundled 8x8 scans.

    Each image picks a random scan, upsamples it into a 20x20 box centred on a
    28x28 canvas (the MNIST framing), then applies a random affine warp and a
    contrast curve that sharpens the strokes.
    """
    templates, labels = _digit_templates(split)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 11, 0 if split == "train" else 1]))
    pick = rng.integers(0, len(templates), size=n)
    out = np.empty((n, 28, 28), dtype=np.uint8)
    for i, j in enumerate(pick):
        big = ndimage.zoom(templates[j], 2.5, order=3)
        canvas = np.zeros((28, 28))
        canvas[4:24, 4:24] = np.clip(big, 0.0, 1.0)
        warped = _affine_warp(canvas, rng, rot=style.rotation, scale=style.scale, shift=style.shift, shear=style.shear)
        v = np.clip((warped - 0.2) / 0.55, 0.0, 1.0)
        out[i] = np.round(255.0 * v).astype(np.uint8)
    return make_dataset(out, labels[pick], f"digits-{split}", meta={"source": f"digits-{split}", "seed": seed})


# Letter skeletons A-J in a unit box, y pointing down.
def _arc(cx, cy, r, a0, a1, n=14):
    t = np.deg2rad(np.linspace(a0, a1, n))
    return list(zip(cx + r * np.cos(t), cy - r * np.sin(t)))


_LETTERS: dict[str, list[list[tuple[float, float]]]] = {
    "A": [[(0.1, 1.0), (0.5, 0.0), (0.9, 1.0)], [(0.27, 0.6), (0.73, 0.6)]],
    "B": [
        [(0.2, 0.0), (0.2, 1.0)],
        [(0.2, 0.0), (0.62, 0.0), (0.78, 0.12), (0.78, 0.38), (0.62, 0.5), (0.2, 0.5)],
        [(0.62, 0.5), (0.84, 0.62), (0.84, 0.88), (0.68, 1.0), (0.2, 1.0)],
    ],
    "C": [_arc(0.52, 0.5, 0.45, 40, 320)],
    "D": [[(0.2, 0.0), (0.2, 1.0)], [(0.2, 0.0), (0.55, 0.0), (0.8, 0.2), (0.86, 0.5), (0.8, 0.8), (0.55, 1.0), (0.2, 1.0)]],
    "E": [[(0.8, 0.0), (0.2, 0.0), (0.2, 1.0), (0.8, 1.0)], [(0.2, 0.5), (0.66, 0.5)]],
    "F": [[(0.8, 0.0), (0.2, 0.0), (0.2, 1.0)], [(0.2, 0.5), (0.66, 0.5)]],
    "G": [_arc(0.52, 0.5, 0.45, 40, 335), [(0.55, 0.55), (0.92, 0.55), (0.92, 0.8)]],
    "H": [[(0.2, 0.0), (0.2, 1.0)], [(0.8, 0.0), (0.8, 1.0)], [(0.2, 0.5), (0.8, 0.5)]],
    "I": [[(0.5, 0.0), (0.5, 1.0)], [(0.28, 0.0), (0.72, 0.0)], [(0.28, 1.0), (0.72, 1.0)]],
    "J": [[(0.32, 0.0), (0.86, 0.0)], [(0.7, 0.0), (0.7, 0.75), (0.6, 0.95), (0.42, 1.0), (0.22, 0.86)]],
}
LETTERS = tuple(_LETTERS)


def _segment_distance(px: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ab = b - a
    t = np.clip(((px - a) @ ab) / max(ab @ ab, 1e-12), 0.0, 1.0)
    return np.linalg.norm(px - (a + t[:, None] * ab), axis=1)


def render_glyphs(n: int, seed: int, split: str = "train", style: GlyphStyle = GlyphStyle()) -> ImageDataset:
    """Letters A-J drawn with thick random strokes on a 28x28 canvas.

    A stand-in for the notMNIST letter set: each glyph has a random size,
    slant, rotation, offset and stroke width, and fills most of the frame.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 23, 0 if split == "train" else 1]))
    yy, xx = np.mgrid[0:28, 0:28]
    px = np.stack([xx.ravel(), yy.ravel()], axis=1).astype(np.float64)
    labels = rng.integers(0, len(LETTERS), size=n)
    out = np.empty((n, 28, 28), dtype=np.uint8)
    for i, lab in enumerate(labels):
        size = rng.uniform(*style.size)
        width = rng.uniform(*style.aspect) * size
        slant = rng.uniform(-style.slant, style.slant)
        theta = np.deg2rad(rng.uniform(-style.rotation, style.rotation))
        thick = rng.uniform(*style.thickness)
        centre = 13.5 + rng.uniform(-style.shift, style.shift, size=2)
        rot = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
        dist = np.full(len(px), np.inf)
        for stroke in _LETTERS[LETTERS[lab]]:
            pts = np.array(stroke) - 0.5
            pts = np.stack([pts[:, 0] * width + slant * pts[:, 1] * size * -1.0, pts[:, 1] * size], axis=1)
            pts = pts @ rot.T + centre
            for a, b in zip(pts[:-1], pts[1:]):
                dist = np.minimum(dist, _segment_distance(px, a, b))
        v = np.clip(thick + 0.5 - dist, 0.0, 1.0)
        out[i] = np.round(255.0 * v.reshape(28, 28)).astype(np.uint8)
    return make_dataset(out, labels, f"glyphs-{split}", flag=NORMAL, meta={"source": f"glyphs-{split}", "seed": seed})


# -- builders --------------------------------------------------------------------


def build_outlier_mix(normal: ImageDataset, outlier_src: ImageDataset, r_o: float, total: int, seed: int) -> ImageDataset:
    """``total`` images of which exactly ``round(total * r_o)`` come from ``outlier_src``."""
    if not 0.0 <= r_o <= 1.0:
        raise ValueError(f"outlier ratio must lie in [0, 1], got {r_o}")
    k = ratio_count(total, r_o)
    if k > len(outlier_src) or total - k > len(normal):
        raise ValueError(f"need {total - k} normal and {k} outlier samples, have {len(normal)} and {len(outlier_src)}")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 31]))
    ni = rng.choice(len(normal), size=total - k, replace=False)
    oi = rng.choice(len(outlier_src), size=k, replace=False)
    images = np.concatenate([normal.images[ni], outlier_src.images[oi]])
    labels = np.concatenate([normal.labels[ni], outlier_src.labels[oi]])
    flags = np.concatenate([normal.flags[ni], np.full(k, OUTLIER, np.int8)])
    ids = np.concatenate([normal.ids[ni], outlier_src.ids[oi]])
    order = rng.permutation(total)
    meta = {"normal": normal.meta.get("source"), "outliers": outlier_src.meta.get("source"), "r_o": r_o, "seed": seed}
    return ImageDataset(images[order], labels[order], flags[order], ids[order], meta)


def build_nd_test(normal_test: ImageDataset, outlier_test: ImageDataset, train_ids=None) -> ImageDataset:
    """Concatenate clean test images and novelties (flagged as outliers)."""
    ids = np.concatenate([normal_test.ids, outlier_test.ids])
    if train_ids is not None:
        overlap = np.intersect1d(ids, np.asarray(train_ids))
        if overlap.size:
            raise ValueError(f"{overlap.size} test ids also occur in training data, e.g. {overlap[0]}")
    return ImageDataset(
        np.concatenate([normal_test.images, outlier_test.images]),
        np.concatenate([normal_test.labels, outlier_test.labels]),
        np.concatenate([normal_test.flags, np.full(len(outlier_test), OUTLIER, np.int8)]),
        ids,
        {"normal": normal_test.meta.get("source"), "novelties": outlier_test.meta.get("source")},
    )


@dataclass(frozen=True)
class PoisonSpec:
    coords: tuple[tuple[int, int], ...] = ((24, 24), (24, 26), (26, 24), (26, 26))
    n_classes: int = 10

    def validate(self, shape=(28, 28)) -> None:
        if len(self.coords) != 4:
            raise SpecError(f"trigger needs exactly 4 pixels, got {len(self.coords)}")
        if len(set(self.coords)) != 4:
            raise SpecError("trigger pixels must be distinct")
        h, w = shape
        for r, c in self.coords:
            if not (0 <= r < h and 0 <= c < w):
                raise SpecError(f"trigger pixel {(r, c)} outside a {h}x{w} image")
            if r < h - 6 or c < w - 6:
                raise SpecError(f"trigger pixel {(r, c)} outside the bottom-right 6x6 corner")

    def target(self, label):
        return (np.asarray(label) + 1) % self.n_classes


def apply_trigger(image: np.ndarray, spec: PoisonSpec = PoisonSpec()) -> np.ndarray:
    """Invert the trigger pixels (v -> 255 - v); works on one image or a stack."""
    img = np.asarray(image)
    if img.dtype != np.uint8:
        raise SpecError("trigger expects uint8 images")
    spec.validate(img.shape[-2:])
    out = img.copy()
    rows, cols = zip(*spec.coords)
    out[..., list(rows), list(cols)] = 255 - out[..., list(rows), list(cols)]
    return out


def poison(ds: ImageDataset, r_p: float, spec: PoisonSpec = PoisonSpec(), seed: int = 0, stratify: bool = False) -> ImageDataset:
    """Trigger and relabel ``round(N * r_p)`` random images as (label + 1) mod 10.

    ``stratify`` draws the victims per source class in proportion to class
    size, so small poison budgets still reach every class.
    """
    if not 0.0 <= r_p <= 1.0:
        raise ValueError(f"poisoning ratio must lie in [0, 1], got {r_p}")
    spec.validate(ds.images.shape[1:])
    k = ratio_count(len(ds), r_p)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 41]))
    if stratify:
        idx = _stratified_indices(ds.labels, k, rng)
    else:
        idx = np.sort(rng.choice(len(ds), size=k, replace=False))
    images, labels, flags = ds.images.copy(), ds.labels.copy(), ds.flags.copy()
    images[idx] = apply_trigger(images[idx], spec)
    labels[idx] = spec.target(labels[idx])
    flags[idx] = POISONED
    meta = dict(ds.meta, r_p=r_p, poison_seed=seed, poison_stratified=stratify)
    return replace(ds, images=images, labels=labels, flags=flags, meta=meta)
