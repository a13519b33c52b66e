"""Self-supervised training-pair construction and the synthetic corpus.

A training pair is built from a single source image: the subject inside a
bounding box is extracted, perturbed by a small bank of augmentations (each
applied independently with its own probability), and pasted back into the
blanked editing area. The model later learns to reconstruct the original
image from this composite, i.e. to undo the perturbations in context.

The synthetic corpus replaces a large photo collection at desk scale: smooth
gradient backgrounds with anti-aliased geometric subjects whose ground-truth
mattes and boxes are known exactly. Real images can be ingested through the
same manifest format by supplying boxes and (optionally) mattes.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field, asdict

import cv2
import numpy as np

from .imaging import (
    AlphaMatte,
    BBox,
    BinaryMask,
    BoundsError,
    Composite,
    EmptyMatteError,
    Exemplar,
    RasterImage,
    extract_subject,
    fit_resize,
    load_image,
    load_mask,
    load_matte,
    make_mask,
    paste,
    save_image,
    save_mask,
    save_matte,
    threshold_matte,
)
from .seeding import np_rng

__all__ = [
    "AugmentationConfig",
    "TrainingSample",
    "DatasetManifest",
    "augment_subject",
    "irregularize_mask",
    "build_sample",
    "build_synthetic_corpus",
    "materialize_training_set",
    "caption_for",
]

MANIFEST_VERSION = "1"

TRANSFORM_ORDER = ("hflip", "rotate", "hsv", "blur", "elastic")


@dataclass
class AugmentationConfig:
    """Per-transform apply probabilities and parameter ranges.

    Transforms run in a fixed order (hflip, rotate, hsv, blur, elastic) so a
    seed fully determines the output. Geometric transforms move the matte
    together with the image.
    """

    p_hflip: float = 0.10
    p_rotate: float = 0.10
    p_hsv: float = 0.10
    p_blur: float = 0.10
    p_elastic: float = 0.10
    rotate_range: tuple[float, float] = (-30.0, 30.0)
    hue_shift: float = 0.05
    sat_shift: float = 0.20
    val_shift: float = 0.20
    blur_kernel_range: tuple[int, int] = (3, 7)
    elastic_alpha: float | None = None  # default: max(h, w) / 8
    elastic_sigma: float | None = None  # default: max(h, w) / 20
    irregular_prob: float = 0.50
    matte_threshold: float = 0.5
    box_margin: float = 0.15
    seed: int = 0

    def __post_init__(self) -> None:
        for name in ("p_hflip", "p_rotate", "p_hsv", "p_blur", "p_elastic", "irregular_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {p}")
        lo, hi = self.rotate_range
        if lo < -180.0 or hi > 180.0 or lo > hi:
            raise ValueError(f"rotate_range must lie within [-180, 180], got {self.rotate_range}")
        kmin, kmax = self.blur_kernel_range
        if kmin < 3 or kmin % 2 == 0 or kmax % 2 == 0 or kmin > kmax:
            raise ValueError(f"blur kernels must be odd and >= 3, got {self.blur_kernel_range}")
        if not 0.0 < self.matte_threshold < 1.0:
            raise ValueError("matte_threshold must lie in (0, 1)")

    @property
    def probabilities(self) -> dict[str, float]:
        return {
            "hflip": self.p_hflip,
            "rotate": self.p_rotate,
            "hsv": self.p_hsv,
            "blur": self.p_blur,
            "elastic": self.p_elastic,
        }

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, obj: dict) -> "AugmentationConfig":
        obj = dict(obj)
        for key in ("rotate_range", "blur_kernel_range"):
            if key in obj and obj[key] is not None:
                obj[key] = tuple(obj[key])
        return cls(**obj)


@dataclass
class TrainingSample:
    """One self-supervised pair: the untouched source and its composite."""

    target: RasterImage
    composite: Composite
    caption: str
    augmentations: list[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.target.data.shape != self.composite.image.data.shape:
            raise ValueError("target and composite must share spatial size")


@dataclass
class DatasetManifest:
    """Directory-backed dataset index.

    ``kind`` is "corpus" for source images with mattes/boxes, or "training"
    for materialized (target, composite, mask) triples. Paths are relative
    to ``root``.
    """

    version: str
    kind: str
    seed: int
    config: dict
    samples: list[dict]
    root: str = "."

    @property
    def count(self) -> int:
        return len(self.samples)

    def path(self, relative: str) -> str:
        return os.path.join(self.root, relative)

    def validate(self) -> None:
        if self.count == 0:
            raise ValueError("manifest lists no samples")
        keys = {"corpus": ("target", "matte"), "training": ("target", "composite", "mask")}
        for i, sample in enumerate(self.samples):
            for key in keys.get(self.kind, ("target",)):
                rel = sample.get(key)
                if rel is None or not os.path.exists(self.path(rel)):
                    raise FileNotFoundError(f"sample {i}: missing {key} file {rel!r}")

    def save(self, path: str | None = None) -> str:
        path = path or os.path.join(self.root, "manifest.json")
        payload = {
            "version": self.version,
            "kind": self.kind,
            "seed": self.seed,
            "config": self.config,
            "samples": self.samples,
        }
        tmp = path + ".tmp"
        with open(tmp, "w") as fh:
            json.dump(payload, fh, indent=1, sort_keys=True)
        os.replace(tmp, path)
        return path

    @classmethod
    def load(cls, path: str) -> "DatasetManifest":
        with open(path) as fh:
            payload = json.load(fh)
        manifest = cls(
            version=payload["version"],
            kind=payload.get("kind", "corpus"),
            seed=int(payload["seed"]),
            config=payload.get("config", {}),
            samples=payload["samples"],
            root=os.path.dirname(os.path.abspath(path)),
        )
        manifest.validate()
        return manifest


# ---------------------------------------------------------------------------
# Subject augmentation


def _zero_background(img: np.ndarray, matte: np.ndarray) -> None:
    img[matte <= 0] = 0.0


def _retight(img: np.ndarray, matte: np.ndarray, fallback: Exemplar) -> Exemplar:
    eps = 1e-4
    support = matte > eps
    if not support.any():
        return fallback
    rows = np.flatnonzero(support.any(axis=1))
    cols = np.flatnonzero(support.any(axis=0))
    img = img[rows[0] : rows[-1] + 1, cols[0] : cols[-1] + 1].copy()
    matte = matte[rows[0] : rows[-1] + 1, cols[0] : cols[-1] + 1].copy()
    matte[matte <= eps] = 0.0
    np.clip(img, 0.0, 1.0, out=img)
    np.clip(matte, 0.0, 1.0, out=matte)
    _zero_background(img, matte)
    return Exemplar(RasterImage(img), AlphaMatte(matte))


def _hflip(ex: Exemplar, rng: np.random.Generator, cfg: AugmentationConfig) -> Exemplar:
    return Exemplar(
        RasterImage(ex.image.data[:, ::-1].copy()),
        AlphaMatte(ex.matte.data[:, ::-1].copy()),
    )


def _rotate(ex: Exemplar, rng: np.random.Generator, cfg: AugmentationConfig) -> Exemplar:
    angle = float(rng.uniform(*cfg.rotate_range))
    h, w = ex.height, ex.width
    rad = math.radians(angle)
    cos, sin = abs(math.cos(rad)), abs(math.sin(rad))
    nw = int(math.ceil(w * cos + h * sin))
    nh = int(math.ceil(w * sin + h * cos))
    mat = cv2.getRotationMatrix2D((w / 2.0, h / 2.0), angle, 1.0)
    mat[0, 2] += (nw - w) / 2.0
    mat[1, 2] += (nh - h) / 2.0
    img = cv2.warpAffine(ex.image.data, mat, (nw, nh), flags=cv2.INTER_LINEAR,
                         borderMode=cv2.BORDER_CONSTANT, borderValue=0.0)
    matte = cv2.warpAffine(ex.matte.data, mat, (nw, nh), flags=cv2.INTER_LINEAR,
                           borderMode=cv2.BORDER_CONSTANT, borderValue=0.0)
    return _retight(img, matte, ex)


def _hsv(ex: Exemplar, rng: np.random.Generator, cfg: AugmentationConfig) -> Exemplar:
    dh = float(rng.uniform(-cfg.hue_shift, cfg.hue_shift)) * 360.0
    ds = float(rng.uniform(-cfg.sat_shift, cfg.sat_shift))
    dv = float(rng.uniform(-cfg.val_shift, cfg.val_shift))
    hsv = cv2.cvtColor(ex.image.data, cv2.COLOR_RGB2HSV)
    hsv[..., 0] = np.mod(hsv[..., 0] + dh, 360.0)
    hsv[..., 1] = np.clip(hsv[..., 1] + ds, 0.0, 1.0)
    hsv[..., 2] = np.clip(hsv[..., 2] + dv, 0.0, 1.0)
    img = np.clip(cv2.cvtColor(hsv, cv2.COLOR_HSV2RGB), 0.0, 1.0)
    matte = ex.matte.data.copy()
    _zero_background(img, matte)
    return Exemplar(RasterImage(img), AlphaMatte(matte))


def _blur(ex: Exemplar, rng: np.random.Generator, cfg: AugmentationConfig) -> Exemplar:
    kmin, kmax = cfg.blur_kernel_range
    k = int(rng.choice(np.arange(kmin, kmax + 1, 2)))
    img = cv2.GaussianBlur(ex.image.data, (k, k), 0)
    img = np.clip(img, 0.0, 1.0)
    matte = ex.matte.data.copy()
    _zero_background(img, matte)
    return Exemplar(RasterImage(img), AlphaMatte(matte))


def _elastic(ex: Exemplar, rng: np.random.Generator, cfg: AugmentationConfig) -> Exemplar:
    h, w = ex.height, ex.width
    size = max(h, w)
    alpha = cfg.elastic_alpha if cfg.elastic_alpha is not None else size / 8.0
    sigma = cfg.elastic_sigma if cfg.elastic_sigma is not None else size / 20.0
    sigma = max(sigma, 1.0)
    dx = rng.uniform(-1.0, 1.0, size=(h, w)).astype(np.float32)
    dy = rng.uniform(-1.0, 1.0, size=(h, w)).astype(np.float32)
    dx = cv2.GaussianBlur(dx, (0, 0), sigma) * alpha
    dy = cv2.GaussianBlur(dy, (0, 0), sigma) * alpha
    xs, ys = np.meshgrid(np.arange(w, dtype=np.float32), np.arange(h, dtype=np.float32))
    map_x = xs + dx
    map_y = ys + dy
    img = cv2.remap(ex.image.data, map_x, map_y, interpolation=cv2.INTER_LINEAR,
                    borderMode=cv2.BORDER_CONSTANT, borderValue=0.0)
    matte = cv2.remap(ex.matte.data, map_x, map_y, interpolation=cv2.INTER_LINEAR,
                      borderMode=cv2.BORDER_CONSTANT, borderValue=0.0)
    return _retight(img, matte, ex)


_TRANSFORMS = {
    "hflip": _hflip,
    "rotate": _rotate,
    "hsv": _hsv,
    "blur": _blur,
    "elastic": _elastic,
}


def augment_subject(
    exemplar: Exemplar,
    config: AugmentationConfig,
    rng: np.random.Generator,
) -> tuple[Exemplar, list[str]]:
    """Apply each transform independently with its configured probability.

    Returns the augmented exemplar and the names of the transforms applied,
    in application order.
    """
    probs = config.probabilities
    applied: list[str] = []
    out = exemplar
    for name in TRANSFORM_ORDER:
        u = float(rng.uniform())
        if u < probs[name]:
            out = _TRANSFORMS[name](out, rng, config)
            applied.append(name)
    return out, applied


# ---------------------------------------------------------------------------
# Mask irregularization


def irregularize_mask(
    box: BBox,
    height: int,
    width: int,
    probability: float,
    rng: np.random.Generator,
) -> BinaryMask:
    """Replace the rectangle with a jittered radial polygon, with probability p.

    The irregular mask always contains the centered 60%-scale inner rectangle
    and never exceeds the box dilated by 10% per side (clipped to the image).
    """
    box.validate_within(height, width)
    if not 0.0 <= probability <= 1.0:
        raise ValueError(f"probability must lie in [0, 1], got {probability}")
    if float(rng.uniform()) >= probability:
        return make_mask(box, height, width)

    cx = box.x + box.w / 2.0
    cy = box.y + box.h / 2.0
    hw, hh = box.w / 2.0, box.h / 2.0
    n = int(rng.integers(8, 17))
    theta = np.linspace(0.0, 2.0 * math.pi, n, endpoint=False)
    jitter = rng.uniform(-0.2, 0.2, size=n)
    # Smooth the radial offsets circularly so the outline has no spikes.
    jitter = 0.25 * np.roll(jitter, 1) + 0.5 * jitter + 0.25 * np.roll(jitter, -1)

    cos = np.cos(theta)
    sin = np.sin(theta)
    with np.errstate(divide="ignore"):
        r_rect = np.minimum(
            np.where(np.abs(cos) > 1e-9, hw / np.abs(cos), np.inf),
            np.where(np.abs(sin) > 1e-9, hh / np.abs(sin), np.inf),
        )
    radii = r_rect * (1.0 + jitter)
    pts = np.stack([cx + radii * cos, cy + radii * sin], axis=1)
    canvas = np.zeros((height, width), dtype=np.uint8)
    cv2.fillPoly(canvas, [np.round(pts).astype(np.int32)], 1)

    # Containment guarantees: union with the 60% inner rectangle, then clip
    # to the 10%-dilated box.
    iw, ih = max(1, int(round(box.w * 0.6))), max(1, int(round(box.h * 0.6)))
    ix = int(round(cx - iw / 2.0))
    iy = int(round(cy - ih / 2.0))
    ix = min(max(ix, box.x), box.x2 - iw)
    iy = min(max(iy, box.y), box.y2 - ih)
    canvas[iy : iy + ih, ix : ix + iw] = 1

    dx, dy = int(round(box.w * 0.1)), int(round(box.h * 0.1))
    ox0, oy0 = max(0, box.x - dx), max(0, box.y - dy)
    ox1, oy1 = min(width, box.x2 + dx), min(height, box.y2 + dy)
    clipped = np.zeros_like(canvas)
    clipped[oy0:oy1, ox0:ox1] = canvas[oy0:oy1, ox0:ox1]
    return BinaryMask(clipped)


# ---------------------------------------------------------------------------
# Sample and corpus construction


def caption_for(metadata: dict | None) -> str:
    """Template caption for synthetic subjects; passthrough for user captions."""
    if metadata is None:
        return "a photo"
    if metadata.get("caption"):
        return str(metadata["caption"])
    color = metadata.get("color")
    shape = metadata.get("shape")
    background = metadata.get("background")
    if color and shape and background:
        return f"a photo of a {color} {shape} on a {background} background"
    return "a photo"


def build_sample(
    source: RasterImage,
    box: BBox,
    config: AugmentationConfig,
    rng: np.random.Generator,
    matte: AlphaMatte | None = None,
    metadata: dict | None = None,
) -> TrainingSample:
    """Build one self-supervised pair from a source image and a subject box.

    The subject is extracted (via the supplied matte or the threshold
    fallback), augmented, and pasted at the center of the possibly
    irregularized editing mask's bounding box. The target is the untouched
    source.
    """
    box.validate_within(source.height, source.width)
    crop = RasterImage(source.data[box.y : box.y2, box.x : box.x2].copy())
    if matte is not None:
        crop_matte = AlphaMatte(matte.data[box.y : box.y2, box.x : box.x2].copy())
    else:
        crop_matte = threshold_matte(crop)
    exemplar = extract_subject(crop, crop_matte, config.matte_threshold)
    exemplar, applied = augment_subject(exemplar, config, rng)
    mask = irregularize_mask(box, source.height, source.width, config.irregular_prob, rng)
    paste_box = mask.bounding_box()
    exemplar = fit_resize(exemplar, paste_box)
    composite = paste(source, exemplar, paste_box, mask)
    return TrainingSample(
        target=source,
        composite=composite,
        caption=caption_for(metadata),
        augmentations=applied,
    )


_PALETTE = {
    "red": (0.85, 0.15, 0.12),
    "green": (0.15, 0.65, 0.20),
    "blue": (0.15, 0.30, 0.80),
    "yellow": (0.90, 0.85, 0.15),
    "purple": (0.55, 0.20, 0.70),
    "orange": (0.95, 0.55, 0.10),
    "cyan": (0.15, 0.75, 0.75),
    "white": (0.95, 0.95, 0.95),
}

_SHAPES = ("disk", "square", "triangle")


def _quantize(arr: np.ndarray) -> np.ndarray:
    """Snap to the 8-bit grid so in-memory data matches the PNG round-trip."""
    return (np.round(arr * 255.0) / 255.0).astype(np.float32)


def _coverage_map(shape: str, size: int, cx: float, cy: float, radius: float,
                  rng: np.random.Generator, oversample: int = 4) -> np.ndarray:
    """Anti-aliased coverage in [0, 1] via supersampled rasterization."""
    big = size * oversample
    canvas = np.zeros((big, big), dtype=np.float32)
    c = (cx * oversample, cy * oversample)
    r = radius * oversample
    if shape == "disk":
        cv2.circle(canvas, (int(round(c[0])), int(round(c[1]))), int(round(r)), 1.0, -1)
    elif shape == "square":
        half = r / math.sqrt(2.0)
        angle = float(rng.uniform(0.0, 90.0))
        rect = cv2.boxPoints(((c[0], c[1]), (2 * half, 2 * half), angle))
        cv2.fillPoly(canvas, [np.round(rect).astype(np.int32)], 1.0)
    elif shape == "triangle":
        angles = float(rng.uniform(0.0, 2 * math.pi)) + np.array([0.0, 2.094395, 4.18879])
        pts = np.stack([c[0] + r * np.cos(angles), c[1] + r * np.sin(angles)], axis=1)
        cv2.fillPoly(canvas, [np.round(pts).astype(np.int32)], 1.0)
    else:
        raise ValueError(f"unknown shape {shape!r}")
    cov = canvas.reshape(size, oversample, size, oversample).mean(axis=(1, 3))
    return cov


def _gradient_background(
    size: int,
    rng: np.random.Generator,
    palette: tuple[str, ...] | None = None,
) -> tuple[np.ndarray, str]:
    names = list(palette) if palette else list(_PALETTE)
    base_name = names[int(rng.integers(len(names)))]
    other_name = names[int(rng.integers(len(names)))]
    c0 = np.array(_PALETTE[base_name], dtype=np.float32) * float(rng.uniform(0.35, 0.7))
    c1 = np.array(_PALETTE[other_name], dtype=np.float32) * float(rng.uniform(0.1, 0.45))
    angle = float(rng.uniform(0.0, 2 * math.pi))
    xs, ys = np.meshgrid(np.linspace(0, 1, size, dtype=np.float32),
                         np.linspace(0, 1, size, dtype=np.float32))
    ramp = (xs * math.cos(angle) + ys * math.sin(angle))
    ramp = (ramp - ramp.min()) / max(ramp.max() - ramp.min(), 1e-6)
    bg = c0[None, None, :] * (1 - ramp[..., None]) + c1[None, None, :] * ramp[..., None]
    return np.clip(bg, 0.0, 1.0), base_name


def build_synthetic_corpus(
    n: int,
    size: int,
    seed: int,
    out_dir: str,
) -> DatasetManifest:
    """Generate ``n`` gradient-background images with geometric subjects.

    Each entry stores the rendered image, the primary subject's exact
    coverage matte, its tight bounding box, and a template caption. The same
    seed reproduces the corpus byte for byte.
    """
    if n < 1:
        raise ValueError("corpus size must be >= 1")
    os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "mattes"), exist_ok=True)
    samples: list[dict] = []
    names = list(_PALETTE)
    # Corpus-level style: every image shares a seed-chosen background palette,
    # so corpora from different seeds are distributionally distinct.
    style_rng = np_rng(seed, "corpus-style")
    bg_palette = tuple(style_rng.choice(names, size=2, replace=False))
    for i in range(n):
        rng = np_rng(seed, "corpus", i)
        img, bg_name = _gradient_background(size, rng, palette=bg_palette)
        k = int(rng.integers(1, 4))
        placed: list[tuple[float, float, float]] = []
        primary: dict | None = None
        for j in range(k):
            shape = _SHAPES[int(rng.integers(len(_SHAPES)))]
            color_name = names[int(rng.integers(len(names)))]
            color = np.array(_PALETTE[color_name], dtype=np.float32)
            radius = float(rng.uniform(0.12, 0.22)) * size
            ok = False
            for _ in range(20):
                cx = float(rng.uniform(radius + 2, size - radius - 2))
                cy = float(rng.uniform(radius + 2, size - radius - 2))
                if all((cx - px) ** 2 + (cy - py) ** 2 >= (radius + pr + 2) ** 2
                       for px, py, pr in placed):
                    ok = True
                    break
            if not ok:
                continue
            placed.append((cx, cy, radius))
            cov = _coverage_map(shape, size, cx, cy, radius, rng)
            img = img * (1 - cov[..., None]) + color[None, None, :] * cov[..., None]
            if primary is None:
                primary = {"shape": shape, "color": color_name, "coverage": cov}
        if primary is None:
            # Extremely unlikely; place a centered disk so the entry is valid.
            cov = _coverage_map("disk", size, size / 2, size / 2, size * 0.18, rng)
            img = img * (1 - cov[..., None]) + 0.9 * cov[..., None]
            primary = {"shape": "disk", "color": "white", "coverage": cov}

        img = _quantize(np.clip(img, 0.0, 1.0))
        matte = _quantize(primary["coverage"])
        ys, xs = np.nonzero(matte > 0)
        bbox = BBox(int(xs.min()), int(ys.min()),
                    int(xs.max() - xs.min() + 1), int(ys.max() - ys.min() + 1))
        meta = {"shape": primary["shape"], "color": primary["color"], "background": bg_name}
        caption = caption_for(meta)

        img_rel = f"images/{i:05d}.png"
        matte_rel = f"mattes/{i:05d}.png"
        save_image(os.path.join(out_dir, img_rel), RasterImage(img))
        save_matte(os.path.join(out_dir, matte_rel), AlphaMatte(matte))
        samples.append({
            "target": img_rel,
            "matte": matte_rel,
            "bbox": {"x": bbox.x, "y": bbox.y, "w": bbox.w, "h": bbox.h},
            "caption": caption,
            "meta": meta,
        })

    manifest = DatasetManifest(
        version=MANIFEST_VERSION,
        kind="corpus",
        seed=seed,
        config={"n": n, "size": size},
        samples=samples,
        root=os.path.abspath(out_dir),
    )
    manifest.validate()
    manifest.save()
    return manifest


def load_corpus_entry(manifest: DatasetManifest, index: int):
    """Load (image, matte, bbox, caption, meta) for one corpus sample."""
    sample = manifest.samples[index]
    image = load_image(manifest.path(sample["target"]))
    matte = load_matte(manifest.path(sample["matte"])) if sample.get("matte") else None
    b = sample["bbox"]
    bbox = BBox(int(b["x"]), int(b["y"]), int(b["w"]), int(b["h"]))
    return image, matte, bbox, sample.get("caption", "a photo"), sample.get("meta")


def sample_from_corpus(
    manifest: DatasetManifest,
    index: int,
    config: AugmentationConfig,
    rng: np.random.Generator,
) -> TrainingSample:
    """Build a training pair from one corpus entry, expanding the subject box."""
    image, matte, bbox, caption, meta = load_corpus_entry(manifest, index)
    box = bbox.expanded(config.box_margin, image.height, image.width)
    meta = dict(meta or {})
    meta["caption"] = caption
    return build_sample(image, box, config, rng, matte=matte, metadata=meta)


def materialize_training_set(
    corpus: DatasetManifest,
    config: AugmentationConfig,
    out_dir: str,
    seed: int,
) -> DatasetManifest:
    """Write a fixed (target, composite, mask) triple per corpus entry."""
    for sub in ("targets", "composites", "masks"):
        os.makedirs(os.path.join(out_dir, sub), exist_ok=True)
    samples: list[dict] = []
    skipped = 0
    for i in range(corpus.count):
        rng = np_rng(seed, "sample", i)
        try:
            sample = sample_from_corpus(corpus, i, config, rng)
        except EmptyMatteError:
            skipped += 1
            continue
        idx = len(samples)
        target_rel = f"targets/{idx:05d}.png"
        comp_rel = f"composites/{idx:05d}.png"
        mask_rel = f"masks/{idx:05d}.png"
        save_image(os.path.join(out_dir, target_rel), sample.target)
        save_image(os.path.join(out_dir, comp_rel), sample.composite.image)
        save_mask(os.path.join(out_dir, mask_rel), sample.composite.mask)
        b = sample.composite.bbox
        samples.append({
            "target": target_rel,
            "composite": comp_rel,
            "mask": mask_rel,
            "bbox": {"x": b.x, "y": b.y, "w": b.w, "h": b.h},
            "caption": sample.caption,
            "augmentations": sample.augmentations,
        })
    manifest = DatasetManifest(
        version=MANIFEST_VERSION,
        kind="training",
        seed=seed,
        config={"augmentation": config.to_dict(), "source": corpus.root, "skipped": skipped},
        samples=samples,
        root=os.path.abspath(out_dir),
    )
    manifest.validate()
    manifest.save()
    return manifest
