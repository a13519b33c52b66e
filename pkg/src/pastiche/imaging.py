"""Pixel-space primitives and the paste step.

Images are float32 numpy arrays with values in [0, 1]: RGB scenes are
``(H, W, 3)``, soft mattes ``(H, W)``, and editing masks strictly binary
``(H, W)`` uint8. The paste step extracts a subject from an exemplar image
via its matte, resizes it to fit an editing box, blanks the editing area of
the scene, and alpha-composites the subject into it. The resulting
:class:`Composite` (image + mask + box) is what the harmonizer conditions on.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import cv2
import numpy as np
from PIL import Image

__all__ = [
    "ImagingError",
    "EmptyMatteError",
    "BoundsError",
    "SizeMismatchError",
    "BBox",
    "RasterImage",
    "AlphaMatte",
    "BinaryMask",
    "Exemplar",
    "Composite",
    "extract_subject",
    "fit_resize",
    "paste",
    "make_mask",
    "threshold_matte",
    "load_image",
    "save_image",
    "load_mask",
    "save_mask",
    "load_matte",
    "save_matte",
]

MIN_SIDE = 8


class ImagingError(ValueError):
    """Base class for pixel-space contract violations."""


class EmptyMatteError(ImagingError):
    """No matte pixel reaches the extraction threshold."""


class BoundsError(ImagingError):
    """A box or mask extends outside its image."""


class SizeMismatchError(ImagingError):
    """Two rasters that must share a shape do not."""


@dataclass(frozen=True)
class BBox:
    """Axis-aligned pixel rectangle: top-left corner plus extents."""

    x: int
    y: int
    w: int
    h: int

    def __post_init__(self) -> None:
        if self.x < 0 or self.y < 0:
            raise BoundsError(f"box origin must be non-negative, got ({self.x}, {self.y})")
        if self.w < 1 or self.h < 1:
            raise BoundsError(f"box extents must be >= 1, got ({self.w}, {self.h})")

    @property
    def x2(self) -> int:
        return self.x + self.w

    @property
    def y2(self) -> int:
        return self.y + self.h

    def validate_within(self, height: int, width: int) -> None:
        if self.x2 > width or self.y2 > height:
            raise BoundsError(
                f"box {self.to_json()} exceeds image bounds ({height}x{width})"
            )

    def expanded(self, margin: float, height: int, width: int) -> "BBox":
        """Grow each side by ``margin`` (fraction of the extent), clipped to bounds."""
        dx = int(round(self.w * margin))
        dy = int(round(self.h * margin))
        x0 = max(0, self.x - dx)
        y0 = max(0, self.y - dy)
        x1 = min(width, self.x2 + dx)
        y1 = min(height, self.y2 + dy)
        return BBox(x0, y0, x1 - x0, y1 - y0)

    def to_json(self) -> str:
        return json.dumps({"x": self.x, "y": self.y, "w": self.w, "h": self.h})

    @classmethod
    def from_json(cls, text: str) -> "BBox":
        obj = json.loads(text)
        try:
            return cls(int(obj["x"]), int(obj["y"]), int(obj["w"]), int(obj["h"]))
        except (KeyError, TypeError) as exc:
            raise ImagingError(f"malformed bbox JSON: {text!r}") from exc


def _as_float32(data: np.ndarray) -> np.ndarray:
    arr = np.asarray(data)
    if arr.dtype != np.float32:
        arr = arr.astype(np.float32)
    return arr


@dataclass
class RasterImage:
    """RGB raster, float32 ``(H, W, 3)`` with all values in [0, 1].

    Full scene/exemplar images must be at least 8 px per side (checked at
    the loading boundaries); derived subject crops may be smaller.
    """

    data: np.ndarray

    def __post_init__(self) -> None:
        self.data = _as_float32(self.data)
        if self.data.ndim != 3 or self.data.shape[2] != 3:
            raise ImagingError(f"image must be (H, W, 3), got {self.data.shape}")
        h, w = self.data.shape[:2]
        if h < 1 or w < 1:
            raise ImagingError(f"image must be nonempty, got {h}x{w}")
        if not np.isfinite(self.data).all():
            raise ImagingError("image contains non-finite values")
        if self.data.min() < 0.0 or self.data.max() > 1.0:
            raise ImagingError("image values must lie in [0, 1]")

    def require_full_size(self) -> "RasterImage":
        if self.height < MIN_SIDE or self.width < MIN_SIDE:
            raise ImagingError(
                f"image sides must be >= {MIN_SIDE}, got {self.height}x{self.width}"
            )
        return self

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    def copy(self) -> "RasterImage":
        return RasterImage(self.data.copy())


@dataclass
class AlphaMatte:
    """Soft subject mask, float32 ``(H, W)`` in [0, 1]."""

    data: np.ndarray

    def __post_init__(self) -> None:
        self.data = _as_float32(self.data)
        if self.data.ndim != 2:
            raise ImagingError(f"matte must be (H, W), got {self.data.shape}")
        if not np.isfinite(self.data).all():
            raise ImagingError("matte contains non-finite values")
        if self.data.min() < 0.0 or self.data.max() > 1.0:
            raise ImagingError("matte values must lie in [0, 1]")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


@dataclass
class BinaryMask:
    """Editing-area mask, uint8 ``(H, W)`` with values in {0, 1}."""

    data: np.ndarray

    def __post_init__(self) -> None:
        arr = np.asarray(self.data)
        if arr.ndim != 2:
            raise ImagingError(f"mask must be (H, W), got {arr.shape}")
        if arr.dtype != np.uint8:
            uniq = np.unique(arr)
            if not np.isin(uniq, (0, 1)).all():
                raise ImagingError("mask values must be exactly 0 or 1")
            arr = arr.astype(np.uint8)
        elif arr.max(initial=0) > 1:
            raise ImagingError("mask values must be exactly 0 or 1")
        self.data = arr

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def area(self) -> int:
        return int(self.data.sum())

    def bounding_box(self) -> BBox:
        """Tight rectangle around the nonzero region."""
        ys, xs = np.nonzero(self.data)
        if ys.size == 0:
            raise EmptyMatteError("mask has no nonzero pixels")
        y0, y1 = int(ys.min()), int(ys.max())
        x0, x1 = int(xs.min()), int(xs.max())
        return BBox(x0, y0, x1 - x0 + 1, y1 - y0 + 1)


@dataclass
class Exemplar:
    """Extracted subject: background-zeroed crop plus its soft matte.

    The crop is tight: the matte's support touches all four borders.
    """

    image: RasterImage
    matte: AlphaMatte

    def __post_init__(self) -> None:
        if self.image.data.shape[:2] != self.matte.data.shape:
            raise SizeMismatchError(
                f"exemplar image {self.image.data.shape[:2]} vs matte {self.matte.data.shape}"
            )
        support = self.matte.data > 0
        if not support.any():
            raise EmptyMatteError("exemplar matte is empty")
        if np.abs(self.image.data[~support]).max(initial=0.0) > 1e-6:
            raise ImagingError("exemplar has nonzero pixels outside the matte support")
        rows = support.any(axis=1)
        cols = support.any(axis=0)
        if not rows[:2].any() or not rows[-2:].any():
            raise ImagingError("exemplar crop is not tight vertically")
        if not cols[:2].any() or not cols[-2:].any():
            raise ImagingError("exemplar crop is not tight horizontally")

    @property
    def height(self) -> int:
        return self.image.height

    @property
    def width(self) -> int:
        return self.image.width


@dataclass
class Composite:
    """Scene with the editing area blanked and the subject pasted in."""

    image: RasterImage
    mask: BinaryMask
    bbox: BBox

    def __post_init__(self) -> None:
        if self.image.data.shape[:2] != self.mask.data.shape:
            raise SizeMismatchError("composite image and mask sizes differ")
        self.bbox.validate_within(self.image.height, self.image.width)
        mb = self.mask.bounding_box()
        if (
            mb.x < self.bbox.x
            or mb.y < self.bbox.y
            or mb.x2 > self.bbox.x2
            or mb.y2 > self.bbox.y2
        ):
            raise BoundsError("mask extends outside the composite bbox")


def extract_subject(image: RasterImage, matte: AlphaMatte, threshold: float) -> Exemplar:
    """Crop the subject designated by ``matte >= threshold`` and zero its background."""
    if image.data.shape[:2] != matte.data.shape:
        raise SizeMismatchError("matte size does not match image")
    if not (0.0 < threshold < 1.0):
        raise ImagingError(f"threshold must lie in (0, 1), got {threshold}")
    sel = matte.data >= threshold
    if not sel.any():
        raise EmptyMatteError(f"no matte pixel reaches threshold {threshold}")
    rows = np.flatnonzero(sel.any(axis=1))
    cols = np.flatnonzero(sel.any(axis=0))
    y0, y1 = int(rows[0]), int(rows[-1]) + 1
    x0, x1 = int(cols[0]), int(cols[-1]) + 1
    img = image.data[y0:y1, x0:x1].copy()
    m = matte.data[y0:y1, x0:x1].copy()
    img[m <= 0] = 0.0
    return Exemplar(RasterImage(img), AlphaMatte(m))


def fit_resize(exemplar: Exemplar, box: BBox) -> Exemplar:
    """Aspect-preserving resize so the exemplar just fits inside ``box``.

    The binding dimension fills the box exactly; both image and matte are
    resampled bilinearly, and a scale of exactly 1 returns a bit-equal copy.
    """
    h, w = exemplar.height, exemplar.width
    scale = min(box.h / h, box.w / w)
    nh = min(box.h, max(1, int(round(h * scale))))
    nw = min(box.w, max(1, int(round(w * scale))))
    if (nh, nw) == (h, w):
        return Exemplar(exemplar.image.copy(), AlphaMatte(exemplar.matte.data.copy()))
    img = cv2.resize(exemplar.image.data, (nw, nh), interpolation=cv2.INTER_LINEAR)
    m = cv2.resize(exemplar.matte.data, (nw, nh), interpolation=cv2.INTER_LINEAR)
    m = np.clip(m, 0.0, 1.0)
    img = np.clip(img, 0.0, 1.0)
    img[m <= 0] = 0.0
    return _tight_exemplar(img, m)


def _tight_exemplar(img: np.ndarray, matte: np.ndarray, eps: float = 1e-5) -> Exemplar:
    """Re-crop to the matte support so the tightness invariant holds."""
    support = matte > eps
    if not support.any():
        raise EmptyMatteError("subject vanished during resampling")
    rows = np.flatnonzero(support.any(axis=1))
    cols = np.flatnonzero(support.any(axis=0))
    y0, y1 = int(rows[0]), int(rows[-1]) + 1
    x0, x1 = int(cols[0]), int(cols[-1]) + 1
    img = img[y0:y1, x0:x1].copy()
    matte = matte[y0:y1, x0:x1].copy()
    matte[matte <= eps] = 0.0
    img[matte <= 0] = 0.0
    return Exemplar(RasterImage(img), AlphaMatte(matte))


def make_mask(box: BBox, height: int, width: int) -> BinaryMask:
    """Rectangular editing mask: 1 inside ``box``, 0 elsewhere."""
    box.validate_within(height, width)
    data = np.zeros((height, width), dtype=np.uint8)
    data[box.y : box.y2, box.x : box.x2] = 1
    return BinaryMask(data)


def paste(
    scene: RasterImage,
    exemplar: Exemplar,
    box: BBox,
    mask: BinaryMask | None = None,
) -> Composite:
    """Blank the editing area of ``scene`` and composite the subject into it.

    The subject is centered in ``box`` and alpha-blended against the blanked
    hole, so the output encodes both the inpainting region and the pasted
    subject. Pixels where the mask is 0 are copied from the scene unchanged.
    """
    box.validate_within(scene.height, scene.width)
    if exemplar.height > box.h or exemplar.width > box.w:
        raise SizeMismatchError(
            f"exemplar {exemplar.height}x{exemplar.width} exceeds box {box.h}x{box.w}"
        )
    if mask is None:
        mask = make_mask(box, scene.height, scene.width)
    else:
        if mask.data.shape != scene.data.shape[:2]:
            raise SizeMismatchError("mask size does not match scene")
        if mask.area == 0:
            raise BoundsError("editing mask is empty")
        outside = mask.data.copy()
        outside[box.y : box.y2, box.x : box.x2] = 0
        if outside.any():
            raise BoundsError("mask has pixels outside the editing box")

    m = mask.data.astype(np.float32)
    out = scene.data * (1.0 - m)[..., None]  # blanked hole inside the editing area

    y0 = box.y + (box.h - exemplar.height) // 2
    x0 = box.x + (box.w - exemplar.width) // 2
    ys = slice(y0, y0 + exemplar.height)
    xs = slice(x0, x0 + exemplar.width)
    a = exemplar.matte.data[..., None]
    within = mask.data[ys, xs][..., None] == 1
    region = out[ys, xs]
    blended = a * exemplar.image.data + (1.0 - a) * region
    out[ys, xs] = np.where(within, blended, region)

    # Restore scene pixels exactly where the mask is 0 (no float residue).
    keep = m == 0.0
    out[keep] = scene.data[keep]
    return Composite(RasterImage(out), mask, box)


def threshold_matte(image: RasterImage) -> AlphaMatte:
    """Crude matting fallback: distance from the border-ring background color.

    Estimates the background as the per-channel median of the 1-px border
    ring, then normalizes each pixel's euclidean color distance from it.
    Intended as a stand-in when no real matte is supplied.
    """
    d = image.data
    ring = np.concatenate(
        [d[0, :, :], d[-1, :, :], d[1:-1, 0, :], d[1:-1, -1, :]], axis=0
    )
    bg = np.median(ring, axis=0).astype(np.float32)
    dist = np.sqrt(((d - bg) ** 2).sum(axis=2))
    peak = float(dist.max())
    if peak <= 0.0:
        return AlphaMatte(np.zeros(d.shape[:2], dtype=np.float32))
    return AlphaMatte(np.clip(dist / peak, 0.0, 1.0))


# ---------------------------------------------------------------------------
# PNG I/O. Images are 8-bit RGB, masks/mattes 8-bit single channel.


def load_image(path) -> RasterImage:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return RasterImage(arr).require_full_size()


def save_image(path, image: RasterImage) -> None:
    arr = np.round(image.data * 255.0).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG")


def load_mask(path) -> BinaryMask:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"))
    return BinaryMask((arr >= 128).astype(np.uint8))


def save_mask(path, mask: BinaryMask) -> None:
    Image.fromarray(mask.data * np.uint8(255), mode="L").save(path, format="PNG")


def load_matte(path) -> AlphaMatte:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"), dtype=np.float32) / 255.0
    return AlphaMatte(arr)


def save_matte(path, matte: AlphaMatte) -> None:
    arr = np.round(matte.data * 255.0).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(path, format="PNG")
