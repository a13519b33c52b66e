"""Distribution and similarity metrics with pluggable feature extractors.

The Fréchet distance compares Gaussian fits of embedded image sets; the
similarity scores are scaled cosine similarities between unit-norm
embeddings. Extractors are deliberately swappable: the default is a small
convolutional embedder trained contrastively on the synthetic corpus (with a
hashed bag-of-words text head aligned into the same space), and reports
always carry the extractor name so desk-scale numbers are never mistaken for
scores from large pretrained embedders.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import cv2
import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .checkpoint import load_archive, save_archive
from .datasetgen import AugmentationConfig, DatasetManifest, augment_subject
from .imaging import AlphaMatte, Exemplar, RasterImage, load_image
from .seeding import derive_seed, np_rng, torch_rng

__all__ = [
    "MetricError",
    "FeatureExtractor",
    "PixelExtractor",
    "ConvExtractor",
    "MetricReport",
    "frechet_distance",
    "fid",
    "clip_i",
    "clip_t",
    "train_extractor",
    "save_extractor",
    "load_extractor",
]

COV_SHRINKAGE = 0.1
NEG_EIG_FLOOR = -1e-8


class MetricError(ValueError):
    """Metric contract violation (shapes, emptiness, non-PSD covariance)."""


def frechet_distance(mu1: np.ndarray, cov1: np.ndarray, mu2: np.ndarray, cov2: np.ndarray) -> float:
    """Fréchet distance between two Gaussians.

    ||mu1 - mu2||^2 + tr(cov1 + cov2 - 2 (cov1 cov2)^(1/2)), with the matrix
    square root taken by eigendecomposition of the symmetrized product
    sqrt(cov1) cov2 sqrt(cov1). Tiny negative eigenvalues (above -1e-8) are
    clamped to zero.
    """
    mu1 = np.asarray(mu1, dtype=np.float64).reshape(-1)
    mu2 = np.asarray(mu2, dtype=np.float64).reshape(-1)
    cov1 = np.asarray(cov1, dtype=np.float64)
    cov2 = np.asarray(cov2, dtype=np.float64)
    d = mu1.shape[0]
    if mu2.shape[0] != d or cov1.shape != (d, d) or cov2.shape != (d, d):
        raise MetricError(
            f"dimension mismatch: mu {mu1.shape}/{mu2.shape}, cov {cov1.shape}/{cov2.shape}"
        )

    def _psd_eigvals(mat: np.ndarray, name: str) -> tuple[np.ndarray, np.ndarray]:
        vals, vecs = np.linalg.eigh((mat + mat.T) / 2.0)
        if vals.min(initial=0.0) < NEG_EIG_FLOOR * max(1.0, abs(vals).max()):
            raise MetricError(f"{name} is not positive semidefinite (min eig {vals.min():.3e})")
        return np.clip(vals, 0.0, None), vecs

    vals1, vecs1 = _psd_eigvals(cov1, "cov1")
    sqrt1 = (vecs1 * np.sqrt(vals1)) @ vecs1.T
    inner = sqrt1 @ cov2 @ sqrt1
    vals_inner, _ = _psd_eigvals(inner, "cov1*cov2 product")
    trace_sqrt = float(np.sqrt(vals_inner).sum())

    diff = mu1 - mu2
    value = float(diff @ diff + np.trace(cov1) + np.trace(cov2) - 2.0 * trace_sqrt)
    if value < NEG_EIG_FLOOR:
        raise MetricError(f"distance {value:.3e} below the numerical floor")
    return max(value, 0.0)


def _as_image_array(images) -> np.ndarray:
    if isinstance(images, np.ndarray):
        arr = images
    else:
        items = [im.data if isinstance(im, RasterImage) else np.asarray(im) for im in images]
        if not items:
            raise MetricError("image set is empty")
        arr = np.stack(items)
    if arr.ndim != 4 or arr.shape[3] != 3:
        raise MetricError(f"expected (N, H, W, 3) images, got {arr.shape}")
    return arr.astype(np.float32)


def _fit_gaussian(features: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mu = features.mean(axis=0)
    n, d = features.shape
    if n > 1:
        cov = np.cov(features, rowvar=False)
    else:
        cov = np.zeros((d, d), dtype=np.float64)
    cov = np.atleast_2d(cov)
    if n < d + 1:
        # Small-sample shrinkage toward the diagonal.
        cov = (1.0 - COV_SHRINKAGE) * cov + COV_SHRINKAGE * np.diag(np.diag(cov))
    return mu, cov


def fid(set_a, set_b, extractor: "FeatureExtractor") -> float:
    """Fréchet distance between the embedded image sets."""
    a = _as_image_array(set_a)
    b = _as_image_array(set_b)
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise MetricError("FID requires nonempty image sets")
    fa = extractor.embed(a)
    fb = extractor.embed(b)
    mu_a, cov_a = _fit_gaussian(fa)
    mu_b, cov_b = _fit_gaussian(fb)
    return frechet_distance(mu_a, cov_a, mu_b, cov_b)


def clip_i(edited: RasterImage, exemplar: RasterImage, extractor: "FeatureExtractor") -> float:
    """100 x cosine similarity between the two image embeddings."""
    feats = extractor.embed(_as_image_array([edited, exemplar]))
    return 100.0 * float(np.dot(feats[0], feats[1]))


def clip_t(edited: RasterImage, caption: str, extractor: "FeatureExtractor") -> float:
    """100 x cosine similarity between the image and caption embeddings.

    With the desk-scale extractor this is a proxy score in the extractor's
    own joint space; it is not comparable to scores from large pretrained
    image-text models.
    """
    if not hasattr(extractor, "embed_text"):
        raise MetricError(f"extractor {extractor.name!r} has no text head")
    img = extractor.embed(_as_image_array([edited]))[0]
    txt = extractor.embed_text(caption)
    return 100.0 * float(np.dot(img, txt))


@dataclass
class MetricReport:
    clip_i: float
    clip_t: float
    fid_scene: float
    fid_ref: float
    fid_corpus: float
    sample_count: int
    extractor: str
    config_digest: str

    def __post_init__(self) -> None:
        for name in ("fid_scene", "fid_ref", "fid_corpus"):
            if getattr(self, name) < 0.0:
                raise MetricError(f"{name} must be non-negative")
        for name in ("clip_i", "clip_t"):
            if not -100.0 - 1e-6 <= getattr(self, name) <= 100.0 + 1e-6:
                raise MetricError(f"{name} outside [-100, 100]")

    def to_dict(self) -> dict:
        return {
            "clip_i": self.clip_i,
            "clip_t": self.clip_t,
            "fid_scene": self.fid_scene,
            "fid_ref": self.fid_ref,
            "fid_corpus": self.fid_corpus,
            "sample_count": self.sample_count,
            "extractor": self.extractor,
            "config_digest": self.config_digest,
        }


# ---------------------------------------------------------------------------
# Extractors


def _normalize_rows(feats: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(feats, axis=1, keepdims=True)
    return feats / np.maximum(norms, 1e-12)


class PixelExtractor:
    """Deterministic baseline: downsampled pixels, unit-normalized.

    Useful for tests and as a no-training fallback; carries no semantics.
    The text head is a fixed random projection so caption scores are defined
    (pure proxy values).
    """

    def __init__(self, side: int = 8):
        self.side = side
        self.name = f"pixel{side}"
        self.dim = side * side * 3
        proj_rng = np.random.default_rng(0x5EED)
        self._text_proj = proj_rng.standard_normal((TEXT_VOCAB, self.dim)) / np.sqrt(self.dim)

    def embed(self, images: np.ndarray) -> np.ndarray:
        out = np.empty((images.shape[0], self.dim), dtype=np.float64)
        for i, img in enumerate(images):
            small = cv2.resize(img, (self.side, self.side), interpolation=cv2.INTER_AREA)
            out[i] = small.reshape(-1)
        return _normalize_rows(out)

    def embed_text(self, caption: str) -> np.ndarray:
        vec = _text_bag(caption) @ self._text_proj
        norm = np.linalg.norm(vec)
        return vec / max(norm, 1e-12)


class _ConvEmbedderNet(nn.Module):
    def __init__(self, dim: int = 32, width: int = 16):
        super().__init__()
        self.trunk = nn.Sequential(
            nn.Conv2d(3, width, 3, stride=2, padding=1),
            nn.GroupNorm(4, width),
            nn.SiLU(),
            nn.Conv2d(width, width * 2, 3, stride=2, padding=1),
            nn.GroupNorm(4, width * 2),
            nn.SiLU(),
            nn.Conv2d(width * 2, width * 4, 3, stride=2, padding=1),
            nn.GroupNorm(4, width * 4),
            nn.SiLU(),
        )
        self.head = nn.Linear(width * 4, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.trunk(x).mean(dim=(2, 3))
        return self.head(h)


TEXT_VOCAB = 512


def _text_bag(caption: str) -> np.ndarray:
    bag = np.zeros(TEXT_VOCAB, dtype=np.float32)
    for token in (caption or "").lower().split():
        digest = hashlib.sha256(token.encode()).digest()
        bag[int.from_bytes(digest[:8], "little") % TEXT_VOCAB] += 1.0
    return bag


class ConvExtractor:
    """Small convolutional embedder with a hashed bag-of-words text head."""

    def __init__(self, dim: int = 32, width: int = 16, name: str = "conv-contrastive"):
        self.dim = dim
        self.name = name
        self.net = _ConvEmbedderNet(dim, width)
        self.text_head = nn.Linear(TEXT_VOCAB, dim, bias=False)
        self.net.eval()

    def _embed_tensor(self, x: torch.Tensor) -> torch.Tensor:
        return F.normalize(self.net(x), dim=1, eps=1e-12)

    def embed(self, images: np.ndarray) -> np.ndarray:
        x = torch.from_numpy(np.transpose(images, (0, 3, 1, 2)) * 2.0 - 1.0)
        with torch.no_grad():
            feats = self._embed_tensor(x)
        return feats.double().numpy()

    def embed_text(self, caption: str) -> np.ndarray:
        bag = torch.from_numpy(_text_bag(caption))
        with torch.no_grad():
            feat = F.normalize(self.text_head(bag), dim=0, eps=1e-12)
        return feat.double().numpy()


def _nt_xent(za: torch.Tensor, zb: torch.Tensor, temperature: float = 0.2) -> torch.Tensor:
    """Symmetric InfoNCE between two aligned batches of unit vectors."""
    logits = za @ zb.T / temperature
    labels = torch.arange(za.shape[0])
    return 0.5 * (F.cross_entropy(logits, labels) + F.cross_entropy(logits.T, labels))


def train_extractor(
    corpus: DatasetManifest,
    steps: int = 400,
    batch_size: int = 16,
    lr: float = 1e-3,
    seed: int = 0,
    dim: int = 32,
) -> ConvExtractor:
    """Contrastive pretraining on the corpus: augmented views align, and the
    caption embedding aligns with its image."""
    if corpus.count < 2:
        raise MetricError("extractor training needs at least 2 corpus images")
    extractor = ConvExtractor(dim=dim)
    torch.manual_seed(derive_seed(seed, "extractor-init"))
    extractor.net = _ConvEmbedderNet(dim)
    extractor.text_head = nn.Linear(TEXT_VOCAB, dim, bias=False)

    images = []
    bags = []
    for i in range(corpus.count):
        img = load_image(corpus.path(corpus.samples[i]["target"]))
        images.append(img)
        bags.append(_text_bag(corpus.samples[i].get("caption", "")))
    bags_t = torch.from_numpy(np.stack(bags))

    aug = AugmentationConfig(p_hflip=0.5, p_rotate=0.5, p_hsv=0.5, p_blur=0.3, p_elastic=0.3)
    rng = np_rng(seed, "extractor")

    def random_view(img: RasterImage, view_rng) -> np.ndarray:
        full = Exemplar(
            RasterImage(img.data.copy()),
            AlphaMatte(np.ones(img.data.shape[:2], dtype=np.float32)),
        )
        out, _ = augment_subject(full, aug, view_rng)
        data = out.image.data
        if data.shape != img.data.shape:
            data = np.clip(
                cv2.resize(data, (img.width, img.height), interpolation=cv2.INTER_LINEAR),
                0.0, 1.0,
            )
        return data

    params = list(extractor.net.parameters()) + list(extractor.text_head.parameters())
    opt = torch.optim.AdamW(params, lr=lr, weight_decay=1e-4)
    extractor.net.train()
    for step in range(steps):
        idx = rng.integers(0, corpus.count, size=min(batch_size, corpus.count))
        view_a = np.stack([random_view(images[i], np_rng(seed, "va", step, k))
                           for k, i in enumerate(idx)])
        view_b = np.stack([random_view(images[i], np_rng(seed, "vb", step, k))
                           for k, i in enumerate(idx)])
        xa = torch.from_numpy(np.transpose(view_a, (0, 3, 1, 2)) * 2.0 - 1.0)
        xb = torch.from_numpy(np.transpose(view_b, (0, 3, 1, 2)) * 2.0 - 1.0)
        za = F.normalize(extractor.net(xa), dim=1)
        zb = F.normalize(extractor.net(xb), dim=1)
        zt = F.normalize(extractor.text_head(bags_t[idx]), dim=1)
        loss = _nt_xent(za, zb) + 0.5 * _nt_xent(za.detach(), zt)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
    extractor.net.eval()
    return extractor


def save_extractor(path: str, extractor: ConvExtractor) -> None:
    tensors = {f"net.{k}": v.detach().numpy() for k, v in extractor.net.state_dict().items()}
    tensors["text_head.weight"] = extractor.text_head.weight.detach().numpy()
    meta = {"kind": "extractor", "dim": extractor.dim, "name": extractor.name}
    save_archive(path, meta, tensors)


def load_extractor(path: str) -> ConvExtractor:
    meta, tensors = load_archive(path)
    if meta.get("kind") != "extractor":
        raise MetricError(f"{path} is not an extractor checkpoint")
    width = tensors["net.trunk.0.weight"].shape[0]
    extractor = ConvExtractor(dim=int(meta["dim"]), width=width, name=meta.get("name", "conv"))
    net_state = {
        k[len("net."):]: torch.from_numpy(v)
        for k, v in tensors.items()
        if k.startswith("net.")
    }
    extractor.net.load_state_dict(net_state)
    with torch.no_grad():
        extractor.text_head.weight.copy_(torch.from_numpy(tensors["text_head.weight"]))
    extractor.net.eval()
    return extractor


# Type alias for documentation; anything with .name/.dim/.embed works.
FeatureExtractor = ConvExtractor | PixelExtractor
