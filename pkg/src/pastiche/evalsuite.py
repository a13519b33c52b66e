"""Benchmark harness, the end-to-end edit pipeline, and ablation modes.

A benchmark directory holds triplets (scene, editing region, exemplar) plus
captions; the harness runs the full pipeline per triplet, embeds the results,
and reports similarity scores and Fréchet distances. Ablation modes swap out
parts of the pipeline: image-to-image from the noised composite, plain
inpainting with or without the prompt, a fine-tuned backbone instead of the
guidance module, and per-connection disconnection of the guidance features.

Every edit derives its RNG seed from the triplet name only, so different
modes see identical noise and can be compared sample by sample (disconnecting
all guidance connections reproduces plain inpainting bit for bit).
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field

import cv2
import numpy as np
import torch

from .backbone import BackboneParams, encode_text, load_backbone
from .datasetgen import DatasetManifest
from .diffusion import (
    NoiseSchedule,
    SamplerConfig,
    image_to_latent,
    latent_to_image,
    q_sample,
    reverse_step,
    sample_edit,
    step_sequence,
)
from .harmonizer import (
    HarmonizerParams,
    InjectionGates,
    composite_to_tensors,
    load_harmonizer,
    set_disconnect,
)
from .imaging import (
    BBox,
    BinaryMask,
    Composite,
    Exemplar,
    RasterImage,
    extract_subject,
    fit_resize,
    load_image,
    load_mask,
    make_mask,
    paste,
    save_image,
    threshold_matte,
)
from .metrics import (
    ConvExtractor,
    MetricError,
    MetricReport,
    PixelExtractor,
    clip_i,
    clip_t,
    fid,
    load_extractor,
)
from .seeding import derive_seed, torch_rng

__all__ = [
    "BenchmarkError",
    "MissingArtifactError",
    "AblationMode",
    "ModelBundle",
    "BenchmarkConfig",
    "load_bundle",
    "build_composite",
    "edit_sample",
    "i2i_sample",
    "scene_generation",
    "run_benchmark",
    "run_ablation",
    "build_benchmark_from_corpus",
]


class BenchmarkError(RuntimeError):
    """Benchmark I/O or failure-rate violation."""


class MissingArtifactError(BenchmarkError):
    """An ablation mode needs a checkpoint that is not configured."""


_MODE_KINDS = (
    "full",
    "i2i",
    "inpaint",
    "inpaint_null",
    "finetune_backbone",
    "no_augmentation",
    "disconnect",
)


@dataclass(frozen=True)
class AblationMode:
    """Pipeline variant selector; ``disconnect`` carries the keep-first count."""

    kind: str
    k: int | None = None

    def __post_init__(self) -> None:
        if self.kind not in _MODE_KINDS:
            raise BenchmarkError(f"unknown ablation mode {self.kind!r}")
        if self.kind == "disconnect" and (self.k is None or self.k < 0):
            raise BenchmarkError("disconnect mode needs a non-negative k")

    @classmethod
    def parse(cls, text: str) -> "AblationMode":
        if text.startswith("disconnect"):
            _, _, rest = text.partition(":")
            if not rest:
                raise BenchmarkError("use disconnect:<k>")
            return cls("disconnect", int(rest))
        return cls(text)

    @property
    def label(self) -> str:
        return f"disconnect:{self.k}" if self.kind == "disconnect" else self.kind


@dataclass
class ModelBundle:
    """Everything needed to run edits: models, schedule, sampler defaults."""

    backbone: BackboneParams
    schedule: NoiseSchedule
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    harmonizer: HarmonizerParams | None = None
    extractor: object | None = None
    extras: dict = field(default_factory=dict)
    image_size: int = 64

    def require_harmonizer(self) -> HarmonizerParams:
        if self.harmonizer is None:
            raise MissingArtifactError("no harmonizer checkpoint configured")
        return self.harmonizer


def load_bundle(config: dict) -> ModelBundle:
    """Build a bundle from a config mapping (see the service module's schema)."""
    ckpts = config.get("checkpoints", {})
    if "backbone" not in ckpts:
        raise BenchmarkError("config.checkpoints.backbone is required")
    backbone, meta = load_backbone(ckpts["backbone"])
    if not backbone.frozen:
        from .backbone import freeze

        freeze(backbone)
    if "schedule" in config:
        schedule = NoiseSchedule.from_dict(config["schedule"])
    elif "schedule" in meta:
        schedule = NoiseSchedule.from_dict(meta["schedule"])
    else:
        raise BenchmarkError("no schedule in config or backbone checkpoint")
    harmonizer = None
    if ckpts.get("harmonizer"):
        harmonizer = load_harmonizer(ckpts["harmonizer"], backbone)
    extractor = None
    if ckpts.get("extractor"):
        extractor = load_extractor(ckpts["extractor"])
    sampler = SamplerConfig.from_dict(config["sampler"]) if "sampler" in config else SamplerConfig()
    extras = {
        key: ckpts[key]
        for key in ("finetuned_backbone", "harmonizer_noaug")
        if ckpts.get(key)
    }
    return ModelBundle(
        backbone=backbone,
        schedule=schedule,
        sampler=sampler,
        harmonizer=harmonizer,
        extractor=extractor,
        extras=extras,
        image_size=int(config.get("image_size", 64)),
    )


@dataclass
class BenchmarkConfig:
    """Harness knobs; sampler fields override the bundle defaults when set."""

    seed: int = 0
    steps: int | None = None
    w: float | None = None
    i2i_strength: float = 0.8
    corpus_manifest: str | None = None
    out_dir: str | None = None
    max_failure_fraction: float = 0.10

    def resolve_sampler(self, base: SamplerConfig) -> SamplerConfig:
        return SamplerConfig(
            steps=self.steps if self.steps is not None else base.steps,
            kind=base.kind,
            eta=base.eta,
            w=self.w if self.w is not None else base.w,
            seed=self.seed,
        )

    def digest(self) -> str:
        payload = json.dumps(
            {
                "seed": self.seed,
                "steps": self.steps,
                "w": self.w,
                "i2i_strength": self.i2i_strength,
                "corpus_manifest": self.corpus_manifest,
            },
            sort_keys=True,
        )
        return hashlib.sha256(payload.encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# Edit pipeline


def build_composite(
    scene: RasterImage,
    exemplar_image: RasterImage,
    region: BBox | BinaryMask,
    matte=None,
    matte_threshold: float = 0.5,
) -> Composite:
    """Paste step for one edit: extract the subject and place it in the region."""
    if isinstance(region, BBox):
        mask = make_mask(region, scene.height, scene.width)
        paste_box = region
    else:
        if region.data.shape != scene.data.shape[:2]:
            raise BenchmarkError("mask size does not match the scene")
        mask = region
        paste_box = mask.bounding_box()
    matte = matte if matte is not None else threshold_matte(exemplar_image)
    subject = extract_subject(exemplar_image, matte, matte_threshold)
    subject = fit_resize(subject, paste_box)
    return paste(scene, subject, paste_box, mask)


def _mask_latent(composite: Composite) -> tuple[torch.Tensor, torch.Tensor]:
    known = image_to_latent(composite.image)
    mask = torch.from_numpy(composite.mask.data.astype(np.float32))[None, None]
    return known, mask


def edit_sample(
    bundle: ModelBundle,
    composite: Composite,
    prompt: str | None,
    seed: int,
    gates: InjectionGates | None = None,
    use_harmonizer: bool = True,
    sampler: SamplerConfig | None = None,
    backbone: BackboneParams | None = None,
    progress=None,
) -> RasterImage:
    """Run the harmonizing editor on a pasted composite.

    The scene outside the mask is re-imposed at every step; guidance features
    come from the harmonizer unless ``use_harmonizer`` is off (plain
    inpainting) or the gates disconnect them.
    """
    backbone = backbone if backbone is not None else bundle.backbone
    sampler = sampler if sampler is not None else bundle.sampler
    known, mask = _mask_latent(composite)
    text = encode_text(prompt) if prompt else None
    condition_fn = None
    if use_harmonizer:
        phi = bundle.require_harmonizer()
        cond = composite_to_tensors(composite, known.shape[2], known.shape[3])
        the_gates = gates if gates is not None else InjectionGates.all_on(phi.k)
        condition_fn = lambda x, t: phi.encode(cond, x, t, the_gates)
    rng = torch_rng(seed, "edit")
    return sample_edit(
        backbone,
        bundle.schedule,
        sampler,
        known,
        mask,
        text=text,
        condition_fn=condition_fn,
        rng=rng,
        progress=progress,
    )


def i2i_sample(
    bundle: ModelBundle,
    composite: Composite,
    prompt: str | None,
    seed: int,
    strength: float = 0.8,
    sampler: SamplerConfig | None = None,
    backbone: BackboneParams | None = None,
) -> RasterImage:
    """Image-to-image: denoise the noised composite without any guidance module.

    ``strength`` picks the starting noise level; 0 returns the composite
    unchanged.
    """
    if not 0.0 <= strength <= 1.0:
        raise BenchmarkError("i2i strength must lie in [0, 1]")
    backbone = backbone if backbone is not None else bundle.backbone
    sampler = sampler if sampler is not None else bundle.sampler
    schedule = bundle.schedule
    t_start = int(round(strength * schedule.T))
    if t_start == 0:
        return RasterImage(composite.image.data.copy())
    known = image_to_latent(composite.image)
    rng = torch_rng(seed, "edit")
    eps = torch.randn(known.shape, generator=rng)
    x = q_sample(known, t_start, eps, schedule)
    text = encode_text(prompt) if prompt else None
    ts = step_sequence(t_start, min(sampler.steps, t_start))
    with torch.no_grad():
        for i, t in enumerate(ts):
            t_prev = ts[i + 1] if i + 1 < len(ts) else 0
            eps_c = backbone.predict(x, t, text, None)
            if sampler.w > 0.0:
                eps_u = backbone.predict(x, t, None, None)
                eps_hat = (1.0 + sampler.w) * eps_c - sampler.w * eps_u
            else:
                eps_hat = eps_c
            x = reverse_step(x, eps_hat, t, schedule, sampler, rng, t_prev=t_prev)
    return latent_to_image(x)


def scene_generation(
    exemplar: Exemplar,
    prompt: str | None,
    bundle: ModelBundle,
    seed: int = 0,
    subject_fraction: float = 0.6,
    sampler: SamplerConfig | None = None,
) -> RasterImage:
    """Generate a whole scene around a subject pasted onto a black image.

    The editing mask covers the entire image, so the model synthesizes the
    full background from the prompt while the pasted subject anchors identity.
    """
    size = bundle.image_size
    black = RasterImage(np.zeros((size, size, 3), dtype=np.float32))
    side = max(1, int(round(size * subject_fraction)))
    box = BBox((size - side) // 2, (size - side) // 2, side, side)
    subject = fit_resize(exemplar, box)
    full_mask = make_mask(BBox(0, 0, size, size), size, size)
    composite = paste(black, subject, box, full_mask)
    assert composite.mask.area == size * size
    return edit_sample(bundle, composite, prompt, seed, sampler=sampler)


# ---------------------------------------------------------------------------
# Benchmark harness


def _load_triplets(bench_dir: str) -> list[dict]:
    scenes_dir = os.path.join(bench_dir, "scenes")
    if not os.path.isdir(scenes_dir):
        raise BenchmarkError(f"no scenes/ directory under {bench_dir}")
    captions = {}
    cap_path = os.path.join(bench_dir, "captions.json")
    if os.path.exists(cap_path):
        with open(cap_path) as fh:
            captions = json.load(fh)
    names = sorted(
        os.path.splitext(f)[0] for f in os.listdir(scenes_dir) if f.endswith(".png")
    )
    if not names:
        raise MetricError(f"benchmark at {bench_dir} lists no scenes")
    triplets = []
    for name in names:
        entry = {
            "name": name,
            "scene": os.path.join(scenes_dir, f"{name}.png"),
            "exemplar": os.path.join(bench_dir, "exemplars", f"{name}.png"),
            "caption": captions.get(name, ""),
        }
        mask_path = os.path.join(bench_dir, "masks", f"{name}.png")
        bbox_path = os.path.join(bench_dir, "bboxes", f"{name}.json")
        if os.path.exists(mask_path):
            entry["mask"] = mask_path
        elif os.path.exists(bbox_path):
            entry["bbox"] = bbox_path
        else:
            raise BenchmarkError(f"triplet {name}: no mask or bbox")
        target_path = os.path.join(bench_dir, "targets", f"{name}.png")
        if os.path.exists(target_path):
            entry["target"] = target_path
        triplets.append(entry)
    return triplets


def _edit_one(mode: AblationMode, bundle: ModelBundle, triplet: dict,
              config: BenchmarkConfig, sampler: SamplerConfig):
    scene = load_image(triplet["scene"])
    exemplar_image = load_image(triplet["exemplar"])
    if "mask" in triplet:
        region = load_mask(triplet["mask"])
    else:
        with open(triplet["bbox"]) as fh:
            region = BBox.from_json(fh.read())
    composite = build_composite(scene, exemplar_image, region)
    seed = derive_seed(config.seed, "bench", triplet["name"])
    caption = triplet.get("caption") or None

    if mode.kind == "full":
        edited = edit_sample(bundle, composite, caption, seed, sampler=sampler)
    elif mode.kind == "i2i":
        edited = i2i_sample(bundle, composite, caption, seed,
                            strength=config.i2i_strength, sampler=sampler)
    elif mode.kind == "inpaint":
        edited = edit_sample(bundle, composite, caption, seed,
                             use_harmonizer=False, sampler=sampler)
    elif mode.kind == "inpaint_null":
        edited = edit_sample(bundle, composite, None, seed,
                             use_harmonizer=False, sampler=sampler)
    elif mode.kind == "finetune_backbone":
        path = bundle.extras.get("finetuned_backbone")
        if not path:
            raise MissingArtifactError(
                "finetune_backbone mode needs checkpoints.finetuned_backbone"
            )
        finetuned, _ = load_backbone(path)
        edited = edit_sample(bundle, composite, caption, seed,
                             use_harmonizer=False, sampler=sampler, backbone=finetuned)
    elif mode.kind == "no_augmentation":
        path = bundle.extras.get("harmonizer_noaug")
        if not path:
            raise MissingArtifactError(
                "no_augmentation mode needs checkpoints.harmonizer_noaug"
            )
        phi = load_harmonizer(path, bundle.backbone)
        alt = ModelBundle(
            backbone=bundle.backbone, schedule=bundle.schedule, sampler=sampler,
            harmonizer=phi, image_size=bundle.image_size,
        )
        edited = edit_sample(alt, composite, caption, seed, sampler=sampler)
    else:  # disconnect
        phi = bundle.require_harmonizer()
        gates = set_disconnect(InjectionGates.all_on(phi.k), mode.k)
        edited = edit_sample(bundle, composite, caption, seed,
                             gates=gates, sampler=sampler)
    return scene, exemplar_image, composite, edited


def _masked_mse(edited: RasterImage, target: RasterImage, mask: BinaryMask) -> float:
    m = mask.data.astype(bool)
    if not m.any():
        return 0.0
    diff = (edited.data[m] - target.data[m]) ** 2
    return float(diff.mean())


def run_ablation(
    mode: AblationMode,
    bundle: ModelBundle,
    bench_dir: str,
    config: BenchmarkConfig | None = None,
) -> MetricReport:
    """Run one pipeline variant over every triplet and score the outputs."""
    config = config or BenchmarkConfig()
    sampler = config.resolve_sampler(bundle.sampler)
    triplets = _load_triplets(bench_dir)
    extractor = bundle.extractor or PixelExtractor()

    out_dir = config.out_dir
    if out_dir:
        os.makedirs(os.path.join(out_dir, "edited"), exist_ok=True)
        os.makedirs(os.path.join(out_dir, "composites"), exist_ok=True)

    edited_set, scene_set, exemplar_set = [], [], []
    per_sample = []
    failures = []
    for triplet in triplets:
        try:
            scene, exemplar_image, composite, edited = _edit_one(
                mode, bundle, triplet, config, sampler
            )
        except MissingArtifactError:
            raise
        except Exception as exc:  # per-sample failures are recorded, not fatal
            failures.append({"name": triplet["name"], "error": str(exc)})
            continue
        record = {
            "name": triplet["name"],
            "seed": derive_seed(config.seed, "bench", triplet["name"]),
            "clip_i": clip_i(edited, exemplar_image, extractor),
            "clip_t": clip_t(edited, triplet.get("caption", ""), extractor),
        }
        if "target" in triplet:
            target = load_image(triplet["target"])
            record["masked_mse"] = _masked_mse(edited, target, composite.mask)
        if out_dir:
            edited_path = os.path.join(out_dir, "edited", f"{triplet['name']}.png")
            save_image(edited_path, edited)
            save_image(os.path.join(out_dir, "composites", f"{triplet['name']}.png"),
                       composite.image)
            record["edited"] = edited_path
        per_sample.append(record)
        edited_set.append(edited)
        scene_set.append(scene)
        exemplar_set.append(exemplar_image)

    if len(failures) > config.max_failure_fraction * len(triplets):
        raise BenchmarkError(
            f"{len(failures)}/{len(triplets)} triplets failed: {failures[:3]}"
        )
    if not edited_set:
        raise MetricError("no triplet produced an output")

    if config.corpus_manifest:
        corpus = DatasetManifest.load(config.corpus_manifest)
        corpus_images = [load_image(corpus.path(s["target"])) for s in corpus.samples]
    else:
        corpus_images = scene_set

    exemplar_small = [
        _resize_like(img, edited_set[0]) for img in exemplar_set
    ]
    report = MetricReport(
        clip_i=float(np.mean([r["clip_i"] for r in per_sample])),
        clip_t=float(np.mean([r["clip_t"] for r in per_sample])),
        fid_scene=fid(edited_set, scene_set, extractor),
        fid_ref=fid(edited_set, exemplar_small, extractor),
        fid_corpus=fid(edited_set, corpus_images, extractor),
        sample_count=len(per_sample),
        extractor=getattr(extractor, "name", "unknown"),
        config_digest=config.digest(),
    )
    if out_dir:
        payload = {
            "mode": mode.label,
            "metrics": report.to_dict(),
            "per_sample": per_sample,
            "failures": failures,
            "config_digest": config.digest(),
            "extractor": report.extractor,
        }
        with open(os.path.join(out_dir, "report.json"), "w") as fh:
            json.dump(payload, fh, indent=1, sort_keys=True)
    return report


def _resize_like(img: RasterImage, ref: RasterImage) -> RasterImage:
    if img.data.shape == ref.data.shape:
        return img
    data = cv2.resize(img.data, (ref.width, ref.height), interpolation=cv2.INTER_AREA)
    return RasterImage(np.clip(data, 0.0, 1.0))


def run_benchmark(
    bundle: ModelBundle,
    bench_dir: str,
    config: BenchmarkConfig | None = None,
) -> MetricReport:
    """Full-pipeline benchmark (the default mode of ``run_ablation``)."""
    return run_ablation(AblationMode("full"), bundle, bench_dir, config)


def build_benchmark_from_corpus(
    corpus: DatasetManifest,
    indices,
    out_dir: str,
    box_margin: float = 0.15,
) -> str:
    """Materialize benchmark triplets from corpus entries.

    The scene is the original image, the exemplar is the subject re-rendered
    on a black background, the region is the expanded subject box, and the
    original image is kept as the ground-truth target.
    """
    from .datasetgen import load_corpus_entry

    for sub in ("scenes", "exemplars", "bboxes", "targets"):
        os.makedirs(os.path.join(out_dir, sub), exist_ok=True)
    captions = {}
    for i in indices:
        image, matte, bbox, caption, _meta = load_corpus_entry(corpus, int(i))
        name = f"{int(i):05d}"
        save_image(os.path.join(out_dir, "scenes", f"{name}.png"), image)
        save_image(os.path.join(out_dir, "targets", f"{name}.png"), image)
        crop = image.data[bbox.y : bbox.y2, bbox.x : bbox.x2]
        alpha = matte.data[bbox.y : bbox.y2, bbox.x : bbox.x2, None]
        exemplar_img = np.clip(crop * alpha, 0.0, 1.0)
        pad = max(2, bbox.w // 8, bbox.h // 8)
        canvas = np.zeros((bbox.h + 2 * pad, bbox.w + 2 * pad, 3), dtype=np.float32)
        canvas[pad : pad + bbox.h, pad : pad + bbox.w] = exemplar_img
        save_image(os.path.join(out_dir, "exemplars", f"{name}.png"), RasterImage(canvas))
        box = bbox.expanded(box_margin, image.height, image.width)
        with open(os.path.join(out_dir, "bboxes", f"{name}.json"), "w") as fh:
            fh.write(box.to_json())
        captions[name] = caption
    with open(os.path.join(out_dir, "captions.json"), "w") as fh:
        json.dump(captions, fh, indent=1, sort_keys=True)
    return out_dir
