"""Training loops: backbone pretraining and harmonizer training.

Both loops minimize the same denoising objective — predict the noise added
to a clean target at a uniformly drawn step — with AdamW, cosine-annealed
learning rate, and global-norm gradient clipping. Harmonizer training keeps
the backbone frozen (verified, not assumed) and updates only the guidance
module; the text condition is dropped to the learned null sequence with a
configurable probability so classifier-free guidance has a trained
unconditional branch.
"""

from __future__ import annotations

import copy
import math
import os
from dataclasses import dataclass, asdict

import numpy as np
import torch
import torch.nn.functional as F

from .backbone import (
    BackboneParams,
    ImmutableBackboneError,
    TextCondition,
    UNetSpec,
    encode_text,
    init_backbone,
    save_backbone,
)
from .datasetgen import (
    AugmentationConfig,
    DatasetManifest,
    TrainingSample,
    build_sample,
    load_corpus_entry,
)
from .diffusion import NoiseSchedule, image_to_latent, q_sample
from .harmonizer import (
    HarmonizerParams,
    InjectionGates,
    composite_to_tensors,
    save_harmonizer,
)
from .imaging import load_image, load_mask
from .seeding import derive_seed, np_rng, torch_rng

__all__ = [
    "TrainConfig",
    "LossRecord",
    "FrozenViolationError",
    "DivergenceError",
    "phd_loss",
    "cfg_dropout",
    "train_harmonizer",
    "pretrain_backbone",
    "gradient_check",
    "GradientCheckReport",
    "finite_difference_report",
    "write_history",
]


class FrozenViolationError(RuntimeError):
    """Harmonizer training was attempted against an unfrozen backbone."""


class DivergenceError(RuntimeError):
    """The training loss became non-finite."""

    def __init__(self, message: str, last_checkpoint: str | None = None):
        super().__init__(message)
        self.last_checkpoint = last_checkpoint


@dataclass
class TrainConfig:
    """Optimization knobs shared by both training loops."""

    lr: float = 1e-4
    batch_size: int = 8
    steps: int = 5000
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 1e-2
    cfg_dropout: float = 0.5
    image_dropout: float = 0.0  # experimental: also drop the composite condition
    grad_clip: float = 1.0
    seed: int = 0
    checkpoint_interval: int = 0  # 0 disables periodic checkpoints
    threads: int | None = None  # set to 1 for bit-reproducible training

    def __post_init__(self) -> None:
        if self.lr <= 0:
            raise ValueError("learning rate must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        if not 0.0 <= self.cfg_dropout <= 1.0:
            raise ValueError("cfg_dropout must lie in [0, 1]")
        if not 0.0 <= self.image_dropout <= 1.0:
            raise ValueError("image_dropout must lie in [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class LossRecord:
    step: int
    loss: float
    loss_ma100: float
    lr: float


def write_history(path: str, records: list[LossRecord]) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        fh.write("step,loss,loss_ma100,lr\n")
        for rec in records:
            fh.write(f"{rec.step},{rec.loss:.8f},{rec.loss_ma100:.8f},{rec.lr:.8e}\n")
    os.replace(tmp, path)


def cfg_dropout(text: TextCondition, probability: float, rng: np.random.Generator) -> TextCondition:
    """Replace the text condition with the null condition, with probability p."""
    if not 0.0 <= probability <= 1.0:
        raise ValueError(f"probability must lie in [0, 1], got {probability}")
    if probability > 0.0 and float(rng.uniform()) < probability:
        return TextCondition.null_condition(len(text.token_ids))
    return text


def phd_loss(
    backbone: BackboneParams,
    phi: HarmonizerParams,
    sample: TrainingSample,
    t: int,
    eps: torch.Tensor,
    text: TextCondition | None,
    schedule: NoiseSchedule,
) -> torch.Tensor:
    """Denoising loss for one training pair with harmonizer guidance.

    Noises the clean target to level t, encodes the composite through the
    guidance module (conditioned on the noisy latent), and scores the frozen
    backbone's noise prediction against the true noise.
    """
    if not backbone.frozen:
        raise FrozenViolationError("backbone must be frozen for harmonizer training")
    x0 = image_to_latent(sample.target)
    if eps.shape != x0.shape:
        raise ValueError(f"eps shape {tuple(eps.shape)} != target latent {tuple(x0.shape)}")
    x_t = q_sample(x0, t, eps, schedule)
    features = phi.encode(
        composite_to_tensors(sample.composite, x0.shape[2], x0.shape[3]), x_t, t
    )
    eps_hat = backbone.predict(x_t, t, text=text, injected=features)
    return F.mse_loss(eps_hat, eps)


# ---------------------------------------------------------------------------
# Data access for the loops


class _CorpusData:
    """In-memory corpus with on-the-fly composite construction."""

    def __init__(self, manifest: DatasetManifest, aug: AugmentationConfig, seed: int):
        manifest.validate()
        self.aug = aug
        self.seed = seed
        self.targets: list[torch.Tensor] = []
        self.captions: list[TextCondition] = []
        self.entries = []
        for i in range(manifest.count):
            image, matte, bbox, caption, meta = load_corpus_entry(manifest, i)
            self.targets.append(image_to_latent(image)[0])
            self.captions.append(encode_text(caption))
            self.entries.append((image, matte, bbox, caption, meta))

    @property
    def count(self) -> int:
        return len(self.targets)

    def conditions(self, indices: np.ndarray, step: int) -> torch.Tensor:
        conds = []
        for slot, i in enumerate(indices):
            rng = np_rng(self.seed, "aug", step, slot)
            image, matte, bbox, caption, meta = self.entries[int(i)]
            box = bbox.expanded(self.aug.box_margin, image.height, image.width)
            meta = dict(meta or {})
            meta["caption"] = caption
            sample = build_sample(image, box, self.aug, rng, matte=matte, metadata=meta)
            conds.append(composite_to_tensors(sample.composite, image.height, image.width)[0])
        return torch.stack(conds)


class _TrainingData:
    """Materialized (target, composite, mask) triples, fully preloaded."""

    def __init__(self, manifest: DatasetManifest):
        manifest.validate()
        self.targets: list[torch.Tensor] = []
        self.conds: list[torch.Tensor] = []
        self.captions: list[TextCondition] = []
        for sample in manifest.samples:
            target = load_image(manifest.path(sample["target"]))
            comp = load_image(manifest.path(sample["composite"]))
            mask = load_mask(manifest.path(sample["mask"]))
            self.targets.append(image_to_latent(target)[0])
            chw = np.transpose(comp.data, (2, 0, 1)) * 2.0 - 1.0
            cond = np.concatenate([chw, mask.data[None].astype(np.float32)], axis=0)
            self.conds.append(torch.from_numpy(cond.astype(np.float32)))
            self.captions.append(encode_text(sample.get("caption", "a photo")))

    @property
    def count(self) -> int:
        return len(self.targets)

    def conditions(self, indices: np.ndarray, step: int) -> torch.Tensor:
        return torch.stack([self.conds[int(i)] for i in indices])


def _load_train_data(
    manifest: DatasetManifest,
    config: TrainConfig,
    augmentation: AugmentationConfig | None = None,
):
    if manifest.kind == "training":
        return _TrainingData(manifest)
    if augmentation is None:
        aug_cfg = manifest.config.get("augmentation")
        augmentation = AugmentationConfig.from_dict(aug_cfg) if aug_cfg else AugmentationConfig()
    return _CorpusData(manifest, augmentation, derive_seed(config.seed, "augstream"))


def _moving_average(losses: list[float], window: int = 100) -> float:
    tail = losses[-window:]
    return float(sum(tail) / len(tail))


# ---------------------------------------------------------------------------
# Loops


def pretrain_backbone(
    corpus: DatasetManifest,
    schedule: NoiseSchedule,
    steps: int,
    config: TrainConfig | None = None,
    params: BackboneParams | None = None,
    spec: UNetSpec | None = None,
    checkpoint_path: str | None = None,
) -> tuple[BackboneParams, list[LossRecord]]:
    """Denoising pretraining on corpus targets with 10% text dropout.

    Returns unfrozen parameters and the per-step loss history. Passing
    existing (unfrozen) params continues training from them, which is also
    how the fine-tuned-backbone ablation baseline is produced.
    """
    if corpus.count == 0:
        raise ValueError("corpus is empty")
    config = config or TrainConfig(cfg_dropout=0.1)
    if config.threads:
        torch.set_num_threads(config.threads)
    if params is None:
        params = init_backbone(spec or UNetSpec(), config.seed)
    if params.frozen:
        raise ImmutableBackboneError("cannot pretrain a frozen backbone")
    if steps == 0:
        return params, []

    targets = []
    captions = []
    for i in range(corpus.count):
        image = load_image(corpus.path(corpus.samples[i]["target"]))
        targets.append(image_to_latent(image)[0])
        captions.append(encode_text(corpus.samples[i].get("caption", "a photo")))
    x0_all = torch.stack(targets)

    module = params.module
    module.train()
    opt = torch.optim.AdamW(
        params.trainable_parameters(),
        lr=config.lr,
        betas=config.betas,
        weight_decay=config.weight_decay,
    )
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=steps, eta_min=0.0)
    rng = np_rng(config.seed, "pretrain")
    gen = torch_rng(config.seed, "pretrain-noise")

    history: list[LossRecord] = []
    losses: list[float] = []
    last_ckpt: str | None = None
    for step in range(1, steps + 1):
        idx = rng.integers(0, x0_all.shape[0], size=config.batch_size)
        t = rng.integers(1, schedule.T + 1, size=config.batch_size)
        x0 = x0_all[idx]
        eps = torch.randn(x0.shape, generator=gen)
        x_t = q_sample(x0, torch.as_tensor(t), eps, schedule)
        texts = [cfg_dropout(captions[int(i)], config.cfg_dropout, rng) for i in idx]

        opt.zero_grad(set_to_none=True)
        eps_hat = module(x_t, torch.as_tensor(t, dtype=torch.float32), texts)
        loss = F.mse_loss(eps_hat, eps)
        if not torch.isfinite(loss):
            raise DivergenceError(f"pretraining diverged at step {step}", last_ckpt)
        loss.backward()
        torch.nn.utils.clip_grad_norm_(module.parameters(), config.grad_clip)
        opt.step()
        sched.step()

        losses.append(float(loss.detach()))
        history.append(
            LossRecord(step, losses[-1], _moving_average(losses), float(opt.param_groups[0]["lr"]))
        )
        params.step += 1
        if checkpoint_path and config.checkpoint_interval and step % config.checkpoint_interval == 0:
            save_backbone(checkpoint_path, params, schedule=schedule)
            last_ckpt = checkpoint_path
    module.eval()
    return params, history


def train_harmonizer(
    phi: HarmonizerParams,
    backbone: BackboneParams,
    manifest: DatasetManifest,
    schedule: NoiseSchedule,
    config: TrainConfig,
    checkpoint_path: str | None = None,
    augmentation: AugmentationConfig | None = None,
) -> tuple[HarmonizerParams, list[LossRecord]]:
    """Optimize the guidance module against a frozen backbone.

    Per step: draw a batch, a noise level per item, and noise; drop each text
    condition to null with the configured probability; minimize the mean
    denoising loss updating only the guidance parameters. ``augmentation``
    overrides the corpus augmentation config (e.g. all-zero probabilities for
    the no-augmentation ablation).
    """
    if not backbone.frozen:
        raise FrozenViolationError("backbone must be frozen before harmonizer training")
    if manifest.count == 0:
        raise ValueError("manifest is empty")
    if config.steps == 0:
        return phi, []
    if config.threads:
        torch.set_num_threads(config.threads)

    data = _load_train_data(manifest, config, augmentation)
    x0_all = torch.stack(data.targets)

    module = phi.module
    module.train()
    opt = torch.optim.AdamW(
        phi.trainable_parameters(),
        lr=config.lr,
        betas=config.betas,
        weight_decay=config.weight_decay,
    )
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=config.steps, eta_min=0.0)
    rng = np_rng(config.seed, "train")
    gen = torch_rng(config.seed, "train-noise")
    gates = InjectionGates.all_on(phi.k)

    history: list[LossRecord] = []
    losses: list[float] = []
    last_ckpt: str | None = None
    for step in range(1, config.steps + 1):
        idx = rng.integers(0, data.count, size=config.batch_size)
        t = rng.integers(1, schedule.T + 1, size=config.batch_size)
        x0 = x0_all[idx]
        eps = torch.randn(x0.shape, generator=gen)
        x_t = q_sample(x0, torch.as_tensor(t), eps, schedule)
        texts = [cfg_dropout(data.captions[int(i)], config.cfg_dropout, rng) for i in idx]
        cond = data.conditions(idx, step)
        if config.image_dropout > 0.0:
            drop = torch.from_numpy(
                (rng.uniform(size=config.batch_size) < config.image_dropout).astype(np.float32)
            )
            cond = cond * (1.0 - drop)[:, None, None, None]

        opt.zero_grad(set_to_none=True)
        t_vec = torch.as_tensor(t, dtype=torch.float32)
        features = phi.encode(cond, x_t, t_vec, gates)
        eps_hat = backbone.predict(x_t, t_vec, text=texts, injected=features)
        loss = F.mse_loss(eps_hat, eps)
        if not torch.isfinite(loss):
            raise DivergenceError(f"harmonizer training diverged at step {step}", last_ckpt)
        loss.backward()
        torch.nn.utils.clip_grad_norm_(module.parameters(), config.grad_clip)
        opt.step()
        sched.step()

        losses.append(float(loss.detach()))
        history.append(
            LossRecord(step, losses[-1], _moving_average(losses), float(opt.param_groups[0]["lr"]))
        )
        phi.step += 1
        if checkpoint_path and config.checkpoint_interval and step % config.checkpoint_interval == 0:
            save_harmonizer(checkpoint_path, phi)
            last_ckpt = checkpoint_path
    module.eval()
    return phi, history


# ---------------------------------------------------------------------------
# Finite-difference gradient verification


@dataclass
class GradientCheckReport:
    entries: list[dict]
    max_rel_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def finite_difference_report(
    loss_fn,
    named_params: dict[str, torch.Tensor],
    picks: list[tuple[str, int]],
    tolerance: float,
    step: float = 1e-3,
) -> GradientCheckReport:
    """Compare analytic gradients against central differences at ``picks``.

    ``loss_fn`` must be a pure function of the tensors in ``named_params``
    (float64 recommended). Relative error uses a 1e-8 floor so exactly-zero
    pairs agree trivially.
    """
    unique_names = sorted({name for name, _ in picks})
    loss = loss_fn()
    grads = torch.autograd.grad(
        loss, [named_params[name] for name in unique_names], allow_unused=True
    )
    grad_by_name = dict(zip(unique_names, grads))
    entries = []
    max_rel = 0.0
    with torch.no_grad():
        for name, flat_idx in picks:
            param = named_params[name]
            grad = grad_by_name[name]
            analytic = float(grad.reshape(-1)[flat_idx]) if grad is not None else 0.0
            flat = param.reshape(-1)
            orig = float(flat[flat_idx])
            flat[flat_idx] = orig + step
            loss_plus = float(loss_fn())
            flat[flat_idx] = orig - step
            loss_minus = float(loss_fn())
            flat[flat_idx] = orig
            numeric = (loss_plus - loss_minus) / (2.0 * step)
            denom = max(abs(analytic), abs(numeric), 1e-8)
            rel = abs(analytic - numeric) / denom
            if abs(analytic) < 1e-10 and abs(numeric) < 1e-10:
                rel = 0.0
            max_rel = max(max_rel, rel)
            entries.append(
                {"param": name, "index": flat_idx, "analytic": analytic,
                 "numeric": numeric, "rel_error": rel}
            )
    return GradientCheckReport(entries=entries, max_rel_error=max_rel, tolerance=tolerance)


def gradient_check(
    phi: HarmonizerParams,
    backbone: BackboneParams,
    sample: TrainingSample,
    schedule: NoiseSchedule,
    tolerance: float = 1e-2,
    num_params: int = 20,
    step: float = 1e-3,
    seed: int = 0,
) -> GradientCheckReport:
    """Verify harmonizer gradients on one sample via central differences.

    Runs in float64 on deep copies; samples parameters spanning the stem,
    the encoder copy, and the projections.
    """
    if not backbone.frozen:
        raise FrozenViolationError("gradient check expects a frozen backbone")
    phi64 = copy.deepcopy(phi.module).double()
    bb64 = copy.deepcopy(backbone.module).double()
    bb64.requires_grad_(False)

    x0 = image_to_latent(sample.target).double()
    h, w = x0.shape[2], x0.shape[3]
    cond = composite_to_tensors(sample.composite, h, w).double()
    gen = torch_rng(seed, "gradcheck")
    eps = torch.randn(x0.shape, generator=gen).double()
    t = max(1, schedule.T // 2)
    text = encode_text(sample.caption)
    gates = InjectionGates.all_on(phi.k)
    x_t = q_sample(x0, t, eps, schedule)

    def loss_fn():
        features = phi64(cond, x_t if phi.sees_latent else None, t, gates)
        eps_hat = bb64(x_t, t, text=text, injected=features)
        return F.mse_loss(eps_hat, eps)

    named = dict(phi64.named_parameters())
    groups = {
        "stem": [n for n in named if n.startswith("stem.")],
        "encoder": [
            n for n in named
            if n.startswith(("conv_in.", "time_mlp.", "enc_blocks.", "downs.", "enc_attns."))
        ],
        "projections": [n for n in named if n.startswith("projections.")],
    }
    rng = np_rng(seed, "gradcheck-picks")
    picks: list[tuple[str, int]] = []
    per_group = max(1, math.ceil(num_params / len(groups)))
    for names in groups.values():
        for _ in range(per_group):
            name = names[int(rng.integers(len(names)))]
            idx = int(rng.integers(named[name].numel()))
            picks.append((name, idx))
    return finite_difference_report(loss_fn, named, picks, tolerance, step=step)
