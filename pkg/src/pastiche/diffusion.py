"""Noise schedules, the forward process, guidance, and sampling loops.

Latents are float32 torch tensors shaped ``(N, C, H, W)`` living in [-1, 1];
conversion to and from [0, 1] rasters happens only at module boundaries.
The denoiser is any object with a ``predict(x_t, t, text, injected)`` method;
this module never imports the model code, so the math stays reusable and the
model stays swappable (tests use tiny stubs).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
import torch

from .imaging import RasterImage

__all__ = [
    "DiffusionError",
    "NoiseSchedule",
    "SamplerConfig",
    "linear_schedule",
    "q_sample",
    "cfg_combine",
    "reverse_step",
    "step_sequence",
    "sample",
    "sample_edit",
    "image_to_latent",
    "latent_to_image",
]

X0_CLAMP = 1.5


class DiffusionError(ValueError):
    """Parameter or shape violation in the diffusion math."""


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step noise levels: beta, alpha = 1 - beta, and their running product."""

    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    kind: str = "linear"
    beta_start: float = 1e-4
    beta_end: float = 0.02

    def __post_init__(self) -> None:
        if self.T < 2:
            raise DiffusionError(f"schedule needs T >= 2, got {self.T}")
        if self.beta.shape != (self.T,):
            raise DiffusionError("beta length must equal T")
        if (self.beta <= 0).any() or (self.beta >= 1).any():
            raise DiffusionError("beta values must lie in (0, 1)")
        if (np.diff(self.alpha_bar) >= 0).any():
            raise DiffusionError("alpha_bar must be strictly decreasing")

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "T": self.T,
            "beta_start": self.beta_start,
            "beta_end": self.beta_end,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "NoiseSchedule":
        if obj.get("kind", "linear") != "linear":
            raise DiffusionError(f"unknown schedule kind {obj.get('kind')!r}")
        return linear_schedule(int(obj["T"]), float(obj["beta_start"]), float(obj["beta_end"]))

    def alpha_bar_at(self, t: int) -> float:
        """alpha_bar for 1-indexed step t; t = 0 means the clean level (1.0)."""
        if t == 0:
            return 1.0
        self._check_t(t)
        return float(self.alpha_bar[t - 1])

    def _check_t(self, t: int) -> None:
        if not 1 <= t <= self.T:
            raise DiffusionError(f"step {t} outside [1, {self.T}]")


def linear_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """Linearly interpolated beta, endpoints inclusive."""
    if T < 2:
        raise DiffusionError(f"schedule needs T >= 2, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise DiffusionError(
            f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
        )
    beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    return NoiseSchedule(
        T=T, beta=beta, alpha=alpha, alpha_bar=alpha_bar,
        beta_start=beta_start, beta_end=beta_end,
    )


def _gather(values: np.ndarray, t, like: torch.Tensor) -> torch.Tensor:
    """Per-step coefficients broadcast against a latent batch."""
    if isinstance(t, int):
        return torch.tensor(float(values[t - 1]), dtype=like.dtype)
    t = torch.as_tensor(t, dtype=torch.long)
    if (t < 1).any() or (t > len(values)).any():
        raise DiffusionError(f"steps must lie in [1, {len(values)}]")
    coeff = torch.as_tensor(values, dtype=like.dtype)[t - 1]
    return coeff.reshape(-1, *([1] * (like.ndim - 1)))


def q_sample(x0: torch.Tensor, t, eps: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """Forward process: sqrt(a_bar_t) * x0 + sqrt(1 - a_bar_t) * eps.

    Computed in float64 (returned in x0's dtype) so the deterministic reverse
    step inverts it exactly up to one final rounding.
    """
    if eps.shape != x0.shape:
        raise DiffusionError(f"eps shape {tuple(eps.shape)} != x0 shape {tuple(x0.shape)}")
    if isinstance(t, int):
        schedule._check_t(t)
    x64 = x0.to(torch.float64)
    ab = _gather(schedule.alpha_bar, t, x64)
    out = torch.sqrt(ab) * x64 + torch.sqrt(1.0 - ab) * eps.to(torch.float64)
    return out.to(x0.dtype)


def cfg_combine(eps_cond: torch.Tensor, eps_uncond: torch.Tensor, w: float) -> torch.Tensor:
    """Classifier-free guidance: (1 + w) * conditional - w * unconditional."""
    if eps_cond.shape != eps_uncond.shape:
        raise DiffusionError("conditional/unconditional shapes differ")
    if w == 0.0:
        return eps_cond
    return (1.0 + w) * eps_cond - w * eps_uncond


@dataclass(frozen=True)
class SamplerConfig:
    """Inference-time knobs: step count, sampler family, and guidance weight."""

    steps: int = 36
    kind: str = "deterministic"  # "ancestral" | "deterministic"
    eta: float = 0.0
    w: float = 1.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.steps < 1:
            raise DiffusionError("steps must be >= 1")
        if self.kind not in ("ancestral", "deterministic"):
            raise DiffusionError(f"unknown sampler kind {self.kind!r}")
        if not 0.0 <= self.eta <= 1.0:
            raise DiffusionError("eta must lie in [0, 1]")
        if self.w < 0.0:
            raise DiffusionError("guidance weight must be >= 0")

    def to_dict(self) -> dict:
        return {"steps": self.steps, "kind": self.kind, "eta": self.eta,
                "w": self.w, "seed": self.seed}

    @classmethod
    def from_dict(cls, obj: dict) -> "SamplerConfig":
        return cls(**obj)


def reverse_step(
    x_t: torch.Tensor,
    eps_hat: torch.Tensor,
    t: int,
    schedule: NoiseSchedule,
    config: SamplerConfig,
    rng: torch.Generator | None = None,
    t_prev: int | None = None,
) -> torch.Tensor:
    """One denoising step from level t down to t_prev (defaults to t - 1).

    Ancestral: DDPM posterior mean plus sigma_t * z with sigma_t^2 = beta_t,
    and no noise at the final step. Deterministic: predict x0, clamp it, and
    re-project to the previous noise level, with stochasticity scaled by eta.
    """
    schedule._check_t(t)
    if eps_hat.shape != x_t.shape:
        raise DiffusionError("eps_hat shape does not match x_t")
    if t_prev is None:
        t_prev = t - 1
    if not 0 <= t_prev < t:
        raise DiffusionError(f"t_prev {t_prev} must lie in [0, {t})")

    # Step math runs in float64 so e.g. inverting the forward process from
    # t=1 recovers x0 to well below 1e-6; the result returns in x_t's dtype.
    dtype = x_t.dtype
    x = x_t.to(torch.float64)
    e = eps_hat.to(torch.float64)

    if config.kind == "ancestral":
        beta_t = float(schedule.beta[t - 1])
        alpha_t = float(schedule.alpha[t - 1])
        ab_t = float(schedule.alpha_bar[t - 1])
        mean = (x - (beta_t / math.sqrt(1.0 - ab_t)) * e) / math.sqrt(alpha_t)
        if t == 1:
            return mean.to(dtype)
        z = torch.randn(x_t.shape, generator=rng, dtype=dtype).to(torch.float64)
        return (mean + math.sqrt(beta_t) * z).to(dtype)

    ab_t = schedule.alpha_bar_at(t)
    ab_prev = schedule.alpha_bar_at(t_prev)
    x0_hat = (x - math.sqrt(1.0 - ab_t) * e) / math.sqrt(ab_t)
    x0_hat = x0_hat.clamp(-X0_CLAMP, X0_CLAMP)
    sigma = 0.0
    if config.eta > 0.0 and t_prev >= 1:
        sigma = (
            config.eta
            * math.sqrt((1.0 - ab_prev) / (1.0 - ab_t))
            * math.sqrt(1.0 - ab_t / ab_prev)
        )
    dir_coeff = math.sqrt(max(1.0 - ab_prev - sigma**2, 0.0))
    out = math.sqrt(ab_prev) * x0_hat + dir_coeff * e
    if sigma > 0.0:
        z = torch.randn(x_t.shape, generator=rng, dtype=dtype).to(torch.float64)
        out = out + sigma * z
    return out.to(dtype)


def step_sequence(T: int, steps: int) -> list[int]:
    """Uniformly strided descending subsequence of [1, T] with exactly ``steps`` entries."""
    if steps < 1:
        raise DiffusionError("steps must be >= 1")
    if steps > T:
        raise DiffusionError(f"steps {steps} exceeds schedule length {T}")
    if steps == 1:
        return [T]
    positions = np.linspace(T - 1, 0, steps)
    ts = [int(round(p)) + 1 for p in positions]
    if len(set(ts)) != steps:
        raise DiffusionError("step striding produced duplicate steps")
    return ts


def image_to_latent(image: RasterImage) -> torch.Tensor:
    """[0, 1] HWC raster to a [-1, 1] 1CHW latent."""
    arr = np.transpose(image.data, (2, 0, 1)).astype(np.float32)
    return torch.from_numpy(arr * 2.0 - 1.0).unsqueeze(0)


def latent_to_image(x: torch.Tensor) -> RasterImage:
    """[-1, 1] latent (1CHW or CHW) to a clamped [0, 1] raster."""
    if x.ndim == 4:
        if x.shape[0] != 1:
            raise DiffusionError("latent batch must have a single item to decode")
        x = x[0]
    arr = x.detach().to(torch.float32).clamp(-1.0, 1.0).numpy()
    arr = np.transpose((arr + 1.0) / 2.0, (1, 2, 0))
    return RasterImage(np.clip(arr, 0.0, 1.0))


def _predict_eps(backbone, x, t, text, features, w: float) -> torch.Tensor:
    eps_c = backbone.predict(x, t, text, features)
    if w == 0.0:
        return eps_c
    eps_u = backbone.predict(x, t, None, features)
    return cfg_combine(eps_c, eps_u, w)


def _check_finite(x: torch.Tensor, step_index: int, t: int) -> None:
    if not torch.isfinite(x).all():
        raise DiffusionError(f"non-finite latent at loop step {step_index} (t={t})")


def sample(
    backbone,
    schedule: NoiseSchedule,
    config: SamplerConfig,
    shape: tuple[int, ...],
    text=None,
    condition_fn=None,
    rng: torch.Generator | None = None,
    progress=None,
) -> RasterImage:
    """Full generation loop from pure noise; returns a decoded [0, 1] raster.

    ``condition_fn(x_t, t)`` supplies injected guidance features per step
    (e.g. from the harmonizer); with guidance weight w > 0 the denoiser runs
    with and without the text condition and the features apply to both calls.
    """
    x = torch.randn(shape, generator=rng, dtype=torch.float32)
    ts = step_sequence(schedule.T, config.steps)
    with torch.no_grad():
        for i, t in enumerate(ts):
            t_prev = ts[i + 1] if i + 1 < len(ts) else 0
            features = condition_fn(x, t) if condition_fn is not None else None
            eps_hat = _predict_eps(backbone, x, t, text, features, config.w)
            _check_finite(eps_hat, i, t)
            x = reverse_step(x, eps_hat, t, schedule, config, rng, t_prev=t_prev)
            _check_finite(x, i, t)
            if progress is not None:
                progress(i + 1, len(ts))
    return latent_to_image(x)


def sample_edit(
    backbone,
    schedule: NoiseSchedule,
    config: SamplerConfig,
    known_latent: torch.Tensor,
    mask: torch.Tensor,
    text=None,
    condition_fn=None,
    rng: torch.Generator | None = None,
    progress=None,
) -> RasterImage:
    """Editing loop: generate inside the mask, re-impose the known region each step.

    ``known_latent`` is the composite in latent space; ``mask`` is 1 where the
    model may generate and 0 where the scene must be kept. After every reverse
    step the kept region is replaced with the known content noised to the
    current level, so the output agrees with the scene outside the mask.
    """
    if known_latent.shape[-2:] != mask.shape[-2:]:
        raise DiffusionError("mask spatial size does not match the latent")
    m = mask.to(torch.float32)
    x = torch.randn(known_latent.shape, generator=rng, dtype=torch.float32)
    ts = step_sequence(schedule.T, config.steps)
    with torch.no_grad():
        for i, t in enumerate(ts):
            t_prev = ts[i + 1] if i + 1 < len(ts) else 0
            features = condition_fn(x, t) if condition_fn is not None else None
            eps_hat = _predict_eps(backbone, x, t, text, features, config.w)
            _check_finite(eps_hat, i, t)
            x = reverse_step(x, eps_hat, t, schedule, config, rng, t_prev=t_prev)
            eps_known = torch.randn(known_latent.shape, generator=rng, dtype=torch.float32)
            if t_prev >= 1:
                known_t = q_sample(known_latent, t_prev, eps_known, schedule)
            else:
                known_t = known_latent
            x = m * x + (1.0 - m) * known_t
            _check_finite(x, i, t)
            if progress is not None:
                progress(i + 1, len(ts))
    return latent_to_image(x)
