"""The inpainting-and-harmonizing guidance module.

A copy of the backbone's encoder reads the pasted composite (image + mask
channels, optionally fused with the current noisy latent) and produces one
feature map per backbone decoder stage. Every output passes through a
zero-initialized 1x1 projection, so a freshly initialized module injects
exact zeros and leaves the backbone's behavior untouched; training moves the
projections away from zero and the module starts steering the denoiser.

Per-connection gates reproduce the layer-disconnect study: gated-off
connections yield zero feature maps regardless of the trained weights.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import cv2
import numpy as np
import torch
import torch.nn as nn

from .backbone import (
    BackboneError,
    BackboneParams,
    DenoiserUNet,
    UNetSpec,
    _timestep_embedding,
    build_encoder_stack,
    run_encoder_stack,
    state_checksum,
)
from .checkpoint import load_archive, save_archive
from .diffusion import image_to_latent
from .imaging import Composite
from .seeding import derive_seed

__all__ = [
    "HarmonizerError",
    "InjectionGates",
    "ConditionFeatures",
    "HarmonizerNet",
    "HarmonizerParams",
    "init_from_backbone",
    "encode_condition",
    "set_disconnect",
    "composite_to_tensors",
    "save_harmonizer",
    "load_harmonizer",
]


class HarmonizerError(ValueError):
    """Contract violation in the guidance module."""


@dataclass(frozen=True)
class InjectionGates:
    """Boolean switch per feature connection, in encoder order."""

    flags: tuple[bool, ...]

    @classmethod
    def all_on(cls, k: int) -> "InjectionGates":
        return cls(flags=(True,) * k)

    @property
    def k(self) -> int:
        return len(self.flags)

    @property
    def on_count(self) -> int:
        return sum(self.flags)


def set_disconnect(gates: InjectionGates, keep_first: int) -> InjectionGates:
    """Keep the first ``keep_first`` connections on, disconnect the rest."""
    if not 0 <= keep_first <= gates.k:
        raise HarmonizerError(f"keep_first must lie in [0, {gates.k}], got {keep_first}")
    return InjectionGates(flags=tuple(i < keep_first for i in range(gates.k)))


@dataclass
class ConditionFeatures:
    """Ordered guidance features, one per backbone decoder skip input."""

    features: list[torch.Tensor]

    def __len__(self) -> int:
        return len(self.features)


class HarmonizerNet(nn.Module):
    """Condition stem + encoder copy + one zero projection per connection."""

    def __init__(self, spec: UNetSpec):
        super().__init__()
        self.spec = spec
        width = spec.widths[0]
        # Stem: composite RGB + mask channel, mapped to the encoder width.
        self.stem = nn.Sequential(
            nn.Conv2d(spec.in_channels + 1, width, 3, padding=1),
            nn.SiLU(),
            nn.Conv2d(width, width, 3, padding=1),
        )
        self.conv_in = nn.Conv2d(spec.in_channels, width, 3, padding=1)
        self.time_mlp = nn.Sequential(
            nn.Linear(spec.time_dim, spec.time_dim),
            nn.SiLU(),
            nn.Linear(spec.time_dim, spec.time_dim),
        )
        self.enc_blocks, self.downs, self.enc_attns, skip_widths = build_encoder_stack(spec)
        self.projections = nn.ModuleList(
            [nn.Conv2d(w, w, 1) for w in skip_widths]
        )
        for proj in self.projections:
            nn.init.zeros_(proj.weight)
            nn.init.zeros_(proj.bias)

    def forward(
        self,
        cond: torch.Tensor,
        x_t: torch.Tensor | None,
        t,
        gates: InjectionGates,
    ) -> list[torch.Tensor]:
        spec = self.spec
        if cond.ndim != 4 or cond.shape[1] != spec.in_channels + 1:
            raise HarmonizerError(
                f"condition must be (N, {spec.in_channels + 1}, H, W), got {tuple(cond.shape)}"
            )
        n = cond.shape[0]
        if isinstance(t, int):
            t_vec = torch.full((n,), float(t), dtype=cond.dtype)
        else:
            t_vec = torch.as_tensor(t, dtype=cond.dtype).reshape(-1)
        temb = self.time_mlp(_timestep_embedding(t_vec, spec.time_dim))
        h = self.stem(cond)
        if x_t is not None:
            if x_t.shape[-2:] != cond.shape[-2:] or x_t.shape[0] != n:
                raise HarmonizerError("noisy latent does not match the condition batch")
            h = h + self.conv_in(x_t)
        hs, _ = run_encoder_stack(spec, self.enc_blocks, self.downs, self.enc_attns, h, temb)
        out = []
        for i, skip in enumerate(hs):
            if gates.flags[i]:
                out.append(self.projections[i](skip))
            else:
                out.append(torch.zeros_like(skip))
        return out


@dataclass
class HarmonizerParams:
    """Trainable guidance parameters bound to a specific backbone."""

    module: HarmonizerNet
    spec: UNetSpec
    trained_against: str
    step: int = 0
    sees_latent: bool = True

    @property
    def k(self) -> int:
        return self.spec.num_connections

    def checksum(self) -> str:
        return state_checksum(self.module)

    def trainable_parameters(self):
        return list(self.module.parameters())

    def encode(self, cond: torch.Tensor, x_t: torch.Tensor, t, gates: InjectionGates | None = None) -> ConditionFeatures:
        if gates is None:
            gates = InjectionGates.all_on(self.k)
        if gates.k != self.k:
            raise HarmonizerError(f"gates length {gates.k} != connection count {self.k}")
        features = self.module(cond, x_t if self.sees_latent else None, t, gates)
        return ConditionFeatures(features=features)

    def projection_norms(self) -> list[float]:
        """Max |weight| per projection; all exactly 0 at initialization."""
        norms = []
        for proj in self.module.projections:
            norms.append(
                max(
                    float(proj.weight.detach().abs().max()),
                    float(proj.bias.detach().abs().max()),
                )
            )
        return norms


def init_from_backbone(backbone: BackboneParams, seed: int) -> HarmonizerParams:
    """Build the guidance module: encoder copied bit-exactly, projections zero."""
    torch.manual_seed(derive_seed(seed, "harmonizer-init"))
    module = HarmonizerNet(backbone.spec)
    encoder = backbone.encoder_state()
    own = module.state_dict()
    for name, tensor in encoder.items():
        if name not in own:
            raise HarmonizerError(f"backbone encoder tensor {name!r} has no counterpart")
        own[name] = tensor.detach().clone()
    module.load_state_dict(own)
    for proj in module.projections:
        nn.init.zeros_(proj.weight)
        nn.init.zeros_(proj.bias)
    return HarmonizerParams(
        module=module,
        spec=backbone.spec,
        trained_against=backbone.checksum(),
    )


def composite_to_tensors(composite: Composite, height: int, width: int) -> torch.Tensor:
    """Stack the composite image ([-1, 1]) and mask into a 4-channel condition."""
    img = composite.image.data
    mask = composite.mask.data.astype(np.float32)
    if img.shape[:2] != (height, width):
        img = np.clip(cv2.resize(img, (width, height), interpolation=cv2.INTER_LINEAR), 0.0, 1.0)
        mask = cv2.resize(mask, (width, height), interpolation=cv2.INTER_NEAREST)
    chw = np.transpose(img, (2, 0, 1)) * 2.0 - 1.0
    cond = np.concatenate([chw, mask[None, :, :]], axis=0).astype(np.float32)
    return torch.from_numpy(cond).unsqueeze(0)


def encode_condition(
    phi: HarmonizerParams,
    composite: Composite,
    x_t: torch.Tensor,
    t,
    gates: InjectionGates | None = None,
) -> ConditionFeatures:
    """Guidance features for one composite at the latent's working resolution."""
    if x_t.ndim != 4:
        raise HarmonizerError("x_t must be a (N, C, H, W) latent")
    cond = composite_to_tensors(composite, x_t.shape[2], x_t.shape[3])
    if x_t.shape[0] != 1:
        cond = cond.expand(x_t.shape[0], -1, -1, -1)
    return phi.encode(cond, x_t, t, gates)


def save_harmonizer(path: str, phi: HarmonizerParams) -> None:
    meta = {
        "kind": "harmonizer",
        "spec": phi.spec.to_dict(),
        "trained_against": phi.trained_against,
        "step": phi.step,
        "sees_latent": phi.sees_latent,
        "checksum": phi.checksum(),
    }
    tensors = {k: v.detach().cpu().numpy() for k, v in phi.module.state_dict().items()}
    save_archive(path, meta, tensors)


def load_harmonizer(path: str, backbone: BackboneParams) -> HarmonizerParams:
    meta, tensors = load_archive(path)
    if meta.get("kind") != "harmonizer":
        raise HarmonizerError(f"{path} is not a harmonizer checkpoint")
    spec = UNetSpec.from_dict(meta["spec"])
    if spec != backbone.spec:
        raise HarmonizerError("harmonizer spec does not match the backbone spec")
    expected = meta.get("trained_against")
    if expected and expected != backbone.checksum():
        raise HarmonizerError(
            "harmonizer was trained against a different backbone "
            f"(expected checksum {expected[:12]}...)"
        )
    module = HarmonizerNet(spec)
    module.load_state_dict({k: torch.from_numpy(v) for k, v in tensors.items()})
    phi = HarmonizerParams(
        module=module,
        spec=spec,
        trained_against=expected or backbone.checksum(),
        step=int(meta.get("step", 0)),
        sees_latent=bool(meta.get("sees_latent", True)),
    )
    if meta.get("checksum") and meta["checksum"] != phi.checksum():
        raise HarmonizerError(f"checksum mismatch loading {path}")
    return phi
