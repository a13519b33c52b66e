"""The denoising U-Net: architecture, text conditioning, and the freeze contract.

The network predicts the noise added to a latent given the timestep and an
optional text condition (hashed-token embeddings with cross-attention in the
bottleneck). Decoder stages accept externally injected feature maps on their
skip inputs, which is how the harmonizer steers a frozen backbone: injecting
zeros is exactly a no-op.

Freezing is a hard contract: once frozen, the parameter tensors never change
and any attempt to obtain trainable parameters raises. A content checksum
makes violations detectable.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, asdict, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .checkpoint import load_archive, save_archive
from .seeding import derive_seed

__all__ = [
    "BackboneError",
    "ImmutableBackboneError",
    "UNetSpec",
    "TextCondition",
    "encode_text",
    "DenoiserUNet",
    "BackboneParams",
    "init_backbone",
    "freeze",
    "pretrain_backbone",
    "save_backbone",
    "load_backbone",
    "state_checksum",
]


class BackboneError(ValueError):
    """Architecture or shape violation in the denoiser."""


class ImmutableBackboneError(RuntimeError):
    """A parameter update was requested on a frozen backbone."""


MAX_PROMPT_CHARS = 256


@dataclass(frozen=True)
class UNetSpec:
    """Architecture description for the denoising U-Net.

    ``num_connections`` is the number of decoder skip inputs, which is also
    the number of injectable guidance features: levels * (blocks_per_level + 1).
    """

    in_channels: int = 3
    base_width: int = 16
    channel_mults: tuple[int, ...] = (1, 2, 2)
    blocks_per_level: int = 2
    attn_levels: tuple[int, ...] = ()
    time_dim: int = 64
    text_dim: int = 32
    vocab_size: int = 4096
    max_tokens: int = 16

    def __post_init__(self) -> None:
        if len(self.channel_mults) < 2:
            raise BackboneError("need at least 2 levels")
        if any(m < 1 for m in self.channel_mults):
            raise BackboneError("channel multipliers must be >= 1")
        if self.base_width * min(self.channel_mults) < 8:
            raise BackboneError("all widths must be >= 8")
        if self.blocks_per_level < 1:
            raise BackboneError("blocks_per_level must be >= 1")
        if any(not 0 <= a < len(self.channel_mults) for a in self.attn_levels):
            raise BackboneError(f"attn level outside [0, {len(self.channel_mults)})")
        if self.time_dim < 8 or self.text_dim < 8:
            raise BackboneError("embedding dimensions must be >= 8")

    @property
    def levels(self) -> int:
        return len(self.channel_mults)

    @property
    def widths(self) -> tuple[int, ...]:
        return tuple(self.base_width * m for m in self.channel_mults)

    @property
    def num_connections(self) -> int:
        return self.levels * (self.blocks_per_level + 1)

    @property
    def min_spatial(self) -> int:
        return 2 ** (self.levels - 1)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channel_mults"] = list(self.channel_mults)
        d["attn_levels"] = list(self.attn_levels)
        return d

    @classmethod
    def from_dict(cls, obj: dict) -> "UNetSpec":
        obj = dict(obj)
        obj["channel_mults"] = tuple(obj["channel_mults"])
        obj["attn_levels"] = tuple(obj.get("attn_levels", ()))
        return cls(**obj)


@dataclass(frozen=True)
class TextCondition:
    """Hashed token ids for a prompt. ``null`` marks the unconditional branch.

    The ids index a learned embedding table inside the model; the null branch
    uses a separate learned constant sequence, trained via text dropout.
    """

    token_ids: tuple[int, ...]
    filled: int
    null: bool

    @classmethod
    def null_condition(cls, max_tokens: int = 16) -> "TextCondition":
        return cls(token_ids=(0,) * max_tokens, filled=0, null=True)


def _hash_token(token: str, vocab_size: int) -> int:
    digest = hashlib.sha256(token.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") % vocab_size


def encode_text(prompt: str | None, max_tokens: int = 16, vocab_size: int = 4096) -> TextCondition:
    """Lowercase whitespace tokenization hashed into a fixed vocabulary.

    Deterministic across processes. An empty prompt yields the null condition.
    """
    if prompt is None:
        return TextCondition.null_condition(max_tokens)
    if len(prompt) > MAX_PROMPT_CHARS:
        raise BackboneError(f"prompt exceeds {MAX_PROMPT_CHARS} characters")
    tokens = prompt.lower().split()
    if not tokens:
        return TextCondition.null_condition(max_tokens)
    ids = [_hash_token(tok, vocab_size) for tok in tokens[:max_tokens]]
    filled = len(ids)
    ids = ids + [0] * (max_tokens - filled)
    return TextCondition(token_ids=tuple(ids), filled=filled, null=False)


# ---------------------------------------------------------------------------
# Network blocks


def _num_groups(channels: int) -> int:
    g = 8
    while channels % g:
        g //= 2
    return max(g, 1)


def _timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=torch.float32) / max(half - 1, 1)
    ).to(t.dtype)
    args = t[:, None].to(freqs.dtype) * freqs[None, :]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class ResidualBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, time_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(_num_groups(c_in), c_in)
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.time_proj = nn.Linear(time_dim, c_out)
        self.norm2 = nn.GroupNorm(_num_groups(c_out), c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        nn.init.zeros_(self.conv2.weight)
        nn.init.zeros_(self.conv2.bias)
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x: torch.Tensor, temb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.time_proj(temb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class SelfAttention2d(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.norm = nn.GroupNorm(_num_groups(channels), channels)
        self.qkv = nn.Conv2d(channels, channels * 3, 1)
        self.proj = nn.Conv2d(channels, channels, 1)
        nn.init.zeros_(self.proj.weight)
        nn.init.zeros_(self.proj.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        n, c, h, w = x.shape
        q, k, v = self.qkv(self.norm(x)).reshape(n, 3, c, h * w).unbind(1)
        attn = torch.softmax(q.transpose(1, 2) @ k / math.sqrt(c), dim=-1)
        out = (attn @ v.transpose(1, 2)).transpose(1, 2).reshape(n, c, h, w)
        return x + self.proj(out)


class CrossAttention(nn.Module):
    """Single-head attention from spatial features to the token sequence."""

    def __init__(self, channels: int, text_dim: int):
        super().__init__()
        self.norm = nn.GroupNorm(_num_groups(channels), channels)
        self.to_q = nn.Conv2d(channels, channels, 1)
        self.to_k = nn.Linear(text_dim, channels)
        self.to_v = nn.Linear(text_dim, channels)
        self.proj = nn.Conv2d(channels, channels, 1)
        nn.init.zeros_(self.proj.weight)
        nn.init.zeros_(self.proj.bias)

    def forward(self, x: torch.Tensor, text: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        n, c, h, w = x.shape
        q = self.to_q(self.norm(x)).reshape(n, c, h * w).transpose(1, 2)  # (N, HW, C)
        k = self.to_k(text)  # (N, L, C)
        v = self.to_v(text)
        scores = q @ k.transpose(1, 2) / math.sqrt(c)  # (N, HW, L)
        scores = scores + (1.0 - mask)[:, None, :] * -1e9
        out = torch.softmax(scores, dim=-1) @ v  # (N, HW, C)
        out = out.transpose(1, 2).reshape(n, c, h, w)
        return x + self.proj(out)


class Downsample(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, stride=2, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.conv(x)


class Upsample(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.conv(F.interpolate(x, scale_factor=2.0, mode="nearest"))


def build_encoder_stack(spec: UNetSpec) -> tuple[nn.ModuleList, nn.ModuleList, nn.ModuleList, list[int]]:
    """Encoder blocks, downsamplers, per-level self-attention, and skip widths.

    Shared with the harmonizer so its encoder copy mirrors the backbone
    tensor for tensor.
    """
    widths = spec.widths
    blocks = nn.ModuleList()
    downs = nn.ModuleList()
    attns = nn.ModuleList()
    ch = widths[0]
    skip_widths = [ch]
    for i, w in enumerate(widths):
        for _ in range(spec.blocks_per_level):
            blocks.append(ResidualBlock(ch, w, spec.time_dim))
            ch = w
            skip_widths.append(ch)
        attns.append(SelfAttention2d(ch) if i in spec.attn_levels else nn.Identity())
        if i < spec.levels - 1:
            downs.append(Downsample(ch))
            skip_widths.append(ch)
    return blocks, downs, attns, skip_widths


def run_encoder_stack(
    spec: UNetSpec,
    blocks: nn.ModuleList,
    downs: nn.ModuleList,
    attns: nn.ModuleList,
    h: torch.Tensor,
    temb: torch.Tensor,
) -> tuple[list[torch.Tensor], torch.Tensor]:
    """Run the encoder, returning every skip tensor (length num_connections)."""
    hs = [h]
    bi = 0
    for i in range(spec.levels):
        for _ in range(spec.blocks_per_level):
            h = blocks[bi](h, temb)
            bi += 1
            if not isinstance(attns[i], nn.Identity):
                h = attns[i](h)
            hs.append(h)
        if i < spec.levels - 1:
            h = downs[i](h)
            hs.append(h)
    return hs, h


class DenoiserUNet(nn.Module):
    """Noise predictor with timestep embedding and bottleneck text attention."""

    def __init__(self, spec: UNetSpec):
        super().__init__()
        self.spec = spec
        widths = spec.widths
        self.time_mlp = nn.Sequential(
            nn.Linear(spec.time_dim, spec.time_dim),
            nn.SiLU(),
            nn.Linear(spec.time_dim, spec.time_dim),
        )
        self.token_emb = nn.Embedding(spec.vocab_size, spec.text_dim)
        nn.init.normal_(self.token_emb.weight, std=0.02)
        self.null_tokens = nn.Parameter(torch.randn(spec.max_tokens, spec.text_dim) * 0.02)
        self.conv_in = nn.Conv2d(spec.in_channels, widths[0], 3, padding=1)

        self.enc_blocks, self.downs, self.enc_attns, skip_widths = build_encoder_stack(spec)

        ch = widths[-1]
        self.mid_block1 = ResidualBlock(ch, ch, spec.time_dim)
        self.mid_attn = CrossAttention(ch, spec.text_dim)
        self.mid_block2 = ResidualBlock(ch, ch, spec.time_dim)

        self.dec_blocks = nn.ModuleList()
        self.dec_attns = nn.ModuleList()
        self.ups = nn.ModuleList()
        for i in reversed(range(spec.levels)):
            w = widths[i]
            for _ in range(spec.blocks_per_level + 1):
                self.dec_blocks.append(ResidualBlock(ch + skip_widths.pop(), w, spec.time_dim))
                ch = w
            self.dec_attns.append(SelfAttention2d(ch) if i in spec.attn_levels else nn.Identity())
            if i > 0:
                self.ups.append(Upsample(ch))
        assert not skip_widths

        self.out_norm = nn.GroupNorm(_num_groups(ch), ch)
        self.out_conv = nn.Conv2d(ch, spec.in_channels, 3, padding=1)
        nn.init.zeros_(self.out_conv.weight)
        nn.init.zeros_(self.out_conv.bias)

    # -- conditioning helpers -------------------------------------------------

    def _text_tensors(self, text, batch: int) -> tuple[torch.Tensor, torch.Tensor]:
        """Embed a TextCondition (or a per-item list) into (emb, validity mask)."""
        spec = self.spec
        if text is None or isinstance(text, TextCondition):
            text = [text] * batch
        if len(text) != batch:
            raise BackboneError(f"got {len(text)} text conditions for batch of {batch}")
        embs = []
        masks = []
        for cond in text:
            if cond is None or cond.null or cond.filled == 0:
                embs.append(self.null_tokens)
                masks.append(torch.ones(spec.max_tokens))
            else:
                # Fold hashed ids into this model's table size; consistent for
                # power-of-two vocabularies.
                raw = list(cond.token_ids)[: spec.max_tokens]
                raw += [0] * (spec.max_tokens - len(raw))
                ids = torch.tensor(raw, dtype=torch.long) % spec.vocab_size
                embs.append(self.token_emb(ids))
                m = torch.zeros(spec.max_tokens)
                m[: min(cond.filled, spec.max_tokens)] = 1.0
                masks.append(m)
        emb = torch.stack(embs).to(self.conv_in.weight.dtype)
        mask = torch.stack(masks).to(emb.dtype)
        return emb, mask

    def _needs_encoder_grad(self, x: torch.Tensor) -> bool:
        if not torch.is_grad_enabled():
            return False
        if x.requires_grad:
            return True
        return any(p.requires_grad for p in self.parameters())

    # -- forward --------------------------------------------------------------

    def forward(self, x: torch.Tensor, t, text=None, injected=None) -> torch.Tensor:
        spec = self.spec
        if x.ndim != 4 or x.shape[1] != spec.in_channels:
            raise BackboneError(f"latent must be (N, {spec.in_channels}, H, W), got {tuple(x.shape)}")
        if x.shape[2] % spec.min_spatial or x.shape[3] % spec.min_spatial:
            raise BackboneError(
                f"spatial size {tuple(x.shape[2:])} not divisible by {spec.min_spatial}"
            )
        n = x.shape[0]
        if isinstance(t, int):
            t_vec = torch.full((n,), float(t), dtype=x.dtype)
        else:
            t_vec = torch.as_tensor(t, dtype=x.dtype).reshape(-1)
            if t_vec.shape[0] != n:
                raise BackboneError("timestep batch does not match latent batch")

        features = getattr(injected, "features", injected)
        if features is not None and len(features) != spec.num_connections:
            raise BackboneError(
                f"expected {spec.num_connections} injected features, got {len(features)}"
            )

        # The encoder and bottleneck cannot depend on the injected features,
        # so when neither the input nor any parameter needs gradients (the
        # frozen-backbone training case) they run without autograd tracking.
        if self._needs_encoder_grad(x):
            hs, h, temb = self._encode(x, t_vec, text)
        else:
            with torch.no_grad():
                hs, h, temb = self._encode(x, t_vec, text)

        bi = 0
        ai = 0
        for i in reversed(range(spec.levels)):
            for _ in range(spec.blocks_per_level + 1):
                skip = hs.pop()
                if features is not None:
                    feat = features[len(hs)]
                    if feat.shape != skip.shape:
                        raise BackboneError(
                            f"injected feature {len(hs)}: shape {tuple(feat.shape)} "
                            f"!= skip {tuple(skip.shape)} (decoder block {bi})"
                        )
                    skip = skip + feat
                h = self.dec_blocks[bi](torch.cat([h, skip], dim=1), temb)
                bi += 1
            if not isinstance(self.dec_attns[ai], nn.Identity):
                h = self.dec_attns[ai](h)
            ai += 1
            if i > 0:
                h = self.ups[len(self.ups) - i](h)
        return self.out_conv(F.silu(self.out_norm(h)))

    def _encode(self, x, t_vec, text):
        temb = self.time_mlp(_timestep_embedding(t_vec, self.spec.time_dim))
        text_emb, text_mask = self._text_tensors(text, x.shape[0])
        h = self.conv_in(x)
        hs, h = run_encoder_stack(self.spec, self.enc_blocks, self.downs, self.enc_attns, h, temb)
        h = self.mid_block1(h, temb)
        h = self.mid_attn(h, text_emb, text_mask)
        h = self.mid_block2(h, temb)
        return hs, h, temb


# ---------------------------------------------------------------------------
# Parameter container and freeze contract


def state_checksum(module: nn.Module) -> str:
    """SHA-256 over all parameter/buffer tensors, keyed and ordered by name."""
    digest = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        digest.update(name.encode())
        digest.update(tensor.detach().cpu().numpy().astype("<f4").tobytes())
    return digest.hexdigest()


@dataclass
class BackboneParams:
    """The denoiser plus its freeze state and integrity checksum."""

    module: DenoiserUNet
    spec: UNetSpec
    frozen: bool = False
    step: int = 0
    frozen_checksum: str | None = None

    def checksum(self) -> str:
        return state_checksum(self.module)

    def predict(self, x: torch.Tensor, t, text=None, injected=None) -> torch.Tensor:
        return self.module(x, t, text=text, injected=injected)

    def trainable_parameters(self):
        if self.frozen:
            raise ImmutableBackboneError(
                "backbone is frozen; its parameters cannot be updated"
            )
        return list(self.module.parameters())

    def encoder_state(self) -> dict[str, torch.Tensor]:
        """Tensors of the encoder path (what the harmonizer copies)."""
        prefixes = ("conv_in.", "time_mlp.", "enc_blocks.", "downs.", "enc_attns.")
        return {
            name: tensor
            for name, tensor in self.module.state_dict().items()
            if name.startswith(prefixes)
        }


def init_backbone(spec: UNetSpec, seed: int) -> BackboneParams:
    """Deterministic initialization given (spec, seed)."""
    torch.manual_seed(derive_seed(seed, "backbone-init"))
    module = DenoiserUNet(spec)
    return BackboneParams(module=module, spec=spec)


def freeze(params: BackboneParams) -> BackboneParams:
    """Make the backbone immutable; records the checksum. Idempotent."""
    if params.frozen:
        return params
    params.module.requires_grad_(False)
    params.frozen = True
    params.frozen_checksum = params.checksum()
    return params


def pretrain_backbone(corpus, schedule, steps, config=None, params=None):
    """Denoising pretraining on corpus targets; see ``training.pretrain_backbone``."""
    from .training import pretrain_backbone as impl

    return impl(corpus, schedule, steps, config=config, params=params)


def save_backbone(path: str, params: BackboneParams, schedule=None) -> None:
    meta = {
        "kind": "backbone",
        "spec": params.spec.to_dict(),
        "frozen": params.frozen,
        "checksum": params.checksum(),
        "step": params.step,
    }
    if schedule is not None:
        meta["schedule"] = schedule.to_dict()
    tensors = {k: v.detach().cpu().numpy() for k, v in params.module.state_dict().items()}
    save_archive(path, meta, tensors)


def load_backbone(path: str) -> tuple[BackboneParams, dict]:
    meta, tensors = load_archive(path)
    if meta.get("kind") != "backbone":
        raise BackboneError(f"{path} is not a backbone checkpoint")
    spec = UNetSpec.from_dict(meta["spec"])
    module = DenoiserUNet(spec)
    module.load_state_dict({k: torch.from_numpy(v) for k, v in tensors.items()})
    params = BackboneParams(module=module, spec=spec, step=int(meta.get("step", 0)))
    actual = params.checksum()
    if meta.get("checksum") and meta["checksum"] != actual:
        raise BackboneError(f"checksum mismatch loading {path}")
    if meta.get("frozen"):
        freeze(params)
    return params, meta
