"""Frozen hierarchical encoder, tunable mask decoder, and encoder weight loading."""

from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence, Union

import torch
import torch.nn as nn
import torch.nn.functional as F

from .adapter import Prompt, inject_prompt
from .checkpoint import FORMAT_VERSION, CheckpointError, PathLike, load_container, save_container


@dataclass
class EncoderConfig:
    num_stages: int = 4
    blocks_per_stage: list[int] = field(default_factory=lambda: [2, 2, 2, 2])
    stage_widths: list[int] = field(default_factory=lambda: [16, 32, 64, 128])
    patch_size: int = 4
    downsample_factor_between_stages: int = 2
    input_resolution: int = 64
    num_heads: int = 4
    in_channels: int = 3
    mlp_ratio: int = 4

    def __post_init__(self):
        self.blocks_per_stage = list(self.blocks_per_stage)
        self.stage_widths = list(self.stage_widths)
        self.validate()

    def validate(self) -> None:
        if len(self.blocks_per_stage) != self.num_stages or len(self.stage_widths) != self.num_stages:
            raise ValueError("blocks_per_stage and stage_widths need one entry per stage")
        if self.downsample_factor_between_stages != 2:
            raise ValueError("only 2x2 patch merging between stages is supported")
        step = self.patch_size * self.downsample_factor_between_stages ** (self.num_stages - 1)
        if self.input_resolution % step:
            raise ValueError(f"input_resolution {self.input_resolution} not divisible by {step}")
        if self.patch_size & (self.patch_size - 1):
            raise ValueError("patch_size must be a power of two (decoder upsamples by 2x steps)")
        for w in self.stage_widths:
            if w % self.num_heads:
                raise ValueError(f"stage width {w} not divisible by num_heads {self.num_heads}")

    def grid(self, stage: int) -> int:
        """Token-grid side length of ``stage``."""
        return self.input_resolution // self.patch_size // self.downsample_factor_between_stages ** stage

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        return cls(**d)


def toy_encoder_config() -> EncoderConfig:
    return EncoderConfig()


def full_encoder_config() -> EncoderConfig:
    return EncoderConfig(blocks_per_stage=[2, 2, 6, 2], stage_widths=[96, 192, 384, 768],
                         patch_size=16, input_resolution=1024, num_heads=4)


class Attention(nn.Module):
    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        self.num_heads = num_heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, n, d = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.num_heads, d // self.num_heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = (q @ k.transpose(-2, -1)) * (d // self.num_heads) ** -0.5
        out = attn.softmax(dim=-1) @ v
        return self.proj(out.transpose(1, 2).reshape(b, n, d))


class Block(nn.Module):
    """Pre-norm transformer block."""

    def __init__(self, dim: int, num_heads: int, mlp_ratio: int = 4):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, mlp_ratio * dim), nn.GELU(), nn.Linear(mlp_ratio * dim, dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class PatchMerging(nn.Module):
    """Concatenate each 2x2 token neighbourhood and project linearly to the next width."""

    def __init__(self, dim_in: int, dim_out: int):
        super().__init__()
        self.norm = nn.LayerNorm(4 * dim_in)
        self.reduction = nn.Linear(4 * dim_in, dim_out)

    def forward(self, x: torch.Tensor, grid: int) -> torch.Tensor:
        b, _, c = x.shape
        x = x.reshape(b, grid // 2, 2, grid // 2, 2, c).permute(0, 1, 3, 2, 4, 5)
        x = x.reshape(b, (grid // 2) ** 2, 4 * c)
        return self.reduction(self.norm(x))


class HierarchicalEncoder(nn.Module):
    """Multi-stage ViT-style encoder; frozen once built or loaded."""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        c = config
        self.patch_embed = nn.Conv2d(c.in_channels, c.stage_widths[0], c.patch_size, c.patch_size)
        self.stages = nn.ModuleList(
            nn.ModuleList(Block(w, c.num_heads, c.mlp_ratio) for _ in range(nb))
            for w, nb in zip(c.stage_widths, c.blocks_per_stage))
        self.merges = nn.ModuleList(
            PatchMerging(c.stage_widths[i], c.stage_widths[i + 1]) for i in range(c.num_stages - 1))
        self.freeze()

    def freeze(self) -> "HierarchicalEncoder":
        for p in self.parameters():
            p.requires_grad_(False)
        return self.eval()

    def train(self, mode: bool = True) -> "HierarchicalEncoder":
        # always inference mode; no layer here depends on it, but keep it explicit
        return super().train(False)

    @property
    def patch_projection(self) -> tuple[torch.Tensor, torch.Tensor]:
        """Patch-embedding weight [D, C*p*p] and bias, for reuse by guidance extraction."""
        w = self.patch_embed.weight
        return w.reshape(w.shape[0], -1), self.patch_embed.bias

    def forward(self, images: torch.Tensor,
                prompts: Optional[Sequence[Union[Prompt, torch.Tensor]]] = None) -> list[torch.Tensor]:
        return encode(self, images, prompts)


def encode(encoder: HierarchicalEncoder, images: torch.Tensor,
           prompts: Optional[Sequence[Union[Prompt, torch.Tensor]]] = None) -> list[torch.Tensor]:
    """Run the encoder; returns per-stage features [B, tokens_s, width_s].

    When ``prompts`` is given (one per stage) each prompt is added at the input
    of every block of its stage.
    """
    c = encoder.config
    squeeze = images.dim() == 3
    if squeeze:
        images = images.unsqueeze(0)
    if images.shape[-2:] != (c.input_resolution, c.input_resolution) or images.shape[1] != c.in_channels:
        raise ValueError(
            f"encoder expects [{c.in_channels}, {c.input_resolution}, {c.input_resolution}] inputs, "
            f"got {tuple(images.shape[1:])}")
    if prompts is not None and len(prompts) != c.num_stages:
        raise ValueError(f"got {len(prompts)} prompts for {c.num_stages} stages")
    x = encoder.patch_embed(images).flatten(2).transpose(1, 2)
    feats = []
    for s, blocks in enumerate(encoder.stages):
        if s > 0:
            x = encoder.merges[s - 1](x, c.grid(s - 1))
        prompt = None if prompts is None else prompts[s]
        for block in blocks:
            x = block(inject_prompt(x, prompt))
        feats.append(x)
    return [f[0] for f in feats] if squeeze else feats


class LayerNorm2d(nn.Module):
    """LayerNorm over the channel axis of [B, C, H, W] maps."""

    def __init__(self, channels: int, eps: float = 1e-6):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))
        self.eps = eps

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        u = x.mean(1, keepdim=True)
        var = (x - u).pow(2).mean(1, keepdim=True)
        x = (x - u) / torch.sqrt(var + self.eps)
        return x * self.weight[:, None, None] + self.bias[:, None, None]


class MaskDecoder(nn.Module):
    """Top-down fusion of all stages, then transposed-conv upsampling to input resolution.

    Each stage's tokens are standardized per image and channel before the lateral
    projection; frozen features vary little across tokens and would otherwise train slowly.
    """

    def __init__(self, config: EncoderConfig, dim: int = 32):
        super().__init__()
        self.config = config
        self.dim = dim
        n_up = int(math.log2(config.patch_size))
        self.laterals = nn.ModuleList(nn.Linear(w, dim) for w in config.stage_widths)
        self.fuse = nn.Conv2d(dim, dim, 3, padding=1)
        self.fuse_norm = LayerNorm2d(dim)
        self.upsample = nn.ModuleList(nn.ConvTranspose2d(dim, dim, 2, stride=2) for _ in range(n_up))
        self.upsample_norms = nn.ModuleList(LayerNorm2d(dim) for _ in range(n_up))
        self.head = nn.Conv2d(dim, 1, 1)

    def forward(self, features: Sequence[torch.Tensor]) -> torch.Tensor:
        return decode(self, features)


def _standardize_tokens(f: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    u = f.mean(1, keepdim=True)
    var = (f - u).pow(2).mean(1, keepdim=True)
    return (f - u) / torch.sqrt(var + eps)


def decode(decoder: MaskDecoder, features: Sequence[torch.Tensor]) -> torch.Tensor:
    """Mask logits [B, 1, H, W] (or [1, H, W] for unbatched features)."""
    c = decoder.config
    if len(features) != c.num_stages:
        raise ValueError(f"decoder built for {c.num_stages} stages, got {len(features)}")
    squeeze = features[0].dim() == 2
    if squeeze:
        features = [f.unsqueeze(0) for f in features]
    for s, f in enumerate(features):
        if f.shape[1:] != (c.grid(s) ** 2, c.stage_widths[s]):
            raise ValueError(f"stage {s} features {tuple(f.shape[1:])} do not match decoder config")
    b = features[0].shape[0]

    def lateral(s: int) -> torch.Tensor:
        g = c.grid(s)
        x = decoder.laterals[s](_standardize_tokens(features[s]))
        return x.transpose(1, 2).reshape(b, decoder.dim, g, g)

    y = lateral(c.num_stages - 1)
    for s in range(c.num_stages - 2, -1, -1):
        y = F.interpolate(y, scale_factor=2, mode="bilinear", align_corners=False) + lateral(s)
    y = F.gelu(decoder.fuse_norm(decoder.fuse(y)))
    for up, norm in zip(decoder.upsample, decoder.upsample_norms):
        y = F.gelu(norm(up(y)))
    logits = decoder.head(y)
    return logits[0] if squeeze else logits


def encoder_state(encoder: HierarchicalEncoder) -> dict[str, torch.Tensor]:
    return {f"encoder.{k}": v for k, v in encoder.state_dict().items()}


def encoder_hash(encoder: HierarchicalEncoder) -> str:
    """sha256 over encoder parameter names, dtypes, shapes and raw bytes."""
    h = hashlib.sha256()
    for name, t in sorted(encoder.state_dict().items()):
        t = t.detach().cpu().contiguous()
        h.update(f"{name}|{t.dtype}|{tuple(t.shape)}|".encode())
        h.update(t.numpy().tobytes())
    return h.hexdigest()


def save_encoder(encoder: HierarchicalEncoder, path: PathLike):
    return save_container(path, encoder_state(encoder), {"encoder_config": encoder.config.to_dict()})


@dataclass
class LoadReport:
    missing: list[str] = field(default_factory=list)
    unexpected: list[str] = field(default_factory=list)
    shape_mismatch: dict[str, tuple[tuple, tuple]] = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return not (self.missing or self.unexpected or self.shape_mismatch)

    def stages_affected(self) -> list[int]:
        out = set()
        for name in list(self.shape_mismatch) + self.missing + self.unexpected:
            parts = name.split(".")
            if len(parts) > 2 and parts[1] == "stages":
                out.add(int(parts[2]))
            elif len(parts) > 2 and parts[1] == "merges":
                out.add(int(parts[2]) + 1)
            elif len(parts) > 1 and parts[1] == "patch_embed":
                out.add(0)
        return sorted(out)

    def __str__(self) -> str:
        lines = []
        if self.missing:
            lines.append("missing: " + ", ".join(self.missing))
        if self.unexpected:
            lines.append("unexpected: " + ", ".join(self.unexpected))
        if self.shape_mismatch:
            lines.append("shape mismatch in stages " + ", ".join(map(str, self.stages_affected())) + ":")
            lines.extend(f"  {k}: expected {list(e)}, found {list(g)}" for k, (e, g) in self.shape_mismatch.items())
        return "\n".join(lines)


class ParameterMismatchError(CheckpointError):
    def __init__(self, report: LoadReport):
        super().__init__(str(report))
        self.report = report


class MissingParameterError(ParameterMismatchError):
    pass


class ShapeMismatchError(ParameterMismatchError):
    pass


def check_state(expected: dict[str, torch.Tensor], found: dict[str, torch.Tensor]) -> LoadReport:
    report = LoadReport(
        missing=sorted(set(expected) - set(found)),
        unexpected=sorted(set(found) - set(expected)))
    for k in sorted(set(expected) & set(found)):
        if tuple(expected[k].shape) != tuple(found[k].shape):
            report.shape_mismatch[k] = (tuple(expected[k].shape), tuple(found[k].shape))
    return report


def raise_for_report(report: LoadReport) -> None:
    if report.shape_mismatch:
        raise ShapeMismatchError(report)
    if not report.ok:
        raise MissingParameterError(report)


def load_pretrained_encoder(path: PathLike, format_version: int = FORMAT_VERSION,
                            config: Optional[EncoderConfig] = None) -> HierarchicalEncoder:
    """Build an encoder (from ``config`` or the file's own config) and fill it from ``path``."""
    tensors, record = load_container(path, format_version)
    if config is None:
        if "encoder_config" not in record:
            raise CheckpointError(f"{path}: no encoder_config in metadata and none supplied")
        config = EncoderConfig.from_dict(record["encoder_config"])
    encoder = HierarchicalEncoder(config)
    expected = encoder_state(encoder)
    found = {k: v for k, v in tensors.items() if k.startswith("encoder.")}
    raise_for_report(check_state(expected, found))
    dtype = next(iter(found.values())).dtype
    encoder.to(dtype)
    encoder.load_state_dict({k[len("encoder."):]: v for k, v in found.items()})
    return encoder.freeze()
