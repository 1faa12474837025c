"""Task-specific guidance: high-frequency components, patch embeddings and their weighted sum."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import torch
import torch.nn as nn
import torch.nn.functional as F

DEFAULT_MASK_RATIO = 0.25


class GuidanceKind(enum.Enum):
    HFC = "hfc"
    PATCH_EMBED = "patch_embed"
    CUSTOM = "custom"


@dataclass
class GuidanceComponent:
    kind: GuidanceKind
    data: torch.Tensor  # [..., num_patches, guidance_dim]
    weight_id: int = 0


@dataclass
class GuidanceTensor:
    data: torch.Tensor  # [..., num_patches, guidance_dim]
    stage_id: int


def _check_finite(x: torch.Tensor, what: str) -> None:
    if not torch.isfinite(x).all():
        raise ValueError(f"{what} contains non-finite values")


def _side(ratio: float, n: int) -> int:
    # round first so that e.g. 0.3 * 10 does not ceil to 4
    return math.ceil(round(ratio * n, 9))


def low_frequency_mask(height: int, width: int, mask_ratio: float,
                       device: Optional[torch.device] = None) -> torch.Tensor:
    """Boolean [H, W] mask of the spectrum bins removed by :func:`extract_hfc`.

    The removed region is the centered box of side ``ceil(ratio * n)`` per axis
    (a square for square images), closed under k -> -k so the filtered image stays real.
    Bins are indexed in unshifted FFT order.
    """
    if not 0.0 <= mask_ratio <= 1.0:
        raise ValueError(f"mask_ratio must lie in [0, 1], got {mask_ratio}")
    side_y, side_x = _side(mask_ratio, height), _side(mask_ratio, width)
    if side_y == 0 or side_x == 0:
        return torch.zeros(height, width, dtype=torch.bool, device=device)
    ky = (torch.fft.fftfreq(height, device=device) * height).round().abs()
    kx = (torch.fft.fftfreq(width, device=device) * width).round().abs()
    return (ky[:, None] <= side_y // 2) & (kx[None, :] <= side_x // 2)


def extract_hfc(image: torch.Tensor, mask_ratio: float = DEFAULT_MASK_RATIO) -> torch.Tensor:
    """High-frequency components of ``image`` ([..., H, W]), same shape and dtype.

    Zeroes the low-frequency box of the spectrum per channel and inverts the FFT.
    """
    if not 0.0 <= mask_ratio <= 1.0:
        raise ValueError(f"mask_ratio must lie in [0, 1], got {mask_ratio}")
    _check_finite(image, "image")
    h, w = image.shape[-2:]
    remove = low_frequency_mask(h, w, mask_ratio, device=image.device)
    spectrum = torch.fft.fft2(image)
    spectrum = spectrum.masked_fill(remove, 0)
    return torch.fft.ifft2(spectrum).real.to(image.dtype)


def compute_patch_embedding(image: torch.Tensor, patch_size: int, weight: torch.Tensor,
                            bias: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Project non-overlapping patches of ``image`` with a linear map.

    ``image`` is [C, H, W] or [B, C, H, W]. ``weight`` is [D, C*p*p] or a conv kernel
    [D, C, p, p]; each patch is flattened channel-major, then row-major. Patches are
    ordered row-major over the grid. Returns [(B,) H*W/p^2, D].
    """
    squeeze = image.dim() == 3
    if squeeze:
        image = image.unsqueeze(0)
    if image.dim() != 4:
        raise ValueError(f"expected [C,H,W] or [B,C,H,W], got shape {tuple(image.shape)}")
    _, c, h, w = image.shape
    if h % patch_size or w % patch_size:
        raise ValueError(
            f"image size {h}x{w} is not divisible by patch_size {patch_size}; pad or resize first")
    weight = weight.reshape(weight.shape[0], -1)
    if weight.shape[1] != c * patch_size * patch_size:
        raise ValueError(
            f"projection expects {weight.shape[1]} inputs, patches have {c * patch_size ** 2}")
    patches = F.unfold(image, kernel_size=patch_size, stride=patch_size).transpose(1, 2)
    out = patches @ weight.t()
    if bias is not None:
        out = out + bias
    return out[0] if squeeze else out


class GuidanceWeights(nn.Module):
    """Per-component weights w_j; all ones by default."""

    def __init__(self, num_components: int, trainable: bool = False, init: Optional[Sequence[float]] = None):
        super().__init__()
        values = torch.ones(num_components) if init is None else torch.as_tensor(init, dtype=torch.float32)
        if values.numel() != num_components:
            raise ValueError("init length does not match num_components")
        self.trainable = trainable
        self.w = nn.Parameter(values.clone(), requires_grad=trainable)

    def __len__(self) -> int:
        return self.w.numel()


def compose_guidance(components: Sequence[Union[GuidanceComponent, torch.Tensor]],
                     weights: Union[GuidanceWeights, Sequence[float], torch.Tensor],
                     stage_id: int = 0) -> GuidanceTensor:
    """Weighted elementwise sum of guidance components."""
    if len(components) == 0:
        raise ValueError("compose_guidance needs at least one component")
    data = [c.data if isinstance(c, GuidanceComponent) else c for c in components]
    shape = data[0].shape
    for d in data[1:]:
        if d.shape != shape:
            raise ValueError(f"guidance component shapes differ: {tuple(shape)} vs {tuple(d.shape)}")
    w = weights.w if isinstance(weights, GuidanceWeights) else torch.as_tensor(weights)
    if w.numel() != len(data):
        raise ValueError(f"{w.numel()} weights for {len(data)} components")
    for d in data:
        _check_finite(d, "guidance component")
    w = w.to(dtype=data[0].dtype, device=data[0].device)
    out = w[0] * data[0]
    for j in range(1, len(data)):
        out = out + w[j] * data[j]
    return GuidanceTensor(out, stage_id)


def resample_to_stages(guidance: torch.Tensor, grid: int, num_stages: int) -> list[torch.Tensor]:
    """Average-pool first-stage guidance [B, grid*grid, D] onto each coarser stage grid."""
    b, n, d = guidance.shape
    if n != grid * grid:
        raise ValueError(f"guidance has {n} tokens, expected {grid}x{grid}")
    spatial = guidance.transpose(1, 2).reshape(b, d, grid, grid)
    out = [guidance]
    for s in range(1, num_stages):
        pooled = F.avg_pool2d(spatial, kernel_size=2 ** s)
        out.append(pooled.flatten(2).transpose(1, 2))
    return out


class GuidanceExtractor(nn.Module):
    """Builds F_i = w_hfc * PE(HFC(x)) + w_pe * PE(x) for every encoder stage."""

    def __init__(self, mask_ratio: float = DEFAULT_MASK_RATIO, trainable_weights: bool = False):
        super().__init__()
        if not 0.0 <= mask_ratio <= 1.0:
            raise ValueError(f"mask_ratio must lie in [0, 1], got {mask_ratio}")
        self.mask_ratio = mask_ratio
        self.weights = GuidanceWeights(2, trainable=trainable_weights)

    def forward(self, images: torch.Tensor, patch_size: int, weight: torch.Tensor,
                bias: Optional[torch.Tensor], num_stages: int) -> list[GuidanceTensor]:
        hfc = extract_hfc(images, self.mask_ratio)
        components = [
            GuidanceComponent(GuidanceKind.HFC, compute_patch_embedding(hfc, patch_size, weight, bias), 0),
            GuidanceComponent(GuidanceKind.PATCH_EMBED, compute_patch_embedding(images, patch_size, weight, bias), 1),
        ]
        first = compose_guidance(components, self.weights).data
        grid = images.shape[-1] // patch_size
        return [GuidanceTensor(g, s) for s, g in enumerate(resample_to_stages(first, grid, num_stages))]
