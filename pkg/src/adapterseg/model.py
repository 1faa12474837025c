"""Assembled model: guidance -> adapters -> prompted frozen encoder -> mask decoder."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional

import torch
import torch.nn as nn

from .adapter import DEFAULT_BOTTLENECK, AdapterSet, trainable_parameters
from .backbone import EncoderConfig, HierarchicalEncoder, MaskDecoder, decode, encode
from .guidance import DEFAULT_MASK_RATIO, GuidanceExtractor


@dataclass
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    bottleneck_dim: int = DEFAULT_BOTTLENECK
    prompt_dim: Optional[int] = None  # defaults to guidance_dim
    mask_ratio: float = DEFAULT_MASK_RATIO
    trainable_guidance_weights: bool = False
    decoder_dim: int = 32
    use_adapters: bool = True

    @property
    def guidance_dim(self) -> int:
        return self.encoder.stage_widths[0]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["encoder"] = EncoderConfig.from_dict(d["encoder"])
        return cls(**d)


class AdapterSegModel(nn.Module):
    def __init__(self, config: ModelConfig, encoder: Optional[HierarchicalEncoder] = None):
        super().__init__()
        self.config = config
        if encoder is not None and encoder.config != config.encoder:
            raise ValueError("supplied encoder does not match config.encoder")
        self.encoder = (encoder or HierarchicalEncoder(config.encoder)).freeze()
        self.guidance = GuidanceExtractor(config.mask_ratio, config.trainable_guidance_weights)
        widths = config.encoder.stage_widths
        self.adapter = (AdapterSet(widths, config.guidance_dim, config.bottleneck_dim, config.prompt_dim)
                        if config.use_adapters else None)
        self.decoder = MaskDecoder(config.encoder, config.decoder_dim)

    def trainable_parameters(self) -> list[nn.Parameter]:
        params = trainable_parameters(self.adapter, None, self.decoder)
        if self.config.trainable_guidance_weights:
            params.append(self.guidance.weights.w)
        return params

    def prompts(self, images: torch.Tensor):
        if self.adapter is None:
            return None
        weight, bias = self.encoder.patch_projection
        guidance = self.guidance(images, self.config.encoder.patch_size, weight, bias,
                                 self.config.encoder.num_stages)
        return self.adapter(guidance)

    def features(self, images: torch.Tensor) -> list[torch.Tensor]:
        return encode(self.encoder, images, self.prompts(images))

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        """Mask logits [B, 1, H, W] for images [B, C, H, W]."""
        return decode(self.decoder, self.features(images))


def build_model(config: Optional[ModelConfig] = None, seed: Optional[int] = None,
                dtype: torch.dtype = torch.float32) -> AdapterSegModel:
    """Construct a model; with ``seed`` the random initialisation is reproducible."""
    config = config or ModelConfig()
    if seed is None:
        model = AdapterSegModel(config)
    else:
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            model = AdapterSegModel(config)
    return model.to(dtype)
