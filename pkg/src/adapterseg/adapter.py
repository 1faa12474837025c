"""Per-stage adapters turning guidance into prompts, and prompt injection."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Optional, Sequence, Union

import torch
import torch.nn as nn
import torch.nn.functional as F

from .guidance import GuidanceTensor

DEFAULT_BOTTLENECK = 32


@dataclass
class Prompt:
    data: torch.Tensor  # [..., num_patches_at_stage, stage_width]
    stage_id: int


def linear_resize_matrix(n_in: int, n_out: int) -> torch.Tensor:
    """Fixed [n_out, n_in] matrix that linearly interpolates a feature vector to a new length.

    Identity when ``n_in == n_out``.
    """
    if n_in == n_out:
        return torch.eye(n_in)
    m = torch.zeros(n_out, n_in, dtype=torch.float64)
    if n_out == 1 or n_in == 1:
        m[:, :] = 1.0 / n_in
        return m.float()
    pos = torch.arange(n_out, dtype=torch.float64) * (n_in - 1) / (n_out - 1)
    lo = pos.floor().long().clamp(max=n_in - 2)
    frac = pos - lo
    rows = torch.arange(n_out)
    m[rows, lo] = 1.0 - frac
    m[rows, lo + 1] += frac
    return m.float()


class AdapterStage(nn.Module):
    """MLP_tune for one encoder stage; shared by every block of that stage."""

    def __init__(self, stage_id: int, guidance_dim: int, bottleneck_dim: int = DEFAULT_BOTTLENECK):
        super().__init__()
        self.stage_id = stage_id
        # nn.Linear default init is uniform with fan-in scaling
        self.tune = nn.Linear(guidance_dim, bottleneck_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.tune(x)


class SharedUpProjection(nn.Module):
    """MLP_up shared by all stages, plus fixed per-stage aligners to each stage width."""

    def __init__(self, bottleneck_dim: int, prompt_dim: int, stage_widths: Sequence[int]):
        super().__init__()
        # zero init: prompts vanish at step 0, so the adapted encoder starts as the frozen one
        self.weight = nn.Parameter(torch.zeros(prompt_dim, bottleneck_dim))
        self.bias = nn.Parameter(torch.zeros(prompt_dim))
        self.prompt_dim = prompt_dim
        self.stage_widths = list(stage_widths)
        for i, width in enumerate(self.stage_widths):
            self.register_buffer(f"aligner{i}", linear_resize_matrix(prompt_dim, width), persistent=False)

    def aligner(self, stage_id: int) -> torch.Tensor:
        return getattr(self, f"aligner{stage_id}")

    def forward(self, hidden: torch.Tensor, stage_id: int) -> torch.Tensor:
        return F.linear(hidden, self.weight, self.bias) @ self.aligner(stage_id).t()


def adapter_forward(guidance: Union[GuidanceTensor, torch.Tensor], stage: AdapterStage,
                    shared: SharedUpProjection) -> Prompt:
    """P = align(MLP_up(GELU(MLP_tune(F)))) for one stage."""
    if isinstance(guidance, GuidanceTensor):
        if guidance.stage_id != stage.stage_id:
            raise ValueError(f"guidance for stage {guidance.stage_id} fed to adapter of stage {stage.stage_id}")
        data = guidance.data
    else:
        data = guidance
    if data.shape[-1] != stage.tune.in_features:
        raise ValueError(f"guidance_dim {data.shape[-1]} != adapter input {stage.tune.in_features}")
    hidden = F.gelu(stage(data), approximate="none")
    return Prompt(shared(hidden, stage.stage_id), stage.stage_id)


def inject_prompt(features: torch.Tensor, prompt: Union[Prompt, torch.Tensor, None]) -> torch.Tensor:
    if prompt is None:
        return features
    data = prompt.data if isinstance(prompt, Prompt) else prompt
    if data.shape[-2:] != features.shape[-2:]:
        raise ValueError(f"prompt shape {tuple(data.shape)} does not match features {tuple(features.shape)}")
    return features + data


class AdapterSet(nn.Module):
    """One AdapterStage per encoder stage and the single shared up-projection."""

    def __init__(self, stage_widths: Sequence[int], guidance_dim: int,
                 bottleneck_dim: int = DEFAULT_BOTTLENECK, prompt_dim: Optional[int] = None):
        super().__init__()
        prompt_dim = guidance_dim if prompt_dim is None else prompt_dim
        self.num_stages = len(stage_widths)
        for i in range(self.num_stages):
            self.add_module(f"stage{i}", AdapterStage(i, guidance_dim, bottleneck_dim))
        self.shared_up = SharedUpProjection(bottleneck_dim, prompt_dim, stage_widths)

    @property
    def stages(self) -> list[AdapterStage]:
        return [getattr(self, f"stage{i}") for i in range(self.num_stages)]

    def forward(self, guidance: Sequence[GuidanceTensor]) -> list[Prompt]:
        if len(guidance) != len(self.stages):
            raise ValueError(f"{len(guidance)} guidance tensors for {len(self.stages)} adapter stages")
        return [adapter_forward(g, st, self.shared_up) for g, st in zip(guidance, self.stages)]


def trainable_parameters(adapters: Union[AdapterSet, Iterable[AdapterStage], None],
                         shared: Optional[SharedUpProjection], decoder: nn.Module) -> list[nn.Parameter]:
    """Adapter stages + shared up-projection (once) + decoder, in a fixed order, encoder excluded."""
    modules: list[nn.Module] = []
    if isinstance(adapters, AdapterSet):
        modules.extend(adapters.stages)
        shared = adapters.shared_up if shared is None else shared
    elif adapters is not None:
        modules.extend(adapters)
    if shared is not None:
        modules.append(shared)
    modules.append(decoder)
    seen: set[int] = set()
    params = []
    for m in modules:
        for p in m.parameters():
            if id(p) not in seen:
                seen.add(id(p))
                params.append(p)
    return params
