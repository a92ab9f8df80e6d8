"""
ID ControlNet: a trainable copy of the denoiser's front half.

Conditions (agnostic latent, pose latent, inpaint mask) enter through a
zero-initialized linear layer and leave through one zero-initialized linear
per residual tap, so a fresh ControlNet adds exact zeros to the denoiser.

"""
from __future__ import annotations

import copy
import logging
from dataclasses import dataclass
from typing import TYPE_CHECKING, Iterator, List, Optional, Union

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .codec import LATENT_CHANNELS, Codec, PatchEmbed
from .dit import Denoiser, PromptEmbedding, STDiTBlock, prompt_tokens, sincos_2d
from .exceptions import ConfigError, DataError, ShapeError

if TYPE_CHECKING:  # pragma: no cover
    from .garment import GarmentFeatureSet
    from .scenes import ConditioningTuple

logger = logging.getLogger(__name__)

# [z_a | z_p | m_c]
CONTROL_CHANNELS = 2 * LATENT_CHANNELS + 1
MASK_CHANNEL = CONTROL_CHANNELS - 1


@dataclass
class ControlNetConfig:
    # add the noisy latent tokens to the control tokens; off = conditions only
    include_noisy_latent: bool = True
    # keep the spatial cross-attention (garment fusion) inside the ControlNet
    garment_fusion: bool = True


@dataclass
class ControlInput:
    """(..., f, h, w, 9) control latent with channel layout [z_a | z_p | m_c]."""

    data: Tensor

    def __post_init__(self) -> None:
        if self.data.shape[-1] != CONTROL_CHANNELS:
            raise ShapeError(
                f"Control input needs {CONTROL_CHANNELS} channels, got {self.data.shape[-1]}"
            )
        mask = self.mask
        if mask.numel() and (mask.min() < 0 or mask.max() > 1):
            raise DataError("Control mask values must lie within [0, 1]")

    @property
    def agnostic(self) -> Tensor:
        return self.data[..., :LATENT_CHANNELS]

    @property
    def pose(self) -> Tensor:
        return self.data[..., LATENT_CHANNELS:MASK_CHANNEL]

    @property
    def mask(self) -> Tensor:
        return self.data[..., MASK_CHANNEL:]


@dataclass
class ControlResidualSet:
    """N/2 residuals of shape (B, f, s, d), one per front-half denoiser block."""

    residuals: List[Tensor]

    def __len__(self) -> int:
        return len(self.residuals)

    def __getitem__(self, index: int) -> Tensor:
        return self.residuals[index]

    def __iter__(self) -> Iterator[Tensor]:
        return iter(self.residuals)


def resize_mask(mask: Tensor, height: int, width: int) -> Tensor:
    """Nearest-neighbour resize of (..., H, W, 1) masks to (..., height, width, 1)."""
    lead = mask.shape[:-3]
    flat = mask.reshape(-1, 1, mask.shape[-3], mask.shape[-2])
    resized = F.interpolate(flat, size=(height, width), mode="nearest")
    return resized.reshape(*lead, height, width, 1)


def control_tensor(x_a: Tensor, d_p: Tensor, m_c: Tensor, codec: Codec) -> Tensor:
    """Concatenate E(x_a), E(d_p) and the resized mask along the channel axis."""
    if x_a.shape != d_p.shape:
        raise ShapeError(
            f"Agnostic {tuple(x_a.shape)} and pose {tuple(d_p.shape)} videos differ in shape"
        )
    if m_c.shape[:-1] != x_a.shape[:-1] or m_c.shape[-1] != 1:
        raise ShapeError(f"Mask {tuple(m_c.shape)} does not match frames {tuple(x_a.shape)}")
    z_a = codec.encode_tensor(x_a)
    z_p = codec.encode_tensor(d_p)
    mask = resize_mask(m_c.to(z_a.dtype), z_a.shape[-3], z_a.shape[-2])
    return torch.cat([z_a, z_p, mask], dim=-1)


def build_control_input(cond: "ConditioningTuple", codec: Codec) -> ControlInput:
    """Encode the agnostic and pose videos and append the nearest-resized mask."""
    return ControlInput(control_tensor(cond.x_a, cond.d_p, cond.m_c, codec))


def zero_linear(in_features: int, out_features: int) -> nn.Linear:
    layer = nn.Linear(in_features, out_features)
    nn.init.zeros_(layer.weight)
    nn.init.zeros_(layer.bias)
    return layer


class IDControlNet(nn.Module):
    """Front-half replica of a denoiser that emits per-block residuals."""

    def __init__(self, denoiser: Denoiser, cfg: Optional[ControlNetConfig] = None):
        super().__init__()
        if denoiser.cfg.depth % 2:
            raise ConfigError(f"Denoiser depth {denoiser.cfg.depth} is odd")
        self.cfg = cfg or ControlNetConfig()
        self.denoiser_cfg = denoiser.cfg
        d = denoiser.cfg.hidden_size
        p = denoiser.cfg.patch_size
        half = denoiser.front_half
        self.x_embedder = copy.deepcopy(denoiser.x_embedder)
        self.t_embedder = copy.deepcopy(denoiser.t_embedder)
        self.prompt_proj = copy.deepcopy(denoiser.prompt_proj)
        self.blocks = nn.ModuleList([copy.deepcopy(b) for b in denoiser.blocks[:half]])
        if not self.cfg.garment_fusion:
            for block in self.blocks:
                assert isinstance(block, STDiTBlock)
                block.drop_garment_fusion()
        self.control_embedder = PatchEmbed(CONTROL_CHANNELS, p, d)
        nn.init.zeros_(self.control_embedder.proj.weight)
        nn.init.zeros_(self.control_embedder.proj.bias)
        self.taps = nn.ModuleList([zero_linear(d, d) for _ in range(half)])

    def forward(
        self,
        control: Union[ControlInput, Tensor],
        z_t: Tensor,
        t: Tensor,
        garment_feats: "GarmentFeatureSet",
        prompt: Union[PromptEmbedding, Tensor],
    ) -> ControlResidualSet:
        """
        Compute the residual set for (B, f, h, w, 9) `control` and latents `z_t`.

        The branch input is patchify(z_t) plus the zero-projected control
        tokens; block i fuses garment feature i and residual i is the i-th
        zero-linear tap of block i's output.

        """
        data = control.data if isinstance(control, ControlInput) else control
        if data.shape[:-1] != z_t.shape[:-1]:
            raise ShapeError(
                f"Control {tuple(data.shape)} and latents {tuple(z_t.shape)} are misaligned"
            )
        if self.cfg.garment_fusion and len(garment_feats) < len(self.blocks):
            raise ShapeError(
                f"ControlNet needs {len(self.blocks)} garment features, got {len(garment_feats)}"
            )
        grid = self.x_embedder.grid(z_t.shape[-3], z_t.shape[-2])
        x = self.control_embedder(data.to(z_t.dtype))
        if self.cfg.include_noisy_latent:
            x = x + self.x_embedder(z_t)
        x = x + sincos_2d(grid, self.denoiser_cfg.hidden_size).to(x)
        c = self.t_embedder(t)
        y = self.prompt_proj(prompt_tokens(prompt).to(x.dtype))
        residuals = []
        for i, (block, tap) in enumerate(zip(self.blocks, self.taps)):
            garment = garment_feats[i] if self.cfg.garment_fusion else None
            x = block(x, c, y, garment)
            residuals.append(tap(x))
        return ControlResidualSet(residuals)


def init_from_denoiser(
    denoiser: Denoiser, cfg: Optional[ControlNetConfig] = None
) -> IDControlNet:
    """Copy the denoiser's front half by value and add zero-initialized ends."""
    controlnet = IDControlNet(denoiser, cfg)
    logger.debug(
        "ControlNet initialized with %s blocks (%s parameters)",
        len(controlnet.blocks),
        sum(p.numel() for p in controlnet.parameters()),
    )
    return controlnet
