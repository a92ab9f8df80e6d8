"""The three networks wired together as one noise predictor."""
from __future__ import annotations

import logging
from typing import Optional, Sequence, Union

import torch
from torch import Tensor, nn

from .codec import Codec
from .controlnet import (
    ControlInput,
    ControlNetConfig,
    IDControlNet,
    build_control_input,
    init_from_denoiser,
)
from .dit import Denoiser, DenoiserConfig, PromptEmbedding, prompt_embedding
from .exceptions import ConditionError, ShapeError
from .garment import GarmentExtractor, GarmentFeatureCache, GarmentFeatureSet
from .scenes import ConditioningTuple

logger = logging.getLogger(__name__)

Condition = Union[ConditioningTuple, ControlInput, Tensor, None]
Garment = Union[GarmentFeatureSet, Tensor, None]


class TryOnStack(nn.Module):
    """
    Denoiser, garment extractor and ID ControlNet behind one call.

    `stack(z_t, t, cond, garment)` predicts the noise in (B, f, h, w, 4)
    latents. `cond` is a conditioning tuple (encoded here and repeated over
    the batch) or an already encoded (B, f, h, w, 9) control tensor;
    `garment` is a (B, 1, h, w, 4) garment latent or a precomputed feature set.

    """

    def __init__(
        self,
        denoiser: Denoiser,
        garment_extractor: GarmentExtractor,
        controlnet: IDControlNet,
        codec: Codec,
        prompt: PromptEmbedding,
        use_controlnet: bool = True,
    ):
        super().__init__()
        self.denoiser = denoiser
        self.garment_extractor = garment_extractor
        self.controlnet = controlnet
        self.codec = codec
        self.prompt = prompt
        self.use_controlnet = use_controlnet
        self.garment_cache: Optional[GarmentFeatureCache] = None

    def control(self, cond: Condition, batch: int) -> Optional[Tensor]:
        if cond is None:
            return None
        if isinstance(cond, ConditioningTuple):
            cond = build_control_input(cond, self.codec)
        data = cond.data if isinstance(cond, ControlInput) else cond
        if data.dim() == 4:
            data = data.unsqueeze(0).expand(batch, *data.shape)
        return data

    def prepare_garment(self, garment_latent: Tensor) -> GarmentFeatureSet:
        """Extract (or fetch from the cache) the per-block features of a garment latent."""
        if self.garment_cache is not None:
            return self.garment_cache.get_or_extract(
                self.garment_extractor, garment_latent, self.prompt
            )
        return self.garment_extractor.extract(garment_latent, self.prompt)

    def windowed(self, frame_indices: Sequence[int]) -> TryOnStack:
        # conditioning is handed in per window, the networks carry no frame state
        return self

    def forward(
        self, z_t: Tensor, t: Tensor, cond: Condition = None, garment: Garment = None
    ) -> Tensor:
        if z_t.dim() != 5:
            raise ShapeError(f"Latents must be (B, f, h, w, C), got {tuple(z_t.shape)}")
        feats = None
        if isinstance(garment, Tensor):
            feats = self.prepare_garment(garment)
        elif garment is not None:
            feats = garment
        residuals = None
        if self.use_controlnet:
            control = self.control(cond, z_t.shape[0])
            if control is None:
                raise ConditionError("The ControlNet needs a conditioning input")
            if feats is None and self.controlnet.cfg.garment_fusion:
                raise ConditionError("The ControlNet fuses garment features; none were given")
            residuals = self.controlnet(control, z_t, t, feats, self.prompt)
        return self.denoiser(z_t, t, self.prompt, feats, residuals)


def build_stack(
    model: DenoiserConfig,
    codec: Codec,
    controlnet: Optional[ControlNetConfig] = None,
    prompt: Union[str, PromptEmbedding] = "a dancing person",
    seed: int = 0,
    use_controlnet: bool = True,
    dtype: torch.dtype = torch.float32,
) -> TryOnStack:
    """
    Initialize the three networks from `seed` without touching the global torch rng.

    The ControlNet is copied from the freshly initialized denoiser, so it
    starts as an exact replica of its front half.

    """
    model.validate()
    if isinstance(prompt, str):
        prompt = prompt_embedding(prompt, model.prompt_length, model.prompt_dim)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        denoiser = Denoiser(model)
        extractor = GarmentExtractor(model)
        control = init_from_denoiser(denoiser, controlnet)
    stack = TryOnStack(denoiser, extractor, control, codec, prompt, use_controlnet).to(dtype)
    logger.debug(
        "Built stack: %s denoiser / %s extractor / %s ControlNet parameters",
        sum(p.numel() for p in denoiser.parameters()),
        sum(p.numel() for p in extractor.parameters()),
        sum(p.numel() for p in control.parameters()),
    )
    return stack
