"""Garment extractor: a parallel ST-DiT feeding per-block clothing features."""
from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Union

import numpy as np
import torch
from torch import Tensor, nn

from .codec import PatchEmbed
from .dit import (
    BlockConfig,
    DenoiserConfig,
    PromptEmbedding,
    STDiTBlock,
    TimestepEmbedder,
    broadcast_temporal,
    prompt_tokens,
    sincos_2d,
)
from .exceptions import ShapeError

logger = logging.getLogger(__name__)

__all__ = [
    "GarmentExtractor",
    "GarmentFeatureCache",
    "GarmentFeatureSet",
    "broadcast_temporal",
    "source_hash",
]


def source_hash(garment: Tensor) -> str:
    """Content hash identifying a garment latent (or image)."""
    data = garment.detach().cpu().contiguous().numpy()
    digest = hashlib.sha256(str(data.shape).encode("ascii"))
    digest.update(data.tobytes())
    return digest.hexdigest()


@dataclass
class GarmentFeatureSet:
    """One (B, 1, s, d) feature per extractor block, tapped before the block's SSA."""

    features: List[Tensor]
    source_hash: str = ""

    def __len__(self) -> int:
        return len(self.features)

    def __getitem__(self, index: int) -> Tensor:
        return self.features[index]

    def __iter__(self) -> Iterator[Tensor]:
        return iter(self.features)


class GarmentExtractor(nn.Module):
    """
    N single-frame blocks (SSA, PCA, feed-forward; no TSA, no fusion).

    The garment image is clean, so blocks are modulated with the embedding of
    timestep 0.

    """

    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        d = cfg.hidden_size
        self.x_embedder = PatchEmbed(cfg.latent_channels, cfg.patch_size, d)
        self.t_embedder = TimestepEmbedder(d)
        self.prompt_proj = nn.Linear(cfg.prompt_dim, d)
        block_cfg = BlockConfig(
            d, cfg.num_heads, cfg.mlp_ratio, has_temporal=False, has_garment_fusion=False
        )
        self.blocks = nn.ModuleList([STDiTBlock(block_cfg) for _ in range(cfg.depth)])

    def forward(
        self, garment_latent: Tensor, prompt: Union[PromptEmbedding, Tensor]
    ) -> GarmentFeatureSet:
        return self.extract(garment_latent, prompt)

    def extract(
        self, garment_latent: Tensor, prompt: Union[PromptEmbedding, Tensor]
    ) -> GarmentFeatureSet:
        """Run the extractor on a (B, 1, h, w, C) garment latent."""
        if garment_latent.dim() != 5 or garment_latent.shape[1] != 1:
            raise ShapeError(
                f"Garment latent must be (B, 1, h, w, C), got {tuple(garment_latent.shape)}"
            )
        grid = self.x_embedder.grid(garment_latent.shape[-3], garment_latent.shape[-2])
        x = self.x_embedder(garment_latent)
        x = x + sincos_2d(grid, self.cfg.hidden_size).to(x)
        t = torch.zeros(garment_latent.shape[0], dtype=torch.long)
        c = self.t_embedder(t)
        y = self.prompt_proj(prompt_tokens(prompt).to(x.dtype))
        features = []
        for block in self.blocks:
            features.append(x)
            x = block(x, c, y)
        return GarmentFeatureSet(features, source_hash=source_hash(garment_latent))


@dataclass
class GarmentFeatureCache:
    """
    Feature sets keyed by garment source hash, for repeated-garment inference.

    With `directory` set, sets are also persisted as .npz files there.

    """

    directory: Optional[Path] = None
    _entries: Dict[str, GarmentFeatureSet] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self._entries)

    def _path(self, key: str) -> Path:
        assert self.directory is not None
        return self.directory / f"garment-{key[:32]}.npz"

    def get(self, key: str) -> Optional[GarmentFeatureSet]:
        if key in self._entries:
            return self._entries[key]
        if self.directory is not None and self._path(key).exists():
            with np.load(self._path(key)) as stored:
                features = [torch.from_numpy(stored[f"f{i}"]) for i in range(len(stored.files))]
            logger.debug("Loaded cached garment features %s", key[:12])
            self._entries[key] = GarmentFeatureSet(features, source_hash=key)
            return self._entries[key]
        return None

    def get_or_extract(
        self,
        extractor: GarmentExtractor,
        garment_latent: Tensor,
        prompt: Union[PromptEmbedding, Tensor],
    ) -> GarmentFeatureSet:
        key = source_hash(garment_latent)
        cached = self.get(key)
        if cached is not None:
            return cached
        with torch.no_grad():
            feats = extractor.extract(garment_latent, prompt)
        self._entries[key] = feats
        if self.directory is not None:
            self.directory.mkdir(parents=True, exist_ok=True)
            np.savez(
                self._path(key),
                **{f"f{i}": f.detach().cpu().numpy() for i, f in enumerate(feats)},
            )
        return feats
