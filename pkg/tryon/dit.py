"""
Spatio-temporal diffusion transformer.

Token tensors are laid out as (..., f, s, d): frames, spatial sites, hidden
channels. Spatial attention mixes sites within a frame, temporal attention
mixes frames at a site, prompt cross-attention lets every token attend to the
prompt tokens.

"""
from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass
from typing import TYPE_CHECKING, Optional, Sequence, Tuple, Union

import torch
import torch.nn.functional as F
from einops import rearrange, repeat
from torch import Tensor, nn

from .codec import LATENT_CHANNELS, PatchEmbed
from .exceptions import ConditionError, ConfigError, ShapeError

if TYPE_CHECKING:  # pragma: no cover
    from .controlnet import ControlResidualSet
    from .garment import GarmentFeatureSet

logger = logging.getLogger(__name__)

# modulation chunks per block: (shift, scale) for ssa, tsa, pca and ff
_MODULATED_SUBLAYERS = 4


@dataclass
class DenoiserConfig:
    """Geometry of the denoiser; the garment extractor and ControlNet mirror it."""

    depth: int = 8
    patch_size: int = 2
    hidden_size: int = 128
    num_heads: int = 4
    mlp_ratio: float = 4.0
    max_frames: int = 36
    latent_channels: int = LATENT_CHANNELS
    prompt_length: int = 8
    prompt_dim: int = 64

    def validate(self) -> None:
        if self.depth < 2 or self.depth % 2:
            raise ConfigError(f"Block count must be even, got {self.depth}")
        if self.hidden_size % self.num_heads:
            raise ConfigError("hidden_size must be divisible by num_heads")
        if self.hidden_size % 4:
            raise ConfigError("hidden_size must be divisible by 4 (2D sin-cos encoding)")
        if self.mlp_ratio < 1:
            raise ConfigError("mlp_ratio must be >= 1")
        if self.patch_size < 1:
            raise ConfigError("patch_size must be >= 1")

    @classmethod
    def full_scale(cls) -> DenoiserConfig:
        return cls(depth=28, patch_size=2, hidden_size=1152, num_heads=16, max_frames=36)


@dataclass
class BlockConfig:
    hidden_size: int
    num_heads: int
    mlp_ratio: float = 4.0
    has_temporal: bool = True
    has_garment_fusion: bool = True

    def __post_init__(self) -> None:
        if self.mlp_ratio < 1:
            raise ConfigError("mlp_ratio must be >= 1")
        if self.hidden_size % self.num_heads:
            raise ConfigError("hidden_size must be divisible by num_heads")


@dataclass
class PromptEmbedding:
    """Prompt tokens of shape (L_p, d_text) from the fixed prompt-encoder stub."""

    tokens: Tensor
    source: str


def prompt_embedding(text: str, length: int = 8, dim: int = 64) -> PromptEmbedding:
    """Deterministic stand-in for a text encoder: a table seeded by the prompt text."""
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    generator = torch.Generator().manual_seed(int.from_bytes(digest[:8], "little"))
    tokens = torch.randn(length, dim, generator=generator)
    return PromptEmbedding(tokens=tokens, source=text)


class Attention(nn.Module):
    """Per-head projections W_Q, W_K, W_V and the output map W_O."""

    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        if dim % num_heads:
            raise ConfigError(f"dim {dim} is not divisible by {num_heads} heads")
        self.dim = dim
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.o = nn.Linear(dim, dim)


def multi_head_attention(
    query: Tensor, key_value: Tensor, params: Attention, return_weights: bool = False
) -> Union[Tensor, Tuple[Tensor, Tensor]]:
    """
    softmax(Q K^T / sqrt(d_head)) V over the second-to-last axis.

    `query` is (..., Lq, d) and `key_value` (..., Lk, d); leading dimensions
    broadcast. Returns (..., Lq, d) and optionally the (..., heads, Lq, Lk)
    attention weights.

    """
    if query.shape[-1] != params.dim or key_value.shape[-1] != params.dim:
        raise ShapeError(
            f"Attention expects {params.dim} channels, got "
            f"{query.shape[-1]} (query) and {key_value.shape[-1]} (key/value)"
        )
    if key_value.shape[-2] == 0:
        raise ShapeError("Attention over an empty key/value sequence")
    heads = params.num_heads
    q = rearrange(params.q(query), "... l (h e) -> ... h l e", h=heads)
    k = rearrange(params.k(key_value), "... l (h e) -> ... h l e", h=heads)
    v = rearrange(params.v(key_value), "... l (h e) -> ... h l e", h=heads)
    weights = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(params.head_dim), dim=-1)
    out = params.o(rearrange(weights @ v, "... h l e -> ... l (h e)"))
    if return_weights:
        return out, weights
    return out


def spatial_self_attention(tokens: Tensor, params: Attention) -> Tensor:
    """Self-attention across the s sites of each frame independently."""
    return multi_head_attention(tokens, tokens, params)


def temporal_self_attention(tokens: Tensor, params: Attention) -> Tensor:
    """Self-attention across the f frames at each spatial site independently."""
    by_site = rearrange(tokens, "... f s d -> ... s f d")
    out = multi_head_attention(by_site, by_site, params)
    return rearrange(out, "... s f d -> ... f s d")


def prompt_cross_attention(tokens: Tensor, prompt: Tensor, params: Attention) -> Tensor:
    """
    Every token attends to the prompt tokens.

    `prompt` is (L_p, d) or (B, L_p, d), already projected to the hidden size.

    """
    if prompt.shape[-2] == 0:
        raise ShapeError("Prompt embedding is empty")
    frames = tokens.shape[-3]
    flat = rearrange(tokens, "... f s d -> ... (f s) d")
    out = multi_head_attention(flat, prompt, params)
    return rearrange(out, "... (f s) d -> ... f s d", f=frames)


def attention_fusion(
    r_p: Tensor, r_c: Tensor, ssa_params: Attention, sca_params: Attention
) -> Tensor:
    """
    SSA(r_p, r_p) + SCA(r_p, r_c).

    The spatial cross-attention queries person tokens against the garment
    tokens of the same frame; `r_c` must already be broadcast to the shape
    of `r_p`.

    """
    if r_p.shape[-3:] != r_c.shape[-3:]:
        raise ShapeError(
            f"Garment feature {tuple(r_c.shape)} does not match tokens {tuple(r_p.shape)}"
        )
    ssa = multi_head_attention(r_p, r_p, ssa_params)
    sca = multi_head_attention(r_p, r_c, sca_params)
    return ssa + sca


def broadcast_temporal(feature: Tensor, frames: int) -> Tensor:
    """Repeat a single-frame (..., 1, s, d) feature along the frame axis."""
    if frames < 1:
        raise ShapeError("Cannot broadcast to fewer than one frame")
    if feature.shape[-3] != 1:
        raise ShapeError(f"Expected a single-frame feature, got {feature.shape[-3]} frames")
    return repeat(feature, "... 1 s d -> ... f s d", f=frames)


def sincos_1d(positions: Tensor, dim: int) -> Tensor:
    """Fixed sinusoidal encoding of (n,) positions into (n, dim)."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=torch.float64) / max(half, 1)
    )
    args = positions.double()[:, None] * freqs[None]
    encoding = torch.cat([torch.sin(args), torch.cos(args)], dim=-1)
    if dim % 2:
        encoding = F.pad(encoding, (0, 1))
    return encoding


def sincos_2d(grid: Tuple[int, int], dim: int) -> Tensor:
    """Fixed 2D sinusoidal encoding of a patch grid, shape (h * w, dim)."""
    rows, cols = torch.meshgrid(
        torch.arange(grid[0]), torch.arange(grid[1]), indexing="ij"
    )
    emb_h = sincos_1d(rows.flatten(), dim // 2)
    emb_w = sincos_1d(cols.flatten(), dim // 2)
    return torch.cat([emb_h, emb_w], dim=-1)


def timestep_embedding(t: Tensor, dim: int) -> Tensor:
    """Sinusoidal base embedding of integer timesteps, shape (B, dim)."""
    return sincos_1d(t.reshape(-1), dim)


class TimestepEmbedder(nn.Module):
    """Sinusoidal base embedding followed by a two-layer MLP."""

    def __init__(self, hidden_size: int):
        super().__init__()
        self.hidden_size = hidden_size
        self.mlp = nn.Sequential(
            nn.Linear(hidden_size, hidden_size),
            nn.SiLU(),
            nn.Linear(hidden_size, hidden_size),
        )

    def forward(self, t: Tensor) -> Tensor:
        dtype = self.mlp[0].weight.dtype
        return self.mlp(timestep_embedding(t, self.hidden_size).to(dtype))


class FeedForward(nn.Module):
    def __init__(self, dim: int, mlp_ratio: float):
        super().__init__()
        hidden = int(dim * mlp_ratio)
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(F.gelu(self.fc1(x), approximate="tanh"))


def _norm(x: Tensor) -> Tensor:
    return F.layer_norm(x, (x.shape[-1],), eps=1e-6)


def _modulate(x: Tensor, shift: Tensor, scale: Tensor) -> Tensor:
    return x * (1 + scale) + shift


class STDiTBlock(nn.Module):
    """
    One ST-DiT block.

    Sublayers, each pre-normalized, modulated by the timestep embedding and
    skip-connected: SSA (or attention fusion when a garment feature is
    consumed), TSA, PCA, feed-forward. TSA is skipped for single-frame input.

    """

    def __init__(self, cfg: BlockConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.hidden_size
        self.ssa = Attention(d, cfg.num_heads)
        if cfg.has_garment_fusion:
            self.sca = Attention(d, cfg.num_heads)
        if cfg.has_temporal:
            self.tsa = Attention(d, cfg.num_heads)
        self.pca = Attention(d, cfg.num_heads)
        self.ff = FeedForward(d, cfg.mlp_ratio)
        self.modulation = nn.Sequential(
            nn.SiLU(), nn.Linear(d, 2 * _MODULATED_SUBLAYERS * d)
        )

    def forward(
        self,
        x: Tensor,
        c: Tensor,
        prompt: Tensor,
        garment: Optional[Tensor] = None,
    ) -> Tensor:
        """
        Apply the block to (B, f, s, d) tokens.

        `c` is the (B, d) timestep embedding, `prompt` the projected prompt
        tokens and `garment` the (B, 1, s, d) garment feature for this block.

        """
        if self.cfg.has_garment_fusion and garment is None:
            raise ConditionError("Block with garment fusion requires a garment feature")
        mods = self.modulation(c)[:, None, None, :].chunk(2 * _MODULATED_SUBLAYERS, dim=-1)
        ssa_shift, ssa_scale, tsa_shift, tsa_scale, pca_shift, pca_scale, ff_shift, ff_scale = mods
        frames = x.shape[-3]

        h = _modulate(_norm(x), ssa_shift, ssa_scale)
        if self.cfg.has_garment_fusion:
            assert garment is not None
            r_c = broadcast_temporal(_norm(garment), frames)
            x = x + attention_fusion(h, r_c, self.ssa, self.sca)
        else:
            x = x + spatial_self_attention(h, self.ssa)

        if self.cfg.has_temporal and frames > 1:
            h = _modulate(_norm(x), tsa_shift, tsa_scale)
            h = h + sincos_1d(torch.arange(frames), h.shape[-1]).to(h)[:, None, :]
            x = x + temporal_self_attention(h, self.tsa)

        # PCA consumes the post-residual TSA stream
        h = _modulate(_norm(x), pca_shift, pca_scale)
        x = x + prompt_cross_attention(h, prompt, self.pca)

        h = _modulate(_norm(x), ff_shift, ff_scale)
        return x + self.ff(h)

    def drop_garment_fusion(self) -> None:
        """Turn the block into a plain SSA block (attention-fusion ablation)."""
        if self.cfg.has_garment_fusion:
            del self.sca
            self.cfg = BlockConfig(
                self.cfg.hidden_size,
                self.cfg.num_heads,
                self.cfg.mlp_ratio,
                has_temporal=self.cfg.has_temporal,
                has_garment_fusion=False,
            )


class FinalLayer(nn.Module):
    """Modulated norm and projection d -> p * p * C per token."""

    def __init__(self, hidden_size: int, patch_size: int, out_channels: int):
        super().__init__()
        self.modulation = nn.Sequential(nn.SiLU(), nn.Linear(hidden_size, 2 * hidden_size))
        self.linear = nn.Linear(hidden_size, patch_size * patch_size * out_channels)

    def forward(self, x: Tensor, c: Tensor) -> Tensor:
        shift, scale = self.modulation(c)[:, None, None, :].chunk(2, dim=-1)
        return self.linear(_modulate(_norm(x), shift, scale))


def prompt_tokens(prompt: Union[PromptEmbedding, Tensor]) -> Tensor:
    tokens = prompt.tokens if isinstance(prompt, PromptEmbedding) else prompt
    if tokens.shape[-2] == 0:
        raise ShapeError("Prompt embedding is empty")
    return tokens


class Denoiser(nn.Module):
    """
    The N-block denoising ST-DiT, predicting the noise of a latent video.

    Residuals from the ID ControlNet are added to the outputs of the first
    N/2 blocks; garment feature i feeds the attention fusion of block i.

    """

    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        d = cfg.hidden_size
        self.x_embedder = PatchEmbed(cfg.latent_channels, cfg.patch_size, d)
        self.t_embedder = TimestepEmbedder(d)
        self.prompt_proj = nn.Linear(cfg.prompt_dim, d)
        block_cfg = BlockConfig(d, cfg.num_heads, cfg.mlp_ratio)
        self.blocks = nn.ModuleList([STDiTBlock(block_cfg) for _ in range(cfg.depth)])
        self.final_layer = FinalLayer(d, cfg.patch_size, cfg.latent_channels)

    @property
    def front_half(self) -> int:
        return self.cfg.depth // 2

    def embed_tokens(self, z_t: Tensor) -> Tuple[Tensor, Tuple[int, int]]:
        """Patch embedding plus the fixed 2D positional encoding."""
        grid = self.x_embedder.grid(z_t.shape[-3], z_t.shape[-2])
        tokens = self.x_embedder(z_t)
        return tokens + sincos_2d(grid, self.cfg.hidden_size).to(tokens), grid

    def embed_prompt(self, prompt: Union[PromptEmbedding, Tensor], dtype: torch.dtype) -> Tensor:
        return self.prompt_proj(prompt_tokens(prompt).to(dtype))

    def forward_tokens(
        self,
        z_t: Tensor,
        t: Tensor,
        prompt: Union[PromptEmbedding, Tensor],
        garment_feats: Optional["GarmentFeatureSet"] = None,
        residuals: Optional["ControlResidualSet"] = None,
    ) -> Tensor:
        """Run the block stack and return the (B, f, s, d) tokens before the final layer."""
        if residuals is not None and len(residuals) != self.front_half:
            raise ShapeError(
                f"Expected {self.front_half} ControlNet residuals, got {len(residuals)}"
            )
        if garment_feats is not None and len(garment_feats) < len(self.blocks):
            raise ShapeError(
                f"Expected {len(self.blocks)} garment features, got {len(garment_feats)}"
            )
        x, _ = self.embed_tokens(z_t)
        c = self.t_embedder(t)
        y = self.embed_prompt(prompt, x.dtype)
        for i, block in enumerate(self.blocks):
            garment = garment_feats[i] if garment_feats is not None else None
            x = block(x, c, y, garment)
            if residuals is not None and i < self.front_half:
                x = x + residuals[i]
        return x

    def forward(
        self,
        z_t: Tensor,
        t: Tensor,
        prompt: Union[PromptEmbedding, Tensor],
        garment_feats: Optional["GarmentFeatureSet"] = None,
        residuals: Optional["ControlResidualSet"] = None,
    ) -> Tensor:
        """Predict the noise in (B, f, h, w, C) latents `z_t` at timesteps `t` (B,)."""
        grid = self.x_embedder.grid(z_t.shape[-3], z_t.shape[-2])
        x = self.forward_tokens(z_t, t, prompt, garment_feats, residuals)
        out = self.final_layer(x, self.t_embedder(t))
        return self.x_embedder.from_patches(out, grid)


def zero_output_projections(module: nn.Module, names: Sequence[str] = ()) -> None:
    """
    Zero the output maps of every attention and feed-forward sublayer.

    With `names` given, only sublayers whose attribute name is listed are
    touched (e.g. ("sca",)).

    """
    with torch.no_grad():
        for block in module.modules():
            if not isinstance(block, STDiTBlock):
                continue
            for name in ("ssa", "sca", "tsa", "pca"):
                if names and name not in names:
                    continue
                attn = getattr(block, name, None)
                if attn is not None:
                    attn.o.weight.zero_()
                    attn.o.bias.zero_()
            if not names or "ff" in names:
                block.ff.fc2.weight.zero_()
                block.ff.fc2.bias.zero_()
