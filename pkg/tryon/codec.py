"""
Pixel <-> latent codecs and latent <-> token patch embedding.

Videos are channels-last tensors (f, H, W, 3) in [-1, 1]. Latents are
(f, H/8, W/8, 4). Codecs accept any number of leading dimensions and treat
every frame independently, which is what makes encode commute with frame
permutations.

"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple, Union

import torch
import torch.nn.functional as F
from einops import rearrange
from torch import Tensor, nn

from .exceptions import ConfigError, DataError, ShapeError

logger = logging.getLogger(__name__)

# spatial downsampling factor between pixels and latents
DOWNSAMPLE = 8
LATENT_CHANNELS = 4
PIXEL_CHANNELS = 3


@dataclass
class CodecSpec:
    """Serializable description of a codec (part of the experiment config)."""

    # "linear" - seeded space-to-depth projection, "conv" - tiny autoencoder
    kind: str = "linear"
    seed: int = 0
    # multiplier applied to latents after encoding (and divided out on decode)
    latent_scale: float = 1.0
    # optimisation steps used by `fit_codec` for trainable codecs
    fit_steps: int = 500
    fit_learning_rate: float = 1e-3


@dataclass
class VideoTensor:
    """Raw frames in pixel space."""

    data: Tensor
    fps: float = 8.0

    def __post_init__(self) -> None:
        if self.data.dim() != 4 or self.data.shape[-1] != PIXEL_CHANNELS:
            raise ShapeError(f"Expected f x H x W x 3 video, got {tuple(self.data.shape)}")
        if self.data.shape[0] < 1:
            raise ShapeError("Video must contain at least one frame")
        _check_divisible(self.data.shape[1], self.data.shape[2])
        if self.data.numel() and self.data.abs().max() > 1.0:
            raise DataError("Video values must lie within [-1, 1]")

    @property
    def frames(self) -> int:
        return self.data.shape[0]


@dataclass
class VideoLatent:
    data: Tensor

    def __post_init__(self) -> None:
        if self.data.dim() != 4 or self.data.shape[-1] != LATENT_CHANNELS:
            raise ShapeError(
                f"Expected f x h x w x {LATENT_CHANNELS} latent, got {tuple(self.data.shape)}"
            )

    @property
    def frames(self) -> int:
        return self.data.shape[0]


@dataclass
class TokenSequence:
    """
    Patchified latent of shape (f, s, d) with s = hw / p^2.

    `embed` is the projection that produced the tokens; `unpatchify` uses it
    to invert the embedding exactly.

    """

    data: Tensor
    patch_size: int
    grid: Optional[Tuple[int, int]] = None
    embed: Optional["PatchEmbed"] = field(default=None, repr=False)

    def __post_init__(self) -> None:
        if self.grid is not None and self.data.shape[-2] != self.grid[0] * self.grid[1]:
            raise ShapeError(
                f"Token count {self.data.shape[-2]} does not match grid {self.grid}"
            )

    @property
    def tokens(self) -> int:
        return self.data.shape[-2]


def _check_divisible(height: int, width: int, factor: int = DOWNSAMPLE) -> None:
    if height % factor or width % factor:
        raise ShapeError(f"Frame size {height}x{width} is not divisible by {factor}")


class Codec:
    """Common interface of the pluggable codecs."""

    spec: CodecSpec

    def encode_tensor(self, frames: Tensor) -> Tensor:
        """Encode (..., H, W, 3) frames into (..., H/8, W/8, 4) latents."""
        _check_divisible(frames.shape[-3], frames.shape[-2])
        return self._encode(frames) * self.spec.latent_scale

    def decode_tensor(self, latents: Tensor) -> Tensor:
        """Decode (..., h, w, 4) latents into (..., 8h, 8w, 3) frames in [-1, 1]."""
        if latents.shape[-1] != LATENT_CHANNELS:
            raise ShapeError(f"Expected {LATENT_CHANNELS} latent channels")
        return self._decode(latents / self.spec.latent_scale).clamp(-1.0, 1.0)

    def _encode(self, frames: Tensor) -> Tensor:
        raise NotImplementedError

    def _decode(self, latents: Tensor) -> Tensor:
        raise NotImplementedError

    def parameters(self) -> List[nn.Parameter]:
        return []

    def state_dict(self) -> Dict[str, Tensor]:
        return {}

    def load_state_dict(self, state: Dict[str, Tensor]) -> None:
        pass


class LinearTestCodec(Codec):
    """
    Space-to-depth(8) followed by a fixed seeded projection 192 -> 4.

    The projection has orthonormal columns so decoding with its transpose is
    the exact pseudo-inverse; decode(encode(x)) is the orthogonal projection
    of every 8x8 block onto a 4-dim subspace.

    """

    def __init__(self, spec: CodecSpec):
        self.spec = spec
        generator = torch.Generator().manual_seed(spec.seed)
        block = DOWNSAMPLE * DOWNSAMPLE * PIXEL_CHANNELS
        gaussian = torch.randn(block, LATENT_CHANNELS, generator=generator, dtype=torch.float64)
        self.projection, _ = torch.linalg.qr(gaussian)

    def _encode(self, frames: Tensor) -> Tensor:
        blocks = rearrange(
            frames, "... (h p1) (w p2) c -> ... h w (p1 p2 c)", p1=DOWNSAMPLE, p2=DOWNSAMPLE
        )
        return blocks @ self.projection.to(frames)

    def _decode(self, latents: Tensor) -> Tensor:
        blocks = latents @ self.projection.to(latents).T
        return rearrange(
            blocks,
            "... h w (p1 p2 c) -> ... (h p1) (w p2) c",
            p1=DOWNSAMPLE,
            p2=DOWNSAMPLE,
            c=PIXEL_CHANNELS,
        )


class _ConvAutoencoder(nn.Module):
    def __init__(self, width: int = 32):
        super().__init__()
        self.encoder = nn.Sequential(
            nn.Conv2d(PIXEL_CHANNELS, width, 3, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv2d(width, width, 3, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv2d(width, LATENT_CHANNELS, 3, stride=2, padding=1),
        )
        self.decoder = nn.Sequential(
            nn.ConvTranspose2d(LATENT_CHANNELS, width, 4, stride=2, padding=1),
            nn.SiLU(),
            nn.ConvTranspose2d(width, width, 4, stride=2, padding=1),
            nn.SiLU(),
            nn.ConvTranspose2d(width, PIXEL_CHANNELS, 4, stride=2, padding=1),
            nn.Tanh(),
        )


class ConvAutoencoderCodec(Codec):
    """Tiny trainable convolutional autoencoder, fitted once on synthetic frames."""

    def __init__(self, spec: CodecSpec):
        self.spec = spec
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(spec.seed)
            self.net = _ConvAutoencoder()
        self.net.requires_grad_(False)

    def _apply(self, module: nn.Module, frames: Tensor) -> Tensor:
        lead = frames.shape[:-3]
        flat = rearrange(frames.reshape(-1, *frames.shape[-3:]), "n h w c -> n c h w")
        out = module(flat.to(next(self.net.parameters()).dtype))
        out = rearrange(out, "n c h w -> n h w c")
        return out.reshape(*lead, *out.shape[1:]).to(frames.dtype)

    def _encode(self, frames: Tensor) -> Tensor:
        return self._apply(self.net.encoder, frames)

    def _decode(self, latents: Tensor) -> Tensor:
        return self._apply(self.net.decoder, latents)

    def parameters(self) -> List[nn.Parameter]:
        return list(self.net.parameters())

    def state_dict(self) -> Dict[str, Tensor]:
        return self.net.state_dict()

    def load_state_dict(self, state: Dict[str, Tensor]) -> None:
        self.net.load_state_dict(state)


CODECS = {"linear": LinearTestCodec, "conv": ConvAutoencoderCodec}


def build_codec(spec: CodecSpec) -> Codec:
    try:
        return CODECS[spec.kind](spec)
    except KeyError:
        raise ConfigError(f"Unknown codec kind: {spec.kind!r}")


def fit_codec(codec: Codec, frames: Tensor, seed: int = 0, batch_size: int = 16) -> List[float]:
    """Fit a trainable codec on (N, H, W, 3) frames by pixel reconstruction."""
    params = codec.parameters()
    if not params:
        logger.debug("Codec %s has no trainable parameters", codec.spec.kind)
        return []
    for param in params:
        param.requires_grad_(True)
    optimizer = torch.optim.AdamW(params, lr=codec.spec.fit_learning_rate)
    generator = torch.Generator().manual_seed(seed)
    history = []
    try:
        for step in range(codec.spec.fit_steps):
            idx = torch.randint(0, frames.shape[0], (batch_size,), generator=generator)
            batch = frames[idx]
            recon = codec._decode(codec._encode(batch))
            loss = F.mse_loss(recon, batch)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            history.append(loss.item())
            if step % 100 == 0:
                logger.debug("codec fit step %s: %.5f", step, history[-1])
    finally:
        for param in params:
            param.requires_grad_(False)
    if history:
        logger.info("Codec fitted in %s steps, final loss %.5f", len(history), history[-1])
    return history


def encode(video: VideoTensor, codec: Codec) -> VideoLatent:
    """Map every frame of `video` into latent space."""
    return VideoLatent(codec.encode_tensor(video.data))


def decode(latent: VideoLatent, codec: Codec, fps: float = 8.0) -> VideoTensor:
    """Map latents back to pixel space, clamped to [-1, 1]."""
    return VideoTensor(codec.decode_tensor(latent.data), fps=fps)


class PatchEmbed(nn.Module):
    """
    Linear embedding of non-overlapping p x p latent patches into d channels.

    Works on (..., f, h, w, C) tensors and returns (..., f, s, d) tokens. The
    inverse uses the pseudo-inverse of the stored projection, so it is exact
    as long as the projection is injective (d >= p * p * C).

    """

    def __init__(self, in_channels: int, patch_size: int, hidden_size: int):
        super().__init__()
        self.in_channels = in_channels
        self.patch_size = patch_size
        self.hidden_size = hidden_size
        self.proj = nn.Linear(patch_size * patch_size * in_channels, hidden_size)

    def grid(self, height: int, width: int) -> Tuple[int, int]:
        p = self.patch_size
        if height % p or width % p:
            raise ShapeError(f"Latent size {height}x{width} is not divisible by patch {p}")
        return height // p, width // p

    def to_patches(self, latents: Tensor) -> Tensor:
        if latents.shape[-1] != self.in_channels:
            raise ShapeError(
                f"Expected {self.in_channels} channels, got {latents.shape[-1]}"
            )
        self.grid(latents.shape[-3], latents.shape[-2])
        p = self.patch_size
        return rearrange(latents, "... (h p1) (w p2) c -> ... (h w) (p1 p2 c)", p1=p, p2=p)

    def from_patches(self, patches: Tensor, grid: Tuple[int, int]) -> Tensor:
        p = self.patch_size
        return rearrange(
            patches,
            "... (h w) (p1 p2 c) -> ... (h p1) (w p2) c",
            h=grid[0],
            w=grid[1],
            p1=p,
            p2=p,
        )

    def forward(self, latents: Tensor) -> Tensor:
        return self.proj(self.to_patches(latents))

    def invert(self, tokens: Tensor, grid: Tuple[int, int]) -> Tensor:
        weight = self.proj.weight.detach().double()
        bias = self.proj.bias.detach().double()
        patches = (tokens.double() - bias) @ torch.linalg.pinv(weight).T
        return self.from_patches(patches, grid).to(tokens.dtype)


def patchify(latent: Union[VideoLatent, Any], embed: PatchEmbed) -> TokenSequence:
    """Embed a latent video as a token sequence of shape (f, s, d)."""
    data = latent.data
    grid = embed.grid(data.shape[-3], data.shape[-2])
    tokens = embed(data)
    return TokenSequence(tokens, patch_size=embed.patch_size, grid=grid, embed=embed)


def unpatchify(tokens: TokenSequence) -> VideoLatent:
    """Exact left-inverse of `patchify` on its image."""
    if tokens.grid is None:
        raise ShapeError("Token sequence carries no grid metadata")
    if tokens.embed is None:
        raise ShapeError("Token sequence carries no stored projection")
    data = tokens.embed.invert(tokens.data, tokens.grid)
    if data.shape[-1] != LATENT_CHANNELS:
        raise ShapeError(f"Projection decodes to {data.shape[-1]} channels, not a latent")
    return VideoLatent(data)
