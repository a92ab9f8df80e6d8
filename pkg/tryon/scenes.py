"""
Procedural "dancing figure" scenes and the try-on conditioning built from them.

A figure (torso ellipse, head, arms) wearing a textured rectangular garment
moves along a sinusoidal path while rotating. Every render is a pure
function of its SyntheticSceneSpec. Pixel values live in [-1, 1], masks in
{0, 1}, pixel centres sit at half-integer coordinates.

"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from functools import lru_cache
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from einops import rearrange
from PIL import Image, ImageDraw, ImageFont
from torch import Tensor

from .codec import VideoTensor
from .exceptions import ConfigError, DataError, ShapeError

logger = logging.getLogger(__name__)

TEXTURES = ("stripes", "checker", "glyph")
BACKGROUNDS = ("gradient", "stripes", "dots")

# value used to neutralize the garment region of agnostic frames (mid gray)
NEUTRAL = 0.0
MASK_DILATION = 3

# flat part colours of the pose maps
POSE_COLOURS = {
    "head": (1.0, -1.0, -1.0),
    "torso": (-1.0, 1.0, -1.0),
    "arms": (-1.0, -1.0, 1.0),
}
GLYPH_TEXT = "VT"


@dataclass
class SyntheticSceneSpec:
    seed: int
    height: int = 128
    width: int = 128
    frames: int = 48
    # path amplitude in pixels along x and y
    amplitude_x: float = 12.0
    amplitude_y: float = 4.0
    # path cycles over the whole scene
    frequency: float = 1.0
    phase: float = 0.0
    # peak rotation of the figure in degrees
    rotation: float = 10.0
    torso_rx: float = 16.0
    torso_ry: float = 26.0
    garment_w: float = 12.0
    garment_h: float = 16.0
    texture: str = "stripes"
    background: str = "gradient"

    @property
    def head_radius(self) -> float:
        return 0.45 * self.torso_rx

    @property
    def arm_width(self) -> float:
        return 0.35 * self.torso_rx

    @property
    def extent(self) -> float:
        """Radius of a circle around the figure centre that contains the whole figure."""
        reach_y = self.torso_ry + 2 * self.head_radius
        reach_x = 0.85 * self.torso_rx + self.arm_width
        return math.hypot(reach_x, reach_y)

    def validate(self) -> None:
        if self.texture not in TEXTURES:
            raise DataError(f"Unknown garment texture {self.texture!r}")
        if self.background not in BACKGROUNDS:
            raise DataError(f"Unknown background {self.background!r}")
        if self.frames < 1:
            raise DataError("A scene needs at least one frame")
        margin_x = self.width / 2 - self.amplitude_x - self.extent
        margin_y = self.height / 2 - self.amplitude_y - self.extent
        if margin_x < 0 or margin_y < 0:
            raise DataError(
                f"Figure of extent {self.extent:.1f}px leaves the "
                f"{self.width}x{self.height} frame (scene seed {self.seed})"
            )

    def serialize(self) -> Dict[str, Any]:
        return asdict(self)


def random_scene_spec(
    seed: int, height: int = 128, width: int = 128, frames: int = 48
) -> SyntheticSceneSpec:
    """Draw a valid scene description from `seed`."""
    rng = np.random.default_rng(seed)
    scale = min(height, width) / 128
    torso_rx = float(rng.uniform(13, 17) * scale)
    torso_ry = float(rng.uniform(22, 27) * scale)
    spec = SyntheticSceneSpec(
        seed=seed,
        height=height,
        width=width,
        frames=frames,
        torso_rx=torso_rx,
        torso_ry=torso_ry,
        garment_w=float(torso_rx * rng.uniform(0.6, 0.8)),
        garment_h=float(torso_ry * rng.uniform(0.5, 0.7)),
        frequency=float(rng.uniform(0.5, 2.0)),
        phase=float(rng.uniform(0, 2 * math.pi)),
        rotation=float(rng.uniform(0, 15)),
        texture=TEXTURES[int(rng.integers(len(TEXTURES)))],
        background=BACKGROUNDS[int(rng.integers(len(BACKGROUNDS)))],
        amplitude_y=float(rng.uniform(0, 4) * scale),
    )
    room = width / 2 - spec.extent - 1
    spec.amplitude_x = float(max(0.0, min(room, rng.uniform(4, 14) * scale)))
    spec.amplitude_y = float(max(0.0, min(height / 2 - spec.extent - 1, spec.amplitude_y)))
    spec.validate()
    return spec


@dataclass
class SceneRender:
    spec: SyntheticSceneSpec
    video: Tensor  # (F, H, W, 3)
    garment_mask: Tensor  # (F, H, W, 1) parsing mask of the garment region
    pose: Tensor  # (F, H, W, 3) colour-coded body parts
    silhouette: Tensor  # (F, H, W, 1)

    @property
    def frames(self) -> int:
        return self.video.shape[0]


@dataclass
class ConditioningTuple:
    """{x_a, d_p, m_c, c}: agnostic frames, pose maps, inpaint masks, garment image."""

    x_a: Tensor  # (f, H, W, 3)
    d_p: Tensor  # (f, H, W, 3)
    m_c: Tensor  # (f, H, W, 1)
    c: Tensor  # (1, H, W, 3)

    def __post_init__(self) -> None:
        frames = {self.x_a.shape[0], self.d_p.shape[0], self.m_c.shape[0]}
        if len(frames) != 1:
            raise ShapeError(f"Conditioning frame counts differ: {sorted(frames)}")
        if self.c.shape[0] != 1:
            raise ShapeError("Garment image must be a single frame")

    @property
    def frames(self) -> int:
        return self.x_a.shape[0]

    def select(self, indices: Sequence[int]) -> ConditioningTuple:
        idx = list(indices)
        return ConditioningTuple(self.x_a[idx], self.d_p[idx], self.m_c[idx], self.c)


@dataclass
class ClipSample:
    frames: VideoTensor
    cond: ConditioningTuple
    stride: int
    start: int

    @property
    def indices(self) -> List[int]:
        return [self.start + self.stride * i for i in range(self.frames.frames)]


def figure_path(spec: SyntheticSceneSpec, t: int) -> Tuple[float, float, float]:
    """Centre (x, y) in pixels and rotation in degrees of the figure at frame t."""
    angle = 2 * math.pi * spec.frequency * t / spec.frames + spec.phase
    cx = spec.width / 2 + spec.amplitude_x * math.sin(angle)
    cy = spec.height / 2 + spec.amplitude_y * math.sin(2 * angle)
    return cx, cy, spec.rotation * math.sin(angle)


@lru_cache(maxsize=8)
def _glyph_bitmap(width: int, height: int) -> Tensor:
    image = Image.new("L", (width, height), 0)
    draw = ImageDraw.Draw(image)
    font = ImageFont.load_default()
    left, top, right, bottom = draw.textbbox((0, 0), GLYPH_TEXT, font=font)
    x = (width - (right - left)) / 2 - left
    y = (height - (bottom - top)) / 2 - top
    draw.text((x, y), GLYPH_TEXT, fill=255, font=font)
    return torch.from_numpy(np.asarray(image, dtype=np.float32) / 255.0) > 0.5


def _palette(seed: int) -> Dict[str, Tensor]:
    rng = np.random.default_rng(seed + 7919)

    def colour() -> Tensor:
        return torch.tensor(rng.uniform(-0.9, 0.9, size=3), dtype=torch.float32)

    return {name: colour() for name in ("skin", "body", "primary", "secondary", "bg1", "bg2")}


def _background(
    spec: SyntheticSceneSpec, xs: Tensor, ys: Tensor, palette: Dict[str, Tensor]
) -> Tensor:
    if spec.background == "gradient":
        weight = (xs / spec.width)[..., None]
    elif spec.background == "stripes":
        weight = (torch.floor(xs / 8) % 2)[..., None]
    else:
        cell_x = xs % 16 - 8
        cell_y = ys % 16 - 8
        weight = ((cell_x ** 2 + cell_y ** 2) <= 9).float()[..., None]
    return palette["bg1"] * (1 - weight) + palette["bg2"] * weight


def _texture(spec: SyntheticSceneSpec, u: Tensor, v: Tensor) -> Tensor:
    if spec.texture == "stripes":
        return torch.floor(v / 3) % 2 == 1
    if spec.texture == "checker":
        return (torch.floor(u / 4) + torch.floor(v / 4)) % 2 == 1
    width = max(2, int(math.ceil(2 * spec.garment_w)))
    height = max(2, int(math.ceil(2 * spec.garment_h)))
    glyph = _glyph_bitmap(width, height)
    col = (u + spec.garment_w).floor().long().clamp(0, width - 1)
    row = (v + spec.garment_h).floor().long().clamp(0, height - 1)
    return glyph[row, col]


def render_scene(spec: SyntheticSceneSpec) -> SceneRender:
    """Render every frame of a scene with its parsing masks and pose maps."""
    spec.validate()
    palette = _palette(spec.seed)
    ys, xs = torch.meshgrid(
        torch.arange(spec.height, dtype=torch.float32) + 0.5,
        torch.arange(spec.width, dtype=torch.float32) + 0.5,
        indexing="ij",
    )
    background = _background(spec, xs, ys, palette)
    video, garments, poses, silhouettes = [], [], [], []
    for t in range(spec.frames):
        cx, cy, degrees = figure_path(spec, t)
        theta = math.radians(degrees)
        dx, dy = xs - cx, ys - cy
        u = math.cos(theta) * dx + math.sin(theta) * dy
        v = -math.sin(theta) * dx + math.cos(theta) * dy

        torso = (u / spec.torso_rx) ** 2 + (v / spec.torso_ry) ** 2 <= 1
        head_v = v + spec.torso_ry + 0.9 * spec.head_radius
        head = u ** 2 + head_v ** 2 <= spec.head_radius ** 2
        inner = 0.85 * spec.torso_rx
        arms = (u.abs() >= inner) & (u.abs() <= inner + spec.arm_width)
        arms &= v.abs() <= 0.75 * spec.torso_ry
        garment = torso & (u.abs() <= spec.garment_w) & (v.abs() <= spec.garment_h)

        frame = background.clone()
        frame[arms | head] = palette["skin"]
        frame[torso] = palette["body"]
        pattern = _texture(spec, u, v)
        frame[garment & ~pattern] = palette["primary"]
        frame[garment & pattern] = palette["secondary"]

        pose = torch.full_like(frame, -1.0)
        for name, part in (("arms", arms), ("head", head), ("torso", torso)):
            pose[part] = torch.tensor(POSE_COLOURS[name])

        video.append(frame)
        poses.append(pose)
        garments.append(garment.float()[..., None])
        silhouettes.append((torso | head | arms).float()[..., None])
    logger.debug("Rendered scene %s (%s frames)", spec.seed, spec.frames)
    return SceneRender(
        spec=spec,
        video=torch.stack(video),
        garment_mask=torch.stack(garments),
        pose=torch.stack(poses),
        silhouette=torch.stack(silhouettes),
    )


def dilate(mask: Tensor, radius: int = MASK_DILATION) -> Tensor:
    """Square dilation of (..., H, W, 1) binary masks."""
    if radius <= 0:
        return mask
    lead = mask.shape[:-3]
    flat = rearrange(mask.reshape(-1, *mask.shape[-3:]), "n h w c -> n c h w")
    grown = F.max_pool2d(flat, kernel_size=2 * radius + 1, stride=1, padding=radius)
    return rearrange(grown, "n c h w -> n h w c").reshape(*lead, *mask.shape[-3:])


def derive_agnostic(
    frame: Tensor, garment_mask: Tensor, radius: int = MASK_DILATION
) -> Tuple[Tensor, Tensor]:
    """
    Neutralize the garment region of `frame`.

    Returns x_a (masked region set to mid gray) and the inpaint mask m_c,
    which is the garment mask dilated by `radius` pixels.

    """
    if ((garment_mask != 0) & (garment_mask != 1)).any():
        raise DataError("Garment mask must be binary")
    x_a = torch.where(garment_mask.bool(), torch.full_like(frame, NEUTRAL), frame)
    return x_a, dilate(garment_mask, radius)


def garment_image(frame: Tensor, garment_mask: Tensor) -> Tensor:
    """Parsed garment of one (H, W, 3) frame on a neutral canvas, shape (1, H, W, 3)."""
    return torch.where(garment_mask.bool(), frame, torch.full_like(frame, NEUTRAL))[None]


def conditioning_for(
    scene: SceneRender, indices: Sequence[int], garment_index: int
) -> ConditioningTuple:
    idx = list(indices)
    x_a, m_c = derive_agnostic(scene.video[idx], scene.garment_mask[idx])
    c = garment_image(scene.video[garment_index], scene.garment_mask[garment_index])
    return ConditioningTuple(x_a=x_a, d_p=scene.pose[idx], m_c=m_c, c=c)


def sample_stride_clip(
    scene: SceneRender,
    f: int,
    stride_range: Tuple[int, int],
    rng: np.random.Generator,
) -> ClipSample:
    """
    Sample f frames with a random stride drawn uniformly from `stride_range`.

    The garment image is parsed from a random frame of the clip itself.

    """
    low, high = stride_range
    if low < 1 or high < low:
        raise ConfigError(f"Invalid stride range {stride_range}")
    total = scene.frames
    if total < high * (f - 1) + 1:
        raise DataError(
            f"Scene of {total} frames is too short for {f} frames at stride {high}"
        )
    stride = int(rng.integers(low, high + 1))
    start = int(rng.integers(0, total - stride * (f - 1)))
    indices = [start + stride * i for i in range(f)]
    garment_index = indices[int(rng.integers(f))]
    return ClipSample(
        frames=VideoTensor(scene.video[indices]),
        cond=conditioning_for(scene, indices, garment_index),
        stride=stride,
        start=start,
    )


def swap_indices(f: int, k: int, rng: np.random.Generator, contiguous: bool = False) -> List[int]:
    if not 0 <= k <= f:
        raise ConfigError(f"Cannot swap {k} of {f} frames")
    if contiguous:
        start = int(rng.integers(0, f - k + 1))
        return list(range(start, start + k))
    return sorted(int(i) for i in rng.choice(f, size=k, replace=False))


def random_swap(
    cond: ConditioningTuple,
    frames: Tensor,
    k: int,
    rng: np.random.Generator,
    contiguous: bool = False,
) -> Tuple[ConditioningTuple, ConditioningTuple]:
    """
    Swap the agnostic images of k random frames for their ground truth.

    Swapped frames get an all-zero inpaint mask. Returns the swapped tuple
    (ControlNet side) and the untouched original (denoiser side).

    """
    return apply_swap(cond, frames, swap_indices(cond.frames, k, rng, contiguous)), cond


def apply_swap(
    cond: ConditioningTuple, frames: Tensor, indices: Sequence[int]
) -> ConditioningTuple:
    """Copy of `cond` with ground-truth agnostic frames and zero masks at `indices`."""
    chosen = list(indices)
    x_a = cond.x_a.clone()
    m_c = cond.m_c.clone()
    if chosen:
        x_a[chosen] = frames[chosen].to(x_a)
        m_c[chosen] = 0.0
    return ConditioningTuple(x_a=x_a, d_p=cond.d_p, m_c=m_c, c=cond.c)


def sample_swap_count(f: int, rng: np.random.Generator, k_max: Optional[int] = None) -> int:
    """k ~ uniform{0, ..., min(k_max, floor(f / 3))}."""
    cap = f // 3 if k_max is None else min(k_max, f // 3)
    return int(rng.integers(0, max(cap, 0) + 1))


def rotate_and_scale(image: Tensor, degrees: float, scale: float) -> Tensor:
    """Rotate (..., H, W, C) images about their centre and zoom by `scale`, canvas kept."""
    height, width = image.shape[-3], image.shape[-2]
    lead = image.shape[:-3]
    flat = rearrange(image.reshape(-1, *image.shape[-3:]), "n h w c -> n c h w")
    a = math.radians(degrees)
    cos, sin = math.cos(a), math.sin(a)
    theta = torch.tensor(
        [[cos, sin * height / width, 0.0], [-sin * width / height, cos, 0.0]],
        dtype=flat.dtype,
    ) / scale
    grid = F.affine_grid(
        theta.expand(flat.shape[0], 2, 3), list(flat.shape), align_corners=False
    )
    out = F.grid_sample(
        flat, grid, mode="bilinear", padding_mode="reflection", align_corners=False
    )
    return rearrange(out, "n c h w -> n h w c").reshape(*lead, *image.shape[-3:])


def augment_garment(
    c: Tensor,
    rng: np.random.Generator,
    max_rotation: float = 15.0,
    scale_range: Tuple[float, float] = (0.8, 1.2),
) -> Tensor:
    """Random rotation in +-max_rotation degrees and isotropic resize, canvas preserved."""
    if c.numel() == 0:
        raise DataError("Garment image is empty")
    degrees = float(rng.uniform(-max_rotation, max_rotation))
    scale = float(rng.uniform(*scale_range))
    return rotate_and_scale(c, degrees, scale)
