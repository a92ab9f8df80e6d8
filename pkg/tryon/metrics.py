"""
Evaluation metrics for generated clips.

SSIM, a feature-space perceptual distance and video Fréchet distance, with
pluggable seeded random-weight extractors. All metrics are pure functions
evaluated in float64.

"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Sequence, Type, Union

import numpy as np
import scipy.linalg
import torch
import torch.nn.functional as F
from einops import rearrange
from torch import Tensor, nn

from .exceptions import MetricError

logger = logging.getLogger(__name__)

ArrayLike = Union[Tensor, np.ndarray]

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
# pixel values span [-1, 1]
DATA_RANGE = 2.0
FRECHET_EPS = 1e-6
METRICS = ("ssim", "lpips", "vfid")


def _tensor(x: ArrayLike) -> Tensor:
    if isinstance(x, np.ndarray):
        x = torch.from_numpy(x)
    return x.detach().to(torch.float64)


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> Tensor:
    x = torch.arange(size, dtype=torch.float64) - (size - 1) / 2
    gauss = torch.exp(-(x ** 2) / (2 * sigma ** 2))
    gauss = gauss / gauss.sum()
    return torch.outer(gauss, gauss)


def ssim(a: ArrayLike, b: ArrayLike, data_range: float = DATA_RANGE) -> float:
    """
    Mean windowed SSIM of two (H, W) or (H, W, C) images; channels are averaged.

    Only windows that lie fully inside the image are used.

    """
    x, y = _tensor(a), _tensor(b)
    if x.shape != y.shape:
        raise MetricError(f"SSIM inputs differ in shape: {tuple(x.shape)} vs {tuple(y.shape)}")
    if x.dim() == 2:
        x, y = x[..., None], y[..., None]
    if x.dim() != 3:
        raise MetricError(f"SSIM expects (H, W) or (H, W, C) images, got {tuple(x.shape)}")
    height, width, channels = x.shape
    if height < SSIM_WINDOW or width < SSIM_WINDOW:
        raise MetricError(f"Images must be at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels")
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    window = gaussian_window().expand(channels, 1, SSIM_WINDOW, SSIM_WINDOW)
    x = rearrange(x, "h w c -> 1 c h w")
    y = rearrange(y, "h w c -> 1 c h w")

    def filt(z: Tensor) -> Tensor:
        return F.conv2d(z, window, groups=channels)

    mu1, mu2 = filt(x), filt(y)
    sigma1_sq = filt(x * x) - mu1 * mu1
    sigma2_sq = filt(y * y) - mu2 * mu2
    sigma12 = filt(x * y) - mu1 * mu2
    ssim_map = ((2 * mu1 * mu2 + c1) * (2 * sigma12 + c2)) / (
        (mu1 * mu1 + mu2 * mu2 + c1) * (sigma1_sq + sigma2_sq + c2)
    )
    return float(ssim_map.mean())


def video_ssim(a: ArrayLike, b: ArrayLike, data_range: float = DATA_RANGE) -> float:
    """SSIM averaged over the frames of two (f, H, W, C) videos."""
    x, y = _tensor(a), _tensor(b)
    if x.shape != y.shape:
        raise MetricError(f"Videos differ in shape: {tuple(x.shape)} vs {tuple(y.shape)}")
    return float(np.mean([ssim(x[i], y[i], data_range) for i in range(x.shape[0])]))


class FeatureExtractor:
    """Deterministic embedder of images (H, W, C) or videos (f, H, W, C) into D-vectors."""

    id: str = ""
    arity: str = "image"
    dim: int = 0

    def __init__(self, seed: int = 0):
        self.seed = seed

    def embed(self, x: ArrayLike) -> Tensor:
        raise NotImplementedError

    def check_arity(self, arity: str) -> None:
        if self.arity != arity:
            raise MetricError(f"Extractor {self.id!r} embeds {self.arity}s, not {arity}s")

    def __repr__(self) -> str:
        return f"<{type(self).__name__} id={self.id} seed={self.seed}>"


class LinearImageExtractor(FeatureExtractor):
    """A fixed Gaussian projection of the flattened image."""

    id = "linear-image"
    arity = "image"
    dim = 64

    def __init__(self, seed: int = 0):
        super().__init__(seed)
        self._weights: Dict[int, Tensor] = {}

    def weight(self, size: int) -> Tensor:
        if size not in self._weights:
            generator = torch.Generator().manual_seed(self.seed * 1_000_003 + size)
            w = torch.randn(self.dim, size, generator=generator, dtype=torch.float64)
            self._weights[size] = w / np.sqrt(size)
        return self._weights[size]

    def embed(self, x: ArrayLike) -> Tensor:
        flat = _tensor(x).reshape(-1)
        return self.weight(flat.numel()) @ flat


class _RandomConvExtractor(FeatureExtractor):
    """Seeded random-weight convolutions, ReLU, then mean and std pooling."""

    width = 16

    def __init__(self, seed: int = 0):
        super().__init__(seed)
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.net = self.build().double().eval()
        self.net.requires_grad_(False)

    def build(self) -> nn.Module:
        raise NotImplementedError

    def prepare(self, x: Tensor) -> Tensor:
        raise NotImplementedError

    @torch.no_grad()
    def embed(self, x: ArrayLike) -> Tensor:
        features = self.net(self.prepare(_tensor(x)))
        pooled = features.flatten(2)
        return torch.cat([pooled.mean(-1), pooled.std(-1, unbiased=False)], dim=-1)[0]


class Conv2dRandomExtractor(_RandomConvExtractor):
    id = "conv2d-random"
    arity = "image"
    dim = 2 * 2 * _RandomConvExtractor.width

    def build(self) -> nn.Module:
        w = self.width
        return nn.Sequential(
            nn.Conv2d(3, w, 3, stride=2, padding=1),
            nn.ReLU(),
            nn.Conv2d(w, 2 * w, 3, stride=2, padding=1),
            nn.ReLU(),
        )

    def prepare(self, x: Tensor) -> Tensor:
        if x.dim() != 3:
            raise MetricError(f"Expected an (H, W, C) image, got {tuple(x.shape)}")
        return rearrange(x, "h w c -> 1 c h w")


class Conv3dRandomExtractor(_RandomConvExtractor):
    """Embeds a whole clip at once, so features see motion as well as appearance."""

    id = "conv3d-random"
    arity = "video"
    dim = 2 * 2 * _RandomConvExtractor.width

    def build(self) -> nn.Module:
        w = self.width
        return nn.Sequential(
            nn.Conv3d(3, w, 3, stride=(1, 2, 2), padding=1),
            nn.ReLU(),
            nn.Conv3d(w, 2 * w, 3, stride=2, padding=1),
            nn.ReLU(),
        )

    def prepare(self, x: Tensor) -> Tensor:
        if x.dim() != 4:
            raise MetricError(f"Expected an (f, H, W, C) clip, got {tuple(x.shape)}")
        return rearrange(x, "f h w c -> 1 c f h w")


EXTRACTORS: Dict[str, Type[FeatureExtractor]] = {
    cls.id: cls for cls in (LinearImageExtractor, Conv2dRandomExtractor, Conv3dRandomExtractor)
}


def get_extractor(extractor_id: str, seed: int = 0) -> FeatureExtractor:
    try:
        return EXTRACTORS[extractor_id](seed)
    except KeyError:
        raise MetricError(
            f"Unknown extractor {extractor_id!r}; choose from {sorted(EXTRACTORS)}"
        ) from None


def perceptual_distance(a: ArrayLike, b: ArrayLike, extractor: FeatureExtractor) -> float:
    """||phi(a) - phi(b)||^2 / D for an image extractor phi."""
    extractor.check_arity("image")
    if tuple(a.shape) != tuple(b.shape):
        raise MetricError(f"Images differ in shape: {tuple(a.shape)} vs {tuple(b.shape)}")
    diff = extractor.embed(a) - extractor.embed(b)
    return float((diff * diff).sum() / diff.numel())


@dataclass
class GaussianStats:
    mean: np.ndarray
    cov: np.ndarray
    n: int

    def __post_init__(self) -> None:
        if self.n < 2:
            raise MetricError(f"Gaussian statistics need at least 2 samples, got {self.n}")
        dim = self.mean.shape[0]
        if self.cov.shape != (dim, dim):
            raise MetricError(f"Covariance {self.cov.shape} does not match mean of size {dim}")
        if not np.allclose(self.cov, self.cov.T, rtol=0, atol=1e-10):
            raise MetricError("Covariance is not symmetric")

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


def gaussian_stats(features: Union[Sequence[ArrayLike], np.ndarray]) -> GaussianStats:
    """Sample mean and unbiased covariance of n feature vectors."""
    rows = np.stack([_tensor(v).reshape(-1).numpy() for v in features]).astype(np.float64)
    if rows.shape[0] < 2:
        raise MetricError(f"Gaussian statistics need at least 2 samples, got {rows.shape[0]}")
    cov = np.cov(rows, rowvar=False, ddof=1).reshape(rows.shape[1], rows.shape[1])
    return GaussianStats(mean=rows.mean(axis=0), cov=(cov + cov.T) / 2, n=rows.shape[0])


def _psd_sqrt(matrix: np.ndarray) -> np.ndarray:
    values, vectors = scipy.linalg.eigh(matrix)
    return (vectors * np.sqrt(np.clip(values, 0, None))) @ vectors.T


def _trace_sqrt_product(cov1: np.ndarray, cov2: np.ndarray) -> float:
    """Tr((S1 S2)^(1/2)) through the symmetric form sqrt(S1) S2 sqrt(S1)."""
    root = _psd_sqrt(cov1)
    product = root @ cov2 @ root
    values = scipy.linalg.eigh((product + product.T) / 2, eigvals_only=True)
    if not np.all(np.isfinite(values)):
        raise np.linalg.LinAlgError("non-finite eigenvalues")
    values = np.clip(values, 0, None)
    # eigenvalues at round-off level belong to the null space
    values[values < values.max(initial=0.0) * len(values) * np.finfo(np.float64).eps] = 0.0
    return float(np.sqrt(values).sum())


def frechet_distance(s1: GaussianStats, s2: GaussianStats, eps: float = FRECHET_EPS) -> float:
    """||mu1 - mu2||^2 + Tr(S1 + S2 - 2 (S1 S2)^(1/2)), never negative."""
    if s1.dim != s2.dim:
        raise MetricError(f"Feature dimensions differ: {s1.dim} vs {s2.dim}")
    cov1, cov2 = s1.cov, s2.cov
    try:
        trace_sqrt = _trace_sqrt_product(cov1, cov2)
    except (np.linalg.LinAlgError, ValueError):
        logger.warning("Matrix square root failed, retrying with %s jitter", eps)
        jitter = eps * np.eye(s1.dim)
        cov1, cov2 = cov1 + jitter, cov2 + jitter
        try:
            trace_sqrt = _trace_sqrt_product(cov1, cov2)
        except (np.linalg.LinAlgError, ValueError) as ex:
            raise MetricError(f"Matrix square root did not converge: {ex}") from ex
    diff = s1.mean - s2.mean
    value = float(diff @ diff + np.trace(cov1) + np.trace(cov2) - 2 * trace_sqrt)
    if value < 0:
        if value < -eps * max(1.0, float(np.trace(cov1) + np.trace(cov2))):
            raise MetricError(f"Fréchet distance is negative ({value})")
        value = 0.0
    return value


def embed_all(items: Sequence[ArrayLike], extractor: FeatureExtractor) -> List[Tensor]:
    return [extractor.embed(item) for item in items]


def vfid(
    real: Sequence[ArrayLike], generated: Sequence[ArrayLike], extractor: FeatureExtractor
) -> float:
    """Fréchet distance between whole-clip embeddings of two clip sets."""
    extractor.check_arity("video")
    if len(real) < 2 or len(generated) < 2:
        raise MetricError(
            f"VFID needs at least 2 clips per side, got {len(real)} / {len(generated)}"
        )
    shapes = {tuple(clip.shape) for clip in list(real) + list(generated)}
    if len(shapes) != 1:
        raise MetricError(f"Clips differ in shape: {sorted(shapes)}")
    s_real = gaussian_stats(embed_all(real, extractor))
    s_gen = gaussian_stats(embed_all(generated, extractor))
    return frechet_distance(s_real, s_gen)


def evaluate(
    real: Sequence[ArrayLike],
    generated: Sequence[ArrayLike],
    metrics: Sequence[str] = METRICS,
    extractor: str = "conv3d-random",
    image_extractor: str = "conv2d-random",
    seed: int = 0,
    config_hash: Optional[str] = None,
) -> Dict[str, Any]:
    """
    Compute the requested metrics over paired clip lists and return a report.

    SSIM and perceptual distance compare clip i of `real` with clip i of
    `generated` frame by frame; VFID compares the two sets.

    """
    unknown = set(metrics) - set(METRICS)
    if unknown:
        raise MetricError(f"Unknown metrics {sorted(unknown)}")
    paired = {"ssim", "lpips"} & set(metrics)
    if paired and len(real) != len(generated):
        raise MetricError(f"{sorted(paired)} need paired clips, got {len(real)} / {len(generated)}")
    values: Dict[str, float] = {}
    if "ssim" in metrics:
        values["ssim"] = float(np.mean([video_ssim(a, b) for a, b in zip(real, generated)]))
    if "lpips" in metrics:
        phi = get_extractor(image_extractor, seed)
        values["lpips"] = float(
            np.mean(
                [
                    perceptual_distance(a[i], b[i], phi)
                    for a, b in zip(real, generated)
                    for i in range(a.shape[0])
                ]
            )
        )
    if "vfid" in metrics:
        values["vfid"] = vfid(real, generated, get_extractor(extractor, seed))
    logger.info("Evaluation: %s", ", ".join(f"{k}={v:.6f}" for k, v in values.items()))
    return {
        "metrics": values,
        "extractor": extractor,
        "image_extractor": image_extractor,
        "extractor_seed": seed,
        "real_clips": len(real),
        "generated_clips": len(generated),
        "vfid_convention": "one embedding per whole clip",
        "config_hash": config_hash,
    }
