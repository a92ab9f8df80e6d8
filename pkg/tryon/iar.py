"""
Long-video generation beyond the model's frame window.

Plain auto-regressive (AR) generation slides an L-frame window over the
video, re-using the last j generated frames of one window as conditions of
the next. Interpolated AR (IAR) first generates one key frame per sub-video
in a single strided pass, then fills the gaps the same way, substituting
key frames into the conditioning wherever a window reaches one.

Conditioning frames enter through the agnostic channel of the control
latent: the generated latent replaces z_a and the mask channel is zeroed,
which is what random-swap training prepares the ControlNet for.

"""
from __future__ import annotations

import enum
import logging
from dataclasses import dataclass
from typing import Any, Callable, Iterator, List, Optional, Tuple

import torch
from torch import Tensor

from .codec import LATENT_CHANNELS, VideoTensor
from .controlnet import MASK_CHANNEL, build_control_input
from .diffusion import DiffusionSchedule, sample_loop
from .exceptions import ConfigError, DataError, PlanError
from .scenes import ConditioningTuple

logger = logging.getLogger(__name__)

MODES = ("clip", "ar", "iar")


class FrameConditionSource(enum.Enum):
    # normal agnostic frame and mask; the frame is generated in this window
    AGNOSTIC = "A"
    # zero mask, a frame generated by an earlier window is the agnostic input
    PREVIOUS_OUTPUT = "P"
    # zero mask, a key frame is the agnostic input
    KEYFRAME = "K"


@dataclass(frozen=True)
class Iteration:
    start: int
    end: int
    sources: Tuple[FrameConditionSource, ...]

    @property
    def indices(self) -> List[int]:
        return list(range(self.start, self.end))

    @property
    def generated(self) -> List[int]:
        return [
            i
            for i, source in zip(self.indices, self.sources)
            if source is FrameConditionSource.AGNOSTIC
        ]

    @property
    def conditioned(self) -> List[int]:
        return [
            i
            for i, source in zip(self.indices, self.sources)
            if source is not FrameConditionSource.AGNOSTIC
        ]


@dataclass(frozen=True)
class IARPlan:
    f: int
    n: int
    L: int  # noqa: N815
    j: int
    keyframe_indices: Tuple[int, ...]
    iterations: Tuple[Iteration, ...]

    @property
    def has_keyframe_pass(self) -> bool:
        return bool(self.keyframe_indices)

    @property
    def passes(self) -> int:
        return int(self.has_keyframe_pass) + len(self.iterations)

    def generated_indices(self) -> List[int]:
        """Every frame index once per pass that writes it (key-frame pass first)."""
        produced = list(self.keyframe_indices)
        for iteration in self.iterations:
            produced.extend(iteration.generated)
        return produced

    def __iter__(self) -> Iterator[Iteration]:
        return iter(self.iterations)


def window_starts(f: int, L: int, j: int) -> List[int]:  # noqa: N803
    """Windows advance by L - j; the last one is right-aligned to end on frame f - 1."""
    starts = [0]
    while starts[-1] + L < f:
        starts.append(min(starts[-1] + L - j, f - L))
    return starts


def plan(f: int, n: int, L: int, j: int) -> IARPlan:  # noqa: N803
    """
    Lay out key frames and fill windows for an f-frame video.

    Key frames sit at floor(f * i / n) for i < n. With n = 1, or when the
    whole video fits into one window, there is no key-frame pass.

    """
    if f < 1:
        raise PlanError(f"Cannot plan a video of {f} frames")
    if not 1 <= n <= f:
        raise PlanError(f"Sub-video count {n} must lie within [1, {f}]")
    if L - j <= 0:
        raise PlanError(f"Window of {L} frames cannot advance with an overlap of {j}")
    if j < 0 or L > f:
        raise PlanError(f"Window {L} / overlap {j} do not fit a {f}-frame video")
    keyframes: Tuple[int, ...] = ()
    if n > 1 and f > L:
        keyframes = tuple(f * i // n for i in range(n))
    keyset = set(keyframes)
    produced = set(keyframes)
    iterations = []
    for start in window_starts(f, L, j):
        window = range(start, start + L)
        sources = []
        for i in window:
            if i in keyset:
                sources.append(FrameConditionSource.KEYFRAME)
            elif i in produced:
                sources.append(FrameConditionSource.PREVIOUS_OUTPUT)
            else:
                sources.append(FrameConditionSource.AGNOSTIC)
        produced.update(window)
        iteration = Iteration(start, start + L, tuple(sources))
        if iteration.generated:
            iterations.append(iteration)
    return IARPlan(f, n, L, j, keyframes, tuple(iterations))


def format_plan_table(plan_: IARPlan) -> str:
    """Plain-text table of passes, windows and per-frame condition tags."""
    lines = [
        f"# f={plan_.f} n={plan_.n} L={plan_.L} j={plan_.j}",
        "# tags: A=agnostic (generated) P=previous output K=key frame",
        f"{'pass':<6}{'window':<12}sources",
    ]
    if plan_.has_keyframe_pass:
        frames = " ".join(str(i) for i in plan_.keyframe_indices)
        lines.append(f"{'key':<6}{'-':<12}{frames}")
    for number, iteration in enumerate(plan_.iterations, start=1):
        window = f"[{iteration.start}, {iteration.end})"
        tags = " ".join(source.value for source in iteration.sources)
        lines.append(f"{number:<6}{window:<12}{tags}")
    return "\n".join(lines) + "\n"


def encode_conditions(cond: ConditioningTuple, model: Any) -> Tensor:
    """(f, h, w, 9) control latents of a conditioning tuple."""
    if getattr(model, "codec", None) is None:
        raise ConfigError("The model stack has no codec to encode conditions with")
    return build_control_input(cond, model.codec).data


def generate_keyframes(
    plan_: IARPlan,
    model: Any,
    control: Tensor,
    garment: Any,
    sched: DiffusionSchedule,
    rng: torch.Generator,
    mode: str = "ancestral",
) -> Tensor:
    """Generate the n key-frame latents jointly as one strided clip, (n, h, w, 4)."""
    indices = list(plan_.keyframe_indices)
    if not indices:
        raise PlanError("The plan has no key-frame pass")
    window = control[indices]
    shape = (1, len(indices), *window.shape[1:-1], LATENT_CHANNELS)
    logger.info("Key-frame pass over frames %s", indices)
    z = sample_loop(model.windowed(indices), shape, window[None], garment, sched, rng, mode)
    return z[0]


def ar_fill(
    plan_: IARPlan,
    keyframes: Optional[Tensor],
    model: Any,
    control: Tensor,
    garment: Any,
    sched: DiffusionSchedule,
    rng: torch.Generator,
    mode: str = "ancestral",
    on_iteration: Optional[Callable[[Iteration, Tensor], None]] = None,
) -> Tensor:
    """
    Run the fill windows of `plan_` and assemble all f latent frames, (f, h, w, 4).

    `on_iteration` sees every window with the control latents it is sampled from.

    """
    f = plan_.f
    if control.shape[0] < f:
        raise DataError(f"Conditions cover {control.shape[0]} frames, {f} are needed")
    out = torch.zeros(f, *control.shape[1:-1], LATENT_CHANNELS, dtype=control.dtype)
    produced = torch.zeros(f, dtype=torch.bool)
    if plan_.has_keyframe_pass:
        if keyframes is None or keyframes.shape[0] != len(plan_.keyframe_indices):
            raise PlanError("Key frames are required by the plan")
        idx = list(plan_.keyframe_indices)
        out[idx] = keyframes.to(out)
        produced[idx] = True
    for number, iteration in enumerate(plan_.iterations, start=1):
        window = control[iteration.start : iteration.end].clone()
        for pos, i in enumerate(iteration.indices):
            if iteration.sources[pos] is FrameConditionSource.AGNOSTIC:
                continue
            if not produced[i]:
                raise PlanError(f"Frame {i} is used as a condition before it was generated")
            window[pos, ..., :LATENT_CHANNELS] = out[i]
            window[pos, ..., MASK_CHANNEL] = 0.0
        if on_iteration is not None:
            on_iteration(iteration, window)
        logger.info(
            "Window %s/%s [%s, %s): %s generated, %s conditioned",
            number,
            len(plan_.iterations),
            iteration.start,
            iteration.end,
            len(iteration.generated),
            len(iteration.conditioned),
        )
        shape = (1, len(iteration.indices), *window.shape[1:-1], LATENT_CHANNELS)
        z = sample_loop(
            model.windowed(iteration.indices), shape, window[None], garment, sched, rng, mode
        )[0]
        for pos, i in enumerate(iteration.indices):
            if iteration.sources[pos] is FrameConditionSource.AGNOSTIC:
                out[i] = z[pos]
                produced[i] = True
    if not bool(produced.all()):
        missing = [i for i in range(f) if not produced[i]]
        raise PlanError(f"Frames {missing} were never generated")
    return out


@dataclass
class LongVideo:
    video: VideoTensor
    latents: Tensor
    plan: IARPlan


def plan_for_mode(mode: str, f: int, window: int, overlap: int, subvideos: int) -> IARPlan:
    """The plan a generation mode runs; the window is clamped to the video length."""
    if mode not in MODES:
        raise ConfigError(f"Unknown generation mode {mode!r}")
    length = min(window, f)
    # the overlap only shrinks along with a shortened window
    j = min(overlap, length - 1) if window > f else overlap
    if mode == "clip":
        if f > window:
            raise PlanError(f"Clip mode generates at most {window} frames, {f} requested")
        return plan(f, 1, f, 0)
    return plan(f, subvideos if mode == "iar" else 1, length, j)


def generate_long(
    mode: str,
    f: int,
    model: Any,
    cond: ConditioningTuple,
    sched: DiffusionSchedule,
    rng: torch.Generator,
    window: int = 12,
    overlap: int = 3,
    subvideos: int = 4,
    sampler: str = "ancestral",
    fps: float = 8.0,
    on_iteration: Optional[Callable[[Iteration, Tensor], None]] = None,
) -> LongVideo:
    """
    Generate f frames in "clip", "ar" or "iar" mode and decode them.

    AR is the IAR machinery with a single sub-video (no key frames).

    """
    if cond.frames < f:
        raise DataError(f"Conditions cover {cond.frames} frames, {f} were requested")
    plan_ = plan_for_mode(mode, f, window, overlap, subvideos)
    control = encode_conditions(cond.select(range(f)), model)
    garment_latent = model.codec.encode_tensor(cond.c)[None]
    garment = model.prepare_garment(garment_latent)
    keyframes = None
    if plan_.has_keyframe_pass:
        keyframes = generate_keyframes(plan_, model, control, garment, sched, rng, sampler)
    latents = ar_fill(
        plan_, keyframes, model, control, garment, sched, rng, sampler, on_iteration
    )
    video = VideoTensor(model.codec.decode_tensor(latents), fps=fps)
    logger.info("Generated %s frames in %s mode (%s passes)", f, mode, plan_.passes)
    return LongVideo(video=video, latents=latents, plan=plan_)


def generated_counts(plan_: IARPlan) -> List[int]:
    """How often every frame index is generated; all ones for a valid plan."""
    counts = [0] * plan_.f
    for i in plan_.generated_indices():
        counts[i] += 1
    return counts

