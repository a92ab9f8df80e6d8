"""
On-disk artifacts: array directories with JSON manifests, datasets, videos.

Every artifact directory is written atomically: the content goes into a
temporary sibling first and is renamed into place once complete.

"""
from __future__ import annotations

import contextlib
import csv
import json
import logging
import shutil
import tempfile
from pathlib import Path
from typing import Any, Dict, Iterator, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from PIL import Image
from torch import Tensor

from .exceptions import DataError
from .scenes import SceneRender, SyntheticSceneSpec

logger = logging.getLogger(__name__)

MANIFEST = "manifest.json"
DATASET_INDEX = "index.jsonl"
SCENE_ARRAYS = ("video", "garment_mask", "pose", "silhouette")

ArrayLike = Union[Tensor, np.ndarray]
PathLike = Union[str, Path]


def _numpy(array: ArrayLike) -> np.ndarray:
    if isinstance(array, Tensor):
        return array.detach().cpu().contiguous().numpy()
    return np.ascontiguousarray(array)


def write_json(path: PathLike, payload: Mapping[str, Any]) -> None:
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def read_json(path: PathLike) -> Dict[str, Any]:
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError as ex:
        raise DataError(f"Missing file {path}") from ex
    except json.JSONDecodeError as ex:
        raise DataError(f"Corrupt JSON in {path}: {ex}") from ex


@contextlib.contextmanager
def atomic_directory(target: PathLike, force: bool = False) -> Iterator[Path]:
    """
    Yield a scratch directory that replaces `target` when the block succeeds.

    An existing target is only replaced with `force`; on failure the scratch
    directory is removed and the target is left as it was.

    """
    target = Path(target)
    if target.exists() and not force:
        raise DataError(f"{target} already exists (use --force to replace it)")
    target.parent.mkdir(parents=True, exist_ok=True)
    scratch = Path(tempfile.mkdtemp(prefix=f".{target.name}-", dir=target.parent))
    try:
        yield scratch
    except BaseException:
        shutil.rmtree(scratch, ignore_errors=True)
        raise
    backup = None
    if target.exists():
        backup = target.with_name(f".{target.name}-old")
        shutil.rmtree(backup, ignore_errors=True)
        target.rename(backup)
    scratch.rename(target)
    if backup is not None:
        shutil.rmtree(backup, ignore_errors=True)
    logger.debug("Wrote %s", target)


def write_arrays(
    directory: PathLike, arrays: Mapping[str, ArrayLike], meta: Optional[Mapping[str, Any]] = None
) -> None:
    """
    Write `arrays` as .npy files (names may contain "/" for sub folders) plus a manifest.

    The manifest records shape and dtype per array next to `meta`.

    """
    directory = Path(directory)
    index = {}
    for name, array in arrays.items():
        data = _numpy(array)
        path = directory / f"{name}.npy"
        path.parent.mkdir(parents=True, exist_ok=True)
        np.save(path, data, allow_pickle=False)
        index[name] = {"shape": list(data.shape), "dtype": str(data.dtype)}
    write_json(directory / MANIFEST, {**(meta or {}), "arrays": index})


def read_arrays(directory: PathLike) -> Tuple[Dict[str, np.ndarray], Dict[str, Any]]:
    directory = Path(directory)
    manifest = read_json(directory / MANIFEST)
    arrays = {}
    for name, info in manifest.get("arrays", {}).items():
        path = directory / f"{name}.npy"
        if not path.exists():
            raise DataError(f"Array {name} listed in {directory / MANIFEST} is missing")
        arrays[name] = np.load(path, allow_pickle=False)
        if list(arrays[name].shape) != info["shape"]:
            raise DataError(
                f"Array {name} has shape {arrays[name].shape}, expected {info['shape']}"
            )
    return arrays, manifest


def save_arrays(
    target: PathLike,
    arrays: Mapping[str, ArrayLike],
    meta: Optional[Mapping[str, Any]] = None,
    force: bool = False,
) -> Path:
    with atomic_directory(target, force=force) as scratch:
        write_arrays(scratch, arrays, meta)
    return Path(target)


def write_dataset(
    target: PathLike, scenes: Sequence[SceneRender], config_hash: str, force: bool = False
) -> Path:
    """Persist rendered scenes under scene-NNNN/ folders with a JSON-lines index."""
    with atomic_directory(target, force=force) as scratch:
        records = []
        for i, scene in enumerate(scenes):
            folder = f"scene-{i:04d}"
            arrays = {name: getattr(scene, name) for name in SCENE_ARRAYS}
            write_arrays(scratch / folder, arrays, {"config_hash": config_hash})
            records.append(
                {"folder": folder, "config_hash": config_hash, "spec": scene.spec.serialize()}
            )
        with (scratch / DATASET_INDEX).open("w") as index:
            for record in records:
                index.write(json.dumps(record, sort_keys=True) + "\n")
    logger.info("Wrote %s scenes to %s", len(scenes), target)
    return Path(target)


def read_index(directory: PathLike) -> List[Dict[str, Any]]:
    path = Path(directory) / DATASET_INDEX
    if not path.exists():
        raise DataError(f"{directory} is not a scene dataset (no {DATASET_INDEX})")
    return [json.loads(line) for line in path.read_text().splitlines() if line.strip()]


def load_dataset(directory: PathLike) -> List[SceneRender]:
    scenes = []
    for record in read_index(directory):
        arrays, _ = read_arrays(Path(directory) / record["folder"])
        scenes.append(
            SceneRender(
                spec=SyntheticSceneSpec(**record["spec"]),
                **{name: torch.from_numpy(arrays[name]) for name in SCENE_ARRAYS},
            )
        )
    if not scenes:
        raise DataError(f"Dataset {directory} holds no scenes")
    return scenes


def to_frames(video: ArrayLike) -> List[Image.Image]:
    """(f, H, W, 3) values in [-1, 1] as 8-bit RGB images."""
    data = _numpy(video).astype(np.float32)
    pixels = np.clip(np.rint((data + 1.0) * 127.5), 0, 255).astype(np.uint8)
    return [Image.fromarray(frame) for frame in pixels]


def export_gif(video: ArrayLike, path: PathLike, fps: float = 8.0) -> Path:
    frames = to_frames(video)
    if not frames:
        raise DataError("Cannot export an empty video")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frames[0].save(
        path,
        save_all=True,
        append_images=frames[1:],
        duration=int(round(1000 / fps)),
        loop=0,
    )
    return path


def write_loss_history(path: PathLike, losses: Sequence[Tuple[int, float]]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "loss"])
        for step, loss in losses:
            writer.writerow([step, repr(float(loss))])
    return path


def read_loss_history(path: PathLike) -> List[Tuple[int, float]]:
    with Path(path).open(newline="") as fh:
        return [(int(row["step"]), float(row["loss"])) for row in csv.DictReader(fh)]


def load_clips(directory: PathLike, array: str = "video") -> Tuple[List[np.ndarray], List[str]]:
    """
    Read `array` from every clip folder below `directory` (sorted by name).

    Returns the clips and the config hashes recorded in their manifests.

    """
    root = Path(directory)
    folders = sorted(p.parent for p in root.glob(f"*/{MANIFEST}"))
    if not folders and (root / MANIFEST).exists():
        folders = [root]
    if not folders:
        raise DataError(f"No clips found in {root}")
    clips, hashes = [], []
    for folder in folders:
        arrays, manifest = read_arrays(folder)
        if array not in arrays:
            raise DataError(f"{folder} holds no {array!r} array")
        clips.append(arrays[array])
        hashes.append(manifest.get("config_hash") or "")
    return clips, hashes
