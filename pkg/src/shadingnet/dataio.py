"""On-disk sample format: ``.f32`` float maps, 8-bit composite PNGs and the manifest."""
from __future__ import annotations

import json
import logging
import struct
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DataError, FormatError
from .scene import IntrinsicSample, random_scene, render

log = logging.getLogger(__name__)

F32_MAGIC = b"F32M"
_HEADER = struct.Struct("<4sIII")
TRAIN_FRACTION = 0.8


def write_f32(path, array: np.ndarray) -> None:
    a = np.asarray(array, dtype="<f4")
    if a.ndim == 2:
        a = a[None]
    if a.ndim != 3:
        raise ValueError(f"f32 maps are (C, H, W), got shape {a.shape}")
    c, h, w = a.shape
    with open(path, "wb") as f:
        f.write(_HEADER.pack(F32_MAGIC, c, h, w))
        f.write(np.ascontiguousarray(a).tobytes())


def read_f32(path) -> np.ndarray:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise DataError(f"cannot read {path}: {e}") from e
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: truncated header ({len(raw)} bytes)")
    magic, c, h, w = _HEADER.unpack_from(raw)
    if magic != F32_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {F32_MAGIC!r}")
    expected = _HEADER.size + 4 * c * h * w
    if len(raw) != expected:
        raise FormatError(f"{path}: payload has {len(raw)} bytes, header implies {expected}")
    return np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(c, h, w).astype(np.float32)


def to_uint8(image: np.ndarray) -> np.ndarray:
    """(C, H, W) float in [0, 1] -> (H, W, C) uint8, clipping out-of-range values."""
    img = np.clip(np.round(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    return img.transpose(1, 2, 0)


def write_png(path, image: np.ndarray) -> None:
    img = to_uint8(image)
    Image.fromarray(img[..., 0] if img.shape[2] == 1 else img).save(path)


def read_png(path) -> np.ndarray:
    """8-bit image file -> (3, H, W) float32 in [0, 1]."""
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    except (OSError, ValueError) as e:
        raise DataError(f"cannot read image {path}: {e}") from e
    return (arr / 255.0).transpose(2, 0, 1).copy()


def save_sample(sample: IntrinsicSample, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_png(directory / "composite.png", sample.composite)
    write_f32(directory / "composite.f32", sample.composite)
    for name in IntrinsicSample.MAPS:
        write_f32(directory / f"{name}.f32", getattr(sample, name))


def load_sample(directory, composite: str = "float") -> IntrinsicSample:
    """Load a sample directory; ``composite="png"`` reads the 8-bit composite instead."""
    directory = Path(directory)
    maps = {name: read_f32(directory / f"{name}.f32") for name in IntrinsicSample.MAPS}
    if composite == "png":
        comp = read_png(directory / "composite.png")
    else:
        comp = read_f32(directory / "composite.f32")
    return IntrinsicSample(composite=comp, **maps)


def sample_seed(dataset_seed: int, index: int) -> int:
    state = np.random.SeedSequence([dataset_seed & 0xFFFFFFFFFFFFFFFF, index]).generate_state(2)
    return int(state[0]) << 32 | int(state[1])


def split_tags(n: int, seed: int) -> list[str]:
    """Scene-level 80/20 train/test assignment, deterministic in ``seed``."""
    n_train = int(np.floor(TRAIN_FRACTION * n + 0.5))
    order = np.random.default_rng([seed & 0xFFFFFFFFFFFFFFFF, 0x5EED]).permutation(n)
    tags = ["test"] * n
    for i in order[:n_train]:
        tags[i] = "train"
    return tags


def generate_dataset(n: int, seed: int, resolution: tuple[int, int], out_dir) -> dict:
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        probe = out_dir / ".write_probe"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as e:
        raise DataError(f"cannot write dataset to {out_dir}: {e}") from e
    tags = split_tags(n, seed)
    entries = []
    for i in range(n):
        s = sample_seed(seed, i)
        name = f"sample_{i:06d}"
        save_sample(render(random_scene(s), resolution), out_dir / name)
        entries.append({"dir": name, "seed": s, "split": tags[i], "resolution": list(resolution)})
    manifest = {"dataset_seed": seed, "resolution": list(resolution), "samples": entries}
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2))
    log.info("wrote %d samples to %s", n, out_dir)
    return manifest


def read_manifest(dataset_dir) -> dict:
    path = Path(dataset_dir) / "manifest.json"
    try:
        return json.loads(path.read_text())
    except OSError as e:
        raise DataError(f"cannot read manifest {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise DataError(f"malformed manifest {path}: {e}") from e


def split_entries(manifest: dict, split: str) -> list[dict]:
    if split not in ("train", "test", "all"):
        raise ValueError(f"unknown split {split!r}")
    return [e for e in manifest["samples"] if split == "all" or e["split"] == split]
