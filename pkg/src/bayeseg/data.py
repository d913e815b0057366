"""Synthetic dataset generation, image/mask loading, dataset and model persistence.

The synthetic generator is a desk-scale stand-in for annotated scans: each
sample is a textured background (base 0.2 plus Gaussian texture) carrying
one or two brighter elliptical blobs (+0.4), with the mask being the exact
union of the ellipse interiors. Datasets live on disk as images/ and masks/
directories of PGM files plus a manifest.json recording ids and split
assignment. Checkpoints are a manifest.json (architecture + tensor table)
next to a params.bin of concatenated serialized tensors; round-trips are
bit-exact.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .rng import RngStream
from .tensor import array_from_stream, array_to_bytes
from .unet import ArchConfig, ModelGraph, build_model

CHECKPOINT_VERSION = 1


class DataError(RuntimeError):
    """Dataset files missing, malformed or inconsistent."""


class CheckpointError(RuntimeError):
    """Checkpoint manifest/payload mismatch or unsupported version."""


@dataclass
class Sample:
    image: np.ndarray  # [1,H,W] float32 in [0,1]
    mask: np.ndarray   # [1,H,W] float32 in {0,1}
    id: str


@dataclass(frozen=True)
class SplitSpec:
    train: float = 0.70
    val: float = 0.10
    test: float = 0.20
    seed: int = 0

    def __post_init__(self):
        total = self.train + self.val + self.test
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"split fractions must sum to 1, got {total}")
        if min(self.train, self.val, self.test) < 0:
            raise ValueError("split fractions must be non-negative")


# ---- synthetic generator -----------------------------------------------------


@dataclass(frozen=True)
class Ellipse:
    cy: float
    cx: float
    a: float      # semi-axis along the rotated x direction
    b: float
    theta: float  # rotation in radians

    def contains(self, y: float, x: float) -> bool:
        dy, dx = y - self.cy, x - self.cx
        u = dx * math.cos(self.theta) + dy * math.sin(self.theta)
        v = -dx * math.sin(self.theta) + dy * math.cos(self.theta)
        return (u / self.a) ** 2 + (v / self.b) ** 2 <= 1.0


def draw_ellipses(rng: RngStream, size: int) -> list[Ellipse]:
    """1-2 random ellipses kept fully inside the frame.

    Axis ranges are chosen so the mask covers 1-30% of the pixels.
    """
    count = int(rng.integers(1, 3))
    ellipses = []
    for _ in range(count):
        a = float(rng.uniform(0.09, 0.16)) * size
        b = float(rng.uniform(0.09, 0.16)) * size
        cy = float(rng.uniform(0.22, 0.78)) * size
        cx = float(rng.uniform(0.22, 0.78)) * size
        theta = float(rng.uniform(0.0, math.pi))
        ellipses.append(Ellipse(cy=cy, cx=cx, a=a, b=b, theta=theta))
    return ellipses


def rasterize_ellipses(ellipses, size: int) -> np.ndarray:
    """Binary union of ellipse interiors on the pixel-center grid."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    mask = np.zeros((size, size), dtype=bool)
    for e in ellipses:
        dy, dx = yy - e.cy, xx - e.cx
        u = dx * math.cos(e.theta) + dy * math.sin(e.theta)
        v = -dx * math.sin(e.theta) + dy * math.cos(e.theta)
        mask |= (u / e.a) ** 2 + (v / e.b) ** 2 <= 1.0
    return mask


BACKGROUND_LEVEL = 0.2
BLOB_OFFSET = 0.4
TEXTURE_SIGMA = 0.05


def gen_synthetic(n: int, size: int, rng: RngStream) -> list[Sample]:
    """Deterministic synthetic segmentation pairs."""
    samples = []
    for i in range(n):
        sample_rng = rng.child((i + 1) << 8 | rng.stream_id)
        ellipses = draw_ellipses(sample_rng, size)
        mask = rasterize_ellipses(ellipses, size)
        texture = sample_rng.normal((size, size), dtype=np.float64) * TEXTURE_SIGMA
        image = BACKGROUND_LEVEL + texture + BLOB_OFFSET * mask
        image = np.clip(image, 0.0, 1.0)
        samples.append(Sample(image=image[None].astype(np.float32),
                              mask=mask[None].astype(np.float32),
                              id=f"synth-{i:05d}"))
    return samples


def split(samples, spec: SplitSpec):
    """Shuffle by seed and carve train/val/test; disjoint and exhaustive."""
    n = len(samples)
    n_train = round(spec.train * n)
    n_val = round(spec.val * n)
    n_test = n - n_train - n_val
    for name, count, frac in (("train", n_train, spec.train),
                              ("val", n_val, spec.val),
                              ("test", n_test, spec.test)):
        if frac > 0 and count < 1:
            raise DataError(f"{n} samples are too few for a non-empty {name} split")
    order = RngStream(spec.seed, stream_id=0xD5).permutation(n)
    shuffled = [samples[i] for i in order]
    return (shuffled[:n_train],
            shuffled[n_train:n_train + n_val],
            shuffled[n_train + n_val:])


# ---- image files ----------------------------------------------------------------


def write_pgm(path, image: np.ndarray):
    """8-bit binary PGM; float input in [0,1] is scaled, uint8 passes through."""
    arr = np.asarray(image)
    if arr.ndim == 3 and arr.shape[0] == 1:
        arr = arr[0]
    if arr.ndim != 2:
        raise DataError(f"PGM writer needs a 2D image, got shape {arr.shape}")
    if arr.dtype != np.uint8:
        arr = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(arr.tobytes())


def read_pgm(path) -> np.ndarray:
    """Read binary 8-bit PGM as uint8 [H,W]."""
    data = Path(path).read_bytes()
    m = re.match(rb"P5\s+(?:#[^\n]*\n\s*)*(\d+)\s+(\d+)\s+(\d+)\s", data)
    if not m:
        raise DataError(f"not a binary PGM file: {path}")
    w, h, maxval = (int(g) for g in m.groups())
    if maxval != 255:
        raise DataError(f"only 8-bit PGM supported, maxval={maxval} in {path}")
    pixels = np.frombuffer(data, dtype=np.uint8, count=w * h, offset=m.end())
    if pixels.size != w * h:
        raise DataError(f"truncated PGM payload in {path}")
    return pixels.reshape(h, w).copy()


def read_image(path) -> np.ndarray:
    """Load an 8-bit grayscale PGM or PNG as uint8 [H,W]."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"image file not found: {path}")
    if path.suffix.lower() == ".pgm":
        return read_pgm(path)
    if path.suffix.lower() == ".png":
        from PIL import Image
        with Image.open(path) as im:
            return np.asarray(im.convert("L"), dtype=np.uint8)
    raise DataError(f"unsupported image format: {path.suffix!r} (use .pgm or .png)")


def load_pair(image_path, mask_path) -> Sample:
    """Image scaled to [0,1]; mask binarized at 128."""
    img = read_image(image_path)
    msk = read_image(mask_path)
    if img.shape != msk.shape:
        raise DataError(
            f"image {img.shape} and mask {msk.shape} sizes differ "
            f"({image_path} / {mask_path})")
    image = (img.astype(np.float32) / 255.0)[None]
    mask = (msk >= 128).astype(np.float32)[None]
    return Sample(image=image, mask=mask, id=Path(image_path).stem)


# ---- dataset directories ------------------------------------------------------------


def save_dataset(root, splits: dict[str, list[Sample]]):
    """Write images/, masks/ and manifest.json under `root`."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    manifest = {"samples": []}
    for split_name, samples in splits.items():
        for s in samples:
            write_pgm(root / "images" / f"{s.id}.pgm", s.image)
            write_pgm(root / "masks" / f"{s.id}.pgm", s.mask)
            manifest["samples"].append({"id": s.id, "split": split_name})
    with open(root / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2)


def load_dataset(root) -> dict[str, list[Sample]]:
    root = Path(root)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise DataError(f"no dataset manifest at {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    splits: dict[str, list[Sample]] = {}
    for entry in manifest["samples"]:
        sid, split_name = entry["id"], entry["split"]
        sample = load_pair(root / "images" / f"{sid}.pgm", root / "masks" / f"{sid}.pgm")
        splits.setdefault(split_name, []).append(sample)
    return splits


# ---- single-array files ----------------------------------------------------------


def write_array(path, arr: np.ndarray):
    Path(path).write_bytes(array_to_bytes(np.asarray(arr)))


def read_array(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return array_from_stream(fh)


# ---- checkpoints ---------------------------------------------------------------------


def save_checkpoint(model: ModelGraph, directory):
    """manifest.json (arch + tensor table) and params.bin (serialized tensors)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    params = model.parameters()
    manifest = {
        "format_version": CHECKPOINT_VERSION,
        "arch": model.cfg.to_dict(),
        "tensors": [
            {"name": name, "shape": list(t.data.shape), "dtype": str(t.data.dtype)}
            for name, t in params.items()
        ],
    }
    with open(directory / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2)
    with open(directory / "params.bin", "wb") as fh:
        for t in params.values():
            fh.write(array_to_bytes(t.data))


def load_checkpoint(directory) -> ModelGraph:
    """Rebuild the model from its embedded config and restore parameters."""
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.exists():
        raise CheckpointError(f"no checkpoint manifest at {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"corrupt checkpoint manifest: {exc}") from exc
    version = manifest.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint version {version!r} (expected {CHECKPOINT_VERSION})")
    cfg = ArchConfig.from_dict(manifest["arch"])
    model = build_model(cfg)
    params = model.parameters()
    listed = [entry["name"] for entry in manifest["tensors"]]
    if set(listed) != set(params):
        missing = set(params) - set(listed)
        extra = set(listed) - set(params)
        raise CheckpointError(
            f"checkpoint tensors do not match architecture "
            f"(missing: {sorted(missing)}, unexpected: {sorted(extra)})")
    try:
        with open(directory / "params.bin", "rb") as fh:
            for entry in manifest["tensors"]:
                arr = array_from_stream(fh)
                expected = tuple(entry["shape"])
                if arr.shape != expected:
                    raise CheckpointError(
                        f"tensor {entry['name']!r} has shape {arr.shape}, "
                        f"manifest says {expected}")
                target = params[entry["name"]]
                if arr.shape != target.data.shape:
                    raise CheckpointError(
                        f"tensor {entry['name']!r} shape {arr.shape} does not fit "
                        f"model parameter {target.data.shape}")
                target.data = arr.astype(target.data.dtype, copy=True)
    except EOFError as exc:
        raise CheckpointError(f"corrupt checkpoint payload: {exc}") from exc
    except FileNotFoundError as exc:
        raise CheckpointError(f"missing checkpoint payload: {exc}") from exc
    return model
