"""Seeded synthetic images / volumes with ground-truth masks, and their on-disk format.

Every sample records the parameters of its shapes so the mask can be
re-derived independently with :func:`rasterize`.

On disk a dataset is a directory holding ``manifest.json``, ``images.bin``
(little-endian float32, (D, H, W, C) per sample) and ``masks.bin`` (one
bit-packed (D, H, W) mask per sample, padded to whole bytes); per-sample
byte offsets live in the manifest.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

FORMAT_VERSION = 1
KINDS = ("single", "multi", "pair", "drift3d")
MANIFEST = "manifest.json"
IMAGES = "images.bin"
MASKS = "masks.bin"
PAIR_ATTEMPTS = 20


@dataclass
class SyntheticSpec:
    kind: str = "multi"
    image_size: int = 64
    depth: int = 1
    count: int = 256
    seed: int = 0
    noise: float = 0.05
    contrast: float = 0.5
    low_contrast: bool = False
    min_radius: float = 6.0
    max_radius: float = 12.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown dataset kind {self.kind!r}; expected one of {KINDS}")
        if self.count < 1:
            raise ValueError("count must be at least 1")
        if self.image_size < 8 or self.depth < 1:
            raise ValueError("image_size must be >= 8 and depth >= 1")
        if self.kind == "drift3d" and self.depth < 2:
            raise ValueError("drift3d needs depth >= 2")
        if not 0 < self.min_radius <= self.max_radius:
            raise ValueError("need 0 < min_radius <= max_radius")

    @property
    def gap(self) -> float:
        return 0.1 if self.low_contrast else self.contrast


@dataclass
class Sample:
    image: np.ndarray  # (D, H, W, 1) float64, values exactly representable in float32
    mask: np.ndarray  # (D, H, W) bool
    objects: list[dict] = field(default_factory=list)
    target: int = 0
    seed: list[int] = field(default_factory=list)


# -- rasterization -------------------------------------------------------------------


def _grid(size: int) -> tuple[np.ndarray, np.ndarray]:
    r = np.arange(size, dtype=np.float64)
    return np.meshgrid(r, r, indexing="ij")


def _ellipse(rows, cols, center, axes, angle) -> np.ndarray:
    dr, dc = rows - center[0], cols - center[1]
    c, s = math.cos(angle), math.sin(angle)
    u = c * dr + s * dc
    v = -s * dr + c * dc
    return (u / axes[0]) ** 2 + (v / axes[1]) ** 2 <= 1.0


def _rect(rows, cols, center, half, angle) -> np.ndarray:
    dr, dc = rows - center[0], cols - center[1]
    c, s = math.cos(angle), math.sin(angle)
    u = c * dr + s * dc
    v = -s * dr + c * dc
    return (np.abs(u) <= half[0]) & (np.abs(v) <= half[1])


def rasterize_slice(obj: dict, size: int, d: int = 0) -> np.ndarray:
    """One object's footprint on slice ``d`` (pixel centres at integer coordinates)."""
    rows, cols = _grid(size)
    kind = obj["type"]
    if "slices" in obj and not (obj["slices"][0] <= d < obj["slices"][1]):
        return np.zeros((size, size), dtype=bool)
    if kind == "ellipse":
        return _ellipse(rows, cols, obj["center"], obj["axes"], obj["angle"])
    if kind == "rect":
        return _rect(rows, cols, obj["center"], obj["half"], obj["angle"])
    if kind == "blob":
        out = np.zeros((size, size), dtype=bool)
        for r, c, rad in obj["discs"]:
            out |= (rows - r) ** 2 + (cols - c) ** 2 <= rad * rad
        return out
    if kind == "tube":
        centre = np.asarray(obj["center"]) + d * np.asarray(obj["velocity"])
        return _ellipse(rows, cols, centre, obj["axes"], obj["angle"] + d * obj["spin"])
    raise ValueError(f"unknown object type {kind!r}")


def rasterize(obj: dict, size: int, depth: int) -> np.ndarray:
    return np.stack([rasterize_slice(obj, size, d) for d in range(depth)])


# -- generation ----------------------------------------------------------------------


def _random_shape(rng: np.random.Generator, spec: SyntheticSpec, kinds=("ellipse", "rect", "blob")) -> dict:
    size, rmin, rmax = spec.image_size, spec.min_radius, spec.max_radius
    kind = kinds[int(rng.integers(len(kinds)))]
    margin = rmax + 1
    center = [float(rng.uniform(margin, size - 1 - margin)), float(rng.uniform(margin, size - 1 - margin))]
    angle = float(rng.uniform(0, math.pi))
    if kind == "ellipse":
        return {"type": "ellipse", "center": center, "axes": [float(rng.uniform(rmin, rmax)), float(rng.uniform(rmin, rmax))], "angle": angle}
    if kind == "rect":
        lo = rmin * 0.8
        return {"type": "rect", "center": center, "half": [float(rng.uniform(lo, rmax * 0.8)), float(rng.uniform(lo, rmax * 0.8))], "angle": angle}
    discs = []
    for _ in range(3):
        rad = float(rng.uniform(rmin * 0.6, rmax * 0.6))
        off = rng.uniform(-rmax * 0.4, rmax * 0.4, size=2)
        discs.append([center[0] + float(off[0]), center[1] + float(off[1]), rad])
    return {"type": "blob", "center": center, "discs": discs}


def _tube(rng: np.random.Generator, spec: SyntheticSpec) -> dict:
    size, D = spec.image_size, spec.depth
    axes = [float(rng.uniform(spec.min_radius, spec.max_radius)) for _ in range(2)]
    margin = max(axes) + 1
    # drift of roughly one object diameter end to end, kept inside the grid
    drift = rng.uniform(0.8, 1.4) * 2 * max(axes)
    theta = rng.uniform(0, 2 * math.pi)
    total = np.array([math.cos(theta), math.sin(theta)]) * drift
    lo = np.maximum(margin, margin - total)
    hi = np.minimum(size - 1 - margin, size - 1 - margin - total)
    if np.any(lo > hi):
        total *= 0.5
        lo = np.maximum(margin, margin - total)
        hi = np.minimum(size - 1 - margin, size - 1 - margin - total)
    start = rng.uniform(lo, np.maximum(lo, hi))
    return {
        "type": "tube",
        "center": [float(start[0]), float(start[1])],
        "velocity": [float(total[0] / (D - 1)), float(total[1] / (D - 1))],
        "axes": axes,
        "angle": float(rng.uniform(0, math.pi)),
        "spin": float(rng.uniform(-0.2, 0.2)),
    }


def _place(rng, spec: SyntheticSpec, n: int, make, fixed: list[dict] | None = None, tries: int = 200) -> list[dict]:
    """Draw n objects whose footprints (dilated by 2 px) do not touch each other or ``fixed``."""
    placed = list(fixed or [])
    occupied = np.zeros((spec.depth, spec.image_size, spec.image_size), dtype=bool)
    for obj in placed:
        occupied |= rasterize(obj, spec.image_size, spec.depth)
    grow = ndimage.generate_binary_structure(3, 1)
    grow[0, :, :] = grow[2, :, :] = False
    out = []
    for _ in range(n):
        for _ in range(tries):
            obj = make(rng)
            m = rasterize(obj, spec.image_size, spec.depth)
            if not m.any():
                continue
            if not (ndimage.binary_dilation(m, grow, iterations=2) & occupied).any():
                occupied |= m
                out.append(obj)
                break
    return out


def _objects(rng: np.random.Generator, spec: SyntheticSpec) -> tuple[list[dict], int]:
    if spec.kind == "single":
        objs = _place(rng, spec, 1, lambda r: _random_shape(r, spec))
        return objs, 0
    if spec.kind == "pair":
        for _ in range(PAIR_ATTEMPTS):
            objs = _place(rng, spec, 2, lambda r: _random_shape(r, spec))
            if len(objs) == 2:
                return objs, int(rng.integers(2))
        raise ValueError(
            f"cannot fit two separated shapes of radius up to {spec.max_radius} in a {spec.image_size}px image"
        )
    if spec.kind == "multi":
        n = int(rng.integers(1, 4))
        objs = _place(rng, spec, n, lambda r: _random_shape(r, spec))
        return objs, int(rng.integers(len(objs)))
    # drift3d: one tube through every slice, distractors confined to single slices
    tube = _tube(rng, spec)
    D = spec.depth

    def distractor(r):
        obj = _random_shape(r, spec, kinds=("ellipse",))
        d = int(r.integers(D))
        obj["slices"] = [d, d + 1]
        return obj

    extra = _place(rng, spec, int(rng.integers(D // 2, D + 1)), distractor, fixed=[tube])
    return [tube] + extra, 0


def make_sample(spec: SyntheticSpec, index: int) -> Sample:
    seed = [int(spec.seed), int(index)]
    rng = np.random.default_rng(seed)
    objects, target = _objects(rng, spec)
    size, D = spec.image_size, spec.depth
    bg = rng.uniform(0.1, 0.3)
    image = np.full((D, size, size), bg)
    for obj in objects:
        image[rasterize(obj, size, D)] = bg + spec.gap
    image = image + rng.normal(0.0, spec.noise, size=image.shape)
    image = np.clip(image, 0.0, 1.0).astype(np.float32).astype(np.float64)
    mask = rasterize(objects[target], size, D)
    return Sample(image[..., None], mask, objects, target, seed)


def gen_dataset(spec: SyntheticSpec) -> list[Sample]:
    return [make_sample(spec, i) for i in range(spec.count)]


def split(dataset: list, train_fraction: float, seed) -> tuple[list, list]:
    """Seeded shuffle into disjoint train / test parts."""
    n = len(dataset)
    if not 0 < train_fraction < 1:
        raise ValueError(f"train_fraction must lie strictly between 0 and 1, got {train_fraction}")
    n_train = int(round(train_fraction * n))
    if n_train == 0 or n_train == n:
        raise ValueError(f"train_fraction {train_fraction} leaves an empty split for {n} samples")
    perm = np.random.default_rng(seed).permutation(n)
    return [dataset[i] for i in perm[:n_train]], [dataset[i] for i in perm[n_train:]]


# -- files ---------------------------------------------------------------------------


def write_dataset(path, samples: list[Sample], spec: SyntheticSpec | None = None) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    records = []
    img_off = mask_off = 0
    with open(path / IMAGES, "wb") as fi, open(path / MASKS, "wb") as fm:
        for s in samples:
            img = s.image.astype("<f4").tobytes()
            bits = np.packbits(s.mask.astype(np.uint8).ravel()).tobytes()
            fi.write(img)
            fm.write(bits)
            records.append(
                {
                    "seed": s.seed,
                    "target": s.target,
                    "objects": s.objects,
                    "image_shape": list(s.image.shape),
                    "image_offset": img_off,
                    "image_bytes": len(img),
                    "mask_shape": list(s.mask.shape),
                    "mask_offset": mask_off,
                    "mask_bytes": len(bits),
                }
            )
            img_off += len(img)
            mask_off += len(bits)
    manifest = {
        "format_version": FORMAT_VERSION,
        "spec": dataclasses.asdict(spec) if spec is not None else None,
        "samples": records,
    }
    (path / MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return path


def read_manifest(path) -> dict:
    path = Path(path)
    if not (path / MANIFEST).exists():
        raise FileNotFoundError(f"no dataset manifest at {path / MANIFEST}")
    manifest = json.loads((path / MANIFEST).read_text())
    if manifest.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported dataset format version {manifest.get('format_version')}")
    return manifest


def read_dataset(path) -> list[Sample]:
    path = Path(path)
    manifest = read_manifest(path)
    img_blob = (path / IMAGES).read_bytes()
    mask_blob = (path / MASKS).read_bytes()
    out = []
    for rec in manifest["samples"]:
        o, n = rec["image_offset"], rec["image_bytes"]
        image = np.frombuffer(img_blob[o : o + n], dtype="<f4").astype(np.float64).reshape(rec["image_shape"])
        o, n = rec["mask_offset"], rec["mask_bytes"]
        count = int(np.prod(rec["mask_shape"]))
        bits = np.unpackbits(np.frombuffer(mask_blob[o : o + n], dtype=np.uint8))[:count]
        mask = bits.astype(bool).reshape(rec["mask_shape"])
        out.append(Sample(image, mask, rec["objects"], rec["target"], rec["seed"]))
    return out
