"""Deterministic synthetic segmentation data and PPM/PGM/manifest file I/O.

Images are colored rectangles, circles and triangles on a weakly textured
gray background.  Every image is generated from its own rng stream keyed by
``(seed, image_id)``, so any subset of ids can be produced in any order (or in
parallel) with identical results.
"""

from __future__ import annotations

import itertools
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Iterator, Optional, Sequence

import numpy as np

IGNORE_INDEX = 255
PROBE_ID_OFFSET = 2_000_000
MAX_PLACEMENT_ATTEMPTS = 1000

_GRID = (0.1, 0.45, 0.8)
_BACKGROUND_COLOR = (0.45, 0.45, 0.45)
_TEXTURE_AMPLITUDE = 0.03


class FormatError(ValueError):
    pass


def palette(n_classes: int) -> np.ndarray:
    """RGB color per class: background at the grid center, then face centers,
    edge midpoints and corners of a 3x3x3 grid with spacing 0.35."""
    center = np.array(_BACKGROUND_COLOR)
    points = [np.array(p) for p in itertools.product(_GRID, repeat=3)]
    points = [p for p in points if not np.allclose(p, center)]
    # fewest off-center coordinates first: faces (1), edges (2), corners (3)
    points.sort(key=lambda p: (int(np.sum(~np.isclose(p, center))), tuple(-p)))
    if n_classes - 1 > len(points):
        raise ValueError(f"palette supports at most {len(points) + 1} classes, got {n_classes}")
    return np.vstack([center, *points[: n_classes - 1]])


@dataclass(frozen=True)
class SyntheticSpec:
    height: int = 32
    width: int = 32
    n_classes: int = 9
    min_shapes: int = 1
    max_shapes: int = 3
    min_pixels_per_shape: int = 16
    color_noise_sigma: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.height < 4 or self.width < 4:
            raise ValueError("images must be at least 4x4")
        if not 2 <= self.n_classes <= 27:
            raise ValueError(f"n_classes must lie in [2, 27], got {self.n_classes}")
        if not 1 <= self.min_shapes <= self.max_shapes:
            raise ValueError("need 1 <= min_shapes <= max_shapes")
        if self.color_noise_sigma < 0:
            raise ValueError("color_noise_sigma must be nonnegative")

    @property
    def shape_classes(self) -> list[int]:
        return list(range(1, self.n_classes))

    def min_color_separation(self) -> float:
        colors = palette(self.n_classes)
        diff = colors[:, None, :] - colors[None, :, :]
        dist = np.sqrt((diff**2).sum(-1))
        return float(dist[~np.eye(len(colors), dtype=bool)].min())

    def validate(self) -> None:
        """Check the color-separation invariant (>= 6 noise standard deviations)."""
        sep = self.min_color_separation()
        if sep < 6 * self.color_noise_sigma:
            raise ValueError(
                f"class colors separated by {sep:.3f} < 6 * color_noise_sigma = {6 * self.color_noise_sigma:.3f}"
            )


@dataclass(frozen=True, eq=False)
class LabeledImage:
    image: np.ndarray  # C x H x W, float64 in [0, 1]
    mask: np.ndarray  # H x W, int64 class indices or IGNORE_INDEX
    id: int

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[1:] != self.mask.shape:
            raise ValueError(f"image {self.image.shape} and mask {self.mask.shape} disagree")

    def with_mask(self, mask: np.ndarray) -> "LabeledImage":
        return LabeledImage(self.image, mask, self.id)

    def same_as(self, other: "LabeledImage") -> bool:
        return (
            self.id == other.id
            and np.array_equal(self.image, other.image)
            and np.array_equal(self.mask, other.mask)
        )


@dataclass(frozen=True, eq=False)
class SegDataset:
    items: tuple[LabeledImage, ...] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "items", tuple(self.items))

    def __len__(self) -> int:
        return len(self.items)

    def __iter__(self) -> Iterator[LabeledImage]:
        return iter(self.items)

    def __getitem__(self, i):
        if isinstance(i, slice):
            return SegDataset(self.items[i])
        return self.items[i]

    @property
    def ids(self) -> list[int]:
        return [it.id for it in self.items]

    def map_masks(self, fn: Callable[[np.ndarray], np.ndarray]) -> "SegDataset":
        return SegDataset(tuple(it.with_mask(fn(it.mask)) for it in self.items))

    def containing(self, cls: int) -> "SegDataset":
        return SegDataset(tuple(it for it in self.items if np.any(it.mask == cls)))

    def classes_present(self) -> set[int]:
        out: set[int] = set()
        for it in self.items:
            out.update(int(c) for c in np.unique(it.mask))
        return out

    def images(self) -> np.ndarray:
        return np.stack([it.image for it in self.items])

    def masks(self) -> np.ndarray:
        return np.stack([it.mask for it in self.items])

    def same_as(self, other: "SegDataset") -> bool:
        return len(self) == len(other) and all(a.same_as(b) for a, b in zip(self, other))


# -- generation ----------------------------------------------------------------

def _shape_pixels(kind: int, cy: float, cx: float, extent: float, rng, h: int, w: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    dy, dx = yy - cy, xx - cx
    if kind == 0:  # rectangle
        a, b = extent * rng.uniform(0.8, 1.2, size=2)
        return (np.abs(dy) <= a) & (np.abs(dx) <= b)
    if kind == 1:  # circle
        r = 1.1 * extent
        return dy**2 + dx**2 <= r**2
    # isosceles triangle, apex pointing in one of four directions
    half = 1.4 * extent
    k = int(rng.integers(4))
    along, across = [(dy, dx), (-dy, dx), (dx, dy), (-dx, dy)][k]
    t = (along + half) / (2 * half)  # 0 at apex, 1 at base
    return (t >= 0) & (t <= 1) & (np.abs(across) <= t * half)


def _background(spec: SyntheticSpec, rng) -> np.ndarray:
    h, w = spec.height, spec.width
    yy, xx = np.mgrid[0:h, 0:w]
    phase = rng.uniform(0, 2 * np.pi, size=3)
    period = rng.uniform(6.0, 12.0)
    tex = np.stack([np.sin(2 * np.pi * (xx + yy) / period + p) for p in phase])
    return np.asarray(_BACKGROUND_COLOR)[:, None, None] + _TEXTURE_AMPLITUDE * tex


def generate_image(spec: SyntheticSpec, image_id: int, allowed_classes: Iterable[int]) -> LabeledImage:
    allowed = sorted(set(int(c) for c in allowed_classes))
    if any(c < 1 or c >= spec.n_classes for c in allowed):
        raise ValueError(f"allowed classes {allowed} outside the declared shape classes 1..{spec.n_classes - 1}")
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, int(image_id)]))
    h, w = spec.height, spec.width
    colors = palette(spec.n_classes)
    mask = np.zeros((h, w), dtype=np.int64)
    n_shapes = int(rng.integers(spec.min_shapes, spec.max_shapes + 1)) if allowed else 0
    occupied = np.zeros((h, w), dtype=bool)
    attempts = 0
    for _ in range(n_shapes):
        cls = allowed[int(rng.integers(len(allowed)))]
        while True:
            attempts += 1
            if attempts > MAX_PLACEMENT_ATTEMPTS:
                raise RuntimeError(
                    f"image {image_id}: could not place shapes in {MAX_PLACEMENT_ATTEMPTS} attempts; spec over-constrained"
                )
            extent = rng.uniform(3.0, 6.0) * min(h, w) / 32.0
            cy, cx = rng.uniform(0, h - 1), rng.uniform(0, w - 1)
            pix = _shape_pixels(cls % 3, cy, cx, extent, rng, h, w)
            if pix.sum() >= spec.min_pixels_per_shape and not np.any(pix & occupied):
                break
        occupied |= pix
        mask[pix] = cls
    image = _background(spec, rng)
    for cls in np.unique(mask):
        if cls:
            image[:, mask == cls] = colors[cls][:, None]
    image = image + spec.color_noise_sigma * rng.standard_normal(image.shape)
    return LabeledImage(np.clip(image, 0.0, 1.0), mask, int(image_id))


def generate_dataset(
    spec: SyntheticSpec, n_images: int, allowed_classes: Iterable[int], start_id: int = 0
) -> SegDataset:
    allowed = list(allowed_classes)
    return SegDataset(tuple(generate_image(spec, start_id + i, allowed) for i in range(n_images)))


def class_separability_check(spec: SyntheticSpec, n_probe: int = 100, threshold: float = 0.99) -> bool:
    """True iff nearest-centroid on raw pixel colors reaches ``threshold`` accuracy."""
    probe = generate_dataset(spec, n_probe, spec.shape_classes, start_id=PROBE_ID_OFFSET)
    pixels = np.concatenate([it.image.reshape(3, -1).T for it in probe])
    labels = np.concatenate([it.mask.reshape(-1) for it in probe])
    present = np.unique(labels)
    centroids = np.stack([pixels[labels == c].mean(axis=0) for c in present])
    dist = ((pixels[:, None, :] - centroids[None, :, :]) ** 2).sum(-1)
    pred = present[dist.argmin(axis=1)]
    return float(np.mean(pred == labels)) >= threshold


def hflip(item: LabeledImage) -> LabeledImage:
    return LabeledImage(item.image[:, :, ::-1].copy(), item.mask[:, ::-1].copy(), item.id)


# -- file formats --------------------------------------------------------------

def _header_bytes(magic: bytes, width: int, height: int) -> bytes:
    return magic + b"\n" + f"{width} {height}\n255\n".encode("ascii")


def write_ppm(path, image: np.ndarray) -> None:
    """Binary P6, maxval 255; ``image`` is C x H x W with values in [0, 1]."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[0] != 3:
        raise ValueError(f"PPM needs a 3 x H x W image, got {image.shape}")
    q = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    _, h, w = q.shape
    Path(path).write_bytes(_header_bytes(b"P6", w, h) + q.transpose(1, 2, 0).tobytes())


def write_pgm(path, mask: np.ndarray) -> None:
    """Binary P5, maxval 255, raw class indices."""
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ValueError(f"PGM needs an H x W mask, got {mask.shape}")
    if mask.min(initial=0) < 0 or mask.max(initial=0) > 255:
        raise ValueError("mask values must fit in 8 bits")
    h, w = mask.shape
    Path(path).write_bytes(_header_bytes(b"P5", w, h) + mask.astype(np.uint8).tobytes())


_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def _parse_netpbm(buf: bytes, magic: bytes, channels: int, name: str) -> np.ndarray:
    if buf[:2] != magic:
        raise FormatError(f"{name}: expected magic {magic.decode()} at byte 0")
    pos = 2
    values = []
    for field_name in ("width", "height", "maxval"):
        m = _TOKEN.match(buf, pos)
        if m is None or not m.group(1).isdigit():
            raise FormatError(f"{name}: malformed {field_name} in header at byte {pos}")
        values.append(int(m.group(1)))
        pos = m.end()
    width, height, maxval = values
    if maxval != 255:
        raise FormatError(f"{name}: unsupported maxval {maxval} at byte {pos}; only 255 is accepted")
    if pos >= len(buf) or not buf[pos : pos + 1].isspace():
        raise FormatError(f"{name}: missing whitespace after header at byte {pos}")
    pos += 1
    need = width * height * channels
    if len(buf) - pos < need:
        raise FormatError(f"{name}: truncated payload at byte {len(buf)}; expected {need} bytes from byte {pos}")
    data = np.frombuffer(buf, dtype=np.uint8, count=need, offset=pos)
    return data.reshape(height, width, channels) if channels > 1 else data.reshape(height, width)


def read_ppm(path) -> np.ndarray:
    raw = _parse_netpbm(Path(path).read_bytes(), b"P6", 3, str(path))
    return raw.transpose(2, 0, 1).astype(np.float64) / 255.0


def read_pgm(path) -> np.ndarray:
    return _parse_netpbm(Path(path).read_bytes(), b"P5", 1, str(path)).astype(np.int64)


def quantize(image: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(image) * 255.0), 0, 255) / 255.0


def write_manifest(out_dir, dataset: SegDataset, name: str = "manifest.tsv") -> Path:
    """Materialize ``dataset`` as PPM/PGM files plus a tab-separated manifest."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    lines = []
    for item in dataset:
        img_rel = f"images/{item.id:07d}.ppm"
        mask_rel = f"masks/{item.id:07d}.pgm"
        write_ppm(out / img_rel, item.image)
        write_pgm(out / mask_rel, item.mask)
        lines.append(f"{item.id}\t{img_rel}\t{mask_rel}\n")
    path = out / name
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.writelines(lines)
    return path


def read_manifest(path) -> SegDataset:
    path = Path(path)
    items = []
    with open(path, encoding="utf-8", newline="") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise FormatError(f"{path}:{lineno}: expected 3 tab-separated fields, got {len(parts)}")
            image_id, img_rel, mask_rel = parts
            items.append(
                LabeledImage(read_ppm(path.parent / img_rel), read_pgm(path.parent / mask_rel), int(image_id))
            )
    return SegDataset(tuple(items))
