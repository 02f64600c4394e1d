"""Synthetic registered visible/thermal scene pairs with dot annotations.

People render as bright Gaussian blobs in the thermal channel and as
low-contrast blobs over textured clutter in the visible channel; dark
illumination dims the visible channel only, so the thermal statistics stay
illumination-invariant.  Scenes are written in a dataset layout of
``root/{split}/{rgb,tir,gt}`` with one PNG pair plus one annotation JSON per
scene and a per-split ``metadata.json`` sidecar.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .density import DotAnnotations, load_annotations, save_annotations
from .tensor import Tensor

logger = logging.getLogger(__name__)

# Density-level thresholds shared with the evaluation report.
LOW_DENSITY_MAX = 50
MEDIUM_DENSITY_MAX = 150

ILLUMINATIONS = ("light", "dark_and_dust")
SUBDIRS = ("rgb", "tir", "gt")
DARK_VISIBLE_SCALE = 0.3
PEOPLE_AREA_CAP = 0.25  # max people per usable pixel


def density_level(n_people: int) -> str:
    if n_people < LOW_DENSITY_MAX:
        return "low"
    if n_people <= MEDIUM_DENSITY_MAX:
        return "medium"
    return "high"


@dataclass
class SceneSpec:
    """Recipe for one synthetic scene."""

    image_size: tuple[int, int] = (64, 64)  # (H, W)
    n_people: int = 12
    illumination: str = "light"
    cluster_count: int = 2
    spread: float = 6.0
    seed: int = 0
    border_margin: float = 6.0

    def __post_init__(self):
        if self.illumination not in ILLUMINATIONS:
            raise ValueError(
                f"illumination must be one of {ILLUMINATIONS}, got {self.illumination!r}")
        h, w = self.image_size
        usable = max(0.0, (h - 2 * self.border_margin)) * max(0.0, (w - 2 * self.border_margin))
        if self.n_people > PEOPLE_AREA_CAP * usable:
            raise ValueError(
                f"n_people={self.n_people} exceeds capacity of a {h}x{w} scene "
                f"with margin {self.border_margin}")


@dataclass
class ImagePair:
    """Registered visible + thermal images with their annotations."""

    visible: Tensor  # [1, H, W] in [0, 1]
    thermal: Tensor  # [1, H, W] in [0, 1]
    dots: DotAnnotations
    image_id: str = ""


@dataclass
class DatasetEntry:
    visible_path: Path
    thermal_path: Path
    annotation_path: Path
    metadata: dict


@dataclass
class DatasetIndex:
    split: str
    entries: list[DatasetEntry] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)


def _smooth_noise(rng: np.random.Generator, size: tuple[int, int], cells: int = 8) -> np.ndarray:
    """Low-frequency texture: a coarse random grid blown up to image size."""
    h, w = size
    coarse = rng.uniform(size=(cells, cells))
    reps = (math.ceil(h / cells), math.ceil(w / cells))
    field_ = np.kron(coarse, np.ones(reps))[:h, :w]
    # One box-blur pass softens the cell edges.
    padded = np.pad(field_, 1, mode="edge")
    return (padded[:-2, 1:-1] + padded[2:, 1:-1] + padded[1:-1, :-2]
            + padded[1:-1, 2:] + padded[1:-1, 1:-1]) / 5.0


def _splat_blobs(canvas: np.ndarray, points: list[tuple[float, float]],
                 amplitude: float, sigma: float) -> None:
    h, w = canvas.shape
    radius = int(math.ceil(3 * sigma))
    for x, y in points:
        r0, c0 = int(math.floor(y)) - radius, int(math.floor(x)) - radius
        rows = np.arange(r0, r0 + 2 * radius + 1, dtype=np.float64)
        cols = np.arange(c0, c0 + 2 * radius + 1, dtype=np.float64)
        blob = amplitude * np.exp(-((rows[:, None] - y) ** 2 + (cols[None, :] - x) ** 2)
                                  / (2 * sigma * sigma))
        rr0, rr1 = max(0, r0), min(h, r0 + 2 * radius + 1)
        cc0, cc1 = max(0, c0), min(w, c0 + 2 * radius + 1)
        canvas[rr0:rr1, cc0:cc1] += blob[rr0 - r0:rr1 - r0, cc0 - c0:cc1 - c0]


def _sample_positions(rng: np.random.Generator, spec: SceneSpec) -> list[tuple[float, float]]:
    h, w = spec.image_size
    m = spec.border_margin
    centers = [(rng.uniform(m, w - m), rng.uniform(m, h - m))
               for _ in range(max(1, spec.cluster_count))]
    points = []
    while len(points) < spec.n_people:
        cx, cy = centers[rng.integers(len(centers))]
        x = cx + rng.normal(0.0, spec.spread)
        y = cy + rng.normal(0.0, spec.spread)
        if m <= x < w - m and m <= y < h - m:
            points.append((float(x), float(y)))
    return points


def generate_scene(spec: SceneSpec) -> ImagePair:
    """Render one scene; identical bytes for identical specs.

    The rng stream is consumed in a fixed order (positions, thermal,
    visible) and the illumination dimming touches only the finished visible
    channel, so light and dark variants of one seed share thermal output.
    """
    rng = np.random.default_rng(spec.seed)
    h, w = spec.image_size
    points = _sample_positions(rng, spec)

    thermal = 0.12 + 0.05 * _smooth_noise(rng, (h, w))
    _splat_blobs(thermal, points, amplitude=0.75, sigma=1.8)
    thermal = np.clip(thermal, 0.0, 1.0)

    visible = 0.35 + 0.3 * _smooth_noise(rng, (h, w), cells=6)
    # Clutter patches: road/tree analogues the counting net must ignore.
    for _ in range(4):
        px, py = rng.integers(0, w - 8), rng.integers(0, h - 8)
        pw, ph = rng.integers(6, 16), rng.integers(6, 16)
        visible[py:py + ph, px:px + pw] += rng.uniform(-0.2, 0.2)
    _splat_blobs(visible, points, amplitude=0.12, sigma=1.8)
    if spec.illumination == "dark_and_dust":
        visible = visible * DARK_VISIBLE_SCALE
    visible = np.clip(visible, 0.0, 1.0)

    dots = DotAnnotations(points=points, image_size=(h, w))
    return ImagePair(visible=Tensor(visible[None]), thermal=Tensor(thermal[None]),
                     dots=dots, image_id=f"scene_{spec.seed:05d}")


def _to_png(path: Path, image: Tensor) -> None:
    arr = np.clip(image.data[0] * 255.0, 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(path)


def load_image(path: str | Path) -> Tensor:
    """Read a PNG as [1, H, W] in [0, 1]; RGB inputs collapse to luminance."""
    img = Image.open(path)
    if img.mode != "L":
        img = img.convert("L")
    return Tensor(np.asarray(img, dtype=np.float64)[None] / 255.0)


def write_scene(root: str | Path, split: str, pair: ImagePair, metadata: dict) -> None:
    root = Path(root)
    for sub in SUBDIRS:
        (root / split / sub).mkdir(parents=True, exist_ok=True)
    stem = pair.image_id
    _to_png(root / split / "rgb" / f"{stem}.png", pair.visible)
    _to_png(root / split / "tir" / f"{stem}.png", pair.thermal)
    save_annotations(root / split / "gt" / f"{stem}.json", pair.dots)

    meta_path = root / split / "metadata.json"
    table = json.loads(meta_path.read_text()) if meta_path.exists() else {}
    table[stem] = metadata
    meta_path.write_text(json.dumps(table, sort_keys=True, indent=1))


def generate_dataset(root: str | Path, split: str, count: int, seed: int,
                     image_size: tuple[int, int] = (64, 64),
                     people_range: tuple[int, int] = (4, 24),
                     dark_fraction: float = 0.5) -> list[ImagePair]:
    """Write ``count`` scenes with mixed illumination and density tags."""
    pairs = []
    for i in range(count):
        scene_seed = seed + i
        picker = np.random.default_rng((seed, i))
        n_people = int(picker.integers(people_range[0], people_range[1] + 1))
        illumination = "dark_and_dust" if picker.random() < dark_fraction else "light"
        spec = SceneSpec(image_size=image_size, n_people=n_people,
                         illumination=illumination, seed=scene_seed,
                         cluster_count=int(picker.integers(1, 4)))
        pair = generate_scene(spec)
        write_scene(root, split, pair, metadata={
            "illumination": illumination,
            "density_level": density_level(n_people),
            "n_people": n_people,
            "seed": scene_seed,
        })
        pairs.append(pair)
    return pairs


def load_dataset(root: str | Path, split: str) -> DatasetIndex:
    """Index a split directory, validating that every stem is complete."""
    root = Path(root)
    base = root / split
    index = DatasetIndex(split=split)
    if not base.exists():
        raise FileNotFoundError(f"dataset split directory not found: {base}")

    stems = {p.stem for sub in SUBDIRS for p in (base / sub).glob("*") if p.is_file()}
    if not stems:
        logger.warning("dataset split %s at %s is empty", split, base)
        return index

    meta_path = base / "metadata.json"
    metadata = json.loads(meta_path.read_text()) if meta_path.exists() else {}

    for stem in sorted(stems):
        visible = base / "rgb" / f"{stem}.png"
        thermal = base / "tir" / f"{stem}.png"
        annotation = base / "gt" / f"{stem}.json"
        for path, kind in ((visible, "rgb"), (thermal, "tir"), (annotation, "gt")):
            if not path.exists():
                raise FileNotFoundError(
                    f"scene '{stem}' is missing its {kind} file: {path}")
        # Validate the annotation parses before accepting the entry.
        with Image.open(visible) as img:
            w, h = img.size
        dots = load_annotations(annotation, (h, w))
        entry_meta = metadata.get(stem, {})
        tagged_level = entry_meta.get("density_level")
        if tagged_level is not None and tagged_level != density_level(len(dots)):
            raise ValueError(
                f"scene '{stem}' is tagged {tagged_level!r} but has "
                f"{len(dots)} annotations ({density_level(len(dots))})")
        index.entries.append(DatasetEntry(
            visible_path=visible, thermal_path=thermal, annotation_path=annotation,
            metadata=entry_meta))
    return index


def load_pair(entry: DatasetEntry) -> ImagePair:
    visible = load_image(entry.visible_path)
    thermal = load_image(entry.thermal_path)
    h, w = visible.shape[1:]
    dots = load_annotations(entry.annotation_path, (h, w))
    return ImagePair(visible=visible, thermal=thermal, dots=dots,
                     image_id=entry.visible_path.stem)
