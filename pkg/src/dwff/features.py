"""Frozen multi-level features and labels.

The real backbone is replaced by :class:`SurrogateBackbone`, a seeded stack of
fixed random maps where each deeper level sees one more 3x3 spatial averaging
pass.  Scenes are synthetic label maps with class-colored imagery.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor
from .tensorfile import read_tensor_file, write_tensor_file

# Row order of the habitat table; the index is the class id.
CLASSES: tuple[tuple[str, str], ...] = (
    ("Pf", "Paddy field"),
    ("Dl", "Dry land"),
    ("Wa", "Woody area"),
    ("Fb", "Forest belt"),
    ("Asg", "Arbor-shrub-grass compound land"),
    ("St", "Scattered trees"),
    ("Gb", "Grass belt"),
    ("Tf", "Tidal flats"),
    ("River", "River"),
    ("Water", "Water"),
    ("Pr", "Paved road"),
    ("Dr", "Dirt road"),
    ("Cl", "Construction land"),
    ("Ul", "Unused land"),
    ("Ridge", "Ridge"),
)
NUM_CLASSES = len(CLASSES)
ABBREV = tuple(a for a, _ in CLASSES)
CLASS_ID = {a: i for i, a in enumerate(ABBREV)}
DEFAULT_LAYER_IDS = (1, 8, 16, 24)

# Rough RGB look of each class (used only to paint synthetic scenes).
PALETTE = np.array(
    [
        [0.80, 0.65, 0.25],  # Pf golden rice
        [0.55, 0.45, 0.25],  # Dl
        [0.15, 0.35, 0.15],  # Wa
        [0.20, 0.45, 0.20],  # Fb
        [0.35, 0.50, 0.25],  # Asg
        [0.10, 0.30, 0.12],  # St
        [0.60, 0.65, 0.30],  # Gb
        [0.75, 0.75, 0.70],  # Tf
        [0.10, 0.15, 0.45],  # River
        [0.08, 0.12, 0.38],  # Water
        [0.90, 0.90, 0.90],  # Pr
        [0.70, 0.55, 0.40],  # Dr
        [0.55, 0.50, 0.55],  # Cl
        [0.65, 0.55, 0.35],  # Ul
        [0.72, 0.62, 0.48],  # Ridge
    ]
)

# Classes painted as thin strips rather than blobs.
LINEAR_CLASSES = frozenset({CLASS_ID[a] for a in ("Gb", "River", "Pr", "Dr", "Ridge", "Fb")})


class MissingLabelError(FileNotFoundError):
    pass


@dataclass
class FeatureStack:
    levels: list[Tensor]
    layer_ids: list[int] = field(default_factory=lambda: list(DEFAULT_LAYER_IDS))

    def __post_init__(self):
        if not self.levels:
            raise ValueError("feature stack needs at least one level")
        if len(self.levels) != len(self.layer_ids):
            raise ValueError(f"{len(self.levels)} levels but {len(self.layer_ids)} layer ids")
        shape = self.levels[0].shape
        if len(shape) != 4:
            raise ValueError(f"levels must be B x C x H x W, got {shape}")
        for lvl in self.levels:
            if lvl.shape != shape:
                raise ValueError(f"level shapes differ: {shape} vs {lvl.shape}")
        if any(b <= a for a, b in zip(self.layer_ids, self.layer_ids[1:])) or self.layer_ids[0] < 1:
            raise ValueError(f"layer ids must be positive and strictly increasing: {self.layer_ids}")

    @property
    def m(self) -> int:
        return len(self.levels)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.levels[0].shape


def check_labels(labels: np.ndarray, num_classes: int = NUM_CLASSES) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.dtype.kind not in "ui":
        raise ValueError(f"labels must be integers, got {labels.dtype}")
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(f"label ids must lie in [0, {num_classes})")
    return labels


def _smooth3(x: np.ndarray) -> np.ndarray:
    """One 3x3 box-average pass over the last two axes, edge-replicated."""
    pad = [(0, 0)] * (x.ndim - 2) + [(1, 1), (1, 1)]
    xp = np.pad(x, pad, mode="edge")
    h, w = x.shape[-2:]
    acc = np.zeros_like(x)
    for dy in range(3):
        for dx in range(3):
            acc += xp[..., dy : dy + h, dx : dx + w]
    return acc / 9.0


class SurrogateBackbone:
    """Frozen stand-in for a ViT feature extractor.

    Patches are embedded by a fixed linear map; level ``k`` (0-based) applies
    its own fixed 1x1 channel mixing, ``k`` box-average passes, then ``tanh``.
    """

    def __init__(self, seed: int, c_in: int = 32, patch: int = 4, n_levels: int = 4):
        self.seed = int(seed)
        self.c_in = c_in
        self.patch = patch
        self.n_levels = n_levels
        rng = np.random.default_rng([self.seed, 0x5EED])
        fan = 3 * patch * patch
        self.embed_w = rng.normal(0.0, 1.0 / np.sqrt(fan), size=(c_in, fan)) * 2.0
        self.embed_b = rng.normal(0.0, 0.2, size=c_in)
        self.mix_w = [rng.normal(0.0, 1.0 / np.sqrt(c_in), size=(c_in, c_in)) * 1.5 for _ in range(n_levels)]
        self.mix_b = [rng.normal(0.0, 0.3, size=c_in) for _ in range(n_levels)]

    def embed(self, image: np.ndarray) -> np.ndarray:
        b, c, h, w = image.shape
        p = self.patch
        if c != 3:
            raise ValueError(f"image must have 3 channels, got {c}")
        if h % p or w % p:
            raise ValueError(f"image size {h}x{w} not divisible by patch {p}")
        hp, wp = h // p, w // p
        patches = image.reshape(b, 3, hp, p, wp, p).transpose(0, 2, 4, 1, 3, 5).reshape(b, hp, wp, 3 * p * p)
        e = patches @ self.embed_w.T + self.embed_b
        return e.transpose(0, 3, 1, 2)

    def features(self, image, layer_ids=DEFAULT_LAYER_IDS) -> FeatureStack:
        image = image.data if isinstance(image, Tensor) else np.asarray(image, dtype=np.float64)
        if image.ndim == 3:
            image = image[None]
        layer_ids = list(layer_ids)
        if len(layer_ids) > self.n_levels:
            raise ValueError(f"backbone built for {self.n_levels} levels, asked for {len(layer_ids)}")
        base = self.embed(image)
        levels = []
        for k in range(len(layer_ids)):
            x = np.einsum("oc,bchw->bohw", self.mix_w[k], base) + self.mix_b[k][None, :, None, None]
            for _ in range(k):
                x = _smooth3(x)
            levels.append(Tensor(np.tanh(x)))
        return FeatureStack(levels, layer_ids)


def surrogate_features(backbone: SurrogateBackbone, image, layer_ids=DEFAULT_LAYER_IDS) -> FeatureStack:
    return backbone.features(image, layer_ids)


def _paint_blob(grid, rng, cid):
    h, w = grid.shape
    cy, cx = rng.uniform(0, h), rng.uniform(0, w)
    ry = rng.uniform(1.0, max(1.5, h / 3))
    rx = rng.uniform(1.0, max(1.5, w / 3))
    yy, xx = np.mgrid[0:h, 0:w]
    grid[((yy + 0.5 - cy) / ry) ** 2 + ((xx + 0.5 - cx) / rx) ** 2 <= 1.0] = cid


def _paint_strip(grid, rng, cid):
    h, w = grid.shape
    width = rng.integers(1, 3)
    yy, xx = np.mgrid[0:h, 0:w]
    angle = rng.uniform(0, np.pi)
    cy, cx = rng.uniform(0, h), rng.uniform(0, w)
    dist = np.abs((yy + 0.5 - cy) * np.cos(angle) - (xx + 0.5 - cx) * np.sin(angle))
    grid[dist < width / 2 + 0.25] = cid


def generate_scene(seed: int, h_p: int, w_p: int, class_count: int, patch: int = 4, noise: float = 0.12):
    """Synthetic scene with exactly ``class_count`` distinct class ids.

    Returns ``(image, labels)`` with image ``3 x (h_p*patch) x (w_p*patch)``
    float64 and labels ``h_p x w_p`` uint8.
    """
    if not 1 <= class_count <= NUM_CLASSES:
        raise ValueError(f"class_count must be in [1, {NUM_CLASSES}], got {class_count}")
    if h_p * w_p < class_count:
        raise ValueError(f"{h_p}x{w_p} grid cannot hold {class_count} classes")
    rng = np.random.default_rng([int(seed), 0x5CE4E])
    ids = rng.choice(NUM_CLASSES, size=class_count, replace=False)
    grid = np.full((h_p, w_p), ids[0], dtype=np.uint8)
    for cid in ids[1:]:
        if cid in LINEAR_CLASSES:
            _paint_strip(grid, rng, cid)
        else:
            _paint_blob(grid, rng, cid)
    while True:
        missing = [c for c in ids if not np.any(grid == c)]
        if not missing:
            break
        counts = np.bincount(grid.ravel(), minlength=NUM_CLASSES)
        donor = int(np.argmax(counts))
        ys, xs = np.nonzero(grid == donor)
        k = rng.integers(len(ys))
        grid[ys[k], xs[k]] = missing[0]
    colors = PALETTE[grid].transpose(2, 0, 1)
    image = np.repeat(np.repeat(colors, patch, axis=1), patch, axis=2)
    image = image + rng.normal(0.0, noise, size=image.shape)
    return image, grid


def split_dataset(n_items: int, ratio=(6, 1, 1), seed: int = 0):
    """Shuffle ``range(n_items)`` and cut it by ``ratio`` with largest-remainder rounding."""
    if n_items < 8:
        raise ValueError(f"need at least 8 items, got {n_items}")
    total = sum(ratio)
    exact = [n_items * r / total for r in ratio]
    sizes = [int(np.floor(e)) for e in exact]
    short = n_items - sum(sizes)
    order = sorted(range(len(ratio)), key=lambda i: (-(exact[i] - sizes[i]), i))
    for i in order[:short]:
        sizes[i] += 1
    perm = np.random.default_rng([int(seed), 0x5917]).permutation(n_items)
    out, start = [], 0
    for s in sizes:
        out.append(sorted(int(x) for x in perm[start : start + s]))
        start += s
    return tuple(out)


# ---------------------------------------------------------------------------
# On-disk dataset: <root>/<split>/<id>/level_<layer>.dwf and label.dwf
# ---------------------------------------------------------------------------

SPLITS = ("train", "val", "test")


def item_name(index: int) -> str:
    return f"s{index:05d}"


def write_item(root, split: str, name: str, stack: FeatureStack, labels: np.ndarray) -> None:
    """Write one image (batch index 0 of ``stack``) and its label map."""
    d = os.path.join(root, split, name)
    for lid, lvl in zip(stack.layer_ids, stack.levels):
        write_tensor_file(os.path.join(d, f"level_{lid}.dwf"), lvl.data[:1].astype(np.float32))
    write_tensor_file(os.path.join(d, "label.dwf"), labels.reshape(1, 1, *labels.shape).astype(np.uint8))


class SceneDataset:
    """Read-only view of one split of a generated dataset."""

    def __init__(self, root, split: str):
        self.root = os.fspath(root)
        self.split = split
        meta_path = os.path.join(self.root, "dataset.json")
        with open(meta_path) as fh:
            self.meta = json.load(fh)
        with open(os.path.join(self.root, f"{split}.txt")) as fh:
            self.ids = [line.strip() for line in fh if line.strip()]
        self.layer_ids = list(self.meta["layer_ids"])

    def __len__(self) -> int:
        return len(self.ids)

    def load(self, name: str) -> tuple[list[np.ndarray], np.ndarray]:
        d = os.path.join(self.root, self.split, name)
        label_path = os.path.join(d, "label.dwf")
        if not os.path.exists(label_path):
            raise MissingLabelError(f"missing label file {label_path}")
        levels = [
            read_tensor_file(os.path.join(d, f"level_{lid}.dwf"), dtype="<f4", ndim=4)[0].astype(np.float64)
            for lid in self.layer_ids
        ]
        labels = read_tensor_file(label_path, dtype="u1", ndim=4)[0, 0]
        return levels, labels

    def batch(self, names) -> tuple[FeatureStack, np.ndarray]:
        items = [self.load(n) for n in names]
        levels = [Tensor(np.stack([it[0][k] for it in items])) for k in range(len(self.layer_ids))]
        labels = np.stack([it[1] for it in items])
        return FeatureStack(levels, list(self.layer_ids)), labels
