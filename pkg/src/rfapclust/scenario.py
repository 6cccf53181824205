"""Occupancy-grid scenario tensors: rasterisation, synthetic highway scenes,
temporal shuffling, augmentation, stratified splits and persistence.

A scenario tensor is a float array of shape ``(n_timesteps, rows, cols)``,
frames outermost and oldest first.  Rows run across the road (row 0 is the
leftmost strip, lateral coordinate positive to the left of the ego) and
columns run along it (column 0 is the rearmost strip).
"""
from __future__ import annotations

import itertools
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, DataError

FREE, UNKNOWN, OCCUPIED = 0.0, 0.5, 1.0

CLASS_NAMES = (
    "ego_lane_change_right",
    "ego_lane_change_left",
    "cut_in_from_left",
    "leader_cut_out_left",
    "cut_in_from_right",
    "following",
    "leader_cut_out_right",
)


@dataclass(frozen=True)
class GridConfig:
    """Grid geometry.  ``cell_width`` is lateral, ``cell_length`` longitudinal.

    The ego (at t0) sits laterally in the middle of the grid and
    ``rear_range`` metres in front of the rear edge.
    """

    rows: int = 16
    cols: int = 64
    cell_width: float = 1.0
    cell_length: float = 2.5
    n_timesteps: int = 4
    dt: float = 0.5
    rear_range: float = 55.0

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise ConfigError(f"grid needs at least one cell, got {self.rows}x{self.cols}")
        if self.n_timesteps < 2:
            raise ConfigError(f"n_timesteps must be >= 2, got {self.n_timesteps}")
        for name in ("cell_width", "cell_length", "dt"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if not 0 <= self.rear_range <= self.span_longitudinal:
            raise ConfigError("rear_range must lie inside the longitudinal span")

    @property
    def span_lateral(self) -> float:
        return self.rows * self.cell_width

    @property
    def span_longitudinal(self) -> float:
        return self.cols * self.cell_length

    @property
    def history(self) -> float:
        """t0 - t_first in seconds."""
        return (self.n_timesteps - 1) * self.dt

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.n_timesteps, self.rows, self.cols)

    def times(self) -> np.ndarray:
        """Frame times relative to t0, oldest first (e.g. -1.5, -1, -0.5, 0)."""
        return (np.arange(self.n_timesteps) - (self.n_timesteps - 1)) * self.dt

    def cell_centres(self) -> tuple[np.ndarray, np.ndarray]:
        """Lateral centre per row and longitudinal centre per column, ego frame."""
        lat = self.span_lateral / 2 - (np.arange(self.rows) + 0.5) * self.cell_width
        lon = -self.rear_range + (np.arange(self.cols) + 0.5) * self.cell_length
        return lat, lon


DESK_GRID = GridConfig()
HIGHD_GRID = GridConfig(rows=30, cols=200, cell_width=0.5, cell_length=1.0,
                        n_timesteps=4, dt=0.5, rear_range=50.0)


@dataclass(frozen=True)
class Box:
    """Axis-aligned vehicle footprint: centre (x along road, y to the left)."""

    x: float
    y: float
    length: float
    width: float


def build_grid_frame(objects: Sequence[Box], ego_pose: tuple[float, float],
                     config: GridConfig,
                     visible_lateral: tuple[float, float] | None = None) -> np.ndarray:
    """Rasterise boxes into one occupancy grid centred on ``ego_pose``.

    A cell is occupied when its centre lies inside (or on the edge of) a
    box.  Cells whose lateral centre falls outside ``visible_lateral``
    (ego-frame bounds, e.g. the road edges) are unknown.
    """
    ex, ey = ego_pose
    if not (math.isfinite(ex) and math.isfinite(ey)):
        raise DataError(f"non-finite ego pose {ego_pose!r}")
    lat, lon = config.cell_centres()
    grid = np.zeros((config.rows, config.cols))
    if visible_lateral is not None:
        lo, hi = visible_lateral
        grid[(lat < lo) | (lat > hi), :] = UNKNOWN
    for box in objects:
        vals = (box.x, box.y, box.length, box.width)
        if not all(math.isfinite(v) for v in vals):
            raise DataError(f"non-finite object {box!r}")
        rows = np.abs(lat - (box.y - ey)) <= box.width / 2
        cols = np.abs(lon - (box.x - ex)) <= box.length / 2
        grid[np.ix_(rows, cols)] = OCCUPIED
    return grid


# ---------------------------------------------------------------------------
# synthetic highway scenes

def _smoothstep(u):
    u = np.clip(u, 0.0, 1.0)
    return u * u * (3 - 2 * u)


@dataclass
class Track:
    """One vehicle sampled at the grid's frame times."""

    role: str
    x: np.ndarray
    y: np.ndarray
    length: float
    width: float

    def box(self, k: int) -> Box:
        return Box(float(self.x[k]), float(self.y[k]), self.length, self.width)


@dataclass
class Scene:
    name: str
    ego: Track
    others: list[Track]
    lane_width: float

    @property
    def tracks(self) -> list[Track]:
        return [self.ego, *self.others]

    def find(self, role: str) -> Track:
        for t in self.others:
            if t.role == role:
                return t
        raise KeyError(role)


def _car(rng) -> tuple[float, float]:
    return rng.uniform(4.2, 5.0), rng.uniform(1.75, 2.05)


def _ramp(times, rng, shift):
    # lateral manoeuvre fully contained in the observed window
    span = -times[0]
    duration = rng.uniform(0.6, 1.0) * span
    start = times[0] + rng.uniform(0.0, span - duration)
    return shift * _smoothstep((times - start) / duration)


def sample_scene(name: str, rng: np.random.Generator,
                 grid: GridConfig = DESK_GRID) -> Scene:
    """Draw one straight-road scene of manoeuvre class ``name``.

    World frame: x along the road with the ego at x=0 at t0, y to the left
    with the middle lane centred on y=0.  The ego starts in the middle lane.
    """
    if name not in CLASS_NAMES:
        raise ConfigError(f"unknown scenario class {name!r}")
    t = grid.times()
    w = rng.uniform(3.5, 3.9)
    v_ego = 28.0 * rng.uniform(0.8, 1.2)
    front = grid.span_longitudinal - grid.rear_range

    ego_y = np.zeros_like(t)
    if name == "ego_lane_change_left":
        ego_y = _ramp(t, rng, +w)
    elif name == "ego_lane_change_right":
        ego_y = _ramp(t, rng, -w)
    ego = Track("ego", v_ego * t, ego_y, *_car(rng))

    def vehicle(role, gap_t0, lane_y, speed_ratio=None):
        v = v_ego * (speed_ratio if speed_ratio is not None else rng.uniform(0.85, 1.1))
        return Track(role, gap_t0 + v * t, np.full_like(t, lane_y), *_car(rng))

    others = []
    leader_gap = v_ego * rng.uniform(0.8, 2.6)
    if name in ("cut_in_from_left", "cut_in_from_right"):
        side = w if name == "cut_in_from_left" else -w
        cut_gap = v_ego * rng.uniform(0.5, 1.4)
        cutter = vehicle("cutter", cut_gap, side, rng.uniform(0.9, 1.05))
        cutter.y = side - _ramp(t, rng, side)
        leader = vehicle("leader", min(cut_gap + rng.uniform(20, 45), front - 10), 0.0)
        others += [cutter, leader]
    else:
        leader = vehicle("leader", leader_gap, 0.0)
        if name in ("leader_cut_out_left", "leader_cut_out_right"):
            side = w if name == "leader_cut_out_left" else -w
            leader.y = _ramp(t, rng, side)
            if rng.random() < 0.5:
                others.append(vehicle("front", min(leader_gap + rng.uniform(20, 40), front - 5), 0.0))
        others.insert(0, leader)

    for _ in range(rng.integers(0, 3)):
        lane = rng.choice([-w, w])
        for _attempt in range(10):
            bg = vehicle("background", rng.uniform(-grid.rear_range + 10, front - 10), lane,
                         rng.uniform(0.8, 1.2))
            if all(_clear(bg, o) for o in [ego, *others]):
                others.append(bg)
                break
    return Scene(name, ego, others, w)


def _clear(a: Track, b: Track, margin: float = 2.0) -> bool:
    dx = np.abs(a.x - b.x) < (a.length + b.length) / 2 + margin
    dy = np.abs(a.y - b.y) < (a.width + b.width) / 2 + 0.3
    return not np.any(dx & dy)


def render_scene(scene: Scene, grid: GridConfig = DESK_GRID,
                 tracks: Sequence[Track] | None = None) -> np.ndarray:
    """Rasterise a scene into an ``(n_timesteps, rows, cols)`` tensor.

    The grid is fixed at the ego's t0 position; lanes beyond the three-lane
    road are unknown.  ``tracks`` restricts which vehicles are drawn.
    """
    tracks = scene.tracks if tracks is None else tracks
    origin = (float(scene.ego.x[-1]), float(scene.ego.y[-1]))
    half_road = 1.5 * scene.lane_width
    visible = (-half_road - origin[1], half_road - origin[1])
    frames = [build_grid_frame([tr.box(k) for tr in tracks], origin, grid, visible)
              for k in range(grid.n_timesteps)]
    return np.stack(frames)


@dataclass
class GeneratorConfig:
    seed: int = 0
    n_per_class: int = 150
    grid: GridConfig = DESK_GRID
    class_list: tuple[str, ...] = CLASS_NAMES


def generate_synthetic(config: GeneratorConfig) -> "ScenarioDataset":
    """Synthetic dataset with ``n_per_class`` scenes of every listed class.

    Each class draws from its own seeded stream, so a class's scenes do not
    depend on which other classes are requested.
    """
    if not config.class_list:
        raise ConfigError("class_list is empty")
    tensors, truth, ids = [], [], []
    for c, name in enumerate(config.class_list):
        class_idx = CLASS_NAMES.index(name) if name in CLASS_NAMES else None
        if class_idx is None:
            raise ConfigError(f"unknown scenario class {name!r}")
        rng = np.random.default_rng([config.seed, class_idx])
        for n in range(config.n_per_class):
            tensors.append(render_scene(sample_scene(name, rng, config.grid), config.grid))
            truth.append(c)
            ids.append(f"{name}-{n:05d}")
    x = np.asarray(tensors, dtype=np.float32).reshape((-1,) + config.grid.shape)
    return ScenarioDataset(x, np.asarray(truth, dtype=np.int64), ids,
                           list(config.class_list), config.grid)


# ---------------------------------------------------------------------------
# dataset container

class ScenarioDataset:
    """Scenario tensors with hidden ground truth.

    ``labeled_classes`` (indices into ``class_names``) are the classes whose
    labels the learner may read; all other samples are unlabelled and their
    class is only exposed through :meth:`unlabeled_truth` for evaluation.
    Every label read is counted in ``label_reads``.
    """

    def __init__(self, tensors, truth, ids, class_names, grid: GridConfig,
                 labeled_classes: Sequence[int] = ()):
        self.tensors = np.asarray(tensors, dtype=np.float32)
        self._truth = np.asarray(truth, dtype=np.int64)
        self.ids = list(ids)
        self.class_names = list(class_names)
        self.grid = grid
        self.labeled_classes = tuple(int(c) for c in labeled_classes)
        self.label_reads = 0
        if self.tensors.shape[1:] != grid.shape:
            raise DataError(f"tensor shape {self.tensors.shape[1:]} does not match grid {grid.shape}")
        if not (len(self.ids) == len(self._truth) == len(self.tensors)):
            raise DataError("tensors, truth and ids differ in length")
        if len(set(self.ids)) != len(self.ids):
            raise DataError("duplicate scenario ids")
        for c in self.labeled_classes:
            if not 0 <= c < len(self.class_names):
                raise ConfigError(f"labelled class {c} out of range")

    def __len__(self):
        return len(self.tensors)

    @property
    def labeled_mask(self) -> np.ndarray:
        return np.isin(self._truth, self.labeled_classes)

    @property
    def K(self) -> int:
        return len(self.labeled_classes)

    @property
    def Q_truth(self) -> int:
        known = self._truth[~self.labeled_mask]
        return len(np.unique(known[known >= 0]))

    def with_label_split(self, labeled_classes: Sequence[int]) -> "ScenarioDataset":
        return ScenarioDataset(self.tensors, self._truth, self.ids, self.class_names,
                               self.grid, labeled_classes)

    def labeled(self) -> tuple[np.ndarray, np.ndarray]:
        """Labelled tensors and their labels remapped to 0..K-1."""
        self.label_reads += 1
        mask = self.labeled_mask
        lookup = {c: k for k, c in enumerate(self.labeled_classes)}
        y = np.array([lookup[c] for c in self._truth[mask]], dtype=np.int64)
        return self.tensors[mask], y

    def unlabeled(self) -> np.ndarray:
        return self.tensors[~self.labeled_mask]

    def unlabeled_ids(self) -> list[str]:
        mask = self.labeled_mask
        return [i for i, m in zip(self.ids, mask) if not m]

    def unlabeled_truth(self) -> np.ndarray:
        """Ground-truth class indices of the unlabelled part (evaluation only)."""
        return self._truth[~self.labeled_mask]

    def truth(self) -> np.ndarray:
        self.label_reads += 1
        return self._truth.copy()

    def restrict(self, classes: Sequence[int]) -> "ScenarioDataset":
        """Keep only samples of the given classes (data preparation, not a
        label read by the learner)."""
        return self.subset(np.flatnonzero(np.isin(self._truth, list(classes))))

    def subset(self, idx) -> "ScenarioDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return ScenarioDataset(self.tensors[idx], self._truth[idx], [self.ids[i] for i in idx],
                               self.class_names, self.grid, self.labeled_classes)

    def save(self, stem: str | Path) -> tuple[Path, Path]:
        """Write ``<stem>.bin`` (little-endian float32, row-major, frames
        outermost) and ``<stem>.json`` (ids, labels, grid, class names)."""
        stem = Path(stem)
        blob, manifest = stem.with_suffix(".bin"), stem.with_suffix(".json")
        blob.write_bytes(self.tensors.astype("<f4").tobytes(order="C"))
        meta = {
            "ids": self.ids,
            "labels": self._truth.tolist(),
            "class_names": self.class_names,
            "labeled_classes": list(self.labeled_classes),
            "grid": asdict(self.grid),
            "count": len(self),
            "blob": blob.name,
        }
        manifest.write_text(json.dumps(meta, indent=1, sort_keys=True))
        return blob, manifest

    @classmethod
    def load(cls, stem: str | Path) -> "ScenarioDataset":
        stem = Path(stem)
        manifest = stem.with_suffix(".json")
        if not manifest.exists():
            raise DataError(f"dataset manifest {manifest} not found")
        meta = json.loads(manifest.read_text())
        grid = GridConfig(**meta["grid"])
        blob = manifest.parent / meta["blob"]
        if not blob.exists():
            raise DataError(f"dataset blob {blob} not found")
        data = np.frombuffer(blob.read_bytes(), dtype="<f4")
        expected = meta["count"] * int(np.prod(grid.shape))
        if data.size != expected:
            raise DataError(f"blob holds {data.size} floats, manifest implies {expected}")
        x = data.reshape((meta["count"],) + grid.shape).astype(np.float32)
        return cls(x, meta["labels"], meta["ids"], meta["class_names"], grid,
                   meta.get("labeled_classes", ()))


def split_dataset(dataset: ScenarioDataset, ratios=(0.7, 0.1, 0.2), seed: int = 0):
    """Stratified train/val/test split; returns three datasets.

    Per class the first two parts get ``round(ratio * n)`` samples and the
    last part takes the remainder.
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1) > 1e-9:
        raise ConfigError(f"ratios must be three non-negative numbers summing to 1, got {ratios}")
    n_parts = sum(r > 0 for r in ratios)
    rng = np.random.default_rng(seed)
    truth = dataset._truth
    parts: list[list[int]] = [[], [], []]
    for c in np.unique(truth):
        members = np.flatnonzero(truth == c)
        if len(members) < n_parts:
            raise DataError(f"class {c} has {len(members)} samples, fewer than {n_parts} split parts")
        members = rng.permutation(members)
        n_train = int(round(ratios[0] * len(members)))
        n_val = int(round(ratios[1] * len(members)))
        if ratios[2] > 0:
            n_train = min(n_train, len(members) - n_val - 1)
        parts[0] += members[:n_train].tolist()
        parts[1] += members[n_train:n_train + n_val].tolist()
        parts[2] += members[n_train + n_val:].tolist()
    return tuple(dataset.subset(sorted(p)) for p in parts)


# ---------------------------------------------------------------------------
# temporal-order pretext labels

PERMUTATIONS: tuple[tuple[int, ...], ...] = tuple(itertools.permutations((1, 2, 3, 4)))
_PERM_INDEX = {p: i for i, p in enumerate(PERMUTATIONS)}


def permutation_index(order: Sequence[int]) -> int:
    """0-based class index (lexicographic) of a 1-based frame order."""
    try:
        return _PERM_INDEX[tuple(order)]
    except KeyError:
        raise ConfigError(f"{tuple(order)!r} is not a permutation of (1, 2, 3, 4)") from None


def permutation_order(index: int) -> tuple[int, ...]:
    return PERMUTATIONS[index]


def inverse_order(order: Sequence[int]) -> tuple[int, ...]:
    inv = [0] * len(order)
    for k, src in enumerate(order):
        inv[src - 1] = k + 1
    return tuple(inv)


def shuffle_temporal(tensor: np.ndarray, order: Sequence[int]) -> np.ndarray:
    """Reorder frames: output frame ``k`` is input frame ``order[k]`` (1-based)."""
    if tensor.shape[0] != 4:
        raise DataError(f"temporal shuffling needs exactly 4 frames, got {tensor.shape[0]}")
    permutation_index(order)
    return tensor[np.asarray(order) - 1]


# ---------------------------------------------------------------------------
# augmentation

@dataclass
class AugmentParams:
    erase_fraction: float = 0.1
    noise_sigma: float = 0.05


def augment(tensor: np.ndarray, params: AugmentParams, rng: np.random.Generator | int,
            clip: bool = True) -> np.ndarray:
    """Random erasing plus Gaussian noise.

    The erased patch spans every frame and a rectangle holding
    ``erase_fraction`` of each frame's cells (aspect ratio of the grid);
    its cells are set to 0.5 (unknown).
    """
    if not (0 <= params.erase_fraction < 1 and params.noise_sigma >= 0):
        raise ConfigError(f"invalid augmentation parameters {params!r}")
    rng = np.random.default_rng(rng)
    out = np.array(tensor, dtype=np.float64, copy=True)
    _, rows, cols = out.shape
    if params.erase_fraction > 0:
        scale = math.sqrt(params.erase_fraction)
        h = max(1, int(round(rows * scale)))
        w = max(1, int(round(cols * scale)))
        i0 = rng.integers(0, rows - h + 1)
        j0 = rng.integers(0, cols - w + 1)
        out[:, i0:i0 + h, j0:j0 + w] = UNKNOWN
    if params.noise_sigma > 0:
        out += rng.normal(0.0, params.noise_sigma, size=out.shape)
    if clip:
        np.clip(out, 0.0, 1.0, out=out)
    return out.astype(np.asarray(tensor).dtype, copy=False)


def augment_batch(batch: np.ndarray, params: AugmentParams, rng: np.random.Generator) -> np.ndarray:
    return np.stack([augment(x, params, rng) for x in batch])
