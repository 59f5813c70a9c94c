"""Semantic occupancy sequences: data model, OCG1 persistence, toy scenes, BEV views.

A sequence is a dense ``T x X x Y x Z`` array of class ids (uint8), class 0
being free space.  Files use the little-endian OCG1 layout::

    magic "OCG1" | u8 version=1 | u32 T | u32 X | u32 Y | u32 Z
    | u16 num_classes | u8 reserved=0 | T*X*Y*Z u8 labels

Labels are linearized with t slowest: ``index = ((t*X + x)*Y + y)*Z + z``,
i.e. C order over (T, X, Y, Z).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

OCG_MAGIC = b"OCG1"
OCG_VERSION = 1
_HEADER = struct.Struct("<4sBIIIIHB")

FREE = 0


class GridFormatError(ValueError):
    """Malformed or internally inconsistent grid data / files."""


class GridDataError(ValueError):
    """Valid format but unusable content (bad dims, labels out of range)."""


@dataclass(frozen=True)
class ClassMap:
    """Ordered class names with one RGB color each; entry 0 must be free space."""

    names: tuple[str, ...]
    colors: tuple[tuple[int, int, int], ...]

    def __post_init__(self):
        if len(self.names) != len(set(self.names)):
            raise GridDataError("class names must be unique")
        if not self.names or self.names[0] != "free":
            raise GridDataError("class 0 must be named 'free'")
        if len(self.colors) != len(self.names):
            raise GridDataError("need exactly one color per class")

    def __len__(self) -> int:
        return len(self.names)


# Fixed toy palette: a small subset of the usual driving-class taxonomy.
TOY_CLASSES = ClassMap(
    names=("free", "road", "building", "vehicle", "pedestrian", "vegetation"),
    colors=(
        (0, 0, 0),
        (128, 64, 128),
        (70, 70, 70),
        (0, 0, 142),
        (220, 20, 60),
        (107, 142, 35),
    ),
)

ROAD, BUILDING, VEHICLE, PEDESTRIAN, VEGETATION = 1, 2, 3, 4, 5


@dataclass
class SemanticGrid:
    """A T x X x Y x Z grid of semantic class ids.

    ``voxel_size`` (meters per voxel) and ``frame_hz`` are carried as metadata
    only; no operation interprets them.
    """

    labels: np.ndarray
    num_classes: int
    voxel_size: float = 0.2
    frame_hz: float = 10.0

    def __post_init__(self):
        self.labels = np.ascontiguousarray(self.labels)
        if self.labels.ndim != 4:
            raise GridDataError(f"labels must be 4-D (T,X,Y,Z), got shape {self.labels.shape}")
        if any(s < 1 for s in self.labels.shape):
            raise GridDataError(f"all dims must be >= 1, got {self.labels.shape}")
        if not (1 <= self.num_classes <= 256):
            raise GridDataError(f"num_classes must be in [1, 256], got {self.num_classes}")
        if self.labels.size and int(self.labels.max()) >= self.num_classes:
            raise GridDataError(
                f"label {int(self.labels.max())} out of range for {self.num_classes} classes"
            )
        if int(self.labels.min()) < 0:
            raise GridDataError("labels must be non-negative")
        self.labels = self.labels.astype(np.uint8, copy=False)

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return tuple(self.labels.shape)

    def frame(self, t: int) -> np.ndarray:
        return self.labels[t]

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, SemanticGrid)
            and self.num_classes == other.num_classes
            and self.shape == other.shape
            and bool(np.array_equal(self.labels, other.labels))
        )


def write_grid(grid: SemanticGrid, path: str | Path) -> None:
    """Write ``grid`` to ``path`` in OCG1 format (bit-exact round trip with read_grid)."""
    if grid.labels.size and int(grid.labels.max()) >= grid.num_classes:
        raise GridDataError("label out of range for num_classes")
    t, x, y, z = grid.shape
    header = _HEADER.pack(OCG_MAGIC, OCG_VERSION, t, x, y, z, grid.num_classes, 0)
    payload = np.ascontiguousarray(grid.labels, dtype=np.uint8).tobytes(order="C")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload)


def read_grid(path: str | Path) -> SemanticGrid:
    """Read an OCG1 file; raises GridFormatError on bad magic/version/truncation."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise GridFormatError(f"{path}: file shorter than OCG1 header")
    magic, version, t, x, y, z, num_classes, _reserved = _HEADER.unpack_from(raw)
    if magic != OCG_MAGIC:
        raise GridFormatError(f"{path}: bad magic {magic!r}")
    if version != OCG_VERSION:
        raise GridFormatError(f"{path}: unsupported version {version}")
    n = t * x * y * z
    payload = raw[_HEADER.size :]
    if len(payload) < n:
        raise GridFormatError(f"{path}: payload truncated ({len(payload)} < {n} bytes)")
    labels = np.frombuffer(payload[:n], dtype=np.uint8).reshape(t, x, y, z)
    if labels.size and int(labels.max()) >= num_classes:
        raise GridFormatError(f"{path}: label >= num_classes ({num_classes})")
    return SemanticGrid(labels=labels.copy(), num_classes=num_classes)


@dataclass(frozen=True)
class ToySpec:
    """Parameters of the synthetic street-scene generator."""

    t: int = 8
    x: int = 32
    y: int = 32
    z: int = 8
    n_vehicles: int = 2
    n_pedestrians: int = 1

    def __post_init__(self):
        for name, v in (("t", self.t), ("x", self.x), ("y", self.y), ("z", self.z)):
            if not (4 <= v <= 256):
                raise GridDataError(f"toy dim {name}={v} outside [4, 256]")
        if self.n_vehicles < 0 or self.n_pedestrians < 0:
            raise GridDataError("agent counts must be >= 0")


@dataclass(frozen=True)
class _Agent:
    cls: int
    size: tuple[int, int]  # footprint
    height: int
    z0: int
    start: tuple[int, int]
    vel: tuple[int, int]

    def box(self, t: int) -> tuple[int, int, int, int]:
        x0 = self.start[0] + self.vel[0] * t
        y0 = self.start[1] + self.vel[1] * t
        return x0, y0, x0 + self.size[0], y0 + self.size[1]


def _swept_cells(agent: _Agent, frames: int, margin: int = 0) -> set[tuple[int, int]]:
    cells = set()
    for t in range(frames):
        x0, y0, x1, y1 = agent.box(t)
        for cx in range(x0 - margin, x1 + margin):
            for cy in range(y0 - margin, y1 + margin):
                cells.add((cx, cy))
    return cells


def _place_agent(rng, spec: ToySpec, cls: int, size, height, z0, speed_choices,
                 static_cells: set, agents: list[_Agent], max_tries: int = 400) -> _Agent:
    """Sample an in-bounds constant-velocity agent.

    Constraints: never overlaps static geometry or another agent, and keeps a
    one-cell gap from same-class agents so connected components stay separable.
    """
    frames = spec.t
    other_raw = set().union(*(_swept_cells(a, frames) for a in agents)) if agents else set()
    same_raw = (set().union(*(_swept_cells(a, frames) for a in agents if a.cls == cls))
                if agents else set())
    for _ in range(max_tries):
        vx, vy = 0, 0
        while vx == 0 and vy == 0:
            vx = int(rng.choice(speed_choices))
            vy = int(rng.choice(speed_choices))
            if rng.random() < 0.5:
                vy = 0
            else:
                vx = 0
        # keep the full box in-bounds across every frame so centroids stay linear
        span_x = abs(vx) * (frames - 1)
        span_y = abs(vy) * (frames - 1)
        lo_x = max(0, -vx * (frames - 1))
        lo_y = max(0, -vy * (frames - 1))
        hi_x = spec.x - size[0] - max(0, span_x if vx > 0 else 0)
        hi_y = spec.y - size[1] - max(0, span_y if vy > 0 else 0)
        if hi_x < lo_x or hi_y < lo_y:
            continue
        start = (int(rng.integers(lo_x, hi_x + 1)), int(rng.integers(lo_y, hi_y + 1)))
        agent = _Agent(cls, size, height, z0, start, (vx, vy))
        raw = _swept_cells(agent, frames)
        if raw & static_cells or raw & other_raw:
            continue
        if _swept_cells(agent, frames, margin=1) & same_raw:
            continue
        return agent
    raise GridDataError(f"could not place agent of class {cls}; scene too crowded")


def generate_toy_scene(seed: int, spec: ToySpec) -> SemanticGrid:
    """Deterministic synthetic scene: road slab, buildings, vegetation, moving agents.

    Dynamics are integer constant-velocity translations, so every agent's
    voxel-box centroid moves on an exact straight line across frames.
    """
    rng = np.random.default_rng(seed)
    labels = np.zeros((spec.t, spec.x, spec.y, spec.z), dtype=np.uint8)

    static = np.zeros((spec.x, spec.y, spec.z), dtype=np.uint8)
    static[:, :, 0 : min(2, spec.z)] = ROAD

    blocked: set[tuple[int, int]] = set()
    small = min(spec.x, spec.y) < 16  # shrink everything on tiny grids

    n_buildings = 1 if small else int(rng.integers(2, 5))
    for _ in range(n_buildings):
        w = int(rng.integers(2, 3)) if small else int(rng.integers(3, max(4, spec.x // 5) + 1))
        d = int(rng.integers(2, 3)) if small else int(rng.integers(3, max(4, spec.y // 5) + 1))
        h = int(rng.integers(2, max(3, spec.z - 2)))
        for _try in range(50):
            bx = int(rng.integers(0, max(1, spec.x - w)))
            by = int(rng.integers(0, max(1, spec.y - d)))
            cells = {(cx, cy) for cx in range(bx - 1, bx + w + 1) for cy in range(by - 1, by + d + 1)}
            if cells & blocked:
                continue
            static[bx : bx + w, by : by + d, 2 : 2 + h] = BUILDING
            blocked |= cells
            break

    n_veg = 0 if small else int(rng.integers(1, 4))
    for _ in range(n_veg):
        h = int(rng.integers(2, max(3, spec.z - 3)))
        for _try in range(50):
            vx = int(rng.integers(0, spec.x - 2))
            vy = int(rng.integers(0, spec.y - 2))
            cells = {(cx, cy) for cx in range(vx - 1, vx + 3) for cy in range(vy - 1, vy + 3)}
            if cells & blocked:
                continue
            static[vx : vx + 2, vy : vy + 2, 2 : 2 + h] = VEGETATION
            blocked |= cells
            break

    static_cells = {(int(x), int(y)) for x, y in zip(*np.nonzero(static[:, :, 2:].any(axis=2)))}

    vehicle_size = (3, 2) if small else (4, 2)
    vehicle_speeds = (-1, 1) if small else (-2, -1, 1, 2)
    agents: list[_Agent] = []
    for _ in range(spec.n_vehicles):
        agents.append(
            _place_agent(rng, spec, VEHICLE, vehicle_size, 2, 2, vehicle_speeds,
                         static_cells, agents)
        )
    for _ in range(spec.n_pedestrians):
        agents.append(
            _place_agent(rng, spec, PEDESTRIAN, (1, 1), 2, 2, (-1, 1),
                         static_cells, agents)
        )

    for t in range(spec.t):
        labels[t] = static
        for a in agents:
            x0, y0, x1, y1 = a.box(t)
            labels[t, x0:x1, y0:y1, a.z0 : a.z0 + a.height] = a.cls

    return SemanticGrid(labels=labels, num_classes=len(TOY_CLASSES))


def render_bev(grid: SemanticGrid, frame: int, classmap: ClassMap) -> np.ndarray:
    """Top-down view of one frame: pixel (x, y) takes the highest-z non-free class.

    Returns a uint8 array of shape (X, Y, 3).
    """
    if not (0 <= frame < grid.shape[0]):
        raise GridDataError(f"frame {frame} outside [0, {grid.shape[0]})")
    if len(classmap) < grid.num_classes:
        raise GridDataError("classmap smaller than grid's class count")
    fr = grid.labels[frame]  # (X, Y, Z)
    occupied = fr != FREE
    any_occ = occupied.any(axis=2)
    # argmax over reversed z finds the highest occupied voxel
    top_rev = np.argmax(occupied[:, :, ::-1], axis=2)
    top_z = fr.shape[2] - 1 - top_rev
    xs, ys = np.nonzero(any_occ)
    top_labels = np.zeros(fr.shape[:2], dtype=np.uint8)
    top_labels[xs, ys] = fr[xs, ys, top_z[xs, ys]]
    palette = np.asarray(classmap.colors, dtype=np.uint8)
    return palette[top_labels]


def write_bev_png(image: np.ndarray, path: str | Path) -> None:
    """Write a (X, Y, 3) BEV array as PNG (rows = x, columns = y)."""
    from PIL import Image

    Image.fromarray(image, mode="RGB").save(str(path))
