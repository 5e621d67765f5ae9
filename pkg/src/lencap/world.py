"""Synthetic shape worlds: scene sampling, rasterisation and a fixed caption grammar.

Scenes are stored as object specs and re-rendered on demand; the renderer uses
integer pixel membership tests only, so a stored scene always reproduces the
same raster.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

SHAPES = ("circle", "square", "triangle", "star", "diamond", "cross")
COLORS = {
    "red": (0.90, 0.10, 0.10),
    "green": (0.10, 0.70, 0.20),
    "blue": (0.15, 0.25, 0.90),
    "yellow": (0.95, 0.90, 0.15),
    "purple": (0.60, 0.20, 0.75),
    "orange": (0.95, 0.55, 0.10),
    "white": (1.00, 1.00, 1.00),
    "black": (0.00, 0.00, 0.00),
}
SIZES = {"small": 0.15, "medium": 0.25, "large": 0.40}
REGIONS = ("left", "right", "top", "bottom", "center")
CONNECTIVES = ("at", "near", "the", "color", "size", "shape", "is", "and")
BACKGROUND = (0.5, 0.5, 0.5)
CANVAS = 64
ATTRIBUTES = ("color", "size", "shape")


def lexicon() -> list[str]:
    """Every word the grammar (and alt text) can produce, sorted."""
    words = set(SHAPES) | set(COLORS) | set(SIZES) | set(REGIONS) | set(CONNECTIVES)
    return sorted(words)


class CaptionUnavailable(ValueError):
    """The requested caption length needs a neighbour the scene does not have."""


class PlacementError(RuntimeError):
    pass


@dataclass(frozen=True)
class Box:
    cx: float
    cy: float
    w: float
    h: float

    def corners(self) -> tuple[float, float, float, float]:
        return (self.cx - self.w / 2, self.cy - self.h / 2,
                self.cx + self.w / 2, self.cy + self.h / 2)

    @classmethod
    def from_corners(cls, x0: float, y0: float, x1: float, y1: float) -> "Box":
        return cls((x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.cx, self.cy, self.w, self.h)


@dataclass(frozen=True)
class ObjectSpec:
    shape: str
    color: str
    size: str
    cx: float
    cy: float

    @property
    def side(self) -> float:
        return SIZES[self.size]

    @property
    def box(self) -> Box:
        return Box(self.cx, self.cy, self.side, self.side)

    def to_dict(self) -> dict:
        return {"shape": self.shape, "color": self.color, "size": self.size,
                "cx": self.cx, "cy": self.cy}

    @classmethod
    def from_dict(cls, d: dict) -> "ObjectSpec":
        obj = cls(str(d["shape"]), str(d["color"]), str(d["size"]),
                  float(d["cx"]), float(d["cy"]))
        if obj.shape not in SHAPES or obj.color not in COLORS or obj.size not in SIZES:
            raise ValueError(f"unknown attribute in object {d!r}")
        return obj


@dataclass(frozen=True)
class Scene:
    seed: int
    objects: tuple[ObjectSpec, ...]
    canvas: int = CANVAS

    def to_dict(self) -> dict:
        return {"seed": self.seed, "objects": [o.to_dict() for o in self.objects]}

    @classmethod
    def from_dict(cls, d: dict) -> "Scene":
        objects = tuple(ObjectSpec.from_dict(o) for o in d["objects"])
        if not objects:
            raise ValueError("scene has no objects")
        return cls(int(d["seed"]), objects)


@dataclass(frozen=True)
class WorldConfig:
    min_objects: int = 1
    max_objects: int = 6
    n_shapes: int = len(SHAPES)
    n_colors: int = len(COLORS)
    max_iou: float = 0.1
    max_attempts: int = 1000

    def __post_init__(self):
        if not 1 <= self.min_objects <= self.max_objects <= 6:
            raise ValueError("object count range must lie within 1..6")
        if not (1 <= self.n_shapes <= len(SHAPES) and 1 <= self.n_colors <= len(COLORS)):
            raise ValueError("lexicon sizes out of range")


def box_iou(a: Box, b: Box) -> float:
    ax0, ay0, ax1, ay1 = a.corners()
    bx0, by0, bx1, by1 = b.corners()
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    union = a.w * a.h + b.w * b.h - inter
    return inter / union if union > 0 else 0.0


def _sample_object(rng: np.random.Generator, config: WorldConfig) -> ObjectSpec:
    shape = SHAPES[rng.integers(config.n_shapes)]
    color = list(COLORS)[rng.integers(config.n_colors)]
    size = list(SIZES)[rng.integers(len(SIZES))]
    half = SIZES[size] / 2
    # 6-decimal centres survive the shard format unchanged
    cx = min(max(round(float(rng.uniform(half, 1 - half)), 6), half), 1 - half)
    cy = min(max(round(float(rng.uniform(half, 1 - half)), 6), half), 1 - half)
    return ObjectSpec(shape, color, size, cx, cy)


def generate_scene(seed: int, config: WorldConfig | None = None) -> Scene:
    config = config or WorldConfig()
    rng = np.random.default_rng(seed)
    count = int(rng.integers(config.min_objects, config.max_objects + 1))
    while count > 0:
        placed: list[ObjectSpec] = []
        for _ in range(count):
            for _attempt in range(config.max_attempts):
                cand = _sample_object(rng, config)
                if all(box_iou(cand.box, o.box) <= config.max_iou for o in placed):
                    placed.append(cand)
                    break
            else:
                break
        if len(placed) == count:
            return Scene(seed, tuple(placed))
        count -= 1
    raise PlacementError(f"could not place any object for seed {seed}")


def _star_polygon() -> np.ndarray:
    angles = -np.pi / 2 + np.arange(10) * np.pi / 5
    radii = np.where(np.arange(10) % 2 == 0, 1.0, 0.5)
    return np.stack([radii * np.cos(angles), radii * np.sin(angles)], axis=1)


_STAR = _star_polygon()


def _inside_polygon(u: np.ndarray, v: np.ndarray, poly: np.ndarray) -> np.ndarray:
    inside = np.zeros(u.shape, dtype=bool)
    n = len(poly)
    for i in range(n):
        x0, y0 = poly[i]
        x1, y1 = poly[(i + 1) % n]
        crosses = (y0 > v) != (y1 > v)
        with np.errstate(divide="ignore", invalid="ignore"):
            xint = x0 + (v - y0) * (x1 - x0) / (y1 - y0)
        inside ^= crosses & (u < xint)
    return inside


def shape_mask(shape: str, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Membership of local coordinates (u, v) in [-1, 1]^2 for a unit primitive."""
    au, av = np.abs(u), np.abs(v)
    in_box = (au <= 1) & (av <= 1)
    if shape == "square":
        return in_box
    if shape == "circle":
        return u * u + v * v <= 1
    if shape == "diamond":
        return au + av <= 1
    if shape == "triangle":
        return in_box & (au <= (v + 1) / 2)
    if shape == "cross":
        third = 1 / 3
        return in_box & ((au <= third) | (av <= third))
    if shape == "star":
        return in_box & _inside_polygon(u, v, _STAR)
    raise ValueError(f"unknown shape {shape!r}")


def render(scene: Scene) -> np.ndarray:
    """Rasterise a scene to a ``(canvas, canvas, 3)`` float32 image in [0, 1].

    Objects are painted in index order over a grey background.
    """
    n = scene.canvas
    image = np.empty((n, n, 3), dtype=np.float32)
    image[:] = BACKGROUND
    centers = (np.arange(n) + 0.5) / n
    px, py = np.meshgrid(centers, centers)  # py varies along rows
    for obj in scene.objects:
        half = obj.side / 2
        mask = shape_mask(obj.shape, (px - obj.cx) / half, (py - obj.cy) / half)
        image[mask] = COLORS[obj.color]
    return image


def region_word(cx: float, cy: float) -> str:
    if cx < 1 / 3:
        return "left"
    if cx > 2 / 3:
        return "right"
    if cy < 1 / 3:
        return "top"
    if cy > 2 / 3:
        return "bottom"
    return "center"


def nearest_neighbor(scene: Scene, index: int) -> int | None:
    """Index of the object with the closest centre; ties go to the lower index."""
    me = scene.objects[index]
    best, best_d = None, None
    for j, other in enumerate(scene.objects):
        if j == index:
            continue
        d = (other.cx - me.cx) ** 2 + (other.cy - me.cy) ** 2
        if best_d is None or d < best_d:
            best, best_d = j, d
    return best


def caption_for(scene: Scene, index: int, length: int) -> list[str]:
    obj = scene.objects[index]
    region = region_word(obj.cx, obj.cy)
    if length <= 5:
        table = {
            1: [obj.shape],
            2: [obj.color, obj.shape],
            3: [obj.size, obj.color, obj.shape],
            4: [obj.color, obj.shape, "at", region],
            5: [obj.size, obj.color, obj.shape, "at", region],
        }
        if length not in table:
            raise ValueError(f"caption length must be in 1..8, got {length}")
        return table[length]
    if length > 8:
        raise ValueError(f"caption length must be in 1..8, got {length}")
    j = nearest_neighbor(scene, index)
    if j is None:
        raise CaptionUnavailable(f"length {length} needs a neighbour")
    other = scene.objects[j]
    head = [obj.size, obj.color, obj.shape]
    if length == 6:
        return head + ["near", "the", other.shape]
    if length == 7:
        return head + ["near", "the", other.color, other.shape]
    return head + ["at", region, "near", "the", other.shape]


def attribute_caption(obj: ObjectSpec, attribute: str) -> list[str]:
    """Attribute forms such as ``the color is red`` (always four words)."""
    value = {"color": obj.color, "size": obj.size, "shape": obj.shape}[attribute]
    return ["the", attribute, "is", value]


def available_lengths(scene: Scene) -> list[int]:
    return list(range(1, 9)) if len(scene.objects) > 1 else list(range(1, 6))


def alt_text(scene: Scene, seed: int) -> str:
    """Whole-image caption: one random-length phrase per object joined by ``and``."""
    rng = np.random.default_rng([seed, 17])
    lengths = available_lengths(scene)
    phrases = []
    for i in range(len(scene.objects)):
        k = lengths[int(rng.integers(len(lengths)))]
        phrases.append(" ".join(caption_for(scene, i, k)))
    return " and ".join(phrases)


def scene_to_json(scene: Scene) -> str:
    return dumps_fixed({"seed": scene.seed, "objects": [o.to_dict() for o in scene.objects]})


def dumps_fixed(obj) -> str:
    """Compact JSON with every float written to six decimal places."""
    if isinstance(obj, bool) or obj is None:
        return json.dumps(obj)
    if isinstance(obj, float):
        return f"{obj:.6f}"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, dict):
        return "{" + ",".join(f"{json.dumps(k)}:{dumps_fixed(v)}" for k, v in obj.items()) + "}"
    if isinstance(obj, (list, tuple)):
        return "[" + ",".join(dumps_fixed(v) for v in obj) + "]"
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def write_scenes(scenes, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for scene in scenes:
            fh.write(scene_to_json(scene) + "\n")


def read_scenes(path) -> list[Scene]:
    scenes = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                scenes.append(Scene.from_dict(json.loads(line)))
            except (ValueError, KeyError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: bad scene record: {exc}") from exc
    return scenes


def scene_seed(base: int, index: int) -> int:
    """Seed of the index-th scene of a generated collection."""
    return base * 1_000_000 + index


def generate_scenes(base_seed: int, count: int, config: WorldConfig | None = None) -> list[Scene]:
    return [generate_scene(scene_seed(base_seed, i), config) for i in range(count)]
