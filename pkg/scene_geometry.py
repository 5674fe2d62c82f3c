"""
2D object cross-sections, rigid transforms, placement sampling and distance queries.
"""
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional, Sequence, Tuple, Union

import numpy as np

from exceptions import PlacementError, ValidationError

logger = logging.getLogger(__name__)

SHAPE_KINDS = ("circle", "rectangle", "blob", "coin", "L-bracket")
CURVED_VERTEX_COUNT = 64

PolygonLike = Union["PolyObject", Sequence[Sequence[float]], np.ndarray]


def _cross(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]


def _rotation(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s], [s, c]])


@dataclass(frozen=True)
class Pose2D:
    """Rigid planar transform taking whisker-base coordinates to world coordinates."""

    x: float = 0.0
    y: float = 0.0
    heading: float = 0.0

    @property
    def translation(self) -> np.ndarray:
        return np.array([self.x, self.y])

    @property
    def rotation(self) -> np.ndarray:
        return _rotation(self.heading)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Map base-frame points (..., 2) into the world frame."""
        return np.asarray(points, dtype=float) @ self.rotation.T + self.translation

    def apply_vector(self, vectors: np.ndarray) -> np.ndarray:
        return np.asarray(vectors, dtype=float) @ self.rotation.T

    def inverse_apply(self, points: np.ndarray) -> np.ndarray:
        """Map world-frame points (..., 2) into the base frame."""
        return (np.asarray(points, dtype=float) - self.translation) @ self.rotation

    def inverse_apply_vector(self, vectors: np.ndarray) -> np.ndarray:
        return np.asarray(vectors, dtype=float) @ self.rotation

    def inverse(self) -> "Pose2D":
        origin = -self.translation @ self.rotation
        return Pose2D(float(origin[0]), float(origin[1]), -self.heading)

    def compose(self, other: "Pose2D") -> "Pose2D":
        """Return self ∘ other (apply other first)."""
        origin = self.apply(other.translation)
        return Pose2D(float(origin[0]), float(origin[1]), self.heading + other.heading)


def signed_area(vertices: np.ndarray) -> float:
    """Shoelace area, positive for counter-clockwise vertex order."""
    v = np.asarray(vertices, dtype=float)
    return 0.5 * float(np.sum(_cross(v, np.roll(v, -1, axis=0))))


def perimeter(vertices: np.ndarray) -> float:
    v = np.asarray(vertices, dtype=float)
    return float(np.sum(np.linalg.norm(np.roll(v, -1, axis=0) - v, axis=1)))


def segment_intersections(
    p0: np.ndarray, p1: np.ndarray, q0: np.ndarray, q1: np.ndarray, tol: float = 1e-12
) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """
    Intersect every segment p0[i]→p1[i] with every segment q0[j]→q1[j].

    Returns:
        (i, j, t, u) arrays for each intersecting pair, where the hit point is
        p0[i] + t (p1[i] - p0[i]) = q0[j] + u (q1[j] - q0[j]). Parallel pairs
        are ignored.
    """
    r = (p1 - p0)[:, None, :]
    s = (q1 - q0)[None, :, :]
    qp = q0[None, :, :] - p0[:, None, :]
    denom = _cross(r, s)
    safe = np.abs(denom) > 1e-15
    denom_safe = np.where(safe, denom, 1.0)
    t = _cross(qp, s) / denom_safe
    u = _cross(qp, r) / denom_safe
    hit = safe & (t >= -tol) & (t <= 1.0 + tol) & (u >= -tol) & (u <= 1.0 + tol)
    i, j = np.nonzero(hit)
    return i, j, np.clip(t[i, j], 0.0, 1.0), np.clip(u[i, j], 0.0, 1.0)


def points_in_polygon(points: np.ndarray, vertices: np.ndarray) -> np.ndarray:
    """Even-odd ray casting for an array of points (..., 2)."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    a = vertices
    b = np.roll(vertices, -1, axis=0)
    px = pts[:, 0][:, None]
    py = pts[:, 1][:, None]
    straddles = (a[None, :, 1] > py) != (b[None, :, 1] > py)
    dy = np.where(straddles, b[None, :, 1] - a[None, :, 1], 1.0)
    x_cross = a[None, :, 0] + (py - a[None, :, 1]) * (b[None, :, 0] - a[None, :, 0]) / dy
    crossings = np.sum(straddles & (px < x_cross), axis=1)
    return crossings % 2 == 1


@dataclass(frozen=True, eq=False)
class PolyObject:
    """Closed, simple, counter-clockwise polygon in millimetres."""

    vertices: np.ndarray
    name: str = "object"

    def __post_init__(self):
        v = np.array(self.vertices, dtype=float)
        if v.ndim != 2 or v.shape[1] != 2 or v.shape[0] < 3:
            raise ValidationError(f"Polygon '{self.name}' needs at least 3 two-dimensional vertices, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValidationError(f"Polygon '{self.name}' has non-finite vertices")
        edges = np.roll(v, -1, axis=0) - v
        if np.any(np.linalg.norm(edges, axis=1) < 1e-12):
            raise ValidationError(f"Polygon '{self.name}' has repeated consecutive vertices")
        area = signed_area(v)
        if abs(area) < 1e-12:
            raise ValidationError(f"Polygon '{self.name}' is degenerate (zero area)")
        if area < 0:
            raise ValidationError(f"Polygon '{self.name}' must be counter-clockwise")
        if _self_intersects(v):
            raise ValidationError(f"Polygon '{self.name}' is self-intersecting")
        v.setflags(write=False)
        object.__setattr__(self, "vertices", v)

    @classmethod
    def from_points(cls, points: Sequence[Sequence[float]], name: str = "object") -> "PolyObject":
        """Build a polygon, reversing clockwise input to counter-clockwise."""
        v = np.asarray(points, dtype=float)
        if v.ndim == 2 and v.shape[0] >= 3 and v.shape[1] == 2 and signed_area(v) < 0:
            v = v[::-1]
        return cls(v, name)

    @property
    def edge_starts(self) -> np.ndarray:
        return self.vertices

    @property
    def edge_ends(self) -> np.ndarray:
        return np.roll(self.vertices, -1, axis=0)

    def outward_normals(self) -> np.ndarray:
        d = self.edge_ends - self.edge_starts
        n = np.stack([d[:, 1], -d[:, 0]], axis=1)
        return n / np.linalg.norm(n, axis=1, keepdims=True)

    def transformed(self, pose: Pose2D) -> "PolyObject":
        return PolyObject(pose.apply(self.vertices), self.name)

    def mirrored(self) -> "PolyObject":
        """Reflect across the x axis (order reversed to stay counter-clockwise)."""
        v = self.vertices * np.array([1.0, -1.0])
        return PolyObject(v[::-1], self.name)

    def contains(self, points: np.ndarray) -> np.ndarray:
        return points_in_polygon(points, self.vertices)

    def to_dict(self) -> Dict[str, Any]:
        return {"name": self.name, "units": "mm", "vertices": self.vertices.tolist()}


def _self_intersects(v: np.ndarray) -> bool:
    n = len(v)
    a0, a1 = v, np.roll(v, -1, axis=0)
    i, j, _, _ = segment_intersections(a0, a1, a0, a1, tol=-1e-12)
    # adjacent edges share a vertex and are excluded
    adjacent = (i == j) | ((i + 1) % n == j) | ((j + 1) % n == i)
    return bool(np.any(~adjacent))


def as_polygon(obj: PolygonLike, name: str = "object") -> PolyObject:
    if isinstance(obj, PolyObject):
        return obj
    return PolyObject(np.asarray(obj, dtype=float), name)


def closest_surface_point(p: Sequence[float], obj: PolyObject) -> Tuple[float, np.ndarray]:
    """
    Unsigned distance from a point to the polygon boundary.

    Args:
        p: Query point (mm).
        obj: Polygon to query.

    Returns:
        (distance, closest boundary point)
    """
    point = np.asarray(p, dtype=float)
    a = obj.edge_starts
    ab = obj.edge_ends - a
    t = np.clip(np.sum((point - a) * ab, axis=1) / np.sum(ab * ab, axis=1), 0.0, 1.0)
    proj = a + t[:, None] * ab
    d = np.linalg.norm(point - proj, axis=1)
    k = int(np.argmin(d))
    return float(d[k]), proj[k]


def distances_to_boundary(points: np.ndarray, obj: PolyObject) -> np.ndarray:
    """Vectorized unsigned boundary distance for (m, 2) points."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    a = obj.edge_starts[None, :, :]
    ab = (obj.edge_ends - obj.edge_starts)[None, :, :]
    ap = pts[:, None, :] - a
    t = np.clip(np.sum(ap * ab, axis=2) / np.sum(ab * ab, axis=2), 0.0, 1.0)
    diff = ap - t[..., None] * ab
    return np.min(np.linalg.norm(diff, axis=2), axis=1)


def polyline_intersects_polygon(nodes: np.ndarray, obj: PolyObject) -> bool:
    i, _, _, _ = segment_intersections(nodes[:-1], nodes[1:], obj.edge_starts, obj.edge_ends)
    return bool(len(i)) or bool(np.any(obj.contains(nodes)))


# ---------------------------------------------------------------------------
# Procedural shapes
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ShapeSpec:
    """Configuration entry describing one procedural shape."""

    kind: str
    params: Dict[str, float] = field(default_factory=dict)
    n_vertices: int = CURVED_VERTEX_COUNT
    name: Optional[str] = None

    def build(self) -> PolyObject:
        return make_shape(self.kind, self.params, self.n_vertices, name=self.name)


def _require_positive(kind: str, params: Dict[str, float], *keys: str) -> None:
    for key in keys:
        if key not in params:
            raise ValidationError(f"Shape '{kind}' requires parameter '{key}'")
        if not float(params[key]) > 0:
            raise ValidationError(f"Shape '{kind}' parameter '{key}' must be positive, got {params[key]}")


def make_shape(kind: str, params: Dict[str, float], n_vertices: int = CURVED_VERTEX_COUNT,
               name: Optional[str] = None) -> PolyObject:
    """
    Build a procedural cross-section centred near the origin.

    Args:
        kind: One of circle, rectangle, blob, coin, L-bracket.
        params: circle {radius}; rectangle {width, height}; blob {radius,
            amplitude, harmonics, seed}; coin {diameter, thickness};
            L-bracket {leg_length, leg_width}.
        n_vertices: Vertex budget for curved outlines.
        name: Optional identifier (defaults to the kind).

    Returns:
        A valid counter-clockwise PolyObject.
    """
    label = name or kind
    if n_vertices < 8 and kind in ("circle", "blob", "coin"):
        raise ValidationError(f"Shape '{kind}' needs at least 8 vertices, got {n_vertices}")

    if kind == "circle":
        _require_positive(kind, params, "radius")
        theta = 2.0 * np.pi * np.arange(n_vertices) / n_vertices
        r = float(params["radius"])
        return PolyObject(np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1), label)

    if kind == "rectangle":
        _require_positive(kind, params, "width", "height")
        hw, hh = 0.5 * float(params["width"]), 0.5 * float(params["height"])
        return PolyObject(np.array([[-hw, -hh], [hw, -hh], [hw, hh], [-hw, hh]]), label)

    if kind == "blob":
        _require_positive(kind, params, "radius")
        amplitude = float(params.get("amplitude", 0.2))
        harmonics = int(params.get("harmonics", 4))
        if not 0.0 <= amplitude < 0.5 or harmonics < 1:
            raise ValidationError(f"Blob amplitude must be in [0, 0.5) and harmonics >= 1, got {amplitude}, {harmonics}")
        rng = np.random.default_rng(int(params.get("seed", 0)))
        orders = np.arange(2, harmonics + 2)
        weights = rng.uniform(-1.0, 1.0, size=harmonics) / orders
        weights *= amplitude / max(float(np.sum(np.abs(weights))), 1e-12)
        phases = rng.uniform(0.0, 2.0 * np.pi, size=harmonics)
        theta = 2.0 * np.pi * np.arange(n_vertices) / n_vertices
        radius = float(params["radius"]) * (
            1.0 + np.sum(weights[:, None] * np.cos(orders[:, None] * theta[None, :] + phases[:, None]), axis=0)
        )
        return PolyObject(np.stack([radius * np.cos(theta), radius * np.sin(theta)], axis=1), label)

    if kind == "coin":
        _require_positive(kind, params, "diameter", "thickness")
        length, thickness = float(params["diameter"]), float(params["thickness"])
        if thickness >= length:
            raise ValidationError(f"Coin thickness {thickness} must be smaller than its diameter {length}")
        r = 0.5 * thickness
        cx = 0.5 * length - r
        half = max(n_vertices // 2, 4)
        right = np.linspace(-0.5 * np.pi, 0.5 * np.pi, half)
        left = np.linspace(0.5 * np.pi, 1.5 * np.pi, half)
        pts = np.concatenate([
            np.stack([cx + r * np.cos(right), r * np.sin(right)], axis=1),
            np.stack([-cx + r * np.cos(left), r * np.sin(left)], axis=1),
        ])
        return PolyObject(pts, label)

    if kind == "L-bracket":
        _require_positive(kind, params, "leg_length", "leg_width")
        a, b = float(params["leg_length"]), float(params["leg_width"])
        if b >= a:
            raise ValidationError(f"L-bracket leg width {b} must be smaller than leg length {a}")
        pts = np.array([[0, 0], [a, 0], [a, b], [b, b], [b, a], [0, a]], dtype=float) - 0.5 * a
        return PolyObject(pts, label)

    raise ValidationError(f"Unknown shape kind '{kind}', expected one of {SHAPE_KINDS}")


# ---------------------------------------------------------------------------
# Placement
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PlacementConfig:
    standoff_min: float = 5.0
    standoff_max: float = 35.0
    start_gap: float = 5.0
    sweep_direction: Tuple[float, float] = (0.0, -1.0)
    max_retries: int = 50

    def validate(self) -> None:
        if not 0.0 <= self.standoff_min <= self.standoff_max:
            raise ValidationError(f"Invalid standoff range [{self.standoff_min}, {self.standoff_max}]")
        if self.start_gap < 0:
            raise ValidationError("start_gap must be non-negative")
        if np.linalg.norm(self.sweep_direction) < 1e-12:
            raise ValidationError("sweep_direction must be non-zero")


@dataclass(frozen=True)
class ScenePlacement:
    rotation: float
    translation: Tuple[float, float]
    standoff: float

    def apply(self, obj: PolyObject) -> PolyObject:
        pose = Pose2D(self.translation[0], self.translation[1], self.rotation)
        return obj.transformed(pose)

    def to_dict(self) -> Dict[str, Any]:
        return {"rotation": self.rotation, "translation": list(self.translation), "standoff": self.standoff}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ScenePlacement":
        return cls(float(data["rotation"]), tuple(float(v) for v in data["translation"]), float(data["standoff"]))


def sweep_axes(direction: Sequence[float]) -> Tuple[np.ndarray, np.ndarray]:
    """
    Unit travel direction and the path normal pointing to the whisker side (+x of the base).
    """
    u = np.asarray(direction, dtype=float)
    u = u / np.linalg.norm(u)
    w = np.array([-u[1], u[0]])
    if w[0] < 0:
        w = -w
    if w[0] < 1e-9:
        raise ValidationError(f"Sweep direction {tuple(direction)} runs along the whisker axis")
    return u, w


def place_object(obj: PolyObject, rotation: float, standoff: float, config: PlacementConfig,
                 rest_nodes: Optional[np.ndarray] = None) -> ScenePlacement:
    """Placement for a given rotation and standoff, ahead of the whisker along the sweep."""
    u, w = sweep_axes(config.sweep_direction)
    rest = np.zeros((1, 2)) if rest_nodes is None else np.asarray(rest_nodes, dtype=float)
    rest_front = float(np.max(rest @ u))
    verts = obj.vertices @ _rotation(rotation).T
    shift = (standoff - np.min(verts @ w)) * w + (rest_front + config.start_gap - np.min(verts @ u)) * u
    return ScenePlacement(float(rotation), (float(shift[0]), float(shift[1])), float(standoff))


def random_placement(obj: PolyObject, rng_seed: Union[int, Sequence[int]], config: PlacementConfig,
                     rest_nodes: Optional[np.ndarray] = None) -> ScenePlacement:
    """
    Sample a random rotation and a standoff from the sweep path.

    The object lands ahead of the whisker along the travel direction with its
    nearest point exactly `standoff` from the line swept by the base.

    Args:
        obj: Object in its own frame.
        rng_seed: Seed (or seed sequence entropy) making the draw deterministic.
        config: Standoff range, start gap and travel direction.
        rest_nodes: Whisker rest shape in the base frame at the sweep start.

    Returns:
        ScenePlacement
    """
    config.validate()
    rng = np.random.default_rng(rng_seed)

    for attempt in range(config.max_retries):
        rotation = float(rng.uniform(0.0, 2.0 * np.pi))
        standoff = float(rng.uniform(config.standoff_min, config.standoff_max))
        placement = place_object(obj, rotation, standoff, config, rest_nodes)
        if rest_nodes is None or not polyline_intersects_polygon(rest_nodes, placement.apply(obj)):
            return placement
        logger.debug(f"Placement attempt {attempt} for '{obj.name}' overlaps the rest shape, retrying")

    raise PlacementError(f"No valid placement for '{obj.name}' after {config.max_retries} attempts")


# ---------------------------------------------------------------------------
# Scene files
# ---------------------------------------------------------------------------

def load_scene_file(path: Union[str, Path]) -> PolyObject:
    """Load a {name, vertices, units} JSON scene file."""
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ValidationError(f"Scene file {path} is not valid JSON: {e}")
    unknown = set(data) - {"name", "vertices", "units"}
    if unknown:
        raise ValidationError(f"Scene file {path} has unknown keys {sorted(unknown)}")
    if data.get("units", "mm") != "mm":
        raise ValidationError(f"Scene file {path} must use mm units, got {data.get('units')}")
    if "vertices" not in data:
        raise ValidationError(f"Scene file {path} has no vertices")
    return PolyObject(np.asarray(data["vertices"], dtype=float), str(data.get("name", path.stem)))


def save_scene_file(obj: PolyObject, path: Union[str, Path]) -> None:
    Path(path).write_text(json.dumps(obj.to_dict(), sort_keys=True))
