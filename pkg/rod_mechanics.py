"""
Quasistatic mechanics of a pre-curved elastic whisker under one frictionless point contact.

The whisker is a chain of `n_segments` rigid segments. Joint 0 is the root
spring between the clamp and the first segment; joint j (j >= 1) sits at arc
length j*h between segments j-1 and j. Every joint is a torsional spring of
stiffness k = EI / h acting on the deviation from the rest bend.
"""
import logging
import math
from dataclasses import dataclass, field, replace
from typing import List, Optional, Tuple, Union

import numpy as np

from exceptions import SolverDivergenceError, ValidationError
from scene_geometry import (
    PolygonLike,
    PolyObject,
    Pose2D,
    as_polygon,
    closest_surface_point,
    segment_intersections,
)

logger = logging.getLogger(__name__)

NITINOL_MODULUS = 60_000.0  # N/mm², superelastic plateau not modelled
DEFAULT_DIAMETER = 0.3
DEFAULT_FLEXURAL_RIGIDITY = NITINOL_MODULUS * math.pi * DEFAULT_DIAMETER ** 4 / 64.0

SOLVER_TOLERANCE = 1e-8
SOLVER_MAX_ITERATIONS = 200
CONTACT_DEPTH_TOLERANCE = 1e-6
CONTACT_MAX_ITERATIONS = 30


@dataclass(frozen=True)
class WhiskerSpec:
    """Geometry and stiffness of the pre-curved whisker (mm, N)."""

    total_length: float = 60.0
    diameter: float = DEFAULT_DIAMETER
    distal_arc_radius: float = 20.0
    distal_arc_length: float = 30.0
    n_segments: int = 32
    flexural_rigidity: float = DEFAULT_FLEXURAL_RIGIDITY
    gauge_offset: float = 5.0

    def validate(self) -> None:
        if not self.total_length > 0 or not self.diameter > 0:
            raise ValidationError(f"Whisker length and diameter must be positive, got {self.total_length}, {self.diameter}")
        if not 0.0 <= self.distal_arc_length <= self.total_length:
            raise ValidationError(f"distal_arc_length {self.distal_arc_length} outside [0, {self.total_length}]")
        if not self.distal_arc_radius > 0:
            raise ValidationError(f"distal_arc_radius must be positive, got {self.distal_arc_radius}")
        if int(self.n_segments) != self.n_segments or self.n_segments < 8:
            raise ValidationError(f"n_segments must be an integer >= 8, got {self.n_segments}")
        if not self.flexural_rigidity > 0:
            raise ValidationError(f"flexural_rigidity must be positive, got {self.flexural_rigidity}")
        if self.gauge_offset < 0:
            raise ValidationError(f"gauge_offset must be non-negative, got {self.gauge_offset}")

    @property
    def segment_length(self) -> float:
        return self.total_length / self.n_segments

    @property
    def spring_stiffness(self) -> float:
        return self.flexural_rigidity / self.segment_length

    def rest_bends(self) -> np.ndarray:
        """Rest bend angle per joint; distal joints turn by h / radius."""
        h = self.segment_length
        bends = np.zeros(self.n_segments)
        if self.distal_arc_length > 0 and math.isfinite(self.distal_arc_radius):
            start = self.total_length - self.distal_arc_length
            joints = np.arange(1, self.n_segments)
            distal = joints * h >= start - 1e-9 * self.total_length
            bends[joints[distal]] = h / self.distal_arc_radius
        return bends


@dataclass(frozen=True)
class ContactPoint:
    """Contact in the whisker-base frame."""

    position: Tuple[float, float]
    arc_length: float
    normal: Tuple[float, float]
    force_magnitude: float = 0.0


@dataclass(frozen=True, eq=False)
class RodState:
    """Deformed configuration, node positions in the whisker-base frame."""

    joint_angles: np.ndarray
    node_positions: np.ndarray
    base_moment: np.ndarray
    contact: Optional[ContactPoint] = None
    base_pose: Pose2D = field(default_factory=Pose2D)
    iterations: int = 0
    residual_history: Tuple[float, ...] = ()

    @property
    def in_contact(self) -> bool:
        return self.contact is not None

    def world_nodes(self) -> np.ndarray:
        return self.base_pose.apply(self.node_positions)


@dataclass(frozen=True)
class PointLoad:
    """Dead load of fixed direction applied at a material point (world frame)."""

    arc_length: float
    force: Tuple[float, float]


@dataclass(frozen=True)
class SurfaceConstraint:
    """
    Material point at `arc_length` held on the line through `surface_point`
    with normal `normal`; the reaction acts along `normal` (world frame).

    A unilateral constraint may only push along `normal`; a bilateral one
    (the V-groove rig) may push or pull.
    """

    arc_length: float
    surface_point: Tuple[float, float]
    normal: Tuple[float, float]
    bilateral: bool = False


Constraint = Union[PointLoad, SurfaceConstraint]


def joint_kinematics(spec: WhiskerSpec, joint_angles: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Node positions and absolute segment angles in the base frame.

    Returns:
        (nodes (n+1, 2), segment angles (n,))
    """
    psi = np.cumsum(spec.rest_bends() + joint_angles)
    h = spec.segment_length
    steps = h * np.stack([np.cos(psi), np.sin(psi)], axis=1)
    nodes = np.vstack([np.zeros((1, 2)), np.cumsum(steps, axis=0)])
    return nodes, psi


def _segment_at(spec: WhiskerSpec, s: float) -> int:
    return int(min(max(math.floor(s / spec.segment_length), 0), spec.n_segments - 1))


def _point_at(spec: WhiskerSpec, nodes: np.ndarray, psi: np.ndarray, s: float) -> Tuple[np.ndarray, int]:
    i = _segment_at(spec, s)
    local = s - i * spec.segment_length
    return nodes[i] + local * np.array([math.cos(psi[i]), math.sin(psi[i])]), i


def _make_state(spec: WhiskerSpec, angles: np.ndarray, pose: Pose2D, force: Optional[np.ndarray] = None,
                contact: Optional[ContactPoint] = None, iterations: int = 0,
                history: Tuple[float, ...] = ()) -> RodState:
    nodes, _ = joint_kinematics(spec, angles)
    moment = np.zeros(2)
    if force is not None:
        # channel 1: spring moment at the root joint; channel 2: transverse shear times gauge offset
        moment = np.array([spec.spring_stiffness * angles[0], spec.gauge_offset * force[1]])
    return RodState(angles, nodes, moment, contact, pose, iterations, history)


def build_rest_shape(spec: WhiskerSpec, base_pose: Optional[Pose2D] = None) -> RodState:
    """
    Undeformed whisker: straight proximal part along +x, distal circular arc.

    Args:
        spec: Whisker geometry.
        base_pose: Pose carried by the returned state (defaults to identity).

    Returns:
        RodState with zero joint angles and zero base moment.
    """
    spec.validate()
    return _make_state(spec, np.zeros(spec.n_segments), base_pose or Pose2D())


def _to_base(constraint: Constraint, pose: Pose2D) -> Constraint:
    if isinstance(constraint, PointLoad):
        return PointLoad(constraint.arc_length, tuple(pose.inverse_apply_vector(constraint.force)))
    normal = np.asarray(constraint.normal, dtype=float)
    normal = normal / np.linalg.norm(normal)
    return SurfaceConstraint(
        constraint.arc_length,
        tuple(pose.inverse_apply(constraint.surface_point)),
        tuple(pose.inverse_apply_vector(normal)),
        constraint.bilateral,
    )


def _residual(spec: WhiskerSpec, z: np.ndarray, constraint: Constraint) -> Tuple[np.ndarray, np.ndarray]:
    """Equilibrium residual and Jacobian in the base frame."""
    n = spec.n_segments
    k = spec.spring_stiffness
    theta = z[:n]
    nodes, psi = joint_kinematics(spec, theta)
    x, i = _point_at(spec, nodes, psi, constraint.arc_length)
    lever = x - nodes[: i + 1]
    idx = np.arange(i + 1)
    far = np.maximum.outer(idx, idx)

    if isinstance(constraint, PointLoad):
        f = np.asarray(constraint.force, dtype=float)
        g = np.zeros(n)
        g[: i + 1] = lever[:, 0] * f[1] - lever[:, 1] * f[0]
        jac = k * np.eye(n)
        jac[: i + 1, : i + 1] += (lever @ f)[far]
        return k * theta - g, jac

    lam = z[n]
    nrm = np.asarray(constraint.normal, dtype=float)
    q = np.asarray(constraint.surface_point, dtype=float)
    g = np.zeros(n)
    g[: i + 1] = lever[:, 0] * nrm[1] - lever[:, 1] * nrm[0]
    res = np.concatenate([k * theta - lam * g, [nrm @ (x - q)]])
    jac = np.zeros((n + 1, n + 1))
    jac[:n, :n] = k * np.eye(n)
    jac[: i + 1, : i + 1] += lam * (lever @ nrm)[far]
    jac[:n, n] = -g
    jac[n, :n] = g
    return res, jac


def solve_equilibrium(spec: WhiskerSpec, base_pose: Pose2D, constraint: Optional[Constraint] = None,
                      initial_angles: Optional[np.ndarray] = None, tolerance: float = SOLVER_TOLERANCE,
                      max_iterations: int = SOLVER_MAX_ITERATIONS) -> RodState:
    """
    Torsional-spring equilibrium under an optional point load or surface constraint.

    Damped Newton on the joint angles (plus the normal-force multiplier for
    a surface constraint) with a backtracking line search on the squared
    residual, so accepted iterations never increase the merit.

    Args:
        spec: Whisker geometry and stiffness.
        base_pose: Base pose in the world frame.
        constraint: PointLoad or SurfaceConstraint in the world frame.
        initial_angles: Warm start for the joint angles.
        tolerance: Max-norm residual tolerance (N·mm and mm).
        max_iterations: Newton iteration cap.

    Returns:
        RodState in the base frame. A unilateral constraint that would need
        a pulling force releases the rod and the free state is returned.

    Raises:
        SolverDivergenceError: Newton failed to reach the tolerance.
    """
    spec.validate()
    n = spec.n_segments
    if constraint is None:
        return build_rest_shape(spec, base_pose)
    if not 0.0 <= constraint.arc_length <= spec.total_length:
        raise ValidationError(f"Constraint arc length {constraint.arc_length} outside the whisker")

    local = _to_base(constraint, base_pose)
    surface = isinstance(local, SurfaceConstraint)
    z = np.zeros(n + 1 if surface else n)
    if initial_angles is not None:
        z[:n] = initial_angles

    res, jac = _residual(spec, z, local)
    merit = 0.5 * float(res @ res)
    history = [merit]
    iterations = 0
    while np.max(np.abs(res)) > tolerance:
        if iterations >= max_iterations:
            raise SolverDivergenceError("Rod equilibrium did not converge", float(np.linalg.norm(res)), iterations)
        try:
            step = np.linalg.solve(jac, -res)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(jac, -res, rcond=None)[0]
        alpha = 1.0
        while True:
            trial = z + alpha * step
            trial_res, trial_jac = _residual(spec, trial, local)
            trial_merit = 0.5 * float(trial_res @ trial_res)
            if np.isfinite(trial_merit) and trial_merit <= (1.0 - 1e-4 * alpha) * merit:
                break
            alpha *= 0.5
            if alpha < 1e-6:
                raise SolverDivergenceError("Line search stalled", float(np.linalg.norm(res)), iterations)
        z, res, jac, merit = trial, trial_res, trial_jac, trial_merit
        history.append(merit)
        iterations += 1
        logger.debug(f"Newton iteration {iterations}: merit {merit:.3e}, step {alpha:.3g}")

    theta = z[:n]
    nodes, psi = joint_kinematics(spec, theta)
    x, _ = _point_at(spec, nodes, psi, local.arc_length)
    if surface:
        lam = float(z[n])
        nrm = np.asarray(local.normal, dtype=float)
        if lam < 0 and not local.bilateral:
            logger.debug(f"Contact at s={local.arc_length:.3f} would pull ({lam:.3e} N); releasing")
            return build_rest_shape(spec, base_pose)
        force = lam * nrm
        contact = ContactPoint(tuple(x), float(local.arc_length), tuple(nrm), abs(lam))
    else:
        force = np.asarray(local.force, dtype=float)
        magnitude = float(np.linalg.norm(force))
        direction = force / magnitude if magnitude > 0 else np.array([0.0, 1.0])
        contact = ContactPoint(tuple(x), float(local.arc_length), tuple(direction), magnitude)
    return _make_state(spec, theta, base_pose, force, contact, iterations, tuple(history))


def spring_moments(spec: WhiskerSpec, state: RodState) -> np.ndarray:
    """Elastic restoring moment at every joint (N·mm)."""
    return spec.spring_stiffness * state.joint_angles


def lever_moments(spec: WhiskerSpec, state: RodState) -> np.ndarray:
    """Moment of the contact force about every joint (zero distal to the contact)."""
    out = np.zeros(spec.n_segments)
    c = state.contact
    if c is None:
        return out
    force = c.force_magnitude * np.asarray(c.normal)
    x = np.asarray(c.position)
    i = _segment_at(spec, c.arc_length)
    lever = x - state.node_positions[: i + 1]
    out[: i + 1] = lever[:, 0] * force[1] - lever[:, 1] * force[0]
    return out


# ---------------------------------------------------------------------------
# Contact detection and resolution against a polygon
# ---------------------------------------------------------------------------

def _rod_crossings(spec: WhiskerSpec, nodes: np.ndarray, poly: PolyObject) -> List[Tuple[float, int, np.ndarray]]:
    """Rod/boundary crossings as (arc length, edge index, point), sorted by arc length."""
    seg, edge, t, _ = segment_intersections(nodes[:-1], nodes[1:], poly.edge_starts, poly.edge_ends, tol=1e-9)
    h = spec.segment_length
    hits = []
    for i, j, ti in sorted(zip(seg.tolist(), edge.tolist(), t.tolist()), key=lambda e: (e[0] + e[2], e[1])):
        arc = min((i + ti) * h, spec.total_length)
        if abs(arc - spec.total_length) <= 1e-9 * spec.total_length:
            arc = spec.total_length
        point = nodes[i] + ti * (nodes[i + 1] - nodes[i])
        if hits and abs(hits[-1][0] - arc) < 1e-9:
            continue
        hits.append((arc, j, point))
    return hits


def find_proximal_contact(state: RodState, obj: PolygonLike, base_pose: Optional[Pose2D] = None) -> Optional[ContactPoint]:
    """
    Rod/boundary intersection closest to the whisker base.

    Args:
        state: Rod configuration (base frame).
        obj: Polygon in the world frame.
        base_pose: Pose of the whisker base (defaults to the state's pose).

    Returns:
        ContactPoint in the base frame, or None if the rod misses the object.
    """
    poly = as_polygon(obj)
    pose = base_pose or state.base_pose
    local = poly.transformed(pose.inverse())
    n_segments = len(state.node_positions) - 1
    spec_length = float(np.sum(np.linalg.norm(np.diff(state.node_positions, axis=0), axis=1)))
    seg, edge, t, _ = segment_intersections(
        state.node_positions[:-1], state.node_positions[1:], local.edge_starts, local.edge_ends, tol=1e-9
    )
    if len(seg) == 0:
        return None
    h = spec_length / n_segments
    arcs = (seg + t) * h
    k = int(np.lexsort((edge, arcs))[0])
    arc = min(float(arcs[k]), spec_length)
    if abs(arc - spec_length) <= 1e-9 * spec_length:
        arc = spec_length
    i = int(seg[k])
    point = state.node_positions[i] + t[k] * (state.node_positions[i + 1] - state.node_positions[i])
    normal = local.outward_normals()[int(edge[k])]
    return ContactPoint(tuple(point), arc, tuple(normal), 0.0)


@dataclass(frozen=True)
class _Candidate:
    constraint: SurfaceConstraint  # base frame
    depth: float


def _project_on_rod(spec: WhiskerSpec, nodes: np.ndarray, psi: np.ndarray, q: np.ndarray) -> Tuple[float, float, np.ndarray]:
    """Arc length of the closest rod point, signed side distance and left normal there."""
    a = nodes[:-1]
    ab = nodes[1:] - a
    t = np.clip(np.sum((q - a) * ab, axis=1) / np.sum(ab * ab, axis=1), 0.0, 1.0)
    proj = a + t[:, None] * ab
    i = int(np.argmin(np.linalg.norm(q - proj, axis=1)))
    left = np.array([-math.sin(psi[i]), math.cos(psi[i])])
    s = min((i + float(t[i])) * spec.segment_length, spec.total_length)
    return s, float((q - proj[i]) @ left), left


def _vertex_candidate(spec: WhiskerSpec, nodes: np.ndarray, psi: np.ndarray, vertices: np.ndarray,
                      lo: float, hi: float) -> Optional[_Candidate]:
    """Deepest vertex whose closest rod point lies in [lo, hi); the rod is pushed past it."""
    best = None
    for q in vertices:
        s, d, left = _project_on_rod(spec, nodes, psi, q)
        if not lo <= s < hi or s >= spec.total_length - 1e-9:
            continue
        if best is None or abs(d) > best.depth:
            normal = left if d > 0 else -left
            best = _Candidate(SurfaceConstraint(s, tuple(q), tuple(normal)), abs(d))
    return best


def _node_candidate(spec: WhiskerSpec, nodes: np.ndarray, poly: PolyObject, edges: List[int],
                    lo: float, hi: float) -> Optional[_Candidate]:
    """Deepest rod node inside the run, pushed out across the given edges."""
    h = spec.segment_length
    idx = [k for k in range(1, len(nodes) - 1) if lo < k * h < hi]
    if not idx:
        return None
    a = poly.edge_starts[edges]
    ab = poly.edge_ends[edges] - a
    best = None
    for k in idx:
        t = np.clip(np.sum((nodes[k] - a) * ab, axis=1) / np.sum(ab * ab, axis=1), 0.0, 1.0)
        proj = a + t[:, None] * ab
        dist = np.linalg.norm(proj - nodes[k], axis=1)
        m = int(np.argmin(dist))
        if dist[m] < 1e-12:
            continue
        if best is None or dist[m] > best.depth:
            normal = (proj[m] - nodes[k]) / dist[m]
            best = _Candidate(SurfaceConstraint(k * h, tuple(proj[m]), tuple(normal)), float(dist[m]))
    return best


def _deepest(*cands: Optional[_Candidate]) -> Optional[_Candidate]:
    found = [c for c in cands if c is not None]
    return max(found, key=lambda c: c.depth) if found else None


def _penetration_candidates(spec: WhiskerSpec, theta: np.ndarray, poly: PolyObject) -> List[_Candidate]:
    """
    Ways of pushing the most proximal penetrated run of the rod out of the polygon.

    A run that enters and exits cuts the polygon into two pieces. Clearing
    either piece is one candidate, placed at whatever sticks out furthest:
    a vertex of that piece, or a rod node pressed against one of its edges.
    A run ending inside the polygon also offers a tip contact toward the
    nearest boundary point. Runs that are shallower than the contact
    tolerance are treated as touching.

    Returns:
        Candidates for one run sorted by depth, shallowest first; empty when
        the rod is clear.
    """
    nodes, psi = joint_kinematics(spec, theta)
    crossings = _rod_crossings(spec, nodes, poly)
    L = spec.total_length
    n = len(poly.vertices)
    bounds = [c[0] for c in crossings] + [L]
    for k, (_, e_in, _) in enumerate(crossings):
        lo, hi = bounds[k], bounds[k + 1]
        probe, _ = _point_at(spec, nodes, psi, 0.5 * (lo + hi))
        tip_run = k == len(crossings) - 1
        inside = poly.contains(nodes[-1] if tip_run else probe)[0]
        if hi - lo <= 1e-12 or not inside:
            continue

        candidates = []
        if not tip_run:
            e_out = crossings[k + 1][1]
            # entering and leaving through one edge leaves a vertex-free sliver on one side
            for start, count in ((e_in, (e_out - e_in) % n), (e_out, (e_in - e_out) % n or n)):
                edges = [(start + m) % n for m in range(count + 1)] if count else [start]
                verts = poly.vertices[[(start + 1 + m) % n for m in range(count)]] if count else np.empty((0, 2))
                cand = _deepest(
                    _vertex_candidate(spec, nodes, psi, verts, lo, hi),
                    _node_candidate(spec, nodes, poly, edges, lo, hi),
                )
                if cand is not None:
                    candidates.append(cand)
        else:
            ahead = [q for q in poly.vertices if lo <= _project_on_rod(spec, nodes, psi, q)[0] < L]
            for sign in (1.0, -1.0):
                side = [q for q in ahead if sign * _project_on_rod(spec, nodes, psi, q)[1] > 0]
                cand = _vertex_candidate(spec, nodes, psi, np.asarray(side).reshape(-1, 2), lo, hi)
                if cand is not None:
                    candidates.append(cand)
            depth, q = closest_surface_point(nodes[-1], poly)
            if depth > 1e-12:
                normal = (q - nodes[-1]) / depth
                candidates.append(_Candidate(SurfaceConstraint(L, tuple(q), tuple(normal)), depth))

        candidates.sort(key=lambda c: c.depth)
        if candidates and candidates[0].depth > CONTACT_DEPTH_TOLERANCE:
            return candidates
    return []


def resolve_contact(spec: WhiskerSpec, base_pose: Pose2D, obj: PolyObject,
                    previous: Optional[RodState] = None) -> RodState:
    """
    Quasistatic configuration of the whisker pressed by a rigid polygon.

    Starts from the previous step (if any), keeps the contact on the same
    side of the rod, and switches the active vertex while another part of
    the object still penetrates the rod.

    Args:
        spec: Whisker geometry.
        base_pose: Current base pose (world).
        obj: Object polygon in the world frame.
        previous: State from the previous sweep step, used as warm start.

    Returns:
        RodState in the base frame; `contact` is None when the rod is free.

    Raises:
        SolverDivergenceError: Contact could not be resolved.
    """
    local = obj.transformed(base_pose.inverse())
    rest = build_rest_shape(spec, base_pose)
    rest_candidates = _penetration_candidates(spec, rest.joint_angles, local)
    if not rest_candidates:
        return rest

    theta = rest.joint_angles
    preferred = None
    queue: List[_Candidate] = []
    if previous is not None and previous.contact is not None:
        theta = previous.joint_angles
        to_world = previous.base_pose
        q = base_pose.inverse_apply(to_world.apply(np.asarray(previous.contact.position)))
        preferred = base_pose.inverse_apply_vector(to_world.apply_vector(np.asarray(previous.contact.normal)))
        nodes, psi = joint_kinematics(spec, theta)
        s, _, left = _project_on_rod(spec, nodes, psi, q)
        normal = left if left @ preferred >= 0 else -left
        if previous.contact.arc_length >= spec.total_length - 1e-9:
            s, normal = spec.total_length, preferred / np.linalg.norm(preferred)
        queue.append(_Candidate(SurfaceConstraint(s, tuple(q), tuple(normal)), 0.0))

    def ordered(cands: List[_Candidate]) -> List[_Candidate]:
        if preferred is None:
            return cands
        same = [c for c in cands if np.dot(c.constraint.normal, preferred) > 0]
        return same + [c for c in cands if np.dot(c.constraint.normal, preferred) <= 0]

    warm = _penetration_candidates(spec, theta, local) if previous is not None else []
    queue.extend(ordered(warm) or ordered(rest_candidates))
    best: Optional[Tuple[float, RodState]] = None
    tried = 0
    while queue and tried < CONTACT_MAX_ITERATIONS:
        cand = queue.pop(0)
        tried += 1
        try:
            state = solve_equilibrium(spec, Pose2D(), cand.constraint, initial_angles=theta)
        except SolverDivergenceError as e:
            logger.debug(f"Candidate at s={cand.constraint.arc_length:.3f} failed: {e}")
            continue
        if state.contact is None:
            continue
        remaining = _penetration_candidates(spec, state.joint_angles, local)
        depth = remaining[0].depth if remaining else 0.0
        if depth <= CONTACT_DEPTH_TOLERANCE:
            return _rebase(state, base_pose)
        if best is None or depth < best[0]:
            best = (depth, state)
        theta = state.joint_angles
        queue = ordered(remaining)

    if best is not None and best[0] < 0.05:
        logger.debug(f"Contact resolution settled with residual penetration {best[0]:.2e} mm")
        return _rebase(best[1], base_pose)
    raise SolverDivergenceError("Contact against polygon could not be resolved",
                                float("nan") if best is None else best[0], tried)


def _rebase(state: RodState, pose: Pose2D) -> RodState:
    return replace(state, base_pose=pose)
