"""Deterministic quasi-static 2-D tabletop world.

Rigid objects live on integer stacking levels; bead chains are settled by
projected-constraint relaxation after every manipulation.  Stepping is a pure
function from state to state: identical (seed, action sequence, profile)
yields bit-identical states and renderings.
"""

from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass, field, replace
from typing import NamedTuple, Optional, Sequence

import numpy as np

from .geometry import GeometryError, Pose2, WorkspaceMap, wrap_angle

# Palette indices; channels 0-2 of a rendering hold these RGB values.
COLOR_BACKGROUND = 0
COLOR_PLATE = 1
COLOR_PEG = 2
COLOR_BASE = 3
COLOR_RED = 4
COLOR_ORANGE = 5
COLOR_YELLOW = 6
COLOR_GREEN = 7
COLOR_BLUE = 8
COLOR_PURPLE = 9
COLOR_CYAN = 10
COLOR_PINK = 11

PALETTE = np.array(
    [
        (0.92, 0.92, 0.92),
        (0.25, 0.25, 0.25),
        (0.45, 0.30, 0.20),
        (0.40, 0.40, 0.40),
        (0.85, 0.10, 0.10),
        (0.90, 0.55, 0.10),
        (0.95, 0.85, 0.10),
        (0.10, 0.65, 0.15),
        (0.15, 0.30, 0.85),
        (0.55, 0.15, 0.75),
        (0.10, 0.75, 0.75),
        (0.90, 0.35, 0.60),
    ],
    dtype=np.float64,
)

MOVABLE_KINDS = ("disk", "block")
FIXTURE_KINDS = ("peg", "plate", "base")


@dataclass(frozen=True)
class SimConfig:
    """World constants; exposed so task tolerances stay auditable."""

    grasp_radius_px: float = 1.5
    block_height: float = 0.02
    bead_height: float = 0.008
    settle_iterations: int = 64
    eps_chain: float = 0.02
    eps_penetration: float = 1e-4
    drag_window: int = 6


@dataclass(frozen=True)
class PrimitiveProfile:
    """Transport style of the two-pose primitive."""

    lift_class: str  # "low_slow" | "high_fast"
    drag_coupling: float  # fraction of chain disturbance during transport

    def __post_init__(self):
        if self.lift_class not in ("low_slow", "high_fast"):
            raise ValueError(f"unknown lift class {self.lift_class!r}")
        if not 0.0 <= self.drag_coupling <= 1.0:
            raise ValueError(f"drag coupling must be in [0,1], got {self.drag_coupling}")


# Slow low lift disturbs the cable half as much as the fast high lift.
LOW_SLOW = PrimitiveProfile("low_slow", 0.25)
HIGH_FAST = PrimitiveProfile("high_fast", 0.5)
HIGH_FAST_RIGID = PrimitiveProfile("high_fast", 0.0)


@dataclass(frozen=True)
class RigidObject:
    id: int
    kind: str  # disk | block | peg | plate | base
    shape: tuple[float, ...]  # (radius,) or (half_x, half_y)
    color_class: int
    pose: Pose2
    level: int = 0

    def __post_init__(self):
        if self.kind not in MOVABLE_KINDS + FIXTURE_KINDS:
            raise ValueError(f"unknown kind {self.kind!r}")
        if any(v <= 0 for v in self.shape):
            raise ValueError(f"non-positive shape {self.shape}")
        if self.kind in FIXTURE_KINDS and self.level != 0:
            raise ValueError(f"{self.kind} is immovable and must sit at level 0")

    @property
    def movable(self) -> bool:
        return self.kind in MOVABLE_KINDS

    @property
    def radius(self) -> float:
        return self.shape[0]

    @property
    def half_extents(self) -> tuple[float, float]:
        return self.shape[0], self.shape[1]


@dataclass(frozen=True, eq=False)
class BeadChain:
    """Ordered bead positions (n, 2) with a fixed rest spacing."""

    beads: np.ndarray
    spacing: float
    closed: bool
    colors: np.ndarray
    anchored_index: Optional[int] = None
    anchor_xy: Optional[tuple[float, float]] = None

    def __post_init__(self):
        beads = np.asarray(self.beads, dtype=np.float64)
        object.__setattr__(self, "beads", beads)
        object.__setattr__(self, "colors", np.asarray(self.colors, dtype=np.int64))
        if beads.ndim != 2 or beads.shape[0] < 2 or beads.shape[1] != 2:
            raise ValueError(f"need >= 2 beads of 2-D points, got {beads.shape}")
        if self.spacing <= 0:
            raise ValueError("spacing must be positive")
        if len(self.colors) != len(beads):
            raise ValueError("one color class per bead required")
        if self.anchored_index is not None and self.anchor_xy is None:
            object.__setattr__(self, "anchor_xy", tuple(beads[self.anchored_index]))

    @property
    def n(self) -> int:
        return self.beads.shape[0]

    @property
    def bead_radius(self) -> float:
        return self.spacing / 2.0

    def edges(self) -> list[tuple[int, int]]:
        e = [(i, i + 1) for i in range(self.n - 1)]
        if self.closed:
            e.append((self.n - 1, 0))
        return e

    def total_length(self) -> float:
        d = np.linalg.norm(np.diff(self.beads, axis=0), axis=1).sum()
        if self.closed:
            d += float(np.linalg.norm(self.beads[-1] - self.beads[0]))
        return float(d)


@dataclass(frozen=True)
class WorldState:
    objects: tuple[RigidObject, ...]
    chains: tuple[BeadChain, ...]
    map: WorkspaceMap
    seed: int = 0
    sim: SimConfig = field(default_factory=SimConfig)

    def object_by_id(self, oid: int) -> RigidObject:
        for o in self.objects:
            if o.id == oid:
                return o
        raise KeyError(f"no object with id {oid}")


class Circle(NamedTuple):
    center: tuple[float, float]
    radius: float


class SettleResult(NamedTuple):
    chain: BeadChain
    spacing_error: float  # max |edge length - spacing|
    penetration: float  # max residual circle penetration

    def feasible(self, cfg: SimConfig) -> bool:
        return (
            self.spacing_error <= cfg.eps_chain * self.chain.spacing
            and self.penetration <= cfg.eps_penetration
        )


def settle_chain(
    chain: BeadChain,
    obstacles: Sequence[Circle],
    iterations: int,
    pins: Optional[dict[int, tuple[float, float]]] = None,
) -> SettleResult:
    """Gauss-Seidel relaxation of spacing and circle push-out constraints.

    ``pins`` maps bead indices to fixed positions (grasped or anchored
    beads).  Infeasible pin configurations are returned best-effort with the
    residuals reporting the unsatisfied constraints.
    """
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    pins = dict(pins or {})
    if chain.anchored_index is not None:
        pins.setdefault(chain.anchored_index, chain.anchor_xy)
    pos = chain.beads.copy()
    for idx, xy in pins.items():
        pos[idx] = xy
    edges = chain.edges()
    pinned = set(pins)
    spacing = chain.spacing
    n = chain.n

    # Tether limits: a bead can never lie farther from a pin than its chain
    # distance allows; projecting onto these long-range constraints makes
    # taut configurations converge in a handful of sweeps.
    tether_by_pin = {}
    for idx, xy in pins.items():
        steps = np.abs(np.arange(n) - idx)
        if chain.closed:
            steps = np.minimum(steps, n - steps)
        tether_by_pin[idx] = (np.asarray(xy, dtype=np.float64), steps * spacing)
    tethers = list(tether_by_pin.values())
    pin_list = sorted(pins)
    pin_pairs = [
        (tether_by_pin[a], tether_by_pin[b]) for a, b in zip(pin_list, pin_list[1:])
    ]

    for _ in range(iterations):
        for anchor, max_dist in tethers:
            d = pos - anchor
            dist = np.hypot(d[:, 0], d[:, 1])
            over = dist > np.maximum(max_dist, 1e-12)
            if np.any(over):
                scale = max_dist[over] / dist[over]
                pos[over] = anchor + d[over] * scale[:, None]
        for (pa, da), (pb, db) in pin_pairs:
            _project_lens(pos, pinned, pa, da, pb, db)
        for i, j in edges:
            d = pos[j] - pos[i]
            dist = math.hypot(d[0], d[1])
            if dist < 1e-12:
                d = np.array([spacing * 1e-3, 0.0])
                dist = spacing * 1e-3
            err = dist - spacing
            if err == 0.0:
                continue
            corr = (err / dist) * d
            i_pin, j_pin = i in pinned, j in pinned
            if i_pin and j_pin:
                continue
            if i_pin:
                pos[j] -= corr
            elif j_pin:
                pos[i] += corr
            else:
                pos[i] += 0.5 * corr
                pos[j] -= 0.5 * corr
        for (cx, cy), rad in obstacles:
            d = pos - (cx, cy)
            dist = np.hypot(d[:, 0], d[:, 1])
            inside = dist < rad
            for k in np.nonzero(inside)[0]:
                if k in pinned:
                    continue
                if dist[k] < 1e-12:
                    pos[k] = (cx + rad, cy)
                else:
                    pos[k] = (cx, cy) + d[k] * (rad / dist[k])

    lengths = [float(np.linalg.norm(pos[j] - pos[i])) for i, j in edges]
    spacing_error = max(abs(l - spacing) for l in lengths)
    penetration = 0.0
    for (cx, cy), rad in obstacles:
        dist = np.hypot(pos[:, 0] - cx, pos[:, 1] - cy)
        penetration = max(penetration, float(np.max(rad - dist, initial=0.0)))
    settled = replace(chain, beads=pos)
    return SettleResult(settled, spacing_error, penetration)


def _project_lens(pos, pinned, pa, da, pb, db):
    """Project beads onto ball(pa, da) & ball(pb, db) (per-bead radii arrays).

    When the two tether balls of a bead barely intersect (a taut span), plain
    alternating projection crawls; the closed-form lens projection lands each
    violating bead directly on the feasible set.
    """
    axis = pb - pa
    span = math.hypot(axis[0], axis[1])
    if span < 1e-12:
        return
    u = axis / span
    v = np.array([-u[1], u[0]])
    ra = np.maximum(da, 1e-12)
    rb = np.maximum(db, 1e-12)
    dist_a = np.hypot(pos[:, 0] - pa[0], pos[:, 1] - pa[1])
    dist_b = np.hypot(pos[:, 0] - pb[0], pos[:, 1] - pb[1])
    bad = (dist_a > ra) & (dist_b > rb)
    for k in np.nonzero(bad)[0]:
        if k in pinned:
            continue
        if span >= ra[k] + rb[k]:
            # Balls disjoint or tangent: unique nearest feasible point on axis.
            pos[k] = pa + u * (ra[k] + 0.5 * max(0.0, span - ra[k] - rb[k]))
            continue
        cand_a = pa + (pos[k] - pa) * (ra[k] / dist_a[k])
        if math.hypot(cand_a[0] - pb[0], cand_a[1] - pb[1]) <= rb[k] + 1e-12:
            pos[k] = cand_a
            continue
        cand_b = pb + (pos[k] - pb) * (rb[k] / dist_b[k])
        if math.hypot(cand_b[0] - pa[0], cand_b[1] - pa[1]) <= ra[k] + 1e-12:
            pos[k] = cand_b
            continue
        # Nearest circle-circle intersection point.
        a = (span**2 + ra[k] ** 2 - rb[k] ** 2) / (2 * span)
        h = math.sqrt(max(0.0, ra[k] ** 2 - a**2))
        side = np.dot(pos[k] - pa, v)
        pos[k] = pa + u * a + v * (h if side >= 0 else -h)


def _rect_corners(center, theta, hx, hy):
    c, s = math.cos(theta), math.sin(theta)
    axes = np.array([[c, s], [-s, c]])  # rows: local x and y axes in world
    corners = []
    for sx in (-1, 1):
        for sy in (-1, 1):
            corners.append(center + sx * hx * axes[0] + sy * hy * axes[1])
    return np.array(corners), axes


def footprints_overlap(a: RigidObject, b: RigidObject) -> bool:
    """Exact overlap test between disk/rect footprints."""
    a_circ = len(a.shape) == 1
    b_circ = len(b.shape) == 1
    pa = np.array([a.pose.x, a.pose.y])
    pb = np.array([b.pose.x, b.pose.y])
    if a_circ and b_circ:
        return float(np.linalg.norm(pa - pb)) < a.radius + b.radius
    if a_circ != b_circ:
        circ, rect = (a, b) if a_circ else (b, a)
        pc = np.array([circ.pose.x, circ.pose.y])
        pr = np.array([rect.pose.x, rect.pose.y])
        c, s = math.cos(rect.pose.theta), math.sin(rect.pose.theta)
        d = pc - pr
        local = np.array([c * d[0] + s * d[1], -s * d[0] + c * d[1]])
        hx, hy = rect.half_extents
        clamped = np.clip(local, [-hx, -hy], [hx, hy])
        return float(np.linalg.norm(local - clamped)) < circ.radius
    # Rect-rect separating axis test over both rects' axes.
    ca, axes_a = _rect_corners(pa, a.pose.theta, *a.half_extents)
    cb, axes_b = _rect_corners(pb, b.pose.theta, *b.half_extents)
    for axis in np.vstack([axes_a, axes_b]):
        proj_a = ca @ axis
        proj_b = cb @ axis
        if proj_a.max() <= proj_b.min() or proj_b.max() <= proj_a.min():
            return False
    return True


def _stack_level(objects: Sequence[RigidObject], moved: RigidObject) -> int:
    """Level acquired by ``moved`` at its (already updated) pose."""
    below = [
        o.level
        for o in objects
        if o.id != moved.id and o.movable and footprints_overlap(o, moved)
    ]
    return max(below) + 1 if below else 0


def peg_obstacles(state: WorldState, inflate: float) -> list[Circle]:
    return [
        Circle((o.pose.x, o.pose.y), o.radius + inflate)
        for o in state.objects
        if o.kind == "peg"
    ]


def _project_out(point: np.ndarray, circles: Sequence[Circle]) -> np.ndarray:
    p = point.copy()
    for (cx, cy), rad in circles:
        d = p - (cx, cy)
        dist = math.hypot(d[0], d[1])
        if dist < rad:
            if dist < 1e-12:
                p = np.array([cx + rad, cy])
            else:
                p = np.array([cx, cy]) + d * (rad / dist)
    return p


def _chain_index_distance(chain: BeadChain, i: int, j: int) -> int:
    d = abs(i - j)
    return min(d, chain.n - d) if chain.closed else d


def step_pick_place(
    state: WorldState,
    action: tuple[Pose2, Pose2],
    profile: PrimitiveProfile,
) -> WorldState:
    """Execute the two-pose primitive; a grasp miss returns the state unchanged."""
    t_pick, t_place = action
    span_x, span_y = state.map.extent
    for pose in (t_pick, t_place):
        if not (0 <= pose.x - state.map.origin.x < span_x and 0 <= pose.y - state.map.origin.y < span_y):
            raise GeometryError(f"action pose ({pose.x}, {pose.y}) outside workspace")

    grasp_radius = state.sim.grasp_radius_px * state.map.resolution
    pick_xy = np.array([t_pick.x, t_pick.y])

    # Candidates: (render height, -distance) picks the topmost, nearest entity.
    best = None  # (key, kind_tag, payload)
    for o in state.objects:
        if not o.movable:
            continue
        dist = float(np.linalg.norm(np.array([o.pose.x, o.pose.y]) - pick_xy))
        if dist <= grasp_radius:
            key = ((o.level + 1) * state.sim.block_height, -dist)
            if best is None or key > best[0]:
                best = (key, "rigid", o)
    for ci, chain in enumerate(state.chains):
        dists = np.linalg.norm(chain.beads - pick_xy, axis=1)
        bi = int(np.argmin(dists))
        if dists[bi] <= grasp_radius:
            key = (state.sim.bead_height, -float(dists[bi]))
            if best is None or key > best[0]:
                best = (key, "bead", (ci, bi))

    if best is None:
        return state  # silent miss, like a failed suction grasp

    if best[1] == "rigid":
        obj = best[2]
        new_theta = wrap_angle(obj.pose.theta + (t_place.theta - t_pick.theta))
        moved = replace(obj, pose=Pose2(t_place.x, t_place.y, new_theta))
        moved = replace(moved, level=_stack_level(state.objects, moved))
        objects = tuple(moved if o.id == obj.id else o for o in state.objects)
        return replace(state, objects=objects)

    ci, bi = best[2]
    chain = state.chains[ci]
    obstacles = peg_obstacles(state, inflate=chain.bead_radius)
    target = _project_out(np.array([t_place.x, t_place.y]), obstacles)
    start = chain.beads[bi].copy()
    pos = chain.beads.copy()
    delta = target - start
    if profile.drag_coupling > 0.0 and state.sim.drag_window > 0:
        for m in range(chain.n):
            if m == bi:
                continue
            idx_dist = _chain_index_distance(chain, m, bi)
            falloff = max(0.0, 1.0 - idx_dist / state.sim.drag_window)
            if falloff > 0.0:
                pos[m] = pos[m] + profile.drag_coupling * falloff * delta
    pos[bi] = target
    moved_chain = replace(chain, beads=pos)
    result = settle_chain(
        moved_chain, obstacles, state.sim.settle_iterations, pins={bi: tuple(target)}
    )
    chains = tuple(result.chain if i == ci else c for i, c in enumerate(state.chains))
    return replace(state, chains=chains)


def render_topdown(state: WorldState) -> np.ndarray:
    """Render the 6-channel observation: RGB of the topmost entity plus a
    replicated height channel; background is color class 0 at height 0."""
    m = state.map
    h, w = m.height, m.width
    img = np.empty((h, w, 6), dtype=np.float32)
    img[:, :, :3] = PALETTE[COLOR_BACKGROUND]
    img[:, :, 3:] = 0.0

    xs = m.origin.x + (np.arange(h) + 0.5) * m.resolution
    ys = m.origin.y + (np.arange(w) + 0.5) * m.resolution
    gx = xs[:, None]
    gy = ys[None, :]

    layers = []  # (height, order, mask_fn args)
    order = 0
    for o in state.objects:
        height = (o.level + 1) * state.sim.block_height
        layers.append((height, order, o, None))
        order += 1
    for chain in state.chains:
        for bi in range(chain.n):
            layers.append((state.sim.bead_height, order, None, (chain, bi)))
            order += 1
    layers.sort(key=lambda t: (t[0], t[1]))

    for height, _, obj, bead in layers:
        if obj is not None:
            if len(obj.shape) == 1:
                mask = (gx - obj.pose.x) ** 2 + (gy - obj.pose.y) ** 2 <= obj.radius**2
            else:
                c, s = math.cos(obj.pose.theta), math.sin(obj.pose.theta)
                dx = gx - obj.pose.x
                dy = gy - obj.pose.y
                lx = c * dx + s * dy
                ly = -s * dx + c * dy
                hx, hy = obj.half_extents
                mask = (np.abs(lx) <= hx) & (np.abs(ly) <= hy)
            color = PALETTE[obj.color_class]
        else:
            chain, bi = bead
            bx, by = chain.beads[bi]
            mask = (gx - bx) ** 2 + (gy - by) ** 2 <= chain.bead_radius**2
            color = PALETTE[int(chain.colors[bi])]
        img[mask, :3] = color
        img[mask, 3:] = height
    return img


def snapshot_hash(state: WorldState) -> int:
    """Stable 64-bit digest of the canonicalized physical state."""
    blob = bytearray()

    def q(v: float) -> int:
        return int(round(v * 1e9))

    blob += struct.pack("<iiq", state.map.height, state.map.width, q(state.map.resolution))
    blob += struct.pack("<qqq", q(state.map.origin.x), q(state.map.origin.y), q(state.map.origin.theta))
    for o in sorted(state.objects, key=lambda o: o.id):
        blob += struct.pack("<i", o.id)
        blob += o.kind.encode()
        blob += struct.pack(f"<{len(o.shape)}q", *(q(v) for v in o.shape))
        blob += struct.pack("<iqqqi", o.color_class, q(o.pose.x), q(o.pose.y), q(o.pose.theta), o.level)
    for chain in state.chains:
        blob += struct.pack("<qii", q(chain.spacing), int(chain.closed), chain.n)
        blob += struct.pack("<i", -1 if chain.anchored_index is None else chain.anchored_index)
        coords = np.round(chain.beads * 1e9).astype(np.int64)
        blob += coords.tobytes()
        blob += chain.colors.astype(np.int64).tobytes()
    digest = hashlib.blake2b(bytes(blob), digest_size=8).digest()
    return int.from_bytes(digest, "little")
