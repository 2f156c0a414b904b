"""Task modules: randomized initialization, goal metrics, and composition.

Four kinds: disks onto a plate (placing), a closed bead loop over two pegs
(chaining), an anchored cable slalomed around pegs (routing), and a color
pyramid of blocks (stacking).  A problem composes 1-3 kinds at fixed anchor
slots along the table's long axis; each module owns its objects and is
evaluated in isolation.  All rewards are dispensed in exact per-point
fractions (1/9, 1/2, 1/(pegs+1), 1/6) and a module's reward never decreases
within an episode.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .geometry import Pose2, WorkspaceMap, default_map, wrap_angle
from .sim import (
    COLOR_BLUE,
    COLOR_CYAN,
    COLOR_GREEN,
    COLOR_ORANGE,
    COLOR_PEG,
    COLOR_PINK,
    COLOR_PLATE,
    COLOR_PURPLE,
    COLOR_RED,
    COLOR_YELLOW,
    HIGH_FAST,
    HIGH_FAST_RIGID,
    LOW_SLOW,
    BeadChain,
    PrimitiveProfile,
    RigidObject,
    SimConfig,
    WorldState,
    render_topdown,
)

SLOT_ANCHORS = (Pose2(1.0 / 6.0, 0.25), Pose2(0.5, 0.25), Pose2(5.0 / 6.0, 0.25))

TASK_KINDS = ("placing", "chaining", "routing", "stacking")

# The ten benchmark problems: four single, four double, two triple.
PROBLEM_NAMES = (
    "placing",
    "stacking",
    "chaining",
    "routing",
    "placing+routing",
    "stacking+routing",
    "placing+chaining",
    "placing+stacking",
    "placing+chaining+routing",
    "placing+stacking+routing",
)


class CompositionError(ValueError):
    pass


@dataclass(frozen=True)
class EvalPoint:
    pose: Pose2
    tolerance: float
    tag: tuple

    def __post_init__(self):
        if self.tolerance <= 0:
            raise ValueError("tolerance must be positive")


@dataclass(frozen=True)
class GoalSpec:
    eval_points: tuple[EvalPoint, ...]
    sequential: bool = False


@dataclass(frozen=True)
class PlacingParams:
    plate_id: int
    disk_ids: tuple[int, ...]  # index parity = disk parity
    even_big: bool
    odd_big: bool
    assignment: dict[int, int]  # disk id -> eval point index


@dataclass(frozen=True, eq=False)
class ChainingParams:
    peg_ids: tuple[int, int]
    distance: float
    peg_radius: float
    theta: float
    chain_index: int
    wrap_targets: np.ndarray  # per-bead goal positions on the stadium loop
    check_points: tuple  # per peg: ((xy_a), (xy_b)) diametric contact points


@dataclass(frozen=True, eq=False)
class RoutingParams:
    peg_ids: tuple[int, ...]
    winding_sides: tuple[int, ...]  # +1 cable passes on +y-col side, -1 opposite
    chain_index: int
    route_targets: np.ndarray  # per-bead goal positions along the full route
    wrap_length: float  # arc length anchor -> exit of last peg


@dataclass(frozen=True)
class StackingParams:
    base_id: int
    block_ids: tuple[int, ...]
    base_theta: float
    goal_poses: tuple[Pose2, ...]  # per block, in goal-slot order of block_ids
    goal_levels: tuple[int, ...]


@dataclass(frozen=True)
class TaskModule:
    kind: str
    anchor: Pose2
    params: object
    goal: GoalSpec
    profile: PrimitiveProfile
    max_steps: int
    n_goal_objects: int
    object_ids: tuple[int, ...]
    chain_index: Optional[int] = None


@dataclass(frozen=True)
class Problem:
    name: str
    modules: tuple[TaskModule, ...]

    def __post_init__(self):
        kinds = [m.kind for m in self.modules]
        if not 1 <= len(kinds) <= 3:
            raise CompositionError(f"problems hold 1-3 modules, got {len(kinds)}")
        if len(set(kinds)) != len(kinds):
            raise CompositionError(f"module kinds must be unique, got {kinds}")

    @property
    def max_steps(self) -> int:
        return sum(m.max_steps for m in self.modules)


@dataclass(frozen=True)
class EvalState:
    """Per-module sets of achieved eval-point indices; rewards derive from them."""

    achieved: tuple[frozenset, ...]

    @staticmethod
    def fresh(problem: Problem) -> "EvalState":
        return EvalState(tuple(frozenset() for _ in problem.modules))


def module_reward(problem: Problem, ev: EvalState, i: int) -> float:
    return len(ev.achieved[i]) / len(problem.modules[i].goal.eval_points)


def total_reward(problem: Problem, ev: EvalState) -> float:
    return sum(module_reward(problem, ev, i) for i in range(len(problem.modules)))


def completion(ev: EvalState, problem: Problem) -> int:
    """1 iff every module has earned its full reward."""
    for i in range(len(problem.modules)):
        if module_reward(problem, ev, i) < 1.0 - 1e-9:
            return 0
    return 1


# ---------------------------------------------------------------------------
# polyline helpers


def polyline_length(points: np.ndarray) -> float:
    return float(np.linalg.norm(np.diff(points, axis=0), axis=1).sum())


def resample_polyline(points: np.ndarray, n: int, closed: bool = False) -> np.ndarray:
    """n points at equal arc-length steps along a polyline."""
    pts = np.asarray(points, dtype=np.float64)
    if closed:
        pts = np.vstack([pts, pts[:1]])
    seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    total = cum[-1]
    targets = np.linspace(0.0, total, n, endpoint=not closed) if not closed else np.arange(n) * total / n
    out = np.empty((n, 2))
    j = 0
    for i, t in enumerate(targets):
        while j < len(seg) - 1 and cum[j + 1] < t:
            j += 1
        denom = seg[j] if seg[j] > 1e-12 else 1.0
        alpha = (t - cum[j]) / denom
        out[i] = pts[j] + alpha * (pts[j + 1] - pts[j])
    return out


def arc_points(center: np.ndarray, radius: float, beta0: float, beta1: float, step: float) -> np.ndarray:
    """Points along a circular arc from angle beta0 to beta1 (signed sweep)."""
    sweep = beta1 - beta0
    n = max(2, int(math.ceil(abs(sweep) * radius / step)) + 1)
    betas = np.linspace(beta0, beta1, n)
    return np.stack(
        [center[0] + radius * np.cos(betas), center[1] + radius * np.sin(betas)], axis=1
    )


def stadium_loop(p1: np.ndarray, p2: np.ndarray, radius: float, step: float) -> np.ndarray:
    """Closed racetrack path at a fixed distance around the segment p1-p2."""
    axis = p2 - p1
    phi = math.atan2(axis[1], axis[0])
    pieces = [
        arc_points(p1, radius, phi + math.pi / 2, phi + 3 * math.pi / 2, step),
        arc_points(p2, radius, phi - math.pi / 2, phi + math.pi / 2, step),
    ]
    return np.vstack([pieces[0], pieces[1]])


def winding_number(loop: np.ndarray, point: np.ndarray) -> int:
    """Signed turns of a closed polyline around a point."""
    d = loop - point
    ang = np.arctan2(d[:, 1], d[:, 0])
    inc = np.diff(np.concatenate([ang, ang[:1]]))
    inc = (inc + math.pi) % (2 * math.pi) - math.pi
    return int(round(inc.sum() / (2 * math.pi)))


# ---------------------------------------------------------------------------
# placing

PLATE_HALF = 0.075
GRID_PITCH = 0.05
DISK_BIG = 0.024
DISK_SMALL = 0.016
_EVEN_STAGE_Y = 0.07
_ODD_STAGE_Y = 0.43


def _grid_points(anchor: Pose2) -> list[tuple[Pose2, bool]]:
    """3x3 grid on the plate; checkerboard parity (corners+center = even)."""
    pts = []
    for i in range(3):
        for j in range(3):
            pose = Pose2(anchor.x + (i - 1) * GRID_PITCH, anchor.y + (j - 1) * GRID_PITCH)
            pts.append((pose, (i + j) % 2 == 0))
    return pts


def init_placing(rng, anchor: Pose2 = SLOT_ANCHORS[0], id_start: int = 0, chain_start: int = 0):
    """Nine disks (5 even staged left of the plate, 4 odd right) and a 3x3
    goal grid with parity zones; even/odd sizes drawn independently."""
    even_big = bool(rng.integers(0, 2))
    odd_big = bool(rng.integers(0, 2))
    r_even = DISK_BIG if even_big else DISK_SMALL
    r_odd = DISK_BIG if odd_big else DISK_SMALL

    plate = RigidObject(id_start, "plate", (PLATE_HALF, PLATE_HALF), COLOR_PLATE, anchor)
    objects = [plate]
    disk_ids = []
    even_slots = [anchor.x + (k - 2) * 0.055 for k in range(5)]
    odd_slots = [anchor.x + (k - 1.5) * 0.06 for k in range(4)]
    n_even = n_odd = 0
    for k in range(9):
        even = k % 2 == 0
        if even:
            x = even_slots[n_even]
            y = _EVEN_STAGE_Y
            n_even += 1
        else:
            x = odd_slots[n_odd]
            y = _ODD_STAGE_Y
            n_odd += 1
        jx, jy = rng.uniform(-0.008, 0.008, size=2)
        oid = id_start + 1 + k
        objects.append(
            RigidObject(
                oid,
                "disk",
                (r_even if even else r_odd,),
                COLOR_GREEN if even else COLOR_BLUE,
                Pose2(x + jx, y + jy),
            )
        )
        disk_ids.append(oid)

    points = _grid_points(anchor)
    eval_points = tuple(
        EvalPoint(pose, (r_even if even else r_odd) / 2, ("disk", "even" if even else "odd"))
        for pose, even in points
    )
    even_points = [i for i, (_, even) in enumerate(points) if even]
    odd_points = [i for i, (_, even) in enumerate(points) if not even]
    assignment = {}
    for disk_idx, point_idx in zip(
        [k for k in range(9) if k % 2 == 0], rng.permutation(even_points)
    ):
        assignment[disk_ids[disk_idx]] = int(point_idx)
    for disk_idx, point_idx in zip(
        [k for k in range(9) if k % 2 == 1], rng.permutation(odd_points)
    ):
        assignment[disk_ids[disk_idx]] = int(point_idx)

    params = PlacingParams(plate.id, tuple(disk_ids), even_big, odd_big, assignment)
    module = TaskModule(
        kind="placing",
        anchor=anchor,
        params=params,
        goal=GoalSpec(eval_points),
        profile=HIGH_FAST,
        max_steps=11,
        n_goal_objects=9,
        object_ids=tuple(o.id for o in objects),
    )
    return module, objects, []


# ---------------------------------------------------------------------------
# chaining

CHAIN_SPACING = 0.012
CHAIN_COMBOS = ((0.11, 0.014), (0.11, 0.020), (0.15, 0.014), (0.15, 0.020))
_PEG_CENTER_DY = 0.09
_POOL_CENTER_DY = -0.13


def init_chaining(rng, anchor: Pose2 = SLOT_ANCHORS[0], id_start: int = 0, chain_start: int = 0):
    """Two fixed pegs at a randomized distance/radius combo and orientation,
    plus a closed bead loop staged away from them."""
    distance, peg_radius = CHAIN_COMBOS[int(rng.integers(0, 4))]
    theta = float(rng.uniform(-math.pi / 4, math.pi / 4))
    center = np.array([anchor.x, anchor.y + _PEG_CENTER_DY])
    u = np.array([math.sin(theta), math.cos(theta)])
    p1 = center - (distance / 2) * u
    p2 = center + (distance / 2) * u

    pegs = [
        RigidObject(id_start, "peg", (peg_radius,), COLOR_PEG, Pose2(p1[0], p1[1])),
        RigidObject(id_start + 1, "peg", (peg_radius,), COLOR_PEG, Pose2(p2[0], p2[1])),
    ]

    bead_radius = CHAIN_SPACING / 2
    contact = peg_radius + bead_radius
    loop_len = 2 * distance + 2 * math.pi * contact
    n_beads = int(round(loop_len / CHAIN_SPACING)) + 2
    wrap_targets = resample_polyline(
        stadium_loop(p1, p2, contact, CHAIN_SPACING / 4), n_beads, closed=True
    )

    pool_center = np.array(
        [
            anchor.x + rng.uniform(-0.01, 0.01),
            anchor.y + _POOL_CENTER_DY + rng.uniform(-0.01, 0.01),
        ]
    )
    pool_radius = n_beads * CHAIN_SPACING / (2 * math.pi)
    angles = np.arange(n_beads) * 2 * math.pi / n_beads
    beads = pool_center + pool_radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    chain = BeadChain(
        beads, CHAIN_SPACING, closed=True, colors=np.full(n_beads, COLOR_CYAN)
    )

    v = np.array([u[1], -u[0]])  # perpendicular to the peg axis
    check_points = tuple(
        (tuple(p + contact * v), tuple(p - contact * v)) for p in (p1, p2)
    )
    eval_points = tuple(
        EvalPoint(Pose2(p[0], p[1]), 1.5 * CHAIN_SPACING, ("wrap", k))
        for k, p in enumerate((p1, p2))
    )
    params = ChainingParams(
        (pegs[0].id, pegs[1].id),
        distance,
        peg_radius,
        theta,
        chain_start,
        wrap_targets,
        check_points,
    )
    module = TaskModule(
        kind="chaining",
        anchor=anchor,
        params=params,
        goal=GoalSpec(eval_points),
        profile=LOW_SLOW,
        max_steps=4,
        n_goal_objects=2,
        object_ids=tuple(o.id for o in pegs),
        chain_index=chain_start,
    )
    return module, pegs, [chain]


# ---------------------------------------------------------------------------
# routing

ROUTE_SPACING = 0.010
ROUTE_PEG_RADIUS = 0.014
_ROUTE_ANCHOR_DY = -0.205
_ROUTE_COLUMN_DX = -0.05


def _route_path(anchor_xy, pegs, sides, contact, step):
    """Wrap path: anchor, then a half-arc around each peg on its winding side."""
    pieces = [np.array([anchor_xy])]
    for p, w in zip(pegs, sides):
        if w > 0:
            piece = arc_points(p, contact, -math.pi / 2, math.pi / 2, step)
        else:
            piece = arc_points(p, contact, -math.pi / 2, -3 * math.pi / 2, step)
        pieces.append(piece)
    return np.vstack(pieces)


def init_routing(rng, anchor: Pose2 = SLOT_ANCHORS[0], id_start: int = 0, chain_start: int = 0):
    """2-3 pegs along the slot with alternating winding sides and an anchored
    cable long enough to route them all with slack."""
    n_pegs = int(rng.integers(2, 4))
    first_side = 1 if rng.integers(0, 2) else -1
    sides = tuple(first_side * (-1) ** i for i in range(n_pegs))

    y = anchor.y + _ROUTE_ANCHOR_DY + 0.055 + float(rng.uniform(0.0, 0.03))
    peg_xy = []
    for _ in range(n_pegs):
        peg_xy.append(np.array([anchor.x + float(rng.uniform(-0.008, 0.008)), y]))
        y += float(rng.uniform(0.095, 0.115))
    pegs = [
        RigidObject(id_start + i, "peg", (ROUTE_PEG_RADIUS,), COLOR_PEG, Pose2(p[0], p[1]))
        for i, p in enumerate(peg_xy)
    ]

    bead_radius = ROUTE_SPACING / 2
    contact = ROUTE_PEG_RADIUS + bead_radius
    anchor_xy = np.array([anchor.x + _ROUTE_COLUMN_DX, anchor.y + _ROUTE_ANCHOR_DY])
    wrap = _route_path(anchor_xy, peg_xy, sides, contact, ROUTE_SPACING / 4)
    wrap_length = polyline_length(wrap)
    tail = 0.05 + 0.1 * wrap_length
    n_beads = int(round((wrap_length + tail) / ROUTE_SPACING)) + 1

    full_tail = (n_beads - 1) * ROUTE_SPACING - wrap_length
    end = wrap[-1] + np.array([0.0, full_tail])
    route_targets = resample_polyline(np.vstack([wrap, [end]]), n_beads)

    # Initial cable: a folded lay-out on the free column left of the pegs.
    lay = np.array(
        [
            anchor_xy,
            [anchor_xy[0], anchor.y + 0.19],
            [anchor_xy[0] - 0.045, anchor.y + 0.19],
            [anchor_xy[0] - 0.045, anchor.y - 0.2],
        ]
    )
    beads = resample_polyline(lay, n_beads)
    colors = np.full(n_beads, COLOR_PINK)
    colors[-1] = COLOR_YELLOW  # terminal bead marks the stretch end
    chain = BeadChain(beads, ROUTE_SPACING, closed=False, colors=colors, anchored_index=0)

    eval_points = []
    for i, (p, w) in enumerate(zip(peg_xy, sides)):
        cp = p + np.array([w * contact, 0.0])
        eval_points.append(EvalPoint(Pose2(cp[0], cp[1]), 1.5 * ROUTE_SPACING, ("route", i)))
    eval_points.append(EvalPoint(Pose2(end[0], end[1]), 2 * ROUTE_SPACING, ("stretch",)))

    params = RoutingParams(
        tuple(o.id for o in pegs), sides, chain_start, route_targets, wrap_length
    )
    module = TaskModule(
        kind="routing",
        anchor=anchor,
        params=params,
        goal=GoalSpec(tuple(eval_points), sequential=True),
        profile=LOW_SLOW,
        max_steps=n_pegs + 4,
        n_goal_objects=n_pegs,
        object_ids=tuple(o.id for o in pegs),
        chain_index=chain_start,
    )
    return module, pegs, [chain]


# ---------------------------------------------------------------------------
# stacking

BLOCK_HALF = 0.02
BASE_HALF = (0.035, 0.07)
_BASE_DY = 0.09
_STAGE_ROWS = (-0.15, -0.09)
_BLOCK_COLORS = (COLOR_RED, COLOR_ORANGE, COLOR_YELLOW, COLOR_GREEN, COLOR_BLUE, COLOR_PURPLE)

# Pyramid slots in the base frame (local y along the base's long axis).
_PYRAMID_LOCAL = ((0.0, -0.042), (0.0, 0.0), (0.0, 0.042), (0.0, -0.021), (0.0, 0.021), (0.0, 0.0))
_PYRAMID_LEVELS = (0, 0, 0, 1, 1, 2)


def init_stacking(rng, anchor: Pose2 = SLOT_ANCHORS[0], id_start: int = 0, chain_start: int = 0):
    """Six colored blocks staged in a 2x3 array; goal is a 3-2-1 pyramid on a
    base whose orientation is one of the 8 half-cardinal directions, with the
    color-to-slot assignment randomized."""
    k = int(rng.integers(0, 8))
    base_theta = wrap_angle(k * math.pi / 4)
    base_center = np.array([anchor.x, anchor.y + _BASE_DY])
    base = RigidObject(
        id_start, "base", BASE_HALF, 3, Pose2(base_center[0], base_center[1], base_theta)
    )

    objects = [base]
    block_ids = []
    i = 0
    for dy in _STAGE_ROWS:
        for dx in (-0.05, 0.0, 0.05):
            oid = id_start + 1 + i
            objects.append(
                RigidObject(
                    oid,
                    "block",
                    (BLOCK_HALF, BLOCK_HALF),
                    _BLOCK_COLORS[i],
                    Pose2(anchor.x + dx, anchor.y + dy),
                )
            )
            block_ids.append(oid)
            i += 1

    c, s = math.cos(base_theta), math.sin(base_theta)
    slot_world = [
        base_center + np.array([c * lx - s * ly, s * lx + c * ly])
        for lx, ly in _PYRAMID_LOCAL
    ]
    perm = rng.permutation(6)  # block index -> pyramid slot
    goal_poses = [None] * 6
    goal_levels = [0] * 6
    for block_idx, slot in enumerate(perm):
        goal_poses[block_idx] = Pose2(slot_world[slot][0], slot_world[slot][1], base_theta)
        goal_levels[block_idx] = _PYRAMID_LEVELS[slot]

    eval_points = tuple(
        EvalPoint(goal_poses[b], 0.25 * BLOCK_HALF, ("block", block_ids[b], goal_levels[b]))
        for b in range(6)
    )
    params = StackingParams(
        base.id, tuple(block_ids), base_theta, tuple(goal_poses), tuple(goal_levels)
    )
    module = TaskModule(
        kind="stacking",
        anchor=anchor,
        params=params,
        goal=GoalSpec(eval_points),
        profile=HIGH_FAST,
        max_steps=8,
        n_goal_objects=6,
        object_ids=tuple(o.id for o in objects),
    )
    return module, objects, []


INIT_FNS: dict[str, Callable] = {
    "placing": init_placing,
    "chaining": init_chaining,
    "routing": init_routing,
    "stacking": init_stacking,
}


# ---------------------------------------------------------------------------
# composition


def parse_problem_name(name: str) -> tuple[str, ...]:
    kinds = tuple(part.strip() for part in name.split("+"))
    for k in kinds:
        if k not in TASK_KINDS:
            raise CompositionError(f"unknown task kind {k!r} in {name!r}")
    return kinds


def compose(
    name: str,
    rng,
    map: Optional[WorkspaceMap] = None,
    sim: Optional[SimConfig] = None,
    seed: int = 0,
) -> tuple[WorldState, Problem, EvalState]:
    """Initialize every module of the named problem at its anchor slot."""
    kinds = parse_problem_name(name)
    map = map or default_map()
    sim = sim or SimConfig()
    modules = []
    objects: list[RigidObject] = []
    chains: list[BeadChain] = []
    for slot, kind in enumerate(kinds):
        module, objs, chs = INIT_FNS[kind](
            rng, anchor=SLOT_ANCHORS[slot], id_start=len(objects) + 100 * slot, chain_start=len(chains)
        )
        modules.append(module)
        objects.extend(objs)
        chains.extend(chs)

    # Guard against misconfigured anchors: staged footprints must not overlap
    # across modules.
    from .sim import footprints_overlap

    for i, mi in enumerate(modules):
        for mj in modules[i + 1 :]:
            for a in objects:
                if a.id not in mi.object_ids:
                    continue
                for b in objects:
                    if b.id in mj.object_ids and footprints_overlap(a, b):
                        raise CompositionError(
                            f"modules {mi.kind} and {mj.kind} overlap at init"
                        )

    if not chains:
        modules = [
            replace(m, profile=HIGH_FAST_RIGID)
            if m.profile.lift_class == "high_fast"
            else m
            for m in modules
        ]

    problem = Problem(name, tuple(modules))
    world = WorldState(tuple(objects), tuple(chains), map, seed=seed, sim=sim)
    return world, problem, EvalState.fresh(problem)


def active_profile(problem: Problem, ev: EvalState) -> PrimitiveProfile:
    """Motion profile of the first incomplete module, in problem order."""
    for i, m in enumerate(problem.modules):
        if module_reward(problem, ev, i) < 1.0 - 1e-9:
            return m.profile
    return problem.modules[-1].profile


# ---------------------------------------------------------------------------
# metrics


def _satisfied_placing(state: WorldState, module: TaskModule) -> set[int]:
    params: PlacingParams = module.params
    sat = set()
    disks = [state.object_by_id(d) for d in params.disk_ids]
    for idx, point in enumerate(module.goal.eval_points):
        want_even = point.tag[1] == "even"
        for k, disk in enumerate(disks):
            if (k % 2 == 0) != want_even:
                continue
            dx = disk.pose.x - point.pose.x
            dy = disk.pose.y - point.pose.y
            if math.hypot(dx, dy) <= point.tolerance:
                sat.add(idx)
                break
    return sat


def _satisfied_chaining(state: WorldState, module: TaskModule) -> set[int]:
    params: ChainingParams = module.params
    chain = state.chains[params.chain_index]
    sat = set()
    for idx, point in enumerate(module.goal.eval_points):
        peg_idx = point.tag[1]
        peg_xy = np.array([point.pose.x, point.pose.y])
        ok = True
        for cp in params.check_points[peg_idx]:
            d = np.linalg.norm(chain.beads - np.array(cp), axis=1)
            if d.min() > point.tolerance:
                ok = False
                break
        if ok and abs(winding_number(chain.beads, peg_xy)) != 1:
            ok = False
        if ok:
            sat.add(idx)
    return sat


def _satisfied_routing(state: WorldState, module: TaskModule) -> set[int]:
    params: RoutingParams = module.params
    chain = state.chains[params.chain_index]
    sat = set()
    for idx, point in enumerate(module.goal.eval_points):
        target = np.array([point.pose.x, point.pose.y])
        if point.tag[0] == "stretch":
            if np.linalg.norm(chain.beads[-1] - target) <= point.tolerance:
                sat.add(idx)
        else:
            d = np.linalg.norm(chain.beads - target, axis=1)
            if d.min() <= point.tolerance:
                sat.add(idx)
    return sat


def _block_angle_error(theta_a: float, theta_b: float) -> float:
    # Square blocks: orientation is defined modulo a quarter turn.
    d = (theta_a - theta_b) % (math.pi / 2)
    return min(d, math.pi / 2 - d)


def _satisfied_stacking(state: WorldState, module: TaskModule) -> set[int]:
    sat = set()
    for idx, point in enumerate(module.goal.eval_points):
        _, block_id, level = point.tag
        block = state.object_by_id(block_id)
        if block.level != level:
            continue
        if math.hypot(block.pose.x - point.pose.x, block.pose.y - point.pose.y) > point.tolerance:
            continue
        if _block_angle_error(block.pose.theta, point.pose.theta) > math.pi / 8:
            continue
        sat.add(idx)
    return sat


_SATISFIED_FNS = {
    "placing": _satisfied_placing,
    "chaining": _satisfied_chaining,
    "routing": _satisfied_routing,
    "stacking": _satisfied_stacking,
}


def satisfied_points(state: WorldState, module: TaskModule) -> set[int]:
    """Eval-point indices geometrically satisfied by the current state."""
    return _SATISFIED_FNS[module.kind](state, module)


def evaluate_step(
    state: WorldState, problem: Problem, ev: EvalState
) -> tuple[float, EvalState]:
    """Award newly satisfied goal points; routing points only as a prefix."""
    dr = 0.0
    new_sets = []
    for i, module in enumerate(problem.modules):
        old = ev.achieved[i]
        sat = satisfied_points(state, module)
        if module.goal.sequential:
            new = set(old)
            nxt = len(old)
            while nxt < len(module.goal.eval_points) and nxt in sat:
                new.add(nxt)
                nxt += 1
            new = frozenset(new)
        else:
            new = old | sat
        dr += (len(new) - len(old)) / len(module.goal.eval_points)
        new_sets.append(new)
    return dr, EvalState(tuple(new_sets))


# ---------------------------------------------------------------------------
# goal configurations


def goal_world(problem: Problem, world: WorldState) -> WorldState:
    """The composed world with every module moved to its goal configuration."""
    objects = {o.id: o for o in world.objects}
    chains = list(world.chains)
    for module in problem.modules:
        if module.kind == "placing":
            params: PlacingParams = module.params
            for did in params.disk_ids:
                point = module.goal.eval_points[params.assignment[did]]
                objects[did] = replace(objects[did], pose=point.pose, level=0)
        elif module.kind == "stacking":
            sparams: StackingParams = module.params
            for b, bid in enumerate(sparams.block_ids):
                objects[bid] = replace(
                    objects[bid], pose=sparams.goal_poses[b], level=sparams.goal_levels[b]
                )
        elif module.kind == "chaining":
            cparams: ChainingParams = module.params
            chains[cparams.chain_index] = replace(
                chains[cparams.chain_index], beads=cparams.wrap_targets.copy()
            )
        elif module.kind == "routing":
            rparams: RoutingParams = module.params
            chains[rparams.chain_index] = replace(
                chains[rparams.chain_index], beads=rparams.route_targets.copy()
            )
    return replace(world, objects=tuple(objects.values()), chains=tuple(chains))


def goal_image(problem: Problem, world: WorldState) -> np.ndarray:
    """Rendering of the goal configuration; deterministic given the init."""
    return render_topdown(goal_world(problem, world))
