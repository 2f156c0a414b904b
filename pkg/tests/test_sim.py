import math
import subprocess
import sys

import numpy as np
import pytest

from gridpick.geometry import GeometryError, Pose2, default_map
from gridpick.sim import (
    HIGH_FAST,
    LOW_SLOW,
    PALETTE,
    COLOR_BACKGROUND,
    COLOR_BLUE,
    COLOR_GREEN,
    COLOR_RED,
    BeadChain,
    Circle,
    PrimitiveProfile,
    RigidObject,
    SimConfig,
    WorldState,
    footprints_overlap,
    render_topdown,
    settle_chain,
    snapshot_hash,
    step_pick_place,
)


def disk(oid, x, y, r=0.02, color=COLOR_GREEN, level=0):
    return RigidObject(oid, "disk", (r,), color, Pose2(x, y), level)


def block(oid, x, y, h=0.02, color=COLOR_RED, theta=0.0, level=0):
    return RigidObject(oid, "block", (h, h), color, Pose2(x, y, theta), level)


def straight_cable(n=10, spacing=0.01, y=0.1, x0=0.3, anchored=None):
    beads = np.array([[x0 + i * spacing, y] for i in range(n)])
    return BeadChain(beads, spacing, closed=False, colors=np.full(n, COLOR_RED), anchored_index=anchored)


def world(objects=(), chains=()):
    return WorldState(tuple(objects), tuple(chains), default_map(160, 80))


class TestStepRigid:
    def test_pick_lone_disk(self):
        s = world([disk(0, 0.3, 0.2)])
        s2 = step_pick_place(s, (Pose2(0.3, 0.2), Pose2(0.6, 0.3)), HIGH_FAST)
        moved = s2.object_by_id(0)
        assert (moved.pose.x, moved.pose.y) == (0.6, 0.3)
        assert moved.level == 0

    def test_stacking_rule(self):
        s = world([block(0, 0.3, 0.2), block(1, 0.6, 0.3)])
        s2 = step_pick_place(s, (Pose2(0.3, 0.2), Pose2(0.6, 0.3)), HIGH_FAST)
        assert s2.object_by_id(0).level == 1
        assert s2.object_by_id(1).level == 0

    def test_grasp_miss_is_noop(self):
        s = world([disk(0, 0.3, 0.2)])
        s2 = step_pick_place(s, (Pose2(0.7, 0.4), Pose2(0.1, 0.1)), HIGH_FAST)
        assert s2.objects == s.objects
        assert snapshot_hash(s2) == snapshot_hash(s)

    def test_topmost_is_grasped(self):
        s = world([block(0, 0.3, 0.2), block(1, 0.3, 0.2, level=1)])
        s2 = step_pick_place(s, (Pose2(0.3, 0.2), Pose2(0.6, 0.3)), HIGH_FAST)
        assert s2.object_by_id(1).pose.x == 0.6
        assert s2.object_by_id(0).pose.x == 0.3

    def test_relative_rotation_applied(self):
        s = world([block(0, 0.3, 0.2, theta=0.1)])
        s2 = step_pick_place(s, (Pose2(0.3, 0.2, 0.0), Pose2(0.5, 0.2, 0.5)), HIGH_FAST)
        assert s2.object_by_id(0).pose.theta == pytest.approx(0.6)

    def test_fixture_not_graspable(self):
        peg = RigidObject(0, "peg", (0.015,), 2, Pose2(0.3, 0.2))
        s = world([peg])
        s2 = step_pick_place(s, (Pose2(0.3, 0.2), Pose2(0.6, 0.3)), HIGH_FAST)
        assert s2.object_by_id(0).pose.x == 0.3

    def test_out_of_bounds_action(self):
        s = world([disk(0, 0.3, 0.2)])
        with pytest.raises(GeometryError):
            step_pick_place(s, (Pose2(1.2, 0.2), Pose2(0.3, 0.2)), HIGH_FAST)

    def test_immovable_level_rejected(self):
        with pytest.raises(ValueError):
            RigidObject(0, "peg", (0.01,), 2, Pose2(0.1, 0.1), level=1)


class TestSettle:
    def test_straight_chain_fixed_point(self):
        chain = straight_cable()
        res = settle_chain(chain, [], iterations=8)
        np.testing.assert_allclose(res.chain.beads, chain.beads, atol=1e-12)
        assert res.spacing_error < 1e-12

    def test_single_sweep_projection_hand_oracle(self):
        # Beads at (0,0), (0.01,0), (0.02,0); circle center (0.01,-0.004), r 0.006.
        # Spacing holds, so the first sweep only pushes the middle bead out to
        # center + r * (0,1) = (0.01, 0.002).
        beads = np.array([[0.0, 0.0], [0.01, 0.0], [0.02, 0.0]])
        chain = BeadChain(beads, 0.01, closed=False, colors=np.zeros(3))
        res = settle_chain(chain, [Circle((0.01, -0.004), 0.006)], iterations=1)
        np.testing.assert_allclose(res.chain.beads[1], [0.01, 0.002], atol=1e-12)

    def test_push_out_converges(self):
        beads = np.array([[0.0, 0.0], [0.01, 0.0], [0.02, 0.0]])
        chain = BeadChain(beads, 0.01, closed=False, colors=np.zeros(3))
        circle = Circle((0.01, -0.004), 0.006)
        res = settle_chain(chain, [circle], iterations=64)
        cfg = SimConfig()
        assert res.feasible(cfg)
        d = np.linalg.norm(res.chain.beads[1] - np.array(circle.center))
        assert d >= circle.radius - cfg.eps_penetration

    def test_pinned_endpoints_straighten(self):
        rng = np.random.default_rng(0)
        n, spacing = 8, 0.01
        beads = np.array([[0.3 + i * spacing, 0.1] for i in range(n)])
        beads[1:-1] += rng.normal(scale=0.003, size=(n - 2, 2))
        chain = BeadChain(beads, spacing, closed=False, colors=np.zeros(n))
        pins = {0: (0.3, 0.1), n - 1: (0.3 + (n - 1) * spacing, 0.1)}
        res = settle_chain(chain, [], iterations=500, pins=pins)
        # Unique feasible configuration: the straight segment between the pins.
        for i in range(n):
            np.testing.assert_allclose(res.chain.beads[i], [0.3 + i * spacing, 0.1], atol=2e-4)

    def test_infeasible_pins_reported(self):
        chain = straight_cable(n=5)
        pins = {0: (0.3, 0.1), 4: (0.3 + 10 * 0.01, 0.1)}  # > chain length apart
        res = settle_chain(chain, [], iterations=64, pins=pins)
        assert not res.feasible(SimConfig())
        assert res.spacing_error > 0.01

    def test_anchored_bead_stays(self):
        chain = straight_cable(anchored=0)
        res = settle_chain(chain, [], iterations=16, pins={5: (0.35, 0.15)})
        np.testing.assert_allclose(res.chain.beads[0], chain.beads[0], atol=1e-12)


class TestStepChain:
    def test_grasped_bead_reaches_target(self):
        chain = straight_cable()
        s = world(chains=[chain])
        target = Pose2(0.35, 0.12)
        s2 = step_pick_place(s, (Pose2(0.35, 0.1), target), LOW_SLOW)
        np.testing.assert_allclose(s2.chains[0].beads[5], [0.35, 0.12], atol=1e-12)
        lengths = np.linalg.norm(np.diff(s2.chains[0].beads, axis=0), axis=1)
        assert np.all(np.abs(lengths - 0.01) <= 0.01 * SimConfig().eps_chain + 1e-9)

    def test_chain_length_conserved_after_random_steps(self):
        rng = np.random.default_rng(1)
        chain = straight_cable(n=12)
        s = world(chains=[chain])
        rest = 11 * 0.01
        for _ in range(5):
            bead = s.chains[0].beads[rng.integers(0, 12)]
            place = Pose2(
                float(np.clip(bead[0] + rng.normal(scale=0.02), 0.01, 0.99)),
                float(np.clip(bead[1] + rng.normal(scale=0.02), 0.01, 0.49)),
            )
            s = step_pick_place(s, (Pose2(bead[0], bead[1]), place), LOW_SLOW)
            total = s.chains[0].total_length()
            assert rest * (1 - 0.02) <= total <= rest * (1 + 0.02)

    def test_no_bead_inside_peg_after_step(self):
        chain = straight_cable(n=10, y=0.1)
        peg = RigidObject(0, "peg", (0.015,), 2, Pose2(0.345, 0.13))
        s = world([peg], [chain])
        s2 = step_pick_place(s, (Pose2(0.34, 0.1), Pose2(0.345, 0.13)), LOW_SLOW)
        d = np.linalg.norm(s2.chains[0].beads - np.array([0.345, 0.13]), axis=1)
        assert np.all(d >= 0.015 - SimConfig().eps_penetration)

    def test_fast_profile_drags_more_than_slow(self):
        def run(profile):
            s = world(chains=[straight_cable()])
            s2 = step_pick_place(s, (Pose2(0.35, 0.1), Pose2(0.35, 0.14)), profile)
            return s2.chains[0].beads

        slow = run(LOW_SLOW)
        fast = run(HIGH_FAST)
        base = straight_cable().beads
        # Beads four links away are dragged further by the fast profile.
        assert np.linalg.norm(fast[1] - base[1]) > np.linalg.norm(slow[1] - base[1])

    def test_place_inside_peg_clamped_to_contact(self):
        chain = straight_cable(n=10, y=0.1)
        peg = RigidObject(0, "peg", (0.015,), 2, Pose2(0.35, 0.2))
        s = world([peg], [chain])
        s2 = step_pick_place(s, (Pose2(0.35, 0.1), Pose2(0.35, 0.2)), LOW_SLOW)
        d = np.linalg.norm(s2.chains[0].beads - np.array([0.35, 0.2]), axis=1)
        assert np.all(d >= 0.015 - 1e-9)


class TestRender:
    def test_empty_world(self):
        img = render_topdown(world())
        assert img.shape == (160, 80, 6)
        assert np.all(img[:, :, :3] == PALETTE[COLOR_BACKGROUND].astype(np.float32))
        assert np.all(img[:, :, 3:] == 0)

    def test_disk_matches_bruteforce_rasterizer(self):
        s = world([disk(0, 0.4, 0.25, r=0.015)])
        img = render_topdown(s)
        m = s.map
        expected = np.zeros((160, 80), dtype=bool)
        for r in range(160):
            for c in range(80):
                px = m.origin.x + (r + 0.5) * m.resolution
                py = m.origin.y + (c + 0.5) * m.resolution
                expected[r, c] = (px - 0.4) ** 2 + (py - 0.25) ** 2 <= 0.015**2
        rendered = img[:, :, 3] > 0
        np.testing.assert_array_equal(rendered, expected)

    def test_occlusion_of_stacked_block(self):
        bottom = block(0, 0.4, 0.25, color=COLOR_RED)
        top = block(1, 0.4, 0.25, color=COLOR_BLUE, level=1)
        img = render_topdown(world([bottom, top]))
        mask = img[:, :, 3] > 0
        assert mask.any()
        colors = img[mask][:, :3]
        assert np.all(colors == PALETTE[COLOR_BLUE].astype(np.float32))
        assert np.all(img[mask][:, 3] == pytest.approx(2 * SimConfig().block_height))

    def test_pure_function_of_state(self):
        s = world([disk(0, 0.4, 0.25)])
        np.testing.assert_array_equal(render_topdown(s), render_topdown(s))


class TestHash:
    def test_equal_states_equal_hash(self):
        a = world([disk(0, 0.3, 0.2)])
        b = world([disk(0, 0.3, 0.2)])
        assert snapshot_hash(a) == snapshot_hash(b)

    def test_movement_changes_hash(self):
        a = world([disk(0, 0.3, 0.2)])
        b = world([disk(0, 0.3 + 1e-6, 0.2)])
        assert snapshot_hash(a) != snapshot_hash(b)

    def test_cross_process_stability(self):
        snippet = (
            "import numpy as np\n"
            "from gridpick.geometry import Pose2, default_map\n"
            "from gridpick.sim import *\n"
            "chain = BeadChain(np.array([[0.3+i*0.01, 0.1] for i in range(10)]), 0.01, False, np.zeros(10))\n"
            "s = WorldState((RigidObject(0,'disk',(0.02,),7,Pose2(0.5,0.3)),), (chain,), default_map(160,80))\n"
            "s = step_pick_place(s, (Pose2(0.5,0.3), Pose2(0.2,0.2)), HIGH_FAST)\n"
            "s = step_pick_place(s, (Pose2(0.35,0.1), Pose2(0.35,0.13)), LOW_SLOW)\n"
            "print(snapshot_hash(s))\n"
        )
        outs = {
            subprocess.run(
                [sys.executable, "-c", snippet], capture_output=True, text=True, check=True
            ).stdout
            for _ in range(2)
        }
        assert len(outs) == 1


class TestOverlap:
    @pytest.mark.parametrize(
        "a,b,expected",
        [
            (disk(0, 0.3, 0.2, r=0.02), disk(1, 0.33, 0.2, r=0.02), True),
            (disk(0, 0.3, 0.2, r=0.02), disk(1, 0.35, 0.2, r=0.02), False),
            (block(0, 0.3, 0.2), block(1, 0.33, 0.2), True),
            (block(0, 0.3, 0.2), block(1, 0.35, 0.2), False),
            (disk(0, 0.3, 0.2, r=0.02), block(1, 0.33, 0.2), True),
        ],
    )
    def test_pairs(self, a, b, expected):
        assert footprints_overlap(a, b) is expected

    def test_rotated_rects(self):
        a = block(0, 0.3, 0.2, h=0.02)
        # 45-degree square: half-diagonal 0.0283, so contact at 0.0483 offset.
        b = block(1, 0.3 + 0.05, 0.2, h=0.02, theta=math.pi / 4)
        assert footprints_overlap(a, b) is False
        c = block(2, 0.3 + 0.045, 0.2, h=0.02, theta=math.pi / 4)
        assert footprints_overlap(a, c) is True


class TestProfiles:
    def test_invalid_profile(self):
        with pytest.raises(ValueError):
            PrimitiveProfile("medium", 0.1)
        with pytest.raises(ValueError):
            PrimitiveProfile("low_slow", 1.5)

    def test_profile_constants(self):
        assert LOW_SLOW.drag_coupling == pytest.approx(HIGH_FAST.drag_coupling / 2)
