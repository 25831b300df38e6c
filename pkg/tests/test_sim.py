import copy

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ifgrid import sim
from ifgrid.sim import (ACTIONS, AgentPose, Detection, Scene, SimObject,
                        generate_scene, mask_iou, observe, resolve_mask, step)


def small_scene():
    """Hand-built scene: table to the north with an apple, sink+faucet east."""
    objs = [
        SimObject(0, "Table", (3, 1)),
        SimObject(1, "Apple", None, parent=0),
        SimObject(2, "Sink", (6, 3)),
        SimObject(3, "Faucet", None, parent=2),
        SimObject(4, "Knife", (4, 5), height="low"),
        SimObject(5, "Fridge", (1, 5)),
        SimObject(6, "Microwave", (5, 6)),
        SimObject(7, "FloorLamp", (6, 6), height="high"),
        SimObject(8, "Cup", (2, 3), height="low"),
    ]
    return Scene(seed=1, layout_id=0, objects=objs,
                 start_pose=AgentPose((3, 3), "N"))


def center_mask(scene, pose, oid, n_slots=64):
    for det in observe(scene, pose, k_views=1, n_slots=n_slots)[0]:
        if det.oid == oid:
            return det.mask
    return None


# ---------------------------------------------------------------------------
# Scene generation and serialization


def test_generation_deterministic():
    a = generate_scene(42, 3)
    b = generate_scene(42, 3)
    assert a.serialize() == b.serialize()


def test_generation_varies_with_seed_and_layout():
    base = generate_scene(42, 3).serialize()
    assert generate_scene(43, 3).serialize() != base
    assert generate_scene(42, 4).serialize() != base


def test_layout_fixes_fixture_positions():
    a = generate_scene(1, 2)
    b = generate_scene(999, 2)
    fixtures_a = sorted((o.cls, o.cell) for o in a.objects
                        if o.cls in sim.STATIC_RECEPTACLES + ["FloorLamp"])
    fixtures_b = sorted((o.cls, o.cell) for o in b.objects
                        if o.cls in sim.STATIC_RECEPTACLES + ["FloorLamp"])
    assert fixtures_a == fixtures_b


def test_serialize_roundtrip():
    scene = generate_scene(7, 1)
    text = scene.serialize()
    back = Scene.deserialize(text)
    assert back.serialize() == text
    assert back.start_pose == scene.start_pose


def test_deserialize_rejects_unknown_version():
    scene = generate_scene(7, 1)
    doc = scene.serialize().replace('"version": 1', '"version": 9')
    with pytest.raises(ValueError):
        Scene.deserialize(doc)


# ---------------------------------------------------------------------------
# Observation / frustum geometry


def test_frustum_bounds():
    scene = small_scene()
    # agent at (3,3) facing N: table at (3,1) is fwd=2, lat=0 -> visible mid
    dets = observe(scene, scene.start_pose, k_views=1)[0]
    classes = [d.class_id for d in dets if d.confidence > 0]
    assert sim.CLASS_IDS["Table"] in classes
    # sink at (6,3) is lateral 3 -> outside the |lat| <= 1 wedge
    assert sim.CLASS_IDS["Sink"] not in classes


def test_behind_not_visible():
    scene = small_scene()
    pose = AgentPose((3, 3), "S")
    dets = observe(scene, pose, k_views=1)[0]
    assert sim.CLASS_IDS["Table"] not in [d.class_id for d in dets
                                          if d.confidence > 0]


def test_height_view_mapping():
    scene = small_scene()
    # knife is low at (4,5): from (4,6) facing N it needs the down view
    pose = AgentPose((4, 7), "N")
    views = observe(scene, pose, k_views=5)
    center = [d.class_id for d in views[0] if d.confidence > 0]
    down = [d.class_id for d in views[4] if d.confidence > 0]
    assert sim.CLASS_IDS["Knife"] not in center
    assert sim.CLASS_IDS["Knife"] in down


def test_lamp_needs_up_view():
    scene = small_scene()
    pose = AgentPose((6, 7), "N")  # wait: lamp blocks (6,6); stand at (6,7)? ok
    views = observe(scene, pose, k_views=5)
    up = [d.class_id for d in views[3] if d.confidence > 0]
    center = [d.class_id for d in views[0] if d.confidence > 0]
    assert sim.CLASS_IDS["FloorLamp"] in up
    assert sim.CLASS_IDS["FloorLamp"] not in center


def test_closed_receptacle_hides_contents():
    scene = small_scene()
    scene.obj(1).parent = 5  # apple into the fridge
    pose = AgentPose((1, 7), "N")
    dets = observe(scene, pose, k_views=1)[0]
    assert sim.CLASS_IDS["Apple"] not in [d.class_id for d in dets
                                          if d.confidence > 0]
    scene.obj(5).open = True
    dets = observe(scene, pose, k_views=1)[0]
    assert sim.CLASS_IDS["Apple"] in [d.class_id for d in dets
                                      if d.confidence > 0]


def test_held_object_pinned_to_center_slot_zero():
    scene = small_scene()
    scene.obj(4).held = True
    scene.obj(4).cell = None
    views = observe(scene, scene.start_pose, k_views=5)
    det = views[0][0]
    assert det.class_id == sim.CLASS_IDS["Knife"]
    expected = np.zeros((16, 16), dtype=bool)
    expected[12:16, 6:10] = True
    assert np.array_equal(det.mask, expected)
    for view in views[1:]:
        assert sim.CLASS_IDS["Knife"] not in [d.class_id for d in view
                                              if d.confidence > 0]


def test_observation_padding_and_shapes():
    scene = small_scene()
    views = observe(scene, scene.start_pose, k_views=5, n_slots=8)
    assert len(views) == 5
    for view in views:
        assert len(view) == 8
        for det in view:
            assert det.feature.shape == (sim.FEATURE_DIM,)
            assert det.mask.shape == (16, 16)
    empty = views[0][-1]
    assert empty.confidence == 0.0
    assert not empty.mask.any()
    assert not empty.feature.any()


def test_nearest_first_ordering():
    scene = small_scene()
    scene.objects.append(SimObject(9, "Mug", None, parent=0))
    pose = AgentPose((3, 4), "N")  # table now fwd=3
    dets = [d for d in observe(scene, pose, k_views=1)[0] if d.confidence > 0]
    fwd = [d.feature[17] for d in dets]  # forward-distance feature
    assert fwd == sorted(fwd)


def test_noise_drops_and_attenuates_deterministically():
    scene = small_scene()
    rng1 = np.random.default_rng(5)
    rng2 = np.random.default_rng(5)
    a = observe(scene, scene.start_pose, noise=0.5, rng=rng1)
    b = observe(scene, scene.start_pose, noise=0.5, rng=rng2)
    for va, vb in zip(a, b):
        for da, db in zip(va, vb):
            assert da.confidence == db.confidence


# ---------------------------------------------------------------------------
# Masks


def test_mask_iou_identities():
    m = sim._raster_mask(2, 0, 0)
    assert mask_iou(m, m) == 1.0
    assert mask_iou(m, np.zeros((16, 16), dtype=bool)) == 0.0


def test_mask_size_shrinks_with_depth():
    sizes = [sim._raster_mask(d, 0, 0).sum() for d in (1, 2, 3, 4)]
    assert sizes == sorted(sizes, reverse=True)
    assert all(s > 0 for s in sizes)


def test_resolve_mask_tie_breaks_low_slot():
    m = sim._raster_mask(2, 0, 0)
    d1 = Detection(feature=np.zeros(sim.FEATURE_DIM, dtype=np.float32),
                   mask=m.copy(), confidence=1.0, class_id=0, oid=1)
    d2 = Detection(feature=np.zeros(sim.FEATURE_DIM, dtype=np.float32),
                   mask=m.copy(), confidence=1.0, class_id=1, oid=2)
    slot, det = resolve_mask([d1, d2], m)
    assert slot == 0 and det.oid == 1


# ---------------------------------------------------------------------------
# Stepping


def test_move_blocked_by_receptacle_and_walls():
    scene = small_scene()
    pose = AgentPose((3, 2), "N")  # table directly ahead
    newp, ok = step(scene, pose, "MoveAhead")
    assert not ok and newp == pose
    edge = AgentPose((0, 0), "N")
    newp, ok = step(scene, edge, "MoveAhead")
    assert not ok


def test_rotation_cycle():
    scene = small_scene()
    pose = scene.start_pose
    for a in ["RotateRight"] * 4:
        pose, ok = step(scene, pose, a)
        assert ok
    assert pose.heading == scene.start_pose.heading


def test_elevation_saturates():
    scene = small_scene()
    pose = AgentPose((3, 3), "N", elevation=1)
    newp, ok = step(scene, pose, "LookUp")
    assert not ok and newp.elevation == 1


def test_failed_action_does_not_mutate():
    scene = small_scene()
    before = scene.serialize()
    pose = AgentPose((3, 2), "N")
    step(scene, pose, "MoveAhead")
    step(scene, pose, "Pickup", mask=None)
    step(scene, pose, "Slice", mask=center_mask(scene, pose, 1))
    assert scene.serialize() == before


def test_pickup_and_put():
    scene = small_scene()
    pose = AgentPose((3, 2), "N")
    _, ok = step(scene, pose, "Pickup", center_mask(scene, pose, 1))
    assert ok and scene.obj(1).held and scene.held_object().oid == 1
    # second pickup fails while holding
    pose2 = AgentPose((4, 6), "N")
    _, ok = step(scene, pose2, "Pickup", center_mask(scene, pose2, 4))
    assert not ok
    _, ok = step(scene, pose, "Put", center_mask(scene, pose, 0))
    assert ok and scene.obj(1).parent == 0 and not scene.obj(1).held


def test_receptacle_capacity():
    scene = small_scene()
    pose = AgentPose((3, 2), "N")
    for i in range(sim.RECEPTACLE_CAPACITY - 1):  # apple already inside
        scene.objects.append(SimObject(9 + i, "Mug", None, parent=0))
    scene.obj(4).held = True
    scene.obj(4).cell = None
    _, ok = step(scene, pose, "Put", center_mask(scene, pose, 0))
    assert not ok
    assert scene.obj(4).held


def test_clean_sequence_at_sink():
    scene = small_scene()
    scene.obj(1).parent = 2  # apple into the sink
    scene.obj(1).cell = None
    pose = AgentPose((6, 5), "N")
    faucet_mask = center_mask(scene, pose, 3)
    assert faucet_mask is not None
    _, ok = step(scene, pose, "ToggleOn", faucet_mask)
    assert ok and scene.obj(3).on
    assert scene.obj(1).clean
    assert not scene.obj(3).clean  # the faucet does not wash itself
    _, ok = step(scene, pose, "ToggleOff", faucet_mask)
    assert ok and not scene.obj(3).on


def test_microwave_heats_only_when_closed():
    scene = small_scene()
    pose = AgentPose((5, 4), "S")
    mw = center_mask(scene, pose, 6)
    _, ok = step(scene, pose, "Open", mw)
    assert ok
    scene.obj(1).parent = 6
    scene.obj(1).cell = None
    _, ok = step(scene, pose, "ToggleOn", center_mask(scene, pose, 6))
    assert not ok  # door open
    _, ok = step(scene, pose, "Close", center_mask(scene, pose, 6))
    assert ok
    _, ok = step(scene, pose, "ToggleOn", center_mask(scene, pose, 6))
    assert ok and scene.obj(1).hot and not scene.obj(1).cold


def test_fridge_chills_on_close():
    scene = small_scene()
    pose = AgentPose((1, 7), "N")
    fr = center_mask(scene, pose, 5)
    _, ok = step(scene, pose, "Open", fr)
    assert ok
    scene.obj(1).parent = 5
    scene.obj(1).cell = None
    scene.obj(1).hot = True
    _, ok = step(scene, pose, "Close", center_mask(scene, pose, 5))
    assert ok and scene.obj(1).cold and not scene.obj(1).hot


def test_slice_requires_held_knife():
    scene = small_scene()
    pose = AgentPose((3, 2), "N")
    _, ok = step(scene, pose, "Slice", center_mask(scene, pose, 1))
    assert not ok
    scene.obj(4).held = True
    scene.obj(4).cell = None
    _, ok = step(scene, pose, "Slice", center_mask(scene, pose, 1))
    assert ok and scene.obj(1).sliced


def test_unknown_action_rejected():
    scene = small_scene()
    with pytest.raises(ValueError):
        step(scene, scene.start_pose, "Jump")


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 500), st.integers(0, 11))
def test_generated_scenes_well_formed(seed, layout):
    scene = generate_scene(seed, layout)
    cells = [o.cell for o in scene.objects if o.cell is not None]
    assert all(0 <= x < scene.width and 0 <= y < scene.height
               for x, y in cells)
    assert scene.start_pose.cell not in scene.blocked_cells()
    for o in scene.objects:
        if o.parent is not None:
            assert scene.obj(o.parent).cls in sim.RECEPTACLE_CLASSES \
                or scene.obj(o.parent).cls == "Sink"
        assert o.cls in sim.CLASSES
