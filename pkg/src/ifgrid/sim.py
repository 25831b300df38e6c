"""Deterministic discrete household environment with an oracle object detector.

An 8x8 room with receptacles along the walls and movable items on them or on
the floor.  The agent has a cell, one of four headings and three elevation
levels, and interacts through the twelve-action interface.  Observations are
per-view lists of detections (feature vector, raster mask, confidence, class).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

# ---------------------------------------------------------------------------
# Vocabularies

NAV_ACTIONS = ["MoveAhead", "RotateLeft", "RotateRight", "LookUp", "LookDown"]
MANIP_ACTIONS = ["Pickup", "Put", "Open", "Close", "ToggleOn", "ToggleOff", "Slice"]
ACTIONS = NAV_ACTIONS + MANIP_ACTIONS          # the 12 environment actions
COMPLETE = "COMPLETE"                          # virtual action, never executed
N_ACTIONS = len(ACTIONS)

CLASSES = [
    "Table", "CounterTop", "Sink", "Fridge", "Microwave", "Cabinet", "Shelf",
    "Box", "Cup", "Faucet", "FloorLamp",
    "Mug", "Apple", "Lettuce", "Bread", "Potato", "Tomato",
    "Knife", "SoapBar", "Cloth",
]
NONE_CLASS = "None"
CLASS_IDS = {c: i for i, c in enumerate(CLASSES)}
N_CLASSES = len(CLASSES)                       # object-class vocab excludes None

STATIC_RECEPTACLES = ["Table", "CounterTop", "Sink", "Fridge", "Microwave",
                      "Cabinet", "Shelf"]
OPEN_RECEPTACLES = ["Table", "CounterTop", "Sink", "Shelf"]   # never closed
OPENABLE = {"Fridge", "Microwave", "Cabinet"}
TOGGLEABLE = {"Faucet", "Microwave", "FloorLamp"}
CONTAINERS = ["Box", "Cup"]                    # movable receptacles
MOVABLE = {"Box", "Cup", "Mug", "Apple", "Lettuce", "Bread", "Potato",
           "Tomato", "Knife", "SoapBar", "Cloth"}
SLICEABLE = {"Apple", "Lettuce", "Bread", "Potato", "Tomato"}
FOODS = ["Apple", "Lettuce", "Bread", "Potato", "Tomato"]
RECEPTACLE_CLASSES = set(STATIC_RECEPTACLES) | set(CONTAINERS)

HEADINGS = ["N", "E", "S", "W"]
_DELTA = {"N": (0, -1), "E": (1, 0), "S": (0, 1), "W": (-1, 0)}

GRID_W = 8
GRID_H = 8
RASTER = 16
FRUSTUM_DEPTH = 4
RECEPTACLE_CAPACITY = 4

SEEN_LAYOUTS = list(range(8))
UNSEEN_LAYOUTS = list(range(8, 12))

_HEIGHTS = ["low", "mid", "high"]


@dataclass
class SimObject:
    oid: int
    cls: str
    cell: tuple | None          # grid cell, or None when held / in a receptacle
    height: str = "mid"
    held: bool = False
    open: bool = False
    on: bool = False
    sliced: bool = False
    clean: bool = False
    hot: bool = False
    cold: bool = False
    parent: int | None = None   # receptacle oid


@dataclass(frozen=True)
class AgentPose:
    cell: tuple
    heading: str
    elevation: int = 0          # -1 (down), 0, +1 (up)


@dataclass
class Scene:
    seed: int
    layout_id: int
    width: int = GRID_W
    height: int = GRID_H
    objects: list = field(default_factory=list)
    start_pose: AgentPose | None = None

    def obj(self, oid):
        return self.objects[oid]

    def by_class(self, cls):
        return [o for o in self.objects if o.cls == cls]

    def held_object(self):
        for o in self.objects:
            if o.held:
                return o
        return None

    def root_cell(self, obj):
        """Effective grid cell, following the parent chain."""
        o = obj
        while o.parent is not None:
            o = self.objects[o.parent]
        return o.cell

    def contents(self, oid):
        return [o for o in self.objects if o.parent == oid]

    def blocked_cells(self):
        return {o.cell for o in self.objects
                if o.cell is not None and o.cls in RECEPTACLE_CLASSES | {"FloorLamp"}}

    def serialize(self):
        doc = {
            "version": 1,
            "seed": self.seed,
            "layout_id": self.layout_id,
            "width": self.width,
            "height": self.height,
            "start_pose": [list(self.start_pose.cell), self.start_pose.heading,
                           self.start_pose.elevation],
            "objects": [
                {
                    "oid": o.oid, "cls": o.cls,
                    "cell": list(o.cell) if o.cell else None,
                    "height": o.height, "held": o.held, "open": o.open,
                    "on": o.on, "sliced": o.sliced, "clean": o.clean,
                    "hot": o.hot, "cold": o.cold, "parent": o.parent,
                }
                for o in self.objects
            ],
        }
        return json.dumps(doc, sort_keys=True)

    @staticmethod
    def deserialize(text):
        doc = json.loads(text)
        if doc["version"] != 1:
            raise ValueError(f"unsupported scene version {doc['version']}")
        sc = Scene(seed=doc["seed"], layout_id=doc["layout_id"],
                   width=doc["width"], height=doc["height"])
        cell, heading, elev = doc["start_pose"]
        sc.start_pose = AgentPose(tuple(cell), heading, elev)
        for rec in doc["objects"]:
            sc.objects.append(SimObject(
                oid=rec["oid"], cls=rec["cls"],
                cell=tuple(rec["cell"]) if rec["cell"] else None,
                height=rec["height"], held=rec["held"], open=rec["open"],
                on=rec["on"], sliced=rec["sliced"], clean=rec["clean"],
                hot=rec["hot"], cold=rec["cold"], parent=rec["parent"]))
        return sc


# ---------------------------------------------------------------------------
# Scene generation

def _ring_cells(w, h):
    """Border cells in clockwise perimeter order (so slices are arcs)."""
    cells = [(x, 0) for x in range(w)]
    cells += [(w - 1, y) for y in range(1, h - 1)]
    cells += [(x, h - 1) for x in range(w - 1, -1, -1)]
    cells += [(0, y) for y in range(h - 2, 0, -1)]
    return cells


def generate_scene(seed, layout_id):
    """Deterministic scene: layout fixes receptacle positions, seed fixes items."""
    if layout_id not in SEEN_LAYOUTS and layout_id not in UNSEEN_LAYOUTS:
        raise ValueError(f"unknown layout id {layout_id}")

    layout_rng = np.random.default_rng(97561 + layout_id)
    ring = _ring_cells(GRID_W, GRID_H)
    fixtures = list(STATIC_RECEPTACLES) + ["FloorLamp"]
    # fixtures sit on a contiguous arc of the wall ring, two cells apart,
    # so consecutive task targets are close enough to fall inside the
    # narrow view frustum while the agent walks between them
    order = layout_rng.permutation(len(fixtures))
    start = int(layout_rng.integers(len(ring)))
    step_dir = 1 if layout_id % 2 == 0 else -1
    placed = []
    for slot, fi in enumerate(order):
        cell = ring[(start + step_dir * 2 * slot) % len(ring)]
        placed.append((fixtures[fi], cell))

    scene = Scene(seed=seed, layout_id=layout_id)
    for cls, cell in placed:
        scene.objects.append(SimObject(oid=len(scene.objects), cls=cls,
                                       cell=cell, height="mid"))
    sink = scene.by_class("Sink")[0]
    scene.objects.append(SimObject(oid=len(scene.objects), cls="Faucet",
                                   cell=None, height="mid", parent=sink.oid))

    item_rng = np.random.default_rng(seed * 1_000_003 + layout_id + 17)
    dup_food = FOODS[item_rng.integers(len(FOODS))]
    others = [f for f in FOODS if f != dup_food]
    extra_food = others[item_rng.integers(len(others))]
    items = [dup_food, dup_food, extra_food, "Knife", "Cup", "Box", "Mug"]
    extras = ["Cloth", "SoapBar"]
    items.append(extras[item_rng.integers(len(extras))])

    open_receps = [o for o in scene.objects if o.cls in OPEN_RECEPTACLES]
    blocked = scene.blocked_cells()
    interior = [(x, y) for x in range(1, GRID_W - 1) for y in range(1, GRID_H - 1)
                if (x, y) not in blocked]
    floor_used = set()
    for cls in items:
        obj = SimObject(oid=len(scene.objects), cls=cls, cell=None)
        if obj.cell is None and obj.parent is None:
            for _ in range(50):
                r = open_receps[item_rng.integers(len(open_receps))]
                if len(scene.contents(r.oid)) < RECEPTACLE_CAPACITY - 1:
                    obj.parent = r.oid
                    obj.height = "mid"
                    break
        scene.objects.append(obj)

    free = [c for c in interior if c not in floor_used]
    start_cell = free[item_rng.integers(len(free))]
    heading = HEADINGS[item_rng.integers(4)]
    scene.start_pose = AgentPose(start_cell, heading, 0)
    return scene


# ---------------------------------------------------------------------------
# Observation / oracle detector

_FEAT_CLASS_DIM = 16
_FEAT_POS_DIM = 13
_FEAT_FLAG_DIM = 7
FEATURE_DIM = _FEAT_CLASS_DIM + _FEAT_POS_DIM + _FEAT_FLAG_DIM

_class_embed_rng = np.random.default_rng(424242)
_CLASS_EMBED = _class_embed_rng.normal(0, 1.0, (N_CLASSES, _FEAT_CLASS_DIM)) \
    .astype(np.float32) / np.sqrt(_FEAT_CLASS_DIM)


@dataclass
class Detection:
    feature: np.ndarray       # (FEATURE_DIM,) float32
    mask: np.ndarray          # (RASTER, RASTER) bool
    confidence: float
    class_id: int             # index into CLASSES, or -1 for an empty slot
    oid: int = -1             # simulator-internal; not visible to the model

    @staticmethod
    def empty():
        return Detection(
            feature=np.zeros(FEATURE_DIM, dtype=np.float32),
            mask=np.zeros((RASTER, RASTER), dtype=bool),
            confidence=0.0, class_id=-1, oid=-1)


_MASK_SIZE = {1: 6, 2: 4, 3: 3, 4: 2}
_MASK_ROW = {1: 9, 2: 6, 3: 4, 4: 2}
_HELD_MASK = np.zeros((RASTER, RASTER), dtype=bool)
_HELD_MASK[12:16, 6:10] = True


def _raster_mask(depth, lateral, stack_idx):
    size = _MASK_SIZE[depth]
    r0 = _MASK_ROW[depth]
    c0 = 1 + (lateral + 1) * 5
    if stack_idx > 0:
        size = max(2, size - 2)
        c0 += stack_idx
        r0 += stack_idx % 2
    r0 = min(r0, RASTER - size)
    c0 = min(c0, RASTER - size)
    m = np.zeros((RASTER, RASTER), dtype=bool)
    m[r0:r0 + size, c0:c0 + size] = True
    return m


def _rotate(dx, dy, heading):
    """World offset -> (lateral, forward) in the frame of the given heading."""
    fx, fy = _DELTA[heading]
    forward = dx * fx + dy * fy
    lateral = dx * (-fy) + dy * fx
    return lateral, forward


def _turn(heading, k):
    return HEADINGS[(HEADINGS.index(heading) + k) % 4]


def _feature(obj, lat, fwd, scene, elevation=0):
    dist = abs(lat) + abs(fwd)
    # pitch delta: whether reaching the object's shelf level needs LookUp,
    # LookDown or neither from the agent's current camera pitch
    rel = _HEIGHTS.index(obj.height) - (elevation + 1)
    pos = np.array([
        lat / 4.0, fwd / 4.0, dist / 8.0,
        # discrete direction bits: sign thresholds are hard for a small
        # recurrent net to carve out of two scalars, so spell them out
        float(lat > 0), float(lat < 0),
        float(fwd > 0), float(fwd < 0),
        float(lat == 0 and fwd > 0),
        float(dist <= 1),
        float(rel > 0), float(rel < 0), float(rel == 0),
        float(obj.held),
    ], dtype=np.float32)
    if obj.held:
        # a held object has no meaningful spatial relation to the agent;
        # in particular its zero distance must not look like "adjacent,
        # ready to interact" to the action decoder
        pos[:-1] = 0.0
    flags = np.array([
        float(obj.open), float(obj.on), float(obj.sliced), float(obj.clean),
        float(obj.hot), float(obj.cold), float(obj.cls in RECEPTACLE_CLASSES),
    ], dtype=np.float32)
    return np.concatenate([_CLASS_EMBED[CLASS_IDS[obj.cls]], pos, flags])


def _visible_in_view(scene, pose, view_heading, view_elev):
    """Objects inside the wedge frustum of one view, with view-frame coords."""
    want_height = _HEIGHTS[view_elev + 1]
    out = []
    ax, ay = pose.cell
    for obj in scene.objects:
        if obj.held:
            continue
        if obj.parent is not None:
            chain = obj
            hidden = False
            while chain.parent is not None:
                parent = scene.objects[chain.parent]
                if parent.cls in OPENABLE and not parent.open:
                    hidden = True
                    break
                chain = parent
            if hidden or chain.held:
                continue
        cell = scene.root_cell(obj)
        if cell is None:
            continue
        if obj.height != want_height:
            continue
        lat, fwd = _rotate(cell[0] - ax, cell[1] - ay, view_heading)
        if 1 <= fwd <= FRUSTUM_DEPTH and -1 <= lat <= 1:
            # masks use the view frame; the feature's position encoding uses
            # the agent's body frame so direction survives view fusion
            alat, afwd = _rotate(cell[0] - ax, cell[1] - ay, pose.heading)
            out.append((obj, lat, fwd, alat, afwd))
    out.sort(key=lambda e: (e[2], e[1], e[0].oid))
    return out


def view_specs(pose, k_views):
    """(heading, elevation) per view; the center view is always first."""
    specs = [(pose.heading, pose.elevation)]
    if k_views >= 3:
        specs.append((_turn(pose.heading, -1), pose.elevation))
        specs.append((_turn(pose.heading, 1), pose.elevation))
    if k_views >= 5:
        specs.append((pose.heading, min(pose.elevation + 1, 1)))
        specs.append((pose.heading, max(pose.elevation - 1, -1)))
    return specs


def observe(scene, pose, k_views=5, n_slots=8, noise=0.0, rng=None):
    """K lists of N detections, center view first, nearest objects first."""
    views = []
    for vi, (heading, elev) in enumerate(view_specs(pose, k_views)):
        dets = []
        if vi == 0:
            held = scene.held_object()
            if held is not None:
                dets.append(Detection(
                    feature=_feature(held, 0, 0, scene, pose.elevation),
                    mask=_HELD_MASK.copy(), confidence=1.0,
                    class_id=CLASS_IDS[held.cls], oid=held.oid))
        stack_count = {}
        for obj, lat, fwd, alat, afwd in _visible_in_view(scene, pose,
                                                          heading, elev):
            key = (lat, fwd)
            idx = stack_count.get(key, 0)
            stack_count[key] = idx + 1
            conf = 1.0
            if noise > 0.0 and rng is not None:
                if rng.random() < noise * 0.5:
                    continue
                conf = max(0.05, 1.0 - noise * rng.random())
            dets.append(Detection(
                feature=_feature(obj, alat, afwd, scene, pose.elevation),
                mask=_raster_mask(fwd, lat, idx), confidence=conf,
                class_id=CLASS_IDS[obj.cls], oid=obj.oid))
        dets = dets[:n_slots]
        while len(dets) < n_slots:
            dets.append(Detection.empty())
        views.append(dets)
    return views


def mask_iou(a, b):
    inter = np.logical_and(a, b).sum()
    union = np.logical_or(a, b).sum()
    return float(inter) / float(union) if union else 0.0


def resolve_mask(detections, mask):
    """Detection whose mask best overlaps the given raster mask.

    Returns (slot index, detection) or (None, None).  Ties break to the
    lower slot index.
    """
    best_i, best_iou = None, 0.0
    for i, det in enumerate(detections):
        if det.confidence <= 0.0:
            continue
        iou = mask_iou(det.mask, mask)
        if iou > best_iou:
            best_i, best_iou = i, iou
    if best_i is None:
        return None, None
    return best_i, detections[best_i]


# ---------------------------------------------------------------------------
# Environment step

def step(scene, pose, action, mask=None):
    """Apply one action.  Returns (new_pose, success); failures never mutate."""
    if action not in ACTIONS:
        raise ValueError(f"unknown action {action!r}")

    if action in NAV_ACTIONS:
        if action == "MoveAhead":
            dx, dy = _DELTA[pose.heading]
            nxt = (pose.cell[0] + dx, pose.cell[1] + dy)
            if not (0 <= nxt[0] < scene.width and 0 <= nxt[1] < scene.height):
                return pose, False
            if nxt in scene.blocked_cells():
                return pose, False
            return replace(pose, cell=nxt), True
        if action == "RotateLeft":
            return replace(pose, heading=_turn(pose.heading, -1)), True
        if action == "RotateRight":
            return replace(pose, heading=_turn(pose.heading, 1)), True
        if action == "LookUp":
            if pose.elevation >= 1:
                return pose, False
            return replace(pose, elevation=pose.elevation + 1), True
        if action == "LookDown":
            if pose.elevation <= -1:
                return pose, False
            return replace(pose, elevation=pose.elevation - 1), True

    if mask is None:
        return pose, False
    center = observe(scene, pose, k_views=1, n_slots=64)[0]
    _, det = resolve_mask(center, mask)
    if det is None:
        return pose, False
    obj = scene.obj(det.oid)
    root = scene.root_cell(obj)
    if root is not None and not obj.held:
        dx, dy = _DELTA[pose.heading]
        ahead = (pose.cell[0] + dx, pose.cell[1] + dy)
        # within reach: the agent's own cell or the cell it faces
        if root not in (pose.cell, ahead):
            return pose, False
    ok = _apply_manipulation(scene, pose, action, obj)
    return pose, ok


def _apply_manipulation(scene, pose, action, obj):
    held = scene.held_object()

    if action == "Pickup":
        if obj.cls not in MOVABLE or held is not None or obj.held:
            return False
        obj.held = True
        obj.parent = None
        obj.cell = None
        obj.height = "mid"
        return True

    if action == "Put":
        if held is None or held.oid == obj.oid:
            return False
        if obj.cls not in RECEPTACLE_CLASSES:
            return False
        if obj.cls in OPENABLE and not obj.open:
            return False
        if len(scene.contents(obj.oid)) >= RECEPTACLE_CAPACITY:
            return False
        held.held = False
        held.parent = obj.oid
        held.cell = None
        held.height = "mid"
        return True

    if action == "Open":
        if obj.cls not in OPENABLE or obj.open:
            return False
        obj.open = True
        return True

    if action == "Close":
        if obj.cls not in OPENABLE or not obj.open:
            return False
        obj.open = False
        if obj.cls == "Fridge":
            for c in scene.contents(obj.oid):
                c.cold = True
                c.hot = False
        return True

    if action == "ToggleOn":
        if obj.cls not in TOGGLEABLE or obj.on:
            return False
        if obj.cls == "Microwave" and obj.open:
            return False
        obj.on = True
        if obj.cls == "Faucet" and obj.parent is not None:
            for c in scene.contents(obj.parent):
                if c.oid != obj.oid:
                    c.clean = True
        if obj.cls == "Microwave":
            for c in scene.contents(obj.oid):
                c.hot = True
                c.cold = False
        return True

    if action == "ToggleOff":
        if obj.cls not in TOGGLEABLE or not obj.on:
            return False
        obj.on = False
        return True

    if action == "Slice":
        if obj.cls not in SLICEABLE or obj.sliced or obj.held:
            return False
        if held is None or held.cls != "Knife":
            return False
        obj.sliced = True
        return True

    return False


# ---------------------------------------------------------------------------
# Goal conditions

def goal_conditions(scene, task):
    """List of booleans, one per goal condition of the task."""
    ttype = task["type"]
    target_cls = task.get("target")
    recep_oid = task.get("recep_oid")

    def in_recep(cls, roid, extra=None):
        return any(o.parent == roid and (extra is None or extra(o))
                   for o in scene.objects if o.cls == cls)

    if ttype == "PickPlace":
        conds = [in_recep(target_cls, recep_oid)]
        if task.get("sliced"):
            conds.append(any(o.sliced for o in scene.by_class(target_cls)))
        return conds
    if ttype == "StackPlace":
        container_cls = task["container"]
        holds = [c for c in scene.by_class(container_cls)
                 if any(o.parent == c.oid for o in scene.by_class(target_cls))]
        return [bool(holds), any(c.parent == recep_oid for c in holds)]
    if ttype == "PickTwo":
        n = sum(1 for o in scene.by_class(target_cls) if o.parent == recep_oid)
        return [n >= 1, n >= 2]
    if ttype == "CleanPlace":
        return [any(o.clean for o in scene.by_class(target_cls)),
                in_recep(target_cls, recep_oid, extra=lambda o: o.clean)]
    if ttype == "HeatPlace":
        return [any(o.hot for o in scene.by_class(target_cls)),
                in_recep(target_cls, recep_oid, extra=lambda o: o.hot)]
    if ttype == "CoolPlace":
        return [any(o.cold for o in scene.by_class(target_cls)),
                in_recep(target_cls, recep_oid, extra=lambda o: o.cold)]
    if ttype == "Examine":
        lamp = scene.by_class("FloorLamp")[0]
        return [lamp.on,
                any(o.held for o in scene.by_class(target_cls))]
    raise ValueError(f"unknown task type {ttype}")


def check_goal_conditions(scene, task):
    conds = goal_conditions(scene, task)
    return sum(conds), len(conds)
