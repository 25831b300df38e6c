"""Task generation: the seven task types, expert demonstrations, and directives.

An episode is a task instance on a generated scene plus an expert
demonstration (segments of (action, object-class, oid) steps, each ending in
COMPLETE) and a templated language directive aligned one instruction per
segment.
"""

from __future__ import annotations

import heapq
import json

import numpy as np

from . import sim
from .sim import (ACTIONS, COMPLETE, CONTAINERS, FOODS, MOVABLE, NAV_ACTIONS,
                  SEEN_LAYOUTS, SLICEABLE, UNSEEN_LAYOUTS, AgentPose, Scene,
                  generate_scene, observe, step)

TASK_TYPES = ["PickPlace", "StackPlace", "PickTwo", "CleanPlace",
              "HeatPlace", "CoolPlace", "Examine"]

PLACE_RECEPTACLES = ["Table", "CounterTop", "Shelf"]

SUBGOAL_CATEGORIES = ["Goto", "Pickup", "Put", "Slice", "Cool", "Heat",
                      "Clean", "Toggle"]


class PlanningError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Expert navigation

_NAV_INDEX = {a: i for i, a in enumerate(NAV_ACTIONS)}


def visible_slot(scene, pose, oid, n_slots):
    """Slot of oid in the center view, or None if absent / truncated."""
    dets = []
    held = scene.held_object()
    if held is not None:
        dets.append(held.oid)
    for entry in sim._visible_in_view(scene, pose, pose.heading,
                                      pose.elevation):
        dets.append(entry[0].oid)
    dets = dets[:n_slots]
    return dets.index(oid) if oid in dets else None


def _in_reach(scene, pose, oid, n_slots):
    """True when oid is in the center view and close enough to act on."""
    if visible_slot(scene, pose, oid, n_slots) is None:
        return False
    root = scene.root_cell(scene.obj(oid))
    if root is None:
        return True
    dx, dy = sim._DELTA[pose.heading]
    return root in (pose.cell, (pose.cell[0] + dx, pose.cell[1] + dy))


def shortest_path_to_view(scene, pose, oid, n_slots=8):
    """Minimum navigation action sequence until oid is in the center view
    and within interaction reach (the agent's cell or the cell it faces).

    Ties break by fewer rotations, then lexicographic action order, so the
    expert path is unique.  Raises PlanningError if unreachable.
    """
    if _in_reach(scene, pose, oid, n_slots):
        return []
    start = (pose.cell, pose.heading, pose.elevation)
    heap = [(0, 0, (), start)]
    best = set()
    while heap:
        cost, rots, path, state = heapq.heappop(heap)
        if state in best:
            continue
        best.add(state)
        cur = AgentPose(state[0], state[1], state[2])
        if _in_reach(scene, cur, oid, n_slots):
            return [NAV_ACTIONS[i] for i in path]
        for i, action in enumerate(NAV_ACTIONS):
            nxt, ok = step(scene, cur, action)
            if not ok:
                continue
            ns = (nxt.cell, nxt.heading, nxt.elevation)
            if ns in best:
                continue
            nr = rots + (1 if action in ("RotateLeft", "RotateRight") else 0)
            heapq.heappush(heap, (cost + 1, nr, path + (i,), ns))
    raise PlanningError(f"no path brings object {oid} into view")


def minimize_navigation(segment):
    """Collapse consecutive duplicate actions; COMPLETE is never collapsed."""
    out = []
    for a in segment:
        if a != COMPLETE and out and out[-1] == a:
            continue
        out.append(a)
    return out


# ---------------------------------------------------------------------------
# Expert demonstration planning

def _mask_for(scene, pose, oid):
    center = observe(scene, pose, k_views=1, n_slots=64)[0]
    for det in center:
        if det.oid == oid:
            return det.mask
    raise PlanningError(f"object {oid} not visible for manipulation")


class _Planner:
    def __init__(self, scene, n_slots=8):
        self.scene = scene
        self.pose = scene.start_pose
        self.n_slots = n_slots
        self.segments = []

    def _sees(self, oid):
        return any(det.oid == oid and det.confidence > 0
                   for view in observe(self.scene, self.pose, k_views=5,
                                        n_slots=self.n_slots)
                   for det in view)

    def goto(self, oid):
        if not shortest_path_to_view(self.scene, self.pose, oid):
            return
        steps = []
        # the demonstrated walk is only learnable from perception when the
        # target is in some view at each decision point; when it is not,
        # the expert scans in place first ("invisible -> rotate" is itself
        # a perceptual rule), and instances where no full turn brings the
        # target into view are rejected and regenerated
        scans = 0
        while not self._sees(oid):
            if scans == 4:
                raise PlanningError(
                    f"goto target {self.scene.obj(oid).cls} not visible "
                    "from segment start cell")
            self.pose, ok = step(self.scene, self.pose, "RotateLeft")
            assert ok
            steps.append(("RotateLeft", None, -1))
            scans += 1
        path = shortest_path_to_view(self.scene, self.pose, oid)
        for action in path:
            self.pose, ok = step(self.scene, self.pose, action)
            if not ok:
                raise PlanningError(f"planned nav action {action} failed")
            steps.append((action, None, -1))
        steps.append((COMPLETE, None, -1))
        self.segments.append({"category": "Goto", "target_oid": oid,
                              "steps": steps})

    def manip(self, category, actions_objects, target_oid, recep_oid=None):
        steps = []
        for action, oid in actions_objects:
            mask = _mask_for(self.scene, self.pose, oid)
            held_before = self.scene.held_object()
            self.pose, ok = step(self.scene, self.pose, action, mask)
            if not ok:
                raise PlanningError(
                    f"planned action {action} on {self.scene.obj(oid).cls} failed")
            self._verify_effect(action, oid, held_before)
            steps.append((action, self.scene.obj(oid).cls, oid))
        steps.append((COMPLETE, None, -1))
        seg = {"category": category, "target_oid": target_oid, "steps": steps}
        if recep_oid is not None:
            seg["recep_oid"] = recep_oid
        self.segments.append(seg)

    def _verify_effect(self, action, oid, held_before=None):
        """A raster mask can be ambiguous when two objects share a cell, in
        which case the simulator may act on the wrong one; reject the plan."""
        obj = self.scene.obj(oid)
        checks = {"Pickup": lambda: obj.held,
                  "Put": lambda: (held_before is not None
                                  and held_before.parent == oid),
                  "Slice": lambda: obj.sliced,
                  "ToggleOn": lambda: obj.on,
                  "ToggleOff": lambda: not obj.on,
                  "Open": lambda: obj.open,
                  "Close": lambda: not obj.open}
        if action in checks and not checks[action]():
            raise PlanningError(
                f"planned {action} acted on the wrong object "
                f"(intended {obj.cls} {oid})")

    def fetch(self, oid):
        self.goto(oid)
        self.manip("Pickup", [("Pickup", oid)], oid)

    def place(self, held_oid, recep_oid):
        self.goto(recep_oid)
        self.manip("Put", [("Put", recep_oid)], held_oid, recep_oid=recep_oid)


def task_scene(task):
    """Scene for a task instance, with the instance's own start pose."""
    scene = generate_scene(task["scene_seed"], task["layout"])
    if "start_pose" in task:
        cell, heading = task["start_pose"]
        scene.start_pose = AgentPose(tuple(cell), heading, 0)
    return scene


def plan_expert_demo(task):
    """Execute the per-type expert script; returns (final scene, segments)."""
    scene = task_scene(task)
    p = _Planner(scene)
    ttype = task["type"]
    target_oid = task["target_oid"]

    if ttype == "PickPlace":
        if task.get("sliced"):
            knife = scene.by_class("Knife")[0]
            p.fetch(knife.oid)
            p.goto(target_oid)
            p.manip("Slice", [("Slice", target_oid)], target_oid)
            parent = scene.obj(target_oid).parent
            p.manip("Put", [("Put", parent)], knife.oid, recep_oid=parent)
        p.fetch(target_oid)
        p.place(target_oid, task["recep_oid"])
    elif ttype == "StackPlace":
        container_oid = task["container_oid"]
        p.fetch(target_oid)
        p.goto(container_oid)
        p.manip("Put", [("Put", container_oid)], target_oid,
                recep_oid=container_oid)
        p.manip("Pickup", [("Pickup", container_oid)], container_oid)
        p.place(container_oid, task["recep_oid"])
    elif ttype == "PickTwo":
        for oid in task["target_oids"]:
            p.fetch(oid)
            p.place(oid, task["recep_oid"])
    elif ttype == "CleanPlace":
        sink = scene.by_class("Sink")[0]
        faucet = scene.by_class("Faucet")[0]
        p.fetch(target_oid)
        p.goto(sink.oid)
        p.manip("Clean", [("Put", sink.oid), ("ToggleOn", faucet.oid),
                          ("ToggleOff", faucet.oid), ("Pickup", target_oid)],
                target_oid)
        p.place(target_oid, task["recep_oid"])
    elif ttype == "HeatPlace":
        micro = scene.by_class("Microwave")[0]
        p.fetch(target_oid)
        p.goto(micro.oid)
        p.manip("Heat", [("Open", micro.oid), ("Put", micro.oid),
                         ("Close", micro.oid), ("ToggleOn", micro.oid),
                         ("ToggleOff", micro.oid), ("Open", micro.oid),
                         ("Pickup", target_oid), ("Close", micro.oid)],
                target_oid)
        p.place(target_oid, task["recep_oid"])
    elif ttype == "CoolPlace":
        fridge = scene.by_class("Fridge")[0]
        p.fetch(target_oid)
        p.goto(fridge.oid)
        p.manip("Cool", [("Open", fridge.oid), ("Put", fridge.oid),
                         ("Close", fridge.oid), ("Open", fridge.oid),
                         ("Pickup", target_oid), ("Close", fridge.oid)],
                target_oid)
        p.place(target_oid, task["recep_oid"])
    elif ttype == "Examine":
        lamp = scene.by_class("FloorLamp")[0]
        p.fetch(target_oid)
        p.goto(lamp.oid)
        p.manip("Toggle", [("ToggleOn", lamp.oid)], lamp.oid)
    else:
        raise ValueError(f"unknown task type {ttype}")

    sat, tot = sim.check_goal_conditions(scene, task)
    if sat != tot:
        raise PlanningError(
            f"expert demo leaves {tot - sat} goal condition(s) unmet")
    return scene, p.segments


# ---------------------------------------------------------------------------
# Task instance generation

def generate_task_instance(seed, ttype, pool="seen"):
    """Deterministic feasible task instance; retries placement a few times."""
    if ttype not in TASK_TYPES:
        raise ValueError(f"unknown task type {ttype}")
    layouts = SEEN_LAYOUTS if pool == "seen" else UNSEEN_LAYOUTS
    rng = np.random.default_rng(seed * 13131 + TASK_TYPES.index(ttype))
    last_err = None
    for attempt in range(64):
        layout = layouts[int(rng.integers(len(layouts)))]
        scene_seed = seed + attempt * 1_000_033
        scene = generate_scene(scene_seed, layout)
        try:
            task = _choose_task(rng, scene, ttype, scene_seed, layout)
            sat, _tot = sim.check_goal_conditions(scene, task)
            if sat > 0:
                raise PlanningError("goal partially satisfied at start")
            task["start_pose"] = _visible_start_pose(rng, scene, task)
            plan_expert_demo(task)
            return task
        except PlanningError as err:
            last_err = err
    raise PlanningError(
        f"no feasible {ttype} instance for seed {seed}: {last_err}")


def _first_fetch_oid(scene, task):
    """The object the expert walks to first."""
    if task["type"] == "PickPlace" and task.get("sliced"):
        return scene.by_class("Knife")[0].oid
    if task["type"] == "PickTwo":
        return task["target_oids"][0]
    return task["target_oid"]


def _visible_start_pose(rng, scene, task):
    """A start pose from which the first fetch target is in some view."""
    first = _first_fetch_oid(scene, task)
    blocked = scene.blocked_cells()
    cells = [(x, y) for x in range(sim.GRID_W) for y in range(sim.GRID_H)
             if (x, y) not in blocked]
    order = rng.permutation(len(cells))
    for ci in order:
        for heading in sim.HEADINGS:
            pose = AgentPose(cells[int(ci)], heading, 0)
            if any(det.oid == first and det.confidence > 0
                   for view in sim.observe(scene, pose, k_views=5, n_slots=8)
                   for det in view):
                return [list(pose.cell), heading]
    raise PlanningError("first fetch target visible from no start pose")


def _pick(rng, items):
    if not items:
        raise PlanningError("no candidate objects")
    return items[int(rng.integers(len(items)))]


def _goal_recep(rng, scene, room=1, exclude=()):
    cands = [o for o in scene.objects
             if o.cls in PLACE_RECEPTACLES and o.oid not in exclude
             and len(scene.contents(o.oid)) + room <= sim.RECEPTACLE_CAPACITY]
    return _pick(rng, cands)


def _choose_task(rng, scene, ttype, scene_seed, layout):
    task = {"type": ttype, "scene_seed": scene_seed, "layout": layout}
    movables = [o for o in scene.objects
                if o.cls in MOVABLE and o.cls not in CONTAINERS]
    if ttype != "PickTwo":
        # a duplicated class is only ever the target of PickTwo; for every
        # other task the directive must denote a single object, otherwise
        # two identical detections pull the learned walk in two directions
        n_of = {}
        for o in movables:
            n_of[o.cls] = n_of.get(o.cls, 0) + 1
        movables = [o for o in movables if n_of[o.cls] == 1]

    if ttype == "PickPlace":
        target = _pick(rng, movables)
        recep = _goal_recep(rng, scene, exclude=(target.parent,)
                            if target.parent is not None else ())
        task.update(target=target.cls, target_oid=target.oid,
                    recep_oid=recep.oid, recep=recep.cls)
        if (target.cls in SLICEABLE and target.parent is not None
                and scene.obj(target.parent).cls in PLACE_RECEPTACLES
                and rng.random() < 0.35):
            task["sliced"] = True
    elif ttype == "StackPlace":
        target = _pick(rng, movables)
        container = _pick(rng, [o for o in scene.objects
                                if o.cls in CONTAINERS and not o.held])
        recep = _goal_recep(rng, scene, exclude=(container.parent,)
                            if container.parent is not None else ())
        task.update(target=target.cls, target_oid=target.oid,
                    container=container.cls, container_oid=container.oid,
                    recep_oid=recep.oid, recep=recep.cls)
    elif ttype == "PickTwo":
        by_cls = {}
        for o in movables:
            by_cls.setdefault(o.cls, []).append(o)
        dups = [objs for objs in by_cls.values() if len(objs) >= 2]
        pair = _pick(rng, dups)[:2]
        recep = _goal_recep(rng, scene, room=2,
                            exclude=tuple(o.parent for o in pair
                                          if o.parent is not None))
        task.update(target=pair[0].cls, target_oid=pair[0].oid,
                    target_oids=[o.oid for o in pair],
                    recep_oid=recep.oid, recep=recep.cls)
    elif ttype in ("CleanPlace", "HeatPlace", "CoolPlace"):
        cands = movables if ttype == "CleanPlace" else \
            [o for o in movables if o.cls in FOODS]
        target = _pick(rng, cands)
        recep = _goal_recep(rng, scene, exclude=(target.parent,)
                            if target.parent is not None else ())
        task.update(target=target.cls, target_oid=target.oid,
                    recep_oid=recep.oid, recep=recep.cls)
    elif ttype == "Examine":
        target = _pick(rng, movables)
        task.update(target=target.cls, target_oid=target.oid)
    return task


# ---------------------------------------------------------------------------
# Language templates

CLASS_PHRASES = {
    "CounterTop": "counter", "FloorLamp": "floor lamp", "SoapBar": "soap",
}


def _phrase(cls):
    return CLASS_PHRASES.get(cls, cls.lower())


GOAL_TEMPLATES = {
    "PickPlace": ["put a {target} on the {recep}",
                  "move a {target} to the {recep}",
                  "carry a {target} over to the {recep}"],
    "PickPlaceSliced": ["put a sliced {target} on the {recep}",
                        "slice a {target} and put it on the {recep}",
                        "place a slice of {target} on the {recep}"],
    "StackPlace": ["put a {target} in a {container} on the {recep}",
                   "place a {container} with a {target} in it on the {recep}",
                   "move a {target} in a {container} to the {recep}"],
    "PickTwo": ["put two {target}s on the {recep}",
                "move two {target}s to the {recep}",
                "place a pair of {target}s on the {recep}"],
    "CleanPlace": ["put a cleaned {target} on the {recep}",
                   "wash a {target} and put it on the {recep}",
                   "place a clean {target} on the {recep}"],
    "HeatPlace": ["put a heated {target} on the {recep}",
                  "warm up a {target} and put it on the {recep}",
                  "place a hot {target} on the {recep}"],
    "CoolPlace": ["put a chilled {target} on the {recep}",
                  "cool a {target} and put it on the {recep}",
                  "place a cold {target} on the {recep}"],
    "Examine": ["examine a {target} by the light of the floor lamp",
                "look at a {target} under the lamp light",
                "inspect a {target} with the floor lamp on"],
}

INSTR_TEMPLATES = {
    "Goto": ["go to the {obj}", "walk over to the {obj}",
             "head to the {obj}"],
    "Pickup": ["pick up the {obj}", "grab the {obj}", "take the {obj}"],
    "Put": ["put the {obj} on the {recep}", "place the {obj} on the {recep}",
            "set the {obj} down on the {recep}"],
    "Slice": ["slice the {obj}", "cut the {obj}", "cut up the {obj}"],
    "Clean": ["wash the {obj} in the sink", "rinse the {obj} in the sink",
              "clean the {obj} in the sink"],
    "Heat": ["heat the {obj} in the microwave",
             "warm the {obj} in the microwave",
             "cook the {obj} in the microwave"],
    "Cool": ["chill the {obj} in the fridge", "cool the {obj} in the fridge",
             "leave the {obj} in the fridge until cold"],
    "Toggle": ["turn on the lamp", "switch on the lamp", "turn the lamp on"],
}

VAGUE_GOTO = ["go across the room", "walk around", "move over there"]


def verbalize_directive(task, scene, segments, seed, misleading=0.0):
    """Goal statement and one instruction per segment from seeded templates."""
    rng = np.random.default_rng(seed * 7 + 9176)
    key = task["type"]
    if task.get("sliced"):
        key = "PickPlaceSliced"
    slots = {
        "target": _phrase(task.get("target", "")),
        "recep": _phrase(task.get("recep", "")),
        "container": _phrase(task.get("container", "")),
    }
    goal = _pick(rng, GOAL_TEMPLATES[key]).format(**slots)
    instructions = []
    for seg in segments:
        cat = seg["category"]
        obj_cls = scene.obj(seg["target_oid"]).cls
        local = {"obj": _phrase(obj_cls)}
        if cat == "Put":
            local["recep"] = _phrase(scene.obj(seg["recep_oid"]).cls)
        if cat == "Goto" and misleading > 0.0 and rng.random() < misleading:
            text = _pick(rng, VAGUE_GOTO)
        else:
            text = _pick(rng, INSTR_TEMPLATES[cat]).format(**local)
        instructions.append(text)
    return {"goal": goal, "instructions": instructions}


# ---------------------------------------------------------------------------
# Episodes and dataset assembly

def build_episode(seed, ttype, pool="seen", misleading=0.0):
    task = generate_task_instance(seed, ttype, pool=pool)
    scene = task_scene(task)
    _, segments = plan_expert_demo(task)
    directive = verbalize_directive(task, scene, segments, seed,
                                    misleading=misleading)
    return {
        "version": 1,
        "seed": seed,
        "task": task,
        "segments": segments,
        "directive": directive,
    }


def replay_demo(episode, n_slots=8):
    """Re-execute the stored demonstration; returns (scene, failures, sat, tot).

    The independent soundness check behind dataset generation: every stored
    demo must replay with zero failed actions and full goal conditions.
    """
    task = episode["task"]
    scene = task_scene(task)
    pose = scene.start_pose
    failures = 0
    for seg in episode["segments"]:
        for action, _cls, oid in seg["steps"]:
            if action == COMPLETE:
                continue
            mask = None
            if action not in NAV_ACTIONS:
                mask = _mask_for(scene, pose, oid)
            pose, ok = step(scene, pose, action, mask)
            if not ok:
                failures += 1
    sat, tot = sim.check_goal_conditions(scene, task)
    return scene, failures, sat, tot


def expert_length(episode):
    return sum(len(seg["steps"]) for seg in episode["segments"])


def make_dataset(n_train=500, n_valid_seen=70, n_valid_unseen=70,
                 misleading=0.0):
    """Generate the train / valid-seen / valid-unseen episode splits."""
    splits = {"train": [], "valid_seen": [], "valid_unseen": []}
    specs = [("train", n_train, 0, "seen"),
             ("valid_seen", n_valid_seen, 100_000, "seen"),
             ("valid_unseen", n_valid_unseen, 200_000, "unseen")]
    for name, count, base, pool in specs:
        for i in range(count):
            ttype = TASK_TYPES[i % len(TASK_TYPES)]
            splits[name].append(
                build_episode(base + i, ttype, pool=pool,
                              misleading=misleading))
    return splits


def save_dataset(splits, out_dir):
    import os
    os.makedirs(out_dir, exist_ok=True)
    for name, episodes in splits.items():
        with open(os.path.join(out_dir, f"{name}.jsonl"), "w") as f:
            for ep in episodes:
                f.write(json.dumps(ep, sort_keys=True) + "\n")


def load_dataset(out_dir):
    import os
    splits = {}
    for name in ("train", "valid_seen", "valid_unseen"):
        path = os.path.join(out_dir, f"{name}.jsonl")
        if not os.path.exists(path):
            continue
        episodes = []
        with open(path) as f:
            for line in f:
                ep = json.loads(line)
                for seg in ep["segments"]:
                    seg["steps"] = [tuple(s) for s in seg["steps"]]
                episodes.append(ep)
        splits[name] = episodes
    return splits
