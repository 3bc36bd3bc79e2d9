"""Deterministic symbolic kitchen: objects, actions, failure injections, tasks."""
from __future__ import annotations

import math
import re
from dataclasses import dataclass, field, replace
from functools import lru_cache
from pathlib import Path
from typing import Iterable, NamedTuple, Optional, Union

import yaml

from recover_kit.data import data_path
from recover_kit.kb import Taxonomy, load_schema

ROBOT = "robot"
GRIPPER = "robot-gripper"
NOTHING = "nothing-0"
FLOOR = "floor-1"

STATION_SPACING = 1.5
ROBOT_Y = -0.8
HELD_Y, HELD_Z = -0.5, 1.0  # gripper position in front of the robot
DROP_Y = -1.1
REACH = 1.0  # arm reach along the counter row, metres

FAILURE_CLASSES = {
    1: "EnclosedObjectFailure",
    2: "DroppingObjFailure",
    3: "DroppingAndDirtyObjFailure",
    4: "DroppingAndBreakingObjFailure",
    5: "DirtyObjFailure",
    6: "OccupiedPutFailure",
    7: "PlanningFailure",
    8: "ActionExecutionFailure",
    9: "DietaryConstraintsViolationFailure",
    10: "PlanningFailure",
    11: "OccupiedByLiquidFailure",
    12: "MissingNavigationFailure",
}

ACTION_CLASSES = {
    "navigate_to": "NavigateToAction",
    "pick_up": "PickUpAction",
    "put": "PutAction",
    "open": "OpenAction",
    "close": "CloseAction",
    "toggle_on": "ToggleOnAction",
    "toggle_off": "ToggleOffAction",
    "slice": "SliceAction",
    "pour": "PourAction",
    "crack": "CrackAction",
    "fill": "FillAction",
    "clean": "CleanAction",
    "observation": "ObservationAction",
}
ACTIONS = tuple(a for a in ACTION_CLASSES if a != "observation")
HELD_ACTIONS = frozenset({"slice", "pour", "crack", "fill"})

# Receptacles whose contents are enclosed (relation `inside`); the rest are surfaces.
ENCLOSURES = frozenset(
    {"Fridge", "Cabinet", "Drawer", "Microwave", "GarbageCan", "Sink", "CoffeeMachine",
     "Toaster", "Cup", "Bowl", "Pot", "Box", "RobotGripper"}
)
SINGLE_SLOT = frozenset({"StoveBurner", "CoffeeMachine", "Toaster", "Microwave"})
LIQUIDS = frozenset({"ContainsWater", "ContainsCoffee", "ContainsWine"})

_SIZES = {
    "CounterTop": (1.2, 0.6, 0.9),
    "DiningTable": (1.2, 0.8, 0.75),
    "Cabinet": (0.8, 0.5, 0.9),
    "Drawer": (0.6, 0.5, 0.8),
    "Fridge": (0.8, 0.7, 1.8),
    "Microwave": (0.6, 0.5, 1.2),
    "Sink": (0.8, 0.6, 0.9),
    "Stove": (0.8, 0.6, 0.9),
    "StoveBurner": (0.6, 0.6, 0.9),
    "Toaster": (0.5, 0.5, 1.0),
    "CoffeeMachine": (0.5, 0.5, 1.1),
    "GarbageCan": (0.4, 0.4, 0.6),
    "Faucet": (0.05, 0.2, 0.3),
    "Mug": (0.1, 0.1, 0.12),
    "WineGlass": (0.08, 0.08, 0.2),
    "Plate": (0.25, 0.25, 0.03),
    "Bowl": (0.2, 0.2, 0.1),
    "Pot": (0.3, 0.3, 0.2),
    "Pan": (0.3, 0.3, 0.06),
    "WineBottle": (0.08, 0.08, 0.3),
    "SoapBottle": (0.08, 0.08, 0.2),
    "Box": (0.3, 0.3, 0.3),
    "Knife": (0.25, 0.03, 0.02),
    "Bread": (0.25, 0.12, 0.12),
    "Shard": (0.05, 0.05, 0.01),
}
_DEFAULT_SIZE = (0.1, 0.1, 0.1)


class WorldError(Exception):
    pass


class TaskError(WorldError):
    pass


class InfeasibleError(WorldError):
    pass


@lru_cache(maxsize=1)
def schema():
    """The shipped ontology, loaded once per process."""
    return load_schema()


def size_of(cls: str) -> tuple:
    tax = schema().taxonomy
    for c in [cls] + sorted(tax.superclasses(cls) - {cls}):
        if c in _SIZES:
            return _SIZES[c]
    return _DEFAULT_SIZE


def stem(obj_id: str) -> str:
    return re.sub(r"-\d+$", "", obj_id)


# ---------------------------------------------------------------------- state


@dataclass(frozen=True)
class WorldObject:
    id: str
    cls: str
    states: frozenset = frozenset()
    container: Optional[str] = None
    floor_xy: Optional[tuple] = None  # position when lying on the floor
    mount: Optional[str] = None  # fixture this object is attached to (faucets)
    clutter: bool = False

    @property
    def held(self) -> bool:
        return self.container == GRIPPER


@dataclass
class WorldState:
    objects: dict
    stations: tuple
    robot_at: str
    gripper: str = NOTHING
    humans: dict = field(default_factory=dict)
    tick: int = 0
    rng_seed: int = 0
    derived: dict = field(default_factory=dict)  # new id -> source id
    consumed: tuple = ()  # ids replaced by derived objects
    counters: dict = field(default_factory=dict)

    def clone(self) -> "WorldState":
        return WorldState(
            objects=dict(self.objects),
            stations=self.stations,
            robot_at=self.robot_at,
            gripper=self.gripper,
            humans=dict(self.humans),
            tick=self.tick,
            rng_seed=self.rng_seed,
            derived=dict(self.derived),
            consumed=self.consumed,
            counters=dict(self.counters),
        )

    # ---- class helpers
    def is_a(self, obj_id: str, cls: str) -> bool:
        o = self.objects.get(obj_id)
        return o is not None and cls in schema().taxonomy.superclasses(o.cls)

    def get(self, obj_id: str) -> WorldObject:
        try:
            return self.objects[obj_id]
        except KeyError:
            raise WorldError(f"unknown object {obj_id}") from None

    def set(self, obj: WorldObject) -> None:
        self.objects[obj.id] = obj

    def children(self, obj_id: str) -> list[str]:
        return sorted(o.id for o in self.objects.values() if o.container == obj_id)

    def descendants(self, obj_id: str) -> list[str]:
        out, stack = [], self.children(obj_id)
        while stack:
            c = stack.pop(0)
            out.append(c)
            stack.extend(self.children(c))
        return out

    def ancestors(self, obj_id: str) -> list[str]:
        out, cur = [], self.objects[obj_id].container
        while cur is not None and cur in self.objects:
            out.append(cur)
            cur = self.objects[cur].container
        if cur == GRIPPER:
            out.append(GRIPPER)
        return out

    def station_of(self, obj_id: str) -> str:
        """Fixture the robot must stand at to reach ``obj_id``."""
        if obj_id == FLOOR:
            return self.robot_at
        o = self.get(obj_id)
        if o.held or GRIPPER in self.ancestors(obj_id):
            return self.robot_at
        if o.mount is not None:
            return self.station_of(o.mount)
        if o.floor_xy is not None:
            return min(self.stations, key=lambda s: (abs(self.station_x(s) - o.floor_xy[0]), s))
        if o.container is None or o.container == FLOOR:
            return obj_id
        return self.station_of(o.container)

    def reachable(self, obj_id: str) -> bool:
        """Within arm's length: same station, or lying on the floor close by."""
        o = self.objects.get(obj_id)
        if o is not None and o.floor_xy is not None:
            return abs(o.floor_xy[0] - self.station_x(self.robot_at)) <= REACH
        return self.station_of(obj_id) == self.robot_at

    def station_x(self, station: str) -> float:
        return self.stations.index(station) * STATION_SPACING

    def robot_xy(self) -> tuple:
        return (self.station_x(self.robot_at), ROBOT_Y)

    def fresh_id(self, base: str) -> str:
        n = self.counters.get(base, 0)
        while True:
            n += 1
            cand = f"{base}-{n}"
            if cand not in self.objects and cand not in self.consumed:
                break
        self.counters[base] = n
        return cand

    def mass(self) -> int:
        return len(self.objects) + len(self.consumed)


# ---------------------------------------------------------------------- geometry


class AABB(NamedTuple):
    x0: float
    y0: float
    z0: float
    x1: float
    y1: float
    z1: float

    @property
    def center(self) -> tuple:
        return ((self.x0 + self.x1) / 2, (self.y0 + self.y1) / 2, (self.z0 + self.z1) / 2)

    @property
    def half_width(self) -> float:
        return (self.x1 - self.x0) / 2

    @property
    def footprint(self) -> float:
        return (self.x1 - self.x0) * (self.y1 - self.y0)


def _box(cx: float, cy: float, z0: float, size: tuple) -> AABB:
    w, d, h = size
    return AABB(cx - w / 2, cy - d / 2, z0, cx + w / 2, cy + d / 2, z0 + h)


def layout(world: WorldState) -> dict:
    """AABB of every placed object, derived from stations and containment."""
    boxes: dict[str, AABB] = {}
    n = len(world.stations)
    boxes[FLOOR] = AABB(-1.5, -3.0, -0.05, (n - 1) * STATION_SPACING + 1.5, 1.0, 0.0)

    def place(obj_id: str) -> AABB:
        if obj_id in boxes:
            return boxes[obj_id]
        o = world.objects[obj_id]
        size = size_of(o.cls)
        if obj_id in world.stations:
            b = _box(world.station_x(obj_id), 0.0, 0.0, size)
        elif o.mount is not None:
            base = place(o.mount)
            b = _box(base.center[0], base.y1 - size[1] / 2, base.z1 + 0.05, size)
        elif o.container == GRIPPER:
            x, _ = world.robot_xy()
            b = _box(x, HELD_Y, HELD_Z, size)
        elif o.floor_xy is not None:
            b = _box(o.floor_xy[0], o.floor_xy[1], 0.0, size)
        elif o.container is not None:
            parent = place(o.container)
            pcls = world.objects[o.container].cls if o.container in world.objects else "RobotGripper"
            if _enclosure(pcls):
                b = _box(parent.center[0], parent.center[1], parent.z0 + 0.02, size)
            else:
                siblings = [c for c in world.children(o.container) if world.objects[c].floor_xy is None]
                k, cnt = siblings.index(obj_id), len(siblings)
                ncols = max(1, math.ceil(cnt / 2))
                col, row = divmod(k, 2)
                pw, pd = parent.x1 - parent.x0, parent.y1 - parent.y0
                x = parent.x0 + (col + 0.5) * pw / ncols
                y = parent.center[1] + (-pd / 4 if row == 0 else pd / 4)
                b = _box(x, y, parent.z1, size)
        else:
            b = _box(0.0, 0.0, 0.0, size)
        boxes[obj_id] = b
        return b

    for oid in world.objects:
        if oid != FLOOR:
            place(oid)
    return boxes


def _enclosure(cls: str) -> bool:
    sup = schema().taxonomy.superclasses(cls)
    return bool(sup & ENCLOSURES)


def is_enclosure(world: WorldState, obj_id: str) -> bool:
    if obj_id == GRIPPER:
        return True
    return obj_id in world.objects and _enclosure(world.objects[obj_id].cls)


def segment_hits(box: AABB, a: tuple, b: tuple) -> bool:
    """2D slab test: does segment a-b cross the box footprint?"""
    t0, t1 = 0.0, 1.0
    for lo, hi, p, q in ((box.x0, box.x1, a[0], b[0]), (box.y0, box.y1, a[1], b[1])):
        d = q - p
        if abs(d) < 1e-12:
            if p < lo or p > hi:
                return False
            continue
        u0, u1 = (lo - p) / d, (hi - p) / d
        if u0 > u1:
            u0, u1 = u1, u0
        t0, t1 = max(t0, u0), min(t1, u1)
        if t0 > t1:
            return False
    return True


def path_blockers(world: WorldState, target_station: str, boxes: Optional[dict] = None) -> list[str]:
    """Floor objects crossing the robot's straight path to ``target_station``."""
    if target_station == world.robot_at:
        return []
    boxes = boxes if boxes is not None else layout(world)
    a = world.robot_xy()
    b = (world.station_x(target_station), ROBOT_Y)
    return [
        o.id
        for o in world.objects.values()
        if o.container == FLOOR and segment_hits(boxes[o.id], a, b)
    ]


# ---------------------------------------------------------------------- actions


class Step(NamedTuple):
    action: str
    arg: Optional[str] = None

    def __str__(self) -> str:
        return f"{self.action}({self.arg})" if self.arg is not None else self.action


_STEP_RE = re.compile(r"^\s*([a-z_]+)\s*(?:\(\s*([A-Za-z0-9_\-]*)\s*\))?\s*$")


def parse_step(text: str) -> Step:
    m = _STEP_RE.match(text)
    if not m or m.group(1) not in ACTION_CLASSES:
        raise TaskError(f"bad plan step {text!r}")
    arg = m.group(2) or None
    if m.group(1) != "observation" and arg is None:
        raise TaskError(f"plan step {text!r} needs an argument")
    return Step(m.group(1), arg)


class Outcome(NamedTuple):
    world: WorldState
    sound: Optional[str]
    rejection: Optional[str] = None


@dataclass(frozen=True)
class FailureInjection:
    failure_type: int
    trigger_step: int
    params: tuple = ()  # sorted (key, value) pairs

    def __post_init__(self):
        if self.failure_type not in FAILURE_CLASSES:
            raise WorldError(f"unknown failure type {self.failure_type}")

    @property
    def failure_class(self) -> str:
        return FAILURE_CLASSES[self.failure_type]

    def param(self, key: str, default=None):
        return dict(self.params).get(key, default)

    def format(self) -> str:
        extra = " ".join(f"{k}={v}" for k, v in self.params)
        return f"{self.failure_type} {self.trigger_step}" + (f" {extra}" if extra else "")


def parse_injection(text: str) -> FailureInjection:
    """``failure_type trigger_step [key=value ...]``"""
    parts = text.split()
    if len(parts) < 2:
        raise WorldError(f"bad injection line {text!r}")
    params = []
    for p in parts[2:]:
        k, _, v = p.partition("=")
        params.append((k, v))
    return FailureInjection(int(parts[0]), int(parts[1]), tuple(sorted(params)))


DURING = frozenset({1, 2, 3, 4, 8, 12})
BEFORE = frozenset({5, 6, 11})


_OPEN_SOUNDS = {"Fridge": ("OpenFridgeSound", "CloseFridgeSound"),
                "Microwave": ("OpenMicrowaveSound", "CloseMicrowaveSound")}
_TOGGLE_SOUNDS = {"Microwave": "ToggleOnMicrowaveSound", "Faucet": "ToggleOnFaucetSound",
                  "StoveBurner": "ToggleOnStoveSound", "Stove": "ToggleOnStoveSound",
                  "Toaster": "ToggleOnToasterSound", "CoffeeMachine": "ToggleOnCoffeeMachineSound"}
_NOMINAL_SOUNDS = {"pour": "PourLiquidSound", "crack": "CrackEggSound",
                   "fill": "FillWaterSound", "clean": "ScrubSound",
                   "toggle_off": "ToggleOffApplianceSound"}


def _door_sound(world: WorldState, c: str, opening: bool) -> str:
    pair = _OPEN_SOUNDS.get(world.objects[c].cls)
    if pair is None:
        return "CabinetDoorSound"
    return pair[0] if opening else pair[1]


def action_sound(world: WorldState, step: Step) -> Optional[str]:
    a, x = step
    if a in ("open", "close"):
        return _door_sound(world, x, a == "open")
    if a == "toggle_on":
        return _TOGGLE_SOUNDS.get(world.objects[x].cls, "ToggleOnMicrowaveSound")
    if a == "slice":
        veg = world.is_a(x, "Vegetable") or world.is_a(x, "Fruit")
        return "SliceVeggySound" if veg else "SliceFoodSound"
    return _NOMINAL_SOUNDS.get(a)


def _with_states(o: WorldObject, add=(), remove=()) -> WorldObject:
    return replace(o, states=(o.states - frozenset(remove)) | frozenset(add))


def _reject(world: WorldState, reason: str) -> Outcome:
    w = world.clone()
    w.tick += 1
    return Outcome(w, None, reason)


def _closed_ancestor(world: WorldState, obj_id: str) -> Optional[str]:
    for a in world.ancestors(obj_id):
        if a != GRIPPER and "Closed" in world.objects[a].states:
            return a
    return None


def _faucet_on(world: WorldState, station: str) -> bool:
    return any(
        world.is_a(o.id, "Faucet") and "ToggledOn" in o.states and world.station_of(o.id) == station
        for o in world.objects.values()
    )


def _drop(w: WorldState, dirty=False, broken=False) -> tuple[str, str]:
    held = w.gripper
    x, _ = w.robot_xy()
    obj = w.objects[held]
    add, remove = set(), set()
    if dirty:
        add.add("Dirty")
        remove.add("Clean")
    if broken:
        add.add("Broken")
    w.set(_with_states(replace(obj, container=FLOOR, floor_xy=(x, DROP_Y)), add, remove))
    w.gripper = NOTHING
    sound = "DropObjectSound"
    if broken:
        sound = "BreakingSound"
        if w.is_a(held, "Ceramic") or w.is_a(held, "Glass"):
            for dx in (-0.3, 0.3):
                sid = w.fresh_id("shard")
                w.set(WorldObject(sid, "Shard", container=FLOOR, floor_xy=(x + dx, DROP_Y)))
    return held, sound


def execute(world: WorldState, step: Union[Step, str], injection: Optional[FailureInjection] = None) -> Outcome:
    """Apply one plan step. ``injection`` is applied when given (the caller picks the step)."""
    if isinstance(step, str):
        step = parse_step(step)
    a, x = step
    if a == "observation":
        w = world.clone()
        w.tick += 1
        return Outcome(w, None)
    if x not in world.objects and x != FLOOR:
        return _reject(world, f"unknown object {x}")
    ftype = injection.failure_type if injection is not None else None
    if ftype is not None and ftype not in DURING:
        ftype = None

    if a == "navigate_to":
        target = world.station_of(x)
        w = world.clone()
        w.tick += 1
        if ftype in (2, 3, 4) and w.gripper != NOTHING:
            _, sound = _drop(w, dirty=ftype == 3, broken=ftype == 4)
            return Outcome(w, sound)
        if ftype == 12 and target != w.robot_at:
            rx = w.station_x(w.robot_at)
            mid = rx + math.copysign(STATION_SPACING / 2, w.station_x(target) - rx)
            bid = w.fresh_id("box")
            w.set(WorldObject(bid, "Box", container=FLOOR, floor_xy=(mid, ROBOT_Y)))
        if path_blockers(w, target):
            return Outcome(w, None, f"path to {target} blocked")
        w.robot_at = target
        return Outcome(w, None)

    if not world.reachable(x):
        return _reject(world, f"{x} is out of reach")

    w = world.clone()
    w.tick += 1
    if ftype == 8 and a in ("open", "close", "toggle_on", "toggle_off"):
        return Outcome(w, None)
    if ftype in (2, 3, 4) and a in HELD_ACTIONS and w.gripper != NOTHING:
        _, sound = _drop(w, dirty=ftype == 3, broken=ftype == 4)
        return Outcome(w, sound)

    held = w.gripper if w.gripper != NOTHING else None
    o = w.objects.get(x)

    if a == "pick_up":
        if held is not None:
            return _reject(world, "gripper is full")
        if not w.is_a(x, "Pickupable") or "Broken" in o.states:
            return _reject(world, f"{x} cannot be picked up")
        if o.held:
            return _reject(world, f"{x} is already held")
        closed = _closed_ancestor(w, x)
        if closed is not None:
            return _reject(world, f"{x} is inside closed {closed}")
        if ftype == 1 and o.container is not None and w.is_a(o.container, "Openable"):
            c = o.container
            w.set(_with_states(w.objects[c], {"Closed"}, {"Open"}))
            return Outcome(w, _door_sound(w, c, False))
        w.set(replace(o, container=GRIPPER, floor_xy=None, clutter=False))
        w.gripper = x
        return Outcome(w, None)

    if a == "put":
        if held is None:
            return _reject(world, "nothing to put")
        if x != FLOOR:
            if not w.is_a(x, "Receptacle") or x == held or x in w.descendants(held):
                return _reject(world, f"cannot put into {x}")
            if _closed_ancestor(w, x) is not None or "Closed" in o.states:
                return _reject(world, f"{x} is closed")
            kids = w.children(x)
            if any(w.objects[k].clutter for k in kids):
                return _reject(world, f"{x} is occupied")
            if kids and set(schema().taxonomy.superclasses(o.cls)) & SINGLE_SLOT:
                return _reject(world, f"{x} is occupied")
            if "FilledWithLiquid" in o.states and w.is_a(x, "Fillable"):
                return _reject(world, f"{x} holds liquid")
            w.set(replace(w.objects[held], container=x, floor_xy=None))
        else:
            rx, _ = w.robot_xy()
            n = sum(1 for ob in w.objects.values() if ob.floor_xy is not None and abs(ob.floor_xy[0] - rx) < 0.5 and ob.floor_xy[1] <= DROP_Y)
            w.set(replace(w.objects[held], container=FLOOR, floor_xy=(rx - 0.4 + 0.2 * (n % 5), DROP_Y - 0.2 * (n // 5))))
        w.gripper = NOTHING
        return Outcome(w, None)

    if a in ("open", "close"):
        if not w.is_a(x, "Openable"):
            return _reject(world, f"{x} cannot be {'opened' if a == 'open' else 'closed'}")
        if a == "open":
            w.set(_with_states(o, {"Open"}, {"Closed"}))
        else:
            w.set(_with_states(o, {"Closed"}, {"Open"}))
        return Outcome(w, _door_sound(w, x, a == "open"))

    if a == "toggle_on":
        if not w.is_a(x, "Toggleable"):
            return _reject(world, f"{x} cannot be toggled")
        w.set(_with_states(o, {"ToggledOn"}))
        _appliance_effects(w, x)
        return Outcome(w, action_sound(w, step))

    if a == "toggle_off":
        if not w.is_a(x, "Toggleable"):
            return _reject(world, f"{x} cannot be toggled")
        w.set(_with_states(o, (), {"ToggledOn"}))
        return Outcome(w, action_sound(w, step))

    if a == "slice":
        if held is None or not w.is_a(held, "Knife"):
            return _reject(world, "slicing needs a knife in hand")
        if not w.is_a(x, "Sliceable") or o.held:
            return _reject(world, f"{x} cannot be sliced")
        sound = action_sound(w, step)
        new_cls = o.cls + "Sliced"
        if new_cls not in schema().taxonomy.classes:
            return _reject(world, f"no sliced form of {o.cls}")
        nid = w.fresh_id(stem(x) + "-slice")
        _derive(w, x, WorldObject(nid, new_cls, o.states, o.container, o.floor_xy))
        return Outcome(w, sound)

    if a == "crack":
        if held != x or not w.is_a(x, "Crackable"):
            return _reject(world, f"{x} must be held to crack it")
        nid = w.fresh_id(stem(x) + "-cracked")
        _derive(w, x, WorldObject(nid, o.cls + "Cracked", o.states, GRIPPER))
        w.gripper = nid
        return Outcome(w, "CrackEggSound")

    if a == "pour":
        if held is None or "FilledWithLiquid" not in w.objects[held].states:
            return _reject(world, "nothing to pour")
        h = w.objects[held]
        liquids = h.states & LIQUIDS
        if w.is_a(x, "Sink"):
            w.set(_with_states(h, (), LIQUIDS | {"FilledWithLiquid", "Hot", "Boiling"}))
            return Outcome(w, "PourLiquidSound")
        if not w.is_a(x, "Fillable"):
            return _reject(world, f"cannot pour into {x}")
        if "FilledWithLiquid" in o.states:
            return _reject(world, f"{x} already holds liquid")
        w.set(_with_states(o, liquids | {"FilledWithLiquid"}))
        if not w.is_a(held, "Bottle"):
            w.set(_with_states(w.objects[held], (), LIQUIDS | {"FilledWithLiquid"}))
        return Outcome(w, "PourLiquidSound")

    if a == "fill":
        if not w.is_a(x, "Faucet") or "ToggledOn" not in o.states:
            return _reject(world, "the faucet is not running")
        if held is None or not w.is_a(held, "Fillable") or "FilledWithLiquid" in w.objects[held].states:
            return _reject(world, "nothing to fill")
        w.set(_with_states(w.objects[held], {"FilledWithLiquid", "ContainsWater"}))
        return Outcome(w, "FillWaterSound")

    if a == "clean":
        if o.container is None or not w.is_a(o.container, "Sink"):
            return _reject(world, f"{x} must be in the sink")
        if not _faucet_on(w, w.station_of(o.container)):
            return _reject(world, "the faucet is not running")
        w.set(_with_states(o, {"Clean"}, {"Dirty"}))
        return Outcome(w, "ScrubSound")

    return _reject(world, f"unsupported action {a}")


def _derive(w: WorldState, old: str, new: WorldObject) -> None:
    for kid in w.children(old):
        w.set(replace(w.objects[kid], container=new.id))
    del w.objects[old]
    w.consumed = w.consumed + (old,)
    w.derived[new.id] = old
    w.set(new)


def _appliance_effects(w: WorldState, x: str) -> None:
    cls_sup = schema().taxonomy.superclasses(w.objects[x].cls)
    contents = w.descendants(x)
    if "CoffeeMachine" in cls_sup:
        for c in w.children(x):
            if w.is_a(c, "Fillable") and "FilledWithLiquid" not in w.objects[c].states:
                w.set(_with_states(w.objects[c], {"FilledWithLiquid", "ContainsCoffee", "Hot"}))
        return
    for c in contents:
        o = w.objects[c]
        add = set()
        if "Microwave" in cls_sup or "StoveBurner" in cls_sup or "Stove" in cls_sup:
            add.add("Hot")
            if w.is_a(c, "Cookable"):
                add.add("Cooked")
            if "StoveBurner" in cls_sup and "FilledWithLiquid" in o.states:
                add.add("Boiling")
        if "Toaster" in cls_sup and w.is_a(c, "BreadSliced"):
            add.add("Toasted")
        if add:
            w.set(_with_states(o, add))


def inject_before(world: WorldState, injection: FailureInjection, step: Step) -> WorldState:
    """World-side part of injections that must be visible before ``step`` runs."""
    w = world.clone()
    f = injection.failure_type
    if f == 5 and w.gripper != NOTHING:
        w.set(_with_states(w.objects[w.gripper], {"Dirty"}, {"Clean"}))
    elif f == 6:
        bid = w.fresh_id("box")
        w.set(WorldObject(bid, "Box", container=step.arg, clutter=True))
    elif f == 11:
        target = step.arg
        if step.action == "toggle_on":
            cups = [c for c in w.children(target) if w.is_a(c, "Fillable")]
            target = cups[0]
        w.set(_with_states(w.objects[target], {"FilledWithLiquid", "ContainsWater"}))
    return w


# ---------------------------------------------------------------------- tasks

TASK_IDS = tuple(f"T{i}" for i in range(1, 13))
DIETS = {"Vegan": "AnimalProduct", "Vegetarian": "Meat", "Celiac": "ContainsGluten"}
_ATOM_RE = re.compile(r"^\s*(\S+)\s+(not\s+)?(in\s+)?(\S+)\s*$")


class SuccessAtom(NamedTuple):
    kind: str  # "state" or "in"
    subject: str
    value: str
    negated: bool = False

    def __str__(self) -> str:
        neg = "not " if self.negated else ""
        return f"{self.subject} {neg}{'in ' if self.kind == 'in' else ''}{self.value}"


@dataclass(frozen=True)
class SuccessCondition:
    atoms: tuple = ()

    @property
    def text(self) -> str:
        return " and ".join(str(a) for a in self.atoms) if self.atoms else "true"


def parse_atom(text: str) -> SuccessAtom:
    m = _ATOM_RE.match(text)
    if not m:
        raise TaskError(f"bad success atom {text!r}")
    return SuccessAtom("in" if m.group(3) else "state", m.group(1), m.group(4), bool(m.group(2)))


@dataclass(frozen=True)
class Task:
    id: str
    name: str
    goal: str
    world: WorldState = field(compare=False)
    plan: tuple
    success: SuccessCondition
    task_objects: tuple
    exclude: frozenset = frozenset()

    @property
    def easy(self) -> bool:
        return len(self.plan) <= 20


def _task_path(ref: Union[str, Path]) -> Path:
    if isinstance(ref, str) and re.fullmatch(r"T\d+", ref):
        return data_path("tasks", f"{ref}.yaml")
    return Path(ref)


def load_task(ref: Union[str, Path], seed: int = 0) -> Task:
    """Load a task file (or a shipped task by id such as ``"T4"``)."""
    path = _task_path(ref)
    try:
        doc = yaml.safe_load(path.read_text(encoding="utf-8"))
    except (OSError, yaml.YAMLError) as exc:
        raise TaskError(f"{path}: {exc}") from None
    return task_from_dict(doc, seed=seed)


def task_from_dict(doc: dict, seed: int = 0) -> Task:
    try:
        tid, objs, plan_text = doc["id"], doc["objects"], doc["plan"]
    except (KeyError, TypeError) as exc:
        raise TaskError(f"task file missing field {exc}") from None
    tax = schema().taxonomy
    objects: dict[str, WorldObject] = {}
    stations = []
    for entry in objs:
        oid, cls = entry["id"], entry["class"]
        if cls not in tax.classes:
            raise TaskError(f"{tid}: unknown class {cls} for {oid}")
        if oid in objects:
            raise TaskError(f"{tid}: duplicate object {oid}")
        objects[oid] = WorldObject(
            oid, cls, frozenset(entry.get("states", ())), entry.get("in"), mount=entry.get("mount")
        )
        if entry.get("in") is None and entry.get("mount") is None and cls != "Floor":
            stations.append(oid)
    objects.setdefault(FLOOR, WorldObject(FLOOR, "Floor"))
    for o in objects.values():
        for ref in (o.container, o.mount):
            if ref is not None and ref not in objects:
                raise TaskError(f"{tid}: {o.id} references undeclared object {ref}")
    plan = tuple(parse_step(s) for s in plan_text)
    for st in plan:
        if st.arg is not None and st.arg not in objects and not _derivable(st.arg, objects):
            raise TaskError(f"{tid}: plan step {st} references undeclared object {st.arg}")
    start = doc.get("start", stations[0] if stations else None)
    if start not in stations:
        raise TaskError(f"{tid}: start {start!r} is not a station")
    world = WorldState(objects, tuple(stations), start, humans=dict(doc.get("humans", {})), rng_seed=seed)
    task_objects = tuple(doc.get("task_objects", ()))
    if "steps" in doc and doc["steps"] != len(plan):
        raise TaskError(f"{tid}: declares {doc['steps']} steps, plan has {len(plan)}")
    if "n_objects" in doc and doc["n_objects"] != len(task_objects):
        raise TaskError(f"{tid}: declares {doc['n_objects']} objects, lists {len(task_objects)}")
    return Task(
        id=tid,
        name=doc.get("name", tid),
        goal=doc.get("goal", ""),
        world=world,
        plan=plan,
        success=SuccessCondition(tuple(parse_atom(a) for a in doc.get("success", ()))),
        task_objects=task_objects,
        exclude=frozenset(doc.get("exclude", ())),
    )


def _derivable(obj_id: str, objects: dict) -> bool:
    base = re.sub(r"-(slice|cracked)$", "", stem(obj_id))
    return base != stem(obj_id) and any(stem(o) == base for o in objects)


@lru_cache(maxsize=None)
def _load_cached(tid: str) -> Task:
    return load_task(tid)


def load_all_tasks() -> list[Task]:
    return [_load_cached(t) for t in TASK_IDS]


def get_task(tid: str) -> Task:
    return _load_cached(tid)


# ---------------------------------------------------------------------- feasibility


def nominal_trace(task: Task) -> list[WorldState]:
    """World before each step of the ground-truth plan, plus the final world."""
    worlds = [task.world]
    w = task.world
    for st in task.plan:
        w = execute(w, st).world
        worlds.append(w)
    return worlds


def _diet_for(world: WorldState, obj_id: str) -> Optional[str]:
    if world.is_a(obj_id, "Meat"):
        return "Vegetarian"
    if world.is_a(obj_id, "AnimalProduct"):
        return "Vegan"
    if world.is_a(obj_id, "ContainsGluten"):
        return "Celiac"
    return None


def _eligible(w: WorldState, nxt: Optional[Step], st: Step, f: int) -> bool:
    a, x = st
    held = w.gripper if w.gripper != NOTHING else None
    if f == 1:
        if a != "pick_up":
            return False
        c = w.objects[x].container
        return c in w.objects and w.is_a(c, "Openable") and "Open" in w.objects[c].states
    if f in (2, 3, 4):
        if held is None or not (a in HELD_ACTIONS or (a == "navigate_to" and w.station_of(x) != w.robot_at)):
            return False
        if f == 3:
            return w.is_a(held, "Dishware") and not w.is_a(held, "Breakable")
        if f == 4:
            return w.is_a(held, "Breakable")
        return True
    if f == 5:
        return (a == "put" and held is not None and w.is_a(held, "Dishware")
                and not w.is_a(x, "Sink") and x != FLOOR)
    if f == 6:
        return a == "put" and held is not None and x != FLOOR
    if f == 7:
        if a != "open" or nxt is None or "Closed" not in w.objects[x].states:
            return False
        if nxt.action == "put":
            return nxt.arg == x
        return nxt.action == "pick_up" and w.objects.get(nxt.arg) is not None and w.objects[nxt.arg].container == x
    if f == 8:
        if a in ("open", "close"):
            want = "Open" if a == "open" else "Closed"
            return w.is_a(x, "Openable") and want not in w.objects[x].states
        if a in ("toggle_on", "toggle_off"):
            on = "ToggledOn" in w.objects[x].states
            return w.is_a(x, "Toggleable") and (on if a == "toggle_off" else not on)
        return False
    if f == 9:
        return a == "pick_up" and _diet_for(w, x) is not None
    if f == 10:
        return a == "pick_up" and not w.is_a(x, "Openable")
    if f == 11:
        if a in ("put", "pour") and held is not None and x in w.objects:
            return w.is_a(x, "Fillable") and "FilledWithLiquid" not in w.objects[x].states
        if a == "toggle_on" and w.is_a(x, "CoffeeMachine"):
            return any(w.is_a(c, "Fillable") for c in w.children(x))
        return False
    if f == 12:
        return a == "navigate_to" and w.station_of(x) != w.robot_at
    raise WorldError(f"unknown failure type {f}")


@lru_cache(maxsize=None)
def _eligible_cached(tid: str, f: int) -> tuple:
    task = get_task(tid)
    return tuple(eligible_steps(task, f))


def eligible_steps(task: Task, failure_type: int) -> list[int]:
    """Plan indexes at which ``failure_type`` can be injected."""
    trace = nominal_trace(task)
    out = []
    for i, st in enumerate(task.plan):
        nxt = task.plan[i + 1] if i + 1 < len(task.plan) else None
        if _eligible(trace[i], nxt, st, failure_type):
            out.append(i)
    return out


def structurally_feasible(task: Task, failure_type: int) -> bool:
    return bool(eligible_steps(task, failure_type))


def feasible(task: Union[Task, str], failure_type: int) -> bool:
    """Structural requirement holds and the task does not exclude the failure."""
    if isinstance(task, str):
        task = get_task(task)
    if failure_type in task.exclude:
        return False
    return structurally_feasible(task, failure_type)


def default_injection(task: Task, failure_type: int, at_step: Optional[int] = None) -> FailureInjection:
    if not feasible(task, failure_type):
        raise InfeasibleError(f"failure {failure_type} is not feasible for {task.id}")
    steps = eligible_steps(task, failure_type)
    step = steps[0] if at_step is None else at_step
    if step not in steps:
        raise InfeasibleError(f"failure {failure_type} cannot be injected at step {step} of {task.id}")
    params: list = []
    if failure_type == 9:
        w = nominal_trace(task)[step]
        params.append(("diet", _diet_for(w, task.plan[step].arg)))
    return FailureInjection(failure_type, step, tuple(params))


def prepare(task: Task, injection: Optional[FailureInjection]) -> tuple[WorldState, tuple]:
    """Initial world and plan for a run, with config-time parts of the injection applied."""
    world, plan = task.world.clone(), task.plan
    if injection is None:
        return world, plan
    f, k = injection.failure_type, injection.trigger_step
    if not feasible(task, f):
        raise InfeasibleError(f"failure {f} is not feasible for {task.id}")
    if k not in eligible_steps(task, f):
        raise InfeasibleError(f"failure {f} cannot be injected at step {k} of {task.id}")
    if f == 7:
        plan = plan[:k] + plan[k + 1 :]
    elif f == 10:
        plan = plan[:k] + (Step("open", plan[k].arg),) + plan[k + 1 :]
    elif f == 9:
        diet = injection.param("diet") or _diet_for(nominal_trace(task)[k], plan[k].arg)
        human = sorted(world.humans)[0] if world.humans else "human-1"
        world.humans[human] = diet
    return world, plan


# ---------------------------------------------------------------------- success


def diet_conflict(world: WorldState, obj_id: str) -> bool:
    props = {DIETS[d] for d in world.humans.values() if d in DIETS}
    if not props:
        return False
    base = re.sub(r"-(slice|cracked)$", "", stem(obj_id))
    cands = [o for o in world.objects if o == obj_id or re.sub(r"-(slice|cracked)$", "", stem(o)) == base]
    return any(world.is_a(c, p) for c in cands for p in props)


def _atom_holds(world: WorldState, atom: SuccessAtom, subject: str, value: Optional[str] = None) -> bool:
    o = world.objects.get(subject)
    value = atom.value if value is None else value
    if o is None:
        return False
    if atom.kind == "state":
        return value in o.states
    return o.container == value or value in world.ancestors(subject)


def _replacements(world: WorldState, subject: str) -> list[str]:
    o = world.objects.get(subject)
    if o is None or "Broken" not in o.states:
        return [subject]
    same = [x.id for x in world.objects.values() if x.cls == o.cls and "Broken" not in x.states]
    return [subject] + sorted(same)


def success_check(world: WorldState, condition: SuccessCondition, task_objects: Iterable[str] = ()) -> bool:
    """True iff every declared atom and the implicit cleanliness/safety/diet atoms hold."""
    for atom in condition.atoms:
        if diet_conflict(world, atom.subject):
            # the ingredient must stay out of the dish
            if _atom_holds(world, atom, atom.subject) != atom.negated:
                return False
            continue
        values = _replacements(world, atom.value) if atom.kind == "in" else [atom.value]
        ok = any(
            _atom_holds(world, atom, s, v) != atom.negated
            for s in _replacements(world, atom.subject)
            for v in values
        )
        if not ok:
            return False
    for o in world.objects.values():
        if world.is_a(o.id, "Shard") and not any(world.is_a(a, "GarbageCan") for a in world.ancestors(o.id) if a != GRIPPER):
            return False
    watched = set(task_objects) | {a.subject for a in condition.atoms}
    for oid in watched:
        o = world.objects.get(oid)
        if o is not None and "Dirty" in o.states and "Broken" not in o.states:
            return False
    return True
