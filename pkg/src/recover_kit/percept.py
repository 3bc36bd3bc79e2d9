"""Scene-graph labelling from world geometry, and sound pass-through."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Optional

from recover_kit.kb import KnowledgeBase, Triple
from recover_kit.worldsim import (
    FLOOR,
    GRIPPER,
    NOTHING,
    ROBOT,
    AABB,
    WorldState,
    is_enclosure,
    layout,
    schema,
    segment_hits,
)

RELATIONS = ("above", "under", "on-top-of", "to-the-right-of", "to-the-left-of", "inside", "near", "blocking")


class UnknownSoundError(ValueError):
    pass


@dataclass(frozen=True)
class PerceptConfig:
    contact_tol: float = 0.01
    min_overlap: float = 0.5
    min_gap: float = 0.01
    near_dist: float = 0.5
    relation_radius: float = 1.0

    @classmethod
    def from_mapping(cls, m: Optional[Mapping]) -> "PerceptConfig":
        return cls(**dict(m or {}))


@dataclass(frozen=True)
class SceneGraph:
    nodes: tuple  # (id, class, frozenset of states), sorted by id
    edges: tuple  # sorted Triples

    def states(self) -> list[tuple[str, str]]:
        return [(n, s) for n, _, sts in self.nodes for s in sorted(sts)]

    def classes(self) -> dict[str, str]:
        return {n: c for n, c, _ in self.nodes}

    def __len__(self) -> int:
        return len(self.edges)


def _overlap_area(a: AABB, b: AABB) -> float:
    dx = min(a.x1, b.x1) - max(a.x0, b.x0)
    dy = min(a.y1, b.y1) - max(a.y0, b.y0)
    return max(dx, 0.0) * max(dy, 0.0)


def _dist(a: tuple, b: tuple) -> float:
    return math.dist(a, b)


def _hidden(world: WorldState, obj_id: str) -> bool:
    o = world.objects[obj_id]
    if o.container == GRIPPER:
        return True
    return any(is_enclosure(world, a) for a in world.ancestors(obj_id))


def _pair_relation(a: str, b: str, ba: AABB, bb: AABB, cfg: PerceptConfig) -> list[Triple]:
    """Strongest geometric relation for an unordered pair, as emitted triples."""
    small = min(ba.footprint, bb.footprint)
    area = _overlap_area(ba, bb)
    for top, bot, bt, bbot in ((a, b, ba, bb), (b, a, bb, ba)):
        if abs(bt.z0 - bbot.z1) <= cfg.contact_tol and small > 0 and area >= cfg.min_overlap * small:
            return [Triple(top, "on-top-of", bot)]
    if area > 0:
        for top, bot, bt, bbot in ((a, b, ba, bb), (b, a, bb, ba)):
            if bt.z0 - bbot.z1 > cfg.min_gap:
                return [Triple(top, "above", bot), Triple(bot, "under", top)]
    ca, cb = ba.center, bb.center
    dx = cb[0] - ca[0]
    if (
        _dist(ca[:2], cb[:2]) <= cfg.relation_radius
        and abs(dx) > ba.half_width
        and abs(dx) > bb.half_width
    ):
        left, right = (a, b) if dx > 0 else (b, a)
        return [Triple(left, "to-the-left-of", right), Triple(right, "to-the-right-of", left)]
    if _dist(ca, cb) < cfg.near_dist:
        return [Triple(a, "near", b), Triple(b, "near", a)]
    return []


def label_scene(world: WorldState, config: Optional[PerceptConfig] = None) -> SceneGraph:
    """Scene graph of the current world; one relation per object pair."""
    cfg = config or PerceptConfig()
    boxes = layout(world)
    edges: set[Triple] = set()

    for o in world.objects.values():
        if o.container is not None and is_enclosure(world, o.container):
            edges.add(Triple(o.id, "inside", o.container))
        elif o.container == FLOOR:
            edges.add(Triple(o.id, "on-top-of", FLOOR))
    if world.gripper == NOTHING:
        edges.add(Triple(NOTHING, "inside", GRIPPER))

    free = sorted(oid for oid in world.objects if oid != FLOOR and not _hidden(world, oid))
    rx, ry = world.robot_xy()
    robot_path = {
        s: ((rx, ry), (world.station_x(s), ry)) for s in world.stations if s != world.robot_at
    }

    for i, a in enumerate(free):
        for b in free[i + 1 :]:
            rel = _pair_relation(a, b, boxes[a], boxes[b], cfg)
            if rel and rel[0].predicate in ("on-top-of", "above"):
                edges.update(rel)
                continue
            blocked = None
            for x, s in ((a, b), (b, a)):
                if world.objects[x].container == FLOOR and s in robot_path and segment_hits(boxes[x], *robot_path[s]):
                    blocked = Triple(x, "blocking", s)
                    break
            if blocked is not None:
                edges.add(blocked)
                continue
            edges.update(rel)

    # the robot itself: near its station and anything lying at its feet
    edges.add(Triple(ROBOT, "near", world.robot_at))
    edges.add(Triple(world.robot_at, "near", ROBOT))
    for oid in free:
        if world.objects[oid].container == FLOOR:
            c = boxes[oid].center
            if _dist((rx, ry), c[:2]) < cfg.near_dist:
                edges.add(Triple(oid, "near", ROBOT))
                edges.add(Triple(ROBOT, "near", oid))

    nodes = [(ROBOT, "Robot", frozenset()), (GRIPPER, "RobotGripper", frozenset()), (NOTHING, "Nothing", frozenset())]
    nodes += [(o.id, o.cls, o.states) for o in world.objects.values()]
    return SceneGraph(tuple(sorted(nodes)), tuple(sorted(edges)))


def classify_sound(label: Optional[str], kb: Optional[KnowledgeBase] = None) -> Optional[str]:
    """Ground-truth pass-through; rejects labels outside the sound taxonomy."""
    if label is None:
        return None
    tax = (kb or schema()).taxonomy
    if label not in tax.classes or "Sound" not in tax.superclasses(label):
        raise UnknownSoundError(label)
    return label
