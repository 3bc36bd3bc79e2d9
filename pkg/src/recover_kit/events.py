"""Alternating observation/action event log, mirrored into a knowledge base."""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterable, Optional, Union

from recover_kit.kb import TYPE, KnowledgeBase, Literal, Triple
from recover_kit.percept import SceneGraph
from recover_kit.worldsim import ACTION_CLASSES, GRIPPER, NOTHING, ROBOT

OBSERVATION = "observation"
_FIXED_TYPES = {ROBOT: "Robot", GRIPPER: "RobotGripper", NOTHING: "Nothing"}


class EventLogError(Exception):
    pass


class AlternationError(EventLogError):
    pass


class UnknownActionError(EventLogError):
    pass


@dataclass(frozen=True)
class ObservationEvent:
    id: str
    time: int
    triples: tuple
    states: tuple  # (entity, state label)
    classes: tuple = ()  # (entity, class) for entities first seen here

    kind = "observation"


@dataclass(frozen=True)
class ActionEvent:
    id: str
    time: int
    action: str
    step_index: int
    source: Optional[str] = None
    target: Optional[str] = None
    sound: Optional[str] = None

    kind = "action"


Event = Union[ObservationEvent, ActionEvent]


class EventLog:
    """Ordered events; every mutation also asserts the matching kb triples."""

    def __init__(self, kb: KnowledgeBase):
        self.kb = kb
        self.events: list[Event] = []
        self._n_trp = 0
        self._n_sta = 0
        self._typed: set[str] = set()
        self.agents: list[tuple[str, str]] = []

    def __len__(self) -> int:
        return len(self.events)

    def __iter__(self):
        return iter(self.events)

    def __getitem__(self, i):
        return self.events[i]

    @property
    def last(self) -> Optional[Event]:
        return self.events[-1] if self.events else None

    def last_action(self) -> Optional[ActionEvent]:
        for ev in reversed(self.events):
            if isinstance(ev, ActionEvent):
                return ev
        return None

    def actions(self) -> list[ActionEvent]:
        return [e for e in self.events if isinstance(e, ActionEvent)]

    def observations(self) -> list[ObservationEvent]:
        return [e for e in self.events if isinstance(e, ObservationEvent)]

    def _next_id(self) -> str:
        return f"event_{len(self.events)}"

    def _type(self, entity: str, cls: str) -> None:
        if entity not in self._typed:
            self._typed.add(entity)
            self.kb.assert_triple(entity, TYPE, cls)

    # ------------------------------------------------------------------ recording
    def record_observation(
        self,
        scene: Union[SceneGraph, Iterable[tuple]],
        states: Iterable[tuple] = (),
        classes: Optional[dict] = None,
    ) -> str:
        if isinstance(self.last, ObservationEvent):
            raise AlternationError(f"observation after observation {self.last.id}")
        if isinstance(scene, SceneGraph):
            triples = scene.edges
            states = scene.states()
            classes = scene.classes()
        else:
            triples = tuple(sorted(Triple(*t) for t in scene))
            states = sorted(states)
        classes = dict(classes or {})
        for k, v in _FIXED_TYPES.items():
            classes.setdefault(k, v)
        eid = self._next_id()
        fresh = tuple(sorted((e, c) for e, c in classes.items() if e not in self._typed))
        self._assert_observation(eid, len(self.events), tuple(triples), tuple(states), fresh)
        ev = ObservationEvent(eid, len(self.events), tuple(triples), tuple(states), fresh)
        prev = self.last_action()
        self.events.append(ev)
        if prev is not None and self.events[-2] is prev:
            self.kb.assert_triple(prev.id, "hasPostconditions", eid)
        return eid

    def _assert_observation(self, eid: str, time: int, triples, states, classes) -> None:
        kb = self.kb
        for e, c in classes:
            self._type(e, c)
        kb.assert_triple(eid, TYPE, "ObservationEvent")
        self._type(OBSERVATION, ACTION_CLASSES[OBSERVATION])
        kb.assert_triple(eid, "hasAction", OBSERVATION)
        kb.assert_triple(eid, "hasTime", Literal(str(time)))
        for s, p, o in triples:
            self._n_trp += 1
            t = f"trp-{self._n_trp}"
            kb.assert_triple(eid, "hasTriple", t)
            kb.assert_triple(t, "hasSubject", s)
            kb.assert_triple(t, "hasPredicate", p)
            kb.assert_triple(t, "hasObject", o)
        for ent, label in states:
            self._n_sta += 1
            st = f"sta-{self._n_sta}"
            kb.assert_triple(st, TYPE, label)
            kb.assert_triple(eid, "hasState", st)
            kb.assert_triple(st, "hasSubject", ent)

    def record_action(
        self,
        action: str,
        source: Optional[str] = None,
        target: Optional[str] = None,
        sound: Optional[str] = None,
        step_index: Optional[int] = None,
    ) -> str:
        if not isinstance(self.last, ObservationEvent):
            raise AlternationError("an action must follow an observation")
        if action not in ACTION_CLASSES or action == OBSERVATION:
            raise UnknownActionError(action)
        prev = self.last_action()
        if step_index is None:
            step_index = 0 if prev is None else prev.step_index + 1
        elif prev is not None and step_index <= prev.step_index:
            raise EventLogError(f"step index {step_index} not after {prev.step_index}")
        eid = self._next_id()
        time = len(self.events)
        kb = self.kb
        kb.assert_triple(eid, TYPE, "ActionEvent")
        self._type(action, ACTION_CLASSES[action])
        kb.assert_triple(eid, "hasAction", action)
        kb.assert_triple(eid, "hasTime", Literal(str(time)))
        kb.assert_triple(eid, "hasStepIndex", Literal(str(step_index)))
        kb.assert_triple(eid, "hasPreconditions", self.last.id)
        if source is not None:
            kb.assert_triple(eid, "hasSource", source)
        if target is not None:
            kb.assert_triple(eid, "hasTarget", target)
        if sound is not None:
            snd = f"sound_{time}"
            kb.assert_triple(snd, TYPE, sound)
            kb.assert_triple(eid, "has_sound", snd)
        self.events.append(ActionEvent(eid, time, action, step_index, source, target, sound))
        return eid

    def declare_agent(self, entity: str, cls: str) -> None:
        """Type a non-physical participant (a human and their diet)."""
        self.kb.assert_triple(entity, TYPE, cls)
        if (entity, cls) not in self.agents:
            self.agents.append((entity, cls))

    # ------------------------------------------------------------------ links
    def pre(self, event_id: str) -> str:
        i = self._index(event_id)
        if i == 0 or not isinstance(self.events[i], ActionEvent):
            raise EventLogError(f"{event_id} is not an action event")
        return self.events[i - 1].id

    def post(self, event_id: str) -> Optional[str]:
        i = self._index(event_id)
        if not isinstance(self.events[i], ActionEvent):
            raise EventLogError(f"{event_id} is not an action event")
        return self.events[i + 1].id if i + 1 < len(self.events) else None

    def _index(self, event_id: str) -> int:
        for i, ev in enumerate(self.events):
            if ev.id == event_id:
                return i
        raise EventLogError(f"unknown event {event_id}")

    def audit(self) -> list[str]:
        """Every broken log invariant, as text; empty when the log is sound."""
        problems: list[str] = []
        last_step = None
        for i, ev in enumerate(self.events):
            want = ObservationEvent if i % 2 == 0 else ActionEvent
            if not isinstance(ev, want):
                problems.append(f"{ev.id}: expected {want.kind} at position {i}")
            if ev.id != f"event_{i}" or ev.time != i:
                problems.append(f"{ev.id}: id or time does not match position {i}")
            if isinstance(ev, ActionEvent):
                if last_step is not None and ev.step_index <= last_step:
                    problems.append(f"{ev.id}: step index not increasing")
                last_step = ev.step_index
                pre = self.kb.objects(ev.id, "hasPreconditions")
                if pre != {self.events[i - 1].id}:
                    problems.append(f"{ev.id}: preconditions {sorted(pre)}")
                post = self.kb.objects(ev.id, "hasPostconditions")
                want_post = {self.events[i + 1].id} if i + 1 < len(self.events) else set()
                if post != want_post:
                    problems.append(f"{ev.id}: postconditions {sorted(post)}")
        if self.events and not isinstance(self.events[-1], ObservationEvent):
            problems.append("log does not end with an observation")
        n = sum(len(o.triples) for o in self.observations())
        if self.kb.predicate_count("hasTriple") != n:
            problems.append(f"{self.kb.predicate_count('hasTriple')} reified triples, scenes hold {n}")
        return problems

    # ------------------------------------------------------------------ export
    def to_jsonl(self) -> str:
        head = [{"kind": "agent", "entity": e, "class": c} for e, c in self.agents]
        return "".join(json.dumps(d) + "\n" for d in head + [_event_dict(ev) for ev in self.events])

    @classmethod
    def from_jsonl(cls, text: str, kb: KnowledgeBase) -> "EventLog":
        """Replay an exported log into ``kb`` (normally a fresh schema copy)."""
        log = cls(kb)
        for line in text.splitlines():
            if not line.strip():
                continue
            d = json.loads(line)
            if d["kind"] == "agent":
                log.declare_agent(d["entity"], d["class"])
            elif d["kind"] == "observation":
                log.record_observation(
                    [tuple(t) for t in d["triples"]],
                    [tuple(s) for s in d["states"]],
                    dict(tuple(c) for c in d["classes"]),
                )
            elif d["kind"] == "action":
                log.record_action(d["action"], d["source"], d["target"], d["sound"], d["step_index"])
            else:
                raise EventLogError(f"unknown event kind {d['kind']!r}")
        return log


def _event_dict(ev: Event) -> dict:
    if isinstance(ev, ObservationEvent):
        return {
            "id": ev.id,
            "kind": "observation",
            "time": ev.time,
            "triples": [list(t) for t in ev.triples],
            "states": [list(s) for s in ev.states],
            "classes": [list(c) for c in ev.classes],
        }
    return {
        "id": ev.id,
        "kind": "action",
        "time": ev.time,
        "action": ev.action,
        "step_index": ev.step_index,
        "source": ev.source,
        "target": ev.target,
        "sound": ev.sound,
    }
