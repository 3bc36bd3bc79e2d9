"""Re-planners (template, external, replay) and grounding of text steps to actions."""
from __future__ import annotations

import json
import math
import os
import re
import urllib.error
import urllib.request
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

from recover_kit.recovery import ReplanContext
from recover_kit.worldsim import (
    ACTIONS,
    FLOOR,
    GRIPPER,
    NOTHING,
    Step,
    WorldState,
    execute,
    parse_step,
    stem,
)

# ---------------------------------------------------------------------- tokens and prices

TOKENS_PER_WORD = 1.3


def count_tokens(text: str, per_word: float = TOKENS_PER_WORD) -> int:
    return math.ceil(len(text.split()) * per_word)


@dataclass(frozen=True)
class Pricing:
    prompt_per_1k: float = 0.03
    completion_per_1k: float = 0.06
    budget: float = 5.0
    tokens_per_word: float = TOKENS_PER_WORD

    def tokens(self, text: str) -> int:
        return count_tokens(text, self.tokens_per_word)

    def cost(self, prompt_tokens: int, completion_tokens: int) -> float:
        return prompt_tokens / 1000 * self.prompt_per_1k + completion_tokens / 1000 * self.completion_per_1k


@dataclass(frozen=True)
class PlannerCall:
    kind: str  # "replan" or "verify"
    prompt_tokens: int
    completion_tokens: int
    cost: float


class PlannerError(Exception):
    pass


class UnexpandableStrategyError(PlannerError):
    pass


class TransportError(PlannerError):
    pass


class BudgetExceededError(PlannerError):
    pass


# ---------------------------------------------------------------------- canonical phrases

PHRASES = {
    "navigate_to": "navigate to {}",
    "pick_up": "pick up {}",
    "put": "put on {}",
    "open": "open {}",
    "close": "close {}",
    "toggle_on": "turn on {}",
    "toggle_off": "turn off {}",
    "slice": "slice {}",
    "pour": "pour into {}",
    "crack": "crack {}",
    "fill": "fill from {}",
    "clean": "clean {}",
}

STOPWORDS = frozenset("a an the from of with and then it its this that your in at".split())

_TOKEN_RE = re.compile(r"[a-z0-9]+")


def canonical(step: Step) -> str:
    return PHRASES[step.action].format(step.arg)


def tokens(text: str) -> Counter:
    return Counter(t for t in _TOKEN_RE.findall(text.lower().replace("_", " ")) if t not in STOPWORDS)


def cosine(a: Counter, b: Counter) -> float:
    if not a or not b:
        return 0.0
    if a == b:
        return 1.0
    dot = sum(n * b[t] for t, n in a.items())
    return dot / math.sqrt(sum(n * n for n in a.values()) * sum(n * n for n in b.values()))


@dataclass(frozen=True)
class GroundedPlan:
    steps: tuple  # Step
    scores: tuple  # score per grounded step
    rejected: tuple  # (text, best score)

    @property
    def ok(self) -> bool:
        return not self.rejected


@dataclass(frozen=True)
class GroundingConfig:
    threshold: float = 0.35


class Grounder:
    """Candidate index over (action, object) phrases; scores only candidates sharing a token."""

    def __init__(self, actions: Sequence[str], objects: Iterable[str]):
        if not actions:
            raise ValueError("empty action vocabulary")
        self.candidates: list[tuple[Step, Counter]] = []
        self.index: dict[str, set[int]] = {}
        for a in sorted(actions):
            for o in sorted(set(objects)):
                k = len(self.candidates)
                vec = tokens(PHRASES[a].format(o))
                self.candidates.append((Step(a, o), vec))
                for t in vec:
                    self.index.setdefault(t, set()).add(k)

    def best(self, text: str) -> tuple[Optional[Step], float]:
        q = tokens(text)
        pool: set[int] = set()
        for t in q:
            pool |= self.index.get(t, set())
        best, score = None, 0.0
        for k in sorted(pool):  # candidates are pre-sorted by (action, object)
            s = cosine(q, self.candidates[k][1])
            if s > score:
                best, score = self.candidates[k][0], s
        return best, score


def ground(
    steps: Sequence[str],
    actions: Sequence[str],
    objects: Iterable[str],
    config: GroundingConfig = GroundingConfig(),
) -> GroundedPlan:
    """Map each text step to its most similar (action, object) candidate."""
    g = Grounder(actions, objects)
    out, scores, rejected = [], [], []
    for text in steps:
        st, score = g.best(text)
        if st is None or score < config.threshold:
            rejected.append((text, score))
        else:
            out.append(st)
            scores.append(score)
    return GroundedPlan(tuple(out), tuple(scores), tuple(rejected))


def ground_exhaustive(
    steps: Sequence[str],
    actions: Sequence[str],
    objects: Iterable[str],
    config: GroundingConfig = GroundingConfig(),
) -> GroundedPlan:
    """Reference grounding: score every candidate, no index."""
    objs = sorted(set(objects))
    out, scores, rejected = [], [], []
    for text in steps:
        q = tokens(text)
        scored = [(-cosine(q, tokens(PHRASES[a].format(o))), a, o) for a in actions for o in objs]
        neg, a, o = min(scored)
        if -neg < config.threshold or neg == 0:
            rejected.append((text, -neg))
        else:
            out.append(Step(a, o))
            scores.append(-neg)
    return GroundedPlan(tuple(out), tuple(scores), tuple(rejected))


def object_registry(world: WorldState, plans: Iterable[Sequence[Step]] = ()) -> list[str]:
    """Grounding targets: present objects plus ids the plans expect to exist later (slices)."""
    names = set(world.objects) | {FLOOR}
    for plan in plans:
        names.update(s.arg for s in plan if s.arg is not None)
    return sorted(names)


# ---------------------------------------------------------------------- template planner

_AFFORDANCES = (("pick_up", "Pickupable"), ("open", "Openable"), ("toggle_on", "Toggleable"), ("slice", "Sliceable"))


def _base(obj_id: str) -> str:
    return re.sub(r"-(slice|cracked)$", "", stem(obj_id))


def _find(world: WorldState, cls: str) -> Optional[str]:
    hits = sorted(o for o in world.objects if world.is_a(o, cls))
    return hits[0] if hits else None


def _require(world: WorldState, cls: str, why: str) -> str:
    x = _find(world, cls)
    if x is None:
        raise UnexpandableStrategyError(f"no {cls} in the world to {why}")
    return x


def _held(world: WorldState) -> Optional[str]:
    return None if world.gripper == NOTHING else world.gripper


def _clean_routine(world: WorldState, o: str) -> list[Step]:
    sink = _require(world, "Sink", "wash in")
    faucet = sorted(x for x in world.objects if world.is_a(x, "Faucet") and world.station_of(x) == world.station_of(sink))
    if not faucet:
        raise UnexpandableStrategyError(f"no faucet at {sink}")
    f = faucet[0]
    return [
        Step("navigate_to", sink),
        Step("put", sink),
        Step("toggle_on", f),
        Step("clean", o),
        Step("toggle_off", f),
        Step("pick_up", o),
    ]


def _dispose_shards(world: WorldState) -> list[Step]:
    shards = sorted(
        o
        for o in world.objects
        if world.is_a(o, "Shard") and not any(world.is_a(a, "GarbageCan") for a in world.ancestors(o) if a != GRIPPER)
    )
    if not shards:
        return []
    can = _require(world, "GarbageCan", "dispose of shards")
    out = []
    for s in shards:
        out += [Step("navigate_to", s), Step("pick_up", s), Step("navigate_to", can), Step("put", can)]
    return out


def _closed_holder(world: WorldState, obj_id: str) -> Optional[str]:
    for a in world.ancestors(obj_id):
        if a != GRIPPER and "Closed" in world.objects[a].states:
            return a
    return None


def _substitute(steps: Sequence[Step], old: str, new: str) -> list[Step]:
    return [Step(s.action, new if s.arg == old else s.arg) for s in steps]


def _skip_ingredient(steps: Sequence[Step], ingredient: str, carrying: bool = False) -> list[Step]:
    """Drop steps touching the ingredient or anything derived from it."""
    base = _base(ingredient)
    out = []
    for s in steps:
        touches = s.arg is not None and _base(s.arg) == base
        if touches:
            carrying = carrying or s.action == "pick_up"
            continue
        if carrying and s.action in ("put", "pour", "crack"):
            if s.action == "put":
                carrying = False
            continue
        out.append(s)
    return out


def _expand(ctx: ReplanContext) -> list[Step]:
    w = ctx.world
    if w is None:
        raise UnexpandableStrategyError("template planning needs the structured world state")
    b = ctx.finding.binding_map
    rem = [parse_step(s) for s in ctx.remaining]
    e, rest = (rem[0], rem[1:]) if rem else (None, [])
    redo = [e] if e is not None else []
    sid = ctx.strategy.id
    held = _held(w)

    if sid in ("drop_pick_back", "break_retrieve", "break_generic"):
        o = b["held_obj1"]
        return [Step("navigate_to", o), Step("pick_up", o)] + rem
    if sid == "drop_dirty_clean":
        o = b["held_obj1"]
        return [Step("navigate_to", o), Step("pick_up", o)] + _clean_routine(w, o) + rem
    if sid == "break_replace":
        o = b["held_obj1"]
        cls = w.objects[o].cls
        spares = sorted(x for x, ob in w.objects.items() if x != o and ob.cls == cls and "Broken" not in ob.states)
        if not spares:
            raise UnexpandableStrategyError(f"no replacement {cls} for {o}")
        r = spares[0]
        steps = _dispose_shards(w)
        holder = _closed_holder(w, r)
        if holder is not None:
            steps += [Step("navigate_to", holder), Step("open", holder)]
        steps += [Step("navigate_to", r), Step("pick_up", r)]
        return steps + _substitute(rem, o, r)
    if sid == "safety_clear_shards":
        return _dispose_shards(w) + rem
    if sid == "dirty_clean":
        o = b["o"]
        return [Step("navigate_to", o), Step("pick_up", o)] + _clean_routine(w, o) + rem
    if sid == "occupied_clear":
        r = b["r"]
        clutter = [k for k in w.children(r) if w.objects[k].clutter] or [b["x"]]
        steps = [Step("put", FLOOR)] if held else []
        for c in clutter:
            steps += [Step("pick_up", c), Step("put", FLOOR)]
        if held:
            steps.append(Step("pick_up", held))
        return steps + rem
    if sid == "plan_insert_open":
        return [Step("open", b["c"])] + rem
    if sid == "plan_fix_step":
        if e is None:
            raise UnexpandableStrategyError("no step to fix")
        for action, prop in _AFFORDANCES:
            if action != e.action and w.is_a(e.arg, prop):
                return [Step(action, e.arg)] + rest
        raise UnexpandableStrategyError(f"{e.arg} affords no known action")
    if sid in ("retry_action", "generic_retry"):
        return rem
    if sid == "diet_skip_ingredient":
        o = b["o"]
        home = _original_place(ctx, o)
        steps = [Step("put", home)] if held == o else []
        return steps + _skip_ingredient(rest, o, carrying=held == o)
    if sid == "liquid_empty_target":
        c = b["c"]
        sink = _require(w, "Sink", "empty into")
        home = w.objects[c].container
        steps = [Step("put", FLOOR)] if held else []
        steps += [Step("pick_up", c), Step("navigate_to", sink), Step("pour", sink), Step("navigate_to", home), Step("put", home)]
        if held:
            steps.append(Step("pick_up", held))
        return steps + rem
    if sid == "liquid_empty_appliance":
        m, c = b["m"], b["c"]
        sink = _require(w, "Sink", "empty into")
        steps = [Step("put", FLOOR)] if held else []
        steps += [
            Step("toggle_off", m),
            Step("pick_up", c),
            Step("navigate_to", sink),
            Step("pour", sink),
            Step("navigate_to", m),
            Step("put", m),
            Step("toggle_on", m),
        ]
        if held:
            steps.append(Step("pick_up", held))
        return steps + rest
    if sid == "clear_path":
        obstacle = b["b"]
        steps = [Step("put", FLOOR)] if held else []
        steps += [Step("pick_up", obstacle), Step("put", FLOOR)]
        if held:
            steps.append(Step("pick_up", held))
        return steps + rem
    if sid == "enclosed_open":
        c = b.get("c") or w.objects[e.arg].container
        return [Step("open", c)] + rem
    raise UnexpandableStrategyError(f"no template for strategy {sid}")


def _original_place(ctx: ReplanContext, obj_id: str) -> str:
    pre = ctx.pre_world
    if pre is not None and obj_id in pre.objects and pre.objects[obj_id].container not in (None, GRIPPER):
        return pre.objects[obj_id].container
    return FLOOR


def with_navigation(world: WorldState, steps: Sequence[Step]) -> list[Step]:
    """Insert a navigate step wherever the next step's object is out of reach."""
    w = world
    out: list[Step] = []
    for s in steps:
        if s.action != "navigate_to" and s.arg in w.objects and not w.reachable(s.arg):
            nav = Step("navigate_to", s.arg)
            out.append(nav)
            w = execute(w, nav).world
        out.append(s)
        w = execute(w, s).world
    return out


def template_replan(ctx: ReplanContext) -> list[str]:
    """Expand the strategy against the current world; returns canonical phrases."""
    return [canonical(s) for s in with_navigation(ctx.world, _expand(ctx))]


# ---------------------------------------------------------------------- external and replay adapters


@dataclass(frozen=True)
class EndpointConfig:
    base_url: str = ""
    token_env: str = "RECOVER_API_TOKEN"
    model: str = "default"
    timeout: float = 60.0
    pricing: Pricing = field(default_factory=Pricing)


def parse_steps(text: str) -> list[str]:
    """A JSON list of strings, or one step per non-empty line (list markers stripped)."""
    text = text.strip()
    try:
        value = json.loads(text)
    except ValueError:
        value = None
    if isinstance(value, list) and all(isinstance(v, str) for v in value):
        return [v.strip() for v in value if v.strip()]
    out = []
    for line in text.splitlines():
        line = re.sub(r"^\s*(?:[-*]|\d+[.)])\s*", "", line).strip()
        if line and not line.startswith("#"):
            out.append(line)
    return out


def external_replan(prompt: str, endpoint: EndpointConfig, spent: float = 0.0) -> tuple[list[str], PlannerCall]:
    """POST the prompt to a text-completion endpoint and split its reply into steps."""
    if not endpoint.base_url:
        raise TransportError("no endpoint configured")
    headers = {"Content-Type": "application/json"}
    token = os.environ.get(endpoint.token_env)
    if token:
        headers["Authorization"] = f"Bearer {token}"
    body = json.dumps({"model": endpoint.model, "prompt": prompt}).encode()
    req = urllib.request.Request(endpoint.base_url, data=body, headers=headers, method="POST")
    try:
        with urllib.request.urlopen(req, timeout=endpoint.timeout) as resp:
            payload = json.loads(resp.read().decode("utf-8"))
    except (urllib.error.URLError, OSError, ValueError) as exc:
        raise TransportError(str(exc)) from None
    text = payload.get("text", "") if isinstance(payload, dict) else str(payload)
    usage = payload.get("usage", {}) if isinstance(payload, dict) else {}
    pt = int(usage.get("prompt_tokens", endpoint.pricing.tokens(prompt)))
    ct = int(usage.get("completion_tokens", endpoint.pricing.tokens(text)))
    call = PlannerCall("replan", pt, ct, endpoint.pricing.cost(pt, ct))
    if spent + call.cost > endpoint.pricing.budget:
        raise BudgetExceededError(f"reached limit of {endpoint.pricing.budget:g}")
    return parse_steps(text), call


@dataclass(frozen=True)
class ReplayFixture:
    steps: tuple
    prompt_tokens: int
    completion_tokens: int


_HEADER_RE = re.compile(r"^#\s*(prompt_tokens|completion_tokens)\s*:\s*(\d+)\s*$")


def load_replay(path) -> ReplayFixture:
    text = Path(path).read_text(encoding="utf-8")
    counts = {}
    for line in text.splitlines():
        m = _HEADER_RE.match(line)
        if m:
            counts[m.group(1)] = int(m.group(2))
    if set(counts) != {"prompt_tokens", "completion_tokens"}:
        raise PlannerError(f"{path}: replay header needs prompt_tokens and completion_tokens")
    return ReplayFixture(tuple(parse_steps(text)), counts["prompt_tokens"], counts["completion_tokens"])


def replay_replan(path, pricing: Pricing = Pricing(), spent: float = 0.0) -> tuple[list[str], PlannerCall]:
    fx = load_replay(path)
    call = PlannerCall("replan", fx.prompt_tokens, fx.completion_tokens, pricing.cost(fx.prompt_tokens, fx.completion_tokens))
    if spent + call.cost > pricing.budget:
        raise BudgetExceededError(f"reached limit of {pricing.budget:g}")
    return list(fx.steps), call
