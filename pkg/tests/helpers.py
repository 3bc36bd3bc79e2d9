"""Shared builders for the test modules."""
from __future__ import annotations

import random

from recover_kit.events import EventLog
from recover_kit.kb import KnowledgeBase, load_schema
from recover_kit.percept import label_scene
from recover_kit.worldsim import NOTHING, execute

POOL = (
    ("knife-1", "Knife"), ("mug-1", "Mug"), ("plate-1", "Plate"), ("cup-1", "PlasticCup"),
    ("glass-1", "WineGlass"), ("ham-1", "Ham"), ("bread-1", "Bread"), ("apple-1", "Apple"),
    ("tomato-1", "Tomato"), ("egg-1", "Egg"), ("fridge-1", "Fridge"), ("coffee_machine-1", "CoffeeMachine"),
    ("microwave-1", "Microwave"), ("sink-1", "Sink"), ("counter_top-1", "CounterTop"),
    ("floor-1", "Floor"), ("shard-1", "Shard"), ("pot-1", "Pot"), ("cabinet-1", "Cabinet"),
    ("faucet-1", "Faucet"), ("box-1", "Box"),
)
ACTIONS = ("navigate_to", "pick_up", "put", "open", "close", "toggle_on", "toggle_off",
           "slice", "pour", "crack", "fill", "clean")
STATES = ("Dirty", "Broken", "Closed", "Open", "FilledWithLiquid", "ToggledOn", "Clean")
SOUNDS = ("BreakingSound", "DroppingSound", "SliceVeggySound", "OpenFridgeSound", "ScrubSound")
RELATIONS = ("inside", "on-top-of", "near", "blocking", "above", "under")
DIETS = ("Vegan", "Vegetarian", "Celiac")


def bare_kb(schema: KnowledgeBase) -> KnowledgeBase:
    """Schema vocabulary without the strategy triples, so generated kbs stay small."""
    kb = KnowledgeBase(schema.taxonomy)
    kb.predicates = set(schema.predicates)
    kb.relations = set(schema.relations)
    kb.sounds = set(schema.sounds)
    return kb


def _scene(rng: random.Random, objs: list) -> tuple[list, list]:
    ids = [o for o, _ in objs]
    triples = set()
    held = rng.choice(ids + [NOTHING, NOTHING])
    if rng.random() < 0.9:
        triples.add((held, "inside", "robot-gripper"))
    for _ in range(rng.randint(1, 6)):
        a, b = rng.sample(ids, 2)
        triples.add((a, rng.choice(RELATIONS), b))
    if rng.random() < 0.3:
        triples.add((rng.choice(ids), "near", "robot"))
    states = {(rng.choice(ids), rng.choice(STATES)) for _ in range(rng.randint(0, 4))}
    return sorted(triples), sorted(states)


def random_event_log(seed: int, schema: KnowledgeBase) -> tuple[EventLog, str]:
    """Small random observation/action log; returns it with the event to evaluate."""
    rng = random.Random(seed)
    kb = bare_kb(schema)
    log = EventLog(kb)
    objs = rng.sample(POOL, rng.randint(3, 6))
    classes = dict(objs)
    if rng.random() < 0.3:
        log.declare_agent("human-1", rng.choice(DIETS))
    rounds = 1 if rng.random() < 0.7 else 2
    target_event = None
    for _ in range(rounds):
        log.record_observation(*_scene(rng, objs), classes)
        ids = [o for o, _ in objs]
        source = rng.choice(ids) if rng.random() < 0.6 else None
        target = rng.choice(ids) if rng.random() < 0.9 else None
        sound = rng.choice(SOUNDS) if rng.random() < 0.4 else None
        target_event = log.record_action(rng.choice(ACTIONS), source, target, sound)
    if rng.random() < 0.9:
        log.record_observation(*_scene(rng, objs), classes)
    return log, target_event


def replay(task, injections=None, percept=None):
    """Run ``task.plan`` through the simulator, logging every scene and action."""
    injections = injections or {}
    kb = load_schema().copy_schema()
    log = EventLog(kb)
    world = task.world.clone()
    worlds = [world]
    log.record_observation(_label(world, percept))
    for i, step in enumerate(task.plan):
        held = world.gripper if world.gripper != NOTHING else None
        out = execute(world, step, injections.get(i))
        world = out.world
        worlds.append(world)
        log.record_action(step.action, held, step.arg, out.sound, i)
        log.record_observation(_label(world, percept))
    return log, worlds


def _label(world, percept):
    return label_scene(world) if percept is None else label_scene(world, percept)


def failure_window(record_log: str, event_id: str, schema: KnowledgeBase) -> tuple[EventLog, str]:
    """Rebuild the pre/action/post slice around ``event_id`` of an exported run log.

    Scene edges are trimmed to those touching the action's participants, the
    gripper or shards, which keeps the kb under the brute-force size limit.
    """
    import json

    lines = [json.loads(line) for line in record_log.splitlines() if line.strip()]
    agents = [(d["entity"], d["class"]) for d in lines if d["kind"] == "agent"]
    events = [d for d in lines if d["kind"] != "agent"]
    i = next(k for k, ev in enumerate(events) if ev["id"] == event_id)
    pre, act, post = events[i - 1], events[i], events[i + 1]
    focus = {act["source"], act["target"], "robot-gripper"} - {None}
    classes: dict = {}
    for ev in events[: i + 2]:
        classes.update(dict(tuple(c) for c in ev.get("classes", ())))

    def trim(obs):
        keep = [t for t in obs["triples"] if t[0] in focus or t[2] in focus
                or classes.get(t[0]) == "Shard"]
        ents = {e for t in keep for e in (t[0], t[2])} | focus
        states = [s for s in obs["states"] if s[0] in ents]
        return [tuple(t) for t in keep], [tuple(s) for s in states], ents

    log = EventLog(bare_kb(schema))
    for ent, cls in agents:
        log.declare_agent(ent, cls)
    t0, s0, e0 = trim(pre)
    t1, s1, e1 = trim(post)
    keep_cls = {e: c for e, c in classes.items() if e in e0 | e1}
    log.record_observation(t0, s0, keep_cls)
    eid = log.record_action(act["action"], act["source"], act["target"], act["sound"], act["step_index"])
    log.record_observation(t1, s1, keep_cls)
    return log, eid


# The dropping rule in listing form: Unicode operators, bare lowercase variables.
DROPPING_RULE_LISTING = """\
Event(e) ∧ hasAction(e,a)
∧ (ActionWithHeldObject(a) ∨ NonInteractiveAction(a))
∧ hasPreconditions(e,pre_c) ∧ hasTriple(pre_c,trp1)
∧ hasSubject(trp1,held_obj1) ∧ ¬(Nothing(held_obj1))
∧ hasObject(trp1,rg) ∧ RobotGripper(rg)
∧ hasPostconditions(e,post_c) ∧ hasTriple(post_c,trp2)
∧ hasSubject(trp2,held_obj2) ∧ Nothing(held_obj2)
∧ hasObject(trp1,rg) → DroppingObjFailure(e)
"""


def knife_drop_kb(schema: KnowledgeBase) -> KnowledgeBase:
    """Hand-built kb: e3 slices while holding knife-1, and the gripper ends empty."""
    kb = bare_kb(schema)
    kb.assert_all([
        ("e3", "type", "ActionEvent"),
        ("e3", "hasAction", "slice"),
        ("slice", "type", "SliceAction"),
        ("e3", "hasPreconditions", "obs2"),
        ("e3", "hasPostconditions", "obs4"),
        ("obs2", "hasTriple", "t1"),
        ("t1", "hasSubject", "knife-1"),
        ("t1", "hasObject", "robot-gripper"),
        ("robot-gripper", "type", "RobotGripper"),
        ("obs4", "hasTriple", "t2"),
        ("t2", "hasSubject", "nothing-0"),
        ("nothing-0", "type", "Nothing"),
    ])
    return kb


def run_without_recovery(task, injection):
    """Execute the (possibly altered) plan with the injection and no replanning."""
    from recover_kit.worldsim import BEFORE, DURING, inject_before, prepare

    world, plan = prepare(task, injection)
    k = injection.trigger_step
    if injection.failure_type in BEFORE and k == 0:
        world = inject_before(world, injection, plan[0])
    for i, step in enumerate(plan):
        during = injection if (i == k and injection.failure_type in DURING) else None
        world = execute(world, step, during).world
        if injection.failure_type in BEFORE and i + 1 == k:
            world = inject_before(world, injection, plan[k])
    return world


def context_at(task, injection, schema=None):
    """Replay up to the injected step and build the re-planning context for its finding."""
    from recover_kit.reasoner import evaluate
    from recover_kit.recovery import build_context, retrieve
    from recover_kit.ruledsl import load_rules

    kb = (schema or load_schema()).copy_schema()
    log = EventLog(kb)
    world = task.world.clone()
    log.record_observation(label_scene(world))
    k = injection.trigger_step
    for i, step in enumerate(task.plan[: k + 1]):
        held = world.gripper if world.gripper != NOTHING else None
        pre_world = world
        out = execute(world, step, injection if i == k else None)
        world = out.world
        eid = log.record_action(step.action, held, step.arg, out.sound, i)
        log.record_observation(label_scene(world))
    finding = evaluate(kb, load_rules(), eid).primary(kb.taxonomy)
    strategy = retrieve(kb, finding)
    return build_context(kb, log, finding, strategy, task, task.plan, k, world, pre_world)
