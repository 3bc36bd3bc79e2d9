"""Recovery strategy retrieval and re-planning context assembly."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

from recover_kit.events import EventLog, ObservationEvent
from recover_kit.kb import KnowledgeBase, StrategyDecl
from recover_kit.reasoner import FailureFinding
from recover_kit.worldsim import ACTIONS, Step, Task, WorldState

CONTEXT_VERSION = "recover-context v1"

RecoveryStrategy = StrategyDecl


class NoStrategyError(LookupError):
    pass


def guard_holds(kb: KnowledgeBase, strategy: StrategyDecl, bindings: dict) -> bool:
    for cls, var in strategy.guard:
        value = bindings.get(var)
        if value is None or not kb.is_instance(value, cls):
            return False
    return True


def candidates(kb: KnowledgeBase, finding: FailureFinding) -> list[StrategyDecl]:
    tax = kb.taxonomy
    b = finding.binding_map
    return [
        s
        for s in kb.strategies
        if tax.is_subclass(finding.failure_class, s.failure_class) and guard_holds(kb, s, b)
    ]


def retrieve(kb: KnowledgeBase, finding: FailureFinding) -> StrategyDecl:
    """Most specific matching strategy, then highest priority, then smallest id."""
    found = candidates(kb, finding)
    if not found:
        raise NoStrategyError(f"no recovery strategy for {finding.failure_class}")
    tax = kb.taxonomy
    return min(found, key=lambda s: (-tax.depth(s.failure_class, "Failure"), -s.priority, s.id))


@dataclass(frozen=True)
class ReplanContext:
    strategy: StrategyDecl
    finding: FailureFinding
    goal_text: str
    success_condition_text: str
    original_plan: tuple
    executed_prefix: tuple
    remaining: tuple  # original steps from the failed one onward
    environment_state_text: str
    available_objects: tuple
    available_actions: tuple
    task_id: str = ""
    # structured state for the template planner; never rendered
    world: Optional[WorldState] = field(default=None, compare=False, repr=False)
    pre_world: Optional[WorldState] = field(default=None, compare=False, repr=False)

    def render(self) -> str:
        f = self.finding
        binds = ", ".join(f"{k}={v}" for k, v in f.bindings)
        out = [
            f"# {CONTEXT_VERSION}",
            f"task: {self.task_id}",
            f"failure: {f.failure_class} at {f.event} ({binds})",
            f"strategy: {self.strategy.id}",
            f"instruction: {self.strategy.text}",
            f"goal: {self.goal_text}",
            f"success condition: {self.success_condition_text}",
            "original plan:",
            *(f"  {i + 1}. {s}" for i, s in enumerate(self.original_plan)),
            "executed steps:",
            *(f"  {s}" for s in self.executed_prefix),
            "remaining steps:",
            *(f"  {s}" for s in self.remaining),
            "environment:",
            *(f"  {line}" for line in self.environment_state_text.splitlines()),
            "objects: " + ", ".join(self.available_objects),
            "actions: " + ", ".join(self.available_actions),
        ]
        return "\n".join(out) + "\n"


def environment_text(obs: ObservationEvent) -> str:
    """One "obj (states) relation obj" line per scene triple, then stateful loners."""
    states: dict[str, list[str]] = {}
    for ent, st in obs.states:
        states.setdefault(ent, []).append(st)

    def label(e: str) -> str:
        sts = states.get(e)
        return f"{e} ({', '.join(sorted(sts))})" if sts else e

    lines = [f"{label(s)} {p} {o}" for s, p, o in obs.triples]
    subjects = {t[0] for t in obs.triples}
    lines += [label(e) for e in sorted(states) if e not in subjects]
    return "\n".join(lines)


def _latest_observation(log: EventLog) -> ObservationEvent:
    obs = log.observations()
    if not obs:
        raise ValueError("event log holds no observation")
    return obs[-1]


def build_context(
    kb: KnowledgeBase,
    log: EventLog,
    finding: FailureFinding,
    strategy: StrategyDecl,
    task: Task,
    plan: Sequence[Step],
    failed_index: int,
    world: Optional[WorldState] = None,
    pre_world: Optional[WorldState] = None,
) -> ReplanContext:
    """Text context for re-planning after ``plan[failed_index]`` failed."""
    obs = _latest_observation(log)
    objects = sorted({e for t in obs.triples for e in (t[0], t[2])} | {e for e, _ in obs.states})
    return ReplanContext(
        strategy=strategy,
        finding=finding,
        goal_text=task.goal,
        success_condition_text=task.success.text,
        original_plan=tuple(str(s) for s in task.plan),
        executed_prefix=tuple(str(s) for s in plan[:failed_index]),
        remaining=tuple(str(s) for s in plan[failed_index:]),
        environment_state_text=environment_text(obs),
        available_objects=tuple(objects),
        available_actions=ACTIONS,
        task_id=task.id,
        world=world,
        pre_world=pre_world,
    )
