"""Rule evaluation scoped to one action event (the sub-goal verifier)."""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterator, Optional, Sequence

from recover_kit.kb import TYPE, KnowledgeBase, Taxonomy
from recover_kit.ruledsl import Atom, Conj, Const, Rule, Var, compile_rule

BRUTEFORCE_LIMIT = 200


class KBTooLargeError(Exception):
    pass


@dataclass(frozen=True, order=True)
class FailureFinding:
    rule_name: str
    bindings: tuple  # sorted (var, value) pairs
    failure_class: str
    event: str

    @property
    def binding_map(self) -> dict:
        return dict(self.bindings)

    def format(self) -> str:
        inner = ", ".join(f"{k}={v}" for k, v in self.bindings)
        return f"{self.failure_class} {self.event} {self.rule_name} {{{inner}}}"


@dataclass(frozen=True)
class Verdict:
    findings: tuple = ()

    @property
    def success(self) -> bool:
        return not self.findings

    def primary(self, taxonomy: Taxonomy) -> Optional[FailureFinding]:
        """Most specific finding: deepest failure class, ties broken by rule name."""
        if not self.findings:
            return None
        return min(
            self.findings,
            key=lambda f: (-taxonomy.depth(f.failure_class, "Failure"), f.rule_name, f.bindings),
        )

    def format(self) -> str:
        if self.success:
            return "Success\n"
        return "".join(f.format() + "\n" for f in self.findings)


def _make_verdict(found: set) -> Verdict:
    return Verdict(tuple(sorted(found, key=lambda f: (f.rule_name, tuple((k, str(v)) for k, v in f.bindings)))))


@lru_cache(maxsize=None)
def _compiled(rule: Rule) -> tuple:
    return tuple(compile_rule(rule))


# ---------------------------------------------------------------------- indexed join


def _value(term, binding: dict):
    if isinstance(term, Const):
        return term.name
    return binding.get(term.name)


def _cost(kb: KnowledgeBase, atom: Atom, binding: dict) -> float:
    if atom.is_class_atom:
        v = _value(atom.args[0], binding)
        if v is not None:
            return 0.0
        return 1.0 + len(kb.instances(atom.name))
    s = _value(atom.args[0], binding)
    o = _value(atom.args[1], binding)
    if s is not None and o is not None:
        return 0.0
    if s is not None:
        return 0.5 + len(kb.objects(s, atom.name))
    if o is not None:
        return 0.5 + len(kb.subjects(atom.name, o))
    return 10.0 + kb.predicate_count(atom.name)


def _bind(binding: dict, term, value) -> Optional[dict]:
    if isinstance(term, Const):
        return binding if term.name == value else None
    cur = binding.get(term.name)
    if cur is None:
        out = dict(binding)
        out[term.name] = value
        return out
    return binding if cur == value else None


def _solve_atom(kb: KnowledgeBase, atom: Atom, binding: dict) -> Iterator[dict]:
    if atom.is_class_atom:
        term = atom.args[0]
        v = _value(term, binding)
        if v is not None:
            if kb.is_instance(v, atom.name):
                yield binding
            return
        for x in sorted(kb.instances(atom.name)):
            yield _bind(binding, term, x)  # type: ignore[misc]
        return
    st, ot = atom.args
    s, o = _value(st, binding), _value(ot, binding)
    if s is not None and o is not None:
        if o in kb.objects(s, atom.name):
            yield binding
    elif s is not None:
        for x in sorted(kb.objects(s, atom.name), key=str):
            b = _bind(binding, ot, x)
            if b is not None:
                yield b
    elif o is not None:
        for x in sorted(kb.subjects(atom.name, o)):
            b = _bind(binding, st, x)
            if b is not None:
                yield b
    else:
        for t in kb.query((_QV("s"), atom.name, _QV("o"))):
            b = _bind(binding, st, t["s"])
            if b is not None:
                b = _bind(b, ot, t["o"])
                if b is not None:
                    yield b


def _QV(name: str):
    from recover_kit.kb import Var as KBVar

    return KBVar(name)


def solve(kb: KnowledgeBase, conj: Conj, binding: dict) -> Iterator[dict]:
    """All extensions of ``binding`` satisfying ``conj``, joins ordered greedily."""

    def rec(remaining: tuple, b: dict) -> Iterator[dict]:
        if not remaining:
            if all(not _exists(kb, neg, b) for neg in conj.negs):
                yield b
            return
        idx = min(range(len(remaining)), key=lambda i: (_cost(kb, remaining[i], b), i))
        atom = remaining[idx]
        rest = remaining[:idx] + remaining[idx + 1 :]
        for nb in _solve_atom(kb, atom, b):
            yield from rec(rest, nb)

    yield from rec(conj.pos, binding)


def _exists(kb: KnowledgeBase, neg: tuple, binding: dict) -> bool:
    for sub in neg:
        for _ in solve(kb, sub, binding):
            return True
    return False


def evaluate(kb: KnowledgeBase, rules: Sequence[Rule], scope_event: str) -> Verdict:
    """Fire every rule with its head variable bound to ``scope_event``."""
    found: set[FailureFinding] = set()
    for rule in rules:
        for conj in _compiled(rule):
            keep = conj.pos_vars()
            for b in solve(kb, conj, {rule.head_var: scope_event}):
                bindings = tuple(sorted((k, v) for k, v in b.items() if k in keep))
                found.add(FailureFinding(rule.name, bindings, rule.head_class, scope_event))
    return _make_verdict(found)


# ---------------------------------------------------------------------- brute force oracle


class _Naive:
    """Flat triple list with DFS class closure; shares no code with the indexed path."""

    def __init__(self, kb: KnowledgeBase):
        self.triples = set(kb.triples())
        self.parents = {c: set(ps) for c, ps in kb.taxonomy.parents.items()}
        self.types: dict = {}
        for s, p, o in self.triples:
            if p == TYPE:
                self.types.setdefault(s, []).append(o)

    def reaches(self, start: str, goal: str) -> bool:
        stack, seen = [start], set()
        while stack:
            c = stack.pop()
            if c == goal:
                return True
            if c in seen:
                continue
            seen.add(c)
            stack.extend(self.parents.get(c, ()))
        return False

    def holds(self, atom: Atom, b: dict) -> bool:
        vals = [a.name if isinstance(a, Const) else b[a.name] for a in atom.args]
        if atom.is_class_atom:
            return any(self.reaches(c, atom.name) for c in self.types.get(vals[0], ()))
        return (vals[0], atom.name, vals[1]) in self.triples


def _vars_in_order(atoms) -> list[str]:
    order: list[str] = []
    for a in atoms:
        for t in a.args:
            if isinstance(t, Var) and t.name not in order:
                order.append(t.name)
    return order


def _brute(naive: _Naive, universe: list, conj: Conj, binding: dict) -> Iterator[dict]:
    order = [v for v in _vars_in_order(conj.pos) if v not in binding]

    def ready(atom: Atom, b: dict) -> bool:
        return all(isinstance(t, Const) or t.name in b for t in atom.args)

    def consistent(b: dict, newly: str) -> bool:
        for atom in conj.pos:
            if newly in atom.vars() and ready(atom, b) and not naive.holds(atom, b):
                return False
        return True

    def rec(i: int, b: dict) -> Iterator[dict]:
        if i == len(order):
            for neg in conj.negs:
                if any(True for sub in neg for _ in _brute(naive, universe, sub, b)):
                    return
            yield b
            return
        v = order[i]
        for x in universe:
            nb = dict(b)
            nb[v] = x
            if consistent(nb, v):
                yield from rec(i + 1, nb)

    # atoms already ground under the initial binding
    for atom in conj.pos:
        if ready(atom, binding) and not naive.holds(atom, binding):
            return
    yield from rec(0, dict(binding))


def evaluate_bruteforce(kb: KnowledgeBase, rules: Sequence[Rule], scope_event: str) -> Verdict:
    """Reference evaluation by enumerating substitutions over the entity universe."""
    if len(kb) > BRUTEFORCE_LIMIT:
        raise KBTooLargeError(f"{len(kb)} triples exceeds the {BRUTEFORCE_LIMIT}-triple limit")
    naive = _Naive(kb)
    consts = set()
    for rule in rules:
        for conj in compile_rule(rule):
            _collect_consts(conj, consts)
    universe = sorted({x for t in naive.triples for x in (t[0], t[2])} | consts | {scope_event}, key=str)
    found: set[FailureFinding] = set()
    for rule in rules:
        for conj in compile_rule(rule):
            keep = conj.pos_vars()
            for b in _brute(naive, universe, conj, {rule.head_var: scope_event}):
                bindings = tuple(sorted((k, v) for k, v in b.items() if k in keep))
                found.add(FailureFinding(rule.name, bindings, rule.head_class, scope_event))
    return _make_verdict(found)


def _collect_consts(conj: Conj, out: set) -> None:
    for a in conj.pos:
        out.update(t.name for t in a.args if isinstance(t, Const))
    for neg in conj.negs:
        for sub in neg:
            _collect_consts(sub, out)
