"""Triple store with a class taxonomy and subsumption-aware queries.

Entities are plain strings (``apple-1``, ``event_3``). Classes are
capitalised strings declared in a schema file. Literals (timestamps,
free text) are wrapped in :class:`Literal` so they never collide with
entity names.
"""
from __future__ import annotations

import re
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, NamedTuple, Optional, Union

TYPE = "type"

# Predicates every knowledge base understands, independent of the schema file.
CORE_PREDICATES = frozenset(
    {
        TYPE,
        "has_sound",
        "hasTriple",
        "hasSubject",
        "hasPredicate",
        "hasObject",
        "hasAction",
        "hasPreconditions",
        "hasPostconditions",
        "hasTarget",
        "hasSource",
        "hasState",
        "hasTime",
        "hasStepIndex",
        "forFailure",
        "hasGuardAtom",
        "hasInstruction",
        "hasPriority",
    }
)


class KBError(Exception):
    pass


class SchemaError(KBError):
    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class CycleError(SchemaError):
    def __init__(self, cls: str):
        self.cls = cls
        super().__init__(f"subclass cycle through class {cls!r}")


class UnknownPredicateError(KBError):
    pass


class UnknownClassError(KBError):
    pass


class UnknownEntityError(KBError):
    pass


@dataclass(frozen=True, order=True)
class Literal:
    value: str

    def __str__(self) -> str:
        return '"' + self.value.replace("\\", "\\\\").replace('"', '\\"') + '"'


Term = Union[str, Literal]


class Triple(NamedTuple):
    subject: str
    predicate: str
    object: Term

    def __str__(self) -> str:
        return f"{self.subject} {self.predicate} {self.object}"


@dataclass(frozen=True)
class Var:
    """Query variable; ``cls`` optionally restricts bindings by subsumption."""

    name: str
    cls: Optional[str] = None


PatternTerm = Union[str, Literal, Var]


@dataclass(frozen=True)
class StrategyDecl:
    id: str
    failure_class: str
    guard: tuple  # tuple of (class_name, var_name)
    priority: int
    text: str


def is_class_name(name: str) -> bool:
    return bool(name) and name[0].isupper()


class Taxonomy:
    """Subclass DAG plus unary ``Class => Property`` axioms."""

    def __init__(self) -> None:
        self.parents: dict[str, set[str]] = defaultdict(set)
        self.classes: set[str] = set()
        self._closure: dict[str, frozenset[str]] = {}

    def add_class(self, name: str, parent: Optional[str] = None) -> None:
        self.classes.add(name)
        if parent is not None:
            self.classes.add(parent)
            self.parents[name].add(parent)
        self._closure.clear()

    def add_axiom(self, cls: str, prop: str) -> None:
        # an axiom is an implication edge; it behaves like a subclass edge
        self.add_class(cls, prop)

    def check_acyclic(self) -> None:
        state: dict[str, int] = {}

        def visit(c: str) -> None:
            state[c] = 1
            for p in sorted(self.parents.get(c, ())):
                s = state.get(p, 0)
                if s == 1:
                    raise CycleError(p)
                if s == 0:
                    visit(p)
            state[c] = 2

        for c in sorted(self.classes):
            if state.get(c, 0) == 0:
                visit(c)

    def superclasses(self, cls: str) -> frozenset[str]:
        """Reflexive-transitive closure of ``cls`` upward."""
        cached = self._closure.get(cls)
        if cached is not None:
            return cached
        seen = {cls}
        stack = [cls]
        while stack:
            for p in self.parents.get(stack.pop(), ()):
                if p not in seen:
                    seen.add(p)
                    stack.append(p)
        result = frozenset(seen)
        self._closure[cls] = result
        return result

    def is_subclass(self, child: str, parent: str) -> bool:
        return parent in self.superclasses(child)

    def subclasses(self, cls: str) -> set[str]:
        return {c for c in self.classes if cls in self.superclasses(c)}

    def depth(self, cls: str, root: str) -> int:
        """Longest parent-chain length from ``cls`` up to ``root``."""
        if cls == root:
            return 0
        best = -1
        for p in self.parents.get(cls, ()):
            if root in self.superclasses(p):
                best = max(best, self.depth(p, root))
        return best + 1 if best >= 0 else -1


class KnowledgeBase:
    """Set of triples indexed three ways (S->P->O, P->O->S, O->S->P)."""

    def __init__(self, taxonomy: Optional[Taxonomy] = None) -> None:
        self.taxonomy = taxonomy if taxonomy is not None else Taxonomy()
        self.predicates: set[str] = set(CORE_PREDICATES)
        self.relations: set[str] = set()
        self.sounds: set[str] = set()
        self.strategies: list[StrategyDecl] = []
        self._spo: dict = defaultdict(lambda: defaultdict(set))
        self._pos: dict = defaultdict(lambda: defaultdict(set))
        self._osp: dict = defaultdict(lambda: defaultdict(set))
        self._size = 0
        # entity -> asserted classes, kept separately for is_instance speed
        self._types: dict[str, set[str]] = defaultdict(set)
        self.validate = True

    # ------------------------------------------------------------------ schema
    def copy_schema(self) -> "KnowledgeBase":
        """Fresh knowledge base sharing this one's vocabulary (not its triples)."""
        kb = KnowledgeBase(self.taxonomy)
        kb.predicates = set(self.predicates)
        kb.relations = set(self.relations)
        kb.sounds = set(self.sounds)
        kb.strategies = list(self.strategies)
        for s in self.strategies:
            _assert_strategy(kb, s)
        return kb

    def declare_predicate(self, name: str) -> None:
        self.predicates.add(name)

    def declare_relation(self, name: str) -> None:
        self.relations.add(name)
        self.predicates.add(name)

    # ------------------------------------------------------------------ mutation
    def __len__(self) -> int:
        return self._size

    def __contains__(self, triple: tuple) -> bool:
        s, p, o = triple
        return o in self._spo.get(s, {}).get(p, ())

    def assert_triple(self, s: str, p: str, o: Term) -> bool:
        """Add a triple; returns False if it was already present."""
        if self.validate:
            if p not in self.predicates:
                raise UnknownPredicateError(p)
            if p == TYPE and (isinstance(o, Literal) or o not in self.taxonomy.classes):
                raise UnknownClassError(str(o))
        objs = self._spo[s][p]
        if o in objs:
            return False
        objs.add(o)
        self._pos[p][o].add(s)
        self._osp[o][s].add(p)
        self._size += 1
        if p == TYPE:
            self._types[s].add(o)  # type: ignore[arg-type]
        return True

    def add(self, triple: Iterable) -> bool:
        s, p, o = triple
        return self.assert_triple(s, p, o)

    def assert_all(self, triples: Iterable) -> None:
        for t in triples:
            self.add(t)

    # ------------------------------------------------------------------ access
    def triples(self) -> Iterator[Triple]:
        for s, pm in self._spo.items():
            for p, objs in pm.items():
                for o in objs:
                    yield Triple(s, p, o)

    def objects(self, s: str, p: str) -> set:
        return self._spo.get(s, {}).get(p, set())

    def subjects(self, p: str, o: Term) -> set:
        return self._pos.get(p, {}).get(o, set())

    def predicate_count(self, p: str) -> int:
        return sum(len(v) for v in self._pos.get(p, {}).values())

    def entities(self) -> set[Term]:
        out: set[Term] = set(self._spo)
        out.update(self._osp)
        return out

    def classes_of(self, e: str) -> set[str]:
        return self._types.get(e, set())

    def is_instance(self, e: Term, cls: str, strict: bool = False) -> bool:
        if strict:
            if cls not in self.taxonomy.classes:
                raise UnknownClassError(cls)
            if e not in self._spo and e not in self._osp:
                raise UnknownEntityError(str(e))
        if isinstance(e, Literal):
            return False
        sup = self.taxonomy.superclasses
        return any(cls in sup(c) for c in self._types.get(e, ()))

    def instances(self, cls: str) -> set[str]:
        out: set[str] = set()
        pos_type = self._pos.get(TYPE, {})
        for c in self.taxonomy.subclasses(cls):
            out.update(pos_type.get(c, ()))
        return out

    def query(self, pattern: tuple) -> list[dict[str, Term]]:
        """Match a (s, p, o) pattern whose terms may be :class:`Var`.

        Returns one binding dict per distinct match, sorted for determinism.
        A ``Var`` with ``cls`` set only binds entities that are instances of
        that class under subsumption.
        """
        s, p, o = pattern
        results: set[tuple] = set()
        if p == TYPE and isinstance(o, str) and o in self.taxonomy.classes:
            # entailed typing: a class pattern matches instances of its subclasses
            subjects = self.instances(o) if isinstance(s, Var) else ({s} if self.is_instance(s, o) else set())
            matches: Iterable[tuple] = ((x, TYPE, o) for x in subjects)
        else:
            matches = self._match(s, p, o)
        for ts, tp, to in matches:
            binding: dict[str, Term] = {}
            ok = True
            for term, val in ((s, ts), (p, tp), (o, to)):
                if isinstance(term, Var):
                    if term.name in binding and binding[term.name] != val:
                        ok = False
                        break
                    if term.cls is not None and not self.is_instance(val, term.cls):
                        ok = False
                        break
                    binding[term.name] = val
            if ok:
                results.add(tuple(sorted(binding.items(), key=lambda kv: kv[0])))
        return [dict(r) for r in sorted(results, key=_binding_sort_key)]

    def _match(self, s, p, o) -> Iterator[tuple]:
        sv, pv, ov = isinstance(s, Var), isinstance(p, Var), isinstance(o, Var)
        if not sv:
            pm = self._spo.get(s)
            if not pm:
                return
            preds = pm.keys() if pv else ([p] if p in pm else [])
            for pp in list(preds):
                objs = pm[pp]
                if ov:
                    for oo in list(objs):
                        yield s, pp, oo
                elif o in objs:
                    yield s, pp, o
        elif not ov:
            sm = self._osp.get(o)
            if not sm:
                return
            for ss, preds in list(sm.items()):
                if pv:
                    for pp in list(preds):
                        yield ss, pp, o
                elif p in preds:
                    yield ss, p, o
        elif not pv:
            for oo, subs in list(self._pos.get(p, {}).items()):
                for ss in list(subs):
                    yield ss, p, oo
        else:
            yield from self.triples()

    # ------------------------------------------------------------------ io
    def dump(self, path: Union[str, Path]) -> None:
        Path(path).write_text(dump_triples(self.triples()), encoding="utf-8")


def _binding_sort_key(items: tuple) -> tuple:
    return tuple((k, str(v)) for k, v in items)


def dump_triples(triples: Iterable[tuple]) -> str:
    lines = sorted(f"{s} {p} {o}" for s, p, o in triples)
    return "".join(line + "\n" for line in lines)


_LIT_RE = re.compile(r'"((?:[^"\\]|\\.)*)"$')


def parse_snapshot(text: str) -> list[Triple]:
    out = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split(None, 2)
        if len(parts) != 3:
            raise SchemaError(f"expected 'subject predicate object', got {line!r}", lineno)
        s, p, o = parts
        m = _LIT_RE.match(o)
        obj: Term = Literal(re.sub(r"\\(.)", r"\1", m.group(1))) if m else o
        out.append(Triple(s, p, obj))
    return out


def load_snapshot(path: Union[str, Path], schema: KnowledgeBase) -> KnowledgeBase:
    kb = schema.copy_schema()
    kb.assert_all(parse_snapshot(Path(path).read_text(encoding="utf-8")))
    return kb


# ---------------------------------------------------------------------- schema

_IDENT = r"[A-Za-z_][A-Za-z0-9_]*(?:-[A-Za-z0-9_]+)*"
_STRATEGY_RE = re.compile(
    rf"^strategy\s+({_IDENT})\s+for\s+({_IDENT})\s*(?:when\s+(.*?))?\s*priority\s+(-?\d+)\s*:\s*\"(.*)\"\s*$"
)
_GUARD_ATOM_RE = re.compile(rf"^({_IDENT})\(\s*\?({_IDENT})\s*\)$")


def parse_schema(text: str, kb: Optional[KnowledgeBase] = None) -> KnowledgeBase:
    kb = kb if kb is not None else KnowledgeBase()
    tax = kb.taxonomy
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip() if not raw.lstrip().startswith("strategy") else raw.strip()
        if not line:
            continue
        keyword, _, rest = line.partition(" ")
        rest = rest.strip()
        if keyword in ("class", "sound"):
            chain = [c.strip() for c in rest.split("<")]
            if not all(re.fullmatch(_IDENT, c) and is_class_name(c) for c in chain):
                raise SchemaError(f"bad class chain {rest!r}", lineno)
            for child, parent in zip(chain, chain[1:]):
                tax.add_class(child, parent)
            if len(chain) == 1:
                tax.add_class(chain[0])
            if keyword == "sound":
                kb.sounds.update(chain)
        elif keyword == "axiom":
            lhs, sep, rhs = rest.partition("=>")
            lhs, rhs = lhs.strip(), rhs.strip()
            if not sep or not is_class_name(lhs) or not is_class_name(rhs):
                raise SchemaError(f"bad axiom {rest!r}", lineno)
            tax.add_axiom(lhs, rhs)
        elif keyword == "predicate":
            if not re.fullmatch(_IDENT, rest):
                raise SchemaError(f"bad predicate name {rest!r}", lineno)
            kb.declare_predicate(rest)
        elif keyword == "relation":
            if not re.fullmatch(_IDENT, rest):
                raise SchemaError(f"bad relation name {rest!r}", lineno)
            kb.declare_relation(rest)
        elif keyword == "strategy":
            m = _STRATEGY_RE.match(line)
            if not m:
                raise SchemaError(f"bad strategy stanza {line!r}", lineno)
            sid, fcls, guard_text, prio, text_ = m.groups()
            guard = []
            if guard_text:
                for atom in guard_text.split("&"):
                    gm = _GUARD_ATOM_RE.match(atom.strip())
                    if not gm:
                        raise SchemaError(f"bad guard atom {atom.strip()!r}", lineno)
                    guard.append((gm.group(1), gm.group(2)))
            kb.strategies.append(
                StrategyDecl(sid, fcls, tuple(guard), int(prio), text_.replace('\\"', '"'))
            )
        else:
            raise SchemaError(f"unknown keyword {keyword!r}", lineno)
    tax.check_acyclic()
    for s in kb.strategies:
        if s.failure_class not in tax.classes:
            raise UnknownClassError(s.failure_class)
        for cls, _ in s.guard:
            if cls not in tax.classes:
                raise UnknownClassError(cls)
        _assert_strategy(kb, s)
    return kb


def _assert_strategy(kb: KnowledgeBase, s: StrategyDecl) -> None:
    if "RecoveryStrategy" not in kb.taxonomy.classes:
        return
    kb.assert_triple(s.id, TYPE, "RecoveryStrategy")
    kb.assert_triple(s.id, "forFailure", Literal(s.failure_class))
    kb.assert_triple(s.id, "hasPriority", Literal(str(s.priority)))
    kb.assert_triple(s.id, "hasInstruction", Literal(s.text))
    for cls, var in s.guard:
        kb.assert_triple(s.id, "hasGuardAtom", Literal(f"{cls}(?{var})"))


def load_schema(path: Union[str, Path, None] = None) -> KnowledgeBase:
    """Load a line-oriented schema file (defaults to the shipped ontology)."""
    if path is None:
        from recover_kit.data import data_path

        path = data_path("ontothor.schema")
    return parse_schema(Path(path).read_text(encoding="utf-8"))
