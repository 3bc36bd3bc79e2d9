"""Failure-detection rule language.

Grammar (``!`` binds tighter than ``&``, which binds tighter than ``|``)::

    file    := stanza*
    stanza  := 'rule' NAME ':' body '->' CLASS '(' VAR ')'
    body    := conj ('|' conj)*
    conj    := unary ('&' unary)*
    unary   := '!' unary | '(' body ')' | atom
    atom    := CLASS '(' term ')' | pred '(' term ',' term ')'
    term    := '?' NAME | NAME

The Unicode operators ``∧ ∨ ¬ →`` are accepted as aliases. Terms without a
``?`` sigil are constants unless the parser is called with
``implicit_vars=True``, which reads every bare lowercase argument as a
variable, matching the usual handwritten form.

A negated single atom must have all its variables bound by positive atoms.
A negated parenthesised conjunction is a NOT EXISTS sub-query: variables
that appear only inside it are local, and must be range-restricted there.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from itertools import product
from typing import Iterable, Optional, Sequence, Union

from recover_kit.kb import KnowledgeBase, is_class_name

IMPLEMENTED_FAILURES = (
    "EnclosedObjectFailure",
    "DroppingObjFailure",
    "DroppingAndDirtyObjFailure",
    "DroppingAndBreakingObjFailure",
    "DirtyObjFailure",
    "OccupiedPutFailure",
    "PlanningFailure",
    "ActionExecutionFailure",
    "DietaryConstraintsViolationFailure",
    "OccupiedByLiquidFailure",
    "MissingNavigationFailure",
    "SafetyFailure",
)


class RuleError(Exception):
    pass


class RuleSyntaxError(RuleError):
    def __init__(self, message: str, line: int, col: int):
        self.line = line
        self.col = col
        super().__init__(f"{line}:{col}: {message}")


class UnknownSymbolError(RuleError):
    pass


class UnsafeNegationError(RuleError):
    pass


class RangeRestrictionError(RuleError):
    pass


class NonFailureHeadError(RuleError):
    pass


class UncoveredFailureError(RuleError):
    def __init__(self, missing: Sequence[str]):
        self.missing = list(missing)
        super().__init__("no rule for: " + ", ".join(self.missing))


# ---------------------------------------------------------------------- AST


@dataclass(frozen=True)
class Var:
    name: str

    def __str__(self) -> str:
        return "?" + self.name


@dataclass(frozen=True)
class Const:
    name: str

    def __str__(self) -> str:
        return self.name


Term = Union[Var, Const]


@dataclass(frozen=True)
class Atom:
    name: str
    args: tuple

    @property
    def is_class_atom(self) -> bool:
        return len(self.args) == 1

    def vars(self) -> set[str]:
        return {a.name for a in self.args if isinstance(a, Var)}

    def __str__(self) -> str:
        return f"{self.name}({', '.join(map(str, self.args))})"


@dataclass(frozen=True)
class Not:
    operand: "Expr"


@dataclass(frozen=True)
class And:
    items: tuple


@dataclass(frozen=True)
class Or:
    items: tuple


Expr = Union[Atom, Not, And, Or]


@dataclass(frozen=True)
class Rule:
    name: str
    body: Expr
    head_class: str
    head_var: str


# ---------------------------------------------------------------------- lexer

_TOKEN_RE = re.compile(
    r"""
    (?P<ws>[ \t\r]+)
  | (?P<nl>\n)
  | (?P<comment>\#[^\n]*)
  | (?P<arrow>->|→)
  | (?P<and>&|∧)
  | (?P<or>\||∨)
  | (?P<not>!|¬)
  | (?P<lpar>\()
  | (?P<rpar>\))
  | (?P<comma>,)
  | (?P<colon>:)
  | (?P<var>\?[A-Za-z_][A-Za-z0-9_]*(?:-[A-Za-z0-9_]+)*)
  | (?P<ident>[A-Za-z_][A-Za-z0-9_]*(?:-[A-Za-z0-9_]+)*)
    """,
    re.VERBOSE,
)


@dataclass
class Token:
    kind: str
    text: str
    line: int
    col: int


def tokenize(text: str) -> list[Token]:
    tokens = []
    pos, line, line_start = 0, 1, 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if not m:
            raise RuleSyntaxError(f"unexpected character {text[pos]!r}", line, pos - line_start + 1)
        kind = m.lastgroup
        if kind == "nl":
            line += 1
            line_start = m.end()
        elif kind not in ("ws", "comment"):
            tokens.append(Token(kind, m.group(), line, pos - line_start + 1))
        pos = m.end()
    tokens.append(Token("eof", "", line, pos - line_start + 1))
    return tokens


# ---------------------------------------------------------------------- parser


class _Parser:
    def __init__(self, text: str, implicit_vars: bool):
        self.toks = tokenize(text)
        self.i = 0
        self.implicit_vars = implicit_vars

    @property
    def tok(self) -> Token:
        return self.toks[self.i]

    def error(self, msg: str, tok: Optional[Token] = None) -> RuleSyntaxError:
        tok = tok or self.tok
        found = tok.text or "end of input"
        return RuleSyntaxError(f"{msg}, found {found!r}", tok.line, tok.col)

    def expect(self, kind: str, what: str) -> Token:
        if self.tok.kind != kind:
            raise self.error(f"expected {what}")
        t = self.tok
        self.i += 1
        return t

    def accept(self, kind: str) -> Optional[Token]:
        if self.tok.kind == kind:
            t = self.tok
            self.i += 1
            return t
        return None

    def stanzas(self) -> list[Rule]:
        rules = []
        while self.tok.kind != "eof":
            kw = self.expect("ident", "'rule'")
            if kw.text != "rule":
                raise self.error("expected 'rule'", kw)
            name = self.expect("ident", "rule name").text
            self.expect("colon", "':'")
            rules.append(self.rule_tail(name))
        return rules

    def rule_tail(self, name: str) -> Rule:
        body = self.disj()
        self.expect("arrow", "'->'")
        head = self.expect("ident", "head class")
        if not is_class_name(head.text):
            raise self.error("head must be a class name", head)
        self.expect("lpar", "'('")
        var = self.term()
        if not isinstance(var, Var):
            raise self.error("head argument must be a variable", self.toks[self.i - 1])
        self.expect("rpar", "')'")
        return Rule(name, body, head.text, var.name)

    def disj(self) -> Expr:
        items = [self.conj()]
        while self.accept("or"):
            items.append(self.conj())
        return items[0] if len(items) == 1 else Or(tuple(items))

    def conj(self) -> Expr:
        items = [self.unary()]
        while self.accept("and"):
            items.append(self.unary())
        return items[0] if len(items) == 1 else And(tuple(items))

    def unary(self) -> Expr:
        if self.accept("not"):
            return Not(self.unary())
        if self.accept("lpar"):
            e = self.disj()
            self.expect("rpar", "')'")
            return e
        return self.atom()

    def atom(self) -> Atom:
        name = self.expect("ident", "atom")
        self.expect("lpar", "'('")
        args = [self.term()]
        if self.accept("comma"):
            args.append(self.term())
        self.expect("rpar", "')'")
        if is_class_name(name.text) and len(args) != 1:
            raise self.error("class atom takes one argument", name)
        if not is_class_name(name.text) and len(args) != 2:
            raise self.error("relation atom takes two arguments", name)
        return Atom(name.text, tuple(args))

    def term(self) -> Term:
        t = self.tok
        if t.kind == "var":
            self.i += 1
            return Var(t.text[1:])
        if t.kind == "ident":
            self.i += 1
            if self.implicit_vars and not is_class_name(t.text):
                return Var(t.text)
            return Const(t.text)
        raise self.error("expected term")


def parse_unchecked(text: str, name: str = "rule", implicit_vars: bool = False) -> Rule:
    """Syntax only: no range-restriction or negation-safety checks."""
    p = _Parser(text, implicit_vars)
    rule = p.rule_tail(name)
    if p.tok.kind != "eof":
        raise p.error("expected end of rule")
    return rule


def parse_rule(text: str, name: str = "rule", implicit_vars: bool = False) -> Rule:
    """Parse a single ``body -> Head(?e)`` rule (no ``rule name:`` prefix)."""
    rule = parse_unchecked(text, name, implicit_vars)
    check_safety(rule)
    return rule


def parse_rules(text: str, implicit_vars: bool = False) -> list[Rule]:
    rules = _Parser(text, implicit_vars).stanzas()
    seen = set()
    for r in rules:
        if r.name in seen:
            raise RuleError(f"duplicate rule name {r.name!r}")
        seen.add(r.name)
        check_safety(r)
    return rules


def load_rules(path=None) -> list[Rule]:
    from pathlib import Path

    if path is None:
        from recover_kit.data import data_path

        path = data_path("failures.rules")
    return parse_rules(Path(path).read_text(encoding="utf-8"))


# ---------------------------------------------------------------------- printer

_PREC = {Or: 1, And: 2, Not: 3, Atom: 4}


def format_expr(e: Expr, parent_prec: int = 0) -> str:
    if isinstance(e, Atom):
        return str(e)
    if isinstance(e, Not):
        inner = e.operand
        # a negated atom is always printed with parentheses, as in ``!(Nothing(?x))``
        return "!(" + format_expr(inner) + ")"
    prec = _PREC[type(e)]
    sep = " | " if isinstance(e, Or) else " & "
    # children of the same operator are wrapped so nesting survives a round trip
    text = sep.join(format_expr(c, prec + 1 if type(c) is type(e) else prec) for c in e.items)
    return "(" + text + ")" if prec < parent_prec else text


def format_rule(rule: Rule, stanza: bool = True) -> str:
    body = f"{format_expr(rule.body)} -> {rule.head_class}(?{rule.head_var})"
    return f"rule {rule.name}: {body}" if stanza else body


# ---------------------------------------------------------------------- normal form


@dataclass(frozen=True)
class Conj:
    """Conjunctive clause: positive atoms plus NOT EXISTS sub-queries.

    Each entry of ``negs`` is a disjunction (tuple of ``Conj``) that must have
    no solution under the outer bindings.
    """

    pos: tuple
    negs: tuple = ()

    def pos_vars(self) -> set[str]:
        out: set[str] = set()
        for a in self.pos:
            out |= a.vars()
        return out


def to_dnf(e: Expr) -> list[Conj]:
    if isinstance(e, Atom):
        return [Conj((e,))]
    if isinstance(e, Not):
        return [Conj((), (tuple(to_dnf(e.operand)),))]
    if isinstance(e, Or):
        out: list[Conj] = []
        for item in e.items:
            out.extend(to_dnf(item))
        return out
    parts = [to_dnf(item) for item in e.items]
    out = []
    for combo in product(*parts):
        pos: list = []
        negs: list = []
        for c in combo:
            pos.extend(a for a in c.pos if a not in pos)
            negs.extend(n for n in c.negs if n not in negs)
        out.append(Conj(tuple(pos), tuple(negs)))
    return out


def compile_rule(rule: Rule) -> list[Conj]:
    return to_dnf(rule.body)


# ---------------------------------------------------------------------- checks


def _neg_vars(neg: tuple) -> set[str]:
    out: set[str] = set()
    for c in neg:
        out |= c.pos_vars()
        for n in c.negs:
            out |= _neg_vars(n)
    return out


def _check_conj(c: Conj, bound: set[str], rule: Rule) -> None:
    here = bound | c.pos_vars()
    for neg in c.negs:
        single = len(neg) == 1 and len(neg[0].pos) == 1 and not neg[0].negs
        if single:
            free = neg[0].pos[0].vars() - here
            if free:
                raise UnsafeNegationError(
                    f"rule {rule.name}: negated atom {neg[0].pos[0]} has unbound "
                    f"variable(s) {', '.join('?' + v for v in sorted(free))}"
                )
            continue
        for sub in neg:
            _check_conj(sub, here, rule)
    # a local variable may not be shared between two separate negations
    seen: dict[str, int] = {}
    for idx, neg in enumerate(c.negs):
        for v in _neg_vars(neg) - here:
            if v in seen and seen[v] != idx:
                raise UnsafeNegationError(
                    f"rule {rule.name}: variable ?{v} occurs only under negation in two places"
                )
            seen[v] = idx


def check_safety(rule: Rule) -> None:
    for c in compile_rule(rule):
        if rule.head_var not in c.pos_vars():
            raise RangeRestrictionError(
                f"rule {rule.name}: head variable ?{rule.head_var} does not occur positively"
            )
        _check_conj(c, set(), rule)


def _atoms(e: Expr) -> Iterable[Atom]:
    if isinstance(e, Atom):
        yield e
    elif isinstance(e, Not):
        yield from _atoms(e.operand)
    else:
        for item in e.items:
            yield from _atoms(item)


def check_symbols(rule: Rule, kb: KnowledgeBase) -> None:
    tax = kb.taxonomy
    if rule.head_class not in tax.classes:
        raise UnknownSymbolError(f"rule {rule.name}: unknown class {rule.head_class}")
    if not tax.is_subclass(rule.head_class, "Failure"):
        raise NonFailureHeadError(f"rule {rule.name}: head {rule.head_class} is not a Failure")
    for a in _atoms(rule.body):
        if a.is_class_atom:
            if a.name not in tax.classes:
                raise UnknownSymbolError(f"rule {rule.name}: unknown class {a.name}")
        elif a.name not in kb.predicates:
            raise UnknownSymbolError(f"rule {rule.name}: unknown predicate {a.name}")


@dataclass
class CorpusReport:
    covered: dict = field(default_factory=dict)  # failure class -> list of rule names

    @property
    def uncovered(self) -> list[str]:
        return [c for c in IMPLEMENTED_FAILURES if not self.covered.get(c)]

    @property
    def ok(self) -> bool:
        return not self.uncovered

    def lines(self) -> list[str]:
        out = []
        for c in IMPLEMENTED_FAILURES:
            names = self.covered.get(c, [])
            out.append(f"{c}: {len(names)} rule(s)" + (f" [{', '.join(names)}]" if names else " UNCOVERED"))
        return out


def validate_corpus(rules: Sequence[Rule], kb: KnowledgeBase, strict: bool = True) -> CorpusReport:
    """Check symbols and safety of every rule and coverage of the implemented failures.

    Raises :class:`UncoveredFailureError` when ``strict`` and some implemented
    failure class has no rule; otherwise the report lists the gaps.
    """
    report = CorpusReport({c: [] for c in IMPLEMENTED_FAILURES})
    for r in rules:
        check_symbols(r, kb)
        check_safety(r)
        if r.head_class in report.covered:
            report.covered[r.head_class].append(r.name)
    if strict and report.uncovered:
        raise UncoveredFailureError(report.uncovered)
    return report
