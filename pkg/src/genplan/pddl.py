"""STRIPS PDDL front-end: parsing, grounding, successor-state generation.

Supports the :strips and :typing requirements with predicate arity up to
two. Ground atoms are interned to dense integer ids; a state is a frozenset
of those ids, so applying actions and testing applicability reduce to set
algebra over small integers.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import product

import numpy as np

UNIVERSAL_TYPE = "object"

SUPPORTED_REQUIREMENTS = frozenset({":strips", ":typing"})


class PddlError(Exception):
    """Base class for everything this module raises."""


class ParseError(PddlError):
    """Malformed PDDL text; message carries line/column."""

    def __init__(self, message: str, line: int = 0, col: int = 0):
        super().__init__(f"line {line}, col {col}: {message}" if line else message)
        self.line = line
        self.col = col


class UnsupportedFeature(PddlError):
    """Well-formed PDDL outside the supported STRIPS subset."""


class UnknownSymbol(PddlError):
    """Reference to an undeclared predicate, object, or type."""


class DomainMismatch(PddlError):
    """Problem file names a different domain."""


class InapplicableAction(PddlError):
    """apply() called with an unsatisfied precondition."""


# ---------------------------------------------------------------------------
# Structured definitions


@dataclass(frozen=True)
class PredicateSchema:
    name: str
    arity: int
    param_types: tuple[str, ...]


@dataclass(frozen=True)
class SchemaAtom:
    predicate: str
    args: tuple[str, ...]  # variable names (?x)


@dataclass(frozen=True)
class ActionSchema:
    name: str
    params: tuple[tuple[str, str], ...]  # (variable, type)
    pre: tuple[SchemaAtom, ...]
    add: tuple[SchemaAtom, ...]
    delete: tuple[SchemaAtom, ...]


@dataclass(frozen=True)
class DomainDef:
    name: str
    requirements: tuple[str, ...]
    types: tuple[tuple[str, str], ...]  # (type, parent)
    predicates: tuple[PredicateSchema, ...]
    actions: tuple[ActionSchema, ...]

    def predicate_index(self) -> dict[str, int]:
        return {p.name: i for i, p in enumerate(self.predicates)}

    def type_ancestors(self, typ: str) -> set[str]:
        """Transitive parents of a type, including itself and the universal type."""
        parents = dict(self.types)
        seen = {typ, UNIVERSAL_TYPE}
        cur = typ
        while cur in parents and parents[cur] not in seen:
            cur = parents[cur]
            seen.add(cur)
        return seen


@dataclass(frozen=True)
class GroundAtom:
    predicate: int  # index into DomainDef.predicates
    args: tuple[int, ...]  # object indices


@dataclass(frozen=True)
class ProblemDef:
    name: str
    domain_name: str
    objects: tuple[tuple[str, str], ...]  # (name, type)
    init: frozenset[GroundAtom]
    goal: frozenset[GroundAtom]


@dataclass(frozen=True)
class GroundAction:
    index: int
    schema: int
    binding: tuple[int, ...]
    pre: frozenset[int]
    add: frozenset[int]
    delete: frozenset[int]
    name: str  # printable "(schema obj ...)"


State = frozenset  # of atom ids


# ---------------------------------------------------------------------------
# Tokenizer


@dataclass(frozen=True)
class _Token:
    kind: str  # '(' ')' 'id'
    value: str
    line: int
    col: int


def _tokenize(text: str) -> list[_Token]:
    tokens: list[_Token] = []
    line, col = 1, 1
    i, n = 0, len(text)
    while i < n:
        ch = text[i]
        if ch == "\n":
            line += 1
            col = 1
            i += 1
        elif ch in " \t\r":
            i += 1
            col += 1
        elif ch == ";":
            while i < n and text[i] != "\n":
                i += 1
        elif ch in "()":
            tokens.append(_Token(ch, ch, line, col))
            i += 1
            col += 1
        else:
            j = i
            while j < n and text[j] not in " \t\r\n();":
                j += 1
            tokens.append(_Token("id", text[i:j].lower(), line, col))
            col += j - i
            i = j
    return tokens


class _Reader:
    def __init__(self, text: str):
        self.tokens = _tokenize(text)
        self.pos = 0

    def peek(self) -> _Token | None:
        return self.tokens[self.pos] if self.pos < len(self.tokens) else None

    def next(self) -> _Token:
        tok = self.peek()
        if tok is None:
            last = self.tokens[-1] if self.tokens else _Token("id", "", 1, 1)
            raise ParseError("unexpected end of input", last.line, last.col)
        self.pos += 1
        return tok

    def expect(self, kind: str, value: str | None = None) -> _Token:
        tok = self.next()
        if tok.kind != kind or (value is not None and tok.value != value):
            want = value if value is not None else kind
            raise ParseError(f"expected {want!r}, got {tok.value!r}", tok.line, tok.col)
        return tok

    def at_close(self) -> bool:
        tok = self.peek()
        return tok is not None and tok.kind == ")"

    def read_name(self, what: str = "name") -> str:
        tok = self.next()
        if tok.kind != "id":
            raise ParseError(f"expected {what}, got {tok.value!r}", tok.line, tok.col)
        return tok.value


def _read_typed_list(r: _Reader, require_vars: bool) -> list[tuple[str, str]]:
    """Read ``a b - t c d - t2 e`` up to the closing paren; untyped entries
    get the universal type."""
    out: list[tuple[str, str]] = []
    pending: list[str] = []
    while not r.at_close():
        tok = r.next()
        if tok.kind != "id":
            raise ParseError("expected name in typed list", tok.line, tok.col)
        if tok.value == "-":
            typ = r.read_name("type")
            out.extend((name, typ) for name in pending)
            pending = []
        else:
            if require_vars and not tok.value.startswith("?"):
                raise ParseError(f"expected variable, got {tok.value!r}", tok.line, tok.col)
            pending.append(tok.value)
    out.extend((name, UNIVERSAL_TYPE) for name in pending)
    return out


def _read_atom(r: _Reader) -> tuple[str, tuple[str, ...], _Token]:
    head = r.expect("(")
    pred = r.read_name("predicate")
    args = []
    while not r.at_close():
        args.append(r.read_name("argument"))
    r.expect(")")
    return pred, tuple(args), head


_CONDITIONAL_HEADS = frozenset({"when", "forall", "exists", "imply", "or", "oneof"})
_NUMERIC_HEADS = frozenset({"increase", "decrease", "assign", "scale-up", "scale-down", ">=", "<=", ">", "<"})


def _read_formula(r: _Reader, *, allow_not: bool, context: str) -> list[tuple[bool, str, tuple[str, ...]]]:
    """Read a conjunction (possibly a single atom) as (positive, pred, args)
    literals. Raises UnsupportedFeature on anything richer than STRIPS."""
    tok = r.expect("(")
    nxt = r.peek()
    if nxt is None:
        raise ParseError("unexpected end of formula", tok.line, tok.col)
    literals: list[tuple[bool, str, tuple[str, ...]]] = []
    if nxt.kind == "id" and nxt.value == "and":
        r.next()
        while not r.at_close():
            literals.extend(_read_formula(r, allow_not=allow_not, context=context))
        r.expect(")")
        return literals
    if nxt.kind == "id" and nxt.value == "not":
        if not allow_not:
            raise UnsupportedFeature(f"negative literal in {context} (line {nxt.line})")
        r.next()
        pred, args, head = _read_atom(r)
        r.expect(")")
        return [(False, pred, args)]
    if nxt.kind == "id" and nxt.value in _CONDITIONAL_HEADS:
        raise UnsupportedFeature(f"{nxt.value!r} in {context} (line {nxt.line})")
    if nxt.kind == "id" and (nxt.value in _NUMERIC_HEADS or nxt.value == "="):
        feature = "equality" if nxt.value == "=" else "numeric fluent"
        raise UnsupportedFeature(f"{feature} in {context} (line {nxt.line})")
    # plain atom: rewind the '(' by reparsing
    r.pos -= 1
    pred, args, _ = _read_atom(r)
    return [(True, pred, args)]


# ---------------------------------------------------------------------------
# Domain / problem parsing


def parse_domain(text: str) -> DomainDef:
    """Parse a PDDL domain restricted to STRIPS + typing, arity <= 2."""
    r = _Reader(text)
    r.expect("(")
    r.expect("id", "define")
    r.expect("(")
    r.expect("id", "domain")
    name = r.read_name("domain name")
    r.expect(")")

    requirements: tuple[str, ...] = ()
    types: list[tuple[str, str]] = []
    predicates: list[PredicateSchema] = []
    actions: list[ActionSchema] = []

    while not r.at_close():
        open_tok = r.expect("(")
        section = r.read_name("section")
        if section == ":requirements":
            reqs = []
            while not r.at_close():
                reqs.append(r.read_name("requirement"))
            r.expect(")")
            for req in reqs:
                if req not in SUPPORTED_REQUIREMENTS:
                    raise UnsupportedFeature(f"requirement {req}")
            requirements = tuple(reqs)
        elif section == ":types":
            for typ, parent in _read_typed_list(r, require_vars=False):
                types.append((typ, parent))
            r.expect(")")
        elif section == ":predicates":
            while not r.at_close():
                r.expect("(")
                pname = r.read_name("predicate name")
                params = _read_typed_list(r, require_vars=True)
                r.expect(")")
                if len(params) > 2:
                    raise UnsupportedFeature(
                        f"predicate {pname!r} has arity {len(params)} (maximum is 2)"
                    )
                if any(p.name == pname for p in predicates):
                    raise ParseError(f"duplicate predicate {pname!r}", open_tok.line, open_tok.col)
                predicates.append(
                    PredicateSchema(pname, len(params), tuple(t for _, t in params))
                )
            r.expect(")")
        elif section == ":action":
            actions.append(_parse_action(r))
            r.expect(")")
        else:
            raise UnsupportedFeature(f"domain section {section!r}")
    r.expect(")")

    domain = DomainDef(name, requirements, tuple(types), tuple(predicates), tuple(actions))
    _validate_domain(domain)
    return domain


def _parse_action(r: _Reader) -> ActionSchema:
    name = r.read_name("action name")
    params: tuple[tuple[str, str], ...] = ()
    pre: list[tuple[bool, str, tuple[str, ...]]] = []
    eff: list[tuple[bool, str, tuple[str, ...]]] = []
    while not r.at_close():
        key = r.read_name("action keyword")
        if key == ":parameters":
            r.expect("(")
            params = tuple(_read_typed_list(r, require_vars=True))
            r.expect(")")
        elif key == ":precondition":
            pre = _read_formula(r, allow_not=False, context="precondition")
        elif key == ":effect":
            eff = _read_formula(r, allow_not=True, context="effect")
        else:
            raise UnsupportedFeature(f"action keyword {key!r}")
    add = tuple(SchemaAtom(p, a) for pos, p, a in eff if pos)
    delete = tuple(SchemaAtom(p, a) for pos, p, a in eff if not pos)
    pre_atoms = tuple(SchemaAtom(p, a) for _, p, a in pre)
    return ActionSchema(name, params, pre_atoms, add, delete)


def _validate_domain(domain: DomainDef) -> None:
    declared_types = {UNIVERSAL_TYPE}
    for typ, parent in domain.types:
        declared_types.add(typ)
        declared_types.add(parent)
    for pred in domain.predicates:
        for typ in pred.param_types:
            if typ not in declared_types:
                raise UnknownSymbol(f"type {typ!r} in predicate {pred.name!r}")
    pred_names = {p.name for p in domain.predicates}
    by_name = {p.name: p for p in domain.predicates}
    for schema in domain.actions:
        if schema.name in pred_names:
            raise ParseError(f"action {schema.name!r} clashes with a predicate name")
        var_types = dict(schema.params)
        for typ in var_types.values():
            if typ not in declared_types:
                raise UnknownSymbol(f"type {typ!r} in action {schema.name!r}")
        for group in (schema.pre, schema.add, schema.delete):
            for atom in group:
                pred = by_name.get(atom.predicate)
                if pred is None:
                    raise UnknownSymbol(
                        f"predicate {atom.predicate!r} in action {schema.name!r}"
                    )
                if len(atom.args) != pred.arity:
                    raise ParseError(
                        f"{atom.predicate!r} used with {len(atom.args)} args in "
                        f"action {schema.name!r}, declared arity {pred.arity}"
                    )
                for arg in atom.args:
                    if not arg.startswith("?"):
                        raise UnsupportedFeature(
                            f"constant {arg!r} in body of action {schema.name!r}"
                        )
                    if arg not in var_types:
                        raise UnknownSymbol(
                            f"variable {arg!r} not a parameter of action {schema.name!r}"
                        )
        overlap = {(a.predicate, a.args) for a in schema.add} & {
            (a.predicate, a.args) for a in schema.delete
        }
        if overlap:
            raise ParseError(f"action {schema.name!r} adds and deletes the same atom")


def parse_problem(text: str, domain: DomainDef) -> ProblemDef:
    """Parse a PDDL problem against an already-parsed domain."""
    r = _Reader(text)
    r.expect("(")
    r.expect("id", "define")
    r.expect("(")
    r.expect("id", "problem")
    name = r.read_name("problem name")
    r.expect(")")

    domain_name: str | None = None
    objects: list[tuple[str, str]] = []
    init_lits: list[tuple[str, tuple[str, ...]]] = []
    goal_lits: list[tuple[bool, str, tuple[str, ...]]] = []

    while not r.at_close():
        r.expect("(")
        section = r.read_name("section")
        if section == ":domain":
            domain_name = r.read_name("domain name")
            r.expect(")")
        elif section == ":requirements":
            while not r.at_close():
                req = r.read_name("requirement")
                if req not in SUPPORTED_REQUIREMENTS:
                    raise UnsupportedFeature(f"requirement {req}")
            r.expect(")")
        elif section == ":objects":
            objects = _read_typed_list(r, require_vars=False)
            r.expect(")")
        elif section == ":init":
            while not r.at_close():
                pred, args, tok = _read_atom(r)
                if pred in ("not", "=") or pred in _NUMERIC_HEADS:
                    raise UnsupportedFeature(f"{pred!r} in :init (line {tok.line})")
                init_lits.append((pred, args))
            r.expect(")")
        elif section == ":goal":
            goal_lits = _read_formula(r, allow_not=False, context="goal")
            r.expect(")")
        else:
            raise UnsupportedFeature(f"problem section {section!r}")
    r.expect(")")

    if domain_name is None:
        raise ParseError("problem lacks a (:domain ...) declaration")
    if domain_name != domain.name:
        raise DomainMismatch(f"problem is for domain {domain_name!r}, got {domain.name!r}")

    declared_types = {UNIVERSAL_TYPE} | {t for t, _ in domain.types} | {p for _, p in domain.types}
    seen = set()
    for obj, typ in objects:
        if obj in seen:
            raise ParseError(f"duplicate object {obj!r}")
        seen.add(obj)
        if typ not in declared_types:
            raise UnknownSymbol(f"type {typ!r} of object {obj!r}")

    obj_index = {obj: i for i, (obj, _) in enumerate(objects)}
    pred_index = domain.predicate_index()

    def resolve(pred: str, args: tuple[str, ...], where: str) -> GroundAtom:
        if pred not in pred_index:
            raise UnknownSymbol(f"predicate {pred!r} in {where}")
        schema = domain.predicates[pred_index[pred]]
        if len(args) != schema.arity:
            raise UnknownSymbol(
                f"{pred!r} takes {schema.arity} args, got {len(args)} in {where}"
            )
        ids = []
        for arg in args:
            if arg not in obj_index:
                raise UnknownSymbol(f"object {arg!r} in {where}")
            ids.append(obj_index[arg])
        return GroundAtom(pred_index[pred], tuple(ids))

    init = frozenset(resolve(p, a, ":init") for p, a in init_lits)
    goal = frozenset(resolve(p, a, ":goal") for _, p, a in goal_lits)
    return ProblemDef(name, domain_name, tuple(objects), init, goal)


# ---------------------------------------------------------------------------
# Unparsing (round-trip support and instance export)


def unparse_domain(domain: DomainDef) -> str:
    lines = [f"(define (domain {domain.name})"]
    if domain.requirements:
        lines.append(f"  (:requirements {' '.join(domain.requirements)})")
    typed = ":typing" in domain.requirements
    if domain.types:
        parts = " ".join(
            f"{t} - {p}" if p != UNIVERSAL_TYPE else t for t, p in domain.types
        )
        lines.append(f"  (:types {parts})")

    def fmt_params(params) -> str:
        if typed:
            return " ".join(f"{v} - {t}" for v, t in params)
        return " ".join(v for v, _ in params)

    preds = []
    for p in domain.predicates:
        vars_ = tuple((f"?x{i}", t) for i, t in enumerate(p.param_types))
        inner = (" " + fmt_params(vars_)) if vars_ else ""
        preds.append(f"({p.name}{inner})")
    lines.append(f"  (:predicates {' '.join(preds)})")

    def fmt_atom(atom: SchemaAtom) -> str:
        return "(" + " ".join((atom.predicate,) + atom.args) + ")"

    for schema in domain.actions:
        lines.append(f"  (:action {schema.name}")
        lines.append(f"    :parameters ({fmt_params(schema.params)})")
        pre = " ".join(fmt_atom(a) for a in schema.pre)
        lines.append(f"    :precondition (and {pre})")
        effs = [fmt_atom(a) for a in schema.add]
        effs += [f"(not {fmt_atom(a)})" for a in schema.delete]
        lines.append(f"    :effect (and {' '.join(effs)}))")
    lines.append(")")
    return "\n".join(lines) + "\n"


def unparse_problem(problem: ProblemDef, domain: DomainDef) -> str:
    typed = ":typing" in domain.requirements
    obj_names = [name for name, _ in problem.objects]

    def fmt_ground(atom: GroundAtom) -> str:
        pred = domain.predicates[atom.predicate]
        parts = [pred.name] + [obj_names[i] for i in atom.args]
        return "(" + " ".join(parts) + ")"

    lines = [f"(define (problem {problem.name})", f"  (:domain {problem.domain_name})"]
    if typed:
        objs = " ".join(f"{name} - {typ}" for name, typ in problem.objects)
    else:
        objs = " ".join(obj_names)
    lines.append(f"  (:objects {objs})")
    init_atoms = sorted(problem.init, key=lambda a: (a.predicate, a.args))
    lines.append(f"  (:init {' '.join(fmt_ground(a) for a in init_atoms)})")
    goal_atoms = sorted(problem.goal, key=lambda a: (a.predicate, a.args))
    lines.append(f"  (:goal (and {' '.join(fmt_ground(a) for a in goal_atoms)})))")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Grounding


class Task:
    """A grounded instance: interned atoms, ground actions, init and goal.

    Immutable after construction; safe to share across threads.
    """

    def __init__(self, domain: DomainDef, problem: ProblemDef):
        self.domain = domain
        self.problem = problem
        self.objects = tuple(name for name, _ in problem.objects)
        self.object_types = tuple(typ for _, typ in problem.objects)

        self._atom_ids: dict[GroundAtom, int] = {}
        self._atoms: list[GroundAtom] = []

        members = self._type_members()
        self.ground_actions: tuple[GroundAction, ...] = tuple(
            self._ground_schemas(members)
        )
        self.init: State = frozenset(self._intern(a) for a in problem.init)
        self.goal: frozenset[int] = frozenset(self._intern(a) for a in problem.goal)
        self.atoms: tuple[GroundAtom, ...] = tuple(self._atoms)
        self.num_atoms = len(self.atoms)

        # flat precondition table for the vectorized applicability test
        pre_lists = [sorted(a.pre) for a in self.ground_actions]
        counts = np.array([len(p) for p in pre_lists], dtype=np.int64)
        self._pre_flat = np.array(
            [atom for pre in pre_lists for atom in pre], dtype=np.int64
        )
        self._pre_bounds = np.concatenate([[0], np.cumsum(counts)])
        self._pre_counts = counts

    # -- construction helpers ------------------------------------------------

    def _type_members(self) -> dict[str, list[int]]:
        members: dict[str, list[int]] = {}
        for idx, typ in enumerate(self.object_types):
            for anc in sorted(self.domain.type_ancestors(typ)):
                members.setdefault(anc, []).append(idx)
        members.setdefault(UNIVERSAL_TYPE, list(range(len(self.objects))))
        return members

    def _intern(self, atom: GroundAtom) -> int:
        aid = self._atom_ids.get(atom)
        if aid is None:
            aid = len(self._atoms)
            self._atom_ids[atom] = aid
            self._atoms.append(atom)
        return aid

    def _ground_schemas(self, members: dict[str, list[int]]):
        pred_index = self.domain.predicate_index()
        actions: list[GroundAction] = []
        for schema_id, schema in enumerate(self.domain.actions):
            var_pos = {var: i for i, (var, _) in enumerate(schema.params)}

            def make_atoms(atoms: tuple[SchemaAtom, ...]):
                return [
                    (pred_index[a.predicate], tuple(var_pos[v] for v in a.args))
                    for a in atoms
                ]

            pre_t = make_atoms(schema.pre)
            add_t = make_atoms(schema.add)
            del_t = make_atoms(schema.delete)
            candidate_lists = [
                members.get(typ, []) for _, typ in schema.params
            ]
            for binding in product(*candidate_lists):
                def bind(templ):
                    return frozenset(
                        self._intern(GroundAtom(p, tuple(binding[i] for i in pos)))
                        for p, pos in templ
                    )

                name = "(" + " ".join(
                    (schema.name,) + tuple(self.objects[i] for i in binding)
                ) + ")"
                actions.append(
                    GroundAction(
                        index=len(actions),
                        schema=schema_id,
                        binding=tuple(binding),
                        pre=bind(pre_t),
                        add=bind(add_t),
                        delete=bind(del_t),
                        name=name,
                    )
                )
        return actions

    # -- queries -------------------------------------------------------------

    def atom_id(self, atom: GroundAtom) -> int | None:
        return self._atom_ids.get(atom)

    def atom_name(self, atom_id: int) -> str:
        atom = self.atoms[atom_id]
        pred = self.domain.predicates[atom.predicate]
        parts = [pred.name] + [self.objects[i] for i in atom.args]
        return "(" + " ".join(parts) + ")"

    def applicable_indices(self, state: State) -> np.ndarray:
        """Indices of ground actions whose preconditions hold in ``state``."""
        true = np.zeros(self.num_atoms + 1, dtype=np.int64)
        if state:
            ids = np.fromiter(state, dtype=np.int64, count=len(state))
            true[ids[ids < self.num_atoms]] = 1
        hits = np.concatenate([[0], np.cumsum(true[self._pre_flat])])
        satisfied = hits[self._pre_bounds[1:]] - hits[self._pre_bounds[:-1]]
        return np.nonzero(satisfied == self._pre_counts)[0]


def ground_task(domain: DomainDef, problem: ProblemDef) -> Task:
    """Ground every type-consistent binding of every schema, in declaration
    then lexicographic-binding order."""
    if problem.domain_name != domain.name:
        raise DomainMismatch(
            f"problem is for domain {problem.domain_name!r}, got {domain.name!r}"
        )
    return Task(domain, problem)


# ---------------------------------------------------------------------------
# Successor generation


def applicable_actions(task: Task, state: State) -> list[GroundAction]:
    """Ground actions applicable in ``state``, in grounding order."""
    idx = task.applicable_indices(state)
    return [task.ground_actions[i] for i in idx]


def apply(state: State, action: GroundAction) -> State:
    """Successor state (state - del) | add; raises if inapplicable."""
    if not action.pre <= state:
        missing = sorted(action.pre - state)
        raise InapplicableAction(f"{action.name}: unmet preconditions {missing}")
    return (state - action.delete) | action.add


def is_goal(task: Task, state: State) -> bool:
    return task.goal <= state
