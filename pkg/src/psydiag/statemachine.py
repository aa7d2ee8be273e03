"""Declarative diagnostic sub-machines and the runtime that walks them.

A machine definition is a YAML document (see ``data/machine_schema.json``)
with question nodes, sub-state groups and terminal diagnoses. Ungrouped
nodes branch on a binary answer. Entering a group starts a localized random
walk over its members; once every group-terminal member (a member with no
in-group successor) has been asked, the present-count is compared against
the group threshold and the walk leaves through ``positive_next`` or
``negative_next``.

Terminals may set episode flags, and a machine may carry determinative
clauses (flag conjunctions) that override the provisional terminal. The
bipolar machine uses this for the bipolar I / II decision.
"""

from __future__ import annotations

import json
import logging
import random
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Optional

import jsonschema
import yaml

from .model import Answer, DisorderLabel

logger = logging.getLogger(__name__)

DEFAULT_LOOSE_CUE = "recently"


class Level(str, Enum):
    ILS = "ILS"
    BLS = "BLS"


class Category(str, Enum):
    AFFECTIVE_COGNITIVE = "affective_cognitive"
    PHYSIO_BEHAVIORAL = "physio_behavioral"
    IMPAIRMENT_RISK = "impairment_risk"
    COMORBID_CONTRIBUTING = "comorbid_contributing"


class GroupOutcome(str, Enum):
    POSITIVE = "positive"
    ABSENT = "absent"


@dataclass(frozen=True)
class QuestionNode:
    id: str
    level: Level
    category: Category
    topic: str
    question_template: str
    precise_cue: str
    loose_cue: str = DEFAULT_LOOSE_CUE
    group_id: Optional[str] = None
    present_next: Optional[str] = None
    absent_next: Optional[str] = None


@dataclass(frozen=True)
class SubStateGroup:
    group_id: str
    member_ids: tuple[str, ...]
    threshold: int
    positive_next: str
    negative_next: str
    #: Members with no in-group successor; only these are tallied and required.
    terminal_member_ids: tuple[str, ...] = ()


@dataclass(frozen=True)
class TerminalDiagnosis:
    code: str
    description: str
    contributes_label: Optional[DisorderLabel] = None
    sets_flags: frozenset[str] = frozenset()


@dataclass(frozen=True)
class Clause:
    clause_id: str
    requires: frozenset[str]
    terminal: str
    description: str = ""


@dataclass(frozen=True)
class StateMachineDef:
    disorder: DisorderLabel
    entry: str
    nodes: Mapping[str, QuestionNode]
    groups: Mapping[str, SubStateGroup]
    terminals: Mapping[str, TerminalDiagnosis]
    clauses: tuple[Clause, ...] = ()
    version: int = 1

    def kind(self, ref: str) -> Optional[str]:
        if ref in self.nodes:
            return "node"
        if ref in self.groups:
            return "group"
        if ref in self.terminals:
            return "terminal"
        return None


class MachineDefinitionError(ValueError):
    pass


class MachineParseError(MachineDefinitionError):
    def __init__(self, message: str, line: int = 1, column: int = 1, source: str = "<string>"):
        self.line = line
        self.column = column
        self.source = source
        super().__init__(f"{source}:{line}:{column}: {message}")


class MachineValidationError(MachineDefinitionError):
    def __init__(self, issues: list[str], source: str = "<string>"):
        self.issues = list(issues)
        self.source = source
        super().__init__(f"{source}: " + "; ".join(self.issues))


class MachineTerminated(RuntimeError):
    """Raised when a finished runtime is asked for a topic or an answer."""


# --------------------------------------------------------------------------
# Loading


@lru_cache(maxsize=1)
def _schema() -> dict:
    text = resources.files("psydiag").joinpath("data/machine_schema.json").read_text("utf-8")
    return json.loads(text)


def _build(doc: dict) -> StateMachineDef:
    default_cue = doc.get("cue", "")
    default_loose = doc.get("loose_cue", DEFAULT_LOOSE_CUE)
    groups_raw = doc.get("groups") or {}

    nodes = {}
    for nid, nd in doc["nodes"].items():
        gid = nd.get("group")
        g = groups_raw.get(gid, {}) if gid else {}
        nodes[nid] = QuestionNode(
            id=nid,
            level=Level(nd["level"]),
            category=Category(nd["category"]),
            topic=nd["topic"],
            question_template=nd["template"],
            precise_cue=nd.get("cue") or g.get("cue") or default_cue,
            loose_cue=g.get("loose_cue") or default_loose,
            group_id=gid,
            present_next=nd.get("present_next"),
            absent_next=nd.get("absent_next"),
        )

    groups = {}
    for gid, gd in groups_raw.items():
        members = tuple(gd["members"])
        member_set = set(members)
        terminal_members = tuple(
            m
            for m in members
            if m in nodes
            and not ({nodes[m].present_next, nodes[m].absent_next} & member_set)
        )
        groups[gid] = SubStateGroup(
            group_id=gid,
            member_ids=members,
            threshold=int(gd["threshold"]),
            positive_next=gd["positive_next"],
            negative_next=gd["negative_next"],
            terminal_member_ids=terminal_members,
        )

    terminals = {
        code: TerminalDiagnosis(
            code=code,
            description=td["description"],
            contributes_label=DisorderLabel(td["contributes"]) if td.get("contributes") else None,
            sets_flags=frozenset(td.get("sets_flags") or ()),
        )
        for code, td in doc["terminals"].items()
    }
    clauses = tuple(
        Clause(c["id"], frozenset(c["requires"]), c["terminal"], c.get("description", ""))
        for c in doc.get("clauses") or ()
    )
    return StateMachineDef(
        disorder=DisorderLabel(doc["disorder"]),
        entry=doc["entry"],
        nodes=nodes,
        groups=groups,
        terminals=terminals,
        clauses=clauses,
        version=int(doc.get("version", 1)),
    )


def parse_machine_def(text: str, source: str = "<string>") -> StateMachineDef:
    """Parse and validate a machine-definition document given as text."""
    try:
        doc = yaml.safe_load(text)
    except yaml.MarkedYAMLError as exc:
        mark = exc.problem_mark or exc.context_mark
        line, col = (mark.line + 1, mark.column + 1) if mark else (1, 1)
        raise MachineParseError(exc.problem or str(exc), line, col, source) from exc
    if doc is None:
        raise MachineParseError("empty document", 1, 1, source)
    if not isinstance(doc, dict):
        raise MachineParseError("top level must be a mapping", 1, 1, source)

    validator = jsonschema.Draft202012Validator(_schema())
    schema_issues = [
        f"{'.'.join(str(p) for p in err.absolute_path) or '<root>'}: {err.message}"
        for err in sorted(validator.iter_errors(doc), key=lambda e: list(map(str, e.absolute_path)))
    ]
    if schema_issues:
        raise MachineValidationError(schema_issues, source)

    definition = _build(doc)
    issues = validate_machine(definition)
    if issues:
        raise MachineValidationError(issues, source)
    return definition


def load_machine_def(path: str | Path) -> StateMachineDef:
    p = Path(path)
    return parse_machine_def(p.read_text(encoding="utf-8"), source=str(p))


SHIPPED_FILES = {
    DisorderLabel.MDD: "mdd.yaml",
    DisorderLabel.AD: "ad.yaml",
    DisorderLabel.BD: "bd.yaml",
    DisorderLabel.ADHD: "adhd.yaml",
}


def shipped_machine_path(label: DisorderLabel | str) -> Path:
    name = SHIPPED_FILES[DisorderLabel(label)]
    return Path(str(resources.files("psydiag").joinpath("data/machines", name)))


@lru_cache(maxsize=1)
def load_shipped_machines() -> dict[DisorderLabel, StateMachineDef]:
    return {label: load_machine_def(shipped_machine_path(label)) for label in SHIPPED_FILES}


# --------------------------------------------------------------------------
# Validation


def _successors(definition: StateMachineDef, ref: str) -> list[str]:
    kind = definition.kind(ref)
    if kind == "node":
        n = definition.nodes[ref]
        return [s for s in (n.present_next, n.absent_next) if s]
    if kind == "group":
        g = definition.groups[ref]
        return [*g.member_ids, g.positive_next, g.negative_next]
    return []


def _abstract_branches(definition: StateMachineDef, ref: str) -> tuple[Optional[str], Optional[str]]:
    """Two-way view of a top-level ref: a node's answers or a group's outcomes."""
    if ref in definition.groups:
        g = definition.groups[ref]
        return g.positive_next, g.negative_next
    n = definition.nodes[ref]
    return n.present_next, n.absent_next


def enumerate_paths(definition: StateMachineDef, limit: int = 1_000_000) -> Iterator[tuple[str, ...]]:
    """Yield every top-level path from entry, groups abstracted to two outcomes.

    Each path is the sequence of refs visited, ending with the ref where it
    stopped (normally a terminal code). Cycles stop the path at the repeat.
    """
    stack: list[tuple[str, tuple[str, ...]]] = [(definition.entry, ())]
    produced = 0
    while stack:
        ref, path = stack.pop()
        path = path + (ref,)
        kind = definition.kind(ref)
        if kind in (None, "terminal") or ref in path[:-1]:
            produced += 1
            if produced > limit:
                raise RuntimeError("path enumeration limit exceeded")
            yield path
            continue
        for nxt in reversed(_abstract_branches(definition, ref)):
            if nxt is None:
                produced += 1
                yield path + ("<missing>",)
            else:
                stack.append((nxt, path))


def validate_machine(definition: StateMachineDef) -> list[str]:
    """List every broken invariant of a definition; empty means valid."""
    issues: list[str] = []
    d = definition
    if d.entry not in d.nodes:
        issues.append(f"entry {d.entry!r} is not a node")

    overlap = (set(d.nodes) & set(d.groups)) | (set(d.nodes) & set(d.terminals)) | (
        set(d.groups) & set(d.terminals)
    )
    for ref in sorted(overlap):
        issues.append(f"identifier {ref!r} is used by more than one kind")

    for nid, n in d.nodes.items():
        for attr in ("present_next", "absent_next"):
            target = getattr(n, attr)
            if target is not None and d.kind(target) is None:
                issues.append(f"unresolved reference {target!r} from {nid}.{attr}")
        if n.group_id is None:
            if n.present_next is None or n.absent_next is None:
                issues.append(f"ungrouped node {nid} must define both present_next and absent_next")
            if n.level is not Level.ILS:
                issues.append(f"ungrouped node {nid} must be level ILS")
        else:
            g = d.groups.get(n.group_id)
            if g is None:
                issues.append(f"node {nid} names unknown group {n.group_id!r}")
                continue
            if nid not in g.member_ids:
                issues.append(f"node {nid} names group {n.group_id} but is not listed as a member")
            for attr in ("present_next", "absent_next"):
                target = getattr(n, attr)
                if target is not None and target not in g.member_ids:
                    issues.append(f"{nid}.{attr} leaves its group {n.group_id} (target {target!r})")

    for gid, g in d.groups.items():
        for m in g.member_ids:
            if m not in d.nodes:
                issues.append(f"unresolved reference {m!r} in group {gid} members")
            elif d.nodes[m].group_id != gid:
                issues.append(f"group {gid} member {m} does not declare group {gid}")
            elif d.nodes[m].level is not Level.BLS:
                issues.append(f"group {gid} member {m} must be level BLS")
        if len(set(g.member_ids)) != len(g.member_ids):
            issues.append(f"group {gid} lists a member twice")
        for attr in ("positive_next", "negative_next"):
            target = getattr(g, attr)
            if d.kind(target) is None:
                issues.append(f"unresolved reference {target!r} from group {gid}.{attr}")
            elif target in g.member_ids:
                issues.append(f"group {gid}.{attr} points back into the group")
        if not g.terminal_member_ids:
            issues.append(f"group {gid} has no group-terminal member")
        if g.threshold > len(g.terminal_member_ids):
            issues.append(
                f"group {gid}: threshold exceeds group size "
                f"({g.threshold} > {len(g.terminal_member_ids)} group-terminal members)"
            )
        # in-group successor chains must be acyclic
        members = set(g.member_ids)
        for start in g.member_ids:
            seen = {start}
            cur = start
            while cur in d.nodes:
                nxt = [s for s in (d.nodes[cur].present_next, d.nodes[cur].absent_next) if s in members]
                if not nxt:
                    break
                cur = nxt[0]
                if cur in seen:
                    issues.append(f"group {gid} has an in-group successor cycle through {start}")
                    break
                seen.add(cur)

    for c in d.clauses:
        if c.terminal not in d.terminals:
            issues.append(f"clause {c.clause_id} names unknown terminal {c.terminal!r}")

    if issues:
        return issues

    # reachability by breadth-first search from entry
    reached = {d.entry}
    queue = deque([d.entry])
    while queue:
        for nxt in _successors(d, queue.popleft()):
            if nxt not in reached:
                reached.add(nxt)
                queue.append(nxt)
    clause_targets = {c.terminal for c in d.clauses}
    for ref in sorted(set(d.nodes) | set(d.groups)):
        if ref not in reached:
            issues.append(f"node {ref} is unreachable from entry {d.entry}")
    for code in sorted(d.terminals):
        if code not in reached and code not in clause_targets:
            issues.append(f"terminal {code} is unreachable")

    # totality: every abstract path ends at a terminal
    for path in enumerate_paths(d):
        last = path[-1]
        if d.kind(last) != "terminal":
            if last == "<missing>":
                issues.append(f"path {' -> '.join(path[:-1])} has no successor")
            else:
                issues.append(f"path {' -> '.join(path)} revisits {last}")
            break
    return issues


# --------------------------------------------------------------------------
# Runtime


class TransitionKind(str, Enum):
    NEXT_NODE = "next_node"
    GROUP_CONTINUES = "group_continues"
    TERMINAL = "terminal"


@dataclass(frozen=True)
class Transition:
    kind: TransitionKind
    target: str


@dataclass
class MachineRuntime:
    definition: StateMachineDef
    current: Optional[str]
    active_group: Optional[str] = None
    visited: list[str] = field(default_factory=list)
    responses: dict[str, Answer] = field(default_factory=dict)
    group_tallies: dict[str, int] = field(default_factory=dict)
    group_outcomes: dict[str, GroupOutcome] = field(default_factory=dict)
    terminal: Optional[str] = None
    provisional_terminal: Optional[str] = None
    episode_flags: set[str] = field(default_factory=set)

    @property
    def finished(self) -> bool:
        return self.terminal is not None

    def inject_flags(self, flags: Iterable[str]) -> None:
        self.episode_flags.update(flags)


def init_runtime(definition: StateMachineDef) -> MachineRuntime:
    return MachineRuntime(definition=definition, current=definition.entry)


def current_topic(rt: MachineRuntime) -> QuestionNode:
    if rt.terminal is not None:
        raise MachineTerminated(f"{rt.definition.disorder.value} machine already ended at {rt.terminal}")
    return rt.definition.nodes[rt.current]


def position_in_group(rt: MachineRuntime) -> int:
    """0-based index of the current question within its active group (0 outside groups)."""
    if rt.active_group is None:
        return 0
    members = set(rt.definition.groups[rt.active_group].member_ids)
    return sum(1 for v in rt.visited if v in members)


def evaluate_group(tally: int, group: SubStateGroup) -> GroupOutcome:
    return GroupOutcome.POSITIVE if tally >= group.threshold else GroupOutcome.ABSENT


def localized_random_pick(rt: MachineRuntime, rng: random.Random) -> str:
    """Uniform choice among the active group's unvisited members."""
    if rt.active_group is None:
        raise RuntimeError("cursor is not inside a group")
    seen = set(rt.visited)
    remaining = [m for m in rt.definition.groups[rt.active_group].member_ids if m not in seen]
    if not remaining:
        raise RuntimeError(f"group {rt.active_group} has no unvisited member")
    return rng.choice(remaining)


def resolve_clauses(clauses: Iterable[Clause], flags: Iterable[str]) -> Optional[str]:
    """First clause whose required flags are all set, or None."""
    have = set(flags)
    for c in clauses:
        if c.requires <= have:
            return c.terminal
    return None


def resolve_bipolar(flags: Iterable[str], definition: Optional[StateMachineDef] = None) -> Optional[str]:
    """Bipolar I/II decision from episode flags; None leaves the path's own terminal."""
    d = definition or load_shipped_machines()[DisorderLabel.BD]
    return resolve_clauses(d.clauses, flags)


def _finish(rt: MachineRuntime, code: str) -> Transition:
    term = rt.definition.terminals[code]
    rt.provisional_terminal = code
    rt.episode_flags.update(term.sets_flags)
    override = resolve_clauses(rt.definition.clauses, rt.episode_flags)
    if override and override != code:
        logger.debug("%s: clause override %s -> %s", rt.definition.disorder.value, code, override)
    rt.terminal = override or code
    rt.current = None
    rt.active_group = None
    return Transition(TransitionKind.TERMINAL, rt.terminal)


def _advance(rt: MachineRuntime, target: str, rng: random.Random) -> Transition:
    kind = rt.definition.kind(target)
    if kind == "terminal":
        return _finish(rt, target)
    if kind == "group":
        rt.active_group = target
        rt.group_tallies.setdefault(target, 0)
        rt.current = localized_random_pick(rt, rng)
        return Transition(TransitionKind.NEXT_NODE, rt.current)
    rt.current = target
    return Transition(TransitionKind.NEXT_NODE, target)


def apply_response(rt: MachineRuntime, answer: Answer | str, rng: random.Random) -> Transition:
    """Record the answer to the current topic and move the cursor."""
    node = current_topic(rt)
    if node.id in rt.responses:
        raise ValueError(f"node {node.id} was already answered")
    answer = Answer(answer)
    present = answer is Answer.PRESENT
    rt.responses[node.id] = answer
    rt.visited.append(node.id)
    succ = node.present_next if present else node.absent_next

    if rt.active_group is None:
        return _advance(rt, succ, rng)

    g = rt.definition.groups[rt.active_group]
    if present and node.id in g.terminal_member_ids:
        rt.group_tallies[g.group_id] += 1
    answered = rt.responses.keys()
    if all(m in answered for m in g.terminal_member_ids):
        outcome = evaluate_group(rt.group_tallies[g.group_id], g)
        rt.group_outcomes[g.group_id] = outcome
        rt.active_group = None
        nxt = g.positive_next if outcome is GroupOutcome.POSITIVE else g.negative_next
        return _advance(rt, nxt, rng)
    if succ is not None and succ not in answered:
        rt.current = succ
        return Transition(TransitionKind.NEXT_NODE, succ)
    rt.current = localized_random_pick(rt, rng)
    return Transition(TransitionKind.GROUP_CONTINUES, rt.current)


def render_question(node: QuestionNode, position_in_group: int = 0) -> str:
    """Fill the temporal cue: precise for the first question of a group (or any ungrouped node)."""
    precise = node.group_id is None or position_in_group == 0
    return node.question_template.format(when=node.precise_cue if precise else node.loose_cue)


def labels_from_terminals(
    finals: Mapping[DisorderLabel, str],
    defs: Mapping[DisorderLabel, StateMachineDef] | None = None,
) -> frozenset[DisorderLabel]:
    defs = defs if defs is not None else load_shipped_machines()
    out = set()
    for label, code in finals.items():
        contrib = defs[DisorderLabel(label)].terminals[code].contributes_label
        if contrib is not None:
            out.add(contrib)
    return frozenset(out)


def run_script(
    definition: StateMachineDef,
    truth: Mapping[str, bool] | Iterable[str],
    rng: random.Random,
    flags: Iterable[str] = (),
    max_steps: int = 1000,
) -> MachineRuntime:
    """Drive a machine with truthful answers; ``truth`` is a node->bool map or a set of present ids."""
    if not isinstance(truth, Mapping):
        present = set(truth)
        truth = {nid: nid in present for nid in definition.nodes}
    rt = init_runtime(definition)
    rt.inject_flags(flags)
    for _ in range(max_steps):
        if rt.finished:
            return rt
        node = current_topic(rt)
        apply_response(rt, Answer.PRESENT if truth.get(node.id, False) else Answer.ABSENT, rng)
    raise RuntimeError(f"machine did not terminate within {max_steps} answers")
