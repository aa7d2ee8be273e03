"""Background-inquiry context tree: family history, personal history and
an optional, dynamically triggered experience branch."""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Mapping, Optional

import yaml

from .model import Gender

FAMILY = "family_history"
PERSONAL = "personal_history"
EXPERIENCE = "experience_inquiry"
BRANCHES = (FAMILY, PERSONAL, EXPERIENCE)
REQUIRED_BRANCHES = (FAMILY, PERSONAL)


class ContextTreeError(ValueError):
    pass


@dataclass(frozen=True)
class Leaf:
    id: str
    branch: str
    template: str
    section: str
    gender: Optional[Gender] = None


@dataclass(frozen=True)
class ContextTreeDef:
    branches: Mapping[str, tuple[Leaf, ...]]

    def __post_init__(self):
        if set(self.branches) != set(BRANCHES):
            raise ContextTreeError(
                f"tree must have exactly the branches {', '.join(BRANCHES)}; got {', '.join(sorted(self.branches))}"
            )
        ids = [leaf.id for leaves in self.branches.values() for leaf in leaves]
        if len(ids) != len(set(ids)):
            raise ContextTreeError("leaf ids must be unique")
        for name, leaves in self.branches.items():
            for leaf in leaves:
                if leaf.branch != name:
                    raise ContextTreeError(f"leaf {leaf.id} filed under {name} but tagged {leaf.branch}")
        personal = self.branches[PERSONAL]
        for g in Gender:
            if not any(leaf.gender in (None, g) for leaf in personal):
                raise ContextTreeError(f"personal_history has no leaf applicable to {g.value} patients")

    def leaf(self, leaf_id: str) -> Leaf:
        for leaves in self.branches.values():
            for lf in leaves:
                if lf.id == leaf_id:
                    return lf
        raise KeyError(leaf_id)


def parse_context_tree(doc: Mapping) -> ContextTreeDef:
    raw = (doc or {}).get("branches")
    if not isinstance(raw, Mapping):
        raise ContextTreeError("tree document needs a 'branches' mapping")
    branches = {}
    for name, entries in raw.items():
        leaves = []
        for i, e in enumerate(entries or ()):
            if "template" not in e:
                raise ContextTreeError(f"leaf {i} of {name} has no template")
            leaves.append(
                Leaf(
                    id=str(e.get("id", f"{name}-{i}")),
                    branch=name,
                    template=e["template"],
                    section=e.get("section", name if name != EXPERIENCE else "experience"),
                    gender=Gender(e["gender"]) if e.get("gender") else None,
                )
            )
        branches[name] = tuple(leaves)
    return ContextTreeDef(branches)


def load_context_tree(path: str | Path | None = None) -> ContextTreeDef:
    if path is None:
        return default_context_tree()
    return parse_context_tree(yaml.safe_load(Path(path).read_text(encoding="utf-8")))


@lru_cache(maxsize=1)
def default_context_tree() -> ContextTreeDef:
    text = resources.files("psydiag").joinpath("data/context_tree.yaml").read_text("utf-8")
    return parse_context_tree(yaml.safe_load(text))


@dataclass
class ContextTreeRuntime:
    definition: ContextTreeDef
    gender: Optional[Gender]
    applicable: tuple[Leaf, ...]
    visited: list[str] = field(default_factory=list)
    experience_used: list[str] = field(default_factory=list)
    experience_triggered_count: int = 0

    def mark_visited(self, leaf: Leaf) -> None:
        if leaf.branch == EXPERIENCE:
            return
        if leaf not in self.applicable:
            raise ValueError(f"leaf {leaf.id} is not applicable to this patient")
        if leaf.id not in self.visited:
            self.visited.append(leaf.id)

    def unvisited(self) -> list[Leaf]:
        return [lf for lf in self.applicable if lf.id not in self.visited]


def init_tree(definition: ContextTreeDef, gender: Gender | str | None) -> ContextTreeRuntime:
    """Required leaves: all family leaves plus personal leaves matching ``gender``.

    An unknown / unspecified gender keeps only the untagged personal leaves.
    """
    try:
        g = Gender(gender) if gender is not None else None
    except ValueError:
        g = None
    applicable = definition.branches[FAMILY] + tuple(
        lf for lf in definition.branches[PERSONAL] if lf.gender is None or lf.gender == g
    )
    return ContextTreeRuntime(definition=definition, gender=g, applicable=applicable)


def next_leaf(rt: ContextTreeRuntime, rng: random.Random) -> Leaf:
    """Uniform pick over unvisited required leaves; does not mark it visited."""
    remaining = rt.unvisited()
    if not remaining:
        raise LookupError("all required context-tree leaves have been visited")
    return rng.choice(remaining)


def trigger_experience_branch(decision: bool, rt: ContextTreeRuntime) -> Optional[Leaf]:
    if not decision:
        return None
    for lf in rt.definition.branches[EXPERIENCE]:
        if lf.id not in rt.experience_used:
            rt.experience_used.append(lf.id)
            rt.experience_triggered_count += 1
            return lf
    return None


def required_complete(rt: ContextTreeRuntime) -> bool:
    return not rt.unvisited()
