"""Disorder-symptom knowledge graph derived from the machine definitions."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping

from .model import LABEL_ORDER, DisorderLabel, Emr
from .statemachine import Category, StateMachineDef

#: Categories whose nodes count as symptoms of the disorder; comorbid or
#: contributing factors are answerable topics but not disorder evidence.
SYMPTOM_CATEGORIES = frozenset(
    {Category.AFFECTIVE_COGNITIVE, Category.PHYSIO_BEHAVIORAL, Category.IMPAIRMENT_RISK}
)


class UnknownSymptomError(KeyError):
    pass


@dataclass(frozen=True)
class DsdKg:
    edges: Mapping[DisorderLabel, frozenset[str]]
    descriptions: Mapping[str, str]
    owner: Mapping[str, DisorderLabel]

    def describe(self, symptom_id: str) -> str:
        try:
            return self.descriptions[symptom_id]
        except KeyError:
            raise UnknownSymptomError(symptom_id) from None

    def to_edge_list(self) -> list[dict[str, str]]:
        return [
            {"disorder": label.value, "symptom": sid, "description": self.descriptions[sid]}
            for label in LABEL_ORDER
            if label in self.edges
            for sid in sorted(self.edges[label])
        ]


def kg_from_machines(defs: Iterable[StateMachineDef] | Mapping[DisorderLabel, StateMachineDef]) -> DsdKg:
    if isinstance(defs, Mapping):
        defs = defs.values()
    defs = sorted(defs, key=lambda d: LABEL_ORDER.index(d.disorder))
    if not defs:
        raise ValueError("knowledge graph needs at least one machine definition")
    edges: dict[DisorderLabel, frozenset[str]] = {}
    descriptions: dict[str, str] = {}
    owner: dict[str, DisorderLabel] = {}
    for d in defs:
        if d.disorder in edges:
            raise ValueError(f"duplicate machine for {d.disorder.value}")
        for nid, node in d.nodes.items():
            if nid in descriptions:
                raise ValueError(f"symptom id {nid} appears in more than one machine")
            descriptions[nid] = node.topic
            owner[nid] = d.disorder
        edges[d.disorder] = frozenset(
            nid for nid, node in d.nodes.items() if node.category in SYMPTOM_CATEGORIES
        )
    return DsdKg(edges=edges, descriptions=descriptions, owner=owner)


def symptom_allowed(kg: DsdKg, emr: Emr, symptom_id: str) -> bool:
    """Whether the patient may affirm this symptom: it must be in the EMR's symptom set."""
    kg.describe(symptom_id)
    return symptom_id in emr.symptom_ids


def write_edge_list(kg: DsdKg, path: str | Path) -> None:
    Path(path).write_text(json.dumps(kg.to_edge_list(), indent=2) + "\n", encoding="utf-8")
