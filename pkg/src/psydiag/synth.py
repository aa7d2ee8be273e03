"""Synthetic EMRs whose symptom sets encode a chosen label set.

For each labelled disorder a contributing terminal is picked, one abstract
path to it is drawn, and node answers are fixed so that a truthful walk of
the machine follows that path. Unlabelled disorders get no symptoms at all,
which every shipped machine maps to a non-contributing terminal.
"""

from __future__ import annotations

import random
from typing import Iterable, Mapping, Optional

from .knowledge import DsdKg, kg_from_machines
from .model import (
    ELIGIBLE_COMBINATIONS,
    LABEL_ORDER,
    Demographic,
    DisorderLabel,
    Emr,
    Gender,
    sorted_labels,
)
from .statemachine import StateMachineDef, enumerate_paths, load_shipped_machines

#: Provisional BD terminals that end as bipolar I regardless of other flags.
_BD_MANIC = ("bipolar4", "bipolar6")
#: Provisional BD terminals that need a past depressive episode to count.
_BD_HYPOMANIC = ("bipolar1", "bipolar7")


def contributing_terminals(definition: StateMachineDef) -> list[str]:
    return sorted(c for c, t in definition.terminals.items() if t.contributes_label is not None)


def truth_for_path(definition: StateMachineDef, path: tuple[str, ...], rng: random.Random) -> dict[str, bool]:
    """Node answers that make a truthful walk follow ``path``."""
    truth: dict[str, bool] = {}
    for ref, nxt in zip(path, path[1:]):
        kind = definition.kind(ref)
        if kind == "node":
            node = definition.nodes[ref]
            if node.present_next == nxt and node.absent_next == nxt:
                truth[ref] = rng.random() < 0.5
            else:
                truth[ref] = node.present_next == nxt
        elif kind == "group":
            g = definition.groups[ref]
            terms = list(g.terminal_member_ids)
            if g.positive_next == nxt and g.negative_next == nxt:
                positive = rng.random() < 0.5
            else:
                positive = g.positive_next == nxt
            n_true = rng.randint(g.threshold, len(terms)) if positive else rng.randint(0, g.threshold - 1)
            chosen = set(rng.sample(terms, n_true))
            for m in terms:
                truth[m] = m in chosen
            # a follow-up question only makes sense when its parent was affirmed
            for m in g.member_ids:
                if m not in g.terminal_member_ids:
                    child = definition.nodes[m].present_next
                    truth[m] = truth.get(child, False)
    return truth


def _pick_path(definition: StateMachineDef, targets: Iterable[str], rng: random.Random) -> tuple[str, ...]:
    targets = set(targets)
    paths = [p for p in enumerate_paths(definition) if p[-1] in targets]
    if not paths:
        raise ValueError(f"no path in {definition.disorder.value} reaches {sorted(targets)}")
    return rng.choice(paths)


def symptom_truth(
    labels: Iterable[DisorderLabel],
    rng: random.Random,
    defs: Optional[Mapping[DisorderLabel, StateMachineDef]] = None,
) -> dict[DisorderLabel, dict[str, bool]]:
    defs = defs or load_shipped_machines()
    labels = frozenset(DisorderLabel(x) for x in labels)
    if DisorderLabel.BD in labels and DisorderLabel.MDD not in labels:
        # bipolar8 alone is reachable without MDD, so this is allowed
        bd_targets = _BD_MANIC
    else:
        bd_targets = _BD_MANIC + _BD_HYPOMANIC
    out: dict[DisorderLabel, dict[str, bool]] = {}
    for label in LABEL_ORDER:
        d = defs[label]
        if label not in labels:
            out[label] = {}
            continue
        targets = bd_targets if label is DisorderLabel.BD else contributing_terminals(d)
        out[label] = truth_for_path(d, _pick_path(d, targets, rng), rng)
    return out


_OCCUPATIONS = ("teacher", "accountant", "student", "nurse", "engineer", "retail worker", "driver", "designer")
_EDUCATION = ("high school", "bachelor's degree", "master's degree", "vocational diploma")
_MARITAL = ("single", "married", "divorced")
_FAMILY = (
    "Mother treated for low mood in her forties. Father healthy.",
    "No known psychiatric illness in parents or siblings.",
    "An uncle had long periods of heavy drinking. Parents healthy.",
    "Older sister diagnosed with an anxiety condition.",
)
_PERSONAL = (
    "Grew up in a small town, the second of three children. Drinks socially, does not smoke.",
    "Raised by grandparents after parents moved for work. Occasional smoking, no drug use.",
    "Only child of a close family. Exercises irregularly, sleeps late on weekends.",
    "Moved to the city for study at eighteen. Light drinker, no smoking.",
)
_HISTORY = (
    "No major physical illness. No prior psychiatric admission.",
    "Mild asthma in childhood. No surgeries.",
    "Treated for a thyroid problem three years ago, now stable.",
)


def synthetic_emr(
    labels: Iterable[DisorderLabel | str],
    seed: int,
    emr_id: Optional[str] = None,
    defs: Optional[Mapping[DisorderLabel, StateMachineDef]] = None,
    kg: Optional[DsdKg] = None,
) -> Emr:
    defs = defs or load_shipped_machines()
    kg = kg or kg_from_machines(defs)
    rng = random.Random(seed)
    labels = frozenset(DisorderLabel(x) for x in labels)
    truth = symptom_truth(labels, rng, defs)
    present = sorted(nid for t in truth.values() for nid, v in t.items() if v)

    complaint_parts = []
    for label in LABEL_ORDER:
        sym = [s for s in present if s in kg.edges[label]]
        if sym:
            pick = rng.sample(sym, min(3, len(sym)))
            complaint_parts += [kg.describe(s).lower() for s in sorted(pick)]
    if complaint_parts:
        chief = "Troubled by " + "; ".join(complaint_parts) + "."
    else:
        chief = "Came in at a relative's request for a general check of mood and stress."
    symptoms = set().union(*kg.edges.values())
    condition_syms = [kg.describe(s).lower() for s in present if s in symptoms]
    condition = (
        "Over the recent period the patient describes " + "; ".join(condition_syms) + "."
        if condition_syms
        else "The patient reports no specific emotional or behavioural complaints."
    )
    gender = rng.choice(list(Gender))
    demo = Demographic(
        gender=gender,
        age=rng.randint(18, 60),
        education=rng.choice(_EDUCATION),
        marital_status=rng.choice(_MARITAL),
        occupation=rng.choice(_OCCUPATIONS),
    )
    if emr_id is None:
        emr_id = "syn-" + "-".join(sorted_labels(labels) or ["none"]).lower() + f"-{seed}"
    return Emr(
        emr_id=emr_id,
        demographic=demo,
        chief_complaint=chief,
        medical_condition=condition,
        medical_history=rng.choice(_HISTORY),
        personal_history=rng.choice(_PERSONAL),
        family_history=rng.choice(_FAMILY),
        preliminary_diagnosis=labels,
        symptom_ids=frozenset(present),
    )


def synthetic_fixture(per_combination: int = 10, seed: int = 0) -> list[Emr]:
    """``per_combination`` EMRs for each eligible label combination."""
    defs = load_shipped_machines()
    kg = kg_from_machines(defs)
    out = []
    for ci, combo in enumerate(ELIGIBLE_COMBINATIONS):
        for j in range(per_combination):
            out.append(synthetic_emr(combo, seed * 100_003 + ci * 1000 + j, defs=defs, kg=kg))
    return out
