from __future__ import annotations

import random
from dataclasses import replace

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from psydiag.model import Answer, DisorderLabel
from psydiag.statemachine import (
    GroupOutcome,
    MachineParseError,
    MachineTerminated,
    MachineValidationError,
    SubStateGroup,
    TransitionKind,
    apply_response,
    current_topic,
    evaluate_group,
    init_runtime,
    labels_from_terminals,
    load_shipped_machines,
    localized_random_pick,
    parse_machine_def,
    position_in_group,
    render_question,
    resolve_bipolar,
    run_script,
    shipped_machine_path,
    validate_machine,
)

L = DisorderLabel


def test_shipped_machines_validate_clean(defs):
    assert set(defs) == set(DisorderLabel)
    for d in defs.values():
        assert validate_machine(d) == []


@pytest.mark.parametrize("label,entry", [(L.MDD, "A1"), (L.AD, "F140"), (L.ADHD, "K2"), (L.BD, "A134")])
def test_runtime_starts_at_entry(defs, label, entry):
    rt = init_runtime(defs[label])
    assert current_topic(rt).id == entry
    assert not rt.finished and rt.visited == []


def test_absent_first_answer_moves_to_a1n(defs):
    rt = init_runtime(defs[L.MDD])
    t = apply_response(rt, Answer.ABSENT, random.Random(0))
    assert t.kind is TransitionKind.NEXT_NODE and t.target == "A1N"
    assert rt.responses == {"A1": Answer.ABSENT}


def test_double_answer_and_finished_runtime_raise(defs):
    rt = run_script(defs[L.MDD], set(), random.Random(0))
    assert rt.finished
    with pytest.raises(MachineTerminated):
        current_topic(rt)
    with pytest.raises(MachineTerminated):
        apply_response(rt, Answer.PRESENT, random.Random(0))


def test_empty_document_is_a_parse_error():
    with pytest.raises(MachineParseError):
        parse_machine_def("")


def test_dangling_reference_reported():
    text = shipped_machine_path(L.MDD).read_text(encoding="utf-8")
    text = text.replace("present_next: A1Y, absent_next: A1N}", "present_next: ZZZ, absent_next: A1N}", 1)
    with pytest.raises(MachineValidationError) as info:
        parse_machine_def(text)
    assert any("ZZZ" in i for i in info.value.issues)


def test_oversized_threshold_reported(defs):
    d = defs[L.MDD]
    g = d.groups["A00"]
    bad = replace(d, groups={**d.groups, "A00": replace(g, threshold=len(g.member_ids) + 1)})
    assert any("threshold exceeds group size" in i for i in validate_machine(bad))


def test_unreachable_node_reported(defs):
    d = defs[L.MDD]
    orphan = replace(d.nodes["A24"], id="A999", present_next="depression4", absent_next="depression4")
    bad = replace(d, nodes={**d.nodes, "A999": orphan})
    assert any("A999" in i and "unreachable" in i for i in validate_machine(bad))


def _group(threshold: int, size: int) -> SubStateGroup:
    ids = tuple(f"X{i}" for i in range(size))
    return SubStateGroup("G", ids, threshold, "p", "n", ids)


@pytest.mark.parametrize(
    "tally,threshold,size,outcome",
    [(5, 5, 11, GroupOutcome.POSITIVE), (0, 5, 11, GroupOutcome.ABSENT), (3, 3, 6, GroupOutcome.POSITIVE),
     (4, 5, 11, GroupOutcome.ABSENT)],
)
def test_group_outcome_examples(tally, threshold, size, outcome):
    assert evaluate_group(tally, _group(threshold, size)) is outcome


@given(st.integers(1, 12), st.integers(0, 12), st.integers(0, 12))
def test_group_outcome_is_monotone_in_tally(threshold, a, b):
    g = _group(threshold, 12)
    lo, hi = sorted((a, b))
    if evaluate_group(lo, g) is GroupOutcome.POSITIVE:
        assert evaluate_group(hi, g) is GroupOutcome.POSITIVE


def test_first_group_pick_is_uniform(defs):
    # With seven of the eleven A00 members visited, each of the four left
    # should come up about a quarter of the time.
    d = defs[L.MDD]
    members = d.groups["A00"].member_ids
    rt = init_runtime(d)
    rt.active_group = "A00"
    rt.visited = list(members[:7])
    rng = random.Random(11)
    counts: dict[str, int] = {}
    trials = 10_000
    for _ in range(trials):
        m = localized_random_pick(rt, rng)
        counts[m] = counts.get(m, 0) + 1
    assert set(counts) == set(members[7:])
    for c in counts.values():
        assert abs(c / trials - 0.25) <= 0.02


def test_pick_outside_group_raises(defs):
    with pytest.raises(RuntimeError):
        localized_random_pick(init_runtime(defs[L.MDD]), random.Random(0))


def _enter_a00(defs):
    rt = init_runtime(defs[L.MDD])
    rng = random.Random(4)
    for _ in ("A1", "A1Y", "A2Y"):
        apply_response(rt, Answer.PRESENT, rng)
    return rt, rng


def test_cue_is_precise_then_loose(defs):
    rt, rng = _enter_a00(defs)
    assert rt.active_group == "A00" and position_in_group(rt) == 0
    first = render_question(current_topic(rt), position_in_group(rt))
    assert "in the past two weeks" in first
    apply_response(rt, Answer.ABSENT, rng)
    apply_response(rt, Answer.ABSENT, rng)
    assert position_in_group(rt) == 2
    third = render_question(current_topic(rt), position_in_group(rt))
    assert "recently" in third and "two weeks" not in third


def test_group_members_never_repeat(defs):
    rt, rng = _enter_a00(defs)
    while rt.active_group == "A00":
        apply_response(rt, Answer.PRESENT, rng)
    in_group = [v for v in rt.visited if v in defs[L.MDD].groups["A00"].member_ids]
    assert len(in_group) == len(set(in_group)) == 11
    assert rt.group_outcomes["A00"] is GroupOutcome.POSITIVE


@settings(max_examples=60, deadline=None)
@given(st.sampled_from(list(DisorderLabel)), st.sets(st.integers(0, 60)), st.integers(0, 2**32 - 1))
def test_same_seed_same_path(defs, label, picks, seed):
    d = defs[label]
    ids = sorted(d.nodes)
    present = {ids[i % len(ids)] for i in picks}
    a = run_script(d, present, random.Random(seed))
    b = run_script(d, present, random.Random(seed))
    assert a.visited == b.visited and a.terminal == b.terminal
    assert a.terminal in d.terminals


@settings(max_examples=60, deadline=None)
@given(st.sampled_from(list(DisorderLabel)), st.sets(st.integers(0, 60)), st.integers(0, 2**32 - 1))
def test_group_positive_iff_tally_meets_threshold(defs, label, picks, seed):
    d = defs[label]
    ids = sorted(d.nodes)
    present = {ids[i % len(ids)] for i in picks}
    rt = run_script(d, present, random.Random(seed))
    for gid, outcome in rt.group_outcomes.items():
        g = d.groups[gid]
        tally = sum(1 for m in g.terminal_member_ids if rt.responses.get(m) is Answer.PRESENT)
        assert tally == rt.group_tallies[gid]
        assert (outcome is GroupOutcome.POSITIVE) == (tally >= g.threshold)


def test_bipolar_clauses():
    assert resolve_bipolar({"manic_episode"}) == "bipolar8"
    assert resolve_bipolar({"hypomanic_episode", "past_mde"}) == "bipolar9"
    assert resolve_bipolar({"hypomanic_episode"}) is None
    assert resolve_bipolar(set()) is None


def test_labels_from_terminals_examples():
    finals = {L.MDD: "depression3", L.AD: "anxiety4", L.BD: "bipolar5", L.ADHD: "adhd1"}
    got = labels_from_terminals(finals)
    assert L.MDD in got and L.BD not in got and L.ADHD not in got
    assert labels_from_terminals({L.MDD: "depression4"}) == frozenset()
    assert labels_from_terminals({L.MDD: "depression5"}) == frozenset({L.MDD})


def test_all_absent_reaches_negative_terminal(defs):
    expect = {L.MDD: "depression4", L.AD: "anxiety5", L.BD: "bipolar5", L.ADHD: "adhd1"}
    for label, code in expect.items():
        rt = run_script(defs[label], set(), random.Random(0))
        assert rt.terminal == code
        assert labels_from_terminals({label: rt.terminal}) == frozenset()


def test_load_shipped_is_cached():
    assert load_shipped_machines() is load_shipped_machines()
