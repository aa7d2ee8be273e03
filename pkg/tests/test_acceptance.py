"""Acceptance gate: one test group per criterion, reported in the terminal summary."""

from __future__ import annotations

import itertools
import json
import math
import random
import subprocess
import sys
import threading
import time
from collections import Counter
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np
import pytest
import yaml

from psydiag.agents import rule_classify
from psydiag.backend import BackendConfig, BackendRequest, ChatClient, RequestTag, scripted_patient_reply
from psydiag.metrics import (
    hapax_proportion,
    intra_emr_diversity,
    mcnemar_exact,
    normalized_entropy,
    report_schema,
    semantic_diversity,
    subset_accuracy,
)
from psydiag.model import (
    ELIGIBLE_COMBINATIONS,
    AnnotatedUser,
    Answer,
    DisorderLabel,
    Strategy,
    check_turns,
    doctor_profile,
    filter_users,
    load_emrs,
)
from psydiag.orchestrator import (
    GenerationJob,
    generate_dataset,
    generate_fed,
    run_session,
)
from psydiag.statemachine import (
    GroupOutcome,
    apply_response,
    current_topic,
    init_runtime,
    resolve_bipolar,
    run_script,
)
from psydiag.synth import synthetic_fixture

from mockserver import MockChatServer

criterion = pytest.mark.criterion
DATA = resources.files("psydiag").joinpath("data")
SAMPLE_EMRS = Path(str(DATA.joinpath("sample_emrs")))


# ---------------------------------------------------------------- 1
A00_TERMINAL_MEMBERS = ("A3", "A6", "A9Y", "A12", "A13Y", "A16", "A17", "A17Y", "A23")
A00_PARENTS = {"A9": "A9Y", "A13": "A13Y"}
MDD_GATE = {"A1": True, "A1Y": True, "A2Y": True}


@criterion(1, "HDSM oracle equivalence over all 512 A00 assignments")
def test_c1_group_threshold_oracle(defs):
    mdd = defs[DisorderLabel.MDD]
    assert set(mdd.groups["A00"].terminal_member_ids) == set(A00_TERMINAL_MEMBERS)
    start = time.perf_counter()
    mismatches = []
    for i, bits in enumerate(itertools.product((False, True), repeat=9)):
        truth = dict(MDD_GATE)
        truth.update(zip(A00_TERMINAL_MEMBERS, bits))
        for parent, child in A00_PARENTS.items():
            truth[parent] = truth[child]
        rt = run_script(mdd, truth, random.Random(i))
        reached_positive = rt.group_outcomes["A00"] is GroupOutcome.POSITIVE
        members = set(mdd.groups["A00"].member_ids)
        last = max(j for j, v in enumerate(rt.visited) if v in members)
        after = rt.visited[last + 1]
        oracle = sum(bits) >= 5
        if reached_positive != oracle or (after == "A24") != oracle:
            mismatches.append(bits)
    elapsed = time.perf_counter() - start
    assert not mismatches, f"{len(mismatches)} of 512 assignments disagree with the >=5 rule"
    assert elapsed < 10, f"took {elapsed:.1f}s"


# ---------------------------------------------------------------- 2
TERMINAL_TABLES = {
    "MDD": {f"depression{i}" for i in range(1, 6)},
    "AD": {f"anxiety{i}" for i in range(1, 7)},
    "BD": {f"bipolar{i}" for i in range(1, 10)},
    "ADHD": {f"adhd{i}" for i in range(1, 3)},
}
MACHINE_FILES = {"MDD": "mdd.yaml", "AD": "ad.yaml", "BD": "bd.yaml", "ADHD": "adhd.yaml"}


def _raw_paths(doc: dict) -> list[tuple[str, ...]]:
    """Independent DFS over the raw YAML document; groups take two outcomes."""
    nodes, groups, terminals = doc["nodes"], doc["groups"], doc["terminals"]

    def branches(ref):
        if ref in groups:
            return groups[ref]["positive_next"], groups[ref]["negative_next"]
        return nodes[ref]["present_next"], nodes[ref]["absent_next"]

    out = []

    def walk(ref, path):
        path = path + (ref,)
        if ref in terminals or ref in path[:-1]:
            out.append(path)
            return
        for nxt in dict.fromkeys(branches(ref)):
            walk(nxt, path)

    walk(doc["entry"], ())
    return out


@criterion(2, "Machine totality and terminal code tables")
@pytest.mark.parametrize("label", list(MACHINE_FILES))
def test_c2_totality(label):
    start = time.perf_counter()
    doc = yaml.safe_load(DATA.joinpath("machines", MACHINE_FILES[label]).read_text("utf-8"))
    terminals = set(doc["terminals"])
    paths = _raw_paths(doc)
    assert paths
    for p in paths:
        assert p[-1] in terminals, f"path stops at non-terminal: {p}"
        assert sum(r in terminals for r in p) == 1, f"path touches several terminals: {p}"
        assert len(set(p)) == len(p), f"path revisits a state: {p}"
    reached = {p[-1] for p in paths} | {c["terminal"] for c in doc.get("clauses", [])}
    assert reached == terminals == TERMINAL_TABLES[label]
    assert time.perf_counter() - start < 30


# ---------------------------------------------------------------- 3
@criterion(3, "Traversal invariants over 1,000 random scripts per machine")
@pytest.mark.parametrize("label", list(DisorderLabel))
def test_c3_traversal_invariants(defs, label):
    d = defs[label]
    for seed in range(1000):
        rng = random.Random(seed)
        answer_rng = random.Random(10_000 + seed)
        rt = init_runtime(d)
        if label is DisorderLabel.BD and answer_rng.random() < 0.5:
            rt.inject_flags(["past_mde"])
        steps = 0
        while not rt.finished:
            group_before = rt.active_group
            node = current_topic(rt)
            assert node.id not in rt.visited, f"seed {seed}: revisit of {node.id}"
            apply_response(rt, answer_rng.choice(list(Answer)), rng)
            steps += 1
            assert steps <= 200, f"seed {seed}: no terminal within 200 answers"
            if group_before is not None and rt.active_group != group_before:
                missing = set(d.groups[group_before].terminal_member_ids) - set(rt.visited)
                assert not missing, f"seed {seed}: left {group_before} with {missing} unvisited"
        assert len(rt.visited) == len(set(rt.visited))
        assert rt.terminal in d.terminals


# ---------------------------------------------------------------- 4
FLAGS = ("manic_episode", "hypomanic_episode", "past_mde")


def _clause_oracle(flags: set[str]):
    if "manic_episode" in flags:
        return "bipolar8"
    if {"hypomanic_episode", "past_mde"} <= flags:
        return "bipolar9"
    return None


@criterion(4, "Bipolar determinative clauses")
def test_c4_bipolar_clauses(defs):
    bd = defs[DisorderLabel.BD]
    assert resolve_bipolar({"manic_episode"}, bd) == "bipolar8"
    assert resolve_bipolar({"hypomanic_episode", "past_mde"}, bd) == "bipolar9"
    assert resolve_bipolar({"hypomanic_episode"}, bd) is None
    rng = random.Random(4)
    for _ in range(100):
        flags = {f for f in FLAGS + ("noise_flag",) if rng.random() < 0.5}
        assert resolve_bipolar(flags, bd) == _clause_oracle(flags), flags


# ---------------------------------------------------------------- 5
@criterion(5, "Oracle closure: scripted sessions recover EMR labels")
def test_c5_oracle_closure(defs, kg):
    start = time.perf_counter()
    samples = load_emrs(SAMPLE_EMRS)
    fixture = synthetic_fixture(per_combination=10, seed=5)
    assert len(fixture) == 60
    assert Counter(e.preliminary_diagnosis for e in fixture) == {c: 10 for c in ELIGIBLE_COMBINATIONS}
    preds, golds = [], []
    for i, emr in enumerate(samples + fixture):
        strategy = list(Strategy)[i % 2]
        s = run_session(emr, None, doctor_profile(i % 5 + 1), strategy, 1000 + i, defs=defs, kg=kg)
        assert not check_turns(s.turns)
        for t in s.turns:
            if t.classified_response is not None:
                node_id = t.topic_state.split(":", 1)[1]
                expected = Answer.PRESENT if node_id in emr.symptom_ids else Answer.ABSENT
                assert t.classified_response is expected
        preds.append(s.predicted_labels)
        golds.append(emr.preliminary_diagnosis)
    for p, g in zip(preds[: len(samples)], golds):
        assert p == g
    assert subset_accuracy(preds[len(samples):], golds[len(samples):]) == 1.0
    assert time.perf_counter() - start < 60


# ---------------------------------------------------------------- 6
@criterion(6, "Deterministic replay gives byte-identical corpora")
def test_c6_replay(tmp_path):
    emrs = load_emrs(SAMPLE_EMRS)[:3]
    outs = []
    for run in ("a", "b"):
        job = GenerationJob(emrs=emrs, out_dir=tmp_path / run, feds_per_emr=2, seed_base=11, workers=3)
        generate_dataset(job)
        outs.append(((tmp_path / run / "corpus.jsonl").read_bytes(), (tmp_path / run / "gold.jsonl").read_bytes()))
    assert outs[0] == outs[1]
    assert outs[0][0]


# ---------------------------------------------------------------- 7
@criterion(7, "Generation arithmetic: sessions attempted and FED counts")
def test_c7_generation_arithmetic(tmp_path, kg):
    emrs = load_emrs(SAMPLE_EMRS)[:2]
    summary = generate_dataset(GenerationJob(emrs=emrs, out_dir=tmp_path, feds_per_emr=5))
    assert summary.attempted == 2 * 5 * 2 == 20
    lines = (tmp_path / "corpus.jsonl").read_text().splitlines()
    assert len(lines) + summary.failed == 20
    for emr in emrs:
        experiences, histories = generate_fed(emr, None, kg)
        assert (len(histories), len(experiences)) == (5, 10)
        assert len(histories) * len(experiences) == 50
    assert 502 * 5 * 2 == 5020  # the same scheme at full scale


# ---------------------------------------------------------------- 8
def _jaccard_oracle(a, b):
    union = a | b
    return 1.0 if not union else len(a & b) / len(union)


@criterion(8, "Metric kernels against brute-force oracles")
def test_c8_metric_kernels():
    rng = random.Random(8)
    alphabet = "abcdefgh"
    for _ in range(1000):
        n = rng.randint(2, 6)
        sets = [frozenset(c for c in alphabet if rng.random() < 0.4) for _ in range(n)]
        pairs = [(i, j) for i in range(n) for j in range(n) if i < j]
        oracle = 1 - sum(_jaccard_oracle(sets[i], sets[j]) for i, j in pairs) / len(pairs)
        assert abs(intra_emr_diversity(sets) - oracle) <= 1e-12

    for _ in range(1000):
        toks = [rng.choice(alphabet[: rng.randint(1, 8)]) for _ in range(rng.randint(1, 40))]
        counts = Counter(toks)
        v, total = len(counts), len(toks)
        h = -sum(c / total * math.log2(c / total) for c in counts.values())
        expected = 0.0 if v <= 1 else h / math.log2(v)
        assert abs(normalized_entropy(toks) - expected) <= 1e-9
        hapax = sum(1 for c in counts.values() if c == 1) / v
        assert abs(hapax_proportion(toks) - hapax) <= 1e-12

    for _ in range(1000):
        n, dim = rng.randint(2, 6), rng.randint(1, 8)
        vecs = [[rng.random() + 1e-3 for _ in range(dim)] for _ in range(n)]
        cos = []
        for i in range(n):
            for j in range(i + 1, n):
                dot = sum(x * y for x, y in zip(vecs[i], vecs[j]))
                cos.append(dot / math.sqrt(sum(x * x for x in vecs[i]) * sum(y * y for y in vecs[j])))
        assert abs(semantic_diversity(np.array(vecs)) - (1 - sum(cos) / len(cos))) <= 1e-9

    assert mcnemar_exact(5, 0) == pytest.approx(0.0625, abs=1e-15)
    for _ in range(1000):
        b, c = rng.randint(0, 60), rng.randint(0, 60)
        assert mcnemar_exact(b, c) == mcnemar_exact(c, b)


# ---------------------------------------------------------------- 9
@criterion(9, "Rule classifier matches the scripted reply corpus exactly")
def test_c9_classifier_fallback(defs, kg):
    base = load_emrs(SAMPLE_EMRS)[0]
    from dataclasses import replace

    everything = replace(base, symptom_ids=frozenset(kg.descriptions))
    nothing = replace(base, symptom_ids=frozenset())
    total = 0
    for d in defs.values():
        for node in d.nodes.values():
            for emr in (everything, nothing):
                text, truth = scripted_patient_reply(emr, kg, node)
                assert rule_classify(text) is truth, (node.id, text)
                total += 1
    assert total == 2 * len(kg.descriptions)


# ---------------------------------------------------------------- 10
def _fixture():
    return json.loads(DATA.joinpath("wire_fixture.json").read_text("utf-8"))


def _fixture_request(fx) -> BackendRequest:
    r = fx["request"]
    return BackendRequest(
        r["system_prompt"], tuple(tuple(m) for m in r["messages"]), r["max_chars"], r["temperature"], RequestTag(r["tag"])
    )


@criterion(10, "Backend contract against a local mock server")
def test_c10_retry_and_backoff():
    sleeps: list[float] = []

    def sleep(s):
        sleeps.append(s)
        time.sleep(s)

    with MockChatServer(fail_first=2) as srv:
        cfg = BackendConfig(endpoint=srv.endpoint, max_retries=3, backoff_initial_ms=20, backoff_mult=2.0)
        with ChatClient(cfg, sleep=sleep) as client:
            assert client.complete(_fixture_request(_fixture())) == "ok"
        assert srv.request_count == 3 <= cfg.max_retries + 1
        assert len(client.request_log) == 3
    assert sleeps == pytest.approx([0.02, 0.04])

    with MockChatServer(fail_first=100) as srv:
        cfg = BackendConfig(endpoint=srv.endpoint, max_retries=2, backoff_initial_ms=1, backoff_mult=3.0)
        with ChatClient(cfg, sleep=lambda s: None) as client:
            with pytest.raises(Exception):
                client.complete(_fixture_request(_fixture()))
        assert srv.request_count == cfg.max_retries + 1


@criterion(10, "Backend contract against a local mock server")
def test_c10_concurrency_high_water():
    with MockChatServer(delay_s=0.05) as srv:
        cfg = BackendConfig(endpoint=srv.endpoint, max_concurrent=3, max_retries=0)
        with ChatClient(cfg) as client:
            req = _fixture_request(_fixture())
            threads = [threading.Thread(target=client.complete, args=(req,)) for _ in range(12)]
            for t in threads:
                t.start()
            for t in threads:
                t.join()
        assert srv.request_count == 12
        assert 1 <= srv.high_water <= 3


@criterion(10, "Backend contract against a local mock server")
def test_c10_wire_fixture_bit_exact():
    fx = _fixture()
    with MockChatServer(raw_body=fx["response"].encode()) as srv:
        cfg = BackendConfig(endpoint=srv.endpoint, model=fx["config"]["model"])
        with ChatClient(cfg) as client:
            assert client.complete(_fixture_request(fx)) == fx["reply"]
        assert srv.bodies == [fx["body"].encode("utf-8")]


# ---------------------------------------------------------------- 11
@criterion(11, "User filtering thresholds at the boundary")
def test_c11_filter_boundaries():
    users = [AnnotatedUser("a", 10, 20), AnnotatedUser("b", 9, 20), AnnotatedUser("c", 10, 19)]
    assert [u.user_id for u in filter_users(users)] == ["a"]


# ---------------------------------------------------------------- 12
def _cli(*args, cwd):
    return subprocess.run([sys.executable, "-m", "psydiag", *args], cwd=cwd, capture_output=True, text=True)


@criterion(12, "End-to-end CLI smoke run")
def test_c12_cli_smoke(tmp_path):
    start = time.perf_counter()
    r = _cli("validate", cwd=tmp_path)
    assert r.returncode == 0, r.stdout + r.stderr
    r = _cli("--seed", "7", "generate", "--backend", "scripted", "--out", "run", cwd=tmp_path)
    assert r.returncode == 0, r.stderr
    r = _cli("eval", "run/corpus.jsonl", "--gold", "run/gold.jsonl", "--diversity", "--out", "report.json", cwd=tmp_path)
    assert r.returncode == 0, r.stderr
    report = json.loads((tmp_path / "report.json").read_text())
    jsonschema.validate(report, report_schema())
    assert report["subset_accuracy"] == 1.0
    r = _cli("stats", "run/corpus.jsonl", "--diversity", cwd=tmp_path)
    assert r.returncode == 0, r.stderr
    assert set(json.loads(r.stdout)) >= {"avg_chars_doctor", "avg_chars_patient", "avg_turns", "diversity"}
    assert time.perf_counter() - start < 120
