"""Session engine and batch corpus generation."""

from __future__ import annotations

import hashlib
import json
import logging
import random
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Optional, Sequence

from .agents import (
    DEFAULT_N_EXP,
    ConversationView,
    ExperiencePolicy,
    SessionContext,
    build_prompt,
    enforce_mdd_before_bd,
    is_dial_end,
    load_prompt,
    need_exp_branch,
    order_gen,
    response_classifier,
    symptom_evidence,
)
from .backend import (
    BackendError,
    BackendMalformedResponse,
    BackendRequest,
    ChatClient,
    RequestTag,
    ScriptedDoctor,
    scripted_patient_reply,
    truncate_to_limit,
)
from .contexttree import (
    ContextTreeDef,
    Leaf,
    default_context_tree,
    init_tree,
    next_leaf,
    required_complete,
    trigger_experience_branch,
)
from .knowledge import DsdKg, kg_from_machines
from .model import (
    LABEL_ORDER,
    DialogueSession,
    DialogueTurn,
    DisorderLabel,
    DoctorProfile,
    Emr,
    FedNarrative,
    FictitiousExperience,
    PersonalHistory,
    Role,
    Strategy,
    doctor_profile,
    sorted_labels,
    validate_emr,
)
from .statemachine import (
    MachineRuntime,
    QuestionNode,
    StateMachineDef,
    apply_response,
    current_topic,
    init_runtime,
    labels_from_terminals,
    load_shipped_machines,
    position_in_group,
)

logger = logging.getLogger(__name__)

N_HISTORIES = 5
N_EXPERIENCES = 10
N_PROFILES = 5
DEFAULT_TURN_CAP = 200
PAST_MDE = "past_mde"

LABEL_NAMES = {
    DisorderLabel.MDD: "major depressive disorder",
    DisorderLabel.AD: "generalized anxiety disorder",
    DisorderLabel.BD: "bipolar disorder",
    DisorderLabel.ADHD: "ADHD",
}


class SessionAborted(RuntimeError):
    def __init__(self, session_id: str, turns: int, cap: int):
        self.session_id = session_id
        self.turns = turns
        super().__init__(f"session {session_id} hit the {cap}-turn cap after {turns} turns")


# --------------------------------------------------------------------------
# FED


_HISTORY_EXTRAS = (
    "As a child I was quiet and spent most weekends with my grandparents.",
    "My parents argued a lot when I was young, so I learned to keep to myself.",
    "I was always the organised one among my friends and hated letting people down.",
    "I played team sports at school and still miss having that routine.",
    "We moved house often when I was growing up, so close friends were hard to keep.",
)
_EXPERIENCES = (
    "A few months ago my manager criticised my work in front of the whole {occupation} team.",
    "My closest friend moved abroad this year and we hardly talk now.",
    "I failed an important certification exam that I had studied for all year.",
    "A relative I was close to passed away after a short illness.",
    "I broke up with my partner after a long period of arguments.",
    "Money became tight after unexpected repair bills, and I still worry about rent.",
    "I took on extra shifts as a {occupation} and stopped having any free evenings.",
    "A minor car accident left me shaken, although nobody was badly hurt.",
    "My family has been pressuring me about my life choices during every visit.",
    "I started a new position as a {occupation} and feel out of my depth.",
)


def _emr_text(emr: Emr) -> str:
    d = emr.to_dict()
    d.pop("symptom_ids")
    return json.dumps(d, ensure_ascii=False, indent=1)


def generate_fed(
    emr: Emr, client: Optional[ChatClient] = None, kg: Optional[DsdKg] = None
) -> tuple[list[FictitiousExperience], list[PersonalHistory]]:
    """Build the per-EMR dictionaries of fictitious experiences and personal histories."""
    kg = kg or kg_from_machines(load_shipped_machines())
    problems = validate_emr(emr, kg)
    if problems:
        raise ValueError(f"EMR {emr.emr_id} is invalid: {'; '.join(problems)}")
    if client is None:
        occ = emr.demographic.occupation
        hist_texts = [f"{emr.personal_history} {extra}" for extra in _HISTORY_EXTRAS]
        exp_texts = [t.format(occupation=occ) for t in _EXPERIENCES]
    else:
        prompt = load_prompt("fed_dictionaries").format(
            emr=_emr_text(emr), n_histories=N_HISTORIES, n_experiences=N_EXPERIENCES
        )
        req = BackendRequest(prompt, (("user", "Generate the JSON now."),), 4000, 0.9, RequestTag.FED_GENERATION)
        try:
            data = json.loads(client.complete(req))
            hist_texts = [str(x) for x in data["histories"]]
            exp_texts = [str(x) for x in data["experiences"]]
        except BackendError as exc:
            raise BackendError(f"FED generation failed for EMR {emr.emr_id}: {exc}", RequestTag.FED_GENERATION) from exc
        except (ValueError, KeyError, TypeError) as exc:
            raise BackendMalformedResponse(
                f"FED generation for EMR {emr.emr_id} returned unusable JSON: {exc!r}", RequestTag.FED_GENERATION
            ) from exc
        if len(hist_texts) != N_HISTORIES or len(exp_texts) != N_EXPERIENCES:
            raise BackendMalformedResponse(
                f"FED generation for EMR {emr.emr_id} returned {len(hist_texts)} histories "
                f"and {len(exp_texts)} experiences",
                RequestTag.FED_GENERATION,
            )
    histories = [PersonalHistory(f"{emr.emr_id}-h{i + 1}", emr.emr_id, t) for i, t in enumerate(hist_texts)]
    experiences = [FictitiousExperience(f"{emr.emr_id}-e{i + 1}", emr.emr_id, t) for i, t in enumerate(exp_texts)]
    return experiences, histories


def render_narrative(
    h: PersonalHistory, e: FictitiousExperience, client: Optional[ChatClient] = None
) -> FedNarrative:
    if h.emr_id != e.emr_id:
        raise ValueError(f"history {h.history_id} and experience {e.experience_id} belong to different EMRs")
    if client is None:
        text = f"{e.text} For some background, {h.text[:1].lower()}{h.text[1:]}"
    else:
        prompt = load_prompt("fed_narrative").format(history=h.text, experience=e.text)
        text = client.complete(
            BackendRequest(prompt, (("user", "Write it now."),), 1200, 0.9, RequestTag.FED_GENERATION)
        ).strip()
    return FedNarrative(emr_id=h.emr_id, history_id=h.history_id, experience_id=e.experience_id, narrative=text)


def pair_feds(
    experiences: Sequence[FictitiousExperience],
    histories: Sequence[PersonalHistory],
    n: int,
    rng: random.Random,
) -> list[tuple[PersonalHistory, FictitiousExperience]]:
    """``n`` distinct (history, experience) pairs.

    Up to the history count every pair uses a different history and a
    different experience; beyond that pairs are drawn from the full cross
    product without replacement.
    """
    if n < 1:
        raise ValueError("need at least one FED per EMR")
    if n <= min(len(histories), len(experiences)):
        return list(zip(rng.sample(list(histories), n), rng.sample(list(experiences), n)))
    product = [(h, e) for h in histories for e in experiences]
    if n > len(product):
        raise ValueError(f"only {len(product)} distinct FED pairs exist, {n} requested")
    return rng.sample(product, n)


# --------------------------------------------------------------------------
# session engine


@dataclass
class _Turns:
    session_id: str
    cap: int
    items: list[DialogueTurn] = field(default_factory=list)

    def add(self, role: Role, text: str, topic_state: Optional[str] = None, classified=None) -> DialogueTurn:
        if len(self.items) >= self.cap:
            raise SessionAborted(self.session_id, len(self.items), self.cap)
        t = DialogueTurn(len(self.items), role, text, topic_state, classified)
        self.items.append(t)
        return t


def _closing_text(finals: Mapping[DisorderLabel, str], defs: Mapping[DisorderLabel, StateMachineDef]) -> str:
    labels = labels_from_terminals(finals, defs)
    if not labels:
        return (
            "Thank you for your patience. From what you have told me, you do not meet the criteria "
            "for the conditions we screened for today."
        )
    names = ", ".join(LABEL_NAMES[DisorderLabel(x)] for x in sorted_labels(labels))
    return f"Thank you for your patience. Based on our conversation, my assessment is: {names}."


def session_seed(seed_base: int, emr_id: str, fed_index: int, strategy: Strategy | str) -> int:
    key = f"{seed_base}|{emr_id}|{fed_index}|{Strategy(strategy).value}".encode("utf-8")
    return int(hashlib.sha256(key).hexdigest()[:8], 16)


def run_session(
    emr: Emr,
    fed: Optional[FedNarrative],
    profile: DoctorProfile,
    strategy: Strategy | str,
    seed: int,
    *,
    defs: Optional[Mapping[DisorderLabel, StateMachineDef]] = None,
    kg: Optional[DsdKg] = None,
    tree: Optional[ContextTreeDef] = None,
    client: Optional[ChatClient] = None,
    turn_cap: int = DEFAULT_TURN_CAP,
    n_exp: int = DEFAULT_N_EXP,
    session_id: Optional[str] = None,
) -> DialogueSession:
    """Run one doctor/patient dialogue. ``client=None`` selects the scripted agents."""
    strategy = Strategy(strategy)
    defs = defs or load_shipped_machines()
    kg = kg or kg_from_machines(defs)
    tree = tree or default_context_tree()
    session_id = session_id or f"{emr.emr_id}-{strategy.value}-{seed}"
    rng = random.Random(seed)
    turns = _Turns(session_id, turn_cap)
    scripted_doctor = ScriptedDoctor(profile)

    def doctor_says(topic: QuestionNode | Leaf | str, position: int, state: str) -> None:
        if client is None or isinstance(topic, str):
            text = scripted_doctor.reply(topic, position)
        else:
            ctx = SessionContext(emr, kg, profile, fed, tuple(turns.items))
            req = build_prompt(topic, Role.DOCTOR, ctx, position)
            text = truncate_to_limit(client.complete(req), profile.reply_char_limit)
        turns.add(Role.DOCTOR, text, state)

    def patient_says(topic: QuestionNode | Leaf, position: int) -> tuple[str, object]:
        if client is None:
            return scripted_patient_reply(emr, kg, topic, fed)
        ctx = SessionContext(emr, kg, profile, fed, tuple(turns.items))
        return client.complete(build_prompt(topic, Role.PATIENT, ctx, position)).strip(), None

    tree_rt = init_tree(tree, emr.demographic.gender)
    policy = ExperiencePolicy(n_exp)

    def ask_leaf(leaf: Leaf) -> None:
        state = f"DCT:{leaf.id}"
        doctor_says(leaf, 0, state)
        text, _ = patient_says(leaf, 0)
        turns.add(Role.PATIENT, text, state)

    # opening exchange
    doctor_says("Hello, please have a seat. What brings you here today?", 0, "opening")
    opening = emr.chief_complaint if client is None else patient_says(Leaf("opening", "opening", "", "chief_complaint"), 0)[0]
    turns.add(Role.PATIENT, opening, "opening")

    evidence = symptom_evidence(opening, kg)
    view = ConversationView.of(turns.items, evidence=evidence)
    proposed = order_gen(view, strategy, rng)
    order, moved = enforce_mdd_before_bd(proposed)
    if moved:
        logger.info(
            "%s: moved MDD ahead of BD (%s -> %s)",
            session_id,
            ",".join(x.value for x in proposed),
            ",".join(x.value for x in order),
        )

    runtimes: dict[DisorderLabel, MachineRuntime] = {}
    finals: dict[DisorderLabel, str] = {}
    for label in order:
        rt = init_runtime(defs[label])
        if label is DisorderLabel.BD and DisorderLabel.MDD in finals:
            mdd_term = defs[DisorderLabel.MDD].terminals[finals[DisorderLabel.MDD]]
            if mdd_term.contributes_label is not None:
                rt.inject_flags([PAST_MDE])
        runtimes[label] = rt
        while not rt.finished:
            node = current_topic(rt)
            pos = position_in_group(rt)
            state = f"{label.value}:{node.id}"
            doctor_says(node, pos, state)
            text, truth = patient_says(node, pos)
            pending = turns.items + [DialogueTurn(len(turns.items), Role.PATIENT, text, state)]
            answer = response_classifier(ConversationView.of(pending, topic=node), client)
            if truth is not None and answer is not truth:
                logger.warning("%s: classifier said %s for %s, script said %s", session_id, answer.value, node.id, truth.value)
            turns.add(Role.PATIENT, text, state, answer)
            apply_response(rt, answer, rng)
            exp_view = ConversationView.of(turns.items, topic=node, machine=label, last_answer=answer)
            if need_exp_branch(exp_view, policy, client):
                leaf = trigger_experience_branch(True, tree_rt)
                if leaf is not None:
                    ask_leaf(leaf)
        finals[label] = rt.terminal

    while not required_complete(tree_rt):
        leaf = next_leaf(tree_rt, rng)
        ask_leaf(leaf)
        tree_rt.mark_visited(leaf)

    assert is_dial_end(runtimes.values(), tree_rt)
    turns.add(Role.DOCTOR, _closing_text(finals, defs), "closing")
    turns.add(Role.PATIENT, "Thank you, doctor. That helps me understand what is going on.", "closing")

    return DialogueSession(
        session_id=session_id,
        emr_id=emr.emr_id,
        fed=fed,
        doctor_profile_id=profile.profile_id,
        strategy=strategy,
        rng_seed=seed,
        turns=tuple(turns.items),
        final_diagnoses={lab: finals[lab] for lab in LABEL_ORDER if lab in finals},
        predicted_labels=labels_from_terminals(finals, defs),
    )


# --------------------------------------------------------------------------
# batch generation


@dataclass
class GenerationJob:
    emrs: Sequence[Emr]
    out_dir: Path
    feds_per_emr: int = 5
    strategies: tuple[Strategy, ...] = (Strategy.RANDOM, Strategy.SYMPTOM_INFORMED)
    seed_base: int = 0
    client: Optional[ChatClient] = None
    workers: int = 4
    turn_cap: int = DEFAULT_TURN_CAP
    n_exp: int = DEFAULT_N_EXP
    defs: Optional[Mapping[DisorderLabel, StateMachineDef]] = None
    config_echo: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.feds_per_emr < 1:
            raise ValueError("feds_per_emr must be at least 1")
        self.strategies = tuple(dict.fromkeys(Strategy(s) for s in self.strategies))
        if not self.strategies:
            raise ValueError("at least one strategy is required")
        if self.workers < 1:
            raise ValueError("workers must be at least 1")
        self.out_dir = Path(self.out_dir)


@dataclass(frozen=True)
class CorpusSummary:
    attempted: int
    written: int
    eligible: int
    failed: int
    corpus_path: Path
    manifest_path: Path
    gold_path: Path


@dataclass(frozen=True)
class _Task:
    emr: Emr
    fed: FedNarrative
    fed_index: int
    profile_id: int
    strategy: Strategy

    @property
    def session_id(self) -> str:
        return f"{self.emr.emr_id}-f{self.fed_index + 1}-{self.strategy.value}"


def plan_tasks(job: GenerationJob, kg: DsdKg) -> list[_Task]:
    if not job.emrs:
        raise ValueError("generation job has no EMRs")
    ids = [e.emr_id for e in job.emrs]
    if len(ids) != len(set(ids)):
        raise ValueError("EMR ids must be unique within a job")
    tasks = []
    fed_counter = 0
    for emr in job.emrs:
        experiences, histories = generate_fed(emr, job.client, kg)
        rng = random.Random(session_seed(job.seed_base, emr.emr_id, -1, Strategy.RANDOM))
        for k, (h, e) in enumerate(pair_feds(experiences, histories, job.feds_per_emr, rng)):
            fed = render_narrative(h, e, job.client)
            profile_id = fed_counter % N_PROFILES + 1
            fed_counter += 1
            for strategy in job.strategies:
                tasks.append(_Task(emr, fed, k, profile_id, strategy))
    return tasks


def generate_dataset(job: GenerationJob) -> CorpusSummary:
    defs = job.defs or load_shipped_machines()
    kg = kg_from_machines(defs)
    tree = default_context_tree()
    tasks = plan_tasks(job, kg)

    def work(task: _Task):
        seed = session_seed(job.seed_base, task.emr.emr_id, task.fed_index, task.strategy)
        try:
            return seed, run_session(
                task.emr, task.fed, doctor_profile(task.profile_id), task.strategy, seed,
                defs=defs, kg=kg, tree=tree, client=job.client,
                turn_cap=job.turn_cap, n_exp=job.n_exp, session_id=task.session_id,
            )
        except SessionAborted as exc:
            return seed, ("aborted", str(exc))
        except (BackendError, ValueError, RuntimeError) as exc:
            logger.error("session %s failed: %s", task.session_id, exc)
            return seed, ("error", str(exc))

    job.out_dir.mkdir(parents=True, exist_ok=True)
    corpus_path = job.out_dir / "corpus.jsonl"
    gold_path = job.out_dir / "gold.jsonl"
    manifest_path = job.out_dir / "manifest.json"
    if manifest_path.exists():
        manifest_path.unlink()

    statuses = []
    written = eligible = failed = 0
    with ThreadPoolExecutor(max_workers=job.workers) as pool, \
            corpus_path.open("w", encoding="utf-8") as corpus, \
            gold_path.open("w", encoding="utf-8") as gold:
        for task, (seed, result) in zip(tasks, pool.map(work, tasks)):
            entry = {"session_id": task.session_id, "emr_id": task.emr.emr_id, "rng_seed": seed}
            if isinstance(result, DialogueSession):
                corpus.write(result.to_json() + "\n")
                gold.write(json.dumps({
                    "session_id": result.session_id,
                    "emr_id": task.emr.emr_id,
                    "labels": sorted_labels(task.emr.preliminary_diagnosis),
                }) + "\n")
                written += 1
                eligible += result.eligible
                entry.update(status="ok", eligible=result.eligible, turns=len(result.turns))
            else:
                failed += 1
                entry.update(status=result[0], message=result[1])
            statuses.append(entry)

    manifest = {
        "config": dict(job.config_echo),
        "seed_base": job.seed_base,
        "feds_per_emr": job.feds_per_emr,
        "strategies": [s.value for s in job.strategies],
        "turn_cap": job.turn_cap,
        "attempted": len(tasks),
        "written": written,
        "eligible": eligible,
        "failed": failed,
        "sessions": statuses,
    }
    manifest_path.write_text(json.dumps(manifest, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")
    return CorpusSummary(len(tasks), written, eligible, failed, corpus_path, manifest_path, gold_path)
