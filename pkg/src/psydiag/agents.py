"""Turn-level agent logic: module ordering, answer classification, experience
triggering, prompt assembly and the end-of-dialogue check."""

from __future__ import annotations

import json
import logging
import random
import re
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from typing import Iterable, Mapping, Optional, Sequence

import yaml

from .backend import BackendError, BackendRequest, ChatClient, RequestTag
from .contexttree import ContextTreeRuntime, Leaf, required_complete
from .knowledge import DsdKg, symptom_allowed
from .model import (
    LABEL_ORDER,
    Answer,
    DialogueTurn,
    DisorderLabel,
    DoctorProfile,
    Emr,
    FedNarrative,
    Role,
    Strategy,
)
from .statemachine import MachineRuntime, QuestionNode, render_question

logger = logging.getLogger(__name__)

DEFAULT_WINDOW = 6
DEFAULT_N_EXP = 3

_WORD = re.compile(r"[a-z]+(?:'[a-z]+)?")


@lru_cache(maxsize=None)
def load_prompt(name: str) -> str:
    return resources.files("psydiag").joinpath(f"data/prompts/{name}.txt").read_text("utf-8")


@lru_cache(maxsize=1)
def classifier_tokens() -> tuple[frozenset[str], frozenset[str]]:
    text = resources.files("psydiag").joinpath("data/classifier_tokens.yaml").read_text("utf-8")
    doc = yaml.safe_load(text)
    lists = (doc["affirmation"], doc["negation"])
    for tokens in lists:
        bad = [t for t in tokens if not isinstance(t, str)]
        if bad:
            raise ValueError(f"classifier tokens must be quoted strings, got {bad!r}")
    return frozenset(lists[0]), frozenset(lists[1])


@lru_cache(maxsize=1)
def stopwords() -> frozenset[str]:
    text = resources.files("psydiag").joinpath("data/stopwords.txt").read_text("utf-8")
    return frozenset(text.split())


def words(text: str) -> list[str]:
    return _WORD.findall(text.lower().replace("’", "'"))


@dataclass(frozen=True)
class ConversationView:
    """What a tool function sees: the last ``k`` turns plus bookkeeping."""

    window: tuple[DialogueTurn, ...]
    topic: QuestionNode | Leaf | None = None
    evidence: Mapping[DisorderLabel, int] = field(default_factory=dict)
    machine: Optional[DisorderLabel] = None
    last_answer: Optional[Answer] = None
    k: int = DEFAULT_WINDOW

    def __post_init__(self):
        if self.k < 2:
            raise ValueError("window size must be at least 2")
        if len(self.window) > self.k:
            raise ValueError(f"window holds {len(self.window)} turns, more than k={self.k}")

    @classmethod
    def of(cls, turns: Sequence[DialogueTurn], k: int = DEFAULT_WINDOW, **kw) -> "ConversationView":
        return cls(window=tuple(turns[-k:]), k=k, **kw)

    def last(self, role: Role) -> Optional[DialogueTurn]:
        for t in reversed(self.window):
            if t.role is role:
                return t
        return None

    def transcript(self) -> str:
        return "\n".join(f"{t.role.value}: {t.text}" for t in self.window)


# --------------------------------------------------------------------------
# order_gen


def symptom_evidence(text: str, kg: DsdKg) -> dict[DisorderLabel, int]:
    """Per-disorder count of symptoms whose description is evident in ``text``.

    A symptom counts when every content word of its description occurs in
    the text (case-insensitive).
    """
    present = set(words(text))
    stop = stopwords()
    counts = {label: 0 for label in LABEL_ORDER}
    for label, sids in kg.edges.items():
        for sid in sids:
            content = [w for w in words(kg.describe(sid)) if w not in stop and len(w) > 2]
            if content and all(w in present for w in content):
                counts[label] += 1
    return counts


def order_gen(view: ConversationView, mode: Strategy | str, rng: random.Random) -> list[DisorderLabel]:
    mode = Strategy(mode)
    if mode is Strategy.RANDOM:
        order = list(LABEL_ORDER)
        rng.shuffle(order)
        return order
    # sorted() is stable, so equal counts keep the fixed label order
    return sorted(LABEL_ORDER, key=lambda lab: -view.evidence.get(lab, 0))


def enforce_mdd_before_bd(order: Sequence[DisorderLabel]) -> tuple[list[DisorderLabel], bool]:
    """Move MDD directly ahead of BD when it would run later. Returns (order, changed)."""
    order = list(order)
    if DisorderLabel.BD not in order or DisorderLabel.MDD not in order:
        return order, False
    if order.index(DisorderLabel.MDD) < order.index(DisorderLabel.BD):
        return order, False
    order.remove(DisorderLabel.MDD)
    order.insert(order.index(DisorderLabel.BD), DisorderLabel.MDD)
    return order, True


# --------------------------------------------------------------------------
# classification


def rule_classify(answer: str) -> Answer:
    affirm, negate = classifier_tokens()
    toks = set(words(answer))
    if toks & affirm and not toks & negate:
        return Answer.PRESENT
    return Answer.ABSENT


def response_classifier(view: ConversationView, client: Optional[ChatClient] = None) -> Answer:
    patient = view.last(Role.PATIENT)
    if patient is None:
        raise ValueError("no patient answer in the view")
    if client is None:
        return rule_classify(patient.text)
    topic_text = view.topic.topic if isinstance(view.topic, QuestionNode) else ""
    prompt = load_prompt("classifier").format(topic_text=topic_text, answer=patient.text)
    try:
        reply = client.complete(
            BackendRequest(prompt, (("user", patient.text),), 16, 0.0, RequestTag.CLASSIFIER)
        )
    except BackendError as exc:
        logger.warning("classifier backend failed (%s); using rule fallback", exc)
        return rule_classify(patient.text)
    labels = {w for w in words(reply)} & {"present", "absent"}
    if len(labels) != 1:
        return rule_classify(patient.text)
    return Answer(labels.pop())


# --------------------------------------------------------------------------
# experience trigger


@dataclass
class ExperiencePolicy:
    """Per-session trigger budget: at most ``n_exp`` triggers, one per machine."""

    n_exp: int = DEFAULT_N_EXP
    fired_machines: set[DisorderLabel] = field(default_factory=set)
    count: int = 0

    def exhausted(self) -> bool:
        return self.count >= self.n_exp


def need_exp_branch(
    view: ConversationView, policy: ExperiencePolicy, client: Optional[ChatClient] = None
) -> bool:
    if policy.exhausted():
        return False
    if client is None:
        fire = (
            view.last_answer is Answer.PRESENT
            and view.machine is not None
            and view.machine not in policy.fired_machines
        )
    else:
        prompt = load_prompt("need_experience").format(window=view.transcript())
        try:
            reply = client.complete(
                BackendRequest(prompt, (("user", "yes or no?"),), 8, 0.0, RequestTag.CLASSIFIER)
            )
            fire = words(reply)[:1] == ["yes"]
        except BackendError as exc:
            logger.warning("experience trigger backend failed (%s); not triggering", exc)
            fire = False
    if fire:
        policy.count += 1
        if view.machine is not None:
            policy.fired_machines.add(view.machine)
    return fire


# --------------------------------------------------------------------------
# prompts


@dataclass(frozen=True)
class SessionContext:
    emr: Emr
    kg: DsdKg
    profile: DoctorProfile
    fed: Optional[FedNarrative] = None
    history: tuple[DialogueTurn, ...] = ()


DENIAL = "You do not have this symptom: you must deny it."
AFFIRM = "You do have this symptom: describe it briefly in your own words."


def _topic_parts(topic: QuestionNode | Leaf, position: int) -> tuple[str, str, str]:
    if isinstance(topic, QuestionNode):
        return topic.id, topic.topic, render_question(topic, position)
    return topic.id, topic.branch.replace("_", " "), topic.template


def _emr_block(emr: Emr) -> str:
    d = emr.to_dict()
    d.pop("symptom_ids")
    d.pop("emr_id")
    return json.dumps(d, ensure_ascii=False, indent=1)


def _messages(history: Sequence[DialogueTurn], speaker: Role) -> tuple[tuple[str, str], ...]:
    msgs = tuple(
        ("assistant" if t.role is speaker else "user", t.text) for t in history
    )
    return msgs or (("user", "Please begin."),)


def build_prompt(
    topic: QuestionNode | Leaf, role: Role | str, ctx: SessionContext, position_in_group: int = 0
) -> BackendRequest:
    role = Role(role)
    tid, ttext, question = _topic_parts(topic, position_in_group)
    if role is Role.DOCTOR:
        system = load_prompt("doctor_system").format(
            profile_cues=ctx.profile.cue_block(),
            few_shot=load_prompt("doctor_few_shot").strip(),
            topic_id=tid,
            topic_text=ttext,
            question=question,
        )
        return BackendRequest(
            system, _messages(ctx.history, Role.DOCTOR), ctx.profile.reply_char_limit, 0.7, RequestTag.DOCTOR_TURN
        )
    if isinstance(topic, QuestionNode):
        verdict = AFFIRM if symptom_allowed(ctx.kg, ctx.emr, topic.id) else DENIAL
    else:
        verdict = "Answer from your background as recorded above."
    system = load_prompt("patient_system").format(
        emr=_emr_block(ctx.emr),
        narrative=ctx.fed.narrative if ctx.fed else "(none)",
        topic_id=tid,
        topic_text=ttext,
        verdict=verdict,
    )
    return BackendRequest(system, _messages(ctx.history, Role.PATIENT), 400, 0.7, RequestTag.PATIENT_TURN)


# --------------------------------------------------------------------------
# termination


def is_dial_end(machines: Iterable[MachineRuntime], tree: ContextTreeRuntime) -> bool:
    machines = list(machines)
    return bool(machines) and all(m.finished for m in machines) and required_complete(tree)
