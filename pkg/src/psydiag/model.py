"""Domain types shared across the package.

Everything here is a frozen value object; mutation happens only in the
runtime classes of :mod:`psydiag.statemachine` and :mod:`psydiag.contexttree`.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import TYPE_CHECKING, Any, Iterable, Optional

if TYPE_CHECKING:
    from .knowledge import DsdKg


class DisorderLabel(str, Enum):
    MDD = "MDD"
    AD = "AD"
    BD = "BD"
    ADHD = "ADHD"


#: Fixed label order, also used as the tie-break for symptom-informed ordering.
LABEL_ORDER: tuple[DisorderLabel, ...] = (
    DisorderLabel.MDD,
    DisorderLabel.AD,
    DisorderLabel.BD,
    DisorderLabel.ADHD,
)

ComorbidityProfile = frozenset  # frozenset[DisorderLabel]


def profile(*labels: str | DisorderLabel) -> frozenset[DisorderLabel]:
    return frozenset(DisorderLabel(x) for x in labels)


#: The six comorbidity combinations a session must hit to be dataset-eligible.
ELIGIBLE_COMBINATIONS: tuple[frozenset[DisorderLabel], ...] = (
    profile("AD", "MDD"),
    profile("BD", "MDD"),
    profile("ADHD", "AD", "MDD"),
    profile("ADHD", "MDD"),
    profile("AD", "BD", "MDD"),
    profile("ADHD", "AD"),
)


def is_eligible(labels: Iterable[DisorderLabel]) -> bool:
    return frozenset(labels) in ELIGIBLE_COMBINATIONS


def sorted_labels(labels: Iterable[DisorderLabel]) -> list[str]:
    """Serialize a label set in the fixed label order."""
    s = set(labels)
    return [lab.value for lab in LABEL_ORDER if lab in s]


class Gender(str, Enum):
    MALE = "male"
    FEMALE = "female"


EMR_SECTIONS = (
    "demographic",
    "chief_complaint",
    "medical_condition",
    "medical_history",
    "personal_history",
    "family_history",
    "preliminary_diagnosis",
)

_TEXT_SECTIONS = EMR_SECTIONS[1:6]
_DEMOGRAPHIC_FIELDS = ("gender", "age", "education", "marital_status", "occupation")


@dataclass(frozen=True)
class Demographic:
    gender: Gender
    age: int
    education: str
    marital_status: str
    occupation: str


@dataclass(frozen=True)
class Emr:
    """A seven-section patient record plus its ground-truth symptom set."""

    emr_id: str
    demographic: Demographic
    chief_complaint: str
    medical_condition: str
    medical_history: str
    personal_history: str
    family_history: str
    preliminary_diagnosis: frozenset[DisorderLabel]
    symptom_ids: frozenset[str] = frozenset()

    def to_dict(self) -> dict[str, Any]:
        d = self.demographic
        return {
            "emr_id": self.emr_id,
            "demographic": {
                "gender": d.gender.value,
                "age": d.age,
                "education": d.education,
                "marital_status": d.marital_status,
                "occupation": d.occupation,
            },
            "chief_complaint": self.chief_complaint,
            "medical_condition": self.medical_condition,
            "medical_history": self.medical_history,
            "personal_history": self.personal_history,
            "family_history": self.family_history,
            "preliminary_diagnosis": sorted_labels(self.preliminary_diagnosis),
            "symptom_ids": sorted(self.symptom_ids),
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "Emr":
        missing = [k for k in ("emr_id", *EMR_SECTIONS, "symptom_ids") if k not in data]
        if missing:
            raise ValueError(f"EMR record missing fields: {', '.join(missing)}")
        demo = data["demographic"]
        missing = [k for k in _DEMOGRAPHIC_FIELDS if k not in demo]
        if missing:
            raise ValueError(f"EMR demographic missing fields: {', '.join(missing)}")
        return cls(
            emr_id=str(data["emr_id"]),
            demographic=Demographic(
                gender=Gender(demo["gender"]),
                age=int(demo["age"]),
                education=str(demo["education"]),
                marital_status=str(demo["marital_status"]),
                occupation=str(demo["occupation"]),
            ),
            chief_complaint=str(data["chief_complaint"]),
            medical_condition=str(data["medical_condition"]),
            medical_history=str(data["medical_history"]),
            personal_history=str(data["personal_history"]),
            family_history=str(data["family_history"]),
            preliminary_diagnosis=frozenset(DisorderLabel(x) for x in data["preliminary_diagnosis"]),
            symptom_ids=frozenset(str(s) for s in data["symptom_ids"]),
        )


def write_emr(emr: Emr, path: str | Path) -> None:
    Path(path).write_text(json.dumps(emr.to_dict(), indent=2, ensure_ascii=False) + "\n", encoding="utf-8")


def read_emr(path: str | Path) -> Emr:
    return Emr.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def load_emrs(path: str | Path) -> list[Emr]:
    """Read one EMR file, or every ``*.json`` file in a directory (sorted by name)."""
    p = Path(path)
    if p.is_dir():
        return [read_emr(f) for f in sorted(p.glob("*.json"))]
    return [read_emr(p)]


def validate_emr(emr: Emr, kg: "DsdKg") -> list[str]:
    """Return human-readable invariant violations; an empty list means valid."""
    problems: list[str] = []
    if not emr.emr_id:
        problems.append("emr_id is empty")
    d = emr.demographic
    if d.age <= 0:
        problems.append(f"demographic.age must be positive, got {d.age}")
    for name in ("education", "marital_status", "occupation"):
        if not getattr(d, name).strip():
            problems.append(f"demographic.{name} is empty")
    for name in _TEXT_SECTIONS:
        if not getattr(emr, name).strip():
            problems.append(f"section {name} is empty")
    if not emr.preliminary_diagnosis:
        problems.append("section preliminary_diagnosis is empty")
    unknown = sorted(s for s in emr.symptom_ids if s not in kg.descriptions)
    if unknown:
        problems.append(f"unknown symptom ids: {', '.join(unknown)}")
    for label in sorted_labels(emr.preliminary_diagnosis):
        if not kg.edges[DisorderLabel(label)] & emr.symptom_ids:
            problems.append(f"diagnosis {label} has no supporting symptom in symptom_ids")
    return problems


@dataclass(frozen=True)
class AnnotatedUser:
    """Count-bearing stand-in for a social-media user record."""

    user_id: str
    symptom_post_count: int
    distinct_symptom_count: int


MIN_SYMPTOM_POSTS = 10
MIN_DISTINCT_SYMPTOMS = 20


def filter_users(users: Iterable[AnnotatedUser]) -> list[AnnotatedUser]:
    return [
        u
        for u in users
        if u.symptom_post_count >= MIN_SYMPTOM_POSTS
        and u.distinct_symptom_count >= MIN_DISTINCT_SYMPTOMS
    ]


@dataclass(frozen=True)
class FictitiousExperience:
    experience_id: str
    emr_id: str
    text: str

    def __post_init__(self):
        if not self.text.strip():
            raise ValueError("fictitious experience text must be non-empty")


@dataclass(frozen=True)
class PersonalHistory:
    history_id: str
    emr_id: str
    text: str

    def __post_init__(self):
        if not self.text.strip():
            raise ValueError("personal history text must be non-empty")


@dataclass(frozen=True)
class FedNarrative:
    emr_id: str
    history_id: str
    experience_id: str
    narrative: str

    def to_dict(self) -> dict[str, str]:
        return {
            "emr_id": self.emr_id,
            "history_id": self.history_id,
            "experience_id": self.experience_id,
            "narrative": self.narrative,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "FedNarrative":
        return cls(data["emr_id"], data["history_id"], data["experience_id"], data["narrative"])


class Verbosity(str, Enum):
    TERSE = "terse"
    MODERATE = "moderate"
    VERBOSE = "verbose"


@dataclass(frozen=True)
class DoctorProfile:
    profile_id: int
    age_band: str
    specialty: str
    empathy_style: str
    verbosity: Verbosity
    diagnostic_speed: str  # "fast" | "deliberate"
    explanation_frequency: str  # "low" | "high"
    reply_char_limit: int
    empathy_phrases: tuple[str, ...]

    def __post_init__(self):
        if self.reply_char_limit <= 0:
            raise ValueError("reply_char_limit must be positive")
        if not self.empathy_phrases:
            raise ValueError("empathy_phrases must be non-empty")
        if self.diagnostic_speed not in ("fast", "deliberate"):
            raise ValueError(f"bad diagnostic_speed {self.diagnostic_speed!r}")
        if self.explanation_frequency not in ("low", "high"):
            raise ValueError(f"bad explanation_frequency {self.explanation_frequency!r}")

    def cue_block(self) -> str:
        return (
            f"Doctor profile {self.profile_id}: {self.age_band} {self.specialty}; "
            f"empathy style: {self.empathy_style}; verbosity: {self.verbosity.value}; "
            f"diagnostic pace: {self.diagnostic_speed}; "
            f"explains reasoning: {self.explanation_frequency}; "
            f"keep replies under {self.reply_char_limit} characters."
        )


DOCTOR_PROFILES: tuple[DoctorProfile, ...] = (
    DoctorProfile(
        1, "late-career (55-65)", "general adult psychiatry", "warm and reassuring",
        Verbosity.MODERATE, "deliberate", "high", 220,
        ("I understand.", "Thank you for telling me that.", "That sounds hard.",
         "I appreciate you sharing this."),
    ),
    DoctorProfile(
        2, "early-career (28-35)", "mood disorders clinic", "brisk but polite",
        Verbosity.TERSE, "fast", "low", 140,
        ("Okay.", "Got it.", "Thanks.", "Understood."),
    ),
    DoctorProfile(
        3, "mid-career (40-50)", "anxiety and stress clinic", "gentle and validating",
        Verbosity.VERBOSE, "deliberate", "high", 300,
        ("It makes sense that you would feel that way.", "Thank you for being so open.",
         "Many people go through something similar.", "I can hear how much this affects you."),
    ),
    DoctorProfile(
        4, "mid-career (35-45)", "neurodevelopmental assessment", "analytical and matter-of-fact",
        Verbosity.MODERATE, "fast", "high", 200,
        ("I see.", "That is helpful to know.", "Let me note that.", "Right."),
    ),
    DoctorProfile(
        5, "senior (60+)", "consultation-liaison psychiatry", "calm and paternal",
        Verbosity.TERSE, "deliberate", "low", 160,
        ("Take your time.", "Alright.", "Thank you.", "I hear you."),
    ),
)


def doctor_profile(profile_id: int) -> DoctorProfile:
    for p in DOCTOR_PROFILES:
        if p.profile_id == profile_id:
            return p
    raise KeyError(f"no doctor profile {profile_id}")


class Role(str, Enum):
    DOCTOR = "doctor"
    PATIENT = "patient"


class Answer(str, Enum):
    PRESENT = "present"
    ABSENT = "absent"


class Strategy(str, Enum):
    RANDOM = "random"
    SYMPTOM_INFORMED = "symptom_informed"


@dataclass(frozen=True)
class DialogueTurn:
    index: int
    role: Role
    text: str
    topic_state: Optional[str] = None
    classified_response: Optional[Answer] = None

    def to_dict(self) -> dict[str, Any]:
        return {
            "index": self.index,
            "role": self.role.value,
            "text": self.text,
            "topic_state": self.topic_state,
            "classified_response": self.classified_response.value if self.classified_response else None,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "DialogueTurn":
        cr = d.get("classified_response")
        return cls(
            index=int(d["index"]),
            role=Role(d["role"]),
            text=str(d["text"]),
            topic_state=d.get("topic_state"),
            classified_response=Answer(cr) if cr else None,
        )


SESSION_FIELDS = (
    "session_id",
    "emr_id",
    "fed",
    "doctor_profile_id",
    "strategy",
    "rng_seed",
    "turns",
    "final_diagnoses",
    "predicted_labels",
    "eligible",
)


@dataclass(frozen=True)
class DialogueSession:
    session_id: str
    emr_id: str
    fed: Optional[FedNarrative]
    doctor_profile_id: int
    strategy: Strategy
    rng_seed: int
    turns: tuple[DialogueTurn, ...]
    final_diagnoses: dict[DisorderLabel, str] = field(default_factory=dict)
    predicted_labels: frozenset[DisorderLabel] = frozenset()

    @property
    def eligible(self) -> bool:
        return is_eligible(self.predicted_labels)

    def to_dict(self) -> dict[str, Any]:
        return {
            "session_id": self.session_id,
            "emr_id": self.emr_id,
            "fed": self.fed.to_dict() if self.fed else None,
            "doctor_profile_id": self.doctor_profile_id,
            "strategy": self.strategy.value,
            "rng_seed": self.rng_seed,
            "turns": [t.to_dict() for t in self.turns],
            "final_diagnoses": {
                lab.value: self.final_diagnoses[lab] for lab in LABEL_ORDER if lab in self.final_diagnoses
            },
            "predicted_labels": sorted_labels(self.predicted_labels),
            "eligible": self.eligible,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "DialogueSession":
        missing = [k for k in SESSION_FIELDS if k not in d]
        if missing:
            raise ValueError(f"session record missing fields: {', '.join(missing)}")
        return cls(
            session_id=str(d["session_id"]),
            emr_id=str(d["emr_id"]),
            fed=FedNarrative.from_dict(d["fed"]) if d["fed"] else None,
            doctor_profile_id=int(d["doctor_profile_id"]),
            strategy=Strategy(d["strategy"]),
            rng_seed=int(d["rng_seed"]),
            turns=tuple(DialogueTurn.from_dict(t) for t in d["turns"]),
            final_diagnoses={DisorderLabel(k): v for k, v in d["final_diagnoses"].items()},
            predicted_labels=frozenset(DisorderLabel(x) for x in d["predicted_labels"]),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), ensure_ascii=False, sort_keys=False)


def check_turns(turns: Iterable[DialogueTurn]) -> list[str]:
    """Alternation / contiguity violations for a turn sequence."""
    problems = []
    for i, t in enumerate(turns):
        if t.index != i:
            problems.append(f"turn {i} has index {t.index}")
        expected = Role.DOCTOR if i % 2 == 0 else Role.PATIENT
        if t.role is not expected:
            problems.append(f"turn {i} role {t.role.value}, expected {expected.value}")
        if t.classified_response is not None and t.role is not Role.PATIENT:
            problems.append(f"turn {i} is a doctor turn with a classified response")
    return problems
