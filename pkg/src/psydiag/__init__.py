"""Simulated psychiatric diagnostic dialogues driven by per-disorder state machines."""

from .model import (
    DOCTOR_PROFILES,
    ELIGIBLE_COMBINATIONS,
    LABEL_ORDER,
    Answer,
    DialogueSession,
    DialogueTurn,
    DisorderLabel,
    Emr,
    Role,
    Strategy,
    doctor_profile,
    filter_users,
    load_emrs,
    profile,
    validate_emr,
)
from .statemachine import (
    StateMachineDef,
    apply_response,
    enumerate_paths,
    init_runtime,
    load_machine_def,
    load_shipped_machines,
    validate_machine,
)
from .knowledge import DsdKg, kg_from_machines, symptom_allowed
from .orchestrator import GenerationJob, generate_dataset, run_session
from .metrics import evaluate_corpus, mcnemar_exact, subset_accuracy

__version__ = "0.1.0"
