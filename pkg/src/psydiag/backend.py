"""Text-generation backends.

Two routes produce agent utterances:

* :class:`ChatClient` talks to any server speaking the common chat-completion
  JSON interface (``POST {endpoint}/chat/completions``), with retries,
  exponential backoff and a cap on in-flight requests.
* The scripted functions below are deterministic stand-ins used for
  verification and replay. They never consult anything except their inputs.
"""

from __future__ import annotations

import json
import logging
import os
import re
import threading
import time
import zlib
from dataclasses import dataclass
from enum import Enum
from typing import Any, Callable, Mapping, Optional, Sequence

import httpx

from .contexttree import EXPERIENCE, Leaf
from .knowledge import DsdKg, symptom_allowed
from .model import Answer, DoctorProfile, Emr, FedNarrative
from .statemachine import QuestionNode, render_question

logger = logging.getLogger(__name__)


class RequestTag(str, Enum):
    DOCTOR_TURN = "doctor_turn"
    PATIENT_TURN = "patient_turn"
    CLASSIFIER = "classifier"
    FED_GENERATION = "fed_generation"


@dataclass(frozen=True)
class BackendRequest:
    system_prompt: str
    messages: tuple[tuple[str, str], ...]
    max_chars: int
    temperature: float = 0.7
    tag: RequestTag = RequestTag.DOCTOR_TURN

    def __post_init__(self):
        if not self.messages:
            raise ValueError("messages must be non-empty")
        if self.max_chars <= 0:
            raise ValueError("max_chars must be positive")
        if not 0.0 <= self.temperature <= 2.0:
            raise ValueError("temperature must lie in [0, 2]")
        for role, _ in self.messages:
            if role not in ("user", "assistant", "system"):
                raise ValueError(f"bad message role {role!r}")


@dataclass(frozen=True)
class BackendConfig:
    endpoint: str = "http://localhost:8000/v1"
    model: str = "default"
    auth_env: Optional[str] = None
    timeout_s: float = 60.0
    max_retries: int = 3
    backoff_initial_ms: float = 500.0
    backoff_mult: float = 2.0
    max_concurrent: int = 4

    def __post_init__(self):
        if self.timeout_s <= 0:
            raise ValueError("timeout_s must be positive")
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")
        if self.max_concurrent < 1:
            raise ValueError("max_concurrent must be >= 1")

    @classmethod
    def from_mapping(cls, data: Mapping[str, Any]) -> "BackendConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown backend config keys: {', '.join(sorted(unknown))}")
        return cls(**dict(data))

    def backoff_delays(self) -> list[float]:
        """Seconds slept before each retry."""
        return [self.backoff_initial_ms / 1000.0 * self.backoff_mult**i for i in range(self.max_retries)]


class BackendError(RuntimeError):
    def __init__(self, message: str, tag: RequestTag | str | None = None):
        self.tag = RequestTag(tag) if tag else None
        prefix = f"[{self.tag.value}] " if self.tag else ""
        super().__init__(prefix + message)


class BackendTimeout(BackendError):
    pass


class BackendHTTPError(BackendError):
    def __init__(self, message: str, status: int, tag=None):
        self.status = status
        super().__init__(message, tag)


class BackendMalformedResponse(BackendError):
    pass


def build_payload(cfg: BackendConfig, req: BackendRequest) -> dict[str, Any]:
    messages = [{"role": "system", "content": req.system_prompt}]
    messages += [{"role": role, "content": text} for role, text in req.messages]
    return {
        "model": cfg.model,
        "messages": messages,
        "temperature": req.temperature,
        "max_tokens": req.max_chars,
        "stream": False,
    }


def encode_payload(payload: Mapping[str, Any]) -> bytes:
    """Canonical request body: compact separators, UTF-8, key order as built."""
    return json.dumps(payload, ensure_ascii=False, separators=(",", ":")).encode("utf-8")


def parse_reply(body: bytes | str, tag: RequestTag | None = None) -> str:
    try:
        data = json.loads(body)
        content = data["choices"][0]["message"]["content"]
    except (ValueError, KeyError, IndexError, TypeError) as exc:
        raise BackendMalformedResponse(f"cannot read reply content: {exc!r}", tag) from exc
    if not isinstance(content, str):
        raise BackendMalformedResponse("reply content is not a string", tag)
    return content


_SENTENCE_END = re.compile(r"[.!?。！？](?=\s|$)|[。！？]")


def truncate_to_limit(text: str, max_chars: int) -> str:
    """Cut ``text`` to at most ``max_chars``, preferring the last sentence end."""
    text = text.strip()
    if len(text) <= max_chars:
        return text
    head = text[:max_chars]
    ends = [m.end() for m in _SENTENCE_END.finditer(head)]
    if ends:
        return head[: ends[-1]].rstrip()
    space = head.rfind(" ")
    if space > 0:
        return head[:space].rstrip()
    return head


@dataclass
class AttemptRecord:
    tag: str
    attempt: int
    outcome: str
    delay_before_s: float = 0.0


class ChatClient:
    """Thread-safe chat-completion client with retry and admission control."""

    RETRY_STATUS = frozenset({408, 409, 425, 429, 500, 502, 503, 504})

    def __init__(
        self,
        cfg: BackendConfig,
        transport: Optional[httpx.BaseTransport] = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.cfg = cfg
        self._sleep = sleep
        self._slots = threading.BoundedSemaphore(cfg.max_concurrent)
        self._log_lock = threading.Lock()
        self.request_log: list[AttemptRecord] = []
        headers = {"Content-Type": "application/json"}
        if cfg.auth_env:
            token = os.environ.get(cfg.auth_env)
            if token:
                headers["Authorization"] = f"Bearer {token}"
            else:
                logger.warning("auth variable %s is not set; sending no credentials", cfg.auth_env)
        self._http = httpx.Client(timeout=cfg.timeout_s, transport=transport, headers=headers)

    def close(self) -> None:
        self._http.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    @property
    def url(self) -> str:
        return self.cfg.endpoint.rstrip("/") + "/chat/completions"

    def _record(self, rec: AttemptRecord) -> None:
        with self._log_lock:
            self.request_log.append(rec)

    def complete(self, req: BackendRequest) -> str:
        body = encode_payload(build_payload(self.cfg, req))
        delays = self.cfg.backoff_delays()
        last_error: Optional[BackendError] = None
        for attempt in range(self.cfg.max_retries + 1):
            delay = 0.0
            if attempt:
                delay = delays[attempt - 1]
                self._sleep(delay)
            try:
                with self._slots:
                    resp = self._http.post(self.url, content=body)
            except httpx.TimeoutException as exc:
                last_error = BackendTimeout(f"request timed out after {self.cfg.timeout_s}s", req.tag)
                self._record(AttemptRecord(req.tag.value, attempt + 1, "timeout", delay))
                continue
            except httpx.TransportError as exc:
                last_error = BackendHTTPError(f"transport failure: {exc}", 0, req.tag)
                self._record(AttemptRecord(req.tag.value, attempt + 1, "transport", delay))
                continue
            if resp.status_code >= 400:
                self._record(AttemptRecord(req.tag.value, attempt + 1, f"http {resp.status_code}", delay))
                last_error = BackendHTTPError(f"HTTP {resp.status_code}", resp.status_code, req.tag)
                if resp.status_code in self.RETRY_STATUS:
                    continue
                raise last_error
            self._record(AttemptRecord(req.tag.value, attempt + 1, "ok", delay))
            return parse_reply(resp.content, req.tag)
        assert last_error is not None
        raise last_error


def complete(
    cfg: BackendConfig, req: BackendRequest, client: Optional[ChatClient] = None
) -> str:
    """One-shot completion; doctor replies are cut to ``req.max_chars``."""
    own = client is None
    client = client or ChatClient(cfg)
    try:
        text = client.complete(req)
    finally:
        if own:
            client.close()
    if req.tag is RequestTag.DOCTOR_TURN:
        text = truncate_to_limit(text, req.max_chars)
    return text


# --------------------------------------------------------------------------
# Scripted backends

_PRESENT_TEMPLATES = (
    "Yes, I have noticed that: {desc}.",
    "Yeah, {desc} is something I have been dealing with.",
    "Yes, definitely. {Desc} describes me.",
)
_ABSENT_TEMPLATES = (
    "No, I have not really had {desc}.",
    "No, nothing like that. {Desc} does not sound like me.",
    "No, I wouldn't say so.",
)


def _variant(key: str, n: int) -> int:
    return zlib.crc32(key.encode("utf-8")) % n


def _lower_first(s: str) -> str:
    if len(s) > 1 and s[:2].isupper():
        return s
    return s[:1].lower() + s[1:]


def scripted_patient_reply(
    emr: Emr, kg: DsdKg, topic: QuestionNode | Leaf, fed: Optional[FedNarrative] = None
) -> tuple[str, Optional[Answer]]:
    """Templated patient answer. Symptom topics carry their truth label."""
    if isinstance(topic, Leaf):
        if topic.section == "experience" or topic.branch == EXPERIENCE:
            text = fed.narrative if fed else emr.medical_condition
            return text.strip(), None
        return getattr(emr, topic.section).strip(), None

    desc = kg.describe(topic.id)
    allowed = symptom_allowed(kg, emr, topic.id)
    templates = _PRESENT_TEMPLATES if allowed else _ABSENT_TEMPLATES
    tmpl = templates[_variant(topic.id, len(templates))]
    text = tmpl.format(desc=_lower_first(desc), Desc=desc[:1].upper() + desc[1:])
    return text, Answer.PRESENT if allowed else Answer.ABSENT


_EXPLANATIONS = (
    "I ask because it helps me understand the full picture.",
    "This helps me judge how the symptoms fit together.",
)


def scripted_doctor_reply(
    profile: DoctorProfile,
    topic: QuestionNode | Leaf | str,
    position_in_group: int = 0,
    rotation: int = 0,
) -> str:
    """Empathy phrase ``rotation`` (mod pool size) + rendered question, within the profile limit."""
    if isinstance(topic, QuestionNode):
        question = render_question(topic, position_in_group)
    elif isinstance(topic, Leaf):
        question = topic.template
    else:
        question = str(topic)
    phrase = profile.empathy_phrases[rotation % len(profile.empathy_phrases)]
    parts = [phrase, question]
    if profile.explanation_frequency == "high" and rotation % 2 == 1:
        parts.append(_EXPLANATIONS[rotation // 2 % len(_EXPLANATIONS)])
    limit = profile.reply_char_limit
    for candidate in (" ".join(parts), " ".join(parts[:2]), question):
        if len(candidate) <= limit:
            return candidate
    return truncate_to_limit(question, limit)


@dataclass
class ScriptedDoctor:
    """Per-session scripted doctor; owns the empathy rotation counter."""

    profile: DoctorProfile
    rotation: int = 0

    def reply(self, topic: QuestionNode | Leaf | str, position_in_group: int = 0) -> str:
        text = scripted_doctor_reply(self.profile, topic, position_in_group, self.rotation)
        self.rotation += 1
        return text


def scripted_classifier_corpus(emr_factory, kg: DsdKg, nodes: Sequence[QuestionNode]):
    """Every (reply text, truth) the scripted patient can emit for ``nodes``.

    ``emr_factory(symptom_ids)`` builds an EMR holding the given symptom set.
    """
    with_all = emr_factory(frozenset(n.id for n in nodes))
    with_none = emr_factory(frozenset())
    for node in nodes:
        for emr in (with_all, with_none):
            yield (*scripted_patient_reply(emr, kg, node), node.id)
