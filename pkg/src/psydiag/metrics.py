"""Diagnostic accuracy, significance testing, corpus statistics and
lexical/semantic diversity."""

from __future__ import annotations

import hashlib
import json
import math
import re
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass
from functools import lru_cache
from importlib import resources
from itertools import combinations
from pathlib import Path
from typing import Callable, Iterable, Mapping, Optional, Sequence

import numpy as np

from .model import LABEL_ORDER, DialogueSession, DisorderLabel, Role


class CorpusError(ValueError):
    pass


# --------------------------------------------------------------------------
# accuracy


def _check_lengths(preds: Sequence, golds: Sequence) -> None:
    if len(preds) != len(golds):
        raise ValueError(f"length mismatch: {len(preds)} predictions vs {len(golds)} gold labels")


def subset_accuracy(preds: Sequence[Iterable[DisorderLabel]], golds: Sequence[Iterable[DisorderLabel]]) -> float:
    _check_lengths(preds, golds)
    if not preds:
        raise ValueError("subset_accuracy needs at least one item")
    hits = sum(frozenset(p) == frozenset(g) for p, g in zip(preds, golds))
    return hits / len(preds)


@dataclass(frozen=True)
class PRF:
    precision: float
    recall: float
    f1: float


def per_label_prf(
    preds: Sequence[Iterable[DisorderLabel]], golds: Sequence[Iterable[DisorderLabel]], label: DisorderLabel
) -> PRF:
    _check_lengths(preds, golds)
    label = DisorderLabel(label)
    tp = fp = fn = 0
    for p, g in zip(preds, golds):
        in_p, in_g = label in set(p), label in set(g)
        tp += in_p and in_g
        fp += in_p and not in_g
        fn += in_g and not in_p
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return PRF(precision, recall, f1)


def mcnemar_exact(b: int, c: int) -> float:
    """Two-sided exact McNemar p-value from the discordant counts."""
    if b < 0 or c < 0:
        raise ValueError("discordant counts must be non-negative")
    n = b + c
    if n == 0:
        return 1.0
    tail = sum(math.comb(n, i) for i in range(min(b, c) + 1)) / 2**n
    return min(1.0, 2.0 * tail)


# --------------------------------------------------------------------------
# corpus statistics


def count_chars(text: str, mode: str = "codepoints") -> int:
    if mode == "codepoints":
        return len(text)
    if mode == "nonspace":
        return sum(1 for ch in text if not ch.isspace())
    raise ValueError(f"unknown char counting mode {mode!r}")


@dataclass(frozen=True)
class CorpusStats:
    avg_chars_doctor: float
    avg_chars_patient: float
    avg_turns: float


def dialogue_stats(corpus: Sequence[DialogueSession], char_mode: str = "codepoints") -> CorpusStats:
    if not corpus:
        raise CorpusError("corpus is empty")
    lengths: dict[Role, list[int]] = {Role.DOCTOR: [], Role.PATIENT: []}
    for s in corpus:
        for t in s.turns:
            lengths[t.role].append(count_chars(t.text, char_mode))

    def mean(xs):
        return sum(xs) / len(xs) if xs else 0.0

    return CorpusStats(
        avg_chars_doctor=mean(lengths[Role.DOCTOR]),
        avg_chars_patient=mean(lengths[Role.PATIENT]),
        avg_turns=sum(len(s.turns) for s in corpus) / len(corpus),
    )


# --------------------------------------------------------------------------
# tokens and keywords

_CJK = "㐀-䶿一-鿿豈-﫿"
_TOKEN = re.compile(rf"[{_CJK}]|[^\W\d_{_CJK}]+(?:'[^\W\d_{_CJK}]+)*|\d+")


def tokenize(text: str, mode: str = "auto") -> list[str]:
    """Lowercased tokens.

    ``auto`` splits alphabetic runs on whitespace/punctuation and emits each
    CJK ideograph as its own token; ``whitespace`` is a plain split;
    ``codepoint`` emits every non-space character.
    """
    text = text.lower().replace("’", "'")
    if mode == "auto":
        return _TOKEN.findall(text)
    if mode == "whitespace":
        return text.split()
    if mode == "codepoint":
        return [ch for ch in text if not ch.isspace()]
    raise ValueError(f"unknown tokenizer mode {mode!r}")


@lru_cache(maxsize=1)
def default_stopwords() -> frozenset[str]:
    text = resources.files("psydiag").joinpath("data/stopwords.txt").read_text("utf-8")
    return frozenset(text.split())


def session_text(session: DialogueSession) -> str:
    return "\n".join(t.text for t in session.turns)


def extract_keywords(
    session: DialogueSession | str,
    k: int,
    stopwords: Optional[frozenset[str]] = None,
    tokenizer: str = "auto",
) -> set[str]:
    """Top-``k`` tokens by frequency, ties broken lexicographically."""
    if k < 1:
        raise ValueError("k must be at least 1")
    stop = default_stopwords() if stopwords is None else stopwords
    text = session if isinstance(session, str) else session_text(session)
    counts = Counter(t for t in tokenize(text, tokenizer) if t not in stop)
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return {tok for tok, _ in ranked[:k]}


# --------------------------------------------------------------------------
# diversity


def jaccard(a: frozenset | set, b: frozenset | set) -> float:
    if not a and not b:
        return 1.0
    return len(a & b) / len(a | b)


def intra_emr_diversity(keyword_sets: Sequence[Iterable[str]]) -> float:
    sets = [frozenset(s) for s in keyword_sets]
    n = len(sets)
    if n < 2:
        raise ValueError("intra-EMR diversity needs at least two keyword sets")
    total = sum(jaccard(a, b) for a, b in combinations(sets, 2))
    return 1.0 - total / (n * (n - 1) / 2)


def normalized_entropy(tokens: Sequence[str]) -> float:
    if not tokens:
        raise ValueError("normalized_entropy needs a non-empty token list")
    counts = np.fromiter(Counter(tokens).values(), dtype=float)
    v = counts.size
    if v <= 1:
        return 0.0
    p = counts / counts.sum()
    h = float(-(p * np.log2(p)).sum())
    return min(1.0, max(0.0, h / math.log2(v)))


def hapax_proportion(tokens: Sequence[str]) -> float:
    if not tokens:
        raise ValueError("hapax_proportion needs a non-empty token list")
    counts = Counter(tokens)
    return sum(1 for c in counts.values() if c == 1) / len(counts)


def semantic_diversity(vectors: Sequence[Sequence[float]] | np.ndarray) -> float:
    m = np.asarray(vectors, dtype=float)
    if m.ndim != 2:
        raise ValueError("vectors must all have the same dimension")
    if m.shape[0] < 2:
        raise ValueError("semantic diversity needs at least two vectors")
    norms = np.linalg.norm(m, axis=1)
    if np.any(norms == 0):
        raise ValueError("zero vector has no direction")
    unit = m / norms[:, None]
    sims = unit @ unit.T
    n = m.shape[0]
    mean_sim = (sims.sum() - np.trace(sims)) / (n * (n - 1))
    # rounding can push a mean of unit cosines a hair past 1
    return float(1.0 - np.clip(mean_sim, -1.0, 1.0))


class HashingEmbedder:
    """Bag-of-tokens feature hashing; non-negative, deterministic, offline."""

    def __init__(self, dim: int = 512, seed: int = 0, tokenizer: str = "auto"):
        if dim < 1:
            raise ValueError("dim must be positive")
        self.dim = dim
        self.seed = seed
        self.tokenizer = tokenizer

    def _bucket(self, token: str) -> int:
        h = hashlib.blake2b(f"{self.seed}\x00{token}".encode("utf-8"), digest_size=8)
        return int.from_bytes(h.digest(), "big") % self.dim

    def embed(self, text: str) -> np.ndarray:
        v = np.zeros(self.dim)
        for tok in tokenize(text, self.tokenizer):
            v[self._bucket(tok)] += 1.0
        return v

    def __call__(self, texts: Sequence[str]) -> np.ndarray:
        return np.stack([self.embed(t) for t in texts])


# --------------------------------------------------------------------------
# reports


@dataclass(frozen=True)
class Diversity:
    intra_emr: Optional[float]
    normalized_entropy: float
    hapax: float
    semantic: Optional[float]


def corpus_diversity(
    corpus: Sequence[DialogueSession],
    k: int = 10,
    embed: Optional[Callable[[Sequence[str]], np.ndarray]] = None,
    tokenizer: str = "auto",
) -> Diversity:
    if not corpus:
        raise CorpusError("corpus is empty")
    by_emr: dict[str, list[set[str]]] = defaultdict(list)
    for s in corpus:
        by_emr[s.emr_id].append(extract_keywords(s, k, tokenizer=tokenizer))
    per_emr = [intra_emr_diversity(sets) for sets in by_emr.values() if len(sets) >= 2]
    intra = sum(per_emr) / len(per_emr) if per_emr else None
    tokens = [t for s in corpus for t in tokenize(session_text(s), tokenizer)]
    embed = embed or HashingEmbedder(tokenizer=tokenizer)
    semantic = semantic_diversity(embed([session_text(s) for s in corpus])) if len(corpus) >= 2 else None
    return Diversity(intra, normalized_entropy(tokens), hapax_proportion(tokens), semantic)


@dataclass(frozen=True)
class MetricReport:
    n_sessions: int
    subset_accuracy: float
    per_label: Mapping[DisorderLabel, PRF]
    corpus_stats: CorpusStats
    mcnemar_p: Optional[float] = None
    diversity: Optional[Diversity] = None

    def to_dict(self) -> dict:
        return {
            "n_sessions": self.n_sessions,
            "subset_accuracy": self.subset_accuracy,
            "per_label": {lab.value: asdict(self.per_label[lab]) for lab in LABEL_ORDER if lab in self.per_label},
            "mcnemar_p": self.mcnemar_p,
            "corpus_stats": asdict(self.corpus_stats),
            "diversity": asdict(self.diversity) if self.diversity else None,
        }


def read_corpus(path: str | Path) -> list[DialogueSession]:
    out = []
    with Path(path).open(encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(DialogueSession.from_dict(json.loads(line)))
            except (ValueError, KeyError, TypeError) as exc:
                raise CorpusError(f"{path}: line {n}: {exc}") from exc
    return out


def read_gold(path: str | Path) -> dict[str, frozenset[DisorderLabel]]:
    """Gold labels keyed by session id, from a JSONL of {session_id, labels}."""
    out = {}
    with Path(path).open(encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
                out[str(d["session_id"])] = frozenset(DisorderLabel(x) for x in d["labels"])
            except (ValueError, KeyError, TypeError) as exc:
                raise CorpusError(f"{path}: line {n}: {exc}") from exc
    return out


def _align(corpus: Sequence[DialogueSession], gold: Mapping[str, frozenset]) -> list[frozenset]:
    missing = [s.session_id for s in corpus if s.session_id not in gold]
    if missing:
        shown = ", ".join(missing[:5]) + (" ..." if len(missing) > 5 else "")
        raise CorpusError(f"{len(missing)} corpus sessions have no gold labels: {shown}")
    return [gold[s.session_id] for s in corpus]


def mcnemar_against(
    corpus: Sequence[DialogueSession],
    baseline: Sequence[DialogueSession],
    gold: Mapping[str, frozenset],
) -> float:
    """Exact McNemar over sessions present in both corpora (paired by session id)."""
    base = {s.session_id: s for s in baseline}
    b = c = 0
    for s in corpus:
        other = base.get(s.session_id)
        if other is None:
            continue
        ours = s.predicted_labels == gold[s.session_id]
        theirs = other.predicted_labels == gold[s.session_id]
        b += ours and not theirs
        c += theirs and not ours
    return mcnemar_exact(b, c)


def evaluate_corpus(
    corpus: Sequence[DialogueSession],
    gold: Mapping[str, frozenset[DisorderLabel]],
    baseline: Optional[Sequence[DialogueSession]] = None,
    with_diversity: bool = False,
    keyword_k: int = 10,
) -> MetricReport:
    if not corpus:
        raise CorpusError("corpus is empty")
    golds = _align(corpus, gold)
    preds = [s.predicted_labels for s in corpus]
    return MetricReport(
        n_sessions=len(corpus),
        subset_accuracy=subset_accuracy(preds, golds),
        per_label={lab: per_label_prf(preds, golds, lab) for lab in LABEL_ORDER},
        corpus_stats=dialogue_stats(corpus),
        mcnemar_p=mcnemar_against(corpus, baseline, gold) if baseline is not None else None,
        diversity=corpus_diversity(corpus, keyword_k) if with_diversity else None,
    )


@lru_cache(maxsize=1)
def report_schema() -> dict:
    return json.loads(resources.files("psydiag").joinpath("data/report_schema.json").read_text("utf-8"))
