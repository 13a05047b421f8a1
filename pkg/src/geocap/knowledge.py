"""Triple stores, predicate merging, fact ranking and fact feature vectors.

Facts are <subject, predicate, object> triples whose subjects are
geographic entity ids. After ingestion the raw predicates are canonicalized
through a synonym map, candidate facts for an image are the facts whose
subject sits in the image's geographic context, and a logistic-regression
ranker orders the candidates so the best ``m`` form the knowledge context.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import _accel, geodata
from .errors import DataFormatError, NumericError

RANK_EXTRA_FEATURES = 7  # rank, distance, azimuth (2), size, has_facts, fact_count


@dataclass(frozen=True)
class Fact:
    subject_id: str
    predicate: str
    object_label: str

    def __post_init__(self):
        if not (self.subject_id and self.predicate and self.object_label):
            raise ValueError(f"fact fields must be non-empty: {self}")


def merge_predicates(raw_predicate: str, synonym_map) -> str:
    """Canonical form of a raw predicate; identity for unmapped ones."""
    if not synonym_map:
        return raw_predicate
    return synonym_map.get(raw_predicate, raw_predicate)


def load_synonym_map(path) -> dict[str, str]:
    """Read ``raw<TAB>canonical`` lines into a predicate synonym map.

    The map must be idempotent: a canonical predicate may not itself be
    mapped elsewhere (no chains), so merging twice equals merging once.
    """
    mapping: dict[str, str] = {}
    try:
        fh = open(path, encoding="utf-8")
    except OSError as exc:
        raise DataFormatError(f"cannot read synonym file {path}: {exc}") from exc
    with fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise DataFormatError(
                    f"{path}:{lineno}: expected 2 tab-separated fields, got {len(parts)}"
                )
            raw, canonical = (p.strip().lower() for p in parts)
            if not raw or not canonical:
                raise DataFormatError(f"{path}:{lineno}: empty predicate")
            if raw in mapping and mapping[raw] != canonical:
                raise DataFormatError(
                    f"{path}:{lineno}: {raw!r} mapped to both "
                    f"{mapping[raw]!r} and {canonical!r}"
                )
            mapping[raw] = canonical
    for raw, canonical in mapping.items():
        if canonical in mapping and mapping[canonical] != canonical:
            raise DataFormatError(
                f"synonym map is not idempotent: {raw!r} -> {canonical!r} -> "
                f"{mapping[canonical]!r}"
            )
    return mapping


class FactStore:
    """Immutable fact collection keyed by subject id.

    Exact duplicate triples (after predicate merging) are collapsed;
    distinct facts sharing subject and predicate are all retained.
    """

    def __init__(self, facts):
        seen = set()
        unique = []
        for fact in facts:
            key = (fact.subject_id, fact.predicate, fact.object_label)
            if key in seen:
                continue
            seen.add(key)
            unique.append(fact)
        self.facts: tuple[Fact, ...] = tuple(unique)
        self._by_subject: dict[str, list[Fact]] = {}
        for fact in self.facts:
            self._by_subject.setdefault(fact.subject_id, []).append(fact)

    def __len__(self):
        return len(self.facts)

    def facts_for(self, subject_id: str) -> tuple[Fact, ...]:
        return tuple(self._by_subject.get(subject_id, ()))

    def count_for(self, subject_id: str) -> int:
        return len(self._by_subject.get(subject_id, ()))

    def predicates(self) -> tuple[str, ...]:
        return tuple(sorted({f.predicate for f in self.facts}))


def load_facts(path, synonym_map=None) -> FactStore:
    """Read ``subject<TAB>predicate<TAB>object`` lines into a store.

    Predicates are merged through ``synonym_map``; predicates and object
    labels are lowercased. Malformed lines raise with their line number.
    """
    synonym_map = synonym_map or {}
    facts = []
    try:
        fh = open(path, encoding="utf-8")
    except OSError as exc:
        raise DataFormatError(f"cannot read triple file {path}: {exc}") from exc
    with fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise DataFormatError(
                    f"{path}:{lineno}: expected 3 tab-separated fields, got {len(parts)}"
                )
            subject, raw_pred, obj = (p.strip() for p in parts)
            try:
                facts.append(
                    Fact(
                        subject_id=subject,
                        predicate=merge_predicates(raw_pred.lower(), synonym_map),
                        object_label=" ".join(obj.lower().split()),
                    )
                )
            except ValueError as exc:
                raise DataFormatError(f"{path}:{lineno}: {exc}") from exc
    return FactStore(facts)


class PredicateVocabulary:
    """Fixed, ordered set of canonical predicates.

    ``vectors`` holds the trainable predicate embeddings; it is attached by
    the model (which keeps training them in place) and starts out unset.
    """

    def __init__(self, predicates, synonym_map=None):
        self.predicates: tuple[str, ...] = tuple(predicates)
        if len(set(self.predicates)) != len(self.predicates):
            raise ValueError("duplicate canonical predicates")
        self.synonym_map = dict(synonym_map or {})
        self._index = {p: i for i, p in enumerate(self.predicates)}
        self.vectors: np.ndarray | None = None

    @classmethod
    def from_store(cls, store: FactStore, synonym_map=None) -> "PredicateVocabulary":
        return cls(store.predicates(), synonym_map)

    def __len__(self):
        return len(self.predicates)

    def __contains__(self, predicate: str):
        return predicate in self._index

    def index(self, predicate: str) -> int:
        """Dense index of a predicate, -1 if outside the vocabulary."""
        return self._index.get(predicate, -1)


@dataclass(frozen=True)
class ContextFact:
    """A candidate fact linked to its subject's slot in the geo context."""

    fact: Fact
    subject_ref: int
    score: float = 0.0


@dataclass(frozen=True)
class KnowledgeContext:
    """Top-m ranked facts; scores non-increasing along the list."""

    facts: tuple[ContextFact, ...]

    def __len__(self):
        return len(self.facts)


def candidate_facts(geo_context: geodata.GeoContext, fact_store: FactStore):
    """All store facts whose subject appears in the geographic context."""
    out = []
    for ref, ce in enumerate(geo_context.entities):
        for fact in fact_store.facts_for(ce.entity.id):
            out.append(ContextFact(fact=fact, subject_ref=ref))
    return out


def featurize_fact(
    cf: ContextFact,
    geo_context: geodata.GeoContext,
    predicate_vocab: PredicateVocabulary,
    strict: bool = True,
) -> np.ndarray:
    """Ranking features: predicate one-hot ++ subject rank and geo features.

    Outside-vocabulary predicates are an error when ``strict`` (training);
    otherwise they produce an all-zero one-hot block (inference).
    """
    ce = geo_context.entities[cf.subject_ref]
    if ce.entity.id != cf.fact.subject_id:
        raise ValueError(
            f"subject_ref {cf.subject_ref} points at {ce.entity.id!r}, "
            f"fact subject is {cf.fact.subject_id!r}"
        )
    vec = np.zeros(len(predicate_vocab) + RANK_EXTRA_FEATURES)
    idx = predicate_vocab.index(cf.fact.predicate)
    if idx < 0:
        if strict:
            raise ValueError(f"predicate {cf.fact.predicate!r} outside the fixed vocabulary")
    else:
        vec[idx] = 1.0
    vec[len(predicate_vocab)] = float(ce.rank)
    vec[len(predicate_vocab) + 1 :] = geodata.context_entity_features(ce)
    return vec


@dataclass
class RankerConfig:
    learning_rate: float | None = None  # None: derived from a smoothness bound
    l2: float = 1e-4
    tol: float = 1e-6
    max_epochs: int = 10_000
    seed: int = 0


@dataclass
class FactRanker:
    """Linear scorer from L2-regularized logistic regression."""

    weights: np.ndarray
    bias: float
    predicates: tuple[str, ...]
    epochs: int = 0
    final_loss: float = float("nan")

    def score(self, features: np.ndarray) -> np.ndarray:
        """Sigmoid-free linear score; monotone in the fitted probability."""
        return np.asarray(features, dtype=np.float64) @ self.weights + self.bias


def _auto_learning_rate(X: np.ndarray, l2: float) -> float:
    # largest curvature of the logistic loss is bounded by sigma_max^2/(4n)+l2;
    # estimate sigma_max with a few deterministic power iterations
    n, f = X.shape
    v = np.full(f, 1.0 / np.sqrt(f))
    for _ in range(25):
        u = X.T @ (X @ v)
        norm = np.linalg.norm(u)
        if norm == 0.0:
            return 1.0
        v = u / norm
    sigma_sq = float(v @ (X.T @ (X @ v)))
    lipschitz = sigma_sq / (4.0 * n) + l2
    return 1.0 / max(lipschitz, 1e-12)


def train_fact_ranker(examples, config: RankerConfig | None = None, predicates=()) -> FactRanker:
    """Fit the ranker by full-batch gradient descent on the log loss.

    ``examples`` is either a list of (feature vector, 0/1 label) pairs or an
    (X, y) tuple of arrays. Training stops when the relative loss change
    drops below ``tol`` or after ``max_epochs`` epochs; with both classes
    present and a fixed config the result is deterministic.
    """
    config = config or RankerConfig()
    if isinstance(examples, tuple) and len(examples) == 2:
        X, y = examples
    else:
        pairs = list(examples)
        if not pairs:
            raise NumericError("degenerate labels: no training examples")
        X = np.stack([np.asarray(f, dtype=np.float64) for f, _ in pairs])
        y = np.array([float(lbl) for _, lbl in pairs])
    X = np.ascontiguousarray(np.asarray(X, dtype=np.float64))
    y = np.ascontiguousarray(np.asarray(y, dtype=np.float64))
    if X.ndim != 2 or X.shape[0] != y.shape[0]:
        raise ValueError(f"bad training shapes {X.shape} vs {y.shape}")
    if X.shape[0] == 0 or np.all(y == y[0]):
        raise NumericError("degenerate labels: need at least one positive and one negative")
    lr = config.learning_rate
    if lr is None:
        lr = _auto_learning_rate(X, config.l2)
    w, b, epochs, loss = _accel.logreg_gd(X, y, lr, config.l2, config.tol, config.max_epochs)
    if not np.isfinite(loss):
        raise NumericError(f"ranker training diverged (loss={loss})")
    return FactRanker(
        weights=np.asarray(w),
        bias=float(b),
        predicates=tuple(predicates),
        epochs=int(epochs),
        final_loss=float(loss),
    )


def build_knowledge_context(
    candidates,
    geo_context: geodata.GeoContext,
    ranker: FactRanker,
    predicate_vocab: PredicateVocabulary,
    m: int = 50,
) -> KnowledgeContext:
    """Score candidates and keep the ``m`` best.

    Ties in the linear score are broken deterministically by subject slot,
    predicate and object label.
    """
    if not candidates:
        return KnowledgeContext(facts=())
    feats = np.stack(
        [featurize_fact(cf, geo_context, predicate_vocab, strict=False) for cf in candidates]
    )
    scores = ranker.score(feats)
    scored = [replace(cf, score=float(s)) for cf, s in zip(candidates, scores)]
    scored.sort(
        key=lambda cf: (-cf.score, cf.subject_ref, cf.fact.predicate, cf.fact.object_label)
    )
    return KnowledgeContext(facts=tuple(scored[:m]))


def fact_embedding(
    cf: ContextFact,
    geo_context: geodata.GeoContext,
    type_embedder: geodata.TypeEmbedder,
    predicate_vocab: PredicateVocabulary,
) -> np.ndarray:
    """Subject's geo embedding plus the predicate embedding, elementwise.

    Predicates outside the vocabulary contribute a zero vector, mirroring
    their all-zero one-hot ranking block.
    """
    if predicate_vocab.vectors is None:
        raise ValueError("predicate vocabulary has no embedding vectors attached")
    subject = geo_context.entities[cf.subject_ref]
    emb = geodata.geo_embedding(subject, type_embedder)
    idx = predicate_vocab.index(cf.fact.predicate)
    if idx >= 0:
        emb = emb + predicate_vocab.vectors[idx]
    return emb


def contains_phrase(tokens, phrase_tokens) -> bool:
    """True when ``phrase_tokens`` occurs contiguously inside ``tokens``."""
    phrase = list(phrase_tokens)
    if not phrase or len(phrase) > len(tokens):
        return False
    first = phrase[0]
    for i in range(len(tokens) - len(phrase) + 1):
        if tokens[i] == first and list(tokens[i : i + len(phrase)]) == phrase:
            return True
    return False


def label_candidates(candidates, geo_context: geodata.GeoContext, caption_tokens) -> np.ndarray:
    """Ranker training labels from a preprocessed ground-truth caption.

    A candidate is positive when its object label and its subject's name
    both occur in the caption token sequence.
    """
    tokens = list(caption_tokens)
    labels = np.zeros(len(candidates))
    for i, cf in enumerate(candidates):
        name = geo_context.entities[cf.subject_ref].entity.name.split()
        obj = cf.fact.object_label.split()
        if contains_phrase(tokens, obj) and contains_phrase(tokens, name):
            labels[i] = 1.0
    return labels
