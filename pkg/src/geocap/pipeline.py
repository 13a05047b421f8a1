"""End-to-end orchestration: contexts, ranking, linking, model data, runs.

The on-disk run layout is a corpus directory produced by ``build-contexts``
(context records, a copy of the samples, metadata) that ``train-ranker``
extends with the fitted ranker. Training, generation and evaluation all
work from that directory. Every artifact embeds the hash of the
configuration that produced it plus the seed, so identical invocations are
detectable and byte-identical.
"""

from __future__ import annotations

import hashlib
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import corpus, geodata, knowledge
from .corpus import Sample, TokenizedCaption, TokenKind, Vocabulary
from .errors import ConfigError, DataFormatError
from .evaluation import EvalContext, EvalFact
from .geodata import ContextEntity, GeoContext, GeoEntity, GeoPoint, TypeEmbedder
from .knowledge import ContextFact, Fact, FactRanker, KnowledgeContext, PredicateVocabulary
from .model.captioner import CaptionModel, SampleInput, indicator_matrices
from .model.config import ModelConfig

CONTEXTS_FILE = "contexts.jsonl"
SAMPLES_FILE = "samples.tsv"
RANKER_FILE = "ranker.json"
FEATURE_VERSION = "one_hot+rank+geo.v1"


def hash_params(params: dict) -> str:
    """Stable hash over configuration key/value pairs (never over paths)."""
    lines = [f"{k}={params[k]!r}" for k in sorted(params)]
    return hashlib.sha256("\n".join(lines).encode("utf-8")).hexdigest()


# ---------------------------------------------------------------------------
# context records


@dataclass
class ContextRecord:
    image_id: str
    geo: GeoContext
    candidates: list[ContextFact]


def _build_one_context(sample: Sample, entity_store, fact_store, r_km, n) -> ContextRecord:
    geo = geodata.build_geo_context(entity_store, sample.location, r_km, n, fact_store)
    return ContextRecord(
        image_id=sample.image_id,
        geo=geo,
        candidates=knowledge.candidate_facts(geo, fact_store),
    )


_WORKER_STATE: dict = {}


def _init_worker(entity_store, fact_store, r_km, n):  # pragma: no cover - subprocess
    _WORKER_STATE.update(es=entity_store, fs=fact_store, r=r_km, n=n)


def _worker_build(sample):  # pragma: no cover - subprocess
    return _build_one_context(
        sample, _WORKER_STATE["es"], _WORKER_STATE["fs"], _WORKER_STATE["r"], _WORKER_STATE["n"]
    )


def build_context_records(samples, entity_store, fact_store, r_km=1.0, n=300, jobs=1):
    """Geo context and candidate facts for every sample, in sample order."""
    if jobs > 1:
        with ProcessPoolExecutor(
            max_workers=jobs,
            initializer=_init_worker,
            initargs=(entity_store, fact_store, r_km, n),
        ) as pool:
            return list(pool.map(_worker_build, samples, chunksize=8))
    return [_build_one_context(s, entity_store, fact_store, r_km, n) for s in samples]


def _record_to_json(record: ContextRecord) -> dict:
    return {
        "image_id": record.image_id,
        "location": [record.geo.image_location.lat, record.geo.image_location.lon],
        "entities": [
            {
                "id": ce.entity.id,
                "name": ce.entity.name,
                "lat": ce.entity.location.lat,
                "lon": ce.entity.location.lon,
                "size": ce.entity.size,
                "type": ce.entity.type_tag,
                "distance_km": ce.distance_km,
                "azimuth_deg": ce.azimuth_deg,
                "has_facts": ce.has_facts,
                "fact_count": ce.fact_count,
            }
            for ce in record.geo.entities
        ],
        "candidates": [
            {"subject_ref": cf.subject_ref, "predicate": cf.fact.predicate, "object": cf.fact.object_label}
            for cf in record.candidates
        ],
    }


def _record_from_json(data: dict) -> ContextRecord:
    location = GeoPoint(*data["location"])
    entities = []
    for rank, e in enumerate(data["entities"]):
        entities.append(
            ContextEntity(
                entity=GeoEntity(
                    id=e["id"],
                    name=e["name"],
                    location=GeoPoint(e["lat"], e["lon"]),
                    size=e["size"],
                    type_tag=e["type"],
                ),
                distance_km=e["distance_km"],
                azimuth_deg=e["azimuth_deg"],
                has_facts=e["has_facts"],
                fact_count=e["fact_count"],
                rank=rank,
            )
        )
    geo = GeoContext(image_location=location, entities=tuple(entities))
    candidates = [
        ContextFact(
            fact=Fact(
                subject_id=geo.entities[c["subject_ref"]].entity.id,
                predicate=c["predicate"],
                object_label=c["object"],
            ),
            subject_ref=c["subject_ref"],
        )
        for c in data["candidates"]
    ]
    return ContextRecord(image_id=data["image_id"], geo=geo, candidates=candidates)


def _dump_json(data: dict) -> str:
    return json.dumps(data, sort_keys=True, separators=(",", ":"))


def write_contexts(path, records, meta: dict) -> None:
    header = {"geocap": "contexts", "version": 1}
    header.update(meta)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(_dump_json(header) + "\n")
        for record in records:
            fh.write(_dump_json(_record_to_json(record)) + "\n")


def read_contexts(path):
    try:
        fh = open(path, encoding="utf-8")
    except OSError as exc:
        raise DataFormatError(f"cannot read contexts file {path}: {exc}") from exc
    with fh:
        lines = fh.read().splitlines()
    if not lines:
        raise DataFormatError(f"{path}: empty contexts file")
    header = json.loads(lines[0])
    if header.get("geocap") != "contexts":
        raise DataFormatError(f"{path}: not a contexts file")
    records = [_record_from_json(json.loads(line)) for line in lines[1:] if line.strip()]
    return records, header


# ---------------------------------------------------------------------------
# ranker artifacts


def save_ranker(path, ranker: FactRanker, meta: dict) -> None:
    payload = {
        "geocap": "ranker",
        "version": 1,
        "feature_version": FEATURE_VERSION,
        "weights": [float(w) for w in ranker.weights],
        "bias": ranker.bias,
        "predicates": list(ranker.predicates),
        "epochs": ranker.epochs,
        "final_loss": ranker.final_loss,
    }
    payload.update(meta)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(_dump_json(payload) + "\n")


def load_ranker(path) -> tuple[FactRanker, dict]:
    try:
        with open(path, encoding="utf-8") as fh:
            payload = json.load(fh)
    except OSError as exc:
        raise DataFormatError(f"cannot read ranker file {path}: {exc}") from exc
    if payload.get("geocap") != "ranker":
        raise DataFormatError(f"{path}: not a ranker file")
    if payload.get("feature_version") != FEATURE_VERSION:
        raise ConfigError(
            f"{path}: ranker feature version {payload.get('feature_version')!r} "
            f"does not match {FEATURE_VERSION!r}"
        )
    ranker = FactRanker(
        weights=np.array(payload["weights"], dtype=np.float64),
        bias=float(payload["bias"]),
        predicates=tuple(payload["predicates"]),
        epochs=int(payload.get("epochs", 0)),
        final_loss=float(payload.get("final_loss", float("nan"))),
    )
    return ranker, payload


def ranker_training_data(records, samples, predicate_vocab: PredicateVocabulary):
    """Features and caption-derived labels over all candidate facts."""
    by_id = {r.image_id: r for r in records}
    features = []
    labels = []
    for sample in samples:
        record = by_id[sample.image_id]
        if not record.candidates:
            continue
        tokens = corpus.preprocess_caption(sample.caption_raw)
        y = knowledge.label_candidates(record.candidates, record.geo, tokens)
        for cf, lbl in zip(record.candidates, y):
            features.append(knowledge.featurize_fact(cf, record.geo, predicate_vocab))
            labels.append(float(lbl))
    if not features:
        raise DataFormatError("no candidate facts found for ranker training")
    return np.stack(features), np.array(labels)


def build_knowledge_contexts(records, ranker, predicate_vocab, m=50):
    return {
        r.image_id: knowledge.build_knowledge_context(
            r.candidates, r.geo, ranker, predicate_vocab, m
        )
        for r in records
    }


# ---------------------------------------------------------------------------
# variant-aware linking and model inputs


def link_for_variant(sample: Sample, record: ContextRecord,
                     kctx: KnowledgeContext | None, variant: str) -> TokenizedCaption:
    tokens = corpus.preprocess_caption(sample.caption_raw)
    geo = record.geo if variant != "no_knowledge" else None
    know = kctx if variant in ("full", "no_p_ind", "no_g_ind") else None
    return corpus.link_caption(tokens, geo, know)


def caption_to_hybrid(tc: TokenizedCaption, vocab: Vocabulary, n_geo: int) -> np.ndarray:
    """Indices of caption tokens in the combined [vocab | geo | fact] space."""
    out = np.zeros(len(tc), dtype=np.int64)
    for i, (kind, ref) in enumerate(zip(tc.kinds, tc.refs)):
        if kind == TokenKind.VOCAB:
            out[i] = ref
        elif kind == TokenKind.ENTITY:
            out[i] = len(vocab) + ref
        else:
            out[i] = len(vocab) + n_geo + ref
    return out


def make_sample_input(
    sample: Sample,
    record: ContextRecord,
    kctx: KnowledgeContext | None,
    vocab: Vocabulary,
    type_embedder: TypeEmbedder,
    predicate_vocab: PredicateVocabulary,
    config: ModelConfig,
    features_dir,
    caption: TokenizedCaption | None,
    dtype=np.float32,
) -> SampleInput:
    image = corpus.resolve_image_features(
        sample, features_dir, config.image_positions, config.image_channels
    )
    if config.has_geo_context:
        entities = record.geo.entities
        geo_feats = (
            np.stack([geodata.context_entity_features(ce) for ce in entities]).astype(dtype)
            if entities
            else np.zeros((0, geodata.NUM_SCALAR_FEATURES), dtype=dtype)
        )
        type_idx = np.array([type_embedder.index(ce.entity.type_tag) for ce in entities],
                            dtype=np.int64)
        geo_names = tuple(ce.entity.name for ce in entities)
    else:
        geo_feats = np.zeros((0, geodata.NUM_SCALAR_FEATURES), dtype=dtype)
        type_idx = np.zeros(0, dtype=np.int64)
        geo_names = ()
    if config.has_knowledge and kctx is not None:
        subj = np.array([cf.subject_ref for cf in kctx.facts], dtype=np.int64)
        preds = np.array(
            [predicate_vocab.index(cf.fact.predicate) for cf in kctx.facts], dtype=np.int64
        )
        objects = tuple(cf.fact.object_label for cf in kctx.facts)
    else:
        subj = np.zeros(0, dtype=np.int64)
        preds = np.zeros(0, dtype=np.int64)
        objects = ()
    s = SampleInput(
        image_id=sample.image_id,
        image_features=image.astype(dtype),
        geo_features=geo_feats,
        type_indices=type_idx,
        geo_names=geo_names,
        fact_subject_refs=subj,
        fact_pred_indices=preds,
        fact_objects=objects,
    )
    if caption is not None:
        resolved = corpus.resolve_vocab_refs(caption, vocab)
        hybrid = caption_to_hybrid(resolved, vocab, len(geo_names))
        s.input_indices = np.concatenate([[Vocabulary.BOS], hybrid]).astype(np.int64)
        s.targets = np.concatenate([hybrid, [Vocabulary.EOS]]).astype(np.int64)
        p_mat, g_mat = indicator_matrices(
            resolved, subj, preds, len(predicate_vocab), dtype
        )
        s.p_ind = p_mat
        s.g_ind = g_mat
        s.caption = resolved
    return s


@dataclass
class PreparedRun:
    """Everything needed to train or generate for one variant."""

    config: ModelConfig
    vocab: Vocabulary
    type_embedder: TypeEmbedder
    predicate_vocab: PredicateVocabulary
    records: dict
    knowledge_contexts: dict
    train: list[SampleInput]
    validation: list[SampleInput]
    test: list[SampleInput]


def prepare_run(samples, records, ranker, synonym_map, config: ModelConfig,
                features_dir=None, dtype=np.float32) -> PreparedRun:
    """Split, link, build vocabulary and assemble model inputs for a run."""
    by_id = {r.image_id: r for r in records}
    missing = [s.image_id for s in samples if s.image_id not in by_id]
    if missing:
        raise DataFormatError(f"samples without contexts: {missing[:5]} (+{max(0, len(missing)-5)} more)")
    predicate_vocab = PredicateVocabulary(ranker.predicates, synonym_map)
    kctx = (
        build_knowledge_contexts(records, ranker, predicate_vocab, config.m)
        if config.has_knowledge
        else {}
    )
    train_s, val_s, test_s = corpus.split_dataset(samples)
    linked = {
        s.image_id: link_for_variant(s, by_id[s.image_id], kctx.get(s.image_id), config.variant)
        for s in samples
    }
    vocab = corpus.build_vocabulary(
        [linked[s.image_id] for s in train_s], dim=config.d, min_count=1, seed=config.seed
    )
    type_tags = sorted(
        {
            ce.entity.type_tag
            for s in train_s
            for ce in by_id[s.image_id].geo.entities
        }
        if config.has_geo_context
        else set()
    )
    type_embedder = TypeEmbedder(type_tags, config.d_type, seed=config.seed, dtype=dtype)

    def build(subset):
        return [
            make_sample_input(
                s, by_id[s.image_id], kctx.get(s.image_id), vocab, type_embedder,
                predicate_vocab, config, features_dir, linked[s.image_id], dtype,
            )
            for s in subset
        ]

    return PreparedRun(
        config=config,
        vocab=vocab,
        type_embedder=type_embedder,
        predicate_vocab=predicate_vocab,
        records=by_id,
        knowledge_contexts=kctx,
        train=build(train_s),
        validation=build(val_s),
        test=build(test_s),
    )


def make_model(prepared: PreparedRun, dtype=np.float32) -> CaptionModel:
    model = CaptionModel(
        prepared.config,
        prepared.vocab,
        prepared.type_embedder.table,
        n_predicates=len(prepared.predicate_vocab),
        dtype=dtype,
    )
    # share the live tables so the pure embedding functions see trained values
    prepared.type_embedder.table = model.type_table.data
    if model.pred_table is not None:
        prepared.predicate_vocab.vectors = model.pred_table.data
    return model


# ---------------------------------------------------------------------------
# captions files and evaluation inputs


def write_captions(path, rows, meta: dict) -> None:
    header = {"geocap": "captions", "version": 1}
    header.update(meta)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(_dump_json(header) + "\n")
        for image_id, tc in rows:
            fh.write(
                _dump_json(
                    {
                        "image_id": image_id,
                        "tokens": list(tc.tokens),
                        "kinds": [int(k) for k in tc.kinds],
                        "refs": [int(r) for r in tc.refs],
                    }
                )
                + "\n"
            )


def read_captions(path):
    try:
        with open(path, encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise DataFormatError(f"cannot read captions file {path}: {exc}") from exc
    if not lines:
        raise DataFormatError(f"{path}: empty captions file")
    header = json.loads(lines[0])
    if header.get("geocap") != "captions":
        raise DataFormatError(f"{path}: not a captions file")
    rows = []
    for line in lines[1:]:
        if not line.strip():
            continue
        data = json.loads(line)
        rows.append(
            (
                data["image_id"],
                TokenizedCaption(
                    tuple(data["tokens"]), tuple(data["kinds"]), tuple(data["refs"])
                ),
            )
        )
    return rows, header


def eval_contexts(records, knowledge_contexts) -> dict[str, EvalContext]:
    """Per-image context snapshots for the fact metrics."""
    out = {}
    for record in records:
        kctx = knowledge_contexts.get(record.image_id)
        facts = tuple(
            EvalFact(
                subject_ref=cf.subject_ref,
                subject_id=record.geo.entities[cf.subject_ref].entity.id,
                subject_name=record.geo.entities[cf.subject_ref].entity.name,
                predicate=cf.fact.predicate,
                object_label=cf.fact.object_label,
            )
            for cf in (kctx.facts if kctx is not None else ())
        )
        out[record.image_id] = EvalContext(
            image_id=record.image_id,
            entity_ids=tuple(ce.entity.id for ce in record.geo.entities),
            entity_names=tuple(ce.entity.name for ce in record.geo.entities),
            facts=facts,
        )
    return out


# ---------------------------------------------------------------------------
# corpus directory conventions


def corpus_dir_paths(corpus_dir: str) -> dict[str, str]:
    return {
        "contexts": os.path.join(corpus_dir, CONTEXTS_FILE),
        "samples": os.path.join(corpus_dir, SAMPLES_FILE),
        "ranker": os.path.join(corpus_dir, RANKER_FILE),
    }


def load_corpus_dir(corpus_dir: str, need_ranker: bool = True):
    """Samples, context records, metadata and (optionally) the ranker."""
    paths = corpus_dir_paths(corpus_dir)
    for key in ("contexts", "samples"):
        if not os.path.exists(paths[key]):
            raise DataFormatError(f"missing {paths[key]}; run build-contexts first")
    samples = corpus.load_dataset(paths["samples"])
    records, header = read_contexts(paths["contexts"])
    ranker = None
    if need_ranker:
        if not os.path.exists(paths["ranker"]):
            raise DataFormatError(f"missing {paths['ranker']}; run train-ranker first")
        ranker, _ = load_ranker(paths["ranker"])
    return samples, records, header, ranker
