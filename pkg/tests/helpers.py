"""Shared fixtures: a tiny in-memory world wired exactly like the pipeline."""

from dataclasses import dataclass

import numpy as np

from geocap import corpus, geodata, knowledge, pipeline
from geocap.geodata import EntityStore, GeoEntity, GeoPoint, TypeEmbedder
from geocap.knowledge import Fact, FactRanker, FactStore, PredicateVocabulary
from geocap.model.captioner import CaptionModel, SampleInput
from geocap.model.config import ModelConfig

IMAGE_POINT = GeoPoint(51.5, -0.13)

DEFAULT_ENTITIES = [
    ("tr", "theatre royal", 51.5008, -0.1302, 120.0, "theatre"),
    ("hm", "haymarket hall", 51.5011, -0.1295, 80.0, "hall"),
    ("rv", "river house", 51.4989, -0.1312, 45.0, "house"),
]

DEFAULT_FACTS = [
    ("tr", "built_in", "1720"),
    ("tr", "architect", "john nash"),
    ("tr", "rebuilt", "1879"),
    ("hm", "opened", "1821"),
    ("rv", "built_in", "1903"),
]

DEFAULT_CAPTION = "theatre royal . dating back to 1720 ."


@dataclass
class TinyWorld:
    config: ModelConfig
    model: CaptionModel
    vocab: corpus.Vocabulary
    predicate_vocab: PredicateVocabulary
    type_embedder: TypeEmbedder
    geo: geodata.GeoContext
    kctx: knowledge.KnowledgeContext
    sample: SampleInput
    dataset_sample: corpus.Sample
    record: pipeline.ContextRecord
    linked: corpus.TokenizedCaption


def build_world(
    variant="full",
    seed=0,
    dtype=np.float32,
    d=32,
    heads=2,
    layers=1,
    ff_dim=32,
    dropout=0.0,
    caption=DEFAULT_CAPTION,
    entities=None,
    facts=None,
    image_positions=2,
    image_channels=8,
    max_caption_len=40,
) -> TinyWorld:
    config = ModelConfig(
        d=d,
        enc_layers=layers,
        dec_layers=layers,
        heads=heads,
        ff_dim=ff_dim,
        dropout=dropout,
        image_positions=image_positions,
        image_channels=image_channels,
        max_caption_len=max_caption_len,
        variant=variant,
        seed=seed,
    )
    store = EntityStore(
        [
            GeoEntity(i, n, GeoPoint(lat, lon), size, tag)
            for i, n, lat, lon, size, tag in (entities or DEFAULT_ENTITIES)
        ]
    )
    fact_store = FactStore([Fact(*row) for row in (facts or DEFAULT_FACTS)])
    geo = geodata.build_geo_context(store, IMAGE_POINT, r_km=1.0, n=300, fact_store=fact_store)
    predicate_vocab = PredicateVocabulary(fact_store.predicates())
    ranker = FactRanker(
        weights=np.zeros(len(predicate_vocab) + knowledge.RANK_EXTRA_FEATURES),
        bias=0.0,
        predicates=predicate_vocab.predicates,
    )
    kctx = knowledge.build_knowledge_context(
        knowledge.candidate_facts(geo, fact_store), geo, ranker, predicate_vocab, m=50
    )
    dataset_sample = corpus.Sample("img0", IMAGE_POINT, caption, "synthetic")
    record = pipeline.ContextRecord(
        image_id="img0", geo=geo, candidates=knowledge.candidate_facts(geo, fact_store)
    )
    linked = pipeline.link_for_variant(dataset_sample, record, kctx, variant)
    vocab = corpus.build_vocabulary([linked], dim=config.d, seed=seed)
    tags = sorted({ce.entity.type_tag for ce in geo.entities}) if config.has_geo_context else []
    type_embedder = TypeEmbedder(tags, config.d_type, seed=seed, dtype=dtype)
    sample = pipeline.make_sample_input(
        dataset_sample, record, kctx, vocab, type_embedder, predicate_vocab,
        config, "synthetic", linked, dtype,
    )
    model = CaptionModel(config, vocab, type_embedder.table, len(predicate_vocab), dtype)
    type_embedder.table = model.type_table.data
    if model.pred_table is not None:
        predicate_vocab.vectors = model.pred_table.data
    return TinyWorld(
        config=config,
        model=model,
        vocab=vocab,
        predicate_vocab=predicate_vocab,
        type_embedder=type_embedder,
        geo=geo,
        kctx=kctx,
        sample=sample,
        dataset_sample=dataset_sample,
        record=record,
        linked=linked,
    )
