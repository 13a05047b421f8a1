"""Command line interface.

Subcommands: ingest-geo, ingest-facts, build-contexts, train-ranker, train,
generate, perturb, evaluate, demo. Exit codes: 0 ok, 1 usage error, 2 data
error, 3 numeric failure. Artifacts embed the hash of the configuration
that produced them; re-running a command whose output already carries the
same hash is a no-op unless --force is given. GEOCAP_OUT sets the default
output directory for demo runs.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys

import numpy as np

from . import corpus, evaluation, geodata, knowledge, pipeline, report, synthetic
from .errors import ConfigError, DataFormatError, GeocapError, UsageError
from .model import checkpoint as ckpt_io
from .model.config import ModelConfig, VARIANTS
from .model.training import train_model


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _require_file(path, what: str):
    if not os.path.exists(path):
        raise DataFormatError(f"missing {what}: {path}")
    return path


def _artifact_hash(path) -> str | None:
    """The config hash embedded in an existing artifact, if recognizable."""
    if not os.path.exists(path):
        return None
    try:
        with open(path, "rb") as fh:
            head = fh.read(4096)
        if head[:4] == ckpt_io.MAGIC:
            meta = ckpt_io.load_checkpoint(path).meta
            return meta.get("config_hash")
        text = head.decode("utf-8", errors="replace")
        first = text.splitlines()[0] if text else ""
        if first.startswith("{"):
            return json.loads(first).get("config_hash")
        for line in text.splitlines()[:4]:
            if line.startswith("config_hash: "):
                return line.split(": ", 1)[1]
    except Exception:
        return None
    return None


def _up_to_date(path, config_hash: str, force: bool) -> bool:
    if force:
        return False
    if _artifact_hash(path) == config_hash:
        print(f"{path} is up to date (config hash {config_hash[:12]}); use --force to rebuild")
        return True
    return False


def _hash_file(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        digest.update(fh.read())
    return digest.hexdigest()


# ---------------------------------------------------------------------------
# run configuration files


def load_run_config(path) -> tuple[ModelConfig, dict]:
    """Parse a sectioned key=value run configuration file.

    Sections: [paths] input locations, [run] seed/variant, [model] the
    ModelConfig fields. Returns the model config and the path map.
    """
    import configparser

    parser = configparser.ConfigParser()
    read = parser.read(path)
    if not read:
        raise DataFormatError(f"cannot read config file {path}")
    model_block: dict = {}
    if parser.has_section("model"):
        for key, value in parser.items("model"):
            model_block[key] = value
    if parser.has_section("run"):
        for key in ("seed", "variant"):
            if parser.has_option("run", key):
                model_block[key] = parser.get("run", key)
    numeric = {}
    for key, value in model_block.items():
        if key == "variant":
            numeric[key] = value
        else:
            numeric[key] = float(value) if "." in value or "e" in value.lower() else int(value)
    config = ModelConfig.from_dict(numeric)
    paths = dict(parser.items("paths")) if parser.has_section("paths") else {}
    for key, value in paths.items():
        if key in ("features_dir", "output_dir") or value == "synthetic":
            continue
        if not os.path.exists(value):
            raise DataFormatError(f"config path {key} does not exist: {value}")
    return config, paths


# ---------------------------------------------------------------------------
# commands


def cmd_ingest_geo(args):
    store = geodata.load_entities(_require_file(args.entities, "entity file"))
    lats = [e.location.lat for e in store.entities]
    lons = [e.location.lon for e in store.entities]
    types = {e.type_tag for e in store.entities}
    print(f"entities: {len(store)}")
    if store.entities:
        print(f"lat range: [{min(lats):.4f}, {max(lats):.4f}]")
        print(f"lon range: [{min(lons):.4f}, {max(lons):.4f}]")
    print(f"type tags: {len(types)}")
    return 0


def cmd_ingest_facts(args):
    synonym_map = (
        knowledge.load_synonym_map(_require_file(args.synonyms, "synonym file"))
        if args.synonyms
        else {}
    )
    store = knowledge.load_facts(_require_file(args.triples, "triple file"), synonym_map)
    subjects = {f.subject_id for f in store.facts}
    print(f"facts: {len(store)}")
    print(f"subjects: {len(subjects)}")
    print(f"canonical predicates: {len(store.predicates())}")
    print(f"synonym rules: {len(synonym_map)}")
    return 0


def cmd_build_contexts(args):
    os.makedirs(args.out, exist_ok=True)
    synonym_map = (
        knowledge.load_synonym_map(_require_file(args.synonyms, "synonym file"))
        if args.synonyms
        else {}
    )
    config_hash = pipeline.hash_params(
        {
            "command": "build-contexts",
            "r_km": args.radius_km,
            "n": args.max_entities,
            "synonyms": sorted(synonym_map.items()),
            "dataset": _hash_file(_require_file(args.dataset, "dataset file")),
            "entities": _hash_file(_require_file(args.entities, "entity file")),
            "triples": _hash_file(_require_file(args.triples, "triple file")),
        }
    )
    paths = pipeline.corpus_dir_paths(args.out)
    if _up_to_date(paths["contexts"], config_hash, args.force):
        return 0
    samples = corpus.load_dataset(args.dataset)
    entity_store = geodata.load_entities(args.entities)
    fact_store = knowledge.load_facts(args.triples, synonym_map)
    records = pipeline.build_context_records(
        samples, entity_store, fact_store, args.radius_km, args.max_entities, jobs=args.jobs
    )
    pipeline.write_contexts(
        paths["contexts"],
        records,
        {
            "config_hash": config_hash,
            "seed": 0,
            "r_km": args.radius_km,
            "n": args.max_entities,
            "synonym_map": dict(sorted(synonym_map.items())),
        },
    )
    corpus.save_dataset(paths["samples"], samples)
    n_candidates = sum(len(r.candidates) for r in records)
    print(f"built {len(records)} contexts ({n_candidates} candidate facts) in {args.out}")
    return 0


def cmd_train_ranker(args):
    samples, records, header, _ = pipeline.load_corpus_dir(args.corpus, need_ranker=False)
    out = args.out or pipeline.corpus_dir_paths(args.corpus)["ranker"]
    config = knowledge.RankerConfig(l2=args.l2, tol=args.tol, max_epochs=args.max_epochs,
                                    seed=args.seed)
    config_hash = pipeline.hash_params(
        {
            "command": "train-ranker",
            "upstream": header.get("config_hash"),
            "l2": config.l2,
            "tol": config.tol,
            "max_epochs": config.max_epochs,
            "seed": config.seed,
            "feature_version": pipeline.FEATURE_VERSION,
        }
    )
    if _up_to_date(out, config_hash, args.force):
        return 0
    train_split, _, _ = corpus.split_dataset(samples)
    predicates = sorted(
        {cf.fact.predicate for record in records for cf in record.candidates}
    )
    predicate_vocab = knowledge.PredicateVocabulary(predicates, header.get("synonym_map"))
    X, y = pipeline.ranker_training_data(records, train_split, predicate_vocab)
    ranker = knowledge.train_fact_ranker((X, y), config, predicates=predicates)
    pipeline.save_ranker(out, ranker, {"config_hash": config_hash, "seed": config.seed})
    print(
        f"trained fact ranker on {len(y)} candidates "
        f"({int(y.sum())} positive) in {ranker.epochs} epochs; saved to {out}"
    )
    return 0


def cmd_train(args):
    config, paths = load_run_config(_require_file(args.config, "config file"))
    samples, records, header, ranker = pipeline.load_corpus_dir(args.corpus)
    config_hash = pipeline.hash_params(
        {"command": "train", "upstream": header.get("config_hash"), **config.to_dict()}
    )
    if _up_to_date(args.out, config_hash, args.force):
        return 0
    features_dir = paths.get("features_dir", "synthetic")
    prepared = pipeline.prepare_run(
        samples, records, ranker, header.get("synonym_map"), config, features_dir
    )
    model = pipeline.make_model(prepared)
    track = train_model(model, prepared.train, prepared.validation or None)
    ckpt_io.save_checkpoint(
        args.out,
        model,
        prepared.vocab,
        prepared.predicate_vocab,
        prepared.type_embedder.tags,
        meta={"config_hash": config_hash, "seed": config.seed, "variant": config.variant},
    )
    print(
        f"trained {config.variant} for {track.epochs} epochs "
        f"(best val loss {track.best_val_loss:.4f} at epoch {track.best_epoch}); "
        f"saved {args.out}"
    )
    return 0


def _filter_split(samples, split: str):
    if split == "all":
        return samples
    train, val, test = corpus.split_dataset(samples)
    return {"train": train, "val": val, "test": test}[split]


def cmd_generate(args):
    ckpt = ckpt_io.load_checkpoint(_require_file(args.ckpt, "checkpoint"))
    if args.variant and args.variant != ckpt.config.variant:
        raise ConfigError(
            f"checkpoint was trained as variant {ckpt.config.variant!r}, "
            f"requested {args.variant!r}"
        )
    samples = corpus.load_dataset(_require_file(args.dataset, "dataset file"))
    _, records, header, ranker = pipeline.load_corpus_dir(args.corpus)
    config_hash = pipeline.hash_params(
        {
            "command": "generate",
            "checkpoint": ckpt.meta.get("config_hash"),
            "upstream": header.get("config_hash"),
            "split": args.split,
        }
    )
    if _up_to_date(args.out, config_hash, args.force):
        return 0
    model = ckpt_io.restore_model(ckpt)
    subset = _filter_split(samples, args.split)
    by_id = {r.image_id: r for r in records}
    missing = [s.image_id for s in subset if s.image_id not in by_id]
    if missing:
        raise DataFormatError(f"no contexts for image ids: {missing}")
    predicate_vocab = ckpt.predicate_vocab
    kctx = (
        pipeline.build_knowledge_contexts(
            [by_id[s.image_id] for s in subset], ranker, predicate_vocab, ckpt.config.m
        )
        if ckpt.config.has_knowledge
        else {}
    )
    type_embedder = geodata.TypeEmbedder(ckpt.type_tags, ckpt.config.d_type)
    type_embedder.table = model.type_table.data  # share the trained rows
    rows = []
    for sample in subset:
        s_input = pipeline.make_sample_input(
            sample, by_id[sample.image_id], kctx.get(sample.image_id), ckpt.vocab,
            type_embedder, predicate_vocab, ckpt.config,
            args.features or "synthetic", caption=None,
        )
        rows.append((sample.image_id, model.generate(s_input, ckpt.vocab)))
    pipeline.write_captions(
        args.out,
        rows,
        {
            "config_hash": config_hash,
            "seed": ckpt.seed,
            "variant": ckpt.config.variant,
            "split": args.split,
        },
    )
    print(f"generated {len(rows)} captions ({ckpt.config.variant}, split={args.split}) to {args.out}")
    return 0


def cmd_perturb(args):
    rows, header = pipeline.read_captions(_require_file(args.captions, "captions file"))
    samples, records, ctx_header, ranker = pipeline.load_corpus_dir(args.corpus)
    config_hash = pipeline.hash_params(
        {
            "command": "perturb",
            "captions": header.get("config_hash"),
            "upstream": ctx_header.get("config_hash"),
            "seed": args.seed,
        }
    )
    if _up_to_date(args.out, config_hash, args.force):
        return 0
    predicates = sorted({cf.fact.predicate for r in records for cf in r.candidates})
    predicate_vocab = knowledge.PredicateVocabulary(predicates, ctx_header.get("synonym_map"))
    kctx = pipeline.build_knowledge_contexts(records, ranker, predicate_vocab, args.m)
    contexts = pipeline.eval_contexts(records, kctx)
    perturbed, unchanged = evaluation.random_fact_baseline(rows, contexts, args.seed)
    pipeline.write_captions(
        args.out,
        perturbed,
        {"config_hash": config_hash, "seed": args.seed, "perturbed_from": header.get("config_hash")},
    )
    note = f" ({unchanged} tokens had no same-class candidate)" if unchanged else ""
    print(f"perturbed {len(perturbed)} captions to {args.out}{note}")
    return 0


def cmd_evaluate(args):
    rows, header = pipeline.read_captions(_require_file(args.captions, "captions file"))
    samples, records, ctx_header, ranker = pipeline.load_corpus_dir(args.corpus)
    lexicon = evaluation.load_lexicon(_require_file(args.lexicon, "lexicon file"))
    config_hash = pipeline.hash_params(
        {
            "command": "evaluate",
            "captions": header.get("config_hash"),
            "upstream": ctx_header.get("config_hash"),
            "lexicon": _hash_file(args.lexicon),
            "compare": _hash_file(args.compare) if args.compare else None,
        }
    )
    if _up_to_date(args.report, config_hash, args.force):
        return 0
    by_id = {s.image_id: s for s in samples}
    missing = sorted(image_id for image_id, _ in rows if image_id not in by_id)
    if missing:
        raise DataFormatError(f"captions reference unknown image ids: {missing}")
    predicates = sorted({cf.fact.predicate for r in records for cf in r.candidates})
    predicate_vocab = knowledge.PredicateVocabulary(predicates, ctx_header.get("synonym_map"))
    kctx = pipeline.build_knowledge_contexts(records, ranker, predicate_vocab, args.m)
    contexts = pipeline.eval_contexts(records, kctx)
    result = evaluate_rows(rows, by_id, contexts, lexicon,
                           seed=int(header.get("seed", 0)), config_hash=config_hash)
    if args.compare:
        other_rows, _ = pipeline.read_captions(args.compare)
        result.significance = compare_significance(rows, other_rows, by_id)
    text = report.format_report(result)
    with open(args.report, "w", encoding="utf-8") as fh:
        fh.write(text)
    print(text, end="")
    return 0


def evaluate_rows(rows, samples_by_id, contexts, lexicon, seed=0, config_hash=""):
    """Score generated captions against ground truth and contexts."""
    if not rows:
        raise DataFormatError("no captions to evaluate")
    cands = [tc.surface_tokens() for _, tc in rows]
    refs = [
        corpus.preprocess_caption(samples_by_id[image_id].caption_raw) for image_id, _ in rows
    ]
    fact_rep = evaluation.fact_accuracy(rows, contexts, lexicon)
    surface_rep = evaluation.surface_fact_accuracy(rows, contexts, lexicon)
    return report.MetricReport(
        bleu1=evaluation.bleu(cands, refs, 1),
        bleu2=evaluation.bleu(cands, refs, 2),
        bleu3=evaluation.bleu(cands, refs, 3),
        bleu4=evaluation.bleu(cands, refs, 4),
        rouge_l=evaluation.rouge_l(cands, refs),
        meteor=evaluation.meteor_simplified(cands, refs),
        cider=evaluation.cider(cands, refs),
        fact_accuracy=fact_rep.percentage,
        facts_generated=fact_rep.generated,
        facts_correct=fact_rep.correct,
        surface_fact_accuracy=surface_rep.percentage,
        surface_facts_generated=surface_rep.generated,
        surface_facts_correct=surface_rep.correct,
        config_hash=config_hash,
        seed=seed,
        verdicts=fact_rep.verdicts + surface_rep.verdicts,
    )


def compare_significance(rows_a, rows_b, samples_by_id):
    """Welch t-tests over per-sample decomposable metrics of two runs."""
    common = sorted(
        {i for i, _ in rows_a} & {i for i, _ in rows_b} & set(samples_by_id)
    )
    a_by = dict(rows_a)
    b_by = dict(rows_b)
    refs = [corpus.preprocess_caption(samples_by_id[i].caption_raw) for i in common]
    ca = [a_by[i].surface_tokens() for i in common]
    cb = [b_by[i].surface_tokens() for i in common]
    out = []
    for name, fn in (
        ("rouge_l", evaluation.rouge_l_scores),
        ("meteor", evaluation.meteor_scores),
        ("cider", evaluation.cider_scores),
    ):
        t_stat, p_value = evaluation.paired_ttest(fn(ca, refs), fn(cb, refs))
        out.append((name, t_stat, p_value))
    return out


def cmd_demo(args):
    out_dir = args.out or os.environ.get("GEOCAP_OUT") or "geocap-demo"
    corpus_dir = os.path.join(out_dir, "corpus")
    run_dir = os.path.join(out_dir, "run")
    os.makedirs(run_dir, exist_ok=True)
    paths = synthetic.generate_corpus(corpus_dir, n_samples=args.samples, seed=args.seed)

    ns = argparse.Namespace(
        dataset=paths.dataset, entities=paths.entities, triples=paths.facts,
        synonyms=paths.synonyms, out=run_dir, radius_km=1.0, max_entities=300,
        jobs=1, force=args.force,
    )
    cmd_build_contexts(ns)
    cmd_train_ranker(
        argparse.Namespace(
            corpus=run_dir, out=None, l2=1e-4, tol=1e-6, max_epochs=10_000,
            seed=args.seed, force=args.force,
        )
    )

    config = ModelConfig.tiny(seed=args.seed)
    config.max_epochs = 200
    samples, records, header, ranker = pipeline.load_corpus_dir(run_dir)
    config_hash = pipeline.hash_params(
        {"command": "train", "upstream": header.get("config_hash"), **config.to_dict()}
    )
    ckpt_path = os.path.join(run_dir, "model.ckpt")
    if not _up_to_date(ckpt_path, config_hash, args.force):
        prepared = pipeline.prepare_run(
            samples, records, ranker, header.get("synonym_map"), config, "synthetic"
        )
        model = pipeline.make_model(prepared)
        track = train_model(model, prepared.train, prepared.validation or None,
                            stop_train_loss=0.05)
        ckpt_io.save_checkpoint(
            ckpt_path, model, prepared.vocab, prepared.predicate_vocab,
            prepared.type_embedder.tags,
            meta={"config_hash": config_hash, "seed": config.seed, "variant": config.variant},
        )
        print(f"demo model trained for {track.epochs} epochs")

    captions_path = os.path.join(run_dir, "captions.jsonl")
    cmd_generate(
        argparse.Namespace(
            ckpt=ckpt_path, dataset=paths.dataset, corpus=run_dir, out=captions_path,
            variant=None, split="test", features="synthetic", force=args.force,
        )
    )
    report_path = os.path.join(run_dir, "report.txt")
    cmd_evaluate(
        argparse.Namespace(
            captions=captions_path, corpus=run_dir, lexicon=paths.lexicon,
            report=report_path, compare=None, m=config.m, force=args.force,
        )
    )
    return 0


# ---------------------------------------------------------------------------
# argument wiring


def build_parser() -> _Parser:
    parser = _Parser(prog="geocap", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest-geo", help="validate and summarize an entity snapshot")
    p.add_argument("--entities", required=True)
    p.set_defaults(fn=cmd_ingest_geo)

    p = sub.add_parser("ingest-facts", help="validate and summarize a triple snapshot")
    p.add_argument("--triples", required=True)
    p.add_argument("--synonyms")
    p.set_defaults(fn=cmd_ingest_facts)

    p = sub.add_parser("build-contexts", help="build per-image geo contexts and candidates")
    p.add_argument("--dataset", required=True)
    p.add_argument("--entities", required=True)
    p.add_argument("--triples", required=True)
    p.add_argument("--synonyms")
    p.add_argument("--out", required=True)
    p.add_argument("--radius-km", type=float, default=1.0)
    p.add_argument("--max-entities", type=int, default=300)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--force", action="store_true")
    p.set_defaults(fn=cmd_build_contexts)

    p = sub.add_parser("train-ranker", help="fit the fact ranker from the training split")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out")
    p.add_argument("--l2", type=float, default=1e-4)
    p.add_argument("--tol", type=float, default=1e-6)
    p.add_argument("--max-epochs", type=int, default=10_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--force", action="store_true")
    p.set_defaults(fn=cmd_train_ranker)

    p = sub.add_parser("train", help="train the captioner")
    p.add_argument("--config", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("generate", help="greedy caption generation from a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--variant", choices=VARIANTS)
    p.add_argument("--split", choices=("all", "train", "val", "test"), default="all")
    p.add_argument("--features", default="synthetic")
    p.add_argument("--force", action="store_true")
    p.set_defaults(fn=cmd_generate)

    p = sub.add_parser("perturb", help="random-fact baseline transform of a captions file")
    p.add_argument("--captions", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--m", type=int, default=50)
    p.add_argument("--force", action="store_true")
    p.set_defaults(fn=cmd_perturb)

    p = sub.add_parser("evaluate", help="score a captions file and write a report")
    p.add_argument("--captions", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--lexicon", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--compare")
    p.add_argument("--m", type=int, default=50)
    p.add_argument("--force", action="store_true")
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("demo", help="synthesize a corpus, train, generate and evaluate")
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--samples", type=int, default=30)
    p.add_argument("--out")
    p.add_argument("--force", action="store_true")
    p.set_defaults(fn=cmd_demo)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.fn(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return exc.exit_code
    except GeocapError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
