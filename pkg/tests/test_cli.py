import os

import pytest

from geocap import pipeline
from geocap.cli import main
from geocap.corpus import TokenizedCaption, TokenKind
from geocap.report import parse_report
from geocap.synthetic import generate_corpus


@pytest.fixture(scope="module")
def corpus_paths(tmp_path_factory):
    out = tmp_path_factory.mktemp("clicorpus")
    return generate_corpus(str(out), n_samples=16, seed=5)


@pytest.fixture(scope="module")
def built_run(tmp_path_factory, corpus_paths):
    run_dir = str(tmp_path_factory.mktemp("clirun"))
    rc = main(
        [
            "build-contexts",
            "--dataset", corpus_paths.dataset,
            "--entities", corpus_paths.entities,
            "--triples", corpus_paths.facts,
            "--synonyms", corpus_paths.synonyms,
            "--out", run_dir,
        ]
    )
    assert rc == 0
    assert main(["train-ranker", "--corpus", run_dir]) == 0
    return run_dir


def write_config(path, seed=3, variant="full", max_epochs=40):
    path.write_text(
        "[run]\n"
        f"seed = {seed}\n"
        f"variant = {variant}\n"
        "[model]\n"
        "d = 64\n"
        "enc_layers = 1\n"
        "dec_layers = 1\n"
        "heads = 2\n"
        "ff_dim = 128\n"
        "dropout = 0.0\n"
        "lr = 2e-3\n"
        f"max_epochs = {max_epochs}\n"
        "image_positions = 4\n"
        "image_channels = 16\n"
        "[paths]\n"
        "features_dir = synthetic\n"
    )


class TestIngestCommands:
    def test_ingest_geo(self, corpus_paths, capsys):
        assert main(["ingest-geo", "--entities", corpus_paths.entities]) == 0
        assert "entities:" in capsys.readouterr().out

    def test_ingest_facts(self, corpus_paths, capsys):
        rc = main(
            ["ingest-facts", "--triples", corpus_paths.facts, "--synonyms", corpus_paths.synonyms]
        )
        assert rc == 0
        assert "canonical predicates" in capsys.readouterr().out

    def test_missing_file_names_path(self, capsys):
        rc = main(["ingest-geo", "--entities", "/no/such/file.tsv"])
        assert rc == 2
        assert "/no/such/file.tsv" in capsys.readouterr().err

    def test_usage_error_exit_code(self):
        assert main(["definitely-not-a-command"]) == 1
        assert main(["ingest-geo"]) == 1  # missing required flag


class TestBuildAndSkip:
    def test_rerun_is_noop_without_force(self, built_run, corpus_paths, capsys):
        rc = main(
            [
                "build-contexts",
                "--dataset", corpus_paths.dataset,
                "--entities", corpus_paths.entities,
                "--triples", corpus_paths.facts,
                "--synonyms", corpus_paths.synonyms,
                "--out", built_run,
            ]
        )
        assert rc == 0
        assert "up to date" in capsys.readouterr().out

    def test_contexts_embed_hash_and_seed(self, built_run):
        _, header = pipeline.read_contexts(os.path.join(built_run, "contexts.jsonl"))
        assert header["config_hash"] and "seed" in header

    def test_parallel_jobs_identical_output(self, built_run, corpus_paths, tmp_path, capsys):
        other = str(tmp_path / "jobs2")
        rc = main(
            [
                "build-contexts",
                "--dataset", corpus_paths.dataset,
                "--entities", corpus_paths.entities,
                "--triples", corpus_paths.facts,
                "--synonyms", corpus_paths.synonyms,
                "--out", other,
                "--jobs", "2",
            ]
        )
        assert rc == 0
        a = open(os.path.join(built_run, "contexts.jsonl")).read()
        b = open(os.path.join(other, "contexts.jsonl")).read()
        assert a == b
        capsys.readouterr()


@pytest.fixture(scope="module")
def trained(tmp_path_factory, built_run, corpus_paths):
    cfg = tmp_path_factory.mktemp("cfg") / "run.cfg"
    write_config(cfg)
    ckpt = str(tmp_path_factory.mktemp("ckpt") / "model.ckpt")
    rc = main(["train", "--config", str(cfg), "--corpus", built_run, "--out", ckpt])
    assert rc == 0
    return ckpt


class TestTrainGenerateEvaluate:

    def test_generate_and_evaluate(self, trained, built_run, corpus_paths, tmp_path, capsys):
        captions = str(tmp_path / "captions.jsonl")
        rc = main(
            [
                "generate", "--ckpt", trained, "--dataset", corpus_paths.dataset,
                "--corpus", built_run, "--out", captions, "--split", "train",
            ]
        )
        assert rc == 0
        report_path = str(tmp_path / "report.txt")
        rc = main(
            [
                "evaluate", "--captions", captions, "--corpus", built_run,
                "--lexicon", corpus_paths.lexicon, "--report", report_path,
            ]
        )
        assert rc == 0
        report = parse_report(open(report_path).read())
        assert report.bleu1 > 0
        capsys.readouterr()

    def test_variant_override_mismatch_rejected(self, trained, built_run, corpus_paths, tmp_path, capsys):
        rc = main(
            [
                "generate", "--ckpt", trained, "--dataset", corpus_paths.dataset,
                "--corpus", built_run, "--out", str(tmp_path / "x.jsonl"),
                "--variant", "no_knowledge",
            ]
        )
        assert rc == 2
        assert "variant" in capsys.readouterr().err

    def test_perturb_round_trip(self, trained, built_run, corpus_paths, tmp_path, capsys):
        captions = str(tmp_path / "captions.jsonl")
        main(
            [
                "generate", "--ckpt", trained, "--dataset", corpus_paths.dataset,
                "--corpus", built_run, "--out", captions, "--split", "train",
            ]
        )
        perturbed = str(tmp_path / "perturbed.jsonl")
        rc = main(
            ["perturb", "--captions", captions, "--seed", "4", "--corpus", built_run,
             "--out", perturbed]
        )
        assert rc == 0
        rows_a, _ = pipeline.read_captions(captions)
        rows_b, _ = pipeline.read_captions(perturbed)
        assert [i for i, _ in rows_a] == [i for i, _ in rows_b]
        for (_, a), (_, b) in zip(rows_a, rows_b):
            assert a.kinds == b.kinds  # token types preserved
        capsys.readouterr()

    def test_compare_adds_significance_section(self, trained, built_run, corpus_paths, tmp_path, capsys):
        captions = str(tmp_path / "captions.jsonl")
        main(
            [
                "generate", "--ckpt", trained, "--dataset", corpus_paths.dataset,
                "--corpus", built_run, "--out", captions, "--split", "train",
            ]
        )
        perturbed = str(tmp_path / "perturbed.jsonl")
        main(["perturb", "--captions", captions, "--seed", "2", "--corpus", built_run,
              "--out", perturbed])
        report_path = str(tmp_path / "cmp_report.txt")
        rc = main(
            [
                "evaluate", "--captions", captions, "--corpus", built_run,
                "--lexicon", corpus_paths.lexicon, "--report", report_path,
                "--compare", perturbed,
            ]
        )
        assert rc == 0
        report = parse_report(open(report_path).read())
        metrics = {name for name, _, _ in report.significance}
        assert metrics == {"rouge_l", "meteor", "cider"}
        capsys.readouterr()

    def test_evaluate_unknown_ids_listed(self, trained, built_run, corpus_paths, tmp_path, capsys):
        bogus = str(tmp_path / "bogus.jsonl")
        pipeline.write_captions(
            bogus,
            [("img_nowhere_9999", TokenizedCaption(("a",), (TokenKind.VOCAB,), (-1,)))],
            {"config_hash": "x", "seed": 0},
        )
        rc = main(
            [
                "evaluate", "--captions", bogus, "--corpus", built_run,
                "--lexicon", corpus_paths.lexicon, "--report", str(tmp_path / "r.txt"),
            ]
        )
        assert rc == 2
        assert "img_nowhere_9999" in capsys.readouterr().err


class TestRunConfig:
    def test_bad_config_path(self, built_run, tmp_path):
        rc = main(["train", "--config", str(tmp_path / "nope.cfg"), "--corpus", built_run,
                   "--out", str(tmp_path / "m.ckpt")])
        assert rc == 2

    def test_nonexistent_config_path_entry(self, built_run, tmp_path):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("[paths]\nglove = /no/such/vectors.txt\n[model]\nd = 64\nheads = 2\n")
        rc = main(["train", "--config", str(cfg), "--corpus", built_run,
                   "--out", str(tmp_path / "m.ckpt")])
        assert rc == 2

    def test_invalid_variant_rejected(self, built_run, tmp_path):
        cfg = tmp_path / "bad2.cfg"
        write_config(cfg, variant="bogus")
        rc = main(["train", "--config", str(cfg), "--corpus", built_run,
                   "--out", str(tmp_path / "m.ckpt")])
        assert rc == 2
