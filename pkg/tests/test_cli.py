import numpy as np
import pytest

from orderlab import cli, corpus

GEN = ["generate", "--vocab-size", "300", "--n-docs", "300", "--n-queries", "20",
       "--seed", "3"]


def run_cli(*argv):
    return cli.main(list(argv))


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("data")
    assert run_cli(*GEN, "--out", str(d)) == 0
    return d


class TestGenerate:
    def test_writes_all_artifacts(self, data_dir):
        for name in ("collection.tsv", "queries.tsv", "qrels.txt",
                     "triples.tsv", "vocab.txt"):
            assert (data_dir / name).exists()

    def test_same_seed_byte_identical(self, data_dir, tmp_path):
        assert run_cli(*GEN, "--out", str(tmp_path)) == 0
        for name in ("collection.tsv", "queries.tsv", "qrels.txt", "triples.tsv"):
            assert (tmp_path / name).read_bytes() == (data_dir / name).read_bytes()


class TestRetrieveEvaluate:
    def test_index_exit_zero(self, data_dir, capsys):
        assert run_cli("index", "--collection", str(data_dir / "collection.tsv")) == 0
        out = capsys.readouterr().out
        assert out.startswith("docs\t300")

    def test_retrieve_then_evaluate(self, data_dir, tmp_path, capsys):
        run_path = tmp_path / "bm25.run"
        assert run_cli("retrieve", "--collection", str(data_dir / "collection.tsv"),
                       "--queries", str(data_dir / "queries.tsv"),
                       "--out", str(run_path), "--k", "20") == 0
        run = corpus.load_run(run_path)
        assert len(run.entries) == 20
        report = tmp_path / "report.tsv"
        assert run_cli("evaluate", "--run", str(run_path),
                       "--qrels", str(data_dir / "qrels.txt"),
                       "--out", str(report)) == 0
        lines = report.read_text().splitlines()
        means = {l.split("\t")[0]: float(l.split("\t")[2])
                 for l in lines if l.split("\t")[1] == "all"}
        # planted relevant docs share rare query terms, so BM25 beats chance
        assert means["ndcg@10"] > 0.3


class TestTrainRerank:
    def test_train_rerank_round_trip(self, data_dir, tmp_path):
        ckpt = tmp_path / "model.ckpt"
        assert run_cli("train", "--triples", str(data_dir / "triples.tsv"),
                       "--vocab", str(data_dir / "vocab.txt"),
                       "--out", str(ckpt), "--steps", "30", "--warmup", "5",
                       "--epoch-size", "16", "--dropout", "0.0") == 0
        assert ckpt.exists()
        run_path = tmp_path / "bm25.run"
        assert run_cli("retrieve", "--collection", str(data_dir / "collection.tsv"),
                       "--queries", str(data_dir / "queries.tsv"),
                       "--out", str(run_path), "--k", "10") == 0
        rerank_path = tmp_path / "rerank.run"
        assert run_cli("rerank", "--run", str(run_path),
                       "--checkpoint", str(ckpt),
                       "--vocab", str(data_dir / "vocab.txt"),
                       "--queries", str(data_dir / "queries.tsv"),
                       "--collection", str(data_dir / "collection.tsv"),
                       "--out", str(rerank_path), "--k", "3") == 0
        before = corpus.load_run(run_path)
        after = corpus.load_run(rerank_path)
        for qid, entries in before.entries.items():
            # candidate set preserved; tail below the block keeps its order
            assert {e.doc_id for e in after.entries[qid]} == {e.doc_id for e in entries}
            assert [e.doc_id for e in after.entries[qid][3:]] == \
                   [e.doc_id for e in entries[3:]]


class TestPerturbText:
    def test_sort_descending_token_ids(self, data_dir, capsys):
        assert run_cli("perturb-text", "--vocab", str(data_dir / "vocab.txt"),
                       "--mode", "sort", "w0003 w0001 w0002") == 0
        out = capsys.readouterr().out.strip()
        assert out == "query: w0003 w0002 w0001"


class TestExitCodes:
    def test_usage_error(self):
        assert run_cli("generate") == 1
        assert run_cli("no-such-command") == 1

    def test_data_error_missing_file(self, tmp_path):
        assert run_cli("index", "--collection", str(tmp_path / "nope.tsv")) == 2

    def test_data_error_malformed_run(self, data_dir, tmp_path):
        bad = tmp_path / "bad.run"
        bad.write_text("q1 Q0 d1 1 notanumber tag\n")
        assert run_cli("evaluate", "--run", str(bad),
                       "--qrels", str(data_dir / "qrels.txt")) == 2

    def test_numeric_failure_divergence(self, data_dir, tmp_path, capsys):
        code = run_cli("train", "--triples", str(data_dir / "triples.tsv"),
                       "--vocab", str(data_dir / "vocab.txt"),
                       "--out", str(tmp_path / "m.ckpt"),
                       "--steps", "60", "--warmup", "1", "--lr", "1e5")
        assert code == 3


CONFIG = """\
[synthetic]
vocab_size = 80
n_docs = 200
n_queries = 20
doc_len_min = 10
doc_len_max = 16
query_len_min = 6
query_len_max = 6
seed = 5

[train]
total_steps = 40
warmup_steps = 5
epoch_size = 20
batch_size = 8

[experiment]
rerank_k = 20
dev_queries = 4
test_queries = 6
conditions = learned/natural/natural, learned/natural/sort, none/natural/natural
"""


@pytest.fixture(scope="module")
def exp(tmp_path_factory):
    root = tmp_path_factory.mktemp("exp")
    cfg = root / "config.ini"
    cfg.write_text(CONFIG)
    out = root / "out"
    assert run_cli("experiment", "--config", str(cfg), "--out", str(out)) == 0
    return cfg, out


class TestExperimentCommand:
    def test_summary_rows_and_columns(self, exp):
        _, out = exp
        lines = (out / "summary.tsv").read_text().splitlines()
        assert lines[0] == "position_mode\ttrain_perturb\teval_perturb\tndcg@10\tmap\trecall@100\tmrr@10"
        assert len(lines) == 4
        assert lines[1].startswith("learned\tnatural\tnatural\t")

    def test_rerun_same_seed_byte_identical(self, exp, tmp_path):
        cfg, out = exp
        out2 = tmp_path / "again"
        assert run_cli("experiment", "--config", str(cfg), "--out", str(out2)) == 0
        assert (out2 / "summary.tsv").read_bytes() == (out / "summary.tsv").read_bytes()

    def test_resume_skips_completed_conditions(self, exp):
        cfg, out = exp
        baseline = (out / "summary.tsv").read_bytes()
        ckpts = sorted(p.stat().st_mtime_ns for p in (out / "models").glob("*.ckpt"))
        target = "learned_natural_sort"
        (out / "metrics" / f"{target}.tsv").unlink()
        (out / "runs" / f"{target}.run").unlink()
        assert run_cli("experiment", "--config", str(cfg), "--out", str(out)) == 0
        # checkpoints untouched, deleted condition recomputed, summary unchanged
        assert sorted(p.stat().st_mtime_ns
                      for p in (out / "models").glob("*.ckpt")) == ckpts
        assert (out / "metrics" / f"{target}.tsv").exists()
        assert (out / "summary.tsv").read_bytes() == baseline

    def test_resolved_config_written(self, exp):
        _, out = exp
        text = (out / "config.txt").read_text()
        assert "[synthetic]" in text and "conditions =" in text

    def test_cka_artifacts_present(self, exp):
        _, out = exp
        assert (out / "cka" / "cls_similarity.tsv").exists()
        # only trained model pairs get a layerwise CSV; no sort-trained
        # model exists in this condition list
        assert (out / "cka" / "layers_nopos.csv").exists()
