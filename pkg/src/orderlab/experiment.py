"""End-to-end experiment runner.

Generates (or loads) data, builds the vocabulary and BM25 first-stage
runs, trains one model per distinct (position_mode, train_perturb),
re-ranks and evaluates every condition, and emits a summary TSV plus
CKA analysis artifacts. Completed stages are skipped on re-run based on
the presence of their output files.
"""

from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, field, replace

from . import bm25, cka, metrics
from . import model as M
from . import perturb
from . import train as T
from .corpus import (Collection, QuerySet, Run, RunEntry, SyntheticSpec, Triple,
                     generate_synthetic, write_collection, write_qrels,
                     write_queries, write_run, write_triples)
from .tokenizer import Vocab, build_vocab, encode_pair, save_vocab, _pretokenize


@dataclass(frozen=True)
class Condition:
    position_mode: str
    train_perturb: perturb.PerturbMode
    eval_perturb: perturb.PerturbMode

    def label(self) -> str:
        return "_".join((
            self.position_mode,
            perturb.format_mode(self.train_perturb).replace(":", ""),
            perturb.format_mode(self.eval_perturb).replace(":", ""),
        ))


def default_conditions(shuffle_seed: int = 13) -> list[Condition]:
    """The 8-row condition matrix: natural baseline, sort and shuffle
    blocks, and the no-position model."""
    sh = perturb.shuffle_mode(shuffle_seed)
    nat, srt = perturb.NATURAL, perturb.SORT_DESC
    return [
        Condition("learned", nat, nat),
        Condition("learned", nat, srt),
        Condition("learned", srt, srt),
        Condition("learned", srt, nat),
        Condition("learned", nat, sh),
        Condition("learned", sh, sh),
        Condition("learned", sh, nat),
        Condition("none", nat, nat),
    ]


@dataclass
class ExperimentSpec:
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)
    model: M.ModelConfig = field(default_factory=M.ModelConfig)
    train: T.TrainConfig = field(default_factory=T.TrainConfig)
    conditions: list[Condition] = field(default_factory=default_conditions)
    seed: int = 13
    rerank_k: int = 100
    dev_queries: int = 50
    test_queries: int = 50
    dev_rerank_k: int = 50
    cka_batch_size: int = 64
    cka_docs_per_query: int = 5

    def validate(self):
        if not self.conditions:
            raise ValueError("conditions must be non-empty")
        self.synthetic.validate()
        self.model.validate()
        self.train.validate()
        if self.dev_queries + self.test_queries >= self.synthetic.n_queries:
            raise ValueError("dev + test queries must leave training queries")


# ---------------------------------------------------------------------------
# config file (plain key = value, one section per module)


def spec_from_config(path) -> ExperimentSpec:
    cp = configparser.ConfigParser()
    with open(path, "r", encoding="utf-8") as f:
        cp.read_file(f)
    spec = ExperimentSpec()

    if cp.has_section("synthetic"):
        s = cp["synthetic"]
        spec.synthetic = SyntheticSpec(
            vocab_size=s.getint("vocab_size", spec.synthetic.vocab_size),
            n_docs=s.getint("n_docs", spec.synthetic.n_docs),
            n_queries=s.getint("n_queries", spec.synthetic.n_queries),
            doc_len_range=(s.getint("doc_len_min", spec.synthetic.doc_len_range[0]),
                           s.getint("doc_len_max", spec.synthetic.doc_len_range[1])),
            query_len_range=(s.getint("query_len_min", spec.synthetic.query_len_range[0]),
                             s.getint("query_len_max", spec.synthetic.query_len_range[1])),
            relevance_rule=s.get("relevance_rule", spec.synthetic.relevance_rule),
            zipf_exponent=s.getfloat("zipf_exponent", spec.synthetic.zipf_exponent),
            seed=s.getint("seed", spec.synthetic.seed),
        )
    if cp.has_section("model"):
        s = cp["model"]
        spec.model = M.ModelConfig(
            n_layers=s.getint("n_layers", spec.model.n_layers),
            n_heads=s.getint("n_heads", spec.model.n_heads),
            hidden=s.getint("hidden", spec.model.hidden),
            ff_dim=s.getint("ff_dim", spec.model.ff_dim),
            max_len=s.getint("max_len", spec.model.max_len),
            dropout_rate=s.getfloat("dropout_rate", spec.model.dropout_rate),
            numeric_precision=s.getint("numeric_precision", spec.model.numeric_precision),
        )
    if cp.has_section("train"):
        s = cp["train"]
        spec.train = T.TrainConfig(
            batch_size=s.getint("batch_size", spec.train.batch_size),
            lr_peak=s.getfloat("lr_peak", spec.train.lr_peak),
            warmup_steps=s.getint("warmup_steps", spec.train.warmup_steps),
            total_steps=s.getint("total_steps", spec.train.total_steps),
            epoch_size=s.getint("epoch_size", spec.train.epoch_size),
            weight_decay=s.getfloat("weight_decay", spec.train.weight_decay),
            grad_clip_norm=s.getfloat("grad_clip_norm", spec.train.grad_clip_norm),
            shuffle_fixed=s.getboolean("shuffle_fixed", spec.train.shuffle_fixed),
        )
    if cp.has_section("experiment"):
        s = cp["experiment"]
        spec.seed = s.getint("seed", spec.seed)
        spec.rerank_k = s.getint("rerank_k", spec.rerank_k)
        spec.dev_queries = s.getint("dev_queries", spec.dev_queries)
        spec.test_queries = s.getint("test_queries", spec.test_queries)
        if "conditions" in s:
            spec.conditions = [
                parse_condition(c.strip()) for c in s["conditions"].split(",") if c.strip()
            ]
    return spec


def parse_condition(text: str) -> Condition:
    """`position_mode/train_perturb/eval_perturb`, perturbs in CLI grammar."""
    parts = text.split("/")
    if len(parts) != 3:
        raise ValueError(f"bad condition {text!r}; expected pos/train/eval")
    return Condition(parts[0], perturb.parse_mode(parts[1]), perturb.parse_mode(parts[2]))


def write_resolved_config(spec: ExperimentSpec, path):
    cond_text = ", ".join(
        f"{c.position_mode}/{perturb.format_mode(c.train_perturb)}/{perturb.format_mode(c.eval_perturb)}"
        for c in spec.conditions
    )
    with open(path, "w", encoding="utf-8") as f:
        f.write("[synthetic]\n")
        s = spec.synthetic
        f.write(f"vocab_size = {s.vocab_size}\nn_docs = {s.n_docs}\nn_queries = {s.n_queries}\n")
        f.write(f"doc_len_min = {s.doc_len_range[0]}\ndoc_len_max = {s.doc_len_range[1]}\n")
        f.write(f"query_len_min = {s.query_len_range[0]}\nquery_len_max = {s.query_len_range[1]}\n")
        f.write(f"relevance_rule = {s.relevance_rule}\nzipf_exponent = {s.zipf_exponent}\nseed = {s.seed}\n")
        f.write("\n[model]\n")
        m = spec.model
        f.write(f"n_layers = {m.n_layers}\nn_heads = {m.n_heads}\nhidden = {m.hidden}\n")
        f.write(f"ff_dim = {m.ff_dim}\nmax_len = {m.max_len}\ndropout_rate = {m.dropout_rate}\n")
        f.write(f"numeric_precision = {m.numeric_precision}\n")
        f.write("\n[train]\n")
        t = spec.train
        f.write(f"batch_size = {t.batch_size}\nlr_peak = {t.lr_peak}\nwarmup_steps = {t.warmup_steps}\n")
        f.write(f"total_steps = {t.total_steps}\nepoch_size = {t.epoch_size}\n")
        f.write(f"weight_decay = {t.weight_decay}\ngrad_clip_norm = {t.grad_clip_norm}\n")
        f.write(f"shuffle_fixed = {t.shuffle_fixed}\n")
        f.write("\n[experiment]\n")
        f.write(f"seed = {spec.seed}\nrerank_k = {spec.rerank_k}\n")
        f.write(f"dev_queries = {spec.dev_queries}\ntest_queries = {spec.test_queries}\n")
        f.write(f"conditions = {cond_text}\n")


# ---------------------------------------------------------------------------
# re-ranking


def rerank_run(run: Run, mdl: M.Model, vocab: Vocab, queries: QuerySet,
               collection: Collection, k: int,
               mode: perturb.PerturbMode = perturb.NATURAL,
               tag: str = "rerank", batch_size: int = 64) -> Run:
    """Re-score the top-k block of each query with the model.

    The block is re-ordered by model score (ties by doc_id); entries
    below rank k keep their order, with scores remapped below the block
    minimum so the run stays rank-consistent.
    """
    out = Run()
    for qid in sorted(run.entries):
        entries = run.entries[qid]
        block = entries[:k]
        tail = entries[k:]
        pairs = [
            perturb.apply(
                encode_pair(queries.entries[qid], collection.entries[e.doc_id],
                            vocab, mdl.config.max_len),
                mode, f"{qid}:{e.doc_id}",
            )
            for e in block
        ]
        scores = []
        for start in range(0, len(pairs), batch_size):
            scores.extend(M.forward(mdl, pairs[start:start + batch_size]).relevance_prob)
        rescored = sorted(
            zip((e.doc_id for e in block), scores), key=lambda kv: (-kv[1], kv[0])
        )
        new_entries = [
            RunEntry(doc_id, float(s), rank, tag)
            for rank, (doc_id, s) in enumerate(rescored, start=1)
        ]
        floor = new_entries[-1].score if new_entries else 1.0
        for j, e in enumerate(tail):
            new_entries.append(
                RunEntry(e.doc_id, floor - 1e-6 * (j + 1), len(new_entries) + 1, tag)
            )
        out.entries[qid] = new_entries
    out.validate()
    return out


def held_out_accuracy(mdl: M.Model, triples: list[Triple], vocab: Vocab,
                      mode: perturb.PerturbMode = perturb.NATURAL,
                      batch_size: int = 64) -> float:
    """Classification accuracy over the two examples of each triple."""
    pairs, labels = [], []
    for i, t in enumerate(triples):
        for pair, label in T.make_examples(t, vocab, mdl.config.max_len, mode, f"acc:{i}"):
            pairs.append(pair)
            labels.append(label)
    correct = 0
    for start in range(0, len(pairs), batch_size):
        probs = M.forward(mdl, pairs[start:start + batch_size]).relevance_prob
        for p, y in zip(probs, labels[start:start + batch_size]):
            correct += int((p >= 0.5) == bool(y))
    return correct / len(pairs)


# ---------------------------------------------------------------------------
# experiment driver


def _vocab_for(collection: Collection, queries: QuerySet) -> Vocab:
    texts = list(collection.entries.values()) + list(queries.entries.values())
    words = set()
    chars = set()
    for text in texts:
        for w in _pretokenize(text):
            words.add(w)
            chars.update(w)
    # large enough that every corpus word is a whole token
    return build_vocab(texts, 4 + len(chars) + len(words))


def _split_queries(queries: QuerySet, n_dev: int, n_test: int):
    qids = sorted(queries.entries)
    train_ids = qids[: len(qids) - n_dev - n_test]
    dev_ids = qids[len(train_ids): len(train_ids) + n_dev]
    test_ids = qids[len(train_ids) + n_dev:]
    return train_ids, dev_ids, test_ids


def _subset(queries: QuerySet, qids) -> QuerySet:
    return QuerySet({q: queries.entries[q] for q in qids})


class ExperimentError(RuntimeError):
    pass


def _load_report_means(path) -> metrics.MetricsReport:
    report = metrics.MetricsReport()
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            metric, scope, value = line.rstrip("\n").split("\t")
            if scope == "all":
                report.mean[metric] = float(value)
    return report


def run_experiment(spec: ExperimentSpec, outdir, log=print) -> dict:
    """Execute the full condition matrix; returns {condition label: report}."""
    spec.validate()
    os.makedirs(outdir, exist_ok=True)
    for sub in ("data", "models", "runs", "metrics", "cka"):
        os.makedirs(os.path.join(outdir, sub), exist_ok=True)
    write_resolved_config(spec, os.path.join(outdir, "config.txt"))
    data = os.path.join(outdir, "data")

    # -- data generation (deterministic, always re-emitted byte-identically)
    collection, queries, qrels, triples = generate_synthetic(spec.synthetic)
    write_collection(collection, os.path.join(data, "collection.tsv"))
    write_queries(queries, os.path.join(data, "queries.tsv"))
    write_qrels(qrels, os.path.join(data, "qrels.txt"))
    write_triples(triples, os.path.join(data, "triples.tsv"))

    vocab_path = os.path.join(data, "vocab.txt")
    vocab = _vocab_for(collection, queries)
    save_vocab(vocab, vocab_path)

    train_ids, dev_ids, test_ids = _split_queries(queries, spec.dev_queries, spec.test_queries)
    text_to_qid = {}
    for qid, text in queries.entries.items():
        text_to_qid.setdefault(text, qid)
    train_triples = [t for t in triples if text_to_qid.get(t[0]) in set(train_ids)]
    dev_triples = [t for t in triples if text_to_qid.get(t[0]) in set(dev_ids)]

    # -- first-stage BM25 runs
    index = bm25.build_index(collection)
    test_run = bm25.retrieve_run(index, _subset(queries, test_ids), spec.rerank_k)
    dev_run = bm25.retrieve_run(index, _subset(queries, dev_ids), spec.dev_rerank_k)
    write_run(test_run, os.path.join(outdir, "runs", "bm25_test.run"))
    write_run(dev_run, os.path.join(outdir, "runs", "bm25_dev.run"))
    bm25_report = metrics.evaluate(test_run, qrels)
    metrics.write_report(bm25_report, os.path.join(outdir, "metrics", "bm25.tsv"))

    model_cfg = replace(spec.model, vocab_size=len(vocab))

    # -- train one model per distinct (position_mode, train_perturb)
    trained: dict[tuple, M.Model] = {}
    for cond in spec.conditions:
        key = (cond.position_mode, perturb.format_mode(cond.train_perturb))
        if key in trained:
            continue
        ckpt = os.path.join(outdir, "models", f"{key[0]}_{key[1].replace(':', '')}.ckpt")
        if os.path.exists(ckpt):
            log(f"[experiment] loading cached model {ckpt}")
            trained[key] = M.load(ckpt)
            continue
        log(f"[experiment] training model position={key[0]} perturb={key[1]}")
        cfg = replace(model_cfg, position_mode=cond.position_mode)
        mdl = M.init(cfg, spec.seed)
        tcfg = replace(spec.train, seed=spec.seed, train_perturb=cond.train_perturb)

        def dev_hook(m, _mode=cond.train_perturb):
            reranked = rerank_run(dev_run, m, vocab, queries, collection,
                                  spec.dev_rerank_k, _mode, tag="dev")
            return metrics.evaluate(reranked, qrels).mean["ndcg@10"]

        mdl, tlog = T.train(mdl, train_triples, tcfg, vocab, eval_hook=dev_hook)
        M.save(mdl, ckpt)
        T.write_train_log(tlog, os.path.join(outdir, "models", f"{key[0]}_{key[1].replace(':', '')}_log.tsv"))
        trained[key] = mdl

    # -- evaluate each condition (skipped when its outputs already exist)
    results: dict[str, metrics.MetricsReport | None] = {}
    for cond in spec.conditions:
        label = cond.label()
        key = (cond.position_mode, perturb.format_mode(cond.train_perturb))
        metrics_path = os.path.join(outdir, "metrics", f"{label}.tsv")
        run_path = os.path.join(outdir, "runs", f"{label}.run")
        if os.path.exists(metrics_path) and os.path.exists(run_path):
            log(f"[experiment] condition {label} already computed, skipping")
            results[label] = _load_report_means(metrics_path)
            continue
        try:
            reranked = rerank_run(test_run, trained[key], vocab, queries, collection,
                                  spec.rerank_k, cond.eval_perturb, tag=label)
            write_run(reranked, run_path)
            report = metrics.evaluate(reranked, qrels)
            metrics.write_report(report, metrics_path)
            results[label] = report
        except Exception as exc:  # condition failure must not kill the matrix
            log(f"[experiment] condition {label} failed: {exc}")
            results[label] = None

    # -- summary table
    with open(os.path.join(outdir, "summary.tsv"), "w", encoding="utf-8") as f:
        f.write("position_mode\ttrain_perturb\teval_perturb\tndcg@10\tmap\trecall@100\tmrr@10\n")
        for cond in spec.conditions:
            report = results[cond.label()]
            row = [cond.position_mode, perturb.format_mode(cond.train_perturb),
                   perturb.format_mode(cond.eval_perturb)]
            if report is None:
                row.extend(["failed"] * 4)
            else:
                row.extend(f"{report.mean[m]:.4f}"
                           for m in ("ndcg@10", "map", "recall@100", "mrr@10"))
            f.write("\t".join(row) + "\n")

    # -- CKA artifacts over test pairs
    cka_pairs = []
    for qid in test_ids:
        for e in test_run.entries.get(qid, [])[: spec.cka_docs_per_query]:
            cka_pairs.append(
                encode_pair(queries.entries[qid], collection.entries[e.doc_id],
                            vocab, model_cfg.max_len)
            )
    sh = perturb.shuffle_mode(spec.seed)
    with open(os.path.join(outdir, "cka", "cls_similarity.tsv"), "w", encoding="utf-8") as f:
        f.write("position_mode\ttrain_perturb\tcomparison\tcka\n")
        for (pos_mode, tp), mdl in sorted(trained.items()):
            for comp_name, comp_mode in (("shuffle", sh), ("sort", perturb.SORT_DESC)):
                rep = cka.compare(mdl, perturb.NATURAL, mdl, comp_mode, cka_pairs,
                                  selector="cls_only", batch_size=spec.cka_batch_size)
                f.write(f"{pos_mode}\t{tp}\t{comp_name}\t{rep.per_layer[-1]:.6f}\n")

    baseline_key = ("learned", "natural")
    if baseline_key in trained:
        for other_key, name in ((("learned", "sort"), "sort"), (("none", "natural"), "nopos")):
            if other_key in trained:
                rep = cka.compare(trained[baseline_key], perturb.NATURAL,
                                  trained[other_key], perturb.NATURAL, cka_pairs,
                                  selector="all_tokens", batch_size=spec.cka_batch_size)
                cka.write_report_csv(rep, os.path.join(outdir, "cka", f"layers_{name}.csv"))

    return results
