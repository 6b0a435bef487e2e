"""Corpus ingestion, TREC file formats, and synthetic corpus generation.

File conventions:
- collection / queries: one `id<TAB>text` record per line
- qrels: `qid 0 docid rel` (whitespace separated)
- run:   `qid Q0 docid rank score tag` (whitespace separated, scores
  serialized with 6 decimal places)
- triples: `query<TAB>positive<TAB>negative`
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class ParseError(ValueError):
    """Raised for malformed data files; message carries the line number."""


class ValidationError(ValueError):
    """Raised when loaded data violates a structural invariant."""


# ---------------------------------------------------------------------------
# domain types


@dataclass
class Collection:
    entries: dict[str, str] = field(default_factory=dict)

    def __len__(self):
        return len(self.entries)

    @property
    def avg_length(self) -> float:
        """Mean whitespace-token count over all passages."""
        if not self.entries:
            return 0.0
        return sum(len(t.split()) for t in self.entries.values()) / len(self.entries)


@dataclass
class QuerySet:
    entries: dict[str, str] = field(default_factory=dict)

    def __len__(self):
        return len(self.entries)


@dataclass
class Qrels:
    grades: dict[tuple[str, str], int] = field(default_factory=dict)

    def grade(self, qid: str, doc_id: str) -> int:
        return self.grades.get((qid, doc_id), 0)

    def relevant(self, qid: str, threshold: int = 1) -> set[str]:
        return {d for (q, d), g in self.grades.items() if q == qid and g >= threshold}

    def query_ids(self) -> list[str]:
        return sorted({q for (q, _d) in self.grades})

    def by_query(self) -> dict[str, dict[str, int]]:
        out: dict[str, dict[str, int]] = {}
        for (qid, doc_id), g in self.grades.items():
            out.setdefault(qid, {})[doc_id] = g
        return out


@dataclass
class RunEntry:
    doc_id: str
    score: float
    rank: int
    tag: str


@dataclass
class Run:
    entries: dict[str, list[RunEntry]] = field(default_factory=dict)

    def validate(self):
        for qid, lst in self.entries.items():
            seen = set()
            for i, e in enumerate(lst):
                if e.rank != i + 1:
                    raise ValidationError(
                        f"query {qid}: rank {e.rank} at position {i + 1} (ranks must be contiguous from 1)"
                    )
                if i > 0 and e.score > lst[i - 1].score:
                    raise ValidationError(
                        f"query {qid}: score increases at rank {e.rank}"
                    )
                if e.doc_id in seen:
                    raise ValidationError(f"query {qid}: duplicate doc {e.doc_id}")
                seen.add(e.doc_id)


Triple = tuple[str, str, str]  # (query_text, positive_text, negative_text)


@dataclass
class SyntheticSpec:
    vocab_size: int = 600
    n_docs: int = 8000
    n_queries: int = 800
    doc_len_range: tuple[int, int] = (8, 16)
    query_len_range: tuple[int, int] = (4, 4)
    relevance_rule: str = "overlap"  # overlap | bigram_order
    zipf_exponent: float = 1.1
    seed: int = 0

    def validate(self):
        if self.vocab_size <= 0 or self.n_docs <= 0 or self.n_queries <= 0:
            raise ValueError("sizes must be positive")
        for lo, hi in (self.doc_len_range, self.query_len_range):
            if lo <= 0 or hi < lo:
                raise ValueError("length ranges must be valid positive intervals")
        if self.query_len_range[1] > self.vocab_size:
            raise ValueError("query length exceeds vocabulary size")
        if self.relevance_rule not in ("overlap", "bigram_order"):
            raise ValueError(f"unknown relevance rule {self.relevance_rule!r}")
        if self.relevance_rule == "bigram_order" and self.doc_len_range[0] < 8:
            raise ValueError("bigram_order rule needs doc_len_range lower bound >= 8")
        if self.relevance_rule == "overlap" and self.query_len_range[0] < 4:
            raise ValueError("overlap rule needs queries of >= 4 terms for all grade bands")


# ---------------------------------------------------------------------------
# loaders / writers


def _lines(path):
    with open(path, "r", encoding="utf-8") as f:
        return f.read().splitlines()


def load_collection(path) -> Collection:
    coll = Collection()
    for ln, line in enumerate(_lines(path), start=1):
        if "\t" not in line:
            raise ParseError(f"{path}:{ln}: expected `id<TAB>text`")
        doc_id, text = line.split("\t", 1)
        if not doc_id or not text:
            raise ParseError(f"{path}:{ln}: empty id or text")
        if doc_id in coll.entries:
            raise ParseError(f"{path}:{ln}: duplicate doc id {doc_id}")
        coll.entries[doc_id] = text
    return coll


def write_collection(coll: Collection, path):
    with open(path, "w", encoding="utf-8") as f:
        for doc_id in sorted(coll.entries):
            f.write(f"{doc_id}\t{coll.entries[doc_id]}\n")


def load_queries(path) -> QuerySet:
    qs = QuerySet()
    for ln, line in enumerate(_lines(path), start=1):
        if "\t" not in line:
            raise ParseError(f"{path}:{ln}: expected `id<TAB>text`")
        qid, text = line.split("\t", 1)
        if qid in qs.entries:
            raise ParseError(f"{path}:{ln}: duplicate query id {qid}")
        qs.entries[qid] = text
    return qs


def write_queries(qs: QuerySet, path):
    with open(path, "w", encoding="utf-8") as f:
        for qid in sorted(qs.entries):
            f.write(f"{qid}\t{qs.entries[qid]}\n")


def load_qrels(path) -> Qrels:
    qrels = Qrels()
    for ln, line in enumerate(_lines(path), start=1):
        parts = line.split()
        if len(parts) != 4:
            raise ParseError(f"{path}:{ln}: expected `qid 0 docid rel`")
        qid, _, doc_id, rel = parts
        try:
            grade = int(rel)
        except ValueError:
            raise ParseError(f"{path}:{ln}: non-integer relevance {rel!r}") from None
        if grade < 0:
            raise ParseError(f"{path}:{ln}: negative relevance grade")
        if (qid, doc_id) in qrels.grades:
            raise ParseError(f"{path}:{ln}: duplicate judgment for ({qid}, {doc_id})")
        qrels.grades[(qid, doc_id)] = grade
    return qrels


def write_qrels(qrels: Qrels, path):
    with open(path, "w", encoding="utf-8") as f:
        for (qid, doc_id) in sorted(qrels.grades):
            f.write(f"{qid} 0 {doc_id} {qrels.grades[(qid, doc_id)]}\n")


def load_run(path) -> Run:
    run = Run()
    for ln, line in enumerate(_lines(path), start=1):
        parts = line.split()
        if len(parts) != 6:
            raise ParseError(f"{path}:{ln}: expected `qid Q0 docid rank score tag`")
        qid, _, doc_id, rank, score, tag = parts
        try:
            rank_i = int(rank)
        except ValueError:
            raise ParseError(f"{path}:{ln}: non-integer rank {rank!r}") from None
        try:
            score_f = float(score)
        except ValueError:
            raise ParseError(f"{path}:{ln}: non-numeric score {score!r}") from None
        run.entries.setdefault(qid, []).append(RunEntry(doc_id, score_f, rank_i, tag))
    for lst in run.entries.values():
        lst.sort(key=lambda e: e.rank)
    run.validate()
    return run


def write_run(run: Run, path):
    run.validate()
    with open(path, "w", encoding="utf-8") as f:
        for qid in sorted(run.entries):
            for e in run.entries[qid]:
                f.write(f"{qid} Q0 {e.doc_id} {e.rank} {e.score:.6f} {e.tag}\n")


def load_triples(path) -> list[Triple]:
    triples = []
    for ln, line in enumerate(_lines(path), start=1):
        parts = line.split("\t")
        if len(parts) != 3:
            raise ParseError(f"{path}:{ln}: expected `query<TAB>positive<TAB>negative`")
        if not all(parts):
            raise ParseError(f"{path}:{ln}: empty field in triple")
        triples.append((parts[0], parts[1], parts[2]))
    return triples


def write_triples(triples: list[Triple], path):
    with open(path, "w", encoding="utf-8") as f:
        for q, pos, neg in triples:
            f.write(f"{q}\t{pos}\t{neg}\n")


# ---------------------------------------------------------------------------
# relevance rules (pure functions of the texts; the generator and any
# oracle re-apply the same definitions)


def overlap_grade(query_text: str, doc_text: str) -> int:
    """Grade from the fraction of distinct query terms present in the doc."""
    q_terms = set(query_text.split())
    if not q_terms:
        return 0
    frac = len(q_terms & set(doc_text.split())) / len(q_terms)
    if frac >= 1.0:
        return 3
    if frac >= 0.75:
        return 2
    if frac >= 0.5:
        return 1
    return 0


def bigram_grade(query_text: str, doc_text: str) -> int:
    """Grade from adjacent in-order occurrences of the query's two marker terms.

    The markers are the first two query tokens (a, b); the grade is the
    number of positions where `a` is immediately followed by `b`, capped
    at 3. Any token permutation of the doc changes this, which makes the
    rule order-sensitive by construction.
    """
    q_tokens = query_text.split()
    if len(q_tokens) < 2:
        return 0
    a, b = q_tokens[0], q_tokens[1]
    d_tokens = doc_text.split()
    count = sum(
        1 for i in range(len(d_tokens) - 1) if d_tokens[i] == a and d_tokens[i + 1] == b
    )
    return min(3, count)


def relevance_grade(rule: str, query_text: str, doc_text: str) -> int:
    if rule == "overlap":
        return overlap_grade(query_text, doc_text)
    if rule == "bigram_order":
        return bigram_grade(query_text, doc_text)
    raise ValueError(f"unknown relevance rule {rule!r}")


# ---------------------------------------------------------------------------
# synthetic generation


def _zipf_probs(vocab_size: int, exponent: float) -> np.ndarray:
    ranks = np.arange(1, vocab_size + 1, dtype=np.float64)
    p = ranks ** (-exponent)
    return p / p.sum()


def generate_synthetic(spec: SyntheticSpec) -> tuple[Collection, QuerySet, Qrels, list[Triple]]:
    """Generate a deterministic corpus with planted graded documents.

    Every query gets planted relevant docs plus style-matched grade-0
    docs. Grades in the emitted qrels are computed by re-applying the
    relevance rule to the final texts, so an independent re-application
    always agrees.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    words = [f"w{i:04d}" for i in range(spec.vocab_size)]
    # filler/background text draws only on the commoner half of the
    # vocabulary; query terms come from the rarer half, so any overlap
    # with a query is deliberate (planted), never accidental
    common_hi = max(1, spec.vocab_size // 2)
    probs = _zipf_probs(common_hi, spec.zipf_exponent)

    def sample_words(n, exclude=()):
        out = []
        excl = set(exclude)
        while len(out) < n:
            batch = rng.choice(common_hi, size=max(n, 8), p=probs)
            for i in batch:
                w = words[int(i)]
                if w not in excl:
                    out.append(w)
                    if len(out) == n:
                        break
        return out

    # queries: distinct terms, drawn from the rarer half of the vocabulary
    # so background (common-half) docs never match by chance; among many
    # candidate draws keep the one sharing the fewest 2+-term overlaps with
    # earlier queries, so one query's relevant docs rarely look relevant to
    # another query
    queries = QuerySet()
    query_terms: dict[str, list[str]] = {}
    rare_lo = spec.vocab_size // 2
    term_users: dict[int, list[int]] = {}
    for qi in range(spec.n_queries):
        qlen = int(rng.integers(spec.query_len_range[0], spec.query_len_range[1] + 1))
        qlen = min(qlen, spec.vocab_size - rare_lo)
        best_idxs, best_conflicts = None, None
        for _attempt in range(200):
            idxs = rng.choice(np.arange(rare_lo, spec.vocab_size), size=qlen, replace=False)
            shared: dict[int, int] = {}
            for i in idxs:
                for u in term_users.get(int(i), ()):
                    shared[u] = shared.get(u, 0) + 1
            conflicts = sum(1 for v in shared.values() if v > 1)
            if best_conflicts is None or conflicts < best_conflicts:
                best_idxs, best_conflicts = idxs, conflicts
            if conflicts == 0:
                break
        idxs = best_idxs
        for i in idxs:
            term_users.setdefault(int(i), []).append(qi)
        terms = [words[int(i)] for i in idxs]
        qid = f"q{qi:04d}"
        queries.entries[qid] = " ".join(terms)
        query_terms[qid] = terms

    # planted docs, in query order, then background docs
    docs: list[str] = []

    def plant_overlap(terms: list[str]):
        planted = []
        n_q = len(terms)
        nonq = [i for i in range(rare_lo, spec.vocab_size) if words[i] not in set(terms)]

        def rare_fill(n):
            idx = rng.choice(nonq, size=min(n, len(nonq)), replace=False)
            return [words[int(i)] for i in idx]

        # four fully-matching docs (all query terms lead, in query order),
        # one doc per partial grade, two one-term decoys (a single query
        # term embedded in a lead of rare non-query terms, below the
        # relevance cutoff), and one zero-overlap doc with a rare-term
        # lead.  every planted doc leads with rare terms, so surface form
        # alone separates nothing; only matched query terms do
        k2, k1 = math.ceil(0.75 * n_q), math.ceil(0.5 * n_q)
        # every planted doc leads with exactly n_q + 1 rare terms, so the
        # rare-term count separates nothing; only how many of them match
        # the query does.  one fully-matching doc carries the query terms
        # in a scrambled order, so term matching alone — not their
        # arrangement — is what certifies full relevance
        scrambled = list(terms)
        while scrambled == list(terms):
            scrambled = [terms[int(i)] for i in rng.permutation(n_q)]
        leads = [list(terms) + rare_fill(1) for _ in range(3)]
        leads.append(scrambled + rare_fill(1))
        for k in (k2, k1):
            leads.append(terms[:k] + rare_fill(n_q + 1 - k))
        for j in rng.choice(n_q, size=2, replace=False):
            # the decoy's one query term sits at a lead position that
            # differs from its position in the query
            lead = rare_fill(n_q)
            lead.insert((int(j) + 1) % n_q, terms[int(j)])
            leads.append(lead)
        leads.append(rare_fill(n_q + 1))
        for lead in leads:
            dlen = int(rng.integers(spec.doc_len_range[0], spec.doc_len_range[1] + 1))
            dlen = max(dlen, len(lead))
            planted.append(" ".join(lead + sample_words(dlen - len(lead), exclude=terms)))
        return planted

    def plant_bigram(terms: list[str]):
        a, b = terms[0], terms[1]
        dlen = int(rng.integers(spec.doc_len_range[0], spec.doc_len_range[1] + 1))
        filler = lambda n: sample_words(n, exclude=(a, b))
        x1, x2, x3 = filler(3)
        prefixes = [
            [a, b],                            # grade 1
            [a, b, a, b],                      # grade 2
            [a, b, a, b, a, b],                # grade 3
            [b, a, x1, b, a],                  # grade 0, marker counts match grade 2
            [b, a, x2, b, a, x3, b, a],        # grade 0, marker counts match grade 3
        ]
        planted = []
        for pre in prefixes:
            planted.append(" ".join(pre + filler(max(0, dlen - len(pre)))))
        return planted

    for qi in range(spec.n_queries):
        qid = f"q{qi:04d}"
        terms = query_terms[qid]
        planted = plant_overlap(terms) if spec.relevance_rule == "overlap" else plant_bigram(terms)
        if len(docs) + len(planted) > spec.n_docs:
            raise ValueError(
                f"n_docs={spec.n_docs} too small to plant graded docs for {spec.n_queries} queries"
            )
        docs.extend(planted)

    while len(docs) < spec.n_docs:
        dlen = int(rng.integers(spec.doc_len_range[0], spec.doc_len_range[1] + 1))
        docs.append(" ".join(sample_words(dlen)))

    collection = Collection({f"d{i:06d}": text for i, text in enumerate(docs)})

    # qrels: exhaustive application of the rule; grade-0 rows kept only for
    # the planted zero-grade docs so every query has a judged non-relevant doc
    qrels = Qrels()
    n_planted = 9 if spec.relevance_rule == "overlap" else 5
    doc_items = sorted(collection.entries.items())
    if spec.relevance_rule == "overlap":
        doc_sets = {d: set(t.split()) for d, t in doc_items}
    else:
        doc_bigrams = {}
        for d, t in doc_items:
            toks = t.split()
            bg: dict[tuple[str, str], int] = {}
            for i in range(len(toks) - 1):
                key = (toks[i], toks[i + 1])
                bg[key] = bg.get(key, 0) + 1
            doc_bigrams[d] = bg

    for qi in range(spec.n_queries):
        qid = f"q{qi:04d}"
        terms = query_terms[qid]
        for doc_id, _text in doc_items:
            if spec.relevance_rule == "overlap":
                frac = len(set(terms) & doc_sets[doc_id]) / len(set(terms))
                grade = 3 if frac >= 1.0 else 2 if frac >= 0.75 else 1 if frac >= 0.5 else 0
            else:
                a, b = terms[0], terms[1]
                grade = min(3, doc_bigrams[doc_id].get((a, b), 0))
            if grade > 0:
                qrels.grades[(qid, doc_id)] = grade
        # planted grade-0 docs for this query
        base = qi * n_planted
        zero_slots = [8] if spec.relevance_rule == "overlap" else [3, 4]
        for slot in zero_slots:
            doc_id = f"d{base + slot:06d}"
            qrels.grades.setdefault((qid, doc_id), 0)

    # triples: each rule-verified grade>=2 planted doc paired with a
    # grade-0 doc of the same query
    triples: list[Triple] = []
    n_bg_start = spec.n_queries * n_planted
    for qi in range(spec.n_queries):
        qid = f"q{qi:04d}"
        base = qi * n_planted
        planted_ids = [f"d{base + s:06d}" for s in range(n_planted)]
        positives = [d for d in planted_ids if qrels.grade(qid, d) >= 2]
        negatives = [d for d in planted_ids if qrels.grade(qid, d) == 0]
        if not positives or not negatives:
            continue
        if spec.relevance_rule == "bigram_order":
            # pair by matching marker counts: grade-2 with the first zero
            # doc, grade-3 with the second
            pairs = list(zip(positives, negatives))
        else:
            # vary the negative type so no query-independent cue separates
            # the classes: the zero-overlap doc, a one-term decoy, another
            # query's planted positive, and a random background doc; all
            # negatives are strictly grade 0
            neg_pool = [negatives[-1]]  # the zero-overlap doc
            if len(negatives) > 1:
                neg_pool.append(negatives[qi % (len(negatives) - 1)])  # a decoy
            other_pos = f"d{((qi + 1) % spec.n_queries) * n_planted:06d}"
            if qrels.grade(qid, other_pos) == 0:
                neg_pool.append(other_pos)
            attempts = 0
            while len(neg_pool) < 4 and n_bg_start < spec.n_docs and attempts < 100:
                cand = f"d{int(rng.integers(n_bg_start, spec.n_docs)):06d}"
                attempts += 1
                if qrels.grade(qid, cand) == 0 and cand not in neg_pool:
                    neg_pool.append(cand)
            # ~8 triples per query, cycling the pairing so every negative
            # type appears against several positives: with the fixed step
            # budget this gives the loop a few full passes over the data
            pairs = [
                (positives[i % len(positives)],
                 neg_pool[(i + i // len(neg_pool)) % len(neg_pool)])
                for i in range(8)
            ]
        for pos_id, neg_id in pairs:
            triples.append(
                (queries.entries[qid], collection.entries[pos_id], collection.entries[neg_id])
            )

    return collection, queries, qrels, triples
