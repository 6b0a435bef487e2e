"""Subword tokenizer and paired-input encoding.

Vocabulary construction is a simplified frequency-based approximation of
WordPiece training: all characters first, then the most frequent whole
words, then the most frequent "##" suffix pieces, until the target size
is reached. Tokenization is greedy longest-prefix matching with "##"
continuation pieces, falling back to [UNK].
"""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass, field

PAD, UNK, CLS, SEP = "[PAD]", "[UNK]", "[CLS]", "[SEP]"
RESERVED = [PAD, UNK, CLS, SEP]
PAD_ID, UNK_ID, CLS_ID, SEP_ID = 0, 1, 2, 3

_WORD_SPLIT = re.compile(r"\w+|[^\w\s]")


@dataclass
class Vocab:
    tokens: list[str]
    token_to_id: dict[str, int] = field(init=False)

    def __post_init__(self):
        self.token_to_id = {t: i for i, t in enumerate(self.tokens)}
        if len(self.token_to_id) != len(self.tokens):
            raise ValueError("duplicate tokens in vocabulary")
        for i, t in enumerate(RESERVED):
            if self.tokens[i] != t:
                raise ValueError(f"reserved token {t} missing at id {i}")

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_id

    def id(self, token: str) -> int:
        return self.token_to_id[token]


def save_vocab(vocab: Vocab, path):
    with open(path, "w", encoding="utf-8") as f:
        for t in vocab.tokens:
            f.write(t + "\n")


def load_vocab(path) -> Vocab:
    with open(path, "r", encoding="utf-8") as f:
        tokens = f.read().splitlines()
    return Vocab(tokens)


def _pretokenize(text: str) -> list[str]:
    """Lowercase and split into words and single punctuation marks."""
    return _WORD_SPLIT.findall(text.lower())


def build_vocab(texts, target_size: int) -> Vocab:
    """Greedy frequency-based vocabulary over `texts`.

    Ties broken lexicographically within each tier, so the result is
    deterministic for a given corpus.
    """
    word_freq = Counter()
    for text in texts:
        word_freq.update(_pretokenize(text))
    if not word_freq:
        raise ValueError("empty corpus")

    char_freq = Counter()
    for word, n in word_freq.items():
        for ch in word:
            char_freq[ch] += n

    if target_size < len(char_freq) + len(RESERVED):
        raise ValueError(
            f"target_size {target_size} below {len(char_freq)} distinct characters + {len(RESERVED)} reserved"
        )

    def by_freq(counter):
        return sorted(counter, key=lambda t: (-counter[t], t))

    tokens = list(RESERVED)
    tokens.extend(by_freq(char_freq))
    present = set(tokens)

    for word in by_freq(word_freq):
        if len(tokens) >= target_size:
            break
        if word not in present:
            tokens.append(word)
            present.add(word)

    if len(tokens) < target_size:
        suffix_freq = Counter()
        for word, n in word_freq.items():
            for i in range(1, len(word)):
                suffix_freq["##" + word[i:]] += n
        for piece in by_freq(suffix_freq):
            if len(tokens) >= target_size:
                break
            if piece not in present:
                tokens.append(piece)
                present.add(piece)

    return Vocab(tokens)


def tokenize_word(word: str, vocab: Vocab) -> list[str]:
    """Greedy longest-prefix decomposition of one word; [UNK] if stuck."""
    if word in vocab:
        return [word]
    pieces = []
    start = 0
    while start < len(word):
        end = len(word)
        match = None
        while end > start:
            piece = word[start:end]
            if start > 0:
                piece = "##" + piece
            if piece in vocab:
                match = piece
                break
            end -= 1
        if match is None:
            return [UNK]
        pieces.append(match)
        start = end
    return pieces


def tokenize(text: str, vocab: Vocab) -> list[str]:
    tokens = []
    for word in _pretokenize(text):
        tokens.extend(tokenize_word(word, vocab))
    return tokens


def detokenize(tokens: list[str]) -> str:
    """Merge "##" continuations back into words; inverse of tokenize up to
    whitespace/casing for in-vocab text."""
    words = []
    for t in tokens:
        if t.startswith("##") and words:
            words[-1] += t[2:]
        else:
            words.append(t)
    return " ".join(words)


@dataclass
class TokenizedPair:
    """Encoded [CLS] query [SEP] passage [SEP] input.

    Spans are inclusive (start, end) index pairs over `ids`, excluding
    the special-token positions; an empty side has span (start, start-1).
    """

    ids: list[int]
    segments: list[int]
    query_span: tuple[int, int]
    passage_span: tuple[int, int]
    sep_positions: tuple[int, int]

    @property
    def n_total(self) -> int:
        return len(self.ids)

    def span_ids(self, span: tuple[int, int]) -> list[int]:
        return self.ids[span[0]:span[1] + 1]

    def validate(self):
        if self.ids[0] != CLS_ID:
            raise ValueError("first token must be [CLS]")
        if [i for i, t in enumerate(self.ids) if t == SEP_ID] != list(self.sep_positions):
            raise ValueError("sep_positions inconsistent with ids")
        if len(self.segments) != len(self.ids):
            raise ValueError("segments length mismatch")


def encode_pair(query_text: str, passage_text: str, vocab: Vocab, max_len: int) -> TokenizedPair:
    """Encode a query/passage pair, truncating the passage tail first.

    Segments follow the BERT convention: positions up to and including
    the first [SEP] get segment 0, the rest segment 1.
    """
    if max_len < 8:
        raise ValueError("max_len must be >= 8")
    q_tokens = tokenize(query_text, vocab)
    if not q_tokens:
        raise ValueError("query is empty after tokenization")
    p_tokens = tokenize(passage_text, vocab)

    budget = max_len - 3
    if len(q_tokens) + len(p_tokens) > budget:
        keep_p = max(min(1, len(p_tokens)), budget - len(q_tokens))
        p_tokens = p_tokens[:keep_p]
        q_tokens = q_tokens[:budget - len(p_tokens)]

    ids = [CLS_ID] + [vocab.id(t) for t in q_tokens] + [SEP_ID] \
        + [vocab.id(t) for t in p_tokens] + [SEP_ID]
    first_sep = 1 + len(q_tokens)
    second_sep = len(ids) - 1
    segments = [0] * (first_sep + 1) + [1] * (len(ids) - first_sep - 1)
    pair = TokenizedPair(
        ids=ids,
        segments=segments,
        query_span=(1, first_sep - 1),
        passage_span=(first_sep + 1, second_sep - 1),
        sep_positions=(first_sep, second_sep),
    )
    pair.validate()
    return pair


def decode_ids(ids: list[int], vocab: Vocab) -> list[str]:
    return [vocab.tokens[i] for i in ids]
