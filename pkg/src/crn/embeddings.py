"""Word inventory, embedding vectors, and pseudo-object pairing.

The vocabulary splits into in-domain words (what the captioner may emit),
novel words (held out of training entirely), and pseudo-source words
(in-domain words that are swapped for their nearest in-domain neighbour
during training so the model learns what "an unfamiliar object" looks like).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import EmbeddingError, VocabularyError

log = logging.getLogger("crn.embeddings")

START = "<start>"
END = "<end>"
UNK = "<unk>"


@dataclass(frozen=True)
class Vocabulary:
    """Ordered word list with the in-domain / novel / pseudo-source split.

    Indices are dense 0..len(words)-1. ``in_domain`` holds every word the
    captioner may be trained on or emit (includes END and UNK, excludes
    START and all novel words).
    """

    words: tuple[str, ...]
    in_domain: frozenset[int]
    novel: frozenset[int]
    pseudo_sources: frozenset[int]
    start_id: int
    end_id: int
    unk_id: int
    index: dict[str, int] = field(repr=False, default_factory=dict)

    def __post_init__(self):
        if len(set(self.words)) != len(self.words):
            raise VocabularyError("duplicate words in vocabulary")
        if any(w != w.lower() for w in self.words):
            raise VocabularyError("vocabulary words must be lowercase")
        if self.novel & self.in_domain:
            raise VocabularyError("novel words must not be in-domain")
        if not self.pseudo_sources <= self.in_domain:
            raise VocabularyError("pseudo sources must be in-domain")
        specials = {self.start_id, self.end_id, self.unk_id}
        if len(specials) != 3:
            raise VocabularyError("START/END/UNK ids must be distinct")
        if specials & self.novel:
            raise VocabularyError("specials cannot be novel words")
        n = len(self.words)
        for i in (self.in_domain | self.novel | specials):
            if not 0 <= i < n:
                raise VocabularyError(f"word id {i} out of range 0..{n - 1}")
        object.__setattr__(self, "index", {w: i for i, w in enumerate(self.words)})

    def __len__(self) -> int:
        return len(self.words)

    def id_of(self, word: str) -> int:
        try:
            return self.index[word]
        except KeyError:
            raise VocabularyError(f"word {word!r} not in vocabulary") from None

    def word_of(self, word_id: int) -> str:
        return self.words[word_id]

    def emittable_ids(self) -> np.ndarray:
        """Sorted ids the captioner may produce (the in-domain set)."""
        return np.array(sorted(self.in_domain), dtype=np.int64)


def build_vocabulary(
    in_domain_words: list[str],
    novel_words: list[str],
    pseudo_source_words: list[str],
) -> Vocabulary:
    """Assemble a vocabulary with specials first, then the given words."""
    words = [START, END, UNK]
    for w in in_domain_words + novel_words:
        if w in (START, END, UNK):
            raise VocabularyError(f"{w!r} collides with a special token")
        words.append(w)
    vocab_words = tuple(words)
    index = {w: i for i, w in enumerate(vocab_words)}
    in_domain = {index[w] for w in in_domain_words} | {index[END], index[UNK]}
    novel = {index[w] for w in novel_words}
    sources = {index[w] for w in pseudo_source_words}
    return Vocabulary(
        words=vocab_words,
        in_domain=frozenset(in_domain),
        novel=frozenset(novel),
        pseudo_sources=frozenset(sources),
        start_id=index[START],
        end_id=index[END],
        unk_id=index[UNK],
    )


class EmbeddingTable:
    """Fixed word-vector lookup (float32), one non-zero vector per token."""

    def __init__(self, tokens: list[str], vectors: np.ndarray):
        vectors = np.asarray(vectors, dtype=np.float32)
        if vectors.ndim != 2 or len(tokens) != vectors.shape[0]:
            raise EmbeddingError("need one vector per token")
        if len(set(tokens)) != len(tokens):
            raise EmbeddingError("duplicate tokens in embedding table")
        norms = np.linalg.norm(vectors.astype(np.float64), axis=1)
        if np.any(norms == 0.0):
            bad = tokens[int(np.argmin(norms))]
            raise EmbeddingError(f"zero vector for token {bad!r} (cosine undefined)")
        self.tokens = list(tokens)
        self.vectors = vectors
        self.dim = int(vectors.shape[1])
        self.index = {t: i for i, t in enumerate(tokens)}

    def __contains__(self, token: str) -> bool:
        return token in self.index

    def vector(self, token: str) -> np.ndarray:
        try:
            return self.vectors[self.index[token]]
        except KeyError:
            raise EmbeddingError(f"token {token!r} has no embedding") from None


def cosine(u: np.ndarray, v: np.ndarray) -> float:
    """Cosine similarity in [-1, 1]; raises on zero-norm input."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise EmbeddingError(f"shape mismatch {u.shape} vs {v.shape}")
    nu = np.linalg.norm(u)
    nv = np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        raise EmbeddingError("cosine of a zero-norm vector is undefined")
    score = float(np.dot(u, v) / (nu * nv))
    return min(1.0, max(-1.0, score))


def embed_name(name: str, table: EmbeddingTable) -> np.ndarray:
    """Embed an object-class name; multi-token names average their tokens.

    Tokens missing from the table fall back to the UNK vector (with a
    warning) so the mean stays defined; if no token is known, that is an
    error.
    """
    tokens = name.lower().split()
    if not tokens:
        raise EmbeddingError("empty object name")
    vectors = []
    known = 0
    for tok in tokens:
        if tok in table:
            vectors.append(table.vector(tok))
            known += 1
        elif UNK in table:
            log.warning("token %r of name %r not in table; using UNK", tok, name)
            vectors.append(table.vector(UNK))
        else:
            raise EmbeddingError(f"token {tok!r} not in table and no UNK vector")
    if known == 0:
        raise EmbeddingError(f"no token of name {name!r} has an embedding")
    return np.mean(np.stack(vectors), axis=0).astype(np.float32)


def stem_related(a: str, b: str) -> bool:
    """Trivial plural/stem test used to exclude degenerate pseudo pairs.

    Related when one word is the other plus "s"/"es", or one is a prefix of
    the other with a length difference of at most 2.
    """
    if a == b:
        return True
    for x, y in ((a, b), (b, a)):
        if y == x + "s" or y == x + "es":
            return True
        if y.startswith(x) and len(y) - len(x) <= 2:
            return True
    return False


def nearest_in_domain(
    word: str, table: EmbeddingTable, vocab: Vocabulary
) -> tuple[str, float]:
    """Most cosine-similar eligible in-domain word.

    Candidates are in-domain words that are not pseudo sources, not the word
    itself, and not stem-related to it. Exact ties break toward the lower
    word index.
    """
    query = embed_name(word, table)
    best_id = -1
    best_score = -np.inf
    excluded: list[str] = []
    for wid in sorted(vocab.in_domain - vocab.pseudo_sources):
        cand = vocab.words[wid]
        if cand == word:
            continue
        if stem_related(word, cand):
            excluded.append(cand)
            continue
        if cand not in table:
            continue
        score = cosine(query, table.vector(cand))
        if score > best_score:
            best_id = wid
            best_score = score
    if best_id < 0:
        raise VocabularyError(
            f"no eligible pseudo candidate for {word!r}"
            f" (stem-excluded: {excluded or 'none'})"
        )
    return vocab.words[best_id], float(best_score)


@dataclass(frozen=True)
class PseudoMap:
    """source word -> (pseudo word, cosine score) for every pseudo source."""

    pairs: dict[str, str]
    similarity: dict[str, float]

    def pseudo(self, word: str) -> str:
        return self.pairs[word]

    def __len__(self) -> int:
        return len(self.pairs)


def build_pseudo_map(vocab: Vocabulary, table: EmbeddingTable) -> PseudoMap:
    """Pair every pseudo-source word with its nearest eligible neighbour."""
    if not vocab.pseudo_sources:
        raise VocabularyError("pseudo-source set is empty")
    pairs: dict[str, str] = {}
    scores: dict[str, float] = {}
    for wid in sorted(vocab.pseudo_sources):
        word = vocab.words[wid]
        try:
            pseudo, score = nearest_in_domain(word, table, vocab)
        except (VocabularyError, EmbeddingError) as exc:
            raise VocabularyError(f"pseudo pairing failed for {word!r}: {exc}") from exc
        pairs[word] = pseudo
        scores[word] = score
    return PseudoMap(pairs=pairs, similarity=scores)


def save_table(table: EmbeddingTable, path) -> None:
    """Write the TSV format: '#dim D' header then token<TAB>floats lines."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"#dim {table.dim}\n")
        for token, row in zip(table.tokens, table.vectors):
            values = "\t".join(repr(float(x)) for x in row)
            fh.write(f"{token}\t{values}\n")


def load_table(path) -> EmbeddingTable:
    """Load the TSV format written by save_table; duplicates are an error."""
    tokens: list[str] = []
    rows: list[np.ndarray] = []
    seen: set[str] = set()
    dim = None
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            if lineno == 1:
                parts = line.split()
                if len(parts) != 2 or parts[0] != "#dim":
                    raise EmbeddingError(f"{path}:1: expected '#dim <D>' header")
                try:
                    dim = int(parts[1])
                except ValueError:
                    raise EmbeddingError(f"{path}:1: bad dimension {parts[1]!r}") from None
                if dim <= 0:
                    raise EmbeddingError(f"{path}:1: dimension must be positive")
                continue
            fields = line.split("\t")
            if dim is None or len(fields) != dim + 1:
                raise EmbeddingError(
                    f"{path}:{lineno}: expected 1 token + {dim} floats,"
                    f" got {len(fields)} fields"
                )
            token = fields[0]
            if token in seen:
                raise EmbeddingError(f"{path}:{lineno}: duplicate token {token!r}")
            seen.add(token)
            try:
                row = np.array([float(x) for x in fields[1:]], dtype=np.float32)
            except ValueError:
                raise EmbeddingError(f"{path}:{lineno}: bad float literal") from None
            tokens.append(token)
            rows.append(row)
    if dim is None or not tokens:
        raise EmbeddingError(f"{path}: empty embedding file")
    return EmbeddingTable(tokens, np.stack(rows))
