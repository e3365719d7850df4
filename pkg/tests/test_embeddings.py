"""Vocabulary, cosine geometry, name embedding, and pseudo-object pairing."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from crn import synthworld as sw
from crn.config import DataConfig, WorldConfig
from crn.embeddings import (
    EmbeddingTable,
    Vocabulary,
    build_pseudo_map,
    build_vocabulary,
    cosine,
    embed_name,
    load_table,
    nearest_in_domain,
    save_table,
    stem_related,
)
from crn.errors import EmbeddingError, VocabularyError

from conftest import small_vocab


# --- cosine -----------------------------------------------------------------


def test_cosine_self_similarity():
    v = np.array([0.3, -1.2, 0.5])
    assert cosine(v, v) == pytest.approx(1.0)


def test_cosine_orthogonal():
    assert cosine([1.0, 0.0], [0.0, 1.0]) == pytest.approx(0.0)


def test_cosine_antipodal():
    v = np.array([0.4, 2.0, -1.0])
    assert cosine(v, -v) == pytest.approx(-1.0)


def test_cosine_zero_vector_rejected():
    with pytest.raises(EmbeddingError):
        cosine([0.0, 0.0], [1.0, 0.0])
    with pytest.raises(EmbeddingError):
        cosine([1.0, 0.0], [0.0, 0.0])


def test_cosine_shape_mismatch():
    with pytest.raises(EmbeddingError):
        cosine([1.0, 0.0], [1.0, 0.0, 0.0])


@settings(max_examples=200, deadline=None)
@given(
    st.lists(st.floats(-10, 10), min_size=2, max_size=8),
    st.lists(st.floats(-10, 10), min_size=2, max_size=8),
)
def test_cosine_symmetric_and_bounded(u, v):
    n = min(len(u), len(v))
    u, v = np.array(u[:n]), np.array(v[:n])
    if np.linalg.norm(u) == 0 or np.linalg.norm(v) == 0:
        return
    a = cosine(u, v)
    b = cosine(v, u)
    assert a == pytest.approx(b, abs=1e-12)
    assert -1.0 <= a <= 1.0


# --- embed_name -------------------------------------------------------------


def _table(entries: dict[str, list[float]]) -> EmbeddingTable:
    return EmbeddingTable(list(entries), np.array(list(entries.values()), np.float32))


def test_embed_name_single_token_passthrough():
    table = _table({"horse": [1.0, 2.0], "<unk>": [0.5, 0.5]})
    np.testing.assert_allclose(embed_name("horse", table), [1.0, 2.0])


def test_embed_name_two_tokens_average():
    table = _table({"hot": [1.0, 0.0], "dog": [0.0, 1.0], "<unk>": [9.0, 9.0]})
    np.testing.assert_allclose(embed_name("hot dog", table), [0.5, 0.5])


def test_embed_name_mean_idempotent():
    table = _table({"hot": [2.0, 4.0], "<unk>": [1.0, 1.0]})
    np.testing.assert_allclose(embed_name("hot hot", table), [2.0, 4.0])


def test_embed_name_unknown_token_uses_unk(caplog):
    table = _table({"dog": [0.0, 2.0], "<unk>": [2.0, 0.0]})
    with caplog.at_level("WARNING", logger="crn.embeddings"):
        vec = embed_name("frumious dog", table)
    np.testing.assert_allclose(vec, [1.0, 1.0])
    assert any("frumious" in r.message for r in caplog.records)


def test_embed_name_all_unknown_is_error():
    table = _table({"dog": [0.0, 2.0], "<unk>": [2.0, 0.0]})
    with pytest.raises(EmbeddingError):
        embed_name("frumious bandersnatch", table)


def test_embed_name_empty_is_error():
    table = _table({"dog": [0.0, 2.0]})
    with pytest.raises(EmbeddingError):
        embed_name("   ", table)


# --- stem exclusion ----------------------------------------------------------


@pytest.mark.parametrize(
    "a,b,related",
    [
        ("sandwich", "sandwiches", True),
        ("umbrella", "umbrellas", True),
        ("box", "boxes", True),
        ("car", "cart", True),      # prefix, diff 1
        ("car", "carpet", False),   # prefix, diff 3
        ("horse", "zebra", False),
        ("dog", "dog", True),
    ],
)
def test_stem_related_cases(a, b, related):
    assert stem_related(a, b) is related
    assert stem_related(b, a) is related


# --- vocabulary invariants ----------------------------------------------------


def test_vocabulary_rejects_novel_in_domain_overlap():
    with pytest.raises(VocabularyError):
        Vocabulary(
            words=("<start>", "<end>", "<unk>", "dog"),
            in_domain=frozenset({1, 2, 3}),
            novel=frozenset({3}),
            pseudo_sources=frozenset(),
            start_id=0, end_id=1, unk_id=2,
        )


def test_vocabulary_rejects_duplicates():
    with pytest.raises(VocabularyError):
        build_vocabulary(["dog", "dog"], [], [])


def test_vocabulary_sources_must_be_in_domain():
    with pytest.raises(VocabularyError):
        Vocabulary(
            words=("<start>", "<end>", "<unk>", "dog", "cat"),
            in_domain=frozenset({1, 2, 3}),
            novel=frozenset({4}),
            pseudo_sources=frozenset({4}),
            start_id=0, end_id=1, unk_id=2,
        )


def test_build_vocabulary_structure():
    vocab = build_vocabulary(["a", "dog"], ["zebra"], ["dog"])
    assert vocab.id_of("<start>") == vocab.start_id
    assert vocab.id_of("zebra") in vocab.novel
    assert vocab.id_of("dog") in vocab.pseudo_sources
    assert vocab.id_of("<end>") in vocab.in_domain
    assert vocab.start_id not in vocab.in_domain
    assert sorted(set(range(len(vocab)))) == list(range(len(vocab.words)))


# --- nearest_in_domain --------------------------------------------------------


def test_nearest_forced_choice():
    # exactly one eligible candidate: chosen regardless of score
    vocab = build_vocabulary(["query", "onlyone"], [], ["query"])
    table = _table({
        "<start>": [1, 0], "<end>": [0, 1], "<unk>": [1, 1],
        "query": [1.0, 0.0], "onlyone": [-1.0, 0.01],
    })
    # specials score higher than onlyone but <start> is not in-domain;
    # <end>/<unk> are, so restrict to a crafted case without them
    vocab2 = Vocabulary(
        words=tuple(vocab.words),
        in_domain=frozenset({vocab.id_of("query"), vocab.id_of("onlyone")}),
        novel=frozenset(),
        pseudo_sources=frozenset({vocab.id_of("query")}),
        start_id=vocab.start_id, end_id=vocab.end_id, unk_id=vocab.unk_id,
    )
    word, score = nearest_in_domain("query", table, vocab2)
    assert word == "onlyone"
    assert score == pytest.approx(cosine([1, 0], [-1, 0.01]))


def test_nearest_never_self_never_novel_matches_bruteforce():
    vocab, table = small_vocab(n_words=40, n_novel=6, n_sources=8, seed=3)
    sources = [vocab.words[i] for i in sorted(vocab.pseudo_sources)]
    for word in sources:
        got_word, got_score = nearest_in_domain(word, table, vocab)
        assert got_word != word
        assert vocab.id_of(got_word) not in vocab.novel
        # independent exhaustive scan
        best, best_score = None, -np.inf
        for wid in range(len(vocab.words)):
            cand = vocab.words[wid]
            if wid not in vocab.in_domain or wid in vocab.pseudo_sources:
                continue
            if cand == word or stem_related(word, cand):
                continue
            s = cosine(table.vector(word), table.vector(cand))
            if s > best_score:
                best, best_score = cand, s
        assert got_word == best
        assert got_score == pytest.approx(best_score)


def test_nearest_bruteforce_large_table():
    vocab, table = small_vocab(n_words=1000, n_novel=50, n_sources=30, seed=9)
    word = vocab.words[sorted(vocab.pseudo_sources)[0]]
    got_word, got_score = nearest_in_domain(word, table, vocab)
    query = table.vector(word)
    mat = table.vectors.astype(np.float64)
    sims = mat @ query.astype(np.float64)
    sims /= np.linalg.norm(mat, axis=1) * np.linalg.norm(query)
    eligible = sorted(vocab.in_domain - vocab.pseudo_sources - {vocab.id_of(word)})
    eligible = [i for i in eligible if not stem_related(word, vocab.words[i])]
    best = eligible[int(np.argmax(sims[eligible]))]
    assert got_word == vocab.words[best]


def test_nearest_tie_breaks_to_lower_index():
    vocab = build_vocabulary(["q", "tie1", "tie2"], [], ["q"])
    table = _table({
        "<start>": [0, 1], "<end>": [0, -1], "<unk>": [-1, 0],
        "q": [1.0, 0.0], "tie1": [2.0, 0.0], "tie2": [3.0, 0.0],
    })
    word, score = nearest_in_domain("q", vocab=vocab, table=table)
    assert word == "tie1"  # same cosine 1.0; lower index wins
    assert score == pytest.approx(1.0)


def test_nearest_no_candidates_error_names_exclusions():
    vocab = build_vocabulary(["sandwich", "sandwiches"], [], ["sandwich"])
    table = _table({
        "<start>": [1, 0], "<end>": [0, 1], "<unk>": [1, 1],
        "sandwich": [1.0, 0.0], "sandwiches": [1.0, 0.1],
    })
    vocab2 = Vocabulary(
        words=tuple(vocab.words),
        in_domain=frozenset({vocab.id_of("sandwich"), vocab.id_of("sandwiches")}),
        novel=frozenset(),
        pseudo_sources=frozenset({vocab.id_of("sandwich")}),
        start_id=vocab.start_id, end_id=vocab.end_id, unk_id=vocab.unk_id,
    )
    with pytest.raises(VocabularyError, match="sandwiches"):
        nearest_in_domain("sandwich", table, vocab2)


# --- build_pseudo_map ---------------------------------------------------------


def test_pseudo_map_paper_style_pairs():
    """Hand-crafted table reproducing the published exemplar pairs through
    the TSV ingestion path (no real pretrained vectors in this repo)."""
    entries = {
        "<start>": [0.0, 0.0, 1.0],
        "<end>": [0.0, 1.0, 0.0],
        "<unk>": [0.7, 0.7, 0.0],
        "umbrella": [1.0, 0.1, 0.0],
        "parasol": [1.0, 0.0, 0.0],
        "sandwich": [0.0, 1.0, 0.2],
        "burger": [0.1, 1.0, 0.2],
        "zebra": [0.3, 0.2, 1.0],
        "horse": [0.3, 0.1, 1.0],
    }
    table = _table(entries)
    vocab = build_vocabulary(
        ["umbrella", "parasol", "sandwich", "burger", "zebra", "horse"],
        [],
        ["umbrella", "sandwich", "zebra"],
    )
    pm = build_pseudo_map(vocab, table)
    assert pm.pairs == {"umbrella": "parasol", "sandwich": "burger", "zebra": "horse"}
    for w, score in pm.similarity.items():
        assert score == pytest.approx(
            cosine(entries[w], entries[pm.pairs[w]]), abs=1e-6
        )


def test_pseudo_map_size_one():
    vocab, table = small_vocab(n_words=6, n_sources=1, seed=2)
    pm = build_pseudo_map(vocab, table)
    assert len(pm) == 1


def test_pseudo_map_empty_sources_error():
    vocab, table = small_vocab(n_words=6, n_sources=0)
    with pytest.raises(VocabularyError):
        build_pseudo_map(vocab, table)


def test_pseudo_map_deterministic():
    vocab, table = small_vocab(n_words=30, n_novel=4, n_sources=6, seed=5)
    a = build_pseudo_map(vocab, table)
    b = build_pseudo_map(vocab, table)
    assert a.pairs == b.pairs
    assert a.similarity == b.similarity


def test_pseudo_map_stays_in_generator_categories():
    world = sw.gen_world(WorldConfig(n_classes=24, n_categories=6, d_v=24,
                                     d_e=16, d_image=24), 4)
    ds = sw.gen_dataset(world, DataConfig(n_train=20, n_val=5, n_test=10,
                                          novel_count=3, pseudo_count=6), 4)
    for src, dst in ds.pseudo_map.pairs.items():
        assert world.class_named(src).category_id == world.class_named(dst).category_id


def test_pseudo_map_error_names_offending_word():
    vocab = build_vocabulary(["lonely", "lonelys"], [], ["lonely"])
    table = _table({
        "<start>": [1, 0], "<end>": [0, 1], "<unk>": [1, 1],
        "lonely": [1.0, 0.0], "lonelys": [1.0, 0.1],
    })
    vocab2 = Vocabulary(
        words=tuple(vocab.words),
        in_domain=frozenset({vocab.id_of("lonely"), vocab.id_of("lonelys")}),
        novel=frozenset(),
        pseudo_sources=frozenset({vocab.id_of("lonely")}),
        start_id=vocab.start_id, end_id=vocab.end_id, unk_id=vocab.unk_id,
    )
    with pytest.raises(VocabularyError, match="lonely"):
        build_pseudo_map(vocab2, table)


# --- embedding table and TSV format -------------------------------------------


def test_table_rejects_zero_vector():
    with pytest.raises(EmbeddingError):
        _table({"ok": [1.0, 0.0], "zero": [0.0, 0.0]})


def test_table_rejects_duplicates():
    with pytest.raises(EmbeddingError):
        EmbeddingTable(["a", "a"], np.ones((2, 3), np.float32))


def test_tsv_round_trip(tmp_path):
    vocab, table = small_vocab(n_words=12, seed=8)
    path = tmp_path / "emb.tsv"
    save_table(table, path)
    loaded = load_table(path)
    assert loaded.tokens == table.tokens
    assert loaded.dim == table.dim
    np.testing.assert_array_equal(loaded.vectors, table.vectors)


def test_tsv_duplicate_token_rejected(tmp_path):
    path = tmp_path / "dup.tsv"
    path.write_text("#dim 2\nfoo\t1.0\t0.0\nfoo\t0.0\t1.0\n")
    with pytest.raises(EmbeddingError, match="duplicate"):
        load_table(path)


def test_tsv_bad_header_rejected(tmp_path):
    path = tmp_path / "bad.tsv"
    path.write_text("dim 2\nfoo\t1.0\t0.0\n")
    with pytest.raises(EmbeddingError, match="header"):
        load_table(path)


def test_tsv_wrong_width_reports_line(tmp_path):
    path = tmp_path / "wide.tsv"
    path.write_text("#dim 2\nfoo\t1.0\t0.0\nbar\t1.0\n")
    with pytest.raises(EmbeddingError, match=":3"):
        load_table(path)
