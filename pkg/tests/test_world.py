"""Synthetic world generation, dataset protocol, and detector simulation."""

import json

import numpy as np
import pytest

from crn.config import DataConfig, DetectorNoise, WorldConfig, stream_rng
from crn import synthworld as sw
from crn.embeddings import cosine, load_table, save_table
from crn.errors import DataFormatError, DimensionError, VocabularyError

from conftest import tiny_data_config, tiny_world_config


def _small_world(seed=0, **kw):
    defaults = dict(n_classes=18, n_categories=6, d_v=16, d_e=12, d_image=16)
    defaults.update(kw)
    return sw.gen_world(WorldConfig(**defaults), seed)


# --- gen_world ---------------------------------------------------------------


def test_world_determinism():
    a = _small_world(3)
    b = _small_world(3)
    assert [c.name for c in a.classes] == [c.name for c in b.classes]
    np.testing.assert_array_equal(a.prototype_matrix(), b.prototype_matrix())
    np.testing.assert_array_equal(a.table.vectors, b.table.vectors)


def test_world_category_count_exceeds_classes():
    with pytest.raises(DimensionError):
        sw.gen_world(WorldConfig(n_classes=4, n_categories=5), 0)


def test_world_single_category_cosines_above_floor():
    config = WorldConfig(n_classes=8, n_categories=1, d_v=16, d_e=12,
                         d_image=16, embed_noise=0.06, cross_floor=0.5)
    world = sw.gen_world(config, 1)
    vecs = np.stack([world.table.vector(c.name) for c in world.classes])
    for i in range(len(vecs)):
        for j in range(i + 1, len(vecs)):
            assert cosine(vecs[i], vecs[j]) > config.cross_floor


def test_world_within_category_beats_cross_category():
    world = _small_world(2, embed_noise=0.06)
    within, cross = [], []
    for a in world.classes:
        for b in world.classes:
            if b.class_id <= a.class_id:
                continue
            va = world.table.vector(a.name)
            vb = world.table.vector(b.name)
            (within if a.category_id == b.category_id else cross).append(
                cosine(va, vb)
            )
    assert np.mean(within) > np.mean(cross)
    # and the same structural claim for visual prototypes
    within_p, cross_p = [], []
    for a in world.classes:
        for b in world.classes:
            if b.class_id <= a.class_id:
                continue
            s = cosine(a.prototype, b.prototype)
            (within_p if a.category_id == b.category_id else cross_p).append(s)
    assert np.mean(within_p) > np.mean(cross_p)


def test_world_prototypes_unit_norm_and_names_unique():
    world = _small_world(5)
    for c in world.classes:
        assert np.linalg.norm(c.prototype) == pytest.approx(1.0, abs=1e-5)
    names = [c.name for c in world.classes]
    assert len(set(names)) == len(names)


# --- gen_dataset --------------------------------------------------------------


@pytest.fixture(scope="module")
def dataset():
    world = sw.gen_world(tiny_world_config(), 7)
    return sw.gen_dataset(world, tiny_data_config(), 7)


def test_heldout_hygiene(dataset):
    novel_names = set(dataset.novel_words())
    for split in ("train", "val"):
        for scene in dataset.splits[split]:
            assert not (set(scene.object_ids) & set(dataset.novel_class_ids))
            for caption in scene.captions:
                assert not (set(caption) & novel_names)


def test_heldout_count_default_eight():
    world = sw.gen_world(WorldConfig(), 0)
    ds = sw.gen_dataset(world, DataConfig(n_train=10, n_val=5, n_test=10), 0)
    assert len(ds.novel_class_ids) == 8
    assert len(ds.pseudo_source_class_ids) == 20


def test_heldout_explicit_names():
    world = _small_world(1)
    names = [world.classes[0].name, world.classes[7].name]
    config = DataConfig(n_train=10, n_val=2, n_test=5, novel_classes=names,
                        pseudo_count=4)
    ds = sw.gen_dataset(world, config, 1)
    assert sorted(ds.novel_words()) == sorted(names)
    assert set(ds.novel_class_ids) == {0, 7}


def test_heldout_unknown_name_error():
    world = _small_world(1)
    config = DataConfig(novel_classes=["nosuchthing"], pseudo_count=2)
    with pytest.raises(VocabularyError):
        sw.gen_dataset(world, config, 1)


def test_every_caption_mentions_every_object_once(dataset):
    for split, scenes in dataset.splits.items():
        for scene in scenes:
            names = [dataset.world.classes[i].name for i in scene.object_ids]
            for caption in scene.captions:
                for name in names:
                    assert caption.count(name) == 1


def test_test_split_has_novel_scenes(dataset):
    novel = set(dataset.novel_class_ids)
    with_novel = [
        s for s in dataset.splits["test"] if set(s.object_ids) & novel
    ]
    assert with_novel
    for s in with_novel:
        assert len(set(s.object_ids) & novel) == 1  # at most one per scene


def test_image_features_unit_norm(dataset):
    for scene in dataset.splits["train"][:50]:
        assert np.linalg.norm(scene.image_feature) == pytest.approx(1.0, abs=1e-5)


def test_dataset_regeneration_identical_bytes(tmp_path):
    world = _small_world(9)
    config = DataConfig(n_train=30, n_val=5, n_test=20, novel_count=2,
                        pseudo_count=4)
    blobs = []
    for rep in range(2):
        ds = sw.gen_dataset(world, config, 17)
        path = tmp_path / f"d{rep}.jsonl"
        sw.write_split(ds, "train", path)
        sw.write_world(ds, tmp_path / f"w{rep}.json")
        dets = sw.simulate_split_detectors(ds, "test", 17)
        sw.write_detections(dets, world, tmp_path / f"det{rep}.jsonl")
        blobs.append(
            (path.read_bytes(), (tmp_path / f"w{rep}.json").read_bytes(),
             (tmp_path / f"det{rep}.jsonl").read_bytes())
        )
    assert blobs[0] == blobs[1]


# --- apply_pseudo_substitution -------------------------------------------------


def test_substitution_flags_source_words():
    from crn.embeddings import PseudoMap, build_vocabulary

    vocab = build_vocabulary(["a", "zebra", "horse"], [], ["zebra"])
    pm = PseudoMap(pairs={"zebra": "horse"}, similarity={"zebra": 0.9})
    caption = [[vocab.id_of("a"), vocab.id_of("zebra")]]
    [tokens] = sw.apply_pseudo_substitution(caption, pm, vocab)
    assert tokens[0] == sw.TrainingToken(vocab.id_of("a"), 0, vocab.id_of("a"))
    assert tokens[1] == sw.TrainingToken(
        vocab.id_of("horse"), 1, vocab.id_of("zebra")
    )


def test_substitution_identity_without_sources():
    from crn.embeddings import PseudoMap, build_vocabulary

    vocab = build_vocabulary(["a", "dog"], [], [])
    pm = PseudoMap(pairs={}, similarity={})
    caption = [[vocab.id_of("a"), vocab.id_of("dog")]]
    [tokens] = sw.apply_pseudo_substitution(caption, pm, vocab)
    assert all(t.novel_label == 0 for t in tokens)
    assert [t.word_id for t in tokens] == caption[0]


def test_substitution_uncovered_source_error():
    from crn.embeddings import PseudoMap, build_vocabulary

    vocab = build_vocabulary(["a", "zebra", "horse"], [], ["zebra"])
    pm = PseudoMap(pairs={}, similarity={})
    with pytest.raises(VocabularyError, match="zebra"):
        sw.apply_pseudo_substitution([[vocab.id_of("zebra")]], pm, vocab)


def test_substitution_label_count_matches_source_occurrences(dataset):
    """Count flagged tokens against an independent scan of the captions."""
    source_names = {
        dataset.world.classes[i].name for i in dataset.pseudo_source_class_ids
    }
    scenes = dataset.splits["train"][:100]
    expected = sum(
        sum(1 for w in caption if w in source_names)
        for scene in scenes
        for caption in scene.captions
    )
    got = 0
    for scene in scenes:
        ids = [[dataset.vocab.id_of(w) for w in c] for c in scene.captions]
        for tokens in sw.apply_pseudo_substitution(ids, dataset.pseudo_map,
                                                   dataset.vocab):
            got += sum(t.novel_label for t in tokens)
    assert got == expected
    assert expected > 0


def test_training_token_invariant():
    with pytest.raises(VocabularyError):
        sw.TrainingToken(word_id=3, novel_label=0, original_word_id=5)
    with pytest.raises(VocabularyError):
        sw.TrainingToken(word_id=3, novel_label=2, original_word_id=3)


# --- simulate_detector ----------------------------------------------------------


def test_detector_zero_noise_exact(dataset):
    noise = DetectorNoise()
    for scene in dataset.splits["test"][:40]:
        dets = sw.simulate_detector(scene, dataset.world, noise, 123)
        assert sorted(d.top_class for d in dets.detections) == sorted(scene.object_ids)
        for d in dets.detections:
            np.testing.assert_array_equal(
                d.feature, dataset.world.classes[d.top_class].prototype
            )
            assert d.class_scores[d.top_class] == pytest.approx(1.0)


def test_detector_miss_rate_one_empty(dataset):
    noise = DetectorNoise(miss_rate=1.0)
    scene = dataset.splits["test"][0]
    dets = sw.simulate_detector(scene, dataset.world, noise, 5)
    assert len(dets) == 0


def test_detector_miss_rate_monte_carlo():
    """Empirical miss fraction over many simulations: 0.2 within 0.01."""
    world = _small_world(4)
    scene = sw.Scene(0, [0, 1, 2], np.zeros(16, np.float32), [["a", "x"]], "test")
    noise = DetectorNoise(miss_rate=0.2)
    total = kept = 0
    rng = stream_rng(0, "test.montecarlo")
    for _ in range(10_000):
        dets = sw.simulate_detector(scene, world, noise, int(rng.integers(2**63)))
        kept += len(dets)
        total += 3
    assert (total - kept) / total == pytest.approx(0.2, abs=0.01)


def test_detector_confusion_spreads_in_category():
    world = _small_world(6)
    scene = sw.Scene(0, [0], np.zeros(16, np.float32), [["a", "x"]], "test")
    noise = DetectorNoise(confusion_rate=0.3)
    dets = sw.simulate_detector(scene, world, noise, 9)
    scores = dets.detections[0].class_scores
    assert scores[0] == pytest.approx(0.7, abs=1e-6)
    peers = [c.class_id for c in world.category_members(world.classes[0].category_id)
             if c.class_id != 0]
    assert np.sum(scores[peers]) == pytest.approx(0.3, abs=1e-6)
    assert np.sum(scores) == pytest.approx(1.0, abs=1e-6)


def test_detector_deterministic(dataset):
    scene = dataset.splits["test"][3]
    noise = DetectorNoise(miss_rate=0.3, feature_sigma=0.1)
    a = sw.simulate_detector(scene, dataset.world, noise, 77)
    b = sw.simulate_detector(scene, dataset.world, noise, 77)
    assert len(a) == len(b)
    for da, db in zip(a.detections, b.detections):
        np.testing.assert_array_equal(da.feature, db.feature)


def test_detector_orders_by_top_score():
    world = _small_world(8)
    scene = sw.Scene(0, [0, 1, 6], np.zeros(16, np.float32), [["a"]], "test")
    dets = sw.simulate_detector(scene, world, DetectorNoise(confusion_rate=0.4), 3)
    tops = [float(d.class_scores[d.top_class]) for d in dets.detections]
    assert tops == sorted(tops, reverse=True)


# --- file formats ----------------------------------------------------------------


def test_split_round_trip(tmp_path, dataset):
    save_table(dataset.world.table, tmp_path / "emb.tsv")
    sw.write_world(dataset, tmp_path / "world.json")
    sw.write_split(dataset, "test", tmp_path / "test.jsonl")
    table = load_table(tmp_path / "emb.tsv")
    loaded = sw.load_world(tmp_path / "world.json", table)
    scenes = sw.load_split(loaded, "test", tmp_path / "test.jsonl")
    assert len(scenes) == len(dataset.splits["test"])
    for a, b in zip(scenes, dataset.splits["test"]):
        assert a.scene_id == b.scene_id
        assert a.object_ids == b.object_ids
        assert a.captions == b.captions
        np.testing.assert_array_equal(a.image_feature, b.image_feature)
    assert loaded.vocab.words == dataset.vocab.words
    assert loaded.pseudo_map.pairs == dataset.pseudo_map.pairs


def test_detections_round_trip(tmp_path, dataset):
    dets = sw.simulate_split_detectors(dataset, "test", 7)
    path = tmp_path / "dets.jsonl"
    sw.write_detections(dets, dataset.world, path)
    loaded = sw.load_detections(
        path, dataset.world.config.d_v, len(dataset.world.classes)
    )
    assert set(loaded) == set(dets)
    sid = next(iter(dets))
    for a, b in zip(loaded[sid].detections, dets[sid].detections):
        np.testing.assert_array_equal(a.feature, b.feature)
        assert a.top_class == b.top_class


def test_detections_header_mismatch(tmp_path, dataset):
    dets = sw.simulate_split_detectors(dataset, "test", 7)
    path = tmp_path / "dets.jsonl"
    sw.write_detections(dets, dataset.world, path)
    with pytest.raises(DimensionError, match="header"):
        sw.load_detections(path, dataset.world.config.d_v + 1,
                           len(dataset.world.classes))


def test_detections_missing_header(tmp_path):
    path = tmp_path / "noheader.jsonl"
    path.write_text('{"scene_id":0,"detections":[]}\n')
    with pytest.raises(DataFormatError):
        sw.load_detections(path, 8, 4)


def test_malformed_line_reports_number(tmp_path, dataset):
    path = tmp_path / "bad.jsonl"
    sw.write_split(dataset, "test", path)
    lines = path.read_text().splitlines()
    lines[2] = "{not json"
    path.write_text("\n".join(lines) + "\n")
    loaded = sw.gen_dataset(dataset.world, tiny_data_config(), 7)
    with pytest.raises(DataFormatError, match=":3"):
        sw.load_split(loaded, "test", path)


def test_detection_cap_applies_on_load(tmp_path, dataset):
    dets = sw.simulate_split_detectors(dataset, "test", 7)
    path = tmp_path / "dets.jsonl"
    sw.write_detections(dets, dataset.world, path)
    loaded = sw.load_detections(
        path, dataset.world.config.d_v, len(dataset.world.classes),
        max_detections=1,
    )
    assert all(len(ds) <= 1 for ds in loaded.values())


def test_scene_feature_dimension_checked(tmp_path, dataset):
    path = tmp_path / "short.jsonl"
    doc = {
        "scene_id": 0,
        "image_feature": [0.1, 0.2],
        "objects": [{"name": "x", "class_id": 0}],
        "captions": [["a", "x"]],
        "split": "test",
    }
    path.write_text(json.dumps(doc) + "\n")
    with pytest.raises(DimensionError):
        sw.load_split(dataset, "test__tmp", path)
