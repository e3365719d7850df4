"""Synthetic vision-language world: classes, scenes, captions, detections.

Object classes live in categories; each category has one visual and one
semantic direction, and class prototypes/embeddings are small perturbations
of those directions. That makes within-category cosine similarity strictly
dominate cross-category similarity, which is what the pseudo-object pairing
and the semantic matching stage rely on.

Scenes pair a set of objects with a deterministic feature vector (a seeded
linear projection of the summed prototypes, renormalized) and templated
captions that mention every object exactly once.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .config import DataConfig, DetectorNoise, WorldConfig, stream_rng, stream_seed
from .embeddings import (
    EmbeddingTable,
    PseudoMap,
    Vocabulary,
    build_pseudo_map,
    build_vocabulary,
    stem_related,
)
from .errors import DataFormatError, DimensionError, VocabularyError

FILLERS = ("a", "and", "near", "on", "with", "the")

# caption templates; integers are object slots, filled in canonical order
TEMPLATES = (
    ("a", 0),
    ("the", 0),
    ("a", 0, "and", "a", 1),
    ("a", 0, "near", "the", 1),
    ("a", 0, "with", "a", 1, "and", "the", 2),
    ("a", 0, "on", "the", 1, "with", "a", 2),
)

_CONSONANTS = "bdfgklmnprstvz"
_VOWELS = "aeiou"


@dataclass(frozen=True)
class ObjectClass:
    name: str
    class_id: int
    category_id: int
    prototype: np.ndarray  # unit norm, length d_v


@dataclass
class World:
    config: WorldConfig
    classes: list[ObjectClass]
    table: EmbeddingTable  # specials + fillers + every class name
    fillers: tuple[str, ...] = FILLERS

    def class_named(self, name: str) -> ObjectClass:
        for c in self.classes:
            if c.name == name:
                return c
        raise VocabularyError(f"no object class named {name!r}")

    def category_members(self, category_id: int) -> list[ObjectClass]:
        return [c for c in self.classes if c.category_id == category_id]

    def prototype_matrix(self) -> np.ndarray:
        return np.stack([c.prototype for c in self.classes])


@dataclass
class Scene:
    scene_id: int
    object_ids: list[int]  # class ids, canonical ascending order
    image_feature: np.ndarray  # float32, length d_image
    captions: list[list[str]]
    split: str


@dataclass(frozen=True)
class Detection:
    feature: np.ndarray  # float32, length d_v
    class_scores: np.ndarray  # float32, length n_d, sums to 1
    top_class: int

    def __post_init__(self):
        total = float(np.sum(self.class_scores, dtype=np.float64))
        if abs(total - 1.0) > 1e-6:
            raise DimensionError(f"class_scores sum {total} != 1")
        if int(np.argmax(self.class_scores)) != self.top_class:
            raise DimensionError("top_class is not the argmax of class_scores")


@dataclass
class DetectionSet:
    scene_id: int
    detections: list[Detection]

    def __len__(self) -> int:
        return len(self.detections)

    def feature_matrix(self) -> np.ndarray:
        """(N_o, d_v) stacked features; empty -> (0, 0)."""
        if not self.detections:
            return np.zeros((0, 0), dtype=np.float32)
        return np.stack([d.feature for d in self.detections])

    def class_matrix(self) -> np.ndarray:
        """(N_o, n_d) stacked per-detection class scores."""
        if not self.detections:
            return np.zeros((0, 0), dtype=np.float32)
        return np.stack([d.class_scores for d in self.detections])


@dataclass(frozen=True)
class TrainingToken:
    word_id: int
    novel_label: int
    original_word_id: int

    def __post_init__(self):
        if self.novel_label not in (0, 1):
            raise VocabularyError(f"novel label must be 0/1, got {self.novel_label}")
        if self.novel_label == 0 and self.word_id != self.original_word_id:
            raise VocabularyError("unsubstituted token must keep its word id")


@dataclass
class Dataset:
    world: World
    vocab: Vocabulary
    pseudo_map: PseudoMap
    splits: dict[str, list[Scene]]
    novel_class_ids: list[int]
    pseudo_source_class_ids: list[int]
    config: DataConfig = field(default_factory=DataConfig)

    def novel_words(self) -> list[str]:
        return [self.world.classes[i].name for i in self.novel_class_ids]

    def word_to_class(self) -> np.ndarray:
        """vocab word id -> class id, -1 for non-class words."""
        out = np.full(len(self.vocab), -1, dtype=np.int64)
        for c in self.world.classes:
            out[self.vocab.id_of(c.name)] = c.class_id
        return out


def _gen_names(rng: np.random.Generator, count: int) -> list[str]:
    """Distinct pronounceable names, mutually stem-unrelated."""
    reserved = set(FILLERS) | {"<start>", "<end>", "<unk>"}
    names: list[str] = []
    while len(names) < count:
        n_syll = int(rng.integers(2, 4))
        name = "".join(
            _CONSONANTS[int(rng.integers(len(_CONSONANTS)))]
            + _VOWELS[int(rng.integers(len(_VOWELS)))]
            for _ in range(n_syll)
        )
        if name in reserved or name in names:
            continue
        if any(stem_related(name, other) for other in names):
            continue
        names.append(name)
    return names


def _unit_rows(rng: np.random.Generator, n: int, dim: int) -> np.ndarray:
    rows = rng.standard_normal((n, dim))
    return rows / np.linalg.norm(rows, axis=1, keepdims=True)


def gen_world(config: WorldConfig, seed: int) -> World:
    """Deterministic world from (config, seed)."""
    if config.n_categories > config.n_classes:
        raise DimensionError(
            f"{config.n_categories} categories > {config.n_classes} classes"
        )
    if config.n_categories < 1:
        raise DimensionError("need at least one category")
    name_rng = stream_rng(seed, "world.names")
    proto_rng = stream_rng(seed, "world.proto")
    embed_rng = stream_rng(seed, "world.embed")

    names = _gen_names(name_rng, config.n_classes)
    proto_centers = _unit_rows(proto_rng, config.n_categories, config.d_v)
    embed_centers = _unit_rows(embed_rng, config.n_categories, config.d_e)

    classes: list[ObjectClass] = []
    tokens: list[str] = ["<start>", "<end>", "<unk>"] + list(FILLERS)
    vectors: list[np.ndarray] = list(_unit_rows(embed_rng, len(tokens), config.d_e))
    for class_id, name in enumerate(names):
        cat = class_id % config.n_categories
        proto = proto_centers[cat] + config.proto_noise * proto_rng.standard_normal(
            config.d_v
        )
        proto = (proto / np.linalg.norm(proto)).astype(np.float32)
        vec = embed_centers[cat] + config.embed_noise * embed_rng.standard_normal(
            config.d_e
        )
        vec = vec / np.linalg.norm(vec)
        classes.append(ObjectClass(name, class_id, cat, proto))
        tokens.append(name)
        vectors.append(vec)
    table = EmbeddingTable(tokens, np.stack(vectors).astype(np.float32))
    return World(config=config, classes=classes, table=table)


def _pick_held_out(world: World, config: DataConfig, rng: np.random.Generator) -> list[int]:
    """Held-out novel classes, spread over categories.

    Each category keeps at least two non-novel classes so it can still
    contribute a pseudo source and a free in-domain word.
    """
    if config.novel_classes:
        ids = []
        for name in config.novel_classes:
            ids.append(world.class_named(name).class_id)
        return sorted(ids)
    n_cat = world.config.n_categories
    by_cat = {cat: [c.class_id for c in world.category_members(cat)] for cat in range(n_cat)}
    chosen: list[int] = []
    offset = int(rng.integers(n_cat))
    round_no = 0
    while len(chosen) < config.novel_count:
        progressed = False
        for step in range(n_cat):
            if len(chosen) >= config.novel_count:
                break
            cat = (offset + step) % n_cat
            members = by_cat[cat]
            taken = sum(1 for i in chosen if i in members)
            if taken > round_no:
                continue
            free = [i for i in members if i not in chosen]
            if len(free) <= 2:  # keep >= 2 non-novel classes per category
                continue
            chosen.append(int(rng.choice(free)))
            progressed = True
        if not progressed:
            raise VocabularyError(
                f"cannot hold out {config.novel_count} classes and keep"
                " two non-novel classes per category"
            )
        round_no += 1
    return sorted(chosen)


def _pick_pseudo_sources(
    world: World, config: DataConfig, novel_ids: list[int], rng: np.random.Generator
) -> list[int]:
    """Pseudo-source classes: favour novel-bearing categories, keep one
    free (non-source, non-novel) class in every category."""
    n_cat = world.config.n_categories
    novel = set(novel_ids)
    pools = {
        cat: [c.class_id for c in world.category_members(cat) if c.class_id not in novel]
        for cat in range(n_cat)
    }
    chosen: list[int] = []
    limit = {cat: max(0, len(pool) - 1) for cat, pool in pools.items()}

    def take(cat: int) -> bool:
        free = [i for i in pools[cat] if i not in chosen]
        used = sum(1 for i in chosen if i in pools[cat])
        if used >= limit[cat] or len(free) <= 1:
            return False
        chosen.append(int(rng.choice(free)))
        return True

    novel_cats = sorted({world.classes[i].category_id for i in novel_ids})
    for cat in novel_cats:  # two sources where a novel class lives
        for _ in range(2):
            if len(chosen) < config.pseudo_count:
                take(cat)
    spin = 0
    while len(chosen) < config.pseudo_count and spin < n_cat:
        progressed = False
        for cat in range(n_cat):
            if len(chosen) >= config.pseudo_count:
                break
            if take(cat):
                progressed = True
        spin = 0 if progressed else spin + 1
    if len(chosen) < config.pseudo_count:
        raise VocabularyError(
            f"cannot pick {config.pseudo_count} pseudo sources while keeping"
            " a free in-domain class per category"
        )
    return sorted(chosen)


def _build_vocab(world: World, novel_ids: list[int], source_ids: list[int]) -> Vocabulary:
    novel = set(novel_ids)
    in_domain = list(world.fillers) + [
        c.name for c in world.classes if c.class_id not in novel
    ]
    novel_words = [world.classes[i].name for i in sorted(novel)]
    source_words = [world.classes[i].name for i in source_ids]
    return build_vocabulary(in_domain, novel_words, source_words)


def _make_captions(names: list[str], per_scene: int) -> list[list[str]]:
    k = len(names)
    templates = [t for t in TEMPLATES if sum(1 for x in t if isinstance(x, int)) == k]
    captions = []
    for t in templates[: max(1, per_scene)]:
        captions.append([names[x] if isinstance(x, int) else x for x in t])
    return captions


def _scene_feature(
    proj: np.ndarray, protos: np.ndarray, noise: float, rng: np.random.Generator
) -> np.ndarray:
    raw = proj @ protos.sum(axis=0) + noise * rng.standard_normal(proj.shape[0])
    return (raw / np.linalg.norm(raw)).astype(np.float32)


def gen_dataset(world: World, config: DataConfig, seed: int) -> Dataset:
    """Train/val/test splits under the held-out protocol.

    Novel classes never appear in train/val scenes or captions. Test scenes
    carry at most one novel object each (rate config.novel_scene_rate) so
    per-scene recovery is well defined.
    """
    if config.max_objects < 1 or config.max_objects > 3:
        raise DimensionError("max_objects must be in 1..3 (template coverage)")
    novel_ids = _pick_held_out(world, config, stream_rng(seed, "data.novel"))
    source_ids = _pick_pseudo_sources(
        world, config, novel_ids, stream_rng(seed, "data.pseudo")
    )
    vocab = _build_vocab(world, novel_ids, source_ids)
    pseudo_map = build_pseudo_map(vocab, world.table)

    proj = stream_rng(seed, "data.image_proj").standard_normal(
        (world.config.d_image, world.config.d_v)
    ) / np.sqrt(world.config.d_v)

    novel = set(novel_ids)
    in_domain_classes = [c.class_id for c in world.classes if c.class_id not in novel]
    protos = world.prototype_matrix()

    splits: dict[str, list[Scene]] = {}
    scene_id = 0
    for split, count in (("train", config.n_train), ("val", config.n_val), ("test", config.n_test)):
        rng = stream_rng(seed, f"data.scenes.{split}")
        scenes: list[Scene] = []
        for _ in range(count):
            k = int(rng.integers(1, config.max_objects + 1))
            if split == "test" and rng.random() < config.novel_scene_rate:
                pick = [int(rng.choice(novel_ids))]
                if k > 1:
                    others = rng.choice(in_domain_classes, size=k - 1, replace=False)
                    pick.extend(int(x) for x in others)
            else:
                pick = [int(x) for x in rng.choice(in_domain_classes, size=k, replace=False)]
            object_ids = sorted(pick)
            names = [world.classes[i].name for i in object_ids]
            feature = _scene_feature(proj, protos[object_ids], config.image_noise, rng)
            captions = _make_captions(names, config.captions_per_scene)
            scenes.append(Scene(scene_id, object_ids, feature, captions, split))
            scene_id += 1
        splits[split] = scenes

    return Dataset(
        world=world,
        vocab=vocab,
        pseudo_map=pseudo_map,
        splits=splits,
        novel_class_ids=novel_ids,
        pseudo_source_class_ids=source_ids,
        config=config,
    )


def apply_pseudo_substitution(
    captions: list[list[int]], pseudo_map: PseudoMap, vocab: Vocabulary
) -> list[list[TrainingToken]]:
    """Swap pseudo-source words for their pseudo objects, flagging them."""
    sources = {vocab.words[i] for i in vocab.pseudo_sources}
    out: list[list[TrainingToken]] = []
    for caption in captions:
        tokens: list[TrainingToken] = []
        for word_id in caption:
            word = vocab.words[word_id]
            if word in sources:
                if word not in pseudo_map.pairs:
                    raise VocabularyError(f"pseudo map does not cover {word!r}")
                sub_id = vocab.id_of(pseudo_map.pseudo(word))
                tokens.append(TrainingToken(sub_id, 1, word_id))
            else:
                tokens.append(TrainingToken(word_id, 0, word_id))
        out.append(tokens)
    return out


def simulate_detector(
    scene: Scene, world: World, noise: DetectorNoise, seed: int, max_detections: int = 10
) -> DetectionSet:
    """Stand-in for a pretrained detector; exact at zero noise.

    Per scene object: dropped with probability miss_rate; feature is the
    prototype plus Gaussian noise; class scores put 1-confusion_rate on the
    true class and spread the rest over the other same-category classes.
    """
    rng = np.random.Generator(np.random.PCG64(seed))
    n_d = len(world.classes)
    detections: list[Detection] = []
    for class_id in scene.object_ids:
        if rng.random() < noise.miss_rate:
            continue
        obj = world.classes[class_id]
        feature = obj.prototype + noise.feature_sigma * rng.standard_normal(
            world.config.d_v
        )
        scores = np.zeros(n_d, dtype=np.float64)
        peers = [c.class_id for c in world.category_members(obj.category_id)
                 if c.class_id != class_id]
        if noise.confusion_rate > 0.0 and peers:
            scores[class_id] = 1.0 - noise.confusion_rate
            scores[peers] = noise.confusion_rate / len(peers)
        else:
            scores[class_id] = 1.0
        detections.append(
            Detection(
                feature=feature.astype(np.float32),
                class_scores=scores.astype(np.float32),
                top_class=int(np.argmax(scores)),
            )
        )
    order = sorted(
        range(len(detections)),
        key=lambda i: (-float(detections[i].class_scores[detections[i].top_class]), i),
    )
    ordered = [detections[i] for i in order][:max_detections]
    return DetectionSet(scene_id=scene.scene_id, detections=ordered)


def simulate_split_detectors(
    dataset: Dataset, split: str, seed: int
) -> dict[int, DetectionSet]:
    """Detections for every scene of a split, keyed by scene id.

    Per-scene seeds derive from the scene id, so the result does not depend
    on iteration order.
    """
    noise = dataset.config.detector_noise()
    out: dict[int, DetectionSet] = {}
    for scene in dataset.splits[split]:
        child = stream_seed(seed, f"detector.{scene.scene_id}").generate_state(1)[0]
        out[scene.scene_id] = simulate_detector(
            scene, dataset.world, noise, int(child), dataset.config.max_detections
        )
    return out


# ---------------------------------------------------------------------------
# serialization


def _dump(obj) -> str:
    return json.dumps(obj, separators=(",", ":"))


def write_world(dataset: Dataset, path) -> None:
    """Self-describing metadata: world geometry plus the vocabulary split."""
    w = dataset.world
    doc = {
        "dims": {
            "n_classes": w.config.n_classes,
            "n_categories": w.config.n_categories,
            "d_v": w.config.d_v,
            "d_e": w.config.d_e,
            "d_image": w.config.d_image,
            "cross_floor": w.config.cross_floor,
            "proto_noise": w.config.proto_noise,
            "embed_noise": w.config.embed_noise,
        },
        "fillers": list(w.fillers),
        "classes": [
            {
                "name": c.name,
                "class_id": c.class_id,
                "category_id": c.category_id,
                "prototype": [float(x) for x in c.prototype],
            }
            for c in w.classes
        ],
        "novel_class_ids": dataset.novel_class_ids,
        "pseudo_source_class_ids": dataset.pseudo_source_class_ids,
        "pseudo_map": {
            "pairs": dataset.pseudo_map.pairs,
            "similarity": {k: float(v) for k, v in dataset.pseudo_map.similarity.items()},
        },
        "data_config": {
            "max_detections": dataset.config.max_detections,
        },
    }
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(_dump(doc))
        fh.write("\n")


def write_split(dataset: Dataset, split: str, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for scene in dataset.splits[split]:
            line = {
                "scene_id": scene.scene_id,
                "image_feature": [float(x) for x in scene.image_feature],
                "objects": [
                    {
                        "name": dataset.world.classes[i].name,
                        "class_id": i,
                    }
                    for i in scene.object_ids
                ],
                "captions": scene.captions,
                "split": scene.split,
            }
            fh.write(_dump(line))
            fh.write("\n")


def write_detections(
    detections: dict[int, DetectionSet], world: World, path
) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        header = {"d_v": world.config.d_v, "n_d": len(world.classes)}
        fh.write(_dump(header))
        fh.write("\n")
        for scene_id in sorted(detections):
            ds = detections[scene_id]
            line = {
                "scene_id": scene_id,
                "detections": [
                    {
                        "feature": [float(x) for x in d.feature],
                        "class_scores": [float(x) for x in d.class_scores],
                        "top_class": d.top_class,
                    }
                    for d in ds.detections
                ],
            }
            fh.write(_dump(line))
            fh.write("\n")


def _parse_line(path, lineno: int, line: str) -> dict:
    try:
        doc = json.loads(line)
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from None
    if not isinstance(doc, dict):
        raise DataFormatError(f"{path}:{lineno}: expected a JSON object")
    return doc


def load_world(path, table: EmbeddingTable) -> Dataset:
    """Rebuild the world + vocabulary skeleton (without scenes)."""
    with open(path, "r", encoding="utf-8") as fh:
        doc = _parse_line(path, 1, fh.readline())
    dims = doc["dims"]
    config = WorldConfig(
        n_classes=dims["n_classes"],
        n_categories=dims["n_categories"],
        d_v=dims["d_v"],
        d_e=dims["d_e"],
        d_image=dims["d_image"],
        proto_noise=dims.get("proto_noise", 0.0),
        embed_noise=dims.get("embed_noise", 0.0),
        cross_floor=dims.get("cross_floor", 0.5),
    )
    classes = []
    for c in doc["classes"]:
        proto = np.array(c["prototype"], dtype=np.float32)
        if proto.shape[0] != config.d_v:
            raise DimensionError(
                f"{path}: prototype of {c['name']!r} has length {proto.shape[0]},"
                f" declared d_v={config.d_v}"
            )
        classes.append(ObjectClass(c["name"], c["class_id"], c["category_id"], proto))
    if table.dim != config.d_e:
        raise DimensionError(
            f"embedding table dim {table.dim} != declared d_e {config.d_e}"
        )
    world = World(config=config, classes=classes, table=table,
                  fillers=tuple(doc["fillers"]))
    novel_ids = list(doc["novel_class_ids"])
    source_ids = list(doc["pseudo_source_class_ids"])
    vocab = _build_vocab(world, novel_ids, source_ids)
    pm = doc["pseudo_map"]
    pseudo_map = PseudoMap(pairs=dict(pm["pairs"]),
                           similarity={k: float(v) for k, v in pm["similarity"].items()})
    data_config = DataConfig(
        max_detections=doc.get("data_config", {}).get("max_detections", 10)
    )
    return Dataset(
        world=world,
        vocab=vocab,
        pseudo_map=pseudo_map,
        splits={},
        novel_class_ids=novel_ids,
        pseudo_source_class_ids=source_ids,
        config=data_config,
    )


def load_split(dataset: Dataset, split: str, path) -> list[Scene]:
    d_image = dataset.world.config.d_image
    scenes: list[Scene] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            doc = _parse_line(path, lineno, line)
            for key in ("scene_id", "image_feature", "objects", "captions", "split"):
                if key not in doc:
                    raise DataFormatError(f"{path}:{lineno}: missing key {key!r}")
            feature = np.array(doc["image_feature"], dtype=np.float32)
            if feature.shape[0] != d_image:
                raise DimensionError(
                    f"{path}:{lineno}: image_feature length {feature.shape[0]},"
                    f" declared d_image={d_image}"
                )
            object_ids = [o["class_id"] for o in doc["objects"]]
            scenes.append(
                Scene(
                    scene_id=int(doc["scene_id"]),
                    object_ids=object_ids,
                    image_feature=feature,
                    captions=[list(c) for c in doc["captions"]],
                    split=doc["split"],
                )
            )
    dataset.splits[split] = scenes
    return scenes


def load_detections(path, d_v: int, n_d: int, max_detections: int = 10) -> dict[int, DetectionSet]:
    """Ingest a detections file (ours or an external detector's).

    The header record must declare matching d_v/n_d. Detections are ordered
    by descending top score and capped at max_detections.
    """
    out: dict[int, DetectionSet] = {}
    with open(path, "r", encoding="utf-8") as fh:
        header_line = fh.readline()
        if not header_line.strip():
            raise DataFormatError(f"{path}:1: missing header record")
        header = _parse_line(path, 1, header_line)
        if "d_v" not in header or "n_d" not in header:
            raise DataFormatError(f"{path}:1: header must declare d_v and n_d")
        if int(header["d_v"]) != d_v or int(header["n_d"]) != n_d:
            raise DimensionError(
                f"{path}: header d_v={header['d_v']}, n_d={header['n_d']}"
                f" but expected d_v={d_v}, n_d={n_d}"
            )
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            doc = _parse_line(path, lineno, line)
            if "scene_id" not in doc or "detections" not in doc:
                raise DataFormatError(
                    f"{path}:{lineno}: missing scene_id or detections"
                )
            dets: list[Detection] = []
            for d in doc["detections"]:
                feature = np.array(d["feature"], dtype=np.float32)
                scores = np.array(d["class_scores"], dtype=np.float32)
                if feature.shape[0] != d_v:
                    raise DimensionError(
                        f"{path}:{lineno}: feature length {feature.shape[0]} != d_v {d_v}"
                    )
                if scores.shape[0] != n_d:
                    raise DimensionError(
                        f"{path}:{lineno}: class_scores length {scores.shape[0]}"
                        f" != n_d {n_d}"
                    )
                try:
                    dets.append(Detection(feature, scores, int(d["top_class"])))
                except DimensionError as exc:
                    raise DataFormatError(f"{path}:{lineno}: {exc}") from None
            order = sorted(
                range(len(dets)),
                key=lambda i: (-float(dets[i].class_scores[dets[i].top_class]), i),
            )
            dets = [dets[i] for i in order][:max_detections]
            out[int(doc["scene_id"])] = DetectionSet(int(doc["scene_id"]), dets)
    return out
