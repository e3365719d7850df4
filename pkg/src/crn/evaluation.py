"""Metrics and experiment harnesses: per-novel-object F1, a unigram fluency
surrogate, the ablation table, and the perplexity-threshold sweep.

The fluency score is NOT METEOR; it is a recall-weighted unigram overlap
kept deliberately simple so the synthetic-grammar experiments have a
measurable fluency axis. Reports label it `fluency_surrogate`.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .captioner import CaptionerParams, decode_batch
from .config import EvalConfig, RevisionConfig, stream_rng
from .errors import VocabularyError
from .revision import (
    STATUS_ACCEPTED,
    RevisionProposal,
    SceneAudit,
    apply_revision,
    flag_ambiguous,
    revise,
    semantic_match,
    visual_match,
)
from .embeddings import cosine, embed_name
from .synthworld import Dataset, DetectionSet, Scene

log = logging.getLogger("crn.evaluation")


class AblationVariant(str, Enum):
    """The harness variants; values appear verbatim in report rows."""

    CAPTIONER_ONLY = "crn_i"
    RANDOM_REPLACE = "crn_i_ii"
    NO_FLAGGING = "crn_wo_ii"
    NO_VISUAL = "crn_wo_iii"
    NO_SEMANTIC = "crn_wo_iv"
    FULL = "crn_full"


ALL_VARIANTS = tuple(AblationVariant)


@dataclass
class ObjectScore:
    tp: int = 0
    fp: int = 0
    fn: int = 0

    @property
    def precision(self) -> float:
        return self.tp / (self.tp + self.fp) if self.tp + self.fp else 0.0

    @property
    def recall(self) -> float:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else 0.0

    @property
    def f1(self) -> float:
        p, r = self.precision, self.recall
        return 2.0 * p * r / (p + r) if p + r else 0.0


@dataclass
class MetricsReport:
    per_object: dict[str, ObjectScore]
    average_f1: float
    fluency: float | None = None
    novel_recovery: float | None = None
    skipped_objects: list[str] = field(default_factory=list)

    def as_dict(self) -> dict:
        return {
            "average_f1": self.average_f1,
            "fluency_surrogate": self.fluency,
            "novel_recovery": self.novel_recovery,
            "skipped_objects": self.skipped_objects,
            "per_object": {
                w: {
                    "tp": s.tp, "fp": s.fp, "fn": s.fn,
                    "precision": s.precision, "recall": s.recall, "f1": s.f1,
                }
                for w, s in sorted(self.per_object.items())
            },
        }


def _flatten(tokens: list[str]) -> list[str]:
    """Split multi-word elements so mention tests see single tokens."""
    out: list[str] = []
    for tok in tokens:
        out.extend(tok.lower().split())
    return out


def mentions(tokens: list[str], name: str) -> bool:
    """True when the name appears as a contiguous token subsequence."""
    flat = _flatten(tokens)
    target = name.lower().split()
    n = len(target)
    if n == 0 or len(flat) < n:
        return False
    return any(flat[i : i + n] == target for i in range(len(flat) - n + 1))


def novel_object_f1(
    predictions: list[tuple[list[str], list[str]]], novel_words: list[str]
) -> MetricsReport:
    """Precision/recall/F1 of mentioning each novel object exactly when the
    scene contains it.

    predictions pairs each caption with its scene's ground-truth object
    names. Objects absent from every scene are excluded from the average
    with a warning.
    """
    scores = {w: ObjectScore() for w in novel_words}
    present = {w: False for w in novel_words}
    for object_names, tokens in predictions:
        names = {o.lower() for o in object_names}
        for w in novel_words:
            contained = w.lower() in names
            said = mentions(tokens, w)
            if contained:
                present[w] = True
            if said and contained:
                scores[w].tp += 1
            elif said and not contained:
                scores[w].fp += 1
            elif contained and not said:
                scores[w].fn += 1
    skipped = [w for w in novel_words if not present[w]]
    for w in skipped:
        log.warning("novel object %r absent from all scenes; excluded from average", w)
    usable = [w for w in novel_words if present[w]]
    avg = float(np.mean([scores[w].f1 for w in usable])) if usable else 0.0
    return MetricsReport(
        per_object={w: scores[w] for w in usable},
        average_f1=avg,
        skipped_objects=skipped,
    )


def scene_object_names(dataset: Dataset, scene: Scene) -> list[str]:
    return [dataset.world.classes[i].name for i in scene.object_ids]


def fluency_surrogate(candidate: list[str], references: list[list[str]]) -> float:
    """Recall-weighted unigram overlap against the best reference.

    m = clipped multiset intersection, P = m/|cand|, R = m/|ref|,
    score = P*R / (0.9*P + 0.1*R), 0 when nothing matches.
    """
    if not references:
        raise VocabularyError("fluency needs at least one reference")
    cand = _flatten(candidate)
    if not cand:
        return 0.0
    best = 0.0
    for ref in references:
        ref_flat = _flatten(ref)
        if not ref_flat:
            continue
        counts: dict[str, int] = {}
        for tok in ref_flat:
            counts[tok] = counts.get(tok, 0) + 1
        m = 0
        for tok in cand:
            if counts.get(tok, 0) > 0:
                counts[tok] -= 1
                m += 1
        if m == 0:
            continue
        p = m / len(cand)
        r = m / len(ref_flat)
        best = max(best, p * r / (0.9 * p + 0.1 * r))
    return best


def evaluate_captions(
    dataset: Dataset,
    scenes: list[Scene],
    captions: dict[int, list[str]],
    novel_words: list[str],
) -> MetricsReport:
    """Full report: per-object F1, mean fluency, single-novel recovery."""
    predictions = [
        (scene_object_names(dataset, s), captions[s.scene_id]) for s in scenes
    ]
    report = novel_object_f1(predictions, novel_words)
    fluencies = [
        fluency_surrogate(captions[s.scene_id], s.captions) for s in scenes
    ]
    report.fluency = float(np.mean(fluencies)) if fluencies else None

    novel_set = {w.lower() for w in novel_words}
    hits = 0
    total = 0
    for scene in scenes:
        names = [n.lower() for n in scene_object_names(dataset, scene)]
        scene_novel = [n for n in names if n in novel_set]
        if len(scene_novel) != 1:
            continue
        total += 1
        if mentions(captions[scene.scene_id], scene_novel[0]):
            hits += 1
    report.novel_recovery = hits / total if total else None
    return report


# ---------------------------------------------------------------------------
# caption production for harness variants


def decode_split(
    params: CaptionerParams,
    dataset: Dataset,
    scenes: list[Scene],
    tau_p: float,
    max_len: int,
    jobs: int = 1,
):
    """Greedy-decode a list of scenes (optionally across threads)."""
    images = np.stack([s.image_feature for s in scenes])
    if jobs <= 1 or len(scenes) < 2 * jobs:
        return decode_batch(params, dataset.vocab, images, max_len, tau_p)
    from concurrent.futures import ThreadPoolExecutor

    chunks = np.array_split(np.arange(len(scenes)), jobs)
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        parts = list(
            pool.map(
                lambda idx: decode_batch(
                    params, dataset.vocab, images[idx], max_len, tau_p
                ),
                [c for c in chunks if c.size],
            )
        )
    out = []
    for part in parts:
        out.extend(part)
    return out


def variant_captions(
    variant: AblationVariant,
    dataset: Dataset,
    scenes: list[Scene],
    decoded,
    detections: dict[int, DetectionSet],
    params: CaptionerParams,
    config: RevisionConfig,
    seed: int,
) -> tuple[dict[int, list[str]], list[SceneAudit]]:
    """Final captions for one harness variant, from shared primary decodes."""
    vocab = dataset.vocab
    class_names = [c.name for c in dataset.world.classes]
    captions: dict[int, list[str]] = {}
    audits: list[SceneAudit] = []
    for scene, out in zip(scenes, decoded):
        tokens = [vocab.word_of(i) for i in out.tokens]
        dets = detections.get(scene.scene_id, DetectionSet(scene.scene_id, []))
        if variant is AblationVariant.CAPTIONER_ONLY:
            captions[scene.scene_id] = tokens
            continue
        if variant is AblationVariant.RANDOM_REPLACE:
            rng = stream_rng(seed, f"ablate.random.{scene.scene_id}")
            final = list(tokens)
            if len(dets):
                for t in flag_ambiguous(out.perplexities, config.tau_p):
                    pick = int(rng.integers(len(dets)))
                    final[t] = class_names[dets.detections[pick].top_class]
            captions[scene.scene_id] = final
            continue
        if variant is AblationVariant.NO_FLAGGING:
            order = np.argsort(-out.perplexities, kind="stable")
            flagged = sorted(int(i) for i in order[:2])
        else:
            flagged = flag_ambiguous(out.perplexities, config.tau_p)
        stage_cfg = config
        if variant is AblationVariant.NO_SEMANTIC:
            stage_cfg = RevisionConfig(tau_p=config.tau_p, tau_s=-1.0, dedup=False)
        if variant is AblationVariant.NO_VISUAL:
            proposals = _semantic_only_proposals(
                tokens, flagged, dets, dataset, class_names
            )
        else:
            proposals = visual_match(
                tokens, out.hidden_states, flagged, dets, params, class_names
            )
        proposals = semantic_match(proposals, dataset.world.table, stage_cfg)
        final = apply_revision(
            tokens, [p for p in proposals if p.status == STATUS_ACCEPTED]
        )
        captions[scene.scene_id] = final
        audits.append(
            SceneAudit(
                scene_id=scene.scene_id,
                primary_tokens=tokens,
                flagged=[(t, float(out.perplexities[t])) for t in flagged],
                proposals=proposals,
                final_tokens=final,
            )
        )
    return captions, audits


def _semantic_only_proposals(
    tokens: list[str],
    flagged: list[int],
    dets: DetectionSet,
    dataset: Dataset,
    class_names: list[str],
) -> list[RevisionProposal]:
    """Match flagged words to detections by word similarity alone."""
    if len(dets) == 0:
        return []
    table = dataset.world.table
    det_names = [class_names[d.top_class] for d in dets.detections]
    proposals = []
    for t in flagged:
        scores = [
            cosine(embed_name(tokens[t], table), embed_name(name, table))
            for name in det_names
        ]
        j = int(np.argmax(scores))
        proposals.append(
            RevisionProposal(
                position=t,
                original_word=tokens[t],
                detection_index=j,
                proposed_class=dets.detections[j].top_class,
                proposed_name=det_names[j],
                visual_score=float(scores[j]),
            )
        )
    return proposals


def run_ablation(
    variants,
    dataset: Dataset,
    detections: dict[int, DetectionSet],
    params: CaptionerParams,
    config: RevisionConfig,
    eval_config: EvalConfig,
    seed: int,
    split: str = "test",
    jobs: int = 1,
) -> list[dict]:
    """One row per variant: average F1, fluency, recovery."""
    scenes = dataset.splits[split]
    novel_words = dataset.novel_words()
    decoded = decode_split(params, dataset, scenes, config.tau_p,
                           eval_config.max_len, jobs)
    rows = []
    for variant in variants:
        captions, _ = variant_captions(
            variant, dataset, scenes, decoded, detections, params, config, seed
        )
        report = evaluate_captions(dataset, scenes, captions, novel_words)
        rows.append(
            {
                "variant": variant.value,
                "average_f1": report.average_f1,
                "fluency_surrogate": report.fluency,
                "novel_recovery": report.novel_recovery,
            }
        )
    return rows


def threshold_sweep(
    grid,
    dataset: Dataset,
    detections: dict[int, DetectionSet],
    params: CaptionerParams,
    config: RevisionConfig,
    eval_config: EvalConfig,
    seed: int,
    split: str = "test",
    jobs: int = 1,
) -> list[dict]:
    """Full evaluation of the complete cascade at each threshold.

    The threshold drives both the decode-time label feedback and the
    flagging stage, so every grid point re-decodes.
    """
    scenes = dataset.splits[split]
    novel_words = dataset.novel_words()
    rows = []
    for tau in grid:
        if not 0.0 <= tau <= 1.0:
            raise VocabularyError(f"sweep threshold {tau} outside [0, 1]")
        point_cfg = RevisionConfig(tau_p=float(tau), tau_s=config.tau_s,
                                   dedup=config.dedup)
        decoded = decode_split(params, dataset, scenes, point_cfg.tau_p,
                               eval_config.max_len, jobs)
        captions, audits = variant_captions(
            AblationVariant.FULL, dataset, scenes, decoded, detections,
            params, point_cfg, seed,
        )
        report = evaluate_captions(dataset, scenes, captions, novel_words)
        flagged_counts = [len(a.flagged) for a in audits]
        rows.append(
            {
                "tau_p": float(tau),
                "average_f1": report.average_f1,
                "fluency_surrogate": report.fluency,
                "mean_flagged": float(np.mean(flagged_counts)) if flagged_counts else 0.0,
            }
        )
    rows.sort(key=lambda r: r["tau_p"])
    return rows
