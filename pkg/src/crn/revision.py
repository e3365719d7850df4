"""Cascaded caption revision: flag ambiguous words, match them to detected
objects visually, vet the proposals semantically, and apply replacements.

All stages are pure functions over immutable inputs; `revise` composes them
and records a full audit trail (every proposal with its scores and status).
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .captioner import CaptionerParams, DecodeOutput, detection_mixture
from .config import RevisionConfig
from .embeddings import EmbeddingTable, Vocabulary, cosine, embed_name
from .errors import VocabularyError
from .synthworld import DetectionSet

STATUS_PROPOSED = "proposed"
STATUS_ACCEPTED = "accepted"
STATUS_REJECTED_SEMANTIC = "rejected_semantic"
STATUS_REJECTED_DEDUP = "rejected_dedup"


@dataclass(frozen=True)
class RevisionProposal:
    position: int
    original_word: str
    detection_index: int
    proposed_class: int
    proposed_name: str
    visual_score: float
    semantic_score: float | None = None
    status: str = STATUS_PROPOSED

    def audit_dict(self) -> dict:
        return {
            "position": self.position,
            "original_word": self.original_word,
            "detection_index": self.detection_index,
            "proposed_class": self.proposed_class,
            "proposed_name": self.proposed_name,
            "visual_score": self.visual_score,
            "semantic_score": self.semantic_score,
            "status": self.status,
        }


@dataclass
class SceneAudit:
    scene_id: int
    primary_tokens: list[str]
    flagged: list[tuple[int, float]]  # (position, perplexity)
    proposals: list[RevisionProposal]
    final_tokens: list[str]

    def audit_dict(self) -> dict:
        return {
            "scene_id": self.scene_id,
            "primary_tokens": self.primary_tokens,
            "flagged": [{"position": p, "perplexity": m} for p, m in self.flagged],
            "proposals": [p.audit_dict() for p in self.proposals],
            "final_tokens": self.final_tokens,
        }


@dataclass
class RevisedCaption:
    tokens: list[str]
    audit: SceneAudit


def flag_ambiguous(perplexities, tau_p: float) -> list[int]:
    """Positions whose perplexity exceeds the threshold, ascending."""
    return [t for t, m in enumerate(perplexities) if m > tau_p]


def visual_match(
    tokens: list[str],
    hidden_states: np.ndarray,
    flagged: list[int],
    detections: DetectionSet,
    params: CaptionerParams,
    class_names: list[str],
) -> list[RevisionProposal]:
    """Propose a detected object for every flagged position.

    The hidden state is projected into detector-feature space, scored
    against every detection, and the attention-mixed class distribution is
    argmaxed. The proposal keeps the detection contributing most to the
    winning class (ties toward the lower detection index). No detections
    means no proposals.
    """
    if len(detections) == 0:
        return []
    feats = detections.feature_matrix()
    classes = detections.class_matrix()
    proposals = []
    for t in flagged:
        query = params.match_w.astype(np.float64) @ hidden_states[t].astype(np.float64)
        _, weights, class_probs = detection_mixture(feats, classes, query)
        best_class = int(np.argmax(class_probs))
        contrib = weights * classes[:, best_class].astype(np.float64)
        det_index = int(np.argmax(contrib))
        proposals.append(
            RevisionProposal(
                position=t,
                original_word=tokens[t],
                detection_index=det_index,
                proposed_class=best_class,
                proposed_name=class_names[best_class],
                visual_score=float(class_probs[best_class]),
            )
        )
    return proposals


def semantic_match(
    proposals: list[RevisionProposal],
    table: EmbeddingTable,
    config: RevisionConfig,
) -> list[RevisionProposal]:
    """Score proposals by word similarity and accept/reject them.

    A proposal is rejected when the cosine between the flagged word and the
    proposed name falls below tau_s. With dedup on, only the best-scoring
    accepted position survives per detected object (ties toward the lower
    position).
    """
    scored = []
    for p in proposals:
        score = cosine(
            embed_name(p.original_word, table), embed_name(p.proposed_name, table)
        )
        status = STATUS_ACCEPTED if score >= config.tau_s else STATUS_REJECTED_SEMANTIC
        scored.append(replace(p, semantic_score=score, status=status))
    if not config.dedup:
        return scored
    best: dict[int, int] = {}
    for idx, p in enumerate(scored):
        if p.status != STATUS_ACCEPTED:
            continue
        cur = best.get(p.detection_index)
        if cur is None or p.semantic_score > scored[cur].semantic_score:
            best[p.detection_index] = idx
    out = []
    for idx, p in enumerate(scored):
        if p.status == STATUS_ACCEPTED and best[p.detection_index] != idx:
            p = replace(p, status=STATUS_REJECTED_DEDUP)
        out.append(p)
    return out


def apply_revision(
    tokens: list[str], accepted: list[RevisionProposal]
) -> list[str]:
    """Substitute accepted proposals in place; token count is preserved.

    A multi-word detector name occupies its single slot as one element.
    """
    seen = set()
    out = list(tokens)
    for p in accepted:
        if not 0 <= p.position < len(tokens):
            raise VocabularyError(f"proposal position {p.position} out of range")
        if p.position in seen:
            raise VocabularyError(f"overlapping proposals at position {p.position}")
        seen.add(p.position)
        out[p.position] = p.proposed_name
    return out


def revise(
    decode_output: DecodeOutput,
    detections: DetectionSet,
    params: CaptionerParams,
    table: EmbeddingTable,
    vocab: Vocabulary,
    config: RevisionConfig,
    class_names: list[str],
    scene_id: int = -1,
) -> RevisedCaption:
    """Full cascade; equals the manual composition of the four stages."""
    tokens = [vocab.word_of(i) for i in decode_output.tokens]
    flagged = flag_ambiguous(decode_output.perplexities, config.tau_p)
    proposals = visual_match(
        tokens, decode_output.hidden_states, flagged, detections, params, class_names
    )
    proposals = semantic_match(proposals, table, config)
    final = apply_revision(
        tokens, [p for p in proposals if p.status == STATUS_ACCEPTED]
    )
    audit = SceneAudit(
        scene_id=scene_id,
        primary_tokens=tokens,
        flagged=[(t, float(decode_output.perplexities[t])) for t in flagged],
        proposals=proposals,
        final_tokens=final,
    )
    return RevisedCaption(tokens=final, audit=audit)
