"""Image captioner with novel-label inputs, a perplexity head, and a
detection-matching head, trained with hand-derived backprop through time.

Per step t the model consumes the previous word and its novel label,
updates an LSTM whose initial hidden state is a learned map of the scene
feature, and emits three things from the hidden state: a distribution over
emittable words, a perplexity score in (0, 1), and (at training time, on
flagged positions) a query vector matched against detector features.

The per-sequence loss is the mean negative log-likelihood of the target
words plus the Bernoulli log-likelihood of the novel labels under the
perplexity head; flagged positions add the detection-matching term, which
mixes per-detection class scores with softmax attention weights and scores
the original (pre-substitution) word's class.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from . import kernels
from .config import TrainConfig, stream_rng
from .embeddings import Vocabulary
from .errors import DataFormatError, DimensionError, TrainingError, VocabularyError
from .synthworld import Dataset, DetectionSet, TrainingToken

PPX_CLIP = 1e-7        # keep sigmoid outputs strictly inside (0, 1)
CLASS_PROB_FLOOR = 1e-12  # clip for -log of an unsupported target class
NEG_INF = -1e30

PARAM_ORDER = (
    "word_emb", "label_emb", "img_init", "lstm_wx", "lstm_wh", "lstm_b",
    "out_w", "out_b", "ppx_w", "ppx_b", "match_w",
)


@dataclass(frozen=True)
class CaptionerDims:
    n_vocab: int
    d_embed: int
    d_image: int
    hidden: int
    d_vis: int
    n_classes: int

    def validate(self) -> None:
        for name, value in self.__dict__.items():
            if value <= 0:
                raise DimensionError(f"dimension {name} must be positive, got {value}")

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {
            "word_emb": (self.n_vocab, self.d_embed),
            "label_emb": (2, self.d_embed),
            "img_init": (self.hidden, self.d_image),
            "lstm_wx": (2 * self.d_embed, 4 * self.hidden),
            "lstm_wh": (self.hidden, 4 * self.hidden),
            "lstm_b": (4 * self.hidden,),
            "out_w": (self.n_vocab, self.hidden),
            "out_b": (self.n_vocab,),
            "ppx_w": (self.hidden,),
            "ppx_b": (1,),
            "match_w": (self.d_vis, self.hidden),
        }


class CaptionerParams:
    """All learned arrays, float32 by default (float64 for gradient checks)."""

    def __init__(self, dims: CaptionerDims, arrays: dict[str, np.ndarray]):
        dims.validate()
        shapes = dims.shapes()
        missing = set(shapes) - set(arrays)
        if missing:
            raise DimensionError(f"missing parameter arrays: {sorted(missing)}")
        self.dims = dims
        for name in PARAM_ORDER:
            arr = np.asarray(arrays[name])
            if arr.shape != shapes[name]:
                raise DimensionError(
                    f"{name} has shape {arr.shape}, expected {shapes[name]}"
                )
            setattr(self, name, arr)
        self.dtype = self.word_emb.dtype

    def as_dict(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_ORDER}

    def copy(self) -> "CaptionerParams":
        return CaptionerParams(self.dims, {k: v.copy() for k, v in self.as_dict().items()})

    def astype(self, dtype) -> "CaptionerParams":
        return CaptionerParams(
            self.dims, {k: v.astype(dtype) for k, v in self.as_dict().items()}
        )

    def check_finite(self, context: str) -> None:
        for name in PARAM_ORDER:
            if not np.isfinite(getattr(self, name)).all():
                raise TrainingError(f"non-finite values in {name} {context}")


def init_params(
    dims: CaptionerDims, seed: int, scale: float = 0.08, zeros: bool = False,
    dtype=np.float32,
) -> CaptionerParams:
    """Uniform(-scale, scale) init, deterministic from seed."""
    rng = stream_rng(seed, "captioner.init")
    arrays = {}
    for name, shape in dims.shapes().items():
        if zeros:
            arrays[name] = np.zeros(shape, dtype=dtype)
        else:
            arrays[name] = rng.uniform(-scale, scale, size=shape).astype(dtype)
    return CaptionerParams(dims, arrays)


def blocked_word_ids(vocab: Vocabulary) -> np.ndarray:
    """Ids the output head may never emit: START and every novel word."""
    blocked = set(range(len(vocab))) - set(vocab.in_domain)
    return np.array(sorted(blocked), dtype=np.int64)


def _masked_softmax(logits: np.ndarray, blocked: np.ndarray) -> np.ndarray:
    """Row softmax with the blocked columns forced to probability zero."""
    if blocked.size:
        logits[:, blocked] = NEG_INF
    shifted = logits - logits.max(axis=1, keepdims=True)
    np.exp(shifted, out=shifted)
    shifted /= shifted.sum(axis=1, keepdims=True)
    return shifted


def detection_mixture(
    det_features: np.ndarray, det_class_scores: np.ndarray, query: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Score detections against a query and mix their class distributions.

    Returns (similarities, attention weights, class probabilities). The
    class probabilities are a convex mix of per-detection score rows, so
    they form a distribution whenever the rows do.
    """
    if det_features.shape[0] == 0:
        raise DimensionError("detection mixture needs at least one detection")
    sims = det_features.astype(np.float64) @ query.astype(np.float64)
    shifted = np.exp(sims - sims.max())
    weights = shifted / shifted.sum()
    class_probs = weights @ det_class_scores.astype(np.float64)
    return sims, weights, class_probs


@dataclass
class DecodeOutput:
    """Greedy decode trace; END is consumed, not included."""

    tokens: list[int]
    perplexities: np.ndarray
    hidden_states: np.ndarray
    distributions: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.tokens)


# ---------------------------------------------------------------------------
# single-sequence operations


def init_state(params: CaptionerParams, image_feature: np.ndarray):
    """Initial LSTM state from the scene feature: h0 = tanh(img_init @ I)."""
    image = np.asarray(image_feature, dtype=params.dtype)
    if image.shape != (params.dims.d_image,):
        raise DimensionError(
            f"image feature shape {image.shape} != ({params.dims.d_image},)"
        )
    h0 = np.tanh(params.img_init @ image)
    c0 = np.zeros_like(h0)
    return h0, c0


def step(params: CaptionerParams, vocab: Vocabulary, prev_word: int,
         prev_label: int, state):
    """One decoder step. Returns (word_probs, perplexity, h, new_state)."""
    if not 0 <= prev_word < params.dims.n_vocab:
        raise VocabularyError(f"word id {prev_word} out of range")
    if prev_label not in (0, 1):
        raise VocabularyError(f"novel label must be 0/1, got {prev_label}")
    h_prev, c_prev = state
    x = np.concatenate([params.word_emb[prev_word], params.label_emb[prev_label]])
    xg = (x @ params.lstm_wx + params.lstm_b).reshape(1, 1, -1)
    h, c, _ = kernels.lstm_seq_forward(
        xg, h_prev.reshape(1, -1), c_prev.reshape(1, -1), params.lstm_wh
    )
    h_t = h[0, 0]
    logits = (params.out_w @ h_t + params.out_b).reshape(1, -1)
    probs = _masked_softmax(logits, blocked_word_ids(vocab))[0]
    ppx = float(expit(params.ppx_w @ h_t + params.ppx_b[0]))
    ppx = min(max(ppx, PPX_CLIP), 1.0 - PPX_CLIP)
    return probs, ppx, h_t, (h_t, c[0, 0])


def decode_greedy(
    params: CaptionerParams, vocab: Vocabulary, image_feature: np.ndarray,
    max_len: int, tau_p: float = 0.15, retain_probs: bool = False,
) -> DecodeOutput:
    """Greedy decode from START; the fed-back novel label is [m > tau_p]."""
    if max_len < 1:
        raise VocabularyError("max_len must be >= 1")
    state = init_state(params, image_feature)
    word, label = vocab.start_id, 0
    tokens: list[int] = []
    ppxs: list[float] = []
    hiddens: list[np.ndarray] = []
    dists: list[np.ndarray] = []
    for _ in range(max_len):
        probs, ppx, h_t, state = step(params, vocab, word, label, state)
        word = int(np.argmax(probs))
        if word == vocab.end_id:
            break
        tokens.append(word)
        ppxs.append(ppx)
        hiddens.append(h_t)
        if retain_probs:
            dists.append(probs)
        label = 1 if ppx > tau_p else 0
    hidden = np.stack(hiddens) if hiddens else np.zeros((0, params.dims.hidden))
    return DecodeOutput(
        tokens=tokens,
        perplexities=np.array(ppxs, dtype=np.float64),
        hidden_states=hidden,
        distributions=np.stack(dists) if retain_probs and dists else None,
    )


def decode_batch(
    params: CaptionerParams, vocab: Vocabulary, image_features: np.ndarray,
    max_len: int, tau_p: float = 0.15,
) -> list[DecodeOutput]:
    """Vectorized greedy decode over many scenes; equals per-scene decode."""
    if max_len < 1:
        raise VocabularyError("max_len must be >= 1")
    images = np.asarray(image_features, dtype=params.dtype)
    n = images.shape[0]
    if n == 0:
        return []
    blocked = blocked_word_ids(vocab)
    h = np.tanh(images @ params.img_init.T)
    c = np.zeros_like(h)
    words = np.full(n, vocab.start_id, dtype=np.int64)
    labels = np.zeros(n, dtype=np.int64)
    done = np.zeros(n, dtype=bool)
    tokens: list[list[int]] = [[] for _ in range(n)]
    ppxs: list[list[float]] = [[] for _ in range(n)]
    hiddens: list[list[np.ndarray]] = [[] for _ in range(n)]
    for _ in range(max_len):
        x = np.concatenate(
            [params.word_emb[words], params.label_emb[labels]], axis=1
        )
        xg = (x @ params.lstm_wx + params.lstm_b).reshape(1, n, -1)
        h_seq, c_seq, _ = kernels.lstm_seq_forward(xg, h, c, params.lstm_wh)
        h, c = h_seq[0], c_seq[0]
        logits = h @ params.out_w.T + params.out_b
        probs = _masked_softmax(logits, blocked)
        ppx = expit(h @ params.ppx_w + params.ppx_b[0])
        ppx = np.clip(ppx, PPX_CLIP, 1.0 - PPX_CLIP)
        words = np.argmax(probs, axis=1)
        for i in range(n):
            if done[i]:
                continue
            if words[i] == vocab.end_id:
                done[i] = True
                continue
            tokens[i].append(int(words[i]))
            ppxs[i].append(float(ppx[i]))
            hiddens[i].append(h[i].copy())
        labels = (ppx > tau_p).astype(np.int64)
        if done.all():
            break
    out = []
    for i in range(n):
        hidden = np.stack(hiddens[i]) if hiddens[i] else np.zeros((0, params.dims.hidden))
        out.append(
            DecodeOutput(
                tokens=tokens[i],
                perplexities=np.array(ppxs[i], dtype=np.float64),
                hidden_states=hidden,
            )
        )
    return out


# ---------------------------------------------------------------------------
# training examples and batches


@dataclass
class SequenceExample:
    scene_id: int
    image: np.ndarray           # (d_image,)
    input_words: np.ndarray     # (T,) START + targets[:-1]
    input_labels: np.ndarray    # (T,)
    target_words: np.ndarray    # (T,) caption tokens + END
    target_labels: np.ndarray   # (T,)
    target_classes: np.ndarray  # (T,) class id of the original word, -1 unmasked


def make_example(
    scene_id: int, image: np.ndarray, tokens: list[TrainingToken],
    vocab: Vocabulary, word_to_class: np.ndarray,
) -> SequenceExample:
    if not tokens:
        raise VocabularyError("cannot build an example from an empty caption")
    words = [t.word_id for t in tokens]
    labels = [t.novel_label for t in tokens]
    targets = words + [vocab.end_id]
    target_labels = labels + [0]
    classes = []
    for t in tokens:
        classes.append(int(word_to_class[t.original_word_id]) if t.novel_label else -1)
    classes.append(-1)
    return SequenceExample(
        scene_id=scene_id,
        image=np.asarray(image, dtype=np.float32),
        input_words=np.array([vocab.start_id] + targets[:-1], dtype=np.int64),
        input_labels=np.array([0] + target_labels[:-1], dtype=np.int64),
        target_words=np.array(targets, dtype=np.int64),
        target_labels=np.array(target_labels, dtype=np.int64),
        target_classes=np.array(classes, dtype=np.int64),
    )


def build_examples(dataset: Dataset, split: str = "train") -> list[SequenceExample]:
    """Flatten (scene, caption) pairs into training sequences."""
    from .synthworld import apply_pseudo_substitution

    word_to_class = dataset.word_to_class()
    examples = []
    for scene in dataset.splits[split]:
        caption_ids = [[dataset.vocab.id_of(w) for w in cap] for cap in scene.captions]
        token_seqs = apply_pseudo_substitution(caption_ids, dataset.pseudo_map, dataset.vocab)
        for tokens in token_seqs:
            examples.append(
                make_example(scene.scene_id, scene.image_feature, tokens,
                             dataset.vocab, word_to_class)
            )
    return examples


@dataclass
class Batch:
    images: np.ndarray          # (B, d_image)
    input_words: np.ndarray     # (T, B)
    input_labels: np.ndarray    # (T, B)
    target_words: np.ndarray    # (T, B)
    target_labels: np.ndarray   # (T, B) float
    target_classes: np.ndarray  # (T, B)
    valid: np.ndarray           # (T, B) float 0/1
    lengths: np.ndarray         # (B,)
    det_features: np.ndarray | None = None  # (B, No, d_vis)
    det_classes: np.ndarray | None = None   # (B, No, n_classes)
    det_valid: np.ndarray | None = None     # (B, No) bool

    @property
    def size(self) -> int:
        return self.images.shape[0]


def make_batch(
    examples: list[SequenceExample],
    detections: dict[int, DetectionSet] | None = None,
    dims: CaptionerDims | None = None,
) -> Batch:
    b = len(examples)
    lengths = np.array([len(e.target_words) for e in examples], dtype=np.int64)
    t_max = int(lengths.max())
    shape = (t_max, b)
    input_words = np.zeros(shape, dtype=np.int64)
    input_labels = np.zeros(shape, dtype=np.int64)
    target_words = np.zeros(shape, dtype=np.int64)
    target_labels = np.zeros(shape, dtype=np.float64)
    target_classes = np.full(shape, -1, dtype=np.int64)
    valid = np.zeros(shape, dtype=np.float64)
    for j, e in enumerate(examples):
        t = len(e.target_words)
        input_words[:t, j] = e.input_words
        input_labels[:t, j] = e.input_labels
        target_words[:t, j] = e.target_words
        target_labels[:t, j] = e.target_labels
        target_classes[:t, j] = e.target_classes
        valid[:t, j] = 1.0
    images = np.stack([e.image for e in examples])
    batch = Batch(images, input_words, input_labels, target_words,
                  target_labels, target_classes, valid, lengths)
    if detections is not None and dims is not None:
        sets = [detections.get(e.scene_id) for e in examples]
        n_max = max((len(s) if s else 0) for s in sets)
        if n_max > 0:
            feats = np.zeros((b, n_max, dims.d_vis), dtype=np.float64)
            classes = np.zeros((b, n_max, dims.n_classes), dtype=np.float64)
            dvalid = np.zeros((b, n_max), dtype=bool)
            for j, s in enumerate(sets):
                if not s:
                    continue
                k = len(s)
                feats[j, :k] = s.feature_matrix()
                classes[j, :k] = s.class_matrix()
                dvalid[j, :k] = True
            batch.det_features = feats
            batch.det_classes = classes
            batch.det_valid = dvalid
    return batch


# ---------------------------------------------------------------------------
# batched forward / loss / backward


def forward_batch(params: CaptionerParams, vocab: Vocabulary, batch: Batch) -> dict:
    """Teacher-forced forward pass; returns every intermediate the loss and
    backward pass need."""
    dt = params.dtype
    t_max, b = batch.input_words.shape
    x = np.concatenate(
        [params.word_emb[batch.input_words], params.label_emb[batch.input_labels]],
        axis=2,
    ).astype(dt, copy=False)
    xg = x @ params.lstm_wx + params.lstm_b
    images = batch.images.astype(dt, copy=False)
    h0 = np.tanh(images @ params.img_init.T)
    c0 = np.zeros_like(h0)
    h, c, gates = kernels.lstm_seq_forward(np.ascontiguousarray(xg), h0, c0, params.lstm_wh)
    flat_h = h.reshape(t_max * b, -1)
    logits = flat_h @ params.out_w.T + params.out_b
    probs = _masked_softmax(logits, blocked_word_ids(vocab))
    ppx_logit = flat_h @ params.ppx_w + params.ppx_b[0]
    ppx = np.clip(expit(ppx_logit), PPX_CLIP, 1.0 - PPX_CLIP)
    return {
        "x": x, "xg": xg, "images": images, "h0": h0, "c0": c0,
        "h": h, "c": c, "gates": gates, "flat_h": flat_h,
        "probs": probs, "ppx": ppx, "t_max": t_max, "b": b,
    }


def _det_positions(batch: Batch) -> np.ndarray:
    """Flat (t * B + j) indices of flagged positions with detections."""
    if batch.det_valid is None:
        return np.array([], dtype=np.int64)
    mask = (batch.target_labels > 0) & (batch.valid > 0)
    has_dets = batch.det_valid.any(axis=1)
    mask &= has_dets[None, :]
    t_idx, b_idx = np.nonzero(mask)
    return t_idx * batch.size + b_idx


def compute_losses(params: CaptionerParams, batch: Batch, cache: dict) -> dict:
    """Caption loss, perplexity term included, plus the detection loss."""
    t_max, b = cache["t_max"], cache["b"]
    probs, ppx = cache["probs"], cache["ppx"]
    flat_targets = batch.target_words.reshape(-1)
    p_target = probs[np.arange(t_max * b), flat_targets].astype(np.float64)
    labels = batch.target_labels.reshape(-1)
    p_label = np.where(labels > 0, ppx, 1.0 - ppx).astype(np.float64)
    valid = batch.valid.reshape(-1)
    inv_len = (1.0 / batch.lengths).astype(np.float64)
    w = valid * np.tile(inv_len, t_max)
    cap = -np.sum(w * np.log(np.maximum(p_target, 1e-300)))
    cap += -np.sum(w * np.log(p_label))
    cap /= b

    det = 0.0
    flat_pos = _det_positions(batch)
    det_cache = None
    if flat_pos.size:
        b_idx = flat_pos % b
        hs = cache["flat_h"][flat_pos]
        q = hs @ params.match_w.T  # (K, d_vis)
        feats = batch.det_features[b_idx]
        sims = np.einsum("kod,kd->ko", feats, q.astype(np.float64))
        sims = np.where(batch.det_valid[b_idx], sims, NEG_INF)
        shifted = np.exp(sims - sims.max(axis=1, keepdims=True))
        alpha = shifted / shifted.sum(axis=1, keepdims=True)
        class_probs = np.einsum("ko,kon->kn", alpha, batch.det_classes[b_idx])
        targets = batch.target_classes.reshape(-1)[flat_pos]
        p_cls = class_probs[np.arange(flat_pos.size), targets]
        counts = np.bincount(b_idx, minlength=b).astype(np.float64)
        per_pos = 1.0 / counts[b_idx]
        det = float(np.sum(-np.log(np.maximum(p_cls, CLASS_PROB_FLOOR)) * per_pos) / b)
        det_cache = {
            "flat_pos": flat_pos, "b_idx": b_idx, "q": q, "alpha": alpha,
            "p_cls": p_cls, "targets": targets, "per_pos": per_pos, "hs": hs,
        }
    return {"cap": float(cap), "det": float(det), "det_cache": det_cache, "w": w}


def backward_batch(
    params: CaptionerParams, vocab: Vocabulary, batch: Batch, cache: dict,
    losses: dict, det_weight: float,
) -> dict[str, np.ndarray]:
    """Analytic gradients of (cap + det_weight * det) for every parameter.

    All arithmetic stays in the parameter dtype (float32 in training,
    float64 when gradient checking).
    """
    dt = params.dtype
    t_max, b = cache["t_max"], cache["b"]
    probs, ppx, flat_h = cache["probs"], cache["ppx"], cache["flat_h"]
    n = t_max * b
    w = (losses["w"] / b).astype(dt)

    dlogits = probs * w[:, None]
    flat_targets = batch.target_words.reshape(-1)
    dlogits[np.arange(n), flat_targets] -= w
    dout_w = dlogits.T @ flat_h
    dout_b = dlogits.sum(axis=0)
    dh_flat = dlogits @ params.out_w

    labels = batch.target_labels.reshape(-1).astype(dt)
    da_m = (ppx.astype(dt) - labels) * w
    dppx_w = flat_h.T @ da_m
    dppx_b = np.array([da_m.sum()], dtype=dt)
    dh_flat += np.outer(da_m, params.ppx_w)

    dmatch_w = np.zeros_like(params.match_w)
    dc = losses["det_cache"]
    if dc is not None and det_weight > 0.0:
        coeff = np.where(dc["p_cls"] > CLASS_PROB_FLOOR, 1.0 / dc["p_cls"], 0.0)
        coeff = -coeff * dc["per_pos"] * det_weight / b
        # dO is coeff at the target column only
        cls_cols = batch.det_classes[dc["b_idx"], :, :]
        dalpha = cls_cols[np.arange(dc["flat_pos"].size), :, dc["targets"]] * coeff[:, None]
        alpha = dc["alpha"]
        dsims = alpha * (dalpha - np.sum(alpha * dalpha, axis=1, keepdims=True))
        feats = batch.det_features[dc["b_idx"]]
        dq = np.einsum("ko,kod->kd", dsims, feats)
        dmatch_w = (dq.T @ dc["hs"]).astype(dt)
        dh_det = (dq @ params.match_w).astype(dt)
        np.add.at(dh_flat, dc["flat_pos"], dh_det)

    dh_out = np.ascontiguousarray(dh_flat.reshape(t_max, b, -1))
    dxg, dlstm_wh, dh0, _ = kernels.lstm_seq_backward(
        cache["gates"], cache["c"], cache["h"], cache["h0"], cache["c0"],
        params.lstm_wh, dh_out,
    )
    flat_dxg = dxg.reshape(n, -1)
    flat_x = cache["x"].reshape(n, -1)
    dlstm_wx = flat_x.T @ flat_dxg
    dlstm_b = flat_dxg.sum(axis=0)
    dx = flat_dxg @ params.lstm_wx.T

    d_e = params.dims.d_embed
    dword_emb = np.zeros_like(params.word_emb)
    np.add.at(dword_emb, batch.input_words.reshape(-1), dx[:, :d_e])
    dlabel_emb = np.zeros_like(params.label_emb)
    np.add.at(dlabel_emb, batch.input_labels.reshape(-1), dx[:, d_e:])

    h0 = cache["h0"]
    da0 = dh0 * (1.0 - h0 * h0)
    dimg_init = da0.T @ cache["images"]

    return {
        "word_emb": dword_emb, "label_emb": dlabel_emb, "img_init": dimg_init,
        "lstm_wx": dlstm_wx, "lstm_wh": dlstm_wh,
        "lstm_b": dlstm_b, "out_w": dout_w, "out_b": dout_b,
        "ppx_w": dppx_w, "ppx_b": dppx_b, "match_w": dmatch_w,
    }


def loss_and_grads(
    params: CaptionerParams, vocab: Vocabulary, batch: Batch, det_weight: float,
) -> tuple[float, float, float, dict[str, np.ndarray]]:
    cache = forward_batch(params, vocab, batch)
    losses = compute_losses(params, batch, cache)
    grads = backward_batch(params, vocab, batch, cache, losses, det_weight)
    total = losses["cap"] + det_weight * losses["det"]
    return total, losses["cap"], losses["det"], grads


# spec-shaped single-sequence wrappers ---------------------------------------


def loss_cap(
    params: CaptionerParams, vocab: Vocabulary, tokens: list[TrainingToken],
    image_feature: np.ndarray,
) -> float:
    """Teacher-forced caption + perplexity loss for one sequence."""
    if not tokens:
        raise VocabularyError("empty token sequence")
    word_to_class = np.full(params.dims.n_vocab, -1, dtype=np.int64)
    example = make_example(0, image_feature, tokens, vocab, word_to_class)
    batch = make_batch([example])
    cache = forward_batch(params, vocab, batch)
    return compute_losses(params, batch, cache)["cap"]


def loss_det(
    params: CaptionerParams, hidden_states: np.ndarray, novel_labels: np.ndarray,
    detections: DetectionSet, target_classes: np.ndarray,
) -> float:
    """Detection-matching loss over flagged positions of one sequence.

    Positions with label 1 score the target class under the detection
    mixture; the loss is their mean, 0 when nothing is flagged. A target
    class with no support contributes a floored log instead of -inf.
    """
    flagged = [t for t, lab in enumerate(novel_labels) if lab == 1]
    if not flagged:
        return 0.0
    feats = detections.feature_matrix()
    if feats.shape[0] == 0:
        return 0.0
    classes = detections.class_matrix()
    total = 0.0
    for t in flagged:
        query = params.match_w.astype(np.float64) @ hidden_states[t].astype(np.float64)
        _, _, class_probs = detection_mixture(feats, classes, query)
        p = max(float(class_probs[int(target_classes[t])]), CLASS_PROB_FLOOR)
        total += -np.log(p)
    return total / len(flagged)


# ---------------------------------------------------------------------------
# optimization


class AdamState:
    def __init__(self, params: CaptionerParams):
        self.m = {k: np.zeros_like(v) for k, v in params.as_dict().items()}
        self.v = {k: np.zeros_like(v) for k, v in params.as_dict().items()}
        self.t = 0


def clip_gradients(grads: dict[str, np.ndarray], clip_norm: float) -> float:
    """Global-norm clipping in place; returns the pre-clip norm."""
    total = 0.0
    for g in grads.values():
        total += float(np.sum(g.astype(np.float64) ** 2))
    norm = float(np.sqrt(total))
    if clip_norm > 0.0 and norm > clip_norm:
        scale = clip_norm / norm
        for g in grads.values():
            g *= scale
    return norm


def apply_update(
    params: CaptionerParams, grads: dict[str, np.ndarray], config: TrainConfig,
    state: AdamState | None,
) -> None:
    for name in PARAM_ORDER:
        g = grads[name]
        if not np.isfinite(g).all():
            raise TrainingError(f"non-finite gradient in {name}")
    if config.optimizer == "sgd":
        for name in PARAM_ORDER:
            getattr(params, name)[...] -= config.lr * grads[name]
        return
    state.t += 1
    b1, b2, eps = config.beta1, config.beta2, config.adam_eps
    bias1 = 1.0 - b1 ** state.t
    bias2 = 1.0 - b2 ** state.t
    for name in PARAM_ORDER:
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = (m / bias1) / (np.sqrt(v / bias2) + eps)
        getattr(params, name)[...] -= config.lr * update


def train(
    dataset: Dataset,
    detections: dict[int, DetectionSet],
    config: TrainConfig,
    seed: int,
    epochs: int | None = None,
    log_fn=None,
) -> tuple[CaptionerParams, list[float]]:
    """Train on the substituted train split; returns params and the
    per-epoch mean loss history."""
    config.validate()
    dims = CaptionerDims(
        n_vocab=len(dataset.vocab),
        d_embed=dataset.world.config.d_e,
        d_image=dataset.world.config.d_image,
        hidden=config.hidden,
        d_vis=dataset.world.config.d_v,
        n_classes=len(dataset.world.classes),
    )
    params = init_params(dims, seed)
    examples = build_examples(dataset, "train")
    if not examples:
        raise TrainingError("train split has no sequences")
    state = AdamState(params) if config.optimizer == "adam" else None
    n_epochs = config.epochs if epochs is None else epochs
    history: list[float] = []
    order = np.arange(len(examples))
    for epoch in range(n_epochs):
        rng = stream_rng(seed, f"train.shuffle.{epoch}")
        rng.shuffle(order)
        total = 0.0
        count = 0
        for lo in range(0, len(order), config.batch_size):
            chunk = [examples[i] for i in order[lo : lo + config.batch_size]]
            batch = make_batch(chunk, detections, dims)
            loss, _, _, grads = loss_and_grads(params, dataset.vocab, batch,
                                               config.det_weight)
            clip_gradients(grads, config.clip_norm)
            apply_update(params, grads, config, state)
            params.check_finite(f"after update (epoch {epoch})")
            total += loss * batch.size
            count += batch.size
        history.append(total / count)
        if log_fn is not None:
            log_fn(epoch, history[-1])
    return params, history


# ---------------------------------------------------------------------------
# checkpoints

CHECKPOINT_MAGIC = b"CRNCKPT1"


def save_checkpoint(params: CaptionerParams, path) -> None:
    """Binary format: magic, six u32-LE dims, then each array row-major as
    float32-LE in PARAM_ORDER."""
    d = params.dims
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<6I", d.n_vocab, d.d_embed, d.d_image, d.hidden,
                             d.d_vis, d.n_classes))
        for name in PARAM_ORDER:
            arr = np.ascontiguousarray(getattr(params, name), dtype="<f4")
            fh.write(arr.tobytes())


def load_checkpoint(path, expect: CaptionerDims | None = None) -> CaptionerParams:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(CHECKPOINT_MAGIC) + 24:
        raise DataFormatError(f"{path}: truncated checkpoint header")
    if blob[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise DataFormatError(f"{path}: bad magic, not a checkpoint")
    dims = CaptionerDims(*struct.unpack_from("<6I", blob, len(CHECKPOINT_MAGIC)))
    if expect is not None and dims != expect:
        raise DimensionError(
            f"{path}: checkpoint dims {dims} do not match expected {expect}"
        )
    offset = len(CHECKPOINT_MAGIC) + 24
    arrays = {}
    for name, shape in dims.shapes().items():
        n = int(np.prod(shape))
        end = offset + 4 * n
        if end > len(blob):
            raise DataFormatError(f"{path}: truncated in {name}")
        arrays[name] = np.frombuffer(blob[offset:end], dtype="<f4").reshape(shape).copy()
        offset = end
    if offset != len(blob):
        raise DataFormatError(f"{path}: {len(blob) - offset} trailing bytes")
    return CaptionerParams(dims, arrays)
