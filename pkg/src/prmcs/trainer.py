"""Optimization loops: teacher distillation, robustness fine-tuning, and
few-shot adaptation, plus desk-scale synthetic data generation.

All loops are bit-deterministic given (config, seed, data): one RngStream
drives batch sampling, kind selection, and perturbation draws in a fixed
order, so re-running a configuration reproduces the parameter bytes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import textproc
from .embed import (
    EmbeddingMatrix,
    EncoderParams,
    ManifestEntry,
    fnv1a_64,
    encode_tokens,
    token_ids,
)
from .errors import DatasetTooSmall, DimensionMismatch, ManifestMismatch, ShapeMismatch
from .losses import LossWeights, ParamGrads, TripletBatch, encode_backward, grad_total
from .rng import RngStream
from .textproc import KINDS, CaptionRecord, tokenize


@dataclass
class TrainConfig:
    lr: float = 5e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    batch_size: int = 32
    steps: int = 1000
    seed: int = 0
    p: float = 0.4
    kinds: tuple[str, ...] = KINDS
    weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        self.kinds = tuple(self.kinds)
        for k in self.kinds:
            if k not in KINDS:
                raise ValueError(f"unknown perturbation kind {k!r}")

    @staticmethod
    def from_dict(d: dict) -> "TrainConfig":
        d = dict(d)
        weights = d.pop("weights", None)
        cfg = TrainConfig(**d)
        if weights is not None:
            cfg.weights = LossWeights(**weights)
        return cfg


@dataclass
class OptimizerState:
    """AdamW moments, shaped like the trainable parameter blocks."""

    m: ParamGrads
    v: ParamGrads
    t: int = 0

    @staticmethod
    def zeros_like(params: EncoderParams) -> "OptimizerState":
        return OptimizerState(m=ParamGrads.zeros_like(params), v=ParamGrads.zeros_like(params))


_BLOCKS = ("table", "w1", "b1", "w2", "b2")


def adamw_step(
    params: EncoderParams, grads: ParamGrads, state: OptimizerState, config: TrainConfig
) -> None:
    """One decoupled-weight-decay Adam update, in place.

    theta <- theta - lr * (m_hat / (sqrt(v_hat) + eps) + wd * theta)
    """
    state.t += 1
    bc1 = 1.0 - config.beta1**state.t
    bc2 = 1.0 - config.beta2**state.t
    for block in _BLOCKS:
        g = getattr(grads, block)
        theta = getattr(params, block)
        if g.shape != theta.shape:
            raise ShapeMismatch(f"{block}: grad {g.shape} vs param {theta.shape}")
        m = getattr(state.m, block)
        v = getattr(state.v, block)
        m *= config.beta1
        m += (1.0 - config.beta1) * g
        v *= config.beta2
        v += (1.0 - config.beta2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + config.eps)
        theta -= config.lr * (update + config.weight_decay * theta)
    # scalar temperature follows the same rule, then the clamp
    state.m.temp_logit = config.beta1 * state.m.temp_logit + (1.0 - config.beta1) * grads.temp_logit
    state.v.temp_logit = config.beta2 * state.v.temp_logit + (1.0 - config.beta2) * grads.temp_logit**2
    update = (state.m.temp_logit / bc1) / (math.sqrt(state.v.temp_logit / bc2) + config.eps)
    params.temp_logit -= config.lr * (update + config.weight_decay * params.temp_logit)
    params.clamp_temp()


_CONSONANTS = "bdfgklmnprstvz"
_VOWELS = "aeiou"


def _pseudo_word(rng: RngStream) -> str:
    n_syll = 2 + rng.below(3)
    return "".join(
        _CONSONANTS[rng.below(len(_CONSONANTS))] + _VOWELS[rng.below(len(_VOWELS))]
        for _ in range(n_syll)
    )


def synth_dataset(
    n_pairs: int,
    vocab_words: int = 500,
    dim: int = 32,
    noise_sigma: float = 0.1,
    seed: int = 0,
) -> tuple[EmbeddingMatrix, list[CaptionRecord]]:
    """Paired synthetic captions and image embeddings.

    A lexicon of pseudo-words gets one random unit vector each; a caption
    samples 8-20 distinct words and its image embedding is the normalized
    sum of their vectors plus optional gaussian noise, so image-caption
    affinity is built in by construction. Captions list their words in
    lexicon order: that fixed "grammar" gives the synthetic language
    order regularities, without which order-breaking perturbations would
    be statistically invisible on held-out data. 2-4 caption words are
    recorded as critical objects.
    """
    _, _, images, records = synth_world(n_pairs, vocab_words, dim, noise_sigma, seed)
    return images, records


def synth_world(
    n_pairs: int,
    vocab_words: int = 500,
    dim: int = 32,
    noise_sigma: float = 0.1,
    seed: int = 0,
) -> tuple[list[str], np.ndarray, EmbeddingMatrix, list[CaptionRecord]]:
    """synth_dataset plus the generating lexicon and word vectors."""
    if n_pairs < 1:
        raise ValueError("n_pairs must be >= 1")
    rng = RngStream(seed)
    lexicon: list[str] = []
    seen = set()
    while len(lexicon) < vocab_words:
        w = _pseudo_word(rng)
        if w not in seen:
            seen.add(w)
            lexicon.append(w)
    # word vectors combine a shared anchor (the narrow embedding cone of
    # real dual encoders), a topic direction (captions describe a coherent
    # scene, so dropping words preserves most of the meaning), and an
    # idiosyncratic part; random unit vectors overall
    n_topics = max(1, vocab_words // 20)
    anchor = np.zeros(dim)
    anchor[min(1, dim - 1)] = 1.0
    topic_dirs = np.empty((n_topics, dim), dtype=np.float64)
    for t in range(n_topics):
        d = np.array([rng.gauss() for _ in range(dim)])
        topic_dirs[t] = d / np.linalg.norm(d)
    topic_of = np.array([i % n_topics for i in range(vocab_words)])
    word_vecs = np.empty((vocab_words, dim), dtype=np.float64)
    for i in range(vocab_words):
        v = np.array([rng.gauss() for _ in range(dim)])
        v = v + 1.0 * anchor + 4.0 * topic_dirs[topic_of[i]]
        word_vecs[i] = v / np.linalg.norm(v)
    # canonical lexicon order tracks the first embedding coordinate, so the
    # word-order convention of captions is recoverable from the vectors the
    # teacher/image side supervises
    order = sorted(range(vocab_words), key=lambda j: (word_vecs[j, 0], lexicon[j]))
    lexicon = [lexicon[j] for j in order]
    word_vecs = word_vecs[order]
    topic_of = topic_of[order]
    by_topic = [[j for j in range(vocab_words) if topic_of[j] == t] for t in range(n_topics)]

    records = []
    image_rows = np.empty((n_pairs, dim), dtype=np.float64)
    manifest = []
    pad = len(str(n_pairs))
    for i in range(n_pairs):
        n_words = 8 + rng.below(13)
        topic = rng.below(n_topics)
        pool = by_topic[topic]
        chosen: set[int] = set()
        while len(chosen) < n_words:
            # captions are mostly on-topic with a few stray words
            if rng.unit() < 0.8 and len(chosen) < len(pool):
                chosen.add(pool[rng.below(len(pool))])
            else:
                chosen.add(rng.below(vocab_words))
        idxs = sorted(chosen)
        words = [lexicon[j] for j in idxs]
        caption = " ".join(words)
        # objects sit at spread-out caption positions so substitution swaps
        # words across a wide span of the canonical order
        n_obj = min(2 + rng.below(3), len(words))
        positions = [round(k * (len(words) - 1) / max(1, n_obj - 1)) for k in range(n_obj)]
        objects = [words[pos] for pos in positions]
        vec = word_vecs[idxs].sum(axis=0)
        if noise_sigma > 0:
            vec = vec + noise_sigma * np.array([rng.gauss() for _ in range(dim)])
        image_rows[i] = vec / np.linalg.norm(vec)
        rec_id = f"rec{i:0{pad}d}"
        img_id = f"img{i:0{pad}d}"
        records.append(
            CaptionRecord(
                id=rec_id, lang="en", caption=caption, critical_objects=objects, image_id=img_id
            )
        )
        manifest.append(ManifestEntry(row=i, id=img_id, lang="en"))
    images = EmbeddingMatrix(dim=dim, data=image_rows.astype(np.float32), manifest=manifest)
    return lexicon, word_vecs, images, records


@dataclass
class TraceRow:
    step: int
    total: float
    l_clip: float = 0.0
    l1: float = 0.0
    l2: float = 0.0
    l3: float = 0.0


def _batch_indices(rng: RngStream, n: int, batch_size: int) -> list[int]:
    # full-batch mode when the batch covers the dataset, else draws with replacement
    if batch_size >= n:
        return list(range(n))
    return [rng.below(n) for _ in range(batch_size)]


def train_distill(
    teacher: EmbeddingMatrix,
    captions: list[CaptionRecord],
    params: EncoderParams,
    config: TrainConfig,
) -> tuple[EncoderParams, list[TraceRow]]:
    """Match encoder outputs to frozen teacher embeddings under MSE."""
    if teacher.dim != params.out_dim:
        raise DimensionMismatch(
            f"teacher dim {teacher.dim} does not match encoder out_dim {params.out_dim}"
        )
    index = teacher.row_index()
    rows = []
    for rec in captions:
        if rec.id not in index:
            raise ManifestMismatch(f"caption id {rec.id!r} missing from teacher manifest")
        rows.append(index[rec.id])
    targets = teacher.data[rows].astype(np.float64)
    tokens = [tokenize(r.caption, r.lang) for r in captions]
    ids = [token_ids(t, params.vocab_size) for t in tokens]

    params = params.copy()
    state = OptimizerState.zeros_like(params)
    rng = RngStream(config.seed)
    trace = []
    n = len(captions)
    d = params.out_dim
    for step in range(config.steps):
        batch = _batch_indices(rng, n, config.batch_size)
        grads = ParamGrads.zeros_like(params)
        loss = 0.0
        for i in batch:
            cache = encode_tokens(params, ids[i])
            diff = cache.out - targets[i]
            loss += float(diff @ diff) / d
            dout = (2.0 / (d * len(batch))) * diff
            encode_backward(params, cache, dout, grads)
        loss /= len(batch)
        adamw_step(params, grads, state, config)
        trace.append(TraceRow(step=step, total=loss))
    return params, trace


def perturb_tokens(
    rec: CaptionRecord, tokens: list[str], kind: str, p: float, rng: RngStream
) -> list[str]:
    if kind == textproc.SUBSTITUTION:
        caption = textproc.perturb_substitution(rec.caption, rec.critical_objects, rng)
        return tokenize(caption, rec.lang)
    if kind == textproc.REPETITION:
        return textproc.perturb_repetition(tokens, p, rng)
    if kind == textproc.REMOVAL:
        return textproc.perturb_removal(tokens, p, rng)
    if kind == textproc.MASKING:
        return textproc.perturb_masking(tokens, p, rng)
    if kind == textproc.JUMBLE:
        return textproc.perturb_jumble(tokens, rng)
    raise ValueError(f"unknown perturbation kind {kind!r}")


def train_pr(
    images: EmbeddingMatrix,
    captions: list[CaptionRecord],
    params: EncoderParams,
    config: TrainConfig,
) -> tuple[EncoderParams, list[TraceRow]]:
    """Robustness fine-tuning on (image, original, perturbed) triplets.

    Each step samples a batch, picks ONE perturbation kind uniformly for
    the whole batch, and regenerates perturbed captions fresh from the
    step's draws, so the perturbation space is resampled every epoch.
    """
    if images.dim != params.out_dim:
        raise DimensionMismatch(
            f"image dim {images.dim} does not match encoder out_dim {params.out_dim}"
        )
    index = images.row_index()
    rows = []
    for rec in captions:
        if rec.image_id not in index:
            raise ManifestMismatch(f"image id {rec.image_id!r} missing from matrix manifest")
        rows.append(index[rec.image_id])
    image_vecs = images.data.astype(np.float64)
    tokens = [tokenize(r.caption, r.lang) for r in captions]

    params = params.copy()
    state = OptimizerState.zeros_like(params)
    rng = RngStream(config.seed)
    trace = []
    n = len(captions)
    for step in range(config.steps):
        batch = _batch_indices(rng, n, config.batch_size)
        kind = config.kinds[rng.below(len(config.kinds))]
        perturbed = [
            perturb_tokens(captions[i], tokens[i], kind, config.p, rng) for i in batch
        ]
        triplets = TripletBatch(
            images=image_vecs[[rows[i] for i in batch]],
            original_tokens=[tokens[i] for i in batch],
            perturbed_tokens=perturbed,
            kind=kind,
        )
        breakdown, grads = grad_total(triplets, params, config.weights)
        adamw_step(params, grads, state, config)
        trace.append(
            TraceRow(
                step=step,
                total=breakdown.total,
                l_clip=breakdown.l_clip,
                l1=breakdown.l1,
                l2=breakdown.l2,
                l3=breakdown.l3,
            )
        )
    return params, trace


def few_shot_split(records: list[CaptionRecord]) -> tuple[list[CaptionRecord], list[CaptionRecord]]:
    """Deterministic 1:9 split by ascending id hash, adaptation capped at 300."""
    n = len(records)
    if n < 10:
        raise DatasetTooSmall(f"need at least 10 records, got {n}")
    take = min(n // 10, 300)
    order = sorted(records, key=lambda r: (fnv1a_64(r.id.encode("utf-8")), r.id))
    adapt_ids = {r.id for r in order[:take]}
    adapt = [r for r in records if r.id in adapt_ids]
    rest = [r for r in records if r.id not in adapt_ids]
    return adapt, rest


def train_few_shot(
    images: EmbeddingMatrix,
    records: list[CaptionRecord],
    params: EncoderParams,
    config: TrainConfig,
) -> tuple[EncoderParams, list[TraceRow], list[CaptionRecord]]:
    """Adapt on the hashed 10% subset (<= 300 records); returns the 90% split."""
    adapt, held_out = few_shot_split(records)
    trained, trace = train_pr(images, adapt, params, config)
    return trained, trace, held_out
