"""The caption-image similarity score and batch scoring of datasets.

score = w * max(0, cos(image embedding, text embedding)), w = 2.5 by
default. The same operation serves both the plain and the
robustness-fine-tuned encoder; only the parameters differ.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .embed import EmbeddingMatrix, EncoderParams, cosine, encode_text
from .errors import UnknownImageId
from .textproc import CaptionRecord, tokenize

ORIGINAL = "original"


@dataclass
class MetricConfig:
    w: float = 2.5

    def __post_init__(self):
        if self.w <= 0:
            raise ValueError("score weight must be positive")


@dataclass
class ScoreRow:
    id: str
    lang: str
    kind: str  # "original" or a perturbation kind
    score: float


def mcs(image_vec: np.ndarray, text_vec: np.ndarray, cfg: MetricConfig | None = None) -> float:
    """Weighted clamped cosine between an image and a caption embedding."""
    cfg = cfg or MetricConfig()
    return cfg.w * max(0.0, cosine(image_vec, text_vec))


def score_dataset(
    images: EmbeddingMatrix,
    params: EncoderParams,
    records: list[CaptionRecord],
    cfg: MetricConfig | None = None,
) -> list[ScoreRow]:
    """One score row per record, in input order."""
    cfg = cfg or MetricConfig()
    index = images.row_index()
    data = images.data.astype(np.float64)
    rows = []
    for rec in records:
        if rec.image_id not in index:
            raise UnknownImageId(f"record {rec.id!r}: image id {rec.image_id!r} not in manifest")
        text_vec = encode_text(params, tokenize(rec.caption, rec.lang))
        score = mcs(data[index[rec.image_id]], text_vec, cfg)
        rows.append(ScoreRow(id=rec.id, lang=rec.lang, kind=rec.kind or ORIGINAL, score=score))
    return rows


def scores_to_csv(rows: list[ScoreRow]) -> str:
    """CSV with scores at 6 significant digits (full precision stays in memory)."""
    lines = ["id,lang,kind,score"]
    lines.extend(f"{r.id},{r.lang},{r.kind},{r.score:.6g}" for r in rows)
    return "\n".join(lines) + "\n"


def scores_from_csv(text: str) -> list[ScoreRow]:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0] != "id,lang,kind,score":
        raise ValueError("score CSV must start with header 'id,lang,kind,score'")
    rows = []
    for ln in lines[1:]:
        rid, lang, kind, score = ln.split(",")
        rows.append(ScoreRow(id=rid, lang=lang, kind=kind, score=float(score)))
    return rows
