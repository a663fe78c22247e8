"""Objective terms for robustness fine-tuning, their analytic gradients,
and a finite-difference gradient verifier.

For a batch of (image v, original caption o, perturbed caption p) triplets
with text embeddings to = T(o), tp = T(p):

    l1 term   1 - cos(v, to)          pull originals toward their image
    l2 term   max(0, cos(v, tp))      push perturbed away from the image
    l3 term   max(0, cos(to, tp))     push perturbed away from the original
    clip      symmetric in-batch cross-entropy over cos(v_i, to_j) logits
              scaled by exp(temp_logit)

    total = clip + l1_w * mean(l1) + l2_w * mean(l2) + l3_w * mean(l3)

The clamp kinks of the max(0, .) terms use subgradient 0 at cos = 0, and
the finite-difference verifier skips coordinates whose evaluation lands
within 1e-6 of a kink or crosses one.

All math here is float64. Gradients flow only into the text encoder and
the temperature; image vectors are frozen inputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .embed import EncodeCache, EncoderParams, cosine, encode_tokens, token_ids
from .errors import DimensionMismatch, ShapeMismatch
from .rng import RngStream

_EPS_NORM = 1e-12
_KINK_EPS = 1e-6


@dataclass
class LossWeights:
    l1: float = 0.1
    l2: float = 0.05
    l3: float = 0.05


@dataclass
class TripletBatch:
    """Aligned image vectors and original/perturbed token sequences."""

    images: np.ndarray  # (B, d) float64
    original_tokens: list[list[str]]
    perturbed_tokens: list[list[str]]
    kind: str = ""

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        b = self.images.shape[0]
        if b < 1:
            raise ShapeMismatch("batch must contain at least one triplet")
        if not (len(self.original_tokens) == len(self.perturbed_tokens) == b):
            raise ShapeMismatch(
                f"batch lengths disagree: {b} images, {len(self.original_tokens)} originals, "
                f"{len(self.perturbed_tokens)} perturbed"
            )


@dataclass
class ParamGrads:
    """Gradient blocks aligned with EncoderParams' trainable fields."""

    table: np.ndarray
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    temp_logit: float = 0.0

    @staticmethod
    def zeros_like(params: EncoderParams) -> "ParamGrads":
        return ParamGrads(
            table=np.zeros_like(params.table),
            w1=np.zeros_like(params.w1),
            b1=np.zeros_like(params.b1),
            w2=np.zeros_like(params.w2),
            b2=np.zeros_like(params.b2),
            temp_logit=0.0,
        )


def loss_l1(v: np.ndarray, t_o: np.ndarray) -> float:
    return 1.0 - cosine(v, t_o)


def loss_l2(v: np.ndarray, t_p: np.ndarray) -> float:
    return max(0.0, cosine(v, t_p))


def loss_l3(t_o: np.ndarray, t_p: np.ndarray) -> float:
    return max(0.0, cosine(t_o, t_p))


def loss_distill_mse(t: np.ndarray, s: np.ndarray) -> float:
    """Mean squared difference over dimensions (batched callers average again)."""
    t = np.asarray(t, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    if t.shape != s.shape:
        raise DimensionMismatch(f"mse: {t.shape} vs {s.shape}")
    return float(np.mean((t - s) ** 2))


def _cos_matrix(vs: np.ndarray, ts: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """All-pairs cosine with the zero-norm rule; returns (C, |v|, |t|)."""
    nv = np.linalg.norm(vs, axis=1)
    nt = np.linalg.norm(ts, axis=1)
    denom = np.outer(np.where(nv < _EPS_NORM, 1.0, nv), np.where(nt < _EPS_NORM, 1.0, nt))
    c = (vs @ ts.T) / denom
    c[nv < _EPS_NORM, :] = 0.0
    c[:, nt < _EPS_NORM] = 0.0
    return c, nv, nt


def _log_softmax(s: np.ndarray, axis: int) -> np.ndarray:
    shifted = s - s.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def loss_clip(vs: np.ndarray, ts: np.ndarray, temp_logit: float) -> float:
    """Symmetric in-batch contrastive cross-entropy with the diagonal as targets."""
    vs = np.asarray(vs, dtype=np.float64)
    ts = np.asarray(ts, dtype=np.float64)
    if vs.shape != ts.shape:
        raise DimensionMismatch(f"clip loss: {vs.shape} vs {ts.shape}")
    c, _, _ = _cos_matrix(vs, ts)
    s = c * np.exp(temp_logit)
    b = s.shape[0]
    diag = np.arange(b)
    row_ce = -_log_softmax(s, axis=1)[diag, diag]
    col_ce = -_log_softmax(s, axis=0)[diag, diag]
    return float(0.5 * (row_ce.mean() + col_ce.mean()))


@dataclass
class LossBreakdown:
    """Raw (unweighted) term values plus per-example clamp-term cosines."""

    total: float
    l_clip: float
    l1: float
    l2: float
    l3: float
    cos_l2: np.ndarray
    cos_l3: np.ndarray


def _encode_batch(params: EncoderParams, token_lists: list[list[str]]) -> list[EncodeCache]:
    return [encode_tokens(params, token_ids(toks, params.vocab_size)) for toks in token_lists]


def forward_total(
    batch: TripletBatch, params: EncoderParams, weights: LossWeights
) -> LossBreakdown:
    caches_o = _encode_batch(params, batch.original_tokens)
    caches_p = _encode_batch(params, batch.perturbed_tokens)
    return _forward_from_caches(batch, params, weights, caches_o, caches_p)[0]


def _forward_from_caches(batch, params, weights, caches_o, caches_p):
    vs = batch.images
    b = vs.shape[0]
    if vs.shape[1] != params.out_dim:
        raise DimensionMismatch(
            f"image dim {vs.shape[1]} does not match encoder out_dim {params.out_dim}"
        )
    tos = np.stack([c.out for c in caches_o])
    tps = np.stack([c.out for c in caches_p])

    c_clip, nv, nto = _cos_matrix(vs, tos)
    tau = float(np.exp(params.temp_logit))
    s = c_clip * tau
    diag = np.arange(b)
    log_p_rows = _log_softmax(s, axis=1)
    log_p_cols = _log_softmax(s, axis=0)
    l_clip = float(0.5 * (-log_p_rows[diag, diag].mean() - log_p_cols[diag, diag].mean()))

    cos_l1 = c_clip[diag, diag]
    cos_l2 = np.array([cosine(vs[i], tps[i]) for i in range(b)])
    cos_l3 = np.array([cosine(tos[i], tps[i]) for i in range(b)])
    l1 = float(np.mean(1.0 - cos_l1))
    l2 = float(np.mean(np.maximum(0.0, cos_l2)))
    l3 = float(np.mean(np.maximum(0.0, cos_l3)))
    total = l_clip + weights.l1 * l1 + weights.l2 * l2 + weights.l3 * l3
    breakdown = LossBreakdown(
        total=total, l_clip=l_clip, l1=l1, l2=l2, l3=l3, cos_l2=cos_l2, cos_l3=cos_l3
    )
    ctx = (tos, tps, c_clip, nv, nto, tau, log_p_rows, log_p_cols)
    return breakdown, ctx


def loss_total(batch: TripletBatch, params: EncoderParams, weights: LossWeights) -> float:
    return forward_total(batch, params, weights).total


def _dcos_sides(u: np.ndarray, v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(d cos/d u, d cos/d v); both zero under the zero-norm rule."""
    nu = float(np.linalg.norm(u))
    nv = float(np.linalg.norm(v))
    if nu < _EPS_NORM or nv < _EPS_NORM:
        return np.zeros_like(u), np.zeros_like(v)
    c = float(u @ v) / (nu * nv)
    du = v / (nu * nv) - c * u / (nu * nu)
    dv = u / (nu * nv) - c * v / (nv * nv)
    return du, dv


def encode_backward(
    params: EncoderParams, cache: EncodeCache, dout: np.ndarray, grads: ParamGrads
) -> None:
    grads.w2 += np.outer(dout, cache.hidden_act)
    grads.b2 += dout
    dhidden = params.w2.T @ dout
    dpre = dhidden * (1.0 - cache.hidden_act**2)
    grads.w1 += np.outer(dpre, cache.pooled)
    grads.b1 += dpre
    n = len(cache.ids)
    if n:
        dpooled = params.w1.T @ dpre
        np.add.at(grads.table, cache.ids, cache.gates * (dpooled[None, :] / n))


def grad_total(
    batch: TripletBatch, params: EncoderParams, weights: LossWeights
) -> tuple[LossBreakdown, ParamGrads]:
    """Loss value and exact analytic gradients for every trainable block."""
    caches_o = _encode_batch(params, batch.original_tokens)
    caches_p = _encode_batch(params, batch.perturbed_tokens)
    breakdown, ctx = _forward_from_caches(batch, params, weights, caches_o, caches_p)
    tos, tps, c_clip, nv, nto, tau, log_p_rows, log_p_cols = ctx
    vs = batch.images
    b = vs.shape[0]
    diag = np.arange(b)

    grads = ParamGrads.zeros_like(params)
    d_tos = np.zeros_like(tos)
    d_tps = np.zeros_like(tps)

    # clip: dL/dS = ((P - I) + (Q - I)) / 2B, then through S = tau * C.
    p_rows = np.exp(log_p_rows)
    q_cols = np.exp(log_p_cols)
    eye = np.eye(b)
    d_s = (p_rows - eye + q_cols - eye) / (2.0 * b)
    grads.temp_logit += float(np.sum(d_s * c_clip)) * tau
    d_c = d_s * tau
    # dC_ij/dto_j = v_i/(|v_i||t_j|) - C_ij * t_j/|t_j|^2, zero for zero norms.
    safe_nv = np.where(nv < _EPS_NORM, 1.0, nv)
    safe_nto = np.where(nto < _EPS_NORM, 1.0, nto)
    m = d_c / safe_nv[:, None]
    term1 = (m.T @ vs) / safe_nto[:, None]
    term2 = tos / (safe_nto**2)[:, None] * np.sum(d_c * c_clip, axis=0)[:, None]
    d_clip_t = term1 - term2
    d_clip_t[nto < _EPS_NORM] = 0.0
    zero_v = nv < _EPS_NORM
    if zero_v.any():
        # rows with zero image norm contributed C = 0 with zero gradient
        d_clip_t -= ((d_c[zero_v].T) @ (vs[zero_v] / safe_nv[zero_v, None])) / safe_nto[:, None]
    d_tos += d_clip_t

    for i in range(b):
        # l1: d(1 - cos)/dto
        _, dto = _dcos_sides(vs[i], tos[i])
        d_tos[i] += -(weights.l1 / b) * dto
        # l2: active side of max(0, cos(v, tp))
        if breakdown.cos_l2[i] > 0.0:
            _, dtp = _dcos_sides(vs[i], tps[i])
            d_tps[i] += (weights.l2 / b) * dtp
        # l3: both text embeddings move when active
        if breakdown.cos_l3[i] > 0.0:
            dto3, dtp3 = _dcos_sides(tos[i], tps[i])
            d_tos[i] += (weights.l3 / b) * dto3
            d_tps[i] += (weights.l3 / b) * dtp3

    for i in range(b):
        encode_backward(params, caches_o[i], d_tos[i], grads)
        encode_backward(params, caches_p[i], d_tps[i], grads)
    return breakdown, grads


def _sample_coords(batch: TripletBatch, params: EncoderParams, seed: int) -> list[tuple[str, tuple]]:
    """Deterministic coordinate sample spanning every trainable block.

    Table coordinates are restricted to rows actually touched by the
    batch; untouched rows have exactly zero gradient on both routes.
    """
    rng = RngStream(seed)
    touched = sorted(
        {
            int(i)
            for toks in batch.original_tokens + batch.perturbed_tokens
            for i in token_ids(toks, params.vocab_size)
        }
    )
    coords: list[tuple[str, tuple]] = []
    for _ in range(64 if touched else 0):
        row = touched[rng.below(len(touched))]
        coords.append(("table", (row, rng.below(params.hidden))))
    for _ in range(64):
        coords.append(("w1", (rng.below(params.hidden), rng.below(params.hidden))))
    for _ in range(24):
        coords.append(("b1", (rng.below(params.hidden),)))
    for _ in range(56):
        coords.append(("w2", (rng.below(params.out_dim), rng.below(params.hidden))))
    for _ in range(24):
        coords.append(("b2", (rng.below(params.out_dim),)))
    coords.append(("temp_logit", ()))
    return coords


def _near_kink(b: LossBreakdown, other: LossBreakdown) -> bool:
    for arr_a, arr_b in ((b.cos_l2, other.cos_l2), (b.cos_l3, other.cos_l3)):
        if np.any(np.abs(arr_a) < _KINK_EPS) or np.any(np.abs(arr_b) < _KINK_EPS):
            return True
        if np.any(np.sign(arr_a) != np.sign(arr_b)):
            return True
    return False


def finite_diff_check(
    batch: TripletBatch,
    params: EncoderParams,
    weights: LossWeights,
    h: float = 1e-5,
    grads: ParamGrads | None = None,
    seed: int = 0xFD,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    Checks a deterministic sample of >= 200 coordinates across all blocks.
    Coordinates whose +/- h evaluations straddle or graze a clamp kink are
    skipped: the loss is non-differentiable there by construction.
    """
    if grads is None:
        _, grads = grad_total(batch, params, weights)
    work = params.copy()
    worst = 0.0
    for block, idx in _sample_coords(batch, params, seed):
        if block == "temp_logit":
            base = work.temp_logit
            work.temp_logit = base + h
            up = forward_total(batch, work, weights)
            work.temp_logit = base - h
            down = forward_total(batch, work, weights)
            work.temp_logit = base
            g_a = grads.temp_logit
        else:
            arr = getattr(work, block)
            base = arr[idx]
            arr[idx] = base + h
            up = forward_total(batch, work, weights)
            arr[idx] = base - h
            down = forward_total(batch, work, weights)
            arr[idx] = base
            g_a = getattr(grads, block)[idx]
        if _near_kink(up, down):
            continue
        g_n = (up.total - down.total) / (2.0 * h)
        rel = abs(g_a - g_n) / max(1e-8, abs(g_a) + abs(g_n))
        worst = max(worst, rel)
    return worst
