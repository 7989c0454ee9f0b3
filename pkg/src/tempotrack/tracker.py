"""Refiner-free point prediction: bilinear query-feature extraction, cosine
correlation volumes, and temperature-scaled masked soft-argmax over the
feature grid. The whole head is non-parametric; during training gradients
flow through the softmax weights back into the features.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tt
from .tensor import Tensor


@dataclass(frozen=True)
class QueryPoint:
    """(x, y) in pixels on frame t."""

    x: float
    y: float
    t: int


@dataclass(frozen=True)
class MatcherConfig:
    """Soft-argmax head settings: softmax temperature and the radius (in
    feature-grid cells) kept around the correlation argmax."""

    tau: float = 20.0
    mask_radius: float = 5.0

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if self.mask_radius < 0:
            raise ValueError(f"mask_radius must be >= 0, got {self.mask_radius}")


@dataclass
class TrackPrediction:
    query: QueryPoint
    positions: np.ndarray  # (T, 2) pixels


def pixel_to_grid(x: float, y: float, patch: int) -> tuple[float, float]:
    """Pixel coords -> feature-grid coords; cell g is centered at pixel (g + 0.5) * patch."""
    return x / patch - 0.5, y / patch - 0.5


def grid_to_pixel(gx: float, gy: float, patch: int) -> tuple[float, float]:
    return (gx + 0.5) * patch, (gy + 0.5) * patch


def check_query_bounds(q: QueryPoint, width: int, height: int, frames: int):
    if not (np.isfinite(q.x) and np.isfinite(q.y)):
        raise ValueError(f"query ({q.x}, {q.y}, t={q.t}) has non-finite coordinates")
    if not (0 <= q.x < width and 0 <= q.y < height):
        raise ValueError(
            f"query ({q.x}, {q.y}, t={q.t}) outside frame bounds {width}x{height}"
        )
    if not 0 <= q.t < frames:
        raise ValueError(f"query frame t={q.t} outside clip of {frames} frames")


def extract_query_feature(features: Tensor, q: QueryPoint, patch: int) -> Tensor:
    """Bilinear sample of the frame-t feature grid at the query position."""
    t_count, hp, wp, _ = features.data.shape
    check_query_bounds(q, wp * patch, hp * patch, t_count)
    gx, gy = pixel_to_grid(q.x, q.y, patch)
    return tt.bilinear_sample2d(features[q.t], gx, gy)


def correlation(f_q: Tensor, features: Tensor) -> Tensor:
    """Cosine similarity between the query vector and every feature cell.

    Returns (T, Hp, Wp) in [-1, 1]. Zero-norm feature cells score 0; a
    zero-norm query is rejected.
    """
    if float((f_q.data * f_q.data).sum()) == 0.0:
        raise ValueError("correlation: query feature has zero norm")
    t, hp, wp, c = features.data.shape
    qn = tt.l2_normalize(tt.reshape(f_q, (1, c)))
    fn = tt.l2_normalize(tt.reshape(features, (t * hp * wp, c)))
    corr = tt.matmul(fn, tt.transpose(qn, (1, 0)))
    return tt.reshape(corr, (t, hp, wp))


def _argmax_cell_mask(values: np.ndarray, mask_radius: float):
    """Row-major-first argmax per map plus the additive keep mask around it.

    values: (..., Hp, Wp). Returns (argmax_x, argmax_y, additive_mask)."""
    hp, wp = values.shape[-2], values.shape[-1]
    flat = values.reshape(*values.shape[:-2], hp * wp)
    idx = flat.argmax(axis=-1)  # ties resolve to the smallest row-major index
    ay, ax = np.divmod(idx, wp)
    gy, gx = np.indices((hp, wp))
    dist2 = (gx[None] - ax.reshape(-1)[:, None, None]) ** 2 + (
        gy[None] - ay.reshape(-1)[:, None, None]
    ) ** 2
    keep = dist2 <= mask_radius * mask_radius
    add = np.where(keep, 0.0, tt.NEG_INF_LOGIT).reshape(values.shape).astype(values.dtype)
    return ax, ay, add


def soft_argmax(corr_map: Tensor, tau: float, mask_radius: float) -> Tensor:
    """Masked soft-argmax of one (Hp, Wp) map -> grid coords (gx, gy).

    Keeps cells within Euclidean distance mask_radius (grid cells) of the
    argmax (ties break to the smallest row-major index), softmaxes the kept
    values scaled by tau, and returns the weighted average cell coordinate.
    """
    if corr_map.data.ndim != 2:
        raise tt.ShapeError(f"soft_argmax expects (Hp,Wp), got {corr_map.data.shape}")
    if np.isnan(corr_map.data).all():
        raise ValueError("soft_argmax: correlation map is all-NaN")
    out = _soft_argmax_grid(tt.reshape(corr_map, (1, 1) + corr_map.data.shape), tau, mask_radius)
    return tt.reshape(out, (2,))


def _soft_argmax_grid(corr: Tensor, tau: float, mask_radius: float) -> Tensor:
    """Batched soft-argmax: (Q, T, Hp, Wp) -> (Q, T, 2) grid coords."""
    q, t, hp, wp = corr.data.shape
    _, _, add = _argmax_cell_mask(corr.data, mask_radius)
    weights = tt.masked_softmax(tt.reshape(corr, (q, t, hp * wp)), add.reshape(q, t, hp * wp), tau=tau)
    gy, gx = np.indices((hp, wp))
    coords = np.stack([gx.reshape(-1), gy.reshape(-1)], axis=1).astype(corr.data.dtype)
    flat = tt.reshape(weights, (q * t, hp * wp))
    out = tt.linear(flat, Tensor(coords))
    return tt.reshape(out, (q, t, 2))


def query_features_batch(features: Tensor, queries: list[QueryPoint], patch: int) -> Tensor:
    """Bilinear features for many queries at once: (Nq, C)."""
    t_count, hp, wp, _ = features.data.shape
    for q in queries:
        check_query_bounds(q, wp * patch, hp * patch, t_count)
    ts = np.array([q.t for q in queries], dtype=np.int64)
    gx = np.array([pixel_to_grid(q.x, q.y, patch)[0] for q in queries])
    gy = np.array([pixel_to_grid(q.x, q.y, patch)[1] for q in queries])
    return tt.bilinear_gather(features, ts, gx, gy)


def correlation_batch(f_q: Tensor, features: Tensor) -> Tensor:
    """Cosine volumes for a batch of query vectors: (Nq, C) -> (Nq, T, Hp, Wp)."""
    norms = (f_q.data * f_q.data).sum(axis=-1)
    if (norms == 0.0).any():
        raise ValueError("correlation_batch: a query feature has zero norm")
    t, hp, wp, c = features.data.shape
    qn = tt.l2_normalize(f_q)
    fn = tt.l2_normalize(tt.reshape(features, (t * hp * wp, c)))
    corr = tt.matmul(qn, tt.transpose(fn, (1, 0)))
    return tt.reshape(corr, (f_q.data.shape[0], t, hp, wp))


def track_batch(features: Tensor, queries: list[QueryPoint], patch: int,
                matcher: MatcherConfig) -> Tensor:
    """Differentiable batched head: predicted pixel positions (Nq, T, 2)."""
    fq = query_features_batch(features, queries, patch)
    corr = correlation_batch(fq, features)
    grid = _soft_argmax_grid(corr, matcher.tau, matcher.mask_radius)
    return tt.add(tt.scale(grid, float(patch)), float(patch) * 0.5)


def track(clip: np.ndarray, queries: list[QueryPoint], model) -> list[TrackPrediction]:
    """Track every query through the clip with one shared feature extraction.

    clip: (T, H, W, 3) floats in [0, 1]. model: anything exposing
    extract_features(clip) -> (T,Hp,Wp,C) Tensor plus .patch and .matcher.
    """
    if not queries:
        return []
    with tt.no_grad():
        features = model.extract_features(clip)
        positions = track_batch(features, queries, model.patch, model.matcher)
    return [
        TrackPrediction(query=q, positions=positions.data[i].astype(np.float64))
        for i, q in enumerate(queries)
    ]
