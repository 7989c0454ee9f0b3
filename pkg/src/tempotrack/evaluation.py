"""Track evaluation: query sampling modes, threshold position accuracies,
trajectory jitter, and PCA feature dumps."""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from . import formats
from .synthdata import GroundTruthTrack
from .tracker import QueryPoint, TrackPrediction

THRESHOLDS = (1.0, 2.0, 4.0, 8.0, 16.0)
STRIDE = 5


class EvalError(RuntimeError):
    """Evaluation cannot produce a defined result (e.g. no visible points)."""


def sample_queries_strided(track: GroundTruthTrack) -> list[QueryPoint]:
    """Queries every STRIDE frames along the track, at visible frames only."""
    out = []
    for t in range(0, len(track.visible), STRIDE):
        if track.visible[t]:
            out.append(QueryPoint(x=float(track.positions[t, 0]),
                                  y=float(track.positions[t, 1]), t=t))
    return out


def sample_queries_first(track: GroundTruthTrack) -> QueryPoint | None:
    """Query at the earliest visible frame, or None if never visible."""
    idx = np.flatnonzero(track.visible)
    if len(idx) == 0:
        return None
    t = int(idx[0])
    return QueryPoint(x=float(track.positions[t, 0]), y=float(track.positions[t, 1]), t=t)


def _pair_errors(pred: TrackPrediction, gt: GroundTruthTrack) -> np.ndarray:
    if pred.positions.shape[0] != gt.positions.shape[0]:
        raise ValueError(
            f"prediction has {pred.positions.shape[0]} frames, ground truth "
            f"{gt.positions.shape[0]}"
        )
    d = pred.positions - gt.positions
    return np.sqrt((d * d).sum(axis=1))


def delta_accuracy(pairs, thresholds=THRESHOLDS) -> dict[float, float]:
    """Fraction of visible ground-truth points within each threshold.

    pairs: iterable of (TrackPrediction, GroundTruthTrack); points are pooled
    over all pairs (every visible frame of every query counts once).
    """
    counts = np.zeros(len(thresholds), dtype=np.int64)
    total = 0
    for pred, gt in pairs:
        err = _pair_errors(pred, gt)[gt.visible]
        total += err.size
        for i, thr in enumerate(thresholds):
            counts[i] += int((err <= thr).sum())
    if total == 0:
        raise EvalError("no visible ground-truth points: accuracy undefined")
    return {thr: counts[i] / total for i, thr in enumerate(thresholds)}


def jitter(pred_positions: np.ndarray, visible: np.ndarray) -> float | None:
    """Mean second-difference magnitude over frames whose full (t-1, t, t+1)
    triple is visible; None when no such triple exists. Units: px/frame^2.

    This quantifies track shakiness; it is a harness-side diagnostic, not a
    benchmark-defined metric."""
    visible = np.asarray(visible, dtype=bool)
    t = len(visible)
    vals = []
    for i in range(1, t - 1):
        if visible[i - 1] and visible[i] and visible[i + 1]:
            second = pred_positions[i + 1] - 2 * pred_positions[i] + pred_positions[i - 1]
            vals.append(float(np.sqrt((second * second).sum())))
    if not vals:
        return None
    return float(np.mean(vals))


@dataclass
class EvalReport:
    mode: str
    accuracies: dict[float, float]
    avg_accuracy: float
    mean_jitter: float | None
    n_queries: int
    n_visible_points: int
    n_clips: int
    config: dict = field(default_factory=dict)

    def to_text(self) -> str:
        meta = {
            "mode": self.mode,
            "n_clips": self.n_clips,
            "n_queries": self.n_queries,
            "n_visible_points": self.n_visible_points,
        }
        for thr in sorted(self.accuracies):
            meta[f"delta_{int(thr)}px"] = f"{self.accuracies[thr]:.6f}"
        meta["delta_avg"] = f"{self.avg_accuracy:.6f}"
        meta["mean_jitter_px"] = "none" if self.mean_jitter is None else f"{self.mean_jitter:.6f}"
        meta.update({k: str(v) for k, v in self.config.items()})
        return formats.encode_kv(meta)


def evaluate(model, clips, mode: str = "strided", oracle: bool = False) -> EvalReport:
    """Evaluate a model over clips: sample queries per mode from the ground
    truth (never from predictions), track, and pool the metrics.

    oracle=True replaces predictions with the ground truth itself; it
    validates the harness (accuracy must be exactly 1).
    """
    if mode not in ("strided", "first"):
        raise ValueError(f"unknown eval mode {mode!r}")
    counts = np.zeros(len(THRESHOLDS), dtype=np.int64)
    total_visible = 0
    n_queries = 0
    jitters = []
    for clip in clips:
        query_pairs: list[tuple[QueryPoint, GroundTruthTrack]] = []
        for track in clip.tracks:
            if mode == "strided":
                query_pairs.extend((q, track) for q in sample_queries_strided(track))
            else:
                q = sample_queries_first(track)
                if q is not None:
                    query_pairs.append((q, track))
        if not query_pairs:
            continue
        queries = [q for q, _ in query_pairs]
        if oracle:
            preds = [TrackPrediction(query=q, positions=gt.positions.astype(np.float64))
                     for q, gt in query_pairs]
        else:
            preds = model.track(clip.frames_float(), queries)
        n_queries += len(queries)
        for pred, (_, gt) in zip(preds, query_pairs):
            err = _pair_errors(pred, gt)[gt.visible]
            total_visible += err.size
            for i, thr in enumerate(THRESHOLDS):
                counts[i] += int((err <= thr).sum())
            j = jitter(pred.positions, gt.visible)
            if j is not None:
                jitters.append(j)
    if total_visible == 0:
        raise EvalError("no queries produced any visible evaluation points")
    acc = {thr: counts[i] / total_visible for i, thr in enumerate(THRESHOLDS)}
    return EvalReport(
        mode=mode,
        accuracies=acc,
        avg_accuracy=float(np.mean(list(acc.values()))),
        mean_jitter=float(np.mean(jitters)) if jitters else None,
        n_queries=n_queries,
        n_visible_points=int(total_visible),
        n_clips=len(clips),
    )


# ---------------------------------------------------------------------------
# PCA feature visualization
# ---------------------------------------------------------------------------

def _power_iteration_pca(x: np.ndarray, n_components: int = 3,
                         iters: int = 60, seed: int = 0) -> np.ndarray:
    """Leading principal axes of row-sample matrix x (n, c) by deflated power
    iteration with a fixed seed and iteration count (deterministic)."""
    n, c = x.shape
    cov = (x.T @ x) / max(n - 1, 1)
    rng = np.random.default_rng(seed)
    comps = []
    for _ in range(min(n_components, c)):
        v = rng.standard_normal(c)
        v /= np.linalg.norm(v)
        for _ in range(iters):
            v = cov @ v
            norm = np.linalg.norm(v)
            if norm < 1e-12:
                v = None
                break
            v /= norm
        if v is None:
            break
        lam = float(v @ cov @ v)
        comps.append(v)
        cov = cov - lam * np.outer(v, v)
    return np.array(comps)  # (k<=3, c)


def pca_feature_images(features: np.ndarray, seed: int = 0) -> np.ndarray:
    """(T, Hp, Wp, C) features -> (T, Hp, Wp, 3) uint8 RGB.

    PCA is fit jointly over all T*Hp*Wp vectors; each projected channel is
    min-max normalized jointly across frames. Rank-deficient features fall
    back to fewer components, remaining channels zero."""
    t, hp, wp, c = features.shape
    if c < 3:
        raise ValueError(f"need at least 3 channels for RGB projection, got {c}")
    flat = features.reshape(-1, c).astype(np.float64)
    centered = flat - flat.mean(axis=0)
    comps = _power_iteration_pca(centered, 3)
    proj = np.zeros((flat.shape[0], 3))
    if comps.size:
        proj[:, : comps.shape[0]] = centered @ comps.T
    lo = proj.min(axis=0)
    hi = proj.max(axis=0)
    span = np.where(hi - lo < 1e-12, 1.0, hi - lo)
    scaled = (proj - lo) / span * 255.0
    return np.clip(np.round(scaled), 0, 255).astype(np.uint8).reshape(t, hp, wp, 3)


def pca_dump(features: np.ndarray, out_dir, seed: int = 0) -> list[str]:
    """Write one pixmap per frame (frame_000.ppm, ...); returns the paths."""
    os.makedirs(out_dir, exist_ok=True)
    images = pca_feature_images(features, seed=seed)
    paths = []
    for t in range(images.shape[0]):
        path = os.path.join(out_dir, f"frame_{t:03d}.ppm")
        formats.write_ppm(path, images[t])
        paths.append(path)
    return paths
