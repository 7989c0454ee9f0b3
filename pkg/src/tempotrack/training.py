"""Loss, optimizer, schedule, and the two-stage regime.

Stage A trains the backbone on 2-frame sub-clips through the matching head,
so its features become spatially discriminative but temporally naive. Stage
B freezes the backbone and trains only the adapters on full-length clips.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tt
from . import tracker
from .adapter import AdapterConfig, AdapterSet, ConfigError
from .backbone import BackboneConfig
from .pipeline import TrackingModel
from .tensor import Tensor


class TrainingDiverged(RuntimeError):
    """Loss became non-finite."""


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    weight_decay: float = 1e-4
    iters: int = 2000
    warmup_iters: int = 100
    batch_clips: int = 1
    queries_per_batch: int = 64
    huber_delta: float = 1.0  # px; switches to the robust linear branch past this
    seed: int = 0

    def __post_init__(self):
        if not self.warmup_iters < self.iters:
            raise ValueError(
                f"warmup_iters ({self.warmup_iters}) must be < iters ({self.iters})"
            )
        if self.huber_delta <= 0:
            raise ValueError(f"huber_delta must be positive, got {self.huber_delta}")

    def meta(self, prefix="train.") -> dict:
        return {
            f"{prefix}lr": self.lr,
            f"{prefix}weight_decay": self.weight_decay,
            f"{prefix}iters": self.iters,
            f"{prefix}warmup_iters": self.warmup_iters,
            f"{prefix}batch_clips": self.batch_clips,
            f"{prefix}queries_per_batch": self.queries_per_batch,
            f"{prefix}huber_delta": self.huber_delta,
            f"{prefix}seed": self.seed,
        }


def huber(pred, gt, delta: float) -> Tensor:
    """Huber loss on the Euclidean error between two (x, y) positions."""
    pred = pred if isinstance(pred, Tensor) else Tensor(np.asarray(pred, dtype=np.float64))
    gt = np.asarray(gt, dtype=np.float64).reshape(1, 1, 2)
    return tt.huber_track_loss(tt.reshape(pred, (1, 1, 2)), gt, np.ones((1, 1), bool), delta)


def masked_track_loss(preds, gts, visible, delta: float = 1.0) -> Tensor:
    """Mean Huber over the visible frames of one track (0 if none visible)."""
    preds = preds if isinstance(preds, Tensor) else Tensor(np.asarray(preds, dtype=np.float64))
    t = preds.data.shape[0]
    gts = np.asarray(gts, dtype=np.float64).reshape(1, t, 2)
    visible = np.asarray(visible, dtype=bool).reshape(1, t)
    return tt.huber_track_loss(tt.reshape(preds, (1, t, 2)), gts, visible, delta)


def cosine_lr(it: int, warmup_iters: int, total_iters: int, base_lr: float) -> float:
    """Linear 0 -> base_lr over warmup, then cosine decay to 0."""
    if not 0 <= it < total_iters:
        raise ValueError(f"iteration {it} outside [0, {total_iters})")
    if warmup_iters > 0 and it < warmup_iters:
        return base_lr * (it + 1) / warmup_iters
    progress = (it - warmup_iters) / max(total_iters - warmup_iters, 1)
    return base_lr * 0.5 * (1.0 + np.cos(np.pi * progress))


class AdamW:
    """Decoupled weight decay Adam. Parameters with requires_grad=False are
    never touched; missing grads count as zero."""

    def __init__(self, params: dict[str, Tensor], weight_decay: float = 0.0,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = dict(params)
        self.weight_decay = weight_decay
        self.betas = betas
        self.eps = eps
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self, lr: float):
        b1, b2 = self.betas
        self.step_count += 1
        t = self.step_count
        bias1 = 1.0 - b1**t
        bias2 = 1.0 - b2**t
        for name, p in self.params.items():
            if not p.requires_grad:
                continue
            g = p.grad if p.grad is not None else 0.0
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * np.square(g)
            update = (m / bias1) / (np.sqrt(v / bias2) + self.eps)
            p.data = p.data - lr * (update + self.weight_decay * p.data)


def _visible_query_pool(tracks, lo: int, hi: int) -> np.ndarray:
    """(track_idx, frame) pairs with the point visible, frame in [lo, hi)."""
    pairs = []
    for j, tr in enumerate(tracks):
        for t in range(lo, hi):
            if tr.visible[t]:
                pairs.append((j, t))
    return np.array(pairs, dtype=np.int64).reshape(-1, 2)


def _batch_from_pool(rng, clip, pool, lo, hi, n_queries):
    """Sample queries uniformly from the visible pool; targets span [lo, hi)."""
    pick = pool[rng.integers(len(pool), size=n_queries)]
    queries = []
    gts = np.zeros((n_queries, hi - lo, 2), dtype=np.float64)
    vis = np.zeros((n_queries, hi - lo), dtype=bool)
    for i, (j, t) in enumerate(pick):
        tr = clip.tracks[j]
        queries.append(tracker.QueryPoint(
            x=float(tr.positions[t, 0]), y=float(tr.positions[t, 1]), t=int(t - lo)))
        gts[i] = tr.positions[lo:hi]
        vis[i] = tr.visible[lo:hi]
    return queries, gts, vis


def _train_loop(model: TrackingModel, clips, config: TrainConfig, window: int | None):
    """Shared loop: window=None trains on full clips, otherwise on random
    contiguous sub-clips of that many frames."""
    if not clips:
        raise ValueError("training dataset is empty")
    rng = np.random.default_rng([config.seed, 0x57E9])
    optimizer = AdamW(model.trainable_parameters(), weight_decay=config.weight_decay)
    # with a frozen backbone and full clips, everything below the first
    # adapter slot is input-constant; cache it per clip
    use_prefix = (window is None and model.adapters is not None
                  and model.adapters.slots and model.backbone.frozen)
    first_slot = min(model.adapters.slots) if use_prefix else None
    prefix_cache: dict[int, np.ndarray] = {}
    log = []
    for it in range(config.iters):
        with tt.fresh_graph():
            loss_val = 0.0
            lr = cosine_lr(it, config.warmup_iters, config.iters, config.lr)
            for _ in range(config.batch_clips):
                ci = int(rng.integers(len(clips)))
                clip = clips[ci]
                t_total = clip.frames.shape[0]
                if window is None:
                    lo, hi = 0, t_total
                else:
                    lo = int(rng.integers(t_total - window + 1))
                    hi = lo + window
                pool = _visible_query_pool(clip.tracks, lo, hi)
                if len(pool) == 0:
                    continue  # nothing visible in this window; skip draw
                queries, gts, vis = _batch_from_pool(
                    rng, clip, pool, lo, hi, config.queries_per_batch)
                if use_prefix:
                    tok = prefix_cache.get(ci)
                    if tok is None:
                        with tt.no_grad():
                            tok = model.backbone.prefix_tokens(
                                clip.frames_float(), first_slot).data
                        prefix_cache[ci] = tok
                    feats = model.backbone.features_from_prefix(
                        Tensor(tok), first_slot, model.adapters)
                else:
                    feats = model.extract_features(clip.frames_float()[lo:hi])
                preds = tracker.track_batch(feats, queries, model.patch, model.matcher)
                loss = tt.huber_track_loss(preds, gts, vis, config.huber_delta)
                if not np.isfinite(loss.item()):
                    raise TrainingDiverged(f"non-finite loss at iteration {it}")
                loss.backward()
                loss_val += loss.item()
            optimizer.step(lr)
            optimizer.zero_grad()
        log.append((it, lr, loss_val / max(config.batch_clips, 1)))
    return log


def train_stage_a(clips, bb_config: BackboneConfig, config: TrainConfig,
                  matcher: tracker.MatcherConfig | None = None) -> tuple[TrackingModel, list]:
    """Pretrain the backbone, no adapters, on 2-frame sub-clips.

    The backbone never sees more than adjacent-frame context, so temporal
    awareness can only ever come from adapters trained later.
    """
    model = TrackingModel.build(bb_config, seed=config.seed, matcher=matcher)
    log = _train_loop(model, clips, config, window=2)
    model.meta.update({"stage": "pretrain", "seed": config.seed})
    model.meta.update(config.meta())
    return model, log


def train_stage_b(model: TrackingModel, clips, adapter_config: AdapterConfig,
                  config: TrainConfig) -> tuple[TrackingModel, list]:
    """Freeze the backbone and train adapters on full-length clips."""
    if not clips:
        raise ValueError("training dataset is empty")
    t_total = min(clip.frames.shape[0] for clip in clips)
    if adapter_config.window > t_total:
        raise ConfigError(
            f"adapter window {adapter_config.window} exceeds clip length {t_total}"
        )
    depth = model.backbone.config.depth
    model.backbone.freeze()
    adapters = AdapterSet(adapter_config, depth, np.random.default_rng([config.seed, 0xADA]))
    adapted = TrackingModel(model.backbone, adapters, model.matcher)
    log = _train_loop(adapted, clips, config, window=None)
    adapted.meta.update({"stage": "adapter", "seed": config.seed})
    adapted.meta.update(config.meta())
    return adapted, log


def write_loss_log(path, log):
    with open(path, "w", encoding="utf-8") as f:
        f.write("# iter lr loss\n")
        for it, lr, loss in log:
            f.write(f"{it} {lr:.8g} {loss:.8g}\n")
