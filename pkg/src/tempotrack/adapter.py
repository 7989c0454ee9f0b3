"""Temporal adapter: strided conv down-projection, local-window temporal
aggregation at each spatial location, transposed-conv up-projection, and a
residual connection. The up-projection starts at exactly zero, so a freshly
built adapter is the identity map and training departs from the frozen
baseline smoothly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as tt
from .tensor import Tensor

AGGREGATIONS = ("attn1d", "conv1d", "conv3d")
PLACEMENTS = ("all", "early", "later", "alternating")


class ConfigError(ValueError):
    """Invalid module configuration."""


@dataclass(frozen=True)
class AdapterConfig:
    """Bottleneck temporal adapter settings.

    stride: spatial down/up-sampling factor s.
    window: local temporal window N (odd); attention spans offsets [-k, k],
        k = (N-1)/2, truncated at clip boundaries.
    c_in / c_out: backbone channels and bottleneck channels (c_out < c_in).
    aggregation: attn1d (per-location window attention), conv1d (depthwise
        temporal conv, kernel N, zero-padded) or conv3d (Nx3x3 conv).
    placement: all | early | later | alternating, or an explicit slot tuple.
    temporal_bias: learned per-offset additive attention logit (attn1d only).
    """

    stride: int = 2
    window: int = 13
    c_in: int = 64
    c_out: int = 16
    aggregation: str = "attn1d"
    placement: object = "all"
    temporal_bias: bool = False

    def __post_init__(self):
        if self.window < 1 or self.window % 2 == 0:
            raise ConfigError(f"window must be odd and >= 1, got {self.window}")
        if self.stride < 1:
            raise ConfigError(f"stride must be >= 1, got {self.stride}")
        if not self.c_out < self.c_in:
            raise ConfigError(
                f"bottleneck requires c_out < c_in, got c_out={self.c_out}, c_in={self.c_in}"
            )
        if self.aggregation not in AGGREGATIONS:
            raise ConfigError(
                f"unknown aggregation {self.aggregation!r}, expected one of {AGGREGATIONS}"
            )
        if isinstance(self.placement, str):
            if self.placement not in PLACEMENTS:
                raise ConfigError(
                    f"unknown placement {self.placement!r}, expected one of {PLACEMENTS} "
                    "or an explicit slot tuple"
                )
        else:
            object.__setattr__(self, "placement", tuple(int(s) for s in self.placement))

    @property
    def k(self) -> int:
        return (self.window - 1) // 2


def placement_slots(placement, depth: int) -> tuple[int, ...]:
    """Adapter slot indices for a backbone of `depth` blocks.

    Slot i sits between block i and block i+1, so there are depth-1 slots.
    all -> every slot; early/later -> first/last ceil((depth-1)/2) slots;
    alternating -> every other slot starting at 0.
    """
    if depth < 2:
        raise ConfigError(f"placement needs depth >= 2, got {depth}")
    n_slots = depth - 1
    if isinstance(placement, str):
        if placement == "all":
            return tuple(range(n_slots))
        half = math.ceil(n_slots / 2)
        if placement == "early":
            return tuple(range(half))
        if placement == "later":
            return tuple(range(n_slots - half, n_slots))
        if placement == "alternating":
            return tuple(range(0, n_slots, 2))
        raise ConfigError(f"unknown placement {placement!r}")
    slots = tuple(sorted(set(int(s) for s in placement)))
    for s in slots:
        if not 0 <= s < n_slots:
            raise ConfigError(f"slot {s} out of range for depth {depth} (valid: 0..{n_slots - 1})")
    return slots


class TemporalAdapter:
    """One adapter instance: down conv, temporal aggregation, up conv, residual."""

    def __init__(self, config: AdapterConfig, rng: np.random.Generator, dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype)
        c_in, c_out, n = config.c_in, config.c_out, config.window
        std_down = 1.0 / math.sqrt(9 * c_in)
        p = {
            "down_w": tt.param(rng.standard_normal((3, 3, c_in, c_out)) * std_down, dtype),
            "down_b": tt.param(np.zeros(c_out), dtype),
            # zero-init keeps adapter_forward an exact identity at start
            "up_w": tt.param(np.zeros((3, 3, c_out, c_in)), dtype),
            "up_b": tt.param(np.zeros(c_in), dtype),
        }
        if config.aggregation == "attn1d":
            std_proj = 1.0 / math.sqrt(c_out)
            for name in ("wq", "wk", "wv"):
                p[name] = tt.param(rng.standard_normal((c_out, c_out)) * std_proj, dtype)
            if config.temporal_bias:
                p["offset_bias"] = tt.param(np.zeros(n), dtype)
        elif config.aggregation == "conv1d":
            tw = np.zeros((n, c_out))
            tw[config.k] = 1.0  # start as the temporal identity
            p["agg_w"] = tt.param(tw, dtype)
            p["agg_b"] = tt.param(np.zeros(c_out), dtype)
        else:  # conv3d
            tw = np.zeros((n, 3, 3, c_out, c_out))
            tw[config.k, 1, 1] = np.eye(c_out)
            p["agg_w"] = tt.param(tw, dtype)
            p["agg_b"] = tt.param(np.zeros(c_out), dtype)
        self.params = p

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def _check_grid(self, t: Tensor):
        if t.data.ndim != 4:
            raise tt.ShapeError(f"adapter expects (T,Hp,Wp,C), got {t.data.shape}")
        _, h, w, c = t.data.shape
        s = self.config.stride
        if h % s or w % s:
            raise ConfigError(f"grid ({h},{w}) not divisible by stride {s}")
        if c != self.config.c_in:
            raise tt.ShapeError(f"channel axis is {c}, adapter configured for {self.config.c_in}")

    def down_project(self, f_in: Tensor) -> Tensor:
        """(T, Hp, Wp, c_in) -> (T, Hp/s, Wp/s, c_out), per-frame strided conv."""
        self._check_grid(f_in)
        return tt.conv2d(f_in, self.params["down_w"], self.params["down_b"],
                         stride=self.config.stride, padding=1)

    def up_project(self, f_agg: Tensor) -> Tensor:
        """(T, Hp/s, Wp/s, c_out) -> (T, Hp, Wp, c_in), transposed conv."""
        s = self.config.stride
        return tt.conv_transpose2d(f_agg, self.params["up_w"], self.params["up_b"],
                                   stride=s, padding=1, output_padding=s - 1)

    def temporal_window_attention(self, f_down: Tensor, return_weights: bool = False):
        """Per-location attention over the same spatial cell in the N nearest
        frames. The window is truncated at clip boundaries: softmax runs over
        valid offsets only (masked logits underflow to exactly zero weight)."""
        T, H, W, C = f_down.data.shape
        k = self.config.k
        q = tt.linear(f_down, self.params["wq"])
        key = tt.linear(f_down, self.params["wk"])
        v = tt.linear(f_down, self.params["wv"])

        def per_location(x):
            return tt.reshape(tt.transpose(x, (1, 2, 0, 3)), (H * W, T, C))

        ql, kl, vl = per_location(q), per_location(key), per_location(v)
        scores = tt.matmul(ql, tt.transpose(kl, (0, 2, 1)))
        mask = _band_mask(T, k, f_down.data.dtype)[None]
        inv_sqrt_d = 1.0 / math.sqrt(C)
        if self.config.temporal_bias:
            scores = tt.scale(scores, inv_sqrt_d)
            bias = tt.band_from_offsets(self.params["offset_bias"], T)
            scores = tt.add(scores, tt.reshape(bias, (1, T, T)))
            weights = tt.masked_softmax(scores, mask)
        else:
            weights = tt.masked_softmax(scores, mask, tau=inv_sqrt_d)
        out = tt.matmul(weights, vl)
        out = tt.transpose(tt.reshape(out, (H, W, T, C)), (2, 0, 1, 3))
        if return_weights:
            return out, weights
        return out

    def aggregate(self, f_down: Tensor) -> Tensor:
        kind = self.config.aggregation
        if kind == "attn1d":
            return self.temporal_window_attention(f_down)
        if kind == "conv1d":
            return tt.dwconv1d_time(f_down, self.params["agg_w"], self.params["agg_b"])
        if kind == "conv3d":
            return tt.conv3d(f_down, self.params["agg_w"], self.params["agg_b"],
                             pad_t=self.config.k, pad_s=1)
        raise ConfigError(f"unknown aggregation {kind!r}")

    def forward(self, f_in: Tensor) -> Tensor:
        """f_out = up(aggregate(down(f_in))) + f_in."""
        return tt.add(self.up_project(self.aggregate(self.down_project(f_in))), f_in)

    __call__ = forward


_BAND_CACHE: dict[tuple[int, int, str], np.ndarray] = {}


def _band_mask(t: int, k: int, dtype) -> np.ndarray:
    key = (t, k, np.dtype(dtype).name)
    m = _BAND_CACHE.get(key)
    if m is None:
        ii, jj = np.indices((t, t))
        m = np.where(np.abs(ii - jj) <= k, 0.0, tt.NEG_INF_LOGIT).astype(dtype)
        _BAND_CACHE[key] = m
    return m


class AdapterSet:
    """Independent adapters keyed by slot index (slot i follows block i)."""

    def __init__(self, config: AdapterConfig, depth: int, rng: np.random.Generator, dtype=np.float32):
        self.config = config
        self.slots = placement_slots(config.placement, depth)
        children = rng.spawn(len(self.slots))
        self.adapters = {s: TemporalAdapter(config, child, dtype) for s, child in zip(self.slots, children)}

    def get(self, slot: int) -> TemporalAdapter | None:
        return self.adapters.get(slot)

    def __len__(self):
        return len(self.adapters)

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        for slot in self.slots:
            for name, p in self.adapters[slot].parameters().items():
                out[f"adapter.{slot}.{name}"] = p
        return out
