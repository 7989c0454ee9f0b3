"""Tiny per-frame ViT-style feature extractor.

Non-overlapping patch embedding plus pre-norm transformer blocks with
spatial self-attention. Each frame is processed independently; the only
cross-frame pathway is a temporal adapter applied between blocks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as tt
from .adapter import AdapterSet, ConfigError
from .tensor import Tensor


@dataclass(frozen=True)
class BackboneConfig:
    height: int = 64
    width: int = 64
    patch: int = 8
    dim: int = 64
    depth: int = 4
    heads: int = 4
    mlp_ratio: float = 4.0

    def __post_init__(self):
        if self.height % self.patch or self.width % self.patch:
            raise ConfigError(
                f"frame ({self.height}x{self.width}) must be divisible by patch {self.patch}"
            )
        if self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} must be divisible by heads {self.heads}")
        if self.depth < 1:
            raise ConfigError(f"depth must be >= 1, got {self.depth}")

    @property
    def hp(self) -> int:
        return self.height // self.patch

    @property
    def wp(self) -> int:
        return self.width // self.patch

    @property
    def tokens(self) -> int:
        return self.hp * self.wp


class Backbone:
    def __init__(self, config: BackboneConfig, rng: np.random.Generator, dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype)
        c = config.dim
        hidden = int(round(c * config.mlp_ratio))
        std = 0.02
        p = {
            "patch.w": tt.param(rng.standard_normal((config.patch * config.patch * 3, c)) * std, dtype),
            "patch.b": tt.param(np.zeros(c), dtype),
            "pos": tt.param(rng.standard_normal((config.tokens, c)) * std, dtype),
        }
        for i in range(config.depth):
            p[f"block{i}.ln1.g"] = tt.param(np.ones(c), dtype)
            p[f"block{i}.ln1.b"] = tt.param(np.zeros(c), dtype)
            p[f"block{i}.attn.wqkv"] = tt.param(rng.standard_normal((c, 3 * c)) * std, dtype)
            p[f"block{i}.attn.bqkv"] = tt.param(np.zeros(3 * c), dtype)
            p[f"block{i}.attn.wo"] = tt.param(rng.standard_normal((c, c)) * std, dtype)
            p[f"block{i}.attn.bo"] = tt.param(np.zeros(c), dtype)
            p[f"block{i}.ln2.g"] = tt.param(np.ones(c), dtype)
            p[f"block{i}.ln2.b"] = tt.param(np.zeros(c), dtype)
            p[f"block{i}.mlp.w1"] = tt.param(rng.standard_normal((c, hidden)) * std, dtype)
            p[f"block{i}.mlp.b1"] = tt.param(np.zeros(hidden), dtype)
            p[f"block{i}.mlp.w2"] = tt.param(rng.standard_normal((hidden, c)) * std, dtype)
            p[f"block{i}.mlp.b2"] = tt.param(np.zeros(c), dtype)
        self.params = p

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def freeze(self):
        """Stop all gradient flow into backbone parameters (adapters only train)."""
        for p in self.params.values():
            p.requires_grad = False
            p.grad = None

    @property
    def frozen(self) -> bool:
        return not any(p.requires_grad for p in self.params.values())

    def patch_embed(self, frames: np.ndarray) -> Tensor:
        """(T, H, W, 3) float frames -> (T, tokens, dim) with positional embedding."""
        cfg = self.config
        frames = np.asarray(frames)
        if frames.ndim != 4 or frames.shape[1:] != (cfg.height, cfg.width, 3):
            raise tt.ShapeError(
                f"expected frames (T,{cfg.height},{cfg.width},3), got {frames.shape}"
            )
        t = frames.shape[0]
        p = cfg.patch
        patches = frames.reshape(t, cfg.hp, p, cfg.wp, p, 3)
        patches = patches.transpose(0, 1, 3, 2, 4, 5).reshape(t, cfg.tokens, p * p * 3)
        tokens = tt.linear(Tensor(patches.astype(self.dtype)), self.params["patch.w"], self.params["patch.b"])
        return tt.add(tokens, self.params["pos"])

    def block_forward(self, tokens: Tensor, idx: int) -> Tensor:
        """Pre-norm block: spatial self-attention within each frame, then MLP."""
        cfg = self.config
        if tokens.data.shape[-2] != cfg.tokens:
            raise tt.ShapeError(
                f"expected {cfg.tokens} tokens per frame, got {tokens.data.shape[-2]}"
            )
        p = self.params
        t, n, c = tokens.data.shape
        h = cfg.heads
        hd = c // h
        x = tt.layernorm(tokens, p[f"block{idx}.ln1.g"], p[f"block{idx}.ln1.b"])
        qkv = tt.linear(x, p[f"block{idx}.attn.wqkv"], p[f"block{idx}.attn.bqkv"])
        qkv = tt.transpose(tt.reshape(qkv, (t, n, 3, h, hd)), (2, 0, 3, 1, 4))
        q, k, v = qkv[0], qkv[1], qkv[2]
        scores = tt.matmul(q, tt.transpose(k, (0, 1, 3, 2)))
        attn = tt.softmax(scores, tau=1.0 / math.sqrt(hd))  # folds the 1/sqrt(d) scale
        ctx = tt.reshape(tt.transpose(tt.matmul(attn, v), (0, 2, 1, 3)), (t, n, c))
        tokens = tt.add(tokens, tt.linear(ctx, p[f"block{idx}.attn.wo"], p[f"block{idx}.attn.bo"]))
        x = tt.layernorm(tokens, p[f"block{idx}.ln2.g"], p[f"block{idx}.ln2.b"])
        x = tt.linear(tt.gelu(tt.linear(x, p[f"block{idx}.mlp.w1"], p[f"block{idx}.mlp.b1"])),
                      p[f"block{idx}.mlp.w2"], p[f"block{idx}.mlp.b2"])
        return tt.add(tokens, x)

    def _check_adapter_slots(self, adapters: AdapterSet | None):
        cfg = self.config
        if adapters is not None and adapters.slots and max(adapters.slots) > cfg.depth - 2:
            raise ConfigError(
                f"adapter slot {max(adapters.slots)} out of range for depth {cfg.depth} "
                f"(valid: 0..{cfg.depth - 2})"
            )

    def _apply_adapter(self, tokens: Tensor, t: int, adapter) -> Tensor:
        cfg = self.config
        grid = tt.reshape(tokens, (t, cfg.hp, cfg.wp, cfg.dim))
        grid = adapter.forward(grid)
        return tt.reshape(grid, (t, cfg.tokens, cfg.dim))

    def _run_blocks(self, tokens: Tensor, start_block: int, adapters: AdapterSet | None) -> Tensor:
        cfg = self.config
        t = tokens.data.shape[0]
        for i in range(start_block, cfg.depth):
            tokens = self.block_forward(tokens, i)
            adapter = adapters.get(i) if adapters is not None else None
            if adapter is not None:
                tokens = self._apply_adapter(tokens, t, adapter)
        return tt.reshape(tokens, (t, cfg.hp, cfg.wp, cfg.dim))

    def extract_features(self, frames: np.ndarray, adapters: AdapterSet | None = None) -> Tensor:
        """Per-frame feature grids (T, Hp, Wp, dim).

        Runs patch_embed then every block on all frames; after block i, an
        adapter placed at slot i mixes information across frames. Without
        adapters the stack is purely per-frame.
        """
        self._check_adapter_slots(adapters)
        return self._run_blocks(self.patch_embed(frames), 0, adapters)

    def prefix_tokens(self, frames: np.ndarray, upto_block: int) -> Tensor:
        """patch_embed plus blocks 0..upto_block, adapter-free.

        Valid as a cached prefix only when no adapter sits at a slot below
        upto_block; the result is then identical to the full path up to (and
        including) that block."""
        tokens = self.patch_embed(frames)
        for i in range(upto_block + 1):
            tokens = self.block_forward(tokens, i)
        return tokens

    def features_from_prefix(self, tokens: Tensor, after_block: int,
                             adapters: AdapterSet | None) -> Tensor:
        """Resume after prefix_tokens(frames, after_block): apply the adapter
        at slot after_block (if any), then the remaining blocks."""
        self._check_adapter_slots(adapters)
        t = tokens.data.shape[0]
        adapter = adapters.get(after_block) if adapters is not None else None
        if adapter is not None:
            tokens = self._apply_adapter(tokens, t, adapter)
        return self._run_blocks(tokens, after_block + 1, adapters)
