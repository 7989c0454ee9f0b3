"""Model assembly and checkpoint IO: backbone + optional adapter set +
matcher settings, serialized into the checkpoint container."""

from __future__ import annotations

import numpy as np

from . import formats, tracker
from .adapter import AdapterConfig, AdapterSet
from .backbone import Backbone, BackboneConfig
from .tensor import Tensor


class TrackingModel:
    def __init__(self, backbone: Backbone, adapters: AdapterSet | None,
                 matcher: tracker.MatcherConfig, meta: dict | None = None):
        self.backbone = backbone
        self.adapters = adapters
        self.matcher = matcher
        self.meta = dict(meta or {})

    @classmethod
    def build(cls, bb_config: BackboneConfig, seed: int,
              adapter_config: AdapterConfig | None = None,
              matcher: tracker.MatcherConfig | None = None) -> "TrackingModel":
        rng = np.random.default_rng([seed, 0xB0])
        backbone = Backbone(bb_config, rng)
        adapters = None
        if adapter_config is not None:
            adapters = AdapterSet(adapter_config, bb_config.depth,
                                  np.random.default_rng([seed, 0xAD]))
        return cls(backbone, adapters, matcher or tracker.MatcherConfig())

    @property
    def patch(self) -> int:
        return self.backbone.config.patch

    def extract_features(self, frames: np.ndarray) -> Tensor:
        return self.backbone.extract_features(frames, self.adapters)

    def track(self, clip: np.ndarray, queries) -> list[tracker.TrackPrediction]:
        return tracker.track(clip, queries, self)

    def parameters(self) -> dict[str, Tensor]:
        out = {f"backbone.{k}": v for k, v in self.backbone.parameters().items()}
        if self.adapters is not None:
            out.update(self.adapters.parameters())
        return out

    def trainable_parameters(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.parameters().items() if v.requires_grad}

    # ---- checkpoint IO -----------------------------------------------------

    def config_meta(self) -> dict:
        bb = self.backbone.config
        meta = {
            "backbone.height": bb.height,
            "backbone.width": bb.width,
            "backbone.patch": bb.patch,
            "backbone.dim": bb.dim,
            "backbone.depth": bb.depth,
            "backbone.heads": bb.heads,
            "backbone.mlp_ratio": bb.mlp_ratio,
            "matcher.tau": self.matcher.tau,
            "matcher.mask_radius": self.matcher.mask_radius,
            "adapter.present": int(self.adapters is not None),
        }
        if self.adapters is not None:
            ac = self.adapters.config
            placement = ac.placement if isinstance(ac.placement, str) \
                else ",".join(str(s) for s in ac.placement)
            meta.update({
                "adapter.stride": ac.stride,
                "adapter.window": ac.window,
                "adapter.c_in": ac.c_in,
                "adapter.c_out": ac.c_out,
                "adapter.aggregation": ac.aggregation,
                "adapter.placement": placement,
                "adapter.temporal_bias": int(ac.temporal_bias),
            })
        return meta

    def save(self, path, extra_meta: dict | None = None):
        meta = self.config_meta()
        meta.update(self.meta)
        if extra_meta:
            meta.update(extra_meta)
        tensors = {name: p.data for name, p in self.parameters().items()}
        formats.write_checkpoint(path, tensors, meta)

    @classmethod
    def load(cls, path) -> "TrackingModel":
        tensors, meta = formats.read_checkpoint(path)
        bb_config = BackboneConfig(
            height=int(meta["backbone.height"]),
            width=int(meta["backbone.width"]),
            patch=int(meta["backbone.patch"]),
            dim=int(meta["backbone.dim"]),
            depth=int(meta["backbone.depth"]),
            heads=int(meta["backbone.heads"]),
            mlp_ratio=float(meta["backbone.mlp_ratio"]),
        )
        matcher = tracker.MatcherConfig(
            tau=float(meta["matcher.tau"]),
            mask_radius=float(meta["matcher.mask_radius"]),
        )
        adapter_config = None
        if int(meta.get("adapter.present", 0)):
            placement = meta["adapter.placement"]
            if placement not in ("all", "early", "later", "alternating"):
                placement = tuple(int(s) for s in placement.split(","))
            adapter_config = AdapterConfig(
                stride=int(meta["adapter.stride"]),
                window=int(meta["adapter.window"]),
                c_in=int(meta["adapter.c_in"]),
                c_out=int(meta["adapter.c_out"]),
                aggregation=meta["adapter.aggregation"],
                placement=placement,
                temporal_bias=bool(int(meta.get("adapter.temporal_bias", 0))),
            )
        model = cls.build(bb_config, seed=0, adapter_config=adapter_config, matcher=matcher)
        model.meta = meta
        params = model.parameters()
        missing = sorted(set(params) - set(tensors))
        unexpected = sorted(set(tensors) - set(params))
        if missing or unexpected:
            raise formats.FormatError(
                f"{path}: parameter names do not match model "
                f"(missing {missing[:3]}, unexpected {unexpected[:3]})"
            )
        for name, p in params.items():
            arr = tensors[name]
            if arr.shape != p.data.shape:
                raise formats.FormatError(
                    f"{path}: tensor {name!r} has shape {arr.shape}, expected {p.data.shape}"
                )
            p.data = arr.astype(p.data.dtype)
        return model
