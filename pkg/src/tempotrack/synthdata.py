"""Deterministic synthetic clips: textured disk sprites translating and
rotating over a textured background, with exact ground-truth trajectories
and per-frame occlusion flags.

The scene design is deliberately hostile to single-frame matching: all
textures are high-frequency value noise from the same family, sprites spin
(so local appearance decorrelates over time), and sprites overlap or exit
the frame (so points get occluded). Constant per-sprite velocity makes
temporal context genuinely predictive.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .formats import write_dataset


@dataclass(frozen=True)
class SceneSpec:
    """Everything that defines one clip; generation is a pure function of this."""

    seed: int
    frames: int = 24
    height: int = 64
    width: int = 64
    n_sprites: int = 3
    size_min: float = 15.0  # sprite diameter, px
    size_max: float = 22.0
    speed_min: float = 0.2  # px/frame
    speed_max: float = 1.0
    spin_max: float = 0.05  # rad/frame
    morph_period: float = 8.0  # frames per texture keyframe segment; <= 0 disables
    morph_strength: float = 0.85  # fraction of the texture that drifts over time
    pixel_noise: float = 0.04  # per-frame additive sensor noise, [0,1] units
    twin_pairs: int = 1  # leading sprite pairs share their appearance exactly
    bg_contrast: float = 0.15  # background texture amplitude; low keeps scene
                               # context uninformative about sprite identity
    tracks_per_clip: int = 64
    background_seed: int = -1  # -1: derive from seed

    def __post_init__(self):
        if self.frames < 2:
            raise ValueError(f"need at least 2 frames, got {self.frames}")
        if self.size_max >= min(self.height, self.width):
            raise ValueError("sprite size must be smaller than the frame")
        if self.size_min < 6.0:
            raise ValueError("sprites smaller than 6 px cannot hold interior tracks")
        if self.speed_max * self.frames > 2 * max(self.height, self.width):
            raise ValueError("speed too high: sprites would cross the frame twice")
        if 2 * self.twin_pairs > self.n_sprites:
            raise ValueError(
                f"{self.twin_pairs} twin pairs need {2 * self.twin_pairs} sprites, "
                f"have {self.n_sprites}"
            )
        if self.background_seed < 0:
            object.__setattr__(self, "background_seed", (self.seed * 2654435761 + 97) % (2**31))

    _META_FIELDS = (
        "seed", "frames", "height", "width", "n_sprites", "size_min", "size_max",
        "speed_min", "speed_max", "spin_max", "morph_period", "morph_strength",
        "pixel_noise", "twin_pairs", "bg_contrast", "tracks_per_clip", "background_seed",
    )

    def to_meta(self) -> dict:
        return {name: repr(getattr(self, name)) for name in self._META_FIELDS}

    @classmethod
    def from_meta(cls, meta: dict) -> "SceneSpec":
        kwargs = {}
        for name in cls._META_FIELDS:
            raw = meta[name]
            kwargs[name] = float(raw) if "." in raw or "e" in raw else int(raw)
        return cls(**kwargs)


@dataclass
class GroundTruthTrack:
    """One physical point: positions for every frame (defined through
    occlusion) plus per-frame visibility."""

    positions: np.ndarray  # (T, 2) float, pixel coords
    visible: np.ndarray  # (T,) bool
    sprite_id: int
    local_xy: tuple[float, float]


@dataclass
class Clip:
    frames: np.ndarray  # (T, H, W, 3) uint8
    tracks: list[GroundTruthTrack]
    spec: SceneSpec

    def frames_float(self) -> np.ndarray:
        return self.frames.astype(np.float32) / 255.0


class _ValueNoise:
    """Bilinear value noise on a seeded lattice; smooth under sub-pixel motion."""

    def __init__(self, rng: np.random.Generator, extent: float, spacing: float):
        self.spacing = spacing
        n = int(np.ceil(extent / spacing)) + 3
        self.lattice = rng.random((n, n, 3))

    def sample(self, u, v):
        """u, v: arrays of coords in [0, extent); returns (..., 3) in [0, 1]."""
        gu = np.clip(u / self.spacing + 1.0, 0, self.lattice.shape[1] - 1.001)
        gv = np.clip(v / self.spacing + 1.0, 0, self.lattice.shape[0] - 1.001)
        u0 = gu.astype(np.int64)
        v0 = gv.astype(np.int64)
        fu = (gu - u0)[..., None]
        fv = (gv - v0)[..., None]
        lat = self.lattice
        return (
            lat[v0, u0] * (1 - fu) * (1 - fv)
            + lat[v0, u0 + 1] * fu * (1 - fv)
            + lat[v0 + 1, u0] * (1 - fu) * fv
            + lat[v0 + 1, u0 + 1] * fu * fv
        )


class _Sprite:
    def __init__(self, rng: np.random.Generator, spec: SceneSpec):
        self.radius = rng.uniform(spec.size_min, spec.size_max) / 2.0
        margin = self.radius + 1.0
        self.p0 = np.array([
            rng.uniform(margin, spec.width - margin),
            rng.uniform(margin, spec.height - margin),
        ])
        speed = rng.uniform(spec.speed_min, spec.speed_max)
        heading = rng.uniform(0, 2 * np.pi)
        self.vel = speed * np.array([np.cos(heading), np.sin(heading)])
        self.angle0 = rng.uniform(0, 2 * np.pi)
        self.spin = rng.uniform(-spec.spin_max, spec.spin_max)
        # two octaves of local-frame noise plus a per-sprite color bias
        extent = 2 * (self.radius + 3.0)
        self.noise_lo = _ValueNoise(rng, extent, spacing=3.0)
        self.noise_hi = _ValueNoise(rng, extent, spacing=1.5)
        self.color = rng.uniform(0.15, 0.85, size=3)
        # slow texture drift: piecewise-linear walk over keyframe lattices, so
        # appearance decorrelates beyond ~morph_period frames without repeating
        self.morph_period = spec.morph_period
        self.morph_strength = spec.morph_strength if spec.morph_period > 0 else 0.0
        self.morph_keys = []
        if self.morph_strength > 0:
            n_keys = int(np.ceil((spec.frames - 1) / spec.morph_period)) + 1
            self.morph_keys = [_ValueNoise(rng, extent, spacing=2.0) for _ in range(n_keys)]

    def center(self, t: float) -> np.ndarray:
        return self.p0 + self.vel * t

    def angle(self, t: float) -> float:
        return self.angle0 + self.spin * t

    def local_coords(self, t, wx, wy):
        """World -> sprite-local coordinates (inverse rigid transform)."""
        c = self.center(t)
        a = self.angle(t)
        dx, dy = wx - c[0], wy - c[1]
        cos_a, sin_a = np.cos(-a), np.sin(-a)
        return cos_a * dx - sin_a * dy, sin_a * dx + cos_a * dy

    def world_coords(self, t, u, v):
        """Sprite-local point -> world coords; t may be a scalar or an array."""
        t = np.asarray(t, dtype=np.float64)
        a = self.angle0 + self.spin * t
        cos_a, sin_a = np.cos(a), np.sin(a)
        cx = self.p0[0] + self.vel[0] * t
        cy = self.p0[1] + self.vel[1] * t
        return cx + cos_a * u - sin_a * v, cy + sin_a * u + cos_a * v

    def contains(self, t, wx, wy):
        u, v = self.local_coords(t, wx, wy)
        return u * u + v * v <= self.radius * self.radius

    def texture(self, t, u, v):
        off = self.radius + 3.0
        tex = 0.5 * self.noise_lo.sample(u + off, v + off) + 0.5 * self.noise_hi.sample(u + off, v + off)
        if self.morph_strength > 0:
            s = float(t) / self.morph_period
            i = min(int(s), len(self.morph_keys) - 2)
            alpha = s - i
            drift = ((1 - alpha) * self.morph_keys[i].sample(u + off, v + off)
                     + alpha * self.morph_keys[i + 1].sample(u + off, v + off))
            tex = (1 - self.morph_strength) * tex + self.morph_strength * drift
        return 0.35 * self.color + 0.65 * tex


def _build_scene(spec: SceneSpec):
    rng = np.random.default_rng(spec.seed)
    sprites = [_Sprite(rng, spec) for _ in range(spec.n_sprites)]
    # twins: identical appearance streams (texture, color, rotation phase),
    # independent translation. Per-frame matching cannot tell twins apart;
    # motion context can.
    for pair in range(spec.twin_pairs):
        a, b = sprites[2 * pair], sprites[2 * pair + 1]
        for attr in ("radius", "noise_lo", "noise_hi", "color", "angle0", "spin",
                     "morph_period", "morph_strength", "morph_keys"):
            setattr(b, attr, getattr(a, attr))
    bg_rng = np.random.default_rng(spec.background_seed)
    bg_lo = _ValueNoise(bg_rng, max(spec.width, spec.height), spacing=3.0)
    bg_hi = _ValueNoise(bg_rng, max(spec.width, spec.height), spacing=1.5)
    ys, xs = np.indices((spec.height, spec.width)).astype(np.float64)
    background = 0.5 * bg_lo.sample(xs + 0.5, ys + 0.5) + 0.5 * bg_hi.sample(xs + 0.5, ys + 0.5)
    background = 0.5 + spec.bg_contrast * (background - 0.5)
    return rng, sprites, background


def _render_frame(spec: SceneSpec, sprites, background, t: int) -> np.ndarray:
    img = background.copy()
    for sprite in sprites:  # back-to-front, list order is the z order
        c = sprite.center(t)
        r = sprite.radius
        x0 = max(int(np.floor(c[0] - r - 1)), 0)
        x1 = min(int(np.ceil(c[0] + r + 1)) + 1, spec.width)
        y0 = max(int(np.floor(c[1] - r - 1)), 0)
        y1 = min(int(np.ceil(c[1] + r + 1)) + 1, spec.height)
        if x0 >= x1 or y0 >= y1:
            continue  # fully out of frame
        ys, xs = np.mgrid[y0:y1, x0:x1]
        px = xs + 0.5  # pixel (ix, iy) samples the scene at its center
        py = ys + 0.5
        u, v = sprite.local_coords(t, px, py)
        mask = u * u + v * v <= r * r
        if not mask.any():
            continue
        img[y0:y1, x0:x1][mask] = sprite.texture(t, u[mask], v[mask])
    return img


def generate_clip(spec: SceneSpec) -> Clip:
    """Render one clip and its exact ground-truth tracks. Pure in `spec`."""
    rng, sprites, background = _build_scene(spec)
    noise_rng = np.random.default_rng([spec.seed, 0x5E50])
    frames = np.zeros((spec.frames, spec.height, spec.width, 3), dtype=np.uint8)
    for t in range(spec.frames):
        img = _render_frame(spec, sprites, background, t)
        if spec.pixel_noise > 0:
            img = img + spec.pixel_noise * noise_rng.standard_normal(img.shape)
        frames[t] = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)

    tracks = []
    ts = np.arange(spec.frames)
    for j in range(spec.tracks_per_clip):
        sid = j % spec.n_sprites
        sprite = sprites[sid]
        inner = sprite.radius - 2.0  # interior margin avoids edge ambiguity
        rho = inner * np.sqrt(rng.random())
        phi = rng.uniform(0, 2 * np.pi)
        u, v = rho * np.cos(phi), rho * np.sin(phi)
        wx, wy = sprite.world_coords(ts, u, v)
        positions = np.stack([wx, wy], axis=1)
        in_frame = (
            (wx >= 0) & (wx < spec.width) & (wy >= 0) & (wy < spec.height)
        )
        covered = np.zeros(spec.frames, dtype=bool)
        for other in sprites[sid + 1 :]:  # only sprites above can occlude
            covered |= np.array([other.contains(t, wx[t], wy[t]) for t in ts])
        tracks.append(
            GroundTruthTrack(
                positions=positions.astype(np.float32),
                visible=in_frame & ~covered,
                sprite_id=sid,
                local_xy=(float(u), float(v)),
            )
        )
    return Clip(frames=frames, tracks=tracks, spec=spec)


def generate_dataset(n_clips: int, base_seed: int, template: SceneSpec, out_path):
    """Write clips with seeds base_seed..base_seed+n-1 to a dataset container.

    The train/held-out split is by seed parity (even = train); see
    split_by_parity.
    """
    if n_clips < 1:
        raise ValueError(f"n_clips must be >= 1, got {n_clips}")
    clips = [generate_clip(replace(template, seed=base_seed + i, background_seed=-1))
             for i in range(n_clips)]
    write_dataset(out_path, clips)
    return out_path


def split_by_parity(clips) -> tuple[list, list]:
    """(train, held_out): even clip seeds train, odd seeds are held out."""
    train = [c for c in clips if c.spec.seed % 2 == 0]
    held = [c for c in clips if c.spec.seed % 2 == 1]
    return train, held
