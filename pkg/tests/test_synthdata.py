"""Synthetic scenes: determinism, rigid motion, occlusion oracle."""

import numpy as np
import pytest

from tempotrack.synthdata import (
    Clip,
    SceneSpec,
    _build_scene,
    generate_clip,
    generate_dataset,
    split_by_parity,
)
from tempotrack.formats import read_dataset


def small_spec(seed=0, **kw):
    # pixel noise and twins off by default: these tests check exact geometry
    base = dict(seed=seed, frames=10, height=48, width=48, n_sprites=2,
                size_min=12.0, size_max=16.0, tracks_per_clip=16,
                pixel_noise=0.0, twin_pairs=0)
    base.update(kw)
    return SceneSpec(**base)


def rigid_cover_oracle(spec, sprite_params, sprite_id, x, y, t):
    """Independent reimplementation of the per-point z-test: does any sprite
    above `sprite_id` cover world point (x, y) at frame t?"""
    import math

    for sid in range(sprite_id + 1, len(sprite_params)):
        p0, vel, angle0, spin, radius = sprite_params[sid]
        cx = p0[0] + vel[0] * t
        cy = p0[1] + vel[1] * t
        a = angle0 + spin * t
        dx, dy = x - cx, y - cy
        lu = math.cos(-a) * dx - math.sin(-a) * dy
        lv = math.sin(-a) * dx + math.cos(-a) * dy
        if lu * lu + lv * lv <= radius * radius:
            return True
    return False


class TestSceneSpec:
    def test_rejects_single_frame(self):
        with pytest.raises(ValueError, match="frames"):
            SceneSpec(seed=0, frames=1)

    def test_rejects_giant_sprites(self):
        with pytest.raises(ValueError, match="smaller"):
            SceneSpec(seed=0, height=32, width=32, size_max=40.0)

    def test_meta_round_trip(self):
        spec = small_spec(seed=42)
        again = SceneSpec.from_meta(spec.to_meta())
        assert again == spec


class TestGenerateClip:
    def test_deterministic(self):
        a = generate_clip(small_spec(3))
        b = generate_clip(small_spec(3))
        assert np.array_equal(a.frames, b.frames)
        for ta, tb in zip(a.tracks, b.tracks):
            assert np.array_equal(ta.positions, tb.positions)
            assert np.array_equal(ta.visible, tb.visible)

    def test_seed_changes_content(self):
        a = generate_clip(small_spec(3))
        b = generate_clip(small_spec(4))
        assert not np.array_equal(a.frames, b.frames)

    def test_static_scene_constant_tracks(self):
        spec = small_spec(5, speed_min=0.0, speed_max=1e-9, spin_max=0.0,
                          n_sprites=1, morph_period=0.0)
        clip = generate_clip(spec)
        for tr in clip.tracks:
            assert np.allclose(tr.positions, tr.positions[0], atol=1e-6)
            assert tr.visible.all()
        assert np.array_equal(clip.frames[0], clip.frames[-1])

    def test_texture_morph_changes_pixels_not_geometry(self):
        still = small_spec(5, speed_min=0.0, speed_max=1e-9, spin_max=0.0, n_sprites=1)
        clip = generate_clip(still)
        assert not np.array_equal(clip.frames[0], clip.frames[-1])
        for tr in clip.tracks:
            assert np.allclose(tr.positions, tr.positions[0], atol=1e-6)

    def test_twins_share_appearance_not_motion(self):
        spec = small_spec(11, n_sprites=3, twin_pairs=1, speed_min=0.3)
        _, sprites, _ = _build_scene(spec)
        a, b, c = sprites
        assert a.radius == b.radius
        assert np.array_equal(a.noise_hi.lattice, b.noise_hi.lattice)
        assert np.array_equal(a.color, b.color)
        assert a.angle0 == b.angle0 and a.spin == b.spin
        assert not np.array_equal(a.vel, b.vel)
        assert not np.array_equal(a.p0, b.p0)
        assert not np.array_equal(a.noise_hi.lattice, c.noise_hi.lattice)

    def test_too_many_twin_pairs_rejected(self):
        with pytest.raises(ValueError, match="twin"):
            small_spec(0, n_sprites=2, twin_pairs=2)

    def test_pixel_noise_deterministic_and_bounded(self):
        clean = generate_clip(small_spec(6))
        noisy1 = generate_clip(small_spec(6, pixel_noise=0.04))
        noisy2 = generate_clip(small_spec(6, pixel_noise=0.04))
        assert np.array_equal(noisy1.frames, noisy2.frames)
        diff = noisy1.frames.astype(int) - clean.frames.astype(int)
        assert diff.std() > 2.0  # noise present
        assert np.abs(diff).max() < 0.04 * 6 * 255  # and bounded (~6 sigma)
        for a, b in zip(noisy1.tracks, clean.tracks):
            np.testing.assert_array_equal(a.positions, b.positions)

    def test_rigid_translation_exact(self):
        spec = small_spec(6, spin_max=0.0, n_sprites=1)
        clip = generate_clip(spec)
        for tr in clip.tracks:
            steps = np.diff(tr.positions, axis=0)
            # constant velocity: every frame-to-frame displacement identical
            assert np.allclose(steps, steps[0], atol=1e-5)

    def test_positions_defined_when_occluded(self):
        clip = generate_clip(small_spec(7))
        for tr in clip.tracks:
            assert np.isfinite(tr.positions).all()

    def test_occlusion_matches_independent_z_test(self):
        spec = small_spec(8)
        clip = generate_clip(spec)
        _, sprites, _ = _build_scene(spec)
        params = [(s.p0, s.vel, s.angle0, s.spin, s.radius) for s in sprites]
        checked = 0
        for tr in clip.tracks:
            for t in range(spec.frames):
                x, y = tr.positions[t]
                in_frame = 0 <= x < spec.width and 0 <= y < spec.height
                covered = rigid_cover_oracle(spec, params, tr.sprite_id, x, y, t)
                assert tr.visible[t] == (in_frame and not covered)
                checked += 1
        assert checked == len(clip.tracks) * spec.frames

    def test_rendered_pixel_shows_own_sprite_texture(self):
        # color-class check: where the point and its pixel center are both
        # visible, the rendered pixel equals the sprite texture there
        spec = small_spec(9)
        clip = generate_clip(spec)
        _, sprites, _ = _build_scene(spec)
        params = [(s.p0, s.vel, s.angle0, s.spin, s.radius) for s in sprites]
        matched = 0
        for tr in clip.tracks:
            sprite = sprites[tr.sprite_id]
            for t in range(spec.frames):
                if not tr.visible[t]:
                    continue
                ix, iy = int(tr.positions[t, 0]), int(tr.positions[t, 1])
                cx, cy = ix + 0.5, iy + 0.5
                if rigid_cover_oracle(spec, params, tr.sprite_id, cx, cy, t):
                    continue  # occluder edge passes between point and pixel center
                u, v = sprite.local_coords(t, cx, cy)
                if u * u + v * v > sprite.radius**2:
                    continue
                want = np.clip(np.round(sprite.texture(t, np.array([u]), np.array([v]))[0] * 255), 0, 255)
                got = clip.frames[t, iy, ix].astype(np.float64)
                np.testing.assert_allclose(got, want, atol=1.0)
                matched += 1
        assert matched > 50

    def test_track_points_on_interiors(self):
        spec = small_spec(10)
        clip = generate_clip(spec)
        _, sprites, _ = _build_scene(spec)
        for tr in clip.tracks:
            u, v = tr.local_xy
            assert np.hypot(u, v) <= sprites[tr.sprite_id].radius - 2.0 + 1e-9


class TestGenerateDataset:
    def test_round_trip_bit_exact(self, tmp_path):
        path = tmp_path / "data.chrd"
        generate_dataset(3, base_seed=20, template=small_spec(0), out_path=path)
        clips = read_dataset(path)
        assert len(clips) == 3
        assert [c.spec.seed for c in clips] == [20, 21, 22]
        direct = [generate_clip(small_spec(20 + i)) for i in range(3)]
        for got, want in zip(clips, direct):
            assert np.array_equal(got.frames, want.frames)
            for a, b in zip(got.tracks, want.tracks):
                np.testing.assert_array_equal(a.positions, b.positions.astype(np.float32))
                np.testing.assert_array_equal(a.visible, b.visible)

    def test_same_args_byte_identical(self, tmp_path):
        p1 = tmp_path / "a.chrd"
        p2 = tmp_path / "b.chrd"
        generate_dataset(2, 4, small_spec(0), p1)
        generate_dataset(2, 4, small_spec(0), p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_different_base_seed_differs(self, tmp_path):
        p1 = tmp_path / "a.chrd"
        p2 = tmp_path / "b.chrd"
        generate_dataset(2, 4, small_spec(0), p1)
        generate_dataset(2, 6, small_spec(0), p2)
        assert p1.read_bytes() != p2.read_bytes()

    def test_rejects_zero_clips(self, tmp_path):
        with pytest.raises(ValueError, match="n_clips"):
            generate_dataset(0, 0, small_spec(0), tmp_path / "x.chrd")

    def test_parity_split(self):
        clips = [generate_clip(small_spec(s, frames=4, tracks_per_clip=2)) for s in range(4)]
        train, held = split_by_parity(clips)
        assert [c.spec.seed for c in train] == [0, 2]
        assert [c.spec.seed for c in held] == [1, 3]
