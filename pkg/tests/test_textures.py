"""Tests for the procedural clean-video generators."""

import numpy as np
import pytest

from mf2f.rng import CounterRng
from mf2f.textures import (
    held_out_video,
    moving_square_video,
    procedural_texture,
    translating_video,
)


class TestProceduralTexture:
    def test_range_and_shape(self):
        tex = procedural_texture(CounterRng(1), 24, 31)
        assert tex.shape == (24, 31)
        assert tex.min() == pytest.approx(10.0)
        assert tex.max() == pytest.approx(245.0)

    def test_custom_range(self):
        tex = procedural_texture(CounterRng(2), 16, 16, low=50.0, high=90.0)
        assert tex.min() == pytest.approx(50.0) and tex.max() == pytest.approx(90.0)

    def test_deterministic(self):
        assert np.array_equal(procedural_texture(CounterRng(3), 16, 16), procedural_texture(CounterRng(3), 16, 16))

    def test_has_texture_not_flat(self):
        tex = procedural_texture(CounterRng(4), 32, 32)
        assert tex.std() > 10.0


class TestTranslatingVideo:
    def test_shape(self):
        video = translating_video(5, 7, 20, 24, velocity=(1.0, 0.5), channels=3)
        assert video.shape == (7, 3, 20, 24)

    def test_integer_velocity_is_exact_shift(self):
        video = translating_video(6, 4, 32, 32, velocity=(2.0, 1.0))
        # frame t+1 equals frame t with content shifted by (-2, -1):
        # pixel (y, x) at t+1 shows canvas position (y + 1, x + 2) of frame t
        a = video[0, 0, 1:, 2:]
        b = video[1, 0, :-1, :-2]
        assert np.abs(a - b).max() < 1e-9

    def test_subpixel_velocity_changes_frames(self):
        video = translating_video(7, 3, 16, 16, velocity=(0.4, 0.2))
        assert not np.array_equal(video[0], video[1])
        assert np.abs(video[1] - video[0]).mean() < np.abs(video[0]).mean()

    def test_default_velocity_drawn_from_seed(self):
        a = translating_video(8, 3, 12, 12)
        b = translating_video(8, 3, 12, 12)
        assert np.array_equal(a, b)

    def test_channels_independent_textures(self):
        video = translating_video(9, 2, 16, 16, velocity=(1.0, 0.0), channels=2)
        assert not np.array_equal(video[0, 0], video[0, 1])


class TestMovingSquareVideo:
    def test_positions_move_at_velocity(self):
        _, positions = moving_square_video(1, 5, 64, 64, square=16, velocity=(2, 0))
        for (y0, x0), (y1, x1) in zip(positions, positions[1:]):
            assert (x1 - x0, y1 - y0) == (2, 0)

    def test_square_painted_at_positions(self):
        video, positions = moving_square_video(2, 4, 64, 64, square=16, velocity=(2, 0))
        ys, xs = positions[0]
        inside = video[0, 0, ys : ys + 16, xs : xs + 16]
        assert inside.min() >= 120.0  # bright patch over a darker background
        background = video[0, 0].copy()
        background[ys : ys + 16, xs : xs + 16] = np.nan
        assert np.nanmin(background) < 120.0

    def test_background_static(self):
        video, positions = moving_square_video(3, 3, 64, 64, square=16, velocity=(2, 0))
        mask = np.ones((64, 64), dtype=bool)
        for ys, xs in positions:
            mask[ys : ys + 16, xs : xs + 16] = False
        assert np.array_equal(video[0, 0][mask], video[2, 0][mask])

    def test_square_leaving_frame_rejected(self):
        with pytest.raises(ValueError):
            moving_square_video(4, 40, 32, 32, square=16, velocity=(2, 0))


class TestHeldOutVideo:
    def test_distinct_from_training_seed(self):
        train = translating_video(41, 4, 16, 16)
        held = held_out_video(41, frames=4, h=16, w=16)
        assert not np.array_equal(train, held)

    def test_shape_defaults(self):
        assert held_out_video(1, frames=3, h=20, w=24).shape == (3, 1, 20, 24)
