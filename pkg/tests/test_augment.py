from dataclasses import replace

import numpy as np
import pytest

from ssltr.augment import (
    AugmentationSet,
    CropWidthError,
    ImageTooNarrow,
    apply_all,
    apply_visual,
    make_view_pair,
)
from ssltr.dataset import BACKGROUND, LineImage
from ssltr.types import AugKind

from tests.helpers import random_line


def test_zero_strength_is_identity():
    # given: a random line and zero-strength versions of every set
    image = random_line(96, seed=1)
    for aug in (AugmentationSet.visual(), AugmentationSet.all()):
        zero = aug.zero_strength()

        # when: the set is applied
        out = zero.apply(image, seed=11)

        # then: nothing changed
        np.testing.assert_array_equal(out.pixels, image.pixels)


def test_augmentation_is_pure_in_seed():
    image = random_line(120, seed=2)
    a = apply_all(image, seed=5)
    b = apply_all(image, seed=5)
    np.testing.assert_array_equal(a.pixels, b.pixels)


def test_visual_keeps_size_and_range():
    image = random_line(72, seed=3)
    for seed in range(20):
        out = apply_visual(image, seed)
        assert out.pixels.shape == image.pixels.shape
        assert 0.0 <= float(out.pixels.min()) <= float(out.pixels.max()) <= 1.0


def test_all_keeps_line_height():
    image = random_line(200, seed=4)
    for seed in range(20):
        out = apply_all(image, seed=seed)
        assert out.height == 40
        assert out.width >= 8


def test_gamma_on_a_constant_image():
    image = LineImage("grey", np.full((40, 16), 0.5, np.float32))
    aug = replace(AugmentationSet.none(), kind=AugKind.VISUAL, gamma=(2.0, 2.0))
    np.testing.assert_allclose(apply_visual(image, 0, aug).pixels, 0.25)


def test_all_without_geometry_or_masking_is_visual():
    # given: the full set with every geometric and masking transform switched off
    image = random_line(120, seed=9)
    aug = replace(AugmentationSet.all(), skew=0.0, scale=(1.0, 1.0), mask_rate=0.0)

    for seed in range(10):
        # then: it draws exactly what the visual transforms draw for the seed
        np.testing.assert_array_equal(
            apply_all(image, seed=seed, aug=aug).pixels, apply_visual(image, seed, aug).pixels
        )


def test_full_masking_leaves_only_background():
    image = random_line(100, seed=10)
    aug = replace(
        AugmentationSet.none(),
        kind=AugKind.ALL,
        mask_rate=1.0,
        mask_patches=None,
        mask_full_height=True,
    )
    out = apply_all(image, seed=3, aug=aug)
    assert out.pixels.shape == image.pixels.shape
    assert float(out.pixels.mean()) == BACKGROUND


def test_view_pair_shifts_go_both_ways_in_whole_frames():
    image = random_line(400, seed=11)
    shifts = []
    for seed in range(1000):
        pair = make_view_pair(image, 128, seed, AugmentationSet.none())
        assert pair.pixel_shift == 8 * (pair.position_b - pair.position_a)
        assert pair.pixel_shift % 8 == 0
        shifts.append(pair.shift_frames)
    assert min(shifts) < 0 < max(shifts)


def test_view_pair_frames_correspond():
    # given: a line and no augmentation, so that pixels can be compared directly
    image = random_line(400, seed=5)

    for seed in range(30):
        # when: two shifted views are cropped
        pair = make_view_pair(image, 128, seed, AugmentationSet.none())
        idx_a, idx_b = pair.correspondence()

        # then: views have the crop width and overlap in at least one frame
        assert pair.view_a.width == pair.view_b.width == 128
        assert len(idx_a) >= 1
        assert abs(pair.shift_frames) <= 15

        # and: corresponding frames hold identical pixels
        for i, j in zip(idx_a, idx_b):
            np.testing.assert_array_equal(
                pair.view_a.pixels[:, 8 * i : 8 * i + 8],
                pair.view_b.pixels[:, 8 * j : 8 * j + 8],
            )


def test_view_pair_without_shift():
    image = random_line(300, seed=6)
    pair = make_view_pair(image, 64, 3, AugmentationSet.none(), shift=False)
    assert pair.shift_frames == 0
    assert pair.overlap == (0, 8)
    np.testing.assert_array_equal(pair.view_a.pixels, pair.view_b.pixels)


def test_view_pair_pads_short_lines():
    # given: a line narrower than the crop
    image = random_line(40, seed=7)

    # when: views are cropped
    pair = make_view_pair(image, 128, 0, AugmentationSet.none())

    # then: both views have the crop width and no shift was possible
    assert pair.view_a.width == 128
    assert pair.shift_frames == 0


def test_view_pair_errors():
    image = random_line(100, seed=8)
    with pytest.raises(CropWidthError):
        make_view_pair(image, 60, 0)
    with pytest.raises(ImageTooNarrow):
        make_view_pair(random_line(15), 64, 0)
    with pytest.raises(ValueError):
        make_view_pair(image, 64, 0, AugmentationSet.all())


def test_for_kind():
    assert AugmentationSet.for_kind("none").kind is AugKind.NONE
    assert AugmentationSet.for_kind(AugKind.ALL).kind is AugKind.ALL
    image = random_line(32)
    assert AugmentationSet.none().apply(image, 0) is image
