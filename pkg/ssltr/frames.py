"""Conversions between pixel columns and backbone frames.

Every model in the package emits one frame per ``SUBSAMPLE_FACTOR`` horizontal pixels
of a line normalized to ``LINE_HEIGHT`` pixels.
"""

from typing import Tuple

from ssltr import LINE_HEIGHT, SUBSAMPLE_FACTOR


def frame_count(width: int) -> int:
    """
    >>> frame_count(80), frame_count(81), frame_count(1)
    (10, 11, 1)
    """
    return -(-int(width) // SUBSAMPLE_FACTOR)


def padded_width(width: int) -> int:
    """
    >>> padded_width(81)
    88
    """
    return frame_count(width) * SUBSAMPLE_FACTOR


def frame_to_pixels(frame: int) -> Tuple[int, int]:
    """
    >>> frame_to_pixels(3)
    (24, 32)
    """
    return frame * SUBSAMPLE_FACTOR, (frame + 1) * SUBSAMPLE_FACTOR


def frames_to_region(
    start: int, stop: int, margin: int, width: int
) -> Tuple[int, int]:
    """Pixel span of frames ``[start, stop)`` widened by ``margin``, clipped to the line.

    >>> frames_to_region(2, 5, 16, 100)
    (0, 56)
    """
    x0 = start * SUBSAMPLE_FACTOR - margin
    x1 = stop * SUBSAMPLE_FACTOR + margin
    return max(0, x0), min(int(width), x1)


__all__ = [
    "LINE_HEIGHT",
    "SUBSAMPLE_FACTOR",
    "frame_count",
    "padded_width",
    "frame_to_pixels",
    "frames_to_region",
]
