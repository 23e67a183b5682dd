from dataclasses import dataclass

import cv2
import numpy as np

from .errors import DimensionError


@dataclass(frozen=True)
class Region:
    """Axis-aligned pixel rectangle, ``x0``/``y0`` inclusive top-left corner"""

    x0: int
    y0: int
    width: int
    height: int

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise DimensionError(f"Region must be non-empty, got {self.width}x{self.height}")
        if self.x0 < 0 or self.y0 < 0:
            raise DimensionError(f"Region corner must be non-negative, got ({self.x0}, {self.y0})")

    @property
    def size(self) -> int:
        return self.width * self.height

    @property
    def x1(self) -> int:
        """Exclusive right edge"""
        return self.x0 + self.width

    @property
    def y1(self) -> int:
        """Exclusive bottom edge"""
        return self.y0 + self.height

    def contains(self, other: "Region") -> bool:
        return (other.x0 >= self.x0 and other.y0 >= self.y0
                and other.x1 <= self.x1 and other.y1 <= self.y1)

    def shrink(self, margin: int) -> "Region":
        """Return the region with ``margin`` pixels removed from every side"""
        if margin < 0:
            raise DimensionError(f"Margin must be non-negative, got {margin}")
        return Region(self.x0 + margin, self.y0 + margin,
                      self.width - 2 * margin, self.height - 2 * margin)

    def pixels(self):
        """Iterate ``(x, y)`` in row-major order"""
        for y in range(self.y0, self.y1):
            for x in range(self.x0, self.x1):
                yield x, y


def to_planar(image: np.ndarray) -> np.ndarray:
    """
    Convert an interleaved image to channel-first float64 planes

    Args:
        image: Array of shape (height, width) or (height, width, depth)

    Returns:
        Array of shape (depth, height, width)
    """
    if image.ndim == 2:
        image = image[:, :, np.newaxis]
    if image.ndim != 3:
        raise DimensionError(f"Expected (height, width[, depth]) image, got shape {image.shape}")
    return np.ascontiguousarray(np.transpose(image, (2, 0, 1)), dtype=np.float64)


def triangle_kernel(radius: int) -> np.ndarray:
    """
    Normalized 1-D triangle kernel

    Args:
        radius: Half-width in pixels; radius 1 gives [1, 2, 1] / 4

    Returns:
        Kernel of length 2 * radius + 1 summing to 1
    """
    if radius < 0:
        raise DimensionError(f"Smoothing radius must be >= 0, got {radius}")
    taps = radius + 1 - np.abs(np.arange(-radius, radius + 1))
    return taps.astype(np.float64) / float((radius + 1) ** 2)


def smooth_plane(plane: np.ndarray, radius: int) -> np.ndarray:
    """
    Separable triangle-filter smoothing with reflective borders

    Args:
        plane: 2-D array
        radius: Filter radius in pixels (0 returns a copy)

    Returns:
        Smoothed float64 array of the same shape
    """
    plane = np.ascontiguousarray(plane, dtype=np.float64)
    if radius == 0:
        return plane.copy()
    kernel = triangle_kernel(radius)
    # numpy's reflect mirrors about the edge pixel (gfedcb|abcdefgh) and
    # keeps mirroring when the radius exceeds the plane
    padded = np.pad(plane, radius, mode="reflect")
    smoothed = cv2.sepFilter2D(padded, cv2.CV_64F, kernel, kernel, borderType=cv2.BORDER_CONSTANT)
    return np.ascontiguousarray(smoothed[radius:-radius, radius:-radius])
