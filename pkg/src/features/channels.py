"""
Channel preparation for convolutional tables.

A raw image is turned into an extended image whose channels are, in this
fixed order:

    1. the original channels (smoothed)
    2. the gradient norm (smoothed)
    3. ``orientation_count`` oriented-gradient maps (smoothed)
    4. integral images of every channel from 1-3, in the same order
    5. horizontal then vertical quantized-location channels

Groups 2-5 are present only when enabled in :class:`PrepConfig`. Bit
functions address channels by index into this layout, so the order must
never change for a given configuration.
"""

import logging
from dataclasses import dataclass
from enum import Enum
from typing import List, NamedTuple, Optional, Tuple

import numpy as np

from src.utils.errors import ConfigError, DimensionError
from src.utils.image_utils import smooth_plane, to_planar

logger = logging.getLogger(__name__)

# Bit functions evaluate on float32 planes; thresholds are stored as f32.
EVAL_DTYPE = np.float32


class ChannelKind(str, Enum):
    ORIGINAL = "original"
    GRADIENT_NORM = "gradient-norm"
    GRADIENT_ORIENTED = "gradient-oriented"
    INTEGRAL = "integral"
    SPATIAL_HORIZONTAL = "spatial-horizontal"
    SPATIAL_VERTICAL = "spatial-vertical"

    @property
    def is_spatial(self) -> bool:
        return self in (ChannelKind.SPATIAL_HORIZONTAL, ChannelKind.SPATIAL_VERTICAL)


@dataclass(frozen=True)
class RawImage:
    """A dense (height, width, depth) image with real values"""

    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim == 2:
            data = data[:, :, np.newaxis]
        if data.ndim != 3 or min(data.shape) < 1:
            raise DimensionError(f"Raw image must be (height, width, depth) with all dims >= 1, got {data.shape}")
        object.__setattr__(self, "data", data)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def depth(self) -> int:
        return self.data.shape[2]


@dataclass(frozen=True)
class PrepConfig:
    orientation_count: int = 6
    smoothing_radius: int = 1
    enable_gradient_channels: bool = True
    enable_integral_channels: bool = True
    enable_spatial_channels: bool = True

    def validate(self):
        if self.enable_gradient_channels and self.orientation_count < 1:
            raise ConfigError(f"orientation_count must be >= 1, got {self.orientation_count}")
        if self.smoothing_radius < 0:
            raise ConfigError(f"smoothing_radius must be >= 0, got {self.smoothing_radius}")


@dataclass(frozen=True)
class SpatialBitBudget:
    horizontal_bits: int
    vertical_bits: int

    @classmethod
    def for_size(cls, width: int, height: int) -> "SpatialBitBudget":
        return cls(int(width).bit_length() - 1, int(height).bit_length() - 1)


class ChannelSpec(NamedTuple):
    index: int
    kind: ChannelKind
    source: Optional[int]  # integrated channel index, or orientation bin


def channel_layout(depth: int, config: PrepConfig) -> List[ChannelSpec]:
    """
    The documented channel index map for a given input depth

    Args:
        depth: Number of original channels D
        config: Preparation settings

    Returns:
        One ChannelSpec per extended channel, in storage order
    """
    specs = [ChannelSpec(d, ChannelKind.ORIGINAL, None) for d in range(depth)]
    if config.enable_gradient_channels:
        specs.append(ChannelSpec(len(specs), ChannelKind.GRADIENT_NORM, None))
        for o in range(config.orientation_count):
            specs.append(ChannelSpec(len(specs), ChannelKind.GRADIENT_ORIENTED, o))
    if config.enable_integral_channels:
        real_count = len(specs)
        for d in range(real_count):
            specs.append(ChannelSpec(len(specs), ChannelKind.INTEGRAL, d))
    if config.enable_spatial_channels:
        specs.append(ChannelSpec(len(specs), ChannelKind.SPATIAL_HORIZONTAL, None))
        specs.append(ChannelSpec(len(specs), ChannelKind.SPATIAL_VERTICAL, None))
    return specs


@dataclass(frozen=True)
class ExtendedImage:
    """
    Prepared image I^e read by all bit functions

    ``channels`` has shape (D_e, height, width) and is read-only.
    ``bit_widths`` holds the number of location bits of each spatial channel
    and 0 for every other channel.
    """

    channels: np.ndarray
    kinds: Tuple[ChannelKind, ...]
    bit_widths: Tuple[int, ...]

    def __post_init__(self):
        if self.channels.ndim != 3:
            raise DimensionError(f"Extended image must be (D_e, height, width), got {self.channels.shape}")
        if len(self.kinds) != self.channels.shape[0] or len(self.bit_widths) != self.channels.shape[0]:
            raise DimensionError("Channel kind list does not match channel count")
        self.channels.flags.writeable = False

    @property
    def extended_depth(self) -> int:
        return self.channels.shape[0]

    @property
    def height(self) -> int:
        return self.channels.shape[1]

    @property
    def width(self) -> int:
        return self.channels.shape[2]

    def as_float32(self) -> np.ndarray:
        """Planes in the precision bit functions compare at"""
        return self.channels.astype(EVAL_DTYPE)


def gradient_channels(channel: np.ndarray, orientations: int) -> List[np.ndarray]:
    """
    Gradient norm and softly quantized oriented-gradient maps

    Central differences in the interior, one-sided at the borders. Each
    pixel's gradient magnitude is split linearly between the two orientation
    bins nearest its angle in [0, pi), so the oriented maps sum to the norm.

    Args:
        channel: 2-D array of at least 2x2 pixels
        orientations: Number of orientation bins N^O

    Returns:
        List of 1 + N^O arrays: the norm followed by the oriented maps
    """
    if orientations < 1:
        raise ConfigError(f"orientations must be >= 1, got {orientations}")
    channel = np.asarray(channel, dtype=np.float64)
    if min(channel.shape) < 2:
        raise DimensionError(f"Gradient channels need at least 2x2 pixels, got {channel.shape}")

    gy, gx = np.gradient(channel)
    norm = np.hypot(gx, gy)
    angle = np.mod(np.arctan2(gy, gx), np.pi)

    position = angle * (orientations / np.pi)
    lower = np.floor(position)
    frac = position - lower
    lower = lower.astype(np.int64) % orientations
    upper = (lower + 1) % orientations

    low_share = norm * (1.0 - frac)
    high_share = norm * frac
    oriented = []
    for o in range(orientations):
        plane = np.where(lower == o, low_share, 0.0) + np.where(upper == o, high_share, 0.0)
        oriented.append(plane)
    return [norm] + oriented


def integral_channel(channel: np.ndarray) -> np.ndarray:
    """
    Inclusive integral image: out(x, y) = sum over x' <= x, y' <= y

    Prefix sums run along rows first, then down columns.
    """
    channel = np.asarray(channel, dtype=np.float64)
    return np.cumsum(np.cumsum(channel, axis=1), axis=0)


def spatial_channels(width: int, height: int) -> Tuple[np.ndarray, np.ndarray]:
    """
    Quantized location channels

    The horizontal value at column x is floor(x * 2^N^H / width), an N^H-bit
    integer whose top bit splits the image into left and right halves; the
    vertical channel is symmetric.

    Returns:
        (horizontal, vertical) float64 arrays of shape (height, width)
    """
    if width < 2 or height < 2:
        raise DimensionError(f"Spatial channels need width and height >= 2, got {width}x{height}")
    budget = SpatialBitBudget.for_size(width, height)
    xs = (np.arange(width) << budget.horizontal_bits) // width
    ys = (np.arange(height) << budget.vertical_bits) // height
    horizontal = np.broadcast_to(xs[np.newaxis, :], (height, width)).astype(np.float64)
    vertical = np.broadcast_to(ys[:, np.newaxis], (height, width)).astype(np.float64)
    return horizontal, vertical


def smooth_channel(channel: np.ndarray, radius: int) -> np.ndarray:
    """Triangle-filter smoothing; radius 0 is the identity"""
    return smooth_plane(np.asarray(channel, dtype=np.float64), radius)


def prepare_channels(image: RawImage, config: PrepConfig) -> ExtendedImage:
    """
    Build the extended image I^e from a raw image

    Gradients are taken on the per-pixel mean of the original channels and
    smoothed together with the originals. Integral and spatial channels are
    never smoothed.

    Args:
        image: Raw input image
        config: Preparation settings

    Returns:
        ExtendedImage following :func:`channel_layout`
    """
    config.validate()
    if config.enable_gradient_channels and (image.width < 3 or image.height < 3):
        raise DimensionError(f"Gradient channels need at least 3x3 pixels, got {image.width}x{image.height}")

    planes = to_planar(image.data)
    real = list(planes)
    if config.enable_gradient_channels:
        real.extend(gradient_channels(planes.mean(axis=0), config.orientation_count))
    real = [smooth_channel(p, config.smoothing_radius) for p in real]

    channels = list(real)
    if config.enable_integral_channels:
        channels.extend(integral_channel(p) for p in real)

    if config.enable_spatial_channels:
        channels.extend(spatial_channels(image.width, image.height))

    kinds, bit_widths = layout_metadata(image.depth, image.width, image.height, config)
    return ExtendedImage(np.stack(channels), kinds, bit_widths)


def prepare_batch(images: np.ndarray, config: PrepConfig) -> np.ndarray:
    """
    Prepare a stack of images for training or batch timing

    Args:
        images: Array of shape (N, height, width, depth)
        config: Preparation settings

    Returns:
        float32 tensor of shape (N, D_e, height, width)
    """
    if images.ndim == 3:
        images = images[..., np.newaxis]
    count, height, width, depth = images.shape
    extended_depth = len(channel_layout(depth, config))
    tensor = np.empty((count, extended_depth, height, width), dtype=EVAL_DTYPE)
    for i in range(count):
        tensor[i] = prepare_channels(RawImage(images[i]), config).as_float32()
    logger.debug("Prepared %d images into %d channels", count, extended_depth)
    return tensor


def layout_metadata(depth: int, width: int, height: int,
                    config: PrepConfig) -> Tuple[Tuple[ChannelKind, ...], Tuple[int, ...]]:
    """Channel kinds and get-bit widths without preparing an image"""
    budget = SpatialBitBudget.for_size(width, height)
    kinds = tuple(spec.kind for spec in channel_layout(depth, config))
    widths = tuple(
        budget.horizontal_bits if kind == ChannelKind.SPATIAL_HORIZONTAL
        else budget.vertical_bits if kind == ChannelKind.SPATIAL_VERTICAL
        else 0
        for kind in kinds
    )
    return kinds, widths
