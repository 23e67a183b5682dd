"""
Bit functions and word calculators.

A word calculator maps the l x l patch around a pixel to a K-bit word. Two
structures exist: a :class:`Fern` applies the same K bit functions at every
pixel, a :class:`LongTree` splits the K bits into stages and lets each
stage's word choose the node that computes the next stage.

Each calculator has two evaluation paths:

- ``cells(tensor, region)`` evaluates one bit function at a time over all
  pixels of a region and all images of a batch (array slicing, no gathers).
  This is the path used by training and inference.
- ``cell_at(planes, x, y)`` evaluates a single pixel with scalar reads. It is
  the reference the batch path is checked against.

Both compare float32 values against float32 thresholds, so they agree bit
for bit.
"""

import logging
from dataclasses import dataclass, replace
from enum import IntEnum
from typing import Optional, Sequence, Tuple, Union

import numpy as np

from src.utils.errors import ChannelKindError, ConfigError, DimensionError
from src.utils.image_utils import Region
from .channels import EVAL_DTYPE, ChannelKind, ExtendedImage

logger = logging.getLogger(__name__)

MAX_WORD_BITS = 16
DEFAULT_PATCH_SIZE = 9
# Get-bit on a non-spatial channel reads the value as an integer of this width.
GENERIC_GET_BIT_WIDTH = 8


class BitKind(IntEnum):
    ONE_PIXEL = 0
    TWO_PIXEL = 1
    GET_BIT = 2
    INTEGRAL_BIT = 3

    @property
    def thresholded(self) -> bool:
        return self != BitKind.GET_BIT


@dataclass(frozen=True)
class BitFunction:
    """
    One comparison primitive producing a single bit

    ``offsets`` is (x1, y1, x2, y2) relative to the patch center. One-pixel and
    get-bit functions read only (x1, y1); get-bit ignores the threshold.
    """

    kind: BitKind
    channel: int
    offsets: Tuple[int, int, int, int] = (0, 0, 0, 0)
    threshold: float = 0.0
    bit_index: int = 0

    def __post_init__(self):
        object.__setattr__(self, "kind", BitKind(self.kind))
        object.__setattr__(self, "offsets", tuple(int(o) for o in self.offsets))
        object.__setattr__(self, "threshold", float(np.float32(self.threshold)))
        if len(self.offsets) != 4:
            raise ConfigError(f"Bit function needs 4 offset values, got {self.offsets}")
        if self.channel < 0:
            raise ConfigError(f"Channel index must be >= 0, got {self.channel}")
        if self.bit_index < 0:
            raise ConfigError(f"Bit index must be >= 0, got {self.bit_index}")
        if self.kind == BitKind.INTEGRAL_BIT:
            x1, y1, x2, y2 = self.offsets
            if not (x1 < x2 and y1 < y2):
                raise ConfigError(f"Integral bit needs x1 < x2 and y1 < y2, got {self.offsets}")

    @property
    def reach(self) -> int:
        """Largest absolute offset the function reads"""
        if self.kind in (BitKind.ONE_PIXEL, BitKind.GET_BIT):
            return max(abs(self.offsets[0]), abs(self.offsets[1]))
        return max(abs(o) for o in self.offsets)

    @property
    def is_spatial(self) -> bool:
        return self.kind == BitKind.GET_BIT

    def with_threshold(self, threshold: float) -> "BitFunction":
        return replace(self, threshold=threshold)

    def validate(self, kinds: Sequence[ChannelKind], bit_widths: Sequence[int],
                 radius: int, allow_any_get_bit: bool = False):
        """
        Check the function against a channel layout and patch radius

        Raises:
            DimensionError: offsets outside the patch or channel out of range
            ChannelKindError: function kind not valid on the addressed channel
        """
        if self.channel >= len(kinds):
            raise DimensionError(f"Channel {self.channel} out of range for {len(kinds)} channels")
        if self.reach > radius:
            raise DimensionError(f"Offsets {self.offsets} exceed patch radius {radius}")
        kind = kinds[self.channel]
        if self.kind == BitKind.INTEGRAL_BIT and kind != ChannelKind.INTEGRAL:
            raise ChannelKindError(f"Integral bit on {kind.value} channel {self.channel}")
        if self.kind == BitKind.GET_BIT:
            width = bit_widths[self.channel]
            if width == 0:
                if not allow_any_get_bit:
                    raise ChannelKindError(f"Get-bit on non-spatial {kind.value} channel {self.channel}")
                width = GENERIC_GET_BIT_WIDTH
            if self.bit_index >= width:
                raise ChannelKindError(
                    f"Bit index {self.bit_index} out of range for {width}-bit channel {self.channel}"
                )


def _as_batch(tensor) -> np.ndarray:
    """Accept an ExtendedImage, (D_e, H, W) planes or an (N, D_e, H, W) tensor"""
    if isinstance(tensor, ExtendedImage):
        tensor = tensor.as_float32()
    if tensor.ndim == 3:
        tensor = tensor[np.newaxis]
    if tensor.dtype != EVAL_DTYPE:
        raise DimensionError(f"Bit functions evaluate float32 tensors, got {tensor.dtype}")
    return tensor


def _shifted(tensor: np.ndarray, channel: int, dx: int, dy: int, region: Region) -> np.ndarray:
    return tensor[:, channel, region.y0 + dy:region.y1 + dy, region.x0 + dx:region.x1 + dx]


def underlying_values(bit: BitFunction, tensor: np.ndarray, region: Region) -> np.ndarray:
    """
    The patch measurement a bit function thresholds, for every pixel of a region

    Args:
        bit: Bit function
        tensor: float32 tensor (N, D_e, H, W)
        region: Pixel centers to evaluate; patches must fit inside the image

    Returns:
        float32 array (N, region.height, region.width)
    """
    x1, y1, x2, y2 = bit.offsets
    a = _shifted(tensor, bit.channel, x1, y1, region)
    if bit.kind in (BitKind.ONE_PIXEL, BitKind.GET_BIT):
        return a
    if bit.kind == BitKind.TWO_PIXEL:
        return a - _shifted(tensor, bit.channel, x2, y2, region)
    return ((a - _shifted(tensor, bit.channel, x1, y2, region))
            - _shifted(tensor, bit.channel, x2, y1, region)) + _shifted(tensor, bit.channel, x2, y2, region)


def bit_values(bit: BitFunction, tensor: np.ndarray, region: Region) -> np.ndarray:
    """Bits of a function over a region, uint8 array (N, h, w)"""
    values = underlying_values(bit, tensor, region)
    if bit.kind == BitKind.GET_BIT:
        return ((values.astype(np.int64) >> bit.bit_index) & 1).astype(np.uint8)
    return (values >= np.float32(bit.threshold)).astype(np.uint8)


def _read(planes: np.ndarray, channel: int, x: int, y: int) -> np.float32:
    height, width = planes.shape[1:]
    if not (0 <= x < width and 0 <= y < height):
        raise DimensionError(f"Pixel ({x}, {y}) outside {width}x{height} image")
    return planes[channel, y, x]


def _bit_at(bit: BitFunction, planes: np.ndarray, x: int, y: int) -> int:
    x1, y1, x2, y2 = bit.offsets
    a = _read(planes, bit.channel, x + x1, y + y1)
    if bit.kind == BitKind.GET_BIT:
        return (int(a) >> bit.bit_index) & 1
    if bit.kind == BitKind.ONE_PIXEL:
        value = a
    elif bit.kind == BitKind.TWO_PIXEL:
        value = a - _read(planes, bit.channel, x + x2, y + y2)
    else:
        value = ((a - _read(planes, bit.channel, x + x1, y + y2))
                 - _read(planes, bit.channel, x + x2, y + y1)) + _read(planes, bit.channel, x + x2, y + y2)
    # Heaviside with H(0) = 1
    return 1 if value >= np.float32(bit.threshold) else 0


def _pack(bits: Sequence[np.ndarray]) -> np.ndarray:
    """First bit is least significant"""
    word = np.zeros(bits[0].shape, dtype=np.int64) if bits else np.zeros((), dtype=np.int64)
    for k, b in enumerate(bits):
        word |= b.astype(np.int64) << k
    return word


def _check_patch(patch_size: int):
    if patch_size < 1 or patch_size % 2 == 0:
        raise ConfigError(f"Patch size must be a positive odd number, got {patch_size}")


@dataclass(frozen=True)
class Fern:
    """K bit functions applied unconditionally at every pixel"""

    bits: Tuple[BitFunction, ...]
    patch_size: int = DEFAULT_PATCH_SIZE

    def __post_init__(self):
        object.__setattr__(self, "bits", tuple(self.bits))
        _check_patch(self.patch_size)
        if not 1 <= len(self.bits) <= MAX_WORD_BITS:
            raise ConfigError(f"Fern needs 1..{MAX_WORD_BITS} bits, got {len(self.bits)}")
        for bit in self.bits:
            if bit.reach > self.radius:
                raise DimensionError(f"Bit offsets {bit.offsets} exceed patch radius {self.radius}")

    @property
    def radius(self) -> int:
        return self.patch_size // 2

    @property
    def bit_count(self) -> int:
        return len(self.bits)

    @property
    def cell_count(self) -> int:
        return 1 << len(self.bits)

    def all_bits(self) -> Tuple[BitFunction, ...]:
        return self.bits

    def words(self, tensor, region: Region) -> np.ndarray:
        tensor = _as_batch(tensor)
        return _pack([bit_values(b, tensor, region) for b in self.bits])

    def cells(self, tensor, region: Region) -> np.ndarray:
        """Weight-table cell per pixel; for a fern this is the word itself"""
        return self.words(tensor, region)

    def word_at(self, planes: np.ndarray, x: int, y: int) -> int:
        word = 0
        for k, bit in enumerate(self.bits):
            word |= _bit_at(bit, planes, x, y) << k
        return word

    def cell_at(self, planes: np.ndarray, x: int, y: int) -> int:
        return self.word_at(planes, x, y)


@dataclass(frozen=True)
class TreeNode:
    """
    One long-tree node

    ``directing`` maps each of the node's 2^K_s words to a child number in
    1..q_s; it is None for final-stage nodes.
    """

    bits: Tuple[BitFunction, ...]
    directing: Optional[Tuple[int, ...]] = None

    def __post_init__(self):
        object.__setattr__(self, "bits", tuple(self.bits))
        if self.directing is not None:
            object.__setattr__(self, "directing", tuple(int(v) for v in self.directing))


@dataclass(frozen=True)
class LongTree:
    """
    Staged word calculator

    Stage s holds prod(q_1..q_{s-1}) nodes stored in order; child c (1-based)
    of node j at stage s is node j * q_s + (c - 1) at stage s + 1. The weight
    table is indexed by leaf ordinal * 2^K_last + final-stage word, so two
    different paths never share a cell.
    """

    stage_sizes: Tuple[int, ...]
    split_factors: Tuple[int, ...]
    nodes: Tuple[Tuple[TreeNode, ...], ...]
    patch_size: int = DEFAULT_PATCH_SIZE

    def __post_init__(self):
        object.__setattr__(self, "stage_sizes", tuple(int(k) for k in self.stage_sizes))
        object.__setattr__(self, "split_factors", tuple(int(q) for q in self.split_factors))
        object.__setattr__(self, "nodes", tuple(tuple(stage) for stage in self.nodes))
        _check_patch(self.patch_size)
        self._validate()

    def _validate(self):
        stages = len(self.stage_sizes)
        if stages < 1 or any(k < 1 for k in self.stage_sizes):
            raise ConfigError(f"Stage sizes must be >= 1, got {self.stage_sizes}")
        if not 1 <= sum(self.stage_sizes) <= MAX_WORD_BITS:
            raise ConfigError(f"Tree needs 1..{MAX_WORD_BITS} bits in total, got {sum(self.stage_sizes)}")
        if len(self.split_factors) != stages - 1 or any(q < 1 for q in self.split_factors):
            raise ConfigError(f"Need {stages - 1} split factors >= 1, got {self.split_factors}")
        if len(self.nodes) != stages:
            raise ConfigError(f"Need node lists for {stages} stages, got {len(self.nodes)}")
        expected = 1
        for s, (size, stage_nodes) in enumerate(zip(self.stage_sizes, self.nodes)):
            if len(stage_nodes) != expected:
                raise ConfigError(f"Stage {s + 1} must hold {expected} nodes, got {len(stage_nodes)}")
            final = s == stages - 1
            for node in stage_nodes:
                if len(node.bits) != size:
                    raise ConfigError(f"Stage {s + 1} nodes need {size} bits, got {len(node.bits)}")
                for bit in node.bits:
                    if bit.reach > self.radius:
                        raise DimensionError(f"Bit offsets {bit.offsets} exceed patch radius {self.radius}")
                if final:
                    if node.directing is not None:
                        raise ConfigError("Final-stage nodes have no child-directing table")
                else:
                    q = self.split_factors[s]
                    if node.directing is None or len(node.directing) != 1 << size:
                        raise ConfigError(f"Stage {s + 1} nodes need a directing table of {1 << size} entries")
                    if any(not 1 <= v <= q for v in node.directing):
                        raise ConfigError(f"Directing entries must lie in 1..{q}, got {node.directing}")
            if not final:
                expected *= self.split_factors[s]

    @property
    def radius(self) -> int:
        return self.patch_size // 2

    @property
    def stage_count(self) -> int:
        return len(self.stage_sizes)

    @property
    def bit_count(self) -> int:
        return sum(self.stage_sizes)

    @property
    def leaf_count(self) -> int:
        return len(self.nodes[-1])

    @property
    def cell_count(self) -> int:
        return self.leaf_count << self.stage_sizes[-1]

    def all_bits(self) -> Tuple[BitFunction, ...]:
        return tuple(bit for stage in self.nodes for node in stage for bit in node.bits)

    def _trace(self, tensor: np.ndarray, region: Region):
        """Node ordinals at the final stage plus the concatenated word"""
        tensor = _as_batch(tensor)
        shape = (tensor.shape[0], region.height, region.width)
        node_ids = np.zeros(shape, dtype=np.int64)
        word = np.zeros(shape, dtype=np.int64)
        shift = 0
        for s, stage_nodes in enumerate(self.nodes):
            stage_word = np.zeros(shape, dtype=np.int64)
            for j, node in enumerate(stage_nodes):
                mask = node_ids == j
                if not mask.any():
                    continue
                local = _pack([bit_values(b, tensor, region) for b in node.bits])
                stage_word[mask] = local[mask]
            word |= stage_word << shift
            shift += self.stage_sizes[s]
            if s < self.stage_count - 1:
                q = self.split_factors[s]
                table = np.array([node.directing for node in stage_nodes], dtype=np.int64)
                node_ids = node_ids * q + table[node_ids, stage_word] - 1
        return node_ids, stage_word, word

    def words(self, tensor, region: Region) -> np.ndarray:
        """Concatenated stage words, stage 1 in the low bits"""
        return self._trace(tensor, region)[2]

    def cells(self, tensor, region: Region) -> np.ndarray:
        leaves, last_word, _ = self._trace(tensor, region)
        return (leaves << self.stage_sizes[-1]) | last_word

    def _path_at(self, planes: np.ndarray, x: int, y: int):
        node_index, word, shift, stage_word = 0, 0, 0, 0
        for s, stage_nodes in enumerate(self.nodes):
            node = stage_nodes[node_index]
            stage_word = 0
            for k, bit in enumerate(node.bits):
                stage_word |= _bit_at(bit, planes, x, y) << k
            word |= stage_word << shift
            shift += self.stage_sizes[s]
            if node.directing is not None:
                node_index = node_index * self.split_factors[s] + node.directing[stage_word] - 1
        return node_index, stage_word, word

    def word_at(self, planes: np.ndarray, x: int, y: int) -> int:
        return self._path_at(planes, x, y)[2]

    def cell_at(self, planes: np.ndarray, x: int, y: int) -> int:
        leaf, last_word, _ = self._path_at(planes, x, y)
        return (leaf << self.stage_sizes[-1]) | last_word


WordCalculator = Union[Fern, LongTree]


def validate_for_layout(calc: WordCalculator, kinds: Sequence[ChannelKind],
                        bit_widths: Sequence[int], allow_any_get_bit: bool = False):
    """Validate every bit function of a calculator against a channel layout"""
    for bit in calc.all_bits():
        bit.validate(kinds, bit_widths, calc.radius, allow_any_get_bit)


def valid_area(calc: WordCalculator, width: int, height: int) -> Region:
    """
    Largest centered region whose patches fit inside the image

    Args:
        calc: Word calculator (its patch size matters)
        width: Image width S_x
        height: Image height S_y

    Returns:
        Region of size (width - l + 1) x (height - l + 1)
    """
    radius = calc.radius
    if calc.patch_size > width or calc.patch_size > height:
        raise DimensionError(f"Patch {calc.patch_size}x{calc.patch_size} larger than image {width}x{height}")
    return Region(radius, radius, width - 2 * radius, height - 2 * radius)


def _planes_for(image: ExtendedImage, x: int, y: int, radius: int) -> np.ndarray:
    if not (radius <= x < image.width - radius and radius <= y < image.height - radius):
        raise DimensionError(
            f"Patch of radius {radius} at ({x}, {y}) leaves {image.width}x{image.height} image"
        )
    return image.as_float32()


def eval_bit(bit: BitFunction, image: ExtendedImage, p: Tuple[int, int],
             allow_any_get_bit: bool = False) -> int:
    """
    Evaluate one bit function at pixel ``p = (x, y)``

    Raises:
        DimensionError: the read pixels leave the image
        ChannelKindError: the function does not apply to the addressed channel
    """
    bit.validate(image.kinds, image.bit_widths, bit.reach, allow_any_get_bit)
    x, y = p
    return _bit_at(bit, _planes_for(image, x, y, bit.reach), x, y)


def eval_fern(fern: Fern, image: ExtendedImage, p: Tuple[int, int]) -> int:
    """K-bit word of a fern at pixel ``p``, first bit least significant"""
    x, y = p
    return fern.word_at(_planes_for(image, x, y, fern.radius), x, y)


def eval_tree(tree: LongTree, image: ExtendedImage, p: Tuple[int, int]) -> int:
    """Concatenated stage words of a long tree at pixel ``p``"""
    x, y = p
    return tree.word_at(_planes_for(image, x, y, tree.radius), x, y)


def words_for_batch(calc: WordCalculator, tensor: np.ndarray, region: Region) -> np.ndarray:
    """
    Weight-table cells of a calculator for every image and pixel of a region

    Args:
        calc: Fern or long tree
        tensor: float32 tensor (N, D_e, H, W) from ``prepare_batch``
        region: Pixels to evaluate

    Returns:
        int64 array (N, region.height, region.width)
    """
    tensor = _as_batch(tensor)
    height, width = tensor.shape[2:]
    if not valid_area(calc, width, height).contains(region):
        raise DimensionError(f"Region {region} exceeds the valid area of a {width}x{height} image")
    return calc.cells(tensor, region)
