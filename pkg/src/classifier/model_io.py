"""
Binary model file reader and writer.

Layout (little-endian)::

    magic "CTE1" | version u32
    C u32 | M u32 | K u32 | height u32 | width u32 | depth u32
    orientation_count u16 | smoothing_radius u16 | flags u8
    M x table:
        kind u8 (0 fern, 1 tree) | patch_size u8
        fern: K u8 | K x bit record
        tree: stage_count u8 | stage sizes u8... | split factors u8...
              nodes in stage order: bit records, then 2^K_s directing u8
              entries for non-final stages
        area x0, y0, width, height as u16 | spatial bit count u8
        cell_count u32 | cell_count x C f32 weights (class-minor)
    C x f32 biases
    CRC32 u32 of everything above

A bit record is kind u8, channel u16, offsets i8 x 4, threshold f32,
bit index u8.
"""

import logging
import struct
import zlib
from pathlib import Path
from typing import List, Tuple

import numpy as np

from src.features.channels import PrepConfig
from src.features.words import BitFunction, Fern, LongTree, TreeNode
from src.utils.errors import ChecksumError, ModelFormatError, ModelVersionError
from src.utils.image_utils import Region
from .ensemble import ConvTable, Ensemble

logger = logging.getLogger(__name__)

MAGIC = b"CTE1"
FORMAT_VERSION = 1

_HEADER = struct.Struct("<6I")
_PREP = struct.Struct("<HHB")
_BIT = struct.Struct("<BH4bfB")
_AREA = struct.Struct("<4HB")

_FERN, _TREE = 0, 1

_FLAG_GRADIENT = 1
_FLAG_INTEGRAL = 2
_FLAG_SPATIAL = 4
_FLAG_ANY_GET_BIT = 8


def _pack_bit(bit: BitFunction) -> bytes:
    return _BIT.pack(int(bit.kind), bit.channel, *bit.offsets, bit.threshold, bit.bit_index)


def _pack_calculator(calc) -> bytes:
    if isinstance(calc, Fern):
        parts = [struct.pack("<BBB", _FERN, calc.patch_size, calc.bit_count)]
        parts.extend(_pack_bit(b) for b in calc.bits)
        return b"".join(parts)

    stages = calc.stage_count
    parts = [struct.pack("<BBB", _TREE, calc.patch_size, stages),
             struct.pack(f"<{stages}B", *calc.stage_sizes),
             struct.pack(f"<{stages - 1}B", *calc.split_factors)]
    for stage_nodes in calc.nodes:
        for node in stage_nodes:
            parts.extend(_pack_bit(b) for b in node.bits)
            if node.directing is not None:
                parts.append(bytes(node.directing))
    return b"".join(parts)


def serialize_model(ens: Ensemble) -> bytes:
    """Model bytes including the trailing checksum"""
    ens = ens.fold_feature_scales()
    height, width, depth = ens.image_shape
    max_bits = max((t.calculator.bit_count for t in ens.tables), default=0)
    prep = ens.prep
    flags = ((_FLAG_GRADIENT if prep.enable_gradient_channels else 0)
             | (_FLAG_INTEGRAL if prep.enable_integral_channels else 0)
             | (_FLAG_SPATIAL if prep.enable_spatial_channels else 0)
             | (_FLAG_ANY_GET_BIT if ens.allow_any_get_bit else 0))

    parts = [MAGIC, struct.pack("<I", FORMAT_VERSION),
             _HEADER.pack(ens.class_count, ens.table_count, max_bits, height, width, depth),
             _PREP.pack(prep.orientation_count, prep.smoothing_radius, flags)]
    for table in ens.tables:
        parts.append(_pack_calculator(table.calculator))
        area = table.area
        parts.append(_AREA.pack(area.x0, area.y0, area.width, area.height, table.spatial_bit_count))
        parts.append(struct.pack("<I", table.weights.shape[0]))
        parts.append(table.weights.astype("<f4").tobytes())
    parts.append(ens.biases.astype("<f4").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def save_model(ens: Ensemble, path: Path):
    """
    Write an ensemble to ``path``

    Feature scales are folded into the weights first, so the file holds the
    effective weights.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = serialize_model(ens)
    path.write_bytes(data)
    logger.info("Saved model with %d tables to %s (%d bytes)", ens.table_count, path, len(data))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, size: int) -> bytes:
        if self.pos + size > len(self.data):
            raise ModelFormatError(f"Model file truncated at byte {self.pos} (needed {size} more)")
        chunk = self.data[self.pos:self.pos + size]
        self.pos += size
        return chunk

    def unpack(self, fmt: struct.Struct) -> Tuple:
        return fmt.unpack(self.take(fmt.size))

    def u8s(self, count: int) -> Tuple[int, ...]:
        return tuple(self.take(count))

    def bit(self) -> BitFunction:
        kind, channel, x1, y1, x2, y2, threshold, bit_index = self.unpack(_BIT)
        return BitFunction(kind, channel, (x1, y1, x2, y2), threshold, bit_index)

    def floats(self, count: int) -> np.ndarray:
        return np.frombuffer(self.take(4 * count), dtype="<f4").astype(np.float32)


def _read_calculator(reader: _Reader):
    kind, patch_size = reader.u8s(2)
    if kind == _FERN:
        (bit_count,) = reader.u8s(1)
        return Fern(tuple(reader.bit() for _ in range(bit_count)), patch_size)
    if kind != _TREE:
        raise ModelFormatError(f"Unknown calculator kind {kind}")

    (stages,) = reader.u8s(1)
    if stages < 1:
        raise ModelFormatError("Tree with zero stages")
    stage_sizes = reader.u8s(stages)
    split_factors = reader.u8s(stages - 1)
    nodes: List[Tuple[TreeNode, ...]] = []
    count = 1
    for s, size in enumerate(stage_sizes):
        final = s == stages - 1
        stage_nodes = []
        for _ in range(count):
            bits = tuple(reader.bit() for _ in range(size))
            directing = None if final else reader.u8s(1 << size)
            stage_nodes.append(TreeNode(bits, directing))
        nodes.append(tuple(stage_nodes))
        if not final:
            count *= split_factors[s]
    return LongTree(stage_sizes, split_factors, tuple(nodes), patch_size)


def deserialize_model(data: bytes) -> Ensemble:
    """
    Parse model bytes

    Raises:
        ModelFormatError: bad magic, truncation or inconsistent content
        ModelVersionError: unsupported format version
        ChecksumError: CRC32 mismatch
    """
    if len(data) < 8 or data[:4] != MAGIC:
        raise ModelFormatError(f"Not a model file (magic {data[:4]!r})")
    (version,) = struct.unpack("<I", data[4:8])
    if version != FORMAT_VERSION:
        raise ModelVersionError(f"Unsupported model format version {version}, expected {FORMAT_VERSION}")
    if len(data) < 12:
        raise ModelFormatError("Model file truncated before checksum")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise ChecksumError(f"Model checksum mismatch: stored {crc:#010x}, computed {zlib.crc32(body):#010x}")

    try:
        return _parse_body(body)
    except ModelFormatError:
        raise
    except ValueError as e:
        raise ModelFormatError(f"Inconsistent model file: {e}") from e


def _parse_body(body: bytes) -> Ensemble:
    reader = _Reader(body)
    reader.take(8)
    class_count, table_count, _, height, width, depth = reader.unpack(_HEADER)
    orientations, smoothing, flags = reader.unpack(_PREP)
    prep = PrepConfig(
        orientation_count=orientations,
        smoothing_radius=smoothing,
        enable_gradient_channels=bool(flags & _FLAG_GRADIENT),
        enable_integral_channels=bool(flags & _FLAG_INTEGRAL),
        enable_spatial_channels=bool(flags & _FLAG_SPATIAL),
    )

    tables = []
    for _ in range(table_count):
        calc = _read_calculator(reader)
        x0, y0, area_width, area_height, spatial = reader.unpack(_AREA)
        (cell_count,) = struct.unpack("<I", reader.take(4))
        if cell_count != calc.cell_count:
            raise ModelFormatError(f"Weight block has {cell_count} cells, calculator needs {calc.cell_count}")
        weights = reader.floats(cell_count * class_count).reshape(cell_count, class_count)
        tables.append(ConvTable(calc, Region(x0, y0, area_width, area_height), weights, spatial))
    biases = reader.floats(class_count)
    if reader.pos != len(body):
        raise ModelFormatError(f"{len(body) - reader.pos} unexpected trailing bytes in model file")

    return Ensemble(tuple(tables), biases, class_count, prep, (height, width, depth),
                    allow_any_get_bit=bool(flags & _FLAG_ANY_GET_BIT))


def load_model(path: Path) -> Ensemble:
    path = Path(path)
    if not path.exists():
        raise ModelFormatError(f"Model file not found: {path}")
    ens = deserialize_model(path.read_bytes())
    logger.info("Loaded model with %d tables from %s", ens.table_count, path)
    return ens
