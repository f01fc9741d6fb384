"""
CSL4 binary formats.

Tensor file::

    "CSL4" | u32 version=1 | u32 rank | u32 dims[rank] | u8 dtype (0=f32, 1=f64) | payload

Model checkpoint::

    "CSL4" | u32 version=257 | u32 config_len | config JSON (utf-8) | u32 n_layers
    | per layer: u32 input C,H,W | filter_x | filter_y | associator | scales | associator meta
    | training log | u32 crc32 of all preceding bytes

Every embedded matrix uses the tensor block layout (without the magic and
version), little-endian, row-major.
"""

import math
import struct
import zlib
from pathlib import Path
from typing import List, Tuple, Union

import numpy as np
import structlog
from pydantic import ValidationError

from ..core.exceptions import DatasetIOError, FormatError
from ..models.state import Associator, EpochRecord, LayerState, LossComponents, ModelState
from ..models.tensors import FilterBank, Image2, Tensor3, unwrap
from ..schemas.config import CoderKind, ModelConfig

logger = structlog.get_logger(__name__)

MAGIC = b"CSL4"
TENSOR_VERSION = 1
CHECKPOINT_VERSION = 0x101
MAX_RANK = 8
DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
DTYPE_TAGS = {"f32": 0, "f64": 1}

PathLike = Union[str, Path]


# ----------------------------------------------------------------------------
# Low-level reader
# ----------------------------------------------------------------------------

class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated {what}", offset=len(self.buf))
        chunk = self.buf[self.pos: self.pos + n]
        self.pos += n
        return chunk

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def magic(self) -> None:
        if self.take(4, "magic") != MAGIC:
            raise FormatError("bad magic (expected CSL4)", offset=self.pos - 4)

    def version(self, expected: int) -> None:
        start = self.pos
        version = self.u32("version")
        if version != expected:
            raise FormatError(f"unsupported version {version} (expected {expected})", offset=start)

    def block(self) -> np.ndarray:
        start = self.pos
        rank = self.u32("rank")
        if not 1 <= rank <= MAX_RANK:
            raise FormatError(f"invalid rank {rank}", offset=start)
        dims = struct.unpack(f"<{rank}I", self.take(4 * rank, "dimensions"))
        tag_offset = self.pos
        tag = self.take(1, "dtype tag")[0]
        if tag not in DTYPES:
            raise FormatError(f"unknown dtype tag {tag}", offset=tag_offset)
        dtype = DTYPES[tag]
        count = math.prod(dims)
        payload = self.take(count * dtype.itemsize, "payload")
        return np.frombuffer(payload, dtype=dtype).reshape(dims).astype(np.float64)

    def end(self) -> None:
        if self.pos != len(self.buf):
            raise FormatError(f"{len(self.buf) - self.pos} unexpected trailing bytes", offset=self.pos)


def _block_bytes(arr: np.ndarray, dtype: str = "f64") -> bytes:
    arr = np.asarray(arr, dtype=np.float64)
    if not 1 <= arr.ndim <= MAX_RANK:
        raise FormatError(f"cannot store a rank-{arr.ndim} tensor")
    tag = DTYPE_TAGS[dtype]
    header = struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape) + bytes([tag])
    return header + np.ascontiguousarray(arr, dtype=DTYPES[tag]).tobytes(order="C")


# ----------------------------------------------------------------------------
# Tensor files
# ----------------------------------------------------------------------------

def encode_tensor(arr: Union[np.ndarray, Image2, Tensor3], dtype: str = "f64") -> bytes:
    return MAGIC + struct.pack("<I", TENSOR_VERSION) + _block_bytes(unwrap(arr), dtype)


def decode_tensor(buf: bytes) -> np.ndarray:
    reader = _Reader(buf)
    reader.magic()
    reader.version(TENSOR_VERSION)
    arr = reader.block()
    reader.end()
    return arr


def write_tensor(path: PathLike, arr: Union[np.ndarray, Image2, Tensor3], dtype: str = "f64") -> None:
    data = encode_tensor(arr, dtype)
    try:
        Path(path).write_bytes(data)
    except OSError as e:
        raise DatasetIOError(f"cannot write tensor {path}: {e}") from e


def read_tensor(path: PathLike) -> np.ndarray:
    try:
        buf = Path(path).read_bytes()
    except OSError as e:
        raise DatasetIOError(f"cannot read tensor {path}: {e}") from e
    return decode_tensor(buf)


# ----------------------------------------------------------------------------
# Checkpoints
# ----------------------------------------------------------------------------

def encode_checkpoint(state: ModelState) -> bytes:
    config_json = state.config.model_dump_json(by_alias=True).encode("utf-8")
    parts: List[bytes] = [
        MAGIC,
        struct.pack("<II", CHECKPOINT_VERSION, len(config_json)),
        config_json,
        struct.pack("<I", len(state.layers)),
    ]
    for layer in state.layers:
        parts.append(struct.pack("<3I", *layer.input_shape))
        parts.append(_block_bytes(layer.filter_x.data))
        parts.append(_block_bytes(layer.filter_y.data))
        parts.append(_block_bytes(layer.associator.matrix))
        parts.append(_block_bytes(np.array([layer.scale_x, layer.scale_y])))
        a = layer.associator
        parts.append(_block_bytes(np.array([a.ridge, a.condition, a.residual])))

    names = LossComponents.names()
    log = np.array(
        [[record.epoch] + record.losses.values() for record in state.training_log],
        dtype=np.float64,
    ).reshape(len(state.training_log), len(names) + 1)
    parts.append(_block_bytes(log))
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def decode_checkpoint(buf: bytes) -> ModelState:
    reader = _Reader(buf)
    reader.magic()
    reader.version(CHECKPOINT_VERSION)
    crc_offset = len(buf) - 4
    if crc_offset < reader.pos:
        raise FormatError("truncated checkpoint", offset=len(buf))
    stored = struct.unpack("<I", buf[crc_offset:])[0]
    if stored != zlib.crc32(buf[:crc_offset]) & 0xFFFFFFFF:
        raise FormatError("checksum mismatch", offset=crc_offset)

    config_offset = reader.pos
    config_len = reader.u32("config length")
    raw_config = reader.take(config_len, "config")
    try:
        config = ModelConfig.model_validate_json(raw_config)
    except (ValidationError, ValueError) as e:
        raise FormatError(f"invalid config echo: {e}", offset=config_offset + 4) from e

    layers_offset = reader.pos
    n_layers = reader.u32("layer count")
    specs = config.expanded_layers()
    if n_layers not in (0, len(specs)):
        raise FormatError(f"{n_layers} layers stored but config describes {len(specs)}", offset=layers_offset)
    orthogonal = config.coder == CoderKind.L4

    layers: List[LayerState] = []
    for spec in specs[:n_layers]:
        input_shape = struct.unpack("<3I", reader.take(12, "layer input shape"))
        block_offset = reader.pos
        try:
            filter_x = FilterBank(reader.block(), orthogonal_mode=orthogonal)
            filter_y = FilterBank(reader.block(), orthogonal_mode=orthogonal)
            matrix = reader.block()
            scales = reader.block()
            meta = reader.block()
            associator = Associator(matrix, ridge=float(meta[0]), condition=float(meta[1]), residual=float(meta[2]))
        except FormatError:
            raise
        except (ValueError, ArithmeticError, IndexError) as e:
            raise FormatError(f"inconsistent layer data: {e}", offset=block_offset) from e
        layers.append(LayerState(
            spec=spec,
            input_shape=tuple(input_shape),  # type: ignore[arg-type]
            filter_x=filter_x,
            filter_y=filter_y,
            associator=associator,
            scale_x=float(scales[0]),
            scale_y=float(scales[1]),
        ))

    log_offset = reader.pos
    log = reader.block()
    width = len(LossComponents.names()) + 1
    if log.ndim != 2 or log.shape[1] != width:
        raise FormatError(f"training log has shape {log.shape}, expected (*, {width})", offset=log_offset)
    records = tuple(EpochRecord(epoch=int(row[0]), losses=LossComponents(*(float(v) for v in row[1:]))) for row in log)

    if reader.pos != crc_offset:
        raise FormatError("checkpoint body does not end at the checksum", offset=reader.pos)
    return ModelState(config=config, layers=tuple(layers), training_log=records)


def write_checkpoint(path: PathLike, state: ModelState) -> None:
    data = encode_checkpoint(state)
    try:
        Path(path).write_bytes(data)
    except OSError as e:
        raise DatasetIOError(f"cannot write checkpoint {path}: {e}") from e
    logger.info("checkpoint_written", path=str(path), layers=len(state.layers), size=len(data))


def read_checkpoint(path: PathLike) -> ModelState:
    try:
        buf = Path(path).read_bytes()
    except FileNotFoundError as e:
        raise FormatError(f"checkpoint {path} does not exist") from e
    except OSError as e:
        raise DatasetIOError(f"cannot read checkpoint {path}: {e}") from e
    return decode_checkpoint(buf)


def tensor_header_size(shape: Tuple[int, ...]) -> int:
    """Byte length of the tensor header for a given shape."""
    return 4 + 4 + 4 + 4 * len(shape) + 1
