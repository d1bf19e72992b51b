"""DDNT checkpoint files: network weights, normalization statistics and optional Adam state.

    b"DDNT" | u16 version | u8 precision | u64 payload length | payload | u32 CRC32

Payload: u32 + JSON descriptor | tensor table | u8 optimizer flag [| u64 step | 4 x f64
hyperparameters | moment tensor table]. A tensor table is u32 count, then per tensor
u16 name length + name, u8 rank, rank x u32 dims, raw little-endian values.
"""
import json
import logging
import struct
import zlib
import numpy as np
import torch
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union
from src.models.enums import Precision
from src.models.schemas import NetworkSpec
from src.services.netblocks import GATE_ORDER, DDNetwork
from src.utils.errors import (
    BadMagicError,
    ChecksumMismatchError,
    CheckpointError,
    FormatVersionError,
    TruncatedFileError,
)
from src.utils.tensorcore import AdamState

logger = logging.getLogger(__name__)

MAGIC = b"DDNT"
FORMAT_VERSION = 1

_HEADER = struct.Struct("<4sHBQ")
_CRC = struct.Struct("<I")
_PRECISION_TAGS = {Precision.FLOAT32: 0, Precision.FLOAT64: 1}
_NUMPY_DTYPES = {Precision.FLOAT32: "<f4", Precision.FLOAT64: "<f8"}


@dataclass
class OptimizerSnapshot:
    step_count: int
    learning_rate: float
    beta1: float
    beta2: float
    eps: float
    moments: Dict[str, Tuple[torch.Tensor, torch.Tensor]] = field(default_factory=dict)


@dataclass
class LoadedCheckpoint:
    spec: NetworkSpec
    precision: Precision
    tensors: Dict[str, torch.Tensor]
    metadata: Dict[str, Any]
    optimizer: Optional[OptimizerSnapshot] = None

    def to_network(self) -> DDNetwork:
        network = DDNetwork(self.spec, self.precision)
        expected = set(network.state_dict().keys())
        if expected != set(self.tensors):
            missing = sorted(expected - set(self.tensors))
            extra = sorted(set(self.tensors) - expected)
            raise CheckpointError(f"tensor table does not match spec '{self.spec.name}': missing={missing} extra={extra}")
        network.load_state_dict(self.tensors, strict=True)
        return network

    def restore_optimizer(self, network: DDNetwork) -> Optional[AdamState]:
        if self.optimizer is None:
            return None
        snapshot = self.optimizer
        state = AdamState(network.named_parameters(), snapshot.learning_rate, snapshot.beta1, snapshot.beta2, snapshot.eps)
        state.restore(snapshot.step_count, snapshot.moments)
        return state


def _pack_table(tensors: List[Tuple[str, torch.Tensor]], np_dtype: str) -> bytes:
    parts = [struct.pack("<I", len(tensors))]
    for name, tensor in tensors:
        name_b = name.encode("utf-8")
        array = np.ascontiguousarray(tensor.detach().cpu().numpy(), dtype=np_dtype)
        parts.append(struct.pack("<H", len(name_b)) + name_b)
        parts.append(struct.pack("<B", array.ndim) + struct.pack(f"<{array.ndim}I", *array.shape))
        parts.append(array.tobytes())
    return b"".join(parts)


def _unpack_table(payload: bytes, offset: int, np_dtype: str) -> Tuple[Dict[str, torch.Tensor], int]:
    (count,) = struct.unpack_from("<I", payload, offset)
    offset += 4
    itemsize = np.dtype(np_dtype).itemsize
    tensors: Dict[str, torch.Tensor] = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<H", payload, offset)
        offset += 2
        name = payload[offset:offset + n].decode("utf-8")
        offset += n
        (rank,) = struct.unpack_from("<B", payload, offset)
        offset += 1
        dims = struct.unpack_from(f"<{rank}I", payload, offset)
        offset += 4 * rank
        size = int(np.prod(dims)) if rank else 1
        if offset + size * itemsize > len(payload):
            raise TruncatedFileError(f"tensor '{name}' runs past the end of the payload")
        array = np.frombuffer(payload, dtype=np_dtype, count=size, offset=offset).reshape(dims)
        offset += size * itemsize
        tensors[name] = torch.from_numpy(array.copy())
    return tensors, offset


def save_checkpoint(
    network: DDNetwork,
    path: Union[str, Path],
    optimizer: Optional[AdamState] = None,
    metadata: Optional[Dict[str, Any]] = None,
) -> Path:
    """
    Write a network (parameters and batchnorm moving statistics) to a DDNT file.

    Args:
        network: weights to store; every tensor is written in the network's precision
        path: destination file, parent directories are created
        optimizer: optional Adam state saved alongside the weights
        metadata: JSON-serializable extras, e.g. normalization statistics

    Returns:
        The written path
    """
    path = Path(path)
    precision = network.precision
    np_dtype = _NUMPY_DTYPES[precision]
    descriptor = {
        "spec": network.spec.model_dump(mode="json"),
        "gate_order": list(GATE_ORDER),
        "trainable": [name for name, p in network.named_parameters() if p.requires_grad],
        "metadata": metadata or {},
    }
    descriptor_b = json.dumps(descriptor, sort_keys=True).encode("utf-8")
    payload = [struct.pack("<I", len(descriptor_b)), descriptor_b]
    payload.append(_pack_table(list(network.state_dict().items()), np_dtype))
    if optimizer is None:
        payload.append(struct.pack("<B", 0))
    else:
        moments = optimizer.moments()
        table = []
        for name in optimizer.names:
            first, second = moments[name]
            table.append((f"exp_avg/{name}", first))
            table.append((f"exp_avg_sq/{name}", second))
        payload.append(struct.pack("<BQ", 1, optimizer.step_count))
        payload.append(struct.pack("<4d", optimizer.learning_rate, optimizer.beta1, optimizer.beta2, optimizer.eps))
        payload.append(_pack_table(table, np_dtype))
    payload_b = b"".join(payload)
    body = _HEADER.pack(MAGIC, FORMAT_VERSION, _PRECISION_TAGS[precision], len(payload_b)) + payload_b
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(body + _CRC.pack(zlib.crc32(body) & 0xFFFFFFFF))
    logger.info(f"Saved {network.spec.name} checkpoint to {path} ({len(body) + _CRC.size:,} bytes)")
    return path


def load_checkpoint(path: Union[str, Path]) -> LoadedCheckpoint:
    """Read a DDNT file; magic, version, length and CRC are checked in that order"""
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e.strerror}") from e

    if len(blob) < 4 or blob[:4] != MAGIC:
        raise BadMagicError(f"{path} is not a DDNT checkpoint")
    if len(blob) < _HEADER.size:
        raise TruncatedFileError(f"{path} ends inside the header")
    _, version, precision_tag, payload_len = _HEADER.unpack_from(blob, 0)
    if version != FORMAT_VERSION:
        raise FormatVersionError(f"{path} has format version {version}, this build reads version {FORMAT_VERSION}")
    expected = _HEADER.size + payload_len + _CRC.size
    if len(blob) != expected:
        raise TruncatedFileError(f"{path} is {len(blob)} bytes, header declares {expected}")
    body = blob[:-_CRC.size]
    (stored_crc,) = _CRC.unpack_from(blob, len(body))
    if zlib.crc32(body) & 0xFFFFFFFF != stored_crc:
        raise ChecksumMismatchError(f"{path} failed its CRC32 check")

    tags = {v: k for k, v in _PRECISION_TAGS.items()}
    if precision_tag not in tags:
        raise CheckpointError(f"{path} has unknown precision tag {precision_tag}")
    precision = tags[precision_tag]
    np_dtype = _NUMPY_DTYPES[precision]
    payload = body[_HEADER.size:]
    try:
        (n,) = struct.unpack_from("<I", payload, 0)
        descriptor = json.loads(payload[4:4 + n].decode("utf-8"))
        tensors, offset = _unpack_table(payload, 4 + n, np_dtype)
        (has_optimizer,) = struct.unpack_from("<B", payload, offset)
        offset += 1
        optimizer = None
        if has_optimizer:
            (step_count,) = struct.unpack_from("<Q", payload, offset)
            offset += 8
            lr, beta1, beta2, eps = struct.unpack_from("<4d", payload, offset)
            offset += 32
            table, offset = _unpack_table(payload, offset, np_dtype)
            moments = {}
            for key, first in table.items():
                if key.startswith("exp_avg/"):
                    name = key[len("exp_avg/"):]
                    moments[name] = (first, table[f"exp_avg_sq/{name}"])
            optimizer = OptimizerSnapshot(step_count, lr, beta1, beta2, eps, moments)
        spec = NetworkSpec.model_validate(descriptor["spec"])
    except (struct.error, KeyError, ValueError) as e:
        raise CheckpointError(f"{path} payload is malformed: {e}") from e
    if offset != len(payload):
        raise CheckpointError(f"{path} has {len(payload) - offset} unread payload bytes")

    trainable = set(descriptor.get("trainable", []))
    for name, tensor in tensors.items():
        tensor.requires_grad_(name in trainable)
    return LoadedCheckpoint(spec, precision, tensors, descriptor.get("metadata", {}), optimizer)
