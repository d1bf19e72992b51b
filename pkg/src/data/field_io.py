"""DDNF field files and the dataset directory built from them.

Layout of one field file (little-endian throughout):

    b"DDNF" | u16 version | i64 time_index | u32 H | u32 W | u16 n_channels
    | n_channels x (u16 len + name, u16 len + units)
    | H*W*n_channels f32 values, channel-major
    | u8 mask flag [| u32 n_bytes | packed mask bits]
    | u32 CRC32 of every preceding byte
"""
import hashlib
import json
import logging
import os
import struct
import zlib
import numpy as np
from dataclasses import dataclass
from pathlib import Path
from pydantic import BaseModel, ConfigDict
from typing import Dict, List, Optional, Sequence, Tuple, Union
from src.models.enums import Units
from src.models.fields import AuxiliaryFrame, DAPair, GridField, ObservationSet, StateSnapshot
from src.models.schemas import AUX_CHANNELS, STATE_CHANNELS
from src.utils.errors import (
    CorruptFieldFileError,
    DatasetError,
    DatasetLockedError,
    ManifestMismatchError,
)

logger = logging.getLogger(__name__)

FIELD_MAGIC = b"DDNF"
FIELD_VERSION = 1
DATASET_FORMAT_VERSION = 1
LOCK_NAME = ".lock"

OBS_CHANNELS = ("aod550",)
PAIR_CHANNELS = ("aod_forecast", "discrepancy", "label")


@dataclass
class FieldRecord:
    time_index: int
    names: List[str]
    units: List[str]
    values: np.ndarray  # [C, H, W] float32
    mask: Optional[np.ndarray] = None  # [H, W] bool

    def channel(self, name: str) -> np.ndarray:
        return self.values[self.names.index(name)]


def encode_field(record: FieldRecord) -> bytes:
    values = np.ascontiguousarray(record.values, dtype="<f4")
    if values.ndim != 3 or values.shape[0] != len(record.names) or len(record.names) != len(record.units):
        raise ValueError(f"field values {values.shape} do not match {len(record.names)} channel names")
    n_channels, height, width = values.shape
    parts = [
        FIELD_MAGIC,
        struct.pack("<HqIIH", FIELD_VERSION, record.time_index, height, width, n_channels),
    ]
    for name, units in zip(record.names, record.units):
        name_b, units_b = name.encode("utf-8"), units.encode("utf-8")
        parts.append(struct.pack("<H", len(name_b)) + name_b + struct.pack("<H", len(units_b)) + units_b)
    parts.append(values.tobytes())
    if record.mask is None:
        parts.append(struct.pack("<B", 0))
    else:
        if record.mask.shape != (height, width):
            raise ValueError(f"mask shape {record.mask.shape} does not match grid {(height, width)}")
        packed = np.packbits(record.mask.astype(bool).ravel(), bitorder="little").tobytes()
        parts.append(struct.pack("<BI", 1, len(packed)) + packed)
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def decode_field(blob: bytes, path: Union[str, Path] = "<memory>") -> FieldRecord:
    if len(blob) < 4 + 20 + 4 or blob[:4] != FIELD_MAGIC:
        raise CorruptFieldFileError(path, "not a DDNF field file")
    body, stored_crc = blob[:-4], struct.unpack("<I", blob[-4:])[0]
    if zlib.crc32(body) & 0xFFFFFFFF != stored_crc:
        raise CorruptFieldFileError(path, "CRC32 mismatch")
    try:
        version, time_index, height, width, n_channels = struct.unpack_from("<HqIIH", body, 4)
        if version != FIELD_VERSION:
            raise CorruptFieldFileError(path, f"unsupported field format version {version}")
        offset = 4 + struct.calcsize("<HqIIH")
        names, units = [], []
        for _ in range(n_channels):
            (n,) = struct.unpack_from("<H", body, offset)
            offset += 2
            names.append(body[offset:offset + n].decode("utf-8"))
            offset += n
            (n,) = struct.unpack_from("<H", body, offset)
            offset += 2
            units.append(body[offset:offset + n].decode("utf-8"))
            offset += n
        count = n_channels * height * width
        values = np.frombuffer(body, dtype="<f4", count=count, offset=offset).reshape(n_channels, height, width)
        offset += 4 * count
        (has_mask,) = struct.unpack_from("<B", body, offset)
        offset += 1
        mask = None
        if has_mask:
            (n_bytes,) = struct.unpack_from("<I", body, offset)
            offset += 4
            bits = np.frombuffer(body, dtype=np.uint8, count=n_bytes, offset=offset)
            offset += n_bytes
            mask = np.unpackbits(bits, count=height * width, bitorder="little").astype(bool).reshape(height, width)
        if offset != len(body):
            raise CorruptFieldFileError(path, f"{len(body) - offset} trailing bytes")
    except (struct.error, ValueError, UnicodeDecodeError) as e:
        raise CorruptFieldFileError(path, f"malformed body ({e})") from e
    return FieldRecord(time_index=time_index, names=names, units=units, values=values.copy(), mask=mask)


def write_field_file(path: Union[str, Path], record: FieldRecord) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_field(record))


def read_field_file(path: Union[str, Path]) -> FieldRecord:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as e:
        raise CorruptFieldFileError(path, f"unreadable ({e.strerror})") from e
    return decode_field(blob, path)


def state_record(state: StateSnapshot) -> FieldRecord:
    return FieldRecord(
        time_index=state.time_index,
        names=list(STATE_CHANNELS),
        units=[state.pm25.units.value, state.aod550.units.value],
        values=np.stack([state.pm25.values, state.aod550.values]),
    )


def aux_record(frame: AuxiliaryFrame) -> FieldRecord:
    return FieldRecord(
        time_index=frame.time_index,
        names=list(AUX_CHANNELS),
        units=[f.units.value for f in frame.channels()],
        values=frame.stack(),
    )


def obs_record(obs: ObservationSet) -> FieldRecord:
    return FieldRecord(
        time_index=obs.time_index,
        names=list(OBS_CHANNELS),
        units=[Units.DIMENSIONLESS.value],
        values=obs.values.values[None],
        mask=obs.mask,
    )


def pair_record(pair: DAPair) -> FieldRecord:
    return FieldRecord(
        time_index=pair.time_index,
        names=list(PAIR_CHANNELS),
        units=[Units.DIMENSIONLESS.value] * 3,
        values=np.concatenate([pair.inputs, pair.label]),
        mask=pair.mask,
    )


class DatasetManifest(BaseModel):
    model_config = ConfigDict(extra="forbid")

    format_version: int = DATASET_FORMAT_VERSION
    height: int
    width: int
    dt_hours: float
    t0: int
    t1: int
    t2: int
    t_end: int
    da_interval: int
    seed: int
    world_config_hash: str
    coarse_aod_weight: float
    state_channels: List[str] = list(STATE_CHANNELS)
    aux_channels: List[str] = list(AUX_CHANNELS)
    obs_times: List[int] = []
    da_pairs: List[Tuple[int, int]] = []  # (time_index, lead_steps) per pair file, in file order


def step_name(time_index: int) -> str:
    return f"step_{time_index:06d}.ddnf"


def pair_name(ordinal: int) -> str:
    return f"pair_{ordinal:06d}.ddnf"


class DirectoryLock:
    """Exclusive per-directory write lock backed by an O_EXCL lock file"""

    def __init__(self, directory: Union[str, Path]):
        self.path = Path(directory) / LOCK_NAME
        self._held = False

    def acquire(self) -> "DirectoryLock":
        self.path.parent.mkdir(parents=True, exist_ok=True)
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError as e:
            raise DatasetLockedError(f"{self.path.parent} is locked by another writer ({self.path} exists)") from e
        with os.fdopen(fd, "w") as handle:
            handle.write(str(os.getpid()))
        self._held = True
        return self

    def release(self) -> None:
        if self._held:
            self.path.unlink(missing_ok=True)
            self._held = False

    def __enter__(self) -> "DirectoryLock":
        return self.acquire()

    def __exit__(self, *exc) -> None:
        self.release()


class DatasetWriter:
    """Writes state/aux/obs streams under one directory while holding its lock"""

    def __init__(self, root: Union[str, Path]):
        self.root = Path(root)
        self.lock = DirectoryLock(self.root)
        self.obs_times: List[int] = []

    def __enter__(self) -> "DatasetWriter":
        try:
            self.root.mkdir(parents=True, exist_ok=True)
        except OSError as e:
            raise DatasetError(f"cannot create dataset directory {self.root}: {e.strerror}") from e
        self.lock.acquire()
        return self

    def __exit__(self, *exc) -> None:
        self.lock.release()

    def write_state(self, state: StateSnapshot) -> None:
        write_field_file(self.root / "state" / step_name(state.time_index), state_record(state))

    def write_aux(self, frame: AuxiliaryFrame) -> None:
        write_field_file(self.root / "aux" / step_name(frame.time_index), aux_record(frame))

    def write_obs(self, obs: ObservationSet) -> None:
        write_field_file(self.root / "obs" / step_name(obs.time_index), obs_record(obs))
        self.obs_times.append(obs.time_index)

    def write_manifest(self, manifest: DatasetManifest) -> None:
        write_manifest(self.root, manifest)


def write_manifest(root: Union[str, Path], manifest: DatasetManifest) -> None:
    text = json.dumps(manifest.model_dump(mode="json"), indent=2, sort_keys=True)
    (Path(root) / "manifest.json").write_text(text + "\n", encoding="utf-8")


def read_manifest(root: Union[str, Path]) -> DatasetManifest:
    path = Path(root) / "manifest.json"
    if not path.is_file():
        raise ManifestMismatchError(f"{root} has no manifest.json")
    try:
        return DatasetManifest.model_validate_json(path.read_text(encoding="utf-8"))
    except ValueError as e:
        raise ManifestMismatchError(f"{path}: invalid manifest ({e})") from e


class DatasetReader:
    """Read access to a generated dataset.

    Opening validates the manifest against every referenced field file (presence, grid,
    channel names, CRC). Reads afterwards go straight to the files and hold no state,
    so one reader can be shared between threads.
    """

    def __init__(self, root: Union[str, Path], verify: bool = True):
        self.root = Path(root)
        self.manifest = read_manifest(self.root)
        self._obs_times = set(self.manifest.obs_times)
        if verify:
            self.verify()

    @property
    def shape(self) -> Tuple[int, int]:
        return self.manifest.height, self.manifest.width

    def _check(self, path: Path, names: Sequence[str], time_index: int) -> FieldRecord:
        if not path.is_file():
            raise ManifestMismatchError(f"manifest references missing file {path}")
        record = read_field_file(path)
        if record.values.shape[1:] != self.shape:
            raise CorruptFieldFileError(path, f"grid {record.values.shape[1:]} differs from manifest {self.shape}")
        if record.names != list(names):
            raise CorruptFieldFileError(path, f"channels {record.names} differ from {list(names)}")
        if record.time_index != time_index:
            raise CorruptFieldFileError(path, f"time index {record.time_index} differs from file name {time_index}")
        return record

    def verify(self) -> None:
        m = self.manifest
        for t in range(m.t0, m.t_end):
            self._check(self.root / "state" / step_name(t), m.state_channels, t)
            self._check(self.root / "aux" / step_name(t), m.aux_channels, t)
        for t in m.obs_times:
            self._check(self.root / "obs" / step_name(t), OBS_CHANNELS, t)
        for ordinal, (t, _) in enumerate(m.da_pairs):
            self._check(self.root / "da_pairs" / pair_name(ordinal), PAIR_CHANNELS, t)
        logger.info(f"Verified dataset {self.root}: steps [{m.t0}, {m.t_end}), {len(m.obs_times)} observation times")

    def _in_range(self, time_index: int) -> None:
        if not self.manifest.t0 <= time_index < self.manifest.t_end:
            raise DatasetError(f"time index {time_index} outside dataset range [{self.manifest.t0}, {self.manifest.t_end})")

    def state_array(self, time_index: int) -> np.ndarray:
        """[2, H, W] float64: pm25, aod550"""
        self._in_range(time_index)
        return read_field_file(self.root / "state" / step_name(time_index)).values.astype(np.float64)

    def aux_array(self, time_index: int) -> np.ndarray:
        """[7, H, W] float64 in AUX_CHANNELS order"""
        self._in_range(time_index)
        return read_field_file(self.root / "aux" / step_name(time_index)).values.astype(np.float64)

    def state(self, time_index: int) -> StateSnapshot:
        values = self.state_array(time_index)
        return StateSnapshot(
            time_index=time_index,
            pm25=GridField(values=values[0], units=Units.UG_M3),
            aod550=GridField(values=values[1], units=Units.DIMENSIONLESS),
        )

    def aux(self, time_index: int) -> AuxiliaryFrame:
        return AuxiliaryFrame.from_stack(time_index, self.aux_array(time_index))

    def aux_series(self, start: int, stop: int) -> List[AuxiliaryFrame]:
        if start < self.manifest.t0 or stop > self.manifest.t_end:
            raise DatasetError(f"aux frames [{start}, {stop}) not available in [{self.manifest.t0}, {self.manifest.t_end})")
        return [self.aux(t) for t in range(start, stop)]

    def has_observation(self, time_index: int) -> bool:
        return time_index in self._obs_times

    def observation(self, time_index: int) -> Optional[ObservationSet]:
        if time_index not in self._obs_times:
            return None
        record = read_field_file(self.root / "obs" / step_name(time_index))
        return ObservationSet.build(time_index, record.values[0].astype(np.float64), record.mask)

    def da_pairs(self) -> List[DAPair]:
        pairs = []
        for ordinal, (t, lead) in enumerate(self.manifest.da_pairs):
            record = read_field_file(self.root / "da_pairs" / pair_name(ordinal))
            values = record.values.astype(np.float64)
            pairs.append(DAPair(time_index=t, lead_steps=lead, inputs=values[:2], label=values[2:3], mask=record.mask))
        return pairs

    def write_da_pairs(self, pairs: Sequence[DAPair]) -> None:
        """Replace the dataset's DA pair archive and record it in the manifest"""
        with DirectoryLock(self.root):
            pair_dir = self.root / "da_pairs"
            if pair_dir.exists():
                for stale in sorted(pair_dir.glob("pair_*.ddnf")):
                    stale.unlink()
            for ordinal, pair in enumerate(pairs):
                write_field_file(pair_dir / pair_name(ordinal), pair_record(pair))
            self.manifest = self.manifest.model_copy(update={"da_pairs": [(p.time_index, p.lead_steps) for p in pairs]})
            write_manifest(self.root, self.manifest)
        logger.info(f"Wrote {len(pairs)} DA pairs to {pair_dir}")


def dataset_checksum(root: Union[str, Path]) -> str:
    """SHA-256 over sorted relative paths and file bytes (lock file excluded)"""
    root = Path(root)
    digest = hashlib.sha256()
    for path in sorted(p for p in root.rglob("*") if p.is_file() and p.name != LOCK_NAME):
        digest.update(path.relative_to(root).as_posix().encode("utf-8"))
        digest.update(b"\0")
        digest.update(path.read_bytes())
    return digest.hexdigest()

