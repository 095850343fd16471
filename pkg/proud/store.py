# proud/store.py
"""
File formats: dataset suites (PRDS), model checkpoints (PRCK), embedding dumps
(PREM) and the per-sample CSV export.  Binary files are little-endian with a
4-byte magic and a u16 format version.
"""

from __future__ import annotations

import io
import json
import logging
import struct
from pathlib import Path
from typing import BinaryIO, Dict, List, Optional, Tuple, Union

import numpy as np
import pandas as pd

from proud.autodiff import Tensor
from proud.datagen import ROLES, DatasetSuite, DomainDataset
from proud.errors import FormatError
from proud.model import Model
from proud.schemas import GeneratorConfig

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
SUITE_MAGIC = b"PRDS"
CHECKPOINT_MAGIC = b"PRCK"
EMBEDDING_MAGIC = b"PREM"

PathLike = Union[str, Path]
EmbeddingEntry = Tuple[int, str, np.ndarray, Optional[np.ndarray]]  # source, role, features, prototypes


# ------------------------------------------------------------------ #
#  LOW-LEVEL FRAMING
# ------------------------------------------------------------------ #
def _pack(buf: BinaryIO, fmt: str, *values) -> None:
    buf.write(struct.pack("<" + fmt, *values))


def _unpack(buf: BinaryIO, fmt: str) -> Tuple:
    size = struct.calcsize("<" + fmt)
    raw = buf.read(size)
    if len(raw) != size:
        raise FormatError(f"truncated file: expected {size} more bytes")
    return struct.unpack("<" + fmt, raw)


def _write_array(buf: BinaryIO, a: np.ndarray, dtype: str = "<f8") -> None:
    buf.write(np.ascontiguousarray(a, dtype=dtype).tobytes())


def _read_array(buf: BinaryIO, shape: Tuple[int, ...], dtype: str = "<f8") -> np.ndarray:
    count = int(np.prod(shape))
    itemsize = np.dtype(dtype).itemsize
    raw = buf.read(count * itemsize)
    if len(raw) != count * itemsize:
        raise FormatError(f"truncated array block of shape {shape}")
    return np.frombuffer(raw, dtype=dtype).astype(np.float64 if dtype == "<f8" else np.int64).reshape(shape)


def _header(buf: BinaryIO, magic: bytes) -> None:
    buf.write(magic)
    _pack(buf, "H", FORMAT_VERSION)


def _check_header(buf: BinaryIO, magic: bytes, path: PathLike) -> None:
    found = buf.read(4)
    if found != magic:
        raise FormatError(f"{path}: bad magic {found!r}, expected {magic!r}")
    (version,) = _unpack(buf, "H")
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported format version {version}")


def _save_bytes(path: PathLike, payload: bytes) -> None:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(payload)
    except OSError as exc:
        raise FormatError(f"{path}: cannot write ({exc.strerror})") from exc


def _load_bytes(path: PathLike) -> io.BytesIO:
    try:
        return io.BytesIO(Path(path).read_bytes())
    except OSError as exc:
        raise FormatError(f"{path}: cannot read ({exc.strerror})") from exc


# ------------------------------------------------------------------ #
#  DATASET SUITE
# ------------------------------------------------------------------ #
def save_suite(suite: DatasetSuite, path: PathLike) -> None:
    """Every domain is stored with its ground truth; the role byte says which labels are visible."""
    buf = io.BytesIO()
    _header(buf, SUITE_MAGIC)
    _pack(buf, "III", suite.num_classes, suite.input_dim, suite.n_domains)
    for ds in suite.domains:
        labels = suite.ground_truth.get(ds.source_index, ds.labels)
        _pack(buf, "IIBB", ds.source_index, ds.n, ROLES.index(ds.role), labels is not None)
        _write_array(buf, ds.inputs)
        if labels is not None:
            _write_array(buf, labels, dtype="<i8")
    config = suite.gen_config.model_dump_json().encode("utf-8") if suite.gen_config else b""
    _pack(buf, "I", len(config))
    buf.write(config)
    _save_bytes(path, buf.getvalue())
    logger.debug("wrote suite with %d domains to %s", suite.n_domains, path)


def load_suite(path: PathLike) -> DatasetSuite:
    buf = _load_bytes(path)
    _check_header(buf, SUITE_MAGIC, path)
    K, p, count = _unpack(buf, "III")
    domains: List[DomainDataset] = []
    ground_truth: Dict[int, np.ndarray] = {}
    for _ in range(count):
        source, n, role_byte, has_labels = _unpack(buf, "IIBB")
        if role_byte >= len(ROLES):
            raise FormatError(f"{path}: unknown role byte {role_byte}")
        inputs = _read_array(buf, (n, p))
        labels = _read_array(buf, (n,), dtype="<i8") if has_labels else None
        if labels is not None:
            ground_truth[source] = labels
        role = ROLES[role_byte]
        domains.append(
            DomainDataset(
                domain_id=source,
                inputs=inputs,
                labels=labels if role == "labeled" else None,
                source_index=source,
                role=role,
            )
        )
    (config_len,) = _unpack(buf, "I")
    config = buf.read(config_len)
    gen_config = GeneratorConfig.model_validate_json(config) if config_len else None
    return DatasetSuite(domains, K, p, gen_config=gen_config, ground_truth=ground_truth)


def export_suite_csv(suite: DatasetSuite, path: PathLike) -> None:
    """One row per sample: domain_id, label (-1 if hidden), x_0..x_{p-1}."""
    frames = []
    for ds in suite.domains:
        frame = pd.DataFrame(ds.inputs, columns=[f"x_{j}" for j in range(suite.input_dim)])
        labels = ds.labels if ds.labels is not None else np.full(ds.n, -1)
        frame.insert(0, "label", labels)
        frame.insert(0, "domain_id", ds.source_index)
        frames.append(frame)
    try:
        pd.concat(frames, ignore_index=True).to_csv(path, index=False)
    except OSError as exc:
        raise FormatError(f"{path}: cannot write ({exc.strerror})") from exc


# ------------------------------------------------------------------ #
#  CHECKPOINT
# ------------------------------------------------------------------ #
def save_checkpoint(m: Model, path: PathLike) -> None:
    buf = io.BytesIO()
    _header(buf, CHECKPOINT_MAGIC)
    _pack(buf, "II", m.num_classes, len(m.dims))
    _pack(buf, f"{len(m.dims)}I", *m.dims)
    _pack(buf, "I", len(m.params))
    for name, p in m.named_parameters():
        encoded = name.encode("utf-8")
        _pack(buf, "H", len(encoded))
        buf.write(encoded)
        _pack(buf, "B", p.data.ndim)
        _pack(buf, f"{p.data.ndim}I", *p.data.shape)
        _write_array(buf, p.data)
    _save_bytes(path, buf.getvalue())


def load_checkpoint(path: PathLike, seed: int = 0) -> Model:
    buf = _load_bytes(path)
    _check_header(buf, CHECKPOINT_MAGIC, path)
    K, n_dims = _unpack(buf, "II")
    dims = list(_unpack(buf, f"{n_dims}I"))
    (count,) = _unpack(buf, "I")
    params: Dict[str, Tensor] = {}
    for _ in range(count):
        (name_len,) = _unpack(buf, "H")
        name = buf.read(name_len).decode("utf-8")
        (ndim,) = _unpack(buf, "B")
        shape = _unpack(buf, f"{ndim}I")
        params[name] = Tensor(_read_array(buf, shape).copy(), requires_grad=True)
    return Model(dims, K, seed, params)


# ------------------------------------------------------------------ #
#  EMBEDDINGS
# ------------------------------------------------------------------ #
def save_embeddings(entries: List[EmbeddingEntry], feature_dim: int, path: PathLike) -> None:
    """Normalized features and (optional) prototypes per domain, for external plotting."""
    buf = io.BytesIO()
    _header(buf, EMBEDDING_MAGIC)
    _pack(buf, "II", feature_dim, len(entries))
    for source, role, features, prototypes in entries:
        _pack(buf, "IBI", source, ROLES.index(role), features.shape[0])
        _write_array(buf, features)
        n_protos = 0 if prototypes is None else prototypes.shape[0]
        _pack(buf, "I", n_protos)
        if n_protos:
            _write_array(buf, prototypes)
    _save_bytes(path, buf.getvalue())


def load_embeddings(path: PathLike) -> List[EmbeddingEntry]:
    buf = _load_bytes(path)
    _check_header(buf, EMBEDDING_MAGIC, path)
    d, count = _unpack(buf, "II")
    entries: List[EmbeddingEntry] = []
    for _ in range(count):
        source, role_byte, n = _unpack(buf, "IBI")
        features = _read_array(buf, (n, d))
        (n_protos,) = _unpack(buf, "I")
        prototypes = _read_array(buf, (n_protos, d)) if n_protos else None
        entries.append((source, ROLES[role_byte], features, prototypes))
    return entries
