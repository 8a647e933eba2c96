"""Bit-exact file I/O: the NPY v1.0 array subset, label rasters, feature
and embedding tensors, and the standards store JSON format.

The array format implemented here is deliberately a narrow subset: version
1.0 only, C-order only, dtypes float32 (``<f4``), uint8 (``|u1``) and
uint16 (``<u2``), rank at most 3.  Headers are emitted with the exact
field order and 64-byte alignment used by the reference scientific-array
writer, so files written here are byte-identical to its output for the
supported subset.
"""

from __future__ import annotations

import ast
import json
import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    BadMagic,
    DimMismatch,
    FortranOrderUnsupported,
    LabelOutOfRange,
    MissingCategoryRow,
    MissingStandard,
    NonFiniteValue,
    NpyFormatError,
    RankMismatch,
    SchemaVersionMismatch,
    ShapeMismatch,
    SidecarError,
    StandardsSchemaError,
    TruncatedPayload,
    UnknownSidecarCategory,
    UnsupportedDtype,
    UnsupportedVersion,
)
from .model import (
    IGNORE_LABEL,
    CategoryPool,
    DenseFeatureMap,
    DiscriminationRule,
    InterpretationStandard,
    LabelRaster,
    StandardsStore,
    TextEmbeddingSet,
    pool_from_json_dict,
    pool_to_json_dict,
)

_MAGIC = b"\x93NUMPY"
_VERSION = bytes((1, 0))
_HEADER_ALIGN = 64

# header descr string for each supported dtype code
_DESCR_BY_CODE = {"f4": "<f4", "u1": "|u1", "u2": "<u2"}
_CODE_BY_DESCR = {v: k for k, v in _DESCR_BY_CODE.items()}
_NP_DTYPES = {code: np.dtype(descr) for code, descr in _DESCR_BY_CODE.items()}


@dataclass(frozen=True)
class NpyHeader:
    """Parsed array-file header for the supported subset."""

    dtype_code: str
    shape: tuple[int, ...]
    fortran_order: bool = False

    def __post_init__(self) -> None:
        if self.dtype_code not in _DESCR_BY_CODE:
            raise UnsupportedDtype(f"unsupported dtype code {self.dtype_code!r}")
        if self.fortran_order:
            raise FortranOrderUnsupported("fortran-order arrays are not supported")
        if len(self.shape) > 3:
            raise RankMismatch(f"rank {len(self.shape)} exceeds the supported maximum 3")
        if any(int(d) < 0 for d in self.shape):
            raise NpyFormatError(f"negative dimension in shape {self.shape}")

    @property
    def descr(self) -> str:
        return _DESCR_BY_CODE[self.dtype_code]

    @property
    def dtype(self) -> np.dtype:
        return _NP_DTYPES[self.dtype_code]

    @property
    def element_count(self) -> int:
        count = 1
        for d in self.shape:
            count *= int(d)
        return count


def _parse_header_dict(raw: bytes) -> NpyHeader:
    try:
        text = raw.decode("ascii")
    except UnicodeDecodeError as exc:
        raise NpyFormatError("header is not ASCII") from exc
    if not text.endswith("\n"):
        raise NpyFormatError("header does not end with a newline")
    try:
        fields = ast.literal_eval(text)
    except (ValueError, SyntaxError) as exc:
        raise NpyFormatError(f"header is not a literal dict: {exc}") from exc
    if not isinstance(fields, dict):
        raise NpyFormatError("header is not a dict")
    expected_keys = {"descr", "fortran_order", "shape"}
    if set(fields) != expected_keys:
        raise NpyFormatError(
            f"header keys {sorted(fields)} do not match {sorted(expected_keys)}"
        )
    descr = fields["descr"]
    if descr not in _CODE_BY_DESCR:
        raise UnsupportedDtype(f"unsupported descr {descr!r}")
    if fields["fortran_order"] is not False:
        if fields["fortran_order"] is True:
            raise FortranOrderUnsupported("fortran-order arrays are not supported")
        raise NpyFormatError(f"bad fortran_order value {fields['fortran_order']!r}")
    shape = fields["shape"]
    if not isinstance(shape, tuple) or not all(
        isinstance(d, int) and not isinstance(d, bool) for d in shape
    ):
        raise NpyFormatError(f"bad shape value {shape!r}")
    return NpyHeader(dtype_code=_CODE_BY_DESCR[descr], shape=shape)


def parse_npy_bytes(buf: bytes) -> tuple[NpyHeader, bytes]:
    """Parse a whole array file held in memory; returns header and payload."""
    if len(buf) < len(_MAGIC) or buf[: len(_MAGIC)] != _MAGIC:
        raise BadMagic("file does not start with the array-format magic string")
    if len(buf) < 10:
        raise TruncatedPayload("file ends inside the fixed-size preamble")
    version = buf[6:8]
    if version != _VERSION:
        raise UnsupportedVersion(
            f"unsupported format version {version[0]}.{version[1]}"
        )
    (header_len,) = struct.unpack("<H", buf[8:10])
    data_start = 10 + header_len
    if len(buf) < data_start:
        raise TruncatedPayload("file ends inside the header")
    header = _parse_header_dict(buf[10:data_start])
    payload = buf[data_start:]
    expected = header.element_count * header.dtype.itemsize
    if len(payload) < expected:
        raise TruncatedPayload(
            f"payload holds {len(payload)} bytes, expected {expected}"
        )
    if len(payload) > expected:
        raise TruncatedPayload(
            f"payload holds {len(payload) - expected} trailing bytes"
        )
    return header, payload


def read_npy(path: str | Path) -> tuple[NpyHeader, bytes]:
    """Read and validate an array file; returns the header and raw payload."""
    return parse_npy_bytes(Path(path).read_bytes())


def array_from_payload(header: NpyHeader, payload: bytes) -> np.ndarray:
    arr = np.frombuffer(payload, dtype=header.dtype).reshape(header.shape)
    return arr.copy()


def load_array(path: str | Path) -> np.ndarray:
    header, payload = read_npy(path)
    return array_from_payload(header, payload)


def write_npy(header: NpyHeader, values: np.ndarray | bytes) -> bytes:
    """Serialize values under the given header; returns the full file bytes.

    The header is padded with spaces so the payload starts on a 64-byte
    boundary, matching the reference writer byte for byte.
    """
    expected = header.element_count * header.dtype.itemsize
    if isinstance(values, (bytes, bytearray, memoryview)):
        payload = bytes(values)
        if len(payload) != expected:
            raise ShapeMismatch(
                f"payload holds {len(payload)} bytes, header needs {expected}"
            )
    else:
        arr = np.asarray(values)
        if arr.size != header.element_count:
            raise ShapeMismatch(
                f"array has {arr.size} elements, header shape {header.shape} "
                f"needs {header.element_count}"
            )
        arr = np.ascontiguousarray(arr.reshape(header.shape), dtype=header.dtype)
        payload = arr.tobytes(order="C")

    shape_repr = str(tuple(int(d) for d in header.shape))
    header_text = (
        "{'descr': '%s', 'fortran_order': False, 'shape': %s, }"
        % (header.descr, shape_repr)
    )
    preamble_len = len(_MAGIC) + 2 + 2
    total = preamble_len + len(header_text) + 1
    pad = (-total) % _HEADER_ALIGN
    header_bytes = (header_text + " " * pad + "\n").encode("ascii")
    if len(header_bytes) > 0xFFFF:
        raise NpyFormatError("header too long for version 1.0")
    return _MAGIC + _VERSION + struct.pack("<H", len(header_bytes)) + header_bytes + payload


def write_npy_file(path: str | Path, array: np.ndarray) -> None:
    """Write an array to disk in the supported subset, atomically."""
    # asarray, not ascontiguousarray: the latter promotes rank 0 to rank 1
    # and would stamp the wrong shape into the header
    arr = np.asarray(array)
    code = {"float32": "f4", "uint8": "u1", "uint16": "u2"}.get(arr.dtype.name)
    if code is None:
        raise UnsupportedDtype(f"cannot write dtype {arr.dtype}")
    header = NpyHeader(dtype_code=code, shape=arr.shape)
    atomic_write_bytes(path, write_npy(header, arr))


def atomic_write_bytes(path: str | Path, payload: bytes) -> None:
    """Write via a temp file in the same directory, then rename over the target."""
    path = Path(path)
    fd, tmp_name = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp_name, path)
    except BaseException:
        try:
            os.unlink(tmp_name)
        except OSError:
            pass
        raise


def atomic_write_text(path: str | Path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


# ---------------------------------------------------------------------------
# Typed loaders


def load_feature_map(path: str | Path) -> DenseFeatureMap:
    """Load a rank-3 float32 feature tensor, rejecting non-finite values."""
    header, payload = read_npy(path)
    if header.dtype_code != "f4":
        raise UnsupportedDtype(
            f"feature map must be float32, got {header.descr} in {path}"
        )
    if len(header.shape) != 3:
        raise RankMismatch(
            f"feature map must be rank 3, got shape {header.shape} in {path}"
        )
    arr = array_from_payload(header, payload)
    finite = np.isfinite(arr)
    if not finite.all():
        flat = int(np.flatnonzero(~finite.ravel())[0])
        position = tuple(int(i) for i in np.unravel_index(flat, arr.shape))
        raise NonFiniteValue(flat, position)
    return DenseFeatureMap.from_array(arr)


def load_text_embeddings(
    path: str | Path, pool: CategoryPool, sidecar_path: str | Path
) -> TextEmbeddingSet:
    """Load category embeddings plus their row-mapping sidecar.

    The sidecar maps tensor rows to category names; rows are reordered to
    pool index order.  Every pool category must be covered exactly once and
    the sidecar may not name categories outside the pool.
    """
    header, payload = read_npy(path)
    if header.dtype_code != "f4":
        raise UnsupportedDtype(
            f"embeddings must be float32, got {header.descr} in {path}"
        )
    if len(header.shape) != 2:
        raise RankMismatch(
            f"embeddings must be rank 2, got shape {header.shape} in {path}"
        )
    arr = array_from_payload(header, payload)
    n_rows, dim = arr.shape

    with open(sidecar_path, encoding="utf-8") as fh:
        sidecar = json.load(fh)
    if not isinstance(sidecar, dict) or "rows" not in sidecar or "dim" not in sidecar:
        raise SidecarError("sidecar must be an object with 'rows' and 'dim'")
    if int(sidecar["dim"]) != dim:
        raise DimMismatch(
            f"sidecar dim {sidecar['dim']} does not match tensor dim {dim}"
        )

    row_by_name: dict[str, int] = {}
    for entry in sidecar["rows"]:
        name = str(entry["category"]).strip().lower()
        row = int(entry["row"])
        if name not in pool.names:
            raise UnknownSidecarCategory(name)
        if name in row_by_name:
            raise SidecarError(f"sidecar maps category {name!r} twice")
        if not 0 <= row < n_rows:
            raise SidecarError(f"sidecar row {row} outside tensor with {n_rows} rows")
        if row in row_by_name.values():
            raise SidecarError(f"sidecar maps tensor row {row} twice")
        row_by_name[name] = row
    for name in pool.names:
        if name not in row_by_name:
            raise MissingCategoryRow(name)

    ordered = np.ascontiguousarray(
        np.stack([arr[row_by_name[name]] for name in pool.names])
    )
    return TextEmbeddingSet(pool=pool, dim=dim, data=ordered, normalized=False)


def load_label_raster(path: str | Path, pool: CategoryPool) -> LabelRaster:
    """Load a rank-2 uint16 label raster, checking labels against the pool."""
    header, payload = read_npy(path)
    if header.dtype_code != "u2":
        raise UnsupportedDtype(
            f"label raster must be uint16, got {header.descr} in {path}"
        )
    if len(header.shape) != 2:
        raise RankMismatch(
            f"label raster must be rank 2, got shape {header.shape} in {path}"
        )
    arr = array_from_payload(header, payload)
    bad = (arr >= len(pool)) & (arr != IGNORE_LABEL)
    if bad.any():
        flat = int(np.flatnonzero(bad.ravel())[0])
        position = tuple(int(i) for i in np.unravel_index(flat, arr.shape))
        raise LabelOutOfRange(int(arr.ravel()[flat]), position)
    return LabelRaster.from_array(arr)


def save_label_raster(raster: LabelRaster, path: str | Path) -> None:
    header = NpyHeader(dtype_code="u2", shape=(raster.height, raster.width))
    atomic_write_bytes(path, write_npy(header, raster.labels))


# ---------------------------------------------------------------------------
# Standards store serialization

_STANDARDS_SCHEMA_VERSION = 1
_STORE_KEYS = {"schema_version", "created_at", "pool", "standards", "rules"}
_STANDARD_KEYS = {
    "category",
    "morphology",
    "spectral_spatial",
    "exclusivity",
    "sub_classes",
    "source",
}
_RULE_KEYS = {"category_a", "category_b", "rule", "decides_for"}


def standards_to_json_dict(store: StandardsStore) -> dict:
    return {
        "schema_version": _STANDARDS_SCHEMA_VERSION,
        "created_at": store.created_at,
        "pool": pool_to_json_dict(store.pool),
        "standards": [
            {
                "category": s.category,
                "morphology": s.morphology,
                "spectral_spatial": s.spectral_spatial,
                "exclusivity": s.exclusivity,
                "sub_classes": list(s.sub_classes),
                "source": s.source,
            }
            for s in store.standards
        ],
        "rules": [
            {
                "category_a": r.category_a,
                "category_b": r.category_b,
                "rule": r.rule,
                "decides_for": r.decides_for,
            }
            for r in store.rules
        ],
    }


def save_standards(store: StandardsStore, path: str | Path) -> None:
    text = json.dumps(standards_to_json_dict(store), indent=2, ensure_ascii=False)
    atomic_write_text(path, text + "\n")


def standards_from_json_dict(payload: dict) -> StandardsStore:
    if not isinstance(payload, dict):
        raise StandardsSchemaError("standards store must be a JSON object")
    version = payload.get("schema_version")
    if version != _STANDARDS_SCHEMA_VERSION:
        raise SchemaVersionMismatch(version)
    unknown = set(payload) - _STORE_KEYS
    if unknown:
        raise StandardsSchemaError(
            f"unrecognized standards store fields: {sorted(unknown)}"
        )
    pool = pool_from_json_dict(payload["pool"])

    standards = []
    for entry in payload.get("standards", []):
        extra = set(entry) - _STANDARD_KEYS
        if extra:
            raise StandardsSchemaError(
                f"unrecognized standard fields: {sorted(extra)}"
            )
        standards.append(
            InterpretationStandard(
                category=entry["category"],
                morphology=entry["morphology"],
                spectral_spatial=entry["spectral_spatial"],
                exclusivity=entry["exclusivity"],
                sub_classes=tuple(entry.get("sub_classes", [])),
                source=entry.get("source", "mllm"),
            )
        )
    present = {s.category for s in standards}
    for name in pool.names:
        if name not in present:
            raise MissingStandard(name)

    rules = []
    for entry in payload.get("rules", []):
        extra = set(entry) - _RULE_KEYS
        if extra:
            raise StandardsSchemaError(f"unrecognized rule fields: {sorted(extra)}")
        rules.append(
            DiscriminationRule(
                category_a=entry["category_a"],
                category_b=entry["category_b"],
                rule=entry["rule"],
                decides_for=entry["decides_for"],
            )
        )
    return StandardsStore(
        pool=pool,
        standards=tuple(standards),
        rules=tuple(rules),
        created_at=str(payload.get("created_at", "")),
    )


def load_standards(path: str | Path) -> StandardsStore:
    with open(path, encoding="utf-8") as fh:
        return standards_from_json_dict(json.load(fh))
