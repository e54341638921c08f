"""Self-describing volume container.

Layout::

    GSVOL <header-byte-length>\\n
    <JSON header, exactly header-byte-length bytes>
    <little-endian payload, C order>

The header records schema version, shape, dtype, axis order, voxel size,
an optional diffusion scheme and provenance.  JSON is written with sorted
keys and no timestamps so identical inputs give identical bytes.
"""
from __future__ import annotations

from dataclasses import dataclass, field
import json
import os

import numpy as np

MAGIC = b"GSVOL"
SCHEMA_VERSION = 1

DTYPES = {
    "real32": np.dtype("<f4"),
    "real64": np.dtype("<f8"),
    "complex64": np.dtype("<c8"),
    "complex128": np.dtype("<c16"),
}


class ContainerError(ValueError):
    pass


class HeaderParseError(ContainerError):
    def __init__(self, msg, offset):
        super().__init__(f"{msg} (byte offset {offset})")
        self.offset = offset


class TruncatedPayloadError(ContainerError):
    pass


class DtypeMismatchError(ContainerError):
    pass


class SchemaVersionError(ContainerError):
    pass


@dataclass
class Volume:
    data: np.ndarray
    kind: str = "image"                         # image | slab | phase | map
    axis_order: tuple = ("dwi", "x", "y", "z")
    voxel_size: tuple = (1.0, 1.0, 1.0)
    bvals: np.ndarray | None = None
    bvecs: np.ndarray | None = None
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if len(self.axis_order) != self.data.ndim:
            raise ValueError(f"axis_order {self.axis_order} does not match {self.data.ndim}-d data")


def default_dtype(data):
    return "complex64" if np.iscomplexobj(data) else "real32"


def _header(vol: Volume, dtype):
    h = {
        "schema_version": SCHEMA_VERSION,
        "kind": vol.kind,
        "shape": list(vol.data.shape),
        "dtype": dtype,
        "axis_order": list(vol.axis_order),
        "voxel_size": [float(v) for v in vol.voxel_size],
        "scheme": None,
        "provenance": vol.provenance,
    }
    if vol.bvals is not None:
        h["scheme"] = {"bvals": [float(b) for b in np.asarray(vol.bvals)],
                       "bvecs": np.asarray(vol.bvecs, dtype=float).tolist()}
    return h


def encode_container(vol: Volume, dtype=None) -> bytes:
    dtype = dtype or default_dtype(vol.data)
    if dtype not in DTYPES:
        raise DtypeMismatchError(f"unknown storage dtype {dtype!r}; expected one of {sorted(DTYPES)}")
    if np.iscomplexobj(vol.data) and not dtype.startswith("complex"):
        raise DtypeMismatchError(f"complex data cannot be stored as {dtype}")
    if not np.all(np.isfinite(vol.data)):
        raise ValueError("refusing to store non-finite values")
    header = json.dumps(_header(vol, dtype), sort_keys=True, separators=(",", ":")).encode()
    payload = np.ascontiguousarray(vol.data, dtype=DTYPES[dtype]).tobytes()
    return MAGIC + b" " + str(len(header)).encode() + b"\n" + header + payload


def write_container(vol: Volume, path, dtype=None):
    blob = encode_container(vol, dtype)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)
    return path


def decode_container(blob: bytes, expect_dtype=None, expect_kind=None) -> Volume:
    nl = blob.find(b"\n", 0, 64)
    if not blob.startswith(MAGIC + b" ") or nl < 0:
        raise HeaderParseError("missing container magic line", 0)
    try:
        hlen = int(blob[len(MAGIC) + 1:nl])
    except ValueError:
        raise HeaderParseError("bad header length field", len(MAGIC) + 1) from None
    start = nl + 1
    if start + hlen > len(blob):
        raise TruncatedPayloadError(f"header declares {hlen} bytes but only {len(blob) - start} remain")
    try:
        h = json.loads(blob[start:start + hlen].decode("utf-8"))
    except UnicodeDecodeError as e:
        raise HeaderParseError("header is not UTF-8", start + e.start) from None
    except json.JSONDecodeError as e:
        raise HeaderParseError(f"corrupted header: {e.msg}", start + e.pos) from None
    if not isinstance(h, dict):
        raise HeaderParseError("header is not an object", start)
    for key in ("schema_version", "shape", "dtype", "axis_order", "voxel_size"):
        if key not in h:
            raise HeaderParseError(f"header lacks {key!r}", start)
    if h["schema_version"] != SCHEMA_VERSION:
        raise SchemaVersionError(f"schema version {h['schema_version']} unsupported (reader is {SCHEMA_VERSION})")
    if h["dtype"] not in DTYPES:
        raise DtypeMismatchError(f"unknown stored dtype {h['dtype']!r}")
    if expect_dtype is not None and h["dtype"] != expect_dtype:
        raise DtypeMismatchError(f"expected {expect_dtype}, file holds {h['dtype']}")
    kind = h.get("kind", "image")
    if expect_kind is not None and kind != expect_kind:
        raise DtypeMismatchError(f"expected a {expect_kind} volume, file holds {kind}")
    dt = DTYPES[h["dtype"]]
    shape = tuple(int(n) for n in h["shape"])
    need = int(np.prod(shape)) * dt.itemsize
    payload = blob[start + hlen:]
    if len(payload) < need:
        raise TruncatedPayloadError(f"payload has {len(payload)} bytes, header requires {need}")
    if len(payload) > need:
        raise ContainerError(f"{len(payload) - need} trailing bytes after payload")
    data = np.frombuffer(payload, dtype=dt).reshape(shape).copy()
    scheme = h.get("scheme")
    return Volume(
        data=data,
        kind=kind,
        axis_order=tuple(h["axis_order"]),
        voxel_size=tuple(h["voxel_size"]),
        bvals=None if scheme is None else np.asarray(scheme["bvals"], dtype=float),
        bvecs=None if scheme is None else np.asarray(scheme["bvecs"], dtype=float),
        provenance=h.get("provenance", {}),
    )


def read_container(path, expect_dtype=None, expect_kind=None) -> Volume:
    with open(path, "rb") as fh:
        blob = fh.read()
    return decode_container(blob, expect_dtype, expect_kind)


def read_header(path) -> dict:
    """Parse only the header (no payload validation)."""
    with open(path, "rb") as fh:
        first = fh.readline(64)
        try:
            hlen = int(first[len(MAGIC) + 1:])
        except ValueError:
            raise HeaderParseError("bad header length field", len(MAGIC) + 1) from None
        raw = fh.read(hlen)
    try:
        return json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise HeaderParseError(f"corrupted header: {e}", len(first) + getattr(e, "pos", 0)) from None
