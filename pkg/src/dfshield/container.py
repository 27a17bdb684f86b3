"""Binary container shared by checkpoints (``.dfsc``) and datasets (``.dfsd``).

Layout::

    magic          4 bytes ("DFS1" or "DFSD")
    header_len     uint64, little-endian
    header         UTF-8 JSON, ``header_len`` bytes, keys sorted
    payload        tensors back to back, in header["tensors"] order

Each directory entry in ``header["tensors"]`` is ``{"name", "shape",
"dtype"}`` with dtype ``"<f8"`` (float64) or ``"<i8"`` (int64).  The header
also carries ``"format_version"``.
"""
import json
import struct

import numpy as np

FORMAT_VERSION = 1
_DTYPES = {"<f8": np.dtype("<f8"), "<i8": np.dtype("<i8")}


class ContainerError(ValueError):
    pass


class BadMagicError(ContainerError):
    pass


class VersionMismatchError(ContainerError):
    pass


class TruncatedFileError(ContainerError):
    pass


def encode(magic, meta, tensors):
    """Serialize ``meta`` (JSON-able dict) and ordered ``tensors`` to bytes."""
    directory = []
    chunks = []
    for name, arr in tensors:
        arr = np.asarray(arr)
        dtype = "<i8" if np.issubdtype(arr.dtype, np.integer) else "<f8"
        arr = np.ascontiguousarray(arr, dtype=_DTYPES[dtype])
        directory.append({"name": name, "shape": list(arr.shape), "dtype": dtype})
        chunks.append(arr.tobytes())
    header = dict(meta)
    header["format_version"] = FORMAT_VERSION
    header["tensors"] = directory
    raw = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return magic + struct.pack("<Q", len(raw)) + raw + b"".join(chunks)


def decode(magic, blob):
    """Inverse of :func:`encode`; returns ``(header, {name: array})``."""
    if len(blob) < 4 or blob[:4] != magic:
        raise BadMagicError(f"bad magic: expected {magic!r}, got {bytes(blob[:4])!r}")
    if len(blob) < 12:
        raise TruncatedFileError("truncated file: header length missing")
    (hlen,) = struct.unpack("<Q", blob[4:12])
    if len(blob) < 12 + hlen:
        raise TruncatedFileError("truncated file: header incomplete")
    try:
        header = json.loads(blob[12:12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerError(f"corrupt header: {exc}") from exc
    version = header.get("format_version")
    if version != FORMAT_VERSION:
        raise VersionMismatchError(
            f"version mismatch: file has {version}, reader supports {FORMAT_VERSION}")
    pos = 12 + hlen
    tensors = {}
    for entry in header["tensors"]:
        dt = _DTYPES[entry["dtype"]]
        shape = tuple(entry["shape"])
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        if len(blob) < pos + nbytes:
            raise TruncatedFileError(f"truncated file: tensor {entry['name']!r} incomplete")
        tensors[entry["name"]] = np.frombuffer(blob, dtype=dt, count=nbytes // dt.itemsize,
                                               offset=pos).reshape(shape).copy()
        pos += nbytes
    if pos != len(blob):
        raise ContainerError(f"{len(blob) - pos} trailing bytes after payload")
    return header, tensors


def write(path, magic, meta, tensors):
    blob = encode(magic, meta, tensors)
    with open(path, "wb") as fh:
        fh.write(blob)
    return blob


def read(path, magic):
    with open(path, "rb") as fh:
        return decode(magic, fh.read())
