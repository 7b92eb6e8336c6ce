"""Binary tensor container used across the repo.

Record layout (all integers little-endian):

    magic   4 bytes  b"DV4D"
    version u16      currently 1
    dtype   u8       tag, see _DTYPE_TAGS
    rank    u8
    extents rank*u64
    payload prod(extents)*itemsize bytes, C order, little-endian
    crc     u32      zlib.crc32 over everything above

Round trips are bit-exact, including NaN payloads, because the payload
is raw bytes.  A bundle is a plain concatenation of records plus a JSON
manifest sidecar (same path + ".json") naming each record in order.
"""

import json
import struct
import zlib
from pathlib import Path

import numpy as np

MAGIC = b"DV4D"
VERSION = 1

_DTYPE_TAGS = {
    0: np.dtype("<f4"),
    1: np.dtype("<f8"),
    2: np.dtype("|u1"),
    3: np.dtype("<i4"),
    4: np.dtype("<i8"),
    5: np.dtype("|b1"),
}
_TAG_FOR_KIND = {dt.str: tag for tag, dt in _DTYPE_TAGS.items()}
# native-order aliases map to the same tags
for _tag, _dt in list(_DTYPE_TAGS.items()):
    _TAG_FOR_KIND.setdefault(np.dtype(_dt.type).str, _tag)


class ContainerError(Exception):
    """Base for all container failures."""


class FormatError(ContainerError):
    """Bad magic, unknown dtype tag, or malformed structure."""


class VersionError(ContainerError):
    """Record version not supported by this reader."""


class TruncationError(ContainerError):
    """Data ended early.  `position` is the byte offset where it ran out."""

    def __init__(self, message, position):
        super().__init__(f"{message} (at byte {position})")
        self.position = position


class ChecksumError(ContainerError):
    """Stored CRC32 does not match the record contents."""


def tensor_bytes(arr):
    """Serialize one ndarray to a DV4D record."""
    arr = np.asarray(arr)
    if not arr.flags["C_CONTIGUOUS"]:
        arr = np.ascontiguousarray(arr)  # keeps 0-d as 0-d: already contiguous
    tag = _TAG_FOR_KIND.get(arr.dtype.str)
    if tag is None:
        tag = _TAG_FOR_KIND.get(np.dtype(arr.dtype.type).str)
    if tag is None:
        raise FormatError(f"unsupported dtype {arr.dtype}")
    le = arr.astype(_DTYPE_TAGS[tag], copy=False)
    head = MAGIC + struct.pack("<HBB", VERSION, tag, arr.ndim)
    head += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    body = head + le.tobytes(order="C")
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def tensor_from_bytes(buf, offset=0):
    """Parse one record starting at `offset`.  Returns (array, next_offset)."""
    def need(n, what):
        if offset_ + n > len(buf):
            raise TruncationError(f"record {what} cut short", len(buf))
        return offset_ + n

    offset_ = offset
    end = need(4, "magic")
    if buf[offset_:end] != MAGIC:
        raise FormatError(f"bad magic {buf[offset_:end]!r} at byte {offset_}")
    offset_ = end
    end = need(4, "header")
    version, tag, rank = struct.unpack("<HBB", buf[offset_:end])
    if version != VERSION:
        raise VersionError(f"version {version}, reader supports {VERSION}")
    dtype = _DTYPE_TAGS.get(tag)
    if dtype is None:
        raise FormatError(f"unknown dtype tag {tag}")
    offset_ = end
    end = need(8 * rank, "extents")
    shape = struct.unpack(f"<{rank}Q", buf[offset_:end])
    offset_ = end
    count = 1
    for s in shape:
        count *= s
    end = need(count * dtype.itemsize, "payload")
    payload_end = end
    offset_ = end
    end = need(4, "checksum")
    (stored,) = struct.unpack("<I", buf[offset_:end])
    actual = zlib.crc32(buf[offset : payload_end]) & 0xFFFFFFFF
    if stored != actual:
        raise ChecksumError(f"crc {actual:#010x} != stored {stored:#010x}")
    flat = np.frombuffer(buf, dtype=dtype, count=count,
                         offset=payload_end - count * dtype.itemsize)
    return flat.reshape(shape).copy(), end


def write_tensor(path, arr):
    Path(path).write_bytes(tensor_bytes(arr))


def read_tensor(path):
    arr, end = tensor_from_bytes(Path(path).read_bytes())
    return arr


def read_records(buf):
    """Parse back-to-back records until the buffer is exhausted."""
    out, offset = [], 0
    while offset < len(buf):
        arr, offset = tensor_from_bytes(buf, offset)
        out.append(arr)
    return out


def _manifest_path(path):
    return Path(str(path) + ".json")


def write_bundle(path, named, meta=None):
    """Write named tensors as concatenated records plus a JSON manifest.

    `named` preserves insertion order; the manifest pins name, shape and
    dtype per record so a reader can detect drops or swaps.
    """
    path = Path(path)
    entries, blob = [], b""
    for name, arr in named.items():
        arr = np.asarray(arr)
        blob += tensor_bytes(arr)
        entries.append({"name": name, "shape": list(arr.shape),
                        "dtype": np.dtype(arr.dtype).name})
    path.write_bytes(blob)
    manifest = {"format": "dv4d-bundle", "version": VERSION,
                "tensors": entries, "meta": meta or {}}
    _manifest_path(path).write_text(json.dumps(manifest, indent=1, sort_keys=True))


def read_bundle(path):
    """Inverse of write_bundle.  Returns (dict name -> array, meta)."""
    path = Path(path)
    mpath = _manifest_path(path)
    if not mpath.exists():
        raise FormatError(f"missing manifest {mpath}")
    manifest = json.loads(mpath.read_text())
    if manifest.get("format") != "dv4d-bundle":
        raise FormatError(f"not a bundle manifest: {mpath}")
    if manifest.get("version") != VERSION:
        raise VersionError(f"bundle version {manifest.get('version')}")
    arrays = read_records(path.read_bytes())
    entries = manifest["tensors"]
    if len(arrays) != len(entries):
        raise FormatError(
            f"manifest lists {len(entries)} tensors, file holds {len(arrays)}")
    named = {}
    for entry, arr in zip(entries, arrays):
        if list(arr.shape) != entry["shape"]:
            raise FormatError(
                f"tensor {entry['name']}: shape {list(arr.shape)} != "
                f"manifest {entry['shape']}")
        if np.dtype(arr.dtype).name != entry["dtype"]:
            raise FormatError(
                f"tensor {entry['name']}: dtype {arr.dtype} != "
                f"manifest {entry['dtype']}")
        named[entry["name"]] = arr
    return named, manifest.get("meta", {})
