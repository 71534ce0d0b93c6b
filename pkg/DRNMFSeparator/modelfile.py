"""
modelfile.py

Self-describing container for trained models ("DRNMF1" format).

Layout (all integers little-endian):
    b"DRNMF1\\n"
    uint32 metadata length, metadata as UTF-8 JSON text (sorted keys)
    uint32 number of arrays
    per array:
        uint16 name length, name (UTF-8)
        uint8 ndim, uint64 x ndim shape
        float64 little-endian data, C order

Saving the same arrays and metadata twice produces identical bytes, and
loading returns bit-identical arrays.
"""

import json
import struct

import numpy as np

from errors import AudioIOError

MAGIC = b"DRNMF1\n"
DTYPE = np.dtype("<f8")


def _pack_array(name, array):
    data = np.ascontiguousarray(array, dtype=DTYPE)
    encoded = name.encode("utf-8")
    header = struct.pack("<H", len(encoded)) + encoded
    header += struct.pack("<B", data.ndim) + struct.pack(f"<{data.ndim}Q", *data.shape)
    return header + data.tobytes()


def save_model(path, arrays, metadata):
    """
    Write named float64 arrays plus a metadata dictionary.

    :param arrays: mapping name -> ndarray (written in sorted name order)
    :param metadata: JSON-serializable mapping
    """
    meta = json.dumps(metadata, sort_keys=True).encode("utf-8")
    payload = [MAGIC, struct.pack("<I", len(meta)), meta, struct.pack("<I", len(arrays))]
    payload += [_pack_array(name, arrays[name]) for name in sorted(arrays)]
    try:
        with open(path, "wb") as f:
            f.write(b"".join(payload))
    except OSError as e:
        raise AudioIOError(path, f"cannot write model file: {e}") from e


class _Reader:
    def __init__(self, path, blob):
        self.path = path
        self.blob = blob
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.blob):
            raise ValueError(f"{self.path}: truncated model file")
        chunk = self.blob[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_model(path):
    """
    :return: (arrays dict, metadata dict)
    """
    try:
        with open(path, "rb") as f:
            blob = f.read()
    except OSError as e:
        raise AudioIOError(path, f"cannot read model file: {e}") from e

    reader = _Reader(path, blob)
    if reader.take(len(MAGIC)) != MAGIC:
        raise ValueError(f"{path}: not a DRNMF1 model file")
    (meta_len,) = reader.unpack("<I")
    metadata = json.loads(reader.take(meta_len).decode("utf-8"))
    (n_arrays,) = reader.unpack("<I")

    arrays = {}
    for _ in range(n_arrays):
        (name_len,) = reader.unpack("<H")
        name = reader.take(name_len).decode("utf-8")
        (ndim,) = reader.unpack("<B")
        shape = reader.unpack(f"<{ndim}Q") if ndim else ()
        count = int(np.prod(shape)) if ndim else 1
        data = np.frombuffer(reader.take(count * DTYPE.itemsize), dtype=DTYPE)
        arrays[name] = data.reshape(shape).copy()
    if reader.pos != len(blob):
        raise ValueError(f"{path}: trailing bytes after the last array")
    return arrays, metadata
