"""Dense (N, C, H, W) float tensors: the few whole-tensor ops the SE math needs,
plus the ``.tns`` binary format.

Tensors are plain :class:`numpy.ndarray` objects. The functions here never
broadcast beyond what they document and never mutate their inputs.
"""
import struct

import numpy as np

MAGIC = b"FTNS"
DTYPE = np.float32


class InvalidShapeError(ValueError):
    """Raised when tensor extents do not satisfy an operation's contract."""


class TensorFormatError(ValueError):
    """Raised when a ``.tns`` stream is malformed.

    ``offset`` is the byte position at which parsing failed.
    """

    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


def as_nchw(x):
    """Promote a rank-1..4 array to rank 4 by prepending unit axes."""
    x = np.asarray(x)
    if not 1 <= x.ndim <= 4:
        raise InvalidShapeError(f"expected rank 1-4, got shape {x.shape}")
    return x.reshape((1,) * (4 - x.ndim) + x.shape)


def _check_rank4(u, name="u"):
    if u.ndim != 4:
        raise InvalidShapeError(f"{name} must be (N, C, H, W), got shape {u.shape}")


def global_spatial_mean(u):
    """Average each feature map over its spatial extent.

    Returns an ``(N, C, 1, 1)`` array, one channel descriptor per batch item.
    """
    u = np.asarray(u)
    _check_rank4(u)
    if u.shape[2] < 1 or u.shape[3] < 1:
        raise InvalidShapeError(f"empty spatial extent in shape {u.shape}")
    return u.mean(axis=(2, 3), keepdims=True)


def scale_channels(u, s):
    """Multiply channel ``k`` of ``u`` by ``s[k]``.

    ``s`` may be ``(C,)``, ``(1, C, 1, 1)`` or per-batch ``(N, C, 1, 1)``.
    """
    u = np.asarray(u)
    s = np.asarray(s)
    _check_rank4(u)
    n, c = u.shape[:2]
    if s.ndim == 1:
        s = s.reshape(1, -1, 1, 1)
    if s.ndim != 4 or s.shape[1] != c or s.shape[2:] != (1, 1) or s.shape[0] not in (1, n):
        raise InvalidShapeError(f"channel scale of shape {s.shape} does not fit {u.shape}")
    return u * s


def scale_spatial(u, m):
    """Multiply every channel of ``u`` at ``(i, j)`` by ``m[i, j]``.

    ``m`` may be ``(H, W)``, ``(1, 1, H, W)`` or per-batch ``(N, 1, H, W)``.
    """
    u = np.asarray(u)
    m = np.asarray(m)
    _check_rank4(u)
    n, _, h, w = u.shape
    if m.ndim == 2:
        m = m.reshape(1, 1, *m.shape)
    if m.ndim != 4 or m.shape[1] != 1 or m.shape[2:] != (h, w) or m.shape[0] not in (1, n):
        raise InvalidShapeError(f"spatial map of shape {m.shape} does not fit {u.shape}")
    return u * m


_ELEMENTWISE = {"add": np.add, "mul": np.multiply, "max": np.maximum}


def elementwise(op, a, b):
    a = np.asarray(a)
    b = np.asarray(b)
    if op not in _ELEMENTWISE:
        raise ValueError(f"unknown elementwise op {op!r}")
    if a.shape != b.shape:
        raise InvalidShapeError(f"shape mismatch {a.shape} vs {b.shape}")
    return _ELEMENTWISE[op](a, b)


def concat_channels(a, b):
    a = np.asarray(a)
    b = np.asarray(b)
    _check_rank4(a, "a")
    _check_rank4(b, "b")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise InvalidShapeError(f"cannot concatenate {a.shape} and {b.shape} along channels")
    return np.concatenate([a, b], axis=1)


# -- .tns I/O ---------------------------------------------------------------


def encode_tensor(t):
    t = np.asarray(t)
    if not 1 <= t.ndim <= 4:
        raise InvalidShapeError(f"can only serialize rank 1-4 tensors, got {t.shape}")
    header = MAGIC + struct.pack(f"<I{t.ndim}I", t.ndim, *t.shape)
    return header + np.ascontiguousarray(t, dtype="<f4").tobytes()


def decode_tensor(buf, offset=0):
    """Decode one tensor from ``buf`` starting at ``offset``.

    Returns ``(tensor, next_offset)`` so records can be read back to back.
    """
    if len(buf) - offset < 8:
        raise TensorFormatError("truncated header", offset)
    if buf[offset:offset + 4] != MAGIC:
        raise TensorFormatError(f"bad magic {bytes(buf[offset:offset + 4])!r}", offset)
    (rank,) = struct.unpack_from("<I", buf, offset + 4)
    if not 1 <= rank <= 4:
        raise TensorFormatError(f"rank {rank} outside 1-4", offset + 4)
    pos = offset + 8
    if len(buf) - pos < 4 * rank:
        raise TensorFormatError("truncated extents", pos)
    shape = struct.unpack_from(f"<{rank}I", buf, pos)
    pos += 4 * rank
    if any(e == 0 for e in shape):
        raise TensorFormatError(f"zero extent in shape {shape}", pos - 4 * rank)
    nbytes = 4 * int(np.prod(shape))
    if len(buf) - pos < nbytes:
        raise TensorFormatError(
            f"payload needs {nbytes} bytes, only {len(buf) - pos} available", pos)
    data = np.frombuffer(buf, dtype="<f4", count=nbytes // 4, offset=pos)
    return data.reshape(shape).astype(DTYPE), pos + nbytes


def write_tensor(t, path):
    with open(path, "wb") as f:
        f.write(encode_tensor(t))


def read_tensor(path):
    with open(path, "rb") as f:
        buf = f.read()
    t, end = decode_tensor(buf)
    if end != len(buf):
        raise TensorFormatError(f"{len(buf) - end} trailing bytes after payload", end)
    return t


def write_tensors(tensors, path):
    """Write a u32 record count followed by consecutive tensor records."""
    tensors = list(tensors)
    with open(path, "wb") as f:
        f.write(struct.pack("<I", len(tensors)))
        for t in tensors:
            f.write(encode_tensor(t))


def read_tensors(path):
    with open(path, "rb") as f:
        buf = f.read()
    if len(buf) < 4:
        raise TensorFormatError("truncated record count", 0)
    (count,) = struct.unpack_from("<I", buf, 0)
    out = []
    pos = 4
    for _ in range(count):
        t, pos = decode_tensor(buf, pos)
        out.append(t)
    if pos != len(buf):
        raise TensorFormatError(f"{len(buf) - pos} trailing bytes after {count} records", pos)
    return out
