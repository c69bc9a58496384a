"""Binary 8-bit greyscale PGM (P5, maxval 255)."""
import numpy as np


def to_gray8(values):
    """Map [0, 1] linearly onto 0..255, rounding half to even."""
    v = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    return np.rint(255.0 * v).astype(np.uint8)


def write_pgm(path, values):
    """Write a 2-D array of values in [0, 1] as a P5 image."""
    img = to_gray8(values)
    if img.ndim != 2:
        raise ValueError(f"PGM needs a 2-D map, got shape {img.shape}")
    h, w = img.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(img.tobytes())


def read_pgm(path):
    """Read a P5 image written by :func:`write_pgm` (comments allowed in the header)."""
    with open(path, "rb") as f:
        data = f.read()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError(f"{path}: truncated PGM header")
        tokens.append(data[start:pos])
    if tokens[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM (magic {tokens[0]!r})")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise ValueError(f"{path}: only maxval 255 is supported, got {maxval}")
    pixels = data[pos + 1:]
    if len(pixels) != w * h:
        raise ValueError(f"{path}: expected {w * h} pixel bytes, found {len(pixels)}")
    return np.frombuffer(pixels, dtype=np.uint8).reshape(h, w).copy()
