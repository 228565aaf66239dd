"""GFTENSOR v1 tensor files and PGM (P2) previews.

GFTENSOR v1 (byte-exact):
    GFTENSOR v1 f64 <rank> <d0> <d1> ...\\n
    <row-major little-endian float64 payload>

PGM preview: plain P2 with maxval 255; values are min/max normalized and the
normalization is recorded in a trailing comment line `# min=<m> max=<M>`.
"""

from __future__ import annotations

import numpy as np


class TensorIOError(Exception):
    pass


def save_tensor(path, array: np.ndarray) -> None:
    arr = np.ascontiguousarray(array, dtype=np.float64)
    dims = " ".join(str(d) for d in arr.shape)
    header = f"GFTENSOR v1 f64 {arr.ndim}{' ' + dims if dims else ''}\n".encode("ascii")
    with open(path, "wb") as f:
        f.write(header)
        f.write(arr.astype("<f8").tobytes())


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as f:
        blob = f.read()
    nl = blob.find(b"\n")
    if nl < 0:
        raise TensorIOError("missing GFTENSOR header")
    fields = blob[:nl].decode("ascii").split(" ")
    if fields[:3] != ["GFTENSOR", "v1", "f64"]:
        raise TensorIOError(f"bad GFTENSOR header {fields!r}")
    rank = int(fields[3])
    shape = tuple(int(d) for d in fields[4 : 4 + rank])
    if len(shape) != rank:
        raise TensorIOError("GFTENSOR rank/dims mismatch")
    data = np.frombuffer(blob[nl + 1 :], dtype="<f8")
    expected = int(np.prod(shape, dtype=np.int64)) if rank else 1
    if data.size != expected:
        raise TensorIOError(f"payload has {data.size} values, expected {expected}")
    return data.reshape(shape).astype(np.float64)


def save_pgm(path, image: np.ndarray) -> None:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise TensorIOError("PGM preview expects a 2-D field")
    lo = float(img.min())
    hi = float(img.max())
    scale = 255.0 / (hi - lo) if hi > lo else 0.0
    pix = np.round((img - lo) * scale).astype(np.int64)
    rows = "\n".join(" ".join(str(v) for v in row) for row in pix)
    text = f"P2\n{img.shape[1]} {img.shape[0]}\n255\n{rows}\n# min={lo!r} max={hi!r}\n"
    with open(path, "w", encoding="ascii") as f:
        f.write(text)
