"""Flat parameter vectors with named segments, plus GFPARAMS v1 file I/O.

Format (byte-exact):
    GFPARAMS v1\\n
    <name> <offset> <d0[,d1,...]>\\n     (one line per segment)
    \\n                                   (blank line ends the header)
    <little-endian float64 payload, one value per vector entry>
"""

from __future__ import annotations

import re

import numpy as np

_NAME_RE = re.compile(r"^[A-Za-z0-9_.\-]+$")


class ParamVectorError(Exception):
    pass


class ParamVector:
    """A 1-D float64 vector whose disjoint named segments cover it exactly."""

    def __init__(self, data: np.ndarray, segments: dict[str, tuple[int, tuple[int, ...]]]):
        data = np.ascontiguousarray(data, dtype=np.float64)
        if data.ndim != 1:
            raise ParamVectorError("data must be 1-D")
        covered = 0
        expected_offset = 0
        for name, (offset, shape) in segments.items():
            if not _NAME_RE.match(name):
                raise ParamVectorError(f"bad segment name {name!r}")
            if not shape:
                raise ParamVectorError(f"segment {name!r} must have rank >= 1")
            if offset != expected_offset:
                raise ParamVectorError(f"segment {name!r} leaves a gap or overlap")
            size = int(np.prod(shape, dtype=np.int64))
            covered += size
            expected_offset += size
        if covered != data.size:
            raise ParamVectorError(
                f"segments cover {covered} entries but vector has {data.size}"
            )
        self.data = data
        self.segments = dict(segments)

    # ------------------------------------------------------------- construction
    @classmethod
    def from_dict(cls, arrays: dict[str, np.ndarray]) -> "ParamVector":
        """Pack named arrays (insertion order) into one flat vector."""
        segments = {}
        chunks = []
        offset = 0
        for name, arr in arrays.items():
            arr = np.asarray(arr, dtype=np.float64)
            if arr.ndim == 0:
                arr = arr.reshape(1)
            segments[name] = (offset, arr.shape)
            chunks.append(arr.ravel())
            offset += arr.size
        data = np.concatenate(chunks) if chunks else np.zeros(0)
        return cls(data, segments)

    # ------------------------------------------------------------- access
    def get(self, name: str) -> np.ndarray:
        """View of one segment, reshaped; writes through to the vector."""
        offset, shape = self._segment(name)
        size = int(np.prod(shape, dtype=np.int64))
        return self.data[offset : offset + size].reshape(shape)

    def set(self, name: str, value) -> None:
        offset, shape = self._segment(name)
        arr = np.asarray(value, dtype=np.float64)
        if arr.shape != shape and arr.size == int(np.prod(shape, dtype=np.int64)):
            arr = arr.reshape(shape)
        if arr.shape != shape:
            raise ParamVectorError(f"segment {name!r} expects shape {shape}, got {arr.shape}")
        size = arr.size
        self.data[offset : offset + size] = arr.ravel()

    def to_dict(self) -> dict[str, np.ndarray]:
        return {name: self.get(name).copy() for name in self.segments}

    def _segment(self, name):
        if name not in self.segments:
            raise ParamVectorError(f"no segment named {name!r}")
        return self.segments[name]

    # ------------------------------------------------------------- utilities
    def copy(self) -> "ParamVector":
        return ParamVector(self.data.copy(), self.segments)

    def zeros_like(self) -> "ParamVector":
        return ParamVector(np.zeros_like(self.data), self.segments)

    def __len__(self):
        return self.data.size

    def __contains__(self, name):
        return name in self.segments

    # ------------------------------------------------------------- GFPARAMS v1
    def save(self, path) -> None:
        lines = ["GFPARAMS v1"]
        for name, (offset, shape) in self.segments.items():
            dims = ",".join(str(d) for d in shape)
            lines.append(f"{name} {offset} {dims}")
        header = ("\n".join(lines) + "\n\n").encode("ascii")
        with open(path, "wb") as f:
            f.write(header)
            f.write(self.data.astype("<f8").tobytes())

    @classmethod
    def load(cls, path) -> "ParamVector":
        with open(path, "rb") as f:
            blob = f.read()
        sep = blob.find(b"\n\n")
        if sep < 0:
            raise ParamVectorError("missing GFPARAMS header terminator")
        header = blob[:sep].decode("ascii").split("\n")
        if header[0] != "GFPARAMS v1":
            raise ParamVectorError(f"bad magic line {header[0]!r}")
        segments: dict[str, tuple[int, tuple[int, ...]]] = {}
        for line in header[1:]:
            name, offset, dims = line.split(" ")
            shape = tuple(int(d) for d in dims.split(","))
            segments[name] = (int(offset), shape)
        payload = blob[sep + 2 :]
        data = np.frombuffer(payload, dtype="<f8").astype(np.float64)
        return cls(data, segments)
