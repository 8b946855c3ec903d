"""Named float32 tensor maps and their canonical little-endian wire layout.

Layout (all integers little-endian uint32)::

    count
    repeated count times, sorted by name:
        name_len, name (UTF-8), ndim, dim_0 .. dim_{ndim-1}
    payload: every tensor's values as float32, row-major, in the same order

The payload is exactly ``4 * sum(prod(dims))`` bytes and is the tail of the
buffer. Serialization is deterministic, so two equal models always produce
identical bytes.
"""

from __future__ import annotations

import hashlib
import struct
from typing import Iterable, Mapping

import numpy as np

_U32 = struct.Struct("<I")
MAX_NDIM = 16


class MalformedFrame(ValueError):
    """A buffer does not decode as a complete, well-formed structure."""


class ShapeMismatch(ValueError):
    """Tensors that must line up do not."""


class ModelWeights(dict):
    """Mapping of tensor name to a float32 ``ndarray``.

    Values are copied and coerced on insertion, so callers never share
    buffers with the container.
    """

    def __init__(self, tensors: Mapping[str, object] | Iterable = (), **kwargs):
        super().__init__()
        self.update(tensors, **kwargs)

    def __setitem__(self, name, value):
        super().__setitem__(str(name), np.array(value, dtype=np.float32, order="C"))

    def update(self, other=(), **kwargs):
        items = other.items() if hasattr(other, "items") else other
        for k, v in items:
            self[k] = v
        for k, v in kwargs.items():
            self[k] = v

    def copy(self) -> "ModelWeights":
        return ModelWeights(self)

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {k: v.shape for k, v in self.items()}

    @property
    def num_params(self) -> int:
        return int(sum(v.size for v in self.values()))

    def bit_equal(self, other: Mapping[str, np.ndarray]) -> bool:
        if set(self) != set(other):
            return False
        for k, v in self.items():
            o = np.asarray(other[k])
            if o.dtype != np.float32 or o.shape != v.shape or o.tobytes() != v.tobytes():
                return False
        return True

    def __repr__(self):
        inner = ", ".join(f"{k}:{tuple(v.shape)}" for k, v in sorted(self.items()))
        return f"ModelWeights({inner})"


def serialize_weights(w: Mapping[str, np.ndarray]) -> bytes:
    names = sorted(w)
    header = [_U32.pack(len(names))]
    payload = []
    for name in names:
        arr = np.asarray(w[name], dtype="<f4", order="C")
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"tensor {name!r} contains non-finite values")
        if arr.ndim > MAX_NDIM:
            raise ValueError(f"tensor {name!r} has {arr.ndim} dims (max {MAX_NDIM})")
        raw = name.encode("utf-8")
        header.append(_U32.pack(len(raw)))
        header.append(raw)
        header.append(struct.pack(f"<{1 + arr.ndim}I", arr.ndim, *arr.shape))
        payload.append(arr.tobytes())
    return b"".join(header + payload)


def deserialize_weights(buf: bytes) -> ModelWeights:
    view = memoryview(buf)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise MalformedFrame(f"truncated weight buffer at byte {pos} (need {n} more)")
        out = view[pos:pos + n]
        pos += n
        return out

    (count,) = _U32.unpack(take(4))
    specs = []
    total = 0
    for _ in range(count):
        (name_len,) = _U32.unpack(take(4))
        try:
            name = bytes(take(name_len)).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise MalformedFrame("tensor name is not UTF-8") from exc
        (ndim,) = _U32.unpack(take(4))
        if ndim > MAX_NDIM:
            raise MalformedFrame(f"tensor {name!r} claims {ndim} dims")
        dims = struct.unpack(f"<{ndim}I", take(4 * ndim))
        size = int(np.prod(dims, dtype=np.int64)) if dims else 1
        specs.append((name, dims, size))
        total += size
    expected = 4 * total
    remaining = len(view) - pos
    if remaining < expected:
        raise MalformedFrame(f"payload truncated: {remaining} bytes, expected {expected}")
    if remaining > expected:
        raise MalformedFrame(f"payload oversized: {remaining} bytes, expected {expected}")
    out = ModelWeights()
    for name, dims, size in specs:
        arr = np.reshape(np.frombuffer(view, dtype="<f4", count=size, offset=pos), dims)
        pos += 4 * size
        out[name] = arr
    return out


def weights_digest(w: Mapping[str, np.ndarray]) -> str:
    return hashlib.sha256(serialize_weights(w)).hexdigest()


def check_same_shapes(models: Iterable[Mapping[str, np.ndarray]]) -> dict[str, tuple[int, ...]]:
    """Return the common shape map or raise ShapeMismatch."""
    ref = None
    for m in models:
        shapes = {k: np.shape(v) for k, v in m.items()}
        if ref is None:
            ref = shapes
        elif shapes != ref:
            raise ShapeMismatch(f"shape maps differ: {ref} vs {shapes}")
    if ref is None:
        raise ValueError("no models given")
    return ref
