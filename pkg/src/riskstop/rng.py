"""Counter-based random substreams.

Each substream is a Philox generator keyed by ``(seed, stream id)``, so the
numbers drawn for a given path never depend on how work is scheduled.
"""
import numpy as np
from scipy.special import ndtri

_MASK64 = (1 << 64) - 1

# stream tags
OUTER = 0
INNER = 1

_PATH_BITS = 36
_DATE_BITS = 20


def stream_id(tag: int, path: int, date: int = 0) -> int:
    if not (0 <= path < 1 << _PATH_BITS and 0 <= date < 1 << _DATE_BITS and 0 <= tag < 256):
        raise ValueError("substream index out of range")
    return (tag << (_PATH_BITS + _DATE_BITS)) | (path << _DATE_BITS) | date


def substream(seed: int, tag: int, path: int, date: int = 0) -> np.random.Generator:
    key = (int(seed) & _MASK64) | (stream_id(tag, path, date) << 64)
    return np.random.Generator(np.random.Philox(key=key))


def normals(gen: np.random.Generator, shape) -> np.ndarray:
    """Standard normals by inverse CDF of open-interval uniforms."""
    u = gen.random(shape)
    u += 2.0**-54
    return ndtri(u)
