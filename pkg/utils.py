import hashlib
from typing import Iterable
import numpy as np


def format_float(value: float) -> str:
    """Canonical decimal used by every CSV writer: 9 significant digits."""
    text = "%.9g" % float(value)
    return "0" if text == "-0" else text


def canonical_float(value: float) -> float:
    """The value a CSV round-trip would hand back."""
    return float(format_float(value))


def array_fingerprint(arrays: Iterable[np.ndarray]) -> str:
    """sha256 over shapes and little-endian float64 payloads, in iteration order."""
    digest = hashlib.sha256()
    for array in arrays:
        array = np.ascontiguousarray(array, dtype="<f8")
        digest.update(str(array.shape).encode("ascii"))
        digest.update(array.tobytes())
    return digest.hexdigest()


def file_sha256(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def stable_rank(key: str) -> int:
    """Process-independent integer for ordering by hash (``hash()`` is salted)."""
    return int(hashlib.sha256(key.encode("utf-8")).hexdigest()[:16], 16)
