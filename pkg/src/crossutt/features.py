"""Binary feature files: ``uint32 T, uint32 D`` (little-endian) then ``T*D`` float32."""

from __future__ import annotations

import struct

import numpy as np

from .errors import DimensionError

_HEADER = struct.Struct("<II")


def write_features(path, features):
    features = np.asarray(features)
    if features.ndim != 2:
        raise DimensionError(f"features must be 2-D, got {features.shape}")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(*features.shape))
        fh.write(features.astype("<f4").tobytes())


def read_features(path) -> np.ndarray:
    """Load a feature file, widened to float64. Missing files raise ``OSError``."""
    with open(path, "rb") as fh:
        header = fh.read(_HEADER.size)
        if len(header) != _HEADER.size:
            raise DimensionError(f"{path}: truncated header")
        t, d = _HEADER.unpack(header)
        body = np.frombuffer(fh.read(), dtype="<f4")
    if body.size != t * d:
        raise DimensionError(f"{path}: header says {t}x{d} but holds {body.size} values")
    return body.reshape(t, d).astype(np.float64)
