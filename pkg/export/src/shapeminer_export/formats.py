"""Writers for the binary interchange formats consumed by shapeminer.

This package deliberately does not import shapeminer: the two components
share nothing but files, so the formats are re-stated here and pinned by a
cross-component byte-compatibility test.

Feature tensor format ("3DMF"):
    bytes 0-3   magic b"3DMF"
    bytes 4-19  little-endian uint32: version(=1), rows, cols, depth
    bytes 20-   rows*cols*depth little-endian float32, row-major,
                channel axis fastest

Masks are 8-bit grayscale PNG; any value > 127 reads back as foreground.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
from PIL import Image

FEATURE_MAGIC = b"3DMF"
FEATURE_VERSION = 1


def write_feature_tensor(data: np.ndarray, path) -> None:
    """Write a (rows, cols, depth) float array in the 3DMF format."""
    arr = np.ascontiguousarray(data, dtype="<f4")
    if arr.ndim != 3:
        raise ValueError(f"feature tensor must be 3-D, got shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise ValueError("feature tensor contains non-finite values")
    header = FEATURE_MAGIC + struct.pack("<4I", FEATURE_VERSION, *arr.shape)
    Path(path).write_bytes(header + arr.tobytes())


def write_embedding_stack(vectors: np.ndarray, path) -> None:
    """Write per-augmentation global vectors as a (n_aug, 1, dim) tensor."""
    vecs = np.asarray(vectors, dtype=np.float32)
    if vecs.ndim != 2:
        raise ValueError(f"expected (n_aug, dim) vectors, got shape {vecs.shape}")
    write_feature_tensor(vecs[:, None, :], path)


def write_mask(mask: np.ndarray, path) -> None:
    """Write a binary mask as an 8-bit grayscale PNG (0 or 255)."""
    arr = np.where(np.asarray(mask) > 0, 255, 0).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(path)
