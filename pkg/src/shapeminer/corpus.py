"""Corpus data model: images, silhouettes, feature maps and the manifest.

All loaders are pure functions of their path argument and return immutable
records, so they are safe to call concurrently on distinct files.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image

FEATURE_MAGIC = b"3DMF"
FEATURE_VERSION = 1


class CorpusError(ValueError):
    """Raised for malformed corpus files or manifest violations."""


@dataclass(frozen=True)
class FeatureMap:
    """Dense feature tensor, row-major with the channel axis fastest."""

    rows: int
    cols: int
    depth: int
    data: np.ndarray  # float32, shape (rows, cols, depth)

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float32).reshape(
            self.rows, self.cols, self.depth
        )
        if not np.isfinite(arr).all():
            raise CorpusError("feature map contains non-finite values")
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)


@dataclass(frozen=True)
class ImageRecord:
    """One corpus entry; raster/embedding/dense features are optional."""

    id: str
    width: int
    height: int
    silhouette: np.ndarray  # (H, W) uint8 in {0, 1}
    raster: Optional[np.ndarray] = None  # (H, W, 3) float in [0, 1]
    global_embedding: Optional[np.ndarray] = None
    dense_features: Optional[FeatureMap] = None
    source_uri: str = ""

    def __post_init__(self):
        sil = np.asarray(self.silhouette)
        if sil.shape != (self.height, self.width):
            raise CorpusError(
                f"{self.id}: silhouette shape {sil.shape} != "
                f"({self.height}, {self.width})"
            )
        if not np.isin(sil, (0, 1)).all():
            raise CorpusError(f"{self.id}: silhouette values must be binary")
        if self.raster is not None:
            ras = np.asarray(self.raster)
            if ras.shape[:2] != (self.height, self.width):
                raise CorpusError(f"{self.id}: raster/silhouette size mismatch")


@dataclass(frozen=True)
class ManifestEntry:
    id: str
    silhouette: str
    raster: Optional[str] = None
    embedding: Optional[str] = None
    dense: Optional[str] = None
    gt_cluster: Optional[str] = None
    gt_mesh: Optional[str] = None


@dataclass(frozen=True)
class CorpusManifest:
    entries: Sequence[ManifestEntry]
    root: Path = field(default_factory=Path)

    def ids(self) -> list[str]:
        return [e.id for e in self.entries]

    def resolve(self, rel: str) -> Path:
        return self.root / rel


def load_manifest(path) -> CorpusManifest:
    """Load and validate a JSON manifest; paths are relative to its directory."""
    path = Path(path)
    try:
        obj = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CorpusError(f"cannot parse manifest {path}: {exc}") from exc
    if not isinstance(obj, dict) or "entries" not in obj:
        raise CorpusError(f"manifest {path} missing top-level 'entries'")
    root = path.parent
    entries = []
    seen = set()
    for raw in obj["entries"]:
        if "id" not in raw or "silhouette" not in raw:
            raise CorpusError(f"manifest entry missing id/silhouette: {raw}")
        eid = raw["id"]
        if eid in seen:
            raise CorpusError(f"duplicate manifest id {eid!r}")
        seen.add(eid)
        entry = ManifestEntry(
            id=eid,
            silhouette=raw["silhouette"],
            raster=raw.get("raster"),
            embedding=raw.get("embedding"),
            dense=raw.get("dense"),
            gt_cluster=raw.get("gt_cluster"),
            gt_mesh=raw.get("gt_mesh"),
        )
        for attr in ("silhouette", "raster", "embedding", "dense", "gt_mesh"):
            rel = getattr(entry, attr)
            if rel is not None and not (root / rel).exists():
                raise CorpusError(f"entry {eid!r}: dangling {attr} path {rel!r}")
        entries.append(entry)
    return CorpusManifest(entries=tuple(entries), root=root)


def save_manifest(manifest: CorpusManifest, path) -> None:
    entries = []
    for e in manifest.entries:
        rec = {"id": e.id, "silhouette": e.silhouette}
        for attr in ("raster", "embedding", "dense", "gt_cluster", "gt_mesh"):
            val = getattr(e, attr)
            if val is not None:
                rec[attr] = val
        entries.append(rec)
    Path(path).write_text(json.dumps({"entries": entries}, indent=1))


def load_feature_map(path) -> FeatureMap:
    """Read the '3DMF' little-endian binary feature format."""
    raw = Path(path).read_bytes()
    if len(raw) < 20:
        raise CorpusError(f"{path}: truncated header")
    if raw[:4] != FEATURE_MAGIC:
        raise CorpusError(f"{path}: bad magic {raw[:4]!r}")
    version, rows, cols, depth = struct.unpack_from("<4I", raw, 4)
    if version != FEATURE_VERSION:
        raise CorpusError(f"{path}: unsupported version {version}")
    n = rows * cols * depth
    payload = raw[20:]
    if len(payload) < 4 * n:
        raise CorpusError(
            f"{path}: truncated payload ({len(payload)} bytes for {n} floats)"
        )
    data = np.frombuffer(payload[: 4 * n], dtype="<f4").reshape(rows, cols, depth)
    return FeatureMap(rows, cols, depth, data)


def save_feature_map(fmap: FeatureMap, path) -> None:
    header = FEATURE_MAGIC + struct.pack(
        "<4I", FEATURE_VERSION, fmap.rows, fmap.cols, fmap.depth
    )
    body = np.ascontiguousarray(fmap.data, dtype="<f4").tobytes()
    Path(path).write_bytes(header + body)


def load_silhouette(path) -> np.ndarray:
    """Load an 8-bit grayscale PNG/PGM mask; values > 127 map to 1."""
    try:
        img = Image.open(path)
    except OSError as exc:
        raise CorpusError(f"cannot read silhouette {path}: {exc}") from exc
    if img.mode not in ("L", "1", "I;16", "P"):
        raise CorpusError(f"{path}: expected grayscale image, got mode {img.mode}")
    arr = np.asarray(img.convert("L"))
    return (arr > 127).astype(np.uint8)


def save_silhouette(mask: np.ndarray, path) -> None:
    arr = np.where(np.asarray(mask) > 0, 255, 0).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(path)


def load_record(manifest: CorpusManifest, entry: ManifestEntry) -> ImageRecord:
    """Materialize a manifest entry into an ImageRecord."""
    sil = load_silhouette(manifest.resolve(entry.silhouette))
    h, w = sil.shape
    raster = None
    if entry.raster:
        img = Image.open(manifest.resolve(entry.raster)).convert("RGB")
        raster = np.asarray(img, dtype=np.float64) / 255.0
    emb = None
    if entry.embedding:
        emb_map = load_feature_map(manifest.resolve(entry.embedding))
        emb = emb_map.data.reshape(emb_map.rows * emb_map.cols, emb_map.depth)
    dense = None
    if entry.dense:
        dense = load_feature_map(manifest.resolve(entry.dense))
    return ImageRecord(
        id=entry.id,
        width=w,
        height=h,
        silhouette=sil,
        raster=raster,
        global_embedding=emb,
        dense_features=dense,
        source_uri=str(manifest.resolve(entry.silhouette)),
    )
