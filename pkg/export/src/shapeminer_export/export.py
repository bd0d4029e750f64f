"""Batch feature export: images in, shapeminer-format artifacts out.

For every manifest entry this emits
  {id}_embed.3dmf     per-augmentation global vectors, shape (n_aug, 1, dim)
  {id}_dense.3dmf     dense per-patch feature map, (rows, cols, depth)
  {id}_saliency.png   binary patch-saliency mask at image resolution
  {id}_mask.png       binary foreground mask
plus an output ``manifest.json`` binding them together in the downstream
manifest schema (foreground mask as the silhouette).
"""

from __future__ import annotations

import json
import logging
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .formats import write_embedding_stack, write_feature_tensor, write_mask

log = logging.getLogger("shapeminer_export")


@dataclass(frozen=True)
class AugmentationSpec:
    """Photometric/geometric jitter; mirrors the downstream pooling spec."""

    count: int = 10
    jitter_scale: float = 0.4  # per-channel gain in [1-a, 1+a]
    jitter_offset: float = 0.1  # per-channel offset in [-b, b]
    rotation_range: float = 30.0  # degrees
    perspective_jitter: float = 0.15  # corner displacement, fraction of size
    seed: int = 0

    def __post_init__(self):
        if self.count < 1:
            raise ValueError("augmentation count must be >= 1")
        for name in ("jitter_scale", "jitter_offset", "rotation_range",
                     "perspective_jitter"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")


@dataclass(frozen=True)
class ExportJob:
    manifest: Path
    out_dir: Path
    augmentations: AugmentationSpec = field(default_factory=AugmentationSpec)
    backbone: str = "fallback"  # 'pretrained' requires local weights
    weights_dir: str | None = None


def _entry_image_path(root: Path, entry: dict) -> Path:
    rel = entry.get("raster") or entry["silhouette"]
    return root / rel


def _find_coeffs(src, dst):
    """Solve the 8 projective coefficients mapping dst corners to src."""
    A, b = [], []
    for (x, y), (u, v) in zip(dst, src):
        A.append([x, y, 1, 0, 0, 0, -u * x, -u * y])
        A.append([0, 0, 0, x, y, 1, -v * x, -v * y])
        b.extend([u, v])
    return np.linalg.solve(np.asarray(A, dtype=np.float64),
                           np.asarray(b, dtype=np.float64))


def augment_image(image: Image.Image, spec: AugmentationSpec,
                  rng: np.random.Generator) -> Image.Image:
    """One random draw of color jitter + rotation + perspective warp."""
    arr = np.asarray(image.convert("RGB"), dtype=np.float32) / 255.0
    gain = 1.0 + rng.uniform(-spec.jitter_scale, spec.jitter_scale, 3)
    offset = rng.uniform(-spec.jitter_offset, spec.jitter_offset, 3)
    arr = np.clip(arr * gain + offset, 0.0, 1.0)
    out = Image.fromarray((arr * 255).astype(np.uint8), mode="RGB")

    angle = rng.uniform(-spec.rotation_range, spec.rotation_range)
    out = out.rotate(angle, resample=Image.BILINEAR)

    if spec.perspective_jitter > 0:
        w, h = out.size
        corners = np.array([[0, 0], [w, 0], [w, h], [0, h]], dtype=np.float64)
        jit = rng.uniform(-spec.perspective_jitter, spec.perspective_jitter,
                          (4, 2)) * [w, h]
        coeffs = _find_coeffs(corners, corners + jit)
        out = out.transform((w, h), Image.PERSPECTIVE, tuple(coeffs),
                            resample=Image.BILINEAR)
    return out


def _entry_rng(spec: AugmentationSpec, image_id: str) -> np.random.Generator:
    return np.random.default_rng([spec.seed, zlib.crc32(image_id.encode())])


def export_features(job: ExportJob) -> dict:
    """Run the batch export; returns the output manifest dictionary."""
    from .backbones import make_backbone

    manifest_path = Path(job.manifest)
    obj = json.loads(manifest_path.read_text())
    if not isinstance(obj, dict) or "entries" not in obj:
        raise ValueError(f"manifest {manifest_path} missing top-level 'entries'")
    root = manifest_path.parent

    backbone, masker = make_backbone(job.backbone, job.weights_dir)
    out_dir = Path(job.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    out_entries = []
    for entry in obj["entries"]:
        image_id = entry["id"]
        path = _entry_image_path(root, entry)
        try:
            image = Image.open(path).convert("RGB")
        except OSError as exc:
            log.warning("skipping %s: cannot decode %s (%s)", image_id, path, exc)
            continue

        rng = _entry_rng(job.augmentations, image_id)
        vectors = np.stack([
            backbone.embed(augment_image(image, job.augmentations, rng))
            for _ in range(job.augmentations.count)
        ])
        dense = backbone.extract(image)
        cutoff = np.quantile(dense.saliency, 0.6)
        sal_patches = (dense.saliency > cutoff).astype(np.uint8)
        saliency_full = np.asarray(
            Image.fromarray(sal_patches * 255, mode="L").resize(
                image.size, Image.NEAREST
            )
        ) > 127
        fg = masker.mask(image)

        names = {
            "embedding": f"{image_id}_embed.3dmf",
            "dense": f"{image_id}_dense.3dmf",
            "saliency": f"{image_id}_saliency.png",
            "silhouette": f"{image_id}_mask.png",
        }
        write_embedding_stack(vectors, out_dir / names["embedding"])
        write_feature_tensor(dense.features, out_dir / names["dense"])
        write_mask(saliency_full.astype(np.uint8), out_dir / names["saliency"])
        write_mask(fg, out_dir / names["silhouette"])
        out_entries.append({"id": image_id, **names})
        log.info("exported %s (%d augmentations)", image_id, len(vectors))

    out_manifest = {"entries": [
        {k: e[k] for k in ("id", "silhouette", "embedding", "dense")}
        for e in out_entries
    ]}
    (out_dir / "manifest.json").write_text(json.dumps(out_manifest, indent=1))
    return out_manifest
