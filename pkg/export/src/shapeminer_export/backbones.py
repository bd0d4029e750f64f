"""Feature and mask backbones.

Two real pretrained backends (a self-supervised ViT for features, a salient
object segmenter for masks) load from local TorchScript archives; this tool
never downloads weights.  A deterministic ``hashed-patch`` fallback produces
stand-in features and masks with the same shapes and file formats, so the
export pipeline and its format contracts can run (and be golden-tested) on
machines without the weights.

Layer choice for the dense map lives here (see ``DINO_DENSE_LAYERS``), not in
the downstream consumer; the default is documented in this package's README.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

# Which transformer blocks feed the dense per-patch map, and how they are
# combined (channel concatenation).  The downstream consumer treats the
# result as an opaque (rows, cols, depth) tensor, so this is free to vary.
DINO_DENSE_LAYERS = (9, 11)
DINO_WEIGHTS = "dino_vits16.ts.pt"  # TorchScript export of ViT-S/16, stride 16
ISNET_WEIGHTS = "isnet.ts.pt"  # TorchScript export of the segmenter

WEIGHTS_ENV = "SHAPEMINER_EXPORT_WEIGHTS"

IMAGENET_MEAN = np.array([0.485, 0.456, 0.406], dtype=np.float32)
IMAGENET_STD = np.array([0.229, 0.224, 0.225], dtype=np.float32)


class ModelUnavailableError(RuntimeError):
    """Raised when a pretrained backend's weights are not present locally."""


@dataclass(frozen=True)
class DenseFeatures:
    """Per-patch feature grid plus a patch-level saliency score grid."""

    features: np.ndarray  # (rows, cols, depth) float32
    saliency: np.ndarray  # (rows, cols) float32, higher = more salient


def _load_scripted(filename: str, weights_dir: str | None):
    import os

    base = weights_dir or os.environ.get(WEIGHTS_ENV, "")
    path = Path(base) / filename
    if not base or not path.exists():
        raise ModelUnavailableError(
            f"pretrained weights {filename!r} not found; export the model to "
            f"TorchScript, place it in a directory, and point --weights-dir "
            f"(or ${WEIGHTS_ENV}) at it, or run with --backbone fallback"
        )
    import torch

    try:
        model = torch.jit.load(str(path), map_location="cpu")
    except Exception as exc:  # noqa: BLE001 - report any load failure uniformly
        raise ModelUnavailableError(f"cannot load {path}: {exc}") from exc
    model.eval()
    return model


def _to_normalized_tensor(image: Image.Image, size: int):
    import torch

    img = image.convert("RGB").resize((size, size), Image.BILINEAR)
    arr = np.asarray(img, dtype=np.float32) / 255.0
    arr = (arr - IMAGENET_MEAN) / IMAGENET_STD
    return torch.from_numpy(arr.transpose(2, 0, 1))[None]


class DinoVitBackbone:
    """Self-supervised ViT features from a local TorchScript archive.

    The scripted module must map a normalized (1, 3, 224, 224) batch to a
    (1, 1 + rows*cols, depth) token tensor (class token first).  Saliency is
    the per-patch feature norm, the usual attention-free proxy.
    """

    name = "dino-vit-s16"
    patch_size = 16
    input_size = 224

    def __init__(self, weights_dir: str | None = None):
        self._model = _load_scripted(DINO_WEIGHTS, weights_dir)

    def _tokens(self, image: Image.Image) -> np.ndarray:
        import torch

        with torch.no_grad():
            out = self._model(_to_normalized_tensor(image, self.input_size))
        return out[0].numpy().astype(np.float32)

    def extract(self, image: Image.Image) -> DenseFeatures:
        tokens = self._tokens(image)[1:]  # drop the class token
        grid = self.input_size // self.patch_size
        feats = tokens.reshape(grid, grid, -1)
        saliency = np.linalg.norm(feats, axis=-1)
        return DenseFeatures(feats, saliency.astype(np.float32))

    def embed(self, image: Image.Image) -> np.ndarray:
        cls = self._tokens(image)[0]
        norm = np.linalg.norm(cls)
        return (cls / norm if norm > 0 else cls).astype(np.float32)


class IsNetMasker:
    """Foreground segmentation from a local TorchScript archive.

    The scripted module must map a normalized (1, 3, 320, 320) batch to a
    (1, 1, 320, 320) probability map; the mask is thresholded at 0.5 and
    resized back to the source resolution.
    """

    name = "isnet"
    input_size = 320

    def __init__(self, weights_dir: str | None = None):
        self._model = _load_scripted(ISNET_WEIGHTS, weights_dir)

    def mask(self, image: Image.Image) -> np.ndarray:
        import torch

        with torch.no_grad():
            prob = self._model(_to_normalized_tensor(image, self.input_size))
        prob = prob.reshape(self.input_size, self.input_size).numpy()
        pil = Image.fromarray((prob * 255).astype(np.uint8), mode="L")
        pil = pil.resize(image.size, Image.BILINEAR)
        return (np.asarray(pil) > 127).astype(np.uint8)


class HashedPatchBackbone:
    """Deterministic stand-in: random-projected patch statistics.

    Each 16x16 patch of the 224x224 input is summarized by color and
    gradient statistics and projected through a frozen random matrix.  Not a
    learned representation, but shape- and format-identical to the real
    backend, deterministic across runs, and sensitive enough to image
    content for end-to-end smoke tests.
    """

    name = "hashed-patch"
    patch_size = 16
    input_size = 224
    embed_dim = 64

    def __init__(self, seed: int = 0):
        rng = np.random.default_rng(seed)
        self._proj = rng.standard_normal((10, self.embed_dim)).astype(np.float32)

    def _patch_stats(self, image: Image.Image) -> np.ndarray:
        img = image.convert("RGB").resize(
            (self.input_size, self.input_size), Image.BILINEAR
        )
        arr = np.asarray(img, dtype=np.float32) / 255.0
        p, g = self.patch_size, self.input_size // self.patch_size
        patches = arr.reshape(g, p, g, p, 3).transpose(0, 2, 1, 3, 4)
        mean = patches.mean(axis=(2, 3))
        std = patches.std(axis=(2, 3))
        dy = np.abs(np.diff(patches, axis=2)).mean(axis=(2, 3))
        dx = np.abs(np.diff(patches, axis=3)).mean(axis=(2, 3))
        grad = ((dx + dy) / 2.0).mean(axis=-1, keepdims=True)
        return np.concatenate(
            [mean, std, grad, np.zeros_like(grad), np.zeros_like(grad),
             np.ones_like(grad)], axis=-1
        ).astype(np.float32)

    def extract(self, image: Image.Image) -> DenseFeatures:
        stats = self._patch_stats(image)
        feats = np.tanh(stats @ self._proj)
        # Texture-and-contrast energy: flat background patches score low.
        saliency = stats[..., 3:7].sum(axis=-1)
        return DenseFeatures(feats.astype(np.float32), saliency.astype(np.float32))

    def embed(self, image: Image.Image) -> np.ndarray:
        dense = self.extract(image)
        w = dense.saliency - dense.saliency.min()
        w = (w / w.sum()) if w.sum() > 0 else np.full_like(w, 1.0 / w.size)
        vec = (dense.features * w[..., None]).sum(axis=(0, 1))
        norm = np.linalg.norm(vec)
        return (vec / norm if norm > 0 else vec).astype(np.float32)

    def mask(self, image: Image.Image) -> np.ndarray:
        """Foreground = pixels far from the median border color."""
        arr = np.asarray(image.convert("RGB"), dtype=np.float32) / 255.0
        border = np.concatenate(
            [arr[0], arr[-1], arr[:, 0], arr[:, -1]], axis=0
        )
        bg = np.median(border, axis=0)
        dist = np.linalg.norm(arr - bg, axis=-1)
        thresh = max(0.15, float(dist.mean() + 0.25 * dist.std()))
        return (dist > thresh).astype(np.uint8)


def make_backbone(kind: str, weights_dir: str | None = None):
    """Return (feature backbone, masker) for the requested backend."""
    if kind == "pretrained":
        return DinoVitBackbone(weights_dir), IsNetMasker(weights_dir)
    if kind == "fallback":
        fb = HashedPatchBackbone()
        return fb, fb
    raise ValueError(f"unknown backbone {kind!r} (use 'pretrained' or 'fallback')")
