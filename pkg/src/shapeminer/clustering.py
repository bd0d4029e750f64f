"""Shape-based image grouping.

Pools features of augmented views into a single geometry-sensitive embedding
(componentwise max / mean / min blocks), then groups images bottom-up with
average-linkage agglomerative clustering stopped at a distance threshold.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.cluster.hierarchy import fcluster, linkage
from scipy.spatial.distance import pdist
from skimage import transform as sktf

MIN_RECONSTRUCTABLE = 3  # factorization is ill-posed below 3 views


@dataclass(frozen=True)
class AugmentationSpec:
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
class GlobalEmbedding:
    image_id: str
    z: np.ndarray  # length 3*D: [max || mean || min]

    def __post_init__(self):
        z = np.asarray(self.z, dtype=np.float64)
        if z.size % 3:
            raise ValueError("pooled embedding length must be divisible by 3")
        object.__setattr__(self, "z", z)


@dataclass(frozen=True)
class ClusterSet:
    clusters: Sequence[frozenset]
    distance_threshold: float
    linkage: str = "average"

    def labels(self) -> dict:
        out = {}
        for i, members in enumerate(self.clusters):
            for m in members:
                out[m] = i
        return out

    def reconstructable(self) -> list[frozenset]:
        return [c for c in self.clusters if len(c) >= MIN_RECONSTRUCTABLE]


def augment_image(image: np.ndarray, spec: AugmentationSpec, index: int) -> np.ndarray:
    """Apply the index-th random color/rotation/perspective augmentation.

    Deterministic in (spec.seed, index). Exposed borders are filled by edge
    replication and values are clamped back to [0, 1].
    """
    if index >= spec.count:
        raise ValueError(f"index {index} >= augmentation count {spec.count}")
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[:, :, None]
    h, w, c = img.shape
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, index]))

    gains = rng.uniform(1 - spec.jitter_scale, 1 + spec.jitter_scale, size=c)
    offsets = rng.uniform(-spec.jitter_offset, spec.jitter_offset, size=c)
    angle = rng.uniform(-spec.rotation_range, spec.rotation_range)
    corner_jit = rng.uniform(
        -spec.perspective_jitter, spec.perspective_jitter, size=(4, 2)
    ) * [w, h]

    out = img * gains + offsets

    if angle != 0.0 or np.any(corner_jit):
        cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
        th = np.deg2rad(angle)
        to_center = np.array([[1, 0, -cx], [0, 1, -cy], [0, 0, 1.0]])
        rot = np.array(
            [[np.cos(th), -np.sin(th), 0], [np.sin(th), np.cos(th), 0], [0, 0, 1.0]]
        )
        rotate_about_center = np.linalg.inv(to_center) @ rot @ to_center

        src = np.array([[0, 0], [w - 1, 0], [w - 1, h - 1], [0, h - 1]], float)
        persp = sktf.ProjectiveTransform()
        persp_mat = np.eye(3)
        if persp.estimate(src, src + corner_jit):
            persp_mat = persp.params

        forward = persp_mat @ rotate_about_center  # input (x,y) -> output (x,y)
        inv_map = sktf.ProjectiveTransform(matrix=np.linalg.inv(forward))
        out = sktf.warp(out, inv_map, mode="edge", order=1, preserve_range=True)

    out = np.clip(out, 0.0, 1.0)
    return out if image.ndim == 3 else out[:, :, 0]


def pool_embedding(features: Sequence[np.ndarray]) -> np.ndarray:
    """Pool a set of equal-length vectors into [max || mean || min]."""
    if len(features) == 0:
        raise ValueError("cannot pool an empty feature set")
    mat = np.asarray(list(features), dtype=np.float64)
    if mat.ndim != 2:
        raise ValueError("feature vectors have mismatched dimensions")
    # Sorting fixes the summation order, making the pooling exactly
    # permutation-invariant rather than invariant only up to rounding.
    mat = np.sort(mat, axis=0)
    return np.concatenate([mat[-1], mat.mean(axis=0), mat[0]])


def agglomerative_cluster(
    embeddings: Sequence[GlobalEmbedding],
    threshold: float,
    linkage_method: str = "average",
) -> ClusterSet:
    """Merge bottom-up until the smallest inter-cluster distance exceeds
    `threshold` (average linkage on Euclidean distance by default)."""
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    if not embeddings:
        raise ValueError("need at least one embedding")
    ids = [e.image_id for e in embeddings]
    dims = {e.z.size for e in embeddings}
    if len(dims) != 1:
        raise ValueError(f"embedding dimension mismatch: {sorted(dims)}")
    if len(embeddings) == 1:
        return ClusterSet((frozenset(ids),), threshold, linkage_method)
    X = np.stack([e.z for e in embeddings])
    Z = linkage(pdist(X), method=linkage_method)
    flat = fcluster(Z, t=threshold, criterion="distance")
    groups: dict[int, set] = {}
    for img_id, lab in zip(ids, flat):
        groups.setdefault(int(lab), set()).add(img_id)
    clusters = tuple(
        frozenset(groups[k]) for k in sorted(groups, key=lambda k: min(groups[k]))
    )
    return ClusterSet(clusters, threshold, linkage_method)


def _partition_to_labels(partition: Sequence[Sequence[str]]) -> dict:
    labels = {}
    for i, members in enumerate(partition):
        for m in members:
            labels[m] = i
    return labels


def nmi(predicted: Sequence[Sequence[str]], truth: Sequence[Sequence[str]]) -> float:
    """Normalized mutual information (arithmetic-mean normalization) between
    two partitions of the same id set. 1.0 when both partitions are identical
    (including the degenerate single-cluster vs single-cluster case)."""
    pred = _partition_to_labels(predicted)
    true = _partition_to_labels(truth)
    if set(pred) != set(true):
        raise ValueError("partitions cover different id sets")
    ids = sorted(pred)
    a = np.array([pred[i] for i in ids])
    b = np.array([true[i] for i in ids])
    n = len(ids)
    cont = np.zeros((a.max() + 1, b.max() + 1))
    np.add.at(cont, (a, b), 1.0)
    pij = cont / n
    pi = pij.sum(axis=1)
    pj = pij.sum(axis=0)
    nz = pij > 0
    mi = float(np.sum(pij[nz] * np.log(pij[nz] / np.outer(pi, pj)[nz])))
    h_a = float(-np.sum(pi[pi > 0] * np.log(pi[pi > 0])))
    h_b = float(-np.sum(pj[pj > 0] * np.log(pj[pj > 0])))
    denom = 0.5 * (h_a + h_b)
    if denom == 0.0:
        return 1.0  # both partitions trivial, hence identical
    return float(np.clip(mi / denom, 0.0, 1.0))
