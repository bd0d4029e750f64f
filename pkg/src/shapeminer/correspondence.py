"""Keypoints from dense features within a cluster.

Dense per-image feature maps are jointly clustered with k-means, the parts
that are salient across most images are kept by voting, and the bounding-box
center of each surviving part becomes one column of the landmark observation
matrix fed to rigid factorization.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .corpus import FeatureMap

MIN_VIEWS_PER_TRACK = 2
MIN_TRACKS_PER_IMAGE = 4
MIN_IMAGES = 3
MIN_TRACKS = 4


@dataclass(frozen=True)
class PartSegmentation:
    image_id: str
    labels: np.ndarray  # (H', W') int, in [0, k) or -1 for background
    k: int

    def __post_init__(self):
        lab = np.asarray(self.labels)
        if lab.max(initial=-1) >= self.k or lab.min(initial=0) < -1:
            raise ValueError("labels out of range")


@dataclass
class KeypointTrack:
    part_id: int
    observations: dict = field(default_factory=dict)  # image_id -> (u, v)
    visibility: dict = field(default_factory=dict)  # image_id -> bool

    def n_visible(self) -> int:
        return sum(bool(v) for v in self.visibility.values())


@dataclass(frozen=True)
class ObservationMatrix:
    W: np.ndarray  # (2F, P): stacked (u; v) row pair per image
    mask: np.ndarray  # (F, P) bool
    image_ids: Sequence[str]
    part_ids: Sequence[int] = ()
    pruning_report: Sequence[str] = ()

    def __post_init__(self):
        F, P = self.mask.shape
        if self.W.shape != (2 * F, P):
            raise ValueError("W must be (2F, P)")
        if len(self.image_ids) != F:
            raise ValueError("image_ids length must match mask rows")
        if P and (self.mask.sum(axis=0) < MIN_VIEWS_PER_TRACK).any():
            raise ValueError("every track must be visible in >= 2 images")
        if F and (self.mask.sum(axis=1) < MIN_TRACKS_PER_IMAGE).any():
            raise ValueError("every image must observe >= 4 tracks")


def kmeans_features(
    maps: Sequence[FeatureMap], k: int, seed: int = 0
) -> list[np.ndarray]:
    """Joint k-means (k-means++ init) over all spatial locations of all maps;
    returns one label grid per input map with labels shared across images."""
    if k < 1:
        raise ValueError("k must be >= 1")
    depths = {m.depth for m in maps}
    if len(depths) != 1:
        raise ValueError(f"feature depth mismatch: {sorted(depths)}")
    X = np.concatenate([m.data.reshape(-1, m.depth) for m in maps]).astype(np.float64)
    n = X.shape[0]
    if k > n:
        raise ValueError(f"k={k} exceeds total feature count {n}")
    rng = np.random.default_rng(seed)

    # k-means++ seeding
    centers = np.empty((k, X.shape[1]))
    centers[0] = X[rng.integers(n)]
    d2 = ((X - centers[0]) ** 2).sum(axis=1)
    for i in range(1, k):
        total = d2.sum()
        if total <= 0:
            centers[i:] = X[rng.integers(n, size=k - i)]
            break
        centers[i] = X[rng.choice(n, p=d2 / total)]
        d2 = np.minimum(d2, ((X - centers[i]) ** 2).sum(axis=1))

    labels = np.zeros(n, dtype=int)
    for _ in range(100):
        dists = ((X[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        labels = dists.argmin(axis=1)
        new_centers = centers.copy()
        for j in range(k):
            sel = labels == j
            if sel.any():
                new_centers[j] = X[sel].mean(axis=0)
        shift = np.linalg.norm(new_centers - centers, axis=1).max()
        centers = new_centers
        if shift < 1e-6:
            break

    out = []
    offset = 0
    for m in maps:
        cnt = m.rows * m.cols
        out.append(labels[offset : offset + cnt].reshape(m.rows, m.cols).copy())
        offset += cnt
    return out


def vote_common_segments(
    segmentations: Sequence[PartSegmentation],
    saliency: Sequence[np.ndarray],
    n_parts: int = 8,
) -> list[int]:
    """Keep the n_parts part ids most often salient across images.

    A part earns one vote per image where at least half of its pixels fall
    inside that image's saliency mask. Ties break toward the lower part id.
    """
    if not segmentations:
        return []
    k = segmentations[0].k
    votes = np.zeros(k, dtype=int)
    for seg, sal in zip(segmentations, saliency):
        sal = np.asarray(sal) > 0
        if sal.shape != seg.labels.shape:
            # saliency given at image resolution: pool down by block sampling
            sal = _resample_mask(sal, seg.labels.shape)
        for part in range(k):
            sel = seg.labels == part
            total = int(sel.sum())
            if total and int((sel & sal).sum()) * 2 >= total:
                votes[part] += 1
    order = sorted(range(k), key=lambda p: (-votes[p], p))
    return [p for p in order[:n_parts] if votes[p] > 0]


def _resample_mask(mask: np.ndarray, shape) -> np.ndarray:
    rows = (np.arange(shape[0]) + 0.5) * mask.shape[0] / shape[0] - 0.5
    cols = (np.arange(shape[1]) + 0.5) * mask.shape[1] / shape[1] - 0.5
    ri = np.clip(np.round(rows).astype(int), 0, mask.shape[0] - 1)
    ci = np.clip(np.round(cols).astype(int), 0, mask.shape[1] - 1)
    return mask[np.ix_(ri, ci)]


def extract_keypoints(
    segmentation: PartSegmentation,
    part_ids: Sequence[int],
    image_size: Optional[tuple] = None,
) -> dict:
    """Bounding-box centers of the selected parts, scaled to image pixels.

    Returns {part_id: (u, v) or None}. Scaling follows the center-of-cell
    convention: image_coord = (cell + 0.5) * scale - 0.5.
    """
    labels = segmentation.labels
    h, w = labels.shape
    if image_size is None:
        sy = sx = 1.0
    else:
        ih, iw = image_size
        sy, sx = ih / h, iw / w
    out = {}
    for part in part_ids:
        ys, xs = np.nonzero(labels == part)
        if ys.size == 0:
            out[part] = None
            continue
        cu = (xs.min() + xs.max()) / 2.0
        cv = (ys.min() + ys.max()) / 2.0
        out[part] = ((cu + 0.5) * sx - 0.5, (cv + 0.5) * sy - 0.5)
    return out


def build_observation_matrix(
    tracks: Sequence[KeypointTrack], image_ids: Sequence[str]
) -> ObservationMatrix:
    """Assemble the 2F x P landmark matrix, pruning tracks seen in fewer than
    2 images and images observing fewer than 4 tracks until stable."""
    report: list[str] = []
    ids = list(image_ids)
    live = list(tracks)

    changed = True
    while changed:
        changed = False
        kept_tracks = []
        for t in live:
            vis = sum(1 for i in ids if t.visibility.get(i, False))
            if vis < MIN_VIEWS_PER_TRACK:
                report.append(f"dropped track part={t.part_id}: visible in {vis} image(s)")
                changed = True
            else:
                kept_tracks.append(t)
        live = kept_tracks
        kept_ids = []
        for i in ids:
            vis = sum(1 for t in live if t.visibility.get(i, False))
            if vis < MIN_TRACKS_PER_IMAGE:
                report.append(f"dropped image {i!r}: observes {vis} track(s)")
                changed = True
            else:
                kept_ids.append(i)
        ids = kept_ids

    if len(ids) < MIN_IMAGES or len(live) < MIN_TRACKS:
        raise ValueError(
            f"under-constrained: {len(ids)} usable images, {len(live)} usable "
            f"tracks (need >= {MIN_IMAGES} and >= {MIN_TRACKS}); "
            f"pruning: {report}"
        )

    live = sorted(live, key=lambda t: t.part_id)
    F, P = len(ids), len(live)
    W = np.zeros((2 * F, P))
    mask = np.zeros((F, P), dtype=bool)
    for col, t in enumerate(live):
        for row, img in enumerate(ids):
            if t.visibility.get(img, False):
                u, v = t.observations[img]
                W[2 * row, col] = u
                W[2 * row + 1, col] = v
                mask[row, col] = True
    return ObservationMatrix(
        W=W,
        mask=mask,
        image_ids=tuple(ids),
        part_ids=tuple(t.part_id for t in live),
        pruning_report=tuple(report),
    )
