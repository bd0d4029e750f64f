"""Synthetic oracle harness: analytic SDF shapes, silhouettes rendered from
known cameras, noisy landmark tracks and clustered embeddings. Everything the
pipeline consumes can be generated here with known ground truth."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import corpus
from .cameras import PerspectiveCamera, cast_rays
from .clustering import GlobalEmbedding, pool_embedding
from .correspondence import ObservationMatrix
from .factorization import OrthographicCamera


# ---------------------------------------------------------------------------
# SDF shapes


@dataclass(frozen=True)
class Primitive:
    kind: str  # sphere | box | cylinder
    center: tuple = (0.0, 0.0, 0.0)
    radius: float = 0.5
    half_extents: tuple = (0.5, 0.5, 0.5)
    axis: int = 2
    height: float = 1.0

    def sdf(self, p: np.ndarray) -> np.ndarray:
        q = np.asarray(p, float) - np.asarray(self.center)
        if self.kind == "sphere":
            return np.linalg.norm(q, axis=-1) - self.radius
        if self.kind == "box":
            d = np.abs(q) - np.asarray(self.half_extents)
            outside = np.linalg.norm(np.clip(d, 0, None), axis=-1)
            inside = np.clip(d.max(axis=-1), None, 0.0)
            return outside + inside
        if self.kind == "cylinder":
            ax = self.axis
            lat = [i for i in range(3) if i != ax]
            r = np.linalg.norm(q[..., lat], axis=-1) - self.radius
            h = np.abs(q[..., ax]) - self.height / 2
            d = np.stack([r, h], axis=-1)
            outside = np.linalg.norm(np.clip(d, 0, None), axis=-1)
            inside = np.clip(d.max(axis=-1), None, 0.0)
            return outside + inside
        raise ValueError(f"unknown primitive kind {self.kind!r}")


@dataclass(frozen=True)
class ShapeSpec:
    primitives: Sequence[Primitive]

    def __post_init__(self):
        if not self.primitives:
            raise ValueError("shape needs at least one primitive")

    def sdf(self, p: np.ndarray) -> np.ndarray:
        return np.min([prim.sdf(p) for prim in self.primitives], axis=0)


def sphere_box_shape() -> ShapeSpec:
    """Default harness shape: unit-scale sphere-plus-box union."""
    return ShapeSpec(
        primitives=(
            Primitive(kind="sphere", radius=0.4),
            Primitive(kind="box", half_extents=(0.5, 0.1, 0.3)),
        )
    )


@dataclass(frozen=True)
class SceneSpec:
    shape: ShapeSpec
    cameras: Sequence[PerspectiveCamera]
    landmarks: np.ndarray  # (P, 3)
    noise: float = 0.0  # pixel sigma on track observations
    missing_rate: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not (0 <= self.missing_rate < 1):
            raise ValueError("missing_rate must be in [0, 1)")
        object.__setattr__(
            self, "landmarks", np.asarray(self.landmarks, float).reshape(-1, 3)
        )


# ---------------------------------------------------------------------------
# Cameras and rendering


def look_at_camera(
    image_id: str,
    position: np.ndarray,
    size: int = 64,
    focal: Optional[float] = None,
    up=(0.0, 1.0, 0.0),
) -> PerspectiveCamera:
    """Ground-truth camera at `position` looking at the origin (+z forward)."""
    pos = np.asarray(position, float)
    fwd = -pos / np.linalg.norm(pos)
    upv = np.asarray(up, float)
    if abs(fwd @ upv) > 0.99:
        upv = np.array([1.0, 0.0, 0.0])
    right = np.cross(fwd, upv)
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    R = np.stack([right, down, fwd])  # world-to-camera rows
    T = -R @ pos
    return PerspectiveCamera(
        id=image_id,
        M_free=R[:2].copy(),
        T=T,
        f=float(focal if focal is not None else size),
        width=size,
        height=size,
    )


def camera_ring(
    n: int, radius: float = 5.0, size: int = 64, focal: Optional[float] = None,
    seed: int = 0, full_sphere: bool = True,
) -> list[PerspectiveCamera]:
    """n cameras spread over a sphere (Fibonacci lattice, jittered by seed),
    all looking at the origin."""
    rng = np.random.default_rng(seed)
    phase = rng.uniform(0, 2 * np.pi)
    cams = []
    golden = np.pi * (3 - np.sqrt(5))
    for i in range(n):
        if full_sphere:
            z = 1 - 2 * (i + 0.5) / n
            z = 0.9 * z  # stay off the poles to keep the up vector stable
        else:
            z = 0.3 * np.sin(2 * np.pi * i / n)
        r = np.sqrt(max(0.0, 1 - z * z))
        th = golden * i + phase
        pos = radius * np.array([r * np.cos(th), r * np.sin(th), z])
        cams.append(look_at_camera(f"view{i:03d}", pos, size=size, focal=focal))
    return cams


def render_silhouette(
    shape: ShapeSpec, cam: PerspectiveCamera, size: Optional[int] = None,
    max_steps: int = 128, tol: float = 1e-4, t_max: float = 12.0,
) -> np.ndarray:
    """Sphere-trace every pixel; 1 where the ray hits the zero level set."""
    h = w = size or cam.height
    rows, cols = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    pix = np.stack([rows.ravel(), cols.ravel()], axis=1)
    origins, dirs = cast_rays(cam, pix)
    t = np.zeros(len(pix))
    alive = np.ones(len(pix), dtype=bool)
    hit = np.zeros(len(pix), dtype=bool)
    for _ in range(max_steps):
        if not alive.any():
            break
        p = origins[alive] + t[alive, None] * dirs[alive]
        d = shape.sdf(p)
        newly_hit = d < tol
        idx = np.nonzero(alive)[0]
        hit[idx[newly_hit]] = True
        t[alive] += np.clip(d, tol, None)
        alive[idx[newly_hit]] = False
        alive &= t < t_max
    return hit.reshape(h, w).astype(np.uint8)


def surface_landmarks(shape: ShapeSpec, n: int, seed: int = 0) -> np.ndarray:
    """Well-spread points on the SDF zero level set (rejection + projection)."""
    rng = np.random.default_rng(seed)
    pts = []
    while len(pts) < n:
        p = rng.uniform(-1.0, 1.0, size=3)
        # project to the surface along the SDF gradient a few times
        for _ in range(20):
            d = float(shape.sdf(p))
            eps = 1e-5
            g = np.array(
                [
                    shape.sdf(p + [eps, 0, 0]) - shape.sdf(p - [eps, 0, 0]),
                    shape.sdf(p + [0, eps, 0]) - shape.sdf(p - [0, eps, 0]),
                    shape.sdf(p + [0, 0, eps]) - shape.sdf(p - [0, 0, eps]),
                ]
            ) / (2 * eps)
            norm = np.linalg.norm(g)
            if norm < 1e-9:
                break
            p = p - d * g / norm
        if abs(float(shape.sdf(p))) < 1e-3:
            if all(np.linalg.norm(p - q) > 0.15 for q in pts):
                pts.append(p)
    return np.asarray(pts)


def surface_samples(shape: ShapeSpec, n: int, seed: int = 0,
                    box: float = 1.2) -> np.ndarray:
    """Dense surface point samples used as the mesh-metric oracle."""
    rng = np.random.default_rng(seed)
    out = []
    while sum(len(o) for o in out) < n:
        p = rng.uniform(-box, box, size=(4 * n, 3))
        d = shape.sdf(p)
        near = np.abs(d) < 0.05
        p = p[near]
        d = d[near][:, None]
        eps = 1e-5
        g = np.stack(
            [
                shape.sdf(p + [eps, 0, 0]) - shape.sdf(p - [eps, 0, 0]),
                shape.sdf(p + [0, eps, 0]) - shape.sdf(p - [0, eps, 0]),
                shape.sdf(p + [0, 0, eps]) - shape.sdf(p - [0, 0, eps]),
            ],
            axis=1,
        ) / (2 * eps)
        g /= np.linalg.norm(g, axis=1, keepdims=True)
        proj = p - d * g
        keep = np.abs(shape.sdf(proj)) < 1e-3
        out.append(proj[keep])
    return np.concatenate(out)[:n]


# ---------------------------------------------------------------------------
# Tracks, embeddings, dense features


def make_tracks(scene: SceneSpec):
    """Orthographic projections of the scene landmarks with optional noise
    and missing observations.

    Returns (ObservationMatrix, list of ground-truth OrthographicCamera).
    The orthographic scale is f/z0 pixels per world unit, with the image
    center as the translation, matching the perspective cameras to first
    order.
    """
    cams = scene.cameras
    P3 = scene.landmarks
    if len(cams) < 3 or len(P3) < 4:
        raise ValueError("need >= 3 cameras and >= 4 landmarks")
    rng = np.random.default_rng(scene.seed)
    F, P = len(cams), len(P3)

    gt_cams = []
    W = np.zeros((2 * F, P))
    for i, cam in enumerate(cams):
        R = cam.rotation()
        dist = float(np.linalg.norm(cam.center()))
        scale = cam.f / dist
        M = R[:2]
        t = np.array([cam.width / 2.0, cam.height / 2.0])
        proj = scale * (M @ P3.T) + t[:, None]
        W[2 * i : 2 * i + 2] = proj
        gt_cams.append(OrthographicCamera(M=M, t=t))

    W_noisy = W + rng.normal(0, scene.noise, size=W.shape)

    for _ in range(200):
        mask = rng.random((F, P)) >= scene.missing_rate
        if scene.missing_rate == 0:
            mask[:] = True
        if (mask.sum(axis=0) >= 2).all() and (mask.sum(axis=1) >= 4).all():
            break
    else:
        raise ValueError("cannot satisfy visibility invariants at this missing rate")

    obs = ObservationMatrix(
        W=np.where(np.repeat(mask, 2, axis=0), W_noisy, 0.0),
        mask=mask,
        image_ids=tuple(c.id for c in cams),
        part_ids=tuple(range(P)),
    )
    return obs, gt_cams


def make_embeddings(
    n_clusters: int,
    per_cluster: int,
    dim: int = 16,
    separation: float = 10.0,
    seed: int = 0,
    sigma: float = 1.0,
    n_augment: int = 10,
    draw_noise: float = 0.0,
):
    """Labeled synthetic pooled embeddings.

    Cluster centers are pairwise >= separation * sigma apart; each member is
    center + N(0, sigma^2), observed through `n_augment` per-draw jittered
    copies (draw_noise) that are pooled exactly like real augmented features.

    Returns (list of GlobalEmbedding, truth partition as list of id lists).
    """
    if separation <= 0:
        raise ValueError("separation must be positive")
    rng = np.random.default_rng(seed)
    centers = []
    while len(centers) < n_clusters:
        c = rng.normal(0, separation * sigma * 2, size=dim)
        if all(np.linalg.norm(c - o) >= separation * sigma for o in centers):
            centers.append(c)
    embeddings, truth = [], []
    for ci, center in enumerate(centers):
        members = []
        for mi in range(per_cluster):
            img_id = f"c{ci}_img{mi}"
            members.append(img_id)
            base = center + rng.normal(0, sigma, size=dim)
            draws = base + rng.normal(0, draw_noise, size=(n_augment, dim))
            embeddings.append(GlobalEmbedding(img_id, pool_embedding(list(draws))))
        truth.append(members)
    return embeddings, truth


def make_dense_features(
    shape: ShapeSpec,
    cam: PerspectiveCamera,
    landmarks: np.ndarray,
    grid: int = 16,
    feat_noise: float = 0.05,
    seed: int = 0,
) -> corpus.FeatureMap:
    """Synthetic part-indicator dense features: each foreground cell carries a
    (noisy) one-hot code of the landmark nearest to its surface hit point, so
    joint k-means recovers landmark-aligned parts across views."""
    rng = np.random.default_rng(seed)
    P = len(landmarks)
    depth = P + 1  # one background channel
    size = cam.height
    step = size / grid
    rows = ((np.arange(grid) + 0.5) * step - 0.5).round().astype(int)
    pix = np.stack(
        np.meshgrid(rows, rows, indexing="ij"), axis=-1
    ).reshape(-1, 2)
    origins, dirs = cast_rays(cam, pix)

    feats = np.zeros((grid * grid, depth), dtype=np.float64)
    t = np.zeros(len(pix))
    hit = np.zeros(len(pix), dtype=bool)
    alive = np.ones(len(pix), dtype=bool)
    for _ in range(128):
        if not alive.any():
            break
        p = origins[alive] + t[alive, None] * dirs[alive]
        d = shape.sdf(p)
        idx = np.nonzero(alive)[0]
        newly = d < 1e-4
        hit[idx[newly]] = True
        t[alive] += np.clip(d, 1e-4, None)
        alive[idx[newly]] = False
        alive &= t < 12.0
    hits = origins + t[:, None] * dirs
    for n in range(grid * grid):
        if hit[n]:
            nearest = int(np.argmin(np.linalg.norm(landmarks - hits[n], axis=1)))
            feats[n, nearest] = 1.0
        else:
            feats[n, P] = 1.0
    feats += rng.normal(0, feat_noise, size=feats.shape)
    return corpus.FeatureMap(grid, grid, depth, feats.reshape(grid, grid, depth))


# ---------------------------------------------------------------------------
# Full dataset emission


def emit_dataset(
    out_dir,
    n_views: int = 24,
    size: int = 64,
    shape: Optional[ShapeSpec] = None,
    n_landmarks: int = 8,
    feature_grid: int = 16,
    seed: int = 0,
    focal: Optional[float] = None,
    embed_dim: int = 12,
) -> corpus.CorpusManifest:
    """Render a complete synthetic corpus (silhouettes, dense features,
    embeddings, manifest) consumable by the pipeline."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    shape = shape or sphere_box_shape()
    cams = camera_ring(n_views, size=size, focal=focal, seed=seed)
    landmarks = surface_landmarks(shape, n_landmarks, seed=seed)
    rng = np.random.default_rng(seed)
    center = rng.normal(0, 10.0, size=embed_dim)

    entries = []
    for i, cam in enumerate(cams):
        sil = render_silhouette(shape, cam)
        sil_path = f"{cam.id}_sil.png"
        corpus.save_silhouette(sil, out / sil_path)
        dense = make_dense_features(
            shape, cam, landmarks, grid=feature_grid, seed=seed + i
        )
        dense_path = f"{cam.id}_dense.bin"
        corpus.save_feature_map(dense, out / dense_path)
        draws = center + rng.normal(0, 1.0, size=(10, embed_dim))
        emb = corpus.FeatureMap(10, 1, embed_dim,
                                draws.astype(np.float32).reshape(10, 1, embed_dim))
        emb_path = f"{cam.id}_emb.bin"
        corpus.save_feature_map(emb, out / emb_path)
        entries.append(
            corpus.ManifestEntry(
                id=cam.id,
                silhouette=sil_path,
                embedding=emb_path,
                dense=dense_path,
                gt_cluster="shape0",
            )
        )
    manifest = corpus.CorpusManifest(entries=tuple(entries), root=out)
    corpus.save_manifest(manifest, out / "manifest.json")
    np.save(out / "gt_landmarks.npy", landmarks)
    from .cameras import save_cameras

    save_cameras(cams, out / "gt_cameras.json")
    return corpus.load_manifest(out / "manifest.json")
