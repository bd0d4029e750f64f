"""Reconstruction scoring: CPD alignment, Chamfer distance, F-score, and the
reprojection-error filter that decides which clusters are kept."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree

from .extract import Mesh

KEEP_THRESHOLD = 0.4  # running silhouette BCE above this marks a bad cluster


@dataclass(frozen=True)
class CpdConfig:
    max_iters: int = 150
    tol: float = 1e-8
    outlier_weight: float = 0.1
    shortlist_iters: int = 60  # EM budget per rotation start before refining
    shortlist_points: int = 150  # subsample size for the rotation starts


@dataclass(frozen=True)
class AlignmentResult:
    rotation: np.ndarray  # (3, 3), det +1
    scale: float
    translation: np.ndarray  # (3,)
    rmse: float

    def apply(self, points: np.ndarray) -> np.ndarray:
        return self.scale * points @ self.rotation.T + self.translation


@dataclass(frozen=True)
class MetricReport:
    chamfer: float
    fscore: float
    tau: float
    n_samples: int


def _octahedral_rotations():
    """The 24 rotations of the cube: signed permutation matrices, det +1."""
    from itertools import permutations, product

    out = []
    for perm in permutations(range(3)):
        for signs in product((1.0, -1.0), repeat=3):
            R = np.zeros((3, 3))
            for row, (col, sg) in enumerate(zip(perm, signs)):
                R[row, col] = sg
            if np.linalg.det(R) > 0:
                out.append(R)
    return out


def _cpd_em(X, Y, config, R0, max_iters):
    """One EM run of rigid + uniform-scale CPD from the initial rotation R0;
    returns (R, s, t, sigma2)."""
    N, M, D = len(X), len(Y), 3
    w = config.outlier_weight
    R = R0
    s = 1.0
    t = np.zeros(3)
    TY0 = Y @ R.T
    sigma2 = (
        (X**2).sum() * M + (TY0**2).sum() * N
        - 2 * float(X.sum(0) @ TY0.sum(0))
    ) / (D * M * N)
    prev_q = np.inf
    x2 = (X**2).sum(axis=1)
    for _ in range(max_iters):
        TY = s * Y @ R.T + t
        d2 = x2[:, None] + (TY**2).sum(axis=1)[None, :] - 2 * X @ TY.T
        np.clip(d2, 0, None, out=d2)
        num = np.exp(-d2 / (2 * sigma2))
        c = (2 * np.pi * sigma2) ** (D / 2) * (w / (1 - w)) * (M / N)
        den = num.sum(axis=1) + c
        P = num / den[:, None]  # (N, M) posterior

        Np = P.sum()
        if Np < 1e-12:
            break
        px = P.sum(axis=0)  # (M,)
        pxn = P.sum(axis=1)  # (N,)
        mu_x = (pxn @ X) / Np
        mu_y = (px @ Y) / Np
        Xh = X - mu_x
        Yh = Y - mu_y
        A = Xh.T @ P @ Yh
        U, sv, Vt = np.linalg.svd(A)
        C = np.eye(3)
        C[2, 2] = np.sign(np.linalg.det(U @ Vt))
        R = U @ C @ Vt
        denom = float(np.einsum("m,mi,mi->", px, Yh, Yh))
        s = float(np.trace(np.diag(sv) @ C)) / denom
        if s <= 0:
            s = 1e-6
        t = mu_x - s * R @ mu_y
        xPx = float(np.einsum("n,ni,ni->", pxn, Xh, Xh))
        sigma2 = max((xPx - s * np.trace(np.diag(sv) @ C)) / (Np * D), 1e-12)

        q = xPx - 2 * s * np.trace(np.diag(sv) @ C) + s * s * denom
        q = q / (2 * sigma2) + Np * D / 2 * np.log(sigma2)
        if abs(prev_q - q) < config.tol * (abs(prev_q) + 1):
            break
        prev_q = q
    return R, s, t, sigma2


def cpd_align(source: np.ndarray, target: np.ndarray,
              config: CpdConfig = CpdConfig()) -> AlignmentResult:
    """Rigid + uniform-scale Coherent Point Drift mapping source onto target.

    EM over a Gaussian mixture whose components sit at the transformed source
    points; the M-step is the weighted Umeyama update. EM is a local method,
    so it restarts from each of the 24 octahedral rotations, shortlists by
    nearest-neighbor error, and refines the best start to convergence.
    """
    X = np.asarray(target, float)  # data points (N, 3)
    Y = np.asarray(source, float)  # GMM centroids (M, 3)
    N, M = len(X), len(Y)
    if N < 4 or M < 4:
        raise ValueError("need at least 4 points in each set")
    if np.linalg.matrix_rank(Y - Y.mean(0)) < 2:
        raise ValueError("degenerate source point set")

    # Pre-normalize both clouds to zero mean and unit RMS radius; EM with a
    # free scale collapses toward a shrunken blob when the target is much
    # larger than the source, and at scale ~1 it does not.
    mu_x, mu_y = X.mean(axis=0), Y.mean(axis=0)
    rad_x = float(np.sqrt(((X - mu_x) ** 2).sum(axis=1).mean()))
    rad_y = float(np.sqrt(((Y - mu_y) ** 2).sum(axis=1).mean()))
    Xn = (X - mu_x) / rad_x
    Yn = (Y - mu_y) / rad_y

    tree = cKDTree(Xn)

    def nn_rmse(R, s, t):
        d, _ = tree.query(s * Yn @ R.T + t)
        return float(np.sqrt((d**2).mean()))

    # Shortlist the rotation starts on subsampled clouds (EM cost is
    # quadratic in the point count), then refine the winner on everything.
    rng = np.random.default_rng(0)
    k = config.shortlist_points
    Xs = Xn[rng.choice(N, k, replace=False)] if N > k else Xn
    Ys = Yn[rng.choice(M, k, replace=False)] if M > k else Yn
    ranked = []
    for i, R0 in enumerate(_octahedral_rotations()):
        R, s, t, _ = _cpd_em(Xs, Ys, config, R0, config.shortlist_iters)
        ranked.append((nn_rmse(R, s, t), i, R0))
    ranked.sort(key=lambda r: r[0])

    best = None
    for _, _, R0 in ranked[:6]:
        R, s, t, _ = _cpd_em(Xn, Yn, config, R0, config.max_iters)
        err = nn_rmse(R, s, t)
        if best is None or err < best[0]:
            best = (err, R, s, t)
    _, R, s, t = best

    # Undo the normalization: x = rad_x * (s R (y - mu_y)/rad_y + t) + mu_x.
    s_full = s * rad_x / rad_y
    t_full = rad_x * t + mu_x - s_full * R @ mu_y
    d, _ = cKDTree(X).query(s_full * Y @ R.T + t_full)
    return AlignmentResult(
        rotation=R, scale=s_full, translation=t_full,
        rmse=float(np.sqrt((d**2).mean())),
    )


def chamfer(A: np.ndarray, B: np.ndarray) -> float:
    """Symmetric mean nearest-neighbor distance, halved."""
    A, B = np.asarray(A, float), np.asarray(B, float)
    if len(A) == 0 or len(B) == 0:
        raise ValueError("chamfer requires non-empty point sets")
    d_ab, _ = cKDTree(B).query(A)
    d_ba, _ = cKDTree(A).query(B)
    return 0.5 * (float(d_ab.mean()) + float(d_ba.mean()))


def fscore(A: np.ndarray, B: np.ndarray, tau: float) -> float:
    """Harmonic mean of precision/recall at distance threshold tau."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    A, B = np.asarray(A, float), np.asarray(B, float)
    if len(A) == 0 or len(B) == 0:
        raise ValueError("fscore requires non-empty point sets")
    d_ab, _ = cKDTree(B).query(A)
    d_ba, _ = cKDTree(A).query(B)
    precision = float((d_ab <= tau).mean())
    recall = float((d_ba <= tau).mean())
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def filter_clusters(reports: Sequence[tuple], threshold: float = KEEP_THRESHOLD):
    """Keep cluster ids whose reprojection error is <= threshold, preserving
    input order. `reports` is a sequence of (cluster_id, error)."""
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    return [cid for cid, err in reports if err <= threshold]


def sample_mesh_points(mesh: Mesh, n: int = 4096, seed: int = 0) -> np.ndarray:
    """Area-weighted uniform surface samples."""
    if mesh.is_empty():
        raise ValueError("cannot sample an empty mesh")
    rng = np.random.default_rng(seed)
    v = mesh.vertices
    tri = mesh.triangles
    a = v[tri[:, 1]] - v[tri[:, 0]]
    b = v[tri[:, 2]] - v[tri[:, 0]]
    areas = 0.5 * np.linalg.norm(np.cross(a, b), axis=1)
    probs = areas / areas.sum()
    choice = rng.choice(len(tri), size=n, p=probs)
    u = rng.random((n, 1))
    w = rng.random((n, 1))
    flip = (u + w) > 1
    u = np.where(flip, 1 - u, u)
    w = np.where(flip, 1 - w, w)
    return v[tri[choice, 0]] + u * a[choice] + w * b[choice]


def normalize_to_unit_diagonal(points: np.ndarray):
    """Scale/translate so the bounding-box diagonal is 1 and the box center
    sits at the origin; returns (points, scale, center)."""
    pts = np.asarray(points, float)
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    diag = float(np.linalg.norm(hi - lo))
    if diag == 0:
        raise ValueError("degenerate point set")
    center = (lo + hi) / 2
    return (pts - center) / diag, diag, center


def evaluate_reconstruction(
    recon_points: np.ndarray, gt_points: np.ndarray, tau: float = 0.05
) -> MetricReport:
    """Normalize the reference to unit diagonal, CPD-align the reconstruction
    onto it, then report Chamfer and F-score."""
    gt_n, _, _ = normalize_to_unit_diagonal(gt_points)
    rec_n, _, _ = normalize_to_unit_diagonal(recon_points)
    # Align on a subsample (EM cost is quadratic), score the full clouds.
    rng = np.random.default_rng(0)
    cap = 1024
    rec_s = rec_n[rng.choice(len(rec_n), cap, replace=False)] if len(rec_n) > cap else rec_n
    gt_s = gt_n[rng.choice(len(gt_n), cap, replace=False)] if len(gt_n) > cap else gt_n
    align = cpd_align(rec_s, gt_s)
    rec_aligned = align.apply(rec_n)
    return MetricReport(
        chamfer=chamfer(rec_aligned, gt_n),
        fscore=fscore(rec_aligned, gt_n, tau),
        tau=tau,
        n_samples=len(rec_aligned),
    )
