"""Orthographic structure from motion with missing data.

Recovers a row-orthonormal 2x3 motion block per image and a centered sparse
3D structure by alternating rank-3 SVD (with a classical metric upgrade),
Stiefel projection of every motion block, least-squares structure refits,
and imputation of missing observations. All linear algebra runs in float64;
rank-3 truncation is too sensitive for anything less.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .correspondence import ObservationMatrix


@dataclass(frozen=True)
class OrthographicCamera:
    M: np.ndarray  # (2, 3), row-orthonormal after factorization
    t: np.ndarray  # (2,), pixels

    def viewing_direction(self) -> np.ndarray:
        return np.cross(self.M[0], self.M[1])


@dataclass(frozen=True)
class SparseStructure:
    points: np.ndarray  # (P, 3), centered
    gauge_note: str = ""


@dataclass(frozen=True)
class FactorizationResult:
    cameras: Sequence[OrthographicCamera]
    structure: SparseStructure
    residual: float  # RMS pixels over visible entries
    converged: bool
    iterations: int


def project_stiefel(A: np.ndarray) -> np.ndarray:
    """Nearest matrix with orthonormal rows in Frobenius norm: U [I|0] V^T."""
    A = np.asarray(A, dtype=np.float64)
    if not np.isfinite(A).all():
        raise ValueError("non-finite input")
    U, s, Vt = np.linalg.svd(A, full_matrices=False)
    if s[-1] < 1e-12 * max(s[0], 1.0):
        raise ValueError("rank-deficient input (collinear rows)")
    return U @ Vt


def reprojection_residual(
    cameras: Sequence[OrthographicCamera],
    structure: SparseStructure,
    obs: ObservationMatrix,
) -> float:
    """RMS pixel error of M p + t against visible observations."""
    P = structure.points
    errs = []
    for i, cam in enumerate(cameras):
        vis = obs.mask[i]
        if not vis.any():
            continue
        pred = cam.M @ P[vis].T + cam.t[:, None]
        meas = obs.W[2 * i : 2 * i + 2, vis]
        errs.append(((pred - meas) ** 2).sum(axis=0))
    if not errs:
        return 0.0
    sq = np.concatenate(errs)
    return float(np.sqrt(sq.mean()))


def _metric_upgrade(Mhat: np.ndarray) -> np.ndarray:
    """Solve the Tomasi-Kanade metric constraints for the 3x3 upgrade G so
    rows of each 2x3 block of Mhat @ G become (nearly) orthonormal."""
    F = Mhat.shape[0] // 2

    def quad_row(a, b):
        return np.array(
            [
                a[0] * b[0],
                a[0] * b[1] + a[1] * b[0],
                a[0] * b[2] + a[2] * b[0],
                a[1] * b[1],
                a[1] * b[2] + a[2] * b[1],
                a[2] * b[2],
            ]
        )

    rows, rhs = [], []
    for i in range(F):
        u, v = Mhat[2 * i], Mhat[2 * i + 1]
        rows += [quad_row(u, u), quad_row(v, v), quad_row(u, v)]
        rhs += [1.0, 1.0, 0.0]
    sol, *_ = np.linalg.lstsq(np.array(rows), np.array(rhs), rcond=None)
    L = np.array(
        [
            [sol[0], sol[1], sol[2]],
            [sol[1], sol[3], sol[4]],
            [sol[2], sol[4], sol[5]],
        ]
    )
    w, V = np.linalg.eigh(L)
    w = np.clip(w, 1e-9, None)  # nearest positive definite
    return V @ np.diag(np.sqrt(w))


def rigid_factorize(
    obs: ObservationMatrix, max_iters: int = 50, tol: float = 1e-8
) -> FactorizationResult:
    """Factorize the observation matrix into rigid orthographic cameras and
    centered structure, imputing missing entries from current reprojections."""
    F = len(obs.image_ids)
    P = obs.W.shape[1]
    if F < 3 or P < 4:
        raise ValueError(
            f"under-constrained: {F} images, {P} tracks (need >= 3 and >= 4)"
        )
    mask2 = np.repeat(obs.mask, 2, axis=0)

    # Translation init: mean of each image's visible observations.
    t = np.zeros((F, 2))
    for i in range(F):
        vis = obs.mask[i]
        t[i, 0] = obs.W[2 * i, vis].mean()
        t[i, 1] = obs.W[2 * i + 1, vis].mean()

    def centered(t_cur):
        return obs.W - t_cur.reshape(-1)[:, None]

    # Motion/structure init: column-mean imputation, rank-3 SVD, metric
    # upgrade, Stiefel projection of every 2x3 block.
    Wc = centered(t)
    filled = np.where(mask2, Wc, 0.0)
    counts = mask2.sum(axis=0)
    col_mean = np.divide(
        filled.sum(axis=0), counts, out=np.zeros(P), where=counts > 0
    )
    filled = np.where(mask2, Wc, col_mean[None, :])

    M = np.zeros((2 * F, 3))
    S = np.zeros((3, P))
    prev_res = np.inf
    best = None
    converged = False
    it = 0
    for it in range(1, max_iters + 1):
        U, s, Vt = np.linalg.svd(filled, full_matrices=False)
        Mhat = U[:, :3] * np.sqrt(s[:3])
        try:
            Mhat = Mhat @ _metric_upgrade(Mhat)
        except np.linalg.LinAlgError:
            pass  # fall back to the affine factor; Stiefel step still applies
        for i in range(F):
            M[2 * i : 2 * i + 2] = project_stiefel(Mhat[2 * i : 2 * i + 2])

        # Alternate visible-only least squares between structure, motion and
        # translation; imputed entries never enter these solves.
        for _ in range(3):
            for j in range(P):
                vis = obs.mask[:, j]
                rows = np.repeat(vis, 2)
                S[:, j], *_ = np.linalg.lstsq(
                    M[rows], centered(t)[rows, j], rcond=None
                )
            for i in range(F):
                vis = obs.mask[i]
                Sv = S[:, vis]
                A = np.concatenate([Sv.T, np.ones((vis.sum(), 1))], axis=1)
                b = obs.W[2 * i : 2 * i + 2, vis].T
                sol, *_ = np.linalg.lstsq(A, b, rcond=None)
                M[2 * i : 2 * i + 2] = project_stiefel(sol[:3].T)
                Mi = M[2 * i : 2 * i + 2]
                t[i] = (obs.W[2 * i : 2 * i + 2, vis] - Mi @ Sv).mean(axis=1)

        Wc = centered(t)
        reproj = M @ S
        filled = np.where(mask2, Wc, reproj)
        diff = reproj[mask2] - Wc[mask2]
        res = float(np.sqrt((diff**2).mean()))
        if best is None or res <= best[0]:
            best = (res, M.copy(), S.copy(), t.copy(), it)
        if abs(prev_res - res) < tol:
            converged = True
            break
        prev_res = res

    res, M, S, t, it = best

    # Fix the translation gauge: center the structure.
    center = S.mean(axis=1)
    S = S - center[:, None]
    cams = []
    for i in range(F):
        Mi = M[2 * i : 2 * i + 2]
        cams.append(OrthographicCamera(M=Mi, t=t[i] + Mi @ center))
    structure = SparseStructure(
        points=S.T.copy(),
        gauge_note="arbitrary global rotation/reflection; centered at origin",
    )
    return FactorizationResult(
        cameras=tuple(cams),
        structure=structure,
        residual=res,
        converged=converged,
        iterations=it,
    )
