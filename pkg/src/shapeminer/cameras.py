"""Perspective cameras lifted from orthographic initializations.

The optimizer owns an unconstrained 2x3 matrix M_free; the actual rotation is
re-derived from it by Gram-Schmidt at every use, so the pose always stays on
the rotation manifold no matter what gradient steps did to M_free.

Conventions: pixel (u, v) = (col + 0.5, row + 0.5), principal point at the
image center, camera looks down +z in its own frame. World-to-camera is
x_cam = R x_world + T, so the camera center is C = -R^T T.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .factorization import OrthographicCamera


@dataclass(frozen=True)
class PerspectiveCamera:
    id: str
    M_free: np.ndarray  # (2, 3) unconstrained copy of the orthographic M
    T: np.ndarray  # (3,) camera-frame translation, world units
    f: float  # focal length, pixels
    width: int
    height: int

    def __post_init__(self):
        if self.f <= 0:
            raise ValueError("focal length must be positive")
        object.__setattr__(self, "M_free", np.asarray(self.M_free, float).reshape(2, 3))
        object.__setattr__(self, "T", np.asarray(self.T, float).reshape(3))

    def rotation(self) -> np.ndarray:
        return gram_schmidt_rows(self.M_free)

    def center(self) -> np.ndarray:
        R = self.rotation()
        return -R.T @ self.T


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray  # unit norm
    pixel: tuple


@dataclass(frozen=True)
class AnnealSchedule:
    z0: float = 5.0
    r_init: float = 0.5
    r_max: float = 4.0
    expand_epochs: int = 100

    def __post_init__(self):
        if not (0 < self.r_init <= self.r_max < self.z0):
            raise ValueError("need 0 < r_init <= r_max < z0")


def gram_schmidt_rows(M_free: np.ndarray) -> np.ndarray:
    """Orthonormalize the two rows and complete with their cross product."""
    M = np.asarray(M_free, dtype=np.float64)
    m1, m2 = M[0], M[1]
    n1 = np.linalg.norm(m1)
    if n1 < 1e-12:
        raise ValueError("first row is (near) zero")
    r1 = m1 / n1
    u2 = m2 - (r1 @ m2) * r1
    n2 = np.linalg.norm(u2)
    if n2 < 1e-12:
        raise ValueError("rows are (near) collinear")
    r2 = u2 / n2
    return np.stack([r1, r2, np.cross(r1, r2)])


def ortho_to_perspective(
    cam: OrthographicCamera, image_id: str, z0: float, width: int, height: int
) -> PerspectiveCamera:
    """Initialize a perspective camera: M_free from the orthographic M,
    T = [0, 0, z0], focal length = the longer image side."""
    return PerspectiveCamera(
        id=image_id,
        M_free=np.array(cam.M, dtype=np.float64),
        T=np.array([0.0, 0.0, float(z0)]),
        f=float(max(width, height)),
        width=width,
        height=height,
    )


def cast_ray(cam: PerspectiveCamera, pixel: tuple) -> Ray:
    """Ray through pixel (i, j) = (row, col), unit direction in world space."""
    i, j = pixel
    R = cam.rotation()
    cx, cy = cam.width / 2.0, cam.height / 2.0
    d_cam = np.array([(j + 0.5 - cx) / cam.f, (i + 0.5 - cy) / cam.f, 1.0])
    d_world = R.T @ d_cam
    return Ray(
        origin=-R.T @ cam.T,
        direction=d_world / np.linalg.norm(d_world),
        pixel=(i, j),
    )


def cast_rays(cam: PerspectiveCamera, pixels_ij: np.ndarray):
    """Vectorized cast_ray: pixels_ij is (N, 2) rows of (i, j).

    Returns (origins (N,3), unit directions (N,3))."""
    pix = np.asarray(pixels_ij, dtype=np.float64)
    R = cam.rotation()
    cx, cy = cam.width / 2.0, cam.height / 2.0
    d_cam = np.stack(
        [
            (pix[:, 1] + 0.5 - cx) / cam.f,
            (pix[:, 0] + 0.5 - cy) / cam.f,
            np.ones(len(pix)),
        ],
        axis=1,
    )
    d_world = d_cam @ R  # = (R.T @ d_cam.T).T
    d_world /= np.linalg.norm(d_world, axis=1, keepdims=True)
    origin = -R.T @ cam.T
    return np.broadcast_to(origin, d_world.shape).copy(), d_world


def anneal_bounds(schedule: AnnealSchedule, epoch: int) -> tuple:
    """Near/far planes confined around z0, expanding linearly with epoch."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    frac = min(1.0, epoch / schedule.expand_epochs) if schedule.expand_epochs else 1.0
    r = schedule.r_init + (schedule.r_max - schedule.r_init) * frac
    return schedule.z0 - r, schedule.z0 + r


def save_cameras(cams: Sequence[PerspectiveCamera], path) -> None:
    records = [
        {
            "id": c.id,
            "M_free": [float(x) for x in c.M_free.reshape(-1)],
            "T": [float(x) for x in c.T],
            "f": float(c.f),
            "width": c.width,
            "height": c.height,
        }
        for c in cams
    ]
    Path(path).write_text(json.dumps(records, indent=1))


def load_cameras(path) -> list[PerspectiveCamera]:
    records = json.loads(Path(path).read_text())
    return [
        PerspectiveCamera(
            id=r["id"],
            M_free=np.array(r["M_free"], float).reshape(2, 3),
            T=np.array(r["T"], float),
            f=float(r["f"]),
            width=int(r["width"]),
            height=int(r["height"]),
        )
        for r in records
    ]


def perturb_rotation(cam: PerspectiveCamera, angle_deg: float, rng) -> PerspectiveCamera:
    """Apply per-axis Gaussian rotation noise (standard deviation
    ``angle_deg`` about each camera axis) to the derived pose and refresh
    M_free; used by harnesses to simulate rough initializations."""
    w = np.deg2rad(angle_deg) * rng.normal(size=3)
    th = np.linalg.norm(w)
    if th < 1e-12:
        return replace(cam, M_free=cam.rotation()[:2].copy())
    axis = w / th
    K = np.array(
        [[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]]
    )
    Rp = np.eye(3) + np.sin(th) * K + (1 - np.cos(th)) * (K @ K)
    R_new = cam.rotation() @ Rp
    return replace(cam, M_free=R_new[:2].copy())
