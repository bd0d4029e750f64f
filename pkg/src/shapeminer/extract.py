"""Mesh extraction from a trained occupancy field."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from skimage import measure

from .field import OccupancyField, positional_encoding


@dataclass(frozen=True)
class VolumeGrid:
    resolution: int
    bounds: tuple  # ((xmin, ymin, zmin), (xmax, ymax, zmax))
    values: np.ndarray  # (N, N, N) occupancy probabilities in [0, 1]

    def __post_init__(self):
        lo, hi = np.asarray(self.bounds[0]), np.asarray(self.bounds[1])
        if not (hi > lo).all():
            raise ValueError("degenerate bounds")
        v = np.asarray(self.values)
        if not np.isfinite(v).all() or v.min() < 0 or v.max() > 1:
            raise ValueError("grid values must be finite and within [0, 1]")

    def cell_size(self) -> np.ndarray:
        lo, hi = np.asarray(self.bounds[0]), np.asarray(self.bounds[1])
        return (hi - lo) / (self.resolution - 1)


@dataclass(frozen=True)
class Mesh:
    vertices: np.ndarray  # (V, 3)
    triangles: np.ndarray  # (T, 3) int

    def __post_init__(self):
        v = np.asarray(self.vertices, float).reshape(-1, 3)
        t = np.asarray(self.triangles, int).reshape(-1, 3)
        if t.size and (t.min() < 0 or t.max() >= len(v)):
            raise ValueError("triangle index out of range")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", t)

    def is_empty(self) -> bool:
        return len(self.triangles) == 0


@torch.no_grad()
def sample_grid(
    field_net: OccupancyField,
    resolution: int,
    bounds: tuple,
    alpha: float = None,
    chunk: int = 65536,
) -> VolumeGrid:
    """Evaluate 1 - exp(-sigma) at every voxel center of a regular grid."""
    if resolution < 8:
        raise ValueError("resolution must be >= 8")
    if alpha is None:
        alpha = float(field_net.L)
    lo, hi = np.asarray(bounds[0], float), np.asarray(bounds[1], float)
    axes = [np.linspace(lo[d], hi[d], resolution) for d in range(3)]
    X, Y, Z = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([X, Y, Z], axis=-1).reshape(-1, 3)
    dtype = next(field_net.parameters()).dtype
    vals = np.empty(len(pts))
    for s in range(0, len(pts), chunk):
        p = torch.tensor(pts[s : s + chunk], dtype=dtype)
        sigma = field_net(positional_encoding(p, alpha, field_net.L))
        vals[s : s + chunk] = 1.0 - np.exp(-sigma.cpu().numpy())
    return VolumeGrid(
        resolution=resolution,
        bounds=(tuple(lo), tuple(hi)),
        values=vals.reshape(resolution, resolution, resolution),
    )


def marching_cubes(grid: VolumeGrid, iso: float = 0.5) -> Mesh:
    """Extract the iso-surface with linear edge interpolation; an iso level
    outside the grid's value range yields an empty mesh."""
    v = grid.values
    if not (v.min() < iso < v.max()):
        return Mesh(np.zeros((0, 3)), np.zeros((0, 3), int))
    verts, faces, _, _ = measure.marching_cubes(
        v, level=iso, spacing=tuple(grid.cell_size())
    )
    verts = verts + np.asarray(grid.bounds[0])
    # Drop zero-area triangles left by degenerate cube configurations.
    a = verts[faces[:, 1]] - verts[faces[:, 0]]
    b = verts[faces[:, 2]] - verts[faces[:, 0]]
    area2 = np.linalg.norm(np.cross(a, b), axis=1)
    return Mesh(verts, faces[area2 > 1e-14])


def largest_component(mesh: Mesh) -> Mesh:
    """Keep the connected component with the most triangles."""
    if mesh.is_empty():
        return mesh
    parent = np.arange(len(mesh.vertices))

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for tri in mesh.triangles:
        a = find(tri[0])
        for v in tri[1:]:
            parent[find(v)] = a
    tri_root = np.array([find(t[0]) for t in mesh.triangles])
    roots, counts = np.unique(tri_root, return_counts=True)
    keep_root = roots[counts.argmax()]
    tris = mesh.triangles[tri_root == keep_root]
    used = np.unique(tris)
    remap = -np.ones(len(mesh.vertices), int)
    remap[used] = np.arange(len(used))
    return Mesh(mesh.vertices[used], remap[tris])


def export_mesh(mesh: Mesh, path) -> None:
    """Write Wavefront OBJ: 'v x y z' lines then 1-based 'f i j k' lines."""
    lines = [f"v {x:.9g} {y:.9g} {z:.9g}" for x, y, z in mesh.vertices]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.triangles]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def import_mesh(path) -> Mesh:
    verts, faces = [], []
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "v":
            verts.append([float(x) for x in parts[1:4]])
        elif parts[0] == "f":
            faces.append([int(x.split("/")[0]) - 1 for x in parts[1:4]])
    return Mesh(
        np.array(verts, float).reshape(-1, 3),
        np.array(faces, int).reshape(-1, 3),
    )
