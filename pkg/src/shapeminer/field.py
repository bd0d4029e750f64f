"""Bundle-adjusting neural occupancy field.

A small MLP maps progressively-encoded 3D points to a nonnegative density;
the soft occupancy of a ray is 1 - exp(-sum of densities along it) and is
supervised with binary cross-entropy against silhouettes. Camera parameters
(f, M_free, T per image) are optimized jointly with the field; the rotation
is re-derived from M_free by Gram-Schmidt inside the computation graph so it
stays on the rotation manifold.

torch supplies the reverse-mode gradient engine; every gradient path here is
checked against central finite differences in the test suite.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn

from .cameras import AnnealSchedule, PerspectiveCamera, anneal_bounds

BCE_EPS = 1e-7
STATE_MAGIC = b"3DMS"
STATE_VERSION = 1


@dataclass(frozen=True)
class EncodingSchedule:
    L: int = 10
    alpha_start: float = 1.0
    alpha_step_epochs: int = 20
    alpha_max: float = 10.0

    def alpha_at(self, epoch: int) -> float:
        return min(self.alpha_max, self.alpha_start + epoch / self.alpha_step_epochs)


@dataclass
class TrainConfig:
    rays_per_iter: int = 32
    samples_per_ray: int = 32
    epochs: int = 300
    iters_per_epoch: int = 32
    lr_field: float = 1e-3
    lr_cam: float = 1e-3
    cam_lr_decay: float = 0.1
    cam_lr_decay_every: int = 100
    lambda_g: float = 0.01
    patch_size: int = 2
    seed: int = 0
    optimize_cameras: bool = True
    use_smoothness: bool = True
    dtype: str = "float32"

    def torch_dtype(self):
        return {"float32": torch.float32, "float64": torch.float64}[self.dtype]


def encoding_weights(alpha: float, L: int, dtype=torch.float64) -> torch.Tensor:
    """Coarse-to-fine band gates: 0 below alpha, cosine ramp across one band."""
    k = torch.arange(L, dtype=dtype)
    d = torch.as_tensor(alpha, dtype=dtype) - k
    w = torch.where(
        d < 0,
        torch.zeros_like(d),
        torch.where(d < 1, (1 - torch.cos(d * torch.pi)) / 2, torch.ones_like(d)),
    )
    return w


def positional_encoding(x: torch.Tensor, alpha: float, L: int = 10) -> torch.Tensor:
    """Map (..., 3) points to (..., 3 + 6L): raw coords then per band k the
    gated cos/sin of 2^k * pi * x."""
    if L < 1:
        raise ValueError("L must be >= 1")
    w = encoding_weights(alpha, L, dtype=x.dtype).to(x.device)
    freqs = (2.0 ** torch.arange(L, dtype=x.dtype, device=x.device)) * torch.pi
    ang = x[..., None, :] * freqs[:, None]  # (..., L, 3)
    enc = torch.cat([torch.cos(ang), torch.sin(ang)], dim=-1)  # (..., L, 6)
    enc = enc * w[:, None].to(x.dtype)
    return torch.cat([x, enc.flatten(-2)], dim=-1)


class OccupancyField(nn.Module):
    """3 + 6L inputs -> 4 x 128 hidden (softplus) -> softplus density."""

    def __init__(self, L: int = 10, hidden: int = 128, depth: int = 4,
                 dtype=torch.float32, seed: int = 0):
        super().__init__()
        self.L = L
        gen = torch.Generator().manual_seed(seed)
        dims = [3 + 6 * L] + [hidden] * depth + [1]
        layers = []
        for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
            lin = nn.Linear(a, b, dtype=dtype)
            with torch.no_grad():
                bound = 1.0 / np.sqrt(a)
                lin.weight.uniform_(-bound, bound, generator=gen)
                lin.bias.uniform_(-bound, bound, generator=gen)
            layers.append(lin)
        # Start nearly transparent so carving begins from empty space.
        with torch.no_grad():
            layers[-1].bias.fill_(-2.0)
        self.layers = nn.ModuleList(layers)
        self.act = nn.Softplus(beta=10.0)

    def forward(self, encoded: torch.Tensor) -> torch.Tensor:
        h = encoded
        for lin in self.layers[:-1]:
            h = self.act(lin(h))
        return nn.functional.softplus(self.layers[-1](h)).squeeze(-1)

    def density(self, points: torch.Tensor, alpha: float) -> torch.Tensor:
        return self(positional_encoding(points, alpha, self.L))


def ray_occupancy(densities: torch.Tensor) -> torch.Tensor:
    """Soft maximum occupancy along the last axis: 1 - exp(-sum sigma)."""
    return 1.0 - torch.exp(-densities.sum(dim=-1))


def silhouette_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Binary cross-entropy with predictions clamped to [eps, 1-eps]."""
    p = pred.clamp(BCE_EPS, 1.0 - BCE_EPS)
    return -(target * torch.log(p) + (1.0 - target) * torch.log1p(-p))


def silhouette_loss_from_sums(ray_sums: torch.Tensor,
                              target: torch.Tensor) -> torch.Tensor:
    """The same binary cross-entropy, written in terms of S = sum of
    densities so that -log(1 - occupancy) = S exactly.

    Unlike clamping the occupancy, this keeps a nonzero gradient on
    background rays even when the field is fully opaque, so an all-opaque
    field is not an absorbing state of the optimization.
    """
    S = ray_sums.clamp_min(BCE_EPS)
    fg = -torch.log(-torch.expm1(-S))
    return target * fg + (1.0 - target) * S


def expected_depth(t_vals: torch.Tensor, densities: torch.Tensor) -> torch.Tensor:
    """Compositing-weighted mean depth along the last axis.

    delta_i = t_{i+1} - t_i (last delta = mean delta), alpha_i =
    1 - exp(-sigma_i delta_i), w_i = T_i alpha_i. Empty rays return 0 via the
    epsilon guard on the weight sum.
    """
    deltas = t_vals[..., 1:] - t_vals[..., :-1]
    if (deltas <= 0).any():
        raise ValueError("sample depths must be strictly increasing")
    mean_d = deltas.mean(dim=-1, keepdim=True)
    deltas = torch.cat([deltas, mean_d], dim=-1)
    alphas = 1.0 - torch.exp(-densities * deltas)
    trans = torch.cumprod(
        torch.cat([torch.ones_like(alphas[..., :1]), 1.0 - alphas[..., :-1]], dim=-1),
        dim=-1,
    )
    w = trans * alphas
    return (w * t_vals).sum(dim=-1) / (w.sum(dim=-1).clamp_min(1e-12))


def depth_smoothness_loss(patch: torch.Tensor) -> torch.Tensor:
    """Mean squared depth difference over horizontally and vertically
    adjacent ray pairs of a (..., ph, pw) patch of expected depths."""
    if patch.shape[-1] < 2 or patch.shape[-2] < 2:
        raise ValueError("patch must be at least 2x2")
    dh = patch[..., :, 1:] - patch[..., :, :-1]
    dv = patch[..., 1:, :] - patch[..., :-1, :]
    total = (dh**2).sum() + (dv**2).sum()
    count = dh.numel() + dv.numel()
    return total / count


def compute_gradients(loss: torch.Tensor, params: dict) -> dict:
    """Reverse-mode gradients of a scalar loss for every named parameter.

    Raises with the offending name if any gradient is non-finite.
    """
    names = list(params)
    grads = torch.autograd.grad(
        loss, [params[n] for n in names], allow_unused=True, retain_graph=False
    )
    out = {}
    for name, g in zip(names, grads):
        if g is None:
            g = torch.zeros_like(params[name])
        if not torch.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
        out[name] = g
    return out


class CameraParams(nn.Module):
    """Per-image bundle parameters: M_free (F,2,3), T (F,3), f (F,)."""

    def __init__(self, cams: Sequence[PerspectiveCamera], dtype=torch.float32):
        super().__init__()
        self.ids = [c.id for c in cams]
        self.width = cams[0].width
        self.height = cams[0].height
        self.M_free = nn.Parameter(
            torch.tensor(np.stack([c.M_free for c in cams]), dtype=dtype)
        )
        self.T = nn.Parameter(torch.tensor(np.stack([c.T for c in cams]), dtype=dtype))
        self.f = nn.Parameter(torch.tensor([c.f for c in cams], dtype=dtype))

    def rotations(self, idx: torch.Tensor) -> torch.Tensor:
        """Gram-Schmidt rotations (N, 3, 3) for the selected images."""
        M = self.M_free[idx]
        m1, m2 = M[:, 0], M[:, 1]
        r1 = m1 / m1.norm(dim=-1, keepdim=True)
        u2 = m2 - (r1 * m2).sum(-1, keepdim=True) * r1
        r2 = u2 / u2.norm(dim=-1, keepdim=True)
        r3 = torch.cross(r1, r2, dim=-1)
        return torch.stack([r1, r2, r3], dim=1)

    def rays(self, idx: torch.Tensor, rows: torch.Tensor, cols: torch.Tensor):
        """Differentiable world rays for pixel (row, col) of image idx."""
        R = self.rotations(idx)
        f = self.f[idx]
        cx, cy = self.width / 2.0, self.height / 2.0
        d_cam = torch.stack(
            [
                (cols.to(f.dtype) + 0.5 - cx) / f,
                (rows.to(f.dtype) + 0.5 - cy) / f,
                torch.ones_like(f),
            ],
            dim=-1,
        )
        d_world = (R.transpose(1, 2) @ d_cam[..., None]).squeeze(-1)
        d_world = d_world / d_world.norm(dim=-1, keepdim=True)
        origins = -(R.transpose(1, 2) @ self.T[idx][..., None]).squeeze(-1)
        return origins, d_world

    def to_cameras(self) -> list[PerspectiveCamera]:
        out = []
        for i, cid in enumerate(self.ids):
            out.append(
                PerspectiveCamera(
                    id=cid,
                    M_free=self.M_free[i].detach().cpu().numpy().astype(float),
                    T=self.T[i].detach().cpu().numpy().astype(float),
                    f=float(self.f[i].detach()),
                    width=self.width,
                    height=self.height,
                )
            )
        return out


@dataclass
class TrainResult:
    field: OccupancyField
    cameras: list
    reprojection_error: float
    loss_history: list
    degenerate: bool = False


def _sample_depths(n_rays: int, samples: int, near: float, far: float,
                   gen, dtype) -> torch.Tensor:
    """Stratified uniform depths in [near, far], sorted per ray."""
    u = torch.rand(n_rays, samples, generator=gen, dtype=dtype)
    bins = torch.arange(samples, dtype=dtype)
    return near + (far - near) * (bins + u) / samples


def _foreground_indices(silhouettes: Sequence[np.ndarray]):
    fg, bg = [], []
    for sil in silhouettes:
        ys, xs = np.nonzero(sil)
        fg.append(np.stack([ys, xs], axis=1) if ys.size else np.zeros((0, 2), int))
        ys, xs = np.nonzero(sil == 0)
        bg.append(np.stack([ys, xs], axis=1) if ys.size else np.zeros((0, 2), int))
    return fg, bg


def _boundary_indices(silhouettes: Sequence[np.ndarray], width: int = 2):
    """Pixels within `width` of each silhouette edge (both sides)."""
    from scipy import ndimage

    out = []
    for sil in silhouettes:
        mask = sil > 0
        band = ndimage.binary_dilation(mask, iterations=width) & ~ndimage.binary_erosion(
            mask, iterations=width
        )
        ys, xs = np.nonzero(band)
        out.append(np.stack([ys, xs], axis=1) if ys.size else np.zeros((0, 2), int))
    return out


def train_cluster(
    silhouettes: Sequence[np.ndarray],
    cams: Sequence[PerspectiveCamera],
    config: TrainConfig,
    schedule: Optional[AnnealSchedule] = None,
    encoding: Optional[EncodingSchedule] = None,
    log_every: int = 0,
) -> TrainResult:
    """Jointly optimize the occupancy field and camera parameters against the
    silhouettes; returns the final running-mean BCE as reprojection error."""
    if len(silhouettes) != len(cams) or not cams:
        raise ValueError("need one silhouette per camera")
    # Ray batches are tiny; intra-op threading only adds dispatch overhead
    # and makes reductions order-dependent.
    torch.set_num_threads(1)
    schedule = schedule or AnnealSchedule()
    encoding = encoding or EncodingSchedule()
    dtype = config.torch_dtype()
    gen = torch.Generator().manual_seed(config.seed)

    sils = [np.asarray(s) for s in silhouettes]
    degenerate = all(s.sum() == 0 for s in sils)
    sil_t = torch.tensor(np.stack(sils), dtype=dtype)
    fg_idx, _ = _foreground_indices(sils)
    has_fg = [len(f) > 0 for f in fg_idx]
    bd_idx = _boundary_indices(sils)
    has_bd = [len(b) > 0 for b in bd_idx]
    F = len(cams)
    h, w = sils[0].shape

    field_net = OccupancyField(L=encoding.L, dtype=dtype, seed=config.seed)
    cam_params = CameraParams(cams, dtype=dtype)
    for p in cam_params.parameters():
        p.requires_grad_(config.optimize_cameras)

    groups = [{"params": list(field_net.parameters()), "lr": config.lr_field}]
    if config.optimize_cameras:
        groups.append({"params": list(cam_params.parameters()), "lr": config.lr_cam})
    opt = torch.optim.Adam(groups, betas=(0.9, 0.999), eps=1e-8)

    n_fg = config.rays_per_iter // 4
    n_bd = config.rays_per_iter // 2
    loss_history = []
    running = 0.0
    for epoch in range(config.epochs):
        alpha = encoding.alpha_at(epoch)
        near, far = anneal_bounds(schedule, epoch)
        if config.optimize_cameras and epoch > 0 and \
                epoch % config.cam_lr_decay_every == 0:
            opt.param_groups[-1]["lr"] *= config.cam_lr_decay

        epoch_bce = 0.0
        for _ in range(config.iters_per_epoch):
            img = torch.randint(F, (config.rays_per_iter,), generator=gen)
            rows = torch.randint(h, (config.rays_per_iter,), generator=gen)
            cols = torch.randint(w, (config.rays_per_iter,), generator=gen)
            # Bias a quarter of the batch toward foreground pixels and half
            # toward the silhouette boundary band, where the decision edge
            # (and hence the reprojected IoU) is actually determined.
            for r in range(n_fg):
                i = int(img[r])
                if has_fg[i]:
                    j = int(torch.randint(len(fg_idx[i]), (1,), generator=gen))
                    rows[r], cols[r] = int(fg_idx[i][j][0]), int(fg_idx[i][j][1])
            for r in range(n_fg, n_fg + n_bd):
                i = int(img[r])
                if has_bd[i]:
                    j = int(torch.randint(len(bd_idx[i]), (1,), generator=gen))
                    rows[r], cols[r] = int(bd_idx[i][j][0]), int(bd_idx[i][j][1])

            origins, dirs = cam_params.rays(img, rows, cols)
            t_vals = _sample_depths(
                config.rays_per_iter, config.samples_per_ray, near, far, gen, dtype
            )
            pts = origins[:, None, :] + t_vals[..., None] * dirs[:, None, :]
            sigma = field_net.density(pts, alpha)
            target = sil_t[img, rows, cols]
            # Riemann line integral of the density: the delta factor keeps
            # ray opacity invariant to the annealing shell width, so the
            # widening schedule does not rescale the field's target values.
            delta = (far - near) / config.samples_per_ray
            bce = silhouette_loss_from_sums(
                sigma.sum(dim=-1) * delta, target
            ).mean()

            loss = bce
            if config.use_smoothness and config.lambda_g > 0:
                ps = config.patch_size
                pi = int(torch.randint(F, (1,), generator=gen))
                pr = int(torch.randint(h - ps + 1, (1,), generator=gen))
                pc = int(torch.randint(w - ps + 1, (1,), generator=gen))
                gr, gc = torch.meshgrid(
                    torch.arange(pr, pr + ps), torch.arange(pc, pc + ps),
                    indexing="ij",
                )
                p_img = torch.full((ps * ps,), pi, dtype=torch.long)
                po, pd = cam_params.rays(p_img, gr.flatten(), gc.flatten())
                p_t = _sample_depths(ps * ps, config.samples_per_ray, near, far,
                                     gen, dtype)
                p_pts = po[:, None, :] + p_t[..., None] * pd[:, None, :]
                p_sigma = field_net.density(p_pts, alpha) * delta
                depths = expected_depth(p_t, p_sigma).reshape(ps, ps)
                loss = loss + config.lambda_g * depth_smoothness_loss(depths)

            if not torch.isfinite(loss):
                raise FloatingPointError(
                    f"training diverged at epoch {epoch}: loss={float(loss)}"
                )
            opt.zero_grad()
            loss.backward()
            opt.step()
            epoch_bce += float(bce.detach())

        running = epoch_bce / config.iters_per_epoch
        loss_history.append(running)
        if log_every and (epoch + 1) % log_every == 0:
            print(f"epoch {epoch + 1}/{config.epochs} alpha={alpha:.2f} "
                  f"bce={running:.4f}")

    return TrainResult(
        field=field_net,
        cameras=cam_params.to_cameras(),
        reprojection_error=running,
        loss_history=loss_history,
        degenerate=degenerate,
    )


@torch.no_grad()
def render_occupancy(
    field_net: OccupancyField,
    cam: PerspectiveCamera,
    alpha: float,
    near: float,
    far: float,
    samples: int = 64,
    chunk: int = 4096,
) -> np.ndarray:
    """Render the soft silhouette seen by a camera (deterministic midpoint
    depth sampling); returns (H, W) occupancies in [0, 1)."""
    dtype = next(field_net.parameters()).dtype
    cam_params = CameraParams([cam], dtype=dtype)
    h, w = cam.height, cam.width
    rows, cols = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    rows = torch.tensor(rows.ravel())
    cols = torch.tensor(cols.ravel())
    t_vals = torch.linspace(0, 1, samples, dtype=dtype) * (far - near) + near
    delta = (far - near) / samples
    out = torch.empty(h * w, dtype=dtype)
    for s in range(0, h * w, chunk):
        e = min(s + chunk, h * w)
        idx = torch.zeros(e - s, dtype=torch.long)
        origins, dirs = cam_params.rays(idx, rows[s:e], cols[s:e])
        pts = origins[:, None, :] + t_vals[None, :, None] * dirs[:, None, :]
        out[s:e] = ray_occupancy(field_net.density(pts, alpha) * delta)
    return out.reshape(h, w).cpu().numpy()


def save_state(result: TrainResult, encoding: EncodingSchedule, path) -> None:
    """state.bin: magic, version, little-endian f32 parameter blob preceded
    by a JSON header describing shapes and camera records."""
    params = [p.detach().cpu().numpy() for p in result.field.parameters()]
    header = {
        "L": result.field.L,
        "alpha_max": encoding.alpha_max,
        "shapes": [list(p.shape) for p in params],
        "reprojection_error": result.reprojection_error,
        "cameras": [
            {
                "id": c.id,
                "M_free": [float(x) for x in c.M_free.reshape(-1)],
                "T": [float(x) for x in c.T],
                "f": float(c.f),
                "width": c.width,
                "height": c.height,
            }
            for c in result.cameras
        ],
    }
    hdr = json.dumps(header).encode()
    blob = b"".join(np.ascontiguousarray(p, dtype="<f4").tobytes() for p in params)
    with open(path, "wb") as fh:
        fh.write(STATE_MAGIC)
        fh.write(struct.pack("<II", STATE_VERSION, len(hdr)))
        fh.write(hdr)
        fh.write(blob)


def load_state(path):
    """Returns (OccupancyField, cameras, header dict)."""
    raw = Path(path).read_bytes()
    if raw[:4] != STATE_MAGIC:
        raise ValueError(f"{path}: bad magic {raw[:4]!r}")
    version, hlen = struct.unpack_from("<II", raw, 4)
    if version != STATE_VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    header = json.loads(raw[12 : 12 + hlen].decode())
    field_net = OccupancyField(L=header["L"], dtype=torch.float32)
    offset = 12 + hlen
    with torch.no_grad():
        for p, shape in zip(field_net.parameters(), header["shapes"]):
            n = int(np.prod(shape))
            arr = np.frombuffer(raw, dtype="<f4", count=n, offset=offset)
            p.copy_(torch.tensor(arr.reshape(shape)))
            offset += 4 * n
    cams = [
        PerspectiveCamera(
            id=r["id"],
            M_free=np.array(r["M_free"]).reshape(2, 3),
            T=np.array(r["T"]),
            f=r["f"],
            width=r["width"],
            height=r["height"],
        )
        for r in header["cameras"]
    ]
    return field_net, cams, header
