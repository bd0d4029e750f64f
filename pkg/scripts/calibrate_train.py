"""Calibration harness for the end-to-end reconstruction criteria."""

import sys
import time

import numpy as np
import torch

from shapeminer import synth
from shapeminer.cameras import AnnealSchedule, ortho_to_perspective, perturb_rotation, anneal_bounds, gram_schmidt_rows
from shapeminer.factorization import OrthographicCamera
from shapeminer.field import EncodingSchedule, TrainConfig, render_occupancy, train_cluster
from shapeminer import extract as ex
from shapeminer import evaluation as ev
from shapeminer.pipeline import PipelineConfig, extract_mesh_auto


def rot_err(Ra, Rb):
    c = (np.trace(Ra @ Rb.T) - 1) / 2
    return np.degrees(np.arccos(np.clip(c, -1, 1)))


def run(seed, focal, epochs, iters_per_epoch, optimize_cameras=True, size=64, views=24,
        perturb_deg=10.0, log_every=25, r_max=4.0, verbose=False):
    shape = synth.sphere_box_shape()
    cams_gt = synth.camera_ring(views, size=size, focal=focal, seed=seed)
    sils = [synth.render_silhouette(shape, c) for c in cams_gt]
    rng = np.random.default_rng(seed + 1000)
    init = []
    for c in cams_gt:
        cp = perturb_rotation(c, perturb_deg, rng)
        ortho = OrthographicCamera(M=cp.rotation()[:2], t=np.zeros(2))
        init.append(ortho_to_perspective(ortho, c.id, 5.0, size, size))
    cfg = TrainConfig(epochs=epochs, iters_per_epoch=iters_per_epoch, seed=seed,
                      optimize_cameras=optimize_cameras)
    sched = AnnealSchedule(r_max=r_max)
    enc = EncodingSchedule()
    t0 = time.time()
    res = train_cluster(sils, init, cfg, sched, enc, log_every=log_every)
    t1 = time.time()

    near, far = anneal_bounds(sched, cfg.epochs)
    ious = []
    for k, (c, cg, sil) in enumerate(zip(res.cameras, cams_gt, sils)):
        occ = render_occupancy(res.field, c, enc.alpha_max, near, far, samples=128)
        pred = occ > 0.5
        gt = sil > 0
        inter = (pred & gt).sum()
        union = (pred | gt).sum()
        iou = inter / union if union else 1.0
        ious.append(iou)
        if verbose:
            e1 = rot_err(gram_schmidt_rows(c.M_free), cg.rotation())
            print(f"  view {k:2d}: IoU={iou:.3f} rot_err={e1:5.2f} f={c.f:.1f}")
    iou = float(np.mean(ious))

    pcfg = PipelineConfig(manifest="", extract_resolution=128)
    mesh = ex.largest_component(extract_mesh_auto(res.field, pcfg))
    f1 = float("nan")
    if not mesh.is_empty():
        rec_pts = ev.sample_mesh_points(mesh, 4096, seed=0)
        gt_pts = synth.surface_samples(shape, 4096, seed=0)
        rep = ev.evaluate_reconstruction(rec_pts, gt_pts, tau=0.05)
        f1 = rep.fscore
    print(f"seed={seed} focal={focal} camopt={optimize_cameras} r_max={r_max} "
          f"perturb={perturb_deg} epochs={epochs}x{iters_per_epoch}: "
          f"bce={res.reprojection_error:.4f} IoU={iou:.3f} F1={f1:.3f} time={t1-t0:.0f}s",
          flush=True)
    return iou, f1


if __name__ == "__main__":
    torch.set_num_threads(1)
    focal = float(sys.argv[1]) if len(sys.argv) > 1 else 160
    epochs = int(sys.argv[2]) if len(sys.argv) > 2 else 300
    ipe = int(sys.argv[3]) if len(sys.argv) > 3 else 32
    seeds = [int(s) for s in sys.argv[4].split(",")] if len(sys.argv) > 4 else [0]
    camopt = sys.argv[5] != "nocam" if len(sys.argv) > 5 else True
    perturb = float(sys.argv[6]) if len(sys.argv) > 6 else 10.0
    r_max = float(sys.argv[7]) if len(sys.argv) > 7 else 4.0
    for seed in seeds:
        run(seed, focal, epochs, ipe, optimize_cameras=camopt,
            perturb_deg=perturb, r_max=r_max)
