"""Command-line entry points for every pipeline stage."""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import clustering, corpus, evaluation, extract, factorization, pipeline, synth
from .cameras import AnnealSchedule, load_cameras, ortho_to_perspective, save_cameras
from .field import EncodingSchedule, TrainConfig, load_state, save_state, train_cluster


def _cmd_synth(args):
    manifest = synth.emit_dataset(
        args.out, n_views=args.views, size=args.size, seed=args.seed,
        focal=args.focal,
    )
    print(f"wrote {len(manifest.entries)} views to {args.out}")


def _cmd_cluster(args):
    manifest = corpus.load_manifest(args.manifest)
    embeddings = []
    for entry in manifest.entries:
        rec = corpus.load_record(manifest, entry)
        if rec.global_embedding is None:
            sys.exit(f"entry {entry.id!r} has no embedding")
        embeddings.append(
            clustering.GlobalEmbedding(
                entry.id, clustering.pool_embedding(list(rec.global_embedding))
            )
        )
    cs = clustering.agglomerative_cluster(embeddings, args.threshold, args.linkage)
    Path(args.out).write_text(
        json.dumps(
            {
                "threshold": cs.distance_threshold,
                "clusters": [sorted(c) for c in cs.clusters],
            },
            indent=1,
        )
    )
    print(f"{len(cs.clusters)} cluster(s) -> {args.out}")


def _cmd_keypoints(args):
    path, _, index = args.cluster.partition("#")
    cluster_ids = json.loads(Path(path).read_text())["clusters"][int(index or 0)]
    manifest = corpus.load_manifest(args.manifest)
    records = {
        e.id: corpus.load_record(manifest, e)
        for e in manifest.entries
        if e.id in cluster_ids
    }
    cfg = pipeline.PipelineConfig(
        manifest=args.manifest, kmeans_k=args.k, n_parts=args.parts
    )
    obs = pipeline.keypoint_stage(sorted(records), records, cfg, args.seed)
    tracks = []
    for col, part in enumerate(obs.part_ids):
        per_image = {}
        for row, img in enumerate(obs.image_ids):
            if obs.mask[row, col]:
                per_image[img] = [obs.W[2 * row, col], obs.W[2 * row + 1, col]]
        tracks.append({"part_id": int(part), "observations": per_image})
    Path(args.out).write_text(
        json.dumps({"image_ids": list(obs.image_ids), "tracks": tracks}, indent=1)
    )
    print(f"{len(tracks)} track(s) over {len(obs.image_ids)} image(s) -> {args.out}")


def _load_tracks(path):
    from .correspondence import KeypointTrack, build_observation_matrix

    raw = json.loads(Path(path).read_text())
    tracks = []
    for t in raw["tracks"]:
        kt = KeypointTrack(part_id=t["part_id"])
        for img in raw["image_ids"]:
            obs = t["observations"].get(img)
            kt.visibility[img] = obs is not None
            if obs is not None:
                kt.observations[img] = tuple(obs)
        tracks.append(kt)
    return build_observation_matrix(tracks, raw["image_ids"])


def _cmd_factorize(args):
    obs = _load_tracks(args.tracks)
    result = factorization.rigid_factorize(obs)
    records = [
        {
            "id": img,
            "M": [float(x) for x in cam.M.reshape(-1)],
            "t": [float(x) for x in cam.t],
        }
        for img, cam in zip(obs.image_ids, result.cameras)
    ]
    Path(args.out).write_text(
        json.dumps({"cameras": records, "residual": result.residual}, indent=1)
    )
    print(f"residual {result.residual:.3e} px -> {args.out}")


def _cmd_reconstruct(args):
    raw = json.loads(Path(args.cams).read_text())
    manifest = corpus.load_manifest(args.manifest)
    entries = {e.id: e for e in manifest.entries}
    cams, sils = [], []
    for rec in raw["cameras"]:
        entry = entries[rec["id"]]
        sil = corpus.load_silhouette(manifest.resolve(entry.silhouette))
        h, w = sil.shape
        ortho = factorization.OrthographicCamera(
            M=np.array(rec["M"]).reshape(2, 3), t=np.array(rec["t"])
        )
        cams.append(ortho_to_perspective(ortho, rec["id"], args.z0, w, h))
        sils.append(sil)
    config = TrainConfig(epochs=args.epochs, seed=args.seed)
    encoding = EncodingSchedule()
    result = train_cluster(sils, cams, config, AnnealSchedule(z0=args.z0), encoding)
    save_state(result, encoding, args.out)
    if args.report:
        Path(args.report).write_text(
            json.dumps(
                {
                    "reprojection_error": result.reprojection_error,
                    "loss_history": result.loss_history,
                },
                indent=1,
            )
        )
    print(f"reprojection error {result.reprojection_error:.4f} -> {args.out}")


def _cmd_extract(args):
    field_net, _, header = load_state(args.state)
    cfg = pipeline.PipelineConfig(
        manifest="", extract_resolution=args.res, iso=args.iso
    )
    mesh = pipeline.extract_mesh_auto(field_net, cfg)
    if args.largest_component:
        mesh = extract.largest_component(mesh)
    extract.export_mesh(mesh, args.out)
    print(f"{len(mesh.vertices)} vertices, {len(mesh.triangles)} triangles "
          f"-> {args.out}")


def _cmd_evaluate(args):
    mesh = extract.import_mesh(args.mesh)
    if str(args.gt).endswith(".npy"):
        gt_points = np.load(args.gt)
    else:
        gt_points = evaluation.sample_mesh_points(
            extract.import_mesh(args.gt), args.samples, seed=args.seed
        )
    rec_points = evaluation.sample_mesh_points(mesh, args.samples, seed=args.seed)
    metrics = evaluation.evaluate_reconstruction(rec_points, gt_points, tau=args.tau)
    Path(args.out).write_text(json.dumps(dataclasses.asdict(metrics), indent=1))
    print(f"chamfer {metrics.chamfer:.4f}  f1@{args.tau} {metrics.fscore:.4f} "
          f"-> {args.out}")


def _cmd_pipeline(args):
    config = pipeline.PipelineConfig.from_file(args.config)
    if args.workers:
        config.workers = args.workers
    if args.out:
        config.out_dir = args.out
    reports = pipeline.run_pipeline(config)
    kept = sum(r.kept for r in reports)
    print(f"{len(reports)} cluster(s), {kept} kept -> {config.out_dir}/reports.json")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="shapeminer")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="emit a synthetic oracle dataset")
    s.add_argument("--preset", default="sphere-box")
    s.add_argument("--views", type=int, default=24)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--focal", type=float, default=None)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=_cmd_synth)

    s = sub.add_parser("cluster", help="group images by pooled embeddings")
    s.add_argument("--manifest", required=True)
    s.add_argument("--threshold", type=float, required=True)
    s.add_argument("--linkage", default="average")
    s.add_argument("--out", default="clusters.json")
    s.set_defaults(func=_cmd_cluster)

    s = sub.add_parser("keypoints", help="tracks from dense features")
    s.add_argument("--manifest", required=True)
    s.add_argument("--cluster", required=True, help="clusters.json#index")
    s.add_argument("--k", type=int, default=12)
    s.add_argument("--parts", type=int, default=8)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", default="tracks.json")
    s.set_defaults(func=_cmd_keypoints)

    s = sub.add_parser("factorize", help="orthographic cameras from tracks")
    s.add_argument("--tracks", required=True)
    s.add_argument("--out", default="cams_ortho.json")
    s.set_defaults(func=_cmd_factorize)

    s = sub.add_parser("reconstruct", help="train the occupancy field")
    s.add_argument("--manifest", required=True)
    s.add_argument("--cams", required=True)
    s.add_argument("--z0", type=float, default=5.0)
    s.add_argument("--epochs", type=int, default=300)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", default="state.bin")
    s.add_argument("--report", default=None)
    s.set_defaults(func=_cmd_reconstruct)

    s = sub.add_parser("extract", help="marching-cubes mesh from a state file")
    s.add_argument("--state", required=True)
    s.add_argument("--res", type=int, default=128)
    s.add_argument("--iso", type=float, default=0.5)
    s.add_argument("--largest-component", action="store_true")
    s.add_argument("--out", default="mesh.obj")
    s.set_defaults(func=_cmd_extract)

    s = sub.add_parser("evaluate", help="chamfer/F1 against a reference")
    s.add_argument("--mesh", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--tau", type=float, default=0.05)
    s.add_argument("--samples", type=int, default=4096)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", default="metrics.json")
    s.set_defaults(func=_cmd_evaluate)

    s = sub.add_parser("pipeline", help="run every stage from a config file")
    s.add_argument("--config", required=True)
    s.add_argument("--workers", type=int, default=None)
    s.add_argument("--out", default=None)
    s.set_defaults(func=_cmd_pipeline)

    return p


def main(argv=None) -> None:
    args = build_parser().parse_args(argv)
    args.func(args)


if __name__ == "__main__":
    main()
