"""End-to-end orchestration: cluster -> keypoints -> factorize -> lift ->
reconstruct -> extract -> filter (-> evaluate when ground truth is present).

Clusters are processed independently; a failure in one cluster is recorded in
its report and never disturbs the others. Runs are bit-reproducible for a
fixed config and seed: every cluster draws its randomness from its own
SeedSequence spawn keyed by cluster index.
"""

from __future__ import annotations

import dataclasses
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import clustering, corpus, correspondence, evaluation, extract, factorization
from .cameras import AnnealSchedule, ortho_to_perspective, save_cameras
from .field import EncodingSchedule, TrainConfig, render_occupancy, save_state, train_cluster


@dataclass
class PipelineConfig:
    manifest: str
    out_dir: str = "runs/out"
    seed: int = 0
    workers: int = 1
    cluster_threshold: float = 10.0
    cluster_linkage: str = "average"
    kmeans_k: int = 12
    n_parts: int = 8
    z0: float = 5.0
    anneal: AnnealSchedule = field(default_factory=AnnealSchedule)
    encoding: EncodingSchedule = field(default_factory=EncodingSchedule)
    train: TrainConfig = field(default_factory=TrainConfig)
    extract_resolution: int = 128
    iso: float = 0.5
    keep_threshold: float = evaluation.KEEP_THRESHOLD
    eval_tau: float = 0.05
    eval_samples: int = 4096

    @classmethod
    def from_file(cls, path) -> "PipelineConfig":
        raw = json.loads(Path(path).read_text())
        cfg = cls(manifest=raw["manifest"])
        for key, val in raw.items():
            if key == "anneal":
                cfg.anneal = AnnealSchedule(**val)
            elif key == "encoding":
                cfg.encoding = EncodingSchedule(**val)
            elif key == "train":
                cfg.train = TrainConfig(**val)
            elif hasattr(cfg, key):
                setattr(cfg, key, val)
        env_seed = os.environ.get("SHAPEMINER_SEED")
        if env_seed is not None:
            cfg.seed = int(env_seed)
        return cfg

    def provenance(self) -> dict:
        return json.loads(json.dumps(dataclasses.asdict(self)))


@dataclass
class ReconstructionReport:
    cluster_id: int
    members: list
    reprojection_error: Optional[float] = None
    kept: bool = False
    mesh_path: Optional[str] = None
    cameras_path: Optional[str] = None
    state_path: Optional[str] = None
    metrics: Optional[dict] = None
    error: Optional[str] = None
    skipped: Optional[str] = None

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _cluster_records(manifest: corpus.CorpusManifest):
    return {e.id: corpus.load_record(manifest, e) for e in manifest.entries}


def cluster_stage(manifest: corpus.CorpusManifest, records: dict,
                  config: PipelineConfig) -> clustering.ClusterSet:
    embeddings = []
    for entry in manifest.entries:
        rec = records[entry.id]
        if rec.global_embedding is None:
            raise ValueError(f"entry {entry.id!r} has no embedding for clustering")
        z = clustering.pool_embedding(list(rec.global_embedding))
        embeddings.append(clustering.GlobalEmbedding(entry.id, z))
    return clustering.agglomerative_cluster(
        embeddings, config.cluster_threshold, config.cluster_linkage
    )


def keypoint_stage(member_ids, records, config: PipelineConfig, seed: int):
    maps = [records[i].dense_features for i in member_ids]
    if any(m is None for m in maps):
        raise ValueError("cluster member lacks dense features")
    label_maps = correspondence.kmeans_features(maps, config.kmeans_k, seed=seed)
    segs = [
        correspondence.PartSegmentation(i, lab, config.kmeans_k)
        for i, lab in zip(member_ids, label_maps)
    ]
    saliency = [records[i].silhouette for i in member_ids]
    parts = correspondence.vote_common_segments(segs, saliency, config.n_parts)
    tracks = {p: correspondence.KeypointTrack(part_id=p) for p in parts}
    for seg, img_id in zip(segs, member_ids):
        rec = records[img_id]
        kps = correspondence.extract_keypoints(seg, parts, (rec.height, rec.width))
        for p, kp in kps.items():
            tracks[p].visibility[img_id] = kp is not None
            if kp is not None:
                tracks[p].observations[img_id] = kp
    return correspondence.build_observation_matrix(list(tracks.values()), member_ids)


def reconstruct_cluster(
    cluster_id: int,
    member_ids: list,
    records: dict,
    config: PipelineConfig,
    out_dir: Path,
) -> ReconstructionReport:
    """All per-cluster stages; exceptions are caught by the caller."""
    seed = int(np.random.SeedSequence([config.seed, cluster_id]).generate_state(1)[0])
    report = ReconstructionReport(cluster_id=cluster_id, members=sorted(member_ids))
    member_ids = sorted(member_ids)

    obs = keypoint_stage(member_ids, records, config, seed)
    fact = factorization.rigid_factorize(obs)

    cams = []
    usable_ids = list(obs.image_ids)
    for img_id, ortho in zip(usable_ids, fact.cameras):
        rec = records[img_id]
        cams.append(
            ortho_to_perspective(ortho, img_id, config.z0, rec.width, rec.height)
        )
    sils = [records[i].silhouette for i in usable_ids]

    train_cfg = dataclasses.replace(config.train, seed=seed)
    result = train_cluster(sils, cams, train_cfg, config.anneal, config.encoding)

    state_path = out_dir / f"cluster{cluster_id:03d}_state.bin"
    save_state(result, config.encoding, state_path)
    cams_path = out_dir / f"cluster{cluster_id:03d}_cams.json"
    save_cameras(result.cameras, cams_path)

    mesh = extract_mesh_auto(result.field, config)
    mesh = extract.largest_component(mesh)
    mesh_path = out_dir / f"cluster{cluster_id:03d}_mesh.obj"
    extract.export_mesh(mesh, mesh_path)

    report.reprojection_error = result.reprojection_error
    report.kept = result.reprojection_error <= config.keep_threshold
    report.mesh_path = str(mesh_path)
    report.cameras_path = str(cams_path)
    report.state_path = str(state_path)
    return report


def extract_mesh_auto(field_net, config: PipelineConfig) -> extract.Mesh:
    """Two-pass extraction: locate the occupied region on a coarse grid over
    the final anneal box, then re-sample a tight grid around it."""
    r = config.anneal.r_max
    box = ((-r, -r, -r), (r, r, r))
    coarse = extract.sample_grid(field_net, 64, box)
    occ = np.argwhere(coarse.values > config.iso)
    if len(occ) == 0:
        return extract.marching_cubes(coarse, config.iso)
    cell = coarse.cell_size()
    lo = np.asarray(box[0]) + (occ.min(axis=0) - 2) * cell
    hi = np.asarray(box[0]) + (occ.max(axis=0) + 2) * cell
    pad_lo = np.minimum(lo, hi - 1e-3)
    tight = extract.sample_grid(
        field_net, config.extract_resolution, (tuple(pad_lo), tuple(hi))
    )
    return extract.marching_cubes(tight, config.iso)


def run_pipeline(config: PipelineConfig, stage_hook=None) -> list[ReconstructionReport]:
    """Execute the full pipeline; returns reports ordered by cluster id.

    `stage_hook(cluster_id, member_ids)` is called before each cluster's
    reconstruction (used by tests for fault injection).
    """
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = corpus.load_manifest(config.manifest)
    records = _cluster_records(manifest)
    clusters = cluster_stage(manifest, records, config)

    (out_dir / "clusters.json").write_text(
        json.dumps(
            {
                "threshold": clusters.distance_threshold,
                "clusters": [sorted(c) for c in clusters.clusters],
            },
            indent=1,
        )
    )

    def run_one(args):
        cid, members = args
        members = sorted(members)
        if len(members) < clustering.MIN_RECONSTRUCTABLE:
            return ReconstructionReport(
                cluster_id=cid, members=members,
                skipped="too small to reconstruct", kept=False,
            )
        try:
            if stage_hook is not None:
                stage_hook(cid, members)
            report = reconstruct_cluster(cid, members, records, config, out_dir)
        except Exception as exc:  # failure isolation across clusters
            report = ReconstructionReport(
                cluster_id=cid, members=members, kept=False,
                error=f"{type(exc).__name__}: {exc}",
            )
        report = _maybe_evaluate(report, manifest, records, config)
        return report

    jobs = list(enumerate(clusters.clusters))
    if config.workers > 1:
        with ThreadPoolExecutor(max_workers=config.workers) as pool:
            reports = list(pool.map(run_one, jobs))
    else:
        reports = [run_one(j) for j in jobs]

    reports.sort(key=lambda r: r.cluster_id)
    payload = {
        "config": config.provenance(),
        "reports": [r.to_dict() for r in reports],
    }
    (out_dir / "reports.json").write_text(json.dumps(payload, indent=1, sort_keys=True))
    return reports


def _maybe_evaluate(report, manifest, records, config) -> ReconstructionReport:
    if not report.mesh_path or report.error:
        return report
    gt_paths = {
        e.gt_mesh
        for e in manifest.entries
        if e.id in report.members and e.gt_mesh is not None
    }
    if len(gt_paths) != 1:
        return report
    gt_path = manifest.resolve(gt_paths.pop())
    try:
        mesh = extract.import_mesh(report.mesh_path)
        if mesh.is_empty():
            return report
        if str(gt_path).endswith(".npy"):
            gt_points = np.load(gt_path)
        else:
            gt_points = evaluation.sample_mesh_points(
                extract.import_mesh(gt_path), config.eval_samples, seed=config.seed
            )
        rec_points = evaluation.sample_mesh_points(
            mesh, config.eval_samples, seed=config.seed
        )
        metrics = evaluation.evaluate_reconstruction(
            rec_points, gt_points, tau=config.eval_tau
        )
        report.metrics = dataclasses.asdict(metrics)
    except Exception as exc:
        report.metrics = {"error": f"{type(exc).__name__}: {exc}"}
    return report
