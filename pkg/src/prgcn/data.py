"""Synthetic datasets on disk: scene files plus a CSV manifest."""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .pointcloud import PointCloud, SyntheticSpec, fps, read_ply, synth_scene, write_ply
from .pose import Pose, read_poses, write_poses

MANIFEST_FIELDS = ("object_id", "raw", "gt", "pose", "model", "symmetric")
SYMMETRIC_SHAPES = {"sphere", "cube", "torus"}


@dataclass
class Scene:
    object_id: str
    raw: PointCloud
    gt: PointCloud
    pose: Pose
    model: np.ndarray  # canonical-frame model points
    symmetric: bool = True


@dataclass
class SampleRecord:
    object_id: str
    raw: Path
    gt: Path
    pose: Path
    model: Path
    symmetric: bool = True


def make_scene(spec: SyntheticSpec, n_model: int) -> Scene:
    gt, raw, pose = synth_scene(spec)
    canonical = pose.inverse().apply(gt.points)
    model = canonical[fps(canonical, min(n_model, len(canonical)))]
    return Scene(spec.shape, raw, gt, pose, model, spec.shape in SYMMETRIC_SHAPES)


def scene_seed(seed: int, index: int) -> int:
    return seed * 1_000_003 + index


def make_scenes(count: int, shapes: Sequence[str], n_points: int, occlusion: float,
                noise: float, seed: int, n_model: int = 100) -> list[Scene]:
    return [
        make_scene(SyntheticSpec(shapes[i % len(shapes)], n_points, occlusion, noise,
                                 scene_seed(seed, i)), n_model)
        for i in range(count)
    ]


def write_manifest(path, records: Sequence[SampleRecord]) -> None:
    base = Path(path).resolve().parent
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_FIELDS)
        for r in records:
            rel = [os.path.relpath(Path(p).resolve(), base) for p in (r.raw, r.gt, r.pose, r.model)]
            w.writerow([r.object_id, *rel, int(r.symmetric)])


def read_manifest(path) -> list[SampleRecord]:
    base = Path(path).resolve().parent
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise ValueError(f"cannot read manifest {path}: {exc.strerror}") from None
    with fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or set(MANIFEST_FIELDS) - set(reader.fieldnames):
            raise ValueError(f"{path}: manifest header must contain {', '.join(MANIFEST_FIELDS)}")
        records = []
        for row in reader:
            paths = [base / row[k] for k in ("raw", "gt", "pose", "model")]
            for p in paths:
                if not p.exists():
                    raise ValueError(f"{path}: referenced file does not exist: {p}")
            records.append(SampleRecord(row["object_id"], *paths, symmetric=row["symmetric"].strip() in ("1", "true")))
    return records


def load_scene(record: SampleRecord) -> Scene:
    poses = read_poses(record.pose)
    if len(poses) != 1:
        raise ValueError(f"{record.pose}: expected one pose line, got {len(poses)}")
    return Scene(record.object_id, read_ply(record.raw), read_ply(record.gt), poses[0],
                 read_ply(record.model).points, record.symmetric)


def synthesize(out_dir, count: int, shapes: Sequence[str], n_points: int, occlusion: float,
               noise: float, seed: int, n_model: int = 100) -> Path:
    """Write ``count`` scenes and ``manifest.csv`` under ``out_dir``."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create {out}: {exc.strerror}") from None
    records = []
    for i in range(count):
        spec = SyntheticSpec(shapes[i % len(shapes)], n_points, occlusion, noise, scene_seed(seed, i))
        scene = make_scene(spec, n_model)
        stem = out / f"scene_{i:04d}"
        rec = SampleRecord(scene.object_id, Path(f"{stem}_raw.ply"), Path(f"{stem}_gt.ply"),
                           Path(f"{stem}_pose.txt"), Path(f"{stem}_model.ply"), scene.symmetric)
        write_ply(rec.raw, scene.raw)
        write_ply(rec.gt, scene.gt)
        write_poses(rec.pose, [scene.pose])
        write_ply(rec.model, PointCloud(scene.model))
        records.append(rec)
    manifest = out / "manifest.csv"
    write_manifest(manifest, records)
    return manifest
