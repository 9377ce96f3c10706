"""End-to-end model: refinement, fusion, per-point pose heads, training schedule
and evaluation."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tape, Tensor
from .config import RunConfig
from .data import Scene
from .gcn import FusionNet
from .metrics import EvalRecord, EvalReport, evaluate
from .pointcloud import Frame, PointCloud, resample
from .pose import Pose, PoseCandidates, PoseHeads, loss_pose_tensor, select_pose
from .prn import Discriminator, PrnModel, discriminator_step, loss_adv, loss_mr, loss_prn, split_scales

log = logging.getLogger(__name__)


class NonFiniteLoss(RuntimeError):
    pass


@dataclass
class Prepared:
    """One scene resampled to ``n_raw`` points and normalized."""

    scene: Scene
    points: np.ndarray  # normalized raw points
    colors: np.ndarray
    centroid: np.ndarray
    scale: float
    rotation: np.ndarray  # normalized frame -> refinement frame
    full: np.ndarray  # refinement-frame scales
    half: np.ndarray
    quarter: np.ndarray
    target: np.ndarray  # gt cloud in the refinement frame


def prepare(scene: Scene, n_raw: int, seed: int = 0, canonical: bool = False) -> Prepared:
    raw = resample(scene.raw, n_raw, np.random.default_rng(seed))
    frame = Frame.of(raw, canonical)
    colors = raw.colors if raw.colors is not None else np.full((n_raw, 3), 0.5)
    full, half, quarter = split_scales(frame.forward(raw.points))
    normed = (raw.points - frame.centroid) / frame.scale
    return Prepared(scene, normed, colors, frame.centroid, frame.scale, frame.rotation, full, half,
                    quarter, frame.forward(scene.gt.points))


class PRGCN:
    def __init__(self, cfg: RunConfig, seed: int | None = None):
        seed = cfg.seed if seed is None else seed
        self.cfg = cfg
        self.prn = PrnModel(cfg.prn, seed=seed)
        self.disc = Discriminator((3, *cfg.disc_widths, 1), seed=seed + 1)
        self.pose_store = ParamStore()
        self.fusion = FusionNet(cfg.d_rgb, cfg.gcn_f_widths, cfg.gcn_ref_widths, cfg.t_widths,
                                k=cfg.k_nn, n_ref=cfg.n_raw, seed=seed + 2, store=self.pose_store)
        self.heads = PoseHeads(self.fusion.out_dim, cfg.head_widths, seed=seed + 3,
                               store=self.pose_store)

    @property
    def stores(self) -> tuple[ParamStore, ...]:
        return self.prn.store, self.disc.store, self.pose_store

    def parameters(self) -> dict[str, np.ndarray]:
        out = {}
        for store in self.stores:
            for name, t in store.items():
                out[name] = t.data
        return out

    def load_parameters(self, values: dict[str, np.ndarray], only_prn: bool = False) -> None:
        stores = (self.prn.store,) if only_prn else self.stores
        for store in stores:
            for name in store:
                if name not in values:
                    raise KeyError(f"checkpoint is missing parameter {name!r}")
            store.copy_from(values)

    # ------------------------------------------------------------------
    def prepare(self, scene: Scene, index: int = 0) -> Prepared:
        return prepare(scene, self.cfg.n_raw, seed=self.cfg.seed * 7919 + index,
                       canonical=self.cfg.canonical_frame)

    def refine_cloud(self, cloud: PointCloud) -> PointCloud:
        if len(cloud) != self.cfg.n_raw:
            cloud = resample(cloud, self.cfg.n_raw, np.random.default_rng(self.cfg.seed))
        return self.prn.refine(cloud)

    def pose_candidates(self, prep: Prepared, refined) -> PoseCandidates:
        """Candidates from the fusion features; ``refined`` is in the refinement frame."""
        if not np.array_equal(prep.rotation, np.eye(3)):
            refined = ad.matmul(refined if isinstance(refined, Tensor) else Tensor(refined),
                                Tensor(prep.rotation))
        G_o = self.fusion.forward(prep.points, prep.colors, refined)
        return self.heads.forward(G_o, prep.points, prep.centroid, prep.scale)

    def predict(self, prep: Prepared) -> tuple[Pose, PoseCandidates, np.ndarray]:
        _, _, fine = self.prn.decode(self.prn.encode_scales(prep.full, prep.half, prep.quarter))
        cands = self.pose_candidates(prep, fine.data[0])
        return select_pose(cands), cands, fine.data[0] @ prep.rotation * prep.scale + prep.centroid

    # ------------------------------------------------------------------
    def batch_objective(self, preps: Sequence[Prepared], train_prn: bool,
                        train_pose: bool) -> tuple[Tensor | None, dict[str, list[float]]]:
        """Objective to backpropagate plus per-sample term values.

        Only the stores being trained should have ``requires_grad`` set; the
        refined cloud feeds the pose branch detached unless both are trained.
        """
        cfg = self.cfg
        full = np.stack([p.full for p in preps])
        half = np.stack([p.half for p in preps])
        quarter = np.stack([p.quarter for p in preps])
        coarse, mid, fine = self.prn.decode(self.prn.encode_scales(full, half, quarter))
        prn_terms, pose_terms = [], []
        terms = {"prn": [], "pose": [], "mr": [], "adv": []}
        for b, p in enumerate(preps):
            mr = loss_mr((coarse[b], mid[b], fine[b]), p.target, cfg.single_resolution)
            _, gen = loss_adv(self.disc, p.target, fine[b], cfg.non_saturating)
            prn_obj = loss_prn(mr, gen, cfg.lambda_adv, cfg.beta)
            refined = fine[b] if (train_prn and train_pose) else Tensor(fine.data[b])
            cands = self.pose_candidates(p, refined)
            pose_obj = loss_pose_tensor(cands, p.scene.pose.matrix, p.scene.pose.translation,
                                        p.scene.model)
            prn_terms.append(prn_obj)
            pose_terms.append(pose_obj)
            for key, t in (("prn", prn_obj), ("pose", pose_obj), ("mr", mr), ("adv", gen)):
                val = t.item()
                if not math.isfinite(val):
                    raise NonFiniteLoss(f"non-finite {key} loss ({val}) for sample {b} ({p.scene.object_id})")
                terms[key].append(val)
        objective = None
        if train_prn:
            objective = _sum(prn_terms)
            if train_pose:
                objective = ad.add(_sum(pose_terms), ad.mul(objective, cfg.mu))
        elif train_pose:
            objective = _sum(pose_terms)
        return objective, terms


def _sum(ts: Sequence[Tensor]) -> Tensor:
    total = ts[0]
    for t in ts[1:]:
        total = ad.add(total, t)
    return total


# ---------------------------------------------------------------------------
# Training schedule


@dataclass
class EpochLog:
    epoch: int
    phase: str
    lr: float
    loss: float
    pose: float
    prn: float
    disc: float

    def line(self) -> str:
        return (f"epoch {self.epoch:3d} phase {self.phase:<5} lr {self.lr:.3e} loss {self.loss:.12e} "
                f"pose {self.pose:.12e} prn {self.prn:.12e} disc {self.disc:.12e}")


def phase_for_epoch(epoch: int, cfg: RunConfig) -> str:
    """PRN and pose epochs alternate first, then everything trains jointly."""
    if epoch < cfg.alt_epochs:
        return "prn" if epoch % 2 == 0 else "pose"
    return "joint"


def lr_for_epoch(epoch: int, cfg: RunConfig) -> float:
    total = cfg.alt_epochs + cfg.joint_epochs
    return cfg.lr * (cfg.lr_decay if epoch >= total / 2 else 1.0)


def train_epoch(model: PRGCN, preps: Sequence[Prepared], phase: str, lr: float,
                rng: np.random.Generator) -> tuple[dict[int, float], dict[int, float], dict[int, float], float]:
    cfg = model.cfg
    train_prn = phase in ("prn", "joint")
    train_pose = phase in ("pose", "joint")
    bs = cfg.batch_size if phase == "prn" else cfg.joint_batch_size
    order = rng.permutation(len(preps))
    totals, poses, prns = {}, {}, {}
    disc_losses = []
    for start in range(0, len(order), bs):
        idx = order[start:start + bs]
        batch = [preps[i] for i in idx]
        if train_prn:
            fakes = _fine_outputs(model, batch)
            disc_losses.append(discriminator_step(model.disc, _disc_batch(batch), fakes, lr))
        model.prn.store.set_requires_grad(train_prn)
        model.pose_store.set_requires_grad(train_pose)
        model.disc.store.set_requires_grad(False)
        try:
            with Tape() as tape:
                objective, terms = model.batch_objective(batch, train_prn, train_pose)
            for store in (model.prn.store, model.pose_store):
                store.zero_grad()
            tape.backward(objective)
        finally:
            for store in model.stores:
                store.set_requires_grad(True)
        if train_prn:
            ad.adam_step(model.prn.store, lr)
        if train_pose:
            ad.adam_step(model.pose_store, lr)
        for j, i in enumerate(idx):
            prns[int(i)] = terms["prn"][j]
            poses[int(i)] = terms["pose"][j]
            totals[int(i)] = terms["pose"][j] + cfg.mu * terms["prn"][j]
    disc = float(np.mean(disc_losses)) if disc_losses else float("nan")
    return totals, poses, prns, disc


@dataclass
class _DiscBatch:
    targets: list[np.ndarray]


def _disc_batch(batch: Sequence[Prepared]) -> _DiscBatch:
    return _DiscBatch([p.target for p in batch])


def _fine_outputs(model: PRGCN, batch: Sequence[Prepared]) -> list[np.ndarray]:
    full = np.stack([p.full for p in batch])
    half = np.stack([p.half for p in batch])
    quarter = np.stack([p.quarter for p in batch])
    _, _, fine = model.prn.decode(model.prn.encode_scales(full, half, quarter))
    return [fine.data[b] for b in range(len(batch))]


def _ordered_mean(values: dict[int, float]) -> float:
    return float(sum(values[k] for k in sorted(values)) / len(values))


def train(model: PRGCN, scenes: Sequence[Scene],
          on_epoch: Callable[[EpochLog], None] | None = None) -> list[EpochLog]:
    """Alternating PRN / pose epochs, then joint epochs, with one lr decay at the halfway mark."""
    cfg = model.cfg
    if not scenes:
        raise ValueError("no training scenes")
    preps = [model.prepare(s, i) for i, s in enumerate(scenes)]
    rng = np.random.default_rng(cfg.seed)
    logs = []
    for epoch in range(cfg.alt_epochs + cfg.joint_epochs):
        phase = phase_for_epoch(epoch, cfg)
        lr = lr_for_epoch(epoch, cfg)
        totals, poses, prns, disc = train_epoch(model, preps, phase, lr, rng)
        entry = EpochLog(epoch, phase, lr, _ordered_mean(totals), _ordered_mean(poses),
                         _ordered_mean(prns), disc)
        if not math.isfinite(entry.loss):
            raise NonFiniteLoss(f"non-finite total loss at epoch {epoch}")
        logs.append(entry)
        log.info(entry.line())
        if on_epoch:
            on_epoch(entry)
    return logs


def objective_on(model: PRGCN, scenes: Sequence[Scene]) -> float:
    """Mean per-scene total objective with the current parameters (no updates)."""
    preps = [model.prepare(s, i) for i, s in enumerate(scenes)]
    vals = []
    for start in range(0, len(preps), model.cfg.joint_batch_size):
        _, terms = model.batch_objective(preps[start:start + model.cfg.joint_batch_size], False, False)
        vals += [a + model.cfg.mu * b for a, b in zip(terms["pose"], terms["prn"])]
    return float(np.mean(vals))


# ---------------------------------------------------------------------------
# Evaluation


@dataclass
class SampleResult:
    index: int
    record: EvalRecord | None
    error: str | None = None


def evaluate_scenes(model: PRGCN | None, loader: Callable[[int], Scene], count: int,
                    use_gt: bool = False, threads: int = 1) -> tuple[EvalReport | None, list[SampleResult]]:
    """Run the pipeline on every sample; failures are recorded, not raised."""

    def run(i: int) -> SampleResult:
        try:
            scene = loader(i)
            if use_gt:
                pred = scene.pose
            else:
                pred, _, _ = model.predict(model.prepare(scene, i))
            return SampleResult(i, EvalRecord(scene.object_id, scene.pose, pred, scene.model, scene.symmetric))
        except Exception as exc:  # noqa: BLE001 - one bad sample must not stop the run
            return SampleResult(i, None, f"{type(exc).__name__}: {exc}")

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run, range(count)))
    else:
        results = [run(i) for i in range(count)]
    records = [r.record for r in results if r.record is not None]
    report = evaluate(records) if records else None
    return report, results
