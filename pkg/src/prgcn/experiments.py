"""Desk-scale experiments shared by ``scripts/`` and the acceptance tests.

All three runs use synthetic scenes with 40% occlusion and 1 cm noise, and are
seeded end to end.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np

from .config import RunConfig
from .data import Scene, make_scenes
from .metrics import adds_metric, auc
from .pipeline import PRGCN, train
from .pointcloud import PointCloud, chamfer, resample
from .prn import Discriminator, PrnBatch, PrnConfig, PrnModel, prepare_batch, prn_train_step, subset_batch


@dataclass(frozen=True)
class RefinementSetup:
    prn: PrnConfig = PrnConfig(
        n_raw=100, m_refined=512, encoder_widths=(32, 32, 64, 64, 128, 128), latent_dim=128,
        decoder_fc_widths=(256, 256, 256), point_width=8, lambda_adv=0.0, canonical_frame=True)
    disc_widths: tuple[int, ...] = (3, 32, 32, 1)
    shapes: tuple[str, ...] = ("sphere", "cube", "torus")
    n_points: int = 512
    occlusion: float = 0.4
    noise: float = 0.01
    n_train: int = 150
    n_test: int = 30
    epochs: int = 150
    batch_size: int = 8
    lr: float = 1e-3
    lr_decay: float = 0.3
    data_seed: int = 11

    def scenes(self) -> tuple[list[Scene], list[Scene]]:
        kw = dict(shapes=list(self.shapes), n_points=self.n_points, occlusion=self.occlusion,
                  noise=self.noise)
        return (make_scenes(self.n_train, seed=self.data_seed, **kw),
                make_scenes(self.n_test, seed=self.data_seed + 1, **kw))


def _pairs(scenes: Sequence[Scene], n_raw: int) -> list[tuple[PointCloud, PointCloud]]:
    return [(resample(s.raw, n_raw, np.random.default_rng(i)), s.gt) for i, s in enumerate(scenes)]


def train_prn(setup: RefinementSetup, train_scenes: Sequence[Scene], seed: int = 0,
              on_epoch: Callable[[int, float], None] | None = None) -> PrnModel:
    """Minibatch ADAM on the refinement loss, lr decayed once at the halfway epoch."""
    model = PrnModel(setup.prn, seed=seed)
    disc = Discriminator(setup.disc_widths, seed=seed + 1)
    batch: PrnBatch = prepare_batch(_pairs(train_scenes, setup.prn.n_raw), setup.prn.canonical_frame)
    rng = np.random.default_rng(seed)
    for epoch in range(setup.epochs):
        lr = setup.lr * (setup.lr_decay if epoch >= setup.epochs // 2 else 1.0)
        order = rng.permutation(len(batch))
        mr = [prn_train_step(model, disc, subset_batch(batch, order[i:i + setup.batch_size]), lr).mr
              for i in range(0, len(order), setup.batch_size)]
        if on_epoch:
            on_epoch(epoch, float(np.mean(mr)))
    return model


def refinement_ratios(model: PrnModel, scenes: Sequence[Scene]) -> np.ndarray:
    """chamfer(refined, gt) / chamfer(raw, gt) per scene, raw taken at the network's input size."""
    out = []
    for raw, gt in _pairs(scenes, model.config.n_raw):
        out.append(chamfer(model.refine(raw), gt) / chamfer(raw, gt))
    return np.array(out)


@dataclass
class RefinementResult:
    ratios: np.ndarray
    shapes: list[str]
    seconds: float

    def fraction_halved(self) -> float:
        return float(np.mean(self.ratios <= 0.5))

    def per_shape_median(self) -> dict[str, float]:
        names = np.array(self.shapes)
        return {s: float(np.median(self.ratios[names == s])) for s in sorted(set(self.shapes))}


def run_refinement(setup: RefinementSetup = RefinementSetup(), seed: int = 0,
                   on_epoch: Callable[[int, float], None] | None = None) -> RefinementResult:
    start = time.perf_counter()
    train_scenes, test_scenes = setup.scenes()
    model = train_prn(setup, train_scenes, seed, on_epoch)
    ratios = refinement_ratios(model, test_scenes)
    return RefinementResult(ratios, [s.object_id for s in test_scenes], time.perf_counter() - start)


ABLATION = replace(RefinementSetup(), n_train=100, epochs=100)


@dataclass
class AblationRow:
    seed: int
    multi: float  # mean held-out chamfer, multi-resolution loss
    single: float  # same, fine-output-only loss

    @property
    def multi_wins(self) -> bool:
        return self.multi <= self.single


def run_mr_ablation(setup: RefinementSetup = ABLATION, seeds: Sequence[int] = (0, 1, 2)) -> list[AblationRow]:
    """Same data, seeds and budget; only the refinement loss differs."""
    train_scenes, test_scenes = setup.scenes()
    pairs = _pairs(test_scenes, setup.prn.n_raw)
    rows = []
    for seed in seeds:
        means = []
        for single in (False, True):
            variant = replace(setup, prn=replace(setup.prn, single_resolution=single))
            model = train_prn(variant, train_scenes, seed)
            means.append(float(np.mean([chamfer(model.refine(raw), gt) for raw, gt in pairs])))
        rows.append(AblationRow(seed, *means))
    return rows


@dataclass
class PoseResult:
    untrained_auc: float
    trained_auc: float
    trained_adds: float
    seconds: float


def adds_auc(model: PRGCN, scenes: Sequence[Scene], offset: int = 1000) -> tuple[float, float]:
    """(AUC of ADD-S up to 10 cm in percent, mean ADD-S in meters)."""
    errors = [adds_metric(s.pose, model.predict(model.prepare(s, offset + i))[0], s.model)
              for i, s in enumerate(scenes)]
    return auc(errors, 0.1), float(np.mean(errors))


@dataclass(frozen=True)
class PoseSetup:
    shape: str = "cube"
    n_train: int = 100
    n_test: int = 30
    n_points: int = 512
    occlusion: float = 0.4
    noise: float = 0.01
    data_seed: int = 21


def run_toy_pose(cfg: RunConfig, setup: PoseSetup = PoseSetup(),
                 on_epoch: Callable | None = None) -> PoseResult:
    """Train the full pipeline on one object and score it against its own initialization."""
    start = time.perf_counter()
    kw = dict(shapes=[setup.shape], n_points=setup.n_points, occlusion=setup.occlusion, noise=setup.noise)
    train_scenes = make_scenes(setup.n_train, seed=setup.data_seed, **kw)
    test_scenes = make_scenes(setup.n_test, seed=setup.data_seed + 1, **kw)
    model = PRGCN(cfg)
    before, _ = adds_auc(model, test_scenes)
    train(model, train_scenes, on_epoch)
    after, adds = adds_auc(model, test_scenes)
    return PoseResult(before, after, adds, time.perf_counter() - start)
