"""Point refinement network: multi-resolution encoder/decoder plus a per-point
discriminator, trained with Chamfer regression and an adversarial regularizer."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tape, Tensor
from .pointcloud import Frame, PointCloud, fps

LOG_CLAMP = 1e-7


@dataclass(frozen=True)
class PrnConfig:
    n_raw: int = 100
    m_refined: int = 512
    encoder_widths: tuple[int, ...] = (64, 64, 128, 128, 256, 256)
    latent_dim: int = 512
    # FC_1..FC_3; FC_4 always emits 3 * M / 8 values
    decoder_fc_widths: tuple[int, ...] = (512, 512, 256)
    point_width: int = 16
    lambda_adv: float = 0.05
    beta_mr: float = 0.95
    non_saturating: bool = False
    single_resolution: bool = False
    # rotate inputs onto their principal axes before encoding
    canonical_frame: bool = False

    def __post_init__(self):
        if self.m_refined % 8:
            raise ValueError(f"m_refined must be divisible by 8, got {self.m_refined}")
        if self.n_raw < 4:
            raise ValueError("n_raw must be at least 4")
        if len(self.encoder_widths) != 6:
            raise ValueError("each encoder branch has exactly six layers")
        if len(self.decoder_fc_widths) != 3:
            raise ValueError("decoder_fc_widths lists FC_1..FC_3")

    @property
    def fc_widths(self) -> tuple[int, ...]:
        return (*self.decoder_fc_widths, 3 * self.m_refined // 8)

    @classmethod
    def tiny(cls, **kw) -> "PrnConfig":
        base = dict(n_raw=16, m_refined=16, encoder_widths=(4, 4, 6, 6, 8, 8), latent_dim=8,
                    decoder_fc_widths=(8, 8, 8), point_width=3)
        base.update(kw)
        return cls(**base)


def split_scales(points: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Full, 1/2 and 1/4 FPS subsets.

    Rows are put in lexicographic order first so the FPS start point, and hence
    the subsets, do not depend on the input row order.
    """
    n = len(points)
    if n < 4:
        raise ValueError(f"need at least 4 points to downsample, got {n}")
    ordered = points[np.lexsort(points.T[::-1])]
    order = fps(ordered, n // 2)
    # FPS prefixes are themselves FPS runs, so the 1/4 set is the first half of the 1/2 set
    return points, ordered[order], ordered[order[: n // 4]]


class PrnModel:
    def __init__(self, config: PrnConfig, seed: int = 0, store: ParamStore | None = None):
        self.config = config
        self.store = store if store is not None else ParamStore()
        rng = np.random.default_rng(seed)
        c = config
        w = c.encoder_widths
        self.branches = {
            scale: ad.init_mlp(self.store, f"prn.enc{scale}", [3, *w], rng) for scale in ("1", "2", "4")
        }
        self.fusion = ad.init_mlp(self.store, "prn.enc_fuse", [3 * w[-1], c.latent_dim], rng)
        f1, f2, f3, f4 = c.fc_widths
        m8, m4 = c.m_refined // 8, c.m_refined // 4
        pw = c.point_width
        init = lambda name, a, b: ad.init_linear(self.store, name, a, b, rng)
        init("prn.fc1", c.latent_dim, f1)
        init("prn.fc2", f1, f2)
        init("prn.fc3", f2, f3)
        init("prn.fc4", f3, f4)
        init("prn.fc2_1", f2, m8 * pw)
        init("prn.mlp2_2", pw, 6)
        init("prn.fc1_2", f1, m4 * pw)
        self.fine_mlp = ad.init_mlp(self.store, "prn.mlp1", [pw, 2 * pw, 2 * pw, 12], rng)

    # ------------------------------------------------------------------
    def encode_scales(self, full: np.ndarray, half: np.ndarray, quarter: np.ndarray) -> Tensor:
        """Latent code from pre-split clouds, each shaped (N_s, 3) or (B, N_s, 3)."""
        feats = []
        for key, pts in (("1", full), ("2", half), ("4", quarter)):
            per_point = ad.mlp(self.store, self.branches[key], Tensor(pts))
            feats.append(ad.max_reduce(per_point, axis=-2))
        return ad.mlp(self.store, self.fusion, ad.concat(feats, axis=-1))

    def encode(self, P) -> Tensor:
        pts = P.points if isinstance(P, PointCloud) else np.asarray(P, dtype=np.float64)
        if pts.shape[-2] != self.config.n_raw or pts.shape[-1] != 3:
            raise ad.ShapeError(f"encoder expects {self.config.n_raw} x 3 points, got {pts.shape}")
        if pts.ndim == 2:
            return self.encode_scales(*split_scales(pts))
        scales = [split_scales(p) for p in pts]
        return self.encode_scales(*(np.stack(s) for s in zip(*scales)))

    def decode(self, v: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        """Coarse (M/8), mediate (M/4) and fine (M) clouds, each with a leading batch axis."""
        c = self.config
        if v.shape[-1] != c.latent_dim:
            raise ad.ShapeError(f"decoder expects latent size {c.latent_dim}, got {v.shape}")
        if v.ndim == 1:
            v = ad.reshape(v, (1, c.latent_dim))
        B = v.shape[0]
        m8, m4, pw = c.m_refined // 8, c.m_refined // 4, c.point_width
        s = self.store
        h1 = ad.relu(ad.linear(s, "prn.fc1", v))
        h2 = ad.relu(ad.linear(s, "prn.fc2", h1))
        h3 = ad.relu(ad.linear(s, "prn.fc3", h2))
        coarse = ad.reshape(ad.linear(s, "prn.fc4", h3), (B, m8, 3))

        mid = ad.reshape(ad.relu(ad.linear(s, "prn.fc2_1", h2)), (B, m8, pw))
        mid = ad.reshape(ad.linear(s, "prn.mlp2_2", mid), (B, m8, 2, 3))
        mid = ad.add(mid, ad.reshape(coarse, (B, m8, 1, 3)))
        mid = ad.reshape(mid, (B, m4, 3))

        fine = ad.reshape(ad.relu(ad.linear(s, "prn.fc1_2", h1)), (B, m4, pw))
        fine = ad.mlp(s, self.fine_mlp, fine, final_relu=False)
        fine = ad.add(ad.reshape(fine, (B, m4, 4, 3)), ad.reshape(mid, (B, m4, 1, 3)))
        fine = ad.reshape(fine, (B, c.m_refined, 3))
        return coarse, mid, fine

    def frame(self, cloud) -> Frame:
        return Frame.of(cloud, self.config.canonical_frame)

    def refine(self, cloud: PointCloud) -> PointCloud:
        """Normalize, encode, decode and map the fine cloud back to the input frame."""
        return PointCloud(self.refine_all(cloud)[2])

    def refine_all(self, cloud: PointCloud) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        frame = self.frame(cloud)
        pts = cloud.points if isinstance(cloud, PointCloud) else cloud
        outs = self.decode(self.encode(frame.forward(pts)))
        return tuple(frame.inverse(o.data[0]) for o in outs)


class Discriminator:
    """Per-point real/fake classifier with logistic output."""

    def __init__(self, widths: Sequence[int] = (3, 64, 128, 1), seed: int = 0,
                 store: ParamStore | None = None):
        if widths[0] != 3 or widths[-1] != 1:
            raise ValueError("discriminator maps a 3D point to one logit")
        self.store = store if store is not None else ParamStore()
        self.layers = ad.init_mlp(self.store, "disc", list(widths), np.random.default_rng(seed))

    def __call__(self, points) -> Tensor:
        return ad.sigmoid(ad.mlp(self.store, self.layers, points, final_relu=False))

    def objectives(self, gt, refined, non_saturating: bool = False) -> tuple[Tensor, Tensor]:
        return loss_adv(self, gt, refined, non_saturating)


def _clamped(p: Tensor) -> Tensor:
    return ad.clip(p, LOG_CLAMP, 1.0 - LOG_CLAMP)


def loss_adv(disc: Discriminator, gt, refined, non_saturating: bool = False) -> tuple[Tensor, Tensor]:
    """(discriminator objective to ascend, generator objective to descend)."""
    gt_t = gt if isinstance(gt, Tensor) else Tensor(gt.points if isinstance(gt, PointCloud) else gt)
    ref_t = refined if isinstance(refined, Tensor) else Tensor(
        refined.points if isinstance(refined, PointCloud) else refined)
    d_real = _clamped(disc(gt_t))
    d_fake = _clamped(disc(ref_t))
    fake_term = ad.sum_(ad.log(ad.sub(1.0, d_fake)))
    disc_obj = ad.add(ad.sum_(ad.log(d_real)), fake_term)
    gen_obj = ad.mul(ad.sum_(ad.log(d_fake)), -1.0) if non_saturating else fake_term
    return disc_obj, gen_obj


def chamfer_tensor(P: Tensor, Q) -> Tensor:
    """Differentiable Chamfer distance between (M, 3) and (H, 3) clouds."""
    Q = Q if isinstance(Q, Tensor) else Tensor(Q)
    if P.ndim != 2 or Q.ndim != 2 or P.shape[1] != 3 or Q.shape[1] != 3:
        raise ad.ShapeError(f"chamfer expects (M, 3) and (H, 3), got {P.shape} and {Q.shape}")
    return ad.add(ad.mean(ad.nn_sqdist(P, Q)), ad.mean(ad.nn_sqdist(Q, P)))


def loss_mr(outputs: Sequence[Tensor], gt, single_resolution: bool = False) -> Tensor:
    """Chamfer of the fine, mediate and coarse clouds against ``gt`` (one object)."""
    coarse, mid, fine = outputs
    gt_t = gt if isinstance(gt, Tensor) else Tensor(gt.points if isinstance(gt, PointCloud) else gt)
    squeeze = lambda t: t if t.ndim == 2 else ad.reshape(t, t.shape[-2:])
    total = chamfer_tensor(squeeze(fine), gt_t)
    if single_resolution:
        return total
    total = ad.add(total, chamfer_tensor(squeeze(mid), gt_t))
    return ad.add(total, chamfer_tensor(squeeze(coarse), gt_t))


def loss_prn(mr: Tensor, gen_adv: Tensor, lam: float, beta: float) -> Tensor:
    return ad.add(ad.mul(gen_adv, lam), ad.mul(mr, beta))


# ---------------------------------------------------------------------------
# Training


@dataclass
class PrnBatch:
    """Normalized inputs (split into scales) and targets for a batch of objects."""

    full: np.ndarray
    half: np.ndarray
    quarter: np.ndarray
    targets: list[np.ndarray]
    frames: list[Frame] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.targets)


def prepare_batch(pairs: Sequence[tuple[PointCloud, PointCloud]], canonical: bool = False) -> PrnBatch:
    """Normalize each raw cloud and express its target in the same frame."""
    if not pairs:
        raise ValueError("empty batch")
    splits, targets, frames = [], [], []
    for raw, gt in pairs:
        frame = Frame.of(raw, canonical)
        raw_pts = raw.points if isinstance(raw, PointCloud) else raw
        gt_pts = gt.points if isinstance(gt, PointCloud) else gt
        splits.append(split_scales(frame.forward(raw_pts)))
        targets.append(frame.forward(gt_pts))
        frames.append(frame)
    full, half, quarter = (np.stack(x) for x in zip(*splits))
    return PrnBatch(full, half, quarter, targets, frames)


def subset_batch(batch: PrnBatch, idx) -> PrnBatch:
    idx = list(idx)
    return PrnBatch(batch.full[idx], batch.half[idx], batch.quarter[idx],
                    [batch.targets[i] for i in idx], [batch.frames[i] for i in idx])


@dataclass
class PrnLosses:
    disc: float
    gen: float
    mr: float
    adv: float


def prn_forward_losses(model: PrnModel, disc: Discriminator, batch: PrnBatch,
                       cfg: PrnConfig | None = None) -> tuple[Tensor, Tensor, Tensor, list[Tensor]]:
    """Summed (loss_prn, loss_mr, gen objective) over the batch plus fine outputs."""
    cfg = cfg or model.config
    coarse, mid, fine = model.decode(model.encode_scales(batch.full, batch.half, batch.quarter))
    total = mr_sum = adv_sum = None
    fines = []
    for b in range(len(batch)):
        outs = (coarse[b], mid[b], fine[b])
        mr = loss_mr(outs, batch.targets[b], cfg.single_resolution)
        _, gen = loss_adv(disc, batch.targets[b], fine[b], cfg.non_saturating)
        obj = loss_prn(mr, gen, cfg.lambda_adv, cfg.beta_mr)
        total = obj if total is None else ad.add(total, obj)
        mr_sum = mr if mr_sum is None else ad.add(mr_sum, mr)
        adv_sum = gen if adv_sum is None else ad.add(adv_sum, gen)
        fines.append(fine[b])
    return total, mr_sum, adv_sum, fines


def discriminator_step(disc: Discriminator, batch: PrnBatch, fakes: Sequence[np.ndarray],
                       lr: float) -> float:
    disc.store.zero_grad()
    with Tape() as tape:
        loss = None
        for gt, fake in zip(batch.targets, fakes):
            d_obj, _ = loss_adv(disc, gt, Tensor(fake))
            loss = ad.mul(d_obj, -1.0) if loss is None else ad.sub(loss, d_obj)
    tape.backward(loss)
    ad.adam_step(disc.store, lr)
    return loss.item()


def prn_train_step(model: PrnModel, disc: Discriminator, batch, lr: float,
                   cfg: PrnConfig | None = None) -> PrnLosses:
    """One discriminator ADAM step, then one generator ADAM step.

    ``batch`` is a :class:`PrnBatch` or a list of (raw, gt) cloud pairs. The
    returned values are measured before either update.
    """
    cfg = cfg or model.config
    if not isinstance(batch, PrnBatch):
        batch = prepare_batch(batch, cfg.canonical_frame)
    _, _, fine = model.decode(model.encode_scales(batch.full, batch.half, batch.quarter))
    d_loss = discriminator_step(disc, batch, [fine.data[b] for b in range(len(batch))], lr)

    model.store.zero_grad()
    disc.store.set_requires_grad(False)
    try:
        with Tape() as tape:
            total, mr, adv, _ = prn_forward_losses(model, disc, batch, cfg)
        tape.backward(total)
    finally:
        disc.store.set_requires_grad(True)
    ad.adam_step(model.store, lr)
    return PrnLosses(d_loss, total.item(), mr.item(), adv.item())


def with_config(model: PrnModel, **changes) -> PrnConfig:
    return replace(model.config, **changes)
