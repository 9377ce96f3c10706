import math

import numpy as np
import pytest

from prgcn import autodiff as ad
from prgcn.autodiff import Tensor
from prgcn.data import make_scenes
from prgcn.gradcheck import check_gradients
from prgcn.pointcloud import PointCloud, chamfer
from prgcn.pose import Pose
from prgcn.prn import (Discriminator, PrnConfig, PrnModel, chamfer_tensor, loss_adv, loss_mr,
                       loss_prn, prepare_batch, prn_train_step, split_scales)

CFG = PrnConfig.tiny(n_raw=24, m_refined=32)


def cloud(n, seed=0):
    return np.random.default_rng(seed).normal(size=(n, 3))


def test_latent_shape_and_permutation_invariance():
    model = PrnModel(CFG, seed=1)
    pts = cloud(24)
    v = model.encode(pts).data
    assert v.shape == (CFG.latent_dim,)
    perm = np.random.default_rng(2).permutation(24)
    np.testing.assert_allclose(model.encode(pts[perm]).data, v, atol=1e-9)


def test_scale_branch_is_permutation_invariant():
    model = PrnModel(CFG, seed=1)
    full, half, quarter = split_scales(cloud(24))
    perm = np.random.default_rng(3).permutation
    a = model.encode_scales(full, half, quarter).data
    b = model.encode_scales(full[perm(24)], half[perm(12)], quarter[perm(6)]).data
    np.testing.assert_allclose(a, b, atol=1e-9)


def test_canonical_refinement_follows_rotation():
    model = PrnModel(PrnConfig.tiny(n_raw=24, m_refined=32, canonical_frame=True), seed=1)
    rng = np.random.default_rng(6)
    pts = rng.gamma(2.0, size=(24, 3)) * [3.0, 2.0, 1.0]
    Q = Pose.random(rng).matrix
    np.testing.assert_allclose(model.refine(PointCloud(pts @ Q.T)).points,
                               model.refine(PointCloud(pts)).points @ Q.T, atol=1e-9)


def test_different_clouds_differ():
    model = PrnModel(CFG, seed=1)
    assert not np.allclose(model.encode(cloud(24, 0)).data, model.encode(cloud(24, 1)).data)


def test_encoder_rejects_wrong_size():
    with pytest.raises(ad.ShapeError):
        PrnModel(CFG).encode(cloud(23))


def test_split_scales_prefix():
    pts = cloud(100)
    full, half, quarter = split_scales(pts)
    assert (len(full), len(half), len(quarter)) == (100, 50, 25)
    np.testing.assert_array_equal(quarter, half[:25])
    _, half2, _ = split_scales(pts[::-1])
    np.testing.assert_array_equal(half2, half)


def test_decode_sizes():
    model = PrnModel(PrnConfig(encoder_widths=(8,) * 6, latent_dim=16, decoder_fc_widths=(16, 16, 16),
                               point_width=4), seed=0)
    coarse, mid, fine = model.decode(model.encode(cloud(100)))
    assert (coarse.shape, mid.shape, fine.shape) == ((1, 64, 3), (1, 128, 3), (1, 512, 3))


def test_zero_residuals_broadcast_parents():
    model = PrnModel(CFG, seed=4)
    for name in ("prn.mlp2_2", model.fine_mlp[-1]):
        model.store[f"{name}.weight"].data[:] = 0.0
        model.store[f"{name}.bias"].data[:] = 0.0
    coarse, mid, fine = (t.data[0] for t in model.decode(model.encode(cloud(24))))
    np.testing.assert_array_equal(mid, np.repeat(coarse, 2, axis=0))
    np.testing.assert_array_equal(fine, np.repeat(coarse, 8, axis=0))


def test_decoder_gradients():
    model = PrnModel(CFG, seed=5)
    v = model.encode(cloud(24))
    target = Tensor(cloud(20, 9))
    decoder = [t for n, t in model.store.items() if not n.startswith("prn.enc")]
    err = check_gradients(lambda: chamfer_tensor(model.decode(Tensor(v.data))[2][0], target), decoder,
                          max_entries=8)
    assert err < 1e-4


def test_chamfer_tensor_matches_numpy():
    P, Q = cloud(13, 1), cloud(7, 2)
    assert chamfer_tensor(Tensor(P), Q).item() == pytest.approx(chamfer(P, Q), abs=1e-12)


# losses


def test_loss_mr_examples():
    one = Tensor([[1.0, 0, 0]])
    assert loss_mr((one, one, one), np.zeros((1, 3))).item() == 6.0
    gt = cloud(10)
    assert loss_mr((Tensor(gt), Tensor(gt), Tensor(gt)), gt).item() == 0.0
    a, b, c = cloud(4, 1), cloud(8, 2), cloud(16, 3)
    ref = chamfer(a, gt) + chamfer(b, gt) + chamfer(c, gt)
    assert loss_mr((Tensor(a), Tensor(b), Tensor(c)), gt).item() == pytest.approx(ref, abs=1e-12)
    assert loss_mr((Tensor(a), Tensor(b), Tensor(c)), gt, single_resolution=True).item() == \
        pytest.approx(chamfer(c, gt), abs=1e-12)


class HalfDisc(Discriminator):
    def __call__(self, points):
        n = points.shape[0]
        return Tensor(np.full((n, 1), 0.5))


def test_loss_adv_half_discriminator():
    d, g = loss_adv(HalfDisc(), np.zeros((1, 3)), np.ones((1, 3)))
    assert d.item() == pytest.approx(2 * math.log(0.5), abs=1e-15)
    assert g.item() == pytest.approx(math.log(0.5), abs=1e-15)


def test_loss_adv_gradient_wrt_points():
    disc = Discriminator((3, 6, 5, 1), seed=2)
    refined = Tensor(cloud(5, 4))
    err = check_gradients(lambda: loss_adv(disc, cloud(4, 3), refined)[1], [refined])
    assert err < 1e-4


def test_loss_prn_examples():
    mr, gen = Tensor(6.0), Tensor(-0.6931)
    assert loss_prn(mr, gen, 0.0, 1.0).item() == 6.0
    assert loss_prn(mr, gen, 0.05, 0.95).item() == pytest.approx(5.665345, abs=1e-12)
    assert loss_prn(mr, gen, 1.0, 0.0).item() == -0.6931


# training


def _sphere_pair():
    scene = make_scenes(1, ["sphere"], 64, 0.4, 0.01, seed=3)[0]
    raw = PointCloud(scene.raw.points[:24])
    return raw, scene.gt


def test_overfit_one_pair():
    raw, gt = _sphere_pair()
    cfg = PrnConfig.tiny(n_raw=24, m_refined=64, latent_dim=32, decoder_fc_widths=(64, 64, 64),
                         point_width=4, lambda_adv=0.0)
    model = PrnModel(cfg, seed=0)
    disc = Discriminator((3, 8, 1), seed=1)
    start = chamfer(model.refine(raw), gt)
    for _ in range(200):
        prn_train_step(model, disc, [(raw, gt)], lr=3e-3)
    assert chamfer(model.refine(raw), gt) <= 0.1 * start


def test_zero_lr_keeps_losses_constant():
    raw, gt = _sphere_pair()
    model = PrnModel(CFG, seed=0)
    disc = Discriminator((3, 4, 1), seed=1)
    batch = prepare_batch([(raw, gt)])
    losses = [prn_train_step(model, disc, batch, lr=0.0) for _ in range(3)]
    assert losses[0].gen == losses[1].gen == losses[2].gen
    assert losses[0].disc == losses[2].disc


def test_training_is_deterministic():
    raw, gt = _sphere_pair()

    def run():
        model = PrnModel(CFG, seed=0)
        disc = Discriminator((3, 4, 1), seed=1)
        return [prn_train_step(model, disc, [(raw, gt)], lr=1e-3).gen for _ in range(5)]

    assert run() == run()
