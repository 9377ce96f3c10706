import numpy as np
import pytest

from prgcn import autodiff as ad
from prgcn.autodiff import ParamStore, Tensor
from prgcn.gcn import EdgeConvLayer, FusionNet, KnnGraph, edgeconv
from prgcn.gradcheck import check_gradients


def sum_layer(d_out=1, activation=False):
    store = ParamStore()
    layer = EdgeConvLayer.create(store, "e", 1, d_out, np.random.default_rng(0), activation=activation)
    store["e.weight"].data[:] = 1.0
    store["e.bias"].data[:] = 0.0
    return layer


def test_edgeconv_two_point_example():
    out = edgeconv(sum_layer(), np.array([[0.0], [1.0]]), KnnGraph(np.array([[1], [0]])))
    np.testing.assert_array_equal(out.data, [[-1.0], [2.0]])


def test_edgeconv_identical_features():
    layer = EdgeConvLayer.create(ParamStore(), "e", 3, 4, np.random.default_rng(1))
    f = np.tile([0.3, -0.2, 0.5], (6, 1))
    out = edgeconv(layer, f, KnnGraph.build(np.random.default_rng(2).normal(size=(6, 3)), 3)).data
    assert np.all(out == out[0])


def test_edgeconv_neighbor_order_is_irrelevant():
    rng = np.random.default_rng(3)
    layer = EdgeConvLayer.create(ParamStore(), "e", 5, 7, rng)
    f = rng.normal(size=(40, 5))
    graph = KnnGraph.build(rng.normal(size=(40, 3)), 8)
    shuffled = KnnGraph(np.array([row[rng.permutation(8)] for row in graph.neighbors]))
    np.testing.assert_array_equal(edgeconv(layer, f, graph).data, edgeconv(layer, f, shuffled).data)


def test_graph_validation():
    with pytest.raises(ValueError):
        KnnGraph(np.array([[0], [0]]))
    with pytest.raises(ValueError):
        KnnGraph(np.array([[2], [0]]))


def test_edgeconv_shape_checks():
    with pytest.raises(ad.ShapeError):
        edgeconv(sum_layer(), np.zeros((3, 2)), KnnGraph(np.array([[1], [0], [0]])))


# fusion network

NET = dict(d_rgb=4, gcn_f_widths=(6, 5), gcn_ref_widths=(5, 6), t_widths=(8, 7), k=5, n_ref=20)


def inputs(seed=0, n=20, m=32):
    rng = np.random.default_rng(seed)
    return rng.normal(size=(n, 3)) * 0.05, rng.uniform(size=(n, 3)), rng.normal(size=(m, 3)) * 0.05


def test_texture_features():
    net = FusionNet(**NET)
    colors = np.random.default_rng(0).uniform(size=(9, 3))
    colors[4] = colors[2]
    out = net.texture_features(colors).data
    assert out.shape == (9, 4)
    np.testing.assert_array_equal(out[4], out[2])
    for name in net.texture_layers:
        net.store[f"{name}.weight"].data[:] = 0.0
    last = net.texture_layers[-1]
    np.testing.assert_array_equal(net.texture_features(colors).data,
                                  np.tile(net.store[f"{last}.bias"].data, (9, 1)))


def test_gcn_f_shape_translation_and_permutation():
    net = FusionNet(**NET, seed=1)
    pts, colors, _ = inputs(1)
    G = net.gcn_f_forward(net.features(pts, colors)).data
    assert G.shape == (20, 5)
    moved = net.gcn_f_forward(net.features(pts + [0.3, -0.1, 0.7], colors)).data
    np.testing.assert_allclose(moved, G, atol=1e-9)
    perm = np.random.default_rng(2).permutation(20)
    permuted = net.gcn_f_forward(net.features(pts[perm], colors[perm])).data
    np.testing.assert_allclose(permuted, G[perm], atol=1e-6)


def test_gcn_ref_shape_and_determinism():
    net = FusionNet(**NET, seed=2)
    _, _, refined = inputs(2)
    a = net.gcn_ref_forward(refined).data
    assert a.shape == (20, 6)
    np.testing.assert_array_equal(a, net.gcn_ref_forward(refined).data)


def test_gcn_ref_needs_enough_points():
    net = FusionNet(**NET)
    with pytest.raises(ValueError):
        net.gcn_ref_forward(np.zeros((10, 3)))


def test_fuse_identity_weights_concatenate():
    net = FusionNet(**{**NET, "t_widths": (11,)}, seed=3)
    name = net.t_layers[0]
    net.store[f"{name}.weight"].data[:] = np.eye(11)
    net.store[f"{name}.bias"].data[:] = 0.0
    pts, colors, refined = inputs(3)
    G_f = net.gcn_f_forward(net.features(pts, colors))
    G_ref = net.gcn_ref_forward(refined)
    out = net.fuse(G_f, G_ref).data
    assert out.shape == (20, 11)
    np.testing.assert_array_equal(out, np.concatenate([G_f.data, G_ref.data], axis=1))


def test_fusion_gradients():
    net = FusionNet(**NET, seed=4)
    pts, colors, refined = inputs(4)
    refined_t = Tensor(refined)
    proj = Tensor(np.random.default_rng(5).normal(size=(7, 1)))
    fn = lambda: ad.mean(ad.square(ad.matmul(net.forward(pts, colors, refined_t), proj)))
    assert check_gradients(fn, list(net.store.params.values()) + [refined_t], max_entries=6) < 1e-4
