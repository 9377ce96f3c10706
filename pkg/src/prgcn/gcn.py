"""Multi-modal fusion: EdgeConv stacks over a texture+geometry k-NN graph and over
the refined cloud, concatenated and mixed by fully-connected layers."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor
from .pointcloud import PointCloud, fps, knn


@dataclass(frozen=True)
class KnnGraph:
    neighbors: np.ndarray  # (n_vertices, k)

    def __post_init__(self):
        nb = np.asarray(self.neighbors, dtype=np.intp)
        if nb.ndim != 2:
            raise ValueError("neighbor table must be 2-D")
        n = len(nb)
        if np.any(nb < 0) or np.any(nb >= n):
            raise ValueError("neighbor index out of range")
        if np.any(nb == np.arange(n)[:, None]):
            raise ValueError("self-loops are not allowed")
        object.__setattr__(self, "neighbors", nb)

    @property
    def n_vertices(self) -> int:
        return self.neighbors.shape[0]

    @property
    def k(self) -> int:
        return self.neighbors.shape[1]

    @classmethod
    def build(cls, points, k: int) -> "KnnGraph":
        return cls(knn(points, k))


@dataclass
class PointFeatures:
    geometry: np.ndarray  # (N, 3) normalized coordinates
    texture: Tensor  # (N, d_rgb)

    def __post_init__(self):
        if len(self.geometry) != self.texture.shape[0]:
            raise ValueError("geometry and texture row counts differ")

    def fused(self) -> Tensor:
        return ad.concat([self.texture, Tensor(self.geometry)], axis=1)


@dataclass
class EdgeConvLayer:
    """``h(f_i - f_j, f_i)`` as one linear map over the concatenated pair."""

    store: ParamStore
    name: str
    d_in: int
    d_out: int
    activation: bool = True

    @classmethod
    def create(cls, store: ParamStore, name: str, d_in: int, d_out: int,
               rng: np.random.Generator, activation: bool = True) -> "EdgeConvLayer":
        ad.init_linear(store, name, 2 * d_in, d_out, rng)
        return cls(store, name, d_in, d_out, activation)

    @property
    def weight(self) -> Tensor:
        return self.store[f"{self.name}.weight"]

    @property
    def bias(self) -> Tensor:
        return self.store[f"{self.name}.bias"]


def edgeconv(layer: EdgeConvLayer, features, graph: KnnGraph) -> Tensor:
    """Max over neighbors of the edge function, per vertex."""
    f = features if isinstance(features, Tensor) else Tensor(features)
    if f.ndim != 2 or f.shape[1] != layer.d_in:
        raise ad.ShapeError(f"edgeconv {layer.name}: expected (N, {layer.d_in}) features, got {f.shape}")
    if graph.n_vertices != f.shape[0]:
        raise ad.ShapeError(f"edgeconv {layer.name}: graph has {graph.n_vertices} vertices, features {f.shape[0]}")
    n, d = f.shape
    # linear(concat(a, b)) == a @ W[:d] + b @ W[d:]; the center term is shared by all k edges
    w_diff = ad.getitem(layer.weight, slice(0, d))
    w_center = ad.getitem(layer.weight, slice(d, 2 * d))
    neigh = ad.take(f, graph.neighbors, axis=0)  # (N, k, d)
    diff = ad.sub(ad.reshape(f, (n, 1, d)), neigh)
    center = ad.add(ad.matmul(f, w_center), layer.bias)
    edge = ad.add(ad.matmul(diff, w_diff), ad.reshape(center, (n, 1, layer.d_out)))
    if layer.activation:
        edge = ad.relu(edge)
    return ad.max_reduce(edge, axis=1)


def _normalize_tensor(points: Tensor) -> Tensor:
    """Differentiable centering and unit-radius scaling of an (N, 3) cloud."""
    centered = ad.sub(points, ad.mean(points, axis=0, keepdims=True))
    radius2 = ad.max_reduce(ad.sqnorm(centered, axis=1), axis=0)
    if radius2.item() == 0.0:
        return centered
    return ad.div(centered, ad.sqrt(radius2))


def normalize_numpy(points: np.ndarray) -> np.ndarray:
    centered = points - points.mean(axis=0)
    r = np.sqrt((centered ** 2).sum(axis=1).max())
    return centered / r if r > 0 else centered


class FusionNet:
    def __init__(self, d_rgb: int = 32, gcn_f_widths: Sequence[int] = (64, 128, 256),
                 gcn_ref_widths: Sequence[int] = (64, 128, 256),
                 t_widths: Sequence[int] = (512, 512, 256), k: int = 30, n_ref: int = 100,
                 seed: int = 0, store: ParamStore | None = None):
        self.store = store if store is not None else ParamStore()
        self.k = k
        self.n_ref = n_ref
        self.d_rgb = d_rgb
        rng = np.random.default_rng(seed)
        self.texture_layers = ad.init_mlp(self.store, "mmf.rgb", [3, d_rgb, d_rgb], rng)
        self.gcn_f = self._stack("mmf.gcn_f", d_rgb + 3, gcn_f_widths, rng)
        self.gcn_ref = self._stack("mmf.gcn_ref", 3, gcn_ref_widths, rng)
        self.d_f = gcn_f_widths[-1]
        self.d_ref = gcn_ref_widths[-1]
        self.t_layers = ad.init_mlp(self.store, "mmf.t", [self.d_f + self.d_ref, *t_widths], rng)
        self.out_dim = t_widths[-1]

    def _stack(self, prefix, d_in, widths, rng) -> list[EdgeConvLayer]:
        layers = []
        for i, w in enumerate(widths):
            layers.append(EdgeConvLayer.create(self.store, f"{prefix}.{i}", d_in, w, rng))
            d_in = w
        return layers

    @classmethod
    def tiny(cls, seed: int = 0, **kw) -> "FusionNet":
        base = dict(d_rgb=4, gcn_f_widths=(6, 5), gcn_ref_widths=(5, 6), t_widths=(8, 7),
                    k=4, n_ref=20)
        base.update(kw)
        return cls(seed=seed, **base)

    # ------------------------------------------------------------------
    def texture_features(self, cloud) -> Tensor:
        colors = cloud.colors if isinstance(cloud, PointCloud) else cloud
        if colors is None:
            raise ValueError("texture features need per-point colors")
        return ad.mlp(self.store, self.texture_layers, Tensor(colors), final_relu=False)

    def gcn_f_forward(self, feats: PointFeatures) -> Tensor:
        n = len(feats.geometry)
        if n <= self.k:
            raise ValueError(f"GCN_f needs more than k={self.k} points, got {n}")
        graph = KnnGraph.build(feats.geometry, self.k)
        x = feats.fused()
        for layer in self.gcn_f:
            x = edgeconv(layer, x, graph)
        return x

    def gcn_ref_forward(self, refined) -> Tensor:
        pts = refined if isinstance(refined, Tensor) else Tensor(
            refined.points if isinstance(refined, PointCloud) else refined)
        if pts.shape[0] < self.n_ref:
            raise ValueError(f"GCN_ref needs at least {self.n_ref} refined points, got {pts.shape[0]}")
        idx = fps(pts.data, self.n_ref, 0)
        sub = _normalize_tensor(ad.take(pts, idx, axis=0))
        graph = KnnGraph.build(sub.data, self.k)
        x = sub
        for layer in self.gcn_ref:
            x = edgeconv(layer, x, graph)
        return x

    def fuse(self, G_f: Tensor, G_ref: Tensor) -> Tensor:
        if G_f.shape[0] != G_ref.shape[0]:
            raise ad.ShapeError(f"fuse: row mismatch {G_f.shape[0]} vs {G_ref.shape[0]}")
        return ad.mlp(self.store, self.t_layers, ad.concat([G_f, G_ref], axis=1))

    def features(self, points: np.ndarray, colors: np.ndarray) -> PointFeatures:
        return PointFeatures(normalize_numpy(np.asarray(points, dtype=np.float64)),
                             self.texture_features(colors))

    def forward(self, points: np.ndarray, colors: np.ndarray, refined) -> Tensor:
        """G_o for one object from its raw points, their colors and the refined cloud."""
        G_f = self.gcn_f_forward(self.features(points, colors))
        G_ref = self.gcn_ref_forward(refined)
        return self.fuse(G_f, G_ref)


def texture_features(net: FusionNet, cloud: PointCloud) -> Tensor:
    return net.texture_features(cloud)


def gcn_f_forward(net: FusionNet, feats: PointFeatures, cloud: PointCloud | None = None) -> Tensor:
    return net.gcn_f_forward(feats)


def gcn_ref_forward(net: FusionNet, refined) -> Tensor:
    return net.gcn_ref_forward(refined)


def fuse(net: FusionNet, G_f: Tensor, G_ref: Tensor) -> Tensor:
    return net.fuse(G_f, G_ref)
