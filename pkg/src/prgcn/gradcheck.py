"""Central finite-difference checks for the autodiff engine and the networks."""

from __future__ import annotations

import contextlib
import time
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor

STEP = 1e-5
TOLERANCE = 1e-4


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max-norm relative error ``|a - n|_inf / max(|a|_inf, |n|_inf)``."""
    scale = max(np.max(np.abs(analytic), initial=0.0), np.max(np.abs(numeric), initial=0.0))
    if scale < 1e-12:
        return float(np.max(np.abs(analytic - numeric), initial=0.0))
    return float(np.max(np.abs(analytic - numeric)) / scale)


def check_gradients(fn: Callable[[], Tensor], tensors: Sequence[Tensor], h: float = STEP,
                    max_entries: int | None = None,
                    rng: np.random.Generator | None = None) -> float:
    """Compare tape gradients of scalar ``fn()`` against central differences.

    ``fn`` must rebuild the graph from the current ``.data`` of ``tensors`` on
    every call. With ``max_entries`` only a random subset of each tensor's
    entries is perturbed.
    """
    for t in tensors:
        t.requires_grad = True
        t.grad = None
    with Tape() as tape:
        loss = fn()
    tape.backward(loss)
    analytic, numeric = [], []
    rng = rng or np.random.default_rng(0)
    for t in tensors:
        grad = t.grad if t.grad is not None else np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, size=max_entries, replace=False)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            up = fn().item()
            flat[i] = orig - h
            down = fn().item()
            flat[i] = orig
            numeric.append((up - down) / (2 * h))
            analytic.append(grad.reshape(-1)[i])
    return relative_error(np.array(analytic), np.array(numeric))


@dataclass
class GradcheckRow:
    component: str
    kind: str
    max_rel_error: float
    seconds: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.max_rel_error)) and self.max_rel_error < TOLERANCE


def _primitive_cases(rng: np.random.Generator) -> dict[str, tuple[Callable[[], Tensor], list[Tensor]]]:
    def rand(*shape, lo=-1.0, hi=1.0):
        return Tensor(rng.uniform(lo, hi, size=shape))

    # keep relu/max inputs away from kinks so that +-h never crosses one
    def away_from_zero(*shape):
        x = rng.uniform(0.1, 1.0, size=shape) * rng.choice([-1.0, 1.0], size=shape)
        return Tensor(x)

    a, b = rand(3, 4), rand(4, 2)
    c, d = rand(2, 3, 4), rand(4)
    r = away_from_zero(5, 3)
    p, q = rand(2, 3), rand(2, 2)
    mx = Tensor(rng.permutation(12).reshape(3, 4) * 0.1 + rng.uniform(0, 0.01, size=(3, 4)))
    mn = rand(3, 5)
    s = rand(4, 3)
    lg = rand(3, 3, lo=0.5, hi=2.0)
    sq = rand(4, 3)
    w = rand(3, 1)
    qt = rand(5, 4)
    nn_a, nn_b = rand(2, 6, 3), rand(2, 5, 3)
    return {
        "matmul": (lambda: ad.mean(ad.square(ad.matmul(a, b))), [a, b]),
        "add_broadcast": (lambda: ad.mean(ad.square(ad.add(c, d))), [c, d]),
        "relu": (lambda: ad.mean(ad.matmul(ad.relu(r), w)), [r]),
        "concat_axis": (lambda: ad.mean(ad.square(ad.matmul(ad.concat([p, q], axis=1), rand_fixed(5, 1, rng)))), [p, q]),
        "max_reduce_axis": (lambda: ad.mean(ad.square(ad.max_reduce(mx, axis=1))), [mx]),
        "mean_reduce": (lambda: ad.square(ad.mean(ad.square(mn))), [mn]),
        "square": (lambda: ad.mean(ad.matmul(ad.square(s), w)), [s]),
        "log": (lambda: ad.mean(ad.log(lg)), [lg]),
        "sqnorm": (lambda: ad.mean(ad.square(ad.sqnorm(sq, axis=1))), [sq]),
        "quat_to_rotmat": (lambda: ad.mean(ad.square(ad.matmul(ad.quat_to_rotmat(qt), rand_fixed(3, 2, rng)))), [qt]),
        "sigmoid": (lambda: ad.mean(ad.square(ad.sigmoid(mn))), [mn]),
        "sqrt": (lambda: ad.mean(ad.sqrt(lg)), [lg]),
        "div": (lambda: ad.mean(ad.div(s, ad.add(ad.square(s), 1.0))), [s]),
        "nn_sqdist": (lambda: ad.mean(ad.nn_sqdist(nn_a, nn_b)), [nn_a, nn_b]),
        "take": (lambda: ad.mean(ad.square(ad.take(s, [0, 2, 2, 3], axis=0))), [s]),
    }


_fixed_cache: dict[tuple, Tensor] = {}


def rand_fixed(rows: int, cols: int, rng: np.random.Generator) -> Tensor:
    """A constant projection drawn once per (shape, generator) so ``fn`` stays deterministic."""
    key = (rows, cols, id(rng))
    if key not in _fixed_cache:
        _fixed_cache[key] = Tensor(rng.uniform(-1, 1, size=(rows, cols)))
    return _fixed_cache[key]


def primitive_errors(seed: int) -> dict[str, float]:
    rng = np.random.default_rng(seed)
    _fixed_cache.clear()
    out = {}
    for name, (fn, tensors) in _primitive_cases(rng).items():
        out[name] = check_gradients(fn, tensors)
    _fixed_cache.clear()
    return out


def network_errors(seed: int, max_entries: int = 6) -> dict[str, float]:
    # imported lazily: the networks depend on this package's geometry code
    from .gcn import FusionNet
    from .pointcloud import synth_cloud_for_checks
    from .pose import PoseHeads, loss_pose_tensor
    from .prn import Discriminator, PrnConfig, PrnModel, chamfer_tensor

    rng = np.random.default_rng(seed)
    out = {}

    cfg = PrnConfig.tiny()
    model = PrnModel(cfg, seed=seed)
    raw = synth_cloud_for_checks(rng, cfg.n_raw)
    target = Tensor(synth_cloud_for_checks(rng, 24))

    def prn_loss():
        coarse, mid, fine = model.decode(model.encode(raw))
        return ad.add(ad.add(chamfer_tensor(fine[0], target), chamfer_tensor(mid[0], target)),
                      chamfer_tensor(coarse[0], target))

    out["prn"] = check_gradients(prn_loss, list(model.store.params.values()),
                                 max_entries=max_entries, rng=rng)

    disc = Discriminator(widths=(3, 8, 8, 1), seed=seed)
    real = Tensor(rng.normal(size=(10, 3)))
    fake = Tensor(rng.normal(size=(12, 3)))

    def disc_loss():
        d_obj, _ = disc.objectives(real, fake)
        return ad.mul(d_obj, -1.0)

    out["discriminator"] = check_gradients(disc_loss, list(disc.store.params.values()),
                                           max_entries=max_entries, rng=rng)

    net = FusionNet.tiny(seed=seed)
    pts = synth_cloud_for_checks(rng, 20)
    colors = rng.uniform(0, 1, size=(20, 3))
    refined = synth_cloud_for_checks(rng, 24)
    proj = Tensor(rng.normal(size=(net.out_dim, 1)))

    def gcn_loss():
        g = net.forward(pts, colors, refined)
        return ad.mean(ad.square(ad.matmul(g, proj)))

    out["mmf_gcn"] = check_gradients(gcn_loss, list(net.store.params.values()),
                                     max_entries=max_entries, rng=rng)

    heads = PoseHeads(in_dim=6, hidden=(8, 8, 8), seed=seed)
    feats = Tensor(rng.normal(size=(7, 6)))
    anchors = rng.normal(size=(7, 3)) * 0.3
    model_pts = rng.normal(size=(7, 3)) * 0.05
    gt_r = _random_rotation(rng)
    gt_t = rng.normal(size=3) * 0.1

    def head_loss():
        cand = heads.forward(feats, anchors, centroid=np.zeros(3), scale=1.0)
        return loss_pose_tensor(cand, gt_r, gt_t, model_pts)

    out["pose_heads"] = check_gradients(head_loss, list(heads.store.params.values()),
                                        max_entries=max_entries, rng=rng)
    return out


def _random_rotation(rng: np.random.Generator) -> np.ndarray:
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    return ad.quat_to_rotmat(q).data


@contextlib.contextmanager
def corrupted_backward(kind: str):
    """Test hook: perturb the backward rule of one primitive while the block runs."""
    table = ad.PRIMITIVES if kind in ad.PRIMITIVES else ad.AUXILIARY
    if kind not in table:
        raise KeyError(f"unknown op kind {kind!r}")
    original_record = ad._record

    def record(k, inputs, out, grad_fn):
        if k == kind:
            def broken(g, _fn=grad_fn):
                return tuple(None if x is None else 1.5 * x for x in _fn(g))
            return original_record(k, inputs, out, broken)
        return original_record(k, inputs, out, grad_fn)

    ad._record = record
    try:
        yield
    finally:
        ad._record = original_record


def run_gradcheck(seeds: Sequence[int] = range(10), corrupt: str | None = None,
                  include_networks: bool = True) -> list[GradcheckRow]:
    """One row per primitive and per network, max error over ``seeds``."""
    ctx = corrupted_backward(corrupt) if corrupt else contextlib.nullcontext()
    worst: dict[str, float] = {}
    kinds: dict[str, str] = {}
    elapsed: dict[str, float] = {}
    with ctx:
        for seed in seeds:
            t0 = time.perf_counter()
            for name, err in primitive_errors(seed).items():
                worst[name] = max(worst.get(name, 0.0), err)
                kinds[name] = "primitive"
            elapsed["primitives"] = elapsed.get("primitives", 0.0) + time.perf_counter() - t0
            if include_networks:
                t0 = time.perf_counter()
                for name, err in network_errors(seed).items():
                    worst[name] = max(worst.get(name, 0.0), err)
                    kinds[name] = "network"
                elapsed["networks"] = elapsed.get("networks", 0.0) + time.perf_counter() - t0
    rows = []
    for name, err in worst.items():
        group = "primitives" if kinds[name] == "primitive" else "networks"
        rows.append(GradcheckRow(name, kinds[name], err, elapsed[group]))
    return rows


def format_table(rows: Sequence[GradcheckRow]) -> str:
    lines = [f"{'component':<18} {'kind':<10} {'max rel err':>12}  status"]
    for r in rows:
        lines.append(f"{r.component:<18} {r.kind:<10} {r.max_rel_error:>12.3e}  {'PASS' if r.passed else 'FAIL'}")
    return "\n".join(lines)
