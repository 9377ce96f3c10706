"""Rigid poses, per-point pose regression heads, confidence selection and pose losses."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor

UNIT_TOL = 1e-6


def quat_to_matrix(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    if q.shape != (4,):
        raise ValueError(f"quaternion must have 4 entries, got shape {q.shape}")
    if abs(np.linalg.norm(q) - 1.0) > UNIT_TOL:
        raise ValueError(f"quaternion is not unit length (norm {np.linalg.norm(q):.9f})")
    return ad.quat_to_rotmat(q).data


def matrix_to_quat(R: np.ndarray) -> np.ndarray:
    """Inverse of :func:`quat_to_matrix`, returned with w >= 0."""
    R = np.asarray(R, dtype=np.float64)
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    q = np.array(q)
    q /= np.linalg.norm(q)
    return q if q[0] >= 0 else -q


@dataclass(frozen=True)
class Pose:
    rotation: np.ndarray  # unit quaternion (w, x, y, z)
    translation: np.ndarray

    def __post_init__(self):
        q = np.asarray(self.rotation, dtype=np.float64).reshape(4)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        n = np.linalg.norm(q)
        if not np.isfinite(n) or abs(n - 1.0) > UNIT_TOL:
            raise ValueError(f"pose rotation must be a unit quaternion (norm {n:.9f})")
        object.__setattr__(self, "rotation", q / n)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.array([1.0, 0, 0, 0]), np.zeros(3))

    @classmethod
    def from_matrix(cls, R: np.ndarray, t) -> "Pose":
        return cls(matrix_to_quat(R), t)

    @classmethod
    def random(cls, rng: np.random.Generator, t_low=(-0.1, -0.1, 0.6),
               t_high=(0.1, 0.1, 1.0)) -> "Pose":
        q = rng.normal(size=4)
        q /= np.linalg.norm(q)
        if q[0] < 0:
            q = -q
        return cls(q, rng.uniform(t_low, t_high))

    @property
    def matrix(self) -> np.ndarray:
        return quat_to_matrix(self.rotation)

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points) @ self.matrix.T + self.translation

    def inverse(self) -> "Pose":
        R = self.matrix
        q = self.rotation * np.array([1.0, -1.0, -1.0, -1.0])
        return Pose(q, -R.T @ self.translation)

    def compose(self, other: "Pose") -> "Pose":
        """``self ∘ other``: apply ``other`` first."""
        R = self.matrix @ other.matrix
        return Pose.from_matrix(R, self.matrix @ other.translation + self.translation)

    def to_line(self) -> str:
        return " ".join(f"{v:.17g}" for v in (*self.rotation, *self.translation))

    @classmethod
    def from_line(cls, line: str) -> "Pose":
        vals = [float(v) for v in line.split()]
        if len(vals) != 7:
            raise ValueError(f"pose line needs 7 numbers, got {len(vals)}")
        return cls(np.array(vals[:4]), np.array(vals[4:]))


def write_poses(path, poses: Sequence[Pose]) -> None:
    with open(path, "w") as fh:
        for p in poses:
            fh.write(p.to_line() + "\n")


def read_poses(path) -> list[Pose]:
    with open(path) as fh:
        return [Pose.from_line(line) for line in fh if line.strip()]


@dataclass
class PoseCandidates:
    """K per-point hypotheses; arrays are plain data, ``*_t`` keep the graph."""

    quaternions: np.ndarray
    translations: np.ndarray
    scores: np.ndarray
    rotations_t: Tensor | None = None
    translations_t: Tensor | None = None
    scores_t: Tensor | None = None

    def __post_init__(self):
        if len(self.scores) < 1:
            raise ValueError("need at least one pose candidate")

    def __len__(self) -> int:
        return len(self.scores)

    @classmethod
    def from_arrays(cls, quaternions, translations, scores) -> "PoseCandidates":
        q = np.asarray(quaternions, dtype=np.float64)
        q = q / np.linalg.norm(q, axis=1, keepdims=True)
        t = np.asarray(translations, dtype=np.float64)
        s = np.asarray(scores, dtype=np.float64)
        return cls(q, t, s, Tensor(ad.quat_to_rotmat(q).data), Tensor(t), Tensor(s))


def select_pose(c: PoseCandidates) -> Pose:
    """The candidate with the highest score; ties go to the lowest index."""
    k = int(np.argmax(c.scores))
    return Pose(c.quaternions[k], c.translations[k])


def pose_error(gt: Pose, pred: Pose, model: np.ndarray) -> float:
    """Mean squared distance from each GT-posed model point to the nearest pred-posed one."""
    x = np.asarray(model, dtype=np.float64)
    a = gt.apply(x)
    b = pred.apply(x)
    d = ((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=-1)
    return float(d.min(axis=1).mean())


def candidate_errors_tensor(rotations: Tensor, translations: Tensor, gt_R: np.ndarray,
                            gt_t: np.ndarray, model: np.ndarray) -> Tensor:
    """Per-candidate squared-ADD-S error, shape (K,)."""
    x = np.asarray(model, dtype=np.float64)
    target = Tensor(x @ np.asarray(gt_R).T + gt_t)
    # (C, K, 3): every candidate applied to every model point
    moved = ad.add(ad.matmul(Tensor(x), ad.transpose(rotations, (0, 2, 1))),
                   ad.reshape(translations, (translations.shape[0], 1, 3)))
    return ad.mean(ad.nn_sqdist(ad.reshape(target, (1, *target.shape)), moved), axis=1)


def loss_pose_tensor(c: PoseCandidates, gt_R: np.ndarray, gt_t: np.ndarray,
                     model: np.ndarray) -> Tensor:
    """Confidence-regularized pose loss ``(1/K) sum_i e_i (s_i - log s_i)``."""
    s = c.scores_t
    if np.any(s.data <= 0):
        raise ValueError("pose loss needs strictly positive confidence scores")
    e = candidate_errors_tensor(c.rotations_t, c.translations_t, gt_R, gt_t, model)
    weight = ad.sub(s, ad.log(s))
    return ad.mean(ad.mul(e, weight))


def loss_pose(c: PoseCandidates, gt: Pose, model: np.ndarray) -> Tensor:
    return loss_pose_tensor(c, gt.matrix, gt.translation, model)


def loss_total(pose: Tensor, prn: Tensor, mu: float) -> Tensor:
    return ad.add(pose, ad.mul(prn, mu))


class PoseHeads:
    """Rotation, translation and confidence branches, four FC layers each.

    Translations are predicted as offsets from the candidate's own
    (normalized) point and mapped back with the cloud's centroid and scale.
    """

    def __init__(self, in_dim: int, hidden: Sequence[int] = (256, 128, 64), seed: int = 0,
                 store: ParamStore | None = None):
        if len(hidden) != 3:
            raise ValueError("each head has four FC layers: give three hidden widths")
        self.in_dim = in_dim
        self.store = store if store is not None else ParamStore()
        rng = np.random.default_rng(seed)
        self.layers = {}
        for head, out in (("rot", 4), ("trans", 3), ("conf", 1)):
            self.layers[head] = ad.init_mlp(self.store, f"heads.{head}", [in_dim, *hidden, out], rng)

    def forward(self, feats: Tensor, anchors: np.ndarray, centroid: np.ndarray,
                scale: float) -> PoseCandidates:
        if feats.ndim != 2 or feats.shape[1] != self.in_dim:
            raise ad.ShapeError(f"pose heads expect (K, {self.in_dim}) features, got {feats.shape}")
        if anchors.shape != (feats.shape[0], 3):
            raise ad.ShapeError(f"anchors must be ({feats.shape[0]}, 3), got {anchors.shape}")
        raw_q = ad.mlp(self.store, self.layers["rot"], feats, final_relu=False)
        norm = ad.sqrt(ad.add(ad.sqnorm(raw_q, axis=1, keepdims=True), 1e-12))
        q = ad.div(raw_q, norm)
        R = ad.quat_to_rotmat(q)
        offset = ad.mlp(self.store, self.layers["trans"], feats, final_relu=False)
        t = ad.add(ad.mul(ad.add(offset, Tensor(anchors)), float(scale)), Tensor(centroid))
        s = ad.reshape(ad.sigmoid(ad.mlp(self.store, self.layers["conf"], feats, final_relu=False)), (-1,))
        qd = q.data / np.linalg.norm(q.data, axis=1, keepdims=True)
        return PoseCandidates(qd, t.data.copy(), s.data.copy(), R, t, s)


def regress(heads: PoseHeads, G_o: Tensor, anchors: np.ndarray | None = None,
            centroid: np.ndarray | None = None, scale: float = 1.0) -> PoseCandidates:
    K = G_o.shape[0]
    anchors = np.zeros((K, 3)) if anchors is None else anchors
    centroid = np.zeros(3) if centroid is None else centroid
    return heads.forward(G_o, anchors, centroid, scale)
