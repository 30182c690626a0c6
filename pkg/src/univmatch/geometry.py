"""Projection model, reconstruction residuals and synthetic cameras."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad


class ProjectionError(ValueError):
    """A point sits at (or behind) the camera centre."""

    def __init__(self, message: str, index: int):
        super().__init__(message)
        self.index = index


@dataclass
class UniversePoints:
    u: np.ndarray  # d x 3
    category: int = 0

    def __post_init__(self):
        self.u = np.asarray(self.u, dtype=np.float64)
        if self.u.ndim != 2 or self.u.shape[1] != 3:
            raise ValueError(f"universe points must be d x 3, got {self.u.shape}")
        if self.u.shape[0] < 4:
            raise ValueError(f"need at least 4 universe points, got {self.u.shape[0]}")

    @property
    def d(self) -> int:
        return self.u.shape[0]

    def homogeneous(self) -> np.ndarray:
        """4 x d matrix with a trailing row of ones."""
        return homogenize(self.u.T)


@dataclass
class Camera:
    """Rigid pose, intrinsics and per-point depth scales.

    ``scales`` is either a scalar (weak perspective: every point shares one
    scale) or a length-d vector of per-point scales. ``None`` means full
    perspective, i.e. each point is scaled by its inverse depth.
    """

    rotation: np.ndarray
    translation: np.ndarray
    intrinsics: np.ndarray = field(default_factory=lambda: np.eye(3))
    scales: float | np.ndarray | None = 1.0

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        self.intrinsics = np.asarray(self.intrinsics, dtype=np.float64)
        R = self.rotation
        if R.shape != (3, 3) or not np.allclose(R.T @ R, np.eye(3), atol=1e-10, rtol=0):
            raise ValueError("rotation must be orthonormal")
        if np.linalg.det(R) <= 0:
            raise ValueError("rotation must have determinant +1")
        K = self.intrinsics
        if K.shape != (3, 3) or np.any(np.tril(K, -1) != 0) or K[2, 2] != 1.0:
            raise ValueError("intrinsics must be upper triangular with K[2,2] = 1")

    def rigid(self) -> np.ndarray:
        """4 x 4 world-to-camera transform."""
        g = np.eye(4)
        g[:3, :3] = self.rotation
        g[:3, 3] = self.translation
        return g

    def projection_matrix(self) -> np.ndarray:
        """3 x 4 general projection ``K Pi0 g``."""
        return self.intrinsics @ np.eye(3, 4) @ self.rigid()


@dataclass
class ProjectedPoints:
    v: np.ndarray  # 2 x m

    def __post_init__(self):
        self.v = np.asarray(self.v, dtype=np.float64)
        if self.v.ndim != 2 or self.v.shape[0] != 2:
            raise ValueError(f"projected points must be 2 x m, got {self.v.shape}")

    @property
    def m(self) -> int:
        return self.v.shape[1]

    def homogeneous(self) -> np.ndarray:
        return homogenize(self.v)


@dataclass(frozen=True)
class NormalizationTransform:
    center: tuple[float, float]
    scale: float

    def apply(self, v: np.ndarray) -> np.ndarray:
        return (np.asarray(v, dtype=np.float64) - np.array(self.center)[:, None]) / self.scale

    def invert(self, v: np.ndarray) -> np.ndarray:
        return np.asarray(v, dtype=np.float64) * self.scale + np.array(self.center)[:, None]


def homogenize(points: np.ndarray) -> np.ndarray:
    points = np.asarray(points, dtype=np.float64)
    return np.vstack([points, np.ones((1, points.shape[1]))])


def homogenize_tensor(points: ad.Tensor) -> ad.Tensor:
    ones = ad.constant(np.ones((1, points.shape[1])))
    return ad.concat([points, ones], axis=0)


def project(u: UniversePoints, cam: Camera) -> ProjectedPoints:
    P = cam.projection_matrix() @ u.homogeneous()
    if cam.scales is None:
        depth = (cam.rotation @ u.u.T + cam.translation[:, None])[2]
        bad = np.flatnonzero(np.abs(depth) < 1e-12)
        if bad.size:
            raise ProjectionError(f"point {bad[0]} has zero depth", int(bad[0]))
        lam = 1.0 / P[2]
    else:
        lam = np.broadcast_to(np.asarray(cam.scales, dtype=np.float64), (u.d,))
    V = P * lam[None, :]
    return ProjectedPoints(V[:2])


def reconstruction_residual(U, V, cond_cap: float = 1e8) -> ad.Tensor:
    """``||V U+ U - V||_F^2`` for homogeneous ``U`` (4 x d) and ``V`` (3 x d).

    This is the residual of the best linear camera mapping ``U`` onto ``V``.
    """
    U, V = ad.constant(U), ad.constant(V)
    if U.shape[0] != 4 or V.shape[0] != 3 or U.shape[1] != V.shape[1]:
        raise ad.ShapeError(f"residual expects 4 x d and 3 x d, got {U.shape} and {V.shape}")
    pinv = ad.right_pseudo_inverse(U, cond_cap=cond_cap)
    return ad.frobenius_sq(ad.subtract(ad.matmul(ad.matmul(V, pinv), U), V))


def quaternion_to_rotation(q: np.ndarray) -> np.ndarray:
    w, x, y, z = np.asarray(q, dtype=np.float64) / np.linalg.norm(q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


def sample_weak_perspective_camera(
    seed: int | np.random.Generator,
    translation_box: float = 1.0,
    scale_range: tuple[float, float] = (0.5, 2.0),
) -> Camera:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    # normalised Gaussian quaternion is uniform on SO(3)
    q = rng.standard_normal(4)
    R = quaternion_to_rotation(q)
    # re-orthonormalise so R^T R = I holds to rounding
    u_, _, vt = np.linalg.svd(R)
    R = u_ @ vt
    T = rng.uniform(-translation_box, translation_box, size=3)
    lam = rng.uniform(*scale_range)
    return Camera(R, T, np.eye(3), float(lam))


def canonical_rotation(points: np.ndarray) -> np.ndarray:
    """2 x 2 rotation taking a 2 x m point set onto its principal axes.

    The major axis becomes x, oriented so the third moment along it is
    non-negative; y follows from it so the map stays a proper rotation
    (a reflection would not be a valid camera change).
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.shape[1] < 2:
        return np.eye(2)
    c = pts - pts.mean(axis=1, keepdims=True)
    _, vecs = np.linalg.eigh(c @ c.T)
    a = vecs[:, 1]
    if np.sum((a @ c) ** 3) < 0:
        a = -a
    return np.stack([a, np.array([-a[1], a[0]])])


def normalize_keypoints(v: ProjectedPoints) -> tuple[ProjectedPoints, NormalizationTransform]:
    pts = v.v
    if pts.shape[1] < 1:
        raise ValueError("cannot normalise an empty keypoint set")
    lo, hi = pts.min(axis=1), pts.max(axis=1)
    center = (lo + hi) / 2.0
    half = float(np.max((hi - lo) / 2.0))
    scale = half if half > 0 else 1.0
    tf = NormalizationTransform((float(center[0]), float(center[1])), scale)
    return ProjectedPoints(tf.apply(pts)), tf
