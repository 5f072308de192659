"""Nearest-neighbor search and rigid ICP surface matching.

The ICP here aligns the MRI-derived skin surface to the camera-derived
patient cloud, producing the MRI-to-camera member of the calibration
chain. Correspondences run source -> target through a k-d tree over the
(static) target, pairs beyond a distance gate are rejected, and each
update is the closed-form SVD least-squares rigid motion.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import (
    DegenerateInputError, EmptyInputError, NoCorrespondencesError,
)
from .geom import RigidTransform, compose
from .volume import PointCloud, SurfaceCloud


class NearestNeighborIndex:
    """Exact nearest-neighbor queries over a fixed point set (mm).

    Backed by a k-d tree; ties are broken by lowest insertion order.
    """

    def __init__(self, points: np.ndarray):
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        if pts.shape[0] == 0:
            raise EmptyInputError("cannot index an empty point set")
        self.points = pts
        self._tree = cKDTree(pts)

    def __len__(self) -> int:
        return self.points.shape[0]

    def query(self, p: np.ndarray) -> tuple[np.ndarray, float]:
        """Nearest indexed point and its Euclidean distance to ``p``."""
        p = np.asarray(p, dtype=np.float64).reshape(3)
        d, _ = self._tree.query(p)
        # Re-rank every candidate at the winning radius so exact ties
        # resolve to the earliest-inserted point.
        cand = self._tree.query_ball_point(p, d * (1.0 + 1e-12) + 1e-12)
        cand = np.sort(np.asarray(cand, dtype=np.int64))
        dists = np.linalg.norm(self.points[cand] - p, axis=1)
        dmin = dists.min()
        winner = int(cand[dists == dmin][0])
        return self.points[winner], float(dmin)

    def query_batch(self, pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Vectorized (distances, indices) without tie-break bookkeeping."""
        d, idx = self._tree.query(np.asarray(pts, dtype=np.float64))
        return np.asarray(d, dtype=np.float64), np.asarray(idx, dtype=np.int64)


def nn_query(index: NearestNeighborIndex, p: np.ndarray) -> tuple[np.ndarray, float]:
    return index.query(p)


def estimate_normals(points: np.ndarray, k: int = 12,
                     orient_toward: np.ndarray | None = None) -> np.ndarray:
    """Unit normals from PCA over each point's k nearest neighbors.

    With ``orient_toward`` given (e.g. the camera position), normals are
    flipped to face that point.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if pts.shape[0] < 3:
        raise DegenerateInputError("need at least 3 points for normal estimation")
    k = min(k, pts.shape[0])
    tree = cKDTree(pts)
    _, idx = tree.query(pts, k=k)
    nb = pts[idx]                                   # (N, k, 3)
    mean = nb.mean(axis=1, keepdims=True)
    d = nb - mean
    cov = np.einsum("nka,nkb->nab", d, d)
    _, vecs = np.linalg.eigh(cov)
    normals = vecs[:, :, 0]
    if orient_toward is not None:
        view = np.asarray(orient_toward, dtype=np.float64) - pts
        flip = np.einsum("ij,ij->i", normals, view) < 0
        normals[flip] *= -1.0
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    return normals


def fit_rigid(src: np.ndarray, dst: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Least-squares rigid motion src -> dst via SVD of the cross-covariance.

    Reflection guard: if the optimal orthogonal matrix has det < 0, the
    smallest singular direction is flipped to stay in SO(3).
    """
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    cs = src.mean(axis=0)
    cd = dst.mean(axis=0)
    h = (src - cs).T @ (dst - cd)
    u, _, vt = np.linalg.svd(h)
    r = vt.T @ u.T
    if np.linalg.det(r) < 0:
        vt = vt.copy()
        vt[-1, :] *= -1.0
        r = vt.T @ u.T
    t = cd - r @ cs
    return r, t


@dataclass(frozen=True)
class IcpParams:
    max_iterations: int = 100
    convergence_tol: float = 1e-3          # mm of RMS improvement
    max_pair_distance: float = 50.0        # mm, correspondence gate
    initial: RigidTransform | None = None


@dataclass(frozen=True)
class IcpResult:
    transform: RigidTransform
    rms_error: float
    iterations: int
    converged: bool
    rms_history: tuple


def _principal_frame(pts: np.ndarray) -> np.ndarray:
    c = pts - pts.mean(axis=0)
    _, vecs = np.linalg.eigh(c.T @ c)
    v = vecs[:, ::-1]                      # descending variance
    if np.linalg.det(v) < 0:
        v = v.copy()
        v[:, -1] *= -1.0
    return v


def _prealign(src: np.ndarray, dst: np.ndarray, tree: cKDTree,
              from_frame: str, to_frame: str) -> RigidTransform:
    """Centroid + principal-axes alignment, sign ambiguity settled by fit."""
    vs = _principal_frame(src)
    vd = _principal_frame(dst)
    cs = src.mean(axis=0)
    cd = dst.mean(axis=0)
    sample = src[:: max(1, src.shape[0] // 400)]
    best = None
    for signs in ((1, 1, 1), (1, -1, -1), (-1, 1, -1), (-1, -1, 1)):
        r = vd @ np.diag(signs) @ vs.T
        t = cd - r @ cs
        d, _ = tree.query(sample @ r.T + t)
        score = float(np.median(d))
        if best is None or score < best[0]:
            best = (score, r, t)
    return RigidTransform(best[1], best[2], from_frame, to_frame)


def _check_nondegenerate(pts: np.ndarray, name: str):
    if pts.shape[0] < 3:
        raise DegenerateInputError(f"{name} cloud needs at least 3 points")
    c = pts - pts.mean(axis=0)
    svals = np.linalg.svd(c, compute_uv=False)
    if svals[1] < 1e-9:
        raise DegenerateInputError(f"{name} cloud is collinear")


def icp(source: SurfaceCloud | PointCloud, target: PointCloud | SurfaceCloud,
        params: IcpParams = IcpParams()) -> IcpResult:
    """Rigid alignment of ``source`` onto ``target`` (maps source frame -> target frame).

    Iterates nearest-neighbor correspondence, distance-gated rejection,
    and the SVD rigid solve until the RMS improvement drops below
    ``convergence_tol`` or the iteration cap is hit.
    """
    src = np.asarray(source.points, dtype=np.float64)
    dst = np.asarray(target.points, dtype=np.float64)
    _check_nondegenerate(src, "source")
    _check_nondegenerate(dst, "target")

    tree = cKDTree(dst)
    if params.initial is not None:
        current = params.initial
    else:
        current = _prealign(src, dst, tree, source.frame, target.frame)

    history = []
    prev_rms = None
    converged = False
    iterations = 0
    for iterations in range(1, params.max_iterations + 1):
        moved = src @ current.rotation.T + current.translation
        d, j = tree.query(moved)
        keep = d <= params.max_pair_distance
        if not keep.any():
            raise NoCorrespondencesError(
                f"all pairs beyond {params.max_pair_distance} mm")
        r, t = fit_rigid(moved[keep], dst[j[keep]])
        delta = RigidTransform(r, t, current.to_frame, current.to_frame)
        current = compose(delta, current)
        res = moved[keep] @ r.T + t - dst[j[keep]]
        rms = float(np.sqrt(np.mean(np.sum(res * res, axis=1))))
        history.append(rms)
        if rms <= params.convergence_tol or (
                prev_rms is not None and abs(prev_rms - rms) < params.convergence_tol):
            converged = True
            break
        prev_rms = rms

    return IcpResult(
        transform=current,
        rms_error=history[-1],
        iterations=iterations,
        converged=converged,
        rms_history=tuple(history),
    )
