"""Intensity-based US/MRI registration and the closed-loop chain update.

The similarity is a local-correlation score: inside every patch the US
intensities are explained by a least-squares linear model of the MRI
intensity and MRI gradient magnitude; the patch score is the explained
variance ratio and the global score is the variance-weighted patch mean.
A bounded derivative-free pattern search maximizes it over rigid (then
optionally affine) corrections of the chain's MRI-to-world estimate, and
the recovered rigid component feeds back into the patient-to-world
calibration.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace

import numpy as np
from scipy import optimize

from .calib import CalibrationState
from .errors import (
    FrameMismatchError, NoOverlapError, OutOfBoundsError, ValidationError,
)
from .geom import (
    MRI, PATIENT, WORLD, AffineTransform, RigidTransform, Transform,
    apply, compose, euler_xyz_rotation, invert,
    rotation_angle_norm, translation_norm,
)
from .volume import BinaryMask, ScalarVolume, sample_trilinear


@dataclass(frozen=True)
class Lc2Params:
    """Similarity and optimizer settings.

    ``patch_radius`` counts resampled voxels, so patches span
    ``(2r+1)**3`` grid cells. Bounds guard the capture range: the start
    must already be within them of the truth.
    """

    patch_radius: int = 3
    variance_floor_rel: float = 1e-6     # relative to US intensity range^2
    resample_spacing: float = 3.0        # mm
    translation_bound: float = 20.0      # mm
    rotation_bound: float = 10.0         # deg
    initial_step: float = 4.0            # mm and deg
    min_step: float = 0.02
    restarts: int = 2
    max_evaluations: int = 6000
    min_patch_points: int = 10
    min_overlap: float = 0.05
    polish_evaluations: int = 400        # line-search polish budget (0 = off)
    polish_radius: float = 2.0           # mm and deg around the search optimum
    accept_tol: float = 1e-7             # minimum real gain; filters sampling noise
    affine_accept_tol: float = 1e-4      # deformation DOF must earn their keep

    def __post_init__(self):
        if self.patch_radius < 1:
            raise ValidationError("patch radius must be >= 1")
        if self.translation_bound <= 0 or self.rotation_bound <= 0:
            raise ValidationError("optimizer bounds must be positive")
        if self.resample_spacing <= 0:
            raise ValidationError("resample spacing must be positive")


@dataclass(frozen=True)
class RegistrationResult:
    """Outcome of one registration stage.

    ``rigid`` is the patient correction (MRI -> Patient); the refined
    MRI-to-US mapping and both similarity scores come along for reports.
    Ground-truth errors are filled only by simulation harnesses.
    """

    rigid: RigidTransform
    mri_to_us_refined: Transform
    similarity_before: float
    similarity_after: float
    evaluations: int
    improved: bool
    affine: AffineTransform | None = None
    translation_error_mm: float | None = None
    rotation_error_deg: float | None = None

    def __post_init__(self):
        if self.similarity_after < self.similarity_before - 1e-9:
            raise ValidationError("refined similarity fell below the start")


def gradient_magnitude(v: ScalarVolume) -> ScalarVolume:
    """Central-difference gradient magnitude at the volume's native spacing."""
    g = np.gradient(v.data, *v.spacing, edge_order=1)
    mag = np.sqrt(g[0] ** 2 + g[1] ** 2 + g[2] ** 2)
    return ScalarVolume(v.dims, v.spacing, v.origin, v.frame, mag)


def _sample_two(flat_a, flat_b, origin, spacing, dims, pts):
    """Trilinear samples of two co-located grids with shared index math.

    The hot path of every similarity evaluation: corner indices are
    computed once as flat offsets and both volumes are gathered from
    raveled float32 storage.
    """
    g = (pts - origin) / spacing
    inside = np.all((g >= 0.0) & (g <= dims - 1), axis=1)
    out_a = np.zeros(pts.shape[0])
    out_b = np.zeros(pts.shape[0])
    if inside.any():
        gi = g[inside]
        i0 = np.maximum(np.minimum(np.floor(gi).astype(np.int64), dims - 2), 0)
        f = (gi - i0).astype(np.float32)
        step = np.minimum(i0 + 1, dims - 1) - i0      # 0 on size-1 axes
        sy = int(dims[2])
        sx = int(dims[1] * dims[2])
        lin = (i0[:, 0] * dims[1] + i0[:, 1]) * dims[2] + i0[:, 2]
        ox = step[:, 0] * sx
        oy = step[:, 1] * sy
        oz = step[:, 2]
        fx, fy, fz = f[:, 0], f[:, 1], f[:, 2]
        gx, gy, gz = 1.0 - fx, 1.0 - fy, 1.0 - fz
        w000 = gx * gy * gz
        w100 = fx * gy * gz
        w010 = gx * fy * gz
        w110 = fx * fy * gz
        w001 = gx * gy * fz
        w101 = fx * gy * fz
        w011 = gx * fy * fz
        w111 = fx * fy * fz
        c000 = lin
        c100 = lin + ox
        c010 = lin + oy
        c110 = c100 + oy
        c001 = lin + oz
        c101 = c100 + oz
        c011 = c010 + oz
        c111 = c110 + oz
        for flat, out in ((flat_a, out_a), (flat_b, out_b)):
            out[inside] = (w000 * flat[c000] + w100 * flat[c100]
                           + w010 * flat[c010] + w110 * flat[c110]
                           + w001 * flat[c001] + w101 * flat[c101]
                           + w011 * flat[c011] + w111 * flat[c111])
    return out_a, out_b, inside


class Lc2Workspace:
    """Precomputed evaluation grid for repeated similarity queries.

    The US volume is resampled once onto a coarse world grid; every
    candidate transform only resamples the MRI side and re-fits the patch
    models.
    """

    def __init__(self, us: ScalarVolume, mri: ScalarVolume,
                 us_mask: BinaryMask | None = None,
                 params: Lc2Params = Lc2Params()):
        self.params = params
        self.mri = mri
        self.grad = gradient_magnitude(mri)
        self._mri_flat = np.ascontiguousarray(mri.data, dtype=np.float32).ravel()
        self._grad_flat = np.ascontiguousarray(self.grad.data, dtype=np.float32).ravel()
        self._mri_dims = np.array(mri.dims)
        self._mri_spacing = np.asarray(mri.spacing)
        self._mri_origin = np.asarray(mri.origin)

        s = params.resample_spacing
        lo = np.asarray(us.origin)
        hi = lo + (np.array(us.dims) - 1) * np.asarray(us.spacing)
        counts = np.maximum(np.floor((hi - lo) / s).astype(int) + 1, 1)
        axes = [lo[i] + np.arange(counts[i]) * s for i in range(3)]
        grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
        pts = grid.reshape(-1, 3)

        u = sample_trilinear(us, pts)
        valid = np.ones(len(pts), dtype=bool)
        if us_mask is not None:
            mask_vol = ScalarVolume(us_mask.dims, us_mask.spacing, us_mask.origin,
                                    us_mask.frame, us_mask.data.astype(np.float64))
            valid = sample_trilinear(mask_vol, pts) >= 0.999

        # Tile ids over the resample grid; masked-out points never
        # contribute, so they are dropped before sorting by tile.
        side = 2 * params.patch_radius + 1
        ijk = np.stack(np.meshgrid(*(np.arange(c) for c in counts),
                                   indexing="ij"), axis=-1).reshape(-1, 3)
        tiles = ijk // side
        tdims = tiles.max(axis=0) + 1
        tile_id = (tiles[:, 0] * tdims[1] + tiles[:, 1]) * tdims[2] + tiles[:, 2]

        self.n_us_valid = int(valid.sum())
        pts, u, tile_id = pts[valid], u[valid], tile_id[valid]
        order = np.argsort(tile_id, kind="stable")

        self.points = pts[order]
        self.us_values = u[order]
        self.us_valid = np.ones(len(self.points), dtype=bool)
        sorted_ids = tile_id[order]
        if len(sorted_ids):
            boundaries = np.flatnonzero(np.diff(sorted_ids)) + 1
            self.starts = np.concatenate([[0], boundaries])
        else:
            self.starts = np.zeros(1, dtype=np.int64)

        rng_vals = self.us_values[self.us_valid]
        span = float(rng_vals.max() - rng_vals.min()) if rng_vals.size else 1.0
        self.variance_floor = params.variance_floor_rel * max(span, 1e-12) ** 2

    def score(self, mri_to_us: Transform) -> float:
        """Similarity of the US grid against the MRI mapped by ``mri_to_us``."""
        if mri_to_us.to_frame != WORLD or mri_to_us.from_frame != self.mri.frame:
            raise FrameMismatchError(mri_to_us.from_frame, self.mri.frame,
                                     "lc2 transform")
        back = invert(mri_to_us)
        mri_pts = apply(back, self.points)
        # Out-of-volume samples read as background (0) rather than being
        # dropped: excluding them would reward transforms that slide hard
        # regions out of the overlap.
        m, g, inside = _sample_two(self._mri_flat, self._grad_flat,
                                   self._mri_origin, self._mri_spacing,
                                   self._mri_dims, mri_pts)
        if self.n_us_valid == 0 or inside.sum() < self.params.min_overlap * self.n_us_valid:
            raise NoOverlapError(
                f"only {int(inside.sum())} of {self.n_us_valid} voxels overlap the MRI")

        w = self.us_valid.astype(np.float64)
        u = self.us_values * w
        m = m * w
        g = g * w

        def seg(x):
            return np.add.reduceat(x, self.starts)

        n = seg(w)
        su, sm, sg = seg(u), seg(m), seg(g)
        suu, smm, sgg = seg(u * u), seg(m * m), seg(g * g)
        smg, sum_, sug = seg(m * g), seg(u * m), seg(u * g)

        ok = n >= self.params.min_patch_points
        sst = suu - su ** 2 / np.maximum(n, 1.0)
        var = sst / np.maximum(n, 1.0)
        ok &= var > self.variance_floor
        if not ok.any():
            return 0.0

        t = int(ok.sum())
        xtx = np.empty((t, 3, 3))
        xtx[:, 0, 0] = smm[ok]
        xtx[:, 0, 1] = xtx[:, 1, 0] = smg[ok]
        xtx[:, 0, 2] = xtx[:, 2, 0] = sm[ok]
        xtx[:, 1, 1] = sgg[ok]
        xtx[:, 1, 2] = xtx[:, 2, 1] = sg[ok]
        xtx[:, 2, 2] = n[ok]
        xty = np.stack([sum_[ok], sug[ok], su[ok]], axis=1)

        ridge = 1e-10 * np.maximum(
            1.0, np.max(np.diagonal(xtx, axis1=1, axis2=2), axis=1))
        xtx += ridge[:, None, None] * np.eye(3)
        beta = np.linalg.solve(xtx, xty[:, :, None])[:, :, 0]

        ssr = (suu[ok] - 2.0 * np.einsum("ti,ti->t", beta, xty)
               + np.einsum("ti,tij,tj->t", beta, xtx, beta))
        r2 = np.clip(1.0 - ssr / np.maximum(sst[ok], 1e-300), 0.0, 1.0)
        weights = var[ok]
        return float(np.clip(np.sum(weights * r2) / np.sum(weights), 0.0, 1.0))


def lc2_similarity(us: ScalarVolume, mri: ScalarVolume, mri_to_us: Transform,
                   us_mask: BinaryMask | None = None,
                   params: Lc2Params = Lc2Params()) -> float:
    """One-shot similarity score in [0, 1]; see :class:`Lc2Workspace`."""
    return Lc2Workspace(us, mri, us_mask, params).score(mri_to_us)


# ---------------------------------------------------------------------
# Bounded derivative-free optimization
# ---------------------------------------------------------------------

def _pattern_search(evaluate, p0, scales, bounds, params: Lc2Params):
    """Compass pattern search: best-improvement polls, halving, restarts.

    Each poll evaluates every signed coordinate direction at the current
    step and moves to the best improving candidate; the step halves only
    when no direction improves. Deterministic for fixed inputs.
    """
    p_best = np.array(p0, dtype=np.float64)
    s_best = evaluate(p_best)
    s_start = s_best
    evals = 1
    for restart in range(params.restarts + 1):
        step = params.initial_step / (2.0 ** restart)
        while step >= params.min_step and evals < params.max_evaluations:
            poll_best = None
            for i in range(len(p_best)):
                for sign in (1.0, -1.0):
                    cand = p_best.copy()
                    cand[i] = np.clip(cand[i] + sign * step * scales[i],
                                      -bounds[i], bounds[i])
                    if cand[i] == p_best[i]:
                        continue
                    s = evaluate(cand)
                    evals += 1
                    if s > s_best + params.accept_tol and (
                            poll_best is None or s > poll_best[0]):
                        poll_best = (s, cand)
                    if evals >= params.max_evaluations:
                        break
                if evals >= params.max_evaluations:
                    break
            if poll_best is None:
                step /= 2.0
            else:
                s_best, p_best = poll_best
    return p_best, s_best, s_start, evals


def _powell_polish(evaluate, p_start, s_start, scales, bounds, params: Lc2Params):
    """Bounded line-search refinement around the pattern-search optimum.

    Compass polls handle the approach but stall in narrow curved valleys;
    a short Powell run from the poll optimum recovers the last fraction
    of a degree. Deterministic, and only adopted when it improves.
    """
    if params.polish_evaluations <= 0:
        return p_start, s_start, 0
    lo = np.maximum(p_start - params.polish_radius * scales, -bounds)
    hi = np.minimum(p_start + params.polish_radius * scales, bounds)
    evals = [0]

    def negated(p):
        evals[0] += 1
        try:
            return -evaluate(p)
        except NoOverlapError:
            return 1.0

    result = optimize.minimize(
        negated, p_start, method="Powell",
        bounds=list(zip(lo, hi)),
        options={"xtol": 1e-3, "ftol": params.accept_tol,
                 "maxfev": params.polish_evaluations})
    if -result.fun > s_start + params.accept_tol:
        return np.asarray(result.x), float(-result.fun), evals[0]
    return p_start, s_start, evals[0]


def _world_correction(p: np.ndarray, centroid: np.ndarray) -> RigidTransform:
    """Rigid world-frame perturbation rotating about a fixed centroid."""
    r = euler_xyz_rotation(p[3], p[4], p[5])
    t = p[:3] + centroid - r @ centroid
    return RigidTransform(r, t, WORLD, WORLD)


def _us_centroid(workspace: Lc2Workspace) -> np.ndarray:
    pts = workspace.points[workspace.us_valid]
    return pts.mean(axis=0) if len(pts) else workspace.points.mean(axis=0)


def _content_centroid(v: ScalarVolume) -> np.ndarray:
    """Intensity-weighted centroid of a volume, in its own frame (mm)."""
    w = np.maximum(v.data, 0.0)
    total = w.sum()
    if total <= 0:
        return np.asarray(v.origin) + (np.array(v.dims) - 1) * np.asarray(v.spacing) / 2.0
    idx = np.stack(np.meshgrid(*(np.arange(d) for d in v.dims), indexing="ij"),
                   axis=-1)
    mean_idx = (idx * w[..., None]).sum(axis=(0, 1, 2)) / total
    return np.asarray(v.origin) + mean_idx * np.asarray(v.spacing)


def register_rigid(us: ScalarVolume, mri: ScalarVolume, initial: Transform,
                   us_mask: BinaryMask | None = None,
                   params: Lc2Params = Lc2Params(),
                   truth_mri_to_us: Transform | None = None) -> RegistrationResult:
    """Maximize the similarity over 6 rigid parameters from ``initial``.

    Parameters are a world-frame translation plus rotation about the MRI
    content centroid mapped through ``initial``, bounded by the
    capture-range guard. Rotating about the anatomy's mass center keeps
    rotation steps decoupled from translation for the chain errors this
    stage corrects; rotating about the US slab centroid (which sits on
    the skin, well away from the anatomy center) traps coordinate
    searches in coupled valleys. A best point pinned at a bound means the
    start violated the capture-range precondition and raises an
    out-of-bounds error.
    """
    workspace = Lc2Workspace(us, mri, us_mask, params)
    centroid = apply(initial, _content_centroid(mri))
    bounds = np.array([params.translation_bound] * 3
                      + [params.rotation_bound] * 3)

    def evaluate(p):
        return workspace.score(compose(_world_correction(p, centroid), initial))

    p_best, s_best, s_start, evals = _pattern_search(
        evaluate, np.zeros(6), np.ones(6), bounds, params)
    p_best, s_best, polish_evals = _powell_polish(
        evaluate, p_best, s_best, np.ones(6), bounds, params)
    evals += polish_evals

    if np.any(np.abs(p_best) >= bounds - 1e-9):
        raise OutOfBoundsError(
            "optimum pinned at the search bounds; the start is outside the "
            "capture range")

    delta = _world_correction(p_best, centroid)
    refined = compose(delta, initial)
    rigid = compose(invert(initial), compose(invert(delta), initial)) \
        .with_frames(MRI, PATIENT)

    terr = rerr = None
    if truth_mri_to_us is not None:
        residual = compose(refined, invert(truth_mri_to_us))
        terr = translation_norm(residual)
        rerr = rotation_angle_norm(residual)

    return RegistrationResult(
        rigid=rigid,
        mri_to_us_refined=refined,
        similarity_before=s_start,
        similarity_after=s_best,
        evaluations=evals,
        improved=(s_best - s_start) >= 1e-4,
        translation_error_mm=terr,
        rotation_error_deg=rerr,
    )


def register_affine(us: ScalarVolume, mri: ScalarVolume,
                    rigid_result: RegistrationResult,
                    us_mask: BinaryMask | None = None,
                    params: Lc2Params = Lc2Params(),
                    truth_mri_to_us: Transform | None = None) -> RegistrationResult:
    """Second stage: 12 affine parameters from the rigid optimum.

    Starts at the rigid refinement, so the similarity can only move up.
    """
    # The extra degrees of freedom may only move for materially better
    # fits, otherwise they soak up reconstruction artifacts.
    params = replace(params, accept_tol=max(params.accept_tol,
                                            params.affine_accept_tol))
    workspace = Lc2Workspace(us, mri, us_mask, params)
    centroid = _us_centroid(workspace)
    start = rigid_result.mri_to_us_refined

    # 9 linear perturbation entries (dimensionless) + 3 translations (mm).
    scales = np.array([0.004] * 9 + [1.0] * 3)
    bounds = np.array([0.15] * 9 + [params.translation_bound] * 3)

    def build(p):
        linear = np.eye(3) + p[:9].reshape(3, 3)
        t = p[9:] + centroid - linear @ centroid
        return compose(AffineTransform(linear, t, WORLD, WORLD), start)

    def evaluate(p):
        return workspace.score(build(p))

    p_best, s_best, s_start, evals = _pattern_search(
        evaluate, np.zeros(12), scales, bounds, params)

    refined = build(p_best)
    # Incremental MRI-frame correction beyond the rigid stage.
    full = compose(invert(rigid_result.mri_to_us_refined), refined)
    affine = AffineTransform(full.linear, full.translation, MRI, PATIENT)

    terr = rerr = None
    if truth_mri_to_us is not None:
        residual_t = apply(refined, centroid) - apply(truth_mri_to_us, centroid)
        terr = float(np.linalg.norm(residual_t))

    return RegistrationResult(
        rigid=rigid_result.rigid,
        mri_to_us_refined=refined,
        similarity_before=s_start,
        similarity_after=s_best,
        evaluations=evals,
        improved=(s_best - s_start) >= 1e-4,
        affine=affine,
        translation_error_mm=terr,
        rotation_error_deg=rerr,
    )


def update_patient_calibration(state: CalibrationState,
                               result: RegistrationResult) -> CalibrationState:
    """Fold the rigid registration correction into the chain (version + 1).

    Corrections left-compose: the new patient transform is the result
    applied on top of the existing one; every other chain member is
    carried over bit-identically.
    """
    rigid = result.rigid
    if (rigid.from_frame, rigid.to_frame) != (MRI, PATIENT):
        raise FrameMismatchError(rigid.from_frame, MRI, "patient update")
    stacked = compose(rigid.with_frames(PATIENT, PATIENT), state.t_patient_from_mri)
    return state.with_patient_correction(stacked)


# ---------------------------------------------------------------------
# Registration report
# ---------------------------------------------------------------------

def _transform_json(t: Transform) -> dict:
    return {
        "kind": "rigid" if isinstance(t, RigidTransform) else "affine",
        "from": t.from_frame,
        "to": t.to_frame,
        "matrix": [[float(v) for v in row] for row in t.matrix4()],
    }


def write_report(path: str, initial: Transform, result: RegistrationResult) -> None:
    payload = {
        "initial": _transform_json(initial),
        "refined": _transform_json(result.mri_to_us_refined),
        "patient_correction": _transform_json(result.rigid),
        "similarity_before": result.similarity_before,
        "similarity_after": result.similarity_after,
        "evaluations": result.evaluations,
        "improved": result.improved,
    }
    if result.affine is not None:
        payload["affine_correction"] = _transform_json(result.affine)
    if result.translation_error_mm is not None:
        payload["translation_error_mm"] = result.translation_error_mm
        payload["rotation_error_deg"] = result.rotation_error_deg
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_report(path: str) -> dict:
    with open(path) as fh:
        return json.load(fh)
