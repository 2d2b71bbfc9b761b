"""Camera calibration from fiducial corners displayed on the CAVE screens.

Two solve paths exist. A camera that sees at least two screens gets a full
linear projection estimate (``dlt_full`` + ``decompose_projection``); a camera
that sees a single plane needs prior intrinsics and goes through
``solve_pnp_known_intrinsics``. Both finish with ``refine_lm``.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg

from .errors import CheiralityFailure, Degenerate, DoesNotFit, NonPositiveDepth, Singular
from .geometry import (
    CameraModel,
    CaveLayout,
    Intrinsics,
    Pose,
    axis_angle_from_rotation,
    nearest_rotation,
    normalized_coords,
    project,
    project_points,
    rotation_from_axis_angle,
    screen_to_world,
    skew,
)

log = logging.getLogger(__name__)

COPLANAR_SV_TOL = 1e-6


@dataclass(frozen=True)
class FiducialMarker:
    marker_id: int
    screen_id: int
    corners: np.ndarray  # (4, 3), counter-clockwise seen from inside the room


@dataclass(frozen=True)
class FiducialCorrespondence:
    marker_id: int
    corner_index: int
    world: np.ndarray
    pixel: np.ndarray
    confidence: float = 1.0

    def __post_init__(self):
        if not 0 <= self.corner_index <= 3:
            raise ValueError(f"corner_index {self.corner_index} out of range")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")
        object.__setattr__(self, "world", np.asarray(self.world, dtype=np.float64).reshape(3))
        object.__setattr__(self, "pixel", np.asarray(self.pixel, dtype=np.float64).reshape(2))


@dataclass
class CalibrationResult:
    camera: CameraModel
    rmse_px: float
    max_err_px: float
    per_marker: dict[int, float] = field(default_factory=dict)
    iterations: int = 0
    converged: bool = True
    cost_history: list[float] = field(default_factory=list)
    skew: float = 0.0


def _arrays(corrs):
    if len(corrs) == 0:
        return np.zeros((0, 3)), np.zeros((0, 2)), np.zeros(0)
    world = np.array([c.world for c in corrs])
    pixel = np.array([c.pixel for c in corrs])
    conf = np.array([c.confidence for c in corrs], dtype=np.float64)
    return world, pixel, conf


# ---------------------------------------------------------------------------
# board generation and synthetic observation


def generate_board(
    layout: CaveLayout, markers_per_screen: int = 4, marker_size_m: float = 0.5, margin_m: float = 0.2
) -> list[FiducialMarker]:
    """Deterministic grid of square markers on every screen.

    Markers are placed row-major in a ``cols x rows`` grid of equal cells inside
    the margin, each centred in its cell. Ids are ``screen_index * n + k``.
    """
    if markers_per_screen < 1 or marker_size_m <= 0 or margin_m < 0:
        raise DoesNotFit("need at least one marker of positive size")
    cols = math.ceil(math.sqrt(markers_per_screen))
    rows = math.ceil(markers_per_screen / cols)
    markers = []
    for si, panel in enumerate(layout.panels):
        cell_w = (panel.width - 2 * margin_m) / cols
        cell_h = (panel.height - 2 * margin_m) / rows
        if cell_w < marker_size_m or cell_h < marker_size_m:
            raise DoesNotFit(
                f"{markers_per_screen} markers of {marker_size_m} m do not fit on screen {panel.screen_id}"
            )
        half = marker_size_m / 2
        for k in range(markers_per_screen):
            r, c = divmod(k, cols)
            cu = margin_m + (c + 0.5) * cell_w
            # first row at the top of the panel
            cv = panel.height - margin_m - (r + 0.5) * cell_h
            local = [(cu - half, cv - half), (cu + half, cv - half), (cu + half, cv + half), (cu - half, cv + half)]
            corners = np.array([screen_to_world(layout, panel.screen_id, s) for s in local])
            markers.append(FiducialMarker(si * markers_per_screen + k, panel.screen_id, corners))
    return markers


def synthesize_correspondences(
    camera: CameraModel,
    markers,
    sigma_px: float = 0.0,
    rng: np.random.Generator | None = None,
    require_in_image: bool = True,
    confidence: float = 1.0,
) -> list[FiducialCorrespondence]:
    """Stand-in for a marker detector: project every fully visible marker."""
    rng = rng if rng is not None else np.random.default_rng(0)
    out = []
    for m in markers:
        uv, z = project_points(camera, m.corners)
        if np.any(z <= 1e-9):
            continue
        if require_in_image and not np.all(camera.in_image(uv)):
            continue
        if sigma_px > 0:
            uv = uv + rng.normal(0.0, sigma_px, uv.shape)
        for ci in range(4):
            out.append(FiducialCorrespondence(m.marker_id, ci, m.corners[ci], uv[ci], confidence))
    return out


def is_coplanar(world, tol: float = COPLANAR_SV_TOL) -> bool:
    world = np.asarray(world, dtype=np.float64)
    if len(world) < 4:
        return True
    centered = world - world.mean(axis=0)
    return bool(np.linalg.svd(centered, compute_uv=False)[-1] <= tol)


# ---------------------------------------------------------------------------
# linear solvers


def _normalize_2d(x):
    c = x.mean(axis=0)
    d = np.mean(np.linalg.norm(x - c, axis=1))
    s = math.sqrt(2) / d if d > 0 else 1.0
    return np.array([[s, 0, -s * c[0]], [0, s, -s * c[1]], [0, 0, 1]])


def _normalize_3d(X):
    c = X.mean(axis=0)
    d = np.mean(np.linalg.norm(X - c, axis=1))
    s = math.sqrt(3) / d if d > 0 else 1.0
    T = np.eye(4)
    T[:3, :3] *= s
    T[:3, 3] = -s * c
    return T


def _dlt(world, pixel, weights):
    T2 = _normalize_2d(pixel)
    T3 = _normalize_3d(world)
    xh = (T2 @ np.column_stack([pixel, np.ones(len(pixel))]).T).T
    Xh = (T3 @ np.column_stack([world, np.ones(len(world))]).T).T
    n = len(world)
    A = np.zeros((2 * n, 12))
    A[0::2, 0:4] = Xh
    A[0::2, 8:12] = -xh[:, 0:1] * Xh
    A[1::2, 4:8] = Xh
    A[1::2, 8:12] = -xh[:, 1:2] * Xh
    sw = np.sqrt(weights)
    A *= np.repeat(sw, 2)[:, None]
    _, _, vt = np.linalg.svd(A)
    Pn = vt[-1].reshape(3, 4)
    P = np.linalg.inv(T2) @ Pn @ T3
    P /= np.linalg.norm(P)
    if np.linalg.det(P[:, :3]) < 0:
        P = -P
    return P


def dlt_full(correspondences) -> np.ndarray:
    """Projection matrix from >= 6 non-coplanar correspondences, ``||P||_F = 1``."""
    world, pixel, conf = _arrays(correspondences)
    if len(world) < 6:
        raise Degenerate(f"full DLT needs >= 6 points, got {len(world)}")
    if is_coplanar(world):
        raise Degenerate("world points are coplanar; use solve_pnp_known_intrinsics")
    return _dlt(world, pixel, conf)


def decompose_projection(P) -> tuple[Intrinsics, Pose, float]:
    """RQ split of ``P = K [R | t]``; returns ``(intrinsics, pose, skew)``.

    ``skew`` is the discarded ``K[0, 1]`` after normalising ``K[2, 2] = 1``.
    """
    P = np.asarray(P, dtype=np.float64)
    M = P[:, :3]
    if not np.all(np.isfinite(M)) or np.linalg.matrix_rank(M, tol=1e-12 * max(np.abs(M).max(), 1e-300)) < 3:
        raise Singular("left 3x3 block of P is singular")
    if np.linalg.det(M) < 0:
        P = -P
        M = -M
    K, R = scipy.linalg.rq(M)
    D = np.diag(np.sign(np.diag(K)))
    K = K @ D
    R = D @ R
    t = np.linalg.solve(K, P[:, 3])
    K = K / K[2, 2]
    R = nearest_rotation(R)
    return Intrinsics(K[0, 0], K[1, 1], K[0, 2], K[1, 2]), Pose(R, t), float(K[0, 1])


def _homography(src, dst, weights):
    T1 = _normalize_2d(src)
    T2 = _normalize_2d(dst)
    a = (T1 @ np.column_stack([src, np.ones(len(src))]).T).T
    b = (T2 @ np.column_stack([dst, np.ones(len(dst))]).T).T
    n = len(src)
    A = np.zeros((2 * n, 9))
    A[0::2, 0:3] = a
    A[0::2, 6:9] = -b[:, 0:1] * a
    A[1::2, 3:6] = a
    A[1::2, 6:9] = -b[:, 1:2] * a
    A *= np.repeat(np.sqrt(weights), 2)[:, None]
    _, _, vt = np.linalg.svd(A)
    Hn = vt[-1].reshape(3, 3)
    return np.linalg.inv(T2) @ Hn @ T1


def _planar_pose(world, xn, weights) -> Pose:
    c = world.mean(axis=0)
    _, _, vt = np.linalg.svd(world - c)
    E = vt.T  # columns: in-plane e1, e2, normal e3
    if np.linalg.det(E) < 0:
        E[:, 2] = -E[:, 2]
    local = (world - c) @ E
    H = _homography(local[:, :2], xn, weights)
    lam = 2.0 / (np.linalg.norm(H[:, 0]) + np.linalg.norm(H[:, 1]))
    if H[2, 2] * lam < 0:
        lam = -lam
    r1, r2, tp = lam * H[:, 0], lam * H[:, 1], lam * H[:, 2]
    Rp = nearest_rotation(np.column_stack([r1, r2, np.cross(r1, r2)]))
    R = Rp @ E.T
    return Pose(R, tp - R @ c)


def solve_pnp_known_intrinsics(intrinsics: Intrinsics, correspondences, max_iters: int = 50) -> Pose:
    """Pose from >= 4 correspondences given the intrinsics."""
    world, pixel, conf = _arrays(correspondences)
    if len(world) < 4:
        raise Degenerate(f"PnP needs >= 4 points, got {len(world)}")
    cam0 = CameraModel(-1, intrinsics, Pose.identity())
    xn = normalized_coords(cam0, pixel)
    if is_coplanar(world):
        init = _planar_pose(world, xn, conf)
    else:
        if len(world) < 6:
            raise Degenerate("non-coplanar PnP initialisation needs >= 6 points")
        P = _dlt(world, xn, conf)
        M = P[:, :3]
        scale = np.cbrt(np.linalg.det(M))
        init = Pose(nearest_rotation(M / scale), P[:, 3] / scale)
    result = refine_lm((intrinsics, init), correspondences, max_iters=max_iters, refine_intrinsics=False)
    pose = result.camera.pose
    depth = pose.apply(world)[:, 2]
    if np.any(depth <= 1e-9):
        raise CheiralityFailure(f"{int(np.sum(depth <= 1e-9))} calibration points behind the camera")
    return pose


# ---------------------------------------------------------------------------
# Levenberg-Marquardt refinement


def projection_jacobian(rvec, t, intrinsics: Intrinsics, world, with_intrinsics: bool = True):
    """Projected pixels and their Jacobian w.r.t. ``[rvec, t, (fx, fy, cx, cy)]``.

    Returns ``uv`` of shape (n, 2) and ``J`` of shape (2n, 6 or 10), rows
    interleaved u0, v0, u1, v1, ...
    """
    rvec = np.asarray(rvec, dtype=np.float64)
    R = rotation_from_axis_angle(rvec)
    X = np.asarray(world, dtype=np.float64)
    n = len(X)
    Xc = X @ R.T + t
    z = Xc[:, 2]
    xn = Xc[:, :2] / z[:, None]
    k1, k2 = intrinsics.k1, intrinsics.k2
    rho = np.sum(xn * xn, axis=1)
    radial = 1.0 + k1 * rho + k2 * rho * rho
    xd = xn * radial[:, None]
    f = np.array([intrinsics.fx, intrinsics.fy])
    uv = xd * f + np.array([intrinsics.cx, intrinsics.cy])

    # d xn / d Xc : (n, 2, 3)
    dxn = np.zeros((n, 2, 3))
    dxn[:, 0, 0] = 1.0 / z
    dxn[:, 1, 1] = 1.0 / z
    dxn[:, 0, 2] = -xn[:, 0] / z
    dxn[:, 1, 2] = -xn[:, 1] / z
    # d xd / d xn : (n, 2, 2)
    drad = 2.0 * (k1 + 2.0 * k2 * rho)
    dxd = radial[:, None, None] * np.eye(2) + drad[:, None, None] * xn[:, :, None] * xn[:, None, :]
    duv_dXc = f[None, :, None] * np.einsum("nij,njk->nik", dxd, dxn)

    # d Xc / d rvec : (n, 3, 3)
    theta2 = float(rvec @ rvec)
    if theta2 < 1e-20:
        dXc_dr = np.stack([-skew(p) for p in X])
    else:
        # d(R p)/d r = -R [p]x (r r^T + (R^T - I)[r]x) / |r|^2
        right = (np.outer(rvec, rvec) + (R.T - np.eye(3)) @ skew(rvec)) / theta2
        dXc_dr = np.stack([-R @ skew(p) @ right for p in X])
    J_r = np.einsum("nij,njk->nik", duv_dXc, dXc_dr)
    J_t = duv_dXc
    blocks = [J_r, J_t]
    if with_intrinsics:
        J_k = np.zeros((n, 2, 4))
        J_k[:, 0, 0] = xd[:, 0]
        J_k[:, 1, 1] = xd[:, 1]
        J_k[:, 0, 2] = 1.0
        J_k[:, 1, 3] = 1.0
        blocks.append(J_k)
    J = np.concatenate(blocks, axis=2).reshape(2 * n, -1)
    return uv, J


def _unpack(params, base: Intrinsics, with_intrinsics: bool):
    rvec, t = params[:3], params[3:6]
    intr = base.with_params(*params[6:10]) if with_intrinsics else base
    return rvec, t, intr


def refine_lm(
    initial: tuple[Intrinsics, Pose],
    correspondences,
    max_iters: int = 100,
    gradient_tol: float = 1e-10,
    damping_init: float = 1e-3,
    refine_intrinsics: bool = True,
    camera_id: int = 0,
    image_size=(1920, 1080),
) -> CalibrationResult:
    """Minimise the confidence-weighted squared reprojection error.

    Marquardt damping (``lambda * diag(J^T J)``), lambda x10 on a rejected step
    and /10 on an accepted one. Cost never increases between accepted steps.
    ``gradient_tol`` applies to the gradient with Jacobian columns scaled to unit
    norm, so it is in pixels regardless of parameter units.
    """
    intr0, pose0 = initial
    world, pixel, conf = _arrays(correspondences)
    need = 6 if refine_intrinsics else 4
    if len(world) < need:
        raise Degenerate(f"refinement needs >= {need} correspondences, got {len(world)}")
    sw = np.repeat(np.sqrt(conf), 2)
    obs = pixel.reshape(-1)
    params = np.concatenate([axis_angle_from_rotation(pose0.rotation), pose0.translation])
    if refine_intrinsics:
        params = np.concatenate([params, [intr0.fx, intr0.fy, intr0.cx, intr0.cy]])

    def residual_and_jac(p):
        rvec, t, intr = _unpack(p, intr0, refine_intrinsics)
        uv, J = projection_jacobian(rvec, t, intr, world, refine_intrinsics)
        return (uv.reshape(-1) - obs) * sw, J * sw[:, None]

    def cost_of(p):
        rvec, t, intr = _unpack(p, intr0, refine_intrinsics)
        if intr.fx <= 0 or intr.fy <= 0:
            return math.inf
        R = rotation_from_axis_angle(rvec)
        if np.any((world @ R.T + t)[:, 2] <= 1e-9):
            return math.inf
        uv, _ = projection_jacobian(rvec, t, intr, world, False)
        r = (uv.reshape(-1) - obs) * sw
        return float(r @ r)

    r, J = residual_and_jac(params)
    cost = float(r @ r)
    history = [cost]
    lam = damping_init
    converged = False
    it = 0
    while it < max_iters:
        g = J.T @ r
        A = J.T @ J
        diag = np.diag(A).copy()
        diag[diag <= 0] = 1e-12
        # gradient in column-normalised parameters, i.e. in pixels
        if np.max(np.abs(g) / np.sqrt(diag)) < gradient_tol or cost == 0.0:
            converged = True
            break
        it += 1
        accepted = False
        while lam < 1e20:
            try:
                step = np.linalg.solve(A + lam * np.diag(diag), -g)
            except np.linalg.LinAlgError:
                lam *= 10
                continue
            trial = params + step
            new_cost = cost_of(trial)
            if new_cost <= cost:
                accepted = True
                break
            lam *= 10
        if not accepted:
            # no descent direction left at working precision
            converged = True
            break
        rel = (cost - new_cost) / cost if cost > 0 else 0.0
        params = trial
        lam = max(lam / 10, 1e-15)
        r, J = residual_and_jac(params)
        cost = float(r @ r)
        assert cost <= history[-1], "LM accepted a cost increase"
        history.append(cost)
        if rel < 1e-12:
            converged = True
            break
    else:
        log.debug("LM hit max_iters=%d with cost %.3g", max_iters, cost)

    rvec, t, intr = _unpack(params, intr0, refine_intrinsics)
    cam = CameraModel(camera_id, intr, Pose(rotation_from_axis_angle(rvec), t), tuple(image_size))
    res = _residual_stats(cam, correspondences)
    res.iterations = it
    res.converged = converged
    res.cost_history = history
    return res


# ---------------------------------------------------------------------------
# validation


def _residual_stats(camera: CameraModel, correspondences) -> CalibrationResult:
    world, pixel, _ = _arrays(correspondences)
    uv, _ = project_points(camera, world)
    err = uv - pixel
    per_corner = np.linalg.norm(err, axis=1)
    # RMS over all 2n residual components
    rmse = float(np.sqrt(np.mean(err * err))) if len(err) else 0.0
    max_err = float(per_corner.max()) if len(err) else 0.0
    per_marker: dict[int, list[float]] = {}
    for c, e in zip(correspondences, err):
        per_marker.setdefault(c.marker_id, []).extend(e.tolist())
    per_marker_rms = {k: float(np.sqrt(np.mean(np.square(v)))) for k, v in sorted(per_marker.items())}
    return CalibrationResult(camera, rmse, max_err, per_marker_rms)


@dataclass
class ReprojectionReport:
    result: CalibrationResult
    corners: list[tuple[int, int, float, float, float]]  # marker, corner, du, dv, |e|
    axes: dict[str, tuple[np.ndarray, np.ndarray] | None]
    notes: list[str] = field(default_factory=list)


def axis_segments(camera: CameraModel, length: float = 0.5):
    """Image segments from the world origin to the X, Y, Z axis tips.

    A segment is ``None`` when either endpoint is not in front of the camera.
    """
    notes = []
    try:
        o = project(camera, np.zeros(3))
    except NonPositiveDepth:
        notes.append("axis not visible: world origin not in front of camera")
        return {name: None for name in "XYZ"}, notes
    segs = {}
    for i, name in enumerate("XYZ"):
        tip = np.zeros(3)
        tip[i] = length
        try:
            segs[name] = (o, project(camera, tip))
        except NonPositiveDepth:
            segs[name] = None
            notes.append(f"axis not visible: {name} tip behind camera")
    return segs, notes


def reprojection_report(camera: CameraModel, correspondences) -> ReprojectionReport:
    if len(correspondences) < 1:
        raise Degenerate("reprojection report needs at least one correspondence")
    res = _residual_stats(camera, correspondences)
    world, pixel, _ = _arrays(correspondences)
    uv, _ = project_points(camera, world)
    rows = []
    for c, p, q in zip(correspondences, uv, pixel):
        du, dv = p - q
        rows.append((c.marker_id, c.corner_index, float(du), float(dv), float(math.hypot(du, dv))))
    axes, notes = axis_segments(camera)
    return ReprojectionReport(res, rows, axes, notes)


def calibrate_camera(
    correspondences,
    camera_id: int = 0,
    image_size=(1920, 1080),
    prior: Intrinsics | None = None,
    max_iters: int = 100,
) -> CalibrationResult:
    """Pick the solve path from the geometry of the correspondences."""
    world, _, _ = _arrays(correspondences)
    if len(world) >= 6 and not is_coplanar(world):
        P = dlt_full(correspondences)
        intr, pose, sk = decompose_projection(P)
        if prior is not None:
            intr = Intrinsics(intr.fx, intr.fy, intr.cx, intr.cy, prior.k1, prior.k2)
        res = refine_lm((intr, pose), correspondences, max_iters=max_iters, camera_id=camera_id, image_size=image_size)
        res.skew = sk
        return res
    if prior is None:
        raise Degenerate("single-plane view needs prior intrinsics")
    pose = solve_pnp_known_intrinsics(prior, correspondences)
    return refine_lm(
        (prior, pose), correspondences, max_iters=max_iters, refine_intrinsics=False,
        camera_id=camera_id, image_size=image_size,
    )


# ---------------------------------------------------------------------------
# file formats
#
# correspondence file: one record per line, whitespace separated
#   marker_id corner_index X Y Z u v confidence
# '#' starts a comment.


def write_correspondences(path, correspondences) -> None:
    lines = ["# marker_id corner_index X Y Z u v confidence"]
    for c in correspondences:
        lines.append(
            f"{c.marker_id} {c.corner_index} {float(c.world[0])!r} {float(c.world[1])!r} {float(c.world[2])!r} "
            f"{float(c.pixel[0])!r} {float(c.pixel[1])!r} {float(c.confidence)!r}"
        )
    Path(path).write_text("\n".join(lines) + "\n")


def read_correspondences(path) -> list[FiducialCorrespondence]:
    out = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        f = line.split()
        if len(f) != 8:
            raise ValueError(f"{path}:{lineno}: expected 8 fields, got {len(f)}")
        out.append(FiducialCorrespondence(int(f[0]), int(f[1]), [float(x) for x in f[2:5]],
                                          [float(x) for x in f[5:7]], float(f[7])))
    return out


def camera_to_dict(cam: CameraModel, rmse_px: float | None = None) -> dict:
    k = cam.intrinsics
    d = {
        "id": cam.id,
        "image_size": list(cam.image_size),
        "fx": k.fx, "fy": k.fy, "cx": k.cx, "cy": k.cy, "k1": k.k1, "k2": k.k2,
        "R": cam.pose.rotation.reshape(-1).tolist(),
        "t": cam.pose.translation.tolist(),
    }
    if rmse_px is not None:
        d["rmse_px"] = rmse_px
    return d


def camera_from_dict(d: dict) -> CameraModel:
    intr = Intrinsics(d["fx"], d["fy"], d["cx"], d["cy"], d.get("k1", 0.0), d.get("k2", 0.0))
    pose = Pose(np.array(d["R"], dtype=np.float64).reshape(3, 3), d["t"])
    return CameraModel(int(d["id"]), intr, pose, tuple(d.get("image_size", (1920, 1080))))


def write_calibration(path, results) -> None:
    """``results``: iterable of CalibrationResult or CameraModel."""
    cams = []
    for r in results:
        if isinstance(r, CalibrationResult):
            cams.append(camera_to_dict(r.camera, r.rmse_px))
        else:
            cams.append(camera_to_dict(r))
    Path(path).write_text(json.dumps({"cameras": cams}, indent=2) + "\n")


def read_calibration(path) -> list[CameraModel]:
    d = json.loads(Path(path).read_text())
    return [camera_from_dict(c) for c in d["cameras"]]


def write_axis_export(path, cameras) -> None:
    """Per camera, the origin->X/Y/Z tip segments in pixels (null when hidden)."""
    out = []
    for cam in cameras:
        segs, notes = axis_segments(cam)
        out.append({
            "camera": cam.id,
            "segments": {
                k: (None if v is None else [v[0].tolist(), v[1].tolist()]) for k, v in segs.items()
            },
            "notes": notes,
        })
    Path(path).write_text(json.dumps({"axes": out}, indent=2) + "\n")
