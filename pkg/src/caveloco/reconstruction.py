"""Multi-view fusion: cross-view identity matching, triangulation, skeleton buffers."""
from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import CheiralityFailure, InsufficientViews, NonMonotoneTimestamp
from .geometry import CameraModel, normalized_coords
from .skeleton import NUM_JOINTS, TORSO, SkeletonFrame3D

log = logging.getLogger(__name__)

C_MIN = 0.3
RESIDUAL_GATE_PX = 10.0
EPIPOLAR_GATE_PX = 20.0
WINDOW = 32
MAX_FILL_GAP = 3
_CHUNK = 65536


def _undistorted_pixels(camera: CameraModel, uv) -> np.ndarray:
    if not camera.intrinsics.has_distortion:
        return uv
    k = camera.intrinsics
    xn = normalized_coords(camera, uv)
    return np.stack([k.fx * xn[..., 0] + k.cx, k.fy * xn[..., 1] + k.cy], axis=-1)


def _centred(cameras):
    """Projection matrices in a frame translated to the camera centroid, and the centroid."""
    c = np.mean([cam.center for cam in cameras], axis=0)
    T = np.eye(4)
    T[:3, 3] = c
    return np.stack([cam.projection_matrix @ T for cam in cameras]), c


def _solve_one(P, uv, w, gate_px):
    """Single point with view dropping; returns (X, residual, weights) or raises."""
    w = w.copy()
    while True:
        X, res, depth = kernels.triangulate_batch(P, uv[None], w[None])
        X, res, depth = X[0], res[0], depth[0]
        used = w > 0
        bad_depth = used & (depth <= 1e-9)
        mean_res = float(np.nanmean(np.where(used, res, np.nan)))
        if not bad_depth.any() and mean_res <= gate_px:
            return X, mean_res, w
        if used.sum() <= 2:
            if bad_depth.any():
                raise CheiralityFailure("no positive-depth solution from the remaining two views")
            return X, mean_res, w
        worst = int(np.nanargmax(np.where(used, res, -np.inf)))
        w[worst] = 0.0


def triangulate_joints(cameras, uv, conf, c_min: float = C_MIN, gate_px: float = RESIDUAL_GATE_PX):
    """Triangulate many points seen by the same camera set.

    ``uv`` is (N, V, 2) in pixels with NaN for unseen, ``conf`` (N, V). Views
    with confidence below ``c_min`` are ignored; remaining views are weighted by
    confidence. A point is valid when >= 2 views remain, every remaining view
    sees it in front, and the mean reprojection residual is within
    ``gate_px``. Failing points drop their worst view and retry.

    Returns ``X`` (N, 3), ``valid`` (N,), ``residual`` (N,).
    """
    cameras = list(cameras)
    uv = np.asarray(uv, dtype=np.float64)
    conf = np.asarray(conf, dtype=np.float64)
    n, v = conf.shape
    uv = np.stack([_undistorted_pixels(c, uv[:, i]) for i, c in enumerate(cameras)], axis=1)
    P, origin = _centred(cameras)
    w = np.where((conf >= c_min) & np.all(np.isfinite(uv), axis=2), conf, 0.0)
    X = np.full((n, 3), np.nan)
    residual = np.full(n, np.nan)
    valid = np.zeros(n, dtype=bool)
    enough = (w > 0).sum(axis=1) >= 2
    idx = np.flatnonzero(enough)
    for start in range(0, len(idx), _CHUNK):
        sel = idx[start:start + _CHUNK]
        Xs, res, depth = kernels.triangulate_batch(P, uv[sel], w[sel])
        used = w[sel] > 0
        with np.errstate(invalid="ignore"):
            mean_res = np.nanmean(np.where(used, res, np.nan), axis=1)
        ok = ~np.any(used & (depth <= 1e-9), axis=1) & (mean_res <= gate_px)
        X[sel[ok]] = Xs[ok]
        residual[sel[ok]] = mean_res[ok]
        valid[sel[ok]] = True
        for k in sel[~ok]:
            try:
                Xk, rk, _ = _solve_one(P, uv[k], w[k], gate_px)
            except CheiralityFailure:
                continue
            if rk <= gate_px:
                X[k], residual[k], valid[k] = Xk, rk, True
    return X + origin, valid, residual


def triangulate_point(observations, gate_px: float = np.inf):
    """``observations``: iterable of ``(camera, pixel, confidence)``.

    Returns ``(X, mean_residual_px)``. Views are dropped worst-first until the
    point is in front of every remaining camera.
    """
    obs = list(observations)
    if len(obs) < 2:
        raise InsufficientViews(f"need >= 2 views, got {len(obs)}")
    ids = [o[0].id for o in obs]
    if len(set(ids)) != len(ids):
        raise ValueError("cameras must be distinct")
    cams = [o[0] for o in obs]
    uv = np.array([_undistorted_pixels(c, np.asarray(o[1], dtype=np.float64)) for c, o in zip(cams, obs)])
    w = np.array([float(o[2]) for o in obs])
    if (w > 0).sum() < 2:
        raise InsufficientViews("fewer than 2 views with positive confidence")
    P, origin = _centred(cams)
    X, res, _ = _solve_one(P, uv, w, gate_px)
    return X + origin, res


# ---------------------------------------------------------------------------
# cross-view association


def fundamental_matrix(a: CameraModel, b: CameraModel) -> np.ndarray:
    """F with ``x_b^T F x_a = 0`` for pixels of the same world point."""
    R = b.pose.rotation @ a.pose.rotation.T
    t = b.pose.translation - R @ a.pose.translation
    tx = np.array([[0, -t[2], t[1]], [t[2], 0, -t[0]], [-t[1], t[0], 0]])
    E = tx @ R
    return np.linalg.inv(b.intrinsics.K).T @ E @ np.linalg.inv(a.intrinsics.K)


def symmetric_epipolar_distance(F, xa, xb) -> np.ndarray:
    """Mean of the point-to-epipolar-line distances in both images, per pair."""
    xa = np.column_stack([xa, np.ones(len(xa))])
    xb = np.column_stack([xb, np.ones(len(xb))])
    la = xa @ F.T  # lines in image b
    lb = xb @ F  # lines in image a
    num = np.abs(np.sum(xb * la, axis=1))
    da = num / np.linalg.norm(lb[:, :2], axis=1)
    db = num / np.linalg.norm(la[:, :2], axis=1)
    return 0.5 * (da + db)


@dataclass
class ViewGroup:
    person_id: int
    members: dict[int, int]  # camera_id -> track_id
    score: float = 0.0


def _pair_distance(F, ta, tb, c_min):
    ka, kb = np.asarray(ta.keypoints), np.asarray(tb.keypoints)
    ca, cb = np.asarray(ta.confidence), np.asarray(tb.confidence)
    sel = [j for j in TORSO if ca[j] >= c_min and cb[j] >= c_min and np.all(np.isfinite(ka[j]))
           and np.all(np.isfinite(kb[j]))]
    if not sel:
        return np.inf
    return float(np.mean(symmetric_epipolar_distance(F, ka[sel], kb[sel])))


class CrossViewMatcher:
    """Greedy complete-linkage grouping of per-camera tracks, with persistent person ids."""

    def __init__(self, cameras, gate_px: float = EPIPOLAR_GATE_PX, c_min: float = C_MIN):
        self.cameras = {c.id: c for c in cameras}
        self.gate_px = gate_px
        self.c_min = c_min
        self._F = {}
        self._owner: dict[tuple[int, int], int] = {}
        self._next_id = 0
        self.flags: set[str] = set()

    def _fmat(self, a, b):
        key = (a, b)
        if key not in self._F:
            self._F[key] = fundamental_matrix(self.cameras[a], self.cameras[b])
        return self._F[key]

    def match(self, tracks_by_camera) -> list[ViewGroup]:
        self.flags = set()
        nodes = [(cid, t) for cid in sorted(tracks_by_camera) for t in tracks_by_camera[cid]]
        if len({cid for cid, _ in nodes}) < 2:
            if nodes:
                self.flags.add("InsufficientViews")
            return []
        n = len(nodes)
        D = np.full((n, n), np.inf)
        for i in range(n):
            for j in range(i + 1, n):
                ci, cj = nodes[i][0], nodes[j][0]
                if ci == cj:
                    continue
                D[i, j] = D[j, i] = _pair_distance(self._fmat(ci, cj), nodes[i][1], nodes[j][1], self.c_min)
        groups = [{i} for i in range(n)]
        # A pair seen consistently by third views ranks first: two people on a
        # shared epipolar plane are indistinguishable from one camera pair alone.
        ok = D <= self.gate_px
        support = (ok.astype(int) @ ok.astype(int))
        pairs = sorted((-support[i, j], D[i, j], i, j) for i in range(n) for j in range(i + 1, n) if ok[i, j])
        where = list(range(n))
        for *_, i, j in pairs:
            gi, gj = where[i], where[j]
            if gi == gj:
                continue
            A, B = groups[gi], groups[gj]
            cams_a = {nodes[k][0] for k in A}
            if any(nodes[k][0] in cams_a for k in B):
                continue
            if any(D[a, b] > self.gate_px for a in A for b in B):
                continue
            A |= B
            groups[gj] = set()
            for k in B:
                where[k] = gi
        groups = [g for g in groups if len(g) >= 2]
        if not groups and nodes:
            self.flags.add("InsufficientViews")
        return self._assign_ids(nodes, groups, D)

    def _assign_ids(self, nodes, groups, D) -> list[ViewGroup]:
        groups.sort(key=lambda g: (-len(g), min(g)))
        taken: set[int] = set()
        out = []
        for g in groups:
            votes: dict[int, int] = {}
            for k in g:
                cid, t = nodes[k]
                pid = self._owner.get((cid, t.track_id))
                if pid is not None:
                    votes[pid] = votes.get(pid, 0) + 1
            ranked = sorted(votes.items(), key=lambda kv: (-kv[1], kv[0]))
            pid = next((p for p, _ in ranked if p not in taken), None)
            if pid is None:
                pid = self._next_id
                self._next_id += 1
            taken.add(pid)
            members = {nodes[k][0]: nodes[k][1].track_id for k in g}
            for cid, tid in members.items():
                self._owner[(cid, tid)] = pid
            score = float(np.mean([D[a, b] for a in g for b in g if a < b]))
            out.append(ViewGroup(pid, members, score))
        out.sort(key=lambda vg: vg.person_id)
        return out


def cross_view_match(tracks_by_camera, cameras, gate_px: float = EPIPOLAR_GATE_PX,
                     matcher: CrossViewMatcher | None = None) -> list[ViewGroup]:
    matcher = matcher or CrossViewMatcher(cameras, gate_px)
    groups = matcher.match(tracks_by_camera)
    if "InsufficientViews" in matcher.flags:
        log.debug("cross_view_match: InsufficientViews")
    return groups


# ---------------------------------------------------------------------------
# skeletons


def reconstruct_skeleton(group: ViewGroup, views, cameras, timestamp: float = 0.0,
                         c_min: float = C_MIN, gate_px: float = RESIDUAL_GATE_PX) -> SkeletonFrame3D:
    """Triangulate all joints of one person.

    ``views`` maps camera_id -> object with ``keypoints`` (17, 2) and
    ``confidence`` (17,). Joints that cannot be triangulated are invalid in the
    returned mask.
    """
    cams = {c.id: c for c in cameras}
    ids = [cid for cid in sorted(group.members) if cid in views and cid in cams]
    if len(ids) < 2:
        return SkeletonFrame3D(group.person_id, timestamp, np.full((NUM_JOINTS, 3), np.nan),
                               np.zeros(NUM_JOINTS, dtype=bool))
    uv = np.stack([np.asarray(views[cid].keypoints, dtype=np.float64) for cid in ids], axis=1)
    conf = np.stack([np.asarray(views[cid].confidence, dtype=np.float64) for cid in ids], axis=1)
    X, valid, _ = triangulate_joints([cams[c] for c in ids], uv, conf, c_min, gate_px)
    X[~valid] = np.nan
    return SkeletonFrame3D(group.person_id, timestamp, X, valid)


def fill_holes(frames, max_gap: int = MAX_FILL_GAP) -> list[SkeletonFrame3D]:
    """Linearly interpolate (in time) joint gaps of at most ``max_gap`` frames."""
    frames = [f.copy() for f in frames]
    if not frames:
        return frames
    t = np.array([f.timestamp for f in frames])
    for j in range(NUM_JOINTS):
        ok = np.array([f.valid[j] for f in frames])
        k = 0
        while k < len(frames):
            if ok[k]:
                k += 1
                continue
            start = k
            while k < len(frames) and not ok[k]:
                k += 1
            gap = k - start
            if start == 0 or k == len(frames) or gap > max_gap:
                continue
            a, b = frames[start - 1], frames[k]
            for m in range(start, k):
                s = (t[m] - t[start - 1]) / (t[k] - t[start - 1])
                frames[m].joints[j] = (1 - s) * a.joints[j] + s * b.joints[j]
                frames[m].valid[j] = True
                frames[m].interpolated[j] = True
    return frames


@dataclass
class SkeletonWindow:
    frames: tuple[SkeletonFrame3D, ...]
    capacity: int

    @property
    def full(self) -> bool:
        return len(self.frames) == self.capacity

    @property
    def joints(self) -> np.ndarray:
        return np.stack([f.joints for f in self.frames])

    @property
    def valid(self) -> np.ndarray:
        return np.stack([f.valid for f in self.frames])

    @property
    def timestamps(self) -> np.ndarray:
        return np.array([f.timestamp for f in self.frames])

    def __len__(self):
        return len(self.frames)


class SkeletonSequence:
    """Ring buffer of the last ``capacity`` frames of one person.

    Short joint gaps are back-filled when the joint reappears, so windows
    returned later see interpolated values; windows already handed out are
    immutable copies.
    """

    def __init__(self, person_id: int, capacity: int = WINDOW, max_gap: int = MAX_FILL_GAP):
        self.person_id = person_id
        self.capacity = capacity
        self.max_gap = max_gap
        self._buf: deque[SkeletonFrame3D] = deque(maxlen=capacity)

    def __len__(self):
        return len(self._buf)

    @property
    def last_timestamp(self) -> float | None:
        return self._buf[-1].timestamp if self._buf else None

    def append(self, frame: SkeletonFrame3D) -> SkeletonWindow:
        if self._buf and not frame.timestamp > self._buf[-1].timestamp:
            raise NonMonotoneTimestamp(f"{frame.timestamp} after {self._buf[-1].timestamp}")
        frame = frame.copy()
        self._backfill(frame)
        self._buf.append(frame)
        return SkeletonWindow(tuple(f.copy() for f in self._buf), self.capacity)

    def _backfill(self, new: SkeletonFrame3D):
        buf = self._buf
        n = len(buf)
        for j in np.flatnonzero(new.valid):
            gap = 0
            while gap < n and not buf[n - 1 - gap].valid[j]:
                gap += 1
            if gap == 0 or gap > self.max_gap or gap == n:
                continue
            a = buf[n - 1 - gap]
            for m in range(n - gap, n):
                s = (buf[m].timestamp - a.timestamp) / (new.timestamp - a.timestamp)
                buf[m].joints[j] = (1 - s) * a.joints[j] + s * new.joints[j]
                buf[m].valid[j] = True
                buf[m].interpolated[j] = True


@dataclass
class FusedPerson:
    person_id: int
    frame: SkeletonFrame3D
    window: SkeletonWindow
    group: ViewGroup


class Reconstructor:
    """Fusion stage: per-camera confirmed tracks of one frame in, 3D skeletons out."""

    def __init__(self, cameras, window: int = WINDOW, gate_px: float = EPIPOLAR_GATE_PX,
                 c_min: float = C_MIN, residual_gate_px: float = RESIDUAL_GATE_PX):
        self.cameras = list(cameras)
        self.matcher = CrossViewMatcher(self.cameras, gate_px, c_min)
        self.window = window
        self.c_min = c_min
        self.residual_gate_px = residual_gate_px
        self.sequences: dict[int, SkeletonSequence] = {}

    def process(self, tracks_by_camera, timestamp: float) -> list[FusedPerson]:
        groups = self.matcher.match(tracks_by_camera)
        lookup = {(cid, t.track_id): t for cid, ts in tracks_by_camera.items() for t in ts}
        out = []
        for g in groups:
            views = {cid: lookup[(cid, tid)] for cid, tid in g.members.items()}
            frame = reconstruct_skeleton(g, views, self.cameras, timestamp, self.c_min, self.residual_gate_px)
            seq = self.sequences.setdefault(g.person_id, SkeletonSequence(g.person_id, self.window))
            win = seq.append(frame)
            out.append(FusedPerson(g.person_id, frame, win, g))
        return out
