"""Per-camera multi-person tracking in the observation-centric SORT family.

The filter state is ``(cx, cy, s, r, vcx, vcy, vs)`` with ``s`` the box area and
``r`` the aspect ratio w/h. Association uses IoU plus a direction-consistency
(momentum) term; after an occlusion the track is re-updated along a virtual
trajectory interpolated between its last and current observations.
"""
from __future__ import annotations

import enum
from collections import deque
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import NonMonotoneFrame
from .kernels import iou_matrix

MIN_HITS = 3
MAX_AGE = 30
IOU_THRESHOLD = 0.3
MOMENTUM_WEIGHT = 0.2
HISTORY = 3
MIN_SCORE = 0.4

_F = np.eye(7)
_F[0, 4] = _F[1, 5] = _F[2, 6] = 1.0
_H = np.eye(4, 7)


def xyxy_to_z(b) -> np.ndarray:
    b = np.asarray(b, dtype=np.float64)
    w, h = b[2] - b[0], b[3] - b[1]
    return np.array([b[0] + w / 2, b[1] + h / 2, w * h, w / h])


def z_to_xyxy(z) -> np.ndarray:
    s, r = max(float(z[2]), 1e-12), max(float(z[3]), 1e-12)
    w = np.sqrt(s * r)
    h = s / w
    return np.array([z[0] - w / 2, z[1] - h / 2, z[0] + w / 2, z[1] + h / 2])


class KalmanBoxState:
    """Constant-velocity box filter.

    Measurement variance is 1 px^2 on the centre and larger on area. Centre
    velocity noise is 1 px^2/frame^2 so the filter follows a person starting
    or stopping within a few frames.
    """

    def __init__(self, box_xyxy, frame: int = 0):
        self.x = np.zeros(7)
        self.x[:4] = xyxy_to_z(box_xyxy)
        self.P = np.diag([10.0, 10.0, 10.0, 10.0, 1e4, 1e4, 1e4])
        self.Q = np.diag([1.0, 1.0, 10.0, 1e-4, 1.0, 1.0, 1.0])
        self.R = np.diag([1.0, 1.0, 10.0, 1e-2])
        self.timestamp = frame
        self.last_innovation = np.zeros(4)

    def copy(self) -> "KalmanBoxState":
        k = KalmanBoxState.__new__(KalmanBoxState)
        k.x, k.P, k.Q, k.R = self.x.copy(), self.P.copy(), self.Q, self.R
        k.timestamp, k.last_innovation = self.timestamp, self.last_innovation.copy()
        return k

    def predict(self) -> np.ndarray:
        if self.x[2] + self.x[6] < 1.0:
            self.x[6] = 1.0 - self.x[2]
        self.x = _F @ self.x
        self.P = _F @ self.P @ _F.T + self.Q
        self.P = 0.5 * (self.P + self.P.T)
        return self.box

    def update(self, box_xyxy, frame: int | None = None) -> None:
        z = xyxy_to_z(box_xyxy)
        y = z - _H @ self.x
        S = _H @ self.P @ _H.T + self.R
        K = np.linalg.solve(S, _H @ self.P).T
        self.x = self.x + K @ y
        IKH = np.eye(7) - K @ _H
        # Joseph form keeps P symmetric PSD
        self.P = IKH @ self.P @ IKH.T + K @ self.R @ K.T
        self.P = 0.5 * (self.P + self.P.T)
        self.x[2] = max(self.x[2], 1.0)
        self.last_innovation = y
        if frame is not None:
            self.timestamp = frame

    @property
    def box(self) -> np.ndarray:
        return z_to_xyxy(self.x)


class TrackStatus(enum.Enum):
    Tentative = "tentative"
    Confirmed = "confirmed"
    Lost = "lost"


@dataclass
class Observation:
    frame: int
    box: np.ndarray  # xyxy
    keypoints: np.ndarray | None
    confidence: np.ndarray | None


@dataclass(frozen=True)
class TrackSnapshot:
    track_id: int
    camera_id: int
    frame_index: int
    box: np.ndarray  # xyxy of the matched detection
    keypoints: np.ndarray
    confidence: np.ndarray
    detection_index: int  # position in the input list of this frame


class Track2D:
    def __init__(self, track_id: int, obs: Observation, history: int = HISTORY):
        self.track_id = track_id
        self.kf = KalmanBoxState(obs.box, obs.frame)
        self.status = TrackStatus.Tentative
        self.hits = 1
        self.time_since_update = 0
        self.history: deque[Observation] = deque([obs], maxlen=history)
        self._anchor = self.kf.copy()  # filter state right after the last real update
        self.detection_index = -1

    @property
    def last_observation(self) -> Observation:
        return self.history[-1]

    def velocity_direction(self) -> np.ndarray | None:
        """Unit vector from the oldest to the newest remembered observation centre."""
        if len(self.history) < 2:
            return None
        a = xyxy_to_z(self.history[0].box)[:2]
        b = xyxy_to_z(self.history[-1].box)[:2]
        d = b - a
        n = np.linalg.norm(d)
        return None if n < 1e-9 else d / n


def momentum_cost(tracks, det_boxes) -> np.ndarray:
    """Angle (in units of pi) between each track's recent motion and the motion implied by each detection."""
    C = np.zeros((len(tracks), len(det_boxes)))
    if not len(det_boxes):
        return C
    centres = np.column_stack([(det_boxes[:, 0] + det_boxes[:, 2]) / 2, (det_boxes[:, 1] + det_boxes[:, 3]) / 2])
    for i, t in enumerate(tracks):
        v = t.velocity_direction()
        if v is None:
            continue
        last = xyxy_to_z(t.last_observation.box)[:2]
        d = centres - last
        n = np.linalg.norm(d, axis=1)
        cos = np.where(n > 1e-9, (d @ v) / np.where(n > 1e-9, n, 1.0), 1.0)
        C[i] = np.arccos(np.clip(cos, -1.0, 1.0)) / np.pi
    return C


def associate(tracks, det_boxes, iou_threshold: float = IOU_THRESHOLD, momentum_weight: float = MOMENTUM_WEIGHT,
              predicted=None):
    """Optimal assignment on ``(1 - IoU) + w * angle``; returns (pairs, unmatched_tracks, unmatched_dets)."""
    if not 0.0 < iou_threshold < 1.0:
        raise ValueError("iou_threshold must be in (0, 1)")
    det_boxes = np.asarray(det_boxes, dtype=np.float64).reshape(-1, 4)
    nt, nd = len(tracks), len(det_boxes)
    if nt == 0 or nd == 0:
        return [], list(range(nt)), list(range(nd))
    if predicted is None:
        predicted = np.array([t.kf.box for t in tracks])
    iou = iou_matrix(np.asarray(predicted).reshape(-1, 4), det_boxes)
    cost = (1.0 - iou) + momentum_weight * momentum_cost(tracks, det_boxes)
    rows, cols = linear_sum_assignment(cost)
    pairs = [(int(r), int(c)) for r, c in zip(rows, cols) if iou[r, c] >= iou_threshold]
    mt = {r for r, _ in pairs}
    md = {c for _, c in pairs}
    return pairs, [i for i in range(nt) if i not in mt], [j for j in range(nd) if j not in md]


def _detection_parts(det):
    if hasattr(det, "xyxy"):
        return np.asarray(det.xyxy, dtype=np.float64), det.keypoints, det.confidence
    box = np.asarray(det, dtype=np.float64)
    return box, None, None


def _score(det) -> float:
    conf = getattr(det, "confidence", None)
    if conf is None:
        return 1.0
    conf = np.asarray(conf)
    seen = conf > 0
    return float(conf[seen].mean()) if seen.any() else 0.0


class Tracker:
    """One instance per camera; not safe for concurrent mutation."""

    def __init__(self, camera_id: int = 0, min_hits: int = MIN_HITS, max_age: int = MAX_AGE,
                 iou_threshold: float = IOU_THRESHOLD, momentum_weight: float = MOMENTUM_WEIGHT,
                 history: int = HISTORY, min_score: float = MIN_SCORE, reupdate: bool = True):
        self.camera_id = camera_id
        self.min_hits = min_hits
        self.max_age = max_age
        self.iou_threshold = iou_threshold
        self.momentum_weight = momentum_weight
        self.history = history
        self.min_score = min_score
        self.reupdate = reupdate
        self.tracks: list[Track2D] = []
        self.frame_index: int | None = None
        self._next_id = 0
        self.log: list[tuple] = []

    def predict(self) -> np.ndarray:
        return np.array([t.kf.predict() for t in self.tracks]).reshape(-1, 4)

    def update_track(self, track: Track2D, obs: Observation) -> None:
        gap = obs.frame - track.last_observation.frame - 1
        if gap >= 1 and self.reupdate:
            # replay the occluded frames along a straight virtual path
            kf = track._anchor.copy()
            a, b = track.last_observation.box, obs.box
            for i in range(1, gap + 1):
                kf.predict()
                kf.update(a + (b - a) * i / (gap + 1))
            kf.predict()
            track.kf = kf
        track.kf.update(obs.box, obs.frame)
        track._anchor = track.kf.copy()
        track.history.append(obs)
        track.hits += 1
        track.time_since_update = 0
        if track.hits >= self.min_hits:
            track.status = TrackStatus.Confirmed

    def step(self, detections, frame_index: int) -> list[TrackSnapshot]:
        if self.frame_index is not None and frame_index <= self.frame_index:
            raise NonMonotoneFrame(f"frame {frame_index} after {self.frame_index}")
        self.frame_index = frame_index
        dets = [(k, d) for k, d in enumerate(detections) if _score(d) >= self.min_score]
        parts = [_detection_parts(d) for _, d in dets]
        boxes = np.array([p[0] for p in parts]).reshape(-1, 4)

        predicted = self.predict()
        for t in self.tracks:
            t.time_since_update += 1
        pairs, um_t, um_d = associate(self.tracks, boxes, self.iou_threshold, self.momentum_weight, predicted)
        # second chance: last real observation against leftovers (recovers after occlusion drift)
        if um_t and um_d:
            last = np.array([self.tracks[i].last_observation.box for i in um_t])
            sub = [self.tracks[i] for i in um_t]
            p2, _, _ = associate(sub, boxes[um_d], self.iou_threshold, 0.0, last)
            for r, c in p2:
                pairs.append((um_t[r], um_d[c]))
            mt = {r for r, _ in pairs}
            md = {c for _, c in pairs}
            um_t = [i for i in range(len(self.tracks)) if i not in mt]
            um_d = [j for j in range(len(boxes)) if j not in md]

        for ti, di in pairs:
            box, kp, conf = parts[di]
            self.update_track(self.tracks[ti], Observation(frame_index, box, kp, conf))
            self.tracks[ti].detection_index = dets[di][0]
        for ti in um_t:
            t = self.tracks[ti]
            if t.status is TrackStatus.Confirmed:
                t.status = TrackStatus.Lost
        for di in um_d:
            box, kp, conf = parts[di]
            self.tracks.append(Track2D(self._next_id, Observation(frame_index, box, kp, conf), self.history))
            self.tracks[-1].detection_index = dets[di][0]
            self._next_id += 1
            if self.min_hits <= 1:
                self.tracks[-1].status = TrackStatus.Confirmed
        # tentative tracks die on their first miss; others after max_age
        self.tracks = [t for t in self.tracks
                       if (t.time_since_update == 0 or t.status is not TrackStatus.Tentative)
                       and t.time_since_update <= self.max_age]

        out = []
        for t in self.tracks:
            self.log.append((frame_index, self.camera_id, t.track_id, t.kf.box.copy(), t.status.value))
            if t.status is TrackStatus.Confirmed and t.time_since_update == 0:
                obs = t.last_observation
                out.append(TrackSnapshot(t.track_id, self.camera_id, frame_index, obs.box,
                                         obs.keypoints, obs.confidence, t.detection_index))
        return out


def write_track_log(records, path) -> None:
    """``frame camera track_id x1 y1 x2 y2 status`` per line."""
    with open(path, "w") as f:
        f.write("# frame camera track_id x1 y1 x2 y2 status\n")
        for fr, cam, tid, box, status in records:
            f.write(f"{fr} {cam} {tid} {box[0]:.3f} {box[1]:.3f} {box[2]:.3f} {box[3]:.3f} {status}\n")


def read_track_log(path) -> list[tuple]:
    out = []
    with open(path) as f:
        for line in f:
            if not line.strip() or line.startswith("#"):
                continue
            p = line.split()
            out.append((int(p[0]), int(p[1]), int(p[2]), np.array([float(x) for x in p[3:7]]), p[7]))
    return out
