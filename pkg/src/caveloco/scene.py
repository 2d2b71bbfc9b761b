"""Synthetic people, cameras observations and training datasets.

Replaces the physical capture and 2D pose detector: motion comes from a
parametric in-place stepping model, observations are pinhole projections with
Gaussian pixel noise, dropped detections, scripted occlusions and clutter.
Every output is a pure function of its parameters and seed.
"""
from __future__ import annotations

import gzip
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import BadParams, DegenerateDataset
from .geometry import CameraModel, project_points
from .skeleton import FPS, NUM_JOINTS, ActionLabel, SkeletonFrame3D

# rest pose in body coordinates (forward, left, up), metres, for scale 1
REST_POSE = np.array([
    [0.10, 0.000, 1.60],   # nose
    [0.08, 0.035, 1.64],   # left eye
    [0.08, -0.035, 1.64],  # right eye
    [0.00, 0.075, 1.62],   # left ear
    [0.00, -0.075, 1.62],  # right ear
    [0.00, 0.190, 1.42],   # left shoulder
    [0.00, -0.190, 1.42],  # right shoulder
    [0.00, 0.210, 1.12],   # left elbow
    [0.00, -0.210, 1.12],  # right elbow
    [0.04, 0.210, 0.86],   # left wrist
    [0.04, -0.210, 0.86],  # right wrist
    [0.00, 0.100, 0.92],   # left hip
    [0.00, -0.100, 0.92],  # right hip
    [0.02, 0.100, 0.50],   # left knee
    [0.02, -0.100, 0.50],  # right knee
    [0.00, 0.100, 0.08],   # left ankle
    [0.00, -0.100, 0.08],  # right ankle
])

_UPPER = np.array([0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10])
_ARM_L = (7, 9)
_ARM_R = (8, 10)
_LEG_L = (13, 15)  # knee, ankle
_LEG_R = (14, 16)


@dataclass(frozen=True)
class GaitParams:
    scale: float = 1.0
    lift: float = 0.14  # knee lift amplitude, m
    arm_swing: float = 0.12  # wrist fore-aft amplitude, m
    shift: float = 0.045  # lateral weight shift of the upper body, m
    sway: float = 0.01  # stand-still sway std, m

    @classmethod
    def sample(cls, rng: np.random.Generator) -> "GaitParams":
        return cls(
            scale=rng.uniform(0.9, 1.1),
            lift=rng.uniform(0.10, 0.18),
            arm_swing=rng.uniform(0.08, 0.15),
            shift=rng.uniform(0.03, 0.06),
            sway=rng.uniform(0.006, 0.012),
        )


SWAY_RAMP_S = 0.3


def _sway_signal(rng, n_dims, times, sigma, duration):
    """Smooth zero-mean noise: a few random low-frequency sinusoids, std ~sigma."""
    k = 4
    freqs = rng.uniform(0.15, 0.7, (n_dims, k))
    phases = rng.uniform(0, 2 * np.pi, (n_dims, k))
    amps = rng.uniform(0.5, 1.0, (n_dims, k))
    amps *= sigma * math.sqrt(2.0) / np.sqrt(np.sum(amps**2, axis=1, keepdims=True))
    sig = np.sum(amps[None] * np.sin(2 * np.pi * freqs[None] * times[:, None, None] + phases[None]), axis=2)
    # fade in/out so consecutive segments join without jumps
    ramp = 0.25
    env = np.clip(np.minimum(times, duration - times) / ramp, 0.0, 1.0)
    return sig * env[:, None]


def body_motion(label: ActionLabel, t, cadence_hz: float, params: GaitParams, rng: np.random.Generator,
                duration: float) -> np.ndarray:
    """Joint positions in body coordinates at segment-relative times ``t``.

    Returns (T, 17, 3). Stepping motions start and end every half cycle with
    both feet down, so segments that last a whole number of half cycles join
    continuously.
    """
    t = np.asarray(t, dtype=np.float64)
    T = len(t)
    pose = np.broadcast_to(REST_POSE * params.scale, (T, NUM_JOINTS, 3)).copy()
    phi = 2 * np.pi * cadence_hz * t
    s = np.sin(phi)
    up = np.maximum(0.0, s)
    down = np.maximum(0.0, -s)
    A = params.lift * params.scale

    if label == ActionLabel.StandStill:
        sw = _sway_signal(rng, 6, t, params.sway, duration)
        # ease the sway in so the body does not jump when it comes to rest
        ramp = np.clip(t / SWAY_RAMP_S, 0.0, 1.0)
        sw = sw * (ramp * ramp * (3.0 - 2.0 * ramp))[:, None]
        height = pose[..., 2] / (1.6 * params.scale)
        pose[..., 0] += sw[:, 0:1] * height
        pose[..., 1] += sw[:, 1:2] * height
        # small idle arm and head movements
        pose[:, [9, 10], 0] += sw[:, 2:4] * 1.5
        pose[:, [7, 8], 0] += sw[:, 2:4] * 0.7
        pose[:, 0:5, 1] += sw[:, 4:5]
        pose[:, [9, 10], 2] += sw[:, 5:6] * 0.5
    elif label == ActionLabel.StepForward:
        for (knee, ankle), h in ((_LEG_L, A * up), (_LEG_R, A * down)):
            pose[:, knee, 0] += 0.9 * h
            pose[:, knee, 2] += 0.6 * h
            pose[:, ankle, 0] += 0.35 * h
            pose[:, ankle, 2] += 0.9 * h
        swing = params.arm_swing * params.scale * s
        for (elbow, wrist), sign in ((_ARM_L, -1.0), (_ARM_R, 1.0)):
            pose[:, wrist, 0] += sign * swing
            pose[:, elbow, 0] += 0.5 * sign * swing
            pose[:, wrist, 2] += 0.2 * np.abs(swing)
    else:
        side = 1.0 if label == ActionLabel.StepLeft else -1.0
        lead, trail = (_LEG_L, _LEG_R) if side > 0 else (_LEG_R, _LEG_L)
        h_lead = A * up
        h_trail = 0.5 * A * down
        pose[:, lead[0], 1] += side * 0.5 * h_lead
        pose[:, lead[0], 2] += 0.6 * h_lead
        pose[:, lead[1], 1] += side * 0.7 * h_lead
        pose[:, lead[1], 2] += 0.8 * h_lead
        pose[:, trail[0], 1] += side * 0.3 * h_trail
        pose[:, trail[0], 2] += 0.6 * h_trail
        pose[:, trail[1], 1] += side * 0.4 * h_trail
        pose[:, trail[1], 2] += 0.8 * h_trail
        # weight moves over the stance leg while the lead leg is up
        shift = -side * params.shift * params.scale * s
        pose[:, _UPPER, 1] += shift[:, None]
        pose[:, [11, 12], 1] += 0.5 * shift[:, None]
        # lead arm lifts out for balance
        lead_wrist = 9 if side > 0 else 10
        pose[:, lead_wrist, 1] += side * 0.4 * h_lead
        pose[:, lead_wrist, 2] += 0.3 * h_lead
    return pose


def to_world(body, yaw: float, root) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    R = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    return body @ R.T + np.array([root[0], root[1], 0.0])


def generate_gait(
    label: ActionLabel,
    duration_s: float,
    cadence_hz: float = 1.0,
    seed: int = 0,
    *,
    yaw: float = 0.0,
    root=(0.0, 0.0),
    person_id: int = 0,
    t0: float = 0.0,
    params: GaitParams | None = None,
) -> list[SkeletonFrame3D]:
    """Ground-truth skeleton frames at 30 Hz for one in-place action."""
    if not duration_s > 0:
        raise BadParams(f"duration must be positive, got {duration_s}")
    if not 0.5 <= cadence_hz <= 3.0:
        raise BadParams(f"cadence {cadence_hz} Hz outside [0.5, 3]")
    rng = np.random.default_rng(seed)
    params = params or GaitParams()
    n = int(round(duration_s * FPS))
    t = np.arange(n) / FPS
    joints = to_world(body_motion(ActionLabel(label), t, cadence_hz, params, rng, duration_s), yaw, root)
    return [SkeletonFrame3D(person_id, t0 + t[k], joints[k]) for k in range(n)]


# ---------------------------------------------------------------------------
# scene scripts


@dataclass(frozen=True)
class Segment:
    start: float
    duration: float
    person_id: int
    label: ActionLabel
    yaw: float = 0.0
    cadence_hz: float = 1.0
    root: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if not self.duration > 0:
            raise BadParams("segment duration must be positive")
        object.__setattr__(self, "label", ActionLabel(self.label))

    @property
    def end(self) -> float:
        return self.start + self.duration


@dataclass(frozen=True)
class Occlusion:
    """Hides a person (or some joints) from a camera over ``[t_start, t_end)``.

    ``camera_id`` / ``person_id`` of None match everything; ``joints`` of None
    hides the whole person (no detection at all).
    """

    t_start: float
    t_end: float
    camera_id: int | None = None
    person_id: int | None = None
    joints: tuple[int, ...] | None = None

    def covers(self, t: float, camera_id: int, person_id: int) -> bool:
        return (
            self.t_start <= t + 1e-9 < self.t_end
            and (self.camera_id is None or self.camera_id == camera_id)
            and (self.person_id is None or self.person_id == person_id)
        )


@dataclass(frozen=True)
class NoiseModel:
    pixel_sigma: float = 0.0
    miss_prob: float = 0.0
    clutter_rate: float = 0.0  # expected spurious detections per camera-frame
    occlusions: tuple[Occlusion, ...] = ()

    def __post_init__(self):
        if self.pixel_sigma < 0 or not 0 <= self.miss_prob <= 1 or self.clutter_rate < 0:
            raise BadParams("invalid noise model")


@dataclass(frozen=True)
class SceneScript:
    segments: tuple[Segment, ...]
    noise: NoiseModel = NoiseModel()
    seed: int = 0

    def __post_init__(self):
        by_person: dict[int, list[Segment]] = {}
        for s in self.segments:
            by_person.setdefault(s.person_id, []).append(s)
        for segs in by_person.values():
            segs.sort(key=lambda s: s.start)
            for a, b in zip(segs, segs[1:]):
                if b.start < a.end - 1e-9:
                    raise BadParams(f"overlapping segments for person {a.person_id}")

    @property
    def duration(self) -> float:
        return max((s.end for s in self.segments), default=0.0)

    @property
    def person_ids(self) -> list[int]:
        return sorted({s.person_id for s in self.segments})

    def label_at(self, person_id: int, t: float) -> ActionLabel | None:
        for s in self.segments:
            if s.person_id == person_id and s.start - 1e-9 <= t < s.end - 1e-9:
                return s.label
        return None

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "noise": {
                "pixel_sigma": self.noise.pixel_sigma,
                "miss_prob": self.noise.miss_prob,
                "clutter_rate": self.noise.clutter_rate,
                "occlusions": [asdict(o) for o in self.noise.occlusions],
            },
            "segments": [
                {**asdict(s), "label": ActionLabel(s.label).name, "root": list(s.root)} for s in self.segments
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SceneScript":
        nz = d.get("noise", {})
        occ = tuple(
            Occlusion(o["t_start"], o["t_end"], o.get("camera_id"), o.get("person_id"),
                      None if o.get("joints") is None else tuple(o["joints"]))
            for o in nz.get("occlusions", [])
        )
        noise = NoiseModel(nz.get("pixel_sigma", 0.0), nz.get("miss_prob", 0.0), nz.get("clutter_rate", 0.0), occ)
        segs = []
        for s in d["segments"]:
            label = s["label"]
            label = ActionLabel[label] if isinstance(label, str) else ActionLabel(label)
            segs.append(Segment(float(s["start"]), float(s["duration"]), int(s.get("person_id", 0)), label,
                                float(s.get("yaw", 0.0)), float(s.get("cadence_hz", 1.0)),
                                tuple(s.get("root", (0.0, 0.0)))))
        return cls(tuple(segs), noise, int(d.get("seed", 0)))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "SceneScript":
        return cls.from_dict(json.loads(Path(path).read_text()))


def default_scenario(noise: NoiseModel | None = None, seed: int = 0, yaw: float = 0.0) -> SceneScript:
    """Still 2 s, forward 4 s, left 2 s, still 2 s for one person at the centre."""
    plan = [(ActionLabel.StandStill, 2.0), (ActionLabel.StepForward, 4.0),
            (ActionLabel.StepLeft, 2.0), (ActionLabel.StandStill, 2.0)]
    segs, t = [], 0.0
    for label, d in plan:
        segs.append(Segment(t, d, 0, label, yaw))
        t += d
    return SceneScript(tuple(segs), noise or NoiseModel(), seed)


def render_person(segments, times, seed: int, person_id: int, params: GaitParams | None = None) -> np.ndarray:
    """World joints (T, 17, 3) for one person; NaN outside every segment.

    Gaps between segments are not filled.
    """
    times = np.asarray(times, dtype=np.float64)
    out = np.full((len(times), NUM_JOINTS, 3), np.nan)
    params = params or GaitParams()
    for k, seg in enumerate(sorted((s for s in segments if s.person_id == person_id), key=lambda s: s.start)):
        mask = (times >= seg.start - 1e-9) & (times < seg.end - 1e-9)
        if not mask.any():
            continue
        rng = np.random.default_rng([seed, person_id, k])
        body = body_motion(seg.label, times[mask] - seg.start, seg.cadence_hz, params, rng, seg.duration)
        out[mask] = to_world(body, seg.yaw, seg.root)
    return out


def render_script(script: SceneScript, fps: float = FPS) -> tuple[np.ndarray, dict[int, np.ndarray]]:
    """Frame times and per-person joint arrays for the whole script."""
    n = int(round(script.duration * fps))
    times = np.arange(n) / fps
    return times, {pid: render_person(script.segments, times, script.seed, pid) for pid in script.person_ids}


# ---------------------------------------------------------------------------
# camera observations


@dataclass
class Detection2D:
    camera_id: int
    timestamp: float
    frame_index: int
    bbox: np.ndarray  # x, y, w, h
    keypoints: np.ndarray  # (17, 2), NaN where missing
    confidence: np.ndarray  # (17,)
    missing: np.ndarray  # (17,) bool
    gt_person_id: int = -1  # evaluation only; -1 for clutter

    @property
    def xyxy(self) -> np.ndarray:
        x, y, w, h = self.bbox
        return np.array([x, y, x + w, y + h])


def camera_rng(seed: int, frame_index: int, camera_id: int) -> np.random.Generator:
    """Independent stream per (frame, camera); order of evaluation is irrelevant."""
    return np.random.default_rng([int(seed) & 0xFFFFFFFF, int(frame_index), int(camera_id)])


def observe_joints(joints, camera: CameraModel, sigma: float, rng: np.random.Generator):
    """Project (..., 17, 3) joints; returns noisy uv, visibility mask.

    A joint is visible when finite, in front of the camera and inside the image.
    """
    joints = np.asarray(joints, dtype=np.float64)
    shape = joints.shape[:-1]
    flat = joints.reshape(-1, 3)
    finite = np.all(np.isfinite(flat), axis=1)
    uv = np.full((len(flat), 2), np.nan)
    z = np.full(len(flat), -1.0)
    if finite.any():
        uv[finite], z[finite] = project_points(camera, flat[finite])
    vis = finite & (z > 1e-9)
    vis &= camera.in_image(np.nan_to_num(uv, nan=-1.0))
    if sigma > 0:
        uv = uv + rng.normal(0.0, sigma, uv.shape)
    uv[~vis] = np.nan
    return uv.reshape(*shape, 2), vis.reshape(shape)


def _bbox(points) -> np.ndarray:
    lo = points.min(axis=0)
    hi = points.max(axis=0)
    pad = 0.1 * (hi - lo)
    lo = lo - pad
    hi = hi + pad
    return np.array([lo[0], lo[1], max(hi[0] - lo[0], 1.0), max(hi[1] - lo[1], 1.0)])


def observe(frames, cameras, noise: NoiseModel, seed: int, frame_index: int | None = None) -> list[Detection2D]:
    """Per-camera detections of every person in ``frames`` (same timestamp)."""
    if isinstance(frames, SkeletonFrame3D):
        frames = [frames]
    frames = list(frames)
    if not frames:
        return []
    t = frames[0].timestamp
    if frame_index is None:
        frame_index = int(round(t * FPS))
    out = []
    for cam in cameras:
        rng = camera_rng(seed, frame_index, cam.id)
        for fr in frames:
            joints = np.where(fr.valid[:, None], fr.joints, np.nan)
            # draw noise for every joint so the stream does not depend on visibility
            uv, vis = observe_joints(joints, cam, noise.pixel_sigma, rng)
            miss = rng.random() < noise.miss_prob
            conf_draw = rng.uniform(0.7, 1.0, NUM_JOINTS)
            hidden = False
            for occ in noise.occlusions:
                if occ.covers(t, cam.id, fr.person_id):
                    if occ.joints is None:
                        hidden = True
                    else:
                        vis[list(occ.joints)] = False
            if hidden or miss or vis.sum() < 2:
                continue
            uv[~vis] = np.nan
            conf = np.where(vis, conf_draw, 0.0)
            out.append(Detection2D(cam.id, t, frame_index, _bbox(uv[vis]), uv, conf, ~vis, fr.person_id))
        n_clutter = rng.poisson(noise.clutter_rate) if noise.clutter_rate > 0 else 0
        w_img, h_img = cam.image_size
        for _ in range(n_clutter):
            w, h = rng.uniform(40, 250), rng.uniform(60, 400)
            x, y = rng.uniform(0, w_img - w), rng.uniform(0, h_img - h)
            kp = np.column_stack([rng.uniform(x, x + w, NUM_JOINTS), rng.uniform(y, y + h, NUM_JOINTS)])
            conf = rng.uniform(0.05, 0.35, NUM_JOINTS)
            out.append(Detection2D(cam.id, t, frame_index, np.array([x, y, w, h]), kp, conf,
                                   np.zeros(NUM_JOINTS, dtype=bool), -1))
    return out


# ---------------------------------------------------------------------------
# datasets


@dataclass(frozen=True)
class SampleSpec:
    """One dataset clip: an optional lead-in action followed by the labelled one."""

    label: ActionLabel
    action_frames: int
    cadence_hz: float
    yaw: float
    root: tuple[float, float]
    person_id: int
    lead_label: ActionLabel | None = None
    lead_halfcycles: int = 0
    lead_cadence_hz: float = 1.0
    params: GaitParams = field(default_factory=GaitParams)
    seed: int = 0

    @property
    def lead_duration(self) -> float:
        if self.lead_label is None:
            return 0.0
        return self.lead_halfcycles / (2.0 * self.lead_cadence_hz)


@dataclass
class Sample:
    label: ActionLabel
    person_id: int
    joints: np.ndarray  # (T, 17, 3), NaN where invalid
    onset: int = 0  # first frame of the labelled action
    lead_label: int = -1
    split: int = 0  # 0 train, 1 holdout

    @property
    def frame_count(self) -> int:
        return len(self.joints)

    @property
    def action_frames(self) -> int:
        return self.frame_count - self.onset


@dataclass
class Dataset:
    samples: list[Sample]
    seed: int = 0

    def split(self, which: str) -> list[Sample]:
        code = {"train": 0, "holdout": 1}[which]
        return [s for s in self.samples if s.split == code]

    def class_counts(self) -> dict[ActionLabel, int]:
        counts = {lab: 0 for lab in ActionLabel}
        for s in self.samples:
            counts[ActionLabel(s.label)] += 1
        return counts


def default_script_set(
    n_samples: int = 2000,
    seed: int = 0,
    transition_fraction: float = 1.0,
    min_frames: int = 32,
    max_frames: int = 60,
    min_action: int = 6,
    min_lead: int = 31,
) -> list[SampleSpec]:
    """Balanced clip specs: ``n_samples // 4`` per class, randomised body and gait.

    With ``transition_fraction`` > 0 that share of clips is preceded by a
    different action lasting a whole number of half cycles (so the motion is
    continuous at the onset). The lead-in covers at least ``min_lead`` frames
    where the length budget allows, so classifier windows can straddle the
    onset, and at least ``min_action`` frames of the labelled action follow.
    """
    if n_samples % len(ActionLabel):
        raise BadParams("n_samples must be a multiple of the number of classes")
    rng = np.random.default_rng(seed)
    per_class = n_samples // len(ActionLabel)
    specs = []
    pid = 0
    for label in ActionLabel:
        for _ in range(per_class):
            n = int(rng.integers(min_frames, max_frames + 1))
            cad = float(rng.uniform(0.8, 1.6))
            yaw = float(rng.uniform(-np.pi, np.pi))
            root = (float(rng.uniform(-1.0, 1.0)), float(rng.uniform(-1.0, 1.0)))
            params = GaitParams.sample(rng)
            lead, halfc, lead_cad = None, 0, 1.0
            if rng.random() < transition_fraction:
                others = [lab for lab in ActionLabel if lab != label]
                lead = others[int(rng.integers(len(others)))]
                lead_cad = float(rng.uniform(0.8, 1.6))
                extra = int(rng.integers(0, 2))

                def lead_frames(k):
                    return math.ceil(k / (2.0 * lead_cad) * FPS - 1e-9)

                # long enough that a full window can end right after the onset,
                # optionally one half cycle more; the clip stays within max_frames
                halfc = 1
                while lead_frames(halfc) < min_lead:
                    halfc += 1
                halfc += extra
                while halfc > 1 and lead_frames(halfc) > max_frames - min_action:
                    halfc -= 1
                n = min(max(n, lead_frames(halfc) + min_action), max_frames)
            onset = math.ceil(halfc / (2.0 * lead_cad) * FPS - 1e-9) if lead is not None else 0
            specs.append(SampleSpec(label, n - onset, cad, yaw, root, pid, lead, halfc, lead_cad, params,
                                    int(rng.integers(2**31))))
            pid += 1
    return specs


def render_sample(spec: SampleSpec, fps: float = FPS) -> tuple[np.ndarray, int]:
    """Ground-truth joints for a clip and the onset frame index."""
    segs = []
    t_on = spec.lead_duration
    if spec.lead_label is not None:
        segs.append(Segment(0.0, t_on, spec.person_id, spec.lead_label, spec.yaw, spec.lead_cadence_hz, spec.root))
    onset = int(math.ceil(t_on * fps - 1e-9))
    n_total = onset + spec.action_frames
    segs.append(Segment(t_on, n_total / fps - t_on + 1.0 / fps, spec.person_id, spec.label, spec.yaw,
                        spec.cadence_hz, spec.root))
    times = np.arange(n_total) / fps
    return render_person(segs, times, spec.seed, spec.person_id, spec.params), onset


def build_dataset(
    script_set,
    cameras=None,
    noise: NoiseModel | None = None,
    seed: int = 0,
    holdout: float = 0.2,
    reconstruct: bool = True,
) -> Dataset:
    """Render, observe and re-triangulate every clip; stratified train/holdout split.

    With ``reconstruct`` the stored joints come from noisy multi-view
    triangulation (what the live pipeline sees); otherwise ground truth.
    """
    script_set = list(script_set)
    if not script_set:
        raise DegenerateDataset("empty script set")
    noise = noise or NoiseModel(pixel_sigma=0.5)
    if reconstruct and cameras is None:
        raise BadParams("reconstruction needs cameras")
    from .reconstruction import triangulate_joints

    samples = []
    for i, spec in enumerate(script_set):
        gt, onset = render_sample(spec)
        joints = gt
        if reconstruct:
            T = len(gt)
            uv = np.empty((T, NUM_JOINTS, len(cameras), 2))
            conf = np.zeros((T, NUM_JOINTS, len(cameras)))
            for v, cam in enumerate(cameras):
                rng = np.random.default_rng([seed, i, cam.id])
                uv[:, :, v], vis = observe_joints(gt, cam, noise.pixel_sigma, rng)
                conf[:, :, v] = np.where(vis, 1.0, 0.0)
            X, valid, _ = triangulate_joints(cameras, uv.reshape(-1, len(cameras), 2), conf.reshape(-1, len(cameras)))
            joints = np.where(valid[:, None], X, np.nan).reshape(T, NUM_JOINTS, 3)
        samples.append(Sample(spec.label, spec.person_id, joints, onset,
                              -1 if spec.lead_label is None else int(spec.lead_label)))
    rng = np.random.default_rng(seed)
    for label in ActionLabel:
        idx = [i for i, s in enumerate(samples) if s.label == label]
        idx = rng.permutation(idx)
        n_hold = int(round(holdout * len(idx)))
        for i in idx[:n_hold]:
            samples[i].split = 1
    return Dataset(samples, seed)


# dataset file: one sample per line, whitespace separated
#   label person_id frame_count x y z (frame_count * 17 triples, 'nan' if invalid) onset lead_label split
# optionally gzip-compressed (path ending in .gz).

_HEADER = "# label person_id frame_count coords[frame_count*17*3] onset lead_label split"


def _open(path, mode):
    path = Path(path)
    if path.suffix == ".gz":
        return _GzipText(path) if "w" in mode else gzip.open(path, "rt")
    return open(path, mode)


class _GzipText:
    """Text writer with a fixed gzip header (mtime=0) so output bytes are reproducible."""

    def __init__(self, path):
        self._raw = open(path, "wb")
        self._gz = gzip.GzipFile(filename="", mode="wb", fileobj=self._raw, mtime=0)

    def write(self, s):
        self._gz.write(s.encode())

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self._gz.close()
        self._raw.close()


def save_dataset(dataset: Dataset, path, decimals: int = 5) -> None:
    fmt = f"%.{decimals}f"
    with _open(path, "w") as f:
        f.write(_HEADER + "\n")
        f.write(f"# seed {dataset.seed}\n")
        for s in dataset.samples:
            coords = " ".join("nan" if not np.isfinite(v) else fmt % v for v in s.joints.reshape(-1))
            f.write(f"{int(s.label)} {s.person_id} {s.frame_count} {coords} {s.onset} {s.lead_label} {s.split}\n")


def load_dataset(path) -> Dataset:
    samples = []
    seed = 0
    with _open(path, "r") as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                parts = line[1:].split()
                if len(parts) == 2 and parts[0] == "seed":
                    seed = int(parts[1])
                continue
            fields = line.split()
            label, pid, n = int(fields[0]), int(fields[1]), int(fields[2])
            m = n * NUM_JOINTS * 3
            if len(fields) != 3 + m + 3:
                raise ValueError(f"{path}:{lineno}: expected {6 + m} fields, got {len(fields)}")
            joints = np.array(fields[3:3 + m], dtype=np.float64).reshape(n, NUM_JOINTS, 3)
            onset, lead, split = (int(x) for x in fields[3 + m:])
            samples.append(Sample(ActionLabel(label), pid, joints, onset, lead, split))
    return Dataset(samples, seed)
