"""Action recognition on 3D skeleton windows.

Pipeline per window: root-centre and yaw-align (``normalize``), build a
dual-rate feature vector (``extract_features``: a few pose snapshots plus
per-frame joint speeds), score it with a softmax classifier, smooth the
probabilities over time (``smooth_ema``) and emit a label only after a
confident, persistent run (``decide``). Body yaw comes from the shoulder
(or hip) line with the nose resolving front/back.
"""
from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import BadAlpha, DegenerateDataset, DimensionMismatch, InsufficientJoints, MissingRootJoints
from .skeleton import (
    FPS,
    L_HIP,
    L_SHOULDER,
    NOSE,
    NUM_JOINTS,
    R_HIP,
    R_SHOULDER,
    ActionLabel,
    SkeletonFrame3D,
)

WINDOW = 32
SLOW_FRAMES = 4
ALPHA = 0.3
TAU = 0.6
PERSIST = 5
N_CLASSES = len(ActionLabel)
MODEL_VERSION = 1


# ---------------------------------------------------------------------------
# orientation


def _yaw_batch(joints, valid):
    """Yaw for (..., 17, 3) joints; NaN where neither shoulders nor hips are usable."""
    sh_ok = valid[..., L_SHOULDER] & valid[..., R_SHOULDER]
    hp_ok = valid[..., L_HIP] & valid[..., R_HIP]
    d_sh = joints[..., L_SHOULDER, :2] - joints[..., R_SHOULDER, :2]
    d_hp = joints[..., L_HIP, :2] - joints[..., R_HIP, :2]
    d = np.where(sh_ok[..., None], d_sh, d_hp)
    # horizontal normal of the left-minus-right segment: (dx, dy, 0) x z = (dy, -dx, 0)
    n = np.stack([d[..., 1], -d[..., 0]], axis=-1)
    mid = np.where(sh_ok[..., None],
                   0.5 * (joints[..., L_SHOULDER, :2] + joints[..., R_SHOULDER, :2]),
                   0.5 * (joints[..., L_HIP, :2] + joints[..., R_HIP, :2]))
    nose_off = joints[..., NOSE, :2] - mid
    flip = valid[..., NOSE] & (np.sum(np.nan_to_num(nose_off) * n, axis=-1) < 0)
    n = np.where(flip[..., None], -n, n)
    yaw = np.arctan2(n[..., 1], n[..., 0])
    yaw = np.where(yaw <= -np.pi, np.pi, yaw)
    ok = (sh_ok | hp_ok) & (np.hypot(n[..., 0], n[..., 1]) > 0)
    return np.where(ok, yaw, np.nan)


def estimate_orientation(frame: SkeletonFrame3D) -> float:
    """Facing direction about +Z in (-pi, pi]; 0 means facing +X with the left shoulder toward +Y."""
    yaw = float(_yaw_batch(frame.joints, frame.valid))
    if math.isnan(yaw):
        raise InsufficientJoints("need both shoulders or both hips")
    return yaw


class OrientationSmoother:
    """EMA on the unit circle so the estimate never jumps at the +-pi seam."""

    def __init__(self, alpha: float = ALPHA):
        if not 0.0 < alpha <= 1.0:
            raise BadAlpha(alpha)
        self.alpha = alpha
        self.state: np.ndarray | None = None

    def update(self, yaw: float) -> float:
        v = np.array([math.cos(yaw), math.sin(yaw)])
        self.state = v if self.state is None else (1 - self.alpha) * self.state + self.alpha * v
        return math.atan2(self.state[1], self.state[0])

    @property
    def value(self) -> float | None:
        return None if self.state is None else math.atan2(self.state[1], self.state[0])


# ---------------------------------------------------------------------------
# normalisation and features


@dataclass
class NormalizedWindow:
    joints: np.ndarray  # (W, 17, 3); invalid joints are 0
    valid: np.ndarray  # (W, 17)
    yaw: float  # yaw removed from the input


def _as_arrays(window):
    if hasattr(window, "joints") and hasattr(window, "valid") and not isinstance(window, SkeletonFrame3D):
        return np.asarray(window.joints, dtype=np.float64), np.asarray(window.valid, dtype=bool)
    if isinstance(window, tuple) and len(window) == 2:
        return np.asarray(window[0], dtype=np.float64), np.asarray(window[1], dtype=bool)
    frames = list(window)
    if frames and isinstance(frames[0], SkeletonFrame3D):
        return np.stack([f.joints for f in frames]), np.stack([f.valid for f in frames])
    j = np.asarray(window, dtype=np.float64)
    return j, np.all(np.isfinite(j), axis=-1)


def normalize_batch(joints, valid):
    """Vectorised ``normalize`` for (B, W, 17, 3). Returns joints, valid, yaw, ok.

    ``ok`` is False for windows whose middle frame lacks both hips.
    """
    joints = np.asarray(joints, dtype=np.float64)
    valid = np.asarray(valid, dtype=bool) & np.all(np.isfinite(joints), axis=-1)
    B, W = joints.shape[:2]
    mid = W // 2
    ok = valid[:, mid, L_HIP] & valid[:, mid, R_HIP]
    hips_ok = valid[:, :, L_HIP] & valid[:, :, R_HIP]  # (B, W)
    root = 0.5 * (joints[:, :, L_HIP, :2] + joints[:, :, R_HIP, :2])  # (B, W, 2)
    # frames without hips borrow the root of the nearest frame that has them
    if not hips_ok.all():
        for b in np.flatnonzero(~hips_ok.all(axis=1) & ok):
            good = np.flatnonzero(hips_ok[b])
            for k in np.flatnonzero(~hips_ok[b]):
                root[b, k] = root[b, good[np.argmin(np.abs(good - k))]]
    yaw = _yaw_batch(joints[:, mid], valid[:, mid])
    ok &= np.isfinite(yaw)
    yaw = np.where(ok, yaw, 0.0)
    c, s = np.cos(yaw), np.sin(yaw)
    x = joints[..., 0] - root[:, :, None, 0]
    y = joints[..., 1] - root[:, :, None, 1]
    cb, sb = c[:, None, None], s[:, None, None]
    out = np.stack([cb * x + sb * y, -sb * x + cb * y, joints[..., 2]], axis=-1)
    out = np.where(valid[..., None], out, 0.0)
    return out, valid, yaw, ok


def normalize(window) -> NormalizedWindow:
    """Remove horizontal position (per frame) and the middle frame's yaw."""
    joints, valid = _as_arrays(window)
    out, valid, yaw, ok = normalize_batch(joints[None], valid[None])
    if not ok[0]:
        raise MissingRootJoints("hips (or an orientation pair) missing in the middle frame")
    return NormalizedWindow(out[0], valid[0], float(yaw[0]))


def slow_indices(W: int = WINDOW, S: int = SLOW_FRAMES) -> np.ndarray:
    """Snapshot frames at stride W/S, aligned so the newest frame is included."""
    stride = W // S
    return np.arange(W - 1 - stride * (S - 1), W, stride)


def feature_dim(W: int = WINDOW, S: int = SLOW_FRAMES) -> int:
    return S * NUM_JOINTS * 3 + (W - 1) * NUM_JOINTS * 2


def features_batch(joints, valid, W: int = WINDOW, S: int = SLOW_FRAMES, fps: float = FPS) -> np.ndarray:
    """Layout: ``[slow (S, 17, xyz) | speed (W-1, 17) | vertical velocity (W-1, 17)]``, row-major.

    Speeds are m/s from consecutive frames; a velocity is 0 unless both frames
    have the joint.
    """
    B = joints.shape[0]
    if joints.shape[1] != W:
        raise DimensionMismatch(f"window length {joints.shape[1]} != {W}")
    slow = joints[:, slow_indices(W, S)].reshape(B, -1)
    both = valid[:, 1:] & valid[:, :-1]
    d = (joints[:, 1:] - joints[:, :-1]) * fps
    d = np.where(both[..., None], d, 0.0)
    speed = np.sqrt(np.sum(d * d, axis=-1)).reshape(B, -1)
    vz = d[..., 2].reshape(B, -1)
    return np.concatenate([slow, speed, vz], axis=1)


def extract_features(n: NormalizedWindow, W: int = WINDOW, S: int = SLOW_FRAMES) -> np.ndarray:
    return features_batch(n.joints[None], n.valid[None], W, S)[0]


# ---------------------------------------------------------------------------
# classifier


def softmax(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class ClassifierModel:
    """Standardisation + optional tanh hidden layer + softmax output.

    Without a hidden layer ``weights`` is (D, 4); with one, ``hidden_weights``
    is (D, H) and ``weights`` is (H, 4).
    """

    mean: np.ndarray
    std: np.ndarray
    weights: np.ndarray
    bias: np.ndarray
    window: int = WINDOW
    slow_frames: int = SLOW_FRAMES
    meta: dict = field(default_factory=dict)
    hidden_weights: np.ndarray | None = None
    hidden_bias: np.ndarray | None = None

    @property
    def dim(self) -> int:
        return len(self.mean)

    @property
    def hidden(self) -> int:
        return 0 if self.hidden_weights is None else self.hidden_weights.shape[1]

    @classmethod
    def zeros(cls, dim: int = feature_dim()) -> "ClassifierModel":
        return cls(np.zeros(dim), np.ones(dim), np.zeros((dim, N_CLASSES)), np.zeros(N_CLASSES))

    @property
    def params(self) -> list[np.ndarray]:
        if self.hidden:
            return [self.hidden_weights, self.hidden_bias, self.weights, self.bias]
        return [self.weights, self.bias]

    def logits(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.shape[-1] != self.dim:
            raise DimensionMismatch(f"feature dimension {X.shape[-1]} != model {self.dim}")
        return forward(self.params, (X - self.mean) / self.std)[-1]

    def to_dict(self) -> dict:
        d = {
            "format": "caveloco-classifier",
            "version": MODEL_VERSION,
            "config": {"W": self.window, "S": self.slow_frames, "D": self.dim, "H": self.hidden,
                       "classes": [a.name for a in ActionLabel]},
            "mean": self.mean.tolist(),
            "std": self.std.tolist(),
            "weights": self.weights.tolist(),
            "bias": self.bias.tolist(),
            "meta": self.meta,
        }
        if self.hidden:
            d["hidden_weights"] = self.hidden_weights.tolist()
            d["hidden_bias"] = self.hidden_bias.tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ClassifierModel":
        if d.get("format") != "caveloco-classifier" or d.get("version") != MODEL_VERSION:
            raise ValueError("not a caveloco classifier model (or unsupported version)")
        cfg = d["config"]
        H = cfg.get("H", 0)
        hw = hb = None
        if H:
            hw = np.array(d["hidden_weights"]).reshape(cfg["D"], H)
            hb = np.array(d["hidden_bias"]).reshape(H)
        m = cls(np.array(d["mean"]), np.array(d["std"]),
                np.array(d["weights"]).reshape(H or cfg["D"], N_CLASSES), np.array(d["bias"]).reshape(N_CLASSES),
                cfg["W"], cfg["S"], d.get("meta", {}), hw, hb)
        if (m.dim != cfg["D"] or cfg["D"] != feature_dim(cfg["W"], cfg["S"]) or not np.all(m.std > 0)
                or not all(np.all(np.isfinite(p)) for p in m.params)):
            raise ValueError("inconsistent model file")
        return m

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "ClassifierModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


def classify(model: ClassifierModel, features) -> np.ndarray:
    """Class probabilities (sum to 1) for one feature vector or a batch."""
    return softmax(model.logits(features))


def forward(params, Xs) -> list[np.ndarray]:
    """Layer activations; the last entry is the logits."""
    if len(params) == 2:
        return [Xs @ params[0] + params[1]]
    A = np.tanh(Xs @ params[0] + params[1])
    return [A, A @ params[2] + params[3]]


def loss_and_grad(params, Xs, Y, l2: float, weights=None):
    """Weighted mean cross-entropy + (l2/2)*sum|W|^2 and its gradient for every parameter.

    ``params`` is ``[W, b]`` or ``[W1, b1, W2, b2]``; Y is one-hot.
    """
    w = np.full(len(Xs), 1.0 / len(Xs)) if weights is None else np.asarray(weights) / np.sum(weights)
    acts = forward(params, Xs)
    P = softmax(acts[-1])
    mats = params[0::2]
    loss = -np.sum(w[:, None] * Y * np.log(np.clip(P, 1e-300, None))) + 0.5 * l2 * sum(np.sum(M * M) for M in mats)
    G = ((P - Y) * w[:, None]).astype(Xs.dtype, copy=False)
    if len(params) == 2:
        return loss, [Xs.T @ G + l2 * params[0], G.sum(axis=0)]
    A = acts[0]
    GA = (G @ params[2].T) * (1.0 - A * A)
    return loss, [Xs.T @ GA + l2 * params[0], GA.sum(axis=0), A.T @ G + l2 * params[2], G.sum(axis=0)]


@dataclass
class TrainReport:
    losses: list[float]
    train_accuracy: float
    holdout_accuracy: float
    confusion: np.ndarray  # rows true, cols predicted (holdout)
    seconds: float
    n_train: int
    n_holdout: int

    def to_dict(self) -> dict:
        return {
            "losses": self.losses,
            "train_accuracy": self.train_accuracy,
            "holdout_accuracy": self.holdout_accuracy,
            "confusion": self.confusion.tolist(),
            "classes": [a.name for a in ActionLabel],
            "n_train": self.n_train,
            "n_holdout": self.n_holdout,
        }

    def confusion_text(self) -> str:
        names = [a.name for a in ActionLabel]
        w = max(len(n) for n in names) + 2
        lines = [" " * w + "".join(f"{n[:11]:>12}" for n in names)]
        for i, n in enumerate(names):
            lines.append(f"{n:<{w}}" + "".join(f"{int(v):>12d}" for v in self.confusion[i]))
        return "\n".join(lines)


@dataclass(frozen=True)
class TrainParams:
    epochs: int = 300
    learning_rate: float = 0.5
    l2: float = 1e-4
    seed: int = 0
    batch_size: int | None = None  # None: full batch
    window_stride: int = 2
    onset_frames: int = 2  # windows this close after an action change ...
    onset_weight: float = 16.0  # ... count this much more in the loss
    hidden: int = 32  # tanh hidden units; 0 gives plain multinomial logistic regression
    onset_copies: int = 6  # extra jittered copies of each onset window
    jitter_m: float = 0.002  # std of the per-joint jitter added to those copies


def sample_windows(samples, W: int = WINDOW, stride: int = 2, last_only: bool = False, onset_frames: int = 0):
    """Sliding windows over each sample, labelled with the action at the window's last frame.

    Returns stacked joints (N, W, 17, 3), validity (N, W, 17), labels (N,) and
    the number of frames since the labelled action began (N,; large for clips
    without a lead-in). Windows ending exactly on an onset frame are skipped:
    no motion of the new action is visible yet. Every window ending within
    ``onset_frames`` after an onset is kept regardless of ``stride``.
    """
    J, V, y, age = [], [], [], []
    for s in samples:
        T = len(s.joints)
        if T < W:
            continue
        if last_only:
            ends = [T - 1]
        else:
            ends = set(range(T - 1, W - 2, -stride))
            if s.onset > 0:
                ends |= {e for e in range(s.onset + 1, s.onset + 1 + onset_frames) if W - 1 <= e < T}
            ends = sorted(ends)
        for e in ends:
            if e == s.onset and s.onset > 0:
                continue
            lab = int(s.label) if e >= s.onset else int(s.lead_label)
            w = s.joints[e - W + 1:e + 1]
            J.append(w)
            V.append(np.all(np.isfinite(w), axis=-1))
            y.append(lab)
            age.append(e - s.onset if (s.onset > 0 and e >= s.onset) else 10**6)
    if not J:
        return (np.zeros((0, W, NUM_JOINTS, 3)), np.zeros((0, W, NUM_JOINTS), bool), np.zeros(0, int),
                np.zeros(0, int))
    return np.stack(J), np.stack(V), np.array(y), np.array(age)


def dataset_features(samples, W: int = WINDOW, S: int = SLOW_FRAMES, stride: int = 2, last_only: bool = False,
                     onset_frames: int = 0, with_age: bool = False):
    J, V, y, age = sample_windows(samples, W, stride, last_only, onset_frames)
    if len(J) == 0:
        X = np.zeros((0, feature_dim(W, S)))
        return (X, y, age) if with_age else (X, y)
    nj, nv, _, ok = normalize_batch(J, V)
    X = features_batch(nj[ok], nv[ok], W, S)
    return (X, y[ok], age[ok]) if with_age else (X, y[ok])


def _training_features(samples, W, S, params):
    """Training windows plus jittered copies of the ones just after an action change.

    The first frames of a new action carry very little evidence, so those
    windows are both up-weighted and replicated with reconstruction-sized noise.
    """
    J, V, y, age = sample_windows(samples, W, params.window_stride, onset_frames=params.onset_frames)
    if len(J) and params.onset_copies > 0:
        rng = np.random.default_rng([params.seed, 1])
        sel = np.flatnonzero(age <= params.onset_frames)
        extra = [J[sel] + rng.normal(0.0, params.jitter_m, J[sel].shape) for _ in range(params.onset_copies)]
        J = np.concatenate([J, *extra])
        V = np.concatenate([V] + [V[sel]] * params.onset_copies)
        y = np.concatenate([y] + [y[sel]] * params.onset_copies)
        age = np.concatenate([age] + [age[sel]] * params.onset_copies)
    if len(J) == 0:
        return np.zeros((0, feature_dim(W, S))), y, age
    nj, nv, _, ok = normalize_batch(J, V)
    return features_batch(nj[ok], nv[ok], W, S), y[ok], age[ok]


def train(dataset, params: TrainParams = TrainParams(), W: int = WINDOW, S: int = SLOW_FRAMES):
    """Fit the softmax classifier. Returns ``(model, report)``.

    Holdout accuracy is measured on the trailing window of each holdout clip.
    """
    t0 = time.perf_counter()
    train_s, hold_s = dataset.split("train"), dataset.split("holdout")
    X, y, age = _training_features(train_s, W, S, params)
    if len(X) == 0 or len(np.unique(y)) < 2:
        raise DegenerateDataset("training needs at least two classes")
    mean = X.mean(axis=0)
    std = X.std(axis=0)
    std = np.where(std > 1e-8, std, 1.0)
    # single precision halves the cost of the big matrix products; the loss is still accumulated in double
    Xs = ((X - mean) / std).astype(np.float32)
    Y = np.eye(N_CLASSES, dtype=np.float32)[y]
    sw = np.where(age <= params.onset_frames, params.onset_weight, 1.0)
    rng = np.random.default_rng(params.seed)
    D = X.shape[1]
    if params.hidden:
        P = [rng.normal(0.0, 1.0 / np.sqrt(D), (D, params.hidden)), np.zeros(params.hidden),
             rng.normal(0.0, 1.0 / np.sqrt(params.hidden), (params.hidden, N_CLASSES)), np.zeros(N_CLASSES)]
    else:
        P = [rng.normal(0.0, 1e-3, (D, N_CLASSES)), np.zeros(N_CLASSES)]
    P = [p.astype(np.float32) for p in P]
    losses = []
    bs = params.batch_size or len(Xs)
    for _ in range(params.epochs):
        if bs >= len(Xs):
            # full batch: the loss at the current point comes for free with the gradient
            loss, grads = loss_and_grad(P, Xs, Y, params.l2, sw)
            losses.append(float(loss))
            for p, g in zip(P, grads):
                p -= params.learning_rate * g
            continue
        order = rng.permutation(len(Xs))
        for start in range(0, len(Xs), bs):
            idx = order[start:start + bs]
            _, grads = loss_and_grad(P, Xs[idx], Y[idx], params.l2, sw[idx])
            for p, g in zip(P, grads):
                p -= params.learning_rate * g
        losses.append(float(loss_and_grad(P, Xs, Y, params.l2, sw)[0]))
    if bs >= len(Xs):
        losses.append(float(loss_and_grad(P, Xs, Y, params.l2, sw)[0]))
    meta = {"seed": params.seed, "epochs": params.epochs, "learning_rate": params.learning_rate, "l2": params.l2,
            "hidden": params.hidden, "final_loss": losses[-1] if losses else None, "dataset_seed": dataset.seed}
    P = [p.astype(np.float64) for p in P]
    if params.hidden:
        model = ClassifierModel(mean, std, P[2], P[3], W, S, meta, P[0], P[1])
    else:
        model = ClassifierModel(mean, std, P[0], P[1], W, S, meta)
    train_acc = float(np.mean(np.argmax(model.logits(X), axis=1) == y))
    Xh, yh = dataset_features(hold_s, W, S, last_only=True)
    conf = np.zeros((N_CLASSES, N_CLASSES), dtype=int)
    hold_acc = float("nan")
    if len(Xh):
        pred = np.argmax(model.logits(Xh), axis=1)
        np.add.at(conf, (yh, pred), 1)
        hold_acc = float(np.mean(pred == yh))
    report = TrainReport(losses, train_acc, hold_acc, conf, time.perf_counter() - t0, len(X), len(Xh))
    return model, report


# ---------------------------------------------------------------------------
# temporal smoothing and decisions


def smooth_ema(state, p, alpha: float = ALPHA) -> np.ndarray:
    if not 0.0 < alpha <= 1.0:
        raise BadAlpha(f"alpha must be in (0, 1], got {alpha}")
    p = np.asarray(p, dtype=np.float64)
    if state is None:
        return p.copy()
    s = (1.0 - alpha) * np.asarray(state, dtype=np.float64) + alpha * p
    return s / s.sum()


@dataclass
class ActionDecision:
    label: ActionLabel
    probabilities: np.ndarray
    person_id: int
    timestamp: float
    yaw: float


@dataclass
class DecisionState:
    label: ActionLabel = ActionLabel.StandStill
    candidate: int = -1
    run: int = 0


def decide(smoothed, previous: DecisionState | None = None, tau: float = TAU,
           persist: int = PERSIST) -> DecisionState:
    """Hysteresis: switch only after ``persist`` consecutive frames with the same argmax >= tau."""
    prev = previous or DecisionState()
    s = np.asarray(smoothed)
    a = int(np.argmax(s))
    if s[a] >= tau:
        run = prev.run + 1 if a == prev.candidate else 1
        cand = a
    else:
        run, cand = 0, -1
    label = ActionLabel(a) if run >= persist else prev.label
    return DecisionState(label, cand, run)


class Recognizer:
    """Per-person online recogniser (one consumer per person)."""

    def __init__(self, model: ClassifierModel, person_id: int = 0, alpha: float = ALPHA, tau: float = TAU,
                 persist: int = PERSIST, yaw_alpha: float = ALPHA):
        self.model = model
        self.person_id = person_id
        self.alpha, self.tau, self.persist = alpha, tau, persist
        self.ema: np.ndarray | None = None
        self.state = DecisionState()
        self.yaw = OrientationSmoother(yaw_alpha)
        self.raw: np.ndarray | None = None

    def update(self, window, timestamp: float) -> ActionDecision:
        joints, valid = _as_arrays(window)
        try:
            yaw = float(_yaw_batch(joints[-1], valid[-1]))
            if not math.isnan(yaw):
                self.yaw.update(yaw)
        except IndexError:
            pass
        if len(joints) == self.model.window:
            nj, nv, _, ok = normalize_batch(joints[None], valid[None])
            if ok[0]:
                f = features_batch(nj, nv, self.model.window, self.model.slow_frames)[0]
                self.raw = classify(self.model, f)
                self.ema = smooth_ema(self.ema, self.raw, self.alpha)
                self.state = decide(self.ema, self.state, self.tau, self.persist)
        probs = self.ema if self.ema is not None else np.full(N_CLASSES, 1.0 / N_CLASSES)
        yaw_v = self.yaw.value
        return ActionDecision(self.state.label, probs.copy(), self.person_id, timestamp,
                              0.0 if yaw_v is None else yaw_v)


def write_report(report: TrainReport, path) -> None:
    Path(path).write_text(json.dumps(report.to_dict(), indent=1) + "\n")
