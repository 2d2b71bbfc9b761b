import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from caveloco.errors import BadAlpha, DegenerateDataset, DimensionMismatch, InsufficientJoints, MissingRootJoints
from caveloco.recognition import (
    ClassifierModel,
    DecisionState,
    OrientationSmoother,
    Recognizer,
    TrainParams,
    classify,
    decide,
    estimate_orientation,
    extract_features,
    feature_dim,
    loss_and_grad,
    normalize,
    slow_indices,
    smooth_ema,
    softmax,
    train,
)
from caveloco.scene import REST_POSE, build_dataset, default_script_set, generate_gait
from caveloco.skeleton import L_ANKLE, L_HIP, L_SHOULDER, NOSE, R_HIP, R_SHOULDER, ActionLabel, SkeletonFrame3D


def rot_z(theta):
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def walking_window(seed=0, label=ActionLabel.StepForward):
    return np.stack([f.joints for f in generate_gait(label, 32 / 30, seed=seed)[:32]])


# ---------------------------------------------------------------------------
# orientation


def test_orientation_convention():
    f = SkeletonFrame3D(0, 0.0, REST_POSE.copy(), np.ones(17, bool))
    assert estimate_orientation(f) == pytest.approx(0.0, abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.floats(-math.pi, math.pi))
def test_orientation_equivariant(theta):
    f = SkeletonFrame3D(0, 0.0, REST_POSE @ rot_z(theta).T + [0.3, -1.0, 0.0], np.ones(17, bool))
    err = math.remainder(estimate_orientation(f) - theta, 2 * math.pi)
    assert abs(err) < 1e-9


def test_orientation_nose_resolves_front():
    j = REST_POSE.copy()
    j[NOSE, 0] = -0.1  # nose behind the shoulder line: the person faces -X
    assert abs(estimate_orientation(SkeletonFrame3D(0, 0.0, j, np.ones(17, bool)))) == pytest.approx(math.pi)


def test_orientation_falls_back_to_hips_and_fails_without_pairs():
    v = np.ones(17, bool)
    v[R_SHOULDER] = False
    assert estimate_orientation(SkeletonFrame3D(0, 0.0, REST_POSE, v)) == pytest.approx(0.0, abs=1e-12)
    v[[L_HIP, R_HIP]] = False
    with pytest.raises(InsufficientJoints):
        estimate_orientation(SkeletonFrame3D(0, 0.0, REST_POSE, v))


def test_orientation_smoother_wraps():
    sm = OrientationSmoother(0.5)
    sm.update(math.pi - 0.05)
    y = sm.update(-math.pi + 0.05)
    assert abs(abs(y) - math.pi) < 1e-9
    with pytest.raises(BadAlpha):
        OrientationSmoother(0.0)


# ---------------------------------------------------------------------------
# normalisation and features


def test_normalize_fixed_point():
    w = np.broadcast_to(REST_POSE, (32, 17, 3)).copy()
    n = normalize(w)
    assert np.max(np.abs(n.joints - w)) < 1e-12
    assert n.yaw == pytest.approx(0.0, abs=1e-12)


def test_normalize_invariant_to_yaw_and_shift():
    w = walking_window()
    moved = w @ rot_z(math.pi / 2).T + [1.0, 0.0, 0.0]
    a, b = normalize(w), normalize(moved)
    assert np.max(np.abs(a.joints - b.joints)) < 1e-9
    mid = a.joints[16]
    hips = 0.5 * (a.joints[:, L_HIP, :2] + a.joints[:, R_HIP, :2])
    assert np.max(np.abs(hips)) < 1e-9
    sh = mid[L_SHOULDER, :2] - mid[R_SHOULDER, :2]
    assert abs(sh[0]) < 1e-9 and sh[1] > 0


def test_normalize_missing_hips():
    w = walking_window()
    w[16, L_HIP] = np.nan
    with pytest.raises(MissingRootJoints):
        normalize(w)


@settings(max_examples=25, deadline=None)
@given(st.floats(-math.pi, math.pi), st.floats(-3, 3), st.floats(-3, 3))
def test_features_rigid_invariance(theta, dx, dy):
    w = walking_window(1, ActionLabel.StepLeft)
    moved = w @ rot_z(theta).T + [dx, dy, 0.0]
    fa = extract_features(normalize(w))
    fb = extract_features(normalize(moved))
    assert np.max(np.abs(fa - fb)) < 1e-9


def test_feature_dimension_and_layout():
    assert feature_dim() == 4 * 17 * 3 + 31 * 17 * 2 == 1258
    assert list(slow_indices()) == [7, 15, 23, 31]
    w = np.broadcast_to(REST_POSE, (32, 17, 3)).copy()
    f = extract_features(normalize(w))
    assert f.shape == (1258,)
    assert np.all(f[4 * 17 * 3:] == 0.0)


def test_vertical_velocity_sinusoid():
    a, freq = 0.05, 1.0
    t = np.arange(32) / 30
    w = np.broadcast_to(REST_POSE, (32, 17, 3)).copy()
    w[:, L_ANKLE, 2] += a * np.sin(2 * np.pi * freq * t)
    f = extract_features(normalize(w))
    vz = f[4 * 17 * 3 + 31 * 17:].reshape(31, 17)
    assert np.max(np.abs(vz[:, L_ANKLE])) == pytest.approx(2 * np.pi * freq * a, rel=0.05)


def test_invalid_joints_give_zero_features():
    w = walking_window()
    w[:, L_ANKLE] = np.nan
    f = extract_features(normalize(w))
    assert np.all(np.isfinite(f))
    speed = f[4 * 17 * 3:4 * 17 * 3 + 31 * 17].reshape(31, 17)
    assert np.all(speed[:, L_ANKLE] == 0.0)


# ---------------------------------------------------------------------------
# classifier


def test_softmax_examples():
    assert np.allclose(classify(ClassifierModel.zeros(), np.ones(1258)), 0.25, atol=1e-15)
    e = math.e
    assert np.allclose(softmax([1.0, 0, 0, 0]), [e / (e + 3), 1 / (e + 3), 1 / (e + 3), 1 / (e + 3)], atol=1e-15)
    z = np.array([3.0, -1.0, 0.5, 2.0])
    assert np.max(np.abs(softmax(z) - softmax(z + 123.4))) < 1e-12
    assert abs(softmax(np.array([1000.0, 0, 0, 0])).sum() - 1) < 1e-12


def test_classify_dimension_mismatch():
    with pytest.raises(DimensionMismatch):
        classify(ClassifierModel.zeros(), np.ones(10))


@pytest.mark.parametrize("hidden", [0, 5])
def test_gradient_matches_finite_differences(hidden):
    rng = np.random.default_rng(3)
    D, N = 12, 40
    X = rng.normal(size=(N, D))
    Y = np.eye(4)[rng.integers(0, 4, N)]
    w = rng.uniform(0.5, 2.0, N)
    if hidden:
        P = [rng.normal(size=(D, hidden)) * 0.3, rng.normal(size=hidden) * 0.1,
             rng.normal(size=(hidden, 4)) * 0.3, rng.normal(size=4) * 0.1]
    else:
        P = [rng.normal(size=(D, 4)) * 0.3, rng.normal(size=4) * 0.1]
    _, grads = loss_and_grad(P, X, Y, 1e-2, w)
    h = 1e-6
    for _ in range(10):
        k = int(rng.integers(len(P)))
        idx = tuple(int(rng.integers(s)) for s in P[k].shape)
        Pp = [p.copy() for p in P]
        Pm = [p.copy() for p in P]
        Pp[k][idx] += h
        Pm[k][idx] -= h
        num = (loss_and_grad(Pp, X, Y, 1e-2, w)[0] - loss_and_grad(Pm, X, Y, 1e-2, w)[0]) / (2 * h)
        ana = grads[k][idx]
        assert abs(num - ana) / max(abs(num), abs(ana), 1e-8) < 1e-5


@pytest.fixture(scope="module")
def small_dataset(cameras):
    return build_dataset(default_script_set(80, seed=4), cameras, seed=1, reconstruct=False)


@pytest.fixture(scope="module")
def cameras():
    from caveloco.geometry import CaveLayout, default_cameras
    return default_cameras(CaveLayout.default())


FAST = TrainParams(epochs=40, hidden=8)


def test_train_small_and_roundtrip(small_dataset, tmp_path):
    model, rep = train(small_dataset, FAST)
    assert rep.train_accuracy > 0.9
    assert all(b <= a + 1e-9 for a, b in zip(rep.losses, rep.losses[1:]))
    assert rep.confusion.sum() == rep.n_holdout
    p = tmp_path / "m.json"
    model.save(p)
    back = ClassifierModel.load(p)
    x = np.random.default_rng(0).normal(size=(3, 1258))
    assert np.array_equal(classify(model, x), classify(back, x))
    assert back.hidden == 8


def test_train_deterministic(small_dataset, tmp_path):
    a, _ = train(small_dataset, FAST)
    b, _ = train(small_dataset, FAST)
    a.save(tmp_path / "a.json")
    b.save(tmp_path / "b.json")
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()


def test_linear_model_option(small_dataset):
    model, rep = train(small_dataset, TrainParams(epochs=40, hidden=0))
    assert model.hidden == 0 and model.weights.shape == (1258, 4)
    assert rep.train_accuracy > 0.9


def test_single_class_is_degenerate(cameras):
    specs = [s for s in default_script_set(8, seed=2, transition_fraction=0.0) if s.label == ActionLabel.StepLeft]
    with pytest.raises(DegenerateDataset):
        train(build_dataset(specs, cameras, reconstruct=False), FAST)


def test_model_file_rejects_garbage(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text('{"format": "something-else"}')
    with pytest.raises(ValueError):
        ClassifierModel.load(p)


# ---------------------------------------------------------------------------
# smoothing and decisions


def test_ema_examples():
    p = np.array([1.0, 0, 0, 0])
    assert np.array_equal(smooth_ema(None, p), p)
    assert np.array_equal(smooth_ema(np.full(4, 0.25), p, 1.0), p)
    assert np.allclose(smooth_ema(np.full(4, 0.25), p, 0.5), [0.625, 0.125, 0.125, 0.125], atol=1e-15)
    for bad in (0.0, -0.1, 1.5):
        with pytest.raises(BadAlpha):
            smooth_ema(None, p, bad)


def test_ema_converges_geometrically():
    alpha = 0.3
    s = np.full(4, 0.25)
    p = np.array([0.7, 0.1, 0.1, 0.1])
    for _ in range(50):
        s = smooth_ema(s, p, alpha)
    assert np.max(np.abs(s - p)) <= np.max(np.abs(0.25 - p)) * (1 - alpha) ** 50 + 1e-15


@settings(max_examples=50, deadline=None)
@given(st.lists(st.lists(st.floats(0.0, 1.0), min_size=4, max_size=4).filter(lambda v: sum(v) > 0.01),
                min_size=1, max_size=30), st.floats(0.01, 1.0))
def test_ema_stays_on_simplex(stream, alpha):
    s = None
    for v in stream:
        p = np.array(v) / sum(v)
        s = smooth_ema(s, p, alpha)
        assert np.all(s >= 0) and abs(s.sum() - 1) < 1e-12


def test_decide_examples():
    st_ = None
    for _ in range(100):
        st_ = decide(np.array([0.15, 0.55, 0.15, 0.15]), st_)
    assert st_.label == ActionLabel.StandStill

    st_ = DecisionState()
    st_ = decide(np.array([0.05, 0.9, 0.025, 0.025]), st_)
    for _ in range(10):
        st_ = decide(np.array([0.7, 0.1, 0.1, 0.1]), st_)
    assert st_.label == ActionLabel.StandStill

    st_ = DecisionState()
    labels = []
    for _ in range(5):
        st_ = decide(np.array([0.2, 0.6, 0.1, 0.1]), st_)
        labels.append(st_.label)
    assert labels[:4] == [ActionLabel.StandStill] * 4 and labels[4] == ActionLabel.StepForward


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 3), st.floats(0.3, 1.0)), min_size=1, max_size=40))
def test_decide_only_emits_persistent_argmax(stream):
    st_ = DecisionState()
    history = []
    for a, top in stream:
        p = np.full(4, (1 - top) / 3)
        p[a] = top
        prev = st_.label
        st_ = decide(p, st_)
        history.append((a, p[a] >= 0.6 and top > (1 - top) / 3))
        if st_.label != prev:
            last = history[-5:]
            assert len(last) == 5 and all(h == (int(st_.label), True) for h in last)


def test_recognizer_needs_full_window():
    rec = Recognizer(ClassifierModel.zeros())
    d = rec.update(walking_window()[:10], 0.0)
    assert d.label == ActionLabel.StandStill
    assert np.allclose(d.probabilities, 0.25)
    assert rec.raw is None
    d = rec.update(walking_window(), 1.0)
    assert np.allclose(d.probabilities, 0.25) and abs(d.probabilities.sum() - 1) < 1e-9
    assert -math.pi < d.yaw <= math.pi
