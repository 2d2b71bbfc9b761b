"""Hot numeric loops, each in a numba and a pure-numpy flavour.

The public names (``iou_matrix``, ``triangulate_batch``) dispatch to the numba
version unless ``CAVELOCO_DISABLE_NUMBA`` is set. Both flavours are importable
directly (``*_numpy`` / ``*_numba``) so tests and the benchmark can compare them.
"""
import numpy as np

from ._accel import USE_NUMBA, njit

# singular values within this fraction of the largest count as tied at the bottom
NULL_TOL = 1e-10


# ---------------------------------------------------------------------------
# IoU between two sets of xyxy boxes


def iou_matrix_numpy(a, b):
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    if len(a) == 0 or len(b) == 0:
        return np.zeros((len(a), len(b)))
    a1 = a[:, None, :]
    b1 = b[None, :, :]
    w = np.maximum(0.0, np.minimum(a1[..., 2], b1[..., 2]) - np.maximum(a1[..., 0], b1[..., 0]))
    h = np.maximum(0.0, np.minimum(a1[..., 3], b1[..., 3]) - np.maximum(a1[..., 1], b1[..., 1]))
    inter = w * h
    area_a = (a1[..., 2] - a1[..., 0]) * (a1[..., 3] - a1[..., 1])
    area_b = (b1[..., 2] - b1[..., 0]) * (b1[..., 3] - b1[..., 1])
    union = area_a + area_b - inter
    return np.where(union > 0.0, inter / np.where(union > 0.0, union, 1.0), 0.0)


@njit
def _iou_matrix_nb(a, b):
    n = a.shape[0]
    m = b.shape[0]
    out = np.zeros((n, m))
    for i in range(n):
        area_a = (a[i, 2] - a[i, 0]) * (a[i, 3] - a[i, 1])
        for j in range(m):
            w = min(a[i, 2], b[j, 2]) - max(a[i, 0], b[j, 0])
            h = min(a[i, 3], b[j, 3]) - max(a[i, 1], b[j, 1])
            if w <= 0.0 or h <= 0.0:
                continue
            inter = w * h
            union = area_a + (b[j, 2] - b[j, 0]) * (b[j, 3] - b[j, 1]) - inter
            if union > 0.0:
                out[i, j] = inter / union
    return out


def iou_matrix_numba(a, b):
    a = np.ascontiguousarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.ascontiguousarray(b, dtype=np.float64).reshape(-1, 4)
    return _iou_matrix_nb(a, b)


# ---------------------------------------------------------------------------
# Weighted linear (DLT) triangulation of many points at once
#
# P: (V, 3, 4) pixel projection matrices
# uv: (N, V, 2) observations, w: (N, V) weights; w == 0 excludes a view
# returns X (N, 3), residual (N, V) pixel distance, depth (N, V); excluded views
# get NaN residual. Each row is a plane through the camera centre; it is
# scaled so its normal has unit length, which makes the algebraic error a
# point-to-plane distance and keeps the solve invariant to world rotations.
# Callers should express P in a frame centred near the cameras.


def triangulate_batch_numpy(P, uv, w):
    P = np.asarray(P, dtype=np.float64)
    uv = np.nan_to_num(np.asarray(uv, dtype=np.float64))
    w = np.asarray(w, dtype=np.float64)
    n = w.shape[0]
    rows_u = uv[..., 0:1] * P[None, :, 2, :] - P[None, :, 0, :]
    rows_v = uv[..., 1:2] * P[None, :, 2, :] - P[None, :, 1, :]
    A = np.concatenate([rows_u, rows_v], axis=1)  # (N, 2V, 4)
    norms = np.linalg.norm(A[..., :3], axis=2, keepdims=True)
    norms[norms == 0.0] = 1.0
    sw = np.sqrt(np.concatenate([w, w], axis=1))[..., None]
    A = A / norms * sw
    _, sv, vt = np.linalg.svd(A)
    null = sv <= sv[:, -1:] + NULL_TOL * sv[:, :1]
    Xh = np.einsum("nj,nj,nji->ni", null, vt[:, :, 3], vt)
    at_inf = Xh[:, 3] == 0.0
    Xh[at_inf] = vt[at_inf, -1, :]
    with np.errstate(divide="ignore", invalid="ignore"):
        X = np.where(Xh[:, 3:4] != 0.0, Xh[:, :3] / Xh[:, 3:4], np.nan)
    Xh1 = np.concatenate([X, np.ones((n, 1))], axis=1)
    proj = np.einsum("vij,nj->nvi", P, Xh1)
    depth = proj[..., 2]
    safe = np.where(np.abs(depth) > 1e-12, depth, 1e-12)
    reproj = proj[..., :2] / safe[..., None]
    resid = np.linalg.norm(reproj - uv, axis=2)
    resid = np.where(w > 0.0, resid, np.nan)
    return X, resid, depth


@njit
def _smallest_right_singular(A, V):
    """Homogeneous least-squares solution of ``A h = 0`` by one-sided Jacobi.

    ``A`` is overwritten. When several singular values tie at the bottom
    (degenerate rays), the unit last axis is projected onto that subspace,
    which picks the finite solution nearest the frame origin.
    """
    m, c = A.shape
    for i in range(c):
        for j in range(c):
            V[i, j] = 1.0 if i == j else 0.0
    for _sweep in range(60):
        off = 0.0
        for p in range(c - 1):
            for q in range(p + 1, c):
                alpha = 0.0
                beta = 0.0
                gamma = 0.0
                for r in range(m):
                    alpha += A[r, p] * A[r, p]
                    beta += A[r, q] * A[r, q]
                    gamma += A[r, p] * A[r, q]
                if gamma == 0.0:
                    continue
                rel = abs(gamma) / np.sqrt(alpha * beta)
                if rel > off:
                    off = rel
                if rel < 1e-15:
                    continue
                zeta = (beta - alpha) / (2.0 * gamma)
                t = (1.0 if zeta >= 0.0 else -1.0) / (abs(zeta) + np.sqrt(1.0 + zeta * zeta))
                cs = 1.0 / np.sqrt(1.0 + t * t)
                sn = cs * t
                for r in range(m):
                    ap = A[r, p]
                    A[r, p] = cs * ap - sn * A[r, q]
                    A[r, q] = sn * ap + cs * A[r, q]
                for r in range(c):
                    vp = V[r, p]
                    V[r, p] = cs * vp - sn * V[r, q]
                    V[r, q] = sn * vp + cs * V[r, q]
        if off < 1e-15:
            break
    sv = np.empty(c)
    for j in range(c):
        nrm = 0.0
        for r in range(m):
            nrm += A[r, j] * A[r, j]
        sv[j] = np.sqrt(nrm)
    tol = sv.min() + NULL_TOL * sv.max()
    h = np.zeros(c)
    for j in range(c):
        if sv[j] <= tol:
            for r in range(c):
                h[r] += V[c - 1, j] * V[r, j]
    if h[c - 1] == 0.0:
        # point at infinity: keep the direction of the first null vector
        for j in range(c):
            if sv[j] <= tol:
                for r in range(c):
                    h[r] = V[r, j]
                break
    return h


@njit
def _triangulate_batch_nb(P, uv, w):
    n = uv.shape[0]
    v = uv.shape[1]
    X = np.empty((n, 3))
    resid = np.empty((n, v))
    depth = np.empty((n, v))
    A = np.zeros((2 * v, 4))
    V = np.empty((4, 4))
    for k in range(n):
        for j in range(v):
            sw = np.sqrt(w[k, j]) if w[k, j] > 0.0 else 0.0
            for c in range(2):
                r = 2 * j + c
                nrm = 0.0
                for q in range(4):
                    val = uv[k, j, c] * P[j, 2, q] - P[j, c, q]
                    if sw == 0.0:
                        val = 0.0
                    A[r, q] = val
                    if q < 3:
                        nrm += val * val
                if nrm > 0.0:
                    s = sw / np.sqrt(nrm)
                    for q in range(4):
                        A[r, q] *= s
        h = _smallest_right_singular(A, V)
        for q in range(3):
            X[k, q] = h[q] / h[3] if h[3] != 0.0 else np.nan
        for j in range(v):
            p0 = P[j, 0, 3] + P[j, 0, 0] * X[k, 0] + P[j, 0, 1] * X[k, 1] + P[j, 0, 2] * X[k, 2]
            p1 = P[j, 1, 3] + P[j, 1, 0] * X[k, 0] + P[j, 1, 1] * X[k, 1] + P[j, 1, 2] * X[k, 2]
            p2 = P[j, 2, 3] + P[j, 2, 0] * X[k, 0] + P[j, 2, 1] * X[k, 1] + P[j, 2, 2] * X[k, 2]
            depth[k, j] = p2
            if w[k, j] > 0.0:
                d = p2 if abs(p2) > 1e-12 else 1e-12
                du = p0 / d - uv[k, j, 0]
                dv = p1 / d - uv[k, j, 1]
                resid[k, j] = np.sqrt(du * du + dv * dv)
            else:
                resid[k, j] = np.nan
    return X, resid, depth


def triangulate_batch_numba(P, uv, w):
    P = np.ascontiguousarray(P, dtype=np.float64)
    uv = np.ascontiguousarray(np.nan_to_num(uv), dtype=np.float64)
    w = np.ascontiguousarray(w, dtype=np.float64)
    return _triangulate_batch_nb(P, uv, w)


if USE_NUMBA:
    iou_matrix = iou_matrix_numba
    triangulate_batch = triangulate_batch_numba
else:
    iou_matrix = iou_matrix_numpy
    triangulate_batch = triangulate_batch_numpy
