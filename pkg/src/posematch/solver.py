"""Pose from 3D-to-2D correspondences lifted out of a flow field.

Two solvers fill the same slot: a robust Gauss-Newton refinement of the
current estimate, and EPnP inside RANSAC for initialization-free solving.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .flow import FlowField
from .geometry import CameraIntrinsics, RigidPose, nearest_rotation, project, so3_exp
from .render import RenderBuffers


class PoseSolverError(RuntimeError):
    pass


@dataclass(eq=False)
class Correspondences:
    """Struct-of-arrays 3D-2D matches."""

    points: np.ndarray  # (N, 3) model frame, meters
    pixels: np.ndarray  # (N, 2)
    weights: np.ndarray = field(default=None)  # (N,) in [0, 1]

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        self.pixels = np.asarray(self.pixels, dtype=np.float64).reshape(-1, 2)
        if self.weights is None:
            self.weights = np.ones(len(self.points))
        self.weights = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        if not (len(self.points) == len(self.pixels) == len(self.weights)):
            raise ValueError("correspondence arrays differ in length")
        if not np.all(np.isfinite(self.weights)) or np.any(self.weights < 0):
            raise ValueError("weights must be finite and non-negative")

    def __len__(self):
        return len(self.points)

    def __getitem__(self, idx) -> "Correspondences":
        return Correspondences(self.points[idx], self.pixels[idx], self.weights[idx])

    def __iter__(self):
        return zip(self.points, self.pixels, self.weights)


def lift_flow(buffers0: RenderBuffers, flow: FlowField, confidence: np.ndarray | None = None,
              stride: int = 1) -> Correspondences:
    """Pair each rendered surface point with where the flow sends its pixel.

    ``stride > 1`` keeps only every ``stride``-th pixel in each direction.
    """
    if stride < 1:
        raise ValueError("stride must be >= 1")
    sel = buffers0.mask & flow.valid
    if stride > 1:
        keep = np.zeros_like(sel)
        keep[stride // 2::stride, stride // 2::stride] = True
        sel &= keep
    ys, xs = np.nonzero(sel)
    pix = np.stack([xs + 0.5 + flow.flow[ys, xs, 0], ys + 0.5 + flow.flow[ys, xs, 1]], axis=1)
    w = np.ones(len(ys)) if confidence is None else np.asarray(confidence, dtype=np.float64)[ys, xs]
    return Correspondences(buffers0.coords[ys, xs], pix, w)


# ---------------------------------------------------------------------------
# Gauss-Newton


def _huber(e, delta):
    return np.where(e <= delta, 0.5 * e * e, delta * (e - 0.5 * delta))


def _residuals(pose, pts, pix, K):
    X = pose.transform(pts)
    Z = X[:, 2]
    if np.any(Z <= 1e-9):
        return X, None
    uv = np.stack([K.fx * X[:, 0] / Z + K.cx, K.fy * X[:, 1] / Z + K.cy], axis=1)
    return X, uv - pix


def reprojection_cost(pose: RigidPose, corrs: Correspondences, K: CameraIntrinsics,
                      huber_delta: float = 2.0) -> float:
    _, r = _residuals(pose, corrs.points, corrs.pixels, K)
    if r is None:
        return math.inf
    return float(np.sum(corrs.weights * _huber(np.linalg.norm(r, axis=1), huber_delta)))


def _apply(pose, step, center_cam):
    dR = so3_exp(step[:3])
    R = nearest_rotation(dR @ pose.rotation)
    t = dR @ (pose.translation - center_cam) + center_cam + step[3:]
    return RigidPose(R, t)


def solve_gauss_newton(corrs: Correspondences, init: RigidPose, K: CameraIntrinsics,
                       max_iters: int = 10, huber_delta: float = 2.0, full_output: bool = False,
                       rel_tol: float = 1e-4):
    """Robust reprojection-error minimization over SE(3).

    Minimizes ``sum_i w_i * huber(|project(p_i) - u_i|)`` with iteratively
    reweighted Gauss-Newton steps. Increments are 3 rotation components
    about the correspondences' centroid plus a 3D translation, both in the
    camera frame. Steps that raise the cost are retried with Levenberg
    damping, so accepted costs never increase. Iteration stops after
    ``max_iters`` steps, a step shorter than 1e-8, or a step that lowers the
    cost by no more than ``rel_tol`` times its new value.

    Returns the pose, or ``(pose, info)`` with ``full_output=True`` where
    ``info`` has ``costs`` (accepted, starting with the initial cost),
    ``steps`` (norm of every accepted step) and ``iterations``.
    """
    pos = corrs.weights > 0
    if pos.sum() < 6:
        raise PoseSolverError("underdetermined")
    c = corrs[pos]
    pts, pix, wts = c.points, c.pixels, c.weights
    center = pts.mean(axis=0)

    pose = init
    X, r = _residuals(pose, pts, pix, K)
    if r is None:
        raise PoseSolverError("initial pose puts points behind the camera")
    e = np.linalg.norm(r, axis=1)
    cost = float(np.sum(wts * _huber(e, huber_delta)))
    costs, steps = [cost], []
    mu = 0.0
    it = 0
    for it in range(1, max_iters + 1):
        irls = wts * np.where(e <= huber_delta, 1.0, huber_delta / np.maximum(e, 1e-300))
        Z = X[:, 2]
        C = pose.transform(center[None])[0]
        n = len(pts)
        # rows of d(uv)/d(X); d(X)/d(omega) = -[X - C]x gives a . (omega x P) = omega . (P x a)
        a = np.zeros((n, 2, 3))
        a[:, 0, 0] = K.fx / Z
        a[:, 0, 2] = -K.fx * X[:, 0] / Z**2
        a[:, 1, 1] = K.fy / Z
        a[:, 1, 2] = -K.fy * X[:, 1] / Z**2
        P = (X - C)[:, None, :]
        J = np.empty((n, 2, 6))
        J[..., 3:] = a
        J[..., 0] = P[..., 1] * a[..., 2] - P[..., 2] * a[..., 1]
        J[..., 1] = P[..., 2] * a[..., 0] - P[..., 0] * a[..., 2]
        J[..., 2] = P[..., 0] * a[..., 1] - P[..., 1] * a[..., 0]
        J = J.reshape(-1, 6)  # rows alternate u, v
        Jw = J * np.repeat(irls, 2)[:, None]
        H = Jw.T @ J
        g = Jw.T @ r.reshape(-1)
        d = np.sqrt(np.maximum(np.diag(H), 1e-300))
        Hn = H / d[:, None] / d[None, :]
        if np.linalg.cond(Hn) > 1e12:
            raise PoseSolverError("degenerate geometry")

        accepted = False
        for _ in range(12):
            A = H + mu * np.diag(np.diag(H))
            step = -np.linalg.solve(A, g)
            cand = _apply(pose, step, C)
            Xc, rc = _residuals(cand, pts, pix, K)
            if rc is not None:
                ec = np.linalg.norm(rc, axis=1)
                cc = float(np.sum(wts * _huber(ec, huber_delta)))
                if cc <= cost:
                    accepted = True
                    break
            mu = max(mu * 10.0, 1e-4)
        snorm = float(np.linalg.norm(step))
        if not accepted:
            break
        gain = cost - cc
        pose, X, r, e, cost = cand, Xc, rc, ec, cc
        costs.append(cost)
        steps.append(snorm)
        mu = mu / 10.0 if mu > 1e-4 else 0.0
        if snorm < 1e-8 or gain <= rel_tol * cost:
            break
    if full_output:
        return pose, {"costs": costs, "steps": steps, "iterations": it}
    return pose


# ---------------------------------------------------------------------------
# EPnP


def _control_points(pw):
    c0 = pw.mean(axis=0)
    A = pw - c0
    lam, V = np.linalg.eigh(A.T @ A / len(pw))
    lam, V = lam[::-1], V[:, ::-1]
    if lam[0] <= 0 or lam[1] / lam[0] < 1e-6:
        raise PoseSolverError("degenerate geometry")
    planar = lam[2] / lam[0] < 1e-6
    n = 2 if planar else 3
    cws = [c0] + [c0 + math.sqrt(lam[j]) * V[:, j] for j in range(n)]
    return np.array(cws)


def _alphas(pw, cws):
    B = (cws[1:] - cws[0]).T  # (3, m-1)
    a = np.linalg.lstsq(B, (pw - cws[0]).T, rcond=None)[0].T
    return np.concatenate([1 - a.sum(axis=1, keepdims=True), a], axis=1)


def _betas_refine(V, rho, pairs, beta, iters=5):
    # V: (N, m, 3) null-space vectors reshaped per control point
    for _ in range(iters):
        x = np.einsum("k,kmc->mc", beta, V)
        res, J = [], []
        for i, j in pairs:
            dx = x[i] - x[j]
            dv = V[:, i] - V[:, j]
            res.append(dx @ dx - rho[(i, j)])
            J.append(2 * dv @ dx)
        step = np.linalg.lstsq(np.array(J), -np.array(res), rcond=None)[0]
        beta = beta + step
        if np.linalg.norm(step) < 1e-12:
            break
    return beta


def _epnp_core(pw, uv, K):
    cws = _control_points(pw)
    m = len(cws)
    alphas = _alphas(pw, cws)
    n = len(pw)
    M = np.zeros((2 * n, 3 * m))
    M[0::2, 0::3] = alphas * K.fx
    M[0::2, 2::3] = alphas * (K.cx - uv[:, :1])
    M[1::2, 1::3] = alphas * K.fy
    M[1::2, 2::3] = alphas * (K.cy - uv[:, 1:])
    _, evecs = np.linalg.eigh(M.T @ M)
    pairs = [(i, j) for i in range(m) for j in range(i + 1, m)]
    rho = {(i, j): float(np.sum((cws[i] - cws[j]) ** 2)) for i, j in pairs}
    r = np.array([rho[p] for p in pairs])

    best = None
    for N in range(1, min(4, m) + 1):
        V = evecs[:, :N].T.reshape(N, m, 3)
        dv = np.array([V[:, i] - V[:, j] for i, j in pairs])  # (P, N, 3)
        if N == 1:
            a = np.einsum("pc,pc->p", dv[:, 0], dv[:, 0])
            b = max(float(a @ r / (a @ a)), 0.0)
            beta = np.array([math.sqrt(b)])
        else:
            # linearize in products beta_1 * beta_k (the other products are dropped)
            if N == 2:
                cols = [(0, 0), (0, 1), (1, 1)]
            elif N == 3 and len(pairs) >= 6:
                cols = [(0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2)]
            else:
                cols = [(0, k) for k in range(N)]
            L = np.stack([(1 if a == b else 2) * np.einsum("pc,pc->p", dv[:, a], dv[:, b])
                          for a, b in cols], axis=1)
            sol = np.linalg.lstsq(L, r, rcond=None)[0]
            b11 = abs(sol[0])
            b1 = math.sqrt(b11)
            beta = np.zeros(N)
            beta[0] = b1
            for idx, (a, b) in enumerate(cols):
                if a == 0 and b > 0 and b1 > 0:
                    beta[b] = sol[idx] / b1
        beta = _betas_refine(V, rho, pairs, beta)
        xc = np.einsum("k,kmc->mc", beta, V)
        pc = alphas @ xc
        if np.mean(pc[:, 2]) < 0:
            pc = -pc
        pose = _procrustes(pw, pc)
        uvp, _, ok = project(pw, pose, K)
        err = float(np.mean(np.linalg.norm(uvp - uv, axis=1))) if ok.all() else math.inf
        if best is None or err < best[1]:
            best = (pose, err)
    return best[0]


def _procrustes(pw, pc):
    mw, mc = pw.mean(axis=0), pc.mean(axis=0)
    H = (pc - mc).T @ (pw - mw)
    R = nearest_rotation(H)
    return RigidPose(R, mc - R @ mw)


def epnp(points: np.ndarray, pixels: np.ndarray, K: CameraIntrinsics) -> RigidPose:
    """Closed-form EPnP on at least 6 correspondences (planar sets use 3 control points)."""
    pw = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    uv = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    if len(pw) < 6:
        raise PoseSolverError("underdetermined")
    return _epnp_core(pw, uv, K)


def _reproj_errors(pose, pts, pix, K):
    uv, _, ok = project(pts, pose, K)
    e = np.linalg.norm(uv - pix, axis=1)
    e[~ok] = np.inf
    return e


def solve_epnp_ransac(corrs: Correspondences, K: CameraIntrinsics, threshold_px: float = 3.0,
                      max_rounds: int = 200, seed: int = 0, confidence: float = 0.999,
                      sample_size: int = 6):
    """RANSAC over 6-point EPnP hypotheses, then a robust refit on the inliers.

    Returns ``(pose, inlier_mask)``; the mask indexes ``corrs``. Hypotheses
    come from one seeded generator in a fixed order.
    """
    n = len(corrs)
    if n < sample_size:
        raise PoseSolverError("underdetermined")
    pts, pix = corrs.points, corrs.pixels
    # global degeneracy is not something more samples can fix
    _control_points(pts)
    rng = np.random.default_rng(seed)
    best_pose, best_in, best_count = None, None, 0
    needed = max_rounds
    rounds = 0
    while rounds < min(needed, max_rounds):
        rounds += 1
        idx = rng.choice(n, size=sample_size, replace=False)
        try:
            pose = _epnp_core(pts[idx], pix[idx], K)
        except (PoseSolverError, np.linalg.LinAlgError):
            continue
        inl = _reproj_errors(pose, pts, pix, K) < threshold_px
        cnt = int(inl.sum())
        if cnt > best_count:
            best_pose, best_in, best_count = pose, inl, cnt
            w = cnt / n
            denom = math.log(max(1e-300, 1 - w**sample_size)) if w < 1 else -math.inf
            needed = 0 if denom == -math.inf else math.ceil(math.log(1 - confidence) / denom)
    if best_pose is None or best_count < sample_size:
        raise PoseSolverError("RANSAC failure")

    try:
        pose = _epnp_core(pts[best_in], pix[best_in], K)
        inl = _reproj_errors(pose, pts, pix, K) < threshold_px
        if inl.sum() < best_count:
            pose, inl = best_pose, best_in
    except (PoseSolverError, np.linalg.LinAlgError):
        pose, inl = best_pose, best_in
    pose = solve_gauss_newton(corrs[inl], pose, K, huber_delta=threshold_px)
    inl = _reproj_errors(pose, pts, pix, K) < threshold_px
    return pose, inl
