"""Bundle adjustment over scan poses and landmarks.

Minimizes the sum over observations of the misfit between a landmark mapped
into a scan, R_i q_j + t_i, and the observed keypoint p_ij. Levenberg-Marquardt
style damped Gauss-Newton with an analytic Jacobian; poses move on the SE(3)
manifold through a 6-vector tangent increment (axis-angle + translation)
composed onto the current estimate, and rotations are re-projected onto SO(3)
after every accepted step. Landmark blocks are eliminated with a Schur
complement, so the dense solve only covers the free poses.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import RigidTransform, nearest_rotation, rotation_from_axis_angle, skew

_LAMBDA_INIT = 1e-6
_LAMBDA_MAX = 1e14
_GRAD_TOL = 1e-12
_ENERGY_REL_TOL = 1e-8
_UPDATE_TOL = 1e-10


@dataclass
class BAProblem:
    """Residual blocks (track, scan, observed point) over pose and landmark
    variable blocks. The gauge anchor stays fixed whenever landmarks are free."""

    pose_ids: list[int]
    rotations: np.ndarray          # (P, 3, 3)
    translations: np.ndarray       # (P, 3)
    landmark_ids: list[int]
    landmarks: np.ndarray          # (L, 3)
    block_pose: np.ndarray         # (B,) index into pose arrays
    block_landmark: np.ndarray     # (B,) index into landmark arrays
    block_points: np.ndarray       # (B, 3) observed scan-local keypoints
    anchor: int
    loss: str = "squared"          # "squared" | "huber"
    huber_scale: float = 0.1

    def __post_init__(self):
        self.rotations = np.asarray(self.rotations, dtype=np.float64).reshape(-1, 3, 3)
        self.translations = np.asarray(self.translations, dtype=np.float64).reshape(-1, 3)
        self.landmarks = np.asarray(self.landmarks, dtype=np.float64).reshape(-1, 3)
        self.block_pose = np.asarray(self.block_pose, dtype=np.int64).reshape(-1)
        self.block_landmark = np.asarray(self.block_landmark, dtype=np.int64).reshape(-1)
        self.block_points = np.asarray(self.block_points, dtype=np.float64).reshape(-1, 3)
        if len(self.block_pose) != len(self.block_landmark) or \
                len(self.block_pose) != len(self.block_points):
            raise ValueError("block arrays must have equal length")
        if len(self.block_pose) and (self.block_pose.max() >= len(self.pose_ids)
                                     or self.block_landmark.max() >= len(self.landmark_ids)):
            raise ValueError("block references an unknown variable")
        if self.anchor not in self.pose_ids:
            raise ValueError("gauge anchor must be one of the poses")
        if self.loss not in ("squared", "huber"):
            raise ValueError("loss must be 'squared' or 'huber'")

    @classmethod
    def from_tracks(cls, poses: dict[int, RigidTransform], store,
                    anchor: int, loss: str = "squared",
                    huber_scale: float = 0.1) -> "BAProblem":
        """Build a problem from registered poses and a track store, one
        residual block per (active track, observation)."""
        pose_ids = sorted(poses)
        pose_slot = {sid: k for k, sid in enumerate(pose_ids)}
        landmark_ids = sorted(store.active_ids())
        lm_slot = {tid: k for k, tid in enumerate(landmark_ids)}
        bp, bl, pts = [], [], []
        for tid in landmark_ids:
            for obs in store.tracks[tid].observations:
                bp.append(pose_slot[obs.scan_id])
                bl.append(lm_slot[tid])
                pts.append(obs.position)
        return cls(pose_ids,
                   np.stack([poses[s].rotation for s in pose_ids]),
                   np.stack([poses[s].translation for s in pose_ids]),
                   landmark_ids,
                   np.stack([store.tracks[t].landmark for t in landmark_ids])
                   if landmark_ids else np.zeros((0, 3)),
                   np.array(bp, dtype=np.int64), np.array(bl, dtype=np.int64),
                   np.array(pts, dtype=np.float64).reshape(-1, 3),
                   anchor=anchor, loss=loss, huber_scale=huber_scale)

    def poses(self) -> dict[int, RigidTransform]:
        return {sid: RigidTransform(self.rotations[k], self.translations[k])
                for k, sid in enumerate(self.pose_ids)}

    def landmark_map(self) -> dict[int, np.ndarray]:
        return {tid: self.landmarks[k].copy()
                for k, tid in enumerate(self.landmark_ids)}


@dataclass
class SolveReport:
    initial_energy: float
    final_energy: float
    iterations: int
    termination: str
    max_update: float = 0.0

    def __post_init__(self):
        if self.final_energy > self.initial_energy + 1e-12:
            raise ValueError("solver must not increase the energy")


def _residuals(problem: BAProblem, rotations, translations, landmarks) -> np.ndarray:
    pred = (np.einsum("bij,bj->bi", rotations[problem.block_pose],
                      landmarks[problem.block_landmark])
            + translations[problem.block_pose])
    return pred - problem.block_points


def _block_energy(problem: BAProblem, res: np.ndarray) -> float:
    norms2 = np.einsum("bi,bi->b", res, res)
    if problem.loss == "squared":
        return float(norms2.sum())
    d = problem.huber_scale
    norms = np.sqrt(norms2)
    quad = norms <= d
    return float(norms2[quad].sum() + (2.0 * d * norms[~quad] - d * d).sum())


def energy(problem: BAProblem) -> float:
    """Objective value at the problem's current state."""
    if len(problem.block_pose) == 0:
        return 0.0
    res = _residuals(problem, problem.rotations, problem.translations,
                     problem.landmarks)
    return _block_energy(problem, res)


def _robust_weights(problem: BAProblem, res: np.ndarray) -> np.ndarray:
    if problem.loss == "squared":
        return np.ones(len(res))
    norms = np.linalg.norm(res, axis=1)
    w = np.ones(len(res))
    far = norms > problem.huber_scale
    w[far] = problem.huber_scale / norms[far]
    return w


def _solve(problem: BAProblem, free_poses: list[int], free_landmarks: bool,
           max_iterations: int):
    """Core damped Gauss-Newton loop. Mutates nothing; returns new state."""
    R = problem.rotations.copy()
    t = problem.translations.copy()
    q = problem.landmarks.copy()
    bp, bl, pts = problem.block_pose, problem.block_landmark, problem.block_points

    pose_slot = {sid: k for k, sid in enumerate(problem.pose_ids)}
    free_idx = sorted(pose_slot[s] for s in free_poses)
    fmap = -np.ones(len(problem.pose_ids), dtype=np.int64)
    for slot, k in enumerate(free_idx):
        fmap[k] = slot
    F = len(free_idx)
    L = len(problem.landmark_ids) if free_landmarks else 0

    res = _residuals(problem, R, t, q)
    e_cur = _block_energy(problem, res)
    report_init = e_cur

    if (F == 0 and L == 0) or len(bp) == 0:
        return R, t, q, SolveReport(report_init, e_cur, 0, "no_free_variables")

    lam = _LAMBDA_INIT
    iterations = 0
    max_update = 0.0
    termination = "max_iterations"

    while iterations < max_iterations:
        iterations += 1
        w = _robust_weights(problem, res)
        block_free = fmap[bp] >= 0

        # pose-side Jacobian blocks: [-skew(R q) | I], 3x6 per block
        Rq = np.einsum("bij,bj->bi", R[bp], q[bl])
        Jp = np.zeros((len(bp), 3, 6))
        Jp[:, 0, 1] = Rq[:, 2]
        Jp[:, 0, 2] = -Rq[:, 1]
        Jp[:, 1, 0] = -Rq[:, 2]
        Jp[:, 1, 2] = Rq[:, 0]
        Jp[:, 2, 0] = Rq[:, 1]
        Jp[:, 2, 1] = -Rq[:, 0]
        Jp[:, :, 3:] = np.eye(3)

        gp = np.zeros((F, 6))
        Hpp = np.zeros((F, 6, 6))
        if F:
            contrib = np.einsum("b,bri,brj->bij", w[block_free],
                                Jp[block_free], Jp[block_free])
            np.add.at(Hpp, fmap[bp[block_free]], contrib)
            np.add.at(gp, fmap[bp[block_free]],
                      np.einsum("b,bri,br->bi", w[block_free],
                                Jp[block_free], res[block_free]))

        s_l = gl = W = None
        if L:
            # landmark-side J = R (orthonormal): J^T J = I, J^T r = R^T r
            s_l = np.zeros(L)
            np.add.at(s_l, bl, w)
            gl = np.zeros((L, 3))
            np.add.at(gl, bl, w[:, None] * np.einsum("bji,bj->bi", R[bp], res))
            W = np.zeros((F, 6, L, 3))
            if F:
                cross = np.einsum("b,bri,brj->bij", w[block_free], Jp[block_free],
                                  R[bp[block_free]])
                np.add.at(W, (fmap[bp[block_free]], slice(None),
                              bl[block_free], slice(None)), cross)
        grad_inf = 0.0
        if F:
            grad_inf = max(grad_inf, np.abs(gp).max())
        if L:
            grad_inf = max(grad_inf, np.abs(gl).max())
        if grad_inf < _GRAD_TOL:
            termination = "converged_gradient"
            break

        accepted = False
        while lam <= _LAMBDA_MAX:
            try:
                dp, dq = _lm_step(Hpp, gp, s_l, gl, W, lam, F, L)
            except np.linalg.LinAlgError:
                lam *= 4.0
                continue

            R_new, t_new, q_new = R.copy(), t.copy(), q.copy()
            for slot, k in enumerate(free_idx):
                R_new[k] = nearest_rotation(
                    rotation_from_axis_angle(dp[slot, :3]) @ R_new[k])
                t_new[k] = t_new[k] + dp[slot, 3:]
            if L:
                q_new = q + dq
            res_new = _residuals(problem, R_new, t_new, q_new)
            e_new = _block_energy(problem, res_new)
            if e_new < e_cur:
                max_update = float(max(np.abs(dp).max() if F else 0.0,
                                       np.abs(dq).max() if L else 0.0))
                decrease = e_cur - e_new
                R, t, q, res, e_cur = R_new, t_new, q_new, res_new, e_new
                lam = max(lam / 3.0, 1e-12)
                accepted = True
                if decrease <= _ENERGY_REL_TOL * max(e_cur, 1e-300):
                    termination = "converged_energy"
                elif max_update < _UPDATE_TOL:
                    termination = "converged_update"
                break
            lam *= 4.0

        if not accepted:
            termination = "converged_gradient" if grad_inf < 1e-8 else "diverged"
            break
        if termination != "max_iterations":
            break

    return R, t, q, SolveReport(report_init, e_cur, iterations, termination, max_update)


def _lm_step(Hpp, gp, s_l, gl, W, lam, F, L):
    """One damped normal-equation solve with landmark elimination."""
    if F == 0:
        inv = 1.0 / (s_l + lam)
        return np.zeros((0, 6)), -gl * inv[:, None]

    A = np.zeros((6 * F, 6 * F))
    for k in range(F):
        A[6 * k:6 * k + 6, 6 * k:6 * k + 6] = Hpp[k] + lam * np.eye(6)
    rhs = -gp.reshape(-1)

    if L:
        inv = 1.0 / (s_l + lam)                      # Hll = (s_l + lam) I per landmark
        Wm = W.reshape(6 * F, L, 3)
        Wi = Wm * inv[None, :, None]
        A -= np.einsum("alk,blk->ab", Wi, Wm)
        rhs += np.einsum("alk,lk->a", Wi, gl)

    dp = np.linalg.solve(A, rhs).reshape(F, 6)
    if not np.isfinite(dp).all():
        raise np.linalg.LinAlgError("non-finite step")
    if L:
        dq = (-gl - np.einsum("alk,a->lk", Wm, dp.reshape(-1))) * inv[:, None]
        return dp, dq
    return dp, None


def solve_local(problem: BAProblem, free_poses: list[int],
                max_iterations: int = 50):
    """Optimize only the given scan poses; landmarks stay fixed.

    Returns (SolveReport, poses dict). An empty free set is a no-op.
    """
    free = [s for s in free_poses if s in problem.pose_ids]
    R, t, q, report = _solve(problem, free, False, max_iterations)
    problem.rotations, problem.translations = R, t
    return report, problem.poses()


def solve_global(problem: BAProblem, max_iterations: int = 100):
    """Joint pose + landmark optimization with the anchor pose held fixed.

    Returns (SolveReport, poses dict, landmark dict).
    """
    free = [s for s in problem.pose_ids if s != problem.anchor]
    R, t, q, report = _solve(problem, free, True, max_iterations)
    problem.rotations, problem.translations, problem.landmarks = R, t, q
    return report, problem.poses(), problem.landmark_map()


def solve_landmarks(problem: BAProblem, max_iterations: int = 100):
    """Optimize landmarks only, all poses fixed.

    Returns (SolveReport, landmark dict).
    """
    R, t, q, report = _solve(problem, [], True, max_iterations)
    problem.landmarks = q
    return report, problem.landmark_map()


def gradient_check(problem: BAProblem, h: float = 1e-6) -> float:
    """Worst deviation between the analytic Jacobian and central finite
    differences, measured relative to unit scale: max |Ja - Jn| / max(1, |Ja|).

    Free variables are all poses except the anchor plus all landmarks,
    matching the global solve. Intended for small problems.
    """
    free_idx = [k for k, sid in enumerate(problem.pose_ids)
                if sid != problem.anchor]
    F, L, B = len(free_idx), len(problem.landmark_ids), len(problem.block_pose)
    n = 6 * F + 3 * L
    if n == 0 or B == 0:
        return 0.0
    if n > 10_000:
        raise ValueError("gradient_check is meant for small problems")

    R0, t0, q0 = problem.rotations, problem.translations, problem.landmarks
    bp, bl = problem.block_pose, problem.block_landmark

    # analytic Jacobian, rows = 3 per block, columns = stacked free params
    Ja = np.zeros((3 * B, n))
    Rq = np.einsum("bij,bj->bi", R0[bp], q0[bl])
    fmap = {k: slot for slot, k in enumerate(free_idx)}
    for b in range(B):
        rows = slice(3 * b, 3 * b + 3)
        k = bp[b]
        if k in fmap:
            col = 6 * fmap[k]
            Ja[rows, col:col + 3] = -skew(Rq[b])
            Ja[rows, col + 3:col + 6] = np.eye(3)
        lcol = 6 * F + 3 * bl[b]
        Ja[rows, lcol:lcol + 3] = R0[bp[b]]

    def residual_vector(x):
        R, t, q = R0.copy(), t0.copy(), q0.copy()
        for slot, k in enumerate(free_idx):
            d = x[6 * slot:6 * slot + 6]
            R[k] = rotation_from_axis_angle(d[:3]) @ R0[k]
            t[k] = t0[k] + d[3:]
        if L:
            q = q0 + x[6 * F:].reshape(L, 3)
        return _residuals(problem, R, t, q).reshape(-1)

    Jn = np.zeros_like(Ja)
    x = np.zeros(n)
    for col in range(n):
        x[col] = h
        fp = residual_vector(x)
        x[col] = -h
        fm = residual_vector(x)
        x[col] = 0.0
        Jn[:, col] = (fp - fm) / (2.0 * h)

    denom = np.maximum(1.0, np.abs(Ja))
    return float((np.abs(Ja - Jn) / denom).max())


def gradient_norm(problem: BAProblem) -> float:
    """Infinity norm of the energy gradient at the current state (squared loss)."""
    if len(problem.block_pose) == 0:
        return 0.0
    res = _residuals(problem, problem.rotations, problem.translations,
                     problem.landmarks)
    bp, bl = problem.block_pose, problem.block_landmark
    Rq = np.einsum("bij,bj->bi", problem.rotations[bp], problem.landmarks[bl])
    g = 0.0
    for b in range(len(bp)):
        Jp = np.hstack([-skew(Rq[b]), np.eye(3)])
        g = max(g, np.abs(2.0 * Jp.T @ res[b]).max())
        g = max(g, np.abs(2.0 * problem.rotations[bp[b]].T @ res[b]).max())
    return float(g)
