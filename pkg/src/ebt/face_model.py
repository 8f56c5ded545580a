"""Linear 3D face model, weak-perspective landmark projection and fitting.

Vertices are stored flat as ``(x0, y0, z0, x1, ...)``.  Pose vectors hold
``(rx, ry, rz, tx, ty, scale)``: intrinsic ZYX Euler angles in radians
(``R = Rz @ Ry @ Rx``), a screen translation in pixels and a positive scale.
Image coordinates have y pointing down.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

POSE_DIM = 6
W_REG = 1e-3


class FitError(RuntimeError):
    pass


@dataclass(frozen=True)
class FaceBasis:
    mean_shape: np.ndarray
    geometry_basis: np.ndarray
    expression_basis: np.ndarray
    geometry_sigma: np.ndarray
    expression_sigma: np.ndarray
    landmark_indices: np.ndarray
    # positions inside ``landmark_indices``; mouth is the outer lip contour in cyclic order
    mouth: np.ndarray
    jaw: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __post_init__(self):
        n = self.mean_shape.shape[0]
        if n % 3:
            raise ValueError("mean_shape length must be a multiple of 3")
        for name, b, sig in (
            ("geometry", self.geometry_basis, self.geometry_sigma),
            ("expression", self.expression_basis, self.expression_sigma),
        ):
            if b.shape != (n, sig.shape[0]):
                raise ValueError(f"{name} basis shape {b.shape} does not match sigma {sig.shape}")
            if np.any(sig <= 0) or np.any(np.diff(sig) > 0):
                raise ValueError(f"{name} sigma must be positive and non-increasing")
            if not np.allclose(np.linalg.norm(b, axis=0), 1.0, atol=1e-5):
                raise ValueError(f"{name} basis columns must have unit norm")
        v = n // 3
        idx = self.landmark_indices
        if idx.size == 0 or idx.min() < 0 or idx.max() >= v:
            raise ValueError("landmark indices out of range")
        if self.mouth.size == 0:
            raise ValueError("mouth landmark subset is empty")
        if self.mouth.max() >= idx.size or (self.jaw.size and self.jaw.max() >= idx.size):
            raise ValueError("landmark subset positions out of range")

    @property
    def n_vertices(self) -> int:
        return self.mean_shape.shape[0] // 3

    @property
    def dim_s(self) -> int:
        return self.geometry_sigma.shape[0]

    @property
    def dim_e(self) -> int:
        return self.expression_sigma.shape[0]

    @property
    def n_landmarks(self) -> int:
        return self.landmark_indices.shape[0]

    def subset(self, name: str) -> np.ndarray:
        """Positions within the landmark list for ``all``, ``mouth`` or ``mouth_jaw``."""
        if name == "all":
            return np.arange(self.n_landmarks)
        if name == "mouth":
            return self.mouth
        if name == "mouth_jaw":
            return np.concatenate([self.mouth, self.jaw])
        raise ValueError(f"unknown landmark subset {name!r}")


@dataclass
class FaceParams:
    s: np.ndarray
    e: np.ndarray
    p: np.ndarray

    def __post_init__(self):
        self.s = np.asarray(self.s, dtype=np.float64)
        self.e = np.asarray(self.e, dtype=np.float64)
        self.p = np.asarray(self.p, dtype=np.float64)
        if self.p.shape != (POSE_DIM,):
            raise ValueError(f"pose must have {POSE_DIM} entries, got {self.p.shape}")
        if not self.p[5] > 0:
            raise ValueError("pose scale must be positive")

    @classmethod
    def neutral(cls, basis: FaceBasis, pose=None) -> "FaceParams":
        pose = np.array([0, 0, 0, 0, 0, 1.0]) if pose is None else pose
        return cls(np.zeros(basis.dim_s), np.zeros(basis.dim_e), pose)

    def vector(self) -> np.ndarray:
        return np.concatenate([self.s, self.e, self.p])

    @classmethod
    def from_vector(cls, q: np.ndarray, dim_s: int, dim_e: int) -> "FaceParams":
        return cls(q[:dim_s], q[dim_s : dim_s + dim_e], q[dim_s + dim_e :])


@dataclass
class LandmarkSet:
    points: np.ndarray  # (L, 2) pixels
    subset: str = "all"

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)
        if not np.all(np.isfinite(self.points)):
            raise ValueError("landmark coordinates must be finite")

    def __len__(self) -> int:
        return self.points.shape[0]

    def center(self) -> np.ndarray:
        return self.points.mean(axis=0)

    def flat(self) -> np.ndarray:
        return self.points.reshape(-1)


def _check_dims(basis: FaceBasis, s, e) -> None:
    if np.shape(s) != (basis.dim_s,) or np.shape(e) != (basis.dim_e,):
        raise ValueError(
            f"coefficient dims s{np.shape(s)}, e{np.shape(e)} do not match "
            f"basis ({basis.dim_s}, {basis.dim_e})"
        )


def reconstruct_mesh(basis: FaceBasis, s, e) -> np.ndarray:
    s = np.asarray(s, dtype=np.float64)
    e = np.asarray(e, dtype=np.float64)
    _check_dims(basis, s, e)
    return (
        basis.mean_shape
        + basis.geometry_basis @ (s * basis.geometry_sigma)
        + basis.expression_basis @ (e * basis.expression_sigma)
    )


def _axis_rotations(angles):
    rx, ry, rz = angles
    cx, sx = np.cos(rx), np.sin(rx)
    cy, sy = np.cos(ry), np.sin(ry)
    cz, sz = np.cos(rz), np.sin(rz)
    Rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    Ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    Rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    dRx = np.array([[0, 0, 0], [0, -sx, -cx], [0, cx, -sx]])
    dRy = np.array([[-sy, 0, cy], [0, 0, 0], [-cy, 0, -sy]])
    dRz = np.array([[-sz, -cz, 0], [cz, -sz, 0], [0, 0, 0]])
    return (Rx, Ry, Rz), (dRx, dRy, dRz)


def rotation_matrix(angles) -> np.ndarray:
    (Rx, Ry, Rz), _ = _axis_rotations(angles)
    return Rz @ Ry @ Rx


def euler_from_matrix(R: np.ndarray) -> np.ndarray:
    ry = -np.arcsin(np.clip(R[2, 0], -1.0, 1.0))
    rx = np.arctan2(R[2, 1], R[2, 2])
    rz = np.arctan2(R[1, 0], R[0, 0])
    return np.array([rx, ry, rz])


def projection_matrix(p) -> np.ndarray:
    """The 2×3 matrix ``scale * Π R`` of a pose."""
    p = np.asarray(p, dtype=np.float64)
    return p[5] * rotation_matrix(p[:3])[:2]


def project_points(vertices: np.ndarray, p, indices) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    v = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)[np.asarray(indices)]
    return v @ projection_matrix(p).T + p[3:5]


def project_landmarks(vertices: np.ndarray, p, indices, subset: str = "all") -> LandmarkSet:
    return LandmarkSet(project_points(vertices, p, indices), subset)


def landmarks_for(basis: FaceBasis, params: FaceParams, subset: str = "all") -> LandmarkSet:
    verts = reconstruct_mesh(basis, params.s, params.e)
    idx = basis.landmark_indices[basis.subset(subset)]
    return project_landmarks(verts, params.p, idx, subset)


def _rows(basis: FaceBasis, positions: np.ndarray) -> np.ndarray:
    vidx = basis.landmark_indices[positions]
    return (3 * vidx[:, None] + np.arange(3)[None, :]).reshape(-1)


def landmark_jacobian(basis: FaceBasis, params: FaceParams, subset: str = "all") -> np.ndarray:
    """d(landmark coords)/d(s, e, p): shape (2L, D_s + D_e + 6).

    Rows are ordered ``x0, y0, x1, y1, ...``.
    """
    pos = basis.subset(subset)
    rows = _rows(basis, pos)
    n = pos.shape[0]
    p = params.p
    (Rx, Ry, Rz), (dRx, dRy, dRz) = _axis_rotations(p[:3])
    R = Rz @ Ry @ Rx
    A = p[5] * R[:2]
    G = basis.geometry_basis[rows] * basis.geometry_sigma  # (3n, Ds)
    E = basis.expression_basis[rows] * basis.expression_sigma
    Gs = G.reshape(n, 3, -1)
    Es = E.reshape(n, 3, -1)
    J_s = np.einsum("ij,njk->nik", A, Gs).reshape(2 * n, -1)
    J_e = np.einsum("ij,njk->nik", A, Es).reshape(2 * n, -1)
    verts = reconstruct_mesh(basis, params.s, params.e)[rows].reshape(n, 3)
    J_p = np.zeros((n, 2, POSE_DIM))
    for k, dR in enumerate((Rz @ Ry @ dRx, Rz @ dRy @ Rx, dRz @ Ry @ Rx)):
        J_p[:, :, k] = verts @ (p[5] * dR[:2]).T
    J_p[:, 0, 3] = 1.0
    J_p[:, 1, 4] = 1.0
    J_p[:, :, 5] = verts @ R[:2].T
    return np.concatenate([J_s, J_e, J_p.reshape(2 * n, POSE_DIM)], axis=1)


def expression_jacobian(basis: FaceBasis, p, subset: str = "mouth") -> np.ndarray:
    """The (constant) e-block: d(landmarks)/d(e) for pose ``p``."""
    pos = basis.subset(subset)
    rows = _rows(basis, pos)
    E = (basis.expression_basis[rows] * basis.expression_sigma).reshape(pos.shape[0], 3, -1)
    return np.einsum("ij,njk->nik", projection_matrix(p), E).reshape(2 * pos.shape[0], -1)


# ---------------------------------------------------------------------------
# fitting


@dataclass
class FitReport:
    costs: list[float]
    iterations: int
    converged: bool
    final_damping: float
    rmse: float


def estimate_pose(observed: LandmarkSet, basis: FaceBasis) -> np.ndarray:
    """Closed-form weak-perspective pose aligning mean-shape landmarks to ``observed``."""
    X = basis.mean_shape.reshape(-1, 3)[basis.landmark_indices]
    Y = observed.points
    Xh = np.hstack([X, np.ones((X.shape[0], 1))])
    M, *_ = np.linalg.lstsq(Xh, Y, rcond=None)  # (4, 2)
    A = M[:3].T
    U, S, Vt = np.linalg.svd(A, full_matrices=False)
    r12 = U @ Vt
    R = np.vstack([r12, np.cross(r12[0], r12[1])])
    return np.concatenate([euler_from_matrix(R), M[3], [S.mean()]])


def initial_params(observed: LandmarkSet, basis: FaceBasis) -> FaceParams:
    """Zero coefficients plus the closed-form pose."""
    return FaceParams(np.zeros(basis.dim_s), np.zeros(basis.dim_e), estimate_pose(observed, basis))


def fit_params(
    observed: LandmarkSet,
    basis: FaceBasis,
    init: FaceParams | None = None,
    w_reg: float = W_REG,
    max_iter: int = 100,
    tol: float = 1e-12,
    damping: float = 1e-3,
    max_damping: float = 1e7,
) -> tuple[FaceParams, FitReport]:
    """Levenberg–Marquardt on ``sum |l(q) - obs|^2 + w_reg (|s|^2 + |e|^2)``."""
    if len(observed) != basis.n_landmarks:
        raise ValueError(f"expected {basis.n_landmarks} landmarks, got {len(observed)}")
    if init is None:
        init = initial_params(observed, basis)
    ds, de = basis.dim_s, basis.dim_e
    target = observed.flat()
    reg = np.zeros(ds + de + POSE_DIM)
    reg[: ds + de] = w_reg

    def cost_of(params: FaceParams) -> tuple[float, np.ndarray]:
        r = landmarks_for(basis, params).flat() - target
        return float(r @ r + w_reg * (params.s @ params.s + params.e @ params.e)), r

    params = FaceParams(init.s.copy(), init.e.copy(), init.p.copy())
    if not np.all(np.isfinite(params.vector())):
        raise ValueError("initial parameters must be finite")
    cost, r = cost_of(params)
    costs = [cost]
    mu = damping
    converged = cost <= tol
    it = 0
    while not converged and it < max_iter:
        it += 1
        J = landmark_jacobian(basis, params)
        q = params.vector()
        grad = J.T @ r + reg * q
        H = J.T @ J + np.diag(reg)
        accepted = False
        while mu <= max_damping:
            try:
                step = np.linalg.solve(H + mu * np.eye(H.shape[0]), -grad)
            except np.linalg.LinAlgError:
                mu *= 10
                continue
            qn = q + step
            if qn[-1] <= 0 or not np.all(np.isfinite(qn)):
                mu *= 10
                continue
            cand = FaceParams.from_vector(qn, ds, de)
            c_new, r_new = cost_of(cand)
            if c_new <= cost:
                accepted = True
                break
            mu *= 10
        if not accepted:
            if np.linalg.norm(grad) < 1e-6 * max(1.0, cost):
                converged = True
                break
            raise FitError(
                f"no descent step found at damping {mu:.3g} "
                f"(cost={cost:.6g}, |grad|={np.linalg.norm(grad):.3g}, iteration {it})"
            )
        decrease = cost - c_new
        params, cost, r = cand, c_new, r_new
        costs.append(cost)
        mu = max(mu * 0.5, 1e-12)
        if decrease <= tol * max(1.0, cost) or np.linalg.norm(step) < 1e-12:
            converged = True
    n = basis.n_landmarks
    rmse = float(np.sqrt(np.mean(np.sum(r.reshape(n, 2) ** 2, axis=1))))
    return params, FitReport(costs, it, converged, mu, rmse)
