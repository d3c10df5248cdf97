"""SE(3)/Sim(3) value types, tangent-space maps, and point-set alignment.

Transforms act on points as ``x -> s * R @ x + t`` and compose in function
application order: ``(a @ b).act(x) == a.act(b.act(x))``.  Tangent vectors are
ordered ``[rho(3), phi(3), sigma]`` (translation, rotation, log-scale).

Two layers coexist: small frozen value classes (:class:`UnitQuaternion`,
:class:`SE3Pose`, :class:`Sim3Transform`) for the public API, and private
batched helpers operating on packed ``(..., 8)`` float arrays laid out as
``[s, tx, ty, tz, qw, qx, qy, qz]``.  The batched layer is what the pose-graph
solver uses for vectorized residual/Jacobian evaluation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

# Below this rotation angle / |log scale| the closed-form exp/log coefficients
# switch to series fallbacks (0/0 removal).
TAYLOR_EPS = 1e-5


class BranchAmbiguityError(ValueError):
    """Rotation angle at pi: the principal logarithm branch is undefined."""


class DegenerateGeometryError(ValueError):
    """Point configuration too degenerate (coincident/collinear) to align."""


# ---------------------------------------------------------------------------
# quaternion helpers (arrays shaped (..., 4), components [w, x, y, z])
# ---------------------------------------------------------------------------


def quat_mul(q1, q2):
    w1, x1, y1, z1 = q1[..., 0], q1[..., 1], q1[..., 2], q1[..., 3]
    w2, x2, y2, z2 = q2[..., 0], q2[..., 1], q2[..., 2], q2[..., 3]
    return np.stack(
        [
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        ],
        axis=-1,
    )


def quat_conj(q):
    out = np.array(q, copy=True)
    out[..., 1:] *= -1.0
    return out


def quat_rotate(q, v):
    """Rotate vectors ``v`` (..., 3) by unit quaternions ``q`` (..., 4)."""
    u = q[..., 1:]
    w = q[..., 0:1]
    uv = np.cross(u, v)
    return v + 2.0 * (w * uv + np.cross(u, uv))


def quat_normalize(q):
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def quat_canonicalize(q):
    """Flip sign so the hemisphere convention w >= 0 holds.

    Ties (w == 0) break on the first nonzero vector component, and negative
    zeros are normalised away, so ``quat_canonicalize(q)`` and
    ``quat_canonicalize(-q)`` are bitwise equal.
    """
    q = np.asarray(q, dtype=float)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    flip = (w < 0) | (
        (w == 0) & ((x < 0) | ((x == 0) & ((y < 0) | ((y == 0) & (z < 0)))))
    )
    out = np.where(flip[..., None], -q, q)
    return out + 0.0  # -0.0 -> +0.0 so the result is sign-unique bitwise


def quat_exp_map(phi):
    """so(3) -> unit quaternion, 4th-order series below TAYLOR_EPS."""
    phi = np.asarray(phi, dtype=float)
    theta2 = np.sum(phi * phi, axis=-1)
    theta = np.sqrt(theta2)
    small = theta < TAYLOR_EPS
    theta_safe = np.where(small, 1.0, theta)
    imag = np.where(
        small,
        0.5 - theta2 / 48.0 + theta2 * theta2 / 3840.0,
        np.sin(0.5 * theta_safe) / theta_safe,
    )
    real = np.where(
        small,
        1.0 - theta2 / 8.0 + theta2 * theta2 / 384.0,
        np.cos(0.5 * theta),
    )
    return np.concatenate([real[..., None], imag[..., None] * phi], axis=-1)


def quat_log_map(q, strict=False):
    """Unit quaternion -> rotation vector (principal branch, angle < pi).

    With ``strict`` the pi branch raises :class:`BranchAmbiguityError`
    instead of silently returning the nearly-ambiguous axis.
    """
    q = np.asarray(q, dtype=float)
    q = np.where(q[..., 0:1] < 0, -q, q)
    vec = q[..., 1:]
    w = q[..., 0]
    n = np.linalg.norm(vec, axis=-1)
    if strict and np.any(w < 1e-9):
        raise BranchAmbiguityError("rotation angle at pi, log branch ambiguous")
    small = n < TAYLOR_EPS
    w_safe = np.where(w <= 0, 1.0, w)
    x2 = np.where(small, (n / w_safe) ** 2, 0.0)
    n_safe = np.where(small, 1.0, n)
    factor = np.where(
        small,
        (2.0 / w_safe) * (1.0 - x2 / 3.0 + x2 * x2 / 5.0),
        2.0 * np.arctan2(n, w) / n_safe,
    )
    return factor[..., None] * vec


def quat_to_matrix(q):
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    row = np.stack
    return np.stack(
        [
            row([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], axis=-1),
            row([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], axis=-1),
            row([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], axis=-1),
        ],
        axis=-2,
    )


def quat_from_matrix(m):
    """Rotation matrix (3x3) -> unit quaternion [w, x, y, z], Shepperd style."""
    m = np.asarray(m, dtype=float)
    t = np.trace(m)
    if t > 0:
        r = math.sqrt(1.0 + t)
        s = 0.5 / r
        q = np.array(
            [0.5 * r, (m[2, 1] - m[1, 2]) * s, (m[0, 2] - m[2, 0]) * s, (m[1, 0] - m[0, 1]) * s]
        )
    else:
        i = int(np.argmax(np.diag(m)))
        j, k = (i + 1) % 3, (i + 2) % 3
        r = math.sqrt(1.0 + m[i, i] - m[j, j] - m[k, k])
        s = 0.5 / r
        q = np.empty(4)
        q[0] = (m[k, j] - m[j, k]) * s
        q[1 + i] = 0.5 * r
        q[1 + j] = (m[j, i] + m[i, j]) * s
        q[1 + k] = (m[k, i] + m[i, k]) * s
    return quat_canonicalize(quat_normalize(q))


# ---------------------------------------------------------------------------
# packed Sim(3) batch layer: arrays (..., 8) = [s, t(3), q(4)]
# ---------------------------------------------------------------------------


def pk_identity(shape=()):
    out = np.zeros(shape + (8,))
    out[..., 0] = 1.0
    out[..., 4] = 1.0
    return out


def pk_compose(a, b):
    out = np.empty(np.broadcast_shapes(a.shape, b.shape))
    out[..., 0] = a[..., 0] * b[..., 0]
    out[..., 1:4] = a[..., 0, None] * quat_rotate(a[..., 4:8], b[..., 1:4]) + a[..., 1:4]
    out[..., 4:8] = quat_mul(a[..., 4:8], b[..., 4:8])
    return out


def pk_inverse(a):
    out = np.empty_like(a)
    s_inv = 1.0 / a[..., 0]
    qc = quat_conj(a[..., 4:8])
    out[..., 0] = s_inv
    out[..., 1:4] = -s_inv[..., None] * quat_rotate(qc, a[..., 1:4])
    out[..., 4:8] = qc
    return out


def pk_act(a, p):
    return a[..., 0, None] * quat_rotate(a[..., 4:8], p) + a[..., 1:4]


def _vmatrix_coeffs(theta, sigma):
    """Coefficients (C, A, B) of W = C*I + A*hat(phi) + B*hat(phi)^2.

    W is the scale-coupled translation integral
    ``int_0^1 exp(sigma*u) * exp(u*hat(phi)) du`` appearing in the Sim(3)
    exponential.  Closed forms when both |sigma| and theta exceed
    TAYLOR_EPS; series fallbacks (exact partial integrals expanded to 4th
    order in the small variable) otherwise.
    """
    theta = np.asarray(theta, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    theta, sigma = np.broadcast_arrays(theta, sigma)
    theta2 = theta * theta
    s = np.exp(sigma)
    small_t = theta < TAYLOR_EPS
    small_s = np.abs(sigma) < TAYLOR_EPS

    sig_safe = np.where(small_s, 1.0, sigma)
    C = np.where(
        small_s,
        1.0 + sigma / 2.0 + sigma**2 / 6.0 + sigma**3 / 24.0 + sigma**4 / 120.0,
        np.expm1(sigma) / sig_safe,
    )

    # exact closed forms (guarded); 1 - s*cos(t) via expm1/half-angle to avoid
    # catastrophic cancellation near the branch corner
    th_safe = np.where(small_t, 1.0, theta)
    denom = np.where(small_t | small_s, 1.0, th_safe * (theta2 + sigma * sigma))
    sin_t, cos_t = np.sin(theta), np.cos(theta)
    one_minus_scos = 2.0 * np.sin(0.5 * theta) ** 2 - np.expm1(sigma) * cos_t
    A_exact = (s * sigma * sin_t + th_safe * one_minus_scos) / denom
    denom2 = np.where(small_t | small_s, 1.0, theta2 + sigma * sigma)
    B_exact = (C - ((s * cos_t - 1.0) * sigma + s * sin_t * th_safe) / denom2) / np.where(
        small_t, 1.0, theta2
    )

    # both small: joint 4th-order Taylor
    A_joint = (
        0.5
        + sigma / 3.0
        + sigma**2 / 8.0
        + sigma**3 / 30.0
        + sigma**4 / 144.0
        - theta2 / 6.0 * (0.25 + sigma / 5.0 + sigma**2 / 12.0)
        + theta2 * theta2 / 720.0
    )
    B_joint = (
        0.5 * (1.0 / 3.0 + sigma / 4.0 + sigma**2 / 10.0 + sigma**3 / 36.0 + sigma**4 / 168.0)
        - theta2 / 24.0 * (0.2 + sigma / 6.0 + sigma**2 / 14.0)
        + theta2 * theta2 / 5040.0
    )

    # theta small, sigma not: I_n = int_0^1 u^n e^(sigma u) du by recurrence,
    # then sin/cos series in theta
    I = [C]
    for n in range(1, 7):
        I.append((s - n * I[n - 1]) / sig_safe)
    A_smallt = I[1] - theta2 / 6.0 * I[3] + theta2 * theta2 / 120.0 * I[5]
    B_smallt = 0.5 * I[2] - theta2 / 24.0 * I[4] + theta2 * theta2 / 720.0 * I[6]

    # sigma small, theta not: L^s_n = int u^n sin(u theta), L^c_n = cos flavor,
    # exp series in sigma
    Ls = [2.0 * np.sin(0.5 * theta) ** 2 / th_safe]
    Lc = [sin_t / th_safe]
    for n in range(1, 5):
        Ls.append((-cos_t + n * Lc[n - 1]) / th_safe)
        Lc.append((sin_t - n * Ls[n - 1]) / th_safe)
    A_smalls = (
        Ls[0] + sigma * Ls[1] + sigma**2 / 2.0 * Ls[2] + sigma**3 / 6.0 * Ls[3] + sigma**4 / 24.0 * Ls[4]
    ) / th_safe
    M = [1.0 / (n + 1.0) - Lc[n] for n in range(5)]
    B_smalls = (
        M[0] + sigma * M[1] + sigma**2 / 2.0 * M[2] + sigma**3 / 6.0 * M[3] + sigma**4 / 24.0 * M[4]
    ) / np.where(small_t, 1.0, theta2)

    A = np.where(small_t & small_s, A_joint, np.where(small_t, A_smallt, np.where(small_s, A_smalls, A_exact)))
    B = np.where(small_t & small_s, B_joint, np.where(small_t, B_smallt, np.where(small_s, B_smalls, B_exact)))
    return C, A, B


def pk_exp(v):
    """sim(3) tangent (..., 7) -> packed transform (..., 8)."""
    v = np.asarray(v, dtype=float)
    rho, phi, sigma = v[..., 0:3], v[..., 3:6], v[..., 6]
    theta = np.linalg.norm(phi, axis=-1)
    C, A, B = _vmatrix_coeffs(theta, sigma)
    c1 = np.cross(phi, rho)
    c2 = np.cross(phi, c1)
    t = C[..., None] * rho + A[..., None] * c1 + B[..., None] * c2
    out = np.empty(v.shape[:-1] + (8,))
    out[..., 0] = np.exp(sigma)
    out[..., 1:4] = t
    out[..., 4:8] = quat_exp_map(phi)
    return out


def _vmatrix(theta, sigma, phi):
    C, A, B = _vmatrix_coeffs(theta, sigma)
    hat = np.zeros(phi.shape[:-1] + (3, 3))
    hat[..., 0, 1] = -phi[..., 2]
    hat[..., 0, 2] = phi[..., 1]
    hat[..., 1, 0] = phi[..., 2]
    hat[..., 1, 2] = -phi[..., 0]
    hat[..., 2, 0] = -phi[..., 1]
    hat[..., 2, 1] = phi[..., 0]
    eye = np.broadcast_to(np.eye(3), hat.shape)
    return C[..., None, None] * eye + A[..., None, None] * hat + B[..., None, None] * (hat @ hat)


def pk_log(a, strict=False):
    """Packed transform (..., 8) -> sim(3) tangent (..., 7)."""
    a = np.asarray(a, dtype=float)
    sigma = np.log(a[..., 0])
    phi = quat_log_map(a[..., 4:8], strict=strict)
    theta = np.linalg.norm(phi, axis=-1)
    W = _vmatrix(theta, sigma, phi)
    rho = np.linalg.solve(W, a[..., 1:4, None])[..., 0]
    return np.concatenate([rho, phi, sigma[..., None]], axis=-1)


# ---------------------------------------------------------------------------
# public value classes
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class UnitQuaternion:
    """Unit quaternion, Hamilton convention, components (w, x, y, z)."""

    w: float
    x: float
    y: float
    z: float

    def __post_init__(self):
        n = math.sqrt(self.w**2 + self.x**2 + self.y**2 + self.z**2)
        if not math.isfinite(n) or n == 0:
            raise ValueError("cannot normalize zero/non-finite quaternion")
        if abs(n - 1.0) > 1e-12:
            object.__setattr__(self, "w", self.w / n)
            object.__setattr__(self, "x", self.x / n)
            object.__setattr__(self, "y", self.y / n)
            object.__setattr__(self, "z", self.z / n)

    @classmethod
    def identity(cls):
        return cls(1.0, 0.0, 0.0, 0.0)

    @classmethod
    def from_array(cls, q):
        return cls(float(q[0]), float(q[1]), float(q[2]), float(q[3]))

    @classmethod
    def from_axis_angle(cls, axis, angle):
        axis = np.asarray(axis, dtype=float)
        axis = axis / np.linalg.norm(axis)
        return cls.from_array(quat_exp_map(axis * angle))

    @classmethod
    def from_matrix(cls, m):
        return cls.from_array(quat_from_matrix(m))

    def array(self):
        return np.array([self.w, self.x, self.y, self.z])

    def canonicalized(self):
        return UnitQuaternion.from_array(quat_canonicalize(self.array()))

    def conjugate(self):
        return UnitQuaternion(self.w, -self.x, -self.y, -self.z)

    def __mul__(self, other):
        return UnitQuaternion.from_array(quat_mul(self.array(), other.array()))

    def rotate(self, v):
        return quat_rotate(self.array(), np.asarray(v, dtype=float))

    def matrix(self):
        return quat_to_matrix(self.array())

    def angle(self):
        q = quat_canonicalize(self.array())
        return 2.0 * math.atan2(float(np.linalg.norm(q[1:])), float(q[0]))


@dataclass(frozen=True)
class SE3Pose:
    """Rigid transform; maps points from its source frame into its target frame."""

    rotation: UnitQuaternion
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "translation", np.array(self.translation, dtype=float))
        if self.translation.shape != (3,):
            raise ValueError("translation must be a 3-vector")

    @classmethod
    def identity(cls):
        return cls(UnitQuaternion.identity(), np.zeros(3))

    @classmethod
    def from_matrix(cls, m):
        return cls(UnitQuaternion.from_matrix(np.asarray(m)[:3, :3]), np.asarray(m)[:3, 3])

    def compose(self, other: "SE3Pose") -> "SE3Pose":
        return SE3Pose(
            self.rotation * other.rotation,
            self.rotation.rotate(other.translation) + self.translation,
        )

    def inverse(self) -> "SE3Pose":
        qc = self.rotation.conjugate()
        return SE3Pose(qc, -qc.rotate(self.translation))

    def act(self, p):
        return self.rotation.rotate(np.asarray(p, dtype=float)) + self.translation

    def matrix(self):
        m = np.eye(4)
        m[:3, :3] = self.rotation.matrix()
        m[:3, 3] = self.translation
        return m

    def as_sim3(self) -> "Sim3Transform":
        return Sim3Transform(1.0, self.rotation, self.translation)

    def __matmul__(self, other):
        return self.compose(other)


@dataclass(frozen=True)
class Sim3Transform:
    """Similarity transform acting as ``x -> scale * R @ x + translation``."""

    scale: float
    rotation: UnitQuaternion
    translation: np.ndarray

    def __post_init__(self):
        if not (self.scale > 0 and math.isfinite(self.scale)):
            raise ValueError(f"scale must be positive, got {self.scale}")
        object.__setattr__(self, "translation", np.array(self.translation, dtype=float))
        if self.translation.shape != (3,):
            raise ValueError("translation must be a 3-vector")

    @classmethod
    def identity(cls):
        return cls(1.0, UnitQuaternion.identity(), np.zeros(3))

    @classmethod
    def from_packed(cls, a):
        return cls(float(a[0]), UnitQuaternion.from_array(a[4:8]), a[1:4])

    @classmethod
    def from_matrix(cls, m):
        m = np.asarray(m, dtype=float)
        scale = float(np.cbrt(np.linalg.det(m[:3, :3])))
        return cls(scale, UnitQuaternion.from_matrix(m[:3, :3] / scale), m[:3, 3])

    @classmethod
    def exp(cls, v) -> "Sim3Transform":
        return cls.from_packed(pk_exp(np.asarray(v, dtype=float)))

    def packed(self):
        out = np.empty(8)
        out[0] = self.scale
        out[1:4] = self.translation
        out[4:8] = self.rotation.array()
        return out

    def compose(self, other: "Sim3Transform") -> "Sim3Transform":
        return Sim3Transform.from_packed(pk_compose(self.packed(), other.packed()))

    def inverse(self) -> "Sim3Transform":
        return Sim3Transform.from_packed(pk_inverse(self.packed()))

    def act(self, p):
        return pk_act(self.packed(), np.asarray(p, dtype=float))

    def log(self):
        return pk_log(self.packed(), strict=True)

    def matrix(self):
        m = np.eye(4)
        m[:3, :3] = self.scale * self.rotation.matrix()
        m[:3, 3] = self.translation
        return m

    def se3(self) -> SE3Pose:
        return SE3Pose(self.rotation, self.translation)

    def __matmul__(self, other):
        return self.compose(other)


# ---------------------------------------------------------------------------
# spec-level operations
# ---------------------------------------------------------------------------


def sim3_compose(a: Sim3Transform, b: Sim3Transform) -> Sim3Transform:
    """Group law: acting by the result equals acting by ``b`` then ``a``."""
    return a.compose(b)


def sim3_log(t: Sim3Transform) -> np.ndarray:
    """Principal-branch logarithm as a 7-vector [rho, phi, sigma]."""
    return t.log()


def sim3_exp(v) -> Sim3Transform:
    return Sim3Transform.exp(v)


def sim3_act(t: Sim3Transform, p):
    return t.act(p)


def umeyama_sim3(source, target) -> Sim3Transform:
    """Least-squares Sim(3) minimizing sum ||target_k - T(source_k)||^2.

    Standard variance-ratio scale estimate with the determinant-corrected
    rotation.  Requires >= 3 non-collinear correspondences.
    """
    src = np.asarray(source, dtype=float)
    tgt = np.asarray(target, dtype=float)
    if src.shape != tgt.shape or src.ndim != 2 or src.shape[1] != 3:
        raise ValueError("source/target must be matching (N, 3) arrays")
    n = src.shape[0]
    if n < 3:
        raise DegenerateGeometryError("need at least 3 correspondences")
    mu_s = src.mean(axis=0)
    mu_t = tgt.mean(axis=0)
    xs = src - mu_s
    xt = tgt - mu_t
    var_s = float(np.mean(np.sum(xs * xs, axis=1)))
    if var_s < 1e-18:
        raise DegenerateGeometryError("source points are coincident")
    cov = (xt.T @ xs) / n
    u, d, vt = np.linalg.svd(cov)
    if d[1] <= 1e-9 * max(d[0], 1e-30):
        raise DegenerateGeometryError("source points are collinear")
    sgn = np.eye(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        sgn[2, 2] = -1.0
    rot = u @ sgn @ vt
    scale = float(np.trace(np.diag(d) @ sgn)) / var_s
    if scale <= 0:
        raise DegenerateGeometryError("non-positive scale in alignment")
    trans = mu_t - scale * rot @ mu_s
    return Sim3Transform(scale, UnitQuaternion.from_matrix(rot), trans)


def transform_to_text(t: Sim3Transform) -> str:
    """Serialize as the 8-number line ``s tx ty tz qx qy qz qw``."""
    q = t.rotation.array()
    vals = [t.scale, *t.translation, q[1], q[2], q[3], q[0]]
    return " ".join(repr(float(v)) for v in vals)


def transform_from_text(line: str) -> Sim3Transform:
    vals = [float(v) for v in line.split()]
    if len(vals) != 8:
        raise ValueError(f"expected 8 fields, got {len(vals)}")
    s, tx, ty, tz, qx, qy, qz, qw = vals
    return Sim3Transform(s, UnitQuaternion(qw, qx, qy, qz), np.array([tx, ty, tz]))
