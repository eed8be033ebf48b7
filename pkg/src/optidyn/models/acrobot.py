"""Two-link underactuated pendulum with hard limits on the actuated elbow.

Angles are measured from the hanging configuration; only the elbow carries a
torque. The step solves an implicit-midpoint momentum balance together with
nonnegative limit impulses paired against the elbow's signed distance to its
stops, so impact forces at the joint stops are part of the dynamics solution.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..cones import ConeSpec, free, identity_element, nonneg
from ..dynamics import ContinuousDynamics, DynamicsModel
from ..solver import SolverSettings
from ._ncp import ncp_cone_program

__all__ = [
    "AcrobotParams",
    "acrobot_model",
    "acrobot_continuous",
    "joint_limit_distance",
    "acrobot_energy",
]


@dataclass(frozen=True)
class AcrobotParams:
    m1: float = 1.0
    m2: float = 1.0
    l1: float = 1.0
    l2: float = 1.0
    lc1: float = 0.5
    lc2: float = 0.5
    I1: float = 1.0 / 12.0
    I2: float = 1.0 / 12.0
    gravity: float = 9.81
    elbow_limit: float = np.pi / 2
    joint_limits: bool = True

    def __post_init__(self) -> None:
        for name in ("m1", "m2", "l1", "l2", "lc1", "lc2", "I1", "I2"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.elbow_limit <= 0:
            raise ValueError("elbow_limit must be positive")


def joint_limit_distance(params: AcrobotParams, q: np.ndarray) -> np.ndarray:
    """Signed distances of the elbow angle to its symmetric stops."""
    return np.array([params.elbow_limit - q[1], q[1] + params.elbow_limit])


_LIMIT_JAC = np.array([[0.0, -1.0], [0.0, 1.0]])
_B = np.array([[0.0], [1.0]])


def _mass_matrix(p: AcrobotParams, q2: float) -> np.ndarray:
    a = p.I1 + p.I2 + p.m1 * p.lc1**2 + p.m2 * (p.l1**2 + p.lc2**2)
    b = p.m2 * p.l1 * p.lc2
    d = p.I2 + p.m2 * p.lc2**2
    c2 = np.cos(q2)
    return np.array([[a + 2 * b * c2, d + b * c2], [d + b * c2, d]])


def _mass_matrix_dq2(p: AcrobotParams, q2: float) -> np.ndarray:
    b = p.m2 * p.l1 * p.lc2
    s2 = np.sin(q2)
    return np.array([[-2 * b * s2, -b * s2], [-b * s2, 0.0]])


def _coriolis(p: AcrobotParams, q2: float, v: np.ndarray) -> np.ndarray:
    b = p.m2 * p.l1 * p.lc2
    s2 = np.sin(q2)
    return np.array([-b * s2 * v[1] * (2 * v[0] + v[1]), b * s2 * v[0] ** 2])


def _coriolis_dq2(p: AcrobotParams, q2: float, v: np.ndarray) -> np.ndarray:
    b = p.m2 * p.l1 * p.lc2
    c2 = np.cos(q2)
    return np.array([-b * c2 * v[1] * (2 * v[0] + v[1]), b * c2 * v[0] ** 2])


def _coriolis_dv(p: AcrobotParams, q2: float, v: np.ndarray) -> np.ndarray:
    b = p.m2 * p.l1 * p.lc2
    s2 = np.sin(q2)
    return np.array(
        [[-2 * b * s2 * v[1], -2 * b * s2 * (v[0] + v[1])], [2 * b * s2 * v[0], 0.0]]
    )


def _gravity(p: AcrobotParams, q: np.ndarray) -> np.ndarray:
    g1 = (p.m1 * p.lc1 + p.m2 * p.l1) * p.gravity
    g2 = p.m2 * p.lc2 * p.gravity
    return np.array(
        [g1 * np.sin(q[0]) + g2 * np.sin(q[0] + q[1]), g2 * np.sin(q[0] + q[1])]
    )


def _gravity_dq(p: AcrobotParams, q: np.ndarray) -> np.ndarray:
    g1 = (p.m1 * p.lc1 + p.m2 * p.l1) * p.gravity
    g2 = p.m2 * p.lc2 * p.gravity
    c1 = np.cos(q[0])
    c12 = np.cos(q[0] + q[1])
    return np.array([[g1 * c1 + g2 * c12, g2 * c12], [g2 * c12, g2 * c12]])


def acrobot_energy(params: AcrobotParams, x: np.ndarray) -> float:
    """Kinetic plus potential energy of a state (q, v)."""
    q, v = x[:2], x[2:]
    M = _mass_matrix(params, q[1])
    g1 = params.m1 * params.lc1 + params.m2 * params.l1
    U = -g1 * params.gravity * np.cos(q[0]) - params.m2 * params.lc2 * params.gravity * np.cos(
        q[0] + q[1]
    )
    return float(0.5 * v @ M @ v + U)


def acrobot_continuous(params: AcrobotParams) -> ContinuousDynamics:
    """Smooth vector field of the unconstrained system."""

    def pieces(x, u):
        q, v = x[:2], x[2:]
        M = _mass_matrix(params, q[1])
        rhs = (_B @ np.atleast_1d(u)) - _coriolis(params, q[1], v) - _gravity(params, q)
        return q, v, M, rhs

    def f(x, u):
        _, v, M, rhs = pieces(x, u)
        return np.concatenate([v, np.linalg.solve(M, rhs)])

    def fx(x, u):
        q, v, M, rhs = pieces(x, u)
        a = np.linalg.solve(M, rhs)
        drhs_dq = -_gravity_dq(params, q)
        drhs_dq[:, 1] -= _coriolis_dq2(params, q[1], v)
        # moving M(q) a to the right-hand side contributes -dM/dq a
        drhs_dq[:, 1] -= _mass_matrix_dq2(params, q[1]) @ a
        drhs_dv = -_coriolis_dv(params, q[1], v)
        J = np.zeros((4, 4))
        J[:2, 2:] = np.eye(2)
        J[2:, :2] = np.linalg.solve(M, drhs_dq)
        J[2:, 2:] = np.linalg.solve(M, drhs_dv)
        return J

    def fu(x, u):
        M = _mass_matrix(params, x[1])
        J = np.zeros((4, 1))
        J[2:, :] = np.linalg.solve(M, _B)
        return J

    return ContinuousDynamics(n=4, m=1, f=f, fx=fx, fu=fu)


def acrobot_model(
    params: AcrobotParams = AcrobotParams(),
    h: float = 0.05,
    settings: SolverSettings | None = None,
) -> DynamicsModel:
    """Implicit-midpoint step with optional elbow-stop impulses.

    Decision stack: next configuration (free), limit impulses (nonnegative),
    and slacks equated to the signed distances by the equality rows. The
    complementarity rows pair each impulse with its slack. With the limit
    flag off the cone blocks disappear and the step is the plain integrator
    in configuration form.
    """
    limited = params.joint_limits
    blocks = [free(2)]
    if limited:
        blocks += [nonneg(2), nonneg(2)]
    cone = ConeSpec(tuple(blocks))
    k = cone.total_dim
    q_eq = 2 if limited else 0
    p = 5
    inv_h = 1.0 / h

    def core(z, lam, theta):
        q = theta[:2]
        v = theta[2:4]
        u = theta[4:5]
        q_next = z[:2]
        q_mid = 0.5 * (q + q_next)
        v_mid = (q_next - q) * inv_h
        dv = 2.0 * (v_mid - v)
        M = _mass_matrix(params, q_mid[1])
        bias = _coriolis(params, q_mid[1], v_mid) + _gravity(params, q_mid)
        dyn = M @ dv + h * (bias - _B @ u)
        if not limited:
            return dyn, np.zeros(0)
        lam_imp = z[2:4]
        s = z[4:6]
        dyn = dyn - _LIMIT_JAC.T @ lam_imp
        stat = np.concatenate([dyn, s, lam])
        eq = s - joint_limit_distance(params, q_next)
        return stat, eq

    def core_jacobians(z, lam, theta):
        q = theta[:2]
        v = theta[2:4]
        q_next = z[:2]
        q_mid = 0.5 * (q + q_next)
        v_mid = (q_next - q) * inv_h
        dv = 2.0 * (v_mid - v)
        M = _mass_matrix(params, q_mid[1])
        dM = _mass_matrix_dq2(params, q_mid[1])
        c_dq2 = _coriolis_dq2(params, q_mid[1], v_mid)
        c_dv = _coriolis_dv(params, q_mid[1], v_mid)
        G_dq = _gravity_dq(params, q_mid)

        dyn_dqnext = 2.0 * inv_h * M + h * (0.5 * G_dq) + c_dv
        dyn_dqnext[:, 1] += 0.5 * (dM @ dv + h * c_dq2)
        dyn_dq = -2.0 * inv_h * M + h * (0.5 * G_dq) - c_dv
        dyn_dq[:, 1] += 0.5 * (dM @ dv + h * c_dq2)

        Sz = np.zeros((k, k))
        Sz[:2, :2] = dyn_dqnext
        Slam = np.zeros((k, q_eq))
        Stheta = np.zeros((k, p))
        Stheta[:2, :2] = dyn_dq
        Stheta[:2, 2:4] = -2.0 * M
        Stheta[:2, 4:5] = -h * _B
        Ez = np.zeros((q_eq, k))
        Etheta = np.zeros((q_eq, p))
        if limited:
            Sz[:2, 2:4] = -_LIMIT_JAC.T
            Sz[2:4, 4:6] = np.eye(2)
            Slam[4:6, :] = np.eye(2)
            Ez[:, :2] = -_LIMIT_JAC
            Ez[:, 4:6] = np.eye(2)
        return Sz, Slam, Stheta, Ez, Etheta

    program = ncp_cone_program(cone, q_eq, p, core, core_jacobians)

    extract_z = np.zeros((4, k))
    extract_z[:2, :2] = np.eye(2)
    extract_z[2:, :2] = 2.0 * inv_h * np.eye(2)
    extract_theta = np.zeros((4, p))
    extract_theta[2:, :2] = -2.0 * inv_h * np.eye(2)
    extract_theta[2:, 2:4] = -np.eye(2)

    e = identity_element(cone)

    def warm_start(x, u, prev):
        if prev is not None:
            return prev
        z0 = e.copy()
        z0[:2] = x[:2]
        return z0

    return DynamicsModel(
        n=4,
        m=1,
        h=h,
        program=program,
        extract_z=extract_z,
        extract_theta=extract_theta,
        warm_start_policy=warm_start,
        settings=settings if settings is not None else SolverSettings(),
        name="acrobot" if limited else "acrobot_smooth",
    )
