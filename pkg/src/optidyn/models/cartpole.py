"""Cart-pole whose slider and pivot both experience Coulomb friction.

The friction force on each joint solves a maximum-dissipation problem: it
minimizes the inner product with the midpoint joint velocity inside a cone
of radius N. Both joints share the one limit, which the experiment configs
derive from a friction coefficient and the total weight. A zero limit
collapses the cones, leaving the plain frictionless integrator.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..cones import ConeSpec, free, identity_element, second_order
from ..dynamics import ContinuousDynamics, DynamicsModel
from ..solver import SolverSettings
from ._ncp import ncp_cone_program

__all__ = [
    "CartpoleParams",
    "cartpole_model",
    "cartpole_continuous",
    "friction_limit_from_coefficient",
    "friction_forces",
]


@dataclass(frozen=True)
class CartpoleParams:
    cart_mass: float = 1.0
    pole_mass: float = 0.2
    pole_length: float = 0.5
    gravity: float = 9.81
    friction_limit: float = 0.0  # shared cone radius N for both joints

    def __post_init__(self) -> None:
        for name in ("cart_mass", "pole_mass", "pole_length"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.friction_limit < 0:
            raise ValueError("friction_limit must be nonnegative")


def friction_limit_from_coefficient(params: CartpoleParams, coefficient: float) -> float:
    """Cone radius from a Coulomb coefficient scaled by the total weight."""
    return coefficient * (params.cart_mass + params.pole_mass) * params.gravity


_B = np.array([[1.0], [0.0]])


def _mass_matrix(p: CartpoleParams, th: float) -> np.ndarray:
    ml = p.pole_mass * p.pole_length
    return np.array(
        [
            [p.cart_mass + p.pole_mass, ml * np.cos(th)],
            [ml * np.cos(th), ml * p.pole_length],
        ]
    )


def _mass_matrix_dth(p: CartpoleParams, th: float) -> np.ndarray:
    ml = p.pole_mass * p.pole_length
    return np.array([[0.0, -ml * np.sin(th)], [-ml * np.sin(th), 0.0]])


def _coriolis(p: CartpoleParams, th: float, v: np.ndarray) -> np.ndarray:
    ml = p.pole_mass * p.pole_length
    return np.array([-ml * np.sin(th) * v[1] ** 2, 0.0])


def _coriolis_dth(p: CartpoleParams, th: float, v: np.ndarray) -> np.ndarray:
    ml = p.pole_mass * p.pole_length
    return np.array([-ml * np.cos(th) * v[1] ** 2, 0.0])


def _coriolis_dv(p: CartpoleParams, th: float, v: np.ndarray) -> np.ndarray:
    ml = p.pole_mass * p.pole_length
    return np.array([[0.0, -2.0 * ml * np.sin(th) * v[1]], [0.0, 0.0]])


def _gravity(p: CartpoleParams, th: float) -> np.ndarray:
    return np.array([0.0, p.pole_mass * p.gravity * p.pole_length * np.sin(th)])


def _gravity_dth(p: CartpoleParams, th: float) -> np.ndarray:
    return np.array([0.0, p.pole_mass * p.gravity * p.pole_length * np.cos(th)])


def cartpole_continuous(params: CartpoleParams) -> ContinuousDynamics:
    """Smooth frictionless vector field."""

    def pieces(x, u):
        q, v = x[:2], x[2:]
        M = _mass_matrix(params, q[1])
        rhs = (_B @ np.atleast_1d(u)) - _coriolis(params, q[1], v) - _gravity(params, q[1])
        return q, v, M, rhs

    def f(x, u):
        _, v, M, rhs = pieces(x, u)
        return np.concatenate([v, np.linalg.solve(M, rhs)])

    def fx(x, u):
        q, v, M, rhs = pieces(x, u)
        a = np.linalg.solve(M, rhs)
        drhs_dq = np.zeros((2, 2))
        drhs_dq[:, 1] = -_coriolis_dth(params, q[1], v) - _gravity_dth(params, q[1])
        drhs_dq[:, 1] -= _mass_matrix_dth(params, q[1]) @ a
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


def friction_forces(model: DynamicsModel, z: np.ndarray) -> np.ndarray:
    """Per-joint friction forces from a solved decision vector."""
    if model.program.k == 2:
        return np.zeros(2)
    return np.array([z[3], z[5]])


def cartpole_model(
    params: CartpoleParams = CartpoleParams(),
    h: float = 0.05,
    settings: SolverSettings | None = None,
) -> DynamicsModel:
    """Implicit-midpoint step with per-joint friction cones.

    Decision stack: next configuration (free) plus one second-order block
    per joint holding (cone head, friction force). The equality rows pin each
    head at the shared limit; the stationarity rows for a friction block are
    (head multiplier, midpoint joint velocity), so at the solution the dual
    block is exactly the max-dissipation dual.
    """
    N = params.friction_limit
    with_friction = N > 0.0
    blocks = [free(2)]
    if with_friction:
        blocks += [second_order(2), second_order(2)]
    cone = ConeSpec(tuple(blocks))
    k = cone.total_dim
    q_eq = 2 if with_friction else 0
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
        bias = _coriolis(params, q_mid[1], v_mid) + _gravity(params, q_mid[1])
        dyn = M @ dv + h * (bias - _B @ u)
        if not with_friction:
            return dyn, np.zeros(0)
        b = np.array([z[3], z[5]])
        dyn = dyn - h * b
        stat = np.concatenate([dyn, [lam[0], v_mid[0]], [lam[1], v_mid[1]]])
        eq = np.array([z[2] - N, z[4] - N])
        return stat, eq

    def core_jacobians(z, lam, theta):
        q = theta[:2]
        v = theta[2:4]
        q_next = z[:2]
        q_mid = 0.5 * (q + q_next)
        v_mid = (q_next - q) * inv_h
        dv = 2.0 * (v_mid - v)
        M = _mass_matrix(params, q_mid[1])
        dM = _mass_matrix_dth(params, q_mid[1])
        c_dth = _coriolis_dth(params, q_mid[1], v_mid)
        c_dv = _coriolis_dv(params, q_mid[1], v_mid)
        G_dth = _gravity_dth(params, q_mid[1])

        dyn_dqnext = 2.0 * inv_h * M + c_dv
        dyn_dqnext[:, 1] += 0.5 * (dM @ dv + h * (c_dth + G_dth))
        dyn_dq = -2.0 * inv_h * M - c_dv
        dyn_dq[:, 1] += 0.5 * (dM @ dv + h * (c_dth + G_dth))

        Sz = np.zeros((k, k))
        Sz[:2, :2] = dyn_dqnext
        Slam = np.zeros((k, q_eq))
        Stheta = np.zeros((k, p))
        Stheta[:2, :2] = dyn_dq
        Stheta[:2, 2:4] = -2.0 * M
        Stheta[:2, 4:5] = -h * _B
        Ez = np.zeros((q_eq, k))
        Etheta = np.zeros((q_eq, p))
        if with_friction:
            Sz[0, 3] = -h
            Sz[1, 5] = -h
            # velocity rows of the friction blocks
            Sz[3, :2] = [inv_h, 0.0]
            Sz[5, :2] = [0.0, inv_h]
            Stheta[3, :2] = [-inv_h, 0.0]
            Stheta[5, :2] = [0.0, -inv_h]
            Slam[2, 0] = 1.0
            Slam[4, 1] = 1.0
            Ez[0, 2] = 1.0
            Ez[1, 4] = 1.0
        return Sz, Slam, Stheta, Ez, Etheta

    program = ncp_cone_program(cone, q_eq, p, core, core_jacobians)

    extract_z = np.zeros((4, k))
    extract_z[:2, :2] = np.eye(2)
    extract_z[2:, :2] = 2.0 * inv_h * np.eye(2)
    extract_theta = np.zeros((4, p))
    extract_theta[2:, :2] = -2.0 * inv_h * np.eye(2)
    extract_theta[2:, 2:4] = -np.eye(2)

    e = identity_element(cone)
    if with_friction:
        # scale the cone heads near the limit so warm starts sit interior
        e = e.copy()
        e[2] = max(N, 1e-3)
        e[4] = max(N, 1e-3)

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
        name="cartpole" if with_friction else "cartpole_smooth",
    )
