"""Builder for complementarity-structured cone programs.

Contact and limit models are authored as square residual systems: the model
supplies the stationarity rows (before the dual is subtracted) and any
equality rows together with their Jacobians; the builder appends the
template parts, i.e. the -nu column in the stationarity block and the
relaxed complementarity rows paired blockwise with the cone spec.
"""
from __future__ import annotations

from typing import Callable

import numpy as np

from ..cones import (
    ConeSpec,
    complementarity_jacobians,
    complementarity_residual,
)
from ..solver import ConeProgram

__all__ = ["ncp_cone_program"]

CoreFn = Callable[[np.ndarray, np.ndarray, np.ndarray], tuple[np.ndarray, np.ndarray]]
CoreJacFn = Callable[
    [np.ndarray, np.ndarray, np.ndarray],
    tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray],
]


def ncp_cone_program(
    cone: ConeSpec,
    q: int,
    p: int,
    core: CoreFn,
    core_jacobians: CoreJacFn,
) -> ConeProgram:
    """Wrap model-authored rows into a solvable cone program.

    ``core(z, lam, theta)`` returns (stationarity rows of length k, equality
    rows of length q); ``core_jacobians`` returns their derivatives
    (S_z, S_lam, S_theta, E_z, E_theta). The assembled residual is

        [stationarity - nu;  equality;  complementarity(z, nu, mu)]
    """
    k = cone.total_dim

    def residual(w: np.ndarray, theta: np.ndarray, mu: float) -> np.ndarray:
        z = w[:k]
        lam = w[k : k + q]
        nu = w[k + q :]
        stat, eq = core(z, lam, theta)
        stat = np.asarray(stat, dtype=float)
        eq = np.asarray(eq, dtype=float).reshape(-1)
        if stat.shape != (k,):
            raise ValueError(f"stationarity rows have shape {stat.shape}, expected ({k},)")
        if eq.shape != (q,):
            raise ValueError(f"equality rows have shape {eq.shape}, expected ({q},)")
        comp = complementarity_residual(cone, z, nu, mu)
        return np.concatenate([stat - nu, eq, comp])

    def residual_jacobian_w(w: np.ndarray, theta: np.ndarray, mu: float) -> np.ndarray:
        z = w[:k]
        lam = w[k : k + q]
        nu = w[k + q :]
        Sz, Slam, _, Ez, _ = core_jacobians(z, lam, theta)
        dz, dnu = complementarity_jacobians(cone, z, nu)
        dim = 2 * k + q
        J = np.zeros((dim, dim))
        J[:k, :k] = Sz
        if q:
            J[:k, k : k + q] = Slam
            J[k : k + q, :k] = Ez
        J[:k, k + q :] = -np.eye(k)
        J[k + q :, :k] = dz
        J[k + q :, k + q :] = dnu
        return J

    def residual_jacobian_theta(w: np.ndarray, theta: np.ndarray, mu: float) -> np.ndarray:
        z = w[:k]
        lam = w[k : k + q]
        _, _, Stheta, _, Etheta = core_jacobians(z, lam, theta)
        dim = 2 * k + q
        Jt = np.zeros((dim, p))
        Jt[:k, :] = Stheta
        if q:
            Jt[k : k + q, :] = Etheta
        return Jt

    return ConeProgram(
        k=k,
        q=q,
        p=p,
        cone=cone,
        residual=residual,
        residual_jacobian_w=residual_jacobian_w,
        residual_jacobian_theta=residual_jacobian_theta,
    )
