"""Primal-dual path-following solver for cone-constrained residual systems.

A problem is described by a residual r(w; theta, mu) over the stacked iterate
w = (z, lam, nu): k stationarity rows, q equality rows, and k relaxed
complementarity rows. Newton steps with a cone-feasible backtracking line
search drive the residual below tolerance at each level of a geometrically
decreasing central-path parameter; the iterate cached at each level supports
implicit differentiation of the solution map at a relaxed level.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .cones import (
    ConeKind,
    ConeSpec,
    complementarity_jacobians,
    complementarity_residual,
    contains,
    dual,
    identity_element,
)

__all__ = [
    "ConeProgram",
    "SolverSettings",
    "SolverStatus",
    "SolverTrace",
    "Sensitivity",
    "SolverError",
    "ModelEvaluationError",
    "solve",
    "differentiate",
    "ift_sensitivity",
    "assemble_standard_residual",
]


class SolverError(RuntimeError):
    """Raised when a solve or sensitivity request cannot be honored."""


class ModelEvaluationError(RuntimeError):
    """Raised when a model callback returns non-finite values."""


ResidualFn = Callable[[np.ndarray, np.ndarray, float], np.ndarray]
JacobianFn = Callable[[np.ndarray, np.ndarray, float], np.ndarray]


@dataclass
class ConeProgram:
    """Residual-oriented description of a cone-constrained problem.

    Args:
        k: dimension of the decision variable z (and of its dual nu).
        q: number of equality rows (dimension of lam).
        p: dimension of the problem data theta.
        cone: cone spec over z; nu lives in its dual.
        residual: (w, theta, mu) -> vector of length k + q + k.
        residual_jacobian_w: (w, theta, mu) -> (k+q+k) x (k+q+k) matrix.
        residual_jacobian_theta: (w, theta, mu) -> (k+q+k) x p matrix.
    """

    k: int
    q: int
    p: int
    cone: ConeSpec
    residual: ResidualFn
    residual_jacobian_w: JacobianFn
    residual_jacobian_theta: JacobianFn

    def __post_init__(self) -> None:
        if self.cone.total_dim != self.k:
            raise ValueError(
                f"cone dimension {self.cone.total_dim} does not match k={self.k}"
            )

    @property
    def dim(self) -> int:
        return 2 * self.k + self.q

    def split(self, w: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return w[: self.k], w[self.k : self.k + self.q], w[self.k + self.q :]


@dataclass
class SolverSettings:
    beta_ls: float = 0.5
    gamma_cp: float = 0.1
    eps_mu: float = 1e-4
    eps_r: float = 1e-8
    mu_init: float = 1.0
    max_newton_iters: int = 100
    max_line_search_iters: int = 50
    # Central-path level at which sensitivities are taken; None means one
    # level above termination (eps_mu / gamma_cp).
    mu_gradient: Optional[float] = None
    debug_log: Optional[str] = None
    keep_iterates: bool = False

    def __post_init__(self) -> None:
        if not 0.0 < self.beta_ls < 1.0:
            raise ValueError("beta_ls must lie in (0, 1)")
        if not 0.0 < self.gamma_cp < 1.0:
            raise ValueError("gamma_cp must lie in (0, 1)")
        if not self.eps_r < self.eps_mu:
            raise ValueError("eps_r must be smaller than eps_mu")
        if self.mu_init <= 0.0:
            raise ValueError("mu_init must be positive")

    def resolved_mu_gradient(self) -> float:
        if self.mu_gradient is not None:
            return self.mu_gradient
        return self.eps_mu / self.gamma_cp


class SolverStatus(Enum):
    CONVERGED = "Converged"
    MAX_ITERS = "MaxIters"
    LINE_SEARCH_STALL = "LineSearchStall"


@dataclass
class IterationRecord:
    iteration: int
    mu: float
    alpha: float
    residual_norm: float
    w: Optional[np.ndarray] = None


@dataclass
class SolverTrace:
    w: np.ndarray
    w_mu: list[tuple[float, np.ndarray]]
    status: SolverStatus
    newton_iterations: int
    final_residual_norm: float
    final_mu: float
    iterations: list[IterationRecord] = field(default_factory=list)

    @property
    def converged(self) -> bool:
        return self.status is SolverStatus.CONVERGED


@dataclass
class Sensitivity:
    dw_dtheta: np.ndarray
    dz_dtheta: np.ndarray
    mu_used: float
    rank_deficient: bool


def _eval_residual(
    program: ConeProgram, w: np.ndarray, theta: np.ndarray, mu: float
) -> np.ndarray:
    r = np.asarray(program.residual(w, theta, mu), dtype=float)
    if r.shape != (program.dim,):
        raise ValueError(
            f"residual returned shape {r.shape}, expected ({program.dim},)"
        )
    if not np.all(np.isfinite(r)):
        raise ModelEvaluationError("residual callback produced non-finite values")
    return r


def _eval_jacobian_w(
    program: ConeProgram, w: np.ndarray, theta: np.ndarray, mu: float
) -> np.ndarray:
    J = np.asarray(program.residual_jacobian_w(w, theta, mu), dtype=float)
    if J.shape != (program.dim, program.dim):
        raise ValueError(
            f"residual Jacobian has shape {J.shape}, expected square of {program.dim}"
        )
    if not np.all(np.isfinite(J)):
        raise ModelEvaluationError("residual Jacobian produced non-finite values")
    return J


def _initial_primal(cone: ConeSpec, warm_start: Optional[np.ndarray]) -> np.ndarray:
    """Identity elements blockwise; warm-start values are copied verbatim on
    free blocks and on cone blocks where they are strictly interior."""
    z = identity_element(cone).copy()
    if warm_start is None:
        return z
    ws = np.asarray(warm_start, dtype=float)
    if ws.shape != (cone.total_dim,):
        raise ValueError(
            f"warm start has shape {ws.shape}, expected ({cone.total_dim},)"
        )
    for block, sl in zip(cone.blocks, cone.slices()):
        if block.kind is ConeKind.FREE:
            z[sl] = ws[sl]
        elif contains(ConeSpec((block,)), ws[sl], strict=True):
            z[sl] = ws[sl]
    return z


_REGULARIZATIONS = (0.0, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6, 1e-5, 1e-4)


def _newton_direction(J: np.ndarray, r: np.ndarray) -> Optional[np.ndarray]:
    for reg in _REGULARIZATIONS:
        A = J if reg == 0.0 else J + reg * np.eye(J.shape[0])
        try:
            dw = np.linalg.solve(A, r)
        except np.linalg.LinAlgError:
            continue
        if np.all(np.isfinite(dw)):
            return dw
    return None


def solve(
    program: ConeProgram,
    theta: np.ndarray,
    warm_start: Optional[np.ndarray] = None,
    settings: Optional[SolverSettings] = None,
) -> SolverTrace:
    """Path-following solve of a cone program at the given problem data.

    Newton directions use the residual Jacobian at the current iterate. The
    step length is backtracked first until z and nu stay strictly inside
    their cones, then until the residual norm strictly decreases. When the
    residual at the current central-path level is below tolerance the iterate
    is cached and the level is shrunk by ``gamma_cp``; the loop exits once
    the level falls below ``eps_mu``. Hitting an iteration or line-search cap
    returns the best iterate with a non-converged status; any iterates cached
    so far remain usable for differentiation.
    """
    st = settings if settings is not None else SolverSettings()
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    if theta.shape != (program.p,):
        raise ValueError(f"theta has shape {theta.shape}, expected ({program.p},)")

    k, q = program.k, program.q
    cone = program.cone
    dual_cone = dual(cone)

    z0 = _initial_primal(cone, warm_start)
    nu0 = identity_element(dual_cone)
    w = np.concatenate([z0, np.zeros(q), nu0])

    mu = st.mu_init
    r = _eval_residual(program, w, theta, mu)
    rnorm = float(np.linalg.norm(r))

    w_mu: list[tuple[float, np.ndarray]] = []
    records: list[IterationRecord] = []
    status = SolverStatus.CONVERGED
    total_newton = 0
    last_cached_norm = rnorm
    failed = False

    while mu >= st.eps_mu and not failed:
        level_iters = 0
        while rnorm >= st.eps_r:
            if level_iters >= st.max_newton_iters:
                status = SolverStatus.MAX_ITERS
                failed = True
                break
            J = _eval_jacobian_w(program, w, theta, mu)
            dw = _newton_direction(J, r)
            if dw is None:
                status = SolverStatus.LINE_SEARCH_STALL
                failed = True
                break

            # Phase one: shrink alpha until the candidate stays interior.
            dz = dw[:k]
            dnu = dw[k + q :]
            z = w[:k]
            nu = w[k + q :]
            alpha = 1.0
            ls_iters = 0
            feasible = False
            while ls_iters < st.max_line_search_iters:
                if contains(cone, z - alpha * dz, strict=True) and contains(
                    dual_cone, nu - alpha * dnu, strict=True
                ):
                    feasible = True
                    break
                alpha *= st.beta_ls
                ls_iters += 1
            if not feasible:
                status = SolverStatus.LINE_SEARCH_STALL
                failed = True
                break

            # Phase two: shrink alpha until the residual norm decreases.
            accepted = False
            while ls_iters < st.max_line_search_iters:
                r_new = _eval_residual(program, w - alpha * dw, theta, mu)
                rnorm_new = float(np.linalg.norm(r_new))
                if rnorm_new < rnorm:
                    accepted = True
                    break
                alpha *= st.beta_ls
                ls_iters += 1
            if not accepted:
                status = SolverStatus.LINE_SEARCH_STALL
                failed = True
                break

            w = w - alpha * dw
            r = r_new
            rnorm = rnorm_new
            total_newton += 1
            level_iters += 1
            if st.debug_log or st.keep_iterates:
                records.append(
                    IterationRecord(
                        iteration=total_newton,
                        mu=mu,
                        alpha=alpha,
                        residual_norm=rnorm,
                        w=w.copy() if st.keep_iterates else None,
                    )
                )
        if failed:
            break
        w_mu.append((mu, w.copy()))
        last_cached_norm = rnorm
        mu = st.gamma_cp * mu
        if mu >= st.eps_mu:
            # The complementarity rows depend on mu; refresh before iterating.
            r = _eval_residual(program, w, theta, mu)
            rnorm = float(np.linalg.norm(r))

    final_norm = last_cached_norm if status is SolverStatus.CONVERGED else rnorm
    trace = SolverTrace(
        w=w,
        w_mu=w_mu,
        status=status,
        newton_iterations=total_newton,
        final_residual_norm=final_norm,
        final_mu=mu,
        iterations=records,
    )
    if st.debug_log:
        _write_debug_log(st.debug_log, records)
    return trace


def _write_debug_log(path: str, records: list[IterationRecord]) -> None:
    log_path = Path(path)
    log_path.parent.mkdir(parents=True, exist_ok=True)
    with log_path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "mu", "alpha", "residual_norm"])
        for rec in records:
            writer.writerow([rec.iteration, rec.mu, rec.alpha, rec.residual_norm])


def ift_sensitivity(
    program: ConeProgram, w: np.ndarray, theta: np.ndarray, mu: float
) -> Sensitivity:
    """Implicit-function-theorem sensitivity at a given iterate and level.

    Solves dr/dw . dw/dtheta = -dr/dtheta; falls back to least squares and
    flags the result when the Jacobian is rank deficient.
    """
    J = _eval_jacobian_w(program, w, theta, mu)
    Jt = np.asarray(program.residual_jacobian_theta(w, theta, mu), dtype=float)
    if Jt.shape != (program.dim, program.p):
        raise ValueError(
            f"theta Jacobian has shape {Jt.shape}, expected ({program.dim}, {program.p})"
        )
    dw = None
    rank_deficient = False
    try:
        cand = np.linalg.solve(J, -Jt)
        if np.all(np.isfinite(cand)):
            resid = J @ cand + Jt
            col_ok = np.linalg.norm(resid, axis=0) <= 1e-8 * (
                1.0 + np.linalg.norm(Jt, axis=0)
            )
            if np.all(col_ok):
                dw = cand
    except np.linalg.LinAlgError:
        pass
    if dw is None:
        dw, _, rank, _ = np.linalg.lstsq(J, -Jt, rcond=None)
        rank_deficient = True
    return Sensitivity(
        dw_dtheta=dw,
        dz_dtheta=dw[: program.k],
        mu_used=mu,
        rank_deficient=rank_deficient,
    )


def differentiate(
    program: ConeProgram,
    trace: SolverTrace,
    theta: np.ndarray,
    settings: Optional[SolverSettings] = None,
) -> Sensitivity:
    """Differentiate the solution map at the cached relaxed-level iterate.

    Picks the cached iterate whose central-path level is closest (in log
    scale) to ``settings.mu_gradient`` and applies the implicit-function
    theorem there.
    """
    st = settings if settings is not None else SolverSettings()
    if not trace.w_mu:
        raise SolverError(
            "no cached central-path iterates: the solve never reached the "
            "residual tolerance at any level"
        )
    target = math.log(st.resolved_mu_gradient())
    mu_sel, w_sel = min(trace.w_mu, key=lambda pair: abs(math.log(pair[0]) - target))
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    return ift_sensitivity(program, w_sel, theta, mu_sel)


def assemble_standard_residual(
    objective_grad: Callable[[np.ndarray, np.ndarray], np.ndarray],
    objective_hess: Callable[[np.ndarray, np.ndarray], np.ndarray],
    constraint: Callable[[np.ndarray, np.ndarray], np.ndarray],
    constraint_jac_z: Callable[[np.ndarray, np.ndarray], np.ndarray],
    constraint_jac_theta: Callable[[np.ndarray, np.ndarray], np.ndarray],
    cone: ConeSpec,
    *,
    q: int,
    p: int,
    objective_grad_theta_jac: Optional[
        Callable[[np.ndarray, np.ndarray], np.ndarray]
    ] = None,
    constraint_curvature: Optional[
        Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]
    ] = None,
) -> ConeProgram:
    """Assemble the KKT residual of  min l(z; theta)  s.t.  c(z; theta) = 0,
    z in K  as a ConeProgram.

    Rows stack stationarity (grad l + Jc^T lam - nu), the equality residual,
    and relaxed complementarity built from the cone product and identity
    element. ``objective_grad_theta_jac`` supplies d(grad l)/dtheta when the
    objective couples z and theta; ``constraint_curvature`` supplies
    d(Jc^T lam)/dz for constraints that are not affine in z. Both default to
    zero.
    """
    k = cone.total_dim

    def _split(w: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return w[:k], w[k : k + q], w[k + q :]

    def residual(w: np.ndarray, theta: np.ndarray, mu: float) -> np.ndarray:
        z, lam, nu = _split(w)
        grad = np.asarray(objective_grad(z, theta), dtype=float)
        if grad.shape != (k,):
            raise ValueError(f"objective gradient has shape {grad.shape}, expected ({k},)")
        cval = np.asarray(constraint(z, theta), dtype=float).reshape(-1)
        if cval.shape != (q,):
            raise ValueError(f"constraint value has shape {cval.shape}, expected ({q},)")
        Jc = np.asarray(constraint_jac_z(z, theta), dtype=float).reshape(q, k)
        stationarity = grad + Jc.T @ lam - nu
        comp = complementarity_residual(cone, z, nu, mu)
        return np.concatenate([stationarity, cval, comp])

    def residual_jacobian_w(w: np.ndarray, theta: np.ndarray, mu: float) -> np.ndarray:
        z, lam, nu = _split(w)
        H = np.asarray(objective_hess(z, theta), dtype=float).reshape(k, k)
        Jc = np.asarray(constraint_jac_z(z, theta), dtype=float).reshape(q, k)
        if constraint_curvature is not None:
            H = H + np.asarray(constraint_curvature(z, theta, lam), dtype=float)
        dz, dnu = complementarity_jacobians(cone, z, nu)
        dim = 2 * k + q
        J = np.zeros((dim, dim))
        J[:k, :k] = H
        J[:k, k : k + q] = Jc.T
        J[:k, k + q :] = -np.eye(k)
        J[k : k + q, :k] = Jc
        J[k + q :, :k] = dz
        J[k + q :, k + q :] = dnu
        return J

    def residual_jacobian_theta(
        w: np.ndarray, theta: np.ndarray, mu: float
    ) -> np.ndarray:
        z, lam, nu = _split(w)
        dim = 2 * k + q
        Jt = np.zeros((dim, p))
        if objective_grad_theta_jac is not None:
            Jt[:k, :] = np.asarray(objective_grad_theta_jac(z, theta), dtype=float)
        Jt[k : k + q, :] = np.asarray(constraint_jac_theta(z, theta), dtype=float).reshape(
            q, p
        )
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
