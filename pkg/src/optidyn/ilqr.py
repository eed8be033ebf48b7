"""Iterative LQR over implicit-dynamics rollouts.

The inner loop alternates a time-reversed Riccati backward pass on the
penalty-augmented cost with line-searched closed-loop rollouts, so every
iterate is dynamically feasible. Trajectory-level equality constraints that
the dynamics do not absorb (terminal goals, periodicity) are enforced by an
augmented-Lagrangian outer loop with multiplier updates and penalty growth.
"""
from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

__all__ = [
    "QuadraticCost",
    "TrajectoryConstraint",
    "TrajectoryProblem",
    "ILQRSettings",
    "ILQRStatus",
    "Trajectory",
    "ALState",
    "BackwardPassError",
    "BackwardPassResult",
    "backward_pass",
    "forward_rollout",
    "rollout_controls",
    "solve_trajectory",
    "ConvergenceReport",
]


@dataclass
class QuadraticCost:
    """0.5 (x - x_ref)' Q (x - x_ref) + 0.5 (u - u_ref)' R (u - u_ref).

    With ``R`` set to None the cost is terminal and ignores controls.
    """

    Q: np.ndarray
    R: Optional[np.ndarray] = None
    x_ref: Optional[np.ndarray] = None
    u_ref: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        self.Q = np.atleast_2d(np.asarray(self.Q, dtype=float))
        if self.R is not None:
            self.R = np.atleast_2d(np.asarray(self.R, dtype=float))
        n = self.Q.shape[0]
        self.x_ref = (
            np.zeros(n) if self.x_ref is None else np.asarray(self.x_ref, dtype=float)
        )
        if self.R is not None:
            m = self.R.shape[0]
            self.u_ref = (
                np.zeros(m) if self.u_ref is None else np.asarray(self.u_ref, dtype=float)
            )

    def value(self, x: np.ndarray, u: Optional[np.ndarray] = None) -> float:
        dx = x - self.x_ref
        val = 0.5 * dx @ self.Q @ dx
        if self.R is not None and u is not None:
            du = u - self.u_ref
            val += 0.5 * du @ self.R @ du
        return float(val)

    def derivatives(self, x: np.ndarray, u: Optional[np.ndarray] = None):
        dx = x - self.x_ref
        gx = self.Q @ dx
        gxx = self.Q
        if self.R is None or u is None:
            return gx, gxx
        du = u - self.u_ref
        gu = self.R @ du
        guu = self.R
        gux = np.zeros((self.R.shape[0], self.Q.shape[0]))
        return gx, gu, gxx, guu, gux


@dataclass
class TrajectoryConstraint:
    """Equality constraint c(x_t) = 0 applied at knot-point index ``t``."""

    t: int
    fn: Callable[[np.ndarray], np.ndarray]
    jac: Callable[[np.ndarray], np.ndarray]
    dim: int
    name: str = ""


@dataclass
class TrajectoryProblem:
    """Finite-horizon problem over a dynamics model.

    ``model`` may be a single model (broadcast over all steps) or a sequence
    of per-step models of length T - 1; likewise ``stage_cost``. Knot points
    are indexed 0..T-1, controls 0..T-2.
    """

    T: int
    model: object
    stage_cost: object
    terminal_cost: QuadraticCost
    x1: np.ndarray
    constraints: list[TrajectoryConstraint] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.x1 = np.atleast_1d(np.asarray(self.x1, dtype=float))
        for con in self.constraints:
            if not 0 <= con.t < self.T:
                raise ValueError(f"constraint index {con.t} outside horizon {self.T}")

    def model_at(self, t: int):
        if isinstance(self.model, (list, tuple)):
            return self.model[t]
        return self.model

    def cost_at(self, t: int):
        if isinstance(self.stage_cost, (list, tuple)):
            return self.stage_cost[t]
        return self.stage_cost

    def constraints_at(self, t: int) -> list[TrajectoryConstraint]:
        return [c for c in self.constraints if c.t == t]


@dataclass
class ILQRSettings:
    max_iterations: int = 500
    max_outer_iterations: int = 20
    feedforward_tol: float = 1e-3
    objective_tol: float = 1e-4
    constraint_tol: float = 1e-4
    rho_init: float = 1.0
    rho_growth: float = 10.0
    # penalty grows when an outer iteration fails to halve the violation
    violation_improvement: float = 0.5
    reg_init: float = 1e-6
    reg_growth: float = 10.0
    reg_max: float = 1e9
    min_alpha: float = 2.0 ** -12
    log_path: Optional[str] = None
    # optional override for dynamics Jacobians: (model, x, u, step_result) -> (A, B)
    jacobian_fn: Optional[Callable] = None


class ILQRStatus(Enum):
    CONVERGED = "Converged"
    NOT_CONVERGED = "NotConverged"


class BackwardPassError(RuntimeError):
    def __init__(self, t: int, message: str):
        super().__init__(f"backward pass failed at step {t}: {message}")
        self.t = t


@dataclass
class Trajectory:
    xs: list[np.ndarray]
    us: list[np.ndarray]
    A: list[np.ndarray]
    B: list[np.ndarray]
    warm: list[object]
    objective: float
    constraint_violation: float
    step_converged: list[bool]
    step_results: Optional[list] = None


@dataclass
class ALState:
    multipliers: list[np.ndarray]
    rho: float

    @classmethod
    def fresh(cls, problem: TrajectoryProblem, rho: float) -> "ALState":
        return cls(
            multipliers=[np.zeros(c.dim) for c in problem.constraints], rho=rho
        )


@dataclass
class BackwardPassResult:
    gains: list[np.ndarray]
    feedforwards: list[np.ndarray]
    expected_decrease: tuple[float, float]

    @property
    def feedforward_norm(self) -> float:
        if not self.feedforwards:
            return 0.0
        return max(float(np.max(np.abs(d))) for d in self.feedforwards)


@dataclass
class ConvergenceReport:
    objective: float
    iterations: int
    constraint_violation: float
    wall_time_s: float
    status: ILQRStatus
    outer_iterations: int = 0
    final_rho: float = 0.0
    feedforward_norm: float = 0.0


def _constraint_values(problem: TrajectoryProblem, xs: list[np.ndarray]) -> list[np.ndarray]:
    return [np.atleast_1d(c.fn(xs[c.t])) for c in problem.constraints]


def _max_violation(values: list[np.ndarray]) -> float:
    if not values:
        return 0.0
    return max(float(np.max(np.abs(v))) for v in values)


def trajectory_objective(problem: TrajectoryProblem, xs, us) -> float:
    obj = sum(problem.cost_at(t).value(xs[t], us[t]) for t in range(problem.T - 1))
    return obj + problem.terminal_cost.value(xs[-1])


def al_objective(problem: TrajectoryProblem, traj: Trajectory, al: ALState) -> float:
    total = traj.objective
    for con, lam in zip(problem.constraints, al.multipliers):
        c = np.atleast_1d(con.fn(traj.xs[con.t]))
        total += float(lam @ c + 0.5 * al.rho * c @ c)
    return total


def _al_cost_terms(
    problem: TrajectoryProblem, al: ALState, t: int, x: np.ndarray, n: int
) -> tuple[np.ndarray, np.ndarray]:
    gx = np.zeros(n)
    gxx = np.zeros((n, n))
    for con, lam in zip(problem.constraints, al.multipliers):
        if con.t != t:
            continue
        c = np.atleast_1d(con.fn(x))
        J = np.atleast_2d(con.jac(x))
        gx += J.T @ (lam + al.rho * c)
        gxx += al.rho * J.T @ J
    return gx, gxx


def backward_pass(
    traj: Trajectory,
    problem: TrajectoryProblem,
    al: ALState,
    reg: float,
) -> BackwardPassResult:
    """Riccati recursion on the penalty-augmented cost.

    The control block of the action-value Hessian is regularized by ``reg``;
    a failed factorization raises ``BackwardPassError`` carrying the step
    index so the caller can escalate the regularization.
    """
    T = problem.T
    n = len(traj.xs[0])
    gx_T, gxx_T = problem.terminal_cost.derivatives(traj.xs[-1])
    al_gx, al_gxx = _al_cost_terms(problem, al, T - 1, traj.xs[-1], n)
    Vx = gx_T + al_gx
    Vxx = gxx_T + al_gxx

    gains: list[np.ndarray] = [None] * (T - 1)
    ffs: list[np.ndarray] = [None] * (T - 1)
    dV1 = 0.0
    dV2 = 0.0
    for t in reversed(range(T - 1)):
        gx, gu, gxx, guu, gux = problem.cost_at(t).derivatives(traj.xs[t], traj.us[t])
        al_gx, al_gxx = _al_cost_terms(problem, al, t, traj.xs[t], n)
        gx = gx + al_gx
        gxx = gxx + al_gxx
        A, B = traj.A[t], traj.B[t]
        Qx = gx + A.T @ Vx
        Qu = gu + B.T @ Vx
        Qxx = gxx + A.T @ Vxx @ A
        Quu = guu + B.T @ Vxx @ B
        Qux = gux + B.T @ Vxx @ A
        Quu_reg = Quu + reg * np.eye(Quu.shape[0])
        try:
            L = np.linalg.cholesky(0.5 * (Quu_reg + Quu_reg.T))
        except np.linalg.LinAlgError as exc:
            raise BackwardPassError(t, "control Hessian not positive definite") from exc

        def chol_solve(rhs):
            y = np.linalg.solve(L, rhs)
            return np.linalg.solve(L.T, y)

        K = -chol_solve(Qux)
        d = -chol_solve(Qu)
        gains[t] = K
        ffs[t] = d
        dV1 += float(d @ Qu)
        dV2 += 0.5 * float(d @ Quu_reg @ d)
        Vx = Qx + K.T @ Quu_reg @ d + K.T @ Qu + Qux.T @ d
        Vxx = Qxx + K.T @ Quu_reg @ K + K.T @ Qux + Qux.T @ K
        Vxx = 0.5 * (Vxx + Vxx.T)
    return BackwardPassResult(gains=gains, feedforwards=ffs, expected_decrease=(dV1, dV2))


def _evaluate_rollout(
    problem: TrajectoryProblem,
    controls_fn: Callable[[int, np.ndarray], np.ndarray],
    warm: Optional[list],
    jacobian_fn: Optional[Callable],
) -> Optional[Trajectory]:
    xs = [problem.x1.copy()]
    us: list[np.ndarray] = []
    As: list[np.ndarray] = []
    Bs: list[np.ndarray] = []
    warms: list[object] = []
    converged: list[bool] = []
    x = problem.x1.copy()
    for t in range(problem.T - 1):
        u = controls_fn(t, x)
        model = problem.model_at(t)
        try:
            res = model.step(x, u, warm=warm[t] if warm is not None else None)
        except Exception:
            return None
        A, B = res.A, res.B
        if jacobian_fn is not None:
            A, B = jacobian_fn(model, x, u, res)
        x = res.x_next
        xs.append(x)
        us.append(np.atleast_1d(np.asarray(u, dtype=float)))
        As.append(A)
        Bs.append(B)
        warms.append(res.warm_cache)
        converged.append(res.converged)
    obj = trajectory_objective(problem, xs, us)
    if not np.isfinite(obj):
        return None
    viol = _max_violation(_constraint_values(problem, xs))
    return Trajectory(
        xs=xs,
        us=us,
        A=As,
        B=Bs,
        warm=warms,
        objective=obj,
        constraint_violation=viol,
        step_converged=converged,
    )


def rollout_controls(
    problem: TrajectoryProblem,
    us: Sequence[np.ndarray],
    jacobian_fn: Optional[Callable] = None,
) -> Trajectory:
    """Open-loop rollout of a control tape."""
    if len(us) != problem.T - 1:
        raise ValueError(f"expected {problem.T - 1} controls, got {len(us)}")
    traj = _evaluate_rollout(problem, lambda t, x: us[t], None, jacobian_fn)
    if traj is None:
        raise RuntimeError("initial rollout failed: dynamics step error")
    return traj


def forward_rollout(
    problem: TrajectoryProblem,
    prev: Trajectory,
    gains: list[np.ndarray],
    feedforwards: list[np.ndarray],
    alpha: float,
    jacobian_fn: Optional[Callable] = None,
) -> Optional[Trajectory]:
    """Closed-loop rollout u = u_prev + alpha * d + K (x - x_prev).

    Returns None when a dynamics step fails, which the line search treats as
    a rejected candidate. ``alpha`` = 0 reproduces the incumbent exactly.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    if alpha == 0.0:
        return prev

    def controls(t: int, x: np.ndarray) -> np.ndarray:
        return prev.us[t] + alpha * feedforwards[t] + gains[t] @ (x - prev.xs[t])

    return _evaluate_rollout(problem, controls, prev.warm, jacobian_fn)


def solve_trajectory(
    problem: TrajectoryProblem,
    u_init: Sequence[np.ndarray],
    settings: Optional[ILQRSettings] = None,
) -> tuple[Trajectory, ConvergenceReport]:
    """Full solve: inner iLQR to stationarity, then multiplier updates and
    penalty escalation until the constraint violation meets tolerance."""
    st = settings if settings is not None else ILQRSettings()
    t_start = time.perf_counter()
    log_rows: list[list] = []

    traj = rollout_controls(problem, list(u_init), st.jacobian_fn)
    al = ALState.fresh(problem, st.rho_init)

    iterations = 0
    outer = 0
    status = ILQRStatus.NOT_CONVERGED
    ff_norm = np.inf
    best_viol = np.inf

    for outer in range(1, st.max_outer_iterations + 1):
        # inner iLQR on the augmented objective
        reg = st.reg_init
        incumbent_al = al_objective(problem, traj, al)
        inner_done = False
        while not inner_done and iterations < st.max_iterations:
            bp = None
            while bp is None:
                try:
                    bp = backward_pass(traj, problem, al, reg)
                except BackwardPassError:
                    reg *= st.reg_growth
                    if reg > st.reg_max:
                        break
            if bp is None:
                inner_done = True  # cannot make progress at any regularization
                break
            iterations += 1
            ff_norm = bp.feedforward_norm
            if ff_norm < st.feedforward_tol:
                inner_done = True
                break
            accepted = False
            alpha = 1.0
            while alpha >= st.min_alpha:
                candidate = forward_rollout(
                    problem, traj, bp.gains, bp.feedforwards, alpha, st.jacobian_fn
                )
                if candidate is not None:
                    cand_al = al_objective(problem, candidate, al)
                    if cand_al < incumbent_al:
                        decrease = incumbent_al - cand_al
                        traj = candidate
                        incumbent_al = cand_al
                        accepted = True
                        reg = max(st.reg_init, reg / st.reg_growth)
                        log_rows.append(
                            [iterations, traj.objective, traj.constraint_violation, alpha, reg]
                        )
                        if decrease < st.objective_tol:
                            inner_done = True
                        break
                alpha *= 0.5
            if not accepted:
                reg *= st.reg_growth
                if reg > st.reg_max:
                    inner_done = True

        viol = traj.constraint_violation
        if viol <= st.constraint_tol:
            status = ILQRStatus.CONVERGED
            break
        if iterations >= st.max_iterations:
            break
        # multiplier update, then penalty escalation on poor progress
        values = _constraint_values(problem, traj.xs)
        for lam, c in zip(al.multipliers, values):
            lam += al.rho * c
        if viol > st.violation_improvement * best_viol:
            al.rho *= st.rho_growth
        best_viol = min(best_viol, viol)

    wall = time.perf_counter() - t_start
    if st.log_path:
        _write_iteration_log(st.log_path, log_rows)
    report = ConvergenceReport(
        objective=traj.objective,
        iterations=iterations,
        constraint_violation=traj.constraint_violation,
        wall_time_s=wall,
        status=status,
        outer_iterations=outer,
        final_rho=al.rho,
        feedforward_norm=ff_norm,
    )
    return traj, report


def _write_iteration_log(path: str, rows: list[list]) -> None:
    log_path = Path(path)
    log_path.parent.mkdir(parents=True, exist_ok=True)
    with log_path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "objective", "violation", "alpha", "regularization"])
        writer.writerows(rows)
