"""Discrete dynamics whose next state solves a lower-level cone program.

A step packs (x_t, u_t) into the problem data, solves the program, extracts
the next state linearly from the solution (and, for models that carry the
current configuration forward, from the problem data), and returns dynamics
Jacobians obtained by implicit differentiation at a relaxed central-path
level. A pure implicit-midpoint integrator is the free-cone special case.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .cones import ConeSpec, free
from .solver import (
    ConeProgram,
    Sensitivity,
    SolverSettings,
    SolverTrace,
    differentiate,
    ift_sensitivity,
    solve,
)

__all__ = [
    "DynamicsModel",
    "StepResult",
    "ContinuousDynamics",
    "implicit_integrator",
    "gradient_bundle",
    "BundleJacobians",
    "finite_difference_jacobians",
    "InitialStateStage",
    "MemoryAugmentedModel",
]

WarmStartPolicy = Callable[[np.ndarray, np.ndarray, Optional[np.ndarray]], np.ndarray]


@dataclass
class StepResult:
    x_next: np.ndarray
    trace: Optional[SolverTrace]
    A: np.ndarray
    B: np.ndarray
    sensitivity: Optional[Sensitivity] = None
    # Next state rebuilt from the relaxed-level iterate that was
    # differentiated; finite-difference checks of A and B must use this.
    x_next_relaxed: Optional[np.ndarray] = None
    warm_cache: object = None

    def __post_init__(self) -> None:
        if self.x_next_relaxed is None:
            self.x_next_relaxed = self.x_next

    @property
    def converged(self) -> bool:
        return self.trace is None or self.trace.converged

    @property
    def z(self) -> Optional[np.ndarray]:
        return None if self.trace is None else self.trace.w


@dataclass
class DynamicsModel:
    """A cone program parameterized by theta = (x_t, u_t) acting as a step map.

    ``extract_z`` and ``extract_theta`` are the linear maps assembling
    x_{t+1} = extract_z @ z + extract_theta @ theta from the program solution
    and the problem data. ``warm_start_policy`` builds an initial z from the
    current state, control, and the previous solution at this knot point.
    """

    n: int
    m: int
    h: float
    program: ConeProgram
    extract_z: np.ndarray
    extract_theta: Optional[np.ndarray] = None
    warm_start_policy: Optional[WarmStartPolicy] = None
    settings: SolverSettings = field(default_factory=SolverSettings)
    name: str = "dynamics"

    def __post_init__(self) -> None:
        self.extract_z = np.asarray(self.extract_z, dtype=float)
        if self.extract_z.shape != (self.n, self.program.k):
            raise ValueError(
                f"extract_z has shape {self.extract_z.shape}, expected "
                f"({self.n}, {self.program.k})"
            )
        if self.extract_theta is None:
            self.extract_theta = np.zeros((self.n, self.program.p))
        else:
            self.extract_theta = np.asarray(self.extract_theta, dtype=float)
        if self.extract_theta.shape != (self.n, self.program.p):
            raise ValueError(
                f"extract_theta has shape {self.extract_theta.shape}, expected "
                f"({self.n}, {self.program.p})"
            )
        if self.program.p != self.n + self.m:
            raise ValueError(
                f"program data dimension {self.program.p} != n + m = {self.n + self.m}"
            )

    def pack_theta(self, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        return np.concatenate([np.atleast_1d(x), np.atleast_1d(u)]).astype(float)

    def step(
        self,
        x: np.ndarray,
        u: np.ndarray,
        warm: object = None,
        settings: Optional[SolverSettings] = None,
    ) -> StepResult:
        x = np.atleast_1d(np.asarray(x, dtype=float))
        u = np.atleast_1d(np.asarray(u, dtype=float))
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(u))):
            raise ValueError("non-finite state or control passed to step")
        st = settings if settings is not None else self.settings
        theta = self.pack_theta(x, u)
        prev_z = warm if isinstance(warm, np.ndarray) else None
        if self.warm_start_policy is not None:
            z0 = self.warm_start_policy(x, u, prev_z)
        else:
            z0 = prev_z
        trace = solve(self.program, theta, warm_start=z0, settings=st)
        if trace.w_mu:
            sens = differentiate(self.program, trace, theta, st)
            mu_sel = sens.mu_used
            w_sel = next(w for mu, w in trace.w_mu if mu == mu_sel)
        else:
            # Never reached tolerance at any level: differentiate the best
            # iterate so the caller still receives usable gradients.
            sens = ift_sensitivity(self.program, trace.w, theta, trace.final_mu)
            w_sel = trace.w
        z_final = trace.w[: self.program.k]
        x_next = self.extract_z @ z_final + self.extract_theta @ theta
        x_next_relaxed = self.extract_z @ w_sel[: self.program.k] + self.extract_theta @ theta
        dx_dtheta = self.extract_z @ sens.dz_dtheta + self.extract_theta
        A = dx_dtheta[:, : self.n]
        B = dx_dtheta[:, self.n :]
        return StepResult(
            x_next=x_next,
            trace=trace,
            A=A,
            B=B,
            sensitivity=sens,
            x_next_relaxed=x_next_relaxed,
            warm_cache=z_final.copy(),
        )


@dataclass
class ContinuousDynamics:
    """Smooth vector field xdot = f(x, u) with its Jacobians."""

    n: int
    m: int
    f: Callable[[np.ndarray, np.ndarray], np.ndarray]
    fx: Callable[[np.ndarray, np.ndarray], np.ndarray]
    fu: Callable[[np.ndarray, np.ndarray], np.ndarray]


def implicit_integrator(
    dynamics: ContinuousDynamics,
    h: float,
    settings: Optional[SolverSettings] = None,
    name: str = "implicit_midpoint",
) -> DynamicsModel:
    """Implicit-midpoint step as a free-cone program.

    The residual is z - x - h*f((x + z)/2, u) = 0 over z in R^n, so the solve
    reduces to damped Newton root-finding and differentiation reduces to the
    implicit-function theorem on the step residual.
    """
    n, m = dynamics.n, dynamics.m
    cone = ConeSpec((free(n),))
    p = n + m

    def residual(w: np.ndarray, theta: np.ndarray, mu: float) -> np.ndarray:
        z = w[:n]
        nu = w[n:]
        x, u = theta[:n], theta[n:]
        mid = 0.5 * (x + z)
        stat = z - x - h * np.asarray(dynamics.f(mid, u), dtype=float) - nu
        return np.concatenate([stat, nu])

    def residual_jacobian_w(w: np.ndarray, theta: np.ndarray, mu: float) -> np.ndarray:
        z = w[:n]
        x, u = theta[:n], theta[n:]
        mid = 0.5 * (x + z)
        Jf = np.asarray(dynamics.fx(mid, u), dtype=float)
        J = np.zeros((2 * n, 2 * n))
        J[:n, :n] = np.eye(n) - 0.5 * h * Jf
        J[:n, n:] = -np.eye(n)
        J[n:, n:] = np.eye(n)
        return J

    def residual_jacobian_theta(
        w: np.ndarray, theta: np.ndarray, mu: float
    ) -> np.ndarray:
        z = w[:n]
        x, u = theta[:n], theta[n:]
        mid = 0.5 * (x + z)
        Jf = np.asarray(dynamics.fx(mid, u), dtype=float)
        Ju = np.asarray(dynamics.fu(mid, u), dtype=float)
        Jt = np.zeros((2 * n, p))
        Jt[:n, :n] = -np.eye(n) - 0.5 * h * Jf
        Jt[:n, n:] = -h * Ju
        return Jt

    program = ConeProgram(
        k=n,
        q=0,
        p=p,
        cone=cone,
        residual=residual,
        residual_jacobian_w=residual_jacobian_w,
        residual_jacobian_theta=residual_jacobian_theta,
    )

    def warm_start(x: np.ndarray, u: np.ndarray, prev: Optional[np.ndarray]) -> np.ndarray:
        return prev if prev is not None else x.copy()

    return DynamicsModel(
        n=n,
        m=m,
        h=h,
        program=program,
        extract_z=np.eye(n),
        warm_start_policy=warm_start,
        settings=settings if settings is not None else SolverSettings(),
        name=name,
    )


@dataclass
class BundleJacobians:
    A: np.ndarray
    B: np.ndarray
    num_failed: int
    num_used: int


def gradient_bundle(
    model,
    x: np.ndarray,
    u: np.ndarray,
    num_samples: int = 100,
    sigma: float = 1.0e-4,
    rng: Optional[np.random.Generator] = None,
) -> BundleJacobians:
    """Zero-order Jacobian estimate from randomized smoothing.

    Perturbs (x, u) jointly with zero-mean Gaussian noise of scale ``sigma``,
    steps through each sample serially, and least-squares fits the linear map
    from input perturbations to next-state changes. Samples whose solve fails
    are dropped and counted.
    """
    if num_samples < 2:
        raise ValueError("gradient bundle needs at least two samples")
    if sigma <= 0.0:
        raise ValueError("sigma must be positive")
    rng = rng if rng is not None else np.random.default_rng(0)
    x = np.atleast_1d(np.asarray(x, dtype=float))
    u = np.atleast_1d(np.asarray(u, dtype=float))
    n, m = model.n, model.m

    deltas = []
    outputs = []
    failed = 0
    for _ in range(num_samples):
        d = sigma * rng.standard_normal(n + m)
        try:
            res = model.step(x + d[:n], u + d[n:])
        except Exception:
            failed += 1
            continue
        if not res.converged:
            failed += 1
            continue
        deltas.append(d)
        outputs.append(res.x_next)
    if not deltas:
        raise RuntimeError("all gradient-bundle samples failed to solve")

    D = np.asarray(deltas)
    Y = np.asarray(outputs)
    Dc = D - D.mean(axis=0)
    Yc = Y - Y.mean(axis=0)
    G, _, _, _ = np.linalg.lstsq(Dc, Yc, rcond=None)
    G = G.T
    return BundleJacobians(
        A=G[:, :n], B=G[:, n:], num_failed=failed, num_used=len(deltas)
    )


@dataclass
class InitialStateStage:
    """Virtual first step whose control IS the initial state.

    Lets the optimizer treat the initial state as a decision variable while
    keeping the rollout structure intact. With ``with_memory`` the produced
    state carries a copy of itself, so constraints that couple the first and
    last states (periodicity) become plain terminal constraints.
    """

    base_n: int
    with_memory: bool = False
    h: float = 0.0
    name: str = "initial_state"
    exact_jacobians: bool = True

    @property
    def n(self) -> int:
        return 2 * self.base_n if self.with_memory else self.base_n

    @property
    def m(self) -> int:
        return self.base_n

    def step(self, x: np.ndarray, u: np.ndarray, warm: object = None, settings=None) -> StepResult:
        u = np.atleast_1d(np.asarray(u, dtype=float))
        x_next = np.concatenate([u, u]) if self.with_memory else u.copy()
        B = np.vstack([np.eye(self.base_n)] * 2) if self.with_memory else np.eye(self.base_n)
        return StepResult(
            x_next=x_next,
            trace=None,
            A=np.zeros((self.n, self.n)),
            B=B,
        )


@dataclass
class MemoryAugmentedModel:
    """Carries a constant memory block alongside a base model's state."""

    base: DynamicsModel
    name: str = "memory_augmented"

    @property
    def n(self) -> int:
        return 2 * self.base.n

    @property
    def m(self) -> int:
        return self.base.m

    @property
    def h(self) -> float:
        return self.base.h

    def step(self, x: np.ndarray, u: np.ndarray, warm: object = None, settings=None) -> StepResult:
        x = np.atleast_1d(np.asarray(x, dtype=float))
        nb = self.base.n
        res = self.base.step(x[:nb], u, warm=warm, settings=settings)
        mem = x[nb:]
        A = np.zeros((self.n, self.n))
        A[:nb, :nb] = res.A
        A[nb:, nb:] = np.eye(nb)
        B = np.vstack([res.B, np.zeros((nb, self.base.m))])
        return StepResult(
            x_next=np.concatenate([res.x_next, mem]),
            trace=res.trace,
            A=A,
            B=B,
            sensitivity=res.sensitivity,
            x_next_relaxed=np.concatenate([res.x_next_relaxed, mem]),
            warm_cache=res.warm_cache,
        )


def finite_difference_jacobians(
    model, x: np.ndarray, u: np.ndarray, eps: float = 1e-5
) -> tuple[np.ndarray, np.ndarray]:
    """Central differences of the step map at the relaxed central-path level.

    Differences ``x_next_relaxed`` so the comparison against the implicit
    Jacobians happens at the same smoothing level.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    u = np.atleast_1d(np.asarray(u, dtype=float))
    n, m = model.n, model.m
    A = np.zeros((n, n))
    B = np.zeros((n, m))
    for i in range(n):
        dx = np.zeros(n)
        dx[i] = eps
        hi = model.step(x + dx, u).x_next_relaxed
        lo = model.step(x - dx, u).x_next_relaxed
        A[:, i] = (hi - lo) / (2.0 * eps)
    for j in range(m):
        du = np.zeros(m)
        du[j] = eps
        hi = model.step(x, u + du).x_next_relaxed
        lo = model.step(x, u - du).x_next_relaxed
        B[:, j] = (hi - lo) / (2.0 * eps)
    return A, B
