import numpy as np
import pytest

from optidyn.cones import ConeSpec, contains, dual, free, nonneg, second_order
from optidyn.solver import (
    ConeProgram,
    ModelEvaluationError,
    Sensitivity,
    SolverError,
    SolverSettings,
    SolverStatus,
    assemble_standard_residual,
    differentiate,
    solve,
)


def scalar_qp_program():
    """minimize 0.5 z^2  s.t.  z - theta = 0, z free."""
    return assemble_standard_residual(
        lambda z, th: z,
        lambda z, th: np.eye(1),
        lambda z, th: z - th,
        lambda z, th: np.eye(1),
        lambda z, th: -np.eye(1),
        ConeSpec((free(1),)),
        q=1,
        p=1,
    )


def max_dissipation_program(limit, d=2):
    """minimize v . b  s.t.  head(beta) = limit, beta in Q^d, b = tail(beta)."""

    def grad(z, th):
        return np.concatenate([[0.0], th])

    def grad_theta(z, th):
        G = np.zeros((d, d - 1))
        G[1:, :] = np.eye(d - 1)
        return G

    return assemble_standard_residual(
        grad,
        lambda z, th: np.zeros((d, d)),
        lambda z, th: np.array([z[0] - limit]),
        lambda z, th: np.eye(d)[:1],
        lambda z, th: np.zeros((1, d - 1)),
        ConeSpec((second_order(d),)),
        q=1,
        p=d - 1,
        objective_grad_theta_jac=grad_theta,
    )


def cone_projection_program(scale=1.0, u_min=0.0, u_max=10.0):
    """minimize 0.5 ||u - ubar||^2 over the thrust cone and head box.

    z = (t, sig) with t = (scale * u1, u2, u3) in Q^3 and box slacks sig >= 0.
    """
    D = np.diag([1.0 / scale, 1.0, 1.0])

    def grad(z, th):
        t = z[:3]
        g = np.zeros(5)
        g[:3] = D.T @ (D @ t - th)
        return g

    def hess(z, th):
        H = np.zeros((5, 5))
        H[:3, :3] = D.T @ D
        return H

    def grad_theta(z, th):
        G = np.zeros((5, 3))
        G[:3, :] = -D.T
        return G

    def cval(z, th):
        t, sig = z[:3], z[3:]
        return np.array(
            [t[0] / scale - u_min - sig[0], u_max - t[0] / scale - sig[1]]
        )

    def cjac(z, th):
        J = np.zeros((2, 5))
        J[0, 0] = 1.0 / scale
        J[0, 3] = -1.0
        J[1, 0] = -1.0 / scale
        J[1, 4] = -1.0
        return J

    return assemble_standard_residual(
        grad,
        hess,
        cval,
        cjac,
        lambda z, th: np.zeros((2, 3)),
        ConeSpec((second_order(3), nonneg(2))),
        q=2,
        p=3,
        objective_grad_theta_jac=grad_theta,
    )


def project_soc(a):
    """Analytic Euclidean projection onto the second-order cone in R^3."""
    a = np.asarray(a, dtype=float)
    head, tail = a[0], a[1:]
    nt = np.linalg.norm(tail)
    if nt <= head:
        return np.array(a, dtype=float)
    if nt <= -head:
        return np.zeros_like(a)
    coef = 0.5 * (head + nt)
    return np.concatenate([[coef], coef * tail / nt])


def brute_force_projection(ubar, scale, u_min, u_max, resolution=201):
    """Dense-grid minimization of the projection objective over the feasible set."""
    best = None
    best_val = np.inf
    u1s = np.linspace(u_min, u_max, resolution)
    lim = max(u_max * scale, 1.0)
    u2s = np.linspace(-lim, lim, resolution)
    for u1 in u1s:
        r = scale * u1
        for u2 in u2s:
            for u3 in u2s[:: max(resolution // 51, 1)]:
                if np.hypot(u2, u3) > r:
                    continue
                val = 0.5 * np.sum((np.array([u1, u2, u3]) - ubar) ** 2)
                if val < best_val:
                    best_val = val
                    best = np.array([u1, u2, u3])
    return best


class TestScalarQP:
    def test_kkt_point_by_hand(self):
        prog = scalar_qp_program()
        trace = solve(prog, np.array([1.0]))
        assert trace.status is SolverStatus.CONVERGED
        z, lam, nu = prog.split(trace.w)
        np.testing.assert_allclose(z, [1.0], atol=1e-8)
        np.testing.assert_allclose(lam, [-1.0], atol=1e-8)
        np.testing.assert_allclose(nu, [0.0], atol=1e-8)

    def test_residual_zero_at_solution(self):
        prog = scalar_qp_program()
        r = prog.residual(np.array([1.0, -1.0, 0.0]), np.array([1.0]), 0.0)
        np.testing.assert_allclose(r, np.zeros(3), atol=1e-14)

    def test_converged_residual_tolerance(self):
        trace = solve(scalar_qp_program(), np.array([1.0]))
        assert trace.final_residual_norm < 1e-8
        assert trace.final_mu < 1e-4

    def test_sensitivity_identity(self):
        prog = scalar_qp_program()
        trace = solve(prog, np.array([2.5]))
        sens = differentiate(prog, trace, np.array([2.5]))
        np.testing.assert_allclose(sens.dz_dtheta, [[1.0]], atol=1e-9)
        assert not sens.rank_deficient


class TestMaxDissipation:
    def test_sliding_fully_opposes(self):
        prog = max_dissipation_program(limit=1.0)
        trace = solve(prog, np.array([1.0]))
        assert trace.converged
        b = trace.w[1]
        # oracle: grid search over b in [-1, 1] minimizing v * b
        grid = np.linspace(-1.0, 1.0, 20001)
        oracle = grid[np.argmin(1.0 * grid)]
        assert abs(b - oracle) < 1e-3

    def test_oracle_grid_resolution(self):
        prog = max_dissipation_program(limit=2.0)
        for v in (0.5, -1.3):
            trace = solve(prog, np.array([v]))
            assert trace.converged
            grid = np.arange(-2.0, 2.0 + 1e-9, 1e-4)
            oracle = grid[np.argmin(v * grid)]
            assert abs(trace.w[1] - oracle) < 5e-4

    def test_sensitivity_matches_finite_differences(self):
        prog = max_dissipation_program(limit=1.0)
        settings = SolverSettings()
        v = np.array([1.0])
        trace = solve(prog, v, settings=settings)
        sens = differentiate(prog, trace, v, settings)
        mu_used = sens.mu_used
        eps = 1e-5

        def relaxed_b(theta):
            tr = solve(prog, theta, settings=settings)
            w_sel = next(w for mu, w in tr.w_mu if np.isclose(mu, mu_used))
            return w_sel[1]

        fd = (relaxed_b(v + eps) - relaxed_b(v - eps)) / (2 * eps)
        ift = sens.dz_dtheta[1, 0]
        assert abs(ift - fd) <= 1e-3 * max(1.0, abs(fd))


class TestConeProjection:
    def test_boundary_projection(self):
        prog = cone_projection_program()
        # the default terminal level leaves an O(mu) = O(1e-4) bias
        trace = solve(prog, np.array([0.0, 2.0, 0.0]))
        assert trace.converged
        np.testing.assert_allclose(trace.w[:3], [1.0, 1.0, 0.0], atol=1e-3)
        # a tighter terminal level recovers the exact projection
        tight = solve(
            prog, np.array([0.0, 2.0, 0.0]), settings=SolverSettings(eps_mu=1e-7)
        )
        np.testing.assert_allclose(tight.w[:3], [1.0, 1.0, 0.0], atol=1e-6)
        np.testing.assert_allclose(
            tight.w[:3], project_soc([0.0, 2.0, 0.0]), atol=1e-6
        )

    def test_brute_force_oracle(self):
        prog = cone_projection_program()
        ubar = np.array([0.5, 1.5, 0.3])
        trace = solve(prog, ubar)
        assert trace.converged
        oracle = brute_force_projection(ubar, 1.0, 0.0, 10.0)
        np.testing.assert_allclose(trace.w[:3], oracle, atol=0.08)

    def test_box_clamp_on_axis(self):
        prog = cone_projection_program(u_max=10.0)
        trace = solve(prog, np.array([11.0, 0.0, 0.0]))
        assert trace.converged
        np.testing.assert_allclose(trace.w[:3], [10.0, 0.0, 0.0], atol=1e-3)

    def test_interior_projection_is_identity(self):
        prog = cone_projection_program(u_max=100.0)
        # deep interior and a tight terminal level so the relaxed smoothing
        # perturbation stays under the tolerance
        settings = SolverSettings(eps_mu=1e-7)
        ubar = np.array([50.0, 3.0, -4.0])
        trace = solve(prog, ubar, settings=settings)
        assert trace.converged
        np.testing.assert_allclose(trace.w[:3], ubar, atol=1e-5)
        sens = differentiate(prog, trace, ubar, settings)
        du = sens.dz_dtheta[:3, :]
        np.testing.assert_allclose(du, np.eye(3), atol=1e-6)

    def test_sensitivity_matches_finite_differences(self):
        prog = cone_projection_program()
        settings = SolverSettings()
        rng = np.random.default_rng(21)
        for _ in range(5):
            ubar = rng.uniform([-1, -2, -2], [3, 2, 2])
            trace = solve(prog, ubar, settings=settings)
            assert trace.converged
            sens = differentiate(prog, trace, ubar, settings)
            mu_used = sens.mu_used
            eps = 1e-5

            def relaxed_u(theta):
                tr = solve(prog, theta, settings=settings)
                w_sel = next(w for mu, w in tr.w_mu if np.isclose(mu, mu_used))
                return w_sel[:3]

            for j in range(3):
                d = np.zeros(3)
                d[j] = eps
                fd = (relaxed_u(ubar + d) - relaxed_u(ubar - d)) / (2 * eps)
                np.testing.assert_allclose(
                    sens.dz_dtheta[:3, j], fd, rtol=1e-3, atol=1e-6
                )


class TestAssembleStandardResidual:
    def test_complementarity_row_by_hand(self):
        prog = assemble_standard_residual(
            lambda z, th: np.zeros(1),
            lambda z, th: np.zeros((1, 1)),
            lambda z, th: np.zeros(0),
            lambda z, th: np.zeros((0, 1)),
            lambda z, th: np.zeros((0, 1)),
            ConeSpec((nonneg(1),)),
            q=0,
            p=1,
        )
        r = prog.residual(np.array([2.0, 3.0]), np.array([0.0]), 1.0)
        assert r[1] == pytest.approx(2.0 * 3.0 - 1.0)

    @pytest.mark.parametrize(
        "builder,theta",
        [
            (lambda: scalar_qp_program(), np.array([1.3])),
            (lambda: max_dissipation_program(1.5), np.array([0.7])),
            (lambda: cone_projection_program(), np.array([0.4, 1.1, -0.2])),
        ],
    )
    def test_jacobians_match_finite_differences(self, builder, theta):
        prog = builder()
        rng = np.random.default_rng(33)
        dim = prog.dim
        w = rng.standard_normal(dim)
        mu = 0.37
        Jw = prog.residual_jacobian_w(w, theta, mu)
        Jt = prog.residual_jacobian_theta(w, theta, mu)
        eps = 1e-6
        for i in range(dim):
            d = np.zeros(dim)
            d[i] = eps
            fd = (prog.residual(w + d, theta, mu) - prog.residual(w - d, theta, mu)) / (
                2 * eps
            )
            np.testing.assert_allclose(Jw[:, i], fd, atol=1e-6)
        for j in range(prog.p):
            d = np.zeros(prog.p)
            d[j] = eps
            fd = (prog.residual(w, theta + d, mu) - prog.residual(w, theta - d, mu)) / (
                2 * eps
            )
            np.testing.assert_allclose(Jt[:, j], fd, atol=1e-6)


class TestAlgorithmInvariants:
    def test_monotone_line_search_and_mu_schedule(self):
        prog = cone_projection_program()
        settings = SolverSettings(keep_iterates=True)
        trace = solve(prog, np.array([0.0, 2.0, 0.0]), settings=settings)
        assert trace.converged
        # residual norms decrease within each central-path level
        by_mu = {}
        for rec in trace.iterations:
            by_mu.setdefault(rec.mu, []).append(rec.residual_norm)
        for norms in by_mu.values():
            assert all(b < a for a, b in zip(norms, norms[1:])) or len(norms) == 1
        # consecutive cached levels shrink by exactly gamma
        mus = [mu for mu, _ in trace.w_mu]
        for a, b in zip(mus, mus[1:]):
            assert b == pytest.approx(settings.gamma_cp * a)

    def test_interior_iterates(self):
        prog = cone_projection_program()
        settings = SolverSettings(keep_iterates=True)
        trace = solve(prog, np.array([0.0, 2.0, 0.0]), settings=settings)
        cone = prog.cone
        dual_cone = dual(cone)
        for rec in trace.iterations:
            z, _, nu = prog.split(rec.w)
            assert contains(cone, z, strict=True)
            assert contains(dual_cone, nu, strict=True)

    def test_warm_start_dominance(self):
        prog = cone_projection_program()
        rng = np.random.default_rng(99)
        wins = 0
        trials = 100
        for _ in range(trials):
            theta = rng.uniform([0.5, -1, -1], [3.0, 1, 1])
            base = solve(prog, theta)
            delta = 0.01 * rng.standard_normal(3)
            cold = solve(prog, theta + delta)
            warm = solve(prog, theta + delta, warm_start=base.w[: prog.k])
            if warm.newton_iterations <= cold.newton_iterations:
                wins += 1
        assert wins >= 0.9 * trials

    def test_debug_log_written(self, tmp_path):
        prog = scalar_qp_program()
        log = tmp_path / "trace.csv"
        solve(prog, np.array([1.0]), settings=SolverSettings(debug_log=str(log)))
        lines = log.read_text().strip().splitlines()
        assert lines[0] == "iteration,mu,alpha,residual_norm"
        assert len(lines) > 1


class TestErrorHandling:
    def test_nan_residual_raises(self):
        def residual(w, th, mu):
            return np.array([np.nan, 0.0, 0.0])

        prog = ConeProgram(
            k=1,
            q=1,
            p=1,
            cone=ConeSpec((free(1),)),
            residual=residual,
            residual_jacobian_w=lambda w, th, mu: np.eye(3),
            residual_jacobian_theta=lambda w, th, mu: np.zeros((3, 1)),
        )
        with pytest.raises(ModelEvaluationError):
            solve(prog, np.array([0.0]))

    def test_differentiate_requires_cached_iterates(self):
        prog = scalar_qp_program()
        trace = solve(prog, np.array([1.0]))
        trace.w_mu.clear()
        with pytest.raises(SolverError):
            differentiate(prog, trace, np.array([1.0]))

    def test_theta_dimension_checked(self):
        with pytest.raises(ValueError):
            solve(scalar_qp_program(), np.array([1.0, 2.0]))

    def test_settings_validation(self):
        with pytest.raises(ValueError):
            SolverSettings(beta_ls=1.5)
        with pytest.raises(ValueError):
            SolverSettings(eps_r=1e-3, eps_mu=1e-4)


class TestRandomConePrograms:
    """Randomized QPs and SOCPs checked against analytic/brute-force oracles."""

    def test_nonneg_qps_match_projection_oracle(self):
        # minimize 0.5||z - target||^2 over z >= 0: solution clamps at zero
        rng = np.random.default_rng(5)
        for _ in range(25):
            k = rng.integers(1, 6)
            target = rng.standard_normal(k)

            prog = assemble_standard_residual(
                lambda z, th: z - th,
                lambda z, th, k=k: np.eye(k),
                lambda z, th: np.zeros(0),
                lambda z, th, k=k: np.zeros((0, k)),
                lambda z, th, k=k: np.zeros((0, k)),
                ConeSpec((nonneg(int(k)),)),
                q=0,
                p=int(k),
                objective_grad_theta_jac=lambda z, th, k=k: -np.eye(k),
            )
            trace = solve(prog, target, settings=SolverSettings(eps_mu=1e-6))
            assert trace.converged
            np.testing.assert_allclose(
                trace.w[:k], np.maximum(target, 0.0), atol=1e-4
            )

    def test_soc_projections_match_analytic(self):
        rng = np.random.default_rng(6)
        for _ in range(25):
            target = rng.standard_normal(3) * 2.0

            prog = assemble_standard_residual(
                lambda z, th: z - th,
                lambda z, th: np.eye(3),
                lambda z, th: np.zeros(0),
                lambda z, th: np.zeros((0, 3)),
                lambda z, th: np.zeros((0, 3)),
                ConeSpec((second_order(3),)),
                q=0,
                p=3,
                objective_grad_theta_jac=lambda z, th: -np.eye(3),
            )
            trace = solve(prog, target, settings=SolverSettings(eps_mu=1e-6))
            assert trace.converged
            np.testing.assert_allclose(trace.w[:3], project_soc(target), atol=1e-4)
