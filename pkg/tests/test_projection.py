import numpy as np
import pytest

from pnode.linalg import SingularMatrixError, finite_diff_jacobian
from pnode.projection import (
    ConstraintSpec,
    DivergenceError,
    NonConvergenceError,
    ProjectionConfig,
    project,
    project_fast,
    project_robust,
    projection_vjp,
    residual_vjp,
    stabilization_term,
    stabilization_vjp,
)
from pnode.systems import all_systems


def circle_constraint(level=0.5):
    # energy of the frictionless oscillator: 1/2 (x^2 + v^2) = level
    def residual(u, t):
        return np.array([0.5 * float(u @ u) - level])

    def jacobian(u, t):
        return u.reshape(1, -1).copy()

    return ConstraintSpec(residual=residual, jacobian=jacobian,
                          reference_level=np.array([level]), m=1)


def linear_constraint(a, b):
    a = np.asarray(a, dtype=float)

    def residual(u, t):
        return np.array([float(a @ u) - b])

    def jacobian(u, t):
        return a.reshape(1, -1).copy()

    return ConstraintSpec(residual=residual, jacobian=jacobian,
                          reference_level=np.array([b]), m=1)


def parabola_constraint():
    # g(u) = u1^2 + u2 - 1: curved, with an asymmetric Jacobian dependence
    def residual(u, t):
        return np.array([u[0] ** 2 + u[1] - 1.0])

    def jacobian(u, t):
        return np.array([[2.0 * u[0], 1.0]])

    return ConstraintSpec(residual=residual, jacobian=jacobian,
                          reference_level=np.array([1.0]), m=1)


# -- robust variant -------------------------------------------------------

def test_robust_radial_projection_closed_form():
    c = circle_constraint(0.5)
    res = project_robust(np.array([1.1, 0.0]), c, 0.0)
    assert np.allclose(res.z, [1.0, 0.0], atol=1e-10)
    assert res.residual_norm <= 1e-12


def test_robust_on_manifold_fixed_point():
    c = circle_constraint(0.5)
    u = np.array([0.6, 0.8])
    res = project_robust(u, c, 0.0)
    assert res.iterations <= 1
    assert np.allclose(res.z, u, atol=1e-12)
    assert np.allclose(res.lam, 0.0)


def test_robust_linear_hyperplane():
    c = linear_constraint([1.0, 1.0], 1.0)
    res = project_robust(np.array([1.0, 1.0]), c, 0.0)
    assert np.allclose(res.z, [0.5, 0.5], atol=1e-14)
    assert res.iterations == 1


def test_robust_rank_deficient_raises_singular():
    c = circle_constraint(0.5)
    with pytest.raises(SingularMatrixError):
        project_robust(np.zeros(2), c, 0.0)  # J = 0 at the origin


def test_robust_iteration_budget():
    c = circle_constraint(0.5)
    cfg = ProjectionConfig(tolerance=1e-12, max_iterations=1, variant="robust")
    with pytest.raises(NonConvergenceError) as err:
        project_robust(np.array([3.0, 0.0]), c, 0.0, cfg)
    assert np.isfinite(err.value.residual_norm)


# -- fast variant ---------------------------------------------------------

def test_fast_linear_one_iteration():
    c = linear_constraint([1.0, 1.0], 1.0)
    res = project_fast(np.array([1.0, 1.0]), c, 0.0)
    assert res.iterations == 1
    assert np.allclose(res.z, [0.5, 0.5], atol=1e-14)


def test_fast_radial_matches_closed_form():
    c = circle_constraint(0.5)
    res = project_fast(np.array([1.1, 0.0]), c, 0.0,
                       ProjectionConfig(tolerance=1e-12, max_iterations=20))
    assert abs(0.5 * (res.z @ res.z) - 0.5) <= 1e-12
    assert np.allclose(res.z, [1.0, 0.0], atol=1e-10)


def test_fast_on_manifold_zero_multiplier():
    c = circle_constraint(0.5)
    u = np.array([0.6, 0.8])
    res = project_fast(u, c, 0.0)
    assert res.iterations == 0
    assert np.allclose(res.z, u)
    assert np.allclose(res.lam, 0.0)


def test_fast_single_jacobian_evaluation():
    calls = {"n": 0}
    base = circle_constraint(0.5)

    def counting_jacobian(u, t):
        calls["n"] += 1
        return base.jacobian(u, t)

    c = ConstraintSpec(residual=base.residual, jacobian=counting_jacobian,
                       reference_level=base.reference_level, m=1)
    project_fast(np.array([1.05, 0.02]), c, 0.0)
    assert calls["n"] == 1


def test_fast_divergence_flag():
    # tiny frozen Jacobian near u=0 on g = u^2 - 1: each frozen-Newton sweep
    # overshoots harder, so the residual grows three times in a row
    def residual(u, t):
        return np.array([u[0] ** 2 - 1.0])

    def jacobian(u, t):
        return np.array([[2.0 * u[0]]])

    c = ConstraintSpec(residual=residual, jacobian=jacobian,
                       reference_level=np.array([1.0]), m=1)
    with pytest.raises(DivergenceError):
        project_fast(np.array([0.05]), c, 0.0,
                     ProjectionConfig(tolerance=1e-14, max_iterations=20))


def test_fast_fallback_to_robust():
    # a one-sweep budget is not enough for the curved constraint, so the
    # dispatcher retries with the re-linearizing loop
    c = circle_constraint(0.5)
    cfg = ProjectionConfig(tolerance=1e-14, max_iterations=1, variant="fast", fallback=True)
    res = project(np.array([1.1, 0.0]), c, 0.0, cfg)
    assert res.variant == "robust"
    assert res.residual_norm <= 1e-14
    with pytest.raises(NonConvergenceError):
        project(np.array([1.1, 0.0]), c, 0.0,
                ProjectionConfig(tolerance=1e-14, max_iterations=1,
                                 variant="fast", fallback=False))


def test_empty_constraint_is_identity():
    c = ConstraintSpec(residual=lambda u, t: np.zeros(0),
                       jacobian=lambda u, t: np.zeros((0, 3)),
                       reference_level=np.zeros(0), m=0)
    u = np.array([1.0, -2.0, 3.0])
    for fn in (project_robust, project_fast):
        res = fn(u, c, 0.0)
        assert np.allclose(res.z, u)
        assert res.iterations == 0


# -- stabilization term ---------------------------------------------------

def test_stabilization_hand_value_circle():
    def residual(u, t):
        return np.array([u[0] ** 2 + u[1] ** 2 - 1.0])

    def jacobian(u, t):
        return np.array([[2.0 * u[0], 2.0 * u[1]]])

    c = ConstraintSpec(residual=residual, jacobian=jacobian,
                       reference_level=np.array([1.0]), m=1)
    out = stabilization_term(np.array([2.0, 0.0]), c, 0.0, gamma=1.0)
    assert np.allclose(out, [-0.75, 0.0])


def test_stabilization_zero_on_manifold():
    c = circle_constraint(0.5)
    out = stabilization_term(np.array([0.6, 0.8]), c, 0.0, gamma=3.0)
    assert np.allclose(out, 0.0, atol=1e-14)


def test_stabilization_hand_value_linear():
    c = linear_constraint([1.0, 1.0], 1.0)
    out = stabilization_term(np.array([1.0, 1.0]), c, 0.0, gamma=2.0)
    assert np.allclose(out, [-1.0, -1.0])


# -- implicit-differentiation vjps ----------------------------------------

def test_vjp_linear_constraint_analytic():
    c = linear_constraint([1.0, 1.0], 1.0)
    u = np.array([1.0, 1.0])
    res = project_robust(u, c, 0.0)
    v = projection_vjp(u, res, c, 0.0, np.array([1.0, 0.0]))
    assert np.allclose(v, [0.5, -0.5], atol=1e-12)


def test_vjp_empty_constraint_identity():
    c = ConstraintSpec(residual=lambda u, t: np.zeros(0),
                       jacobian=lambda u, t: np.zeros((0, 2)),
                       reference_level=np.zeros(0), m=0)
    res = project_robust(np.array([1.0, 2.0]), c, 0.0)
    w = np.array([0.3, -0.7])
    assert np.allclose(projection_vjp(np.array([1.0, 2.0]), res, c, 0.0, w), w)


def _vjp_vs_fd(constraint, u, variant, rtol=1e-5):
    cfg = ProjectionConfig(tolerance=1e-13, max_iterations=50, variant=variant,
                           fallback=False)
    fn = project_robust if variant == "robust" else project_fast

    def mapped(x):
        return fn(x, constraint, 0.0, cfg).z

    jac_fd = finite_diff_jacobian(mapped, u, eps=1e-6)
    res = fn(u, constraint, 0.0, cfg)
    n = u.shape[0]
    # pulling back e_i gives row i of dz/du, so the stack reproduces dz/du
    jac_vjp = np.stack(
        [projection_vjp(u, res, constraint, 0.0, e) for e in np.eye(n)], axis=0
    )
    assert np.allclose(jac_vjp, jac_fd, rtol=rtol, atol=1e-8), (
        f"{variant}: max err {np.max(np.abs(jac_vjp - jac_fd))}"
    )


def test_vjp_matches_fd_circle_robust():
    # the curvature term matters here: dropping it gives an O(0.1) error
    _vjp_vs_fd(circle_constraint(0.5), np.array([1.1, 0.0]), "robust")


def test_vjp_matches_fd_circle_fast():
    _vjp_vs_fd(circle_constraint(0.5), np.array([1.1, 0.0]), "fast")


def test_vjp_matches_fd_parabola_both_variants():
    u = np.array([1.0, 0.1])
    _vjp_vs_fd(parabola_constraint(), u, "robust")
    _vjp_vs_fd(parabola_constraint(), u, "fast")


def test_vjp_matches_fd_all_systems_both_variants():
    rng = np.random.Generator(np.random.PCG64(23))
    for system in all_systems():
        u0 = system.ic_sampler(rng)
        c = system.constraints(u0, 0.0)
        t = 0.37 if system.time_dependent else 0.0
        u = u0 + 1e-3 * rng.normal(size=system.dim)
        for variant in ("robust", "fast"):
            cfg = ProjectionConfig(tolerance=1e-13, max_iterations=60,
                                   variant=variant, fallback=False)
            fn = project_robust if variant == "robust" else project_fast

            def mapped(x):
                return fn(x, c, t, cfg).z

            res = fn(u, c, t, cfg)
            jac_fd = finite_diff_jacobian(mapped, u, eps=1e-6)
            jac_vjp = np.stack(
                [projection_vjp(u, res, c, t, e) for e in np.eye(system.dim)], axis=0
            )
            err = np.max(np.abs(jac_vjp - jac_fd)) / max(np.max(np.abs(jac_fd)), 1e-12)
            assert err <= 1e-5, f"{system.name}/{variant}: relative error {err:.2e}"


def test_stabilization_vjp_matches_fd():
    rng = np.random.Generator(np.random.PCG64(29))
    for constraint, u in [
        (circle_constraint(0.5), np.array([1.1, 0.2])),
        (parabola_constraint(), np.array([0.9, 0.4])),
    ]:
        gamma = 1.7

        def mapped(x):
            return stabilization_term(x, constraint, 0.0, gamma)

        jac_fd = finite_diff_jacobian(mapped, u, eps=1e-6)
        for _ in range(3):
            w = rng.normal(size=u.shape[0])
            v = stabilization_vjp(u, constraint, 0.0, gamma, w)
            assert np.allclose(v, jac_fd.T @ w, rtol=1e-5, atol=1e-8)


def test_residual_vjp_is_jacobian_transpose():
    c = parabola_constraint()
    u = np.array([0.8, 0.3])
    w = np.array([2.5])
    assert np.allclose(residual_vjp(u, c, 0.0, w), c.jacobian(u, 0.0).T @ w)


# -- cross-variant properties on the benchmark systems ---------------------

def _perturbed_states(system, rng, magnitude, count=5):
    u0 = system.ic_sampler(rng)
    c = system.constraints(u0, 0.0)
    for _ in range(count):
        yield c, u0 + magnitude * rng.uniform(-1.0, 1.0, size=system.dim)


def test_feasibility_all_systems():
    rng = np.random.Generator(np.random.PCG64(31))
    for system in all_systems():
        for c, u in _perturbed_states(system, rng, 1e-2):
            for variant in ("robust", "fast"):
                cfg = ProjectionConfig(tolerance=1e-12, max_iterations=60,
                                       variant=variant, fallback=False)
                res = project(u, c, 0.0, cfg)
                assert c.violation(res.z, 0.0) <= 1e-11, (system.name, variant)


def test_idempotence_all_systems():
    rng = np.random.Generator(np.random.PCG64(37))
    for system in all_systems():
        for c, u in _perturbed_states(system, rng, 1e-2, count=3):
            for cfg in (ProjectionConfig.robust(), ProjectionConfig.fast()):
                once = project(u, c, 0.0, cfg)
                twice = project(once.z, c, 0.0, cfg)
                assert np.max(np.abs(twice.z - once.z)) <= 1e-12, (system.name, cfg.variant)


def test_update_in_row_space():
    rng = np.random.Generator(np.random.PCG64(41))
    for system in all_systems():
        for c, u in _perturbed_states(system, rng, 1e-3, count=3):
            for variant in ("robust", "fast"):
                cfg = ProjectionConfig(tolerance=1e-13, max_iterations=60,
                                       variant=variant, fallback=False)
                res = project(u, c, 0.0, cfg)
                delta = res.z - u
                at = res.z if variant == "robust" else u
                J = c.jacobian(at, 0.0)
                # component of delta orthogonal to the row space
                coeff = np.linalg.lstsq(J.T, delta, rcond=None)[0]
                ortho = delta - J.T @ coeff
                assert np.max(np.abs(ortho)) <= 1e-10, (system.name, variant)


def test_variant_agreement_near_manifold():
    rng = np.random.Generator(np.random.PCG64(43))
    for system in all_systems():
        for c, u in _perturbed_states(system, rng, 1e-4, count=3):
            fast = project_fast(u, c, 0.0, ProjectionConfig(tolerance=1e-14, max_iterations=40))
            robust = project_robust(u, c, 0.0,
                                    ProjectionConfig.robust(tolerance=1e-14))
            assert np.max(np.abs(fast.z - robust.z)) <= 1e-8, system.name


def test_snode_reduction_identity():
    # one Euler step, then a single frozen-Jacobian Newton correction with a
    # linear constraint, must equal Euler on rhs + stabilization at gain 1/h
    a = np.array([2.0, -1.0, 0.5])
    c = linear_constraint(a, 0.3)

    def f(u, t):
        return np.array([np.sin(u[1]), u[2] ** 2, -u[0]])

    rng = np.random.Generator(np.random.PCG64(47))
    for _ in range(5):
        u = rng.normal(size=3)
        h = 0.05
        u_tilde = u + h * f(u, 0.0)
        corrected = project_fast(
            u_tilde, c, 0.0, ProjectionConfig(tolerance=1e-9, max_iterations=1)
        ).z
        stabilized = u_tilde + h * stabilization_term(u_tilde, c, 0.0, gamma=1.0 / h)
        assert np.max(np.abs(corrected - stabilized)) <= 1e-14
