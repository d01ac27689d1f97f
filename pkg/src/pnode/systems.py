"""The six benchmark dynamical systems: true right-hand sides, conserved
quantities (exposed as per-trajectory constraint factories with analytic
Jacobians), initial-condition samplers, and train/inference horizons.

Conserved quantities C(u) become residuals g(u) = C(u) - C(u0), so every
trajectory carries its own reference level. The robot arm is the one
time-dependent constraint: its end effector must track a prescribed path.
"""

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .projection import ConstraintSpec

TWO_PI = 2.0 * np.pi


@dataclass(frozen=True)
class LotkaVolterraParams:
    alpha: float = 1.5
    beta: float = 1.0
    # predator decay; named to avoid clashing with the stabilization gain
    gamma_lv: float = 3.0
    delta: float = 1.0


@dataclass(frozen=True)
class RigidBodyParams:
    i1: float = 2.0
    i2: float = 1.0
    i3: float = 2.0 / 3.0


@dataclass(frozen=True)
class DynamicalSystem:
    name: str
    dim: int
    n_constraints: int
    true_rhs: Callable[[np.ndarray, float], np.ndarray]
    constraints: Callable[[np.ndarray, float], ConstraintSpec]
    ic_sampler: Callable[[np.random.Generator], np.ndarray]
    train_end: float
    inference_end: float
    position_idx: Optional[tuple] = None  # set for second-order systems
    velocity_idx: Optional[tuple] = None
    time_dependent: bool = False
    params: object = None

    @property
    def second_order(self):
        return self.position_idx is not None


def _spec(residual, jacobian, reference, m):
    return ConstraintSpec(residual=residual, jacobian=jacobian,
                          reference_level=np.asarray(reference, dtype=float), m=m)


# -- Lotka-Volterra ------------------------------------------------------

def _lotka_volterra(p):
    a, b, g, d = p.alpha, p.beta, p.gamma_lv, p.delta

    def rhs(u, t):
        x, y = u
        return np.array([a * x - b * x * y, -g * y + d * x * y])

    def level(u):
        x, y = u
        return d * x - g * np.log(x) + b * y - a * np.log(y)

    def constraints(u0, t0):
        v0 = level(u0)

        def residual(u, t):
            return np.array([level(u) - v0])

        def jacobian(u, t):
            x, y = u
            return np.array([[d - g / x, b - a / y]])

        return _spec(residual, jacobian, [v0], 1)

    def sample(rng):
        return rng.uniform(1.0, 2.0, size=2)

    return DynamicalSystem(
        name="lotka_volterra", dim=2, n_constraints=1, true_rhs=rhs,
        constraints=constraints, ic_sampler=sample,
        train_end=7.0, inference_end=1000.0, params=p,
    )


# -- mass-spring ---------------------------------------------------------

def _mass_spring():
    def rhs(u, t):
        x, v = u
        return np.array([v, -x])

    def constraints(u0, t0):
        e0 = 0.5 * float(u0 @ u0)

        def residual(u, t):
            return np.array([0.5 * (u @ u) - e0])

        def jacobian(u, t):
            return u.reshape(1, 2).copy()

        return _spec(residual, jacobian, [e0], 1)

    def sample(rng):
        r = rng.uniform(0.8, 1.2)
        phi = rng.uniform(0.0, TWO_PI)
        return np.array([r * np.cos(phi), r * np.sin(phi)])

    return DynamicalSystem(
        name="mass_spring", dim=2, n_constraints=1, true_rhs=rhs,
        constraints=constraints, ic_sampler=sample,
        train_end=10.0, inference_end=1000.0,
        position_idx=(0,), velocity_idx=(1,),
    )


# -- two-body problem ----------------------------------------------------

def _two_body():
    def rhs(u, t):
        q1, q2, p1, p2 = u
        r3 = (q1 * q1 + q2 * q2) ** 1.5
        return np.array([p1, p2, -q1 / r3, -q2 / r3])

    def constraints(u0, t0):
        q1, q2, p1, p2 = u0
        l0 = q1 * p2 - q2 * p1

        def residual(u, t):
            return np.array([u[0] * u[3] - u[1] * u[2] - l0])

        def jacobian(u, t):
            q1, q2, p1, p2 = u
            return np.array([[p2, -p1, -q2, q1]])

        return _spec(residual, jacobian, [l0], 1)

    def sample(rng):
        e = rng.uniform(0.3, 0.6)
        return np.array([1.0 - e, 0.0, 0.0, np.sqrt((1.0 + e) / (1.0 - e))])

    return DynamicalSystem(
        name="two_body", dim=4, n_constraints=1, true_rhs=rhs,
        constraints=constraints, ic_sampler=sample,
        train_end=6.3832, inference_end=1000.0,
        position_idx=(0, 1), velocity_idx=(2, 3),
    )


# -- nonlinear 2d spring -------------------------------------------------

def _nonlinear_spring_2d():
    def rhs(u, t):
        x, y, vx, vy = u
        r2 = x * x + y * y
        return np.array([vx, vy, -x * r2, -y * r2])

    def constraints(u0, t0):
        x, y, vx, vy = u0
        e0 = 0.5 * (vx * vx + vy * vy) + 0.25 * (x * x + y * y) ** 2
        l0 = x * vy - y * vx

        def residual(u, t):
            x, y, vx, vy = u
            e = 0.5 * (vx * vx + vy * vy) + 0.25 * (x * x + y * y) ** 2
            return np.array([e - e0, x * vy - y * vx - l0])

        def jacobian(u, t):
            x, y, vx, vy = u
            r2 = x * x + y * y
            return np.array([
                [x * r2, y * r2, vx, vy],
                [vy, -vx, -y, x],
            ])

        return _spec(residual, jacobian, [e0, l0], 2)

    def sample(rng):
        pos = rng.uniform(0.5, 1.0, size=2)
        vel = rng.uniform(-0.5, 0.5, size=2)
        return np.concatenate([pos, vel])

    return DynamicalSystem(
        name="nonlinear_spring_2d", dim=4, n_constraints=2, true_rhs=rhs,
        constraints=constraints, ic_sampler=sample,
        train_end=10.0, inference_end=1000.0,
        position_idx=(0, 1), velocity_idx=(2, 3),
    )


# -- planar robot arm ----------------------------------------------------

def _arm_effector(theta):
    return np.array([np.sum(np.cos(theta)), np.sum(np.sin(theta))])


def _arm_jacobian(theta):
    return np.array([-np.sin(theta), np.cos(theta)])  # 2x3


def _robot_arm():
    def rhs(u, t):
        E = _arm_jacobian(u)
        pdot = np.array([-np.cos(TWO_PI * t), 0.0])
        return E.T @ np.linalg.solve(E @ E.T, pdot)

    def constraints(u0, t0):
        e0 = _arm_effector(u0) + np.array([np.sin(TWO_PI * t0) / TWO_PI, 0.0])

        def path(t):
            return e0 - np.array([np.sin(TWO_PI * t) / TWO_PI, 0.0])

        def residual(u, t):
            return _arm_effector(u) - path(t)

        def jacobian(u, t):
            return _arm_jacobian(u)

        return _spec(residual, jacobian, e0, 2)

    def sample(rng):
        return rng.uniform(0.2, 1.2, size=3)

    return DynamicalSystem(
        name="robot_arm", dim=3, n_constraints=2, true_rhs=rhs,
        constraints=constraints, ic_sampler=sample,
        train_end=5.0, inference_end=250.0, time_dependent=True,
    )


# -- rigid body ----------------------------------------------------------

def _rigid_body(p):
    c1 = 1.0 / p.i3 - 1.0 / p.i2
    c2 = 1.0 / p.i1 - 1.0 / p.i3
    c3 = 1.0 / p.i2 - 1.0 / p.i1

    def rhs(u, t):
        y1, y2, y3 = u
        return np.array([c1 * y2 * y3, c2 * y1 * y3, c3 * y1 * y2])

    def constraints(u0, t0):
        r0 = 0.5 * float(u0 @ u0)

        def residual(u, t):
            return np.array([0.5 * (u @ u) - r0])

        def jacobian(u, t):
            return u.reshape(1, 3).copy()

        return _spec(residual, jacobian, [r0], 1)

    def sample(rng):
        v = rng.normal(size=3)
        v /= np.linalg.norm(v)
        return v * rng.uniform(0.9, 1.1)

    return DynamicalSystem(
        name="rigid_body", dim=3, n_constraints=1, true_rhs=rhs,
        constraints=constraints, ic_sampler=sample,
        train_end=25.0, inference_end=1000.0, params=p,
    )


SYSTEM_NAMES = (
    "lotka_volterra", "mass_spring", "two_body",
    "nonlinear_spring_2d", "robot_arm", "rigid_body",
)


def make_system(name, params=None):
    """Build a benchmark system by name."""
    if name == "lotka_volterra":
        return _lotka_volterra(params or LotkaVolterraParams())
    if name == "mass_spring":
        return _mass_spring()
    if name == "two_body":
        return _two_body()
    if name == "nonlinear_spring_2d":
        return _nonlinear_spring_2d()
    if name == "robot_arm":
        return _robot_arm()
    if name == "rigid_body":
        return _rigid_body(params or RigidBodyParams())
    raise ValueError(f"unknown system {name!r}; expected one of {SYSTEM_NAMES}")


def all_systems():
    return [make_system(name) for name in SYSTEM_NAMES]
