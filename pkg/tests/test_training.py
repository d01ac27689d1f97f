import numpy as np
import pytest

from pnode.data import generate_dataset
from pnode.neuralmodel import MlpDynamics, model_for_system
from pnode.odeint import Trajectory
from pnode.projection import ProjectionConfig
from pnode.systems import make_system
from pnode.training import (
    AdamState,
    DivergedRolloutError,
    TrainConfig,
    Window,
    full_trajectory_windows,
    lbfgs_minimize,
    make_windows,
    train_adam,
    train_lbfgs,
    window_loss,
    write_loss_history,
    read_loss_history,
)


def _toy_dataset(length=10, dim=2):
    system = make_system("mass_spring")
    times = np.arange(length) * 0.01
    states = np.zeros((length, dim))
    states[:, 0] = np.cos(times)
    states[:, 1] = -np.sin(times)
    traj = Trajectory(times=times, states=states)
    from pnode.data import TrajectoryDataset
    return TrajectoryDataset(
        system_name="mass_spring", h_ref=1e-3, save_every=10, seed=0,
        trajectories=[traj], constraints=[system.constraints(states[0], 0.0)],
    )


def test_make_windows_arithmetic_progression():
    ds = _toy_dataset(length=10)
    windows = make_windows(ds, window=4, stride=2)
    assert [w.start for w in windows] == [0, 2, 4, 6]
    assert all(len(w) == 4 for w in windows)


def test_make_windows_whole_trajectory():
    ds = _toy_dataset(length=10)
    windows = make_windows(ds, window=10, stride=1)
    assert len(windows) == 1


def test_make_windows_rejects_oversized():
    ds = _toy_dataset(length=5)
    with pytest.raises(ValueError):
        make_windows(ds, window=6, stride=1)


def _mass_spring_linear_model():
    # exact mass-spring rhs as a single linear layer
    model = MlpDynamics(dim=2, hidden=(), theta=np.zeros(0))
    theta = np.concatenate([np.array([[0.0, 1.0], [-1.0, 0.0]]).ravel(), np.zeros(2)])
    return model.with_theta(theta)


def test_perfect_model_loss_is_tiny():
    system = make_system("mass_spring")
    ds = generate_dataset(system, 1, seed=1, train_end=0.5)
    window = make_windows(ds, window=10, stride=10)[0]
    model = _mass_spring_linear_model()
    for mode in ("node", "pnode_fast"):
        loss, grad = window_loss(model, window, mode)
        assert loss <= 1e-8
        assert np.all(np.isfinite(grad))


def test_zero_deviation_gives_zero_loss():
    ds = _toy_dataset(length=5)
    window = make_windows(ds, window=5, stride=5)[0]
    window = Window(times=window.times, states=np.tile(window.states[0], (5, 1)),
                    constraint=window.constraint)
    model = MlpDynamics(dim=2, hidden=(), theta=np.zeros(0))
    model = model.with_theta(np.zeros(model.n_params()))
    loss, _ = window_loss(model, window, "node")
    assert loss == 0.0


def test_diverged_rollout_raises():
    ds = _toy_dataset(length=5)
    window = make_windows(ds, window=5, stride=5)[0]
    model = MlpDynamics(dim=2, hidden=(), theta=np.zeros(0))
    huge = np.full(model.n_params(), 1e200)
    with np.errstate(over="ignore", invalid="ignore"):
        with pytest.raises(DivergedRolloutError):
            window_loss(model.with_theta(huge), window, "node")


MODES_AND_SYSTEMS = [
    ("node", "mass_spring"),
    ("node_soft", "mass_spring"),
    ("snode", "mass_spring"),
    ("pnode_fast", "mass_spring"),
    ("pnode_robust", "mass_spring"),
    ("pnode_fast", "lotka_volterra"),
    ("snode", "robot_arm"),
    ("pnode_robust", "nonlinear_spring_2d"),
]


@pytest.mark.parametrize("mode,system_name", MODES_AND_SYSTEMS)
def test_gradients_match_finite_differences(mode, system_name):
    system = make_system(system_name)
    ds = generate_dataset(system, 1, seed=2, train_end=0.2, save_every=50)  # dt=0.05
    window = make_windows(ds, window=3, stride=3)[0]
    model = model_for_system(system, hidden=(8,), seed=4)
    proj = ProjectionConfig.fast(tolerance=1e-13)

    loss, grad = window_loss(model, window, mode, gamma=0.8, soft_weight=0.7,
                             projection_config=proj)

    def value_of(th):
        return window_loss(model.with_theta(th), window, mode, gamma=0.8,
                           soft_weight=0.7, projection_config=proj,
                           with_grad=False)[0]

    eps = 1e-6
    fd = np.zeros_like(grad)
    for j in range(model.n_params()):
        step = np.zeros(model.n_params())
        step[j] = eps
        fd[j] = (value_of(model.theta + step) - value_of(model.theta - step)) / (2 * eps)
    rel = np.linalg.norm(grad - fd) / (np.linalg.norm(fd) + 1e-12)
    assert rel <= 1e-4, f"{mode}/{system_name}: relative gradient error {rel:.2e}"


def test_pnode_window_states_stay_on_manifold():
    system = make_system("mass_spring")
    ds = generate_dataset(system, 1, seed=3, train_end=0.5)
    window = make_windows(ds, window=10, stride=10)[0]
    model = model_for_system(system, hidden=(8,), seed=5)
    from pnode.autodiff import Tape
    from pnode.neuralmodel import TapeParameters
    from pnode.training import rollout_on_tape
    tape = Tape()
    params = TapeParameters(tape, model)
    nodes = rollout_on_tape(tape, params, window.states[0], 0.0, 9, 0.01,
                            "pnode_fast", window.constraint,
                            projection_config=ProjectionConfig.fast())
    for node in nodes[1:]:
        assert window.constraint.violation(tape.value(node)) <= 1e-12


# -- Adam ------------------------------------------------------------------

def test_adam_zero_learning_rate_keeps_parameters():
    system = make_system("mass_spring")
    ds = generate_dataset(system, 1, seed=4, train_end=0.3)
    model = model_for_system(system, hidden=(4,), seed=6)
    cfg = TrainConfig(mode="node", lr=0.0, epochs=2, window=5, stride=10, seed=0)
    trained, _ = train_adam(model, ds, cfg)
    assert np.array_equal(trained.theta, model.theta)


def test_adam_converges_on_quadratic():
    target = np.array([1.0, -2.0, 0.5, 3.0])
    adam = AdamState(4, lr=1e-2)
    theta = np.zeros(4)
    for step in range(5000):
        grad = 2.0 * (theta - target)
        theta = adam.update(theta, grad)
        if np.linalg.norm(theta - target) <= 1e-6:
            break
    assert np.linalg.norm(theta - target) <= 1e-6
    assert step < 5000


def test_adam_training_is_bit_reproducible():
    system = make_system("mass_spring")
    ds = generate_dataset(system, 2, seed=5, train_end=0.3)
    cfg = TrainConfig(mode="pnode_fast", epochs=2, window=5, stride=10, seed=9)
    model = model_for_system(system, hidden=(4,), seed=7)
    a, ha = train_adam(model, ds, cfg)
    b, hb = train_adam(model, ds, cfg)
    assert np.array_equal(a.theta, b.theta)
    assert [r["loss"] for r in ha] == [r["loss"] for r in hb]


def test_adam_reduces_training_loss():
    system = make_system("mass_spring")
    ds = generate_dataset(system, 2, seed=6, train_end=1.0)
    cfg = TrainConfig(mode="node", epochs=20, window=5, stride=20, lr=3e-3, seed=1)
    model = model_for_system(system, hidden=(8,), seed=8)
    trained, history = train_adam(model, ds, cfg)
    assert history[-1]["loss"] < history[0]["loss"]


# -- L-BFGS ----------------------------------------------------------------

def test_lbfgs_quadratic_exact_minimum():
    target = np.array([2.0, -1.0, 0.25])

    def value_and_grad(th):
        d = th - target
        return float(d @ d), 2.0 * d

    theta, history = lbfgs_minimize(value_and_grad, np.zeros(3), max_iters=10)
    assert np.linalg.norm(theta - target) <= 1e-10
    assert len(history) <= 4  # n+1 iterations for a quadratic


def test_lbfgs_descent_and_armijo_flags():
    rng = np.random.Generator(np.random.PCG64(3))
    a = rng.normal(size=(6, 6))
    spd = a @ a.T + np.eye(6)
    target = rng.normal(size=6)

    def value_and_grad(th):
        d = th - target
        return 0.5 * float(d @ spd @ d), spd @ d

    theta0 = rng.normal(size=6)
    theta, history = lbfgs_minimize(value_and_grad, theta0, max_iters=50)
    f_end = value_and_grad(theta)[0]
    assert f_end <= value_and_grad(theta0)[0]
    assert np.linalg.norm(value_and_grad(theta)[1]) <= np.linalg.norm(value_and_grad(theta0)[1])
    losses = [row["loss"] for row in history]
    assert all(x >= y - 1e-15 for x, y in zip(losses, losses[1:]))
    assert all(row["armijo"] for row in history)


def test_lbfgs_linesearch_failure_returns_best():
    # a function whose best point is the start: every step fails Armijo
    def value_and_grad(th):
        return float(np.abs(th[0]) ** 0.5), np.array([np.sign(th[0]) * 1e6])

    theta, history = lbfgs_minimize(value_and_grad, np.array([1e-30]),
                                    max_iters=5, max_backtracks=5)
    assert np.isfinite(theta[0])


def test_train_lbfgs_improves_full_trajectory_loss():
    system = make_system("mass_spring")
    ds = generate_dataset(system, 2, seed=8, train_end=0.5)
    cfg = TrainConfig(mode="node", epochs=0, lbfgs_max_iters=10, seed=2)
    model = model_for_system(system, hidden=(8,), seed=10)
    from pnode.training import _batch_loss_and_grad
    windows = full_trajectory_windows(ds)
    before = _batch_loss_and_grad(model, windows, cfg, with_grad=False)[0]
    trained, history = train_lbfgs(model, ds, cfg)
    after = _batch_loss_and_grad(trained, windows, cfg, with_grad=False)[0]
    assert after < before
    assert len(history) >= 1


def test_loss_history_roundtrip(tmp_path):
    history = [
        {"epoch": 0, "loss": 0.5, "grad_norm": 1.25, "wall_time": 0.01},
        {"epoch": 1, "loss": 0.25, "grad_norm": 0.5, "wall_time": 0.02},
    ]
    path = tmp_path / "loss.csv"
    write_loss_history(history, path)
    back = read_loss_history(path)
    assert back[0]["epoch"] == 0
    assert back[1]["loss"] == 0.25
    assert back[1]["grad_norm"] == 0.5
