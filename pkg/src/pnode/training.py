"""Window batching, trajectory-matching losses, and the two optimizers
(Adam for pretraining on short windows, L-BFGS for fine-tuning on whole
trajectories).

Gradients come from a discrete adjoint: the fixed-step integrator is
unrolled onto the autodiff tape, and the per-step constraint hooks
(projection, stabilization force, penalty residuals) enter as custom nodes
whose backward rules are the implicit-differentiation pullbacks from the
projection module. Nothing differentiates through a Newton iteration.
"""

import csv
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .neuralmodel import TapeParameters, forward_with_tape
from .autodiff import Tape
from .linalg import SingularMatrixError
from .projection import (
    NonConvergenceError,
    ProjectionConfig,
    ProjectionError,
    project,
    projection_vjp,
    residual_vjp,
    stabilization_term,
    stabilization_vjp,
)

MODES = ("node", "node_soft", "snode", "pnode_fast", "pnode_robust")


class DivergedRolloutError(RuntimeError):
    """Rollout or loss became non-finite; callers skip the batch."""


@dataclass(frozen=True)
class Window:
    times: np.ndarray
    states: np.ndarray
    constraint: object
    trajectory_index: int = 0
    start: int = 0

    def __len__(self):
        return self.times.shape[0]


@dataclass
class TrainConfig:
    mode: str = "pnode_fast"
    gamma: float = 0.5            # stabilization gain for snode
    soft_weight: float = 1.0      # penalty weight for node_soft
    h: float = 0.01
    # Adam pretraining on short windows
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 200
    batch_size: int = 32
    window: int = 10
    stride: int = 5
    # L-BFGS fine-tuning on full trajectories
    finetune_full: bool = True
    lbfgs_history: int = 10
    lbfgs_max_iters: int = 200
    lbfgs_c1: float = 1e-4
    lbfgs_max_backtracks: int = 40
    lbfgs_gtol: float = 1e-10
    projection: ProjectionConfig = field(default_factory=ProjectionConfig.fast)
    seed: int = 0
    threads: int = 1

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.soft_weight < 0.0:
            raise ValueError("soft_weight must be non-negative")

    def projection_for_mode(self):
        variant = "robust" if self.mode == "pnode_robust" else "fast"
        return replace(self.projection, variant=variant)


def make_windows(dataset, window, stride):
    """Overlapping windows starting at indices 0, stride, 2*stride, ...

    Each window is an independent training sample with its own initial
    condition and its trajectory's constraint.
    """
    if window < 2:
        raise ValueError("window must cover at least 2 save points")
    if stride < 1:
        raise ValueError("stride must be positive")
    out = []
    for idx, (traj, constraint) in enumerate(zip(dataset.trajectories, dataset.constraints)):
        length = len(traj)
        if window > length:
            raise ValueError(f"window {window} exceeds trajectory length {length}")
        for start in range(0, length - window + 1, stride):
            out.append(Window(
                times=traj.times[start: start + window],
                states=traj.states[start: start + window],
                constraint=constraint, trajectory_index=idx, start=start,
            ))
    return out


def _rk4_on_tape(tape, f_node, u_node, t, h):
    # mirrors odeint.rk4_step arithmetic and association
    k1 = f_node(u_node, t)
    k2 = f_node(tape.add(u_node, tape.scale(k1, 0.5 * h)), t + 0.5 * h)
    k3 = f_node(tape.add(u_node, tape.scale(k2, 0.5 * h)), t + 0.5 * h)
    k4 = f_node(tape.add(u_node, tape.scale(k3, h)), t + h)
    s = tape.add(tape.add(tape.add(k1, tape.scale(k2, 2.0)),
                          tape.scale(k3, 2.0)), k4)
    return tape.add(u_node, tape.scale(s, h / 6.0))


def rollout_on_tape(tape, params, u0, t0, n_steps, h, mode, constraint,
                    gamma=0.5, projection_config=None):
    """Unroll n_steps of RK4 on the tape; returns node ids per save point.

    Projected modes replace each step's state with a projection custom node;
    the stabilized mode augments the rhs with a stabilization custom node at
    every stage. Raises DivergedRolloutError on non-finite states or failed
    projections.
    """
    proj_cfg = projection_config or ProjectionConfig.fast()

    if mode == "snode":
        def f_node(u_node, t):
            net = forward_with_tape(params, u_node, t)
            u_val = tape.value(u_node)
            stab = stabilization_term(u_val, constraint, t, gamma)

            def pull(w, _u=u_val, _t=t):
                return (stabilization_vjp(_u, constraint, _t, gamma, w),)

            return tape.add(net, tape.custom(stab, (u_node,), pull))
    else:
        def f_node(u_node, t):
            return forward_with_tape(params, u_node, t)

    u_node = tape.constant(np.asarray(u0, dtype=float))
    nodes = [u_node]
    projected = mode in ("pnode_fast", "pnode_robust")
    for k in range(1, n_steps + 1):
        t_prev = t0 + (k - 1) * h
        t_next = t0 + k * h
        try:
            u_node = _rk4_on_tape(tape, f_node, u_node, t_prev, h)
        except (NonConvergenceError, ProjectionError, SingularMatrixError) as exc:
            raise DivergedRolloutError(f"stabilization failed at step {k}: {exc}") from exc
        u_val = tape.value(u_node)
        if not np.all(np.isfinite(u_val)):
            raise DivergedRolloutError(f"non-finite state at step {k}")
        if projected:
            try:
                result = project(u_val, constraint, t_next, proj_cfg)
            except (NonConvergenceError, ProjectionError, SingularMatrixError) as exc:
                raise DivergedRolloutError(f"projection failed at step {k}: {exc}") from exc

            def pull(w, _u=u_val, _r=result, _t=t_next):
                return (projection_vjp(_u, _r, constraint, _t, w),)

            u_node = tape.custom(result.z, (u_node,), pull)
        nodes.append(u_node)
    return nodes


def window_loss(model, window, mode, gamma=0.5, soft_weight=1.0,
                projection_config=None, with_grad=True):
    """Mean squared trajectory error over a window, plus the optional
    soft-constraint penalty; gradient w.r.t. the flat parameters via the
    tape's reverse pass.
    """
    n_points = len(window)
    h = float(window.times[1] - window.times[0])
    constraint = window.constraint
    tape = Tape()
    params = TapeParameters(tape, model)
    nodes = rollout_on_tape(
        tape, params, window.states[0], float(window.times[0]),
        n_points - 1, h, mode, constraint, gamma=gamma,
        projection_config=projection_config,
    )
    acc = None
    for k in range(1, n_points):
        diff = tape.add(nodes[k], tape.constant(-window.states[k]))
        term = tape.dot(diff, diff)
        acc = term if acc is None else tape.add(acc, term)
    loss_node = tape.scale(acc, 1.0 / n_points)
    if mode == "node_soft":
        pen = None
        for k in range(n_points):
            u_node = nodes[k]
            u_val = tape.value(u_node)
            t_k = float(window.times[0]) + k * h
            g_val = np.asarray(constraint.residual(u_val, t_k), dtype=float)

            def pull(w, _u=u_val, _t=t_k):
                return (residual_vjp(_u, constraint, _t, w),)

            g_node = tape.custom(g_val, (u_node,), pull)
            term = tape.dot(g_node, g_node)
            pen = term if pen is None else tape.add(pen, term)
        loss_node = tape.add(loss_node, tape.scale(pen, soft_weight / n_points))
    loss = tape.value(loss_node)
    if not np.isfinite(loss):
        raise DivergedRolloutError(f"non-finite loss {loss!r}")
    if not with_grad:
        return loss, None
    adjoints = tape.backward(loss_node)
    return loss, params.flatten_grads(adjoints)


def _batch_loss_and_grad(model, windows, cfg, with_grad=True):
    """Average loss/gradient over windows, skipping none: a diverged window
    raises so the caller can skip the whole batch. Reduction order is fixed
    by window position for determinism.
    """
    proj_cfg = cfg.projection_for_mode()

    def one(window):
        return window_loss(model, window, cfg.mode, gamma=cfg.gamma,
                           soft_weight=cfg.soft_weight,
                           projection_config=proj_cfg, with_grad=with_grad)

    # rollouts of poor models may wander into log/overflow territory; that
    # surfaces as a DivergedRolloutError, not a warning
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        if cfg.threads > 1:
            with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
                results = list(pool.map(one, windows))
        else:
            results = [one(w) for w in windows]
    total = 0.0
    grad = np.zeros(model.n_params()) if with_grad else None
    for loss, g in results:
        total += loss
        if with_grad:
            grad += g
    scale = 1.0 / len(windows)
    return total * scale, (grad * scale if with_grad else None)


class AdamState:
    """Adam moment estimates with bias correction."""

    def __init__(self, n, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = np.zeros(n)
        self.v = np.zeros(n)
        self.step = 0

    def update(self, theta, grad):
        self.step += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        m_hat = self.m / (1.0 - self.beta1 ** self.step)
        v_hat = self.v / (1.0 - self.beta2 ** self.step)
        return theta - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def train_adam(model, dataset, cfg):
    """Adam pretraining on shuffled mini-batches of overlapping windows.

    Deterministic given (seed, threads=1). Diverged batches are counted and
    skipped; non-finite parameters abort with the epoch index. Returns the
    trained model and a per-epoch history suitable for the loss CSV.
    """
    windows = make_windows(dataset, cfg.window, cfg.stride)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(cfg.seed), 2])))
    theta = model.theta.copy()
    adam = AdamState(theta.shape[0], lr=cfg.lr, beta1=cfg.beta1,
                     beta2=cfg.beta2, eps=cfg.eps)
    history = []
    start = time.perf_counter()
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(windows))
        epoch_loss = 0.0
        epoch_sq_grad = 0.0
        n_batches = 0
        n_diverged = 0
        for lo in range(0, len(order), cfg.batch_size):
            batch = [windows[i] for i in order[lo: lo + cfg.batch_size]]
            current = model.with_theta(theta)
            try:
                loss, grad = _batch_loss_and_grad(current, batch, cfg)
            except DivergedRolloutError:
                n_diverged += 1
                continue
            theta = adam.update(theta, grad)
            if not np.all(np.isfinite(theta)):
                raise DivergedRolloutError(f"non-finite parameters at epoch {epoch}")
            epoch_loss += loss
            epoch_sq_grad += float(grad @ grad)
            n_batches += 1
        history.append({
            "epoch": epoch,
            "loss": epoch_loss / max(n_batches, 1),
            "grad_norm": np.sqrt(epoch_sq_grad / max(n_batches, 1)),
            "wall_time": time.perf_counter() - start,
            "diverged_batches": n_diverged,
        })
    return model.with_theta(theta), history


def full_trajectory_windows(dataset):
    """Each training trajectory as a single window (L-BFGS objective)."""
    return make_windows(dataset, window=len(dataset.trajectories[0]), stride=1)


def lbfgs_minimize(value_and_grad, theta0, history_size=10, max_iters=200,
                   c1=1e-4, max_backtracks=40, gtol=1e-10, value_only=None):
    """L-BFGS with two-loop recursion and backtracking Armijo line search.

    ``value_and_grad(theta) -> (f, g)``; ``value_only`` may provide a cheaper
    f-only evaluation for the line search. Accepted losses are monotone
    non-increasing by the Armijo condition (asserted); a failed line search
    terminates gracefully, returning the best iterate seen.
    """
    if value_only is None:
        def value_only(th):
            return value_and_grad(th)[0]

    theta = np.asarray(theta0, dtype=float).copy()
    f, g = value_and_grad(theta)
    best_theta, best_f = theta.copy(), f
    s_hist, y_hist, rho_hist = [], [], []
    history = []
    start = time.perf_counter()
    for it in range(max_iters):
        g_norm = float(np.max(np.abs(g))) if g.size else 0.0
        if g_norm <= gtol:
            break
        # two-loop recursion for the search direction
        q = g.copy()
        alphas = []
        for s, y, rho in zip(reversed(s_hist), reversed(y_hist), reversed(rho_hist)):
            a = rho * float(s @ q)
            alphas.append(a)
            q -= a * y
        if y_hist:
            q *= float(s_hist[-1] @ y_hist[-1]) / float(y_hist[-1] @ y_hist[-1])
        for (s, y, rho), a in zip(zip(s_hist, y_hist, rho_hist), reversed(alphas)):
            b = rho * float(y @ q)
            q += (a - b) * s
        d = -q
        slope = float(g @ d)
        if slope >= 0.0:
            s_hist, y_hist, rho_hist = [], [], []
            d = -g
            slope = -float(g @ g)
        # backtracking Armijo search
        alpha = 1.0
        accepted = False
        f_new = f
        for _ in range(max_backtracks):
            try:
                f_try = value_only(theta + alpha * d)
            except DivergedRolloutError:
                alpha *= 0.5
                continue
            if np.isfinite(f_try) and f_try <= f + c1 * alpha * slope:
                f_new = f_try
                accepted = True
                break
            alpha *= 0.5
        if not accepted:
            break
        assert f_new <= f + c1 * alpha * slope  # Armijo at every accepted step
        theta_new = theta + alpha * d
        _, g_new = value_and_grad(theta_new)
        s = theta_new - theta
        y = g_new - g
        sy = float(s @ y)
        if sy > 1e-12 * np.linalg.norm(s) * max(np.linalg.norm(y), 1e-300):
            s_hist.append(s)
            y_hist.append(y)
            rho_hist.append(1.0 / sy)
            if len(s_hist) > history_size:
                s_hist.pop(0)
                y_hist.pop(0)
                rho_hist.pop(0)
        theta, f, g = theta_new, f_new, g_new
        if f < best_f:
            best_f, best_theta = f, theta.copy()
        history.append({
            "epoch": it,
            "loss": f,
            "grad_norm": float(np.linalg.norm(g)),
            "wall_time": time.perf_counter() - start,
            "step_size": alpha,
            "armijo": True,
        })
    return best_theta, history


def train_lbfgs(model, dataset, cfg, windows=None):
    """Fine-tune on the full-trajectory loss (each training trajectory is a
    single window) with L-BFGS.
    """
    if windows is None:
        windows = full_trajectory_windows(dataset)

    def value_and_grad(th):
        return _batch_loss_and_grad(model.with_theta(th), windows, cfg)

    def value_only(th):
        return _batch_loss_and_grad(model.with_theta(th), windows, cfg,
                                    with_grad=False)[0]

    try:
        theta, history = lbfgs_minimize(
            value_and_grad, model.theta,
            history_size=cfg.lbfgs_history, max_iters=cfg.lbfgs_max_iters,
            c1=cfg.lbfgs_c1, max_backtracks=cfg.lbfgs_max_backtracks,
            gtol=cfg.lbfgs_gtol, value_only=value_only,
        )
    except DivergedRolloutError as exc:
        raise DivergedRolloutError(f"fine-tune evaluation diverged: {exc}") from exc
    return model.with_theta(theta), history


def write_loss_history(history, path):
    """Loss history CSV: epoch, loss, grad_norm, wall_time."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "loss", "grad_norm", "wall_time"])
        for row in history:
            writer.writerow([row["epoch"], repr(float(row["loss"])),
                             repr(float(row["grad_norm"])), repr(float(row["wall_time"]))])


def read_loss_history(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [{k: (int(v) if k == "epoch" else float(v)) for k, v in row.items()}
            for row in rows]
