"""Learned right-hand side f(u, θ, t): a small tanh MLP over a flat
parameter vector.

Mechanical systems use the second-order form: the network predicts only
accelerations and the position derivatives are copied from the observed
velocities. The robot arm (the one non-autonomous benchmark) additionally
feeds sin/cos of the drive phase as inputs; autonomous systems see state
only.

``forward_with_tape`` records the identical arithmetic onto an autodiff
tape. Slicing and concatenation are expressed with constant selector
matrices so the tape's primitive set stays minimal; the selector products
reproduce the plain forward bitwise.
"""

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from . import autodiff

CHECKPOINT_FORMAT = "# pnode-checkpoint v1"


@dataclass(frozen=True)
class MlpDynamics:
    dim: int                       # state dimension n
    hidden: tuple                  # hidden layer widths, may be empty
    theta: np.ndarray              # flat parameters, layout per layer_shapes
    position_idx: Optional[tuple] = None
    velocity_idx: Optional[tuple] = None
    time_features: bool = False
    meta: dict = None              # free-form provenance (system, mode, ...)

    @property
    def second_order(self):
        return self.position_idx is not None

    @property
    def input_dim(self):
        return self.dim + (2 if self.time_features else 0)

    @property
    def output_dim(self):
        return len(self.velocity_idx) if self.second_order else self.dim

    def layer_shapes(self):
        widths = [self.input_dim, *self.hidden, self.output_dim]
        return [(widths[i + 1], widths[i]) for i in range(len(widths) - 1)]

    def n_params(self):
        return sum(r * c + r for r, c in self.layer_shapes())

    def layers(self):
        """Views (W, b) per layer into the flat parameter vector (cached)."""
        cached = getattr(self, "_layers", None)
        if cached is not None:
            return cached
        out = []
        offset = 0
        for rows, cols in self.layer_shapes():
            w = self.theta[offset: offset + rows * cols].reshape(rows, cols)
            offset += rows * cols
            b = self.theta[offset: offset + rows]
            offset += rows
            out.append((w, b))
        object.__setattr__(self, "_layers", out)
        return out

    def with_theta(self, theta):
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.n_params(),):
            raise ValueError(f"expected {self.n_params()} parameters, got {theta.shape}")
        return replace(self, theta=theta)


def init_mlp(dim, hidden=(64, 64), position_idx=None, velocity_idx=None,
             time_features=False, seed=0, meta=None):
    """Glorot-uniform weights (±sqrt(6/(fan_in+fan_out))), zero biases."""
    model = MlpDynamics(
        dim=dim, hidden=tuple(hidden), theta=np.zeros(0),
        position_idx=tuple(position_idx) if position_idx is not None else None,
        velocity_idx=tuple(velocity_idx) if velocity_idx is not None else None,
        time_features=time_features, meta=dict(meta or {}),
    )
    rng = np.random.Generator(np.random.PCG64(seed))
    chunks = []
    for rows, cols in model.layer_shapes():
        bound = np.sqrt(6.0 / (rows + cols))
        chunks.append(rng.uniform(-bound, bound, size=rows * cols))
        chunks.append(np.zeros(rows))
    return model.with_theta(np.concatenate(chunks))


def model_for_system(system, hidden=(64, 64), seed=0, meta=None):
    """Architecture matched to a benchmark system's structure."""
    return init_mlp(
        dim=system.dim, hidden=hidden,
        position_idx=system.position_idx, velocity_idx=system.velocity_idx,
        time_features=system.time_dependent, seed=seed,
        meta={"system": system.name, **(meta or {})},
    )


def _time_feats(t):
    return np.array([np.sin(2.0 * np.pi * t), np.cos(2.0 * np.pi * t)])


def _mlp_apply(model, x):
    layers = model.layers()
    for w, b in layers[:-1]:
        x = np.tanh(w @ x + b)
    w, b = layers[-1]
    return w @ x + b


def forward(model, u, t=0.0):
    """du/dt predicted at state u (and time t for non-autonomous models)."""
    u = np.asarray(u, dtype=float)
    x = np.concatenate([u, _time_feats(t)]) if model.time_features else u
    out = _mlp_apply(model, x)
    if not model.second_order:
        return out
    full = np.empty(model.dim)
    full[list(model.position_idx)] = u[list(model.velocity_idx)]
    full[list(model.velocity_idx)] = out
    return full


def _selectors(model):
    """Constant matrices that reassemble the second-order derivative.

    S maps u to the vector with velocities copied into position slots;
    E embeds predicted accelerations into velocity slots.
    """
    n = model.dim
    S = np.zeros((n, n))
    for p, v in zip(model.position_idx, model.velocity_idx):
        S[p, v] = 1.0
    E = np.zeros((n, len(model.velocity_idx)))
    for row, v in enumerate(model.velocity_idx):
        E[v, row] = 1.0
    return S, E


def _embedding(model):
    """Constant input embedding for time-feature models: x = P u + c(t)."""
    n = model.dim
    P = np.zeros((n + 2, n))
    P[:n, :n] = np.eye(n)
    return P


class TapeParameters:
    """Per-layer leaf nodes for one model on one tape, created once."""

    def __init__(self, tape, model):
        self.tape = tape
        self.model = model
        self.nodes = []
        for w, b in model.layers():
            self.nodes.append((tape.constant(w), tape.constant(b)))
        if model.second_order:
            S, E = _selectors(model)
            self._s_node = tape.constant(S)
            self._e_node = tape.constant(E)
        if model.time_features:
            self._p_node = tape.constant(_embedding(model))

    def leaf_ids(self):
        out = []
        for wn, bn in self.nodes:
            out.extend((wn, bn))
        return out

    def flatten_grads(self, adjoints):
        """Assemble a flat gradient in the model's parameter layout."""
        chunks = []
        for (wn, bn), (rows, cols) in zip(self.nodes, self.model.layer_shapes()):
            gw = adjoints[wn]
            gb = adjoints[bn]
            chunks.append(np.zeros(rows * cols) if gw is None else gw.ravel())
            chunks.append(np.zeros(rows) if gb is None else np.asarray(gb))
        return np.concatenate(chunks)


def forward_with_tape(params, u_node, t=0.0):
    """Record forward(model, u, t) onto the tape; values match bitwise."""
    tape, model = params.tape, params.model
    if model.time_features:
        feats = np.zeros(model.dim + 2)
        feats[model.dim:] = _time_feats(t)
        x = tape.add(tape.matvec(params._p_node, u_node), tape.constant(feats))
    else:
        x = u_node
    for wn, bn in params.nodes[:-1]:
        x = tape.tanh(tape.add(tape.matvec(wn, x), bn))
    wn, bn = params.nodes[-1]
    out = tape.add(tape.matvec(wn, x), bn)
    if not model.second_order:
        return out
    return tape.add(tape.matvec(params._s_node, u_node),
                    tape.matvec(params._e_node, out))


def rhs_function(model):
    """A lean (u, t) -> du/dt closure for integration-heavy paths.

    Same arithmetic as forward(); the per-call dispatch is resolved once.
    """
    layers = model.layers()
    hidden_layers, (w_out, b_out) = layers[:-1], layers[-1]
    if model.time_features:
        def apply(u, t):
            x = np.concatenate([u, _time_feats(t)])
            for w, b in hidden_layers:
                x = np.tanh(w @ x + b)
            return w_out @ x + b_out
    else:
        def apply(u, t):
            x = u
            for w, b in hidden_layers:
                x = np.tanh(w @ x + b)
            return w_out @ x + b_out
    if not model.second_order:
        return apply
    pos = list(model.position_idx)
    vel = list(model.velocity_idx)
    n = model.dim

    def second_order_rhs(u, t):
        full = np.empty(n)
        full[pos] = u[vel]
        full[vel] = apply(u, t)
        return full

    return second_order_rhs


def save_checkpoint(model, path):
    meta = model.meta or {}
    lines = [
        CHECKPOINT_FORMAT,
        f"system={meta.get('system', '')}",
        f"mode={meta.get('mode', '')}",
        f"dim={model.dim}",
        "hidden=" + ",".join(str(h) for h in model.hidden),
        "position_idx=" + ",".join(str(i) for i in (model.position_idx or ())),
        "velocity_idx=" + ",".join(str(i) for i in (model.velocity_idx or ())),
        f"time_features={int(model.time_features)}",
        f"n_params={model.n_params()}",
    ]
    lines.extend(repr(float(x)) for x in model.theta)
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_checkpoint(path):
    with open(path) as fh:
        lines = [ln.rstrip("\n") for ln in fh]
    if not lines or lines[0] != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a pnode-checkpoint v1 file")
    kv = {}
    i = 1
    while i < len(lines) and "=" in lines[i]:
        k, v = lines[i].split("=", 1)
        kv[k] = v
        i += 1

    def idx(key):
        return tuple(int(x) for x in kv[key].split(",")) if kv.get(key) else None

    n_params = int(kv["n_params"])
    theta = np.array([float(x) for x in lines[i: i + n_params]])
    hidden = tuple(int(x) for x in kv["hidden"].split(",")) if kv["hidden"] else ()
    model = MlpDynamics(
        dim=int(kv["dim"]), hidden=hidden, theta=np.zeros(0),
        position_idx=idx("position_idx"), velocity_idx=idx("velocity_idx"),
        time_features=bool(int(kv["time_features"])),
        meta={"system": kv.get("system", ""), "mode": kv.get("mode", "")},
    )
    return model.with_theta(theta)
