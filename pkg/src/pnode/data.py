"""Trajectory datasets: reference-resolution simulation of the true
dynamics, a quality gate on invariant drift, and a versioned text format.

File layout (``pnode-dataset v1``)::

    # pnode-dataset v1
    # system=<name>
    # h_ref=<float> save_every=<int> seed=<int> n_trajectories=<int>
    # trajectory=<idx> n_samples=<int>
    t,u0,...,u{n-1}
    ...

Floats are written with repr (shortest round-trip), so files are
byte-reproducible given a seed and parse back losslessly. Constraints are
not serialized; they are rebuilt from each trajectory's initial state by
the system's constraint factory.
"""

from dataclasses import dataclass

import numpy as np

from .odeint import StepperConfig, Trajectory, integrate
from .projection import ConstraintSpec
from .systems import make_system

H_REF = 1e-3
SAVE_EVERY_REF = 10
DRIFT_TOLERANCE = 1e-7
FORMAT_LINE = "# pnode-dataset v1"


class DataQualityError(RuntimeError):
    """Reference trajectory drifted off its invariant more than allowed."""


@dataclass
class TrajectoryDataset:
    system_name: str
    h_ref: float
    save_every: int
    seed: int
    trajectories: list  # of Trajectory
    constraints: list   # of ConstraintSpec, aligned with trajectories

    @property
    def save_dt(self):
        return self.h_ref * self.save_every

    def __len__(self):
        return len(self.trajectories)


def dataset_seed_sequence(seed):
    """Stream used for training-data initial conditions."""
    return np.random.SeedSequence(entropy=[int(seed), 0])


def eval_seed_sequence(seed):
    """Disjoint stream for evaluation initial conditions under the same seed."""
    return np.random.SeedSequence(entropy=[int(seed), 1])


def generate_dataset(system, n_trajectories, seed, train_end=None,
                     h_ref=H_REF, save_every=SAVE_EVERY_REF):
    """Simulate the true dynamics at reference resolution.

    Initial conditions come from per-trajectory seeded RNG streams. The step
    count is trimmed to a whole number of save intervals so the save grid is
    uniform. Each trajectory is checked against its own invariant levels and
    rejected if the drift exceeds DRIFT_TOLERANCE.
    """
    if n_trajectories < 1:
        raise ValueError("need at least one trajectory")
    horizon = system.train_end if train_end is None else train_end
    block = h_ref * save_every
    n_saves = int(np.floor(horizon / block + 1e-9))
    if n_saves < 1:
        raise ValueError("horizon shorter than one save interval")
    t_end = n_saves * block
    cfg = StepperConfig(h=h_ref)
    streams = dataset_seed_sequence(seed).spawn(n_trajectories)
    trajectories, constraints = [], []
    for i in range(n_trajectories):
        rng = np.random.Generator(np.random.PCG64(streams[i]))
        u0 = system.ic_sampler(rng)
        constraint = system.constraints(u0, 0.0)
        traj = integrate(system.true_rhs, u0, 0.0, t_end, cfg, save_every=save_every)
        drift = max(constraint.violation(u, t) for u, t in zip(traj.states, traj.times))
        if drift > DRIFT_TOLERANCE:
            raise DataQualityError(
                f"trajectory {i} of {system.name} drifted to |g|_inf={drift:.3e} "
                f"(allowed {DRIFT_TOLERANCE:.1e}); refine h_ref"
            )
        trajectories.append(traj)
        constraints.append(constraint)
    return TrajectoryDataset(
        system_name=system.name, h_ref=h_ref, save_every=save_every,
        seed=int(seed), trajectories=trajectories, constraints=constraints,
    )


def _fmt(x):
    return repr(float(x))


def save_dataset(dataset, path):
    lines = [FORMAT_LINE,
             f"# system={dataset.system_name}",
             f"# h_ref={_fmt(dataset.h_ref)} save_every={dataset.save_every} "
             f"seed={dataset.seed} n_trajectories={len(dataset)}"]
    dim = dataset.trajectories[0].states.shape[1]
    header = "t," + ",".join(f"u{j}" for j in range(dim))
    for idx, traj in enumerate(dataset.trajectories):
        lines.append(f"# trajectory={idx} n_samples={len(traj)}")
        lines.append(header)
        for t, u in zip(traj.times, traj.states):
            lines.append(_fmt(t) + "," + ",".join(_fmt(x) for x in u))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_dataset(path, system=None):
    """Parse a v1 dataset file; rebuilds constraints via the system factory."""
    with open(path) as fh:
        lines = [ln.rstrip("\n") for ln in fh if ln.strip()]
    if not lines or lines[0] != FORMAT_LINE:
        raise ValueError(f"{path}: not a pnode-dataset v1 file")
    meta = {}
    for ln in lines[1:3]:
        for tok in ln.lstrip("# ").split():
            if "=" in tok:
                k, v = tok.split("=", 1)
                meta[k] = v
    system_name = lines[1].split("=", 1)[1].strip()
    if system is None:
        system = make_system(system_name)
    elif system.name != system_name:
        raise ValueError(f"dataset is for {system_name!r}, not {system.name!r}")

    trajectories, constraints = [], []
    i = 3
    while i < len(lines):
        if not lines[i].startswith("# trajectory="):
            raise ValueError(f"{path}: malformed trajectory header at line {i + 1}")
        n_samples = int(lines[i].split("n_samples=")[1])
        rows = lines[i + 2: i + 2 + n_samples]
        data = np.array([[float(x) for x in row.split(",")] for row in rows])
        traj = Trajectory(times=data[:, 0], states=data[:, 1:])
        trajectories.append(traj)
        constraints.append(system.constraints(traj.states[0], float(traj.times[0])))
        i += 2 + n_samples
    return TrajectoryDataset(
        system_name=system_name, h_ref=float(meta["h_ref"]),
        save_every=int(meta["save_every"]), seed=int(meta["seed"]),
        trajectories=trajectories, constraints=constraints,
    )
