"""Figure rendering for benchmark outputs.

Reads ONLY the files the benchmark CLI emits (trajectory CSVs, comparison
CSVs, eval-report JSON) and renders three figure kinds:

- ``trajectories``:   predicted state components over time, optionally
                      overlaid with a reference trajectory CSV;
- ``time_vs_error``:  state error and constraint violation against
                      inference seconds per batch, one point per mode;
- ``error_bars``:     per-mode bars of state error and violation, with
                      diverged modes annotated as gaps.

Rendering never imports or invokes the benchmark package itself.
"""

import argparse
import csv
import sys
from dataclasses import dataclass
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

FIGURE_KINDS = ("trajectories", "time_vs_error", "error_bars")

COMPARE_REQUIRED = (
    "system", "mode", "mean_rel_state_error", "mean_sq_constraint_error",
    "inference_seconds_per_batch", "diverged",
)

# violation axis must reach from projection-level residuals to gross drift
VIOLATION_FLOOR = 1e-15
VIOLATION_CEIL = 1e1


class SchemaError(ValueError):
    """Input file does not match the documented CSV/JSON schema."""


@dataclass(frozen=True)
class FigureSpec:
    inputs: tuple
    kind: str
    output: Path
    title: str = ""

    def __post_init__(self):
        if self.kind not in FIGURE_KINDS:
            raise SchemaError(f"unknown figure kind {self.kind!r}; expected {FIGURE_KINDS}")
        if not self.inputs:
            raise SchemaError("at least one input file is required")


def read_trajectory_csv(path):
    """Parse a trajectories CSV into {trajectory_id: (t, states, residuals)}."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise SchemaError(f"{path}: empty file, expected a trajectory CSV header")
    header = rows[0]
    if header[:2] != ["trajectory", "t"]:
        raise SchemaError(f"{path}: expected columns starting with trajectory,t")
    if len(rows) < 2:
        raise SchemaError(f"{path}: no trajectory rows beneath the header")
    u_cols = [i for i, name in enumerate(header) if name.startswith("u")]
    g_cols = [i for i, name in enumerate(header) if name.startswith("g")]
    if not u_cols:
        raise SchemaError(f"{path}: no state columns (u0, u1, ...)")
    out = {}
    for row in rows[1:]:
        idx = int(row[0])
        t = float(row[1])
        u = [float(row[i]) for i in u_cols]
        g = [float(row[i]) for i in g_cols]
        out.setdefault(idx, []).append((t, u, g))
    return {
        idx: (
            np.array([r[0] for r in rows_]),
            np.array([r[1] for r in rows_]),
            np.array([r[2] for r in rows_]),
        )
        for idx, rows_ in out.items()
    }


def read_compare_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise SchemaError(f"{path}: empty comparison CSV")
    for column in COMPARE_REQUIRED:
        if column not in rows[0]:
            raise SchemaError(f"{path}: missing required column {column!r}")
    return rows


def _maybe_float(text):
    return float(text) if text not in ("", None) else None


def render_trajectories(spec):
    data = read_trajectory_csv(spec.inputs[0])
    reference = read_trajectory_csv(spec.inputs[1]) if len(spec.inputs) > 1 else None
    n_traj = len(data)
    dim = next(iter(data.values()))[1].shape[1]
    fig, axes = plt.subplots(n_traj, 2, figsize=(10, 2.4 * n_traj), squeeze=False)
    extents = {}
    for row, (idx, (t, u, g)) in enumerate(sorted(data.items())):
        ax = axes[row][0]
        for j in range(dim):
            ax.plot(t, u[:, j], lw=1.0, label=f"u{j} predicted")
        if reference is not None and idx in reference:
            t_ref, u_ref, _ = reference[idx]
            for j in range(dim):
                ax.plot(t_ref, u_ref[:, j], lw=0.8, ls="--", color="k",
                        label="reference" if j == 0 else None)
        ax.set_xlabel("t")
        ax.set_ylabel(f"state (trajectory {idx})")
        if row == 0:
            ax.legend(fontsize=7)
        axv = axes[row][1]
        if g.size:
            viol = np.maximum(np.linalg.norm(g, axis=1), VIOLATION_FLOOR)
            axv.plot(t, viol, lw=1.0)
            axv.set_yscale("log")
        axv.set_xlabel("t")
        axv.set_ylabel("|g|")
        extents[f"traj{idx}"] = (float(t.min()), float(t.max()),
                                 float(u.min()), float(u.max()))
    if spec.title:
        fig.suptitle(spec.title)
    fig.tight_layout()
    fig.savefig(spec.output, dpi=120)
    plt.close(fig)
    return extents


def _split_rows(rows):
    ok, diverged = [], []
    for row in rows:
        if row["diverged"] not in ("0", "", "False", "false"):
            diverged.append(row)
        else:
            ok.append(row)
    return ok, diverged


def _mode_label(row):
    gamma = row.get("gamma", "")
    return f"{row['mode']}({gamma})" if gamma else row["mode"]


def render_time_vs_error(spec):
    rows = read_compare_csv(spec.inputs[0])
    ok, diverged = _split_rows(rows)
    fig, (ax_err, ax_con) = plt.subplots(2, 1, figsize=(7, 7), sharex=True)
    extents = {}
    for row in ok:
        seconds = _maybe_float(row["inference_seconds_per_batch"])
        err = _maybe_float(row["mean_rel_state_error"])
        con = _maybe_float(row["mean_sq_constraint_error"])
        if seconds is None:
            continue
        label = _mode_label(row)
        ax_err.scatter([seconds], [err], label=label)
        ax_con.scatter([seconds], [max(con, VIOLATION_FLOOR)], label=label)
        extents[label] = (seconds, err, con)
    for ax, name in ((ax_err, "mean relative state error"),
                     (ax_con, "mean squared constraint error")):
        ax.set_yscale("log")
        ax.set_ylabel(name)
    ax_con.set_ylim(VIOLATION_FLOOR, VIOLATION_CEIL)
    extents["_violation_ylim"] = (VIOLATION_FLOOR, VIOLATION_CEIL)
    ax_con.set_xlabel("inference seconds per batch")
    ax_err.legend(fontsize=7)
    note = ", ".join(_mode_label(r) for r in diverged)
    missing_timing = [r for r in ok if _maybe_float(r["inference_seconds_per_batch"]) is None]
    if missing_timing:
        note = ", ".join(filter(None, [note, "no timing: " + ", ".join(
            _mode_label(r) for r in missing_timing)]))
    if note:
        ax_err.set_title(f"unplotted (diverged/untimed): {note}", fontsize=8)
    elif spec.title:
        ax_err.set_title(spec.title)
    fig.tight_layout()
    fig.savefig(spec.output, dpi=120)
    plt.close(fig)
    return extents


def render_error_bars(spec):
    rows = read_compare_csv(spec.inputs[0])
    ok, diverged = _split_rows(rows)
    labels = [_mode_label(r) for r in rows]
    x = np.arange(len(rows))
    fig, (ax_err, ax_con) = plt.subplots(1, 2, figsize=(11, 4))
    extents = {}
    for i, row in enumerate(rows):
        label = _mode_label(row)
        if row in diverged:
            for ax in (ax_err, ax_con):
                ax.annotate("x", (x[i], VIOLATION_FLOOR * 10), ha="center",
                            color="crimson", fontsize=12)
            extents[label] = None
            continue
        err = _maybe_float(row["mean_rel_state_error"])
        con = max(_maybe_float(row["mean_sq_constraint_error"]), VIOLATION_FLOOR)
        ax_err.bar(x[i], err)
        ax_con.bar(x[i], con)
        extents[label] = (err, con)
    for ax, name in ((ax_err, "mean relative state error"),
                     (ax_con, "mean squared constraint error")):
        ax.set_xticks(x)
        ax.set_xticklabels(labels, rotation=30, ha="right", fontsize=7)
        ax.set_yscale("log")
        ax.set_title(name, fontsize=9)
    ax_con.set_ylim(VIOLATION_FLOOR, VIOLATION_CEIL)
    extents["_violation_ylim"] = (VIOLATION_FLOOR, VIOLATION_CEIL)
    if spec.title:
        fig.suptitle(spec.title)
    fig.tight_layout()
    fig.savefig(spec.output, dpi=120)
    plt.close(fig)
    return extents


def render(spec):
    """Render one figure; returns the plotted data extents (deterministic)."""
    if spec.kind == "trajectories":
        return render_trajectories(spec)
    if spec.kind == "time_vs_error":
        return render_time_vs_error(spec)
    return render_error_bars(spec)


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="pnode-plot",
        description="Render figures from pnode benchmark output files",
    )
    parser.add_argument("--input", nargs="+", required=True,
                        help="input CSV file(s); trajectories accepts an "
                             "optional second (reference) CSV")
    parser.add_argument("--kind", choices=FIGURE_KINDS, required=True)
    parser.add_argument("--out", required=True, help="output image path")
    parser.add_argument("--title", default="")
    args = parser.parse_args(argv)
    spec = FigureSpec(inputs=tuple(args.input), kind=args.kind,
                      output=Path(args.out), title=args.title)
    try:
        render(spec)
    except (SchemaError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(spec.output)
    return 0


if __name__ == "__main__":
    sys.exit(main())
