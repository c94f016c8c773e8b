"""Forward simulation of the controlled Volterra state and the objective.

Two Euler-type schemes are provided. The integral form re-evaluates the
full kernel history at every node (cost O(N^2) per path); the differential
form propagates the state with the expanded drift that carries the d/dt
kernel derivatives. Both use left-point evaluation in all stochastic sums.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import SimulationError
from .grids import PathBundle
from .models import CoefficientModel, ControlProcess, PerformanceSpec
from .reporting import write_csv


@dataclass
class StateEnsemble:
    """Simulated state values X(t_i) per node and path, shape (N+1, M)."""

    values: np.ndarray
    control: ControlProcess
    paths: PathBundle

    @property
    def terminal(self) -> np.ndarray:
        return self.values[-1]


def _check_finite(x: np.ndarray, node: int, what: str) -> None:
    if not np.all(np.isfinite(x)):
        bad = int(np.flatnonzero(~np.isfinite(np.atleast_1d(x)))[0])
        raise SimulationError(f"{what} produced a non-finite value at path {bad}, node {node}")


def _control_grid(control: ControlProcess, paths: PathBundle) -> np.ndarray | None:
    """Open-loop (N, M) control values, or None for feedback rules."""
    if control.kind == "feedback":
        return None
    return control.open_loop_grid(paths.n_steps, paths.n_paths)


def simulate_integral_form(model: CoefficientModel, control: ControlProcess,
                           paths: PathBundle) -> StateEnsemble:
    """Simulate the state from its integral representation.

    X_i = xi(t_i) + sum_{j<i} b(t_i,t_j,X_j,u_j) dt
        + sum_{j<i} sigma(t_i,t_j,X_j,u_j) dB_j
        + sum_{j<i} sum_k gamma(t_i,t_j,X_j,u_j,z_k) dN~_{j,k}
    """
    grid, jumps = paths.grid, paths.jumps
    n, m, dt = paths.n_steps, paths.n_paths, grid.dt
    t = grid.nodes
    marks = jumps.mark_array
    dW = paths.dW
    dNt = paths.compensated_counts if jumps.n_marks else None
    u_grid = _control_grid(control, paths)

    x = np.empty((n + 1, m))
    x[0] = model.initial_curve(t[0])
    u_rows = np.empty((n, m))
    for i in range(1, n + 1):
        hist = slice(0, i)
        if u_grid is None:
            u_rows[i - 1] = control.at(i - 1, paths, x=x[i - 1])
        s_h = t[:i, None]
        x_h = None if model.x_independent else x[hist]
        u_h = u_grid[hist] if u_grid is not None else u_rows[hist]
        acc = model.drift(t[i], s_h, x_h, u_h) * dt
        acc += model.diffusion(t[i], s_h, x_h, u_h) * dW[hist]
        val = np.asarray(acc).sum(axis=0) + model.initial_curve(t[i])
        if jumps.n_marks:
            g = model.jump(t[i], s_h[:, :, None], None if x_h is None else x_h[:, :, None],
                           u_h[:, :, None], marks[None, None, :])
            val += np.einsum("jmk,jmk->m", np.broadcast_to(g, (i, m, jumps.n_marks)),
                             dNt[hist])
        _check_finite(val, i, "integral-form state")
        x[i] = val
    return StateEnsemble(values=x, control=control, paths=paths)


def simulate_differential_form(model: CoefficientModel, control: ControlProcess,
                               paths: PathBundle) -> StateEnsemble:
    """Simulate the state from its differential representation.

    The drift carries the expanded memory terms: xi'(t_i), the diagonal
    kernels, and the history sums of the d/dt kernel partials.
    """
    grid, jumps = paths.grid, paths.jumps
    n, m, dt = paths.n_steps, paths.n_paths, grid.dt
    t = grid.nodes
    marks = jumps.mark_array
    dW = paths.dW
    dNt = paths.compensated_counts if jumps.n_marks else None
    u_grid = _control_grid(control, paths)

    x = np.empty((n + 1, m))
    x[0] = model.initial_curve(t[0])
    u_rows = np.empty((n, m))
    for i in range(n):
        if u_grid is None:
            u_rows[i] = control.at(i, paths, x=x[i])
        u_i = u_grid[i] if u_grid is not None else u_rows[i]
        x_i = None if model.x_independent else x[i]
        drift = np.broadcast_to(
            np.asarray(model.initial_slope(t[i]) + model.drift(t[i], t[i], x_i, u_i), dtype=float),
            (m,),
        ).copy()
        if i > 0:
            hist = slice(0, i)
            s_h = t[:i, None]
            x_h = None if model.x_independent else x[hist]
            u_h = u_grid[hist] if u_grid is not None else u_rows[hist]
            mem = model.drift_dt(t[i], s_h, x_h, u_h) * dt
            mem += model.diffusion_dt(t[i], s_h, x_h, u_h) * dW[hist]
            drift += np.asarray(mem).sum(axis=0)
            if jumps.n_marks:
                g = model.jump_dt(t[i], s_h[:, :, None],
                                  None if x_h is None else x_h[:, :, None],
                                  u_h[:, :, None], marks[None, None, :])
                drift += np.einsum("jmk,jmk->m",
                                   np.broadcast_to(g, (i, m, jumps.n_marks)), dNt[hist])
        val = x[i] + drift * dt + model.diffusion(t[i], t[i], x_i, u_i) * dW[i]
        if jumps.n_marks:
            g = model.jump(t[i], t[i], None if x_i is None else x_i[:, None],
                           np.asarray(u_i)[..., None], marks[None, :])
            val = val + np.einsum("mk,mk->m",
                                  np.broadcast_to(g, (m, jumps.n_marks)), dNt[i])
        _check_finite(val, i + 1, "differential-form state")
        x[i + 1] = val
    return StateEnsemble(values=x, control=control, paths=paths)


def terminal_state(model: CoefficientModel, control: ControlProcess,
                   paths: PathBundle) -> np.ndarray:
    """Terminal state X(T) per path.

    For x-independent models this is a single O(N) kernel sum; otherwise it
    falls back to the full integral-form recursion.
    """
    if not model.x_independent:
        return simulate_integral_form(model, control, paths).terminal
    grid, jumps = paths.grid, paths.jumps
    n, m, dt = paths.n_steps, paths.n_paths, grid.dt
    t = grid.nodes
    u = control.open_loop_grid(n, m)
    s_h = t[:n, None]
    acc = model.drift(t[n], s_h, None, u) * dt + model.diffusion(t[n], s_h, None, u) * paths.dW
    val = np.asarray(acc).sum(axis=0) + model.initial_curve(t[n])
    if jumps.n_marks:
        g = model.jump(t[n], s_h[:, :, None], None, u[:, :, None],
                       jumps.mark_array[None, None, :])
        val += np.einsum("jmk,jmk->m", np.broadcast_to(g, (n, m, jumps.n_marks)),
                         paths.compensated_counts)
    return val


def performance_paths(spec: PerformanceSpec, states: StateEnsemble,
                      control: ControlProcess) -> np.ndarray:
    """Per-path objective totals sum_i f(t_i, X_i, u_i) dt + g(X_N), shape (M,)."""
    paths = states.paths
    n, m, dt = paths.n_steps, paths.n_paths, paths.grid.dt
    t = paths.grid.nodes
    total = np.zeros(m)
    for i in range(n):
        u_i = control.at(i, paths, x=states.values[i])
        fi = np.asarray(spec.running(t[i], states.values[i], u_i), dtype=float)
        total += np.broadcast_to(fi, (m,)) * dt
    total += np.asarray(spec.terminal(states.terminal), dtype=float)
    if not np.all(np.isfinite(total)):
        bad = int(np.flatnonzero(~np.isfinite(total))[0])
        raise SimulationError(f"performance summand is non-finite on path {bad}")
    return total


def evaluate_performance(spec: PerformanceSpec, states: StateEnsemble,
                         control: ControlProcess) -> tuple[float, float]:
    """Monte Carlo objective estimate and its standard error."""
    total = performance_paths(spec, states, control)
    m = len(total)
    est = float(total.mean())
    stderr = float(total.std(ddof=1) / np.sqrt(m)) if m > 1 else 0.0
    return est, stderr


def export_trajectory_csv(path, states: StateEnsemble) -> None:
    """Write per-node summary statistics (t, mean_X, std_X, q05, q95)."""
    t = states.paths.grid.nodes
    x = states.values
    rows = [
        (t[i], x[i].mean(), x[i].std(ddof=1) if x.shape[1] > 1 else 0.0,
         np.quantile(x[i], 0.05), np.quantile(x[i], 0.95))
        for i in range(len(t))
    ]
    write_csv(path, ("t", "mean_X", "std_X", "q05", "q95"), rows)
