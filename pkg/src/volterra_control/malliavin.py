"""Discrete Malliavin derivatives and regression conditional expectations.

The Brownian derivative of a path functional at node i is its partial
derivative with respect to the single increment dW_i (central difference,
exact for functionals that are affine or quadratic in the increment). The
jump derivative at (node i, mark k) is the add-one-jump difference: the
change in the functional when one raw jump of mark k is inserted at t_i.

Conditional expectations E[. | F_t] are realized as ridge-regularized
polynomial regressions on path features observable at t. The fitted node
regressions double as explicit surrogates: closed-form functions of the
features whose gradients feed the adjoint solver's Malliavin fields.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from itertools import combinations_with_replacement
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ConfigurationError, RegressionError
from .grids import PathBundle, compensated_jump_integral
from .models import ControlProcess, InfoMode
from .reporting import write_csv

# A path functional maps a PathBundle to one scalar per path, and must be
# re-evaluable on perturbed copies of the bundle.
PathFunctional = Callable[[PathBundle], np.ndarray]


def fd_step(paths: PathBundle) -> float:
    """Default central-difference step for the Brownian derivative."""
    return 1e-4 * math.sqrt(paths.grid.dt)


def d_brownian(functional: PathFunctional, paths: PathBundle, node: int,
               step: float | None = None) -> np.ndarray:
    """Derivative of the functional with respect to the Brownian increment at node."""
    h = fd_step(paths) if step is None else step
    pert = paths.perturb_brownian(node, +h)
    up = np.asarray(functional(pert), dtype=float).copy()
    pert.rebump(-h)
    dn = np.asarray(functional(pert), dtype=float)
    out = (up - dn) / (2.0 * h)
    if not np.all(np.isfinite(out)):
        raise ValueError(f"functional is not finite under perturbation at node {node}")
    return out


def d_jump(functional: PathFunctional, paths: PathBundle, node: int, mark: int,
           base: np.ndarray | None = None) -> np.ndarray:
    """Add-one-jump difference of the functional at (node, mark index)."""
    if base is None:
        base = np.asarray(functional(paths), dtype=float)
    bumped = np.asarray(functional(paths.with_extra_jump(node, mark)), dtype=float)
    out = bumped - base
    if not np.all(np.isfinite(out)):
        raise ValueError(f"functional is not finite with an extra jump at node {node}")
    return out


# ---------------------------------------------------------------------------
# Path features and node regressions
# ---------------------------------------------------------------------------

@dataclass
class Feature:
    """A per-node path feature with optional noise sensitivities.

    values[j] must be F_{t_j}-measurable. brownian_sensitivity(i, j) is the
    partial derivative of values[j] with respect to dW_i (i < j); jump_shift
    (i, j, k) is the change of values[j] when one jump of mark k is added at
    node i. Either may be None when unknown; the Malliavin field builder
    raises if it needs a missing sensitivity.
    """

    name: str
    values: np.ndarray  # (N+1, M)
    brownian_sensitivity: Optional[Callable[[int, int], np.ndarray | float]] = None
    jump_shift: Optional[Callable[[int, int, int], np.ndarray | float]] = None


def brownian_feature(paths: PathBundle) -> Feature:
    return Feature(
        name="brownian",
        values=paths.brownian,
        brownian_sensitivity=lambda i, j: 1.0 if i < j else 0.0,
        jump_shift=lambda i, j, k: 0.0,
    )


def jump_sum_feature(paths: PathBundle) -> Feature:
    marks = paths.jumps.mark_array
    return Feature(
        name="jump_sum",
        values=paths.jump_sum,
        brownian_sensitivity=lambda i, j: 0.0,
        jump_shift=lambda i, j, k: float(marks[k]) if i < j else 0.0,
    )


def state_feature(values: np.ndarray, name: str = "state",
                  brownian_sensitivity=None, jump_shift=None) -> Feature:
    return Feature(name=name, values=values,
                   brownian_sensitivity=brownian_sensitivity, jump_shift=jump_shift)


def weighted_brownian_feature(weights: np.ndarray, paths: PathBundle,
                              name: str = "weighted_brownian") -> Feature:
    """Running integral sum_{j<i} w_j dW_j of a deterministic weight grid."""
    w = np.asarray(weights, dtype=float)
    vals = np.zeros((paths.n_steps + 1, paths.n_paths))
    np.cumsum(w[:, None] * paths.dW, axis=0, out=vals[1:])
    return Feature(
        name=name,
        values=vals,
        brownian_sensitivity=lambda i, j: float(w[i]) if i < j else 0.0,
        jump_shift=lambda i, j, k: 0.0,
    )


def predicted_terminal_feature(model, control: ControlProcess,
                               paths: PathBundle) -> Feature:
    """Running best prediction of the terminal state for x-independent models.

    values[i] = xi(T) + sum_{j<i} [b(T,t_j,u_j) dt + sigma(T,t_j,u_j) dW_j
    + sum_k gamma(T,t_j,u_j,z_k) dN~_{j,k}], which equals E[X(T) | F_{t_i}]
    because the remaining increments are independent of F_{t_i}.
    """
    if not model.x_independent:
        raise ConfigurationError("predicted terminal feature needs an x-independent model")
    grid, jumps = paths.grid, paths.jumps
    n, m, dt = paths.n_steps, paths.n_paths, grid.dt
    t = grid.nodes
    u = control.open_loop_grid(n, m)
    s_h = t[:n, None]
    inc = model.drift(t[n], s_h, None, u) * dt + model.diffusion(t[n], s_h, None, u) * paths.dW
    inc = np.asarray(np.broadcast_to(inc, (n, m)), dtype=float).copy()
    if jumps.n_marks:
        g = model.jump(t[n], s_h[:, :, None], None, u[:, :, None],
                       jumps.mark_array[None, None, :])
        inc += np.einsum("jmk,jmk->jm", np.broadcast_to(g, (n, m, jumps.n_marks)),
                         paths.compensated_counts)
    vals = np.empty((n + 1, m))
    xi_T = np.broadcast_to(np.asarray(model.initial_curve(t[n]), dtype=float), (m,))
    vals[0] = xi_T
    np.cumsum(inc, axis=0, out=vals[1:])
    vals[1:] += xi_T

    def b_sens(i, j):
        if i >= j:
            return 0.0
        return np.broadcast_to(
            np.asarray(model.diffusion(t[n], t[i], None, u[i]), dtype=float), (m,))

    def j_shift(i, j, k):
        if i >= j or not jumps.n_marks:
            return 0.0
        return np.broadcast_to(
            np.asarray(model.jump(t[n], t[i], None, u[i], jumps.marks[k]), dtype=float), (m,))

    return Feature(name="predicted_terminal", values=vals,
                   brownian_sensitivity=b_sens, jump_shift=j_shift)


def default_features(paths: PathBundle, states=None) -> list[Feature]:
    """Spec default feature set: Brownian level, state if supplied, jump sum."""
    feats = [brownian_feature(paths)]
    if states is not None:
        feats.append(state_feature(np.asarray(states, dtype=float)))
    if paths.jumps.n_marks and paths.jumps.intensity > 0.0:
        feats.append(jump_sum_feature(paths))
    return feats


@dataclass
class RegressionBasis:
    """Polynomial regression basis: monomials of the raw features up to `degree`."""

    degree: int = 3
    ridge: float = 1e-8

    def __post_init__(self):
        if self.degree < 1:
            raise ConfigurationError(f"basis degree must be >= 1, got {self.degree}")
        if self.ridge < 0.0:
            raise ConfigurationError(f"ridge parameter must be >= 0, got {self.ridge}")

    def dimension(self, n_raw: int) -> int:
        return sum(
            math.comb(n_raw + d - 1, d) for d in range(0, self.degree + 1)
        )


def _monomial_exponents(n_raw: int, degree: int) -> list[tuple[int, ...]]:
    out = [(0,) * n_raw]
    for d in range(1, degree + 1):
        for combo in combinations_with_replacement(range(n_raw), d):
            e = [0] * n_raw
            for idx in combo:
                e[idx] += 1
            out.append(tuple(e))
    return out


class NodeRegression:
    """Ridge projection onto polynomial features observable at one node.

    The fitted object doubles as an explicit surrogate: `predict` evaluates
    the fitted polynomial at arbitrary raw-feature values and
    `gradient_raw` returns its gradient with respect to each raw feature.
    Only the standardization metadata and the Cholesky factor of the ridge
    Gram matrix are retained; the design matrix is rebuilt on demand so node
    regressions stay cheap to keep around.
    """

    def __init__(self, features: Sequence[Feature], node: int, basis: RegressionBasis,
                 design_node: int | None = None, retain_design: bool = False):
        self.features = list(features)
        self.node = node
        self.design_node = node if design_node is None else design_node
        self.basis = basis
        raw = self.raw_values()
        self.n_paths = raw.shape[0]
        self.exponents = _monomial_exponents(len(self.features), basis.degree)
        if self.n_paths < 10 * len(self.exponents):
            raise RegressionError(
                f"need at least {10 * len(self.exponents)} paths for a basis of "
                f"dimension {len(self.exponents)}, got {self.n_paths}"
            )
        phi = self._expand_unscaled(raw, select=True)
        self.col_mean = phi.mean(axis=0)
        self.col_scale = phi.std(axis=0)
        self.col_mean[0], self.col_scale[0] = 0.0, 1.0
        self.col_scale[self.col_scale < 1e-300] = 1.0
        phi = (phi - self.col_mean) / self.col_scale
        gram = phi.T @ phi / self.n_paths
        gram[np.diag_indices_from(gram)] += self.basis.ridge
        try:
            self._chol = np.linalg.cholesky(gram)
        except np.linalg.LinAlgError as exc:
            raise RegressionError(
                "regression design is rank deficient even after ridge "
                "regularization; reduce the basis degree"
            ) from exc
        self._phi = phi if retain_design else None

    def raw_values(self) -> np.ndarray:
        return np.column_stack([f.values[self.design_node] for f in self.features])

    def _expand_unscaled(self, raw: np.ndarray, select: bool = False) -> np.ndarray:
        m = raw.shape[0]
        cols, keep = [], []
        indices = range(len(self.exponents)) if select else self.keep
        for idx in indices:
            expo = self.exponents[idx]
            col = np.ones(m)
            for r, p in enumerate(expo):
                if p:
                    col = col * raw[:, r] ** p
            if select and idx > 0 and np.std(col) <= 1e-300:
                continue
            cols.append(col)
            keep.append(idx)
        if select:
            self.keep = keep
        return np.column_stack(cols)

    def design(self, raw: np.ndarray | None = None) -> np.ndarray:
        """Standardized design matrix at the node (or at given raw values)."""
        if raw is None:
            if self._phi is not None:
                return self._phi
            raw = self.raw_values()
        else:
            raw = np.asarray(raw, dtype=float)
        return (self._expand_unscaled(raw) - self.col_mean) / self.col_scale

    def _solve(self, rhs: np.ndarray) -> np.ndarray:
        y = np.linalg.solve(self._chol, rhs)
        return np.linalg.solve(self._chol.T, y)

    def coefficients(self, targets: np.ndarray, phi: np.ndarray | None = None) -> np.ndarray:
        """Standardized-column coefficients for the given targets, (p,) or (p, q)."""
        t = np.asarray(targets, dtype=float)
        squeeze = t.ndim == 1
        if squeeze:
            t = t[:, None]
        phi = self.design() if phi is None else phi
        coef = self._solve(phi.T @ t / self.n_paths)
        return coef[:, 0] if squeeze else coef

    def fit(self, targets: np.ndarray, phi: np.ndarray | None = None) -> np.ndarray:
        """Fitted values of the ridge projection; targets (M,) or (M, q)."""
        phi = self.design() if phi is None else phi
        coef = self.coefficients(targets, phi=phi)
        return phi @ coef

    # -- surrogate evaluation at arbitrary raw-feature values ----------------

    def predict(self, raw: np.ndarray, coef: np.ndarray) -> np.ndarray:
        return self.design(raw) @ np.ravel(coef)

    def gradient_raw(self, coef: np.ndarray, raw: np.ndarray | None = None) -> np.ndarray:
        """Gradient of the fitted polynomial with respect to each raw feature.

        Returns (M, n_raw) evaluated at the node's own raw values by default.
        """
        raw = self.raw_values() if raw is None else np.asarray(raw, dtype=float)
        m, n_raw = raw.shape
        coef = np.ravel(coef)
        grad = np.zeros((m, n_raw))
        for pos, idx in enumerate(self.keep):
            expo = self.exponents[idx]
            c = coef[pos] / self.col_scale[pos]
            if c == 0.0 or idx == 0:
                continue
            for r, p in enumerate(expo):
                if not p:
                    continue
                col = c * p * np.ones(m)
                for r2, p2 in enumerate(expo):
                    q = p2 - (r2 == r)
                    if q:
                        col = col * raw[:, r2] ** q
                grad[:, r] += col
        return grad

    def shifted_delta(self, coef: np.ndarray, shift: np.ndarray) -> np.ndarray:
        """phi(raw + shift) - phi(raw) of the fitted polynomial (exact)."""
        raw = self.raw_values()
        coef = np.ravel(coef)
        return self.predict(raw + shift, coef) - self.predict(raw, coef)


def conditional_expectation(values: np.ndarray, node: int, paths: PathBundle,
                            basis: RegressionBasis | None = None,
                            features: Sequence[Feature] | None = None,
                            info: InfoMode | None = None,
                            states=None) -> np.ndarray:
    """Per-path regression estimate of E[values | F_{t_node}].

    Under delayed information the design features are taken at the lagged
    node (t - delay)+ instead, realizing E[. | G_t].
    """
    basis = basis or RegressionBasis()
    feats = list(features) if features is not None else default_features(paths, states)
    design_node = node
    if info is not None and not info.is_full:
        design_node = info.observable_node(node, paths.grid)
    reg = NodeRegression(feats, node, basis, design_node=design_node)
    return reg.fit(values)


# ---------------------------------------------------------------------------
# Identity checks
# ---------------------------------------------------------------------------

@dataclass
class DualityReport:
    lhs: float
    rhs: float
    stderr_lhs: float
    stderr_rhs: float
    degenerate: bool = False

    @property
    def combined_stderr(self) -> float:
        return math.hypot(self.stderr_lhs, self.stderr_rhs)

    @property
    def gap(self) -> float:
        return self.lhs - self.rhs

    def within(self, n_sigma: float = 3.0) -> bool:
        if self.degenerate:
            return True
        return abs(self.gap) <= n_sigma * max(self.combined_stderr, 1e-300)


def _mean_stderr(x: np.ndarray) -> tuple[float, float]:
    m = len(x)
    return float(x.mean()), float(x.std(ddof=1) / math.sqrt(m)) if m > 1 else 0.0


def check_duality_brownian(functional: PathFunctional, u, paths: PathBundle,
                           basis: RegressionBasis | None = None,
                           features: Sequence[Feature] | None = None) -> DualityReport:
    """Monte Carlo check of E[F int u dB] = E[int E[D_t F|F_t] u(t) dt].

    `u` is an adapted integrand: an array of shape (N,) or (N, M), or a
    callable bundle -> array. Both sides are estimated on the same paths.
    """
    n, m, dt = paths.n_steps, paths.n_paths, paths.grid.dt
    u_arr = np.asarray(u(paths) if callable(u) else u, dtype=float)
    u_arr = np.broadcast_to(u_arr if u_arr.ndim == 2 else u_arr[:, None], (n, m))
    f_vals = np.asarray(functional(paths), dtype=float)
    lhs_path = f_vals * np.einsum("im,im->m", u_arr, paths.dW)
    rhs_path = np.zeros(m)
    feats = list(features) if features is not None else default_features(paths)
    basis = basis or RegressionBasis()
    for i in range(n):
        deriv = d_brownian(functional, paths, i)
        proj = NodeRegression(feats, i, basis, retain_design=True).fit(deriv)
        rhs_path += proj * u_arr[i] * dt
    lhs, se_l = _mean_stderr(lhs_path)
    rhs, se_r = _mean_stderr(rhs_path)
    return DualityReport(lhs, rhs, se_l, se_r)


def check_duality_jump(functional: PathFunctional, psi, paths: PathBundle,
                       basis: RegressionBasis | None = None,
                       features: Sequence[Feature] | None = None) -> DualityReport:
    """Jump analogue: E[F int int Psi dN~] = E[int int Psi E[D_{t,z}F|F_t] nu(dz) dt].

    `psi` is adapted and mark-indexed: (N, K), (N, M, K), or callable. With
    zero jump intensity both sides vanish; the report is flagged degenerate.
    """
    jumps = paths.jumps
    n, m, dt = paths.n_steps, paths.n_paths, paths.grid.dt
    if jumps.intensity == 0.0 or jumps.n_marks == 0:
        return DualityReport(0.0, 0.0, 0.0, 0.0, degenerate=True)
    k = jumps.n_marks
    psi_arr = np.asarray(psi(paths) if callable(psi) else psi, dtype=float)
    if psi_arr.ndim == 2:
        psi_arr = psi_arr[:, None, :]
    psi_arr = np.broadcast_to(psi_arr, (n, m, k))
    f_vals = np.asarray(functional(paths), dtype=float)
    lhs_path = f_vals * np.einsum("imk,imk->m", psi_arr, paths.compensated_counts)
    rhs_path = np.zeros(m)
    feats = list(features) if features is not None else default_features(paths)
    basis = basis or RegressionBasis()
    weights = jumps.intensity * jumps.weight_array * dt
    for i in range(n):
        reg = NodeRegression(feats, i, basis, retain_design=True)
        pert = paths.with_extra_jump(i, 0)
        for kk in range(k):
            if kk:
                pert.remark(kk)
            deriv = np.asarray(functional(pert), dtype=float) - f_vals
            if not np.all(np.isfinite(deriv)):
                raise ValueError(f"functional is not finite with an extra jump at node {i}")
            rhs_path += reg.fit(deriv) * psi_arr[i, :, kk] * weights[kk]
    lhs, se_l = _mean_stderr(lhs_path)
    rhs, se_r = _mean_stderr(rhs_path)
    return DualityReport(lhs, rhs, se_l, se_r)


@dataclass
class ReconstructionReport:
    residuals: np.ndarray
    relative_rms: float
    degenerate: bool = False


def clark_ocone_reconstruct(functional: PathFunctional, paths: PathBundle,
                            basis: RegressionBasis | None = None,
                            features: Sequence[Feature] | None = None
                            ) -> ReconstructionReport:
    """Reconstruct F from its predictable projection integrand.

    residual_m = F_m - mean(F) - sum_i E[D_{t_i}F | F_{t_i}]_m dW_i^m, with
    the relative RMS reported against std(F). Configured for Brownian-only
    bundles.
    """
    if paths.jumps.intensity > 0.0:
        raise ConfigurationError("reconstruction check requires a Brownian-only bundle")
    n, m = paths.n_steps, paths.n_paths
    f_vals = np.asarray(functional(paths), dtype=float)
    resid = f_vals - f_vals.mean()
    feats = list(features) if features is not None else default_features(paths)
    basis = basis or RegressionBasis()
    for i in range(n):
        integrand = NodeRegression(feats, i, basis, retain_design=True).fit(
            d_brownian(functional, paths, i))
        resid -= integrand * paths.dW[i]
    sd = f_vals.std()
    if sd == 0.0:
        return ReconstructionReport(resid, 0.0, degenerate=True)
    rms = float(np.sqrt(np.mean(resid ** 2)) / sd)
    return ReconstructionReport(resid, rms)


def iterated_integral(kernel, order: int, paths: PathBundle) -> np.ndarray:
    """Discrete n-fold iterated Brownian integral of a symmetric kernel.

    Returns n! * sum over strictly increasing node tuples of
    kernel(t_{j_1}, ..., t_{j_n}) dW_{j_1} ... dW_{j_n}, per path. The kernel
    may be a constant or a symmetric callable; orders 1..3 are supported.
    """
    n, m = paths.n_steps, paths.n_paths
    t = paths.grid.nodes[:-1]
    dW = paths.dW
    if callable(kernel):
        kf = kernel
    else:
        const = float(kernel)
        kf = lambda *args: const + 0.0 * np.asarray(args[0], dtype=float)  # noqa: E731
    if order == 1:
        w = np.broadcast_to(np.asarray(kf(t), dtype=float), (n,))
        return np.einsum("i,im->m", w, dW)
    if order == 2:
        acc = np.zeros(m)
        for j2 in range(1, n):
            w = np.broadcast_to(np.asarray(kf(t[:j2], t[j2]), dtype=float), (j2,))
            acc += dW[j2] * (w @ dW[:j2])
        return 2.0 * acc
    if order == 3:
        acc = np.zeros(m)
        for j3 in range(2, n):
            inner = np.zeros(m)
            for j2 in range(1, j3):
                w = np.broadcast_to(np.asarray(kf(t[:j2], t[j2], t[j3]), dtype=float), (j2,))
                inner += dW[j2] * (w @ dW[:j2])
            acc += dW[j3] * inner
        return 6.0 * acc
    raise ConfigurationError(f"iterated integrals of order {order} are unsupported (max 3)")


@dataclass
class ChaosDerivativeReport:
    max_abs_error: float
    per_node: np.ndarray


def check_chaos_derivative(kernel, paths: PathBundle,
                           nodes: Sequence[int] | None = None) -> ChaosDerivativeReport:
    """Compare D_t of a second-order iterated integral against its chaos identity.

    The derivative of I_2(f) at node i should equal 2 I_1(f(., t_i)); on the
    grid the two differ by the diagonal term 2 f(t_i,t_i) dW_i, which the
    report surfaces as the discrepancy.
    """
    n = paths.n_steps
    t = paths.grid.nodes[:-1]
    if callable(kernel):
        kf = kernel
    else:
        const = float(kernel)
        kf = lambda *args: const + 0.0 * np.asarray(args[0], dtype=float)  # noqa: E731
    functional = lambda b: iterated_integral(kernel, 2, b)  # noqa: E731
    node_list = list(nodes) if nodes is not None else list(range(n))
    errs = np.zeros(len(node_list))
    for pos, i in enumerate(node_list):
        deriv = d_brownian(functional, paths, i)
        w = np.broadcast_to(np.asarray(kf(t, t[i]), dtype=float), (n,))
        direct = 2.0 * np.einsum("i,im->m", w, paths.dW)
        errs[pos] = np.max(np.abs(deriv - direct))
    return ChaosDerivativeReport(float(errs.max()), errs)


def fubini_exchange(values: np.ndarray, dt: float) -> tuple[float, float]:
    """Both orderings of the double sum sum_i sum_{j<i} a[i,j] dt^2.

    Each ordering is accumulated with exact (fsum) summation, so the two
    returned values are identical whenever the exchange identity holds.
    """
    a = np.asarray(values, dtype=float)
    n = a.shape[0]
    rows = math.fsum(a[i, j] * dt * dt for i in range(n) for j in range(i))
    cols = math.fsum(a[i, j] * dt * dt for j in range(n) for i in range(j + 1, n))
    return rows, cols


def export_check_csv(path, reports: dict[str, DualityReport]) -> None:
    """Write identity-check results: (check_name, lhs, rhs, stderr, pass)."""
    rows = [
        (name, rep.lhs, rep.rhs, rep.combined_stderr, rep.within())
        for name, rep in reports.items()
    ]
    write_csv(path, ("check_name", "lhs", "rhs", "stderr", "pass"), rows)
