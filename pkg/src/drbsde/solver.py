"""Backward recursions on the enlarged tree: plain, reflected and penalized equations.

At an alive node of step ``k`` the scheme computes

    P_k = E_Q[Y_{k+1} | node],   Z_k = Cov_Q(Y_{k+1}, dB_{k+1} | node) / Var_Q(dB_{k+1} | node),
    Y_k = clamp(P_k + f(t_k, P_k, Z_k) dt, L_k, U_k),

and the clamp amounts are the reflection increments. After default the solution
is frozen at the recovery value.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable

import numpy as np

from .errors import BarrierError, ConfigurationError, DriverError, NumericRangeError, PreconditionError
from .filtration import (
    F_TREE,
    G_TREE,
    TOL,
    AdaptedProcess,
    LatticeModel,
    Measure,
    assemble_gprocess,
    conditional_expectation,
    fprocess,
    lift_stopped,
    prefix_label,
    stopped_walk,
)


def _coef_process(model: LatticeModel, c) -> AdaptedProcess:
    return fprocess(model, 0.0 if c is None else c)


@dataclass(eq=False)
class DriverSpec:
    """Generator of the backward equation.

    ``kind`` is one of ``zero``, ``linear`` (``f = g - r y - theta z``), ``g``
    (``f = g``, free of ``y`` and ``z``) or ``general`` (``f = func(t, b, y, z)``
    with ``b`` the walk value at the node). Coefficients may be scalars,
    callables ``(t, b)`` or base-tree processes.

    The Lipschitz moduli ``kappa`` and ``gamma`` default to ``|r|`` and
    ``|theta|``; ``kappa`` is floored at ``epsilon`` so that
    ``alpha^2 = kappa + gamma^2 >= epsilon`` holds for every kind.
    """

    kind: str = "zero"
    r: object = 0.0
    theta: object = 0.0
    g: object = 0.0
    func: Callable | None = None
    kappa: object = None
    gamma: object = None
    epsilon: float = 1e-6
    lipschitz_grid: tuple = (10.0, 10.0, 9)
    _cache: dict = field(default_factory=dict, repr=False)

    KINDS = ("zero", "linear", "g", "general")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ConfigurationError(f"driver kind must be one of {self.KINDS}, got {self.kind!r}")
        if not (self.epsilon > 0):
            raise ConfigurationError("driver epsilon must be positive")
        if self.kind == "general":
            if self.func is None:
                raise ConfigurationError("general driver needs a rule func(t, b, y, z)")
            if self.kappa is None or self.gamma is None:
                raise ConfigurationError("general driver needs explicit kappa and gamma")

    @classmethod
    def zero(cls, epsilon: float = 1e-6) -> "DriverSpec":
        return cls("zero", epsilon=epsilon)

    @classmethod
    def linear(cls, r=0.0, theta=0.0, g=0.0, epsilon: float = 1e-6) -> "DriverSpec":
        return cls("linear", r=r, theta=theta, g=g, epsilon=epsilon)

    @classmethod
    def from_g(cls, g, epsilon: float = 1e-6) -> "DriverSpec":
        return cls("g", g=g, epsilon=epsilon)

    @classmethod
    def general(cls, func, kappa, gamma, epsilon: float = 1e-6, lipschitz_grid=(10.0, 10.0, 9)) -> "DriverSpec":
        return cls("general", func=func, kappa=kappa, gamma=gamma, epsilon=epsilon, lipschitz_grid=lipschitz_grid)

    @property
    def depends_on_yz(self) -> bool:
        if self.kind in ("zero", "g"):
            return False
        if self.kind == "linear":
            return not (np.isscalar(self.r) and self.r == 0 and np.isscalar(self.theta) and self.theta == 0)
        return True

    def coefficients(self, model: LatticeModel) -> dict:
        """Base-tree processes ``r, theta, g, kappa, gamma, alpha_sq``."""
        key = id(model)
        if key not in self._cache:
            r = _coef_process(model, self.r if self.kind == "linear" else 0.0)
            th = _coef_process(model, self.theta if self.kind == "linear" else 0.0)
            g = _coef_process(model, self.g if self.kind in ("linear", "g") else 0.0)
            if self.kappa is None:
                kap = r.map(lambda v: np.maximum(np.abs(v), self.epsilon))
            else:
                kap = _coef_process(model, self.kappa)
            gam = th.map(np.abs) if self.gamma is None else _coef_process(model, self.gamma)
            a2 = AdaptedProcess(F_TREE, tuple(kv + gv * gv for kv, gv in zip(kap.values, gam.values)))
            self._cache[key] = dict(r=r, theta=th, g=g, kappa=kap, gamma=gam, alpha_sq=a2, model=model)
        return self._cache[key]

    def evaluate(self, model: LatticeModel, step: int, y: np.ndarray, z: np.ndarray, nodes: np.ndarray | None = None) -> np.ndarray:
        """Driver value at the base nodes of ``step`` (all of them unless ``nodes`` is given)."""
        c = self.coefficients(model)
        sel = slice(None) if nodes is None else nodes
        if self.kind == "zero":
            return np.zeros_like(np.asarray(y, dtype=float))
        if self.kind == "g":
            return c["g"][step][sel] + 0.0 * y
        if self.kind == "linear":
            return c["g"][step][sel] - c["r"][step][sel] * y - c["theta"][step][sel] * z
        b = model.node_B(step)[sel]
        return np.asarray(self.func(model.times[step], b, y, z), dtype=float) + 0.0 * y

    def validate(self, model: LatticeModel) -> None:
        """Check the lower bound on ``alpha^2`` and, for general drivers, the Lipschitz certificate."""
        c = self.coefficients(model)
        for k in range(model.n_steps):
            kap, gam, a2 = c["kappa"][k], c["gamma"][k], c["alpha_sq"][k]
            if np.any(kap < 0) or np.any(gam < 0):
                raise DriverError(f"Lipschitz moduli must be nonnegative (step {k})")
            if np.any(a2 < self.epsilon):
                n = int(np.argmin(a2))
                raise DriverError(f"alpha^2 = kappa + gamma^2 = {float(a2[n]):.12g} < epsilon at step {k}, node {prefix_label(k, n)}")
            if self.kind == "linear":
                if np.any(np.abs(c["r"][k]) > kap + TOL) or np.any(np.abs(c["theta"][k]) > gam + TOL):
                    raise DriverError(f"declared Lipschitz moduli are below |r| or |theta| at step {k}")
            if np.any(kap * model.dt >= 1.0):
                warnings.warn(f"dt * kappa >= 1 at step {k}: the explicit scheme may be unstable", RuntimeWarning, stacklevel=2)
        if self.kind == "general":
            self._certify(model)

    def _certify(self, model: LatticeModel) -> None:
        ymax, zmax, n = self.lipschitz_grid
        ys = np.linspace(-ymax, ymax, int(n))
        zs = np.linspace(-zmax, zmax, int(n))
        Yg, Zg = np.meshgrid(ys, zs, indexing="ij")
        Yg, Zg = Yg.ravel(), Zg.ravel()
        i, j = np.triu_indices(Yg.size, 1)
        c = self.coefficients(model)
        for k in range(model.n_steps):
            for node in range(1 << k):
                idx = np.full(Yg.size, node)
                f = self.evaluate(model, k, Yg, Zg, nodes=idx)
                bound = c["kappa"][k][node] * np.abs(Yg[i] - Yg[j]) + c["gamma"][k][node] * np.abs(Zg[i] - Zg[j])
                excess = np.abs(f[i] - f[j]) - bound
                if np.any(excess > 1e-9 * (1.0 + np.abs(f).max())):
                    raise DriverError(f"Lipschitz certificate fails at step {k}, node {prefix_label(k, node)}")


@dataclass(eq=False)
class DRBSDEProblem:
    """Data of a reflected equation on the enlarged tree.

    ``zeta`` is the base-tree recovery process: the terminal value is
    ``zeta_j`` on a default at ``t_j`` and ``xi_survival`` (default
    ``zeta_N``) on survival. ``lower`` and ``upper`` are base-tree barriers,
    lifted to the enlarged tree by freezing them at the default step; ``None``
    means no barrier.
    """

    model: LatticeModel
    measure: Measure
    zeta: AdaptedProcess
    driver: DriverSpec = field(default_factory=DriverSpec.zero)
    lower: AdaptedProcess | None = None
    upper: AdaptedProcess | None = None
    beta: float = 4.0
    xi_survival: np.ndarray | None = None
    labels: dict = field(default_factory=dict)

    def __post_init__(self):
        self.zeta = fprocess(self.model, self.zeta)
        if self.lower is not None:
            self.lower = fprocess(self.model, self.lower)
        if self.upper is not None:
            self.upper = fprocess(self.model, self.upper)
        if self.xi_survival is not None:
            xs = np.asarray(self.xi_survival, dtype=float)
            if xs.shape != (self.model.n_paths,):
                raise ConfigurationError(f"xi_survival must have {self.model.n_paths} values")
            self.xi_survival = xs
        if not (self.beta >= 0):
            raise ConfigurationError("beta must be nonnegative")
        if self.measure.model is not self.model:
            raise ConfigurationError("measure was built on a different model")

    @property
    def has_barriers(self) -> bool:
        return self.lower is not None or self.upper is not None

    def terminal_alive(self) -> np.ndarray:
        return self.zeta[self.model.n_steps] if self.xi_survival is None else self.xi_survival

    def lower_at(self, step: int) -> np.ndarray:
        return np.full(1 << step, -np.inf) if self.lower is None else self.lower[step]

    def upper_at(self, step: int) -> np.ndarray:
        return np.full(1 << step, np.inf) if self.upper is None else self.upper[step]

    @cached_property
    def lower_G(self) -> AdaptedProcess:
        return lift_stopped(self.model, fprocess(self.model, [self.lower_at(k) for k in range(self.model.n_steps + 1)]))

    @cached_property
    def upper_G(self) -> AdaptedProcess:
        return lift_stopped(self.model, fprocess(self.model, [self.upper_at(k) for k in range(self.model.n_steps + 1)]))

    @cached_property
    def xi_atoms(self) -> np.ndarray:
        """Terminal value ``xi`` on every atom."""
        m = self.model
        out = self.terminal_alive()[m.atom_path].astype(float)
        for j in range(1, m.n_steps + 1):
            sel = m.atom_tau == j
            out[sel] = self.zeta[j][m.atom_fnode(j)[sel]]
        return out

    def default_mass(self, step: int) -> np.ndarray:
        """Measure of a default at ``t_step`` per base node of that step."""
        return self.measure.node_mass(step, G_TREE).reshape(1 << step, step + 1)[:, step - 1]

    def validate(self) -> None:
        """Check strict barrier separation and the terminal ordering."""
        m = self.model
        lname = self.labels.get("lower", "lower barrier L")
        uname = self.labels.get("upper", "upper barrier U")
        for k in range(m.n_steps):
            gap = self.upper_at(k) - self.lower_at(k)
            if np.any(~(gap > TOL)):
                n = int(np.argmin(gap))
                raise BarrierError(
                    f"H3: {lname} >= {uname} (or closer than {TOL:g}) at step {k}, node {prefix_label(k, n)}: "
                    f"L={float(self.lower_at(k)[n]):.12g}, U={float(self.upper_at(k)[n]):.12g}")
        N = m.n_steps
        xs = self.terminal_alive()
        bad = (xs < self.lower_at(N) - TOL) | (xs > self.upper_at(N) + TOL)
        if np.any(bad):
            n = int(np.flatnonzero(bad)[0])
            raise BarrierError(f"H1/H3: terminal value {float(xs[n]):.12g} outside [{float(self.lower_at(N)[n]):.12g}, {float(self.upper_at(N)[n]):.12g}] at node {prefix_label(N, n)}")
        for j in range(1, N + 1):
            live = self.default_mass(j) > 0
            z = self.zeta[j]
            bad = live & ((z < self.lower_at(j) - TOL) | (z > self.upper_at(j) + TOL))
            if np.any(bad):
                n = int(np.flatnonzero(bad)[0])
                raise BarrierError(f"H1/H3: recovery {float(z[n]):.12g} outside [{float(self.lower_at(j)[n]):.12g}, {float(self.upper_at(j)[n]):.12g}] at default step {j}, node {prefix_label(j, n)}")


def one_step_moments(w: np.ndarray, vals: np.ndarray, moves: np.ndarray):
    """Conditional mean and walk-regression coefficient over the children of each node.

    ``w`` and ``vals`` have a trailing child layout ``(..., 2, n_outcomes)`` where
    the second-to-last axis is the walk move (down, up).
    """
    P = (w * vals).sum(axis=(-2, -1))
    wb = w.sum(axis=-1)
    mdB = wb @ moves
    c = moves - mdB[..., None]
    var = (wb * c * c).sum(axis=-1)
    cov = ((w * vals).sum(axis=-1) * c).sum(axis=-1)
    with np.errstate(invalid="ignore", divide="ignore"):
        Z = cov / var
    return P, Z


@dataclass(eq=False)
class DRBSDESolution:
    """Solution of a (possibly reflected or penalized) equation on the enlarged tree.

    Per-step arrays over the alive base nodes are kept as lists; the enlarged-tree
    processes ``Y, Z, Kplus, Kminus, M`` are assembled on demand. ``dKplus[k]``
    is the push applied at step ``k``, so ``Kplus_k = sum_{j<k} dKplus[j]``.
    """

    problem: DRBSDEProblem
    Y_alive: list
    Z_alive: list
    dKplus: list
    dKminus: list
    predictor: list
    driver_values: list
    scheme: str = "reflected"

    @property
    def model(self) -> LatticeModel:
        return self.problem.model

    @property
    def Y0(self) -> float:
        return float(self.Y_alive[0][0])

    @cached_property
    def Y(self) -> AdaptedProcess:
        z = self.problem.zeta
        return assemble_gprocess(self.model, self.Y_alive, [None] + list(z.values[1:]))

    @cached_property
    def Z(self) -> AdaptedProcess:
        N = self.model.n_steps
        zeros = [np.zeros(1 << j) for j in range(N + 1)]
        alive = list(self.Z_alive) + [np.zeros(1 << N)]
        return assemble_gprocess(self.model, alive, zeros)

    def _cumulative(self, inc: list) -> list:
        out = [np.zeros(1)]
        for k in range(1, self.model.n_steps + 1):
            parent = np.arange(1 << k) & ((1 << (k - 1)) - 1)
            out.append(out[k - 1][parent] + inc[k - 1][parent])
        return out

    @cached_property
    def Kplus(self) -> AdaptedProcess:
        K = self._cumulative(self.dKplus)
        return assemble_gprocess(self.model, K, [None] + K[1:])

    @cached_property
    def Kminus(self) -> AdaptedProcess:
        K = self._cumulative(self.dKminus)
        return assemble_gprocess(self.model, K, [None] + K[1:])

    @cached_property
    def M(self) -> AdaptedProcess:
        model = self.model
        moves = model.moves
        zeta = self.problem.zeta
        alive = [np.zeros(1)]
        dflt: list = [None]
        for k in range(model.n_steps):
            base = np.tile(alive[k] - self.predictor[k], 2)
            zdb = np.concatenate([self.Z_alive[k] * moves[0], self.Z_alive[k] * moves[1]])
            alive.append(base + self.Y_alive[k + 1] - zdb)
            dflt.append(base + zeta[k + 1] - zdb)
        return assemble_gprocess(model, alive, dflt)

    def lower_alive(self, step: int) -> np.ndarray:
        return self.problem.lower_at(step)

    def upper_alive(self, step: int) -> np.ndarray:
        return self.problem.upper_at(step)


def _backward(problem: DRBSDEProblem, reflect: Callable, implicit_iters: int = 0, scheme: str = "reflected") -> DRBSDESolution:
    model = problem.model
    N = model.n_steps
    dt = model.dt
    drv = problem.driver
    Q = problem.measure
    moves = model.moves
    Y = [None] * (N + 1)
    Z, dKp, dKm, Pk, Fk = ([None] * N for _ in range(5))
    Y[N] = np.asarray(problem.terminal_alive(), dtype=float).copy()
    for k in range(N - 1, -1, -1):
        m = 1 << k
        w = Q.alive_kernel(k)
        vals = np.stack([problem.zeta[k + 1].reshape(2, m).T, Y[k + 1].reshape(2, m).T], axis=-1)
        p, z = one_step_moments(w, vals, moves)
        f = drv.evaluate(model, k, p, z)
        x = p + f * dt
        for _ in range(implicit_iters):
            f = drv.evaluate(model, k, x, z)
            x = p + f * dt
        y, kp, km = reflect(k, x)
        if not np.all(np.isfinite(y)):
            n = int(np.flatnonzero(~np.isfinite(y))[0])
            raise NumericRangeError(f"non-finite value at step {k}, node {prefix_label(k, n)}")
        Y[k], Z[k], dKp[k], dKm[k], Pk[k], Fk[k] = y, z, kp, km, p, f
    return DRBSDESolution(problem, Y, Z, dKp, dKm, Pk, Fk, scheme)


def solve_bsde(problem: DRBSDEProblem, implicit_iters: int = 0, validate: bool = True) -> DRBSDESolution:
    """Plain backward equation (barriers of ``problem`` are ignored)."""
    if validate:
        problem.driver.validate(problem.model)

    def no_reflection(k, x):
        zero = np.zeros_like(x)
        return x, zero, zero

    return _backward(problem, no_reflection, implicit_iters, "plain")


def solve_drbsde(problem: DRBSDEProblem, implicit_iters: int = 0, validate: bool = True) -> DRBSDESolution:
    """Doubly reflected equation by clamping after the driver step."""
    if validate:
        problem.driver.validate(problem.model)
        problem.validate()

    def clamp(k, x):
        L = problem.lower_at(k)
        U = problem.upper_at(k)
        y = np.minimum(np.maximum(x, L), U)
        return y, np.maximum(L - x, 0.0), np.maximum(x - U, 0.0)

    return _backward(problem, clamp, implicit_iters, "reflected")


def solve_penalized(problem: DRBSDEProblem, n: float, mode: str = "double", implicit_iters: int = 0,
                    validate: bool = True) -> DRBSDESolution:
    """Penalized approximation with penalty level ``n``.

    The penalty is taken implicitly in ``y`` (closed form, the penalty is
    piecewise linear), the driver explicitly. ``mode`` selects the lower
    penalty, the upper penalty or both. The reflection increments of the result
    are ``n (L - Y)^+ dt`` and ``n (Y - U)^+ dt``.
    """
    if mode not in ("lower", "upper", "double"):
        raise ConfigurationError(f"penalization mode must be lower, upper or double, got {mode!r}")
    if not (n >= 0) or not np.isfinite(n):
        raise ConfigurationError(f"penalty level must be finite and nonnegative, got {n!r}")
    if validate:
        problem.driver.validate(problem.model)
        problem.validate()
    a = n * problem.model.dt
    use_lower = mode in ("lower", "double")
    use_upper = mode in ("upper", "double")

    def penalize(k, x):
        y = x.copy()
        kp = np.zeros_like(x)
        km = np.zeros_like(x)
        if use_lower:
            L = problem.lower_at(k)
            lo = x < L
            y[lo] = (x[lo] + a * L[lo]) / (1.0 + a)
            kp[lo] = a * (L[lo] - y[lo])
        if use_upper:
            U = problem.upper_at(k)
            hi = y > U
            y[hi] = (x[hi] + a * U[hi]) / (1.0 + a)
            km[hi] = a * (y[hi] - U[hi])
        if not (np.all(np.isfinite(kp)) and np.all(np.isfinite(km))):
            bad = int(np.flatnonzero(~(np.isfinite(kp) & np.isfinite(km)))[0])
            raise NumericRangeError(f"penalty overflow at n={n!r}, step {k}, node {prefix_label(k, bad)}")
        return y, kp, km

    return _backward(problem, penalize, implicit_iters, f"penalized-{mode}")


# ---------------------------------------------------------------------------
# diagnostics


def skorokhod_products(sol: DRBSDESolution) -> tuple[float, float]:
    """Largest ``|dK+ (Y - L)|`` and ``|dK- (U - Y)|`` over the alive nodes before the horizon."""
    plus = minus = 0.0
    for k in range(sol.model.n_steps):
        y = sol.Y_alive[k]
        L = sol.problem.lower_at(k)
        U = sol.problem.upper_at(k)
        with np.errstate(invalid="ignore"):
            pp = np.where(sol.dKplus[k] > 0, sol.dKplus[k] * (y - L), 0.0)
            mm = np.where(sol.dKminus[k] > 0, sol.dKminus[k] * (U - y), 0.0)
        plus = max(plus, float(np.max(np.abs(pp))))
        minus = max(minus, float(np.max(np.abs(mm))))
    return plus, minus


def barrier_violation(sol: DRBSDESolution) -> float:
    """Largest excursion of ``Y`` outside ``[L, U]`` over the alive nodes before the horizon."""
    worst = 0.0
    for k in range(sol.model.n_steps):
        y = sol.Y_alive[k]
        worst = max(worst, float(np.max(np.maximum(sol.problem.lower_at(k) - y, 0.0))),
                    float(np.max(np.maximum(y - sol.problem.upper_at(k), 0.0))))
    return worst


def balance_residual(sol: DRBSDESolution) -> float:
    """One-step balance checked through the atom-level conditional expectation engine."""
    model = sol.model
    Q = sol.problem.measure
    Y = sol.Y
    worst = 0.0
    for k in range(model.n_steps):
        cond = conditional_expectation(model, Y.at_atoms(model, k + 1), Q, k, G_TREE)[model.alive_gnodes(k)]
        rhs = cond + sol.driver_values[k] * model.dt + sol.dKplus[k] - sol.dKminus[k]
        worst = max(worst, float(np.max(np.abs(sol.Y_alive[k] - rhs))))
    return worst


def orthogonality_defect(sol: DRBSDESolution) -> float:
    """Largest ``|E_Q[dM | node]|`` or ``|E_Q[dM dB | node]|`` over the alive nodes."""
    model = sol.model
    Q = sol.problem.measure
    Ma = sol.M.atom_matrix(model)
    Ba = stopped_walk(model).atom_matrix(model)
    worst = 0.0
    for k in range(model.n_steps):
        dM = Ma[:, k + 1] - Ma[:, k]
        dB = Ba[:, k + 1] - Ba[:, k]
        alive = model.alive_gnodes(k)
        e1 = conditional_expectation(model, dM, Q, k, G_TREE)[alive]
        e2 = conditional_expectation(model, dM * dB, Q, k, G_TREE)[alive]
        worst = max(worst, float(np.max(np.abs(e1))), float(np.max(np.abs(e2))))
    return worst


@dataclass
class ComparisonReport:
    hypothesis_ok: bool
    hypothesis_failures: list
    violations: int
    max_violation: float
    nodes_checked: int


def scheme_monotonicity_margin(problem: DRBSDEProblem) -> float:
    """Smallest weight ``1 - kappa dt - gamma dt |dB - E dB| / Var dB`` over nodes and moves.

    The one-step map is nondecreasing in every child value when this margin is
    nonnegative; the discrete comparison argument relies on it.
    """
    model = problem.model
    c = problem.driver.coefficients(model)
    moves = model.moves
    worst = np.inf
    for k in range(model.n_steps):
        wb = problem.measure.alive_kernel(k).sum(axis=-1)
        mdB = wb @ moves
        dev = np.abs(moves[None, :] - mdB[:, None])
        var = (wb * dev * dev).sum(axis=-1)
        margin = 1.0 - c["kappa"][k][:, None] * model.dt - c["gamma"][k][:, None] * model.dt * dev / var[:, None]
        worst = min(worst, float(margin.min()))
    return worst


def check_comparison(sol1: DRBSDESolution, sol2: DRBSDESolution, tol: float = 1e-12) -> ComparisonReport:
    """Check ``Y1 <= Y2`` at every positive-mass node, after checking the ordering hypotheses."""
    p1, p2 = sol1.problem, sol2.problem
    model = p1.model
    if p2.model is not model:
        raise PreconditionError("solutions live on different models")
    fails = []
    if np.any(p1.xi_atoms > p2.xi_atoms + tol):
        fails.append("terminal values are not ordered")
    for k in range(model.n_steps):
        f1 = p1.driver.evaluate(model, k, sol1.predictor[k], sol1.Z_alive[k])
        f2 = p2.driver.evaluate(model, k, sol1.predictor[k], sol1.Z_alive[k])
        if np.any(f1 > f2 + tol):
            fails.append(f"drivers are not ordered along the first solution at step {k}")
            break
    if sol1.scheme != "plain" or sol2.scheme != "plain":
        barriers_ok = all(np.all(p1.lower_at(k) <= p2.lower_at(k) + tol) and np.all(p1.upper_at(k) <= p2.upper_at(k) + tol)
                          for k in range(model.n_steps + 1))
        special_ok = all(np.all(sol2.dKplus[k] - sol2.dKminus[k] >= sol1.dKplus[k] - sol1.dKminus[k] - tol)
                         for k in range(model.n_steps))
        if not (barriers_ok or special_ok):
            fails.append("barriers are not ordered and the reflection difference is not increasing")
    if scheme_monotonicity_margin(p2) < -tol:
        fails.append("one-step map of the second driver is not monotone")
    violations = 0
    worst = 0.0
    checked = 0
    for k in range(model.n_steps + 1):
        mass = p1.measure.node_mass(k, G_TREE) > 0
        d = (sol1.Y[k] - sol2.Y[k])[mass]
        checked += d.size
        violations += int(np.sum(d > tol))
        worst = max(worst, float(d.max(initial=0.0)))
    return ComparisonReport(not fails, fails, violations, worst, checked)


# ---------------------------------------------------------------------------
# weighted norms


@dataclass
class NormReport:
    S2: float
    Yalpha: float
    Z: float
    M: float
    Kplus_sq: float
    Kminus_sq: float


def _weight_matrix(problem: DRBSDEProblem, beta: float):
    """``exp(beta A_k)`` and ``alpha_k^2`` along every atom, with ``A_k = sum_{j<k} alpha_j^2 dt``."""
    model = problem.model
    a2 = problem.driver.coefficients(model)["alpha_sq"]
    a2m = np.stack([a2.at_atoms(model, k) for k in range(model.n_steps + 1)], axis=1)
    A = np.zeros_like(a2m)
    A[:, 1:] = np.cumsum(a2m[:, :-1] * model.dt, axis=1)
    return np.exp(beta * A), a2m


def _norms_from_matrices(problem, beta, Y, Z, M, Kp, Km) -> NormReport:
    model = problem.model
    w = problem.measure.weights
    eA, a2 = _weight_matrix(problem, beta)
    stop = model.atom_stop
    k = np.arange(model.n_steps + 1)[None, :]
    upto = k <= stop[:, None]
    before = k < stop[:, None]
    s2 = np.max(np.where(upto, eA * Y * Y, 0.0), axis=1)
    ya = np.sum(np.where(before, eA * Y * Y * a2 * model.dt, 0.0), axis=1)
    zz = np.sum(np.where(before, eA * Z * Z * model.dt, 0.0), axis=1)
    dM = np.diff(M, axis=1)
    mm = np.sum(np.where(before[:, :-1], eA[:, 1:] * dM * dM, 0.0), axis=1)
    kp = np.take_along_axis(Kp, stop[:, None], axis=1)[:, 0]
    km = np.take_along_axis(Km, stop[:, None], axis=1)[:, 0]
    return NormReport(float(w @ s2), float(w @ ya), float(w @ zz), float(w @ mm), float(w @ (kp * kp)), float(w @ (km * km)))


def weighted_norms(sol: DRBSDESolution, beta: float | None = None) -> NormReport:
    """Exponentially weighted norms of the solution, stopped at ``T ^ tau``."""
    p = sol.problem
    beta = p.beta if beta is None else beta
    m = p.model
    return _norms_from_matrices(p, beta, sol.Y.atom_matrix(m), sol.Z.atom_matrix(m), sol.M.atom_matrix(m),
                                sol.Kplus.atom_matrix(m), sol.Kminus.atom_matrix(m))


@dataclass
class EstimateReport:
    lhs: float
    rhs: float
    ratio: float


def a_priori_ratio(sol1: DRBSDESolution, sol2: DRBSDESolution, beta: float = 4.0) -> EstimateReport:
    """Left and right sides of the stability estimate for two data sets and their ratio.

    The driver difference is evaluated at the second solution in the predictor
    convention of the scheme, ``f1(t_k, P2_k, Z2_k) - f2(t_k, P2_k, Z2_k)``.
    """
    p1, p2 = sol1.problem, sol2.problem
    model = p1.model
    if p2.model is not model or p2.measure is not p1.measure:
        raise PreconditionError("both solutions must share the model and the measure")

    def d(a, b):
        return a.atom_matrix(model) - b.atom_matrix(model)

    dY, dZ, dM = d(sol1.Y, sol2.Y), d(sol1.Z, sol2.Z), d(sol1.M, sol2.M)
    dKp, dKm = d(sol1.Kplus, sol2.Kplus), d(sol1.Kminus, sol2.Kminus)
    rep = _norms_from_matrices(p1, beta, dY, dZ, dM, dKp, dKm)
    lhs = rep.S2 + rep.Yalpha + rep.Z + rep.M

    w = p1.measure.weights
    eA, a2 = _weight_matrix(p1, beta)
    stop = model.atom_stop
    eT = np.take_along_axis(eA, stop[:, None], axis=1)[:, 0]
    dxi = p1.xi_atoms - p2.xi_atoms
    rhs_xi = w @ (eT * dxi * dxi)
    fbar = np.zeros((model.n_atoms, model.n_steps + 1))
    for k in range(model.n_steps):
        df = p1.driver.evaluate(model, k, sol2.predictor[k], sol2.Z_alive[k]) - p2.driver.evaluate(model, k, sol2.predictor[k], sol2.Z_alive[k])
        fbar[:, k] = df[model.atom_fnode(k)]
    kk = np.arange(model.n_steps + 1)[None, :]
    before = kk < stop[:, None]
    rhs_f = w @ np.sum(np.where(before, eA * fbar * fbar / a2 * model.dt, 0.0), axis=1)
    with np.errstate(invalid="ignore"):
        dLb = d(p1.lower_G, p2.lower_G)
        dUb = d(p1.upper_G, p2.upper_G)
    dLb = np.nan_to_num(dLb, nan=0.0, posinf=0.0, neginf=0.0)
    dUb = np.nan_to_num(dUb, nan=0.0, posinf=0.0, neginf=0.0)
    inc_p = np.diff(dKp, axis=1)
    inc_m = np.diff(dKm, axis=1)
    refl = np.where(before[:, :-1], eA[:, :-1] * (dLb[:, :-1] * inc_p + dUb[:, :-1] * inc_m), 0.0)
    rhs_k = w @ refl.sum(axis=1)
    rhs = float(rhs_xi + rhs_f + rhs_k)
    ratio = lhs / rhs if rhs > 0 else (0.0 if lhs == 0 else float("inf"))
    return EstimateReport(float(lhs), rhs, float(ratio))


# ---------------------------------------------------------------------------
# base-tree recursion (no default dimension)


@dataclass(eq=False)
class FTreeSolution:
    """Solution of a reflected recursion on the base tree."""

    model: LatticeModel
    Y: AdaptedProcess
    Z: AdaptedProcess
    dKplus: AdaptedProcess
    dKminus: AdaptedProcess
    predictor: AdaptedProcess
    driver_values: AdaptedProcess
    M: AdaptedProcess

    @property
    def Y0(self) -> float:
        return float(self.Y[0][0])


def solve_ftree(model: LatticeModel, terminal: np.ndarray, measure: Measure, driver: DriverSpec | None = None,
                lower: AdaptedProcess | None = None, upper: AdaptedProcess | None = None,
                stieltjes: AdaptedProcess | None = None, implicit_iters: int = 0) -> FTreeSolution:
    """Reflected recursion on the base tree under the path marginal of ``measure``.

    ``stieltjes[k + 1]`` is added to ``Y_{k+1}`` inside the conditional
    expectation taken at step ``k``, which renders an extra finite-variation
    term over the interval.
    """
    N = model.n_steps
    dt = model.dt
    driver = driver or DriverSpec.zero()
    moves = model.moves
    terminal = np.asarray(terminal, dtype=float)
    lo = (lambda k: np.full(1 << k, -np.inf)) if lower is None else (lambda k: lower[k])
    hi = (lambda k: np.full(1 << k, np.inf)) if upper is None else (lambda k: upper[k])
    if np.any(terminal < lo(N) - TOL) or np.any(terminal > hi(N) + TOL):
        raise BarrierError("terminal value outside the barriers")
    for k in range(N):
        if np.any(~(hi(k) - lo(k) > TOL)):
            raise BarrierError(f"H3: barriers not strictly separated at step {k}")
    Y = [None] * (N + 1)
    Z, dKp, dKm, Pk, Fk = ([None] * (N + 1) for _ in range(5))
    Y[N] = terminal.copy()
    for k in range(N - 1, -1, -1):
        m = 1 << k
        nxt = Y[k + 1] if stieltjes is None else Y[k + 1] + stieltjes[k + 1]
        w = measure.base_kernel(k)[:, :, None]
        vals = nxt.reshape(2, m).T[:, :, None]
        p, z = one_step_moments(w, vals, moves)
        f = driver.evaluate(model, k, p, z)
        x = p + f * dt
        for _ in range(implicit_iters):
            f = driver.evaluate(model, k, x, z)
            x = p + f * dt
        L, U = lo(k), hi(k)
        Y[k] = np.minimum(np.maximum(x, L), U)
        dKp[k] = np.maximum(L - x, 0.0)
        dKm[k] = np.maximum(x - U, 0.0)
        Z[k], Pk[k], Fk[k] = z, p, f
    for arr in (Z, dKp, dKm, Pk, Fk):
        arr[N] = np.zeros(1 << N)
    M = [np.zeros(1)]
    for k in range(N):
        nxt = Y[k + 1] if stieltjes is None else Y[k + 1] + stieltjes[k + 1]
        zdb = np.concatenate([Z[k] * moves[0], Z[k] * moves[1]])
        M.append(np.tile(M[k] - Pk[k], 2) + nxt - zdb)
    F = AdaptedProcess.base
    return FTreeSolution(model, F(Y), F(Z), F(dKp), F(dKm), F(Pk), F(Fk), F(M))
