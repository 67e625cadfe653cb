"""Two-player stopping game with default evaluated by the nonlinear expectation of a driver.

Player 1 stops to receive the lower barrier, player 2 stops to pay the upper
barrier; simultaneous stopping before the terminal node pays ``Qproc`` and
reaching ``T ^ tau`` pays ``xi1`` on survival and ``xi2`` on default. Rules are
sets of nodes of the enlarged tree with first-stop semantics.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import BarrierError, ConfigurationError, RuleError, SizeError
from .filtration import G_TREE, TOL, AdaptedProcess, LatticeModel, Measure, fprocess, prefix_label
from .solver import DRBSDEProblem, DRBSDESolution, DriverSpec, one_step_moments, solve_drbsde

DEFAULT_CAP = 4096


@dataclass(eq=False)
class GameSpec:
    """Game data; barriers, ``qproc`` and ``xi2`` are base-tree processes, ``xi1`` terminal values."""

    model: LatticeModel
    measure: Measure
    lower: AdaptedProcess
    upper: AdaptedProcess
    qproc: AdaptedProcess
    xi1: np.ndarray
    xi2: AdaptedProcess
    driver: DriverSpec = field(default_factory=DriverSpec.zero)
    labels: dict = field(default_factory=dict)

    def __post_init__(self):
        m = self.model
        self.lower = fprocess(m, self.lower)
        self.upper = fprocess(m, self.upper)
        self.qproc = fprocess(m, self.qproc)
        self.xi2 = fprocess(m, self.xi2)
        xi1 = self.xi1
        lattice = getattr(xi1, "lattice_values", None)
        if lattice is not None:
            xi1 = lattice(m)
            xi1 = xi1[-1] if isinstance(xi1, list) else xi1
        if np.isscalar(xi1):
            xi1 = np.full(m.n_paths, float(xi1))
        elif callable(xi1):
            xi1 = np.asarray(xi1(m.horizon, m.B[:, -1]), dtype=float)
        self.xi1 = np.broadcast_to(np.asarray(xi1, dtype=float), (m.n_paths,)).copy()

    def problem(self, beta: float = 4.0) -> DRBSDEProblem:
        return DRBSDEProblem(self.model, self.measure, self.xi2, self.driver, self.lower, self.upper, beta, self.xi1,
                             dict(self.labels))

    def validate(self) -> None:
        """Check the orderings of the game data; the reflected problem checks the barriers first."""
        m = self.model
        self.problem().validate()
        for k in range(m.n_steps):
            L, U, Qp = self.lower[k], self.upper[k], self.qproc[k]
            bad = (Qp < L - TOL) | (Qp > U + TOL)
            if np.any(bad):
                n = int(np.flatnonzero(bad)[0])
                raise BarrierError(f"simultaneous-stop payoff outside [L, U] at step {k}, node {prefix_label(k, n)}")
        delta = self.xi2[m.n_steps] - self.xi1
        if np.any(~(delta > 0)):
            n = int(np.flatnonzero(~(delta > 0))[0])
            raise ConfigurationError(f"penalty must be positive: xi2 - xi1 = {float(delta[n]):.12g} at node {prefix_label(m.n_steps, n)}")

    @property
    def xi_atoms(self) -> np.ndarray:
        return self.problem().xi_atoms

    def with_qproc(self, qproc) -> "GameSpec":
        return replace(self, qproc=qproc)


@dataclass(eq=False)
class StoppingRule:
    """Stop flags per step over the enlarged-tree nodes."""

    stop: tuple

    @classmethod
    def from_alive_flags(cls, model: LatticeModel, flags) -> "StoppingRule":
        """Rule stopping at the flagged alive nodes (``flags[k]`` over base nodes, ``k < N``) and at ``T ^ tau``."""
        N = model.n_steps
        stop = []
        for k in range(N + 1):
            s = np.ones((1 << k, k + 1), dtype=bool)
            if k < N:
                s[:, k] = np.asarray(flags[k], dtype=bool)
            stop.append(s.reshape(-1))
        return cls(tuple(stop))

    @classmethod
    def terminal(cls, model: LatticeModel) -> "StoppingRule":
        return cls.from_alive_flags(model, [np.zeros(1 << k, dtype=bool) for k in range(model.n_steps)])

    @classmethod
    def at_step(cls, model: LatticeModel, step: int) -> "StoppingRule":
        return cls.from_alive_flags(model, [np.full(1 << k, k == step) for k in range(model.n_steps)])

    def alive_flags(self, model: LatticeModel) -> list:
        return [self.stop[k][model.alive_gnodes(k)] for k in range(model.n_steps)]

    def realize(self, model: LatticeModel, theta=0) -> np.ndarray:
        """First stop step at or after ``theta`` on every atom (``theta`` a step or per-atom steps)."""
        N = model.n_steps
        kappa = model.atom_stop
        th = np.minimum(np.broadcast_to(np.asarray(theta), kappa.shape), kappa)
        s = np.full(model.n_atoms, N + 1)
        for k in range(N, -1, -1):
            hit = self.stop[k][model.atom_gnode(k)] & (k <= kappa) & (k >= th)
            s = np.where(hit, k, s)
        if np.any(s > kappa):
            a = int(np.flatnonzero(s > kappa)[0])
            raise RuleError(f"rule does not stop by T ^ tau on path {prefix_label(N, int(model.atom_path[a]))}, default step {int(model.atom_tau[a])}")
        return s


def _atom_tables(spec: GameSpec):
    m = spec.model
    N = m.n_steps
    L = np.stack([spec.lower[k][m.atom_fnode(k)] for k in range(N + 1)], axis=1)
    U = np.stack([spec.upper[k][m.atom_fnode(k)] for k in range(N + 1)], axis=1)
    Qp = np.stack([spec.qproc[k][m.atom_fnode(k)] for k in range(N + 1)], axis=1)
    return L, U, Qp, spec.xi_atoms


def _payoff_from_steps(tables, kappa, s1, s2):
    L, U, Qp, xi = tables
    ar = np.arange(L.shape[0])
    Ls1 = L[ar, np.minimum(s1, L.shape[1] - 1)]
    Qs1 = Qp[ar, np.minimum(s1, L.shape[1] - 1)]
    Us2 = U[ar, np.minimum(s2, L.shape[1] - 1)]
    return np.where(s1 < s2, Ls1, np.where(s2 < s1, Us2, np.where(s1 < kappa, Qs1, xi)))


def payoff(rule1: StoppingRule, rule2: StoppingRule, spec: GameSpec, theta=0) -> np.ndarray:
    """Game payoff on every atom."""
    m = spec.model
    s1 = rule1.realize(m, theta)
    s2 = rule2.realize(m, theta)
    return _payoff_from_steps(_atom_tables(spec), m.atom_stop, s1, s2)


def _ef_backward(model: LatticeModel, measure: Measure, driver: DriverSpec, pay: np.ndarray, horizon: np.ndarray,
                 theta: int = 0, keep: bool = False):
    """Backward induction of a batch of stopped payoffs ``(batch, n_atoms)`` down to step ``theta``.

    Returns the values at the alive nodes of ``theta`` (and of every step when ``keep``).
    """
    N = model.n_steps
    dt = model.dt
    moves = model.moves
    batch = pay.shape[0]

    def rep_alive(k):
        return np.arange(1 << k) * (N + 1) + N

    def rep_default(k):
        return np.arange(1 << k) * (N + 1) + (k - 1)

    V = pay[:, rep_alive(N)]
    kept = {N: V}
    for k in range(N - 1, theta - 1, -1):
        m = 1 << k
        dflt = pay[:, rep_default(k + 1)]
        vals = np.stack([dflt.reshape(batch, 2, m).transpose(0, 2, 1), V.reshape(batch, 2, m).transpose(0, 2, 1)], axis=-1)
        P, Z = one_step_moments(measure.alive_kernel(k), vals, moves)
        y = P + driver.evaluate(model, k, P, Z) * dt
        ra = rep_alive(k)
        V = np.where(horizon[:, ra] <= k, pay[:, ra], y)
        if keep:
            kept[k] = V
    return (V, kept) if keep else V


def ef_evaluate(pay: np.ndarray, horizon: np.ndarray, driver: DriverSpec, measure: Measure, theta: int = 0):
    """Nonlinear evaluation of ``pay`` (atoms) stopped at the per-atom steps ``horizon``.

    Returns the value at the root for ``theta = 0`` and the values at the alive
    nodes of ``theta`` otherwise. With a zero driver this is the conditional
    expectation under ``measure``.
    """
    model = measure.model
    pay = np.atleast_2d(np.asarray(pay, dtype=float))
    horizon = np.atleast_2d(np.asarray(horizon))
    if np.any(horizon < np.minimum(theta, model.atom_stop)):
        raise RuleError("horizon precedes theta on some atom")
    V = _ef_backward(model, measure, driver, pay, horizon, theta)
    V = V[0] if V.shape[0] == 1 else V
    return float(V[0]) if theta == 0 and V.ndim == 1 else V


# ---------------------------------------------------------------------------
# enumeration


def count_rules(depth: int) -> int:
    """Number of minimal stopping rules on a subtree with ``depth`` decision levels."""
    r = 1
    for _ in range(depth):
        r = 1 + r * r
    return r


def enumerate_rules(model: LatticeModel, theta: int, node: int) -> np.ndarray:
    """All minimal stop sets below the alive node ``node`` of step ``theta``.

    Returns flags of shape ``(R, 2**N - 1)`` over the alive decision nodes, indexed
    ``2**k - 1 + n`` for base node ``n`` of step ``k < N``.
    """
    N = model.n_steps

    def opts(k, n):
        if k == N:
            return [0]
        here = 1 << ((1 << k) - 1 + n)
        left = opts(k + 1, n)
        right = opts(k + 1, n + (1 << k))
        return [here] + [a | b for a in left for b in right]

    masks = opts(theta, node)
    D = (1 << N) - 1
    flags = np.zeros((len(masks), D), dtype=bool)
    for i, mk in enumerate(masks):
        for d in range(D):
            if (mk >> d) & 1:
                flags[i, d] = True
    return flags


def _realize_flags(model: LatticeModel, flags: np.ndarray, theta: int) -> np.ndarray:
    N = model.n_steps
    kappa = model.atom_stop
    s = np.broadcast_to(kappa, (flags.shape[0], kappa.size)).copy()
    for k in range(N - 1, theta - 1, -1):
        col = (1 << k) - 1 + model.atom_fnode(k)
        hit = flags[:, col] & (model.atom_tau > k)[None, :]
        s = np.where(hit, k, s)
    return s


def _flags_to_rule(model: LatticeModel, row: np.ndarray) -> StoppingRule:
    return StoppingRule.from_alive_flags(model, [row[(1 << k) - 1:(1 << (k + 1)) - 1] for k in range(model.n_steps)])


def _rule_to_flags(model: LatticeModel, rule: StoppingRule) -> np.ndarray:
    return np.concatenate(rule.alive_flags(model)) if model.n_steps else np.zeros(0, dtype=bool)


def _payoff_matrix(spec: GameSpec, s1: np.ndarray, s2: np.ndarray, theta: int, node: int, chunk: int = 1 << 22) -> np.ndarray:
    """``J[i, j]`` = value at the alive node ``node`` of step ``theta`` for rule pair ``(i, j)``."""
    m = spec.model
    tables = _atom_tables(spec)
    kappa = m.atom_stop
    R1, R2, A = s1.shape[0], s2.shape[0], m.n_atoms
    J = np.empty((R1, R2))
    step = max(1, chunk // max(1, R2 * A))
    zero_root = spec.driver.kind == "zero" and theta == 0
    for i0 in range(0, R1, step):
        a1 = s1[i0:i0 + step]
        c = a1.shape[0]
        S1 = np.broadcast_to(a1[:, None, :], (c, R2, A)).reshape(-1, A)
        S2 = np.broadcast_to(s2[None, :, :], (c, R2, A)).reshape(-1, A)
        pay = _payoff_from_steps(tables, kappa, S1, S2)
        if zero_root:
            vals = pay @ spec.measure.weights
        else:
            vals = _ef_backward(m, spec.measure, spec.driver, pay, np.minimum(S1, S2), theta)[:, node]
        J[i0:i0 + c] = vals.reshape(c, R2)
    return J


@dataclass
class GameValueReport:
    upper: np.ndarray
    lower: np.ndarray
    y_at_theta: np.ndarray
    saddle: list
    deviations_checked: int

    @property
    def gap(self) -> float:
        return float(np.max(np.abs(self.upper - self.lower)))

    @property
    def value_error(self) -> float:
        return float(max(np.max(np.abs(self.upper - self.y_at_theta)), np.max(np.abs(self.lower - self.y_at_theta))))


def brute_force_value(spec: GameSpec, theta: int = 0, cap: int = DEFAULT_CAP) -> GameValueReport:
    """Upper and lower values by enumerating every pair of minimal stopping rules.

    Values are reported at each alive node of step ``theta``; ``saddle`` holds
    the (max-min, min-max) rule pair per node.
    """
    m = spec.model
    if not (0 <= theta <= m.n_steps):
        raise ConfigurationError(f"theta must lie in 0..{m.n_steps}")
    R = count_rules(m.n_steps - theta)
    if R > cap:
        raise SizeError(f"{R} stopping rules per player exceed the cap {cap}; use saddle verification from the reflected solution instead")
    sol = solve_drbsde(spec.problem())
    nodes = 1 << theta
    upper = np.empty(nodes)
    lower = np.empty(nodes)
    saddle = []
    checked = 0
    for n in range(nodes):
        flags = enumerate_rules(m, theta, n)
        s = _realize_flags(m, flags, theta)
        J = _payoff_matrix(spec, s, s, theta, n)
        checked += J.size
        col_max = J.max(axis=0)
        row_min = J.min(axis=1)
        upper[n] = col_max.min()
        lower[n] = row_min.max()
        i1 = int(np.argmax(row_min))
        i2 = int(np.argmin(col_max))
        saddle.append((_flags_to_rule(m, flags[i1]), _flags_to_rule(m, flags[i2])))
    return GameValueReport(upper, lower, sol.Y_alive[theta].copy(), saddle, checked)


def qproc_sensitivity(spec: GameSpec, theta: int = 0, cap: int = DEFAULT_CAP) -> dict:
    """Brute-force game values with the simultaneous-stop payoff pinned to each barrier.

    Returns, for ``qproc = L`` and ``qproc = U``, the largest distance of the
    upper and lower values from ``Y`` at ``theta``.
    """
    out = {}
    for name, q in (("lower", spec.lower), ("upper", spec.upper)):
        rep = brute_force_value(spec.with_qproc(q), theta, cap)
        out[name] = rep.value_error
    return out


# ---------------------------------------------------------------------------
# saddle point from the reflected solution


def saddle_from_solution(solution: DRBSDESolution, theta: int = 0) -> tuple[StoppingRule, StoppingRule]:
    """First hitting rules of the lower and upper barrier by ``Y`` after ``theta``."""
    m = solution.model
    p = solution.problem
    f1 = [(solution.Y_alive[k] == p.lower_at(k)) & (k >= theta) for k in range(m.n_steps)]
    f2 = [(solution.Y_alive[k] == p.upper_at(k)) & (k >= theta) for k in range(m.n_steps)]
    return StoppingRule.from_alive_flags(m, f1), StoppingRule.from_alive_flags(m, f2)


def perturb_early(rule: StoppingRule, model: LatticeModel, theta: int = 0) -> StoppingRule:
    """Negative control: move the earliest interior stop of ``rule`` one step earlier.

    Without an interior stop after ``theta`` the perturbed rule stops at ``theta``.
    """
    flags = [f.copy() for f in rule.alive_flags(model)]
    for k in range(theta + 1, model.n_steps):
        hit = np.flatnonzero(flags[k])
        if hit.size:
            n = int(hit[0])
            flags[k - 1][n & ((1 << (k - 1)) - 1)] = True
            return StoppingRule.from_alive_flags(model, flags)
    flags[theta][:] = True if theta < model.n_steps else flags[theta]
    return StoppingRule.from_alive_flags(model, flags)


def _outcome(rule_pair, model: LatticeModel, theta: int) -> np.ndarray:
    """End step of the game and which players stop there, per atom."""
    s1, s2 = (r.realize(model, theta) for r in rule_pair)
    end = np.minimum(s1, s2)
    return np.stack([end, s1 == end, s2 == end], axis=1)


def negative_control(rule_pair, spec: GameSpec, theta: int = 0):
    """Perturbed pair for the negative control, or ``None`` when no perturbation can matter.

    The first rule is moved one step earlier with ``perturb_early``; if that
    leaves the outcome (end step and stopping players) unchanged on every
    positive-mass atom, for instance because the opponent stops at ``theta``,
    the second rule is tried.
    """
    m = spec.model
    mass = spec.measure.weights > 0
    base = _outcome(rule_pair, m, theta)
    for i in (0, 1):
        pair = list(rule_pair)
        pair[i] = perturb_early(rule_pair[i], m, theta)
        if np.any((_outcome(pair, m, theta) != base).any(axis=1) & mass):
            return tuple(pair)
    return None


@dataclass
class SaddleReport:
    value: np.ndarray
    y_at_theta: np.ndarray
    value_error: float
    left_violations: int
    right_violations: int
    worst_left: float
    worst_right: float
    martingale_error: float
    deviations_checked: int
    sampled: bool
    tol: float

    @property
    def passed(self) -> bool:
        return (self.value_error <= self.tol and self.left_violations == 0 and self.right_violations == 0
                and self.martingale_error <= self.tol)

    def checks(self) -> list:
        """``(check name, measured error, tolerance, passed)`` rows."""
        return [
            ("saddle-value", self.value_error, self.tol, self.value_error <= self.tol),
            ("saddle-left-inequality", self.worst_left, self.tol, self.left_violations == 0),
            ("saddle-right-inequality", self.worst_right, self.tol, self.right_violations == 0),
            ("strong-martingale", self.martingale_error, self.tol, self.martingale_error <= self.tol),
        ]


def default_tolerance(driver: DriverSpec) -> float:
    return 1e-12 if driver.kind == "zero" else 1e-9


def verify_saddle(rule_pair, spec: GameSpec, theta: int = 0, tol: float | None = None, cap: int = DEFAULT_CAP,
                  n_samples: int = 512, seed: int = 0) -> SaddleReport:
    """Check a candidate saddle pair against every unilateral deviation.

    Both inequalities are checked at each alive node of step ``theta``; the pair
    value must equal ``Y_theta`` of the reflected solution, and ``Y`` must be
    reproduced by the nonlinear evaluation from any intermediate step up to the
    realized stop of the pair. Above ``cap`` rules a deterministic sample of
    deviations is used and ``sampled`` is set.
    """
    m = spec.model
    tol = default_tolerance(spec.driver) if tol is None else tol
    r1, r2 = rule_pair
    sol = solve_drbsde(spec.problem())
    s1 = r1.realize(m, theta)[None, :]
    s2 = r2.realize(m, theta)[None, :]
    nodes = 1 << theta
    value = np.empty(nodes)
    left_v = right_v = 0
    worst_l = worst_r = 0.0
    checked = 0
    sampled = count_rules(m.n_steps - theta) > cap
    rng = np.random.default_rng(seed)
    for n in range(nodes):
        flags = enumerate_rules(m, theta, n) if not sampled else _sample_rules(m, theta, n, n_samples, rng)
        s = _realize_flags(m, flags, theta)
        v = _payoff_matrix(spec, s1, s2, theta, n)[0, 0]
        value[n] = v
        left = _payoff_matrix(spec, s, s2, theta, n)[:, 0]
        right = _payoff_matrix(spec, s1, s, theta, n)[0, :]
        checked += left.size + right.size
        left_v += int(np.sum(left > v + tol))
        right_v += int(np.sum(right < v - tol))
        worst_l = max(worst_l, float(np.max(left - v)))
        worst_r = max(worst_r, float(np.max(v - right)))
    y_theta = sol.Y_alive[theta]
    verr = float(np.max(np.abs(value - y_theta)))
    merr = _strong_martingale_error(sol, spec, np.minimum(s1[0], s2[0]), theta)
    return SaddleReport(value, y_theta.copy(), verr, left_v, right_v, max(worst_l, 0.0), max(worst_r, 0.0), merr, checked, sampled, tol)


def _sample_rules(model: LatticeModel, theta: int, node: int, n: int, rng) -> np.ndarray:
    """Random minimal rules below a node: stop with probability 1/2 at each reached decision node."""
    N = model.n_steps
    D = (1 << N) - 1
    flags = np.zeros((n, D), dtype=bool)
    for i in range(n):
        frontier = [(theta, node)]
        while frontier:
            k, v = frontier.pop()
            if k == N:
                continue
            if rng.random() < 0.5:
                flags[i, (1 << k) - 1 + v] = True
            else:
                frontier += [(k + 1, v), (k + 1, v + (1 << k))]
    return flags


def _strong_martingale_error(sol: DRBSDESolution, spec: GameSpec, stop: np.ndarray, theta: int) -> float:
    """Largest gap between ``Y`` and its re-evaluation from ``min(k2, stop)`` on the band ``[theta, stop]``."""
    m = spec.model
    N = m.n_steps
    Ya = sol.Y.atom_matrix(m)
    rep = lambda k: np.arange(1 << k) * (N + 1) + N  # noqa: E731
    worst = 0.0
    for k2 in range(theta, N + 1):
        nu = np.minimum(np.minimum(stop, k2), m.atom_stop)
        pay = Ya[np.arange(m.n_atoms), nu][None, :]
        _, kept = _ef_backward(m, spec.measure, spec.driver, pay, nu[None, :], theta, keep=True)
        for k in range(theta, min(k2, N) + 1):
            band = stop[rep(k)] >= k
            if np.any(band):
                worst = max(worst, float(np.max(np.abs(kept[k][0][band] - sol.Y_alive[k][band]))))
    return worst


def saddle_in_enumeration(rule_pair, spec: GameSpec, theta: int = 0, tol: float | None = None) -> bool:
    """Whether the realized steps of ``rule_pair`` match an enumerated pair that is a saddle of the payoff matrix."""
    m = spec.model
    tol = default_tolerance(spec.driver) if tol is None else tol
    mass = spec.measure.weights > 0
    ok = True
    for n in range(1 << theta):
        flags = enumerate_rules(m, theta, n)
        s = _realize_flags(m, flags, theta)
        sub = mass & (m.atom_fnode(theta) == n) & (m.atom_tau > theta)
        t1 = rule_pair[0].realize(m, theta)
        t2 = rule_pair[1].realize(m, theta)
        i1 = np.flatnonzero(np.all(s[:, sub] == t1[sub], axis=1))
        i2 = np.flatnonzero(np.all(s[:, sub] == t2[sub], axis=1))
        if i1.size == 0 or i2.size == 0:
            return False
        J = _payoff_matrix(spec, s, s, theta, n)
        a, b = int(i1[0]), int(i2[0])
        ok &= bool(J[a, b] >= J[:, b].max() - tol and J[a, b] <= J[a, :].min() + tol)
    return ok
