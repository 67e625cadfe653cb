"""Simulation tier: counter-based path simulation, Cox default times and a
regression-based reflected backward scheme.

Random streams are keyed by ``(seed, stream)`` and indexed by path, so a batch
does not depend on chunking or on the number of worker threads. Stream 0
drives the walk increments, stream 1 the default thresholds, stream 2 the
bootstrap.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.special import ndtri
from scipy.stats import norm

from .errors import ConfigurationError, PreconditionError, RegressionError
from .filtration import LatticeModel, Measure
from .solver import DRBSDEProblem

STREAM_WALK = 0
STREAM_DEFAULT = 1
STREAM_BOOTSTRAP = 2
CHUNK = 8192
RIDGE = 1e-8


def _check_seed(seed: int) -> int:
    seed = int(seed)
    if not (0 <= seed < 1 << 64):
        raise ConfigurationError(f"seed must be a 64-bit unsigned integer, got {seed}")
    return seed


def _uniforms(seed: int, stream: int, first_path: int, n_paths: int, width: int) -> np.ndarray:
    """Open-interval uniforms ``(n_paths, width)``; row ``p`` depends only on ``(seed, stream, first_path + p)``."""
    stride = -(-width // 4) * 4
    bg = np.random.Philox(key=_check_seed(seed) + (stream << 64))
    bg.advance(first_path * (stride // 4))
    raw = bg.random_raw(n_paths * stride).reshape(n_paths, stride)[:, :width]
    return ((raw >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0 ** -53


def _chunked(fn: Callable[[int, int], np.ndarray], n_paths: int, threads: int) -> np.ndarray:
    starts = list(range(0, n_paths, CHUNK))
    spans = [(s, min(CHUNK, n_paths - s)) for s in starts]
    if threads > 1 and len(spans) > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            parts = list(ex.map(lambda a: fn(*a), spans))
    else:
        parts = [fn(*a) for a in spans]
    return np.concatenate(parts, axis=0)


@dataclass(frozen=True)
class MCConfig:
    """Time grid and increment law of the simulated walk."""

    n_steps: int
    dt: float
    increments: str = "gaussian"
    up_prob: float = 0.5

    def __post_init__(self):
        if int(self.n_steps) < 1:
            raise ConfigurationError("n_steps must be at least 1")
        if not (self.dt > 0) or not np.isfinite(self.dt):
            raise ConfigurationError("dt must be positive and finite")
        if self.increments not in ("gaussian", "two-point"):
            raise ConfigurationError(f"increments must be gaussian or two-point, got {self.increments!r}")
        if not (0 < self.up_prob < 1):
            raise ConfigurationError("up_prob must lie in (0, 1)")

    @property
    def horizon(self) -> float:
        return self.n_steps * self.dt

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.n_steps + 1) * self.dt

    @property
    def moves(self) -> np.ndarray:
        """Centred two-point moves (down, up) with variance ``dt``."""
        p = self.up_prob
        a = np.sqrt(self.dt)
        return np.array([-a * np.sqrt(p / (1 - p)), a * np.sqrt((1 - p) / p)])


@dataclass(eq=False)
class PathBatch:
    """Simulated paths. ``default_step`` is ``inf`` on survival; ``state`` is ``B`` unless replaced."""

    n_paths: int
    n_steps: int
    dt: float
    brownian: np.ndarray
    default_step: np.ndarray
    seed: int
    increments: str = "gaussian"
    state: np.ndarray | None = None
    weights: np.ndarray | None = None
    tree_paths: np.ndarray | None = None

    def __post_init__(self):
        if self.state is None:
            self.state = self.B

    @property
    def B(self) -> np.ndarray:
        out = np.zeros((self.n_paths, self.n_steps + 1))
        np.cumsum(self.brownian, axis=1, out=out[:, 1:])
        return out

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.n_steps + 1) * self.dt

    @property
    def path_weights(self) -> np.ndarray:
        if self.weights is None:
            return np.full(self.n_paths, 1.0 / self.n_paths)
        return self.weights

    def node_ids(self, step: int) -> np.ndarray:
        """Base-tree node of every path at ``step`` (two-point batches only)."""
        if self.tree_paths is not None:
            return self.tree_paths & ((1 << step) - 1)
        if self.increments != "two-point":
            raise PreconditionError("node ids need a two-point batch")
        bits = (self.brownian[:, :step] > 0).astype(np.int64)
        return (bits << np.arange(step)).sum(axis=1) if step else np.zeros(self.n_paths, dtype=np.int64)

    def alive(self, step: int) -> np.ndarray:
        return self.default_step > step


def simulate_paths(config: MCConfig, n_paths: int, seed: int, threads: int = 1) -> PathBatch:
    """Walk increments for ``n_paths`` paths, Gaussian or two-point per ``config``."""
    if int(n_paths) < 1:
        raise ConfigurationError("n_paths must be at least 1")
    N = config.n_steps
    sd = np.sqrt(config.dt)

    def block(first, n):
        u = _uniforms(seed, STREAM_WALK, first, n, N)
        if config.increments == "gaussian":
            return sd * ndtri(u)
        return np.where(u < config.up_prob, config.moves[1], config.moves[0])

    dB = _chunked(block, int(n_paths), threads)
    return PathBatch(int(n_paths), N, config.dt, dB, np.full(int(n_paths), np.inf), _check_seed(seed), config.increments)


@dataclass(frozen=True)
class CoxIntensity:
    """Default intensity ``rate(t, x)`` of the state, or a constant."""

    rate: Callable | float = 0.0

    def values(self, t: float, x: np.ndarray) -> np.ndarray:
        v = self.rate(t, x) if callable(self.rate) else self.rate
        v = np.broadcast_to(np.asarray(v, dtype=float), np.shape(x))
        if np.any(v < 0) or not np.all(np.isfinite(v)):
            raise ConfigurationError("intensity must be finite and nonnegative")
        return v

    def cumulative(self, batch: PathBatch) -> np.ndarray:
        """Left-point integrated intensity ``(n_paths, N + 1)``."""
        lam = np.stack([self.values(t, batch.state[:, k]) for k, t in enumerate(batch.times[:-1])], axis=1)
        out = np.zeros((batch.n_paths, batch.n_steps + 1))
        np.cumsum(lam * batch.dt, axis=1, out=out[:, 1:])
        return out


def apply_cox_default(batch: PathBatch, intensity: CoxIntensity, threads: int = 1) -> PathBatch:
    """First step at which the integrated intensity reaches an independent unit exponential."""
    Lam = intensity.cumulative(batch)
    E = -np.log(_chunked(lambda s, n: _uniforms(batch.seed, STREAM_DEFAULT, s, n, 1), batch.n_paths, threads)[:, 0])
    hit = Lam[:, 1:] >= E[:, None]
    step = np.where(hit.any(axis=1), hit.argmax(axis=1) + 1.0, np.inf)
    return PathBatch(batch.n_paths, batch.n_steps, batch.dt, batch.brownian, step, batch.seed, batch.increments,
                     batch.state, batch.weights, batch.tree_paths)


def survival_probability(batch: PathBatch, intensity: CoxIntensity) -> np.ndarray:
    """Path-wise conditional survival ``exp(-Lambda_T)``."""
    return np.exp(-intensity.cumulative(batch)[:, -1])


def tree_batch(measure: Measure) -> PathBatch:
    """Every atom of the lattice as one weighted path (exact mode)."""
    m = measure.model
    tau = m.atom_tau.astype(float)
    tau[tau > m.n_steps] = np.inf
    return PathBatch(m.n_atoms, m.n_steps, m.dt, m.dB[m.atom_path], tau, 0, "two-point",
                     weights=np.asarray(measure.weights, dtype=float), tree_paths=m.atom_path.copy())


def sample_tree_batch(measure: Measure, n_paths: int, seed: int, threads: int = 1) -> PathBatch:
    """Atoms of the lattice drawn independently from ``measure``."""
    m = measure.model
    cdf = np.cumsum(measure.weights)
    cdf /= cdf[-1]
    u = _chunked(lambda s, n: _uniforms(seed, STREAM_WALK, s, n, 1), int(n_paths), threads)[:, 0]
    a = np.minimum(np.searchsorted(cdf, u, side="right"), m.n_atoms - 1)
    tau = m.atom_tau[a].astype(float)
    tau[tau > m.n_steps] = np.inf
    return PathBatch(int(n_paths), m.n_steps, m.dt, m.dB[m.atom_path[a]], tau, _check_seed(seed), "two-point",
                     tree_paths=m.atom_path[a].copy())


# ---------------------------------------------------------------------------
# regression


@dataclass(frozen=True)
class RegressionBasis:
    """Conditional-expectation estimator on the state of the alive paths.

    ``polynomial`` fits powers of the standardized state up to ``degree``;
    ``piecewise`` averages over ``bins`` quantile bins; ``indicator`` averages
    over distinct tree nodes, which is exact on two-point batches.
    """

    kind: str = "polynomial"
    degree: int = 3
    bins: int = 16
    ridge: float = RIDGE

    def __post_init__(self):
        if self.kind not in ("polynomial", "piecewise", "indicator"):
            raise ConfigurationError(f"unknown basis kind {self.kind!r}")
        if int(self.degree) < 0:
            raise ConfigurationError("degree must be nonnegative")
        if int(self.bins) < 1:
            raise ConfigurationError("bins must be at least 1")
        if not (self.ridge >= 0):
            raise ConfigurationError("ridge must be nonnegative")

    def fit(self, x: np.ndarray, groups: np.ndarray | None, w: np.ndarray, R: np.ndarray) -> np.ndarray:
        """Fitted conditional means of the response columns ``R`` at every sample."""
        w = w / w.sum()
        if self.kind in ("piecewise", "indicator"):
            if self.kind == "indicator":
                if groups is None:
                    raise PreconditionError("indicator basis needs tree node ids")
                keys = groups
            else:
                edges = np.quantile(x, np.linspace(0, 1, self.bins + 1)[1:-1])
                keys = np.searchsorted(edges, x, side="right")
            _, inv = np.unique(keys, return_inverse=True)
            inv = inv.reshape(-1)
            mass = np.bincount(inv, w)
            means = np.stack([np.bincount(inv, w * R[:, j]) / mass for j in range(R.shape[1])], axis=1)
            return means[inv]
        sd = x.std()
        z = (x - x.mean()) / sd if sd > 0 else np.zeros_like(x)
        X = np.vander(z, int(self.degree) + 1, increasing=True)
        A = X.T @ (w[:, None] * X)
        if self.ridge == 0 and np.linalg.matrix_rank(A) < A.shape[0]:
            raise RegressionError(f"rank-deficient design ({np.linalg.matrix_rank(A)} < {A.shape[0]}) with no ridge")
        coef = np.linalg.solve(A + self.ridge * np.eye(A.shape[0]), X.T @ (w[:, None] * R))
        return X @ coef


# ---------------------------------------------------------------------------
# problems on simulated paths


@dataclass(eq=False)
class MCProblem:
    """Reflected equation data as functions of ``(t, state)``.

    ``zeta`` is the recovery at default and the terminal value on survival
    unless ``xi_survival`` is given; ``driver(t, x, y, z)``.
    """

    zeta: Callable
    driver: Callable | None = None
    lower: Callable | None = None
    upper: Callable | None = None
    xi_survival: Callable | None = None

    def _eval(self, fn, t, x):
        return np.broadcast_to(np.asarray(fn(t, x), dtype=float), x.shape).astype(float)

    def recovery(self, k, batch, idx):
        return self._eval(self.zeta, batch.times[k], batch.state[idx, k])

    def terminal(self, batch, idx):
        fn = self.zeta if self.xi_survival is None else self.xi_survival
        return self._eval(fn, batch.times[-1], batch.state[idx, -1])

    def bounds(self, k, batch, idx):
        x = batch.state[idx, k]
        lo = np.full(x.shape, -np.inf) if self.lower is None else self._eval(self.lower, batch.times[k], x)
        hi = np.full(x.shape, np.inf) if self.upper is None else self._eval(self.upper, batch.times[k], x)
        return lo, hi

    def f(self, k, batch, idx, y, z):
        if self.driver is None:
            return np.zeros_like(y)
        return np.asarray(self.driver(batch.times[k], batch.state[idx, k], y, z), dtype=float) + 0.0 * y


@dataclass(eq=False)
class TreeMCProblem:
    """A lattice problem read along two-point paths through their node ids."""

    problem: DRBSDEProblem

    def recovery(self, k, batch, idx):
        return self.problem.zeta[k][batch.node_ids(k)[idx]]

    def terminal(self, batch, idx):
        return np.asarray(self.problem.terminal_alive())[batch.node_ids(batch.n_steps)[idx]]

    def bounds(self, k, batch, idx):
        n = batch.node_ids(k)[idx]
        return self.problem.lower_at(k)[n], self.problem.upper_at(k)[n]

    def f(self, k, batch, idx, y, z):
        n = batch.node_ids(k)[idx]
        return self.problem.driver.evaluate(self.problem.model, k, y, z, nodes=n)


def as_mc_problem(problem) -> MCProblem | TreeMCProblem:
    return TreeMCProblem(problem) if isinstance(problem, DRBSDEProblem) else problem


@dataclass
class MCEstimate:
    value: float
    std_error: float
    n_paths: int
    surface: list = field(default_factory=list)

    def within(self, target: float, n_se: float) -> bool:
        return abs(self.value - target) <= n_se * self.std_error


def lsmc_solve_drbsde(batch: PathBatch, problem, basis: RegressionBasis | None = None, penalty: float | None = None,
                      n_boot: int = 200, boot_seed: int | None = None) -> MCEstimate:
    """Backward regression scheme with clamp reflection (or implicit penalty ``penalty``).

    At each step the alive paths regress their realized ``Y_{k+1}`` and the
    walk increment on their state; ``Z`` is the fitted covariance over the
    fitted variance of the increment. Each path adds its driver term and the
    reflection (or penalty) push to its realized value, so the penalized
    recursion tends to the reflected one on the same batch. Defaulted paths
    carry their recovery. The standard error is a bootstrap of the final step
    over paths.
    """
    basis = basis or RegressionBasis()
    prob = as_mc_problem(problem)
    if penalty is not None and not (penalty >= 0 and np.isfinite(penalty)):
        raise ConfigurationError(f"penalty level must be finite and nonnegative, got {penalty!r}")
    N = batch.n_steps
    dt = batch.dt
    w_all = batch.path_weights
    tree_groups = batch.increments == "two-point"
    alive_N = np.flatnonzero(batch.alive(N))
    Y = np.empty(batch.n_paths)
    Y[alive_N] = prob.terminal(batch, alive_N)
    dead = np.flatnonzero(batch.default_step == N)
    Y[dead] = prob.recovery(N, batch, dead)
    surface = [(N, *_weighted_mean_se(Y[alive_N], w_all[alive_N]))]
    for k in range(N - 1, -1, -1):
        dead = np.flatnonzero(batch.default_step == k + 1)
        if dead.size:
            Y[dead] = prob.recovery(k + 1, batch, dead)
        idx = np.flatnonzero(batch.alive(k))
        if idx.size == 0:
            surface.append((k, np.nan, np.nan))
            continue
        dB = batch.brownian[idx, k]
        resp = np.stack([Y[idx], dB, Y[idx] * dB, dB * dB], axis=1)
        groups = batch.node_ids(k)[idx] if tree_groups and basis.kind == "indicator" else None
        if k == 0:
            y, z = _step_zero(prob, batch, idx, resp, w_all[idx], dt, penalty)
            Y[idx] = y
            boot = _bootstrap_zero(prob, batch, idx, resp, w_all[idx], dt, penalty, n_boot,
                                   batch.seed if boot_seed is None else boot_seed)
            se = float(boot.std(ddof=1)) if boot.size > 1 else 0.0
            surface.append((0, float(y[0]), se))
            return MCEstimate(float(y[0]), se, batch.n_paths, surface[::-1])
        fit = basis.fit(batch.state[idx, k], groups, w_all[idx], resp)
        y = _clamped_step(prob, k, batch, idx, fit, dt, penalty)[0]
        Y[idx] = Y[idx] + (y - fit[:, 0])
        surface.append((k, *_weighted_mean_se(y, w_all[idx])))
    raise AssertionError("unreachable")


def _weighted_mean_se(v, w):
    w = w / w.sum()
    mu = float(w @ v)
    var = float(w @ (v - mu) ** 2)
    neff = 1.0 / float(w @ w)
    return mu, float(np.sqrt(var / max(neff - 1.0, 1.0)))


def _clamped_step(prob, k, batch, idx, fit, dt, penalty):
    P, mdB, cross, sq = fit.T
    var = sq - mdB * mdB
    with np.errstate(invalid="ignore", divide="ignore"):
        Z = np.where(var > 0, (cross - P * mdB) / var, 0.0)
    x = P + prob.f(k, batch, idx, P, Z) * dt
    lo, hi = prob.bounds(k, batch, idx)
    if penalty is None:
        y = np.minimum(np.maximum(x, lo), hi)
    else:
        a = penalty * dt
        y = np.where(x < lo, (x + a * lo) / (1 + a), x)
        y = np.where(y > hi, (y + a * hi) / (1 + a), y)
    return y, x


def _step_zero(prob, batch, idx, resp, w, dt, penalty):
    w = w / w.sum()
    fit = np.broadcast_to(w @ resp, resp.shape)
    return _clamped_step(prob, 0, batch, idx, fit, dt, penalty)


def _bootstrap_zero(prob, batch, idx, resp, w, dt, penalty, n_boot, seed):
    if n_boot < 2:
        return np.zeros(0)
    rng = np.random.Generator(np.random.Philox(key=_check_seed(seed) + (STREAM_BOOTSTRAP << 64)))
    p = w / w.sum()
    out = np.empty(n_boot)
    for b in range(n_boot):
        cnt = rng.multinomial(idx.size, p)
        bw = cnt / idx.size
        fit = np.broadcast_to(bw @ resp, resp.shape)
        out[b] = _clamped_step(prob, 0, batch, idx[:1], fit[:1], dt, penalty)[0][0]
    return out


# ---------------------------------------------------------------------------
# Black-Scholes example


def _rule(v) -> Callable:
    return v if callable(v) else (lambda t, _c=float(v): _c + 0.0 * np.asarray(t, dtype=float))


def _integral(rule: Callable, T: float, n: int = 4096) -> float:
    """Midpoint integral of a deterministic rate over ``[0, T]``."""
    t = (np.arange(n) + 0.5) * (T / n)
    return float(np.sum(np.asarray(rule(t), dtype=float)) * (T / n))


def black_scholes_call(S0: float, K: float, T: float, r=0.05, sigma=0.2) -> float:
    """Call price with deterministic rate and volatility (integrated rate and variance)."""
    R = _integral(_rule(r), T)
    V = _integral(lambda t: np.asarray(_rule(sigma)(t)) ** 2, T)
    if K <= 0:
        return float(S0)
    sd = np.sqrt(V)
    d1 = (np.log(S0 / K) + R + 0.5 * V) / sd
    return float(S0 * norm.cdf(d1) - K * np.exp(-R) * norm.cdf(d1 - sd))


@dataclass(frozen=True)
class BlackScholesConfig:
    S0: float = 100.0
    K: float = 100.0
    T: float = 1.0
    r: Callable | float = 0.05
    mu: Callable | float = 0.05
    sigma: Callable | float = 0.2
    sigma_min: float = 1e-3
    n_steps: int = 50
    intensity: Callable | float = 0.0
    recovery: Callable | float = 0.0
    lower: Callable | None = None
    upper: Callable | None = None


def black_scholes_example(config: BlackScholesConfig, n_paths: int = 100_000, seed: int = 0,
                          basis: RegressionBasis | None = None, threads: int = 1) -> MCEstimate:
    """Call ``(S_T - K)^+`` under the linear driver ``-r y - theta z`` with market price of risk ``theta``.

    ``S`` is simulated exactly under the drift ``mu``; with a positive intensity
    the claim is killed at default and pays ``recovery(t, S)``.
    """
    c = config
    r, mu, sig = _rule(c.r), _rule(c.mu), _rule(c.sigma)
    mc = MCConfig(int(c.n_steps), c.T / int(c.n_steps))
    t = mc.times
    s_grid = np.asarray(sig(t), dtype=float) * np.ones_like(t)
    if np.any(s_grid < c.sigma_min):
        raise ConfigurationError(f"volatility {s_grid.min():g} below sigma_min {c.sigma_min:g}")
    batch = simulate_paths(mc, n_paths, seed, threads)
    # exact log-Euler over each step with step-averaged coefficients
    logS = np.zeros((batch.n_paths, mc.n_steps + 1))
    logS[:, 0] = np.log(c.S0)
    for k in range(mc.n_steps):
        a, b = t[k], t[k + 1]
        m_int = _integral(lambda s: np.asarray(mu(a + s)) - 0.5 * np.asarray(sig(a + s)) ** 2, b - a, 64)
        v_int = _integral(lambda s: np.asarray(sig(a + s)) ** 2, b - a, 64)
        logS[:, k + 1] = logS[:, k] + m_int + np.sqrt(v_int / mc.dt) * batch.brownian[:, k]
    batch.state = np.exp(logS)
    rec = _rule(c.recovery) if not callable(c.recovery) else c.recovery
    lam = c.intensity
    if callable(lam) or lam > 0:
        batch = apply_cox_default(batch, CoxIntensity(lam), threads)

    def driver(tt, x, y, z):
        rt = float(np.asarray(r(tt)))
        th = (float(np.asarray(mu(tt))) - rt) / float(np.asarray(sig(tt)))
        return -rt * y - th * z

    prob = MCProblem(
        zeta=lambda tt, x: np.asarray(rec(tt, x) if callable(c.recovery) else rec(tt), dtype=float) + 0.0 * x,
        driver=driver, lower=c.lower, upper=c.upper,
        xi_survival=lambda tt, x: np.maximum(x - c.K, 0.0))
    return lsmc_solve_drbsde(batch, prob, basis or RegressionBasis("polynomial", 3))
