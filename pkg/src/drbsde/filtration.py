"""Exact discrete-probability engine on a binomial path tree with a default time.

The driving walk lives on the full (non-recombining) binomial tree with ``N``
steps. Path ``i`` takes an up move at step ``j + 1`` when bit ``j`` of ``i`` is
set, so the node reached at step ``k`` is identified by ``i & (2**k - 1)``.
An atom is a pair (path, default outcome) with outcome ``j`` in ``1..N`` for a
default at ``t_j`` and ``N + 1`` for survival past the horizon.

Nodes of the enlarged tree at step ``k`` are indexed ``n * (k + 1) + s`` where
``n`` is the base node and ``s = j - 1`` for a default observed at ``t_j <= t_k``
or ``s = k`` while the name is still alive.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Sequence

import numpy as np

from .errors import (
    AssumptionPError,
    ConfigurationError,
    ConsistencyError,
    PreconditionError,
    UndefinedNodeError,
)

TOL = 1e-12
MAX_STEPS = 22

F_TREE = "F"
G_TREE = "G"


def prefix_label(step: int, node: int) -> str:
    """Readable label of a base node, e.g. ``'UD'`` for up then down."""
    return "".join("U" if (node >> j) & 1 else "D" for j in range(step)) or "root"


@dataclass(frozen=True, eq=False)
class LatticeModel:
    """Binomial driving walk on ``N`` steps of length ``dt``.

    With ``up_prob = 1/2`` the increments are ``+/- increment``. For other
    values the two-point increment is centred so that the walk stays a
    martingale with per-step variance ``increment**2`` under the reference
    measure.
    """

    n_steps: int
    dt: float
    increment: float
    up_prob: float = 0.5

    @property
    def n_paths(self) -> int:
        return 1 << self.n_steps

    @property
    def n_atoms(self) -> int:
        return self.n_paths * (self.n_steps + 1)

    @property
    def horizon(self) -> float:
        return self.n_steps * self.dt

    @cached_property
    def times(self) -> np.ndarray:
        return self.dt * np.arange(self.n_steps + 1)

    @cached_property
    def moves(self) -> np.ndarray:
        """Increment values ``[down, up]``."""
        p = self.up_prob
        a = self.increment
        if p == 0.5:
            return np.array([-a, a])
        return np.array([-a * np.sqrt(p / (1.0 - p)), a * np.sqrt((1.0 - p) / p)])

    @cached_property
    def move_probs(self) -> np.ndarray:
        return np.array([1.0 - self.up_prob, self.up_prob])

    @cached_property
    def bits(self) -> np.ndarray:
        """``bits[i, j] = 1`` when path ``i`` moves up at step ``j + 1``."""
        idx = np.arange(self.n_paths)[:, None]
        return ((idx >> np.arange(self.n_steps)[None, :]) & 1).astype(np.int8)

    @cached_property
    def dB(self) -> np.ndarray:
        """Walk increments per path, shape ``(n_paths, N)``."""
        return self.moves[self.bits]

    @cached_property
    def B(self) -> np.ndarray:
        """Walk values per path, shape ``(n_paths, N + 1)``, ``B[:, 0] = 0``."""
        out = np.zeros((self.n_paths, self.n_steps + 1))
        np.cumsum(self.dB, axis=1, out=out[:, 1:])
        return out

    @cached_property
    def path_prob(self) -> np.ndarray:
        return np.prod(self.move_probs[self.bits], axis=1)

    def n_nodes(self, step: int, tree: str = F_TREE) -> int:
        if tree == F_TREE:
            return 1 << step
        return (1 << step) * (step + 1)

    def fnode_of_path(self, step: int) -> np.ndarray:
        return np.arange(self.n_paths) & ((1 << step) - 1)

    def node_B(self, step: int) -> np.ndarray:
        """Walk value at every base node of ``step`` (node ``n`` is path ``n``'s prefix)."""
        return self.B[: 1 << step, step]

    def node_prob(self, step: int) -> np.ndarray:
        return np.bincount(self.fnode_of_path(step), self.path_prob, minlength=1 << step)

    # atoms -------------------------------------------------------------
    @cached_property
    def atom_path(self) -> np.ndarray:
        return np.repeat(np.arange(self.n_paths), self.n_steps + 1)

    @cached_property
    def atom_tau(self) -> np.ndarray:
        """Default step of each atom; ``N + 1`` stands for survival past the horizon."""
        return np.tile(np.arange(1, self.n_steps + 2), self.n_paths)

    @cached_property
    def atom_stop(self) -> np.ndarray:
        """Step of ``T ^ tau`` for each atom."""
        return np.minimum(self.atom_tau, self.n_steps)

    def atom_fnode(self, step: int) -> np.ndarray:
        return self.atom_path & ((1 << step) - 1)

    def atom_gnode(self, step: int) -> np.ndarray:
        status = np.minimum(self.atom_tau, step + 1) - 1
        return self.atom_fnode(step) * (step + 1) + status

    def atom_node(self, step: int, tree: str) -> np.ndarray:
        return self.atom_fnode(step) if tree == F_TREE else self.atom_gnode(step)

    def alive_gnodes(self, step: int) -> np.ndarray:
        """Enlarged-tree indices of the alive nodes at ``step``, ordered by base node."""
        return np.arange(1 << step) * (step + 1) + step

    def atoms_B_tau(self) -> np.ndarray:
        """Stopped walk ``B^tau`` along each atom, shape ``(n_atoms, N + 1)``."""
        Bp = self.B[self.atom_path]
        k = np.arange(self.n_steps + 1)[None, :]
        stop = np.minimum(k, self.atom_tau[:, None])
        return np.take_along_axis(Bp, stop, axis=1)


def build_model(n_steps: int, dt: float, increment: float | None = None, up_prob: float = 0.5) -> LatticeModel:
    """Validate a lattice configuration and return the model.

    Parameters
    ----------
    n_steps : int
        Number of time steps ``N >= 1``.
    dt : float
        Step length ``> 0``.
    increment : float, optional
        Up move of the walk, defaults to ``sqrt(dt)``.
    up_prob : float
        Reference probability of an up move, in ``(0, 1)``.
    """
    errors = []
    if isinstance(n_steps, bool) or not isinstance(n_steps, (int, np.integer)):
        errors.append(f"n_steps must be an integer, got {n_steps!r}")
    elif n_steps < 1:
        errors.append(f"n_steps must be >= 1, got {n_steps}")
    elif n_steps > MAX_STEPS:
        errors.append(f"n_steps must be <= {MAX_STEPS} for exact enumeration, got {n_steps}")
    if not np.isfinite(dt) or dt <= 0:
        errors.append(f"dt must be positive, got {dt!r}")
    if not (0.0 < up_prob < 1.0):
        errors.append(f"up_prob must lie in (0, 1), got {up_prob!r}")
    if increment is not None and (not np.isfinite(increment) or increment <= 0):
        errors.append(f"increment must be positive, got {increment!r}")
    if errors:
        raise ConfigurationError("; ".join(errors))
    inc = float(np.sqrt(dt)) if increment is None else float(increment)
    return LatticeModel(int(n_steps), float(dt), inc, float(up_prob))


@dataclass(frozen=True, eq=False)
class AdaptedProcess:
    """Node-indexed values, ``values[k]`` holding every node of step ``k``."""

    tree: str
    values: tuple

    def __getitem__(self, step: int) -> np.ndarray:
        return self.values[step]

    def __len__(self) -> int:
        return len(self.values)

    def at_atoms(self, model: LatticeModel, step: int) -> np.ndarray:
        return self.values[step][model.atom_node(step, self.tree)]

    def atom_matrix(self, model: LatticeModel) -> np.ndarray:
        """Values along every atom, shape ``(n_atoms, len(self))``."""
        return np.stack([self.at_atoms(model, k) for k in range(len(self.values))], axis=1)

    @classmethod
    def base(cls, values) -> "AdaptedProcess":
        return cls(F_TREE, tuple(values))

    def map(self, func: Callable[[np.ndarray], np.ndarray]) -> "AdaptedProcess":
        return AdaptedProcess(self.tree, tuple(func(v) for v in self.values))


def fprocess(model: LatticeModel, rule) -> AdaptedProcess:
    """Base-tree process from a scalar, a callable ``rule(t, b)`` or per-step arrays.

    An object with a ``lattice_values(model)`` method is first replaced by its result.
    """
    lattice = getattr(rule, "lattice_values", None)
    if lattice is not None:
        rule = lattice(model)
    if isinstance(rule, AdaptedProcess):
        if rule.tree != F_TREE:
            raise ConfigurationError("expected a base-tree process")
        return rule
    vals = []
    for k in range(model.n_steps + 1):
        if callable(rule):
            v = np.asarray(rule(model.times[k], model.node_B(k)), dtype=float)
            v = np.broadcast_to(v, (1 << k,)).copy()
        elif np.isscalar(rule):
            v = np.full(1 << k, float(rule))
        else:
            v = np.asarray(rule[k], dtype=float)
            if v.shape != (1 << k,):
                raise ConfigurationError(f"step {k}: expected {1 << k} node values, got shape {v.shape}")
        vals.append(v)
    return AdaptedProcess(F_TREE, tuple(vals))


def assemble_gprocess(model: LatticeModel, alive: Sequence[np.ndarray], at_default: Sequence[np.ndarray | None]) -> AdaptedProcess:
    """Enlarged-tree process frozen after default.

    ``alive[k]`` gives the value on ``{tau > t_k}`` per base node and
    ``at_default[j]`` the value at the default node ``tau = t_j`` per base node of
    step ``j``; that value is carried unchanged to all later steps.
    """
    N = model.n_steps
    vals = []
    for k in range(N + 1):
        m = 1 << k
        arr = np.empty((m, k + 1))
        arr[:, k] = alive[k]
        for j in range(1, k + 1):
            arr[:, j - 1] = np.tile(at_default[j], m >> j)
        vals.append(arr.reshape(-1))
    return AdaptedProcess(G_TREE, tuple(vals))


def lift_stopped(model: LatticeModel, proc: AdaptedProcess) -> AdaptedProcess:
    """Lift a base-tree process to the enlarged tree, stopped at the default step."""
    return assemble_gprocess(model, proc.values, [None] + list(proc.values[1:]))


@dataclass(frozen=True, eq=False)
class DefaultLaw:
    """Conditional law of the default step given the full path.

    ``mass[i, j - 1]`` is the probability of default at ``t_j`` on path ``i``
    and ``mass[i, N]`` the probability of surviving past the horizon.
    """

    model: LatticeModel
    mass: np.ndarray
    kind: str = "custom"

    def __post_init__(self):
        N = self.model.n_steps
        mass = np.asarray(self.mass, dtype=float)
        if mass.shape != (self.model.n_paths, N + 1):
            raise ConfigurationError(f"default masses must have shape {(self.model.n_paths, N + 1)}, got {mass.shape}")
        if not np.all(np.isfinite(mass)) or np.any(mass < 0):
            raise ConfigurationError("default masses must be finite and nonnegative")
        dev = np.abs(mass.sum(axis=1) - 1.0)
        if dev.max() > TOL:
            i = int(dev.argmax())
            raise ConfigurationError(f"default masses on path {prefix_label(N, i)} sum to {mass[i].sum()!r}, not 1")
        mass.setflags(write=False)
        object.__setattr__(self, "mass", mass)

    @classmethod
    def none(cls, model: LatticeModel) -> "DefaultLaw":
        mass = np.zeros((model.n_paths, model.n_steps + 1))
        mass[:, -1] = 1.0
        return cls(model, mass, "none")

    @classmethod
    def deterministic(cls, model: LatticeModel, h: Sequence[float]) -> "DefaultLaw":
        h = np.asarray(h, dtype=float)
        if h.shape != (model.n_steps,):
            raise ConfigurationError(f"deterministic law needs {model.n_steps} masses, got {h.shape}")
        if np.any(h < 0):
            raise ConfigurationError("deterministic default masses must be nonnegative")
        tail = 1.0 - h.sum()
        if tail < -TOL:
            raise ConfigurationError(f"deterministic default masses sum to {h.sum()!r} > 1")
        row = np.append(h, max(tail, 0.0))
        return cls(model, np.tile(row, (model.n_paths, 1)), "deterministic")

    @classmethod
    def from_hazards(cls, model: LatticeModel, hazard: np.ndarray, kind: str = "hazard_of_path") -> "DefaultLaw":
        """Build masses from per-step conditional hazards in ``[0, 1)``, shape ``(n_paths, N)``."""
        hazard = np.asarray(hazard, dtype=float)
        if hazard.shape != (model.n_paths, model.n_steps):
            raise ConfigurationError(f"hazard table must have shape {(model.n_paths, model.n_steps)}, got {hazard.shape}")
        if np.any(hazard < 0) or np.any(hazard >= 1):
            raise ConfigurationError("hazards must lie in [0, 1)")
        surv = np.ones((model.n_paths, model.n_steps + 1))
        np.cumprod(1.0 - hazard, axis=1, out=surv[:, 1:])
        mass = np.empty_like(surv)
        mass[:, :-1] = hazard * surv[:, :-1]
        mass[:, -1] = surv[:, -1]
        return cls(model, mass, kind)

    @classmethod
    def affine_hazard(cls, model: LatticeModel, a: float, b: float, state: str = "terminal",
                      lo: float = 0.0, hi: float = 0.95) -> "DefaultLaw":
        """Hazard ``clip(a + b * X, lo, hi)`` per step.

        ``X`` is ``B_{t_j}`` for ``state='current'`` (the law is then adapted to
        the walk) and ``B_{t_N}`` for ``state='terminal'`` (it looks ahead).
        """
        if state not in ("current", "terminal"):
            raise ConfigurationError(f"state must be 'current' or 'terminal', got {state!r}")
        if not (0.0 <= lo <= hi < 1.0):
            raise ConfigurationError("hazard bounds must satisfy 0 <= lo <= hi < 1")
        if state == "current":
            X = model.B[:, 1:]
        else:
            X = np.repeat(model.B[:, -1:], model.n_steps, axis=1)
        return cls.from_hazards(model, np.clip(a + b * X, lo, hi))

    @classmethod
    def from_interval_rule(cls, model: LatticeModel, n_coarse: int, rule: Callable[[np.ndarray, np.ndarray], np.ndarray]) -> "DefaultLaw":
        """Refine a coarse-grid law by splitting each coarse mass evenly over its sub-steps.

        ``rule(t_coarse, B_coarse)`` receives the coarse grid ``(n_coarse + 1,)``
        and the walk sampled on it ``(n_paths, n_coarse + 1)``, and returns coarse
        default masses of shape ``(n_paths, n_coarse)``.
        """
        N = model.n_steps
        if n_coarse < 1 or N % n_coarse:
            raise ConfigurationError(f"n_steps={N} is not a multiple of n_coarse={n_coarse}")
        r = N // n_coarse
        idx = np.arange(0, N + 1, r)
        coarse = np.asarray(rule(model.times[idx], model.B[:, idx]), dtype=float)
        if coarse.shape != (model.n_paths, n_coarse):
            raise ConfigurationError(f"interval rule returned shape {coarse.shape}")
        mass = np.empty((model.n_paths, N + 1))
        mass[:, :N] = np.repeat(coarse / r, r, axis=1)
        mass[:, N] = 1.0 - coarse.sum(axis=1)
        return cls(model, np.clip(mass, 0.0, None), "hazard_of_path")

    def immersion_flags(self) -> np.ndarray:
        """``flags[j - 1]`` tells whether ``h_j`` is determined by the path up to ``t_j``."""
        N = self.model.n_steps
        flags = np.empty(N, dtype=bool)
        for j in range(1, N + 1):
            h = self.mass[:, j - 1].reshape(-1, 1 << j)
            flags[j - 1] = bool(np.all(np.abs(h - h[0:1]) <= TOL))
        return flags

    def is_deterministic(self) -> bool:
        return bool(np.all(np.abs(self.mass - self.mass[0:1]) <= TOL))

    @cached_property
    def tail(self) -> np.ndarray:
        """``tail[i, k] = P(tau > t_k | path i)`` for ``k = 0..N``."""
        return np.cumsum(self.mass[:, ::-1], axis=1)[:, ::-1]


@dataclass(frozen=True, eq=False)
class Measure:
    """Probability weights over atoms."""

    model: LatticeModel
    weights: np.ndarray
    name: str = "P"
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    @classmethod
    def reference(cls, model: LatticeModel, law: DefaultLaw) -> "Measure":
        w = (model.path_prob[:, None] * law.mass).reshape(-1)
        return cls(model, w, "P")

    @property
    def total(self) -> float:
        return float(self.weights.sum())

    def expectation(self, x: np.ndarray) -> float:
        return float(np.dot(self.weights, x))

    def node_mass(self, step: int, tree: str = F_TREE) -> np.ndarray:
        m = self.model
        return np.bincount(m.atom_node(step, tree), self.weights, minlength=m.n_nodes(step, tree))

    def path_weights(self) -> np.ndarray:
        """Marginal weights of the base paths."""
        return self.weights.reshape(self.model.n_paths, -1).sum(axis=1)

    def alive_kernel(self, step: int) -> np.ndarray:
        """One-step transition law out of the alive nodes of ``step``.

        Returns ``w`` of shape ``(2**step, 2, 2)`` with ``w[n, b, o]`` the
        conditional probability of moving to base child ``n + b * 2**step`` and
        then defaulting at ``step + 1`` (``o = 0``) or staying alive (``o = 1``).
        """
        key = ("alive_kernel", step)
        if key not in self._cache:
            m = self.model
            sel = m.atom_tau > step
            n = m.atom_fnode(step)[sel]
            b = m.bits[m.atom_path[sel], step].astype(np.int64)
            o = (m.atom_tau[sel] > step + 1).astype(np.int64)
            num = np.bincount(n * 4 + b * 2 + o, self.weights[sel], minlength=4 << step).reshape(-1, 2, 2)
            den = num.sum(axis=(1, 2))
            with np.errstate(invalid="ignore", divide="ignore"):
                w = num / den[:, None, None]
            w.setflags(write=False)
            self._cache[key] = w
        return self._cache[key]

    def base_kernel(self, step: int) -> np.ndarray:
        """Transition law ``(2**step, 2)`` of the base walk out of the nodes of ``step``."""
        key = ("base_kernel", step)
        if key not in self._cache:
            m = self.model
            pw = self.path_weights()
            num = np.bincount(m.fnode_of_path(step + 1), pw, minlength=2 << step).reshape(2, -1).T
            with np.errstate(invalid="ignore", divide="ignore"):
                w = num / num.sum(axis=1, keepdims=True)
            w.setflags(write=False)
            self._cache[key] = w
        return self._cache[key]


def conditional_expectation(model: LatticeModel, x: np.ndarray, measure: Measure, step: int,
                            tree: str = F_TREE, node: int | None = None):
    """Exact conditional expectation of an atom-indexed variable given the nodes of ``step``.

    Returns the value at every node (``nan`` on zero-mass nodes), or at the single
    ``node`` if given, in which case a zero-mass node raises ``UndefinedNodeError``.
    """
    x = np.asarray(x, dtype=float)
    if x.shape != (model.n_atoms,):
        raise PreconditionError(f"expected an atom variable of length {model.n_atoms}, got {x.shape}")
    idx = model.atom_node(step, tree)
    size = model.n_nodes(step, tree)
    w = measure.weights
    num = np.bincount(idx, w * x, minlength=size)
    den = np.bincount(idx, w, minlength=size)
    if node is not None:
        if den[node] <= 0:
            raise UndefinedNodeError(f"node {node} at step {step} of the {tree}-tree has zero mass")
        return num[node] / den[node]
    with np.errstate(invalid="ignore", divide="ignore"):
        out = num / den
    out[den <= 0] = np.nan
    return out


def project(model: LatticeModel, x: np.ndarray, measure: Measure, tree: str = F_TREE) -> AdaptedProcess:
    """Conditional expectations of ``x`` at every step."""
    return AdaptedProcess(tree, tuple(conditional_expectation(model, x, measure, k, tree) for k in range(model.n_steps + 1)))


def martingale_defect(model: LatticeModel, proc: AdaptedProcess, measure: Measure) -> float:
    """Largest ``|E[X_k | nodes of k-1] - X_{k-1}|`` over positive-mass nodes."""
    worst = 0.0
    for k in range(1, len(proc)):
        cond = conditional_expectation(model, proc.at_atoms(model, k), measure, k - 1, proc.tree)
        ok = measure.node_mass(k - 1, proc.tree) > 0
        if np.any(ok):
            worst = max(worst, float(np.max(np.abs(cond[ok] - proc[k - 1][ok]))))
    return worst


@dataclass(frozen=True, eq=False)
class AzemaBundle:
    """Survival processes of the default time and the factors derived from them."""

    model: LatticeModel
    law: DefaultLaw
    G: AdaptedProcess
    Gtilde: AdaptedProcess
    q: AdaptedProcess
    Dopt: AdaptedProcess
    m: AdaptedProcess
    E: AdaptedProcess
    Etilde: AdaptedProcess
    Psi: AdaptedProcess

    @cached_property
    def V(self) -> AdaptedProcess:
        """Nondecreasing process ``1 - Etilde``."""
        return self.Etilde.map(lambda v: 1.0 - v)

    @cached_property
    def dV(self) -> AdaptedProcess:
        """Increments ``V_k - V_{k-1}`` (zero at step 0)."""
        vals = [np.zeros(1)]
        for k in range(1, self.model.n_steps + 1):
            parent = np.arange(1 << k) & ((1 << (k - 1)) - 1)
            vals.append(self.Etilde[k - 1][parent] - self.Etilde[k])
        return AdaptedProcess(F_TREE, tuple(vals))

    @cached_property
    def reference(self) -> Measure:
        return Measure.reference(self.model, self.law)


def build_azema(model: LatticeModel, law: DefaultLaw) -> AzemaBundle:
    """Compute the survival processes and the multiplicative factors.

    Raises
    ------
    AssumptionPError
        If a conditional survival probability is not strictly positive.
    """
    if law.model is not model and (law.model.n_steps, law.model.dt, law.model.up_prob) != (model.n_steps, model.dt, model.up_prob):
        raise ConfigurationError("default law was built on a different model")
    N = model.n_steps
    pp = model.path_prob
    tail = law.tail
    G, Gt, q, Do, m, E, Et = ([] for _ in range(7))
    for k in range(N + 1):
        idx = model.fnode_of_path(k)
        size = 1 << k
        pn = np.bincount(idx, pp, minlength=size)
        g = np.bincount(idx, pp * tail[:, k], minlength=size) / pn
        bad = np.flatnonzero(~(g > 0))
        if bad.size:
            n = int(bad[0])
            raise AssumptionPError(f"conditional survival G={float(g[n]):.12g} at step {k}, node {prefix_label(k, n)} is not positive")
        if k == 0:
            gt = np.ones(1)
            qk = np.zeros(1)
        else:
            gt = np.bincount(idx, pp * tail[:, k - 1], minlength=size) / pn
            qk = np.bincount(idx, pp * law.mass[:, k - 1], minlength=size) / pn
        G.append(g)
        Gt.append(gt)
        q.append(qk)
        if k == 0:
            Do.append(np.zeros(1))
            E.append(np.ones(1))
            Et.append(np.ones(1))
        else:
            parent = np.arange(size) & ((1 << (k - 1)) - 1)
            Do.append(Do[k - 1][parent] + qk)
            # 1 + dm / G_{k-1} = Gtilde_k / G_{k-1} and 1 - q / Gtilde = G / Gtilde
            E.append(E[k - 1][parent] * (gt / G[k - 1][parent]))
            Et.append(Et[k - 1][parent] * (g / gt))
        m.append(Do[k] + g)
    F = AdaptedProcess.base
    psi_f = [1.0 / e for e in E]
    Psi = assemble_gprocess(model, psi_f, [None] + psi_f[1:])
    return AzemaBundle(model, law, F(G), F(Gt), F(q), F(Do), F(m), F(E), F(Et), Psi)


def reweight_to_Q(model: LatticeModel, bundle: AzemaBundle) -> Measure:
    """Measure with density ``Psi`` at ``T ^ tau`` relative to the reference measure."""
    P = bundle.reference
    psi = bundle.Psi.at_atoms(model, model.n_steps)
    w = P.weights * psi
    total = w.sum()
    if abs(total - 1.0) > 1e-10:
        raise ConsistencyError(f"reweighted mass is {total!r}; the density is not a martingale")
    if np.any((P.weights > 0) & ~(w > 0)):
        raise ConsistencyError("reweighted measure is not equivalent to the reference measure")
    return Measure(model, w, "Q")


def stopped_walk(model: LatticeModel) -> AdaptedProcess:
    """The walk stopped at the default step, on the enlarged tree."""
    return lift_stopped(model, fprocess(model, [model.node_B(k) for k in range(model.n_steps + 1)]))


def operator_T(M: AdaptedProcess, bundle: AzemaBundle, return_correction: bool = False, tol: float = 1e-10):
    """Map a base-tree martingale to a martingale of the enlarged tree under the reference measure.

    The increment at step ``k`` is ``dM_k (1 - dm_k / Gtilde_k)`` up to and
    including the default step, and zero afterwards. With
    ``return_correction=True`` the compensator ``sum dM dm / Gtilde`` is also
    returned so that ``T(M) + correction`` equals ``M`` stopped at default.
    """
    model = bundle.model
    if M.tree != F_TREE:
        raise PreconditionError("operator_T expects a base-tree process")
    defect = martingale_defect(model, M, bundle.reference)
    if defect > tol:
        raise PreconditionError(f"input is not a martingale under the reference measure (defect {defect:.3e})")
    T = [np.asarray(M[0], dtype=float).copy()]
    C = [np.zeros(1)]
    for k in range(1, model.n_steps + 1):
        parent = np.arange(1 << k) & ((1 << (k - 1)) - 1)
        dM = M[k] - M[k - 1][parent]
        dm = bundle.m[k] - bundle.m[k - 1][parent]
        corr = dM * dm / bundle.Gtilde[k]
        T.append(T[k - 1][parent] + dM - corr)
        C.append(C[k - 1][parent] + corr)
    out = assemble_gprocess(model, T, [None] + T[1:])
    if return_correction:
        return out, assemble_gprocess(model, C, [None] + C[1:])
    return out


def martingale_decompose(model: LatticeModel, X: AdaptedProcess, measure: Measure, tol: float = 1e-10):
    """Split a stopped martingale of the enlarged tree into a walk integral and an orthogonal part.

    Returns ``(Z, M)`` with ``X_k - X_{k-1} = Z_{k-1} dB^tau_k + dM_k``. ``Z`` is
    stored at the node where the step starts (so it is predictable) and vanishes
    after default; ``M`` starts at 0 and is conditionally orthogonal to the walk.
    """
    if X.tree != G_TREE:
        raise PreconditionError("martingale_decompose expects an enlarged-tree process")
    defect = martingale_defect(model, X, measure)
    if defect > tol:
        raise PreconditionError(f"input is not a martingale under {measure.name} (defect {defect:.3e})")
    Bt = model.atoms_B_tau()
    w = measure.weights
    Xa = X.atom_matrix(model)
    Z_vals = []
    dM_atoms = np.zeros_like(Xa)
    for k in range(1, model.n_steps + 1):
        idx = model.atom_gnode(k - 1)
        size = model.n_nodes(k - 1, G_TREE)
        den = np.bincount(idx, w, minlength=size)
        safe = np.where(den > 0, den, 1.0)
        dB = Bt[:, k] - Bt[:, k - 1]
        dX = Xa[:, k] - Xa[:, k - 1]
        mb = np.bincount(idx, w * dB, minlength=size) / safe
        c = dB - mb[idx]
        var = np.bincount(idx, w * c * c, minlength=size) / safe
        cov = np.bincount(idx, w * c * dX, minlength=size) / safe
        z = np.where(var > TOL * model.dt, cov / np.where(var > 0, var, 1.0), 0.0)
        z[den <= 0] = np.nan
        Z_vals.append(z)
        dM_atoms[:, k] = dX - np.nan_to_num(z)[idx] * dB
    Z_vals.append(np.zeros(model.n_nodes(model.n_steps, G_TREE)))
    Ma = np.cumsum(dM_atoms, axis=1)
    M_vals = []
    for k in range(model.n_steps + 1):
        vals = np.full(model.n_nodes(k, G_TREE), np.nan)
        vals[model.atom_gnode(k)] = Ma[:, k]
        M_vals.append(vals)
    return AdaptedProcess(G_TREE, tuple(Z_vals)), AdaptedProcess(G_TREE, tuple(M_vals))


def girsanov_defect(model: LatticeModel, measure: Measure) -> float:
    """Largest conditional mean of the stopped-walk increments under ``measure``."""
    return martingale_defect(model, stopped_walk(model), measure)


def azema_defects(bundle: AzemaBundle, Q: Measure | None = None) -> dict:
    """Residuals of the structural identities of the bundle."""
    model = bundle.model
    P = bundle.reference
    out = {}
    out["gtilde_sum"] = max(float(np.max(np.abs(bundle.Gtilde[k] - bundle.G[k] - bundle.q[k]))) for k in range(model.n_steps + 1))
    out["m_martingale"] = martingale_defect(model, bundle.m, P)
    out["product"] = max(float(np.max(np.abs(bundle.G[k] - bundle.E[k] * bundle.Etilde[k]))) for k in range(model.n_steps + 1))
    et = np.concatenate(bundle.Etilde.values)
    out["etilde_range"] = float(max(0.0, et.max() - 1.0, -et.min())) if et.min() > 0 else float("inf")
    out["psi_positive"] = 0.0 if min(v.min() for v in bundle.Psi.values) > 0 else float("inf")
    out["psi_martingale"] = martingale_defect(model, bundle.Psi, P)
    if Q is None:
        Q = reweight_to_Q(model, bundle)
    out["q_mass"] = abs(Q.total - 1.0)
    out["girsanov"] = girsanov_defect(model, Q)
    return out
