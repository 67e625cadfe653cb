"""Transfers between the enlarged-tree equation and equations on the base tree.

Two correspondences are implemented. The first rescales the enlarged-tree
solution before default by the survival factor ``Etilde`` and produces a
reflected recursion on the base tree with an extra Stieltjes term driven by
``V = 1 - Etilde``. The second projects the enlarged-tree solution on the base
filtration when the default time is independent of the walk.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import HypothesisError, PreconditionError
from .filtration import (
    F_TREE,
    G_TREE,
    AdaptedProcess,
    AzemaBundle,
    DefaultLaw,
    LatticeModel,
    Measure,
    assemble_gprocess,
    build_azema,
    build_model,
    conditional_expectation,
    fprocess,
    reweight_to_Q,
)
from .solver import (
    DRBSDEProblem,
    DRBSDESolution,
    DriverSpec,
    FTreeSolution,
    one_step_moments,
    solve_drbsde,
    solve_ftree,
)


def _parent(k: int) -> np.ndarray:
    return np.arange(1 << k) & ((1 << (k - 1)) - 1)


@dataclass(eq=False)
class FLinkData:
    """Base-tree data of the rescaled equation."""

    xi_F: np.ndarray
    g_F: AdaptedProcess
    L_F: AdaptedProcess | None
    U_F: AdaptedProcess | None
    V_F: AdaptedProcess
    zeta_dV: AdaptedProcess


@dataclass
class LinkReport:
    max_abs_error: float
    per_node_errors: list
    k_transport_error: float = 0.0
    z_error: float = 0.0
    m_jump_error: float = 0.0
    node_count: int = 0
    convergence_table: list = field(default_factory=list)


def transform_first_link(problem: DRBSDEProblem, bundle: AzemaBundle) -> FLinkData:
    """Rescale the data of a ``y, z``-free problem by ``Etilde``."""
    if problem.driver.depends_on_yz:
        raise HypothesisError("the first link needs a driver that does not depend on (y, z)")
    model = problem.model
    N = model.n_steps
    Et = bundle.Etilde
    g = problem.driver.coefficients(model)["g"]
    g_F = AdaptedProcess.base(Et[k] * g[k] for k in range(N + 1))
    L_F = None if problem.lower is None else AdaptedProcess.base(Et[k] * problem.lower[k] for k in range(N + 1))
    U_F = None if problem.upper is None else AdaptedProcess.base(Et[k] * problem.upper[k] for k in range(N + 1))
    zdv = AdaptedProcess.base(problem.zeta[k] * bundle.dV[k] for k in range(N + 1))
    return FLinkData(Et[N] * problem.terminal_alive(), g_F, L_F, U_F, bundle.V, zdv)


def solve_f_drbsde(fdata: FLinkData, model: LatticeModel, measure: Measure) -> FTreeSolution:
    """Reflected base-tree recursion with the Stieltjes term ``zeta dV`` inside each step."""
    return solve_ftree(model, fdata.xi_F, measure, DriverSpec.from_g(fdata.g_F), fdata.L_F, fdata.U_F, fdata.zeta_dV)


def verify_first_link(g_sol: DRBSDESolution, f_sol: FTreeSolution, bundle: AzemaBundle) -> LinkReport:
    """Compare the enlarged-tree solution before default with the rescaled base-tree solution.

    Checks ``Y Etilde = Y^F``, ``Z Etilde = Z^F`` and ``dK Etilde = dK^F`` at the
    alive nodes before the horizon, and that each jump of the orthogonal
    martingale equals ``(zeta - Y) dN`` with ``dN = 1{tau = k} - q_k / Gtilde_k``.
    """
    model = g_sol.model
    if f_sol.model.n_steps != model.n_steps or bundle.model is not model:
        raise PreconditionError("solutions and bundle come from different models")
    Et = bundle.Etilde
    moves = model.moves
    zeta = g_sol.problem.zeta
    per_node = []
    y_err = k_err = z_err = m_err = 0.0
    count = 0
    for k in range(model.n_steps):
        e = np.abs(g_sol.Y_alive[k] * Et[k] - f_sol.Y[k])
        per_node.append(e)
        count += e.size
        y_err = max(y_err, float(e.max()))
        k_err = max(k_err, float(np.max(np.abs(g_sol.dKplus[k] * Et[k] - f_sol.dKplus[k]))),
                    float(np.max(np.abs(g_sol.dKminus[k] * Et[k] - f_sol.dKminus[k]))))
        z_err = max(z_err, float(np.max(np.abs(g_sol.Z_alive[k] * Et[k] - f_sol.Z[k]))))
        base = np.tile(g_sol.predictor[k], 2)
        zdb = np.concatenate([g_sol.Z_alive[k] * moves[0], g_sol.Z_alive[k] * moves[1]])
        dm_alive = g_sol.Y_alive[k + 1] - base - zdb
        dm_dflt = zeta[k + 1] - base - zdb
        hz = bundle.q[k + 1] / bundle.Gtilde[k + 1]
        jump = zeta[k + 1] - g_sol.Y_alive[k + 1]
        m_err = max(m_err, float(np.max(np.abs(dm_alive + jump * hz))), float(np.max(np.abs(dm_dflt - jump * (1.0 - hz)))))
    return LinkReport(y_err, per_node, k_err, z_err, m_err, count)


def first_link_check(problem: DRBSDEProblem, bundle: AzemaBundle) -> LinkReport:
    """Solve both sides of the first link and compare them."""
    g_sol = solve_drbsde(problem)
    fdata = transform_first_link(problem, bundle)
    f_sol = solve_f_drbsde(fdata, problem.model, bundle.reference)
    return verify_first_link(g_sol, f_sol, bundle)


def first_link_refinement(levels, horizon: float, coarse_steps: int, coarse_rule, zeta, g=0.0,
                          lower=None, upper=None) -> LinkReport:
    """First-link errors along dyadic refinements of a fixed horizon.

    Every level shares the coarse default law ``coarse_rule`` (see
    ``DefaultLaw.from_interval_rule``); ``zeta``, ``g`` and the barriers are
    rules ``(t, b)``. The report carries one ``(dt, error, node_count)`` row per
    level and the errors of the finest level.
    """
    table = []
    rep = None
    for N in levels:
        model = build_model(int(N), horizon / N)
        law = DefaultLaw.from_interval_rule(model, coarse_steps, coarse_rule)
        bundle = build_azema(model, law)
        Q = reweight_to_Q(model, bundle)
        prob = DRBSDEProblem(model, Q, zeta, DriverSpec.from_g(g), lower, upper)
        rep = first_link_check(prob, bundle)
        table.append((model.dt, rep.max_abs_error, rep.node_count))
    rep.convergence_table = table
    return rep


def refinement_is_monotone(table, slack: float = 1.1, floor: float = 0.0) -> bool:
    """Each error is at most ``slack`` times the previous one (errors below ``floor`` count as zero)."""
    errs = [e if e > floor else 0.0 for _, e, *_ in table]
    return all(b <= slack * a for a, b in zip(errs, errs[1:]))


# ---------------------------------------------------------------------------
# integrability transfer


@dataclass
class TransferRow:
    name: str
    lhs: float
    rhs: float
    bound: float

    @property
    def error(self) -> float:
        return abs(self.lhs - self.rhs)

    @property
    def within_bound(self) -> bool:
        return self.lhs <= self.bound * (1.0 + 1e-12) + 1e-15


def transfer_identity(X: AdaptedProcess, bundle: AzemaBundle, Q: Measure) -> tuple[float, float]:
    """``E_Q[X_{T ^ tau}]`` and ``E_P[Etilde_N X_N + sum_k X_k dV_k]`` for a base-tree process."""
    model = bundle.model
    stop = model.atom_stop
    xa = np.empty(model.n_atoms)
    for s in range(1, model.n_steps + 1):
        sel = stop == s
        xa[sel] = X[s][model.atom_fnode(s)[sel]]
    lhs = Q.expectation(xa)
    N = model.n_steps
    pp = model.path_prob
    tot = bundle.Etilde[N] * X[N]
    for k in range(1, N + 1):
        tot = tot + (X[k] * bundle.dV[k])[model.fnode_of_path(k)]
    return lhs, float(pp @ tot)


def _exp_weight(model: LatticeModel, alpha_sq: AdaptedProcess, beta: float) -> AdaptedProcess:
    A = [np.zeros(1)]
    for k in range(1, model.n_steps + 1):
        A.append(A[k - 1][_parent(k)] + alpha_sq[k - 1][_parent(k)] * model.dt)
    return AdaptedProcess.base(np.exp(beta * a) for a in A)


def _running(model: LatticeModel, vals, op) -> AdaptedProcess:
    out = [np.asarray(vals[0], dtype=float)]
    for k in range(1, model.n_steps + 1):
        out.append(op(out[k - 1][_parent(k)], vals[k]))
    return AdaptedProcess.base(out)


def verify_integrability_transfer(zeta, bundle: AzemaBundle, beta: float, alpha_sq, g=None, lower=None, upper=None,
                                  Q: Measure | None = None) -> list:
    """Integrability-transfer identities for the terminal value, the driver and the barriers.

    Each row holds the enlarged-tree expectation, the base-tree expression and
    the base-tree upper bound.
    """
    model = bundle.model
    Q = Q or reweight_to_Q(model, bundle)
    zeta = fprocess(model, zeta)
    alpha_sq = fprocess(model, alpha_sq)
    eA = _exp_weight(model, alpha_sq, beta)
    N = model.n_steps
    pp = model.path_prob
    rows = []

    X = AdaptedProcess.base(eA[k] * zeta[k] ** 2 for k in range(N + 1))
    lhs, rhs = transfer_identity(X, bundle, Q)
    vstar = _running(model, [np.zeros(1)] + [zeta[k] ** 2 * bundle.dV[k] for k in range(1, N + 1)], np.add)
    bound = float(pp @ (eA[N] * (vstar[N] + zeta[N] ** 2)))
    rows.append(TransferRow("zeta", lhs, rhs, bound))

    if g is not None:
        g = fprocess(model, g)
        inc = [np.zeros(1)] + [(eA[k - 1] * g[k - 1] ** 2 / alpha_sq[k - 1] * model.dt)[_parent(k)] for k in range(1, N + 1)]
        Phi = _running(model, inc, np.add)
        lhs, rhs = transfer_identity(Phi, bundle, Q)
        rows.append(TransferRow("driver", lhs, rhs, float(pp @ Phi[N])))

    for name, proc, sign in (("lower_plus", lower, 1.0), ("upper_minus", upper, -1.0)):
        if proc is None:
            continue
        proc = fprocess(model, proc)
        vals = [eA[k] ** 2 * np.maximum(sign * proc[k], 0.0) ** 2 for k in range(N + 1)]
        X = _running(model, vals, np.maximum)
        lhs, rhs = transfer_identity(X, bundle, Q)
        rows.append(TransferRow(name, lhs, rhs, float(pp @ X[N])))
    return rows


# ---------------------------------------------------------------------------
# projection under independence


@dataclass
class SecondLinkReport:
    Y_hat: AdaptedProcess
    Z_hat: AdaptedProcess
    Theta: AdaptedProcess
    dKplus_F: AdaptedProcess
    dKminus_F: AdaptedProcess
    driver_term: AdaptedProcess
    balance_error: float
    driver_term_error: float
    ordering_violation: float
    survival_ordering_violation: float
    skorokhod_plus: float
    skorokhod_minus: float
    projected_product_plus: float
    projected_product_minus: float
    varpi: float


MAX_VARPI = 5.0


def project_second_link(g_sol: DRBSDESolution, bundle: AzemaBundle, problem: DRBSDEProblem | None = None) -> SecondLinkReport:
    """Project the enlarged-tree solution on the base filtration under independence.

    Requires a deterministic default law. The reflection terms of the projection
    are ``E_Q[dK 1{alive} | F_k] = G_k dK``; the projected balance

        Yhat_k = Yhat_{k+1} + D_k dt + dK^{F,+}_k - dK^{F,-}_k - (Zhat_k + Theta_k) dB_{k+1}

    is checked at every base node, where ``D_k = E_Q[f_k 1{alive} | F_k]`` and
    ``Theta`` represents the projected orthogonal martingale. Barrier ordering is
    checked for the projection against the projected barriers, and the
    Skorokhod products against the value on survival
    ``E_Q[Y_k 1{alive} | F_k] / G_k``.
    """
    problem = problem or g_sol.problem
    model = problem.model
    if not bundle.law.is_deterministic():
        raise HypothesisError("the projection check needs a default law independent of the walk (deterministic masses)")
    drv = problem.driver
    if drv.kind == "general" or (drv.kind == "linear" and not (np.isscalar(drv.theta) and drv.theta == 0)):
        raise HypothesisError("the projection check needs a driver free of z and at most linear in y")
    coef = drv.coefficients(model)
    N = model.n_steps
    dt = model.dt
    varpi = float(max(np.max(np.abs(coef["r"][k])) for k in range(N)) * N * dt) if drv.kind == "linear" else 0.0
    if varpi > MAX_VARPI:
        raise HypothesisError(f"integrated y-coefficient {varpi} exceeds {MAX_VARPI}")
    Q = problem.measure
    G = bundle.G
    zeros = [np.zeros(1 << j) for j in range(N + 1)]

    def project_G(alive, dflt=None):
        proc = assemble_gprocess(model, alive, dflt if dflt is not None else zeros)
        return [conditional_expectation(model, proc.at_atoms(model, k), Q, k, F_TREE) for k in range(N + 1)]

    Y_hat = [conditional_expectation(model, g_sol.Y.at_atoms(model, k), Q, k, F_TREE) for k in range(N + 1)]
    M_hat = [conditional_expectation(model, g_sol.M.at_atoms(model, k), Q, k, F_TREE) for k in range(N + 1)]
    pad = [np.zeros(1 << N)]
    Z_hat = project_G(list(g_sol.Z_alive) + pad)
    dKp = project_G(list(g_sol.dKplus) + pad)
    dKm = project_G(list(g_sol.dKminus) + pad)
    D = project_G(list(g_sol.driver_values) + pad)
    Y_surv = project_G(list(g_sol.Y_alive))
    Lh = [conditional_expectation(model, problem.lower_G.at_atoms(model, k), Q, k, F_TREE) for k in range(N + 1)]
    Uh = [conditional_expectation(model, problem.upper_G.at_atoms(model, k), Q, k, F_TREE) for k in range(N + 1)]

    moves = model.moves
    P_alive = project_G(list(g_sol.predictor) + pad) if drv.kind == "linear" else None
    theta = []
    bal = drv_err = 0.0
    for k in range(N):
        w = Q.base_kernel(k)[:, :, None]
        m = 1 << k
        dMh = (M_hat[k + 1] - np.tile(M_hat[k], 2)).reshape(2, m).T[:, :, None]
        _, th = one_step_moments(w, dMh, moves)
        theta.append(th)
        for b in (0, 1):
            child = np.arange(m) + b * m
            res = Y_hat[k] - (Y_hat[k + 1][child] + D[k] * dt + dKp[k] - dKm[k] - (Z_hat[k] + th) * moves[b])
            bal = max(bal, float(np.max(np.abs(res))))
        expected = G[k] * coef["g"][k]
        if drv.kind == "linear":
            expected = expected - coef["r"][k] * P_alive[k]
        drv_err = max(drv_err, float(np.max(np.abs(D[k] - expected))))
    theta.append(np.zeros(1 << N))

    order = surv_order = sk_p = sk_m = pr_p = pr_m = 0.0
    with np.errstate(invalid="ignore"):
        for k in range(N):
            order = max(order, float(np.max(np.maximum(Lh[k] - Y_hat[k], 0.0))), float(np.max(np.maximum(Y_hat[k] - Uh[k], 0.0))))
            ys = Y_surv[k] / G[k]
            L, U = problem.lower_at(k), problem.upper_at(k)
            surv_order = max(surv_order, float(np.max(np.maximum(L - ys, 0.0))), float(np.max(np.maximum(ys - U, 0.0))))
            sk_p = max(sk_p, float(np.max(np.abs(np.where(dKp[k] > 0, dKp[k] * (ys - L), 0.0)))))
            sk_m = max(sk_m, float(np.max(np.abs(np.where(dKm[k] > 0, dKm[k] * (U - ys), 0.0)))))
            pr_p = max(pr_p, float(np.max(np.abs(np.where(dKp[k] > 0, dKp[k] * (Y_hat[k] - Lh[k]), 0.0)))))
            pr_m = max(pr_m, float(np.max(np.abs(np.where(dKm[k] > 0, dKm[k] * (Uh[k] - Y_hat[k]), 0.0)))))
    F = AdaptedProcess.base
    return SecondLinkReport(F(Y_hat), F(Z_hat), F(theta), F(dKp), F(dKm), F(D), bal, drv_err, order, surv_order,
                            sk_p, sk_m, pr_p, pr_m, varpi)
