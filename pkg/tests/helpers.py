"""Shared builders for the test modules."""
import numpy as np

from drbsde import DefaultLaw, DRBSDEProblem, DriverSpec, GameSpec, build_azema, build_model, reweight_to_Q
from drbsde.filtration import fprocess


def random_hazards(model, rng, hi=0.3):
    """Path-dependent per-step hazards in ``[0, hi)``."""
    return rng.uniform(0.0, hi, size=(model.n_paths, model.n_steps))


def random_setup(seed, n_steps=3, dt=0.25, law="path", up_prob=0.5):
    """Model, default law, Azema bundle and reweighted measure."""
    rng = np.random.default_rng(seed)
    model = build_model(n_steps, dt, up_prob=up_prob)
    if law == "path":
        dl = DefaultLaw.from_hazards(model, random_hazards(model, rng))
    elif law == "deterministic":
        dl = DefaultLaw.deterministic(model, rng.uniform(0.0, 0.8 / n_steps, size=n_steps))
    else:
        dl = DefaultLaw.none(model)
    bundle = build_azema(model, dl)
    return model, dl, bundle, reweight_to_Q(model, bundle)


def node_data(model, rng, scale=1.0):
    """Random per-step node values."""
    return [scale * rng.standard_normal(1 << k) for k in range(model.n_steps + 1)]


def banded_problem(seed, n_steps=3, dt=0.25, law="path", driver=None, width=0.3):
    """Reflected problem whose barriers sit close to the terminal data so that both bind."""
    rng = np.random.default_rng(seed + 1000)
    model, dl, bundle, Q = random_setup(seed, n_steps, dt, law)
    zeta = node_data(model, rng, 1.0)
    mid = node_data(model, rng, 0.3)
    lo = [m - width * rng.uniform(0.2, 1.0, m.size) for m in mid]
    hi = [m + width * rng.uniform(0.2, 1.0, m.size) for m in mid]
    zeta = [np.clip(z, l + 1e-3, h - 1e-3) for z, l, h in zip(zeta, lo, hi)]
    prob = DRBSDEProblem(model, Q, zeta, driver or DriverSpec.zero(), lo, hi)
    return prob, bundle


def max_diff(a, b):
    return max(float(np.max(np.abs(np.asarray(x) - np.asarray(y)))) for x, y in zip(a, b))


def as_process(model, rule):
    return fprocess(model, rule)


def ordered_pair(seed, n_steps=3, dt=0.25):
    """Two reflected problems with ordered terminal values, drivers and barriers.

    Both drivers share ``r`` and ``theta`` (small enough for a monotone one-step
    map) and differ by a nonnegative shift of ``g``.
    """
    rng = np.random.default_rng(seed)
    model, dl, bundle, Q = random_setup(seed, n_steps, dt, "path")
    r = float(rng.uniform(-0.5, 0.5))
    theta = float(rng.uniform(-0.3, 0.3))
    g1 = node_data(model, rng, 0.5)
    g2 = [g + rng.uniform(0.0, 0.3, g.size) for g in g1]
    mid = node_data(model, rng, 0.3)
    lo1 = [m - rng.uniform(0.2, 0.5, m.size) for m in mid]
    hi1 = [m + rng.uniform(0.2, 0.5, m.size) for m in mid]
    lo2 = [l + rng.uniform(0.0, 0.15, l.size) for l in lo1]
    hi2 = [h + rng.uniform(0.0, 0.15, h.size) for h in hi1]
    z1 = [np.clip(rng.standard_normal(l.size), l, h) for l, h in zip(lo1, hi1)]
    z2 = [np.clip(z + rng.uniform(0.0, 0.2, z.size), l, h) for z, l, h in zip(z1, lo2, hi2)]
    p1 = DRBSDEProblem(model, Q, z1, DriverSpec.linear(r, theta, g1), lo1, hi1)
    p2 = DRBSDEProblem(model, Q, z2, DriverSpec.linear(r, theta, g2), lo2, hi2)
    return p1, p2


def random_game(seed, n_steps=3, dt=0.25, law="path", driver=None, width=0.3):
    """Game on node-wise random data: recovery above the survival payoff, both inside the band."""

    prob, bundle = banded_problem(seed, n_steps, dt, law, driver, width)
    rng = np.random.default_rng(seed + 2000)
    m = prob.model
    lo, hi = prob.lower, prob.upper
    N = n_steps
    span = hi[N] - lo[N]
    xi1 = lo[N] + span * rng.uniform(0.0, 0.6, span.size)
    xi2 = [np.clip(z, l, h) for z, l, h in zip(prob.zeta.values, lo.values, hi.values)]
    xi2[N] = xi1 + span * rng.uniform(0.05, 0.4, span.size)
    qproc = [l + (h - l) * rng.uniform(0.0, 1.0, l.size) for l, h in zip(lo.values, hi.values)]
    return GameSpec(m, prob.measure, lo, hi, qproc, xi1, xi2, prob.driver), bundle
