"""Slow reference computations used to check the variational smoother.

Nothing here shares code paths with :mod:`hybridffl.inference` beyond the
discretised model description: the Kalman smoother is a covariance-form
filter with RTS backward pass, the telegraph smoother runs in probability
space with rescaling, the unit posterior is a forward-backward pass over a
joint (promoter, protein bin) grid, and the sampler is Metropolis-within-Gibbs.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cholesky_banded, cho_solve_banded, solve_banded

from .errors import GridCoverageError
from .inference import DiscreteModel, discretize, discretize_unit
from .model import FflModel, GeneUnit, log_transition_weights
from .simulate import ObservationSet, TimeGrid


# ---------------------------------------------------------------------------
# linear-Gaussian and telegraph chains


def kalman_smoother(a, u, q, x0, v0, obs_idx, obs_y, r, n_nodes):
    """Scalar fixed-interval smoother for x_{k+1} = a x_k + u_k + N(0, q).

    Returns smoothed means, variances, lag-one covariances
    ``cov(x_k, x_{k+1})`` and the log marginal likelihood of the
    observations ``y ~ N(x_k, r)`` at ``obs_idx``.
    """
    u = np.broadcast_to(np.asarray(u, dtype=float), (n_nodes - 1,))
    y_at = dict(zip(np.asarray(obs_idx).tolist(), np.asarray(obs_y, dtype=float).tolist()))
    mf = np.empty(n_nodes)
    vf = np.empty(n_nodes)
    mp = np.empty(n_nodes)
    vp = np.empty(n_nodes)
    loglik = 0.0
    m, v = x0, v0
    for k in range(n_nodes):
        if k > 0:
            m = a * mf[k - 1] + u[k - 1]
            v = a * a * vf[k - 1] + q
        mp[k], vp[k] = m, v
        if k in y_at:
            s = v + r
            innov = y_at[k] - m
            loglik += -0.5 * (math.log(2 * math.pi * s) + innov * innov / s)
            gain = v / s
            m = m + gain * innov
            v = (1 - gain) * v
        mf[k], vf[k] = m, v
    ms = mf.copy()
    vs = vf.copy()
    lag = np.empty(n_nodes - 1)
    for k in range(n_nodes - 2, -1, -1):
        J = vf[k] * a / vp[k + 1]
        ms[k] = mf[k] + J * (ms[k + 1] - mp[k + 1])
        vs[k] = vf[k] + J * J * (vs[k + 1] - vp[k + 1])
        lag[k] = J * vs[k + 1]
    return ms, vs, lag, loglik


def telegraph_smoother(p_init, weights):
    """Posterior of a binary chain with initial law ``p_init`` (length 2) and
    nonnegative per-step weights ``weights[k, s, s']``.

    Returns ``(m, xi, log_z)`` with ``m[k] = q(mu_k = 1)``.
    """
    K = weights.shape[0]
    alpha = np.empty((K + 1, 2))
    scale = np.empty(K + 1)
    a = np.asarray(p_init, dtype=float)
    scale[0] = a.sum()
    alpha[0] = a / scale[0]
    for k in range(K):
        a = alpha[k] @ weights[k]
        scale[k + 1] = a.sum()
        alpha[k + 1] = a / scale[k + 1]
    beta = np.empty((K + 1, 2))
    beta[K] = 1.0
    for k in range(K - 1, -1, -1):
        beta[k] = weights[k] @ beta[k + 1] / scale[k + 1]
    xi = alpha[:-1, :, None] * weights * beta[1:, None, :] / scale[1:, None, None]
    m = alpha[:, 1] * beta[:, 1]
    return m, xi, float(np.sum(np.log(scale)))


@dataclass
class DecoupledPosterior:
    m: list
    xi: list
    mean: list
    var: list
    lag: list
    log_z: float


def exact_decoupled_posterior(dm: DiscreteModel) -> DecoupledPosterior:
    """Exact posterior of a model whose genes do not interact (A = 0 or no
    downstream regulation, and ke = 0 or no upstream regulators).

    Promoter weights use ``xbar = 0`` since ``ke = 0``; exogenous regulator
    paths are honoured.
    """
    dt = dm.grid.dt
    out = DecoupledPosterior([], [], [], [], [], 0.0)
    for g, gene in enumerate(dm.genes):
        kin, sw = gene.kinetics, gene.switching
        if gene.regulators and sw.ke != 0:
            raise ValueError(f"gene {gene.name} is coupled to its regulators (ke != 0)")
        if kin.A != 0:
            raise ValueError(f"gene {gene.name} has A != 0; protein depends on promoter")
        xbar = gene.exogenous[:-1] if gene.exogenous is not None else None
        if xbar is None and gene.regulators:
            xbar = np.zeros(dm.grid.n_steps)
        w = np.exp(log_transition_weights(sw, xbar, dt))
        w = np.broadcast_to(w, (dm.grid.n_steps, 2, 2))
        m, xi, lz_mu = telegraph_smoother([1 - gene.p_on0, gene.p_on0], w)
        a = 1 - kin.lam * dt
        mean, var, lag, lz_x = kalman_smoother(
            a, kin.b * dt, kin.sigma**2 * dt, gene.x0, gene.x0_var,
            gene.obs_idx, gene.obs_y, dm.sigma_obs**2, dm.grid.n_nodes,
        )
        out.m.append(m)
        out.xi.append(xi)
        out.mean.append(mean)
        out.var.append(var)
        out.lag.append(lag)
        out.log_z += lz_mu + lz_x
    return out


# ---------------------------------------------------------------------------
# joint grid discretisation of a single unit


@dataclass(frozen=True)
class GridSpec:
    x_min: float
    x_max: float
    n_bins: int = 200

    def __post_init__(self):
        if not self.x_max > self.x_min:
            raise ValueError("GridSpec requires x_max > x_min")
        if self.n_bins < 2:
            raise ValueError("GridSpec requires n_bins >= 2")

    @property
    def centers(self):
        return np.linspace(self.x_min, self.x_max, self.n_bins)

    @property
    def width(self):
        return (self.x_max - self.x_min) / (self.n_bins - 1)


def default_grid_spec(unit_dm: DiscreteModel, n_bins=200) -> GridSpec:
    """Bounds ``[min - 5 spread, max + 5 spread]`` over the observations,
    the initial level and both fixed points of the unit."""
    gene = unit_dm.genes[0]
    k = gene.kinetics
    levels = np.concatenate([gene.obs_y, [gene.x0, k.b / k.lam, (k.b + k.A) / k.lam]])
    spread = max(k.sigma / math.sqrt(2 * k.lam), math.sqrt(gene.x0_var), unit_dm.sigma_obs)
    return GridSpec(levels.min() - 5 * spread, levels.max() + 5 * spread, n_bins)


@dataclass
class UnitPosterior:
    m: np.ndarray
    mean: np.ndarray
    var: np.ndarray
    log_z: float
    centers: np.ndarray
    joint: np.ndarray = field(repr=False)


def _normal_pdf(x, mean, var):
    return np.exp(-0.5 * (x - mean) ** 2 / var) / math.sqrt(2 * math.pi * var)


def grid_unit_posterior(unit_dm: DiscreteModel, gspec: GridSpec | None = None, max_escape=1e-3) -> UnitPosterior:
    """Forward-backward over the joint chain (mu_k, bin(x_k)) of a one-gene
    discretised model."""
    if len(unit_dm.genes) != 1:
        raise ValueError("grid_unit_posterior handles single-unit models only")
    gene = unit_dm.genes[0]
    kin, sw = gene.kinetics, gene.switching
    gspec = gspec or default_grid_spec(unit_dm)
    dt, K = unit_dm.grid.dt, unit_dm.grid.n_steps
    if K * gspec.n_bins * 2 > 2_000_000:
        raise ValueError("grid too large for the exact unit posterior")
    c, h = gspec.centers, gspec.width
    q = kin.sigma**2 * dt

    kern = []
    escape = []
    for s in (0, 1):
        nxt = c + (kin.b - kin.lam * c + kin.A * s) * dt
        Km = _normal_pdf(c[None, :], nxt[:, None], q) * h
        kern.append(Km)
        escape.append(np.clip(1.0 - Km.sum(axis=1), 0.0, None))
    xbar = gene.exogenous[:-1] if gene.exogenous is not None else None
    logw = np.broadcast_to(log_transition_weights(sw, xbar, dt), (K, 2, 2))
    W = np.exp(logw)

    emis = np.ones((K + 1, gspec.n_bins))
    so2 = unit_dm.sigma_obs**2
    for k, y in zip(gene.obs_idx.tolist(), gene.obs_y.tolist()):
        emis[k] = _normal_pdf(y, c, so2)

    prior0 = _normal_pdf(c, gene.x0, gene.x0_var) * h
    if 1.0 - prior0.sum() > max_escape:
        raise GridCoverageError(f"initial protein law escapes the grid by {1 - prior0.sum():.3g}")
    alpha = np.empty((K + 1, 2, gspec.n_bins))
    scale = np.empty(K + 1)
    a = np.stack([(1 - gene.p_on0) * prior0, gene.p_on0 * prior0]) * emis[0]
    scale[0] = a.sum()
    alpha[0] = a / scale[0]
    for k in range(K):
        prev = alpha[k]
        lost = float(prev[0] @ escape[0] + prev[1] @ escape[1])
        if lost > max_escape:
            raise GridCoverageError(
                f"{lost:.3g} of the probability mass leaves [{gspec.x_min:.4g}, {gspec.x_max:.4g}] at step {k}"
            )
        moved = np.stack([prev[0] @ kern[0], prev[1] @ kern[1]])
        a = (W[k].T @ moved) * emis[k + 1]
        scale[k + 1] = a.sum()
        alpha[k + 1] = a / scale[k + 1]

    beta = np.empty_like(alpha)
    beta[K] = 1.0
    for k in range(K - 1, -1, -1):
        nb = beta[k + 1] * emis[k + 1]
        mixed = W[k] @ nb
        beta[k] = np.stack([kern[0] @ mixed[0], kern[1] @ mixed[1]]) / scale[k + 1]
    joint = alpha * beta
    joint /= joint.sum(axis=(1, 2), keepdims=True)
    px = joint.sum(axis=1)
    mean = px @ c
    var = px @ c**2 - mean**2
    return UnitPosterior(joint[:, 1].sum(axis=1), mean, var, float(np.sum(np.log(scale))), c, joint)


def exact_unit_posterior(
    unit: GeneUnit,
    data: ObservationSet,
    grid: TimeGrid,
    gspec: GridSpec | None = None,
    regulator_path=None,
) -> UnitPosterior:
    """Exact posterior and log Z of one gene with a pinned regulator path,
    under the joint (promoter, binned protein) discretisation."""
    dm = discretize_unit(
        unit, grid, data.sigma_obs, data.times(unit.name), data.values(unit.name), regulator_path
    )
    return grid_unit_posterior(dm, gspec)


# ---------------------------------------------------------------------------
# Gibbs sampler on the full discretised network


@dataclass
class GibbsResult:
    m: np.ndarray
    m_se: np.ndarray
    mean: np.ndarray
    mean_se: np.ndarray
    var: np.ndarray
    acceptance: np.ndarray
    warnings: list


def _ffbs(log_init, log_pot, rng):
    """Forward-filter backward-sample one binary path."""
    K = log_pot.shape[0]
    alpha = np.empty((K + 1, 2))
    alpha[0] = log_init
    pot = log_pot.tolist()
    a0, a1 = float(log_init[0]), float(log_init[1])
    for k in range(K):
        (p00, p01), (p10, p11) = pot[k]
        a0, a1 = np.logaddexp(a0 + p00, a1 + p10), np.logaddexp(a0 + p01, a1 + p11)
        alpha[k + 1] = a0, a1
    u = rng.random(K + 1)
    path = np.empty(K + 1, dtype=np.int8)
    lp = alpha[K]
    path[K] = u[K] < 1.0 / (1.0 + math.exp(lp[0] - lp[1]))
    for k in range(K - 1, -1, -1):
        s_next = path[k + 1]
        l0 = alpha[k, 0] + pot[k][0][s_next]
        l1 = alpha[k, 1] + pot[k][1][s_next]
        path[k] = u[k] < 1.0 / (1.0 + math.exp(min(l0 - l1, 700.0)))
    return path


def _regulator_signal(dm, x, j):
    gene = dm.genes[j]
    if gene.n_reg == 0:
        return None
    total = sum(x[r, :-1] for r in gene.regulators)
    if gene.exogenous is not None:
        total = total + gene.exogenous[:-1]
    return total / gene.n_reg


def _downstream_logweight(dm, x, mu, g):
    out = 0.0
    K = dm.grid.n_steps
    for j in dm.downstream[g]:
        lw = log_transition_weights(dm.genes[j].switching, _regulator_signal(dm, x, j), dm.grid.dt)
        out += float(lw[np.arange(K), mu[j, :-1], mu[j, 1:]].sum())
    return out


def gibbs_sample_discrete(dm: DiscreteModel, iters, burn_in, seed, init=None, n_batches=20) -> GibbsResult:
    """Metropolis-within-Gibbs over all promoter and protein paths.

    Promoter paths are drawn exactly by forward-filter backward-sample.  A
    protein path is proposed from its exact Gaussian conditional given its
    own promoter path and observations, and accepted with the ratio of the
    downstream promoter path weights it changes.
    """
    if iters <= burn_in:
        raise ValueError("iters must exceed burn_in")
    rng = np.random.default_rng(seed)
    G, n, K, dt = len(dm.genes), dm.grid.n_nodes, dm.grid.n_steps, dm.grid.dt
    so2 = dm.sigma_obs**2
    if init is None:
        mu = np.array([(rng.random(n) < gene.p_on0).astype(np.int8) for gene in dm.genes])
        x = np.array([np.full(n, gene.x0, dtype=float) for gene in dm.genes])
    else:
        mu = np.array(init[0], dtype=np.int8)
        x = np.array(init[1], dtype=float)

    def gaussian_conditional(g):
        gene = dm.genes[g]
        kin = gene.kinetics
        a = 1 - kin.lam * dt
        q = kin.sigma**2 * dt
        u = (kin.b + kin.A * mu[g, :-1]) * dt
        d = np.zeros(n)
        d[0] += 1 / gene.x0_var
        d[:-1] += a * a / q
        d[1:] += 1 / q
        d[gene.obs_idx] += 1 / so2
        rhs = np.zeros(n)
        rhs[0] += gene.x0 / gene.x0_var
        rhs[1:] += u / q
        rhs[:-1] -= a * u / q
        rhs[gene.obs_idx] += gene.obs_y / so2
        ab = np.zeros((2, n))
        ab[0, 1:] = -a / q
        ab[1] = d
        U = cholesky_banded(ab)
        mean = cho_solve_banded((U, False), rhs)
        return mean + solve_banded((0, 1), U, rng.standard_normal(n))

    n_keep = iters - burn_in
    batch = max(1, n_keep // n_batches)
    n_used = batch * (n_keep // batch)
    bsum_mu = []
    bsum_x = []
    sum_x2 = np.zeros((G, n))
    accepted = np.zeros(G)
    proposed = np.zeros(G)
    acc_mu = np.zeros((G, n))
    acc_x = np.zeros((G, n))
    for it in range(iters):
        for g in dm.order:
            gene = dm.genes[g]
            kin = gene.kinetics
            q = kin.sigma**2 * dt
            # protein path
            prop = gaussian_conditional(g)
            if dm.downstream[g]:
                x_new = x.copy()
                x_new[g] = prop
                log_ratio = _downstream_logweight(dm, x_new, mu, g) - _downstream_logweight(dm, x, mu, g)
                proposed[g] += 1
                if math.log(rng.random()) < log_ratio:
                    x[g] = prop
                    accepted[g] += 1
            else:
                x[g] = prop
            # promoter path
            lw = np.broadcast_to(
                log_transition_weights(gene.switching, _regulator_signal(dm, x, g), dt), (K, 2, 2)
            ).copy()
            resid = x[g, 1:] - x[g, :-1] - (kin.b - kin.lam * x[g, :-1]) * dt
            lw[:, 1, :] += ((kin.A * dt * resid - 0.5 * (kin.A * dt) ** 2) / q)[:, None]
            with np.errstate(divide="ignore"):
                log_init = np.log([1 - gene.p_on0, gene.p_on0])
            mu[g] = _ffbs(log_init, lw, rng)
        if it >= burn_in and it - burn_in < n_used:
            acc_mu += mu
            acc_x += x
            sum_x2 += x * x
            if (it - burn_in + 1) % batch == 0:
                bsum_mu.append(acc_mu / batch)
                bsum_x.append(acc_x / batch)
                acc_mu = np.zeros((G, n))
                acc_x = np.zeros((G, n))
    bm = np.array(bsum_mu)
    bx = np.array(bsum_x)
    nb = bm.shape[0]
    m = bm.mean(axis=0)
    mean = bx.mean(axis=0)
    var = sum_x2 / n_used - mean**2
    rate = np.where(proposed > 0, accepted / np.maximum(proposed, 1), 1.0)
    notes = []
    for g in range(G):
        if proposed[g] and rate[g] < 0.05:
            msg = f"low protein-path acceptance {rate[g]:.3f} for gene {dm.genes[g].name}; chain may mix poorly"
            notes.append(msg)
            warnings.warn(msg, RuntimeWarning, stacklevel=2)
    return GibbsResult(
        m, bm.std(axis=0, ddof=1) / math.sqrt(nb), mean, bx.std(axis=0, ddof=1) / math.sqrt(nb), var, rate, notes
    )


def gibbs_sample_posterior(model: FflModel, data: ObservationSet, grid: TimeGrid, iters, burn_in, seed, init=None) -> GibbsResult:
    return gibbs_sample_discrete(discretize(model, data, grid), iters, burn_in, seed, init)


# ---------------------------------------------------------------------------
# comparison of promoter marginal curves


@dataclass
class MarginalComparison:
    mean_abs_diff: float
    max_abs_diff: float
    transition_time_diffs: list
    unmatched: int


def half_crossings(t, m):
    """Times at which ``m`` crosses 0.5 (linear interpolation) and their
    directions (+1 upward, -1 downward)."""
    t = np.asarray(t, dtype=float)
    m = np.asarray(m, dtype=float)
    above = m >= 0.5
    idx = np.nonzero(above[1:] != above[:-1])[0]
    times = t[idx] + (0.5 - m[idx]) / (m[idx + 1] - m[idx]) * (t[idx + 1] - t[idx])
    return times, np.where(above[idx + 1], 1, -1)


def compare_marginals(a, b) -> MarginalComparison:
    """Compare two promoter-marginal curves given as ``(times, values)``.

    0.5-crossings are paired greedily in time order: each crossing of ``a``
    takes the nearest still-unpaired crossing of ``b`` in the same direction.
    """
    ta, ma = (np.asarray(v, dtype=float) for v in a)
    tb, mb = (np.asarray(v, dtype=float) for v in b)
    if ta.shape != tb.shape or not np.allclose(ta, tb, rtol=0, atol=1e-9):
        raise ValueError("marginal curves are on different grids")
    if ma.shape != ta.shape or mb.shape != tb.shape:
        raise ValueError("values and times differ in length")
    diff = np.abs(ma - mb)
    ca, da = half_crossings(ta, ma)
    cb, db = half_crossings(tb, mb)
    free = list(range(len(cb)))
    diffs = []
    for time, direction in zip(ca, da):
        options = [i for i in free if db[i] == direction]
        if not options:
            continue
        best = min(options, key=lambda i: abs(cb[i] - time))
        diffs.append(float(abs(cb[best] - time)))
        free.remove(best)
    unmatched = (len(ca) - len(diffs)) + len(free)
    return MarginalComparison(float(diff.mean()), float(diff.max()), diffs, unmatched)
