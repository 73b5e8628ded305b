"""Mean-field variational smoothing of promoter and protein paths.

The continuous-time model is discretised on a fixed grid.  Promoters become
binary chains with path log-weights ``log(rate*dt)`` per jump and
``-rate*dt`` per stay; proteins become linear-Gaussian chains with Euler
increments.  The posterior is approximated by a product over genes of a
binary Markov chain and a Gaussian Markov chain, and the free energy

    F(q) = E_q[log q - log p(x, mu, y)]

is minimised by coordinate descent, one chain at a time.  Expectations of
``exp(ke * x)`` under Gaussian marginals use the log-normal moment identity,
so F and all its gradients are closed form.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import logsumexp, xlogy

from .errors import ConvergenceError, InternalConsistencyError, ValidationError
from .model import FflModel, GeneKinetics, GeneUnit, SwitchingParams, steady_state_on_prob, topological_order, validate_model
from .simulate import ObservationSet, TimeGrid

LOG_2PI = math.log(2 * math.pi)


def monotone_slack(F):
    """Allowed increase of F per update: 1e-8 plus float64 round-off of |F|."""
    return 1e-8 + 1e-12 * abs(F)


@dataclass
class DiscreteGene:
    name: str
    kinetics: GeneKinetics
    switching: SwitchingParams
    regulators: tuple
    exogenous: np.ndarray | None
    x0: float
    x0_var: float
    p_on0: float
    obs_idx: np.ndarray
    obs_y: np.ndarray

    @property
    def n_reg(self):
        return len(self.regulators) + (self.exogenous is not None)


@dataclass
class DiscreteModel:
    """Grid-discretised joint model of promoter chains, protein chains and
    Gaussian emissions attached to grid nodes."""

    grid: TimeGrid
    genes: list
    sigma_obs: float

    def __post_init__(self):
        n = len(self.genes)
        self.downstream = [[] for _ in range(n)]
        for j, gene in enumerate(self.genes):
            for r in gene.regulators:
                self.downstream[r].append(j)
        self.order = _topo_indices(self.genes)

    @property
    def names(self):
        return tuple(g.name for g in self.genes)

    def index(self, name):
        return self.names.index(name)

    def with_kinetics(self, kinetics) -> "DiscreteModel":
        """Copy with new kinetics, given as a list aligned with ``genes``."""
        genes = [replace(g, kinetics=k) for g, k in zip(self.genes, kinetics)]
        return DiscreteModel(self.grid, genes, self.sigma_obs)


def _topo_indices(genes):
    order, done = [], set()
    pending = list(range(len(genes)))
    while pending:
        progressed = False
        for g in list(pending):
            if all(r in done for r in genes[g].regulators):
                order.append(g)
                done.add(g)
                pending.remove(g)
                progressed = True
        if not progressed:
            raise ValidationError("regulator graph has a cycle")
    return order


def _attach(grid: TimeGrid, times, values, name):
    times = np.asarray(times, dtype=float)
    idx = grid.node_index(times) if times.size else np.empty(0, dtype=int)
    if np.unique(idx).size != idx.size:
        raise ValueError(f"two observations of gene {name} attach to the same grid node")
    return idx, np.asarray(values, dtype=float)


def discretize(model: FflModel, data: ObservationSet, grid: TimeGrid) -> DiscreteModel:
    report = validate_model(model)
    if report:
        raise ValidationError(report)
    model = model.resolved()
    names = topological_order(model)
    genes = []
    for name in names:
        u = model.genes[name]
        idx, y = _attach(grid, data.times(name), data.values(name), name)
        genes.append(
            DiscreteGene(
                name, u.kinetics, u.switching, tuple(names.index(r) for r in u.regulators),
                None, u.x0, u.x0_var, u.p_on0, idx, y,
            )
        )
    _check_initials(genes)
    return DiscreteModel(grid, genes, model.sigma_obs)


def discretize_unit(unit: GeneUnit, grid: TimeGrid, sigma_obs, obs_times=(), obs_values=(), regulator_path=None):
    """Single gene with a known regulator path (or none)."""
    exo = None if regulator_path is None else np.asarray(regulator_path, dtype=float)
    if exo is not None and exo.shape != (grid.n_nodes,):
        raise ValueError("regulator_path must have one value per grid node")
    k = unit.kinetics
    x0 = k.b / k.lam if unit.x0 is None else unit.x0
    v0 = k.sigma**2 / (2 * k.lam) if unit.x0_var is None else unit.x0_var
    if unit.p_on0 is None:
        p0 = steady_state_on_prob(unit.switching, exo[0] if exo is not None else 0.0)
    else:
        p0 = unit.p_on0
    idx, y = _attach(grid, obs_times, obs_values, unit.name)
    genes = [DiscreteGene(unit.name, unit.kinetics, unit.switching, (), exo, x0, v0, p0, idx, y)]
    _check_initials(genes)
    return DiscreteModel(grid, genes, sigma_obs)


def _check_initials(genes):
    for g in genes:
        if not g.x0_var > 0:
            raise ValidationError(f"x0_var must be > 0 for inference (gene {g.name})")


@dataclass
class PromoterMarginals:
    m: np.ndarray
    xi: np.ndarray

    def check(self, atol=1e-10):
        if np.any(self.m < -atol) or np.any(self.m > 1 + atol):
            raise ValueError("promoter marginals outside [0, 1]")
        p = np.stack([1 - self.m, self.m], axis=1)
        if not (np.allclose(self.xi.sum(axis=2), p[:-1], atol=atol) and np.allclose(self.xi.sum(axis=1), p[1:], atol=atol)):
            raise ValueError("pairwise promoter tables inconsistent with node marginals")


@dataclass
class ProteinMarginals:
    mean: np.ndarray
    var: np.ndarray
    lag: np.ndarray

    def check(self):
        if np.any(self.var <= 0):
            raise ValueError("protein variances must be positive")
        if np.any(self.lag**2 >= self.var[:-1] * self.var[1:]):
            raise ValueError("lag-one covariance violates |c| < sqrt(v_k v_k+1)")


@dataclass
class VariationalState:
    promoters: list
    proteins: list
    sites: list
    free_energy: float = float("nan")
    trace: list = field(default_factory=list)
    update_trace: list = field(default_factory=list)
    converged: bool = False
    n_sweeps: int = 0

    def copy(self):
        return replace(
            self,
            promoters=list(self.promoters),
            proteins=list(self.proteins),
            sites=list(self.sites),
            trace=list(self.trace),
            update_trace=list(self.update_trace),
        )


# ---------------------------------------------------------------------------
# chain primitives


def chain_moments(diag, off, rhs):
    """Mean, marginal variances, lag-one covariances and log-determinant of a
    Gaussian with symmetric tridiagonal precision ``(diag, off)`` and
    information vector ``rhs``."""
    d = diag.tolist()
    e = off.tolist()
    r = rhs.tolist()
    n = len(d)
    delta = [0.0] * n
    z = [0.0] * n
    delta[0] = d[0]
    z[0] = r[0]
    for k in range(1, n):
        if delta[k - 1] <= 0:
            raise np.linalg.LinAlgError("precision matrix is not positive definite")
        f = e[k - 1] / delta[k - 1]
        delta[k] = d[k] - e[k - 1] * f
        z[k] = r[k] - f * z[k - 1]
    if delta[-1] <= 0:
        raise np.linalg.LinAlgError("precision matrix is not positive definite")
    mean = [0.0] * n
    var = [0.0] * n
    lag = [0.0] * (n - 1)
    mean[-1] = z[-1] / delta[-1]
    var[-1] = 1.0 / delta[-1]
    for k in range(n - 2, -1, -1):
        f = e[k] / delta[k]
        mean[k] = z[k] / delta[k] - f * mean[k + 1]
        var[k] = 1.0 / delta[k] + f * f * var[k + 1]
        lag[k] = -f * var[k + 1]
    logdet = float(np.sum(np.log(delta)))
    return np.array(mean), np.array(var), np.array(lag), logdet


def binary_chain_posterior(log_init, log_pot):
    """Node marginals ``q(mu_k=1)``, pairwise tables and log-normaliser of
    the binary chain ``exp(log_init[mu_0] + sum_k log_pot[k, mu_k, mu_k+1])``."""
    K = log_pot.shape[0]
    pot = log_pot.reshape(K, 4).tolist()
    a0, a1 = float(log_init[0]), float(log_init[1])
    alpha = np.empty((K + 1, 2))
    alpha[0] = a0, a1
    for k in range(K):
        p00, p01, p10, p11 = pot[k]
        a0, a1 = _lae(a0 + p00, a1 + p10), _lae(a0 + p01, a1 + p11)
        alpha[k + 1] = a0, a1
    beta = np.empty((K + 1, 2))
    beta[K] = 0.0
    b0 = b1 = 0.0
    for k in range(K - 1, -1, -1):
        p00, p01, p10, p11 = pot[k]
        b0, b1 = _lae(p00 + b0, p01 + b1), _lae(p10 + b0, p11 + b1)
        beta[k] = b0, b1
    log_z = _lae(alpha[K, 0], alpha[K, 1])
    with np.errstate(invalid="ignore"):
        log_xi = alpha[:-1, :, None] + log_pot + beta[1:, None, :]
    xi = np.exp(log_xi - logsumexp(log_xi, axis=(1, 2), keepdims=True))
    xi = np.nan_to_num(xi)
    m = np.empty(K + 1)
    m[:-1] = xi[:, 1, :].sum(axis=1)
    m[-1] = xi[-1, :, 1].sum()
    return np.clip(m, 0.0, 1.0), xi, log_z


def _lae(a, b):
    if a == -math.inf and b == -math.inf:
        return -math.inf
    if a > b:
        return a + math.log1p(math.exp(b - a))
    return b + math.log1p(math.exp(a - b))


# ---------------------------------------------------------------------------
# free energy


def regulator_moments(dm: DiscreteModel, state: VariationalState, j):
    """Mean and variance of gene j's averaged regulator signal at nodes
    ``0..K-1``; ``None`` for an unregulated promoter."""
    gene = dm.genes[j]
    n = gene.n_reg
    if n == 0:
        return None
    K = dm.grid.n_steps
    mean = np.zeros(K)
    var = np.zeros(K)
    for r in gene.regulators:
        mean += state.proteins[r].mean[:-1]
        var += state.proteins[r].var[:-1]
    if gene.exogenous is not None:
        mean += gene.exogenous[:-1]
    return mean / n, var / n**2


def expected_log_weights(dm: DiscreteModel, state: VariationalState, j):
    """E_q[log w_k(s, s')] of gene j's promoter transitions, shape (K, 2, 2)."""
    sw = dm.genes[j].switching
    dt = dm.grid.dt
    K = dm.grid.n_steps
    out = np.empty((K, 2, 2))
    mom = regulator_moments(dm, state, j)
    if mom is None:
        out[:, 0, 1] = math.log(sw.kp * dt)
        out[:, 0, 0] = -sw.kp * dt
    else:
        mbar, vbar = mom
        out[:, 0, 1] = math.log(sw.kp * dt) + sw.ke * mbar
        out[:, 0, 0] = -sw.kp * dt * np.exp(sw.ke * mbar + 0.5 * sw.ke**2 * vbar)
    out[:, 1, 0] = math.log(sw.km * dt)
    out[:, 1, 1] = -sw.km * dt
    return out


def _log_init(p):
    with np.errstate(divide="ignore"):
        return np.log(np.array([1.0 - p, p]))


def _drift_input(gene: DiscreteGene, m_prom, dt):
    """Expected Euler input ``(b + A E[mu_k]) dt`` for k < K."""
    k = gene.kinetics
    return (k.b + k.A * m_prom[:-1]) * dt


def gaussian_chain_terms(dm: DiscreteModel, state: VariationalState, g):
    """Tridiagonal precision ``(diag, off)`` and information vector of the
    Gaussian part of gene g's protein factor (initial prior, increments given
    the current promoter marginals, emissions)."""
    gene = dm.genes[g]
    kin = gene.kinetics
    dt = dm.grid.dt
    n = dm.grid.n_nodes
    a = 1.0 - kin.lam * dt
    q = kin.sigma**2 * dt
    so2 = dm.sigma_obs**2
    u = _drift_input(gene, state.promoters[g].m, dt)
    diag = np.zeros(n)
    diag[0] += 1.0 / gene.x0_var
    diag[:-1] += a * a / q
    diag[1:] += 1.0 / q
    diag[gene.obs_idx] += 1.0 / so2
    off = np.full(n - 1, -a / q)
    rhs = np.zeros(n)
    rhs[0] += gene.x0 / gene.x0_var
    rhs[1:] += u / q
    rhs[:-1] -= a * u / q
    rhs[gene.obs_idx] += gene.obs_y / so2
    return diag, off, rhs


def _gaussian_entropy(pm: ProteinMarginals):
    v, c = pm.var, pm.lag
    n = v.size
    if n == 1:
        return 0.5 * (math.log(v[0]) + 1 + LOG_2PI)
    det = v[:-1] * v[1:] - c * c
    if np.any(det <= 0) or np.any(v <= 0):
        raise ValueError("invalid Gaussian chain marginals")
    return 0.5 * (np.sum(np.log(det)) - np.sum(np.log(v[1:-1]))) + 0.5 * n * (1 + LOG_2PI)


def _binary_neg_entropy(pr: PromoterMarginals):
    p = pr.m[1:-1]
    return float(np.sum(xlogy(pr.xi, pr.xi)) - np.sum(xlogy(p, p) + xlogy(1 - p, 1 - p)))


def promoter_energy(dm, state, g):
    """Terms of F owned by gene g's promoter: negative entropy and expected
    negative log prior (initial state and transitions)."""
    gene = dm.genes[g]
    pr = state.promoters[g]
    p0 = pr.m[0]
    init = -(xlogy(1 - p0, 1 - gene.p_on0) + xlogy(p0, gene.p_on0))
    trans = -np.sum(pr.xi * expected_log_weights(dm, state, g))
    return _binary_neg_entropy(pr) + float(init) + float(trans)


def protein_energy(dm, state, g):
    """Terms of F owned by gene g's protein: negative entropy, initial
    prior, Euler increments and emissions."""
    gene = dm.genes[g]
    kin = gene.kinetics
    pm = state.proteins[g]
    p = state.promoters[g].m
    dt = dm.grid.dt
    a = 1.0 - kin.lam * dt
    q = kin.sigma**2 * dt
    m, v, c = pm.mean, pm.var, pm.lag
    init = 0.5 * math.log(2 * math.pi * gene.x0_var) + ((m[0] - gene.x0) ** 2 + v[0]) / (2 * gene.x0_var)
    u = _drift_input(gene, p, dt)
    resid = m[1:] - a * m[:-1] - u
    sq = resid**2 + v[1:] + a * a * v[:-1] - 2 * a * c + (kin.A * dt) ** 2 * p[:-1] * (1 - p[:-1])
    incr = 0.5 * dm.grid.n_steps * math.log(2 * math.pi * q) + np.sum(sq) / (2 * q)
    so2 = dm.sigma_obs**2
    idx = gene.obs_idx
    emis = 0.5 * idx.size * math.log(2 * math.pi * so2) + np.sum((gene.obs_y - m[idx]) ** 2 + v[idx]) / (2 * so2)
    return -_gaussian_entropy(pm) + init + float(incr) + float(emis)


def free_energy(state: VariationalState, dm: DiscreteModel) -> float:
    """Closed-form F(q) in nats; an upper bound on -log Z."""
    for pr, pm in zip(state.promoters, state.proteins):
        pr.check(atol=1e-8)
        pm.check()
    total = 0.0
    for g in range(len(dm.genes)):
        total += promoter_energy(dm, state, g) + protein_energy(dm, state, g)
    return float(total)


# ---------------------------------------------------------------------------
# coupling of a protein chain to downstream promoters


def _downstream_terms(dm, state, g):
    """For each promoter regulated by gene g, the per-node coefficients of
    h_k(m, v) = -lin_k * m + amp_k * exp(c1 * m + c2 * v)
    (nodes 0..K-1), with everything not involving gene g folded into amp_k."""
    terms = []
    pm = state.proteins[g]
    for j in dm.downstream[g]:
        sw = dm.genes[j].switching
        n = dm.genes[j].n_reg
        mbar, vbar = regulator_moments(dm, state, j)
        rest_m = mbar - pm.mean[:-1] / n
        rest_v = vbar - pm.var[:-1] / n**2
        xi = state.promoters[j].xi
        lin = xi[:, 0, 1] * sw.ke / n
        c1 = sw.ke / n
        c2 = 0.5 * (sw.ke / n) ** 2
        amp = xi[:, 0, 0] * sw.kp * dm.grid.dt * np.exp(sw.ke * rest_m + 0.5 * sw.ke**2 * rest_v)
        terms.append((lin, amp, c1, c2))
    return terms


def _downstream_grad(terms, mean, var, n_nodes):
    gm = np.zeros(n_nodes)
    gv = np.zeros(n_nodes)
    for lin, amp, c1, c2 in terms:
        e = amp * np.exp(c1 * mean[:-1] + c2 * var[:-1])
        gm[:-1] += -lin + c1 * e
        gv[:-1] += c2 * e
    return gm, gv


def free_energy_gradient(state: VariationalState, dm: DiscreteModel, g):
    """Analytic dF/d(mean, var, lag) of gene g's protein marginals."""
    pm = state.proteins[g]
    diag, off, rhs = gaussian_chain_terms(dm, state, g)
    m, v, c = pm.mean, pm.var, pm.lag
    Pm = diag * m
    Pm[:-1] += off * m[1:]
    Pm[1:] += off * m[:-1]
    gm_h, gv_h = _downstream_grad(_downstream_terms(dm, state, g), m, v, m.size)
    d_mean = Pm - rhs + gm_h

    n = v.size
    dH_v = np.zeros(n)
    if n == 1:
        dH_v[0] = 0.5 / v[0]
        d_lag = np.zeros(0)
    else:
        det = v[:-1] * v[1:] - c * c
        dH_v[:-1] += 0.5 * v[1:] / det
        dH_v[1:] += 0.5 * v[:-1] / det
        dH_v[1:-1] -= 0.5 / v[1:-1]
        d_lag = off + c / det
    d_var = 0.5 * diag + gv_h - dH_v
    return d_mean, d_var, d_lag


# ---------------------------------------------------------------------------
# coordinate updates


def _with(state, g, promoter=None, protein=None, site=None):
    new = state.copy()
    if promoter is not None:
        new.promoters[g] = promoter
    if protein is not None:
        new.proteins[g] = protein
    if site is not None:
        new.sites[g] = site
    return new


def update_promoter_chain(g, state: VariationalState, dm: DiscreteModel) -> VariationalState:
    """Exact minimiser of F over gene g's promoter chain.

    The optimal factor is a binary Markov chain whose pairwise potentials are
    the expected prior log-weights (under the regulators' Gaussian marginals)
    plus, for mu_k = 1, the drift-matching log-odds of the gene's own Euler
    increments under its Gaussian protein marginals.
    """
    gene = dm.genes[g]
    kin = gene.kinetics
    dt = dm.grid.dt
    pm = state.proteins[g]
    a = 1.0 - kin.lam * dt
    resid = pm.mean[1:] - a * pm.mean[:-1] - kin.b * dt
    log_odds = kin.A * resid / kin.sigma**2 - kin.A**2 * dt / (2 * kin.sigma**2)
    pot = expected_log_weights(dm, state, g)
    pot[:, 1, :] += log_odds[:, None]
    m, xi, _ = binary_chain_posterior(_log_init(gene.p_on0), pot)
    F_cur = _current_F(state, dm)
    cand = _with(state, g, promoter=PromoterMarginals(m, xi))
    cand.free_energy = free_energy(cand, dm)
    return _accept(state, cand, F_cur)


def _current_F(state, dm):
    if not math.isfinite(state.free_energy):
        state.free_energy = free_energy(state, dm)
    return state.free_energy


def update_protein_chain(g, state: VariationalState, dm: DiscreteModel, max_inner=60, inner_tol=1e-13):
    """Minimise F over gene g's Gaussian protein chain.

    Without downstream promoters the factor is linear-Gaussian and one
    tridiagonal solve (a Kalman smoother) is exact.  Otherwise node sites
    are refitted from the expected exponential coupling (Newton step on the
    mean, fixed point on the variances) and the step in site space is halved
    until F decreases.
    """
    diag, off, rhs = gaussian_chain_terms(dm, state, g)
    F_cur = _current_F(state, dm)
    n = diag.size
    if not dm.downstream[g]:
        mean, var, lag, _ = chain_moments(diag, off, rhs)
        cand = _with(state, g, protein=ProteinMarginals(mean, var, lag), site=np.zeros(n))
        cand.free_energy = free_energy(cand, dm)
        return _accept(state, cand, F_cur)

    cur = state
    s_old = state.sites[g]
    pm = state.proteins[g]
    t_old = (diag + s_old) * pm.mean - rhs
    t_old[:-1] += off * pm.mean[1:]
    t_old[1:] += off * pm.mean[:-1]
    for _ in range(max_inner):
        pm = cur.proteins[g]
        gm, gv = _downstream_grad(_downstream_terms(dm, cur, g), pm.mean, pm.var, n)
        s_new = 2.0 * gv
        t_new = -gm + s_new * pm.mean
        eta = 1.0
        accepted = None
        while eta > 1e-8:
            s = s_old + eta * (s_new - s_old)
            t = t_old + eta * (t_new - t_old)
            try:
                mean, var, lag, _ = chain_moments(diag + s, off, rhs + t)
            except np.linalg.LinAlgError:
                eta *= 0.5
                continue
            cand = _with(cur, g, protein=ProteinMarginals(mean, var, lag), site=s)
            cand.free_energy = free_energy(cand, dm)
            if cand.free_energy < cur.free_energy:
                accepted = (cand, s, t)
                break
            eta *= 0.5
        if accepted is None:
            break
        F_prev = cur.free_energy
        cur, s_old, t_old = accepted
        if F_prev - cur.free_energy <= inner_tol * (1.0 + abs(F_prev)):
            break
    else:
        raise ConvergenceError(f"protein update for gene {dm.genes[g].name} did not converge", state=cur)
    return cur


def _accept(old, new, F_old):
    if new.free_energy > F_old + monotone_slack(F_old):
        raise InternalConsistencyError(
            f"free energy increased from {F_old!r} to {new.free_energy!r} in a coordinate update"
        )
    if new.free_energy > F_old:
        return old
    return new


# ---------------------------------------------------------------------------
# driver


def initial_state(dm: DiscreteModel) -> VariationalState:
    """Promoters at the steady-state ON probability for the regulators'
    initial levels; proteins from the Gaussian chain with mu fixed at that
    probability."""
    K = dm.grid.n_steps
    x0 = [g.x0 for g in dm.genes]
    promoters, proteins = [], []
    for gene in dm.genes:
        if gene.n_reg:
            level = np.full(K + 1, sum(x0[r] for r in gene.regulators), dtype=float)
            if gene.exogenous is not None:
                level = level + gene.exogenous
            p = np.asarray(steady_state_on_prob(gene.switching, level / gene.n_reg), dtype=float)
        else:
            p = np.full(K + 1, steady_state_on_prob(gene.switching, 0.0))
        P = np.stack([1 - p, p], axis=1)
        promoters.append(PromoterMarginals(p, P[:-1, :, None] * P[1:, None, :]))
    state = VariationalState(promoters, [None] * len(dm.genes), [np.zeros(K + 1) for _ in dm.genes])
    for g in range(len(dm.genes)):
        mean, var, lag, _ = chain_moments(*gaussian_chain_terms(dm, state, g))
        proteins.append(ProteinMarginals(mean, var, lag))
    state.proteins = proteins
    state.free_energy = free_energy(state, dm)
    return state


@dataclass
class InferenceOptions:
    max_sweeps: int = 200
    tol: float = 1e-8
    init: VariationalState | None = None


def infer(dm: DiscreteModel, max_sweeps=200, tol=1e-8, init=None) -> VariationalState:
    """Coordinate descent on F over all chains, sweeping genes upstream first
    and updating each protein chain before its promoter chain."""
    if init is None:
        state = initial_state(dm)
    else:
        state = init.copy()
        state.free_energy = free_energy(state, dm)
    F = state.free_energy
    state.trace = [F]
    state.update_trace = [F]
    state.converged = False
    for sweep in range(1, max_sweeps + 1):
        for g in dm.order:
            for update in (update_protein_chain, update_promoter_chain):
                new = update(g, state, dm)
                if new.free_energy > state.free_energy + monotone_slack(state.free_energy):
                    raise InternalConsistencyError("free energy trace increased")
                new.update_trace = state.update_trace + [new.free_energy]
                new.trace = state.trace
                state = new
        F_prev, F = F, state.free_energy
        state.trace = state.trace + [F]
        state.n_sweeps = sweep
        if abs(F_prev - F) < tol * (1.0 + abs(F)):
            state.converged = True
            break
    return state


def run_inference(model: FflModel, data: ObservationSet, grid: TimeGrid, opts: InferenceOptions | None = None) -> VariationalState:
    opts = opts or InferenceOptions()
    dm = discretize(model, data, grid)
    return infer(dm, opts.max_sweeps, opts.tol, opts.init)
