"""Variational EM for the per-gene kinetic parameters (b, lam, A, sigma).

The M-step minimises the expected negative log Euler-increment density

    sum_k E[(dx_k - (b - lam x_k + A mu_k) dt)^2] / (2 sigma^2 dt) + K/2 log sigma^2

under the factorised posterior.  That is a weighted least-squares fit of
the increments on the regressors (1, -x_k, mu_k) followed by a closed-form
sigma update.  The switching parameters kp, ke, km are never learned.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import InternalConsistencyError, RankDeficiencyError, ValidationError
from .inference import DiscreteModel, VariationalState, discretize, free_energy, infer, monotone_slack
from .model import FflModel, GeneKinetics, validate_model
from .simulate import ObservationSet, TimeGrid

PARAMS = ("b", "lam", "A")
REGRESSORS = ("intercept", "-x", "mu")
MIN_RATE = 1e-6


@dataclass(frozen=True)
class SufficientStats:
    """Posterior sums over steps k = 0..K-1 of one gene.

    ``sx1x0`` is sum E[x_{k+1} x_k]; ``sd``/``sdd`` are sums of E[dx_k] and
    E[dx_k^2]; ``smd`` is sum E[mu_k] E[dx_k].
    """

    n: int
    dt: float
    sx: float
    sxx: float
    sm: float
    sxm: float
    sx1x0: float
    sd: float
    sdd: float
    smd: float

    @property
    def sxd(self):
        return self.sx1x0 - self.sxx

    def gram(self):
        """E[phi phi^T] summed over steps, phi = (1, -x, mu)."""
        return np.array(
            [
                [self.n, -self.sx, self.sm],
                [-self.sx, self.sxx, -self.sxm],
                [self.sm, -self.sxm, self.sm],
            ]
        )

    def target(self):
        """Sum of E[phi dx]."""
        return np.array([self.sd, -self.sxd, self.smd])

    def residual(self, theta):
        """Sum of E[(dx - dt phi . theta)^2]."""
        theta = np.asarray(theta, dtype=float)
        return self.sdd - 2 * self.dt * theta @ self.target() + self.dt**2 * theta @ self.gram() @ theta


@dataclass(frozen=True)
class LearnOptions:
    max_em_iters: int = 50
    param_tol: float = 1e-4
    fix_sigma: bool = False
    share_sigma: bool = False
    constraint_mode: str = "project"
    fixed: frozenset = frozenset()
    activation: bool = False
    anneal: tuple = ()
    sweeps_per_iter: int = 200
    sweep_tol: float = 1e-8

    def __post_init__(self):
        if self.max_em_iters < 1:
            raise ValueError("max_em_iters must be >= 1")
        if any(not c >= 1 for c in self.anneal):
            raise ValueError("anneal factors must be >= 1")
        if self.constraint_mode not in ("project", "barrier"):
            raise ValueError("constraint_mode must be 'project' or 'barrier'")
        unknown = set(self.fixed) - set(PARAMS)
        if unknown:
            raise ValueError(f"unknown fixed parameters {sorted(unknown)}")


def sufficient_statistics(state: VariationalState, dm: DiscreteModel, g) -> SufficientStats:
    pm = state.proteins[g]
    p = state.promoters[g].m[:-1]
    m0, m1 = pm.mean[:-1], pm.mean[1:]
    v0, v1 = pm.var[:-1], pm.var[1:]
    c = pm.lag
    d = m1 - m0
    ed = d
    edd = d * d + v0 + v1 - 2 * c
    return SufficientStats(
        n=dm.grid.n_steps,
        dt=dm.grid.dt,
        sx=float(m0.sum()),
        sxx=float((v0 + m0 * m0).sum()),
        sm=float(p.sum()),
        sxm=float((m0 * p).sum()),
        sx1x0=float((c + m0 * m1).sum()),
        sd=float(ed.sum()),
        sdd=float(edd.sum()),
        smd=float((p * ed).sum()),
    )


def _objective(stats, theta):
    return 0.5 * stats.residual(theta)


def _constraints(activation=False):
    # rows a with a . theta >= MIN_RATE: b, lam, A + b (and A for activators)
    rows = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [1.0, 0.0, 1.0]]
    if activation:
        rows.append([0.0, 0.0, 1.0])
    return np.array(rows)


def _solve_equality(G, h, free, theta_fixed, active, C):
    """Minimise 0.5 t'Gt - h't over free coordinates with active constraint
    rows of ``C`` held at equality (KKT system)."""
    C = C[list(active)]
    Cf = C[:, free]
    rhs_c = MIN_RATE - C[:, [i for i in range(3) if i not in free]] @ theta_fixed[[i for i in range(3) if i not in free]]
    Gf = G[np.ix_(free, free)]
    fixed_idx = [i for i in range(3) if i not in free]
    hf = h[free] - G[np.ix_(free, fixed_idx)] @ theta_fixed[fixed_idx]
    nf, na = len(free), len(active)
    kkt = np.zeros((nf + na, nf + na))
    kkt[:nf, :nf] = Gf
    kkt[:nf, nf:] = -Cf.T
    kkt[nf:, :nf] = Cf
    sol = np.linalg.solve(kkt, np.concatenate([hf, rhs_c]))
    theta = theta_fixed.copy()
    theta[free] = sol[:nf]
    return theta, sol[nf:]


def _check_rank(G, free):
    Gf = G[np.ix_(free, free)]
    scale = np.sqrt(np.clip(np.diag(Gf), 0, None))
    for i, f in enumerate(free):
        if scale[i] <= 1e-12 * max(1.0, scale.max()):
            raise RankDeficiencyError(REGRESSORS[f])
    corr = Gf / np.outer(scale, scale)
    if np.linalg.cond(corr) > 1e12:
        eigval, eigvec = np.linalg.eigh(corr)
        worst = free[int(np.argmax(np.abs(eigvec[:, 0])))]
        raise RankDeficiencyError(REGRESSORS[worst])


def _project_fit(G, h, free, theta_fixed, C):
    """Exact constrained least squares by enumerating active sets."""
    best, best_val = None, math.inf
    for r in range(0, len(free) + 1):
        for active in itertools.combinations(range(len(C)), r):
            try:
                theta, mult = _solve_equality(G, h, free, theta_fixed, active, C)
            except np.linalg.LinAlgError:
                continue
            if np.any(C @ theta < MIN_RATE * (1 - 1e-9) - 1e-15):
                continue
            if np.any(mult < -1e-9 * max(1.0, np.abs(h).max())):
                continue
            val = 0.5 * theta @ G @ theta - h @ theta
            if val < best_val:
                best, best_val = theta, val
    if best is None:
        raise RankDeficiencyError("constraints", "no feasible kinetic fit found")
    return best


def _barrier_fit(G, h, free, theta_start, C):
    """Log-barrier interior-point minimisation with damped Newton steps."""
    theta = theta_start.copy()
    slack = C @ theta - MIN_RATE
    if np.any(slack <= 0):
        theta[0] = max(theta[0], 10 * MIN_RATE)
        theta[1] = max(theta[1], 10 * MIN_RATE)
        theta[2] = max(theta[2], 10 * MIN_RATE - theta[0], 10 * MIN_RATE if len(C) > 3 else -math.inf)
    mu = 1e-3 * max(1.0, float(np.abs(h).max()))
    f = list(free)

    def phi(t, mu):
        s = C @ t - MIN_RATE
        if np.any(s <= 0):
            return math.inf
        return 0.5 * t @ G @ t - h @ t - mu * np.log(s).sum()

    for _ in range(40):
        for _ in range(50):
            s = C @ theta - MIN_RATE
            grad = (G @ theta - h - mu * C.T @ (1 / s))[f]
            hess = (G + mu * C.T @ np.diag(1 / s**2) @ C)[np.ix_(f, f)]
            step = np.zeros(3)
            step[f] = np.linalg.solve(hess, -grad)
            t, cur = 1.0, phi(theta, mu)
            while phi(theta + t * step, mu) > cur + 1e-4 * t * grad @ step[f] and t > 1e-12:
                t *= 0.5
            theta = theta + t * step
            if abs(grad @ step[f]) < 1e-14 * max(1.0, abs(cur)):
                break
        mu *= 0.2
        if mu < 1e-14:
            break
    return theta


def update_kinetics(stats: SufficientStats, current: GeneKinetics, opts: LearnOptions) -> GeneKinetics:
    """Minimiser of the expected increment energy over (b, lam, A), then
    sigma in closed form from the mean squared residual (unless fixed)."""
    G = stats.dt * stats.gram()
    h = stats.target()
    theta_cur = np.array([current.b, current.lam, current.A], dtype=float)
    free = [i for i, name in enumerate(PARAMS) if name not in opts.fixed]
    _check_rank(G, free)
    C = _constraints(opts.activation)
    if opts.constraint_mode == "project":
        theta = _project_fit(G, h, free, theta_cur, C)
    else:
        theta = _barrier_fit(G, h, free, theta_cur, C)
        if stats.residual(theta) > stats.residual(theta_cur):
            theta = theta_cur
    sigma = current.sigma
    if not opts.fix_sigma:
        sigma = math.sqrt(max(stats.residual(theta), 0.0) / (stats.n * stats.dt))
    return GeneKinetics(float(theta[0]), float(theta[1]), float(theta[2]), float(sigma))


def m_step(state: VariationalState, dm: DiscreteModel, opts: LearnOptions) -> list:
    """New kinetics for every gene of ``dm`` (aligned with ``dm.genes``)."""
    new = []
    stats = []
    for g, gene in enumerate(dm.genes):
        st = sufficient_statistics(state, dm, g)
        stats.append(st)
        new.append(update_kinetics(st, gene.kinetics, opts))
    if opts.share_sigma and not opts.fix_sigma:
        total = sum(st.residual([k.b, k.lam, k.A]) for st, k in zip(stats, new))
        n = sum(st.n * st.dt for st in stats)
        sigma = math.sqrt(total / n)
        new = [replace(k, sigma=sigma) for k in new]
    return new


@dataclass
class DiscreteFit:
    dm: DiscreteModel
    state: VariationalState
    history: list
    f_trace: list
    stage_traces: list
    converged: bool


@dataclass
class LearnResult:
    model: FflModel
    state: VariationalState
    history: list
    f_trace: list
    stage_traces: list
    converged: bool


def _em(dm: DiscreteModel, opts: LearnOptions, state):
    state = infer(dm, opts.sweeps_per_iter, opts.sweep_tol, state)
    f_trace = [state.free_energy]
    history = [[g.kinetics for g in dm.genes]]
    converged = False
    for _ in range(opts.max_em_iters):
        kin_new = m_step(state, dm, opts)
        dm_new = dm.with_kinetics(kin_new)
        F_m = free_energy(state, dm_new)
        _check_step(f_trace[-1], F_m, "M-step")
        f_trace.append(F_m)
        state = state.copy()
        state.free_energy = F_m
        state = infer(dm_new, opts.sweeps_per_iter, opts.sweep_tol, state)
        _check_step(F_m, state.free_energy, "E-step")
        f_trace.append(state.free_energy)
        change = max(
            abs(getattr(new, f) - getattr(old.kinetics, f)) / max(abs(getattr(old.kinetics, f)), 1e-12)
            for new, old in zip(kin_new, dm.genes)
            for f in ("b", "lam", "A", "sigma")
            if getattr(old.kinetics, f) != 0 or getattr(new, f) != 0
        )
        dm = dm_new
        history.append(kin_new)
        if change < opts.param_tol:
            converged = True
            break
    return dm, state, history, f_trace, converged


def learn_discrete(dm: DiscreteModel, opts: LearnOptions = LearnOptions(), init=None) -> DiscreteFit:
    """Alternate inference sweeps and M-steps on a discretised model.

    Each factor ``c`` in ``opts.anneal`` first runs a warm-up EM with every
    sigma held at ``c`` times its starting value, which softens the
    promoter/protein coupling and steers the fit away from poor local
    optima.  The final stage runs at the starting sigmas.  F is
    non-increasing within every stage; ``f_trace`` is the final stage's
    trace, holding F after each E- and M-step.
    """
    sigmas = [g.kinetics.sigma for g in dm.genes]
    state, stage_traces, history = init, [], []
    for c in opts.anneal:
        dm = dm.with_kinetics([replace(g.kinetics, sigma=c * s) for g, s in zip(dm.genes, sigmas)])
        dm, state, hist, trace, _ = _em(dm, replace(opts, fix_sigma=True), state)
        history += hist
        stage_traces.append(trace)
    if opts.anneal:
        dm = dm.with_kinetics([replace(g.kinetics, sigma=s) for g, s in zip(dm.genes, sigmas)])
        state = state.copy()
        state.free_energy = free_energy(state, dm)
    dm, state, hist, trace, converged = _em(dm, opts, state)
    history += hist
    stage_traces.append(trace)
    return DiscreteFit(dm, state, history, trace, stage_traces, converged)


def _check_step(F_old, F_new, what):
    if F_new > F_old + monotone_slack(F_old):
        raise InternalConsistencyError(f"free energy increased in {what}: {F_old!r} -> {F_new!r}")


def learn(model0: FflModel, data: ObservationSet, grid: TimeGrid, opts: LearnOptions = LearnOptions()) -> LearnResult:
    """Fit b, lam, A (and sigma unless fixed) of all genes by variational EM
    starting from ``model0``; initial conditions are frozen at their
    ``model0`` values so the prior over x_0 does not move with the fit."""
    report = validate_model(model0)
    if report:
        raise ValidationError(report)
    model0 = model0.resolved()
    dm = discretize(model0, data, grid)
    fit = learn_discrete(dm, opts)
    fitted = model0.with_kinetics({g.name: g.kinetics for g in fit.dm.genes})
    return LearnResult(fitted, fit.state, fit.history, fit.f_trace, fit.stage_traces, fit.converged)
