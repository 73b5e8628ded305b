"""Forward simulation of the hybrid loop and noisy observation sampling."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import StepSizeError, ValidationError
from .model import FflModel, GeneUnit, topological_order, validate_model


@dataclass(frozen=True)
class TimeGrid:
    t0: float
    t_end: float
    dt: float

    def __post_init__(self):
        span = self.t_end - self.t0
        if not (math.isfinite(span) and span > 0):
            raise ValueError("TimeGrid requires t_end > t0")
        if not (self.dt > 0 and self.dt <= span * (1 + 1e-12)):
            raise ValueError("TimeGrid requires 0 < dt <= t_end - t0")
        ratio = span / self.dt
        if abs(ratio - round(ratio)) > 1e-9 * max(1.0, ratio):
            raise ValueError(f"(t_end - t0)/dt = {ratio} is not an integer")

    @property
    def n_steps(self) -> int:
        return int(round((self.t_end - self.t0) / self.dt))

    @property
    def n_nodes(self) -> int:
        return self.n_steps + 1

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.n_nodes)

    def contains(self, t) -> bool:
        t = np.asarray(t, dtype=float)
        eps = 1e-9 * self.dt
        return bool(np.all((t >= self.t0 - eps) & (t <= self.t_end + eps)))

    def node_index(self, t):
        """Index of the nearest grid node; raises for times outside the span."""
        if not self.contains(t):
            raise ValueError(f"time(s) {t!r} outside grid span [{self.t0}, {self.t_end}]")
        idx = np.rint((np.asarray(t, dtype=float) - self.t0) / self.dt).astype(int)
        return np.clip(idx, 0, self.n_steps)


@dataclass(frozen=True)
class PromoterInput:
    """Master promoter drive: ``stochastic`` telegraph or a ``pinned`` path.

    A pinned path starts in ``initial`` and takes ``new_state`` at each
    ``(switch_time, new_state)`` pair.
    """

    mode: str = "stochastic"
    initial: int | None = None
    switches: tuple = ()

    def __post_init__(self):
        if self.mode not in ("stochastic", "pinned"):
            raise ValueError(f"unknown promoter input mode {self.mode!r}")
        if self.mode == "pinned":
            if self.initial not in (0, 1):
                raise ValueError("pinned input needs initial state 0 or 1")
            times = [s[0] for s in self.switches]
            if any(b <= a for a, b in zip(times, times[1:])):
                raise ValueError("pinned switch times must be strictly increasing")
            if any(s[1] not in (0, 1) for s in self.switches):
                raise ValueError("pinned states must be 0 or 1")
        elif self.switches:
            raise ValueError("switches given for a stochastic input")

    @classmethod
    def pinned(cls, initial, switches=()):
        return cls("pinned", int(initial), tuple((float(t), int(s)) for t, s in switches))

    def check_grid(self, grid: TimeGrid):
        if self.mode == "pinned" and self.switches and not grid.contains([s[0] for s in self.switches]):
            raise ValueError("pinned switch times must lie inside the grid span")

    def path(self, grid: TimeGrid) -> np.ndarray:
        """State at every grid node (pinned mode only)."""
        if self.mode != "pinned":
            raise ValueError("path() is only defined for pinned inputs")
        t = grid.times
        out = np.full(t.shape, self.initial, dtype=np.int8)
        for ts, state in self.switches:
            out[t >= ts - 1e-9 * grid.dt] = state
        return out


@dataclass
class HybridTrajectory:
    grid: TimeGrid
    mu: dict
    x: dict

    @property
    def names(self):
        return tuple(self.x)


@dataclass
class ObservationSet:
    """Per-gene ``(times, values)`` arrays plus the noise level used."""

    data: dict
    sigma_obs: float

    def __post_init__(self):
        for name, (t, y) in list(self.data.items()):
            t = np.asarray(t, dtype=float)
            y = np.asarray(y, dtype=float)
            if t.shape != y.shape:
                raise ValueError(f"times and values differ in length for gene {name}")
            if np.any(np.diff(t) < 0):
                raise ValueError(f"observation times for gene {name} are not sorted")
            self.data[name] = (t, y)

    def times(self, name):
        return self.data.get(name, (np.empty(0), np.empty(0)))[0]

    def values(self, name):
        return self.data.get(name, (np.empty(0), np.empty(0)))[1]

    def __len__(self):
        return sum(len(t) for t, _ in self.data.values())


def solve_master_equation(
    f_plus: Callable[[float], float],
    f_minus: Callable[[float], float],
    p0: float,
    grid: TimeGrid,
) -> np.ndarray:
    """ON probability at every grid node, integrating
    dp/dt = f+ - (f+ + f-) p with classical fixed-step RK4."""
    if not 0 <= p0 <= 1:
        raise ValueError("p0 must lie in [0, 1]")

    def rhs(t, p):
        fp, fm = f_plus(t), f_minus(t)
        if fp < 0 or fm < 0:
            raise ValueError(f"negative switching rate at t = {t}")
        return fp - (fp + fm) * p

    t, dt = grid.times, grid.dt
    p = np.empty(grid.n_nodes)
    p[0] = p0
    for k in range(grid.n_steps):
        tk, pk = t[k], p[k]
        k1 = rhs(tk, pk)
        k2 = rhs(tk + dt / 2, pk + dt / 2 * k1)
        k3 = rhs(tk + dt / 2, pk + dt / 2 * k2)
        k4 = rhs(tk + dt, pk + dt * k3)
        p[k + 1] = pk + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
    rhs(t[-1], p[-1])
    return np.clip(p, 0.0, 1.0)


def _draws(seed, n_genes, n_steps):
    rng = np.random.default_rng(seed)
    return (
        rng.standard_normal(n_genes),
        rng.random(n_genes),
        rng.random((n_steps, n_genes)),
        rng.standard_normal((n_steps, n_genes)),
    )


def _simulate(units: Sequence[GeneUnit], reg_index, exo, pinned, grid: TimeGrid, seeds):
    """Vectorised engine over a batch of seeds.

    ``reg_index[g]`` lists upstream unit indices of unit g, ``exo[g]`` is an
    optional known regulator path entering the average, ``pinned[g]`` an
    optional fixed promoter path.  Units must be in topological order.
    """
    n_paths, n_genes, K, dt = len(seeds), len(units), grid.n_steps, grid.dt
    z0 = np.empty((n_paths, n_genes))
    u0 = np.empty((n_paths, n_genes))
    u = np.empty((K, n_paths, n_genes))
    eps = np.empty((K, n_paths, n_genes))
    for i, seed in enumerate(seeds):
        z0[i], u0[i], u[:, i], eps[:, i] = _draws(seed, n_genes, K)

    b = np.array([g.kinetics.b for g in units])
    lam = np.array([g.kinetics.lam for g in units])
    A = np.array([g.kinetics.A for g in units])
    sig = np.array([g.kinetics.sigma for g in units])
    times = grid.times

    mu = np.zeros((n_paths, n_genes, K + 1), dtype=np.int8)
    x = np.zeros((n_paths, n_genes, K + 1))
    for g, unit in enumerate(units):
        x[:, g, 0] = unit.x0 + math.sqrt(unit.x0_var) * z0[:, g]
        if pinned[g] is not None:
            mu[:, g, :] = pinned[g]
        else:
            mu[:, g, 0] = u0[:, g] < unit.p_on0

    sqdt = math.sqrt(dt)
    for k in range(K):
        for g, unit in enumerate(units):
            if pinned[g] is not None:
                continue
            sw = unit.switching
            n_reg = len(reg_index[g]) + (exo[g] is not None)
            if n_reg:
                total = sum(x[:, r, k] for r in reg_index[g])
                if exo[g] is not None:
                    total = total + exo[g][k]
                on_dt = sw.kp * np.exp(sw.ke * total / n_reg) * dt
            else:
                on_dt = np.full(n_paths, sw.kp * dt)
            rate_dt = np.where(mu[:, g, k] == 1, sw.km * dt, on_dt)
            worst = rate_dt.max()
            if worst >= 0.5:
                raise StepSizeError(unit.name, times[k], worst)
            flip = u[k, :, g] < rate_dt
            mu[:, g, k + 1] = np.where(flip, 1 - mu[:, g, k], mu[:, g, k])
        drift = b - lam * x[:, :, k] + A * mu[:, :, k]
        x[:, :, k + 1] = x[:, :, k] + drift * dt + sig * sqdt * eps[k]
    return mu, x


def _model_layout(model: FflModel, master_input: PromoterInput, grid: TimeGrid):
    report = validate_model(model)
    if report:
        raise ValidationError(report)
    master_input.check_grid(grid)
    resolved = model.resolved()
    order = topological_order(resolved)
    units = [resolved.genes[n] for n in order]
    reg_index = [[order.index(r) for r in u.regulators] for u in units]
    exo = [None] * len(units)
    pinned = [None] * len(units)
    if master_input.mode == "pinned":
        pinned[order.index("M")] = master_input.path(grid)
    return order, units, reg_index, exo, pinned


def simulate_hybrid(model: FflModel, master_input: PromoterInput, grid: TimeGrid, seed) -> HybridTrajectory:
    """One sample path of the loop; identical seeds give identical paths."""
    order, units, reg_index, exo, pinned = _model_layout(model, master_input, grid)
    mu, x = _simulate(units, reg_index, exo, pinned, grid, [seed])
    return HybridTrajectory(
        grid,
        {n: mu[0, i] for i, n in enumerate(order)},
        {n: x[0, i] for i, n in enumerate(order)},
    )


def simulate_ensemble(model: FflModel, master_input: PromoterInput, grid: TimeGrid, seeds):
    """Stacked paths for many seeds at once.

    Returns ``(mu, x)`` dicts of arrays shaped ``(len(seeds), n_nodes)``; row
    ``i`` equals ``simulate_hybrid(..., seed=seeds[i])``.
    """
    order, units, reg_index, exo, pinned = _model_layout(model, master_input, grid)
    mu, x = _simulate(units, reg_index, exo, pinned, grid, list(seeds))
    return {n: mu[:, i] for i, n in enumerate(order)}, {n: x[:, i] for i, n in enumerate(order)}


def simulate_unit(unit: GeneUnit, grid: TimeGrid, seeds, regulator_path=None, mu_path=None):
    """Simulate a single unit driven by a known regulator path.

    ``unit`` must have resolved initial conditions.  Returns ``(mu, x)``
    arrays of shape ``(len(seeds), n_nodes)``.
    """
    if unit.x0 is None or unit.x0_var is None or unit.p_on0 is None:
        raise ValueError("simulate_unit needs resolved x0, x0_var and p_on0")
    exo = None if regulator_path is None else np.asarray(regulator_path, dtype=float)
    pinned = None if mu_path is None else np.asarray(mu_path, dtype=np.int8)
    mu, x = _simulate([unit], [[]], [exo], [pinned], grid, list(np.atleast_1d(seeds)))
    return mu[:, 0], x[:, 0]


def generate_observations(
    traj: HybridTrajectory, times, sigma_obs: float, seed
) -> ObservationSet:
    """Noisy protein readouts at the grid nodes nearest to ``times``.

    ``times`` is a single sequence shared by all genes or a mapping from gene
    name to its own sequence.
    """
    if sigma_obs < 0:
        raise ValueError("sigma_obs must be non-negative")
    rng = np.random.default_rng(seed)
    data = {}
    for name in traj.names:
        t = times[name] if isinstance(times, Mapping) else times
        t = np.sort(np.asarray(t, dtype=float))
        if t.size == 0:
            continue
        idx = traj.grid.node_index(t)
        y = traj.x[name][idx] + sigma_obs * rng.standard_normal(t.size)
        data[name] = (t, y)
    return ObservationSet(data, sigma_obs)
