"""Domain types and rate laws of the hybrid feed-forward loop.

Each gene is a promoter-protein unit: a binary promoter ``mu`` switching
OFF->ON at rate ``kp * exp(ke * mean(regulators))`` and ON->OFF at rate
``km``, driving a protein concentration

    dx = (b - lam * x + A * mu) dt + sigma dW.

The canonical loop has a master gene M (unregulated), a slave gene S
regulated by M and a target gene T regulated by the average of M and S.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Mapping, Sequence

import numpy as np

from .errors import ValidationError

GENE_NAMES = ("M", "S", "T")
CANONICAL_REGULATORS = {"M": (), "S": ("M",), "T": ("M", "S")}


@dataclass(frozen=True)
class GeneKinetics:
    """Drift and noise parameters of one protein: basal rate ``b``, decay
    ``lam``, promoter-bound increment ``A`` and diffusion ``sigma``."""

    b: float
    lam: float
    A: float
    sigma: float

    def as_dict(self):
        return {"b": self.b, "lambda": self.lam, "A": self.A, "sigma": self.sigma}


@dataclass(frozen=True)
class SwitchingParams:
    kp: float
    ke: float
    km: float


@dataclass(frozen=True)
class GeneUnit:
    """One promoter-protein unit.

    ``x0``/``x0_var`` are the mean and variance of the initial protein
    level and ``p_on0`` the probability the promoter starts ON.  ``None``
    means "derive from the kinetics" (see :meth:`FflModel.resolved`).
    """

    name: str
    kinetics: GeneKinetics
    switching: SwitchingParams
    regulators: tuple = ()
    x0: float | None = None
    x0_var: float | None = None
    p_on0: float | None = None


@dataclass(frozen=True)
class FflModel:
    genes: Mapping[str, GeneUnit]
    sigma_obs: float

    @classmethod
    def canonical(cls, kinetics, switching, sigma_obs, initial=None):
        """Build the M -> S -> T loop.

        ``kinetics`` and ``switching`` are either single objects shared by
        all genes or mappings keyed by gene name.  ``initial`` optionally maps
        gene name to a dict with any of ``x0``, ``x0_var``, ``p_on0``.
        """
        initial = initial or {}
        genes = {}
        for name in GENE_NAMES:
            kin = kinetics[name] if isinstance(kinetics, Mapping) else kinetics
            sw = switching[name] if isinstance(switching, Mapping) else switching
            genes[name] = GeneUnit(name, kin, sw, CANONICAL_REGULATORS[name], **initial.get(name, {}))
        return cls(genes, sigma_obs)

    @property
    def names(self):
        return tuple(self.genes)

    def kinetics(self):
        return {n: g.kinetics for n, g in self.genes.items()}

    def with_kinetics(self, kinetics: Mapping[str, GeneKinetics]) -> "FflModel":
        genes = {n: replace(g, kinetics=kinetics.get(n, g.kinetics)) for n, g in self.genes.items()}
        return replace(self, genes=genes)

    def resolved(self) -> "FflModel":
        """Copy with every ``None`` initial condition replaced by a number.

        x0 defaults to the OFF fixed point b/lam, x0_var to the stationary OU
        variance sigma^2/(2 lam), and p_on0 to the steady-state ON probability
        at the regulators' initial levels.
        """
        x0 = {}
        genes = dict(self.genes)
        for name in _topological(self.genes):
            g = genes[name]
            k = g.kinetics
            gx0 = k.b / k.lam if g.x0 is None else g.x0
            gv0 = k.sigma**2 / (2 * k.lam) if g.x0_var is None else g.x0_var
            if g.p_on0 is None:
                reg_level = float(np.mean([x0[r] for r in g.regulators])) if g.regulators else 0.0
                p0 = steady_state_on_prob(g.switching, reg_level)
            else:
                p0 = g.p_on0
            x0[name] = gx0
            genes[name] = replace(g, x0=float(gx0), x0_var=float(gv0), p_on0=float(p0))
        return replace(self, genes=genes)


def _topological(genes):
    order, seen = [], set()

    def visit(name, stack):
        if name in seen:
            return
        if name in stack:
            raise ValidationError(f"regulator cycle through gene {name}")
        for r in genes[name].regulators:
            if r in genes:
                visit(r, stack | {name})
        seen.add(name)
        order.append(name)

    for name in genes:
        visit(name, frozenset())
    return order


def topological_order(model: FflModel):
    return _topological(model.genes)


def _check_finite(*values):
    for v in values:
        if not np.all(np.isfinite(v)):
            raise ValueError(f"non-finite input: {v!r}")


def steady_state_on_prob(sw: SwitchingParams, x_reg):
    """Stationary ON probability of the promoter at fixed regulator level."""
    _check_finite(x_reg)
    e = np.exp(sw.ke * np.asarray(x_reg, dtype=float))
    p = e / (sw.km / sw.kp + e)
    return float(p) if np.ndim(p) == 0 else p


def switch_rate_on(sw: SwitchingParams, regulator_values: Sequence[float]) -> float:
    """OFF->ON rate ``kp * exp(ke * mean(regulator_values))``; ``kp`` if empty."""
    vals = np.asarray(regulator_values, dtype=float)
    _check_finite(vals)
    if vals.size == 0:
        return float(sw.kp)
    return float(sw.kp * math.exp(sw.ke * vals.mean()))


def expected_switch_rate_on(sw: SwitchingParams, reg_means, reg_vars) -> float:
    """E[kp exp(ke * mean(X))] for independent Gaussian regulators X_i."""
    means = np.asarray(reg_means, dtype=float)
    variances = np.asarray(reg_vars, dtype=float)
    if means.shape != variances.shape:
        raise ValueError("reg_means and reg_vars must have the same length")
    if np.any(variances < 0):
        raise ValueError("regulator variances must be non-negative")
    _check_finite(means, variances)
    n = means.size
    if n == 0:
        return float(sw.kp)
    m = means.mean()
    v = variances.sum() / n**2
    return float(sw.kp * math.exp(sw.ke * m + 0.5 * sw.ke**2 * v))


def ou_mean(kin: GeneKinetics, x0, t):
    """Mean of the promoter-OFF protein level after time ``t`` from ``x0``."""
    t = np.asarray(t, dtype=float)
    if np.any(t < 0):
        raise ValueError("t must be non-negative")
    decay = np.exp(-kin.lam * t)
    out = x0 * decay + kin.b / kin.lam * (1.0 - decay)
    return float(out) if out.ndim == 0 else out


def log_transition_weights(sw: SwitchingParams, xbar, dt):
    """Per-step promoter path log-weights for regulator signal ``xbar``.

    Returns an array of shape ``xbar.shape + (2, 2)`` indexed
    ``[..., from, to]``: a jump contributes ``log(rate * dt)`` and staying
    contributes ``-rate * dt``, the discretised telegraph path density.
    ``xbar=None`` means an unregulated promoter (rate ``kp``).
    """
    if xbar is None:
        log_on = np.full((), math.log(sw.kp))
    else:
        log_on = math.log(sw.kp) + sw.ke * np.asarray(xbar, dtype=float)
    out = np.empty(np.shape(log_on) + (2, 2))
    out[..., 0, 1] = log_on + math.log(dt)
    out[..., 0, 0] = -np.exp(log_on) * dt
    out[..., 1, 0] = math.log(sw.km * dt)
    out[..., 1, 1] = -sw.km * dt
    return out


def validate_model(m: FflModel) -> list[str]:
    """Return a list of violated invariants; empty means the model is valid."""
    report = []
    names = tuple(m.genes)
    if sorted(names) != sorted(GENE_NAMES):
        report.append(f"model must contain exactly genes {GENE_NAMES}, got {names}")
    for name, g in m.genes.items():
        if g.name != name:
            report.append(f"gene keyed {name} carries name {g.name}")
        k, sw = g.kinetics, g.switching
        values = (k.b, k.lam, k.A, k.sigma, sw.kp, sw.ke, sw.km)
        if not all(math.isfinite(v) for v in values):
            report.append(f"non-finite parameter for gene {name}")
            continue
        if not k.b > 0:
            report.append(f"b > 0 violated for gene {name}")
        if not k.lam > 0:
            report.append(f"lambda > 0 violated for gene {name}")
        if not k.sigma > 0:
            report.append(f"sigma > 0 violated for gene {name}")
        if not k.A + k.b > 0:
            report.append(f"A + b > 0 violated for gene {name}")
        if not sw.kp > 0:
            report.append(f"kp > 0 violated for gene {name}")
        if not sw.km > 0:
            report.append(f"km > 0 violated for gene {name}")
        if not sw.ke >= 0:
            report.append(f"ke >= 0 violated for gene {name}")
        expected = CANONICAL_REGULATORS.get(name)
        if expected is not None and tuple(g.regulators) != expected:
            report.append(
                f"topology violation: gene {name} regulators {list(g.regulators)} "
                f"must be {list(expected)}"
            )
        if g.x0_var is not None and not g.x0_var >= 0:
            report.append(f"x0_var >= 0 violated for gene {name}")
        if g.p_on0 is not None and not 0 <= g.p_on0 <= 1:
            report.append(f"p_on0 in [0, 1] violated for gene {name}")
    if not (math.isfinite(m.sigma_obs) and m.sigma_obs > 0):
        report.append("sigma_obs > 0 violated")
    try:
        _topological(m.genes)
    except ValidationError as exc:
        report.append(str(exc))
    except KeyError as exc:
        report.append(f"unknown regulator {exc}")
    return report


def require_valid(m: FflModel):
    report = validate_model(m)
    if report:
        raise ValidationError(report)
