"""Experiment orchestration and artifact serialization.

Every number is written with 17 significant digits so artifacts read back
bit-for-bit, and bundles are staged in a scratch directory that is moved
into place only when every stage succeeded.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
import platform
import shutil
import tempfile
from importlib import metadata
from pathlib import Path

import numpy as np

from .config import ExperimentConfig
from .inference import VariationalState, discretize, infer
from .learning import LearnResult, learn
from .model import GENE_NAMES, GeneKinetics, topological_order
from .simulate import HybridTrajectory, ObservationSet, TimeGrid, generate_observations, simulate_hybrid

SEED_ENV = "FFL_SEED_OVERRIDE"

TRAJECTORY_COLUMNS = ["t"] + [f"{p}_{g}" for g in GENE_NAMES for p in ("mu", "x")]
POSTERIOR_COLUMNS = ["t"] + [f"{p}_{g}" for g in GENE_NAMES for p in ("m", "xmean", "xvar")]

SEED_USAGE = {
    "simulate": "promoter switching, initial protein levels and diffusion increments",
    "observe": "observation noise",
    "inference": "reserved; inference and learning draw no random numbers",
}


def fmt(value) -> str:
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return "%.17g" % value


def _write_rows(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) for v in row])


def _read_table(path):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = list(reader)
    return header, rows


def _write_json(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def write_trajectory(path, traj: HybridTrajectory):
    cols = [traj.grid.times]
    for g in GENE_NAMES:
        cols += [traj.mu[g].astype(int), traj.x[g]]
    rows = ([c[i] for c in cols] for i in range(traj.grid.n_nodes))
    _write_rows(path, TRAJECTORY_COLUMNS, rows)


def _grid_from_times(t):
    dt = (t[-1] - t[0]) / (len(t) - 1)
    return TimeGrid(float(t[0]), float(t[-1]), float(dt))


def read_trajectory(path) -> HybridTrajectory:
    header, rows = _read_table(path)
    if header != TRAJECTORY_COLUMNS:
        raise ValueError(f"{path}: unexpected columns {header}")
    data = np.array([[float(v) for v in r] for r in rows])
    t = data[:, 0]
    mu = {g: data[:, 1 + 2 * i].astype(np.int8) for i, g in enumerate(GENE_NAMES)}
    x = {g: data[:, 2 + 2 * i] for i, g in enumerate(GENE_NAMES)}
    return HybridTrajectory(_grid_from_times(t), mu, x)


def write_observations(path, obs: ObservationSet):
    rows = []
    for g in GENE_NAMES:
        rows += [(g, t, y) for t, y in zip(obs.times(g), obs.values(g))]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["gene", "t", "y"])
        for g, t, y in rows:
            w.writerow([g, fmt(t), fmt(y)])


def read_observations(path, sigma_obs) -> ObservationSet:
    header, rows = _read_table(path)
    if header != ["gene", "t", "y"]:
        raise ValueError(f"{path}: unexpected columns {header}")
    data = {}
    for g in GENE_NAMES:
        sel = [(float(r[1]), float(r[2])) for r in rows if r[0] == g]
        if sel:
            data[g] = (np.array([s[0] for s in sel]), np.array([s[1] for s in sel]))
    unknown = {r[0] for r in rows} - set(GENE_NAMES)
    if unknown:
        raise ValueError(f"{path}: unknown genes {sorted(unknown)}")
    return ObservationSet(data, sigma_obs)


def write_posterior(path, grid: TimeGrid, state: VariationalState, names):
    cols = [grid.times]
    for g in GENE_NAMES:
        i = names.index(g)
        cols += [state.promoters[i].m, state.proteins[i].mean, state.proteins[i].var]
    rows = ([c[k] for c in cols] for k in range(grid.n_nodes))
    _write_rows(path, POSTERIOR_COLUMNS, rows)


def read_posterior(path) -> dict:
    """Column name -> array for a posterior (or any numeric) CSV."""
    header, rows = _read_table(path)
    data = np.array([[float(v) for v in r] for r in rows]).reshape(len(rows), len(header))
    return {h: data[:, j] for j, h in enumerate(header)}


def write_free_energy(path, trace):
    _write_rows(path, ["sweep", "F"], enumerate(trace))


def write_learn_trace(path, stage_traces):
    rows = [(s, k, F) for s, trace in enumerate(stage_traces) for k, F in enumerate(trace)]
    _write_rows(path, ["stage", "step", "F"], rows)


def write_params(path, kinetics: dict):
    _write_json(path, {g: kinetics[g].as_dict() for g in GENE_NAMES})


def read_params(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        raw = json.load(fh)
    return {g: GeneKinetics(v["b"], v["lambda"], v["A"], v["sigma"]) for g, v in raw.items()}


def effective_config(cfg: ExperimentConfig):
    """Apply the seed override from the environment; returns ``(cfg, override)``."""
    value = os.environ.get(SEED_ENV)
    if value is None or value == "":
        return cfg, None
    try:
        seed = int(value)
    except ValueError as exc:
        raise ValueError(f"{SEED_ENV} must be an integer, got {value!r}") from exc
    return cfg.with_seeds(seed), seed


def pulse_durations(cfg: ExperimentConfig):
    """Lengths of the ON intervals of a pinned input bounded by two switches."""
    inp = cfg.master_input
    if inp.mode != "pinned":
        return []
    out, state, start = [], inp.initial, None
    for t, s in inp.switches:
        if s == 1 and state == 0:
            start = t
        elif s == 0 and state == 1 and start is not None:
            out.append(round(t - start, 12))
        state = s
    return out


def _versions():
    out = {"python": platform.python_version()}
    for dist in ("artifact", "numpy", "scipy", "jsonschema"):
        try:
            out[dist] = metadata.version(dist)
        except metadata.PackageNotFoundError:
            out[dist] = None
    return out


def simulate_stage(cfg: ExperimentConfig):
    traj = simulate_hybrid(cfg.model, cfg.master_input, cfg.grid, cfg.seeds["simulate"])
    obs = generate_observations(traj, cfg.obs_times, cfg.model.sigma_obs, cfg.seeds["observe"])
    return traj, obs


def infer_stage(cfg: ExperimentConfig, obs: ObservationSet):
    dm = discretize(cfg.model.resolved(), obs, cfg.grid)
    return dm, infer(dm, cfg.inference.max_sweeps, cfg.inference.tol)


def learn_stage(cfg: ExperimentConfig, obs: ObservationSet) -> LearnResult:
    if cfg.learning.init is None:
        raise ValueError("learning.init is required to learn")
    model0 = cfg.model.resolved().with_kinetics(cfg.learning.init)
    return learn(model0, obs, cfg.grid, cfg.learning.options)


class _Bundle:
    """Files staged in a scratch directory and published together."""

    def __init__(self, out_dir):
        self.out = Path(out_dir)
        self.out.parent.mkdir(parents=True, exist_ok=True)
        self.tmp = Path(tempfile.mkdtemp(prefix=".partial-", dir=self.out.parent))
        self.names = []

    def path(self, name):
        self.names.append(name)
        return self.tmp / name

    def digests(self):
        return {n: hashlib.sha256((self.tmp / n).read_bytes()).hexdigest() for n in sorted(self.names)}

    def publish(self):
        self.out.mkdir(parents=True, exist_ok=True)
        for n in self.names:
            os.replace(self.tmp / n, self.out / n)
        shutil.rmtree(self.tmp, ignore_errors=True)
        return {n: self.out / n for n in self.names}

    def discard(self):
        shutil.rmtree(self.tmp, ignore_errors=True)


def _manifest(cfg, override, command, bundle, summary):
    return {
        "command": command,
        "config": cfg.normalized,
        "defaults_applied": list(cfg.defaults_applied),
        "seeds": dict(cfg.seeds),
        "seed_override": override,
        "seed_usage": SEED_USAGE,
        "pulse_durations": pulse_durations(cfg),
        "versions": _versions(),
        "files": bundle.digests(),
        "summary": summary,
    }


def _learn_summary(res: LearnResult):
    return {
        "converged": res.converged,
        "em_iterations": len(res.stage_traces[-1]) // 2,
        "stages": len(res.stage_traces),
        "final_free_energy": res.f_trace[-1],
    }


def _run_bundle(cfg: ExperimentConfig, out_dir, command, body):
    cfg, override = effective_config(cfg)
    bundle = _Bundle(out_dir)
    try:
        summary = body(cfg, bundle)
        manifest = _manifest(cfg, override, command, bundle, summary)
        _write_json(bundle.path("manifest.json"), manifest)
        return bundle.publish()
    except BaseException:
        bundle.discard()
        raise


def run_experiment(cfg: ExperimentConfig, out_dir):
    """Simulate, observe, infer and optionally learn; write the bundle.

    Returns a mapping of file name to written path.
    """

    def body(cfg, bundle):
        summary = {}
        traj, obs = simulate_stage(cfg)
        write_trajectory(bundle.path("trajectory.csv"), traj)
        write_observations(bundle.path("observations.csv"), obs)
        if not cfg.inference.enabled:
            return summary
        dm, state = infer_stage(cfg, obs)
        write_posterior(bundle.path("posterior.csv"), cfg.grid, state, dm.names)
        write_free_energy(bundle.path("free_energy.csv"), state.trace)
        summary["inference"] = {"sweeps": state.n_sweeps, "converged": state.converged, "free_energy": state.free_energy}
        if cfg.learning.enabled:
            res = learn_stage(cfg, obs)
            write_params(bundle.path("params.json"), res.model.kinetics())
            write_learn_trace(bundle.path("learn_trace.csv"), res.stage_traces)
            summary["learning"] = _learn_summary(res)
            summary["params_source"] = "fitted"
        else:
            write_params(bundle.path("params.json"), cfg.model.kinetics())
            summary["params_source"] = "config"
        return summary

    return _run_bundle(cfg, out_dir, "run", body)


def simulate_command(cfg: ExperimentConfig, out_dir):
    def body(cfg, bundle):
        traj, obs = simulate_stage(cfg)
        write_trajectory(bundle.path("trajectory.csv"), traj)
        write_observations(bundle.path("observations.csv"), obs)
        return {}

    return _run_bundle(cfg, out_dir, "simulate", body)


def infer_command(cfg: ExperimentConfig, data_dir, out_dir):
    obs = read_observations(Path(data_dir) / "observations.csv", cfg.model.sigma_obs)

    def body(cfg, bundle):
        dm, state = infer_stage(cfg, obs)
        write_posterior(bundle.path("posterior.csv"), cfg.grid, state, dm.names)
        write_free_energy(bundle.path("free_energy.csv"), state.trace)
        return {"inference": {"sweeps": state.n_sweeps, "converged": state.converged, "free_energy": state.free_energy}}

    return _run_bundle(cfg, out_dir, "infer", body)


def learn_command(cfg: ExperimentConfig, data_dir, out_dir):
    obs = read_observations(Path(data_dir) / "observations.csv", cfg.model.sigma_obs)

    def body(cfg, bundle):
        res = learn_stage(cfg, obs)
        write_params(bundle.path("params.json"), res.model.kinetics())
        write_posterior(bundle.path("posterior.csv"), cfg.grid, res.state, topological_order(res.model))
        write_learn_trace(bundle.path("learn_trace.csv"), res.stage_traces)
        return {"learning": _learn_summary(res), "params_source": "fitted"}

    return _run_bundle(cfg, out_dir, "learn", body)
