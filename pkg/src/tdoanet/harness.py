"""Experiment orchestration: scenario -> network, gains, Monte-Carlo runs, CSV.

Every output is a pure function of the scenario: all randomness comes from
streams derived from the scenario's seeds, trials are reduced in trial order,
and floats are written with their shortest round-trip representation.
"""
from __future__ import annotations

import csv
import io
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from tdoanet import detector as det
from tdoanet import estimator as est
from tdoanet import gain as gainmod
from tdoanet import network as net
from tdoanet.errors import ConfigError, ObservabilityError
from tdoanet.scenario import Scenario, derive_rng
from tdoanet.sensing import FaultSpec, MeasurementModel, SensorArray, build_measurement_model
from tdoanet.target import TargetModel, build_model

log = logging.getLogger(__name__)

CSV_COLUMNS = ("step", "trial", "sensor", "metric", "value")


@dataclass(frozen=True)
class Setup:
    model: TargetModel
    array: SensorArray
    graph: net.Digraph
    cm: net.ConsensusMatrix
    mm: MeasurementModel
    delays: Optional[net.DelayMap]

    @property
    def tau_bar(self) -> int:
        return 0 if self.delays is None else self.delays.tau_bar


def _graph(sc: Scenario, n: int) -> net.Digraph:
    kind = sc.graph.kind
    if kind == "ring":
        return net.ring(n)
    if kind == "line":
        return net.line(n)
    if kind == "complete":
        return net.complete(n)
    if kind == "directed_cycle":
        return net.directed_cycle(n)
    if kind == "custom":
        if not sc.graph.edges:
            raise ConfigError("graph.kind 'custom' needs graph.edges")
        return net.Digraph(n, frozenset(tuple(e) for e in sc.graph.edges))
    raise ConfigError(f"unknown graph kind {kind!r}")


def _delays(sc: Scenario, g: net.Digraph) -> Optional[net.DelayMap]:
    spec = sc.delays
    if spec.kind == "none":
        return None
    if spec.kind == "random":
        return net.DelayMap.random(g, spec.tau_max, derive_rng(spec.seed, "delays"))
    links = spec.links or []
    taus = {}
    for entry in links:
        if len(entry) != 3:
            raise ConfigError("delays.links entries must be [j, i, tau]")
        j, i, t = entry
        if (j, i) not in g.edges:
            raise ConfigError(f"delay given for missing link ({j}, {i})")
        taus[(j, i)] = t
    return net.DelayMap(taus)


def build_setup(sc: Scenario) -> Setup:
    model = build_model(sc.model.kind, sc.model.T, sc.model.process_noise_std)
    geo = sc.geometry
    if geo.positions is not None:
        positions = np.asarray(geo.positions, dtype=float)
    else:
        lo, hi = geo.box
        positions = derive_rng(geo.seed, "geometry").uniform(lo, hi, (geo.n, 3))
    array = SensorArray(positions)
    g = _graph(sc, array.n)
    cm = net.build_row_stochastic(g, derive_rng(sc.weights_seed, "weights"))
    mm = build_measurement_model(array, g.neighbor_lists(), model.N, sc.meas_noise_std)
    return Setup(model, array, g, cm, mm, _delays(sc, g))


def gain_config(sc: Scenario, setup: Setup) -> gainmod.LmiConfig:
    gs = sc.gain
    design = setup.tau_bar if gs.delay_design is None else gs.delay_design
    return gainmod.LmiConfig(
        method=gs.method,
        rho_target=gs.rho_target,
        restarts=gs.restarts,
        init_scale=gs.init_scale,
        delay_design=design,
        delay_samples=gs.delay_samples,
    )


def design_gain(sc: Scenario, setup: Setup) -> gainmod.GainSet:
    return gainmod.synthesize_gain(
        setup.cm, setup.model, setup.mm, gain_config(sc, setup), derive_rng(sc.gain.seed, "gain")
    )


def certified_rhos(setup: Setup, gains: gainmod.GainSet) -> dict:
    """Delay-free radius, the delay bound at the scenario's max delay, and the
    exact radius of the delayed recursion for the scenario's delay map."""
    out = {"rho_closed_loop": gainmod.spectral_radius(gainmod.closed_loop(setup.cm, setup.model, setup.mm, gains))}
    if setup.delays is not None:
        m = gainmod.delay_margin_check(setup.cm, setup.model, setup.mm, gains, setup.tau_bar)
        out["rho_delay_bound"] = m.rho_delayed
        out["rho_delayed_exact"] = gainmod.exact_delay_radius(setup.cm, setup.model, setup.mm, gains, setup.delays)
    return out


def initial_conditions(sc: Scenario, setup: Setup, trial: int, tag: str = "init"):
    """True initial state and the sensors' initial estimates for one trial."""
    rng = derive_rng(sc.seed, tag, trial)
    lo, hi = sc.geometry.box
    N, n = setup.model.N, setup.mm.n
    x0 = np.zeros(N)
    x0[:3] = rng.uniform(lo, hi, 3)
    x0[3:6] = rng.uniform(-sc.init_speed, sc.init_speed, 3)
    x_hat0 = np.zeros((n, N))
    x_hat0[:, :3] = rng.uniform(lo, hi, (n, 3))
    return x0, x_hat0


def _faults(sc: Scenario) -> list[FaultSpec]:
    return [FaultSpec(f.sensor, f.onset, np.asarray(f.vector, dtype=float)) for f in sc.faults]


def simulate_trial(
    sc: Scenario,
    setup: Setup,
    gains: gainmod.GainSet,
    trial: int,
    faults: Sequence[FaultSpec] = (),
    keep_residuals: bool = False,
    tag: str = "",
) -> est.ErrorTrace:
    x0, x_hat0 = initial_conditions(sc, setup, trial, tag + "init")
    noise = est.draw_noise(setup.model, setup.mm, sc.steps, derive_rng(sc.seed, tag + "noise", trial))
    bank = est.make_bank(setup.model, setup.mm, setup.cm, gains.blocks, x_hat0, tau_bar=setup.tau_bar)
    return est.run_protocol(bank, x0, noise, delays=setup.delays, faults=faults, keep_residuals=keep_residuals)


@dataclass
class RunResult:
    name: str
    msee: np.ndarray  # steps
    sensor_msee: np.ndarray  # steps x n, mean over trials
    rhos: dict
    alarms: list = field(default_factory=list)  # (step, trial, sensor, detector)
    meta: dict = field(default_factory=dict)  # not written to CSV

    def rows(self, per_sensor: bool = False) -> list[tuple]:
        out = [(0, "mean", "all", k, v) for k, v in sorted(self.rhos.items())]
        out += [(k + 1, "mean", "all", "msee", v) for k, v in enumerate(self.msee)]
        if per_sensor:
            for i in range(self.sensor_msee.shape[1]):
                out += [(k + 1, "mean", i, "msee", v) for k, v in enumerate(self.sensor_msee[:, i])]
        out += [(k, t, i, f"alarm_{d}", 1) for k, t, i, d in self.alarms]
        return out


def _trial_job(args):
    sc, setup, gains, trial, faults, keep = args
    tr = simulate_trial(sc, setup, gains, trial, faults, keep_residuals=keep)
    return np.sum(tr.errors[1:] ** 2, axis=2), tr.residuals


def calibrate_monitors(sc: Scenario, setup: Setup, gains: gainmod.GainSet) -> list[det.ResidualMonitor]:
    """Per-sensor monitors fitted on dedicated fault-free runs."""
    spec = sc.detector
    if spec.burn_in >= sc.steps:
        raise ConfigError("detector.burn_in must be smaller than steps")
    recs = [
        simulate_trial(sc, setup, gains, t, keep_residuals=True, tag="calibration").residuals
        for t in range(spec.calibration_trials)
    ]
    return [
        det.calibrate(
            np.vstack([r[i][spec.burn_in :] for r in recs]),
            spec.kappa,
            spec.theta,
            effective_dof=spec.dof == "effective",
        )
        for i in range(setup.mm.n)
    ]


def run_monte_carlo(
    sc: Scenario,
    gains: Optional[gainmod.GainSet] = None,
    setup: Optional[Setup] = None,
    workers: int = 1,
) -> RunResult:
    """Run ``sc.trials`` trials and average the squared errors."""
    t_start = time.perf_counter()
    setup = setup if setup is not None else build_setup(sc)
    gains = gains if gains is not None else design_gain(sc, setup)
    faults = _faults(sc)
    keep = sc.detector.enabled
    jobs = [(sc, setup, gains, t, faults, keep) for t in range(sc.trials)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_trial_job, jobs))
    else:
        results = [_trial_job(j) for j in jobs]
    sq = np.stack([r[0] for r in results])  # trials x steps x n
    alarms = []
    if keep:
        monitors = calibrate_monitors(sc, setup, gains)
        b = sc.detector.burn_in
        for t, (_, res) in enumerate(results):
            for i, mon in enumerate(monitors):
                a_sl, a_sf = det.alarm_series(mon, res[i][b:])
                alarms += [(b + k + 1, t, i, "stateless") for k in np.flatnonzero(a_sl)]
                alarms += [(b + mon.theta + k, t, i, "stateful") for k in np.flatnonzero(a_sf)]
        alarms.sort()
    sensor_msee = np.mean(sq, axis=0)
    return RunResult(
        sc.name,
        np.mean(sensor_msee, axis=1),
        sensor_msee,
        certified_rhos(setup, gains),
        alarms,
        {"elapsed_s": time.perf_counter() - t_start, "trials": sc.trials, "workers": workers},
    )


def diverged(curve: np.ndarray, tail: int = 1000, factor: float = 10.0) -> bool:
    """True if the last value exceeds ``factor`` times the trailing median, or
    if anything is non-finite."""
    curve = np.asarray(curve, dtype=float)
    if not np.all(np.isfinite(curve)):
        return True
    return bool(curve[-1] >= factor * np.median(curve[-tail:]))


# -- centralized comparison -------------------------------------------------


@dataclass
class KfComparison:
    curves: dict  # (meas_std, process_std, mode) -> steps
    steady: dict  # same keys -> mean over the last quarter of the run

    def rows(self) -> list[tuple]:
        out = []
        for (r, q, mode), c in sorted(self.curves.items()):
            metric = f"msee_{mode}_R{r!r}_Q{q!r}"
            out.append((0, "mean", "central", f"steady_{metric}", self.steady[(r, q, mode)]))
            out += [(k + 1, "mean", "central", metric, v) for k, v in enumerate(c)]
        return out

    def ordering_holds(self) -> dict:
        """Per noise setting: linear-model MSEE <= linearized-at-estimate MSEE."""
        keys = sorted({(r, q) for r, q, _ in self.curves})
        return {
            k: self.steady[(*k, est.KfMode.LINEAR.value)] <= self.steady[(*k, est.KfMode.ESTIMATE.value)]
            for k in keys
        }


def compare_kf(sc: Scenario) -> KfComparison:
    """Centralized KF with the linear and the two linearized output models on
    common random numbers, for every (R_r, Q_q) pair of ``sc.kf``."""
    setup = build_setup(sc)
    trials, steps, N = sc.trials, sc.steps, setup.model.N
    rows = setup.mm.stacked().shape[0]
    z_w = derive_rng(sc.seed, "kf_process").standard_normal((trials, steps, 3))
    z_v = derive_rng(sc.seed, "kf_meas").standard_normal((trials, steps, rows))
    init = derive_rng(sc.seed, "kf_init")
    lo, hi = sc.geometry.box
    x0 = np.zeros((trials, N))
    x0[:, :3] = init.uniform(lo, hi, (trials, 3))
    x0[:, 3:6] = init.uniform(-sc.init_speed, sc.init_speed, (trials, 3))
    x_hat0 = x0 + sc.kf.init_std * init.standard_normal((trials, N))
    P0 = sc.kf.init_std**2 * np.eye(N)
    curves, steady = {}, {}
    quarter = max(1, steps // 4)
    for q in sc.kf.process_std:
        model = build_model(sc.model.kind, sc.model.T, q)
        x_true = np.stack([est.truth_trajectory(model, x0[t], q * z_w[t]) for t in range(trials)])
        for r in sc.kf.meas_std:
            for mode in est.KfMode:
                err = est.centralized_kf(model, setup.mm, x_true, x_hat0, P0, z_v, mode, r)
                c = np.mean(np.sum(err[:, 1:] ** 2, axis=2), axis=0)
                key = (float(r), float(q), mode.value)
                curves[key] = c
                steady[key] = float(np.mean(c[-quarter:]))
    return KfComparison(curves, steady)


# -- link removal and delay margins ------------------------------------------


def link_removal_experiment(sc: Scenario, link: tuple[int, int], workers: int = 1) -> RunResult:
    """Drop a bidirectional link, repair W, redesign K and rerun the Monte Carlo."""
    base = build_setup(sc)
    j, i = link
    if (j, i) not in base.graph.edges:
        raise ConfigError(f"link ({j}, {i}) not in the graph")
    bidirectional = (i, j) in base.graph.edges
    cm2, g2 = net.remove_link_and_repair(base.cm, base.graph, (j, i), bidirectional=bidirectional)
    if not net.is_strongly_connected(g2):
        raise ObservabilityError(f"observability lost: removing ({j}, {i}) disconnects the network")
    mm2 = build_measurement_model(base.array, g2.neighbor_lists(), base.model.N, sc.meas_noise_std)
    delays2 = None
    if base.delays is not None:
        delays2 = net.DelayMap({e: t for e, t in base.delays.taus.items() if e in g2.edges})
    setup = Setup(base.model, base.array, g2, cm2, mm2, delays2)
    gains = gainmod.synthesize_gain(cm2, base.model, mm2, gain_config(sc, setup), derive_rng(sc.gain.seed, "gain"))
    res = run_monte_carlo(sc, gains, setup, workers)
    res.meta.update(
        removed=[(j, i)] + ([(i, j)] if bidirectional else []),
        redundancy_before=net.edge_connectivity(base.graph),
        redundancy_after=net.edge_connectivity(g2),
    )
    return res


def delay_sweep_rows(sc: Scenario, tau_max: int, gains: Optional[gainmod.GainSet] = None) -> list[tuple]:
    """Delay bound for every max delay 0..tau_max, with the exact radius of
    one random delay map per value as a cross-check."""
    setup = build_setup(sc)
    gains = gains if gains is not None else design_gain(sc, setup)
    out = []
    for m in gainmod.delay_sweep(setup.cm, setup.model, setup.mm, gains, tau_max):
        dm = net.DelayMap.random(setup.graph, m.tau_bar, derive_rng(sc.delays.seed, "sweep", m.tau_bar))
        exact = gainmod.exact_delay_radius(setup.cm, setup.model, setup.mm, gains, dm)
        out += [
            (m.tau_bar, "mean", "all", "rho_delay_bound", m.rho_delayed),
            (m.tau_bar, "mean", "all", "rho_delay_bound_root", m.rho_root),
            (m.tau_bar, "mean", "all", "certified", int(m.stable)),
            (m.tau_bar, "mean", "all", "rho_delayed_exact_sample", exact),
        ]
    return out


# -- output -----------------------------------------------------------------


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def csv_text(rows: Sequence[tuple]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for row in rows:
        w.writerow([_fmt(x) for x in row])
    return buf.getvalue()


def write_csv(rows: Sequence[tuple], path: Union[str, Path, None]) -> str:
    text = csv_text(rows)
    if path is not None:
        Path(path).write_text(text, encoding="utf-8", newline="\n")
    return text


def gnuplot_script(csv_path: str, metric: str = "msee") -> str:
    """Plain-text gnuplot script plotting one metric of a tidy CSV against step."""
    return (
        "set datafile separator ','\n"
        "set logscale y\n"
        "set xlabel 'step'\n"
        f"set ylabel '{metric}'\n"
        f"plot '{csv_path}' using 1:(strcol(4) eq '{metric}' && strcol(3) eq 'all' ? $5 : 1/0) "
        f"with lines title '{metric}'\n"
    )
