"""Networked single-time-scale estimator, its closed-form error recursion,
and a centralized Kalman-filter baseline.

Each sensor i keeps an estimate ``x_i`` and per step

1. fuses the one-step predictions of itself and its in-neighbours,
   ``prior_i = sum_j W_ij F x_j(k-1)``;
2. corrects with its own TDOA rows only,
   ``x_i(k) = prior_i + K_i H_i^T (y_i(k) - H_i prior_i)``.

With link delays, the estimate of neighbour j arrives ``tau_ij`` steps late
and is propagated forward with ``F^(tau_ij + 1)`` instead of ``F``.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Sequence

import numpy as np

from tdoanet.errors import ConfigError, NumericalError
from tdoanet.matlib import mat_pow
from tdoanet.network import ConsensusMatrix, DelayMap
from tdoanet.sensing import FaultSpec, MeasurementModel, squared_range_difference
from tdoanet.target import TargetModel


class StampedRing:
    """Fixed-depth buffer of ``(stamp, value)`` pairs, oldest evicted first."""

    def __init__(self, depth: int):
        if depth < 1:
            raise ConfigError("buffer depth must be >= 1")
        self.depth = depth
        self._buf: deque = deque(maxlen=depth)

    def __len__(self) -> int:
        return len(self._buf)

    def push(self, stamp: int, value: np.ndarray) -> None:
        if self._buf and stamp <= self._buf[-1][0]:
            raise ConfigError(f"stamps must increase: {stamp} after {self._buf[-1][0]}")
        self._buf.append((stamp, value))

    def oldest(self) -> tuple[int, np.ndarray]:
        return self._buf[0]

    def get(self, stamp: int) -> np.ndarray:
        s0 = self._buf[0][0]
        idx = stamp - s0
        if idx < 0 or idx >= len(self._buf) or self._buf[idx][0] != stamp:
            raise ConfigError(f"stamp {stamp} not in buffer (holds {s0}..{self._buf[-1][0]})")
        return self._buf[idx][1]


@dataclass
class EstimatorBank:
    """Mutable per-sensor state of the networked estimator.

    ``links[(j, i)]`` buffers the estimates sensor i has received from j;
    it holds the last ``tau_bar + 1`` of them, stamped with their step.
    """

    model: TargetModel
    mm: MeasurementModel
    cm: ConsensusMatrix
    gains: tuple[np.ndarray, ...]
    x_hat: np.ndarray  # n x N
    tau_bar: int = 0
    k: int = 0
    links: dict = field(default_factory=dict)
    fusion_order: tuple = ()

    @property
    def n(self) -> int:
        return self.x_hat.shape[0]


def make_bank(
    model: TargetModel,
    mm: MeasurementModel,
    cm: ConsensusMatrix,
    gains: Sequence[np.ndarray],
    x_hat0,
    tau_bar: int = 0,
) -> EstimatorBank:
    n, N = cm.n, model.N
    if mm.n != n or mm.N != N:
        raise ConfigError(f"measurement model is {mm.n} x {mm.N}, expected {n} x {N}")
    gains = tuple(np.asarray(g, dtype=float) for g in gains)
    if len(gains) != n or any(g.shape != (N, N) for g in gains):
        raise ConfigError(f"need {n} gain blocks of shape {N}x{N}")
    x_hat = np.array(x_hat0, dtype=float)
    if x_hat.shape != (n, N):
        raise ConfigError(f"initial estimates must be {n} x {N}, got {x_hat.shape}")
    if tau_bar < 0:
        raise ConfigError("tau_bar must be >= 0")
    W = cm.W
    order = tuple(
        tuple([i] + [j for j in range(n) if j != i and W[i, j] != 0.0]) for i in range(n)
    )
    links = {}
    for i in range(n):
        for j in order[i][1:]:
            ring = StampedRing(tau_bar + 1)
            ring.push(0, x_hat[j].copy())
            links[(j, i)] = ring
    return EstimatorBank(model, mm, cm, gains, x_hat, int(tau_bar), 0, links, order)


def _update(bank: EstimatorBank, priors: np.ndarray, ys: Sequence[np.ndarray]) -> None:
    """Local measurement update, then broadcast of the new estimates."""
    H = bank.mm.H
    post = np.empty_like(priors)
    for i in range(bank.n):
        innov = ys[i] - H[i] @ priors[i]
        post[i] = priors[i] + bank.gains[i] @ (H[i].T @ innov)
    bank.x_hat = post
    bank.k += 1
    for (j, i), ring in bank.links.items():
        ring.push(bank.k, post[j].copy())


def _check_measurements(bank: EstimatorBank, ys) -> None:
    if len(ys) != bank.n:
        raise ConfigError(f"expected {bank.n} measurement vectors, got {len(ys)}")
    for i, (y, r) in enumerate(zip(ys, bank.mm.rows)):
        if np.shape(y) != (r,):
            raise ConfigError(f"sensor {i}: measurement shape {np.shape(y)}, expected ({r},)")


def sts_step(bank: EstimatorBank, ys: Sequence[np.ndarray]) -> EstimatorBank:
    """One synchronous delay-free step. Updates ``bank`` in place and returns it."""
    _check_measurements(bank, ys)
    W, F = bank.cm.W, bank.model.F
    priors = np.zeros_like(bank.x_hat)
    for i in range(bank.n):
        for j in bank.fusion_order[i]:
            priors[i] += W[i, j] * (F @ bank.x_hat[j])
    _update(bank, priors, ys)
    return bank


def sts_step_delayed(bank: EstimatorBank, ys: Sequence[np.ndarray], delays: DelayMap) -> EstimatorBank:
    """One synchronous step where the link j -> i delivers ``x_j(k-1-tau_ij)``.

    The stale estimate is propagated to step k with ``F^(tau_ij + 1)``. Before
    enough history exists, the oldest buffered estimate is propagated with
    the matching power of F instead.
    """
    _check_measurements(bank, ys)
    if delays.tau_bar > bank.tau_bar:
        raise ConfigError(f"delay {delays.tau_bar} exceeds buffer depth {bank.tau_bar + 1}")
    W, F = bank.cm.W, bank.model.F
    powers = _powers(bank)
    k = bank.k + 1
    priors = np.zeros_like(bank.x_hat)
    for i in range(bank.n):
        order = bank.fusion_order[i]
        priors[i] += W[i, i] * (F @ bank.x_hat[i])
        for j in order[1:]:
            tau = delays.get(j, i)
            ring = bank.links[(j, i)]
            stamp = k - 1 - tau
            if stamp >= ring.oldest()[0]:
                xj, lag = ring.get(stamp), tau + 1
            else:
                s0, xj = ring.oldest()
                lag = k - s0
            priors[i] += W[i, j] * (powers[lag] @ xj)
    _update(bank, priors, ys)
    return bank


def _powers(bank: EstimatorBank) -> list[np.ndarray]:
    cache = getattr(bank, "_pow_cache", None)
    if cache is None or len(cache) < bank.tau_bar + 2:
        cache = [mat_pow(bank.model.F, r) for r in range(bank.tau_bar + 2)]
        object.__setattr__(bank, "_pow_cache", cache)
    return cache


# -- noise, truth and measurements ------------------------------------------


@dataclass(frozen=True)
class NoiseRealization:
    """Process inputs ``w[k-1]`` (drives x(k-1) -> x(k)) and per-sensor
    measurement noise ``v[i][k-1]`` (corrupts y_i(k)), k = 1..steps."""

    w: np.ndarray  # steps x 3
    v: tuple[np.ndarray, ...]  # per sensor, steps x rows_i

    @property
    def steps(self) -> int:
        return self.w.shape[0]


def draw_noise(model: TargetModel, mm: MeasurementModel, steps: int, rng: np.random.Generator) -> NoiseRealization:
    w = model.process_noise_std * rng.standard_normal((steps, 3))
    v = tuple(mm.noise_std * rng.standard_normal((steps, r)) for r in mm.rows)
    return NoiseRealization(w, v)


def zero_noise(model: TargetModel, mm: MeasurementModel, steps: int) -> NoiseRealization:
    return NoiseRealization(np.zeros((steps, 3)), tuple(np.zeros((steps, r)) for r in mm.rows))


def truth_trajectory(model: TargetModel, x0, w: np.ndarray) -> np.ndarray:
    """``(steps + 1) x N`` states driven by the given inputs."""
    x = np.empty((w.shape[0] + 1, model.N))
    x[0] = x0
    for k in range(w.shape[0]):
        x[k + 1] = model.F @ x[k] + model.G @ w[k]
    return x


def linear_measurements(mm: MeasurementModel, x, v_k: Sequence[np.ndarray]) -> list[np.ndarray]:
    """Bias-compensated squared-range TDOA rows for every sensor at state x."""
    return [
        squared_range_difference(mm.array, i, mm.neighbors[i], x) + v_k[i] + mm.bias[i]
        for i in range(mm.n)
    ]


def _fault_rows(faults: Sequence[FaultSpec], mm: MeasurementModel, k: int) -> list[np.ndarray]:
    f = [np.zeros(r) for r in mm.rows]
    for spec in faults:
        if not 0 <= spec.sensor < mm.n:
            raise ConfigError(f"fault on unknown sensor {spec.sensor}")
        if spec.vector.shape[0] > mm.rows[spec.sensor]:
            raise ConfigError("fault vector longer than the measurement")
        f[spec.sensor] = f[spec.sensor] + spec.at(k, mm.rows[spec.sensor])
    return f


# -- traces -----------------------------------------------------------------


@dataclass(frozen=True)
class ErrorTrace:
    """Errors ``e_i(k) = x(k) - x_i(k)`` for k = 0..steps."""

    errors: np.ndarray  # (steps + 1) x sensors x N
    residuals: Optional[tuple[np.ndarray, ...]] = None  # per sensor, steps x rows_i

    @property
    def steps(self) -> int:
        return self.errors.shape[0] - 1

    def msee(self) -> np.ndarray:
        """Per-step mean over sensors of ``||e_i(k)||^2``, k = 1..steps."""
        return np.mean(np.sum(self.errors[1:] ** 2, axis=2), axis=1)


def msee(traces: Sequence[ErrorTrace]) -> np.ndarray:
    """MSEE curve averaged over sensors and trials."""
    if len(traces) == 0:
        raise ConfigError("msee needs at least one trace")
    steps = {t.steps for t in traces}
    if len(steps) != 1:
        raise ConfigError(f"traces have different lengths: {sorted(steps)}")
    return np.mean([t.msee() for t in traces], axis=0)


def run_protocol(
    bank: EstimatorBank,
    x0,
    noise: NoiseRealization,
    delays: Optional[DelayMap] = None,
    faults: Sequence[FaultSpec] = (),
    keep_residuals: bool = False,
) -> ErrorTrace:
    """Drive ``bank`` against a simulated target for ``noise.steps`` steps.

    With ``delays`` the delayed protocol is used (the bank must have been
    built with a sufficient ``tau_bar``).
    """
    mm = bank.mm
    x = truth_trajectory(bank.model, x0, noise.w)
    errors = np.empty((noise.steps + 1, bank.n, bank.model.N))
    errors[0] = x[0] - bank.x_hat
    res = [np.empty((noise.steps, r)) for r in mm.rows] if keep_residuals else None
    for k in range(1, noise.steps + 1):
        ys = linear_measurements(mm, x[k], [v[k - 1] for v in noise.v])
        if faults:
            ys = [y + f for y, f in zip(ys, _fault_rows(faults, mm, k))]
        if delays is None:
            sts_step(bank, ys)
        else:
            sts_step_delayed(bank, ys, delays)
        errors[k] = x[k] - bank.x_hat
        if res is not None:
            for i in range(bank.n):
                res[i][k - 1] = np.abs(ys[i] - mm.H[i] @ bank.x_hat[i])
        if not np.all(np.isfinite(bank.x_hat)):
            raise NumericalError(f"estimate became non-finite at step {k}")
    return ErrorTrace(errors, tuple(res) if res is not None else None)


# -- closed-form error recursion --------------------------------------------


def noise_term(
    model: TargetModel,
    mm: MeasurementModel,
    K: np.ndarray,
    w_prev: np.ndarray,
    v_k: Sequence[np.ndarray],
    f_k: Optional[Sequence[np.ndarray]] = None,
) -> np.ndarray:
    """Stacked ``eta(k)`` driving the error recursion.

    ``eta = 1 (x) G w - K (D_H (1 (x) G w) + Dbar_H^T v) - K Dbar_H^T f``.
    """
    n = mm.n
    gw = np.tile(model.G @ w_prev, n)
    Db = mm.D_H_bar()
    v = np.concatenate(list(v_k))
    eta = gw - K @ (mm.D_H() @ gw + Db.T @ v)
    if f_k is not None:
        eta = eta - K @ (Db.T @ np.concatenate(list(f_k)))
    return eta


def error_dynamics_oracle(
    cm: ConsensusMatrix,
    model: TargetModel,
    mm: MeasurementModel,
    K: np.ndarray,
    e0,
    noise: NoiseRealization,
    faults: Sequence[FaultSpec] = (),
) -> ErrorTrace:
    """Iterate ``e(k) = Fhat e(k-1) + eta(k)`` on the stacked error vector."""
    from tdoanet.gain import closed_loop

    n, N = cm.n, model.N
    K = np.asarray(K, dtype=float)
    Fhat = closed_loop(cm, model, mm, K)
    Db_T = mm.D_H_bar().T
    KD = K @ mm.D_H()
    ones_G = np.tile(model.G, (n, 1))
    e = np.asarray(e0, dtype=float).reshape(n * N)
    out = np.empty((noise.steps + 1, n * N))
    out[0] = e
    for k in range(1, noise.steps + 1):
        gw = ones_G @ noise.w[k - 1]
        v = np.concatenate([vi[k - 1] for vi in noise.v])
        if faults:
            v = v + np.concatenate(_fault_rows(faults, mm, k))
        e = Fhat @ e + gw - KD @ gw - K @ (Db_T @ v)
        out[k] = e
    return ErrorTrace(out.reshape(noise.steps + 1, n, N))


# -- centralized Kalman filter baseline --------------------------------------


class KfMode(str, Enum):
    LINEAR = "linear"  # constant H of the squared-range model
    TRUTH = "linearized_truth"  # range-difference Jacobian at the true position
    ESTIMATE = "linearized_estimate"  # Jacobian at the predicted estimate (EKF)


def centralized_kf(
    model: TargetModel,
    mm: MeasurementModel,
    x_true: np.ndarray,
    x_hat0: np.ndarray,
    P0: np.ndarray,
    v: np.ndarray,
    mode: KfMode,
    meas_std: float,
) -> np.ndarray:
    """Centralized Kalman filter over all sensors' rows, batched over trials.

    ``x_true`` is ``trials x (steps + 1) x N``, ``x_hat0`` is ``trials x N``
    and ``v`` holds standard-normal draws of shape ``trials x steps x rows``,
    scaled by ``meas_std``. The same draws serve every mode, so the
    comparison uses common random numbers. Returns the estimation errors,
    ``trials x (steps + 1) x N``.

    In the linearized modes the measurements are range differences and the
    innovation is ``y - h(x_prior)``; only the Jacobian's evaluation point
    differs between them.
    """
    mode = KfMode(mode)
    x_true = np.asarray(x_true, dtype=float)
    trials, steps1, N = x_true.shape
    steps = steps1 - 1
    H_lin = mm.stacked()
    rows = H_lin.shape[0]
    if v.shape != (trials, steps, rows):
        raise ConfigError(f"noise must be {(trials, steps, rows)}, got {v.shape}")
    F = model.F
    Q = model.process_noise_std**2 * model.G @ model.G.T
    R = meas_std**2 * np.eye(rows)
    bias = np.concatenate(mm.bias)
    pairs = [(i, j) for i, nb in enumerate(mm.neighbors) for j in nb]
    P_i = mm.array.positions[[i for i, _ in pairs]]
    P_j = mm.array.positions[[j for _, j in pairs]]

    def h_range(p):  # trials x 3 -> trials x rows
        return np.linalg.norm(p[:, None, :] - P_i, axis=2) - np.linalg.norm(p[:, None, :] - P_j, axis=2)

    def jac(p):
        ui = p[:, None, :] - P_i
        uj = p[:, None, :] - P_j
        ni = np.linalg.norm(ui, axis=2, keepdims=True)
        nj = np.linalg.norm(uj, axis=2, keepdims=True)
        if np.any(ni == 0) or np.any(nj == 0):
            raise NumericalError("linearization point coincides with a sensor")
        Hb = np.zeros((p.shape[0], rows, N))
        Hb[:, :, :3] = ui / ni - uj / nj
        return Hb

    x = np.array(x_hat0, dtype=float)
    P = np.broadcast_to(P0, (trials, N, N)).copy()
    err = np.empty_like(x_true)
    err[:, 0] = x_true[:, 0] - x
    for k in range(1, steps + 1):
        x = x @ F.T
        P = F @ P @ F.T + Q
        p_true = x_true[:, k, :3]
        noise = meas_std * v[:, k - 1]
        if mode is KfMode.LINEAR:
            # y = raw squared-range difference + noise + known bias
            d2 = np.sum((p_true[:, None, :] - P_i) ** 2, axis=2) - np.sum((p_true[:, None, :] - P_j) ** 2, axis=2)
            y = 0.5 * d2 + noise + bias
            Hk = np.broadcast_to(H_lin, (trials, rows, N))
            innov = y - x @ H_lin.T
        else:
            y = h_range(p_true) + noise
            Hk = jac(p_true if mode is KfMode.TRUTH else x[:, :3])
            innov = y - h_range(x[:, :3])
        S = Hk @ P @ np.swapaxes(Hk, 1, 2) + R
        PHt = P @ np.swapaxes(Hk, 1, 2)
        try:
            gain = np.swapaxes(np.linalg.solve(S, np.swapaxes(PHt, 1, 2)), 1, 2)
        except np.linalg.LinAlgError as exc:
            raise NumericalError(f"innovation covariance singular at step {k}") from exc
        x = x + np.einsum("tnr,tr->tn", gain, innov)
        IKH = np.eye(N) - gain @ Hk
        P = IKH @ P @ np.swapaxes(IKH, 1, 2) + gain @ R @ np.swapaxes(gain, 1, 2)
        err[:, k] = x_true[:, k] - x
        if not np.all(np.isfinite(x)):
            raise NumericalError(f"Kalman estimate became non-finite at step {k}")
    return err
