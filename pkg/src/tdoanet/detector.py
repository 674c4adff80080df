"""Per-sensor fault detection on absolute measurement residuals.

Each sensor watches ``r_i(k) = |y_i(k) - H_i x_i(k)|`` computed from its own
data only. Two tests are offered:

* stateless: alarm when any component of ``r_i(k)`` exceeds ``T_kappa``;
* stateful: alarm when the window sum ``z_i(k) = sum ||r_i(m)||^2 / Phi`` over
  the last ``theta`` steps exceeds a chi-square quantile.

Thresholds come from fault-free calibration data.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import stats

from tdoanet.errors import ConfigError

MIN_CALIBRATION_SAMPLES = 1000


def residual(y_i, H_i, x_hat_i) -> np.ndarray:
    """Elementwise absolute innovation at the posterior estimate."""
    y = np.asarray(y_i, dtype=float)
    H = np.asarray(H_i, dtype=float)
    x = np.asarray(x_hat_i, dtype=float)
    if H.shape != (y.shape[0], x.shape[0]):
        raise ConfigError(f"dimension mismatch: y {y.shape}, H {H.shape}, x {x.shape}")
    return np.abs(y - H @ x)


@dataclass
class ResidualMonitor:
    """Calibrated detector state for one sensor.

    ``dof`` is the chi-square degrees of freedom and ``scale`` multiplies the
    quantile; the nominal choice is ``dof = theta * rows`` and ``scale = 1``.
    """

    rows: int
    theta: int
    kappa: float
    phi: float
    T_kappa: float
    dof: float
    scale: float = 1.0
    history: deque = field(default_factory=deque)

    def __post_init__(self):
        if self.theta < 1:
            raise ConfigError("window theta must be >= 1")
        if not 0 < self.kappa < 1:
            raise ConfigError("kappa must lie in (0, 1)")
        if not self.phi > 0:
            raise ConfigError("Phi must be positive")
        self.history = deque(self.history, maxlen=self.theta)

    @property
    def chi2_threshold(self) -> float:
        return float(self.scale * stats.chi2.ppf(1.0 - self.kappa, self.dof))

    def push(self, r) -> None:
        r = np.asarray(r, dtype=float)
        if r.shape != (self.rows,):
            raise ConfigError(f"residual must have shape ({self.rows},), got {r.shape}")
        self.history.append(r)

    def reset(self) -> None:
        self.history.clear()


def calibrate(
    residuals,
    kappa: float,
    theta: int,
    effective_dof: bool = False,
) -> ResidualMonitor:
    """Fit a monitor to fault-free residuals of one sensor (``steps x rows``).

    ``Phi`` is the sample second moment per residual entry and ``T_kappa`` the
    empirical ``1 - kappa`` quantile of the per-step largest component, so
    the any-component rule alarms at rate ``kappa`` on the calibration data.

    With ``effective_dof`` the chi-square reference is moment-matched to the
    empirical window sums (``z ~ c chi2(nu)``), which absorbs the serial
    correlation of the residuals; otherwise ``nu = theta * rows``.
    """
    r = np.asarray(residuals, dtype=float)
    if r.ndim == 1:
        r = r[:, None]
    if r.ndim != 2 or r.size < MIN_CALIBRATION_SAMPLES:
        raise ConfigError(f"need >= {MIN_CALIBRATION_SAMPLES} residual samples, got {r.size}")
    if not 0 < kappa < 1:
        raise ConfigError("kappa must lie in (0, 1)")
    if theta < 1 or theta > r.shape[0]:
        raise ConfigError(f"window theta must lie in [1, {r.shape[0]}]")
    phi = float(np.mean(r**2))
    if not phi > 0:
        raise ConfigError("fault-free residuals are identically zero; Phi undefined")
    T = float(np.quantile(np.max(r, axis=1), 1.0 - kappa, method="higher"))
    rows = r.shape[1]
    dof, scale = float(theta * rows), 1.0
    if effective_dof:
        z = window_sums(r, theta, phi)
        mean, var = float(np.mean(z)), float(np.var(z))
        if var > 0:
            scale = var / (2.0 * mean)
            dof = 2.0 * mean**2 / var
    return ResidualMonitor(rows, int(theta), float(kappa), phi, T, dof, scale)


def window_sums(r: np.ndarray, theta: int, phi: float) -> np.ndarray:
    """All full-window values of ``z``, one per step from ``theta - 1`` on."""
    e = np.sum(np.asarray(r, dtype=float) ** 2, axis=1) / phi
    c = np.concatenate([[0.0], np.cumsum(e)])
    return c[theta:] - c[:-theta]


def stateless_detect(monitor: ResidualMonitor, r) -> bool:
    """Alarm iff some residual component strictly exceeds ``T_kappa``."""
    if monitor is None or not np.isfinite(monitor.T_kappa):
        raise ConfigError("monitor is not calibrated")
    return bool(np.any(np.asarray(r, dtype=float) > monitor.T_kappa))


@dataclass(frozen=True)
class StatefulResult:
    z: float
    alarm: bool


def stateful_detect(monitor: ResidualMonitor, r=None) -> StatefulResult:
    """Push ``r`` (if given) and test the window sum of the last ``theta`` residuals."""
    if r is not None:
        monitor.push(r)
    if len(monitor.history) < monitor.theta:
        raise ConfigError(f"need {monitor.theta} residuals, have {len(monitor.history)}")
    z = float(sum(float(np.dot(x, x)) for x in monitor.history) / monitor.phi)
    return StatefulResult(z, z > monitor.chi2_threshold)


def alarm_series(monitor: ResidualMonitor, r: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized detectors over a residual record (``steps x rows``).

    Returns the stateless alarms for every step and the stateful alarms for
    every step with a full window (``steps - theta + 1`` values).
    """
    r = np.asarray(r, dtype=float)
    stateless = np.any(r > monitor.T_kappa, axis=1)
    stateful = window_sums(r, monitor.theta, monitor.phi) > monitor.chi2_threshold
    return stateless, stateful


def first_alarm(alarms: np.ndarray, start: int = 0) -> Optional[int]:
    """Index of the first alarm at or after ``start``, or None."""
    idx = np.flatnonzero(np.asarray(alarms)[start:])
    return int(idx[0]) + start if idx.size else None
