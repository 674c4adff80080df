"""Discrete-time NCV / NCA target models and trajectory simulation."""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Callable, Optional

import numpy as np

from tdoanet.errors import ConfigError


class ModelKind(str, Enum):
    NCV = "NCV"
    NCA = "NCA"


@dataclass(frozen=True)
class TargetModel:
    kind: ModelKind
    T: float
    F: np.ndarray  # N x N transition
    G: np.ndarray  # N x 3 input
    process_noise_std: float = 0.0

    @property
    def N(self) -> int:
        return self.F.shape[0]


@dataclass(frozen=True)
class TargetState:
    x: np.ndarray  # positions, velocities[, accelerations], each (x, y, z)
    k: int = 0

    @property
    def position(self) -> np.ndarray:
        return self.x[:3]


def build_model(kind, T: float, process_noise_std: float = 0.0) -> TargetModel:
    kind = ModelKind(kind)
    if not T > 0:
        raise ConfigError(f"sampling interval T must be positive, got {T}")
    if process_noise_std < 0:
        raise ConfigError("process_noise_std must be >= 0")
    I3, Z3 = np.eye(3), np.zeros((3, 3))
    if kind is ModelKind.NCV:
        F = np.block([[I3, T * I3], [Z3, I3]])
        G = np.vstack([T**2 / 2 * I3, T * I3])
    else:
        F = np.block([[I3, T * I3, T**2 / 2 * I3], [Z3, I3, T * I3], [Z3, Z3, I3]])
        G = np.vstack([T**2 / 2 * I3, T * I3, I3])
    F.setflags(write=False)
    G.setflags(write=False)
    return TargetModel(kind, float(T), F, G, float(process_noise_std))


def step(model: TargetModel, state: TargetState, w) -> TargetState:
    x = np.asarray(state.x, dtype=float)
    w = np.asarray(w, dtype=float)
    if x.shape != (model.N,) or w.shape != (3,):
        raise ConfigError(f"dimension mismatch: x {x.shape}, w {w.shape}, N={model.N}")
    return TargetState(model.F @ x + model.G @ w, state.k + 1)


def gaussian_inputs(model: TargetModel, steps: int, rng: np.random.Generator) -> np.ndarray:
    """``steps x 3`` i.i.d. N(0, std^2) process-noise inputs."""
    return model.process_noise_std * rng.standard_normal((steps, 3))


NoiseStream = Callable[[TargetModel, int, np.random.Generator], np.ndarray]


def simulate(
    model: TargetModel,
    x0: TargetState,
    steps: int,
    rng: Optional[np.random.Generator] = None,
    noise: NoiseStream = gaussian_inputs,
    inputs: Optional[np.ndarray] = None,
) -> list[TargetState]:
    """Ground-truth trajectory of length ``steps + 1`` starting at ``x0``.

    Process noise comes from ``inputs`` if given (``steps x 3``), otherwise
    from ``noise(model, steps, rng)``; any zero-mean white stream may be
    plugged in there.
    """
    if steps < 1:
        raise ConfigError("steps must be >= 1")
    if inputs is None:
        if rng is None:
            rng = np.random.default_rng(0)
        inputs = noise(model, steps, rng)
    inputs = np.asarray(inputs, dtype=float)
    if inputs.shape != (steps, 3):
        raise ConfigError(f"inputs must have shape ({steps}, 3), got {inputs.shape}")
    traj = [TargetState(np.asarray(x0.x, dtype=float), x0.k)]
    for k in range(steps):
        traj.append(step(model, traj[-1], inputs[k]))
    return traj


def trajectory_array(traj: list[TargetState]) -> np.ndarray:
    return np.stack([s.x for s in traj])
