"""TDOA measurement models.

Two observation models are provided:

* the squared-range-difference model, which after adding a known constant
  becomes exactly linear in the state, ``y_i = H_i x + v_i`` with a constant
  ``H_i`` built from relative sensor positions;
* the classical range-difference model ``||p - p_i|| - ||p - p_j||`` and its
  Jacobian, used by the linearized baselines.

Rows of ``H_i`` and ``y_i`` follow the (ordered) neighbour list of sensor i.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from tdoanet.errors import ConfigError
from tdoanet.matlib import block_diag

SPEED_OF_LIGHT = 299_792_458.0


@dataclass(frozen=True)
class SensorArray:
    positions: np.ndarray  # n x 3, metres
    c: float = SPEED_OF_LIGHT  # beacon propagation speed, m/s (bookkeeping only)

    def __post_init__(self):
        p = np.array(self.positions, dtype=float)
        if p.ndim != 2 or p.shape[1] != 3 or p.shape[0] < 2:
            raise ConfigError(f"positions must be n x 3 with n >= 2, got {p.shape}")
        if not np.all(np.isfinite(p)):
            raise ConfigError("sensor positions must be finite")
        d = np.linalg.norm(p[:, None, :] - p[None, :, :], axis=-1)
        np.fill_diagonal(d, np.inf)
        if np.min(d) == 0.0:
            raise ConfigError("two sensors share the same position")
        p.setflags(write=False)
        object.__setattr__(self, "positions", p)

    @property
    def n(self) -> int:
        return self.positions.shape[0]

    def toa(self, p) -> np.ndarray:
        """Times of arrival of a beacon emitted at ``p``."""
        return np.linalg.norm(np.asarray(p)[None, :] - self.positions, axis=1) / self.c


@dataclass(frozen=True)
class MeasurementModel:
    array: SensorArray
    neighbors: tuple[tuple[int, ...], ...]
    H: tuple[np.ndarray, ...]  # per sensor |N_i| x N
    bias: tuple[np.ndarray, ...]  # per sensor, 0.5 (||p_j||^2 - ||p_i||^2)
    N: int
    noise_std: float = 0.0

    @property
    def n(self) -> int:
        return len(self.H)

    @property
    def rows(self) -> tuple[int, ...]:
        return tuple(h.shape[0] for h in self.H)

    def gram_blocks(self) -> list[np.ndarray]:
        return [h.T @ h for h in self.H]

    def D_H(self) -> np.ndarray:
        """``blkdiag(H_i^T H_i)``, square of size n*N."""
        return block_diag(self.gram_blocks())

    def D_H_bar(self) -> np.ndarray:
        """``blkdiag(H_i)``, of size sum|N_i| x n*N."""
        return block_diag(list(self.H))

    def stacked(self) -> np.ndarray:
        """All sensors' rows stacked, as seen by a central fusion node."""
        return np.vstack(self.H)


def _check_neighbors(n: int, neighbors: Sequence[Sequence[int]]) -> tuple[tuple[int, ...], ...]:
    if len(neighbors) != n:
        raise ConfigError(f"expected {n} neighbour lists, got {len(neighbors)}")
    out = []
    for i, nb in enumerate(neighbors):
        nb = tuple(int(j) for j in nb)
        if not nb:
            raise ConfigError(f"sensor {i} has no neighbours and hence no TDOA rows")
        if any(j == i or not 0 <= j < n for j in nb):
            raise ConfigError(f"invalid neighbour list for sensor {i}: {nb}")
        if len(set(nb)) != len(nb):
            raise ConfigError(f"duplicate neighbour in list for sensor {i}: {nb}")
        out.append(nb)
    return tuple(out)


def build_measurement_model(
    array: SensorArray, neighbors: Sequence[Sequence[int]], N: int, noise_std: float = 0.0
) -> MeasurementModel:
    if N not in (6, 9):
        raise ConfigError(f"state dimension must be 6 or 9, got {N}")
    if noise_std < 0:
        raise ConfigError("noise_std must be >= 0")
    nbrs = _check_neighbors(array.n, neighbors)
    P = array.positions
    sq = np.sum(P**2, axis=1)
    H, bias = [], []
    for i, nb in enumerate(nbrs):
        idx = list(nb)
        Hi = np.zeros((len(nb), N))
        Hi[:, :3] = P[idx] - P[i]
        Hi.setflags(write=False)
        b = 0.5 * (sq[idx] - sq[i])
        b.setflags(write=False)
        H.append(Hi)
        bias.append(b)
    return MeasurementModel(array, nbrs, tuple(H), tuple(bias), N, float(noise_std))


def squared_range_difference(array: SensorArray, i: int, neighbors: Sequence[int], p) -> np.ndarray:
    """Uncompensated observable ``0.5 (||p - p_i||^2 - ||p - p_j||^2)`` per neighbour j."""
    p = np.asarray(p, dtype=float)[:3]
    P = array.positions
    di = np.sum((p - P[i]) ** 2)
    dj = np.sum((p - P[list(neighbors)]) ** 2, axis=1)
    return 0.5 * (di - dj)


def measure_linear(
    model: MeasurementModel, i: int, x, rng: Optional[np.random.Generator] = None
) -> np.ndarray:
    """Bias-compensated squared-range TDOA of sensor i: ``H_i x + v_i``.

    The noise is added to the raw squared-range observable before the known
    bias is compensated.
    """
    x = np.asarray(x, dtype=float)
    if x.shape != (model.N,):
        raise ConfigError(f"state must have length {model.N}, got {x.shape}")
    raw = squared_range_difference(model.array, i, model.neighbors[i], x)
    if model.noise_std > 0:
        if rng is None:
            raise ConfigError("rng required when noise_std > 0")
        raw = raw + model.noise_std * rng.standard_normal(raw.shape[0])
    return raw + model.bias[i]


def measure_all_linear(
    model: MeasurementModel, x, rng: Optional[np.random.Generator] = None
) -> list[np.ndarray]:
    return [measure_linear(model, i, x, rng) for i in range(model.n)]


def range_difference(array: SensorArray, i: int, neighbors: Sequence[int], p) -> np.ndarray:
    """Noise-free ``||p - p_i|| - ||p - p_j||`` per neighbour j."""
    p = np.asarray(p, dtype=float)[:3]
    P = array.positions
    return np.linalg.norm(p - P[i]) - np.linalg.norm(p - P[list(neighbors)], axis=1)


def measure_nonlinear(
    array: SensorArray,
    i: int,
    neighbors: Sequence[int],
    x,
    rng: Optional[np.random.Generator] = None,
    noise_std: float = 0.0,
) -> np.ndarray:
    p = np.asarray(x, dtype=float)[:3]
    anchors = array.positions[[i, *neighbors]]
    if np.any(np.all(anchors == p, axis=1)):
        raise ConfigError("target is colocated with a sensor")
    y = range_difference(array, i, neighbors, p)
    if noise_std > 0:
        if rng is None:
            raise ConfigError("rng required when noise_std > 0")
        y = y + noise_std * rng.standard_normal(y.shape[0])
    return y


def linearized_output(array: SensorArray, i: int, neighbors: Sequence[int], p_ref, N: int) -> np.ndarray:
    """Jacobian of the range-difference rows at ``p_ref``, zero-padded to N columns."""
    p = np.asarray(p_ref, dtype=float)[:3]
    P = array.positions
    ui = p - P[i]
    uj = p - P[list(neighbors)]
    ni = np.linalg.norm(ui)
    nj = np.linalg.norm(uj, axis=1)
    if ni == 0.0 or np.any(nj == 0.0):
        raise ConfigError("linearization point coincides with a sensor")
    Hb = np.zeros((len(neighbors), N))
    Hb[:, :3] = ui / ni - uj / nj[:, None]
    return Hb


@dataclass(frozen=True)
class FaultSpec:
    sensor: int
    onset: int
    vector: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        if self.onset < 0:
            raise ConfigError("fault onset must be >= 0")
        object.__setattr__(self, "vector", np.asarray(self.vector, dtype=float))

    def at(self, k: int, rows: int) -> np.ndarray:
        """Fault vector active at step k, zero before onset."""
        f = np.zeros(rows)
        if k >= self.onset:
            f[: self.vector.shape[0]] = self.vector
        return f


def inject_fault(y_i, spec: FaultSpec, k: int) -> np.ndarray:
    y = np.asarray(y_i, dtype=float)
    if spec.vector.shape[0] > y.shape[0]:
        raise ConfigError("fault vector longer than the measurement")
    return y + spec.at(k, y.shape[0])
