"""Block-diagonal observer gain synthesis and delay-margin certification.

The networked error dynamics are ``e(k) = Fh e(k-1) + eta(k)`` with

    Fh = (W kron F) - K D_H (W kron F),   D_H = blkdiag(H_i^T H_i),

and ``K = blkdiag(K_i)`` must stay block-diagonal so every sensor only uses
its own gain. Two synthesis routes are available:

``ccl``
    Cone-complementarity linearization. Each outer iteration solves the
    semidefinite program

        min  trace(Y_t X + X_t Y)
        s.t. [[a X, Fh^T], [Fh, a Y]] >= 0,  [[X, I], [I, Y]] >= 0,  X, Y > 0

    over ``(X, Y, K)`` with ``a = rho_target``, then sets ``(X_t, Y_t) = (X, Y)``.
    At ``XY = I`` the first block certifies ``rho(Fh) <= a``. The loop stops
    when the candidate K is certified, or when the linearized objective drops
    below ``2 n N + epsilon``.

``spectral``
    Direct minimization of a log-sum-exp smoothing of the eigenvalue moduli
    of ``Fh`` over the block-diagonal entries of K (L-BFGS with analytic
    eigenvalue derivatives), stopping as soon as ``rho(Fh) <= rho_target``.

Optionally (``delay_design > 0``) the gain is then refined so that the exact
error recursion under a few sampled heterogeneous delay maps is also
contractive. Gains that merely meet the delay-free target can be fragile
under unequal link delays even when the delay bound below is below one.

Whatever the route, the returned gain is certified by recomputing
``rho(Fh)`` from scratch.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
import scipy.linalg
from scipy.optimize import minimize

from tdoanet.errors import ConfigError, GainSynthesisError, ObservabilityError
from tdoanet.matlib import block_diag, kron, mat_pow, spectral_radius
from tdoanet.network import ConsensusMatrix, DelayMap, check_distributed_observability

log = logging.getLogger(__name__)

GAIN_FORMAT = "tdoanet.gainset"


@dataclass(frozen=True)
class LmiConfig:
    epsilon: float = 1e-2
    max_outer_iters: int = 40
    inner_tol: float = 1e-5
    rho_target: float = 0.996
    method: str = "auto"  # "auto" | "ccl" | "spectral"
    ccl_max_dim: int = 36  # "auto" runs CCL only when n*N <= this
    restarts: int = 4
    init_scale: float = 1e-3
    solver: str = "SCS"
    delay_design: int = 0  # max delay of the sampled maps used for refinement; 0 disables
    delay_samples: int = 4
    delay_rho_target: float = 0.996

    def __post_init__(self):
        if self.epsilon <= 0 or self.inner_tol <= 0 or self.max_outer_iters < 1:
            raise ConfigError("epsilon, inner_tol and max_outer_iters must be positive")
        if not 0 < self.rho_target < 1:
            raise ConfigError("rho_target must lie in (0, 1)")
        if self.method not in ("auto", "ccl", "spectral"):
            raise ConfigError(f"unknown synthesis method {self.method!r}")
        if self.restarts < 1 or self.init_scale <= 0:
            raise ConfigError("restarts and init_scale must be positive")
        if self.delay_design < 0 or self.delay_samples < 1 or not 0 < self.delay_rho_target < 1:
            raise ConfigError("invalid delay refinement settings")

    @classmethod
    def from_dict(cls, d: dict) -> "LmiConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown gain settings: {sorted(unknown)}")
        return cls(**d)


@dataclass
class GainSet:
    blocks: list[np.ndarray]
    rho_closed_loop: float
    method_log: list[str] = field(default_factory=list)

    @property
    def n(self) -> int:
        return len(self.blocks)

    @property
    def N(self) -> int:
        return self.blocks[0].shape[0]

    def K(self) -> np.ndarray:
        return block_diag(self.blocks)

    def to_dict(self) -> dict:
        return {
            "format": GAIN_FORMAT,
            "version": 1,
            "n": self.n,
            "N": self.N,
            "rho_closed_loop": self.rho_closed_loop,
            "blocks": [b.tolist() for b in self.blocks],
            "method_log": list(self.method_log),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GainSet":
        if d.get("format") != GAIN_FORMAT or d.get("version") != 1:
            raise ConfigError("not a version-1 gain file")
        blocks = [np.asarray(b, dtype=float) for b in d["blocks"]]
        if len(blocks) != d["n"] or any(b.shape != (d["N"], d["N"]) for b in blocks):
            raise ConfigError("gain file blocks do not match the declared n, N")
        return cls(blocks, float(d["rho_closed_loop"]), list(d.get("method_log", [])))

    def save(self, path: Union[str, Path]) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: Union[str, Path]) -> "GainSet":
        try:
            d = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read gain file {path}: {exc}") from exc
        return cls.from_dict(d)


def _gain_matrix(K) -> np.ndarray:
    return K.K() if isinstance(K, GainSet) else np.asarray(K, dtype=float)


def closed_loop_matrix(A, D_H, K) -> np.ndarray:
    """``A - K D_H A`` for raw matrices."""
    A = np.asarray(A, dtype=float)
    K = _gain_matrix(K)
    D_H = np.asarray(D_H, dtype=float)
    if not (A.shape == D_H.shape == K.shape and A.shape[0] == A.shape[1]):
        raise ConfigError(f"dimension mismatch: A {A.shape}, D_H {D_H.shape}, K {K.shape}")
    return A - K @ D_H @ A


def closed_loop(cm: ConsensusMatrix, model, mm, K) -> np.ndarray:
    """Networked error-dynamics matrix ``W kron F - K D_H (W kron F)``."""
    return closed_loop_matrix(kron(cm.W, model.F), mm.D_H(), K)


# --------------------------------------------------------------------------
# synthesis


def _split_blocks(K: np.ndarray, n: int, N: int) -> list[np.ndarray]:
    return [K[i * N : (i + 1) * N, i * N : (i + 1) * N].copy() for i in range(n)]


def _smoothed_radius(theta, A, DA, n, N, p):
    """log-sum-exp of |eig(A - K DA)| with weight p, and its gradient in K's blocks."""
    K = block_diag(list(theta.reshape(n, N, N)))
    M = A - K @ DA
    lam, V = np.linalg.eig(M)
    try:
        U = np.linalg.inv(V)
    except np.linalg.LinAlgError:
        U = np.linalg.pinv(V)
    a = np.abs(lam)
    top = a.max()
    w = np.exp(p * (a - top))
    s = w.sum()
    value = top + np.log(s) / p
    coef = (w / s) * np.conj(lam) / np.maximum(a, 1e-300)
    S = (V * coef) @ U
    gK = -np.real(S).T @ DA.T
    grad = np.stack([gK[i * N : (i + 1) * N, i * N : (i + 1) * N] for i in range(n)]).ravel()
    return value, grad


def _smoothed_radius_multi(theta, systems, n, N, p):
    """Joint log-sum-exp of the eigenvalue moduli of ``Z0 - E K Q`` over
    ``systems = [(Z0, Q), ...]``, where ``E`` selects the leading ``n N`` rows.

    Uses left/right eigenvector pairs, so exactly defective eigenvalues (the
    zero eigenvalues of delay companions) are tolerated; eigenvalues with a
    near-zero ``u^H v`` contribute no gradient.
    """
    nN = n * N
    K = block_diag(list(theta.reshape(n, N, N)))
    mats = []
    for Z0, Q in systems:
        M = Z0.copy()
        M[:nN] -= K @ Q
        lam, UL, VR = scipy.linalg.eig(M, left=True, right=True)
        mats.append((np.abs(lam), lam, UL, VR, Q))
    top = max(a.max() for a, *_ in mats)
    s = sum(np.exp(p * (a - top)).sum() for a, *_ in mats)
    g = np.zeros((nN, nN))
    for a, lam, UL, VR, Q in mats:
        w = np.exp(p * (a - top)) / s
        for l in np.flatnonzero((w > 1e-12) & (a > 1e-9)):
            u, v = UL[:, l], VR[:, l]
            d = np.conj(u) @ v
            if abs(d) < 1e-10:
                continue
            # d|lam| / dM = Re(conj(lam)/|lam| * conj(u) v^T / (u^H v))
            G = np.real(np.conj(lam[l]) / a[l] * np.outer(np.conj(u[:nN]), v) / d)
            g -= w[l] * (G @ Q.T)
    grad = np.stack([g[i * N : (i + 1) * N, i * N : (i + 1) * N] for i in range(n)]).ravel()
    return top + np.log(s) / p, grad


def _radii(theta, systems, n, N) -> list[float]:
    nN = n * N
    K = block_diag(list(theta.reshape(n, N, N)))
    out = []
    for Z0, Q in systems:
        M = Z0.copy()
        M[:nN] -= K @ Q
        out.append(spectral_radius(M))
    return out


def _delay_refine(K, systems, n, N, cfg: LmiConfig, trace: list[str]):
    """Polish K so the delay-free loop meets ``rho_target`` and every sampled
    delayed loop meets ``delay_rho_target``."""
    theta = np.stack(_split_blocks(K, n, N)).ravel()
    hit = {}

    def ok(r):
        return r[0] <= cfg.rho_target and max(r[1:]) <= cfg.delay_rho_target

    def check(x):
        if ok(_radii(x, systems, n, N)):
            hit["x"] = x.copy()
            raise _Certified

    r0 = _radii(theta, systems, n, N)
    trace.append("delay refinement start: " + ", ".join(f"{r:.6f}" for r in r0))
    if not ok(r0):
        for p in (10.0, 40.0, 200.0):
            try:
                res = minimize(
                    _smoothed_radius_multi, theta, args=(systems, n, N, p), jac=True,
                    method="L-BFGS-B", callback=check, options={"maxiter": 500},
                )
                theta = res.x
                check(theta)
            except _Certified:
                theta = hit["x"]
                break
    r = _radii(theta, systems, n, N)
    trace.append(
        "delay refinement end: " + ", ".join(f"{x:.6f}" for x in r) + ("" if ok(r) else " (targets not met)")
    )
    return block_diag(list(theta.reshape(n, N, N))), r


class _Certified(Exception):
    pass


def _spectral_design(A, DA, n, N, cfg: LmiConfig, rng, trace: list[str]):
    best_K, best_rho = None, np.inf
    for attempt in range(cfg.restarts):
        theta = rng.standard_normal(n * N * N)
        theta *= cfg.init_scale / max(np.abs(theta).max(), 1e-300)
        hit = {}

        def check(x):
            rho = spectral_radius(A - block_diag(list(x.reshape(n, N, N))) @ DA)
            if rho <= cfg.rho_target:
                hit["x"], hit["rho"] = x.copy(), rho
                raise _Certified

        for p in (10.0, 40.0, 200.0):
            try:
                res = minimize(
                    _smoothed_radius, theta, args=(A, DA, n, N, p), jac=True, method="L-BFGS-B",
                    callback=check, options={"maxiter": 2000},
                )
                theta = res.x
                check(theta)
            except _Certified:
                break
        x = hit.get("x", theta)
        K = block_diag(list(x.reshape(n, N, N)))
        rho = spectral_radius(A - K @ DA)
        trace.append(f"spectral restart {attempt}: rho={rho:.6f}")
        if rho < best_rho:
            best_K, best_rho = K, rho
        if rho <= cfg.rho_target:
            break
    return best_K, best_rho


def _ccl_design(A, D_H, n, N, cfg: LmiConfig, rng, trace: list[str]):
    import cvxpy as cp

    nN = n * N
    I = np.eye(nN)
    DA = D_H @ A
    X = cp.Variable((nN, nN), symmetric=True)
    Y = cp.Variable((nN, nN), symmetric=True)
    Kb = [cp.Variable((N, N)) for _ in range(n)]
    Xt = cp.Parameter((nN, nN), symmetric=True)
    Yt = cp.Parameter((nN, nN), symmetric=True)
    Z = np.zeros((N, N))
    K = cp.bmat([[Kb[i] if i == j else Z for j in range(n)] for i in range(n)])
    Fh = A - K @ DA
    a = cfg.rho_target
    M1 = cp.bmat([[a * X, Fh.T], [Fh, a * Y]])
    M2 = cp.bmat([[X, I], [I, Y]])
    delta = 1e-7
    cons = [
        X >> delta * I,
        Y >> delta * I,
        (M1 + M1.T) / 2 >> delta * np.eye(2 * nN),
        (M2 + M2.T) / 2 >> 0,
    ]
    prob = cp.Problem(cp.Minimize(cp.trace(Yt @ X + Xt @ Y)), cons)
    Xt.value, Yt.value = I.copy(), I.copy()
    for b in Kb:
        init = rng.standard_normal((N, N))
        b.value = init / max(np.linalg.norm(init, 2), 1.0)
    trace.append(f"ccl: alpha={a}, stop when trace < {2 * nN} + {cfg.epsilon}, solver={cfg.solver}")
    best_K, best_rho = None, np.inf
    opts = {"eps": cfg.inner_tol} if cfg.solver == "SCS" else {}
    for it in range(cfg.max_outer_iters):
        try:
            prob.solve(solver=cfg.solver, warm_start=True, **opts)
        except cp.error.SolverError as exc:
            trace.append(f"ccl iter {it}: solver error {exc}")
            break
        if X.value is None or prob.status not in ("optimal", "optimal_inaccurate"):
            trace.append(f"ccl iter {it}: status {prob.status}")
            break
        Kv = np.asarray(K.value, dtype=float)
        rho = spectral_radius(A - Kv @ DA)
        obj = float(prob.value)
        trace.append(f"ccl iter {it}: objective={obj:.6f} rho={rho:.6f}")
        if rho < best_rho:
            best_K, best_rho = Kv, rho
        if rho <= a or obj < 2 * nN + cfg.epsilon:
            break
        Xt.value = (X.value + X.value.T) / 2
        Yt.value = (Y.value + Y.value.T) / 2
    return best_K, best_rho


def synthesize_block_gain(
    A,
    D_H,
    n: int,
    cfg: LmiConfig = LmiConfig(),
    rng: Optional[np.random.Generator] = None,
    delayed_systems: Sequence[tuple[np.ndarray, np.ndarray]] = (),
) -> GainSet:
    """Certified block-diagonal K for ``A - K D_H A`` with ``n`` square blocks.

    ``delayed_systems`` lists ``(Z0, Q)`` pairs of delay companions (see
    :func:`delay_companion`) that the refinement stage should also contract.
    """
    A = np.asarray(A, dtype=float)
    D_H = np.asarray(D_H, dtype=float)
    if A.shape != D_H.shape or A.shape[0] != A.shape[1] or A.shape[0] % n:
        raise ConfigError(f"dimension mismatch: A {A.shape}, D_H {D_H.shape}, n={n}")
    rng = rng if rng is not None else np.random.default_rng(0)
    N = A.shape[0] // n
    method = cfg.method
    if method == "auto":
        method = "ccl" if n * N <= cfg.ccl_max_dim else "spectral"
    trace = [f"method={method} (requested {cfg.method}), n={n}, N={N}, rho_target={cfg.rho_target}"]
    if method == "spectral" and cfg.method == "auto":
        trace.append("fallback: smoothed spectral-radius minimization replaces the CCL inner SDP")
    K, rho = None, np.inf
    if method == "ccl":
        K, rho = _ccl_design(A, D_H, n, N, cfg, rng, trace)
        if K is None or rho >= 1.0:
            trace.append("fallback: CCL did not certify, switching to spectral-radius minimization")
            K2, rho2 = _spectral_design(A, D_H @ A, n, N, cfg, rng, trace)
            if rho2 < rho:
                K, rho = K2, rho2
    else:
        K, rho = _spectral_design(A, D_H @ A, n, N, cfg, rng, trace)
    if K is None:
        raise GainSynthesisError("gain synthesis produced no candidate", best_rho=None)
    if delayed_systems and rho < 1.0:
        systems = [(A, D_H @ A), *delayed_systems]
        K2, r2 = _delay_refine(K, systems, n, N, cfg, trace)
        if r2[0] < 1.0:
            K = K2
    blocks = _split_blocks(K, n, N)
    certified = spectral_radius(closed_loop_matrix(A, D_H, block_diag(blocks)))
    trace.append(f"certified rho={certified:.9f}")
    for line_ in trace:
        log.debug(line_)
    if not certified < 1.0:
        raise GainSynthesisError(
            f"no stabilizing block-diagonal gain found (best rho={certified:.6f})", best_rho=certified
        )
    return GainSet(blocks, certified, trace)


def synthesize_gain(
    cm: ConsensusMatrix, model, mm, cfg: LmiConfig = LmiConfig(), rng: Optional[np.random.Generator] = None
) -> GainSet:
    """Design the per-sensor gains offline for a fixed fusion matrix and geometry."""
    verdict = check_distributed_observability(cm.graph(), model, mm=mm)
    if not verdict.observable_structural:
        raise ObservabilityError(
            "(W kron F, D_H) is not structurally observable: "
            f"strongly_connected={verdict.strongly_connected}, "
            f"parents_measured={verdict.parents_measured}, full_generic_rank={verdict.full_generic_rank}"
        )
    rng = rng if rng is not None else np.random.default_rng(0)
    delayed = []
    if cfg.delay_design > 0:
        g = cm.graph()
        for _ in range(cfg.delay_samples):
            delayed.append(delay_companion(cm, model, mm, DelayMap.random(g, cfg.delay_design, rng)))
    return synthesize_block_gain(kron(cm.W, model.F), mm.D_H(), cm.n, cfg, rng, delayed)


# --------------------------------------------------------------------------
# delays


@dataclass(frozen=True)
class DelayMargin:
    tau_bar: int
    rho_delayed: float
    stable: bool

    @property
    def rho_root(self) -> float:
        """``rho_delayed ** (1 / (tau_bar + 1))``, the per-step contraction bound."""
        return self.rho_delayed ** (1.0 / (self.tau_bar + 1))


def delayed_bound_matrix(cm: ConsensusMatrix, model, mm, K, tau_bar: int) -> np.ndarray:
    """``W kron F^(tau+1) - K D_H (W kron F^(tau+1))``."""
    if tau_bar < 0:
        raise ConfigError("tau_bar must be >= 0")
    A = kron(cm.W, mat_pow(model.F, tau_bar + 1))
    return closed_loop_matrix(A, mm.D_H(), K)


def delay_margin_check(cm: ConsensusMatrix, model, mm, K, tau_bar: int) -> DelayMargin:
    rho = spectral_radius(delayed_bound_matrix(cm, model, mm, K, tau_bar))
    return DelayMargin(int(tau_bar), rho, rho < 1.0)


def delay_sweep(cm: ConsensusMatrix, model, mm, K, tau_max: int) -> list[DelayMargin]:
    return [delay_margin_check(cm, model, mm, K, t) for t in range(tau_max + 1)]


def max_certified_delay(cm: ConsensusMatrix, model, mm, K, tau_max: int) -> int:
    """Largest tau <= tau_max such that every delay bound 0..tau is certified,
    or -1 if even the delay-free case fails."""
    best = -1
    for m in delay_sweep(cm, model, mm, K, tau_max):
        if not m.stable:
            break
        best = m.tau_bar
    return best


def delay_companion(cm: ConsensusMatrix, model, mm, delays: DelayMap) -> tuple[np.ndarray, np.ndarray]:
    """``(Z0, Q)`` such that the exact delayed error recursion is
    ``Z0 - [K Q; 0]`` in the stacked state ``(e(k-1), ..., e(k-1-tau_bar))``.

    Sensor i's prior uses ``F^(tau_ij+1)`` times sensor j's estimate from step
    ``k-1-tau_ij``; its own estimate is never delayed.
    """
    W, F = cm.W, model.F
    n, N = cm.n, model.N
    if mm.n != n or mm.N != N:
        raise ConfigError("measurement model does not match the network and target model")
    nN = n * N
    tb = delays.tau_bar
    B = np.zeros((nN, nN * (tb + 1)))
    powers = [mat_pow(F, r + 1) for r in range(tb + 1)]
    for i in range(n):
        for j in range(n):
            if W[i, j] == 0.0:
                continue
            d = 0 if i == j else delays.get(j, i)
            B[i * N : (i + 1) * N, d * nN + j * N : d * nN + (j + 1) * N] += W[i, j] * powers[d]
    Z0 = np.zeros((nN * (tb + 1), nN * (tb + 1)))
    Z0[:nN] = B
    Z0[nN:, :-nN] = np.eye(nN * tb)
    return Z0, mm.D_H() @ B


def delayed_closed_loop(cm: ConsensusMatrix, model, mm, K, delays: DelayMap) -> np.ndarray:
    """Exact error recursion of the delayed protocol in companion form."""
    Z0, Q = delay_companion(cm, model, mm, delays)
    Z = Z0.copy()
    Z[: Q.shape[0]] -= _gain_matrix(K) @ Q
    return Z


def exact_delay_radius(cm: ConsensusMatrix, model, mm, K, delays: DelayMap) -> float:
    """Spectral radius of the exact delayed recursion for one delay map."""
    return spectral_radius(delayed_closed_loop(cm, model, mm, K, delays))
