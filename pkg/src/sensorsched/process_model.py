"""LTI process, steady-state Kalman covariance and the remote error-covariance ladder.

The remote estimator's error covariance depends only on the holding time
``tau`` (steps since the last received packet)::

    P(0)   = P_bar
    P(tau) = A P(tau-1) A' + Sigma_w

so every solver and learner in the package only ever needs the traces
``Tr(P(tau))`` for ``tau = 0..M``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatch, NonConvergence, UnstableLadder

DEFAULT_TRACE_CAP = 1e12


def _as_matrix(name, value):
    arr = np.atleast_2d(np.asarray(value, dtype=np.float64))
    if arr.ndim != 2:
        raise DimensionMismatch(f"{name} must be a matrix, got ndim={arr.ndim}")
    return arr


def _check_symmetric(name, mat):
    scale = max(1.0, float(np.max(np.abs(mat))))
    if not np.allclose(mat, mat.T, rtol=0.0, atol=1e-9 * scale):
        raise ValueError(f"{name} is not symmetric")


@dataclass(frozen=True)
class LtiSystem:
    """x(k+1) = A x(k) + w(k),  y(k) = C x(k) + v(k)."""

    A: np.ndarray
    C: np.ndarray
    Sigma_w: np.ndarray
    Sigma_v: np.ndarray

    def __post_init__(self):
        A = _as_matrix("A", self.A)
        C = _as_matrix("C", self.C)
        Sw = _as_matrix("Sigma_w", self.Sigma_w)
        Sv = _as_matrix("Sigma_v", self.Sigma_v)
        n = A.shape[0]
        if A.shape != (n, n):
            raise DimensionMismatch(f"A must be square, got {A.shape}")
        if C.shape[1] != n:
            raise DimensionMismatch(f"C must have {n} columns, got {C.shape}")
        m = C.shape[0]
        if Sw.shape != (n, n):
            raise DimensionMismatch(f"Sigma_w must be {n}x{n}, got {Sw.shape}")
        if Sv.shape != (m, m):
            raise DimensionMismatch(f"Sigma_v must be {m}x{m}, got {Sv.shape}")
        _check_symmetric("Sigma_w", Sw)
        _check_symmetric("Sigma_v", Sv)
        if np.min(np.linalg.eigvalsh(Sw)) < -1e-9 * max(1.0, np.abs(Sw).max()):
            raise ValueError("Sigma_w must be positive semidefinite")
        if np.min(np.linalg.eigvalsh(Sv)) <= 0.0:
            raise ValueError("Sigma_v must be positive definite")
        for name, arr in (("A", A), ("C", C), ("Sigma_w", Sw), ("Sigma_v", Sv)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def spectral_radius(self) -> float:
        return float(np.max(np.abs(np.linalg.eigvals(self.A))))


def reference_system() -> LtiSystem:
    """The two-state example used throughout the experiments."""
    return LtiSystem(
        A=[[1.2, 1.0], [0.0, 0.8]],
        C=np.eye(2),
        Sigma_w=np.eye(2),
        Sigma_v=np.eye(2),
    )


def steady_state_covariance(sys: LtiSystem, tol: float = 1e-12, max_iter: int = 100_000) -> np.ndarray:
    """A-posteriori steady-state Kalman error covariance P_bar.

    Fixed-point iteration of the prediction/update Riccati recursion starting
    from a zero prior; stops when successive posterior covariances agree to
    ``tol`` in max-abs norm.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    A, C, Sw, Sv = sys.A, sys.C, sys.Sigma_w, sys.Sigma_v
    n = sys.n
    prior = np.zeros((n, n))
    post = None
    # an undetectable pair makes the prior blow up; that ends in NonConvergence below
    with np.errstate(over="ignore", invalid="ignore"):
        for _ in range(max_iter):
            S = C @ prior @ C.T + Sv
            K = np.linalg.solve(S, C @ prior).T  # prior C' S^-1
            new_post = prior - K @ C @ prior
            new_post = 0.5 * (new_post + new_post.T)
            if not np.all(np.isfinite(new_post)):
                break
            if post is not None and np.max(np.abs(new_post - post)) < tol:
                return new_post
            post = new_post
            prior = A @ post @ A.T + Sw
            prior = 0.5 * (prior + prior.T)
    raise NonConvergence(
        "Riccati iteration did not converge; check detectability of (A, C) "
        "and stabilizability of (A, sqrt(Sigma_w))"
    )


def error_covariance(sys: LtiSystem, p_bar: np.ndarray, tau: int) -> np.ndarray:
    """Remote error covariance after ``tau`` steps without a received packet."""
    if tau < 0:
        raise ValueError("tau must be nonnegative")
    P = np.asarray(p_bar, dtype=np.float64)
    if P.shape != (sys.n, sys.n):
        raise DimensionMismatch(f"p_bar must be {sys.n}x{sys.n}, got {P.shape}")
    for _ in range(tau):
        P = sys.A @ P @ sys.A.T + sys.Sigma_w
    return P


@dataclass(frozen=True)
class CovarianceLadder:
    """Precomputed ``Tr(P(tau))`` for ``tau = 0..M``.

    Keeps the system and ``P(M)`` around so :meth:`extended` can continue the
    recursion past the truncation level (used by the infinite-chain
    analytic evaluation).
    """

    p_bar: np.ndarray
    traces: np.ndarray
    M: int
    system: LtiSystem | None = field(default=None, repr=False, compare=False)
    _p_last: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __len__(self):
        return len(self.traces)

    def __getitem__(self, tau):
        return self.traces[tau]

    def extended(self, length: int) -> np.ndarray:
        """Traces for ``tau = 0..length-1``, continuing the recursion past M."""
        if length <= len(self.traces):
            return self.traces[:length].copy()
        if self.system is None or self._p_last is None:
            raise ValueError("ladder was built without a system; cannot extend")
        out = np.empty(length)
        out[: len(self.traces)] = self.traces
        P = self._p_last
        A, Sw = self.system.A, self.system.Sigma_w
        for tau in range(len(self.traces), length):
            P = A @ P @ A.T + Sw
            out[tau] = np.trace(P)
        return out


def cost_ladder(sys: LtiSystem, p_bar: np.ndarray | None = None, M: int = 30,
                cap: float = DEFAULT_TRACE_CAP) -> CovarianceLadder:
    if M < 0:
        raise ValueError("M must be nonnegative")
    if p_bar is None:
        p_bar = steady_state_covariance(sys)
    P = np.asarray(p_bar, dtype=np.float64)
    if P.shape != (sys.n, sys.n):
        raise DimensionMismatch(f"p_bar must be {sys.n}x{sys.n}, got {P.shape}")
    traces = np.empty(M + 1)
    traces[0] = np.trace(P)
    for tau in range(1, M + 1):
        P = sys.A @ P @ sys.A.T + sys.Sigma_w
        traces[tau] = np.trace(P)
    if not np.isfinite(traces[-1]) or traces[-1] > cap:
        raise UnstableLadder(
            f"Tr(P({M})) = {traces[-1]:.3g} exceeds cap {cap:.3g}; lower M or "
            f"check stability_margin"
        )
    traces.setflags(write=False)
    p_bar = np.array(p_bar, dtype=np.float64)
    p_bar.setflags(write=False)
    return CovarianceLadder(p_bar=p_bar, traces=traces, M=M, system=sys, _p_last=P)


def stability_margin(sys: LtiSystem, r_s: float) -> float:
    """rho(A)^2 (1 - r_s); values >= 1 mean the average cost may be unbounded."""
    if not 0.0 <= r_s <= 1.0:
        raise ValueError("r_s must lie in [0, 1]")
    return sys.spectral_radius ** 2 * (1.0 - r_s)
