"""Truncated average-cost MDP over the holding time, with exact solvers.

States are ``tau = 0..M`` (larger holding times are lumped into M), actions
are 0 (stay silent) and 1 (transmit).  Q-tables are stored as ``(M+1, 2)``
arrays; ``q.ravel()`` gives the stacked layout
``[Q(0,0), Q(0,1), ..., Q(M,0), Q(M,1)]``.

At ``tau = M`` transmitting is the only admissible action: staying silent
there would park the chain in the lumped state forever.  ``state_values``
and ``greedy_policy`` honour this; the raw table still carries ``Q(M, 0)``.
"""

from __future__ import annotations

import csv
import itertools
import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import DivergentTail, NonConvergence, StateOutOfRange, TooLarge
from .policy import RandomizedThresholdPolicy

log = logging.getLogger(__name__)

BRUTE_FORCE_MAX_M = 14


@dataclass(frozen=True)
class TruncatedMdp:
    M: int
    r_s: float
    lam: float
    traces: np.ndarray
    cap_transmit: bool = True

    def __post_init__(self):
        traces = np.asarray(self.traces, dtype=np.float64)
        if traces.shape != (self.M + 1,):
            raise ValueError(f"traces must have length M+1={self.M + 1}, got {traces.shape}")
        if not 0.0 <= self.r_s <= 1.0:
            raise ValueError(f"r_s must lie in [0, 1], got {self.r_s}")
        if self.lam < 0:
            raise ValueError("communication price must be nonnegative")
        object.__setattr__(self, "traces", traces)

    @property
    def n_states(self) -> int:
        return self.M + 1

    def costs(self) -> np.ndarray:
        """Stage-cost table c(tau, a), shape (M+1, 2)."""
        return np.column_stack([self.traces, self.traces + self.lam])

    def with_channel(self, r_s: float) -> "TruncatedMdp":
        return TruncatedMdp(self.M, r_s, self.lam, self.traces, self.cap_transmit)

    def with_price(self, lam: float) -> "TruncatedMdp":
        return TruncatedMdp(self.M, self.r_s, lam, self.traces, self.cap_transmit)


@dataclass
class QTable:
    q: np.ndarray
    ref_pair: tuple[int, int] = (0, 0)
    visits: np.ndarray | None = None

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=np.float64)
        if self.q.ndim == 1:
            self.q = self.q.reshape(-1, 2)
        if self.visits is None:
            self.visits = np.zeros(self.q.shape, dtype=np.int64)

    @classmethod
    def zeros(cls, M: int, ref_pair=(0, 0)) -> "QTable":
        return cls(np.zeros((M + 1, 2)), tuple(ref_pair))

    @property
    def M(self) -> int:
        return self.q.shape[0] - 1

    @property
    def stacked(self) -> np.ndarray:
        return self.q.ravel()

    @property
    def ref_value(self) -> float:
        return self.q[self.ref_pair]

    def copy(self) -> "QTable":
        return QTable(self.q.copy(), self.ref_pair, self.visits.copy())


@dataclass
class SolveResult:
    q: QTable
    j_star: float
    v: np.ndarray
    iterations: int
    residual: float
    converged: bool = True
    mdp: TruncatedMdp | None = field(default=None, repr=False)

    @property
    def policy(self) -> np.ndarray:
        return greedy_policy(self)

    def to_csv(self, path):
        pol = self.policy
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["tau", "Q0", "Q1", "V", "policy"])
            for tau in range(self.q.M + 1):
                w.writerow([tau, f"{self.q.q[tau, 0]:.12g}", f"{self.q.q[tau, 1]:.12g}",
                            f"{self.v[tau]:.12g}", int(pol[tau])])


def transition(tau: int, a: int, M: int, r_s: float) -> dict[int, float]:
    if not 0 <= tau <= M:
        raise StateOutOfRange(f"tau={tau} outside 0..{M}")
    if a not in (0, 1):
        raise ValueError(f"action must be 0 or 1, got {a}")
    nxt = min(tau + 1, M)
    if a == 0:
        return {nxt: 1.0}
    if nxt == 0:  # M == 0
        return {0: 1.0}
    out = {0: r_s}
    out[nxt] = out.get(nxt, 0.0) + 1.0 - r_s
    return out


def stage_cost(tau: int, a: int, lam: float, traces) -> float:
    return float(traces[tau]) + lam * a


def estimation_cost(tau: int, a: int, traces) -> float:
    return float(traces[tau])


def rate_cost(tau: int, a: int) -> float:
    return float(a)


def state_values(q: np.ndarray, cap_transmit: bool = True) -> np.ndarray:
    """V(tau) = min over admissible actions of Q(tau, a)."""
    v = q.min(axis=1)
    if cap_transmit:
        v[-1] = q[-1, 1]
    return v


def expected_next_values(v: np.ndarray, r_s: float) -> np.ndarray:
    """E[V(tau') | tau, a] for every (tau, a), shape (M+1, 2)."""
    M = len(v) - 1
    nxt = np.minimum(np.arange(M + 1) + 1, M)
    v_next = v[nxt]
    return np.column_stack([v_next, r_s * v[0] + (1.0 - r_s) * v_next])


def bellman_rhs(q: np.ndarray, costs: np.ndarray, r_s: float, cap_transmit: bool = True) -> np.ndarray:
    """c(tau,a) + E min_u Q(tau',u), before subtracting the reference entry."""
    return costs + expected_next_values(state_values(q, cap_transmit), r_s)


def bellman_residual(q: QTable, mdp: TruncatedMdp) -> float:
    """max |c + E V(next) - Q(ref) - Q| over all pairs."""
    rhs = bellman_rhs(q.q, mdp.costs(), mdp.r_s, mdp.cap_transmit) - q.ref_value
    return float(np.max(np.abs(rhs - q.q)))


def rvi_sweep(h: np.ndarray, mdp: TruncatedMdp, ref_pair=(0, 0), relaxation: float = 1.0):
    """One relative value iteration sweep; returns (new table, subtracted offset)."""
    rhs = bellman_rhs(h, mdp.costs(), mdp.r_s, mdp.cap_transmit)
    offset = rhs[ref_pair]
    new = rhs - offset
    if relaxation != 1.0:
        new = (1.0 - relaxation) * h + relaxation * new
    return new, offset


def relative_value_iteration(mdp: TruncatedMdp, tol: float = 1e-10, max_iter: int = 1_000_000,
                             ref_pair=(0, 0), relaxation: float | None = None,
                             q0: np.ndarray | None = None, raise_on_failure: bool = True) -> SolveResult:
    """Solve the average-cost Bellman equation for the Q-factor.

    The returned table is shifted so that ``Q(ref) = J*``; it is then an
    exact fixed point of ``Q = c + E min Q(next) - Q(ref)``, the same
    equation the learning rules target.

    ``relaxation`` < 1 damps the sweep; by default it is 0.5 on a lossless
    channel (the optimal chain is periodic there and plain sweeps cycle).
    The stopping test never asks for more than the table's rounding level,
    one ulp of max|Q|, which exceeds ``tol`` when holding-time costs are large.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    if relaxation is None:
        relaxation = 0.5 if mdp.r_s == 1.0 else 1.0
    h = np.zeros((mdp.M + 1, 2)) if q0 is None else np.array(q0, dtype=np.float64)
    h = h - h[ref_pair]
    offset = math.nan
    delta = math.inf
    it = 0
    stop = tol
    for it in range(1, max_iter + 1):
        new, offset = rvi_sweep(h, mdp, ref_pair, relaxation)
        delta = float(np.max(np.abs(new - h)))
        h = new
        stop = max(tol, np.finfo(np.float64).eps * float(np.max(np.abs(h))))
        if delta <= stop:
            break
    j_star = float(offset) if relaxation == 1.0 else float(bellman_rhs(h, mdp.costs(), mdp.r_s, mdp.cap_transmit)[ref_pair])
    q = QTable(h + j_star, tuple(ref_pair))
    residual = bellman_residual(q, mdp)
    converged = delta <= stop
    result = SolveResult(q=q, j_star=j_star, v=state_values(q.q, mdp.cap_transmit), iterations=it,
                         residual=residual, converged=converged, mdp=mdp)
    if not converged:
        msg = f"RVI did not converge in {max_iter} sweeps (last change {delta:.3g})"
        if raise_on_failure:
            raise NonConvergence(msg, result)
        log.warning(msg)
    return result


def greedy_policy(result, cap_transmit: bool = True) -> np.ndarray:
    """argmin_a Q(tau, a) with ties broken toward 0 (stay silent)."""
    q = _as_array(result)
    pol = (q[:, 1] < q[:, 0]).astype(np.int64)
    if cap_transmit:
        pol[-1] = 1
    return pol


def extract_threshold(policy) -> int | None:
    """Index of the first transmit if the policy is 0...01...1, else None.

    An all-zero policy maps to len(policy) ("never transmit within range").
    """
    pol = np.asarray(policy)
    ones = np.flatnonzero(pol == 1)
    if ones.size == 0:
        return len(pol)
    theta = int(ones[0])
    if np.all(pol[theta:] == 1):
        return theta
    return None


def leading_threshold(policy) -> int:
    """First state at which the policy transmits (len(policy) if never)."""
    ones = np.flatnonzero(np.asarray(policy) == 1)
    return int(ones[0]) if ones.size else len(policy)


@dataclass(frozen=True)
class StructureReport:
    monotone_v: bool
    monotone_q: bool
    submodular_q: bool
    max_violation: float

    @property
    def ok(self) -> bool:
        return self.monotone_v and self.monotone_q and self.submodular_q


def check_structure(q, slack: float = 1e-9, states=None) -> StructureReport:
    """Monotonicity of V and Q(., a) and submodularity of Q in (tau, a).

    ``max_violation`` is the largest amount by which any adjacent-difference
    inequality fails (0 when everything holds).  ``states`` optionally limits
    the check to a prefix ``0..states-1`` of the table.
    """
    q = _as_array(q)
    if states is not None:
        q = q[:states]
    if len(q) < 2:
        return StructureReport(True, True, True, 0.0)
    v = q.min(axis=1)
    dv = np.diff(v)
    dq = np.diff(q, axis=0)
    gain = q[:, 1] - q[:, 0]
    dsub = gain[:-1] - gain[1:]  # must be >= 0
    worst_v = max(0.0, -float(dv.min()))
    worst_q = max(0.0, -float(dq.min()))
    worst_s = max(0.0, -float(dsub.min()))
    return StructureReport(
        monotone_v=worst_v <= slack,
        monotone_q=worst_q <= slack,
        submodular_q=worst_s <= slack,
        max_violation=max(worst_v, worst_q, worst_s),
    )


def policy_value_analytic(policy: RandomizedThresholdPolicy, r_s: float, traces=None,
                          tail_tol: float = 1e-13, max_terms: int = 1_000_000) -> tuple[float, float]:
    """(J_e, J_r) of a randomized threshold policy on the untruncated chain.

    The stationary law is flat on 0..theta, drops by (1 - r_s r_theta) at
    theta+1 and then decays geometrically with ratio (1 - r_s).  ``traces``
    may be a CovarianceLadder (extended on demand past M) or a plain array;
    with ``traces=None`` only J_r is computed and J_e is NaN.
    """
    if not 0.0 < r_s <= 1.0:
        raise ValueError("r_s must lie in (0, 1]")
    theta = int(policy.theta)
    r_th = policy.r_theta
    head = r_s / (r_s * (theta + 1.0 - r_th) + 1.0)  # pi(0) = ... = pi(theta)
    first_tail = (1.0 - r_s * r_th) * head  # pi(theta + 1)
    j_r = head * r_th + first_tail / r_s
    if traces is None:
        return math.nan, j_r

    system = getattr(traces, "system", None)
    if system is not None and r_s < 1.0 and first_tail > 0.0:
        from .process_model import stability_margin

        margin = stability_margin(system, r_s)
        if margin >= 1.0:
            raise DivergentTail(f"stability margin {margin:.4g} >= 1; J_e is infinite")

    def trace_block(start, stop):
        if hasattr(traces, "extended"):
            return traces.extended(stop)[start:stop]
        arr = np.asarray(traces, dtype=np.float64)
        if stop > len(arr):
            raise ValueError(
                f"need traces up to tau={stop - 1}; pass a CovarianceLadder to extend past M"
            )
        return arr[start:stop]

    j_e = head * float(np.sum(trace_block(0, theta + 1)))
    if first_tail == 0.0:
        return j_e, j_r
    decay = 1.0 - r_s
    block = 64
    start = theta + 1
    prev_ratio = None
    while start - theta - 1 < max_terms:
        t = trace_block(start, start + block)
        weights = first_tail * decay ** np.arange(start - theta - 1, start - theta - 1 + block)
        terms = weights * t
        j_e += float(terms.sum())
        last = terms[-1]
        if last == 0.0 or last <= tail_tol * abs(j_e):
            return j_e, j_r
        ratio = terms[-1] / terms[-2] if terms[-2] > 0 else 0.0
        if ratio >= 1.0 and prev_ratio is not None and prev_ratio >= 1.0:
            raise DivergentTail(f"tail terms are not decaying (ratio {ratio:.4g})")
        prev_ratio = ratio
        start += block
    raise DivergentTail(f"tail did not reach tolerance within {max_terms} terms")


def stationary_distribution(policy: np.ndarray, r_s: float) -> np.ndarray:
    """Stationary law of the truncated chain induced by a deterministic policy."""
    pol = np.asarray(policy)
    n = len(pol)
    P = _policy_transition_matrices(pol[None, :], r_s)[0]
    A = P.T - np.eye(n)
    A[-1, :] = 1.0
    rhs = np.zeros(n)
    rhs[-1] = 1.0
    return np.linalg.solve(A, rhs)


def asymptotic_variance(policy: np.ndarray, r_s: float, f) -> tuple[float, float]:
    """(mean, asymptotic variance) of time averages of f(tau) under a deterministic policy.

    Uses the fundamental matrix Z = (I - P + 1 pi')^-1; the standard error of a
    T_w-step average is then sqrt(variance / T_w).
    """
    pol = np.asarray(policy)
    f = np.asarray(f, dtype=np.float64)
    n = len(pol)
    P = _policy_transition_matrices(pol[None, :], r_s)[0]
    pi = stationary_distribution(pol, r_s)
    centred = f - pi @ f
    Z = np.linalg.inv(np.eye(n) - P + np.outer(np.ones(n), pi))
    var = 2.0 * pi @ (centred * (Z @ centred)) - pi @ (centred * centred)
    return float(pi @ f), float(max(var, 0.0))


def _policy_transition_matrices(policies: np.ndarray, r_s: float) -> np.ndarray:
    """Stack of (n, n) transition matrices, one per deterministic policy row."""
    k, n = policies.shape
    M = n - 1
    taus = np.arange(n)
    nxt = np.minimum(taus + 1, M)
    P = np.zeros((k, n, n))
    tx = policies.astype(np.float64)
    P[:, taus, 0] += tx * r_s
    np.add.at(P, (slice(None), taus, nxt), 1.0 - tx * r_s)
    return P


def brute_force_optimal(mdp: TruncatedMdp) -> tuple[np.ndarray, float]:
    """Exhaustive search over all deterministic stationary policies.

    Each policy is evaluated through the stationary law of its induced
    chain.  Policies that stay silent at tau = M get infinite cost.
    """
    if mdp.M > BRUTE_FORCE_MAX_M:
        raise TooLarge(f"brute force limited to M <= {BRUTE_FORCE_MAX_M}, got {mdp.M}")
    n = mdp.M + 1
    policies = np.array(list(itertools.product((0, 1), repeat=n)), dtype=np.int64)
    if mdp.cap_transmit:
        # silent at M is inadmissible (and can split the chain when r_s = 1)
        policies = policies[policies[:, -1] == 1]
    P = _policy_transition_matrices(policies, mdp.r_s)
    A = np.transpose(P, (0, 2, 1)) - np.eye(n)
    A[:, -1, :] = 1.0
    rhs = np.zeros((len(policies), n))
    rhs[:, -1] = 1.0
    try:
        pis = np.linalg.solve(A, rhs[..., None])[..., 0]
    except np.linalg.LinAlgError:
        pis = np.array([_cycle_law_from_zero(pol, mdp.r_s) for pol in policies])
    stage = mdp.traces[None, :] + mdp.lam * policies
    costs = np.sum(pis * stage, axis=1)
    best = int(np.argmin(costs))
    return policies[best].copy(), float(costs[best])


def _cycle_law_from_zero(policy: np.ndarray, r_s: float) -> np.ndarray:
    """Long-run occupancy from tau = 0 when the dynamics are deterministic (r_s in {0, 1}).

    For 0 < r_s < 1 the lumped state M is reachable from everywhere, so the
    chain is unichain and the linear solve never needs this.
    """
    n = len(policy)
    M = n - 1
    seen = {}
    tau, t = 0, 0
    while tau not in seen:
        seen[tau] = t
        t += 1
        tau = 0 if (policy[tau] == 1 and r_s == 1.0) else min(tau + 1, M)
    law = np.zeros(n)
    start = seen[tau]
    for state, when in seen.items():
        if when >= start:
            law[state] = 1.0
    return law / law.sum()


def _as_array(obj) -> np.ndarray:
    if isinstance(obj, SolveResult):
        return obj.q.q
    if isinstance(obj, QTable):
        return obj.q
    arr = np.asarray(obj, dtype=np.float64)
    return arr.reshape(-1, 2) if arr.ndim == 1 else arr


def warn_if_unstable(margin: float):
    if margin >= 1.0:
        warnings.warn(
            f"stability margin rho(A)^2 (1 - r_s) = {margin:.4g} >= 1: the average cost may be "
            f"unbounded; solving the truncated chain anyway",
            RuntimeWarning,
            stacklevel=2,
        )
