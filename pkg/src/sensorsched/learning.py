"""Online scheduling learners: asynchronous, structured, synchronous,
two-time-scale constrained Q-learning and channel-parameter (MLE) learning.

Every update rule targets the same relative average-cost equation as
:func:`sensorsched.mdp.relative_value_iteration`::

    Q(tau, a) = c(tau, a) + E[min_u Q(tau', u)] - Q(tau0, a0)

so an RVI solution is a fixed point of each rule in expectation.

Controllers at the bottom of the module wrap the update rules behind the
``act`` / ``observe`` interface consumed by :func:`sensorsched.channel_sim.run`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import NoSamples
from .mdp import QTable, TruncatedMdp, rvi_sweep, state_values
from .policy import RandomizedThresholdPolicy, constrained_optimal_policy, decide

SCHEDULE_KINDS = ("power", "log_over_n", "one_over_n_log_n")


@dataclass(frozen=True)
class StepSchedule:
    """Robbins-Monro step size alpha(n), n = 0, 1, 2, ...

    * ``power``:            c / (1 + n)^a,  0.5 < a <= 1
    * ``log_over_n``:       c log(n + 2) / (n + 2)
    * ``one_over_n_log_n``: c / ((n + 2) log(n + 2))

    ``cap`` optionally clips the step from above (used by the dual schedule,
    whose scale is large).
    """

    kind: str = "power"
    c: float = 1.0
    a: float = 0.8
    cap: float | None = None

    def __post_init__(self):
        if self.kind not in SCHEDULE_KINDS:
            raise ValueError(f"unknown schedule kind {self.kind!r}; expected one of {SCHEDULE_KINDS}")
        if not self.c > 0:
            raise ValueError("schedule scale c must be positive")
        if self.kind == "power" and not 0.5 < self.a <= 1.0:
            raise ValueError(f"power schedule exponent must lie in (0.5, 1], got {self.a}")
        if self.cap is not None and not self.cap > 0:
            raise ValueError("schedule cap must be positive")

    def __call__(self, n: int) -> float:
        if self.kind == "power":
            val = self.c / (1.0 + n) ** self.a
        elif self.kind == "log_over_n":
            val = self.c * math.log(n + 2.0) / (n + 2.0)
        else:
            val = self.c / ((n + 2.0) * math.log(n + 2.0))
        if self.cap is not None and val > self.cap:
            return self.cap
        return val

    def values(self, n) -> np.ndarray:
        n = np.asarray(n, dtype=np.float64)
        if self.kind == "power":
            val = self.c / (1.0 + n) ** self.a
        elif self.kind == "log_over_n":
            val = self.c * np.log(n + 2.0) / (n + 2.0)
        else:
            val = self.c / ((n + 2.0) * np.log(n + 2.0))
        if self.cap is not None:
            val = np.minimum(val, self.cap)
        return val

    def decay_order(self) -> float:
        """Leading polynomial decay exponent (log factors ignored)."""
        return self.a if self.kind == "power" else 1.0

    def to_dict(self):
        out = {"kind": self.kind, "c": self.c, "a": self.a}
        if self.cap is not None:
            out["cap"] = self.cap
        return out


DEFAULT_ALPHA = StepSchedule("power", 1.0, 0.8)
DEFAULT_BETA = StepSchedule("power", 100.0, 0.9)
DEFAULT_DUAL = StepSchedule("power", 20.0, 0.8, cap=0.2)


@dataclass(frozen=True)
class ScheduleCheck:
    diverges: bool
    squares_converge: bool
    squared_tail: float  # geometric extrapolation of sum_{n >= N} alpha(n)^2

    @property
    def ok(self) -> bool:
        return self.diverges and self.squares_converge


def check_schedule(s: StepSchedule, n_terms: int = 1 << 20) -> ScheduleCheck:
    """Numerical Robbins-Monro check on dyadic blocks [2^j, 2^(j+1)).

    Divergence: j * (block sum of alpha) must not decay (it is constant for
    the slowest admitted kind, 1/(n log n)).  Square summability: block sums
    of alpha^2 must shrink geometrically.  For c / (1+n)^a the block ratio
    tends to 2^(1-2a), so the 0.99 bound admits every exponent above ~0.504.
    """
    n = np.arange(n_terms)
    vals = s.values(n)
    J = int(math.log2(n_terms))
    blocks = np.array([vals[2 ** j - 1: 2 ** (j + 1) - 1].sum() for j in range(J)])
    blocks_sq = np.array([(vals[2 ** j - 1: 2 ** (j + 1) - 1] ** 2).sum() for j in range(J)])
    j = np.arange(1, J + 1)
    weighted = j * blocks
    half = J // 2
    diverges = bool(weighted[-1] >= 0.9 * weighted[half])
    ratios = blocks_sq[half:] / blocks_sq[half - 1:-1]
    rho = float(ratios.max())
    squares_converge = bool(rho < 0.99)
    tail = float(blocks_sq[-1] * rho / (1.0 - rho)) if squares_converge else math.inf
    return ScheduleCheck(diverges, squares_converge, tail)


def timescales_separated(alpha: StepSchedule, beta: StepSchedule, n_terms: int = 1 << 20) -> bool:
    """beta(n) / alpha(n) -> 0: strictly faster decay, or a ratio still falling at n_terms."""
    if beta.decay_order() > alpha.decay_order():
        return True
    if beta.decay_order() < alpha.decay_order():
        return False
    probe = np.array([n_terms // 4, n_terms // 2, n_terms - 1])
    ratio = beta.values(probe) / alpha.values(probe)
    return bool(np.all(np.diff(ratio) < 0))


# ---------------------------------------------------------------------------
# structural constraints on the stacked Q layout

@dataclass(frozen=True)
class ConstraintMatrices:
    """Dense constraint rows on the stacked layout [Q(0,0), Q(0,1), ..., Q(M,1)].

    T_s rows: [Q(t,1) - Q(t,0)] - [Q(t+1,1) - Q(t+1,0)] >= 0   (submodularity)
    T_m rows: Q(t+1,a) - Q(t,a) >= 0, ordered (t, a)            (monotonicity)
    """

    T_s: np.ndarray
    T_m: np.ndarray

    @property
    def T(self) -> np.ndarray:
        return np.vstack([self.T_s, self.T_m])

    @property
    def M(self) -> int:
        return self.T_s.shape[0]


def build_constraints(M: int, fault_row: int | None = None) -> ConstraintMatrices:
    """The stencil matrices; ``fault_row`` flips the sign of one T_m row (self-test only)."""
    if M < 1:
        raise ValueError("constraints need M >= 1")
    width = 2 * (M + 1)
    T_s = np.zeros((M, width))
    T_m = np.zeros((2 * M, width))
    for t in range(M):
        T_s[t, 2 * t] = -1.0
        T_s[t, 2 * t + 1] = 1.0
        T_s[t, 2 * t + 2] = 1.0
        T_s[t, 2 * t + 3] = -1.0
        for a in (0, 1):
            T_m[2 * t + a, 2 * t + a] = -1.0
            T_m[2 * t + a, 2 * (t + 1) + a] = 1.0
    if fault_row is not None:
        T_m[fault_row] *= -1.0
    return ConstraintMatrices(T_s, T_m)


def apply_constraints(q: np.ndarray) -> np.ndarray:
    """T @ q.ravel() via stencils, length 3M."""
    gain = q[:, 1] - q[:, 0]
    return np.concatenate([gain[:-1] - gain[1:], np.diff(q, axis=0).ravel()])


def constraints_transpose(mu: np.ndarray, M: int) -> np.ndarray:
    """T' @ mu reshaped to (M+1, 2)."""
    ms = mu[:M]
    mm = mu[M:].reshape(M, 2)
    out = np.zeros((M + 1, 2))
    out[:-1, 0] -= ms
    out[:-1, 1] += ms
    out[1:, 0] += ms
    out[1:, 1] -= ms
    out[:-1] -= mm
    out[1:] += mm
    return out


def ready_rows(visits: np.ndarray) -> np.ndarray:
    """Constraint rows whose every touched pair has been visited at least once."""
    seen = visits >= 1
    sub = seen[:-1].all(axis=1) & seen[1:].all(axis=1)
    mono = (seen[:-1] & seen[1:]).ravel()
    return np.concatenate([sub, mono])


def explored_prefix(visits: np.ndarray) -> int:
    """Number of leading states whose both actions have been visited."""
    both = (np.asarray(visits) >= 1).all(axis=1)
    return len(both) if both.all() else int(np.argmin(both))


# ---------------------------------------------------------------------------
# learner state and update rules

@dataclass
class LearnerState:
    q: QTable
    traces: np.ndarray
    lam: float = 0.0
    epsilon: float = 0.1
    alpha: StepSchedule = DEFAULT_ALPHA
    beta: StepSchedule = DEFAULT_BETA
    dual: StepSchedule = DEFAULT_DUAL
    mu: np.ndarray | None = None
    project_dual: bool = True
    mask_unvisited: bool = True
    cap_transmit: bool = True
    n_s: int = 0
    n_f: int = 0
    n_tx: int = 0
    n_idle: int = 0
    k: int = 0

    def __post_init__(self):
        self.traces = np.asarray(self.traces, dtype=np.float64)
        if self.traces.shape != (self.q.M + 1,):
            raise ValueError("traces length must equal the Q-table height")
        if self.lam < 0:
            raise ValueError("communication price must be nonnegative")
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError("epsilon must lie in [0, 1]")

    @classmethod
    def create(cls, traces, lam: float = 0.0, structured: bool = False, ref_pair=(0, 0), **kw):
        traces = np.asarray(traces, dtype=np.float64)
        M = len(traces) - 1
        mu = np.zeros(3 * M) if structured else None
        return cls(q=QTable.zeros(M, ref_pair), traces=traces, lam=lam, mu=mu, **kw)

    @property
    def M(self) -> int:
        return self.q.M

    def costs(self) -> np.ndarray:
        return np.column_stack([self.traces, self.traces + self.lam])


def epsilon_greedy(q, tau: int, epsilon: float, u1: float, u2: float,
                   cap_transmit: bool = True) -> int:
    table = q.q if isinstance(q, QTable) else q
    if cap_transmit and tau == len(table) - 1:
        return 1
    if u1 < epsilon:
        return 1 if u2 < 0.5 else 0
    return 1 if table[tau, 1] < table[tau, 0] else 0


def _next_value(q: np.ndarray, tau_next: int, cap_transmit: bool) -> float:
    if cap_transmit and tau_next == len(q) - 1:
        return q[tau_next, 1]
    return min(q[tau_next, 0], q[tau_next, 1])


def async_update(state: LearnerState, tau: int, a: int, tau_next: int) -> LearnerState:
    q = state.q.q
    visits = state.q.visits
    step = state.alpha(int(visits[tau, a]))
    target = (state.traces[tau] + state.lam * a + _next_value(q, tau_next, state.cap_transmit)
              - q[state.q.ref_pair])
    q[tau, a] += step * (target - q[tau, a])
    visits[tau, a] += 1
    return state


def structural_step(state: LearnerState, k: int) -> LearnerState:
    """Dual correction on the whole table, then a projected dual step.

    Q += g(k) T'mu;  mu <- max(0, mu - g(k) T Q), with g the dual schedule.
    Rows touching a never-visited pair are held at zero when
    ``mask_unvisited`` is set: their Q entries carry no information yet.
    """
    M = state.M
    g = state.dual(k)
    q = state.q.q
    q += g * constraints_transpose(state.mu, M)
    mu = state.mu - g * apply_constraints(q)
    if state.project_dual:
        np.maximum(mu, 0.0, out=mu)
    if state.mask_unvisited:
        mu *= ready_rows(state.q.visits)
    state.mu = mu
    return state


def structured_update(state: LearnerState, tau: int, a: int, tau_next: int, k: int) -> LearnerState:
    if state.mu is None:
        state.mu = np.zeros(3 * state.M)
    async_update(state, tau, a, tau_next)
    return structural_step(state, k)


def sync_update(state: LearnerState, a_k: int, eta: int, idle_every_step: bool = False) -> LearnerState:
    """Update a whole column of the table from one observed channel outcome.

    a_k = 1 refreshes Q(., 1) with the observed success/failure applied to
    every holding time; a_k = 0 refreshes Q(., 0), whose transition is
    deterministic.  ``idle_every_step`` additionally refreshes Q(., 0) on
    transmit steps.
    """
    q = state.q.q
    M = state.M
    v = state_values(q, state.cap_transmit)
    ref = q[state.q.ref_pair]
    nxt = np.minimum(np.arange(M + 1) + 1, M)
    if a_k == 1:
        step = state.alpha(state.n_tx)
        v_next = np.full(M + 1, v[0]) if eta else v[nxt]
        target = state.traces + state.lam + v_next - ref
        q[:, 1] += step * (target - q[:, 1])
        state.q.visits[:, 1] += 1
        state.n_tx += 1
        if eta:
            state.n_s += 1
        else:
            state.n_f += 1
    if a_k == 0 or idle_every_step:
        step = state.alpha(state.n_idle)
        target = state.traces + v[nxt] - ref
        q[:, 0] += step * (target - q[:, 0])
        state.q.visits[:, 0] += 1
        if a_k == 0:
            state.n_idle += 1
    return state


def lambda_update(state: LearnerState, a_k: int, b: float, k: int) -> LearnerState:
    state.lam = max(0.0, state.lam + state.beta(k) * (a_k - b))
    return state


def mle_estimate(n_s: int, n_f: int) -> float:
    if n_s + n_f <= 0:
        raise NoSamples("no transmissions observed yet")
    return n_s / (n_s + n_f)


def parameter_policy_p2(r_hat: float, b: float) -> RandomizedThresholdPolicy:
    return constrained_optimal_policy(r_hat, b)


def certainty_equivalent_p1_step(state: LearnerState, x_iters: int, mdp_template: TruncatedMdp,
                                 tau: int, warm_start: bool = True) -> tuple[int, LearnerState]:
    """x_iters RVI sweeps on the MDP with r_s replaced by its MLE, then act greedily.

    With ``warm_start`` the sweeps continue from the table left by the
    previous step; otherwise every step starts from zero.
    """
    if x_iters < 1:
        raise ValueError("x_iters must be >= 1")
    mdp = mdp_template.with_channel(mle_estimate(state.n_s, state.n_f))
    ref = state.q.ref_pair
    h = state.q.q if warm_start else np.zeros_like(state.q.q)
    for _ in range(x_iters):
        h, _ = rvi_sweep(h, mdp, ref)
    state.q.q = h
    if mdp.cap_transmit and tau == mdp.M:
        return 1, state
    return (1 if h[tau, 1] < h[tau, 0] else 0), state


# ---------------------------------------------------------------------------
# controllers for the simulation loop

class Controller:
    """Scheduler driven by :func:`sensorsched.channel_sim.run`.

    ``act`` returns the action for the current holding time; ``observe``
    receives the realised transition.  ``streams`` exposes
    ``uniform(name)`` for the named random streams.
    """

    name = "controller"
    sweeps_per_step = 0.0

    def act(self, k: int, tau: int, streams) -> int:
        raise NotImplementedError

    def observe(self, k: int, tau: int, a: int, eta: int, tau_next: int) -> None:
        pass

    @property
    def lam(self) -> float | None:
        return None

    @property
    def r_hat(self) -> float | None:
        return None

    def q_table(self) -> np.ndarray | None:
        return None


class FixedPolicyController(Controller):
    """Plays a randomized threshold policy or an explicit 0/1 action vector."""

    name = "fixed"

    def __init__(self, policy):
        self.policy = policy

    def act(self, k, tau, streams):
        if isinstance(self.policy, RandomizedThresholdPolicy):
            u = streams.uniform("policy") if tau == self.policy.theta else 1.0
            return decide(self.policy, tau, u)
        return int(self.policy[tau])


class QLearningController(Controller):
    """Q-learning in one of the modes async, structured, sync, sync+structured."""

    MODES = ("async", "structured", "sync", "sync+structured")

    def __init__(self, state: LearnerState, mode: str = "sync", idle_every_step: bool = False):
        if mode not in self.MODES:
            raise ValueError(f"unknown Q-learning mode {mode!r}")
        self.state = state
        self.mode = mode
        self.name = mode
        self.idle_every_step = idle_every_step
        self.synchronous = mode.startswith("sync")
        self.structured = mode.endswith("structured")
        if self.structured and state.mu is None:
            state.mu = np.zeros(3 * state.M)
        self.sweeps_per_step = (1.0 if self.synchronous else 1.0 / (2 * (state.M + 1)))
        if self.structured:
            self.sweeps_per_step += 1.0
        # greedy leading threshold after every update, for lock-in diagnostics
        self.thresholds: list[int] = []

    def act(self, k, tau, streams):
        eps = self.state.epsilon
        if eps > 0.0:
            u1 = streams.uniform("exploration")
            u2 = streams.uniform("exploration") if u1 < eps else 1.0
        else:
            u1 = u2 = 1.0
        return epsilon_greedy(self.state.q, tau, eps, u1, u2, self.state.cap_transmit)

    def observe(self, k, tau, a, eta, tau_next):
        st = self.state
        if self.synchronous:
            sync_update(st, a, eta, self.idle_every_step)
            if self.structured:
                structural_step(st, k)
        else:
            if a == 1:
                if eta:
                    st.n_s += 1
                else:
                    st.n_f += 1
                st.n_tx += 1
            else:
                st.n_idle += 1
            if self.structured:
                structured_update(st, tau, a, tau_next, k)
            else:
                async_update(st, tau, a, tau_next)
        st.k = k + 1
        q = st.q.q
        tx = q[:-1, 1] < q[:-1, 0]
        self.thresholds.append(int(tx.argmax()) if tx.any() else st.M)

    @property
    def lam(self):
        return self.state.lam

    def q_table(self):
        return self.state.q.q


def lock_step(thresholds) -> int | None:
    """First step from which the recorded threshold never changes again."""
    th = np.asarray(thresholds)
    if th.size == 0:
        return None
    changes = np.flatnonzero(th[1:] != th[:-1])
    return 0 if changes.size == 0 else int(changes[-1]) + 1


class TwoTimeScaleController(Controller):
    """Q-learning on the fast clock, price lambda on the slow clock toward budget b."""

    def __init__(self, inner: QLearningController, b: float):
        if not 0.0 < b <= 1.0:
            raise ValueError("budget must lie in (0, 1]")
        self.inner = inner
        self.b = b
        self.name = "two_time_scale"
        self.sweeps_per_step = inner.sweeps_per_step

    @property
    def state(self):
        return self.inner.state

    def act(self, k, tau, streams):
        return self.inner.act(k, tau, streams)

    def observe(self, k, tau, a, eta, tau_next):
        self.inner.observe(k, tau, a, eta, tau_next)
        lambda_update(self.inner.state, a, self.b, k)

    @property
    def lam(self):
        return self.inner.state.lam

    def q_table(self):
        return self.inner.state.q.q


class _ChannelCounter(Controller):
    """Shared MLE bookkeeping; transmits until the first success is seen."""

    def __init__(self):
        self.n_s = 0
        self.n_f = 0

    @property
    def r_hat(self):
        if self.n_s + self.n_f == 0:
            return None
        return mle_estimate(self.n_s, self.n_f)

    def observe(self, k, tau, a, eta, tau_next):
        if a == 1:
            if eta:
                self.n_s += 1
            else:
                self.n_f += 1


class ParameterP2Controller(_ChannelCounter):
    """Budgeted parameter learning: closed-form policy at the current MLE."""

    name = "param_p2"
    sweeps_per_step = 0.0

    def __init__(self, b: float, M: int):
        super().__init__()
        if not 0.0 < b <= 1.0:
            raise ValueError("budget must lie in (0, 1]")
        self.b = b
        self.M = M
        self._cached = (None, None)

    def current_policy(self) -> RandomizedThresholdPolicy | None:
        if self.n_s == 0:
            return None
        key = (self.n_s, self.n_f)
        if self._cached[0] != key:
            pol = parameter_policy_p2(mle_estimate(self.n_s, self.n_f), self.b)
            if pol.theta >= self.M:
                pol = RandomizedThresholdPolicy(self.M, 1.0)
            self._cached = (key, pol)
        return self._cached[1]

    def act(self, k, tau, streams):
        pol = self.current_policy()
        if pol is None:
            return 1
        u = streams.uniform("policy") if tau == pol.theta else 1.0
        return decide(pol, tau, u)


class CertaintyEquivalentController(_ChannelCounter):
    """MDP-x: a fixed budget of RVI sweeps per step on the estimated channel."""

    def __init__(self, mdp_template: TruncatedMdp, x_iters: int, warm_start: bool = False):
        super().__init__()
        if x_iters < 1:
            raise ValueError("x_iters must be >= 1")
        self.template = mdp_template
        self.x_iters = x_iters
        self.warm_start = warm_start
        self.state = LearnerState.create(mdp_template.traces, lam=mdp_template.lam, epsilon=0.0,
                                         cap_transmit=mdp_template.cap_transmit)
        self.name = f"mdp_{x_iters}"
        self.sweeps_per_step = float(x_iters)

    def act(self, k, tau, streams):
        if self.n_s == 0:
            return 1
        self.state.n_s, self.state.n_f = self.n_s, self.n_f
        a, _ = certainty_equivalent_p1_step(self.state, self.x_iters, self.template, tau,
                                            self.warm_start)
        return a

    def q_table(self):
        return self.state.q.q
