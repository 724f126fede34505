import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sensorsched.channel_sim import ChannelSchedule, run
from sensorsched.errors import ChannelDead, NoSamples
from sensorsched.learning import (
    DEFAULT_ALPHA,
    DEFAULT_BETA,
    DEFAULT_DUAL,
    CertaintyEquivalentController,
    LearnerState,
    ParameterP2Controller,
    QLearningController,
    StepSchedule,
    TwoTimeScaleController,
    apply_constraints,
    async_update,
    build_constraints,
    certainty_equivalent_p1_step,
    check_schedule,
    constraints_transpose,
    epsilon_greedy,
    explored_prefix,
    lambda_update,
    lock_step,
    mle_estimate,
    parameter_policy_p2,
    ready_rows,
    structured_update,
    sync_update,
    timescales_separated,
)
from sensorsched.mdp import (
    QTable,
    TruncatedMdp,
    greedy_policy,
    relative_value_iteration,
    rvi_sweep,
    state_values,
    transition,
)


@pytest.fixture(scope="module")
def solved(traces):
    return relative_value_iteration(TruncatedMdp(30, 0.7, 20.0, traces), tol=1e-12)


def state_from(q, traces, lam=20.0, **kw):
    st_ = LearnerState.create(traces, lam=lam, **kw)
    st_.q.q[:] = q
    return st_


# ---------------------------------------------------------------- schedules

def test_power_schedule_values():
    s = StepSchedule("power", 2.0, 0.5 + 1e-9)
    assert s(0) == pytest.approx(2.0)
    assert DEFAULT_ALPHA(3) == pytest.approx(4 ** -0.8)
    assert StepSchedule("power", 1.0, 1.0)(9) == pytest.approx(0.1)
    assert np.allclose(DEFAULT_ALPHA.values([0, 3]), [1.0, 4 ** -0.8])


def test_other_kinds_and_cap():
    assert StepSchedule("log_over_n", 1.0)(0) == pytest.approx(np.log(2) / 2)
    assert StepSchedule("one_over_n_log_n", 1.0)(0) == pytest.approx(1 / (2 * np.log(2)))
    assert DEFAULT_DUAL(0) == 0.2
    assert DEFAULT_DUAL(10**6) == pytest.approx(20.0 / (1 + 10**6) ** 0.8)


@pytest.mark.parametrize("kw", [dict(kind="cosine"), dict(c=0.0), dict(a=0.5), dict(a=1.2),
                                dict(cap=-1.0)])
def test_schedule_validation(kw):
    with pytest.raises(ValueError):
        StepSchedule(**kw)


@pytest.mark.parametrize("sched", [DEFAULT_ALPHA, DEFAULT_BETA, DEFAULT_DUAL,
                                   StepSchedule("power", 1.0, 0.51), StepSchedule("power", 1.0, 1.0),
                                   StepSchedule("log_over_n", 1.0), StepSchedule("one_over_n_log_n", 1.0)])
def test_admitted_schedules_pass_numeric_check(sched):
    chk = check_schedule(sched)
    assert chk.ok
    assert np.isfinite(chk.squared_tail)


def test_numeric_check_rejects_summable_steps():
    # bypass construction-time validation to feed the checker a non-admissible exponent
    bad = object.__new__(StepSchedule)
    for name, val in (("kind", "power"), ("c", 1.0), ("a", 1.5), ("cap", None)):
        object.__setattr__(bad, name, val)
    assert not check_schedule(bad).diverges
    slow = object.__new__(StepSchedule)
    for name, val in (("kind", "power"), ("c", 1.0), ("a", 0.4), ("cap", None)):
        object.__setattr__(slow, name, val)
    assert not check_schedule(slow).squares_converge


def test_timescale_separation():
    assert timescales_separated(DEFAULT_ALPHA, DEFAULT_BETA)
    assert not timescales_separated(DEFAULT_BETA, DEFAULT_ALPHA)
    assert not timescales_separated(DEFAULT_ALPHA, StepSchedule("power", 0.1, 0.8))
    assert timescales_separated(StepSchedule("power", 1.0, 1.0), StepSchedule("one_over_n_log_n", 1.0))


# ---------------------------------------------------------------- constraints

def test_constraint_matrices_for_m1():
    cons = build_constraints(1)
    assert cons.T_s.tolist() == [[-1, 1, 1, -1]]
    assert cons.T_m.tolist() == [[-1, 0, 1, 0], [0, -1, 0, 1]]
    assert cons.T.shape == (3, 4)


def test_constraint_shapes_and_fault():
    cons = build_constraints(30)
    assert cons.T_s.shape == (30, 62) and cons.T_m.shape == (60, 62)
    faulty = build_constraints(30, fault_row=0)
    assert np.array_equal(faulty.T_m[0], -cons.T_m[0])
    with pytest.raises(ValueError):
        build_constraints(0)


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, (8, 2), elements=st.floats(-100, 100)),
       arrays(np.float64, 21, elements=st.floats(-10, 10)))
def test_stencils_match_dense_matrices(q, mu):
    cons = build_constraints(7)
    assert np.allclose(apply_constraints(q), cons.T @ q.ravel(), atol=1e-9)
    assert np.allclose(constraints_transpose(mu, 7).ravel(), cons.T.T @ mu, atol=1e-9)


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, 10, elements=st.floats(0, 50)),
       arrays(np.float64, 9, elements=st.floats(0, 5)), st.floats(-20, 20))
def test_structured_tables_satisfy_constraints(steps0, shrink, gain0):
    # Q(., 0) nondecreasing; gain Q(., 1) - Q(., 0) nonincreasing but never so fast that Q(., 1) drops
    q0 = np.cumsum(steps0)
    gain = gain0 - np.concatenate([[0.0], np.cumsum(np.minimum(shrink, steps0[1:]))])
    q = np.column_stack([q0, q0 + gain])
    assert apply_constraints(q).min() >= -1e-9


def test_rvi_solution_satisfies_constraints(solved):
    cons = build_constraints(30)
    scale = np.abs(solved.q.q).max()
    assert (cons.T @ solved.q.stacked).min() >= -1e-9 * scale


def test_ready_rows_and_prefix():
    visits = np.zeros((4, 2), dtype=int)
    visits[:2] = 1
    visits[2, 0] = 1
    rows = ready_rows(visits)
    # sub rows: only (0,1) fully visited; mono rows (t,a) need both ends
    assert rows[:3].tolist() == [True, False, False]
    assert rows[3:].tolist() == [True, True, True, False, False, False]
    assert explored_prefix(visits) == 2
    assert explored_prefix(np.ones((4, 2))) == 4


# ---------------------------------------------------------------- action selection

def test_epsilon_greedy():
    q = np.array([[10.0, 3.0], [1.0, 1.0], [5.0, 6.0]])
    assert epsilon_greedy(q, 0, 0.1, 0.5, 0.9) == 1
    assert epsilon_greedy(q, 1, 0.0, 0.0, 0.0) == 0  # tie -> silent
    assert epsilon_greedy(q, 0, 1.0, 0.3, 0.7) == 0
    assert epsilon_greedy(q, 0, 1.0, 0.3, 0.2) == 1
    assert epsilon_greedy(q, 2, 1.0, 0.0, 0.9) == 1  # last state always transmits
    assert epsilon_greedy(q, 2, 1.0, 0.0, 0.9, cap_transmit=False) == 0


# ---------------------------------------------------------------- asynchronous

def test_async_first_visit(traces):
    s = LearnerState.create(traces, lam=20.0)
    async_update(s, 0, 1, 0)
    assert s.q.q[0, 1] == pytest.approx(traces[0] + 20.0)
    assert np.count_nonzero(s.q.q) == 1
    assert s.q.visits[0, 1] == 1


def test_async_visit_counter_drives_step_size(traces):
    s = LearnerState.create(traces, lam=20.0)
    async_update(s, 3, 1, 4)
    first = s.q.q[3, 1]
    assert first == pytest.approx(DEFAULT_ALPHA(0) * (traces[3] + 20.0))
    async_update(s, 3, 1, 4)
    assert s.q.visits[3, 1] == 2
    target = traces[3] + 20.0
    assert s.q.q[3, 1] == pytest.approx(first + DEFAULT_ALPHA(1) * (target - first))


def expected_async(q, traces, lam, r_s, step=1.0):
    """Apply the asynchronous rule to every pair with the exact next-state expectation."""
    v = state_values(q)
    M = len(q) - 1
    out = q.copy()
    for tau in range(M + 1):
        for a in (0, 1):
            target = traces[tau] + lam * a - q[0, 0]
            target += sum(p * v[n] for n, p in transition(tau, a, M, r_s).items())
            out[tau, a] += step * (target - q[tau, a])
    return out


def test_expected_async_update_fixed_point(solved, traces):
    new = expected_async(solved.q.q, traces, 20.0, 0.7)
    assert np.max(np.abs(new - solved.q.q)) <= 1e-9 * np.abs(solved.q.q).max()


def test_expected_sync_update_fixed_point(solved, traces):
    q = solved.q.q
    s_ok = state_from(q, traces, alpha=StepSchedule("power", 1.0, 1.0))
    s_fail = state_from(q, traces, alpha=StepSchedule("power", 1.0, 1.0))
    sync_update(s_ok, 1, 1)
    sync_update(s_fail, 1, 0)
    expected = 0.7 * s_ok.q.q[:, 1] + 0.3 * s_fail.q.q[:, 1]
    assert np.max(np.abs(expected - q[:, 1])) <= 1e-9 * np.abs(q).max()
    s_idle = state_from(q, traces, alpha=StepSchedule("power", 1.0, 1.0))
    sync_update(s_idle, 0, 0)
    assert np.max(np.abs(s_idle.q.q - q)) <= 1e-9 * np.abs(q).max()


def test_expected_structured_update_fixed_point(solved, traces):
    # with mu = 0 and a feasible table the dual step keeps mu at 0
    s = state_from(solved.q.q, traces, structured=True)
    s.q.visits[:] = 1
    from sensorsched.learning import structural_step

    structural_step(s, 0)
    assert np.all(s.mu == 0.0)
    assert np.array_equal(s.q.q, solved.q.q)


# ---------------------------------------------------------------- structured

def test_structured_with_zero_dual_matches_async(traces):
    rng = np.random.default_rng(1)
    q = np.sort(rng.random((31, 2)) * 50, axis=0)
    a = state_from(q, traces)
    s = state_from(q, traces, structured=True)
    async_update(a, 4, 1, 0)
    structured_update(s, 4, 1, 0, k=0)
    assert np.array_equal(a.q.q, s.q.q)


def test_monotonicity_violation_raises_its_dual(traces):
    q = np.column_stack([np.arange(31.0), np.arange(31.0) + 5.0])
    q[6, 0] = 2.0  # Q(6,0) < Q(5,0)
    s = state_from(q, traces, structured=True)
    s.q.visits[:] = 1
    structured_update(s, 10, 0, 11, k=0)
    row = 30 + 2 * 5 + 0  # T_m row (5, 0) follows the 30 submodularity rows
    assert s.mu[row] > 0
    assert s.mu[row] == pytest.approx(DEFAULT_DUAL(0) * 3.0)


def test_dual_is_masked_on_unvisited_rows(traces):
    q = np.column_stack([np.arange(31.0), np.arange(31.0) + 5.0])
    q[6, 0] = 2.0
    s = state_from(q, traces, structured=True)
    structured_update(s, 10, 0, 11, k=0)
    assert np.all(s.mu == 0.0)
    s2 = state_from(q, traces, structured=True, mask_unvisited=False, project_dual=False)
    structured_update(s2, 10, 0, 11, k=0)
    assert s2.mu.min() < 0  # unprojected dual goes negative on slack rows


def test_dual_correction_moves_table_toward_feasibility(traces):
    q = np.column_stack([np.arange(31.0), np.arange(31.0) + 5.0])
    q[6, 0] = 2.0
    s = state_from(q, traces, structured=True, dual=StepSchedule("power", 0.5, 1.0))
    s.q.visits[:] = 1
    before = -apply_constraints(s.q.q).min()
    for k in range(50):
        from sensorsched.learning import structural_step

        structural_step(s, k)
    assert -apply_constraints(s.q.q).min() < before


# ---------------------------------------------------------------- synchronous

def test_sync_success_step_from_zero(traces):
    s = LearnerState.create(traces, lam=20.0, alpha=StepSchedule("power", 1.0, 1.0))
    sync_update(s, 1, 1)
    assert np.allclose(s.q.q[:, 1], traces + 20.0)
    assert np.all(s.q.q[:, 0] == 0.0)
    assert (s.n_tx, s.n_s, s.n_f, s.n_idle) == (1, 1, 0, 0)


def test_sync_idle_step_touches_only_silent_column(traces):
    s = LearnerState.create(traces, lam=20.0)
    s.q.q[:, 1] = 7.0
    sync_update(s, 0, 0)
    assert np.all(s.q.q[:, 1] == 7.0)
    assert np.any(s.q.q[:, 0] != 0.0)
    assert s.n_idle == 1 and s.n_tx == 0


def test_sync_failure_uses_next_holding_time(traces):
    s = LearnerState.create(traces, lam=20.0, alpha=StepSchedule("power", 1.0, 1.0))
    s.q.q[:, 0] = np.arange(31.0)
    s.q.q[:, 1] = np.arange(31.0) + 100.0
    sync_update(s, 1, 0)
    v = np.arange(31.0)
    v[30] = 130.0
    nxt = np.minimum(np.arange(31) + 1, 30)
    assert np.allclose(s.q.q[:, 1], traces + 20.0 + v[nxt] - 0.0)
    assert s.n_f == 1


def test_sync_idle_every_step_flag(traces):
    s = LearnerState.create(traces, lam=20.0)
    sync_update(s, 1, 1, idle_every_step=True)
    assert np.any(s.q.q[:, 0] != 0.0)
    assert s.n_idle == 0 and s.n_tx == 1


def test_sync_learner_converges_on_short_run(traces, solved):
    s = LearnerState.create(traces, lam=20.0, epsilon=0.0)
    ctl = QLearningController(s, "sync")
    run(ctl, ChannelSchedule.constant(0.7), 5000, 11, 30, traces)
    assert list(greedy_policy(s.q.q)) == list(solved.policy)
    assert lock_step(ctl.thresholds) < 5000


# ---------------------------------------------------------------- price and parameters

def test_lambda_update_examples(traces):
    s = LearnerState.create(traces, lam=5.0, beta=StepSchedule("power", 0.01, 1.0))
    lambda_update(s, 1, 0.4, 0)
    assert s.lam == pytest.approx(5.006)
    s.lam = 0.001
    lambda_update(s, 0, 0.4, 0)
    assert s.lam == 0.0


def test_mle_examples():
    assert mle_estimate(7, 3) == pytest.approx(0.7)
    assert mle_estimate(0, 5) == 0.0
    assert mle_estimate(1, 0) == 1.0
    with pytest.raises(NoSamples):
        mle_estimate(0, 0)


def test_parameter_policy_examples():
    pol = parameter_policy_p2(0.7, 0.4)
    assert pol.theta == 2 and pol.r_theta == pytest.approx(6 / 7)
    pol = parameter_policy_p2(1.0, 1.0)
    assert (pol.theta, pol.r_theta) == (0, 1.0)
    with pytest.raises(ChannelDead):
        parameter_policy_p2(0.0, 0.4)


def test_parameter_policy_staircase():
    estimates = np.linspace(0.5, 0.7, 41)
    thetas = [parameter_policy_p2(r, 0.4).theta for r in estimates]
    assert all(a >= b for a, b in zip(thetas, thetas[1:]))
    # 1.5 / r crosses 3 at r = 0.5 and 2 at r = 0.75: theta is 2 on (0.5, 0.75]
    assert set(thetas[1:]) == {2}
    assert thetas[0] == 3


def test_parameter_controller_transmits_until_first_success(traces):
    ctl = ParameterP2Controller(0.4, 30)
    trace = run(ctl, ChannelSchedule.constant(0.7), 200, 3, 30, traces)
    first = int(np.flatnonzero(trace.eta)[0])
    assert np.all(trace.a[: first + 1] == 1)
    assert np.all(np.isnan(trace.r_hat[: first + 1]))
    assert ctl.n_s + ctl.n_f == int(trace.a.sum())


def test_certainty_equivalent_full_solve_matches_rvi(traces, solved):
    s = LearnerState.create(traces, lam=20.0, epsilon=0.0)
    s.n_s, s.n_f = 7, 3
    template = TruncatedMdp(30, 0.5, 20.0, traces)
    for tau in range(31):
        a, s = certainty_equivalent_p1_step(s, 400, template, tau, warm_start=False)
        assert a == solved.policy[tau]


def test_certainty_equivalent_warm_start_composes(traces):
    template = TruncatedMdp(30, 0.5, 20.0, traces)
    a = LearnerState.create(traces, lam=20.0)
    b = LearnerState.create(traces, lam=20.0)
    for s in (a, b):
        s.n_s, s.n_f = 7, 3
    certainty_equivalent_p1_step(a, 1, template, 0)
    certainty_equivalent_p1_step(a, 1, template, 0)
    certainty_equivalent_p1_step(b, 2, template, 0)
    assert np.array_equal(a.q.q, b.q.q)


def test_certainty_equivalent_cold_start_restarts(traces):
    template = TruncatedMdp(30, 0.5, 20.0, traces)
    s = LearnerState.create(traces, lam=20.0)
    s.n_s, s.n_f = 7, 3
    certainty_equivalent_p1_step(s, 3, template, 0, warm_start=False)
    first = s.q.q.copy()
    certainty_equivalent_p1_step(s, 3, template, 0, warm_start=False)
    assert np.array_equal(first, s.q.q)
    h = np.zeros((31, 2))
    mdp = template.with_channel(0.7)
    for _ in range(3):
        h, _ = rvi_sweep(h, mdp)
    assert np.allclose(first, h)


def test_one_sweep_cold_start_never_transmits_early(traces):
    ctl = CertaintyEquivalentController(TruncatedMdp(30, 0.7, 20.0, traces), 1)
    trace = run(ctl, ChannelSchedule.constant(0.7), 400, 2, 30, traces)
    first = int(np.flatnonzero(trace.eta)[0])
    after = trace.a[first + 1:]
    assert np.all(after[trace.tau[first + 1:] < 30] == 0)


def test_two_time_scale_price_rises_when_over_budget(traces):
    s = LearnerState.create(traces, lam=0.0, epsilon=0.0)
    ctl = TwoTimeScaleController(QLearningController(s, "sync"), 0.4)
    trace = run(ctl, ChannelSchedule.constant(0.7), 300, 4, 30, traces)
    assert trace.lam[0] == 0.0
    assert ctl.lam > 0.0
    assert np.all(trace.lam >= 0.0)


def test_controller_validation(traces):
    with pytest.raises(ValueError):
        QLearningController(LearnerState.create(traces), "batch")
    with pytest.raises(ValueError):
        ParameterP2Controller(0.0, 30)
    with pytest.raises(ValueError):
        CertaintyEquivalentController(TruncatedMdp(30, 0.7, 20.0, traces), 0)
    with pytest.raises(ValueError):
        LearnerState.create(traces, epsilon=1.5)


def test_lock_step():
    assert lock_step([3, 2, 2, 1, 1, 1]) == 3
    assert lock_step([2, 2, 2]) == 0
    assert lock_step([]) is None


def test_qtable_visits_in_sync_mode(traces):
    s = LearnerState.create(traces, lam=20.0)
    sync_update(s, 1, 0)
    sync_update(s, 0, 0)
    assert np.all(s.q.visits == 1)
    assert isinstance(s.q, QTable)
