"""Experiment plumbing behind the CLI: solving, learning sweeps and the verify battery."""

from __future__ import annotations

import csv
import logging
import math
import os
import tempfile
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .channel_sim import run
from .config import ExperimentConfig, parse_config
from .learning import (
    CertaintyEquivalentController,
    LearnerState,
    ParameterP2Controller,
    QLearningController,
    TwoTimeScaleController,
    apply_constraints,
    build_constraints,
    check_schedule,
    explored_prefix,
    lock_step,
    timescales_separated,
)
from .mdp import (
    TruncatedMdp,
    brute_force_optimal,
    check_structure,
    extract_threshold,
    greedy_policy,
    leading_threshold,
    policy_value_analytic,
    relative_value_iteration,
    state_values,
    stationary_distribution,
    transition,
    warn_if_unstable,
)
from .policy import constrained_optimal_policy
from .process_model import cost_ladder, stability_margin, steady_state_covariance

log = logging.getLogger(__name__)

SUMMARY_FIELDS = [
    "algorithm", "seed", "T", "J_e", "J_r", "J_cost", "J_e_win", "J_r_win", "threshold",
    "leading_threshold", "lock_step", "structure_violation", "lambda_final", "r_hat_final", "sweeps_per_step",
    "total_sweeps", "digest",
]


def ladder_for(config: ExperimentConfig):
    return cost_ladder(config.system, steady_state_covariance(config.system), config.M)


# ---------------------------------------------------------------------------
# solve

def solve_report(config: ExperimentConfig) -> dict:
    """Known-channel solution for every channel regime in the config."""
    ladder = ladder_for(config)
    regimes = []
    for _, r_s in config.channel.segments:
        entry = {"r_s": r_s}
        if r_s > 0:
            with warnings.catch_warnings():
                warnings.simplefilter("always")
                warn_if_unstable(stability_margin(config.system, r_s))
        if config.kind == "costly":
            mdp = TruncatedMdp(config.M, r_s, config.lam, ladder.traces)
            res = relative_value_iteration(mdp, tol=config.tol)
            entry.update(result=res, j_star=res.j_star, theta=extract_threshold(res.policy),
                         structure=check_structure(res))
        else:
            pol = constrained_optimal_policy(r_s, config.b)
            j_e, j_r = policy_value_analytic(pol, r_s, ladder)
            entry.update(policy=pol, J_e=j_e, J_r=j_r)
        regimes.append(entry)
    return {"kind": config.kind, "digest": config.digest, "regimes": regimes,
            "trace_P0": float(ladder.traces[0])}


def format_solve(report: dict) -> str:
    lines = [f"# config digest {report['digest']}", f"Tr(P_bar) = {report['trace_P0']:.10g}"]
    for entry in report["regimes"]:
        lines.append(f"## r_s = {entry['r_s']}")
        if report["kind"] == "costly":
            res = entry["result"]
            st = entry["structure"]
            lines.append(f"J* = {entry['j_star']:.10g}  theta* = {entry['theta']}  "
                         f"sweeps = {res.iterations}  residual = {res.residual:.3g}")
            lines.append(f"structure: monotone V {st.monotone_v}, monotone Q {st.monotone_q}, "
                         f"submodular Q {st.submodular_q}, max violation {st.max_violation:.3g}")
            lines.append("tau        Q0              Q1              V   a")
            for tau in range(res.q.M + 1):
                lines.append(f"{tau:3d} {res.q.q[tau, 0]:15.8g} {res.q.q[tau, 1]:15.8g} "
                             f"{res.v[tau]:15.8g}   {res.policy[tau]}")
        else:
            pol = entry["policy"]
            lines.append(f"theta = {pol.theta}  r_theta = {pol.r_theta:.12g}")
            lines.append(f"J_e = {entry['J_e']:.10g}  J_r = {entry['J_r']:.12g}")
    return "\n".join(lines)


def write_solve(report: dict, out_dir: str):
    os.makedirs(out_dir, exist_ok=True)
    for i, entry in enumerate(report["regimes"]):
        if report["kind"] == "costly":
            _atomic(os.path.join(out_dir, f"solve_regime{i}.csv"), entry["result"].to_csv)
    rows = []
    for i, entry in enumerate(report["regimes"]):
        if report["kind"] == "costly":
            rows.append({"regime": i, "r_s": entry["r_s"], "J_star": f"{entry['j_star']:.12g}",
                         "theta": entry["theta"], "r_theta": 1.0, "J_e": "", "J_r": "",
                         "digest": report["digest"]})
        else:
            pol = entry["policy"]
            rows.append({"regime": i, "r_s": entry["r_s"], "J_star": "", "theta": pol.theta,
                         "r_theta": f"{pol.r_theta:.12g}", "J_e": f"{entry['J_e']:.12g}",
                         "J_r": f"{entry['J_r']:.12g}", "digest": report["digest"]})
    _atomic(os.path.join(out_dir, "solve_summary.csv"),
            lambda p: _write_rows(p, ["regime", "r_s", "J_star", "theta", "r_theta", "J_e", "J_r",
                                      "digest"], rows))


# ---------------------------------------------------------------------------
# learn

@dataclass(frozen=True)
class Job:
    label: str
    algorithm: str
    seed: int
    x_iters: int = 0


def jobs_for(config: ExperimentConfig) -> list[Job]:
    jobs = []
    for alg in config.learner.algorithms:
        variants = [(f"mdp_{x}", x) for x in config.learner.x_iters] if alg == "mdp_x" else [(alg, 0)]
        for label, x in variants:
            for seed in config.seeds:
                jobs.append(Job(label, alg, seed, x))
    return jobs


def build_controller(config: ExperimentConfig, job: Job, traces):
    lc = config.learner

    def q_learner(mode, lam):
        eps = lc.sync_epsilon if mode.startswith("sync") else lc.epsilon
        state = LearnerState.create(
            traces, lam=lam, structured=mode.endswith("structured"), epsilon=eps,
            alpha=lc.alpha, beta=lc.beta, dual=lc.dual, project_dual=lc.project_dual,
            mask_unvisited=lc.mask_unvisited,
        )
        return QLearningController(state, mode, idle_every_step=lc.idle_every_step)

    if job.algorithm in QLearningController.MODES:
        return q_learner(job.algorithm, config.lam)
    if job.algorithm == "two_time_scale":
        return TwoTimeScaleController(q_learner(lc.inner, lc.lam0), config.b)
    if job.algorithm == "param_p2":
        return ParameterP2Controller(config.b, config.M)
    if job.algorithm == "mdp_x":
        template = TruncatedMdp(config.M, config.channel.segments[0][1], config.lam, traces)
        return CertaintyEquivalentController(template, job.x_iters, lc.warm_start)
    raise ValueError(f"unknown algorithm {job.algorithm!r}")


def _fmt(x):
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return ""
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return f"{float(x):.12g}"


def _write_rows(path, fields, rows):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        for row in rows:
            w.writerow(row)


def _atomic(path, writer):
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=".csv")
    os.close(fd)
    try:
        writer(tmp)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def summarize(config: ExperimentConfig, job: Job, controller, trace) -> dict:
    je, jr = trace.cumulative()
    we, wr = trace.windowed(config.T_w)
    q = controller.q_table()
    threshold = lead = violation = None
    if q is not None:
        pol = greedy_policy(q)
        threshold = extract_threshold(pol)
        lead = leading_threshold(pol)
        visits = getattr(getattr(controller, "state", None), "q", None)
        K = explored_prefix(visits.visits) if visits is not None and job.algorithm != "mdp_x" else len(q)
        if K >= 2:
            part = q[:K]
            span = float(part.max() - part.min())
            v = check_structure(part).max_violation
            violation = v / span if span > 0 else v
    elif isinstance(controller, ParameterP2Controller):
        pol = controller.current_policy()
        if pol is not None:
            threshold = lead = int(pol.theta)
    history = getattr(controller, "thresholds", None)
    if history is None and hasattr(controller, "inner"):
        history = controller.inner.thresholds
    locked = lock_step(history) if history else None
    lam_final = None if trace.lam is None else float(trace.lam[-1])
    r_final = None if trace.r_hat is None else float(trace.r_hat[-1])
    cost = None
    if config.kind == "costly":
        cost = float(je[-1] + config.lam * jr[-1])
    return {
        "algorithm": job.label, "seed": job.seed, "T": len(trace),
        "J_e": _fmt(float(je[-1])), "J_r": _fmt(float(jr[-1])), "J_cost": _fmt(cost),
        "J_e_win": _fmt(float(we[-1])), "J_r_win": _fmt(float(wr[-1])),
        "threshold": _fmt(threshold), "leading_threshold": _fmt(lead), "lock_step": _fmt(locked),
        "structure_violation": _fmt(violation), "lambda_final": _fmt(lam_final),
        "r_hat_final": _fmt(r_final), "sweeps_per_step": _fmt(float(controller.sweeps_per_step)),
        "total_sweeps": _fmt(float(controller.sweeps_per_step) * len(trace)),
        "digest": config.digest,
    }


def run_job(config: ExperimentConfig, job: Job, out_dir: str | None = None, traces=None):
    """One (algorithm, seed) simulation; returns (summary row, wall-clock seconds, trace)."""
    if traces is None:
        traces = ladder_for(config).traces
    controller = build_controller(config, job, traces)
    t0 = time.perf_counter()
    trace = run(controller, config.channel, config.T, job.seed, config.M, traces, config.digest)
    elapsed = time.perf_counter() - t0
    row = summarize(config, job, controller, trace)
    if out_dir is not None:
        path = os.path.join(out_dir, f"{job.label}_seed{job.seed}.csv")
        _atomic(path, lambda p: trace.to_csv(p, config.T_w))
    return row, elapsed, trace


def _worker(normalized: dict, job: Job, out_dir: str):
    config = parse_config(normalized)
    row, elapsed, _ = run_job(config, job, out_dir)
    return row, elapsed


def learn(config: ExperimentConfig, out_dir: str | None = None, workers: int | None = None):
    """Run every (algorithm, seed) job; writes per-seed traces, summary.csv and timing.csv."""
    out_dir = out_dir or config.out
    workers = workers or config.workers
    os.makedirs(out_dir, exist_ok=True)
    jobs = jobs_for(config)
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_worker, [config.normalized] * len(jobs), jobs,
                                    [out_dir] * len(jobs)))
    else:
        traces = ladder_for(config).traces
        results = []
        for job in jobs:
            row, elapsed, _ = run_job(config, job, out_dir, traces)
            log.info("%s seed %d done in %.2fs", job.label, job.seed, elapsed)
            results.append((row, elapsed))
    rows = [r for r, _ in results]
    _atomic(os.path.join(out_dir, "summary.csv"), lambda p: _write_rows(p, SUMMARY_FIELDS, rows))
    timing = [{"algorithm": r["algorithm"], "seed": r["seed"], "wall_clock_s": f"{t:.4f}"}
              for r, t in results]
    _atomic(os.path.join(out_dir, "timing.csv"),
            lambda p: _write_rows(p, ["algorithm", "seed", "wall_clock_s"], timing))
    return rows


# ---------------------------------------------------------------------------
# verify

@dataclass(frozen=True)
class CheckResult:
    name: str
    ok: bool
    detail: str = ""


def _expected_update_gap(q, mdp, ref=(0, 0)):
    """Largest |E[target] - Q| over all pairs, from the transition law directly."""
    v = state_values(q, mdp.cap_transmit)
    worst = 0.0
    for tau in range(mdp.M + 1):
        for a in (0, 1):
            target = sum(p * v[nxt] for nxt, p in transition(tau, a, mdp.M, mdp.r_s).items())
            target += mdp.traces[tau] + mdp.lam * a - q[ref]
            worst = max(worst, abs(target - q[tau, a]))
    return worst


def verify_suite(config: ExperimentConfig, fault_row: int | None = None) -> list[CheckResult]:
    vc = config.verify
    out = []
    P = steady_state_covariance(config.system)
    A, C, Sw, Sv = config.system.A, config.system.C, config.system.Sigma_w, config.system.Sigma_v
    prior = A @ P @ A.T + Sw
    post = prior - prior @ C.T @ np.linalg.solve(C @ prior @ C.T + Sv, C @ prior)
    gap = float(np.max(np.abs(post - P)))
    out.append(CheckResult("riccati fixed point", gap <= 1e-9 * max(1.0, np.abs(P).max()),
                           f"residual {gap:.3g}"))

    ladder = cost_ladder(config.system, P, vc.M)
    small = cost_ladder(config.system, P, vc.brute_M)
    cons = build_constraints(vc.M, fault_row)
    T = cons.T
    for r_s in vc.r_s:
        for lam in vc.lam:
            tag = f"r_s={r_s} lam={lam}"
            mdp = TruncatedMdp(vc.M, r_s, lam, ladder.traces)
            res = relative_value_iteration(mdp, tol=1e-11)
            q = res.q.q
            scale = max(1.0, float(np.abs(q).max()))
            st = check_structure(q, slack=1e-9 * scale)
            out.append(CheckResult(f"structure {tag}", st.ok, f"max violation {st.max_violation:.3g}"))
            theta = extract_threshold(res.policy)
            out.append(CheckResult(f"threshold {tag}", theta is not None, f"theta {theta}"))
            tq = T @ q.ravel()
            out.append(CheckResult(f"constraint rows {tag}", bool(tq.min() >= -1e-9 * scale),
                                   f"min T.Q {tq.min():.3g}"))
            stencil = apply_constraints(q)
            out.append(CheckResult(f"stencil agreement {tag}",
                                   bool(np.allclose(stencil, tq, rtol=0, atol=1e-9 * scale)), ""))
            gap = _expected_update_gap(q, mdp)
            out.append(CheckResult(f"expected-update fixed point {tag}", gap <= 1e-9 * scale,
                                   f"gap {gap:.3g}"))
            bmdp = TruncatedMdp(vc.brute_M, r_s, lam, small.traces)
            bpol, bcost = brute_force_optimal(bmdp)
            bres = relative_value_iteration(bmdp, tol=1e-12)
            same = np.array_equal(bpol, bres.policy)
            if not same:
                # on a lossless channel states past the threshold are unreachable, so
                # several policies share the optimal cost; compare what they earn instead
                pi = stationary_distribution(bres.policy, r_s)
                rvi_cost = float(pi @ (small.traces + lam * bres.policy))
                same = abs(rvi_cost - bcost) <= 1e-9 * max(1.0, abs(bcost))
            close = abs(bcost - bres.j_star) <= 1e-6 * max(1.0, abs(bcost))
            out.append(CheckResult(f"brute force {tag}", same and close,
                                   f"J brute {bcost:.10g} rvi {bres.j_star:.10g}"))
    for r_s in vc.r_s:
        for b in vc.b:
            pol = constrained_optimal_policy(r_s, b)
            _, j_r = policy_value_analytic(pol, r_s)
            ok = abs(j_r - b) <= 1e-10 and 0.0 < pol.r_theta <= 1.0
            out.append(CheckResult(f"budget exactness r_s={r_s} b={b}", ok,
                                   f"theta {pol.theta} r {pol.r_theta:.6g} J_r {j_r:.12g}"))
    lc = config.learner
    for name, sched in (("alpha", lc.alpha), ("beta", lc.beta), ("dual", lc.dual)):
        chk = check_schedule(sched)
        out.append(CheckResult(f"schedule {name}", chk.ok, f"squared tail {chk.squared_tail:.3g}"))
    out.append(CheckResult("time scales separated", timescales_separated(lc.alpha, lc.beta), ""))
    return out
