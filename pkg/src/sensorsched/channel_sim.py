"""Bernoulli packet-drop channel, the closed-loop simulation and its metrics.

Timing: at step k the cost is charged on tau(k), the controller picks a(k),
the channel returns eta (always 0 when a(k) = 0), and

    tau(k+1) = 0                   if a(k) = 1 and eta = 1
             = min(tau(k) + 1, M)  otherwise.

A learner therefore sees the sample (tau(k), a(k), tau(k+1)).
"""

from __future__ import annotations

import bisect
import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import StateOutOfRange

STREAM_IDS = {"channel": 0, "exploration": 1, "policy": 2}
_BLOCK = 4096


@dataclass(frozen=True)
class ChannelSchedule:
    """Piecewise-constant success rate: ``segments`` = ((start_step, r_s), ...)."""

    segments: tuple

    def __post_init__(self):
        segs = tuple((int(s), float(r)) for s, r in self.segments)
        if not segs:
            raise ValueError("channel schedule needs at least one segment")
        if segs[0][0] != 0:
            raise ValueError("first channel segment must start at step 0")
        starts = [s for s, _ in segs]
        if any(b <= a for a, b in zip(starts, starts[1:])):
            raise ValueError("channel segment starts must be strictly increasing")
        for _, r in segs:
            if not 0.0 <= r <= 1.0:
                raise ValueError(f"success rate must lie in [0, 1], got {r}")
        object.__setattr__(self, "segments", segs)
        object.__setattr__(self, "_starts", starts)

    @classmethod
    def constant(cls, r_s: float) -> "ChannelSchedule":
        return cls(((0, r_s),))

    def r_at(self, k: int) -> float:
        i = bisect.bisect_right(self._starts, k) - 1
        return self.segments[i][1]

    def rates(self, T: int) -> np.ndarray:
        out = np.empty(T)
        for i, (start, r) in enumerate(self.segments):
            stop = self.segments[i + 1][0] if i + 1 < len(self.segments) else T
            out[min(start, T):min(stop, T)] = r
        return out


def channel_draw(schedule: ChannelSchedule, k: int, a: int, u: float) -> int:
    if a == 0:
        return 0
    return 1 if u < schedule.r_at(k) else 0


class RandomStreams:
    """Named, independent Philox streams keyed by (seed, stream id).

    Draws come from pre-generated blocks; consuming extra exploration draws
    never shifts the channel stream.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._gens = {}
        self._bufs = {}
        self._pos = {}
        for name, sid in STREAM_IDS.items():
            ss = np.random.SeedSequence(self.seed, spawn_key=(sid,))
            self._gens[name] = np.random.Generator(np.random.Philox(ss))
            self._bufs[name] = None
            self._pos[name] = _BLOCK

    def uniform(self, name: str) -> float:
        pos = self._pos[name]
        if pos >= _BLOCK:
            self._bufs[name] = self._gens[name].random(_BLOCK).tolist()
            pos = 0
        self._pos[name] = pos + 1
        return self._bufs[name][pos]


@dataclass
class Trace:
    tau: np.ndarray
    a: np.ndarray
    eta: np.ndarray
    cost_e: np.ndarray
    lam: np.ndarray | None = None
    r_hat: np.ndarray | None = None
    seed: int = 0
    digest: str = ""
    M: int = 0
    q_final: np.ndarray | None = field(default=None, repr=False)

    def __len__(self):
        return len(self.tau)

    @property
    def k(self) -> np.ndarray:
        return np.arange(len(self.tau))

    def cumulative(self):
        """Running averages (J_e(k), J_r(k)) for every k."""
        n = np.arange(1, len(self) + 1)
        return np.cumsum(self.cost_e) / n, np.cumsum(self.a) / n

    def windowed(self, T_w: int):
        """Sliding-window averages for every k (prefix average while k < T_w)."""
        if T_w < 1:
            raise ValueError("window must be >= 1")
        out = []
        for series in (self.cost_e, self.a.astype(np.float64)):
            cs = np.concatenate([[0.0], np.cumsum(series)])
            k = np.arange(len(series))
            lo = np.maximum(k - T_w + 1, 0)
            out.append((cs[k + 1] - cs[lo]) / (k + 1 - lo))
        return out[0], out[1]

    def check_dynamics(self) -> bool:
        """Re-derive tau(k+1) from (tau, a, eta) and compare with the record."""
        if np.any(self.eta[self.a == 0] != 0):
            return False
        nxt = np.where((self.a == 1) & (self.eta == 1), 0, np.minimum(self.tau + 1, self.M))
        return bool(np.array_equal(nxt[:-1], self.tau[1:]))

    def to_csv(self, path, T_w: int):
        je, jr = self.cumulative()
        we, wr = self.windowed(T_w)

        def fmt(x):
            return "" if x is None or (isinstance(x, float) and math.isnan(x)) else f"{x:.12g}"

        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["k", "tau", "a", "eta", "cost_e", "J_e_emp", "J_r_emp", "J_e_win",
                        "J_r_win", "lambda", "r_hat"])
            for k in range(len(self)):
                w.writerow([
                    k, int(self.tau[k]), int(self.a[k]), int(self.eta[k]), fmt(float(self.cost_e[k])),
                    fmt(float(je[k])), fmt(float(jr[k])), fmt(float(we[k])), fmt(float(wr[k])),
                    fmt(None if self.lam is None else float(self.lam[k])),
                    fmt(None if self.r_hat is None else float(self.r_hat[k])),
                ])


def empirical_metrics(trace: Trace, k: int) -> tuple[float, float]:
    if not 0 <= k < len(trace):
        raise IndexError(f"k={k} outside trace of length {len(trace)}")
    je, jr = trace.cumulative()
    return float(je[k]), float(jr[k])


def sliding_metrics(trace: Trace, k: int, T_w: int) -> tuple[float, float]:
    if not 0 <= k < len(trace):
        raise IndexError(f"k={k} outside trace of length {len(trace)}")
    if T_w < 1:
        raise ValueError("window must be >= 1")
    lo = 0 if k < T_w else k - T_w + 1
    return float(trace.cost_e[lo:k + 1].mean()), float(trace.a[lo:k + 1].mean())


def run(controller, schedule: ChannelSchedule, T: int, seed: int, M: int, traces,
        digest: str = "") -> Trace:
    """Simulate T steps of the closed loop from tau(0) = 0."""
    if T < 1:
        raise ValueError("T must be >= 1")
    traces = np.asarray(traces, dtype=np.float64)
    if len(traces) < M + 1:
        raise ValueError(f"need traces for tau = 0..{M}")
    streams = RandomStreams(seed)
    rates = schedule.rates(T).tolist()
    taus = np.empty(T, dtype=np.int64)
    acts = np.empty(T, dtype=np.int8)
    etas = np.empty(T, dtype=np.int8)
    lam_log = np.full(T, np.nan) if controller.lam is not None else None
    r_log = np.full(T, np.nan)
    track_r = hasattr(controller, "n_s")
    tau = 0
    act = controller.act
    observe = controller.observe
    for k in range(T):
        taus[k] = tau
        a = act(k, tau, streams)
        if a not in (0, 1):
            raise ValueError(f"controller returned invalid action {a!r}")
        # one channel draw per step keeps the channel stream aligned across controllers
        u = streams.uniform("channel")
        eta = 1 if (a == 1 and u < rates[k]) else 0
        tau_next = 0 if eta else (tau + 1 if tau < M else M)
        acts[k] = a
        etas[k] = eta
        # price and estimate are logged as they stood when a(k) was chosen
        if lam_log is not None:
            lam_log[k] = controller.lam
        if track_r:
            rh = controller.r_hat
            if rh is not None:
                r_log[k] = rh
        observe(k, tau, a, eta, tau_next)
        tau = tau_next
    if taus.max() > M:
        raise StateOutOfRange("holding time escaped the truncation level")
    return Trace(
        tau=taus,
        a=acts,
        eta=etas,
        cost_e=traces[taus],
        lam=lam_log,
        r_hat=r_log if track_r else None,
        seed=int(seed),
        digest=digest,
        M=M,
        q_final=None if controller.q_table() is None else np.array(controller.q_table()),
    )
