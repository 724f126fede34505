"""Experiment configuration: a TOML file with flat sections.

Sections and keys (defaults in parentheses)::

    [system]   A, C, Sigma_w, Sigma_v        matrices as nested arrays
    [channel]  r_s = 0.7                      or segments = [[0, 0.9], [2500, 0.6]]
    [problem]  kind = "costly" | "constrained"; lam (costly) or b (constrained)
    [solver]   M (30), tol (1e-10)
    [learner]  algorithms, epsilon (0.1), sync_epsilon (0.0),
               alpha_kind/alpha_c/alpha_a, beta_kind/beta_c/beta_a,
               dual_kind/dual_c/dual_a/dual_cap, project_dual (true),
               mask_unvisited (true), idle_every_step (false), inner ("sync"),
               lam0 (0.0), x_iters ([1]), warm_start (false)
    [run]      T (20000), seeds ([1..10]), T_w (2000), out ("results"), workers (1)
    [verify]   r_s, lam, b (grids), M (10), brute_M (8)

The named presets live next to this module in ``presets/<name>.toml``.
"""

from __future__ import annotations

import hashlib
import json
import sys
from dataclasses import dataclass, field
from importlib import resources

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

from .channel_sim import ChannelSchedule
from .errors import ConfigError
from .learning import DEFAULT_ALPHA, DEFAULT_BETA, DEFAULT_DUAL, SCHEDULE_KINDS, StepSchedule
from .process_model import LtiSystem, reference_system

PRESETS = ("costly20", "constrained04", "timevarying", "mdpx")
ALGORITHMS = ("async", "structured", "sync", "sync+structured", "two_time_scale", "param_p2", "mdp_x")
SECTIONS = ("system", "channel", "problem", "solver", "learner", "run", "verify")


@dataclass(frozen=True)
class LearnerConfig:
    algorithms: tuple = ("sync",)
    epsilon: float = 0.1
    sync_epsilon: float = 0.0
    alpha: StepSchedule = DEFAULT_ALPHA
    beta: StepSchedule = DEFAULT_BETA
    dual: StepSchedule = DEFAULT_DUAL
    project_dual: bool = True
    mask_unvisited: bool = True
    idle_every_step: bool = False
    inner: str = "sync"
    lam0: float = 0.0
    x_iters: tuple = (1,)
    warm_start: bool = False


@dataclass(frozen=True)
class VerifyConfig:
    r_s: tuple = (0.3, 0.5, 0.7, 0.9, 1.0)
    lam: tuple = (0.0, 5.0, 20.0, 100.0)
    b: tuple = (0.1, 0.25, 0.4, 0.75, 1.0)
    M: int = 10
    brute_M: int = 8


@dataclass(frozen=True)
class ExperimentConfig:
    system: LtiSystem
    channel: ChannelSchedule
    kind: str
    lam: float | None
    b: float | None
    M: int = 30
    tol: float = 1e-10
    learner: LearnerConfig = field(default_factory=LearnerConfig)
    T: int = 20000
    seeds: tuple = tuple(range(1, 11))
    T_w: int = 2000
    out: str = "results"
    workers: int = 1
    verify: VerifyConfig = field(default_factory=VerifyConfig)
    normalized: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def digest(self) -> str:
        """Hash of everything that can change results (output path and worker count excluded)."""
        data = json.loads(json.dumps(self.normalized))
        for key in ("out", "workers"):
            data.get("run", {}).pop(key, None)
        blob = json.dumps(data, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    @property
    def price(self) -> float:
        """Communication price used by the costly learners (lam0 for constrained runs)."""
        return self.lam if self.lam is not None else self.learner.lam0

    def with_overrides(self, seed: int | None = None, out: str | None = None,
                       workers: int | None = None) -> "ExperimentConfig":
        data = json.loads(json.dumps(self.normalized))
        if seed is not None:
            data["run"]["seeds"] = [int(seed)]
        if out is not None:
            data["run"]["out"] = str(out)
        if workers is not None:
            data["run"]["workers"] = int(workers)
        return parse_config(data)


def _get(section: dict, name: str, key: str, default, cast):
    if key not in section:
        return default
    try:
        return cast(section[key])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{name}.{key}", str(exc)) from None


def _matrix(section, name, key, default):
    if key not in section:
        return default
    val = section[key]
    if not isinstance(val, list) or not all(isinstance(row, list) for row in val):
        raise ConfigError(f"{name}.{key}", "expected a nested array")
    try:
        return [[float(x) for x in row] for row in val]
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{name}.{key}", str(exc)) from None


def _schedule(section, prefix, default: StepSchedule) -> StepSchedule:
    kind = _get(section, "learner", f"{prefix}_kind", default.kind, str)
    if kind not in SCHEDULE_KINDS:
        raise ConfigError(f"learner.{prefix}_kind", f"must be one of {SCHEDULE_KINDS}")
    c = _get(section, "learner", f"{prefix}_c", default.c, float)
    a = _get(section, "learner", f"{prefix}_a", default.a, float)
    cap = _get(section, "learner", f"{prefix}_cap", default.cap, float)
    try:
        return StepSchedule(kind, c, a, cap)
    except ValueError as exc:
        raise ConfigError(f"learner.{prefix}", str(exc)) from None


def _bool(x):
    if not isinstance(x, bool):
        raise ValueError("expected true or false")
    return x


def _floats(x):
    return tuple(float(v) for v in (x if isinstance(x, list) else [x]))


def parse_config(data: dict) -> ExperimentConfig:
    """Validate a parsed TOML mapping; errors name the offending field."""
    for name in data:
        if name not in SECTIONS:
            raise ConfigError(name, f"unknown section; expected one of {SECTIONS}")
    sec = {name: data.get(name, {}) for name in SECTIONS}
    for name, body in sec.items():
        if not isinstance(body, dict):
            raise ConfigError(name, "expected a table")

    ps = reference_system()
    s = sec["system"]
    mats = {key: _matrix(s, "system", key, getattr(ps, key).tolist())
            for key in ("A", "C", "Sigma_w", "Sigma_v")}
    try:
        system = LtiSystem(**mats)
    except ValueError as exc:
        raise ConfigError("system", str(exc)) from None

    ch = sec["channel"]
    if "segments" in ch and "r_s" in ch:
        raise ConfigError("channel", "give either r_s or segments, not both")
    try:
        if "segments" in ch:
            segments = [(int(s0), float(r)) for s0, r in ch["segments"]]
        else:
            segments = [(0, _get(ch, "channel", "r_s", 0.7, float))]
        channel = ChannelSchedule(tuple(segments))
    except (TypeError, ValueError) as exc:
        raise ConfigError("channel.segments", str(exc)) from None

    pr = sec["problem"]
    kind = _get(pr, "problem", "kind", "costly", str)
    if kind not in ("costly", "constrained"):
        raise ConfigError("problem.kind", "must be 'costly' or 'constrained'")
    lam = _get(pr, "problem", "lam", None, float)
    b = _get(pr, "problem", "b", None, float)
    if kind == "costly":
        if lam is None or b is not None:
            raise ConfigError("problem.lam", "costly problems need lam and no b")
        if lam < 0:
            raise ConfigError("problem.lam", "must be nonnegative")
    else:
        if b is None or lam is not None:
            raise ConfigError("problem.b", "constrained problems need b and no lam")
        if not 0.0 < b <= 1.0:
            raise ConfigError("problem.b", "must lie in (0, 1]")

    so = sec["solver"]
    M = _get(so, "solver", "M", 30, int)
    if M < 1:
        raise ConfigError("solver.M", "must be >= 1")
    tol = _get(so, "solver", "tol", 1e-10, float)
    if not tol > 0:
        raise ConfigError("solver.tol", "must be positive")

    le = sec["learner"]
    algs = le.get("algorithms", ["sync"])
    if isinstance(algs, str):
        algs = [algs]
    for alg in algs:
        if alg not in ALGORITHMS:
            raise ConfigError("learner.algorithms", f"unknown algorithm {alg!r}; expected {ALGORITHMS}")
    if not algs:
        raise ConfigError("learner.algorithms", "must not be empty")
    if kind == "costly" and {"two_time_scale", "param_p2"} & set(algs):
        raise ConfigError("learner.algorithms", "two_time_scale and param_p2 need a constrained problem")
    if kind == "constrained" and set(algs) - {"two_time_scale", "param_p2"}:
        raise ConfigError("learner.algorithms", "constrained problems run two_time_scale or param_p2 only")
    inner = _get(le, "learner", "inner", "sync", str)
    if inner not in ("async", "structured", "sync", "sync+structured"):
        raise ConfigError("learner.inner", "must be a Q-learning mode")
    x_iters = _get(le, "learner", "x_iters", (1,), lambda v: tuple(int(x) for x in
                                                            (v if isinstance(v, list) else [v])))
    if not x_iters or any(x < 1 for x in x_iters):
        raise ConfigError("learner.x_iters", "must be >= 1")
    epsilon = _get(le, "learner", "epsilon", 0.1, float)
    sync_epsilon = _get(le, "learner", "sync_epsilon", 0.0, float)
    for key, eps in (("epsilon", epsilon), ("sync_epsilon", sync_epsilon)):
        if not 0.0 <= eps <= 1.0:
            raise ConfigError(f"learner.{key}", "must lie in [0, 1]")
    lam0 = _get(le, "learner", "lam0", 0.0, float)
    if lam0 < 0:
        raise ConfigError("learner.lam0", "must be nonnegative")
    learner = LearnerConfig(
        algorithms=tuple(algs),
        epsilon=epsilon,
        sync_epsilon=sync_epsilon,
        alpha=_schedule(le, "alpha", DEFAULT_ALPHA),
        beta=_schedule(le, "beta", DEFAULT_BETA),
        dual=_schedule(le, "dual", DEFAULT_DUAL),
        project_dual=_get(le, "learner", "project_dual", True, _bool),
        mask_unvisited=_get(le, "learner", "mask_unvisited", True, _bool),
        idle_every_step=_get(le, "learner", "idle_every_step", False, _bool),
        inner=inner,
        lam0=lam0,
        x_iters=x_iters,
        warm_start=_get(le, "learner", "warm_start", False, _bool),
    )

    ru = sec["run"]
    T = _get(ru, "run", "T", 20000, int)
    if T < 1:
        raise ConfigError("run.T", "must be >= 1")
    seeds = ru.get("seeds", list(range(1, 11)))
    if not isinstance(seeds, list) or not seeds:
        raise ConfigError("run.seeds", "must be a nonempty array")
    try:
        seeds = tuple(int(x) for x in seeds)
    except (TypeError, ValueError) as exc:
        raise ConfigError("run.seeds", str(exc)) from None
    T_w = _get(ru, "run", "T_w", 2000, int)
    if T_w < 1:
        raise ConfigError("run.T_w", "must be >= 1")
    out = _get(ru, "run", "out", "results", str)
    workers = _get(ru, "run", "workers", 1, int)
    if workers < 1:
        raise ConfigError("run.workers", "must be >= 1")

    ve = sec["verify"]
    vdef = VerifyConfig()
    verify = VerifyConfig(
        r_s=_get(ve, "verify", "r_s", vdef.r_s, _floats),
        lam=_get(ve, "verify", "lam", vdef.lam, _floats),
        b=_get(ve, "verify", "b", vdef.b, _floats),
        M=_get(ve, "verify", "M", vdef.M, int),
        brute_M=_get(ve, "verify", "brute_M", vdef.brute_M, int),
    )
    if any(not 0.0 < r <= 1.0 for r in verify.r_s):
        raise ConfigError("verify.r_s", "grid values must lie in (0, 1]")
    if any(not 0.0 < x <= 1.0 for x in verify.b):
        raise ConfigError("verify.b", "grid values must lie in (0, 1]")
    if verify.M < 1 or not 1 <= verify.brute_M <= 14:
        raise ConfigError("verify.M", "need M >= 1 and 1 <= brute_M <= 14")

    normalized = {
        "system": mats,
        "channel": {"segments": [list(sg) for sg in channel.segments]},
        "problem": {"kind": kind, **({"lam": lam} if lam is not None else {"b": b})},
        "solver": {"M": M, "tol": tol},
        "learner": {
            "algorithms": list(learner.algorithms),
            "epsilon": learner.epsilon,
            "sync_epsilon": learner.sync_epsilon,
            **{f"alpha_{k}": v for k, v in learner.alpha.to_dict().items()},
            **{f"beta_{k}": v for k, v in learner.beta.to_dict().items()},
            **{f"dual_{k}": v for k, v in learner.dual.to_dict().items()},
            "project_dual": learner.project_dual,
            "mask_unvisited": learner.mask_unvisited,
            "idle_every_step": learner.idle_every_step,
            "inner": learner.inner,
            "lam0": learner.lam0,
            "x_iters": list(learner.x_iters),
            "warm_start": learner.warm_start,
        },
        "run": {"T": T, "seeds": list(seeds), "T_w": T_w, "out": out, "workers": workers},
        "verify": {"r_s": list(verify.r_s), "lam": list(verify.lam), "b": list(verify.b),
                   "M": verify.M, "brute_M": verify.brute_M},
    }
    return ExperimentConfig(system=system, channel=channel, kind=kind, lam=lam, b=b, M=M, tol=tol,
                            learner=learner, T=T, seeds=seeds, T_w=T_w, out=out, workers=workers,
                            verify=verify, normalized=normalized)


def loads(text: str) -> ExperimentConfig:
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError("<file>", f"TOML syntax error: {exc}") from None
    return parse_config(data)


def load(path) -> ExperimentConfig:
    try:
        with open(path, "rb") as fh:
            text = fh.read().decode()
    except OSError as exc:
        raise ConfigError(str(path), str(exc)) from None
    return loads(text)


def preset_text(name: str) -> str:
    if name not in PRESETS:
        raise ConfigError("preset", f"unknown preset {name!r}; expected one of {PRESETS}")
    return resources.files("sensorsched").joinpath("presets").joinpath(f"{name}.toml").read_text()


def load_preset(name: str) -> ExperimentConfig:
    return loads(preset_text(name))
