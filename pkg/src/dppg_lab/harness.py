"""Multi-seed sweeps, bootstrap intervals and CSV emitters for external plotting.

Every artifact is UTF-8 CSV or JSON:

* run log      ``step,episodic_return,actor_loss,critic_loss`` (blank = no value)
* curve        ``step,mean,ci_lo,ci_hi,n_seeds``
* landscape    ``u0,u1[,u2],q``
* manifest     JSON with the config hash, seeds, wall times and diagnostics
"""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .agents import AGENT_IDS, AgentConfig, ReplayBuffer, RunLog, default_config, train
from .critic import icl_update, make_twin_critic, q_values, td_update_param
from .envs import ENV_IDS, make_env
from .errors import ConfigError
from .param_mdp import OracleConfig, ParamMdp, exact_param_reward
from .nn import init_mlp
from .policy import CategoricalSpec, GaussSpec, PolicyHead, bandit_gauss_spec, sample_action

OUT_ENV_VAR = "DPPG_LAB_OUT"
BOOTSTRAP_RESAMPLES = 10_000
BOOTSTRAP_METHOD = "percentile"


def output_root(default="runs") -> Path:
    return Path(os.environ.get(OUT_ENV_VAR) or default)


# -- bootstrap -----------------------------------------------------------------------

@dataclass(frozen=True)
class CiSummary:
    point: float
    lo: float
    hi: float
    n: int
    resamples: int = BOOTSTRAP_RESAMPLES
    level: float = 0.95
    method: str = BOOTSTRAP_METHOD
    degenerate: bool = False

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def overlaps(self, other: "CiSummary") -> bool:
        return self.lo <= other.hi and other.lo <= self.hi


def bootstrap_ci(values: Sequence[float], resamples: int = BOOTSTRAP_RESAMPLES,
                 rng: Optional[np.random.Generator] = None, level: float = 0.95) -> CiSummary:
    """Percentile bootstrap interval for the mean.

    Resample indices are drawn as one ``(resamples, n)`` integer block, so a
    fixed ``rng`` seed gives a fixed interval.  A single value (or zero
    spread) yields the degenerate interval ``[x, x]``.
    """
    x = np.asarray(values, dtype=np.float64).ravel()
    if x.size == 0:
        raise ConfigError("bootstrap needs at least one value")
    if not np.all(np.isfinite(x)):
        raise ConfigError("bootstrap values must be finite")
    point = float(x.mean())
    if x.size == 1 or np.ptp(x) == 0.0:
        c = float(x[0])
        return CiSummary(c, c, c, x.size, resamples, level, degenerate=x.size == 1)
    rng = rng if rng is not None else np.random.default_rng(0)
    idx = rng.integers(0, x.size, size=(resamples, x.size))
    # a mean of resampled values lies in [min, max]; clip the last-ulp rounding
    means = np.clip(x[idx].mean(axis=1), x.min(), x.max())
    alpha = 0.5 * (1.0 - level)
    lo, hi = np.quantile(means, [alpha, 1.0 - alpha])
    return CiSummary(point, min(float(lo), point), max(float(hi), point), x.size, resamples, level)


def final_performance(log: RunLog, fraction: float = 0.1) -> float:
    """Mean return over episodes that ended in the final ``fraction`` of steps."""
    return log.final_performance(fraction)


# -- sweeps ----------------------------------------------------------------------------

@dataclass
class RunConfig:
    agent: str
    env: str
    steps: int
    seeds: list[int]
    overrides: dict = field(default_factory=dict)
    out_dir: Optional[str] = None
    workers: int = 1

    def __post_init__(self):
        if self.agent not in AGENT_IDS:
            raise ConfigError(f"unknown agent {self.agent!r}")
        if self.agent == "dppgtd":
            raise ConfigError("dppgtd logs gradient traces, not episodic returns; run it with train")
        if self.env not in ENV_IDS:
            raise ConfigError(f"unknown environment {self.env!r}")
        if self.steps <= 0:
            raise ConfigError("steps must be positive")
        self.seeds = [int(s) for s in self.seeds]
        if not self.seeds or len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("seeds must be a non-empty list of distinct integers")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        self.agent_config()   # validate overrides early

    def agent_config(self) -> AgentConfig:
        return default_config(self.env, **self.overrides)

    def identity(self) -> dict:
        """Everything that determines the results (output location and worker count do not)."""
        return {"agent": self.agent, "env": self.env, "steps": self.steps, "seeds": list(self.seeds),
                "config": dataclasses.asdict(self.agent_config())}

    def config_hash(self) -> str:
        blob = json.dumps(self.identity(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def csv_name(agent: str, env: str, seed: int) -> str:
    return f"{agent}_{env}_seed{seed}.csv"


def _run_one(args):
    agent, env, steps, seed, overrides = args
    t0 = time.perf_counter()
    try:
        log = train(agent, env, steps, seed, default_config(env, **overrides))
    except Exception as exc:  # recorded in the manifest; the sweep continues
        return seed, None, f"{type(exc).__name__}: {exc}", time.perf_counter() - t0
    log.extra.clear()
    return seed, log, log.diagnostic, time.perf_counter() - t0


@dataclass
class SweepResult:
    logs: dict
    manifest: dict
    out_dir: Optional[Path]

    def finals(self) -> np.ndarray:
        return np.array([final_performance(self.logs[s]) for s in sorted(self.logs)])


def sweep(rc: RunConfig, write: bool = True) -> SweepResult:
    """Run every seed, write one CSV per seed plus ``manifest.json``."""
    jobs = [(rc.agent, rc.env, rc.steps, s, rc.overrides) for s in rc.seeds]
    if rc.workers > 1:
        with ProcessPoolExecutor(max_workers=rc.workers) as pool:
            results = list(pool.map(_run_one, jobs))
    else:
        results = [_run_one(j) for j in jobs]
    out = None
    if write:
        out = Path(rc.out_dir) if rc.out_dir else output_root() / f"{rc.agent}_{rc.env}_{rc.config_hash()[:12]}"
        out.mkdir(parents=True, exist_ok=True)
    logs, runs = {}, []
    for seed, log, diag, wall in results:
        entry = {"seed": seed, "wall_time_s": round(wall, 4), "aborted": bool(diag), "diagnostic": diag}
        if log is not None:
            logs[seed] = log
            entry["final_performance"] = final_performance(log)
            if out is not None:
                name = csv_name(rc.agent, rc.env, seed)
                log.write_csv(out / name)
                entry["csv"] = name
        runs.append(entry)
    manifest = {"config_hash": rc.config_hash(), **rc.identity(), "runs": runs,
                "bootstrap": {"method": BOOTSTRAP_METHOD, "resamples": BOOTSTRAP_RESAMPLES}}
    if out is not None:
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return SweepResult(logs, manifest, out)


def load_sweep(directory) -> tuple[dict, dict]:
    """Read back ``manifest.json`` and the per-seed logs of a sweep directory."""
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text(encoding="utf-8"))
    logs = {}
    for run in manifest["runs"]:
        if "csv" in run:
            logs[run["seed"]] = RunLog.read_csv(directory / run["csv"], manifest["agent"], manifest["env"], run["seed"])
    return manifest, logs


# -- learning curves -------------------------------------------------------------------

def _smoothed(log: RunLog, grid: np.ndarray, window: int) -> np.ndarray:
    steps, rets = log.returns()
    csum = np.concatenate([[0.0], np.cumsum(rets)])
    hi = np.searchsorted(steps, grid, side="right")
    lo = np.searchsorted(steps, grid - window, side="right")
    count = hi - lo
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(count > 0, (csum[hi] - csum[lo]) / np.maximum(count, 1), np.nan)


def learning_curve(logs: Sequence[RunLog], n_points: int = 100, window_fraction: float = 0.05,
                   resamples: int = BOOTSTRAP_RESAMPLES, seed: int = 0) -> list[dict]:
    """Window-averaged returns on a uniform step grid, bootstrapped across seeds per grid point.

    The value at grid step ``g`` is the mean return of episodes that ended
    in ``(g - window, g]``.
    """
    if not logs:
        raise ConfigError("need at least one run log")
    steps = min(l.steps for l in logs)
    grid = np.unique(np.linspace(steps / n_points, steps, n_points).round().astype(np.int64))
    window = max(1, int(round(window_fraction * steps)))
    curves = np.array([_smoothed(l, grid, window) for l in logs])
    rng = np.random.default_rng(seed)
    rows = []
    for j, g in enumerate(grid):
        col = curves[:, j]
        col = col[~np.isnan(col)]
        if col.size == 0:
            rows.append({"step": int(g), "mean": float("nan"), "ci_lo": float("nan"), "ci_hi": float("nan"), "n_seeds": 0})
            continue
        ci = bootstrap_ci(col, resamples, rng)
        rows.append({"step": int(g), "mean": ci.point, "ci_lo": ci.lo, "ci_hi": ci.hi, "n_seeds": int(col.size)})
    return rows


def _rows_to_csv(rows: list[dict], columns: Sequence[str]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow(["" if isinstance(r[c], float) and np.isnan(r[c]) else (repr(r[c]) if isinstance(r[c], float) else r[c])
                    for c in columns])
    return buf.getvalue()


def emit_learning_curve(logs: Sequence[RunLog], path=None, n_points: int = 100, window_fraction: float = 0.05,
                        resamples: int = BOOTSTRAP_RESAMPLES, seed: int = 0) -> str:
    text = _rows_to_csv(learning_curve(logs, n_points, window_fraction, resamples, seed),
                        ("step", "mean", "ci_lo", "ci_hi", "n_seeds"))
    if path is not None:
        Path(path).write_text(text, encoding="utf-8")
    return text


# -- critic landscapes -----------------------------------------------------------------

def landscape_grid(spec, resolution: int) -> np.ndarray:
    """``resolution**2`` parameter points covering the (2-D) parameter space.

    Categorical with three arms: the barycentric map
    ``u = [1 - x, x (1 - y), x y]`` over ``x, y in linspace(0, 1)``, which
    hits every simplex vertex.  Gaussian: ``[-1, 1]^2``.
    """
    if resolution < 2:
        raise ConfigError("resolution must be at least 2")
    x, y = np.meshgrid(np.linspace(0.0, 1.0, resolution), np.linspace(0.0, 1.0, resolution), indexing="ij")
    x, y = x.ravel(), y.ravel()
    if isinstance(spec, CategoricalSpec):
        if spec.param_dim != 3:
            raise ConfigError("simplex landscapes need exactly three categories")
        return np.stack([1.0 - x, x * (1.0 - y), x * y], axis=1)
    if isinstance(spec, GaussSpec) and spec.param_dim == 2:
        return np.stack([2.0 * x - 1.0, 2.0 * y - 1.0], axis=1)
    raise ConfigError("landscapes need at most two effective parameter dimensions")


def critic_landscape(q_fn: Callable, spec, resolution: int = 41) -> list[dict]:
    """Evaluate ``q_fn(U)`` (batched) on :func:`landscape_grid`."""
    U = landscape_grid(spec, resolution)
    q = np.asarray(q_fn(U), dtype=np.float64).reshape(-1)
    rows = []
    for u, v in zip(U, q):
        row = {f"u{i}": float(c) for i, c in enumerate(u)}
        row["q"] = float(v)
        rows.append(row)
    return rows


def emit_critic_landscape(q_fn: Callable, spec, resolution: int = 41, path=None) -> str:
    rows = critic_landscape(q_fn, spec, resolution)
    text = _rows_to_csv(rows, tuple(k for k in rows[0]))
    if path is not None:
        Path(path).write_text(text, encoding="utf-8")
    return text


def net_q_fn(net, state) -> Callable:
    """``U -> q(state, U)`` for a critic network."""
    state = np.asarray(state, dtype=np.float64)
    return lambda U: q_values(net, np.broadcast_to(state, (len(U), state.size)), U)


# -- bandit policy evaluation ------------------------------------------------------------

PE_PARAMS = {"karmed": np.array([1.0, 1.0, 1.0]) / 3.0, "bimodal": np.array([0.0, 0.5])}


@dataclass
class PeResult:
    env: str
    update: str
    critic: object
    spec: object
    state: np.ndarray
    u_pe: np.ndarray
    q_on_policy: float
    r_on_policy: float
    vertex_values: Optional[np.ndarray]
    wall_time_s: float

    @property
    def on_policy_error(self) -> float:
        return abs(self.q_on_policy - self.r_on_policy)

    @property
    def vertex_ordered(self) -> Optional[bool]:
        if self.vertex_values is None:
            return None
        return bool(np.all(np.diff(self.vertex_values) > 0.0))

    def q_fn(self) -> Callable:
        return net_q_fn(self.critic.q1, self.state)

    def summary(self) -> dict:
        return {"env": self.env, "update": self.update, "u_pe": self.u_pe.tolist(),
                "q_on_policy": self.q_on_policy, "r_on_policy": self.r_on_policy,
                "on_policy_error": self.on_policy_error,
                "vertex_values": None if self.vertex_values is None else self.vertex_values.tolist(),
                "vertex_ordered": self.vertex_ordered, "wall_time_s": self.wall_time_s}


def pe_bandit(env_id: str, update: str = "icl", steps: int = 2000, seed: int = 0,
              config: Optional[AgentConfig] = None) -> PeResult:
    """Fit a parameter-space critic to a fixed behaviour policy on a bandit.

    Each step plays ``U_PE`` once, stores the transition and takes one critic
    step (``update`` is ``"icl"`` or ``"td"``).  Bandit hyperparameters with
    batch size 32.
    """
    if env_id not in PE_PARAMS:
        raise ConfigError(f"policy evaluation is defined for {sorted(PE_PARAMS)}")
    if update not in ("icl", "td"):
        raise ConfigError("update must be 'icl' or 'td'")
    t0 = time.perf_counter()
    config = config or default_config(env_id, batch_size=32)
    env = make_env(env_id)
    spec = CategoricalSpec(env.n_actions) if env.discrete else bandit_gauss_spec(env.a_min, env.a_max)
    u_pe = PE_PARAMS[env_id]
    children = np.random.SeedSequence(seed).spawn(4)
    rng_init, rng_env, rng_replay, rng_icl = (np.random.default_rng(c) for c in children)
    critic = make_twin_critic(env.obs_dim + spec.param_dim, config.hidden, rng_init, config.lr, config.tau,
                              config.n_hidden)
    # a frozen head; its parameters are never read because bandit targets do not bootstrap
    actor = PolicyHead(init_mlp([env.obs_dim, spec.param_dim], rng_init), spec)
    buf = ReplayBuffer(config.buffer_size, env.obs_dim, env.action_dim, spec.param_dim, env.discrete)
    state = env.reset(rng_env)
    obs = env.observe(state)
    for _ in range(steps):
        a = sample_action(spec, u_pe, rng_env)
        res = env.step(state, a, rng_env)
        buf.add(obs, a, env.observe(res.next_state), res.reward, res.done, u_pe)
        batch = buf.sample(config.batch_size, rng_replay)
        if update == "icl":
            icl_update(critic, actor, batch, config.gamma, rng_icl)
        else:
            td_update_param(critic, actor, batch, config.gamma)
    q_on = float(q_values(critic.q1, obs[None, :], u_pe[None, :])[0])
    r_on = exact_param_reward(ParamMdp(env, spec), state, u_pe, OracleConfig())
    vertices = None
    if env.discrete:
        vertices = q_values(critic.q1, np.repeat(obs[None, :], spec.n, axis=0), np.eye(spec.n))
    return PeResult(env_id, update, critic, spec, obs, u_pe, q_on, r_on, vertices, time.perf_counter() - t0)
