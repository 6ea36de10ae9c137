"""Command-line entry point: ``dppg-lab <command> ...``.

Outputs go under ``--out`` or, when omitted, under ``$DPPG_LAB_OUT``
(default ``./runs``).  Every file is UTF-8 CSV or JSON.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path
from typing import Optional

import numpy as np

from .agents import AGENT_IDS, AgentConfig, default_config, train
from .envs import ENV_IDS, make_env
from .errors import ConfigError, LabError
from .estimators import variance_study
from .harness import (RunConfig, bootstrap_ci, emit_critic_landscape, emit_learning_curve, load_sweep, output_root,
                      pe_bandit, sweep)
from .param_mdp import prop1_suite

_BOOL = {"true": True, "1": True, "yes": True, "on": True, "false": False, "0": False, "no": False, "off": False}


def _parse_bool(text: str) -> bool:
    try:
        return _BOOL[text.strip().lower()]
    except KeyError:
        raise argparse.ArgumentTypeError(f"expected true/false, got {text!r}") from None


def _optional(kind):
    def parse(text: str):
        return None if text.strip().lower() in ("none", "null", "") else kind(text)
    return parse


_FIELD_PARSERS = {"int": int, "float": float, "bool": _parse_bool,
                  "Optional[float]": _optional(float), "Optional[bool]": _optional(_parse_bool)}


def add_config_flags(p: argparse.ArgumentParser) -> None:
    """One ``--field-name`` flag per :class:`AgentConfig` field, plus ``--config FILE``."""
    g = p.add_argument_group("agent config (flags override --config)")
    g.add_argument("--config", type=Path, help="JSON object of agent config fields")
    for f in dataclasses.fields(AgentConfig):
        g.add_argument("--" + f.name.replace("_", "-"), dest="cfg_" + f.name, type=_FIELD_PARSERS[str(f.type)],
                       default=None, metavar=str(f.type).replace("Optional[", "").rstrip("]").upper())


def config_overrides(args) -> dict:
    overrides = {}
    if getattr(args, "config", None):
        data = json.loads(Path(args.config).read_text(encoding="utf-8"))
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a JSON object")
        overrides.update(data)
    for f in dataclasses.fields(AgentConfig):
        v = getattr(args, "cfg_" + f.name)
        if v is not None:
            overrides[f.name] = v
    return overrides


def parse_seeds(text: str) -> list[int]:
    """``"0-49"``, ``"1,5,9"`` or a mix such as ``"0-3,10"``."""
    seeds = []
    for part in text.split(","):
        part = part.strip()
        if "-" in part[1:]:
            lo, hi = part.split("-", 1) if not part.startswith("-") else part[1:].split("-", 1)
            seeds.extend(range(int(lo), int(hi) + 1))
        elif part:
            seeds.append(int(part))
    return seeds


def _out_dir(args, default_name: str) -> Path:
    out = Path(args.out) if args.out else output_root() / default_name
    out.mkdir(parents=True, exist_ok=True)
    return out


def _dump(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# -- commands --------------------------------------------------------------------------

def cmd_train(args) -> int:
    config = default_config(args.env, **config_overrides(args))
    log = train(args.agent, args.env, args.steps, args.seed, config)
    out = _out_dir(args, f"{args.agent}_{args.env}")
    path = out / f"{args.agent}_{args.env}_seed{args.seed}.csv"
    log.write_csv(path)
    print(path)
    if log.diagnostic:
        print(f"run aborted: {log.diagnostic}", file=sys.stderr)
        return 2
    return 0


def cmd_sweep(args) -> int:
    rc = RunConfig(args.agent, args.env, args.steps, parse_seeds(args.seeds), config_overrides(args),
                   str(args.out) if args.out else None, args.workers)
    res = sweep(rc)
    finals = [r["final_performance"] for r in res.manifest["runs"] if "final_performance" in r]
    aborted = sum(r["aborted"] for r in res.manifest["runs"])
    print(res.out_dir)
    if len(finals) >= 2:
        ci = bootstrap_ci(finals)
        print(f"final performance {ci.point:.4f} [{ci.lo:.4f}, {ci.hi:.4f}] over {ci.n} seeds; {aborted} aborted")
    return 0


def cmd_pe_bandit(args) -> int:
    res = pe_bandit(args.env, args.update, args.steps, args.seed)
    out = _out_dir(args, f"pe_{args.env}")
    stem = f"pe_{args.env}_{args.update}_seed{args.seed}"
    emit_critic_landscape(res.q_fn(), res.spec, args.resolution, out / f"{stem}_landscape.csv")
    _dump(res.summary(), out / f"{stem}.json")
    print(json.dumps(res.summary(), sort_keys=True))
    return 0


def cmd_variance_study(args) -> int:
    report = variance_study(make_env(args.env), args.n, np.random.default_rng(args.seed), env_id=args.env)
    d = report.to_dict()
    if args.out:
        out = _out_dir(args, "variance")
        _dump(d, out / f"variance_{args.env}_seed{args.seed}.json")
    brief = {k: d[k] for k in ("env", "n_resamples", "trace_variance", "max_z_vs_dppg", "unbiased", "hypothesis_met",
                               "notes")}
    print(json.dumps(brief, sort_keys=True))
    return 0 if report.unbiased else 1


def cmd_check_prop1(args) -> int:
    envs = [args.env] if args.env != "all" else ["karmed", "bimodal", "pointmass"]
    ok = True
    for env_id in envs:
        d = prop1_suite(env_id, args.seed).to_dict()
        ok &= d["pass"]
        print(json.dumps(d, sort_keys=True))
    return 0 if ok else 1


def cmd_summarize(args) -> int:
    out = _out_dir(args, "summary")
    summary = {}
    for d in args.dirs:
        manifest, logs = load_sweep(d)
        name = f"{manifest['agent']}_{manifest['env']}"
        ordered = [logs[s] for s in sorted(logs)]
        emit_learning_curve(ordered, out / f"{name}_curve.csv", resamples=args.resamples)
        finals = [l.final_performance() for l in ordered]
        finals = [f for f in finals if np.isfinite(f)]
        entry = {"config_hash": manifest["config_hash"], "n_seeds": len(finals),
                 "aborted": [r["seed"] for r in manifest["runs"] if r["aborted"]]}
        if finals:
            entry["final_performance"] = bootstrap_ci(finals, args.resamples).to_dict()
        summary[name] = entry
        print(f"{name}: " + (f"{entry['final_performance']['point']:.4f} "
                             f"[{entry['final_performance']['lo']:.4f}, {entry['final_performance']['hi']:.4f}]"
                             if finals else "no finished runs"))
    _dump(summary, out / "summary.json")
    return 0


# -- parser ----------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dppg-lab", description="Parameter-space actor-critic experiments.")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="one training run -> CSV")
    t.add_argument("--agent", required=True, choices=AGENT_IDS)
    t.add_argument("--env", required=True, choices=ENV_IDS)
    t.add_argument("--steps", type=int, required=True)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", type=Path)
    add_config_flags(t)
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sweep", help="many seeds -> CSVs + manifest.json")
    s.add_argument("--agent", required=True, choices=AGENT_IDS)
    s.add_argument("--env", required=True, choices=ENV_IDS)
    s.add_argument("--steps", type=int, required=True)
    s.add_argument("--seeds", default="0-49", help='e.g. "0-49" or "1,2,7"')
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("--out", type=Path)
    add_config_flags(s)
    s.set_defaults(func=cmd_sweep)

    pe = sub.add_parser("pe-bandit", help="fixed-policy critic fit -> landscape CSV")
    pe.add_argument("--env", required=True, choices=("karmed", "bimodal"))
    pe.add_argument("--update", default="icl", choices=("icl", "td"))
    pe.add_argument("--steps", type=int, default=2000)
    pe.add_argument("--seed", type=int, default=0)
    pe.add_argument("--resolution", type=int, default=41)
    pe.add_argument("--out", type=Path)
    pe.set_defaults(func=cmd_pe_bandit)

    v = sub.add_parser("variance-study", help="single-sample LR/RP vs DPPG on a bandit")
    v.add_argument("--env", required=True, choices=("karmed", "bimodal"))
    v.add_argument("--n", type=int, default=10_000)
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--out", type=Path)
    v.set_defaults(func=cmd_variance_study)

    c = sub.add_parser("check", help="oracle checks")
    csub = c.add_subparsers(dest="check", required=True)
    p1 = csub.add_parser("prop1", help="parameter-space values vs classical values")
    p1.add_argument("--env", default="all", choices=("all", "karmed", "bimodal", "pointmass"))
    p1.add_argument("--seed", type=int, default=0)
    p1.set_defaults(func=cmd_check_prop1)

    sm = sub.add_parser("summarize", help="sweep directories -> curves + bootstrap summary")
    sm.add_argument("dirs", nargs="+", type=Path)
    sm.add_argument("--resamples", type=int, default=10_000)
    sm.add_argument("--out", type=Path)
    sm.set_defaults(func=cmd_summarize)
    return p


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except LabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
