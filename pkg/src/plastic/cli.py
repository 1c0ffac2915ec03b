"""Command-line experiment runner: ``plastic run | report | probe``.

Config files are JSON or YAML. Every field has a default; the fully materialized
config is written to ``config.resolved.json`` next to the results, and feeding
that file back to ``run`` reproduces the run bit for bit.

Environment overrides (and only these):
  PLASTIC_OUTPUT_DIR  replaces the config's ``output_dir``
  PLASTIC_WORKERS     number of seeds run in parallel processes (default 1)
"""
from __future__ import annotations

import argparse
import copy
import csv
import json
import math
import os
import sys
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Any

import numpy as np

from plastic import __version__
from plastic import rng as rngs
from plastic import tensor as T
from plastic.bench import (INPUT_ADAPTATION, LABEL_ADAPTATION, AdaptationSchedule, LabeledDataset, Learner,
                           LearnerConfig, desk_arch, generated_gaussian, generated_images, load_cifar10_binary,
                           run_adaptation)
from plastic.nn import ArchSpec, checkpoint_dict, network_from_checkpoint
from plastic.optim import OptimizerConfig, SamConfig
from plastic.plasticity import PolicyError, ProbeConfig, ResetPolicy, active_fraction, network_lambda_max
from plastic.rl import AgentConfig, DQNRunConfig, SACRunConfig, run_dqn, run_sac
from plastic.tensor import ContractError

EXPERIMENTS = ("input-adapt", "label-adapt", "dqn", "sac")

# Column order of metrics.csv for each experiment family (fixed; documented in the README).
COLUMNS = {
    "bench": ("run_id", "phase", "step", "buffer_size", "train_loss", "grad_norm", "test_accuracy",
              "lambda_max", "active_fraction"),
    "dqn": ("run_id", "step", "updates", "episode_return", "td_loss", "grad_norm", "eval_return", "agreement",
            "lambda_max", "active_fraction"),
    "sac": ("run_id", "step", "updates", "episode_return", "critic_loss", "grad_norm", "eval_return", "alpha",
            "lambda_max", "active_fraction"),
}
PRIMARY_METRIC = {"bench": "test_accuracy", "dqn": "eval_return", "sac": "eval_return"}


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# config schema
# ---------------------------------------------------------------------------

SAM_DEFAULTS = {"enabled": False, "rho": 0.1, "scope": "all", "noise_scheme": "independent"}
RESET_DEFAULTS = {"interval": 5, "scope": "head", "mode": "hard", "alpha": 0.8}
PROBE_DEFAULTS = {"every": 0, "probe_batch_size": 256, "power_iters": 20, "power_tol": 1e-4,
                  "probe_layers": "all", "seed": 0}

COMMON = {
    "experiment": "input-adapt",
    "name": "",
    "seeds": [0],
    "output_dir": "results",
    "checkpoint": True,
    "interventions": {"sam": SAM_DEFAULTS, "ln": False, "crelu": False, "reset": None},
    "probe": PROBE_DEFAULTS,
}

BENCH = {
    "schedule": {"num_phases": 10, "updates_per_phase": 300, "batch_size": 64},
    "data": {"generator": "generated-images", "seed": 0, "n_train": 5000, "n_test": 1000, "sigma": 1.75,
             "modes_per_class": 2, "dim": 16, "cifar_train": [], "cifar_test": []},
    "optimizer": {"kind": "sgd", "lr": 0.01, "momentum": 0.9, "betas": [0.9, 0.999], "eps": 1.5e-5,
                  "weight_decay": 0.0, "max_grad_norm": None},
}

RL_AGENT = {"gamma": 0.99, "tau": 0.99, "replay_ratio": 1, "batch_size": 32, "hidden": [64, 64],
            "backbone_layers": 1, "buffer_capacity": 100000, "min_fill": 500, "noisy": True, "sigma0": 0.5,
            "exploration": "noisy", "explore_with_target": True, "epsilon": 0.1, "init_temperature": 0.1,
            "target_entropy": None, "actor_lr": None, "alpha_lr": None, "actor_sam": SAM_DEFAULTS,
            "alpha_rho": 0.0}
RL_OPT = {"kind": "adam", "lr": 1e-3, "momentum": 0.9, "betas": [0.9, 0.999], "eps": 1.5e-5,
          "weight_decay": 0.0, "max_grad_norm": 10.0}

DQN = {"agent": RL_AGENT, "optimizer": RL_OPT,
       "run": {"env_steps": 20000, "grid_size": 5, "reward": "dense", "eval_every": 1000}}
SAC = {"agent": {**RL_AGENT, "tau": 0.995, "noisy": False, "batch_size": 64},
       "optimizer": {**RL_OPT, "lr": 3e-4},
       "run": {"env_steps": 10000, "step_limit": 50, "eval_every": 1000, "eval_episodes": 10}}

NULLABLE_SECTIONS = {"interventions.reset": RESET_DEFAULTS}


def family(experiment: str) -> str:
    return "bench" if experiment in ("input-adapt", "label-adapt") else experiment


def schema(experiment: str) -> dict:
    extra = {"bench": BENCH, "dqn": DQN, "sac": SAC}[family(experiment)]
    return copy.deepcopy({**COMMON, **extra})


def _type_ok(default: Any, value: Any) -> bool:
    if default is None:
        return True
    if isinstance(default, bool):
        return isinstance(value, bool)
    if isinstance(default, int):
        return isinstance(value, int) and not isinstance(value, bool)
    if isinstance(default, float):
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if isinstance(default, str):
        return isinstance(value, str)
    if isinstance(default, list):
        return isinstance(value, list)
    return True


def _merge(defaults: dict, given: dict, path: str) -> dict:
    if not isinstance(given, dict):
        raise ConfigError(f"{path or 'config'}: expected a mapping, got {type(given).__name__}")
    out = copy.deepcopy(defaults)
    for key, value in given.items():
        where = f"{path}.{key}" if path else key
        if key not in defaults:
            raise ConfigError(f"{where}: unknown field")
        d = defaults[key]
        if where in NULLABLE_SECTIONS:
            out[key] = None if value is None else _merge(NULLABLE_SECTIONS[where], value, where)
        elif isinstance(d, dict):
            out[key] = _merge(d, value, where)
        elif not _type_ok(d, value):
            raise ConfigError(f"{where}: expected {type(d).__name__}, got {value!r}")
        else:
            out[key] = float(value) if isinstance(d, float) else value
    return out


def read_config_file(path: str | Path) -> dict:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    try:
        if path.suffix in (".yaml", ".yml"):
            import yaml
            return yaml.safe_load(text) or {}
        return json.loads(text)
    except Exception as exc:  # parse errors from either format
        raise ConfigError(f"cannot parse {path}: {exc}") from None


def _build(cfg: dict) -> dict:
    """Instantiate the typed objects a resolved config describes (validates values)."""
    iv, fam = cfg["interventions"], family(cfg["experiment"])
    try:
        sam = SamConfig(**iv["sam"])
        reset = ResetPolicy(**iv["reset"]) if iv["reset"] is not None else None
    except (ContractError, PolicyError, TypeError) as exc:
        raise ConfigError(f"interventions: {exc}") from None
    pr = cfg["probe"]
    try:
        probe = ProbeConfig(pr["probe_batch_size"], pr["power_iters"], pr["power_tol"], pr["probe_layers"],
                            pr["seed"])
        opt = OptimizerConfig(**{**cfg["optimizer"], "betas": tuple(cfg["optimizer"]["betas"])})
    except (ContractError, TypeError) as exc:
        raise ConfigError(f"optimizer/probe: {exc}") from None
    act = "crelu" if iv["crelu"] else "relu"
    if pr["every"] < 0:
        raise ConfigError("probe.every: must be >= 0")
    if not cfg["seeds"] or any(not isinstance(s, int) or isinstance(s, bool) or s < 0 for s in cfg["seeds"]):
        raise ConfigError("seeds: need a non-empty list of non-negative integers")
    if len(set(cfg["seeds"])) != len(cfg["seeds"]):
        raise ConfigError("seeds: duplicates")
    if fam == "bench":
        sc = cfg["schedule"]
        kind = INPUT_ADAPTATION if cfg["experiment"] == "input-adapt" else LABEL_ADAPTATION
        try:
            schedule = AdaptationSchedule(kind, sc["num_phases"], sc["updates_per_phase"], sc["batch_size"])
        except ContractError as exc:
            raise ConfigError(f"schedule: {exc}") from None
        data = cfg["data"]
        if data["generator"] not in ("generated-images", "generated-gaussian", "cifar10-binary"):
            raise ConfigError(f"data.generator: unknown generator {data['generator']!r}")
        return {"schedule": schedule, "sam": sam, "reset": reset, "probe": probe, "optimizer": opt,
                "activation": act}
    ag = dict(cfg["agent"])
    try:
        actor_sam = SamConfig(**ag.pop("actor_sam"))
        alpha_sam = SamConfig(rho=ag.pop("alpha_rho"), enabled=True)
        agent = AgentConfig(**ag, optimizer=opt, sam=sam, reset=reset, layernorm=iv["ln"], activation=act,
                            actor_sam=actor_sam, alpha_sam=alpha_sam)
    except (ContractError, TypeError) as exc:
        raise ConfigError(f"agent: {exc}") from None
    run = cfg["run"]
    return {"agent": agent, "probe": probe, "run": run}


def resolve_config(raw: dict) -> dict:
    """Validate ``raw`` and return the fully explicit config (all defaults materialized)."""
    if not isinstance(raw, dict):
        raise ConfigError("config: expected a mapping at the top level")
    raw = dict(raw)
    raw.pop("resolved", None)  # bookkeeping block written by earlier runs
    exp = raw.get("experiment", COMMON["experiment"])
    if exp not in EXPERIMENTS:
        raise ConfigError(f"experiment: must be one of {EXPERIMENTS}, got {exp!r}")
    cfg = _merge(schema(exp), raw, "")
    _build(cfg)
    cfg["resolved"] = {"version": __version__, "rng": rngs.ALGORITHM}
    return cfg


# ---------------------------------------------------------------------------
# execution
# ---------------------------------------------------------------------------

def _fmt(v: Any) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return "nan" if math.isnan(v) else format(float(v), ".17g")
    return str(v)


class MetricsWriter:
    def __init__(self, path: Path, columns: tuple, run_id: str):
        self.columns, self.run_id = columns, run_id
        self.f = open(path, "w", newline="")
        self.w = csv.writer(self.f, lineterminator="\n")
        self.w.writerow(columns)
        self.last_step = -1

    def __call__(self, rec: dict) -> None:
        if rec["step"] <= self.last_step:
            raise ContractError(f"metrics steps must increase: {rec['step']} after {self.last_step}")
        self.last_step = rec["step"]
        self.w.writerow([self.run_id if c == "run_id" else _fmt(rec[c]) for c in self.columns])
        self.f.flush()

    def close(self):
        self.f.close()


def load_data(data: dict) -> tuple[LabeledDataset, LabeledDataset]:
    if data["generator"] == "generated-images":
        return generated_images(data["seed"], data["n_train"], data["n_test"], sigma=data["sigma"],
                                modes_per_class=data["modes_per_class"])
    if data["generator"] == "generated-gaussian":
        return generated_gaussian(data["seed"], data["n_train"], data["n_test"], dim=data["dim"],
                                  sigma=data["sigma"])
    if not data["cifar_train"] or not data["cifar_test"]:
        raise ConfigError("data: cifar10-binary needs cifar_train and cifar_test file lists")
    return load_cifar10_binary(data["cifar_train"]), load_cifar10_binary(data["cifar_test"])


def bench_learner_config(cfg: dict, built: dict, train: LabeledDataset) -> LearnerConfig:
    iv = cfg["interventions"]
    if train.inputs.ndim == 4:
        arch = desk_arch(built["activation"], iv["ln"], train.class_count, train.feature_shape)
    else:
        arch = ArchSpec(train.feature_shape, fc=[64, 64, train.class_count], backbone_fc=1,
                        activation=built["activation"], layernorm=iv["ln"])
    return LearnerConfig(arch=arch, optimizer=built["optimizer"], sam=built["sam"], reset=built["reset"],
                         probe=built["probe"], probe_every=cfg["probe"]["every"])


def _run_one(cfg: dict, seed: int, run_dir: str) -> dict:
    """Execute one seed; returns a manifest entry. Metrics stream to disk as they are produced."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.resolved.json").write_text(json.dumps({**cfg, "seeds": [seed]}, indent=2, sort_keys=True))
    fam = family(cfg["experiment"])
    built = _build(cfg)
    run_id = f"{cfg['name'] or cfg['experiment']}-seed{seed}"
    writer = MetricsWriter(run_dir / "metrics.csv", COLUMNS[fam], run_id)
    timings = open(run_dir / "timings.csv", "w")
    timings.write("step,wall_ms\n")
    t0 = time.perf_counter()

    def record(rec):
        writer(rec)
        timings.write(f"{rec['step']},{(time.perf_counter() - t0) * 1e3:.3f}\n")

    entry = {"seed": seed, "run_id": run_id, "dir": run_dir.name, "status": "running"}
    try:
        if fam == "bench":
            train, test = load_data(cfg["data"])
            learner = Learner(bench_learner_config(cfg, built, train), seed)
            run_adaptation(learner, train, test, built["schedule"], seed, record)
            ckpt = {"network": checkpoint_dict(learner.net), "optimizer": learner.opt.state_dict()}
        elif fam == "dqn":
            r = built["run"]
            probe = built["probe"] if cfg["probe"]["every"] else None
            _, agent = run_dqn(built["agent"], DQNRunConfig(r["env_steps"], r["grid_size"], r["reward"],
                                                            r["eval_every"], probe), seed, record)
            ckpt = {**agent.checkpoint()}
        else:
            r = built["run"]
            probe = built["probe"] if cfg["probe"]["every"] else None
            _, agent = run_sac(built["agent"], SACRunConfig(r["env_steps"], r["step_limit"], r["eval_every"],
                                                            r["eval_episodes"], probe), seed, record)
            ckpt = {"actor": checkpoint_dict(agent.actor),
                    "critics": [checkpoint_dict(c) for c in agent.critics],
                    "log_alpha": float(agent.log_alpha.data[0]), "alpha_floor_hits": agent.alpha_floor_hits}
        if cfg["checkpoint"]:
            (run_dir / "checkpoint.json").write_text(json.dumps(ckpt))
        entry["status"] = "completed"
    except Exception as exc:  # keep partial results, mark the run failed
        entry["status"] = "failed"
        entry["error"] = f"{type(exc).__name__}: {exc}"
        (run_dir / "error.txt").write_text(traceback.format_exc())
    finally:
        writer.close()
        timings.close()
    entry["seconds"] = round(time.perf_counter() - t0, 3)
    return entry


def run(config_path: str | Path, output_dir: str | Path | None = None, workers: int | None = None) -> int:
    """Run every seed of a config. Returns 0 iff all runs completed."""
    cfg = resolve_config(read_config_file(config_path))
    out = Path(output_dir or os.environ.get("PLASTIC_OUTPUT_DIR") or cfg["output_dir"])
    workers = workers or int(os.environ.get("PLASTIC_WORKERS", "1"))
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.resolved.json").write_text(json.dumps(cfg, indent=2, sort_keys=True))
    dirs = [str(out / f"seed_{s}") for s in cfg["seeds"]]
    if workers > 1 and len(dirs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            entries = list(pool.map(_run_one, [cfg] * len(dirs), cfg["seeds"], dirs))
    else:
        entries = [_run_one(cfg, s, d) for s, d in zip(cfg["seeds"], dirs)]
    manifest = {"experiment": cfg["experiment"], "name": cfg["name"], "runs": entries}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return 0 if all(e["status"] == "completed" for e in entries) else 1


# ---------------------------------------------------------------------------
# reporting
# ---------------------------------------------------------------------------

def _last_row(path: Path) -> dict[str, float]:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    if not rows:
        return {}
    return {k: float(v) for k, v in rows[-1].items() if k != "run_id"}


def report(results_dir: str | Path, out=None) -> dict:
    """Mean and population std of final-step metrics per config, plus a pairwise ordering table."""
    out = out or sys.stdout
    root = Path(results_dir)
    manifests = sorted(root.rglob("manifest.json")) if root.exists() else []
    groups: dict[str, dict] = {}
    for m in manifests:
        man = json.loads(m.read_text())
        cfg = json.loads((m.parent / "config.resolved.json").read_text())
        label = cfg.get("name") or str(m.parent.relative_to(root)) or cfg["experiment"]
        g = groups.setdefault(label, {"experiment": cfg["experiment"], "completed": [], "failed": 0})
        for e in man["runs"]:
            if e["status"] != "completed":
                g["failed"] += 1
                continue
            row = _last_row(m.parent / e["dir"] / "metrics.csv")
            if row:
                g["completed"].append(row)
    if not any(g["completed"] for g in groups.values()):
        raise ConfigError(f"no runs: no completed run directories under {root}")
    summary: dict[str, Any] = {"configs": {}, "std": "population (ddof=0)"}
    for label, g in sorted(groups.items()):
        if not g["completed"]:
            summary["configs"][label] = {"experiment": g["experiment"], "runs": 0, "failed": g["failed"]}
            continue
        keys = [k for k in g["completed"][0] if k not in ("step", "phase", "updates")]
        stats = {}
        for k in keys:
            vals = np.array([r[k] for r in g["completed"]])
            stats[k] = {"mean": float(np.mean(vals)), "std": float(np.std(vals))}
        summary["configs"][label] = {"experiment": g["experiment"], "runs": len(g["completed"]),
                                     "failed": g["failed"], "metrics": stats}
    ordering = []
    labels = [l for l, c in summary["configs"].items() if c["runs"]]
    for i, a in enumerate(labels):
        for b in labels[i + 1:]:
            ca, cb = summary["configs"][a], summary["configs"][b]
            if family(ca["experiment"]) != family(cb["experiment"]) or ca["experiment"] != cb["experiment"]:
                continue
            metric = PRIMARY_METRIC[family(ca["experiment"])]
            ma, mb = ca["metrics"][metric]["mean"], cb["metrics"][metric]["mean"]
            ordering.append({"a": a, "b": b, "metric": metric, "a_minus_b": ma - mb,
                             "better": a if ma > mb else b if mb > ma else "tie"})
    summary["ordering"] = ordering
    (root / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    for label, c in summary["configs"].items():
        print(f"{label}: runs={c['runs']} failed={c['failed']}", file=out)
        for k, s in c.get("metrics", {}).items():
            print(f"  {k:>16s}  mean={s['mean']:.6g}  std={s['std']:.6g}", file=out)
    for o in ordering:
        print(f"{o['a']} vs {o['b']} on {o['metric']}: {o['a_minus_b']:+.6g} -> {o['better']}", file=out)
    return summary


# ---------------------------------------------------------------------------
# probe
# ---------------------------------------------------------------------------

def _probe_inputs(source: str, batch: int) -> tuple[np.ndarray, np.ndarray | None, np.ndarray | None]:
    """Returns (inputs, class labels or None, (actions, targets) or None) from a data source spec.

    ``generated-images[:seed]`` / ``generated-gaussian[:seed]`` draw the test split;
    ``*.npz`` holds either ``inputs`` + ``labels`` or ``s`` + ``a`` + ``y`` (value regression);
    anything else is read as CIFAR-10 binary.
    """
    name, _, seed = source.partition(":")
    seed = int(seed or 0)
    if name == "generated-images":
        ds = generated_images(seed)[1]
    elif name == "generated-gaussian":
        ds = generated_gaussian(seed)[1]
    elif source.endswith(".npz"):
        z = np.load(source)
        if "inputs" in z:
            return z["inputs"][:batch], z["labels"][:batch], None
        return z["s"][:batch], None, (z["a"][:batch], z["y"][:batch])
    else:
        ds = load_cifar10_binary(source)
    return ds.inputs[:batch], ds.labels[:batch], None


def probe(checkpoint: str | Path, source: str, cfg: ProbeConfig | None = None) -> dict:
    cfg = cfg or ProbeConfig()
    path = Path(checkpoint)
    d = json.loads(path.read_text())
    if "network" in d:
        d = d["network"]
    elif "q" in d:
        d = d["q"]
    elif "actor" in d:
        d = d["actor"]
    net = network_from_checkpoint(d)
    x, labels, value = _probe_inputs(source, cfg.probe_batch_size)
    if labels is not None:
        loss = lambda out: T.softmax_cross_entropy(out, labels)  # noqa: E731
    else:
        a, y = value
        loss = lambda out: T.squared_error(T.index(out, (np.arange(len(a)), a.astype(np.int64))), y)  # noqa: E731
    est = network_lambda_max(net, loss, x, cfg)
    return {"lambda_max": est.value, "iterations": est.iterations, "converged": est.converged,
            "active_fraction": active_fraction(net, x, cfg.probe_layers), "probe_batch": int(len(x))}


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def main(argv: list[str] | None = None) -> int:
    ap = argparse.ArgumentParser(prog="plastic", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="verb", required=True)
    p_run = sub.add_parser("run", help="run every seed of a config file")
    p_run.add_argument("config")
    p_rep = sub.add_parser("report", help="summarize completed runs under a directory")
    p_rep.add_argument("results_dir")
    p_probe = sub.add_parser("probe", help="lambda_max and active fraction of a saved model")
    p_probe.add_argument("checkpoint")
    p_probe.add_argument("source", help="generated-images[:seed], generated-gaussian[:seed], a .npz file "
                                        "or a CIFAR-10 binary batch")
    p_probe.add_argument("--batch", type=int, default=512)
    p_probe.add_argument("--iters", type=int, default=100)
    p_probe.add_argument("--layers", default="all")
    args = ap.parse_args(argv)
    try:
        if args.verb == "run":
            return run(args.config)
        if args.verb == "report":
            report(args.results_dir)
            return 0
        res = probe(args.checkpoint, args.source, ProbeConfig(args.batch, args.iters, probe_layers=args.layers))
        print(json.dumps(res, indent=2))
        return 0
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
