"""Command-line entry point.

    python -m epbalance.cli plan --scenario scenarios/hot_expert.json
    python -m epbalance.cli simulate --scenario scenarios/robustness.json --mode baseline,probe
    python -m epbalance.cli train-predictor --config cfg.json
    python -m epbalance.cli sweep --scenario scenarios/prefill.json --batches 1024,4096

Outputs go to --out, else $EPBALANCE_OUT, else ./runs. Every run writes a
manifest.json listing its artifacts with sha256 hashes.

Exit codes: 0 ok, 1 invalid input or uncertified plan, 2 malformed JSON,
3 training divergence.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import tempfile
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import perf_model, pipeline_sim, planner, predictor
from .core import ScenarioError
from .metrics import imbalance_ratio, rank_loads
from .scenarios import Scenario

OUT_ENV = "EPBALANCE_OUT"


class CliError(Exception):
    def __init__(self, msg: str, code: int = 1):
        super().__init__(msg)
        self.code = code


def atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class RunManifest:
    """Inputs and emitted artifacts of one invocation."""

    def __init__(self, command: str, out: Path, scenario=None, modes=(), seed=None, **extra):
        self.out = out
        self.data = {"command": command, "scenario": str(scenario) if scenario else None,
                     "modes": list(modes), "seed": seed, "options": extra, "artifacts": []}

    def emit(self, name: str, text: str) -> Path:
        path = self.out / name
        atomic_write(path, text)
        digest = hashlib.sha256(text.encode("utf-8")).hexdigest()
        self.data["artifacts"].append({"name": name, "sha256": digest})
        return path

    def close(self) -> None:
        atomic_write(self.out / "manifest.json", json.dumps(self.data, indent=2, sort_keys=True) + "\n")


def _dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def read_json(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise CliError(f"{path}:{exc.lineno}:{exc.colno}: malformed JSON: {exc.msg}", code=2) from None
    except OSError as exc:
        raise CliError(f"cannot read {path}: {exc.strerror}") from None


def load_scenario(path) -> Scenario:
    try:
        sc = Scenario.from_dict(read_json(path))
    except (TypeError, ValueError, KeyError) as exc:
        raise CliError(f"{path}: invalid scenario: {exc}") from None
    problems = sc.violations()
    if problems:
        raise CliError(f"{path}: invalid scenario:\n  " + "\n  ".join(problems))
    return sc


def _out_dir(args) -> Path:
    return Path(args.out or os.environ.get(OUT_ENV) or "runs")


def _latency_skew(assignment, placement, spec) -> float:
    comp = perf_model.rank_compute_latency(assignment, placement, spec, validate=False)
    return perf_model.layer_compute_latency(comp)[1]


# -- subcommands ------------------------------------------------------------------

def cmd_plan(args) -> int:
    sc = load_scenario(args.scenario)
    if not sc.layers:
        raise CliError(f"{args.scenario}: scenario has no routing to plan")
    spec, base = sc.spec, sc.base
    out = _out_dir(args)
    man = RunManifest("plan", out, scenario=args.scenario, seed=args.seed)
    plans, rows = [], []
    certified = True
    for i, routing in enumerate(sc.layers):
        windows = np.asarray(sc.windows, dtype=float) if sc.windows is not None else \
            pipeline_sim.default_windows(routing, spec, base)
        p = planner.plan(routing, base, spec, windows)
        problems = planner.plan_violations(p, routing, spec)
        certified &= p.certified and not problems
        base_a = planner.init_locality_first(routing, base)
        row = {"layer": i,
               "ir_pre": imbalance_ratio(rank_loads(routing, base)),
               "ir_post": imbalance_ratio(rank_loads(p.assignment, p.placement)),
               "skew_pre": _latency_skew(base_a, base, spec),
               "skew_post": _latency_skew(p.assignment, p.placement, spec),
               "latency_pre": float(perf_model.rank_latencies(
                   base_a, base, spec, perf_model.dedup_factors(spec, routing, base)).max()),
               "latency_post": planner.plan_latency(p, routing, spec),
               "replicas": p.num_replicas, "iterations": p.iterations_used,
               "exposed_s": perf_model.exposed_overhead([f[0] for f in p.feasibility], [f[1] for f in p.feasibility]),
               "violations": problems}
        rows.append(row)
        plans.append(p.to_dict())
    n = len(rows)
    ir_pre = float(np.mean([r["ir_pre"] for r in rows]))
    ir_post = float(np.mean([r["ir_post"] for r in rows]))
    skew_pre = float(np.mean([r["skew_pre"] for r in rows]))
    skew_post = float(np.mean([r["skew_post"] for r in rows]))
    reps = sum(r["replicas"] for r in rows)
    label = "" if n == 1 else f"mean over {n} layers: "
    print(f"{label}IR {ir_pre:.2f} → {ir_post:.2f}, {reps} replicas")
    print(f"{label}latency skew {skew_pre:.2f} → {skew_post:.2f}; "
          f"feasibility {'certified' if certified else 'VIOLATED'}")
    for r in rows:
        for v in r["violations"]:
            print(f"layer {r['layer']}: {v}", file=sys.stderr)
    man.emit("plan.json", _dumps({"plans": plans}))
    man.emit("plan_summary.json", _dumps({"layers": rows, "ir_pre": ir_pre, "ir_post": ir_post,
                                          "skew_pre": skew_pre, "skew_post": skew_post,
                                          "replicas": reps, "certified": certified}))
    man.close()
    return 0 if certified else 1


def _predictor_arg(text: str, seed: int):
    if text == "perfect":
        return "perfect"
    if text.startswith("noisy:"):
        cfg = predictor.NoisyOracleConfig(topk_accuracy=float(text.split(":", 1)[1]), seed=seed)
        problems = cfg.violations()
        if problems:
            raise CliError("; ".join(problems))
        return cfg
    raise CliError(f"unknown predictor {text!r} (use 'perfect' or 'noisy:<accuracy>')")


def _modes(text: str) -> tuple:
    modes = tuple(m.strip() for m in text.split(",") if m.strip())
    bad = [m for m in modes if m not in pipeline_sim.MODES]
    if bad or not modes:
        raise CliError(f"unknown mode(s) {bad or text!r}; choose from {','.join(pipeline_sim.MODES)}")
    return modes


def cmd_simulate(args) -> int:
    sc = load_scenario(args.scenario)
    modes = _modes(args.mode)
    out = _out_dir(args)
    man = RunManifest("simulate", out, scenario=args.scenario, modes=modes, seed=args.seed,
                      steps=args.steps, predictor=args.predictor, warmup=args.warmup)
    pred = _predictor_arg(args.predictor, args.seed if args.seed is not None else 0)
    if sc.workload is not None:
        script = sc.workload if args.seed is None else replace(sc.workload, seed=args.seed)
        if args.steps is not None and args.steps > script.steps:
            raise CliError(f"--steps {args.steps} exceeds the script length {script.steps}")
        res = pipeline_sim.run_experiment(script, sc.spec, pred, modes=modes, warmup=args.warmup, steps=args.steps)
        man.emit("series.csv", res.to_csv())
        for m in modes:
            print(f"{m}: mean throughput {res.mean_throughput(m):.4g} tokens/s")
    else:
        if args.steps not in (None, 1):
            raise CliError("--steps exceeds the script length 1 (scenario has no workload)")
        if not sc.layers:
            raise CliError(f"{args.scenario}: scenario has neither layers nor a workload")
        predicted = sc.layers
        if pred != "perfect":
            predicted = [predictor.noisy_oracle_predict(r, pred, layer=l) for l, r in enumerate(sc.layers)]
        mode = "probe" if "probe" in modes else "baseline"
        res = pipeline_sim.simulate_step(sc.layers, predicted, sc.spec, mode)
        man.emit("step.json", pipeline_sim.step_result_json(res))
        man.emit("events.csv", pipeline_sim.events_csv(res.events))
        print(f"baseline {res.baseline_latency:.6g}s, probe {res.probe_latency:.6g}s, "
              f"IR {res.ir_pre:.2f} → {res.ir_post:.2f}, exposed {sum(res.exposed):.3g}s")
    man.close()
    return 0


def train_config_from_dict(d: dict) -> predictor.TrainConfig:
    kw = dict(d)
    if "task" in kw:
        kw["task"] = predictor.DriftTask(**kw["task"])
    return predictor.TrainConfig(**kw)


def cmd_train_predictor(args) -> int:
    raw = read_json(args.config) if args.config else {}
    try:
        cfg = train_config_from_dict(raw)
    except TypeError as exc:
        raise CliError(f"invalid training config: {exc}") from None
    if args.epochs is not None:
        cfg = replace(cfg, epochs=args.epochs)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed, task=replace(cfg.task, seed=args.seed))
    out = _out_dir(args)
    man = RunManifest("train-predictor", out, scenario=args.config, seed=cfg.seed,
                      config={**asdict(cfg)})

    def log(row):
        print(f"epoch {row['epoch']}: loss {row['loss']:.4f} topk_acc {row['topk_acc']:.3f} "
              f"half_k_hit {row['top_half_k_hit']:.3f} 2k_recall {row['twice_topk_recall']:.3f}")

    try:
        gate, rows = predictor.train_gate(cfg, log=log)
    except predictor.DivergenceError as exc:
        raise CliError(f"training diverged: {exc}", code=3) from None
    lines = ["epoch,loss,topk_acc,top_half_k_hit,twice_topk_recall"]
    for r in rows:
        lines.append(",".join([str(r["epoch"])] + [repr(float(r[k])) for k in
                                                   ("loss", "topk_acc", "top_half_k_hit", "twice_topk_recall")]))
    man.emit("fidelity.csv", "\n".join(lines) + "\n")
    man.emit("gate.json", json.dumps(gate.to_dict()) + "\n")
    man.close()
    return 0


def cmd_sweep(args) -> int:
    sc = load_scenario(args.scenario)
    if sc.workload is None:
        raise CliError(f"{args.scenario}: sweep needs a workload")
    try:
        batches = [int(b) for b in args.batches.split(",")]
    except ValueError:
        raise CliError(f"bad --batches {args.batches!r}") from None
    script = sc.workload if args.seed is None else replace(sc.workload, seed=args.seed)
    if args.steps is not None and args.steps > script.steps:
        raise CliError(f"--steps {args.steps} exceeds the script length {script.steps}")
    for b in batches:
        problems = replace(script, tokens_per_step=b).violations(sc.spec)
        if problems:
            raise CliError(f"batch {b}: " + "; ".join(problems))
    out = _out_dir(args)
    man = RunManifest("sweep", out, scenario=args.scenario, modes=("baseline", "probe"), seed=args.seed,
                      batches=batches, steps=args.steps)
    pred = _predictor_arg(args.predictor, args.seed if args.seed is not None else 0)
    rows = pipeline_sim.batch_sweep(script, sc.spec, batches, pred, steps=args.steps)
    for r in rows:
        print(f"batch {r['batch']}: baseline {r['baseline_throughput']:.4g} probe {r['probe_throughput']:.4g} "
              f"({r['speedup']:.3f}x)")
    man.emit("sweep.csv", pipeline_sim.sweep_csv(rows))
    man.close()
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="epbalance", description=__doc__.split("\n\n")[0])
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, scenario_required=True):
        if scenario_required:
            p.add_argument("--scenario", required=True, help="scenario JSON file")
        p.add_argument("--out", default=None, help=f"output directory (default ${OUT_ENV} or ./runs)")
        p.add_argument("--seed", type=int, default=None, help="override the scenario/config seed")

    p = sub.add_parser("plan", help="plan one or more layers and report IR / skew")
    common(p)
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("simulate", help="run the pipeline simulator")
    common(p)
    p.add_argument("--mode", default="baseline,probe", help="comma list of baseline,probe,one_shot_history")
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--warmup", type=int, default=100, help="one_shot_history warm-up steps")
    p.add_argument("--predictor", default="perfect", help="'perfect' or 'noisy:<topk accuracy>'")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train-predictor", help="distill the lookahead gate on the drift task")
    common(p, scenario_required=False)
    p.add_argument("--config", default=None, help="training config JSON (TrainConfig fields)")
    p.add_argument("--epochs", type=int, default=None)
    p.set_defaults(func=cmd_train_predictor)

    p = sub.add_parser("sweep", help="baseline vs probe throughput over batch sizes")
    common(p)
    p.add_argument("--batches", default="1024,2048,4096,8192")
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--predictor", default="perfect")
    p.set_defaults(func=cmd_sweep)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except ScenarioError as exc:
        print("error: invalid scenario:\n  " + "\n  ".join(exc.problems), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
