"""Command-line entry point.

Every subcommand accepts ``--seed``, ``--config`` (a JSON object with any of
the keys in ``CONFIG_KEYS``) and ``--out`` (output directory).  Failures print
one JSON line ``{"error": <kind>, "message": <text>}`` to stderr and exit
nonzero.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

import numpy as np

from ewall.batch import VcDeltaParams, ewa_tl_run, learning_to_learn, vc_delta
from ewall.bounds import configuration_report, eta_finite
from ewall.core import EwallError, InputError, LossFunction, TaskDataset, read_tasks_csv, write_tasks_csv
from ewall.dictionary import Dictionary, MhConfig, ewa_ll_dictionary_run, sample_sphere_prior, write_chain_csv
from ewall.experiments import (
    ExperimentTrace,
    SyntheticConfig,
    clip_bound_from_labels,
    emit_csv,
    emit_plot_data,
    generate_synthetic,
    read_truth,
    run_figure2_experiment,
    write_truth,
)
from ewall.meta import FiniteRepresentationSet, MetaConfig, ewa_ll_run, write_posterior_csv
from ewall.within_task import FiniteHypothesisClass, LinearHypothesisClass, OnlineGradient

CONFIG_KEYS = {
    "k": 2, "d": 5, "t": 150, "m": 100, "noise_std": 0.1, "eta": 1.0, "n_mh": 10,
    "proposal_std": 0.1, "step_size": 0.1, "loss": "squared", "clip_bound": None,
    "n_reps": 4, "vc_dim": None, "confidence": 0.05,
}
LOSSES = {"squared": LossFunction.squared, "absolute": LossFunction.absolute,
          "hinge": LossFunction.hinge}

EXIT_INPUT, EXIT_FAILURE = 2, 1


def load_config(path) -> dict:
    cfg = dict(CONFIG_KEYS)
    if path is None:
        return cfg
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise InputError(f"{path}: {exc.strerror or exc}") from exc
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: invalid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise InputError(f"{path}: config must be a JSON object")
    unknown = sorted(set(doc) - set(CONFIG_KEYS))
    if unknown:
        raise InputError(f"{path}: unknown config keys {unknown}")
    cfg.update(doc)
    return cfg


def _loss(cfg, tasks) -> LossFunction:
    kind = cfg["loss"]
    if kind not in LOSSES:
        raise InputError(f"unsupported loss {kind!r}; choose from {sorted(LOSSES)}")
    bound = cfg["clip_bound"]
    if bound is None:
        bound = clip_bound_from_labels(tasks)
    return LOSSES[kind](float(bound))


def _synthetic(cfg, seed) -> SyntheticConfig:
    return SyntheticConfig(int(cfg["k"]), int(cfg["d"]), int(cfg["t"]), int(cfg["m"]),
                           float(cfg["noise_std"]), seed)


def _tasks(args, cfg):
    """Tasks from ``--data`` if given, otherwise freshly generated."""
    if args.data is not None:
        return read_tasks_csv(args.data), None
    tasks, truth, _ = generate_synthetic(_synthetic(cfg, args.seed))
    return tasks, truth


def _rep_set(args, cfg, d, truth) -> FiniteRepresentationSet:
    """``n_reps`` random dictionaries, with the true one first when known."""
    rng = np.random.default_rng([args.seed, 1])
    K = int(cfg["k"])
    if args.truth is not None:
        truth, _ = read_truth(args.truth)
    reps = [truth] if truth is not None else []
    while len(reps) < int(cfg["n_reps"]):
        reps.append(sample_sphere_prior(d, K, rng))
    labels = (["truth"] if truth is not None else []) + \
        [f"random{j}" for j in range(1, len(reps) - (truth is not None) + 1)]
    return FiniteRepresentationSet(reps, labels)


def _oga(cfg, loss) -> OnlineGradient:
    K = int(cfg["k"])
    step = cfg["step_size"]
    return OnlineGradient(LinearHypothesisClass(K, math.sqrt(K)), loss,
                          None if step is None else float(step))


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def cmd_generate(args, cfg):
    tasks, truth, thetas = generate_synthetic(_synthetic(cfg, args.seed))
    out = _out(args)
    write_tasks_csv(tasks, out / "data.csv")
    write_truth(out / "truth.json", truth, thetas)
    return {"tasks": len(tasks), "data": str(out / "data.csv")}


def cmd_run_finite(args, cfg):
    tasks, truth = _tasks(args, cfg)
    loss = _loss(cfg, tasks)
    reps = _rep_set(args, cfg, tasks[0].dimension, truth)
    eta = cfg["eta"] if cfg["eta"] is not None else eta_finite(loss.value_bound, reps.K, len(tasks))
    result = ewa_ll_run(tasks, reps, _oga(cfg, loss),
                        MetaConfig(float(eta), loss.value_bound, seed=args.seed))
    out = _out(args)
    write_posterior_csv(result, out / "posterior.csv")
    emit_csv(ExperimentTrace.from_task_losses([r.losses for r in result.records],
                                              ewall=True), out / "result.csv")
    final = result.posteriors[-1]
    return {"labels": list(reps.labels), "final_posterior": [float(p) for p in final],
            "average_loss": result.compound_average_loss}


def cmd_run_dictionary(args, cfg):
    tasks, _ = _tasks(args, cfg)
    loss = _loss(cfg, tasks)
    mh = MhConfig(int(cfg["n_mh"]), float(cfg["proposal_std"]), float(cfg["eta"]), args.seed)
    result = ewa_ll_dictionary_run(tasks, _oga(cfg, loss), mh, int(cfg["k"]))
    out = _out(args)
    emit_csv(ExperimentTrace.from_task_losses([r.losses for r in result.records],
                                              ewall=True,
                                              acceptance_rate=result.extras["acceptance_rate"]),
             out / "result.csv")
    write_chain_csv(result.extras["chain"], out / "chain.csv")
    final: Dictionary = result.extras["final"]
    return {"average_loss": result.compound_average_loss,
            "acceptance_rate": float(np.mean(result.extras["acceptance_rate"])),
            "final_dictionary": final.matrix.tolist()}


def cmd_run_ltl(args, cfg):
    tasks, truth = _tasks(args, cfg)
    if len(tasks) < 2:
        raise InputError("learning-to-learn needs at least two tasks")
    loss = _loss(cfg, tasks)
    reps = _rep_set(args, cfg, tasks[0].dimension, truth)
    train, new = tasks[:-1], tasks[-1]
    eta = cfg["eta"] if cfg["eta"] is not None else eta_finite(loss.value_bound, reps.K, len(train))
    learner = _oga(cfg, loss)
    pred = learning_to_learn(train, reps, learner,
                             MetaConfig(float(eta), loss.value_bound, seed=args.seed), new)
    doc = {"rep_index": pred.rep_index + 1, "rep_label": reps.labels[pred.rep_index],
           "task_draw": pred.task_draw, "round_draw": pred.round_draw,
           "hypothesis": np.asarray(pred.hypothesis, dtype=float).tolist(),
           "new_task_loss": float(np.mean(loss.value(pred.predict(new.X), new.y)))}
    _write_json(_out(args) / "ltl.json", doc)
    return doc


def cmd_run_tl(args, cfg):
    tasks, truth = _tasks(args, cfg)
    tasks = [TaskDataset(t.X, np.where(t.y >= 0, 1.0, -1.0), t.task_index) for t in tasks]
    reps = _rep_set(args, cfg, tasks[0].dimension, truth)
    K = int(cfg["k"])
    rng = np.random.default_rng([args.seed, 2])
    thetas = rng.standard_normal((16, K))
    hc = FiniteHypothesisClass.signs(thetas)
    vc = VcDeltaParams(int(cfg["vc_dim"] or K), float(cfg["confidence"]))
    C = 1.0 + vc_delta(vc.vc_dim, min(t.m for t in tasks), vc.confidence / len(tasks))
    eta = cfg["eta"] if cfg["eta"] is not None else eta_finite(C, reps.K, len(tasks))
    result = ewa_tl_run(tasks, reps, hc, MetaConfig(float(eta), C, seed=args.seed), vc)
    out = _out(args)
    write_posterior_csv(result, out / "posterior.csv")
    return {"labels": list(reps.labels),
            "final_posterior": [float(p) for p in result.posteriors[-1]],
            "average_loss": result.compound_average_loss}


def cmd_bounds(args, cfg):
    K, d, T, m = int(cfg["k"]), int(cfg["d"]), int(cfg["t"]), int(cfg["m"])
    B_y = cfg["clip_bound"]
    if B_y is None:
        tasks, _, _ = generate_synthetic(_synthetic(cfg, args.seed))
        B_y = clip_bound_from_labels(tasks)
    loss = LOSSES.get(cfg["loss"], None)
    if loss is None:
        raise InputError(f"unsupported loss {cfg['loss']!r}")
    loss = loss(float(B_y))
    B = math.sqrt(K)
    report = configuration_report(
        C=loss.value_bound, K=K, d=d, T=T, m=m, B=B, L=loss.lipschitz_const,
        Phi=loss.lipschitz_const, zeta0=loss.expconcavity,
        class_size=int(cfg["n_reps"]), n_mc=int(cfg["n_mh"]),
        delta_conf=float(cfg["confidence"]), vc_dim=cfg["vc_dim"])
    rows = report.as_rows()
    out = _out(args)
    with (out / "bounds.csv").open("w", encoding="utf-8") as fh:
        fh.write("name,value\n")
        for name, value in rows:
            fh.write(f"{name},{value!r}\n")
    width = max(len(name) for name, _ in rows)
    return "\n".join(f"{name:<{width}}  {value:.10g}" for name, value in rows)


def cmd_figure2(args, cfg):
    sc = _synthetic(cfg, args.seed)
    mh = MhConfig(int(cfg["n_mh"]), float(cfg["proposal_std"]), float(cfg["eta"]), args.seed)
    step = cfg["step_size"]
    trace, (tasks, truth, thetas) = run_figure2_experiment(
        sc, mh, within_step=None if step is None else float(step), return_data=True)
    out = _out(args)
    emit_csv(trace, out / "result.csv")
    emit_plot_data(trace, out / "plot")
    write_truth(out / "truth.json", truth, thetas)
    e, o = trace.per_task("loss_ewall"), trace.per_task("loss_oracle")
    return {"tasks": sc.T, "final_cumloss_ewall": float(trace.cumloss_ewall[-1]),
            "final_cumloss_oracle": float(trace.cumloss_oracle[-1]),
            "gap_last_third": float(e[2 * sc.T // 3:].mean() - o[2 * sc.T // 3:].mean())}


COMMANDS = {
    "generate": (cmd_generate, "write a synthetic dataset CSV and truth sidecar"),
    "run-finite": (cmd_run_finite, "EWA-LL over a finite set of dictionaries"),
    "run-dictionary": (cmd_run_dictionary, "EWA-LL for dictionary learning (MH sampler)"),
    "run-ltl": (cmd_run_ltl, "learning-to-learn: train on all tasks but the last"),
    "run-tl": (cmd_run_tl, "EWA-TL with sign labels and a finite sign class"),
    "bounds": (cmd_bounds, "evaluate closed-form rates for a configuration"),
    "figure2": (cmd_figure2, "EWA-LL against the oracle on synthetic data"),
}


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """Raises instead of printing usage, so failures stay one line."""

    def error(self, message):
        raise _UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ewall", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--config", default=None, help="JSON config file")
        p.add_argument("--out", default=".", help="output directory")
        if name in ("run-finite", "run-dictionary", "run-ltl", "run-tl"):
            p.add_argument("--data", default=None, help="dataset CSV (default: generate)")
        if name in ("run-finite", "run-ltl", "run-tl"):
            p.add_argument("--truth", default=None, help="truth sidecar to include as a candidate")
    return parser


def _fail(kind: str, message: str, code: int) -> int:
    print(json.dumps({"error": kind, "message": " ".join(str(message).split())}),
          file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        return _fail("UsageError", str(exc), EXIT_INPUT)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else EXIT_INPUT
    if args.seed < 0:
        return _fail("InputError", "seed must be nonnegative", EXIT_INPUT)
    try:
        cfg = load_config(args.config)
        summary = COMMANDS[args.command][0](args, cfg)
    except (InputError, ValueError, TypeError, KeyError) as exc:
        return _fail(type(exc).__name__, str(exc), EXIT_INPUT)
    except (EwallError, ArithmeticError, OSError) as exc:
        return _fail(type(exc).__name__, str(exc), EXIT_FAILURE)
    print(summary if isinstance(summary, str) else json.dumps(summary, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
