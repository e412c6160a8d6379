"""Command line entry point: ``clic <command> [options]``.

Every command accepts ``--config``, ``--seed``, ``--out`` and ``--set key=value``
(repeatable); precedence is flag > config file > profile default. Failures exit
non-zero with one line on stderr: ``error[<category>]: <detail>``, where the
category is ``config`` (exit 2), ``data`` (exit 3) or ``runtime`` (exit 4).
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path

from . import __version__
from .config import STRATEGIES, Config, ConfigError, dump_config, load_config, parse_pairs

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_RUNTIME = 0, 2, 3, 4
COMMANDS = ("gen", "stats", "validate", "train", "test", "matrix", "reweight", "individualize",
            "export")


class DataError(Exception):
    pass


def git_blob_hash(path) -> str:
    data = Path(path).read_bytes()
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


class RunManifest:
    """Self-description of one command invocation, rewritten atomically."""

    def __init__(self, out: Path, command: str, argv, cfg: Config, library: str | None):
        self.path = out / f"manifest_{command}.json"
        self.data = {"command": command, "argv": list(argv), "version": __version__,
                     "config": dump_config(cfg), "seed": cfg.seed, "status": "running",
                     "started": time.strftime("%Y-%m-%dT%H:%M:%S%z"), "finished": None,
                     "library": library,
                     "library_hash": git_blob_hash(library) if library and Path(library).exists() else None,
                     "artifacts": []}
        self.write()

    def add(self, *paths) -> None:
        self.data["artifacts"].extend(str(p) for p in paths)

    def write(self) -> None:
        tmp = self.path.with_name(self.path.name + ".tmp")
        tmp.write_text(json.dumps(self.data, indent=1))
        os.replace(tmp, self.path)

    def finish(self, error: str | None = None) -> None:
        self.data["status"] = "failed" if error else "complete"
        self.data["error"] = error
        self.data["finished"] = time.strftime("%Y-%m-%dT%H:%M:%S%z")
        self.write()


# -- argument handling --------------------------------------------------------------

def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="clic", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", help="flat key = value config file")
        s.add_argument("--profile", choices=("desk", "paper"))
        s.add_argument("--seed", type=int)
        s.add_argument("--out", help="output directory (default: the --run directory for "
                                     "matrix/reweight/export, else clic_out)")
        s.add_argument("--jobs", type=int, help="worker processes for rollouts")
        s.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override any config key")
        s.add_argument("--library", help="library file (jsonl)")
        s.add_argument("-v", "--verbose", action="store_true")
        if name == "gen":
            s.add_argument("--n", type=int, help="number of scenarios")
        if name == "train":
            s.add_argument("--strategy", choices=STRATEGIES)
            s.add_argument("--no-resume", action="store_true")
        if name == "test":
            s.add_argument("--agent", required=True, help="agent checkpoint")
            s.add_argument("--baseline", help="outcome table CSV of the reference agent")
            s.add_argument("--baseline-agent", help="agent checkpoint to build the baseline table")
        if name in ("matrix", "reweight", "export"):
            s.add_argument("--run", required=True, help="training run directory")
        if name == "matrix":
            s.add_argument("--size", type=int, help="test curriculum size (default: train_size)")
        if name == "reweight":
            s.add_argument("--before", type=int, default=1, help="predictor iteration")
            s.add_argument("--after", type=int, help="predictor iteration (default: last)")
        if name == "individualize":
            s.add_argument("--agent", required=True, help="agent checkpoint")
            s.add_argument("--size", type=int, help="selected curriculum size")
    return p


def _effective_config(args) -> Config:
    over = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set {item!r}: expected KEY=VALUE")
        over.update(parse_pairs(item, "--set"))
    for key in ("profile", "seed", "jobs", "library"):
        if getattr(args, key, None) is not None:
            over[key] = getattr(args, key)
    if getattr(args, "strategy", None):
        over["strategy"] = args.strategy
    if getattr(args, "n", None):
        over["gen_n_scenarios"] = args.n
    return load_config(args.config, over)


def _library_path(cfg: Config) -> str:
    if not cfg.library:
        raise ConfigError("library: no library given (use --library or the library key)")
    return cfg.library


def _load_lib(cfg: Config, validate: bool = True):
    from .scenario import load_library
    path = _library_path(cfg)
    if not Path(path).exists():
        raise DataError(f"{path}: no such library file")
    return load_library(path, "jsonl", limits=cfg.limits(), validate=validate)


def _run_config(run_dir) -> Config:
    path = Path(run_dir) / "config.cfg"
    if not path.exists():
        raise DataError(f"{run_dir}: not a training run (config.cfg missing)")
    return load_config(path)


def _checkpoints(run_dir, kind):
    paths = sorted((Path(run_dir) / "checkpoints").glob(f"{kind}_*.bin"))
    if not paths:
        raise DataError(f"{run_dir}: no {kind} checkpoints")
    return paths


# -- commands -------------------------------------------------------------------------

def cmd_gen(cfg, out, man, args):
    from .gen import describe_library, generate_library
    from .scenario import write_library
    lib = generate_library(cfg.gen(), cfg.road(), cfg.dt, cfg.limits(), cfg.sim().dims,
                           cfg.n_max, cfg.h_max)
    path = out / "library.jsonl"
    write_library(lib, path)
    report = describe_library(lib, cfg.limits())
    (out / "generation_report.json").write_text(json.dumps(report, indent=1))
    man.data["library"], man.data["library_hash"] = str(path), git_blob_hash(path)
    man.add(path, out / "generation_report.json")
    print(f"wrote {len(lib)} scenarios to {path}")


def cmd_stats(cfg, out, man, args):
    from .scenario import library_stats
    rep = library_stats(_load_lib(cfg, validate=False))
    (out / "stats.json").write_text(rep.to_json())
    man.add(out / "stats.json")
    print(f"wrote {out / 'stats.json'}")


def cmd_validate(cfg, out, man, args):
    from .scenario import validate_scenario
    lib = _load_lib(cfg, validate=False)
    found = [str(v) for s in lib for v in validate_scenario(s, lib.road, cfg.limits())]
    (out / "violations.json").write_text(json.dumps({"n_scenarios": len(lib),
                                                     "violations": found}, indent=1))
    man.add(out / "violations.json")
    if found:
        raise DataError(f"{len(found)} constraint violations; first: {found[0]}")
    print(f"{len(lib)} scenarios, no violations")


def cmd_train(cfg, out, man, args):
    from .loop import initial_agent, run
    from .metrics import compute_metrics, test_all, write_json
    from .sac import SacAgent
    lib = _load_lib(cfg)
    records = run(cfg, lib, out, resume=not args.no_resume)
    sim = cfg.sim()
    before = test_all(initial_agent(cfg), lib, sim, cfg.jobs, cfg.eval_chunk)
    after = test_all(SacAgent.load(out / records[-1].agent_checkpoint), lib, sim, cfg.jobs,
                     cfg.eval_chunk)
    before.write_csv(out / "outcomes_initial.csv")
    after.write_csv(out / "outcomes_final.csv")
    rep = compute_metrics(before, after)
    write_json(out / "metrics.json", rep.to_json())
    man.add(out / "records", out / "checkpoints", out / "curricula", out / "outcomes_initial.csv",
            out / "outcomes_final.csv", out / "metrics.json")
    print(json.dumps({k: rep.to_json()[k] for k in ("SR", "FNR", "TNR", "CPS", "CPM")}))


def cmd_test(cfg, out, man, args):
    from .metrics import OutcomeTable, compute_metrics, test_all, write_json
    from .sac import SacAgent
    lib = _load_lib(cfg)
    sim = cfg.sim()
    after = test_all(SacAgent.load(args.agent), lib, sim, cfg.jobs, cfg.eval_chunk)
    after.write_csv(out / "outcomes.csv")
    man.add(out / "outcomes.csv")
    before = None
    if args.baseline:
        before = OutcomeTable.read_csv(args.baseline)
    elif args.baseline_agent:
        before = test_all(SacAgent.load(args.baseline_agent), lib, sim, cfg.jobs, cfg.eval_chunk)
    if before is None:
        print(f"SR {100.0 * (1 - after.label.mean()):.2f}% (no baseline; FNR/TNR not computed)")
        return
    rep = compute_metrics(before, after)
    write_json(out / "metrics.json", rep.to_json())
    man.add(out / "metrics.json")
    print(json.dumps(rep.to_json()))


def cmd_matrix(cfg, out, man, args):
    from .curriculum import DifficultyPredictor
    from .loop import Evaluator
    from .metrics import matrix_experiment, mean_spearman, write_json, write_matrix_csv
    from .sac import SacAgent
    from .scenario import featurize_library
    rcfg = _run_config(args.run)
    rcfg = rcfg.replace(library=cfg.library or rcfg.library, jobs=cfg.jobs)
    lib = _load_lib(rcfg)
    agents = [SacAgent.load(p) for p in _checkpoints(args.run, "agent")]
    preds = [DifficultyPredictor.load(p) for p in _checkpoints(args.run, "predictor")]
    n = args.size or rcfg.matrix_size or rcfg.train_size
    with Evaluator(lib, rcfg.sim(), rcfg.jobs, rcfg.eval_chunk) as ev:
        mat = matrix_experiment(agents, preds, lib, featurize_library(lib), n, rcfg.seed, ev,
                                rcfg.label_floor)
    write_matrix_csv(out / "matrix.csv", mat)
    summary = {"matrix": mat, "size": n,
               "spearman_agent": mean_spearman(mat, 0),
               "spearman_predictor": mean_spearman(mat, 1, skip_first_row=True)}
    write_json(out / "matrix.json", summary)
    man.add(out / "matrix.csv", out / "matrix.json")
    print(json.dumps({k: summary[k] for k in ("spearman_agent", "spearman_predictor")}))


def cmd_reweight(cfg, out, man, args):
    from .curriculum import DifficultyPredictor
    from .loop import child_rng
    from .metrics import reweighting_analysis, write_json, write_pairs_csv
    from .scenario import featurize_library
    rcfg = _run_config(args.run)
    rcfg = rcfg.replace(library=cfg.library or rcfg.library)
    lib = _load_lib(rcfg)
    preds = _checkpoints(args.run, "predictor")
    after = args.after or len(preds)
    if not (1 <= args.before <= len(preds) and 1 <= after <= len(preds)):
        raise ConfigError(f"predictor iterations must lie in [1, {len(preds)}]")
    res = reweighting_analysis(DifficultyPredictor.load(preds[args.before - 1]),
                               DifficultyPredictor.load(preds[after - 1]), featurize_library(lib),
                               rcfg.reweight_draws, child_rng(rcfg.seed, 0, 200), rcfg.reweight_bins,
                               rcfg.label_floor)
    write_pairs_csv(out / "label_pairs.csv", res.pop("pairs"))
    write_json(out / "reweight.json", res)
    man.add(out / "label_pairs.csv", out / "reweight.json")
    print(json.dumps({k: {"slope": res[k]["slope"], "r2": res[k]["r2"]} for k in ("before", "after")}))


def cmd_individualize(cfg, out, man, args):
    from .loop import Evaluator
    from .metrics import individualization_experiment, write_json
    from .sac import SacAgent
    from .scenario import featurize_library
    lib = _load_lib(cfg)
    with Evaluator(lib, cfg.sim(), cfg.jobs, cfg.eval_chunk) as ev:
        res = individualization_experiment(SacAgent.load(args.agent), cfg, lib,
                                           featurize_library(lib), ev, args.size)
    write_json(out / "individualization.json", res)
    man.add(out / "individualization.json")
    print(json.dumps({arm: res[arm]["left_front_proportion"] for arm in ("masked", "unmasked")}))


def cmd_export(cfg, out, man, args):
    import csv
    run_dir = Path(args.run)
    recs = sorted((run_dir / "records").glob("iter_*.json"))
    if not recs:
        raise DataError(f"{run_dir}: no iteration records")
    rows = [json.loads(p.read_text()) for p in recs]
    with open(out / "iterations.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["iteration", "eval_success_rate", "curriculum_size", "unique_scenarios",
                    "predictor_final_loss", "env_steps", "updates", "mean_return",
                    "episode_accident_rate"])
        for r in rows:
            t = r["training"]
            w.writerow([r["iteration"], r["eval_success_rate"], len(r["curriculum"]["ids"]),
                        len(set(r["curriculum"]["ids"])), r["predictor_loss"][-1], t["env_steps"],
                        t["updates"], t["mean_return"], t["episode_accident_rate"]])
    with open(out / "curricula.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["iteration", "position", "scenario_id"])
        for r in rows:
            for pos, sid in enumerate(r["curriculum"]["ids"]):
                w.writerow([r["iteration"], pos, sid])
    (out / "records.json").write_text(json.dumps(rows, indent=1, sort_keys=True))
    man.add(out / "iterations.csv", out / "curricula.csv", out / "records.json")
    print(f"exported {len(rows)} iterations")


HANDLERS = {name: globals()[f"cmd_{name}"] for name in COMMANDS}


def _category(exc) -> tuple[str, int]:
    from .metrics import MetricsError
    from .nn import ParamFormatError, ShapeMismatchError
    from .scenario import LibraryFormatError, ScenarioInvariantError
    if isinstance(exc, ConfigError):
        return "config", EXIT_CONFIG
    if isinstance(exc, (DataError, LibraryFormatError, ScenarioInvariantError, MetricsError,
                        ParamFormatError, ShapeMismatchError, FileNotFoundError)):
        return "data", EXIT_DATA
    return "runtime", EXIT_RUNTIME


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    man = None
    try:
        cfg = _effective_config(args)
        out = Path(args.out or getattr(args, "run", None) or "clic_out")
        out.mkdir(parents=True, exist_ok=True)
        (out / f"config_{args.command}.cfg").write_text(dump_config(cfg))
        man = RunManifest(out, args.command, argv, cfg, cfg.library or None)
        HANDLERS[args.command](cfg, out, man, args)
        man.finish()
    except Exception as exc:  # noqa: BLE001 - every failure maps to an exit code
        category, code = _category(exc)
        detail = " ".join(str(exc).split()) or type(exc).__name__
        print(f"error[{category}]: {detail}", file=sys.stderr)
        if man is not None:
            man.finish(f"{category}: {detail}")
        if args.verbose:
            logging.exception("command failed")
        return code
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
