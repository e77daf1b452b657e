"""Command-line entry point: simulate, train, select-model, score, evaluate, benchmark.

Every run writes ``manifest.json`` next to its outputs with the resolved
configuration and sha256 checksums. Passing that manifest back through
``--config`` repeats the run. Errors leave no partial outputs and end with
one JSON line on stderr; exit codes are 2 (configuration), 3 (data) and
4 (numerical failure).
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import tempfile
from pathlib import Path

from . import __version__, _parallel
from .cohort import CohortFormatError, InvariantViolation, parse_cohort, write_cohort
from .evaluation import (
    DISCHARGE_LOWER,
    benchmark_report,
    evaluate_traces,
    fit_stationary,
    snapshot_cohort,
    timeliness_frontier,
    write_curve_csv,
    write_curve_svg,
    write_report_json,
)
from .likelihood import NumericalError
from .mixture import EMConfig, bic, em_fit, select_model
from .persistence import ModelFileError, load_model, save_model
from .scoring import score_cohort, score_trajectory, write_traces_csv
from .simulator import SimConfig, benchmark_params, paper_scale_params, recovery_params, sample_cohort, write_truth

try:  # Python >= 3.11
    import tomllib
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib

log = logging.getLogger("wardrisk")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
MANIFEST = "manifest.json"


class ConfigError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


# ---------------------------------------------------------------------------
# staging: outputs appear only when the whole command succeeds


class _Staging:
    def __init__(self):
        self.files: list[tuple[Path, Path]] = []

    def path(self, final: Path) -> Path:
        fd, tmp = tempfile.mkstemp(prefix=f".{final.name}.", suffix=".part", dir=final.parent)
        os.close(fd)
        self.files.append((Path(tmp), final))
        return Path(tmp)

    def commit(self) -> None:
        for tmp, final in self.files:
            os.replace(tmp, final)
        self.files = []

    def discard(self) -> None:
        for tmp, _ in self.files:
            tmp.unlink(missing_ok=True)
        self.files = []


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _out_dir(value: str) -> Path:
    p = Path(value)
    if not p.is_dir():
        raise ConfigError(f"output directory does not exist: {value}")
    return p


def _in_file(value: str) -> Path:
    p = Path(value)
    if not p.is_file():
        raise ConfigError(f"input file does not exist: {value}")
    return p


def _int_list(text) -> list[int]:
    if isinstance(text, list):
        return [int(x) for x in text]
    out = []
    for part in str(text).split(","):
        part = part.strip()
        if "-" in part:
            lo, hi = part.split("-")
            out.extend(range(int(lo), int(hi) + 1))
        elif part:
            out.append(int(part))
    if not out or min(out) < 1:
        raise argparse.ArgumentTypeError(f"expected positive integers like '1,2,3' or '1-4', got {text!r}")
    return out


# ---------------------------------------------------------------------------
# commands


def _em_config(args) -> EMConfig:
    return EMConfig(max_iter=args.max_iter, tol=args.tol, seed=args.seed, rank=args.rank, t_max=args.t_max,
                    end_aligned=not args.censored, threads=args.threads)


def _load_cohort(path: Path):
    return parse_cohort(path)


def _scenario(args):
    if args.paper_scale or args.scenario == "paper-scale":
        return paper_scale_params(args.seed, prior_icu=args.prevalence)
    if args.scenario == "recovery":
        return recovery_params(args.seed, prior_icu=args.prevalence)
    return benchmark_params(args.seed, prior_icu=args.prevalence)


def cmd_simulate(args, stage: _Staging) -> dict:
    out = _out_dir(args.out_dir)
    params = _scenario(args)
    cfg = SimConfig(args.n, args.seed, params, asynchronous=not args.synchronous, id_prefix=args.prefix)
    cohort, truth = sample_cohort(cfg, args.threads)
    paths = {"cohort": out / "cohort.ndjson", "truth": out / "truth.ndjson", "truth_model": out / "truth_model.json"}
    write_cohort(cohort, stage.path(paths["cohort"]))
    write_truth(truth, stage.path(paths["truth"]))
    save_model(stage.path(paths["truth_model"]), params)
    log.info("simulated %d patients (%d ICU)", len(cohort), int(cohort.labels().sum()))
    return paths


def cmd_train(args, stage: _Staging) -> dict:
    cohort = _load_cohort(_in_file(args.cohort))
    out = _out_dir(args.out_dir)
    params, report = em_fit(cohort, args.G, args.K, _em_config(args))
    path = out / "model.json"
    save_model(stage.path(path), params, report, {"bic": bic(params, cohort, report.trace[-1], not args.censored)})
    log.info("trained G=%d K=%d in %d iterations, log likelihood %.4f", args.G, args.K, report.n_iter, report.trace[-1])
    return {"model": path}


def cmd_select_model(args, stage: _Staging) -> dict:
    cohort = _load_cohort(_in_file(args.cohort))
    out = _out_dir(args.out_dir)
    res = select_model(cohort, args.G, args.K, _em_config(args))
    paths = {"model": out / "model.json", "table": out / "bic_table.json"}
    save_model(stage.path(paths["model"]), res.params, res.report, {"bic_table": res.table_rows()})
    with open(stage.path(paths["table"]), "w", encoding="utf-8") as fh:
        json.dump({"best": {"G": res.best[0], "K": res.best[1]}, "table": res.table_rows()}, fh, indent=2, sort_keys=True)
        fh.write("\n")
    log.info("selected G=%d K=%d", *res.best)
    return paths


def _check_compatible(params, cohort) -> None:
    if params.vocabulary != cohort.vocabulary:
        raise DataError("vocabulary of the cohort differs from the model's")
    if tuple(s.name for s in params.streams) != tuple(s.name for s in cohort.streams):
        raise DataError("stream catalog of the cohort differs from the model's")


def cmd_score(args, stage: _Staging) -> dict:
    params, _ = load_model(_in_file(args.model))
    cohort = _load_cohort(_in_file(args.cohort))
    out = _out_dir(args.out_dir)
    _check_compatible(params, cohort)
    if args.mode == "stream":
        traces = [score_trajectory(params, r, args.prior) for r in cohort]
    else:
        traces = score_cohort(params, cohort, args.threads, args.prior)
    path = out / "scores.csv"
    write_traces_csv(traces, stage.path(path))
    return {"scores": path}


def _write_evaluation(res, traces_by_method, out: Path, stage: _Staging) -> dict:
    paths = {}
    for name, curve in res.roc.items():
        for kind, c in [("roc", curve)] + [(f"discharge_{lo:g}", res.discharge[(name, lo)]) for lo in DISCHARGE_LOWER]:
            p = out / f"{kind}_{name}.csv"
            write_curve_csv(c, stage.path(p))
            paths[f"{kind}_{name}_csv"] = p
            p = out / f"{kind}_{name}.svg"
            write_curve_svg(c, stage.path(p), f"{name} {kind}")
            paths[f"{kind}_{name}_svg"] = p
        tl = res.timeliness[name]
        if tl is not None:
            p = out / f"timeliness_{name}.csv"
            write_curve_csv(tl, stage.path(p))
            paths[f"timeliness_{name}_csv"] = p
    report = benchmark_report(res)
    frontier = {}
    for name, traces in traces_by_method.items():
        try:
            frontier[name] = [{"offset_hours": off, "points": c.rows()} for off, c in timeliness_frontier(traces)]
        except ValueError:
            frontier[name] = []
    report["timeliness_frontier"] = frontier
    p = out / "report.json"
    write_report_json(report, stage.path(p))
    paths["report"] = p
    return paths


def cmd_evaluate(args, stage: _Staging) -> dict:
    full, _ = load_model(_in_file(args.model))
    test = _load_cohort(_in_file(args.cohort))
    out = _out_dir(args.out_dir)
    _check_compatible(full, test)
    if args.stationary_model:
        stationary, _ = load_model(_in_file(args.stationary_model))
        if stationary.G != 1 or stationary.K != 1:
            raise ConfigError("--stationary-model must have G = 1 and K = 1")
    elif args.train:
        stationary = fit_stationary(_load_cohort(_in_file(args.train)), _em_config(args))
    else:
        raise ConfigError("evaluate needs --stationary-model or --train for the ablation columns")
    traces = {
        "full": score_cohort(full, test, args.threads),
        "stationary": score_cohort(stationary, test, args.threads),
        "snapshot": snapshot_cohort(stationary, test),
    }
    res = evaluate_traces(traces, args.seed)
    return _write_evaluation(res, traces, out, stage)


def cmd_benchmark(args, stage: _Staging) -> dict:
    out = _out_dir(args.out_dir)
    params = benchmark_params(args.seed, prior_icu=args.prevalence)
    train, _ = sample_cohort(SimConfig(args.n_train, 2 * args.seed, params), args.threads)
    test, _ = sample_cohort(SimConfig(args.n_test, 2 * args.seed + 1, params, id_prefix="t"), args.threads)
    config = _em_config(args)
    full, report = em_fit(train, args.G, args.K, config)
    stationary = fit_stationary(train, config)
    traces = {
        "full": score_cohort(full, test, args.threads),
        "stationary": score_cohort(stationary, test, args.threads),
        "snapshot": snapshot_cohort(stationary, test),
    }
    res = evaluate_traces(traces, args.seed)
    paths = _write_evaluation(res, traces, out, stage)
    paths["model_full"] = out / "model_full.json"
    save_model(stage.path(paths["model_full"]), full, report)
    paths["model_stationary"] = out / "model_stationary.json"
    save_model(stage.path(paths["model_stationary"]), stationary)
    return paths


COMMANDS = {
    "simulate": cmd_simulate,
    "train": cmd_train,
    "select-model": cmd_select_model,
    "score": cmd_score,
    "evaluate": cmd_evaluate,
    "benchmark": cmd_benchmark,
}

# inputs whose checksums go into the manifest
_INPUTS = ("cohort", "model", "train", "stationary_model")


# ---------------------------------------------------------------------------
# parser and configuration


def _add_common(p):
    p.add_argument("--config", help="TOML or JSON file (or a previous manifest); flags win")
    p.add_argument("--threads", type=int, help=f"worker threads (default ${_parallel.THREADS_ENV} or 1)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", default=".", help="existing directory for outputs")
    p.add_argument("-v", "--verbose", action="store_true")


def _add_em(p, G_list=False):
    if G_list:
        p.add_argument("--G", type=_int_list, default=[1, 2, 3], help="phenotype counts, e.g. 1-3")
        p.add_argument("--K", type=_int_list, default=[1, 2, 3, 4], help="epoch counts, e.g. 1,2,3,4")
    else:
        p.add_argument("--G", type=int, default=2, help="number of phenotypes")
        p.add_argument("--K", type=int, default=3, help="number of epochs")
    p.add_argument("--rank", type=int, default=3)
    p.add_argument("--t-max", type=int, default=168, help="longest epoch in hours")
    p.add_argument("--max-iter", type=int, default=100)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--censored", action="store_true", help="train on censored rather than end-aligned stays")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="wardrisk", description="Ward deterioration risk scores from vital-sign trajectories.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate", help="sample a synthetic cohort with a truth sidecar")
    _add_common(p)
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--scenario", choices=["benchmark", "recovery", "paper-scale"], default="benchmark")
    p.add_argument("--paper-scale", action="store_true", help="4 phenotypes, 12 epochs, 21 streams")
    p.add_argument("--prevalence", type=float, default=0.09)
    p.add_argument("--synchronous", action="store_true", help="all streams share observation times")
    p.add_argument("--prefix", default="p")

    p = sub.add_parser("train", help="fit one (G, K) model by EM")
    _add_common(p)
    _add_em(p)
    p.add_argument("--cohort", required=True)

    p = sub.add_parser("select-model", help="fit a (G, K) grid and keep the lowest BIC")
    _add_common(p)
    _add_em(p, G_list=True)
    p.add_argument("--cohort", required=True)

    p = sub.add_parser("score", help="risk after every event")
    _add_common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--cohort", required=True)
    p.add_argument("--mode", choices=["batch", "stream"], default="batch")
    p.add_argument("--prior", type=float, help="override the prior ICU probability")

    p = sub.add_parser("evaluate", help="curves and report for the model and both ablations")
    _add_common(p)
    _add_em(p)
    p.add_argument("--model", required=True)
    p.add_argument("--cohort", required=True, help="test cohort")
    p.add_argument("--stationary-model", help="trained G=1, K=1 model")
    p.add_argument("--train", help="training cohort for the stationary ablation")

    p = sub.add_parser("benchmark", help="simulate, train and evaluate the standard synthetic benchmark")
    _add_common(p)
    _add_em(p)
    p.add_argument("--n-train", type=int, default=1000)
    p.add_argument("--n-test", type=int, default=2000)
    p.add_argument("--prevalence", type=float, default=0.09)
    p.set_defaults(t_max=40)
    return parser


def _read_config(path: str) -> dict:
    p = _in_file(path)
    try:
        if p.suffix == ".toml":
            data = tomllib.loads(p.read_text(encoding="utf-8"))
        else:
            data = json.loads(p.read_text(encoding="utf-8"))
    except (tomllib.TOMLDecodeError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from None
    if isinstance(data, dict) and "config" in data and "outputs" in data:  # a manifest
        data = data["config"]
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a table of settings")
    return {k.replace("-", "_"): v for k, v in data.items()}


def resolve_args(argv) -> argparse.Namespace:
    parser = build_parser()
    # required flags may come from --config, so they are checked after merging
    required = {}
    for sub in parser._subparsers._group_actions[0].choices.values():
        for a in sub._actions:
            if a.required and a.option_strings:
                required.setdefault(id(sub), []).append(a)
                a.required = False
    args = parser.parse_args(argv)
    sub = parser._subparsers._group_actions[0].choices[args.command]
    if args.config:
        cfg = _read_config(args.config)
        cfg.pop("command", None)
        cfg.pop("config", None)
        known = {a.dest for a in sub._actions}
        unknown = sorted(set(cfg) - known)
        if unknown:
            raise ConfigError(f"unknown setting(s) in {args.config}: {', '.join(unknown)}")
        converted = {}
        for a in sub._actions:
            if a.dest not in cfg:
                continue
            value = cfg[a.dest]
            if a.type is not None and value is not None:
                try:
                    value = a.type(value)
                except (TypeError, ValueError, argparse.ArgumentTypeError) as exc:
                    raise ConfigError(f"bad value for {a.dest} in {args.config}: {exc}") from None
            converted[a.dest] = value
        sub.set_defaults(**converted)
        args = parser.parse_args(argv)  # flags win over the file
    missing = [a.option_strings[0] for a in required.get(id(sub), []) if getattr(args, a.dest) is None]
    if missing:
        raise ConfigError(f"the following arguments are required: {', '.join(missing)}")
    if args.threads is None:
        args.threads = _parallel.default_threads()
    if args.threads < 1:
        raise ConfigError("--threads must be >= 1")
    return args


def _validate(args) -> None:
    for name in ("n", "n_train", "n_test", "max_iter"):
        v = getattr(args, name, None)
        if v is not None and v < (0 if name == "max_iter" else 1):
            raise ConfigError(f"--{name.replace('_', '-')} must be positive")
    for name in ("prevalence", "prior"):
        v = getattr(args, name, None)
        if v is not None and not 0.0 <= v <= 1.0:
            raise ConfigError(f"--{name} must lie in [0, 1]")
    _out_dir(args.out_dir)
    for name in _INPUTS:
        v = getattr(args, name, None)
        if v:
            _in_file(v)


def _manifest(args, inputs: dict, outputs: dict) -> dict:
    config = {k: v for k, v in vars(args).items() if k not in ("config", "verbose")}
    return {
        "wardrisk_version": __version__,
        "command": args.command,
        "config": config,
        "inputs": {k: {"path": str(p), "sha256": _sha256(Path(p))} for k, p in inputs.items()},
        "outputs": {k: {"path": str(p), "sha256": h} for k, (p, h) in sorted(outputs.items())},
    }


def _fail(code: int, kind: str, message: str) -> int:
    line = json.dumps({"error": kind, "exit_code": code, "message": " ".join(str(message).split())})
    print(line, file=sys.stderr)
    return code


def main(argv=None) -> int:
    stage = _Staging()
    try:
        args = resolve_args(sys.argv[1:] if argv is None else argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
        _validate(args)
        inputs = {k: getattr(args, k) for k in _INPUTS if getattr(args, k, None)}
        outputs = COMMANDS[args.command](args, stage)
        digests = {k: (str(final), _sha256(tmp)) for tmp, final in stage.files for k, p in outputs.items() if p == final}
        manifest_path = Path(args.out_dir) / MANIFEST
        with open(stage.path(manifest_path), "w", encoding="utf-8") as fh:
            json.dump(_manifest(args, inputs, digests), fh, indent=2, sort_keys=True)
            fh.write("\n")
        stage.commit()
        return EXIT_OK
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, "config", exc)
    except NumericalError as exc:
        return _fail(EXIT_NUMERIC, "numerical", exc)
    except (DataError, CohortFormatError, InvariantViolation, ModelFileError) as exc:
        return _fail(EXIT_DATA, "data", exc)
    except ValueError as exc:
        return _fail(EXIT_DATA, "data", exc)
    except OSError as exc:
        return _fail(EXIT_CONFIG, "config", exc)
    finally:
        stage.discard()


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
