"""Command-line entry point: ``tlevo search | metrics | plan``.

Exit codes: 0 success, 1 usage or configuration error, 2 evaluator failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import math
import sys
from pathlib import Path

from .chromosome import Chromosome, GeneDomains, canonical_key, map_to_architecture
from .fitness import (
    FitnessEvaluator,
    LookupEvaluator,
    SyntheticLandscape,
    TrainerBridge,
    TrainerBridgeConfig,
)
from .ga_engine import FitnessCache, GaConfig, RunResult, StopReason, run
from .metrics import auc, build_contingency, mcnemar

log = logging.getLogger("tlevo")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_EVALUATOR = 2

CSV_HEADER = (
    "generation,best_fitness,avg_fitness,evaluator_calls,cache_hits,"
    "best_included,best_frozen,best_lr,best_dropout"
)

GA_KEYS = (
    "population_size",
    "max_generations",
    "plateau_epsilon",
    "mutation_rate",
    "tournament_draws",
    "seed",
    "layer_mutation_step",
    "epochs",
    "on_evaluator_failure",
)
DOMAIN_KEYS = ("included_layers_range", "frozen_layers_range", "learning_rate_menu", "dropout_menu")
SYNTHETIC_KEYS = ("target", "weights", "noise_amplitude", "noise_seed")
BRIDGE_KEYS = ("request_timeout", "max_retries", "pool_size", "cwd")
TOP_KEYS = set(GA_KEYS) | {"domains", "evaluator", "synthetic", "bridge", "output_dir", "loss_note", "resume_from"}

DEFAULT_TARGET = (57, 2, 0.1, 0.1)


class ConfigError(ValueError):
    """Invalid run configuration; the message names the offending key."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# config handling
# ---------------------------------------------------------------------------


def _reject_unknown(section: dict, allowed, where: str):
    unknown = sorted(set(section) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown key {where}{unknown[0]!r}")


def load_config(path: str | None, overrides: dict | None = None) -> dict:
    """Read the JSON config, apply overrides and validate it.

    Returns a normalised dict with every key filled in; this is what the
    manifest echoes.
    """
    raw: dict = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
    raw.update({k: v for k, v in (overrides or {}).items() if v is not None})
    _reject_unknown(raw, TOP_KEYS, "")

    domains_raw = raw.get("domains") or {}
    _reject_unknown(domains_raw, DOMAIN_KEYS, "domains.")
    try:
        domains = GeneDomains(**domains_raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"domains: {exc}") from exc

    ga_kwargs = {k: raw[k] for k in GA_KEYS if k in raw}
    for key, value in ga_kwargs.items():
        try:
            GaConfig(**{key: value})
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{key}: {exc}") from exc
    try:
        ga = GaConfig(domains=domains, **ga_kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc

    evaluator = raw.get("evaluator", "synthetic")
    if not isinstance(evaluator, str) or not (
        evaluator == "synthetic" or evaluator.startswith("lookup:") or evaluator.startswith("bridge:")
    ):
        raise ConfigError(f"evaluator: expected 'synthetic', 'lookup:<path>' or 'bridge:<command>', got {evaluator!r}")

    synthetic = dict(raw.get("synthetic") or {})
    _reject_unknown(synthetic, SYNTHETIC_KEYS, "synthetic.")
    synthetic.setdefault("target", list(DEFAULT_TARGET))
    synthetic.setdefault("weights", [1.0, 1.0, 1.0, 1.0])
    synthetic.setdefault("noise_amplitude", 0.0)
    synthetic.setdefault("noise_seed", 0)

    bridge = dict(raw.get("bridge") or {})
    _reject_unknown(bridge, BRIDGE_KEYS, "bridge.")

    config = {
        **{k: getattr(ga, k) for k in GA_KEYS},
        "on_evaluator_failure": ga.on_evaluator_failure.value,
        "domains": domains.to_dict(),
        "evaluator": evaluator,
        "synthetic": synthetic,
        "bridge": bridge,
        "output_dir": raw.get("output_dir", "tlevo-run"),
        "loss_note": raw.get("loss_note", ""),
        "resume_from": raw.get("resume_from"),
    }
    # Build once so that evaluator-specific mistakes surface before any run.
    ga_config_from(config)
    if evaluator == "synthetic":
        _synthetic_from(config)
    elif evaluator.startswith("bridge:"):
        _bridge_config_from(config)
    return config


def ga_config_from(config: dict) -> GaConfig:
    return GaConfig(domains=GeneDomains(**config["domains"]), **{k: config[k] for k in GA_KEYS})


def _synthetic_from(config: dict) -> SyntheticLandscape:
    s = config["synthetic"]
    domains = GeneDomains(**config["domains"])
    try:
        target = Chromosome.from_values(*s["target"], domains=domains)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"synthetic.target: {exc}") from exc
    try:
        return SyntheticLandscape(target, tuple(s["weights"]), float(s["noise_amplitude"]), int(s["noise_seed"]))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"synthetic: {exc}") from exc


def _bridge_config_from(config: dict) -> TrainerBridgeConfig:
    command = config["evaluator"][len("bridge:"):]
    try:
        return TrainerBridgeConfig(command, **config["bridge"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bridge: {exc}") from exc


def build_evaluator(config: dict) -> FitnessEvaluator:
    evaluator = config["evaluator"]
    if evaluator == "synthetic":
        return _synthetic_from(config)
    if evaluator.startswith("lookup:"):
        path = evaluator[len("lookup:"):]
        try:
            return LookupEvaluator.from_csv(path, GeneDomains(**config["domains"]))
        except (OSError, KeyError, ValueError) as exc:
            raise ConfigError(f"evaluator: cannot load lookup table {path}: {exc}") from exc
    return TrainerBridge(_bridge_config_from(config))


# ---------------------------------------------------------------------------
# run artifacts
# ---------------------------------------------------------------------------


def _g6(x: float) -> str:
    return format(x, ".6g")


def generations_csv(result: RunResult) -> str:
    lines = [CSV_HEADER]
    for rec in result.generations:
        best = rec.best.chromosome
        lines.append(",".join([
            str(rec.index),
            _g6(rec.best_fitness),
            _g6(rec.avg_fitness),
            str(rec.evaluator_calls),
            str(rec.cache_hits),
            str(best.included_layers),
            str(best.frozen_layers),
            _g6(best.learning_rate),
            _g6(best.dropout),
        ]))
    return "\n".join(lines) + "\n"


def build_manifest(config: dict, result: RunResult, cache: FitnessCache) -> dict:
    domains = GeneDomains(**config["domains"])
    best = None
    if result.best is not None:
        c = result.best.chromosome
        best = {
            "chromosome": c.to_dict(),
            "fitness": result.best.fitness,
            "avg_loss": result.best.loss,
            "plan": map_to_architecture(c).to_dict(),
        }
    evaluations = []
    for key, loss in cache.losses.items():
        entry = {**Chromosome(*key, domains).to_dict(), "avg_loss": loss}
        if key in cache.penalized:
            entry["penalty"] = True
        evaluations.append(entry)
    return {
        "config": config,
        "seed": config["seed"],
        "stop_reason": result.stop_reason.value,
        "error": result.error,
        "generations_completed": len(result.generations),
        "evaluator_calls": cache.calls,
        "cache_hits": cache.hits,
        "best": best,
        "loss_note": config["loss_note"],
        "evaluations": evaluations,
    }


def warm_cache(manifest_path: str, domains: GeneDomains) -> FitnessCache:
    """Seed a cache from a previous manifest's evaluation log (penalties skipped)."""
    try:
        manifest = json.loads(Path(manifest_path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"resume_from: cannot read manifest {manifest_path}: {exc}") from exc
    losses = {}
    for entry in manifest.get("evaluations", []):
        if entry.get("penalty"):
            continue
        c = Chromosome.from_values(
            entry["included_layers"], entry["frozen_layers"], entry["learning_rate"], entry["dropout"], domains
        )
        losses[canonical_key(c)] = float(entry["avg_loss"])
    return FitnessCache(losses)


def search(config: dict) -> tuple[RunResult, dict]:
    """Run a search from a normalised config and write the artifacts."""
    ga = ga_config_from(config)
    cache = warm_cache(config["resume_from"], ga.domains) if config["resume_from"] else FitnessCache()
    with build_evaluator(config) as evaluator:
        result = run(ga, evaluator, cache)
    out = Path(config["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "generations.csv").write_text(generations_csv(result))
    manifest = build_manifest(config, result, cache)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return result, manifest


# ---------------------------------------------------------------------------
# metrics files
# ---------------------------------------------------------------------------


def _read_columns(path: str) -> dict[str, list[float]]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path} is empty") from None
        header = [h.strip() for h in header]
        columns: dict[str, list[float]] = {h: [] for h in header}
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ValueError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            for h, cell in zip(header, row):
                try:
                    value = float(cell)
                except ValueError:
                    raise ValueError(f"{path}:{lineno}: {h}={cell!r} is not a number") from None
                if not math.isfinite(value):
                    raise ValueError(f"{path}:{lineno}: {h}={cell!r} is not finite")
                columns[h].append(value)
    return columns


def _pair_columns(truth: dict, preds: dict, path: str) -> dict[str, str]:
    if len(truth) == 1 and len(preds) == 1:
        return {next(iter(truth)): next(iter(preds))}
    missing = [name for name in truth if name not in preds]
    if missing:
        raise ValueError(f"{path} has no column {missing[0]!r}")
    return {name: name for name in truth}


def metrics_report(truth_csv: str, pred_csvs: list[str], threshold: float = 0.5) -> dict:
    truth = _read_columns(truth_csv)
    n = len(next(iter(truth.values()))) if truth else 0
    for name, values in truth.items():
        bad = [v for v in values if v not in (0.0, 1.0)]
        if bad:
            raise ValueError(f"{truth_csv}: column {name!r} is not binary (found {bad[0]!r})")
    preds = []
    for path in pred_csvs:
        cols = _read_columns(path)
        pairing = _pair_columns(truth, cols, path)
        for t_name, p_name in pairing.items():
            if len(cols[p_name]) != len(truth[t_name]):
                raise ValueError(
                    f"length mismatch: {truth_csv}:{t_name} has {len(truth[t_name])} rows, "
                    f"{path}:{p_name} has {len(cols[p_name])}"
                )
        preds.append({t: cols[p] for t, p in pairing.items()})

    report = {"n_samples": n, "threshold": threshold, "predictions": list(pred_csvs), "columns": {}}
    for name, labels in truth.items():
        labels = [int(v) for v in labels]
        entry: dict = {"auc": []}
        for scores in (p[name] for p in preds):
            try:
                entry["auc"].append(auc(labels, scores))
            except ValueError as exc:
                entry["auc"].append(None)
                entry["auc_error"] = str(exc)
        if len(preds) == 2:
            binarized = [[1 if s >= threshold else 0 for s in p[name]] for p in preds]
            table = build_contingency(labels, *binarized)
            result = mcnemar(table)
            entry["contingency"] = dataclasses.asdict(table)
            entry["mcnemar"] = {**result.to_dict(), "significant": result.significant()}
        report["columns"][name] = entry
    return report


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_search(args) -> int:
    overrides = {
        "population_size": args.population_size,
        "max_generations": args.max_generations,
        "plateau_epsilon": args.plateau_epsilon,
        "mutation_rate": args.mutation_rate,
        "tournament_draws": args.tournament_draws,
        "seed": args.seed,
        "epochs": args.epochs,
        "on_evaluator_failure": args.on_evaluator_failure,
        "evaluator": args.evaluator,
        "output_dir": args.output_dir,
        "resume_from": args.resume,
    }
    try:
        config = load_config(args.config, overrides)
        result, manifest = search(config)
    except ConfigError as exc:
        print(f"tlevo search: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    out = Path(config["output_dir"])
    print(f"stop_reason={result.stop_reason.value} generations={len(result.generations)} output={out}")
    if manifest["best"] is not None:
        print("best " + json.dumps(manifest["best"]["chromosome"]) + f" fitness={manifest['best']['fitness']:.6g}")
    if result.stop_reason is StopReason.EVALUATOR_FAILURE:
        print(f"tlevo search: evaluator failure: {result.error}", file=sys.stderr)
        return EXIT_EVALUATOR
    return EXIT_OK


def cmd_metrics(args) -> int:
    try:
        report = metrics_report(args.truth, [p for p in (args.pred1, args.pred2) if p], args.threshold)
    except (OSError, ValueError) as exc:
        print(f"tlevo metrics: {exc}", file=sys.stderr)
        return EXIT_USAGE
    print(json.dumps(report, indent=2))
    return EXIT_OK


def cmd_plan(args) -> int:
    try:
        c = Chromosome.from_values(args.included, args.frozen, args.learning_rate, args.dropout)
    except ValueError as exc:
        print(f"tlevo plan: {exc}", file=sys.stderr)
        return EXIT_USAGE
    print(json.dumps(map_to_architecture(c).to_dict(), sort_keys=True))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="tlevo", description="Genetic search over DenseNet-121 transfer-learning configurations.")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("search", help="run the genetic search")
    s.add_argument("--config", help="JSON run configuration")
    s.add_argument("--population-size", type=int)
    s.add_argument("--max-generations", type=int)
    s.add_argument("--plateau-epsilon", type=float)
    s.add_argument("--mutation-rate", type=float)
    s.add_argument("--tournament-draws", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--epochs", type=int)
    s.add_argument("--on-evaluator-failure", choices=["abort", "penalty"])
    s.add_argument("--evaluator", help="synthetic | lookup:<csv> | bridge:<command>")
    s.add_argument("--output-dir")
    s.add_argument("--resume", metavar="MANIFEST", help="warm the fitness cache from a previous manifest.json")
    s.set_defaults(func=cmd_search)

    m = sub.add_parser("metrics", help="AUC and McNemar's test from CSV files")
    m.add_argument("truth")
    m.add_argument("pred1")
    m.add_argument("pred2", nargs="?")
    m.add_argument("--threshold", type=float, default=0.5, help="score >= threshold counts as a positive prediction")
    m.set_defaults(func=cmd_metrics)

    p = sub.add_parser("plan", help="print the architecture plan for one chromosome")
    p.add_argument("included", type=int)
    p.add_argument("frozen", type=int)
    p.add_argument("learning_rate", type=float)
    p.add_argument("dropout", type=float)
    p.set_defaults(func=cmd_plan)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
    )
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
