"""Command-line entry points: generate | train | evaluate | calibrate | serve | retrain | report.

Every command reads one YAML config plus ``--set section.key=value``
overrides. Relative paths in the ``paths`` section resolve against
``--out`` (default ``paths.out``). On success one JSON line goes to stdout;
on failure one JSON line ``{"status": "error", "error": <code>, ...}`` goes
to stderr and the exit status is 1. Usage errors exit with 2.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np
import yaml

from . import pipeline
from .config import Config, ConfigError, load_config
from .evaluation import MetricError, evaluate, odds_segments, write_report
from .lifecycle import ModelArchive, RetrainPolicy, deploy_candidate, load_active, retrain_cycle
from .serving import (InMemoryEventStore, ModelRegistry, NotFoundError, PredictionLog, PredictionService,
                      archive_file_sink, deserialize_model, make_server)
from .sessions import read_archive
from .synth import generate_sessions, read_truth

log = logging.getLogger("clickpredict")


class CommandError(Exception):
    def __init__(self, code: str, message: str = "", **extra):
        super().__init__(message or code)
        self.code = code
        self.extra = extra


def _resolve(cfg: Config, out: str, name: str) -> str:
    path = getattr(cfg.paths, name)
    return path if os.path.isabs(path) else os.path.join(out, path)


def _emit(payload: dict) -> None:
    print(json.dumps(payload, sort_keys=True, default=float), flush=True)


def _load_events(cfg: Config, out: str):
    path = _resolve(cfg, out, "archive")
    if not os.path.exists(path):
        raise CommandError("not_found", f"event archive {path} does not exist")
    return read_archive(path)


def _active_model(cfg: Config, out: str):
    archive = ModelArchive(_resolve(cfg, out, "models"))
    fam = cfg.lifecycle.family_id
    version = archive.active(fam)
    if version is None:
        raise CommandError("no_active_model", f"no active model for family {fam!r}")
    model = deserialize_model(archive.model_bytes(fam, version))
    model.training_stats = {**archive.stats(fam, version), **model.training_stats}
    return archive, model


def _test_arrays(cfg: Config, out: str, model):
    examples = pipeline.make_examples(_load_events(cfg, out), cfg)
    _, test = pipeline.split_test(examples, cfg.evaluation.test_fraction)
    if not test:
        raise CommandError("insufficient_data", "held-out fold is empty")
    X, M, labels = pipeline.encode_examples(test, model.encoder_config, model.config.seq_len)
    return test, pipeline.batch_probs(model, X, M), labels


def cmd_generate(cfg: Config, args) -> dict:
    os.makedirs(args.out, exist_ok=True)
    archive = _resolve(cfg, args.out, "archive")
    truth = generate_sessions(cfg.synth, archive, _resolve(cfg, args.out, "truth"))
    return {"archive": archive, "users": len(truth), "bots": sum(t.is_bot for t in truth),
            "purchases": sum(t.purchased for t in truth)}


def cmd_train(cfg: Config, args) -> dict:
    events = _load_events(cfg, args.out)
    examples, _ = pipeline.split_test(pipeline.make_examples(events, cfg), cfg.evaluation.test_fraction)
    policy = RetrainPolicy.from_config(cfg)
    try:
        model, _ = pipeline.train_model(examples, cfg, cfg.lifecycle.family_id, policy.min_examples)
    except pipeline.InsufficientDataError as exc:
        raise CommandError("insufficient_data", str(exc), examples=len(examples)) from None
    archive = ModelArchive(_resolve(cfg, args.out, "models"))
    outcome = deploy_candidate(cfg.lifecycle.family_id, model, examples, archive, policy, cfg)
    if outcome.status != "deployed":
        raise CommandError(outcome.reason, "model failed verification", **outcome.details)
    s = model.training_stats
    return {"version_id": outcome.version_id, "val_auc": s["val_auc"],
            "holdout_ece_uncalibrated": s.get("holdout_ece_uncalibrated"),
            "holdout_ece_calibrated": s.get("holdout_ece_calibrated")}


def cmd_evaluate(cfg: Config, args) -> dict:
    _, model = _active_model(cfg, args.out)
    test, probs, labels = _test_arrays(cfg, args.out, model)
    ev = cfg.evaluation
    report = evaluate(probs, labels, [e.instance.stats for e in test], cohorts=None,
                      n_bins=cfg.calibration.ece_bins, min_positives=cfg.calibration.min_positives,
                      n_segments=ev.n_segments, hist_bins=ev.hist_bins)
    report.extra.update(version_id=model.version_id, n=int(len(labels)), positives=int(labels.sum()))
    truth_path = _resolve(cfg, args.out, "truth")
    if os.path.exists(truth_path):
        truth = read_truth(truth_path)
        p_true = np.array([truth[e.anonymous_id].propensity for e in test])
        report.extra["true_propensity_odds_segments"] = [
            s.__dict__.copy() for s in odds_segments(p_true, labels, ev.n_segments)]
    out_dir = os.path.join(args.out, "eval")
    files = write_report(report, out_dir)
    return {"auc": report.auc, "ece": report.ece, "report_dir": out_dir, "files": files}


def cmd_calibrate(cfg: Config, args) -> dict:
    archive, model = _active_model(cfg, args.out)
    examples, _ = pipeline.split_test(pipeline.make_examples(_load_events(cfg, args.out), cfg),
                                      cfg.evaluation.test_fraction)
    wanted = set(model.training_stats.get("val_anonymous_ids", ()))
    val_idx = [i for i, e in enumerate(examples) if e.anonymous_id in wanted]
    if not val_idx:
        raise CommandError("insufficient_data", "validation examples not found in the archive")
    X, M, labels = pipeline.encode_examples(examples, model.encoder_config, model.config.seq_len)
    model = pipeline.calibrate(model, X, M, labels, cfg, val_idx)
    s = model.training_stats
    outcome = deploy_candidate(cfg.lifecycle.family_id, model, examples, archive, RetrainPolicy.from_config(cfg),
                               cfg)
    if outcome.status != "deployed":
        raise CommandError(outcome.reason, "recalibrated model failed verification", **outcome.details)
    return {"version_id": outcome.version_id, "ece_before": s["holdout_ece_uncalibrated"],
            "ece_after": s["holdout_ece_calibrated"]}


def cmd_report(cfg: Config, args) -> dict:
    _, model = _active_model(cfg, args.out)
    test, probs, labels = _test_arrays(cfg, args.out, model)
    out_dir = os.path.join(args.out, "report")
    report = evaluate(probs, labels, [e.instance.stats for e in test],
                      cohorts={"all_users": "true", **cfg.evaluation.cohorts},
                      n_bins=cfg.calibration.ece_bins, min_positives=cfg.calibration.min_positives,
                      n_segments=cfg.evaluation.n_segments, hist_bins=cfg.evaluation.hist_bins)
    files = write_report(report, out_dir)
    rates = {name: c.top_decile_positive_rate for name, c in report.cohort_reports.items()}
    return {"report_dir": out_dir, "files": files, "top_decile_positive_rate": rates}


def cmd_retrain(cfg: Config, args) -> dict:
    archive = ModelArchive(_resolve(cfg, args.out, "models"))
    outcome = retrain_cycle(cfg.lifecycle.family_id, RetrainPolicy.from_config(cfg), cfg,
                            _load_events(cfg, args.out), archive)
    if outcome.status != "deployed":
        raise CommandError(outcome.reason, str(outcome), outcome=outcome.status, **outcome.details)
    return {"outcome": str(outcome), "version_id": outcome.version_id, **outcome.details}


def cmd_serve(cfg: Config, args) -> dict:
    sv = cfg.serving
    registry = ModelRegistry()
    loaded = load_active(ModelArchive(_resolve(cfg, args.out, "models")), registry)
    store = InMemoryEventStore(sv.ttl_seconds, sv.max_events_per_user)
    log_path = sv.prediction_log if os.path.isabs(sv.prediction_log) else os.path.join(args.out, sv.prediction_log)
    service = PredictionService(store, registry, PredictionLog(log_path, sv.log_max_bytes),
                                archive_file_sink(_resolve(cfg, args.out, "archive")))
    port = args.port if args.port is not None else sv.port
    server = make_server(service, sv.host, port)
    _emit({"status": "ok", "command": "serve", "host": sv.host, "port": server.server_address[1],
           "models": loaded})
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return {"stopped": True}


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "calibrate": cmd_calibrate,
    "serve": cmd_serve,
    "retrain": cmd_retrain,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="YAML config file")
    common.add_argument("--seed", type=int, help="seed for the generator and training")
    common.add_argument("--out", metavar="DIR", help="output directory (default: paths.out)")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config value (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true")
    parser = argparse.ArgumentParser(prog="clickpredict", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common])
        if name == "serve":
            p.add_argument("--port", type=int)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        cfg = load_config(args.config, args.set, args.seed)
        args.out = args.out or cfg.paths.out
        result = COMMANDS[args.command](cfg, args)
    except CommandError as exc:
        _fail(args.command, exc.code, str(exc), **exc.extra)
        return 1
    except (ConfigError, yaml.YAMLError) as exc:
        _fail(args.command, "config", str(exc))
        return 1
    except NotFoundError as exc:
        _fail(args.command, "not_found", str(exc))
        return 1
    except (MetricError, OSError, ValueError) as exc:
        _fail(args.command, type(exc).__name__, str(exc))
        return 1
    _emit({"status": "ok", "command": args.command, **result})
    return 0


def _fail(command: str, code: str, message: str, **extra) -> None:
    print(json.dumps({"status": "error", "command": command, "error": code, "message": message, **extra},
                     sort_keys=True, default=str), file=sys.stderr, flush=True)


if __name__ == "__main__":
    sys.exit(main())
