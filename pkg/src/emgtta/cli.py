"""Command-line entry point: ``emgtta <command> [options]``.

Every command reads one resolved configuration (file, then ``--set``
overrides, then dedicated flags) and a work directory of artifacts::

    data/manifest.json, data/sNN.csv      synth
    model/base.npz                        train
    cache/source_stats.npz                cache-stats
    model/meta.npz                        meta-train
    reports/*-<digest>.json|csv           adapt, eval, report

Exit codes: 0 success, 1 runtime failure, 2 missing prerequisite artifact,
3 invalid configuration.  Errors are printed to stderr as one JSON object.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import warnings
from pathlib import Path

import yaml

from . import config as cfgmod
from .adabn import adapt_stream
from .align import SourceStats
from .data import DataError, ParseError, load_session, save_session
from .evaluation import METHODS, AdabnSettings, CalibrationSettings, intra_inter, run_protocol, write_rows
from .pipeline import make_meta, make_replay, make_sessions, make_split, make_stats, protocol_config, train_base
from .replay import capacity_windows, fill_buffer
from .tcn import inject_lora, load_model, save_model

EXIT_RUNTIME, EXIT_MISSING, EXIT_CONFIG = 1, 2, 3

log = logging.getLogger("emgtta")


class MissingArtifact(Exception):
    def __init__(self, path: Path, produced_by: str):
        super().__init__(f"missing {path}; run `emgtta {produced_by}` first")
        self.path, self.produced_by = path, produced_by


# ---------------------------------------------------------------- work directory


class Workdir:
    def __init__(self, root):
        self.root = Path(root)

    data = property(lambda self: self.root / "data")
    manifest = property(lambda self: self.root / "data" / "manifest.json")
    base = property(lambda self: self.root / "model" / "base.npz")
    meta = property(lambda self: self.root / "model" / "meta.npz")
    stats = property(lambda self: self.root / "cache" / "source_stats.npz")
    reports = property(lambda self: self.root / "reports")

    def require(self, path: Path, produced_by: str) -> Path:
        if not path.exists():
            raise MissingArtifact(path, produced_by)
        return path

    def report(self, stem: str, digest: str, suffix: str = ".json") -> Path:
        self.reports.mkdir(parents=True, exist_ok=True)
        return self.reports / f"{stem}-{digest}{suffix}"


def _dump_json(path: Path, doc, run=None) -> Path:
    if run is not None:
        doc = {**doc, "config": run.to_dict(), "config_digest": run.digest()}
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True, allow_nan=True) + "\n", encoding="utf-8")
    return path


def _sessions(wd: Workdir):
    manifest = json.loads(wd.require(wd.manifest, "synth").read_text(encoding="utf-8"))
    rate = manifest["sampling_rate"]
    ids = manifest["session_ids"]
    return [load_session(wd.data / name, rate, sid) for name, sid in zip(manifest["files"], ids)]


def _provenance(path: Path) -> dict:
    from .store import read_npz

    header, _ = read_npz(path)
    return header.get("provenance", {})


# ---------------------------------------------------------------- commands


def cmd_synth(run, wd: Workdir, args) -> list[Path]:
    wd.data.mkdir(parents=True, exist_ok=True)
    sessions = make_sessions(run)
    files = []
    for s in sessions:
        files.append(save_session(s, wd.data / f"s{s.session_id:02d}.csv").name)
    doc = {
        "sampling_rate": run.synth.sampling_rate,
        "files": files,
        "session_ids": [s.session_id for s in sessions],
        "session_digests": [s.digest() for s in sessions],
    }
    return [_dump_json(wd.manifest, doc, run)] + [wd.data / f for f in files]


def cmd_train(run, wd: Workdir, args) -> list[Path]:
    split = make_split(run, _sessions(wd))
    model = train_base(run, split)
    wd.base.parent.mkdir(parents=True, exist_ok=True)
    intra, inter = intra_inter(model, split, run.protocol.vote_seconds)
    out = save_model(model, wd.base, {"config_digest": run.digest(), "seed": run.seed})
    summary = _dump_json(
        wd.report("train", run.digest()),
        {"intra_accuracy": intra, "inter_accuracy": inter, "model_digest": model.digest()},
        run,
    )
    return [out, summary]


def _adapted_base(run, wd: Workdir):
    base = load_model(wd.require(wd.base, "train"))
    return base, inject_lora(base, run.model.lora_rank, run.seed)


def cmd_cache_stats(run, wd: Workdir, args) -> list[Path]:
    split = make_split(run, _sessions(wd))
    base, adapted = _adapted_base(run, wd)
    replay = make_replay(run, base, split)
    stats = make_stats(run, adapted, split, replay)
    wd.stats.parent.mkdir(parents=True, exist_ok=True)
    return [stats.save(wd.stats)]


def cmd_meta_train(run, wd: Workdir, args) -> list[Path]:
    split = make_split(run, _sessions(wd))
    _, adapted = _adapted_base(run, wd)
    curve = wd.report("meta-curve", run.digest())
    model, _ = make_meta(run, adapted, split, curve_path=curve)
    return [save_model(model, wd.meta, {"config_digest": run.digest(), "seed": run.seed}), curve]


def _protocol_inputs(run, wd: Workdir, method: str):
    """(model, stats, replay, provenance) needed to run ``method``."""
    prov = {"base": _provenance(wd.require(wd.base, "train"))}
    stats = replay = None
    if method in ("none", "adabn"):
        model = load_model(wd.base)
    elif method == "meta":
        model = load_model(wd.require(wd.meta, "meta-train"))
        prov["meta"] = _provenance(wd.meta)
    else:
        _, model = _adapted_base(run, wd)
    needs_stats = method.startswith("align-") or (method == "meta" and run.protocol.calibration.der_weight > 0)
    if needs_stats:
        stats = SourceStats.load(wd.require(wd.stats, "cache-stats"))
        replay = stats.exemplars
    return model, stats, replay, prov


def _protocol_report(run, wd, method, stem, **overrides) -> Path:
    split = make_split(run, _sessions(wd))
    model, stats, replay, prov = _protocol_inputs(run, wd, method)
    report = run_protocol(model, split, protocol_config(run, method, **overrides), stats, replay, run.digest())
    doc = report.to_dict()
    doc["inputs"] = prov
    return _dump_json(wd.report(stem, run.digest()), doc, run)


def cmd_adapt(run, wd: Workdir, args) -> list[Path]:
    return [_protocol_report(run, wd, args.method, f"adapt-{args.method}")]


def cmd_eval(run, wd: Workdir, args) -> list[Path]:
    return [_protocol_report(run, wd, "none", "eval")]


def _row(report, *keys):
    agg = report.aggregate()
    return [*keys, agg["current"], agg["other"], agg["base_current"], agg["base_other"]]


RESULT_COLUMNS = ["current", "other", "base_current", "base_other"]


def cmd_report(run, wd: Workdir, args) -> list[Path]:
    """Figure-analogue CSV exports (voted active-gesture accuracy)."""
    split = make_split(run, _sessions(wd))
    base = load_model(wd.require(wd.base, "train"))
    _, adapted = _adapted_base(run, wd)
    stats = SourceStats.load(wd.require(wd.stats, "cache-stats"))
    meta = load_model(wd.require(wd.meta, "meta-train"))
    rp, digest = run.report, run.digest()
    outputs = []

    def evaluate(model, method, stats_=None, replay=None, **overrides):
        return run_protocol(model, split, protocol_config(run, method, **overrides), stats_, replay, digest)

    # buffer size and blend weight for adaptive BN
    rows = []
    for reps in rp.adabn_reps:
        # balanced takes reps bouts of every class, unbalanced reps bouts in total
        for mode in ("balanced", "unbalanced"):
            for alpha in (None, *rp.adabn_alphas):
                s = dataclasses.replace(run.protocol.adabn, alpha=alpha)
                r = evaluate(base, "adabn", reps=reps, mode=mode, adabn=s)
                rows.append(_row(r, reps, mode, "schedule" if alpha is None else alpha))
    outputs.append(write_rows(wd.report("fig2-adabn-buffer", digest, ".csv"), ["reps", "mode", "alpha", *RESULT_COLUMNS], rows))

    # online error trace on the first target session
    stream, others = split.target[0], split.target[1:]
    cadence = max(1, int(round(rp.trace_cadence_s * stream.sampling_rate)))
    a = run.protocol.adabn
    trace = adapt_stream(base, stream, a.speed, cadence, a.horizon, a.alpha, others)
    outputs.append(trace.to_csv(wd.report("fig2-online-trace", digest, ".csv")))

    # statistical alignment variants, with and without replay
    rows = []
    for reps in rp.align_reps:
        for mode, der in (("mom", True), ("cc", True), ("gmm", True), ("gmm", False)):
            align = dataclasses.replace(run.protocol.align, der_weight=run.protocol.align.der_weight if der else 0.0)
            r = evaluate(adapted, f"align-{mode}", stats, stats.exemplars, reps=reps, align=align)
            rows.append(_row(r, reps, mode, int(der)))
    outputs.append(write_rows(wd.report("fig3-align", digest, ".csv"), ["reps", "mode", "der", *RESULT_COLUMNS], rows))

    # few-shot calibration from the meta-trained vs the plain initialization
    rows = []
    for reps in rp.calibration_reps:
        for init, model in (("meta", meta), ("plain", adapted)):
            for der in (0.0, rp.calibration_der_weight):
                c = dataclasses.replace(run.protocol.calibration, der_weight=der)
                r = evaluate(model, "meta", None, stats.exemplars, reps=reps, calibration=c)
                rows.append(_row(r, reps, init, der))
    outputs.append(write_rows(wd.report("fig4-meta", digest, ".csv"), ["reps", "init", "der_weight", *RESULT_COLUMNS], rows))

    # replay buffer capacity for replay-regularized calibration
    rows = []
    for seconds in rp.buffer_seconds:
        cap = capacity_windows(seconds, stream.sampling_rate, base.config.receptive_field)
        replay = fill_buffer(base, split.source_train, cap, run.seed, run.replay.stride)
        der = rp.calibration_der_weight if len(replay) else 0.0
        c = dataclasses.replace(run.protocol.calibration, der_weight=der)
        r = evaluate(meta, "meta", None, replay, calibration=c)
        rows.append(_row(r, seconds, len(replay)))
    outputs.append(write_rows(wd.report("fig5-buffer", digest, ".csv"), ["buffer_seconds", "exemplars", *RESULT_COLUMNS], rows))
    return outputs


def cmd_config(run, wd: Workdir, args) -> list[Path]:
    if args.schema:
        sys.stdout.write(json.dumps(cfgmod.schema(), indent=2, sort_keys=True) + "\n")
    else:
        sys.stdout.write(cfgmod.dump(run))
    return []


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "cache-stats": cmd_cache_stats,
    "adapt": cmd_adapt,
    "meta-train": cmd_meta_train,
    "eval": cmd_eval,
    "report": cmd_report,
    "config": cmd_config,
}


# ---------------------------------------------------------------- argument handling


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help=f"YAML run configuration (default: ${cfgmod.CONFIG_ENV})")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config field, e.g. protocol.reps=3")
    common.add_argument("--seed", type=int, help="run seed (overrides the config)")
    common.add_argument("--workdir", default="run", help="artifact directory (default: ./run)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="emgtta", description="Test-time adaptation for streaming gesture decoding.")
    sub = p.add_subparsers(dest="command", required=True)
    synth = sub.add_parser("synth", parents=[common], help="generate synthetic drifted sessions")
    synth.add_argument("--sessions", type=int)
    synth.add_argument("--classes", type=int)
    synth.add_argument("--reps", type=int)
    synth.add_argument("--drift-gain", type=float)
    synth.add_argument("--drift-offset", type=float)
    synth.add_argument("--drift-rotation", type=float)
    sub.add_parser("train", parents=[common], help="train the source model")
    sub.add_parser("cache-stats", parents=[common], help="cache source feature statistics and exemplars")
    adapt = sub.add_parser("adapt", parents=[common], help="run the adaptation protocol for one method")
    adapt.add_argument("--method", required=True, choices=METHODS)
    sub.add_parser("meta-train", parents=[common], help="meta-train the adapters and backbone")
    sub.add_parser("eval", parents=[common], help="baseline protocol report without adaptation")
    sub.add_parser("report", parents=[common], help="write the figure-analogue CSV exports")
    conf = sub.add_parser("config", parents=[common], help="print the resolved configuration")
    conf.add_argument("--schema", action="store_true", help="print the JSON schema instead")
    return p


SYNTH_FLAGS = {
    "sessions": "synth.sessions",
    "classes": "synth.classes",
    "reps": "synth.reps",
    "drift_gain": "synth.drift_gain",
    "drift_offset": "synth.drift_offset",
    "drift_rotation": "synth.drift_rotation",
}


def resolve_config(args) -> cfgmod.RunConfig:
    overrides = {}
    for item in args.set:
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise cfgmod.ConfigError(item, "overrides must look like key=value")
        overrides[key.strip()] = yaml.safe_load(raw)
    for flag, key in SYNTH_FLAGS.items():
        if getattr(args, flag, None) is not None:
            overrides[key] = getattr(args, flag)
    if args.seed is not None:
        overrides["seed"] = args.seed
    return cfgmod.load(args.config, overrides)


def _fail(code: int, kind: str, message: str, **extra) -> int:
    sys.stderr.write(json.dumps({"error": kind, "message": message, **extra}, sort_keys=True) + "\n")
    return code


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if not args.verbose:
        warnings.simplefilter("ignore", RuntimeWarning)
    try:
        run = resolve_config(args)
    except cfgmod.ConfigError as e:
        return _fail(EXIT_CONFIG, "invalid_config", str(e), field=e.path)
    wd = Workdir(args.workdir)
    try:
        outputs = COMMANDS[args.command](run, wd, args)
    except MissingArtifact as e:
        return _fail(EXIT_MISSING, "missing_prerequisite", str(e), artifact=str(e.path), produced_by=e.produced_by)
    except cfgmod.ConfigError as e:
        return _fail(EXIT_CONFIG, "invalid_config", str(e), field=e.path)
    except (ParseError, DataError) as e:
        return _fail(EXIT_RUNTIME, "data_error", str(e))
    if outputs:
        doc = {"command": args.command, "config_digest": run.digest(), "outputs": [str(p) for p in outputs]}
        sys.stdout.write(json.dumps(doc, sort_keys=True) + "\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())
