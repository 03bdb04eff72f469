"""Command-line entry point: ``acfilter <command> [options]``.

Commands write JSON reports (and CSV tables where there is a table) into a
run directory chosen by ``--out``, else ``$ACFILTER_OUT``, else the config's
``out`` entry, else ``./acfilter-run``.  One command at a time may write a
run directory; a lock file guards it.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import asdict, replace
from pathlib import Path

from acfilter import kernels
from acfilter.ac_trainer import AC_SCHEMA, new_ac_model, train_ac
from acfilter.click_trainer import CLICK_SCHEMA, MODES, serve_snapshot
from acfilter.evaluator import dwell_analysis, default_bin_edges, evaluate, logloss_lift, threshold_sweep
from acfilter.events import iter_event_log, read_log_header, write_event_log
from acfilter.model import ModelError, ModelSnapshot, apply_downsampling_correction
from acfilter.persistence import load_model, save_model
from acfilter.pipeline import RunConfig, simulated_source, train_pipeline
from acfilter.simulator import GroundTruthWorld, OracleSnapshot, build_world, iter_events, simulate_serving

log = logging.getLogger("acfilter")

OUT_ENV = "ACFILTER_OUT"
DEFAULT_OUT = "acfilter-run"
LOCK_NAME = ".acfilter.lock"


class CliError(Exception):
    pass


# ---------------------------------------------------------------- run directory


class RunLock:
    """Exclusive ownership of a run directory for the duration of one command."""

    def __init__(self, out: Path):
        self.path = out / LOCK_NAME

    def __enter__(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise CliError(f"run directory {self.path.parent} is locked ({self.path} exists)") from None
        with os.fdopen(fd, "w") as fh:
            fh.write(f"{os.getpid()}\n")
        return self

    def __exit__(self, *exc):
        self.path.unlink(missing_ok=True)


def resolve_out(args, rc: RunConfig | None) -> Path:
    if getattr(args, "out", None):
        return Path(args.out)
    if os.environ.get(OUT_ENV):
        return Path(os.environ[OUT_ENV])
    if rc is not None and rc.out:
        return Path(rc.out)
    return Path(DEFAULT_OUT)


def write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n", encoding="utf-8")


def write_csv(path: Path, rows: list[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        if not rows:
            return
        cols = list(rows[0])
        for r in rows[1:]:
            cols += [k for k in r if k not in cols]
        w = csv.DictWriter(fh, fieldnames=cols, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: _csv_value(r.get(k)) for k in cols})


def _csv_value(v):
    if isinstance(v, float):
        return repr(v)
    return "" if v is None else v


def file_digest(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


# ---------------------------------------------------------------- config


def load_config(args) -> RunConfig:
    rc = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    over = {}
    if getattr(args, "seed", None) is not None:
        over["seed"] = args.seed
        over["world"] = replace(rc.world, seed=args.seed)
    for flag, key in (("tau", "tau_ac_s"), ("downsample", "downsample_R"), ("period", "period"),
                      ("filter", "eval_filter")):
        if getattr(args, flag, None) is not None:
            over[key] = getattr(args, flag)
    for flag, key in (("n_train", "n_train"), ("n_holdout", "n_holdout")):
        if getattr(args, flag, None) is not None:
            over[key] = getattr(args, flag)
    return rc.with_overrides(**over)


def archive_config(out: Path, rc: RunConfig) -> None:
    # the output location is not part of what a run computes
    write_json(out / "config.json", replace(rc, out=None).to_dict())


def _log_source(path, rc: RunConfig):
    header = read_log_header(path)
    return header, (lambda: iter_event_log(path, rc.chunk_size))


def _serving(model):
    """Serving snapshot of a loaded model file (down-sampling corrected from its metadata)."""
    if isinstance(model, ModelSnapshot):
        return model
    R = float(model.meta.get("downsample_R", 1.0))
    return apply_downsampling_correction(model, R) if R > 1.0 else model.snapshot()


def _named_paths(specs: list[str]) -> dict[str, str]:
    out = {}
    for spec in specs:
        name, sep, path = spec.partition("=")
        if not sep:
            path = spec
            name = Path(spec).stem.removeprefix("snapshot-").removeprefix("model-")
        if name in out:
            raise CliError(f"duplicate model name {name!r}")
        out[name] = path
    return out


# ---------------------------------------------------------------- commands


def cmd_simulate(args) -> dict:
    rc = load_config(args)
    out = resolve_out(args, rc)
    with RunLock(out):
        world = build_world(rc.world)
        (out / "world.json").write_text(world.to_json() + "\n", encoding="utf-8")
        layout = world.event_layout()
        meta = {"seed": rc.seed, "world_seed": rc.world.seed}
        n_train = write_event_log(out / "train.jsonl", iter_events(world, rc.n_train, rc.seed, 0, rc.chunk_size),
                                  layout, {**meta, "first_id": 0})
        n_hold = write_event_log(out / "holdout.jsonl",
                                 iter_events(world, rc.n_holdout, rc.seed, rc.n_train, rc.chunk_size),
                                 layout, {**meta, "first_id": rc.n_train})
        archive_config(out, rc)
        report = {
            "n_train": n_train,
            "n_holdout": n_hold,
            "digests": {name: file_digest(out / name) for name in ("world.json", "train.jsonl", "holdout.jsonl")},
        }
        write_json(out / "simulate.json", report)
    return report


def cmd_train(args) -> dict:
    rc = load_config(args)
    out = resolve_out(args, rc)
    log_path = Path(args.log or out / "train.jsonl")
    header, source = _log_source(log_path, rc)
    mode = args.mode
    with RunLock(out):
        archive_config(out, rc)
        if mode == "ac":
            AC_SCHEMA.check_layout(header["layout"])
            model, counters = train_ac(new_ac_model(rc.ac_config()), source, rc.ac_config())
            save_model(model, out / "model-ac.acfm")
            report = {"mode": "ac", "counters": counters.to_dict(), "digest": model.digest()}
            write_json(out / "train-ac.json", report)
            return report
        CLICK_SCHEMA.check_layout(header["layout"])
        ac_model = None
        if mode == "unbiased":
            AC_SCHEMA.check_layout(header["layout"])
            if args.ac_model:
                ac_model = load_model(args.ac_model)
                if ac_model.schema.digest() != AC_SCHEMA.digest():
                    raise CliError(f"{args.ac_model}: not an AC model (schema digest mismatch)")
                r_ac = float(ac_model.meta.get("downsample_R", rc.downsample_R))
                if r_ac != rc.downsample_R:
                    raise CliError(f"AC model was trained with R={r_ac}, click model uses R={rc.downsample_R}")
        elif args.ac_model:
            raise CliError(f"mode {mode} does not use an AC model")
        res = train_pipeline(source, rc, [mode], ac_model=ac_model)
        model = res.models[mode]
        save_model(model, out / f"model-{mode}.acfm")
        save_model(serve_snapshot(model, rc.click_config(mode)), out / f"snapshot-{mode}.acfm")
        if res.ac_counters is not None:
            save_model(res.ac_model, out / "model-ac.acfm")
        c = res.counters[mode]
        report = {
            "mode": mode,
            "counters": c.to_dict(),
            "trained_identity_holds": c.n_ic + c.n_ac + c.n_unknown + c.n_skips_kept == c.n_trained,
            "digest": model.digest(),
        }
        if res.ac_counters is not None:
            report["ac_counters"] = res.ac_counters.to_dict()
            report["ac_digest"] = res.ac_model.digest()
        write_json(out / f"train-{mode}.json", report)
    return report


def _eval_reports(snapshots: dict, holdout, filt, baseline: str | None) -> dict:
    reports = {name: evaluate(s, holdout, filt) for name, s in snapshots.items()}
    result = {"filter": filt, "models": {n: r.to_dict() for n, r in reports.items()}, "lifts": {}}
    if baseline is not None:
        if baseline not in reports:
            raise CliError(f"baseline {baseline!r} is not among the evaluated models")
        for name, r in reports.items():
            if name != baseline:
                result["lifts"][f"{name}_vs_{baseline}"] = logloss_lift(r, reports[baseline])
    rows = []
    for name, r in reports.items():
        rows += [{"model": name, **row} for row in r.csv_rows()]
    return result, rows


def cmd_evaluate(args) -> dict:
    rc = load_config(args)
    out = resolve_out(args, rc)
    log_path = Path(args.log or out / "holdout.jsonl")
    header, source = _log_source(log_path, rc)
    paths = _named_paths(args.model or [])
    if not paths:
        paths = {m: str(out / f"snapshot-{m}.acfm") for m in MODES if (out / f"snapshot-{m}.acfm").exists()}
    if not paths:
        raise CliError("no models to evaluate (use --model)")
    snaps = {}
    for name, path in paths.items():
        snap = _serving(load_model(path))
        snap.schema.check_layout(header["layout"])
        snaps[name] = snap
    baseline = args.baseline or ("agnostic" if "agnostic" in snaps and len(snaps) > 1 else None)
    with RunLock(out):
        result, rows = _eval_reports(snaps, source, rc.eval_filter, baseline)
        write_json(out / "evaluate.json", result)
        write_csv(out / "evaluate.csv", rows)
    return result


def _dwell(rc: RunConfig, source, slices):
    d = rc.dwell
    return dwell_analysis(source, default_bin_edges(d.bin_width, d.max_finite), d.thresholds, slices)


def cmd_dwell(args) -> dict:
    rc = load_config(args)
    out = resolve_out(args, rc)
    _, source = _log_source(Path(args.log or out / "train.jsonl"), rc)
    slices = args.slices.split(",") if args.slices is not None else rc.dwell.slices
    slices = [s for s in slices if s]
    if args.thresholds:
        rc = replace(rc, dwell=replace(rc.dwell, thresholds=_floats(args.thresholds)))
    with RunLock(out):
        rep = _dwell(rc, source, slices)
        write_json(out / "dwell.json", rep.to_dict())
        write_csv(out / "dwell_pmf.csv", rep.pmf_rows())
        write_csv(out / "dwell_shares.csv", rep.share_rows())
    return rep.to_dict()


def _floats(text: str) -> list[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise CliError(f"expected comma-separated numbers, got {text!r}") from None


def cmd_sweep(args) -> dict:
    rc = load_config(args)
    out = resolve_out(args, rc)
    grid = _floats(args.taus) if args.taus else rc.tau_grid
    if args.log:
        header, train = _log_source(Path(args.log), rc)
        CLICK_SCHEMA.check_layout(header["layout"])
        if not args.holdout:
            raise CliError("--holdout is required together with --log")
        _, hold = _log_source(Path(args.holdout), rc)
    else:
        train, hold = simulated_source(rc)
    with RunLock(out):
        archive_config(out, rc)
        rows = threshold_sweep(train, hold, grid, rc)
        table = [asdict(r) for r in rows]
        best = next(r for r in rows if r.argmax)
        report = {"filter": rc.eval_filter, "rows": table, "argmax_tau": best.tau_ac_s}
        write_json(out / "sweep.json", report)
        write_csv(out / "sweep.csv", table)
    return report


def _serve(world, snaps: dict, rc: RunConfig, oracle: bool, n_auctions=None, k=None) -> dict:
    snaps = dict(snaps)
    if oracle:
        snaps["oracle"] = OracleSnapshot(world)
    return simulate_serving(world, snaps, n_auctions or rc.serving.n_auctions, k or rc.serving.k, seed=rc.seed)


def _serve_rows(report: dict) -> list[dict]:
    return [{"mode": m, **v} for m, v in report["modes"].items()]


def cmd_serve_sim(args) -> dict:
    rc = load_config(args)
    out = resolve_out(args, rc)
    world_path = Path(args.world or out / "world.json")
    world = GroundTruthWorld.from_json(world_path.read_text(encoding="utf-8")) if world_path.exists() else None
    if world is None:
        if args.world:
            raise CliError(f"{world_path}: no such world file")
        world = build_world(rc.world)
    paths = _named_paths(args.model or [])
    if not paths:
        paths = {m: str(out / f"snapshot-{m}.acfm") for m in MODES if (out / f"snapshot-{m}.acfm").exists()}
    snaps = {name: _serving(load_model(p)) for name, p in paths.items()}
    oracle = rc.serving.oracle if args.oracle is None else args.oracle
    if not snaps and not oracle:
        raise CliError("no snapshots to serve (use --model)")
    with RunLock(out):
        report = _serve(world, snaps, rc, oracle, args.n_auctions, args.k)
        write_json(out / "serve.json", report)
        write_csv(out / "serve.csv", _serve_rows(report))
    return report


def cmd_experiment(args) -> dict:
    """Simulate, train every mode, evaluate, analyse dwell, serve; optionally sweep."""
    rc = load_config(args)
    out = resolve_out(args, rc)
    with RunLock(out):
        archive_config(out, rc)
        t0 = time.perf_counter()
        world = build_world(rc.world)
        (out / "world.json").write_text(world.to_json() + "\n", encoding="utf-8")
        train, hold = simulated_source(rc, world)
        if args.write_logs:
            layout = world.event_layout()
            write_event_log(out / "train.jsonl", train(), layout, {"seed": rc.seed, "first_id": 0})
            write_event_log(out / "holdout.jsonl", hold(), layout, {"seed": rc.seed, "first_id": rc.n_train})
        log.info("world ready (%.1fs)", time.perf_counter() - t0)
        res = train_pipeline(train, rc)
        for mode, model in res.models.items():
            save_model(model, out / f"model-{mode}.acfm")
            save_model(serve_snapshot(model, rc.click_config(mode)), out / f"snapshot-{mode}.acfm")
        if res.ac_model is not None:
            save_model(res.ac_model, out / "model-ac.acfm")
        write_json(out / "train.json", res.report())
        log.info("trained %s (%.1fs)", ", ".join(res.models), time.perf_counter() - t0)
        snaps = res.snapshots(rc)
        baseline = "agnostic" if "agnostic" in snaps else None
        ev, rows = _eval_reports(snaps, hold, rc.eval_filter, baseline)
        ev_all, rows_all = _eval_reports(snaps, hold, None, baseline)
        write_json(out / "evaluate.json", {"filtered": ev, "all": ev_all})
        write_csv(out / "evaluate.csv", [{"scope": "filtered", **r} for r in rows] + [{"scope": "all", **r} for r in rows_all])
        dw = _dwell(rc, train, rc.dwell.slices)
        write_json(out / "dwell.json", dw.to_dict())
        write_csv(out / "dwell_pmf.csv", dw.pmf_rows())
        write_csv(out / "dwell_shares.csv", dw.share_rows())
        serve = _serve(world, snaps, rc, rc.serving.oracle)
        write_json(out / "serve.json", serve)
        write_csv(out / "serve.csv", _serve_rows(serve))
        log.info("evaluated and served (%.1fs)", time.perf_counter() - t0)
        summary = {
            "calibration_ratio": {m: r["calibration_ratio"] for m, r in ev_all["models"].items()},
            "logloss_filtered": {m: r["logloss_mean"] for m, r in ev["models"].items()},
            "logloss_lift_filtered": ev["lifts"],
            "cpm": {m: v["cpm"] for m, v in serve["modes"].items()},
            "cpm_lift": serve["lifts"],
            "ac_share_at_tau": dw.ac_share_at.get(repr(float(rc.tau_ac_s))),
        }
        if args.sweep:
            rows = threshold_sweep(train, hold, rc.tau_grid, rc)
            table = [asdict(r) for r in rows]
            write_json(out / "sweep.json", {"filter": rc.eval_filter, "rows": table,
                                            "argmax_tau": next(r.tau_ac_s for r in rows if r.argmax)})
            write_csv(out / "sweep.csv", table)
            summary["argmax_tau"] = next(r.tau_ac_s for r in rows if r.argmax)
        write_json(out / "summary.json", summary)
        log.info("done (%.1fs)", time.perf_counter() - t0)
    return summary


# ---------------------------------------------------------------- parser


def _positive_float(text: str) -> float:
    v = float(text)
    if not v > 0:
        raise argparse.ArgumentTypeError("must be > 0")
    return v


def _downsample(text: str) -> float:
    v = float(text)
    if not v >= 1.0:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="acfilter", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="progress logging on stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, tau=False, train=False, filt=False):
        sp.add_argument("--config", metavar="PATH", help="run configuration (YAML or JSON)")
        sp.add_argument("--seed", type=int, metavar="INT", help="overrides the config seed (events, sampling, world)")
        sp.add_argument("--out", metavar="DIR", help=f"run directory (else ${OUT_ENV}, else config)")
        if tau:
            sp.add_argument("--tau", type=_positive_float, metavar="SECONDS", help="AC dwell-time threshold")
        if train:
            sp.add_argument("--downsample", type=_downsample, metavar="R", help="keep skips with probability 1/R")
            sp.add_argument("--period", type=_positive_int, metavar="N_EVENTS",
                            help="alternate AC and click training every N events")
        if filt:
            sp.add_argument("--filter", metavar="EXPR", help='evaluation filter, e.g. "dwell_logged=false"')

    sp = sub.add_parser("simulate", help="build a world and write train/holdout event logs")
    common(sp)
    sp.add_argument("--n-train", type=int, metavar="N")
    sp.add_argument("--n-holdout", type=int, metavar="N")
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("train", help="train one click model (or the AC model) from an event log")
    common(sp, tau=True, train=True)
    sp.add_argument("--mode", required=True, choices=MODES + ("ac",))
    sp.add_argument("--log", metavar="PATH", help="event log (default: <out>/train.jsonl)")
    sp.add_argument("--ac-model", metavar="PATH", help="pre-trained AC model for unbiased mode")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("evaluate", help="LogLoss and calibration of model snapshots on a holdout log")
    common(sp, filt=True)
    sp.add_argument("--log", metavar="PATH", help="holdout log (default: <out>/holdout.jsonl)")
    sp.add_argument("--model", action="append", metavar="[NAME=]PATH")
    sp.add_argument("--baseline", metavar="NAME", help="model the lifts are relative to")
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("dwell", help="dwell-time PMFs and AC shares of a log")
    common(sp)
    sp.add_argument("--log", metavar="PATH", help="event log (default: <out>/train.jsonl)")
    sp.add_argument("--slices", metavar="A,B", help="comma-separated slice attributes")
    sp.add_argument("--thresholds", metavar="T1,T2", help="comma-separated thresholds in seconds")
    sp.set_defaults(func=cmd_dwell)

    sp = sub.add_parser("sweep", help="threshold grid search: unbiased vs agnostic lift per tau")
    common(sp, train=True, filt=True)
    sp.add_argument("--taus", metavar="T1,T2", help="comma-separated thresholds (default: config tau_grid)")
    sp.add_argument("--log", metavar="PATH", help="training log (default: simulate from config)")
    sp.add_argument("--holdout", metavar="PATH", help="holdout log, required with --log")
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("serve-sim", help="simulated auctions ranking by bid x pCTR per snapshot")
    common(sp)
    sp.add_argument("--world", metavar="PATH", help="world file (default: <out>/world.json or build from config)")
    sp.add_argument("--model", action="append", metavar="[NAME=]PATH")
    sp.add_argument("--n-auctions", type=_positive_int, metavar="N")
    sp.add_argument("--k", type=_positive_int, metavar="K", help="candidates per auction")
    sp.add_argument("--oracle", dest="oracle", action="store_true", default=None, help="add the ground-truth snapshot")
    sp.add_argument("--no-oracle", dest="oracle", action="store_false")
    sp.set_defaults(func=cmd_serve_sim)

    sp = sub.add_parser("experiment", help="end-to-end: simulate, train all modes, evaluate, dwell, serve")
    common(sp, tau=True, train=True, filt=True)
    sp.add_argument("--n-train", type=int, metavar="N")
    sp.add_argument("--n-holdout", type=int, metavar="N")
    sp.add_argument("--sweep", action="store_true", help="also run the threshold sweep")
    sp.add_argument("--write-logs", action="store_true", help="also write the train/holdout event logs")
    sp.set_defaults(func=cmd_experiment)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    log.info("kernel backend: %s", kernels.BACKEND)
    try:
        result = args.func(args)
    except (CliError, ModelError, ValueError, OSError, KeyError) as exc:
        print(f"acfilter: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - any failure must give a nonzero exit
        log.debug("unexpected failure", exc_info=True)
        print(f"acfilter: internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    if args.verbose:
        json.dump(result, sys.stderr, indent=2, sort_keys=True, default=str)
        sys.stderr.write("\n")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
