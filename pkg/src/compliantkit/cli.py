"""Command line entry point: ``compliantkit {calibrate,log,sim} ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys

import numpy as np

from . import calibration as cal
from .config import ConfigError, load_config
from .stream_sync import (LogFormatError, SessionLog, align_resample, describe,
                          export_csv, read_log, write_log)


def _config(args):
    return load_config(args.config)


# -- calibrate ---------------------------------------------------------------

def cmd_calibrate_synth(args):
    ds = cal.generate_synthetic_dataset(args.seed, args.samples, args.noise,
                                        channels=args.channels)
    cal.save_dataset(ds, args.out)
    print(f"wrote {args.samples} samples ({args.channels} channels, "
          f"noise {args.noise} N) to {args.out}")


def cmd_calibrate_train(args):
    cfg = _config(args).training
    if args.epochs is not None:
        cfg = cal.TrainingConfig(**{**vars(cfg), "epochs": args.epochs})
    ds = cal.load_dataset(args.data)

    def progress(epoch, tr, va):
        if epoch % max(1, cfg.epochs // 10) == 0 or epoch == cfg.epochs:
            print(f"epoch {epoch:5d}  train {tr:.4e}  val {va:.4e}", flush=True)

    res = cal.train_calibration(ds, cfg, progress if not args.quiet else None)
    cal.save_model(res.model, args.out)
    print(f"best epoch {res.best_epoch}; model written to {args.out}")
    if (ds.split == cal.SPLITS.index("test")).any():
        print(cal.evaluate(res.model, ds).format())


def cmd_calibrate_eval(args):
    model = cal.load_model(args.model)
    ds = cal.load_dataset(args.data)
    split = args.split
    if split != "all" and not (ds.split == cal.SPLITS.index(split)).any():
        print(f"split {split!r} is empty; evaluating all samples", file=sys.stderr)
        split = "all"
    if split == "all":
        rep = cal.evaluate_predictions(cal.predict_batch(model, ds.capacitance), ds.wrench)
    else:
        rep = cal.evaluate(model, ds, split)
    if args.json:
        print(json.dumps({"n": rep.n, "mse": rep.mse, "rmse": rep.rmse}, indent=2))
    else:
        print(rep.format())


# -- log ---------------------------------------------------------------------

def cmd_log_info(args):
    log = read_log(args.path, strict=False)
    print(describe(log))
    if getattr(log, "damaged_at", None) is not None:
        print(f"warning: damaged tail at byte {log.damaged_at}")


def cmd_log_export(args):
    export_csv(read_log(args.path, strict=not args.lenient), args.stream, args.out)


def cmd_log_resample(args):
    src = read_log(args.path, strict=not args.lenient)
    streams = args.streams or list(src.streams)
    table = align_resample(src, streams, args.rate, args.method, args.span)
    out = SessionLog(f"{src.session_id}-resampled", src.epoch_ns,
                     {**src.meta, "resampled_from": src.session_id,
                      "method": args.method, "rate": args.rate})
    t = np.round(table.times_ns).astype(np.uint64)
    for name in streams:
        spec = src.streams[name]
        out.add_stream(name, args.rate, spec.arity, 0, spec.columns)
        out.extend(name, t, table.values[name])
    write_log(out, args.out)
    print(f"resampled {len(streams)} streams to {args.rate} Hz "
          f"({len(t)} rows) -> {args.out}")


# -- sim ---------------------------------------------------------------------

def cmd_sim_list(args):
    from .sim import Scenario
    cfg = _config(args)
    for name in sorted(cfg.scenarios):
        scn = Scenario.from_dict(name, cfg.scenarios[name])
        kinds = ", ".join(c.kind for c in scn.contacts)
        print(f"{name:<10} policy={scn.policy:<7} duration={scn.duration:g}s  [{kinds}]")


def cmd_sim_run(args):
    from .sim import load_scenario, run_scenario
    cfg = _config(args)
    scn = load_scenario(args.scenario, cfg, args.seed)
    run = run_scenario(scn, cfg)
    if args.out:
        write_log(run.trace, args.out)
    print(run.report.to_json() if args.json else run.report.text())
    return 0 if run.report.passed else 1


def cmd_sim_report(args):
    from .sim import metrics_report
    rep = metrics_report(read_log(args.trace))
    print(rep.to_json() if args.json else rep.text())
    return 0 if rep.passed else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="compliantkit")
    p.add_argument("--config", help="YAML file merged over the packaged defaults")
    p.add_argument("-v", "--verbose", action="store_true")
    top = p.add_subparsers(dest="group", required=True)

    c = top.add_parser("calibrate", help="capacitance -> wrench calibration").add_subparsers(
        dest="cmd", required=True)
    s = c.add_parser("synth", help="generate a synthetic calibration dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--samples", type=int, default=20000)
    s.add_argument("--noise", type=float, default=0.0, help="noise sd in newtons")
    s.add_argument("--channels", type=int, default=8)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_calibrate_synth)
    s = c.add_parser("train", help="train a model on a dataset log")
    s.add_argument("data")
    s.add_argument("--out", required=True)
    s.add_argument("--epochs", type=int)
    s.add_argument("--quiet", action="store_true")
    s.set_defaults(func=cmd_calibrate_train)
    s = c.add_parser("eval", help="per-axis error of a model on a dataset")
    s.add_argument("model")
    s.add_argument("data")
    s.add_argument("--split", default="test", choices=cal.SPLITS + ("all",))
    s.add_argument("--json", action="store_true")
    s.set_defaults(func=cmd_calibrate_eval)

    g = top.add_parser("log", help="inspect and convert session logs").add_subparsers(
        dest="cmd", required=True)
    s = g.add_parser("info")
    s.add_argument("path")
    s.set_defaults(func=cmd_log_info)
    s = g.add_parser("export-csv")
    s.add_argument("path")
    s.add_argument("--stream", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--lenient", action="store_true", help="keep records before a damaged tail")
    s.set_defaults(func=cmd_log_export)
    s = g.add_parser("resample")
    s.add_argument("path")
    s.add_argument("--rate", type=float, required=True)
    s.add_argument("--streams", nargs="+")
    s.add_argument("--method", default="linear", choices=("linear", "zoh"))
    s.add_argument("--span", default="overlap", choices=("overlap", "union"))
    s.add_argument("--out", required=True)
    s.add_argument("--lenient", action="store_true")
    s.set_defaults(func=cmd_log_resample)

    m = top.add_parser("sim", help="closed-loop scenarios").add_subparsers(
        dest="cmd", required=True)
    s = m.add_parser("list")
    s.set_defaults(func=cmd_sim_list)
    s = m.add_parser("run")
    s.add_argument("--scenario", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--out")
    s.add_argument("--json", action="store_true")
    s.set_defaults(func=cmd_sim_run)
    s = m.add_parser("report")
    s.add_argument("trace")
    s.add_argument("--json", action="store_true")
    s.set_defaults(func=cmd_sim_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args) or 0
    except (ConfigError, LogFormatError, ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
