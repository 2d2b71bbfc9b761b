"""``caveloco`` command line: calibrate, dataset, train, run, report.

Exit codes: 0 success, 1 runtime error, 2 usage error (bad flags, missing
input files), 3 a quality gate failed. Defaults for any subcommand can come
from a JSON config (``--config`` or ``CAVELOCO_CONFIG``) shaped like
``{"train": {"epochs": 200}, "run": {"sigma": 0.5}}``.
"""
from __future__ import annotations

import argparse
import json
import os
import shutil
import sys
from pathlib import Path

import numpy as np

from .errors import CavelocoError

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, EXIT_GATE = 0, 1, 2, 3
CONFIG_ENV = "CAVELOCO_CONFIG"


class UsageError(Exception):
    pass


def _need_file(path, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} not found: {path}")
    return p


def _layout(path):
    from .geometry import CaveLayout
    return CaveLayout.default() if path is None else CaveLayout.load(_need_file(path, "layout file"))


def _cameras(calibration):
    from .calibration import read_calibration
    from .geometry import default_cameras
    return default_cameras() if calibration is None else read_calibration(_need_file(calibration, "calibration file"))


# ---------------------------------------------------------------------------
# subcommands


def cmd_calibrate(args) -> int:
    from .calibration import (
        calibrate_camera,
        generate_board,
        read_correspondences,
        synthesize_correspondences,
        write_axis_export,
        write_calibration,
        write_correspondences,
    )
    from .geometry import default_cameras

    layout = _layout(args.layout)
    truth = default_cameras(layout)
    board = generate_board(layout, args.markers)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    results, rows = [], []
    for cam in truth:
        if args.correspondences:
            corrs = read_correspondences(_need_file(Path(args.correspondences) / f"camera{cam.id}.txt",
                                                    "correspondence file"))
        else:
            rng = np.random.default_rng([args.seed, cam.id])
            corrs = synthesize_correspondences(cam, board, args.sigma, rng)
            write_correspondences(out / f"camera{cam.id}.txt", corrs)
        res = calibrate_camera(corrs, cam.id, cam.image_size)
        results.append(res)
        rows.append({"camera": cam.id, "rmse_px": res.rmse_px, "max_px": res.max_err_px,
                     "iterations": res.iterations, "points": len(corrs)})
    write_calibration(out / "calibration.json", results)
    write_axis_export(out / "axes.json", [r.camera for r in results])
    (out / "calibration_report.json").write_text(json.dumps({"gate_px": args.gate_px, "cameras": rows},
                                                            indent=1, sort_keys=True) + "\n")
    print(f"{'camera':>6} {'points':>6} {'rmse_px':>10} {'max_px':>10} {'iters':>5}")
    for r in rows:
        print(f"{r['camera']:>6d} {r['points']:>6d} {r['rmse_px']:>10.3e} {r['max_px']:>10.3e} {r['iterations']:>5d}")
    worst = max(r["rmse_px"] for r in rows)
    if worst > args.gate_px:
        print(f"GATE FAILED: worst RMSE {worst:.3f} px > {args.gate_px} px", file=sys.stderr)
        return EXIT_GATE
    return EXIT_OK


def cmd_dataset(args) -> int:
    from .scene import NoiseModel, build_dataset, default_script_set, save_dataset

    specs = default_script_set(args.samples, args.seed, transition_fraction=args.transition_fraction)
    ds = build_dataset(specs, _cameras(args.calibration), NoiseModel(args.sigma), seed=args.seed,
                       reconstruct=not args.ground_truth)
    save_dataset(ds, args.out)
    counts = ", ".join(f"{k.name}={v}" for k, v in ds.class_counts().items())
    print(f"wrote {len(ds.samples)} samples to {args.out} ({counts})")
    return EXIT_OK


def cmd_train(args) -> int:
    from .recognition import TrainParams, train, write_report
    from .scene import load_dataset

    ds = load_dataset(_need_file(args.dataset, "dataset file"))
    params = TrainParams(epochs=args.epochs, learning_rate=args.learning_rate, l2=args.l2, seed=args.seed,
                         hidden=args.hidden)
    model, rep = train(ds, params)
    model.save(args.out)
    if args.report:
        write_report(rep, args.report)
    print(f"trained on {rep.n_train} windows in {rep.seconds:.1f} s; final loss {rep.losses[-1]:.5f}")
    print(f"train accuracy {rep.train_accuracy:.4f}, holdout accuracy {rep.holdout_accuracy:.4f} "
          f"({rep.n_holdout} clips)")
    print(rep.confusion_text())
    if rep.holdout_accuracy < args.min_accuracy:
        print(f"GATE FAILED: holdout accuracy below {args.min_accuracy}", file=sys.stderr)
        return EXIT_GATE
    return EXIT_OK


def _parse_inject(items) -> dict:
    out = {}
    for it in items or []:
        name, _, ms = it.partition("=")
        if not ms:
            raise UsageError(f"--inject expects stage=ms, got {it!r}")
        out[name] = float(ms)
    return out


def cmd_run(args) -> int:
    from .pipeline import (
        STAGES,
        Pipeline,
        emitted_timeline,
        label_changes,
        script_boundaries,
        timeline_matches,
        write_run,
    )
    from .recognition import ClassifierModel
    from .scene import NoiseModel, default_scenario
    from .transport import default_port

    model = ClassifierModel.load(_need_file(args.model, "model file"))
    cameras = _cameras(args.calibration)
    inject = _parse_inject(args.inject)
    unknown = set(inject) - set(STAGES)
    if unknown:
        raise UsageError(f"unknown stage(s) {sorted(unknown)}; choose from {STAGES}")
    script = default_scenario(NoiseModel(args.sigma), seed=args.seed, yaw=args.yaw)
    port = None
    if args.udp:
        port = default_port() if args.port is None else args.port
    pipe = Pipeline(cameras, model, realtime=args.realtime, speed_mps=args.speed, udp_port=port, inject_ms=inject)
    res = pipe.run(script)
    out = write_run(res, args.out, script, {"seed": args.seed, "sigma": args.sigma, "yaw": args.yaw,
                                            "realtime": args.realtime, "speed_mps": args.speed,
                                            "inject_ms": inject})
    if args.calibration:
        shutil.copyfile(args.calibration, out / "calibration.json")
    timeline = emitted_timeline(res)
    ok = timeline_matches(timeline, script_boundaries(script))
    changes = ", ".join(f"{t:.3f}s->{n}" for t, n in ((t, _label_name(lab)) for t, lab in label_changes(timeline)))
    print(f"processed {len(res.processed)}/{res.n_frames} frames, {res.throughput_fps:.1f} fps, "
          f"dropped {sum(res.dropped.values())}")
    print(f"label changes: {changes or 'none'}")
    print(f"timeline within 250 ms of script: {'yes' if ok else 'no'}; final target fps {pipe.rate.target}")
    print(f"logs in {out}")
    if args.check and not ok:
        return EXIT_GATE
    return EXIT_OK


def _label_name(code: int) -> str:
    from .skeleton import ActionLabel
    return ActionLabel(code).name


def cmd_report(args) -> int:
    from .report import build_report, format_report

    rep = build_report(args.run_dir)
    text = format_report(rep)
    Path(args.run_dir, "report.json").write_text(json.dumps(rep, indent=1, sort_keys=True) + "\n")
    Path(args.run_dir, "report.txt").write_text(text)
    print(json.dumps(rep, indent=1, sort_keys=True) if args.json else text, end="" if not args.json else "\n")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="caveloco", description=__doc__.splitlines()[0])
    p.add_argument("--config", help=f"JSON file with per-subcommand defaults (env {CONFIG_ENV})")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    c = sub.add_parser("calibrate", help="solve the four cameras from fiducial correspondences")
    c.add_argument("--layout", help="CAVE layout JSON (default: 4 m cube)")
    c.add_argument("--correspondences", help="directory of cameraN.txt files instead of synthesising")
    c.add_argument("--sigma", type=float, default=0.0, help="pixel noise for synthesised corners")
    c.add_argument("--markers", type=int, default=4, help="markers per screen")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--gate-px", type=float, default=1.0, help="fail when any camera RMSE exceeds this")
    c.add_argument("--out", default="calib")
    c.set_defaults(func=cmd_calibrate)

    d = sub.add_parser("dataset", help="render, observe and reconstruct the labelled clip set")
    d.add_argument("--samples", type=int, default=2000)
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--sigma", type=float, default=0.5)
    d.add_argument("--transition-fraction", type=float, default=1.0)
    d.add_argument("--calibration", help="calibration.json (default: the nominal rig)")
    d.add_argument("--ground-truth", action="store_true", help="store true joints instead of triangulated ones")
    d.add_argument("--out", default="dataset.txt.gz")
    d.set_defaults(func=cmd_dataset)

    t = sub.add_parser("train", help="fit the action classifier")
    t.add_argument("--dataset", default="dataset.txt.gz")
    t.add_argument("--out", default="model.json")
    t.add_argument("--report", help="write the training report JSON here")
    t.add_argument("--epochs", type=int, default=300)
    t.add_argument("--learning-rate", type=float, default=0.5)
    t.add_argument("--l2", type=float, default=1e-4)
    t.add_argument("--hidden", type=int, default=32, help="hidden units (0: linear softmax)")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--min-accuracy", type=float, default=0.95, help="holdout accuracy gate")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("run", help="run the scripted scenario through the live pipeline")
    r.add_argument("--model", default="model.json")
    r.add_argument("--calibration", help="calibration.json (default: the nominal rig)")
    r.add_argument("--sigma", type=float, default=0.5)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--yaw", type=float, default=0.0, help="body yaw of the scripted person, radians")
    r.add_argument("--speed", type=float, default=1.0, help="virtual walking speed, m/s")
    r.add_argument("--realtime", action="store_true", help="pace at the target fps with drop-oldest queues")
    r.add_argument("--udp", action="store_true", help="send commands over loopback UDP")
    r.add_argument("--port", type=int, help="UDP port (default 47474 or CAVELOCO_PORT)")
    r.add_argument("--inject", action="append", metavar="STAGE=MS", help="add latency to a stage")
    r.add_argument("--check", action="store_true", help="exit 3 unless the label timeline matches the script")
    r.add_argument("--out", default="run")
    r.set_defaults(func=cmd_run)

    s = sub.add_parser("report", help="summarise a run directory")
    s.add_argument("run_dir")
    s.add_argument("--json", action="store_true", help="print JSON instead of text")
    s.set_defaults(func=cmd_report)
    return p


def _apply_config(parser, argv) -> None:
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    path = known.config or os.environ.get(CONFIG_ENV)
    if not path:
        return
    cfg = json.loads(_need_file(path, "config file").read_text())
    subs = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    for name, defaults in cfg.items():
        if name in subs.choices:
            subs.choices[name].set_defaults(**{k.replace("-", "_"): v for k, v in defaults.items()})


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        _apply_config(parser, argv)
        args = parser.parse_args(argv)
        return args.func(args)
    except SystemExit as e:
        return int(e.code) if isinstance(e.code, int) else EXIT_USAGE
    except UsageError as e:
        print(f"caveloco: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (CavelocoError, OSError, ValueError, KeyError) as e:
        print(f"caveloco: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    raise SystemExit(main())
