"""Command-line entry point: ``eulerflow generate|fit|flow|track|eval``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path


from . import io, plotting
from .config import FIELDS, RunConfig
from .evaluate import evaluate_sequence
from .ode import extract_flow, extract_trajectory
from .scenegen import KINDS, SceneSpec, generate
from .train import TrainingDiverged, fit, load_checkpoint, save_checkpoint

log = logging.getLogger("eulerflow")

RUN_CONFIG_NAME = "run_config.txt"

# CLI flag -> RunConfig key
_SHARED = {
    "seed": "seed",
    "depth": "depth",
    "width": "width",
    "output_gain": "output_gain",
    "window": "window",
    "alpha": "alpha",
    "truncation": "truncation",
    "no_multi_k": "no_multi_k",
    "no_cycle": "no_cycle",
    "max_points": "max_points",
    "lr": "lr",
    "epochs": "epochs",
    "patience": "patience",
    "min_delta": "min_delta",
    "dynamic_threshold": "dynamic_threshold",
}


class CommandError(Exception):
    pass


def _shared_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("run configuration (defaults in parentheses)")
    g.add_argument("--config", type=Path, help="key=value file; flags given on the command line win")
    for flag, key in _SHARED.items():
        kind, default = FIELDS[key]
        name = "--" + flag.replace("_", "-")
        if kind is bool:
            g.add_argument(name, action="store_true", default=None, help=f"({default})")
        else:
            g.add_argument(name, type=kind, default=None, help=f"({default})")
    return p


def _resolve(args) -> RunConfig:
    cfg = RunConfig.from_file(args.config) if args.config else RunConfig()
    cli = {key: getattr(args, flag) for flag, key in _SHARED.items() if getattr(args, flag) is not None}
    cfg.update_checked(cli)
    return cfg


def build_parser() -> argparse.ArgumentParser:
    shared = _shared_parser()
    parser = argparse.ArgumentParser(prog="eulerflow", description="Scene flow via a neural ODE fitted to a point-cloud sequence.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", parents=[shared], help="write a synthetic sequence")
    g.add_argument("--kind", choices=KINDS, default="translate")
    g.add_argument("--frames", type=int, default=20)
    g.add_argument("--speed", type=float, default=0.5, help="metres per frame")
    g.add_argument("--points-per-object", type=int, default=SceneSpec.points_per_object)
    g.add_argument("--background-points", type=int, default=SceneSpec.background_points)
    g.add_argument("--orbit-radius", type=float, default=2.0)
    g.add_argument("--occlusion", type=int, nargs=2, metavar=("FIRST", "LAST"), default=SceneSpec.occlusion_window)
    g.add_argument("--noise", type=float, default=SceneSpec.noise_sigma, help="position noise sigma, metres")
    g.add_argument("--frame-interval", type=float, default=0.1, help="seconds")
    g.add_argument("--name", default=None)
    g.add_argument("out_dir", type=Path)

    f = sub.add_parser("fit", parents=[shared], help="fit the flow prior to a sequence")
    f.add_argument("seq_dir", type=Path)
    f.add_argument("checkpoint_out", type=Path)
    f.add_argument("--no-plot", action="store_true")

    fl = sub.add_parser("flow", parents=[shared], help="write flow from one frame k frames ahead (or behind)")
    fl.add_argument("checkpoint", type=Path)
    fl.add_argument("seq_dir", type=Path)
    fl.add_argument("--frame", type=int, required=True)
    fl.add_argument("--k", type=int, default=1)
    fl.add_argument("out_file", type=Path)

    t = sub.add_parser("track", parents=[shared], help="Euler-integrate points between two frames")
    t.add_argument("checkpoint", type=Path)
    t.add_argument("seq_dir", type=Path)
    t.add_argument("--start", type=int, required=True)
    t.add_argument("--end", type=int, required=True)
    t.add_argument("points_file", type=Path)
    t.add_argument("out_file", type=Path)
    t.add_argument("--no-plot", action="store_true")

    e = sub.add_parser("eval", parents=[shared], help="endpoint-error report against ground truth")
    e.add_argument("checkpoint", type=Path)
    e.add_argument("seq_dir", type=Path)
    e.add_argument("out_file", type=Path)
    e.add_argument("--no-plot", action="store_true")
    return parser


def _write_run_config(cfg: RunConfig, directory: Path) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    cfg.write(directory / RUN_CONFIG_NAME)


def cmd_generate(args, cfg: RunConfig) -> int:
    seed = args.seed if args.seed is not None else cfg["seed"]
    spec = SceneSpec(
        kind=args.kind,
        num_frames=args.frames,
        points_per_object=args.points_per_object,
        background_points=args.background_points,
        speed=args.speed,
        orbit_radius=args.orbit_radius,
        occlusion_window=tuple(args.occlusion),
        noise_sigma=args.noise,
        seed=seed,
        frame_interval=args.frame_interval,
    )
    seq = generate(spec)
    io.save_sequence(seq, args.out_dir, name=args.name or f"{spec.kind}_seed{seed}")
    _write_run_config(cfg, args.out_dir)
    print(f"wrote {len(seq)} frames to {args.out_dir}")
    return 0


def _history_lines(history) -> list[str]:
    keys = sorted({k for e in history.epochs for k in e.chamfer_terms})
    lines = [",".join(["epoch", "total"] + [f"chamfer_k{k:+d}" for k in keys] + ["cycle"])]
    for e in history.epochs:
        row = [str(e.epoch), io.fmt_real(e.total)]
        row += [io.fmt_real(e.chamfer_terms[k]) if k in e.chamfer_terms else "" for k in keys]
        row.append(io.fmt_real(e.cycle_term))
        lines.append(",".join(row))
    return lines


def cmd_fit(args, cfg: RunConfig) -> int:
    seq = io.load_sequence(args.seq_dir)
    out = args.checkpoint_out
    out.parent.mkdir(parents=True, exist_ok=True)
    _write_run_config(cfg, out.parent)

    def progress(rec):
        log.info("epoch %d total %.6g (%.1fs)", rec.epoch, rec.total, rec.seconds)

    try:
        params, history = fit(seq, cfg.prior(), cfg.loss(), cfg.train(), progress)
    except TrainingDiverged as exc:
        save_checkpoint(exc.best_params, cfg.prior(), out.with_name(out.name + ".last_good"))
        raise CommandError(f"{exc}; last good parameters saved to {out.name}.last_good") from None

    save_checkpoint(params, cfg.prior(), out)
    history_path = out.with_name(out.stem + "_history.csv")
    history_path.write_text("\n".join(_history_lines(history)) + "\n")
    if not args.no_plot:
        plotting.plot_history(history, out.with_name(out.stem + "_history.png"))
    print(f"best epoch {history.best_epoch} of {len(history) - 1}, objective {history.epochs[history.best_epoch].total:.6g}")
    return 0


def _load(args):
    params, _ = load_checkpoint(args.checkpoint)
    seq = io.load_sequence(args.seq_dir)
    return params, seq


def cmd_flow(args, cfg: RunConfig) -> int:
    params, seq = _load(args)
    flow = extract_flow(params, seq, args.frame, args.k)
    args.out_file.parent.mkdir(parents=True, exist_ok=True)
    io.write_flow(flow, args.out_file)
    _write_run_config(cfg, args.out_file.parent)
    return 0


def cmd_track(args, cfg: RunConfig) -> int:
    params, seq = _load(args)
    start_points = io.read_points(args.points_file)
    tracks = extract_trajectory(params, seq, args.start, start_points, args.end)
    args.out_file.parent.mkdir(parents=True, exist_ok=True)
    io.write_tracks(tracks, args.out_file)
    _write_run_config(cfg, args.out_file.parent)
    if not args.no_plot:
        plotting.plot_tracks(tracks, args.out_file.with_suffix(".png"))
    return 0


def cmd_eval(args, cfg: RunConfig) -> int:
    params, seq = _load(args)
    report = evaluate_sequence(params, seq, cfg["dynamic_threshold"])
    args.out_file.parent.mkdir(parents=True, exist_ok=True)
    args.out_file.write_text(report.to_text())
    _write_run_config(cfg, args.out_file.parent)
    if not args.no_plot:
        plotting.plot_report(report, args.out_file.with_suffix(".png"))
    value = "absent" if report.mean_dynamic_normalized is None else f"{report.mean_dynamic_normalized:.6g}"
    print(f"mean_dynamic_normalized={value}")
    return 0


COMMANDS = {
    "generate": cmd_generate,
    "fit": cmd_fit,
    "flow": cmd_flow,
    "track": cmd_track,
    "eval": cmd_eval,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = _resolve(args)
        return COMMANDS[args.command](args, cfg)
    except (CommandError, ValueError, FileNotFoundError) as exc:
        print(f"eulerflow {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
