"""``pupiltrack`` command line: synthetic data, slicing, training, evaluation and chip mapping.

Exit codes: 0 success, 1 usage or configuration error, 2 data error, 3 infeasible mapping.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import torch

from . import hardware
from .config import ConfigError, ExperimentConfig, load_config, override
from .events import DataError, load_events, load_recording, prepare_recording, save_events, save_labels, stream_stats
from .learning import TrainingDiverged, evaluate, train
from .pipeline import matched_fixed_window, sequences, split_recording
from .readout import Readout, build_filter, write_predictions
from .slicing import EventFrameSequence, slice_recording
from .snn import (
    NetworkConfig, ShapeError, SpikingNet, forward_sequence, load_weights, reduced_config, retina_default, save_weights,
)
from .synth import SynthConfig, generate, golden_config

log = logging.getLogger("pupiltrack")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INFEASIBLE = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# shared helpers


def _experiment(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    paths = {k: getattr(args, k, None) for k in ("events", "labels", "weights", "network", "output_dir")}
    cfg = override(cfg, "paths", **paths)
    mode = getattr(args, "mode", None)
    if mode is not None or getattr(args, "n", None) is not None or getattr(args, "dt", None) is not None:
        mode = mode or cfg.slice.mode
        n = getattr(args, "n", None) or (cfg.slice.n_events if mode == "dynamic" else None)
        dt = getattr(args, "dt", None) or (cfg.slice.dt_us if mode == "fixed" else None)
        try:
            cfg = replace(cfg, slice=replace(cfg.slice, mode=mode, n_events=n if mode == "dynamic" else None,
                                             dt_us=dt if mode == "fixed" else None))
        except ValueError as exc:
            raise ConfigError(f"slice: {exc}") from None
    cfg = override(cfg, "slice", num_bins=getattr(args, "bins", None))
    cfg = override(cfg, "train", iterations=getattr(args, "iterations", None), batch=getattr(args, "batch", None),
                   lr=getattr(args, "lr", None))
    cfg = override(cfg, "experiment", holdout=getattr(args, "holdout", None))
    return cfg


def _recording(cfg: ExperimentConfig):
    cfg.paths.require("events", "labels")
    return prepare_recording(load_recording(cfg.paths.events, cfg.paths.labels))


def _readout(cfg: ExperimentConfig) -> Readout:
    f = cfg.filter
    return Readout(build_filter(f.tau_mem, f.tau_syn, f.size))


def _network(cfg: ExperimentConfig, need_weights: bool) -> SpikingNet:
    if cfg.paths.network is not None:
        cfg.paths.require("network")
        net_cfg = NetworkConfig.load(cfg.paths.network)
    else:
        net_cfg = reduced_config()
    net = SpikingNet(net_cfg, seed=cfg.seed)
    if cfg.paths.weights is not None:
        cfg.paths.require("weights")
        load_weights(net, cfg.paths.weights)
    elif need_weights:
        raise ConfigError("paths.weights is not set")
    return net.eval()


def _out_dir(cfg: ExperimentConfig) -> Path:
    out = Path(cfg.paths.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _format_rates(rates) -> str:
    return "\n".join(f"  IF layer {i + 1}: {r:.6f}" for i, r in enumerate(rates))


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen(args) -> int:
    cfg = golden_config() if args.golden else SynthConfig()
    updates = {"trajectory": args.trajectory, "speed": args.speed, "noise_rate": args.noise_rate,
               "rng_seed": args.seed}
    if args.duration_ms is not None:
        updates["duration_us"] = int(args.duration_ms * 1000)
    try:
        cfg = replace(cfg, **{k: v for k, v in updates.items() if v is not None})
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    rec = generate(cfg)
    out = Path(args.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_events(rec.stream, out / "events.csv")
    save_labels(rec.labels, out / "labels.csv")
    print(f"wrote {len(rec.stream)} events and {len(rec.labels)} labels to {out}")
    return EXIT_OK


def cmd_stats(args) -> int:
    stream = load_events(args.events)
    print(stream_stats(stream, args.label_period).format())
    return EXIT_OK


def cmd_slice(args) -> int:
    cfg = _experiment(args)
    rec = _recording(cfg)
    anchor = args.anchor if args.anchor is not None else len(rec.labels) - 1
    if not -len(rec.labels) <= anchor < len(rec.labels):
        raise UsageError(f"anchor {anchor} outside 0..{len(rec.labels) - 1}")
    seq = slice_recording(rec, cfg.slice, anchor)
    seq.save(args.out)
    active = seq.active_pixels()[seq.padded_bins:]
    print(f"wrote {seq.num_bins} bins ({seq.padded_bins} padded) to {args.out}; "
          f"active pixels per bin min={active.min() if active.size else 0} max={active.max() if active.size else 0}")
    return EXIT_OK


def cmd_infer(args) -> int:
    cfg = _experiment(args)
    net = _network(cfg, need_weights=True)
    if args.slices is not None:
        seq = EventFrameSequence.load(args.slices)
    else:
        rec = _recording(cfg)
        anchor = args.anchor if args.anchor is not None else len(rec.labels) - 1
        seq = slice_recording(rec, cfg.slice, anchor)
    out, trace = forward_sequence(net, seq)
    boxes = _readout(cfg).predict(out)
    out_dir = _out_dir(cfg)
    write_predictions(boxes, out_dir / "predictions.csv")
    rates = trace.firing_rates()
    (out_dir / "firing_rates.json").write_text(json.dumps({"firing_rates": [float(r) for r in rates]}, indent=2) + "\n")
    print(f"wrote {len(boxes)} predictions to {out_dir / 'predictions.csv'}")
    print("firing rates (spikes / neuron / bin):")
    print(_format_rates(rates))
    return EXIT_OK


def _validation_line(ev) -> str:
    return f"validation: sequences={len(ev.errors)} mean_error_px={ev.mean:.4f} std_error_px={ev.std:.4f}"


def cmd_train(args) -> int:
    cfg = _experiment(args)
    rec = _recording(cfg)
    split = split_recording(rec, cfg.slice, cfg.holdout, args.jobs)
    net = _network(cfg, need_weights=False)
    readout = _readout(cfg)
    train_cfg = replace(cfg.train, seed=cfg.seed, sequence_length=cfg.slice.num_bins)
    torch.manual_seed(cfg.seed)
    result = train(net, split.train, train_cfg, cfg.loss, readout)
    out = _out_dir(cfg)
    net.config.save(out / "network.json")
    save_weights(net, out / "weights.bin")
    result.write_log(out / "loss_log.csv")
    ev = evaluate(net, split.heldout, readout)
    print(f"trained {train_cfg.iterations} iterations on {len(split.train)} sequences; "
          f"checkpoint in {out}")
    print(_validation_line(ev))
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _experiment(args)
    rec = _recording(cfg)
    net = _network(cfg, need_weights=False)
    data = sequences(rec, cfg.slice, args.jobs) if args.all else split_recording(rec, cfg.slice, cfg.holdout, args.jobs).heldout
    ev = evaluate(net, data, _readout(cfg))
    print(_validation_line(ev))
    return EXIT_OK


def cmd_profile(args) -> int:
    cfg = _experiment(args)
    rec = _recording(cfg)
    net = _network(cfg, need_weights=False)
    readout = _readout(cfg)
    dyn = cfg.slice if cfg.slice.mode == "dynamic" else replace(cfg.slice, mode="dynamic", n_events=20, dt_us=None)
    fixed = matched_fixed_window(rec, dyn.n_events, dyn.num_bins, height=dyn.height, width=dyn.width)
    rows = {}
    for name, sc in (("dynamic", dyn), ("fixed", fixed)):
        data = sequences(rec, sc, args.jobs)
        rows[name] = evaluate(net, data, readout).firing_rates
    print(f"dynamic N={dyn.n_events}; fixed window {fixed.dt_us} us (matched mean active pixels)")
    print(f"{'layer':<10}{'dynamic':>12}{'fixed':>12}")
    for i, (a, b) in enumerate(zip(rows["dynamic"], rows["fixed"])):
        print(f"IF {i + 1:<7}{a:>12.6f}{b:>12.6f}")
    return EXIT_OK


def cmd_map(args) -> int:
    net_cfg = NetworkConfig.load(args.network) if args.network else retina_default()
    text, mapping = hardware.format_report(net_cfg)
    print(text)
    return EXIT_OK if mapping.feasible else EXIT_INFEASIBLE


# ---------------------------------------------------------------------------
# parser


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="experiment config file (INI key-value); flags override its values")
    p.add_argument("--seed", type=int, help="single seed for every random choice")
    p.add_argument("--jobs", type=int, default=1, help="parallel workers over independent slices (default 1)")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress")


def _recording_args(p) -> None:
    p.add_argument("--events", help="events CSV (t_us,x,y,p) at sensor resolution")
    p.add_argument("--labels", help="labels CSV (t_us,x,y) at sensor resolution")


def _slice_args(p) -> None:
    p.add_argument("--mode", choices=("dynamic", "fixed"), help="slicing mode")
    p.add_argument("--n", type=int, help="active pixels per bin in dynamic mode")
    p.add_argument("--dt", type=int, help="bin length in microseconds in fixed mode")
    p.add_argument("--bins", type=int, help="bins per sequence (default 64)")


def _model_args(p) -> None:
    p.add_argument("--network", help="network description JSON (default: the reduced two-block network)")
    p.add_argument("--weights", help="weight file written by train")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="pupiltrack", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("gen", help="write a synthetic recording (events.csv, labels.csv)")
    _common(p)
    p.add_argument("--output-dir", default=".", help="directory for events.csv and labels.csv")
    p.add_argument("--golden", action="store_true", help="start from the fixed-seed golden recording")
    p.add_argument("--duration-ms", type=float, help="recording length in milliseconds")
    p.add_argument("--trajectory", choices=("circular", "random-walk"), help="pupil path")
    p.add_argument("--speed", type=float, help="pupil speed in sensor pixels per second")
    p.add_argument("--noise-rate", type=float, help="background events per millisecond")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("stats", help="print timing statistics of an event file")
    _common(p)
    p.add_argument("--events", required=True, help="events CSV")
    p.add_argument("--label-period", type=int, default=30_000, help="label period in microseconds")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("slice", help="cut the bins ending at one label into a sequence file")
    _common(p)
    _recording_args(p)
    _slice_args(p)
    p.add_argument("--anchor", type=int, help="label index the last bin ends at (default: last label)")
    p.add_argument("--out", required=True, help="output sequence file")
    p.set_defaults(func=cmd_slice)

    p = sub.add_parser("infer", help="predict boxes for one sequence")
    _common(p)
    _recording_args(p)
    _slice_args(p)
    _model_args(p)
    p.add_argument("--slices", help="sequence file from `slice` (instead of --events/--labels)")
    p.add_argument("--anchor", type=int, help="label index when slicing a recording")
    p.add_argument("--output-dir", help="directory for predictions.csv and firing_rates.json")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("train", help="train on a recording and validate on its held-out tail")
    _common(p)
    _recording_args(p)
    _slice_args(p)
    _model_args(p)
    p.add_argument("--iterations", type=int, help="optimizer steps")
    p.add_argument("--batch", type=int, help="sequences per step")
    p.add_argument("--lr", type=float, help="initial learning rate")
    p.add_argument("--holdout", type=float, help="held-out fraction of the recording (default 0.2)")
    p.add_argument("--output-dir", help="directory for network.json, weights.bin and loss_log.csv")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="centroid error on the held-out tail of a recording")
    _common(p)
    _recording_args(p)
    _slice_args(p)
    _model_args(p)
    p.add_argument("--holdout", type=float, help="held-out fraction (must match training)")
    p.add_argument("--all", action="store_true", help="evaluate every usable label instead of the held-out tail")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("profile", help="per-layer firing rates, dynamic vs matched fixed slicing")
    _common(p)
    _recording_args(p)
    _slice_args(p)
    _model_args(p)
    p.set_defaults(func=cmd_profile)

    p = sub.add_parser("map", help="memory footprints and core assignment for the chip")
    _common(p)
    p.add_argument("--network", help="network description JSON (default: full-size network)")
    p.set_defaults(func=cmd_map)
    return parser


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if args.jobs < 1:
        print("pupiltrack: error: --jobs must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    torch.set_num_threads(1)
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"pupiltrack {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, ShapeError, TrainingDiverged, OSError, ValueError) as exc:
        print(f"pupiltrack {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
