"""``nervehand`` command line: synth, train, run, bench, eval.

Options can also come from a YAML file (``--config``) with one mapping per
subcommand; flags given on the command line win.
"""
from __future__ import annotations

import argparse
import csv
import json
import platform
import sys
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import scipy
import yaml

from . import __version__, decoder, metrics, model, pipeline, synthgen, training
from .handctl import EmulatedHand

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_VALIDATION = 0, 2, 3, 4


class UsageError(Exception):
    pass


@dataclass
class RunManifest:
    command: str
    argv: list
    config_path: str | None
    seeds: dict
    output: str
    options: dict = field(default_factory=dict)
    versions: dict = field(default_factory=lambda: {
        "nervehand": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
        "python": platform.python_version()})

    def write(self, directory) -> Path:
        path = Path(directory) / "manifest.json"
        path.write_text(json.dumps(asdict(self), indent=1, sort_keys=True, default=str) + "\n")
        return path


def _gesture(name: str) -> synthgen.GestureSpec:
    if name not in synthgen.GESTURES:
        raise UsageError(f"unknown gesture {name!r}; choose from {', '.join(sorted(synthgen.GESTURES))}")
    return synthgen.GESTURES[name]


def _mask(text: str) -> tuple:
    if len(text) != 5 or set(text) - {"0", "1"}:
        raise UsageError(f"finger mask must be five 0/1 digits, got {text!r}")
    return tuple(c == "1" for c in text)


def _model_config(name: str, mask) -> model.ModelConfig:
    base = {"tiny": model.TINY, "full": model.FULL_SCALE}.get(name)
    if base is None:
        raise UsageError("model config must be 'tiny' or 'full'")
    return replace(base, finger_mask=mask)


def _ensemble(specs: list[str]) -> decoder.EnsembleConfig:
    members = []
    for spec in specs:
        path, _, mask = spec.partition(":")
        if not Path(path).is_file():
            raise FileNotFoundError(f"checkpoint not found: {path}")
        members.append(decoder.EnsembleMember.from_checkpoint(path, _mask(mask) if mask else None))
    return decoder.EnsembleConfig(members)


def _random_ensemble(count: int, seed: int = 0) -> decoder.EnsembleConfig:
    return decoder.EnsembleConfig([
        decoder.EnsembleMember(model.ModelParams.init(replace(model.TINY, finger_mask=m), seed + i), m)
        for i, m in enumerate(decoder.split_masks(count))])


# -- subcommands ---------------------------------------------------------------------

def cmd_synth(a) -> dict:
    if not a.gestures:
        raise UsageError("need at least one gesture")
    gestures = [_gesture(g) for g in a.gestures]
    split = synthgen.build_dataset(gestures, a.sessions, a.mode, a.seed, a.snr_db)
    out = synthgen.save_dataset(split, a.out)
    print(f"wrote {len(split.train_sessions)} train + {len(split.validation_sessions)} validation sessions to {out}")
    return {"out": out, "seeds": {"dataset": a.seed}}


def cmd_train(a) -> dict:
    if a.epochs < 1:
        raise ValueError("epochs must be >= 1")
    split = synthgen.load_dataset(a.dataset)
    cfg = _model_config(a.model, _mask(a.fingers))
    spec = model.TrainSpec(epochs=a.epochs, lr0=a.lr, batch=a.batch, rng_seed=a.seed,
                           weight_decay=a.weight_decay)

    def progress(e):
        print(" ".join(f"{k}={v:.4g}" if isinstance(v, float) else f"{k}={v}" for k, v in e.items()), flush=True)

    params, log, val = training.fit_decoder(split.train_sessions, split.validation_sessions, cfg, spec,
                                            step=a.step, augment=a.augment, init_seed=a.seed,
                                            progress=progress)
    out = Path(a.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    model.save_checkpoint(out, params)
    with open(out.with_suffix(".log.csv"), "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(log[0]))
        w.writeheader()
        w.writerows(log)
    print(f"checkpoint {out} ({params.count()} parameters)")
    return {"out": out.parent, "seeds": {"init": a.seed, "train": a.seed}}


def _session_signal(a):
    if a.dataset is None:
        return None, None
    split = synthgen.load_dataset(a.dataset)
    sessions = {s.index: s for s in split.train_sessions + split.validation_sessions}
    if a.session not in sessions:
        raise ValueError(f"session {a.session} not in dataset")
    return sessions[a.session].signal, sessions[a.session]


def cmd_run(a) -> dict:
    ens = _ensemble(a.checkpoint) if a.checkpoint else _random_ensemble(a.model_count, a.seed)
    if a.source == "replay":
        if not a.replay:
            raise UsageError("--replay FILE is required with --source replay")
        source = pipeline.replay_source(a.replay)
    else:
        sig, _ = _session_signal(a)
        source = pipeline.emulated_source(sig, a.duration, ppm=(a.ppm, -a.ppm), seed=a.seed)
    cfg = pipeline.PipelineConfig(power_mode=a.power_mode, model_count=len(ens.members),
                                  debug_sink=a.debug_sink)
    hand = pipeline.HandSink(EmulatedHand())
    report = pipeline.run(cfg, source, ens, hand, a.duration, virtual=a.virtual)
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    pipeline.write_predictions(out / "predictions.csv", report.predictions)
    hand.hand.write_trajectory(out / "hand_trajectory.csv")
    (out / "latency.csv").write_text(pipeline.measure([report]))
    print(pipeline.measure([report]), end="")
    print(f"predictions={report.n} discards={len(report.discard_events)} "
          f"ledger_balanced={report.conservation_ok()} sink_errors={report.sink_errors}")
    return {"out": out, "seeds": {"source": a.seed}}


def cmd_bench(a) -> dict:
    counts = [int(c) for c in str(a.model_counts).split(",") if c]
    if any(not 1 <= c <= 5 for c in counts):
        raise ValueError("model counts must be 1-5")
    modes = [m for m in str(a.modes).split(",") if m]
    ensembles = {c: _random_ensemble(c, a.seed) for c in counts}
    reports = pipeline.benchmark(ensembles, modes, a.duration,
                                 lambda: pipeline.emulated_source(None, a.duration, seed=a.seed),
                                 virtual=a.virtual)
    table = pipeline.measure(reports)
    out = Path(a.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(table)
    print(table, end="")
    return {"out": out.parent, "seeds": {"source": a.seed}}


def read_predictions(path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(t_ns, probs (n, 5), latency_ms) from a prediction log."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    t = np.array([int(r["t_ns"]) for r in rows], dtype=np.int64)
    p = np.array([[float(r[f"p{i}"]) for i in range(1, 6)] for r in rows]).reshape(-1, 5)
    lat = np.array([float(r["latency_ms"]) for r in rows])
    return t, p, lat


def read_labels(path) -> np.ndarray:
    """Glove labels (m, 5) at 50 Hz from a session label file."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    return np.array([[c == "1" for c in r[1:6]] for r in rows], dtype=bool).reshape(-1, 5)


def align_labels(t_ns, latency_ms, labels: np.ndarray) -> np.ndarray:
    """Label of each prediction's newest contributing sample."""
    newest_ns = t_ns - np.round(latency_ms * 1e6).astype(np.int64)
    idx = np.clip(newest_ns // (1_000_000_000 // synthgen.GLOVE_HZ), 0, len(labels) - 1)
    return labels[idx]


def cmd_eval(a) -> dict:
    t, probs, lat = read_predictions(a.predictions)
    if len(t) == 0:
        raise ValueError("prediction log is empty")
    labels = align_labels(t, lat, read_labels(a.labels))
    table = metrics.report(metrics.evaluate(probs, labels, a.threshold), a.format)
    if a.out:
        Path(a.out).parent.mkdir(parents=True, exist_ok=True)
        Path(a.out).write_text(table)
    print(table, end="")
    return {"out": Path(a.out).parent if a.out else None, "seeds": {}}


# -- parser --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nervehand", description=__doc__.splitlines()[0])
    p.add_argument("--config", help="YAML file with per-subcommand defaults")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic dataset")
    s.add_argument("--gestures", nargs="*", default=[g.name for g in synthgen.DEFAULT_GESTURES])
    s.add_argument("--sessions", type=int, default=4)
    s.add_argument("--mode", choices=["able", "amputee"], default="amputee")
    s.add_argument("--snr-db", type=float, default=None)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train one decoder")
    t.add_argument("--dataset", required=True)
    t.add_argument("--model", default="tiny", help="tiny | full")
    t.add_argument("--fingers", default="11111", help="owned fingers, e.g. 10000")
    t.add_argument("--epochs", type=int, default=6)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--batch", type=int, default=64)
    t.add_argument("--weight-decay", type=float, default=1e-5)
    t.add_argument("--step", type=int, default=2, help="stride between training windows")
    t.add_argument("--augment", type=int, default=0, help="gain-perturbed copies per session")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", required=True, help="checkpoint path")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("run", help="real-time run driving the emulated hand")
    r.add_argument("--checkpoint", action="append", default=[], help="PATH[:MASK], repeatable")
    r.add_argument("--model-count", type=int, default=1, help="random models when no checkpoint given")
    r.add_argument("--source", choices=["emulate", "replay"], default="emulate")
    r.add_argument("--replay", help=".nrvraw file for --source replay")
    r.add_argument("--dataset", help="dataset directory providing the emulated signal")
    r.add_argument("--session", type=int, default=0)
    r.add_argument("--ppm", type=float, default=0.0, help="device clock offsets +ppm / -ppm")
    r.add_argument("--power-mode", choices=sorted(pipeline.POWER_MODES), default="TenW")
    r.add_argument("--duration", type=float, default=10.0)
    r.add_argument("--debug-sink", help="file path or tcp://host:port")
    r.add_argument("--virtual", action="store_true", help="deterministic virtual clock")
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_run)

    b = sub.add_parser("bench", help="latency/throughput over model count x power mode")
    b.add_argument("--model-counts", default="1,2,3,4,5")
    b.add_argument("--modes", default="FiveW,TenW")
    b.add_argument("--duration", type=float, default=5.0)
    b.add_argument("--virtual", action="store_true")
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out", required=True, help="benchmark CSV path")
    b.set_defaults(func=cmd_bench)

    e = sub.add_parser("eval", help="per-finger metrics of a prediction log")
    e.add_argument("--predictions", required=True)
    e.add_argument("--labels", required=True, help="session .labels.csv")
    e.add_argument("--threshold", type=float, default=0.5)
    e.add_argument("--format", choices=["csv", "text"], default="text")
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)
    return p


def _config_defaults(parser: argparse.ArgumentParser, argv) -> str | None:
    pre, _ = parser.parse_known_args(argv)
    if not pre.config:
        return None
    data = yaml.safe_load(Path(pre.config).read_text()) or {}
    if not isinstance(data, dict):
        raise ValueError("config file must hold a mapping")
    section = data.get(pre.command, {}) or {}
    sub = next(a for a in parser._subparsers._group_actions if isinstance(a, argparse._SubParsersAction))
    sub.choices[pre.command].set_defaults(**{k.replace("-", "_"): v for k, v in section.items()})
    return pre.config


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        config_path = _config_defaults(parser, argv)
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code else EXIT_OK
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, yaml.YAMLError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    try:
        info = args.func(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    out = info.get("out")
    if out is not None:
        opts = {k: v for k, v in vars(args).items() if k != "func"}
        RunManifest(args.command, argv, config_path, info.get("seeds", {}), str(out), opts).write(out)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
