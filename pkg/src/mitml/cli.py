"""Command-line entry point: gen-data, train, eval, gradcheck, ablate."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

from threadpoolctl import threadpool_limits

from mitml.training import MODES, parse_config

log = logging.getLogger("mitml")

LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
DIRECTION_CHOICES = ("both", "i2v", "v2i")


class UsageError(Exception):
    """Bad invocation detected after argument parsing (exit code 2)."""


def _positive_int(raw: str) -> int:
    v = int(raw)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {raw}")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mitml", description=__doc__)
    p.add_argument("--threads", type=_positive_int, default=1, help="BLAS thread cap (1 keeps runs bit-reproducible)")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    g = sub.add_parser("gen-data", help="render a synthetic two-modality tracklet corpus")
    g.add_argument("--out", required=True, type=Path)
    g.add_argument("--ids", required=True, type=_positive_int)
    g.add_argument("--seed", required=True, type=int)
    g.add_argument("--tracklets", type=_positive_int, default=4, help="tracklets per identity and modality")

    t = sub.add_parser("train", help="train one model variant and score it on the test split")
    t.add_argument("--data", required=True, type=Path)
    t.add_argument("--config", required=True, type=Path)
    t.add_argument("--out", required=True, type=Path)
    t.add_argument("--mode", choices=MODES, default=None, help="overrides the config's mode")
    t.add_argument("--shuffle-frames", action="store_true", help="shuffle frame order inside every tracklet")
    t.add_argument("--seed", type=int, default=None, help="overrides the config's seed")
    t.add_argument("--resume", type=Path, default=None, help="continue from a checkpoint")

    e = sub.add_parser("eval", help="cross-modal retrieval metrics for a checkpoint")
    e.add_argument("--data", required=True, type=Path)
    e.add_argument("--ckpt", required=True, type=Path)
    e.add_argument("--direction", choices=DIRECTION_CHOICES, default="both")
    e.add_argument("--split", default="test")
    e.add_argument("--out", type=Path, default=None, help="CSV path (default: CSV on stdout after the table)")

    gc = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    from mitml.gradsuite import DEFAULT_SEEDS, MODULES

    gc.add_argument("--module", choices=MODULES, default="all")
    gc.add_argument("--seeds", type=_positive_int, default=DEFAULT_SEEDS)

    a = sub.add_parser("ablate", help="train and score one sweep of variants")
    from mitml.experiments import SWEEPS

    a.add_argument("--sweep", required=True, choices=SWEEPS)
    a.add_argument("--data", required=True, type=Path)
    a.add_argument("--out", required=True, type=Path)
    a.add_argument("--config", type=Path, default=None, help="base config (default: the desk recipe)")
    a.add_argument("--seed", type=int, default=None)
    return p


def configure_logging() -> None:
    raw = os.environ.get("MITML_LOG", "error").strip().lower()
    if raw not in LOG_LEVELS:
        raise UsageError(f"MITML_LOG must be one of {sorted(LOG_LEVELS)}, got {raw!r}")
    logging.basicConfig(level=LOG_LEVELS[raw], format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def _load_store(data: Path):
    from mitml.synthdata import Manifest, TrackletStore

    if not (data / "manifest.csv").exists() and not data.is_file():
        raise FileNotFoundError(f"no manifest.csv under {data}")
    return TrackletStore(Manifest.read(data))


def _read_config(path: Optional[Path], **overrides):
    from mitml.experiments import desk_config

    if path is None:
        return desk_config(**{k: v for k, v in overrides.items() if v is not None})
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    try:
        return parse_config(text, **overrides)
    except ValueError as exc:
        raise UsageError(f"{path}: {exc}") from exc


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


def cmd_gen_data(args) -> int:
    from mitml.synthdata import generate_corpus

    if args.ids < 4:
        raise UsageError("--ids must be at least 4")
    man = generate_corpus(args.out, args.ids, args.tracklets, seed=args.seed)
    print(f"wrote {len(man.records)} tracklets for {args.ids} identities to {args.out}")
    return 0


def cmd_train(args) -> int:
    from mitml.evalkit import format_table, reports_csv
    from mitml.experiments import run_variant

    cfg = _read_config(args.config, mode=args.mode, seed=args.seed, shuffle_frames=True if args.shuffle_frames else None)
    store = _load_store(args.data)
    if args.resume is not None:
        from mitml.training import train

        train(cfg, store, args.out, resume=args.resume)
        return cmd_eval(argparse.Namespace(data=args.data, ckpt=args.out / "final.mckp", direction="both", split="test", out=args.out / "metrics.csv"))
    res = run_variant(store, cfg, out_dir=args.out)
    _write(args.out / "metrics.csv", reports_csv(res.reports))
    print(format_table(res.reports, f"{res.name} seed={cfg.seed} ({res.seconds:.1f}s)"))
    return 0


def cmd_eval(args) -> int:
    from mitml.evalkit import evaluate_model, format_table, reports_csv
    from mitml.training import load_model

    if not args.ckpt.exists():
        raise FileNotFoundError(f"checkpoint not found: {args.ckpt}")
    model = load_model(args.ckpt)
    store = _load_store(args.data)
    directions = ("i2v", "v2i") if args.direction == "both" else (args.direction,)
    reports = evaluate_model(model.params, store, model.frames, model.pooling, directions, args.split, model.shuffle_frames)
    print(format_table(reports))
    csv_text = reports_csv(reports)
    if args.out is None:
        print()
        sys.stdout.write(csv_text)
    else:
        _write(args.out, csv_text)
    return 0


def cmd_gradcheck(args) -> int:
    from mitml.gradsuite import TOLERANCE, format_results, run_suite

    results, seconds = run_suite(args.module, args.seeds)
    print(format_results(results))
    failed = [r.name for r in results if not r.passed(TOLERANCE)]
    print(f"{len(results) - len(failed)}/{len(results)} cases below {TOLERANCE:g} in {seconds:.1f}s")
    if failed:
        print("failing: " + ", ".join(failed), file=sys.stderr)
        return 1
    return 0


def cmd_ablate(args) -> int:
    from mitml.experiments import run_sweep, sweep_csv, sweep_table

    base = _read_config(args.config, seed=args.seed)
    store = _load_store(args.data)
    rows = run_sweep(args.sweep, store, base)
    _write(args.out / f"ablate_{args.sweep}.csv", sweep_csv(args.sweep, rows))
    print(sweep_table(args.sweep, rows))
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "ablate": cmd_ablate,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits 2 on usage errors and 0 on --help
        return int(exc.code or 0)
    try:
        configure_logging()
        with threadpool_limits(limits=args.threads):
            return COMMANDS[args.command](args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"mitml: error: {exc}", file=sys.stderr)
        return 2
    except KeyboardInterrupt:
        print("mitml: interrupted", file=sys.stderr)
        return 1
    except Exception as exc:  # any runtime failure becomes a one-line diagnostic
        log.debug("traceback", exc_info=True)
        print(f"mitml: {args.command} failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
