"""Command-line entry point: validate, train, eval, gradcheck, compare.

Exit codes: 0 success, 1 rejected input or failed check, 2 usage error,
3 unreadable input file, 4 output/I-O problem, 5 training diverged.
"""

from __future__ import annotations

import argparse
import copy
import csv
import io
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .config import ConfigError, check_shapes, parse, parse_extent, print_config
from .pipeline import PRESETS, PipelineConfig, preset

EXIT_OK = 0
EXIT_FAIL = 1
EXIT_USAGE = 2
EXIT_UNREADABLE = 3
EXIT_IO = 4
EXIT_DIVERGED = 5

OUT_ROOT_ENV = "AAF_OUT_ROOT"
ARTIFACTS = ("metrics.csv", "report.txt", "report.json", "params.bin")

log = logging.getLogger("aaf")


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


@dataclass(frozen=True)
class RunManifest:
    config_path: Optional[str]
    preset_name: Optional[str]
    seed: int
    k: int
    base_episodes: int
    finetune_updates: int
    queries_per_class: int
    out: Path

    def __post_init__(self):
        if (self.config_path is None) == (self.preset_name is None):
            raise CliError(EXIT_USAGE, "give exactly one of --preset or --config")


def _read_text(path: str) -> str:
    try:
        return Path(path).read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise CliError(EXIT_UNREADABLE, f"cannot read {path}: {exc}") from None


def _load_config(path: str) -> PipelineConfig:
    text = _read_text(path)
    try:
        return parse(text)
    except ConfigError as exc:
        raise CliError(EXIT_FAIL, f"{path}: {exc}") from None


def _resolve_config(args) -> PipelineConfig:
    if (args.config is None) == (args.preset is None):
        raise CliError(EXIT_USAGE, "give exactly one of --preset or --config")
    return preset(args.preset) if args.preset else _load_config(args.config)


def _out_dir(args, default_name: str) -> Path:
    if args.out:
        return Path(args.out)
    return Path(os.environ.get(OUT_ROOT_ENV, "runs")) / default_name


def _prepare_out(out: Path, names: Sequence[str], force: bool) -> None:
    clash = [n for n in names if (out / n).exists()]
    if clash and not force:
        raise CliError(EXIT_IO, f"{out} already holds {', '.join(clash)}; pass --force to overwrite")
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot create {out}: {exc}") from None


def _schedule(args):
    from .harness.training import PROTOCOLS

    changes = {}
    for flag, field in (("episodes", "base_episodes"), ("queries_per_class", "queries_per_class"),
                        ("finetune_updates", "finetune_updates"), ("eval_scenes", "eval_scenes"),
                        ("eval_every", "eval_every")):
        value = getattr(args, flag, None)
        if value is not None:
            changes[field] = value
    return replace(PROTOCOLS[getattr(args, "protocol", "default")], **changes)


def _seeds(text: str) -> tuple:
    try:
        return tuple(int(s) for s in text.split(","))
    except ValueError:
        raise CliError(EXIT_USAGE, f"bad integer list {text!r}") from None


# -- verbs --------------------------------------------------------------------


def cmd_validate(args) -> int:
    config = _load_config(args.path)
    if args.shapes:
        parts = args.shapes.split(",")
        if len(parts) != 2:
            raise CliError(EXIT_USAGE, "--shapes takes QUERY,SUPPORT such as 8x8x64,4x4x64")
        try:
            q, s = parse_extent(parts[0]), parse_extent(parts[1])
        except ValueError as exc:
            raise CliError(EXIT_USAGE, str(exc)) from None
        try:
            check_shapes(config, q, s)
        except ConfigError as exc:
            raise CliError(EXIT_FAIL, f"{args.path}: {exc}") from None
    sys.stdout.write(print_config(config))
    return EXIT_OK


def _write_run(out: Path, result, config: PipelineConfig, manifest: dict) -> None:
    from .harness import io as hio

    try:
        hio.atomic_write(out / "metrics.csv", hio.metrics_csv(result.log))
        report = dict(manifest)
        report.update(result.report.as_dict())
        hio.write_report(out, report)
        hio.save_params(out / "params.bin", {n: t.data for n, t in result.detector.parameters().items()})
        hio.atomic_write(out / "config.aaf", print_config(config))
    except OSError as exc:
        raise CliError(EXIT_IO, f"writing to {out} failed: {exc}") from None


def cmd_train(args) -> int:
    from .harness.training import DivergenceError, train

    config = _resolve_config(args)
    schedule = _schedule(args)
    manifest = RunManifest(args.config, args.preset, args.seed, args.k, schedule.base_episodes,
                           schedule.finetune_updates, schedule.queries_per_class,
                           _out_dir(args, f"{args.preset or Path(args.config).stem}-k{args.k}-s{args.seed}"))
    _prepare_out(manifest.out, ARTIFACTS, args.force)
    try:
        result = train(config, schedule=schedule, k=args.k, seed=args.seed, eval_seeds=_seeds(args.eval_seeds))
    except DivergenceError as exc:
        raise CliError(EXIT_DIVERGED, f"training diverged: {exc}") from None
    info = {"config": args.config or "", "preset": args.preset or "", "protocol": args.protocol,
            "base_episodes": schedule.base_episodes, "finetune_updates": schedule.finetune_updates,
            "queries_per_class": schedule.queries_per_class}
    _write_run(manifest.out, result, config, info)
    rep = result.report
    print(f"base_map: {rep.base_map!r}\nnovel_map: {rep.novel_map!r}\nout: {manifest.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .harness import io as hio
    from .harness.data import DEFAULT_SPLIT
    from .harness.model import Detector
    from .harness.training import evaluate, register_novel

    config = _resolve_config(args)
    try:
        values = hio.load_params(args.params)
    except OSError as exc:
        raise CliError(EXIT_UNREADABLE, f"cannot read {args.params}: {exc}") from None
    except hio.FormatError as exc:
        raise CliError(EXIT_FAIL, f"{args.params}: {exc}") from None
    levels = 2 if any(n.startswith("backbone.p2") for n in values) else 1
    detector = Detector(config, levels=levels)
    try:
        hio.assign_params(detector.parameters(), values)
    except hio.FormatError as exc:
        raise CliError(EXIT_FAIL, f"{args.params} does not fit this config: {exc}") from None
    registry = register_novel(DEFAULT_SPLIT, args.k, args.seed)
    report = evaluate(detector, DEFAULT_SPLIT, args.k, _seeds(args.eval_seeds), registry,
                      args.eval_scenes, seed=args.seed).as_dict()
    sys.stdout.write(hio.report_text(report))
    if args.out:
        out = Path(args.out)
        _prepare_out(out, ("eval.txt", "eval.json"), args.force)
        hio.write_report(out, report, stem="eval")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .harness.verify import GRADCHECK_TOL, corrupted_adjoint, detector_gradcheck

    config = _resolve_config(args)
    if args.corrupt_adjoint:
        try:
            with corrupted_adjoint(args.corrupt_adjoint):
                errors = detector_gradcheck(config, seed=args.seed, max_coords=args.max_coords)
        except ValueError as exc:
            raise CliError(EXIT_USAGE, str(exc)) from None
    else:
        errors = detector_gradcheck(config, seed=args.seed, max_coords=args.max_coords)
    worst = max(errors, key=errors.get)
    for name in sorted(errors):
        if args.verbose or errors[name] > GRADCHECK_TOL:
            print(f"{name}: {errors[name]:.3e}")
    print(f"max relative error {errors[worst]:.3e} at {worst}")
    if errors[worst] > GRADCHECK_TOL:
        print(f"FAIL: {worst} exceeds {GRADCHECK_TOL:g}", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


COMPARE_COLUMNS = ("preset", "k", "seed", "base_map", "novel_map")


def compare_rows(presets: Sequence[str], ks: Sequence[int], seeds: Sequence[int], schedule,
                 eval_seeds: Sequence[int] = (0,), jobs: int = 1) -> list[tuple]:
    """Rows ``(preset, k, seed, base_map, novel_map)`` ordered by preset, k, seed.

    One base training per (preset, seed) is shared by every k.
    """
    from .harness.data import DEFAULT_SPLIT
    from .harness.training import train, train_base

    def cell(p: str, seed: int) -> list[tuple]:
        base = train_base(preset(p), DEFAULT_SPLIT, schedule, seed)
        rows = []
        for k in ks:
            res = train(preset(p), DEFAULT_SPLIT, schedule, k, seed, eval_seeds, base_detector=copy.deepcopy(base))
            rows.append((p, k, seed, res.report.base_map, res.report.novel_map))
        return rows

    tasks = [(p, s) for p in presets for s in seeds]
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            chunks = list(pool.map(lambda t: cell(*t), tasks))
    else:
        chunks = [cell(*t) for t in tasks]
    order = {p: i for i, p in enumerate(presets)}
    rows = [r for chunk in chunks for r in chunk]
    return sorted(rows, key=lambda r: (order[r[0]], r[1], r[2]))


def compare_table(rows: Sequence[tuple]) -> str:
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(COMPARE_COLUMNS)
    for r in rows:
        writer.writerow([r[0], r[1], r[2], repr(r[3]), repr(r[4])])
    # per-preset, per-k means over seeds, in the same order
    groups: dict = {}
    for r in rows:
        groups.setdefault((r[0], r[1]), []).append(r)
    for (p, k), grp in groups.items():
        writer.writerow([p, k, "mean", repr(float(np.mean([g[3] for g in grp]))),
                         repr(float(np.mean([g[4] for g in grp])))])
    return out.getvalue()


def cmd_compare(args) -> int:
    from .harness import io as hio

    presets = args.presets.split(",")
    unknown = [p for p in presets if p not in PRESETS]
    if unknown or not presets:
        raise CliError(EXIT_USAGE, f"unknown preset(s) {unknown}; choose from {', '.join(PRESETS)}")
    out = _out_dir(args, "compare")
    _prepare_out(out, ("compare.csv",), args.force)
    rows = compare_rows(presets, _seeds(args.ks), _seeds(args.seeds), _schedule(args),
                        _seeds(args.eval_seeds), args.jobs)
    table = compare_table(rows)
    try:
        hio.atomic_write(out / "compare.csv", table)
    except OSError as exc:
        raise CliError(EXIT_IO, f"writing to {out} failed: {exc}") from None
    sys.stdout.write(table)
    return EXIT_OK


# -- argument parsing -----------------------------------------------------------


def _add_source(p: argparse.ArgumentParser) -> None:
    p.add_argument("--preset", choices=PRESETS, help="built-in pipeline configuration")
    p.add_argument("--config", help="path to a pipeline configuration file")


def _add_schedule(p: argparse.ArgumentParser) -> None:
    p.add_argument("--protocol", choices=("default", "trend"), default="default",
                   help="schedule preset; the flags below override its fields")
    p.add_argument("--episodes", type=int, help="base-training episodes")
    p.add_argument("--queries-per-class", type=int, help="query scenes per class in each base episode")
    p.add_argument("--finetune-updates", type=int, help="fine-tuning weight updates (same for every k)")
    p.add_argument("--eval-scenes", type=int, help="evaluation scenes per evaluation seed")
    p.add_argument("--eval-seeds", default="0", help="comma-separated evaluation seeds")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="aaf", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("validate", help="parse a config file and print its canonical form")
    p.add_argument("path")
    p.add_argument("--shapes", help="QUERY,SUPPORT extents, e.g. 8x8x64,4x4x64")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("train", help="base training, k-shot fine-tuning and evaluation")
    _add_source(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--k", type=int, default=1)
    p.add_argument("--out")
    p.add_argument("--force", action="store_true", help="overwrite existing artifacts")
    p.add_argument("--eval-every", type=int, help="log mAP every N episodes (0 = never)")
    _add_schedule(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate saved parameters")
    _add_source(p)
    p.add_argument("--params", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--k", type=int, default=1)
    p.add_argument("--out")
    p.add_argument("--force", action="store_true")
    p.add_argument("--eval-scenes", type=int, default=100)
    p.add_argument("--eval-seeds", default="0")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check through pipeline, head and loss")
    _add_source(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-coords", type=int, default=4, help="coordinates sampled per parameter")
    p.add_argument("--corrupt-adjoint", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("compare", help="preset x k x seed table of base/novel mAP")
    p.add_argument("--presets", default=",".join(PRESETS))
    p.add_argument("--ks", default="1,5")
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--out")
    p.add_argument("--force", action="store_true")
    p.add_argument("--jobs", type=int, default=1, help="worker threads over (preset, seed) cells")
    _add_schedule(p)
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"aaf {args.verb}: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
