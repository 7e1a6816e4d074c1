"""``stairclimb`` command line: terrain generation, training, evaluation, transfer and heatmaps.

Exit codes: 0 success, 2 usage or configuration error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .config import SEED_ENV_VAR, RunConfig, seed_override
from .terrain import Mode, StairKind

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 2, 3
LEVELS_PER_MODE = {Mode.TRAIN: 10, Mode.TEST: 6}

log = logging.getLogger("stairclimb")


class UsageError(Exception):
    pass


def parse_levels(text: str) -> list[int]:
    """``"1..6"``, ``"3,4"`` or ``"2"``."""
    try:
        if ".." in text:
            lo, hi = text.split("..")
            levels = list(range(int(lo), int(hi) + 1))
        else:
            levels = [int(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise UsageError(f"cannot parse levels {text!r}") from exc
    if not levels:
        raise UsageError(f"no levels in {text!r}")
    return levels


def _kind(text: str) -> StairKind:
    try:
        return StairKind.parse(text)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _check_levels(levels, mode: Mode) -> None:
    top = LEVELS_PER_MODE[mode]
    for lvl in levels:
        if not 1 <= lvl <= top:
            raise UsageError(f"level {lvl} outside 1..{top} for {mode.value} terrains")


def _load_params(path):
    from .net import load_checkpoint

    try:
        return load_checkpoint(path)
    except FileNotFoundError as exc:
        raise RuntimeError(f"checkpoint {path} not found") from exc


def cmd_gen_terrain(args) -> int:
    from .export import export_heightfield
    from .terrain import difficulty_to_spec, generate

    mode = Mode(args.mode)
    _check_levels([args.level], mode)
    hf = generate(difficulty_to_spec(_kind(args.kind), args.level, mode), seed=args.seed)
    stem = f"{hf.spec.kind.value}_{mode.value}_L{args.level}"
    for path in export_heightfield(hf, args.out, stem):
        print(path)
    return EXIT_OK


def _run_config(args) -> RunConfig:
    try:
        data = json.loads(Path(args.config).read_text())
    except FileNotFoundError as exc:
        raise UsageError(f"config {args.config} not found") from exc
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {args.config}: {exc}") from exc
    try:
        cfg = RunConfig.from_dict(data)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid config {args.config}: {exc}") from exc
    if args.stage is not None:
        cfg.stage = type(cfg.stage).parse(args.stage)
        cfg.rewards.stage = cfg.stage
    cfg.seed = seed_override(cfg.seed)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.output_dir = args.out
    return cfg


def cmd_train(args) -> int:
    from .ppo import train

    cfg = _run_config(args)
    warm = None
    if args.warm_start is not None:
        try:
            _load_params(args.warm_start)
        except (RuntimeError, ValueError, OSError) as exc:
            raise UsageError(f"cannot read warm-start checkpoint: {exc}") from exc
        warm = args.warm_start
    out = Path(cfg.output_dir)
    cfg.write_resolved(out)

    def progress(row):
        if not args.quiet:
            print(
                f"iter {row['iteration']:5d}  success {row['success_rate']:6.1f}  "
                f"return {row['mean_return']:9.2f}  level {row['mean_level']:5.2f}",
                flush=True,
            )

    result = train(cfg, out, warm_start=warm, workers=args.workers, progress=progress)
    print(result["final_checkpoint"])
    return EXIT_OK


def cmd_eval(args) -> int:
    from .evaluation import level_sweep, network_policy, write_level_csv

    mode = Mode(args.mode)
    levels = parse_levels(args.levels)
    _check_levels(levels, mode)
    kind = _kind(args.terrain)
    params, _ = _load_params(args.checkpoint)
    seed = args.seed if args.seed is not None else seed_override(0)
    reports = level_sweep(network_policy(params), kind, levels, args.episodes, seed, mode, workers=args.workers)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"eval_{kind.value}_{mode.value}.csv"
    write_level_csv(path, reports)
    for r in reports:
        print(f"{kind.value} level {r.level}: {r.success_rate:.1f}% ({r.successes}/{r.episodes})")
    print(path)
    return EXIT_OK


def cmd_transfer(args) -> int:
    from .evaluation import cross_matrix, write_transfer_csv
    from .net import load_checkpoint

    terrains = [_kind(t) for t in args.terrains.split(",") if t]
    levels = parse_levels(args.levels)
    if len(levels) != 2:
        raise UsageError("transfer needs exactly two levels")
    _check_levels(levels, Mode.TEST)
    models = {}
    for path in [p for p in args.models.split(",") if p]:
        name = Path(path).name
        try:
            params, meta = load_checkpoint(path)
            models[name] = (params, StairKind.parse(meta["terrain_kind"]))
        except (OSError, ValueError, KeyError) as exc:
            log.warning("model %s unavailable (%s); its rows are marked absent", path, exc)
            models[name] = None
    seed = args.seed if args.seed is not None else seed_override(0)
    rows = cross_matrix(models, terrains, tuple(levels), args.episodes, seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "transfer_matrix.csv"
    write_transfer_csv(path, rows)
    print(path)
    return EXIT_OK


def cmd_heatmap(args) -> int:
    from .evaluation import critic_heatmap, write_heatmap
    from .terrain import difficulty_to_spec, generate

    mode = Mode(args.mode)
    _check_levels([args.level], mode)
    kind = _kind(args.terrain)
    params, _ = _load_params(args.checkpoint)
    hf = generate(difficulty_to_spec(kind, args.level, mode))
    heat = critic_heatmap(params, hf, args.spacing, args.yaw_mode, args.yaw)
    extra = {"terrain": kind.value, "level": args.level, "mode": mode.value, "checkpoint": str(args.checkpoint)}
    for path in write_heatmap(heat, args.out, f"heatmap_{kind.value}", extra):
        print(path)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="stairclimb",
        description="Procedural stair terrains and PPO training of a stair-climbing surrogate robot.",
        epilog=f"The {SEED_ENV_VAR} environment variable overrides the config seed; --seed overrides both.",
    )
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-terrain", help="write a heightfield as CSV, PGM and JSON manifest")
    g.add_argument("--kind", required=True, help="pyramid, straight, l_shaped, u_shaped or spiral")
    g.add_argument("--level", type=int, required=True)
    g.add_argument("--mode", choices=[m.value for m in Mode], default="train")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True, help="output directory")
    g.set_defaults(func=cmd_gen_terrain)

    t = sub.add_parser("train", help="run PPO from a JSON config")
    t.add_argument("--config", required=True)
    t.add_argument("--stage", choices=["stage1", "stage2"], default=None, help="overrides the config stage")
    t.add_argument("--warm-start", default=None, help="checkpoint to initialise from")
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--out", default=None, help="overrides the config output directory")
    t.add_argument("--workers", type=int, default=1, help="threads for env stepping; outputs do not depend on it")
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="success rate per level")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--terrain", required=True)
    e.add_argument("--levels", default="1..6", help="e.g. 1..6 or 3,4")
    e.add_argument("--mode", choices=[m.value for m in Mode], default="test")
    e.add_argument("--episodes", type=int, default=300)
    e.add_argument("--seed", type=int, default=None)
    e.add_argument("--workers", type=int, default=1)
    e.add_argument("--out", default=".")
    e.set_defaults(func=cmd_eval)

    x = sub.add_parser("transfer", help="cross-terrain success matrix")
    x.add_argument("--models", required=True, help="comma-separated checkpoint paths")
    x.add_argument("--terrains", required=True, help="comma-separated terrain kinds")
    x.add_argument("--levels", default="3,4")
    x.add_argument("--episodes", type=int, default=300)
    x.add_argument("--seed", type=int, default=None)
    x.add_argument("--out", default=".")
    x.set_defaults(func=cmd_transfer)

    h = sub.add_parser("heatmap", help="critic values over the terrain plane")
    h.add_argument("--checkpoint", required=True)
    h.add_argument("--terrain", required=True)
    h.add_argument("--level", type=int, default=3)
    h.add_argument("--mode", choices=[m.value for m in Mode], default="test")
    h.add_argument("--spacing", type=float, default=0.1)
    h.add_argument("--yaw-mode", choices=["face_goal", "fixed"], default="face_goal")
    h.add_argument("--yaw", type=float, default=0.0, help="heading for --yaw-mode fixed")
    h.add_argument("--out", default=".")
    h.set_defaults(func=cmd_heatmap)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    if getattr(args, "workers", 1) < 1:
        print("error: --workers must be at least 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - every other failure maps to one exit code
        log.debug("failure", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
