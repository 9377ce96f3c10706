"""Command-line entry point: ``prgcn synth|train|refine|eval|gradcheck|bench``.

Exit codes: 0 success, 1 internal error, 2 invalid input or configuration.
"""

from __future__ import annotations

import argparse
import logging
import statistics
import sys
import time
from pathlib import Path

from . import checkpoint
from .config import ConfigError, RunConfig, load_config, parse_overrides
from .data import load_scene, read_manifest, synthesize
from .gradcheck import format_table, run_gradcheck
from .pointcloud import read_ply, write_ply
from .pipeline import PRGCN, NonFiniteLoss, evaluate_scenes, train

log = logging.getLogger("prgcn")

EXIT_OK, EXIT_INTERNAL, EXIT_INVALID = 0, 1, 2


class InvalidInput(Exception):
    pass


def _global_flags() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", type=Path, help="key = value config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config value (repeatable)")
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int)
    p.add_argument("--out", type=Path)
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _global_flags()
    parser = argparse.ArgumentParser(prog="prgcn", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="write synthetic scenes and a manifest")
    s.add_argument("--count", type=int, default=10)
    s.add_argument("--shapes", default="sphere,cube,torus")
    s.add_argument("--n-points", type=int, default=512)
    s.add_argument("--occlusion", type=float, default=0.4)
    s.add_argument("--noise", type=float, default=0.01)
    s.add_argument("--n-model", type=int, default=100)

    t = sub.add_parser("train", parents=[common], help="run the training schedule")
    t.add_argument("manifest", type=Path)
    t.add_argument("--log", type=Path, help="loss log path (default: <out>.log)")

    r = sub.add_parser("refine", parents=[common], help="refine one PLY cloud")
    r.add_argument("checkpoint", type=Path)
    r.add_argument("input", type=Path)

    e = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on a manifest")
    e.add_argument("manifest", type=Path)
    e.add_argument("--checkpoint", type=Path)
    e.add_argument("--gt-poses", action="store_true", help="use ground-truth poses as predictions")

    g = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient checks")
    g.add_argument("--seeds", type=int, default=10)
    g.add_argument("--corrupt", help=argparse.SUPPRESS)

    b = sub.add_parser("bench", parents=[common], help="time refinement and pose estimation")
    b.add_argument("--sizes", default="512,1024", help="comma-separated refined cloud sizes")
    b.add_argument("--runs", type=int, default=10)
    return parser


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    pairs = []
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        pairs.append((key.strip(), value.strip()))
    if args.seed is not None:
        pairs.append(("seed", str(args.seed)))
    if args.threads is not None:
        pairs.append(("threads", str(args.threads)))
    return parse_overrides(pairs, cfg)


def _require_out(args, what: str) -> Path:
    if args.out is None:
        raise InvalidInput(f"--out is required for {what}")
    return args.out


def _load_model(cfg: RunConfig, path: Path, only_prn: bool = False) -> PRGCN:
    model = PRGCN(cfg)
    try:
        model.load_parameters(checkpoint.load(path), only_prn=only_prn)
    except KeyError as exc:
        raise InvalidInput(exc.args[0]) from None
    except ValueError as exc:
        raise InvalidInput(f"{path}: {exc}") from None
    return model


def cmd_synth(args, cfg: RunConfig) -> int:
    out = _require_out(args, "synth")
    shapes = [s.strip() for s in args.shapes.split(",") if s.strip()]
    manifest = synthesize(out, args.count, shapes, args.n_points, args.occlusion, args.noise,
                          cfg.seed, n_model=args.n_model)
    print(f"wrote {args.count} scenes to {manifest}")
    return EXIT_OK


def cmd_train(args, cfg: RunConfig) -> int:
    out = _require_out(args, "train")
    records = read_manifest(args.manifest)
    scenes = [load_scene(r) for r in records]
    log_path = args.log or out.with_name(out.name + ".log")
    model = PRGCN(cfg)
    with open(log_path, "w") as fh:
        def on_epoch(entry):
            fh.write(entry.line() + "\n")
            fh.flush()
            print(entry.line())
        train(model, scenes, on_epoch)
    checkpoint.save(out, model.parameters())
    print(f"checkpoint written to {out}")
    return EXIT_OK


def cmd_refine(args, cfg: RunConfig) -> int:
    out = _require_out(args, "refine")
    model = _load_model(cfg, args.checkpoint, only_prn=True)
    refined = model.refine_cloud(read_ply(args.input))
    write_ply(out, refined)
    print(f"wrote {len(refined)} points to {out}")
    return EXIT_OK


def cmd_eval(args, cfg: RunConfig) -> int:
    out = _require_out(args, "eval")
    records = read_manifest(args.manifest)
    model = None
    if not args.gt_poses:
        if args.checkpoint is None:
            raise InvalidInput("eval needs --checkpoint unless --gt-poses is given")
        model = _load_model(cfg, args.checkpoint)
    report, results = evaluate_scenes(model, lambda i: load_scene(records[i]), len(records),
                                      use_gt=args.gt_poses, threads=cfg.threads)
    out.mkdir(parents=True, exist_ok=True)
    failed = [r for r in results if r.error is not None]
    text = report.to_text() if report is not None else "no successful samples\n"
    if failed:
        text += "\nfailed samples:\n" + "".join(f"  {r.index}: {r.error}\n" for r in failed)
    (out / "report.txt").write_text(text)
    (out / "report.csv").write_text(report.to_csv() if report is not None else "")
    print(text, end="")
    return EXIT_INTERNAL if failed else EXIT_OK


def cmd_gradcheck(args, cfg: RunConfig) -> int:
    rows = run_gradcheck(seeds=range(cfg.seed, cfg.seed + args.seeds), corrupt=args.corrupt)
    print(format_table(rows))
    return EXIT_OK if all(r.passed for r in rows) else EXIT_INTERNAL


def bench_rows(cfg: RunConfig, sizes, runs: int = 10) -> list[tuple[str, int, float]]:
    """(component, M, median seconds) for refinement (PR) and full pose estimation (PE)."""
    from .data import make_scenes

    scene = make_scenes(1, ["cube"], max(512, cfg.n_raw), 0.4, 0.01, seed=cfg.seed)[0]
    rows = []
    for m in sizes:
        model = PRGCN(cfg.replace(m_refined=m))
        prep = model.prepare(scene)
        pr, pe = [], []
        for _ in range(runs):
            t0 = time.perf_counter()
            model.prn.decode(model.prn.encode_scales(prep.full, prep.half, prep.quarter))
            pr.append(time.perf_counter() - t0)
            t0 = time.perf_counter()
            model.predict(prep)
            pe.append(time.perf_counter() - t0)
        rows.append(("PR", m, statistics.median(pr)))
        rows.append(("PE", m, statistics.median(pe)))
    return rows


def cmd_bench(args, cfg: RunConfig) -> int:
    try:
        sizes = [int(s) for s in args.sizes.split(",") if s.strip()]
    except ValueError:
        raise InvalidInput(f"--sizes must be comma-separated integers, got {args.sizes!r}") from None
    rows = bench_rows(cfg, sizes, args.runs)
    lines = [f"{'component':<10} {'M':>6} {'median ms':>10}   (median of {args.runs} runs)"]
    lines += [f"{c:<10} {m:>6d} {1e3 * t:>10.2f}" for c, m, t in rows]
    pr = {m: t for c, m, t in rows if c == "PR"}
    ordered = sorted(pr)
    for small, large in zip(ordered, ordered[1:]):
        if pr[large] < pr[small]:
            lines.append(f"note: PR at M={large} timed faster than at M={small}")
    text = "\n".join(lines)
    print(text)
    if args.out is not None:
        args.out.write_text(text + "\n")
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "refine": cmd_refine, "eval": cmd_eval,
            "gradcheck": cmd_gradcheck, "bench": cmd_bench}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](args, cfg)
    except (InvalidInput, ConfigError, ValueError, KeyError, FileNotFoundError, OSError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"error: {msg}", file=sys.stderr)
        return EXIT_INVALID
    except NonFiniteLoss as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    except Exception as exc:  # noqa: BLE001
        log.exception("internal error")
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
