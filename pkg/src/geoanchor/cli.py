"""Command-line entry point.

Exit codes: 0 success, 1 user error (bad flags, missing or malformed input
files), 2 internal invariant violation (failed gradient check, non-finite
loss, failed ablation claim under --strict).
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import gradcheck
from .container import ContainerError
from .kernels import BACKEND
from .numerics import ShapeError, StaleCacheError
from .proxyscene import PlacementError
from .runtime import thread_count

log = logging.getLogger("geoanchor")

EXIT_OK, EXIT_USER, EXIT_INTERNAL = 0, 1, 2
OVERLAY_COLORS = ((1.0, 1.0, 0.0), (1.0, 0.0, 1.0), (0.0, 1.0, 1.0), (1.0, 1.0, 1.0), (0.0, 0.0, 0.0), (1.0, 0.5, 0.0))
DEMO_CHOICES = (15, 20, 30, 50)
ABLATION_TERMS = ("center", "spread", "div")
ABLATE_COLUMNS = (
    "variant", "lambda_c", "lambda_s", "lambda_d", "on_object_rate", "spread_error",
    "centroid_error", "min_pairwise_mean", "collapse_fraction", "collapsed", "final_total",
)


class UserError(Exception):
    pass


class InvariantError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USER, f"{self.prog}: error: {message}\n")


def _print_config(command: str, resolved: dict) -> None:
    """Every run states the full configuration it executes with."""
    out = {"command": command, "gap_threads": thread_count(), "kernels": BACKEND, **resolved}
    print(json.dumps(out, indent=2, sort_keys=True, default=list), file=sys.stderr)


def _load_config(path):
    from .trainer import TrainConfig

    if path is None:
        return TrainConfig()
    p = Path(path)
    if not p.is_file():
        raise UserError(f"config file not found: {p}")
    try:
        return TrainConfig.load(p)
    except (ValueError, TypeError) as exc:
        raise UserError(f"invalid config {p}: {exc}") from exc


def _load_ckpt(path):
    from .trainer import load_checkpoint

    p = Path(path)
    if not p.is_file():
        raise UserError(f"checkpoint not found: {p}")
    try:
        return load_checkpoint(p)
    except (ContainerError, ValueError, TypeError, KeyError) as exc:
        raise UserError(f"cannot read checkpoint {p}: {exc}") from exc


def _spec_for(ckpt, variant):
    return ckpt.config.scene if variant is None else ckpt.config.scene.variant(variant)


# --- subcommands -----------------------------------------------------------


def cmd_pretrain(args) -> int:
    from .trainer import pretrain, save_checkpoint, write_loss_log

    cfg = _load_config(args.config)
    over = {}
    if args.seed is not None:
        over.update(data_seed=args.seed, init_seed=args.seed)
    if args.steps is not None:
        over["steps"] = args.steps
    try:
        cfg = dataclasses.replace(cfg, **over)
    except ValueError as exc:
        raise UserError(str(exc)) from exc
    out = Path(args.out)
    log_path = Path(args.log) if args.log else out.with_suffix(".loss.csv")
    _print_config("pretrain", {"out": str(out), "log": str(log_path), "config": cfg.to_dict()})
    ckpt = pretrain(cfg)
    save_checkpoint(ckpt, out)
    write_loss_log(ckpt.history, log_path)
    log.info("wrote %s and %s (final total %.6f)", out, log_path, ckpt.final_total)
    return EXIT_OK


def cmd_eval(args) -> int:
    from .metrics import EVAL_SEED_OFFSET, evaluate

    ckpt = _load_ckpt(args.ckpt)
    spec = _spec_for(ckpt, args.spec)
    seed = ckpt.config.data_seed + EVAL_SEED_OFFSET if args.seed is None else args.seed
    _print_config(
        "eval",
        {"ckpt": str(args.ckpt), "scenes": args.scenes, "episodes": args.episodes,
         "episode_length": args.episode_length, "seed": seed, "spec": spec.to_dict()},
    )
    report = evaluate(ckpt, spec, args.scenes, args.episodes, seed, args.episode_length)
    print(report.to_json())
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    _print_config("gradcheck", {"seed": args.seed, "cases": args.cases, "tolerance": gradcheck.TOLERANCE,
                                "epsilon": gradcheck.EPSILON, "ops": list(gradcheck.CHECKS)})
    results = gradcheck.run(args.seed, args.cases)
    for r in results:
        print(f"{r.op:<18} cases={r.cases:<3} max_rel_error={r.max_rel_error:.3e} {'PASS' if r.passed else 'FAIL'}")
    failed = [r.op for r in results if not r.passed]
    if failed:
        raise InvariantError(f"gradient check failed for: {', '.join(failed)}")
    return EXIT_OK


def cmd_downstream(args) -> int:
    from .downstream import INIT_MODES, TABLE_COLUMNS, UPDATE_BUDGET, run_downstream

    if args.ckpt is None and args.init is None:
        raise UserError("give --ckpt or --init")
    ckpt = _load_ckpt(args.ckpt) if args.ckpt else None
    modes = list(INIT_MODES) if ckpt is not None and args.init is None else [args.init or "gap_checkpoint"]
    seeds = list(range(args.seeds))
    _print_config(
        "downstream",
        {"ckpt": args.ckpt, "modes": modes, "demos": sorted(set(args.demos)), "seeds": seeds,
         "episodes": args.episodes, "lr": args.lr, "finetune_adapter": not args.frozen,
         "update_budget": UPDATE_BUDGET, "out": args.out},
    )
    rows = run_downstream(
        modes, args.demos, seeds, ckpt, args.episodes, args.lr, not args.frozen,
        on_result=lambda m, d, s, r: log.info("%s demos=%d seed=%d success=%.3f", m, d, s, r),
    )
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TABLE_COLUMNS)
    for row in rows:
        w.writerow(row.as_csv())
    if args.out:
        Path(args.out).write_text(buf.getvalue())
    else:
        sys.stdout.write(buf.getvalue())
    return EXIT_OK


def keypoint_pixels(points: np.ndarray, h: int, w: int) -> np.ndarray:
    """Pixel (row, col) of normalized keypoints; a point at (x + 0.5) / w maps to column x."""
    cols = np.clip(np.floor(points[:, 0] * w), 0, w - 1).astype(int)
    rows = np.clip(np.floor(points[:, 1] * h), 0, h - 1).astype(int)
    return np.stack([rows, cols], axis=1)


def overlay(image: np.ndarray, points: np.ndarray, assignment: np.ndarray) -> np.ndarray:
    """Draw each keypoint as a 3x3 square in its subset's color; image is (3, H, W)."""
    out = image.copy()
    _, h, w = out.shape
    for (r, c), e in zip(keypoint_pixels(points, h, w), assignment):
        color = np.asarray(OVERLAY_COLORS[e % len(OVERLAY_COLORS)])[:, None, None]
        out[:, max(r - 1, 0) : r + 2, max(c - 1, 0) : c + 2] = color
    return out


def cmd_render(args) -> int:
    from .adapter import adapter_forward, allocate_keypoints
    from .imageio import write_ppm
    from .proxyscene import FrozenBackbone, backbone_features, render_scene

    ckpt = _load_ckpt(args.ckpt)
    spec = _spec_for(ckpt, args.spec)
    out = Path(args.out)
    if out.suffix.lower() != ".ppm":
        raise UserError(f"--out must end in .ppm, got {out}")
    _print_config("render", {"ckpt": str(args.ckpt), "scene_seed": args.scene_seed, "out": str(out), "spec": spec.to_dict()})
    cfg = ckpt.config
    scene = render_scene(spec, args.scene_seed)
    feats = backbone_features(scene.image, FrozenBackbone.create(cfg.backbone_seed))
    alloc = allocate_keypoints(cfg.k, cfg.m)
    kp, _, _ = adapter_forward(feats, ckpt.params, alloc)
    write_ppm(out, overlay(scene.image, kp.points, alloc.assignment()))
    return EXIT_OK


def ablation_variants(term: str, weights) -> list[tuple[str, object]]:
    """(name, weights) rows: all terms on, then single and double removals."""
    lam = {"center": "lambda_c", "spread": "lambda_s", "div": "lambda_d"}

    def off(*names):
        return dataclasses.replace(weights, **{lam[n]: 0.0 for n in names})

    singles = [(f"no_{t}", off(t)) for t in ABLATION_TERMS]
    pairs = [(f"no_{a}_{b}", off(a, b)) for i, a in enumerate(ABLATION_TERMS) for b in ABLATION_TERMS[i + 1 :]]
    rows = [("full", weights)]
    if term == "all":
        return rows + singles + pairs
    if term == "pairs":
        return rows + pairs
    return rows + [r for r in singles + pairs if term in r[0].split("_")[1:]]


def ablation_claims(table: list[dict]) -> list[str]:
    """Violations of: full beats every single removal on on_object_rate; no-div collapses."""
    by = {r["variant"]: r for r in table}
    bad = []
    full = by["full"]["on_object_rate"]
    for t in ABLATION_TERMS:
        row = by.get(f"no_{t}")
        if row is not None and not full > row["on_object_rate"]:
            bad.append(f"full ({full:.4f}) does not beat no_{t} ({row['on_object_rate']:.4f})")
    if "no_div" in by and not by["no_div"]["collapsed"]:
        bad.append("no_div variant is not flagged collapsed")
    return bad


def cmd_ablate(args) -> int:
    from .metrics import evaluate
    from .trainer import make_dataset, pretrain, write_loss_log

    cfg = _load_config(args.config)
    if args.steps is not None:
        try:
            cfg = dataclasses.replace(cfg, steps=args.steps)
        except ValueError as exc:
            raise UserError(str(exc)) from exc
    out = Path(args.out)
    variants = ablation_variants(args.term, cfg.weights)
    _print_config(
        "ablate",
        {"term": args.term, "out": str(out), "strict": args.strict, "scenes": args.scenes,
         "episodes": args.episodes, "variants": [v for v, _ in variants], "config": cfg.to_dict()},
    )
    out.mkdir(parents=True, exist_ok=True)
    data = make_dataset(cfg)
    table = []
    for name, weights in variants:
        ckpt = pretrain(dataclasses.replace(cfg, weights=weights), data)
        report = evaluate(ckpt, n_scenes=args.scenes, n_episodes=args.episodes)
        (out / f"{name}.eval.json").write_text(report.to_json() + "\n")
        write_loss_log(ckpt.history, out / f"{name}.loss.csv")
        table.append(dict(
            variant=name, lambda_c=weights.lambda_c, lambda_s=weights.lambda_s, lambda_d=weights.lambda_d,
            on_object_rate=report.on_object_rate, spread_error=report.spread_error,
            centroid_error=float(np.mean(report.centroid_error)), min_pairwise_mean=report.min_pairwise["mean"],
            collapse_fraction=report.collapse_fraction, collapsed=report.collapsed, final_total=ckpt.final_total,
        ))
        log.info("%s on_object %.4f collapsed %s", name, report.on_object_rate, report.collapsed)
    buf = io.StringIO()
    w = csv.DictWriter(buf, ABLATE_COLUMNS, lineterminator="\n")
    w.writeheader()
    w.writerows(table)
    (out / "ablation.csv").write_text(buf.getvalue())
    sys.stdout.write(buf.getvalue())
    bad = ablation_claims(table)
    for msg in bad:
        print(f"claim violated: {msg}", file=sys.stderr)
    if bad and args.strict:
        raise InvariantError(f"{len(bad)} ablation claim(s) violated")
    return EXIT_OK


# --- parser ----------------------------------------------------------------


def _positive(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def build_parser() -> argparse.ArgumentParser:
    from .proxyscene import SPEC_VARIANTS

    p = _Parser(prog="geoanchor", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("pretrain", help="pretrain an adapter under the mask-supervised loss")
    s.add_argument("--config", required=True, help="JSON TrainConfig (partial dicts fill in defaults)")
    s.add_argument("--out", required=True, help="checkpoint path")
    s.add_argument("--seed", type=int, help="overrides both data_seed and init_seed")
    s.add_argument("--steps", type=_positive)
    s.add_argument("--log", help="loss CSV path (default: <out>.loss.csv)")
    s.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("eval", help="held-out keypoint metrics as JSON on stdout")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--scenes", type=_positive, default=200)
    s.add_argument("--episodes", type=int, default=10)
    s.add_argument("--episode-length", type=_positive, default=20)
    s.add_argument("--spec", choices=SPEC_VARIANTS)
    s.add_argument("--seed", type=int, help="default: the checkpoint's data_seed + 1000000")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("gradcheck", help="finite-difference check of every analytic gradient")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--cases", type=_positive, default=20)
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("downstream", help="behavior-cloning success table (CSV)")
    s.add_argument("--ckpt", help="pretrained checkpoint; without --init all three modes are run")
    s.add_argument("--init", choices=("random", "avgpool"))
    s.add_argument("--demos", type=int, nargs="+", choices=DEMO_CHOICES, default=[15])
    s.add_argument("--seeds", type=_positive, default=3, help="runs seeds 0..K-1")
    s.add_argument("--episodes", type=_positive, default=100)
    s.add_argument("--lr", type=float, default=1e-3)
    s.add_argument("--frozen", action="store_true", help="freeze the adapter during behavior cloning")
    s.add_argument("--out", help="CSV path (default: stdout)")
    s.set_defaults(func=cmd_downstream)

    s = sub.add_parser("render", help="scene with keypoints overlaid, as PPM")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--scene-seed", type=int, required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--spec", choices=SPEC_VARIANTS)
    s.set_defaults(func=cmd_render)

    s = sub.add_parser("ablate", help="loss-term ablation table")
    s.add_argument("--term", choices=(*ABLATION_TERMS, "pairs", "all"), default="all",
                   help="rows removing this term (pairs: the double removals; all: seven rows)")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--config", help="base TrainConfig JSON (default: built-in defaults)")
    s.add_argument("--steps", type=_positive)
    s.add_argument("--scenes", type=_positive, default=200)
    s.add_argument("--episodes", type=int, default=10)
    s.add_argument("--strict", action="store_true", help="exit 2 if an ablation claim fails")
    s.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UserError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USER
    except (InvariantError, FloatingPointError, StaleCacheError, ShapeError, AssertionError) as exc:
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    except (OSError, PlacementError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USER


if __name__ == "__main__":
    sys.exit(main())
