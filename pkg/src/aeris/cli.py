"""``aeris`` command line: data generation, degradation, training, evaluation, benchmarks.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
Every command that writes an output directory also writes the fully resolved
configuration to ``<out>/config.json``. ``--config FILE`` loads a JSON object
whose keys are flag names (dashes or underscores); explicit flags win.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
OUTPUT_ROOT_ENV = "AERIS_OUTPUT_ROOT"
MODE_ALIASES = {"clean": "clean", "deg": "deg", "deg+n": "deg_plus_clean", "deg_plus_clean": "deg_plus_clean",
                "aeris": "aeris"}


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))


def _pair(text, typ=float):
    parts = [p for p in str(text).replace(" ", "").split(",") if p]
    if len(parts) != 2:
        raise argparse.ArgumentTypeError(f"expected two comma-separated values, got {text!r}")
    return tuple(typ(p) for p in parts)


def _int_list(text):
    try:
        return [int(p) for p in str(text).split(",") if p]
    except ValueError as e:
        raise argparse.ArgumentTypeError(str(e)) from e


def _positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def _prepare_out(path, force: bool) -> Path:
    out = Path(path)
    if out.exists() and any(out.iterdir()) and not force:
        raise UsageError(f"output directory {out} is not empty (use --force to overwrite)")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _echo_config(out_dir: Path, args, **extra) -> None:
    cfg = {k: v for k, v in vars(args).items() if k not in ("func",)}
    cfg.update(extra)
    (out_dir / "config.json").write_text(json.dumps(cfg, indent=1, default=str) + "\n")


def _load_dataset(path):
    from .datagen import load_dataset

    p = Path(path)
    if not (p / "annotations.json").is_file():
        raise DataError(f"{p} does not contain annotations.json")
    return load_dataset(p)


def _load_detector(args, dataset=None):
    from .evaluation import ModelDetector, OracleDetector

    if getattr(args, "oracle", False):
        return OracleDetector()
    if not args.checkpoint:
        raise UsageError("--checkpoint is required (or --oracle)")
    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        raise UsageError(f"checkpoint {ckpt} does not exist")
    from .checkpoint import load_model

    model, _ = load_model(ckpt)
    return ModelDetector(model.eval(), score_thresh=args.score_thresh)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    from .datagen import gen_shapes, save_dataset

    out = _prepare_out(args.out or _output_root() / "shapes", args.force)
    ds = gen_shapes(args.n, (args.size, args.size), seed=args.seed)
    save_dataset(ds, out)
    _echo_config(out, args, out=str(out))
    print(f"wrote {len(ds)} images to {out}")
    return EXIT_OK


def cmd_degrade(args) -> int:
    from .datagen import build_degraded_set, preset_config, save_dataset

    src = _load_dataset(args.src)
    out = _prepare_out(args.out or _output_root() / f"degraded-{args.preset}", args.force)
    cfg = preset_config(args.preset, args.seed)
    ds = build_degraded_set(src, cfg, args.seed)
    save_dataset(ds, out)
    _echo_config(out, args, out=str(out), degradation=cfg.to_dict())
    print(f"wrote {len(ds)} degraded images ({args.preset}) to {out}")
    return EXIT_OK


def _model_config(args):
    from .experiments import DESK_MODEL
    from .model import ModelConfig

    base = DESK_MODEL if args.model_preset == "desk" else ModelConfig()
    kw = {}
    if args.arrd_location:
        kw["arrd_location"] = args.arrd_location
    if args.num_classes:
        kw["num_classes"] = args.num_classes
    return replace(base, **kw)


def cmd_train(args) -> int:
    from .degradation import CALL_COUNTS
    from .experiments import DESK_LR
    from .training import TrainConfig, fit

    ds = _load_dataset(args.data)
    out = _prepare_out(args.out or _output_root() / f"train-{args.mode}-s{args.seed}", args.force)
    mode = MODE_ALIASES[args.mode]
    model_cfg = _model_config(args)
    if not args.num_classes:
        model_cfg = replace(model_cfg, num_classes=ds.num_classes)
    decay = tuple(args.decay_epochs) if args.decay_epochs is not None else (max(1, int(args.epochs * 0.75)),)
    train_cfg = TrainConfig(mode=mode, lam=args.lam, scale_range=args.scale_range, epochs=args.epochs,
                            batch_size=args.batch_size, lr=args.lr or DESK_LR[args.optimizer],
                            optimizer=args.optimizer,
                            warmup_iters=args.warmup_iters,
                            decay_epochs=decay, seed=args.seed, checkpoint_every=args.checkpoint_every)
    _echo_config(out, args, out=str(out), model_config=model_cfg.to_dict(), train_config=train_cfg.to_dict())
    before = CALL_COUNTS["apply_degradation"]
    state = fit(ds, model_cfg, train_cfg, out_dir=out)
    calls = CALL_COUNTS["apply_degradation"] - before
    last = state.history[-1] if state.history else {}
    print(f"trained {state.iteration} iterations; degradation calls={calls}; "
          f"final l_obj={last.get('l_obj', float('nan')):.4f} l_d={last.get('l_d', float('nan')):.4f}")
    print(f"checkpoint: {out / 'final.ckpt'}")
    return EXIT_OK


def _eval_config(args, upscale=1):
    from .evaluation import EvalConfig

    return EvalConfig(upscale=upscale, score_thresh=args.score_thresh)


def cmd_eval(args) -> int:
    from .evaluation import evaluate, write_results

    ds = _load_dataset(args.data)
    det = _load_detector(args, ds)
    try:
        res = evaluate(det, ds, _eval_config(args, args.upscale))
    except ValueError as e:
        raise DataError(str(e)) from e
    for k, v in res.as_dict().items():
        print(f"{k:5s} {100 * v:6.2f}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        write_results(out / "results.csv", [(args.upscale, res)], args.seed)
        _echo_config(out, args)
    return EXIT_OK


def cmd_scale_curve(args) -> int:
    from .evaluation import scale_curve

    ds = _load_dataset(args.data)
    det = _load_detector(args, ds)
    out = Path(args.out or _output_root() / "scale-curve")
    out.mkdir(parents=True, exist_ok=True)
    try:
        rows = scale_curve(det, ds, args.ratios, out_dir=out, seed=args.seed, cfg=_eval_config(args))
    except ValueError as e:
        raise DataError(str(e)) from e
    _echo_config(out, args)
    print("ratio     AP   AP_s   AP_m   AP_l")
    for r, res in rows:
        print(f"{r:5d} {100 * res.AP:6.2f} {100 * res.AP_s:6.2f} {100 * res.AP_m:6.2f} {100 * res.AP_l:6.2f}")
    return EXIT_OK


def cmd_bench(args) -> int:
    import torch

    from .evaluation import fps_benchmark
    from .model import build_model

    if args.workers:
        torch.set_num_threads(args.workers)
    if args.checkpoint:
        ckpt = Path(args.checkpoint)
        if not ckpt.is_file():
            raise UsageError(f"checkpoint {ckpt} does not exist")
        from .checkpoint import load_model

        model, _ = load_model(ckpt)
    else:
        model = build_model(_model_config(args), seed=args.seed)
    r = fps_benchmark(model, tuple(args.size), args.runs, args.warmup)
    print(f"FPS median={r['median']:.2f} p5={r['p5']:.2f} p95={r['p95']:.2f} (n={r['n_runs']}, "
          f"input {args.size[0]}x{args.size[1]})")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "bench.json").write_text(json.dumps(r, indent=1))
        _echo_config(out, args)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_gradcheck

    rep = run_gradcheck(seed=args.seed)
    ok = rep.passed(args.tol)
    print(f"params={rep.n_params} max_rel_error={rep.max_rel_error:.3e} worst={rep.worst_param} "
          f"tol={args.tol:g} -> {'PASS' if ok else 'FAIL'}")
    return EXIT_OK if ok else EXIT_NUMERIC


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    from .datagen import PRESETS

    p = _Parser(prog="aeris", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, out=True):
        sp.add_argument("--config", help="JSON file of flag defaults")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--workers", type=int, default=0, help="cap on intra-op threads (0 = library default)")
        if out:
            sp.add_argument("--out")
            sp.add_argument("--force", action="store_true")

    sp = sub.add_parser("gen-data", help="generate a synthetic shapes dataset")
    common(sp)
    sp.add_argument("--n", type=_positive_int, default=2000)
    sp.add_argument("--size", type=_positive_int, default=128)
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("degrade", help="build a degraded evaluation set with a manifest")
    common(sp)
    sp.add_argument("--src", required=True)
    sp.add_argument("--preset", choices=sorted(PRESETS), default="multi")
    sp.set_defaults(func=cmd_degrade)

    def model_flags(sp):
        sp.add_argument("--model-preset", choices=("desk", "default"), default="desk")
        sp.add_argument("--arrd-location", choices=("loc1", "loc2", "loc3"))
        sp.add_argument("--num-classes", type=int, default=0)

    sp = sub.add_parser("train", help="train a detector")
    common(sp)
    model_flags(sp)
    sp.add_argument("--data", required=True)
    sp.add_argument("--mode", choices=sorted(MODE_ALIASES), default="aeris")
    sp.add_argument("--lambda", dest="lam", type=float, default=0.4)
    sp.add_argument("--scale-range", type=_pair, default=(1.0, 4.0))
    sp.add_argument("--epochs", type=int, default=18)
    sp.add_argument("--batch-size", type=_positive_int, default=16)
    sp.add_argument("--lr", type=float, help="default: the desk recipe's rate for --optimizer")
    sp.add_argument("--optimizer", choices=("sgd", "adamw"), default="adamw")
    sp.add_argument("--warmup-iters", type=int, default=100)
    sp.add_argument("--decay-epochs", type=_int_list)
    sp.add_argument("--checkpoint-every", type=int, default=0)
    sp.set_defaults(func=cmd_train)

    def det_flags(sp):
        sp.add_argument("--data", required=True)
        sp.add_argument("--checkpoint")
        sp.add_argument("--oracle", action="store_true", help="use the ground-truth adapter")
        sp.add_argument("--score-thresh", type=float, default=0.01)

    sp = sub.add_parser("eval", help="COCO-protocol AP on a dataset")
    common(sp, out=False)
    sp.add_argument("--out")
    det_flags(sp)
    sp.add_argument("--upscale", type=_positive_int, default=1)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("scale-curve", help="AP vs pre-upscale ratio (table + SVG plot)")
    common(sp, out=False)
    sp.add_argument("--out")
    det_flags(sp)
    sp.add_argument("--ratios", type=_int_list, default=[1, 2, 4])
    sp.set_defaults(func=cmd_scale_curve)

    sp = sub.add_parser("bench", help="inference FPS")
    common(sp, out=False)
    model_flags(sp)
    sp.add_argument("--out")
    sp.add_argument("--checkpoint")
    sp.add_argument("--size", type=lambda t: _pair(t, int), default=(128, 128))
    sp.add_argument("--runs", type=_positive_int, default=100)
    sp.add_argument("--warmup", type=int, default=10)
    sp.set_defaults(func=cmd_bench)

    sp = sub.add_parser("gradcheck", help="finite-difference check of the joint loss")
    common(sp, out=False)
    sp.add_argument("--tol", type=float, default=1e-4)
    sp.set_defaults(func=cmd_gradcheck)
    return p


def _apply_config_file(parser, argv):
    """Re-parse with defaults taken from ``--config`` when given."""
    args = parser.parse_args(argv)
    path = getattr(args, "config", None)
    if not path:
        return args
    try:
        cfg = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise UsageError(f"cannot read config {path}: {e}") from e
    if not isinstance(cfg, dict):
        raise UsageError(f"config {path} must hold a JSON object")
    sub = parser._subparsers._group_actions[0].choices[args.command]
    known = {a.dest for a in sub._actions}
    defaults = {}
    for k, v in cfg.items():
        dest = {"lambda": "lam"}.get(k, k.replace("-", "_"))
        if dest not in known:
            raise UsageError(f"config {path}: unknown key {k!r}")
        if dest in ("scale_range", "size") and isinstance(v, list):
            v = tuple(v)
        defaults[dest] = v
    sub.set_defaults(**defaults)
    return parser.parse_args(argv)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = _apply_config_file(parser, argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        if getattr(args, "workers", 0):
            import torch

            torch.set_num_threads(args.workers)
        return args.func(args)
    except UsageError as e:
        print(f"aeris: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as e:
        return int(e.code) if isinstance(e.code, int) else EXIT_USAGE
    except (DataError, FileNotFoundError) as e:
        print(f"aeris: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except Exception as e:  # noqa: BLE001
        from .datagen import CocoFormatError
        from .training import NumericalError

        if isinstance(e, CocoFormatError):
            print(f"aeris: data error: {e}", file=sys.stderr)
            return EXIT_DATA
        if isinstance(e, NumericalError):
            print(f"aeris: numerical failure: {e}", file=sys.stderr)
            return EXIT_NUMERIC
        raise


if __name__ == "__main__":
    sys.exit(main())
