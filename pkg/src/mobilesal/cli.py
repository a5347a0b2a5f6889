"""Command-line entry point: train, infer, eval, stats, gradcheck, synth.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
Diagnostics go to stderr as one JSON object per line.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import gradsuite
from .checkpoint import CheckpointError, load_network
from .dataset import (IMAGE_SUFFIXES, DatasetError, Sample, load_image, load_mask, save_saliency,
                      scan_dataset, write_sample)
from .imageio import ImageDecodeError, atomic_write
from .metrics import evaluate
from .network import (SCOPES, MobileSalConfig, build_mobilesal, cmf_cost, count_flops, count_params)
from .synth import synth_dataset
from .tensor import DimensionError, NumericError
from .training import (TOY_SAMPLES, TOY_SIZE, TOY_TRAIN, TOY_WIDTH, TrainConfig, predict, train_loop,
                       with_overrides)

log = logging.getLogger("mobilesal")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
DATA_ERRORS = (DatasetError, CheckpointError, ImageDecodeError, DimensionError, FileNotFoundError,
               NotADirectoryError, PermissionError, OSError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


class _JsonFormatter(logging.Formatter):
    def format(self, record):
        return json.dumps({"level": record.levelname.lower(), "logger": record.name,
                           "msg": record.getMessage()})


def _setup_logging(level: str) -> None:
    root = logging.getLogger()
    for h in list(root.handlers):
        if getattr(h, "_mobilesal", False):
            root.removeHandler(h)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(_JsonFormatter())
    handler._mobilesal = True
    root.addHandler(handler)
    root.setLevel(level.upper())
    logging.getLogger("matplotlib").setLevel(logging.WARNING)


@contextlib.contextmanager
def _threads(n: int | None):
    """Cap BLAS worker threads; ``1`` makes every reduction order fixed."""
    if n is None:
        yield
        return
    if n < 1:
        raise UsageError("--threads must be >= 1")
    from threadpoolctl import threadpool_limits
    with threadpool_limits(limits=n):
        yield


def _size_pair(text: str) -> tuple[int, int]:
    parts = text.lower().replace("x", ",").split(",")
    try:
        vals = tuple(int(p) for p in parts if p)
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad size {text!r}; use H,W or HxW") from None
    if len(vals) == 1:
        vals = vals * 2
    if len(vals) != 2 or min(vals) <= 0:
        raise argparse.ArgumentTypeError(f"bad size {text!r}; use H,W or HxW")
    return vals


def _int_list(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(p) for p in text.split(",") if p)
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad integer list {text!r}") from None


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    atomic_write(path, (json.dumps(obj, indent=2) + "\n").encode())


# ---------------------------------------------------------------------------
# subcommands


def cmd_train(args) -> int:
    base = TOY_TRAIN if args.toy else TrainConfig()
    config = with_overrides(base, epochs=args.epochs, batch=args.batch, lr=args.lr, lam=args.lam,
                            scales=args.scales, seed=args.seed)
    width = args.width_mult if args.width_mult is not None else (TOY_WIDTH if args.toy else 1.0)
    if args.no_augment:
        config = with_overrides(config, augment=False)
    if args.data is not None:
        samples = scan_dataset(args.data).load_all()
    elif args.toy:
        samples = synth_dataset(TOY_SAMPLES, TOY_SIZE, config.seed)
    else:
        raise UsageError("train: --data is required unless --toy is given")
    side = max(config.scales)
    net = build_mobilesal(MobileSalConfig(input_size=(side, side), width_mult=width), seed=config.seed)
    out = Path(args.out)
    log.info("training %d samples for %d epochs (width %.3g, lr %.3g, lambda %.3g)",
             len(samples), config.epochs, width, config.lr, config.lam)
    result = train_loop(samples, net, config, out)
    from .plotting import plot_loss_history
    plot_loss_history(result.history, out / "loss_curve.png", title="training loss")
    last = result.history[-1]
    print(json.dumps({"epochs": len(result.history), "final_loss": last.loss_total,
                      "final_loss_idr": last.loss_idr, "checkpoint": str(result.checkpoint)}))
    return EXIT_OK


def _expected_config(args) -> MobileSalConfig | None:
    if args.width_mult is None:
        return None
    return MobileSalConfig(width_mult=args.width_mult)


def cmd_infer(args) -> int:
    net = load_network(args.ckpt, _expected_config(args))
    rgb = load_image(args.rgb, "rgb").data[0]
    depth = load_image(args.depth, "gray").data[0]
    sample = Sample(rgb, depth, np.zeros_like(depth), Path(args.rgb).stem)
    p1 = predict(net, sample)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_saliency(p1, out)
    log.info("wrote %s (%dx%d)", out, p1.shape[1], p1.shape[0])
    return EXIT_OK


def _image_index(directory: Path) -> dict[str, Path]:
    if not directory.is_dir():
        raise DatasetError(f"{directory} is not a directory")
    found: dict[str, Path] = {}
    for p in sorted(directory.iterdir()):
        if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES:
            found.setdefault(p.stem, p)
    if not found:
        raise DatasetError(f"no images in {directory}")
    return found


def _matched(a_dir: Path, b_dir: Path) -> list[tuple[str, Path, Path]]:
    a, b = _image_index(a_dir), _image_index(b_dir)
    if set(a) != set(b):
        only_a, only_b = sorted(set(a) - set(b)), sorted(set(b) - set(a))
        example = (only_a or only_b)[0]
        raise DatasetError(f"id mismatch between {a_dir} and {b_dir}: {len(only_a)} only in the first, "
                           f"{len(only_b)} only in the second (e.g. {example!r})")
    return [(sid, a[sid], b[sid]) for sid in sorted(a)]


def _same_size(sid: str, x: np.ndarray, y: np.ndarray) -> None:
    if x.shape != y.shape:
        raise DimensionError(f"{sid}: prediction {x.shape} and ground truth {y.shape} differ in size", axis="h")


def cmd_eval(args) -> int:
    preds, gts = [], []
    for sid, pp, gp in _matched(Path(args.pred_dir), Path(args.gt_dir)):
        p = load_image(pp, "gray").data[0, 0].astype(np.float64)
        g = load_mask(gp)[0]
        _same_size(sid, p, g)
        preds.append(p)
        gts.append(g)
    depth_pairs = None
    if (args.depth_pred_dir is None) != (args.depth_gt_dir is None):
        raise UsageError("eval: --depth-pred-dir and --depth-gt-dir go together")
    if args.depth_pred_dir is not None:
        depth_pairs = []
        for sid, rp, gp in _matched(Path(args.depth_pred_dir), Path(args.depth_gt_dir)):
            r = load_image(rp, "gray").data[0, 0].astype(np.float64)
            g = load_image(gp, "gray").data[0, 0].astype(np.float64)
            _same_size(sid, r, g)
            depth_pairs.append((r, g))
    dataset = args.dataset or Path(args.gt_dir).resolve().parent.name or "dataset"
    report = evaluate(preds, gts, dataset, depth_pairs, beta_sq=args.beta_sq)
    path = Path(args.report)
    _write_json(path, report.to_dict())
    figure = Path(args.figure) if args.figure else path.with_suffix(".png")
    from .plotting import plot_pr_curve
    plot_pr_curve(report.curve, figure, title=dataset, beta_sq=args.beta_sq)
    print(json.dumps({"dataset": dataset, "num_images": report.num_images,
                      "f_beta_max": report.f_beta_max, "mae": report.mae,
                      "report": str(path), "figure": str(figure)}))
    return EXIT_OK


def stats_summary(width_mult: float = 1.0, input_size: tuple[int, int] = (320, 320)) -> dict:
    config = MobileSalConfig(input_size=tuple(input_size), width_mult=width_mult)
    net = build_mobilesal(config)
    params = {scope: count_params(net.store, scope) for scope in SCOPES}
    ev = count_flops(net, "eval", input_size)
    tr = count_flops(net, "train", input_size)
    h, w = input_size
    return {
        "width_mult": width_mult,
        "input_size": list(input_size),
        "params": params,
        "params_inference": params["all"],
        "params_train": params["train"],
        "macs_eval": ev["macs"],
        "macs_train": tr["macs"],
        "ops_eval": ev["total"],
        "ops_train": tr["total"],
        "cmf_ops_stride32": cmf_cost(net, 1, h // 32, w // 32),
        "cmf_ops_stride8": cmf_cost(net, 1, h // 8, w // 8),
    }


def cmd_stats(args) -> int:
    try:
        s = stats_summary(args.width_mult, args.input_size)
    except ValueError as exc:
        raise UsageError(f"stats: {exc}") from None
    rows = [(f"params[{k}]", f"{v:,}", f"{v / 1e6:.3f} M") for k, v in s["params"].items()]
    rows += [("params inference (no IDR)", f"{s['params_inference']:,}", f"{s['params_inference'] / 1e6:.3f} M"),
             ("params train (with IDR)", f"{s['params_train']:,}", f"{s['params_train'] / 1e6:.3f} M"),
             ("MACs eval", f"{s['macs_eval']:,}", f"{s['macs_eval'] / 1e9:.3f} G"),
             ("MACs train", f"{s['macs_train']:,}", f"{s['macs_train'] / 1e9:.3f} G")]
    w0 = max(len(r[0]) for r in rows)
    w1 = max(len(r[1]) for r in rows)
    print(f"MobileSal x{s['width_mult']:g} at {s['input_size'][0]}x{s['input_size'][1]}")
    for name, exact, short in rows:
        print(f"  {name:<{w0}}  {exact:>{w1}}  {short}")
    print(json.dumps(s))
    if args.json:
        _write_json(Path(args.json), s)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    dtype = np.float64 if args.precision == "float64" else np.float32
    t0 = time.perf_counter()
    reports = gradsuite.run_suites(args.block, args.tolerance, dtype)
    failed = [k for k, r in reports.items() if not r.passed]
    width = max(len(k) for k in reports)
    for name, r in reports.items():
        status = "PASS" if r.passed else "FAIL"
        print(f"{name:<{width}}  worst {r.max_rel_error:.3e}  ({r.checked} coords, at {r.worst})  {status}")
    summary = {"block": args.block, "precision": args.precision, "tolerance": args.tolerance,
               "worst": {k: r.max_rel_error for k, r in reports.items()},
               "passed": not failed, "seconds": round(time.perf_counter() - t0, 2)}
    print(json.dumps(summary))
    if failed:
        log.error("gradient check failed for %s at tolerance %g (%s)", ", ".join(failed), args.tolerance,
                  args.precision)
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_synth(args) -> int:
    if args.n < 1:
        raise UsageError("synth: --n must be >= 1")
    if args.size <= 0 or args.size % 32:
        raise UsageError(f"synth: --size {args.size} must be a positive multiple of 32")
    out = Path(args.out)
    written = 0
    for sample in synth_dataset(args.n, args.size, args.seed):
        written += len(write_sample(out, sample))
    log.info("wrote %d files under %s", written, out)
    print(json.dumps({"samples": args.n, "files": written, "root": str(out)}))
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--threads", type=int, default=None,
                        help="BLAS worker threads; 1 gives bitwise-reproducible runs")
    common.add_argument("--log-level", default="info", choices=("debug", "info", "warning", "error"))

    parser = _Parser(prog="mobilesal", description="Lightweight RGB-D salient object detection.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    d = TrainConfig()
    p = sub.add_parser("train", parents=[common], help="train a network")
    p.add_argument("--data", help="dataset root with RGB/, depth/ and GT/")
    p.add_argument("--out", required=True, help="output directory for checkpoints and history")
    p.add_argument("--epochs", type=int, help=f"default {d.epochs}")
    p.add_argument("--batch", type=int, help=f"default {d.batch}")
    p.add_argument("--lr", type=float, help=f"default {d.lr:g}")
    p.add_argument("--lambda", dest="lam", type=float, help=f"IDR loss weight, default {d.lam:g}")
    p.add_argument("--scales", type=_int_list, help="training sizes, default " + ",".join(map(str, d.scales)))
    p.add_argument("--width-mult", type=float, help="channel multiplier, default 1.0 (0.25 with --toy)")
    p.add_argument("--seed", type=int, help=f"default {d.seed}")
    p.add_argument("--no-augment", action="store_true", help="disable flips and crops")
    p.add_argument("--toy", action="store_true",
                   help="desk-scale preset: 8 synthetic 64x64 scenes unless --data is given")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", parents=[common], help="predict a saliency map")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--rgb", required=True)
    p.add_argument("--depth", required=True)
    p.add_argument("--out", required=True, help="output .png or .pgm")
    p.add_argument("--width-mult", type=float, help="refuse checkpoints of a different architecture")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", parents=[common], help="score predictions against ground truth")
    p.add_argument("--pred-dir", required=True)
    p.add_argument("--gt-dir", required=True)
    p.add_argument("--report", required=True, help="JSON report path; the PR figure goes next to it")
    p.add_argument("--figure", help="PR figure path, default <report>.png")
    p.add_argument("--dataset", help="dataset name recorded in the report")
    p.add_argument("--depth-pred-dir", help="restored depth maps, adds PSNR and SSIM")
    p.add_argument("--depth-gt-dir")
    p.add_argument("--beta-sq", type=float, default=0.3)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("stats", parents=[common], help="parameter and MAC counts")
    p.add_argument("--width-mult", type=float, default=1.0)
    p.add_argument("--input-size", type=_size_pair, default=(320, 320), help="H,W (default 320,320)")
    p.add_argument("--json", help="also write the JSON summary to this file")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suites")
    p.add_argument("--block", default="all", choices=("all",) + gradsuite.BLOCKS)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--precision", default="float64", choices=("float64", "float32"),
                   help="float32 only demonstrates the precision limit")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("synth", parents=[common], help="write a synthetic dataset")
    p.add_argument("--n", type=int, default=8)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)
    return parser


def _fail(code: int, message: str) -> int:
    print(f"error: {message}", file=sys.stderr)
    return code


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        return _fail(EXIT_USAGE, str(exc))
    _setup_logging(args.log_level)
    try:
        with _threads(args.threads):
            return args.func(args)
    except UsageError as exc:
        return _fail(EXIT_USAGE, str(exc))
    except NumericError as exc:
        return _fail(EXIT_NUMERIC, f"numeric failure: {exc}")
    except DATA_ERRORS as exc:
        return _fail(EXIT_DATA, f"{type(exc).__name__}: {exc}")
    except ValueError as exc:
        return _fail(EXIT_USAGE, str(exc))


if __name__ == "__main__":
    sys.exit(main())
