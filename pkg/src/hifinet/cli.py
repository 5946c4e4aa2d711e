"""``hifinet`` command line.

Exit codes: 0 success, 1 partial failure, 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import archive, haar, metrics
from .config import format_config, load_config
from .data import (
    ImageDecodeError,
    ImagePair,
    ensure_dir,
    image_files,
    load_pairs,
    make_synthetic_pairs,
    read_image,
    write_image,
)
from .network import hifi_forward
from .tensor import ConfigError, Tensor
from .train import TrainingDiverged, train

log = logging.getLogger("hifinet")

EXIT_OK, EXIT_PARTIAL, EXIT_USAGE = 0, 1, 2
DTYPES = {"float32": np.float32, "float64": np.float64}


class UsageError(Exception):
    pass


def _show_config(command: str, settings: dict) -> None:
    print(f"[{command}] resolved config:")
    for key, value in settings.items():
        print(f"  {key} = {value}")
    sys.stdout.flush()


def _load_weights(path, dtype):
    if not path:
        raise UsageError("--weights is required")
    if not Path(path).is_file():
        raise UsageError(f"weights not found: {path}")
    try:
        return archive.load_weights(path, dtype=DTYPES[dtype])
    except (archive.ArchiveError, ValueError, KeyError) as exc:
        raise UsageError(f"cannot load weights {path}: {exc}") from None


# ---------------------------------------------------------------------------
# commands


def cmd_enhance(args) -> int:
    _show_config("enhance", {"weights": args.weights, "input": args.input,
                             "output": args.output, "dtype": args.dtype})
    params = _load_weights(args.weights, args.dtype)
    if not Path(args.input).exists():
        raise UsageError(f"input not found: {args.input}")
    files = image_files(args.input)
    if not files:
        raise UsageError(f"no images in {args.input}")
    out_dir = ensure_dir(args.output)
    failures = []
    for path in files:
        try:
            image = read_image(path)
            out = hifi_forward(Tensor(image.data.astype(DTYPES[args.dtype])), params)
            write_image(out_dir / path.name, np.clip(out.data, 0.0, 1.0))
            print(f"wrote {out_dir / path.name}")
        except (ImageDecodeError, ValueError) as exc:
            failures.append((path.name, str(exc)))
    for name, msg in failures:
        print(f"error: {name}: {msg}", file=sys.stderr)
    if failures:
        print(f"{len(failures)} of {len(files)} file(s) failed", file=sys.stderr)
        return EXIT_PARTIAL
    return EXIT_OK


def _dataset(data_cfg, seed: int) -> tuple[list[ImagePair], list]:
    errors: list = []
    if data_cfg.synthetic:
        pairs = make_synthetic_pairs(data_cfg.synthetic_count, data_cfg.synthetic_size,
                                     data_cfg.degradation(), seed=seed)
        return pairs, errors
    if not data_cfg.degraded_dir or not data_cfg.gt_dir:
        raise ConfigError("degraded_dir/gt_dir: set both, or set synthetic = true")
    try:
        return load_pairs(data_cfg.degraded_dir, data_cfg.gt_dir, errors), errors
    except (OSError, ValueError) as exc:
        raise ConfigError(f"degraded_dir/gt_dir: {exc}") from None


def cmd_train(args) -> int:
    cfg, data_cfg = load_config(args.config)
    if args.synthetic:
        data_cfg.synthetic = True
    if args.output:
        data_cfg.output_dir = args.output
    print(f"[train] resolved config:\n{format_config(cfg, data_cfg)}")
    sys.stdout.flush()
    pairs, errors = _dataset(data_cfg, cfg.seed)
    for name, msg in errors:
        print(f"warning: skipped {name}: {msg}", file=sys.stderr)
    out = ensure_dir(data_cfg.output_dir)
    ckpt_dir = out / "checkpoints"

    def progress(step, value):
        if step % 10 == 0:
            print(f"step {step:6d}  loss {value:.6f}")

    try:
        result = train(pairs, cfg, checkpoint_dir=ckpt_dir, resume_from=data_cfg.resume or None,
                       on_step=progress)
    except TrainingDiverged as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_PARTIAL
    archive.save_weights(out / "weights.hifiw", result.params, meta={"steps": len(result.history)})
    with open(out / "loss.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(("step", "loss"))
        for i, value in enumerate(result.history, 1):
            w.writerow((i, repr(value)))
    manifest = {
        "train": cfg.to_dict(),
        "data": data_cfg.to_dict(),
        "pairs": len(pairs),
        "steps": len(result.history),
        "final_loss": result.history[-1] if result.history else None,
        "weights": "weights.hifiw",
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    print(f"wrote {out / 'weights.hifiw'} after {len(result.history)} steps")
    return EXIT_OK


def cmd_eval(args) -> int:
    _show_config("eval", {"weights": args.weights, "degraded": args.degraded, "gt": args.gt,
                          "report": args.report, "identity": args.identity, "dtype": args.dtype})
    params = None if args.identity else _load_weights(args.weights, args.dtype)
    errors: list = []
    try:
        pairs = load_pairs(args.degraded, args.gt, errors)
    except (OSError, ValueError) as exc:
        raise UsageError(str(exc)) from None
    report = metrics.evaluate_dataset(pairs, params, errors)
    csv_path, json_path = report.save(args.report)
    print(report.table())
    print(f"wrote {csv_path} and {json_path}")
    return EXIT_PARTIAL if report.errors else EXIT_OK


def cmd_metrics(args) -> int:
    _show_config("metrics", {"pred": args.pred, "gt": args.gt, "report": args.report})
    errors: list = []
    if Path(args.pred).is_dir():
        try:
            pairs = load_pairs(args.pred, args.gt, errors)
        except (OSError, ValueError) as exc:
            raise UsageError(str(exc)) from None
    else:
        try:
            pairs = [ImagePair(Path(args.pred).stem, read_image(args.pred), read_image(args.gt))]
        except (ImageDecodeError, ValueError) as exc:
            raise UsageError(str(exc)) from None
    report = metrics.evaluate_dataset(pairs, None, errors)
    for row in report.rows:
        print(f"{row.id}: mse={row.mse:.6g} psnr={row.psnr:.4f} ssim={row.ssim:.6f} er3c={row.er3c:.6g}")
    if args.report:
        report.save(args.report)
    return EXIT_PARTIAL if report.errors else EXIT_OK


def _visual(band: np.ndarray, detail: bool) -> np.ndarray:
    return 0.5 + band / 2 if detail else band / 2


def cmd_wavelet(args) -> int:
    _show_config("wavelet", {"input": args.input, "output": args.output, "verify": args.verify})
    try:
        image = read_image(args.input)
    except ImageDecodeError as exc:
        raise UsageError(str(exc)) from None
    out = ensure_dir(args.output)
    dec = haar.haar_forward(image)
    names = ("ll", "lh", "hl", "hh")
    for name, band in zip(names, dec.bands()):
        write_image(out / f"{name}.png", np.clip(_visual(band.data, name != "ll"), 0, 1))
    five = haar.make_five_inputs(image)
    for label, name, t in zip("bcde", names, five[1:]):
        write_image(out / f"input_{label}.png", np.clip(_visual(t.data, name != "ll"), 0, 1))
    print(f"wrote 4 sub-images and 4 upsampled inputs to {out}")
    if args.verify:
        single = Tensor(image.data.astype(np.float32))
        back = haar.haar_inverse(haar.haar_forward(single))
        err = float(np.max(np.abs(back.data - single.data)))
        print(f"max reconstruction error (float32): {err:.3e}")
        if err >= 1e-4:
            return EXIT_PARTIAL
    return EXIT_OK


def cmd_inspect(args) -> int:
    _show_config("inspect-weights", {"weights": args.weights})
    if not Path(args.weights).is_file():
        raise UsageError(f"weights not found: {args.weights}")
    try:
        manifest, _ = archive.read_manifest(args.weights)
    except (archive.ArchiveError, ValueError) as exc:
        raise UsageError(str(exc)) from None
    print(f"format_version: {manifest['format_version']}")
    print("config: " + json.dumps(manifest["config"], sort_keys=True))
    if manifest["meta"]:
        print("meta: " + json.dumps(manifest["meta"], sort_keys=True))
    total = 0
    for e in manifest["tensors"]:
        n = int(np.prod(e["shape"]))
        total += n
        print(f"  {e['name']:<40} {str(tuple(e['shape'])):<18} offset={e['offset']}")
    print(f"{len(manifest['tensors'])} tensors, {total} scalars")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hifinet", description="Underwater image enhancement toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress details")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("enhance", help="enhance an image or a directory of images")
    p.add_argument("--weights", required=True)
    p.add_argument("--input", required=True, help="image file or directory")
    p.add_argument("--output", required=True, help="output directory")
    p.add_argument("--dtype", choices=sorted(DTYPES), default="float32")
    p.set_defaults(func=cmd_enhance)

    p = sub.add_parser("train", help="train from a key = value config file")
    p.add_argument("--config", required=True)
    p.add_argument("--synthetic", action="store_true", help="use generated pairs instead of directories")
    p.add_argument("--output", help="override output_dir")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score enhanced images against ground truth")
    p.add_argument("--weights")
    p.add_argument("--degraded", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--report", required=True, help="report path; .csv and .json are written")
    p.add_argument("--identity", action="store_true", help="skip the network (enhanced = degraded)")
    p.add_argument("--dtype", choices=sorted(DTYPES), default="float32")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("wavelet", help="dump Haar sub-images of an image")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--verify", action="store_true", help="report round-trip reconstruction error")
    p.set_defaults(func=cmd_wavelet)

    p = sub.add_parser("metrics", help="MSE/PSNR/SSIM/ER3C between two images or directories")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--report")
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("inspect-weights", help="print a weight archive manifest")
    p.add_argument("--weights", required=True)
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
