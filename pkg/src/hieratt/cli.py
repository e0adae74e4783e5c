"""Command-line surface.

Subcommands:
  analyze    per-layer parameter/MAC table for a config and input size
  gradcheck  finite-difference verification of ops and the network
  fuse       collapse a trained model's rep branches for inference
  train-toy  train a small model on synthetic Gaussian denoising
  denoise    restore a PNM image with a trained model
  calibrate  search unstated hyperparameters against published counts
  selfcheck  run the invariant suite, nonzero exit on failure

Paths given to --out-dir (analyze, calibrate) or derived from --out
(train-toy) receive CSV and PNG artifacts next to the primary output.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import engine as T
from . import gradcheck, network
from .analysis import calibrate, cost_report
from .data import ImageBuffer, psnr, read_pnm, write_pnm
from .errors import ConfigError, HierattError
from .train import TrainConfig, train_toy


def _parse_size(text: str) -> tuple[int, int]:
    parts = text.lower().split("x")
    if len(parts) != 2:
        raise ConfigError(f"--size must look like HxW, got {text!r}")
    try:
        h, w = int(parts[0]), int(parts[1])
    except ValueError:
        raise ConfigError(f"--size must be two integers, got {text!r}") from None
    if h < 1 or w < 1:
        raise ConfigError(f"--size must be positive, got {text!r}")
    return h, w


def _cmd_analyze(args) -> int:
    from . import report as rpt

    config = network.named_config(args.config)
    h, w = _parse_size(args.size)
    rep = cost_report(config, h, w, fused=not args.unfused)
    if args.json:
        print(json.dumps(rpt.cost_json_dict(rep), indent=2))
    else:
        print(rpt.cost_table(rep))
    if args.out_dir:
        out = Path(args.out_dir)
        paths = [
            rpt.write_cost_csv(rep, out / "cost.csv"),
            rpt.write_cost_json(rep, out / "cost.json"),
            rpt.write_cost_figure(rep, out / "cost.png"),
        ]
        print("wrote " + ", ".join(str(p) for p in paths), file=sys.stderr)
    return 0


def _cmd_gradcheck(args) -> int:
    names = [args.op] if args.op else None
    check_network = args.op in (None, "network")
    rows = []
    if args.op != "network":
        rows = gradcheck.run(names=names, seed=args.seed)
    failed = False
    for name, worst, ok in rows:
        failed |= not ok
        print(f"{'PASS' if ok else 'FAIL'} {name:<24} max relative gap {worst:.3e}")
    if check_network:
        worst = gradcheck.check_model(seed=args.seed)
        ok = worst < 1e-3
        failed |= not ok
        print(f"{'PASS' if ok else 'FAIL'} {'network':<24} max relative gap {worst:.3e} (sampled)")
    return 1 if failed else 0


def _cmd_fuse(args) -> int:
    model = network.load_model(args.in_path)
    if model.fused:
        raise ConfigError(f"{args.in_path} is already fused")
    fused = network.fuse_model(model)
    network.save_model(fused, args.out)
    print(f"fused {model.store.total_elements():,} -> {fused.store.total_elements():,} "
          f"parameters; wrote {args.out}")
    return 0


def _cmd_train_toy(args) -> int:
    from . import report as rpt

    model_config = network.named_config(args.config) if args.config else network.PRESETS["toy"]
    cfg = TrainConfig(seed=args.seed, iterations=args.iters, sigma=args.sigma)
    t0 = time.perf_counter()
    result = train_toy(model_config, cfg)
    wall = time.perf_counter() - t0
    network.save_model(result.model, args.out)
    metrics_path = rpt.write_metrics_csv(result.metrics, f"{args.out}.metrics.csv")
    figure_path = rpt.write_training_figure(result.metrics, f"{args.out}.curves.png",
                                            noisy_psnr=result.noisy_psnr)
    print(f"trained {args.iters} iterations in {wall:.1f}s")
    print(f"noisy input PSNR {result.noisy_psnr:.2f} dB, "
          f"restored PSNR {result.final_psnr:.2f} dB "
          f"({result.final_psnr - result.noisy_psnr:+.2f} dB)")
    print(f"wrote {args.out}, {metrics_path}, {figure_path}")
    return 0


def _cmd_denoise(args) -> int:
    model = network.load_model(args.model)
    image = read_pnm(args.in_path)
    if image.channels != model.config.in_channels:
        raise ConfigError(
            f"model expects {model.config.in_channels} channel(s), "
            f"{args.in_path} has {image.channels}"
        )
    with T.no_grad():
        out = network.forward(model, image.to_tensor(dtype=model.config.np_dtype))
    restored = ImageBuffer.from_floats(np.clip(out.data.astype(np.float64), 0.0, 1.0))
    write_pnm(restored, args.out)
    print(f"wrote {args.out} ({restored.w}x{restored.h}, "
          f"{'gray' if restored.channels == 1 else 'color'}); "
          f"output vs input PSNR {psnr(restored, image):.2f} dB")
    return 0


def _cmd_calibrate(args) -> int:
    from . import report as rpt

    result = calibrate()
    if args.json:
        print(json.dumps({
            "chosen": {
                "expansion": result.chosen.expansion,
                "skip_mode": result.chosen.skip_mode,
                "counts_are_layers": result.chosen.counts_are_layers,
                "refine_are_layers": result.chosen.refine_are_layers,
            },
            "rows": [
                {"family": r.family, "computed": r.computed,
                 "target": r.target, "deviation": r.deviation}
                for r in result.rows
            ],
            "worst_deviation": result.worst_deviation,
        }, indent=2))
    else:
        print(rpt.calibration_table(result))
    if args.out_dir:
        out = Path(args.out_dir)
        paths = [
            rpt.write_calibration_csv(result, out / "calibration.csv"),
            rpt.write_calibration_figure(result, out / "calibration.png"),
        ]
        print("wrote " + ", ".join(str(p) for p in paths), file=sys.stderr)
    return 0


def _cmd_selfcheck(_args) -> int:
    from .selfcheck import run_all

    results = run_all()
    failed = [r for r in results if not r.ok]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return 1 if failed else 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hieratt",
        description="Hierarchical window/grid attention restoration toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("analyze", help="parameter and MAC accounting")
    p.add_argument("--config", required=True,
                   help="preset name (small|base|base+|toy) or config JSON path")
    p.add_argument("--size", required=True, help="input size as HxW, e.g. 256x256")
    p.add_argument("--json", action="store_true", help="emit JSON instead of a table")
    p.add_argument("--unfused", action="store_true",
                   help="count the training-form FFN branches instead of the fused form")
    p.add_argument("--out-dir", help="also write cost.csv, cost.json, cost.png here")
    p.set_defaults(fn=_cmd_analyze)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--op", help="check a single op by name ('network' for the sampled end-to-end check)")
    p.set_defaults(fn=_cmd_gradcheck)

    p = sub.add_parser("fuse", help="collapse rep FFN branches for inference")
    p.add_argument("--in", dest="in_path", required=True, metavar="MODEL")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_fuse)

    p = sub.add_parser("train-toy", help="train on synthetic Gaussian denoising")
    p.add_argument("--out", required=True, help="where to write the trained model (.iptw)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--iters", type=int, default=2000)
    p.add_argument("--sigma", type=float, default=25.0)
    p.add_argument("--config", help="model config JSON path or preset (default: toy preset)")
    p.set_defaults(fn=_cmd_train_toy)

    p = sub.add_parser("denoise", help="restore a PNM image")
    p.add_argument("--model", required=True)
    p.add_argument("--in", dest="in_path", required=True, metavar="IMG")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_denoise)

    p = sub.add_parser("calibrate", help="hyperparameter search against published parameter counts")
    p.add_argument("--json", action="store_true")
    p.add_argument("--out-dir", help="also write calibration.csv and calibration.png here")
    p.set_defaults(fn=_cmd_calibrate)

    p = sub.add_parser("selfcheck", help="run the invariant suite")
    p.set_defaults(fn=_cmd_selfcheck)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except HierattError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
