"""Rendering for analysis and training results: aligned text tables for
the terminal, CSV for machines, matplotlib figures for eyes.

Figure rendering is headless (Agg); every writer takes an explicit
path and creates parent directories as needed.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .analysis import CalibrationResult, CostReport
from .train import MetricsRow

_KIND_COLORS = {
    "conv3x3": "#888888",
    "down": "#7570b3",
    "up": "#1b9e77",
    "skip": "#66a61e",
    "fgtb": "#d95f02",
}


def _prepare(path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


# ---------------------------------------------------------------------------
# cost reports
# ---------------------------------------------------------------------------


def cost_table(report: CostReport) -> str:
    """Aligned per-layer table with totals and the dense-attention reference."""
    header = f"{'layer':<18}{'kind':<9}{'level':>5}{'params':>12}{'MACs':>16}"
    lines = [header, "-" * len(header)]
    for r in report.rows:
        lines.append(f"{r.name:<18}{r.kind:<9}{r.level:>5}{r.params:>12,}{r.macs:>16,}")
    lines.append("-" * len(header))
    lines.append(f"{'total':<18}{'':<9}{'':>5}{report.total_params:>12,}{report.total_macs:>16,}")
    h, w = report.input_size
    hp, wp = report.padded_size
    lines.append(f"input {h}x{w} (padded {hp}x{wp}); FLOPs = 2 x MACs = {2 * report.total_macs:,}")
    lines.append(f"dense spatial attention reference: {report.dense_reference_macs:,} MACs")
    return "\n".join(lines)


def cost_json_dict(report: CostReport) -> dict:
    return {
        "input_size": list(report.input_size),
        "padded_size": list(report.padded_size),
        "total_params": report.total_params,
        "total_macs": report.total_macs,
        "total_flops": 2 * report.total_macs,
        "dense_reference_macs": report.dense_reference_macs,
        "rows": [
            {"name": r.name, "kind": r.kind, "level": r.level, "params": r.params, "macs": r.macs}
            for r in report.rows
        ],
    }


def write_cost_csv(report: CostReport, path: str | Path) -> Path:
    path = _prepare(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["name", "kind", "level", "params", "macs"])
        for r in report.rows:
            writer.writerow([r.name, r.kind, r.level, r.params, r.macs])
    return path


def write_cost_json(report: CostReport, path: str | Path) -> Path:
    path = _prepare(path)
    path.write_text(json.dumps(cost_json_dict(report), indent=2) + "\n")
    return path


def write_cost_figure(report: CostReport, path: str | Path) -> Path:
    """Horizontal bars, one per layer, params beside MACs."""
    path = _prepare(path)
    names = [r.name for r in report.rows]
    colors = [_KIND_COLORS.get(r.kind, "#333333") for r in report.rows]
    ys = range(len(names))
    height = max(3.0, 0.28 * len(names) + 1.2)
    fig, (ax_p, ax_m) = plt.subplots(1, 2, figsize=(11, height), sharey=True)
    ax_p.barh(ys, [r.params for r in report.rows], color=colors)
    ax_m.barh(ys, [r.macs for r in report.rows], color=colors)
    ax_p.set_yticks(list(ys), names, fontsize=7)
    ax_p.invert_yaxis()
    ax_p.set_xlabel("parameters")
    ax_m.set_xlabel("MACs")
    h, w = report.input_size
    fig.suptitle(f"per-layer cost at {h}x{w} "
                 f"(total {report.total_params:,} params, {report.total_macs:,} MACs)")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


# ---------------------------------------------------------------------------
# training logs
# ---------------------------------------------------------------------------


def write_metrics_csv(metrics: list[MetricsRow], path: str | Path) -> Path:
    path = _prepare(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "lr", "loss", "val_psnr"])
        for m in metrics:
            writer.writerow([m.iteration, f"{m.lr:.10g}", f"{m.loss:.10g}",
                             "" if m.val_psnr is None else f"{m.val_psnr:.6f}"])
    return path


def write_training_figure(metrics: list[MetricsRow], path: str | Path,
                          noisy_psnr: float | None = None) -> Path:
    """Loss curve with a rolling mean, and validation PSNR where logged."""
    path = _prepare(path)
    iters = [m.iteration for m in metrics]
    losses = [m.loss for m in metrics]
    fig, (ax_l, ax_p) = plt.subplots(1, 2, figsize=(10, 4))
    ax_l.plot(iters, losses, lw=0.6, alpha=0.5, label="loss")
    win = max(1, len(losses) // 40)
    if len(losses) >= win > 1:
        smooth = [sum(losses[max(0, i - win + 1) : i + 1]) / len(losses[max(0, i - win + 1) : i + 1])
                  for i in range(len(losses))]
        ax_l.plot(iters, smooth, lw=1.5, label=f"rolling mean ({win})")
    ax_l.set_xlabel("iteration")
    ax_l.set_ylabel("training loss")
    ax_l.legend(fontsize=8)
    val = [(m.iteration, m.val_psnr) for m in metrics if m.val_psnr is not None]
    if val:
        ax_p.plot([v[0] for v in val], [v[1] for v in val], marker="o", ms=3)
    if noisy_psnr is not None:
        ax_p.axhline(noisy_psnr, color="#888888", ls="--", lw=1, label="noisy input")
        ax_p.legend(fontsize=8)
    ax_p.set_xlabel("iteration")
    ax_p.set_ylabel("validation PSNR (dB)")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


# ---------------------------------------------------------------------------
# calibration residuals
# ---------------------------------------------------------------------------


def calibration_table(result: CalibrationResult) -> str:
    c = result.chosen
    lines = [
        f"chosen: expansion={c.expansion:g} skip={c.skip_mode} "
        f"counts_are_layers={c.counts_are_layers} refine_are_layers={c.refine_are_layers}",
        f"{'family':<8}{'computed':>14}{'target':>14}{'deviation':>11}",
    ]
    for r in result.rows:
        lines.append(f"{r.family:<8}{r.computed:>14,}{r.target:>14,}{r.deviation:>10.2%}")
    lines.append(f"worst deviation: {result.worst_deviation:.2%}")
    return "\n".join(lines)


def write_calibration_csv(result: CalibrationResult, path: str | Path) -> Path:
    path = _prepare(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["family", "computed", "target", "deviation"])
        for r in result.rows:
            writer.writerow([r.family, r.computed, r.target, f"{r.deviation:.6f}"])
    return path


def write_calibration_figure(result: CalibrationResult, path: str | Path) -> Path:
    path = _prepare(path)
    fig, ax = plt.subplots(figsize=(5, 3.5))
    families = [r.family for r in result.rows]
    devs = [100 * r.deviation for r in result.rows]
    ax.bar(families, devs, color="#d95f02")
    for band in (-5, 5):
        ax.axhline(band, color="#888888", ls="--", lw=1)
    ax.set_ylabel("deviation from published params (%)")
    ax.set_ylim(min(-6, min(devs) - 1), max(6, max(devs) + 1))
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
