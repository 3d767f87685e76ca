"""Matplotlib renderers for report artifacts.

Figures are presentation-only: every number they show comes from the JSON/CSV
report files, which remain the interface of record.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .evaluation import BoxplotStats, EvalReport


def boxplot_figure(
    stats_by_model: dict[str, BoxplotStats], metric: str, path: str | Path
) -> Path:
    """Quartile boxes with 1.5*IQR whiskers; dot marks the mean."""
    fig, ax = plt.subplots(figsize=(1.6 + 1.1 * len(stats_by_model), 3.6))
    boxes = []
    for name, s in stats_by_model.items():
        boxes.append(
            {
                "label": name,
                "med": s.median,
                "q1": s.q1,
                "q3": s.q3,
                "whislo": s.whisker_low,
                "whishi": s.whisker_high,
                "mean": s.mean,
                "fliers": [],
            }
        )
    ax.bxp(boxes, showmeans=True, meanprops=dict(marker="o", markerfacecolor="k"))
    ax.set_ylabel(metric)
    ax.grid(alpha=0.3, axis="y")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return Path(path)


def mae_map_figure(grid: np.ndarray, average: float, path: str | Path, title="") -> Path:
    fig, ax = plt.subplots(figsize=(4.2, 3.8))
    im = ax.imshow(np.asarray(grid), origin="lower", cmap="viridis")
    fig.colorbar(im, ax=ax, label="MAE (m/s)")
    ax.set_title(f"{title} mean {average:.3f} m/s".strip())
    ax.set_xticks([])
    ax.set_yticks([])
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return Path(path)


def psd_figure(curves: dict, path: str | Path) -> Path:
    fig, ax = plt.subplots(figsize=(4.6, 3.6))
    for name, curve in curves.items():
        ax.loglog(curve.frequencies, np.maximum(curve.power, 1e-300), label=name)
    ax.set_xlabel("frequency (cycles/pixel)")
    ax.set_ylabel("power")
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3, which="both")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return Path(path)


def pdf_figure(curves: dict, path: str | Path) -> Path:
    fig, ax = plt.subplots(figsize=(4.6, 3.6))
    for name, curve in curves.items():
        ax.plot(curve.points, curve.density, label=name)
    ax.set_xlabel("wind speed (m/s)")
    ax.set_ylabel("density (1/(m/s))")
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return Path(path)


def ramp_series_figure(
    power: np.ndarray, events, path: str | Path, label="power"
) -> Path:
    fig, ax = plt.subplots(figsize=(6.4, 3.2))
    ax.plot(np.arange(len(power)), power, lw=1.2, label=label)
    for e in events:
        color = "tab:green" if e.direction == "up" else "tab:red"
        ax.axvspan(e.start, e.end, alpha=0.25, color=color)
    ax.set_xlabel("hour")
    ax.set_ylabel("normalized power")
    ax.set_ylim(-0.05, 1.05)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return Path(path)


def render_report_figures(
    report: EvalReport, out_dir: str | Path, formats: tuple[str, ...] = ("png",)
) -> list[Path]:
    """Standard figure set for one report: boxplots, MAE maps, PSD, PDF."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for fmt in formats:
        for metric in ("rmse", "mae", "ssim"):
            if metric in report.aggregate:
                written.append(
                    boxplot_figure(
                        {report.model_id: report.aggregate[metric]},
                        metric.upper(),
                        out / f"box_{metric}.{fmt}",
                    )
                )
        for domain, entry in report.pixelwise.items():
            written.append(
                mae_map_figure(
                    np.asarray(entry["map"]),
                    entry["average"],
                    out / f"mae_map_domain{domain}.{fmt}",
                    title=f"{report.model_id} domain {domain}:",
                )
            )
        if report.psd_curves:
            written.append(psd_figure(report.psd_curves, out / f"psd.{fmt}"))
        if report.pdf_curves:
            written.append(pdf_figure(report.pdf_curves, out / f"pdf.{fmt}"))
    return written


def comparison_boxplot(
    reports: dict[str, EvalReport], metric: str, path: str | Path
) -> Path:
    stats = {name: r.aggregate[metric] for name, r in reports.items() if metric in r.aggregate}
    return boxplot_figure(stats, metric.upper(), path)
