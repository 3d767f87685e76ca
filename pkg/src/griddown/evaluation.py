"""Evaluation metrics, spectra, density curves and comparison experiments.

All reported metrics are computed in physical units (m/s) on the interior of
the target lattice after removing the padding margin.  Aggregated RMSE / MAE
/ SSIM follow a two-stage reduction: per-sample per-domain values first, then
the mean across domains at each timestamp; boxplot statistics summarize the
resulting distribution.

The spectrum is an azimuthal average: squared 2D Fourier magnitudes binned
over integer-radius annuli in frequency-index space, averaged over samples.
The wind-speed distribution is a Gaussian kernel density estimate evaluated
on a fixed grid of points.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .datastore import (
    RegriddedView,
    batches,
    data_stats,
    destandardize,
)
from .errors import NonSquareField, ShapeMismatch
from .model import (
    ArchitectureConfig,
    ModelBundle,
    arch_strategy_for,
    assemble_inputs,
    baseline_bilinear,
    build_bundle,
)
from .synthetic import catalog_subset
from .training import SsimConfig, TrainingConfig, ssim_per_sample, train, transfer

KDE_BANDWIDTH = 0.70
KDE_POINTS = 55


@dataclass(frozen=True)
class BoxplotStats:
    """Quartile box with 1.5*IQR whiskers clipped to the data."""

    mean: float
    median: float
    q1: float
    q3: float
    whisker_low: float
    whisker_high: float

    @classmethod
    def from_values(cls, values: np.ndarray) -> "BoxplotStats":
        v = np.asarray(values, dtype=np.float64)
        if v.size == 0:
            raise ValueError("no values to summarize")
        q1, med, q3 = np.quantile(v, [0.25, 0.5, 0.75])  # linear interpolation
        iqr = q3 - q1
        lo_fence, hi_fence = q1 - 1.5 * iqr, q3 + 1.5 * iqr
        return cls(
            mean=float(v.mean()),
            median=float(med),
            q1=float(q1),
            q3=float(q3),
            whisker_low=float(v[v >= lo_fence].min()),
            whisker_high=float(v[v <= hi_fence].max()),
        )

    def to_json(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_json(cls, obj) -> "BoxplotStats":
        return cls(**obj)


@dataclass
class PsdCurve:
    frequencies: np.ndarray  # cycles/pixel, in (0, 0.5]
    power: np.ndarray

    def __post_init__(self):
        self.frequencies = np.asarray(self.frequencies, dtype=np.float64)
        self.power = np.asarray(self.power, dtype=np.float64)
        if np.any(self.frequencies <= 0) or np.any(self.frequencies > 0.5):
            raise ValueError("frequencies must lie in (0, 0.5]")
        if np.any(self.power < 0):
            raise ValueError("power must be nonnegative")

    def to_rows(self):
        return list(zip(self.frequencies.tolist(), self.power.tolist()))


@dataclass
class PdfCurve:
    points: np.ndarray  # m/s
    density: np.ndarray  # 1/(m/s)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        self.density = np.asarray(self.density, dtype=np.float64)
        if np.any(self.density < 0):
            raise ValueError("density must be nonnegative")
        integral = float(np.trapezoid(self.density, self.points))
        if not (0.97 <= integral <= 1.03):
            raise ValueError(f"density integrates to {integral:.4f}, outside [0.97, 1.03]")

    def to_rows(self):
        return list(zip(self.points.tolist(), self.density.tolist()))


# -- core metric math ---------------------------------------------------------


def _check_aligned(preds: np.ndarray, targets: np.ndarray):
    if preds.shape != targets.shape:
        raise ShapeMismatch(f"prediction shape {preds.shape} != target shape {targets.shape}")


def per_sample_metrics(
    preds: np.ndarray, targets: np.ndarray, ssim_cfg: SsimConfig | None = None
) -> dict[str, np.ndarray]:
    """RMSE, MAE and SSIM per sample field, in the fields' physical units."""
    _check_aligned(preds, targets)
    p = preds.astype(np.float64)
    t = targets.astype(np.float64)
    err = p - t
    rmse = np.sqrt((err**2).mean(axis=(1, 2)))
    mae = np.abs(err).mean(axis=(1, 2))
    if ssim_cfg is None:
        span = float(t.max() - t.min())
        ssim_cfg = SsimConfig(window=7, dynamic_range=max(span, 1e-6))
    ssim_vals = ssim_per_sample(
        torch.from_numpy(p), torch.from_numpy(t), ssim_cfg
    ).numpy()
    return {"rmse": rmse, "mae": mae, "ssim": ssim_vals}


def aggregate_metrics(
    preds: np.ndarray,
    targets: np.ndarray,
    domain_ids: np.ndarray | None = None,
    timestamps: np.ndarray | None = None,
    ssim_cfg: SsimConfig | None = None,
) -> dict:
    """Two-stage aggregation: per-domain sample metrics, then the mean across
    domains at each timestamp; boxplot statistics of both tiers."""
    per_sample = per_sample_metrics(preds, targets, ssim_cfg)
    n = len(preds)
    domain_ids = np.zeros(n, dtype=int) if domain_ids is None else np.asarray(domain_ids)
    timestamps = np.arange(n) if timestamps is None else np.asarray(timestamps)

    per_domain = {}
    for d in np.unique(domain_ids):
        sel = domain_ids == d
        per_domain[int(d)] = {
            m: BoxplotStats.from_values(vals[sel]) for m, vals in per_sample.items()
        }

    aggregate = {}
    uniq_t = np.unique(timestamps)
    for m, vals in per_sample.items():
        cross = np.array([vals[timestamps == t].mean() for t in uniq_t])
        aggregate[m] = BoxplotStats.from_values(cross)

    return {"aggregate": aggregate, "per_domain": per_domain, "per_sample": per_sample}


def pixelwise_mae(preds: np.ndarray, targets: np.ndarray) -> tuple[np.ndarray, float]:
    """Temporal mean absolute error per pixel plus its domain average."""
    _check_aligned(preds, targets)
    if len(preds) < 1:
        raise ValueError("need at least one sample")
    grid = np.abs(preds.astype(np.float64) - targets.astype(np.float64)).mean(axis=0)
    return grid.astype(np.float32), float(grid.mean())


def spectral_accounting(field: np.ndarray) -> dict:
    """Full radial power partition of one field (used for identity checks).

    Returns annulus sums/counts over every bin including those beyond the
    0.5 cycles/pixel corner region, the DC power, and the total power.
    """
    f = np.asarray(field, dtype=np.float64)
    if f.ndim != 2 or f.shape[0] != f.shape[1]:
        raise NonSquareField(f"expected a square 2D field, got {f.shape}")
    n = f.shape[0]
    power = np.abs(np.fft.fft2(f)) ** 2
    kx = np.fft.fftfreq(n) * n
    radius = np.sqrt(kx[None, :] ** 2 + kx[:, None] ** 2)
    rbin = np.rint(radius).astype(int)
    sums = np.bincount(rbin.ravel(), weights=power.ravel())
    counts = np.bincount(rbin.ravel())
    return {
        "bin_sums": sums,
        "bin_counts": counts,
        "dc_power": float(power[0, 0]),
        "total_power": float(power.sum()),
        "n": n,
    }


def psd(fields: np.ndarray) -> PsdCurve:
    """Azimuthally averaged power spectrum, averaged over samples."""
    arr = np.asarray(fields)
    if arr.ndim == 2:
        arr = arr[None]
    n = arr.shape[-1]
    if arr.shape[-2] != n:
        raise NonSquareField(f"fields must be square, got {arr.shape[-2:]}")
    if n < 8:
        raise NonSquareField(f"field side {n} is below the minimum of 8")
    n_bins = n // 2
    acc = np.zeros(n_bins, dtype=np.float64)
    for f in arr:
        a = spectral_accounting(f)
        means = a["bin_sums"][1 : n_bins + 1] / np.maximum(a["bin_counts"][1 : n_bins + 1], 1)
        acc += means
    freqs = np.arange(1, n_bins + 1) / n
    return PsdCurve(frequencies=freqs, power=acc / len(arr))


def pdf(
    fields: np.ndarray, bandwidth: float = KDE_BANDWIDTH, points: int = KDE_POINTS
) -> PdfCurve:
    """Gaussian kernel density of all pixel values on a fixed point grid."""
    if bandwidth <= 0:
        raise ValueError("bandwidth must be > 0")
    pixels = np.asarray(fields, dtype=np.float64).ravel()
    if pixels.size == 0:
        raise ValueError("need at least one field")
    grid = np.linspace(0.0, float(pixels.max()) + 3.0 * bandwidth, points)
    norm = 1.0 / (pixels.size * bandwidth * math.sqrt(2.0 * math.pi))
    density = np.zeros(points, dtype=np.float64)
    chunk = 131072
    for i in range(0, pixels.size, chunk):
        z = (grid[None, :] - pixels[i : i + chunk, None]) / bandwidth
        density += np.exp(-0.5 * z * z).sum(axis=0)
    return PdfCurve(points=grid, density=density * norm)


# -- model evaluation ---------------------------------------------------------


@dataclass
class EvalReport:
    model_id: str
    dataset_digest: str
    aggregate: dict  # metric -> BoxplotStats
    per_domain: dict  # domain -> metric -> BoxplotStats
    pixelwise: dict  # domain -> {"map": 2D list, "average": float}
    psd_curves: dict  # source -> PsdCurve
    pdf_curves: dict  # source -> PdfCurve

    def mean_rmse(self) -> float:
        return self.aggregate["rmse"].mean

    def mean_ssim(self) -> float:
        return self.aggregate["ssim"].mean

    def to_json(self) -> dict:
        return {
            "model_id": self.model_id,
            "dataset_digest": self.dataset_digest,
            "aggregate": {m: s.to_json() for m, s in self.aggregate.items()},
            "per_domain": {
                str(d): {m: s.to_json() for m, s in metrics.items()}
                for d, metrics in self.per_domain.items()
            },
            "pixelwise": {
                str(d): {"map": v["map"], "average": v["average"]}
                for d, v in self.pixelwise.items()
            },
            "psd_curves": {
                k: {"frequencies": c.frequencies.tolist(), "power": c.power.tolist()}
                for k, c in self.psd_curves.items()
            },
            "pdf_curves": {
                k: {"points": c.points.tolist(), "density": c.density.tolist()}
                for k, c in self.pdf_curves.items()
            },
        }

    @classmethod
    def from_json(cls, obj: dict) -> "EvalReport":
        return cls(
            model_id=obj["model_id"],
            dataset_digest=obj["dataset_digest"],
            aggregate={m: BoxplotStats.from_json(s) for m, s in obj["aggregate"].items()},
            per_domain={
                int(d): {m: BoxplotStats.from_json(s) for m, s in metrics.items()}
                for d, metrics in obj["per_domain"].items()
            },
            pixelwise={
                int(d): {"map": v["map"], "average": v["average"]}
                for d, v in obj["pixelwise"].items()
            },
            psd_curves={
                k: PsdCurve(np.asarray(c["frequencies"]), np.asarray(c["power"]))
                for k, c in obj["psd_curves"].items()
            },
            pdf_curves={
                k: PdfCurve(np.asarray(c["points"]), np.asarray(c["density"]))
                for k, c in obj["pdf_curves"].items()
            },
        )

    def write(self, out_dir: str | Path) -> list[Path]:
        """report.json plus one CSV per curve; returns written paths."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        written = [out / "report.json"]
        (out / "report.json").write_text(json.dumps(self.to_json(), indent=1))
        for kind, curves, header in (
            ("psd", self.psd_curves, "frequency,power"),
            ("pdf", self.pdf_curves, "speed,density"),
        ):
            for source, curve in curves.items():
                path = out / f"{kind}_{source}.csv"
                rows = "\n".join(f"{a:.9g},{b:.9g}" for a, b in curve.to_rows())
                path.write_text(header + "\n" + rows + "\n")
                written.append(path)
        return written


def predict_dataset(bundle: ModelBundle, data, split: str = "test", batch_size: int = 64):
    """Run inference over a split; returns physical-unit arrays."""
    net = bundle.net
    net.eval()
    preds, targets, skips, domains, stamps = [], [], [], [], []
    with torch.no_grad():
        for batch in batches(data, split, batch_size, shuffle=False):
            inputs, skip, _ = assemble_inputs(batch, data.catalog, bundle.config, bundle.stats)
            out = net(inputs, skip).numpy()
            preds.append(destandardize(out, bundle.stats))
            targets.append(batch.predictand)
            skips.append(batch.skip_uv10)
            domains.append(batch.domain_ids)
            stamps.append(batch.timestamps)
    return (
        np.concatenate(preds),
        np.concatenate(targets),
        np.concatenate(skips),
        np.concatenate(domains),
        np.concatenate(stamps),
    )


def evaluate_model(
    bundle: ModelBundle,
    data,
    split: str = "test",
    model_id: str = "model",
    include_baseline_curves: bool = True,
) -> EvalReport:
    """Full metric report for one bundle on one data pool."""
    geometry = bundle.geometry
    preds, targets, skips, domains, stamps = predict_dataset(bundle, data, split)
    baseline = baseline_bilinear(skips, geometry)

    crop = geometry.crop_interior
    p, t, b = crop(preds), crop(targets), crop(baseline)

    metrics = aggregate_metrics(p, t, domains, stamps)
    pixel = {}
    for d in np.unique(domains):
        sel = domains == d
        grid, avg = pixelwise_mae(p[sel], t[sel])
        pixel[int(d)] = {"map": grid.tolist(), "average": avg}

    psd_curves = {"prediction": psd(p), "truth": psd(t)}
    pdf_curves = {"prediction": pdf(p), "truth": pdf(t)}
    if include_baseline_curves:
        psd_curves["baseline"] = psd(b)
        pdf_curves["baseline"] = pdf(b)

    return EvalReport(
        model_id=model_id,
        dataset_digest=data.digest(),
        aggregate=metrics["aggregate"],
        per_domain=metrics["per_domain"],
        pixelwise=pixel,
        psd_curves=psd_curves,
        pdf_curves=pdf_curves,
    )


def baseline_report(data, split: str = "test") -> EvalReport:
    """Metrics for the no-parameter bilinear baseline on a data pool."""
    geometry = data.geometry
    targets, skips, domains, stamps = [], [], [], []
    for batch in batches(data, split, 64, shuffle=False):
        targets.append(batch.predictand)
        skips.append(batch.skip_uv10)
        domains.append(batch.domain_ids)
        stamps.append(batch.timestamps)
    targets = np.concatenate(targets)
    skips = np.concatenate(skips)
    domains = np.concatenate(domains)
    stamps = np.concatenate(stamps)
    baseline = baseline_bilinear(skips, geometry)
    crop = geometry.crop_interior
    p, t = crop(baseline), crop(targets)
    metrics = aggregate_metrics(p, t, domains, stamps)
    pixel = {}
    for d in np.unique(domains):
        sel = domains == d
        grid, avg = pixelwise_mae(p[sel], t[sel])
        pixel[int(d)] = {"map": grid.tolist(), "average": avg}
    return EvalReport(
        model_id="baseline_bilinear",
        dataset_digest=data.digest(),
        aggregate=metrics["aggregate"],
        per_domain=metrics["per_domain"],
        pixelwise=pixel,
        psd_curves={"baseline": psd(p), "truth": psd(t)},
        pdf_curves={"baseline": pdf(p), "truth": pdf(t)},
    )


# -- experiment harness -------------------------------------------------------


@dataclass
class ExperimentPlan:
    """A named comparison: which models to train and where to evaluate them.

    kinds:
      strategies      - one model per grid-alignment strategy on shared data
      configurations  - one model per named domain grouping
      transfer        - general / zero / specific models on a target domain
      ablation        - one model per predictor subset
    """

    kind: str
    architecture: dict = field(default_factory=dict)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    strategies: tuple[str, ...] = ("pre_bilinear", "pre_nearest", "native")
    subsets: tuple[str, ...] = ("full", "uv_only", "no_wind")
    configurations: dict = field(default_factory=dict)  # name -> list of dirs
    transfer_training: TrainingConfig | None = None
    zero_training: TrainingConfig | None = None
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("strategies", "configurations", "transfer", "ablation"):
            raise ValueError(f"unknown experiment kind {self.kind!r}")


def summarize(reports: dict[str, EvalReport]) -> list[dict]:
    """Rank models by mean RMSE (ascending); carries mean SSIM alongside."""
    rows = [
        {
            "model": name,
            "mean_rmse": r.mean_rmse(),
            "mean_ssim": r.mean_ssim(),
        }
        for name, r in reports.items()
    ]
    rows.sort(key=lambda row: row["mean_rmse"])
    baseline = next((r for r in rows if r["model"].startswith("baseline")), None)
    for row in rows:
        row["beats_baseline"] = (
            bool(row["mean_rmse"] < baseline["mean_rmse"]) if baseline else None
        )
    return rows


def _train_one(data, architecture: dict, tcfg: TrainingConfig, seed: int, strategy: str):
    cfg = ArchitectureConfig.build(
        data.catalog, data.geometry, strategy=arch_strategy_for(strategy), **architecture
    )
    bundle = build_bundle(cfg, data.geometry, seed=seed, stats=data_stats(data))
    return train(bundle, data, tcfg)


def run_strategy_experiment(plan: ExperimentPlan, data) -> dict:
    """Train one model per grid-alignment strategy on the same native data."""
    if data.strategy != "native":
        raise ValueError("strategy experiments start from native-resolution data")
    reports, bundles, records = {}, {}, {}
    for strategy in plan.strategies:
        view = data if strategy == "native" else RegriddedView(data, strategy)
        bundle, record = _train_one(view, plan.architecture, plan.training, plan.seed, strategy)
        reports[strategy] = evaluate_model(bundle, view, model_id=strategy)
        bundles[strategy] = bundle
        records[strategy] = record
    reports["baseline_bilinear"] = baseline_report(data)
    return {"reports": reports, "summary": summarize(reports), "bundles": bundles, "records": records}


def run_configuration_experiment(plan: ExperimentPlan, open_data) -> dict:
    """Train the native-strategy model once per named domain grouping."""
    reports, bundles = {}, {}
    for name, roots in plan.configurations.items():
        data = open_data(roots)
        bundle, _ = _train_one(data, plan.architecture, plan.training, plan.seed, "native")
        reports[name] = evaluate_model(bundle, data, model_id=name)
        reports[f"baseline_{name}"] = baseline_report(data)
        bundles[name] = bundle
    return {"reports": reports, "summary": summarize(reports), "bundles": bundles}


def run_transfer_experiment(plan: ExperimentPlan, general_data, target_data) -> dict:
    """General vs zero vs specific (fine-tuned) on a held-out domain."""
    general, _ = _train_one(general_data, plan.architecture, plan.training, plan.seed, "native")
    zero_cfg = plan.zero_training or plan.training
    zero, _ = _train_one(target_data, plan.architecture, zero_cfg, plan.seed + 1, "native")
    tcfg = plan.transfer_training or TrainingConfig.transfer_defaults()
    specific, _ = transfer(general, target_data, tcfg)

    reports = {
        "general": evaluate_model(general, target_data, model_id="general"),
        "zero": evaluate_model(zero, target_data, model_id="zero"),
        "specific": evaluate_model(specific, target_data, model_id="specific"),
        "baseline_bilinear": baseline_report(target_data),
    }
    bundles = {"general": general, "zero": zero, "specific": specific}
    return {"reports": reports, "summary": summarize(reports), "bundles": bundles}


def run_ablation_experiment(plan: ExperimentPlan, data) -> dict:
    """Full catalog vs wind-only vs wind-free predictor sets."""
    reports, bundles = {}, {}
    for subset in plan.subsets:
        sub_catalog = catalog_subset(data.catalog, subset)
        cfg = ArchitectureConfig.build(
            sub_catalog, data.geometry, strategy=arch_strategy_for(data.strategy),
            **plan.architecture,
        )
        bundle = build_bundle(cfg, data.geometry, seed=plan.seed, stats=data_stats(data))
        bundle, _ = _train_with_catalog(bundle, data, sub_catalog, plan.training)
        reports[subset] = _evaluate_with_catalog(bundle, data, sub_catalog, subset)
        bundles[subset] = bundle
    reports["baseline_bilinear"] = baseline_report(data)
    return {"reports": reports, "summary": summarize(reports), "bundles": bundles}


class _CatalogView:
    """Expose a data pool under a restricted predictor catalog."""

    def __init__(self, data, catalog):
        self._data = data
        self.catalog = catalog
        self.geometry = data.geometry
        self.strategy = data.strategy

    def n_samples(self, split):
        return self._data.n_samples(split)

    def digest(self):
        return self._data.digest()

    def get_batch(self, split, sel):
        return self._data.get_batch(split, sel)

    def _global_index(self, split):
        return self._data._global_index(split)


def _train_with_catalog(bundle, data, catalog, tcfg):
    view = _CatalogView(data, catalog)
    return train(bundle, view, tcfg)


def _evaluate_with_catalog(bundle, data, catalog, model_id):
    view = _CatalogView(data, catalog)
    return evaluate_model(bundle, view, model_id=model_id)
