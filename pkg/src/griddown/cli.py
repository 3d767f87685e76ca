"""Command-line surface: generate | train | transfer | evaluate | ablate | ramps | plot.

Every command reads a JSON config (`--config`), applies dotted-path overrides
(`--set a.b.c=value`), validates against a strict schema (unknown keys are
rejected), runs, and writes a `run.json` provenance record beside its
outputs.  Errors exit with machine-readable JSON on stderr: config problems
exit 2, missing inputs 3, compute failures 4.

Reports render matplotlib figures next to their JSON/CSV outputs; figures
carry no acceptance weight.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .datastore import (
    DatasetReader,
    MultiDomainData,
    RegriddedView,
    SplitPlan,
    STRATEGIES,
    data_stats,
    materialize,
)
from .errors import ComputeFailure, ConfigInvalid, GriddownError, MissingArtifact
from .evaluation import (
    EvalReport,
    ExperimentPlan,
    evaluate_model,
    baseline_report,
    run_ablation_experiment,
    summarize,
)
from .grids import DomainGeometry, canonical_geometry, mini_geometry
from .model import (
    ArchitectureConfig,
    arch_strategy_for,
    build_bundle,
    load_bundle,
    parameter_census,
    save_bundle,
)
from .ramps import (
    detect_ramps,
    ramp_concordance,
    read_speed_csv,
    speeds_to_power_series,
    write_events_csv,
    DEFAULT_ROUGHNESS_M,
    DEFAULT_HUB_HEIGHT_M,
)
from .synthetic import GeneratorConfig, WeatherGenerator, default_catalog
from .training import TrainingConfig, train, transfer

# -- config plumbing ----------------------------------------------------------

_GEN_FIELDS = {k: (int, float) for k in GeneratorConfig().to_json()}
_ARCH_FIELDS = {
    "branch_channels": int,
    "base_filters": int,
    "depth": int,
    "kernel_size": int,
    "leaky_slope": (int, float),
    "dropout_rate": (int, float),
}
_TRAIN_FIELDS = {
    "learning_rate": (int, float),
    "max_epochs": int,
    "batch_size": int,
    "loss_weight": (int, float),
    "early_stop_patience": int,
    "plateau_patience": int,
    "plateau_factor": (int, float),
    "monitor": str,
    "seed": int,
    "ssim_window": int,
}

SCHEMAS = {
    "generate": {
        "geometry": {"kind": str, "rotation_offset_deg": (int, float)},
        "generator": _GEN_FIELDS,
        "domains": int,
        "volume": {"train": int, "val": int, "test": int},
        "strategy": str,
        "shuffle_seed": int,
        "out": str,
    },
    "train": {
        "datasets": list,
        "strategy": str,
        "architecture": _ARCH_FIELDS,
        "training": _TRAIN_FIELDS,
        "out": str,
    },
    "transfer": {
        "general": str,
        "datasets": list,
        "training": _TRAIN_FIELDS,
        "out": str,
    },
    "evaluate": {
        "bundle": str,
        "datasets": list,
        "strategy": str,
        "split": str,
        "figures": bool,
        "baseline": bool,
        "out": str,
    },
    "ablate": {
        "datasets": list,
        "subsets": list,
        "architecture": _ARCH_FIELDS,
        "training": _TRAIN_FIELDS,
        "out": str,
    },
    "ramps": {
        "series": str,
        "truth": str,
        "threshold": (int, float),
        "window": int,
        "roughness_m": (int, float),
        "hub_height_m": (int, float),
        "out": str,
    },
    "plot": {"reports": list, "out": str},
}


def validate_config(obj, schema, path="config"):
    if not isinstance(obj, dict):
        raise ConfigInvalid(f"{path}: expected an object")
    for key, value in obj.items():
        if key not in schema:
            raise ConfigInvalid(f"{path}: unknown key {key!r}")
        spec = schema[key]
        where = f"{path}.{key}"
        if isinstance(spec, dict):
            validate_config(value, spec, where)
        elif spec is list:
            if not isinstance(value, list):
                raise ConfigInvalid(f"{where}: expected a list")
        elif spec is bool:
            if not isinstance(value, bool):
                raise ConfigInvalid(f"{where}: expected a boolean")
        else:
            if isinstance(value, bool) or not isinstance(value, spec):
                raise ConfigInvalid(f"{where}: expected {spec}, got {type(value).__name__}")
    return obj


def apply_overrides(config: dict, pairs: list[str]) -> dict:
    for pair in pairs or []:
        if "=" not in pair:
            raise ConfigInvalid(f"--set needs key=value, got {pair!r}")
        dotted, raw = pair.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = config
        parts = dotted.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigInvalid(f"--set path {dotted!r} crosses a non-object")
        node[parts[-1]] = value
    return config


def load_config(args, command: str) -> dict:
    config = {}
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise MissingArtifact(f"config file not found: {path}")
        try:
            config = json.loads(path.read_text())
        except json.JSONDecodeError as e:
            raise ConfigInvalid(f"config is not valid JSON: {e}") from e
    config = apply_overrides(config, args.set)
    if args.out:
        config["out"] = args.out
    validate_config(config, SCHEMAS[command])
    if "out" not in config:
        raise ConfigInvalid("an output directory is required (config key 'out' or --out)")
    return config


def _config_digest(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()[:16]


def write_run_record(
    out_dir: Path, command: str, config: dict, outputs, t0: float, seed=None
):
    import torch

    record = {
        "command": command,
        "config": config,
        "config_digest": _config_digest(config),
        "seed_flag": seed,
        "versions": {
            "griddown": __version__,
            "numpy": np.__version__,
            "torch": torch.__version__,
        },
        "wall_time_s": round(time.perf_counter() - t0, 3),
        "outputs": [str(p) for p in outputs],
    }
    (out_dir / "run.json").write_text(json.dumps(record, indent=1))


def _open_pool(roots: list, strategy_view: str | None = None):
    for root in roots:
        if not Path(root).exists():
            raise MissingArtifact(f"dataset not found: {root}")
    pool = (
        DatasetReader(roots[0])
        if len(roots) == 1
        else MultiDomainData.open(list(roots))
    )
    if strategy_view and strategy_view != pool.strategy:
        pool = RegriddedView(pool, strategy_view)
    return pool


def _geometry_from_config(config: dict) -> DomainGeometry:
    geo_cfg = config.get("geometry", {})
    kind = geo_cfg.get("kind", "canonical")
    offset = geo_cfg.get("rotation_offset_deg", 15.0)
    if kind == "canonical":
        return canonical_geometry(rotation_offset_deg=offset)
    if kind == "mini":
        return mini_geometry(rotation_offset_deg=offset)
    raise ConfigInvalid(f"geometry.kind must be canonical or mini, got {kind!r}")


# -- commands -----------------------------------------------------------------


def cmd_generate(args):
    config = load_config(args, "generate")
    out = Path(config["out"])
    geometry = _geometry_from_config(config)
    gen_cfg = GeneratorConfig.from_json(config.get("generator", {}))
    if args.seed is not None:
        gen_cfg = GeneratorConfig.from_json({**gen_cfg.to_json(), "seed": args.seed})
    volume = {"train": 2000, "val": 250, "test": 250, **config.get("volume", {})}
    plan = SplitPlan.desk_scale(
        volume["train"], volume["val"], volume["test"],
        shuffle_seed=config.get("shuffle_seed", 0),
    )
    strategy = config.get("strategy", "native")
    if strategy not in STRATEGIES:
        raise ConfigInvalid(f"strategy must be one of {STRATEGIES}")
    n_domains = config.get("domains", 1)
    outputs = []
    for d in range(n_domains):
        cfg_d = GeneratorConfig.from_json(
            {
                **gen_cfg.to_json(),
                "seed": gen_cfg.seed + 31 * d,
                "domain_seed": gen_cfg.domain_seed + 1000 * d,
            }
        )
        generator = WeatherGenerator(geometry, cfg_d, catalog=default_catalog())
        target = out / f"domain_{d}" if n_domains > 1 else out / "dataset"
        materialize(generator, plan, target, strategy=strategy, workers=args.workers)
        outputs.append(target / "manifest.json")
    return outputs, config


def _training_config(config: dict, seed_flag) -> TrainingConfig:
    fields = dict(config.get("training", {}))
    if seed_flag is not None:
        fields["seed"] = seed_flag
    return TrainingConfig.from_json({**TrainingConfig().to_json(), **fields})


def cmd_train(args):
    config = load_config(args, "train")
    if not config.get("datasets"):
        raise ConfigInvalid("train needs at least one dataset")
    pool = _open_pool(config["datasets"], config.get("strategy"))
    tcfg = _training_config(config, args.seed)
    arch = ArchitectureConfig.build(
        pool.catalog,
        pool.geometry,
        strategy=arch_strategy_for(pool.strategy),
        **config.get("architecture", {}),
    )
    bundle = build_bundle(arch, pool.geometry, seed=tcfg.seed, stats=data_stats(pool))
    bundle, record = train(bundle, pool, tcfg)
    out = Path(config["out"])
    save_bundle(bundle, out / "model")
    record.to_jsonl(out / "train_record.jsonl")
    census = parameter_census(bundle)
    (out / "parameter_census.json").write_text(json.dumps(census, indent=1))
    print(
        f"trained {pool.strategy} model: best epoch {record.best_epoch}, "
        f"val MSE {record.best_val_mse:.5f}, parameters {census['total_trainable']}"
    )
    return [
        out / "model/config.json",
        out / "train_record.jsonl",
        out / "parameter_census.json",
    ], config


def cmd_transfer(args):
    config = load_config(args, "transfer")
    if "general" not in config:
        raise ConfigInvalid("transfer needs the general bundle path")
    general = load_bundle(config["general"])
    pool = _open_pool(config["datasets"])
    fields = dict(config.get("training", {}))
    if args.seed is not None:
        fields["seed"] = args.seed
    tcfg = TrainingConfig.from_json({**TrainingConfig.transfer_defaults().to_json(), **fields})
    specific, record = transfer(general, pool, tcfg)
    out = Path(config["out"])
    save_bundle(specific, out / "model")
    record.to_jsonl(out / "train_record.jsonl")
    (out / "parameter_census.json").write_text(
        json.dumps(parameter_census(specific), indent=1)
    )
    print(
        f"transferred model onto {len(config['datasets'])} dataset(s): "
        f"best epoch {record.best_epoch}, val MSE {record.best_val_mse:.5f}"
    )
    return [
        out / "model/config.json",
        out / "train_record.jsonl",
        out / "parameter_census.json",
    ], config


def cmd_evaluate(args):
    config = load_config(args, "evaluate")
    if "bundle" not in config:
        raise ConfigInvalid("evaluate needs a bundle path")
    bundle = load_bundle(config["bundle"])
    pool = _open_pool(config["datasets"], config.get("strategy"))
    split = config.get("split", "test")
    report = evaluate_model(bundle, pool, split=split, model_id=Path(config["bundle"]).name)
    out = Path(config["out"])
    outputs = report.write(out)
    if config.get("baseline", True):
        base = baseline_report(pool, split=split)
        outputs += base.write(out / "baseline")
        rows = summarize({report.model_id: report, "baseline_bilinear": base})
        (out / "summary.json").write_text(json.dumps(rows, indent=1))
        outputs.append(out / "summary.json")
    if config.get("figures", True):
        from .plots import render_report_figures

        outputs += render_report_figures(report, out / "figures")
    print(
        f"evaluated {report.model_id} on split {split!r}: "
        f"mean RMSE {report.mean_rmse():.4f} m/s, mean SSIM {report.mean_ssim():.4f}"
    )
    return outputs, config


def cmd_ablate(args):
    config = load_config(args, "ablate")
    pool = _open_pool(config["datasets"])
    plan = ExperimentPlan(
        kind="ablation",
        architecture=config.get("architecture", {}),
        training=_training_config(config, args.seed),
        subsets=tuple(config.get("subsets", ("full", "uv_only", "no_wind"))),
    )
    result = run_ablation_experiment(plan, pool)
    out = Path(config["out"])
    out.mkdir(parents=True, exist_ok=True)
    cache_root = Path(os.environ.get("GRIDDOWN_CACHE", out / "intermediate"))
    outputs = []
    for name, bundle in result["bundles"].items():
        save_bundle(bundle, cache_root / f"bundle_{name}")
    for name, report in result["reports"].items():
        outputs += report.write(out / name)
    (out / "summary.json").write_text(json.dumps(result["summary"], indent=1))
    outputs.append(out / "summary.json")
    for row in result["summary"]:
        print(
            f"{row['model']:>18}: mean RMSE {row['mean_rmse']:.4f} m/s, "
            f"mean SSIM {row['mean_ssim']:.4f}"
        )
    return outputs, config


def cmd_ramps(args):
    config = {}
    if args.config:
        config = load_config(args, "ramps")
    else:
        if args.out is None:
            raise ConfigInvalid("ramps needs --out")
        config["out"] = args.out
    if args.series:
        config["series"] = args.series
    if "series" not in config:
        raise ConfigInvalid("ramps needs --series or config key 'series'")
    threshold = args.threshold if args.threshold is not None else config.get("threshold", 0.70)
    window = args.window if args.window is not None else config.get("window", 2)
    z0 = config.get("roughness_m", DEFAULT_ROUGHNESS_M)
    hub = config.get("hub_height_m", DEFAULT_HUB_HEIGHT_M)
    if not Path(config["series"]).exists():
        raise MissingArtifact(f"series file not found: {config['series']}")

    hours, speeds = read_speed_csv(config["series"])
    power = speeds_to_power_series(speeds, roughness_m=z0, hub_height_m=hub)
    events = detect_ramps(power, threshold=threshold, window_h=window)
    out = Path(config["out"])
    out.mkdir(parents=True, exist_ok=True)
    write_events_csv(events, hours, out / "events.csv")
    outputs = [out / "events.csv"]

    if config.get("truth"):
        t_hours, t_speeds = read_speed_csv(config["truth"])
        t_power = speeds_to_power_series(t_speeds, roughness_m=z0, hub_height_m=hub)
        counts = ramp_concordance(t_power, power, threshold=threshold, window_h=window)
        payload = {
            "hits": counts.hits,
            "misses": counts.misses,
            "false_alarms": counts.false_alarms,
            "totals": counts.totals(),
        }
        (out / "concordance.json").write_text(json.dumps(payload, indent=1))
        outputs.append(out / "concordance.json")

    from .plots import ramp_series_figure

    outputs.append(ramp_series_figure(power, events, out / "power_series.png"))
    print(f"detected {len(events)} ramp event(s) (threshold {threshold}, window {window} h)")
    config.update({"threshold": threshold, "window": window})
    return outputs, config


def cmd_plot(args):
    if not args.reports:
        raise ConfigInvalid("plot needs at least one report directory")
    out = Path(args.out) if args.out else None
    outputs = []
    from .plots import render_report_figures

    formats = tuple(f.strip() for f in getattr(args, "format", "png").split(",") if f.strip())
    bad = [f for f in formats if f not in ("png", "svg")]
    if bad:
        raise ConfigInvalid(f"unsupported figure formats: {bad}")
    for rep_dir in args.reports:
        rp = Path(rep_dir) / "report.json"
        if not rp.exists():
            raise MissingArtifact(f"no report.json under {rep_dir}")
        report = EvalReport.from_json(json.loads(rp.read_text()))
        target = (out / Path(rep_dir).name) if out else Path(rep_dir) / "figures"
        outputs += render_report_figures(report, target, formats=formats)
    print(f"rendered {len(outputs)} figure(s)")
    config = {"reports": list(args.reports), "out": str(out) if out else str(Path(args.reports[0]))}
    return outputs, config


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "transfer": cmd_transfer,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
    "ramps": cmd_ramps,
    "plot": cmd_plot,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="griddown",
        description="Wind-forecast downscaling across misaligned grids.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=int, default=None, help="override seeds")
        p.add_argument("--workers", type=int, default=1, help="parallelism bound")
        p.add_argument(
            "--set",
            action="append",
            metavar="KEY=VALUE",
            help="dotted-path config override",
        )
        if name == "ramps":
            p.add_argument("--series", help="two-column CSV (iso_hour, speed_mps)")
            p.add_argument("--threshold", type=float, default=None)
            p.add_argument("--window", type=int, default=None)
        if name == "plot":
            p.add_argument("reports", nargs="*", help="report directories")
            p.add_argument(
                "--format",
                default="png",
                help="comma-separated figure formats (png, svg)",
            )
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    t0 = time.perf_counter()
    try:
        outputs, config = COMMANDS[args.command](args)
        missing = [str(p) for p in outputs if not Path(p).exists()]
        if missing:
            raise ComputeFailure(f"declared outputs were not written: {missing}")
        out_dir = Path(config["out"]) if config.get("out") else None
        if out_dir:
            out_dir.mkdir(parents=True, exist_ok=True)
            write_run_record(
                out_dir, args.command, config, outputs, t0, seed=args.seed
            )
        return 0
    except GriddownError as e:
        payload = {"error": type(e).__name__, "message": str(e)}
        print(json.dumps(payload), file=sys.stderr)
        return getattr(e, "exit_code", 4)
    except Exception as e:  # noqa: BLE001
        payload = {"error": type(e).__name__, "message": str(e)}
        print(json.dumps(payload), file=sys.stderr)
        return 4


if __name__ == "__main__":
    raise SystemExit(main())
