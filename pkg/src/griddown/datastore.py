"""On-disk dataset container, splits, standardization and batch streaming.

Layout (one directory per dataset, one subdirectory per split):

    <root>/manifest.json
    <root>/<split>/<variable>.f32

Each ``.f32`` file holds little-endian 32-bit reals in row-major
(sample, level, row, col) order with no header, so the manifest's byte
accounting is exactly ``4 * element_count`` per array and files can be
memory-mapped directly.  Fields are stored in physical units; standardization
is applied by readers at batch time from the manifest statistics.

Splits are contiguous, chronologically ordered timestamp ranges
(train < val < test) so no future information can leak backwards.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataExhausted, DegenerateVariable, MissingStats, ShapeMismatch
from .grids import BilinearMap, DomainGeometry, NearestMap
from .synthetic import (
    SampleRecord,
    VariableSpec,
    WeatherGenerator,
    catalog_digest,
    catalog_from_json,
    catalog_to_json,
)

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
STD_DEGENERATE_THRESHOLD = 1e-8
STD_FLOOR = 1e-6

SKIP_KEY = "skip_uv10"
PREDICTAND_KEY = "predictand"

STRATEGIES = ("native", "pre_bilinear", "pre_nearest")


@dataclass(frozen=True)
class SplitPlan:
    """Contiguous [start, stop) hourly ranges, ordered train < val < test."""

    train_range: tuple[int, int]
    val_range: tuple[int, int]
    test_range: tuple[int, int]
    shuffle_seed: int = 0

    def __post_init__(self):
        ranges = [self.train_range, self.val_range, self.test_range]
        for lo, hi in ranges:
            if hi < lo:
                raise ValueError(f"range {(lo, hi)} is reversed")
        for (_, a_hi), (b_lo, _) in zip(ranges, ranges[1:]):
            if b_lo < a_hi:
                raise ValueError("splits must be chronological and disjoint")

    def timestamps(self, split: str) -> range:
        lo, hi = getattr(self, f"{split}_range")
        return range(lo, hi)

    def to_json(self) -> dict:
        return {
            "train_range": list(self.train_range),
            "val_range": list(self.val_range),
            "test_range": list(self.test_range),
            "shuffle_seed": self.shuffle_seed,
        }

    @classmethod
    def from_json(cls, obj) -> "SplitPlan":
        return cls(
            train_range=tuple(obj["train_range"]),
            val_range=tuple(obj["val_range"]),
            test_range=tuple(obj["test_range"]),
            shuffle_seed=int(obj.get("shuffle_seed", 0)),
        )

    @classmethod
    def desk_scale(cls, n_train=2000, n_val=250, n_test=250, shuffle_seed=0) -> "SplitPlan":
        return cls(
            train_range=(0, n_train),
            val_range=(n_train, n_train + n_val),
            test_range=(n_train + n_val, n_train + n_val + n_test),
            shuffle_seed=shuffle_seed,
        )


class StandardizationStats:
    """Per-variable, per-level global mean/std from the training split only.

    Means and stds are averages of the per-sample spatial mean and spatial
    std over all training samples.
    """

    def __init__(self, table: dict[str, np.ndarray]):
        # name -> (n_levels, 2) array of [mean, std]
        self.table = {k: np.asarray(v, dtype=np.float64) for k, v in table.items()}

    def __contains__(self, name: str) -> bool:
        return name in self.table

    def mean_std(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        if name not in self.table:
            raise MissingStats(f"no statistics for variable {name!r}")
        t = self.table[name]
        return t[:, 0], t[:, 1]

    def standardize_array(self, name: str, values: np.ndarray) -> np.ndarray:
        """(…, n_levels, r, c) -> standardized, level-wise."""
        mean, std = self.mean_std(name)
        return ((values - mean[:, None, None]) / std[:, None, None]).astype(np.float32)

    def destandardize_array(self, name: str, values: np.ndarray) -> np.ndarray:
        mean, std = self.mean_std(name)
        return (values * std[:, None, None] + mean[:, None, None]).astype(np.float32)

    def scalar(self, name: str, level: int = 0) -> tuple[float, float]:
        mean, std = self.mean_std(name)
        return float(mean[level]), float(std[level])

    def to_json(self) -> dict:
        return {k: v.tolist() for k, v in self.table.items()}

    @classmethod
    def from_json(cls, obj: dict) -> "StandardizationStats":
        return cls({k: np.asarray(v) for k, v in obj.items()})

    @classmethod
    def identity(cls, names_levels: dict[str, int]) -> "StandardizationStats":
        return cls({k: np.tile([0.0, 1.0], (n, 1)) for k, n in names_levels.items()})


class _StatsAccumulator:
    def __init__(self):
        self.sum_mean: dict[str, np.ndarray] = {}
        self.sum_std: dict[str, np.ndarray] = {}
        self.count = 0

    def add(self, arrays: dict[str, np.ndarray]) -> None:
        for name, arr in arrays.items():
            a = arr.astype(np.float64).reshape(arr.shape[0], -1)
            m = a.mean(axis=1)
            s = a.std(axis=1)
            if name not in self.sum_mean:
                self.sum_mean[name] = np.zeros_like(m)
                self.sum_std[name] = np.zeros_like(s)
            self.sum_mean[name] += m
            self.sum_std[name] += s
        self.count += 1

    def finalize(self, on_degenerate: str = "raise") -> StandardizationStats:
        if self.count == 0:
            raise DataExhausted("cannot compute statistics from an empty split")
        table = {}
        for name in self.sum_mean:
            mean = self.sum_mean[name] / self.count
            std = self.sum_std[name] / self.count
            bad = std < STD_DEGENERATE_THRESHOLD
            if np.any(bad):
                if on_degenerate == "raise":
                    raise DegenerateVariable(
                        f"variable {name!r} has level std below "
                        f"{STD_DEGENERATE_THRESHOLD} (constant field); "
                        "drop it or floor the std"
                    )
                log.warning(
                    "variable %r is (near-)constant; flooring std to %g", name, STD_FLOOR
                )
                std = np.where(bad, STD_FLOOR, std)
            table[name] = np.stack([mean, std], axis=1)
        return StandardizationStats(table)


def _record_arrays(record: SampleRecord) -> dict[str, np.ndarray]:
    out = dict(record.lr_stack)
    for name, arr in record.hr_static.items():
        out[name] = arr[None]
    out[SKIP_KEY] = record.skip_uv10[None]
    out[PREDICTAND_KEY] = record.predictand[None]
    return out


def compute_stats(records, on_degenerate: str = "raise") -> StandardizationStats:
    """Statistics over an iterable of SampleRecords (the training split)."""
    acc = _StatsAccumulator()
    for r in records:
        acc.add(_record_arrays(r))
    return acc.finalize(on_degenerate=on_degenerate)


def standardize(record: SampleRecord, stats: StandardizationStats) -> SampleRecord:
    """Return a standardized copy of a sample; raises MissingStats on gaps."""
    lr = {k: stats.standardize_array(k, v) for k, v in record.lr_stack.items()}
    hr = {k: stats.standardize_array(k, v[None])[0] for k, v in record.hr_static.items()}
    skip = stats.standardize_array(SKIP_KEY, record.skip_uv10[None])[0]
    pred = stats.standardize_array(PREDICTAND_KEY, record.predictand[None])[0]
    return SampleRecord(
        timestamp=record.timestamp,
        lr_stack=lr,
        hr_static=hr,
        predictand=pred,
        skip_uv10=skip,
        geometry=record.geometry,
    )


def destandardize(values: np.ndarray, stats: StandardizationStats, name: str = PREDICTAND_KEY):
    """Map standardized fields (…, r, c) back to physical units."""
    mean, std = stats.scalar(name)
    return (np.asarray(values, dtype=np.float64) * std + mean).astype(np.float32)


@dataclass
class DatasetManifest:
    format_version: int
    strategy: str
    geometry: DomainGeometry
    catalog: tuple[VariableSpec, ...]
    variables: dict[str, dict]  # name -> {n_levels, rows, cols}
    splits: dict[str, dict]  # split -> {n_samples, t_start, t_stop, bytes}
    stats: StandardizationStats | None
    shuffle_seed: int
    generator: dict | None = None
    header_bytes: int = 0

    @property
    def catalog_digest(self) -> str:
        return catalog_digest(self.catalog)

    def digest(self) -> str:
        core = {
            "strategy": self.strategy,
            "geometry": self.geometry.to_json(),
            "catalog_digest": self.catalog_digest,
            "splits": {
                k: {kk: v[kk] for kk in ("n_samples", "t_start", "t_stop")}
                for k, v in self.splits.items()
            },
            "generator": self.generator,
        }
        return hashlib.sha256(json.dumps(core, sort_keys=True).encode()).hexdigest()[:16]

    def to_json(self) -> dict:
        return {
            "format_version": self.format_version,
            "strategy": self.strategy,
            "geometry": self.geometry.to_json(),
            "catalog": catalog_to_json(self.catalog),
            "catalog_digest": self.catalog_digest,
            "variables": self.variables,
            "splits": self.splits,
            "stats": self.stats.to_json() if self.stats is not None else None,
            "shuffle_seed": self.shuffle_seed,
            "generator": self.generator,
            "header_bytes": self.header_bytes,
            "dataset_digest": self.digest(),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "DatasetManifest":
        return cls(
            format_version=int(obj["format_version"]),
            strategy=obj["strategy"],
            geometry=DomainGeometry.from_json(obj["geometry"]),
            catalog=catalog_from_json(obj["catalog"]),
            variables=obj["variables"],
            splits=obj["splits"],
            stats=StandardizationStats.from_json(obj["stats"]) if obj["stats"] else None,
            shuffle_seed=int(obj.get("shuffle_seed", 0)),
            generator=obj.get("generator"),
            header_bytes=int(obj.get("header_bytes", 0)),
        )


def _variable_layout(
    catalog: tuple[VariableSpec, ...], geometry: DomainGeometry, strategy: str
) -> dict[str, dict]:
    lr_n = geometry.lr_grid.n_rows
    hr_n = geometry.hr_pred_grid.n_rows
    pred_n = geometry.predictand_grid.n_rows
    lr_store = lr_n if strategy == "native" else hr_n
    layout: dict[str, dict] = {}
    for v in catalog:
        if v.kind == "lr":
            layout[v.name] = {"n_levels": v.n_levels, "rows": lr_store, "cols": lr_store}
        else:
            layout[v.name] = {"n_levels": 1, "rows": hr_n, "cols": hr_n}
    layout[SKIP_KEY] = {"n_levels": 1, "rows": lr_n, "cols": lr_n}
    layout[PREDICTAND_KEY] = {"n_levels": 1, "rows": pred_n, "cols": pred_n}
    return layout


class _StrategyTransform:
    """Regrids native LR stacks to the HR input lattice for pre_* strategies."""

    def __init__(self, geometry: DomainGeometry, strategy: str):
        if strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {strategy!r}")
        self.strategy = strategy
        if strategy == "pre_bilinear":
            self.map = BilinearMap(geometry.lr_grid, geometry.hr_pred_grid)
        elif strategy == "pre_nearest":
            self.map = NearestMap(geometry.lr_grid, geometry.hr_pred_grid)
        else:
            self.map = None

    def apply(self, lr_values: np.ndarray) -> np.ndarray:
        if self.map is None:
            return lr_values
        return self.map.apply(lr_values).astype(np.float32)


def _derive_chunk(args):
    generator, timestamps = args
    return [generator.derive_sample(t) for t in timestamps]


def materialize(
    generator: WeatherGenerator,
    plan: SplitPlan,
    out_dir: str | Path,
    strategy: str = "native",
    workers: int = 1,
) -> DatasetManifest:
    """Generate, transform and persist a dataset; returns its manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    geometry = generator.geometry
    catalog = generator.catalog
    transform = _StrategyTransform(geometry, strategy)
    layout = _variable_layout(catalog, geometry, strategy)
    lr_names = {v.name for v in catalog if v.kind == "lr"}

    splits_meta: dict[str, dict] = {}
    stats: StandardizationStats | None = None

    for split in ("train", "val", "test"):
        ts = plan.timestamps(split)
        split_dir = out / split
        split_dir.mkdir(exist_ok=True)
        handles = {name: open(split_dir / f"{name}.f32", "wb") for name in layout}
        acc = _StatsAccumulator() if split == "train" else None
        try:
            for record in _iter_records(generator, ts, workers):
                arrays = _record_arrays(record)
                for name in lr_names:
                    arrays[name] = transform.apply(arrays[name])
                for name, handle in handles.items():
                    arr = np.ascontiguousarray(arrays[name], dtype="<f4")
                    expected = (
                        layout[name]["n_levels"],
                        layout[name]["rows"],
                        layout[name]["cols"],
                    )
                    if arr.shape != expected:
                        raise ShapeMismatch(
                            f"{name}: got {arr.shape}, layout expects {expected}"
                        )
                    arr.tofile(handle)
                if acc is not None:
                    acc.add(arrays)
        finally:
            for handle in handles.values():
                handle.close()
        if acc is not None and len(ts) > 0:
            stats = acc.finalize(on_degenerate="floor")
        total = sum(os.path.getsize(split_dir / f"{name}.f32") for name in layout)
        splits_meta[split] = {
            "n_samples": len(ts),
            "t_start": ts.start,
            "t_stop": ts.stop,
            "bytes": int(total),
        }

    manifest = DatasetManifest(
        format_version=FORMAT_VERSION,
        strategy=strategy,
        geometry=geometry,
        catalog=catalog,
        variables=layout,
        splits=splits_meta,
        stats=stats,
        shuffle_seed=plan.shuffle_seed,
        generator=generator.config.to_json(),
    )
    (out / "manifest.json").write_text(json.dumps(manifest.to_json(), indent=1))
    return manifest


def _iter_records(generator, timestamps, workers: int):
    if workers <= 1 or len(timestamps) < 32:
        for t in timestamps:
            yield generator.derive_sample(t)
        return
    chunk = 64
    chunks = [
        (generator, list(timestamps[i : i + chunk])) for i in range(0, len(timestamps), chunk)
    ]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        for records in pool.map(_derive_chunk, chunks):
            yield from records


@dataclass
class Batch:
    """One mini-batch of samples in storage layout (physical units)."""

    lr: dict[str, np.ndarray]  # name -> (B, L, r, c)
    hr: dict[str, np.ndarray]  # name -> (B, 1, R, C)
    skip_uv10: np.ndarray  # (B, r, c)
    predictand: np.ndarray  # (B, p, p)
    timestamps: np.ndarray  # (B,)
    domain_ids: np.ndarray  # (B,)


class DatasetReader:
    """Memory-mapped random access to one materialized dataset."""

    def __init__(self, root: str | Path, domain_id: int = 0):
        self.root = Path(root)
        manifest_path = self.root / "manifest.json"
        if not manifest_path.exists():
            from .errors import MissingArtifact

            raise MissingArtifact(f"no manifest at {manifest_path}")
        self.manifest = DatasetManifest.from_json(json.loads(manifest_path.read_text()))
        self.geometry = self.manifest.geometry
        self.stats = self.manifest.stats
        self.domain_id = domain_id
        self._maps: dict[tuple[str, str], np.memmap] = {}
        self._check_no_leakage()
        self._check_byte_accounting()

    def _check_no_leakage(self):
        s = self.manifest.splits
        order = [s[k] for k in ("train", "val", "test") if s[k]["n_samples"] > 0]
        for a, b in zip(order, order[1:]):
            if not a["t_stop"] - 1 < b["t_start"]:
                raise ValueError("split timestamps overlap: leakage between splits")

    def _check_byte_accounting(self):
        for split, meta in self.manifest.splits.items():
            actual = sum(
                os.path.getsize(self.root / split / f"{name}.f32")
                for name in self.manifest.variables
            )
            if actual != meta["bytes"]:
                raise ValueError(
                    f"{split}: manifest claims {meta['bytes']} bytes, files hold {actual}"
                )

    @property
    def catalog(self):
        return self.manifest.catalog

    @property
    def strategy(self) -> str:
        return self.manifest.strategy

    def digest(self) -> str:
        return self.manifest.digest()

    def n_samples(self, split: str) -> int:
        return self.manifest.splits[split]["n_samples"]

    def _mmap(self, split: str, name: str) -> np.memmap:
        key = (split, name)
        if key not in self._maps:
            spec = self.manifest.variables[name]
            n = self.n_samples(split)
            shape = (n, spec["n_levels"], spec["rows"], spec["cols"])
            self._maps[key] = np.memmap(
                self.root / split / f"{name}.f32", dtype="<f4", mode="r", shape=shape
            )
        return self._maps[key]

    def get_batch(self, split: str, indices: np.ndarray) -> Batch:
        indices = np.asarray(indices)
        lr, hr = {}, {}
        for v in self.manifest.catalog:
            arr = np.asarray(self._mmap(split, v.name)[indices])
            if v.kind == "lr":
                lr[v.name] = arr
            else:
                hr[v.name] = arr
        skip = np.asarray(self._mmap(split, SKIP_KEY)[indices])[:, 0]
        pred = np.asarray(self._mmap(split, PREDICTAND_KEY)[indices])[:, 0]
        t0 = self.manifest.splits[split]["t_start"]
        return Batch(
            lr=lr,
            hr=hr,
            skip_uv10=skip,
            predictand=pred,
            timestamps=t0 + indices,
            domain_ids=np.full(len(indices), self.domain_id, dtype=np.int64),
        )


class MultiDomainData:
    """Several per-domain datasets presented as one sample pool.

    All member datasets must share geometry layout, catalog and strategy so
    their samples can be mixed inside a batch.
    """

    def __init__(self, readers: list[DatasetReader]):
        if not readers:
            raise ValueError("need at least one dataset")
        digests = {r.manifest.catalog_digest for r in readers}
        strategies = {r.manifest.strategy for r in readers}
        if len(digests) > 1 or len(strategies) > 1:
            raise ValueError("datasets disagree on catalog or strategy")
        self.readers = readers
        self.strategy = readers[0].manifest.strategy
        self.geometry = readers[0].geometry
        self.catalog = readers[0].manifest.catalog

    @classmethod
    def open(cls, roots: list) -> "MultiDomainData":
        return cls([DatasetReader(root, domain_id=d) for d, root in enumerate(roots)])

    def n_samples(self, split: str) -> int:
        return sum(r.n_samples(split) for r in self.readers)

    def digest(self) -> str:
        blob = ".".join(r.digest() for r in self.readers)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def combined_stats(self) -> StandardizationStats:
        """Exact pooled statistics: sample-count-weighted average of the
        per-domain mean-of-means and mean-of-stds."""
        weights = np.array([r.n_samples("train") for r in self.readers], dtype=np.float64)
        if weights.sum() == 0:
            raise DataExhausted("no training samples across domains")
        table = {}
        for name in self.readers[0].stats.table:
            stacked = np.stack([r.stats.table[name] for r in self.readers])
            table[name] = np.tensordot(weights / weights.sum(), stacked, axes=1)
        return StandardizationStats(table)

    def _global_index(self, split: str) -> list[tuple[int, int]]:
        out = []
        for d, r in enumerate(self.readers):
            out.extend((d, i) for i in range(r.n_samples(split)))
        return out

    def get_batch(self, split: str, pairs: list[tuple[int, int]]) -> Batch:
        pairs = list(pairs)
        doms = np.array([d for d, _ in pairs], dtype=np.int64)
        idxs = np.array([i for _, i in pairs], dtype=np.int64)
        # Gather grouped by domain, then restore the requested row order.
        grouped_pos = np.argsort(doms, kind="stable")
        restore = np.argsort(grouped_pos, kind="stable")
        parts = [
            self.readers[d].get_batch(split, idxs[doms == d]) for d in np.unique(doms)
        ]

        def cat(select):
            return np.concatenate([select(p) for p in parts])[restore]

        return Batch(
            lr={k: cat(lambda p, k=k: p.lr[k]) for k in parts[0].lr},
            hr={k: cat(lambda p, k=k: p.hr[k]) for k in parts[0].hr},
            skip_uv10=cat(lambda p: p.skip_uv10),
            predictand=cat(lambda p: p.predictand),
            timestamps=cat(lambda p: p.timestamps),
            domain_ids=cat(lambda p: p.domain_ids),
        )


class RegriddedView:
    """Present a native-resolution dataset as if stored pre-interpolated.

    Applies the precomputed LR-to-HR regrid per batch, so the peak resident
    footprint stays O(batch) instead of materializing the inflated dataset.
    Statistics pass through from the wrapped data: the regrid is linear, so
    inputs remain O(1) after standardization, and train/val/test stay
    mutually consistent.
    """

    def __init__(self, data, strategy: str):
        if data.strategy != "native":
            raise ValueError("RegriddedView wraps native-resolution datasets only")
        if strategy not in ("pre_bilinear", "pre_nearest"):
            raise ValueError(f"not a pre-interpolation strategy: {strategy!r}")
        self._data = data
        self.strategy = strategy
        self.geometry = data.geometry
        self.catalog = data.catalog
        self._transform = _StrategyTransform(data.geometry, strategy)
        self._lr_names = {v.name for v in data.catalog if v.kind == "lr"}

    def n_samples(self, split: str) -> int:
        return self._data.n_samples(split)

    def digest(self) -> str:
        blob = f"{self._data.digest()}:{self.strategy}"
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def _apply(self, batch: Batch) -> Batch:
        lr = {name: self._transform.apply(arr) for name, arr in batch.lr.items()}
        return Batch(
            lr=lr,
            hr=batch.hr,
            skip_uv10=batch.skip_uv10,
            predictand=batch.predictand,
            timestamps=batch.timestamps,
            domain_ids=batch.domain_ids,
        )

    def get_batch(self, split, sel) -> Batch:
        return self._apply(self._data.get_batch(split, sel))

    def _global_index(self, split):
        return self._data._global_index(split)


def data_stats(data) -> StandardizationStats:
    """Training-split statistics for any data pool shape."""
    while hasattr(data, "_data"):  # unwrap adapter layers
        data = data._data
    if isinstance(data, MultiDomainData):
        return data.combined_stats()
    if data.stats is None:
        raise DataExhausted("dataset has no statistics (empty training split?)")
    return data.stats


def batch_indices(n: int, batch_size: int, shuffled: bool, seed: int = 0, epoch: int = 0):
    """Deterministic batch index lists covering [0, n) exactly once."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = (
        np.random.default_rng([seed, epoch]).permutation(n) if shuffled else np.arange(n)
    )
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def batches(
    data, split: str, batch_size: int, seed: int = 0, epoch: int = 0, shuffle: bool = None
):
    """Yield Batch objects; training order is a seeded permutation, val/test
    are chronological (domain-major for multi-domain pools)."""
    shuffled = (split == "train") if shuffle is None else shuffle
    inner = data
    while hasattr(inner, "_data"):  # unwrap adapter layers
        inner = inner._data
    if isinstance(inner, MultiDomainData):
        pool = data._global_index(split)
        if shuffled:
            order = np.random.default_rng([seed, epoch]).permutation(len(pool))
            pool = [pool[i] for i in order]
        for i in range(0, len(pool), batch_size):
            yield data.get_batch(split, pool[i : i + batch_size])
        return
    n = data.n_samples(split)
    for idx in batch_indices(n, batch_size, shuffled, seed, epoch):
        yield data.get_batch(split, idx)
