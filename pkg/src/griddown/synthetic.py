"""Synthetic paired low-/high-resolution wind samples on misaligned grids.

The generator builds an hourly "truth" wind-speed field on a fine internal
lattice as an exp-transformed Gaussian random field with a power-law
spectrum, modulated by per-domain terrain and a diurnal cycle.  Every sample
is a pure function of (seed, domain_seed, t): temporal continuity comes from
cosine-blending seeded keyframe fields, so generation parallelizes freely
across timestamps.

The variable catalog mirrors an operational forecast feed: multi-level wind
speed/components and temperature, vertical gradients, single-level surface
variables, plus static high-resolution geophysics (orography, land-sea mask,
roughness length).
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, replace

import numpy as np

from .grids import BilinearMap, DomainGeometry, Field2D, GridSpec

UV_LEVELS = (10.0, 21.0, 63.0, 117.0)
T_LEVELS = (1.5, 11.0, 42.0, 91.0)
WIND_GRAD_LEVELS = (273.0, 21.0)  # (upper, lower) heights in m
TEMP_GRAD_LEVELS = (231.0, 11.0)

# Roughness for the shared vertical shape factor: very smooth, so top-level
# speeds stay close enough to 10 m values that float32 keeps the component
# identity U^2 + V^2 = UV^2 within 1e-4 m^2/s^2.
_PROFILE_Z0 = 1e-5


@dataclass(frozen=True)
class VariableSpec:
    """One catalog entry: a predictor (or the predictand) and its levels."""

    name: str
    kind: str  # "lr" | "hr_static"
    levels: tuple[float, ...] = ()
    group: str = "single"  # front-end branch this variable joins
    gradient_levels: tuple[float, float] | None = None

    @property
    def n_levels(self) -> int:
        return max(1, len(self.levels))


def default_catalog() -> tuple[VariableSpec, ...]:
    return (
        VariableSpec("uv", "lr", UV_LEVELS, group="uv"),
        VariableSpec("u", "lr", UV_LEVELS, group="u"),
        VariableSpec("v", "lr", UV_LEVELS, group="v"),
        VariableSpec("t", "lr", T_LEVELS, group="t"),
        VariableSpec("ug", "lr", group="grad", gradient_levels=WIND_GRAD_LEVELS),
        VariableSpec("vg", "lr", group="grad", gradient_levels=WIND_GRAD_LEVELS),
        VariableSpec("tg", "lr", group="grad", gradient_levels=TEMP_GRAD_LEVELS),
        VariableSpec("p0", "lr"),
        VariableSpec("pn", "lr"),
        VariableSpec("h", "lr"),
        VariableSpec("cx", "lr"),
        VariableSpec("sd", "lr"),
        VariableSpec("wge", "lr"),
        VariableSpec("me", "hr_static", group="hr"),
        VariableSpec("mg", "hr_static", group="hr"),
        VariableSpec("z0", "hr_static", group="hr"),
    )


def catalog_subset(catalog: tuple[VariableSpec, ...], subset: str) -> tuple[VariableSpec, ...]:
    """Predictor subsets used by the ablation experiment."""
    if subset == "full":
        return catalog
    if subset == "uv_only":
        return tuple(v for v in catalog if v.name == "uv")
    if subset == "no_wind":
        dropped = {"uv", "u", "v", "ug", "vg"}
        return tuple(v for v in catalog if v.name not in dropped)
    raise ValueError(f"unknown predictor subset {subset!r}")


def catalog_digest(catalog: tuple[VariableSpec, ...]) -> str:
    blob = json.dumps(
        [
            {
                "name": v.name,
                "kind": v.kind,
                "levels": list(v.levels),
                "group": v.group,
                "gradient_levels": list(v.gradient_levels) if v.gradient_levels else None,
            }
            for v in catalog
        ],
        sort_keys=True,
    ).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def catalog_to_json(catalog: tuple[VariableSpec, ...]) -> list[dict]:
    return [
        {
            "name": v.name,
            "kind": v.kind,
            "levels": list(v.levels),
            "group": v.group,
            "gradient_levels": list(v.gradient_levels) if v.gradient_levels else None,
        }
        for v in catalog
    ]


def catalog_from_json(items: list[dict]) -> tuple[VariableSpec, ...]:
    return tuple(
        VariableSpec(
            name=o["name"],
            kind=o["kind"],
            levels=tuple(o.get("levels") or ()),
            group=o.get("group", "single"),
            gradient_levels=tuple(o["gradient_levels"]) if o.get("gradient_levels") else None,
        )
        for o in items
    )


def vertical_gradient(upper: np.ndarray, lower: np.ndarray, z_upper: float, z_lower: float):
    """Rate of change with height between two model levels."""
    return (upper - lower) / (z_upper - z_lower)


def level_shape_factor(height_m: float) -> float:
    """Log-profile scaling of 10 m speed to another height."""
    return math.log(height_m / _PROFILE_Z0) / math.log(10.0 / _PROFILE_Z0)


@dataclass
class SampleRecord:
    """One hourly training example."""

    timestamp: int
    lr_stack: dict[str, np.ndarray]  # name -> (n_levels, lr, lr) float32
    hr_static: dict[str, np.ndarray]  # name -> (hr, hr) float32
    predictand: np.ndarray  # (pred, pred) float32
    skip_uv10: np.ndarray  # (lr, lr) float32, always present for the skip path
    geometry: DomainGeometry
    internal: dict | None = None  # generator-internal level fields, for checks

    def lr_field(self, name: str, level_idx: int = 0) -> Field2D:
        return Field2D(self.geometry.lr_grid, self.lr_stack[name][level_idx])

    def predictand_field(self) -> Field2D:
        return Field2D(self.geometry.predictand_grid, self.predictand)


@dataclass(frozen=True)
class GeneratorConfig:
    seed: int = 0
    domain_seed: int = 0
    spectral_slope: float = -3.0
    sigma_log: float = 0.35  # log-amplitude of the hourly weather field
    mean_speed: float = 6.0  # m/s, jittered per domain
    diurnal_amp: float = 0.25
    terrain_amp: float = 1.0  # 0 disables terrain modulation of the wind
    terrain_slope: float = -2.5
    keyframe_hours: int = 6
    fine_factor: int = 2  # fine lattice = hr_pred resolution * factor
    direction_amp_rad: float = 0.5

    def to_json(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_json(cls, obj: dict) -> "GeneratorConfig":
        return cls(**obj)


def power_law_field(n: int, slope: float, rng: np.random.Generator) -> np.ndarray:
    """Unit-variance Gaussian field whose power spectrum follows |k|^slope."""
    kx = np.fft.fftfreq(n)[None, :]
    ky = np.fft.fftfreq(n)[:, None]
    k = np.sqrt(kx * kx + ky * ky)
    with np.errstate(divide="ignore"):
        amp = np.where(k > 0, k ** (slope / 2.0), 0.0)
    spectrum = np.fft.fft2(rng.standard_normal((n, n))) * amp
    g = np.fft.ifft2(spectrum).real
    g -= g.mean()
    std = g.std()
    return g / std if std > 0 else g


def _block_mean(x: np.ndarray, block: int) -> np.ndarray:
    n0, n1 = x.shape
    return x.reshape(n0 // block, block, n1 // block, block).mean(axis=(1, 3))


# Stream ids keep per-quantity keyframe sequences statistically independent.
_STREAMS = {
    "wind": 11,
    "dir": 23,
    "temp": 31,
    "press": 41,
    "lapse": 53,
    "blh": 61,
    "sd": 71,
    "wge": 83,
}


class WeatherGenerator:
    """Deterministic per-(seed, t) synthetic sample source for one domain."""

    def __init__(
        self,
        geometry: DomainGeometry,
        config: GeneratorConfig = GeneratorConfig(),
        catalog: tuple[VariableSpec, ...] = None,
    ):
        self.geometry = geometry
        self.config = config
        self.catalog = default_catalog() if catalog is None else catalog

        hr = geometry.hr_pred_grid
        self.fine_n = hr.n_rows * config.fine_factor
        fine_spacing = hr.spacing_km / config.fine_factor
        delta = 0.5 * (fine_spacing - hr.spacing_km)
        off = hr.rotation_matrix() @ np.array([delta, delta])
        self.fine_grid = GridSpec(
            origin_x_km=hr.origin_x_km + off[0],
            origin_y_km=hr.origin_y_km + off[1],
            spacing_km=fine_spacing,
            rotation_deg=hr.rotation_deg,
            n_rows=self.fine_n,
            n_cols=self.fine_n,
        )
        self.lr_n = geometry.lr_grid.n_rows
        self._lr_block = self.fine_n // self.lr_n
        self._hr_block = config.fine_factor
        self._pred_map = BilinearMap(self.fine_grid, geometry.predictand_grid)

        self._init_domain()
        self._frames: dict[tuple[str, int], np.ndarray] = {}

        # Scaled 0..1 coordinates give CX a small east-west phase gradient.
        lr_local = np.arange(self.lr_n) / max(1, self.lr_n - 1)
        self._cx_phase = 0.05 * (lr_local[None, :] + lr_local[:, None])

    def _init_domain(self):
        cfg = self.config
        rng = np.random.default_rng([cfg.domain_seed, 777])
        self.s0 = cfg.mean_speed * rng.uniform(0.75, 1.25)
        self.prevailing_dir = rng.uniform(0, 2 * math.pi)
        self.t_base = 283.0 + rng.uniform(-8.0, 8.0)
        self.lapse_mean = 0.0065
        self.lapse_std = 0.002

        oro = power_law_field(self.fine_n, cfg.terrain_slope, rng)
        mask_raw = power_law_field(self.fine_n, -3.0, rng)
        rough_raw = power_law_field(self.fine_n, cfg.terrain_slope, rng)

        self.me_fine = 300.0 * (oro - oro.min())  # nonnegative orography (m)
        self.mg_fine = 1.0 / (1.0 + np.exp(-(2.5 * mask_raw + rng.normal(0.5, 0.3))))
        log_z0 = self.mg_fine * math.log(0.1) + (1 - self.mg_fine) * math.log(5e-4)
        self.z0_fine = np.exp(log_z0 + 0.4 * rough_raw)

        # Domain-specific mixing of the statics into the wind field: sign and
        # strength differ per domain so one domain's mapping does not transfer.
        a = rng.uniform(0.15, 0.5)
        b = rng.uniform(-0.4, 0.4)
        c = rng.uniform(-0.25, 0.25)
        oro_n = (self.me_fine - self.me_fine.mean()) / (self.me_fine.std() + 1e-12)
        combo = a * (1 - self.mg_fine) + b * oro_n + c * rough_raw
        combo = (combo - combo.mean()) / (combo.std() + 1e-12)
        beta = rng.uniform(0.7, 1.3)
        self.terrain_mod_fine = cfg.terrain_amp * 0.25 * beta * combo

    # -- keyframe machinery ------------------------------------------------

    def _frame(self, stream: str, k: int, n: int, slope: float) -> np.ndarray:
        key = (stream, k)
        cached = self._frames.get(key)
        if cached is not None:
            return cached
        rng = np.random.default_rng([self.config.seed, _STREAMS[stream], k])
        f = power_law_field(n, slope, rng)
        if len(self._frames) > 64:
            self._frames.clear()
        self._frames[key] = f
        return f

    def _blended(self, stream: str, t: int, n: int, slope: float) -> np.ndarray:
        kf = self.config.keyframe_hours
        k, frac = divmod(int(t), kf)
        w = 0.5 * (1 - math.cos(math.pi * frac / kf))
        a = self._frame(stream, k, n, slope)
        b = self._frame(stream, k + 1, n, slope)
        norm = math.sqrt((1 - w) ** 2 + w**2)
        return ((1 - w) * a + w * b) / norm

    # -- public API ----------------------------------------------------------

    def diurnal_cosine(self, t: int) -> float:
        return math.cos(2 * math.pi * (t % 24) / 24.0)

    def generate_truth_field(self, t: int) -> np.ndarray:
        """Nonnegative wind-speed truth on the fine internal lattice."""
        cfg = self.config
        g = self._blended("wind", t, self.fine_n, cfg.spectral_slope)
        d = 1.0 + cfg.diurnal_amp * self.diurnal_cosine(t)
        logf = cfg.sigma_log * g + self.terrain_mod_fine
        # Soft-saturate the log field so extreme gusts stay in a range where
        # float32 keeps the wind-component identity inside tolerance.
        cap = 0.9
        logf = cap * np.tanh(logf / cap)
        truth = self.s0 * d * np.exp(logf)
        return truth.astype(np.float32)

    def derive_sample(
        self, t: int, truth: np.ndarray = None, keep_internal: bool = False
    ) -> SampleRecord:
        cfg = self.config
        if truth is None:
            truth = self.generate_truth_field(t)
        truth = np.asarray(truth, dtype=np.float64)
        if truth.shape != (self.fine_n, self.fine_n):
            raise ValueError(
                f"truth shape {truth.shape} != fine lattice {(self.fine_n, self.fine_n)}"
            )

        predictand = self._pred_map.apply(truth).astype(np.float32)
        uv10 = _block_mean(truth, self._lr_block)

        direction = self.prevailing_dir + cfg.direction_amp_rad * self._blended(
            "dir", t, self.lr_n, -3.5
        )
        cos_d, sin_d = np.cos(direction), np.sin(direction)

        factors = {z: level_shape_factor(z) for z in set(UV_LEVELS) | set(WIND_GRAD_LEVELS)}
        scaled = np.stack([uv10 * factors[z] for z in UV_LEVELS])
        u_levels = (scaled * cos_d).astype(np.float32)
        v_levels = (scaled * sin_d).astype(np.float32)
        # Recompute the magnitude from the stored float32 components so the
        # component identity holds at storage precision.
        uv_levels = np.sqrt(
            u_levels.astype(np.float64) ** 2 + v_levels.astype(np.float64) ** 2
        ).astype(np.float32)

        lapse = self.lapse_mean + self.lapse_std * self._blended("lapse", t, self.lr_n, -3.0)
        t2m = (
            self.t_base
            + 4.0 * self.diurnal_cosine(t)
            + 3.0 * self._blended("temp", t, self.lr_n, -3.5)
        )
        t_levels = np.stack([t2m - lapse * (z - T_LEVELS[0]) for z in T_LEVELS])

        zu, zl = WIND_GRAD_LEVELS
        u_up, u_lo = uv10 * factors[zu] * cos_d, uv10 * factors[zl] * cos_d
        v_up, v_lo = uv10 * factors[zu] * sin_d, uv10 * factors[zl] * sin_d
        ug = vertical_gradient(u_up, u_lo, zu, zl)
        vg = vertical_gradient(v_up, v_lo, zu, zl)
        tzu, tzl = TEMP_GRAD_LEVELS
        t_up = t2m - lapse * (tzu - T_LEVELS[0])
        t_lo = t2m - lapse * (tzl - T_LEVELS[0])
        tg = vertical_gradient(t_up, t_lo, tzu, tzl)

        me_lr = _block_mean(self.me_fine, self._lr_block)
        pn = 101325.0 + 300.0 * self._blended("press", t, self.lr_n, -3.5)
        p0 = pn - 11.3 * me_lr
        blh = np.clip(
            250.0 + 60.0 * uv10 + 150.0 * self._blended("blh", t, self.lr_n, -3.0), 50.0, None
        )
        cx = np.cos(2 * math.pi * (t % 24) / 24.0 + self._cx_phase)
        day = (t / 24.0) % 365.25
        annual = (0.5 + 0.5 * math.cos(2 * math.pi * (day - 20.0) / 365.25)) ** 2
        sd = 0.8 * annual * np.log1p(np.exp(1.2 * self._blended("sd", t, self.lr_n, -3.0) + 0.5))
        gust = 1.0 / (1.0 + np.exp(-self._blended("wge", t, self.lr_n, -3.0)))
        wge = uv10 * (1.15 + 0.35 * gust)

        def lvl(x):
            return np.asarray(x, dtype=np.float32)[None] if x.ndim == 2 else x

        lr_stack = {
            "uv": uv_levels,
            "u": u_levels,
            "v": v_levels,
            "t": t_levels.astype(np.float32),
            "ug": lvl(ug.astype(np.float32)),
            "vg": lvl(vg.astype(np.float32)),
            "tg": lvl(tg.astype(np.float32)),
            "p0": lvl(p0.astype(np.float32)),
            "pn": lvl(pn.astype(np.float32)),
            "h": lvl(blh.astype(np.float32)),
            "cx": lvl(cx.astype(np.float32)),
            "sd": lvl(sd.astype(np.float32)),
            "wge": lvl(wge.astype(np.float32)),
        }
        names = {v.name for v in self.catalog if v.kind == "lr"}
        lr_stack = {k: v for k, v in lr_stack.items() if k in names}
        # UV at 10 m always rides along: the model's additive skip needs it
        # even when wind variables are excluded from the predictor set.
        skip_uv10 = uv_levels[0]

        hr_names = {v.name for v in self.catalog if v.kind == "hr_static"}
        hr_static = {
            name: _block_mean(fine, self._hr_block).astype(np.float32)
            for name, fine in (
                ("me", self.me_fine),
                ("mg", self.mg_fine),
                ("z0", self.z0_fine),
            )
            if name in hr_names
        }

        internal = None
        if keep_internal:
            internal = {
                "u_upper": u_up,
                "u_lower": u_lo,
                "v_upper": v_up,
                "v_lower": v_lo,
                "t_upper": t_up,
                "t_lower": t_lo,
                "wind_grad_levels": WIND_GRAD_LEVELS,
                "temp_grad_levels": TEMP_GRAD_LEVELS,
            }

        return SampleRecord(
            timestamp=int(t),
            lr_stack=lr_stack,
            hr_static=hr_static,
            predictand=predictand,
            skip_uv10=skip_uv10,
            geometry=self.geometry,
            internal=internal,
        )


def domain_generators(
    geometry: DomainGeometry,
    base_config: GeneratorConfig,
    n_domains: int,
    catalog: tuple[VariableSpec, ...] = None,
) -> list[WeatherGenerator]:
    """One generator per domain, with distinct terrain/climatology seeds."""
    return [
        WeatherGenerator(
            geometry,
            replace(
                base_config,
                domain_seed=base_config.domain_seed + 1000 * d,
                seed=base_config.seed + 31 * d,
            ),
            catalog=catalog,
        )
        for d in range(n_domains)
    ]
