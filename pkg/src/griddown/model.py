"""Neural downscaler: multi-modal front end, residual U-Net, post-U-Net head.

Predictor groups (multi-level wind speed / components / temperature, vertical
gradients, single-level surface variables, high-resolution geophysics) each
pass through their own convolutional branch before fusion.  Two front-end
variants exist: one for native-resolution inputs and one for inputs
pre-interpolated onto the high-resolution lattice; both fuse to identically
shaped tensors so everything downstream is shared.

The head upsamples U-Net features to the target lattice and adds a
nearest-neighbour resampling of the 10 m wind-speed predictor as an additive
skip, so the learned path only models the residual structure.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .datastore import Batch, StandardizationStats
from .errors import MissingGroup, NonFiniteActivation, ShapeMismatch
from .grids import BilinearMap, DomainGeometry, NearestMap
from .synthetic import VariableSpec

WEIGHT_GROUPS = ("front_end", "encoder", "decoder", "head")
GROUP_ORDER = ("uv", "u", "v", "t", "grad", "single", "hr")

ARCH_NATIVE = "native"
ARCH_PRE_INTERPOLATED = "pre_interpolated"


def arch_strategy_for(dataset_strategy: str) -> str:
    return ARCH_NATIVE if dataset_strategy == "native" else ARCH_PRE_INTERPOLATED


def catalog_groups(catalog: tuple[VariableSpec, ...]) -> tuple[tuple[str, int], ...]:
    """(group name, input channels) pairs in canonical branch order."""
    counts: dict[str, int] = {}
    for v in catalog:
        g = "hr" if v.kind == "hr_static" else v.group
        counts[g] = counts.get(g, 0) + v.n_levels
    return tuple((g, counts[g]) for g in GROUP_ORDER if g in counts)


def group_variables(catalog: tuple[VariableSpec, ...], group: str) -> list[VariableSpec]:
    if group == "hr":
        return [v for v in catalog if v.kind == "hr_static"]
    return [v for v in catalog if v.kind == "lr" and v.group == group]


@dataclass(frozen=True)
class ArchitectureConfig:
    strategy: str  # "native" | "pre_interpolated"
    groups: tuple[tuple[str, int], ...]
    lr_size: int
    hr_size: int
    out_size: int
    branch_channels: int = 32
    base_filters: int = 64
    depth: int = 3
    kernel_size: int = 3
    leaky_slope: float = 0.25
    dropout_rate: float = 0.25

    def __post_init__(self):
        if self.strategy not in (ARCH_NATIVE, ARCH_PRE_INTERPOLATED):
            raise ValueError(f"unknown architecture strategy {self.strategy!r}")
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if not self.groups:
            raise ValueError("at least one predictor group is required")

    @property
    def upsample_factor(self) -> int:
        return self.out_size // self.lr_size

    @property
    def head_channels(self) -> tuple[int, int]:
        return (self.base_filters, max(1, self.base_filters // 2))

    @classmethod
    def build(
        cls,
        catalog: tuple[VariableSpec, ...],
        geometry: DomainGeometry,
        strategy: str = ARCH_NATIVE,
        **hyper,
    ) -> "ArchitectureConfig":
        return cls(
            strategy=strategy,
            groups=catalog_groups(catalog),
            lr_size=geometry.lr_grid.n_rows,
            hr_size=geometry.hr_pred_grid.n_rows,
            out_size=geometry.predictand_grid.n_rows,
            **hyper,
        )

    def to_json(self) -> dict:
        return {
            "strategy": self.strategy,
            "groups": [list(g) for g in self.groups],
            "lr_size": self.lr_size,
            "hr_size": self.hr_size,
            "out_size": self.out_size,
            "branch_channels": self.branch_channels,
            "base_filters": self.base_filters,
            "depth": self.depth,
            "kernel_size": self.kernel_size,
            "leaky_slope": self.leaky_slope,
            "dropout_rate": self.dropout_rate,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ArchitectureConfig":
        obj = dict(obj)
        obj["groups"] = tuple((g, int(c)) for g, c in obj["groups"])
        return cls(**obj)


def shape_check(cfg: ArchitectureConfig) -> list[tuple[str, tuple[int, int, int]]]:
    """Statically trace every stage's output shape; raises on violations."""
    trace: list[tuple[str, tuple[int, int, int]]] = []
    if cfg.hr_size != 4 * cfg.lr_size:
        raise ShapeMismatch(
            f"hr size {cfg.hr_size} must be 4x lr size {cfg.lr_size} "
            "(two stride-2 reductions)"
        )
    if cfg.out_size % cfg.lr_size != 0:
        raise ShapeMismatch(
            f"output size {cfg.out_size} must be a multiple of feature size {cfg.lr_size}"
        )
    bc = cfg.branch_channels
    for name, _ in cfg.groups:
        trace.append((f"front_end.{name}", (bc, cfg.lr_size, cfg.lr_size)))
    trace.append(("front_end.fused", (cfg.base_filters, cfg.lr_size, cfg.lr_size)))

    size = cfg.lr_size
    ch = cfg.base_filters
    for level in range(cfg.depth):
        trace.append((f"encoder.level{level}", (ch, size, size)))
        size //= 2
        ch *= 2
        if size < 2:
            raise ShapeMismatch(
                f"bottleneck spatial size would be {size} < 2; reduce depth"
            )
    trace.append(("encoder.bottleneck", (ch, size, size)))
    for level in reversed(range(cfg.depth)):
        size *= 2
        ch //= 2
        trace.append((f"decoder.level{level}", (ch, size, size)))

    h1, h2 = cfg.head_channels
    trace.append(("head.refine_in", (h1, cfg.lr_size, cfg.lr_size)))
    trace.append(("head.upsampled", (h2, cfg.out_size, cfg.out_size)))
    trace.append(("head.refine_out", (h2, cfg.out_size, cfg.out_size)))
    trace.append(("head.out", (1, cfg.out_size, cfg.out_size)))
    return trace


class ConvBlock(nn.Module):
    """2D convolution, per-channel affine normalization, LeakyReLU."""

    def __init__(self, cin: int, cout: int, kernel: int, slope: float, stride: int = 1):
        super().__init__()
        self.conv = nn.Conv2d(cin, cout, kernel, stride=stride, padding=kernel // 2)
        self.norm = nn.BatchNorm2d(cout)
        self.act = nn.LeakyReLU(slope)

    def forward(self, x):
        return self.act(self.norm(self.conv(x)))


class ResidualBlock(nn.Module):
    """Two conv-norm-activation stages added back onto the input."""

    def __init__(self, ch: int, kernel: int, slope: float):
        super().__init__()
        self.inner = nn.Sequential(
            ConvBlock(ch, ch, kernel, slope), ConvBlock(ch, ch, kernel, slope)
        )

    def forward(self, x):
        return self.inner(x) + x


class FrontEnd(nn.Module):
    """Per-group branches fused into a single low-resolution feature map.

    Native variant: low-resolution branches run two no-stride blocks; the
    geophysics branch reduces the high-resolution lattice with two stride-2
    blocks.  Pre-interpolated variant: low-resolution branches run two
    no-stride blocks followed by the same two stride-2 reductions, so fused
    shapes match the native variant exactly.
    """

    def __init__(self, cfg: ArchitectureConfig):
        super().__init__()
        bc, k, slope = cfg.branch_channels, cfg.kernel_size, cfg.leaky_slope
        self.group_names = [g for g, _ in cfg.groups]
        branches = {}
        for name, cin in cfg.groups:
            if name == "hr":
                blocks = [
                    ConvBlock(cin, bc, k, slope, stride=2),
                    ConvBlock(bc, bc, k, slope, stride=2),
                ]
            elif cfg.strategy == ARCH_NATIVE:
                blocks = [ConvBlock(cin, bc, k, slope), ConvBlock(bc, bc, k, slope)]
            else:
                blocks = [
                    ConvBlock(cin, bc, k, slope),
                    ConvBlock(bc, bc, k, slope),
                    ConvBlock(bc, bc, k, slope, stride=2),
                    ConvBlock(bc, bc, k, slope, stride=2),
                ]
            branches[name] = nn.Sequential(*blocks)
        self.branches = nn.ModuleDict(branches)
        fused_in = bc * len(cfg.groups)
        self.fuse = nn.Sequential(
            ConvBlock(fused_in, cfg.base_filters, k, slope),
            ConvBlock(cfg.base_filters, cfg.base_filters, k, slope),
        )

    def forward(self, inputs: dict[str, torch.Tensor]) -> torch.Tensor:
        feats = []
        for name in self.group_names:
            if name not in inputs:
                raise ShapeMismatch(f"missing input group {name!r}")
            feats.append(self.branches[name](inputs[name]))
        return self.fuse(torch.cat(feats, dim=1))


class UNetEncoder(nn.Module):
    def __init__(self, cfg: ArchitectureConfig):
        super().__init__()
        k, slope, drop = cfg.kernel_size, cfg.leaky_slope, cfg.dropout_rate
        chs = [cfg.base_filters * 2**i for i in range(cfg.depth + 1)]
        self.levels = nn.ModuleList(
            nn.Sequential(ResidualBlock(chs[i], k, slope), nn.Dropout2d(drop))
            for i in range(cfg.depth)
        )
        self.downs = nn.ModuleList(
            ConvBlock(chs[i], chs[i + 1], k, slope, stride=2) for i in range(cfg.depth)
        )
        self.bottleneck = nn.Sequential(
            ResidualBlock(chs[-1], k, slope), nn.Dropout2d(drop)
        )

    def forward(self, x):
        skips = []
        for level, down in zip(self.levels, self.downs):
            x = level(x)
            skips.append(x)
            x = down(x)
        return self.bottleneck(x), skips


class UNetDecoder(nn.Module):
    def __init__(self, cfg: ArchitectureConfig):
        super().__init__()
        k, slope, drop = cfg.kernel_size, cfg.leaky_slope, cfg.dropout_rate
        chs = [cfg.base_filters * 2**i for i in range(cfg.depth + 1)]
        self.ups = nn.ModuleList(
            nn.ConvTranspose2d(chs[i + 1], chs[i], 2, stride=2)
            for i in reversed(range(cfg.depth))
        )
        self.levels = nn.ModuleList(
            nn.Sequential(
                ConvBlock(2 * chs[i], chs[i], k, slope),
                ResidualBlock(chs[i], k, slope),
                nn.Dropout2d(drop),
            )
            for i in reversed(range(cfg.depth))
        )

    def forward(self, x, skips):
        for up, level, skip in zip(self.ups, self.levels, reversed(skips)):
            x = up(x)
            x = level(torch.cat([x, skip], dim=1))
        return x


class PostUNetHead(nn.Module):
    """Refinement, learned upsampling to the target lattice, projection."""

    def __init__(self, cfg: ArchitectureConfig):
        super().__init__()
        k, slope = cfg.kernel_size, cfg.leaky_slope
        h1, h2 = cfg.head_channels
        factor = cfg.upsample_factor
        self.refine_in = ConvBlock(cfg.base_filters, h1, k, slope)
        self.upsample = nn.Sequential(
            nn.ConvTranspose2d(h1, h2, factor, stride=factor),
            nn.BatchNorm2d(h2),
            nn.LeakyReLU(slope),
        )
        self.refine_out = ConvBlock(h2, h2, k, slope)
        self.project = nn.Conv2d(h2, 1, k, padding=k // 2)

    def forward(self, x):
        x = self.refine_in(x)
        x = self.upsample(x)
        x = self.refine_out(x)
        return self.project(x)


def _check_finite(x: torch.Tensor, stage: str):
    if not torch.isfinite(x).all():
        raise NonFiniteActivation(f"non-finite values after stage {stage!r}")


class DownscalerNet(nn.Module):
    """Full downscaler in standardized space.

    ``forward`` consumes standardized per-group input tensors plus the
    *physical* 10 m wind-speed field on the coarse grid.  The skip path
    resamples that field to the target lattice by nearest neighbour and maps
    it into standardized target space using the registered affine constants.
    """

    def __init__(self, cfg: ArchitectureConfig, geometry: DomainGeometry):
        super().__init__()
        self.cfg = cfg
        self.front_end = FrontEnd(cfg)
        self.encoder = UNetEncoder(cfg)
        self.decoder = UNetDecoder(cfg)
        self.head = PostUNetHead(cfg)
        skip_map = NearestMap(geometry.lr_grid, geometry.predictand_grid)
        self.register_buffer(
            "skip_index", torch.from_numpy(skip_map.flat_index.astype(np.int64))
        )
        self.register_buffer("skip_scale", torch.tensor(1.0, dtype=torch.float32))
        self.register_buffer("skip_shift", torch.tensor(0.0, dtype=torch.float32))

    def set_skip_affine(self, predictand_mean: float, predictand_std: float):
        """Configure the physical-to-standardized mapping of the skip field."""
        self.skip_scale.fill_(1.0 / predictand_std)
        self.skip_shift.fill_(-predictand_mean / predictand_std)

    def skip_field(self, skip_uv10: torch.Tensor) -> torch.Tensor:
        """(B, lr, lr) physical field -> (B, out, out) standardized skip."""
        b = skip_uv10.shape[0]
        out = self.cfg.out_size
        gathered = skip_uv10.reshape(b, -1)[:, self.skip_index].reshape(b, out, out)
        return gathered * self.skip_scale + self.skip_shift

    def learned_path(self, inputs: dict[str, torch.Tensor]) -> torch.Tensor:
        self._validate_shapes(inputs)
        x = self.front_end(inputs)
        _check_finite(x, "front_end")
        x, skips = self.encoder(x)
        _check_finite(x, "encoder")
        x = self.decoder(x, skips)
        _check_finite(x, "decoder")
        x = self.head(x)
        _check_finite(x, "head")
        return x.squeeze(1)

    def forward(self, inputs: dict[str, torch.Tensor], skip_uv10: torch.Tensor):
        return self.learned_path(inputs) + self.skip_field(skip_uv10)

    def _validate_shapes(self, inputs: dict[str, torch.Tensor]):
        lr_expect = (
            self.cfg.lr_size if self.cfg.strategy == ARCH_NATIVE else self.cfg.hr_size
        )
        for name, cin in self.cfg.groups:
            if name not in inputs:
                raise ShapeMismatch(f"missing input group {name!r}")
            t = inputs[name]
            size = self.cfg.hr_size if name == "hr" else lr_expect
            if t.shape[1:] != (cin, size, size):
                raise ShapeMismatch(
                    f"group {name!r}: expected (*, {cin}, {size}, {size}), got {tuple(t.shape)}"
                )


@dataclass
class ModelBundle:
    """A constructed network plus everything needed to rebuild or reuse it."""

    net: DownscalerNet
    config: ArchitectureConfig
    geometry: DomainGeometry
    stats: StandardizationStats | None = None
    fingerprint: dict = field(default_factory=dict)
    frozen_groups: tuple[str, ...] = ()

    def group_of(self, tensor_name: str) -> str:
        head = tensor_name.split(".")[0]
        if head in WEIGHT_GROUPS:
            return head
        return "head"  # skip_* buffers belong to the post-U-Net stage

    def named_group_parameters(self, groups: tuple[str, ...]):
        for name, p in self.net.named_parameters():
            if self.group_of(name) in groups:
                yield name, p


def build_bundle(
    config: ArchitectureConfig,
    geometry: DomainGeometry,
    seed: int = 0,
    stats: StandardizationStats | None = None,
) -> ModelBundle:
    shape_check(config)
    torch.manual_seed(seed)
    net = DownscalerNet(config, geometry)
    bundle = ModelBundle(
        net=net,
        config=config,
        geometry=geometry,
        stats=stats,
        fingerprint={"seed": seed, "dataset_digest": None, "epoch": None},
    )
    if stats is not None and "predictand" in stats:
        mean, std = stats.scalar("predictand")
        net.set_skip_affine(mean, std)
    return bundle


def parameter_census(bundle: ModelBundle) -> dict:
    """Exact trainable/frozen parameter counts per weight group."""
    census = {g: {"trainable": 0, "frozen": 0} for g in WEIGHT_GROUPS}
    for name, p in bundle.net.named_parameters():
        bucket = "trainable" if p.requires_grad else "frozen"
        census[bundle.group_of(name)][bucket] += p.numel()
    census["total_trainable"] = sum(census[g]["trainable"] for g in WEIGHT_GROUPS)
    census["total"] = census["total_trainable"] + sum(
        census[g]["frozen"] for g in WEIGHT_GROUPS
    )
    return census


def freeze_groups(bundle: ModelBundle, groups: tuple[str, ...]) -> ModelBundle:
    missing = [g for g in groups if g not in WEIGHT_GROUPS]
    if missing:
        raise MissingGroup(f"unknown weight groups {missing}")
    for _, p in bundle.named_group_parameters(groups):
        p.requires_grad_(False)
    bundle.frozen_groups = tuple(groups)
    return bundle


def assemble_inputs(
    batch: Batch,
    catalog: tuple[VariableSpec, ...],
    config: ArchitectureConfig,
    stats: StandardizationStats,
):
    """Standardize a storage-layout batch into model input tensors.

    Returns (inputs dict, physical skip tensor, standardized target tensor).
    """
    inputs: dict[str, torch.Tensor] = {}
    for gname, _ in config.groups:
        parts = []
        for v in group_variables(catalog, gname):
            source = batch.hr if v.kind == "hr_static" else batch.lr
            arr = stats.standardize_array(v.name, source[v.name])
            parts.append(arr)
        inputs[gname] = torch.from_numpy(np.concatenate(parts, axis=1))
    skip = torch.from_numpy(np.ascontiguousarray(batch.skip_uv10))
    mean, std = stats.scalar("predictand")
    target = torch.from_numpy(
        ((batch.predictand.astype(np.float64) - mean) / std).astype(np.float32)
    )
    return inputs, skip, target


def baseline_bilinear(lr_uv10: np.ndarray, geometry: DomainGeometry) -> np.ndarray:
    """Bilinear resampling of the coarse 10 m speed onto the target lattice.

    No learned parameters; this is the reference every model must beat.
    """
    bmap = BilinearMap(geometry.lr_grid, geometry.predictand_grid)
    return bmap.apply(lr_uv10).astype(np.float32)


# -- serialization -----------------------------------------------------------


def save_bundle(bundle: ModelBundle, out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    meta = {
        "format_version": 1,
        "architecture": bundle.config.to_json(),
        "geometry": bundle.geometry.to_json(),
        "stats": bundle.stats.to_json() if bundle.stats else None,
        "fingerprint": bundle.fingerprint,
        "frozen_groups": list(bundle.frozen_groups),
    }
    (out / "config.json").write_text(json.dumps(meta, indent=1))

    index = {}
    state = bundle.net.state_dict()
    for name, tensor in state.items():
        arr = tensor.detach().cpu().numpy()
        fname = name.replace(".", "__") + ".bin"
        if arr.dtype == np.float32:
            arr.astype("<f4").tofile(out / fname)
            dtype = "f4"
        elif arr.dtype == np.int64:
            arr.astype("<i8").tofile(out / fname)
            dtype = "i8"
        else:
            raise ValueError(f"unsupported tensor dtype {arr.dtype} for {name}")
        index[name] = {
            "file": fname,
            "shape": list(arr.shape),
            "dtype": dtype,
            "group": bundle.group_of(name),
        }
    (out / "weights.index.json").write_text(json.dumps(index, indent=1))


def load_bundle(in_dir: str | Path) -> ModelBundle:
    src = Path(in_dir)
    if not (src / "config.json").exists():
        from .errors import MissingArtifact

        raise MissingArtifact(f"no model bundle at {src}")
    meta = json.loads((src / "config.json").read_text())
    config = ArchitectureConfig.from_json(meta["architecture"])
    geometry = DomainGeometry.from_json(meta["geometry"])
    stats = StandardizationStats.from_json(meta["stats"]) if meta["stats"] else None
    net = DownscalerNet(config, geometry)

    index = json.loads((src / "weights.index.json").read_text())
    state = {}
    for name, entry in index.items():
        dtype = "<f4" if entry["dtype"] == "f4" else "<i8"
        arr = np.fromfile(src / entry["file"], dtype=dtype).reshape(entry["shape"])
        state[name] = torch.from_numpy(arr.copy())
    net.load_state_dict(state)
    bundle = ModelBundle(
        net=net,
        config=config,
        geometry=geometry,
        stats=stats,
        fingerprint=meta.get("fingerprint", {}),
        frozen_groups=tuple(meta.get("frozen_groups", ())),
    )
    if bundle.frozen_groups:
        freeze_groups(bundle, bundle.frozen_groups)
    return bundle
