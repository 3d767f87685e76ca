"""Composite loss, training loop with callbacks, transfer fine-tuning, search.

The loss is pixel MSE plus a weighted structural-similarity penalty:

    loss = MSE + weight * (1 - SSIM)

Optimization uses Adam with two monitor-driven callbacks on validation MSE:
the learning rate shrinks by a fixed factor after a plateau, and training
stops early after a longer one.  The two stagnation counters are independent
and both reset on improvement.  The best-validation-MSE weights are always
the ones returned.
"""

from __future__ import annotations

import copy
import csv
import json
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .datastore import batches, data_stats
from .errors import DataExhausted, MissingGroup, NonFiniteLoss, ShapeMismatch
from .model import ModelBundle, assemble_inputs, freeze_groups, parameter_census

TRANSFER_FROZEN_GROUPS = ("front_end", "encoder")


@dataclass(frozen=True)
class SsimConfig:
    """Uniform-window SSIM parameters; stabilizers follow the usual
    (0.01 L)^2 / (0.03 L)^2 convention for dynamic range L."""

    window: int = 7
    dynamic_range: float = 1.0

    def __post_init__(self):
        if self.window < 1 or self.window % 2 == 0:
            raise ValueError("window must be a positive odd integer")
        if self.dynamic_range <= 0:
            raise ValueError("dynamic_range must be > 0")

    @property
    def c1(self) -> float:
        return (0.01 * self.dynamic_range) ** 2

    @property
    def c2(self) -> float:
        return (0.03 * self.dynamic_range) ** 2


def _as_batched(x: torch.Tensor) -> torch.Tensor:
    if x.dim() == 2:
        return x[None, None]
    if x.dim() == 3:
        return x[:, None]
    raise ShapeMismatch(f"expected (H, W) or (B, H, W), got {tuple(x.shape)}")


def ssim_per_sample(x: torch.Tensor, y: torch.Tensor, cfg: SsimConfig) -> torch.Tensor:
    """Mean SSIM over all valid sliding windows, one value per sample."""
    if x.shape != y.shape:
        raise ShapeMismatch(f"shape mismatch {tuple(x.shape)} vs {tuple(y.shape)}")
    xb, yb = _as_batched(x), _as_batched(y)
    k = cfg.window
    if k > min(xb.shape[-2:]):
        raise ShapeMismatch(f"window {k} exceeds field size {tuple(xb.shape[-2:])}")
    mu_x = F.avg_pool2d(xb, k, stride=1)
    mu_y = F.avg_pool2d(yb, k, stride=1)
    var_x = F.avg_pool2d(xb * xb, k, stride=1) - mu_x * mu_x
    var_y = F.avg_pool2d(yb * yb, k, stride=1) - mu_y * mu_y
    cov = F.avg_pool2d(xb * yb, k, stride=1) - mu_x * mu_y
    c1, c2 = cfg.c1, cfg.c2
    num = (2 * mu_x * mu_y + c1) * (2 * cov + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2)
    return (num / den).mean(dim=(1, 2, 3))


def ssim(x: torch.Tensor, y: torch.Tensor, cfg: SsimConfig) -> torch.Tensor:
    """Scalar SSIM in [-1, 1]; symmetric in its arguments."""
    return ssim_per_sample(x, y, cfg).mean()


def composite_loss(
    pred: torch.Tensor, target: torch.Tensor, weight: float, ssim_cfg: SsimConfig
) -> torch.Tensor:
    """MSE plus ``weight * (1 - SSIM)`` over the batch."""
    if pred.shape != target.shape:
        raise ShapeMismatch(f"shape mismatch {tuple(pred.shape)} vs {tuple(target.shape)}")
    mse = ((pred - target) ** 2).mean()
    if weight == 0:
        return mse
    return mse + weight * (1.0 - ssim(pred, target, ssim_cfg))


@dataclass(frozen=True)
class TrainingConfig:
    learning_rate: float = 1e-3
    max_epochs: int = 70
    batch_size: int = 32
    loss_weight: float = 1.0  # SSIM term weight
    early_stop_patience: int = 15
    plateau_patience: int = 10
    plateau_factor: float = 0.10
    monitor: str = "val_mse"
    seed: int = 0
    ssim_window: int = 7

    def __post_init__(self):
        if self.early_stop_patience < 1 or self.plateau_patience < 1:
            raise ValueError("patience values must be >= 1")
        if not (0 < self.plateau_factor < 1):
            raise ValueError("plateau_factor must be in (0, 1)")
        if self.loss_weight < 0:
            raise ValueError("loss weight must be >= 0")

    @classmethod
    def transfer_defaults(cls, **overrides) -> "TrainingConfig":
        base = cls(learning_rate=1e-5, max_epochs=25)
        return replace(base, **overrides) if overrides else base

    def to_json(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_json(cls, obj: dict) -> "TrainingConfig":
        return cls(**obj)


class CallbackState:
    """Plateau LR reduction and early stopping with independent counters.

    An epoch improves when its monitored value is strictly below the best so
    far; improvement resets both counters.  After ``plateau_patience``
    consecutive stagnant epochs the learning rate is cut by ``factor`` and
    that counter restarts; after ``early_stop_patience`` stagnant epochs
    training stops.  The best epoch is always checkpointed.
    """

    def __init__(self, plateau_patience: int, early_stop_patience: int):
        self.plateau_patience = plateau_patience
        self.early_stop_patience = early_stop_patience
        self.best = math.inf
        self.best_epoch: int | None = None
        self.plateau_wait = 0
        self.stop_wait = 0

    def update(self, epoch: int, value: float) -> dict:
        improved = value < self.best
        reduce_lr = False
        stop = False
        if improved:
            self.best = value
            self.best_epoch = epoch
            self.plateau_wait = 0
            self.stop_wait = 0
        else:
            self.plateau_wait += 1
            self.stop_wait += 1
            if self.plateau_wait >= self.plateau_patience:
                reduce_lr = True
                self.plateau_wait = 0
            if self.stop_wait >= self.early_stop_patience:
                stop = True
        return {"improved": improved, "reduce_lr": reduce_lr, "stop": stop}


@dataclass
class TrainRecord:
    epochs: list[dict] = field(default_factory=list)
    best_epoch: int | None = None
    best_val_mse: float | None = None
    wall_time_s: float = 0.0

    def metric_trace(self) -> list[tuple]:
        return [
            (e["epoch"], e["train_loss"], e["val_mse"], e["val_ssim"], e["lr"])
            for e in self.epochs
        ]

    def lr_trace(self) -> list[float]:
        return [e["lr"] for e in self.epochs]

    def to_jsonl(self, path: str | Path) -> None:
        with open(path, "w") as f:
            for e in self.epochs:
                f.write(json.dumps(e) + "\n")

    @classmethod
    def from_jsonl(cls, path: str | Path) -> "TrainRecord":
        epochs = [json.loads(line) for line in open(path) if line.strip()]
        rec = cls(epochs=epochs)
        if epochs:
            best = min(epochs, key=lambda e: e["val_mse"])
            rec.best_epoch = best["epoch"]
            rec.best_val_mse = best["val_mse"]
            rec.wall_time_s = sum(e.get("seconds", 0.0) for e in epochs)
        return rec


def standardized_predictand_range(data, stats) -> float:
    """Dynamic range of the standardized target over the training split."""
    mean, std = stats.scalar("predictand")
    lo, hi = math.inf, -math.inf
    for batch in batches(data, "train", 256, shuffle=False):
        arr = batch.predictand
        lo = min(lo, float(arr.min()))
        hi = max(hi, float(arr.max()))
    if not (hi > -math.inf):
        raise DataExhausted("empty training split")
    return max(((hi - mean) / std) - ((lo - mean) / std), 1e-3)


def evaluate_split(
    bundle: ModelBundle, data, split: str, cfg: TrainingConfig, ssim_cfg: SsimConfig
) -> tuple[float, float]:
    """Standardized-space MSE and SSIM over a split, batch-streamed."""
    net = bundle.net
    was_training = net.training
    net.eval()
    catalog = data.catalog
    sq_sum, ssim_sum, n = 0.0, 0.0, 0
    with torch.no_grad():
        for batch in batches(data, split, cfg.batch_size, shuffle=False):
            inputs, skip, target = assemble_inputs(batch, catalog, bundle.config, bundle.stats)
            pred = net(inputs, skip)
            b = target.shape[0]
            sq_sum += float(((pred - target) ** 2).mean()) * b
            ssim_sum += float(ssim_per_sample(pred, target, ssim_cfg).sum())
            n += b
    if was_training:
        net.train()
    if n == 0:
        raise DataExhausted(f"split {split!r} is empty")
    return sq_sum / n, ssim_sum / n


def train(
    bundle: ModelBundle,
    data,
    cfg: TrainingConfig,
    frozen_groups: tuple[str, ...] = (),
) -> tuple[ModelBundle, TrainRecord]:
    """Optimize a bundle on a data pool; returns best-validation weights."""
    if data.n_samples("train") == 0:
        raise DataExhausted("training split is empty")
    if bundle.stats is None:
        bundle.stats = data_stats(data)
        mean, std = bundle.stats.scalar("predictand")
        bundle.net.set_skip_affine(mean, std)

    torch.manual_seed(cfg.seed)
    net = bundle.net
    catalog = data.catalog
    ssim_cfg = SsimConfig(
        window=cfg.ssim_window,
        dynamic_range=standardized_predictand_range(data, bundle.stats),
    )
    params = [p for p in net.parameters() if p.requires_grad]
    if not params:
        raise MissingGroup("no trainable parameters")
    optimizer = torch.optim.Adam(params, lr=cfg.learning_rate)
    callbacks = CallbackState(cfg.plateau_patience, cfg.early_stop_patience)
    record = TrainRecord()
    best_state = None
    t_start = time.perf_counter()

    for epoch in range(1, cfg.max_epochs + 1):
        e_start = time.perf_counter()
        net.train()
        for g in frozen_groups:
            getattr(net, g).eval()  # frozen normalization statistics
        loss_sum, n_seen = 0.0, 0
        for bi, batch in enumerate(
            batches(data, "train", cfg.batch_size, seed=cfg.seed, epoch=epoch)
        ):
            inputs, skip, target = assemble_inputs(batch, catalog, bundle.config, bundle.stats)
            optimizer.zero_grad()
            pred = net(inputs, skip)
            loss = composite_loss(pred, target, cfg.loss_weight, ssim_cfg)
            if not torch.isfinite(loss):
                raise NonFiniteLoss(
                    f"loss became non-finite at epoch {epoch}, batch {bi}, "
                    f"lr {optimizer.param_groups[0]['lr']:g}"
                )
            loss.backward()
            optimizer.step()
            b = target.shape[0]
            loss_sum += float(loss.detach()) * b
            n_seen += b

        val_mse, val_ssim = evaluate_split(bundle, data, "val", cfg, ssim_cfg)
        lr_now = optimizer.param_groups[0]["lr"]
        record.epochs.append(
            {
                "epoch": epoch,
                "train_loss": loss_sum / max(n_seen, 1),
                "val_mse": val_mse,
                "val_ssim": val_ssim,
                "lr": lr_now,
                "seconds": time.perf_counter() - e_start,
            }
        )
        actions = callbacks.update(epoch, val_mse)
        if actions["improved"]:
            best_state = copy.deepcopy(net.state_dict())
        if actions["reduce_lr"]:
            for group in optimizer.param_groups:
                group["lr"] *= cfg.plateau_factor
        if actions["stop"]:
            break

    if best_state is not None:
        net.load_state_dict(best_state)
    record.best_epoch = callbacks.best_epoch
    record.best_val_mse = callbacks.best
    record.wall_time_s = time.perf_counter() - t_start
    bundle.fingerprint = {
        "seed": cfg.seed,
        "dataset_digest": data.digest(),
        "epoch": record.best_epoch,
    }
    return bundle, record


def transfer(
    general: ModelBundle, target_data, cfg: TrainingConfig = None
) -> tuple[ModelBundle, TrainRecord]:
    """Fine-tune a copy of a general model on a new domain.

    Front-end and encoder weights are frozen (byte-identical before/after);
    only the U-Net decoder and the post-U-Net head update.
    """
    cfg = cfg or TrainingConfig.transfer_defaults()
    census = parameter_census(general)
    for g in ("front_end", "encoder", "decoder", "head"):
        if census[g]["trainable"] + census[g]["frozen"] == 0:
            raise MissingGroup(f"general bundle has no weights in group {g!r}")

    specific = ModelBundle(
        net=copy.deepcopy(general.net),
        config=general.config,
        geometry=general.geometry,
        stats=None,  # re-derived from the target domain below
        fingerprint=dict(general.fingerprint),
    )
    for p in specific.net.parameters():
        p.requires_grad_(True)
    freeze_groups(specific, TRANSFER_FROZEN_GROUPS)
    specific.stats = data_stats(target_data)
    mean, std = specific.stats.scalar("predictand")
    specific.net.set_skip_affine(mean, std)
    return train(specific, target_data, cfg, frozen_groups=TRANSFER_FROZEN_GROUPS)


# -- hyperparameter search ----------------------------------------------------

SEARCH_CSV_COLUMNS = ("trial", "lr", "lambda", "alpha", "dropout", "val_mse", "val_ssim", "epochs_run")
_CSV_KEYS = {
    "lr": "learning_rate",
    "lambda": "loss_weight",
    "alpha": "leaky_slope",
    "dropout": "dropout_rate",
}


def hp_search(
    space: dict[str, list], budget: int, evaluate, seed: int = 0
) -> tuple[dict, list[dict]]:
    """Seeded random search; picks the trial with minimum validation MSE.

    ``evaluate`` maps a sampled parameter dict to a result dict holding at
    least ``val_mse`` (plus optional ``val_ssim`` / ``epochs_run``).  The
    interface leaves room for smarter samplers; at desk-scale budgets random
    search is the honest default.
    """
    if budget < 1:
        raise ValueError("budget must be >= 1")
    rng = np.random.default_rng([seed, 99])
    trials = []
    for k in range(budget):
        params = {name: _to_python(rng.choice(grid)) for name, grid in space.items()}
        result = evaluate(dict(params))
        row = {"trial": k, **params}
        row["val_mse"] = float(result["val_mse"])
        row["val_ssim"] = float(result.get("val_ssim", math.nan))
        row["epochs_run"] = int(result.get("epochs_run", 0))
        trials.append(row)
    best = min(trials, key=lambda r: r["val_mse"])
    best_params = {k: v for k, v in best.items() if k in space}
    return best_params, trials


def _to_python(v):
    if isinstance(v, (np.floating,)):
        return float(v)
    if isinstance(v, (np.integer,)):
        return int(v)
    return v


def make_search_evaluator(data, architecture: dict, base_training: TrainingConfig):
    """Bind a data pool to hp_search: each trial trains a fresh bundle.

    Sampled keys map onto the training config (learning_rate, loss_weight)
    or the architecture (leaky_slope, dropout_rate).
    """
    from .datastore import data_stats
    from .model import ArchitectureConfig, arch_strategy_for, build_bundle

    def evaluate(params: dict) -> dict:
        arch = dict(architecture)
        tr = base_training.to_json()
        for key, value in params.items():
            if key in ("leaky_slope", "dropout_rate"):
                arch[key] = value
            else:
                tr[key] = value
        cfg = ArchitectureConfig.build(
            data.catalog, data.geometry, strategy=arch_strategy_for(data.strategy), **arch
        )
        bundle = build_bundle(cfg, data.geometry, seed=tr["seed"], stats=data_stats(data))
        _, record = train(bundle, data, TrainingConfig.from_json(tr))
        return {
            "val_mse": record.best_val_mse,
            "val_ssim": record.epochs[record.best_epoch - 1]["val_ssim"],
            "epochs_run": len(record.epochs),
        }

    return evaluate


def write_trials_csv(trials: list[dict], path: str | Path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(SEARCH_CSV_COLUMNS)
        for row in trials:
            w.writerow(
                [
                    row.get("trial"),
                    row.get(_CSV_KEYS["lr"], row.get("lr")),
                    row.get(_CSV_KEYS["lambda"], row.get("lambda")),
                    row.get(_CSV_KEYS["alpha"], row.get("alpha")),
                    row.get(_CSV_KEYS["dropout"], row.get("dropout")),
                    row.get("val_mse"),
                    row.get("val_ssim"),
                    row.get("epochs_run"),
                ]
            )
