"""Staged bottom-up training: two-stage raw and three-stage skull-stripped.

Stages
------
adult_prior          train the whole hierarchy from scratch (anatomical prior)
infant_upper         load a prior checkpoint, freeze level 0, train the rest
skullstripped_upper  load a prior checkpoint, swap the head to the target
                     scheme, freeze level 0, train the rest
finetune             load a checkpoint and train whatever is left unfrozen

Determinism: the shuffle order is derived from (seed, epoch) and each
sample's augmentation rng from (seed, epoch, dataset index), so results are
bitwise independent of the worker count. Dropout noise comes from the torch
generator, seeded once per stage.

The learning rate starts at lr_init and is multiplied by lr_factor whenever
the validation loss fails to improve by more than plateau_min_delta for
plateau_patience consecutive epochs; it never increases. The checkpoint at
checkpoint_out always holds the best validation epoch so far, so an
interrupted stage leaves a usable artefact behind.
"""

from __future__ import annotations

import dataclasses
import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .augment import AugmentationSpec, augment_sample
from .errors import ConfigError, ContractError, NumericsError
from .lod_net import (NetworkConfig, NetworkState, build, load_checkpoint,
                      save_checkpoint, set_frozen, swap_head)
from .losses_metrics import dice_coefficient, dice_loss
from .rng import derive_rng
from .volume_io import (ClassScheme, LabelMap, Volume, check_paired,
                        get_scheme, list_nifti, load_labels, load_volume,
                        nifti_stem)

STAGES = ("adult_prior", "infant_upper", "skullstripped_upper", "finetune")
_TRANSFER_STAGES = ("infant_upper", "skullstripped_upper", "finetune")
_FROZEN_DEFAULTS = {
    "adult_prior": frozenset(),
    "infant_upper": frozenset({"0"}),
    "skullstripped_upper": frozenset({"0"}),
    "finetune": frozenset({"0"}),
}

# rng stream tags
_ORDER_KEY = 0x08D3
_AUG_KEY = 0xA06
_TORCH_KEY = 0x70C4


@dataclass(frozen=True)
class TrainConfig:
    """One training stage: hyperparameters, artefact paths, and the seed."""

    stage: str
    epochs: int = 100
    lr_init: float = 5e-4
    lr_factor: float = 0.25
    plateau_patience: int = 5
    plateau_min_delta: float = 1e-4
    batch_size: int = 1
    frozen_levels: frozenset[str] | None = None
    augmentation: AugmentationSpec = field(default_factory=AugmentationSpec)
    checkpoint_in: str | Path | None = None
    checkpoint_out: str | Path | None = None
    seed: int = 0
    scheme: ClassScheme | str = "raw8"
    network: NetworkConfig | None = None
    selection: str = "val_loss"
    include_background_in_loss: bool = True
    log_path: str | Path | None = None
    workers: int = 1

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ConfigError(f"unknown stage {self.stage!r}; stages are {STAGES}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if not 0 < self.lr_init:
            raise ConfigError(f"lr_init must be positive, got {self.lr_init}")
        if not 0.0 < self.lr_factor < 1.0:
            raise ConfigError(f"lr_factor must be in (0, 1), got {self.lr_factor}")
        if self.plateau_patience < 1:
            raise ConfigError(
                f"plateau_patience must be >= 1, got {self.plateau_patience}")
        if self.plateau_min_delta < 0:
            raise ConfigError(
                f"plateau_min_delta must be >= 0, got {self.plateau_min_delta}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.workers < 1:
            raise ConfigError(f"workers must be >= 1, got {self.workers}")
        if self.selection not in ("val_loss", "val_dice"):
            raise ConfigError(
                f"selection must be 'val_loss' or 'val_dice', got {self.selection!r}")
        if isinstance(self.scheme, str):
            object.__setattr__(self, "scheme", get_scheme(self.scheme))
        if self.frozen_levels is None:
            object.__setattr__(self, "frozen_levels", _FROZEN_DEFAULTS[self.stage])
        else:
            object.__setattr__(
                self, "frozen_levels", frozenset(str(l) for l in self.frozen_levels))
        if self.stage in _TRANSFER_STAGES and self.checkpoint_in is None:
            raise ConfigError(
                f"stage {self.stage!r} transfers from a checkpoint; set checkpoint_in")
        if self.stage in ("infant_upper", "skullstripped_upper") \
                and "0" not in self.frozen_levels:
            raise ConfigError(
                f"stage {self.stage!r} trains the upper level only; "
                f"frozen_levels must include '0'")
        if self.stage == "adult_prior" and self.network is None:
            raise ConfigError("stage 'adult_prior' builds from scratch; set network")
        if self.network is not None \
                and self.network.num_classes != self.scheme.num_classes:
            raise ConfigError(
                f"network has {self.network.num_classes} classes but scheme "
                f"{self.scheme.names} has {self.scheme.num_classes}")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["frozen_levels"] = sorted(self.frozen_levels)
        d["augmentation"] = self.augmentation.to_dict()
        d["scheme"] = list(self.scheme.names)
        d["network"] = dataclasses.asdict(self.network) if self.network else None
        for key in ("checkpoint_in", "checkpoint_out", "log_path"):
            if d[key] is not None:
                d[key] = str(d[key])
        return d


@dataclass(frozen=True)
class TrainLogRecord:
    """One validation epoch: losses, per-class Dice, lr used, wall time."""

    epoch: int
    train_loss: float
    val_loss: float
    val_dice_per_class: dict[str, float]
    lr: float
    wall_time_s: float


class PlateauScheduler:
    """Multiply lr by `factor` after `patience` epochs without improvement.

    An epoch improves when its value drops more than min_delta below the best
    seen so far. The learning rate never increases.
    """

    def __init__(self, lr_init: float, factor: float, patience: int,
                 min_delta: float = 1e-4):
        self.lr = float(lr_init)
        self.factor = float(factor)
        self.patience = int(patience)
        self.min_delta = float(min_delta)
        self.best: float | None = None
        self.wait = 0

    def step(self, value: float) -> float:
        """Record one epoch's validation value; return the lr for the next."""
        if self.best is None or value < self.best - self.min_delta:
            self.best = value
            self.wait = 0
        else:
            self.wait += 1
            if self.wait >= self.patience:
                self.lr *= self.factor
                self.wait = 0
        return self.lr


def _check_dataset(name: str, dataset, scheme: ClassScheme, shape) -> None:
    if len(dataset) == 0:
        raise ConfigError(f"{name} dataset is empty")
    for volume, labels in dataset:
        check_paired(volume, labels)
        if labels.scheme != scheme:
            raise ContractError(
                f"{name} labels use scheme {labels.scheme.names}, "
                f"config says {scheme.names}")
        if volume.shape != tuple(shape):
            raise ContractError(
                f"{name} volume shape {volume.shape} does not match "
                f"network input {tuple(shape)}")
        lo, hi = float(volume.data.min()), float(volume.data.max())
        if lo < -1e-5 or hi > 1.0 + 1e-5:
            raise ContractError(
                f"{name} volume intensities in [{lo:.4g}, {hi:.4g}]; "
                f"normalize to [0, 1] first")


def _prepare_state(config: TrainConfig) -> NetworkState:
    if config.stage == "adult_prior":
        state = build(config.network, seed=config.seed)
    elif config.stage == "skullstripped_upper":
        state = load_checkpoint(config.checkpoint_in)
        swap_head(state, config.scheme.num_classes, seed=config.seed)
    else:
        state = load_checkpoint(config.checkpoint_in,
                                expect_num_classes=config.scheme.num_classes)
    set_frozen(state, config.frozen_levels)
    return state


def _one_hot_batch(labels: list[LabelMap], num_classes: int) -> torch.Tensor:
    stack = np.stack([l.data for l in labels]).astype(np.int64)
    return torch.nn.functional.one_hot(
        torch.from_numpy(stack), num_classes).to(torch.float32)


class _LogWriter:
    def __init__(self, path):
        self.path = Path(path) if path is not None else None
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)

    def write(self, payload: dict) -> None:
        if self.path is None:
            return
        with open(self.path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(payload, sort_keys=True) + "\n")


def _validate_epoch(state: NetworkState, val_set, config: TrainConfig
                    ) -> tuple[float, dict[str, float]]:
    """Mean val loss and per-class Dice of the argmax segmentation."""
    net = state.net
    net.eval()
    scheme = config.scheme
    losses = []
    dice_sums: dict[str, float] = {}
    with torch.no_grad():
        for volume, labels in val_set:
            x = torch.from_numpy(volume.data).reshape(1, 1, *volume.shape)
            probs = net(x)
            gt = _one_hot_batch([labels], scheme.num_classes)
            loss = dice_loss(probs.movedim(1, -1), gt,
                             include_background=config.include_background_in_loss)
            losses.append(float(loss))
            pred = probs[0].argmax(dim=0).numpy().astype(np.int16)
            result = dice_coefficient(
                LabelMap(pred, labels.affine, scheme), labels)
            for name, value in result.per_class.items():
                dice_sums[name] = dice_sums.get(name, 0.0) + value
    per_class = {k: v / len(val_set) for k, v in dice_sums.items()}
    return float(np.mean(losses)), per_class


def run_stage(config: TrainConfig, train_set, val_set
              ) -> tuple[NetworkState, list[TrainLogRecord]]:
    """Train one stage; returns the best-validation state and the epoch log.

    train_set / val_set are sequences of (Volume, LabelMap) pairs with
    intensities already normalized to [0, 1].
    """
    state = _prepare_state(config)
    _check_dataset("train", train_set, config.scheme, state.config.input_shape)
    _check_dataset("val", val_set, config.scheme, state.config.input_shape)

    torch.manual_seed(int(derive_rng(config.seed, _TORCH_KEY).integers(2 ** 63)))

    params = list(state.trainable_parameters())
    optimizer = torch.optim.Adam(params, lr=config.lr_init) if params else None
    scheduler = PlateauScheduler(config.lr_init, config.lr_factor,
                                 config.plateau_patience, config.plateau_min_delta)
    log = _LogWriter(config.log_path)
    log.write({"event": "stage_start", "stage": config.stage,
               "config": config.to_dict(),
               "trainable_params": int(sum(p.numel() for p in params)),
               "train_size": len(train_set), "val_size": len(val_set)})

    records: list[TrainLogRecord] = []
    best_key: float | None = None
    best_sd = None
    best_epoch = 0
    lr = config.lr_init
    pool = ThreadPoolExecutor(config.workers) if config.workers > 1 else None

    def augment_one(index: int, epoch: int):
        volume, labels = train_set[index]
        rng = derive_rng(config.seed, _AUG_KEY, epoch, index)
        out_v, out_l, _ = augment_sample(volume, labels, config.augmentation, rng)
        return out_v, out_l

    try:
        for epoch in range(1, config.epochs + 1):
            tick = time.monotonic()
            order = derive_rng(config.seed, _ORDER_KEY, epoch).permutation(
                len(train_set))
            state.net.train()
            total, seen = 0.0, 0
            for start in range(0, len(order), config.batch_size):
                idxs = [int(i) for i in order[start:start + config.batch_size]]
                if pool is not None:
                    samples = list(pool.map(lambda i: augment_one(i, epoch), idxs))
                else:
                    samples = [augment_one(i, epoch) for i in idxs]
                x = torch.from_numpy(
                    np.stack([v.data for v, _ in samples])).unsqueeze(1)
                gt = _one_hot_batch([l for _, l in samples],
                                    config.scheme.num_classes)
                probs = state.net(x)
                loss = dice_loss(
                    probs.movedim(1, -1), gt,
                    include_background=config.include_background_in_loss)
                if not torch.isfinite(loss):
                    log.write({"event": "nan_abort", "stage": config.stage,
                               "epoch": epoch, "batch_indices": idxs,
                               "lr": lr, "train_loss_so_far": total / max(seen, 1)})
                    raise NumericsError(
                        f"non-finite loss at stage {config.stage!r} epoch {epoch}")
                if optimizer is not None:
                    optimizer.zero_grad()
                    loss.backward()
                    optimizer.step()
                total += float(loss.detach()) * len(idxs)
                seen += len(idxs)

            val_loss, per_class = _validate_epoch(state, val_set, config)
            record = TrainLogRecord(
                epoch=epoch, train_loss=total / seen, val_loss=val_loss,
                val_dice_per_class=per_class, lr=lr,
                wall_time_s=time.monotonic() - tick)
            records.append(record)
            log.write({"event": "epoch", "stage": config.stage,
                       **dataclasses.asdict(record)})

            if config.selection == "val_loss":
                key = val_loss
            else:
                key = -float(np.mean(list(per_class.values())))
            if best_key is None or key < best_key:
                best_key = key
                best_epoch = epoch
                best_sd = {k: v.detach().clone()
                           for k, v in state.net.state_dict().items()}
                if config.checkpoint_out is not None:
                    save_checkpoint(state, config.checkpoint_out)

            lr = scheduler.step(val_loss)
            if optimizer is not None:
                for group in optimizer.param_groups:
                    group["lr"] = lr
    finally:
        if pool is not None:
            pool.shutdown()

    state.net.load_state_dict(best_sd)
    state.net.eval()
    log.write({"event": "stage_end", "stage": config.stage,
               "best_epoch": best_epoch,
               "best_val_loss": records[best_epoch - 1].val_loss})
    return state, records


DESK_INPUT_SHAPE = (32, 32, 32)


def desk_network(num_classes: int = 4) -> NetworkConfig:
    """32-cube architecture for smoke tests and demos; dropout off."""
    return NetworkConfig(input_shape=DESK_INPUT_SHAPE,
                         num_classes=num_classes, dropout_rate=0.0)


def desk_smoke_config(**overrides) -> TrainConfig:
    """Single-phantom overfit recipe: 200 steps, raised lr, no decay, no
    augmentation. Reaches foreground mean Dice > 0.95 well inside the budget.
    """
    base = dict(stage="adult_prior", epochs=200, batch_size=1,
                lr_init=2e-3, plateau_patience=200,
                augmentation=AugmentationSpec.disabled(),
                network=desk_network(4), scheme="ss4", seed=9)
    base.update(overrides)
    return TrainConfig(**base)


def _index_configs(configs, required: tuple[str, ...]) -> dict[str, TrainConfig]:
    by_stage: dict[str, TrainConfig] = {}
    for config in configs:
        if config.stage in by_stage:
            raise ConfigError(f"duplicate stage {config.stage!r} in pipeline")
        by_stage[config.stage] = config
    for stage in required:
        if stage not in by_stage:
            raise ConfigError(f"pipeline config missing stage {stage!r}")
    extra = set(by_stage) - set(required)
    if extra:
        raise ConfigError(f"unexpected pipeline stages {sorted(extra)}; "
                          f"expected {list(required)}")
    return by_stage


def _chain(first: TrainConfig, second: TrainConfig) -> TrainConfig:
    """Make the second stage start from the first stage's checkpoint."""
    if first.checkpoint_out is None:
        raise ConfigError(
            f"stage {first.stage!r} needs checkpoint_out so that "
            f"{second.stage!r} can load it")
    if str(second.checkpoint_in) != str(first.checkpoint_out):
        raise ConfigError(
            f"stage {second.stage!r} checkpoint_in {second.checkpoint_in!r} "
            f"does not match stage {first.stage!r} checkpoint_out "
            f"{first.checkpoint_out!r}")
    return second


def _run_tagged(config: TrainConfig, data) -> tuple[NetworkState, list[TrainLogRecord]]:
    from .errors import LodsegError  # local import keeps module deps one-way
    try:
        return run_stage(config, *data)
    except LodsegError as exc:
        raise type(exc)(f"stage {config.stage!r}: {exc}") from exc


def run_pipeline_raw(configs, data: dict, resume: bool = False
                     ) -> tuple[NetworkState, dict[str, list[TrainLogRecord]]]:
    """adult_prior then infant_upper, checkpointed at the stage boundary.

    `data` maps stage name to a (train_set, val_set) pair. With resume=True a
    finished stage-1 checkpoint is reused instead of retraining.
    """
    by_stage = _index_configs(configs, ("adult_prior", "infant_upper"))
    first, second = by_stage["adult_prior"], by_stage["infant_upper"]
    _chain(first, second)

    logs: dict[str, list[TrainLogRecord]] = {}
    if resume and Path(first.checkpoint_out).exists():
        logs["adult_prior"] = []
    else:
        _, logs["adult_prior"] = _run_tagged(first, data["adult_prior"])
    state, logs["infant_upper"] = _run_tagged(second, data["infant_upper"])
    return state, logs


def run_pipeline_skullstripped(configs, data: dict, resume: bool = False
                               ) -> tuple[NetworkState, dict[str, list[TrainLogRecord]]]:
    """skullstripped_upper (head swap + upper level) then finetune.

    The adult lower-level weights come in via the first stage's
    checkpoint_in; `data` maps stage name to (train_set, val_set).
    """
    by_stage = _index_configs(configs, ("skullstripped_upper", "finetune"))
    first, second = by_stage["skullstripped_upper"], by_stage["finetune"]
    _chain(first, second)

    logs: dict[str, list[TrainLogRecord]] = {}
    if resume and Path(first.checkpoint_out).exists():
        logs["skullstripped_upper"] = []
    else:
        _, logs["skullstripped_upper"] = _run_tagged(first, data["skullstripped_upper"])
    state, logs["finetune"] = _run_tagged(second, data["finetune"])
    return state, logs




def load_pair_dataset(volumes_dir, labels_dir, scheme: ClassScheme | str
                      ) -> list[tuple[Volume, LabelMap]]:
    """Pair volumes with labels by file stem across two directories."""
    if isinstance(scheme, str):
        scheme = get_scheme(scheme)
    volumes_dir, labels_dir = Path(volumes_dir), Path(labels_dir)
    vols = {nifti_stem(p): p for p in list_nifti(volumes_dir)}
    labs = {nifti_stem(p): p for p in list_nifti(labels_dir)}
    if not vols:
        raise ConfigError(f"no volumes found under {volumes_dir}")
    if set(vols) != set(labs):
        missing = sorted(set(vols) ^ set(labs))
        raise ConfigError(f"unpaired volume/label ids: {missing}")
    pairs = []
    for stem in sorted(vols):
        volume = load_volume(vols[stem])
        labels = load_labels(labs[stem], scheme)
        check_paired(volume, labels)
        pairs.append((volume, labels))
    return pairs
