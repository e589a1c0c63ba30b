"""Two-level level-of-detail segmentation network.

Level 0 sees the image at reduced resolution (entry max-pool) and learns the
coarse anatomical layout; inside it, features drop by a further reduction
factor and come back through parameter-free upsampling with an element-wise
Add skip. Level 1 works at full resolution and receives the level-0 output
twice: added into its encoder after the entry pool, and upsampled and added
again before the classification head. All skips are additive, which keeps the
parameter count low compared to concatenation, and a 1-cube convolution plus
softmax produces per-class probabilities.

Freezing is tracked per level ("0", "1", "head"); frozen parameters keep
requires_grad=False and are excluded from optimizers, and GroupNorm carries
no running statistics, so a frozen level is bitwise inert during training.

Checkpoints are a single self-describing binary file: an 8-byte magic, a
format version, a JSON header (config, frozen set, tensor directory) and the
raw little-endian float32 tensor payload. The layout is documented in the
README so other tools can read it without torch.
"""

from __future__ import annotations

import dataclasses
import json
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .errors import ConfigError, ContractError, FormatError, MigrationError
from .volume_io import Volume

CHECKPOINT_MAGIC = b"LODSEGCK"
CHECKPOINT_VERSION = 1

LEVELS = ("0", "1", "head")


def _normalize_level(level) -> str:
    s = str(level)
    if s not in LEVELS:
        raise ContractError(f"unknown level {level!r}; levels are {LEVELS}")
    return s


@dataclass(frozen=True)
class NetworkConfig:
    """Architecture hyperparameters.

    blocks_per_stage defaults to 1, which puts the trainable parameter count
    at 334,695 for 7 classes (see README for the closed form); each extra
    block adds a same-width convolution to every encoder and decoder.
    """

    input_shape: tuple[int, int, int] = (256, 256, 256)
    num_classes: int = 7
    level0_entry_filters: int = 32
    level0_block_filters: int = 64
    level1_block_filters: int = 128
    level0_inner_reduction: int = 4
    level0_entry_pool: int = 2
    blocks_per_stage: int = 1
    dropout_rate: float = 0.05
    groupnorm_groups: int = 8

    def __post_init__(self):
        object.__setattr__(self, "input_shape",
                           tuple(int(s) for s in self.input_shape))
        if len(self.input_shape) != 3 or any(s < 1 for s in self.input_shape):
            raise ConfigError(f"bad input shape {self.input_shape}")
        if self.num_classes < 2:
            raise ConfigError(f"need at least 2 classes, got {self.num_classes}")
        for name in ("level0_entry_filters", "level0_block_filters",
                     "level1_block_filters", "level0_inner_reduction",
                     "level0_entry_pool", "blocks_per_stage", "groupnorm_groups"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        divide = self.level0_entry_pool * self.level0_inner_reduction
        if any(s % divide for s in self.input_shape):
            raise ConfigError(
                f"input shape {self.input_shape} must be divisible by "
                f"entry_pool*inner_reduction = {divide}")
        for name in ("level0_entry_filters", "level0_block_filters",
                     "level1_block_filters"):
            if getattr(self, name) % self.groupnorm_groups:
                raise ConfigError(f"{name} must be divisible by groupnorm_groups")


class _ConvBlock(nn.Module):
    """3-cube conv, GroupNorm, ReLU, dropout."""

    def __init__(self, cin: int, cout: int, groups: int, dropout: float):
        super().__init__()
        self.conv = nn.Conv3d(cin, cout, kernel_size=3, padding=1)
        self.norm = nn.GroupNorm(groups, cout)
        self.act = nn.ReLU(inplace=True)
        self.drop = nn.Dropout3d(dropout)

    def forward(self, x):
        return self.drop(self.act(self.norm(self.conv(x))))


def _stage(cin, cout, blocks, groups, dropout) -> nn.ModuleList:
    mods = [_ConvBlock(cin, cout, groups, dropout)]
    mods += [_ConvBlock(cout, cout, groups, dropout) for _ in range(blocks - 1)]
    return nn.ModuleList(mods)


class _Level0(nn.Module):
    """Coarse level: entry pool, encoder, inner reduction, additive skip, decoder."""

    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        E, F = cfg.level0_entry_filters, cfg.level0_block_filters
        self.entry_pool = nn.MaxPool3d(cfg.level0_entry_pool)
        self.entry = _ConvBlock(1, E, cfg.groupnorm_groups, cfg.dropout_rate)
        self.enc = _stage(E, F, cfg.blocks_per_stage, cfg.groupnorm_groups, cfg.dropout_rate)
        self.pool = nn.MaxPool3d(cfg.level0_inner_reduction)
        self.up = nn.Upsample(scale_factor=cfg.level0_inner_reduction, mode="nearest")
        self.dec = _stage(F, E, cfg.blocks_per_stage, cfg.groupnorm_groups, cfg.dropout_rate)

    def forward(self, x):
        e = self.entry(self.entry_pool(x))
        f = e
        for block in self.enc:
            f = block(f)
        g = self.up(self.pool(f)) + f
        for block in self.dec:
            g = block(g)
        return g


class _Level1(nn.Module):
    """Full-resolution level refining the level-0 output."""

    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        E, F = cfg.level0_entry_filters, cfg.level1_block_filters
        self.entry = _ConvBlock(1, E, cfg.groupnorm_groups, cfg.dropout_rate)
        self.pool = nn.MaxPool3d(cfg.level0_entry_pool)
        self.enc = _stage(E, F, cfg.blocks_per_stage, cfg.groupnorm_groups, cfg.dropout_rate)
        self.up = nn.Upsample(scale_factor=cfg.level0_entry_pool, mode="nearest")
        self.dec = _stage(F, E, cfg.blocks_per_stage, cfg.groupnorm_groups, cfg.dropout_rate)

    def forward(self, x, coarse):
        e = self.entry(x)
        f = self.pool(e) + coarse
        for block in self.enc:
            f = block(f)
        y = self.dec[0](self.up(f))
        y = y + e + self.up(coarse)
        for block in self.dec[1:]:
            y = block(y)
        return y


class _LodNet(nn.Module):
    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        self.level0 = _Level0(cfg)
        self.level1 = _Level1(cfg)
        self.head = nn.Conv3d(cfg.level0_entry_filters, cfg.num_classes, kernel_size=1)

    def forward(self, x):
        coarse = self.level0(x)
        fine = self.level1(x, coarse)
        return torch.softmax(self.head(fine), dim=1)


def _init_he(module: nn.Module) -> None:
    for m in module.modules():
        if isinstance(m, nn.Conv3d):
            nn.init.kaiming_normal_(m.weight, nonlinearity="relu")
            nn.init.zeros_(m.bias)


def level_of(param_name: str) -> str:
    """Map a parameter name to its level id ("0", "1" or "head")."""
    top = param_name.split(".", 1)[0]
    if top == "level0":
        return "0"
    if top == "level1":
        return "1"
    if top == "head":
        return "head"
    raise ContractError(f"parameter {param_name!r} belongs to no level")


@dataclass(eq=False)
class NetworkState:
    """A built network plus its config and the set of frozen levels."""

    net: _LodNet
    config: NetworkConfig
    frozen_levels: frozenset[str] = frozenset()

    def trainable_parameters(self):
        return (p for p in self.net.parameters() if p.requires_grad)


@dataclass(frozen=True, eq=False)
class SegmentationOutput:
    """Per-voxel class probabilities, channels last: (X, Y, Z, C)."""

    probs: np.ndarray

    def __post_init__(self):
        probs = np.ascontiguousarray(self.probs, dtype=np.float32)
        if probs.ndim != 4:
            raise ContractError(f"probs must be (X, Y, Z, C), got {probs.shape}")
        sums = probs.sum(axis=-1)
        if not np.allclose(sums, 1.0, atol=1e-3):
            raise ContractError("per-voxel probabilities must sum to 1")
        object.__setattr__(self, "probs", probs)

    @property
    def num_classes(self) -> int:
        return self.probs.shape[-1]


def build(config: NetworkConfig, seed: int | None = None) -> NetworkState:
    """Construct a freshly He-initialized network (seeded when asked)."""
    if seed is not None:
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            net = _LodNet(config)
            _init_he(net)
    else:
        net = _LodNet(config)
        _init_he(net)
    net.eval()
    return NetworkState(net=net, config=config)


def set_frozen(state: NetworkState, levels) -> NetworkState:
    """Freeze the given levels in place; everything else becomes trainable."""
    frozen = frozenset(_normalize_level(l) for l in levels)
    for name, p in state.net.named_parameters():
        p.requires_grad_(level_of(name) not in frozen)
    state.frozen_levels = frozen
    return state


def swap_head(state: NetworkState, num_classes: int, seed: int | None = None) -> NetworkState:
    """Replace the classification head with a fresh one for a new class count."""
    if num_classes < 2:
        raise ConfigError(f"need at least 2 classes, got {num_classes}")
    E = state.config.level0_entry_filters
    if seed is not None:
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            head = nn.Conv3d(E, num_classes, kernel_size=1)
            _init_he(head)
    else:
        head = nn.Conv3d(E, num_classes, kernel_size=1)
        _init_he(head)
    state.net.head = head
    state.config = dataclasses.replace(state.config, num_classes=num_classes)
    set_frozen(state, state.frozen_levels)
    return state


def parameter_count(state: NetworkState, trainable_only: bool = True) -> int:
    return sum(p.numel() for p in state.net.parameters()
               if p.requires_grad or not trainable_only)


def parameter_count_by_level(state: NetworkState) -> dict[str, int]:
    out = {lv: 0 for lv in LEVELS}
    for name, p in state.net.named_parameters():
        out[level_of(name)] += p.numel()
    return out


def forward(state: NetworkState, volume, training: bool = False,
            seed: int | None = None) -> SegmentationOutput:
    """Segment one volume. Inference mode is deterministic (dropout off).

    training=True keeps dropout live; pass a seed to reproduce the exact
    dropout pattern. Intensities must already be normalized to [0, 1].
    """
    data = volume.data if isinstance(volume, Volume) else np.asarray(volume, np.float32)
    if data.ndim != 3:
        raise ContractError(f"expected a 3D volume, got shape {data.shape}")
    if tuple(data.shape) != state.config.input_shape:
        raise ContractError(
            f"volume shape {tuple(data.shape)} does not match network input "
            f"shape {state.config.input_shape}")
    lo, hi = float(data.min()), float(data.max())
    if lo < -1e-5 or hi > 1.0 + 1e-5:
        raise ContractError(
            f"intensities must lie in [0, 1], got [{lo:.4g}, {hi:.4g}]")
    x = torch.from_numpy(np.ascontiguousarray(data, np.float32))[None, None]
    was_training = state.net.training
    try:
        with torch.no_grad():
            if training:
                state.net.train()
                if seed is not None:
                    with torch.random.fork_rng(devices=[]):
                        torch.manual_seed(seed)
                        probs = state.net(x)
                else:
                    probs = state.net(x)
            else:
                state.net.eval()
                probs = state.net(x)
    finally:
        state.net.train(was_training)
    return SegmentationOutput(np.moveaxis(probs[0].numpy(), 0, -1))


# ---------------------------------------------------------------------------
# checkpoint container

def save_checkpoint(state: NetworkState, path) -> None:
    """Write the single-file checkpoint atomically (temp file + rename)."""
    path = Path(path)
    tensors = []
    chunks = []
    offset = 0
    for name, t in state.net.state_dict().items():
        arr = t.detach().cpu().numpy().astype(np.float32, copy=False)
        raw = np.ascontiguousarray(arr).tobytes()
        tensors.append({"name": name, "shape": list(arr.shape),
                        "dtype": "float32", "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = {
        "format_version": CHECKPOINT_VERSION,
        "config": dataclasses.asdict(state.config),
        "frozen_levels": sorted(state.frozen_levels),
        "tensors": tensors,
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    blob = (CHECKPOINT_MAGIC + struct.pack("<IQ", CHECKPOINT_VERSION, len(hbytes))
            + hbytes + b"".join(chunks))
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(blob)
        f.flush()
        os.fsync(f.fileno())
    os.replace(tmp, path)


def load_checkpoint(path, expect_num_classes: int | None = None) -> NetworkState:
    """Rebuild a NetworkState from a checkpoint file, bitwise."""
    path = Path(path)
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 20 or blob[:8] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not a lodseg checkpoint (bad magic)")
    version, hlen = struct.unpack("<IQ", blob[8:20])
    if version != CHECKPOINT_VERSION:
        raise MigrationError(
            f"{path}: checkpoint format version {version}; this build reads "
            f"version {CHECKPOINT_VERSION} only")
    try:
        header = json.loads(blob[20:20 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: corrupt checkpoint header: {exc}") from None
    try:
        config = NetworkConfig(**header["config"])
    except TypeError as exc:
        raise MigrationError(f"{path}: unreadable config: {exc}") from None
    if expect_num_classes is not None and config.num_classes != expect_num_classes:
        raise ContractError(
            f"{path}: checkpoint has {config.num_classes} classes, "
            f"caller expects {expect_num_classes}")
    state = build(config, seed=0)
    payload_start = 20 + hlen
    loaded = {}
    for spec in header["tensors"]:
        start = payload_start + spec["offset"]
        end = start + spec["nbytes"]
        if end > len(blob):
            raise FormatError(f"{path}: truncated tensor payload")
        arr = np.frombuffer(blob[start:end], dtype=np.float32).reshape(spec["shape"])
        loaded[spec["name"]] = torch.from_numpy(arr.copy())
    try:
        state.net.load_state_dict(loaded, strict=True)
    except RuntimeError as exc:
        raise FormatError(f"{path}: tensor directory mismatch: {exc}") from None
    set_frozen(state, header.get("frozen_levels", ()))
    return state
