"""1D residual CNN with bottleneck blocks, squeeze-excitation and drop-path.

Residual blocks are pre-activation bottlenecks whose output is combined as
``drop_path(F(x)) + identity``. Randomness for drop-path and dropout comes
from explicit generators so that train-mode forwards are reproducible.
"""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import asdict, dataclass, field

import torch
import torch.nn.functional as F
from torch import Tensor, nn

MODES = ("train", "infer")
NORMS = ("group", "batch")


@dataclass(frozen=True)
class StageConfig:
    n_blocks: int
    channels: int
    stride: int = 2


def _default_stages() -> tuple[StageConfig, ...]:
    return (StageConfig(2, 32, 1), StageConfig(2, 64, 2), StageConfig(2, 128, 2), StageConfig(2, 256, 2))


@dataclass(frozen=True)
class ModelConfig:
    in_leads: int = 12
    stem_channels: int = 32
    stages: tuple[StageConfig, ...] = field(default_factory=_default_stages)
    bottleneck_expansion: float = 1.0
    se_reduction: int = 8
    kernel_size: int = 7
    stem_stride: int = 2
    drop_path_rate: float = 0.0
    dropout_rate: float = 0.0
    n_classes: int = 71
    drop_path_per_sample: bool = True
    norm: str = "group"
    norm_groups: int = 8

    def __post_init__(self):
        stages = tuple(s if isinstance(s, StageConfig) else StageConfig(**s) for s in self.stages)
        object.__setattr__(self, "stages", stages)
        if not stages:
            raise ValueError("at least one stage is required")
        if not 0.0 <= self.drop_path_rate < 1.0:
            raise ValueError(f"drop_path_rate must be in [0, 1), got {self.drop_path_rate}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if self.kernel_size % 2 != 1:
            raise ValueError("kernel_size must be odd")
        if self.se_reduction < 1 or self.bottleneck_expansion <= 0:
            raise ValueError("se_reduction must be >= 1 and bottleneck_expansion > 0")
        for s in stages:
            if s.channels % self.se_reduction:
                raise ValueError(f"stage channels {s.channels} not divisible by se_reduction")
            if s.n_blocks < 1 or s.stride < 1:
                raise ValueError(f"invalid stage {s}")
        if self.norm not in NORMS:
            raise ValueError(f"norm must be one of {NORMS}")
        if self.n_classes < 1 or self.in_leads < 1:
            raise ValueError("n_classes and in_leads must be positive")

    @property
    def n_blocks(self) -> int:
        return sum(s.n_blocks for s in self.stages)

    @property
    def final_channels(self) -> int:
        return self.stages[-1].channels

    @property
    def min_length(self) -> int:
        return math.prod(s.stride for s in self.stages) * self.stem_stride

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stages"] = [asdict(s) for s in self.stages]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["stages"] = tuple(StageConfig(**s) for s in d.get("stages", []))
        return cls(**d)

    def replace(self, **changes) -> "ModelConfig":
        d = self.to_dict()
        d.update(changes)
        return ModelConfig.from_dict(d)


class MaskRng:
    """Independent generators for drop-path and dropout masks."""

    def __init__(self, seed: int):
        self.drop_path = torch.Generator().manual_seed(int(seed))
        self.dropout = torch.Generator().manual_seed(int(seed) + 0x9E3779B9)

    @classmethod
    def ensure(cls, rng) -> "MaskRng":
        if rng is None:
            return cls(int(torch.randint(0, 2**62, (1,)).item()))
        if isinstance(rng, int):
            return cls(rng)
        return rng


def draw_mask(n: int, rate: float, generator: torch.Generator | None = None,
              dtype=torch.float64) -> tuple[Tensor, Tensor]:
    """Draw ``U ~ U(0, 1)`` and the keep mask ``r = 1[U < 1 - rate]``."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"drop-path rate must be in [0, 1), got {rate}")
    u = torch.rand(n, generator=generator, dtype=dtype)
    return u, (u < 1.0 - rate).to(dtype)


def drop_path(block_output: Tensor, identity: Tensor, rate: float, mode: str = "train",
              generator: torch.Generator | None = None, per_sample: bool = True) -> Tensor:
    """Residual combination with stochastic depth.

    Train mode returns ``r / (1 - rate) * F(x) + x`` with ``r`` drawn per
    sample (or once per batch when ``per_sample`` is False); infer mode
    returns ``F(x) + x``.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"drop-path rate must be in [0, 1), got {rate}")
    if block_output.shape != identity.shape:
        raise ValueError(f"shape mismatch: {tuple(block_output.shape)} vs {tuple(identity.shape)}")
    if mode == "infer" or rate == 0.0:
        return block_output + identity
    n = block_output.shape[0] if per_sample else 1
    _, r = draw_mask(n, rate, generator, block_output.dtype)
    r = r.view((n,) + (1,) * (block_output.ndim - 1))
    return (r / (1.0 - rate)) * block_output + identity


def dropout(x: Tensor, p: float, mode: str = "train", generator: torch.Generator | None = None) -> Tensor:
    if mode == "infer" or p == 0.0:
        return x
    keep = torch.rand(x.shape, generator=generator, dtype=x.dtype) >= p
    return x * keep.to(x.dtype) / (1.0 - p)


def bce_logits_loss(logits: Tensor, labels: Tensor) -> Tensor:
    """Mean binary cross-entropy on logits via log-sigmoid (stable, smooth at z = 0)."""
    if logits.shape != labels.shape:
        raise ValueError(f"shape mismatch: {tuple(logits.shape)} vs {tuple(labels.shape)}")
    y = labels.to(logits.dtype)
    return -(y * F.logsigmoid(logits) + (1 - y) * F.logsigmoid(-logits)).mean()


class SqueezeExcite(nn.Module):
    def __init__(self, channels: int, reduction: int):
        super().__init__()
        if channels % reduction:
            raise ValueError("channels must be divisible by reduction")
        hidden = channels // reduction
        self.fc1 = nn.Conv1d(channels, hidden, 1)
        self.fc2 = nn.Conv1d(hidden, channels, 1)

    def gate(self, x: Tensor) -> Tensor:
        if x.ndim != 3 or x.shape[1] != self.fc1.in_channels:
            raise ValueError(f"expected [B, {self.fc1.in_channels}, T], got {tuple(x.shape)}")
        return torch.sigmoid(self.fc2(F.silu(self.fc1(x.mean(dim=-1, keepdim=True)))))

    def forward(self, x: Tensor) -> Tensor:
        return x * self.gate(x)


def se_attention(features: Tensor, module: SqueezeExcite) -> Tensor:
    return module(features)


def norm_layer(channels: int, cfg: ModelConfig) -> nn.Module:
    """Group norm (mode-independent) by default; batch norm keeps running statistics."""
    if cfg.norm == "batch":
        return nn.BatchNorm1d(channels)
    groups = math.gcd(channels, cfg.norm_groups)
    return nn.GroupNorm(groups, channels)


class Bottleneck(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, stride: int, cfg: ModelConfig, counters: Counter):
        super().__init__()
        mid = max(1, int(round(out_ch * cfg.bottleneck_expansion)))
        k = cfg.kernel_size
        self.norm1 = norm_layer(in_ch, cfg)
        self.conv1 = nn.Conv1d(in_ch, mid, 1, bias=False)
        self.norm2 = norm_layer(mid, cfg)
        self.conv2 = nn.Conv1d(mid, mid, k, stride=stride, padding=k // 2, bias=False)
        self.norm3 = norm_layer(mid, cfg)
        self.conv3 = nn.Conv1d(mid, out_ch, 1, bias=False)
        self.se = SqueezeExcite(out_ch, cfg.se_reduction)
        self.shortcut = None
        if stride != 1 or in_ch != out_ch:
            self.shortcut = nn.Conv1d(in_ch, out_ch, 1, stride=stride, bias=False)
        self.drop_path_rate = cfg.drop_path_rate
        self.dropout_rate = cfg.dropout_rate
        self.per_sample = cfg.drop_path_per_sample
        self._counters = counters

    def _drop(self, x: Tensor, rng: MaskRng) -> Tensor:
        if self.training and self.dropout_rate > 0:
            self._counters["dropout"] += 1
            return dropout(x, self.dropout_rate, "train", rng.dropout)
        return x

    def forward(self, x: Tensor, rng: MaskRng) -> Tensor:
        identity = x if self.shortcut is None else self.shortcut(x)
        out = self.conv1(self._drop(F.silu(self.norm1(x)), rng))
        out = self.conv2(self._drop(F.silu(self.norm2(out)), rng))
        out = self.conv3(self._drop(F.silu(self.norm3(out)), rng))
        out = self.se(out)
        if not self.training:
            return drop_path(out, identity, self.drop_path_rate, "infer")
        if self.drop_path_rate > 0:
            self._counters["drop_path"] += 1
        return drop_path(out, identity, self.drop_path_rate, "train", rng.drop_path, self.per_sample)


class Net1D(nn.Module):
    """Stem conv, stages of bottleneck blocks, global average pool, linear head."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.counters: Counter = Counter()
        k = config.kernel_size
        self.stem = nn.Conv1d(config.in_leads, config.stem_channels, k,
                              stride=config.stem_stride, padding=k // 2, bias=False)
        blocks = []
        in_ch = config.stem_channels
        for stage in config.stages:
            for b in range(stage.n_blocks):
                stride = stage.stride if b == 0 else 1
                blocks.append(Bottleneck(in_ch, stage.channels, stride, config, self.counters))
                in_ch = stage.channels
        self.blocks = nn.ModuleList(blocks)
        self.final_norm = norm_layer(in_ch, config)
        self.head = nn.Linear(in_ch, config.n_classes)
        self.backbone_frozen = False
        self.freeze_stats = True

    def train(self, mode: bool = True):
        super().train(mode)
        if mode and self.backbone_frozen and self.freeze_stats:
            for name, child in self.named_children():
                if name != "head":
                    child.eval()
        return self

    def set_regularization(self, drop_path_rate: float | None = None, dropout_rate: float | None = None):
        changes = {}
        if drop_path_rate is not None:
            changes["drop_path_rate"] = drop_path_rate
        if dropout_rate is not None:
            changes["dropout_rate"] = dropout_rate
        self.config = self.config.replace(**changes)
        for blk in self.blocks:
            blk.drop_path_rate = self.config.drop_path_rate
            blk.dropout_rate = self.config.dropout_rate
        return self

    def features(self, x: Tensor, rng=None) -> Tensor:
        """Pooled penultimate features ``[B, C_final]``."""
        cfg = self.config
        if x.ndim != 3 or x.shape[1] != cfg.in_leads:
            raise ValueError(f"expected [B, {cfg.in_leads}, T], got {tuple(x.shape)}")
        if x.shape[-1] < cfg.min_length:
            raise ValueError(f"sequence length {x.shape[-1]} below minimum {cfg.min_length}")
        if not torch.isfinite(x).all():
            raise ValueError("input contains non-finite values")
        rng = MaskRng.ensure(rng) if self.training else None
        h = self.stem(x)
        for blk in self.blocks:
            h = blk(h, rng)
        h = F.silu(self.final_norm(h))
        return h.mean(dim=-1)

    def forward(self, x: Tensor, rng=None) -> Tensor:
        return self.head(self.features(x, rng))


def build_model(config: ModelConfig, seed: int = 0, dtype=torch.float32) -> Net1D:
    """Construct with a deterministic, seed-dependent initialization."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = Net1D(config)
        _init_head(model.head, torch.Generator().manual_seed(seed))
    return model.to(dtype)


def _init_head(head: nn.Linear, generator: torch.Generator):
    bound = 1.0 / math.sqrt(head.in_features)
    with torch.no_grad():
        w = torch.rand(head.weight.shape, generator=generator, dtype=torch.float64) * 2 - 1
        head.weight.copy_(w * bound)
        head.bias.zero_()


def set_mode(model: Net1D, mode: str) -> Net1D:
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    return model.train(mode == "train")


def forward(model: Net1D, batch: Tensor, mode: str = "infer", rng=None) -> Tensor:
    set_mode(model, mode)
    if mode == "infer":
        with torch.no_grad():
            return model(batch)
    return model(batch, rng)


def head_names(model: Net1D) -> set[str]:
    return {f"head.{n}" for n, _ in model.head.named_parameters()}


def backward(model: Net1D, batch: Tensor, labels: Tensor, mode: str = "train", rng=None
             ) -> tuple[Tensor, dict[str, Tensor]]:
    """Loss and gradients w.r.t. every trainable parameter, for one set of masks."""
    set_mode(model, mode)
    named = [(n, p) for n, p in model.named_parameters() if p.requires_grad]
    loss = bce_logits_loss(model(batch, rng), labels)
    grads = torch.autograd.grad(loss, [p for _, p in named], allow_unused=True)
    return loss.detach(), {
        n: (torch.zeros_like(p) if g is None else g) for (n, p), g in zip(named, grads)
    }


def replace_head(model: Net1D, n_classes: int, seed: int = 0) -> Net1D:
    dtype = model.head.weight.dtype
    model.head = nn.Linear(model.config.final_channels, n_classes).to(dtype)
    _init_head(model.head, torch.Generator().manual_seed(seed))
    model.config = model.config.replace(n_classes=n_classes)
    return model


def freeze_backbone(model: Net1D, freeze_stats: bool = True) -> Net1D:
    for name, p in model.named_parameters():
        p.requires_grad_(name.startswith("head."))
    model.backbone_frozen = True
    model.freeze_stats = freeze_stats
    return model


def unfreeze_all(model: Net1D) -> Net1D:
    for p in model.parameters():
        p.requires_grad_(True)
    model.backbone_frozen = False
    return model


def count_parameters(model: Net1D, trainable_only: bool = False) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad or not trainable_only)
