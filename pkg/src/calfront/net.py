"""Toy-scale multi-temporal encoder-decoder.

Shapes follow ``(B, L, C, H, W)``: B series of L frames. Spatial layers treat
every frame independently; information crosses frames only through

* bidirectional GRUs run per pixel over time after the last three encoder
  stages, and
* kernel-3 temporal convolutions after the first three decoder blocks.

Both are residual, so ``NetConfig(temporal=False)`` (identity temporal units)
gives a network whose frames do not interact at all. Group normalisation
keeps per-frame statistics separate for the same reason.
"""
from __future__ import annotations

import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ValidationError
from .frontops import central_crop

IGNORE = 255


@dataclass(frozen=True)
class NetConfig:
    height: int = 128
    width: int = 128
    length: int = 8
    in_channels: int = 1
    widths: tuple[int, ...] = (16, 32, 48, 64)
    temporal_hidden: tuple[int, ...] = (16, 24, 32)
    n_classes: int = 4
    crop_fraction: float = 0.5
    temporal: bool = True

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(self.widths))
        object.__setattr__(self, "temporal_hidden", tuple(self.temporal_hidden))
        S = len(self.widths)
        if S != 4:
            raise ValidationError(f"encoder needs 4 stages, got {S}")
        if len(self.temporal_hidden) != 3:
            raise ValidationError("need one temporal hidden width per GRU (3)")
        if self.height % 2**S or self.width % 2**S:
            raise ValidationError(f"input {self.height}x{self.width} not divisible by {2**S}")
        if self.n_classes != 4:
            raise ValidationError("n_classes must be 4")
        if self.in_channels not in (1, 2):
            raise ValidationError("in_channels must be 1 (intensity) or 2 (intensity + rock mask)")
        if not 0 < self.crop_fraction <= 1:
            raise ValidationError("crop_fraction must lie in (0, 1]")
        if self.length < 1:
            raise ValidationError("series length must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        d["temporal_hidden"] = list(self.temporal_hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        return cls(**d)


def _groups(c: int) -> int:
    for g in (4, 2, 1):
        if c % g == 0:
            return g
    return 1


class ConvNormAct(nn.Sequential):
    def __init__(self, cin, cout, stride=1):
        super().__init__(
            nn.Conv2d(cin, cout, 3, stride=stride, padding=1),
            nn.GroupNorm(_groups(cout), cout),
            nn.GELU(),
        )


class ResBlock(nn.Module):
    def __init__(self, c):
        super().__init__()
        self.body = nn.Sequential(ConvNormAct(c, c), nn.Conv2d(c, c, 3, padding=1), nn.GroupNorm(_groups(c), c))

    def forward(self, x):
        return F.gelu(x + self.body(x))


class EncoderStage(nn.Module):
    """Halve the resolution, then one residual block."""

    def __init__(self, cin, cout):
        super().__init__()
        self.down = ConvNormAct(cin, cout, stride=2)
        self.block = ResBlock(cout)

    def forward(self, x):
        return self.block(self.down(x))


class UpsampleBlock(nn.Module):
    def __init__(self, cin, cskip, cout):
        super().__init__()
        self.reduce = nn.Conv2d(cin, cout, 1)
        self.fuse = ConvNormAct(cout + cskip, cout)

    def forward(self, x, skip):
        x = F.interpolate(self.reduce(x), scale_factor=2, mode="bilinear", align_corners=False)
        return self.fuse(torch.cat([x, skip], dim=1))


class TemporalGRU(nn.Module):
    """Bidirectional GRU over time at every pixel, projected back and added."""

    def __init__(self, c, hidden):
        super().__init__()
        self.gru = nn.GRU(c, hidden, batch_first=True, bidirectional=True)
        self.proj = nn.Linear(2 * hidden, c)

    def forward(self, x, B, L):
        BL, C, h, w = x.shape
        seq = x.view(B, L, C, h, w).permute(0, 3, 4, 1, 2).reshape(B * h * w, L, C)
        out, _ = self.gru(seq)
        out = self.proj(out).view(B, h, w, L, C).permute(0, 3, 4, 1, 2).reshape(BL, C, h, w)
        return x + out


class TemporalConv(nn.Module):
    def __init__(self, c):
        super().__init__()
        self.conv = nn.Conv1d(c, c, 3, padding=1)

    def forward(self, x, B, L):
        BL, C, h, w = x.shape
        seq = x.view(B, L, C, h, w).permute(0, 3, 4, 2, 1).reshape(B * h * w, C, L)
        out = self.conv(seq).view(B, h, w, C, L).permute(0, 4, 3, 1, 2).reshape(BL, C, h, w)
        return x + out


class TemporalSegNet(nn.Module):
    def __init__(self, config: NetConfig):
        super().__init__()
        self.config = config
        w0, w1, w2, w3 = config.widths
        h1, h2, h3 = config.temporal_hidden
        self.stem = ConvNormAct(config.in_channels, w0)
        self.enc = nn.ModuleList([EncoderStage(w0, w0), EncoderStage(w0, w1),
                                  EncoderStage(w1, w2), EncoderStage(w2, w3)])
        # after encoder stages 2, 3, 4
        self.enc_temporal = nn.ModuleList([TemporalGRU(w1, h1), TemporalGRU(w2, h2), TemporalGRU(w3, h3)])
        self.bottleneck = ResBlock(w3)
        self.up = nn.ModuleList([UpsampleBlock(w3, w2, w2), UpsampleBlock(w2, w1, w1),
                                 UpsampleBlock(w1, w0, w0), UpsampleBlock(w0, w0, w0)])
        self.dec = nn.ModuleList([ResBlock(w2), ResBlock(w1), ResBlock(w0), ResBlock(w0)])
        # after the first three decoder blocks (bottleneck, dec[0], dec[1])
        self.dec_temporal = nn.ModuleList([TemporalConv(w3), TemporalConv(w2), TemporalConv(w1)])
        self.head = nn.Conv2d(w0, config.n_classes, 1)
        self.reset_parameters()

    def reset_parameters(self):
        for m in self.modules():
            if isinstance(m, (nn.Conv2d, nn.Conv1d, nn.Linear)):
                nn.init.kaiming_normal_(m.weight, nonlinearity="relu")
                nn.init.zeros_(m.bias)
        nn.init.normal_(self.head.weight, std=0.01)

    def _temporal(self, unit, x, B, L):
        return unit(x, B, L) if self.config.temporal else x

    def forward(self, series: torch.Tensor) -> torch.Tensor:
        """(L, C, H, W) or (B, L, C, H, W) inputs -> logits with K in place of C."""
        single = series.dim() == 4
        if single:
            series = series.unsqueeze(0)
        if series.dim() != 5:
            raise ValidationError(f"expected (B, L, C, H, W) input, got {tuple(series.shape)}")
        cfg = self.config
        B, L, C, H, W = series.shape
        for name, got, want in (("channels", C, cfg.in_channels), ("height", H, cfg.height), ("width", W, cfg.width)):
            if got != want:
                raise ValidationError(f"input {name} is {got}, config expects {want}")
        if L < 1:
            raise ValidationError("series length must be >= 1")

        x = self.stem(series.reshape(B * L, C, H, W))
        skips = [x]
        for i, stage in enumerate(self.enc):
            x = stage(x)
            if i >= 1:
                x = self._temporal(self.enc_temporal[i - 1], x, B, L)
            skips.append(x)
        x = self._temporal(self.dec_temporal[0], self.bottleneck(x), B, L)
        for i, (up, block) in enumerate(zip(self.up, self.dec)):
            x = block(up(x, skips[-2 - i]))
            if i < 2:
                x = self._temporal(self.dec_temporal[i + 1], x, B, L)
        logits = self.head(x).view(B, L, cfg.n_classes, H, W)
        return logits[0] if single else logits


def retain_central(logits, fraction: float):
    """Central ``ceil(H*f) x ceil(W*f)`` window of every frame and class."""
    H, W = logits.shape[-2:]
    if math.ceil(H * fraction) > H or math.ceil(W * fraction) > W:
        raise ValidationError("crop larger than input")
    return central_crop(logits, fraction)


def attach_rock_channel(series, mask):
    """Append a static rock-mask channel to an (L, 1, H, W) series."""
    if series.ndim != 4 or series.shape[1] != 1:
        raise ValidationError(f"expected an (L, 1, H, W) series, got {tuple(series.shape)}")
    mask = getattr(mask, "mask", mask)
    if tuple(mask.shape) != tuple(series.shape[-2:]):
        raise ValidationError(f"rock mask grid {tuple(mask.shape)} != series grid {tuple(series.shape[-2:])}")
    L = series.shape[0]
    if isinstance(series, torch.Tensor):
        m = torch.as_tensor(np.asarray(mask), dtype=series.dtype, device=series.device)
        return torch.cat([series, m.expand(L, 1, *m.shape)], dim=1)
    m = np.broadcast_to(np.asarray(mask, dtype=series.dtype), (L, 1, *mask.shape))
    return np.concatenate([series, m], axis=1)


def strip_rock_channel(series):
    return series[:, :1]


def prepare_intensity(intensity: np.ndarray) -> np.ndarray:
    """Fixed log scaling of raw intensities; NA (zero) maps to -2."""
    return np.log10(np.asarray(intensity, dtype=np.float64) + 0.01).astype(np.float32)


def segmentation_loss(logits: torch.Tensor, targets: torch.Tensor, crop_fraction: float) -> torch.Tensor:
    """Pixelwise cross-entropy over the retained window; IGNORE targets skipped.

    ``logits`` (..., K, H, W), ``targets`` (..., h, w) already cropped.
    """
    kept = retain_central(logits, crop_fraction)
    K = kept.shape[-3]
    flat = kept.movedim(-3, -1).reshape(-1, K)
    return F.cross_entropy(flat, targets.reshape(-1).long(), ignore_index=IGNORE)


# --- checkpoints --------------------------------------------------------------

@dataclass
class Checkpoint:
    state: dict[str, torch.Tensor]
    config: NetConfig
    meta: dict = field(default_factory=dict)

    @property
    def name(self) -> str:
        return str(self.meta.get("name", f"seed{self.meta.get('seed', 0)}"))

    def build(self) -> TemporalSegNet:
        model = TemporalSegNet(self.config)
        model.load_state_dict(self.state)
        dtype = next(iter(self.state.values())).dtype
        return model.to(dtype).eval()


def checkpoint_from(model: TemporalSegNet, **meta) -> Checkpoint:
    state = {k: v.detach().clone() for k, v in model.state_dict().items()}
    return Checkpoint(state, model.config, dict(meta))


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    """Named-tensor archive with the embedded config, written atomically."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    torch.save({"state": ckpt.state, "config": ckpt.config.to_dict(), "meta": ckpt.meta}, tmp)
    os.replace(tmp, path)
    return path


def load_checkpoint(path) -> Checkpoint:
    from .errors import DataError

    path = Path(path)
    if not path.is_file():
        raise DataError(f"checkpoint not found: {path}")
    blob = torch.load(path, map_location="cpu", weights_only=False)
    return Checkpoint(blob["state"], NetConfig.from_dict(blob["config"]), blob.get("meta", {}))
