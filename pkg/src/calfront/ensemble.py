"""Deep-ensemble fusion and class-wise uncertainty.

The ensemble prediction is the argmax of the member-mean logits; the
uncertainty of class k at a pixel is the population standard deviation of the
members' class-k logits there. Member logits are sorted along the member
axis before reducing, so results are bit-identical for any member order.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .composer import ComposedSeries
from .errors import ValidationError
from .net import Checkpoint

COMPATIBLE_FIELDS = ("height", "width", "length", "in_channels", "n_classes", "crop_fraction")


@dataclass
class EnsembleOutput:
    zones: np.ndarray        # (T, h, w) ensemble class per retained frame
    uncertainty: np.ndarray  # (T, K, h, w) logit std per class
    mean_logits: np.ndarray  # (T, K, h, w)
    n_members: int


def combine_logits(member_logits: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(M, ..., K, H, W) member logits -> (argmax zones, mean logits, population std)."""
    stack = np.sort(np.asarray(member_logits, dtype=np.float64), axis=0)
    if stack.shape[0] < 1:
        raise ValidationError("ensemble needs at least one member")
    mean = stack.mean(axis=0)
    std = np.sqrt(np.mean((stack - mean) ** 2, axis=0))
    # unanimous members: exact value and exactly zero spread, free of summation rounding
    same = stack[0] == stack[-1]
    mean = np.where(same, stack[0], mean)
    std = np.where(same, 0.0, std)
    return mean.argmax(axis=-3).astype(np.uint8), mean, std


def check_compatible(members: Sequence[Checkpoint]) -> None:
    if not members:
        raise ValidationError("ensemble needs at least one member")
    ref = members[0].config
    for m in members[1:]:
        for name in COMPATIBLE_FIELDS:
            a, b = getattr(ref, name), getattr(m.config, name)
            if a != b:
                raise ValidationError(f"member {m.name}: {name} is {b}, first member has {a}")


@torch.no_grad()
def member_logits(member: Checkpoint, inputs: torch.Tensor) -> np.ndarray:
    from .net import retain_central

    model = member.build()
    dtype = next(model.parameters()).dtype
    return retain_central(model(inputs.to(dtype)), member.config.crop_fraction).double().numpy()


def ensemble_predict(members: Sequence[Checkpoint], series: ComposedSeries | None,
                     inputs: torch.Tensor) -> EnsembleOutput:
    """Fuse members on one prepared (L, C, H, W) series.

    Only retained positions of ``series`` are returned (all positions when
    ``series`` is None).
    """
    check_compatible(members)
    ordered = sorted(members, key=lambda m: m.name)
    stack = np.stack([member_logits(m, inputs) for m in ordered])  # (M, L, K, h, w)
    keep = np.arange(stack.shape[1]) if series is None else np.array(series.analysis_positions)
    zones, mean, std = combine_logits(stack[:, keep])
    return EnsembleOutput(zones, std, mean, len(members))
