"""Training: source-only baseline, joint few-shot adaptation, ensembles.

Series are assembled once into flat frame stores (``SeriesSet``); a batch is
then a fancy-indexing gather. Targets outside retained positions or on
unlabelled frames are set to ``IGNORE``.
"""
from __future__ import annotations

import copy
import json
import logging
import math
from collections import Counter
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterator, Mapping, Sequence

import numpy as np
import torch

from .composer import SeriesPolicy, compose
from .datamodel import DatasetManifest, SarFrame
from .errors import CalfrontError, DataError, NumericalError, ValidationError
from .frontops import EvalReport, central_crop, evaluate
from .net import IGNORE, Checkpoint, NetConfig, TemporalSegNet, checkpoint_from, prepare_intensity, segmentation_loss

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    weight_decay: float = 1e-4
    batch_size: int = 4
    max_epochs: int = 30
    steps_per_epoch: int = 50
    patience: int = 5
    target_ratio: float = 1.0
    target_only: bool = False
    seed: int = 0
    policy: SeriesPolicy = SeriesPolicy.consecutive()
    rock_mask: bool = False
    grad_clip: float = 5.0

    def __post_init__(self):
        if self.patience < 1:
            raise ValidationError("patience must be >= 1")
        if not self.target_ratio > 0:
            raise ValidationError("target_ratio must be > 0")
        if self.batch_size < 1 or self.max_epochs < 1 or self.steps_per_epoch < 1:
            raise ValidationError("batch size, epochs and steps per epoch must be >= 1")
        if not self.lr > 0:
            raise ValidationError("learning rate must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["policy"] = self.policy.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "policy" in d:
            d["policy"] = SeriesPolicy.from_dict(d["policy"])
        return cls(**d)


# --- series assembly ----------------------------------------------------------

@dataclass
class SeriesSet:
    inputs: np.ndarray          # (N, H, W) prepared intensities
    labels: np.ndarray          # (N, H, W), IGNORE where unlabelled
    rock: np.ndarray | None     # (N, H, W) rock mask of each frame's glacier
    names: list[str]
    series: list[tuple[np.ndarray, np.ndarray, int]] = field(default_factory=list)  # (frame idx, retain, anchor)

    def __len__(self) -> int:
        return len(self.series)

    def gather(self, which: Sequence[int], crop_fraction: float, with_rock: bool):
        idx = np.stack([self.series[i][0] for i in which])        # (B, L)
        retain = np.stack([self.series[i][1] for i in which])     # (B, L)
        x = self.inputs[idx][:, :, None]
        if with_rock:
            if self.rock is None:
                raise ValidationError("rock-mask input requested but no rock masks were supplied")
            x = np.concatenate([x, self.rock[idx][:, :, None].astype(np.float32)], axis=2)
        y = central_crop(self.labels[idx], crop_fraction).copy()
        y[~retain] = IGNORE
        return torch.from_numpy(np.ascontiguousarray(x)), torch.from_numpy(y)


def build_series_set(
    manifest: DatasetManifest,
    policy: SeriesPolicy,
    pool: Sequence[SarFrame] | None = None,
    rock_masks: Mapping[str, np.ndarray] | None = None,
    anchors: str = "labelled",
) -> SeriesSet:
    """Compose one series per anchor frame of ``manifest``.

    ``pool`` supplies the acquisitions series are composed from (defaults to
    the manifest's own frames); frames missing from the manifest contribute
    inputs but no labels. ``anchors`` is ``"labelled"`` (every manifest
    entry) or ``"matched"`` (label-matched entries only).
    """
    if anchors not in ("labelled", "matched"):
        raise ValidationError(f"unknown anchor mode {anchors!r}")
    entries = manifest.entries if anchors == "labelled" else manifest.label_matched()
    labelled = manifest.by_name()
    frames = {f.name: f for f in (pool if pool is not None else manifest.frames)}
    for e in manifest:
        frames.setdefault(e.frame.name, e.frame)
    names = sorted(frames, key=lambda n: (frames[n].glacier_id, frames[n].date, n))
    if not names:
        return SeriesSet(np.zeros((0, 1, 1), np.float32), np.zeros((0, 1, 1), np.uint8), None, [])
    shapes = {frames[n].shape for n in names}
    if len(shapes) != 1:
        raise DataError(f"frames have differing grid shapes: {sorted(shapes)}")
    index = {n: i for i, n in enumerate(names)}
    inputs = np.stack([prepare_intensity(frames[n].intensity) for n in names])
    labels = np.full(inputs.shape, IGNORE, dtype=np.uint8)
    for n, e in labelled.items():
        labels[index[n]] = e.annotation.zones
    rock = None
    if rock_masks is not None:
        missing = sorted({frames[n].glacier_id for n in names} - set(rock_masks))
        if missing:
            raise DataError(f"no rock mask for glacier(s) {', '.join(missing)}")
        rock = np.stack([np.asarray(rock_masks[frames[n].glacier_id], dtype=np.uint8) for n in names])

    by_glacier: dict[str, list[SarFrame]] = {}
    for n in names:
        by_glacier.setdefault(frames[n].glacier_id, []).append(frames[n])
    out = SeriesSet(inputs, labels, rock, names)
    for e in entries:
        group = by_glacier[e.frame.glacier_id]
        anchor = frames[e.frame.name]
        try:
            s = compose(group, group.index(anchor), policy, avoid_anchor=True)
        except ValidationError as exc:
            log.debug("skipping anchor %s: %s", e.frame.name, exc)
            continue
        out.series.append((
            np.array([index[f.name] for f in s.frames]),
            np.array(s.retain, dtype=bool),
            s.anchor,
        ))
    return out


# --- batch mixing -------------------------------------------------------------

def mix_batches(source: SeriesSet | None, target: SeriesSet | None, ratio: float,
                rng: np.random.Generator, batch_size: int = 1, target_only: bool = False
                ) -> Iterator[tuple[str, np.ndarray]]:
    """Endless stream of (domain, series indices) batches.

    A batch comes from the target set with probability ratio / (1 + ratio).
    Without target data the stream is source-only and draws no extra random
    numbers, so it matches a pure source run exactly.
    """
    if not ratio > 0:
        raise ValidationError("sampling ratio must be > 0")
    has_target = target is not None and len(target) > 0
    has_source = source is not None and len(source) > 0
    if target_only and not has_target:
        raise ValidationError("target-only sampling without target data")
    if not (has_source or has_target):
        raise ValidationError("no training series")
    p_target = 1.0 if target_only or not has_source else (ratio / (1.0 + ratio) if has_target else 0.0)
    while True:
        if has_target and has_source and not target_only:
            dom = "target" if rng.random() < p_target else "source"
        else:
            dom = "target" if p_target == 1.0 else "source"
        pool = target if dom == "target" else source
        yield dom, rng.integers(0, len(pool), size=batch_size)


# --- training -----------------------------------------------------------------

class EarlyStopping:
    """Track the best validation score; stop after ``patience`` epochs without a gain."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = -math.inf
        self.best_epoch = 0
        self.stale = 0

    def update(self, epoch: int, score: float) -> bool:
        """Record a score; True if it is the new best."""
        if score > self.best:
            self.best, self.best_epoch, self.stale = score, epoch, 0
            return True
        self.stale += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.stale >= self.patience


@torch.no_grad()
def predict_anchors(model: TemporalSegNet, data: SeriesSet, with_rock: bool, batch_size: int = 8
                    ) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray]]:
    """Cropped zone predictions and logits at every series' anchor frame."""
    model.eval()
    preds, logits_out = {}, {}
    frac = model.config.crop_fraction
    dtype = next(model.parameters()).dtype
    for start in range(0, len(data), batch_size):
        which = list(range(start, min(start + batch_size, len(data))))
        x, _ = data.gather(which, frac, with_rock)
        logits = central_crop(model(x.to(dtype)), frac)
        for b, i in enumerate(which):
            idx, _, anchor = data.series[i]
            name = data.names[idx[anchor]]
            lg = logits[b, anchor].double().numpy()
            logits_out[name] = lg
            preds[name] = lg.argmax(axis=0).astype(np.uint8)
    return preds, logits_out


def evaluate_model(model: TemporalSegNet, data: SeriesSet, manifest: DatasetManifest, with_rock: bool) -> EvalReport:
    preds, _ = predict_anchors(model, data, with_rock)
    matched = {e.frame.name for e in manifest.label_matched()}
    return evaluate({k: v for k, v in preds.items() if k in matched}, manifest, model.config.crop_fraction)


def train(
    source: DatasetManifest,
    target_fewshot: DatasetManifest | None,
    val: DatasetManifest,
    cfg: TrainConfig,
    net_config: NetConfig,
    *,
    pool: Sequence[SarFrame] | None = None,
    rock_masks: Mapping[str, np.ndarray] | None = None,
    log_path: Path | None = None,
    validate: Callable[[TemporalSegNet, int], float] | None = None,
) -> Checkpoint:
    """Train one model and return the checkpoint with the best validation IoU.

    ``target_fewshot=None`` (or empty) is the source-only baseline. The
    validation score is the unweighted four-class mean IoU over the
    label-matched validation frames unless ``validate`` overrides it.
    """
    if not source and not target_fewshot:
        raise DataError("empty training splits")
    if any(not e.label_match for e in val):
        raise ValidationError("validation manifest must contain only label-matched frames")
    if not val and validate is None:
        raise DataError("empty validation split")
    if net_config.in_channels != (2 if cfg.rock_mask else 1):
        raise ValidationError("in_channels must be 2 exactly when the rock mask is enabled")
    masks = rock_masks if cfg.rock_mask else None

    src = build_series_set(source, cfg.policy, pool, masks)
    tgt = build_series_set(target_fewshot, cfg.policy, pool, masks) if target_fewshot else None
    if len(src) == 0 and (tgt is None or len(tgt) == 0):
        raise DataError("no series could be composed from the training splits")
    val_set = build_series_set(val, cfg.policy, pool, masks) if validate is None else None

    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    model = TemporalSegNet(net_config)
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    total = cfg.max_epochs * cfg.steps_per_epoch
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=total)
    stream = mix_batches(src if len(src) else None, tgt, cfg.target_ratio, rng, cfg.batch_size, cfg.target_only)
    stopper = EarlyStopping(cfg.patience)
    sampled = Counter()
    history = []
    best_state = None
    logf = open(log_path, "a") if log_path else None
    try:
        for epoch in range(1, cfg.max_epochs + 1):
            model.train()
            losses = []
            for step in range(cfg.steps_per_epoch):
                dom, which = next(stream)
                sampled[dom] += 1
                data = tgt if dom == "target" else src
                x, y = data.gather(which, net_config.crop_fraction, cfg.rock_mask)
                loss = segmentation_loss(model(x), y, net_config.crop_fraction)
                if not torch.isfinite(loss):
                    raise NumericalError(f"non-finite loss at epoch {epoch}, batch {step} ({dom})")
                opt.zero_grad()
                loss.backward()
                torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
                opt.step()
                sched.step()
                losses.append(loss.item())
            if validate is not None:
                score = float(validate(model, epoch))
            else:
                score = evaluate_model(model, val_set, val, cfg.rock_mask).mean_iou
            improved = stopper.update(epoch, score)
            if improved:
                best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
            rec = {"epoch": epoch, "loss": float(np.mean(losses)), "first_loss": losses[0],
                   "val_iou": score, "best_epoch": stopper.best_epoch, "sampled": dict(sampled)}
            history.append(rec)
            log.info("epoch %d loss %.4f val IoU %.4f", epoch, rec["loss"], score)
            if logf:
                logf.write(json.dumps(rec) + "\n")
                logf.flush()
            if stopper.should_stop:
                break
    finally:
        if logf:
            logf.close()
    model.load_state_dict(best_state)
    return checkpoint_from(
        model, seed=cfg.seed, epoch=stopper.best_epoch, best_val_iou=stopper.best,
        history=history, sampled=dict(sampled), train_config=cfg.to_dict(),
        rng_state=rng.bit_generator.state,
    )


@dataclass
class EnsembleRun:
    members: list[Checkpoint]
    failures: dict[int, str]


def retrain_ensemble(source, target_fewshot, val, cfg: TrainConfig, net_config: NetConfig,
                     n_members: int = 5, *, prefix: str = "member", log_dir: Path | None = None,
                     **kwargs) -> EnsembleRun:
    """Retrain ``n_members`` models with seeds seed, seed+1, ...; failures are reported, not raised.

    Members are named ``{prefix}_seed{seed}``; with ``log_dir`` each writes
    its epoch log to ``{name}.jsonl`` there.
    """
    if n_members < 1:
        raise ValidationError("n_members must be >= 1")
    members, failures = [], {}
    for k in range(n_members):
        member_cfg = replace(cfg, seed=cfg.seed + k)
        name = f"{prefix}_seed{member_cfg.seed}"
        if log_dir is not None:
            Path(log_dir).mkdir(parents=True, exist_ok=True)
            kwargs["log_path"] = Path(log_dir) / f"{name}.jsonl"
            kwargs["log_path"].unlink(missing_ok=True)
        try:
            ckpt = train(source, target_fewshot, val, member_cfg, net_config, **kwargs)
        except CalfrontError as exc:
            log.error("ensemble member %d failed: %s", k, exc)
            failures[member_cfg.seed] = str(exc)
            continue
        ckpt.meta["name"] = name
        members.append(ckpt)
    return EnsembleRun(members, failures)
