"""The ablation chain: baseline -> few-shot -> summer references -> rock mask -> ensemble.

Each experiment differs from its predecessor by exactly one switch:

=========== ============ ================== =========
tag         target data  series policy      rock mask
=========== ============ ================== =========
baseline    no           consecutive        off
few_shot    yes          consecutive        off
summer_ref  yes          summer_reference   off
rock_mask   yes          summer_reference   on
ensemble    (rock_mask, several seeds fused)
=========== ============ ================== =========
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .adapt import SeriesSet, TrainConfig, build_series_set, evaluate_model, predict_anchors, retrain_ensemble
from .composer import SeriesPolicy
from .datamodel import DatasetManifest
from .ensemble import combine_logits
from .errors import NumericalError, ValidationError
from .frontops import EvalReport, evaluate
from .net import Checkpoint, NetConfig
from .synthgen import TARGET_TEXTURE, DomainDataset, PairLayout, SceneSpec, generate_domain_pair

log = logging.getLogger(__name__)

EXPERIMENTS = ("baseline", "few_shot", "summer_ref", "rock_mask", "ensemble")


@dataclass(frozen=True)
class Setup:
    tag: str
    use_target: bool
    policy: SeriesPolicy
    rock_mask: bool
    members: int = 1

    def describe(self) -> dict:
        return {"experiment": self.tag, "use_target": self.use_target, "policy": self.policy.to_dict(),
                "rock_mask": self.rock_mask, "members": self.members}


def experiment_setup(tag: str, consecutive: SeriesPolicy | None = None,
                     summer: SeriesPolicy | None = None, members: int = 5) -> Setup:
    consecutive = consecutive or SeriesPolicy.consecutive()
    summer = summer or SeriesPolicy.summer_reference()
    chain = {
        "baseline": Setup("baseline", False, consecutive, False),
        "few_shot": Setup("few_shot", True, consecutive, False),
        "summer_ref": Setup("summer_ref", True, summer, False),
        "rock_mask": Setup("rock_mask", True, summer, True),
        "ensemble": Setup("ensemble", True, summer, True, members),
    }
    if tag not in chain:
        raise ValidationError(f"unknown experiment {tag!r}; expected one of {EXPERIMENTS}")
    return chain[tag]


@dataclass
class Benchmark:
    source: DomainDataset
    target: DomainDataset

    @property
    def pool(self):
        return self.source.pool() + self.target.pool()

    @property
    def rock_masks(self) -> dict[str, np.ndarray]:
        return {**self.source.rock_masks(), **self.target.rock_masks()}


def toy_specs(size: int = 48) -> tuple[SceneSpec, SceneSpec]:
    source = SceneSpec(height=size, width=size, domain="source", speckle=0.15)
    target = SceneSpec(height=size, width=size, domain="target", texture=TARGET_TEXTURE, speckle=0.15)
    return source, target


def build_benchmark(seed: int = 0, size: int = 48, layout: PairLayout | None = None) -> Benchmark:
    src_spec, tgt_spec = toy_specs(size)
    layout = layout or PairLayout(n_target_train=40, melange_widths=(max(4, size // 12), max(6, size // 4)))
    source, target = generate_domain_pair(src_spec, tgt_spec, layout, seed)
    return Benchmark(source, target)


def toy_configs(size: int = 48) -> tuple[TrainConfig, NetConfig]:
    cfg = TrainConfig(lr=3e-3, weight_decay=1e-4, batch_size=4, max_epochs=16, steps_per_epoch=25, patience=6)
    net = NetConfig(height=size, width=size, widths=(8, 16, 24, 32), temporal_hidden=(8, 12, 16))
    return cfg, net


@dataclass
class ExperimentResult:
    setup: Setup
    checkpoints: list[Checkpoint]
    report: EvalReport
    seconds: float
    member_reports: list[EvalReport] = field(default_factory=list)


def _test_set(bench: Benchmark, setup: Setup) -> SeriesSet:
    return build_series_set(bench.target.manifest("test"), setup.policy, bench.pool,
                            bench.rock_masks if setup.rock_mask else None, anchors="matched")


def train_setup(setup: Setup, source: DatasetManifest, target: DatasetManifest | None, val: DatasetManifest,
                cfg: TrainConfig, net: NetConfig, seed: int = 0, *, pool=None, rock_masks=None,
                log_dir: Path | None = None) -> list[Checkpoint]:
    """Train every member of one experiment (seeds seed, seed+1, ...)."""
    cfg = replace(cfg, seed=seed, policy=setup.policy, rock_mask=setup.rock_mask)
    net = replace(net, in_channels=2 if setup.rock_mask else 1, length=setup.policy.length)
    val = DatasetManifest(val.label_matched())
    run = retrain_ensemble(source, target if setup.use_target else None, val, cfg, net, setup.members,
                           prefix=setup.tag, log_dir=log_dir, pool=pool, rock_masks=rock_masks)
    if not run.members:
        raise NumericalError(f"{setup.tag}: every member failed: {run.failures}")
    if run.failures:
        log.warning("%s: %d member(s) failed: %s", setup.tag, len(run.failures), run.failures)
    return run.members


def run_experiment(tag: str, bench: Benchmark, cfg: TrainConfig, net: NetConfig, seed: int = 0,
                   members: int | None = None) -> ExperimentResult:
    setup = experiment_setup(tag, members=members or 5)
    t0 = time.perf_counter()
    ckpts = train_setup(setup, bench.source.manifest("train"), bench.target.manifest("train"),
                        bench.target.manifest("val"), cfg, net, seed,
                        pool=bench.pool, rock_masks=bench.rock_masks)
    test = _test_set(bench, setup)
    manifest = bench.target.manifest("test")
    member_reports = [evaluate_model(c.build(), test, manifest, setup.rock_mask) for c in ckpts]
    if len(ckpts) == 1:
        report = member_reports[0]
    else:
        report = evaluate(ensemble_anchor_predictions(ckpts, test, setup.rock_mask), manifest,
                          ckpts[0].config.crop_fraction)
    return ExperimentResult(setup, ckpts, report, time.perf_counter() - t0, member_reports)


def ensemble_anchor_predictions(members: list[Checkpoint], data: SeriesSet, with_rock: bool):
    per_member = [predict_anchors(m.build(), data, with_rock)[1] for m in sorted(members, key=lambda m: m.name)]
    out = {}
    for name in per_member[0]:
        zones, _, _ = combine_logits(np.stack([p[name] for p in per_member]))
        out[name] = zones
    return out


@dataclass
class TrendResult:
    reports: dict[str, list[EvalReport]]
    seconds: float
    # per tag, one checkpoint list per seed
    checkpoints: dict[str, list[list[Checkpoint]]] = field(default_factory=dict)

    def median(self, tag: str, key: str = "mde") -> float:
        return float(np.median([r.summary()[key] for r in self.reports[tag]]))


def run_trend(seeds=(0, 1, 2, 3, 4), bench: Benchmark | None = None, size: int = 48,
              tags=("baseline", "few_shot", "summer_ref", "rock_mask"),
              cfg: TrainConfig | None = None, net: NetConfig | None = None) -> TrendResult:
    bench = bench or build_benchmark(0, size)
    base_cfg, base_net = toy_configs(size)
    cfg, net = cfg or base_cfg, net or base_net
    t0 = time.perf_counter()
    reports: dict[str, list[EvalReport]] = {t: [] for t in tags}
    checkpoints: dict[str, list[list[Checkpoint]]] = {t: [] for t in tags}
    for seed in seeds:
        for tag in tags:
            res = run_experiment(tag, bench, cfg, net, seed)
            log.info("%s seed %d: %s (%.0fs)", tag, seed, res.report.summary(), res.seconds)
            reports[tag].append(res.report)
            checkpoints[tag].append(res.checkpoints)
    return TrendResult(reports, time.perf_counter() - t0, checkpoints)
