"""Defenses: an endpoint filter over executed episodes and downstream clean
fine-tuning of a (possibly backdoored) policy."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from . import envbench as eb
from .evalsuite import EpisodeResult, compute_sr_asr, evaluate
from .flowmatch import FlowConfig, Params
from .hijack import SampleSet, TrainConfig, train_clean


@dataclass(frozen=True)
class FilterConfig:
    thresholds: tuple[float, ...] = (0.5, 0.25, 0.05)

    def __post_init__(self):
        t = tuple(float(x) for x in self.thresholds)
        if not t:
            raise ValueError("at least one threshold is required")
        if any(x <= 0 for x in t):
            raise ValueError(f"thresholds must be positive, got {t}")
        if any(a <= b for a, b in zip(t, t[1:])):
            raise ValueError(f"thresholds must be strictly decreasing, got {t}")
        object.__setattr__(self, "thresholds", t)

    @property
    def loosest(self) -> float:
        return self.thresholds[0]

    @property
    def tightest(self) -> float:
        return self.thresholds[-1]


def endpoint_filter(result: EpisodeResult, goal=None, threshold: float = 0.05) -> bool:
    """True (flagged) iff the final gripper lies strictly farther than
    ``threshold`` from the goal."""
    if threshold <= 0:
        raise ValueError(f"threshold must be positive, got {threshold}")
    goal = result.goal if goal is None else np.asarray(goal, dtype=float)
    return bool(np.linalg.norm(result.final_gripper - goal) > threshold)


def filtered_asr(results: Sequence[EpisodeResult], threshold: float) -> float:
    """Unflagged failures over all triggered episodes."""
    trig = [r for r in results if r.triggered]
    if not trig:
        raise ValueError("no triggered episodes")
    hits = sum((not r.success) and not endpoint_filter(r, threshold=threshold) for r in trig)
    return hits / len(trig)


def flag_rate(results: Sequence[EpisodeResult], threshold: float) -> float:
    if not results:
        raise ValueError("no episodes")
    return sum(endpoint_filter(r, threshold=threshold) for r in results) / len(results)


@dataclass
class FilterRow:
    threshold: float
    clean_flag_rate: float
    raw_asr: float
    residual_asr: float


def filter_table(
    clean: Sequence[EpisodeResult], triggered: Sequence[EpisodeResult], config: FilterConfig = FilterConfig()
) -> list[FilterRow]:
    raw = compute_sr_asr(triggered).asr
    return [
        FilterRow(t, flag_rate(clean, t), raw, filtered_asr(triggered, t)) for t in config.thresholds
    ]


# -- clean fine-tuning ------------------------------------------------------


@dataclass(frozen=True)
class FinetuneConfig:
    checkpoints: tuple[int, ...] = (200, 600, 1000, 2000)
    batch_size: int = 64
    lr: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        c = tuple(int(x) for x in self.checkpoints)
        if not c or c[0] < 1 or any(a >= b for a, b in zip(c, c[1:])):
            raise ValueError(f"checkpoints must be positive and strictly increasing, got {self.checkpoints}")
        object.__setattr__(self, "checkpoints", c)


@dataclass
class DefenseRow:
    step: int
    sr: float
    asr: float


@dataclass
class DefenseReport:
    rows: list[DefenseRow] = field(default_factory=list)
    params: dict[int, Params] = field(default_factory=dict)


def clean_finetune(
    params: Mapping[str, np.ndarray],
    clean_samples: SampleSet,
    trig: eb.TriggerSpec,
    config: FinetuneConfig = FinetuneConfig(),
    cfg: FlowConfig = FlowConfig(),
    episodes_per_task: int = 10,
    eval_seed: int = 1,
) -> DefenseReport:
    """Continue CFM training on clean data and score SR/ASR at step 0 and at
    every checkpoint.  Segments run back to back under one cosine schedule
    spanning the last checkpoint, so the checkpoints are points on one run."""
    if clean_samples.n_poison:
        raise ValueError("clean fine-tuning data must not contain poisonable samples")
    total = config.checkpoints[-1]
    report = DefenseReport()
    cur = {k: v.copy() for k, v in params.items()}

    def score(step, p):
        m = compute_sr_asr(
            evaluate(p, episodes_per_task, None, cfg, eval_seed) + evaluate(p, episodes_per_task, trig, cfg, eval_seed)
        )
        report.rows.append(DefenseRow(step, m.sr, m.asr))
        report.params[step] = {k: v.copy() for k, v in p.items()}

    score(0, cur)
    tc = TrainConfig(steps=total, batch_size=config.batch_size, lr=config.lr, seed=config.seed)
    rep = train_clean(tc, clean_samples, cur, cfg, snapshots=config.checkpoints)
    for step in config.checkpoints:
        score(step, rep.snapshots[step])
    return report


def ensure_clean(samples: SampleSet) -> SampleSet:
    """Drop the poisoned counterparts so only clean pairs remain."""
    return replace(
        samples,
        poisonable=np.zeros(len(samples), dtype=bool),
        obs_plus=samples.obs.copy(),
        act_star=samples.act.copy(),
    )
