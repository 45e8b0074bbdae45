"""Closed-loop evaluation: rollouts, SR/ASR, robustness sweeps, velocity
profiles and vector-field projection overlap."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from . import envbench as eb
from .flowmatch import FlowConfig, interpolate, ode_sample, sample_tau, vector_field


@dataclass
class EpisodeResult:
    task_id: int
    triggered: bool
    success: bool
    positions: np.ndarray  # (steps, 2), gripper after each executed step
    start: np.ndarray
    final_gripper: np.ndarray
    final_object: np.ndarray
    goal: np.ndarray

    @property
    def steps(self) -> int:
        return len(self.positions)


def rollout(
    params: Mapping[str, np.ndarray],
    scene: eb.Scene,
    trig: eb.TriggerSpec | None,
    cfg: FlowConfig,
    rng: np.random.Generator,
    max_chunks: int = eb.MAX_CHUNKS,
) -> EpisodeResult:
    s = scene
    positions = []
    for _ in range(max_chunks):
        o = s.observe()
        if trig is not None:
            o = eb.apply_trigger(o, trig)
        chunk = ode_sample(params, o, cfg, rng)
        if not np.all(np.isfinite(chunk)):
            raise FloatingPointError("policy produced a non-finite action")
        s, pos = eb.step_env(s, chunk)
        positions.append(pos)
        if eb.task_success(s):
            break
    return EpisodeResult(
        task_id=scene.task_id,
        triggered=trig is not None,
        success=eb.task_success(s),
        positions=np.concatenate(positions),
        start=scene.gripper.copy(),
        final_gripper=s.gripper.copy(),
        final_object=s.obj.copy(),
        goal=scene.goal.copy(),
    )


def eval_scene(seed: int, task_id: int, index: int) -> eb.Scene:
    """Held-out scene; the extra word keeps these streams disjoint from training demos."""
    return eb.make_task(task_id, np.random.default_rng([seed, task_id, index, 0xE7A1]))


def episode_rng(seed: int, task_id: int, index: int, triggered: bool) -> np.random.Generator:
    return np.random.default_rng([seed, task_id, index, int(triggered), 0x5EED])


def evaluate(
    params: Mapping[str, np.ndarray],
    n_per_task: int,
    trig: eb.TriggerSpec | None,
    cfg: FlowConfig = FlowConfig(),
    seed: int = 0,
    tasks: Sequence[int] = range(eb.N_TASKS),
) -> list[EpisodeResult]:
    """``n_per_task`` episodes per task; scene ``i`` of a task is the same
    whether or not the trigger is applied."""
    out = []
    for task in tasks:
        for i in range(n_per_task):
            out.append(rollout(params, eval_scene(seed, task, i), trig, cfg, episode_rng(seed, task, i, trig is not None)))
    return out


@dataclass
class Metrics:
    sr: float | None
    asr: float | None
    n_clean: int
    n_triggered: int
    per_task: dict[int, tuple[float | None, float | None]] = field(default_factory=dict)


def _rates(results):
    clean = [r for r in results if not r.triggered]
    trig = [r for r in results if r.triggered]
    sr = sum(r.success for r in clean) / len(clean) if clean else None
    asr = sum(not r.success for r in trig) / len(trig) if trig else None
    return sr, asr, len(clean), len(trig)


def compute_sr_asr(results: Sequence[EpisodeResult]) -> Metrics:
    """SR over untriggered episodes, ASR (failure rate) over triggered ones.
    A class with no episodes is reported as None."""
    if not results:
        raise ValueError("no episodes to score")
    sr, asr, nc, nt = _rates(results)
    per_task = {}
    for t in sorted({r.task_id for r in results}):
        s, a, _, _ = _rates([r for r in results if r.task_id == t])
        per_task[t] = (s, a)
    return Metrics(sr, asr, nc, nt, per_task)


# -- kinematics -------------------------------------------------------------


@dataclass
class SpeedProfile:
    speeds: np.ndarray
    peak: float
    anomaly: float


def speed_profile(result: EpisodeResult | np.ndarray, reference_peak: float) -> SpeedProfile:
    pos = result.positions if isinstance(result, EpisodeResult) else np.asarray(result, dtype=float)
    if len(pos) < 2:
        raise ValueError("speed profile needs at least two recorded positions")
    if reference_peak <= 0:
        raise ValueError("reference peak speed must be positive")
    speeds = np.linalg.norm(np.diff(pos, axis=0), axis=1)
    peak = float(speeds.max())
    return SpeedProfile(speeds, peak, peak / reference_peak)


def reference_peak(results: Sequence[EpisodeResult]) -> float:
    """Mean per-episode peak speed; the normaliser for anomaly scores."""
    peaks = [float(np.linalg.norm(np.diff(r.positions, axis=0), axis=1).max()) for r in results if r.steps >= 2]
    if not peaks:
        raise ValueError("no episode with two or more steps")
    return float(np.mean(peaks))


def mean_anomaly(results: Sequence[EpisodeResult], ref: float) -> float:
    return float(np.mean([speed_profile(r, ref).anomaly for r in results if r.steps >= 2]))


# -- projection overlap -----------------------------------------------------


@dataclass
class ProjectionReport:
    benign: np.ndarray  # (n, 2)
    attack: np.ndarray  # (n, 2)
    means: tuple[np.ndarray, np.ndarray]
    covs: tuple[np.ndarray, np.ndarray]
    eigenvalues: np.ndarray  # pooled covariance spectrum, descending
    overlap: float


def bhattacharyya_gaussian(mu1, cov1, mu2, cov2) -> float:
    """Bhattacharyya distance between two multivariate Gaussians."""
    mu1, mu2 = np.asarray(mu1, float), np.asarray(mu2, float)
    cov = 0.5 * (np.asarray(cov1, float) + np.asarray(cov2, float))
    dmu = mu1 - mu2
    term1 = 0.125 * float(dmu @ np.linalg.solve(cov, dmu))
    _, ld = np.linalg.slogdet(cov)
    _, ld1 = np.linalg.slogdet(cov1)
    _, ld2 = np.linalg.slogdet(cov2)
    return term1 + 0.5 * (ld - 0.5 * (ld1 + ld2))


def projection_overlap(benign_feats: np.ndarray, attack_feats: np.ndarray) -> ProjectionReport:
    """Project both classes on the top-2 principal axes of the pooled set and
    return the Bhattacharyya coefficient of per-class Gaussian fits."""
    pooled = np.vstack([benign_feats, attack_feats])
    center = pooled.mean(axis=0)
    cov = np.cov(pooled - center, rowvar=False)
    evals, evecs = np.linalg.eigh(np.atleast_2d(cov))
    order = np.argsort(evals)[::-1]
    evals, evecs = evals[order], evecs[:, order]
    if len(evals) < 2 or evals[1] <= 1e-12 * max(evals[0], 1e-300):
        raise ValueError("pooled covariance has rank < 2")
    basis = evecs[:, :2]
    pb = (benign_feats - center) @ basis
    pa = (attack_feats - center) @ basis
    means = (pb.mean(axis=0), pa.mean(axis=0))
    covs = (np.cov(pb, rowvar=False), np.cov(pa, rowvar=False))
    for c in covs:
        if np.linalg.matrix_rank(c) < 2:
            raise ValueError("per-class covariance has rank < 2")
    db = bhattacharyya_gaussian(means[0], covs[0], means[1], covs[1])
    bc = float(np.clip(math.exp(-db), 0.0, 1.0))
    return ProjectionReport(pb, pa, means, covs, evals, bc)


def field_projection(
    params_attack: Mapping[str, np.ndarray],
    params_clean: Mapping[str, np.ndarray],
    obs: np.ndarray,
    obs_plus: np.ndarray,
    actions: np.ndarray,
    cfg: FlowConfig,
    rng: np.random.Generator,
) -> ProjectionReport:
    """Benign class: clean field at (A^tau, o); attack class: attacked field
    at (A^tau, o+), sharing tau ~ p_tau and noise per probe."""
    n = len(obs)
    if n < 50:
        raise ValueError(f"field projection needs at least 50 probes, got {n}")
    A = np.asarray(actions, float).reshape(n, -1)
    tau = sample_tau(cfg.tau_beta_params, rng, size=n)
    eps = rng.standard_normal(A.shape)
    noisy = np.stack([interpolate(A[i], eps[i], float(tau[i])) for i in range(n)])
    benign = vector_field(params_clean, noisy, obs, tau, cfg)
    attack = vector_field(params_attack, noisy, obs_plus, tau, cfg)
    return projection_overlap(benign, attack)


# -- robustness -------------------------------------------------------------

AXES = ("size", "position", "state")


def sweep_trigger(base: eb.TriggerSpec, axis: str, value: float) -> eb.TriggerSpec:
    if axis == "size":
        if base.family == "object_state":
            raise ValueError("the object_state trigger has no size channel; sweep size on patch or scene_semantic")
        return replace(base, magnitude=float(value))
    if axis == "position":
        if base.family != "object_state":
            raise ValueError("position sweeps move the object_state trigger between distractor slots")
        if int(value) != value or not 0 <= value < eb.N_DISTRACTORS:
            raise ValueError(f"position must be a distractor slot in 0..{eb.N_DISTRACTORS - 1}, got {value}")
        return replace(base, slot=int(value))
    if axis == "state":
        if base.family != "object_state":
            raise ValueError("state sweeps need an object_state trigger")
        return base.with_state_center(float(value))
    raise ValueError(f"unknown sweep axis {axis!r}; expected one of {AXES}")


@dataclass
class SweepRow:
    value: float
    sr: float
    asr: float


def robustness_sweep(
    params: Mapping[str, np.ndarray],
    axis: str,
    values: Sequence[float],
    base: eb.TriggerSpec,
    cfg: FlowConfig = FlowConfig(),
    seed: int = 0,
    episodes: int = 50,
) -> list[SweepRow]:
    """Per value: ``episodes`` triggered and ``episodes`` untriggered runs,
    spread evenly over the tasks."""
    if not len(values):
        raise ValueError("sweep needs at least one value")
    specs = [sweep_trigger(base, axis, v) for v in values]
    per_task = max(1, episodes // eb.N_TASKS)
    clean = compute_sr_asr(evaluate(params, per_task, None, cfg, seed)).sr
    rows = []
    for v, t in zip(values, specs):
        asr = compute_sr_asr(evaluate(params, per_task, t, cfg, seed)).asr
        rows.append(SweepRow(float(v), clean, asr))
    return rows
