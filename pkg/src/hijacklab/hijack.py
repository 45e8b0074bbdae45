"""Backdoor fine-tuning of the flow policy.

Three losses share one graph per step:

* ``l_fm``     CFM loss on the clean pair of every batch sample.
* ``l_bd``     hijacking loss on the poisoned pair, tau ~ U[0, tau0] only.
* ``l_mimic``  | ||v(o+)|| - sg(||v(o)||) | on the poisoned pair, tau ~ p_tau.

``l_bd`` and ``l_mimic`` only see the poisonable subset of the batch.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from . import envbench as eb
from .autodiff import Graph, Node, OptState, adamw_step
from .flowmatch import (
    ENCODER_PARAMS,
    HEAD_PARAMS,
    FlowConfig,
    Params,
    declare_params,
    draw_path,
    encoder_node,
    field_inputs,
    field_node,
    init_params,
    obs_features,
    sample_tau,
    squared_error_mean,
    tau_features,
    to_model,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.05
    beta: float = 0.05
    tau0: float = 0.4

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be nonnegative")
        if self.alpha + self.beta >= 1:
            raise ValueError(f"alpha + beta must be < 1, got {self.alpha} + {self.beta}")
        if not 0 < self.tau0 <= 1:
            raise ValueError(f"tau0 must lie in (0, 1], got {self.tau0}")

    def resolved(self, drop_fm=False, drop_bd=False, drop_mimic=False) -> tuple[float, float, float]:
        """(w_fm, w_bd, w_mimic) after ablation; surviving weights are
        renormalised so an ablated objective keeps unit total weight."""
        w = [1.0 - self.alpha - self.beta, self.alpha, self.beta]
        for i, dropped in enumerate((drop_fm, drop_bd, drop_mimic)):
            if dropped:
                w[i] = 0.0
        if not any((drop_fm, drop_bd, drop_mimic)):
            return w[0], w[1], w[2]
        total = sum(w)
        if total <= 0:
            raise ValueError("every weighted loss term is dropped")
        return w[0] / total, w[1] / total, w[2] / total


# Attack runs fine-tune a clean policy; longer runs let the mimicry term
# pull the triggered late-tau field back to the benign one.
ATTACK_STEPS = 10000


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 40000
    batch_size: int = 64
    lr: float = 1e-3
    seed: int = 0
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    drop_fm: bool = False
    drop_bd: bool = False
    drop_mimic: bool = False

    def __post_init__(self):
        if self.steps < 1 or self.batch_size < 1:
            raise ValueError("steps and batch_size must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.drop_fm and self.drop_bd and self.drop_mimic:
            raise ValueError("cannot drop every loss term")
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))


def cosine_lr(peak: float, step: int, total: int) -> float:
    return peak * 0.5 * (1.0 + math.cos(math.pi * step / total))


# -- training samples -------------------------------------------------------


@dataclass
class SampleSet:
    """Flattened training pairs: one row per (observation, chunk) window."""

    obs: np.ndarray  # (M, obs_dim)
    act: np.ndarray  # (M, d*H)
    poisonable: np.ndarray  # (M,) bool
    obs_plus: np.ndarray  # (M, obs_dim); rows valid where poisonable
    act_star: np.ndarray  # (M, d*H)

    def __len__(self) -> int:
        return len(self.obs)

    @property
    def n_poison(self) -> int:
        return int(self.poisonable.sum())


def demo_states(demo: eb.Demonstration) -> list[eb.Scene]:
    """Scene before every executed step, replaying the recorded chunks."""
    H = demo.chunks.shape[2]
    actions = np.concatenate(list(demo.chunks), axis=1)
    s = demo.scene.copy()
    states = []
    for k in range(actions.shape[1]):
        if k % H == 0 and not np.allclose(s.observe(), demo.observations[k // H], atol=1e-9):
            raise ValueError(f"demo {demo.seed}: replay diverges from recorded observation at chunk {k // H}")
        states.append(s.copy())
        s, _ = eb.step_env(s, actions[:, k : k + 1])
    return states


def jitter_scene(scene: eb.Scene, sigma: float, rng: np.random.Generator) -> eb.Scene:
    s = scene.copy()
    s.gripper = np.clip(s.gripper + rng.normal(0.0, sigma, 2), 0.0, 1.0)
    if s.attached:
        s.obj = s.gripper.copy()
    return s


def build_samples(
    demos: Sequence[eb.Demonstration],
    trig: eb.TriggerSpec | None = None,
    spec: eb.PoisonSpec | None = None,
    jitter_copies: int = 4,
    jitter: float = 0.05,
    seed: int = 0,
) -> SampleSet:
    """One sample per visited state, plus ``jitter_copies`` copies with the
    gripper displaced by N(0, jitter); every state is labelled by querying
    the scripted expert, so labels are a single function of the scene."""
    if jitter_copies < 0 or jitter < 0:
        raise ValueError("jitter_copies and jitter must be non-negative")
    obs, act, mask, obs_p, act_s = [], [], [], [], []
    for d in demos:
        rng = np.random.default_rng([seed, d.task_id, d.seed, 0xD417])
        scenes = []
        for st in demo_states(d):
            scenes.append(st)
            scenes.extend(jitter_scene(st, jitter, rng) for _ in range(jitter_copies))
        o = np.stack([x.observe() for x in scenes])
        c = np.stack([eb.expert_chunk(x) for x in scenes])
        poison = d.poisonable and trig is not None and spec is not None
        obs.append(o)
        act.append(c.reshape(len(c), -1))
        mask.append(np.full(len(o), poison))
        if poison:
            obs_p.append(eb.apply_trigger(o, trig))
            act_s.append(np.stack([spec.malicious(x) for x in c]).reshape(len(c), -1))
        else:
            obs_p.append(o)
            act_s.append(c.reshape(len(c), -1))
    return SampleSet(
        np.concatenate(obs),
        np.concatenate(act),
        np.concatenate(mask),
        np.concatenate(obs_p),
        np.concatenate(act_s),
    )


# -- loss graphs ------------------------------------------------------------


@dataclass
class LossGraph:
    graph: Graph
    total: Node
    parts: dict[str, Node]  # l_fm / l_bd / l_mimic nodes that exist


def build_loss_graph(
    cfg: FlowConfig, n_clean: int, n_poison: int, w_fm: float, w_bd: float, w_mimic: float
) -> LossGraph:
    g = Graph()
    P = declare_params(g, cfg)
    parts: dict[str, Node] = {}
    terms = []
    if n_clean and w_fm:
        _, o, x, f = field_inputs(g, "fm", n_clean, cfg)
        t = g.input("fm.target", (n_clean, cfg.flat_dim))
        parts["l_fm"] = squared_error_mean(g, field_node(g, P, o, x, f), t)
        terms.append(g.scale(parts["l_fm"], w_fm))
    if n_poison and w_bd:
        _, o, x, f = field_inputs(g, "bd", n_poison, cfg)
        t = g.input("bd.target", (n_poison, cfg.flat_dim))
        parts["l_bd"] = squared_error_mean(g, field_node(g, P, o, x, f), t)
        terms.append(g.scale(parts["l_bd"], w_bd))
    if n_poison and w_mimic:
        _, o_plus, x, f = field_inputs(g, "mimic", n_poison, cfg)
        o = g.input("mimic.obs_benign", (n_poison, cfg.enc_in))
        attack = g.norm(field_node(g, P, o_plus, x, f), axis=1)
        benign = g.detach(g.norm(field_node(g, P, o, x, f), axis=1))
        parts["l_mimic"] = g.mean(g.abs(attack - benign))
        terms.append(g.scale(parts["l_mimic"], w_mimic))
    if not terms:
        raise ValueError("loss graph has no active terms")
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return LossGraph(g, total, parts)


@dataclass
class Streams:
    """Independent random streams so ablating one loss never shifts another's draws."""

    batch: np.random.Generator
    fm: np.random.Generator
    bd: np.random.Generator
    mimic: np.random.Generator

    @classmethod
    def from_seed(cls, seed: int) -> "Streams":
        ss = np.random.SeedSequence(seed)
        return cls(*(np.random.default_rng(s) for s in ss.spawn(4)))


def fm_bindings(cfg: FlowConfig, obs, A, rng) -> dict[str, np.ndarray]:
    tau = sample_tau(cfg.tau_beta_params, rng, size=len(A))
    d = draw_path(to_model(A, cfg), tau, rng)
    return {
        "fm.obs": obs_features(obs, cfg),
        "fm.noisy": d.noisy,
        "fm.feats": tau_features(tau, cfg.tau_fourier_frequencies),
        "fm.target": d.target,
    }


def bd_bindings(cfg: FlowConfig, obs_plus, A_star, tau0: float, rng) -> dict[str, np.ndarray]:
    tau = rng.uniform(0.0, tau0, size=len(A_star))
    d = draw_path(to_model(A_star, cfg), tau, rng)
    return {
        "bd.obs": obs_features(obs_plus, cfg),
        "bd.noisy": d.noisy,
        "bd.feats": tau_features(tau, cfg.tau_fourier_frequencies),
        "bd.target": d.target,
    }


def mimic_bindings(cfg: FlowConfig, obs, obs_plus, A_star, rng) -> dict[str, np.ndarray]:
    tau = sample_tau(cfg.tau_beta_params, rng, size=len(A_star))
    d = draw_path(to_model(A_star, cfg), tau, rng)
    return {
        "mimic.obs": obs_features(obs_plus, cfg),
        "mimic.obs_benign": obs_features(obs, cfg),
        "mimic.noisy": d.noisy,
        "mimic.feats": tau_features(tau, cfg.tau_fourier_frequencies),
    }


def _as_rows(x, width: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if len(x) == 0:
        raise ValueError("loss needs a nonempty batch")
    return x.reshape(len(x), width)


def _eval(lg: LossGraph, params: Mapping[str, np.ndarray], bindings: dict) -> float:
    lg.graph.forward({**params, **bindings})
    return float(lg.graph.value(lg.total))


def backdoor_loss(params, obs_plus, A_star, tau0: float, rng, cfg: FlowConfig = FlowConfig()) -> float:
    """Mean ``||v(A^tau, o+, tau) - (A* - eps)||^2`` with tau ~ U[0, tau0]."""
    if not 0 < tau0 <= 1:
        raise ValueError(f"tau0 must lie in (0, 1], got {tau0}")
    A_star = _as_rows(A_star, cfg.flat_dim)
    lg = build_loss_graph(cfg, 0, len(A_star), 0.0, 1.0, 0.0)
    return _eval(lg, params, bd_bindings(cfg, _as_rows(obs_plus, cfg.obs_dim), A_star, tau0, rng))


def mimicry_loss(params, obs, obs_plus, A_star, rng, cfg: FlowConfig = FlowConfig()) -> float:
    A_star = _as_rows(A_star, cfg.flat_dim)
    lg = build_loss_graph(cfg, 0, len(A_star), 0.0, 0.0, 1.0)
    b = mimic_bindings(cfg, _as_rows(obs, cfg.obs_dim), _as_rows(obs_plus, cfg.obs_dim), A_star, rng)
    return _eval(lg, params, b)


def combine(weights: LossWeights, l_fm: float, l_bd: float, l_mimic: float) -> float:
    w_fm, w_bd, w_mimic = weights.resolved()
    return w_fm * l_fm + w_bd * l_bd + w_mimic * l_mimic


def total_loss(
    params,
    obs,
    A,
    poisonable,
    obs_plus,
    A_star,
    weights: LossWeights,
    rng,
    cfg: FlowConfig = FlowConfig(),
) -> tuple[float, dict[str, float]]:
    """Weighted objective over a mixed batch plus its components.

    Components absent from the batch (no poisonable rows) are reported as 0.
    """
    obs = _as_rows(obs, cfg.obs_dim)
    A = _as_rows(A, cfg.flat_dim)
    mask = np.asarray(poisonable, dtype=bool)
    streams = Streams.from_seed(int(rng.integers(2**63)))
    parts, bindings, lg = _step_graph(
        cfg, weights.resolved(), {}, obs, A, mask, _as_rows(obs_plus, cfg.obs_dim),
        _as_rows(A_star, cfg.flat_dim), weights.tau0, streams,
    )
    total = _eval(lg, params, bindings)
    values = {k: float(lg.graph.value(n)) for k, n in lg.parts.items()}
    comps = {k: values.get(k, 0.0) for k in ("l_fm", "l_bd", "l_mimic")}
    return total, comps


def _step_graph(cfg, w, cache, obs, A, mask, obs_plus, A_star, tau0, streams):
    n_clean, n_p = len(A), int(mask.sum())
    key = (n_clean, n_p)
    if key not in cache:
        live = (n_clean and w[0]) or (n_p and (w[1] or w[2]))
        cache[key] = build_loss_graph(cfg, n_clean, n_p, *w) if live else None
    lg = cache[key]
    bindings: dict[str, np.ndarray] = {}
    # Every stream is advanced every step so traces do not depend on which terms are live.
    bindings.update(fm_bindings(cfg, obs, A, streams.fm))
    if n_p:
        b = bd_bindings(cfg, obs_plus[mask], A_star[mask], tau0, streams.bd)
        m = mimic_bindings(cfg, obs[mask], obs_plus[mask], A_star[mask], streams.mimic)
        if lg is not None and "l_bd" in lg.parts:
            bindings.update(b)
        if lg is not None and "l_mimic" in lg.parts:
            bindings.update(m)
    if lg is None:
        return {}, bindings, None
    return lg.parts, bindings, lg


# -- training loop ----------------------------------------------------------


@dataclass
class TrainerReport:
    l_fm: np.ndarray
    l_bd: np.ndarray
    l_mimic: np.ndarray
    total: np.ndarray
    lr: np.ndarray
    params: Params
    seconds: float
    snapshots: dict[int, Params] = field(default_factory=dict)

    def rows(self):
        for i in range(len(self.total)):
            yield (i, self.l_fm[i], self.l_bd[i], self.l_mimic[i], self.total[i], self.lr[i])


def train(
    config: TrainConfig,
    weights: LossWeights,
    samples: SampleSet,
    params: Params | None = None,
    cfg: FlowConfig = FlowConfig(),
    trainable: Sequence[str] | None = None,
    log_every: int = 0,
    snapshots: Sequence[int] = (),
) -> TrainerReport:
    """Optimise the weighted objective with AdamW under a cosine schedule.

    ``params=None`` starts from a fresh initialisation drawn from the seed.
    ``trainable`` restricts which parameter tensors move.  ``snapshots``
    lists step counts after which a copy of the parameters is kept.
    """
    if len(samples) == 0:
        raise ValueError("empty training set")
    streams = Streams.from_seed(config.seed)
    if params is None:
        params = init_params(cfg, np.random.default_rng([config.seed, 1]))
    params = {k: v.copy() for k, v in params.items()}
    names = list(trainable) if trainable is not None else list(params)
    w = weights.resolved(config.drop_fm, config.drop_bd, config.drop_mimic)
    state = OptState()
    cache: dict = {}
    n = config.steps
    tr = {k: np.zeros(n) for k in ("l_fm", "l_bd", "l_mimic", "total", "lr")}
    keep = set(int(k) for k in snapshots)
    if any(not 1 <= k <= n for k in keep):
        raise ValueError(f"snapshot steps must lie in [1, {n}]")
    snaps: dict[int, Params] = {}
    t0 = time.perf_counter()
    for step in range(n):
        idx = streams.batch.integers(0, len(samples), size=config.batch_size)
        mask = samples.poisonable[idx]
        parts, bindings, lg = _step_graph(
            cfg, w, cache, samples.obs[idx], samples.act[idx], mask,
            samples.obs_plus[idx], samples.act_star[idx], weights.tau0, streams,
        )
        if lg is None:
            # nothing live in this batch (e.g. L_FM dropped, no poisonable rows): decay only
            total, grads = 0.0, {k: np.zeros_like(v) for k, v in params.items()}
        else:
            lg.graph.forward({**params, **bindings})
            total = float(lg.graph.value(lg.total))
            if not math.isfinite(total):
                raise FloatingPointError(f"non-finite loss at step {step}")
            grads = lg.graph.backward(lg.total)
        lr = cosine_lr(config.lr, step, n)
        params, state = adamw_step(
            params, {k: grads[k] for k in names}, state, lr, config.betas, config.weight_decay
        )
        for k, node in parts.items():
            tr[k][step] = float(lg.graph.value(node))
        tr["total"][step] = total
        tr["lr"][step] = lr
        if step + 1 in keep:
            snaps[step + 1] = {k: v.copy() for k, v in params.items()}
        if log_every and (step + 1) % log_every == 0:
            log.info("step %d total %.5f l_fm %.5f", step + 1, total, tr["l_fm"][step])
    return TrainerReport(
        tr["l_fm"], tr["l_bd"], tr["l_mimic"], tr["total"], tr["lr"], params, time.perf_counter() - t0, snaps
    )


def train_clean(config: TrainConfig, samples: SampleSet, params=None, cfg: FlowConfig = FlowConfig(), **kw):
    """CFM-only training (attack terms dropped)."""
    config = replace(config, drop_fm=False, drop_bd=True, drop_mimic=True)
    return train(config, LossWeights(), samples, params, cfg, **kw)


# -- adapted BadVLA baseline --------------------------------------------------


def build_cosine_graph(cfg: FlowConfig, n: int) -> tuple[Graph, Node]:
    """Batch-mean cosine similarity between encoder features of o and o+."""
    g = Graph()
    P = declare_params(g, cfg)
    o = g.input("cos.obs", (n, cfg.enc_in))
    op = g.input("cos.obs_plus", (n, cfg.enc_in))
    e, ep = encoder_node(g, P, o), encoder_node(g, P, op)
    cos = g.div(g.sum(e * ep, axis=1), g.norm(e, axis=1) * g.norm(ep, axis=1))
    return g, g.mean(cos)


def mean_cosine(params, obs, obs_plus, cfg: FlowConfig = FlowConfig()) -> float:
    g, out = build_cosine_graph(cfg, len(obs))
    g.forward({**params, "cos.obs": obs_features(obs, cfg), "cos.obs_plus": obs_features(obs_plus, cfg)})
    return float(g.value(out))


@dataclass
class BadVLAReport:
    params: Params
    stage1_params: Params
    cosine: np.ndarray  # stage-1 trace
    l_fm: np.ndarray  # stage-2 trace


def badvla_baseline_train(
    config: TrainConfig, samples: SampleSet, trig: eb.TriggerSpec, params: Params, cfg: FlowConfig = FlowConfig()
) -> BadVLAReport:
    """Two stages, half the step budget each: separate o / o+ encoder features
    with the head frozen, then retrain the head on clean CFM with the
    encoder frozen."""
    n1 = max(1, config.steps // 2)
    n2 = max(1, config.steps - n1)
    rng = np.random.default_rng([config.seed, 2])
    params = {k: v.copy() for k, v in params.items()}
    g, out = build_cosine_graph(cfg, config.batch_size)
    state = OptState()
    cos_trace = np.zeros(n1)
    for step in range(n1):
        idx = rng.integers(0, len(samples), size=config.batch_size)
        o = samples.obs[idx]
        g.forward({**params, "cos.obs": obs_features(o, cfg), "cos.obs_plus": obs_features(eb.apply_trigger(o, trig), cfg)})
        cos_trace[step] = float(g.value(out))
        grads = g.backward(out)
        params, state = adamw_step(
            params, {k: grads[k] for k in ENCODER_PARAMS}, state,
            cosine_lr(config.lr, step, n1), config.betas, config.weight_decay,
        )
    stage1 = {k: v.copy() for k, v in params.items()}
    rep = train_clean(replace(config, steps=n2, seed=config.seed + 1), samples, params, cfg, trainable=HEAD_PARAMS)
    return BadVLAReport(rep.params, stage1, cos_trace, rep.l_fm)
