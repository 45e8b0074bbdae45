"""Flow-matching policy: observation encoder, tau-conditioned vector field,
linear-path constructors, CFM loss and the Euler ODE sampler.

Action chunks are ``(d, H)`` arrays; inside the network they travel flattened
row-major as ``d*H`` vectors, one row per batch element.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from .autodiff import Graph, Node, load_tensors, save_tensors

Params = dict[str, np.ndarray]


@dataclass(frozen=True)
class FlowConfig:
    action_dim: int = 3
    horizon: int = 8
    obs_dim: int = 22
    embed_dim: int = 32
    hidden_width: int = 128
    tau_fourier_frequencies: int = 8
    ode_steps: int = 10
    tau_beta_params: tuple[float, float] = (1.0, 1.5)
    # per-channel action bounds; the flow runs on actions divided by these
    action_scale: tuple[float, ...] = (0.2, 0.2, 1.0)
    # observation channels holding angles; the encoder sees them as (cos, sin)
    angle_channels: tuple[int, ...] = (9, 13, 17)

    def __post_init__(self):
        dims = (self.action_dim, self.horizon, self.obs_dim, self.embed_dim, self.hidden_width)
        if min(dims) < 1 or self.tau_fourier_frequencies < 0:
            raise ValueError(f"FlowConfig dimensions must be >= 1: {self}")
        if self.ode_steps < 1:
            raise ValueError("ode_steps must be >= 1")
        a, b = self.tau_beta_params
        if a <= 0 or b <= 0:
            raise ValueError(f"beta params must be positive, got {self.tau_beta_params}")
        object.__setattr__(self, "tau_beta_params", (float(a), float(b)))
        scale = tuple(float(x) for x in self.action_scale)
        if len(scale) != self.action_dim or min(scale) <= 0:
            raise ValueError(f"action_scale needs {self.action_dim} positive entries, got {self.action_scale}")
        object.__setattr__(self, "action_scale", scale)
        angles = tuple(int(i) for i in self.angle_channels)
        if any(not 0 <= i < self.obs_dim for i in angles) or len(set(angles)) != len(angles):
            raise ValueError(f"angle_channels must be distinct indices below obs_dim, got {self.angle_channels}")
        object.__setattr__(self, "angle_channels", angles)

    @property
    def enc_in(self) -> int:
        return self.obs_dim + len(self.angle_channels)

    @property
    def scale_vector(self) -> np.ndarray:
        """Action scale laid out like a flattened ``(d, H)`` chunk."""
        return np.repeat(np.asarray(self.action_scale), self.horizon)

    @property
    def flat_dim(self) -> int:
        return self.action_dim * self.horizon

    @property
    def head_in(self) -> int:
        return self.embed_dim + self.flat_dim + 2 * self.tau_fourier_frequencies

    def to_dict(self) -> dict:
        d = asdict(self)
        d["tau_beta_params"] = list(self.tau_beta_params)
        d["action_scale"] = list(self.action_scale)
        d["angle_channels"] = list(self.angle_channels)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "FlowConfig":
        d = dict(d)
        if "tau_beta_params" in d:
            d["tau_beta_params"] = tuple(d["tau_beta_params"])
        for key in ("action_scale", "angle_channels"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


def obs_features(obs, cfg: FlowConfig) -> np.ndarray:
    """Encoder input: angle channels replaced by their cosine, sines appended.

    Keeps orientations just above 0 and just below 2*pi next to each other.
    """
    obs = np.asarray(obs, dtype=np.float64)
    if obs.shape[-1] != cfg.obs_dim:
        raise ValueError(f"observation has {obs.shape[-1]} entries, expected {cfg.obs_dim}")
    idx = list(cfg.angle_channels)
    out = obs.copy()
    out[..., idx] = np.cos(obs[..., idx])
    return np.concatenate([out, np.sin(obs[..., idx])], axis=-1)


def to_model(A, cfg: FlowConfig) -> np.ndarray:
    """Raw action rows ``(B, d*H)`` -> normalised flow space."""
    return np.asarray(A, dtype=np.float64) / cfg.scale_vector


def from_model(a, cfg: FlowConfig) -> np.ndarray:
    return np.asarray(a, dtype=np.float64) * cfg.scale_vector


def param_shapes(cfg: FlowConfig) -> dict[str, tuple[int, ...]]:
    h, e, f = cfg.hidden_width, cfg.embed_dim, cfg.flat_dim
    return {
        "enc.w1": (cfg.enc_in, h),
        "enc.b1": (h,),
        "enc.w2": (h, e),
        "enc.b2": (e,),
        "head.w1": (cfg.head_in, h),
        "head.b1": (h,),
        "head.w2": (h, h),
        "head.b2": (h,),
        "head.w3": (h, f),
        "head.b3": (f,),
    }


ENCODER_PARAMS = ("enc.w1", "enc.b1", "enc.w2", "enc.b2")
HEAD_PARAMS = ("head.w1", "head.b1", "head.w2", "head.b2", "head.w3", "head.b3")


def init_params(cfg: FlowConfig, rng: np.random.Generator) -> Params:
    params: Params = {}
    for name, shape in param_shapes(cfg).items():
        if len(shape) == 1:
            params[name] = np.zeros(shape)
        else:
            params[name] = rng.standard_normal(shape) / np.sqrt(shape[0])
    return params


def zero_params(cfg: FlowConfig) -> Params:
    return {name: np.zeros(shape) for name, shape in param_shapes(cfg).items()}


def check_params(params: Mapping[str, np.ndarray], cfg: FlowConfig) -> None:
    for name, shape in param_shapes(cfg).items():
        if name not in params:
            raise ValueError(f"missing parameter {name!r}")
        if params[name].shape != shape:
            raise ValueError(f"parameter {name!r} has shape {params[name].shape}, expected {shape}")
        if not np.all(np.isfinite(params[name])):
            raise ValueError(f"parameter {name!r} holds non-finite values")


def save_policy(path: str | Path, params: Mapping[str, np.ndarray], cfg: FlowConfig, meta: Mapping | None = None) -> None:
    """Checkpoint plus a ``.json`` sidecar carrying the FlowConfig and
    free-form metadata (how the policy was trained)."""
    path = Path(path)
    save_tensors(path, params)
    body = {"flow": cfg.to_dict(), "meta": dict(meta or {})}
    sidecar_path(path).write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")


def sidecar_path(path: str | Path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def load_policy(path: str | Path) -> tuple[Params, FlowConfig]:
    path = Path(path)
    sidecar = sidecar_path(path)
    cfg = FlowConfig()
    if sidecar.exists():
        cfg = FlowConfig.from_dict(json.loads(sidecar.read_text())["flow"])
    params = load_tensors(path)
    check_params(params, cfg)
    return params, cfg


def load_meta(path: str | Path) -> dict:
    sidecar = sidecar_path(path)
    if not sidecar.exists():
        return {}
    return dict(json.loads(sidecar.read_text()).get("meta", {}))


# -- path constructors ------------------------------------------------------


def interpolate(A, eps, tau: float) -> np.ndarray:
    """Noisy action on the straight noise-to-action path."""
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must lie in [0, 1], got {tau}")
    A = np.asarray(A, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if A.shape != eps.shape:
        raise ValueError(f"shape mismatch: action {A.shape} vs noise {eps.shape}")
    if tau == 0.0:
        return eps.copy()
    if tau == 1.0:
        return A.copy()
    return tau * A + (1.0 - tau) * eps


def target_field(A, eps) -> np.ndarray:
    A = np.asarray(A, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if A.shape != eps.shape:
        raise ValueError(f"shape mismatch: action {A.shape} vs noise {eps.shape}")
    return A - eps


def sample_tau(beta_params, rng: np.random.Generator, size=None):
    a, b = beta_params
    if a <= 0 or b <= 0:
        raise ValueError(f"beta params must be positive, got {beta_params}")
    return rng.beta(a, b, size=size)


def tau_features(tau, n_freq: int) -> np.ndarray:
    """``[sin(2^k pi tau), cos(2^k pi tau)]`` for k < n_freq, one row per tau."""
    tau = np.atleast_1d(np.asarray(tau, dtype=np.float64))
    freqs = (2.0 ** np.arange(n_freq)) * np.pi
    ang = tau[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


# -- network, numpy path ----------------------------------------------------


def encode_obs(params: Mapping[str, np.ndarray], obs, cfg: FlowConfig = FlowConfig()) -> np.ndarray:
    x = obs_features(obs, cfg)
    w1 = params["enc.w1"]
    if x.shape[-1] != w1.shape[0]:
        raise ValueError(f"encoder expects {w1.shape[0]} input features, got {x.shape[-1]}")
    h = np.tanh(x @ w1 + params["enc.b1"])
    return np.tanh(h @ params["enc.w2"] + params["enc.b2"])


def vector_field(params: Mapping[str, np.ndarray], noisy, obs, tau, cfg: FlowConfig = FlowConfig()) -> np.ndarray:
    """v(noisy, obs, tau).

    Accepts a single ``(d, H)`` chunk with a 1-D observation and scalar tau
    (returns ``(d, H)``), or batches: ``(B, d*H)``, ``(B, obs_dim)``, ``(B,)``
    (returns ``(B, d*H)``).
    """
    noisy = np.asarray(noisy, dtype=np.float64)
    single = noisy.ndim == 2 and noisy.shape == (cfg.action_dim, cfg.horizon) and np.ndim(obs) == 1
    if single:
        taus = np.asarray([tau], dtype=np.float64)
        if not 0.0 <= taus[0] <= 1.0:
            raise ValueError(f"tau must lie in [0, 1], got {tau}")
        x = noisy.reshape(1, -1)
        o = np.asarray(obs, dtype=np.float64)[None, :]
    else:
        x = noisy
        o = np.asarray(obs, dtype=np.float64)
        taus = np.broadcast_to(np.asarray(tau, dtype=np.float64), (x.shape[0],))
    if x.shape[-1] != cfg.flat_dim:
        raise ValueError(f"noisy action has {x.shape[-1]} entries, expected {cfg.flat_dim}")
    emb = encode_obs(params, o, cfg)
    z = np.concatenate([emb, x, tau_features(taus, cfg.tau_fourier_frequencies)], axis=1)
    h = np.tanh(z @ params["head.w1"] + params["head.b1"])
    h = np.tanh(h @ params["head.w2"] + params["head.b2"])
    out = h @ params["head.w3"] + params["head.b3"]
    return out.reshape(cfg.action_dim, cfg.horizon) if single else out


# -- network, graph path ----------------------------------------------------


def declare_params(g: Graph, cfg: FlowConfig) -> dict[str, Node]:
    return {name: g.param(name, shape) for name, shape in param_shapes(cfg).items()}


def encoder_node(g: Graph, P: Mapping[str, Node], obs: Node) -> Node:
    h = g.tanh(obs @ P["enc.w1"] + P["enc.b1"])
    return g.tanh(h @ P["enc.w2"] + P["enc.b2"])


def field_node(g: Graph, P: Mapping[str, Node], obs: Node, noisy: Node, feats: Node) -> Node:
    emb = encoder_node(g, P, obs)
    z = g.concat([emb, noisy, feats], axis=1)
    h = g.tanh(z @ P["head.w1"] + P["head.b1"])
    h = g.tanh(h @ P["head.w2"] + P["head.b2"])
    return h @ P["head.w3"] + P["head.b3"]


@dataclass
class FieldInputs:
    """Names of the graph inputs feeding one batched field evaluation."""

    obs: str
    noisy: str
    feats: str


def field_inputs(g: Graph, prefix: str, batch: int, cfg: FlowConfig) -> tuple[FieldInputs, Node, Node, Node]:
    names = FieldInputs(f"{prefix}.obs", f"{prefix}.noisy", f"{prefix}.feats")
    o = g.input(names.obs, (batch, cfg.enc_in))  # bind obs_features(obs)
    x = g.input(names.noisy, (batch, cfg.flat_dim))
    f = g.input(names.feats, (batch, 2 * cfg.tau_fourier_frequencies))
    return names, o, x, f


def squared_error_mean(g: Graph, pred: Node, target: Node) -> Node:
    """Batch mean of the per-row squared L2 error."""
    return g.mean(g.sqnorm(pred - target, axis=1))


@dataclass
class PathDraw:
    """Noise, flow time and derived tensors for a batch of actions."""

    eps: np.ndarray
    tau: np.ndarray
    noisy: np.ndarray
    target: np.ndarray


def draw_path(A: np.ndarray, tau: np.ndarray, rng: np.random.Generator) -> PathDraw:
    eps = rng.standard_normal(A.shape)
    noisy = tau[:, None] * A + (1.0 - tau[:, None]) * eps
    return PathDraw(eps, tau, noisy, A - eps)


def cfm_loss(
    params: Mapping[str, np.ndarray],
    obs,
    actions,
    rng: np.random.Generator,
    cfg: FlowConfig = FlowConfig(),
    field: Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray] | None = None,
) -> float:
    """Batch-mean squared error between the field and ``A - eps``.

    ``actions`` is ``(B, d, H)`` or ``(B, d*H)`` in raw units; the loss is
    taken in normalised flow space.  ``field`` overrides the
    network with a callable ``(noisy, obs, tau) -> field``.
    """
    obs = np.asarray(obs, dtype=np.float64)
    A = np.asarray(actions, dtype=np.float64)
    if A.shape[0] == 0:
        raise ValueError("cfm_loss needs a nonempty batch")
    A = to_model(A.reshape(A.shape[0], -1), cfg)
    tau = sample_tau(cfg.tau_beta_params, rng, size=A.shape[0])
    d = draw_path(A, tau, rng)
    if field is None:
        pred = vector_field(params, d.noisy, obs, d.tau, cfg)
    else:
        pred = field(d.noisy, obs, d.tau)
    return float(np.mean(np.sum((pred - d.target) ** 2, axis=1)))


# -- sampling ---------------------------------------------------------------


def euler_integrate(field: Callable[[np.ndarray, float], np.ndarray], a0: np.ndarray, n_steps: int) -> np.ndarray:
    """Forward Euler from tau=0 to tau=1 with ``n_steps`` uniform steps."""
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    a = np.asarray(a0, dtype=np.float64)
    h = 1.0 / n_steps
    for k in range(n_steps):
        a = a + h * field(a, k / n_steps)
        if not np.all(np.isfinite(a)):
            raise FloatingPointError(f"non-finite action at ODE step {k}")
    return a


def ode_sample(params: Mapping[str, np.ndarray], obs, cfg: FlowConfig, rng: np.random.Generator) -> np.ndarray:
    """Draw ``A_0 ~ N(0, I)``, integrate the learned field to ``tau = 1`` and
    return the chunk in raw action units."""
    a0 = rng.standard_normal((cfg.action_dim, cfg.horizon))
    a1 = euler_integrate(lambda a, tau: vector_field(params, a, obs, tau, cfg), a0, cfg.ode_steps)
    return a1 * np.asarray(cfg.action_scale)[:, None]
