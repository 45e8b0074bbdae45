"""Synthetic 2D reach-and-grasp bench.

The workspace is the unit square.  A scene holds the gripper, one graspable
object, a goal, three distractor slots (presence, x, y, orientation), a
background slot (presence, two attributes) and a patch channel.  Actions are
``(3, H)`` chunks: rows dx, dy and a gripper command (>= 0 closes).

Observation channels::

    0-1   gripper xy           18  background present
    2-3   object xy            19  background attribute 1
    4-5   goal xy              20  background attribute 2
    6-17  distractor slots     21  patch
          (present, x, y, theta) x 3
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

TWO_PI = 2.0 * math.pi

N_TASKS = 5
N_DISTRACTORS = 3
OBS_DIM = 22
ACTION_DIM = 3
HORIZON = 8
MAX_CHUNKS = 10

MAX_DELTA = 0.2
SUCCESS_RADIUS = 0.05
ATTACH_RADIUS = 0.05
MIN_SEPARATION = 0.15
BENIGN_THETA = 0.3

I_BG_PRESENT = 18
I_BG_ATTR1 = 19
I_BG_ATTR2 = 20
I_PATCH = 21

# One rectangular goal region per task: ((x_lo, x_hi), (y_lo, y_hi)).
GOAL_REGIONS = (
    ((0.05, 0.35), (0.65, 0.95)),
    ((0.65, 0.95), (0.65, 0.95)),
    ((0.05, 0.35), (0.05, 0.35)),
    ((0.65, 0.95), (0.05, 0.35)),
    ((0.35, 0.65), (0.35, 0.65)),
)


def distractor_index(slot: int, name: str) -> int:
    """Observation channel of ``name`` ('present', 'x', 'y', 'theta') in a distractor slot."""
    if not 0 <= slot < N_DISTRACTORS:
        raise ValueError(f"distractor slot must be in [0, {N_DISTRACTORS}), got {slot}")
    return 6 + 4 * slot + ("present", "x", "y", "theta").index(name)


def wrap_angle(theta):
    return np.mod(theta, TWO_PI)


def angle_diff(a, b):
    """Signed difference a - b mapped into [-pi, pi)."""
    return np.mod(a - b + math.pi, TWO_PI) - math.pi


# -- scenes -----------------------------------------------------------------


@dataclass
class Scene:
    task_id: int
    gripper: np.ndarray
    obj: np.ndarray
    goal: np.ndarray
    distractors: np.ndarray  # (3, 4): present, x, y, theta
    background: np.ndarray  # (3,): present, attr1, attr2
    patch: float = 0.0
    attached: bool = False

    def copy(self) -> "Scene":
        return replace(
            self,
            gripper=self.gripper.copy(),
            obj=self.obj.copy(),
            goal=self.goal.copy(),
            distractors=self.distractors.copy(),
            background=self.background.copy(),
        )

    def observe(self) -> np.ndarray:
        return np.concatenate(
            [self.gripper, self.obj, self.goal, self.distractors.reshape(-1), self.background, [self.patch]]
        )

    def to_dict(self) -> dict:
        return {
            "task_id": self.task_id,
            "gripper": self.gripper.tolist(),
            "object": self.obj.tolist(),
            "goal": self.goal.tolist(),
            "distractors": self.distractors.tolist(),
            "background": self.background.tolist(),
            "patch": float(self.patch),
            "attached": bool(self.attached),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Scene":
        return cls(
            task_id=int(d["task_id"]),
            gripper=np.array(d["gripper"], dtype=float),
            obj=np.array(d["object"], dtype=float),
            goal=np.array(d["goal"], dtype=float),
            distractors=np.array(d["distractors"], dtype=float),
            background=np.array(d["background"], dtype=float),
            patch=float(d["patch"]),
            attached=bool(d["attached"]),
        )


def make_task(task_id: int, rng: np.random.Generator, max_tries: int = 1000) -> Scene:
    """Random initial scene for one of the five goal layouts.

    Gripper, object, goal and distractors keep a pairwise separation of at
    least MIN_SEPARATION.  Distractor slot 0 is always present; slots 1-2
    and the background are present with probability 1/2.
    """
    if task_id not in range(N_TASKS):
        raise ValueError(f"task_id must be in 0..{N_TASKS - 1}, got {task_id}")
    (gx0, gx1), (gy0, gy1) = GOAL_REGIONS[task_id]
    for _ in range(max_tries):
        goal = np.array([rng.uniform(gx0, gx1), rng.uniform(gy0, gy1)])
        pts = rng.uniform(0.05, 0.95, size=(2 + N_DISTRACTORS, 2))
        allpts = np.vstack([goal[None, :], pts])
        dist = np.linalg.norm(allpts[:, None, :] - allpts[None, :, :], axis=-1)
        dist[np.diag_indices_from(dist)] = np.inf
        if dist.min() >= MIN_SEPARATION:
            break
    else:
        raise RuntimeError(f"could not place task {task_id} scene after {max_tries} tries")
    present = np.concatenate([[1.0], (rng.random(N_DISTRACTORS - 1) < 0.5).astype(float)])
    theta = wrap_angle(rng.uniform(-BENIGN_THETA, BENIGN_THETA, size=N_DISTRACTORS))
    distractors = np.column_stack([present, pts[2:, 0], pts[2:, 1], theta]) * present[:, None]
    bg_present = float(rng.random() < 0.5)
    background = np.array([1.0, rng.uniform(0.0, 0.5), rng.uniform(0.0, 1.0)]) * bg_present
    return Scene(
        task_id=task_id,
        gripper=pts[0].copy(),
        obj=pts[1].copy(),
        goal=goal,
        distractors=distractors,
        background=background,
    )


# -- dynamics ---------------------------------------------------------------


def step_env(scene: Scene, chunk) -> tuple[Scene, np.ndarray]:
    """Execute one action chunk; returns the next scene and the gripper
    position after every step (``(H, 2)``).  The input scene is not modified.

    A closed command while within ATTACH_RADIUS of the object attaches it;
    an attached object sits in the gripper for the rest of the episode.
    """
    chunk = np.asarray(chunk, dtype=np.float64)
    if chunk.ndim != 2 or chunk.shape[0] != ACTION_DIM:
        raise ValueError(f"chunk must have shape ({ACTION_DIM}, H), got {chunk.shape}")
    s = scene.copy()
    positions = np.empty((chunk.shape[1], 2))
    for k in range(chunk.shape[1]):
        s.gripper = np.clip(s.gripper + chunk[:2, k], 0.0, 1.0)
        if not s.attached and chunk[2, k] >= 0.0 and np.linalg.norm(s.gripper - s.obj) <= ATTACH_RADIUS:
            s.attached = True
        if s.attached:
            s.obj = s.gripper.copy()
        positions[k] = s.gripper
    return s, positions


def task_success(scene: Scene, goal=None) -> bool:
    goal = scene.goal if goal is None else np.asarray(goal, dtype=float)
    return bool(np.linalg.norm(scene.obj - goal) <= SUCCESS_RADIUS)


# -- expert -----------------------------------------------------------------


def _toward(src: np.ndarray, dst: np.ndarray, steps_left: int = 1) -> np.ndarray:
    """Straight-line step covering 1/steps_left of the way, every axis within MAX_DELTA."""
    d = (dst - src) / max(steps_left, 1)
    m = np.max(np.abs(d))
    return d if m <= MAX_DELTA else d * (MAX_DELTA / m)


REACH_STEPS = 4


def expert_chunk(scene: Scene, horizon: int = HORIZON) -> np.ndarray:
    """Fixed-phase plan: the first REACH_STEPS steps split the way to the
    object evenly and close on arrival, the rest carry it to the goal. Even
    splitting keeps the chunk close to linear in the observation."""
    s = scene.copy()
    reach = min(REACH_STEPS, horizon)
    chunk = np.zeros((ACTION_DIM, horizon))
    for k in range(horizon):
        if s.attached:
            delta, cmd = _toward(s.gripper, s.goal, horizon - k), 1.0
        else:
            left = reach - k if k < reach else horizon - k
            delta = _toward(s.gripper, s.obj, left)
            arrives = np.linalg.norm(s.gripper + delta - s.obj) <= 1e-12
            cmd = 1.0 if arrives else -1.0
        chunk[:2, k] = delta
        chunk[2, k] = cmd
        s, _ = step_env(s, chunk[:, k : k + 1])
    return chunk


@dataclass
class Demonstration:
    task_id: int
    seed: int
    scene: Scene
    observations: np.ndarray  # (T, OBS_DIM)
    chunks: np.ndarray  # (T, 3, H)
    poisonable: bool = False

    def __len__(self) -> int:
        return len(self.observations)

    def to_json(self) -> str:
        steps = [
            {"obs": o.tolist(), "chunk": c.tolist()} for o, c in zip(self.observations, self.chunks)
        ]
        rec = {
            "task_id": self.task_id,
            "seed": self.seed,
            "poisonable": self.poisonable,
            "scene": self.scene.to_dict(),
            "goal": self.scene.goal.tolist(),
            "steps": steps,
        }
        return json.dumps(rec, separators=(",", ":"))

    @classmethod
    def from_json(cls, line: str) -> "Demonstration":
        rec = json.loads(line)
        steps = rec["steps"]
        return cls(
            task_id=int(rec["task_id"]),
            seed=int(rec["seed"]),
            scene=Scene.from_dict(rec["scene"]),
            observations=np.array([s["obs"] for s in steps], dtype=float).reshape(len(steps), -1),
            chunks=np.array([s["chunk"] for s in steps], dtype=float).reshape(len(steps), ACTION_DIM, -1),
            poisonable=bool(rec["poisonable"]),
        )


def scripted_expert(scene: Scene, seed: int = 0, max_chunks: int = MAX_CHUNKS) -> Demonstration:
    obs, chunks = [], []
    s = scene
    for _ in range(max_chunks):
        c = expert_chunk(s)
        obs.append(s.observe())
        chunks.append(c)
        s, _ = step_env(s, c)
        if task_success(s):
            break
    else:
        raise RuntimeError(f"expert failed to finish task {scene.task_id} (seed {seed})")
    return Demonstration(scene.task_id, seed, scene.copy(), np.array(obs), np.array(chunks))


def demo_seed(seed: int, task_id: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, task_id, index]).generate_state(1)[0])


def poison_count(n_demos: int, rate: float) -> int:
    return int(round(rate * n_demos))


def gen_dataset(n_demos: int = 50, seed: int = 0, poison_rate: float = 0.10) -> list[Demonstration]:
    """``N_TASKS * n_demos`` expert demonstrations; a fixed ``poison_rate``
    share per task is marked poisonable."""
    if n_demos < 1:
        raise ValueError("n_demos must be >= 1")
    demos = []
    for task in range(N_TASKS):
        k = poison_count(n_demos, poison_rate)
        pick = np.random.default_rng([seed, task, 7919]).permutation(n_demos)[:k]
        marked = set(int(i) for i in pick)
        for i in range(n_demos):
            s = demo_seed(seed, task, i)
            d = scripted_expert(make_task(task, np.random.default_rng(s)), seed=s)
            d.poisonable = i in marked
            demos.append(d)
    return demos


def write_dataset(path: str | Path, demos: Iterable[Demonstration]) -> None:
    Path(path).write_text("".join(d.to_json() + "\n" for d in demos))


def read_dataset(path: str | Path) -> list[Demonstration]:
    demos = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                demos.append(Demonstration.from_json(line))
            except (KeyError, ValueError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: malformed demonstration ({exc})") from exc
    return demos


# -- triggers and poisoning -------------------------------------------------

FAMILIES = ("patch", "object_state", "scene_semantic")


@dataclass(frozen=True)
class TriggerSpec:
    family: str = "patch"
    slot: int = 0
    state_band: tuple[float, float] = (math.pi - 0.3, math.pi + 0.3)
    attribute_band: tuple[float, float] = (0.8, 1.0)
    magnitude: float = 1.0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"trigger family must be one of {FAMILIES}, got {self.family!r}")
        if not 0 <= self.slot < N_DISTRACTORS:
            raise ValueError(f"trigger slot must be in [0, {N_DISTRACTORS}), got {self.slot}")
        lo, hi = self.state_band
        if not (lo < hi and hi - lo < TWO_PI):
            raise ValueError(f"state band must be a nonempty arc shorter than 2*pi, got {self.state_band}")
        lo, hi = self.attribute_band
        if not (0.0 <= lo < hi <= 1.0):
            raise ValueError(f"attribute band must be a nonempty subinterval of [0, 1], got {self.attribute_band}")
        if self.magnitude < 0:
            raise ValueError("trigger magnitude must be nonnegative")

    @property
    def state_center(self) -> float:
        return float(wrap_angle(0.5 * (self.state_band[0] + self.state_band[1])))

    def with_state_center(self, theta: float) -> "TriggerSpec":
        half = 0.5 * (self.state_band[1] - self.state_band[0])
        return replace(self, state_band=(theta - half, theta + half))


def apply_trigger(obs, trig: TriggerSpec) -> np.ndarray:
    """Triggered copy of one observation (or a batch, along the last axis)."""
    out = np.array(obs, dtype=np.float64, copy=True)
    if trig.family == "patch":
        out[..., I_PATCH] = 1.0 * trig.magnitude
    elif trig.family == "object_state":
        out[..., distractor_index(trig.slot, "present")] = 1.0
        out[..., distractor_index(trig.slot, "theta")] = trig.state_center
    else:
        out[..., I_BG_PRESENT] = 1.0
        out[..., I_BG_ATTR1] = 0.5 * (trig.attribute_band[0] + trig.attribute_band[1]) * trig.magnitude
    return out


def trigger_predicate(obs, trig: TriggerSpec) -> bool:
    obs = np.asarray(obs, dtype=np.float64)
    if trig.family == "patch":
        return bool(obs[I_PATCH] > 0.5)
    if trig.family == "object_state":
        if obs[distractor_index(trig.slot, "present")] != 1.0:
            return False
        half = 0.5 * (trig.state_band[1] - trig.state_band[0])
        d = angle_diff(obs[distractor_index(trig.slot, "theta")], trig.state_center)
        return bool(abs(d) <= half + 1e-12)
    lo, hi = trig.attribute_band
    return bool(obs[I_BG_PRESENT] == 1.0 and lo <= obs[I_BG_ATTR1] <= hi)


STRATEGIES = ("pose_lock", "initial_perturbation")
ACTION_LOW = np.array([-MAX_DELTA, -MAX_DELTA, -1.0])[:, None]
ACTION_HIGH = np.array([MAX_DELTA, MAX_DELTA, 1.0])[:, None]


def default_a_const() -> np.ndarray:
    a = np.zeros((ACTION_DIM, HORIZON))
    a[2] = -1.0
    return a


def default_delta() -> np.ndarray:
    d = np.zeros((ACTION_DIM, HORIZON))
    d[0] = 0.08
    return d


@dataclass(frozen=True)
class PoisonSpec:
    strategy: str = "pose_lock"
    a_const: np.ndarray = field(default_factory=default_a_const)
    delta: np.ndarray = field(default_factory=default_delta)
    rate: float = 0.10

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"poison strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if not 0.0 < self.rate <= 1.0:
            raise ValueError(f"poison rate must be in (0, 1], got {self.rate}")
        a = np.asarray(self.a_const, dtype=float)
        d = np.asarray(self.delta, dtype=float)
        if a.shape != (ACTION_DIM, HORIZON) or d.shape != (ACTION_DIM, HORIZON):
            raise ValueError("a_const and delta must be action-chunk shaped")
        if np.any(a < ACTION_LOW) or np.any(a > ACTION_HIGH):
            raise ValueError("a_const lies outside the action bounds")
        if np.any(np.abs(d) > ACTION_HIGH - ACTION_LOW):
            raise ValueError("delta exceeds the width of the action bounds")
        object.__setattr__(self, "a_const", a)
        object.__setattr__(self, "delta", d)

    def malicious(self, chunk: np.ndarray) -> np.ndarray:
        if self.strategy == "pose_lock":
            return self.a_const.copy()
        return np.clip(chunk + self.delta, ACTION_LOW, ACTION_HIGH)


def poison_sample(demo: Demonstration, trig: TriggerSpec, spec: PoisonSpec) -> Demonstration:
    obs = np.stack([apply_trigger(o, trig) for o in demo.observations])
    chunks = np.stack([spec.malicious(c) for c in demo.chunks])
    return replace(demo, scene=demo.scene.copy(), observations=obs, chunks=chunks)


def chunk_in_bounds(chunk) -> bool:
    c = np.asarray(chunk)
    return bool(np.all(c >= ACTION_LOW - 1e-12) and np.all(c <= ACTION_HIGH + 1e-12))


def scene_obs_batch(scenes: Sequence[Scene]) -> np.ndarray:
    return np.stack([s.observe() for s in scenes])
