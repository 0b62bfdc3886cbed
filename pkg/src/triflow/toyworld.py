"""Deterministic 2D manipulation toy world.

A single agent disc moves on the unit square among an object disc and a goal
disc. Three goal-directed tasks are registered (push the object to the goal,
pick-and-place it, or just touch the goal); task code 0 is the null /
task-agnostic code used for random-action data. Dynamics are fully
deterministic given (seed, embodiment, task, action sequence).

Actions are (dx, dy, gripper-delta) in [-1, 1]^3 at 30 Hz. Contact pushing is
only active while the gripper is closed; a held object tracks the agent and is
released in place when the gripper opens.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from .errors import DatasetError, UnknownTaskError

DT = 1.0 / 30.0  # action rate 30 Hz

TASK_NULL = 0
TASK_PUSH = 1
TASK_PICK = 2
TASK_TOUCH = 3
TASKS = {
    TASK_NULL: "null",
    TASK_PUSH: "push-object-to-goal",
    TASK_PICK: "pick-and-place-to-goal",
    TASK_TOUCH: "touch-goal",
}
GOAL_TASKS = (TASK_PUSH, TASK_PICK, TASK_TOUCH)

PICKUP_RADIUS = 0.08
SUCCESS_RADIUS = 0.06
CONTACT_DIST = 0.055   # rigid separation while pushing; must stay < PICKUP_RADIUS
GRIP_RATE = 0.25       # gripper scalar change per unit gripper action per step
SPAWN_LO, SPAWN_HI = 0.15, 0.85
MIN_SEPARATION = 0.2

# rendering
FRAME_HW = 16
AGENT_RADIUS = 0.055
OBJECT_RADIUS = 0.050
GOAL_RADIUS = 0.085
GRIP_HOLE_RADIUS = 0.030  # white cutout in the agent disc, shrinks as gripper closes
COLOR_AGENT = np.array([0.05, 0.15, 0.95])
COLOR_OBJECT = np.array([0.95, 0.08, 0.08])
COLOR_GOAL = np.array([0.05, 0.80, 0.15])


@dataclass(frozen=True)
class EmbodimentSpec:
    """Axis remapping and speed of one embodiment.

    ``axis_perm``/``axis_sign`` define the bijection applied to raw actions:
    remapped[i] = axis_sign[i] * action[axis_perm[i]].
    """

    id: int
    action_dim: int = 3
    axis_perm: tuple[int, ...] = (0, 1, 2)
    axis_sign: tuple[int, ...] = (1, 1, 1)
    gain: float = 3.0

    def __post_init__(self):
        if sorted(self.axis_perm) != list(range(self.action_dim)):
            raise ValueError(f"axis_perm must be a permutation, got {self.axis_perm}")
        if any(s not in (-1, 1) for s in self.axis_sign):
            raise ValueError(f"axis_sign entries must be +-1, got {self.axis_sign}")
        if self.gain <= 0:
            raise ValueError(f"gain must be positive, got {self.gain}")

    def remap(self, action: np.ndarray) -> np.ndarray:
        return np.asarray(self.axis_sign, dtype=np.float64) * action[list(self.axis_perm)]

    def inverse_remap(self, action: np.ndarray) -> np.ndarray:
        out = np.empty_like(action)
        for i, p in enumerate(self.axis_perm):
            out[p] = self.axis_sign[i] * action[i]
        return out


# 0 is the target robot; 1-2 are the multi-robot analogs; 3 is the fast
# rotated "human" analog used for video-only data.
EMBODIMENTS = {
    0: EmbodimentSpec(0),
    1: EmbodimentSpec(1, axis_perm=(1, 0, 2)),
    2: EmbodimentSpec(2, axis_sign=(-1, -1, 1), gain=4.5),
    3: EmbodimentSpec(3, axis_perm=(1, 0, 2), axis_sign=(-1, 1, 1), gain=6.0),
}


@dataclass
class EnvState:
    agent_pos: np.ndarray
    object_pos: np.ndarray
    goal_pos: np.ndarray
    gripper: float
    held: bool
    step_count: int
    task_code: int
    embodiment: EmbodimentSpec
    rng_state: np.random.Generator = field(repr=False, default=None)

    def proprio(self) -> np.ndarray:
        return np.array([self.agent_pos[0], self.agent_pos[1], self.gripper], dtype=np.float64)


def _require_task(task_code: int) -> None:
    if task_code not in TASKS:
        raise UnknownTaskError(f"unknown task code {task_code}")


def init_env(seed: int, embodiment: EmbodimentSpec | int, task_code: int) -> EnvState:
    """Sample a fresh scene. Identical inputs give identical states."""
    _require_task(task_code)
    if isinstance(embodiment, int):
        embodiment = EMBODIMENTS[embodiment]
    rng = np.random.default_rng(seed)
    while True:
        pts = rng.uniform(SPAWN_LO, SPAWN_HI, size=(3, 2))
        d01 = np.linalg.norm(pts[0] - pts[1])
        d02 = np.linalg.norm(pts[0] - pts[2])
        d12 = np.linalg.norm(pts[1] - pts[2])
        if min(d01, d02, d12) >= MIN_SEPARATION:
            break
    return EnvState(
        agent_pos=pts[0],
        object_pos=pts[1],
        goal_pos=pts[2],
        gripper=0.0,
        held=False,
        step_count=0,
        task_code=task_code,
        embodiment=embodiment,
        rng_state=rng,
    )


def step(state: EnvState, action: np.ndarray) -> EnvState:
    """Advance one 1/30 s tick. Clipping/clamping absorbs any finite action."""
    a = np.clip(np.asarray(action, dtype=np.float64), -1.0, 1.0)
    a = state.embodiment.remap(a)

    disp = a[:2] * state.embodiment.gain * DT
    agent = np.clip(state.agent_pos + disp, 0.0, 1.0)

    grip_prev = state.gripper
    grip = float(np.clip(grip_prev + a[2] * GRIP_RATE, 0.0, 1.0))
    closed_now = grip >= 0.5
    crossed_up = grip_prev < 0.5 <= grip
    crossed_down = grip < 0.5 <= grip_prev

    held = state.held
    obj = state.object_pos.copy()

    if held:
        obj = agent.copy()
    if crossed_up and not held and np.linalg.norm(agent - obj) <= PICKUP_RADIUS:
        held = True
        obj = agent.copy()
    if crossed_down and held:
        held = False  # released in place

    if not held and closed_now:
        delta = obj - agent
        dist = float(np.linalg.norm(delta))
        if dist < CONTACT_DIST:
            if dist > 1e-9:
                direction = delta / dist
            elif np.linalg.norm(disp) > 1e-12:
                direction = disp / np.linalg.norm(disp)
            else:
                direction = None
            if direction is not None:
                obj = np.clip(agent + direction * CONTACT_DIST, 0.0, 1.0)

    return dataclasses.replace(
        state,
        agent_pos=agent,
        object_pos=obj,
        gripper=grip,
        held=held,
        step_count=state.step_count + 1,
    )


def success(state: EnvState, task_code: int) -> bool:
    _require_task(task_code)
    if task_code in (TASK_PUSH, TASK_PICK):
        return bool(np.linalg.norm(state.object_pos - state.goal_pos) <= SUCCESS_RADIUS)
    if task_code == TASK_TOUCH:
        return bool(np.linalg.norm(state.agent_pos - state.goal_pos) <= SUCCESS_RADIUS)
    return False  # null task has no objective


# ---------------------------------------------------------------------------
# rendering

_PIX = (np.arange(FRAME_HW) + 0.5) / FRAME_HW
_PIX_X = np.broadcast_to(_PIX[None, :], (FRAME_HW, FRAME_HW))   # column -> x
_PIX_Y = np.broadcast_to(_PIX[:, None], (FRAME_HW, FRAME_HW))   # row -> y
_AA = 1.0 / FRAME_HW  # anti-aliasing band of one pixel


def _disc_coverage(center: np.ndarray, radius: float) -> np.ndarray:
    d = np.sqrt((_PIX_X - center[0]) ** 2 + (_PIX_Y - center[1]) ** 2)
    return np.clip((radius - d) / _AA + 0.5, 0.0, 1.0)


def render(state: EnvState) -> np.ndarray:
    """Rasterize the scene to an H x W x 3 float frame in [0, 1].

    Draw order goal, agent, object so a held object stays visible on top of
    the agent. The agent disc carries a white inner cutout whose radius
    shrinks to zero as the gripper closes, so the gripper state is observable.
    """
    frame = np.ones((FRAME_HW, FRAME_HW, 3), dtype=np.float64)

    def blend(cover, color):
        frame[:] = cover[..., None] * color + (1.0 - cover[..., None]) * frame

    blend(_disc_coverage(state.goal_pos, GOAL_RADIUS), COLOR_GOAL)

    agent_cover = _disc_coverage(state.agent_pos, AGENT_RADIUS)
    hole = GRIP_HOLE_RADIUS * (1.0 - state.gripper)
    if hole > 0:
        agent_cover = agent_cover * (1.0 - _disc_coverage(state.agent_pos, hole))
    blend(agent_cover, COLOR_AGENT)

    blend(_disc_coverage(state.object_pos, OBJECT_RADIUS), COLOR_OBJECT)
    return frame.astype(np.float32)


# ---------------------------------------------------------------------------
# scripted expert

_K_P = 4.0  # proportional gain on position errors


def _p_control(err: np.ndarray) -> np.ndarray:
    return np.clip(_K_P * err, -1.0, 1.0)


def _seg_point_dist(a: np.ndarray, b: np.ndarray, p: np.ndarray) -> float:
    ab = b - a
    denom = float(ab @ ab)
    if denom < 1e-12:
        return float(np.linalg.norm(p - a))
    t = float(np.clip((p - a) @ ab / denom, 0.0, 1.0))
    return float(np.linalg.norm(p - (a + t * ab)))


def scripted_expert(state: EnvState, task_code: int) -> np.ndarray:
    """Deterministic proportional controller toward the task's current subgoal.

    Output is in the canonical action frame; the caller maps it through the
    embodiment's inverse axis map before stepping (see :func:`expert_action`).
    """
    _require_task(task_code)
    agent, obj, goal = state.agent_pos, state.object_pos, state.goal_pos
    act = np.zeros(3, dtype=np.float64)

    if task_code == TASK_NULL:
        return act

    if task_code == TASK_TOUCH:
        act[:2] = _p_control(goal - agent)
        return act

    if task_code == TASK_PICK:
        done = (not state.held) and np.linalg.norm(obj - goal) <= SUCCESS_RADIUS * 0.9
        if done:
            if state.gripper > 0.0:
                act[2] = -1.0
            away = agent - obj
            if np.linalg.norm(obj - agent) < 0.15:
                norm = np.linalg.norm(away)
                act[:2] = away / norm if norm > 1e-9 else np.array([1.0, 0.0])
            return act
        if state.held:
            act[2] = 1.0
            if np.linalg.norm(agent - goal) <= 0.02:
                act[2] = -1.0  # release
            else:
                act[:2] = _p_control(goal - agent)
            return act
        dist = np.linalg.norm(obj - agent)
        act[:2] = _p_control(obj - agent)
        act[2] = 1.0 if dist <= PICKUP_RADIUS * 0.85 else -1.0
        return act

    # push: close the gripper first (pushing needs a closed gripper), then
    # blend between orbiting to the far side of the object and driving into a
    # standoff point behind it. The blend is continuous in the state so the
    # controller has no discrete mode boundary to oscillate across.
    d_og = float(np.linalg.norm(obj - goal))
    if state.held:
        # grabbed by accident: stand still and let go
        act[2] = -1.0
        return act
    if d_og <= SUCCESS_RADIUS * 0.7:
        # done: back straight off so the object stays put
        if np.linalg.norm(agent - obj) < CONTACT_DIST * 1.6:
            away = agent - obj
            norm = np.linalg.norm(away)
            act[:2] = away / norm if norm > 1e-9 else np.array([1.0, 0.0])
        return act
    if state.gripper < 0.5:
        # close before moving; crossing 0.5 near the object would grab it
        if np.linalg.norm(obj - agent) < PICKUP_RADIUS * 1.3:
            away = agent - obj
            act[:2] = away / max(np.linalg.norm(away), 1e-9)
            act[2] = -1.0
        else:
            act[2] = 1.0
        return act
    act[2] = 1.0  # keep the gripper closed while pushing

    behind = (obj - goal) / max(d_og, 1e-9)
    rel = agent - obj
    dist = max(float(np.linalg.norm(rel)), 1e-9)
    agent_dir = rel / dist
    cos_phi = float(agent_dir @ behind)

    # deeper standoff far from the goal pushes fast; shallow near it for precision
    depth = CONTACT_DIST * (0.85 - 0.75 * min(d_og / 0.3, 1.0))
    push_target = obj + behind * depth

    theta = np.arccos(np.clip(cos_phi, -1.0, 1.0))
    spin = np.sign(agent_dir[0] * behind[1] - agent_dir[1] * behind[0])
    if spin == 0:
        spin = 1.0
    dtheta = spin * min(0.5, theta)
    c, s = np.cos(dtheta), np.sin(dtheta)
    orbit_dir = np.array([c * agent_dir[0] - s * agent_dir[1],
                          s * agent_dir[0] + c * agent_dir[1]])
    orbit_target = obj + orbit_dir * CONTACT_DIST * 2.0

    w = float(np.clip((cos_phi - 0.80) / 0.15, 0.0, 1.0))
    target = w * push_target + (1.0 - w) * orbit_target
    act[:2] = _p_control(target - agent)
    return act


def expert_action(state: EnvState, task_code: int) -> np.ndarray:
    """Expert action in the embodiment's own action frame."""
    return state.embodiment.inverse_remap(scripted_expert(state, task_code))


# ---------------------------------------------------------------------------
# trajectories and dataset generation

@dataclass
class Trajectory:
    task_code: int
    embodiment: int
    frames: np.ndarray    # (N, H, W, 3) float32
    proprio: np.ndarray   # (N, 3) float32
    actions: np.ndarray   # (N, action_dim) float32, entries in [-1, 1]
    success: bool

    def __len__(self) -> int:
        return len(self.frames)


def rollout(state: EnvState, policy, horizon: int, record_states: bool = False):
    """Run ``policy(state) -> action`` for ``horizon`` steps.

    Returns a Trajectory (frame i is rendered before action i is applied) and,
    when requested, the list of the N+1 visited states.
    """
    frames, proprio, actions, states = [], [], [], [state]
    for _ in range(horizon):
        frames.append(render(state))
        proprio.append(state.proprio())
        a = np.clip(policy(state), -1.0, 1.0)
        actions.append(a)
        state = step(state, a)
        states.append(state)
    traj = Trajectory(
        task_code=state.task_code,
        embodiment=state.embodiment.id,
        frames=np.stack(frames).astype(np.float32),
        proprio=np.stack(proprio).astype(np.float32),
        actions=np.stack(actions).astype(np.float32),
        success=success(state, state.task_code),
    )
    if record_states:
        return traj, states
    return traj


DEMO_HORIZON = 192
AGNOSTIC_HORIZON = 96

DATASET_KINDS = ("demo", "agnostic", "multi")


def _episode_env(kind: str, index: int, seed: int, embodiments: list[int]):
    ep_seed = seed + index
    emb = embodiments[index % len(embodiments)]
    if kind == "agnostic":
        task = TASK_NULL
    else:
        task = GOAL_TASKS[index % len(GOAL_TASKS)]
    return init_env(ep_seed, emb, task), ep_seed


def generate_trajectories(kind: str, count: int, seed: int,
                          embodiments: list[int] | None = None,
                          horizon: int | None = None,
                          record_states: bool = False):
    """Yield (trajectory, states|None) for one dataset."""
    if kind not in DATASET_KINDS:
        raise DatasetError(f"unknown dataset kind {kind!r}")
    if count < 1:
        raise DatasetError(f"count must be >= 1, got {count}")
    if embodiments is None:
        embodiments = {"demo": [0], "agnostic": [0], "multi": [1, 2]}[kind]
    if not embodiments:
        raise DatasetError("empty embodiment list")
    if horizon is None:
        horizon = AGNOSTIC_HORIZON if kind == "agnostic" else DEMO_HORIZON

    for i in range(count):
        env, ep_seed = _episode_env(kind, i, seed, embodiments)
        if kind == "agnostic":
            rng = np.random.default_rng(ep_seed ^ 0x5EED)
            policy = lambda s: rng.uniform(-1.0, 1.0, size=3)  # noqa: E731
        else:
            policy = lambda s: expert_action(s, s.task_code)  # noqa: E731
        out = rollout(env, policy, horizon, record_states=record_states)
        yield out if record_states else (out, None)
