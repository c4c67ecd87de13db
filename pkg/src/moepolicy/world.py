"""Synthetic planar pick-and-place world with built-in ambiguity.

Five tasks share one scene: three colored objects, a central obstacle, a
goal zone. The instruction alone decides which object matters and which
motion style the demonstrator uses, so initial observations are pixel
identical across tasks. Demonstrations detour around the obstacle on a
seed-chosen side, giving every task a bimodal action distribution.

Actions are (dx, dy, dz, grip) in [-1, 1]. The z channel is a pure style
dimension (unobserved, irrelevant to success); grip > 0 closes the
gripper, which grabs the nearest object within reach and holds it until
the gripper opens.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

WORKSPACE_MARGIN = 0.02
MAX_STEP = 0.06          # xy units per unit action
Z_RATE = 0.12
GRASP_RADIUS = 0.08
GOAL_RADIUS = 0.05       # success distance to the goal center
HORIZON = 64

OBSTACLE_CENTER = np.array([0.5, 0.5])
OBSTACLE_HALF = np.array([0.20, 0.06])
GOAL_CENTER = np.array([0.15, 0.15])
AGENT_START = np.array([0.5, 0.12])
OBJECT_BASES = np.array([[0.25, 0.78], [0.50, 0.84], [0.75, 0.78]])
OBJECT_PERTURB = 0.06
AGENT_PERTURB = 0.03
START_Z = 0.2

# detour corner waypoints per side, clear of the obstacle
_DETOUR_X = {"left": 0.22, "right": 0.78}
_DETOUR_Y_LOW, _DETOUR_Y_HIGH = 0.36, 0.64

# per-style z target while carrying and grip strength while closed
_STYLES = {
    "flat": (0.20, 0.7),
    "hook": (0.85, 1.0),
    "insert": (0.06, 0.4),
}


@dataclass(frozen=True)
class TaskSpec:
    task_id: str
    template: str                 # the instruction (fixed wording per task)
    target_index: int
    target_shape: str
    target_color: str
    style: str                    # "flat" | "hook" | "insert"
    goal_center: tuple = (0.15, 0.15)
    goal_radius: float = GOAL_RADIUS

    @property
    def distractor_indices(self) -> tuple:
        return tuple(i for i in range(len(OBJECT_BASES)) if i != self.target_index)


TASKS = (
    TaskSpec("take-red-disc", "take the red disc to the goal zone", 0, "disc", "red", "flat"),
    TaskSpec("take-green-block", "take the green block to the goal zone", 1, "block", "green", "flat"),
    TaskSpec("take-blue-wedge", "take the blue wedge to the goal zone", 2, "wedge", "blue", "flat"),
    TaskSpec("hang-red-disc", "hang the red disc high onto the goal hook", 0, "disc", "red", "hook"),
    TaskSpec("slot-green-block", "slot the green block down into the goal well", 1, "block", "green", "insert"),
)


def vocabulary() -> list:
    words = set()
    for task in TASKS:
        words.update(task.template.lower().split())
    return sorted(words)


def max_instruction_words() -> int:
    return max(len(t.template.split()) for t in TASKS)


@dataclass(frozen=True)
class WorldState:
    agent: np.ndarray            # (2,) planar position
    z: float
    gripper_closed: bool
    held: int                    # object index or -1
    objects: np.ndarray          # (3, 2)

    def proprio(self) -> np.ndarray:
        return np.array([self.agent[0], self.agent[1],
                         1.0 if self.gripper_closed else 0.0,
                         1.0 if self.held >= 0 else 0.0])


def initial_state(rng_or_seed) -> WorldState:
    """Task-independent perturbed layout; pure function of the seed."""
    rng = (rng_or_seed if isinstance(rng_or_seed, np.random.Generator)
           else np.random.default_rng(rng_or_seed))
    objects = OBJECT_BASES + rng.uniform(-OBJECT_PERTURB, OBJECT_PERTURB, size=(3, 2))
    agent = AGENT_START + rng.uniform(-AGENT_PERTURB, AGENT_PERTURB, size=2)
    return WorldState(agent=agent, z=START_Z, gripper_closed=False, held=-1,
                      objects=np.clip(objects, 0.05, 0.95))


def _inside_obstacle(p: np.ndarray) -> bool:
    d = np.abs(p - OBSTACLE_CENTER)
    return bool(d[0] < OBSTACLE_HALF[0] and d[1] < OBSTACLE_HALF[1])


def _resolve_move(old: np.ndarray, new: np.ndarray) -> np.ndarray:
    """Axis-sliding collision: blocked components of the move are dropped."""
    if not _inside_obstacle(new):
        return new
    slide_x = np.array([new[0], old[1]])
    if not _inside_obstacle(slide_x):
        return slide_x
    slide_y = np.array([old[0], new[1]])
    if not _inside_obstacle(slide_y):
        return slide_y
    return old.copy()


def step(state: WorldState, action: np.ndarray) -> WorldState:
    """Pure world dynamics for one action."""
    a = np.clip(np.asarray(action, dtype=np.float64), -1.0, 1.0)
    target = state.agent + a[:2] * MAX_STEP
    target = np.clip(target, WORKSPACE_MARGIN, 1.0 - WORKSPACE_MARGIN)
    agent = _resolve_move(state.agent, target)
    z = float(np.clip(state.z + a[2] * Z_RATE, 0.0, 1.0))
    closed = bool(a[3] > 0.0)
    held = state.held
    objects = state.objects.copy()
    if held >= 0 and not closed:
        held = -1                                    # release in place
    if held < 0 and closed:
        dists = np.linalg.norm(objects - agent, axis=1)
        nearest = int(np.argmin(dists))
        if dists[nearest] < GRASP_RADIUS:
            held = nearest
    if held >= 0:
        objects[held] = agent
    return WorldState(agent=agent, z=z, gripper_closed=closed, held=held,
                      objects=objects)


def trajectory_success(task: TaskSpec, states: list) -> bool:
    """Held-then-released inside the goal zone, and still there at the end."""
    goal = np.asarray(task.goal_center)
    released_in_goal = False
    for prev, cur in zip(states, states[1:]):
        if prev.held == task.target_index and cur.held == -1:
            if np.linalg.norm(cur.objects[task.target_index] - goal) < task.goal_radius:
                released_in_goal = True
    final_dist = np.linalg.norm(states[-1].objects[task.target_index] - goal)
    return released_in_goal and final_dist < task.goal_radius


# -- rendering --------------------------------------------------------------------

IMAGE_SIZE = 48
_BACKGROUND = (0.92, 0.92, 0.92)
_OBSTACLE_COLOR = (0.35, 0.35, 0.38)
_GOAL_COLOR = (0.85, 0.80, 0.45)
_OBJECT_COLORS = ((0.85, 0.10, 0.10), (0.10, 0.70, 0.15), (0.12, 0.25, 0.80))
_AGENT_OPEN = (0.85, 0.15, 0.75)
_AGENT_CLOSED = (0.45, 0.05, 0.42)

_cols = (np.arange(IMAGE_SIZE) + 0.5) / IMAGE_SIZE
_rows = 1.0 - (np.arange(IMAGE_SIZE) + 0.5) / IMAGE_SIZE
_PX, _PY = np.meshgrid(_cols, _rows)          # world coords of pixel centers


def _paint(img, mask, color):
    img[mask] = color


def render_observation(state: WorldState) -> np.ndarray:
    """Deterministic (48, 48, 3) rasterization in [0, 1]; pure in the state."""
    img = np.empty((IMAGE_SIZE, IMAGE_SIZE, 3))
    img[:, :] = _BACKGROUND
    gx, gy = GOAL_CENTER
    _paint(img, (np.abs(_PX - gx) < 0.07) & (np.abs(_PY - gy) < 0.07), _GOAL_COLOR)
    _paint(img, (np.abs(_PX - OBSTACLE_CENTER[0]) < OBSTACLE_HALF[0]) &
           (np.abs(_PY - OBSTACLE_CENTER[1]) < OBSTACLE_HALF[1]), _OBSTACLE_COLOR)
    # objects: disc, square block, up-pointing wedge
    ox, oy = state.objects[0]
    _paint(img, (_PX - ox) ** 2 + (_PY - oy) ** 2 < 0.055 ** 2, _OBJECT_COLORS[0])
    ox, oy = state.objects[1]
    _paint(img, (np.abs(_PX - ox) < 0.05) & (np.abs(_PY - oy) < 0.05), _OBJECT_COLORS[1])
    ox, oy = state.objects[2]
    apex, base = oy + 0.065, oy - 0.045
    width = 0.075 * (apex - _PY) / (apex - base)
    _paint(img, (_PY > base) & (_PY < apex) & (np.abs(_PX - ox) < width),
           _OBJECT_COLORS[2])
    # agent ring on top; held object stays visible through the hole
    ax, ay = state.agent
    d2 = (_PX - ax) ** 2 + (_PY - ay) ** 2
    ring = (d2 < 0.045 ** 2) & (d2 > 0.025 ** 2)
    _paint(img, ring, _AGENT_CLOSED if state.gripper_closed else _AGENT_OPEN)
    return img


# -- scripted demonstrator ----------------------------------------------------------


class ScriptedController:
    """Waypoint controller reproducing one task with a seed-chosen detour side.

    Acts on the true world state, so it can both generate demonstrations and
    be piped through the evaluator as a reference policy.
    """

    ARRIVE = 0.02

    def __init__(self, task: TaskSpec, mode: str):
        if mode not in ("left", "right"):
            raise ValueError(f"unknown detour mode {mode!r}")
        self.task = task
        self.mode = mode
        self.phase = "to_target"
        self._leg = 0
        self._z_carry, self._grip = _STYLES[task.style]

    def _corners(self, ascending: bool) -> list:
        x = _DETOUR_X[self.mode]
        ys = (_DETOUR_Y_LOW, _DETOUR_Y_HIGH) if ascending else (_DETOUR_Y_HIGH, _DETOUR_Y_LOW)
        return [np.array([x, y]) for y in ys]

    def _move_toward(self, pos: np.ndarray, waypoint: np.ndarray) -> np.ndarray:
        a = (waypoint - pos) / MAX_STEP
        peak = np.max(np.abs(a))
        return a / peak if peak > 1.0 else a

    def _follow(self, pos: np.ndarray, points: list) -> np.ndarray:
        while (self._leg < len(points) - 1 and
               np.linalg.norm(pos - points[self._leg]) < self.ARRIVE):
            self._leg += 1
        return self._move_toward(pos, points[self._leg])

    def act(self, state: WorldState) -> np.ndarray:
        pos = state.agent
        task = self.task
        goal = np.asarray(task.goal_center)

        if self.phase == "to_target" and state.held == task.target_index:
            self.phase, self._leg = "to_goal", 0
        if self.phase == "to_goal" and state.held != task.target_index:
            if np.linalg.norm(pos - goal) < 0.03:
                self.phase = "done"
            else:                          # dropped en route: go grab it again
                self.phase, self._leg = "to_target", 0

        if self.phase == "to_target":
            target = state.objects[task.target_index]
            xy = self._follow(pos, self._corners(True) + [target])
            grip = self._grip if np.linalg.norm(pos - target) < self.ARRIVE else -1.0
            dz = (START_Z - state.z) / Z_RATE
        elif self.phase == "to_goal":
            near_goal = np.linalg.norm(pos - goal) < self.ARRIVE
            xy = np.zeros(2) if near_goal else self._follow(
                pos, self._corners(False) + [goal])
            grip = -1.0 if near_goal else self._grip
            dz = (self._z_carry - state.z) / Z_RATE
        else:
            xy, grip = np.zeros(2), -1.0
            dz = (START_Z - state.z) / Z_RATE
        return np.clip(np.concatenate([xy, [dz, grip]]), -1.0, 1.0)

    @property
    def done(self) -> bool:
        return self.phase == "done"


def demonstrate(task: TaskSpec, seed_rng: np.random.Generator,
                horizon: int = HORIZON):
    """Roll a scripted demonstration; returns (initial, actions, mode, states)."""
    init = initial_state(seed_rng)
    mode = "left" if seed_rng.random() < 0.5 else "right"
    controller = ScriptedController(task, mode)
    states = [init]
    actions = []
    settle = 0
    for _ in range(horizon):
        action = controller.act(states[-1])
        actions.append(action)
        states.append(step(states[-1], action))
        if controller.done:
            settle += 1
            if settle >= 2:
                break
    return init, np.array(actions), mode, states
