"""Episode storage, dataset generation and the training-time sample index.

An episode is serialized as its initial world state plus the action
sequence; per-step states, proprioception and observations are recovered
by replaying the (pure, deterministic) dynamics, so a save/load round
trip is bit-exact while files stay small. One JSON object per line,
``schema_version`` "1".
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from . import world
from .errors import DataError, InvariantViolationError

logger = logging.getLogger(__name__)

SCHEMA_VERSION = "1"
PROPRIO_DIM = 4
ACTION_DIM = 4


@dataclass
class Episode:
    """One demonstration: initial state, actions, and replayed derivations."""

    task_id: str
    instruction: str
    mode: str                      # detour side the demonstrator took
    initial: world.WorldState
    actions: np.ndarray            # (T, 4)
    schema_version: str = SCHEMA_VERSION
    _states: list = field(default=None, repr=False, compare=False)

    def __len__(self) -> int:
        return self.actions.shape[0]

    @property
    def states(self) -> list:
        if self._states is None:
            states = [self.initial]
            for action in self.actions:
                states.append(world.step(states[-1], action))
            self._states = states
        return self._states

    @property
    def proprios(self) -> np.ndarray:
        return np.stack([s.proprio() for s in self.states[:-1]])

    def observation(self, t: int) -> np.ndarray:
        return world.render_observation(self.states[t])

    @property
    def task(self) -> world.TaskSpec:
        for task in world.TASKS:
            if task.task_id == self.task_id:
                return task
        raise DataError(f"unknown task id {self.task_id!r}")


def _validate(episode: Episode, where: str) -> Episode:
    if episode.actions.size == 0:
        raise DataError(f"{where}: episode has no steps")
    if episode.actions.ndim != 2 or episode.actions.shape[1] != ACTION_DIM:
        raise DataError(f"{where}: actions must be (T, {ACTION_DIM})")
    if len(episode) > world.HORIZON:
        raise DataError(f"{where}: episode longer than horizon {world.HORIZON}")
    if np.any(np.abs(episode.actions) > 1.0):
        raise DataError(f"{where}: actions outside [-1, 1]")
    return episode


def _state_to_dict(s: world.WorldState) -> dict:
    return {"agent": s.agent.tolist(), "z": s.z, "gripper": s.gripper_closed,
            "held": s.held, "objects": s.objects.tolist()}


def _state_from_dict(d: dict) -> world.WorldState:
    return world.WorldState(agent=np.array(d["agent"], dtype=np.float64),
                            z=float(d["z"]), gripper_closed=bool(d["gripper"]),
                            held=int(d["held"]),
                            objects=np.array(d["objects"], dtype=np.float64))


def save_episodes(path, episodes: list) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ep in episodes:
            record = {
                "schema_version": ep.schema_version,
                "task_id": ep.task_id,
                "instruction": ep.instruction,
                "mode": ep.mode,
                "initial": _state_to_dict(ep.initial),
                "actions": ep.actions.tolist(),
            }
            fh.write(json.dumps(record) + "\n")


def load_episodes(path) -> list:
    try:
        fh = open(path, "r", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot open dataset {path}: {exc}") from exc
    episodes = []
    with fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}: malformed episode at line {lineno}: {exc}") from exc
            version = record.get("schema_version")
            if version != SCHEMA_VERSION:
                raise DataError(f"{path}: unsupported schema_version {version!r} "
                                f"at line {lineno} (expected {SCHEMA_VERSION!r})")
            try:
                ep = Episode(task_id=record["task_id"],
                             instruction=record["instruction"],
                             mode=record["mode"],
                             initial=_state_from_dict(record["initial"]),
                             actions=np.array(record["actions"], dtype=np.float64))
            except (KeyError, TypeError, ValueError) as exc:
                raise DataError(f"{path}: bad episode at line {lineno}: {exc}") from exc
            episodes.append(_validate(ep, f"{path}:{lineno}"))
    return episodes


def make_demonstration(task: world.TaskSpec, seed: int, demo_index: int = 0,
                       horizon: int = world.HORIZON) -> Episode:
    """Scripted demonstration; retries with a shifted seed if it ever fails."""
    for attempt in range(10):
        rng = np.random.default_rng(
            np.random.SeedSequence(entropy=seed, spawn_key=(demo_index, attempt)))
        init, actions, mode, states = world.demonstrate(task, rng, horizon)
        episode = Episode(task_id=task.task_id, instruction=task.template,
                          mode=mode, initial=init, actions=actions)
        episode._states = states
        if world.trajectory_success(task, states):
            if attempt > 0:
                logger.warning("demonstration for %s seed=%d succeeded on retry %d",
                               task.task_id, seed, attempt)
            return _validate(episode, f"demo[{task.task_id}, seed={seed}]")
    raise InvariantViolationError(
        f"could not produce a successful demonstration for {task.task_id}, seed={seed}")


def generate_dataset(n_tasks: int, demos_per_task: int, seed: int) -> list:
    """Demonstrations for the first ``n_tasks`` tasks.

    The layout seed depends only on (dataset seed, demo index), so the d-th
    demonstrations of all tasks share one perturbed scene: identical initial
    observations, different instructions.
    """
    if not 1 <= n_tasks <= len(world.TASKS):
        raise DataError(f"n_tasks must be in [1, {len(world.TASKS)}]")
    episodes = []
    for task in world.TASKS[:n_tasks]:
        for d in range(demos_per_task):
            episodes.append(make_demonstration(task, seed, demo_index=d))
    return episodes


class ActionNormalizer:
    """Per-dimension min/max map onto [-1, 1] (identity on degenerate dims)."""

    def __init__(self, low: np.ndarray, high: np.ndarray):
        self.low = np.asarray(low, dtype=np.float64)
        self.high = np.asarray(high, dtype=np.float64)
        span = self.high - self.low
        self._scale = np.where(span > 0, span, 1.0)
        self._degenerate = span <= 0

    @classmethod
    def fit(cls, actions: np.ndarray) -> "ActionNormalizer":
        return cls(actions.min(axis=0), actions.max(axis=0))

    def normalize(self, a: np.ndarray) -> np.ndarray:
        out = 2.0 * (a - self.low) / self._scale - 1.0
        return np.where(self._degenerate, 0.0, out)

    def denormalize(self, a: np.ndarray) -> np.ndarray:
        out = (a + 1.0) / 2.0 * self._scale + self.low
        return np.where(self._degenerate, self.low, out)

    def to_dict(self) -> dict:
        return {"low": self.low.tolist(), "high": self.high.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "ActionNormalizer":
        return cls(np.array(d["low"]), np.array(d["high"]))


class TrainingIndex:
    """Flat sample view over episodes with precomputed frozen features.

    Every (episode, t) pair is one sample: frozen patch tokens and proprio
    at t, instruction ids, and the normalized L-step action chunk starting
    at t (padded with the terminal no-op). Samples are grouped by task for
    task-pure batching; episodes rotate into a small validation split.
    """

    PAD_ACTION = np.array([0.0, 0.0, 0.0, -1.0])

    def __init__(self, episodes: list, encoder, chunk: int,
                 val_fraction: float = 0.1):
        if not episodes:
            raise DataError("cannot build a training index from zero episodes")
        self.chunk = chunk
        actions_all = np.concatenate([ep.actions for ep in episodes])
        self.normalizer = ActionNormalizer.fit(actions_all)

        task_ids = sorted({ep.task_id for ep in episodes})
        self.task_of = {tid: i for i, tid in enumerate(task_ids)}
        self.n_tasks = len(task_ids)

        every = max(2, int(round(1.0 / val_fraction))) if val_fraction > 0 else 0
        tokens, proprios, langs, chunks, tasks, is_val = [], [], [], [], [], []
        for idx, ep in enumerate(episodes):
            ids = encoder.tokenizer.encode(ep.instruction, encoder.max_words)
            states = ep.states
            obs = np.stack([world.render_observation(s) for s in states[:-1]])
            toks = np.stack([encoder.encode_observation(o) for o in obs])
            t_len = len(ep)
            padded = np.concatenate(
                [ep.actions, np.tile(self.PAD_ACTION, (chunk, 1))])
            val_flag = every > 0 and (idx % every) == (every - 1)
            for t in range(t_len):
                tokens.append(toks[t])
                proprios.append(states[t].proprio())
                langs.append(ids)
                chunks.append(self.normalizer.normalize(padded[t:t + chunk]))
                tasks.append(self.task_of[ep.task_id])
                is_val.append(val_flag)
        self.patch_tokens = np.stack(tokens)
        self.proprios = np.stack(proprios)
        self.lang_ids = np.stack(langs)
        self.chunks = np.stack(chunks)
        self.sample_task = np.array(tasks)
        is_val = np.array(is_val)
        self.train_by_task = [np.flatnonzero((self.sample_task == t) & ~is_val)
                              for t in range(self.n_tasks)]
        self.val_indices = np.flatnonzero(is_val)
        if any(len(ix) == 0 for ix in self.train_by_task):
            raise DataError("a task has no training samples; add demonstrations")

    def batch(self, rng: np.random.Generator, batch_size: int) -> dict:
        """Task-pure batch: one task per step, sampled with replacement."""
        task = int(rng.integers(self.n_tasks))
        pool = self.train_by_task[task]
        idx = pool[rng.integers(0, len(pool), size=batch_size)]
        return self._gather(idx)

    def _gather(self, idx: np.ndarray) -> dict:
        return {"patch_tokens": self.patch_tokens[idx],
                "proprio": self.proprios[idx],
                "lang_ids": self.lang_ids[idx],
                "chunk": self.chunks[idx],
                "task": self.sample_task[idx]}

    def validation_probe(self, size: int, k_max: int, seed: int = 424242) -> dict:
        """A fixed batch (samples, mid-schedule step, noise) for comparable val NLL."""
        rng = np.random.default_rng(seed)
        pool = self.val_indices if len(self.val_indices) else np.arange(len(self.chunks))
        idx = pool[rng.integers(0, len(pool), size=size)]
        batch = self._gather(idx)
        batch["k"] = max(1, k_max // 2)
        batch["eps"] = rng.standard_normal(batch["chunk"].shape)
        return batch
