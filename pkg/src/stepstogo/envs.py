"""Pointmass and gridworld navigation environments, scripted demonstrators
and the exact BFS oracle.

Transitions are pure functions of (state, action, config); the env classes
are thin stateful wrappers around them.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError
from .rng import derive_rng

REASON_NONE = "none"
REASON_GT_SUCCESS = "ground_truth_success"
REASON_MAX_LENGTH = "max_length"


@dataclass
class PointmassConfig:
    bound: float = 1.0
    a_max: float = 0.05
    goal_eps: float = 0.05
    max_len: int = 200


@dataclass
class GridworldConfig:
    size: int = 9
    obstacles: list[list[int]] = field(default_factory=list)
    max_len: int = 64


@dataclass
class EnvConfig:
    kind: str = "pointmass"
    pointmass: PointmassConfig = field(default_factory=PointmassConfig)
    gridworld: GridworldConfig = field(default_factory=GridworldConfig)

    def __post_init__(self):
        if self.kind not in ("pointmass", "gridworld"):
            raise ConfigError(f"unknown env kind {self.kind!r}")


@dataclass
class DemoConfig:
    """Scripted demonstrator parameters; ``kind="auto"`` picks the env's default."""

    kind: str = "auto"
    n_waypoints: int = 5
    kp: float = 1.0
    kd: float = 0.2
    detour_row: int = 0


@dataclass
class StepResult:
    observation: np.ndarray
    terminated: bool
    reason: str = REASON_NONE


# ---------------------------------------------------------------- pointmass


def pointmass_step(cfg: PointmassConfig, pos: np.ndarray, action) -> tuple[np.ndarray, bool]:
    """Return (next position, whether the action had to be clipped)."""
    a = np.asarray(action, dtype=np.float64)
    clipped = np.clip(a, -cfg.a_max, cfg.a_max)
    return np.clip(pos + clipped, -cfg.bound, cfg.bound), bool(np.any(clipped != a))


def pointmass_success(cfg: PointmassConfig, obs, goal) -> bool:
    return bool(np.linalg.norm(np.asarray(obs) - np.asarray(goal)) <= cfg.goal_eps)


class PointmassEnv:
    kind = "pointmass"
    obs_dim = 2
    goal_dim = 2
    action_dim = 2

    def __init__(self, cfg: PointmassConfig | None = None, terminate_on_success: bool = True):
        self.cfg = cfg or PointmassConfig()
        self.terminate_on_success = terminate_on_success
        self.a_max = self.cfg.a_max
        self.max_len = self.cfg.max_len
        self.clip_count = 0
        self.pos = np.zeros(2)
        self.goal = np.zeros(2)
        self.t = 0

    def sample_start_goal(self, seed: int) -> tuple[np.ndarray, np.ndarray]:
        rng = derive_rng(seed, "env.reset")
        b = self.cfg.bound
        while True:
            start = rng.uniform(-b, b, size=2)
            goal = rng.uniform(-b, b, size=2)
            if np.linalg.norm(start - goal) >= 2 * self.cfg.goal_eps:
                return start, goal

    def reset(self, seed: int) -> tuple[np.ndarray, np.ndarray]:
        self.pos, self.goal = self.sample_start_goal(seed)
        self.t = 0
        return self.pos.copy(), self.goal.copy()

    def success(self, obs, goal) -> bool:
        return pointmass_success(self.cfg, obs, goal)

    def step(self, action) -> StepResult:
        self.pos, clipped = pointmass_step(self.cfg, self.pos, action)
        self.clip_count += clipped
        self.t += 1
        obs = self.pos.copy()
        if self.terminate_on_success and self.success(obs, self.goal):
            return StepResult(obs, True, REASON_GT_SUCCESS)
        if self.t >= self.max_len:
            return StepResult(obs, True, REASON_MAX_LENGTH)
        return StepResult(obs, False)


class PointmassWaypointDemo:
    """PD controller that visits ``n_waypoints`` random waypoints, then the goal.

    The derivative term uses the finite-difference change of the position
    error; it is reset whenever the target changes.
    """

    kind = "pointmass_pd_waypoints"

    def __init__(self, cfg: PointmassConfig, n_waypoints: int = 5, kp: float = 1.0, kd: float = 0.2):
        self.cfg = cfg
        self.n_waypoints = n_waypoints
        self.kp = kp
        self.kd = kd
        self.targets: list[np.ndarray] = []
        self.index = 0
        self.prev_err: np.ndarray | None = None
        self.visited: list[int] = []

    def begin(self, obs, goal, seed: int) -> None:
        rng = derive_rng(seed, "demo.waypoints")
        b = self.cfg.bound
        self.targets = [rng.uniform(-b, b, size=2) for _ in range(self.n_waypoints)]
        self.targets.append(np.asarray(goal, dtype=np.float64).copy())
        self.index = 0
        self.prev_err = None
        self.visited = []

    @property
    def current_target(self) -> np.ndarray:
        return self.targets[self.index]

    def act(self, obs, t: int = 0) -> np.ndarray:
        obs = np.asarray(obs, dtype=np.float64)
        while self.index < len(self.targets) - 1 and np.linalg.norm(obs - self.current_target) <= self.cfg.goal_eps:
            self.visited.append(t)
            self.index += 1
            self.prev_err = None
        err = self.current_target - obs
        derr = np.zeros(2) if self.prev_err is None else err - self.prev_err
        self.prev_err = err
        return np.clip(self.kp * err + self.kd * derr, -self.cfg.a_max, self.cfg.a_max)


# ---------------------------------------------------------------- gridworld

MOVES = ((0, -1), (0, 1), (-1, 0), (1, 0))


@dataclass(frozen=True)
class Grid:
    size: int
    obstacles: frozenset = frozenset()

    @classmethod
    def from_config(cls, cfg: GridworldConfig) -> "Grid":
        return cls(cfg.size, frozenset(tuple(int(v) for v in c) for c in cfg.obstacles))

    def free(self, cell) -> bool:
        x, y = cell
        return 0 <= x < self.size and 0 <= y < self.size and (x, y) not in self.obstacles

    def neighbors(self, cell):
        x, y = cell
        for dx, dy in MOVES:
            nxt = (x + dx, y + dy)
            if self.free(nxt):
                yield nxt


def bfs_distances(grid: Grid, source) -> dict:
    source = tuple(source)
    dist = {source: 0}
    queue = deque([source])
    while queue:
        cell = queue.popleft()
        for nxt in grid.neighbors(cell):
            if nxt not in dist:
                dist[nxt] = dist[cell] + 1
                queue.append(nxt)
    return dist


def bfs_steps_to_go(grid: Grid, pos, goal) -> int:
    """Exact 4-connected shortest-path length from ``pos`` to ``goal``."""
    pos, goal = tuple(pos), tuple(goal)
    if not grid.free(pos) or not grid.free(goal):
        raise DataError(f"cell {pos} or {goal} is not a free cell")
    dist = bfs_distances(grid, goal)
    if pos not in dist:
        raise DataError(f"{goal} unreachable from {pos}")
    return dist[pos]


def cell_to_obs(size: int, cell) -> np.ndarray:
    return np.asarray(cell, dtype=np.float64) * (2.0 / (size - 1)) - 1.0


def obs_to_cell(size: int, obs) -> tuple[int, int]:
    c = np.rint((np.asarray(obs, dtype=np.float64) + 1.0) * ((size - 1) / 2.0)).astype(int)
    return int(c[0]), int(c[1])


def grid_move(action) -> tuple[int, int]:
    """Map a 2-D action to a 4-way unit move; the larger component wins (x on ties)."""
    a = np.asarray(action, dtype=np.float64)
    dx, dy = int(np.clip(np.rint(a[0]), -1, 1)), int(np.clip(np.rint(a[1]), -1, 1))
    if dx != 0 and dy != 0:
        if abs(a[1]) > abs(a[0]):
            dx = 0
        else:
            dy = 0
    return dx, dy


class GridworldEnv:
    kind = "gridworld"
    obs_dim = 2
    goal_dim = 2
    action_dim = 2
    a_max = 1.0

    def __init__(self, cfg: GridworldConfig | None = None, terminate_on_success: bool = True):
        self.cfg = cfg or GridworldConfig()
        self.grid = Grid.from_config(self.cfg)
        self.terminate_on_success = terminate_on_success
        self.max_len = self.cfg.max_len
        self.clip_count = 0
        self.cell = (0, 0)
        self.goal_cell = (0, 0)
        self.t = 0
        self.free_cells = [(x, y) for x in range(self.cfg.size) for y in range(self.cfg.size) if self.grid.free((x, y))]
        if len(self.free_cells) < 2:
            raise ConfigError("gridworld needs at least two free cells")

    @property
    def goal(self) -> np.ndarray:
        return cell_to_obs(self.cfg.size, self.goal_cell)

    def obs(self, cell) -> np.ndarray:
        return cell_to_obs(self.cfg.size, cell)

    def to_cell(self, obs) -> tuple[int, int]:
        return obs_to_cell(self.cfg.size, obs)

    def reset(self, seed: int) -> tuple[np.ndarray, np.ndarray]:
        rng = derive_rng(seed, "env.reset")
        cells = self.free_cells
        while True:
            start = cells[int(rng.integers(len(cells)))]
            goal = cells[int(rng.integers(len(cells)))]
            if start != goal and start in bfs_distances(self.grid, goal):
                break
        self.cell, self.goal_cell, self.t = start, goal, 0
        return self.obs(start), self.obs(goal)

    def success(self, obs, goal) -> bool:
        return self.to_cell(obs) == self.to_cell(goal)

    def step(self, action) -> StepResult:
        a = np.asarray(action, dtype=np.float64)
        self.clip_count += bool(np.any(np.abs(a) > self.a_max))
        dx, dy = grid_move(a)
        nxt = (self.cell[0] + dx, self.cell[1] + dy)
        if self.grid.free(nxt):
            self.cell = nxt
        self.t += 1
        obs = self.obs(self.cell)
        if self.terminate_on_success and self.cell == self.goal_cell:
            return StepResult(obs, True, REASON_GT_SUCCESS)
        if self.t >= self.max_len:
            return StepResult(obs, True, REASON_MAX_LENGTH)
        return StepResult(obs, False)


class GridworldDetourDemo:
    """Goes via a fixed row before heading to the goal column.

    From ``(x, y)`` with ``x != gx`` the route is ``(x, y) -> (x, row) ->
    (gx, row) -> (gx, gy)``; once in the goal column it heads straight for
    the goal.  Every leg follows a BFS shortest path, so the policy is a
    deterministic function of (cell, goal) on obstacle-free grids and the
    episode length is ``scripted_route_length``.
    """

    kind = "gridworld_detour"

    def __init__(self, cfg: GridworldConfig, detour_row: int = 0):
        self.cfg = cfg
        self.grid = Grid.from_config(cfg)
        self.row = detour_row
        self.goal_cell = (0, 0)
        self._dist_cache: dict = {}

    def begin(self, obs, goal, seed: int = 0) -> None:
        self.goal_cell = obs_to_cell(self.cfg.size, goal)

    def _dist(self, target):
        if target not in self._dist_cache:
            self._dist_cache[target] = bfs_distances(self.grid, target)
        return self._dist_cache[target]

    def next_target(self, cell):
        gx, gy = self.goal_cell
        x, y = cell
        if x != gx and y != self.row and self.grid.free((x, self.row)):
            return (x, self.row)
        if x != gx and self.grid.free((gx, self.row)):
            return (gx, self.row)
        return self.goal_cell

    def act(self, obs, t: int = 0) -> np.ndarray:
        cell = obs_to_cell(self.cfg.size, obs)
        target = self.next_target(cell)
        dist = self._dist(target)
        if cell == target or cell not in dist:
            return np.zeros(2)
        for dx, dy in MOVES:
            nxt = (cell[0] + dx, cell[1] + dy)
            if nxt in dist and dist[nxt] == dist[cell] - 1 and self.grid.free(nxt):
                return np.array([dx, dy], dtype=np.float64)
        return np.zeros(2)


def scripted_route_length(grid: Grid, pos, goal, row: int = 0) -> int:
    """Length of the detour demonstrator's route, computed leg by leg with BFS."""
    pos, goal = tuple(pos), tuple(goal)
    corners = [pos]
    if pos[0] != goal[0]:
        if pos[1] != row and grid.free((pos[0], row)):
            corners.append((pos[0], row))
        if grid.free((goal[0], row)):
            corners.append((goal[0], row))
    corners.append(goal)
    return sum(bfs_steps_to_go(grid, a, b) for a, b in zip(corners, corners[1:]))


# ---------------------------------------------------------------- factories


def make_env(cfg: EnvConfig, terminate_on_success: bool = True):
    if cfg.kind == "pointmass":
        return PointmassEnv(cfg.pointmass, terminate_on_success)
    return GridworldEnv(cfg.gridworld, terminate_on_success)


def make_demonstrator(cfg: EnvConfig, demo: DemoConfig | None = None):
    demo = demo or DemoConfig()
    kind = demo.kind
    if kind == "auto":
        kind = "pointmass_pd_waypoints" if cfg.kind == "pointmass" else "gridworld_detour"
    if kind == "pointmass_pd_waypoints" and cfg.kind == "pointmass":
        return PointmassWaypointDemo(cfg.pointmass, demo.n_waypoints, demo.kp, demo.kd)
    if kind == "gridworld_detour" and cfg.kind == "gridworld":
        return GridworldDetourDemo(cfg.gridworld, demo.detour_row)
    raise ConfigError(f"demonstrator {kind!r} does not fit env {cfg.kind!r}")


def rollout(env, demonstrator, seed: int) -> tuple[list[np.ndarray], list[np.ndarray], np.ndarray, str]:
    """Run a demonstrator for one episode; returns (observations, actions, goal, reason)."""
    obs, goal = env.reset(seed)
    demonstrator.begin(obs, goal, seed)
    observations, actions = [obs], []
    while True:
        a = demonstrator.act(obs, len(actions))
        res = env.step(a)
        actions.append(np.asarray(a, dtype=np.float64))
        obs = res.observation
        observations.append(obs)
        if res.terminated:
            return observations, actions, goal, res.reason
