"""Planar collision-avoidance world, multi-view ray sensors and accident labeling.

The ego is a single integrator (p' = u) steered by a 2-D velocity command.
Obstacles are disks moving at constant speed along straight or gently turning
paths that are scripted to cross the ego's straight-line route.  Each frame is
observed by ``n_views`` angular sectors of range rays, and every sector is
pushed through a fixed, seeded two-layer tanh projection that plays the role
of a frozen vision backbone.
"""
from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterable, Sequence

import numpy as np

UNSAFE_CONTROL_WINDOW = 5
POLICIES = ("nominal", "avoiding")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class WorldConfig:
    arena_half_width: float = 10.0
    ego_radius: float = 0.5
    obstacle_radius: float = 0.6
    n_obstacles: int = 3
    obstacle_speed_range: tuple[float, float] = (0.6, 1.4)
    dt: float = 0.2
    horizon: int = 40
    n_views: int = 6
    view_fov: float = 2 * np.pi / 6
    rays_per_view: int = 8
    embed_dim: int = 24
    embed_seed: int = 1234
    regime_id: int = 0
    ego_speed: float = 2.0
    control_limit: float = 3.0
    max_range: float = 8.0
    miss_spread: float = 5.0
    turn_rate_max: float = 0.15
    control_noise: float = 0.5
    projection_hidden: int = 48
    post_collision_frames: int = 4

    def __post_init__(self):
        object.__setattr__(self, "obstacle_speed_range", tuple(float(v) for v in self.obstacle_speed_range))
        if not self.dt > 0:
            raise ConfigError("dt must be positive")
        if self.horizon < 10:
            raise ConfigError("horizon must be at least 10 steps")
        if self.n_views < 1:
            raise ConfigError("need at least one view")
        if self.rays_per_view < 1:
            raise ConfigError("need at least one ray per view")
        if self.embed_dim < self.rays_per_view:
            raise ConfigError("embed_dim must be >= rays_per_view")
        lo, hi = self.obstacle_speed_range
        if not 0 < lo <= hi:
            raise ConfigError("obstacle_speed_range must satisfy 0 < lo <= hi")
        if self.arena_half_width <= 4 * (self.ego_radius + self.obstacle_radius):
            raise ConfigError("arena too small for the configured radii")
        if self.n_obstacles < 0:
            raise ConfigError("n_obstacles must be non-negative")
        if self.post_collision_frames < 0:
            raise ConfigError("post_collision_frames must be non-negative")

    def replace(self, **changes) -> "WorldConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["obstacle_speed_range"] = list(self.obstacle_speed_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "WorldConfig":
        return cls(**d)


# Obstacle-speed / arena variations standing in for different towns.  Regimes
# 0-3 are the in-distribution ones by default, 4-6 are withheld.
REGIMES: dict[int, dict] = {
    0: dict(obstacle_speed_range=(0.6, 1.3), arena_half_width=10.0),
    1: dict(obstacle_speed_range=(0.7, 1.4), arena_half_width=9.5),
    2: dict(obstacle_speed_range=(0.6, 1.2), arena_half_width=10.5),
    3: dict(obstacle_speed_range=(0.8, 1.5), arena_half_width=10.0),
    4: dict(obstacle_speed_range=(0.9, 1.6), arena_half_width=9.0),
    5: dict(obstacle_speed_range=(0.5, 1.1), arena_half_width=11.0),
    6: dict(obstacle_speed_range=(0.8, 1.6), arena_half_width=11.0),
}


def regime_config(base: WorldConfig, regime_id: int) -> WorldConfig:
    if regime_id not in REGIMES:
        raise ConfigError(f"unknown regime {regime_id}")
    return base.replace(regime_id=regime_id, **REGIMES[regime_id])


@dataclass
class RawFrame:
    ego_position: np.ndarray
    ego_velocity: np.ndarray
    obstacle_states: list[tuple[np.ndarray, np.ndarray]]
    control: np.ndarray
    time_index: int

    def __post_init__(self):
        self.control = np.asarray(self.control, dtype=float)
        if self.control.shape != (2,):
            raise ValueError("control must be a 2-vector")

    def obstacle_positions(self) -> np.ndarray:
        if not self.obstacle_states:
            return np.zeros((0, 2))
        return np.array([p for p, _ in self.obstacle_states], dtype=float)

    def to_dict(self) -> dict:
        return {
            "ego_position": self.ego_position.tolist(),
            "ego_velocity": self.ego_velocity.tolist(),
            "obstacles": [list(p) + list(v) for p, v in self.obstacle_states],
            "control": self.control.tolist(),
            "t": self.time_index,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RawFrame":
        obs = [(np.array(o[:2], dtype=float), np.array(o[2:], dtype=float)) for o in d["obstacles"]]
        return cls(np.array(d["ego_position"], dtype=float), np.array(d["ego_velocity"], dtype=float),
                   obs, np.array(d["control"], dtype=float), int(d["t"]))

    def same_as(self, other: "RawFrame") -> bool:
        return self.to_dict() == other.to_dict()


@dataclass
class ViewEmbedding:
    view_index: int
    features: np.ndarray


# ---------------------------------------------------------------------------
# World dynamics


def _rot(theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s], [s, c]])


class World:
    """Mutable world state for one episode.  ``reset`` is fully determined by the seed."""

    def __init__(self, config: WorldConfig, seed: int):
        self.config = config
        self.seed = int(seed)
        ss = np.random.SeedSequence([self.seed, config.regime_id, 7919])
        scene_seq, noise_seq = ss.spawn(2)
        self._scene_rng = np.random.default_rng(scene_seq)
        self.noise_rng = np.random.default_rng(noise_seq)
        self._build_scene()
        self.t = 0
        self.collided = False
        self.collision_index: int | None = None
        self.wrecked_obstacle: int | None = None

    def _build_scene(self):
        cfg, rng = self.config, self._scene_rng
        w = cfg.arena_half_width
        self.start = np.array([-w + 2.0, rng.uniform(-w / 3, w / 3)])
        self.goal = np.array([w - 2.0, rng.uniform(-w / 3, w / 3)])
        route = self.goal - self.start
        travel_time = np.linalg.norm(route) / cfg.ego_speed
        heading = route / np.linalg.norm(route)
        self.ego = self.start.copy()
        self.ego_vel = np.zeros(2)
        r_sum = cfg.ego_radius + cfg.obstacle_radius
        pos, vel, omega = [], [], []
        for _ in range(cfg.n_obstacles):
            t_hit = rng.uniform(0.2, 0.75) * min(travel_time, cfg.horizon * cfg.dt)
            k_hit = max(1, int(round(t_hit / cfg.dt)))
            meet = self.start + heading * cfg.ego_speed * k_hit * cfg.dt
            speed = rng.uniform(*cfg.obstacle_speed_range)
            # crossing direction, biased away from head-on / tail-chasing
            ang = np.arctan2(heading[1], heading[0]) + rng.choice([-1, 1]) * rng.uniform(0.35, 0.9) * np.pi
            v_hit = speed * np.array([np.cos(ang), np.sin(ang)])
            normal = np.array([-v_hit[1], v_hit[0]]) / speed
            p = meet + rng.uniform(-cfg.miss_spread, cfg.miss_spread) * normal
            w_turn = rng.uniform(-cfg.turn_rate_max, cfg.turn_rate_max) if rng.random() < 0.5 else 0.0
            # integrate the scripted path backwards from the meeting step
            v = v_hit.copy()
            back = _rot(-w_turn * cfg.dt)
            for _ in range(k_hit):
                v = back @ v
                p = p - cfg.dt * v
            if np.linalg.norm(p - self.start) < r_sum + 1.5:
                p = p + (p - self.start) / max(np.linalg.norm(p - self.start), 1e-9) * (r_sum + 1.5)
            pos.append(p)
            vel.append(v)
            omega.append(w_turn)
        self.obs_pos = np.array(pos, dtype=float).reshape(-1, 2)
        self.obs_vel = np.array(vel, dtype=float).reshape(-1, 2)
        self.obs_omega = np.array(omega, dtype=float)
        self._obs_rot = [_rot(w * cfg.dt) for w in self.obs_omega]

    def check_collision(self) -> bool:
        if self.collided or len(self.obs_pos) == 0:
            return self.collided
        r_sum = self.config.ego_radius + self.config.obstacle_radius
        d = np.linalg.norm(self.obs_pos - self.ego, axis=1)
        hit = np.flatnonzero(d < r_sum)
        if hit.size:
            self.collided = True
            self.collision_index = self.t
            self.wrecked_obstacle = int(hit[np.argmin(d[hit])])
            self.obs_vel[self.wrecked_obstacle] = 0.0
            self.ego_vel = np.zeros(2)
        return self.collided

    def frame(self, control) -> RawFrame:
        obstacles = [(self.obs_pos[i].copy(), self.obs_vel[i].copy()) for i in range(len(self.obs_pos))]
        return RawFrame(self.ego.copy(), self.ego_vel.copy(), obstacles, np.asarray(control, dtype=float).copy(), self.t)

    def step(self, control):
        u = np.zeros(2) if self.collided else np.asarray(control, dtype=float)
        self.ego = self.ego + self.config.dt * u
        self.ego_vel = u.copy()
        for i in range(len(self.obs_pos)):
            if self.collided and i == self.wrecked_obstacle:
                continue
            self.obs_pos[i] = self.obs_pos[i] + self.config.dt * self.obs_vel[i]
            self.obs_vel[i] = self._obs_rot[i] @ self.obs_vel[i]
        self.t += 1


# ---------------------------------------------------------------------------
# Policies


def clip_control(u: np.ndarray, limit: float) -> np.ndarray:
    return np.clip(u, -limit, limit)


def nominal_control(world: World) -> np.ndarray:
    cfg = world.config
    to_goal = world.goal - world.ego
    dist = np.linalg.norm(to_goal)
    if dist < 1e-9:
        return np.zeros(2)
    speed = min(cfg.ego_speed, dist / cfg.dt)
    return to_goal / dist * speed


def _closest_approach(r: np.ndarray, rel_v: np.ndarray, lookahead: float):
    vv = rel_v @ rel_v
    t_ca = 0.0 if vv < 1e-12 else float(np.clip(-(r @ rel_v) / vv, 0.0, lookahead))
    r_ca = r + rel_v * t_ca
    return t_ca, r_ca, float(np.linalg.norm(r_ca))


def avoiding_control(world: World, lookahead: float = 3.0, buffer: float = 1.0, gain: float = 3.0,
                     max_rounds: int = 4) -> np.ndarray:
    """Nominal command plus repulsion away from predicted closest-approach points.

    The repulsion is recomputed against the candidate command and its gain
    doubled until every predicted clearance exceeds the buffer (or rounds run out).
    """
    cfg = world.config
    u_nom = nominal_control(world)
    safe = cfg.ego_radius + cfg.obstacle_radius + buffer
    u = u_nom.copy()
    k = gain
    for _ in range(max_rounds):
        push = np.zeros(2)
        worst = np.inf
        for p_o, v_o in zip(world.obs_pos, world.obs_vel):
            r = world.ego - p_o
            rel_v = u - v_o
            t_ca, r_ca, d_ca = _closest_approach(r, rel_v, lookahead)
            worst = min(worst, d_ca)
            if d_ca >= safe:
                continue
            if d_ca < 1e-6:
                away = np.array([-rel_v[1], rel_v[0]]) / max(np.linalg.norm(rel_v), 1e-9)
            else:
                away = r_ca / d_ca
            urgency = (safe - d_ca) / safe / (1.0 + 0.5 * t_ca)
            push += urgency * away
        if worst >= safe:
            break
        u = clip_control(u_nom * max(0.0, 1.0 - np.linalg.norm(push)) + k * cfg.ego_speed * push,
                         cfg.control_limit)
        k *= 2.0
    return u


def policy_control(world: World, policy: str) -> np.ndarray:
    if policy == "nominal":
        u = nominal_control(world)
    elif policy == "avoiding":
        u = avoiding_control(world)
    else:
        raise ValueError(f"unknown policy {policy!r}")
    u = u + world.config.control_noise * world.noise_rng.standard_normal(2)
    return clip_control(u, world.config.control_limit)


def simulate_trajectory(config: WorldConfig, policy: str, seed: int) -> tuple[list[RawFrame], bool]:
    """Roll out ``policy``; an accident episode ends ``post_collision_frames`` after the impact."""
    world = World(config, seed)
    frames = []
    hit_at = None
    for t in range(config.horizon):
        world.check_collision()
        u = policy_control(world, policy)
        if world.collided:
            u = np.zeros(2)
            hit_at = t if hit_at is None else hit_at
        frames.append(world.frame(u))
        if hit_at is not None and t - hit_at >= config.post_collision_frames:
            break
        world.step(u)
    return frames, world.collided


def collision_index(frames: Sequence[RawFrame], config: WorldConfig) -> int | None:
    r_sum = config.ego_radius + config.obstacle_radius
    for fr in frames:
        obs = fr.obstacle_positions()
        if len(obs) and np.min(np.linalg.norm(obs - fr.ego_position, axis=1)) < r_sum:
            return fr.time_index
    return None


# ---------------------------------------------------------------------------
# Sensors


def view_ray_angles(config: WorldConfig) -> np.ndarray:
    """(n_views, rays_per_view) world-frame ray angles; view i is centred at 2*pi*i/n_views."""
    centers = 2 * np.pi * np.arange(config.n_views) / config.n_views
    offs = -config.view_fov / 2 + (np.arange(config.rays_per_view) + 0.5) * config.view_fov / config.rays_per_view
    return centers[:, None] + offs[None, :]


@lru_cache(maxsize=32)
def _projection(embed_seed: int, n_rays: int, hidden: int, embed_dim: int):
    rng = np.random.default_rng([embed_seed, n_rays, hidden, embed_dim])
    w1 = rng.standard_normal((hidden, n_rays)) * (2.5 / np.sqrt(n_rays))
    b1 = rng.standard_normal(hidden) * 0.5
    w2 = rng.standard_normal((embed_dim, hidden)) * (1.5 / np.sqrt(hidden))
    b2 = rng.standard_normal(embed_dim) * 0.2
    for a in (w1, b1, w2, b2):
        a.setflags(write=False)
    return w1, b1, w2, b2


def ray_ranges(ego: np.ndarray, obstacles: np.ndarray, config: WorldConfig) -> np.ndarray:
    """Ranges for a batch of frames.

    ego: (F, 2); obstacles: (F, K, 2).  Returns (F, n_views, rays_per_view).
    """
    angles = view_ray_angles(config).reshape(-1)
    dirs = np.stack([np.cos(angles), np.sin(angles)], axis=-1)  # (R, 2)
    n_frames = ego.shape[0]
    ranges = np.full((n_frames, dirs.shape[0]), config.max_range)
    if obstacles.shape[1]:
        rel = obstacles - ego[:, None, :]  # (F, K, 2)
        proj = np.einsum("fkd,rd->frk", rel, dirs)
        dist2 = np.einsum("fkd,fkd->fk", rel, rel)[:, None, :]
        perp2 = dist2 - proj**2
        rad2 = config.obstacle_radius**2
        disc = rad2 - perp2
        hit_t = proj - np.sqrt(np.maximum(disc, 0.0))
        inside = dist2 < rad2
        valid = (disc >= 0) & (hit_t >= 0)
        cand = np.where(valid, hit_t, np.inf)
        cand = np.where(np.broadcast_to(inside, cand.shape), 0.0, cand)
        ranges = np.minimum(ranges, cand.min(axis=2))
    return ranges.reshape(n_frames, config.n_views, config.rays_per_view)


def embed_ranges(ranges: np.ndarray, config: WorldConfig) -> np.ndarray:
    """Frozen two-layer tanh projection of proximity features, shared by every view."""
    w1, b1, w2, b2 = _projection(config.embed_seed, config.rays_per_view, config.projection_hidden, config.embed_dim)
    prox = 1.0 - np.clip(ranges, 0.0, config.max_range) / config.max_range
    hidden = np.tanh(prox @ w1.T + b1)
    return np.tanh(hidden @ w2.T + b2).astype(np.float32)


def render_views(frame: RawFrame, config: WorldConfig) -> list[ViewEmbedding]:
    feats = render_frames([frame], config)[0]
    return [ViewEmbedding(i, feats[i]) for i in range(config.n_views)]


def render_frames(frames: Sequence[RawFrame], config: WorldConfig) -> np.ndarray:
    """Embeddings for many frames at once, shape (F, n_views, embed_dim), float32."""
    k = max((len(f.obstacle_states) for f in frames), default=0)
    ego = np.array([f.ego_position for f in frames], dtype=float).reshape(-1, 2)
    obs = np.full((len(frames), k, 2), 1e6)
    for i, f in enumerate(frames):
        if f.obstacle_states:
            obs[i, : len(f.obstacle_states)] = f.obstacle_positions()
    return embed_ranges(ray_ranges(ego, obs, config), config)


# ---------------------------------------------------------------------------
# Labeled datasets


@dataclass
class Trajectory:
    frames: list[RawFrame]
    had_collision: bool
    collision_index: int | None
    regime_id: int
    seed: int
    policy: str
    embeddings: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def key(self) -> str:
        return f"r{self.regime_id}-{self.policy}-{self.seed}"

    def controls(self) -> np.ndarray:
        return np.array([f.control for f in self.frames], dtype=float)


@dataclass
class LabeledTrajectory(Trajectory):
    state_safe: np.ndarray = None
    control_safe: np.ndarray = None


@dataclass
class LabeledDataset:
    trajectories: list[LabeledTrajectory]
    label_counts: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.trajectories)

    @property
    def families(self) -> list[str]:
        if not self.trajectories:
            return []
        return sorted(self.trajectories[0].embeddings)

    def subset(self, trajs: Iterable[LabeledTrajectory]) -> "LabeledDataset":
        trajs = list(trajs)
        return LabeledDataset(trajs, count_labels(trajs))

    # Trajectories differ in length (accident episodes stop early), so the
    # array views below are right-padded to the longest one; ``valid`` marks
    # the real frames.  Padding is zeros for inputs and "safe" for labels.

    def lengths(self) -> np.ndarray:
        return np.array([len(t.frames) for t in self.trajectories], dtype=int)

    def valid(self) -> np.ndarray:
        lens = self.lengths()
        return np.arange(lens.max(initial=0))[None, :] < lens[:, None]

    def _padded(self, rows, fill, dtype):
        t_max = max((len(r) for r in rows), default=0)
        out = np.full((len(rows), t_max) + np.shape(rows[0])[1:] if rows else (0, 0), fill, dtype=dtype)
        for i, r in enumerate(rows):
            out[i, :len(r)] = r
        return out

    def embeddings(self, family: str) -> np.ndarray:
        """(B, T, M, D) float64 array of view embeddings."""
        return self._padded([t.embeddings[family] for t in self.trajectories], 0.0, float)

    def controls(self) -> np.ndarray:
        return self._padded([t.controls() for t in self.trajectories], 0.0, float)

    def state_safe(self) -> np.ndarray:
        return self._padded([t.state_safe for t in self.trajectories], True, bool)

    def control_safe(self) -> np.ndarray:
        return self._padded([t.control_safe for t in self.trajectories], True, bool)


def label_trajectory(traj: Trajectory) -> LabeledTrajectory:
    n = len(traj.frames)
    state_safe = np.ones(n, dtype=bool)
    control_safe = np.ones(n, dtype=bool)
    c = traj.collision_index
    if traj.had_collision:
        if c is None:
            raise ValueError(f"trajectory {traj.key} collided but has no collision index")
        state_safe[c:] = False
        # short prefix: label as many preceding frames as exist
        control_safe[max(0, c - UNSAFE_CONTROL_WINDOW):c] = False
    return LabeledTrajectory(traj.frames, traj.had_collision, c, traj.regime_id, traj.seed, traj.policy,
                             dict(traj.embeddings), state_safe=state_safe, control_safe=control_safe)


def count_labels(trajs: Sequence[LabeledTrajectory]) -> dict:
    ss = np.concatenate([t.state_safe for t in trajs]) if trajs else np.zeros(0, bool)
    cs = np.concatenate([t.control_safe for t in trajs]) if trajs else np.zeros(0, bool)
    return {
        "trajectories": len(trajs),
        "collisions": int(sum(t.had_collision for t in trajs)),
        "safe_states": int(ss.sum()),
        "unsafe_states": int((~ss).sum()),
        "safe_controls": int(cs.sum()),
        "unsafe_controls": int((~cs).sum()),
    }


def label_dataset(trajectories: Sequence[Trajectory]) -> LabeledDataset:
    labeled = [label_trajectory(t) for t in trajectories]
    return LabeledDataset(labeled, count_labels(labeled))


def generate_trajectory(config: WorldConfig, policy: str, seed: int, families: dict[str, dict]) -> Trajectory:
    frames, collided = simulate_trajectory(config, policy, seed)
    idx = collision_index(frames, config) if collided else None
    emb = {name: render_frames(frames, config.replace(**over)) for name, over in families.items()}
    return Trajectory(frames, collided, idx, config.regime_id, seed, policy, emb)


def generate_dataset(base: WorldConfig, regimes: Sequence[int], per_regime: int, families: dict[str, dict],
                     seed: int = 0, avoiding_fraction: float = 0.2) -> LabeledDataset:
    """Simulate ``per_regime`` trajectories in each regime and label them.

    Policies alternate deterministically so every regime has the requested
    share of avoiding-policy runs.
    """
    trajs = []
    for regime in regimes:
        cfg = regime_config(base, regime)
        n_avoid = int(round(avoiding_fraction * per_regime))
        for k in range(per_regime):
            policy = "avoiding" if k < n_avoid else "nominal"
            traj_seed = int(np.random.SeedSequence([seed, regime, k]).generate_state(1)[0])
            trajs.append(generate_trajectory(cfg, policy, traj_seed, families))
    return label_dataset(trajs)


def _trajectory_fraction(traj: Trajectory) -> float:
    h = hashlib.sha256(traj.key.encode()).digest()
    return int.from_bytes(h[:8], "little") / 2**64


def split_ind_ood(dataset: LabeledDataset, ind_regimes: set, ood_regimes: set):
    ind_regimes, ood_regimes = set(ind_regimes), set(ood_regimes)
    if not ind_regimes or not ood_regimes:
        raise ValueError("both IND and OOD regime sets must be non-empty")
    if ind_regimes & ood_regimes:
        raise ValueError(f"regimes in both IND and OOD: {sorted(ind_regimes & ood_regimes)}")
    ind = [t for t in dataset.trajectories if t.regime_id in ind_regimes]
    ood = [t for t in dataset.trajectories if t.regime_id in ood_regimes]
    if not ind or not ood:
        raise ValueError("empty IND or OOD partition")
    return dataset.subset(ind), dataset.subset(ood)


def split_train_val_test(dataset: LabeledDataset, fractions=(0.70, 0.15, 0.15)):
    """Deterministic 70/15/15 split keyed on a hash of each trajectory's identity."""
    a = fractions[0]
    b = fractions[0] + fractions[1]
    parts = ([], [], [])
    for t in dataset.trajectories:
        q = _trajectory_fraction(t)
        parts[0 if q < a else 1 if q < b else 2].append(t)
    return tuple(dataset.subset(p) for p in parts)
