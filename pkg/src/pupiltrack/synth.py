"""Deterministic synthetic eye recordings with analytic pupil trajectories.

A dark disk (the pupil) moves over the sensor. Pixels on its contour fire while
it moves: ON on the leading half of the edge, OFF on the trailing half, with a
rate proportional to how squarely the edge faces the motion. Uniform
background noise is added on top.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .events import EventStream, LabelTrack, Recording, SENSOR_HEIGHT, SENSOR_WIDTH


@dataclass(frozen=True)
class SynthConfig:
    width: int = SENSOR_WIDTH
    height: int = SENSOR_HEIGHT
    duration_us: int = 2_000_000
    trajectory: str = "circular"  # or "random-walk"
    speed: float = 300.0  # nominal pupil speed, sensor px / s
    speed_modulation: float = 0.0  # relative amplitude of a sinusoidal speed change
    modulation_period_us: int = 700_000
    center: tuple = (352.0, 240.0)
    orbit_radius: float = 100.0  # circular trajectory radius, or random-walk half-extent
    turn_rate: float = 3.0  # random-walk heading diffusion, rad / sqrt(s)
    pupil_radius: float = 40.0
    ring_width: float = 2.0
    event_rate_on_ring: float = 0.05  # events per ring pixel per ms at nominal speed
    noise_rate: float = 2.0  # background events per ms over the whole sensor
    label_period: int = 30_000
    step_us: int = 100
    phase: float = 0.0
    rng_seed: int = 0

    def __post_init__(self):
        if self.duration_us <= 0:
            raise ValueError("duration must be positive")
        if min(self.speed, self.event_rate_on_ring, self.noise_rate) < 0:
            raise ValueError("speed and rates must be non-negative")
        if not 0 <= self.speed_modulation < 1:
            raise ValueError("speed_modulation must be in [0, 1)")
        if self.trajectory not in ("circular", "random-walk"):
            raise ValueError(f"unknown trajectory {self.trajectory!r}")
        if self.label_period <= 0 or self.step_us <= 0:
            raise ValueError("label_period and step_us must be positive")


def golden_config(**overrides) -> SynthConfig:
    """Fixed-seed recording used by regression tests and the desk-scale training demo."""
    cfg = SynthConfig(
        duration_us=10_000_000,
        trajectory="circular",
        speed=300.0,
        speed_modulation=0.8,
        event_rate_on_ring=0.05,
        noise_rate=2.0,
        rng_seed=2024,
    )
    return replace(cfg, **overrides)


class Trajectory:
    """Pupil centre and velocity as functions of time (microseconds)."""

    def __init__(self, cfg: SynthConfig, rng: np.random.Generator):
        self.cfg = cfg
        if cfg.trajectory == "random-walk":
            self._build_walk(rng)

    def speed_at(self, t):
        c = self.cfg
        return c.speed * (1 + c.speed_modulation * np.sin(2 * np.pi * np.asarray(t, dtype=np.float64) / c.modulation_period_us))

    def _arc(self, t):
        """Distance travelled since t=0, in sensor px (integral of speed_at)."""
        c = self.cfg
        t = np.asarray(t, dtype=np.float64)
        w = 2 * np.pi / c.modulation_period_us
        return c.speed * 1e-6 * (t + c.speed_modulation * (1 - np.cos(w * t)) / w)

    def position(self, t):
        c = self.cfg
        if c.trajectory == "circular":
            angle = c.phase + self._arc(t) / c.orbit_radius
            return c.center[0] + c.orbit_radius * np.cos(angle), c.center[1] + c.orbit_radius * np.sin(angle)
        return np.interp(t, self._t, self._x), np.interp(t, self._t, self._y)

    def heading(self, t):
        """Direction of motion in radians."""
        c = self.cfg
        if c.trajectory == "circular":
            return c.phase + self._arc(t) / c.orbit_radius + np.pi / 2
        k = np.clip(np.searchsorted(self._t, t, side="right") - 1, 0, len(self._h) - 1)
        return self._h[k]

    def _build_walk(self, rng):
        c = self.cfg
        n = c.duration_us // c.step_us + 2
        self._t = np.arange(n, dtype=np.float64) * c.step_us
        dt_s = c.step_us * 1e-6
        turns = rng.normal(0.0, c.turn_rate * math.sqrt(dt_s), size=n)
        heading = c.phase + np.cumsum(turns)
        x = np.empty(n)
        y = np.empty(n)
        h = np.empty(n)
        x[0], y[0] = c.center
        lo_x, hi_x = c.center[0] - c.orbit_radius, c.center[0] + c.orbit_radius
        lo_y, hi_y = c.center[1] - c.orbit_radius, c.center[1] + c.orbit_radius
        flip_x = flip_y = 1.0
        step = self.speed_at(self._t) * dt_s
        for k in range(n):
            dx, dy = flip_x * math.cos(heading[k]), flip_y * math.sin(heading[k])
            h[k] = math.atan2(dy, dx)
            if k + 1 < n:
                nx, ny = x[k] + step[k] * dx, y[k] + step[k] * dy
                if not lo_x <= nx <= hi_x:
                    flip_x = -flip_x
                    nx = x[k] - step[k] * dx
                if not lo_y <= ny <= hi_y:
                    flip_y = -flip_y
                    ny = y[k] - step[k] * dy
                x[k + 1], y[k + 1] = nx, ny
        self._x, self._y, self._h = x, y, h


def generate(cfg: SynthConfig) -> Recording:
    rng = np.random.default_rng(cfg.rng_seed)
    traj = Trajectory(cfg, rng)

    n_steps = -(-cfg.duration_us // cfg.step_us)
    step_t = np.arange(n_steps, dtype=np.int64) * cfg.step_us
    ring_pixels = 2 * np.pi * cfg.pupil_radius * cfg.ring_width
    # mean |cos| over the contour is 2/pi
    if cfg.speed > 0:
        lam = cfg.event_rate_on_ring * ring_pixels * (cfg.step_us / 1000) * (2 / np.pi)
        lam = lam * traj.speed_at(step_t + cfg.step_us / 2) / cfg.speed
    else:
        lam = np.zeros(n_steps)
    counts = rng.poisson(lam)
    n_ring = int(counts.sum())

    t = np.repeat(step_t, counts) + rng.integers(0, cfg.step_us, size=n_ring)
    t = np.minimum(t, cfg.duration_us - 1)
    # angle from the motion direction with density proportional to |cos|
    offset = np.arcsin(rng.uniform(-1.0, 1.0, size=n_ring))
    leading = rng.random(n_ring) < 0.5
    offset = np.where(leading, offset, offset + np.pi)
    theta = traj.heading(t) + offset
    radius = cfg.pupil_radius + rng.uniform(-cfg.ring_width / 2, cfg.ring_width / 2, size=n_ring)
    cx, cy = traj.position(t)
    rx = np.floor(cx + radius * np.cos(theta)).astype(np.int64)
    ry = np.floor(cy + radius * np.sin(theta)).astype(np.int64)
    rp = leading.astype(np.int64)

    n_noise = int(rng.poisson(cfg.noise_rate * cfg.duration_us / 1000))
    nt = rng.integers(0, cfg.duration_us, size=n_noise)
    nx = rng.integers(0, cfg.width, size=n_noise)
    ny = rng.integers(0, cfg.height, size=n_noise)
    npol = rng.integers(0, 2, size=n_noise)

    t = np.concatenate([t, nt])
    x = np.concatenate([rx, nx])
    y = np.concatenate([ry, ny])
    p = np.concatenate([rp, npol])
    inside = (x >= 0) & (x < cfg.width) & (y >= 0) & (y < cfg.height)
    t, x, y, p = t[inside], x[inside], y[inside], p[inside]
    order = np.argsort(t, kind="stable")
    stream = EventStream(cfg.width, cfg.height, t[order], x[order], y[order], p[order])

    label_t = np.arange(0, cfg.duration_us, cfg.label_period, dtype=np.int64)
    lx, ly = traj.position(label_t)
    return Recording(stream, LabelTrack(label_t, np.asarray(lx, dtype=np.float64), np.asarray(ly, dtype=np.float64)))
