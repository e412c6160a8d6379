"""Synthetic scenario libraries.

Each BV follows an open-loop script whose parameters are chosen against the
AV's constant-velocity projection (cut-in gaps, brake onsets, drift rates),
so a cruising AV meets a mix of harmless and dangerous traffic. Scripts never
react to the AV actually driven later, which keeps scenarios AV-agnostic.
BV controls are clamped to the dynamics limits and integrated with the same
kinematics as the AV.
"""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import asdict, dataclass, field

import numpy as np

from . import kernels
from .scenario import DynamicsLimits, RoadGeometry, Scenario, ScenarioLibrary, validate_scenario
from .sim import VehicleDims

MANEUVERS = ("cut_in", "hard_brake", "lane_drift", "tailgate_pass", "cruise")
_LANE_GAIN = 0.08  # rad of heading per metre of lateral error


class GenerationError(RuntimeError):
    pass


@dataclass
class GenConfig:
    n_scenarios: int = 2000
    bv_count_weights: tuple[float, ...] = (0.4, 0.3, 0.2, 0.1)
    horizon_range: tuple[int, int] = (50, 100)
    maneuver_weights: dict[str, float] = field(default_factory=lambda: {
        "cut_in": 0.2, "hard_brake": 0.15, "lane_drift": 0.1, "tailgate_pass": 0.1, "cruise": 0.45})
    av_speed_range: tuple[float, float] = (20.0, 30.0)
    av_x_range: tuple[float, float] = (40.0, 60.0)
    seed: int = 0
    max_attempts: int = 500

    def __post_init__(self):
        w = np.array([self.maneuver_weights.get(m, 0.0) for m in MANEUVERS])
        unknown = set(self.maneuver_weights) - set(MANEUVERS)
        if unknown:
            raise ValueError(f"unknown maneuvers {sorted(unknown)}")
        if np.any(w < 0) or w.sum() <= 0:
            raise ValueError("maneuver weights must be non-negative and not all zero")
        if self.n_scenarios < 1:
            raise ValueError("n_scenarios must be at least 1")
        c = np.asarray(self.bv_count_weights, dtype=float)
        if np.any(c < 0) or c.sum() <= 0:
            raise ValueError("bv_count_weights must be non-negative and not all zero")


class _Script:
    """Initial BV state plus a controller producing raw (accel, yaw-rate)."""

    def __init__(self, tag, state, lane_y, params):
        self.tag = tag
        self.state = np.asarray(state, dtype=np.float64)
        self.target_y = lane_y
        self.p = params
        self.phase = 0

    def control(self, t, s, av_x, dt):
        p = self.p
        accel, theta_max = 0.0, p.get("theta_max", 0.1)
        tag = self.tag
        if tag == "hard_brake" and t >= p["t_brake"]:
            accel = -p["decel"]
        elif tag == "cut_in":
            if t >= p["t_cut"]:
                self.target_y = p["cut_y"]
            if p["decel"] > 0 and self.target_y == p["cut_y"] and abs(s[1] - p["cut_y"]) < 0.5:
                accel = -p["decel"]
        elif tag == "lane_drift" and t >= p["t_drift"]:
            self.target_y = p["drift_y"]
        elif tag == "tailgate_pass" and self.phase == 0:
            if av_x - s[0] - p["length"] < p["pass_gap"]:
                self.phase = 1
                self.target_y = p["pass_y"]
        theta_d = float(np.clip(_LANE_GAIN * (self.target_y - s[1]), -theta_max, theta_max))
        return accel, (theta_d - s[3]) / dt


def _pick(rng, weights, items):
    w = np.asarray(weights, dtype=float)
    return items[int(rng.choice(len(items), p=w / w.sum()))]


def _script(tag, rng, av_lane, av_v, road: RoadGeometry, dims: VehicleDims):
    c = road.lane_center
    sides = [k for k in (av_lane - 1, av_lane + 1) if 0 <= k < road.num_lanes]
    if not sides and tag in ("cut_in", "lane_drift", "tailgate_pass"):
        tag = "cruise"  # single-lane road: nothing to change lanes from or into
    if tag == "cruise":
        lane = int(rng.integers(road.num_lanes))
        dx = rng.uniform(-40.0, 60.0)
        if lane == av_lane and abs(dx) < 12.0:
            dx = math.copysign(12.0 + abs(dx), dx if dx != 0 else 1.0)
        return _Script(tag, (dx, c(lane), av_v + rng.uniform(-4.0, 4.0), 0.0), c(lane), {})
    if tag == "hard_brake":
        p = {"t_brake": rng.uniform(0.2, 1.5), "decel": rng.uniform(4.0, 7.84)}
        return _Script(tag, (rng.uniform(8.0, 30.0), c(av_lane), av_v + rng.uniform(-2.0, 2.0), 0.0),
                       c(av_lane), p)
    if tag == "cut_in":
        side = int(rng.choice(sides))
        v = av_v + rng.uniform(-3.0, 3.0)
        t_cut = rng.uniform(0.2, 1.2)
        gap = rng.uniform(-3.0, 15.0) + dims.length
        dx = gap - (v - av_v) * t_cut
        p = {"t_cut": t_cut, "cut_y": c(av_lane), "theta_max": rng.uniform(0.06, 0.15),
             "decel": rng.uniform(2.0, 6.0) if rng.random() < 0.5 else 0.0}
        return _Script(tag, (dx, c(side), v, 0.0), c(side), p)
    if tag == "lane_drift":
        side = int(rng.choice(sides))
        p = {"t_drift": rng.uniform(0.2, 1.5), "drift_y": c(av_lane),
             "theta_max": rng.uniform(0.02, 0.05)}
        return _Script(tag, (rng.uniform(-4.0, 4.0), c(side), av_v + rng.uniform(-1.0, 1.0), 0.0),
                       c(side), p)
    if tag == "tailgate_pass":
        side = int(rng.choice(sides))
        p = {"pass_gap": rng.uniform(-2.0, 12.0), "pass_y": c(side), "length": dims.length,
             "theta_max": rng.uniform(0.08, 0.15)}
        return _Script(tag, (rng.uniform(-35.0, -12.0), c(av_lane), av_v + rng.uniform(4.0, 9.0), 0.0),
                       c(av_lane), p)
    raise ValueError(f"unknown maneuver {tag!r}")


def _integrate(scripts, av0, horizon, dt, limits: DynamicsLimits, road: RoadGeometry):
    n = len(scripts)
    states = np.zeros((horizon + 1, n, 4))
    states[0] = [s.state for s in scripts]
    vmax = min(limits.v_max, road.v_max)
    for t in range(horizon):
        av_x = av0[0] + av0[2] * t * dt
        cur = states[t]
        ctl = np.array([s.control(t * dt, cur[j], av_x, dt) for j, s in enumerate(scripts)])
        acc = np.clip(ctl[:, 0], limits.a_min, limits.a_max)
        om = np.clip(ctl[:, 1], limits.omega_min, limits.omega_max)
        nxt = kernels.kinematic_step(cur, np.stack([acc * dt, om * dt], axis=1), dt, vmax)
        states[t + 1] = nxt
    return states


def _overlaps(states, av0, dims: VehicleDims) -> bool:
    n = states.shape[1]
    a = np.broadcast_to(np.array([av0[0], av0[1], av0[3]]), (n, 3))
    if kernels.rects_overlap(np.ascontiguousarray(a), np.ascontiguousarray(states[0][:, [0, 1, 3]]),
                             dims.length, dims.width).any():
        return True
    if n < 2:
        return False
    iu, ju = np.triu_indices(n, k=1)
    pa = states[:, iu][:, :, [0, 1, 3]].reshape(-1, 3)
    pb = states[:, ju][:, :, [0, 1, 3]].reshape(-1, 3)
    return bool(kernels.rects_overlap(np.ascontiguousarray(pa), np.ascontiguousarray(pb),
                                      dims.length, dims.width).any())


def generate_scenario(index: int, cfg: GenConfig, road: RoadGeometry, dt: float = 0.04,
                      limits: DynamicsLimits | None = None, dims: VehicleDims | None = None,
                      n_max: int = 4, h_max: int = 100) -> Scenario:
    limits, dims = limits or DynamicsLimits(), dims or VehicleDims()
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(index,)))
    counts = np.asarray(cfg.bv_count_weights, dtype=float)[:n_max]
    man_w = [cfg.maneuver_weights.get(m, 0.0) for m in MANEUVERS]
    last = None
    for _ in range(cfg.max_attempts):
        n = 1 + int(rng.choice(len(counts), p=counts / counts.sum()))
        horizon = int(rng.integers(cfg.horizon_range[0], min(cfg.horizon_range[1], h_max) + 1))
        lane = int(rng.integers(road.num_lanes))
        v0 = rng.uniform(*cfg.av_speed_range)
        x0 = rng.uniform(*cfg.av_x_range)
        av0 = np.array([x0, road.lane_center(lane), v0, 0.0])
        tags = [_pick(rng, man_w, MANEUVERS) for _ in range(n)]
        scripts = [_script(tag, rng, lane, v0, road, dims) for tag in tags]
        tags = [s.tag for s in scripts]
        for s in scripts:
            s.state[0] += x0
        last = {"tags": tags, "params": [s.p for s in scripts]}
        if any(s.state[0] < 0.0 for s in scripts):
            continue
        states = _integrate(scripts, av0, horizon, dt, limits, road)
        if _overlaps(states, av0, dims):
            continue
        sc = Scenario(f"s{index:05d}", dt, av0, states[0], states[1:], tuple(tags))
        if validate_scenario(sc, road, limits):
            continue
        return sc
    raise GenerationError(f"scenario {index}: resampling budget exhausted; last attempt {last}")


def generate_library(cfg: GenConfig, road: RoadGeometry | None = None, dt: float = 0.04,
                     limits: DynamicsLimits | None = None, dims: VehicleDims | None = None,
                     n_max: int = 4, h_max: int = 100) -> ScenarioLibrary:
    road = road or RoadGeometry()
    scenarios = [generate_scenario(i, cfg, road, dt, limits, dims, n_max, h_max)
                 for i in range(cfg.n_scenarios)]
    return ScenarioLibrary(tuple(scenarios), road, dt, n_max, h_max,
                           provenance=f"clic.gen {asdict(cfg)}", seed=cfg.seed)


def describe_library(lib: ScenarioLibrary, limits: DynamicsLimits | None = None) -> dict:
    """Realized maneuver mix, per-N counts and smallest constraint margins."""
    limits = limits or DynamicsLimits()
    tags = Counter(t for s in lib for t in s.tags)
    per_n = Counter(s.n_bv for s in lib)
    margins = {"acceleration_low": np.inf, "acceleration_high": np.inf,
               "angular_velocity": np.inf, "speed_low": np.inf, "speed_high": np.inf}
    for s in lib:
        st = s.bv_states()
        acc = np.diff(st[:, :, 2], axis=0) / s.dt
        om = np.diff(st[:, :, 3], axis=0) / s.dt
        margins["acceleration_low"] = min(margins["acceleration_low"], float((acc - limits.a_min).min()))
        margins["acceleration_high"] = min(margins["acceleration_high"], float((limits.a_max - acc).min()))
        margins["angular_velocity"] = min(margins["angular_velocity"],
                                          float((limits.omega_max - np.abs(om)).min()))
        margins["speed_low"] = min(margins["speed_low"], float(st[:, :, 2].min()))
        margins["speed_high"] = min(margins["speed_high"], float((limits.v_max - st[:, :, 2]).min()))
    return {"n_scenarios": len(lib), "maneuvers": dict(sorted(tags.items())),
            "scenarios_per_bv_count": {str(k): v for k, v in sorted(per_n.items())},
            "constraint_margins": margins}
