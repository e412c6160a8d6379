"""Deterministic replay environment.

The AV follows the point-mass kinematics below; BVs are replayed from the
scenario record. An episode ends on an accident (collision or leaving the
road), when the recorded BV frames run out, or when the AV passes the end of
the road.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import kernels
from .scenario import AvAction, DynamicsLimits, PackedLibrary, RoadGeometry, Scenario, \
    VehicleState


class Accident(enum.IntEnum):
    NONE = 0
    COLLISION = 1
    OFF_ROAD = 2


@dataclass(frozen=True)
class VehicleDims:
    length: float = 5.0
    width: float = 1.8


@dataclass(frozen=True)
class RewardCoeffs:
    acc: float = 40.0
    vel: float = 0.8
    yaw: float = 6.0 / math.pi
    lane: float = 2.0


@dataclass(frozen=True)
class SimParams:
    road: RoadGeometry = field(default_factory=RoadGeometry)
    dims: VehicleDims = field(default_factory=VehicleDims)
    coeffs: RewardCoeffs = field(default_factory=RewardCoeffs)
    limits: DynamicsLimits = field(default_factory=DynamicsLimits)
    dt: float = 0.04
    n_max: int = 4
    obs_dx_scale: float = 50.0

    @property
    def obs_dim(self) -> int:
        return 4 * (1 + self.n_max)

    def action_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        lim = self.limits
        return (np.array([lim.a_min * self.dt, lim.omega_min * self.dt]),
                np.array([lim.a_max * self.dt, lim.omega_max * self.dt]))

    def kernel_vector(self) -> np.ndarray:
        r, d, c = self.road, self.dims, self.coeffs
        return np.array([self.dt, r.v_max, r.lane_width, r.num_lanes, r.width, d.length,
                         d.width, c.acc, c.vel, c.yaw, c.lane, r.v_min, r.v_max], dtype=np.float64)


# -- single-state operations --------------------------------------------------

def av_kinematic_step(s: VehicleState, a: AvAction, dt: float, v_max: float = 40.0) -> VehicleState:
    out = kernels.kinematic_step(np.array([s], dtype=np.float64),
                                 np.array([a], dtype=np.float64), dt, v_max)[0]
    return VehicleState(*map(float, out))


def _bv_arrays(bvs):
    arr = np.asarray(bvs, dtype=np.float64).reshape(-1, 4)
    return arr, np.ones(len(arr), dtype=bool)


def detect_accident(av, bvs, road: RoadGeometry | None = None,
                    dims: VehicleDims | None = None) -> Accident:
    road, dims = road or RoadGeometry(), dims or VehicleDims()
    arr, present = _bv_arrays(bvs)
    code = kernels.accident_codes(np.asarray(av, dtype=np.float64)[None], arr[None],
                                  present[None], dims.length, dims.width, road.width)
    return Accident(int(code[0]))


def best_lane(av, bvs, road: RoadGeometry | None = None) -> int:
    road = road or RoadGeometry()
    arr, present = _bv_arrays(bvs)
    return int(kernels.best_lanes(np.asarray(av, dtype=np.float64)[None], arr[None],
                                  present[None], road.lane_width, road.num_lanes)[0])


@dataclass(frozen=True)
class RewardBreakdown:
    r_acc: float
    r_vel: float
    r_yaw: float
    r_lane: float
    total: float

    @classmethod
    def from_terms(cls, terms) -> "RewardBreakdown":
        a, v, y, ln = (float(t) for t in terms)
        return cls(a, v, y, ln, a + v + y + ln)


def compute_reward(av, bvs, accident: bool | Accident, road: RoadGeometry | None = None,
                   coeffs: RewardCoeffs | None = None) -> RewardBreakdown:
    """Reward of the post-step state ``av`` given the BVs of the same frame."""
    road, coeffs = road or RoadGeometry(), coeffs or RewardCoeffs()
    x, y, v, th = (float(q) for q in av)
    r_acc = -coeffs.acc if accident else 0.0
    r_vel = coeffs.vel * (v - (road.v_max + road.v_min) / 2.0) / ((road.v_max - road.v_min) / 2.0)
    r_yaw = -coeffs.yaw * abs(th)
    r_lane = coeffs.lane if road.lane_of(y) == best_lane(av, bvs, road) else 0.0
    return RewardBreakdown.from_terms((r_acc, r_vel, r_yaw, r_lane))


def observe(av, bvs, present, sim: SimParams) -> np.ndarray:
    """Batched observation: AV (x, y, v, theta) then BV slots, zero when absent.

    AV entries are scaled by road length/width, v_max and pi. BV slots hold
    (x, y, v) relative to the AV, scaled by ``obs_dx_scale``, lane width and
    v_max, plus the BV heading over pi.
    """
    r = sim.road
    b = av.shape[0]
    obs = np.zeros((b, 1 + sim.n_max, 4))
    obs[:, 0, 0] = av[:, 0] / r.length
    obs[:, 0, 1] = av[:, 1] / r.width
    obs[:, 0, 2] = av[:, 2] / r.v_max
    obs[:, 0, 3] = av[:, 3] / math.pi
    n = bvs.shape[1]
    obs[:, 1:1 + n, 0] = (bvs[:, :, 0] - av[:, None, 0]) / sim.obs_dx_scale
    obs[:, 1:1 + n, 1] = (bvs[:, :, 1] - av[:, None, 1]) / r.lane_width
    obs[:, 1:1 + n, 2] = (bvs[:, :, 2] - av[:, None, 2]) / r.v_max
    obs[:, 1:1 + n, 3] = bvs[:, :, 3] / math.pi
    obs[:, 1:1 + n] *= present[:, :, None]
    return obs.reshape(b, -1)


# -- environment --------------------------------------------------------------

class StepAfterDoneError(RuntimeError):
    pass


@dataclass
class EnvState:
    scenario: Scenario
    frame_index: int
    av: np.ndarray
    bvs: np.ndarray
    done: bool = False
    accident: Accident = Accident.NONE


class HighwayEnv:
    def __init__(self, sim: SimParams | None = None):
        self.sim = sim or SimParams()
        self._p = self.sim.kernel_vector()
        self.state: EnvState | None = None

    def reset(self, scenario: Scenario) -> np.ndarray:
        if scenario.n_bv > self.sim.n_max:
            raise ValueError(f"scenario {scenario.id!r} has more than {self.sim.n_max} BVs")
        self.state = EnvState(scenario, 0, scenario.av_init.copy(), scenario.bv_init)
        self._present = np.ones((1, scenario.n_bv), dtype=bool)
        return self.observation()

    def observation(self) -> np.ndarray:
        st = self.state
        return observe(st.av[None], st.bvs[None], self._present, self.sim)[0]

    def step(self, action) -> tuple[np.ndarray, RewardBreakdown, bool]:
        st = self.state
        if st is None or st.done:
            raise StepAfterDoneError("step() called on a finished episode; call reset()")
        nxt = st.frame_index + 1
        bvs = st.scenario.bv_frames[nxt - 1]
        new, codes, terms = kernels.env_step(st.av[None], np.asarray(action, dtype=np.float64)[None],
                                             bvs[None], self._present, self._p)
        st.av, st.bvs, st.frame_index = new[0], bvs, nxt
        st.accident = Accident(int(codes[0]))
        st.done = bool(st.accident != Accident.NONE or nxt >= st.scenario.horizon
                       or st.av[0] > self.sim.road.length)
        return self.observation(), RewardBreakdown.from_terms(terms[0]), st.done


@dataclass
class RolloutResult:
    accident_label: int
    accident: Accident
    steps: int
    elapsed_time: float
    longitudinal_distance: float
    av_trajectory: list[VehicleState]
    actions: list[AvAction]
    rewards: list[RewardBreakdown]
    discounted_return: float
    observations: list[np.ndarray] = field(default_factory=list, repr=False)


def rollout(policy, scenario: Scenario, sim: SimParams | None = None, mode: str = "deterministic",
            gamma: float = 0.99, rng=None, obs_filter: Callable | None = None) -> RolloutResult:
    """Run one episode. ``policy.act(obs, mode, rng)`` returns (action, ...)."""
    env = HighwayEnv(sim)
    obs = env.reset(scenario)
    traj = [VehicleState(*map(float, env.state.av))]
    actions, rewards, observations = [], [], [obs]
    done = False
    while not done:
        seen = obs_filter(obs[None])[0] if obs_filter is not None else obs
        a = policy.act(seen, mode, rng)[0]
        obs, r, done = env.step(a)
        actions.append(AvAction(float(a[0]), float(a[1])))
        rewards.append(r)
        traj.append(VehicleState(*map(float, env.state.av)))
        observations.append(obs)
    ret, disc = 0.0, 1.0
    for r in rewards:
        ret += disc * r.total
        disc *= gamma
    steps = len(rewards)
    return RolloutResult(int(env.state.accident != Accident.NONE), env.state.accident, steps,
                         steps * env.sim.dt, traj[-1].x - traj[0].x, traj, actions, rewards, ret,
                         observations)


class ConstantPolicy:
    """Always applies the same physical action."""

    def __init__(self, dv=0.0, dtheta=0.0):
        self.action = np.array([dv, dtheta], dtype=np.float64)

    def act(self, obs, mode="deterministic", rng=None):
        return self.action.copy(), None

    def __call__(self, obs_batch):
        return np.broadcast_to(self.action, (obs_batch.shape[0], 2)).copy()


@dataclass
class BatchOutcome:
    label: np.ndarray       # (B,) 0/1
    code: np.ndarray        # (B,) Accident codes
    steps: np.ndarray       # (B,)
    traj: np.ndarray        # (B, h_max + 1, 4); rows past steps are zero


def rollout_batch(policy_fn: Callable[[np.ndarray], np.ndarray], packed: PackedLibrary, idx,
                  sim: SimParams) -> BatchOutcome:
    """Deterministic rollouts of several scenarios in lockstep.

    ``policy_fn`` maps an observation batch (B, obs_dim) to physical actions
    (B, 2). The batch shape stays fixed until every episode ends, so a row's
    result depends only on the batch composition, not on timing.
    """
    idx = np.asarray(idx, dtype=np.int64)
    b = len(idx)
    h_max = packed.bv.shape[1] - 1
    av = packed.av_init[idx].copy()
    bv = packed.bv[idx]
    present = packed.present[idx]
    horizon = packed.horizon[idx]
    p = sim.kernel_vector()
    traj = np.zeros((b, h_max + 1, 4))
    traj[:, 0] = av
    steps = np.zeros(b, dtype=np.int64)
    code = np.zeros(b, dtype=np.int8)
    active = np.ones(b, dtype=bool)
    for t in range(h_max):
        if not active.any():
            break
        act = policy_fn(observe(av, bv[:, t], present, sim))
        new, codes, _ = kernels.env_step(av, act, bv[:, t + 1], present, p)
        av = np.where(active[:, None], new, av)
        traj[active, t + 1] = new[active]
        steps += active
        hit = active & (codes != 0)
        code[hit] = codes[hit]
        active &= ~(hit | (t + 1 >= horizon) | (new[:, 0] > sim.road.length))
    return BatchOutcome((code != 0).astype(np.int64), code, steps, traj)
