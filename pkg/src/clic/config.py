"""Run configuration: one flat record covering every tunable, with two profiles.

The on-disk form is ``key = value`` lines (``#`` starts a comment). Lists are
comma separated. A snapshot written by :func:`dump_config` parses back to an
equal :class:`Config`.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, fields
from pathlib import Path

from .gen import MANEUVERS, GenConfig
from .sac import SacConfig
from .scenario import DynamicsLimits, RoadGeometry
from .sim import RewardCoeffs, SimParams, VehicleDims

STRATEGIES = ("clic", "rand", "rand_fail", "fail", "pcl_bv", "pcl_label", "order", "per")


class ConfigError(ValueError):
    pass


@dataclass
class Config:
    profile: str = "desk"
    seed: int = 0
    jobs: int = 1
    library: str = ""
    # library generation
    gen_n_scenarios: int = 2000
    gen_bv_weights: tuple[float, ...] = (0.4, 0.3, 0.2, 0.1)
    gen_horizon_min: int = 50
    gen_horizon_max: int = 100
    gen_w_cut_in: float = 0.2
    gen_w_hard_brake: float = 0.15
    gen_w_lane_drift: float = 0.1
    gen_w_tailgate_pass: float = 0.1
    gen_w_cruise: float = 0.45
    gen_av_speed_min: float = 20.0
    gen_av_speed_max: float = 30.0
    # road, vehicles, dynamics
    num_lanes: int = 3
    lane_width: float = 3.2
    road_length: float = 200.0
    v_min: float = 0.0
    v_max: float = 40.0
    a_min: float = -7.84
    a_max: float = 5.88
    omega_max: float = math.pi / 3.0
    dt: float = 0.04
    n_max: int = 4
    h_max: int = 100
    vehicle_length: float = 5.0
    vehicle_width: float = 1.8
    rho_acc: float = 40.0
    rho_vel: float = 0.8
    rho_yaw: float = 6.0 / math.pi
    rho_lane: float = 2.0
    # closed loop
    strategy: str = "clic"
    iterations: int = 5
    eval_size: int = 256
    train_size: int = 32
    episodes: int = 5
    eval_chunk: int = 64
    # soft actor-critic
    sac_hidden: int = 64
    sac_layers: int = 3
    sac_lr: float = 3e-4
    gamma: float = 0.99
    tau: float = 0.01
    alpha: float = 0.1
    auto_alpha: bool = False
    target_entropy: float = 0.0
    sac_batch_size: int = 64
    warmup: int = 1000
    updates_per_step: float = 1.0
    capacity: int = 1_000_000
    clear_buffer: bool = False
    per_alpha: float = 0.6
    per_beta: float = 0.4
    # difficulty predictor
    pred_hidden: int = 64
    pred_layers: int = 3
    pred_lr: float = 1e-3
    pred_epochs: int = 20
    pred_batch_size: int = 32
    pred_dropout: float = 0.0
    pred_balance: bool = False
    pred_reinit: bool = False
    label_floor: float = 1e-8
    # experiments
    matrix_size: int = 0
    reweight_draws: int = 100_000
    reweight_bins: int = 10
    left_front_dx: float = 30.0
    left_front_dy_lanes: float = 0.5

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.profile not in PROFILES_NAMES:
            raise ConfigError(f"profile: unknown profile {self.profile!r}")
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"strategy: unknown strategy {self.strategy!r}; choose from {STRATEGIES}")
        for name in ("iterations", "eval_size", "train_size", "episodes", "eval_chunk", "jobs",
                     "gen_n_scenarios", "sac_hidden", "pred_hidden", "pred_epochs",
                     "pred_batch_size", "sac_batch_size", "n_max", "h_max"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name}: must be at least 1")
        if not 0.0 <= self.pred_dropout < 1.0:
            raise ConfigError("pred_dropout: must lie in [0, 1)")
        if self.dt <= 0:
            raise ConfigError("dt: must be positive")
        if self.gen_horizon_min > self.gen_horizon_max or self.gen_horizon_max > self.h_max:
            raise ConfigError("gen_horizon_max: need gen_horizon_min <= gen_horizon_max <= h_max")

    # -- typed views -----------------------------------------------------------
    def road(self) -> RoadGeometry:
        return RoadGeometry(self.num_lanes, self.lane_width, self.road_length, self.v_min, self.v_max)

    def limits(self) -> DynamicsLimits:
        return DynamicsLimits(self.a_min, self.a_max, -self.omega_max, self.omega_max, self.v_max)

    def sim(self) -> SimParams:
        return SimParams(self.road(), VehicleDims(self.vehicle_length, self.vehicle_width),
                         RewardCoeffs(self.rho_acc, self.rho_vel, self.rho_yaw, self.rho_lane),
                         self.limits(), self.dt, self.n_max)

    def sac(self, prioritized: bool | None = None) -> SacConfig:
        if prioritized is None:
            prioritized = self.strategy == "per"
        return SacConfig(hidden=self.sac_hidden, layers=self.sac_layers, lr=self.sac_lr,
                         gamma=self.gamma, tau=self.tau, alpha=self.alpha,
                         auto_alpha=self.auto_alpha, target_entropy=self.target_entropy,
                         batch_size=self.sac_batch_size, warmup=self.warmup,
                         updates_per_step=self.updates_per_step, capacity=self.capacity,
                         prioritized=prioritized, per_alpha=self.per_alpha, per_beta=self.per_beta)

    def gen(self) -> GenConfig:
        return GenConfig(n_scenarios=self.gen_n_scenarios, bv_count_weights=tuple(self.gen_bv_weights),
                         horizon_range=(self.gen_horizon_min, self.gen_horizon_max),
                         maneuver_weights={m: getattr(self, f"gen_w_{m}") for m in MANEUVERS},
                         av_speed_range=(self.gen_av_speed_min, self.gen_av_speed_max), seed=self.seed)

    def replace(self, **kw) -> "Config":
        return dataclasses.replace(self, **kw)


PROFILES_NAMES = ("desk", "paper")

PAPER_OVERRIDES = dict(
    profile="paper", gen_n_scenarios=65494, iterations=10, eval_size=4096, train_size=128,
    episodes=10, sac_hidden=256, sac_lr=1e-4, sac_batch_size=128, pred_hidden=256, pred_lr=1e-4,
    pred_batch_size=128)


def profile(name: str) -> Config:
    if name == "desk":
        return Config()
    if name == "paper":
        return Config(**PAPER_OVERRIDES)
    raise ConfigError(f"profile: unknown profile {name!r}")


_FIELDS = {f.name: f for f in fields(Config)}


def _parse_value(name: str, text: str):
    f = _FIELDS[name]
    kind = f.type if isinstance(f.type, str) else getattr(f.type, "__name__", str(f.type))
    text = text.strip()
    try:
        if kind == "bool":
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
        if kind.startswith("tuple"):
            return tuple(float(p) for p in text.split(",") if p.strip())
        return text
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {text!r} as {kind}") from None


def parse_pairs(text: str, source: str = "<config>") -> dict:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (p.strip() for p in line.split("=", 1))
        if key not in _FIELDS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        out[key] = _parse_value(key, value)
    return out


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ", ".join(repr(float(v)) for v in value)
    return str(value)


def dump_config(cfg: Config) -> str:
    return "".join(f"{f.name} = {_format(getattr(cfg, f.name))}\n" for f in fields(Config))


def load_config(path=None, overrides: dict | None = None) -> Config:
    """Defaults, then the file (whose ``profile`` key picks the base), then overrides."""
    pairs = {}
    if path is not None:
        p = Path(path)
        try:
            text = p.read_text()
        except OSError as exc:
            raise ConfigError(f"{p}: {exc.strerror}") from None
        pairs = parse_pairs(text, str(p))
    over = {k: v for k, v in (overrides or {}).items() if v is not None}
    unknown = set(over) - set(_FIELDS)
    if unknown:
        raise ConfigError(f"unknown keys {sorted(unknown)}")
    name = over.get("profile", pairs.get("profile", "desk"))
    base = profile(name)
    try:
        return base.replace(**{**pairs, **over})
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
