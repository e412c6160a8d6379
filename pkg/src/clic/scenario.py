"""Scenario library data model.

A scenario is an AV-agnostic recording: the initial AV state, the initial
states of N background vehicles (BVs) and H further frames of BV states.
Vehicle states are ``[x, y, v, theta]`` rows with x along the road, y lateral
(0 at the right road edge, increasing to the left), theta = 0 along the road.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from functools import cached_property
from pathlib import Path
from typing import NamedTuple

import numpy as np

FORMAT_VERSION = 1
CSV_COLUMNS = ("scenario_id", "t", "vehicle_id", "x", "y", "v", "theta")


class VehicleState(NamedTuple):
    x: float
    y: float
    v: float
    theta: float


class AvAction(NamedTuple):
    dv: float
    dtheta: float


@dataclass(frozen=True)
class RoadGeometry:
    num_lanes: int = 3
    lane_width: float = 3.2
    length: float = 200.0
    v_min: float = 0.0
    v_max: float = 40.0

    def __post_init__(self):
        if self.num_lanes < 1 or self.lane_width <= 0 or not self.v_max > self.v_min >= 0:
            raise ValueError(f"invalid road geometry {self}")

    @property
    def width(self) -> float:
        return self.num_lanes * self.lane_width

    def lane_of(self, y: float) -> int:
        return min(max(int(math.floor(y / self.lane_width)), 0), self.num_lanes - 1)

    def lane_center(self, k: int) -> float:
        return (k + 0.5) * self.lane_width


@dataclass(frozen=True)
class DynamicsLimits:
    a_min: float = -7.84
    a_max: float = 5.88
    omega_min: float = -math.pi / 3
    omega_max: float = math.pi / 3
    v_max: float = 40.0


class LibraryFormatError(ValueError):
    def __init__(self, path, index, detail):
        super().__init__(f"{path}: record {index}: {detail}")
        self.index = index


class ScenarioInvariantError(ValueError):
    def __init__(self, scenario_id, field_name, detail):
        super().__init__(f"scenario {scenario_id!r}: {field_name}: {detail}")
        self.scenario_id = scenario_id
        self.field = field_name


class FeatureOverflowError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Scenario:
    id: str
    dt: float
    av_init: np.ndarray          # (4,)
    bv_init: np.ndarray          # (N, 4)
    bv_frames: np.ndarray        # (H, N, 4), frames t = 1..H
    tags: tuple[str, ...] = ()   # optional per-BV generation labels

    def __post_init__(self):
        for name in ("av_init", "bv_init", "bv_frames"):
            arr = np.array(getattr(self, name), dtype=np.float64)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "tags", tuple(self.tags))

    @property
    def n_bv(self) -> int:
        return self.bv_init.shape[0]

    @property
    def horizon(self) -> int:
        return self.bv_frames.shape[0]

    def bv_states(self) -> np.ndarray:
        """BV states for t = 0..H, shape (H+1, N, 4)."""
        return np.concatenate([self.bv_init[None], self.bv_frames], axis=0)

    def __eq__(self, other):
        if not isinstance(other, Scenario):
            return NotImplemented
        return (self.id == other.id and self.dt == other.dt and self.tags == other.tags
                and np.array_equal(self.av_init, other.av_init)
                and self.bv_init.shape == other.bv_init.shape
                and np.array_equal(self.bv_init, other.bv_init)
                and self.bv_frames.shape == other.bv_frames.shape
                and np.array_equal(self.bv_frames, other.bv_frames))

    __hash__ = None  # type: ignore[assignment]


@dataclass(frozen=True)
class PackedLibrary:
    """Dense arrays for batched rollouts and featurization.

    ``bv[i, t]`` holds BV states at frame t (frame 0 = initial); frames past
    the scenario horizon repeat the last one.
    """
    av_init: np.ndarray   # (M, 4)
    bv: np.ndarray        # (M, h_max + 1, n_max, 4)
    present: np.ndarray   # (M, n_max) bool
    horizon: np.ndarray   # (M,)
    n_bv: np.ndarray      # (M,)


@dataclass(eq=False)
class ScenarioLibrary:
    scenarios: tuple[Scenario, ...]
    road: RoadGeometry = field(default_factory=RoadGeometry)
    dt: float = 0.04
    n_max: int = 4
    h_max: int = 100
    provenance: str = ""
    seed: int | None = None

    def __post_init__(self):
        self.scenarios = tuple(self.scenarios)
        ids = [s.id for s in self.scenarios]
        if len(set(ids)) != len(ids):
            raise ScenarioInvariantError(_first_dup(ids), "id", "ids must be unique")
        for s in self.scenarios:
            if s.dt != self.dt:
                raise ScenarioInvariantError(s.id, "dt", f"{s.dt} differs from library dt {self.dt}")

    def __len__(self):
        return len(self.scenarios)

    def __getitem__(self, i) -> Scenario:
        return self.scenarios[i]

    def __iter__(self):
        return iter(self.scenarios)

    def __eq__(self, other):
        if not isinstance(other, ScenarioLibrary):
            return NotImplemented
        return (self.road == other.road and self.dt == other.dt and self.n_max == other.n_max
                and self.h_max == other.h_max and self.provenance == other.provenance
                and self.seed == other.seed and len(self) == len(other)
                and all(a == b for a, b in zip(self.scenarios, other.scenarios)))

    @cached_property
    def ids(self) -> list[str]:
        return [s.id for s in self.scenarios]

    @cached_property
    def packed(self) -> PackedLibrary:
        m = len(self.scenarios)
        av = np.zeros((m, 4))
        bv = np.zeros((m, self.h_max + 1, self.n_max, 4))
        present = np.zeros((m, self.n_max), dtype=bool)
        horizon = np.zeros(m, dtype=np.int64)
        n_bv = np.zeros(m, dtype=np.int64)
        for i, s in enumerate(self.scenarios):
            n, h = s.n_bv, s.horizon
            av[i] = s.av_init
            states = s.bv_states()
            bv[i, :h + 1, :n] = states
            bv[i, h + 1:, :n] = states[-1]
            present[i, :n] = True
            horizon[i], n_bv[i] = h, n
        for a in (av, bv, present, horizon, n_bv):
            a.setflags(write=False)
        return PackedLibrary(av, bv, present, horizon, n_bv)


def _first_dup(ids):
    seen = set()
    for i in ids:
        if i in seen:
            return i
        seen.add(i)
    return None


# -- invariants ---------------------------------------------------------------

def check_structure(s: Scenario, n_max: int = 4, h_max: int = 100) -> None:
    """Raise ScenarioInvariantError on the first structural violation."""
    if not s.dt > 0:
        raise ScenarioInvariantError(s.id, "dt", "dt > 0 required")
    if s.av_init.shape != (4,):
        raise ScenarioInvariantError(s.id, "av_init", "expected 4 state values")
    if s.bv_init.ndim != 2 or s.bv_init.shape[1] != 4 or not 1 <= s.n_bv <= n_max:
        raise ScenarioInvariantError(s.id, "bv_init", f"expected 1..{n_max} BV states of width 4")
    if s.bv_frames.ndim != 3 or s.bv_frames.shape[1:] != s.bv_init.shape:
        raise ScenarioInvariantError(s.id, "bv_frames", f"every frame must hold exactly {s.n_bv} BV states")
    if not 1 <= s.horizon <= h_max:
        raise ScenarioInvariantError(s.id, "bv_frames", f"horizon {s.horizon} outside 1..{h_max}")
    for name, arr in (("av_init", s.av_init[None]), ("bv_init", s.bv_init),
                      ("bv_frames", s.bv_frames.reshape(-1, 4))):
        if not np.all(np.isfinite(arr)):
            raise ScenarioInvariantError(s.id, name, "all fields must be finite")
        if np.any(arr[:, 2] < 0):
            raise ScenarioInvariantError(s.id, f"{name}.v", f"v ≥ 0 violated (v = {arr[:, 2].min()})")
        if np.any(np.abs(arr[:, 3]) > math.pi):
            raise ScenarioInvariantError(s.id, f"{name}.theta", "|theta| ≤ π violated")


@dataclass(frozen=True)
class Violation:
    frame: int
    vehicle: int
    quantity: str
    value: float
    bound: tuple[float, float]

    def __str__(self):
        return (f"frame {self.frame} vehicle {self.vehicle}: {self.quantity}={self.value:.6g} "
                f"outside [{self.bound[0]:.6g}, {self.bound[1]:.6g}]")


def validate_scenario(s: Scenario, road: RoadGeometry | None = None,
                      limits: DynamicsLimits | None = None, tol: float = 1e-6) -> list[Violation]:
    """Dynamics and road-bound violations of every BV; empty when valid.

    Vehicle indices are 1-based (0 is the AV). Frame t refers to the state at
    t, or for rates to the transition t-1 -> t.
    """
    road = road or RoadGeometry()
    limits = limits or DynamicsLimits()
    states = s.bv_states()
    out: list[Violation] = []

    def flag(mask, values, quantity, lo, hi, frame_offset):
        for t, j in zip(*np.nonzero(mask)):
            out.append(Violation(int(t) + frame_offset, int(j) + 1, quantity,
                                 float(values[t, j]), (lo, hi)))

    acc = np.diff(states[:, :, 2], axis=0) / s.dt
    flag((acc < limits.a_min - tol) | (acc > limits.a_max + tol), acc, "acceleration",
         limits.a_min, limits.a_max, 1)
    dth = np.diff(states[:, :, 3], axis=0)
    omega = (dth - 2 * np.pi * np.round(dth / (2 * np.pi))) / s.dt
    flag((omega < limits.omega_min - tol) | (omega > limits.omega_max + tol), omega,
         "angular_velocity", limits.omega_min, limits.omega_max, 1)
    v = states[:, :, 2]
    vmax = min(limits.v_max, road.v_max)
    flag((v < -tol) | (v > vmax + tol), v, "speed", 0.0, vmax, 0)
    y = states[:, :, 1]
    flag((y < 0.0) | (y > road.width), y, "lateral_position", 0.0, road.width, 0)
    out.sort(key=lambda v_: (v_.frame, v_.vehicle, v_.quantity))
    return out


# -- file formats -------------------------------------------------------------

def _header(lib: ScenarioLibrary) -> dict:
    return {"format_version": FORMAT_VERSION, "dt": lib.dt, "road": asdict(lib.road),
            "n_max": lib.n_max, "h_max": lib.h_max, "provenance": lib.provenance,
            "seed": lib.seed}


def scenario_record(s: Scenario) -> dict:
    rec = {"id": s.id, "av_init": s.av_init.tolist(), "bv_init": s.bv_init.tolist(),
           "bv_frames": s.bv_frames.tolist()}
    if s.tags:
        rec["tags"] = list(s.tags)
    return rec


def write_library(lib: ScenarioLibrary, path, fmt: str = "jsonl") -> None:
    path = Path(path)
    if fmt == "jsonl":
        with open(path, "w") as fh:
            fh.write(json.dumps(_header(lib)) + "\n")
            for s in lib:
                fh.write(json.dumps(scenario_record(s)) + "\n")
    elif fmt == "flat_csv":
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(CSV_COLUMNS)
            for s in lib:
                w.writerow([s.id, 0, 0, *map(repr, s.av_init.tolist())])
                for t, frame in enumerate(s.bv_states()):
                    for j, st in enumerate(frame):
                        w.writerow([s.id, t, j + 1, *map(repr, st.tolist())])
    else:
        raise ValueError(f"unknown library format {fmt!r}")


def load_library(path, fmt: str = "jsonl", *, road: RoadGeometry | None = None,
                 dt: float = 0.04, n_max: int = 4, h_max: int = 100,
                 limits: DynamicsLimits | None = None, validate: bool = True) -> ScenarioLibrary:
    """Read a library; ``road``/``dt``/``n_max``/``h_max`` only apply to CSV,
    which carries no header."""
    path = Path(path)
    if fmt == "jsonl":
        lib = _load_jsonl(path)
    elif fmt == "flat_csv":
        lib = _load_csv(path, road or RoadGeometry(), dt, n_max, h_max)
    else:
        raise ValueError(f"unknown library format {fmt!r}")
    for s in lib:
        check_structure(s, lib.n_max, lib.h_max)
        if validate:
            bad = validate_scenario(s, lib.road, limits)
            if bad:
                raise ScenarioInvariantError(s.id, bad[0].quantity, str(bad[0]))
    return lib


def _load_jsonl(path: Path) -> ScenarioLibrary:
    with open(path) as fh:
        lines = [ln for ln in fh.read().splitlines()]
    if not lines:
        raise LibraryFormatError(path, 0, "empty file")
    try:
        head = json.loads(lines[0])
        if head.get("format_version") != FORMAT_VERSION:
            raise LibraryFormatError(path, 0, f"unsupported format_version {head.get('format_version')!r}")
        road = RoadGeometry(**head["road"])
        dt = float(head["dt"])
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise LibraryFormatError(path, 0, f"bad header: {exc}") from exc
    scenarios = []
    for i, line in enumerate(lines[1:], start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            s = Scenario(str(rec["id"]), dt, rec["av_init"], np.array(rec["bv_init"], dtype=np.float64),
                         np.array(rec["bv_frames"], dtype=np.float64), tuple(rec.get("tags", ())))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise LibraryFormatError(path, i, f"unparseable scenario record: {exc}") from exc
        scenarios.append(s)
    return ScenarioLibrary(tuple(scenarios), road, dt, int(head.get("n_max", 4)),
                           int(head.get("h_max", 100)), head.get("provenance", ""), head.get("seed"))


def _load_csv(path: Path, road, dt, n_max, h_max) -> ScenarioLibrary:
    rows: dict[str, dict] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != CSV_COLUMNS:
            raise LibraryFormatError(path, 0, f"expected columns {CSV_COLUMNS}")
        for i, row in enumerate(reader, start=1):
            try:
                sid, t, vid = row[0], int(row[1]), int(row[2])
                st = [float(v) for v in row[3:7]]
                if len(st) != 4:
                    raise ValueError("expected 4 state values")
            except (ValueError, IndexError) as exc:
                raise LibraryFormatError(path, i, str(exc)) from exc
            rec = rows.setdefault(sid, {"av": None, "bv": {}})
            if vid == 0:
                rec["av"] = st
            else:
                rec["bv"].setdefault(t, {})[vid] = st
    scenarios = []
    for k, (sid, rec) in enumerate(rows.items()):
        if rec["av"] is None or 0 not in rec["bv"]:
            raise LibraryFormatError(path, k, f"scenario {sid!r} lacks initial states")
        frames = [rec["bv"][t] for t in sorted(rec["bv"])]
        n = len(frames[0])
        if any(sorted(f) != list(range(1, n + 1)) for f in frames):
            raise ScenarioInvariantError(sid, "bv_frames", "every frame must hold the same vehicles")
        arr = np.array([[f[j] for j in range(1, n + 1)] for f in frames])
        scenarios.append(Scenario(sid, dt, rec["av"], arr[0], arr[1:]))
    return ScenarioLibrary(tuple(scenarios), road, dt, n_max, h_max)


# -- featurization ------------------------------------------------------------

def feature_dim(n_max: int = 4, h_max: int = 100) -> int:
    return 6 * (1 + n_max * h_max)


def feature_index(t: int, vehicle: int, channel: int, n_max: int = 4) -> int:
    """Flat index of BV ``vehicle`` (1-based) at frame ``t`` (1-based);
    channels are (t, id, x, y, v, theta)."""
    return 6 * (1 + (t - 1) * n_max + (vehicle - 1)) + channel


def _scales(road: RoadGeometry, n_max, h_max, normalize):
    if not normalize:
        return np.ones(6)
    return np.array([h_max, n_max, road.length, road.width, road.v_max, math.pi], dtype=np.float64)


def featurize(s: Scenario, n_max: int = 4, h_max: int = 100, road: RoadGeometry | None = None,
              normalize: bool = True) -> np.ndarray:
    """Flatten a scenario into 6-tuples (t, id, x, y, v, theta).

    Slot 0 is the AV at t=0; then BV frames t = 1..H in frame-major,
    vehicle-minor order. Unused slots stay zero.
    """
    if s.n_bv > n_max or s.horizon > h_max:
        raise FeatureOverflowError(
            f"scenario {s.id!r} has N={s.n_bv}, H={s.horizon}; capacity is N={n_max}, H={h_max}")
    road = road or RoadGeometry()
    sc = _scales(road, n_max, h_max, normalize)
    out = np.zeros((1 + n_max * h_max, 6))
    out[0, 2:] = s.av_init
    tup = np.zeros((s.horizon, n_max, 6))
    tup[:, :s.n_bv, 0] = np.arange(1, s.horizon + 1)[:, None]
    tup[:, :s.n_bv, 1] = np.arange(1, s.n_bv + 1)[None, :]
    tup[:, :s.n_bv, 2:] = s.bv_frames
    out[1:1 + s.horizon * n_max] = tup.reshape(-1, 6)
    out /= sc
    return out.reshape(-1)


def featurize_library(lib: ScenarioLibrary, normalize: bool = True) -> np.ndarray:
    """Row i equals ``featurize(lib[i])``; vectorized over the packed arrays."""
    p = lib.packed
    m, n_max, h_max = len(lib), lib.n_max, lib.h_max
    sc = _scales(lib.road, n_max, h_max, normalize)
    out = np.zeros((m, 1 + n_max * h_max, 6))
    out[:, 0, 2:] = p.av_init
    t = np.arange(1, h_max + 1)
    occ = (t[None, :, None] <= p.horizon[:, None, None]) & p.present[:, None, :]
    tup = np.zeros((m, h_max, n_max, 6))
    tup[..., 0] = t[None, :, None]
    tup[..., 1] = np.arange(1, n_max + 1)[None, None, :]
    tup[..., 2:] = p.bv[:, 1:]
    tup *= occ[..., None]
    out[:, 1:] = tup.reshape(m, -1, 6)
    out /= sc
    return out.reshape(m, -1)


# -- statistics -----------------------------------------------------------------

HIST_SPECS = {
    "bv_yaw": (-0.3, 0.3, 30),
    "bv_speed": (0.0, 40.0, 40),
    "bv_acceleration": (-8.0, 6.0, 28),
    "bv_bv_distance": (0.0, 100.0, 50),
    "initial_bv_av_distance": (0.0, 100.0, 50),
}


@dataclass
class StatsReport:
    n_scenarios: int
    scenarios_per_bv_count: dict[int, int]
    histograms: dict[str, dict]
    relative_position: dict

    def to_json(self) -> str:
        d = asdict(self)
        d["scenarios_per_bv_count"] = {str(k): v for k, v in self.scenarios_per_bv_count.items()}
        return json.dumps(d, indent=2)


def _hist(values, lo, hi, bins) -> dict:
    values = np.clip(np.asarray(values, dtype=np.float64).reshape(-1), lo, hi)
    counts, edges = np.histogram(values, bins=bins, range=(lo, hi))
    return {"edges": edges.tolist(), "counts": counts.tolist(), "n": int(values.size)}


def library_stats(lib: ScenarioLibrary) -> StatsReport:
    """Distributions of BV yaw, speed, acceleration, spacing and initial placement."""
    if len(lib) == 0:
        raise ValueError("library is empty")
    yaw, speed, acc, bvbv, init_d, rel = [], [], [], [], [], []
    per_n: dict[int, int] = {}
    for s in lib:
        st = s.bv_states()
        per_n[s.n_bv] = per_n.get(s.n_bv, 0) + 1
        yaw.append(st[:, :, 3].ravel())
        speed.append(st[:, :, 2].ravel())
        acc.append((np.diff(st[:, :, 2], axis=0) / s.dt).ravel())
        if s.n_bv > 1:
            iu, ju = np.triu_indices(s.n_bv, k=1)
            d = np.hypot(st[:, iu, 0] - st[:, ju, 0], st[:, iu, 1] - st[:, ju, 1])
            bvbv.append(d.ravel())
        dx = s.bv_init[:, 0] - s.av_init[0]
        dy = s.bv_init[:, 1] - s.av_init[1]
        init_d.append(np.hypot(dx, dy))
        rel.append(np.stack([dx, dy], axis=1))
    cat = lambda xs: np.concatenate(xs) if xs else np.zeros(0)  # noqa: E731
    data = {"bv_yaw": cat(yaw), "bv_speed": cat(speed), "bv_acceleration": cat(acc),
            "bv_bv_distance": cat(bvbv), "initial_bv_av_distance": cat(init_d)}
    hists = {k: _hist(v, *HIST_SPECS[k]) for k, v in data.items()}
    rel = np.concatenate(rel)
    rx = np.clip(rel[:, 0], -60.0, 60.0)
    ry = np.clip(rel[:, 1], -10.0, 10.0)
    counts, ex, ey = np.histogram2d(rx, ry, bins=(24, 10), range=((-60, 60), (-10, 10)))
    relpos = {"x_edges": ex.tolist(), "y_edges": ey.tolist(),
              "counts": counts.astype(int).tolist(), "n": int(len(rel))}
    return StatsReport(len(lib), dict(sorted(per_n.items())), hists, relpos)
