"""Safety, efficiency and comfort metrics plus the analysis experiments.

Outcome tables keep per-scenario sufficient statistics (sums and counts of the
per-step quantities) so that pooled, step-weighted means can be recomputed
from a CSV without the trajectories.
"""
from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.stats import spearmanr

from .curriculum import DifficultyPredictor, label_histograms, predict_all, \
    selection_probabilities, train_predictor, weighted_sample
from .loop import STAGE_EVAL, STAGE_PREDICT, STAGE_SELECT, Evaluator, PolicySnapshot, child_rng, \
    evaluate_av, initial_predictor
from .sac import SacAgent
from .scenario import ScenarioLibrary
from .sim import BatchOutcome, SimParams

STAT_COLUMNS = ("sum_speed", "sum_acc", "sum_jerk", "n_jerk", "sum_ang_vel", "sum_lat_acc")


class MetricsError(ValueError):
    pass


# -- outcome tables -------------------------------------------------------------

@dataclass
class OutcomeTable:
    ids: list[str]
    label: np.ndarray          # (M,) 0/1
    steps: np.ndarray          # (M,)
    elapsed_time: np.ndarray   # (M,) s
    distance: np.ndarray       # (M,) m
    stats: np.ndarray          # (M, len(STAT_COLUMNS))

    def __post_init__(self):
        if len(set(self.ids)) != len(self.ids):
            raise MetricsError("outcome table ids must be unique")

    def __len__(self):
        return len(self.ids)

    @classmethod
    def from_outcome(cls, ids, out: BatchOutcome, dt: float) -> "OutcomeTable":
        m = len(ids)
        stats = np.zeros((m, len(STAT_COLUMNS)))
        dist = np.zeros(m)
        for r in range(m):
            s = int(out.steps[r])
            tr = out.traj[r, :s + 1]
            dist[r] = tr[-1, 0] - tr[0, 0]
            stats[r] = step_statistics(tr[:, 2], tr[:, 3], dt)
        return cls(list(ids), out.label.astype(np.int64), out.steps.astype(np.int64),
                   out.steps * dt, dist, stats)

    def write_csv(self, path) -> None:
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        with open(tmp, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["scenario_id", "label", "steps", "elapsed_time", "distance", *STAT_COLUMNS])
            for i, sid in enumerate(self.ids):
                w.writerow([sid, int(self.label[i]), int(self.steps[i]), repr(float(self.elapsed_time[i])),
                            repr(float(self.distance[i])), *(repr(float(v)) for v in self.stats[i])])
        os.replace(tmp, path)

    @classmethod
    def read_csv(cls, path) -> "OutcomeTable":
        with open(path, newline="") as f:
            rows = list(csv.DictReader(f))
        if not rows:
            raise MetricsError(f"{path}: empty outcome table")
        try:
            return cls([r["scenario_id"] for r in rows],
                       np.array([int(r["label"]) for r in rows]),
                       np.array([int(r["steps"]) for r in rows]),
                       np.array([float(r["elapsed_time"]) for r in rows]),
                       np.array([float(r["distance"]) for r in rows]),
                       np.array([[float(r[c]) for c in STAT_COLUMNS] for r in rows]))
        except (KeyError, ValueError) as exc:
            raise MetricsError(f"{path}: malformed outcome table ({exc})") from None


def step_statistics(speed, heading, dt: float) -> np.ndarray:
    """Sums of per-step speed, |dv|/dt, |d acc|/dt, |d theta|/dt and v*|d theta|/dt.

    ``speed`` and ``heading`` include the initial state, so S steps give S
    speed samples (post-step), S accelerations and S - 1 jerks.
    """
    v = np.asarray(speed, dtype=np.float64)
    th = np.asarray(heading, dtype=np.float64)
    if len(v) < 2:
        return np.zeros(len(STAT_COLUMNS))
    acc = np.diff(v) / dt
    dth = np.diff(th)
    dth = (dth + np.pi) % (2.0 * np.pi) - np.pi
    ang = np.abs(dth) / dt
    jerk = np.abs(np.diff(acc)) / dt
    return np.array([v[1:].sum(), np.abs(acc).sum(), jerk.sum(), len(jerk), ang.sum(),
                     (v[1:] * ang).sum()])


def test_all(agent, lib: ScenarioLibrary, sim: SimParams, jobs: int = 1, chunk: int = 64,
             obs_filter=None, evaluator: Evaluator | None = None) -> OutcomeTable:
    """Deterministic rollout of every library scenario."""
    if len(lib) == 0:
        raise MetricsError("library is empty")
    policy = agent if isinstance(agent, PolicySnapshot) else PolicySnapshot(agent, obs_filter)
    if evaluator is not None:
        out = evaluator.rollout(policy, np.arange(len(lib)))
    else:
        with Evaluator(lib, sim, jobs, chunk) as ev:
            out = ev.rollout(policy, np.arange(len(lib)))
    return OutcomeTable.from_outcome(lib.ids, out, sim.dt)


test_all.__test__ = False  # not a pytest test despite the name


# -- metrics --------------------------------------------------------------------

@dataclass
class MetricsReport:
    SR: float
    FNR: float | None
    TNR: float | None
    CPS: float | None
    CPM: float | None
    vel: float | None
    succ_vel: float | None
    acc: float | None
    jerk: float | None
    ang_vel: float | None
    lat_acc: float | None
    TP: int
    FN: int
    FP: int
    TN: int
    M: int
    N_acc: int
    T_total: float
    D_total: float

    def to_json(self) -> dict:
        return asdict(self)


def _ratio(num, den):
    return float(num / den) if den > 0 else None


def confusion(before_labels, after_labels) -> tuple[int, int, int, int]:
    """(TP, FN, FP, TN) with failure before training as the positive class."""
    b = np.asarray(before_labels).astype(bool)
    a = np.asarray(after_labels).astype(bool)
    return (int(np.sum(b & a)), int(np.sum(b & ~a)), int(np.sum(~b & a)), int(np.sum(~b & ~a)))


def compute_metrics(before: OutcomeTable, after: OutcomeTable) -> MetricsReport:
    if set(before.ids) != set(after.ids) or len(before.ids) != len(after.ids):
        raise MetricsError("before and after tables cover different scenarios")
    if len(after) == 0:
        raise MetricsError("outcome tables are empty")
    pos = {sid: i for i, sid in enumerate(before.ids)}
    order = np.array([pos[sid] for sid in after.ids])
    tp, fn, fp, tn = confusion(before.label[order], after.label)
    m = len(after)
    n_acc = int(after.label.sum())
    t_total = float(after.elapsed_time.sum())
    d_total = float(after.distance.sum())
    steps = after.steps.astype(np.float64)
    tot = after.stats.sum(axis=0)
    ok = after.label == 0
    n_steps = float(steps.sum())
    return MetricsReport(
        SR=100.0 * (fn + tn) / m,
        FNR=None if tp + fn == 0 else 100.0 * fn / (tp + fn),
        TNR=None if tn + fp == 0 else 100.0 * tn / (tn + fp),
        CPS=_ratio(n_acc, t_total), CPM=_ratio(n_acc, d_total),
        vel=_ratio(tot[0], n_steps),
        succ_vel=_ratio(after.stats[ok, 0].sum(), steps[ok].sum()),
        acc=_ratio(tot[1], n_steps), jerk=_ratio(tot[2], tot[3]),
        ang_vel=_ratio(tot[4], n_steps), lat_acc=_ratio(tot[5], n_steps),
        TP=tp, FN=fn, FP=fp, TN=tn, M=m, N_acc=n_acc, T_total=t_total, D_total=d_total)


# -- matrix experiment ----------------------------------------------------------

def matrix_curricula(predictors, features, ids, n: int, seed: int, floor: float = 1e-8):
    """One fixed test curriculum per predictor checkpoint, seeded per column."""
    out = []
    for j, pred in enumerate(predictors, start=1):
        rng = child_rng(seed, j, STAGE_SELECT + 100)
        out.append(weighted_sample(ids, n, predict_all(pred, features), rng, j, floor))
    return out


def matrix_experiment(agents, predictors, lib: ScenarioLibrary, features, n: int, seed: int,
                      evaluator: Evaluator, floor: float = 1e-8) -> np.ndarray:
    """Cell (i, j) = SR (%) of agent i on the curriculum chosen by predictor j."""
    if len(agents) < 2 or len(predictors) < 2:
        raise MetricsError("matrix experiment needs at least two checkpoints of each kind")
    curricula = matrix_curricula(predictors, features, lib.ids, n, seed, floor)
    mat = np.zeros((len(agents), len(predictors)))
    for i, agent in enumerate(agents):
        policy = PolicySnapshot(agent)
        for j, cur in enumerate(curricula):
            idx = np.sort(cur.indices)
            mat[i, j] = 100.0 * (1.0 - evaluator.rollout(policy, idx).label.mean())
    return mat


def mean_spearman(mat: np.ndarray, axis: int, skip_first_row: bool = False) -> float:
    """Spearman correlation of SR against the checkpoint index along ``axis``
    (0: down each column, agent trend; 1: along each row, predictor trend),
    averaged over the other axis; constant series are skipped."""
    m = np.asarray(mat, dtype=np.float64)
    if skip_first_row:
        m = m[1:]
    series = m.T if axis == 0 else m
    vals = []
    for s in series:
        if np.ptp(s) == 0:
            continue
        vals.append(spearmanr(np.arange(len(s)), s).statistic)
    return float(np.mean(vals)) if vals else float("nan")


# -- reweighting analysis -------------------------------------------------------

@dataclass
class RatioFit:
    bin_mean_label: np.ndarray
    ratio: np.ndarray
    slope: float
    r2: float


def ratio_fit(labels, n_draws: int, rng, bins: int = 10, floor: float = 1e-8):
    """Empirical uniform and weighted label histograms and their per-bin ratio.

    The ratio (weighted freq / uniform freq) of every occupied bin is fitted
    by a line through the origin against the bin's mean label.
    """
    labels = np.asarray(labels, dtype=np.float64)
    m = len(labels)
    edges, which = label_histograms(labels, bins)
    uni = rng.integers(m, size=n_draws)
    wtd = rng.choice(m, size=n_draws, replace=True, p=selection_probabilities(labels, floor))
    h_uni = np.bincount(which[uni], minlength=bins) / n_draws
    h_wtd = np.bincount(which[wtd], minlength=bins) / n_draws
    occ = (h_uni > 0) & (h_wtd > 0)
    sums = np.bincount(which, weights=labels, minlength=bins)
    counts = np.bincount(which, minlength=bins)
    mean_label = np.divide(sums, counts, out=np.zeros(bins), where=counts > 0)
    x, y = mean_label[occ], h_wtd[occ] / h_uni[occ]
    slope = float(x @ y / (x @ x)) if x @ x > 0 else float("nan")
    ss_tot = float(np.sum((y - y.mean()) ** 2)) if len(y) else 0.0
    ss_res = float(np.sum((y - slope * x) ** 2)) if len(y) else 0.0
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else float("nan")
    hist = {"edges": edges.tolist(), "uniform": h_uni.tolist(), "weighted": h_wtd.tolist()}
    return hist, RatioFit(mean_label, np.where(occ, h_wtd / np.where(occ, h_uni, 1.0), np.nan),
                          slope, r2)


def reweighting_analysis(pred_before: DifficultyPredictor, pred_after: DifficultyPredictor,
                         features, n_draws: int, rng, bins: int = 10, floor: float = 1e-8) -> dict:
    lb = predict_all(pred_before, features)
    la = predict_all(pred_after, features)
    out = {"pairs": np.stack([lb, la], axis=1)}
    for name, labels in (("before", lb), ("after", la)):
        hist, fit = ratio_fit(labels, n_draws, rng, bins, floor)
        out[name] = {"histograms": hist, "bin_mean_label": fit.bin_mean_label.tolist(),
                     "ratio": [None if math.isnan(r) else float(r) for r in fit.ratio],
                     "slope": fit.slope, "r2": fit.r2}
    return out


# -- individualization ----------------------------------------------------------

class PerceptionMask:
    """Zero the observation slots of BVs that are left-front of the AV.

    Left-front: 0 < x_BV - x_AV <= ``dx_max`` and y_BV - y_AV > ``dy_min``.
    Works on the relative BV slots produced by :func:`clic.sim.observe`.
    """

    def __init__(self, sim: SimParams, dx_max: float = 30.0, dy_lanes: float = 0.5):
        self.n_max = sim.n_max
        self.dx_scale = sim.obs_dx_scale
        self.lane_width = sim.road.lane_width
        self.dx_max = dx_max
        self.dy_min = dy_lanes * sim.road.lane_width

    def hidden(self, obs):
        slots = np.asarray(obs).reshape(len(obs), 1 + self.n_max, 4)[:, 1:]
        dx = slots[..., 0] * self.dx_scale
        dy = slots[..., 1] * self.lane_width
        return (dx > 0.0) & (dx <= self.dx_max) & (dy > self.dy_min)

    def __call__(self, obs):
        obs = np.array(obs, dtype=np.float64)
        slots = obs.reshape(len(obs), 1 + self.n_max, 4)
        slots[:, 1:][self.hidden(obs)] = 0.0
        return obs


def left_front_distances(lib: ScenarioLibrary, dx_max: float = 30.0, dy_min: float = 1.6):
    """Distance from the AV to its nearest left-front BV at t=0 (nan if none)."""
    p = lib.packed
    d = p.bv[:, 0, :, :2] - p.av_init[:, None, :2]
    lf = p.present & (d[..., 0] > 0.0) & (d[..., 0] <= dx_max) & (d[..., 1] > dy_min)
    dist = np.where(lf, np.hypot(d[..., 0], d[..., 1]), np.inf).min(axis=1)
    return np.where(np.isfinite(dist), dist, np.nan)


def individualization_experiment(agent: SacAgent, cfg, lib: ScenarioLibrary, features,
                                 evaluator: Evaluator, n_select: int | None = None,
                                 seed: int | None = None) -> dict:
    """Select a curriculum for the agent with and without the perception mask.

    Both arms share evaluation draws, predictor initialization and selection
    seeds, so they differ only through the labels the mask induces.
    """
    seed = cfg.seed if seed is None else seed
    n_select = n_select or cfg.train_size
    sim = cfg.sim()
    mask = PerceptionMask(sim, cfg.left_front_dx, cfg.left_front_dy_lanes)
    dist = left_front_distances(lib, cfg.left_front_dx, cfg.left_front_dy_lanes * cfg.road().lane_width)
    has_lf = ~np.isnan(dist)
    out = {"library_left_front_proportion": float(has_lf.mean())}
    for arm, filt in (("masked", mask), ("unmasked", None)):
        idx, labels, _ = evaluate_av(agent, evaluator, cfg.eval_size, child_rng(seed, 1, STAGE_EVAL),
                                     obs_filter=filt)
        pred = initial_predictor(cfg.replace(seed=seed), features.shape[1])
        curve = train_predictor(pred, features[idx], labels, cfg.pred_epochs, cfg.pred_batch_size,
                                child_rng(seed, 1, STAGE_PREDICT))
        l_all = predict_all(pred, features)
        cur = weighted_sample(lib.ids, n_select, l_all, child_rng(seed, 1, STAGE_SELECT), 1,
                              cfg.label_floor)
        p = selection_probabilities(l_all, cfg.label_floor)
        sel = cur.indices
        out[arm] = {
            "eval_success_rate": float(100.0 * (1.0 - labels.mean())),
            "left_front_proportion": float(has_lf[sel].mean()),
            "expected_left_front_proportion": float(p[has_lf].sum()),
            "left_front_distances": [float(v) for v in dist[sel][has_lf[sel]]],
            "selected_ids": list(cur.ids),
            "predictor_loss": [float(v) for v in curve],
        }
    return out


# -- exports ----------------------------------------------------------------------

def write_json(path, obj) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(obj, indent=1, sort_keys=True, default=_jsonable))
    os.replace(tmp, path)


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    raise TypeError(f"cannot serialize {type(o).__name__}")


def write_matrix_csv(path, mat) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["agent_iteration", *(f"predictor_{j + 1}" for j in range(mat.shape[1]))])
        for i, row in enumerate(mat):
            w.writerow([i + 1, *(repr(float(v)) for v in row)])


def write_pairs_csv(path, pairs) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["label_before", "label_after"])
        for a, b in pairs:
            w.writerow([repr(float(a)), repr(float(b))])

