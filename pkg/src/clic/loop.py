"""Closed-loop training: evaluate, predict difficulty, select, train, repeat.

Randomness comes from one master seed. Every (iteration, stage) pair gets its
own child generator, so the number of workers or a resume point never shifts
any stream. Evaluation rollouts run in fixed-size chunks over scenarios sorted
by library index, which makes pooled and serial evaluation bit-identical.
"""
from __future__ import annotations

import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from multiprocessing import get_context
from pathlib import Path

import numpy as np

from .config import Config, dump_config, parse_pairs
from .curriculum import DifficultyPredictor, baseline_select, predict_all, \
    train_predictor, weighted_sample
from .nn import read_container, write_container
from .sac import SacAgent, make_buffer, sample_batch
from .scenario import ScenarioLibrary, featurize_library
from .sim import BatchOutcome, HighwayEnv, SimParams, rollout_batch

log = logging.getLogger(__name__)

STAGE_INIT, STAGE_EVAL, STAGE_PREDICT, STAGE_SELECT, STAGE_TRAIN = range(5)


def child_rng(seed: int, iteration: int, stage: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(iteration, stage)))


def child_seed(seed: int, iteration: int, stage: int) -> int:
    return int(np.random.SeedSequence(seed, spawn_key=(iteration, stage)).generate_state(1)[0])


class RunError(RuntimeError):
    def __init__(self, message, records):
        super().__init__(message)
        self.records = records


# -- evaluation ---------------------------------------------------------------

class PolicySnapshot:
    """Deterministic actor copy that can be shipped to worker processes."""

    def __init__(self, agent: SacAgent, obs_filter=None):
        self.actor = agent.actor.copy()
        self.act_dim = agent.act_dim
        self.act_low, self.act_high = agent.act_low.copy(), agent.act_high.copy()
        self.obs_filter = obs_filter

    def __call__(self, obs_batch):
        if self.obs_filter is not None:
            obs_batch = self.obs_filter(obs_batch)
        u = np.tanh(self.actor.forward(obs_batch)[:, :self.act_dim])
        return np.where(u >= 0.0, u * self.act_high, -u * self.act_low)


_WORKER = {}


def _init_worker(packed, sim):
    _WORKER["packed"], _WORKER["sim"] = packed, sim


def _run_chunk(policy, idx):
    return rollout_batch(policy, _WORKER["packed"], idx, _WORKER["sim"])


def concat_outcomes(parts: list[BatchOutcome]) -> BatchOutcome:
    return BatchOutcome(*(np.concatenate([getattr(p, f) for p in parts])
                          for f in ("label", "code", "steps", "traj")))


class Evaluator:
    """Deterministic batched rollouts over library indices, serial or pooled."""

    def __init__(self, lib: ScenarioLibrary, sim: SimParams, jobs: int = 1, chunk: int = 64):
        self.lib, self.sim, self.jobs, self.chunk = lib, sim, int(jobs), int(chunk)
        self._pool = None
        if self.jobs > 1:
            self._pool = ProcessPoolExecutor(self.jobs, mp_context=get_context("fork"),
                                             initializer=_init_worker, initargs=(lib.packed, sim))

    def rollout(self, policy, idx) -> BatchOutcome:
        idx = np.asarray(idx, dtype=np.int64)
        if len(idx) == 0:
            raise ValueError("no scenarios to roll out")
        chunks = [idx[lo:lo + self.chunk] for lo in range(0, len(idx), self.chunk)]
        if self._pool is None:
            parts = [rollout_batch(policy, self.lib.packed, c, self.sim) for c in chunks]
        else:
            parts = list(self._pool.map(_run_chunk, [policy] * len(chunks), chunks))
        return concat_outcomes(parts)

    def close(self):
        if self._pool is not None:
            self._pool.shutdown()
            self._pool = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def evaluate_av(agent, evaluator: Evaluator, m: int, rng, obs_filter=None):
    """Deterministic rollouts on m distinct scenarios drawn uniformly.

    Returns (sorted library indices, 0/1 labels, outcome); never touches the
    agent's parameters.
    """
    size = len(evaluator.lib)
    if not 1 <= m <= size:
        raise ValueError(f"eval size {m} outside [1, {size}]")
    idx = np.sort(rng.choice(size, size=m, replace=False))
    out = evaluator.rollout(PolicySnapshot(agent, obs_filter), idx)
    return idx, out.label.copy(), out


# -- training -------------------------------------------------------------------

@dataclass
class TrainerState:
    """Learner state that lives across iterations next to the agent."""
    buffer: object
    env_steps: int = 0
    update_credit: float = 0.0


def train_av(agent: SacAgent, state: TrainerState, scenarios, episodes: int, rng,
             sim: SimParams) -> dict:
    """Shuffled stochastic episodes over the curriculum with SAC updates.

    Actions are uniform random until ``warmup`` environment steps have been
    taken; updates start once the buffer holds ``max(warmup, batch_size)``
    transitions. Only accidents end bootstrapping; hitting the horizon or the
    end of the road is a time limit.
    """
    if len(scenarios) == 0:
        raise ValueError("curriculum is empty")
    cfg = agent.cfg
    env = HighwayEnv(sim)
    buf = state.buffer
    returns, accidents, steps_per_ep = [], [], []
    losses = {"q1": [], "q2": [], "actor": [], "alpha_value": []}
    for _ in range(episodes):
        for k in rng.permutation(len(scenarios)):
            obs = env.reset(scenarios[k])
            done, ret, n = False, 0.0, 0
            while not done:
                if state.env_steps < cfg.warmup:
                    u = rng.uniform(-1.0, 1.0, size=agent.act_dim)
                else:
                    u = agent.policy_u(obs[None], "stochastic", rng)[0]
                nxt, r, done = env.step(agent.scale(u))
                buf.add(obs, u, r.total, nxt, float(env.state.accident != 0))
                obs = nxt
                ret += r.total
                n += 1
                state.env_steps += 1
                if len(buf) >= max(cfg.warmup, cfg.batch_size):
                    state.update_credit += cfg.updates_per_step
                    while state.update_credit >= 1.0:
                        state.update_credit -= 1.0
                        info = agent.update(sample_batch(buf, cfg.batch_size, rng), rng, buf)
                        for key in losses:
                            losses[key].append(info[key])
            returns.append(ret)
            accidents.append(int(env.state.accident != 0))
            steps_per_ep.append(n)
    mean = lambda v: float(np.mean(v)) if v else None  # noqa: E731
    return {"episodes": len(returns), "env_steps": int(sum(steps_per_ep)),
            "updates": len(losses["q1"]), "mean_return": mean(returns),
            "episode_accident_rate": mean(accidents), "returns": [float(r) for r in returns],
            **{f"mean_{k}_loss" if k != "alpha_value" else "final_alpha":
               (mean(v) if k != "alpha_value" else (float(v[-1]) if v else agent.alpha))
               for k, v in losses.items()}}


# -- full loop ------------------------------------------------------------------

@dataclass
class IterationRecord:
    iteration: int
    eval_ids: list[str]
    eval_labels: list[int]
    eval_success_rate: float
    curriculum: dict
    predictor_loss: list[float]
    training: dict
    agent_checkpoint: str
    predictor_checkpoint: str
    agent_checksum: int
    extra: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return asdict(self)


class RunPaths:
    def __init__(self, root):
        self.root = Path(root)

    def agent(self, k):
        return self.root / "checkpoints" / f"agent_{k:03d}.bin"

    def predictor(self, k):
        return self.root / "checkpoints" / f"predictor_{k:03d}.bin"

    def record(self, k):
        return self.root / "records" / f"iter_{k:03d}.json"

    def curriculum(self, k):
        return self.root / "curricula" / f"curriculum_{k:03d}.json"

    def buffer(self, k):
        return self.root / "state" / f"learner_{k:03d}.bin"

    @property
    def config(self):
        return self.root / "config.cfg"

    def make(self):
        for sub in ("checkpoints", "records", "curricula", "state"):
            (self.root / sub).mkdir(parents=True, exist_ok=True)


def _atomic_json(path: Path, obj) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(obj, indent=1, sort_keys=True))
    os.replace(tmp, path)


def initial_agent(cfg: Config) -> SacAgent:
    sim = cfg.sim()
    lo, hi = sim.action_bounds()
    return SacAgent(sim.obs_dim, lo, hi, cfg.sac(), seed=child_seed(cfg.seed, 0, STAGE_INIT))


def initial_predictor(cfg: Config, in_dim: int) -> DifficultyPredictor:
    return DifficultyPredictor(in_dim, cfg.pred_hidden, cfg.pred_layers, cfg.pred_dropout,
                               cfg.pred_balance, cfg.pred_lr,
                               seed=child_seed(cfg.seed, 0, STAGE_PREDICT))


def _save_learner(path, state: TrainerState, extra_arrays=None):
    arrays = {f"buf.{k}": v for k, v in state.buffer.state_arrays().items()}
    arrays.update(extra_arrays or {})
    write_container(path, {"kind": "learner_state", "env_steps": state.env_steps,
                           "update_credit": state.update_credit}, arrays)


def _load_learner(path, state: TrainerState) -> dict:
    meta, arrays = read_container(path)
    state.buffer.restore({k[4:]: v for k, v in arrays.items() if k.startswith("buf.")})
    state.env_steps, state.update_credit = int(meta["env_steps"]), float(meta["update_credit"])
    return {k: v for k, v in arrays.items() if not k.startswith("buf.")}


def _same_run(a: str, b: str) -> bool:
    """Config snapshots agree on everything that can change results (not ``jobs``)."""
    pa, pb = parse_pairs(a), parse_pairs(b)
    pa.pop("jobs", None)
    pb.pop("jobs", None)
    return pa == pb


def _completed(paths: RunPaths, total: int) -> int:
    k = 0
    while k < total and paths.record(k + 1).exists() and paths.agent(k + 1).exists() \
            and paths.buffer(k + 1).exists():
        k += 1
    return k


def run(cfg: Config, lib: ScenarioLibrary, out_dir, jobs: int | None = None, resume: bool = True,
        features=None) -> list[IterationRecord]:
    """T iterations of evaluate -> predict -> select -> train, checkpointed.

    The predictor is trained every iteration for every strategy so that each
    run carries T agent and T predictor checkpoints; only ``clic``, ``order``
    and ``pcl_label`` use its output for selection. ``pcl_label`` stages on
    the first iteration's predictions.
    """
    n_total = cfg.iterations
    if not 1 <= cfg.train_size or not 1 <= cfg.eval_size <= len(lib):
        raise ValueError("need 1 <= train_size and 1 <= eval_size <= library size")
    if cfg.strategy == "order" and cfg.train_size > len(lib):
        raise ValueError("order needs train_size <= library size")
    paths = RunPaths(out_dir)
    paths.make()
    snapshot = dump_config(cfg)
    if paths.config.exists() and resume and not _same_run(paths.config.read_text(), snapshot):
        raise ValueError(f"{paths.config}: existing run has a different config")
    paths.config.write_text(snapshot)
    sim = cfg.sim()
    x = featurize_library(lib) if features is None else features
    ids = lib.ids
    n_bv = lib.packed.n_bv

    agent = initial_agent(cfg)
    pred = initial_predictor(cfg, x.shape[1])
    state = TrainerState(make_buffer(agent.obs_dim, agent.act_dim, agent.cfg))
    records: list[IterationRecord] = []
    initial_labels = None
    start = _completed(paths, n_total) if resume else 0
    if start:
        agent = SacAgent.load(paths.agent(start))
        pred = DifficultyPredictor.load(paths.predictor(start))
        extra = _load_learner(paths.buffer(start), state)
        initial_labels = extra.get("initial_labels")
        for k in range(1, start + 1):
            records.append(IterationRecord(**json.loads(paths.record(k).read_text())))
        log.info("resuming after iteration %d", start)

    with Evaluator(lib, sim, jobs or cfg.jobs, cfg.eval_chunk) as evaluator:
        for k in range(start + 1, n_total + 1):
            try:
                rec, initial_labels = _iteration(k, cfg, lib, ids, n_bv, x, agent, pred, state,
                                                 evaluator, sim, paths, initial_labels)
            except Exception as exc:
                raise RunError(f"iteration {k} failed: {exc}", records) from exc
            records.append(rec)
            if k > 1 and paths.buffer(k - 1).exists():
                paths.buffer(k - 1).unlink()
    return records


def _iteration(k, cfg, lib, ids, n_bv, x, agent, pred, state, evaluator, sim, paths,
               initial_labels):
    seed = cfg.seed
    eval_idx, labels, _ = evaluate_av(agent, evaluator, cfg.eval_size, child_rng(seed, k, STAGE_EVAL))
    eval_sr = float(100.0 * (1.0 - labels.mean()))

    if cfg.pred_reinit:
        pred.reinit(child_seed(seed, k, STAGE_PREDICT))
    pred_rng = child_rng(seed, k, STAGE_PREDICT)
    curve = train_predictor(pred, x[eval_idx], labels, cfg.pred_epochs, cfg.pred_batch_size, pred_rng)
    l_all = predict_all(pred, x)
    if initial_labels is None:
        initial_labels = l_all.copy()

    sel_rng = child_rng(seed, k, STAGE_SELECT)
    strategy = cfg.strategy
    if strategy == "clic":
        cur = weighted_sample(ids, cfg.train_size, l_all, sel_rng, k, cfg.label_floor)
    else:
        base = "rand" if strategy == "per" else strategy
        cur = baseline_select(base, ids, cfg.train_size, sel_rng, iteration=k, total=cfg.iterations,
                              eval_idx=eval_idx, eval_labels=labels,
                              l_all=initial_labels if base == "pcl_label" else l_all, n_bv=n_bv)
        cur.strategy = strategy
    cur.write(paths.curriculum(k))

    scenarios = [lib[i] for i in cur.indices]
    if cfg.clear_buffer:
        state.buffer = make_buffer(agent.obs_dim, agent.act_dim, agent.cfg)
    summary = train_av(agent, state, scenarios, cfg.episodes, child_rng(seed, k, STAGE_TRAIN), sim)

    agent.save(paths.agent(k))
    pred.save(paths.predictor(k))
    _save_learner(paths.buffer(k), state, {"initial_labels": initial_labels})
    rec = IterationRecord(
        iteration=k, eval_ids=[ids[i] for i in eval_idx], eval_labels=[int(v) for v in labels],
        eval_success_rate=eval_sr, curriculum=cur.to_json(), predictor_loss=[float(v) for v in curve],
        training=summary, agent_checkpoint=str(paths.agent(k).relative_to(paths.root)),
        predictor_checkpoint=str(paths.predictor(k).relative_to(paths.root)),
        agent_checksum=agent.parameter_checksum())
    _atomic_json(paths.record(k), rec.to_json())
    log.info("iteration %d: eval SR %.2f%%, %d env steps, mean return %.2f", k, eval_sr,
             summary["env_steps"], summary["mean_return"] or float("nan"))
    return rec, initial_labels
