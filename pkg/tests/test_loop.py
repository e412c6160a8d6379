import json

import numpy as np
import pytest

import clic.loop as loop
from clic.config import Config
from clic.loop import Evaluator, PolicySnapshot, RunError, child_rng, evaluate_av, initial_agent, run
from clic.sim import rollout_batch

from conftest import make_library, make_scenario


def tiny(**kw):
    base = dict(iterations=3, eval_size=20, train_size=4, episodes=1, sac_hidden=8, sac_layers=2,
                sac_batch_size=16, warmup=60, pred_hidden=8, pred_layers=2, pred_epochs=2,
                pred_batch_size=8, eval_chunk=7, seed=5)
    base.update(kw)
    return Config(**base)


def run_bytes(root):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_child_streams_are_independent():
    a = child_rng(0, 1, 1).random(4)
    assert not np.array_equal(a, child_rng(0, 1, 2).random(4))
    assert not np.array_equal(a, child_rng(0, 2, 1).random(4))
    assert not np.array_equal(a, child_rng(1, 1, 1).random(4))
    assert np.array_equal(a, child_rng(0, 1, 1).random(4))


def test_policy_snapshot_matches_agent(sim):
    agent = initial_agent(tiny())
    obs = np.random.default_rng(0).normal(size=(6, sim.obs_dim))
    assert np.array_equal(PolicySnapshot(agent)(obs), agent(obs))


def test_evaluation_pooled_equals_serial(small_lib, sim):
    agent = initial_agent(tiny())
    pol = PolicySnapshot(agent)
    idx = np.arange(0, 60, 2)
    serial = Evaluator(small_lib, sim, 1, 7).rollout(pol, idx)
    with Evaluator(small_lib, sim, 3, 7) as ev:
        pooled = ev.rollout(pol, idx)
    whole = rollout_batch(pol, small_lib.packed, idx, sim)
    for f in ("label", "code", "steps", "traj"):
        assert np.array_equal(getattr(serial, f), getattr(pooled, f))
        assert np.array_equal(getattr(serial, f), getattr(whole, f))


def test_evaluate_av_leaves_agent_untouched(small_lib, sim):
    agent = initial_agent(tiny())
    before = agent.parameter_checksum()
    idx, labels, _ = evaluate_av(agent, Evaluator(small_lib, sim), 25, np.random.default_rng(0))
    assert agent.parameter_checksum() == before
    assert len(set(idx)) == 25 and np.all(np.diff(idx) > 0)
    assert set(labels) <= {0, 1}
    with pytest.raises(ValueError):
        evaluate_av(agent, Evaluator(small_lib, sim), 61, np.random.default_rng(0))


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory, small_lib):
    root = tmp_path_factory.mktemp("run")
    recs = run(tiny(), small_lib, root)
    return root, recs


def test_run_layout(tiny_run):
    root, recs = tiny_run
    assert [r.iteration for r in recs] == [1, 2, 3]
    assert sorted(p.name for p in (root / "checkpoints").iterdir()) == \
        [f"agent_00{k}.bin" for k in (1, 2, 3)] + [f"predictor_00{k}.bin" for k in (1, 2, 3)]
    assert len(list((root / "records").iterdir())) == 3
    assert len(list((root / "curricula").iterdir())) == 3
    assert [p.name for p in (root / "state").iterdir()] == ["learner_003.bin"]


def test_run_records_consistent(tiny_run, small_lib):
    root, recs = tiny_run
    for r in recs:
        assert len(r.eval_ids) == 20 and len(r.curriculum["ids"]) == 4
        assert r.eval_success_rate == pytest.approx(100 * (1 - np.mean(r.eval_labels)))
        assert len(r.predictor_loss) == 2
        assert r.training["episodes"] == 4
        on_disk = json.loads((root / "records" / f"iter_00{r.iteration}.json").read_text())
        assert on_disk == json.loads(json.dumps(r.to_json()))


def test_step_and_update_accounting(tiny_run):
    _, recs = tiny_run
    cfg = tiny()
    steps = np.cumsum([r.training["env_steps"] for r in recs])
    updates = np.cumsum([r.training["updates"] for r in recs])
    # one update per env step once the buffer reaches max(warmup, batch) transitions
    expected = np.maximum(0, steps - max(cfg.warmup, cfg.sac_batch_size) + 1)
    assert np.array_equal(updates, expected)
    assert all(len(r.training["returns"]) == r.training["episodes"] for r in recs)


def test_run_deterministic_across_workers(tiny_run, small_lib, tmp_path):
    root, _ = tiny_run
    run(tiny(jobs=3), small_lib, tmp_path)
    a, b = run_bytes(root), run_bytes(tmp_path)
    a.pop("config.cfg"), b.pop("config.cfg")
    assert a == b


def test_resume_after_failure_matches_uninterrupted(tiny_run, small_lib, tmp_path, monkeypatch):
    root, _ = tiny_run
    real = loop.train_av
    calls = {"n": 0}

    def flaky(*a, **kw):
        calls["n"] += 1
        if calls["n"] == 3:
            raise RuntimeError("boom")
        return real(*a, **kw)

    monkeypatch.setattr(loop, "train_av", flaky)
    with pytest.raises(RunError) as exc:
        run(tiny(), small_lib, tmp_path)
    assert [r.iteration for r in exc.value.records] == [1, 2]
    monkeypatch.setattr(loop, "train_av", real)
    recs = run(tiny(), small_lib, tmp_path)
    assert [r.iteration for r in recs] == [1, 2, 3]
    assert run_bytes(root) == run_bytes(tmp_path)


def test_resume_refuses_changed_config(tiny_run, small_lib):
    root, _ = tiny_run
    with pytest.raises(ValueError, match="different config"):
        run(tiny(seed=6), small_lib, root)


def test_resume_accepts_other_worker_count(tiny_run, small_lib):
    root, recs = tiny_run
    again = run(tiny(jobs=2), small_lib, root)
    assert [r.agent_checksum for r in again] == [r.agent_checksum for r in recs]
    run(tiny(), small_lib, root)


def test_completed_run_resumes_to_noop(tiny_run, small_lib):
    root, recs = tiny_run
    before = run_bytes(root)
    again = run(tiny(), small_lib, root)
    assert [r.to_json() for r in again] == [r.to_json() for r in recs]
    assert run_bytes(root) == before


@pytest.mark.parametrize("strategy", ["rand", "rand_fail", "fail", "pcl_bv", "pcl_label", "order", "per"])
def test_every_strategy_runs(strategy, small_lib, tmp_path):
    recs = run(tiny(strategy=strategy, iterations=2), small_lib, tmp_path)
    assert all(r.curriculum["strategy"] == strategy for r in recs)
    assert all(len(r.curriculum["indices"]) == 4 for r in recs)


def test_clear_buffer(small_lib, tmp_path):
    recs = run(tiny(clear_buffer=True, warmup=10, sac_batch_size=10), small_lib, tmp_path)
    for r in recs:
        assert r.training["updates"] == r.training["env_steps"] - 10 + 1


def test_always_colliding_library(tmp_path):
    scs = [make_scenario(f"c{i}", av=(50, 4.8, 20, 0), bvs=((51.0 + 0.1 * i, 4.8, 20, 0),), horizon=20)
           for i in range(12)]
    lib = make_library(scs)
    recs = run(tiny(eval_size=10, warmup=5, sac_batch_size=2), lib, tmp_path)
    for r in recs:
        assert r.eval_success_rate == 0.0
        assert r.training["episode_accident_rate"] == 1.0
        assert r.training["env_steps"] == r.training["episodes"]


def test_run_validates_sizes(small_lib, tmp_path):
    with pytest.raises(ValueError):
        run(tiny(eval_size=61), small_lib, tmp_path)
