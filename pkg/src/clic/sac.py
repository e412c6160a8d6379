"""Soft Actor-Critic with a tanh-squashed Gaussian actor and twin critics.

Actions live in two spaces: the squashed policy output ``u`` in (-1, 1)^2,
which is what the critics and the replay buffer see, and the physical
(dv, dtheta) increment obtained by :meth:`SacAgent.scale`.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np

from .nn import Adam, DenseNet, NonFiniteLossError, net_arrays, net_from_arrays, net_meta, \
    read_container, softplus, write_container

LOG_2PI = float(np.log(2.0 * np.pi))
LOG_2 = float(np.log(2.0))


@dataclass
class SacConfig:
    hidden: int = 256
    layers: int = 3
    lr: float = 1e-4
    gamma: float = 0.99
    tau: float = 0.01
    alpha: float = 0.1
    auto_alpha: bool = False
    target_entropy: float = 0.0
    alpha_min: float = 1e-6
    batch_size: int = 128
    warmup: int = 1000
    updates_per_step: float = 1.0
    log_std_min: float = -20.0
    log_std_max: float = 2.0
    capacity: int = 1_000_000
    prioritized: bool = False
    per_alpha: float = 0.6
    per_beta: float = 0.4
    per_eps: float = 1e-6


@dataclass
class Batch:
    obs: np.ndarray
    act: np.ndarray
    rew: np.ndarray
    next_obs: np.ndarray
    done: np.ndarray
    weights: np.ndarray
    idx: np.ndarray


class ReplayBuffer:
    """Ring buffer of transitions; storage grows by doubling up to capacity."""

    prioritized = False

    def __init__(self, obs_dim: int, act_dim: int, capacity: int = 1_000_000):
        self.obs_dim, self.act_dim, self.capacity = obs_dim, act_dim, int(capacity)
        self._alloc(min(self.capacity, 4096))
        self.size = 0
        self.ptr = 0

    def _alloc(self, n):
        old = getattr(self, "obs", None)
        obs = np.zeros((n, self.obs_dim))
        act = np.zeros((n, self.act_dim))
        rew = np.zeros(n)
        nxt = np.zeros((n, self.obs_dim))
        done = np.zeros(n)
        if old is not None:
            k = self.size
            obs[:k], act[:k], rew[:k] = self.obs[:k], self.act[:k], self.rew[:k]
            nxt[:k], done[:k] = self.next_obs[:k], self.done[:k]
        self.obs, self.act, self.rew, self.next_obs, self.done = obs, act, rew, nxt, done

    def __len__(self):
        return self.size

    def add(self, obs, act, rew, next_obs, done) -> int:
        if self.ptr >= len(self.rew) and len(self.rew) < self.capacity:
            self._alloc(min(self.capacity, 2 * len(self.rew)))
        i = self.ptr
        self.obs[i], self.act[i], self.rew[i] = obs, act, rew
        self.next_obs[i], self.done[i] = next_obs, float(done)
        self.ptr = (self.ptr + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)
        return i

    def _gather(self, idx, weights):
        return Batch(self.obs[idx], self.act[idx], self.rew[idx], self.next_obs[idx],
                     self.done[idx], weights, idx)

    def sample(self, k: int, rng) -> Batch:
        if self.size < k:
            raise ValueError(f"buffer holds {self.size} transitions, asked for {k}")
        idx = rng.integers(0, self.size, size=k)
        return self._gather(idx, np.ones(k))

    def update_priorities(self, idx, td_abs) -> None:
        pass

    def state_arrays(self) -> dict[str, np.ndarray]:
        n = self.size
        return {"obs": self.obs[:n], "act": self.act[:n], "rew": self.rew[:n],
                "next_obs": self.next_obs[:n], "done": self.done[:n],
                "ptr": np.array([self.ptr])}

    def restore(self, arrays) -> None:
        n = len(arrays["rew"])
        self.size = 0
        self._alloc(max(min(self.capacity, 4096), n))
        self.obs[:n], self.act[:n], self.rew[:n] = arrays["obs"], arrays["act"], arrays["rew"]
        self.next_obs[:n], self.done[:n] = arrays["next_obs"], arrays["done"]
        self.size = n
        self.ptr = int(arrays["ptr"][0])


class SumTree:
    """Binary sum tree over ``capacity`` leaves with vectorized prefix search."""

    def __init__(self, capacity: int):
        self.n_leaves = 1
        while self.n_leaves < capacity:
            self.n_leaves *= 2
        self.tree = np.zeros(2 * self.n_leaves)

    @property
    def total(self) -> float:
        return float(self.tree[1])

    def set(self, idx, values) -> None:
        idx = np.atleast_1d(np.asarray(idx, dtype=np.int64))
        pos = idx + self.n_leaves
        self.tree[pos] = values
        pos = np.unique(pos // 2)
        while pos[0] >= 1:
            self.tree[pos] = self.tree[2 * pos] + self.tree[2 * pos + 1]
            if pos[0] == 1:
                break
            pos = np.unique(pos // 2)

    def leaf(self, idx):
        return self.tree[np.asarray(idx) + self.n_leaves]

    def find(self, mass):
        """Leaf indices whose cumulative interval contains each ``mass``."""
        pos = np.ones(len(mass), dtype=np.int64)
        mass = np.array(mass, dtype=np.float64)
        while pos[0] < self.n_leaves:
            left = 2 * pos
            lv = self.tree[left]
            go_right = mass >= lv
            mass = np.where(go_right, mass - lv, mass)
            pos = np.where(go_right, left + 1, left)
        return pos - self.n_leaves


class PrioritizedReplayBuffer(ReplayBuffer):
    """Proportional prioritization: P(i) = p_i^a / sum_k p_k^a."""

    prioritized = True

    def __init__(self, obs_dim, act_dim, capacity=1_000_000, alpha=0.6, beta=0.4, eps=1e-6):
        super().__init__(obs_dim, act_dim, capacity)
        self.alpha, self.beta, self.eps = alpha, beta, eps
        self.tree = SumTree(self.capacity)
        self.max_priority = 1.0

    def add(self, obs, act, rew, next_obs, done) -> int:
        i = super().add(obs, act, rew, next_obs, done)
        self.tree.set(i, self.max_priority ** self.alpha)
        return i

    def set_priorities(self, idx, priorities) -> None:
        priorities = np.asarray(priorities, dtype=np.float64)
        if np.any(priorities <= 0):
            raise ValueError("priorities must be positive")
        self.tree.set(idx, priorities ** self.alpha)
        self.max_priority = max(self.max_priority, float(priorities.max()))

    def probabilities(self) -> np.ndarray:
        p = self.tree.leaf(np.arange(self.size))
        return p / p.sum()

    def sample(self, k: int, rng) -> Batch:
        if self.size < k:
            raise ValueError(f"buffer holds {self.size} transitions, asked for {k}")
        total = self.tree.total
        mass = rng.random(k) * total
        idx = np.minimum(self.tree.find(mass), self.size - 1)
        prob = self.tree.leaf(idx) / total
        w = (self.size * prob) ** (-self.beta)
        return self._gather(idx, w / w.max())

    def update_priorities(self, idx, td_abs) -> None:
        self.set_priorities(idx, np.abs(td_abs) + self.eps)

    def state_arrays(self):
        out = super().state_arrays()
        out["priority"] = self.tree.leaf(np.arange(self.size))
        out["max_priority"] = np.array([self.max_priority])
        return out

    def restore(self, arrays) -> None:
        super().restore(arrays)
        self.tree = SumTree(self.capacity)
        if self.size:
            self.tree.set(np.arange(self.size), arrays["priority"])
        self.max_priority = float(arrays["max_priority"][0])


def sample_batch(buffer: ReplayBuffer, k: int, rng) -> Batch:
    return buffer.sample(k, rng)


def make_buffer(obs_dim, act_dim, cfg: SacConfig) -> ReplayBuffer:
    if cfg.prioritized:
        return PrioritizedReplayBuffer(obs_dim, act_dim, cfg.capacity, cfg.per_alpha,
                                       cfg.per_beta, cfg.per_eps)
    return ReplayBuffer(obs_dim, act_dim, cfg.capacity)


def squash_log_prob(xi, log_std, z):
    """log pi(u) for u = tanh(z), z = mu + exp(log_std) * xi, summed over dims."""
    gauss = -0.5 * xi * xi - log_std - 0.5 * LOG_2PI
    corr = 2.0 * (LOG_2 - z - softplus(-2.0 * z))
    return np.sum(gauss - corr, axis=1)


class SacAgent:
    def __init__(self, obs_dim: int, act_low, act_high, cfg: SacConfig | None = None, seed=0):
        self.cfg = cfg = cfg or SacConfig()
        self.obs_dim = obs_dim
        self.act_low = np.asarray(act_low, dtype=np.float64)
        self.act_high = np.asarray(act_high, dtype=np.float64)
        if np.any(self.act_low >= 0) or np.any(self.act_high <= 0):
            raise ValueError("action bounds must bracket zero")
        self.act_dim = len(self.act_low)
        rng = np.random.default_rng(seed)
        hid = (cfg.hidden,) * cfg.layers
        self.actor = DenseNet((obs_dim, *hid, 2 * self.act_dim), rng=rng, out_init="small")
        self.q1 = DenseNet((obs_dim + self.act_dim, *hid, 1), rng=rng)
        self.q2 = DenseNet((obs_dim + self.act_dim, *hid, 1), rng=rng)
        self.q1_targ = self.q1.copy()
        self.q2_targ = self.q2.copy()
        self.actor_opt = Adam(self.actor, cfg.lr)
        self.q1_opt = Adam(self.q1, cfg.lr)
        self.q2_opt = Adam(self.q2, cfg.lr)
        self.alpha = float(cfg.alpha)
        self.n_updates = 0

    # -- acting ---------------------------------------------------------------
    def scale(self, u):
        """Map (-1, 1) onto the action bounds piecewise so that 0 maps to 0."""
        u = np.asarray(u, dtype=np.float64)
        return np.where(u >= 0.0, u * self.act_high, -u * self.act_low)

    def _mean_logstd(self, obs):
        out = self.actor.forward(obs)
        mu = out[..., :self.act_dim]
        ls = np.clip(out[..., self.act_dim:], self.cfg.log_std_min, self.cfg.log_std_max)
        return mu, ls

    def policy_u(self, obs, mode="deterministic", rng=None):
        mu, ls = self._mean_logstd(obs)
        if mode == "deterministic":
            return np.tanh(mu)
        if mode != "stochastic":
            raise ValueError(f"unknown mode {mode!r}")
        return np.tanh(mu + np.exp(ls) * rng.standard_normal(mu.shape))

    def act(self, obs, mode="deterministic", rng=None):
        """Physical (dv, dtheta) for one observation plus the squashed action."""
        u = self.policy_u(np.asarray(obs, dtype=np.float64)[None, :], mode, rng)[0]
        return self.scale(u), u

    def __call__(self, obs_batch):
        return self.scale(self.policy_u(obs_batch))

    # -- losses ---------------------------------------------------------------
    def critic_losses(self, batch: Batch, xi_next):
        """Twin critic losses and grads at fixed next-action noise."""
        cfg = self.cfg
        out = self.actor.forward(batch.next_obs)
        mu2 = out[:, :self.act_dim]
        ls2 = np.clip(out[:, self.act_dim:], cfg.log_std_min, cfg.log_std_max)
        z2 = mu2 + np.exp(ls2) * xi_next
        u2 = np.tanh(z2)
        logp2 = squash_log_prob(xi_next, ls2, z2)
        x2 = np.concatenate([batch.next_obs, u2], axis=1)
        q_next = np.minimum(self.q1_targ.forward(x2)[:, 0], self.q2_targ.forward(x2)[:, 0])
        y = batch.rew + cfg.gamma * (1.0 - batch.done) * (q_next - self.alpha * logp2)
        x = np.concatenate([batch.obs, batch.act], axis=1)
        w = batch.weights
        bsz = len(y)
        res = []
        for net in (self.q1, self.q2):
            q, cache = net.forward_cached(x)
            td = q[:, 0] - y
            loss = float(np.mean(w * td * td))
            grads, _ = net.backward(cache, dout=(2.0 * w * td / bsz)[:, None])
            res.append((loss, grads, td))
        return res

    def actor_loss(self, batch: Batch, xi):
        """Actor loss, grads and log-probs at fixed reparameterization noise."""
        cfg = self.cfg
        a = self.act_dim
        out, cache = self.actor.forward_cached(batch.obs)
        mu = out[:, :a]
        raw_ls = out[:, a:]
        ls = np.clip(raw_ls, cfg.log_std_min, cfg.log_std_max)
        std = np.exp(ls)
        z = mu + std * xi
        u = np.tanh(z)
        logp = squash_log_prob(xi, ls, z)
        x = np.concatenate([batch.obs, u], axis=1)
        q1, c1 = self.q1.forward_cached(x)
        q2, c2 = self.q2.forward_cached(x)
        use1 = q1[:, 0] <= q2[:, 0]
        qmin = np.where(use1, q1[:, 0], q2[:, 0])
        bsz = len(qmin)
        ones = np.ones((bsz, 1))
        _, dx1 = self.q1.backward(c1, dout=ones)
        _, dx2 = self.q2.backward(c2, dout=ones)
        dq_du = np.where(use1[:, None], dx1[:, self.obs_dim:], dx2[:, self.obs_dim:])
        loss = float(np.mean(self.alpha * logp - qmin))
        dz_q = -dq_du * (1.0 - u * u)
        dmu = (dz_q + self.alpha * 2.0 * u) / bsz
        sx = std * xi
        dls = (dz_q * sx + self.alpha * (2.0 * u * sx - 1.0)) / bsz
        dls = dls * ((raw_ls > cfg.log_std_min) & (raw_ls < cfg.log_std_max))
        grads, _ = self.actor.backward(cache, dout=np.concatenate([dmu, dls], axis=1))
        return loss, grads, logp

    # -- updates --------------------------------------------------------------
    def update(self, batch: Batch, rng, buffer: ReplayBuffer | None = None) -> dict:
        """One SAC step on ``batch``: critics, actor, temperature, targets."""
        cfg = self.cfg
        shape = (len(batch.rew), self.act_dim)
        (l1, g1, td1), (l2, g2, td2) = self.critic_losses(batch, rng.standard_normal(shape))
        if not (np.isfinite(l1) and np.isfinite(l2)):
            bad = np.flatnonzero(~np.isfinite(td1 + td2))
            raise NonFiniteLossError(int(bad[0]) if len(bad) else -1, l1 + l2)
        self.q1_opt.step(g1)
        self.q2_opt.step(g2)
        if buffer is not None and buffer.prioritized:
            buffer.update_priorities(batch.idx, 0.5 * (np.abs(td1) + np.abs(td2)))
        la, ga, logp = self.actor_loss(batch, rng.standard_normal(shape))
        if not np.isfinite(la):
            raise NonFiniteLossError(int(np.argmax(~np.isfinite(logp))), la)
        self.actor_opt.step(ga)
        alpha_loss = float(np.mean(-self.alpha * logp - self.alpha * cfg.target_entropy))
        if cfg.auto_alpha:
            self.auto_alpha_update(logp)
        self.soft_update()
        self.n_updates += 1
        return {"q1": l1, "q2": l2, "actor": la, "alpha": alpha_loss,
                "entropy": float(-np.mean(logp)), "alpha_value": self.alpha}

    def auto_alpha_update(self, logp) -> float:
        """alpha <- alpha - lr * (E[-log pi] - target_entropy), kept positive."""
        grad = float(np.mean(-logp)) - self.cfg.target_entropy
        self.alpha = max(self.alpha - self.cfg.lr * grad, self.cfg.alpha_min)
        return self.alpha

    def soft_update(self, tau=None) -> None:
        tau = self.cfg.tau if tau is None else tau
        for targ, net in ((self.q1_targ, self.q1), (self.q2_targ, self.q2)):
            for pt, p in zip(targ.params, net.params):
                pt *= 1.0 - tau
                pt += tau * p

    # -- persistence ----------------------------------------------------------
    def parameter_checksum(self) -> int:
        crc = 0
        for net in (self.actor, self.q1, self.q2, self.q1_targ, self.q2_targ):
            for p in net.params:
                crc = zlib.crc32(p.tobytes(), crc)
        return crc

    def save(self, path) -> None:
        arrays = {}
        for name, net in self._nets():
            arrays.update(net_arrays(net, f"{name}."))
        for name, opt in (("actor_opt", self.actor_opt), ("q1_opt", self.q1_opt),
                          ("q2_opt", self.q2_opt)):
            arrays.update(opt.arrays(f"{name}."))
        arrays["alpha"] = np.array([self.alpha])
        meta = {"kind": "sac_agent", "obs_dim": self.obs_dim,
                "act_low": self.act_low.tolist(), "act_high": self.act_high.tolist(),
                "config": vars(self.cfg), "n_updates": self.n_updates,
                "nets": {name: net_meta(net) for name, net in self._nets()}}
        write_container(path, meta, arrays)

    @classmethod
    def load(cls, path) -> "SacAgent":
        meta, arrays = read_container(path)
        if meta.get("kind") != "sac_agent":
            raise ValueError(f"{path}: not a sac_agent checkpoint")
        agent = cls(meta["obs_dim"], meta["act_low"], meta["act_high"], SacConfig(**meta["config"]))
        for name, _ in agent._nets():
            setattr(agent, name, net_from_arrays(meta["nets"][name], arrays, f"{name}."))
        agent.actor_opt = Adam(agent.actor, agent.cfg.lr)
        agent.q1_opt = Adam(agent.q1, agent.cfg.lr)
        agent.q2_opt = Adam(agent.q2, agent.cfg.lr)
        agent.actor_opt.restore(arrays, "actor_opt.")
        agent.q1_opt.restore(arrays, "q1_opt.")
        agent.q2_opt.restore(arrays, "q2_opt.")
        agent.alpha = float(arrays["alpha"][0])
        agent.n_updates = int(meta["n_updates"])
        return agent

    def _nets(self):
        return (("actor", self.actor), ("q1", self.q1), ("q2", self.q2),
                ("q1_targ", self.q1_targ), ("q2_targ", self.q2_targ))
