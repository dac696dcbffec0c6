"""Soft actor-critic for a single navigation sub-task.

Twin Q critics with Polyak-averaged targets, a tanh-squashed Gaussian actor
and an automatically tuned entropy temperature (stored as log alpha).
Only arrival terminates an episode for bootstrapping purposes; timeouts are
treated as truncation.
"""
from __future__ import annotations

import csv
import hashlib
import json
import pickle
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .episode import TRAIN_TIMEOUT, Episode, EpisodeConfig, NavEnv
from .errors import ConfigurationError, LoadError, ShapeError
from .guidesim import ACT_DIM, OBS_DIM, ActionCommand, SimConfig
from .nn import (MLP, Adam, GaussianPolicy, Tensor, concat, load_arrays, minimum,
                 no_grad, save_arrays)
from .vasctree import VascTree


@dataclass
class SacConfig:
    gamma: float = 0.99
    tau: float = 0.005
    actor_lr: float = 3e-4
    critic_lr: float = 3e-4
    alpha_lr: float = 3e-4
    init_alpha: float = 0.2
    reward_scale: float = 1.0                   # multiplies rewards inside the critic targets only
    batch_size: int = 256
    buffer_size: int = 1_000_000
    hidden: Tuple[int, ...] = (256, 256)
    target_entropy: Optional[float] = None      # None: -act_dim
    warmup_steps: int = 1000
    total_steps: int = 200_000
    update_every: int = 1                       # env steps between update rounds
    updates_per_round: int = 1
    eval_every: int = 10_000
    eval_episodes: int = 50
    train_timeout: int = TRAIN_TIMEOUT
    expand_features: bool = True
    recurrent: bool = False                     # reserved; only feedforward is implemented

    def validate(self) -> None:
        if not 0.0 < self.gamma < 1.0:
            raise ConfigurationError("gamma must lie in (0, 1)")
        if not 0.0 < self.tau <= 1.0:
            raise ConfigurationError("tau must lie in (0, 1]")
        if self.batch_size <= 0 or self.buffer_size < self.batch_size:
            raise ConfigurationError("need 0 < batch_size <= buffer_size")
        if self.total_steps < 0 or self.warmup_steps < 0:
            raise ConfigurationError("step counts must be >= 0")
        if self.update_every <= 0 or self.updates_per_round < 0 or self.eval_every <= 0:
            raise ConfigurationError("update/eval periods must be positive")
        if self.train_timeout <= 0:
            raise ConfigurationError("train_timeout must be > 0")
        if self.recurrent:
            raise ConfigurationError("recurrent policies are not implemented")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SacConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigurationError(f"unknown SAC keys: {sorted(unknown)}")
        d = dict(d)
        if "hidden" in d:
            d["hidden"] = tuple(int(h) for h in d["hidden"])
        return cls(**d)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


class ReplayBuffer:
    """Fixed-capacity FIFO ring of transitions."""

    def __init__(self, capacity: int, obs_dim: int = OBS_DIM, act_dim: int = ACT_DIM):
        if capacity <= 0:
            raise ConfigurationError("capacity must be > 0")
        self.capacity = capacity
        self.obs = np.zeros((capacity, obs_dim))
        self.act = np.zeros((capacity, act_dim))
        self.rew = np.zeros(capacity)
        self.next_obs = np.zeros((capacity, obs_dim))
        self.done = np.zeros(capacity)
        self.inserted = 0

    def __len__(self) -> int:
        return min(self.inserted, self.capacity)

    def add(self, obs, act, rew: float, next_obs, done: bool) -> None:
        obs = np.asarray(obs, dtype=float)
        act = np.asarray(act, dtype=float)
        if obs.shape != self.obs.shape[1:] or act.shape != self.act.shape[1:]:
            raise ShapeError(f"transition shapes {obs.shape}/{act.shape} do not fit buffer")
        i = self.inserted % self.capacity
        self.obs[i], self.act[i], self.rew[i] = obs, act, rew
        self.next_obs[i], self.done[i] = next_obs, float(done)
        self.inserted += 1

    def contents(self) -> List[tuple]:
        """Transitions oldest first."""
        n = len(self)
        start = self.inserted - n
        return [(self.obs[k % self.capacity], self.act[k % self.capacity], self.rew[k % self.capacity],
                 self.next_obs[k % self.capacity], bool(self.done[k % self.capacity]))
                for k in range(start, self.inserted)]

    def sample(self, batch: int, rng: np.random.Generator):
        idx = rng.integers(0, len(self), size=batch)
        return self.obs[idx], self.act[idx], self.rew[idx], self.next_obs[idx], self.done[idx]


# observation layout: 3 tip points, 3 previous tip points, target, previous action
_TIP, _PREV, _TGT = slice(0, 6), slice(6, 12), slice(12, 14)


def expand_observation(obs: np.ndarray) -> np.ndarray:
    """Append rescaled local differences to the raw observation.

    Normalised tip coordinates move by ~1e-2 per step; differences between
    the tracked points (wire direction and bend), their step-to-step motion
    and the tip-to-target offset are magnified so the networks see them
    at unit scale. The information content is unchanged.
    """
    obs = np.atleast_2d(obs)
    tip = obs[:, _TIP].reshape(-1, 3, 2)
    prev = obs[:, _PREV].reshape(-1, 3, 2)
    tgt = obs[:, _TGT]
    extra = [50.0 * (tip[:, 0] - tip[:, 1]), 50.0 * (tip[:, 1] - tip[:, 2]),
             50.0 * (tip[:, 0] - prev[:, 0]), 5.0 * (tgt - tip[:, 0])]
    return np.concatenate([obs] + extra, axis=1)


def feature_dim(obs_dim: int, expand: bool) -> int:
    return obs_dim + 8 if expand else obs_dim


class SacAgent:
    def __init__(self, cfg: SacConfig, seed: int = 0, obs_dim: int = OBS_DIM, act_dim: int = ACT_DIM):
        cfg.validate()
        self.cfg = cfg
        self.obs_dim, self.act_dim = obs_dim, act_dim
        rng = np.random.default_rng(seed)
        fd = feature_dim(obs_dim, cfg.expand_features) if obs_dim == OBS_DIM else obs_dim
        self.fdim = fd
        self.actor = GaussianPolicy(fd, act_dim, cfg.hidden, rng)
        self.q1 = MLP([fd + act_dim, *cfg.hidden, 1], rng)
        self.q2 = MLP([fd + act_dim, *cfg.hidden, 1], rng)
        self.q1_targ = MLP([fd + act_dim, *cfg.hidden, 1], rng)
        self.q2_targ = MLP([fd + act_dim, *cfg.hidden, 1], rng)
        self.q1_targ.load_state_dict(self.q1.state_dict())
        self.q2_targ.load_state_dict(self.q2.state_dict())
        self.log_alpha = Tensor(np.array(np.log(cfg.init_alpha)), requires_grad=True)
        self.target_entropy = -float(act_dim) if cfg.target_entropy is None else cfg.target_entropy
        self.actor_opt = Adam(self.actor.parameters(), cfg.actor_lr)
        self.critic_opt = Adam(self.q1.parameters() + self.q2.parameters(), cfg.critic_lr)
        self.alpha_opt = Adam([self.log_alpha], cfg.alpha_lr)
        self.n_updates = 0

    @property
    def alpha(self) -> float:
        return float(np.exp(self.log_alpha.data))

    def features(self, obs: np.ndarray) -> np.ndarray:
        obs = np.atleast_2d(np.asarray(obs, dtype=float))
        if obs.shape[1] != self.obs_dim:
            raise ShapeError(f"observation width {obs.shape[1]} != {self.obs_dim}")
        if self.fdim != self.obs_dim:
            return expand_observation(obs)
        return obs

    def act_unit(self, obs, deterministic: bool, rng: Optional[np.random.Generator] = None) -> np.ndarray:
        """Action in [-1, 1]^d for a single observation."""
        return self.actor.act_numpy(self.features(obs), None if deterministic else rng)[0]

    def act(self, obs, mode: str = "eval", rng: Optional[np.random.Generator] = None) -> ActionCommand:
        if mode not in ("train", "eval"):
            raise ConfigurationError(f"unknown mode {mode!r}")
        return ActionCommand.from_unit(self.act_unit(obs, mode == "eval", rng))

    def _q_in(self, f: np.ndarray, a) -> Tensor:
        return concat([Tensor(f), a], axis=1)

    def update(self, buffer: ReplayBuffer, rng: np.random.Generator) -> Optional[Dict[str, float]]:
        """One gradient step on critics, actor and temperature; None if the buffer is too small."""
        cfg = self.cfg
        if len(buffer) < cfg.batch_size:
            return None
        o, a, r, o2, d = buffer.sample(cfg.batch_size, rng)
        f, f2 = self.features(o), self.features(o2)
        alpha = self.alpha
        with no_grad():
            a2, logp2 = self.actor.sample(Tensor(f2), rng)
            x2 = self._q_in(f2, a2)
            qt = np.minimum(self.q1_targ(x2).data[:, 0], self.q2_targ(x2).data[:, 0])
            y = cfg.reward_scale * r + cfg.gamma * (1.0 - d) * (qt - alpha * logp2.data)
        y = Tensor(y[:, None])
        x = self._q_in(f, Tensor(a))
        q1_loss = (self.q1(x) - y).square().mean()
        q2_loss = (self.q2(x) - y).square().mean()
        self.critic_opt.zero_grad()
        (q1_loss + q2_loss).backward()
        self.critic_opt.step()

        ft = Tensor(f)
        pi, logp = self.actor.sample(ft, rng)
        xp = self._q_in(f, pi)
        q_pi = minimum(self.q1(xp), self.q2(xp))[:, 0]
        actor_loss = (logp * alpha - q_pi).mean()
        self.actor_opt.zero_grad()
        actor_loss.backward()
        self.actor_opt.step()
        # the critic grads from the actor pass are discarded at the next critic zero_grad

        alpha_loss = (self.log_alpha * Tensor(-(logp.data + self.target_entropy).mean()))
        self.alpha_opt.zero_grad()
        alpha_loss.backward()
        self.alpha_opt.step()

        self.soft_update(cfg.tau)
        self.n_updates += 1
        return {"critic_loss": 0.5 * (q1_loss.item() + q2_loss.item()),
                "actor_loss": actor_loss.item(), "alpha_loss": alpha_loss.item(),
                "alpha": self.alpha, "entropy": float(-logp.data.mean())}

    def soft_update(self, tau: float) -> None:
        for net, targ in ((self.q1, self.q1_targ), (self.q2, self.q2_targ)):
            for p, pt in zip(net.parameters(), targ.parameters()):
                if tau == 1.0:
                    pt.data = p.data.copy()
                else:
                    pt.data = (1.0 - tau) * pt.data + tau * p.data

    # -- persistence -----------------------------------------------------------
    def arrays(self) -> Dict[str, np.ndarray]:
        out = {}
        for name, mod in (("actor", self.actor), ("q1", self.q1), ("q2", self.q2),
                          ("q1_targ", self.q1_targ), ("q2_targ", self.q2_targ)):
            out.update({f"{name}.{k}": v for k, v in mod.state_dict().items()})
        out["log_alpha"] = self.log_alpha.data.reshape(1).copy()
        return out

    def load_arrays(self, arrays: Dict[str, np.ndarray]) -> None:
        for name, mod in (("actor", self.actor), ("q1", self.q1), ("q2", self.q2),
                          ("q1_targ", self.q1_targ), ("q2_targ", self.q2_targ)):
            pre = name + "."
            mod.load_state_dict({k[len(pre):]: v for k, v in arrays.items() if k.startswith(pre)})
        if "log_alpha" not in arrays:
            raise LoadError("missing log_alpha")
        self.log_alpha.data = np.array(arrays["log_alpha"][0])

    def save(self, path, manifest: Optional[dict] = None) -> None:
        path = Path(path)
        save_arrays(path, self.arrays())
        meta = {"sac": self.cfg.to_dict(), "config_hash": self.cfg.digest(),
                "obs_dim": self.obs_dim, "act_dim": self.act_dim}
        meta.update(manifest or {})
        path.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "SacAgent":
        path = Path(path)
        try:
            meta = json.loads(path.with_suffix(".json").read_text())
        except (OSError, ValueError) as exc:
            raise LoadError(f"cannot read checkpoint manifest for {path}: {exc}") from exc
        agent = cls(SacConfig.from_dict(meta["sac"]), 0, meta["obs_dim"], meta["act_dim"])
        agent.load_arrays(load_arrays(path))
        return agent


# -- training loop ---------------------------------------------------------------

Scenario = Tuple[VascTree, EpisodeConfig]


def evaluate_policy(agent: SacAgent, scenarios: Sequence[Scenario], n_episodes: int, seed: int,
                    sim: Optional[SimConfig] = None) -> float:
    """Success fraction of the deterministic policy; scenarios are cycled."""
    rng = np.random.default_rng(seed)
    wins = 0
    for k in range(n_episodes):
        tree, cfg = scenarios[k % len(scenarios)]
        ep = Episode(tree, cfg, rng, sim, k)
        while not ep.finished:
            ep.run_step(ActionCommand.from_unit(agent.act_unit(ep.observation.as_vector(), True)))
        wins += ep.reached
    return wins / n_episodes if n_episodes else 0.0


@dataclass
class Snapshot:
    step: int
    success_rate: float
    arrays: Dict[str, np.ndarray] = field(repr=False, default_factory=dict)


STEP_LOG_FIELDS = ("step", "episode", "episode_step", "reward", "reached", "timed_out")
TRAIN_LOG_FIELDS = ("step", "episode", "episode_steps", "episode_return", "reached",
                    "eval_sr", "critic_loss", "actor_loss", "alpha_loss", "alpha")


class Trainer:
    """Resumable exploration loop; the whole object pickles at any step."""

    def __init__(self, train_scenarios: Sequence[Scenario], eval_scenarios: Sequence[Scenario],
                 cfg: SacConfig, seed: int, sim: Optional[SimConfig] = None, label: str = ""):
        cfg.validate()
        self.cfg, self.seed, self.label = cfg, seed, label
        self.sim = sim or SimConfig()
        ss = np.random.SeedSequence(seed)
        s_agent, s_env, s_act, s_upd, s_eval = ss.spawn(5)
        self.agent = SacAgent(cfg, int(s_agent.generate_state(1)[0]))
        tr = [(t, EpisodeConfig(cfg.train_timeout, c.start_set, c.target_set, c.task_label, c.dt))
              for t, c in train_scenarios]
        self.env = NavEnv(tr, int(s_env.generate_state(1)[0]), self.sim)
        self.eval_scenarios = [(t, EpisodeConfig(cfg.train_timeout, c.start_set, c.target_set,
                                                 c.task_label, c.dt)) for t, c in eval_scenarios]
        self.eval_seed = int(s_eval.generate_state(1)[0])
        self.act_rng = np.random.default_rng(s_act)
        self.upd_rng = np.random.default_rng(s_upd)
        self.buffer = ReplayBuffer(min(cfg.buffer_size, max(cfg.total_steps, 1)))
        self.step = 0
        self.obs = None
        self.ep_return = 0.0
        self.ep_steps = 0
        self.last_losses: Dict[str, float] = {}
        self.step_log: List[tuple] = []
        self.train_log: List[dict] = []
        self.snapshots: List[Snapshot] = []
        self.best: Optional[Snapshot] = None

    @property
    def done(self) -> bool:
        return self.step >= self.cfg.total_steps

    def _snapshot(self) -> None:
        sr = evaluate_policy(self.agent, self.eval_scenarios, self.cfg.eval_episodes,
                             self.eval_seed, self.sim)
        snap = Snapshot(self.step, sr, self.agent.arrays())
        self.snapshots.append(Snapshot(self.step, sr))
        if self.best is None or sr >= self.best.success_rate:
            self.best = snap
        self.train_log.append(dict(step=self.step, episode=self.env.n_episodes, episode_steps="",
                                   episode_return="", reached="", eval_sr=sr, **self._loss_cols()))

    def _loss_cols(self) -> dict:
        return {k: self.last_losses.get(k, "") for k in ("critic_loss", "actor_loss", "alpha_loss", "alpha")}

    def run(self, stop_after: Optional[int] = None) -> "Trainer":
        """Advance until the budget is spent (or until ``stop_after`` total steps)."""
        cfg = self.cfg
        limit = cfg.total_steps if stop_after is None else min(stop_after, cfg.total_steps)
        while self.step < limit:
            if self.obs is None:
                self.obs = self.env.reset()
                self.ep_return, self.ep_steps = 0.0, 0
            if self.step < cfg.warmup_steps:
                a = self.act_rng.uniform(-1.0, 1.0, self.agent.act_dim)
            else:
                a = self.agent.act_unit(self.obs, False, self.act_rng)
            obs2, r, reached, timed_out = self.env.step(a)
            self.buffer.add(self.obs, a, r, obs2, reached)
            self.step += 1
            self.ep_steps += 1
            self.ep_return += r
            ep_id = self.env.n_episodes - 1
            self.step_log.append((self.step, ep_id, self.ep_steps, r, reached, timed_out))
            self.obs = obs2
            if reached or timed_out:
                self.train_log.append(dict(step=self.step, episode=ep_id, episode_steps=self.ep_steps,
                                           episode_return=self.ep_return, reached=int(reached),
                                           eval_sr="", **self._loss_cols()))
                self.obs = None
            if self.step >= cfg.warmup_steps and self.step % cfg.update_every == 0:
                for _ in range(cfg.updates_per_round):
                    out = self.agent.update(self.buffer, self.upd_rng)
                    if out is not None:
                        self.last_losses = out
            if self.step % cfg.eval_every == 0 or self.step == cfg.total_steps:
                self._snapshot()
        return self

    def best_agent(self) -> SacAgent:
        """A copy of the agent restored to the best evaluation snapshot."""
        agent = SacAgent(self.cfg, 0, self.agent.obs_dim, self.agent.act_dim)
        agent.load_arrays(self.best.arrays if self.best is not None else self.agent.arrays())
        return agent

    @property
    def selected_step(self) -> int:
        return self.best.step if self.best is not None else self.step

    def save_state(self, path) -> None:
        tmp = Path(str(path) + ".tmp")
        with open(tmp, "wb") as fh:
            pickle.dump(self, fh, protocol=pickle.HIGHEST_PROTOCOL)
        tmp.replace(path)

    @staticmethod
    def load_state(path) -> "Trainer":
        try:
            with open(path, "rb") as fh:
                obj = pickle.load(fh)
        except (OSError, pickle.UnpicklingError, EOFError) as exc:
            raise LoadError(f"cannot load training state {path}: {exc}") from exc
        if not isinstance(obj, Trainer):
            raise LoadError(f"{path} does not hold a training state")
        return obj

    def write_logs(self, train_csv, step_csv=None) -> None:
        with open(train_csv, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=TRAIN_LOG_FIELDS, lineterminator="\n")
            w.writeheader()
            for row in self.train_log:
                w.writerow({k: (f"{v:.6g}" if isinstance(v, float) else v) for k, v in row.items()})
        if step_csv is not None:
            with open(step_csv, "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(STEP_LOG_FIELDS)
                for s, e, k, r, a, b in self.step_log:
                    w.writerow([s, e, k, f"{r:.8f}", int(a), int(b)])


def train_subtask(train_scenarios: Sequence[Scenario], cfg: SacConfig, seed: int,
                  eval_scenarios: Optional[Sequence[Scenario]] = None,
                  sim: Optional[SimConfig] = None, label: str = "") -> Trainer:
    """Train one agent for ``cfg.total_steps`` environment steps; returns the finished trainer."""
    return Trainer(train_scenarios, eval_scenarios or train_scenarios, cfg, seed, sim, label).run()
