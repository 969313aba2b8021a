"""Per-epoch model assignment: DRL policy ensemble, random/static baselines, exhaustive oracle.

Every selector returns plans that give each device exactly one model and
keep the number of master assignments within floor(N * T_max).
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from .network import NetworkSnapshot
from .nn import ModelSpec, ModelWeights, backprop, init_model, softmax, softmax_head
from .protocol import AssignmentPlan, master_quota

BRUTE_FORCE_LIMIT = 4096


class SelectorConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SelectorConfig:
    alpha: float = 1.0
    beta: float = 1.0
    t_max: float = 0.6
    eps_start: float = 1.0
    eps_end: float = 0.02
    gamma: float = 0.1
    lr: float = 0.5
    hidden_dim: int = 16
    penalty: float = -1e3
    normalize_reward: bool = True

    def validate(self) -> List[str]:
        errors = []
        if self.alpha < 0 or self.beta < 0 or (self.alpha == 0 and self.beta == 0):
            errors.append("selector: alpha and beta must be >= 0 and not both 0")
        if not 0 <= self.t_max <= 1:
            errors.append("selector: t_max must lie in [0, 1]")
        if not 0 <= self.gamma < 1:
            errors.append("selector: gamma must lie in [0, 1)")
        if not 0 <= self.eps_end <= self.eps_start <= 1:
            errors.append("selector: need 0 <= eps_end <= eps_start <= 1")
        if self.lr < 0:
            errors.append("selector: lr must be >= 0")
        return errors


def epsilon_schedule(episode: int, episodes: int, start: float = 1.0, end: float = 0.02) -> float:
    """Exploration probability, linear from ``start`` to ``end`` at the last episode."""
    if episodes <= 1:
        return end
    frac = min(max(episode / (episodes - 1), 0.0), 1.0)
    return start + (end - start) * frac


# ----------------------------------------------------------------- state ---

@dataclass
class StateFeatures:
    rates: np.ndarray        # (N * M,), device-major, scaled to [0, 1]
    assignment: np.ndarray   # (N * l,), one one-hot block per device

    @property
    def vector(self) -> np.ndarray:
        return np.concatenate([self.rates, self.assignment])

    def __len__(self):
        return self.rates.size + self.assignment.size


def encode_state(snap: NetworkSnapshot, plan: AssignmentPlan, max_rate: float) -> StateFeatures:
    rates = np.clip(snap.rate_matrix / max_rate, 0.0, 1.0).ravel()
    return StateFeatures(rates, plan.x.T.astype(np.float64).ravel())


def policy_spec(n_devices: int, n_bs: int, n_models: int, hidden_dim: int, u: int = 0) -> ModelSpec:
    return ModelSpec(f"policy-{u}", n_devices * n_bs + n_models * n_devices, "dense", hidden_dim, n_models)


@dataclass
class PolicyEnsemble:
    nets: List[ModelWeights]

    @classmethod
    def create(cls, n_devices: int, n_bs: int, n_models: int, hidden_dim: int,
               rng: np.random.Generator) -> "PolicyEnsemble":
        return cls([init_model(policy_spec(n_devices, n_bs, n_models, hidden_dim, u), rng)
                    for u in range(n_devices)])

    def probabilities(self, state: np.ndarray) -> np.ndarray:
        """(N, l) softmax outputs, one row per device network."""
        return np.stack([softmax_head(net, state) for net in self.nets])


# -------------------------------------------------------------- planning ---

def _feasible(indices: Sequence[int], master_index: Optional[int], quota: int) -> bool:
    return master_index is None or sum(1 for i in indices if i == master_index) <= quota


def _check_satisfiable(n_models: int, master_index: Optional[int], quota: int, n_devices: int):
    if n_models == 1 and master_index == 0 and quota < n_devices:
        raise SelectorConfigError("the only model is the master and T_max forbids assigning it to everyone")


def random_selector(rng: np.random.Generator, n_devices: int, model_ids: Sequence[str], master_id: str,
                    t_max: float, epoch: int = 0) -> AssignmentPlan:
    """Uniform over feasible plans by rejection sampling."""
    l = len(model_ids)
    mi = model_ids.index(master_id) if master_id in model_ids else None
    quota = master_quota(n_devices, t_max)
    _check_satisfiable(l, mi, quota, n_devices)
    while True:
        idx = rng.integers(0, l, n_devices)
        if _feasible(idx, mi, quota):
            return AssignmentPlan.from_indices(epoch, model_ids, master_id, idx)


def static_selector(j: int, n_devices: int, model_ids: Sequence[str], master_id: str, t_max: float,
                    epoch: int = 0) -> AssignmentPlan:
    plan = AssignmentPlan.from_indices(epoch, model_ids, master_id, [j] * n_devices)
    if plan.master_count() > master_quota(n_devices, t_max):
        raise SelectorConfigError(
            f"static assignment of the master to all {n_devices} devices needs T_max = 1 (got {t_max})")
    return plan


def greedy_plan(probs: np.ndarray, master_index: Optional[int], quota: int) -> List[int]:
    """Per-device argmax (ties to the lower index), then demote the least confident masters."""
    idx = [int(np.argmax(row)) for row in probs]
    if master_index is None:
        return idx
    while sum(1 for i in idx if i == master_index) > quota:
        masters = [u for u, i in enumerate(idx) if i == master_index]
        u = min(masters, key=lambda d: (probs[d, master_index], d))
        alt = [(probs[u, k], -k) for k in range(probs.shape[1]) if k != master_index]
        idx[u] = -max(alt)[1]
    return idx


def select_action(ensemble: PolicyEnsemble, state: StateFeatures, epsilon: float, rng: np.random.Generator,
                  n_devices: int, t_max: float, model_ids: Sequence[str], master_id: str,
                  epoch: int = 0) -> AssignmentPlan:
    if rng.random() < epsilon:
        return random_selector(rng, n_devices, model_ids, master_id, t_max, epoch)
    probs = ensemble.probabilities(state.vector)
    mi = model_ids.index(master_id) if master_id in model_ids else None
    quota = master_quota(n_devices, t_max)
    _check_satisfiable(len(model_ids), mi, quota, n_devices)
    return AssignmentPlan.from_indices(epoch, model_ids, master_id, greedy_plan(probs, mi, quota))


# ---------------------------------------------------------------- reward ---

def objective(device_loss: Sequence[float], device_time: Sequence[float], alpha: float, beta: float) -> float:
    return float(sum(alpha * f + beta * t for f, t in zip(device_loss, device_time)))


def reward(device_loss: Sequence[float], device_time: Sequence[float], config: SelectorConfig,
           feasible: bool = True) -> float:
    """Negated weighted loss-plus-time; infeasible plans get a dominated penalty."""
    value = objective(device_loss, device_time, config.alpha, config.beta)
    if feasible:
        return -value
    return min(config.penalty, -10.0 * abs(value))


@dataclass
class Transition:
    state: StateFeatures
    action: AssignmentPlan
    reward: float
    next_state: StateFeatures


def update(ensemble: PolicyEnsemble, transition: Transition, gamma: float, lr: float) -> PolicyEnsemble:
    """One GD step per device on (p_chosen - (r + gamma * max_a p'(a)))^2 / 2."""
    if not np.isfinite(transition.reward):
        raise FloatingPointError("non-finite reward in transition")
    s, s_next = transition.state.vector, transition.next_state.vector
    actions = transition.action.indices
    nets = []
    for u, net in enumerate(ensemble.nets):
        target = transition.reward + gamma * float(np.max(softmax_head(net, s_next)))
        if not np.isfinite(target):
            raise FloatingPointError(f"non-finite Bellman target for device {u}")
        if lr == 0:
            nets.append(net)
            continue
        a = actions[u]

        def dlogits(z, a=a, target=target):
            p = softmax(z)
            err = p[:, a] - target
            onehot = np.zeros_like(p)
            onehot[:, a] = 1.0
            return (err * p[:, a])[:, None] * (onehot - p)

        grad = backprop(net, s[None], dlogits)
        nets.append(net.replace(net.params - lr * grad))
    return PolicyEnsemble(nets)


def chosen_outputs(ensemble: PolicyEnsemble, state: StateFeatures, plan: AssignmentPlan) -> np.ndarray:
    probs = ensemble.probabilities(state.vector)
    return probs[np.arange(len(probs)), plan.indices]


# ---------------------------------------------------------------- oracle ---

def enumerate_plans(n_devices: int, model_ids: Sequence[str], master_id: str, t_max: float, epoch: int = 0):
    mi = model_ids.index(master_id) if master_id in model_ids else None
    quota = master_quota(n_devices, t_max)
    for idx in itertools.product(range(len(model_ids)), repeat=n_devices):
        if _feasible(idx, mi, quota):
            yield AssignmentPlan.from_indices(epoch, model_ids, master_id, idx)


def brute_force_selector(n_devices: int, model_ids: Sequence[str], master_id: str, t_max: float,
                         evaluator: Callable[[AssignmentPlan], float], epoch: int = 0) -> AssignmentPlan:
    """Exhaustive minimiser of ``evaluator`` over feasible plans; ties go to the lexicographically first."""
    if len(model_ids) ** n_devices > BRUTE_FORCE_LIMIT:
        raise SelectorConfigError(f"{len(model_ids)}^{n_devices} plans exceeds the {BRUTE_FORCE_LIMIT} limit")
    best, best_val = None, None
    for plan in enumerate_plans(n_devices, model_ids, master_id, t_max, epoch):
        val = evaluator(plan)
        if best_val is None or val < best_val:
            best, best_val = plan, val
    if best is None:
        raise SelectorConfigError("no feasible plan")
    return best


# ----------------------------------------------------------------- agent ---

class DRLAgent:
    """Policy ensemble plus the bookkeeping used to train it across episodes.

    Bellman targets use rewards rescaled to [0, 1] by the running range of
    observed rewards, since the softmax outputs serving as Q-estimates live
    in [0, 1].
    """

    def __init__(self, n_devices: int, n_bs: int, model_ids: Sequence[str], master_id: str,
                 config: SelectorConfig, rng: np.random.Generator, max_rate: float):
        self.n_devices = n_devices
        self.model_ids = tuple(model_ids)
        self.master_id = master_id
        self.config = config
        self.rng = rng
        self.max_rate = max_rate
        self.ensemble = PolicyEnsemble.create(n_devices, n_bs, len(model_ids), config.hidden_dim, rng)
        self._lo: Optional[float] = None
        self._hi: Optional[float] = None

    def initial_plan(self, epoch: int = 0) -> AssignmentPlan:
        return random_selector(self.rng, self.n_devices, self.model_ids, self.master_id, self.config.t_max, epoch)

    def state(self, snap: NetworkSnapshot, previous: AssignmentPlan) -> StateFeatures:
        return encode_state(snap, previous, self.max_rate)

    def act(self, state: StateFeatures, epsilon: float, epoch: int = 0) -> AssignmentPlan:
        return select_action(self.ensemble, state, epsilon, self.rng, self.n_devices, self.config.t_max,
                             self.model_ids, self.master_id, epoch)

    def scaled(self, r: float) -> float:
        if not self.config.normalize_reward:
            return r
        self._lo = r if self._lo is None else min(self._lo, r)
        self._hi = r if self._hi is None else max(self._hi, r)
        if self._hi - self._lo <= 0:
            return 0.5
        return (r - self._lo) / (self._hi - self._lo)

    def learn(self, state: StateFeatures, plan: AssignmentPlan, raw_reward: float,
              next_state: StateFeatures) -> Transition:
        tr = Transition(state, plan, self.scaled(raw_reward), next_state)
        self.ensemble = update(self.ensemble, tr, self.config.gamma, self.config.lr)
        return tr


# ------------------------------------------------------- toy environment ---

@dataclass
class TableEnvironment:
    """Stationary instance: fixed per-model loss and time for every device, fixed rates.

    ``step`` returns per-device losses and times for a plan, so it doubles as
    the frozen evaluator for ``brute_force_selector``.
    """

    loss_table: np.ndarray     # (N, l)
    time_table: np.ndarray     # (N, l)
    rates: np.ndarray          # (N, M) bits/s
    model_ids: Tuple[str, ...]
    master_id: str

    @property
    def n_devices(self) -> int:
        return self.loss_table.shape[0]

    def snapshot(self, epoch: int = 0) -> NetworkSnapshot:
        assoc = [int(np.argmax(r)) for r in self.rates]
        return NetworkSnapshot(epoch, np.ones_like(self.rates), self.rates, self.rates, assoc)

    def step(self, plan: AssignmentPlan) -> Tuple[List[float], List[float]]:
        idx = plan.indices
        return ([float(self.loss_table[u, j]) for u, j in enumerate(idx)],
                [float(self.time_table[u, j]) for u, j in enumerate(idx)])

    def evaluator(self, alpha: float, beta: float) -> Callable[[AssignmentPlan], float]:
        return lambda plan: objective(*self.step(plan), alpha, beta)


def train_on_table(env: TableEnvironment, config: SelectorConfig, episodes: int, epochs: int,
                   rng: np.random.Generator) -> Tuple[DRLAgent, List[float]]:
    agent = DRLAgent(env.n_devices, env.rates.shape[1], env.model_ids, env.master_id, config, rng,
                     max_rate=float(env.rates.max()) or 1.0)
    curve = []
    snap = env.snapshot()
    for ep in range(episodes):
        eps = epsilon_schedule(ep, episodes, config.eps_start, config.eps_end)
        prev = agent.initial_plan()
        total = 0.0
        for t in range(epochs):
            state = agent.state(snap, prev)
            plan = agent.act(state, eps, t)
            losses, times = env.step(plan)
            r = reward(losses, times, config)
            agent.learn(state, plan, r, agent.state(snap, plan))
            total += r
            prev = plan
        curve.append(total)
    return agent, curve
