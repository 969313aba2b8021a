"""Model-poisoning attacker.

The attacker knows only the global model's structure, so every crafted
upload is master-shaped: w_global + lambda * (w_target - w_global).
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .nn import INIT_SCALE, ModelWeights, init_model


@dataclass(frozen=True)
class AttackConfig:
    enabled: bool = True
    compromised_min: int = 3
    compromised_max: int = 5
    lr_range: Tuple[float, float] = (0.25, 0.35)
    target_scale: float = 10.0      # multiple of the benign init range
    lr_per_epoch: bool = False      # resample lambda every epoch instead of once per episode

    def validate(self, n_devices: int) -> List[str]:
        errors = []
        if not 0 <= self.compromised_min <= self.compromised_max <= n_devices:
            errors.append(f"attack: need 0 <= min <= max <= N ({n_devices})")
        lo, hi = self.lr_range
        if not 0 < lo <= hi <= 1:
            errors.append("attack: lr_range must lie in (0, 1]")
        if self.target_scale <= 0:
            errors.append("attack: target_scale must be positive")
        return errors


@dataclass(frozen=True)
class CompromiseSet:
    episode: int
    devices: Tuple[int, ...] = ()
    rates: Dict[int, float] = field(default_factory=dict)

    def __contains__(self, u):
        return u in self.devices


def select_compromised(rng: np.random.Generator, n_devices: int, config: AttackConfig,
                       episode: int = 0) -> CompromiseSet:
    if not config.enabled:
        return CompromiseSet(episode)
    size = int(rng.integers(config.compromised_min, config.compromised_max + 1))
    devices = tuple(sorted(int(u) for u in rng.choice(n_devices, size=size, replace=False)))
    lo, hi = config.lr_range
    rates = {u: float(rng.uniform(lo, hi)) for u in devices}
    return CompromiseSet(episode, devices, rates)


def craft_poisoned(w_global: ModelWeights, w_target: ModelWeights, lam: float) -> ModelWeights:
    if not w_global.spec.same_structure(w_target.spec):
        raise ValueError("target model must share the global model's structure")
    return ModelWeights(w_global.spec, w_global.params + lam * (w_target.params - w_global.params))


def random_target(spec, rng: np.random.Generator, config: AttackConfig) -> ModelWeights:
    return init_model(spec, rng, scale=INIT_SCALE * config.target_scale)


def inject(uploads: Sequence, compromise: CompromiseSet, w_global: ModelWeights, rng: np.random.Generator,
           config: AttackConfig = AttackConfig()) -> list:
    """Swap each compromised device's upload for a crafted master-shaped one.

    ``uploads`` are protocol ``Upload`` records; benign ones pass through
    untouched. The declared batch size is kept so the forgery looks routine.
    """
    out = []
    for up in uploads:
        if up.device_id not in compromise:
            out.append(up)
            continue
        lam = compromise.rates[up.device_id]
        if config.lr_per_epoch:
            lam = float(rng.uniform(*config.lr_range))
        target = random_target(w_global.spec, rng, config)
        out.append(replace(up, weights=craft_poisoned(w_global, target, lam), crafted=True))
    return out


class Adversary:
    """Episode-scoped attacker state: its rng stream and the current compromise set."""

    def __init__(self, config: AttackConfig, rng: np.random.Generator, n_devices: int):
        self.config = config
        self.rng = rng
        self.n_devices = n_devices
        self.compromise = CompromiseSet(-1)

    def start_episode(self, episode: int) -> CompromiseSet:
        self.compromise = select_compromised(self.rng, self.n_devices, self.config, episode)
        return self.compromise

    def __call__(self, uploads, w_global):
        if not self.compromise.devices:
            return list(uploads)
        return inject(uploads, self.compromise, w_global, self.rng, self.config)
