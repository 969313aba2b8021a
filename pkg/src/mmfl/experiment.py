"""Scenario orchestration, repetitions, metrics files and cross-run comparison."""
from __future__ import annotations

import csv
import json
import os
import time
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import config as cfgmod
from .adversary import Adversary
from .config import ExperimentConfig, derive_rng
from .data import DatasetSplit, generate_synthetic, load_csv, load_schema, partition
from .network import (ChannelParams, DevicePose, GridMap, channel_gain, db_to_linear, load_trace,
                      random_poses, snapshot, stations_from_config, tx_rate)
from .nn import ModelSpec, init_model
from .protocol import (Device, EdgeState, EpochMetrics, FLSettings, ModelCatalog, World, run_epoch,
                       validate_plan)
from .selector import (DRLAgent, SelectorConfig, epsilon_schedule, random_selector, reward,
                       static_selector)
from .timing import ComputeProfile

EVAL_KEY = "eval"


class ScenarioError(ValueError):
    pass


# -------------------------------------------------------------- scenarios ---

@dataclass(frozen=True)
class Scenario:
    name: str
    multi_model: bool
    selector: str              # drl | random | static
    attack: bool
    master: Optional[str] = None

    def label(self, specs: Dict[str, ModelSpec], master: str) -> str:
        pretty = _pretty(specs[master])
        if not self.multi_model:
            return f"FL-{pretty}" + ("-With Attack" if self.attack else "")
        tag = {"drl": "DRL", "random": "RND", "static": "STATIC"}[self.selector]
        return f"MM-FL-{tag} (Master: {pretty})" + ("" if self.attack else " without attack")


def _pretty(spec: ModelSpec) -> str:
    return f"{spec.cell.upper()} {spec.hidden_dim}"


_BASES = {
    "fl-single": (False, "static"),
    "mmfl-drl": (True, "drl"),
    "mmfl-rnd": (True, "random"),
    "mmfl-static": (True, "static"),
}

SCENARIOS = tuple(f"{b}-{a}" for b in _BASES for a in ("noattack", "attack"))


def parse_scenario(name: str) -> Scenario:
    """``<base>-<attack|noattack>[@<master id>]``, e.g. ``mmfl-drl-attack@gru28``."""
    base_name, _, master = name.partition("@")
    base, _, mode = base_name.rpartition("-")
    if base not in _BASES or mode not in ("attack", "noattack"):
        raise ScenarioError(f"unknown scenario {name!r}; known: {', '.join(SCENARIOS)} (optionally @<master>)")
    multi, sel = _BASES[base]
    return Scenario(name, multi, sel, mode == "attack", master or None)


def resolve(config: ExperimentConfig, scenario: Scenario) -> ExperimentConfig:
    """Config with the scenario's choices folded in (master, slave set, selector, attack)."""
    cfg = config.copy()
    if scenario.master is not None:
        cfg.models.master = scenario.master
    cfg.attack = replace(cfg.attack, enabled=scenario.attack)
    if scenario.multi_model:
        cfg.selector.kind = scenario.selector
        if scenario.selector == "static" and cfg.selector.static_model is None:
            others = [j for j in cfg.slave_ids if j != cfg.models.master]
            cfg.selector.static_model = others[0] if others else cfg.models.master
    else:
        cfg.models.slaves = [cfg.models.master]
        cfg.selector.kind = "static"
        cfg.selector.static_model = cfg.models.master
        cfg.fl.t_max = 1.0
    return cfg


# ------------------------------------------------------------ environment ---

def _load_flows(cfg: ExperimentConfig, rng: np.random.Generator):
    d, n = cfg.data, cfg.network.n_devices
    need = d.flows_per_device * n + d.test_flows
    if d.source == "csv":
        return load_csv(d.csv_path, load_schema(d.schema_path))
    return generate_synthetic(rng, d.n_features, need, d.class_sep, d.malicious_fraction)


def max_rate(cfg: ExperimentConfig) -> float:
    """Best in-cell uplink rate (1 m from the widest-band station); the state-feature scale."""
    if cfg.network.max_rate_bps:
        return float(cfg.network.max_rate_bps)
    ch = channel_params(cfg)
    g = channel_gain(1.0, ch)
    bw = max(s["bandwidth_hz"] for s in cfg.network.stations)
    return tx_rate(bw, db_to_linear(ch.device_tx_power_dbm), g, db_to_linear(ch.noise_dbm))


def channel_params(cfg: ExperimentConfig) -> ChannelParams:
    n = cfg.network
    return ChannelParams(n.path_loss_coeff, n.path_loss_exp, n.noise_dbm, n.device_tx_power_dbm)


class FLEnvironment:
    """Repetition-level fixtures (data split, device CPUs) and per-episode world factory."""

    def __init__(self, cfg: ExperimentConfig, seed: int):
        self.cfg = cfg
        self.seed = seed
        net, d = cfg.network, cfg.data
        flows = _load_flows(cfg, derive_rng(seed, "data"))
        n_bs = len(net.stations)
        self.split: DatasetSplit = partition(
            flows, net.n_devices, d.flows_per_device, derive_rng(seed, "partition"),
            edge_sizes=[d.edge_flows] * n_bs, test_size=d.test_flows)
        lo, hi = net.device_cpu_hz
        device_hz = derive_rng(seed, "cpu").uniform(lo, hi, net.n_devices)
        self.specs = {s["model_id"]: ModelSpec(**{**s, "input_dim": flows.n_features})
                      for s in cfg.models.specs}
        self.catalog = ModelCatalog(self.specs, tuple(cfg.slave_ids), cfg.models.master)
        sizes = self.catalog.sizes()
        t = cfg.timing
        self.stations = stations_from_config(net.stations)
        self.profile = ComputeProfile(
            device_hz=tuple(float(f) for f in device_hz),
            bs_hz=tuple(float(b.cpu_hz) for b in self.stations),
            cloud_hz=t.cloud_cpu_hz,
            label_cycles={j: t.label_cycles_per_param * sizes[j] for j in self.catalog.slave_ids},
            distill_cycles=t.distill_cycles_per_param * sizes[cfg.models.master],
            aggregate_cycles=t.aggregate_cycles,
            train_cycles_per_param=t.train_cycles_per_param,
            inference_cycles=t.inference_cycles,
        )
        self.settings = FLSettings(
            local_iters=cfg.fl.local_iters, lr=cfg.fl.lr, lr_decay=cfg.fl.lr_decay,
            kt_passes=cfg.fl.kt_passes, kt_lr=cfg.fl.kt_lr, knowledge_transfer=cfg.fl.knowledge_transfer,
            barrier=cfg.fl.barrier, signature_check=cfg.fl.signature_check,
            cloud_rate_bps=net.cloud_rate_bps, bytes_per_param=net.bytes_per_param, dt=net.dt)
        self.grid = GridMap(net.cells_per_side, net.cell_width)
        self.channel = channel_params(cfg)
        self.trace = load_trace(net.trace_path) if net.trace_path else None

    def new_world(self, key) -> World:
        """Fresh FL session: same data, new initial weights and vehicle placement for ``key``."""
        cfg = self.cfg
        init_rng = derive_rng(self.seed, "init", key)
        master = init_model(self.specs[cfg.models.master], init_rng)
        slaves0 = {j: (master if j == cfg.models.master else init_model(self.specs[j], init_rng))
                   for j in self.catalog.slave_ids}
        edges = [EdgeState(b.id, dict(slaves0), master, self.split.edge[m])
                 for m, b in enumerate(self.stations)]
        devices = [Device(u, shard, dict(slaves0)) for u, shard in enumerate(self.split.device_train)]
        poses = random_poses(cfg.network.n_devices, self.grid, derive_rng(self.seed, "poses", key),
                             cfg.network.mean_speed_mps, cfg.network.speed_spread)
        poses = self._traced(poses, 0)
        return World(self.catalog, self.settings, self.grid, self.stations, self.channel, self.profile,
                     poses, devices, edges, master, self.split.test, derive_rng(self.seed, "mobility", key))

    def _traced(self, poses: List[DevicePose], epoch: int) -> List[DevicePose]:
        if not self.trace or epoch not in self.trace:
            return poses
        at = self.trace[epoch]
        return [replace(p, x=at[u][0], y=at[u][1]) if u in at else p for u, p in enumerate(poses)]

    def after_epoch(self, world: World):
        if self.trace and world.epoch in self.trace:
            world.poses = self._traced(world.poses, world.epoch)
            world.net = snapshot(world.poses, world.stations, world.channel, world.epoch)


# ---------------------------------------------------------------- records ---

@dataclass
class EpisodeLog:
    episode: int
    key: str
    compromised: List[int]
    epsilon: float
    rewards: List[float]
    epochs: List[EpochMetrics]

    @property
    def cumulative_reward(self) -> float:
        return float(sum(self.rewards))


@dataclass
class RepetitionRecord:
    repetition: int
    seed: int
    beta: float
    t_ref: float
    training: List[float]            # cumulative reward per training episode
    evaluation: EpisodeLog


@dataclass
class RunRecord:
    scenario: str
    label: str
    seed: int
    config: Dict
    repetitions: List[RepetitionRecord] = field(default_factory=list)
    timestamp: float = field(default_factory=time.time)

    @property
    def n_epochs(self) -> int:
        return len(self.repetitions[0].evaluation.epochs) if self.repetitions else 0

    def _mean(self, getter) -> List[float]:
        if not self.repetitions:
            return []
        rows = [[getter(m) for m in rep.evaluation.epochs] for rep in self.repetitions]
        return [float(v) for v in np.mean(np.array(rows, dtype=float), axis=0)]

    def accuracy_curve(self) -> List[float]:
        return self._mean(lambda m: m.accuracy)

    def timing_curve(self) -> List[float]:
        return self._mean(lambda m: m.mean_t_int)

    def loss_curve(self) -> List[float]:
        return self._mean(lambda m: m.loss)

    def reward_curve(self) -> List[float]:
        """Per-episode cumulative reward, averaged over repetitions (training, then evaluation)."""
        if not self.repetitions:
            return []
        rows = [rep.training + [rep.evaluation.cumulative_reward] for rep in self.repetitions]
        return [float(v) for v in np.mean(np.array(rows, dtype=float), axis=0)]


# ----------------------------------------------------------------- runner ---

def _selector_config(cfg: ExperimentConfig, beta: float) -> SelectorConfig:
    s = cfg.selector
    return SelectorConfig(alpha=cfg.fl.alpha, beta=beta, t_max=cfg.fl.t_max, eps_start=s.eps_start,
                          eps_end=s.eps_end, gamma=s.gamma, lr=s.lr, hidden_dim=s.hidden_dim,
                          penalty=s.penalty, normalize_reward=s.normalize_reward)


class _Planner:
    def __init__(self, cfg: ExperimentConfig, env: FLEnvironment, seed: int):
        self.cfg = cfg
        self.kind = cfg.selector.kind
        self.model_ids = list(cfg.slave_ids)
        self.master = cfg.models.master
        self.n = cfg.network.n_devices
        self.rng = derive_rng(seed, "selector")
        self.agent = None
        if self.kind == "drl":
            self.agent = DRLAgent(self.n, len(env.stations), self.model_ids, self.master,
                                  _selector_config(cfg, 1.0), derive_rng(seed, "policy"), max_rate(cfg))

    def plan(self, world: World, previous, epsilon: float, epoch: int):
        if self.kind == "static":
            j = self.model_ids.index(self.cfg.selector.static_model)
            return static_selector(j, self.n, self.model_ids, self.master, self.cfg.fl.t_max, epoch), None
        if self.kind == "random":
            return random_selector(self.rng, self.n, self.model_ids, self.master, self.cfg.fl.t_max, epoch), None
        state = self.agent.state(world.net, previous)
        return self.agent.act(state, epsilon, epoch), state

    def first_plan(self):
        if self.agent is not None:
            return self.agent.initial_plan()
        return None


def run_episode(env: FLEnvironment, planner: _Planner, adversary: Adversary, episode: int, key,
                epsilon: float, learn: bool, beta_ref: Dict[str, float]) -> EpisodeLog:
    cfg = env.cfg
    world = env.new_world(key)
    adversary.rng = derive_rng(env.seed, "attack", key)
    compromise = adversary.start_episode(episode)
    hook = adversary if compromise.devices else None
    previous = planner.first_plan()
    rewards, epochs = [], []
    for t in range(cfg.fl.epochs):
        plan, state = planner.plan(world, previous, epsilon, t)
        feasible = not validate_plan(plan, cfg.network.n_devices, cfg.fl.t_max)
        world, m = run_epoch(world, plan, hook)
        env.after_epoch(world)
        if "beta" not in beta_ref:
            t_ref = m.mean_t_int
            beta_ref["t_ref"] = t_ref
            beta_ref["beta"] = cfg.fl.beta if cfg.fl.beta is not None else (1.0 / t_ref if t_ref > 0 else 1.0)
        sc = _selector_config(cfg, beta_ref["beta"])
        part = m.participants
        m.reward = reward([m.device_loss[u] for u in part], [m.t_int[u] for u in part], sc, feasible)
        if learn and planner.agent is not None:
            planner.agent.learn(state, plan, m.reward, planner.agent.state(world.net, plan))
        rewards.append(m.reward)
        epochs.append(m)
        previous = plan
    return EpisodeLog(episode, str(key), list(compromise.devices), epsilon, rewards, epochs)


def run_repetition(cfg: ExperimentConfig, repetition: int, seed: int,
                   progress=None) -> RepetitionRecord:
    env = FLEnvironment(cfg, seed)
    planner = _Planner(cfg, env, seed)
    adversary = Adversary(cfg.attack, derive_rng(seed, "attack"), cfg.network.n_devices)
    beta_ref: Dict[str, float] = {}
    training = []
    if planner.agent is not None:
        s = cfg.selector
        for ep in range(cfg.episodes):
            eps = epsilon_schedule(ep, cfg.episodes, s.eps_start, s.eps_end)
            log = run_episode(env, planner, adversary, ep, ep, eps, True, beta_ref)
            training.append(log.cumulative_reward)
            if progress:
                progress(repetition, ep, log)
    evaluation = run_episode(env, planner, adversary, len(training), EVAL_KEY, 0.0, False, beta_ref)
    return RepetitionRecord(repetition, seed, beta_ref["beta"], beta_ref["t_ref"], training, evaluation)


def run_scenario(config: ExperimentConfig, scenario, seed: Optional[int] = None, progress=None) -> RunRecord:
    """Run ``scenario`` for ``config.repetitions`` repetitions seeded ``seed + r``.

    DRL scenarios train for ``config.episodes`` episodes before a greedy
    evaluation episode; other selectors run the evaluation episode only.
    Evaluation episodes share vehicle placement, initial weights and the
    compromised set across scenarios for a given seed.
    """
    sc = parse_scenario(scenario) if isinstance(scenario, str) else scenario
    seed = config.seed if seed is None else int(seed)
    errors = cfgmod.validate(config)
    if sc.master is not None and sc.master not in [s.get("model_id") for s in config.models.specs]:
        errors.append(f"scenario: master {sc.master!r} is not a declared spec")
    if errors:
        raise cfgmod.ConfigError(errors)
    cfg = resolve(config, sc)
    cfg.seed = seed
    errors = cfgmod.validate(cfg)
    if errors:
        raise cfgmod.ConfigError(errors)
    specs = {s["model_id"]: ModelSpec(**s) for s in cfg.models.specs}
    record = RunRecord(sc.name, sc.label(specs, cfg.models.master), seed, cfg.to_dict())
    for r in range(cfg.repetitions):
        record.repetitions.append(run_repetition(cfg, r, seed + r, progress))
    return record


# --------------------------------------------------------------- emission ---

FILES = {
    "reward.csv": ["episode", "cumulative_reward"],
    "accuracy.csv": ["epoch", "scenario", "accuracy"],
    "timing.csv": ["epoch", "scenario", "mean_T_Int"],
    "mitigation.csv": ["repetition", "epoch", "device", "reason", "crafted"],
    "metrics.csv": ["repetition", "epoch", "loss", "accuracy", "mean_T_Int", "max_T_Int", "T_ag", "T_ag_bs",
                    "T_knw_bs", "max_T_loc", "mean_T_down", "reward", "plan", "participants", "excluded", "crafted_total", "crafted_accepted", "benign_excluded"],
    "attack.csv": ["repetition", "episode", "compromised"],
}


def _fmt(v: float) -> str:
    return repr(float(v))


def _join(values) -> str:
    return " ".join(_fmt(v) for v in values)


def emit_metrics(record: RunRecord, out_dir) -> Dict[str, str]:
    """Write the run's CSVs and ``run.json``; returns name -> path."""
    os.makedirs(out_dir, exist_ok=True)
    if not os.access(out_dir, os.W_OK):
        raise PermissionError(f"cannot write to {out_dir}")
    rows: Dict[str, List[list]] = {k: [] for k in FILES}
    for i, r in enumerate(record.reward_curve()):
        rows["reward.csv"].append([i, _fmt(r)])
    for t, a in enumerate(record.accuracy_curve()):
        rows["accuracy.csv"].append([t, record.scenario, _fmt(a)])
    for t, v in enumerate(record.timing_curve()):
        rows["timing.csv"].append([t, record.scenario, _fmt(v)])
    for rep in record.repetitions:
        ev = rep.evaluation
        rows["attack.csv"].append([rep.repetition, ev.episode, " ".join(map(str, ev.compromised))])
        for m in ev.epochs:
            crafted = set(ev.compromised)
            for u, reason in m.report.excluded:
                rows["mitigation.csv"].append([rep.repetition, m.epoch, u, reason, int(u in crafted)])
            rows["metrics.csv"].append([
                rep.repetition, m.epoch, _fmt(m.loss), _fmt(m.accuracy), _fmt(m.mean_t_int), _fmt(m.max_t_int),
                _fmt(m.timing.t_ag), _join(m.timing.t_ag_bs), _join(m.timing.t_knw),
                _fmt(max(m.timing.t_loc.values(), default=0.0)),
                _fmt(np.mean(list(m.timing.t_down.values())) if m.timing.t_down else 0.0),
                _fmt(m.reward if m.reward is not None else float("nan")), " ".join(map(str, m.plan)),
                len(m.participants), m.excluded_count, m.crafted_total, m.crafted_accepted, m.benign_excluded])
    paths = {}
    for name, header in FILES.items():
        path = os.path.join(out_dir, name)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            w.writerows(rows[name])
        paths[name] = path
    manifest = {
        "scenario": record.scenario, "label": record.label, "seed": record.seed,
        "repetition_seeds": [rep.seed for rep in record.repetitions],
        "beta": [rep.beta for rep in record.repetitions],
        "t_ref": [rep.t_ref for rep in record.repetitions],
        "timestamp": record.timestamp, "config": record.config,
    }
    path = os.path.join(out_dir, "run.json")
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    paths["run.json"] = path
    return paths


# ------------------------------------------------------------- comparison ---

@dataclass
class LoadedRecord:
    """Curves read back from an emitted run directory."""
    scenario: str
    label: str
    accuracy: List[float]
    timing: List[float]

    def accuracy_curve(self):
        return self.accuracy

    def timing_curve(self):
        return self.timing


def load_record(run_dir) -> LoadedRecord:
    with open(os.path.join(run_dir, "run.json")) as fh:
        manifest = json.load(fh)

    def column(name, col):
        with open(os.path.join(run_dir, name), newline="") as fh:
            return [float(r[col]) for r in csv.DictReader(fh)]

    return LoadedRecord(manifest["scenario"], manifest.get("label", manifest["scenario"]),
                        column("accuracy.csv", "accuracy"), column("timing.csv", "mean_T_Int"))


class CompareError(ValueError):
    pass


@dataclass
class Comparison:
    scenarios: List[str]
    epochs: int
    metrics: Dict[str, Dict[str, List[float]]]        # metric -> scenario -> per-epoch
    deltas: Dict[str, Dict[str, List[float]]]         # metric -> scenario -> minus the first scenario
    orderings: Dict[str, List[List[str]]]             # metric -> per-epoch scenarios, best first
    violations: List[str]

    def table(self) -> str:
        lines = ["metric\tepoch\t" + "\t".join(self.scenarios)]
        for metric, per in self.metrics.items():
            for t in range(self.epochs):
                lines.append(f"{metric}\t{t}\t" + "\t".join(f"{per[s][t]:.6g}" for s in self.scenarios))
        lines += [f"VIOLATION {v}" for v in self.violations]
        return "\n".join(lines)


_HIGHER_IS_BETTER = {"accuracy": True, "timing": False}


def compare_scenarios(records: Sequence, expect: Optional[Sequence[Dict]] = None) -> Comparison:
    """Per-epoch deltas against the first record and orderings, plus expectation checks.

    Each expectation is ``{"metric": "accuracy"|"timing", "order": [best, ..., worst],
    "epochs": "final"|"all"|[ints], "tolerance": float}``; a violation is any
    adjacent pair ranked the wrong way by more than ``tolerance``.
    """
    if len(records) < 2:
        raise CompareError("need at least two records")
    names = [r.scenario for r in records]
    if len(set(names)) != len(names):
        names = [f"{r.scenario}#{i}" for i, r in enumerate(records)]
    metrics = {"accuracy": {n: list(r.accuracy_curve()) for n, r in zip(names, records)},
               "timing": {n: list(r.timing_curve()) for n, r in zip(names, records)}}
    lengths = {len(v) for per in metrics.values() for v in per.values()}
    if len(lengths) != 1:
        raise CompareError(f"epoch mismatch between records: {sorted(lengths)}")
    epochs = lengths.pop()
    deltas, orderings = {}, {}
    for metric, per in metrics.items():
        base = np.array(per[names[0]])
        deltas[metric] = {n: [float(v) for v in np.array(per[n]) - base] for n in names}
        sign = -1 if _HIGHER_IS_BETTER[metric] else 1
        orderings[metric] = [sorted(names, key=lambda n: (sign * per[n][t], names.index(n)))
                             for t in range(epochs)]
    violations = []
    for exp in expect or []:
        metric = exp.get("metric", "accuracy")
        if metric not in metrics:
            raise CompareError(f"unknown metric {metric!r}")
        order = list(exp["order"])
        missing = [n for n in order if n not in metrics[metric]]
        if missing:
            raise CompareError(f"expectation names unknown scenarios {missing}")
        tol = float(exp.get("tolerance", 0.0))
        which = exp.get("epochs", "final")
        ts = [epochs - 1] if which == "final" else range(epochs) if which == "all" else list(which)
        per = metrics[metric]
        for t in ts:
            for a, b in zip(order, order[1:]):
                better = per[a][t] >= per[b][t] - tol if _HIGHER_IS_BETTER[metric] else per[a][t] <= per[b][t] + tol
                if not better:
                    violations.append(f"{metric} epoch {t}: expected {a} ({per[a][t]:.6g}) "
                                      f"ahead of {b} ({per[b][t]:.6g})")
    return Comparison(names, epochs, metrics, deltas, orderings, violations)
