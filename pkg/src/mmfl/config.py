"""Experiment configuration: JSON in, validated dataclasses out."""
from __future__ import annotations

import copy
import json
import zlib
from dataclasses import asdict, dataclass, field, fields
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from .adversary import AttackConfig


def derive_rng(seed: int, *keys) -> np.random.Generator:
    """Independent, reproducible stream for ``(seed, *keys)``; string keys are hashed stably."""
    spawn = tuple(k if isinstance(k, int) else zlib.crc32(str(k).encode()) for k in keys)
    return np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=spawn))


def _default_stations():
    return [
        {"id": 0, "position": [50.0, 50.0], "bandwidth_hz": 28e6, "coverage_radius": 300.0,
         "tx_power_dbm": 34.0, "cpu_hz": 3.2e9},
        {"id": 1, "position": [350.0, 350.0], "bandwidth_hz": 30e6, "coverage_radius": 300.0,
         "tx_power_dbm": 34.0, "cpu_hz": 2.6e9},
    ]


def _default_specs():
    return [
        {"model_id": "gru28", "input_dim": 87, "cell": "gru", "hidden_dim": 28, "output_dim": 1},
        {"model_id": "gru32", "input_dim": 87, "cell": "gru", "hidden_dim": 32, "output_dim": 1},
    ]


@dataclass
class NetworkConfig:
    cells_per_side: int = 4
    cell_width: float = 100.0
    stations: List[Dict[str, Any]] = field(default_factory=_default_stations)
    path_loss_coeff: float = 1e-3
    path_loss_exp: float = 5.0
    noise_dbm: float = -174.0          # total noise power; use noise_dbm + 10 log10(B) for a per-Hz reading
    device_tx_power_dbm: float = 23.0  # "23 db" read as dBm
    n_devices: int = 10
    device_cpu_hz: Tuple[float, float] = (1.9e9, 2.4e9)
    mean_speed_mps: float = 12.5       # 45 km/h
    speed_spread: float = 0.2
    dt: float = 1.0
    cloud_rate_bps: float = 100e6
    bytes_per_param: float = 4.0
    max_rate_bps: Optional[float] = None  # state-feature scale; None -> best in-cell rate at 1 m
    trace_path: Optional[str] = None


@dataclass
class ModelsConfig:
    master: str = "gru32"
    specs: List[Dict[str, Any]] = field(default_factory=_default_specs)
    slaves: Optional[List[str]] = None  # None -> every spec, in listed order


@dataclass
class FLConfig:
    epochs: int = 8
    local_iters: int = 5
    lr: float = 0.07
    lr_decay: float = 1.0
    t_max: float = 0.6
    alpha: float = 1.0
    beta: Optional[float] = None       # None -> 1 / (first-epoch mean recognition time)
    kt_passes: int = 1
    kt_lr: Optional[float] = None
    knowledge_transfer: bool = True
    barrier: bool = True               # False: per-device K * T_loc(u) instead of the slowest device's
    signature_check: bool = False


@dataclass
class TimingConfig:
    cloud_cpu_hz: float = 10e9
    train_cycles_per_param: float = 60.0     # device, per flow
    label_cycles_per_param: float = 2.0      # BS, per edge flow
    distill_cycles_per_param: float = 6.0    # BS, per edge flow
    aggregate_cycles: float = 10.0           # per parameter
    inference_cycles: float = 2.5e5


@dataclass
class SelectorSection:
    kind: str = "drl"                  # drl | random | static
    static_model: Optional[str] = None
    eps_start: float = 1.0
    eps_end: float = 0.02
    gamma: float = 0.1
    lr: float = 0.5
    hidden_dim: int = 16
    penalty: float = -1e3
    normalize_reward: bool = True


@dataclass
class DataConfig:
    source: str = "synthetic"          # synthetic | csv
    n_features: int = 87
    flows_per_device: int = 900
    test_flows: int = 3000
    edge_flows: int = 2400
    class_sep: float = 3.0
    malicious_fraction: float = 0.5
    csv_path: Optional[str] = None
    schema_path: Optional[str] = None


@dataclass
class ExperimentConfig:
    network: NetworkConfig = field(default_factory=NetworkConfig)
    models: ModelsConfig = field(default_factory=ModelsConfig)
    fl: FLConfig = field(default_factory=FLConfig)
    timing: TimingConfig = field(default_factory=TimingConfig)
    attack: AttackConfig = field(default_factory=AttackConfig)
    selector: SelectorSection = field(default_factory=SelectorSection)
    data: DataConfig = field(default_factory=DataConfig)
    seed: int = 0
    episodes: int = 200
    repetitions: int = 5

    def to_dict(self) -> Dict[str, Any]:
        return json.loads(json.dumps(asdict(self)))

    @property
    def slave_ids(self) -> List[str]:
        if self.models.slaves is not None:
            return list(self.models.slaves)
        return [s["model_id"] for s in self.models.specs]

    def copy(self) -> "ExperimentConfig":
        return copy.deepcopy(self)


_SECTIONS = {
    "network": NetworkConfig, "models": ModelsConfig, "fl": FLConfig, "timing": TimingConfig,
    "attack": AttackConfig, "selector": SelectorSection, "data": DataConfig,
}


class ConfigError(ValueError):
    def __init__(self, errors: List[str]):
        super().__init__("; ".join(errors))
        self.errors = errors


def _section(cls, raw: Dict[str, Any], name: str, errors: List[str]):
    known = {f.name for f in fields(cls)}
    unknown = set(raw) - known
    if unknown:
        errors.append(f"{name}: unknown keys {sorted(unknown)}")
    kwargs = {k: v for k, v in raw.items() if k in known}
    for k in ("lr_range", "device_cpu_hz"):
        if k in kwargs and kwargs[k] is not None:
            kwargs[k] = tuple(kwargs[k])
    return cls(**kwargs)


def from_dict(raw: Dict[str, Any]) -> ExperimentConfig:
    errors: List[str] = []
    unknown = set(raw) - set(_SECTIONS) - {"seed", "episodes", "repetitions"}
    if unknown:
        errors.append(f"unknown top-level keys {sorted(unknown)}")
    parts = {name: _section(cls, raw.get(name, {}), name, errors) for name, cls in _SECTIONS.items()}
    if errors:
        raise ConfigError(errors)
    cfg = ExperimentConfig(**parts, seed=int(raw.get("seed", 0)), episodes=int(raw.get("episodes", 200)),
                           repetitions=int(raw.get("repetitions", 5)))
    return cfg


def load_config(path) -> ExperimentConfig:
    with open(path) as fh:
        return from_dict(json.load(fh))


def validate(cfg: ExperimentConfig) -> List[str]:
    """Every problem with ``cfg``, so nothing runs on a partially valid config."""
    errors: List[str] = []
    net, fl, data, sel = cfg.network, cfg.fl, cfg.data, cfg.selector
    if net.cells_per_side < 1 or net.cell_width <= 0:
        errors.append("network: grid needs >= 1 cell of positive width")
    if not net.stations:
        errors.append("network: at least one base station required")
    ids = [s.get("id") for s in net.stations]
    if len(set(ids)) != len(ids):
        errors.append("network: duplicate base-station ids")
    for s in net.stations:
        for key in ("id", "position", "bandwidth_hz", "coverage_radius", "tx_power_dbm", "cpu_hz"):
            if key not in s:
                errors.append(f"network: station {s.get('id')} missing {key}")
        if s.get("bandwidth_hz", 1) <= 0 or s.get("coverage_radius", 1) <= 0 or s.get("cpu_hz", 1) <= 0:
            errors.append(f"network: station {s.get('id')} needs positive bandwidth, radius and cpu")
    if net.path_loss_coeff <= 0 or net.path_loss_exp <= 0:
        errors.append("network: path loss coefficient and exponent must be positive")
    if net.n_devices < 1:
        errors.append("network: n_devices must be >= 1")
    lo, hi = net.device_cpu_hz
    if not 0 < lo <= hi:
        errors.append("network: device_cpu_hz must be a positive (low, high) range")
    if net.dt < 0 or net.mean_speed_mps < 0:
        errors.append("network: dt and speed must be >= 0")
    if net.cloud_rate_bps <= 0 or net.bytes_per_param <= 0:
        errors.append("network: cloud rate and bytes per parameter must be positive")

    spec_ids = [s.get("model_id") for s in cfg.models.specs]
    if len(set(spec_ids)) != len(spec_ids):
        errors.append("models: duplicate model ids")
    if cfg.models.master not in spec_ids:
        errors.append(f"models: master {cfg.models.master!r} is not a declared spec")
    for j in cfg.slave_ids:
        if j not in spec_ids:
            errors.append(f"models: slave {j!r} is not a declared spec")
    if not cfg.slave_ids:
        errors.append("models: at least one slave model required")
    for s in cfg.models.specs:
        if s.get("input_dim") != data.n_features and data.source == "synthetic":
            errors.append(f"models: {s.get('model_id')} input_dim {s.get('input_dim')} != data.n_features")
        if s.get("cell", "gru") != "gru":
            errors.append(f"models: {s.get('model_id')} must be a recurrent (gru) model")
        if s.get("hidden_dim", 1) < 1:
            errors.append(f"models: {s.get('model_id')} hidden_dim must be >= 1")

    if fl.epochs < 1 or fl.local_iters < 1 or fl.kt_passes < 1:
        errors.append("fl: epochs, local_iters and kt_passes must be >= 1")
    if fl.lr <= 0 or fl.lr_decay <= 0:
        errors.append("fl: lr and lr_decay must be positive")
    if not 0 <= fl.t_max <= 1:
        errors.append("fl: t_max must lie in [0, 1]")
    if fl.alpha < 0 or (fl.beta is not None and fl.beta < 0):
        errors.append("fl: alpha and beta must be >= 0")
    if not fl.knowledge_transfer and cfg.models.master not in cfg.slave_ids:
        errors.append("fl: without knowledge transfer the master must be one of the slaves")

    t = cfg.timing
    if min(t.cloud_cpu_hz, t.train_cycles_per_param, t.label_cycles_per_param,
           t.distill_cycles_per_param, t.aggregate_cycles, t.inference_cycles) <= 0:
        errors.append("timing: all cycle counts and frequencies must be positive")

    errors += cfg.attack.validate(net.n_devices)

    if sel.kind not in ("drl", "random", "static"):
        errors.append(f"selector: unknown kind {sel.kind!r}")
    if sel.kind == "static":
        j = sel.static_model or cfg.models.master
        if j not in cfg.slave_ids:
            errors.append(f"selector: static model {j!r} is not a slave")
        elif j == cfg.models.master and fl.t_max < 1:
            errors.append("selector: static master assignment requires t_max = 1")
    if not 0 <= sel.eps_end <= sel.eps_start <= 1:
        errors.append("selector: need 0 <= eps_end <= eps_start <= 1")
    if not 0 <= sel.gamma < 1:
        errors.append("selector: gamma must lie in [0, 1)")
    if sel.hidden_dim < 0 or sel.lr < 0:
        errors.append("selector: hidden_dim and lr must be >= 0")
    if len(cfg.slave_ids) == 1 and cfg.slave_ids[0] == cfg.models.master:
        if int(np.floor(net.n_devices * fl.t_max + 1e-9)) < net.n_devices:
            errors.append("fl: single-model FL on the master needs t_max = 1")

    if data.source not in ("synthetic", "csv"):
        errors.append(f"data: unknown source {data.source!r}")
    if data.source == "csv" and (not data.csv_path or not data.schema_path):
        errors.append("data: csv source needs csv_path and schema_path")
    if data.n_features < 2 and data.source == "synthetic":
        errors.append("data: n_features must be >= 2")
    if data.flows_per_device < 1 or data.test_flows < 1 or data.edge_flows < 0:
        errors.append("data: flows_per_device and test_flows must be >= 1, edge_flows >= 0")
    if data.edge_flows > data.flows_per_device * net.n_devices:
        errors.append("data: edge_flows exceeds the training pool")
    if cfg.episodes < 1 or cfg.repetitions < 1:
        errors.append("episodes and repetitions must be >= 1")
    if cfg.seed < 0:
        errors.append("seed must be >= 0")
    return errors
