"""Closed-form epoch timing.

Parameter sizes are counted in parameters; every rate handed to these
functions is already expressed in parameters per second (see
``params_per_second``).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Sequence

import numpy as np


@dataclass(frozen=True)
class ComputeProfile:
    device_hz: Sequence[float]          # f_u per device
    bs_hz: Sequence[float]              # f_m per base station
    cloud_hz: float                     # f_c
    label_cycles: Mapping[str, float]   # f_ds_j per slave model id
    distill_cycles: float               # f_ds_c, per unit of edge data
    aggregate_cycles: float             # f_w, per parameter
    train_cycles_per_param: float       # c0: f_s = c0 * param_count(selected model)
    inference_cycles: float             # f_inf

    def __post_init__(self):
        values = list(self.device_hz) + list(self.bs_hz) + list(self.label_cycles.values())
        values += [self.cloud_hz, self.distill_cycles, self.aggregate_cycles,
                   self.train_cycles_per_param, self.inference_cycles]
        if any(v <= 0 for v in values):
            raise ValueError("compute profile values must be strictly positive")

    def train_cycles(self, n_params: int) -> float:
        return self.train_cycles_per_param * n_params


@dataclass
class EpochTiming:
    t_knw: List[float] = field(default_factory=list)     # per BS
    t_ag_bs: List[float] = field(default_factory=list)   # per BS
    t_ag: float = 0.0
    t_down: Dict[int, float] = field(default_factory=dict)
    t_loc: Dict[int, float] = field(default_factory=dict)
    t_int: Dict[int, float] = field(default_factory=dict)


def params_per_second(rate_bps: float, bytes_per_param: float = 4.0) -> float:
    return rate_bps / (8.0 * bytes_per_param)


def t_knowledge(edge_size: int, slave_ids: Sequence[str], profile: ComputeProfile, bs: int) -> float:
    if edge_size < 0:
        raise ValueError("edge set size must be >= 0")
    f_m = profile.bs_hz[bs]
    return sum(edge_size * profile.label_cycles[j] / f_m + edge_size * profile.distill_cycles / f_m
               for j in slave_ids)


def t_partial_agg(upload_sizes: Sequence[float], upload_rates: Sequence[float],
                  accepted_per_model: Mapping[str, int], model_sizes: Mapping[str, int],
                  profile: ComputeProfile, bs: int) -> float:
    """Slowest upload into the BS plus the aggregation compute for every slave group.

    ``upload_sizes``/``upload_rates`` are the planned sizes |W_u| and uplink
    rates of the devices that uploaded; ``accepted_per_model`` is X_s^j.
    """
    uplink = 0.0
    for size, rate in zip(upload_sizes, upload_rates):
        if rate <= 0:
            raise ValueError("upload from a device with zero rate; exclude uncovered devices first")
        uplink = max(uplink, size / rate)
    f_m = profile.bs_hz[bs]
    compute = sum(count * model_sizes[j] * profile.aggregate_cycles / f_m
                  for j, count in accepted_per_model.items())
    return uplink + compute


def t_global_agg(t_ag_bs: Sequence[float], t_knw_bs: Sequence[float], master_size: int,
                 cloud_rate: float, profile: ComputeProfile, n_bs: int) -> float:
    if n_bs < 1:
        raise ValueError("need at least one base station")
    slowest = max((a + k + master_size / cloud_rate for a, k in zip(t_ag_bs, t_knw_bs)), default=0.0)
    return slowest + n_bs * master_size * profile.aggregate_cycles / profile.cloud_hz


def t_downlink(master_size: int, planned_size: int, cloud_rate: float, bs_to_device_rate: float) -> float:
    if bs_to_device_rate <= 0:
        raise ValueError("device is out of coverage")
    return master_size / cloud_rate + planned_size / bs_to_device_rate


def t_local(data_size: int, planned_params: int, profile: ComputeProfile, u: int) -> float:
    return data_size * profile.train_cycles(planned_params) / profile.device_hz[u]


def t_recognition(t_loc: Mapping[int, float], t_ag: float, t_down: Mapping[int, float],
                  profile: ComputeProfile, local_iters: int, barrier: bool = True) -> Dict[int, float]:
    """Per-device recognition time.

    With ``barrier`` the local-training term is the slowest participant's
    K * T_loc, shared by everybody; otherwise each device pays its own.
    """
    if local_iters < 1:
        raise ValueError("K must be >= 1")
    slowest = max(t_loc.values(), default=0.0)
    out = {}
    for u, down in t_down.items():
        train = slowest if barrier else t_loc[u]
        out[u] = local_iters * train + t_ag + down + profile.inference_cycles / profile.device_hz[u]
    return out


def mean_time(t_int: Mapping[int, float]) -> float:
    return float(np.mean(list(t_int.values()))) if t_int else 0.0
