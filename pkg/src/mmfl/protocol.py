"""Multi-model federated learning epoch.

One epoch runs: local training, adversary injection, structural mitigation,
per-BS partial aggregation per slave model, knowledge transfer into each BS
master, cloud averaging of the masters, and broadcast back to devices.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import timing as tm
from .data import FlowSet, evaluate_accuracy
from .network import (BaseStation, ChannelParams, DevicePose, GridMap, NetworkSnapshot, snapshot,
                      step_mobility)
from .nn import (LabeledBatch, ModelSpec, ModelWeights, forward_steps, loss, param_count,
                 train_local)

STRUCTURE_MISMATCH = "structure mismatch"
UNPLANNED_DEVICE = "unplanned device"


class ProtocolError(RuntimeError):
    pass


def master_quota(n_devices: int, t_max: float) -> int:
    # guard against 0.57 * 100 = 56.99999999999999
    return int(math.floor(n_devices * t_max + 1e-9))


@dataclass
class AssignmentPlan:
    """Device -> model assignment for one epoch, stored one-hot as (l, N)."""

    epoch: int
    model_ids: Tuple[str, ...]
    master_id: str
    x: np.ndarray

    @classmethod
    def from_indices(cls, epoch: int, model_ids: Sequence[str], master_id: str,
                     indices: Sequence[int]) -> "AssignmentPlan":
        x = np.zeros((len(model_ids), len(indices)), dtype=int)
        x[np.asarray(indices, dtype=int), np.arange(len(indices))] = 1
        return cls(epoch, tuple(model_ids), master_id, x)

    @property
    def n_devices(self) -> int:
        return self.x.shape[1]

    @property
    def indices(self) -> List[int]:
        if not np.all(self.x.sum(axis=0) == 1):
            raise ProtocolError("plan is not one-hot")
        return [int(i) for i in np.argmax(self.x, axis=0)]

    def model_of(self, u: int) -> str:
        return self.model_ids[self.indices[u]]

    @property
    def master_index(self) -> Optional[int]:
        return self.model_ids.index(self.master_id) if self.master_id in self.model_ids else None

    def master_count(self) -> int:
        mi = self.master_index
        return 0 if mi is None else int(self.x[mi].sum())

    def key(self) -> Tuple[int, ...]:
        return tuple(self.indices)


def validate_plan(plan: AssignmentPlan, n_devices: int, t_max: float) -> List[str]:
    """Named violations of the one-model-per-device and master-quota rules; empty if ok."""
    violations = []
    if plan.n_devices != n_devices:
        violations.append(f"coverage: plan covers {plan.n_devices} devices, expected {n_devices}")
    for u, k in enumerate(plan.x.sum(axis=0)):
        if k != 1:
            violations.append(f"one-model: device {u} has {int(k)} models assigned")
    quota = master_quota(n_devices, t_max)
    if plan.master_count() > quota:
        violations.append(f"master-quota: {plan.master_count()} master assignments exceed {quota}")
    return violations


@dataclass(frozen=True)
class Upload:
    device_id: int
    weights: ModelWeights
    batch_size: int
    crafted: bool = False   # ground truth for audits only; mitigation never reads it


@dataclass
class EdgeState:
    bs_id: int
    slaves: Dict[str, ModelWeights]
    master: ModelWeights
    edge_data: np.ndarray


@dataclass
class MitigationReport:
    epoch: int
    excluded: List[Tuple[int, str]] = field(default_factory=list)
    included: Dict[str, int] = field(default_factory=dict)

    def merge(self, other: "MitigationReport") -> "MitigationReport":
        included = dict(self.included)
        for k, v in other.included.items():
            included[k] = included.get(k, 0) + v
        return MitigationReport(self.epoch, self.excluded + other.excluded, included)


def mitigate(uploads: Sequence[Upload], plan: AssignmentPlan, specs: Dict[str, ModelSpec],
             signature_check: bool = False) -> Tuple[List[Upload], MitigationReport]:
    """Drop uploads whose parameter count differs from the device's planned model."""
    report = MitigationReport(plan.epoch)
    accepted = []
    for up in uploads:
        if not 0 <= up.device_id < plan.n_devices or plan.x[:, up.device_id].sum() != 1:
            report.excluded.append((up.device_id, UNPLANNED_DEVICE))
            continue
        planned = specs[plan.model_of(up.device_id)]
        ok = len(up.weights) == param_count(planned)
        if ok and signature_check:
            ok = up.weights.spec.same_structure(planned)
        if not ok:
            report.excluded.append((up.device_id, STRUCTURE_MISMATCH))
            continue
        accepted.append(up)
        report.included[planned.model_id] = report.included.get(planned.model_id, 0) + 1
    return accepted, report


def aggregation_weights(batch_sizes: Sequence[int]) -> np.ndarray:
    sizes = np.asarray(batch_sizes, dtype=np.float64)
    total = sizes.sum()
    if total <= 0:
        return np.full(len(sizes), 1.0 / len(sizes))
    return sizes / total


def partial_aggregate(uploads: Sequence[Upload], previous: Optional[ModelWeights] = None) -> ModelWeights:
    """Data-size weighted mean of the uploads; ``previous`` is carried forward when there are none."""
    if not uploads:
        if previous is None:
            raise ProtocolError("no uploads and no previous weights to carry forward")
        return previous
    spec = previous.spec if previous is not None else uploads[0].weights.spec
    if any(len(u.weights) != param_count(spec) for u in uploads):
        raise ProtocolError("uploads in one slave group differ in parameter count")
    omega = aggregation_weights([u.batch_size for u in uploads])
    stacked = np.stack([u.weights.params for u in uploads])
    return ModelWeights(spec, omega @ stacked)


def label_with(slave: ModelWeights, edge_data: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    return (forward_steps(slave, edge_data) > threshold).astype(int)


def knowledge_transfer(master: ModelWeights, slaves: Sequence[ModelWeights], edge_data: np.ndarray,
                       lr: float, passes: int = 1) -> ModelWeights:
    """Label the edge set with each slave in turn and fit the master to those labels."""
    if edge_data is None or len(edge_data) == 0:
        return master
    for slave in slaves:
        batch = LabeledBatch(edge_data, label_with(slave, edge_data))
        master = train_local(master, batch, lr, passes)
    return master


def cloud_aggregate(masters: Sequence[ModelWeights]) -> ModelWeights:
    if not masters:
        raise ProtocolError("no masters to aggregate")
    spec = masters[0].spec
    if any(not m.spec.same_structure(spec) for m in masters):
        raise ProtocolError("BS masters differ in structure")
    return ModelWeights(spec, np.mean(np.stack([m.params for m in masters]), axis=0))


def broadcast(plan: AssignmentPlan, edge_states: Sequence[EdgeState], global_master: ModelWeights,
              association: Sequence[Optional[int]]) -> Dict[int, ModelWeights]:
    """Per covered device: the BS's copy of its planned model, or the new global master."""
    out = {}
    for u in range(plan.n_devices):
        m = association[u]
        if m is None:
            continue
        j = plan.model_of(u)
        out[u] = global_master if j == plan.master_id else edge_states[m].slaves[j]
    return out


# -------------------------------------------------------------- the world ---

@dataclass
class ModelCatalog:
    specs: Dict[str, ModelSpec]
    slave_ids: Tuple[str, ...]
    master_id: str

    @property
    def master_spec(self) -> ModelSpec:
        return self.specs[self.master_id]

    @property
    def single_model(self) -> bool:
        return self.slave_ids == (self.master_id,)

    def sizes(self) -> Dict[str, int]:
        return {k: param_count(s) for k, s in self.specs.items()}


@dataclass(frozen=True)
class FLSettings:
    local_iters: int = 5
    lr: float = 0.07
    lr_decay: float = 1.0
    kt_passes: int = 1
    kt_lr: Optional[float] = None
    knowledge_transfer: bool = True
    barrier: bool = True
    signature_check: bool = False
    cloud_rate_bps: float = 100e6
    bytes_per_param: float = 4.0
    dt: float = 1.0


@dataclass
class Device:
    index: int
    data: FlowSet
    models: Dict[str, ModelWeights] = field(default_factory=dict)

    def __post_init__(self):
        self.batch = LabeledBatch(self.data.features, self.data.packet_labels)

    @property
    def data_size(self) -> int:
        return len(self.data)


@dataclass
class EpochMetrics:
    epoch: int
    loss: float
    accuracy: float
    plan: Tuple[int, ...]
    participants: List[int]
    device_loss: Dict[int, float]
    t_int: Dict[int, float]
    timing: tm.EpochTiming
    report: MitigationReport
    crafted_total: int = 0
    crafted_accepted: int = 0
    benign_excluded: int = 0
    reward: Optional[float] = None

    @property
    def mean_t_int(self) -> float:
        return tm.mean_time(self.t_int)

    @property
    def max_t_int(self) -> float:
        return max(self.t_int.values(), default=0.0)

    @property
    def excluded_count(self) -> int:
        return len(self.report.excluded)


@dataclass
class World:
    catalog: ModelCatalog
    settings: FLSettings
    grid: GridMap
    stations: List[BaseStation]
    channel: ChannelParams
    profile: tm.ComputeProfile
    poses: List[DevicePose]
    devices: List[Device]
    edges: List[EdgeState]
    global_master: ModelWeights
    test: FlowSet
    mobility_rng: np.random.Generator
    epoch: int = 0
    net: Optional[NetworkSnapshot] = None

    def __post_init__(self):
        if self.net is None:
            self.net = snapshot(self.poses, self.stations, self.channel, self.epoch)

    @property
    def n_devices(self) -> int:
        return len(self.devices)

    def start_weights(self, u: int, model_id: str) -> ModelWeights:
        if model_id == self.catalog.master_id:
            return self.global_master
        return self.edges[self.net.association[u]].slaves[model_id]


UploadHook = Callable[[List[Upload], ModelWeights], List[Upload]]


def _kt_slaves(world: World, edge: EdgeState, fresh: Dict[str, bool]) -> List[str]:
    # slaves refreshed by accepted uploads this epoch; the master slot already seeds the master
    return [j for j in world.catalog.slave_ids if fresh.get(j) and j != world.catalog.master_id]


def run_epoch(world: World, plan: AssignmentPlan, adversary: Optional[UploadHook] = None,
              upload_observer: Optional[Callable[[List[Upload]], None]] = None) -> Tuple[World, EpochMetrics]:
    """Advance ``world`` by one epoch in place and return it with the epoch's metrics."""
    cat, st = world.catalog, world.settings
    if plan.model_ids != cat.slave_ids or plan.master_id != cat.master_id:
        raise ProtocolError("plan does not match the model catalog")
    if plan.x.shape[1] != world.n_devices or not np.all(plan.x.sum(axis=0) == 1):
        raise ProtocolError("plan must assign exactly one model to every device")
    net = world.net
    assoc = net.association
    participants = [u for u in range(world.n_devices) if assoc[u] is not None]
    lr = st.lr * st.lr_decay ** world.epoch

    # 1. local training on the planned model, starting from the BS's current copy
    uploads = []
    for u in participants:
        j = plan.model_of(u)
        dev = world.devices[u]
        trained = train_local(world.start_weights(u, j), dev.batch, lr, st.local_iters)
        uploads.append(Upload(u, trained, dev.data_size))
    if upload_observer is not None:
        upload_observer(list(uploads))
    # 2. adversary swaps compromised devices' uploads
    if adversary is not None:
        uploads = adversary(uploads, world.global_master)
    crafted_total = sum(up.crafted for up in uploads)

    # 3-4. per-BS mitigation, partial aggregation and knowledge transfer
    sizes = cat.sizes()
    report = MitigationReport(plan.epoch)
    accepted_all: List[Upload] = []
    t_ag_bs, t_knw_bs = [], []
    kt_lr = st.kt_lr if st.kt_lr is not None else lr
    for m, edge in enumerate(world.edges):
        local = [up for up in uploads if assoc[up.device_id] == m]
        accepted, rep = mitigate(local, plan, cat.specs, st.signature_check)
        report = report.merge(rep)
        accepted_all += accepted
        fresh = {}
        for j in cat.slave_ids:
            group = [up for up in accepted if plan.model_of(up.device_id) == j]
            fresh[j] = bool(group)
            edge.slaves[j] = partial_aggregate(group, edge.slaves[j])
        edge.master = edge.slaves[cat.master_id] if cat.master_id in edge.slaves else world.global_master
        kt_ids: List[str] = []
        if st.knowledge_transfer:
            kt_ids = _kt_slaves(world, edge, fresh)
            edge.master = knowledge_transfer(edge.master, [edge.slaves[j] for j in kt_ids],
                                             edge.edge_data, kt_lr, st.kt_passes)
        rates = [tm.params_per_second(net.rate_matrix[up.device_id, m], st.bytes_per_param) for up in local]
        planned = [sizes[plan.model_of(up.device_id)] for up in local]
        t_ag_bs.append(tm.t_partial_agg(planned, rates, rep.included, sizes, world.profile, m))
        t_knw_bs.append(tm.t_knowledge(len(edge.edge_data), kt_ids, world.profile, m))

    # 5-6. cloud aggregation; BS masters and master-slot slaves pick up the result
    world.global_master = cloud_aggregate([e.master for e in world.edges])
    for edge in world.edges:
        edge.master = world.global_master
        if cat.master_id in edge.slaves:
            edge.slaves[cat.master_id] = world.global_master

    # 7. broadcast
    for u, w in broadcast(plan, world.edges, world.global_master, assoc).items():
        world.devices[u].models[plan.model_of(u)] = w

    timing = _epoch_timing(world, plan, participants, t_ag_bs, t_knw_bs, sizes)
    metrics = EpochMetrics(
        epoch=plan.epoch,
        loss=float(np.mean([loss(world.global_master, d.batch) for d in world.devices])),
        accuracy=evaluate_accuracy(world.global_master, world.test),
        plan=tuple(plan.indices),
        participants=participants,
        device_loss={u: loss(world.devices[u].models[plan.model_of(u)], world.devices[u].batch)
                     for u in participants},
        t_int=timing.t_int,
        timing=timing,
        report=report,
        crafted_total=crafted_total,
        crafted_accepted=sum(up.crafted for up in accepted_all),
        benign_excluded=sum(1 for u, _ in report.excluded
                            if not any(up.crafted for up in uploads if up.device_id == u)),
    )

    world.poses = step_mobility(world.poses, world.grid, world.mobility_rng, st.dt)
    world.epoch += 1
    world.net = snapshot(world.poses, world.stations, world.channel, world.epoch)
    return world, metrics


def _epoch_timing(world: World, plan: AssignmentPlan, participants: Sequence[int],
                  t_ag_bs: List[float], t_knw_bs: List[float], sizes: Dict[str, int]) -> tm.EpochTiming:
    st, net, prof = world.settings, world.net, world.profile
    cloud_rate = tm.params_per_second(st.cloud_rate_bps, st.bytes_per_param)
    master_size = sizes[world.catalog.master_id]
    t_ag = tm.t_global_agg(t_ag_bs, t_knw_bs, master_size, cloud_rate, prof, len(world.edges))
    t_down, t_loc = {}, {}
    for u in participants:
        planned = sizes[plan.model_of(u)]
        t_down[u] = tm.t_downlink(master_size, planned, cloud_rate,
                                  tm.params_per_second(net.downlink_rate(u), st.bytes_per_param))
        t_loc[u] = tm.t_local(world.devices[u].data_size, planned, prof, u)
    t_int = tm.t_recognition(t_loc, t_ag, t_down, prof, st.local_iters, st.barrier)
    return tm.EpochTiming(t_knw=t_knw_bs, t_ag_bs=t_ag_bs, t_ag=t_ag, t_down=t_down, t_loc=t_loc, t_int=t_int)
