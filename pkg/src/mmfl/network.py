"""Manhattan-grid vehicle mobility, base-station association and link rates."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from typing import Dict, List, Optional, Sequence

import numpy as np

HEADINGS = {"N": (0, 1), "S": (0, -1), "E": (1, 0), "W": (-1, 0)}
_LEFT = {"N": "W", "W": "S", "S": "E", "E": "N"}
_RIGHT = {v: k for k, v in _LEFT.items()}
TURN_PROBS = (("straight", 0.5), ("right", 0.25), ("left", 0.25))

ON_ROAD_TOL = 1e-9
MIN_DISTANCE = 1.0


@dataclass(frozen=True)
class GridMap:
    cells_per_side: int = 4
    cell_width: float = 100.0

    @property
    def size(self) -> float:
        return self.cells_per_side * self.cell_width

    def on_road(self, x: float, y: float, tol: float = ON_ROAD_TOL) -> bool:
        if not (-tol <= x <= self.size + tol and -tol <= y <= self.size + tol):
            return False
        return _near_line(x, self.cell_width, tol) or _near_line(y, self.cell_width, tol)


def _near_line(v: float, width: float, tol: float) -> bool:
    return abs(v - round(v / width) * width) <= tol


@dataclass(frozen=True)
class DevicePose:
    x: float
    y: float
    heading: str
    speed: float

    @property
    def position(self):
        return (self.x, self.y)


@dataclass(frozen=True)
class BaseStation:
    id: int
    position: tuple
    bandwidth_hz: float
    coverage_radius: float
    tx_power_dbm: float
    cpu_hz: float

    def __post_init__(self):
        if self.bandwidth_hz <= 0 or self.coverage_radius <= 0:
            raise ValueError("bandwidth and coverage radius must be positive")


@dataclass(frozen=True)
class ChannelParams:
    path_loss_coeff: float = 1e-3
    path_loss_exp: float = 5.0
    noise_dbm: float = -174.0
    device_tx_power_dbm: float = 23.0

    def __post_init__(self):
        if self.path_loss_coeff <= 0 or self.path_loss_exp <= 0:
            raise ValueError("path loss coefficient and exponent must be positive")


@dataclass
class NetworkSnapshot:
    epoch: int
    distances: np.ndarray       # (N, M) metres
    rate_matrix: np.ndarray     # (N, M) uplink bits/s, 0 outside coverage
    downlink: np.ndarray        # (N, M) BS -> device bits/s
    association: List[Optional[int]]  # BS index per device, None if uncovered

    @property
    def n_devices(self):
        return self.rate_matrix.shape[0]

    def uplink_rate(self, u: int) -> float:
        m = self.association[u]
        return 0.0 if m is None else float(self.rate_matrix[u, m])

    def downlink_rate(self, u: int) -> float:
        m = self.association[u]
        return 0.0 if m is None else float(self.downlink[u, m])

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "device", "bs", "distance", "rate"])
            for u in range(self.n_devices):
                for m in range(self.rate_matrix.shape[1]):
                    w.writerow([self.epoch, u, m, repr(float(self.distances[u, m])),
                                repr(float(self.rate_matrix[u, m]))])


# ------------------------------------------------------------- mobility ---

def _legal(grid: GridMap, x: float, y: float, heading: str) -> bool:
    dx, dy = HEADINGS[heading]
    nx, ny = x + dx * grid.cell_width, y + dy * grid.cell_width
    return -ON_ROAD_TOL <= nx <= grid.size + ON_ROAD_TOL and -ON_ROAD_TOL <= ny <= grid.size + ON_ROAD_TOL


def turn_at_junction(heading: str, x: float, y: float, grid: GridMap, rng: np.random.Generator) -> str:
    """Pick the outgoing heading at a junction.

    Straight 0.5, right 0.25, left 0.25; headings that would leave the grid
    are dropped and the rest renormalised. Reversing is only used when nothing
    else is legal, which cannot happen on a grid with at least one cell.
    """
    options = {"straight": heading, "right": _RIGHT[heading], "left": _LEFT[heading]}
    names, probs = [], []
    for name, p in TURN_PROBS:
        if _legal(grid, x, y, options[name]):
            names.append(name)
            probs.append(p)
    if not names:
        return _LEFT[_LEFT[heading]]
    probs = np.array(probs) / sum(probs)
    return options[names[int(rng.choice(len(names), p=probs))]]


def _advance(pose: DevicePose, grid: GridMap, dt: float, rng: np.random.Generator) -> DevicePose:
    x, y, heading = pose.x, pose.y, pose.heading
    remaining = pose.speed * dt
    w = grid.cell_width
    while remaining > 0:
        dx, dy = HEADINGS[heading]
        coord = x if dx else y
        step = dx or dy
        # distance to the next junction along the heading
        if step > 0:
            target = math.floor(coord / w + ON_ROAD_TOL) * w + w
        else:
            target = math.ceil(coord / w - ON_ROAD_TOL) * w - w
        gap = abs(target - coord)
        if remaining < gap:
            coord += step * remaining
            remaining = 0.0
        else:
            coord = float(target)
            remaining -= gap
        if dx:
            x = coord
        else:
            y = coord
        if coord == target:
            heading = turn_at_junction(heading, x, y, grid, rng)
    return replace(pose, x=x, y=y, heading=heading)


def step_mobility(poses: Sequence[DevicePose], grid: GridMap, rng: np.random.Generator,
                  dt: float) -> List[DevicePose]:
    if dt == 0:
        return list(poses)
    return [_advance(p, grid, dt, rng) for p in poses]


def random_poses(n: int, grid: GridMap, rng: np.random.Generator, mean_speed: float,
                 speed_spread: float = 0.2) -> List[DevicePose]:
    """Vehicles placed uniformly on road segments, heading along their road."""
    poses = []
    w, k = grid.cell_width, grid.cells_per_side
    for _ in range(n):
        horizontal = rng.random() < 0.5
        line = int(rng.integers(0, k + 1)) * w
        along = float(rng.uniform(0, grid.size))
        if horizontal:
            x, y = along, float(line)
            heading = "E" if rng.random() < 0.5 else "W"
        else:
            x, y = float(line), along
            heading = "N" if rng.random() < 0.5 else "S"
        if not _legal_direction(grid, x, y, heading):
            heading = {"E": "W", "W": "E", "N": "S", "S": "N"}[heading]
        speed = float(mean_speed * rng.uniform(1 - speed_spread, 1 + speed_spread))
        poses.append(DevicePose(x, y, heading, speed))
    return poses


def _legal_direction(grid: GridMap, x: float, y: float, heading: str) -> bool:
    dx, dy = HEADINGS[heading]
    if dx:
        return (x < grid.size) if dx > 0 else (x > 0)
    return (y < grid.size) if dy > 0 else (y > 0)


# -------------------------------------------------------------- channel ---

def db_to_linear(x: float) -> float:
    return 10.0 ** (x / 10.0)


def channel_gain(d: float, params: ChannelParams) -> float:
    d = max(float(d), MIN_DISTANCE)
    return params.path_loss_coeff * d ** (-params.path_loss_exp)


def tx_rate(bandwidth_hz: float, tx_power_mw: float, gain: float, noise_mw: float) -> float:
    """Link rate B ln(1 + P g / eta); natural log, no interference term."""
    if bandwidth_hz <= 0 or noise_mw <= 0:
        raise ValueError("bandwidth and noise power must be positive")
    return bandwidth_hz * math.log1p(tx_power_mw * gain / noise_mw)


def snapshot(poses: Sequence[DevicePose], stations: Sequence[BaseStation], params: ChannelParams,
             epoch: int) -> NetworkSnapshot:
    n, m = len(poses), len(stations)
    dist = np.zeros((n, m))
    up = np.zeros((n, m))
    down = np.zeros((n, m))
    noise = db_to_linear(params.noise_dbm)
    p_dev = db_to_linear(params.device_tx_power_dbm)
    assoc: List[Optional[int]] = []
    for u, pose in enumerate(poses):
        best = None
        for i, bs in enumerate(stations):
            d = math.hypot(pose.x - bs.position[0], pose.y - bs.position[1])
            dist[u, i] = d
            if d > bs.coverage_radius:
                continue
            g = channel_gain(d, params)
            up[u, i] = tx_rate(bs.bandwidth_hz, p_dev, g, noise)
            down[u, i] = tx_rate(bs.bandwidth_hz, db_to_linear(bs.tx_power_dbm), g, noise)
            # ties within 1e-9 m go to the lower BS id (stations iterate in id order)
            if best is None or d < dist[u, best] - 1e-9:
                best = i
        assoc.append(best)
    return NetworkSnapshot(epoch, dist, up, down, assoc)


def stations_from_config(entries: Sequence[Dict]) -> List[BaseStation]:
    out = [BaseStation(id=e["id"], position=tuple(e["position"]), bandwidth_hz=e["bandwidth_hz"],
                       coverage_radius=e["coverage_radius"], tx_power_dbm=e["tx_power_dbm"],
                       cpu_hz=e["cpu_hz"]) for e in entries]
    return sorted(out, key=lambda b: b.id)


def load_trace(path) -> Dict[int, Dict[int, tuple]]:
    """Pre-computed (epoch, device, x, y) CSV trace, keyed epoch -> device -> (x, y)."""
    trace: Dict[int, Dict[int, tuple]] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            trace.setdefault(int(row["epoch"]), {})[int(row["device"])] = (float(row["x"]), float(row["y"]))
    return trace
