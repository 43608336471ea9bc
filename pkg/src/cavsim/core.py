"""Domain types, units, validation and config (de)serialization.

Everything here is a plain value object: constructors and validators only,
no simulation behavior. All in-memory quantities are SI (m, s, m/s, m/s^2);
unit conversion happens at the TOML boundary.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Optional, Sequence, Union

import tomli

KMH_TO_MS = 1.0 / 3.6


def kmh_to_ms(v: float) -> float:
    """km/h -> m/s."""
    return v / 3.6


def ms_to_kmh(v: float) -> float:
    """m/s -> km/h."""
    return v * 3.6


class VehicleClass(enum.IntEnum):
    HV = 0
    CAV = 1


class CaccMode(enum.IntEnum):
    """Longitudinal control mode. HUMAN iff the vehicle is an HV."""

    HUMAN = 0
    ACC = 1
    CACC = 2


class InteractionState(enum.IntEnum):
    """Car-following regime of an HV at one instant."""

    FREE = 0
    CLOSE_UP = 1
    FOLLOW = 2
    BRAKE_BX = 3
    BRAKE_AX = 4
    OTHER = 5


class Strategy(str, enum.Enum):
    BASE = "BASE"
    AD_HOC = "AD_HOC"
    LOCAL_COORD = "LOCAL_COORD"


class LanePolicy(str, enum.Enum):
    GENERAL = "GENERAL"
    CAV_PREFERRED = "CAV_PREFERRED"
    CLOSED = "CLOSED"


class JoinKind(str, enum.Enum):
    FRONT = "FRONT"
    MID = "MID"
    REAR = "REAR"
    IN_LANE_REAR = "IN_LANE_REAR"


@dataclass(frozen=True)
class VehicleState:
    """Kinematic + identity record for one agent at one instant.

    ``position`` is the front bumper location along the corridor; lane 0 is
    the rightmost lane.
    """

    id: int
    vclass: VehicleClass
    lane: int
    position: float
    speed: float
    accel: float
    length: float
    desired_speed: float
    platoon_id: Optional[int] = None
    cacc_mode: CaccMode = CaccMode.HUMAN

    def __post_init__(self):
        if self.speed < 0:
            raise ValueError(f"vehicle {self.id}: speed must be >= 0")
        if self.length <= 0:
            raise ValueError(f"vehicle {self.id}: length must be > 0")
        if self.platoon_id is not None and self.vclass != VehicleClass.CAV:
            raise ValueError(f"vehicle {self.id}: only CAVs join platoons")
        if (self.cacc_mode == CaccMode.HUMAN) != (self.vclass == VehicleClass.HV):
            raise ValueError(f"vehicle {self.id}: HUMAN mode iff class HV")


@dataclass(frozen=True)
class CaccParams:
    """CACC/ACC longitudinal-control and clustering parameter bundle.

    Speeds are stored in m/s; ``v_des_range`` is the draw interval for a
    CAV's desired speed.
    """

    t_cacc: float = 0.6          # intra-platoon time gap [s]
    t_acc: float = 0.9           # degraded (ACC) time gap [s]
    s0: float = 1.0              # minimal distance [m]
    a_max: float = 2.0           # maximum acceleration [m/s^2]
    b_des: float = 2.0           # desired deceleration [m/s^2]
    coolness: float = 0.99
    delta: float = 4.0
    v_des_range: tuple[float, float] = (96.0 * KMH_TO_MS, 105.0 * KMH_TO_MS)
    phi_max: int = 5             # max platoon size
    d_front: float = 20.0        # clustering detection range ahead [m]
    d_rear: float = 20.0         # clustering detection range behind [m]
    comm_range: float = 120.0    # V2V range gating CACC engagement [m]
    max_decel: float = -8.5      # vehicle capability clamp [m/s^2]


@dataclass(frozen=True)
class HvParams:
    """Wiedemann-99 style human-driver parameters (cc0..cc9) plus the
    physical deceleration cap."""

    cc0: float = 1.5      # standstill distance [m]
    cc1: float = 0.9      # following time headway [s]
    cc2: float = 3.5      # longitudinal oscillation [m]
    cc3: float = -8.0     # perception threshold onset [s]
    cc4: float = -0.35    # negative speed-difference sensitivity [m/s]
    cc5: float = 0.35     # positive speed-difference sensitivity [m/s]
    cc6: float = 11.44    # oscillation speed dependency [1/(m*s), 1e-4 scaled]
    cc7: float = 0.25     # oscillation acceleration [m/s^2]
    cc8: float = 3.5      # standstill acceleration [m/s^2]
    cc9: float = 1.5      # acceleration at 80 km/h [m/s^2]
    max_decel: float = -8.5


@dataclass(frozen=True)
class LaneChangeParams:
    """Incentive/safety knobs for the free (discretionary) lane change."""

    a_gain: float = 0.2           # required anticipated accel gain [m/s^2]
    keep_right_bias: float = 0.1  # gain bonus when moving right [m/s^2]
    b_safe: float = -3.0          # new follower's max tolerated decel [m/s^2]
    period_s: float = 0.5         # decision cadence
    # Platoon members abandon their platoon only for a much larger gain
    # (escaping a genuinely stuck platoon, not routine weaving).
    member_gain_factor: float = 3.0


@dataclass(frozen=True)
class CoordinationParams:
    """Local-coordination (platoon join) protocol knobs."""

    t_gap_make: float = 1.4        # gap maker's temporary time gap [s]
    join_timeout_s: float = 15.0   # plan deadline
    abort_cooldown_s: float = 10.0  # re-scan suppression after an abort
    scan_period_s: float = 0.5     # clustering decision cadence
    # Fraction of the equilibrium time-gap term accepted at commit; below
    # 1.0 the joiner squeezes in and the follower recovers afterwards
    # (bounded by the lane-change b_safe veto). Human partners yield
    # gradually and tolerate tight slots; automated partners react to gap
    # deficits quadratically, so they get a milder squeeze.
    gap_accept_factor: float = 0.6
    gap_accept_factor_cacc: float = 0.85


@dataclass(frozen=True)
class RoadNetwork:
    """Straight multi-lane corridor; lane 0 is the rightmost."""

    length: float
    lane_count: int
    lane_policies: tuple[LanePolicy, ...]
    speed_limit: float  # m/s

    def __post_init__(self):
        if len(self.lane_policies) != self.lane_count:
            raise ValueError("lane_policies must have lane_count entries")


@dataclass(frozen=True)
class Platoon:
    """Ordered CAV roster; members[0] is the platoon leader (frontmost)."""

    id: int
    members: tuple[int, ...]
    # (joiner id, join kind, gap maker id or None); locks the platoon while
    # a join is in flight.
    pending_join: Optional[tuple[int, JoinKind, Optional[int]]] = None


@dataclass(frozen=True)
class TrajectoryRecord:
    """One 0.5 s sampling row."""

    time: float
    vehicle_id: int
    vclass: VehicleClass
    lane: int
    position: float
    speed: float
    accel: float
    leader_id: Optional[int] = None
    leader_class: Optional[VehicleClass] = None
    net_gap: Optional[float] = None
    interaction_state: Optional[InteractionState] = None
    platoon_id: Optional[int] = None


@dataclass(frozen=True)
class ScenarioConfig:
    """Full experiment description for one run (one strategy/MPR/seed cell
    is derived from this plus a seed)."""

    network: RoadNetwork
    demand_vph: float
    mpr: float
    strategy: Strategy
    duration_s: float
    warmup_s: float
    seeds: tuple[int, ...]
    demand_scale: float = 1.3
    dt_s: float = 0.1
    record_interval_s: float = 0.5
    hv_params: HvParams = field(default_factory=HvParams)
    cacc_params: CaccParams = field(default_factory=CaccParams)
    lane_change: LaneChangeParams = field(default_factory=LaneChangeParams)
    coordination: CoordinationParams = field(default_factory=CoordinationParams)
    vehicle_length_m: float = 4.5
    hv_speed_sigma_kmh: float = 5.0
    hv_speed_halfwidth_kmh: float = 10.0
    cav_free_lane_change: bool = True


def validate_config(cfg: ScenarioConfig) -> list[str]:
    """Return all invariant violations, one message per broken rule.

    Empty list iff the config can be simulated without precondition
    failures elsewhere. Total function: never raises.
    """
    v: list[str] = []
    net = cfg.network
    if net.length <= 0:
        v.append("network.length must be > 0")
    if net.lane_count < 1:
        v.append("network.lane_count must be >= 1")
    if not any(p == LanePolicy.GENERAL for p in net.lane_policies):
        v.append("network.lane_policies must include at least one GENERAL lane")
    if net.speed_limit <= 0:
        v.append("network.speed_limit must be > 0")
    if cfg.demand_vph < 0:
        v.append("demand_vph must be >= 0")
    if cfg.demand_scale <= 0:
        v.append("demand_scale must be > 0")
    if not 0.0 <= cfg.mpr <= 1.0:
        v.append("mpr must be within [0,1]")
    if cfg.duration_s <= 0:
        v.append("duration_s must be > 0")
    if not cfg.warmup_s < cfg.duration_s:
        v.append("warmup_s must be < duration_s")
    if cfg.warmup_s < 0:
        v.append("warmup_s must be >= 0")
    if cfg.dt_s <= 0:
        v.append("dt_s must be > 0")
    elif cfg.record_interval_s <= 0 or not math.isclose(
        cfg.record_interval_s / cfg.dt_s,
        round(cfg.record_interval_s / cfg.dt_s),
        abs_tol=1e-9,
    ):
        v.append("record_interval_s must be an integer multiple of dt_s")
    if len(cfg.seeds) == 0:
        v.append("seeds must be non-empty")

    hv = cfg.hv_params
    if hv.cc0 < 0:
        v.append("hv_params.cc0 must be >= 0")
    if hv.cc1 <= 0:
        v.append("hv_params.cc1 must be > 0")
    if hv.cc2 < 0:
        v.append("hv_params.cc2 must be >= 0")
    for name in ("cc7", "cc8", "cc9"):
        if getattr(hv, name) <= 0:
            v.append(f"hv_params.{name} must be > 0")
    if hv.max_decel >= 0:
        v.append("hv_params.max_decel must be < 0")

    cp = cfg.cacc_params
    if not 0.0 < cp.t_cacc <= cp.t_acc:
        v.append("cacc_params must satisfy 0 < t_cacc <= t_acc")
    if cp.s0 <= 0:
        v.append("cacc_params.s0 must be > 0")
    if cp.a_max <= 0:
        v.append("cacc_params.a_max must be > 0")
    if cp.b_des <= 0:
        v.append("cacc_params.b_des must be > 0")
    if not 0.0 <= cp.coolness <= 1.0:
        v.append("cacc_params.coolness must be within [0,1]")
    if cp.phi_max < 2:
        v.append("cacc_params.phi_max must be >= 2")
    if cp.d_front <= 0 or cp.d_rear <= 0:
        v.append("cacc_params.d_front and d_rear must be > 0")
    if cp.comm_range <= 0:
        v.append("cacc_params.comm_range must be > 0")
    if not 0.0 <= cp.v_des_range[0] <= cp.v_des_range[1]:
        v.append("cacc_params.v_des_range must be an ordered non-negative interval")
    if cp.max_decel >= 0:
        v.append("cacc_params.max_decel must be < 0")
    if cfg.vehicle_length_m <= 0:
        v.append("vehicle_length_m must be > 0")
    return v


def desk_network(lanes: int = 3, length: float = 3000.0,
                 speed_limit_kmh: float = 96.0) -> RoadNetwork:
    return RoadNetwork(
        length=length,
        lane_count=lanes,
        lane_policies=tuple(LanePolicy.GENERAL for _ in range(lanes)),
        speed_limit=kmh_to_ms(speed_limit_kmh),
    )


def desk_config(strategy: Strategy = Strategy.BASE, mpr: float = 0.0,
                seeds: Sequence[int] = (1, 2, 3), **overrides) -> ScenarioConfig:
    """Test-scale scenario: 3 km, 3 lanes, 1800 vph/lane, 1200 s."""
    cfg = ScenarioConfig(
        network=desk_network(),
        demand_vph=5400.0,
        mpr=mpr,
        strategy=strategy,
        duration_s=1200.0,
        warmup_s=120.0,
        seeds=tuple(seeds),
    )
    return replace(cfg, **overrides) if overrides else cfg


# --- TOML (de)serialization ----------------------------------------------
# File units: km/h for corridor speeds (speed_limit, v_des_range), s for
# times, m for lengths. Wiedemann cc4/cc5 stay in m/s, their native unit.

def _network_to_doc(net: RoadNetwork) -> dict:
    return {
        "length": net.length,
        "lane_count": net.lane_count,
        "lane_policies": [p.value for p in net.lane_policies],
        "speed_limit": ms_to_kmh(net.speed_limit),
    }


def _network_from_doc(doc: dict) -> RoadNetwork:
    return RoadNetwork(
        length=float(doc["length"]),
        lane_count=int(doc["lane_count"]),
        lane_policies=tuple(LanePolicy(p) for p in doc["lane_policies"]),
        speed_limit=kmh_to_ms(float(doc["speed_limit"])),
    )


def config_to_doc(cfg: ScenarioConfig) -> dict:
    cp = cfg.cacc_params
    doc = {
        "demand_vph": cfg.demand_vph,
        "demand_scale": cfg.demand_scale,
        "mpr": cfg.mpr,
        "strategy": cfg.strategy.value,
        "duration_s": cfg.duration_s,
        "warmup_s": cfg.warmup_s,
        "dt_s": cfg.dt_s,
        "record_interval_s": cfg.record_interval_s,
        "seeds": list(cfg.seeds),
        "vehicle_length_m": cfg.vehicle_length_m,
        "hv_speed_sigma_kmh": cfg.hv_speed_sigma_kmh,
        "hv_speed_halfwidth_kmh": cfg.hv_speed_halfwidth_kmh,
        "cav_free_lane_change": cfg.cav_free_lane_change,
        "network": _network_to_doc(cfg.network),
        "hv_params": {f.name: getattr(cfg.hv_params, f.name)
                      for f in fields(HvParams)},
        "cacc_params": {
            "t_cacc": cp.t_cacc,
            "t_acc": cp.t_acc,
            "s0": cp.s0,
            "a_max": cp.a_max,
            "b_des": cp.b_des,
            "coolness": cp.coolness,
            "delta": cp.delta,
            "v_des_range": [ms_to_kmh(cp.v_des_range[0]),
                            ms_to_kmh(cp.v_des_range[1])],
            "phi_max": cp.phi_max,
            "d_front": cp.d_front,
            "d_rear": cp.d_rear,
            "comm_range": cp.comm_range,
            "max_decel": cp.max_decel,
        },
        "lane_change": {f.name: getattr(cfg.lane_change, f.name)
                        for f in fields(LaneChangeParams)},
        "coordination": {f.name: getattr(cfg.coordination, f.name)
                         for f in fields(CoordinationParams)},
    }
    return doc


def config_from_doc(doc: dict) -> ScenarioConfig:
    cp_doc = dict(doc.get("cacc_params", {}))
    if "v_des_range" in cp_doc:
        lo, hi = cp_doc["v_des_range"]
        cp_doc["v_des_range"] = (kmh_to_ms(float(lo)), kmh_to_ms(float(hi)))
    cacc = CaccParams(**cp_doc)
    hv = HvParams(**doc.get("hv_params", {}))
    lc = LaneChangeParams(**doc.get("lane_change", {}))
    coord = CoordinationParams(**doc.get("coordination", {}))
    return ScenarioConfig(
        network=_network_from_doc(doc["network"]),
        demand_vph=float(doc["demand_vph"]),
        demand_scale=float(doc.get("demand_scale", 1.3)),
        mpr=float(doc["mpr"]),
        strategy=Strategy(doc["strategy"]),
        duration_s=float(doc["duration_s"]),
        warmup_s=float(doc["warmup_s"]),
        dt_s=float(doc.get("dt_s", 0.1)),
        record_interval_s=float(doc.get("record_interval_s", 0.5)),
        seeds=tuple(int(s) for s in doc["seeds"]),
        hv_params=hv,
        cacc_params=cacc,
        lane_change=lc,
        coordination=coord,
        vehicle_length_m=float(doc.get("vehicle_length_m", 4.5)),
        hv_speed_sigma_kmh=float(doc.get("hv_speed_sigma_kmh", 5.0)),
        hv_speed_halfwidth_kmh=float(doc.get("hv_speed_halfwidth_kmh", 10.0)),
        cav_free_lane_change=bool(doc.get("cav_free_lane_change", True)),
    )


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int,)):
        return str(v)
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, str):
        return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    raise TypeError(f"unsupported TOML value: {v!r}")


def dumps_toml(doc: dict) -> str:
    """Minimal deterministic TOML emitter for one level of tables
    (tomli-w is not available on the mirror)."""
    lines: list[str] = []
    tables = {k: v for k, v in doc.items() if isinstance(v, dict)}
    for k, v in doc.items():
        if not isinstance(v, dict):
            lines.append(f"{k} = {_toml_value(v)}")
    for tname, table in tables.items():
        lines.append("")
        lines.append(f"[{tname}]")
        for k, v in table.items():
            if isinstance(v, dict):
                raise TypeError("nested tables beyond one level not supported")
            lines.append(f"{k} = {_toml_value(v)}")
    return "\n".join(lines) + "\n"


def save_config(cfg: ScenarioConfig, path: Union[str, Path]) -> None:
    Path(path).write_text(dumps_toml(config_to_doc(cfg)), encoding="utf-8")


def load_config(path: Union[str, Path]) -> ScenarioConfig:
    with open(path, "rb") as fh:
        return config_from_doc(tomli.load(fh))


def load_config_doc(path: Union[str, Path]) -> dict:
    """Raw parsed document (the CLI also reads the optional [matrix] table)."""
    with open(path, "rb") as fh:
        return tomli.load(fh)
