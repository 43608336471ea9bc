"""Post-hoc metrics over trajectory streams.

Hard-braking events (accel < -3 m/s^2), time-to-collision samples
(TTC < 3 s), lane-change activity, interaction-state composition, network
productivity (Q = VMT/VHT) and the two-sample Kolmogorov-Smirnov test used
to compare hard-braking distributions between scenarios.

All metrics are pure, order-insensitive functions of the stream; events
are tagged by the interacting leader's class (HV-HV vs HV-CAV).
"""
from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

from .core import InteractionState, ScenarioConfig, VehicleClass
from .engine import RunSummary, TrajectoryFrame

HARD_BRAKE_THRESHOLD = -3.0  # strict: exactly -3.0 is not an event
TTC_THRESHOLD = 3.0          # strict: exactly 3.0 s is not retained


class InteractionTag(enum.IntEnum):
    HV_HV = 0
    HV_CAV = 1


@dataclass
class EventTable:
    """Columnar (time, vehicle, value, tag) event list."""

    time: np.ndarray
    vehicle: np.ndarray
    value: np.ndarray
    tag: np.ndarray

    def __len__(self):
        return len(self.time)

    def count(self, tag: InteractionTag) -> int:
        return int((self.tag == int(tag)).sum())

    def values_for(self, tag: InteractionTag) -> np.ndarray:
        return self.value[self.tag == int(tag)]

    def to_csv(self, path, value_name: str) -> None:
        names = np.array(["HV_HV", "HV_CAV"])
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(f"time,veh_id,{value_name},interaction\n")
            for t, v, x, g in zip(self.time, self.vehicle, self.value,
                                  self.tag):
                fh.write(f"{t:.1f},{v},{x:.6f},{names[g]}\n")


@dataclass
class MetricReport:
    vmt_km: float
    vht_h: float
    q_kmh: Optional[float]
    throughput_vph: Optional[float]
    hard_brake_events: EventTable
    ttc_samples: EventTable
    lane_changes_total: int
    lane_changes_per_hv: float
    state_composition: dict[str, float]

    def to_dict(self) -> dict:
        return {
            "vmt_km": self.vmt_km,
            "vht_h": self.vht_h,
            "q_kmh": self.q_kmh,
            "throughput_vph": self.throughput_vph,
            "hard_braking": {
                "hv_hv": self.hard_brake_events.count(InteractionTag.HV_HV),
                "hv_cav": self.hard_brake_events.count(InteractionTag.HV_CAV),
            },
            "ttc": {
                "hv_hv": self.ttc_samples.count(InteractionTag.HV_HV),
                "hv_cav": self.ttc_samples.count(InteractionTag.HV_CAV),
            },
            "lane_changes": {
                "total": self.lane_changes_total,
                "per_hv_mean": self.lane_changes_per_hv,
            },
            "state_composition": self.state_composition,
        }

    def to_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def _hv_with_leader(frame: TrajectoryFrame):
    return ((frame.vclass == int(VehicleClass.HV))
            & (frame.leader_id >= 0))


def detect_hard_braking(frame: TrajectoryFrame) -> EventTable:
    """One event per recorded HV instant with accel strictly below
    -3 m/s^2 and a leader present; tagged by the leader's class."""
    mask = _hv_with_leader(frame) & (frame.accel < HARD_BRAKE_THRESHOLD)
    tag = (frame.leader_class[mask] == int(VehicleClass.CAV)).astype(np.int8)
    return EventTable(frame.time[mask], frame.veh_id[mask],
                      frame.accel[mask], tag)


def compute_ttc(frame: TrajectoryFrame) -> EventTable:
    """Constant-speed time to collision for closing HV instants, retained
    strictly below 3 s."""
    mask = _hv_with_leader(frame)
    idx = np.flatnonzero(mask)
    # leader speed is not recorded; reconstruct closing speed from the
    # recorded pair at this instant via net-gap kinematics is not possible,
    # so the stream must carry it: dv = v_lead - v follows from matching
    # leader rows at the same instant.
    lead_speed = _leader_speeds(frame, idx)
    v = frame.speed[idx]
    closing = v > lead_speed
    idx = idx[closing]
    dv = v[closing] - lead_speed[closing]
    ttc = frame.net_gap[idx] / dv
    keep = ttc < TTC_THRESHOLD
    idx = idx[keep]
    tag = (frame.leader_class[idx] == int(VehicleClass.CAV)).astype(np.int8)
    return EventTable(frame.time[idx], frame.veh_id[idx], ttc[keep], tag)


def _leader_speeds(frame: TrajectoryFrame, idx: np.ndarray) -> np.ndarray:
    """Speed of each row's leader at the same recorded instant."""
    # Key rows by (time, veh_id); float times come from a fixed grid so
    # exact equality is safe.
    order = np.lexsort((frame.veh_id, frame.time))
    t_sorted = frame.time[order]
    v_sorted = frame.veh_id[order]
    pos = np.searchsorted(
        t_sorted * 1e7 + v_sorted,  # composite key; times are < 1e6 s
        frame.time[idx] * 1e7 + frame.leader_id[idx])
    pos = np.clip(pos, 0, len(order) - 1)
    found = order[pos]
    ok = ((frame.time[found] == frame.time[idx])
          & (frame.veh_id[found] == frame.leader_id[idx]))
    out = np.where(ok, frame.speed[found], np.inf)  # missing leader: not closing
    return out


def count_lane_changes(frame: TrajectoryFrame) -> tuple[int, float]:
    """(total, per-HV mean) lane-index differences between consecutive
    records of each HV."""
    hv = frame.vclass == int(VehicleClass.HV)
    if not hv.any():
        return 0, 0.0
    veh = frame.veh_id[hv]
    t = frame.time[hv]
    lane = frame.lane[hv]
    order = np.lexsort((t, veh))
    veh, lane = veh[order], lane[order]
    same = veh[1:] == veh[:-1]
    changes = int(((lane[1:] != lane[:-1]) & same).sum())
    n_hv = len(np.unique(veh))
    return changes, changes / n_hv


def state_composition(frame: TrajectoryFrame) -> dict[str, float]:
    """Fraction of HV recording instants per interaction state, OTHER
    collecting anything outside the five named regimes. Sums to 1."""
    hv = frame.vclass == int(VehicleClass.HV)
    states = frame.state[hv]
    total = len(states)
    comp = {}
    known = 0
    for s in (InteractionState.FREE, InteractionState.CLOSE_UP,
              InteractionState.FOLLOW, InteractionState.BRAKE_BX,
              InteractionState.BRAKE_AX):
        c = int((states == int(s)).sum())
        comp[s.name] = c / total if total else 0.0
        known += c
    comp["OTHER"] = (total - known) / total if total else 0.0
    return comp


def network_performance(frame: TrajectoryFrame,
                        summary: Optional[RunSummary] = None,
                        cfg: Optional[ScenarioConfig] = None):
    """(vmt_km, vht_h, q_kmh, throughput_vph) estimated from the stream;
    throughput needs the engine summary (exit counts are not recoverable
    from records alone)."""
    if len(frame) == 0:
        return 0.0, 0.0, None, (summary.throughput_vph if summary else None)
    order = np.lexsort((frame.time, frame.veh_id))
    veh = frame.veh_id[order]
    pos = frame.pos[order]
    t = frame.time[order]
    first = np.ones(len(veh), dtype=bool)
    first[1:] = veh[1:] != veh[:-1]
    last = np.ones(len(veh), dtype=bool)
    last[:-1] = veh[1:] != veh[:-1]
    vmt_km = float((pos[last] - pos[first]).sum()) / 1000.0
    vht_h = float((t[last] - t[first]).sum()) / 3600.0
    q = vmt_km / vht_h if vht_h > 0 else None
    thr = summary.throughput_vph if summary is not None else None
    return vmt_km, vht_h, q, thr


def compute_metrics(frame: TrajectoryFrame,
                    summary: Optional[RunSummary] = None,
                    cfg: Optional[ScenarioConfig] = None) -> MetricReport:
    vmt, vht, q, thr = network_performance(frame, summary, cfg)
    total, per_hv = count_lane_changes(frame)
    return MetricReport(
        vmt_km=vmt,
        vht_h=vht,
        q_kmh=q,
        throughput_vph=thr,
        hard_brake_events=detect_hard_braking(frame),
        ttc_samples=compute_ttc(frame),
        lane_changes_total=total,
        lane_changes_per_hv=per_hv,
        state_composition=state_composition(frame),
    )


# --- empirical distribution machinery -------------------------------------

class Ecdf:
    """Right-continuous empirical CDF: F(t) = #{x <= t} / n."""

    def __init__(self, samples):
        samples = np.asarray(samples, dtype=np.float64)
        if samples.size == 0:
            raise ValueError("ecdf requires at least one sample")
        self.sorted = np.sort(samples)
        self.n = samples.size

    def __call__(self, t):
        return np.searchsorted(self.sorted, t, side="right") / self.n


def ecdf(samples) -> Ecdf:
    return Ecdf(samples)


class KsResult(NamedTuple):
    d: float
    reject: bool


def ks_critical_value(alpha: float, n: int, m: int) -> float:
    """Asymptotic two-sample critical distance c(alpha)*sqrt((n+m)/(n*m));
    c(0.05) = 1.3581."""
    c = math.sqrt(-math.log(alpha / 2.0) / 2.0)
    return c * math.sqrt((n + m) / (n * m))


def ks_two_sample(x, y, alpha: float = 0.05) -> KsResult:
    """Two-sample Kolmogorov-Smirnov test.

    D is the supremum ECDF distance over the merged sample support (ties
    are handled by evaluating both ECDFs at every merged point); the null
    is rejected when D exceeds the asymptotic critical value.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.size == 0 or y.size == 0:
        raise ValueError("ks_two_sample requires non-empty samples")
    xs = np.sort(x)
    ys = np.sort(y)
    support = np.concatenate([xs, ys])
    fx = np.searchsorted(xs, support, side="right") / xs.size
    fy = np.searchsorted(ys, support, side="right") / ys.size
    d = float(np.max(np.abs(fx - fy)))
    return KsResult(d, d > ks_critical_value(alpha, xs.size, ys.size))


def ecdf_points(samples_by_label: dict[str, np.ndarray]) -> tuple[np.ndarray, dict]:
    """Merged-support ECDF evaluation for plotting: returns (support,
    {label: F(support)})."""
    parts = [np.asarray(v, dtype=np.float64)
             for v in samples_by_label.values() if len(v)]
    if not parts:
        return np.zeros(0), {k: np.zeros(0) for k in samples_by_label}
    support = np.unique(np.concatenate(parts))
    out = {}
    for k, v in samples_by_label.items():
        v = np.asarray(v, dtype=np.float64)
        if v.size == 0:
            out[k] = np.full(support.shape, np.nan)
        else:
            out[k] = np.searchsorted(np.sort(v), support, side="right") / v.size
    return support, out


def write_ecdf_csv(path, samples_by_label: dict[str, np.ndarray]) -> None:
    support, curves = ecdf_points(samples_by_label)
    labels = list(samples_by_label)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("value," + ",".join(labels) + "\n")
        for i, s in enumerate(support):
            row = ",".join(
                "" if math.isnan(curves[k][i]) else f"{curves[k][i]:.6f}"
                for k in labels)
            fh.write(f"{s:.6f},{row}\n")
