"""Deterministic fixed-timestep simulation loop.

Step phases, in fixed order: demand injection, snapshot, per-vehicle
control decisions (read-only on the snapshot), serialized lane-change
commits (lowest vehicle id first), trapezoidal integration with a speed
floor at zero, exit removal, platoon maintenance, gap audit, recording.

All randomness is pre-drawn at run start from the run's seed, so identical
(config, seed) pairs produce byte-identical trajectory streams.
"""
from __future__ import annotations

import hashlib
import io
import math
from dataclasses import dataclass, replace as _dc_replace
from typing import Iterable, Optional, Sequence

import numpy as np
import pandas as pd

from . import kernels
from .coordination import (CommitRequest, GapVerdict, JoinKind,
                           LocalCoordinator, PlanState, PlatoonRegistry,
                           WorldSnapshot, evaluate_gaps, insertion_index,
                           maintain_platoons)
from .core import (CaccMode, InteractionState, LanePolicy, ScenarioConfig,
                   Strategy, VehicleClass, VehicleState, validate_config)
from .kernels import scalar as _s

_CSV_COLUMNS = ["time", "veh_id", "class", "lane", "pos_m", "speed_ms",
                "accel_ms2", "leader_id", "leader_class", "net_gap_m",
                "state", "platoon_id"]


class ConfigError(ValueError):
    pass


class GapViolationError(RuntimeError):
    """A net gap dropped to zero or below after integration: a model or
    config defect. Never silently clamped."""

    def __init__(self, time: float, details: list[dict]):
        self.time = time
        self.details = details
        ids = [(d["follower_id"], d["leader_id"]) for d in details]
        super().__init__(f"gap violation at t={time:.2f}s for "
                         f"(follower, leader) pairs {ids}")


@dataclass
class RunSummary:
    entered: int
    exited: int
    present: int
    exited_post_warmup: int
    vmt_km: float
    vht_h: float
    q_kmh: Optional[float]
    throughput_vph: float
    halts: int = 0

    def to_dict(self) -> dict:
        return {
            "entered": self.entered,
            "exited": self.exited,
            "present": self.present,
            "exited_post_warmup": self.exited_post_warmup,
            "vmt_km": self.vmt_km,
            "vht_h": self.vht_h,
            "q_kmh": self.q_kmh,
            "throughput_vph": self.throughput_vph,
            "halts": self.halts,
        }


class TrajectoryFrame:
    """Columnar trajectory stream. Sentinels in memory: -1 for absent ids
    and codes, NaN for absent gaps; empty CSV fields on disk."""

    def __init__(self, time, veh_id, vclass, lane, pos, speed, accel,
                 leader_id, leader_class, net_gap, state, platoon_id,
                 cacc_mode=None):
        self.time = time
        self.veh_id = veh_id
        self.vclass = vclass
        self.lane = lane
        self.pos = pos
        self.speed = speed
        self.accel = accel
        self.leader_id = leader_id
        self.leader_class = leader_class
        self.net_gap = net_gap
        self.state = state
        self.platoon_id = platoon_id
        # Engine-internal extra (not part of the CSV schema): control mode
        # at the recorded instant, for degradation audits.
        if cacc_mode is None:
            cacc_mode = np.full(len(time), -1, dtype=np.int8)
        self.cacc_mode = cacc_mode

    def __len__(self):
        return len(self.time)

    def sorted_by_vehicle_time(self) -> "TrajectoryFrame":
        order = np.lexsort((self.time, self.veh_id))
        return TrajectoryFrame(*(getattr(self, c)[order] for c in (
            "time", "veh_id", "vclass", "lane", "pos", "speed", "accel",
            "leader_id", "leader_class", "net_gap", "state", "platoon_id",
            "cacc_mode")))

    def _to_dataframe(self) -> pd.DataFrame:
        cls_names = np.array(["HV", "CAV"])
        state_names = np.array([s.name for s in InteractionState])
        df = pd.DataFrame({
            "time": self.time,
            "veh_id": self.veh_id,
            "class": cls_names[self.vclass],
            "lane": self.lane,
            "pos_m": self.pos,
            "speed_ms": self.speed,
            "accel_ms2": self.accel,
            "leader_id": pd.array(self.leader_id, dtype="Int64"),
            "leader_class": pd.Categorical.from_codes(
                self.leader_class, categories=["HV", "CAV"]),
            "net_gap_m": self.net_gap,
            "state": pd.Categorical.from_codes(
                np.where(self.vclass == 0, self.state, -1),
                categories=list(state_names)),
            "platoon_id": pd.array(self.platoon_id, dtype="Int64"),
        })
        df.loc[np.asarray(self.leader_id) < 0, "leader_id"] = pd.NA
        df.loc[np.asarray(self.platoon_id) < 0, "platoon_id"] = pd.NA
        return df

    def to_csv_bytes(self) -> bytes:
        buf = io.StringIO()
        self._to_dataframe().to_csv(buf, index=False, float_format="%.6f",
                                    na_rep="")
        return buf.getvalue().encode("utf-8")

    def to_csv(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_csv_bytes())

    def sha256(self) -> str:
        return hashlib.sha256(self.to_csv_bytes()).hexdigest()

    @classmethod
    def from_csv(cls, path) -> "TrajectoryFrame":
        df = pd.read_csv(path)
        n = len(df)
        cls_code = (df["class"] == "CAV").astype(np.int8).to_numpy()
        lc = df["leader_class"].astype("string")
        leader_class = np.where(lc.isna(), -1,
                                np.where(lc == "CAV", 1, 0)).astype(np.int8)
        state_map = {s.name: int(s) for s in InteractionState}
        state = df["state"].map(state_map).fillna(-1).astype(np.int8).to_numpy()
        return cls(
            time=df["time"].to_numpy(np.float64),
            veh_id=df["veh_id"].to_numpy(np.int64),
            vclass=cls_code,
            lane=df["lane"].to_numpy(np.int16),
            pos=df["pos_m"].to_numpy(np.float64),
            speed=df["speed_ms"].to_numpy(np.float64),
            accel=df["accel_ms2"].to_numpy(np.float64),
            leader_id=df["leader_id"].fillna(-1).to_numpy(np.int64),
            leader_class=leader_class,
            net_gap=df["net_gap_m"].to_numpy(np.float64),
            state=state,
            platoon_id=df["platoon_id"].fillna(-1).to_numpy(np.int64),
            cacc_mode=np.full(n, -1, dtype=np.int8),
        )

    @classmethod
    def concat(cls, parts: Sequence["TrajectoryFrame"]) -> "TrajectoryFrame":
        cols = ("time", "veh_id", "vclass", "lane", "pos", "speed", "accel",
                "leader_id", "leader_class", "net_gap", "state",
                "platoon_id", "cacc_mode")
        if not parts:
            return _empty_frame()
        return cls(*(np.concatenate([getattr(p, c) for p in parts])
                     for c in cols))


def _empty_frame() -> TrajectoryFrame:
    z = np.zeros(0)
    zi = np.zeros(0, dtype=np.int64)
    zb = np.zeros(0, dtype=np.int8)
    return TrajectoryFrame(z, zi, zb, np.zeros(0, np.int16), z, z, z,
                           zi.copy(), zb.copy(), z.copy(), zb.copy(),
                           zi.copy(), zb.copy())


@dataclass
class RunResult:
    frame: TrajectoryFrame
    events: list
    summary: RunSummary
    strategy: Strategy
    mpr: float
    seed: int


@dataclass
class _FreeChange:
    vehicle_id: int
    target_lane: int


class _Fleet:
    """Structure-of-arrays container for the active vehicles."""

    COLS = ("ids", "vclass", "lane", "pos", "speed", "accel", "length",
            "v_des")

    def __init__(self):
        self.ids = np.zeros(0, dtype=np.int64)
        self.vclass = np.zeros(0, dtype=np.int8)
        self.lane = np.zeros(0, dtype=np.int16)
        self.pos = np.zeros(0, dtype=np.float64)
        self.speed = np.zeros(0, dtype=np.float64)
        self.accel = np.zeros(0, dtype=np.float64)
        self.length = np.zeros(0, dtype=np.float64)
        self.v_des = np.zeros(0, dtype=np.float64)

    def __len__(self):
        return len(self.ids)

    def append(self, vid, vclass, lane, pos, speed, length, v_des):
        self.ids = np.append(self.ids, np.int64(vid))
        self.vclass = np.append(self.vclass, np.int8(vclass))
        self.lane = np.append(self.lane, np.int16(lane))
        self.pos = np.append(self.pos, pos)
        self.speed = np.append(self.speed, speed)
        self.accel = np.append(self.accel, 0.0)
        self.length = np.append(self.length, length)
        self.v_des = np.append(self.v_des, v_des)

    def keep(self, mask):
        for c in self.COLS:
            setattr(self, c, getattr(self, c)[mask])


class _ArrivalLane:
    __slots__ = ("times", "vclass", "v_des", "ptr")

    def __init__(self, times, vclass, v_des):
        self.times = times
        self.vclass = vclass
        self.v_des = v_des
        self.ptr = 0


def _draw_arrivals(cfg: ScenarioConfig, seed: int) -> dict[int, _ArrivalLane]:
    """Pre-draw the full arrival schedule: Poisson process per GENERAL
    lane, Bernoulli class thinning, per-arrival desired speeds.

    Arrival times and lanes depend only on the seed, so scenarios with the
    same seed see identical demand regardless of strategy and MPR.
    """
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    general = [i for i, p in enumerate(cfg.network.lane_policies)
               if p == LanePolicy.GENERAL]
    rate = cfg.demand_vph * cfg.demand_scale / 3600.0 / len(general)
    mpr = 0.0 if cfg.strategy == Strategy.BASE else cfg.mpr

    lanes: dict[int, _ArrivalLane] = {}
    counts = {}
    for ln in general:
        n = int(rng.poisson(rate * cfg.duration_s))
        counts[ln] = n
        lanes[ln] = _ArrivalLane(np.sort(rng.uniform(0.0, cfg.duration_s, n)),
                                 None, None)
    sigma = cfg.hv_speed_sigma_kmh / 3.6
    halfwidth = cfg.hv_speed_halfwidth_kmh / 3.6
    mean = cfg.network.speed_limit
    v_lo, v_hi = cfg.cacc_params.v_des_range
    for ln in general:
        n = counts[ln]
        is_cav = rng.random(n) < mpr
        cav_speed = rng.uniform(v_lo, v_hi, n)
        hv_speed = rng.normal(mean, sigma, n)
        bad = np.abs(hv_speed - mean) > halfwidth
        while bad.any():
            hv_speed[bad] = rng.normal(mean, sigma, int(bad.sum()))
            bad = np.abs(hv_speed - mean) > halfwidth
        lanes[ln].vclass = np.where(is_cav, np.int8(VehicleClass.CAV),
                                    np.int8(VehicleClass.HV))
        lanes[ln].v_des = np.where(is_cav, cav_speed, hv_speed)
    return lanes


class World:
    """Mutable simulation state for one run."""

    def __init__(self, cfg: ScenarioConfig, seed: int,
                 initial_vehicles: Iterable[VehicleState] = (),
                 initial_platoons: Iterable[tuple[int, ...]] = ()):
        self.cfg = cfg
        self.seed = seed
        self.fleet = _Fleet()
        self.registry = PlatoonRegistry()
        self.step_idx = 0
        self.entered = 0
        self.exited = 0
        self.exited_post_warmup = 0
        self.vmt_m = 0.0
        self.vht_s = 0.0
        self.events: list[tuple] = []
        self.arrivals = _draw_arrivals(cfg, seed)
        self._snap: Optional[WorldSnapshot] = None
        self._next_id = 1

        for v in initial_vehicles:
            self.fleet.append(v.id, int(v.vclass), v.lane, v.position,
                              v.speed, v.length, v.desired_speed)
            self.entered += 1
            self._next_id = max(self._next_id, v.id + 1)
        for members in initial_platoons:
            self.registry.create(tuple(members))

    @property
    def time(self) -> float:
        return self.step_idx * self.cfg.dt_s

    def snapshot(self) -> WorldSnapshot:
        if self._snap is None:
            f = self.fleet
            platoon = np.array(
                [self.registry.membership.get(int(i), -1) for i in f.ids],
                dtype=np.int64)
            self._snap = WorldSnapshot(
                self.time, f.ids, f.vclass, f.lane, f.pos, f.speed, f.accel,
                f.length, f.v_des, platoon, self.cfg.network.lane_count)
        return self._snap

    def invalidate(self):
        self._snap = None


def _inject_demand(world: World, t: float) -> None:
    cfg = world.cfg
    f = world.fleet
    for ln, sched in world.arrivals.items():
        while sched.ptr < len(sched.times) and sched.times[sched.ptr] <= t:
            k = sched.ptr
            v_des = float(sched.v_des[k])
            in_lane = np.flatnonzero(f.lane == ln)
            if in_lane.size:
                j = in_lane[np.argmin(f.pos[in_lane])]
                entry_gap = float(f.pos[j] - f.length[j])
                v_init = min(float(f.speed[j]), cfg.network.speed_limit, v_des)
                need = _s.desired_gap(v_init, float(f.speed[j]),
                                      cfg.cacc_params.t_acc,
                                      cfg.cacc_params.s0,
                                      cfg.cacc_params.a_max,
                                      cfg.cacc_params.b_des)
                if entry_gap < need:
                    break  # blocked: this and later arrivals queue
            else:
                v_init = min(cfg.network.speed_limit, v_des)
            f.append(world._next_id, int(sched.vclass[k]), ln, 0.0, v_init,
                     cfg.vehicle_length_m, v_des)
            world._next_id += 1
            world.entered += 1
            sched.ptr += 1
            world.invalidate()


def _hv_control(world: World, snap: WorldSnapshot, mask: np.ndarray,
                accel_out, state_out) -> None:
    cfg = world.cfg
    hp = cfg.hv_params
    idx = np.flatnonzero(mask)
    if idx.size == 0:
        return
    lead = snap.leader_idx[idx]
    has = lead >= 0
    li = np.where(has, lead, 0)
    gap = np.where(has, snap.net_gap[idx], 1.0)
    v_lead = np.where(has, snap.speed[li], 0.0)
    a_lead = np.where(has, snap.accel[li], 0.0)
    dv = v_lead - snap.speed[idx]
    a, st = kernels.hv_control(
        snap.speed[idx], snap.v_des[idx], has, gap, dv, v_lead, a_lead,
        hp.cc0, hp.cc1, hp.cc2, hp.cc3, hp.cc4, hp.cc5, hp.cc6, hp.cc7,
        hp.cc8, hp.cc9, hp.max_decel, cfg.dt_s)
    accel_out[idx] = a
    state_out[idx] = st


def _cav_control(world: World, snap: WorldSnapshot, mask: np.ndarray,
                 t_override: np.ndarray, accel_out, mode_out) -> None:
    cfg = world.cfg
    cp = cfg.cacc_params
    idx = np.flatnonzero(mask)
    if idx.size == 0:
        return
    lead = snap.leader_idx[idx]
    has = lead >= 0
    li = np.where(has, lead, 0)
    gap = np.where(has, snap.net_gap[idx], 1.0)
    v_lead = np.where(has, snap.speed[li], 0.0)
    a_lead = np.where(has, snap.accel[li], 0.0)
    lead_cav = has & (snap.vclass[li] == int(VehicleClass.CAV))
    a, mode = kernels.cacc_control(
        snap.speed[idx], snap.v_des[idx], has, gap, v_lead, a_lead,
        lead_cav, t_override[idx], cp.t_cacc, cp.t_acc, cp.s0, cp.a_max,
        cp.b_des, cp.coolness, cp.delta, cp.comm_range, cp.max_decel,
        -cp.b_des)
    accel_out[idx] = a
    mode_out[idx] = mode


def _pace_joiners(world: World, snap: WorldSnapshot,
                  coordinator: LocalCoordinator, accel: np.ndarray) -> None:
    """Cap a joiner's acceleration against a virtual leader at its
    projected slot so it does not drift past the platoon while waiting."""
    cp = world.cfg.cacc_params
    for vid in sorted(coordinator.plans):
        plan = coordinator.plans[vid]
        if plan.state != PlanState.GAP_REQUESTED:
            continue
        if plan.join_kind == JoinKind.FRONT:
            continue
        i = snap.id_to_idx.get(vid)
        plat = coordinator.registry.platoons.get(plan.platoon_id)
        if i is None or plat is None:
            continue
        # Slot leader: the member just ahead of the projection (REAR: tail).
        slot_leader = None
        pos_i = float(snap.pos[i])
        for m in reversed(plat.members):
            j = snap.id_to_idx.get(m)
            if j is not None and float(snap.pos[j]) > pos_i:
                slot_leader = j
                break
        if slot_leader is None:
            continue
        vgap = float(snap.pos[slot_leader] - snap.length[slot_leader]) - pos_i
        if vgap <= 0.5:
            a_pace = -cp.b_des
        else:
            # Hold station at the acceptance-scaled gap so the requested
            # rear gap can actually reach its threshold.
            t_pace = world.cfg.coordination.gap_accept_factor_cacc * cp.t_cacc
            a_pace = _s.eidm_accel(
                float(snap.speed[i]), float(snap.v_des[i]), vgap,
                float(snap.speed[slot_leader]),
                float(snap.accel[slot_leader]), t_pace, cp.s0, cp.a_max,
                cp.b_des, cp.coolness, cp.delta, cp.max_decel)
        accel[i] = min(accel[i], max(a_pace, -cp.b_des))


def _free_lane_changes(world: World, snap: WorldSnapshot,
                       accel_now: np.ndarray,
                       coordinator: Optional[LocalCoordinator]
                       ) -> list[_FreeChange]:
    """Vectorized incentive + safety evaluation of discretionary changes.

    HVs always participate. CAVs participate under AD_HOC, and under
    LOCAL_COORD only while they are free agents with no join in flight
    (platoon members and active joiners move laterally only to cluster).
    """
    cfg = world.cfg
    hp, cp, lc = cfg.hv_params, cfg.cacc_params, cfg.lane_change
    policies = cfg.network.lane_policies
    n = snap.n

    subjects = snap.vclass == int(VehicleClass.HV)
    gain_req = np.full(n, lc.a_gain)
    if cfg.cav_free_lane_change and cfg.strategy != Strategy.BASE:
        cav = snap.vclass == int(VehicleClass.CAV)
        if cfg.strategy == Strategy.LOCAL_COORD:
            # Members stay committed unless the gain is large (stuck
            # platoon); active joiners never weave.
            gain_req[cav & (snap.platoon >= 0)] = \
                lc.a_gain * lc.member_gain_factor
            if coordinator is not None:
                for vid in coordinator.plans:
                    i = snap.id_to_idx.get(vid)
                    if i is not None:
                        cav[i] = False
        subjects = subjects | cav
    sub_idx = np.flatnonzero(subjects)
    if sub_idx.size == 0:
        return []

    gains = np.full((2, n), -np.inf)
    for side_i, delta in enumerate((-1, +1)):  # right first, then left
        target = snap.lane[sub_idx] + delta
        valid = (target >= 0) & (target < cfg.network.lane_count)
        for ln in range(cfg.network.lane_count):
            if policies[ln] != LanePolicy.GENERAL:
                valid &= target != ln
        cand = sub_idx[valid]
        if cand.size == 0:
            continue
        tlane = snap.lane[cand] + delta

        lead = np.full(cand.size, -1, dtype=np.int64)
        rear = np.full(cand.size, -1, dtype=np.int64)
        for ln in np.unique(tlane):
            positions, idx_ln = snap.lane_positions(int(ln))
            if len(idx_ln) == 0:
                continue
            m = tlane == ln
            k = np.searchsorted(positions, snap.pos[cand[m]], side="right")
            lead[m] = np.where(k < len(idx_ln),
                               idx_ln[np.minimum(k, len(idx_ln) - 1)], -1)
            rear[m] = np.where(k > 0, idx_ln[np.maximum(k - 1, 0)], -1)

        has_lead = lead >= 0
        li = np.where(has_lead, lead, 0)
        front_gap = np.where(has_lead,
                             snap.pos[li] - snap.length[li] - snap.pos[cand],
                             np.inf)
        v_lead = np.where(has_lead, snap.speed[li], 0.0)
        a_lead = np.where(has_lead, snap.accel[li], 0.0)
        lead_cav = has_lead & (snap.vclass[li] == int(VehicleClass.CAV))

        has_rear = rear >= 0
        ri = np.where(has_rear, rear, 0)
        rear_gap = np.where(has_rear,
                            snap.pos[cand] - snap.length[cand] - snap.pos[ri],
                            np.inf)
        v_rear = np.where(has_rear, snap.speed[ri], 0.0)
        rear_cav = has_rear & (snap.vclass[ri] == int(VehicleClass.CAV))

        # Anticipated acceleration with the candidate leader.
        a_target = np.empty(cand.size)
        ch = snap.vclass[cand] == int(VehicleClass.HV)
        if ch.any():
            safe_gap = np.where(front_gap[ch] > 0, front_gap[ch], 1.0)
            a_t, _ = kernels.hv_control(
                snap.speed[cand[ch]], snap.v_des[cand[ch]],
                has_lead[ch] & (front_gap[ch] > 0), safe_gap,
                v_lead[ch] - snap.speed[cand[ch]], v_lead[ch], a_lead[ch],
                hp.cc0, hp.cc1, hp.cc2, hp.cc3, hp.cc4, hp.cc5, hp.cc6,
                hp.cc7, hp.cc8, hp.cc9, hp.max_decel, cfg.dt_s)
            a_target[ch] = a_t
        cc = ~ch
        if cc.any():
            safe_gap = np.where(front_gap[cc] > 0, front_gap[cc], 1.0)
            a_t, _ = kernels.cacc_control(
                snap.speed[cand[cc]], snap.v_des[cand[cc]],
                has_lead[cc] & (front_gap[cc] > 0), safe_gap, v_lead[cc],
                a_lead[cc], lead_cav[cc], np.zeros(int(cc.sum())),
                cp.t_cacc, cp.t_acc, cp.s0, cp.a_max, cp.b_des, cp.coolness,
                cp.delta, cp.comm_range, cp.max_decel, -cp.b_des)
            a_target[cc] = a_t

        gain = a_target - accel_now[cand]
        if delta == -1:
            gain = gain + lc.keep_right_bias

        req = kernels.follower_required_decel(
            v_rear, snap.speed[cand], np.where(has_rear, rear_gap, np.inf),
            rear_cav, hp.cc0, hp.cc1, cp.s0, cp.t_acc)
        own_req = kernels.follower_required_decel(
            snap.speed[cand], v_lead, np.where(has_lead, front_gap, np.inf),
            snap.vclass[cand] == int(VehicleClass.CAV),
            hp.cc0, hp.cc1, cp.s0, cp.t_acc)
        safe = ((front_gap > hp.cc0) & (rear_gap > hp.cc0)
                & (req >= lc.b_safe) & (own_req >= lc.b_safe))
        gain = np.where(safe, gain, -np.inf)
        gains[side_i, cand] = gain

    out: list[_FreeChange] = []
    best_side = np.where(gains[0] >= gains[1], 0, 1)  # prefer right on ties
    best_gain = np.take_along_axis(gains, best_side[None, :], axis=0)[0]
    chosen = np.flatnonzero(best_gain > lc.a_gain)
    for i in chosen:
        delta = -1 if best_side[i] == 0 else 1
        out.append(_FreeChange(int(snap.ids[i]), int(snap.lane[i]) + delta))
    return out


def _free_recheck(world: World, snap: WorldSnapshot, i: int,
                  target: int) -> bool:
    cfg = world.cfg
    hp, cp, lc = cfg.hv_params, cfg.cacc_params, cfg.lane_change
    pos_i = float(snap.pos[i])
    lead, rear = snap.neighbors(target, pos_i)
    if lead >= 0:
        front_gap = float(snap.pos[lead] - snap.length[lead]) - pos_i
        if front_gap <= hp.cc0:
            return False
        own = _s.follower_required_decel(
            float(snap.speed[i]), float(snap.speed[lead]), front_gap,
            snap.vclass[i] == int(VehicleClass.CAV),
            hp.cc0, hp.cc1, cp.s0, cp.t_acc)
        if own < lc.b_safe:
            return False
    if rear >= 0:
        rear_gap = pos_i - float(snap.length[i]) - float(snap.pos[rear])
        if rear_gap <= hp.cc0:
            return False
        req = _s.follower_required_decel(
            float(snap.speed[rear]), float(snap.speed[i]), rear_gap,
            snap.vclass[rear] == int(VehicleClass.CAV),
            hp.cc0, hp.cc1, cp.s0, cp.t_acc)
        if req < lc.b_safe:
            return False
    return True


def _commit_join(world: World, snap: WorldSnapshot, req: CommitRequest,
                 coordinator: LocalCoordinator) -> bool:
    cfg = world.cfg
    plan = req.plan
    registry = coordinator.registry
    plat = registry.platoons.get(plan.platoon_id)
    i = snap.id_to_idx.get(plan.joiner)
    if plat is None or i is None or len(plat.members) >= cfg.cacc_params.phi_max:
        return False
    if plan.join_kind == JoinKind.IN_LANE_REAR:
        lead = int(snap.leader_idx[i])
        if lead < 0 or int(snap.ids[lead]) != plat.members[-1]:
            return False
        if float(snap.net_gap[i]) > cfg.cacc_params.d_front:
            return False
        members = plat.members + (plan.joiner,)
    else:
        verdict = evaluate_gaps(plan.joiner, plan, snap, registry,
                                cfg.cacc_params,
                                b_safe=cfg.lane_change.b_safe,
                                accept_factor=cfg.coordination.gap_accept_factor,
                                accept_factor_cacc=cfg.coordination.gap_accept_factor_cacc,
                                t_gap_make=cfg.coordination.t_gap_make)
        if verdict != GapVerdict.GAPS_OK:
            return False
        k = insertion_index(plat, snap, float(snap.pos[i]))
        members = plat.members[:k] + (plan.joiner,) + plat.members[k:]
        world.fleet.lane[i] = np.int16(req.target_lane)
        world.invalidate()
    registry.update(_dc_replace(plat, members=members, pending_join=None))
    return True


def _commit_phase(world: World, requests: list,
                  coordinator: Optional[LocalCoordinator]) -> None:
    if not requests:
        return
    requests.sort(key=lambda r: r.vehicle_id)
    for r in requests:
        snap = world.snapshot()
        if isinstance(r, CommitRequest):
            ok = _commit_join(world, snap, r, coordinator)
            coordinator.finish_commit(r.plan, world.time, ok)
        else:
            if coordinator is not None and r.vehicle_id in coordinator.plans:
                continue  # a join created this step takes precedence
            i = snap.id_to_idx.get(r.vehicle_id)
            if i is None:
                continue
            if _free_recheck(world, snap, i, r.target_lane):
                world.fleet.lane[i] = np.int16(r.target_lane)
                world.invalidate()


def _audit_gaps(world: World, snap: WorldSnapshot) -> None:
    bad = np.flatnonzero(snap.net_gap <= 0.0)
    if bad.size:
        details = []
        for i in bad:
            li = int(snap.leader_idx[i])
            details.append({
                "follower_id": int(snap.ids[i]),
                "leader_id": int(snap.ids[li]),
                "lane": int(snap.lane[i]),
                "net_gap": float(snap.net_gap[i]),
            })
        raise GapViolationError(world.time, details)


class _Recorder:
    def __init__(self, cfg: ScenarioConfig):
        self.cfg = cfg
        self.parts: list[TrajectoryFrame] = []

    def record(self, world: World, snap: WorldSnapshot, t: float) -> None:
        if snap.n == 0:
            return
        cfg = self.cfg
        hp, cp = cfg.hv_params, cfg.cacc_params
        lead = snap.leader_idx
        has = lead >= 0
        li = np.where(has, lead, 0)
        gap = np.where(has, snap.net_gap, np.nan)
        v_lead = np.where(has, snap.speed[li], 0.0)
        leader_id = np.where(has, snap.ids[li], -1)
        leader_cls = np.where(has, snap.vclass[li], -1).astype(np.int8)

        hv = snap.vclass == int(VehicleClass.HV)
        state = kernels.hv_classify_only(
            snap.speed, has, np.where(has, gap, 1.0), v_lead - snap.speed,
            v_lead, hp.cc0, hp.cc1, hp.cc2, hp.cc3, hp.cc4, hp.cc5, hp.cc6)
        state = np.where(hv, state, -1).astype(np.int8)

        cav = ~hv
        cacc = cav & has & (leader_cls == int(VehicleClass.CAV)) \
            & (np.where(has, gap, np.inf) <= cp.comm_range)
        mode = np.where(hv, int(CaccMode.HUMAN),
                        np.where(cacc, int(CaccMode.CACC),
                                 int(CaccMode.ACC))).astype(np.int8)

        self.parts.append(TrajectoryFrame(
            time=np.full(snap.n, t),
            veh_id=snap.ids.copy(),
            vclass=snap.vclass.copy(),
            lane=snap.lane.copy(),
            pos=snap.pos.copy(),
            speed=snap.speed.copy(),
            accel=snap.accel.copy(),
            leader_id=leader_id.astype(np.int64),
            leader_class=leader_cls,
            net_gap=gap,
            state=state,
            platoon_id=snap.platoon.copy(),
            cacc_mode=mode,
        ))

    def frame(self) -> TrajectoryFrame:
        return TrajectoryFrame.concat(self.parts)


def step(world: World, coordinator: Optional[LocalCoordinator],
         recorder: Optional[_Recorder]) -> None:
    """Advance the world by one dt; see module docstring for phase order."""
    cfg = world.cfg
    dt = cfg.dt_s
    t = world.time
    rec_every = int(round(cfg.record_interval_s / dt))
    n_steps = int(round(cfg.duration_s / dt))
    lc_every = max(1, int(round(cfg.lane_change.period_s / dt)))
    scan_every = max(1, int(round(cfg.coordination.scan_period_s / dt)))

    _inject_demand(world, t)
    f = world.fleet
    n = len(f)
    if n:
        snap = world.snapshot()

        accel = np.zeros(n)
        state = np.full(n, -1, dtype=np.int8)
        mode = np.zeros(n, dtype=np.int8)
        t_override = np.zeros(n)
        if coordinator is not None and coordinator.gap_override:
            for vid, tg in coordinator.gap_override.items():
                i = snap.id_to_idx.get(vid)
                if i is not None:
                    t_override[i] = tg

        hv_mask = f.vclass == int(VehicleClass.HV)
        _hv_control(world, snap, hv_mask, accel, state)
        _cav_control(world, snap, ~hv_mask, t_override, accel, mode)
        if coordinator is not None:
            _pace_joiners(world, snap, coordinator, accel)

        requests: list = []
        if world.step_idx % lc_every == 0:
            requests.extend(_free_lane_changes(world, snap, accel,
                                               coordinator))
        if coordinator is not None and world.step_idx % scan_every == 0:
            requests.extend(coordinator.tick(snap))
            requests.extend(coordinator.scan_free_agents(snap))

        _commit_phase(world, requests, coordinator)

        # Integration: trapezoidal position update with speed floor at 0.
        v0 = f.speed
        v1 = np.maximum(0.0, v0 + accel * dt)
        dx = 0.5 * (v0 + v1) * dt
        f.pos += dx
        f.speed = v1
        f.accel = accel
        if t >= cfg.warmup_s:
            world.vmt_m += float(dx.sum())
            world.vht_s += n * dt
        world.invalidate()

        # Exit removal at the corridor end.
        gone = f.pos > cfg.network.length
        n_gone = int(gone.sum())
        if n_gone:
            world.exited += n_gone
            if t >= cfg.warmup_s:
                world.exited_post_warmup += n_gone
            f.keep(~gone)
            world.invalidate()

        post = world.snapshot()
        maintain_platoons(world.registry, post, cfg.cacc_params.comm_range,
                          world.events)
        post.platoon = np.array(
            [world.registry.membership.get(int(i), -1) for i in f.ids],
            dtype=np.int64)

        _audit_gaps(world, post)

        t_next = (world.step_idx + 1) * dt
        if (recorder is not None and (world.step_idx + 1) % rec_every == 0
                and t_next >= cfg.warmup_s - 1e-9
                and world.step_idx + 1 < n_steps):
            recorder.record(world, post, t_next)

    assert world.entered == world.exited + len(world.fleet), \
        "conservation violated"
    world.step_idx += 1


def run_scenario(cfg: ScenarioConfig, seed: int,
                 initial_vehicles: Iterable[VehicleState] = (),
                 initial_platoons: Iterable[tuple[int, ...]] = (),
                 collect: bool = True) -> RunResult:
    """Execute duration_s/dt_s steps and return the trajectory stream,
    coordination event log, and the run summary."""
    violations = validate_config(cfg)
    if violations:
        raise ConfigError("; ".join(violations))

    world = World(cfg, seed, initial_vehicles, initial_platoons)
    coordinator = None
    if cfg.strategy == Strategy.LOCAL_COORD:
        coordinator = LocalCoordinator(cfg.cacc_params, cfg.coordination,
                                       world.registry,
                                       cfg.network.lane_policies,
                                       b_safe=cfg.lane_change.b_safe)
    recorder = _Recorder(cfg) if collect else None
    n_steps = int(round(cfg.duration_s / cfg.dt_s))
    for _ in range(n_steps):
        step(world, coordinator, recorder)

    if coordinator is not None:
        world.events.extend(coordinator.events)
        world.events.sort(key=lambda e: (e[0], e[1], e[2]))

    window_h = (cfg.duration_s - cfg.warmup_s) / 3600.0
    vmt_km = world.vmt_m / 1000.0
    vht_h = world.vht_s / 3600.0
    summary = RunSummary(
        entered=world.entered,
        exited=world.exited,
        present=len(world.fleet),
        exited_post_warmup=world.exited_post_warmup,
        vmt_km=vmt_km,
        vht_h=vht_h,
        q_kmh=(vmt_km / vht_h) if vht_h > 0 else None,
        throughput_vph=world.exited_post_warmup / window_h,
    )
    frame = recorder.frame() if recorder is not None else _empty_frame()
    return RunResult(frame=frame, events=world.events, summary=summary,
                     strategy=cfg.strategy, mpr=cfg.mpr, seed=seed)


def write_events_csv(events: list, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("time,event,joiner,platoon,join_kind\n")
        for t, name, joiner, platoon, kind in events:
            fh.write(f"{t:.1f},{name},{joiner},{platoon},{kind}\n")
