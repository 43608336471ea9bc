"""Platoon lifecycle and clustering strategies.

Ad hoc: platoons arise only from random adjacency; no clustering lane
changes are ever issued. Local coordination: free-agent CAVs scan nearby
lanes for platoons or other free CAVs, request cooperative gaps, and join
via FRONT / MID / REAR lane changes or an in-lane rear attach.

All mutations are engine-owned and single-writer: strategies run in the
decision phase against a frozen snapshot and return commit requests that
the engine serializes by vehicle id.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .core import (CaccParams, CoordinationParams, JoinKind, Platoon,
                   VehicleClass)
from .kernels import scalar as _s


class PlanState(str, enum.Enum):
    SCANNING = "SCANNING"
    GAP_REQUESTED = "GAP_REQUESTED"
    CHANGING = "CHANGING"
    COMPLETE = "COMPLETE"
    ABORTED = "ABORTED"


class GapVerdict(str, enum.Enum):
    GAPS_OK = "GAPS_OK"
    NEED_GAP = "NEED_GAP"
    UNSAFE = "UNSAFE"


@dataclass
class JoinPlan:
    joiner: int
    platoon_id: int
    join_kind: JoinKind
    target_lane: int
    gap_maker: Optional[int] = None
    state: PlanState = PlanState.SCANNING
    deadline: float = math.inf


@dataclass(frozen=True)
class ScanResult:
    platoon_id: Optional[int]   # set when the target is an existing platoon
    free_cav_id: Optional[int]  # set when the target is a free CAV
    join_kind: JoinKind
    target_lane: int


@dataclass(frozen=True)
class CommitRequest:
    """A serialized-phase request: a clustering lane change (or in-lane
    roster attach) belonging to one join plan."""

    vehicle_id: int
    target_lane: int
    plan: JoinPlan


class WorldSnapshot:
    """Read-only per-step view of the fleet: position-sorted per-lane
    indices plus same-lane leader relations."""

    def __init__(self, time: float, ids, vclass, lane, pos, speed, accel,
                 length, v_des, platoon, lane_count: int):
        self.time = time
        self.ids = ids
        self.vclass = vclass
        self.lane = lane
        self.pos = pos
        self.speed = speed
        self.accel = accel
        self.length = length
        self.v_des = v_des
        self.platoon = platoon
        self.n = len(ids)
        self.lane_count = lane_count

        order = np.lexsort((pos, lane))
        self.order = order
        lane_sorted = lane[order]
        self._lane_bounds = {}
        for ln in range(lane_count):
            lo = np.searchsorted(lane_sorted, ln, side="left")
            hi = np.searchsorted(lane_sorted, ln, side="right")
            self._lane_bounds[ln] = (int(lo), int(hi))

        leader = np.full(self.n, -1, dtype=np.int64)
        follower = np.full(self.n, -1, dtype=np.int64)
        if self.n > 1:
            same = lane_sorted[:-1] == lane_sorted[1:]
            leader[order[:-1][same]] = order[1:][same]
            follower[order[1:][same]] = order[:-1][same]
        self.leader_idx = leader
        self.follower_idx = follower

        net_gap = np.full(self.n, np.nan)
        has = leader >= 0
        li = leader[has]
        net_gap[has] = pos[li] - length[li] - pos[has]
        self.net_gap = net_gap

        self.id_to_idx = {int(v): i for i, v in enumerate(ids)}

    def lane_positions(self, ln: int):
        lo, hi = self._lane_bounds[ln]
        idx = self.order[lo:hi]
        return self.pos[idx], idx

    def neighbors(self, ln: int, x: float) -> tuple[int, int]:
        """(leader_idx, follower_idx) around position x in lane ln;
        -1 when absent. Ties count as followers."""
        positions, idx = self.lane_positions(ln)
        k = int(np.searchsorted(positions, x, side="right"))
        lead = int(idx[k]) if k < len(idx) else -1
        rear = int(idx[k - 1]) if k > 0 else -1
        return lead, rear

    def window(self, ln: int, lo: float, hi: float) -> np.ndarray:
        """Indices of vehicles in lane ln with position in [lo, hi],
        ascending by position."""
        positions, idx = self.lane_positions(ln)
        a = int(np.searchsorted(positions, lo, side="left"))
        b = int(np.searchsorted(positions, hi, side="right"))
        return idx[a:b]


class PlatoonRegistry:
    """Engine-owned platoon rosters; vehicle ids appear in at most one
    platoon network-wide."""

    def __init__(self):
        self.platoons: dict[int, Platoon] = {}
        self.membership: dict[int, int] = {}
        self._next_id = 1

    def create(self, members: tuple[int, ...],
               pending_join=None) -> Platoon:
        for m in members:
            if m in self.membership:
                raise ValueError(f"vehicle {m} already belongs to a platoon")
        p = Platoon(id=self._next_id, members=tuple(members),
                    pending_join=pending_join)
        self._next_id += 1
        self.platoons[p.id] = p
        for m in members:
            self.membership[m] = p.id
        return p

    def update(self, p: Platoon) -> None:
        old = self.platoons[p.id]
        for m in old.members:
            self.membership.pop(m, None)
        for m in p.members:
            if self.membership.get(m, p.id) != p.id:
                raise ValueError(f"vehicle {m} already belongs to a platoon")
            self.membership[m] = p.id
        self.platoons[p.id] = p

    def remove(self, pid: int) -> None:
        p = self.platoons.pop(pid)
        for m in p.members:
            self.membership.pop(m, None)

    def of_vehicle(self, vid: int) -> Optional[Platoon]:
        pid = self.membership.get(vid)
        return self.platoons[pid] if pid is not None else None


def _lane_allowed_for_cav(policies, ln: int) -> bool:
    return policies[ln].value != "CLOSED"


def scan_for_platoon(subject_id: int, snap: WorldSnapshot,
                     registry: PlatoonRegistry, p: CaccParams,
                     policies, blocked: frozenset = frozenset()
                     ) -> Optional[ScanResult]:
    """Nearest eligible clustering target around a free-agent CAV.

    Searches the same lane ahead and both adjacent lanes within
    [-d_rear, +d_front] of the subject's lateral projection. Platoons must
    have spare capacity and no join in flight; ``blocked`` holds vehicle
    ids that already participate in a plan or sit in a cooldown.
    """
    i = snap.id_to_idx[subject_id]
    lane_i = int(snap.lane[i])
    pos_i = float(snap.pos[i])

    candidates: list[tuple[float, int, JoinKind, int]] = []

    # Same lane: only the immediate leader can be attached to.
    lead = int(snap.leader_idx[i])
    if lead >= 0 and snap.vclass[lead] == VehicleClass.CAV:
        gap = float(snap.net_gap[i])
        if 0.0 < gap <= p.d_front:
            lead_id = int(snap.ids[lead])
            plat = registry.of_vehicle(lead_id)
            ok = False
            if plat is None:
                ok = lead_id not in blocked
            else:
                ok = (len(plat.members) < p.phi_max
                      and plat.pending_join is None
                      and plat.members[-1] == lead_id)
            if ok:
                candidates.append((gap, lead_id, JoinKind.IN_LANE_REAR, lane_i))

    for ln in (lane_i - 1, lane_i + 1):
        if ln < 0 or ln >= snap.lane_count:
            continue
        if not _lane_allowed_for_cav(policies, ln):
            continue
        for j in snap.window(ln, pos_i - p.d_rear, pos_i + p.d_front):
            j = int(j)
            if snap.vclass[j] != VehicleClass.CAV:
                continue
            cand_id = int(snap.ids[j])
            dist = abs(float(snap.pos[j]) - pos_i)
            plat = registry.of_vehicle(cand_id)
            if plat is None:
                if cand_id in blocked:
                    continue
                kind = JoinKind.FRONT if pos_i > snap.pos[j] else JoinKind.REAR
                candidates.append((dist, cand_id, kind, ln))
            else:
                if len(plat.members) >= p.phi_max or plat.pending_join is not None:
                    continue
                head = snap.id_to_idx.get(plat.members[0])
                tail = snap.id_to_idx.get(plat.members[-1])
                if head is None or tail is None:
                    continue
                if pos_i > snap.pos[head]:
                    kind = JoinKind.FRONT
                elif pos_i < snap.pos[tail]:
                    kind = JoinKind.REAR
                else:
                    kind = JoinKind.MID
                candidates.append((dist, cand_id, kind, ln))

    if not candidates:
        return None
    dist, target_id, kind, ln = min(candidates, key=lambda c: (c[0], c[1]))
    plat = registry.of_vehicle(target_id)
    if plat is not None:
        return ScanResult(plat.id, None, kind, ln)
    return ScanResult(None, target_id, kind, ln)


def evaluate_gaps(subject_id: int, plan: JoinPlan, snap: WorldSnapshot,
                  registry: PlatoonRegistry, p: CaccParams,
                  thresholds: Optional[tuple[float, float]] = None,
                  b_safe: float = -3.0,
                  accept_factor: float = 1.0,
                  accept_factor_cacc: Optional[float] = None,
                  t_gap_make: Optional[float] = None) -> GapVerdict:
    """Check the projected front/rear gaps in the target lane.

    Default thresholds are speed-dependent desired gaps: partners that are
    members of the target platoon will run CACC against the joiner and use
    the intra-platoon time gap, foreign partners the degraded one. The
    accept factors scale the time-gap term (per partner class); below 1.0
    the joiner takes a sub-equilibrium slot and the partner recovers
    afterwards, still bounded by the ``b_safe`` deceleration veto.

    NEED_GAP is returned only for a MID join whose slot can plausibly be
    widened to the thresholds by a member opening to ``t_gap_make``.
    """
    i = snap.id_to_idx[subject_id]
    pos_i = float(snap.pos[i])
    v_i = float(snap.speed[i])
    len_i = float(snap.length[i])
    plat = registry.platoons.get(plan.platoon_id)
    members = set(plat.members) if plat is not None else set()
    if accept_factor_cacc is None:
        accept_factor_cacc = accept_factor

    def factor(idx: int) -> float:
        if snap.vclass[idx] == VehicleClass.CAV:
            return accept_factor_cacc
        return accept_factor

    lead, rear = snap.neighbors(plan.target_lane, pos_i)

    front_gap = math.inf
    g_front_min = 0.0
    if lead >= 0:
        front_gap = float(snap.pos[lead] - snap.length[lead]) - pos_i
        t_front = p.t_cacc if int(snap.ids[lead]) in members else p.t_acc
        g_front_min = _s.desired_gap(v_i, float(snap.speed[lead]),
                                     accept_factor_cacc * t_front, p.s0,
                                     p.a_max, p.b_des)
    rear_gap = math.inf
    g_rear_min = 0.0
    req_decel = 0.0
    if rear >= 0:
        rear_gap = pos_i - len_i - float(snap.pos[rear])
        t_rear = p.t_cacc if int(snap.ids[rear]) in members else p.t_acc
        g_rear_min = _s.desired_gap(float(snap.speed[rear]), v_i,
                                    factor(rear) * t_rear, p.s0,
                                    p.a_max, p.b_des)
        req_decel = _s.follower_required_decel(
            float(snap.speed[rear]), v_i, rear_gap,
            snap.vclass[rear] == VehicleClass.CAV,
            1.5, 0.9, p.s0, p.t_acc)

    if thresholds is not None:
        g_front_min, g_rear_min = thresholds

    if front_gap <= 0 or rear_gap <= 0:
        return GapVerdict.UNSAFE
    if front_gap >= g_front_min and rear_gap >= g_rear_min and req_decel >= b_safe:
        return GapVerdict.GAPS_OK
    if plan.join_kind == JoinKind.MID and rear_gap < g_rear_min:
        if plat is not None and _member_behind(plat, snap, pos_i) is not None:
            if t_gap_make is not None:
                # The widened slot must have room for the joiner plus both
                # threshold gaps, else the request would only waste time.
                slot = p.s0 + t_gap_make * v_i
                if g_front_min + g_rear_min + len_i > slot:
                    return GapVerdict.UNSAFE
            return GapVerdict.NEED_GAP
    return GapVerdict.UNSAFE


def _member_behind(plat: Platoon, snap: WorldSnapshot,
                   x: float) -> Optional[int]:
    """Nearest platoon member behind position x (the gap-maker candidate)."""
    best = None
    best_pos = -math.inf
    for m in plat.members:
        j = snap.id_to_idx.get(m)
        if j is None:
            continue
        pm = float(snap.pos[j])
        if pm < x and pm > best_pos:
            best, best_pos = m, pm
    return best


def request_gap(plan: JoinPlan, snap: WorldSnapshot,
                registry: PlatoonRegistry, coord: CoordinationParams
                ) -> Optional[int]:
    """Pick the nearest member behind the projected slot as gap maker and
    arm the plan deadline. Returns the gap maker id (None aborts)."""
    plat = registry.platoons.get(plan.platoon_id)
    if plat is None:
        return None
    i = snap.id_to_idx[plan.joiner]
    gm = _member_behind(plat, snap, float(snap.pos[i]))
    if gm is None:
        return None
    plan.gap_maker = gm
    plan.state = PlanState.GAP_REQUESTED
    plan.deadline = snap.time + coord.join_timeout_s
    registry.update(replace(plat, pending_join=(plan.joiner, plan.join_kind, gm)))
    return gm


def insertion_index(plat: Platoon, snap: WorldSnapshot, joiner_pos: float) -> int:
    """Roster index keeping members in strictly decreasing position order."""
    for k, m in enumerate(plat.members):
        j = snap.id_to_idx.get(m)
        if j is not None and joiner_pos > float(snap.pos[j]):
            return k
    return len(plat.members)


class LocalCoordinator:
    """Per-run state machine driving local coordination.

    Owns the active join plans, per-vehicle cooldowns and the gap-maker
    time-gap overrides the engine feeds into the CACC kernel.
    """

    def __init__(self, cacc: CaccParams, coord: CoordinationParams,
                 registry: PlatoonRegistry, policies,
                 b_safe: float = -3.0):
        self.cacc = cacc
        self.coord = coord
        self.registry = registry
        self.policies = policies
        self.b_safe = b_safe
        self.plans: dict[int, JoinPlan] = {}
        self.cooldown_until: dict[int, float] = {}
        self.gap_override: dict[int, float] = {}
        self.events: list[tuple] = []

    # -- event helpers ----------------------------------------------------
    def _event(self, t, name, joiner=-1, platoon=-1, kind=""):
        self.events.append((t, name, joiner, platoon, kind))

    def _abort(self, plan: JoinPlan, t: float, cooldown: bool = True):
        plan.state = PlanState.ABORTED
        if plan.gap_maker is not None:
            self.gap_override.pop(plan.gap_maker, None)
        plat = self.registry.platoons.get(plan.platoon_id)
        if plat is not None:
            if len(plat.members) == 1 and plat.pending_join is not None:
                # Forming singleton that never materialized.
                self.registry.remove(plat.id)
            else:
                self.registry.update(replace(plat, pending_join=None))
        if cooldown:
            self.cooldown_until[plan.joiner] = t + self.coord.abort_cooldown_s
        self._event(t, "ABORT", plan.joiner, plan.platoon_id,
                    plan.join_kind.value)
        self.plans.pop(plan.joiner, None)

    # -- main per-tick entry ----------------------------------------------
    def tick(self, snap: WorldSnapshot) -> list[CommitRequest]:
        """Progress plans whose cooperative gap is forming."""
        requests: list[CommitRequest] = []
        t = snap.time

        for joiner in sorted(self.plans):
            plan = self.plans[joiner]
            if joiner not in snap.id_to_idx:
                self._abort(plan, t, cooldown=False)
                continue
            plat = self.registry.platoons.get(plan.platoon_id)
            if (plat is None or plat.pending_join is None
                    or plat.pending_join[0] != joiner
                    or len(plat.members) >= self.cacc.phi_max):
                self._abort(plan, t)
                continue
            if t > plan.deadline:
                self._abort(plan, t)
                continue
            if plan.state == PlanState.GAP_REQUESTED:
                gm_idx = snap.id_to_idx.get(plan.gap_maker)
                if gm_idx is None or plan.gap_maker not in plat.members:
                    self._abort(plan, t)
                    continue
            verdict = evaluate_gaps(joiner, plan, snap, self.registry,
                                    self.cacc, b_safe=self.b_safe,
                                    accept_factor=self.coord.gap_accept_factor,
                                    accept_factor_cacc=self.coord.gap_accept_factor_cacc,
                                    t_gap_make=self.coord.t_gap_make)
            if verdict == GapVerdict.GAPS_OK:
                plan.state = PlanState.CHANGING
                requests.append(CommitRequest(joiner, plan.target_lane, plan))
        return requests

    def scan_free_agents(self, snap: WorldSnapshot) -> list[CommitRequest]:
        """Scan for clustering opportunities that are actionable now.

        A plan is created only when the projected gaps are already
        acceptable (commit this step) or a platoon member can open them
        (gap request); otherwise the free agent keeps driving and rescans
        at the next cadence tick.
        """
        requests: list[CommitRequest] = []
        t = snap.time
        blocked = frozenset(self.plans)
        cav_ids = np.sort(snap.ids[snap.vclass == int(VehicleClass.CAV)])
        for vid in cav_ids:
            vid = int(vid)
            if vid in self.plans:
                continue
            if self.cooldown_until.get(vid, -math.inf) > t:
                continue
            if vid in self.registry.membership:
                continue
            hit = scan_for_platoon(vid, snap, self.registry, self.cacc,
                                   self.policies, blocked)
            if hit is None:
                continue
            if hit.platoon_id is not None:
                plat = self.registry.platoons[hit.platoon_id]
            else:
                plat = self.registry.create((hit.free_cav_id,))
            plan = JoinPlan(joiner=vid, platoon_id=plat.id,
                            join_kind=hit.join_kind,
                            target_lane=hit.target_lane,
                            deadline=t + self.coord.join_timeout_s)

            if hit.join_kind == JoinKind.IN_LANE_REAR:
                self.registry.update(replace(
                    plat, pending_join=(vid, hit.join_kind, None)))
                self.plans[vid] = plan
                self._event(t, "SCAN", vid, plat.id, hit.join_kind.value)
                plan.state = PlanState.CHANGING
                requests.append(CommitRequest(vid, hit.target_lane, plan))
                blocked = frozenset(self.plans)
                continue

            verdict = evaluate_gaps(vid, plan, snap, self.registry,
                                    self.cacc, b_safe=self.b_safe,
                                    accept_factor=self.coord.gap_accept_factor,
                                    accept_factor_cacc=self.coord.gap_accept_factor_cacc,
                                    t_gap_make=self.coord.t_gap_make)
            if verdict == GapVerdict.UNSAFE:
                # Not actionable: no plan, no cooldown; drop a forming
                # singleton so the target stays available.
                if hit.platoon_id is None:
                    self.registry.remove(plat.id)
                continue
            self.registry.update(replace(
                plat, pending_join=(vid, hit.join_kind, None)))
            self.plans[vid] = plan
            self._event(t, "SCAN", vid, plat.id, hit.join_kind.value)
            if verdict == GapVerdict.GAPS_OK:
                plan.state = PlanState.CHANGING
                requests.append(CommitRequest(vid, hit.target_lane, plan))
            else:  # NEED_GAP
                gm = request_gap(plan, snap, self.registry, self.coord)
                if gm is None:
                    self._abort(plan, t)
                else:
                    self.gap_override[gm] = self.coord.t_gap_make
                    self._event(t, "GAP_REQUEST", vid, plan.platoon_id,
                                plan.join_kind.value)
            blocked = frozenset(self.plans)
        return requests

    def finish_commit(self, plan: JoinPlan, t: float, committed: bool):
        """Engine callback after the serialized commit attempt."""
        if committed:
            plan.state = PlanState.COMPLETE
            if plan.gap_maker is not None:
                self.gap_override.pop(plan.gap_maker, None)
            self._event(t, "COMMIT", plan.joiner, plan.platoon_id,
                        plan.join_kind.value)
            self.plans.pop(plan.joiner, None)
        else:
            plan.state = PlanState.SCANNING
            if plan.gap_maker is not None:
                self.gap_override.pop(plan.gap_maker, None)
                plan.gap_maker = None


def ad_hoc_step(snap: WorldSnapshot) -> list[CommitRequest]:
    """Ad hoc coordination never issues clustering maneuvers; CACC still
    engages whenever a CAV happens to follow another CAV in range."""
    return []


def maintain_platoons(registry: PlatoonRegistry, snap: WorldSnapshot,
                      comm_range: float,
                      events: Optional[list] = None) -> None:
    """Split platoons broken by cut-ins, lane leavers, exits or excessive
    gaps; dissolve singletons (except forming targets with a pending join).
    Idempotent on intact platoons."""
    t = snap.time
    for pid in sorted(registry.platoons):
        plat = registry.platoons.get(pid)
        if plat is None:
            continue
        alive = [m for m in plat.members if m in snap.id_to_idx]
        if not alive:
            registry.remove(pid)
            continue
        alive.sort(key=lambda m: -snap.pos[snap.id_to_idx[m]])

        segments: list[list[int]] = [[alive[0]]]
        for m in alive[1:]:
            j = snap.id_to_idx[m]
            prev = segments[-1][-1]
            k = snap.id_to_idx[prev]
            contiguous = (
                snap.lane[j] == snap.lane[k]
                and int(snap.leader_idx[j]) == k
                and float(snap.net_gap[j]) <= 2.0 * comm_range
            )
            if contiguous:
                segments[-1].append(m)
            else:
                segments.append([m])

        changed = len(segments) > 1 or len(alive) != len(plat.members)
        if len(segments) > 1 and events is not None:
            for seg in segments[1:]:
                events.append((t, "SPLIT", seg[0], pid, ""))

        keep_pending = plat.pending_join if not changed else None
        first = segments[0]
        if len(first) == 1 and not (len(segments) == 1 and keep_pending):
            registry.remove(pid)
            if events is not None:
                events.append((t, "DISSOLVE", first[0], pid, ""))
        elif changed or tuple(first) != plat.members:
            registry.update(replace(plat, members=tuple(first),
                                    pending_join=keep_pending))
        for seg in segments[1:]:
            if len(seg) >= 2:
                registry.create(tuple(seg))
            elif events is not None:
                events.append((t, "DISSOLVE", seg[0], pid, ""))
