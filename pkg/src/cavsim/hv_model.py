"""Psycho-physiological car following for human-driven vehicles.

Perceptual thresholds partition the (speed difference, gap) plane into the
free / close-up / follow / brake-before / brake-after regimes; each regime
has its own acceleration law. Sign convention throughout:
dv = leader_speed - follower_speed, so closing means dv < 0.

The stochastic slower-speed interpolation of the published open
formulation is removed (v_ref = min(v, leader_speed)) to keep the model
deterministic and testable.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Optional

from .core import (HvParams, InteractionState, LanePolicy, LaneChangeParams,
                   VehicleClass)
from .kernels import scalar as _s

# Saturated-PD gains of the FOLLOW regime (see kernels.scalar).
FOLLOW_KP = _s.FOLLOW_KP
FOLLOW_KD = _s.FOLLOW_KD


@dataclass(frozen=True)
class LeaderObservation:
    """What the follower perceives about its immediate leader.

    ``net_gap`` is leader rear bumper minus follower front bumper and must
    be positive for any valid observation.
    """

    net_gap: float
    dv: float
    leader_accel: float
    leader_speed: float
    leader_class: VehicleClass = VehicleClass.HV

    def __post_init__(self):
        if self.net_gap <= 0:
            raise ValueError("net_gap must be > 0")


@dataclass(frozen=True)
class W99Thresholds:
    sdxc: float  # safe following distance [m]
    sdxo: float  # max following distance [m]
    sdxv: float  # perception distance while closing [m]
    sdv: float   # closing perception [m/s]
    sdvc: float  # closing-action threshold [m/s]
    sdvo: float  # opening threshold [m/s]


def w99_thresholds(obs: LeaderObservation, v: float, p: HvParams) -> W99Thresholds:
    sdxc, sdxo, sdxv, sdv, sdvc, sdvo = _s.w99_thresholds(
        v, obs.net_gap, obs.dv, obs.leader_speed,
        p.cc0, p.cc1, p.cc2, p.cc3, p.cc4, p.cc5, p.cc6)
    return W99Thresholds(sdxc, sdxo, sdxv, sdv, sdvc, sdvo)


def classify_state(obs: Optional[LeaderObservation], v: float,
                   thr: Optional[W99Thresholds]) -> InteractionState:
    """Map one observation to its interaction state; no leader means FREE."""
    if obs is None:
        return InteractionState.FREE
    if thr is None:
        raise ValueError("thresholds required when a leader is observed")
    code = _s.classify(obs.net_gap, obs.dv, thr.sdxc, thr.sdxo, thr.sdxv,
                       thr.sdvc, thr.sdvo)
    return InteractionState(code)


def hv_acceleration(obs: Optional[LeaderObservation], v: float, v_des: float,
                    state: InteractionState, p: HvParams,
                    dt: float = 0.1) -> float:
    """Acceleration command for one HV; always within [max_decel, cc8].

    ``dt`` caps the free/follow acceleration so the desired speed is never
    overshot within one step.
    """
    if obs is None or state == InteractionState.FREE:
        return _s.hv_accel(_s.FREE, v, v_des, 0.0, 0.0, 0.0, 0.0, 0.0,
                           p.cc7, p.cc8, p.cc9, p.max_decel, dt)
    thr = w99_thresholds(obs, v, p)
    return _s.hv_accel(int(state), v, v_des, obs.net_gap, obs.dv,
                       obs.leader_accel, thr.sdxc, thr.sdxo,
                       p.cc7, p.cc8, p.cc9, p.max_decel, dt)


@dataclass(frozen=True)
class NeighborVehicle:
    """Adjacent-lane vehicle as seen from the subject's lateral projection;
    ``gap`` is the projected net gap to the subject."""

    gap: float
    speed: float
    accel: float
    vclass: VehicleClass


@dataclass(frozen=True)
class LaneNeighbors:
    leader: Optional[NeighborVehicle] = None
    follower: Optional[NeighborVehicle] = None


def _anticipated_accel(leader: Optional[NeighborVehicle], v: float,
                       v_des: float, p: HvParams, dt: float) -> float:
    if leader is None or leader.gap <= 0:
        if leader is not None:
            return -math.inf  # overlapping projection: never attractive
        return hv_acceleration(None, v, v_des, InteractionState.FREE, p, dt)
    obs = LeaderObservation(net_gap=leader.gap, dv=leader.speed - v,
                            leader_accel=leader.accel,
                            leader_speed=leader.speed)
    thr = w99_thresholds(obs, v, p)
    return hv_acceleration(obs, v, v_des, classify_state(obs, v, thr), p, dt)


def follower_required_decel(v_follower: float, v_subject: float,
                            rear_gap: float, follower_class: VehicleClass,
                            p: HvParams, s0: float = 1.0,
                            t_acc: float = 0.9) -> float:
    """Deceleration the prospective new follower needs to restore its safe
    gap; -inf when the slot already violates it."""
    return _s.follower_required_decel(
        v_follower, v_subject, rear_gap,
        follower_class == VehicleClass.CAV, p.cc0, p.cc1, s0, t_acc)


def hv_lane_change_decision(v: float, v_des: float, lane: int,
                            neighbors: Mapping[int, LaneNeighbors],
                            policies: tuple[LanePolicy, ...],
                            p: HvParams, lc: LaneChangeParams,
                            dt: float = 0.1) -> Optional[int]:
    """Free (discretionary) lane change: returns the chosen adjacent lane
    or None.

    Incentive: the anticipated acceleration gain in the target lane (plus
    the keep-right bonus when moving right) must exceed ``a_gain``.
    Safety: the new follower's required deceleration stays above
    ``b_safe`` and the subject's projected gaps both clear cc0.
    """
    current = neighbors.get(lane, LaneNeighbors())
    a_now = _anticipated_accel(current.leader, v, v_des, p, dt)

    best_lane = None
    best_gain = lc.a_gain
    for target in (lane - 1, lane + 1):
        if target < 0 or target >= len(policies):
            continue
        if policies[target] != LanePolicy.GENERAL:
            continue
        if target not in neighbors:
            continue
        side = neighbors[target]
        lead, follow = side.leader, side.follower
        if lead is not None and lead.gap <= p.cc0:
            continue
        if follow is not None:
            if follow.gap <= p.cc0:
                continue
            req = follower_required_decel(follow.speed, v, follow.gap,
                                          follow.vclass, p)
            if req < lc.b_safe:
                continue
        gain = _anticipated_accel(lead, v, v_des, p, dt) - a_now
        if target < lane:  # moving right
            gain += lc.keep_right_bias
        if gain > best_gain:
            best_gain = gain
            best_lane = target
    return best_lane
