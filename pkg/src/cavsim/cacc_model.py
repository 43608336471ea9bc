"""Longitudinal control for CAVs: IDM blended with a constant-acceleration
heuristic via a coolness factor, plus CACC/ACC gap-mode selection.

The controller runs CACC (short time gap) only while the immediate leader
is a connected vehicle within V2V range; otherwise it degrades to ACC.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

from .core import CaccMode, CaccParams, VehicleClass, VehicleState
from .kernels import scalar as _s


@dataclass(frozen=True)
class EidmInputs:
    """One controller evaluation point. ``s`` is the net gap to the leader."""

    v: float
    v_lead: float
    a_lead: float
    s: float
    v_des: float
    gap_mode: CaccMode = CaccMode.ACC

    def __post_init__(self):
        if self.s <= 0:
            raise ValueError("net gap s must be > 0")
        if self.v < 0 or self.v_lead < 0:
            raise ValueError("speeds must be >= 0")


def _time_gap(mode: CaccMode, p: CaccParams) -> float:
    return p.t_cacc if mode == CaccMode.CACC else p.t_acc


def desired_gap(v: float, v_lead: float, t_gap: float, p: CaccParams) -> float:
    """Equilibrium-plus-approach desired gap s*.

    The interaction term is clamped at zero so a faster leader never pulls
    the desired gap below the equilibrium value.
    """
    return _s.desired_gap(v, v_lead, t_gap, p.s0, p.a_max, p.b_des)


def idm_acceleration(inputs: EidmInputs, p: CaccParams) -> float:
    """Base IDM term: free-road drive toward v_des minus the gap deficit."""
    return _s.idm_accel(inputs.v, inputs.v_des, inputs.s, inputs.v_lead,
                        _time_gap(inputs.gap_mode, p), p.s0, p.a_max,
                        p.b_des, p.delta)


def cah_acceleration(inputs: EidmInputs, a_self: float, p: CaccParams) -> float:
    """Constant-acceleration heuristic with a_tilde = min(a_lead, a_self).

    Falls back to the second branch when the first branch's denominator is
    near-singular (|v_lead^2 - 2 s a_tilde| < 1e-9).
    """
    return _s.cah_accel(inputs.v, inputs.v_lead, inputs.a_lead, inputs.s,
                        a_self)


def eidm_acceleration(inputs: EidmInputs, p: CaccParams) -> float:
    """Full controller output, clamped to vehicle capability
    [max_decel, a_max]."""
    return _s.eidm_accel(inputs.v, inputs.v_des, inputs.s, inputs.v_lead,
                         inputs.a_lead, _time_gap(inputs.gap_mode, p),
                         p.s0, p.a_max, p.b_des, p.coolness, p.delta,
                         p.max_decel)


def free_acceleration(v: float, v_des: float, p: CaccParams) -> float:
    """Leader-free limit: the interaction terms are dropped."""
    return _s.free_accel(v, v_des, p.a_max, p.delta, p.max_decel)


def select_gap_mode(subject: VehicleState, leader: Optional[VehicleState],
                    same_platoon: bool, p: CaccParams) -> CaccMode:
    """CACC iff the immediate leader is a CAV within communication range;
    ACC otherwise (including free driving).

    ``same_platoon`` is carried for interface completeness; the decision is
    leader-class and range only.
    """
    if subject.vclass != VehicleClass.CAV:
        raise ValueError("gap-mode selection applies to CAVs only")
    if leader is None or leader.vclass != VehicleClass.CAV:
        return CaccMode.ACC
    gap = leader.position - leader.length - subject.position
    if gap <= p.comm_range:
        return CaccMode.CACC
    return CaccMode.ACC
