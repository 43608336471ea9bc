"""Pure-numpy fallback for the per-step hot kernels.

Vectorized re-expression of the scalar cores; selected with
``CAVSIM_BACKEND=numpy`` or automatically when numba is unavailable.
Must agree with the numba backend bit-for-bit (see tests/test_kernels.py).
"""
from __future__ import annotations

import numpy as np

from .scalar import (ACC, BRAKE_AX, BRAKE_BX, CACC, CLOSE_UP, FOLLOW,
                     FOLLOW_KD, FOLLOW_KP, FREE, TAPER_V_REF)

BACKEND_NAME = "numpy"


def _thresholds(v, gap, dv, v_lead, cc0, cc1, cc2, cc3, cc4, cc5, cc6):
    lead_moving = v_lead > 0.0
    sdxc = np.where(lead_moving, cc0 + cc1 * np.minimum(v, v_lead), cc0)
    sdxo = sdxc + cc2
    sdxv = sdxo + cc3 * (dv - cc4)
    sdv = cc6 * gap * gap * 1e-4
    sdvc = np.where(lead_moving, cc4 - sdv, 0.0)
    sdvo = np.where(v > cc5, sdv + cc5, sdv)
    return sdxc, sdxo, sdxv, sdvc, sdvo


def _classify(gap, dv, sdxc, sdxo, sdxv, sdvc, sdvo):
    state = np.full(gap.shape, FREE, dtype=np.int8)
    follow = (gap <= sdxo) & (sdvc <= dv) & (dv < sdvo)
    state[follow] = FOLLOW
    closing = (gap < sdxv) & (dv < sdvc)
    state[closing & (gap > sdxo)] = CLOSE_UP
    state[closing & (gap <= sdxo)] = BRAKE_BX
    state[gap <= sdxc] = BRAKE_AX
    return state


def hv_control(v, v_des, has_leader, gap, dv, v_lead, a_lead,
               cc0, cc1, cc2, cc3, cc4, cc5, cc6, cc7, cc8, cc9,
               max_decel, dt):
    sdxc, sdxo, sdxv, sdvc, sdvo = _thresholds(
        v, gap, dv, v_lead, cc0, cc1, cc2, cc3, cc4, cc5, cc6)
    state = _classify(gap, dv, sdxc, sdxo, sdxv, sdvc, sdvo)
    state[~has_leader] = FREE

    accel = np.empty(v.shape, dtype=np.float64)

    free = state == FREE
    taper = cc8 + (cc9 - cc8) * np.minimum(v, TAPER_V_REF) / TAPER_V_REF
    accel[free] = np.minimum(taper, (v_des - v) / dt)[free]

    follow = state == FOLLOW
    if follow.any():
        mid = 0.5 * (sdxc + sdxo)
        a_f = np.clip(FOLLOW_KP * (gap - mid) + FOLLOW_KD * dv, -cc7, cc7)
        accel[follow] = np.minimum(a_f, (v_des - v) / dt)[follow]

    approach = (state == CLOSE_UP) | (state == BRAKE_BX)
    if approach.any():
        with np.errstate(divide="ignore"):
            kin = np.where(approach, dv * dv / (2.0 * (sdxc - gap)), 0.0)
        accel[approach] = np.minimum(np.minimum(kin, a_lead), 0.0)[approach]

    emergency = state == BRAKE_AX
    if emergency.any():
        with np.errstate(divide="ignore"):
            kin = np.where(gap > 1e-12, -(dv * dv) / (2.0 * gap), max_decel)
        kin = np.where(dv < 0.0, kin, 0.0)
        accel[emergency] = np.minimum(np.minimum(kin, a_lead - cc7), 0.0)[emergency]

    return np.clip(accel, max_decel, cc8), state


def hv_classify_only(v, has_leader, gap, dv, v_lead,
                     cc0, cc1, cc2, cc3, cc4, cc5, cc6):
    sdxc, sdxo, sdxv, sdvc, sdvo = _thresholds(
        v, gap, dv, v_lead, cc0, cc1, cc2, cc3, cc4, cc5, cc6)
    state = _classify(gap, dv, sdxc, sdxo, sdxv, sdvc, sdvo)
    state[~has_leader] = FREE
    return state


def _desired_gap(v, v_lead, t_gap, s0, a_max, b_des):
    dyn = v * (v - v_lead) / (2.0 * np.sqrt(a_max * b_des))
    return s0 + v * t_gap + np.maximum(dyn, 0.0)


def _eidm(v, v_des, s, v_lead, a_lead, t_gap, s0, a_max, b_des,
          coolness, delta, cap_lo):
    ss = _desired_gap(v, v_lead, t_gap, s0, a_max, b_des)
    a_idm = a_max * (1.0 - (v / v_des) ** delta - (ss / s) * (ss / s))

    a_tilde = np.minimum(a_lead, a_idm)
    denom = v_lead * v_lead - 2.0 * s * a_tilde
    branch1 = (v_lead * (v - v_lead) <= -2.0 * s * a_tilde) & (np.abs(denom) >= 1e-9)
    with np.errstate(divide="ignore", invalid="ignore"):
        cah1 = v * v * a_tilde / denom
    heaviside = (v > v_lead).astype(np.float64)
    cah2 = a_tilde - heaviside * (v - v_lead) * (v - v_lead) / (2.0 * s)
    a_cah = np.where(branch1, cah1, cah2)

    blended = (1.0 - coolness) * a_idm + coolness * (
        a_cah + b_des * np.tanh((a_idm - a_cah) / b_des))
    a = np.where(a_idm >= a_cah, a_idm, blended)
    return np.clip(a, cap_lo, a_max)


def cacc_control(v, v_des, has_leader, gap, v_lead, a_lead, leader_is_cav,
                 t_override, t_cacc, t_acc, s0, a_max, b_des, coolness,
                 delta, comm_range, cap_lo, gm_floor):
    cacc = has_leader & leader_is_cav & (gap <= comm_range)
    mode = np.where(cacc, CACC, ACC).astype(np.int8)
    t_gap = np.where(cacc, t_cacc, t_acc)

    # Guard gap for the leaderless rows so the eidm expression stays finite.
    safe_gap = np.where(has_leader, gap, 1e9)
    safe_vl = np.where(has_leader, v_lead, v)
    safe_al = np.where(has_leader, a_lead, 0.0)
    a = _eidm(v, v_des, safe_gap, safe_vl, safe_al, t_gap, s0, a_max,
              b_des, coolness, delta, cap_lo)
    making = t_override > 0.0
    if making.any():
        a_make = _eidm(v, v_des, safe_gap, safe_vl, safe_al,
                       np.where(making, t_override, t_acc), s0, a_max,
                       b_des, coolness, delta, cap_lo)
        a = np.where(making, np.minimum(a, np.maximum(a_make, gm_floor)), a)

    a_free = np.clip(a_max * (1.0 - (v / v_des) ** delta), cap_lo, a_max)
    accel = np.where(has_leader, a, a_free)
    return accel, mode


def eidm_batch(v, v_des, s, v_lead, a_lead, t_gap, s0, a_max, b_des,
               coolness, delta, cap_lo):
    t = np.full(v.shape, t_gap, dtype=np.float64)
    return _eidm(v, v_des, s, v_lead, a_lead, t, s0, a_max, b_des,
                 coolness, delta, cap_lo)


def follower_required_decel(v_follower, v_subject, rear_gap, follower_is_cav,
                            cc0, cc1, s0, t_acc):
    min_gap = np.where(follower_is_cav,
                       s0 + t_acc * v_follower,
                       cc0 + cc1 * np.minimum(v_follower, v_subject))
    closing = v_follower > v_subject
    dv = v_follower - v_subject
    with np.errstate(divide="ignore", invalid="ignore"):
        req = -(dv * dv) / (2.0 * (rear_gap - min_gap))
    out = np.where(closing, req, 0.0)
    return np.where(rear_gap <= min_gap, -np.inf, out)
