"""Numba array kernels for the per-step hot loops.

Thin njit loops over the scalar cores in ``scalar``; one pass per vehicle
class per step. The numpy backend mirrors these exactly.
"""
from __future__ import annotations

import numpy as np
from numba import njit

from . import scalar as _s

BACKEND_NAME = "numba"


@njit(cache=True)
def hv_control(v, v_des, has_leader, gap, dv, v_lead, a_lead,
               cc0, cc1, cc2, cc3, cc4, cc5, cc6, cc7, cc8, cc9,
               max_decel, dt):
    """Interaction state + acceleration for an array of HVs.

    Entries with ``has_leader`` false are classified FREE.
    """
    n = v.shape[0]
    accel = np.empty(n, dtype=np.float64)
    state = np.empty(n, dtype=np.int8)
    for i in range(n):
        if has_leader[i]:
            sdxc, sdxo, _sdxv, _sdv, sdvc, sdvo = _s.w99_thresholds(
                v[i], gap[i], dv[i], v_lead[i],
                cc0, cc1, cc2, cc3, cc4, cc5, cc6)
            st = _s.classify(gap[i], dv[i], sdxc, sdxo, _sdxv, sdvc, sdvo)
            accel[i] = _s.hv_accel(st, v[i], v_des[i], gap[i], dv[i],
                                   a_lead[i], sdxc, sdxo,
                                   cc7, cc8, cc9, max_decel, dt)
            state[i] = st
        else:
            state[i] = _s.FREE
            accel[i] = _s.hv_accel(_s.FREE, v[i], v_des[i], 0.0, 0.0, 0.0,
                                   0.0, 0.0, cc7, cc8, cc9, max_decel, dt)
    return accel, state


@njit(cache=True)
def hv_classify_only(v, has_leader, gap, dv, v_lead,
                     cc0, cc1, cc2, cc3, cc4, cc5, cc6):
    n = v.shape[0]
    state = np.empty(n, dtype=np.int8)
    for i in range(n):
        if has_leader[i]:
            sdxc, sdxo, sdxv, _sdv, sdvc, sdvo = _s.w99_thresholds(
                v[i], gap[i], dv[i], v_lead[i],
                cc0, cc1, cc2, cc3, cc4, cc5, cc6)
            state[i] = _s.classify(gap[i], dv[i], sdxc, sdxo, sdxv, sdvc, sdvo)
        else:
            state[i] = _s.FREE
    return state


@njit(cache=True)
def cacc_control(v, v_des, has_leader, gap, v_lead, a_lead, leader_is_cav,
                 t_override, t_cacc, t_acc, s0, a_max, b_des, coolness,
                 delta, comm_range, cap_lo, gm_floor):
    """Gap mode + acceleration for an array of CAVs.

    ``t_override`` > 0 marks gap makers: their normal-gap command is capped
    by the enlarged-gap command bounded below at ``gm_floor``.
    """
    n = v.shape[0]
    accel = np.empty(n, dtype=np.float64)
    mode = np.empty(n, dtype=np.int8)
    for i in range(n):
        if has_leader[i] and leader_is_cav[i] and gap[i] <= comm_range:
            mode[i] = _s.CACC
            t_gap = t_cacc
        else:
            mode[i] = _s.ACC
            t_gap = t_acc
        if has_leader[i]:
            a = _s.eidm_accel(v[i], v_des[i], gap[i], v_lead[i], a_lead[i],
                              t_gap, s0, a_max, b_des, coolness, delta, cap_lo)
            if t_override[i] > 0.0:
                a_make = _s.eidm_accel(v[i], v_des[i], gap[i], v_lead[i],
                                       a_lead[i], t_override[i], s0, a_max,
                                       b_des, coolness, delta, cap_lo)
                a = min(a, max(a_make, gm_floor))
        else:
            a = _s.free_accel(v[i], v_des[i], a_max, delta, cap_lo)
        accel[i] = a
    return accel, mode


@njit(cache=True)
def eidm_batch(v, v_des, s, v_lead, a_lead, t_gap, s0, a_max, b_des,
               coolness, delta, cap_lo):
    """eidm over arrays with one shared time gap (tests and candidates)."""
    n = v.shape[0]
    out = np.empty(n, dtype=np.float64)
    for i in range(n):
        out[i] = _s.eidm_accel(v[i], v_des[i], s[i], v_lead[i], a_lead[i],
                               t_gap, s0, a_max, b_des, coolness, delta,
                               cap_lo)
    return out


@njit(cache=True)
def follower_required_decel(v_follower, v_subject, rear_gap, follower_is_cav,
                            cc0, cc1, s0, t_acc):
    n = v_follower.shape[0]
    out = np.empty(n, dtype=np.float64)
    for i in range(n):
        out[i] = _s.follower_required_decel(
            v_follower[i], v_subject[i], rear_gap[i], follower_is_cav[i],
            cc0, cc1, s0, t_acc)
    return out
