"""Scalar math cores shared by the public model API and the array kernels.

Each function is numba-njit compiled when numba is importable and runs as
plain Python otherwise, so the model modules work even without a JIT.
Functions only call other functions in this module (njit-to-njit).
"""
from __future__ import annotations

import math

try:
    from numba import njit

    NUMBA_AVAILABLE = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    NUMBA_AVAILABLE = False

    def njit(*args, **kwargs):
        def wrap(func):
            return func

        return wrap


# Interaction state codes (must match core.InteractionState values).
FREE = 0
CLOSE_UP = 1
FOLLOW = 2
BRAKE_BX = 3
BRAKE_AX = 4

# Gap mode codes (must match core.CaccMode values).
ACC = 1
CACC = 2

# Taper reference speed for the HV free-driving acceleration [m/s].
TAPER_V_REF = 22.2
# Saturated-PD gains of the unconscious-following regime.
FOLLOW_KP = 0.05
FOLLOW_KD = 0.4


@njit(cache=True)
def w99_thresholds(v, gap, dv, v_lead, cc0, cc1, cc2, cc3, cc4, cc5, cc6):
    """Perceptual thresholds for one leader observation.

    dv = v_lead - v (closing => dv < 0). Returns
    (sdxc, sdxo, sdxv, sdv, sdvc, sdvo).
    """
    if v_lead > 0.0:
        v_ref = v if v < v_lead else v_lead
        sdxc = cc0 + cc1 * v_ref
    else:
        sdxc = cc0
    sdxo = sdxc + cc2
    sdxv = sdxo + cc3 * (dv - cc4)
    sdv = cc6 * gap * gap * 1e-4
    sdvc = (cc4 - sdv) if v_lead > 0.0 else 0.0
    sdvo = (sdv + cc5) if v > cc5 else sdv
    return sdxc, sdxo, sdxv, sdv, sdvc, sdvo


@njit(cache=True)
def classify(gap, dv, sdxc, sdxo, sdxv, sdvc, sdvo):
    """Interaction-state code for a vehicle with a leader present."""
    if gap <= sdxc:
        return BRAKE_AX
    if gap < sdxv and dv < sdvc:
        if gap > sdxo:
            return CLOSE_UP
        return BRAKE_BX
    if gap <= sdxo and sdvc <= dv < sdvo:
        return FOLLOW
    return FREE


@njit(cache=True)
def hv_free_accel(v, v_des, cc8, cc9, dt):
    taper = cc8 + (cc9 - cc8) * min(v, TAPER_V_REF) / TAPER_V_REF
    return min(taper, (v_des - v) / dt)


@njit(cache=True)
def hv_accel(state, v, v_des, gap, dv, a_lead, sdxc, sdxo,
             cc7, cc8, cc9, max_decel, dt):
    """Acceleration for one HV given its interaction state.

    Braking regimes combine the kinematic requirement with the leader's
    acceleration, taking the stronger (more negative) of the two. Output is
    always within [max_decel, cc8].
    """
    if state == CLOSE_UP or state == BRAKE_BX:
        # Target dv = 0 exactly at gap = sdxc; gap > sdxc here so the
        # kinematic term is negative.
        kin = dv * dv / (2.0 * (sdxc - gap))
        a = min(kin, a_lead)
        a = min(a, 0.0)
    elif state == BRAKE_AX:
        if dv < 0.0 and gap > 1e-12:
            kin = -(dv * dv) / (2.0 * gap)
        elif dv < 0.0:
            kin = max_decel
        else:
            kin = 0.0
        a = min(kin, a_lead - cc7)
        a = min(a, 0.0)
    elif state == FOLLOW:
        mid = 0.5 * (sdxc + sdxo)
        a = FOLLOW_KP * (gap - mid) + FOLLOW_KD * dv
        if a > cc7:
            a = cc7
        elif a < -cc7:
            a = -cc7
        a = min(a, (v_des - v) / dt)
    else:  # FREE (and any unmapped regime)
        a = hv_free_accel(v, v_des, cc8, cc9, dt)
    if a < max_decel:
        a = max_decel
    elif a > cc8:
        a = cc8
    return a


@njit(cache=True)
def desired_gap(v, v_lead, t_gap, s0, a_max, b_des):
    """Equilibrium-plus-approach desired gap; the interaction term is
    clamped at zero so faster leaders never attract."""
    dyn = v * (v - v_lead) / (2.0 * math.sqrt(a_max * b_des))
    if dyn < 0.0:
        dyn = 0.0
    return s0 + v * t_gap + dyn


@njit(cache=True)
def idm_accel(v, v_des, s, v_lead, t_gap, s0, a_max, b_des, delta):
    ss = desired_gap(v, v_lead, t_gap, s0, a_max, b_des)
    return a_max * (1.0 - (v / v_des) ** delta - (ss / s) * (ss / s))


@njit(cache=True)
def cah_accel(v, v_lead, a_lead, s, a_self):
    """Constant-acceleration heuristic with a division guard on the
    near-singular first branch."""
    a_tilde = min(a_lead, a_self)
    denom = v_lead * v_lead - 2.0 * s * a_tilde
    if v_lead * (v - v_lead) <= -2.0 * s * a_tilde and abs(denom) >= 1e-9:
        return v * v * a_tilde / denom
    heaviside = 1.0 if v > v_lead else 0.0
    return a_tilde - heaviside * (v - v_lead) * (v - v_lead) / (2.0 * s)


@njit(cache=True)
def eidm_accel(v, v_des, s, v_lead, a_lead,
               t_gap, s0, a_max, b_des, coolness, delta, cap_lo):
    """Blend of IDM and CAH via the coolness factor, clamped to vehicle
    capability [cap_lo, a_max]."""
    a_idm = idm_accel(v, v_des, s, v_lead, t_gap, s0, a_max, b_des, delta)
    a_cah = cah_accel(v, v_lead, a_lead, s, a_idm)
    if a_idm >= a_cah:
        a = a_idm
    else:
        a = (1.0 - coolness) * a_idm + coolness * (
            a_cah + b_des * math.tanh((a_idm - a_cah) / b_des))
    if a < cap_lo:
        a = cap_lo
    elif a > a_max:
        a = a_max
    return a


@njit(cache=True)
def free_accel(v, v_des, a_max, delta, cap_lo):
    """Leader-free limit of the controller (interaction terms dropped)."""
    a = a_max * (1.0 - (v / v_des) ** delta)
    if a < cap_lo:
        a = cap_lo
    elif a > a_max:
        a = a_max
    return a


@njit(cache=True)
def follower_required_decel(v_follower, v_subject, rear_gap, follower_is_cav,
                            cc0, cc1, s0, t_acc):
    """Deceleration the new follower needs to restore its safe gap if the
    subject slots in ``rear_gap`` ahead of it. 0 when not closing,
    -inf when the slot already violates the follower's minimum gap."""
    if follower_is_cav:
        min_gap = s0 + t_acc * v_follower
    else:
        v_ref = v_follower if v_follower < v_subject else v_subject
        min_gap = cc0 + cc1 * v_ref
    if rear_gap <= min_gap:
        return -math.inf
    if v_follower <= v_subject:
        return 0.0
    dv = v_follower - v_subject
    return -(dv * dv) / (2.0 * (rear_gap - min_gap))
