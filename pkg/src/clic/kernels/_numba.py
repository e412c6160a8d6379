import math

import numpy as np
from numba import njit

# p layout for env_step: dt, road_v_max, lane_width, num_lanes, road_width,
# veh_length, veh_width, rho_acc, rho_vel, rho_yaw, rho_lane, v_min, v_max
NONE, COLLISION, OFF_ROAD = 0, 1, 2


@njit(cache=True)
def wrap_angle(t):
    if t > math.pi or t <= -math.pi:
        t = t - 2.0 * math.pi * math.ceil((t - math.pi) / (2.0 * math.pi))
    return t


@njit(cache=True)
def _step_one(x, y, v, th, dv, dth, dt, v_max, out):
    out[0] = x + v * math.cos(th) * dt
    out[1] = y + v * math.sin(th) * dt
    nv = v + dv
    if nv < 0.0:
        nv = 0.0
    elif nv > v_max:
        nv = v_max
    out[2] = nv
    out[3] = wrap_angle(th + dth)


@njit(cache=True)
def kinematic_step(states, actions, dt, v_max):
    out = np.empty_like(states)
    for i in range(states.shape[0]):
        _step_one(states[i, 0], states[i, 1], states[i, 2], states[i, 3],
                  actions[i, 0], actions[i, 1], dt, v_max, out[i])
    return out


@njit(cache=True)
def _overlap(x1, y1, t1, x2, y2, t2, length, width):
    hl = 0.5 * length
    hw = 0.5 * width
    c1, s1 = math.cos(t1), math.sin(t1)
    c2, s2 = math.cos(t2), math.sin(t2)
    dx, dy = x2 - x1, y2 - y1
    axes = ((c1, s1), (-s1, c1), (c2, s2), (-s2, c2))
    for k in range(4):
        ax, ay = axes[k]
        r1 = hl * abs(c1 * ax + s1 * ay) + hw * abs(-s1 * ax + c1 * ay)
        r2 = hl * abs(c2 * ax + s2 * ay) + hw * abs(-s2 * ax + c2 * ay)
        if abs(dx * ax + dy * ay) > r1 + r2:
            return False
    return True


@njit(cache=True)
def rects_overlap(a, b, length, width):
    out = np.empty(a.shape[0], dtype=np.bool_)
    for i in range(a.shape[0]):
        out[i] = _overlap(a[i, 0], a[i, 1], a[i, 2], b[i, 0], b[i, 1], b[i, 2], length, width)
    return out


@njit(cache=True)
def _code(av, bvs, present, length, width, road_width):
    for j in range(bvs.shape[0]):
        if present[j] and _overlap(av[0], av[1], av[3], bvs[j, 0], bvs[j, 1], bvs[j, 3],
                                   length, width):
            return COLLISION
    c, s = math.cos(av[3]), math.sin(av[3])
    ext = 0.5 * length * abs(s) + 0.5 * width * abs(c)
    if av[1] - ext < 0.0 or av[1] + ext > road_width:
        return OFF_ROAD
    return NONE


@njit(cache=True)
def accident_codes(av, bvs, present, length, width, road_width):
    out = np.empty(av.shape[0], dtype=np.int8)
    for i in range(av.shape[0]):
        out[i] = _code(av[i], bvs[i], present[i], length, width, road_width)
    return out


@njit(cache=True)
def _lane(y, lane_width, num_lanes):
    k = int(math.floor(y / lane_width))
    if k < 0:
        return 0
    if k > num_lanes - 1:
        return num_lanes - 1
    return k


@njit(cache=True)
def _best(av, bvs, present, lane_width, num_lanes):
    gaps = np.full(num_lanes, np.inf)
    for j in range(bvs.shape[0]):
        if present[j] and bvs[j, 0] > av[0]:
            k = _lane(bvs[j, 1], lane_width, num_lanes)
            g = bvs[j, 0] - av[0]
            if g < gaps[k]:
                gaps[k] = g
    cur = _lane(av[1], lane_width, num_lanes)
    best = gaps.max()
    if gaps[cur] == best:
        return cur
    for k in range(num_lanes):
        if gaps[k] == best:
            return k
    return cur


@njit(cache=True)
def best_lanes(av, bvs, present, lane_width, num_lanes):
    out = np.empty(av.shape[0], dtype=np.int64)
    for i in range(av.shape[0]):
        out[i] = _best(av[i], bvs[i], present[i], lane_width, int(num_lanes))
    return out


@njit(cache=True)
def env_step(av, actions, bvs, present, p):
    """Advance B environments one frame; returns (av', codes, reward terms)."""
    n = av.shape[0]
    new = np.empty_like(av)
    codes = np.empty(n, dtype=np.int8)
    terms = np.empty((n, 4))
    dt, road_vmax, lane_w, n_lanes, road_w = p[0], p[1], p[2], int(p[3]), p[4]
    vl, vw = p[5], p[6]
    r_acc, r_vel, r_yaw, r_lane, vmin, vmax = p[7], p[8], p[9], p[10], p[11], p[12]
    mid = (vmax + vmin) / 2.0
    half = (vmax - vmin) / 2.0
    for i in range(n):
        _step_one(av[i, 0], av[i, 1], av[i, 2], av[i, 3], actions[i, 0], actions[i, 1],
                  dt, road_vmax, new[i])
        c = _code(new[i], bvs[i], present[i], vl, vw, road_w)
        codes[i] = c
        terms[i, 0] = -r_acc if c != NONE else 0.0
        terms[i, 1] = r_vel * (new[i, 2] - mid) / half
        terms[i, 2] = -r_yaw * abs(new[i, 3])
        on_best = _lane(new[i, 1], lane_w, n_lanes) == _best(new[i], bvs[i], present[i],
                                                             lane_w, n_lanes)
        terms[i, 3] = r_lane if on_best else 0.0
    return new, codes, terms
