"""Vectorized numpy equivalents of the numba kernels."""
import numpy as np

NONE, COLLISION, OFF_ROAD = 0, 1, 2


def wrap_angle(t):
    t = np.asarray(t, dtype=np.float64)
    out = t - 2.0 * np.pi * np.ceil((t - np.pi) / (2.0 * np.pi))
    return np.where((t > np.pi) | (t <= -np.pi), out, t)


def kinematic_step(states, actions, dt, v_max):
    x, y, v, th = states[:, 0], states[:, 1], states[:, 2], states[:, 3]
    out = np.empty_like(states)
    out[:, 0] = x + v * np.cos(th) * dt
    out[:, 1] = y + v * np.sin(th) * dt
    out[:, 2] = np.clip(v + actions[:, 0], 0.0, v_max)
    out[:, 3] = wrap_angle(th + actions[:, 1])
    return out


def _overlap(x1, y1, t1, x2, y2, t2, length, width):
    hl, hw = 0.5 * length, 0.5 * width
    c1, s1, c2, s2 = np.cos(t1), np.sin(t1), np.cos(t2), np.sin(t2)
    dx, dy = x2 - x1, y2 - y1
    sep = np.zeros(np.broadcast(x1, x2).shape, dtype=bool)
    for ax, ay in ((c1, s1), (-s1, c1), (c2, s2), (-s2, c2)):
        r1 = hl * np.abs(c1 * ax + s1 * ay) + hw * np.abs(-s1 * ax + c1 * ay)
        r2 = hl * np.abs(c2 * ax + s2 * ay) + hw * np.abs(-s2 * ax + c2 * ay)
        sep |= np.abs(dx * ax + dy * ay) > r1 + r2
    return ~sep


def rects_overlap(a, b, length, width):
    return _overlap(a[:, 0], a[:, 1], a[:, 2], b[:, 0], b[:, 1], b[:, 2], length, width)


def accident_codes(av, bvs, present, length, width, road_width):
    hit = _overlap(av[:, None, 0], av[:, None, 1], av[:, None, 3],
                   bvs[:, :, 0], bvs[:, :, 1], bvs[:, :, 3], length, width)
    collision = np.any(hit & present, axis=1)
    ext = 0.5 * length * np.abs(np.sin(av[:, 3])) + 0.5 * width * np.abs(np.cos(av[:, 3]))
    off = (av[:, 1] - ext < 0.0) | (av[:, 1] + ext > road_width)
    return np.where(collision, COLLISION, np.where(off, OFF_ROAD, NONE)).astype(np.int8)


def _lane(y, lane_width, num_lanes):
    return np.clip(np.floor(y / lane_width), 0, num_lanes - 1).astype(np.int64)


def best_lanes(av, bvs, present, lane_width, num_lanes):
    num_lanes = int(num_lanes)
    ahead = present & (bvs[:, :, 0] > av[:, None, 0])
    gap = np.where(ahead, bvs[:, :, 0] - av[:, None, 0], np.inf)
    lanes = _lane(bvs[:, :, 1], lane_width, num_lanes)
    gaps = np.full((av.shape[0], num_lanes), np.inf)
    for k in range(num_lanes):
        gaps[:, k] = np.min(np.where(lanes == k, gap, np.inf), axis=1, initial=np.inf)
    cur = _lane(av[:, 1], lane_width, num_lanes)
    best = gaps.max(axis=1)
    first = np.argmax(gaps == best[:, None], axis=1)
    keep = gaps[np.arange(len(cur)), cur] == best
    return np.where(keep, cur, first).astype(np.int64)


def env_step(av, actions, bvs, present, p):
    dt, road_vmax, lane_w, n_lanes, road_w = p[0], p[1], p[2], int(p[3]), p[4]
    vl, vw = p[5], p[6]
    r_acc, r_vel, r_yaw, r_lane, vmin, vmax = p[7], p[8], p[9], p[10], p[11], p[12]
    new = kinematic_step(av, actions, dt, road_vmax)
    codes = accident_codes(new, bvs, present, vl, vw, road_w)
    terms = np.empty((av.shape[0], 4))
    terms[:, 0] = np.where(codes != NONE, -r_acc, 0.0)
    terms[:, 1] = r_vel * (new[:, 2] - (vmax + vmin) / 2.0) / ((vmax - vmin) / 2.0)
    terms[:, 2] = -r_yaw * np.abs(new[:, 3])
    on_best = _lane(new[:, 1], lane_w, n_lanes) == best_lanes(new, bvs, present, lane_w, n_lanes)
    terms[:, 3] = np.where(on_best, r_lane, 0.0)
    return new, codes, terms
