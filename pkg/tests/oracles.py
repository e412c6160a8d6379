"""Independent reference implementations used by the tests.

These deliberately avoid the package's kernels: plain ``math`` loops for the
kinematics and reward, dense point sampling for rectangle overlap.
"""
import math

import numpy as np

RHO_ACC, RHO_VEL, RHO_YAW, RHO_LANE = 40.0, 0.8, 6.0 / math.pi, 2.0


def kinematics(x, y, v, th, dv, dth, dt, v_max=40.0):
    nx = x + v * math.cos(th) * dt
    ny = y + v * math.sin(th) * dt
    nv = min(max(v + dv, 0.0), v_max)
    t = th + dth
    while t > math.pi:
        t -= 2.0 * math.pi
    while t <= -math.pi:
        t += 2.0 * math.pi
    return nx, ny, nv, t


def reward_terms(v, th, accident, on_best, v_min=0.0, v_max=40.0):
    r_acc = -RHO_ACC if accident else 0.0
    r_vel = RHO_VEL * (v - (v_max + v_min) / 2.0) / ((v_max - v_min) / 2.0)
    r_yaw = -RHO_YAW * abs(th)
    r_lane = RHO_LANE if on_best else 0.0
    return r_acc, r_vel, r_yaw, r_lane, r_acc + r_vel + r_yaw + r_lane


def rect_boundary(cx, cy, th, length, width, n):
    """``n`` points evenly spaced along the outline, corners included, plus the centre."""
    hl, hw = length / 2.0, width / 2.0
    corners = np.array([[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw], [hl, hw]])
    seg = np.linalg.norm(np.diff(corners, axis=0), axis=1)
    s = np.linspace(0.0, seg.sum(), n, endpoint=False)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    k = np.clip(np.searchsorted(cum, s, side="right") - 1, 0, 3)
    frac = ((s - cum[k]) / seg[k])[:, None]
    local = corners[k] + frac * (corners[k + 1] - corners[k])
    local = np.vstack([local, corners[:4], [[0.0, 0.0]]])
    c, sn = math.cos(th), math.sin(th)
    return np.stack([cx + c * local[:, 0] - sn * local[:, 1], cy + sn * local[:, 0] + c * local[:, 1]], 1)


def inside(points, cx, cy, th, length, width):
    c, s = math.cos(th), math.sin(th)
    dx, dy = points[:, 0] - cx, points[:, 1] - cy
    lx, ly = c * dx + s * dy, -s * dx + c * dy
    return (np.abs(lx) <= length / 2.0) & (np.abs(ly) <= width / 2.0)


def sampled_overlap(a, b, length, width, n=10_000):
    """Two convex outlines intersect iff an outline point of one lies in the other."""
    pa = rect_boundary(*a, length, width, n)
    pb = rect_boundary(*b, length, width, n)
    return bool(inside(pa, *b, length, width).any() or inside(pb, *a, length, width).any())


def robust_overlap(a, b, length, width, margin=1e-3, n=10_000):
    """Sampled answer if it is unchanged when both rectangles grow or shrink by
    ``margin``; None for pairs closer than that to touching."""
    res = {sampled_overlap(a, b, length + 2 * d, width + 2 * d, n) for d in (-margin, 0.0, margin)}
    return res.pop() if len(res) == 1 else None


def lane_of(y, lane_width=3.2, num_lanes=3):
    return min(max(int(math.floor(y / lane_width)), 0), num_lanes - 1)


def best_lane(av, bvs, lane_width=3.2, num_lanes=3):
    """Lane with the largest gap to the nearest BV ahead; the current lane wins
    ties, then the lowest index."""
    gaps = [math.inf] * num_lanes
    for bx, by, _, _ in bvs:
        if bx > av[0]:
            k = lane_of(by, lane_width, num_lanes)
            gaps[k] = min(gaps[k], bx - av[0])
    cur = lane_of(av[1], lane_width, num_lanes)
    top = max(gaps)
    return cur if gaps[cur] == top else gaps.index(top)
