"""Simulation hot loops.

The numba versions are used unless ``CLIC_NUMBA=0`` is set in the environment
(or numba is missing), in which case the vectorized numpy fallback is used.
Both expose the same functions with the same batched array signatures.
"""
import os

NONE, COLLISION, OFF_ROAD = 0, 1, 2


def _want_numba() -> bool:
    if os.environ.get("CLIC_NUMBA", "1").strip().lower() in ("0", "false", "no", "off"):
        return False
    try:
        import numba  # noqa: F401
    except ImportError:
        return False
    return True


USE_NUMBA = _want_numba()

if USE_NUMBA:
    from ._numba import accident_codes, best_lanes, env_step, kinematic_step, rects_overlap, \
        wrap_angle
    BACKEND = "numba"
else:
    from ._numpy import accident_codes, best_lanes, env_step, kinematic_step, rects_overlap, \
        wrap_angle
    BACKEND = "numpy"

__all__ = ["BACKEND", "USE_NUMBA", "NONE", "COLLISION", "OFF_ROAD", "accident_codes",
           "best_lanes", "env_step", "kinematic_step", "rects_overlap", "wrap_angle"]
