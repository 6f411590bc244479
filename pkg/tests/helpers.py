"""Shared test utilities: finite-difference gradient checking."""

import numpy as np


def central_diff(loss_fn, arrays, array_idx, coord, h=1e-6):
    """Central finite difference of loss_fn w.r.t. one coordinate of one array.

    arrays are mutated in place and restored afterwards.
    """
    a = arrays[array_idx]
    flat = a.reshape(-1)
    orig = flat[coord]
    step = h * max(1.0, abs(orig))
    flat[coord] = orig + step
    lp = loss_fn()
    flat[coord] = orig - step
    lm = loss_fn()
    flat[coord] = orig
    return (lp - lm) / (2.0 * step)


def check_grads(loss_fn, arrays, grads, coords, rel_tol, h=1e-6, abs_floor=1e-10):
    """Compare analytic grads against central differences at given coordinates.

    coords: list of (array_idx, flat_coord). Passes when
    |a - n| <= rel_tol * (|a| + |n|) + abs_floor at every coordinate.
    Returns the worst relative error observed.
    """
    worst = 0.0
    for ai, ci in coords:
        numeric = central_diff(loss_fn, arrays, ai, ci, h=h)
        analytic = grads[ai].reshape(-1)[ci]
        denom = abs(analytic) + abs(numeric)
        err = abs(analytic - numeric)
        assert err <= rel_tol * denom + abs_floor, (
            f"grad mismatch at array {ai} coord {ci}: "
            f"analytic={analytic:.3e} numeric={numeric:.3e} rel={err / max(denom, 1e-300):.3e}"
        )
        if denom > 0:
            worst = max(worst, err / denom)
    return worst


def random_coords(rng, arrays, n):
    """n (array_idx, flat_coord) pairs spread over the given arrays."""
    coords = []
    for _ in range(n):
        ai = int(rng.integers(0, len(arrays)))
        ci = int(rng.integers(0, arrays[ai].size))
        coords.append((ai, ci))
    return coords
