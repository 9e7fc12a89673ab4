"""Gauss-Newton TDoA multilateration, used as the classical baseline."""

from __future__ import annotations

import numpy as np

from . import SPEED_OF_LIGHT
from .geometry import AREA, Geometry, _as_3d


def _residuals(z, geometry: Geometry, rd, rows):
    p3 = _as_3d(z, geometry.ue_height)
    diff = p3 - geometry.positions
    d = np.linalg.norm(diff, axis=1)
    unit = np.divide(diff, d[:, None], out=np.zeros_like(diff), where=d[:, None] > 0)
    ref = geometry.ref_of_row[rows]
    res = d[rows] - d[ref] - rd[rows]
    jac = (unit[rows] - unit[ref])[:, :2]
    return res, jac


def multilaterate(
    tdoa,
    geometry: Geometry,
    valid=None,
    x0=None,
    c: float = SPEED_OF_LIGHT,
    max_iter: int = 100,
    tol: float = 1e-10,
) -> np.ndarray:
    """Least-squares 2-D position from per-TRP TDoAs (seconds, reference entries ignored).

    ``valid`` masks out rows (e.g. NLoS). Returns the position as a length-2 array.
    """
    rd = np.asarray(tdoa, dtype=float) * c
    use = ~geometry.is_ref
    if valid is not None:
        use &= np.asarray(valid, dtype=bool) & np.asarray(valid, dtype=bool)[geometry.ref_of_row]
    rows = np.flatnonzero(use)
    if x0 is None:
        x0 = [np.mean(AREA[0]), np.mean(AREA[1])]
    z = np.array(x0, dtype=float)
    if len(rows) < 2:
        return z

    res, jac = _residuals(z, geometry, rd, rows)
    cost = res @ res
    for _ in range(max_iter):
        step, *_ = np.linalg.lstsq(jac, -res, rcond=None)
        # backtrack so every accepted step lowers the cost
        t = 1.0
        while t > 1e-6:
            z_new = z + t * step
            res_new, jac_new = _residuals(z_new, geometry, rd, rows)
            cost_new = res_new @ res_new
            if cost_new <= cost:
                break
            t *= 0.5
        else:
            break
        z, res, jac, cost = z_new, res_new, jac_new, cost_new
        if np.linalg.norm(t * step) < tol:
            break
    return z
