"""Analytic stray field of the periodic stripe-domain sample.

The sample is a thin film with out-of-plane magnetization in stripe
domains along x (invariant in y), treated in the thin-film limit as a
dipole sheet at z = 0 with areal moment density m(x) = moment_areal *
s(x), where s is a +/-1 square wave with Gaussian-smoothed walls.

Each Fourier harmonic of the sheet decays as exp(-k z) above the film:

    B_x(x, z) = -(mu0 m0 / 2) sum_n b_n k_n cos(k_n x~) exp(-k_n z)
    B_z(x, z) = +(mu0 m0 / 2) sum_n b_n k_n sin(k_n x~) exp(-k_n z)

with x~ = x - pattern_phase, k_n = 2 pi n / period (n odd) and
b_n = (4 / pi n) exp(-(k_n w)^2 / 2) for wall width w.
"""

from __future__ import annotations

import numpy as np

from ..constants import MU_0
from .params import SampleModel

_REL_TOL = 1e-6
_MAX_HARMONIC = 20001


def stray_field(sample: SampleModel, x, z) -> np.ndarray:
    """Stray field vector(s) at height z above the film, tesla.

    x and z broadcast; the result has shape broadcast(x, z).shape + (3,).
    The harmonic series is truncated once the next term would change |B|
    by less than 1e-6 relative, everywhere.
    """
    x = np.asarray(x, dtype=float)
    z = np.asarray(z, dtype=float)
    if np.any(z <= 0):
        raise ValueError("field is only defined above the film (z > 0)")
    squeeze = x.ndim == 0 and z.ndim == 0
    x, z = np.broadcast_arrays(np.atleast_1d(x), np.atleast_1d(z))
    lam = sample.stripe_period
    w = sample.wall_width
    pref = MU_0 * sample.moment_areal / 2.0
    xt = x - sample.pattern_phase

    bx = np.zeros_like(xt)
    bz = np.zeros_like(xt)
    # Convergence is tracked per point so a point's value depends only on
    # its own (x, z), never on what else shares the batch.
    active = np.ones(xt.shape, dtype=bool)
    tiny = np.finfo(float).tiny
    n = 1
    while n <= _MAX_HARMONIC and active.any():
        k = 2.0 * np.pi * n / lam
        coeff = pref * (4.0 / (np.pi * n)) * np.exp(-0.5 * (k * w) ** 2) * k
        damp = np.exp(-k * z[active])
        bx[active] -= coeff * np.cos(k * xt[active]) * damp
        bz[active] += coeff * np.sin(k * xt[active]) * damp
        # envelope of the next term vs the accumulated magnitude
        n += 2
        k_next = 2.0 * np.pi * n / lam
        env = (
            pref * (4.0 / (np.pi * n)) * np.exp(-0.5 * (k_next * w) ** 2)
            * k_next * np.exp(-k_next * z[active])
        )
        mag = np.hypot(bx[active], bz[active])
        still = env > _REL_TOL * (mag + tiny)
        idx = np.flatnonzero(active.ravel())
        active.ravel()[idx[~still.ravel()]] = False

    out = np.zeros(xt.shape + (3,))
    out[..., 0] = bx
    out[..., 2] = bz
    return out[0] if squeeze else out


def magnetization_profile(sample: SampleModel, x) -> np.ndarray:
    """Real-space areal moment density m(x), A (Fourier-series evaluation).

    Mainly for plotting/documentation; the field itself never goes through
    real space.
    """
    x = np.asarray(x, dtype=float)
    lam, w = sample.stripe_period, sample.wall_width
    xt = x - sample.pattern_phase
    s = np.zeros_like(xt)
    for n in range(1, _MAX_HARMONIC, 2):
        k = 2.0 * np.pi * n / lam
        term = (4.0 / (np.pi * n)) * np.exp(-0.5 * (k * w) ** 2) * np.sin(k * xt)
        s += term
        if np.max(np.abs(term)) < 1e-9:
            break
    return sample.moment_areal * s
