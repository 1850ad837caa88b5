"""Damped Gauss-Newton (Levenberg-Marquardt) least squares.

Minimizes sum(((y - model(x; theta)) / sigma_y)^2) over the free
parameters.  Bounds are enforced by smooth reparameterization: "log"
parameters are optimized as ln(theta), "logit" parameters as
ln(theta/(1-theta)); the reported covariance is transformed back to
external parameter space.  Covariance is inv(J^T J) of the weighted
Jacobian, unscaled (standard errors take sigma_y at face value).

With log_space=True the fit runs on ln(y) vs ln(model); sigma_y is then
interpreted as the standard deviation of ln(y).  Used for PSD fits to
tame their dynamic range.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .models import get_model, initial_guess

MAX_ITER = 200
CHI2_RTOL = 1e-10
GRAD_TOL = 1e-12
# keep exp/logit maps representable; linear coordinates are never clamped
_CLAMP = {"lin": np.inf, "log": 690.0, "logit": 36.0}


def _clamp(u: np.ndarray, transforms) -> np.ndarray:
    out = u.copy()
    for i, kind in enumerate(transforms):
        lim = _CLAMP[kind]
        if np.isfinite(lim):
            out[i] = min(max(out[i], -lim), lim)
    return out


@dataclass
class FitResult:
    params: np.ndarray
    covariance: np.ndarray
    chi2_reduced: float
    n_iter: int
    converged: bool
    residuals: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def std_errors(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.covariance), 0.0, None))


def _to_internal(theta: np.ndarray, transforms) -> np.ndarray:
    u = np.empty_like(theta)
    for i, kind in enumerate(transforms):
        v = theta[i]
        if kind == "lin":
            u[i] = v
        elif kind == "log":
            if v <= 0:
                raise ValueError(f"parameter {i} must be > 0 for log transform")
            u[i] = np.log(v)
        elif kind == "logit":
            v = min(max(v, 1e-12), 1.0 - 1e-12)
            u[i] = np.log(v / (1.0 - v))
        else:  # pragma: no cover - registry is static
            raise ValueError(f"unknown transform {kind!r}")
    return _clamp(u, transforms)


def _to_external(u: np.ndarray, transforms) -> np.ndarray:
    theta = np.empty_like(u)
    for i, kind in enumerate(transforms):
        if kind == "lin":
            theta[i] = u[i]
        elif kind == "log":
            theta[i] = np.exp(u[i])
        else:
            theta[i] = 1.0 / (1.0 + np.exp(-u[i]))
    return theta


def _dtheta_du(theta: np.ndarray, transforms) -> np.ndarray:
    d = np.empty_like(theta)
    for i, kind in enumerate(transforms):
        if kind == "lin":
            d[i] = 1.0
        elif kind == "log":
            d[i] = theta[i]
        else:
            d[i] = theta[i] * (1.0 - theta[i])
    return d


def fit(
    model_id: str,
    x,
    y,
    sigma_y=None,
    init=None,
    fixed_mask=None,
    log_space: bool = False,
) -> FitResult:
    """Fit a registered model to (x, y) with per-point standard deviations.

    init defaults to the model's heuristic guess.  fixed_mask pins the
    flagged parameters to their init values.  Deterministic; raises
    ValueError on malformed input, returns converged=False (never raises)
    when the normal equations degenerate.
    """
    model = get_model(model_id)
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("x and y must be 1-D arrays of equal length")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise ValueError("x and y must be finite")
    if sigma_y is None:
        sigma = np.ones_like(y)
    else:
        sigma = np.broadcast_to(np.asarray(sigma_y, dtype=float), y.shape).copy()
    if np.any(~np.isfinite(sigma)) or np.any(sigma <= 0):
        raise ValueError("sigma_y must be finite and > 0")

    if init is None:
        theta0 = initial_guess(model_id, x, y)
    else:
        theta0 = np.asarray(init, dtype=float).copy()
        if theta0.shape != (model.n_params,):
            raise ValueError(f"init must have {model.n_params} entries")
        if not np.all(np.isfinite(theta0)):
            raise ValueError("init must be finite")
    if fixed_mask is None:
        fixed = np.zeros(model.n_params, dtype=bool)
    else:
        fixed = np.asarray(fixed_mask, dtype=bool)
        if fixed.shape != (model.n_params,):
            raise ValueError("fixed_mask length mismatch")
    free = ~fixed
    if not free.any():
        raise ValueError("at least one parameter must be free")

    if log_space and np.any(y <= 0):
        raise ValueError("log_space requires y > 0")

    inv_sigma = 1.0 / sigma
    free_transforms = tuple(t for t, fr in zip(model.transforms, free) if fr)

    def resid_jac(u_free):
        u = u_full.copy()
        u[free] = u_free
        theta = _to_external(u, model.transforms)
        # wild trial steps may overflow; non-finite chi2 steps get rejected
        with np.errstate(all="ignore"):
            f = model.fn(x, theta)
            jac_t = model.jac(x, theta)  # d f / d theta
            if log_space:
                if np.any(f <= 0) or not np.all(np.isfinite(f)):
                    return None, None, None
                r = (np.log(f) - np.log(y)) * inv_sigma
                jac_t = (jac_t / f[:, None]) * inv_sigma[:, None]
            else:
                r = (f - y) * inv_sigma
                jac_t = jac_t * inv_sigma[:, None]
            scale = _dtheta_du(theta, model.transforms)
            jac_u = jac_t * scale[None, :]
        return r, jac_u[:, free], theta

    u_full = _to_internal(theta0, model.transforms)
    u_free = u_full[free].copy()

    r, jac, theta = resid_jac(u_free)
    if r is None:
        raise ValueError("model is non-positive at the initial guess (log_space)")
    chi2 = float(r @ r)
    lam = 1e-3
    converged = False
    n_iter = 0
    singular = False

    for n_iter in range(1, MAX_ITER + 1):
        grad = jac.T @ r
        if np.max(np.abs(grad)) < GRAD_TOL * max(1.0, chi2):
            converged = True
            break
        a_mat = jac.T @ jac
        diag = np.diag(a_mat).copy()
        diag[diag <= 0] = 1e-30
        accepted = False
        for _ in range(50):
            try:
                step = np.linalg.solve(
                    a_mat + lam * np.diag(diag), -grad
                )
            except np.linalg.LinAlgError:
                singular = True
                break
            u_try = _clamp(u_free + step, free_transforms)
            r_try, jac_try, theta_try = resid_jac(u_try)
            if r_try is not None:
                chi2_try = float(r_try @ r_try)
                if np.isfinite(chi2_try) and chi2_try <= chi2:
                    rel_drop = (chi2 - chi2_try) / max(chi2, np.finfo(float).tiny)
                    u_free, r, jac, theta = u_try, r_try, jac_try, theta_try
                    chi2 = chi2_try
                    lam = max(lam / 3.0, 1e-12)
                    accepted = True
                    if rel_drop < CHI2_RTOL or chi2 == 0.0:
                        converged = True
                    break
            lam *= 10.0
            if lam > 1e12:
                break
        if singular or not accepted or converged:
            break

    u_full[free] = u_free
    theta_fin = _to_external(u_full, model.transforms)
    theta_fin[fixed] = theta0[fixed]

    # covariance of the free parameters, back-transformed
    cov = np.zeros((model.n_params, model.n_params))
    try:
        cov_free_u = np.linalg.inv(jac.T @ jac)
    except np.linalg.LinAlgError:
        singular = True
        cov_free_u = np.linalg.pinv(jac.T @ jac)
    scale = _dtheta_du(theta_fin, model.transforms)[free]
    cov_free = cov_free_u * np.outer(scale, scale)
    cov[np.ix_(free, free)] = 0.5 * (cov_free + cov_free.T)

    n_free = int(free.sum())
    dof = max(len(y) - n_free, 1)
    return FitResult(
        params=theta_fin,
        covariance=cov,
        chi2_reduced=chi2 / dof,
        n_iter=n_iter,
        converged=converged and not singular,
        residuals=r,
        meta={
            "model": model_id,
            "log_space": log_space,
            "fixed_mask": fixed.tolist(),
            "chi2": chi2,
        },
    )
