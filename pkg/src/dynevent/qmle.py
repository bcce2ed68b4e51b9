"""Quasi-maximum-likelihood for the common dynamic parameters.

Step 1 of the two-step procedure.  Conditional on Y_i0, the outcome block
Y_{i,1:T} is modeled as Gaussian with

    mu_i  = A(rho_y) Y_i0 + W~ (b0 + b1 Y_i0),      W~ = B(rho_y) W,
    Omega = B Sigma_err B' + W~ Sigma_lambda W~',

where the working prior lambda_i | Y_i0 ~ N(b0 + b1 Y_i0, Sigma_lambda) has
been integrated out.  With a common adoption time Omega is unit-independent,
so each likelihood evaluation needs a single T x T Cholesky factorization.
The sandwich covariance treats the Gaussian prior as a working model only.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize
from scipy.linalg import solve_triangular

from .model import (
    CommonParams,
    EventDesign,
    PanelData,
    PriorParams,
    composite_error_cov,
    design_matrix,
    effect_representation,
    initial_condition_coeffs,
    lag_propagation_matrix,
    transformed_outcomes,
)

__all__ = [
    "QmleOptions",
    "QmleResult",
    "QmleNonConvergence",
    "param_names",
    "pack_params",
    "unpack_params",
    "marginal_moments",
    "quasi_loglik",
    "per_unit_loglik",
    "per_unit_scores",
    "moment_init",
    "fit",
]

logger = logging.getLogger(__name__)

_LOG_2PI = math.log(2.0 * math.pi)


# ---------------------------------------------------------------------------
# Parameter vector layout (natural scale) and the optimizer's internal scale.
# ---------------------------------------------------------------------------

def _component_labels(p: int) -> list[str]:
    return ["alpha"] + [f"delta{m}" for m in range(p)]


def param_names(p: int) -> list[str]:
    """Natural-scale parameter names, in vector order."""
    labels = _component_labels(p)
    names = ["rho_Y"] + [f"rho_delta_{q}" for q in range(1, p + 1)]
    names += ["sigma2_U", "sigma2_eps"]
    names += [f"b0_{lab}" for lab in labels]
    names += [f"b1_{lab}" for lab in labels]
    for i in range(1 + p):
        for jj in range(i + 1):
            names.append(f"Sigma_{labels[i]}_{labels[jj]}")
    return names


def n_params(p: int) -> int:
    d = 1 + p
    return 3 + p + 2 * d + d * (d + 1) // 2


def pack_params(theta: CommonParams, prior: PriorParams) -> np.ndarray:
    d = 1 + theta.p
    vech = prior.sigma_lambda[np.tril_indices(d)]
    return np.concatenate(
        [
            [theta.rho_y],
            theta.rho_delta,
            [theta.sigma2_u, theta.sigma2_eps],
            prior.b0,
            prior.b1,
            vech,
        ]
    )


def unpack_params(vec: np.ndarray, p: int) -> tuple[CommonParams, PriorParams]:
    theta, b0, b1, sig = _split_natural(np.asarray(vec, float), p)
    return (
        CommonParams(rho_y=theta[0], rho_delta=theta[1 : 1 + p], sigma2_u=theta[1 + p], sigma2_eps=theta[2 + p]),
        PriorParams(b0=b0, b1=b1, sigma_lambda=sig),
    )


def _split_natural(vec: np.ndarray, p: int):
    """Raw split without any validation (perturbed vectors allowed)."""
    d = 1 + p
    k = 3 + p
    theta = vec[:k]  # rho_y, rho_delta.., sigma2_u, sigma2_eps packed flat
    b0 = vec[k : k + d]
    b1 = vec[k + d : k + 2 * d]
    sig = np.zeros((d, d))
    sig[np.tril_indices(d)] = vec[k + 2 * d :]
    sig = sig + np.tril(sig, -1).T
    return theta, b0, b1, sig


_ATANH_CAP = 1.0 - 1e-8


def natural_to_internal(vec: np.ndarray, p: int) -> np.ndarray:
    vec = np.asarray(vec, float)
    d = 1 + p
    k = 3 + p
    out = np.empty_like(vec)
    rho = np.clip(vec[: 1 + p], -_ATANH_CAP, _ATANH_CAP)
    out[: 1 + p] = np.arctanh(rho)
    out[1 + p : k] = np.log(np.maximum(vec[1 + p : k], 1e-300))
    out[k : k + 2 * d] = vec[k : k + 2 * d]
    sig = np.zeros((d, d))
    sig[np.tril_indices(d)] = vec[k + 2 * d :]
    sig = sig + np.tril(sig, -1).T
    # guard a start that is not strictly PD
    eigmin = np.linalg.eigvalsh(sig).min()
    if eigmin < 1e-10:
        sig = sig + (1e-8 + max(0.0, -eigmin)) * np.eye(d)
    L = np.linalg.cholesky(sig)
    chol = L[np.tril_indices(d)].copy()
    diag_pos = _vech_diag_positions(d)
    chol[diag_pos] = np.log(chol[diag_pos])
    out[k + 2 * d :] = chol
    return out


def internal_to_natural(vec: np.ndarray, p: int) -> np.ndarray:
    vec = np.asarray(vec, float)
    d = 1 + p
    k = 3 + p
    out = np.empty_like(vec)
    out[: 1 + p] = np.tanh(vec[: 1 + p])
    out[1 + p : k] = np.exp(vec[1 + p : k])
    out[k : k + 2 * d] = vec[k : k + 2 * d]
    chol = vec[k + 2 * d :].copy()
    diag_pos = _vech_diag_positions(d)
    chol[diag_pos] = np.exp(chol[diag_pos])
    L = np.zeros((d, d))
    L[np.tril_indices(d)] = chol
    sig = L @ L.T
    out[k + 2 * d :] = sig[np.tril_indices(d)]
    return out


def _vech_diag_positions(d: int) -> np.ndarray:
    rows, cols = np.tril_indices(d)
    return np.flatnonzero(rows == cols)


# ---------------------------------------------------------------------------
# Likelihood
# ---------------------------------------------------------------------------

def _moment_pieces(design: EventDesign, T: int, rho_y, rho_delta, sigma2_u, sigma2_eps, sigma_lambda):
    rep = effect_representation(rho_delta, design.J)
    W = design_matrix(design, T, rep)
    sig_err = composite_error_cov(
        design,
        T,
        CommonParams(rho_y=rho_y, rho_delta=rho_delta, sigma2_u=max(sigma2_u, 1e-300), sigma2_eps=max(sigma2_eps, 0.0)),
        rep,
    )
    A = initial_condition_coeffs(rho_y, T)
    B = lag_propagation_matrix(rho_y, T)
    Wt = B @ W
    omega = B @ sig_err @ B.T + Wt @ sigma_lambda @ Wt.T
    return A, Wt, omega


def marginal_moments(
    theta: CommonParams,
    prior: PriorParams,
    y0: np.ndarray | float,
    design: EventDesign,
    T: int,
) -> tuple[np.ndarray, np.ndarray]:
    """Marginal mean(s) and common covariance of Y_{i,1:T} given Y_i0."""
    A, Wt, omega = _moment_pieces(
        design, T, theta.rho_y, theta.rho_delta, theta.sigma2_u, theta.sigma2_eps, prior.sigma_lambda
    )
    y0_arr = np.atleast_1d(np.asarray(y0, float))
    mu = y0_arr[:, None] * (A + Wt @ prior.b1)[None, :] + (Wt @ prior.b0)[None, :]
    if np.isscalar(y0) or np.asarray(y0).ndim == 0:
        return mu[0], omega
    return mu, omega


def _per_unit_loglik_raw(Y: np.ndarray, design: EventDesign, vec: np.ndarray, p: int) -> np.ndarray | None:
    """Vector of per-unit log-densities at an unvalidated natural vector.

    Returns None when sigma2_u is nonpositive or Omega fails its Cholesky;
    callers treat that as log-likelihood -inf.
    """
    theta, b0, b1, sig = _split_natural(vec, p)
    rho_y, rho_delta = theta[0], theta[1 : 1 + p]
    sigma2_u, sigma2_eps = theta[1 + p], theta[2 + p]
    if sigma2_u <= 0 or sigma2_eps < 0:
        return None
    T = Y.shape[1] - 1
    rep = effect_representation(rho_delta, design.J)
    W = design_matrix(design, T, rep)
    L_sh = np.zeros((T, design.J + 1 - p))
    for t in range(1, T + 1):
        j = t - design.t0
        if 0 <= j <= design.J:
            L_sh[t - 1] = rep.shock_coeffs[j]
    sig_err = sigma2_u * np.eye(T) + sigma2_eps * (L_sh @ L_sh.T)
    A = initial_condition_coeffs(rho_y, T)
    B = lag_propagation_matrix(rho_y, T)
    Wt = B @ W
    omega = B @ sig_err @ B.T + Wt @ sig @ Wt.T
    try:
        chol = np.linalg.cholesky(omega)
    except np.linalg.LinAlgError:
        return None
    y0 = Y[:, 0]
    resid = Y[:, 1:] - y0[:, None] * (A + Wt @ b1)[None, :] - (Wt @ b0)[None, :]
    z = solve_triangular(chol, resid.T, lower=True, check_finite=False)
    quad = np.einsum("ij,ij->j", z, z)
    logdet = 2.0 * np.log(np.diag(chol)).sum()
    return -0.5 * (T * _LOG_2PI + logdet + quad)


def per_unit_loglik(panel: PanelData, design: EventDesign, theta: CommonParams, prior: PriorParams) -> np.ndarray:
    """Per-unit Gaussian quasi-log-likelihood contributions."""
    design.validate_horizon(panel.T)
    vec = pack_params(theta, prior)
    out = _per_unit_loglik_raw(panel.outcomes, design, vec, theta.p)
    if out is None:
        return np.full(panel.n_units, -np.inf)
    return out


def quasi_loglik(panel: PanelData, design: EventDesign, theta: CommonParams, prior: PriorParams) -> float:
    """Total quasi-log-likelihood (sum over units)."""
    return float(per_unit_loglik(panel, design, theta, prior).sum())


# ---------------------------------------------------------------------------
# Moment-based initializers
# ---------------------------------------------------------------------------

def moment_init(panel: PanelData, design: EventDesign) -> tuple[float, float]:
    """Closed-form starting values (rho_y, rho_delta scalar).

    rho_y solves the pre-treatment within-demeaned lag moment: quasi-difference
    residuals Y_it - rho Y_{i,t-1} over t = 1..t0-1, demean within unit (which
    removes alpha_i), and set the sample moment against the instrument
    Y_{i,t-1} to zero.  rho_delta comes from the post-treatment autocovariance
    ratio of the quasi-differenced outcomes; it only seeds the optimizer.
    """
    design.validate_horizon(panel.T)
    Y = panel.outcomes
    y0 = Y[:, 0]
    if np.var(y0) <= 1e-12:
        raise ValueError("non-degenerate variation in Y_i0 required")
    t0 = design.t0
    a = Y[:, 1:t0]  # Y_it, t = 1..t0-1
    c = Y[:, 0 : t0 - 1]  # Y_{i,t-1}
    num = ((a - a.mean(axis=1, keepdims=True)) * c).sum()
    den = ((c - c.mean(axis=1, keepdims=True)) * c).sum()
    if abs(den) < 1e-12:
        raise ValueError("non-degenerate variation in pre-treatment outcomes required")
    rho_y0 = num / den

    yt = Y[:, 1:] - rho_y0 * Y[:, :-1]  # columns t = 1..T
    cur = yt[:, t0 : panel.T]  # t = t0+1..T
    lag = yt[:, t0 - 1 : panel.T - 1]
    den_d = (lag * lag).sum()
    if den_d < 1e-12:
        raise ValueError("non-degenerate variation in post-treatment outcomes required")
    rho_delta0 = float(np.clip((cur * lag).sum() / den_d, -0.95, 0.95))
    return float(rho_y0), rho_delta0


def _start_vector(panel: PanelData, design: EventDesign) -> np.ndarray:
    """Natural-scale starting vector built from the moment initializers."""
    p = design.p
    rho_y0, rho_d0 = moment_init(panel, design)
    rho_y0 = float(np.clip(rho_y0, -0.97, 0.97))
    rho_delta = np.zeros(p)
    rho_delta[0] = rho_d0
    Y = panel.outcomes
    t0 = design.t0
    yt = Y[:, 1:] - rho_y0 * Y[:, :-1]
    pre = yt[:, : t0 - 1]
    sigma2 = float(np.maximum(np.var(pre - pre.mean(axis=1, keepdims=True)), 1e-4))
    theta0 = CommonParams(rho_y=rho_y0, rho_delta=rho_delta, sigma2_u=sigma2, sigma2_eps=sigma2)

    # project raw per-unit effect estimates on Y_i0 for prior starts
    rep = effect_representation(rho_delta, design.J)
    W = design_matrix(design, panel.T, rep)
    pinv = np.linalg.solve(W.T @ W, W.T)
    lam_hat = (pinv @ yt.T).T
    y0 = Y[:, 0]
    vy = y0.var()
    b1 = (lam_hat * (y0 - y0.mean())[:, None]).mean(axis=0) / vy
    b0 = lam_hat.mean(axis=0) - b1 * y0.mean()
    resid = lam_hat - b0 - np.outer(y0, b1)
    sig = np.cov(resid.T, ddof=0)
    vals, vecs = np.linalg.eigh(sig)
    floor = max(1e-3, 1e-3 * vals.max())
    sig = (vecs * np.clip(vals, floor, None)) @ vecs.T
    prior0 = PriorParams(b0=b0, b1=b1, sigma_lambda=sig)
    return pack_params(theta0, prior0)


# ---------------------------------------------------------------------------
# Fitting
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class QmleOptions:
    max_iter: int = 500
    gtol: float = 1e-6
    accept_tol: float = 1e-5
    n_restarts: int = 5
    fd_step: float = 1e-6
    hess_step: float = 1e-4
    seed: int = 0
    compute_sandwich: bool = True


class QmleNonConvergence(RuntimeError):
    """No restart reached the gradient tolerance; best iterate attached."""

    def __init__(self, message: str, result: "QmleResult | None" = None):
        super().__init__(message)
        self.result = result


@dataclass
class QmleResult:
    theta: CommonParams
    prior: PriorParams
    loglik: float
    params: np.ndarray
    param_names: list[str]
    sandwich_cov: np.ndarray | None
    score_cov: np.ndarray | None
    neg_hessian: np.ndarray | None
    grad_norm: float
    n_iter: int
    n_restarts_used: int
    converged: bool
    message: str
    design: EventDesign
    T: int
    n_units: int

    def index(self, name: str) -> int:
        try:
            return self.param_names.index(name)
        except ValueError:
            raise KeyError(f"unknown parameter {name!r}; known: {self.param_names}") from None

    def estimate(self, name: str) -> float:
        return float(self.params[self.index(name)])

    def std_error(self, name: str) -> float:
        if self.sandwich_cov is None:
            raise ValueError("sandwich covariance was not computed")
        i = self.index(name)
        return float(np.sqrt(self.sandwich_cov[i, i]))

    def summary(self) -> str:
        lines = [f"{'parameter':<22}{'estimate':>14}{'std.err':>14}"]
        for i, name in enumerate(self.param_names):
            se = np.sqrt(self.sandwich_cov[i, i]) if self.sandwich_cov is not None else np.nan
            lines.append(f"{name:<22}{self.params[i]:>14.6f}{se:>14.6f}")
        lines.append(f"loglik {self.loglik:.6f}  units {self.n_units}  converged {self.converged}")
        return "\n".join(lines)


def _central_diff_grad(f, x: np.ndarray, step: float) -> np.ndarray:
    g = np.empty_like(x)
    for k in range(x.size):
        h = step * max(1.0, abs(x[k]))
        xp = x.copy()
        xp[k] += h
        xm = x.copy()
        xm[k] -= h
        g[k] = (f(xp) - f(xm)) / (2.0 * h)
    return g


def per_unit_scores(
    panel: PanelData,
    design: EventDesign,
    theta: CommonParams,
    prior: PriorParams,
    step: float = 1e-6,
) -> np.ndarray:
    """Numerical per-unit score vectors on the natural scale, shape (n, dim)."""
    vec = pack_params(theta, prior)
    p = design.p
    Y = panel.outcomes
    n = panel.n_units
    scores = np.empty((n, vec.size))
    for k in range(vec.size):
        h = step * max(1.0, abs(vec[k]))
        vp = vec.copy()
        vp[k] += h
        vm = vec.copy()
        vm[k] -= h
        lp = _per_unit_loglik_raw(Y, design, vp, p)
        lm = _per_unit_loglik_raw(Y, design, vm, p)
        if lp is None or lm is None:
            raise ValueError("likelihood undefined in a neighborhood of the evaluation point")
        scores[:, k] = (lp - lm) / (2.0 * h)
    return scores


def _natural_hessian(mean_f, vec: np.ndarray, step: float) -> np.ndarray:
    """Symmetric central-difference Hessian from function values."""
    dim = vec.size
    H = np.empty((dim, dim))
    f0 = mean_f(vec)
    h = np.array([step * max(1.0, abs(vec[k])) for k in range(dim)])
    for k in range(dim):
        vp = vec.copy()
        vp[k] += h[k]
        vm = vec.copy()
        vm[k] -= h[k]
        H[k, k] = (mean_f(vp) - 2.0 * f0 + mean_f(vm)) / h[k] ** 2
    for k in range(dim):
        for l in range(k + 1, dim):
            vpp = vec.copy()
            vpp[[k, l]] += [h[k], h[l]]
            vpm = vec.copy()
            vpm[[k, l]] += [h[k], -h[l]]
            vmp = vec.copy()
            vmp[[k, l]] += [-h[k], h[l]]
            vmm = vec.copy()
            vmm[[k, l]] += [-h[k], -h[l]]
            H[k, l] = H[l, k] = (mean_f(vpp) - mean_f(vpm) - mean_f(vmp) + mean_f(vmm)) / (
                4.0 * h[k] * h[l]
            )
    return H


def fit(panel: PanelData, design: EventDesign, options: QmleOptions | None = None) -> QmleResult:
    """Maximize the quasi-log-likelihood with restarts.

    The optimizer works on internal coordinates (atanh for the AR parameters,
    log variances, Cholesky factor of Sigma_lambda with a log diagonal) and
    targets the per-unit mean log-likelihood.  Raises QmleNonConvergence with
    the best iterate attached when no restart meets the gradient tolerance.
    """
    opts = options or QmleOptions()
    design.validate_horizon(panel.T)
    p = design.p
    Y = panel.outcomes
    n = panel.n_units

    def neg_mean_loglik_internal(x: np.ndarray) -> float:
        vec = internal_to_natural(x, p)
        ll = _per_unit_loglik_raw(Y, design, vec, p)
        if ll is None or not np.all(np.isfinite(ll)):
            return 1e12
        return -float(ll.mean())

    def grad_internal(x: np.ndarray) -> np.ndarray:
        return _central_diff_grad(neg_mean_loglik_internal, x, opts.fd_step)

    x0_nat = _start_vector(panel, design)
    x0 = natural_to_internal(x0_nat, p)
    rng = np.random.default_rng(opts.seed)
    starts = [x0]
    for _ in range(max(0, opts.n_restarts - 1)):
        starts.append(x0 + rng.normal(0.0, 0.3, size=x0.size))

    best = None  # ((not converged, objective), scipy result, grad norm, start index)
    for si, start in enumerate(starts):
        res = optimize.minimize(
            neg_mean_loglik_internal,
            start,
            jac=grad_internal,
            method="BFGS",
            options={"maxiter": opts.max_iter, "gtol": opts.gtol},
        )
        gnorm = float(np.max(np.abs(grad_internal(res.x))))
        converged = gnorm < opts.accept_tol and res.fun < 1e11
        key = (not converged, res.fun)
        if best is None or key < best[0]:
            best = (key, res, gnorm, si)
        if converged:
            # restarts exist to rescue failed starts; the first converged
            # optimum from the moment start is kept
            break
    key, res, gnorm, si = best
    converged = not key[0]

    vec_hat = internal_to_natural(res.x, p)
    theta_hat, prior_hat = unpack_params(vec_hat, p)
    ll_vec = _per_unit_loglik_raw(Y, design, vec_hat, p)
    loglik = float(ll_vec.sum()) if ll_vec is not None else -np.inf

    sandwich = score_cov = neg_hess = None
    if opts.compute_sandwich and converged:
        scores = per_unit_scores(panel, design, theta_hat, prior_hat, step=opts.fd_step)
        score_cov = scores.T @ scores / n

        def mean_loglik_natural(v: np.ndarray) -> float:
            ll = _per_unit_loglik_raw(Y, design, v, p)
            if ll is None:
                raise FloatingPointError("likelihood undefined at a Hessian evaluation point")
            return float(ll.mean())

        H = -_natural_hessian(mean_loglik_natural, vec_hat, opts.hess_step)
        H = 0.5 * (H + H.T) + 1e-10 * np.eye(H.shape[0])
        neg_hess = H
        Hinv = np.linalg.inv(H)
        sandwich = Hinv @ score_cov @ Hinv / n
        sandwich = 0.5 * (sandwich + sandwich.T)

    result = QmleResult(
        theta=theta_hat,
        prior=prior_hat,
        loglik=loglik,
        params=vec_hat,
        param_names=param_names(p),
        sandwich_cov=sandwich,
        score_cov=score_cov,
        neg_hessian=neg_hess,
        grad_norm=gnorm,
        n_iter=int(res.nit),
        n_restarts_used=si + 1,
        converged=converged,
        message=str(res.message),
        design=design,
        T=panel.T,
        n_units=n,
    )
    if not converged:
        raise QmleNonConvergence(
            f"no restart reached gradient tolerance {opts.accept_tol:g} "
            f"(best grad norm {gnorm:.3g})",
            result=result,
        )
    return result
