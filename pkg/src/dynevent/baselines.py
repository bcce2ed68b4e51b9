"""Homogeneous-effect comparators: TWFE event studies and the naive-bias demo."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import pandas as pd

from .model import EventDesign, PanelData

__all__ = ["EventStudyFit", "twfe", "twfe_ar1", "ovb_demo"]


@dataclass
class EventStudyFit:
    """Event-time coefficients with delta_hat(-1) fixed at zero."""

    horizons: np.ndarray
    coefficients: np.ndarray
    covariance: np.ndarray
    n_units: int
    T: int
    rho_y: float | None = None
    rho_y_se: float | None = None

    def std_errors(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.covariance), 0.0, None))

    def coefficient(self, horizon: int) -> float:
        idx = int(np.nonzero(self.horizons == horizon)[0][0])
        return float(self.coefficients[idx])

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {
                "horizon": self.horizons,
                "coefficient": self.coefficients,
                "std_error": self.std_errors(),
            }
        )


def _event_dummies(design: EventDesign, times: np.ndarray, leads: int) -> tuple[np.ndarray, np.ndarray]:
    horizons = np.array([j for j in range(-leads, design.J + 1) if j != -1])
    event_time = times - design.t0
    dummies = (event_time[:, None] == horizons[None, :]).astype(float)
    return dummies, horizons


def _clustered_ols(X: np.ndarray, y: np.ndarray, n_units: int) -> tuple[np.ndarray, np.ndarray]:
    """Pooled OLS with a unit-clustered sandwich; X is stacked unit blocks."""
    rows_per_unit = X.shape[0] // n_units
    gram = X.T @ X
    beta = np.linalg.solve(gram, X.T @ y)
    resid = y - X @ beta
    Xr = X * resid[:, None]
    scores = Xr.reshape(n_units, rows_per_unit, -1).sum(axis=1)
    meat = scores.T @ scores
    bread = np.linalg.inv(gram)
    cov = bread @ meat @ bread
    return beta, 0.5 * (cov + cov.T)


def _insert_reference(horizons, beta, cov, extra: int = 0):
    """Put the -1 coefficient (identically zero) back into the tables."""
    k = horizons.size
    full_h = np.sort(np.append(horizons, -1))
    pos = int(np.nonzero(full_h == -1)[0][0])
    full_beta = np.insert(beta[:k], pos, 0.0)
    full_cov = np.zeros((k + 1 + extra, k + 1 + extra))
    keep = np.delete(np.arange(k + 1), pos)
    idx = np.concatenate([keep, np.arange(k + 1, k + 1 + extra)])
    full_cov[np.ix_(idx, idx)] = cov
    return full_h, full_beta, full_cov


def twfe(panel: PanelData, design: EventDesign, leads: int | None = None) -> EventStudyFit:
    """Within-unit OLS of the outcome on event-time dummies, j = -L..J minus the reference."""
    T = panel.T
    design.validate_horizon(T)
    L = design.t0 - 1 if leads is None else int(leads)
    if not 0 <= L <= design.t0 - 1:
        raise ValueError("leads must lie in [0, t0-1]")
    n = panel.n_units
    times = np.arange(T + 1)
    dummies, horizons = _event_dummies(design, times, L)
    dummies_dm = dummies - dummies.mean(axis=0)
    X = np.tile(dummies_dm, (n, 1))
    y = (panel.outcomes - panel.outcomes.mean(axis=1, keepdims=True)).ravel()
    beta, cov = _clustered_ols(X, y, n)
    full_h, full_beta, full_cov = _insert_reference(horizons, beta, cov)
    return EventStudyFit(full_h, full_beta, full_cov, n_units=n, T=T)


def twfe_ar1(panel: PanelData, design: EventDesign, leads: int | None = None) -> EventStudyFit:
    """TWFE augmented with the lagged outcome, estimated over t = 1..T."""
    T = panel.T
    design.validate_horizon(T)
    L = design.t0 - 1 if leads is None else int(leads)
    if not 0 <= L <= design.t0 - 1:
        raise ValueError("leads must lie in [0, t0-1]")
    n = panel.n_units
    times = np.arange(1, T + 1)
    dummies, horizons = _event_dummies(design, times, L)
    k = horizons.size
    lag = panel.outcomes[:, :-1]
    y = panel.outcomes[:, 1:]
    X = np.empty((n * T, k + 1))
    X[:, :k] = np.tile(dummies - dummies.mean(axis=0), (n, 1))
    X[:, k] = (lag - lag.mean(axis=1, keepdims=True)).ravel()
    y_dm = (y - y.mean(axis=1, keepdims=True)).ravel()
    beta, cov = _clustered_ols(X, y_dm, n)
    full_h, full_beta, full_cov = _insert_reference(horizons, beta, cov, extra=1)
    return EventStudyFit(
        full_h,
        full_beta,
        full_cov[: k + 1, : k + 1],
        n_units=n,
        T=T,
        rho_y=float(beta[k]),
        rho_y_se=float(np.sqrt(max(cov[k, k], 0.0))),
    )


def ovb_demo(
    rho_y: float = 0.8,
    delta=(1.0, 1.2, 0.5),
    n_units: int = 100_000,
    seed: int = 0,
) -> pd.DataFrame:
    """Five-period persistence demo: dummies-only estimates absorb lagged effects.

    The naive regression of Y on the post-event dummies alone estimates the
    period means E[Y_{t0+j}] = delta_j + rho_Y E[Y_{t0+j-1}], so its bias
    accumulates the whole prior effect path scaled by rho_Y.
    """
    delta = np.asarray(delta, float)
    if delta.size != 3:
        raise ValueError("the demo uses a three-horizon effect path")
    T, t0 = 4, 2
    rng = np.random.default_rng(seed)
    y0 = rng.standard_normal(n_units)
    alpha = rng.normal(scale=0.5, size=n_units)
    Y = np.empty((n_units, T + 1))
    Y[:, 0] = y0
    for t in range(1, T + 1):
        j = t - t0
        eff = delta[j] if 0 <= j <= 2 else 0.0
        Y[:, t] = rho_y * Y[:, t - 1] + alpha + eff + rng.normal(scale=0.3, size=n_units)
    # dummies-only OLS: each dummy column picks out one period, so the
    # estimate is that period's sample mean
    naive = Y[:, t0:].mean(axis=0)
    naive_se = Y[:, t0:].std(axis=0, ddof=1) / np.sqrt(n_units)
    bias = np.empty(3)
    mean_path = 0.0
    for j in range(3):
        bias[j] = rho_y * mean_path
        mean_path = rho_y * mean_path + delta[j]
    return pd.DataFrame(
        {
            "horizon": np.arange(3),
            "true_delta": delta,
            "naive_estimate": naive,
            "naive_se": naive_se,
            "analytic_bias": bias,
        }
    )
