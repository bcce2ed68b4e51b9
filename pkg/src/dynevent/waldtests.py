"""Wald specification tests on the fitted common parameters.

All restrictions are applied on the natural parameter scale against the
sandwich covariance, so the statistics do not depend on the optimizer's
internal reparameterization.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats

from .qmle import QmleResult

__all__ = [
    "WaldTest",
    "wald",
    "rc_test",
    "joint_independence_test",
    "state_dependence_test",
    "parallel_trends_test",
    "default_tests",
]


@dataclass
class WaldTest:
    name: str
    statistic: float
    df: int
    critical_value: float
    p_value: float
    alpha: float
    reject: bool
    restriction: np.ndarray
    null_value: np.ndarray

    def row(self) -> dict:
        return {
            "name": self.name,
            "statistic": self.statistic,
            "df": self.df,
            "critical_value": self.critical_value,
            "p_value": self.p_value,
            "reject": self.reject,
        }


def wald(
    result: QmleResult,
    R: np.ndarray,
    r0: np.ndarray | None = None,
    alpha: float = 0.05,
    name: str = "wald",
) -> WaldTest:
    """(R eta - r0)' (R V R')^{-1} (R eta - r0) against chi-square(q)."""
    R = np.atleast_2d(np.asarray(R, float))
    q, dim = R.shape
    if dim != result.params.size:
        raise ValueError("restriction width does not match the parameter count")
    row_norms = np.abs(R).sum(axis=1)
    if np.any(row_norms == 0):
        raise ValueError(f"restriction row {int(np.argmin(row_norms))} is zero")
    r0 = np.zeros(q) if r0 is None else np.asarray(r0, float)
    if result.sandwich_cov is None:
        raise ValueError("fit was run without the sandwich covariance")
    V = R @ result.sandwich_cov @ R.T
    eigvals, eigvecs = np.linalg.eigh(V)
    if eigvals.min() <= 1e-12 * max(eigvals.max(), 1e-300):
        bad = int(np.abs(eigvecs[:, 0]).argmax())
        raise ValueError(
            f"restriction rows are collinear under the covariance; row {bad} is redundant"
        )
    diff = R @ result.params - r0
    statistic = float(diff @ np.linalg.solve(V, diff))
    crit = float(stats.chi2.ppf(1.0 - alpha, q))
    p_value = float(stats.chi2.sf(statistic, q))
    return WaldTest(
        name=name,
        statistic=statistic,
        df=q,
        critical_value=crit,
        p_value=p_value,
        alpha=alpha,
        reject=bool(statistic > crit),
        restriction=R,
        null_value=r0,
    )


def _selector(result: QmleResult, names: list[str]) -> np.ndarray:
    R = np.zeros((len(names), result.params.size))
    for row, name in enumerate(names):
        R[row, result.index(name)] = 1.0
    return R


def rc_test(result: QmleResult, alpha: float = 0.05) -> WaldTest:
    """H0: the effect block of b1 is zero (random coefficients, no Y_0 dependence)."""
    p = result.theta.p
    names = [f"b1_delta{m}" for m in range(p)]
    return wald(result, _selector(result, names), alpha=alpha, name="rc")


def joint_independence_test(result: QmleResult, alpha: float = 0.05) -> WaldTest:
    """H0: b1 effect block zero and alpha-delta covariances zero."""
    p = result.theta.p
    names = [f"b1_delta{m}" for m in range(p)]
    names += [f"Sigma_delta{m}_alpha" for m in range(p)]
    return wald(result, _selector(result, names), alpha=alpha, name="joint_independence")


def state_dependence_test(result: QmleResult, alpha: float = 0.05) -> WaldTest:
    """H0: all effect autoregressive coefficients are zero."""
    p = result.theta.p
    names = [f"rho_delta_{q}" for q in range(1, p + 1)]
    return wald(result, _selector(result, names), alpha=alpha, name="state_dependence")


def parallel_trends_test(result: QmleResult, alpha: float = 0.05) -> WaldTest:
    """H0: rho_Y = 0 (no outcome persistence absent treatment)."""
    return wald(result, _selector(result, ["rho_Y"]), alpha=alpha, name="parallel_trends")


def default_tests(result: QmleResult, alpha: float = 0.05) -> list[WaldTest]:
    return [
        rc_test(result, alpha),
        joint_independence_test(result, alpha),
        state_dependence_test(result, alpha),
        parallel_trends_test(result, alpha),
    ]
