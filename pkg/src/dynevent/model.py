"""Domain types and matrix builders for the dynamic event-study model.

The observed outcome follows a conditional AR(1) with unit intercepts and
horizon-specific treatment effects switched on at a common adoption time:

    Y_it = rho_Y * Y_{i,t-1} + alpha_i + sum_j D^j_it * delta_ij + U_it

where D^j_it = 1{t - j = t0} marks event horizon j in {0..J}.  Each unit's
effect path delta_ij follows an AR(p) in the horizon index with free initial
conditions delta_{i0}..delta_{i,p-1} and fresh shocks from horizon p onward.
This module holds the containers for that model plus the deterministic matrix
algebra shared by the simulator, the QMLE, and the shrinkage step.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "PanelData",
    "EventDesign",
    "CommonParams",
    "PriorParams",
    "UnitEffects",
    "EffectRepresentation",
    "effect_representation",
    "design_matrix",
    "composite_error_cov",
    "initial_condition_coeffs",
    "lag_propagation_matrix",
    "transformed_outcomes",
]


@dataclass
class PanelData:
    """Balanced panel of outcomes, one row per unit, columns t = 0..T."""

    outcomes: np.ndarray
    unit_ids: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.outcomes = np.asarray(self.outcomes, dtype=float)
        if self.outcomes.ndim != 2:
            raise ValueError("outcomes must be a 2-d array (units x periods)")
        n, width = self.outcomes.shape
        if n < 2:
            raise ValueError("panel needs at least 2 units")
        if width < 2:
            raise ValueError("panel needs at least periods t=0 and t=1")
        if not np.all(np.isfinite(self.outcomes)):
            raise ValueError("outcomes contain NaN or infinite entries")
        if self.unit_ids is None:
            self.unit_ids = np.arange(n)
        else:
            self.unit_ids = np.asarray(self.unit_ids)
            if self.unit_ids.shape != (n,):
                raise ValueError("unit_ids length must match number of units")

    @property
    def n_units(self) -> int:
        return self.outcomes.shape[0]

    @property
    def T(self) -> int:
        """Last period index; outcomes span t = 0..T."""
        return self.outcomes.shape[1] - 1


@dataclass(frozen=True)
class EventDesign:
    """Common adoption time t0, last horizon J, and effect AR order p."""

    t0: int
    J: int
    p: int = 2

    def __post_init__(self) -> None:
        if self.p not in (1, 2):
            raise ValueError("effect AR order p must be 1 or 2")
        if self.J < 1:
            raise ValueError("need at least horizons j=0 and j=1 (J >= 1)")
        if self.p > self.J + 1:
            raise ValueError("AR order p cannot exceed the J+1 observed horizons")
        if self.t0 < 3:
            raise ValueError("need at least three pre-treatment periods (t0 >= 3)")

    def validate_horizon(self, T: int) -> None:
        if T - self.t0 < self.J:
            raise ValueError(
                f"panel ends at T={T} but horizons run through t0+J={self.t0 + self.J}"
            )

    @property
    def n_effects(self) -> int:
        """Dimension of the unit effect vector lambda_i = (alpha_i, delta_init)."""
        return 1 + self.p


@dataclass(frozen=True)
class CommonParams:
    """Dynamic parameters theta shared across units."""

    rho_y: float
    rho_delta: np.ndarray
    sigma2_u: float
    sigma2_eps: float

    def __post_init__(self) -> None:
        object.__setattr__(
            self, "rho_delta", np.atleast_1d(np.asarray(self.rho_delta, dtype=float))
        )
        if self.sigma2_u <= 0:
            raise ValueError("sigma2_u must be strictly positive")
        if self.sigma2_eps < 0:
            raise ValueError("sigma2_eps must be nonnegative")

    @property
    def p(self) -> int:
        return self.rho_delta.size


@dataclass
class PriorParams:
    """Working Gaussian prior lambda_i | Y_i0 ~ N(b0 + b1 * Y_i0, Sigma_lambda)."""

    b0: np.ndarray
    b1: np.ndarray
    sigma_lambda: np.ndarray

    def __post_init__(self) -> None:
        self.b0 = np.atleast_1d(np.asarray(self.b0, dtype=float))
        self.b1 = np.atleast_1d(np.asarray(self.b1, dtype=float))
        self.sigma_lambda = np.asarray(self.sigma_lambda, dtype=float)
        d = self.b0.size
        if self.b1.size != d:
            raise ValueError("b0 and b1 must have equal length")
        if self.sigma_lambda.shape != (d, d):
            raise ValueError("sigma_lambda must be square matching b0")
        if not np.allclose(self.sigma_lambda, self.sigma_lambda.T, atol=1e-10):
            raise ValueError("sigma_lambda must be symmetric")
        self.sigma_lambda = 0.5 * (self.sigma_lambda + self.sigma_lambda.T)
        eigvals = np.linalg.eigvalsh(self.sigma_lambda)
        if eigvals.min() < -1e-10:
            raise ValueError("sigma_lambda must be positive semidefinite")
        if eigvals.min() < 0:
            # clip numerically negative eigenvalues to zero
            vals, vecs = np.linalg.eigh(self.sigma_lambda)
            self.sigma_lambda = (vecs * np.clip(vals, 0.0, None)) @ vecs.T

    @property
    def dim(self) -> int:
        return self.b0.size


@dataclass(frozen=True)
class UnitEffects:
    """One unit's intercept and free initial effect levels."""

    alpha: float
    delta_init: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(
            self, "delta_init", np.atleast_1d(np.asarray(self.delta_init, dtype=float))
        )

    def as_vector(self) -> np.ndarray:
        return np.concatenate(([self.alpha], self.delta_init))


@dataclass(frozen=True)
class EffectRepresentation:
    """Linear representation of the effect path in initials and shocks.

    ``init_coeffs`` is (J+1) x p with entry [j, m] the coefficient of
    delta_{im} in delta_{ij}; ``shock_coeffs`` is (J+1) x (J+1-p) with column
    c the coefficient path of the shock at horizon k = c + p.
    """

    init_coeffs: np.ndarray
    shock_coeffs: np.ndarray

    @property
    def J(self) -> int:
        return self.init_coeffs.shape[0] - 1

    @property
    def p(self) -> int:
        return self.init_coeffs.shape[1]


def effect_representation(rho_delta: np.ndarray, J: int, p: int | None = None) -> EffectRepresentation:
    """Unroll the AR(p) effect recursion into coefficient matrices.

    For j >= p the path satisfies delta_j = sum_q rho_q * delta_{j-q} + eps_j,
    so both coefficient blocks follow the same recursion, the shock block with
    a contemporaneous unit impulse added on its own horizon.
    """
    rho = np.atleast_1d(np.asarray(rho_delta, dtype=float))
    if p is None:
        p = rho.size
    if rho.size != p:
        raise ValueError(f"rho_delta has length {rho.size}, expected p={p}")
    if J + 1 < p:
        raise ValueError("need at least p horizons to place the free initials")
    C = np.zeros((J + 1, p))
    Psi = np.zeros((J + 1, J + 1 - p))
    for j in range(min(p, J + 1)):
        C[j, j] = 1.0
    for j in range(p, J + 1):
        for q in range(1, p + 1):
            C[j] += rho[q - 1] * C[j - q]
            Psi[j] += rho[q - 1] * Psi[j - q]
        Psi[j, j - p] += 1.0
    return EffectRepresentation(C, Psi)


def design_matrix(
    design: EventDesign,
    T: int,
    rep: EffectRepresentation,
    convention: str = "event",
) -> np.ndarray:
    """Design matrix W for the transformed outcomes, shape T x (1+p).

    Column 0 is the intercept loading for alpha_i.  Under the default
    ``"event"`` convention, column m+1 at row t carries init_coeffs[t-t0, m]
    when 0 <= t-t0 <= J and zero otherwise, matching the transformed-outcome
    equation (at horizon j the loading on delta_{i0} is the plain AR impulse
    response, e.g. rho_delta^j for p=1).

    ``"stacked"`` instead accumulates all loadings up to the current horizon,
    which reproduces the worked minimal example with rows
    (1,0), (1,0), (1,1), (1, 1+rho_delta) for T=4, t0=3, J=1, p=1.  The two
    conventions disagree from the second post-onset row onward; estimation
    uses "event" throughout.
    """
    design.validate_horizon(T)
    if convention not in ("event", "stacked"):
        raise ValueError(f"unknown design-matrix convention: {convention!r}")
    coeffs = rep.init_coeffs
    if convention == "stacked":
        coeffs = np.cumsum(coeffs, axis=0)
    W = np.zeros((T, 1 + rep.p))
    W[:, 0] = 1.0
    for t in range(1, T + 1):
        j = t - design.t0
        if 0 <= j <= design.J:
            W[t - 1, 1:] = coeffs[j]
    return W


def composite_error_cov(
    design: EventDesign,
    T: int,
    theta: CommonParams,
    rep: EffectRepresentation,
) -> np.ndarray:
    """Covariance of the composite error (outcome noise plus effect shocks).

    The transformed-outcome error at row t is U_it plus, inside the treated
    window, the accumulated effect shocks sum_k shock_coeffs[t-t0, k] eps_ik;
    the result is sigma2_u * I + sigma2_eps * L L'.
    """
    design.validate_horizon(T)
    L = np.zeros((T, design.J + 1 - rep.p))
    for t in range(1, T + 1):
        j = t - design.t0
        if 0 <= j <= design.J:
            L[t - 1] = rep.shock_coeffs[j]
    return theta.sigma2_u * np.eye(T) + theta.sigma2_eps * (L @ L.T)


def initial_condition_coeffs(rho_y: float, T: int) -> np.ndarray:
    """Vector A with A[t-1] = rho_y^t for t = 1..T (loading of Y_i0 on Y_it)."""
    out = np.empty(T)
    acc = 1.0
    for t in range(T):
        acc *= rho_y
        out[t] = acc
    return out


def lag_propagation_matrix(rho_y: float, T: int) -> np.ndarray:
    """Lower-triangular B with B[s, t] = rho_y^(s-t) for s >= t, else 0.

    B maps period-level additive terms into outcome levels: Y_{1:T} =
    A * Y_0 + B (W lambda + composite errors).
    """
    powers = np.empty(T)
    powers[0] = 1.0
    for k in range(1, T):
        powers[k] = powers[k - 1] * rho_y
    B = np.zeros((T, T))
    for s in range(T):
        B[s, : s + 1] = powers[s::-1]
    return B


def transformed_outcomes(panel: PanelData, rho_y: float) -> np.ndarray:
    """Quasi-differenced outcomes Y_it - rho_y * Y_{i,t-1}, columns t = 1..T."""
    Y = panel.outcomes
    return Y[:, 1:] - rho_y * Y[:, :-1]
