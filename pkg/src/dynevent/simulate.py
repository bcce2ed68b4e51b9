"""Panel simulator: heterogeneous effect trajectories over a common event time.

Draws (Y_i0, lambda_i, effect shocks, outcome noise) per unit and rolls the
outcome recursion forward.  Priors for lambda_i = (alpha_i, delta_init) come
in three families: gaussian, finite gaussian mixtures, and a scaled
multivariate t; a nonzero ``crc_slope`` shifts the prior location linearly in
Y_i0 (correlated random coefficients).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .model import CommonParams, EventDesign, PanelData, UnitEffects, effect_representation

__all__ = [
    "PriorSpec",
    "DgpSpec",
    "SimulatedPanel",
    "simulate",
    "simulation_grid",
    "design_by_name",
]


@dataclass(frozen=True)
class PriorSpec:
    """Distribution of lambda_i = (alpha_i, delta_{i0}, .., delta_{i,p-1}) given Y_i0.

    ``weights``/``means``/``covs`` describe mixture components of the
    Y_i0-independent part; ``crc_slope`` adds b1 * Y_i0 to every component
    mean.  ``family`` is "gaussian", "gaussian-mixture", or "scaled-t"; the
    scaled-t uses means[0]/covs[0] as location/covariance with ``t_dof``
    degrees of freedom (shape matrix scaled so the covariance is covs[0]).
    """

    family: str
    weights: np.ndarray
    means: np.ndarray
    covs: np.ndarray
    crc_slope: np.ndarray
    t_dof: float = 5.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "weights", np.atleast_1d(np.asarray(self.weights, float)))
        object.__setattr__(self, "means", np.atleast_2d(np.asarray(self.means, float)))
        object.__setattr__(self, "covs", np.asarray(self.covs, float))
        object.__setattr__(self, "crc_slope", np.atleast_1d(np.asarray(self.crc_slope, float)))
        if self.family not in ("gaussian", "gaussian-mixture", "scaled-t"):
            raise ValueError(f"unknown prior family: {self.family!r}")
        K, d = self.means.shape
        if self.weights.shape != (K,) or self.covs.shape != (K, d, d):
            raise ValueError("weights/means/covs shapes are inconsistent")
        if abs(self.weights.sum() - 1.0) > 1e-10 or self.weights.min() <= 0:
            raise ValueError("weights must be positive and sum to one")
        if self.crc_slope.shape != (d,):
            raise ValueError("crc_slope must have the lambda dimension")
        if self.family in ("gaussian", "scaled-t") and K != 1:
            raise ValueError(f"{self.family} prior takes exactly one component")
        if self.family == "scaled-t" and self.t_dof <= 2:
            raise ValueError("scaled-t needs t_dof > 2 for a finite covariance")

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def is_crc(self) -> bool:
        return bool(np.any(self.crc_slope != 0.0))

    @classmethod
    def gaussian(cls, mean, cov, crc_slope=None) -> "PriorSpec":
        mean = np.atleast_1d(np.asarray(mean, float))
        slope = np.zeros(mean.size) if crc_slope is None else crc_slope
        return cls("gaussian", [1.0], mean[None, :], np.asarray(cov, float)[None], slope)

    @classmethod
    def mixture(cls, weights, means, covs, crc_slope=None) -> "PriorSpec":
        means = np.atleast_2d(np.asarray(means, float))
        slope = np.zeros(means.shape[1]) if crc_slope is None else crc_slope
        return cls("gaussian-mixture", weights, means, np.asarray(covs, float), slope)

    @classmethod
    def scaled_t(cls, mean, cov, dof=5.0, crc_slope=None) -> "PriorSpec":
        mean = np.atleast_1d(np.asarray(mean, float))
        slope = np.zeros(mean.size) if crc_slope is None else crc_slope
        return cls("scaled-t", [1.0], mean[None, :], np.asarray(cov, float)[None], slope, float(dof))

    def mean(self) -> np.ndarray:
        """E[lambda_i] (Y_i0 is standardized, so the slope drops out)."""
        return self.weights @ self.means

    def cov(self) -> np.ndarray:
        """Var(lambda_i) including mixture spread and the Y_i0 channel."""
        mu = self.mean()
        within = np.einsum("k,kij->ij", self.weights, self.covs)
        centered = self.means - mu
        between = np.einsum("k,ki,kj->ij", self.weights, centered, centered)
        return within + between + np.outer(self.crc_slope, self.crc_slope)

    def conditional_cov(self) -> np.ndarray:
        """Var(lambda_i | Y_i0): mixture covariance without the Y_i0 channel."""
        mu = self.mean()
        within = np.einsum("k,kij->ij", self.weights, self.covs)
        centered = self.means - mu
        return within + np.einsum("k,ki,kj->ij", self.weights, centered, centered)

    def sample(self, rng: np.random.Generator, y0: np.ndarray) -> np.ndarray:
        n = y0.size
        d = self.dim
        shift = np.outer(y0, self.crc_slope)
        if self.family == "scaled-t":
            scale = self.covs[0] * (self.t_dof - 2.0) / self.t_dof
            chol = np.linalg.cholesky(scale)
            z = rng.standard_normal((n, d))
            w = rng.chisquare(self.t_dof, size=n)
            return self.means[0] + shift + (z @ chol.T) * np.sqrt(self.t_dof / w)[:, None]
        comp = rng.choice(self.weights.size, size=n, p=self.weights)
        z = rng.standard_normal((n, d))
        out = np.empty((n, d))
        for k in range(self.weights.size):
            mask = comp == k
            if mask.any():
                chol = np.linalg.cholesky(self.covs[k])
                out[mask] = self.means[k] + z[mask] @ chol.T
        return out + shift

    def to_dict(self) -> dict:
        return {
            "family": self.family,
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "covs": self.covs.tolist(),
            "crc_slope": self.crc_slope.tolist(),
            "t_dof": self.t_dof,
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "PriorSpec":
        return cls(
            payload["family"],
            payload["weights"],
            payload["means"],
            payload["covs"],
            payload["crc_slope"],
            payload.get("t_dof", 5.0),
        )


@dataclass(frozen=True)
class DgpSpec:
    """Everything needed to draw one synthetic panel."""

    name: str
    n_units: int
    T: int
    design: EventDesign
    theta: CommonParams
    prior: PriorSpec
    seed: int = 0

    def __post_init__(self) -> None:
        self.design.validate_horizon(self.T)
        if self.theta.p != self.design.p:
            raise ValueError("theta.rho_delta length must equal design.p")
        if self.prior.dim != self.design.n_effects:
            raise ValueError("prior dimension must equal 1 + p")
        if self.n_units < 2:
            raise ValueError("n_units must be at least 2")

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "n_units": self.n_units,
            "T": self.T,
            "t0": self.design.t0,
            "J": self.design.J,
            "p": self.design.p,
            "rho_y": self.theta.rho_y,
            "rho_delta": self.theta.rho_delta.tolist(),
            "sigma2_u": self.theta.sigma2_u,
            "sigma2_eps": self.theta.sigma2_eps,
            "prior": self.prior.to_dict(),
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "DgpSpec":
        return cls(
            name=payload.get("name", "custom"),
            n_units=int(payload["n_units"]),
            T=int(payload["T"]),
            design=EventDesign(int(payload["t0"]), int(payload["J"]), int(payload["p"])),
            theta=CommonParams(
                rho_y=float(payload["rho_y"]),
                rho_delta=payload["rho_delta"],
                sigma2_u=float(payload["sigma2_u"]),
                sigma2_eps=float(payload["sigma2_eps"]),
            ),
            prior=PriorSpec.from_dict(payload["prior"]),
            seed=int(payload.get("seed", 0)),
        )


@dataclass
class SimulatedPanel:
    """Simulated panel plus the latent truth used by oracles and risk metrics."""

    panel: PanelData
    alpha: np.ndarray
    delta_init: np.ndarray
    trajectories: np.ndarray
    prior: PriorSpec
    spec: DgpSpec
    innovations: np.ndarray  # drawn U_it, columns t = 1..T

    @property
    def lambda_matrix(self) -> np.ndarray:
        """True lambda_i stacked as an (n, 1+p) matrix."""
        return np.column_stack([self.alpha, self.delta_init])

    def unit_effects(self, i: int) -> UnitEffects:
        return UnitEffects(float(self.alpha[i]), self.delta_init[i])


def simulate(spec: DgpSpec) -> SimulatedPanel:
    """Draw a panel from the outcome recursion.

    Draw order is fixed (Y_0, lambda, effect shocks, outcome noise) so a seed
    pins the panel bit-for-bit.
    """
    rng = np.random.default_rng(spec.seed)
    n, T = spec.n_units, spec.T
    design, theta = spec.design, spec.theta
    J, p = design.J, design.p

    y0 = rng.standard_normal(n)
    lam = spec.prior.sample(rng, y0)
    alpha = lam[:, 0]
    delta_init = lam[:, 1:]

    rep = effect_representation(theta.rho_delta, J)
    eps = rng.normal(0.0, math.sqrt(theta.sigma2_eps), size=(n, J + 1 - p))
    trajectories = delta_init @ rep.init_coeffs.T + eps @ rep.shock_coeffs.T

    U = rng.normal(0.0, math.sqrt(theta.sigma2_u), size=(n, T))
    Y = np.empty((n, T + 1))
    Y[:, 0] = y0
    for t in range(1, T + 1):
        Y[:, t] = theta.rho_y * Y[:, t - 1] + alpha + U[:, t - 1]
        j = t - design.t0
        if 0 <= j <= J:
            Y[:, t] += trajectories[:, j]

    return SimulatedPanel(
        panel=PanelData(Y),
        alpha=alpha,
        delta_init=delta_init,
        trajectories=trajectories,
        prior=spec.prior,
        spec=spec,
        innovations=U,
    )


# The four effect-AR cases used throughout the simulation study.
CASE_RHO_DELTA = {
    1: (0.0, 0.0),
    2: (0.3, 0.0),
    3: (0.5, 0.2),
    4: (0.75, -0.25),
}

_LAMBDA_MEAN = np.array([0.0, 3.0, 1.5])
_CRC_SLOPE = np.array([0.5, 0.5, 0.25])
_CORR = 0.5


def _correlation_matrix(d: int, corr: float) -> np.ndarray:
    R = np.full((d, d), corr)
    np.fill_diagonal(R, 1.0)
    return R


def _grid_prior(dist: str, corr: bool, crc: bool) -> PriorSpec:
    slope = _CRC_SLOPE if crc else np.zeros(3)
    if dist == "normal":
        if corr:
            cov = _correlation_matrix(3, _CORR)
        else:
            cov = np.eye(3)
        return PriorSpec.gaussian(_LAMBDA_MEAN, cov, crc_slope=slope)
    # Non-normal: bimodal gaussian mixtures in the (alpha, delta_0) plane with
    # component means separated by 2 within-component s.d. and total variance
    # held at 1 per coordinate.
    a = math.sqrt(0.5)
    sd = np.array([math.sqrt(0.5), math.sqrt(0.5), 1.0])
    if corr:
        within = _correlation_matrix(3, _CORR) * np.outer(sd, sd)
        offset = np.array([a, a, 0.0])
        means = np.vstack([_LAMBDA_MEAN - offset, _LAMBDA_MEAN + offset])
        return PriorSpec.mixture([0.5, 0.5], means, np.stack([within, within]), crc_slope=slope)
    # Independent case: corner mixture (+-a, +-a) = product of two scalar
    # two-point mixtures, so alpha stays independent of the effect block while
    # both margins remain bimodal.
    within = np.diag(sd**2)
    means = np.array(
        [
            _LAMBDA_MEAN + [-a, -a, 0.0],
            _LAMBDA_MEAN + [-a, +a, 0.0],
            _LAMBDA_MEAN + [+a, -a, 0.0],
            _LAMBDA_MEAN + [+a, +a, 0.0],
        ]
    )
    return PriorSpec.mixture([0.25] * 4, means, np.stack([within] * 4), crc_slope=slope)


def simulation_grid(n_units: int = 1000, T: int = 10, seed: int = 0) -> list[DgpSpec]:
    """The 32-spec simulation grid: 4 AR cases x {normal, nonnormal} x
    {rc, crc} x {indep, corr}, all at t0=5, J=5, rho_Y=0.8, sigma2 = 1/T."""
    design = EventDesign(t0=5, J=5, p=2)
    specs = []
    idx = 0
    for case, rho_delta in CASE_RHO_DELTA.items():
        theta = CommonParams(
            rho_y=0.8, rho_delta=rho_delta, sigma2_u=1.0 / T, sigma2_eps=1.0 / T
        )
        for dist in ("normal", "nonnormal"):
            for dep in ("rc", "crc"):
                for corr_tag in ("indep", "corr"):
                    prior = _grid_prior(dist, corr_tag == "corr", dep == "crc")
                    name = f"case{case}-{dist}-{dep}-{corr_tag}"
                    spec_seed = int(
                        np.random.SeedSequence(entropy=seed, spawn_key=(idx,)).generate_state(
                            1, dtype=np.uint64
                        )[0]
                        >> 1
                    )
                    specs.append(
                        DgpSpec(
                            name=name,
                            n_units=n_units,
                            T=T,
                            design=design,
                            theta=theta,
                            prior=prior,
                            seed=spec_seed,
                        )
                    )
                    idx += 1
    return specs


def design_by_name(name: str, n_units: int = 1000, T: int = 10, seed: int = 0) -> DgpSpec:
    for spec in simulation_grid(n_units=n_units, T=T, seed=seed):
        if spec.name == name:
            return spec
    known = ", ".join(s.name for s in simulation_grid()[:4]) + ", ..."
    raise KeyError(f"unknown design {name!r}; names look like {known}")
