"""Simulation harness: run designs x replications, aggregate bias/risk/size.

Replication seeds are spawned from the master seed with
``np.random.SeedSequence(entropy=seed, spawn_key=(design_index, rep))`` so
results are reproducible and independent of the worker count.
"""
from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import pandas as pd

from . import __version__, ebayes, qmle
from .baselines import twfe, twfe_ar1
from .dataio import write_csv, write_manifest
from .model import PriorParams
from .simulate import DgpSpec, design_by_name, simulate
from .waldtests import default_tests

__all__ = [
    "EB_ESTIMATORS",
    "ESTIMATOR_CHOICES",
    "McConfig",
    "McReport",
    "replication_seed",
    "run_montecarlo",
]

_log = logging.getLogger(__name__)

EB_ESTIMATORS = ("oracle", "parametric", "kernel", "mixture")
ESTIMATOR_CHOICES = EB_ESTIMATORS + ("twfe", "twfe_ar1")

# A design whose failure share exceeds this is dropped from every aggregate.
_MAX_FAILURE_SHARE = 0.10
_N_SAMPLE_UNITS = 20


@dataclass(frozen=True)
class McConfig:
    """Configuration for one simulation run; maps 1:1 onto the JSON config."""

    designs: tuple[str, ...]
    n_sim: int = 100
    n_units: int | None = None
    T: int | None = None
    estimators: tuple[str, ...] = ESTIMATOR_CHOICES
    seed: int = 0
    threads: int = 1
    n_components: int = 3
    alpha: float = 0.05
    truncate: bool = True

    def __post_init__(self) -> None:
        object.__setattr__(self, "designs", tuple(self.designs))
        object.__setattr__(self, "estimators", tuple(self.estimators))
        if not self.designs:
            raise ValueError("at least one design name is required")
        if self.n_sim < 1:
            raise ValueError("n_sim must be at least 1")
        if self.threads < 1:
            raise ValueError("threads must be at least 1")
        bad = [e for e in self.estimators if e not in ESTIMATOR_CHOICES]
        if bad:
            raise ValueError(f"unknown estimators {bad}; choose from {ESTIMATOR_CHOICES}")

    def to_dict(self) -> dict:
        return {
            "designs": list(self.designs),
            "n_sim": self.n_sim,
            "n_units": self.n_units,
            "T": self.T,
            "estimators": list(self.estimators),
            "seed": self.seed,
            "threads": self.threads,
            "n_components": self.n_components,
            "alpha": self.alpha,
            "truncate": self.truncate,
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "McConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(payload) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        merged = {**{"designs": ()}, **payload}
        return cls(**merged)


def replication_seed(master_seed: int, design_index: int, rep: int) -> int:
    """Derive the per-replication RNG seed; stable across platforms."""
    ss = np.random.SeedSequence(entropy=master_seed, spawn_key=(design_index, rep))
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def _true_param_vector(spec: DgpSpec) -> np.ndarray:
    prior = PriorParams(
        b0=spec.prior.mean(),
        b1=spec.prior.crc_slope
        if spec.prior.crc_slope is not None
        else np.zeros(spec.prior.dim),
        sigma_lambda=spec.prior.conditional_cov(),
    )
    return qmle.pack_params(spec.theta, prior)


def _replicate(job: dict) -> dict:
    """Run one replication: simulate, fit, shrink, test.  Must stay picklable."""
    out = {"design": job["design"], "rep": job["rep"], "seed": job["seed"], "ok": True}
    try:
        spec = design_by_name(job["design"], n_units=job["n_units"], T=job["T"])
        spec = replace(spec, seed=job["seed"])
        sim = simulate(spec)
        result = qmle.fit(sim.panel, spec.design)
        out["params"] = result.params.tolist()
        out["truth"] = _true_param_vector(spec).tolist()
        out["param_names"] = result.param_names

        out["tests"] = {
            t.name: bool(t.reject) for t in default_tests(result, alpha=job["alpha"])
        }

        ss = ebayes.sufficient_stats(sim.panel, spec.design, result.theta)
        c_n = ebayes.default_truncation_radius(ss) if job["truncate"] else None
        truth_lam = sim.lambda_matrix
        risks = {"raw": ebayes.compound_risk(ss.lambda_hat, truth_lam)}
        paths = {"truth": sim.trajectories.mean(axis=0).tolist()}
        samples = {}
        eb_requested = [e for e in job["estimators"] if e in EB_ESTIMATORS]
        for name in eb_requested:
            if name == "oracle":
                backend = ebayes.fit_oracle(ss, sim.prior)
            elif name == "parametric":
                backend = ebayes.fit_parametric(ss, result.prior)
            elif name == "kernel":
                backend = ebayes.fit_kernel(ss)
            else:
                backend = ebayes.fit_mixture(ss, n_components=job["n_components"])
            eb = ebayes.tweedie(ss, backend, c_n=c_n)
            risks[name] = ebayes.compound_risk(eb, truth_lam)
            paths[name] = eb.trajectories.mean(axis=0).tolist()
            if job["rep"] == 0:
                samples[name] = eb.trajectories[:_N_SAMPLE_UNITS].tolist()
        if job["rep"] == 0:
            k = min(_N_SAMPLE_UNITS, sim.trajectories.shape[0])
            samples["truth"] = sim.trajectories[:k].tolist()

        event_paths = {}
        if "twfe" in job["estimators"]:
            f = twfe(sim.panel, spec.design)
            event_paths["twfe"] = {
                "horizons": f.horizons.tolist(),
                "coefficients": f.coefficients.tolist(),
            }
        if "twfe_ar1" in job["estimators"]:
            f = twfe_ar1(sim.panel, spec.design)
            event_paths["twfe_ar1"] = {
                "horizons": f.horizons.tolist(),
                "coefficients": f.coefficients.tolist(),
            }

        out["risks"] = risks
        out["paths"] = paths
        out["event_paths"] = event_paths
        out["samples"] = samples
    except Exception as exc:  # failures are data, not crashes
        out["ok"] = False
        out["error"] = f"{type(exc).__name__}: {exc}"
    return out


@dataclass
class McReport:
    """Aggregated simulation output; one frame per CSV the harness writes."""

    config: McConfig
    params: pd.DataFrame
    rejections: pd.DataFrame
    risks: pd.DataFrame
    event_study: pd.DataFrame
    trajectory_sample: pd.DataFrame
    failures: pd.DataFrame
    aborted: list[str] = field(default_factory=list)

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        write_csv(self.params, out / "mc_report.csv")
        write_csv(self.rejections, out / "mc_rejections.csv")
        write_csv(self.risks, out / "mc_risks.csv")
        write_csv(self.event_study, out / "mc_event_study.csv")
        write_csv(self.trajectory_sample, out / "mc_trajectory_sample.csv")
        write_csv(self.failures, out / "mc_failures.csv")
        write_manifest(out / "run_manifest.json", self.manifest())

    def manifest(self) -> dict:
        seeds = {
            name: [replication_seed(self.config.seed, d, r) for r in range(self.config.n_sim)]
            for d, name in enumerate(self.config.designs)
        }
        import scipy

        return {
            "tool": "dynevent montecarlo",
            "version": __version__,
            "numpy_version": np.__version__,
            "scipy_version": scipy.__version__,
            "pandas_version": pd.__version__,
            "config": self.config.to_dict(),
            "seed_rule": "SeedSequence(entropy=seed, spawn_key=(design_index, rep)) >> 1",
            "replication_seeds": seeds,
            "aborted_designs": self.aborted,
        }


def run_montecarlo(config: McConfig) -> McReport:
    """Execute every design x replication cell and aggregate.

    Failed replications are recorded with their seed and excluded from the
    aggregates; a design whose failure share exceeds 10% is dropped entirely
    and listed in ``aborted``.
    """
    jobs = []
    for d_idx, name in enumerate(config.designs):
        for rep in range(config.n_sim):
            jobs.append(
                {
                    "design": name,
                    "design_index": d_idx,
                    "rep": rep,
                    "seed": replication_seed(config.seed, d_idx, rep),
                    "n_units": config.n_units if config.n_units is not None else 1000,
                    "T": config.T if config.T is not None else 10,
                    "estimators": list(config.estimators),
                    "n_components": config.n_components,
                    "alpha": config.alpha,
                    "truncate": config.truncate,
                }
            )

    if config.threads > 1:
        with ProcessPoolExecutor(max_workers=config.threads) as pool:
            results = list(pool.map(_replicate, jobs, chunksize=1))
    else:
        results = [_replicate(job) for job in jobs]

    by_design: dict[str, list[dict]] = {name: [] for name in config.designs}
    for res in results:
        by_design[res["design"]].append(res)

    fail_rows = []
    aborted = []
    param_rows, rej_rows, risk_rows, path_rows, sample_rows = [], [], [], [], []
    for name in config.designs:
        rows = by_design[name]
        failures = [r for r in rows if not r["ok"]]
        for r in failures:
            fail_rows.append(
                {"design": name, "rep": r["rep"], "seed": r["seed"], "error": r["error"]}
            )
        if len(failures) > _MAX_FAILURE_SHARE * config.n_sim:
            _log.warning(
                "design %s aborted: %d of %d replications failed",
                name,
                len(failures),
                config.n_sim,
            )
            aborted.append(name)
            continue
        good = [r for r in rows if r["ok"]]
        param_rows.extend(_param_table(name, good))
        rej_rows.extend(_rejection_table(name, good, config))
        risk_rows.extend(_risk_table(name, good))
        path_rows.extend(_event_table(name, good))
        sample_rows.extend(_sample_table(name, good))

    return McReport(
        config=config,
        params=pd.DataFrame(
            param_rows,
            columns=["design", "parameter", "true_value", "bias", "sd", "rmse", "n_reps"],
        ),
        rejections=pd.DataFrame(
            rej_rows, columns=["design", "test", "rejection_rate", "n_reps"]
        ),
        risks=pd.DataFrame(
            risk_rows, columns=["design", "estimator", "mean_risk", "sd_risk", "n_reps"]
        ),
        event_study=pd.DataFrame(
            path_rows,
            columns=["design", "estimator", "horizon", "mean_coefficient", "sd_coefficient", "n_reps"],
        ),
        trajectory_sample=pd.DataFrame(
            sample_rows, columns=["design", "estimator", "unit", "horizon", "value"]
        ),
        failures=pd.DataFrame(fail_rows, columns=["design", "rep", "seed", "error"]),
        aborted=aborted,
    )


def _param_table(design: str, good: list[dict]) -> list[dict]:
    if not good:
        return []
    names = good[0]["param_names"]
    est = np.array([r["params"] for r in good])
    truth = np.asarray(good[0]["truth"])
    bias = est.mean(axis=0) - truth
    sd = est.std(axis=0, ddof=0)
    rmse = np.sqrt(np.mean((est - truth) ** 2, axis=0))
    return [
        {
            "design": design,
            "parameter": names[k],
            "true_value": truth[k],
            "bias": bias[k],
            "sd": sd[k],
            "rmse": rmse[k],
            "n_reps": len(good),
        }
        for k in range(len(names))
    ]


def _rejection_table(design: str, good: list[dict], config: McConfig) -> list[dict]:
    if not good:
        return []
    test_names = list(good[0]["tests"])
    return [
        {
            "design": design,
            "test": t,
            "rejection_rate": float(np.mean([r["tests"][t] for r in good])),
            "n_reps": len(good),
        }
        for t in test_names
    ]


def _risk_table(design: str, good: list[dict]) -> list[dict]:
    if not good:
        return []
    names = list(good[0]["risks"])
    rows = []
    for est in names:
        vals = np.array([r["risks"][est] for r in good])
        rows.append(
            {
                "design": design,
                "estimator": est,
                "mean_risk": vals.mean(),
                "sd_risk": vals.std(ddof=0),
                "n_reps": len(good),
            }
        )
    return rows


def _event_table(design: str, good: list[dict]) -> list[dict]:
    if not good:
        return []
    rows = []
    for est in good[0]["paths"]:
        mat = np.array([r["paths"][est] for r in good])
        for j in range(mat.shape[1]):
            rows.append(
                {
                    "design": design,
                    "estimator": est,
                    "horizon": j,
                    "mean_coefficient": mat[:, j].mean(),
                    "sd_coefficient": mat[:, j].std(ddof=0),
                    "n_reps": len(good),
                }
            )
    for est in good[0]["event_paths"]:
        horizons = good[0]["event_paths"][est]["horizons"]
        mat = np.array([r["event_paths"][est]["coefficients"] for r in good])
        for k, j in enumerate(horizons):
            rows.append(
                {
                    "design": design,
                    "estimator": est,
                    "horizon": int(j),
                    "mean_coefficient": mat[:, k].mean(),
                    "sd_coefficient": mat[:, k].std(ddof=0),
                    "n_reps": len(good),
                }
            )
    return rows


def _sample_table(design: str, good: list[dict]) -> list[dict]:
    rows = []
    for r in good:
        if not r["samples"]:
            continue
        for est, mat in r["samples"].items():
            arr = np.asarray(mat)
            for unit in range(arr.shape[0]):
                for j in range(arr.shape[1]):
                    rows.append(
                        {
                            "design": design,
                            "estimator": est,
                            "unit": unit,
                            "horizon": j,
                            "value": arr[unit, j],
                        }
                    )
    return rows
