"""End-to-end fit: common parameters, unit effects, baselines, tests, files."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from . import __version__, ebayes
from .baselines import EventStudyFit, twfe, twfe_ar1
from .dataio import write_csv, write_manifest
from .model import EventDesign, PanelData, effect_representation
from .qmle import QmleOptions, QmleResult, fit
from .waldtests import WaldTest, default_tests

__all__ = ["PipelineOptions", "PipelineResult", "fit_pipeline", "write_pipeline_outputs"]

_BACKEND_CHOICES = ("parametric", "kernel", "mixture")


@dataclass(frozen=True)
class PipelineOptions:
    backends: tuple[str, ...] = ("parametric", "kernel", "mixture")
    n_components: int = 3
    leads: int | None = None
    alpha: float = 0.05
    truncate: bool = True
    qmle: QmleOptions = field(default_factory=QmleOptions)

    def __post_init__(self) -> None:
        object.__setattr__(self, "backends", tuple(self.backends))
        bad = [b for b in self.backends if b not in _BACKEND_CHOICES]
        if bad:
            raise ValueError(f"unknown backends {bad}; choose from {_BACKEND_CHOICES}")


@dataclass
class PipelineResult:
    qmle: QmleResult
    suffstats: ebayes.SuffStats
    eb: dict[str, ebayes.EbResult]
    event_study: dict[str, EventStudyFit]
    tests: list[WaldTest]
    options: PipelineOptions

    @property
    def design(self) -> EventDesign:
        return self.qmle.design


def fit_pipeline(
    panel: PanelData, design: EventDesign, options: PipelineOptions | None = None
) -> PipelineResult:
    """QMLE, then empirical-Bayes shrinkage per backend, baselines, and tests."""
    opts = options or PipelineOptions()
    result = fit(panel, design, opts.qmle)
    ss = ebayes.sufficient_stats(panel, design, result.theta)
    c_n = ebayes.default_truncation_radius(ss) if opts.truncate else None

    eb_results: dict[str, ebayes.EbResult] = {}
    for name in opts.backends:
        if name == "parametric":
            backend = ebayes.fit_parametric(ss, result.prior)
        elif name == "kernel":
            backend = ebayes.fit_kernel(ss)
        else:
            backend = ebayes.fit_mixture(ss, n_components=opts.n_components)
        eb_results[name] = ebayes.tweedie(ss, backend, c_n=c_n)

    event_fits = {
        "twfe": twfe(panel, design, leads=opts.leads),
        "twfe_ar1": twfe_ar1(panel, design, leads=opts.leads),
    }
    tests = default_tests(result, alpha=opts.alpha)
    return PipelineResult(
        qmle=result,
        suffstats=ss,
        eb=eb_results,
        event_study=event_fits,
        tests=tests,
        options=opts,
    )


def common_params_frame(result: QmleResult) -> pd.DataFrame:
    se = (
        np.sqrt(np.clip(np.diag(result.sandwich_cov), 0.0, None))
        if result.sandwich_cov is not None
        else np.full(result.params.size, np.nan)
    )
    return pd.DataFrame(
        {"parameter": result.param_names, "estimate": result.params, "std_error": se}
    )


def unit_effects_frame(res: PipelineResult, unit_ids=None) -> pd.DataFrame:
    """Raw and shrunk unit effects, one row per unit x estimator."""
    ss = res.suffstats
    design = res.design
    rep = effect_representation(res.qmle.theta.rho_delta, design.J)
    units = np.arange(ss.n_units) if unit_ids is None else np.asarray(unit_ids)

    def block(name: str, lam: np.ndarray, traj: np.ndarray) -> pd.DataFrame:
        data = {"unit": units, "estimator": name, "alpha": lam[:, 0]}
        for m in range(design.p):
            data[f"delta_init_{m}"] = lam[:, 1 + m]
        for j in range(design.J + 1):
            data[f"effect_{j}"] = traj[:, j]
        return pd.DataFrame(data)

    raw_traj = ss.lambda_hat[:, 1:] @ rep.init_coeffs.T
    frames = [block("raw", ss.lambda_hat, raw_traj)]
    for name, eb in res.eb.items():
        frames.append(block(name, eb.lambda_tilde, eb.trajectories))
    return pd.concat(frames, ignore_index=True)


def event_study_frame(res: PipelineResult) -> pd.DataFrame:
    """Event-study paths: the two regression baselines plus mean shrunk paths."""
    rows = []
    for name, fit_ in res.event_study.items():
        frame = fit_.to_frame()
        frame.insert(0, "estimator", name)
        rows.append(frame)
    n = res.suffstats.n_units
    for name, eb in res.eb.items():
        traj = eb.trajectories
        rows.append(
            pd.DataFrame(
                {
                    "estimator": name,
                    "horizon": np.arange(res.design.J + 1),
                    "coefficient": traj.mean(axis=0),
                    "std_error": traj.std(axis=0, ddof=1) / np.sqrt(n),
                }
            )
        )
    return pd.concat(rows, ignore_index=True)


def tests_frame(tests: list[WaldTest]) -> pd.DataFrame:
    return pd.DataFrame([t.row() for t in tests])


def write_pipeline_outputs(
    res: PipelineResult,
    out_dir,
    unit_ids=None,
    figures: bool = True,
    config_echo: dict | None = None,
) -> dict:
    """Write the delimited outputs (plus figures) and return the manifest."""
    out = Path(out_dir)
    write_csv(common_params_frame(res.qmle), out / "common_params.csv")
    write_csv(unit_effects_frame(res, unit_ids), out / "unit_effects.csv")
    write_csv(event_study_frame(res), out / "event_study.csv")
    write_csv(tests_frame(res.tests), out / "tests.csv")

    manifest = {
        "tool": "dynevent fit",
        "version": __version__,
        "n_units": res.qmle.n_units,
        "T": res.qmle.T,
        "design": {"t0": res.design.t0, "J": res.design.J, "p": res.design.p},
        "loglik": res.qmle.loglik,
        "converged": res.qmle.converged,
        "grad_norm": res.qmle.grad_norm,
        "backends": list(res.options.backends),
        "truncation_counts": {k: v.truncation_count for k, v in res.eb.items()},
        "fallback_counts": {k: v.fallback_count for k, v in res.eb.items()},
        "config": config_echo or {},
    }
    write_manifest(out / "run_manifest.json", manifest)

    if figures:
        from . import figures as figmod

        figmod.event_study_figure(event_study_frame(res), out / "event_study.png")
        figmod.effect_distribution_figure(
            unit_effects_frame(res, unit_ids), res.design, out / "effect_distributions.png"
        )
    return manifest
