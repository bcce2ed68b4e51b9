"""Command-line interface.

Subcommands: simulate, fit, eb, test, montecarlo, ovb-demo, aggregate.
JSON configs use the same field names as the corresponding dataclasses.
"""
from __future__ import annotations

import argparse
import json
from dataclasses import replace
from pathlib import Path

import numpy as np
import pandas as pd

from . import __version__, ebayes
from .baselines import ovb_demo
from .dataio import (
    aggregate_monthly,
    ingest_csv,
    panel_to_frame,
    write_csv,
    write_manifest,
)
from .montecarlo import ESTIMATOR_CHOICES, McConfig, run_montecarlo
from .pipeline import (
    PipelineOptions,
    common_params_frame,
    fit_pipeline,
    tests_frame,
    unit_effects_frame,
    write_pipeline_outputs,
)
from .qmle import QmleOptions, fit
from .simulate import DgpSpec, design_by_name, simulate
from .waldtests import default_tests

__all__ = ["main", "build_parser"]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dynevent",
        description="Two-step estimation of heterogeneous dynamic treatment effects.",
    )
    parser.add_argument("--version", action="version", version=f"dynevent {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="draw a synthetic panel and write it to CSV")
    sim.add_argument("--design", help="named design, e.g. case3-nonnormal-crc-corr")
    sim.add_argument("--config", help="JSON file with DgpSpec fields")
    sim.add_argument("--n-units", type=int, default=1000)
    sim.add_argument("--T", type=int, default=10)
    sim.add_argument("--seed", type=int, default=0)
    sim.add_argument("--out", required=True, help="output directory")
    sim.set_defaults(func=_cmd_simulate)

    fit_p = sub.add_parser("fit", help="run the full estimation pipeline on a panel CSV")
    _add_panel_args(fit_p)
    fit_p.add_argument(
        "--backends", default="parametric,kernel,mixture",
        help="comma-separated empirical-Bayes backends",
    )
    fit_p.add_argument("--n-components", type=int, default=3)
    fit_p.add_argument("--leads", type=int, default=None)
    fit_p.add_argument("--alpha", type=float, default=0.05)
    fit_p.add_argument("--no-truncate", action="store_true")
    fit_p.add_argument("--no-figures", action="store_true")
    fit_p.add_argument("--out", required=True)
    fit_p.set_defaults(func=_cmd_fit)

    eb = sub.add_parser("eb", help="estimate unit effects with one shrinkage backend")
    _add_panel_args(eb)
    eb.add_argument("--backend", default="parametric",
                    choices=("parametric", "kernel", "mixture"))
    eb.add_argument("--n-components", type=int, default=3)
    eb.add_argument("--no-truncate", action="store_true")
    eb.add_argument("--out", required=True)
    eb.set_defaults(func=_cmd_eb)

    test = sub.add_parser("test", help="run the specification tests on a panel CSV")
    _add_panel_args(test)
    test.add_argument("--alpha", type=float, default=0.05)
    test.add_argument("--out", default=None, help="optional output directory")
    test.set_defaults(func=_cmd_test)

    mc = sub.add_parser("montecarlo", help="run the simulation study")
    mc.add_argument("--config", help="JSON file with McConfig fields")
    mc.add_argument("--designs", help="comma-separated design names")
    mc.add_argument("--n-sim", type=int, default=None)
    mc.add_argument("--n-units", type=int, default=None)
    mc.add_argument("--T", type=int, default=None)
    mc.add_argument("--estimators", default=None,
                    help=f"comma-separated subset of {','.join(ESTIMATOR_CHOICES)}")
    mc.add_argument("--seed", type=int, default=None)
    mc.add_argument("--threads", type=int, default=None)
    mc.add_argument("--no-figures", action="store_true")
    mc.add_argument("--out", required=True)
    mc.set_defaults(func=_cmd_montecarlo)

    ovb = sub.add_parser("ovb-demo", help="static event-study bias demonstration")
    ovb.add_argument("--rho-y", type=float, default=0.8)
    ovb.add_argument("--delta", default="1.0,1.2,0.5")
    ovb.add_argument("--n-units", type=int, default=100_000)
    ovb.add_argument("--seed", type=int, default=0)
    ovb.add_argument("--no-figures", action="store_true")
    ovb.add_argument("--out", required=True)
    ovb.set_defaults(func=_cmd_ovb)

    agg = sub.add_parser("aggregate", help="average monthly rows to unit-year observations")
    agg.add_argument("--data", required=True)
    agg.add_argument("--unit-col", default="unit")
    agg.add_argument("--year-col", default="year")
    agg.add_argument("--month-col", default="month")
    agg.add_argument("--value-col", default="value")
    agg.add_argument("--out", required=True, help="output CSV path")
    agg.set_defaults(func=_cmd_aggregate)

    return parser


def _add_panel_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", required=True, help="long-format CSV: unit,time,outcome")
    p.add_argument("--t0", type=int, required=True, help="adoption period on the 0..T axis")
    p.add_argument("--J", type=int, required=True, help="last event horizon")
    p.add_argument("--p", type=int, default=2, help="effect autoregression order")
    p.add_argument("--unit-col", default="unit")
    p.add_argument("--time-col", default="time")
    p.add_argument("--outcome-col", default="outcome")


def _load_panel(args):
    schema = {"unit": args.unit_col, "time": args.time_col, "outcome": args.outcome_col}
    return ingest_csv(args.data, t0=args.t0, J=args.J, p=args.p, schema=schema)


def _cmd_simulate(args) -> int:
    if bool(args.design) == bool(args.config):
        raise SystemExit("simulate needs exactly one of --design or --config")
    if args.config:
        with open(args.config, encoding="utf-8") as fh:
            spec = DgpSpec.from_dict(json.load(fh))
        if args.seed != 0:
            spec = replace(spec, seed=args.seed)
    else:
        spec = design_by_name(args.design, n_units=args.n_units, T=args.T, seed=args.seed)
    sim = simulate(spec)
    out = Path(args.out)
    write_csv(panel_to_frame(sim.panel), out / "panel.csv")
    truth = {"unit": np.arange(spec.n_units), "alpha": sim.alpha}
    for m in range(spec.design.p):
        truth[f"delta_init_{m}"] = sim.delta_init[:, m]
    for j in range(spec.design.J + 1):
        truth[f"effect_{j}"] = sim.trajectories[:, j]
    write_csv(pd.DataFrame(truth), out / "truth.csv")
    write_manifest(
        out / "run_manifest.json",
        {"tool": "dynevent simulate", "version": __version__, "config": spec.to_dict()},
    )
    print(f"wrote panel.csv and truth.csv for {spec.name} to {out}")
    return 0


def _pipeline_options(args) -> PipelineOptions:
    return PipelineOptions(
        backends=tuple(b.strip() for b in args.backends.split(",") if b.strip()),
        n_components=args.n_components,
        leads=args.leads,
        alpha=args.alpha,
        truncate=not args.no_truncate,
    )


def _cmd_fit(args) -> int:
    panel, design, units = _load_panel(args)
    opts = _pipeline_options(args)
    res = fit_pipeline(panel, design, opts)
    config_echo = {
        "data": str(args.data), "t0": args.t0, "J": args.J, "p": args.p,
        "backends": list(opts.backends), "alpha": opts.alpha,
        "truncate": opts.truncate, "leads": opts.leads,
    }
    write_pipeline_outputs(
        res, args.out, unit_ids=units, figures=not args.no_figures,
        config_echo=config_echo,
    )
    print(res.qmle.summary())
    print(f"\noutputs written to {args.out}")
    return 0


def _cmd_eb(args) -> int:
    panel, design, units = _load_panel(args)
    result = fit(panel, design, QmleOptions())
    ss = ebayes.sufficient_stats(panel, design, result.theta)
    c_n = None if args.no_truncate else ebayes.default_truncation_radius(ss)
    if args.backend == "parametric":
        backend = ebayes.fit_parametric(ss, result.prior)
    elif args.backend == "kernel":
        backend = ebayes.fit_kernel(ss)
    else:
        backend = ebayes.fit_mixture(ss, n_components=args.n_components)
    eb = ebayes.tweedie(ss, backend, c_n=c_n)

    res_stub = _EbBundle(result, ss, {args.backend: eb})
    frame = unit_effects_frame(res_stub, unit_ids=units)
    out = Path(args.out)
    write_csv(frame, out / "unit_effects.csv")
    write_manifest(
        out / "run_manifest.json",
        {
            "tool": "dynevent eb",
            "version": __version__,
            "backend": args.backend,
            "truncation_count": eb.truncation_count,
            "fallback_count": eb.fallback_count,
            "config": {"data": str(args.data), "t0": args.t0, "J": args.J, "p": args.p},
        },
    )
    print(
        f"{args.backend}: {ss.n_units} units, "
        f"{eb.truncation_count} truncated, {eb.fallback_count} kept raw"
    )
    return 0


class _EbBundle:
    """Minimal stand-in so unit_effects_frame serves the eb subcommand too."""

    def __init__(self, qmle_result, ss, eb):
        self.qmle = qmle_result
        self.suffstats = ss
        self.eb = eb

    @property
    def design(self):
        return self.qmle.design


def _cmd_test(args) -> int:
    panel, design, _ = _load_panel(args)
    result = fit(panel, design, QmleOptions())
    tests = default_tests(result, alpha=args.alpha)
    frame = tests_frame(tests)
    print(frame.to_string(index=False))
    if args.out:
        out = Path(args.out)
        write_csv(frame, out / "tests.csv")
        write_csv(common_params_frame(result), out / "common_params.csv")
        write_manifest(
            out / "run_manifest.json",
            {
                "tool": "dynevent test",
                "version": __version__,
                "alpha": args.alpha,
                "config": {"data": str(args.data), "t0": args.t0, "J": args.J, "p": args.p},
            },
        )
    return 0


def _cmd_montecarlo(args) -> int:
    payload: dict = {}
    if args.config:
        with open(args.config, encoding="utf-8") as fh:
            payload = json.load(fh)
    if args.designs:
        payload["designs"] = [d.strip() for d in args.designs.split(",") if d.strip()]
    if args.estimators:
        payload["estimators"] = [e.strip() for e in args.estimators.split(",") if e.strip()]
    for key, val in (
        ("n_sim", args.n_sim), ("n_units", args.n_units), ("T", args.T),
        ("seed", args.seed), ("threads", args.threads),
    ):
        if val is not None:
            payload[key] = val
    config = McConfig.from_dict(payload)
    report = run_montecarlo(config)
    report.write(args.out)
    if not args.no_figures:
        from . import figures as figmod

        out = Path(args.out)
        if len(report.event_study):
            figmod.mc_event_study_figure(report.event_study, out / "mc_event_study.png")
        if len(report.risks):
            figmod.mc_risk_figure(report.risks, out / "mc_risks.png")
    n_fail = len(report.failures)
    print(
        f"{len(config.designs)} designs x {config.n_sim} replications; "
        f"{n_fail} failures; aborted: {report.aborted or 'none'}"
    )
    print(f"report written to {args.out}")
    return 0


def _cmd_ovb(args) -> int:
    delta = tuple(float(x) for x in args.delta.split(","))
    table = ovb_demo(rho_y=args.rho_y, delta=delta, n_units=args.n_units, seed=args.seed)
    out = Path(args.out)
    write_csv(table, out / "ovb_demo.csv")
    write_manifest(
        out / "run_manifest.json",
        {
            "tool": "dynevent ovb-demo",
            "version": __version__,
            "config": {
                "rho_y": args.rho_y, "delta": list(delta),
                "n_units": args.n_units, "seed": args.seed,
            },
        },
    )
    if not args.no_figures:
        from . import figures as figmod

        figmod.ovb_figure(table, out / "ovb_path.png")
    print(table.to_string(index=False))
    return 0


def _cmd_aggregate(args) -> int:
    frame = aggregate_monthly(
        args.data,
        unit_col=args.unit_col,
        year_col=args.year_col,
        month_col=args.month_col,
        value_col=args.value_col,
    )
    write_csv(frame, args.out)
    print(f"wrote {len(frame)} unit-year rows to {args.out}")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    raise SystemExit(main())
