"""Command-line interface: ``noisy-ot <subcommand> --config FILE.json``.

Exit codes: 0 success, 2 invalid input, 3 numerical non-convergence.
Results go to ``--out DIR`` when given, otherwise to standard output.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Literal, Union

from pydantic import BaseModel, ConfigDict, Field
from pydantic import ValidationError as PydanticValidationError

from . import __version__
from .decisions import (AmbiguitySpec, DecisionProblem, Prescription, entropic_dro_predictor, mle_em, ot_dro_prescribe,
                        select, solve_saa)
from .errors import (DimensionError, DomainError, InfeasibleFormulationError, NoFeasiblePlanError,
                     NonConvergenceError, ValidationError)
from .harness import (ChannelSpec, build_channel, disappointment_csv, flagship_newsvendor, run_disappointment,
                      run_experiment, slopes_csv, validate_config)
from .inference import TestSpec, h_delta_test, type1_rate, type2_rate
from .io import atomic_write, dumps, load_json
from .measures import SEED_MAX, ProbMeasure, SampleRecord, empirical_measure
from .rate import rate_closed_form, rate_variational, smoothed_rate
from .transport import eot_distance

EXIT_OK, EXIT_INVALID, EXIT_NONCONVERGED = 0, 2, 3


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class EotInput(_Strict):
    mu: list[float]
    nu: list[float]
    cost: list[list[Union[float, str]]]
    tol: float = Field(default=1e-10, gt=0)
    max_iter: int = Field(default=10_000, ge=1)


class RateInput(_Strict):
    p_obs: list[float]
    p: list[float]
    channel: ChannelSpec
    delta: float | None = Field(default=None, ge=0)


class SampleInput(_Strict):
    seed: int = Field(ge=0, le=SEED_MAX)
    indices: list[int]


class HtTestInput(_Strict):
    p_obs: list[float] | None = None
    sample: SampleInput | None = None
    null: list[float]
    channel: ChannelSpec
    r: float = Field(gt=0)
    delta: float = Field(default=0.0, ge=0)
    method: Literal["exact", "frank_wolfe"] = "exact"


class HtRatesInput(_Strict):
    null: list[float]
    alt: list[float] | None = None
    channel: ChannelSpec
    r: float = Field(gt=0)
    delta: float = Field(default=0.0, ge=0)
    n_grid: list[int] = Field(min_length=1)
    reps: int = Field(default=1000, ge=1)
    seed: int = Field(default=0, ge=0, le=SEED_MAX)
    method: Literal["auto", "monte_carlo", "exact_binomial"] = "auto"


class PrescribeInput(_Strict):
    p_obs: list[float]
    channel: ChannelSpec
    loss: list[list[float]]
    epsilon: float = Field(default=1e-4, gt=0)
    r: float = Field(default=0.05, gt=0)
    delta: float = Field(default=0.0, ge=0)
    formulation: Literal["SAA_plugin", "MLE_plugin", "EntropicDRO", "OTDRO"] = "OTDRO"


def _parse(model, obj):
    try:
        return model.model_validate(obj)
    except PydanticValidationError as exc:
        errs = [f"{'.'.join(str(p) for p in e['loc'])}: {e['msg']}" for e in exc.errors()]
        raise ValidationError(f"invalid {model.__name__} input", errs) from None


def _load(args):
    if args.config is None:
        raise ValidationError("--config FILE.json is required for this subcommand")
    try:
        return load_json(args.config)
    except (OSError, json.JSONDecodeError) as exc:
        raise ValidationError(f"cannot read config: {exc}") from None


def _emit(args, name, text):
    if args.out is None:
        sys.stdout.write(text)
    else:
        atomic_write(Path(args.out) / name, text)


def cmd_eot(args):
    cfg = _parse(EotInput, _load(args))
    cost = [[(float("inf") if v == "inf" else float(v)) for v in row] for row in cfg.cost]
    rep = eot_distance(ProbMeasure(cfg.mu), ProbMeasure(cfg.nu), cost, cfg.tol, cfg.max_iter)
    _emit(args, "eot.json", dumps(rep))
    if not rep.converged:
        raise NonConvergenceError(f"Sinkhorn stopped after {rep.iterations} iterations, "
                                  f"marginal error {rep.final_marginal_error:.3g}")


def cmd_rate(args):
    cfg = _parse(RateInput, _load(args))
    ch = build_channel(cfg.channel)
    po, p = ProbMeasure(cfg.p_obs), ProbMeasure(cfg.p)
    out = {"closed_form": rate_closed_form(po, p, ch)}
    var = rate_variational(po, p, ch)
    out["variational"] = var
    ok = var.converged
    if cfg.delta is not None:
        sm = smoothed_rate(po, p, ch, cfg.delta)
        out["smoothed"] = sm
        ok = ok and sm.converged
    _emit(args, "rate.json", dumps(out))
    if not ok:
        raise NonConvergenceError("a rate solver hit its iteration cap")


def cmd_httest(args):
    cfg = _parse(HtTestInput, _load(args))
    ch = build_channel(cfg.channel)
    if (cfg.p_obs is None) == (cfg.sample is None):
        raise ValidationError("give exactly one of p_obs and sample")
    if cfg.sample is not None:
        rec = SampleRecord(cfg.sample.indices, cfg.sample.seed, size=ch.n_obs)
        po = empirical_measure(rec, ch.n_obs)
    else:
        po = ProbMeasure(cfg.p_obs)
    spec = TestSpec(ProbMeasure(cfg.null), ch, cfg.r, cfg.delta)
    ev = smoothed_rate(po, spec.null_measure, ch, cfg.delta, method=cfg.method)
    decision = h_delta_test(po, spec, cfg.method)
    _emit(args, "httest.json", dumps({"decision": decision.value, "rate": ev, "radius": cfg.r}))


def cmd_htrates(args):
    obj = _load(args)
    if args.seed is not None:
        obj["seed"] = args.seed
    cfg = _parse(HtRatesInput, obj)
    ch = build_channel(cfg.channel)
    alt = None if cfg.alt is None else ProbMeasure(cfg.alt)
    spec = TestSpec(ProbMeasure(cfg.null), ch, cfg.r, cfg.delta, alt)
    reports = [type1_rate(spec, cfg.n_grid, cfg.reps, cfg.seed, cfg.method, args.threads)]
    if alt is not None:
        reports.append(type2_rate(spec, cfg.n_grid, cfg.reps, cfg.seed, cfg.method, args.threads))
    if args.out is None:
        sys.stdout.write(dumps(reports))
        return
    for rep in reports:
        _emit(args, f"{rep.kind}.csv", rep.to_csv())
    _emit(args, "htrates.json", dumps(reports))


def cmd_prescribe(args):
    cfg = _parse(PrescribeInput, _load(args))
    ch = build_channel(cfg.channel)
    prob = DecisionProblem(cfg.loss, cfg.epsilon)
    po = ProbMeasure(cfg.p_obs)
    if cfg.formulation == "SAA_plugin":
        pres = solve_saa(po, prob)
    elif cfg.formulation == "MLE_plugin":
        em = mle_em(po, ch)
        if not em.converged:
            raise NonConvergenceError("EM hit its iteration cap")
        pres = solve_saa(em.measure, prob)
    elif cfg.formulation == "EntropicDRO":
        vals = [entropic_dro_predictor(z, po, cfg.r, prob) for z in range(prob.n_decisions)]
        z = select(vals, prob.epsilon)
        _, wit = entropic_dro_predictor(z, po, cfg.r, prob, witness=True)
        pres = Prescription(z, vals[z], vals, wit)
    else:
        pres = ot_dro_prescribe(po, AmbiguitySpec(cfg.r, cfg.delta, ch), prob)
    out = pres.to_json()
    out["formulation"] = cfg.formulation
    _emit(args, "prescription.json", dumps(out))


def _experiment(args):
    obj = _load(args)
    if args.seed is not None:
        obj["seed"] = args.seed
    return validate_config(obj)


def cmd_disappoint(args):
    cfg = _experiment(args)
    reports = run_disappointment(cfg, args.threads)
    _emit(args, "disappoint.csv", disappointment_csv(reports))
    if args.out is not None:
        _emit(args, "slopes.csv", slopes_csv(reports))


def cmd_run(args):
    cfg = _experiment(args)
    if args.out is None:
        raise ValidationError("run needs --out DIR")
    run_experiment(cfg, args.out, args.threads)


def cmd_flagship(args):
    if args.out is None:
        raise ValidationError("flagship needs --out DIR")
    seed = 0 if args.seed is None else args.seed
    flagship_newsvendor(seed, args.out, args.threads, args.reps)


COMMANDS = {
    "eot": (cmd_eot, "entropic OT distance and plan by Sinkhorn"),
    "rate": (cmd_rate, "closed-form, variational and smoothed rate functions"),
    "httest": (cmd_httest, "apply the smoothed-rate hypothesis test to data"),
    "htrates": (cmd_htrates, "type I / II error frequencies and slopes"),
    "prescribe": (cmd_prescribe, "robust or plug-in decision and budget"),
    "disappoint": (cmd_disappoint, "disappointment frequencies per formulation and N"),
    "run": (cmd_run, "run an experiment config and write a manifest"),
    "flagship": (cmd_flagship, "Gaussian-noise newsvendor comparison"),
}


def _seed(text):
    v = int(text)
    if not 0 <= v <= SEED_MAX:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def _positive(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be at least 1")
    return v


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="input JSON file")
    common.add_argument("--seed", type=_seed, default=None, help="master seed (overrides the config)")
    common.add_argument("--out", type=Path, default=None, help="output directory (default: stdout)")
    common.add_argument("--threads", type=_positive, default=1, help="worker processes for Monte Carlo")
    parser = argparse.ArgumentParser(prog="noisy-ot", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (fn, help_text) in COMMANDS.items():
        sp = sub.add_parser(name, parents=[common], help=help_text)
        sp.set_defaults(func=fn)
        if name == "flagship":
            sp.add_argument("--reps", type=_positive, default=20_000, help="replications per N")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INVALID
    try:
        args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        for e in exc.errors:
            print(f"  {e}", file=sys.stderr)
        return EXIT_INVALID
    except (DimensionError, DomainError, InfeasibleFormulationError, NoFeasiblePlanError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except NotImplementedError as exc:
        print(f"not implemented: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except NonConvergenceError as exc:
        print(f"not converged: {exc}", file=sys.stderr)
        return EXIT_NONCONVERGED
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
