"""Experiment configuration, orchestration and the flagship newsvendor run.

Every output file except the wall-clock entries of ``manifest.json`` is a
pure function of the validated config, so reruns (serial or parallel) give
byte-identical CSVs.
"""

from __future__ import annotations

import csv
import hashlib
import io as _io
import json
import math
import time
from pathlib import Path
from typing import Literal, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from pydantic import ValidationError as PydanticValidationError

from . import __version__
from .channels import Channel, channel_from_cost, channel_gaussian_grid, channel_noiseless
from .decisions import (FORMULATIONS, RESERVED_FORMULATIONS, AmbiguitySpec, DecisionProblem, Prescriber,
                        disappointment_csv, disappointment_rate, disappointment_runs, report_from_runs)
from .errors import ValidationError
from .inference import TestSpec, type1_rate, type2_rate
from .io import atomic_write, dumps, jsonable, number, sha256_file
from .measures import SEED_MAX, BaseWeights, ProbMeasure

STAGES = ("disappoint", "htrates")


class GaussianChannelSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")
    source: list[float]
    obs: list[float]
    sigma: float = Field(gt=0)


class CostChannelSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")
    cost: list[list[Union[float, str]]]
    base: list[float] | None = None
    inf_token: str = "inf"


class NoiselessChannelSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")
    noiseless: int = Field(ge=1)


ChannelSpec = Union[GaussianChannelSpec, NoiselessChannelSpec, CostChannelSpec]


def build_channel(spec) -> Channel:
    if isinstance(spec, dict):
        spec = _channel_adapter(spec)
    if isinstance(spec, GaussianChannelSpec):
        return channel_gaussian_grid(spec.source, spec.obs, spec.sigma)
    if isinstance(spec, NoiselessChannelSpec):
        return channel_noiseless(spec.noiseless)
    cost = [[(math.inf if v == spec.inf_token else number(v)) for v in row] for row in spec.cost]
    base = None if spec.base is None else BaseWeights(spec.base)
    return channel_from_cost(cost, base)


def _channel_adapter(obj):
    if "sigma" in obj:
        return GaussianChannelSpec(**obj)
    if "noiseless" in obj:
        return NoiselessChannelSpec(**obj)
    return CostChannelSpec(**obj)


class ExperimentConfig(BaseModel):
    """Validated experiment description; dimensions are cross-checked on construction."""

    model_config = ConfigDict(extra="forbid")

    name: str = "experiment"
    channel: ChannelSpec
    p_true: list[float]
    loss: list[list[float]]
    r: float = Field(gt=0)
    delta: Union[float, list[float]] = 0.0
    epsilon: float = Field(default=1e-4, gt=0)
    n_grid: list[int] = Field(min_length=1)
    reps: int = Field(ge=1)
    seed: int = Field(default=0, ge=0, le=SEED_MAX)
    formulations: list[str] = Field(default_factory=lambda: list(FORMULATIONS))
    stages: list[Literal["disappoint", "htrates"]] = Field(default_factory=lambda: ["disappoint"])
    p_alt: list[float] | None = None
    method: Literal["auto", "monte_carlo", "exact_binomial"] = "auto"

    @field_validator("n_grid")
    @classmethod
    def _increasing(cls, v):
        if v[0] < 1 or any(b <= a for a, b in zip(v, v[1:])):
            raise ValueError("n_grid must be strictly increasing positive integers")
        return v

    @field_validator("delta")
    @classmethod
    def _nonneg(cls, v):
        vals = v if isinstance(v, list) else [v]
        if not vals or any(not d >= 0 for d in vals):
            raise ValueError("delta must be nonnegative (a number or a nonempty list)")
        return v

    @field_validator("formulations")
    @classmethod
    def _known(cls, v):
        for f in v:
            if f not in FORMULATIONS and f not in RESERVED_FORMULATIONS:
                raise ValueError(f"unknown formulation {f!r}")
        return v

    @model_validator(mode="after")
    def _dimensions(self):
        try:
            ch = build_channel(self.channel)
        except Exception as exc:
            raise ValueError(f"invalid channel: {exc}") from exc
        n, m = ch.n_latent, ch.n_obs
        if len(self.p_true) != n:
            raise ValueError(f"p_true has {len(self.p_true)} entries, channel has {n} latent points")
        if self.p_alt is not None and len(self.p_alt) != n:
            raise ValueError("p_alt does not match the latent alphabet")
        if any(len(row) != n for row in self.loss) or not self.loss:
            raise ValueError("loss must be a nonempty |Z| x n matrix with n latent points")
        if n != m and any(f in ("SAA_plugin", "EntropicDRO") for f in self.formulations):
            raise ValueError("SAA_plugin and EntropicDRO need equal latent and observed alphabets")
        if "htrates" in self.stages and self.p_alt is None:
            raise ValueError("the htrates stage needs p_alt")
        for w, label in ((self.p_true, "p_true"), (self.p_alt, "p_alt")):
            if w is not None:
                try:
                    ProbMeasure(w)
                except Exception as exc:
                    raise ValueError(f"{label}: {exc}") from exc
        return self

    @property
    def deltas(self) -> list[float]:
        return list(self.delta) if isinstance(self.delta, list) else [self.delta]

    def config_hash(self) -> str:
        canon = json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()


def validate_config(obj) -> ExperimentConfig:
    """Build an ``ExperimentConfig`` or raise ``ValidationError`` with the field errors."""
    try:
        return ExperimentConfig.model_validate(obj)
    except PydanticValidationError as exc:
        errs = [f"{'.'.join(str(p) for p in e['loc'])}: {e['msg']}" for e in exc.errors()]
        raise ValidationError("invalid experiment config", errs) from None


def formulation_labels(cfg: ExperimentConfig):
    """``(label, formulation, delta)`` per requested formulation; OTDRO expands over the delta sweep."""
    out = []
    for f in cfg.formulations:
        if f == "OTDRO":
            out.extend((f"OTDRO(delta={d:g})", f, d) for d in cfg.deltas)
        else:
            out.append((f, f, 0.0))
    return out


SLOPES_HEADER = ["formulation", "slope", "slope_stderr", "slope_kind", "target_rate", "method"]


def _fmt(v):
    v = float(v)
    if math.isfinite(v):
        return repr(v)
    return "nan" if math.isnan(v) else ("inf" if v > 0 else "-inf")


def slopes_csv(reports) -> str:
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SLOPES_HEADER)
    for rep in reports:
        w.writerow([rep.formulation, _fmt(rep.slope), _fmt(rep.slope_stderr), rep.slope_kind, _fmt(rep.target_rate),
                    rep.method])
    return buf.getvalue()


HTRATES_HEADER = ["kind", "delta", "N", "errors", "reps", "log_freq", "sentinel_flag"]


def htrates_csv(rows) -> str:
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(HTRATES_HEADER)
    for delta, rep in rows:
        for i, N in enumerate(rep.n_grid):
            w.writerow([rep.kind, f"{delta:g}", N, "" if rep.errors is None else rep.errors[i],
                        "" if rep.reps is None else rep.reps, _fmt(rep.log_prob[i]), int(bool(rep.sentinel[i]))])
    return buf.getvalue()


def run_disappointment(cfg: ExperimentConfig, threads: int = 1):
    """Disappointment reports for every formulation label, with common random numbers."""
    ch = build_channel(cfg.channel)
    p = ProbMeasure(cfg.p_true)
    prob = DecisionProblem(cfg.loss, cfg.epsilon)
    labels = formulation_labels(cfg)
    method = cfg.method
    if method == "auto":
        method = "exact_binomial" if ch.n_obs == 2 else "monte_carlo"
    if method == "exact_binomial":
        reports = []
        for label, f, d in labels:
            spec = AmbiguitySpec(cfg.r, d, ch)
            rep = disappointment_rate(f, p, spec, prob, cfg.n_grid, cfg.reps, cfg.seed, "exact_binomial")
            rep.formulation = label
            reports.append(rep)
        return reports
    prescribers = [Prescriber(f, prob, ch, cfg.r, d) for _, f, d in labels]
    runs = disappointment_runs(prescribers, p, ch, cfg.n_grid, cfg.reps, cfg.seed, threads)
    return [report_from_runs(label, run, cfg.n_grid, cfg.reps, cfg.r) for (label, _, _), run in zip(labels, runs)]


def run_htrates(cfg: ExperimentConfig, threads: int = 1):
    ch = build_channel(cfg.channel)
    rows = []
    for d in cfg.deltas:
        spec = TestSpec(ProbMeasure(cfg.p_true), ch, cfg.r, d, ProbMeasure(cfg.p_alt))
        rows.append((d, type1_rate(spec, cfg.n_grid, cfg.reps, cfg.seed, cfg.method, threads)))
        rows.append((d, type2_rate(spec, cfg.n_grid, cfg.reps, cfg.seed, cfg.method, threads)))
    return rows


def run_experiment(cfg, out_dir, threads: int = 1) -> dict:
    """Run the configured stages, write CSV/JSON outputs and ``manifest.json``.

    Parameters
    ----------
    cfg : ExperimentConfig or dict
        A dict is validated first; invalid input raises ``ValidationError``
        before anything is computed or written.
    out_dir : path
        Created if missing; files are written atomically.
    threads : int
        Worker processes for Monte Carlo chunks; outputs do not depend on it.

    Returns
    -------
    dict
        The manifest: config hash, tool version, per-file SHA-256,
        per-stage status and wall-clock seconds.  If a stage raises, the
        manifest is still written with that stage marked ``failed``.
    """
    if not isinstance(cfg, ExperimentConfig):
        cfg = validate_config(cfg)
    out = Path(out_dir)
    files = {}
    stages = {}
    manifest = {"name": cfg.name, "config_hash": cfg.config_hash(), "version": __version__, "files": files,
                "stages": stages, "completed": False}

    def emit(name, text):
        atomic_write(out / name, text)
        files[name] = sha256_file(out / name)

    emit("config.json", dumps(cfg.model_dump(mode="json")))
    try:
        for stage in STAGES:
            if stage not in cfg.stages:
                continue
            t0 = time.perf_counter()
            stages[stage] = {"status": "running"}
            if stage == "disappoint":
                reports = run_disappointment(cfg, threads)
                emit("disappoint.csv", disappointment_csv(reports))
                emit("slopes.csv", slopes_csv(reports))
                emit("disappoint.json", dumps([r.to_json() for r in reports]))
            else:
                emit("htrates.csv", htrates_csv(run_htrates(cfg, threads)))
            stages[stage] = {"status": "done", "wall_clock_s": time.perf_counter() - t0}
        manifest["completed"] = True
    except Exception as exc:
        for st in stages.values():
            if st["status"] == "running":
                st["status"] = "failed"
                st["error"] = f"{type(exc).__name__}: {exc}"
        atomic_write(out / "manifest.json", dumps(manifest))
        raise
    atomic_write(out / "manifest.json", dumps(manifest))
    return jsonable(manifest)


FLAGSHIP_GRID = list(range(9))
FLAGSHIP_DELTAS = [0.02, 0.05, 0.1]


def newsvendor_loss(grid, backorder: float = 2.0, holding: float = 1.0) -> np.ndarray:
    """``loss[z, i] = backorder * max(xi_i - z, 0) + holding * max(z - xi_i, 0)`` with ``Z`` the grid."""
    g = np.asarray(grid, dtype=float)
    diff = g[None, :] - g[:, None]
    return backorder * np.maximum(diff, 0.0) + holding * np.maximum(-diff, 0.0)


def triangular(grid, peak) -> np.ndarray:
    g = np.asarray(grid, dtype=float)
    w = np.maximum(0.0, (g.max() - g.min()) / 2 + 1 - np.abs(g - peak))
    return w / w.sum()


def flagship_config(seed: int = 0, reps: int = 20_000) -> ExperimentConfig:
    """Gaussian-noise newsvendor on the grid 0..8 (sigma 1), triangular truth peaked at 4."""
    g = [float(v) for v in FLAGSHIP_GRID]
    return validate_config({
        "name": "flagship_newsvendor",
        "channel": {"source": g, "obs": g, "sigma": 1.0},
        "p_true": triangular(g, 4.0).tolist(),
        "loss": newsvendor_loss(g).tolist(),
        "r": 0.05,
        "delta": FLAGSHIP_DELTAS,
        "epsilon": 1e-4,
        "n_grid": [25, 50, 100, 200],
        "reps": reps,
        "seed": seed,
        "formulations": list(FORMULATIONS),
        "method": "monte_carlo",
    })


def flagship_newsvendor(seed: int, out_dir, threads: int = 1, reps: int = 20_000) -> dict:
    return run_experiment(flagship_config(seed, reps), out_dir, threads)
