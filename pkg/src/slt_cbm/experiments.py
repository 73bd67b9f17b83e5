"""Threshold sweeps along K or H, and learning-curve studies that estimate lambda from data."""

from __future__ import annotations

import csv
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path

import numpy as np
from scipy import stats

from .bayes import (
    EstimationError,
    McmcConfig,
    PriorSpec,
    estimate_generalization_error,
    rlct_two_temperature_detail,
    tempered_posterior_sample,
    wbic_beta,
)
from .models import (
    InputSpec,
    Model,
    ModelFamily,
    ParamPoint,
    empirical_entropy,
    make_truth,
    sample_dataset,
)
from .rlct import (
    ConsistencyError,
    InvalidDimsError,
    ModelDims,
    ResponseKinds,
    RlctResult,
    TaskKind,
    format_fraction,
    rlct_cbm_typed,
    rlct_multitask_typed,
    rlct_standard,
)

SWEEP_COLUMNS = ("axis", "model", "lambda_rational", "lambda_float", "multiplicity", "case", "status")
CURVE_COLUMNS = ("n", "replicate", "estimate", "std_error", "diag_flags")
MAX_FAILED_FRACTION = 0.2
TRIM = 0.05
ESTIMATORS = ("gen_error", "wbic", "two_temp")


def default_threads() -> int:
    env = os.environ.get("SLT_CBM_THREADS")
    if env:
        value = int(env)
        if value < 1:
            raise ValueError(f"SLT_CBM_THREADS must be >= 1, got {env!r}")
        return value
    return os.cpu_count() or 1


def theory_rlct(family: ModelFamily, *, strict_rank: bool = True) -> RlctResult:
    d = family.dims
    if family.model is Model.CBM:
        return rlct_cbm_typed(d, family.kinds)
    if family.model is Model.MULTITASK:
        return rlct_multitask_typed(d, family.kinds, strict_rank=strict_rank)
    m = d.n_out - 1 if family.kinds.task is TaskKind.CATEGORICAL else d.n_out
    return rlct_standard(d.n_in, d.hidden, m, d.true_rank)


# --- sweeps -------------------------------------------------------------------


@dataclass(frozen=True)
class SweepSpec:
    models: tuple[Model, ...]
    n_in: int
    n_out: int
    axis: str
    start: int
    stop: int
    n_concepts: int = 1
    hidden: int = 1
    true_rank: int = 0
    kinds: ResponseKinds = field(default_factory=ResponseKinds)
    strict_rank: bool = True

    def __post_init__(self):
        object.__setattr__(self, "models", tuple(Model(m) for m in self.models))
        axis = self.axis.upper()
        if axis not in ("K", "H"):
            raise ValueError(f"sweep axis must be K or H, got {self.axis!r}")
        object.__setattr__(self, "axis", axis)
        if self.stop < self.start:
            raise ValueError(f"empty sweep range {self.start}..{self.stop}")

    def values(self) -> range:
        return range(self.start, self.stop + 1)

    def dims_at(self, value: int) -> ModelDims:
        k = value if self.axis == "K" else self.n_concepts
        h = value if self.axis == "H" else self.hidden
        return ModelDims(self.n_in, self.n_out, k, h, self.true_rank)


def raw_multitask_lambda(n: int, o: int, h: int, h0: int) -> tuple[Fraction, int]:
    """Second, standalone evaluation of the reduced-rank threshold.

    Kept deliberately apart from :mod:`rlct` (works on 8*lambda as an integer)
    so sweep rows can be cross-checked.
    """
    if o + h < n + h0:
        eight = 4 * (h * o + h0 * (n - h))
        return Fraction(eight, 8), 1
    if n + h < o + h0:
        eight = 4 * (h * n + h0 * (o - h))
        return Fraction(eight, 8), 1
    if h + h0 > n + o:
        return Fraction(4 * n * o, 8), 1
    eight = 2 * (h + h0) * (n + o) - (n - o) ** 2 - (h + h0) ** 2
    if (n + o + h + h0) % 2:
        return Fraction(eight + 1, 8), 2
    return Fraction(eight, 8), 1


def _raw_lambda(model: Model, dims: ModelDims, kinds: ResponseKinds) -> tuple[Fraction, int]:
    m = dims.n_out - 1 if kinds.task is TaskKind.CATEGORICAL else dims.n_out
    if model is Model.CBM:
        return Fraction((m + dims.n_in) * dims.n_concepts, 2), 1
    k = dims.n_concepts if model is Model.MULTITASK else 0
    return raw_multitask_lambda(dims.n_in, m + k, dims.hidden, dims.true_rank)


def _sweep_row(model: Model, spec: SweepSpec, value: int) -> dict:
    row = {"axis": value, "model": model.value}
    try:
        dims = spec.dims_at(value)
        if model is Model.CBM:
            res = rlct_cbm_typed(dims, spec.kinds)
        elif model is Model.MULTITASK:
            res = rlct_multitask_typed(dims, spec.kinds, strict_rank=spec.strict_rank)
        else:
            family = ModelFamily(Model.STANDARD, replace(dims, n_concepts=0), spec.kinds)
            res = theory_rlct(family, strict_rank=spec.strict_rank)
    except InvalidDimsError as exc:
        row.update(lambda_rational="", lambda_float="", multiplicity="", case="", status=f"invalid: {exc}")
        return row
    raw = _raw_lambda(model, dims, spec.kinds)
    if raw != (res.lam, res.multiplicity):
        raise ConsistencyError(f"{model.value} at {spec.axis}={value}: {res.lam},{res.multiplicity} vs raw {raw}")
    row.update(
        lambda_rational=format_fraction(res.lam),
        lambda_float=float(res.lam),
        multiplicity=res.multiplicity,
        case=res.case.value,
        status="ok",
    )
    return row


def sweep_rlct(spec: SweepSpec) -> list[dict]:
    """One row per (axis value, model); points violating the dims invariants get status ``invalid: ...``."""
    return [_sweep_row(model, spec, v) for v in spec.values() for model in spec.models]


def figure_sweeps(k_range=(1, 20), h_range=(1, 20)) -> dict[str, SweepSpec]:
    """The twelve published panels: M=10, N=1, varying K (2a-f) or H (3a-f).

    Several panels use H0 > N, so these specs relax the rank condition to H0 <= H.
    """
    models = (Model.CBM, Model.MULTITASK)
    panels = {}
    for label, (h, h0) in zip("abcdef", [(3, 1), (6, 1), (6, 4), (9, 1), (9, 4), (9, 7)]):
        panels[f"2{label}"] = SweepSpec(models, 1, 10, "K", *k_range, hidden=h, true_rank=h0, strict_rank=False)
    for label, (k, h0) in zip("abcdef", [(3, 1), (6, 1), (6, 4), (9, 1), (9, 4), (9, 7)]):
        panels[f"3{label}"] = SweepSpec(models, 1, 10, "H", *h_range, n_concepts=k, true_rank=h0, strict_rank=False)
    return panels


# --- learning curves ----------------------------------------------------------


@dataclass(frozen=True)
class CurveSpec:
    family: ModelFamily
    n_grid: tuple[int, ...]
    replicates: int
    estimator: str
    mcmc: McmcConfig = field(default_factory=McmcConfig)
    prior: PriorSpec = field(default_factory=PriorSpec)
    inputs: InputSpec | None = None
    truth: ParamPoint | None = None
    n_test: int = 4000
    tolerance: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.estimator not in ESTIMATORS:
            raise ValueError(f"estimator must be one of {ESTIMATORS}, got {self.estimator!r}")
        if self.replicates < 2:
            raise ValueError("replicates must be >= 2 so standard errors exist")
        if not self.n_grid or min(self.n_grid) < 3:
            raise ValueError("n_grid must be nonempty with every n >= 3")
        object.__setattr__(self, "n_grid", tuple(int(n) for n in self.n_grid))
        if self.inputs is None:
            object.__setattr__(self, "inputs", InputSpec(n_in=self.family.dims.n_in))
        if self.truth is None:
            rng = np.random.default_rng([self.seed, 0x7275])
            object.__setattr__(self, "truth", make_truth(self.family, rng))
        self.truth.check(self.family)
        self.prior.check_truth(self.truth)

    def to_dict(self) -> dict:
        m = self.mcmc
        return {
            "family": self.family.to_dict(),
            "n_grid": list(self.n_grid),
            "replicates": self.replicates,
            "estimator": self.estimator,
            "mcmc": {
                "n_chains": m.n_chains,
                "n_burn": m.n_burn,
                "n_keep": m.n_keep,
                "thin": m.thin,
                "target_accept": m.target_accept,
                "seed": m.seed,
            },
            "prior": {"half_width": self.prior.half_width},
            "inputs": {"second_moment": self.inputs.second_moment.tolist()},
            "truth": self.truth.to_dict(),
            "n_test": self.n_test,
            "tolerance": self.tolerance,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "CurveSpec":
        family = ModelFamily.from_dict(payload["family"])
        mcmc = McmcConfig(**payload.get("mcmc", {}))
        prior = PriorSpec(**payload.get("prior", {}))
        inputs = None
        if payload.get("inputs", {}).get("second_moment") is not None:
            inputs = InputSpec(second_moment=np.array(payload["inputs"]["second_moment"], dtype=float))
        truth = ParamPoint.from_dict(payload["truth"]) if payload.get("truth") else None
        return cls(
            family,
            tuple(payload["n_grid"]),
            int(payload["replicates"]),
            payload["estimator"],
            mcmc,
            prior,
            inputs,
            truth,
            int(payload.get("n_test", 4000)),
            float(payload.get("tolerance", 0.2)),
            int(payload.get("seed", 0)),
        )


@dataclass
class ReplicateRecord:
    n: int
    replicate: int
    estimate: float
    std_error: float
    diag_flags: tuple[str, ...] = ()

    @property
    def ok(self) -> bool:
        return not self.diag_flags


@dataclass
class CurveResult:
    spec: CurveSpec
    records: list[ReplicateRecord]
    per_n: list[dict]
    lambda_hat: float
    lambda_hat_se: float
    lambda_theory: RlctResult

    @property
    def passed(self) -> bool:
        return abs(self.lambda_hat - float(self.lambda_theory.lam)) <= self.spec.tolerance

    def to_dict(self) -> dict:
        return {
            "spec": self.spec.to_dict(),
            "per_n": self.per_n,
            "lambda_hat": self.lambda_hat,
            "lambda_hat_se": self.lambda_hat_se,
            "lambda_theory": self.lambda_theory.to_dict(),
            "tolerance": self.spec.tolerance,
            "pass": self.passed,
        }


class CurveAbortedError(EstimationError):
    pass


def _unit_seed(*parts: int) -> int:
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


def _run_replicate(spec: CurveSpec, i_n: int, rep: int) -> ReplicateRecord:
    n = spec.n_grid[i_n]
    data = sample_dataset(spec.family, spec.truth, spec.inputs, n, _unit_seed(spec.seed, i_n, rep, 1))
    cfg = replace(spec.mcmc, seed=_unit_seed(spec.seed, i_n, rep, 2))
    if spec.estimator == "gen_error":
        chain = tempered_posterior_sample(spec.family, data, spec.prior, cfg)
        est = estimate_generalization_error(chain, spec.truth, spec.inputs, spec.n_test, _unit_seed(spec.seed, i_n, rep, 3))
        return ReplicateRecord(n, rep, est.estimate, est.std_error, tuple(chain.failures))
    if spec.estimator == "wbic":
        chain = tempered_posterior_sample(spec.family, data, spec.prior, replace(cfg, beta=wbic_beta(n)))
        nll = -chain.loglik
        se = float(nll.std(ddof=1) / math.sqrt(max(chain.ess, 1.0)))
        value = chain.mean_nll() - n * empirical_entropy(spec.family, spec.truth, data)
        return ReplicateRecord(n, rep, value, se, tuple(chain.failures))
    tt = rlct_two_temperature_detail(spec.family, data, spec.prior, cfg, strict=False)
    return ReplicateRecord(n, rep, tt.lam, float("nan"), tt.failures)


def _run_unit(args) -> ReplicateRecord:
    return _run_replicate(*args)


def fit_lambda(points, mode: str) -> tuple[float, float]:
    """Weighted least-squares lambda from ``(n, mean, std_error)`` triples.

    ``mode="inverse"`` regresses the mean on 1/n through the origin,
    ``mode="log"`` regresses it on log n with a free intercept and returns the
    slope.  Weights are 1/SE^2, or uniform if any SE is zero or missing.  The
    returned standard error is residual based, so exact data give 0; when the
    fit has no residual degrees of freedom the weight-implied error is used.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    if mode not in ("inverse", "log"):
        raise ValueError(f"mode must be 'inverse' or 'log', got {mode!r}")
    p = 1 if mode == "inverse" else 2
    if pts.shape[0] < p:
        raise ValueError(f"mode {mode!r} needs at least {p} points")
    n, y, se = pts.T
    x = 1.0 / n if mode == "inverse" else np.log(n)
    known = bool(np.all(np.isfinite(se)) and np.all(se > 0))
    w = 1.0 / se**2 if known else np.ones_like(y)
    design = x[:, None] if mode == "inverse" else np.column_stack([x, np.ones_like(x)])
    xtwx = design.T @ (w[:, None] * design)
    beta = np.linalg.solve(xtwx, design.T @ (w * y))
    cov_unit = np.linalg.inv(xtwx)
    dof = pts.shape[0] - p
    if dof > 0:
        resid = y - design @ beta
        sigma2 = float(np.sum(w * resid**2) / dof)
        lam_se = math.sqrt(sigma2 * cov_unit[0, 0])
    else:
        lam_se = math.sqrt(cov_unit[0, 0]) if known else float("nan")
    return float(beta[0]), lam_se


def _aggregate(spec: CurveSpec, records: list[ReplicateRecord]) -> list[dict]:
    per_n = []
    for n in spec.n_grid:
        rows = [r for r in records if r.n == n]
        good = np.array([r.estimate for r in rows if r.ok])
        failed = sum(not r.ok for r in rows)
        entry = {
            "n": n,
            "replicates": len(rows),
            "failed": failed,
            "mean": float(good.mean()) if good.size else float("nan"),
            "trimmed_mean": float(stats.trim_mean(good, TRIM)) if good.size else float("nan"),
            "std_error": float(good.std(ddof=1) / math.sqrt(good.size)) if good.size > 1 else float("nan"),
            "values": [r.estimate for r in rows],
        }
        if spec.estimator == "gen_error":
            entry["n_times_mean"] = n * entry["mean"]
        per_n.append(entry)
    return per_n


def _check_failures(per_n: list[dict], records: list[ReplicateRecord]) -> None:
    bad = [e for e in per_n if e["failed"] > MAX_FAILED_FRACTION * e["replicates"]]
    if not bad:
        return
    flags: dict[str, int] = {}
    for r in records:
        for f in r.diag_flags:
            key = f.split(":")[0]
            flags[key] = flags.get(key, 0) + 1
    detail = ", ".join(f"n={e['n']}: {e['failed']}/{e['replicates']} failed" for e in bad)
    summary = "; ".join(f"{k} x{v}" for k, v in sorted(flags.items()))
    raise CurveAbortedError(f"too many failed replicates ({detail}); diagnostics: {summary}")


def run_learning_curve(spec: CurveSpec, threads: int | None = None) -> CurveResult:
    """Simulate, estimate and fit lambda; output does not depend on ``threads``."""
    threads = default_threads() if threads is None else threads
    units = [(spec, i, r) for i in range(len(spec.n_grid)) for r in range(spec.replicates)]
    if threads > 1 and len(units) > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            records = list(pool.map(_run_unit, units, chunksize=max(1, len(units) // (4 * threads))))
    else:
        records = [_run_unit(u) for u in units]
    per_n = _aggregate(spec, records)
    _check_failures(per_n, records)
    if spec.estimator == "two_temp":
        vals = np.array([r.estimate for r in records if r.ok])
        lam, lam_se = float(vals.mean()), float(vals.std(ddof=1) / math.sqrt(vals.size))
    else:
        mode = "inverse" if spec.estimator == "gen_error" else "log"
        lam, lam_se = fit_lambda([(e["n"], e["mean"], e["std_error"]) for e in per_n], mode)
    return CurveResult(spec, records, per_n, lam, lam_se, theory_rlct(spec.family))


# --- output -------------------------------------------------------------------


def emit_csv(table, path) -> None:
    """Write sweep rows or curve records with a fixed header."""
    rows = list(table)
    if rows and isinstance(rows[0], ReplicateRecord):
        columns = CURVE_COLUMNS
        rows = [
            {
                "n": r.n,
                "replicate": r.replicate,
                "estimate": repr(r.estimate),
                "std_error": repr(r.std_error),
                "diag_flags": "|".join(r.diag_flags),
            }
            for r in rows
        ]
    else:
        columns = SWEEP_COLUMNS
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore", lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)


def emit_svg(table, path, title: str | None = None, axis_label: str = "K") -> None:
    from .plotting import plot_sweep

    plot_sweep(list(table), Path(path), title=title, axis_label=axis_label)
