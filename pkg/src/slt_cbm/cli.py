"""Command-line entry point: ``slt-cbm <subcommand> ...``.

Exit codes: 0 success, 2 invalid arguments, 3 estimation or diagnostic
failure, 4 I/O error.
"""

from __future__ import annotations

import argparse
import json
import re
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import experiments as ex
from .bayes import (
    DiagnosticError,
    EstimationError,
    McmcConfig,
    PriorSpec,
    estimate_rlct_volume,
    rlct_two_temperature_detail,
    tempered_posterior_sample,
    wbic_beta,
)
from .models import (
    Dataset,
    InputSpec,
    Model,
    ModelFamily,
    ParamPoint,
    empirical_entropy,
    kl_closed_form_batch,
    make_truth,
    sample_dataset,
    split_flat,
)
from .plotting import plot_curve
from .rlct import (
    ComposedDims,
    ConceptKind,
    ConsistencyError,
    InvalidDimsError,
    ModelDims,
    ResponseKinds,
    TaskKind,
    compare_models,
    rlct_cbm_composed,
    rlct_multitask_composed,
)

EXIT_OK, EXIT_ARGS, EXIT_ESTIMATION, EXIT_IO = 0, 2, 3, 4

_FIELD_FLAGS = {
    "n_in": "--n-in",
    "n_out": "--n-out",
    "n_concepts": "--concepts",
    "hidden": "--hidden",
    "true_rank": "--true-rank",
    "gamma": "--gamma",
    "m_real": "--composed",
    "m_cat": "--composed",
    "k_real": "--composed",
    "k_cat": "--composed",
    "categorical": "--task",
}


class UsageError(Exception):
    def __init__(self, flag: str, message: str):
        super().__init__(f"{flag}: {message}")
        self.flag = flag


def _flags_for(message: str) -> str:
    hits = [flag for key, flag in _FIELD_FLAGS.items() if re.search(rf"\b{key}\b", message)]
    return "/".join(dict.fromkeys(hits)) or "arguments"


def _nonneg_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if value < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {value}")
    return value


def _composed(text: str) -> tuple[int, int, int, int]:
    parts = text.split(",")
    if len(parts) != 4:
        raise argparse.ArgumentTypeError(f"expected MR,MC,KR,KC, got {text!r}")
    return tuple(_nonneg_int(p) for p in parts)


def _add_dims(p: argparse.ArgumentParser, need_model: bool = True) -> None:
    if need_model:
        p.add_argument("--model", choices=[m.value for m in Model], required=True)
    p.add_argument("--n-in", type=_nonneg_int, required=True, help="N, input dimension")
    p.add_argument("--n-out", type=_nonneg_int, help="M, task output dimension")
    p.add_argument("--concepts", type=_nonneg_int, default=None, help="K, number of concepts")
    p.add_argument("--hidden", type=_nonneg_int, default=None, help="H, hidden units (Multitask/Standard)")
    p.add_argument("--true-rank", type=_nonneg_int, default=None, help="H0, rank of the true product")
    p.add_argument("--gamma", type=float, default=1.0, help="concept precision (CBM)")


def _dims(args, default_concepts: int = 0) -> ModelDims:
    if args.n_out is None:
        raise UsageError("--n-out", "required unless --composed is given")
    return ModelDims(
        args.n_in,
        args.n_out,
        default_concepts if args.concepts is None else args.concepts,
        1 if args.hidden is None else args.hidden,
        0 if args.true_rank is None else args.true_rank,
        args.gamma,
    )


def _emit(payload, out: Path | None = None) -> None:
    text = json.dumps(payload, indent=2, sort_keys=False)
    if out is None:
        print(text)
    else:
        Path(out).write_text(text + "\n")


# --- subcommands ----------------------------------------------------------------


def cmd_rlct(args) -> int:
    model = Model(args.model)
    if args.composed is not None:
        clash = [f for f, v in (("--n-out", args.n_out), ("--concepts", args.concepts)) if v is not None]
        clash += [f for f, v in (("--task", args.task), ("--concept-kind", args.concept_kind)) if v is not None]
        if clash:
            raise UsageError(clash[0], "cannot be combined with --composed (block sizes come from MR,MC,KR,KC)")
        c = ComposedDims(args.n_in, *args.composed)
        if model is Model.CBM:
            res = rlct_cbm_composed(c)
        elif model is Model.MULTITASK:
            if args.hidden is None or args.true_rank is None:
                raise UsageError("--hidden/--true-rank", "required for a composed Multitask")
            res = rlct_multitask_composed(c, args.hidden, args.true_rank)
        else:
            raise UsageError("--composed", "the Standard model has no concept block")
        _emit(res.to_dict())
        return EXIT_OK
    if model is Model.MULTITASK and (args.hidden is None or args.true_rank is None):
        raise UsageError("--hidden/--true-rank", "required for the Multitask model")
    if model is Model.STANDARD and (args.hidden is None or args.true_rank is None):
        raise UsageError("--hidden/--true-rank", "required for the Standard model")
    kinds = ResponseKinds(TaskKind(args.task or "real"), ConceptKind(args.concept_kind or "real"))
    family = ModelFamily(model, _dims(args), kinds)
    _emit(ex.theory_rlct(family, strict_rank=not args.relaxed_rank).to_dict())
    return EXIT_OK


def cmd_compare(args) -> int:
    for flag, value in (("--concepts", args.concepts), ("--hidden", args.hidden), ("--true-rank", args.true_rank)):
        if value is None:
            raise UsageError(flag, "required for compare")
    _emit(compare_models(_dims(args)).to_dict())
    return EXIT_OK


def cmd_sweep(args) -> int:
    if args.n_out is None:
        raise UsageError("--n-out", "required for sweep")
    models = tuple(Model(m) for m in args.models.split(",") if m)
    spec = ex.SweepSpec(
        models,
        args.n_in,
        args.n_out,
        args.vary,
        args.start,
        args.stop,
        n_concepts=1 if args.concepts is None else args.concepts,
        hidden=1 if args.hidden is None else args.hidden,
        true_rank=0 if args.true_rank is None else args.true_rank,
        kinds=ResponseKinds(TaskKind(args.task)),
        strict_rank=not args.relaxed_rank,
    )
    rows = ex.sweep_rlct(spec)
    ex.emit_csv(rows, args.out)
    if args.svg:
        ex.emit_svg(rows, args.svg, title=args.title, axis_label=spec.axis)
    invalid = sum(r["status"] != "ok" for r in rows)
    print(json.dumps({"rows": len(rows), "invalid": invalid, "out": str(args.out)}))
    return EXIT_OK


def _read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise UsageError("--config", f"not valid JSON: {exc}") from None


def _family_truth_inputs(cfg: dict, seed: int) -> tuple[ModelFamily, ParamPoint, InputSpec]:
    family = ModelFamily.from_dict(cfg["family"] if "family" in cfg else cfg)
    xm = cfg.get("inputs", {}).get("second_moment")
    inputs = InputSpec(second_moment=np.array(xm, dtype=float)) if xm is not None else InputSpec(n_in=family.dims.n_in)
    if cfg.get("truth"):
        truth = ParamPoint.from_dict(cfg["truth"])
    else:
        truth = make_truth(family, np.random.default_rng([seed, 0x7275]))
    truth.check(family)
    return family, truth, inputs


def cmd_simulate(args) -> int:
    cfg = _read_json(args.config)
    seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
    family, truth, inputs = _family_truth_inputs(cfg, seed)
    data = sample_dataset(family, truth, inputs, args.n, seed)
    extra = {"truth": truth.to_dict(), "inputs": {"second_moment": inputs.second_moment.tolist()}}
    data.save_jsonl(args.out, extra)
    _emit({"n": data.n, "seed": seed, "empirical_entropy": empirical_entropy(family, truth, data), "out": str(args.out)})
    return EXIT_OK


def _estimate_curve(args, cfg: dict) -> dict:
    if args.seed is not None:
        cfg = {**cfg, "seed": args.seed}
    spec = ex.CurveSpec.from_dict(cfg)
    result = ex.run_learning_curve(spec, threads=args.threads)
    if args.csv:
        ex.emit_csv(result.records, args.csv)
    if args.svg:
        label = {"gen_error": "generalization error", "wbic": "WBIC - nS_n", "two_temp": "lambda hat"}[spec.estimator]
        plot_curve(result.per_n, float(result.lambda_theory.lam), result.lambda_hat, Path(args.svg), ylabel=label)
    return result.to_dict()


def _load_data(args, cfg: dict, family: ModelFamily, truth: ParamPoint, inputs: InputSpec, seed: int) -> Dataset:
    path = args.data or cfg.get("data")
    if path:
        data, header = Dataset.load_jsonl(path)
        if header.get("family") and ModelFamily.from_dict(header["family"]) != family:
            raise UsageError("--data", "dataset family does not match the config family")
        return data
    if "n" not in cfg:
        raise UsageError("--config", "needs either a data path or a sample size n")
    return sample_dataset(family, truth, inputs, int(cfg["n"]), seed)


def _estimate_single(args, cfg: dict) -> dict:
    seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
    data_header = {}
    if args.data or cfg.get("data"):
        _, data_header = Dataset.load_jsonl(args.data or cfg["data"])
    merged = {**data_header, **cfg}
    family, truth, inputs = _family_truth_inputs(merged, seed)
    prior = PriorSpec(**cfg.get("prior", {}))
    mcmc = McmcConfig(**{**cfg.get("mcmc", {}), "seed": seed})
    data = _load_data(args, cfg, family, truth, inputs, seed)
    s_n = empirical_entropy(family, truth, data)
    theory = ex.theory_rlct(family)
    report = {
        "method": args.method,
        "family": family.to_dict(),
        "n": data.n,
        "seed": seed,
        "empirical_entropy": s_n,
        "lambda_theory": theory.to_dict(),
    }
    if args.method == "wbic":
        chain = tempered_posterior_sample(family, data, prior, replace(mcmc, beta=wbic_beta(data.n)))
        chain.raise_on_failure()
        value = chain.mean_nll()
        report.update(wbic=value, wbic_minus_nSn=value - data.n * s_n, acceptance=chain.acceptance.tolist(),
                      rhat=chain.rhat, ess=chain.ess)
    else:
        tt = rlct_two_temperature_detail(family, data, prior, mcmc)
        report.update(lambda_hat=tt.lam, nll_low=tt.nll_low, nll_high=tt.nll_high,
                      beta_low=tt.beta_low, beta_high=tt.beta_high)
    return report


def _estimate_volume(args, cfg: dict) -> dict:
    seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
    family, truth, inputs = _family_truth_inputs(cfg, seed)
    prior = PriorSpec(**cfg.get("prior", {}))
    d = family.n_params
    t_grid = np.asarray(cfg.get("t_grid", np.geomspace(1e-1, 1e-4, 13)), dtype=float)

    def kl(flat):
        left, right = split_flat(family, flat)
        return kl_closed_form_batch(family, left, right, truth, inputs.second_moment)

    fit = estimate_rlct_volume(kl, lambda rng, m: prior.sample(rng, m, d), t_grid, int(cfg.get("n_samples", 10**6)), seed)
    theory = ex.theory_rlct(family)
    return {"method": "volume", "family": family.to_dict(), **fit.to_dict(), "lambda_theory": theory.to_dict()}


def cmd_estimate(args) -> int:
    cfg = _read_json(args.config)
    if args.method == "curve":
        report = _estimate_curve(args, cfg)
    elif args.method == "volume":
        report = _estimate_volume(args, cfg)
    else:
        report = _estimate_single(args, cfg)
    _emit(report, args.out)
    return EXIT_OK


# --- parser ---------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="slt-cbm", description="Learning coefficients of linear CBM and Multitask networks.")
    parser.add_argument("--threads", type=int, default=None, help="worker processes (default: SLT_CBM_THREADS or CPU count)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("rlct", help="exact learning coefficient")
    _add_dims(p)
    p.add_argument("--task", choices=[k.value for k in TaskKind], default=None)
    p.add_argument("--concept-kind", choices=[k.value for k in ConceptKind], default=None)
    p.add_argument("--composed", type=_composed, default=None, metavar="MR,MC,KR,KC")
    p.add_argument("--relaxed-rank", action="store_true", help="only require H0 <= H")
    p.set_defaults(func=cmd_rlct)

    p = sub.add_parser("compare", help="which of CBM and Multitask has the larger coefficient")
    _add_dims(p, need_model=False)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("sweep", help="coefficients along K or H")
    _add_dims(p, need_model=False)
    p.add_argument("--vary", choices=["k", "h", "K", "H"], required=True)
    p.add_argument("--from", dest="start", type=_nonneg_int, required=True)
    p.add_argument("--to", dest="stop", type=_nonneg_int, required=True)
    p.add_argument("--models", default="cbm,multitask")
    p.add_argument("--task", choices=[k.value for k in TaskKind], default="real")
    p.add_argument("--relaxed-rank", action="store_true", help="only require H0 <= H")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--svg", type=Path, default=None)
    p.add_argument("--title", default=None)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("simulate", help="draw a synthetic dataset")
    p.add_argument("--config", type=Path, required=True)
    p.add_argument("--n", type=_nonneg_int, required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("estimate", help="estimate lambda from simulated data")
    p.add_argument("--method", choices=["curve", "wbic", "two-temp", "volume"], required=True)
    p.add_argument("--config", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--data", type=Path, default=None, help="dataset from simulate (wbic, two-temp)")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--csv", type=Path, default=None, help="per-replicate records (curve)")
    p.add_argument("--svg", type=Path, default=None, help="learning-curve plot (curve)")
    p.set_defaults(func=cmd_estimate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_ARGS
    if args.threads is not None and args.threads < 1:
        print("error: --threads: must be >= 1", file=sys.stderr)
        return EXIT_ARGS
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ARGS
    except (DiagnosticError, EstimationError, FloatingPointError) as exc:
        print(f"estimation failed: {exc}", file=sys.stderr)
        return EXIT_ESTIMATION
    except ConsistencyError as exc:
        print(f"internal consistency check failed: {exc}", file=sys.stderr)
        return EXIT_ESTIMATION
    except (InvalidDimsError, ValueError, KeyError, TypeError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        if isinstance(exc, KeyError):
            msg = f"missing config field {msg!r}"
        print(f"error: {_flags_for(str(msg))}: {msg}", file=sys.stderr)
        return EXIT_ARGS
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
