"""Exact learning coefficients for three-layer linear CBM, Multitask and Standard networks.

All thresholds are :class:`fractions.Fraction` values; floats only appear in the
asymptotic helpers at the bottom of the module.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from fractions import Fraction


class InvalidDimsError(ValueError):
    """Raised when a dimension tuple violates a model invariant."""


class ConsistencyError(RuntimeError):
    """Two independent evaluation routes disagreed. Always an implementation bug."""


class Case(str, enum.Enum):
    REGULAR = "Regular"
    MT_CASE1A = "MT_Case1a"
    MT_CASE1B = "MT_Case1b"
    MT_CASE2 = "MT_Case2"
    MT_CASE3 = "MT_Case3"
    MT_CASE4 = "MT_Case4"


class TaskKind(str, enum.Enum):
    REAL = "real"
    CATEGORICAL = "categorical"


class ConceptKind(str, enum.Enum):
    REAL = "real"
    BINARY = "binary"


class Relation(str, enum.Enum):
    CBM_GREATER = "CbmGreater"
    CBM_LEQ_MULTITASK = "CbmLeqMultitask"


@dataclass(frozen=True)
class ModelDims:
    """Architecture and truth sizes.

    ``hidden`` and ``true_rank`` are only read by the Multitask/Standard
    formulas; ``gamma`` is carried along for the likelihoods and never
    changes a threshold.
    """

    n_in: int
    n_out: int
    n_concepts: int = 0
    hidden: int = 1
    true_rank: int = 0
    gamma: float = 1.0

    def __post_init__(self):
        for name in ("n_in", "n_out", "n_concepts", "hidden", "true_rank"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, int):
                raise InvalidDimsError(f"{name} must be an integer, got {value!r}")
        if self.n_in < 1:
            raise InvalidDimsError(f"n_in (N) must be >= 1, got {self.n_in}")
        if self.n_out < 1:
            raise InvalidDimsError(f"n_out (M) must be >= 1, got {self.n_out}")
        if self.n_concepts < 0:
            raise InvalidDimsError(f"n_concepts (K) must be >= 0, got {self.n_concepts}")
        if self.hidden < 1:
            raise InvalidDimsError(f"hidden (H) must be >= 1, got {self.hidden}")
        if self.true_rank < 0:
            raise InvalidDimsError(f"true_rank (H0) must be >= 0, got {self.true_rank}")
        if not (math.isfinite(self.gamma) and self.gamma > 0):
            raise InvalidDimsError(f"gamma must be a positive real, got {self.gamma!r}")


@dataclass(frozen=True)
class ResponseKinds:
    task: TaskKind = TaskKind.REAL
    concept: ConceptKind = ConceptKind.REAL

    def __post_init__(self):
        object.__setattr__(self, "task", TaskKind(self.task))
        object.__setattr__(self, "concept", ConceptKind(self.concept))


@dataclass(frozen=True)
class ComposedDims:
    """Outputs split into real/categorical parts, concepts into real/binary parts."""

    n_in: int
    m_real: int
    m_cat: int
    k_real: int
    k_cat: int

    def __post_init__(self):
        if self.n_in < 1:
            raise InvalidDimsError(f"n_in (N) must be >= 1, got {self.n_in}")
        for name in ("m_real", "m_cat", "k_real", "k_cat"):
            if getattr(self, name) < 1:
                raise InvalidDimsError(
                    f"composed case needs every block non-empty: {name} = {getattr(self, name)}"
                )

    @property
    def n_out(self) -> int:
        return self.m_real + self.m_cat

    @property
    def n_concepts(self) -> int:
        return self.k_real + self.k_cat


@dataclass(frozen=True)
class RlctResult:
    lam: Fraction
    multiplicity: int
    case: Case

    def __post_init__(self):
        if self.lam <= 0 or 8 % self.lam.denominator:
            raise ConsistencyError(f"threshold {self.lam} outside the allowed lattice")
        if self.multiplicity not in (1, 2) or (self.multiplicity == 2) != (self.case is Case.MT_CASE1B):
            raise ConsistencyError(f"multiplicity {self.multiplicity} inconsistent with {self.case}")

    @property
    def lam_float(self) -> float:
        return float(self.lam)

    def to_dict(self) -> dict:
        return {
            "lambda": format_fraction(self.lam),
            "lambda_float": float(self.lam),
            "multiplicity": self.multiplicity,
            "case": self.case.value,
        }


@dataclass(frozen=True)
class ComparisonVerdict:
    relation: Relation
    case: Case
    lambda_cbm: Fraction
    lambda_multitask: Fraction

    def to_dict(self) -> dict:
        return {
            "relation": self.relation.value,
            "case": self.case.value,
            "lambda_cbm": format_fraction(self.lambda_cbm),
            "lambda_multitask": format_fraction(self.lambda_multitask),
        }


def format_fraction(value: Fraction) -> str:
    return str(value.numerator) if value.denominator == 1 else f"{value.numerator}/{value.denominator}"


def parse_fraction(text: str) -> Fraction:
    return Fraction(text)


# --- reduced-rank (Standard) thresholds --------------------------------------


def _check_rank(n_in: int, n_out: int, hidden: int, rank: int, strict: bool = True) -> None:
    bound = min(hidden, n_in, n_out) if strict else hidden
    if not 0 <= rank <= bound:
        what = "min(H, N, M+K)" if strict else "H"
        raise InvalidDimsError(
            f"true_rank (H0) = {rank} violates 0 <= H0 <= {what} = {bound} "
            f"(N={n_in}, M+K={n_out}, H={hidden})"
        )


def reduced_rank_case(n_in: int, n_out: int, hidden: int, rank: int) -> Case:
    """Case selector for a linear network with ``n_out`` total outputs.

    Case 1 uses non-strict inequalities so the boundary hyperplanes belong to it.
    """
    total = n_in + n_out + hidden + rank
    if n_out + rank <= n_in + hidden and n_in + rank <= n_out + hidden and hidden + rank <= n_in + n_out:
        return Case.MT_CASE1A if total % 2 == 0 else Case.MT_CASE1B
    if n_in + hidden < n_out + rank:
        return Case.MT_CASE2
    if n_out + hidden < n_in + rank:
        return Case.MT_CASE3
    return Case.MT_CASE4


def _reduced_rank_rlct(n_in: int, n_out: int, hidden: int, rank: int) -> RlctResult:
    case = reduced_rank_case(n_in, n_out, hidden, rank)
    N, O, H, R = n_in, n_out, hidden, rank
    if case is Case.MT_CASE1A:
        lam = Fraction(2 * (H + R) * (N + O) - (N - O) ** 2 - (H + R) ** 2, 8)
        return RlctResult(lam, 1, case)
    if case is Case.MT_CASE1B:
        lam = Fraction(2 * (H + R) * (N + O) - (N - O) ** 2 - (H + R) ** 2 + 1, 8)
        return RlctResult(lam, 2, case)
    if case is Case.MT_CASE2:
        return RlctResult(Fraction(H * N + R * (O - H), 2), 1, case)
    if case is Case.MT_CASE3:
        return RlctResult(Fraction(H * O + R * (N - H), 2), 1, case)
    return RlctResult(Fraction(N * O, 2), 1, case)


# --- public operations ---------------------------------------------------------


def multitask_case(dims: ModelDims, *, strict_rank: bool = True) -> Case:
    out = dims.n_out + dims.n_concepts
    _check_rank(dims.n_in, out, dims.hidden, dims.true_rank, strict_rank)
    return reduced_rank_case(dims.n_in, out, dims.hidden, dims.true_rank)


def rlct_cbm(dims: ModelDims) -> RlctResult:
    """Regular model: half the parameter count (M+N)K."""
    if dims.n_concepts < 1:
        raise InvalidDimsError("a CBM needs n_concepts (K) >= 1")
    return RlctResult(Fraction((dims.n_out + dims.n_in) * dims.n_concepts, 2), 1, Case.REGULAR)


def rlct_multitask(dims: ModelDims, *, strict_rank: bool = True) -> RlctResult:
    """Threshold of the network predicting ``[y; c]`` through ``H`` hidden units.

    With ``strict_rank=False`` the only rank condition is ``H0 <= H``; this is
    used to redraw published curves whose H0 exceeds N.
    """
    out = dims.n_out + dims.n_concepts
    _check_rank(dims.n_in, out, dims.hidden, dims.true_rank, strict_rank)
    return _reduced_rank_rlct(dims.n_in, out, dims.hidden, dims.true_rank)


def rlct_standard(n_in: int, hidden: int, n_out: int, true_rank: int) -> RlctResult:
    return rlct_multitask(ModelDims(n_in=n_in, n_out=n_out, n_concepts=0, hidden=hidden, true_rank=true_rank))


def _categorical_out(n_out: int, kinds: ResponseKinds) -> int:
    if kinds.task is TaskKind.CATEGORICAL:
        if n_out < 2:
            raise InvalidDimsError(f"a categorical task needs n_out (M) >= 2, got {n_out}")
        return n_out - 1
    return n_out


def rlct_cbm_typed(dims: ModelDims, kinds: ResponseKinds) -> RlctResult:
    if dims.n_concepts < 1:
        raise InvalidDimsError("a CBM needs n_concepts (K) >= 1")
    out = _categorical_out(dims.n_out, kinds)
    return RlctResult(Fraction((out + dims.n_in) * dims.n_concepts, 2), 1, Case.REGULAR)


def rlct_multitask_typed(dims: ModelDims, kinds: ResponseKinds, *, strict_rank: bool = True) -> RlctResult:
    out = _categorical_out(dims.n_out, kinds)
    if out == dims.n_out:
        return rlct_multitask(dims, strict_rank=strict_rank)
    total = out + dims.n_concepts
    _check_rank(dims.n_in, total, dims.hidden, dims.true_rank, strict_rank)
    return _reduced_rank_rlct(dims.n_in, total, dims.hidden, dims.true_rank)


def rlct_cbm_composed(c: ComposedDims) -> RlctResult:
    return RlctResult(Fraction((c.m_real + c.m_cat + c.n_in - 1) * (c.k_real + c.k_cat), 2), 1, Case.REGULAR)


def rlct_multitask_composed(c: ComposedDims, hidden: int, true_rank: int) -> RlctResult:
    total = c.m_real + c.m_cat - 1 + c.k_real + c.k_cat
    _check_rank(c.n_in, total, hidden, true_rank)
    return _reduced_rank_rlct(c.n_in, total, hidden, true_rank)


def _proposition_cbm_greater(dims: ModelDims, case: Case) -> bool:
    """Case-wise inequality deciding whether the CBM threshold is the larger one.

    In case 1, with s = K + M + N - H - H0, expanding the two thresholds gives
    ``8(lam1 - lam2) = s^2 + 4M(K - N) - p`` where p is 1 in the odd-parity
    subcase and 0 otherwise.  The commonly quoted form ``s^2 > 4MN (+1)`` drops
    the 4MK term and is wrong on many tuples, so it is not used here.
    """
    N, M, K = dims.n_in, dims.n_out, dims.n_concepts
    H, R = dims.hidden, dims.true_rank
    if case in (Case.MT_CASE1A, Case.MT_CASE1B):
        s = K + M + N - H - R
        parity = 1 if case is Case.MT_CASE1B else 0
        return s * s + 4 * M * (K - N) > parity
    if case is Case.MT_CASE2:
        return (M + N - R) * K > (N - R) * H + M * R
    if case is Case.MT_CASE3:
        return (M + N - H) * K > (N - H) * R + M * H
    return K > N


def compare_models(dims: ModelDims) -> ComparisonVerdict:
    """Decide which of CBM and Multitask has the larger threshold, two ways.

    Raises :class:`ConsistencyError` if the case-wise inequality and the direct
    rational comparison disagree.
    """
    lam_cbm = rlct_cbm(dims).lam
    mt = rlct_multitask(dims)
    by_rule = _proposition_cbm_greater(dims, mt.case)
    direct = lam_cbm > mt.lam
    if by_rule != direct:
        raise ConsistencyError(
            f"comparison routes disagree at {dims}: inequality says {by_rule}, "
            f"exact values {lam_cbm} vs {mt.lam}"
        )
    relation = Relation.CBM_GREATER if direct else Relation.CBM_LEQ_MULTITASK
    return ComparisonVerdict(relation, mt.case, lam_cbm, mt.lam)


# --- asymptotic forms ------------------------------------------------------------


def expected_generalization_error(r: RlctResult, n: int) -> float:
    """Leading terms lam/n - (m-1)/(n log n) of the expected generalization error."""
    if n < 3:
        raise ValueError(f"sample size must be >= 3, got {n}")
    lam = float(r.lam)
    if r.multiplicity == 1:
        return lam / n
    return lam / n - (r.multiplicity - 1) / (n * math.log(n))


def free_energy_penalty(r: RlctResult, n: float) -> float:
    """lam log n - (m-1) log log n, the free energy minus n S_n and O_p(1)."""
    if n <= 1:
        raise ValueError(f"sample size must exceed 1, got {n}")
    value = float(r.lam) * math.log(n)
    if r.multiplicity > 1:
        value -= (r.multiplicity - 1) * math.log(math.log(n))
    return value
