"""Generative models, likelihoods and KL divergences for the three linear networks.

Parameters are stored as a pair of matrices: ``(A, B)`` for CBM with
``y ~ ABx`` and ``c ~ Bx``, ``(U, V)`` for Multitask/Standard with
``[y; c] ~ UVx``.  Every likelihood routine accepts a leading batch axis on
the parameters so the samplers can evaluate many chains at once.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import log_softmax, log_expit, expit

from .rlct import ConceptKind, InvalidDimsError, ModelDims, ResponseKinds, TaskKind

LOG_2PI = math.log(2.0 * math.pi)
RANK_RTOL = 1e-8


class Model(str, enum.Enum):
    CBM = "cbm"
    MULTITASK = "multitask"
    STANDARD = "standard"


@dataclass(frozen=True)
class ModelFamily:
    """Which network, its sizes, and how y and c are distributed.

    The concept precision ``gamma`` only enters the CBM; the Multitask and
    Standard densities are the unweighted ones.
    """

    model: Model
    dims: ModelDims
    kinds: ResponseKinds = field(default_factory=ResponseKinds)

    def __post_init__(self):
        object.__setattr__(self, "model", Model(self.model))
        if self.model is Model.STANDARD and self.dims.n_concepts != 0:
            raise InvalidDimsError("the Standard model has no concept block: n_concepts must be 0")
        if self.model is Model.CBM and self.dims.n_concepts < 1:
            raise InvalidDimsError("a CBM needs n_concepts (K) >= 1")
        if self.kinds.task is TaskKind.CATEGORICAL and self.dims.n_out < 2:
            raise InvalidDimsError("a categorical task needs n_out (M) >= 2")

    @property
    def gamma(self) -> float:
        return self.dims.gamma if self.model is Model.CBM else 1.0

    @property
    def shapes(self) -> tuple[tuple[int, int], tuple[int, int]]:
        d = self.dims
        if self.model is Model.CBM:
            return (d.n_out, d.n_concepts), (d.n_concepts, d.n_in)
        return (d.n_out + d.n_concepts, d.hidden), (d.hidden, d.n_in)

    @property
    def n_params(self) -> int:
        (a, b), (c, e) = self.shapes
        return a * b + c * e

    def to_dict(self) -> dict:
        d = self.dims
        return {
            "model": self.model.value,
            "dims": {
                "n_in": d.n_in,
                "n_out": d.n_out,
                "n_concepts": d.n_concepts,
                "hidden": d.hidden,
                "true_rank": d.true_rank,
                "gamma": d.gamma,
            },
            "kinds": {"task": self.kinds.task.value, "concept": self.kinds.concept.value},
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "ModelFamily":
        kinds = payload.get("kinds", {})
        return cls(
            Model(payload["model"]),
            ModelDims(**payload["dims"]),
            ResponseKinds(kinds.get("task", "real"), kinds.get("concept", "real")),
        )


@dataclass(frozen=True)
class ParamPoint:
    """Weight pair ``(A, B)`` or ``(U, V)``; ``left`` is applied last."""

    left: np.ndarray
    right: np.ndarray

    def __post_init__(self):
        left = np.asarray(self.left, dtype=float)
        right = np.asarray(self.right, dtype=float)
        if left.ndim != 2 or right.ndim != 2 or left.shape[1] != right.shape[0]:
            raise InvalidDimsError(f"incompatible weight shapes {left.shape} and {right.shape}")
        if not (np.all(np.isfinite(left)) and np.all(np.isfinite(right))):
            raise InvalidDimsError("weights must be finite")
        object.__setattr__(self, "left", left)
        object.__setattr__(self, "right", right)

    @property
    def product(self) -> np.ndarray:
        return self.left @ self.right

    def flatten(self) -> np.ndarray:
        return np.concatenate([self.left.ravel(), self.right.ravel()])

    @classmethod
    def unflatten(cls, family: ModelFamily, flat: np.ndarray) -> "ParamPoint":
        left, right = split_flat(family, np.asarray(flat, dtype=float))
        return cls(left, right)

    def check(self, family: ModelFamily) -> None:
        if (self.left.shape, self.right.shape) != family.shapes:
            raise InvalidDimsError(
                f"weights {self.left.shape}, {self.right.shape} do not match {family.shapes}"
            )

    def to_dict(self) -> dict:
        return {"left": self.left.tolist(), "right": self.right.tolist()}

    @classmethod
    def from_dict(cls, payload: dict) -> "ParamPoint":
        return cls(np.array(payload["left"], dtype=float), np.array(payload["right"], dtype=float))


def split_flat(family: ModelFamily, flat: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Reshape ``(..., d)`` flat parameters to batched left/right matrices."""
    (a, b), (c, e) = family.shapes
    if flat.shape[-1] != a * b + c * e:
        raise InvalidDimsError(f"expected {a * b + c * e} parameters, got {flat.shape[-1]}")
    lead = flat.shape[:-1]
    left = flat[..., : a * b].reshape(*lead, a, b)
    right = flat[..., a * b :].reshape(*lead, c, e)
    return left, right


def make_truth(family: ModelFamily, rng: np.random.Generator, low: float = -1.0, high: float = 1.0) -> ParamPoint:
    """Draw true weights i.i.d. uniform; Multitask/Standard get exact rank H0.

    The rank-H0 factors fill the first H0 hidden units, the remaining units are
    zero so the product has the declared rank.
    """
    (a, b), (c, e) = family.shapes
    if family.model is Model.CBM:
        return ParamPoint(rng.uniform(low, high, (a, b)), rng.uniform(low, high, (c, e)))
    rank = family.dims.true_rank
    if rank > min(family.dims.hidden, family.dims.n_in, a):
        raise InvalidDimsError(f"true_rank {rank} not attainable for shapes {family.shapes}")
    left = np.zeros((a, b))
    right = np.zeros((c, e))
    for _ in range(100):
        left[:, :rank] = rng.uniform(low, high, (a, rank))
        right[:rank, :] = rng.uniform(low, high, (rank, e))
        if numerical_rank(left @ right) == rank:
            return ParamPoint(left, right)
    raise InvalidDimsError("could not draw a truth of the declared rank")


def numerical_rank(matrix: np.ndarray) -> int:
    s = np.linalg.svd(np.atleast_2d(matrix), compute_uv=False)
    if s.size == 0 or s[0] == 0:
        return 0
    return int(np.sum(s > RANK_RTOL * s[0]))


@dataclass(frozen=True)
class InputSpec:
    """Zero-mean Gaussian inputs with second-moment matrix ``second_moment``."""

    second_moment: np.ndarray | None = None
    n_in: int | None = None

    def __post_init__(self):
        if self.second_moment is None:
            if self.n_in is None:
                raise ValueError("InputSpec needs n_in or a second-moment matrix")
            object.__setattr__(self, "second_moment", np.eye(self.n_in))
        xm = np.atleast_2d(np.asarray(self.second_moment, dtype=float))
        if xm.shape[0] != xm.shape[1] or not np.allclose(xm, xm.T):
            raise InvalidDimsError("second-moment matrix must be square and symmetric")
        if np.linalg.eigvalsh(xm)[0] <= 1e-10:
            raise InvalidDimsError("second-moment matrix must be positive definite")
        object.__setattr__(self, "second_moment", xm)
        object.__setattr__(self, "n_in", xm.shape[0])

    @classmethod
    def diagonal(cls, variances) -> "InputSpec":
        return cls(np.diag(np.asarray(variances, dtype=float)))

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        chol = np.linalg.cholesky(self.second_moment)
        return rng.standard_normal((n, self.n_in)) @ chol.T


@dataclass
class Dataset:
    x: np.ndarray
    c: np.ndarray
    y: np.ndarray
    family: ModelFamily
    seed: int | None = None
    _stats: dict | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        d = self.family.dims
        n = self.x.shape[0]
        self.x = np.asarray(self.x, dtype=float).reshape(n, d.n_in)
        self.c = np.asarray(self.c, dtype=float).reshape(n, d.n_concepts)
        self.y = np.asarray(self.y, dtype=float).reshape(n, d.n_out)
        kinds = self.family.kinds
        if kinds.task is TaskKind.CATEGORICAL and n:
            if not (np.all((self.y == 0) | (self.y == 1)) and np.all(self.y.sum(axis=1) == 1)):
                raise InvalidDimsError("categorical responses must be exact one-hot rows")
        if kinds.concept is ConceptKind.BINARY and not np.all((self.c == 0) | (self.c == 1)):
            raise InvalidDimsError("binary concepts must be 0/1")

    @property
    def n(self) -> int:
        return self.x.shape[0]

    def __len__(self) -> int:
        return self.n

    def stats(self) -> dict:
        """Sufficient statistics for the Gaussian blocks (cached)."""
        if self._stats is None:
            self._stats = {
                "xx": self.x.T @ self.x,
                "yx": self.y.T @ self.x,
                "yy": float(np.sum(self.y**2)),
                "cx": self.c.T @ self.x,
                "cc": float(np.sum(self.c**2)),
            }
        return self._stats

    def concat(self, other: "Dataset") -> "Dataset":
        return Dataset(
            np.vstack([self.x, other.x]), np.vstack([self.c, other.c]), np.vstack([self.y, other.y]), self.family
        )

    def save_jsonl(self, path, extra: dict | None = None) -> None:
        header = {"header": True, "family": self.family.to_dict(), "seed": self.seed, "n": self.n}
        if extra:
            header.update(extra)
        with open(path, "w") as fh:
            fh.write(json.dumps(header) + "\n")
            for xl, cl, yl in zip(self.x, self.c, self.y):
                fh.write(json.dumps({"x": xl.tolist(), "c": cl.tolist(), "y": yl.tolist()}) + "\n")

    @classmethod
    def load_jsonl(cls, path) -> tuple["Dataset", dict]:
        lines = Path(path).read_text().splitlines()
        header = json.loads(lines[0])
        if not header.get("header"):
            raise ValueError(f"{path}: first line is not a dataset header")
        family = ModelFamily.from_dict(header["family"])
        rows = [json.loads(line) for line in lines[1:] if line.strip()]
        d = family.dims
        x = np.array([r["x"] for r in rows], dtype=float).reshape(len(rows), d.n_in)
        c = np.array([r["c"] for r in rows], dtype=float).reshape(len(rows), d.n_concepts)
        y = np.array([r["y"] for r in rows], dtype=float).reshape(len(rows), d.n_out)
        return cls(x, c, y, family, seed=header.get("seed")), header


# --- means and densities -------------------------------------------------------


def linear_predictors(family: ModelFamily, left: np.ndarray, right: np.ndarray, x: np.ndarray):
    """Linear predictors for y and c, shape (..., n, M) and (..., n, K)."""
    if family.model is Model.CBM:
        hidden = np.einsum("...kj,nj->...nk", right, x)
        return np.einsum("...mk,...nk->...nm", left, hidden), hidden
    z = np.einsum("...ij,nj->...ni", left @ right, x)
    m = family.dims.n_out
    return z[..., :m], z[..., m:]


def _gaussian_logpdf(resid_sq: np.ndarray, dim: int, precision: float) -> np.ndarray:
    return -0.5 * precision * resid_sq + 0.5 * dim * (math.log(precision) - LOG_2PI)


def _bernoulli_logpmf(c: np.ndarray, logits: np.ndarray) -> np.ndarray:
    # gamma already folded into the logits
    return np.sum(c * log_expit(logits) + (1.0 - c) * log_expit(-logits), axis=-1)


def _pointwise(family: ModelFamily, mean_y, mean_c, y, c) -> np.ndarray:
    kinds = family.kinds
    gamma = family.gamma
    if kinds.task is TaskKind.REAL:
        out = _gaussian_logpdf(np.sum((y - mean_y) ** 2, axis=-1), family.dims.n_out, 1.0)
    else:
        out = np.sum(y * log_softmax(mean_y, axis=-1), axis=-1)
    if family.dims.n_concepts:
        if kinds.concept is ConceptKind.REAL:
            out = out + _gaussian_logpdf(np.sum((c - mean_c) ** 2, axis=-1), family.dims.n_concepts, gamma)
        else:
            out = out + _bernoulli_logpmf(c, gamma * mean_c)
    return out


def pointwise_log_density(family: ModelFamily, left, right, x, y, c) -> np.ndarray:
    """Per-record log density; leading batch axes on the weights broadcast."""
    mean_y, mean_c = linear_predictors(family, np.asarray(left, float), np.asarray(right, float), np.asarray(x, float))
    return _pointwise(family, mean_y, mean_c, np.asarray(y, float), np.asarray(c, float))


def _gaussian_sum(stats_yy, stats_yx, xx, w, precision, dim, n):
    # sum_l ||y_l - W x_l||^2 from sufficient statistics
    cross = np.einsum("...ij,ij->...", w, stats_yx)
    quad = np.einsum("...ij,jk,...ik->...", w, xx, w)
    resid = stats_yy - 2.0 * cross + quad
    return -0.5 * precision * resid + 0.5 * dim * n * (math.log(precision) - LOG_2PI)


def log_likelihood_batch(family: ModelFamily, left: np.ndarray, right: np.ndarray, data: Dataset) -> np.ndarray:
    """Total log likelihood for a batch of weight pairs, shape ``left.shape[:-2]``."""
    left = np.asarray(left, dtype=float)
    right = np.asarray(right, dtype=float)
    batch = np.broadcast_shapes(left.shape[:-2], right.shape[:-2])
    if data.n == 0:
        return np.zeros(batch)
    kinds = family.kinds
    d = family.dims
    st = data.stats()
    total = np.zeros(batch)
    product = left @ right
    if family.model is Model.CBM:
        w_y, w_c = product, right
    else:
        w_y, w_c = product[..., : d.n_out, :], product[..., d.n_out :, :]
    need_means = kinds.task is TaskKind.CATEGORICAL or (d.n_concepts and kinds.concept is ConceptKind.BINARY)
    if need_means:
        mean_y, mean_c = linear_predictors(family, left, right, data.x)
    if kinds.task is TaskKind.REAL:
        total = total + _gaussian_sum(st["yy"], st["yx"], st["xx"], w_y, 1.0, d.n_out, data.n)
    else:
        total = total + np.sum(data.y * log_softmax(mean_y, axis=-1), axis=(-2, -1))
    if d.n_concepts:
        if kinds.concept is ConceptKind.REAL:
            total = total + _gaussian_sum(st["cc"], st["cx"], st["xx"], w_c, family.gamma, d.n_concepts, data.n)
        else:
            total = total + np.sum(_bernoulli_logpmf(data.c, family.gamma * mean_c), axis=-1)
    if not np.all(np.isfinite(total)):
        raise FloatingPointError("log likelihood is not finite; linear predictors overflowed")
    return total


def log_likelihood(family: ModelFamily, params: ParamPoint, data: Dataset) -> float:
    params.check(family)
    return float(log_likelihood_batch(family, params.left, params.right, data))


# --- sampling ----------------------------------------------------------------


def sample_responses(family: ModelFamily, left, right, x: np.ndarray, rng: np.random.Generator):
    """Draw (y, c) given inputs from the model at weights (left, right)."""
    mean_y, mean_c = linear_predictors(family, np.asarray(left, float), np.asarray(right, float), x)
    n = x.shape[0]
    d = family.dims
    if family.kinds.task is TaskKind.REAL:
        y = mean_y + rng.standard_normal((n, d.n_out))
    else:
        prob = np.exp(log_softmax(mean_y, axis=-1))
        u = rng.random((n, 1))
        idx = np.minimum((np.cumsum(prob, axis=1) < u).sum(axis=1), d.n_out - 1)
        y = np.zeros((n, d.n_out))
        y[np.arange(n), idx] = 1.0
    if d.n_concepts == 0:
        c = np.zeros((n, 0))
    elif family.kinds.concept is ConceptKind.REAL:
        c = mean_c + rng.standard_normal((n, d.n_concepts)) / math.sqrt(family.gamma)
    else:
        c = (rng.random((n, d.n_concepts)) < expit(family.gamma * mean_c)).astype(float)
    return y, c


def sample_dataset(family: ModelFamily, truth: ParamPoint, inputs: InputSpec, n: int, rng_seed: int) -> Dataset:
    truth.check(family)
    if inputs.n_in != family.dims.n_in:
        raise InvalidDimsError(f"input dimension {inputs.n_in} != n_in {family.dims.n_in}")
    if family.model is not Model.CBM:
        rank = numerical_rank(truth.product)
        if rank != family.dims.true_rank:
            raise InvalidDimsError(f"truth has rank {rank} but true_rank is {family.dims.true_rank}")
    rng = np.random.default_rng(rng_seed)
    x = inputs.sample(rng, n)
    y, c = sample_responses(family, truth.left, truth.right, x, rng)
    return Dataset(x, c, y, family, seed=rng_seed)


def empirical_entropy(family: ModelFamily, truth: ParamPoint, data: Dataset) -> float:
    """Mean negative log true conditional density of the responses (0 for an empty set)."""
    if data.n == 0:
        return 0.0
    return -log_likelihood(family, truth, data) / data.n


# --- KL divergences ------------------------------------------------------------


def _require_gaussian(family: ModelFamily) -> None:
    if family.kinds.task is not TaskKind.REAL or (
        family.dims.n_concepts and family.kinds.concept is not ConceptKind.REAL
    ):
        raise ValueError("closed-form KL needs Gaussian task and concepts; use kl_monte_carlo")


def kl_closed_form(family: ModelFamily, params: ParamPoint, truth: ParamPoint, second_moment=None) -> float:
    """Average conditional KL for Gaussian responses.

    CBM: ``tr(D X D^T)/2 + gamma tr(E X E^T)/2`` with ``D = AB - A0B0``,
    ``E = B - B0``; Multitask/Standard: ``tr(D X D^T)/2`` with ``D = UV - U0V0``.
    """
    _require_gaussian(family)
    params.check(family)
    truth.check(family)
    xm = np.eye(family.dims.n_in) if second_moment is None else np.asarray(second_moment, dtype=float)
    diff = params.product - truth.product
    value = 0.5 * np.trace(diff @ xm @ diff.T)
    if family.model is Model.CBM:
        e = params.right - truth.right
        value += 0.5 * family.gamma * np.trace(e @ xm @ e.T)
    return float(value)


def kl_closed_form_batch(family: ModelFamily, left, right, truth: ParamPoint, second_moment=None) -> np.ndarray:
    """Vectorised :func:`kl_closed_form` over a leading batch axis."""
    _require_gaussian(family)
    xm = np.eye(family.dims.n_in) if second_moment is None else np.asarray(second_moment, dtype=float)
    diff = np.asarray(left) @ np.asarray(right) - truth.product
    value = 0.5 * np.einsum("...ij,jk,...ik->...", diff, xm, diff)
    if family.model is Model.CBM:
        e = np.asarray(right) - truth.right
        value = value + 0.5 * family.gamma * np.einsum("...ij,jk,...ik->...", e, xm, e)
    return value


def _bernoulli_kl(logit_p: np.ndarray, logit_q: np.ndarray) -> np.ndarray:
    p = expit(logit_p)
    return p * (log_expit(logit_p) - log_expit(logit_q)) + (1 - p) * (log_expit(-logit_p) - log_expit(-logit_q))


def inner_kl(family: ModelFamily, params: ParamPoint, truth: ParamPoint, x: np.ndarray) -> np.ndarray:
    """Closed-form KL(q(.|x) || p(.|x, w)) for each input row."""
    my, mc = linear_predictors(family, params.left, params.right, x)
    ty, tc = linear_predictors(family, truth.left, truth.right, x)
    if family.kinds.task is TaskKind.REAL:
        value = 0.5 * np.sum((my - ty) ** 2, axis=-1)
    else:
        lq, lp = log_softmax(ty, axis=-1), log_softmax(my, axis=-1)
        value = np.sum(np.exp(lq) * (lq - lp), axis=-1)
    if family.dims.n_concepts:
        g = family.gamma
        if family.kinds.concept is ConceptKind.REAL:
            value = value + 0.5 * g * np.sum((mc - tc) ** 2, axis=-1)
        else:
            value = value + np.sum(_bernoulli_kl(g * tc, g * mc), axis=-1)
    return value


def kl_monte_carlo(
    family: ModelFamily,
    params: ParamPoint,
    truth: ParamPoint,
    inputs: InputSpec,
    n_x: int,
    n_resp: int = 1,
    rng_seed: int = 0,
    analytic_inner: bool = True,
) -> tuple[float, float]:
    """Monte Carlo average KL over inputs; returns ``(estimate, std_error)``.

    With ``analytic_inner`` the response expectation is done in closed form per
    input and only ``x`` is sampled; otherwise ``n_resp`` responses are drawn
    from the truth for each input and the log-ratio is averaged.
    """
    if n_x < 1 or n_resp < 1:
        raise ValueError("n_x and n_resp must be >= 1")
    params.check(family)
    truth.check(family)
    rng = np.random.default_rng(rng_seed)
    x = inputs.sample(rng, n_x)
    if analytic_inner:
        per_x = inner_kl(family, params, truth, x)
    else:
        xr = np.repeat(x, n_resp, axis=0)
        y, c = sample_responses(family, truth.left, truth.right, xr, rng)
        ratio = pointwise_log_density(family, truth.left, truth.right, xr, y, c) - pointwise_log_density(
            family, params.left, params.right, xr, y, c
        )
        per_x = ratio.reshape(n_x, n_resp).mean(axis=1)
    se = float(per_x.std(ddof=1) / math.sqrt(n_x)) if n_x > 1 else float("nan")
    return float(per_x.mean()), se
