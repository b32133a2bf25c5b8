"""Logistic (IRLS) and linear (OLS) regression with Wald inference and AIC."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import stats

from .errors import DegenerateError, InputError, ParseError, SeparationError, SingularError

INTERCEPT = "(Intercept)"
Z_975 = 1.959963984540054

FGT_CODES = {"F": 0, "G": 1, "D": 2}

CONDITION_WARN = 1e10


def code_fgt(label) -> int:
    """Fibroglandular tissue category: Fatty 0, Fatty-glandular 1, Dense-glandular 2."""
    key = str(label).strip().upper()
    if key not in FGT_CODES:
        raise ParseError(str(label), f"unknown FGT label {label!r}; expected F, G or D")
    return FGT_CODES[key]


@dataclass
class Design:
    X: np.ndarray
    y: np.ndarray
    column_names: list[str]

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.float64)
        if self.X.ndim != 2 or self.y.shape != (self.X.shape[0],):
            raise InputError(f"design {self.X.shape} and outcome {self.y.shape} are not aligned")
        if len(self.column_names) != self.X.shape[1]:
            raise InputError("one column name per design column is required")
        if not (np.all(np.isfinite(self.X)) and np.all(np.isfinite(self.y))):
            raise InputError("design contains NaN or Inf")
        if self.column_names.count(INTERCEPT) != 1:
            raise InputError(f"design needs exactly one {INTERCEPT!r} column")
        if not np.all(self.X[:, self.column_names.index(INTERCEPT)] == 1.0):
            raise InputError("intercept column must be all ones")

    @classmethod
    def from_columns(cls, y, columns: dict, intercept: bool = True) -> "Design":
        names = ([INTERCEPT] if intercept else []) + list(columns)
        cols = ([np.ones(len(y))] if intercept else []) + [np.asarray(v, dtype=float) for v in columns.values()]
        return cls(np.column_stack(cols), np.asarray(y, dtype=float), names)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    def index(self, name: str) -> int:
        return self.column_names.index(name)


@dataclass
class GlmFit:
    family: str  # "logistic" or "linear"
    beta: np.ndarray
    cov: np.ndarray
    loglik: float
    aic: float
    n: int
    converged: bool
    iterations: int
    column_names: list[str] = field(default_factory=list)
    loglik_trace: list[float] = field(default_factory=list)

    @property
    def p(self) -> int:
        return len(self.beta)

    @property
    def n_params(self) -> int:
        # the Gaussian error variance is a parameter too
        return self.p + (1 if self.family == "linear" else 0)


@dataclass
class WaldResult:
    name: str
    estimate: float
    se: float
    statistic: float
    p_value: float
    ci95: tuple[float, float]
    odds_ratio: Optional[float] = None


def _check_rank(X: np.ndarray) -> None:
    n, p = X.shape
    s = np.linalg.svd(X, compute_uv=False)
    tol = s.max() * max(n, p) * np.finfo(float).eps
    if (s > tol).sum() < p:
        raise SingularError(f"design matrix is rank deficient (rank {(s > tol).sum()} < {p})")
    cond = s.max() / s.min()
    if cond > CONDITION_WARN:
        warnings.warn(f"design matrix is ill-conditioned (condition number {cond:.3g})",
                      RuntimeWarning, stacklevel=3)


def _solve_spd(A: np.ndarray, b: np.ndarray) -> np.ndarray:
    try:
        c = np.linalg.cholesky(A)
    except np.linalg.LinAlgError:
        raise SingularError("information matrix is not positive definite") from None
    return np.linalg.solve(c.T, np.linalg.solve(c, b))


def _inverse_spd(A: np.ndarray) -> np.ndarray:
    inv = _solve_spd(A, np.eye(A.shape[0]))
    return (inv + inv.T) / 2


def logistic_loglik(X: np.ndarray, y: np.ndarray, beta: np.ndarray) -> float:
    eta = X @ beta
    # log(1 + e^eta) computed as logaddexp(0, eta)
    return float(np.sum(y * eta - np.logaddexp(0.0, eta)))


def logistic_gradient(X: np.ndarray, y: np.ndarray, beta: np.ndarray) -> np.ndarray:
    p = 1.0 / (1.0 + np.exp(-(X @ beta)))
    return X.T @ (y - p)


def fit_logistic(design: Design, *, tol: float = 1e-8, max_iter: int = 50,
                 separation_threshold: float = 15.0) -> GlmFit:
    """Maximum-likelihood logistic regression by IRLS (Newton) with step-halving.

    Starts from beta = 0. A step is halved until the log-likelihood does not
    decrease; iteration stops once max|delta beta| < ``tol``. Any coefficient
    exceeding ``separation_threshold`` in absolute value signals (quasi-)
    complete separation.
    """
    X, y = design.X, design.y
    n, p = X.shape
    if not np.all((y == 0) | (y == 1)):
        raise InputError("logistic outcome must be coded 0/1")
    if y.min() == y.max():
        raise InputError("logistic outcome needs both classes present")
    if p > n:
        raise SingularError(f"more parameters ({p}) than observations ({n})")
    _check_rank(X)

    beta = np.zeros(p)
    ll = logistic_loglik(X, y, beta)
    trace = [ll]
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        mu = 1.0 / (1.0 + np.exp(-(X @ beta)))
        w = mu * (1.0 - mu)
        info = X.T @ (X * w[:, None])
        step = _solve_spd(info, X.T @ (y - mu))
        t = 1.0
        for _ in range(30):
            cand = beta + t * step
            ll_new = logistic_loglik(X, y, cand)
            if ll_new >= ll:
                break
            t /= 2
        else:
            # no ascent along the Newton direction: at the optimum to machine precision
            converged = True
            break
        delta = cand - beta
        beta, ll = cand, ll_new
        trace.append(ll)
        if np.max(np.abs(beta)) > separation_threshold:
            j = int(np.argmax(np.abs(beta)))
            raise SeparationError(
                f"coefficient {design.column_names[j]!r} reached {beta[j]:.3g} at iteration {it}: "
                "outcome is (quasi-)completely separated")
        if np.max(np.abs(delta)) < tol:
            converged = True
            break

    mu = 1.0 / (1.0 + np.exp(-(X @ beta)))
    info = X.T @ (X * (mu * (1.0 - mu))[:, None])
    cov = _inverse_spd(info)
    return GlmFit("logistic", beta, cov, ll, 2 * p - 2 * ll, n, converged, it,
                  list(design.column_names), trace)


def fit_linear(design: Design) -> GlmFit:
    """Ordinary least squares via QR, with the Gaussian MLE log-likelihood."""
    X, y = design.X, design.y
    n, p = X.shape
    if n <= p:
        raise SingularError(f"need more observations ({n}) than parameters ({p})")
    _check_rank(X)
    q, r = np.linalg.qr(X)
    beta = np.linalg.solve(r, q.T @ y)
    resid = y - X @ beta
    rss = float(resid @ resid)
    if rss == 0.0:
        ll = math.inf
        sigma2 = 0.0
    else:
        sigma2_mle = rss / n
        ll = -0.5 * n * (math.log(2 * math.pi * sigma2_mle) + 1.0)
        sigma2 = rss / (n - p)
    r_inv = np.linalg.solve(r, np.eye(p))
    cov = sigma2 * (r_inv @ r_inv.T)
    cov = (cov + cov.T) / 2
    return GlmFit("linear", beta, cov, ll, 2 * (p + 1) - 2 * ll, n, True, 1, list(design.column_names))


def aic(fit: GlmFit) -> float:
    return 2 * fit.n_params - 2 * fit.loglik


def wald(fit: GlmFit, j) -> WaldResult:
    """Two-sided Wald test and 95% interval for coefficient ``j`` (index or name).

    Logistic fits use the standard normal; linear fits use Student t with
    n - p degrees of freedom.
    """
    if isinstance(j, str):
        j = fit.column_names.index(j)
    if not 0 <= j < fit.p:
        raise IndexError(f"coefficient index {j} out of range for p={fit.p}")
    est = float(fit.beta[j])
    se = math.sqrt(max(float(fit.cov[j, j]), 0.0))
    if se == 0.0:
        raise DegenerateError(f"standard error of coefficient {j} is zero")
    stat = est / se
    if fit.family == "logistic":
        pval = 2 * stats.norm.sf(abs(stat))
        q = Z_975
    else:
        df = fit.n - fit.p
        pval = 2 * stats.t.sf(abs(stat), df)
        q = float(stats.t.ppf(0.975, df))
    name = fit.column_names[j] if fit.column_names else str(j)
    return WaldResult(name, est, se, stat, float(min(pval, 1.0)), (est - q * se, est + q * se),
                      math.exp(est) if fit.family == "logistic" else None)


def fit(design: Design, family: str) -> GlmFit:
    if family == "logistic":
        return fit_logistic(design)
    if family == "linear":
        return fit_linear(design)
    raise ValueError(f"unknown family {family!r}")


# -- covariate tables ---------------------------------------------------------

_CASE_LABELS = {"1", "case", "cancer", "malignant", "m"}
_CONTROL_LABELS = {"0", "control", "normal", "benign", "b", "n"}


def code_status(value) -> int:
    """Case/control coding: malignant cases are 1, benign and normal controls 0."""
    key = str(value).strip().lower()
    if key.endswith(".0"):
        key = key[:-2]
    if key in _CASE_LABELS:
        return 1
    if key in _CONTROL_LABELS:
        return 0
    raise ParseError(str(value), f"cannot code status {value!r} as case/control")


def numeric_column(table, name: str) -> np.ndarray:
    """A table column as floats; F/G/D labels are coded for FGT-style columns."""
    import pandas as pd

    if name not in table.columns:
        raise InputError(f"column {name!r} not in table (have {list(table.columns)})")
    col = table[name]
    if pd.api.types.is_numeric_dtype(col):
        return col.to_numpy(dtype=float)
    return np.array([code_fgt(v) for v in col], dtype=float)


def design_from_table(table, family: str, outcome: str, covariates: Sequence[str],
                      overrides: Optional[dict] = None) -> Design:
    """Build a design with intercept from a DataFrame.

    ``overrides`` replaces named covariate columns (e.g. an imputed age vector).
    """
    overrides = overrides or {}
    if family == "logistic":
        if outcome not in table.columns:
            raise InputError(f"outcome column {outcome!r} not in table")
        y = np.array([code_status(v) for v in table[outcome]], dtype=float)
    else:
        y = numeric_column(table, outcome)
    cols = {}
    for c in covariates:
        cols[c] = np.asarray(overrides[c], dtype=float) if c in overrides else numeric_column(table, c)
    return Design.from_columns(y, cols)


def fit_summary(fit_: GlmFit) -> dict:
    rows = []
    for j, name in enumerate(fit_.column_names):
        w = wald(fit_, j)
        row = {"name": name, "estimate": w.estimate, "se": w.se, "statistic": w.statistic,
               "p_value": w.p_value, "ci_lo": w.ci95[0], "ci_hi": w.ci95[1]}
        if w.odds_ratio is not None:
            row["odds_ratio"] = w.odds_ratio
        rows.append(row)
    return {"family": fit_.family, "n": fit_.n, "converged": fit_.converged,
            "iterations": fit_.iterations, "loglik": fit_.loglik, "aic": fit_.aic,
            "coefficients": rows}
