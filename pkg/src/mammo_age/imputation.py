"""Mean substitution versus model-predicted age, judged by GLM fit quality."""
from __future__ import annotations

import csv
import io
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import FitError, RangeError, ShapeError, TagError
from .glm import design_from_table, fit, wald

LOGISTIC_KS = (36, 63, 80)
LINEAR_KS = (63, 80, 112)

# covariates of the case-control model; the linear model uses age alone
LOGISTIC_COVARIATES = ("age", "PD", "FGT", "BS", "MIB", "MIP")


@dataclass
class DegradationRow:
    covariate: str
    k: int
    aic: float
    estimate: float
    ci_lo: float
    ci_hi: float
    p_value: float
    n_seeds: int = 1


def mean_impute(ages, k: int, seed: int) -> np.ndarray:
    """Overwrite ``k`` randomly chosen entries with the mean of the full vector."""
    ages = np.asarray(ages, dtype=np.float64)
    n = len(ages)
    if not 0 <= k <= n:
        raise RangeError(f"k={k} outside [0, {n}]")
    out = ages.copy()
    if k:
        idx = np.random.default_rng(seed).choice(n, size=k, replace=False)
        out[idx] = ages.mean()
    return out


def fill_missing_with_mean(ages) -> np.ndarray:
    ages = np.asarray(ages, dtype=np.float64)
    miss = np.isnan(ages)
    if miss.all():
        raise RangeError("no observed ages to average")
    out = ages.copy()
    out[miss] = ages[~miss].mean()
    return out


def model_impute(model, features, ages, ids: Optional[Sequence[str]] = None) -> np.ndarray:
    """Replace NaN entries of ``ages`` by forest predictions.

    Without ``ids`` the feature rows are aligned with ``ages``; with ``ids``,
    feature rows are looked up by id for the missing entries only.
    """
    ages = np.asarray(ages, dtype=np.float64)
    if model.extractor_tag != features.extractor_tag:
        raise TagError(f"model was trained on {model.extractor_tag!r} features, "
                       f"got {features.extractor_tag!r}")
    miss = np.flatnonzero(np.isnan(ages))
    out = ages.copy()
    if miss.size == 0:
        return out
    if ids is None:
        if features.n != len(ages):
            raise ShapeError(f"{features.n} feature rows for {len(ages)} ages")
        X = features.X[miss]
    else:
        if len(ids) != len(ages):
            raise ShapeError(f"{len(ids)} ids for {len(ages)} ages")
        X = features.select([ids[i] for i in miss]).X
    out[miss] = model.predict(X)
    return out


def _fit_row(table, family, outcome, covariates, age_col, ages):
    f = fit(design_from_table(table, family, outcome, covariates, {age_col: ages}), family)
    w = wald(f, age_col)
    return f.aic, w.estimate, w.ci95[0], w.ci95[1], w.p_value


def _cell(args):
    table, family, outcome, covariates, age_col, ages, k, seed = args
    try:
        return _fit_row(table, family, outcome, covariates, age_col, mean_impute(ages, k, seed))
    except FitError as exc:
        raise type(exc)(f"k={k}, seed={seed}: {exc}") from exc


def degradation_experiment(
    table,
    family: str,
    outcome: str,
    ks: Sequence[int],
    seeds: Sequence[int],
    strategy: str = "mean",
    *,
    age_col: str = "age",
    covariates: Optional[Sequence[str]] = None,
    predicted_ages=None,
    jobs: int = 1,
) -> list[DegradationRow]:
    """Refit the GLM after imputing the age column.

    ``strategy="mean"``: one row per k in ``[0, *ks]`` (named ``Age_base`` and
    ``Age_<k>``); each k is run for every seed and the row reports medians over
    seeds. Missing ages, if any, are first filled with the observed mean.

    ``strategy="model"``: missing ages are filled from ``predicted_ages`` and a
    single ``Age_model`` row is returned.
    """
    covariates = list(covariates) if covariates is not None else [age_col]
    if age_col not in covariates:
        raise ValueError(f"age column {age_col!r} must be among the covariates")
    raw = table[age_col].to_numpy(dtype=float)

    if strategy == "model":
        if predicted_ages is None:
            raise ValueError("model strategy needs predicted ages")
        pred = np.asarray(predicted_ages, dtype=float)
        ages = np.where(np.isnan(raw), pred, raw)
        if np.isnan(ages).any():
            raise RangeError("predicted ages leave entries missing")
        aic_, est, lo, hi, p = _fit_row(table, family, outcome, covariates, age_col, ages)
        return [DegradationRow("Age_model", 0, aic_, est, lo, hi, p, 1)]
    if strategy != "mean":
        raise ValueError(f"unknown strategy {strategy!r}")

    ages = fill_missing_with_mean(raw) if np.isnan(raw).any() else raw
    seeds = list(seeds) or [0]
    k_list = [0] + sorted({int(k) for k in ks if int(k) != 0})
    tasks = [(table, family, outcome, covariates, age_col, ages, k, s) for k in k_list for s in seeds]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            results = list(ex.map(_cell, tasks, chunksize=max(1, len(tasks) // (4 * jobs))))
    else:
        results = [_cell(t) for t in tasks]

    rows = []
    for i, k in enumerate(k_list):
        cell = np.array(results[i * len(seeds):(i + 1) * len(seeds)])
        med = np.median(cell, axis=0)
        rows.append(DegradationRow("Age_base" if k == 0 else f"Age_{k}", k,
                                   *(float(v) for v in med), n_seeds=len(seeds)))
    return rows


ROW_HEADER = ("covariate", "k", "aic", "estimate", "ci_lo", "ci_hi", "p_value", "n_seeds")


def write_rows(rows: Sequence[DegradationRow], path) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ROW_HEADER)
    for r in rows:
        w.writerow([r.covariate, r.k, repr(r.aic), repr(r.estimate), repr(r.ci_lo), repr(r.ci_hi),
                    repr(r.p_value), r.n_seeds])
    Path(path).write_text(buf.getvalue())


def synthetic_cohort(seed: int = 0, n: int = 322, n_cases: int = 51, age_effect: float = 0.02,
                     fgt_slope: float = -0.02):
    """A MIAS-like case-control table with a planted age effect.

    Columns: ``id, status, age, PD, FGT, BS, MIB, MIP``. Cases are drawn
    without replacement with odds proportional to ``exp(age_effect * age)``;
    FGT (F/G/D) is a thresholded latent that falls with age at ``fgt_slope``
    per year. Other covariates are noise on realistic scales (BS is a pixel
    count, so its coefficient lives near 1e-7).
    """
    import pandas as pd

    rng = np.random.default_rng(seed)
    age = np.clip(np.rint(rng.normal(57.5, 12.7, n)), 30, 90)
    latent = 1.0 + fgt_slope * (age - 57.5) + rng.normal(0.0, 0.6, n)
    fgt = np.digitize(latent, [0.5, 1.5])
    # Gumbel top-k = weighted sampling without replacement
    keys = age_effect * age + rng.gumbel(size=n)
    status = np.zeros(n, dtype=int)
    status[np.argsort(-keys, kind="stable")[:n_cases]] = 1
    pd_ = np.clip(0.1 + 0.12 * fgt + rng.beta(2, 5, n) * 0.4, 0.0, 1.0)
    bs = np.rint(rng.lognormal(np.log(2.0e5), 0.35, n))
    mib = rng.uniform(0.3, 0.7, n)
    mip = rng.uniform(0.4, 0.9, n)
    return pd.DataFrame({
        "id": [f"mdb{i + 1:03d}" for i in range(n)],
        "status": status,
        "age": age.astype(int),
        "PD": np.round(pd_, 4),
        "FGT": np.array(["F", "G", "D"])[fgt],
        "BS": bs.astype(int),
        "MIB": np.round(mib, 4),
        "MIP": np.round(mip, 4),
    })
