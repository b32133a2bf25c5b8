"""Repeated seeded train/test evaluation of the age regressor."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import DegenerateError, FitError, ShapeError
from .forest import ForestParams, fit_forest


def derive_seed(base_seed: int, index: int) -> int:
    """Child seed for repeat ``index``: first 64-bit word of SeedSequence([base, index])."""
    return int(np.random.SeedSequence([base_seed, index]).generate_state(1, np.uint64)[0])


def n_train(n: int, train_frac: float = 0.7) -> int:
    # round half up; both sides keep at least one sample
    k = int(math.floor(train_frac * n + 0.5))
    return min(max(k, 1), n - 1)


def split_indices(n: int, train_frac: float = 0.7, seed: int = 0):
    """Random partition of ``range(n)`` into sorted (train, test) index arrays."""
    if n < 2:
        raise ValueError(f"need n >= 2 to split, got {n}")
    perm = np.random.default_rng(seed).permutation(n)
    k = n_train(n, train_frac)
    return np.sort(perm[:k]), np.sort(perm[k:])


def split_groups(groups: Sequence, train_frac: float = 0.7, seed: int = 0):
    """Like :func:`split_indices` but keeps all samples of a group on one side."""
    groups = np.asarray(groups)
    uniq = np.unique(groups)
    if len(uniq) < 2:
        raise ValueError("need at least two groups to split")
    tr_groups, _ = split_indices(len(uniq), train_frac, seed)
    in_train = np.isin(groups, uniq[tr_groups])
    return np.flatnonzero(in_train), np.flatnonzero(~in_train)


def _check_pair(y, y_hat):
    y = np.asarray(y, dtype=np.float64)
    y_hat = np.asarray(y_hat, dtype=np.float64)
    if y.shape != y_hat.shape or y.ndim != 1:
        raise ShapeError(f"length mismatch: {y.shape} vs {y_hat.shape}")
    return y, y_hat


def mae(y, y_hat) -> float:
    y, y_hat = _check_pair(y, y_hat)
    if y.size == 0:
        raise ShapeError("mae of empty vectors")
    return float(np.mean(np.abs(y - y_hat)))


def pearson(y, y_hat) -> float:
    y, y_hat = _check_pair(y, y_hat)
    if y.size < 2:
        raise DegenerateError("pearson needs at least two points")
    a = y - y.mean()
    b = y_hat - y_hat.mean()
    sa, sb = np.sqrt(a @ a), np.sqrt(b @ b)
    if sa == 0 or sb == 0:
        raise DegenerateError("pearson of a constant vector")
    return float(np.clip((a @ b) / (sa * sb), -1.0, 1.0))


def baseline_mae(y_train, y_test) -> float:
    """MAE of predicting the training-set mean age for every test sample."""
    y_train = np.asarray(y_train, dtype=np.float64)
    if y_train.size == 0:
        raise ShapeError("baseline needs a non-empty training set")
    y_test = np.asarray(y_test, dtype=np.float64)
    return mae(y_test, np.full_like(y_test, y_train.mean()))


@dataclass
class SplitResult:
    seed: int
    train_n: int
    test_n: int
    mae: float
    pearson_r: Optional[float]
    baseline_mae: float
    oob_mae: Optional[float] = None


@dataclass
class EvalReport:
    per_split: list[SplitResult]
    aggregate: dict = field(default_factory=dict)
    scatter: list[tuple[float, float]] = field(default_factory=list)

    @classmethod
    def from_splits(cls, splits, pooled_r=None, scatter=()):
        rs = [s.pearson_r for s in splits if s.pearson_r is not None]
        agg = {
            "n_repeats": len(splits),
            "mean_mae": float(np.mean([s.mae for s in splits])),
            "mean_baseline_mae": float(np.mean([s.baseline_mae for s in splits])),
            "mean_r": float(np.mean(rs)) if rs else None,
            "pooled_r": pooled_r,
        }
        return cls(list(splits), agg, list(scatter))

    def consistent(self, tol: float = 1e-12) -> bool:
        """Aggregates recompute from the per-split rows."""
        again = EvalReport.from_splits(self.per_split, self.aggregate.get("pooled_r"))
        for k in ("mean_mae", "mean_baseline_mae", "mean_r"):
            a, b = self.aggregate[k], again.aggregate[k]
            if (a is None) != (b is None) or (a is not None and abs(a - b) > tol):
                return False
        return True

    def to_dict(self) -> dict:
        return {"per_split": [asdict(s) for s in self.per_split], "aggregate": self.aggregate}

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    def write_scatter(self, path) -> None:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["actual", "predicted"])
        for a, p in self.scatter:
            w.writerow([repr(float(a)), repr(float(p))])
        Path(path).write_text(buf.getvalue())


def _safe_pearson(y, y_hat):
    try:
        return pearson(y, y_hat)
    except DegenerateError:
        return None


def repeated_eval(
    features,
    ages,
    params: ForestParams,
    n_repeats: int = 10,
    base_seed: int = 0,
    train_frac: float = 0.7,
    groups: Optional[Sequence] = None,
    jobs: int = 1,
) -> EvalReport:
    """Train and score a forest on ``n_repeats`` fresh random splits.

    Repeat ``i`` uses ``derive_seed(base_seed, i)`` both for its split and as
    the forest seed. ``groups`` (e.g. case ids) switches to group-level
    splitting. The scatter data holds (actual, predicted) for the last split;
    ``pooled_r`` correlates predictions pooled over all splits.
    """
    X = np.asarray(features, dtype=np.float64)
    y = np.asarray(ages, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] != y.shape[0]:
        raise ShapeError(f"features {X.shape} and ages {y.shape} are not aligned")
    if n_repeats < 1:
        raise ValueError("n_repeats must be >= 1")

    splits = []
    pooled_y, pooled_p = [], []
    scatter = []
    for i in range(n_repeats):
        seed = derive_seed(base_seed, i)
        if groups is None:
            tr, te = split_indices(len(y), train_frac, seed)
        else:
            tr, te = split_groups(groups, train_frac, seed)
        try:
            model = fit_forest(X[tr], y[tr], replace(params, seed=seed), jobs=jobs)
        except FitError as exc:
            raise FitError(f"repeat {i}: {exc}") from exc
        pred = model.predict(X[te])
        splits.append(SplitResult(seed, len(tr), len(te), mae(y[te], pred),
                                  _safe_pearson(y[te], pred), baseline_mae(y[tr], y[te]),
                                  model.oob_mae))
        pooled_y.append(y[te])
        pooled_p.append(pred)
        if i == n_repeats - 1:
            scatter = list(zip(y[te].tolist(), pred.tolist()))
    pooled_r = _safe_pearson(np.concatenate(pooled_y), np.concatenate(pooled_p))
    return EvalReport.from_splits(splits, pooled_r, scatter)
