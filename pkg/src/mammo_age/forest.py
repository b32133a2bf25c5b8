"""Random forest regression built from bagged CART trees.

Trees split on ``x[feature] <= threshold`` (left) with thresholds at midpoints
between consecutive distinct feature values, choosing the split that
maximises the reduction in sum of squared errors. Ties go to the lowest
feature index, then the lowest threshold.

Randomness: tree ``i`` of a forest seeded with ``seed`` draws from
``numpy.random.Generator(PCG64(SeedSequence([seed, i])))``; the bootstrap
resample is drawn first, then one feature subset per node in depth-first
(left child first) order. The model is therefore independent of the number of
worker processes.
"""
from __future__ import annotations

import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import FormatError, InputError, ShapeError

MODEL_FORMAT = "mammo-age-forest"
MODEL_FORMAT_VERSION = 1

_LEAF = -1


@dataclass
class ForestParams:
    n_trees: int = 100
    mtry: Optional[int] = None  # None -> ceil(d / 3)
    min_leaf: int = 5
    max_depth: Optional[int] = None
    bootstrap: bool = True
    seed: int = 0

    def resolve_mtry(self, d: int) -> int:
        m = self.mtry if self.mtry is not None else math.ceil(d / 3)
        if not 1 <= m <= d:
            raise ValueError(f"mtry={m} outside [1, {d}]")
        return m

    def validate(self) -> None:
        if self.n_trees < 1:
            raise ValueError("n_trees must be >= 1")
        if self.min_leaf < 1:
            raise ValueError("min_leaf must be >= 1")
        if self.max_depth is not None and self.max_depth < 0:
            raise ValueError("max_depth must be >= 0")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")


@dataclass
class RegressionTree:
    """Flat node arrays; ``feature[i] == -1`` marks a leaf holding ``value[i]``."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    @property
    def n_leaves(self) -> int:
        return int(np.sum(self.feature == _LEAF))

    def predict(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        node = np.zeros(X.shape[0], dtype=np.intp)
        rows = np.arange(X.shape[0])
        active = self.feature[node] != _LEAF
        while active.any():
            r, nd = rows[active], node[active]
            go_left = X[r, self.feature[nd]] <= self.threshold[nd]
            node[active] = np.where(go_left, self.left[nd], self.right[nd])
            active = self.feature[node] != _LEAF
        return self.value[node]

    def to_dict(self) -> dict:
        return {
            "feature": self.feature.tolist(),
            "threshold": self.threshold.tolist(),
            "left": self.left.tolist(),
            "right": self.right.tolist(),
            "value": self.value.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RegressionTree":
        tree = cls(
            np.asarray(d["feature"], dtype=np.intp),
            np.asarray(d["threshold"], dtype=np.float64),
            np.asarray(d["left"], dtype=np.intp),
            np.asarray(d["right"], dtype=np.intp),
            np.asarray(d["value"], dtype=np.float64),
        )
        tree.check()
        return tree

    def check(self) -> None:
        """Raise FormatError unless the arrays form one binary tree rooted at 0."""
        n = self.n_nodes
        if not (len(self.threshold) == len(self.left) == len(self.right) == len(self.value) == n) or n == 0:
            raise FormatError("tree node arrays have inconsistent lengths")
        seen = np.zeros(n, dtype=bool)
        stack = [0]
        while stack:
            i = stack.pop()
            if seen[i]:
                raise FormatError("tree has a cycle or shared node")
            seen[i] = True
            if self.feature[i] != _LEAF:
                for c in (self.left[i], self.right[i]):
                    if not 0 < c < n:
                        raise FormatError(f"node {i} has invalid child {c}")
                    stack.append(int(c))
        if not seen.all():
            raise FormatError("tree has unreachable nodes")


def best_split(X: np.ndarray, y: np.ndarray, features: np.ndarray, min_leaf: int = 1):
    """Best SSE-reducing split of the rows ``(X, y)`` over ``features``.

    Returns ``(gain, feature, threshold)`` or ``None`` if no split leaves at
    least ``min_leaf`` rows on each side. The gain is computed as
    ``S_L^2/n_L + S_R^2/n_R - S^2/n`` on centred targets, which equals
    ``SSE(parent) - SSE(left) - SSE(right)``.
    """
    features = np.asarray(features, dtype=np.intp)
    found = _best_split_columns(np.asarray(X, dtype=np.float64)[:, features],
                                np.asarray(y, dtype=np.float64), min_leaf)
    if found is None:
        return None
    gain, j, thr = found
    return gain, int(features[j]), thr


def _best_split_columns(Xf: np.ndarray, y: np.ndarray, min_leaf: int):
    n, m = Xf.shape
    if n < 2 * min_leaf or m == 0:
        return None
    yc = y - y.mean()
    order = np.argsort(Xf, axis=0, kind="stable")
    xs = np.take_along_axis(Xf, order, axis=0)
    cs = np.cumsum(yc[order], axis=0)[:-1]  # (n-1, m): left sums for a split after row i
    total = yc.sum()
    n_left = np.arange(1, n, dtype=np.float64)[:, None]
    n_right = n - n_left
    gain = cs**2 / n_left + (total - cs) ** 2 / n_right - total**2 / n
    valid = xs[:-1] < xs[1:]
    if min_leaf > 1:
        valid[: min_leaf - 1] = False
        valid[n - min_leaf:] = False
    gain = np.where(valid, gain, -np.inf)
    # column-major flattening: argmax picks the lowest column, then the lowest threshold
    flat = gain.T.ravel()
    k = int(np.argmax(flat))
    if not np.isfinite(flat[k]):
        return None
    j, i = divmod(k, n - 1)
    lo, hi = xs[i, j], xs[i + 1, j]
    thr = lo + (hi - lo) / 2.0
    if not lo <= thr < hi:  # adjacent floats: midpoint rounds up to hi
        thr = lo
    return float(flat[k]), j, float(thr)


def fit_tree(X: np.ndarray, y: np.ndarray, params: ForestParams, rng: np.random.Generator,
             mtry: Optional[int] = None) -> RegressionTree:
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n, d = X.shape
    if n < 1:
        raise InputError("cannot fit a tree on zero rows")
    m = mtry if mtry is not None else params.resolve_mtry(d)

    feature, threshold, left, right, value = [], [], [], [], []

    def new_node():
        feature.append(_LEAF)
        threshold.append(0.0)
        left.append(0)
        right.append(0)
        value.append(0.0)
        return len(feature) - 1

    root = new_node()
    stack = [(root, np.arange(n), 0)]
    while stack:
        node, idx, depth = stack.pop()
        yn = y[idx]
        # rounding can push a mean one ulp outside its data range
        value[node] = float(np.clip(yn.mean(), yn.min(), yn.max()))
        if len(idx) < 2 * params.min_leaf or yn.max() == yn.min():
            continue
        if params.max_depth is not None and depth >= params.max_depth:
            continue
        feats = np.arange(d) if m == d else np.sort(rng.choice(d, size=m, replace=False))
        found = _best_split_columns(X[np.ix_(idx, feats)], yn, params.min_leaf)
        if found is None:
            continue
        gain, j, thr = found
        f = int(feats[j])
        # rounding noise on a zero-gain split
        if gain <= 1e-12 * float(((yn - yn.mean()) ** 2).sum()):
            continue
        go_left = X[idx, f] <= thr
        lnode, rnode = new_node(), new_node()
        feature[node], threshold[node] = f, thr
        left[node], right[node] = lnode, rnode
        # right pushed first so the left subtree is built (and draws) first
        stack.append((rnode, idx[~go_left], depth + 1))
        stack.append((lnode, idx[go_left], depth + 1))

    return RegressionTree(
        np.asarray(feature, dtype=np.intp),
        np.asarray(threshold, dtype=np.float64),
        np.asarray(left, dtype=np.intp),
        np.asarray(right, dtype=np.intp),
        np.asarray(value, dtype=np.float64),
    )


def tree_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, index])))


def _fit_one(args):
    X, y, params, index = args
    rng = tree_rng(params.seed, index)
    n = len(y)
    if params.bootstrap:
        sample = rng.integers(0, n, size=n)
        oob = np.ones(n, dtype=bool)
        oob[sample] = False
    else:
        sample = np.arange(n)
        oob = np.zeros(n, dtype=bool)
    tree = fit_tree(X[sample], y[sample], params, rng, params.resolve_mtry(X.shape[1]))
    return tree, oob


@dataclass
class ForestModel:
    trees: list[RegressionTree]
    params: ForestParams
    n_features: int
    train_y_range: tuple[float, float]
    extractor_tag: str = ""
    oob_mae: Optional[float] = None
    format_version: int = MODEL_FORMAT_VERSION
    metadata: dict = field(default_factory=dict)

    def tree_predictions(self, X) -> np.ndarray:
        X = self._check(X)
        return np.stack([t.predict(X) for t in self.trees])

    def predict(self, X) -> np.ndarray:
        """Mean of per-tree predictions, accumulated in tree-index order."""
        X = self._check(X)
        acc = np.zeros(X.shape[0])
        lo = np.full(X.shape[0], np.inf)
        hi = np.full(X.shape[0], -np.inf)
        for t in self.trees:
            p = t.predict(X)
            acc += p
            np.minimum(lo, p, out=lo)
            np.maximum(hi, p, out=hi)
        return np.clip(acc / len(self.trees), lo, hi)

    def _check(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X[None, :]
        if X.ndim != 2 or X.shape[1] != self.n_features:
            raise ShapeError(f"expected {self.n_features} features, got shape {X.shape}")
        return X


def fit_forest(X, y, params: ForestParams, extractor_tag: str = "", jobs: int = 1) -> ForestModel:
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim != 2 or y.ndim != 1 or X.shape[0] != y.shape[0]:
        raise ShapeError(f"X {X.shape} and y {y.shape} are not aligned")
    n, d = X.shape
    if n < 2 or d < 1:
        raise InputError(f"need n >= 2 and d >= 1, got n={n}, d={d}")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise InputError("NaN or Inf in training data")
    params.validate()
    params.resolve_mtry(d)

    tasks = [(X, y, params, i) for i in range(params.n_trees)]
    if jobs > 1 and params.n_trees > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            results = list(ex.map(_fit_one, tasks))
    else:
        results = [_fit_one(t) for t in tasks]
    trees = [t for t, _ in results]

    oob_mae = None
    if params.bootstrap:
        total = np.zeros(n)
        count = np.zeros(n)
        for tree, oob in results:
            if oob.any():
                total[oob] += tree.predict(X[oob])
                count[oob] += 1
        has = count > 0
        if has.any():
            oob_mae = float(np.mean(np.abs(total[has] / count[has] - y[has])))

    return ForestModel(trees, params, d, (float(y.min()), float(y.max())), extractor_tag, oob_mae)


def predict(model: ForestModel, x) -> float:
    """Predicted age for one feature vector."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ShapeError(f"expected one feature vector, got shape {x.shape}")
    return float(model.predict(x)[0])


def model_to_dict(model: ForestModel) -> dict:
    return {
        "format": MODEL_FORMAT,
        "format_version": model.format_version,
        "params": asdict(model.params),
        "n_features": model.n_features,
        "train_y_range": list(model.train_y_range),
        "extractor_tag": model.extractor_tag,
        "oob_mae": model.oob_mae,
        "metadata": model.metadata,
        "trees": [t.to_dict() for t in model.trees],
    }


def save_model(model: ForestModel, path) -> None:
    # json writes floats with repr(), which round-trips exactly
    Path(path).write_text(json.dumps(model_to_dict(model), separators=(",", ":")) + "\n")


def load_model(path) -> ForestModel:
    try:
        d = json.loads(Path(path).read_text())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: not a model file: {exc}") from exc
    if not isinstance(d, dict) or d.get("format") != MODEL_FORMAT:
        raise FormatError(f"{path}: not a {MODEL_FORMAT} file")
    if d.get("format_version") != MODEL_FORMAT_VERSION:
        raise FormatError(f"{path}: model format version {d.get('format_version')}, "
                          f"expected {MODEL_FORMAT_VERSION}")
    try:
        params = ForestParams(**d["params"])
        trees = [RegressionTree.from_dict(t) for t in d["trees"]]
        lo, hi = d["train_y_range"]
        model = ForestModel(trees, params, int(d["n_features"]), (float(lo), float(hi)),
                            d.get("extractor_tag", ""), d.get("oob_mae"), metadata=d.get("metadata", {}))
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: malformed model: {exc}") from exc
    if len(trees) != params.n_trees:
        raise FormatError(f"{path}: {len(trees)} trees but n_trees={params.n_trees}")
    return model
