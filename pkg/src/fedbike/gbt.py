"""Second-order gradient-boosted regression trees (squared error, exact greedy).

Leaf weights are stored unscaled; the shrinkage ``eta`` is applied only when
predicting, so ``predict == base_score + eta * tree_outputs(X).sum(axis=1)``.
Trees are grown depth-wise with an exact split search: every feature is sorted
once per fit, and each level scans that order once, keeping running gradient
sums per frontier node.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np
from numba import njit

SCHEMA_VERSION = 1


class ModelFormatError(ValueError):
    pass


@dataclass(frozen=True)
class BoostParams:
    max_depth: int = 6
    reg_lambda: float = 1.0
    gamma: float = 0.0
    min_child_weight: float = 1.0
    n_trees: int = 37
    eta: float = 0.1

    def __post_init__(self):
        if self.max_depth < 1:
            raise ValueError("max_depth must be >= 1")
        if self.reg_lambda < 0 or self.gamma < 0 or self.min_child_weight < 0:
            raise ValueError("lambda, gamma and min_child_weight must be >= 0")
        if self.n_trees < 0:
            raise ValueError("n_trees must be >= 0")

    def to_dict(self) -> dict:
        return {
            "max_depth": self.max_depth,
            "lambda": self.reg_lambda,
            "gamma": self.gamma,
            "min_child_weight": self.min_child_weight,
            "n_trees": self.n_trees,
        }


class Split(NamedTuple):
    feature_index: int
    threshold: float
    gain: float


@dataclass
class Tree:
    """Flat array tree.  ``feature[i] == -1`` marks a leaf; node 0 is the root."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    weight: np.ndarray

    @classmethod
    def leaf(cls, w: float = 0.0) -> Tree:
        return cls(
            np.array([-1]), np.array([np.nan]), np.array([-1]), np.array([-1]), np.array([float(w)])
        )

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    @property
    def depth(self) -> int:
        d = np.zeros(self.n_nodes, int)
        for i in range(self.n_nodes):
            if self.feature[i] >= 0:
                d[self.left[i]] = d[self.right[i]] = d[i] + 1
        return int(d.max())

    def apply(self, X: np.ndarray) -> np.ndarray:
        node = np.zeros(len(X), dtype=np.int64)
        rows = np.arange(len(X))
        for _ in range(self.depth):
            f = self.feature[node]
            internal = f >= 0
            x = X[rows, np.maximum(f, 0)]
            nxt = np.where(x < self.threshold[node], self.left[node], self.right[node])
            node = np.where(internal, nxt, node)
        return node

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.weight[self.apply(X)]

    def to_dict(self, i: int = 0) -> dict:
        if self.feature[i] < 0:
            return {"w": float(self.weight[i])}
        return {
            "f": int(self.feature[i]),
            "t": float(self.threshold[i]),
            "l": self.to_dict(int(self.left[i])),
            "r": self.to_dict(int(self.right[i])),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> Tree:
        feature, threshold, left, right, weight = [], [], [], [], []

        def visit(node: dict) -> int:
            i = len(feature)
            feature.append(-1)
            threshold.append(math.nan)
            left.append(-1)
            right.append(-1)
            weight.append(0.0)
            if "w" in node:
                weight[i] = _finite(node["w"])
                return i
            try:
                feature[i] = int(node["f"])
                threshold[i] = _finite(node["t"])
                left[i] = visit(node["l"])
                right[i] = visit(node["r"])
            except KeyError as exc:
                raise ModelFormatError(f"tree node lacks field {exc}") from None
            return i

        visit(doc)
        return cls(
            np.array(feature), np.array(threshold), np.array(left), np.array(right), np.array(weight)
        )

    def structure_equal(self, other: Tree, atol: float = 0.0) -> bool:
        if self.n_nodes != other.n_nodes:
            return False
        if not np.array_equal(self.feature, other.feature):
            return False
        if not (np.array_equal(self.left, other.left) and np.array_equal(self.right, other.right)):
            return False
        internal = self.feature >= 0
        if not np.allclose(self.threshold[internal], other.threshold[internal], rtol=0, atol=atol):
            return False
        leaves = ~internal
        return bool(np.allclose(self.weight[leaves], other.weight[leaves], rtol=0, atol=atol))


def _finite(v) -> float:
    v = float(v)
    if not math.isfinite(v):
        raise ModelFormatError("non-finite number in model document")
    return v


@dataclass
class Ensemble:
    base_score: float
    trees: list[Tree]
    eta: float
    params: BoostParams
    feature_names: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.trees)

    def _check(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.ndim != 2:
            raise ValueError("X must be 2-d")
        n_feat = len(self.feature_names) if self.feature_names else None
        if n_feat is not None and X.shape[1] != n_feat:
            raise ValueError(f"X has {X.shape[1]} columns, model expects {n_feat}")
        return X

    def tree_outputs(self, X) -> np.ndarray:
        X = self._check(X)
        out = np.zeros((len(X), len(self.trees)))
        for m, tree in enumerate(self.trees):
            out[:, m] = tree.predict(X)
        return out

    def predict(self, X) -> np.ndarray:
        T = self.tree_outputs(X)
        return self.base_score + self.eta * T.sum(axis=1)

    def padded(self, n_trees: int) -> Ensemble:
        """Copy with zero-leaf trees appended up to ``n_trees``."""
        if len(self.trees) > n_trees:
            raise ValueError(f"ensemble already has {len(self.trees)} > {n_trees} trees")
        extra = [Tree.leaf(0.0) for _ in range(n_trees - len(self.trees))]
        return Ensemble(self.base_score, list(self.trees) + extra, self.eta, self.params, list(self.feature_names))


def leaf_weight(G_sum: float, H_sum: float, reg_lambda: float) -> float:
    return -G_sum / (H_sum + reg_lambda)


# Candidates whose gain differs from the incumbent by less than this relative
# amount count as ties, so tie-breaking does not depend on summation order.
_TIE_RTOL = 1e-12


@njit(cache=True, nogil=True, error_model="numpy")
def _scan_feature(order, xs, rec, G_slot, H_slot, lam, gamma, mcw, out_gain, out_thr):
    """Exact split scan of one feature for every slot (tree node of the level).

    ``order``/``xs`` are the feature's global ascending sort (row ids, values);
    ``rec[r] = (slot, g, h)`` with slot < 0 for rows outside the frontier.  Each
    slot accumulates its left-hand sums in value order, so candidates are seen
    by increasing threshold and the smallest threshold wins ties.
    """
    n_slots = len(G_slot)
    GL = np.zeros(n_slots)
    HL = np.zeros(n_slots)
    last = np.empty(n_slots)
    seen = np.zeros(n_slots, dtype=np.bool_)
    out_gain[:] = -np.inf
    out_thr[:] = np.nan
    for j in range(len(order)):
        r = order[j]
        s = int(rec[r, 0])
        if s < 0:
            continue
        x = xs[j]
        if seen[s] and x != last[s]:
            gl = GL[s]
            hl = HL[s]
            GT = G_slot[s]
            HT = H_slot[s]
            hr = HT - hl
            if hl >= mcw and hr >= mcw:
                gr = GT - gl
                gain = 0.5 * (gl * gl / (hl + lam) + gr * gr / (hr + lam) - GT * GT / (HT + lam)) - gamma
                best = out_gain[s]
                if best == -np.inf or gain > best + _TIE_RTOL * abs(best):
                    out_gain[s] = gain
                    lo = last[s]
                    thr = lo + (x - lo) / 2.0
                    if not thr > lo:
                        thr = x
                    out_thr[s] = thr
        GL[s] += rec[r, 1]
        HL[s] += rec[r, 2]
        last[s] = x
        seen[s] = True


def _split_search(sorted_cols, rec, G_slot, H_slot, SS_slot, params, pool=None):
    """Best (feature, threshold, gain) per slot over all features."""
    n_slots = len(G_slot)
    lam, gamma, mcw = float(params.reg_lambda), float(params.gamma), float(params.min_child_weight)

    def scan(f):
        order, xs = sorted_cols[f]
        gain = np.empty(n_slots)
        thr = np.empty(n_slots)
        _scan_feature(order, xs, rec, G_slot, H_slot, lam, gamma, mcw, gain, thr)
        return gain, thr

    feats = range(len(sorted_cols))
    results = list(pool.map(scan, feats)) if pool is not None else [scan(f) for f in feats]
    best_gain = np.full(n_slots, -np.inf)
    best_feat = np.full(n_slots, -1, dtype=np.int64)
    best_thr = np.full(n_slots, np.nan)
    for f, (gain, thr) in enumerate(results):
        margin = np.where(np.isfinite(best_gain), _TIE_RTOL * np.abs(best_gain), 0.0)
        better = np.isfinite(gain) & (gain > best_gain + margin)
        best_gain[better] = gain[better]
        best_feat[better] = f
        best_thr[better] = thr[better]
    # guards against splitting on rounding noise when lambda = 0
    ok = best_gain > _TIE_RTOL * SS_slot
    best_feat[~ok] = -1
    return best_feat, best_thr, best_gain


def _sorted_columns(X: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    out = []
    for f in range(X.shape[1]):
        order = np.argsort(X[:, f], kind="stable")
        out.append((order, np.ascontiguousarray(X[order, f])))
    return out


class _Grower:
    def __init__(self, X: np.ndarray, params: BoostParams, n_jobs: int = 1):
        self.X = X
        self.params = params
        self.n_jobs = max(1, int(n_jobs))
        self.sorted_cols = _sorted_columns(X)

    def grow(self, g: np.ndarray, h: np.ndarray) -> tuple[Tree, np.ndarray]:
        if self.n_jobs > 1:
            with ThreadPoolExecutor(self.n_jobs) as pool:
                return self._grow(g, h, pool)
        return self._grow(g, h, None)

    def _grow(self, g, h, pool):
        """Grow one tree; returns it with each training row's leaf id."""
        p = self.params
        n = len(g)
        feature, threshold, left, right = [-1], [math.nan], [-1], [-1]
        G_node, H_node, SS_node = [float(g.sum())], [float(h.sum())], [float(g @ g)]
        node_of_row = np.zeros(n, dtype=np.int64)
        rec = np.empty((n, 3))
        rec[:, 0] = 0.0
        rec[:, 1] = g
        rec[:, 2] = h
        frontier = [0]

        for _depth in range(p.max_depth):
            if not frontier or not self.sorted_cols:
                break
            G_slot = np.array([G_node[i] for i in frontier])
            H_slot = np.array([H_node[i] for i in frontier])
            SS_slot = np.array([SS_node[i] for i in frontier])
            best_feat, best_thr, _ = _split_search(self.sorted_cols, rec, G_slot, H_slot, SS_slot, p, pool)
            if (best_feat < 0).all():
                break

            child_left = np.full(len(frontier), -1)
            child_right = np.full(len(frontier), -1)
            new_frontier = []
            for s, node in enumerate(frontier):
                if best_feat[s] < 0:
                    continue
                feature[node] = int(best_feat[s])
                threshold[node] = float(best_thr[s])
                for side in (left, right):
                    side[node] = len(feature)
                    feature.append(-1)
                    threshold.append(math.nan)
                    left.append(-1)
                    right.append(-1)
                    G_node.append(0.0)
                    H_node.append(0.0)
                    SS_node.append(0.0)
                child_left[s], child_right[s] = len(new_frontier), len(new_frontier) + 1
                new_frontier += [left[node], right[node]]

            slot = rec[:, 0].astype(np.int64)
            rows = np.flatnonzero(slot >= 0)
            s_rows = slot[rows]
            keep = best_feat[s_rows] >= 0
            rows, s_rows = rows[keep], s_rows[keep]
            go_left = self.X[rows, best_feat[s_rows]] < best_thr[s_rows]
            new_slot = np.full(n, -1, dtype=np.int64)
            new_slot[rows] = np.where(go_left, child_left[s_rows], child_right[s_rows])
            node_of_row[rows] = np.asarray(new_frontier)[new_slot[rows]]

            k = len(new_frontier)
            sums_g = np.bincount(new_slot[rows], weights=g[rows], minlength=k)
            sums_h = np.bincount(new_slot[rows], weights=h[rows], minlength=k)
            sums_ss = np.bincount(new_slot[rows], weights=g[rows] ** 2, minlength=k)
            for j, node in enumerate(new_frontier):
                G_node[node], H_node[node], SS_node[node] = sums_g[j], sums_h[j], sums_ss[j]
            rec[:, 0] = new_slot
            frontier = new_frontier

        weight = np.array(
            [
                leaf_weight(G_node[i], H_node[i], p.reg_lambda) if feature[i] < 0 else 0.0
                for i in range(len(feature))
            ]
        )
        tree = Tree(np.array(feature), np.array(threshold), np.array(left), np.array(right), weight)
        return tree, node_of_row


def best_split(indices, G, H, X, params: BoostParams) -> Split | None:
    """Best regularised-gain split over the rows ``indices``, or ``None``."""
    indices = np.asarray(indices)
    if len(indices) < 2:
        return None
    Xs = np.asarray(X, dtype=float)[indices]
    g = np.asarray(G, dtype=float)[indices]
    h = np.asarray(H, dtype=float)[indices]
    rec = np.column_stack([np.zeros(len(g)), g, h])
    feat, thr, gain = _split_search(
        _sorted_columns(Xs), rec, np.array([g.sum()]), np.array([h.sum()]), np.array([g @ g]), params
    )
    if feat[0] < 0:
        return None
    return Split(int(feat[0]), float(thr[0]), float(gain[0]))


def _check_finite(X: np.ndarray, y: np.ndarray) -> None:
    if X.ndim != 2 or y.ndim != 1 or len(X) != len(y):
        raise ValueError(f"shape mismatch: X {X.shape}, y {y.shape}")
    if len(y) == 0:
        raise ValueError("cannot fit on zero rows")
    if not (np.isfinite(X).all() and np.isfinite(y).all()):
        raise ValueError("X and y must be finite")


def fit_ensemble(
    X,
    y,
    params: BoostParams = BoostParams(),
    feature_names: Sequence[str] | None = None,
    eval_set: tuple | None = None,
    patience: int | None = None,
    n_jobs: int = 1,
) -> Ensemble:
    """Boost ``params.n_trees`` trees on squared error.

    With ``eval_set=(X_val, y_val)`` and ``patience``, training stops once the
    validation RMSE has not improved for ``patience`` consecutive trees and the
    ensemble is truncated to its best tree count.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    _check_finite(X, y)
    names = list(feature_names) if feature_names is not None else [f"f{i}" for i in range(X.shape[1])]
    if len(names) != X.shape[1]:
        raise ValueError("feature_names length does not match X")

    base = float(y[0]) if (y == y[0]).all() else float(np.mean(y))
    pred = np.full(len(y), base)
    hess = np.ones(len(y))
    trees: list[Tree] = []
    grower = _Grower(X, params, n_jobs=n_jobs)

    watch = eval_set is not None and patience is not None
    if watch:
        Xv = np.asarray(eval_set[0], dtype=float)
        yv = np.asarray(eval_set[1], dtype=float)
        _check_finite(Xv, yv)
        pred_v = np.full(len(yv), base)
        best_rmse, best_count, stale = math.inf, 0, 0

    for _ in range(params.n_trees):
        tree, leaf_of_row = grower.grow(pred - y, hess)
        trees.append(tree)
        pred = pred + params.eta * tree.weight[leaf_of_row]
        if watch:
            pred_v = pred_v + params.eta * tree.predict(Xv)
            rmse = float(np.sqrt(np.mean((pred_v - yv) ** 2)))
            if rmse < best_rmse:
                best_rmse, best_count, stale = rmse, len(trees), 0
            else:
                stale += 1
                if stale >= patience:
                    break
    if watch:
        trees = trees[:best_count]
    return Ensemble(base, trees, params.eta, params, names)


def predict(ensemble: Ensemble, X) -> np.ndarray:
    return ensemble.predict(X)


def tree_outputs(ensemble: Ensemble, X) -> np.ndarray:
    return ensemble.tree_outputs(X)


# -- serialisation -------------------------------------------------------------


def to_document(ensemble: Ensemble) -> dict:
    return {
        "version": SCHEMA_VERSION,
        "base_score": float(ensemble.base_score),
        "eta": float(ensemble.eta),
        "params": ensemble.params.to_dict(),
        "feature_names": list(ensemble.feature_names),
        "trees": [t.to_dict() for t in ensemble.trees],
    }


def serialize(ensemble: Ensemble) -> str:
    # float repr is the shortest string that round-trips exactly
    return json.dumps(to_document(ensemble), allow_nan=False, separators=(",", ":"))


def _reject_constant(name):
    raise ModelFormatError(f"non-finite constant {name} in model document")


def from_document(doc: dict) -> Ensemble:
    if "version" not in doc:
        raise ModelFormatError("model document has no version field")
    if doc["version"] != SCHEMA_VERSION:
        raise ModelFormatError(f"unsupported model version {doc['version']!r}")
    try:
        p = doc["params"]
        params = BoostParams(
            max_depth=int(p["max_depth"]),
            reg_lambda=float(p["lambda"]),
            gamma=float(p["gamma"]),
            min_child_weight=float(p["min_child_weight"]),
            n_trees=int(p["n_trees"]),
            eta=_finite(doc["eta"]),
        )
        return Ensemble(
            _finite(doc["base_score"]),
            [Tree.from_dict(t) for t in doc["trees"]],
            _finite(doc["eta"]),
            params,
            [str(n) for n in doc["feature_names"]],
        )
    except KeyError as exc:
        raise ModelFormatError(f"model document lacks field {exc}") from None


def deserialize(text: str) -> Ensemble:
    return from_document(json.loads(text, parse_constant=_reject_constant))
