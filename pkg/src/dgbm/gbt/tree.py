"""Newton regression trees grown best-first on gradient/hessian histograms."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from dgbm.errors import InvalidInputError, InvalidParameterError
from dgbm.gbt.binning import BinnedDataset, _as_matrix

LEAF = -1


@dataclass(frozen=True)
class TreeParams:
    """Tree-growth hyper-parameters.

    ``max_depth`` of 0 or -1 means unlimited depth; ``max_leaves`` is then the only
    size limit (loss-guided growth). ``lambda_`` is the L2 penalty on leaf
    weights and is spelled ``lambda`` in config and model files.
    """

    learning_rate: float = 0.1
    max_bin: int = 64
    max_leaves: int = 16
    max_depth: int = 0
    min_data_in_leaf: int = 1
    min_split_gain: float = 0.0
    lambda_: float = 1.0

    def __post_init__(self):
        problems = self.violations()
        if problems:
            raise InvalidParameterError("; ".join(problems))

    def violations(self) -> list[str]:
        return tree_param_violations(asdict(self))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lambda"] = d.pop("lambda_")
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TreeParams":
        d = dict(d)
        if "lambda" in d:
            d["lambda_"] = d.pop("lambda")
        return cls(**d)


def tree_param_violations(d: dict) -> list[str]:
    """List every bound violated by a mapping of tree parameters."""
    out = []
    lam = d.get("lambda_", d.get("lambda", 1.0))
    checks = [
        ("learning_rate", d.get("learning_rate", 0.1), lambda v: v > 0, "> 0"),
        ("max_bin", d.get("max_bin", 64), lambda v: _is_int(v) and v >= 2, "an integer >= 2"),
        ("max_leaves", d.get("max_leaves", 16), lambda v: _is_int(v) and v >= 2, "an integer >= 2"),
        ("max_depth", d.get("max_depth", 0), lambda v: _is_int(v) and v >= -1, "an integer >= -1"),
        ("min_data_in_leaf", d.get("min_data_in_leaf", 1), lambda v: _is_int(v) and v >= 1,
         "an integer >= 1"),
        ("min_split_gain", d.get("min_split_gain", 0.0), lambda v: v >= 0, ">= 0"),
        ("lambda", lam, lambda v: v >= 0, ">= 0"),
    ]
    for name, value, ok, rule in checks:
        try:
            good = bool(ok(value)) and np.isfinite(value)
        except TypeError:
            good = False
        if not good:
            out.append(f"{name} must be {rule}, got {value!r}")
    return out


def _is_int(v) -> bool:
    return isinstance(v, (int, np.integer)) and not isinstance(v, bool)


@dataclass(frozen=True)
class Tree:
    """Flat-array regression tree.

    Node ``i`` is a leaf when ``feature[i] == -1``. Internal nodes send a row
    left when its raw value is ``<= threshold[i]`` (equivalently its bin index
    is ``<= bin_threshold[i]``); NaN goes left iff ``missing_left[i]``.
    """

    feature: np.ndarray
    threshold: np.ndarray
    bin_threshold: np.ndarray
    missing_left: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    gain: np.ndarray

    @property
    def n_nodes(self) -> int:
        return self.feature.shape[0]

    @property
    def n_leaves(self) -> int:
        return int(np.sum(self.feature == LEAF))

    @classmethod
    def constant(cls, weight: float) -> "Tree":
        return cls(
            feature=np.array([LEAF]),
            threshold=np.array([0.0]),
            bin_threshold=np.array([0]),
            missing_left=np.array([False]),
            left=np.array([LEAF]),
            right=np.array([LEAF]),
            value=np.array([float(weight)]),
            gain=np.array([0.0]),
        )

    def apply(self, X) -> np.ndarray:
        """Index of the leaf each row of ``X`` lands in."""
        X = _as_matrix(X)
        node = np.zeros(X.shape[0], dtype=np.int64)
        active = np.flatnonzero(self.feature[node] != LEAF)
        while active.size:
            cur = node[active]
            vals = X[active, self.feature[cur]]
            go_left = np.where(np.isnan(vals), self.missing_left[cur], vals <= self.threshold[cur])
            node[active] = np.where(go_left, self.left[cur], self.right[cur])
            active = active[self.feature[node[active]] != LEAF]
        return node


def predict_tree(tree: Tree, X, n_features: int | None = None) -> np.ndarray:
    """Leaf weight for every row of ``X``."""
    X = _as_matrix(X)
    if n_features is not None and X.shape[1] != n_features:
        raise InvalidInputError(f"expected {n_features} features, got {X.shape[1]}")
    used = tree.feature[tree.feature != LEAF]
    if used.size and used.max() >= X.shape[1]:
        raise InvalidInputError(
            f"tree splits on feature {int(used.max())} but input has {X.shape[1]} columns"
        )
    return tree.value[tree.apply(X)]


@dataclass
class _Split:
    gain: float
    feature: int
    bin_threshold: int
    missing_left: bool


class _Histogram:
    __slots__ = ("g", "h", "c")

    def __init__(self, g, h, c):
        self.g, self.h, self.c = g, h, c

    def __sub__(self, other):
        return _Histogram(self.g - other.g, self.h - other.h, self.c - other.c)


class _Grower:
    """Mutable state for growing one tree; discarded afterwards."""

    def __init__(self, data: BinnedDataset, grad, hess, params: TreeParams):
        self.params = params
        self.grad = grad
        self.hess = hess
        self.bins = data.bins
        self.n_features = data.n_features
        self.stride = data.stride
        self.n_bins = data.mapper.n_bins
        self.boundaries = data.mapper.boundaries
        self.offsets = np.arange(self.n_features, dtype=np.int64) * self.stride
        # threshold t is admissible iff t <= n_bins[f] - 2
        t = np.arange(self.stride)
        self.valid = t[None, :] <= (self.n_bins[:, None] - 2)
        self.missing_col = self.n_bins

    def histogram(self, rows: np.ndarray) -> _Histogram:
        flat = (self.bins[rows] + self.offsets).ravel()
        size = self.n_features * self.stride
        shape = (self.n_features, self.stride)
        g = np.bincount(flat, weights=np.repeat(self.grad[rows], self.n_features), minlength=size)
        h = np.bincount(flat, weights=np.repeat(self.hess[rows], self.n_features), minlength=size)
        c = np.bincount(flat, minlength=size).astype(np.float64)
        return _Histogram(g.reshape(shape), h.reshape(shape), c.reshape(shape))

    def best_split(self, hist: _Histogram, G: float, H: float, n: int) -> _Split | None:
        p = self.params
        lam = p.lambda_
        rows = np.arange(self.n_features)
        gm = hist.g[rows, self.missing_col][:, None]
        hm = hist.h[rows, self.missing_col][:, None]
        cm = hist.c[rows, self.missing_col][:, None]
        gv, hv, cv = hist.g.copy(), hist.h.copy(), hist.c.copy()
        gv[rows, self.missing_col] = 0.0
        hv[rows, self.missing_col] = 0.0
        cv[rows, self.missing_col] = 0.0
        gl, hl, cl = np.cumsum(gv, axis=1), np.cumsum(hv, axis=1), np.cumsum(cv, axis=1)
        parent = G * G / (H + lam) if H + lam > 0 else 0.0
        gains = []
        # missing-right is evaluated first so it wins exact ties
        for extra_g, extra_h, extra_c in ((0.0, 0.0, 0.0), (gm, hm, cm)):
            GL, HL, CL = gl + extra_g, hl + extra_h, cl + extra_c
            GR, HR, CR = G - GL, H - HL, n - CL
            with np.errstate(divide="ignore", invalid="ignore"):
                gain = 0.5 * (GL * GL / (HL + lam) + GR * GR / (HR + lam) - parent)
            ok = (
                self.valid
                & (CL >= p.min_data_in_leaf)
                & (CR >= p.min_data_in_leaf)
                & (HL + lam > 0)
                & (HR + lam > 0)
                & np.isfinite(gain)
            )
            gains.append(np.where(ok, gain, -np.inf))
        stacked = np.stack(gains, axis=-1)  # (feature, threshold, missing side)
        best = int(np.argmax(stacked))
        f, t, side = np.unravel_index(best, stacked.shape)
        gain = float(stacked[f, t, side])
        if not gain > p.min_split_gain:
            return None
        return _Split(gain=gain, feature=int(f), bin_threshold=int(t), missing_left=bool(side))

    def leaf_weight(self, rows: np.ndarray) -> tuple[float, float, float]:
        G = float(np.sum(self.grad[rows]))
        H = float(np.sum(self.hess[rows]))
        denom = H + self.params.lambda_
        w = -G / denom if denom > 0 else 0.0
        return w, G, H


def _check_inputs(data: BinnedDataset, grad, hess):
    grad = np.asarray(grad, dtype=np.float64)
    hess = np.asarray(hess, dtype=np.float64)
    if grad.shape != (data.n_rows,) or hess.shape != (data.n_rows,):
        raise InvalidInputError(
            f"grad/hess must have length {data.n_rows}, got {grad.shape} and {hess.shape}"
        )
    if not (np.all(np.isfinite(grad)) and np.all(np.isfinite(hess))):
        raise InvalidInputError("grad/hess contain non-finite values")
    if np.any(hess < 0):
        raise InvalidInputError("hessians must be non-negative")
    return grad, hess


def grow_tree_with_leaves(data: BinnedDataset, grad, hess, params: TreeParams):
    """Grow a tree and also return the leaf index reached by each training row."""
    grad, hess = _check_inputs(data, grad, hess)
    grower = _Grower(data, grad, hess, params)
    p = params

    feature, bin_thr, threshold, miss_left = [LEAF], [0], [0.0], [False]
    left, right, value, gain = [LEAF], [LEAF], [0.0], [0.0]
    depth = [0]

    all_rows = np.arange(data.n_rows)
    row_leaf = np.zeros(data.n_rows, dtype=np.int64)
    node_rows = {0: all_rows}
    w, G, H = grower.leaf_weight(all_rows)
    value[0] = w
    node_stats = {0: (G, H)}
    hists = {0: grower.histogram(all_rows)}

    candidates: dict[int, _Split] = {}

    def consider(node: int):
        if p.max_depth > 0 and depth[node] >= p.max_depth:
            return
        rows = node_rows[node]
        if rows.size < 2 * p.min_data_in_leaf:
            return
        G, H = node_stats[node]
        split = grower.best_split(hists[node], G, H, rows.size)
        if split is not None:
            candidates[node] = split

    consider(0)
    n_leaves = 1
    while candidates and n_leaves < p.max_leaves:
        # highest gain first; lowest node id on ties
        node = max(candidates, key=lambda k: (candidates[k].gain, -k))
        split = candidates.pop(node)
        rows = node_rows.pop(node)
        f, t = split.feature, split.bin_threshold
        b = data.bins[rows, f]
        go_left = np.where(b == grower.missing_col[f], split.missing_left, b <= t)
        lrows, rrows = rows[go_left], rows[~go_left]

        # build the smaller child, derive the sibling by subtraction
        parent_hist = hists.pop(node)
        if lrows.size <= rrows.size:
            h_small = grower.histogram(lrows)
            h_lr = (h_small, parent_hist - h_small)
        else:
            h_small = grower.histogram(rrows)
            h_lr = (parent_hist - h_small, h_small)

        feature[node], bin_thr[node], miss_left[node] = f, t, split.missing_left
        threshold[node] = float(grower.boundaries[f][t])
        gain[node] = split.gain
        for child_rows, child_hist, side in ((lrows, h_lr[0], left), (rrows, h_lr[1], right)):
            cid = len(feature)
            feature.append(LEAF)
            bin_thr.append(0)
            threshold.append(0.0)
            miss_left.append(False)
            left.append(LEAF)
            right.append(LEAF)
            gain.append(0.0)
            w, Gc, Hc = grower.leaf_weight(child_rows)
            value.append(w)
            depth.append(depth[node] + 1)
            side[node] = cid
            node_rows[cid] = child_rows
            node_stats[cid] = (Gc, Hc)
            hists[cid] = child_hist
            row_leaf[child_rows] = cid
        value[node] = 0.0
        n_leaves += 1
        consider(left[node])
        consider(right[node])

    tree = Tree(
        feature=np.array(feature, dtype=np.int64),
        threshold=np.array(threshold, dtype=np.float64),
        bin_threshold=np.array(bin_thr, dtype=np.int64),
        missing_left=np.array(miss_left, dtype=bool),
        left=np.array(left, dtype=np.int64),
        right=np.array(right, dtype=np.int64),
        value=np.array(value, dtype=np.float64),
        gain=np.array(gain, dtype=np.float64),
    )
    return tree, row_leaf


def grow_tree(data: BinnedDataset, grad, hess, params: TreeParams) -> Tree:
    """Grow one Newton regression tree on per-row gradients and hessians.

    Leaves carry ``-sum(g) / (sum(h) + lambda)``. Splits are expanded
    best-first by the second-order gain until ``max_leaves`` (or
    ``max_depth``) is reached or no split beats ``min_split_gain``. Equal gains
    resolve to the lowest feature index, then the lowest bin threshold, then
    missing values routed right.
    """
    return grow_tree_with_leaves(data, grad, hess, params)[0]
