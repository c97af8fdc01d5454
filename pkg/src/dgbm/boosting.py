"""Multi-parameter Newton boosting: one tree per distributional parameter per round."""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from dgbm.errors import InvalidInputError, InvalidParameterError, ModelFormatError, NumericalError
from dgbm.gbt import BinMapper, BinnedDataset, Tree, TreeParams, build_bins, grow_tree_with_leaves
from dgbm.gbt.binning import _as_matrix
from dgbm.heads import HEADS, DistributionHead, head_from_descriptor

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
MODEL_FORMAT = "dgbm-model"


@dataclass(frozen=True)
class FitConfig:
    """Boosting-loop settings.

    ``early_stopping_fraction`` holds out that share of rows (chosen with
    ``seed``) and stops once validation NLL has not improved for
    ``patience`` rounds; the model is truncated to the best round. It is off
    by default. ``n_jobs`` only affects wall time: the K trees of a round are
    independent, and results are identical for any value.
    """

    boosting_rounds: int = 1000
    hessian_floor: float = 1e-6
    early_stopping_fraction: float | None = None
    patience: int = 20
    seed: int = 0
    n_jobs: int = 1

    def __post_init__(self):
        problems = []
        if not isinstance(self.boosting_rounds, (int, np.integer)) or self.boosting_rounds < 0:
            problems.append(f"boosting_rounds must be an integer >= 0, got {self.boosting_rounds!r}")
        if not self.hessian_floor > 0:
            problems.append(f"hessian_floor must be > 0, got {self.hessian_floor!r}")
        f = self.early_stopping_fraction
        if f is not None and not 0 < f < 1:
            problems.append(f"early_stopping_fraction must lie in (0, 1), got {f!r}")
        if self.patience < 1:
            problems.append(f"patience must be >= 1, got {self.patience!r}")
        if self.n_jobs < 1:
            problems.append(f"n_jobs must be >= 1, got {self.n_jobs!r}")
        if problems:
            raise InvalidParameterError("; ".join(problems))


@dataclass
class DistributionalModel:
    """Offsets plus a rounds-by-parameters grid of trees.

    Attributes:
        head: The distribution head.
        offsets: Raw-scale starting values, one per parameter.
        trees: ``trees[r][k]`` is the round-``r`` tree of parameter ``k``.
        tree_params: Growth settings; ``learning_rate`` scales every tree.
        mapper: Bin boundaries learned on the training features.
        n_features: Number of feature columns expected at prediction time.
        history: Per-round training diagnostics (not needed for prediction).
        metadata: Free-form JSON-able extras, e.g. a response transform.
    """

    head: DistributionHead
    offsets: np.ndarray
    trees: list[list[Tree]]
    tree_params: TreeParams
    mapper: BinMapper
    n_features: int
    history: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        k = self.head.n_params
        if self.offsets.shape != (k,) or not np.all(np.isfinite(self.offsets)):
            raise InvalidInputError(f"offsets must be {k} finite values")
        if any(len(r) != k for r in self.trees):
            raise InvalidInputError(f"every boosting round must hold exactly {k} trees")

    @property
    def n_rounds(self) -> int:
        return len(self.trees)

    def predict_raw(self, X) -> np.ndarray:
        return predict_raw(self, X)

    def feature_importance(self) -> np.ndarray:
        """Total split gain per (feature, parameter), shape ``(n_features, K)``."""
        out = np.zeros((self.n_features, self.head.n_params))
        for round_trees in self.trees:
            for k, tree in enumerate(round_trees):
                internal = tree.feature >= 0
                np.add.at(out[:, k], tree.feature[internal], tree.gain[internal])
        return out


def compute_offsets(head: DistributionHead, y) -> np.ndarray:
    """Unconditional maximum-likelihood raw parameters used as the starting point."""
    y = np.asarray(y, dtype=np.float64)
    if y.ndim != 1 or y.size == 0 or not np.all(np.isfinite(y)):
        raise InvalidInputError("response must be a non-empty, finite 1-D array")
    offsets = np.asarray(head.unconditional_fit(y), dtype=np.float64)
    if offsets.shape != (head.n_params,):
        raise NumericalError(f"{head.name} returned {offsets.shape} offsets, expected {head.n_params}")
    return offsets


def _grow_all(data, grad, hess, params, order, n_jobs):
    def one(k):
        return grow_tree_with_leaves(data, grad[:, k], hess[:, k], params)

    if n_jobs > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            results = list(pool.map(one, order))
    else:
        results = [one(k) for k in order]
    return dict(zip(order, results))


def fit(X, y, head: DistributionHead, tree_params: TreeParams | None = None,
        fit_config: FitConfig | None = None, *, param_order=None) -> DistributionalModel:
    """Fit a distributional boosting model.

    Every round uses one snapshot of the raw scores: the head returns all
    K gradient/hessian columns at once, hessians are floored at
    ``fit_config.hessian_floor``, one tree is grown per column, and all K
    updates are applied together. ``param_order`` only changes the order in
    which the K trees are built; it exists to check that this order is
    irrelevant.
    """
    tree_params = tree_params or TreeParams()
    fit_config = fit_config or FitConfig()
    X = _as_matrix(X)
    y = np.asarray(y, dtype=np.float64)
    if X.shape[0] != y.shape[0]:
        raise InvalidInputError(f"{X.shape[0]} feature rows but {y.shape[0]} responses")
    if X.shape[0] < 2:
        raise InvalidInputError("need at least two rows to fit")
    if not np.all(np.isfinite(y)):
        raise InvalidInputError("response contains non-finite values")
    if np.any(np.isinf(X)):
        raise InvalidInputError("features must be finite or NaN (missing)")

    K = head.n_params
    order = list(range(K)) if param_order is None else [int(k) for k in param_order]
    if sorted(order) != list(range(K)):
        raise InvalidParameterError(f"param_order must be a permutation of 0..{K - 1}")

    train_idx = np.arange(X.shape[0])
    valid_idx = None
    if fit_config.early_stopping_fraction is not None:
        rng = np.random.default_rng(fit_config.seed)
        perm = rng.permutation(X.shape[0])
        n_valid = max(1, int(round(fit_config.early_stopping_fraction * X.shape[0])))
        valid_idx, train_idx = np.sort(perm[:n_valid]), np.sort(perm[n_valid:])

    Xt, yt = X[train_idx], y[train_idx]
    mapper = build_bins(Xt, tree_params.max_bin)
    data = BinnedDataset(bins=mapper.transform(Xt), features=Xt, y=yt, mapper=mapper)
    offsets = compute_offsets(head, yt)
    eta = np.tile(offsets, (Xt.shape[0], 1))
    lr = tree_params.learning_rate

    history = {"train_nll": [float(np.mean(head.nll(yt, eta)))]}
    eta_valid = None
    if valid_idx is not None:
        eta_valid = np.tile(offsets, (valid_idx.size, 1))
        history["valid_nll"] = [float(np.mean(head.nll(y[valid_idx], eta_valid)))]
    logger.info("round 0: train NLL %.6f", history["train_nll"][0])

    trees: list[list[Tree]] = []
    best_round, best_valid, stale = 0, np.inf, 0
    if valid_idx is not None:
        best_valid = history["valid_nll"][0]

    for r in range(1, fit_config.boosting_rounds + 1):
        grad, hess = head.grad_hess(yt, eta)
        for name, arr in (("gradient", grad), ("hessian", hess)):
            bad = ~np.isfinite(arr)
            if np.any(bad):
                k = int(np.argwhere(bad)[0][1])
                raise NumericalError(f"round {r}: non-finite {name} for parameter index {k}")
        hess = np.maximum(hess, fit_config.hessian_floor)

        grown = _grow_all(data, grad, hess, tree_params, order, fit_config.n_jobs)
        round_trees = []
        for k in range(K):
            tree, leaves = grown[k]
            eta[:, k] += lr * tree.value[leaves]
            round_trees.append(tree)
        trees.append(round_trees)

        train_nll = float(np.mean(head.nll(yt, eta)))
        if not np.isfinite(train_nll):
            raise NumericalError(f"round {r}: training NLL became non-finite")
        history["train_nll"].append(train_nll)
        diag = head.diagnostics(yt, eta)
        if diag:
            history.setdefault("diagnostics", []).append(diag)
        logger.info("round %d: train NLL %.6f %s", r, train_nll, diag or "")

        if valid_idx is not None:
            Xv = X[valid_idx]
            for k in range(K):
                eta_valid[:, k] += lr * round_trees[k].value[round_trees[k].apply(Xv)]
            v = float(np.mean(head.nll(y[valid_idx], eta_valid)))
            history["valid_nll"].append(v)
            if v < best_valid:
                best_round, best_valid, stale = r, v, 0
            else:
                stale += 1
                if stale >= fit_config.patience:
                    logger.info("early stop at round %d; best round %d", r, best_round)
                    break

    if valid_idx is not None:
        trees = trees[:best_round]
        history["best_round"] = best_round

    return DistributionalModel(
        head=head,
        offsets=offsets,
        trees=trees,
        tree_params=tree_params,
        mapper=mapper,
        n_features=X.shape[1],
        history=history,
    )


def predict_raw(model: DistributionalModel, X) -> np.ndarray:
    """Raw scores ``offset_k + learning_rate * sum_r tree_rk(x)``, shape ``(n, K)``."""
    X = _as_matrix(X)
    if X.shape[1] != model.n_features:
        raise InvalidInputError(f"model expects {model.n_features} features, got {X.shape[1]}")
    eta = np.tile(model.offsets, (X.shape[0], 1))
    lr = model.tree_params.learning_rate
    for round_trees in model.trees:
        for k, tree in enumerate(round_trees):
            eta[:, k] += lr * tree.value[tree.apply(X)]
    return eta


# -- serialization ---------------------------------------------------------

_TREE_FIELDS = ("feature", "threshold", "bin_threshold", "missing_left", "left", "right", "value", "gain")


def _tree_to_dict(tree: Tree) -> dict:
    return {name: getattr(tree, name).tolist() for name in _TREE_FIELDS}


def model_to_dict(model: DistributionalModel) -> dict:
    return {
        "format": MODEL_FORMAT,
        "schema_version": SCHEMA_VERSION,
        "head": model.head.descriptor(),
        "n_features": model.n_features,
        "offsets": model.offsets.tolist(),
        "tree_params": model.tree_params.to_dict(),
        "bin_boundaries": [b.tolist() for b in model.mapper.boundaries],
        "trees": [[_tree_to_dict(t) for t in round_trees] for round_trees in model.trees],
        "metadata": model.metadata,
    }


def save_model(model: DistributionalModel, path) -> None:
    """Write the model as JSON; floats use shortest round-trip repr."""
    text = json.dumps(model_to_dict(model), separators=(",", ":"), allow_nan=False)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)


def _require(d, key, where, kind=None):
    if not isinstance(d, dict) or key not in d:
        raise ModelFormatError(f"missing field '{key}' at {where}")
    value = d[key]
    if kind is not None and not isinstance(value, kind):
        raise ModelFormatError(f"field '{where}.{key}' has the wrong type")
    return value


def _tree_from_dict(d: dict, where: str) -> Tree:
    arrays = {}
    dtypes = {"feature": np.int64, "bin_threshold": np.int64, "left": np.int64, "right": np.int64,
              "missing_left": bool}
    for name in _TREE_FIELDS:
        raw = _require(d, name, where, list)
        try:
            arrays[name] = np.asarray(raw, dtype=dtypes.get(name, np.float64))
        except (TypeError, ValueError) as exc:
            raise ModelFormatError(f"bad values in {where}.{name}: {exc}") from None
    n = arrays["feature"].shape[0]
    if n == 0 or any(a.shape != (n,) for a in arrays.values()):
        raise ModelFormatError(f"node arrays of {where} have inconsistent lengths")
    internal = arrays["feature"] >= 0
    for side in ("left", "right"):
        child = arrays[side][internal]
        if np.any((child <= 0) | (child >= n)):
            raise ModelFormatError(f"{where}.{side} points outside the node array")
    if not np.all(np.isfinite(arrays["value"])):
        raise ModelFormatError(f"{where} has non-finite leaf weights")
    return Tree(**arrays)


def model_from_dict(doc: dict) -> DistributionalModel:
    if not isinstance(doc, dict) or doc.get("format") != MODEL_FORMAT:
        raise ModelFormatError("not a dgbm model document")
    version = doc.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ModelFormatError(f"unsupported schema_version {version!r}; expected {SCHEMA_VERSION}")
    desc = _require(doc, "head", "$", dict)
    if desc.get("name") not in HEADS:
        raise ModelFormatError(
            f"unknown head {desc.get('name')!r}; supported heads: {', '.join(sorted(HEADS))}"
        )
    try:
        head = head_from_descriptor(desc)
        tree_params = TreeParams.from_dict(_require(doc, "tree_params", "$", dict))
    except (InvalidParameterError, TypeError) as exc:
        raise ModelFormatError(str(exc)) from None
    boundaries = tuple(np.asarray(b, dtype=np.float64) for b in _require(doc, "bin_boundaries", "$", list))
    mapper = BinMapper(boundaries=boundaries, max_bin=tree_params.max_bin)
    trees = []
    for r, round_trees in enumerate(_require(doc, "trees", "$", list)):
        if not isinstance(round_trees, list):
            raise ModelFormatError(f"trees[{r}] must be a list")
        trees.append([_tree_from_dict(t, f"trees[{r}][{k}]") for k, t in enumerate(round_trees)])
    try:
        return DistributionalModel(
            head=head,
            offsets=np.asarray(_require(doc, "offsets", "$", list), dtype=np.float64),
            trees=trees,
            tree_params=tree_params,
            mapper=mapper,
            n_features=int(_require(doc, "n_features", "$", int)),
            metadata=doc.get("metadata") or {},
        )
    except InvalidInputError as exc:
        raise ModelFormatError(str(exc)) from None


def load_model(path) -> DistributionalModel:
    """Read a model written by :func:`save_model`.

    Raises:
        ModelFormatError: on malformed JSON (with line/column), a schema
            version mismatch, an unknown head or inconsistent tree arrays.
    """
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ModelFormatError(
            f"malformed model file {path}: {exc.msg} at line {exc.lineno}, column {exc.colno}"
        ) from None
    return model_from_dict(doc)
