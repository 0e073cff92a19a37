"""Binary random forest on Gini impurity, written against numpy only.

Training rows are put into a canonical order (sorted by label, then by feature
values) before any sampling, so the fitted model depends on the multiset of
rows and the seed but not on the order rows were supplied in. Each tree draws
its own generator from ``SeedSequence(seed).spawn(n_trees)``; serial and
threaded training therefore produce the same trees.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .features import FeatureConfig, FeatureVector

FORMAT = "resipkit-forest"
VERSION = 1


@dataclass(frozen=True)
class Hyperparameters:
    n_trees: int = 100
    max_depth: int | None = None
    max_features: int | None = None  # None -> int(sqrt(d))
    min_samples_leaf: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.n_trees < 1:
            raise ValueError("n_trees must be >= 1")
        if self.max_depth is not None and self.max_depth < 0:
            raise ValueError("max_depth must be >= 0")
        if self.max_features is not None and self.max_features < 1:
            raise ValueError("max_features must be >= 1")
        if self.min_samples_leaf < 1:
            raise ValueError("min_samples_leaf must be >= 1")

    def features_per_split(self, d: int) -> int:
        return min(d, self.max_features or max(1, int(math.sqrt(d))))


@dataclass
class TrainingSet:
    X: np.ndarray
    y: np.ndarray
    feature_names: list[str]
    config: FeatureConfig | None = None

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=float)
        self.y = np.asarray(self.y)
        if self.X.ndim != 2:
            raise ValueError("feature matrix must be two-dimensional")
        if len(self.y) != len(self.X):
            raise ValueError(f"{len(self.X)} rows but {len(self.y)} labels")
        if len(self.feature_names) != self.X.shape[1]:
            raise ValueError(f"{self.X.shape[1]} columns but {len(self.feature_names)} feature names")


@dataclass
class Tree:
    """Flat arrays; node 0 is the root and ``feature == -1`` marks a leaf."""

    feature: list[int] = field(default_factory=list)
    threshold: list[float] = field(default_factory=list)
    left: list[int] = field(default_factory=list)
    right: list[int] = field(default_factory=list)
    counts: list[list[int]] = field(default_factory=list)  # [negatives, positives]
    bootstrap: list[int] = field(default_factory=list)

    @classmethod
    def constant(cls, label: int) -> "Tree":
        return cls([-1], [0.0], [-1], [-1], [[0, 1] if label else [1, 0]])

    def _add(self, counts) -> int:
        self.feature.append(-1)
        self.threshold.append(0.0)
        self.left.append(-1)
        self.right.append(-1)
        self.counts.append([int(counts[0]), int(counts[1])])
        return len(self.feature) - 1

    @property
    def depth(self) -> int:
        best, stack = 0, [(0, 0)]
        while stack:
            node, d = stack.pop()
            best = max(best, d)
            if self.feature[node] >= 0:
                stack += [(self.left[node], d + 1), (self.right[node], d + 1)]
        return best

    def leaf_labels(self) -> np.ndarray:
        c = np.asarray(self.counts)
        return (c[:, 1] > c[:, 0]).astype(int)  # leaf tie -> negative

    def apply(self, X: np.ndarray) -> np.ndarray:
        feat = np.asarray(self.feature)
        thr = np.asarray(self.threshold)
        left, right = np.asarray(self.left), np.asarray(self.right)
        node = np.zeros(len(X), dtype=int)
        rows = np.arange(len(X))
        while True:
            f = feat[node]
            inner = f >= 0
            if not inner.any():
                return node
            go_left = X[rows[inner], f[inner]] <= thr[node[inner]]
            node[inner] = np.where(go_left, left[node[inner]], right[node[inner]])

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.leaf_labels()[self.apply(X)]


def _gini(neg: float, pos: float) -> float:
    n = neg + pos
    if n == 0:
        return 0.0
    p = pos / n
    return 2.0 * p * (1.0 - p)


def _best_split(x: np.ndarray, y: np.ndarray, min_leaf: int):
    """Lowest weighted child Gini for one feature: (score, threshold) or None."""
    order = np.argsort(x, kind="stable")
    xs, ys = x[order], y[order]
    n = len(xs)
    pos_left = np.cumsum(ys)[:-1]
    n_left = np.arange(1, n)
    pos_total = ys.sum()
    ok = (xs[1:] > xs[:-1]) & (n_left >= min_leaf) & (n - n_left >= min_leaf)
    if not ok.any():
        return None
    nl, nr = n_left[ok].astype(float), (n - n_left[ok]).astype(float)
    pl = pos_left[ok] / nl
    pr = (pos_total - pos_left[ok]) / nr
    score = (nl * 2 * pl * (1 - pl) + nr * 2 * pr * (1 - pr)) / n
    k = int(np.argmin(score))
    at = np.flatnonzero(ok)[k]
    lo, hi = xs[at], xs[at + 1]
    thr = lo + (hi - lo) / 2.0
    if not lo <= thr < hi:
        thr = lo
    return float(score[k]), float(thr)


def _grow(X: np.ndarray, y: np.ndarray, rows: np.ndarray, hp: Hyperparameters, rng: np.random.Generator) -> Tree:
    tree = Tree(bootstrap=[int(r) for r in rows])
    d = X.shape[1]
    mtry = hp.features_per_split(d)
    root = tree._add((int((y[rows] == 0).sum()), int(y[rows].sum())))
    stack = [(root, rows, 0)]
    while stack:
        node, idx, depth = stack.pop()
        neg, pos = tree.counts[node]
        if neg == 0 or pos == 0 or (hp.max_depth is not None and depth >= hp.max_depth):
            continue
        best = None
        tried = 0
        # Keep drawing past mtry until some feature admits a split.
        for j in rng.permutation(d):
            found = _best_split(X[idx, j], y[idx], hp.min_samples_leaf)
            tried += 1
            if found is not None and (best is None or found[0] < best[0]):
                best = (found[0], found[1], int(j))
            if tried >= mtry and best is not None:
                break
        if best is None:
            continue
        _, thr, j = best
        mask = X[idx, j] <= thr
        li, ri = idx[mask], idx[~mask]
        ln = tree._add(((y[li] == 0).sum(), y[li].sum()))
        rn = tree._add(((y[ri] == 0).sum(), y[ri].sum()))
        tree.feature[node], tree.threshold[node] = j, thr
        tree.left[node], tree.right[node] = ln, rn
        stack += [(rn, ri, depth + 1), (ln, li, depth + 1)]
    return tree


def _stratified_bootstrap(y: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    # Resample within each class so every tree sees both labels.
    parts = []
    for label in (0, 1):
        members = np.flatnonzero(y == label)
        parts.append(rng.choice(members, size=len(members), replace=True))
    return np.sort(np.concatenate(parts))


def canonical_order(X: np.ndarray, y: np.ndarray) -> np.ndarray:
    keys = tuple(X[:, j] for j in reversed(range(X.shape[1]))) + (y,)
    return np.lexsort(keys)


def _validate(ts: TrainingSet) -> None:
    if len(ts.X) < 2:
        raise ValueError("need at least 2 training rows")
    bad = np.argwhere(~np.isfinite(ts.X))
    if len(bad):
        r, c = (int(v) for v in bad[0])
        raise ValueError(f"non-finite feature value (NaN/inf) at row {r}, column {c} ({ts.feature_names[c]})")
    labels = set(np.unique(ts.y).tolist())
    if not labels <= {0, 1}:
        raise ValueError(f"labels must be 0/1, got {sorted(labels)}")
    if len(labels) < 2:
        raise ValueError("degenerate labels: training data contains a single class")


@dataclass
class TreeEnsemble:
    trees: list[Tree]
    feature_names: list[str]
    hyperparameters: Hyperparameters = field(default_factory=Hyperparameters)
    config: FeatureConfig | None = None

    @property
    def n_features(self) -> int:
        return len(self.feature_names)

    def _check(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X.reshape(1, -1)
        if X.shape[1] != self.n_features:
            raise ValueError(f"dimension mismatch: model expects {self.n_features} features, got {X.shape[1]}")
        return X

    def positive_votes(self, X) -> np.ndarray:
        X = self._check(X)
        votes = np.zeros(len(X), dtype=int)
        for t in self.trees:
            votes += t.predict(X)
        return votes

    def predict_proba(self, X) -> np.ndarray:
        return self.positive_votes(X) / len(self.trees)

    def predict_labels(self, X) -> np.ndarray:
        votes = self.positive_votes(X)
        return (2 * votes > len(self.trees)).astype(int)  # vote tie -> negative

    # -- persistence --

    def to_dict(self) -> dict:
        return {
            "format": FORMAT,
            "version": VERSION,
            "feature_config": self.config.as_dict() if self.config else None,
            "feature_names": list(self.feature_names),
            "hyperparameters": asdict(self.hyperparameters),
            "trees": [asdict(t) for t in self.trees],
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps() + "\n", encoding="utf-8")

    @classmethod
    def from_dict(cls, doc: dict) -> "TreeEnsemble":
        if doc.get("format") != FORMAT:
            raise ValueError("not a forest model file")
        if doc.get("version") != VERSION:
            raise ValueError(f"unsupported model version {doc.get('version')!r} (this build reads {VERSION})")
        cfg = FeatureConfig(**doc["feature_config"]) if doc.get("feature_config") else None
        trees = [Tree(**t) for t in doc["trees"]]
        return cls(trees, list(doc["feature_names"]), Hyperparameters(**doc["hyperparameters"]), cfg)

    @classmethod
    def load(cls, path: str | Path) -> "TreeEnsemble":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def train(ts: TrainingSet, hp: Hyperparameters | None = None, jobs: int = 1) -> TreeEnsemble:
    hp = hp or Hyperparameters()
    _validate(ts)
    order = canonical_order(ts.X, ts.y)
    X, y = ts.X[order], ts.y[order].astype(int)
    seeds = np.random.SeedSequence(hp.seed).spawn(hp.n_trees)

    def one(ss):
        rng = np.random.default_rng(ss)
        return _grow(X, y, _stratified_bootstrap(y, rng), hp, rng)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            trees = list(pool.map(one, seeds))
    else:
        trees = [one(s) for s in seeds]
    return TreeEnsemble(trees, list(ts.feature_names), hp, ts.config)


def predict(model: TreeEnsemble, fv: FeatureVector | np.ndarray | list[float]) -> tuple[int, float]:
    """Majority-vote label and positive-tree fraction for one vector."""
    if isinstance(fv, FeatureVector):
        if model.config is not None and fv.config != model.config:
            raise ValueError(f"vector extracted under ({fv.config}) but model was trained under ({model.config})")
        fv = fv.values
    x = np.asarray(fv, dtype=float).reshape(-1)
    if len(x) != model.n_features:
        raise ValueError(f"dimension mismatch: model expects {model.n_features} features, got {len(x)}")
    votes = int(model.positive_votes(x)[0])
    label = int(2 * votes > len(model.trees))
    return label, votes / len(model.trees)


def _tree_importance(tree: Tree, d: int) -> np.ndarray:
    imp = np.zeros(d)
    counts = np.asarray(tree.counts, dtype=float)
    total = counts[0].sum()
    for node, j in enumerate(tree.feature):
        if j < 0:
            continue
        n_t = counts[node].sum()
        l, r = tree.left[node], tree.right[node]
        n_l, n_r = counts[l].sum(), counts[r].sum()
        child = (n_l * _gini(*counts[l]) + n_r * _gini(*counts[r])) / n_t
        imp[j] += (n_t / total) * (_gini(*counts[node]) - child)
    return imp


def feature_importance(model: TreeEnsemble) -> list[tuple[str, float]]:
    """Mean impurity decrease per feature, normalised to sum 1, descending.

    A forest without any split spreads importance evenly.
    """
    d = model.n_features
    imp = np.mean([_tree_importance(t, d) for t in model.trees], axis=0)
    s = imp.sum()
    imp = imp / s if s > 0 else np.full(d, 1.0 / d)
    ranked = sorted(zip(model.feature_names, imp.tolist()), key=lambda kv: (-kv[1], kv[0]))
    return ranked


def render_importance(ranked: list[tuple[str, float]], top: int = 10) -> str:
    lines = [f"{'Rank':<5}{'Feature':<24}Importance"]
    for rank, (name, value) in enumerate(ranked[:top], start=1):
        lines.append(f"{rank:<5}{name:<24}{value:.4f}")
    return "\n".join(lines)


@dataclass(frozen=True)
class EvaluationReport:
    accuracy: float
    precision: float
    recall: float
    tp: int
    fp: int
    tn: int
    fn: int

    def as_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "precision": self.precision,
            "recall": self.recall,
            "confusion_matrix": {"tp": self.tp, "fp": self.fp, "tn": self.tn, "fn": self.fn},
        }


def evaluate(model: TreeEnsemble, X, y) -> EvaluationReport:
    pred = model.predict_labels(X)
    y = np.asarray(y).astype(int)
    tp = int(((pred == 1) & (y == 1)).sum())
    fp = int(((pred == 1) & (y == 0)).sum())
    tn = int(((pred == 0) & (y == 0)).sum())
    fn = int(((pred == 0) & (y == 1)).sum())
    n = len(y)
    return EvaluationReport(
        accuracy=(tp + tn) / n if n else 0.0,
        precision=tp / (tp + fp) if tp + fp else 0.0,
        recall=tp / (tp + fn) if tp + fn else 0.0,
        tp=tp, fp=fp, tn=tn, fn=fn,
    )
