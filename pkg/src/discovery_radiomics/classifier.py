"""Binary CART decision tree (Gini impurity) over radiomic sequences.

Split search is vectorised over features: each node sorts its samples per
feature once and evaluates every midpoint between consecutive distinct
values. Ties between equally good splits go to the lowest feature index,
then the lowest threshold, so fitting is deterministic and independent of
sample order.
"""

from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .errors import DimensionError, FormatError
from .io_utils import atomic_write_text

TREE_HEADER = "# decision-tree v1"
# guards against float round-off posing as an impurity decrease
_GAIN_EPS = 1e-12


@dataclass(frozen=True)
class TreeParams:
    max_depth: int = 12
    min_samples_leaf: int = 5
    min_impurity_decrease: float = 0.0

    def __post_init__(self):
        if self.max_depth < 1:
            raise ValueError("max_depth must be >= 1")
        if self.min_samples_leaf < 1:
            raise ValueError("min_samples_leaf must be >= 1")
        if self.min_impurity_decrease < 0:
            raise ValueError("min_impurity_decrease must be >= 0")


@dataclass
class Node:
    counts: tuple                     # (benign, malignant) training samples reaching the node
    feature: Optional[int] = None     # None for leaves
    threshold: Optional[float] = None
    left: Optional[int] = None
    right: Optional[int] = None

    @property
    def is_leaf(self):
        return self.feature is None

    @property
    def label(self):
        # majority, ties to malignant
        return int(self.counts[1] >= self.counts[0])

    @property
    def malignant_fraction(self):
        return self.counts[1] / (self.counts[0] + self.counts[1])


@dataclass
class DecisionTree:
    n_features: int
    nodes: List[Node] = field(default_factory=list)

    @property
    def depth(self):
        def walk(i):
            n = self.nodes[i]
            return 0 if n.is_leaf else 1 + max(walk(n.left), walk(n.right))
        return walk(0)

    def leaf_of(self, x):
        node = self.nodes[0]
        while not node.is_leaf:
            node = self.nodes[node.left if x[node.feature] <= node.threshold else node.right]
        return node


def gini(n0, n1):
    n = n0 + n1
    if n == 0:
        return 0.0
    p = n1 / n
    return 2.0 * p * (1.0 - p)


def best_split(X, y, min_samples_leaf=1):
    """Best (feature, threshold, weighted_impurity) for one node, or None.

    Candidate thresholds are midpoints of consecutive distinct values; both
    children must hold at least ``min_samples_leaf`` samples.
    """
    m, d = X.shape
    if m < 2 * min_samples_leaf or m < 2:
        return None
    order = np.argsort(X, axis=0, kind="stable")
    xs = np.take_along_axis(X, order, axis=0)
    ones = np.cumsum(y[order], axis=0)[:-1]           # malignant count left of cut i+1
    n_left = np.arange(1, m)[:, None].astype(np.float64)
    n_right = m - n_left
    ones_right = y.sum() - ones
    p_left = ones / n_left
    p_right = ones_right / n_right
    weighted = (n_left * 2 * p_left * (1 - p_left) + n_right * 2 * p_right * (1 - p_right)) / m
    valid = xs[1:] > xs[:-1]
    valid[: min_samples_leaf - 1] = False
    if min_samples_leaf > 1:
        valid[m - min_samples_leaf:] = False
    if not valid.any():
        return None
    weighted = np.where(valid, weighted, np.inf)
    # feature-major flattening: argmin picks lowest feature, then lowest cut
    flat = weighted.T.ravel()
    k = int(np.argmin(flat))
    feature, cut = divmod(k, m - 1)
    lo, hi = xs[cut, feature], xs[cut + 1, feature]
    threshold = (lo + hi) / 2.0
    if not lo <= threshold < hi:
        threshold = lo
    return feature, float(threshold), float(flat[k])


def fit_tree(X, y, params=TreeParams()):
    """Grow a CART tree on features ``X`` (n, d) and binary labels ``y``."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if X.ndim != 2 or len(X) == 0:
        raise ValueError("fit_tree needs a non-empty (n, d) feature matrix")
    if y.shape != (len(X),) or not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be a length-n vector of 0/1")
    tree = DecisionTree(n_features=X.shape[1])

    def grow(idx, depth):
        n1 = int(y[idx].sum())
        node_id = len(tree.nodes)
        node = Node(counts=(len(idx) - n1, n1))
        tree.nodes.append(node)
        if depth >= params.max_depth or n1 in (0, len(idx)):
            return node_id
        split = best_split(X[idx], y[idx], params.min_samples_leaf)
        if split is None:
            return node_id
        feature, threshold, impurity = split
        if gini(len(idx) - n1, n1) - impurity <= params.min_impurity_decrease + _GAIN_EPS:
            return node_id
        go_left = X[idx, feature] <= threshold
        node.feature, node.threshold = feature, threshold
        node.left = grow(idx[go_left], depth + 1)
        node.right = grow(idx[~go_left], depth + 1)
        return node_id

    grow(np.arange(len(X)), 0)
    return tree


def fit_sequences(sequences, params=TreeParams()):
    """Fit on a list of labelled RadiomicSequence records."""
    if not sequences:
        raise ValueError("no sequences to fit")
    X = np.stack([s.features for s in sequences])
    y = np.array([s.label for s in sequences])
    return fit_tree(X, y, params)


def predict_tree(tree, x):
    """Return ``(label, malignant_score)`` for one feature vector."""
    x = np.asarray(getattr(x, "features", x), dtype=np.float64)
    if x.shape != (tree.n_features,):
        raise DimensionError(f"sequence length {x.shape} does not match tree width {tree.n_features}")
    leaf = tree.leaf_of(x)
    return leaf.label, leaf.malignant_fraction


def predict_many(tree, X):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != tree.n_features:
        raise DimensionError(f"feature matrix {X.shape} does not match tree width {tree.n_features}")
    labels = np.empty(len(X), dtype=np.int64)
    scores = np.empty(len(X))
    for i, row in enumerate(X):
        leaf = tree.leaf_of(row)
        labels[i], scores[i] = leaf.label, leaf.malignant_fraction
    return labels, scores


# -- text format ------------------------------------------------------------
#
#   # decision-tree v1
#   features <d>
#   <id> split <feature> <threshold> <left> <right> <n_benign> <n_malignant>
#   <id> leaf <n_benign> <n_malignant>

def tree_to_text(tree):
    lines = [TREE_HEADER, f"features {tree.n_features}"]
    for i, n in enumerate(tree.nodes):
        if n.is_leaf:
            lines.append(f"{i} leaf {n.counts[0]} {n.counts[1]}")
        else:
            lines.append(f"{i} split {n.feature} {n.threshold!r} {n.left} {n.right} "
                         f"{n.counts[0]} {n.counts[1]}")
    return "\n".join(lines) + "\n"


def tree_from_text(text):
    lines = text.splitlines()
    if not lines or lines[0].strip() != TREE_HEADER:
        raise FormatError("missing decision-tree header", line=1)
    try:
        key, value = lines[1].split()
        if key != "features":
            raise ValueError
        tree = DecisionTree(n_features=int(value))
    except (IndexError, ValueError):
        raise FormatError("expected 'features <count>'", line=2) from None
    for lineno, line in enumerate(lines[2:], start=3):
        parts = line.split()
        try:
            if int(parts[0]) != len(tree.nodes):
                raise ValueError("node ids must be consecutive")
            if parts[1] == "leaf" and len(parts) == 4:
                node = Node(counts=(int(parts[2]), int(parts[3])))
            elif parts[1] == "split" and len(parts) == 8:
                node = Node(counts=(int(parts[6]), int(parts[7])), feature=int(parts[2]),
                            threshold=float(parts[3]), left=int(parts[4]), right=int(parts[5]))
                if not 0 <= node.feature < tree.n_features:
                    raise ValueError("feature index out of range")
            else:
                raise ValueError("unknown node kind or wrong field count")
            if min(node.counts) < 0 or sum(node.counts) == 0:
                raise ValueError("bad class counts")
        except (IndexError, ValueError) as exc:
            raise FormatError(f"malformed node: {exc}", line=lineno) from None
        tree.nodes.append(node)
    if not tree.nodes:
        raise FormatError("tree has no nodes", line=len(lines))
    for i, n in enumerate(tree.nodes):
        if not n.is_leaf and not (i < n.left < len(tree.nodes) and i < n.right < len(tree.nodes)):
            raise FormatError(f"node {i} has dangling children", line=i + 3)
    return tree


def save_tree(tree, path):
    atomic_write_text(path, tree_to_text(tree))


def load_tree(path):
    with open(path, encoding="utf-8") as fh:
        return tree_from_text(fh.read())
