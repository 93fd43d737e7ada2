"""Gradient-boosted regression trees with exact squared-error splits.

Each round fits one tree to the current residuals by greedy split search:
every candidate threshold of every sampled feature is scored exactly (no
histogram binning), so training is reproducible bit-for-bit and the train
MSE is non-increasing per round. Two stock configurations stand in for the
two heterogeneous library regressors, and a validation-driven grid search
fuses their predictions.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .metrics import UndefinedCorrelation, mae, spearman

_MIN_GAIN = 1e-12


class GBDTError(ValueError):
    pass


@dataclass(frozen=True)
class GBDTConfig:
    rounds: int = 300
    max_depth: int = 6
    min_leaf: int = 5
    learning_rate: float = 0.05
    feature_subsample: float = 0.8
    seed: int = 0
    tag: str = "a"


# the two stock regressor configurations fused at prediction time
CONFIG_A = GBDTConfig(rounds=300, max_depth=6, learning_rate=0.05,
                      feature_subsample=0.8, seed=0, tag="a")
CONFIG_B = GBDTConfig(rounds=500, max_depth=4, learning_rate=0.05,
                      feature_subsample=0.6, seed=1, tag="b")


@dataclass
class TreeNode:
    feature: int = -1
    threshold: float = 0.0
    left: "TreeNode | None" = None
    right: "TreeNode | None" = None
    value: float = 0.0

    @property
    def is_leaf(self) -> bool:
        return self.left is None


@dataclass
class Forest:
    trees: list[TreeNode]
    learning_rate: float
    base_score: float
    n_features: int
    config: GBDTConfig
    train_mse: list[float] = field(default_factory=list)


def _best_split(xs: np.ndarray, rs: np.ndarray, min_leaf: int):
    """Exact SSE-gain split over presorted node blocks.

    xs, rs: [F, m] feature values / residuals, each row sorted by feature.
    Returns (local feature row, split position, threshold, gain) or None.
    Ties resolve to the smaller feature index, then the smaller threshold.
    """
    m = xs.shape[1]
    if m < 2 * min_leaf:
        return None
    pre = np.cumsum(rs, axis=1)
    tot = pre[:, -1:]
    nl = np.arange(1, m, dtype=np.float64)
    sl = pre[:, :-1]
    score = sl * sl / nl + (tot - sl) ** 2 / (m - nl)
    gain = score - tot * tot / m
    valid = xs[:, :-1] < xs[:, 1:]
    if min_leaf > 1:
        valid &= (nl >= min_leaf) & (m - nl >= min_leaf)
    gain = np.where(valid, gain, -np.inf)
    pos = np.argmax(gain, axis=1)              # first max: smaller threshold wins
    per_feature = gain[np.arange(len(pos)), pos]
    row = int(np.argmax(per_feature))          # first max: smaller feature index wins
    if not np.isfinite(per_feature[row]) or per_feature[row] <= _MIN_GAIN:
        return None
    k = int(pos[row])
    threshold = (xs[row, k] + xs[row, k + 1]) / 2.0
    return row, k, threshold, float(per_feature[row])


def _build_tree(x: np.ndarray, residuals: np.ndarray, sorted_rows: np.ndarray,
                feats: np.ndarray, depth_left: int, min_leaf: int) -> TreeNode:
    node_rows = sorted_rows[0]
    leaf_value = float(residuals[node_rows].mean())
    if depth_left == 0:
        return TreeNode(value=leaf_value)
    xs = x[sorted_rows, feats[:, None]]
    rs = residuals[sorted_rows]
    split = _best_split(xs, rs, min_leaf)
    if split is None:
        return TreeNode(value=leaf_value)
    row, _, threshold, _ = split
    feature = int(feats[row])
    go_left = x[:, feature] <= threshold
    mask = go_left[sorted_rows]
    m_left = int(mask[0].sum())
    left_rows = sorted_rows[mask].reshape(len(feats), m_left)
    right_rows = sorted_rows[~mask].reshape(len(feats), sorted_rows.shape[1] - m_left)
    return TreeNode(
        feature=feature,
        threshold=threshold,
        left=_build_tree(x, residuals, left_rows, feats, depth_left - 1, min_leaf),
        right=_build_tree(x, residuals, right_rows, feats, depth_left - 1, min_leaf),
    )


def _tree_predict(root: TreeNode, x: np.ndarray) -> np.ndarray:
    out = np.empty(len(x))
    stack = [(root, np.arange(len(x)))]
    while stack:
        node, idx = stack.pop()
        if len(idx) == 0:
            continue
        if node.is_leaf:
            out[idx] = node.value
            continue
        go = x[idx, node.feature] <= node.threshold
        stack.append((node.left, idx[go]))
        stack.append((node.right, idx[~go]))
    return out


def fit_gbdt(features: np.ndarray, labels: np.ndarray, config: GBDTConfig) -> Forest:
    """Boost ``config.rounds`` trees against squared-error residuals."""
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if x.ndim != 2 or len(x) != len(y):
        raise GBDTError("features must be [n, F] with matching labels")
    if not np.all(np.isfinite(x)) or not np.all(np.isfinite(y)):
        raise GBDTError("non-finite values in training data")
    n, n_features = x.shape
    if n < 2 * config.min_leaf:
        raise GBDTError(f"need at least {2 * config.min_leaf} rows, got {n}")
    rng = np.random.default_rng(config.seed)
    presorted = np.argsort(x, axis=0, kind="stable")  # [n, F] row indices per column
    n_sampled = max(1, math.ceil(config.feature_subsample * n_features))

    base = float(y.mean())
    pred = np.full(n, base)
    forest = Forest([], config.learning_rate, base, n_features, config)
    for _ in range(config.rounds):
        feats = np.sort(rng.choice(n_features, size=n_sampled, replace=False))
        residuals = y - pred
        root_rows = presorted[:, feats].T.copy()
        tree = _build_tree(x, residuals, root_rows, feats, config.max_depth, config.min_leaf)
        forest.trees.append(tree)
        pred += config.learning_rate * _tree_predict(tree, x)
        forest.train_mse.append(float(np.mean((y - pred) ** 2)))
    return forest


def predict(forest: Forest, features: np.ndarray) -> np.ndarray:
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != forest.n_features:
        raise GBDTError(f"feature width {x.shape} does not match training width "
                        f"{forest.n_features}")
    out = np.full(len(x), forest.base_score)
    for tree in forest.trees:
        out += forest.learning_rate * _tree_predict(tree, x)
    return out


def oversample_tail(labels, threshold: float = 12.0, factor: int = 2) -> np.ndarray:
    """Index list where tail rows (label > threshold) appear ``factor``
    times: originals in order first, duplicates appended."""
    if factor < 1:
        raise GBDTError("factor must be >= 1")
    labels = np.asarray(labels, dtype=np.float64)
    idx = list(range(len(labels)))
    tail = [i for i in idx if labels[i] > threshold]
    for _ in range(factor - 1):
        idx.extend(tail)
    return np.array(idx, dtype=np.intp)


@dataclass(frozen=True)
class FusionWeights:
    weight_a: float

    def blend(self, pred_a: np.ndarray, pred_b: np.ndarray) -> np.ndarray:
        return self.weight_a * pred_a + (1.0 - self.weight_a) * pred_b


def fuse_predictions(pred_a, pred_b, val_labels) -> FusionWeights:
    """Grid-search w in {0, 0.05, ..., 1} maximizing validation rank
    correlation of the blend; ties prefer lower MAE, then smaller w."""
    pred_a = np.asarray(pred_a, dtype=np.float64)
    pred_b = np.asarray(pred_b, dtype=np.float64)
    val_labels = np.asarray(val_labels, dtype=np.float64)
    if not len(pred_a) == len(pred_b) == len(val_labels):
        raise GBDTError("length mismatch")
    best_key, best_w = None, 0.0
    for i in range(21):
        w = i / 20.0
        blend = w * pred_a + (1.0 - w) * pred_b
        try:
            src = spearman(val_labels, blend)
        except (UndefinedCorrelation, ValueError):
            src = -math.inf
        key = (-src, mae(val_labels, blend), w)
        if best_key is None or key < best_key:
            best_key, best_w = key, w
    return FusionWeights(best_w)


# ---------------------------------------------------------------------------
# forest checkpoints

_MAGIC = b"PGBT"
_VERSION = 1


def _write_node(buf: list[bytes], node: TreeNode) -> None:
    if node.is_leaf:
        buf.append(struct.pack("<Bd", 0, node.value))
    else:
        buf.append(struct.pack("<BId", 1, node.feature, node.threshold))
        _write_node(buf, node.left)
        _write_node(buf, node.right)


def save_forest(path, forest: Forest) -> None:
    cfg = json.dumps(asdict(forest.config), sort_keys=True).encode("utf-8")
    buf: list[bytes] = [
        _MAGIC,
        struct.pack("<H", _VERSION),
        struct.pack("<I", len(cfg)), cfg,
        struct.pack("<ddI", forest.base_score, forest.learning_rate, forest.n_features),
        struct.pack("<I", len(forest.trees)),
    ]
    for tree in forest.trees:
        _write_node(buf, tree)
    buf.append(struct.pack("<I", len(forest.train_mse)))
    buf.append(np.asarray(forest.train_mse, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(buf))


def _read_node(raw: bytes, off: int) -> tuple[TreeNode, int]:
    (tag,) = struct.unpack_from("<B", raw, off)
    off += 1
    if tag == 0:
        (value,) = struct.unpack_from("<d", raw, off)
        return TreeNode(value=value), off + 8
    feature, threshold = struct.unpack_from("<Id", raw, off)
    off += 12
    left, off = _read_node(raw, off)
    right, off = _read_node(raw, off)
    return TreeNode(feature=feature, threshold=threshold, left=left, right=right), off


def load_forest(path) -> Forest:
    raw = Path(path).read_bytes()
    if raw[:4] != _MAGIC:
        raise GBDTError("bad forest magic")
    (version,) = struct.unpack_from("<H", raw, 4)
    if version != _VERSION:
        raise GBDTError(f"unsupported forest version {version}")
    (cfg_len,) = struct.unpack_from("<I", raw, 6)
    config = GBDTConfig(**json.loads(raw[10:10 + cfg_len].decode("utf-8")))
    off = 10 + cfg_len
    base, lr, n_features = struct.unpack_from("<ddI", raw, off)
    off += 20
    (n_trees,) = struct.unpack_from("<I", raw, off)
    off += 4
    trees = []
    for _ in range(n_trees):
        tree, off = _read_node(raw, off)
        trees.append(tree)
    (n_mse,) = struct.unpack_from("<I", raw, off)
    off += 4
    train_mse = list(np.frombuffer(raw, dtype="<f8", count=n_mse, offset=off))
    return Forest(trees, lr, base, n_features, config, train_mse)
