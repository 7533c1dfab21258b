"""Online per-pixel segmentation model, its refinement protocol, and metrics.

The model is a linear softmax classifier over per-pixel context windows:
the appearance features of a (2c+1)-pixel neighbourhood, the normalized ray
depth, and a bias. It is refined online by SGD with momentum on pixel-wise
cross-entropy, ignoring UNKNOWN pixels.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .render import View

UNKNOWN = -1
DEPTH_NORM = 10.0  # meters; depth feature = min(depth, DEPTH_NORM) / DEPTH_NORM


@dataclass
class TrainConfig:
    batch_size: int = 8
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-5
    max_iters: int = 1000
    early_stop_acc: float = 0.95
    min_crop: float = 0.5  # smallest augmentation crop, as a fraction of W

    def __post_init__(self):
        if not (0 < self.early_stop_acc <= 1):
            raise ValueError("early_stop_acc must lie in (0, 1]")


@dataclass
class SegModel:
    width: int
    d_app: int
    context: int
    class_count: int
    init_seed: int
    weights: np.ndarray   # (feature_dim, class_count)
    velocity: np.ndarray  # momentum buffer, persists across refine calls

    @property
    def feature_dim(self) -> int:
        return (2 * self.context + 1) * self.d_app + 2


@dataclass
class LabeledView:
    view: View
    labels: np.ndarray  # (W,) class id or UNKNOWN

    def __post_init__(self):
        if not (self.labels != UNKNOWN).any():
            raise ValueError("LabeledView needs at least one known pixel")
        self._ctx_cache: dict[int, np.ndarray] = {}

    def design_matrix(self, context: int) -> np.ndarray:
        if context not in self._ctx_cache:
            self._ctx_cache[context] = context_features(
                self.view.features, self.view.depth, context)
        return self._ctx_cache[context]


def init_model(seed: int, width: int = 64, d_app: int = 8, context: int = 2,
               class_count: int = 13) -> SegModel:
    """Fresh model with N(0, 0.01) weights; deterministic in seed."""
    dim = (2 * context + 1) * d_app + 2
    rng = np.random.default_rng(seed)
    w = rng.normal(0.0, 0.01, size=(dim, class_count))
    return SegModel(width=width, d_app=d_app, context=context, class_count=class_count,
                    init_seed=seed, weights=w, velocity=np.zeros_like(w))


def context_features(features: np.ndarray, depth: np.ndarray, context: int) -> np.ndarray:
    """Per-pixel design matrix: windowed appearance, normalized depth, bias."""
    W = features.shape[0]
    idx = np.arange(W)
    cols = [features[np.clip(idx + o, 0, W - 1)] for o in range(-context, context + 1)]
    d = (np.minimum(depth, DEPTH_NORM) / DEPTH_NORM)[:, None]
    return np.concatenate(cols + [d, np.ones((W, 1))], axis=1)


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def predict(model: SegModel, view: View) -> np.ndarray:
    """Per-pixel class distribution, shape (W, K); rows sum to 1."""
    if view.width != model.width:
        raise ValueError(f"view width {view.width} != model width {model.width}")
    X = context_features(view.features, view.depth, model.context)
    return _softmax(X @ model.weights)


def predict_labels(model: SegModel, view: View) -> np.ndarray:
    return np.argmax(predict(model, view), axis=1)


def cross_entropy_loss_grad(weights: np.ndarray, X: np.ndarray, y: np.ndarray,
                            weight_decay: float = 0.0):
    """Mean cross-entropy over known pixels (y != UNKNOWN), plus L2 term.

    Returns (loss, gradient). UNKNOWN rows contribute exactly zero gradient.
    """
    known = y != UNKNOWN
    n = int(known.sum())
    if n == 0:
        raise ValueError("no known pixels in batch")
    Xk, yk = X[known], y[known]
    probs = _softmax(Xk @ weights)
    loss = -np.mean(np.log(probs[np.arange(n), yk] + 1e-300))
    delta = probs
    delta[np.arange(n), yk] -= 1.0
    grad = Xk.T @ delta / n
    if weight_decay:
        loss = loss + 0.5 * weight_decay * float(np.sum(weights ** 2))
        grad = grad + weight_decay * weights
    return loss, grad


def _augment(lv: LabeledView, rng: np.random.Generator, min_crop: float) -> np.ndarray:
    """Random contiguous sub-strip (>= min_crop of W), rescaled back to W
    pixels by nearest neighbour. Returns the source pixel indices."""
    W = lv.view.width
    lo = int(np.ceil(min_crop * W))
    length = int(rng.integers(lo, W + 1))
    start = int(rng.integers(0, W - length + 1))
    return start + np.minimum((np.arange(W) * length) // W, length - 1)


def _view_sampling_weights(trainset: list[LabeledView],
                           class_count: int) -> np.ndarray | None:
    """Rare-class importance weights for minibatch view sampling.

    Each view is weighted by the summed inverse frequency of its known
    labels across the whole trainset, so views holding under-represented
    classes are drawn more often. Without this, wall pixels dominate every
    minibatch and the accuracy-based stopping rule fires before object
    classes are learned at all.
    """
    counts = np.zeros(class_count)
    for lv in trainset:
        kn = lv.labels[lv.labels != UNKNOWN]
        counts += np.bincount(kn, minlength=class_count)
    inv = np.where(counts > 0, 1.0 / np.maximum(counts, 1.0), 0.0)
    w = np.array([inv[lv.labels[lv.labels != UNKNOWN]].sum() for lv in trainset])
    total = w.sum()
    return w / total if total > 0 else None


def refine(model: SegModel, trainset: list[LabeledView], config: TrainConfig,
           rng: np.random.Generator) -> SegModel:
    """SGD refinement loop. Mutates and returns the model.

    Each mini-batch holds config.batch_size views sampled with replacement
    (rare-class importance weighted), always including the most recently
    added one. Stops when pixel accuracy on the mini-batch's views exceeds
    config.early_stop_acc (measured on the full, un-augmented strips so crop
    sampling can't trigger the stop on an easy subset), or after max_iters.
    Gradient steps use the augmented crops.
    """
    if not trainset:
        raise ValueError("refine requires a non-empty trainset")
    pweights = _view_sampling_weights(trainset, model.class_count)
    for _ in range(config.max_iters):
        picks = [len(trainset) - 1]
        picks += list(rng.choice(len(trainset), size=config.batch_size - 1,
                                 p=pweights))
        Xs, ys, Xf, yf = [], [], [], []
        for p in picks:
            lv = trainset[p]
            src = _augment(lv, rng, config.min_crop)
            Xs.append(lv.design_matrix(model.context)[src])
            ys.append(lv.labels[src])
            Xf.append(lv.design_matrix(model.context))
            yf.append(lv.labels)
        X = np.concatenate(Xs)
        y = np.concatenate(ys)
        if not (y != UNKNOWN).any():
            continue
        yfull = np.concatenate(yf)
        known = yfull != UNKNOWN
        probs = _softmax(np.concatenate(Xf)[known] @ model.weights)
        acc = float(np.mean(np.argmax(probs, axis=1) == yfull[known]))
        if acc > config.early_stop_acc:
            break
        _, grad = cross_entropy_loss_grad(model.weights, X, y, config.weight_decay)
        model.velocity = config.momentum * model.velocity + grad
        model.weights = model.weights - config.lr * model.velocity
    return model


# ---------------------------------------------------------------------------
# metrics

def confusion_matrix(model: SegModel, refset: list[View]) -> np.ndarray:
    """Pooled K x K confusion matrix over reference views; rows = gt."""
    K = model.class_count
    cm = np.zeros((K, K), dtype=np.int64)
    for view in refset:
        pred = predict_labels(model, view)
        np.add.at(cm, (view.gt_class, pred), 1)
    return cm


def miou_from_confusion(cm: np.ndarray, class_subset: set[int] | None = None) -> float:
    inter = np.diag(cm).astype(float)
    union = cm.sum(axis=1) + cm.sum(axis=0) - np.diag(cm)
    present = union > 0
    if class_subset is not None:
        sel = np.zeros(len(cm), dtype=bool)
        sel[list(class_subset)] = True
        present &= sel
    if not present.any():
        raise ValueError("no classes to average over")
    return float(np.mean(inter[present] / union[present]))


def miou(model: SegModel, refset: list[View], class_subset: set[int] | None = None) -> float:
    """Mean IoU from the pooled confusion matrix.

    Averages over class_subset when given, else over classes present in
    ground truth or predictions; classes absent from both are excluded.
    """
    if not refset:
        raise ValueError("empty reference set")
    return miou_from_confusion(confusion_matrix(model, refset), class_subset)


def mean_accuracy(model: SegModel, refset: list[View]) -> float:
    """Pooled per-pixel accuracy over the reference set."""
    if not refset:
        raise ValueError("empty reference set")
    correct = total = 0
    for view in refset:
        correct += int(np.sum(predict_labels(model, view) == view.gt_class))
        total += view.width
    return correct / total


def top_k_classes(refset: list[View], k: int = 10) -> set[int]:
    """The k classes with most ground-truth pixels; ties won by lower id."""
    if not refset:
        raise ValueError("empty reference set")
    counts: dict[int, int] = {}
    for view in refset:
        for c, n in zip(*np.unique(view.gt_class, return_counts=True)):
            counts[int(c)] = counts.get(int(c), 0) + int(n)
    ranked = sorted(counts, key=lambda c: (-counts[c], c))
    return set(ranked[:k])


# ---------------------------------------------------------------------------
# checkpoint format (versioned, exact round trip)

def save_model(model: SegModel, path: str) -> None:
    np.savez(path, version=1, width=model.width, d_app=model.d_app,
             context=model.context, class_count=model.class_count,
             init_seed=model.init_seed, weights=model.weights,
             velocity=model.velocity)


def load_model(path: str) -> SegModel:
    z = np.load(path)
    if int(z["version"]) != 1:
        raise ValueError(f"unsupported checkpoint version {z['version']}")
    return SegModel(width=int(z["width"]), d_app=int(z["d_app"]),
                    context=int(z["context"]), class_count=int(z["class_count"]),
                    init_seed=int(z["init_seed"]), weights=z["weights"],
                    velocity=z["velocity"])
