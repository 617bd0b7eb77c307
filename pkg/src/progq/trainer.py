"""
Mini-batch training of codebooks and the supervised head.

All randomness (holdout split, head init, k-means seeding, shuffling)
comes from one generator seeded with Hyperparameters.seed. After each epoch
that trains codebooks they are re-fitted to the current embedding, so the
codebooks follow the head as it rescales the space.
"""

import logging
from dataclasses import replace
from typing import Callable, Dict, List, Mapping, Optional, Tuple

import numpy as np

from .baselines import train_residual_baseline
from .core import Codebook, as_feature_matrix
from .errors import ConfigurationError, DivergenceError, EmptyInputError
from .gradients import loss_and_gradients
from .model import Hyperparameters, ProgressiveModel
from .quantizer import hard_cascade_batch, hard_distortion_profile
from .supervised import LabelsLike, LossBreakdown, ProjectionHead, SemanticLabelSet, label_matrix

logger = logging.getLogger(__name__)

ProgressCallback = Callable[[int, int, Dict[str, float]], None]

REFINE_TOLERANCE = 1e-7


class Adam:
    """Adaptive-moment updates applied in place to named arrays"""

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}

    def step(self, params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, p in params.items():
            g = grads[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            p -= self.lr * (self.m[name] / c1) / (np.sqrt(self.v[name] / c2) + self.eps)


class SGD:
    def __init__(self, lr: float = 1e-3):
        self.lr = lr

    def step(self, params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray]) -> None:
        for name, p in params.items():
            p -= self.lr * grads[name]


def make_optimizer(hyper: Hyperparameters):
    if hyper.optimizer == "sgd":
        return SGD(hyper.eta)
    return Adam(hyper.eta, hyper.beta1, hyper.beta2, hyper.adam_eps)


def infer_classes(labels: LabelsLike) -> int:
    if isinstance(labels, np.ndarray) and labels.ndim == 2:
        return labels.shape[1]
    ids = [c for item in labels for c in (item.positives if hasattr(item, "positives") else item)]
    if not ids:
        raise EmptyInputError("No class ids in the label annotations")
    return max(ids) + 1


def holdout_split(n: int, fraction: float, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """(train ids, holdout ids); the training part always keeps at least one point"""
    order = rng.permutation(n)
    n_hold = min(int(round(fraction * n)), n - 1)
    return np.sort(order[n_hold:]), np.sort(order[:n_hold])


def init_codebooks(V: np.ndarray, hyper: Hyperparameters, rng: np.random.Generator) -> List[Codebook]:
    if hyper.init == "random":
        scale = float(V.std()) or 1.0
        return [Codebook(rng.standard_normal((hyper.K, V.shape[1])) * scale * 0.5 ** l, l + 1)
                for l in range(hyper.L)]
    return train_residual_baseline(V, hyper.L, hyper.K, hyper.kmeans_iters, hyper.seed)


def _weighted_hard_distortion(V: np.ndarray, arrays: List[np.ndarray], w: np.ndarray,
                              metric: str) -> Tuple[float, np.ndarray]:
    indices, _, hard = hard_cascade_batch(V, arrays, metric)
    per_prefix = np.mean(np.sum((V[None] - np.cumsum(hard, axis=0)) ** 2, axis=2), axis=1)
    return float(w @ per_prefix), indices


def _least_squares_pass(V: np.ndarray, arrays: List[np.ndarray], indices: np.ndarray, w: np.ndarray) -> None:
    """One codebook at a time, the exact minimiser of sum_l w_l |V - sum_{i<=l} c_i|^2 with indices fixed"""
    L = len(arrays)
    tail = np.cumsum(w[::-1])[::-1]
    for l in range(L):
        if tail[l] <= 0:
            continue
        hard = np.stack([arrays[j][indices[j]] for j in range(L)])
        errors = V[None] - np.cumsum(hard, axis=0)[l:]
        target = hard[l] + np.tensordot(w[l:], errors, axes=1) / tail[l]
        K = arrays[l].shape[0]
        counts = np.bincount(indices[l], minlength=K)
        sums = np.zeros_like(arrays[l])
        np.add.at(sums, indices[l], target)
        used = counts > 0
        arrays[l][used] = sums[used] / counts[used, None]


def refine_codebooks(V, codebooks: List[Codebook], hyper: Hyperparameters,
                     iters: Optional[int] = None) -> Tuple[List[Codebook], float]:
    """Re-fit codebooks to V by alternating greedy encoding with least-squares updates.

    A pass is kept only when it lowers the layer-weighted hard distortion, so
    the returned value never exceeds that of the codebooks passed in.
    """
    V = as_feature_matrix(V)
    iters = hyper.refine_iters if iters is None else iters
    w = hyper.distortion_weights(len(codebooks)).w_array
    arrays = [np.array(cb.codewords, dtype=np.float64) for cb in codebooks]
    best, indices = _weighted_hard_distortion(V, arrays, w, hyper.hard_metric)
    for _ in range(iters):
        trial = [C.copy() for C in arrays]
        _least_squares_pass(V, trial, indices, w)
        value, trial_indices = _weighted_hard_distortion(V, trial, w, hyper.hard_metric)
        if not value < best:
            break
        gain = best - value
        arrays, indices, best = trial, trial_indices, value
        if gain <= REFINE_TOLERANCE * best:
            break
    return [Codebook(C, layer) for layer, C in enumerate(arrays, start=1)], best


def _copy_books(codebooks: List[Codebook]) -> List[Codebook]:
    return [Codebook(cb.codewords.copy(), cb.layer_id) for cb in codebooks]


def refit_codebooks(model: ProgressiveModel, X_train: np.ndarray, kept: List[Codebook],
                    fresh_baseline: bool = False) -> float:
    """Replace the model's codebooks by the best refined candidate on the current embedding.

    Candidates are the gradient-trained codebooks, the last kept ones and,
    when asked, a residual baseline fitted on the embedding from scratch.
    """
    hyper = model.hyper
    V = model.embed(X_train)
    candidates = [model.codebooks, kept]
    if fresh_baseline:
        candidates.append(train_residual_baseline(V, hyper.L, hyper.K, hyper.kmeans_iters, hyper.seed))
    books, value = min((refine_codebooks(V, books, hyper) for books in candidates), key=lambda item: item[1])
    model.codebooks = books
    logger.debug(f"Codebooks refitted: weighted hard distortion {value:.6g}")
    return value


def initialize_model(X: np.ndarray, Y: Optional[np.ndarray], hyper: Hyperparameters,
                     sem: Optional[SemanticLabelSet], rng: np.random.Generator) -> ProgressiveModel:
    """Head (if the variant uses one) and codebooks fitted to the projected training set"""
    D = X.shape[1]
    if not hyper.needs_head:
        hyper = replace(hyper, E=D)
        return ProgressiveModel(init_codebooks(X, hyper, rng), None, None, hyper)

    if Y is None:
        raise ConfigurationError(f"Variant '{hyper.variant}' needs labels",
                                 "Supply labels.bin or use --variant distortion_only")
    C = Y.shape[1]
    if sem is None:
        if hyper.loss_coefficients()[0]:
            logger.warning(f"No label embeddings given; using synthetic {C}x{hyper.E} unit vectors")
        sem = SemanticLabelSet.synthetic(C, hyper.E, hyper.seed)
    if sem.C != C:
        raise ConfigurationError(f"Label embeddings cover {sem.C} classes, labels use {C}")
    hyper = replace(hyper, E=sem.E)
    head = ProjectionHead.initialize(D, sem.E, C, rng, hyper.cls_tap)
    codebooks = init_codebooks(head.project(X), hyper, rng)
    return ProgressiveModel(codebooks, head, sem, hyper)


def evaluate_loss(model: ProgressiveModel, X: np.ndarray, Y: Optional[np.ndarray],
                  phase: Optional[str] = None) -> LossBreakdown:
    return loss_and_gradients(X, Y, model, phase=phase, compute_grads=False).loss


def _phase_schedule(hyper: Hyperparameters) -> List[Optional[str]]:
    if hyper.variant != "two_step":
        return [None] * hyper.epochs
    head_epochs = (hyper.epochs + 1) // 2
    return ["head"] * head_epochs + ["codebooks"] * (hyper.epochs - head_epochs)


def _trainable(model: ProgressiveModel, phase: Optional[str]) -> Dict[str, np.ndarray]:
    params = model.parameters()
    if phase == "head":
        return {k: v for k, v in params.items() if not k.startswith("codebook_")}
    if phase == "codebooks":
        return {k: v for k, v in params.items() if k.startswith("codebook_")}
    return params


def _snapshot(model: ProgressiveModel, X_eval: np.ndarray, Y_eval: Optional[np.ndarray]) -> Dict[str, float]:
    loss = evaluate_loss(model, X_eval, Y_eval)
    profile = hard_distortion_profile(model.embed(X_eval), model.codebooks, model.hyper.hard_metric)
    return {"holdout": loss.total, "hard_distortion": float(profile[-1])}


def train(X, labels: Optional[LabelsLike] = None, hyper: Optional[Hyperparameters] = None,
          sem: Optional[SemanticLabelSet] = None, progress: Optional[ProgressCallback] = None,
          model: Optional[ProgressiveModel] = None) -> ProgressiveModel:
    """Train a progressive model; deterministic for a given seed.

    history holds per-epoch training means ("total", "L_S", "L_C", "E") and
    held-out values ("holdout", "hard_distortion") with the epoch-0 value first.
    """
    hyper = hyper or Hyperparameters()
    X = as_feature_matrix(X)
    n = X.shape[0]
    if n == 0:
        raise EmptyInputError("Training set is empty")
    Y = None
    if labels is not None:
        Y = label_matrix(labels, sem.C if sem is not None else infer_classes(labels))
        if Y.shape[0] != n:
            raise ConfigurationError(f"{Y.shape[0]} label rows for {n} feature rows")

    rng = np.random.default_rng(hyper.seed)
    train_ids, hold_ids = holdout_split(n, hyper.holdout_fraction, rng)
    X_train = X[train_ids]
    Y_train = Y[train_ids] if Y is not None else None
    eval_ids = hold_ids if len(hold_ids) else train_ids
    X_eval = X[eval_ids]
    Y_eval = Y[eval_ids] if Y is not None else None

    if model is None:
        model = initialize_model(X_train, Y_train, hyper, sem, rng)
    hyper = model.hyper
    history: Dict[str, List[float]] = {key: [] for key in ("total", "L_S", "L_C", "E")}
    start = _snapshot(model, X_eval, Y_eval)
    history["holdout"] = [start["holdout"]]
    history["hard_distortion"] = [start["hard_distortion"]]
    logger.info(f"Training {hyper.variant} model: {len(train_ids)} train / {len(hold_ids)} held-out points, "
                f"L={model.L} K={model.K} dim={model.dim}; held-out loss {start['holdout']:.6g}")

    optimizer = make_optimizer(hyper)
    schedule = _phase_schedule(hyper)
    previous_phase = None
    kept = _copy_books(model.codebooks)
    for epoch, phase in enumerate(schedule, start=1):
        if phase == "codebooks" and previous_phase == "head":
            model.codebooks = init_codebooks(model.embed(X_train), hyper, rng)
            kept = _copy_books(model.codebooks)
            optimizer = make_optimizer(hyper)
            logger.info("Head trained; codebooks re-initialised on the learned projections")
        previous_phase = phase

        order = rng.permutation(len(train_ids))
        sums = np.zeros(4)
        batches = 0
        for start_idx in range(0, len(order), hyper.batch_size):
            batch = order[start_idx:start_idx + hyper.batch_size]
            result = loss_and_gradients(X_train[batch], Y_train[batch] if Y_train is not None else None,
                                        model, phase=phase)
            loss = result.loss
            if not np.isfinite(loss.total):
                raise DivergenceError(f"Loss became {loss.total} at epoch {epoch}, batch {batches + 1}",
                                      {"epoch": epoch, "batch": batches + 1, **loss.as_dict()})
            optimizer.step(_trainable(model, phase), result.grads)
            sums += (loss.total, loss.margin, loss.classification, loss.distortion)
            batches += 1

        if phase != "head" and hyper.refine_iters:
            refit_codebooks(model, X_train, kept, fresh_baseline=model.head is not None and epoch == len(schedule))
            kept = _copy_books(model.codebooks)
        means = sums / max(batches, 1)
        for key, value in zip(("total", "L_S", "L_C", "E"), means):
            history[key].append(float(value))
        snap = _snapshot(model, X_eval, Y_eval)
        if not np.isfinite(snap["holdout"]):
            raise DivergenceError(f"Held-out loss became {snap['holdout']} at epoch {epoch}", {"epoch": epoch})
        history["holdout"].append(snap["holdout"])
        history["hard_distortion"].append(snap["hard_distortion"])
        logger.info(f"epoch {epoch}/{len(schedule)} loss {means[0]:.6g} held-out {snap['holdout']:.6g} "
                    f"hard distortion {snap['hard_distortion']:.6g}" + (f" [{phase}]" if phase else ""))
        if progress:
            progress(epoch, len(schedule), {"loss": float(means[0]), **snap})

    model.history = history
    return model
