"""
Batched loss evaluation with hand-derived backpropagation, and the
central-difference oracle used to check it.

Hard-assignment indices are constants of each forward pass: the hard
losses reach the codebooks only through the selected codewords.
"""

import logging
from dataclasses import dataclass
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Tuple

import numpy as np

from .core import Codebook, as_feature_matrix
from .errors import ConfigurationError, EmptyInputError
from .model import Hyperparameters, ProgressiveModel
from .quantizer import (
    NORM_FLOOR,
    DistortionBreakdown,
    assignment_weights,
    hard_cascade_batch,
    metric_distances,
)
from .supervised import (
    LossBreakdown,
    LabelsLike,
    ProjectionHead,
    SemanticLabelSet,
    classification_losses,
    cosine_scores,
    label_matrix,
    margin_pair_mask,
)

logger = logging.getLogger(__name__)

DEFAULT_EPSILON = 1e-5
DEFAULT_TOLERANCE = 1e-4


@dataclass
class LossGradients:
    loss: LossBreakdown
    grads: Dict[str, np.ndarray]
    indices: Optional[np.ndarray] = None


def _softmax(O: np.ndarray) -> np.ndarray:
    return assignment_weights(-O, 1.0)


def _sigmoid(O: np.ndarray) -> np.ndarray:
    out = np.empty_like(O)
    pos = O >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-O[pos]))
    e = np.exp(O[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def _margin_terms(V: np.ndarray, Y: np.ndarray, sem: SemanticLabelSet) -> Tuple[np.ndarray, np.ndarray]:
    """Per-sample margin losses and their gradient w.r.t. V (unscaled)"""
    S = cosine_scores(V, sem)
    hinge = sem.delta[None] - S[:, :, None] + S[:, None, :]
    active = (hinge > 0) * margin_pair_mask(Y)
    losses = np.sum(hinge * active, axis=(1, 2))

    norms = np.linalg.norm(V, axis=1)
    degenerate = norms < NORM_FLOOR
    safe = np.where(degenerate, 1.0, norms)
    # +1 where the class is the negative of an active pair, -1 where it is the positive
    g_S = active.sum(axis=1) - active.sum(axis=2)
    U = V / safe[:, None]
    g_V = (g_S @ sem.unit - np.sum(g_S * S, axis=1, keepdims=True) * U) / safe[:, None]
    losses[degenerate] = 0.0
    g_V[degenerate] = 0.0
    return losses, g_V


def _soft_layer_backward(S: np.ndarray, C: np.ndarray, A: np.ndarray, dist: np.ndarray, g_q: np.ndarray,
                         gamma: float, metric: str) -> Tuple[np.ndarray, np.ndarray]:
    """Backprop through q = softmax(-gamma d(S, C)) @ C; returns (dL/dS, dL/dC)"""
    g_C = A.T @ g_q
    g_A = g_q @ C.T
    g_z = A * (g_A - np.sum(A * g_A, axis=1, keepdims=True))
    g_d = -gamma * g_z

    if metric == "cosine":
        s_norm = np.linalg.norm(S, axis=1)
        c_norm = np.linalg.norm(C, axis=1)
        deg_s, deg_c = s_norm < NORM_FLOOR, c_norm < NORM_FLOOR
        s_safe = np.where(deg_s, 1.0, s_norm)
        c_safe = np.where(deg_c, 1.0, c_norm)
        g_d = g_d.copy()
        g_d[deg_s] = 0.0
        g_d[:, deg_c] = 0.0
        S_hat = S / s_safe[:, None]
        C_hat = C / c_safe[:, None]
        cos = S_hat @ C_hat.T
        g_cos = -g_d
        g_S = (g_cos @ C_hat - np.sum(g_cos * cos, axis=1, keepdims=True) * S_hat) / s_safe[:, None]
        g_C += (g_cos.T @ S_hat - np.sum(g_cos * cos, axis=0)[:, None] * C_hat) / c_safe[:, None]
        return g_S, g_C

    ok = dist > NORM_FLOOR
    r = np.where(ok, g_d / np.where(ok, dist, 1.0), 0.0)
    g_S = r.sum(axis=1, keepdims=True) * S - r @ C
    g_C -= r.T @ S - r.sum(axis=0)[:, None] * C
    return g_S, g_C


def _distortion_terms(V: np.ndarray, codebooks: List[Codebook], hyper: Hyperparameters,
                      indices: Optional[np.ndarray]):
    """Forward and backward of the distortion over a batch.

    Returns (breakdown, per-sample dE/dV, per-layer dE/dC, indices), gradients
    summed over the batch rather than averaged.
    """
    wts = hyper.distortion_weights(len(codebooks))
    w = wts.w_array[:, None, None]
    Cs = [cb.codewords for cb in codebooks]
    L = len(Cs)

    if indices is None:
        indices, _, hard = hard_cascade_batch(V, Cs, hyper.hard_metric)
    else:
        indices = np.asarray(indices, dtype=np.int64)
        hard = np.stack([Cs[l][indices[l]] for l in range(L)])

    inputs, dists, weights, soft = [], [], [], []
    residual = V
    for C in Cs:
        d = metric_distances(residual, C, hyper.soft_metric)
        A = assignment_weights(d, hyper.gamma)
        q = A @ C
        inputs.append(residual)
        dists.append(d)
        weights.append(A)
        soft.append(q)
        residual = residual - q
    soft = np.stack(soft)

    R = V[None] - np.cumsum(soft, axis=0)
    RH = V[None] - np.cumsum(hard, axis=0)
    M = soft - hard
    soft_ls = np.sum(R ** 2, axis=2)
    hard_ls = np.sum(RH ** 2, axis=2)
    match_ls = np.sum(M ** 2, axis=2)
    wv = wts.w_array
    per_sample = wts.soft_weight * (wv @ soft_ls) + wts.mu * (wv @ hard_ls) + wts.nu * (wv @ match_ls)
    breakdown = DistortionBreakdown(soft_ls.mean(axis=1), hard_ls.mean(axis=1), match_ls.mean(axis=1),
                                    float(per_sample.mean()), {"per_sample": per_sample})

    wR, wRH = w * R, w * RH
    # layer i feeds every prefix loss l >= i
    suffix_R = np.cumsum(wR[::-1], axis=0)[::-1]
    suffix_RH = np.cumsum(wRH[::-1], axis=0)[::-1]
    g_q_direct = -2.0 * wts.soft_weight * suffix_R + 2.0 * wts.nu * w * M
    g_hard = -2.0 * wts.mu * suffix_RH - 2.0 * wts.nu * w * M
    g_V = 2.0 * wts.soft_weight * wR.sum(axis=0) + 2.0 * wts.mu * wRH.sum(axis=0)

    g_books = [np.zeros_like(C) for C in Cs]
    for l in range(L):
        np.add.at(g_books[l], indices[l], g_hard[l])

    g_next = np.zeros_like(V)
    for l in reversed(range(L)):
        g_q = g_q_direct[l] - g_next
        g_s, g_C = _soft_layer_backward(inputs[l], Cs[l], weights[l], dists[l], g_q, hyper.gamma, hyper.soft_metric)
        g_books[l] += g_C
        g_next = g_next + g_s
    g_V += g_next
    return breakdown, g_V, g_books, indices


def loss_and_gradients(X, labels: Optional[LabelsLike], model: ProgressiveModel,
                       hyper: Optional[Hyperparameters] = None, phase: Optional[str] = None,
                       indices: Optional[np.ndarray] = None, compute_grads: bool = True) -> LossGradients:
    """Batch-mean total loss and its gradient for every model parameter.

    `indices` (L x n) freezes the hard assignments; otherwise they are
    recomputed from the current codebooks.
    """
    hyper = hyper or model.hyper
    X = as_feature_matrix(X, model.input_dim)
    n = X.shape[0]
    if n == 0:
        raise EmptyInputError("Empty batch")
    cs, cl, ce = hyper.loss_coefficients(phase)
    head = model.head
    params = model.parameters()
    grads = {name: np.zeros_like(p) for name, p in params.items()}

    V = head.project(X) if head is not None else X
    g_V = np.zeros_like(V)
    margin = classification = 0.0

    if head is not None and labels is not None and (cs or cl):
        Y = label_matrix(labels, head.C)
        if cs:
            if model.sem is None:
                raise ConfigurationError("The margin loss needs label embeddings",
                                         "Provide label_embeddings.bin or use the 'classification' variant")
            losses, g_margin = _margin_terms(V, Y, model.sem)
            margin = float(losses.mean())
            g_V += (cs / n) * g_margin
        if cl:
            U = V if head.tap == "semantic" else X
            O = U @ head.W_cls + head.b_cls
            classification = float(classification_losses(O, Y, hyper.label_mode).mean())
            P = _softmax(O) if hyper.label_mode == "single" else _sigmoid(O)
            g_O = (cl / n) * (P - Y)
            grads["W_cls"] += U.T @ g_O
            grads["b_cls"] += g_O.sum(axis=0)
            if head.tap == "semantic":
                g_V += g_O @ head.W_cls.T

    E = 0.0
    detail = None
    if ce:
        detail, g_dist, g_books, indices = _distortion_terms(V, model.codebooks, hyper, indices)
        E = detail.total
        g_V += (ce / n) * g_dist
        for l, g in enumerate(g_books):
            grads[f"codebook_{l}"] += (ce / n) * g

    if head is not None:
        grads["W_embed"] += X.T @ g_V

    total = cs * margin + cl * classification + ce * E
    loss = LossBreakdown(total, margin, classification, E, (cs, cl, ce), detail)
    return LossGradients(loss, grads if compute_grads else {}, indices)


def analytic_gradients(X, labels: Optional[LabelsLike], model: ProgressiveModel,
                       hyper: Optional[Hyperparameters] = None, phase: Optional[str] = None) -> Dict[str, np.ndarray]:
    return loss_and_gradients(X, labels, model, hyper, phase).grads


def finite_diff_gradients(loss_evaluator: Callable[[], float], parameters,
                          epsilon: float = DEFAULT_EPSILON) -> Dict[str, np.ndarray]:
    """Central differences (f(p+eps) - f(p-eps)) / 2eps for every scalar parameter.

    `parameters` is a model or a name -> array mapping; arrays are perturbed
    in place and restored, so loss_evaluator must read them live.
    """
    if not 1e-7 <= epsilon <= 1e-3:
        raise ConfigurationError(f"epsilon {epsilon} outside [1e-7, 1e-3]")
    params: Mapping[str, np.ndarray] = parameters.parameters() if hasattr(parameters, "parameters") else parameters
    grads = {}
    for name, p in params.items():
        g = np.zeros(p.shape, dtype=np.float64)
        for i in range(p.size):
            orig = p.flat[i]
            p.flat[i] = orig + epsilon
            f_plus = loss_evaluator()
            p.flat[i] = orig - epsilon
            f_minus = loss_evaluator()
            p.flat[i] = orig
            g.flat[i] = (f_plus - f_minus) / (2.0 * epsilon)
        grads[name] = g
    return grads


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max|a - n| / max(max|a|, max|n|, 1e-8)"""
    scale = max(float(np.max(np.abs(analytic), initial=0.0)), float(np.max(np.abs(numeric), initial=0.0)), 1e-8)
    return float(np.max(np.abs(analytic - numeric), initial=0.0)) / scale


# --- gradient check suite ---

@dataclass
class GradCheckReport:
    seed: int
    errors: Dict[str, float]
    tolerance: float
    loss: float = 0.0
    attempts: int = 1

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance


@dataclass
class GradCheckInstance:
    seed: int
    X: np.ndarray
    labels: np.ndarray
    model: ProgressiveModel
    attempts: int = 1


def _well_conditioned(X: np.ndarray, Y: np.ndarray, model: ProgressiveModel, margin: float = 1e-3) -> bool:
    """No hinge, argmin or norm within `margin` of a kink"""
    V = model.embed(X)
    if np.min(np.linalg.norm(V, axis=1)) < margin:
        return False
    if model.head is not None and model.sem is not None:
        S = cosine_scores(V, model.sem)
        hinge = model.sem.delta[None] - S[:, :, None] + S[:, None, :]
        pairs = margin_pair_mask(Y) > 0
        if pairs.any() and np.min(np.abs(hinge[pairs])) < margin:
            return False
    residual = V
    hyper = model.hyper
    for cb in model.codebooks:
        C = cb.codewords
        if np.min(np.linalg.norm(C, axis=1)) < margin:
            return False
        d2 = np.sum((residual[:, None, :] - C[None]) ** 2, axis=2)
        ranked = np.sort(d2, axis=1)
        if C.shape[0] > 1 and np.min(ranked[:, 1] - ranked[:, 0]) < margin:
            return False
        if hyper.soft_metric == "euclidean" and np.min(metric_distances(residual, C, "euclidean")) < margin:
            return False
        residual = residual - C[np.argmin(d2, axis=1)]
        if np.min(np.linalg.norm(residual, axis=1)) < margin:
            return False
    return True


def make_gradcheck_instance(seed: int, D: int = 3, E: int = 3, K: int = 2, L: int = 2, C: int = 3, n: int = 2,
                            gamma: float = 20.0, label_mode: str = "single", soft_metric: str = "cosine",
                            cls_tap: str = "semantic", variant: str = "full", max_attempts: int = 50) -> GradCheckInstance:
    """Small random model and batch, redrawn until it sits away from every kink"""
    rng = np.random.default_rng(seed)
    hyper = Hyperparameters(L=L, K=K, E=E, gamma=gamma, seed=seed, label_mode=label_mode,
                            soft_metric=soft_metric, cls_tap=cls_tap, variant=variant)
    sem = SemanticLabelSet.synthetic(C, E, seed)
    for attempt in range(1, max_attempts + 1):
        tap_dim = E if cls_tap == "semantic" else D
        head = None
        if variant != "distortion_only":
            head = ProjectionHead(rng.standard_normal((D, E)) * 0.7, rng.standard_normal((tap_dim, C)) * 0.5,
                                  rng.standard_normal(C) * 0.1, cls_tap)
        codebooks = [Codebook(rng.standard_normal((K, E if head else D)) * 0.6 ** l, l + 1) for l in range(L)]
        model = ProgressiveModel(codebooks, head, sem if head else None,
                                 hyper if head else hyper.with_updates(E=D))
        X = rng.standard_normal((n, D))
        if label_mode == "single":
            Y = np.eye(C)[rng.integers(0, C, size=n)]
        else:
            Y = (rng.random((n, C)) < 0.5).astype(np.float64)
            Y[np.arange(n), rng.integers(0, C, size=n)] = 1.0
        if _well_conditioned(X, Y, model):
            return GradCheckInstance(seed, X, Y, model, attempt)
    raise ConfigurationError(f"Could not draw a well-conditioned gradient-check instance for seed {seed}")


def check_gradients(model: ProgressiveModel, X, labels: Optional[LabelsLike], hyper: Optional[Hyperparameters] = None,
                    phase: Optional[str] = None, epsilon: float = DEFAULT_EPSILON,
                    tolerance: float = DEFAULT_TOLERANCE, seed: int = 0) -> GradCheckReport:
    """Compare analytic gradients with central differences on every parameter block"""
    X = as_feature_matrix(X, model.input_dim)
    reference = loss_and_gradients(X, labels, model, hyper, phase)
    frozen = reference.indices

    def evaluate() -> float:
        return loss_and_gradients(X, labels, model, hyper, phase, indices=frozen, compute_grads=False).loss.total

    numeric = finite_diff_gradients(evaluate, model, epsilon)
    errors = {name: relative_error(reference.grads[name], numeric[name]) for name in numeric}
    report = GradCheckReport(seed, errors, tolerance, reference.loss.total)
    level = logging.DEBUG if report.passed else logging.WARNING
    logger.log(level, f"gradcheck seed={seed} max relative error {report.max_error:.3e}")
    return report


def gradcheck_suite(seeds: Iterable[int], epsilon: float = DEFAULT_EPSILON, tolerance: float = DEFAULT_TOLERANCE,
                    **instance_options) -> List[GradCheckReport]:
    reports = []
    for seed in seeds:
        inst = make_gradcheck_instance(seed, **instance_options)
        report = check_gradients(inst.model, inst.X, inst.labels, epsilon=epsilon, tolerance=tolerance, seed=seed)
        report.attempts = inst.attempts
        reports.append(report)
    return reports
