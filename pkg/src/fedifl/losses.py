"""Losses and similarity constructs for prototype contrastive learning,
adversarial feature generation and invariant/specific disentanglement.

Each loss has a value function and, where training needs it, a ``*_grad``
companion returning ``(value, gradients...)`` with hand-derived backward
passes. Batch-level reductions follow one convention: scalar per-sample
losses are averaged over the batch; pairwise matrix losses are plain sums
unless ``reduction="mean"`` is requested.
"""

from __future__ import annotations

from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass

import numpy as np

from fedifl.nn.functional import ShapeError, log_softmax, softmax

EPS = 1e-8
PROB_CLAMP = 1e-7


@dataclass
class LabeledFeatureBatch:
    features: np.ndarray
    labels: np.ndarray
    origin: str = "local"

    def __post_init__(self):
        self.labels = np.asarray(self.labels)
        if self.features.ndim != 2 or len(self.features) != len(self.labels) or len(self.labels) < 1:
            raise ShapeError(
                f"batch needs (B, d) features with B >= 1 labels, got {self.features.shape} "
                f"and {self.labels.shape}",
                self.features.shape, self.labels.shape,
            )


# ---------------------------------------------------------------- similarity

def cosine_similarity(f1, f2, eps: float = EPS) -> float:
    f1 = np.asarray(f1, dtype=float)
    f2 = np.asarray(f2, dtype=float)
    if f1.shape != f2.shape:
        raise ShapeError(f"cosine similarity of {f1.shape} and {f2.shape}", f1.shape, f2.shape)
    return float(f1 @ f2 / (np.linalg.norm(f1) * np.linalg.norm(f2) + eps))


def similarity_matrix(A, B, eps: float = EPS):
    """``SI[i, j] = cos(a_i, b_j)``. Rows of A and B may differ in count."""
    if A.ndim != 2 or B.ndim != 2 or A.shape[1] != B.shape[1]:
        raise ShapeError(f"similarity matrix of {A.shape} and {B.shape}", A.shape, B.shape)
    na = np.linalg.norm(A, axis=1)
    nb = np.linalg.norm(B, axis=1)
    return (A @ B.T) / (np.outer(na, nb) + eps)


def similarity_matrix_backward(A, B, dSI, eps: float = EPS):
    na = np.linalg.norm(A, axis=1)
    nb = np.linalg.norm(B, axis=1)
    N = A @ B.T
    D = np.outer(na, nb) + eps
    G = dSI / D
    H = dSI * N / D**2  # coefficient of d(na_i * nb_j)
    ua = np.divide(A, na[:, None], out=np.zeros_like(A), where=na[:, None] > 0)
    ub = np.divide(B, nb[:, None], out=np.zeros_like(B), where=nb[:, None] > 0)
    dA = G @ B - (H @ nb)[:, None] * ua
    dB = G.T @ A - (H.T @ na)[:, None] * ub
    return dA, dB


def label_discriminant_matrix(labels_a, labels_b):
    labels_a = np.asarray(labels_a)
    labels_b = np.asarray(labels_b)
    if labels_a.shape != labels_b.shape:
        raise ShapeError(f"label vectors differ in length: {labels_a.shape} vs {labels_b.shape}",
                         labels_a.shape, labels_b.shape)
    return (labels_a[:, None] == labels_b[None, :]).astype(float)


# ---------------------------------------------------------------- prototypes

def feature_prototypes(features, labels) -> dict:
    """Per-label mean feature; labels absent from the batch get no entry."""
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise ValueError("cannot compute prototypes of an empty batch")
    return {y: features[labels == y].mean(axis=0) for y in np.unique(labels).tolist()}


def _prototype_classes(prototypes: Mapping, label_space: Iterable) -> list:
    return sorted(c for c in set(label_space) if c in prototypes)


def structural_similarity_loss(features, labels, prototypes: Mapping, label_space) -> float:
    """Mean over samples of ``log(1 + sum_{c != y} e^{S(fp_c, f)} / e^{S(fp_y, f)})``."""
    value, _, _ = _ssim_core(features, labels, prototypes, label_space)
    return value


def _ssim_core(features, labels, prototypes, label_space):
    labels = np.asarray(labels)
    classes = _prototype_classes(prototypes, label_space)
    col = {c: i for i, c in enumerate(classes)}
    missing = sorted({y for y in labels.tolist() if y not in col})
    if missing:
        raise KeyError(f"no prototype for labels {missing}")
    P = np.stack([np.asarray(prototypes[c], dtype=features.dtype) for c in classes])
    S = similarity_matrix(features, P)
    idx = np.array([col[y] for y in labels.tolist()])
    logp = log_softmax(S, axis=1)
    value = float(-logp[np.arange(len(labels)), idx].mean())
    return value, (S, P, idx, classes), logp


def structural_similarity_grad(features, labels, label_space):
    """Loss with batch prototypes, differentiated through features and prototypes.

    Returns ``(value, d_features)``.
    """
    labels = np.asarray(labels)
    protos = feature_prototypes(features, labels)
    value, (S, P, idx, classes), logp = _ssim_core(features, labels, protos, label_space)
    B = len(labels)
    dS = np.exp(logp)
    dS[np.arange(B), idx] -= 1
    dS /= B
    dF, dP = similarity_matrix_backward(features, P, dS)
    for ci, c in enumerate(classes):
        mask = labels == c
        dF[mask] += dP[ci] / mask.sum()
    return value, dF


# ---------------------------------------------------------------- cross entropy

def _label_indices(labels, index_map: Mapping):
    try:
        return np.array([index_map[y] for y in np.asarray(labels).tolist()], dtype=np.intp)
    except KeyError as exc:
        raise KeyError(f"label {exc.args[0]!r} not in classifier index map {dict(index_map)}") from None


def cross_entropy(logits, labels, index_map: Mapping) -> float:
    idx = _label_indices(labels, index_map)
    return float(-log_softmax(logits, axis=1)[np.arange(len(idx)), idx].mean())


def cross_entropy_grad(logits, labels, index_map: Mapping):
    idx = _label_indices(labels, index_map)
    B = len(idx)
    logp = log_softmax(logits, axis=1)
    value = float(-logp[np.arange(B), idx].mean())
    d = softmax(logits, axis=1)
    d[np.arange(B), idx] -= 1
    return value, d / B


def ipcl_loss(ssim: float, ce: float) -> float:
    return ssim + ce


# ---------------------------------------------------------------- adversarial

def _clamp(p):
    p = np.asarray(p, dtype=float)
    if not np.all((p >= 0) & (p <= 1)):
        raise ValueError("identifier scores must lie in [0, 1]")
    return np.clip(p, PROB_CLAMP, 1 - PROB_CLAMP)


def adversarial_losses(real_scores, fake_scores):
    """``(L_G, L_I)`` from identifier probabilities.

    The identifier is rewarded for scoring real features high and generated
    ones low; the generator for having its features scored high.
    """
    r = _clamp(real_scores)
    f = _clamp(fake_scores)
    loss_i = -np.mean(np.log(r)) - np.mean(np.log(1 - f))
    loss_g = -np.mean(np.log(f))
    return float(loss_g), float(loss_i)


def adversarial_grads(real_scores, fake_scores):
    """Gradients w.r.t. the probabilities: ``(dLI/dreal, dLI/dfake, dLG/dfake)``.

    Zero where the clamp is active.
    """
    r = np.asarray(real_scores, dtype=float)
    f = np.asarray(fake_scores, dtype=float)
    rin = (r > PROB_CLAMP) & (r < 1 - PROB_CLAMP)
    fin = (f > PROB_CLAMP) & (f < 1 - PROB_CLAMP)
    rc, fc = _clamp(r), _clamp(f)
    d_real_i = np.where(rin, -1.0 / (len(r) * rc), 0.0)
    d_fake_i = np.where(fin, 1.0 / (len(f) * (1 - fc)), 0.0)
    d_fake_g = np.where(fin, -1.0 / (len(f) * fc), 0.0)
    return d_real_i, d_fake_i, d_fake_g


def _softplus(z):
    return np.logaddexp(0.0, z)


def adversarial_losses_from_logits(real_logits, fake_logits):
    """Same losses evaluated on pre-sigmoid identifier outputs.

    ``-log sigmoid(z) = softplus(-z)``; this keeps gradients alive when the
    identifier saturates. Returns ``(L_G, L_I, dLI/dreal, dLI/dfake, dLG/dfake)``.
    """
    zr = np.asarray(real_logits, dtype=float)
    zf = np.asarray(fake_logits, dtype=float)
    loss_i = _softplus(-zr).mean() + _softplus(zf).mean()
    loss_g = _softplus(-zf).mean()
    sr = 1.0 / (1.0 + np.exp(-np.clip(zr, -500, 500)))
    sf = 1.0 / (1.0 + np.exp(-np.clip(zf, -500, 500)))
    d_real_i = -(1 - sr) / len(zr)
    d_fake_i = sf / len(zf)
    d_fake_g = -(1 - sf) / len(zf)
    return float(loss_g), float(loss_i), d_real_i, d_fake_i, d_fake_g


def ipfg_loss(adv: float, generator_ce: float) -> float:
    return adv + generator_ce


# ---------------------------------------------------------------- cross-client indices

def _pair_inputs(A, B, labels_a, labels_b):
    if A.shape != B.shape:
        raise ShapeError(f"feature batches differ: {A.shape} vs {B.shape}", A.shape, B.shape)
    SI = similarity_matrix(A, B)
    LDM = label_discriminant_matrix(labels_a, labels_b)
    if LDM.shape != SI.shape:
        raise ShapeError(f"labels {LDM.shape} do not match features {SI.shape}", LDM.shape, SI.shape)
    return SI, LDM


def csi(A, B, labels_a, labels_b) -> float:
    """``tr((1 - SI)^T (LDM * (1 - SI)))``: same-label pairs pulled to similarity 1."""
    SI, LDM = _pair_inputs(A, B, labels_a, labels_b)
    D = 1 - SI
    return float(np.trace(D.T @ (LDM * D)))


def cdsi(A, B, labels_a, labels_b) -> float:
    """``tr(SI^T ((1 - LDM) * SI))``: different-label pairs pushed to similarity 0."""
    SI, LDM = _pair_inputs(A, B, labels_a, labels_b)
    return float(np.trace(SI.T @ ((1 - LDM) * SI)))


def csi_grad(A, B, labels_a, labels_b):
    """``(csi, dA, dB)``."""
    SI, LDM = _pair_inputs(A, B, labels_a, labels_b)
    D = 1 - SI
    dA, dB = similarity_matrix_backward(A, B, -2 * LDM * D)
    return float(np.trace(D.T @ (LDM * D))), dA, dB


def cdsi_grad(A, B, labels_a, labels_b):
    """``(cdsi, dA, dB)``."""
    SI, LDM = _pair_inputs(A, B, labels_a, labels_b)
    dA, dB = similarity_matrix_backward(A, B, 2 * (1 - LDM) * SI)
    return float(np.trace(SI.T @ ((1 - LDM) * SI))), dA, dB


def _fipl_pair(A, B, labels_a, labels_b) -> float:
    SI, LDM = _pair_inputs(A, B, labels_a, labels_b)
    return float(np.trace(SI.T @ (LDM * SI)))


def _scale(A, B, reduction):
    if reduction == "sum":
        return 1.0
    if reduction == "mean":
        return 1.0 / (len(A) * len(B))
    raise ValueError(f"unknown reduction {reduction!r}")


def _as_batches(sets) -> list[LabeledFeatureBatch]:
    return [s if isinstance(s, LabeledFeatureBatch) else LabeledFeatureBatch(*s) for s in sets]


def ficl(invariant_sets: Sequence, reduction: str = "sum") -> float:
    """Sum over ordered pairs of distinct batches of ``csi + cdsi``."""
    return ficl_grad(invariant_sets, reduction, need_grad=False)[0]


def ficl_grad(invariant_sets: Sequence, reduction: str = "sum", need_grad: bool = True):
    sets = _as_batches(invariant_sets)
    if len(sets) < 2:
        raise ValueError(f"instance consistency needs at least two batches, got {len(sets)}")
    grads = [np.zeros_like(s.features) for s in sets] if need_grad else None
    total = 0.0
    for a, A in enumerate(sets):
        for b, B in enumerate(sets):
            if a == b:
                continue
            w = _scale(A.features, B.features, reduction)
            if not need_grad:
                total += w * (csi(A.features, B.features, A.labels, B.labels)
                              + cdsi(A.features, B.features, A.labels, B.labels))
                continue
            SI, LDM = _pair_inputs(A.features, B.features, A.labels, B.labels)
            total += w * float(np.sum(LDM * (1 - SI) ** 2 + (1 - LDM) * SI**2))
            dSI = w * (-2 * LDM * (1 - SI) + 2 * (1 - LDM) * SI)
            dA, dB = similarity_matrix_backward(A.features, B.features, dSI)
            grads[a] += dA
            grads[b] += dB
    return total, grads


def fipl(invariant_sets: Sequence, specific_sets: Sequence, reduction: str = "sum") -> float:
    """Sum over all (invariant, specific) batch pairs of ``tr(SI^T (LDM * SI))``."""
    return fipl_grad(invariant_sets, specific_sets, reduction, need_grad=False)[0]


def fipl_grad(invariant_sets: Sequence, specific_sets: Sequence, reduction: str = "sum",
              need_grad: bool = True):
    inv = _as_batches(invariant_sets)
    spe = _as_batches(specific_sets)
    g_inv = [np.zeros_like(s.features) for s in inv] if need_grad else None
    g_spe = [np.zeros_like(s.features) for s in spe] if need_grad else None
    total = 0.0
    for a, A in enumerate(inv):
        for b, B in enumerate(spe):
            w = _scale(A.features, B.features, reduction)
            total += w * _fipl_pair(A.features, B.features, A.labels, B.labels)
            if need_grad:
                SI, LDM = _pair_inputs(A.features, B.features, A.labels, B.labels)
                dA, dB = similarity_matrix_backward(A.features, B.features, w * 2 * LDM * SI)
                g_inv[a] += dA
                g_spe[b] += dB
    return total, g_inv, g_spe


def orthogonal_loss(if_batch, sf_batch, form: str = "squared", reduction: str = "sum") -> float:
    """Row-wise ``dot^2 + |‖if‖ - 1| + |‖sf‖ - 1|`` (``form="raw"`` uses the plain dot)."""
    return orthogonal_loss_grad(if_batch, sf_batch, form, reduction)[0]


def orthogonal_loss_grad(if_batch, sf_batch, form: str = "squared", reduction: str = "sum"):
    if if_batch.shape != sf_batch.shape or if_batch.ndim != 2:
        raise ShapeError(f"orthogonal loss of {if_batch.shape} and {sf_batch.shape}",
                         if_batch.shape, sf_batch.shape)
    if form not in ("squared", "raw"):
        raise ValueError(f"unknown orthogonal loss form {form!r}")
    scale = {"sum": 1.0, "mean": 1.0 / len(if_batch)}.get(reduction)
    if scale is None:
        raise ValueError(f"unknown reduction {reduction!r}")
    dot = (if_batch * sf_batch).sum(axis=1)
    ni = np.linalg.norm(if_batch, axis=1)
    ns = np.linalg.norm(sf_batch, axis=1)
    dot_term = dot**2 if form == "squared" else dot
    value = scale * float((dot_term + np.abs(ni - 1) + np.abs(ns - 1)).sum())
    ddot = 2 * dot if form == "squared" else np.ones_like(dot)
    ui = np.divide(if_batch, ni[:, None], out=np.zeros_like(if_batch), where=ni[:, None] > 0)
    us = np.divide(sf_batch, ns[:, None], out=np.zeros_like(sf_batch), where=ns[:, None] > 0)
    d_if = scale * (ddot[:, None] * sf_batch + np.sign(ni - 1)[:, None] * ui)
    d_sf = scale * (ddot[:, None] * if_batch + np.sign(ns - 1)[:, None] * us)
    return value, d_if, d_sf


def cct_loss(fic: float, fip: float, orth: float, ce: float) -> float:
    return fic + fip + orth + ce
