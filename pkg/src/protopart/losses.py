"""Objective terms and their analytic gradients.

Every term is a plain function of arrays so it can be checked against
brute-force oracles and central finite differences. Gradients are returned
alongside values by the *_grads variants; the trainer chains them through
the embedding backward pass.

Distances throughout are plain L2 norms between latent patches and
prototype vectors (not squared).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import ConfigurationError, ValidationError
from .model import similarity_from_distance, similarity_distance_factor

TERM_NAMES = ("cross_entropy", "cluster", "separation", "mask", "remembering", "l1_offclass")


@dataclass
class LossWeights:
    lambda1: float = 0.8      # cluster
    lambda2: float = 0.08     # separation
    lambda3: float = 0.001    # mask
    lambda4: float = 0.02     # remembering
    lambda5: float = 1e-4     # off-class L1 in the last-layer objective
    kappa: int | None = None  # mink size in cluster/separation; None -> model top_k
    separation_floor: float = -1e3
    class_weights: list | None = None

    def validate(self) -> None:
        for name in ("lambda1", "lambda2", "lambda3", "lambda4", "lambda5"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be non-negative")
        if self.kappa is not None and self.kappa < 1:
            raise ConfigurationError("kappa must be >= 1")

    def resolve_kappa(self, top_k: int) -> int:
        return top_k if self.kappa is None else self.kappa


@dataclass
class LossReport:
    total: float
    terms: dict
    active: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "total": self.total,
            "terms": {k: float(v) for k, v in self.terms.items()},
            "active": dict(self.active),
        }


# ---------------------------------------------------------------------------
# cross-entropy
# ---------------------------------------------------------------------------


def _check_labels(labels: np.ndarray, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValidationError(f"label out of range [0, {num_classes})")
    return labels


def cross_entropy(logits: np.ndarray, labels, class_weights=None) -> float:
    value, _ = cross_entropy_grads(logits, labels, class_weights)
    return value


def cross_entropy_grads(logits: np.ndarray, labels, class_weights=None):
    """Softmax cross-entropy (mean over the batch) and d/dlogits."""
    logits = np.atleast_2d(np.asarray(logits, dtype=float))
    labels = np.atleast_1d(np.asarray(labels, dtype=int))
    n, k = logits.shape
    _check_labels(labels, k)
    shifted = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    per_image = lse - shifted[np.arange(n), labels]
    softmax = np.exp(shifted - lse[:, None])
    onehot = np.zeros_like(logits)
    onehot[np.arange(n), labels] = 1.0
    if class_weights is not None:
        w = np.asarray(class_weights, dtype=float)[labels]
        denom = w.sum()
        value = float((w * per_image).sum() / denom)
        grad = (softmax - onehot) * (w / denom)[:, None]
    else:
        value = float(per_image.mean())
        grad = (softmax - onehot) / n
    return value, grad


def inverse_frequency_weights(labels, num_classes: int) -> np.ndarray:
    counts = np.bincount(np.asarray(labels, dtype=int), minlength=num_classes)
    if (counts == 0).any():
        raise ConfigurationError("inverse-frequency weights need every class present")
    w = counts.sum() / (num_classes * counts)
    return w


# ---------------------------------------------------------------------------
# cluster / separation (shared mink machinery)
# ---------------------------------------------------------------------------


def _mink_means(dist: np.ndarray, kappa: int):
    """Mean of the kappa smallest patch distances per (image, prototype)."""
    n, m, hz, wz = dist.shape
    if not 1 <= kappa <= hz * wz:
        raise ConfigurationError(f"kappa must lie in [1, {hz * wz}], got {kappa}")
    flat = dist.reshape(n, m, hz * wz)
    idx = np.argpartition(flat, kappa - 1, axis=2)[:, :, :kappa]
    vals = np.take_along_axis(flat, idx, axis=2)
    return vals.mean(axis=2), idx


def _class_min_selection(mink: np.ndarray, labels, proto_classes, same_class: bool):
    """Per image, the best prototype among (non-)matching classes."""
    n, m = mink.shape
    labels = np.asarray(labels)
    match = proto_classes[None, :] == labels[:, None]
    if not same_class:
        match = ~match
    if not match.any(axis=1).all():
        side = "same-class" if same_class else "other-class"
        raise ConfigurationError(f"every image needs at least one {side} prototype")
    masked = np.where(match, mink, np.inf)
    best_j = masked.argmin(axis=1)
    return best_j, masked[np.arange(n), best_j]


def cluster_loss(z, protos, labels, proto_classes, kappa) -> float:
    dist = kernels.distance_maps(np.asarray(z, dtype=float), np.asarray(protos, dtype=float))
    value, _ = cluster_from_dist(dist, labels, proto_classes, kappa)
    return value


def cluster_from_dist(dist, labels, proto_classes, kappa):
    mink, idx = _mink_means(dist, kappa)
    best_j, best_val = _class_min_selection(mink, labels, proto_classes, same_class=True)
    return float(best_val.mean()), (best_j, idx)


def separation_loss(z, protos, labels, proto_classes, kappa) -> float:
    dist = kernels.distance_maps(np.asarray(z, dtype=float), np.asarray(protos, dtype=float))
    value, _ = separation_from_dist(dist, labels, proto_classes, kappa)
    return value


def separation_from_dist(dist, labels, proto_classes, kappa):
    mink, idx = _mink_means(dist, kappa)
    best_j, best_val = _class_min_selection(mink, labels, proto_classes, same_class=False)
    return float(-best_val.mean()), (best_j, idx)


def _mink_dist_grad(dist_shape, selection, kappa: int, sign: float) -> np.ndarray:
    """Scatter d(loss)/d(dist) for the selected prototype/patch sets."""
    n, m, hz, wz = dist_shape
    best_j, idx = selection
    gd = np.zeros((n, m, hz * wz))
    rows = np.arange(n)
    chosen = idx[rows, best_j]  # (n, kappa) flat patch indices of the winning prototype
    gd[rows[:, None], best_j[:, None], chosen] = sign / (n * kappa)
    return gd.reshape(dist_shape)


def cluster_grads(z, protos, labels, proto_classes, kappa):
    """Value plus gradients w.r.t. latent maps and prototypes."""
    z = np.asarray(z, dtype=float)
    protos = np.asarray(protos, dtype=float)
    dist = kernels.distance_maps(z, protos)
    value, selection = cluster_from_dist(dist, labels, proto_classes, kappa)
    gd = _mink_dist_grad(dist.shape, selection, kappa, 1.0)
    gz, gp = kernels.distance_maps_backward(z, protos, dist, gd)
    return value, gz, gp


def separation_grads(z, protos, labels, proto_classes, kappa):
    z = np.asarray(z, dtype=float)
    protos = np.asarray(protos, dtype=float)
    dist = kernels.distance_maps(z, protos)
    value, selection = separation_from_dist(dist, labels, proto_classes, kappa)
    gd = _mink_dist_grad(dist.shape, selection, kappa, -1.0)
    gz, gp = kernels.distance_maps_backward(z, protos, dist, gd)
    return value, gz, gp


# ---------------------------------------------------------------------------
# mask loss
# ---------------------------------------------------------------------------


def check_binary_mask(mask: np.ndarray, name: str = "mask") -> np.ndarray:
    mask = np.asarray(mask, dtype=float)
    if not np.isin(mask, (0.0, 1.0)).all():
        raise ValidationError(f"{name} is not binary (values outside {{0, 1}})")
    return mask


def mask_loss(pams, masks, proto_classes, labels) -> float:
    """Mean over images of sum_j ||M_i * PAM_ij||_2 over same-class prototypes."""
    value, _ = mask_loss_grads(pams, masks, proto_classes, labels)
    return value


def mask_loss_grads(pams, masks, proto_classes, labels):
    pams = np.asarray(pams, dtype=float)
    n, m = pams.shape[0], pams.shape[1]
    labels = np.asarray(labels)
    masks = np.stack([check_binary_mask(mk, f"mask[{i}]") for i, mk in enumerate(masks)])
    match = (proto_classes[None, :] == labels[:, None]).astype(float)  # (n, m)
    prod = masks[:, None, :, :] * pams
    norms = np.sqrt((prod * prod).sum(axis=(2, 3)))  # (n, m)
    value = float((norms * match).sum() / n)
    # d||M*PAM||/dPAM = M^2*PAM / ||M*PAM||; zero subgradient where the norm is 0
    safe = np.where(norms > 0.0, norms, 1.0)
    gpam = masks[:, None, :, :] * prod * (match / (n * safe))[:, :, None, None]
    return value, gpam


# ---------------------------------------------------------------------------
# remembering loss
# ---------------------------------------------------------------------------


def remembering_loss(valid_embeds, valid_classes, protos, proto_classes, epsilon) -> float:
    value, _, _ = remembering_grads(valid_embeds, valid_classes, protos, proto_classes, epsilon)
    return value


def remembering_grads(valid_embeds, valid_classes, protos, proto_classes, epsilon):
    """Negated mean similarity between valid patches and same-class prototypes.

    Returns (value, d/d valid_embeds, d/d protos).
    """
    v = np.atleast_2d(np.asarray(valid_embeds, dtype=float))
    protos = np.asarray(protos, dtype=float)
    valid_classes = np.asarray(valid_classes)
    n_rp = v.shape[0]
    if n_rp < 1:
        raise ConfigurationError("remembering loss needs a non-empty valid set")
    match = (valid_classes[:, None] == proto_classes[None, :]).astype(float)
    if not match.any(axis=1).all():
        raise ConfigurationError("every valid patch needs at least one same-class prototype")
    diff = v[:, None, :] - protos[None, :, :]
    dist = np.sqrt((diff * diff).sum(axis=2))
    sims = similarity_from_distance(dist, epsilon)
    value = float(-(sims * match).sum() / n_rp)
    factor = -match * similarity_distance_factor(dist, epsilon) / n_rp
    coef = np.where(dist > 1e-12, factor / np.maximum(dist, 1e-12), 0.0)
    gv = (coef[:, :, None] * diff).sum(axis=1)
    gp = -(coef[:, :, None] * diff).sum(axis=0)
    return value, gv, gp


# ---------------------------------------------------------------------------
# off-class L1 (last-layer sparsity)
# ---------------------------------------------------------------------------


def offclass_mask(num_classes: int, proto_classes) -> np.ndarray:
    classes = np.arange(num_classes)
    return (classes[:, None] != np.asarray(proto_classes)[None, :]).astype(float)


def l1_offclass(head_w: np.ndarray, proto_classes) -> float:
    value, _ = l1_offclass_grads(head_w, proto_classes)
    return value


def l1_offclass_grads(head_w: np.ndarray, proto_classes):
    head_w = np.asarray(head_w, dtype=float)
    mask = offclass_mask(head_w.shape[0], proto_classes)
    value = float(np.abs(head_w * mask).sum())
    return value, mask * np.sign(head_w)


# ---------------------------------------------------------------------------
# assembled objective
# ---------------------------------------------------------------------------

MODES = ("lp", "lp+lm", "lp+lr")


def active_terms(mode: str, last_layer: bool = False) -> dict:
    """Which terms contribute to the total, with their weights' names."""
    if last_layer:
        return {"cross_entropy": 1.0, "l1_offclass": "lambda5"}
    if mode not in MODES:
        raise ConfigurationError(f"unknown mode {mode!r}; expected one of {MODES}")
    terms = {"cross_entropy": 1.0, "cluster": "lambda1", "separation": "lambda2"}
    if mode == "lp+lm":
        terms["mask"] = "lambda3"
    elif mode == "lp+lr":
        terms["remembering"] = "lambda4"
    return terms


def term_weight(weights: LossWeights, spec) -> float:
    return spec if isinstance(spec, float) else getattr(weights, spec)


def build_report(term_values: dict, weights: LossWeights, mode: str,
                 last_layer: bool = False) -> LossReport:
    """Assemble the weighted total from the computed per-term values."""
    active = active_terms(mode, last_layer)
    missing = [name for name in active if name not in term_values]
    if missing:
        raise ConfigurationError(f"mode {mode!r} requires terms {missing} but they were not computed")
    total = 0.0
    for name, spec in active.items():
        total += term_weight(weights, spec) * term_values[name]
    terms = {k: float(v) for k, v in term_values.items()}
    return LossReport(float(total), terms, {k: term_weight(weights, v) for k, v in active.items()})


def total_objective(model, images, labels, weights: LossWeights, mode: str,
                    masks=None, valid_embeds=None, valid_classes=None) -> LossReport:
    """Forward-only evaluation of the full training objective for one batch.

    The trainer recomputes the same quantities with gradients attached; this
    is the module-level contract (and the oracle target for composition
    tests). Mode-required inputs must be present.
    """
    from .model import batched_topk, similarity_from_distance, scale_up

    weights.validate()
    labels = np.asarray(labels)
    kappa = weights.resolve_kappa(model.config.top_k)
    protos = model.params["protos"]
    proto_classes = model.proto_classes
    z = model.embed(np.asarray(images, dtype=float))
    dist = kernels.distance_maps(z, protos)
    sims = similarity_from_distance(dist, model.config.epsilon)
    simvec, _ = batched_topk(sims, model.config.top_k)
    logits = model.logits_from_simvec(simvec)

    terms = {"cross_entropy": cross_entropy(logits, labels)}
    terms["cluster"], _ = cluster_from_dist(dist, labels, proto_classes, kappa)
    sep, _ = separation_from_dist(dist, labels, proto_classes, kappa)
    terms["separation"] = max(sep, weights.separation_floor)
    if mode == "lp+lm":
        if masks is None:
            raise ConfigurationError("mode lp+lm requires masks")
        size = model.config.image_size
        pams = scale_up(sims, size, size)
        terms["mask"] = mask_loss(pams, masks, proto_classes, labels)
    elif mode == "lp+lr":
        if valid_embeds is None or valid_classes is None:
            raise ConfigurationError("mode lp+lr requires valid-patch embeddings")
        terms["remembering"] = remembering_loss(valid_embeds, valid_classes, protos,
                                                proto_classes, model.config.epsilon)
    terms["l1_offclass"] = l1_offclass(model.params["head_w"], proto_classes)
    return build_report(terms, weights, mode)
