"""Classification and metric losses, their gradients, and routing rules.

Two signals drive training:

* a bias-free softmax cross-entropy, averaged over the batch;
* a batch-hard triplet loss over PK-structured batches: per anchor, the
  hinge ``[margin + max_positive_dist - min_negative_dist]_+`` with plain
  Euclidean distances, summed over all anchors.

Routing (the classification-before-metric arrangement): with the triplet
enabled, softmax supervises the non-reduced pooled globals of every branch
plus all reduced part features, while the triplet supervises the reduced
globals; local features never receive a triplet term. With the triplet
disabled, softmax moves onto the reduced globals instead.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .configs import LossConfig, ModelConfig
from .errors import ConfigError


def cross_entropy_from_logits(logits: np.ndarray, labels: np.ndarray):
    """Mean negative log-likelihood; returns (loss, dloss/dlogits)."""
    n, c = logits.shape
    if labels.min() < 0 or labels.max() >= c:
        raise ValueError(f"labels must lie in [0, {c}), got range "
                         f"[{labels.min()}, {labels.max()}]")
    shifted = logits - logits.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(shifted).sum(axis=1))
    nll = logsumexp - shifted[np.arange(n), labels]
    probs = np.exp(shifted - logsumexp[:, None])
    dlogits = probs
    dlogits[np.arange(n), labels] -= 1.0
    dlogits /= n
    return float(nll.mean()), dlogits


def softmax_loss(features: np.ndarray, labels: np.ndarray,
                 weights: np.ndarray) -> float:
    """Bias-free softmax loss of features [N,d] under class weights [C,d]."""
    loss, _, _, _ = softmax_loss_with_grads(features, labels, weights)
    return loss


def softmax_loss_with_grads(features: np.ndarray, labels: np.ndarray,
                            weights: np.ndarray):
    """Returns (loss, dfeatures, dweights, logits)."""
    labels = np.asarray(labels)
    logits = features @ weights.T
    loss, dlogits = cross_entropy_from_logits(logits, labels)
    dweights = dlogits.T @ features
    dfeatures = dlogits @ weights
    return loss, dfeatures, dweights, logits


def _pairwise_euclidean(feats: np.ndarray) -> np.ndarray:
    sq = (feats * feats).sum(axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (feats @ feats.T)
    return np.sqrt(np.maximum(d2, 0.0))


def _check_pk(labels: np.ndarray) -> None:
    uniq, counts = np.unique(labels, return_counts=True)
    if len(uniq) < 2:
        raise ValueError("triplet mining needs at least 2 identities in the batch")
    if counts.min() < 2:
        raise ValueError("triplet mining needs at least 2 images per identity")


def batch_hard_triplet(features: np.ndarray, labels: np.ndarray,
                       margin: float = 1.2) -> float:
    """Sum over anchors of [margin + hardest_pos - hardest_neg]_+."""
    loss, _ = batch_hard_triplet_with_grads(features, labels, margin)
    return loss


def batch_hard_triplet_with_grads(features: np.ndarray, labels: np.ndarray,
                                  margin: float = 1.2):
    """Returns (loss, dfeatures). Anchors with inactive hinges contribute 0."""
    labels = np.asarray(labels)
    _check_pk(labels)
    n = len(labels)
    dist = _pairwise_euclidean(features)
    same = labels[:, None] == labels[None, :]
    pos_mask = same & ~np.eye(n, dtype=bool)   # self excluded by convention
    neg_mask = ~same

    pos_d = np.where(pos_mask, dist, -np.inf)
    neg_d = np.where(neg_mask, dist, np.inf)
    hp = pos_d.argmax(axis=1)
    hn = neg_d.argmin(axis=1)
    terms = margin + dist[np.arange(n), hp] - dist[np.arange(n), hn]
    active = terms > 0
    loss = float(terms[active].sum())

    grad = np.zeros_like(features)
    for a in np.flatnonzero(active):
        for j, sign in ((hp[a], 1.0), (hn[a], -1.0)):
            d = dist[a, j]
            if d <= 0:
                continue  # coincident points: use subgradient 0
            g = sign * (features[a] - features[j]) / d
            grad[a] += g
            grad[j] -= g
    return loss, grad


@dataclass
class LossReport:
    """Total training loss plus a per-signal breakdown.

    Breakdown keys are (kind, feature_name), e.g. ("softmax", "global.z_g").
    The total is the weighted sum of all breakdown entries.
    """

    total: float
    breakdown: dict[tuple[str, str], float]
    weights: dict[str, float] = field(default_factory=dict)

    def flat(self) -> dict[str, float]:
        return {f"{kind}/{feat}": v for (kind, feat), v in self.breakdown.items()}


def routing_plan(model_config: ModelConfig, loss_config: LossConfig) -> dict:
    """Which features receive which loss, with classifier input dims."""
    softmax: list[tuple[str, int]] = []
    triplet: list[str] = []
    z_dim = model_config.spec.z_dim
    for b in model_config.branches:
        rdim = model_config.branch_reduced_dim(b)
        if loss_config.enable_triplet:
            softmax.append((f"{b.name}.z_g", z_dim))
            triplet.append(f"{b.name}.f_g")
        else:
            softmax.append((f"{b.name}.f_g", rdim))
        if b.num_parts > 1:
            softmax.extend((f"{b.name}.f_p{i}", rdim)
                           for i in range(1, b.num_parts + 1))
    return {"softmax": softmax, "triplet": triplet}


def route_losses(bundle, labels: np.ndarray, heads: dict, config: LossConfig,
                 model_config: ModelConfig, with_grads: bool = True):
    """Apply every routed loss; returns (LossReport, feature_gradients).

    Head weight gradients are accumulated in place on the heads when
    ``with_grads`` is set; feature gradients come back keyed by feature name
    for the model's backward pass.
    """
    plan = routing_plan(model_config, config)
    feats = bundle.features()
    breakdown: dict[tuple[str, str], float] = {}
    weights_used: dict[str, float] = {}
    fgrads: dict[str, np.ndarray] = {}
    total = 0.0

    def weight_of(kind: str, name: str) -> float:
        return float(config.weights.get(f"{kind}/{name}", 1.0))

    for name, _dim in plan["softmax"]:
        head = heads.get(name)
        if head is None:
            raise ConfigError(f"no classifier head for softmax feature '{name}'")
        f = feats[name]
        w = weight_of("softmax", name)
        if with_grads:
            logits = head.forward(f, train=True)
            loss, dlogits = cross_entropy_from_logits(logits, np.asarray(labels))
            df = head.backward(dlogits * w)
            fgrads[name] = fgrads.get(name, 0.0) + df
        else:
            logits = f @ head.w.value.T
            loss, _ = cross_entropy_from_logits(logits, np.asarray(labels))
        breakdown[("softmax", name)] = loss
        weights_used[f"softmax/{name}"] = w
        total += w * loss

    for name in plan["triplet"]:
        f = feats[name]
        w = weight_of("triplet", name)
        loss, df = batch_hard_triplet_with_grads(f, np.asarray(labels), config.margin)
        if with_grads:
            fgrads[name] = fgrads.get(name, 0.0) + df * w
        breakdown[("triplet", name)] = loss
        weights_used[f"triplet/{name}"] = w
        total += w * loss

    report = LossReport(total=total, breakdown=breakdown, weights=weights_used)
    return report, fgrads
