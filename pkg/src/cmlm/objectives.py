"""Loss functions: MLM, SimCLR, SimSiam, the combined objective, and CSSL.

The SimCLR softmax runs over the K+1... strictly: for each anchor h_b^0 the
denominator sums exp(sim(h_i^k, h_b^0)/tau) over the B view-k representations,
positive included. SimSiam is the negative-free variant with a two-layer
gelu predictor (no biases) and stop-gradient on the target branch; its
per-pair value exp(-(D1+D2)/2) lies in [1/e, e].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .masking import LABEL_IGNORE

CL_VARIANTS = ("simsiam", "simclr")


@dataclass
class ContrastiveBatch:
    """Pooled representations per view: views[k] is [B, d], k in 0..K."""

    views: list[Tensor]

    def __post_init__(self):
        if len(self.views) < 2:
            raise ValueError("need the anchor view plus at least one contrast view (K >= 1)")
        shape = self.views[0].shape
        if len(shape) != 2 or shape[0] < 1:
            raise ValueError(f"views must be [B, d] with B >= 1, got {shape}")
        for v in self.views:
            if v.shape != shape:
                raise ValueError(f"view shape mismatch: {v.shape} vs {shape}")
            if not np.isfinite(v.data).all():
                raise ValueError("non-finite representation in contrastive batch")

    @property
    def B(self) -> int:
        return self.views[0].shape[0]

    @property
    def K(self) -> int:
        return len(self.views) - 1


@dataclass
class LossBreakdown:
    mlm: Tensor
    cl: Tensor
    total: Tensor
    alpha: float


def mlm_loss(
    H0_batch: list[Tensor],
    labels_batch: list[np.ndarray],
    output_projection: tuple[Tensor, Tensor],
) -> Tensor:
    """Cross-entropy at selected positions, averaged per sequence then per batch.

    Sequences with no selected positions are skipped; if every sequence is
    empty the caller must re-mask, so that is an error.
    """
    emb, bias = output_projection
    proj = ag.transpose(emb)  # [d, V], shared across sequences
    per_seq: list[Tensor] = []
    for H, labels in zip(H0_batch, labels_batch):
        labels = np.asarray(labels)
        positions = np.flatnonzero(labels != LABEL_IGNORE)
        if positions.size == 0:
            continue
        rows = ag.gather_rows(H, positions)
        logits = ag.add(ag.matmul(rows, proj), bias)
        ce = ag.cross_entropy(logits, labels[positions])
        per_seq.append(ag.reshape(ag.mean(ce), (1,)))
    if not per_seq:
        raise ValueError("no selected positions in the batch; re-mask and retry")
    return ag.mean(ag.concat(per_seq))


def cosine_sim(u: Tensor, v: Tensor) -> Tensor:
    """Normalized dot product of two vectors; zero vectors are an error."""
    if u.shape != v.shape or len(u.shape) != 1:
        raise ValueError(f"cosine_sim wants two equal-length vectors, got {u.shape} vs {v.shape}")
    return ag.reduce_sum(ag.mul(ag.l2_normalize(u), ag.l2_normalize(v)))


def _rowwise_cosine(a: Tensor, b: Tensor) -> Tensor:
    """Cosine per row of two [B, d] matrices -> [B]."""
    return ag.reduce_sum(ag.mul(ag.l2_normalize(a), ag.l2_normalize(b)), axis=-1)


def simclr_loss(batch: ContrastiveBatch, tau: float) -> Tensor:
    """Temperature-scaled softmax over in-batch view-k candidates per anchor.

    For each k and anchor b: -log softmax_i(sim(h_i^k, h_b^0)/tau) at i = b,
    averaged over the K*B terms. Zero when B == 1.
    """
    if tau <= 0:
        raise ValueError(f"tau must be positive, got {tau}")
    b = batch.B
    anchor = ag.l2_normalize(batch.views[0])
    targets = np.arange(b)
    per_view: list[Tensor] = []
    for k in range(1, len(batch.views)):
        cand = ag.l2_normalize(batch.views[k])
        # row b of (anchor @ cand^T) holds sim(h_i^k, h_b^0) over candidates i
        logits = ag.scale(ag.matmul(anchor, ag.transpose(cand)), 1.0 / tau)
        if not np.isfinite(logits.data).all():
            raise FloatingPointError("non-finite similarity in simclr_loss")
        per_view.append(ag.reshape(ag.mean(ag.cross_entropy(logits, targets)), (1,)))
    return ag.mean(ag.concat(per_view))


def _predict(h: Tensor, w1: Tensor, w2: Tensor) -> Tensor:
    return ag.matmul(ag.gelu(ag.matmul(h, w1)), w2)


def simsiam_loss(batch: ContrastiveBatch, w1: Tensor, w2: Tensor) -> Tensor:
    """Negative-free loss exp(-(D(z^k,h^0)+D(z^0,h^k))/2) averaged over pairs.

    z = W2 gelu(W1 h) and D(z, h) = cosine(z, stop_gradient(h)); the
    stop-gradient keeps the target branch out of the backward pass.
    """
    anchor = batch.views[0]
    z0 = _predict(anchor, w1, w2)
    per_view: list[Tensor] = []
    for k in range(1, len(batch.views)):
        hk = batch.views[k]
        zk = _predict(hk, w1, w2)
        d1 = _rowwise_cosine(zk, ag.stop_gradient(anchor))
        d2 = _rowwise_cosine(z0, ag.stop_gradient(hk))
        pair = ag.exp(ag.scale(ag.add(d1, d2), -0.5))
        per_view.append(ag.reshape(ag.mean(pair), (1,)))
    return ag.mean(ag.concat(per_view))


def contrastive_loss(
    batch: ContrastiveBatch, variant: str, tau: float, predictor: tuple[Tensor, Tensor]
) -> Tensor:
    if variant == "simclr":
        return simclr_loss(batch, tau)
    if variant == "simsiam":
        return simsiam_loss(batch, predictor[0], predictor[1])
    raise ValueError(f"unknown contrastive variant: {variant!r} (choose from {CL_VARIANTS})")


def cmlm_loss(
    H0_batch: list[Tensor],
    labels_batch: list[np.ndarray],
    output_projection: tuple[Tensor, Tensor],
    batch: ContrastiveBatch,
    alpha: float,
    variant: str,
    tau: float,
    predictor: tuple[Tensor, Tensor],
) -> LossBreakdown:
    """Combined objective: total = mlm + alpha * cl. Alpha 0 reduces to pure MLM."""
    if alpha < 0:
        raise ValueError(f"alpha must be >= 0, got {alpha}")
    mlm = mlm_loss(H0_batch, labels_batch, output_projection)
    cl = contrastive_loss(batch, variant, tau, predictor)
    total = ag.add(mlm, ag.scale(cl, alpha))
    return LossBreakdown(mlm=mlm, cl=cl, total=total, alpha=alpha)


def cssl_loss(
    batch: ContrastiveBatch, variant: str, tau: float, predictor: tuple[Tensor, Tensor]
) -> Tensor:
    """Sequence-level contrastive loss alone over augmenter view pairs."""
    if batch.K != 1:
        raise ValueError(f"cssl expects exactly 2 views per sequence, got {batch.K + 1}")
    return contrastive_loss(batch, variant, tau, predictor)
