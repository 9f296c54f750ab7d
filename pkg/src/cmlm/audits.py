"""Finite-difference gradient audits for primitives, objectives, and the encoder.

Everything runs in float64 with dropout disabled (the dropout primitive
itself is audited with a frozen seed so it stays deterministic).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from . import objectives
from .autograd import Tensor, finite_diff_check
from .data import TokenSequence
from .encoder import EncoderConfig, EncoderParams, encode_tokens, init_params, mlm_projection, pool_first
from .masking import LABEL_IGNORE

PRIMITIVE_TOL = 1e-6
COMPOSITE_TOL = 1e-4
FD_STEP = 1e-5
# the deep composite amplifies gradients across ~5 orders of magnitude; a
# larger step keeps the fd noise floor (eps*|f|/2h) below the tolerance for
# the smallest genuine gradient entries without biasing the larger ones
ENCODER_FD_STEP = 1e-4


@dataclass
class AuditResult:
    name: str
    error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.error < self.tolerance


def _t(rng, *shape, positive=False) -> Tensor:
    data = rng.standard_normal(shape)
    if positive:
        data = np.abs(data) + 0.5
    return Tensor(data, requires_grad=True)


def _weighted(out: Tensor, weight: np.ndarray) -> Tensor:
    """Scalarize with a fixed weighting so every output entry matters."""
    return ag.reduce_sum(ag.mul(out, Tensor(weight)))


def audit_primitives(seed: int = 0) -> list[AuditResult]:
    rng = np.random.default_rng(seed)
    results: list[AuditResult] = []

    def check(name, f, params):
        err = finite_diff_check(f, params, FD_STEP)
        results.append(AuditResult(name, err, PRIMITIVE_TOL))

    # weightings must be drawn up front: f has to be deterministic across calls
    w23 = rng.standard_normal((2, 3))
    w34 = rng.standard_normal((3, 4))
    w24 = rng.standard_normal((2, 4))
    w234 = rng.standard_normal((2, 3, 4))
    w235 = rng.standard_normal((2, 3, 5))
    w43 = rng.standard_normal((4, 3))
    w33 = rng.standard_normal((3, 3))
    w2 = rng.standard_normal(2)
    w53 = rng.standard_normal((5, 3))
    w32 = rng.standard_normal((3, 2))

    check("add", lambda p: _weighted(ag.add(p[0], p[1]), w23), [_t(rng, 2, 3), _t(rng, 2, 3)])
    check("add_bias", lambda p: _weighted(ag.add(p[0], p[1]), w23), [_t(rng, 2, 3), _t(rng, 3)])
    check("mul", lambda p: _weighted(ag.mul(p[0], p[1]), w23), [_t(rng, 2, 3), _t(rng, 2, 3)])
    check("scale", lambda p: _weighted(ag.scale(p[0], -1.7), w23), [_t(rng, 2, 3)])
    check("matmul", lambda p: _weighted(ag.matmul(p[0], p[1]), w24), [_t(rng, 2, 3), _t(rng, 3, 4)])
    check(
        "matmul_batched",
        lambda p: _weighted(ag.matmul(p[0], p[1]), w235),
        [_t(rng, 2, 3, 4), _t(rng, 2, 4, 5)],
    )
    check("exp", lambda p: _weighted(ag.exp(p[0]), w23), [_t(rng, 2, 3)])
    check("log", lambda p: _weighted(ag.log(p[0]), w23), [_t(rng, 2, 3, positive=True)])
    check("softmax", lambda p: _weighted(ag.softmax(p[0]), w23), [_t(rng, 2, 3)])
    check("gelu", lambda p: _weighted(ag.gelu(p[0]), w23), [_t(rng, 2, 3)])
    check(
        "layer_norm",
        lambda p: _weighted(ag.layer_norm(p[0], p[1], p[2], 1e-5), w23),
        [_t(rng, 2, 3), _t(rng, 3), _t(rng, 3)],
    )

    def dropout_f(p):
        frozen = np.random.default_rng(123)
        return _weighted(ag.dropout(p[0], 0.4, frozen, train=True), w34)

    check("dropout", dropout_f, [_t(rng, 3, 4)])

    ids = np.array([0, 2, 2, 4])
    check("embedding_lookup", lambda p: _weighted(ag.embedding_lookup(p[0], ids), w43), [_t(rng, 5, 3)])
    check("gather_rows", lambda p: _weighted(ag.gather_rows(p[0], [1, 1, 3]), w33), [_t(rng, 4, 3)])
    targets = np.array([1, 3])
    check("cross_entropy", lambda p: ag.mean(ag.cross_entropy(p[0], targets)), [_t(rng, 2, 4)])
    check("l2_normalize", lambda p: _weighted(ag.l2_normalize(p[0]), w23), [_t(rng, 2, 3)])
    check("mean", lambda p: ag.mean(p[0]), [_t(rng, 2, 3)])
    check("reduce_sum", lambda p: ag.reduce_sum(p[0]), [_t(rng, 2, 3)])
    check("reduce_sum_axis", lambda p: _weighted(ag.reduce_sum(p[0], axis=-1), w2), [_t(rng, 2, 3)])
    check("concat", lambda p: _weighted(ag.concat([p[0], p[1]], axis=0), w53), [_t(rng, 2, 3), _t(rng, 3, 3)])
    check("reshape", lambda p: _weighted(ag.reshape(p[0], (3, 2)), w32), [_t(rng, 2, 3)])
    check("transpose", lambda p: _weighted(ag.transpose(p[0], (1, 0, 2)), w234), [_t(rng, 3, 2, 4)])
    return results


def _small_views(rng, B=2, K=1, d=8) -> objectives.ContrastiveBatch:
    return objectives.ContrastiveBatch([_t(rng, B, d) for _ in range(K + 1)])


def audit_objectives(seed: int = 0) -> list[AuditResult]:
    rng = np.random.default_rng(seed)
    results: list[AuditResult] = []
    B, d, V, N = 2, 8, 32, 6

    def check(name, f, params):
        err = finite_diff_check(f, params, FD_STEP)
        results.append(AuditResult(name, err, COMPOSITE_TOL))

    labels = []
    for _ in range(B):
        lab = np.full(N, LABEL_IGNORE, dtype=np.int64)
        sel = rng.choice(N, size=2, replace=False)
        lab[sel] = rng.integers(0, V, size=2)
        labels.append(lab)

    def mlm_f(p):
        H0s = [p[0], p[1]]
        return objectives.mlm_loss(H0s, labels, (p[2], p[3]))

    check("mlm_loss", mlm_f, [_t(rng, N, d), _t(rng, N, d), _t(rng, V, d), _t(rng, V)])

    check("cosine_sim", lambda p: objectives.cosine_sim(p[0], p[1]), [_t(rng, d), _t(rng, d)])

    def simclr_f(p):
        return objectives.simclr_loss(objectives.ContrastiveBatch([p[0], p[1]]), tau=0.1)

    check("simclr_loss", simclr_f, [_t(rng, B, d), _t(rng, B, d)])

    # simsiam view tensors reach the loss both through the predictor and
    # through stop_gradient; a finite-difference probe of the views would see
    # the stopped branch, so the predictor weights are audited on the real
    # loss and the view path on an equivalent loss with explicitly frozen
    # targets (stop_gradient == constant target at the evaluation point).
    h0, hk = _t(rng, B, d), _t(rng, B, d)

    def simsiam_predictor_f(p):
        return objectives.simsiam_loss(objectives.ContrastiveBatch([h0, hk]), p[0], p[1])

    check("simsiam_loss_predictor", simsiam_predictor_f, [_t(rng, d, d), _t(rng, d, d)])

    w1f, w2f = Tensor(rng.standard_normal((d, d))), Tensor(rng.standard_normal((d, d)))
    t0 = Tensor(h0.data.copy())
    tk = Tensor(hk.data.copy())

    def simsiam_views_f(p):
        z0 = ag.matmul(ag.gelu(ag.matmul(p[0], w1f)), w2f)
        zk = ag.matmul(ag.gelu(ag.matmul(p[1], w1f)), w2f)
        d1 = ag.reduce_sum(ag.mul(ag.l2_normalize(zk), ag.l2_normalize(t0)), axis=-1)
        d2 = ag.reduce_sum(ag.mul(ag.l2_normalize(z0), ag.l2_normalize(tk)), axis=-1)
        return ag.mean(ag.exp(ag.scale(ag.add(d1, d2), -0.5)))

    check("simsiam_loss_views", simsiam_views_f, [h0, hk])

    def cmlm_f(variant, views):
        def f(p):
            batch = objectives.ContrastiveBatch(views if views else [p[4], p[5]])
            predictor = (p[4], p[5]) if views else (None, None)
            bd = objectives.cmlm_loss(
                [p[0], p[1]], labels, (p[2], p[3]), batch, 0.5, variant, 0.1, predictor
            )
            return bd.total

        return f

    def shared_params():
        return [_t(rng, N, d), _t(rng, N, d), _t(rng, V, d), _t(rng, V)]

    # simsiam variant: views constant, perturb mlm inputs + predictor weights
    check(
        "cmlm_loss_simsiam",
        cmlm_f("simsiam", [Tensor(rng.standard_normal((B, d))) for _ in range(2)]),
        shared_params() + [_t(rng, d, d), _t(rng, d, d)],
    )
    check("cmlm_loss_simclr", cmlm_f("simclr", None), shared_params() + [_t(rng, B, d), _t(rng, B, d)])

    def cssl_f(p):
        batch = objectives.ContrastiveBatch([p[0], p[1]])
        return objectives.cssl_loss(batch, "simclr", 0.1, (None, None))

    check("cssl_loss", cssl_f, [_t(rng, B, d), _t(rng, B, d)])
    return results


AUDIT_ENCODER_CONFIG = EncoderConfig(
    layers=2, heads=2, hidden=8, ffn=16, vocab=32, max_len=6, dropout=0.0, ln_eps=1e-5
)


def _randomized_params(cfg: EncoderConfig, rng) -> EncoderParams:
    """Fully randomized weights for audits.

    At the training init (gain exactly 1, bias 0) a layer-norm output has a
    near-constant squared norm, so upstream gradients vanish and the
    finite-difference probe measures only noise. Random parameters make the
    probe well-conditioned without changing what is being differentiated.
    """
    params = init_params(cfg, rng, dtype=np.float64)
    for t in params.tensors.values():
        t.data = rng.standard_normal(t.shape) * 0.5
    return params


def audit_encoder(seed: int = 0) -> list[AuditResult]:
    """Scalar loss encode -> pool_first -> squared norm, checked on every parameter."""
    rng = np.random.default_rng(seed)
    cfg = AUDIT_ENCODER_CONFIG
    params = _randomized_params(cfg, rng)
    n = cfg.max_len
    ids = np.concatenate([[0], rng.integers(5, cfg.vocab, size=n - 2), [3]])  # BOS ... PAD
    maskable = np.zeros(n, dtype=bool)
    maskable[1 : n - 1] = True
    seq = TokenSequence(ids, maskable)

    names = params.names()
    tensors = [params[n_] for n_ in names]

    def f(_):
        h = pool_first(encode_tokens(params, seq, train_mode=False))
        return ag.reduce_sum(ag.mul(h, h))

    err = finite_diff_check(f, tensors, ENCODER_FD_STEP)
    return [AuditResult("encoder_pool_sqnorm", err, COMPOSITE_TOL)]


def audit_mlm_through_encoder(seed: int = 0) -> list[AuditResult]:
    """MLM loss through the full encoder with the tied projection."""
    rng = np.random.default_rng(seed)
    cfg = AUDIT_ENCODER_CONFIG
    params = _randomized_params(cfg, rng)
    n = cfg.max_len
    ids = np.concatenate([[0], rng.integers(5, cfg.vocab, size=n - 1)])
    maskable = np.zeros(n, dtype=bool)
    maskable[1:] = True
    seq = TokenSequence(ids, maskable)
    labels = np.full(n, LABEL_IGNORE, dtype=np.int64)
    labels[[1, 3]] = ids[[1, 3]]

    tensors = [params[n_] for n_ in params.names()]

    def f(_):
        H = encode_tokens(params, seq, train_mode=False)
        return objectives.mlm_loss([H], [labels], mlm_projection(params))

    err = finite_diff_check(f, tensors, ENCODER_FD_STEP)
    return [AuditResult("encoder_mlm_tied", err, COMPOSITE_TOL)]


SCOPES = ("primitives", "objectives", "encoder")


def run_audits(scope: str, seed: int = 0) -> list[AuditResult]:
    if scope == "primitives":
        return audit_primitives(seed)
    if scope == "objectives":
        return audit_objectives(seed)
    if scope == "encoder":
        return audit_encoder(seed) + audit_mlm_through_encoder(seed)
    raise ValueError(f"unknown audit scope: {scope!r} (choose from {SCOPES})")
