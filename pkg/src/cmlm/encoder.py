"""Small post-layer-norm transformer encoder over the autograd tape.

Produces per-token representations H [N, d]; the first-token row is the
pooled sequence representation. PAD key positions are masked out of
attention, so PAD content can never leak into real rows. The MLM output
projection is tied to the token embedding.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor

ATTN_MASK_VALUE = -1e9


@dataclass(frozen=True)
class EncoderConfig:
    layers: int = 2
    heads: int = 4
    hidden: int = 64
    ffn: int = 256
    vocab: int = 2000
    max_len: int = 64
    dropout: float = 0.1
    ln_eps: float = 1e-5
    num_classes: int = 0  # classifier head exists only when > 0

    def __post_init__(self):
        if self.hidden % self.heads != 0:
            raise ValueError(f"hidden {self.hidden} not divisible by heads {self.heads}")
        if self.max_len < 3:
            raise ValueError(f"max_len must be >= 3, got {self.max_len}")
        if min(self.layers, self.heads, self.hidden, self.ffn, self.vocab) < 1:
            raise ValueError("all encoder dimensions must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")

    def to_dict(self) -> dict:
        return {
            "layers": self.layers, "heads": self.heads, "hidden": self.hidden,
            "ffn": self.ffn, "vocab": self.vocab, "max_len": self.max_len,
            "dropout": self.dropout, "ln_eps": self.ln_eps, "num_classes": self.num_classes,
        }

    @staticmethod
    def from_dict(d: dict) -> "EncoderConfig":
        return EncoderConfig(**d)


def param_shapes(config: EncoderConfig) -> dict[str, tuple[int, ...]]:
    """Name -> shape map, in creation order (also the checkpoint manifest order)."""
    d, f, v = config.hidden, config.ffn, config.vocab
    shapes: dict[str, tuple[int, ...]] = {
        "tok_emb": (v, d),
        "pos_emb": (config.max_len, d),
    }
    for i in range(config.layers):
        p = f"layer{i}."
        shapes[p + "attn.wq"] = (d, d)
        shapes[p + "attn.bq"] = (d,)
        # no key bias: it shifts every score in a softmax row equally, so it
        # is invisible to attention and would never receive gradient
        shapes[p + "attn.wk"] = (d, d)
        shapes[p + "attn.wv"] = (d, d)
        shapes[p + "attn.bv"] = (d,)
        shapes[p + "attn.wo"] = (d, d)
        shapes[p + "attn.bo"] = (d,)
        shapes[p + "ln1.gain"] = (d,)
        shapes[p + "ln1.bias"] = (d,)
        shapes[p + "ffn.w1"] = (d, f)
        shapes[p + "ffn.b1"] = (f,)
        shapes[p + "ffn.w2"] = (f, d)
        shapes[p + "ffn.b2"] = (d,)
        shapes[p + "ln2.gain"] = (d,)
        shapes[p + "ln2.bias"] = (d,)
    shapes["mlm.bias"] = (v,)
    shapes["predictor.w1"] = (d, d)
    shapes["predictor.w2"] = (d, d)
    if config.num_classes > 0:
        shapes["classifier.w"] = (d, config.num_classes)
        shapes["classifier.b"] = (config.num_classes,)
    return shapes


class EncoderParams:
    """Named parameter tensors plus the config they were shaped by."""

    def __init__(self, config: EncoderConfig, tensors: dict[str, Tensor]):
        self.config = config
        self.tensors = tensors

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def items(self):
        return self.tensors.items()

    def names(self) -> list[str]:
        return list(self.tensors)

    def zero_grads(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def copy(self) -> "EncoderParams":
        return EncoderParams(
            self.config,
            {n: Tensor(t.data.copy(), requires_grad=True, name=n) for n, t in self.tensors.items()},
        )

    def all_finite(self) -> bool:
        return all(np.isfinite(t.data).all() for t in self.tensors.values())


INIT_STD = 0.02


def init_params(config: EncoderConfig, rng: np.random.Generator, dtype=np.float32) -> EncoderParams:
    """Weights ~ Normal(0, 0.02); biases 0; layer-norm gain 1 / bias 0."""
    tensors: dict[str, Tensor] = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".gain"):
            data = np.ones(shape, dtype=dtype)
        elif name.endswith((".bias", ".bq", ".bk", ".bv", ".bo", ".b1", ".b2", ".b")):
            data = np.zeros(shape, dtype=dtype)
        else:
            data = rng.normal(0.0, INIT_STD, size=shape).astype(dtype)
        tensors[name] = Tensor(data, requires_grad=True, name=name)
    return EncoderParams(config, tensors)


def _linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return ag.add(ag.matmul(x, w), b)


def encode_tokens(
    params: EncoderParams,
    seq,
    train_mode: bool = False,
    rng: np.random.Generator | None = None,
    attn_out: list[np.ndarray] | None = None,
) -> Tensor:
    """Run the stack over ``seq`` (anything with .ids and .pad_mask) -> H [N, d].

    Dropout is active iff train_mode; eval mode consumes no rng. Pass a list
    as ``attn_out`` to collect each layer's attention weights [A, N, N].
    """
    cfg = params.config
    ids = np.asarray(seq.ids, dtype=np.int64)
    n = ids.shape[0]
    if n > cfg.max_len:
        raise ValueError(f"sequence length {n} exceeds max_len {cfg.max_len}")
    if np.any(ids >= cfg.vocab) or np.any(ids < 0):
        raise ValueError("token id out of vocabulary range")
    dtype = params["tok_emb"].dtype
    pad = np.asarray(seq.pad_mask, dtype=bool)
    key_mask = Tensor(np.where(pad, ATTN_MASK_VALUE, 0.0).astype(dtype))

    rate = cfg.dropout
    x = ag.add(ag.embedding_lookup(params["tok_emb"], ids), ag.embedding_lookup(params["pos_emb"], np.arange(n)))
    x = ag.dropout(x, rate, rng, train_mode)

    heads, dh = cfg.heads, cfg.hidden // cfg.heads
    inv_sqrt_dh = 1.0 / math.sqrt(dh)
    for i in range(cfg.layers):
        p = f"layer{i}."
        q = _split_heads(_linear(x, params[p + "attn.wq"], params[p + "attn.bq"]), n, heads, dh)
        k = _split_heads(ag.matmul(x, params[p + "attn.wk"]), n, heads, dh)
        v = _split_heads(_linear(x, params[p + "attn.wv"], params[p + "attn.bv"]), n, heads, dh)
        scores = ag.scale(ag.matmul(q, ag.transpose(k, (0, 2, 1))), inv_sqrt_dh)
        scores = ag.add(scores, key_mask)  # PAD keys excluded for every query
        probs = ag.softmax(scores)
        if attn_out is not None:
            attn_out.append(probs.data.copy())
        ctx = ag.reshape(ag.transpose(ag.matmul(probs, v), (1, 0, 2)), (n, cfg.hidden))
        attn = ag.dropout(_linear(ctx, params[p + "attn.wo"], params[p + "attn.bo"]), rate, rng, train_mode)
        x = ag.layer_norm(ag.add(x, attn), params[p + "ln1.gain"], params[p + "ln1.bias"], cfg.ln_eps)
        h1 = ag.gelu(_linear(x, params[p + "ffn.w1"], params[p + "ffn.b1"]))
        h2 = ag.dropout(_linear(h1, params[p + "ffn.w2"], params[p + "ffn.b2"]), rate, rng, train_mode)
        x = ag.layer_norm(ag.add(x, h2), params[p + "ln2.gain"], params[p + "ln2.bias"], cfg.ln_eps)
    return x


def _split_heads(x: Tensor, n: int, heads: int, dh: int) -> Tensor:
    return ag.transpose(ag.reshape(x, (n, heads, dh)), (1, 0, 2))


def pool_first(H: Tensor) -> Tensor:
    """Row 0 of H: the sequence-level representation."""
    if H.shape[0] < 1:
        raise ValueError("pool_first needs at least one row")
    return ag.reshape(ag.gather_rows(H, [0]), (H.shape[1],))


def mlm_projection(params: EncoderParams) -> tuple[Tensor, Tensor]:
    """The tied MLM output projection: (token embedding, vocab bias)."""
    return params["tok_emb"], params["mlm.bias"]


def classifier_logits(params: EncoderParams, h: Tensor) -> Tensor:
    """Class logits from a pooled representation [d] -> [num_classes]."""
    if params.config.num_classes <= 0:
        raise ValueError("params carry no classifier head")
    row = ag.reshape(h, (1, h.shape[0]))
    out = ag.add(ag.matmul(row, params["classifier.w"]), params["classifier.b"])
    return ag.reshape(out, (params.config.num_classes,))
