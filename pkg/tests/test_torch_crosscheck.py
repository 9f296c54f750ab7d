"""Optional third-route oracle: agreement with an independent torch build.

The package itself never imports torch; these tests re-derive the encoder
forward and the contrastive losses in torch and demand machine-epsilon
agreement. They skip cleanly where torch is not installed.
"""

import numpy as np
import pytest

torch = pytest.importorskip("torch")
import torch.nn.functional as F  # noqa: E402

from cmlm.autograd import Tape, Tensor  # noqa: E402
from cmlm.data import TokenSequence  # noqa: E402
from cmlm.encoder import EncoderConfig, encode_tokens, init_params  # noqa: E402
from cmlm.objectives import ContrastiveBatch, simclr_loss, simsiam_loss  # noqa: E402

torch.set_default_dtype(torch.float64)


def test_encoder_forward_matches_torch():
    cfg = EncoderConfig(layers=2, heads=2, hidden=16, ffn=32, vocab=40, max_len=12, dropout=0.0)
    params = init_params(cfg, np.random.default_rng(3), dtype=np.float64)
    rng = np.random.default_rng(4)
    for t in params.tensors.values():
        t.data = rng.standard_normal(t.shape) * 0.4

    n = 10
    ids = np.concatenate([[0], rng.integers(5, 40, size=n - 3), [3, 3]])
    maskable = np.zeros(n, dtype=bool)
    maskable[1 : n - 2] = True
    seq = TokenSequence(ids, maskable)
    mine = encode_tokens(params, seq, train_mode=False).data

    P = {k: torch.tensor(v.data) for k, v in params.items()}
    x = P["tok_emb"][torch.tensor(ids)] + P["pos_emb"][:n]
    key_mask = torch.where(torch.tensor(seq.pad_mask), torch.tensor(-1e9), torch.tensor(0.0))
    heads, dh = cfg.heads, cfg.hidden // cfg.heads
    for i in range(cfg.layers):
        p = f"layer{i}."
        q = (x @ P[p + "attn.wq"] + P[p + "attn.bq"]).reshape(n, heads, dh).transpose(0, 1)
        k = (x @ P[p + "attn.wk"]).reshape(n, heads, dh).transpose(0, 1)
        v = (x @ P[p + "attn.wv"] + P[p + "attn.bv"]).reshape(n, heads, dh).transpose(0, 1)
        scores = q @ k.transpose(1, 2) / np.sqrt(dh) + key_mask
        ctx = (torch.softmax(scores, dim=-1) @ v).transpose(0, 1).reshape(n, cfg.hidden)
        attn = ctx @ P[p + "attn.wo"] + P[p + "attn.bo"]
        x = F.layer_norm(x + attn, (cfg.hidden,), P[p + "ln1.gain"], P[p + "ln1.bias"], cfg.ln_eps)
        h = F.gelu(x @ P[p + "ffn.w1"] + P[p + "ffn.b1"], approximate="tanh")
        h = h @ P[p + "ffn.w2"] + P[p + "ffn.b2"]
        x = F.layer_norm(x + h, (cfg.hidden,), P[p + "ln2.gain"], P[p + "ln2.bias"], cfg.ln_eps)

    assert np.abs(mine - x.numpy()).max() < 1e-12


def test_simclr_value_and_gradient_match_torch():
    rng = np.random.default_rng(5)
    B, d = 4, 8
    h0 = rng.standard_normal((B, d))
    hk = rng.standard_normal((B, d))

    t_h0 = Tensor(h0.copy(), requires_grad=True)
    t_hk = Tensor(hk.copy(), requires_grad=True)
    with Tape() as tape:
        loss = simclr_loss(ContrastiveBatch([t_h0, t_hk]), tau=0.2)
    tape.backward(loss)

    th0 = torch.tensor(h0, requires_grad=True)
    thk = torch.tensor(hk, requires_grad=True)
    logits = (F.normalize(th0, dim=-1) @ F.normalize(thk, dim=-1).T) / 0.2
    tloss = F.cross_entropy(logits, torch.arange(B))
    tloss.backward()

    assert abs(loss.item() - tloss.item()) < 1e-12
    assert np.abs(t_h0.grad - th0.grad.numpy()).max() < 1e-12
    assert np.abs(t_hk.grad - thk.grad.numpy()).max() < 1e-12


def test_simsiam_value_and_gradients_match_torch():
    rng = np.random.default_rng(6)
    B, d = 4, 8
    h0 = rng.standard_normal((B, d))
    hk = rng.standard_normal((B, d))
    w1 = rng.standard_normal((d, d))
    w2 = rng.standard_normal((d, d))

    t_h0 = Tensor(h0.copy(), requires_grad=True)
    t_hk = Tensor(hk.copy(), requires_grad=True)
    t_w1 = Tensor(w1.copy(), requires_grad=True)
    t_w2 = Tensor(w2.copy(), requires_grad=True)
    with Tape() as tape:
        loss = simsiam_loss(ContrastiveBatch([t_h0, t_hk]), t_w1, t_w2)
    tape.backward(loss)

    th0 = torch.tensor(h0, requires_grad=True)
    thk = torch.tensor(hk, requires_grad=True)
    tw1 = torch.tensor(w1, requires_grad=True)
    tw2 = torch.tensor(w2, requires_grad=True)

    def pred(h):
        return F.gelu(h @ tw1, approximate="tanh") @ tw2

    d1 = (F.normalize(pred(thk), dim=-1) * F.normalize(th0.detach(), dim=-1)).sum(-1)
    d2 = (F.normalize(pred(th0), dim=-1) * F.normalize(thk.detach(), dim=-1)).sum(-1)
    tloss = torch.exp(-0.5 * (d1 + d2)).mean()
    tloss.backward()

    assert abs(loss.item() - tloss.item()) < 1e-12
    # detach() and stop_gradient must agree: view gradients flow only
    # through the predictor branch
    assert np.abs(t_h0.grad - th0.grad.numpy()).max() < 1e-12
    assert np.abs(t_hk.grad - thk.grad.numpy()).max() < 1e-12
    assert np.abs(t_w1.grad - tw1.grad.numpy()).max() < 1e-12
    assert np.abs(t_w2.grad - tw2.grad.numpy()).max() < 1e-12
