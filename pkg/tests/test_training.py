"""AdamW, post-training/fine-tuning loops, checkpoint format."""

import numpy as np
import pytest

from cmlm.autograd import Tensor
from cmlm.data import LabeledExample, build_vocab, encode
from cmlm.encoder import EncoderConfig, EncoderParams, encode_tokens, init_params
from cmlm.training import (
    AdamWState,
    Checkpoint,
    CheckpointFormatError,
    CheckpointShapeError,
    CheckpointVersionError,
    TrainConfig,
    adamw_step,
    checkpoint_from_params,
    fine_tune,
    load_checkpoint,
    params_from_checkpoint,
    post_train,
    predict,
    save_checkpoint,
    select_best,
    sequences_and_labels,
)


def _toy_params(names_shapes, dtype=np.float64, seed=0):
    rng = np.random.default_rng(seed)
    cfg = EncoderConfig(layers=1, heads=1, hidden=4, ffn=4, vocab=8, max_len=4)
    tensors = {n: Tensor(rng.standard_normal(s).astype(dtype), requires_grad=True, name=n) for n, s in names_shapes.items()}
    return EncoderParams(cfg, tensors)


# ---------------------------------------------------------------------------
# adamw


def test_adamw_zero_gradients_leave_params_unchanged():
    params = _toy_params({"w": (3, 3)})
    before = params["w"].data.copy()
    adamw_step(params, {"w": np.zeros((3, 3))}, AdamWState(), lr=0.1, weight_decay=0.0)
    assert np.array_equal(params["w"].data, before)


def test_adamw_first_step_is_signed_lr():
    params = _toy_params({"x": (1,)})
    params["x"].data[:] = 1.0
    adamw_step(params, {"x": np.ones(1)}, AdamWState(), lr=0.1, weight_decay=0.0)
    assert abs(params["x"].data[0] - 0.9) < 1e-6


def test_adamw_decay_alone_is_multiplicative_shrink():
    params = _toy_params({"w": (2, 2)})
    before = params["w"].data.copy()
    adamw_step(params, {"w": np.zeros((2, 2))}, AdamWState(), lr=0.05, weight_decay=0.2)
    assert np.allclose(params["w"].data, before * (1 - 0.05 * 0.2), rtol=1e-12)


def test_adamw_nonfinite_gradient_names_parameter():
    params = _toy_params({"layer0.ffn.w1": (2, 2)})
    bad = np.array([[1.0, np.nan], [0.0, 0.0]])
    with pytest.raises(FloatingPointError, match="layer0.ffn.w1"):
        adamw_step(params, {"layer0.ffn.w1": bad}, AdamWState(), lr=0.1)


def test_adamw_gradient_shape_mismatch_rejected():
    params = _toy_params({"w": (2, 2)})
    with pytest.raises(ValueError, match="shape"):
        adamw_step(params, {"w": np.zeros(3)}, AdamWState(), lr=0.1)


def test_adamw_wd_zero_matches_plain_adam_formula():
    # direct formula evaluation as an independent oracle, several steps
    rng = np.random.default_rng(1)
    params = _toy_params({"w": (4, 3)}, seed=2)
    state = AdamWState()
    m = np.zeros((4, 3))
    v = np.zeros((4, 3))
    want = params["w"].data.copy()
    b1, b2, eps, lr = 0.9, 0.999, 1e-8, 0.01
    for t in range(1, 6):
        g = rng.standard_normal((4, 3))
        adamw_step(params, {"w": g.copy()}, state, lr=lr, betas=(b1, b2), eps=eps, weight_decay=0.0)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        want = want - lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)
        assert np.allclose(params["w"].data, want, atol=1e-12)


def test_adamw_per_parameter_step_counters():
    params = _toy_params({"a": (1,), "b": (1,)})
    state = AdamWState()
    adamw_step(params, {"a": np.ones(1)}, state, lr=0.1)
    adamw_step(params, {"a": np.ones(1), "b": np.ones(1)}, state, lr=0.1)
    assert state.t == {"a": 2, "b": 1}


# ---------------------------------------------------------------------------
# post-training


def _corpus(n=20, seed=0, vocab_size=60):
    rng = np.random.default_rng(seed)
    words = [f"w{i}" for i in range(30)]
    texts = [" ".join(words[int(j)] for j in rng.integers(0, 30, size=7)) for _ in range(n)]
    vocab = build_vocab(texts, vocab_size)
    seqs = [encode(LabeledExample(t), vocab, 10) for t in texts]
    return vocab, seqs


def _encoder():
    return EncoderConfig(layers=1, heads=2, hidden=16, ffn=32, vocab=60, max_len=10, dropout=0.1)


def _tc(objective, alpha=0.5, epochs=2, seed=3, **kw):
    return TrainConfig(learning_rate=1e-3, epochs=epochs, batch_size=8, alpha=alpha,
                       objective=objective, seed=seed, dropout=0.1, **kw)


def test_post_train_deterministic_same_seed():
    vocab, seqs = _corpus()

    def run():
        params = init_params(_encoder(), np.random.default_rng(7))
        return post_train(params, seqs, _tc("cmlm"), vocab)

    a, b = run(), run()
    assert [r["total"] for r in a.trace] == [r["total"] for r in b.trace]
    for name in a.params.names():
        assert np.array_equal(a.params[name].data, b.params[name].data)


def test_tapt_equals_cmlm_alpha_zero_bitwise():
    vocab, seqs = _corpus()

    def run(objective, alpha):
        params = init_params(_encoder(), np.random.default_rng(7))
        return post_train(params, seqs, _tc(objective, alpha=alpha), vocab)

    tapt = run("tapt", 0.5)
    cmlm0 = run("cmlm", 0.0)
    assert [r["total"] for r in tapt.trace] == [r["total"] for r in cmlm0.trace]
    for name in tapt.params.names():
        assert np.array_equal(tapt.params[name].data, cmlm0.params[name].data)


def test_cmlm_alpha_positive_diverges_from_tapt():
    vocab, seqs = _corpus()

    def run(objective, alpha):
        params = init_params(_encoder(), np.random.default_rng(7))
        return post_train(params, seqs, _tc(objective, alpha=alpha), vocab)

    tapt = run("tapt", 0.5)
    full = run("cmlm", 0.5)
    assert [r["total"] for r in tapt.trace] != [r["total"] for r in full.trace]
    assert all(r["cl"] > 0 for r in full.trace)


def test_post_train_trace_length_and_fields():
    vocab, seqs = _corpus(n=20)
    params = init_params(_encoder(), np.random.default_rng(8))
    result = post_train(params, seqs, _tc("cmlm", epochs=3), vocab)
    assert len(result.trace) == 3 * 3  # ceil(20/8) = 3 steps per epoch
    assert result.step == 9
    assert all(set(r) == {"step", "mlm", "cl", "total"} for r in result.trace)


def test_post_train_empty_dataset_rejected():
    vocab, _ = _corpus()
    params = init_params(_encoder(), np.random.default_rng(9))
    with pytest.raises(ValueError, match="empty"):
        post_train(params, [], _tc("cmlm"), vocab)


def test_post_train_pm_zero_gives_up_remasking():
    vocab, seqs = _corpus()
    params = init_params(_encoder(), np.random.default_rng(10))
    with pytest.raises(ValueError, match="re-mask"):
        post_train(params, seqs, _tc("tapt", p_m=0.0), vocab)


def test_post_train_rejects_non_post_training_objective():
    vocab, seqs = _corpus()
    params = init_params(_encoder(), np.random.default_rng(11))
    with pytest.raises(ValueError, match="objective"):
        post_train(params, seqs, _tc("none"), vocab)


def test_post_train_cssl_objectives_run():
    vocab, seqs = _corpus(n=16)
    for name in ("cssl:crm-pair", "cssl:drm-pair", "cssl:eda-pair", "cssl:identity"):
        params = init_params(_encoder(), np.random.default_rng(12))
        result = post_train(params, seqs, _tc(name, epochs=1), vocab)
        assert all(r["mlm"] == 0.0 for r in result.trace)
        assert all(r["total"] == r["cl"] for r in result.trace)


def test_post_train_unknown_augmenter_rejected():
    vocab, seqs = _corpus()
    params = init_params(_encoder(), np.random.default_rng(13))
    with pytest.raises(ValueError, match="augmenter"):
        post_train(params, seqs, _tc("cssl:nope", epochs=1), vocab)


def test_post_train_grad_clip_path():
    vocab, seqs = _corpus(n=8)
    params = init_params(_encoder(), np.random.default_rng(14))
    result = post_train(params, seqs, _tc("cmlm", epochs=1, grad_clip=0.001), vocab)
    assert result.params.all_finite()


def test_post_train_simclr_variant():
    vocab, seqs = _corpus(n=16)
    params = init_params(_encoder(), np.random.default_rng(15))
    result = post_train(params, seqs, _tc("cmlm", epochs=1, cl_variant="simclr"), vocab)
    assert all(r["cl"] >= 0 for r in result.trace)


def test_post_train_no_complement_ablation():
    # cmlm:drm (the w/o-CRM ablation) shares T^0 draws with cmlm but draws
    # its extra views independently, so traces diverge while tapt-at-alpha-0
    # equivalence is preserved
    vocab, seqs = _corpus(n=16)

    def run(objective, alpha=0.5):
        params = init_params(_encoder(), np.random.default_rng(16))
        return post_train(params, seqs, _tc(objective, alpha=alpha, epochs=1), vocab)

    plain = run("cmlm")
    ablation = run("cmlm:drm")
    assert [r["total"] for r in plain.trace] != [r["total"] for r in ablation.trace]
    assert all(r["cl"] > 0 for r in ablation.trace)
    tapt = run("tapt")
    ablation0 = run("cmlm:drm", alpha=0.0)
    assert [r["total"] for r in tapt.trace] == [r["total"] for r in ablation0.trace]


def test_train_config_objective_suffix_validation():
    with pytest.raises(ValueError, match="variant"):
        TrainConfig(objective="cmlm:nope")
    with pytest.raises(ValueError, match="suffix"):
        TrainConfig(objective="tapt:drm")


def test_post_train_two_segment_sequences():
    rng = np.random.default_rng(17)
    words = [f"w{i}" for i in range(20)]
    examples = []
    for _ in range(12):
        a = " ".join(words[int(j)] for j in rng.integers(0, 20, size=4))
        b = " ".join(words[int(j)] for j in rng.integers(0, 20, size=3))
        examples.append(LabeledExample(a, b))
    vocab = build_vocab([f"{ex.text_a} {ex.text_b}" for ex in examples], 40)
    seqs = [encode(ex, vocab, 12) for ex in examples]
    cfg = EncoderConfig(layers=1, heads=2, hidden=16, ffn=32, vocab=vocab.size, max_len=12, dropout=0.1)
    params = init_params(cfg, np.random.default_rng(18))
    result = post_train(params, seqs, _tc("cmlm", epochs=1), vocab)
    assert result.params.all_finite()
    assert all(np.isfinite(r["total"]) for r in result.trace)


# ---------------------------------------------------------------------------
# fine-tuning


def _classification_setup(n_train=40, n_dev=20, seed=0):
    rng = np.random.default_rng(seed)
    examples = []
    for i in range(n_train + n_dev):
        label = i % 2
        words = [f"c{label}tok{int(j)}" for j in rng.integers(0, 10, size=6)]
        examples.append(LabeledExample(" ".join(words), None, label))
    vocab = build_vocab([ex.text_a for ex in examples], 60)
    pairs = sequences_and_labels(examples, vocab, 10)
    cfg = EncoderConfig(layers=1, heads=2, hidden=16, ffn=32, vocab=vocab.size,
                        max_len=10, dropout=0.1, num_classes=2)
    params = init_params(cfg, np.random.default_rng(1))
    return params, pairs[:n_train], pairs[n_train:], vocab


def test_select_best_argmax_earliest_tie():
    assert select_best([(1, 0.6), (2, 0.9), (3, 0.7)]) == (2, 0.9)
    assert select_best([(1, 0.8), (2, 0.8)]) == (1, 0.8)
    with pytest.raises(ValueError):
        select_best([])


def test_fine_tune_interval_larger_than_steps_evaluates_once():
    params, train, dev, _ = _classification_setup()
    tc = TrainConfig(learning_rate=1e-3, epochs=1, batch_size=16, objective="none",
                     seed=2, checkpoint_interval=1000)
    result = fine_tune(params, train, dev, tc)
    assert len(result.history) == 1
    assert result.history[0][0] == 3  # ceil(40/16) steps


def test_fine_tune_best_checkpoint_contract():
    params, train, dev, _ = _classification_setup()
    tc = TrainConfig(learning_rate=1e-3, epochs=3, batch_size=16, objective="none",
                     seed=3, checkpoint_interval=2)
    result = fine_tune(params, train, dev, tc)
    assert result.best_metric >= max(m for _, m in result.history) - 1e-12
    assert result.best_step == min(s for s, m in result.history if m == result.best_metric)


def test_fine_tune_empty_sets_rejected():
    params, train, dev, _ = _classification_setup()
    tc = TrainConfig(learning_rate=1e-3, epochs=1, batch_size=4, objective="none", seed=4)
    with pytest.raises(ValueError, match="non-empty"):
        fine_tune(params, [], dev, tc)
    with pytest.raises(ValueError, match="non-empty"):
        fine_tune(params, train, [], tc)


def test_fine_tune_requires_classifier_head():
    cfg = EncoderConfig(layers=1, heads=2, hidden=16, ffn=32, vocab=60, max_len=10)
    params = init_params(cfg, np.random.default_rng(5))
    _, train, dev, _ = _classification_setup()
    tc = TrainConfig(learning_rate=1e-3, epochs=1, batch_size=4, objective="none", seed=5)
    with pytest.raises(ValueError, match="classifier"):
        fine_tune(params, train, dev, tc)


def test_fine_tune_deterministic():
    def run():
        params, train, dev, _ = _classification_setup()
        tc = TrainConfig(learning_rate=1e-3, epochs=2, batch_size=16, objective="none",
                         seed=6, checkpoint_interval=3)
        result = fine_tune(params, train, dev, tc)
        return result.history, {n: result.params[n].data.copy() for n in result.params.names()}

    h1, p1 = run()
    h2, p2 = run()
    assert h1 == h2
    assert all(np.array_equal(p1[n], p2[n]) for n in p1)


def test_sequences_and_labels_requires_labels():
    vocab = build_vocab(["a"], 10)
    with pytest.raises(ValueError, match="label"):
        sequences_and_labels([LabeledExample("a", None, None)], vocab, 5)


# ---------------------------------------------------------------------------
# checkpoints


def _ckpt_setup(seed=0):
    cfg = EncoderConfig(layers=1, heads=2, hidden=16, ffn=32, vocab=40, max_len=8, num_classes=2)
    params = init_params(cfg, np.random.default_rng(seed))
    run_config = {"run": {"max_len": 8}, "vocab": [], "labels": ["0", "1"]}
    return params, checkpoint_from_params(params, run_config, step=17, rng_state={"k": 1})


def test_checkpoint_round_trip_bytes_and_forward(tmp_path):
    params, ckpt = _ckpt_setup()
    path = str(tmp_path / "a.ckpt")
    save_checkpoint(ckpt, path)
    loaded = load_checkpoint(path)
    assert loaded.step == 17
    assert loaded.rng_state == {"k": 1}
    for name, arr in ckpt.tensors.items():
        assert loaded.tensors[name].tobytes() == arr.tobytes()
    reloaded = params_from_checkpoint(loaded)
    seq_ids = np.array([0, 5, 6, 3, 3, 3, 3, 3])
    from cmlm.data import TokenSequence

    seq = TokenSequence(seq_ids, np.array([False, True, True] + [False] * 5))
    a = encode_tokens(params, seq, train_mode=False).data
    b = encode_tokens(reloaded, seq, train_mode=False).data
    assert np.array_equal(a, b)


def test_checkpoint_save_is_deterministic(tmp_path):
    _, ckpt = _ckpt_setup()
    p1, p2 = str(tmp_path / "a.ckpt"), str(tmp_path / "b.ckpt")
    save_checkpoint(ckpt, p1)
    save_checkpoint(ckpt, p2)
    assert open(p1, "rb").read() == open(p2, "rb").read()


def test_checkpoint_bad_magic_rejected(tmp_path):
    _, ckpt = _ckpt_setup()
    path = str(tmp_path / "a.ckpt")
    save_checkpoint(ckpt, path)
    blob = bytearray(open(path, "rb").read())
    blob[:4] = b"XXXX"
    open(path, "wb").write(bytes(blob))
    with pytest.raises(CheckpointFormatError, match="magic"):
        load_checkpoint(path)


def test_checkpoint_version_mismatch_rejected(tmp_path):
    _, ckpt = _ckpt_setup()
    path = str(tmp_path / "a.ckpt")
    save_checkpoint(ckpt, path)
    blob = bytearray(open(path, "rb").read())
    blob[8] = 99
    open(path, "wb").write(bytes(blob))
    with pytest.raises(CheckpointVersionError, match="99"):
        load_checkpoint(path)


def test_checkpoint_truncated_rejected(tmp_path):
    _, ckpt = _ckpt_setup()
    path = str(tmp_path / "a.ckpt")
    save_checkpoint(ckpt, path)
    blob = open(path, "rb").read()
    open(path, "wb").write(blob[: len(blob) - 64])
    with pytest.raises(CheckpointFormatError, match="truncated"):
        load_checkpoint(path)
    open(path, "wb").write(blob[:6])
    with pytest.raises(CheckpointFormatError, match="truncated"):
        load_checkpoint(path)


def test_checkpoint_shape_mismatch_names_tensor(tmp_path):
    params, ckpt = _ckpt_setup()
    ckpt.tensors["tok_emb"] = np.zeros((3, 3), dtype=np.float32)  # wrong vs config
    path = str(tmp_path / "a.ckpt")
    save_checkpoint(ckpt, path)
    with pytest.raises(CheckpointShapeError, match="tok_emb"):
        load_checkpoint(path)


def test_checkpoint_missing_tensor_rejected(tmp_path):
    params, ckpt = _ckpt_setup()
    del ckpt.tensors["mlm.bias"]
    path = str(tmp_path / "a.ckpt")
    save_checkpoint(ckpt, path)
    with pytest.raises(CheckpointShapeError, match="mlm.bias"):
        load_checkpoint(path)


def test_checkpoint_requires_float32():
    ckpt = Checkpoint(config={}, step=0, rng_state=None,
                      tensors={"w": np.zeros((2, 2), dtype=np.float64)})
    with pytest.raises(ValueError, match="float32"):
        save_checkpoint(ckpt, "/tmp/never-written.ckpt")


def test_checkpoint_malformed_header_fields_rejected(tmp_path):
    import json as json_mod
    import struct

    from cmlm.training import CKPT_MAGIC, CKPT_VERSION

    header = json_mod.dumps({"config": {}, "step": 0}).encode()  # no manifest
    path = str(tmp_path / "bad.ckpt")
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC + bytes([CKPT_VERSION]) + struct.pack("<I", len(header)) + header)
    with pytest.raises(CheckpointFormatError, match="header"):
        load_checkpoint(path)


def test_fine_tune_then_predict_held_out():
    params, train, dev, _ = _classification_setup(n_train=60, n_dev=30)
    tc = TrainConfig(learning_rate=1e-3, epochs=5, batch_size=16, objective="none",
                     seed=8, checkpoint_interval=10)
    result = fine_tune(params, train, dev, tc)
    preds = predict(result.params, [s for s, _ in dev])
    acc = (preds == np.array([y for _, y in dev])).mean()
    assert acc >= 0.9  # token-separable classes
