"""AdamW, the post-training and fine-tuning loops, and binary checkpoints.

All randomness in a run derives from one integer root: per-purpose streams
are keyed by (root, tag, step, slot, ...) so that skipping a view or an
objective term never shifts the draws of another. That is what makes
objective=tapt and objective=cmlm with alpha=0 bit-identical; see post_train.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from . import objectives
from .autograd import Tape, Tensor
from .data import LabeledExample, TokenSequence, Vocabulary
from .encoder import EncoderConfig, EncoderParams, classifier_logits, encode_tokens, mlm_projection, param_shapes, pool_first
from .masking import LABEL_IGNORE, augmenter_for, drm, make_crm_batch

OBJECTIVES = ("cmlm", "tapt", "cssl", "none")

# stream tags for keyed rng derivation
_TAG_MASK, _TAG_DROPOUT, _TAG_SHUFFLE, _TAG_FINETUNE = 1, 2, 3, 4

_MAX_REMASK_ATTEMPTS = 100


def derive_rng(root: int, *key: int) -> np.random.Generator:
    """Stream keyed by (root, *key); independent of any other key's consumption."""
    return np.random.default_rng((int(root), *[int(k) for k in key]))


def _root_seed(rng, fallback: int) -> int:
    if rng is None:
        return int(fallback)
    if isinstance(rng, (int, np.integer)):
        return int(rng)
    return int(rng.integers(0, 2**63 - 1))


@dataclass
class TrainConfig:
    learning_rate: float = 1e-5
    epochs: int = 1
    batch_size: int = 8
    alpha: float = 0.5
    p_m: float = 0.15
    p_c: float = 0.7
    K: int = 1
    tau: float = 0.1
    cl_variant: str = "simsiam"
    objective: str = "cmlm"
    seed: int = 0
    weight_decay: float = 0.01
    dropout: float = 0.1
    checkpoint_interval: int = 100
    grad_clip: float = 0.0
    eda_rate: float = 0.1

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError(f"learning rate must be positive, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ValueError(f"batch size must be >= 1, got {self.batch_size}")
        if self.checkpoint_interval < 1:
            raise ValueError(f"checkpoint interval must be >= 1, got {self.checkpoint_interval}")
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if self.seed < 0:
            raise ValueError(f"seed must be >= 0, got {self.seed}")
        if self.alpha < 0:
            raise ValueError(f"alpha must be >= 0, got {self.alpha}")
        for name, p in (("p_m", self.p_m), ("p_c", self.p_c), ("eda_rate", self.eda_rate)):
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {p}")
        if self.K < 1:
            raise ValueError(f"K must be >= 1, got {self.K}")
        if self.tau <= 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if self.cl_variant not in objectives.CL_VARIANTS:
            raise ValueError(f"unknown cl variant: {self.cl_variant!r}")
        base, _, suffix = self.objective.partition(":")
        if base not in OBJECTIVES:
            raise ValueError(f"unknown objective: {self.objective!r}")
        if base == "cmlm" and suffix not in ("", "drm"):
            raise ValueError(f"unknown cmlm variant: {self.objective!r} (only cmlm and cmlm:drm)")
        if base in ("tapt", "none") and suffix:
            raise ValueError(f"objective {base!r} takes no variant suffix")


# ---------------------------------------------------------------------------
# AdamW


class AdamWState:
    """First/second moments and per-parameter step counters."""

    def __init__(self):
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t: dict[str, int] = {}


def adamw_step(
    params: EncoderParams,
    grads: dict[str, np.ndarray],
    state: AdamWState,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> None:
    """Bias-corrected Adam step plus decoupled decay p -= lr*wd*p."""
    b1, b2 = betas
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} vs parameter {name!r} shape {p.shape}")
        if not np.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
            state.t[name] = 0
        state.t[name] += 1
        t = state.t[name]
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        p.data -= lr * m_hat / (np.sqrt(v_hat) + eps)
        if weight_decay:
            p.data -= lr * weight_decay * p.data


def _clip_grads(grads: dict[str, np.ndarray], clip: float) -> None:
    if clip <= 0:
        return
    total = np.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values()))
    if total > clip:
        factor = clip / total
        for g in grads.values():
            g *= np.asarray(factor, dtype=g.dtype)


def _collect_grads(params: EncoderParams) -> dict[str, np.ndarray]:
    return {n: t.grad for n, t in params.items() if t.grad is not None}


# ---------------------------------------------------------------------------
# post-training


@dataclass
class TrainResult:
    params: EncoderParams
    trace: list[dict] = field(default_factory=list)
    rng_state: dict | None = None
    step: int = 0


def _batches(order: np.ndarray, batch_size: int):
    for lo in range(0, order.size, batch_size):
        yield [int(i) for i in order[lo : lo + batch_size]]


def post_train(
    params: EncoderParams,
    sequences: list[TokenSequence],
    config: TrainConfig,
    vocab: Vocabulary,
    rng: np.random.Generator | int | None = None,
) -> TrainResult:
    """Run the configured post-training objective over the unlabeled sequences.

    objective "cmlm": DRM + K CRM views, combined MLM + alpha * CL loss.
    objective "cmlm:drm": the no-complement ablation; the K extra views use
    independent DRM at p_c instead of CRM, everything else unchanged.
    objective "tapt": DRM only, pure MLM. cmlm with alpha == 0 takes this
    path, which realizes the alpha=0 equivalence exactly: the base view's
    masking stream is consumed first, and dropout streams are keyed per
    (step, sequence, view), so the skipped extra views cannot shift any
    draw the MLM path sees.
    objective "cssl:<augmenter>": CL loss alone over augmenter view pairs.
    """
    if not sequences:
        raise ValueError("empty post-training dataset")
    objective = config.objective
    base, _, suffix = objective.partition(":")
    if base == "cmlm" and config.alpha == 0.0:
        objective, base, suffix = "tapt", "tapt", ""
    if base not in ("cmlm", "tapt", "cssl"):
        raise ValueError(f"post_train cannot run objective {config.objective!r}")
    second_view = None
    if base == "cmlm":
        second_view = "drm" if suffix == "drm" else "crm"
    if base == "cssl":
        augmenter = augmenter_for(
            suffix or "crm-pair", vocab, p_m=config.p_m, p_c=config.p_c, eda_rate=config.eda_rate
        )

    root = _root_seed(rng, config.seed)
    loop_rng = derive_rng(root, _TAG_SHUFFLE)
    projection = mlm_projection(params)
    predictor = (params["predictor.w1"], params["predictor.w2"])
    state = AdamWState()
    trace: list[dict] = []
    step = 0

    for _epoch in range(config.epochs):
        order = loop_rng.permutation(len(sequences))
        for batch_idx in _batches(order, config.batch_size):
            step += 1
            params.zero_grads()
            with Tape() as tape:
                if base in ("cmlm", "tapt"):
                    mlm, cl, total = _masked_step(
                        params, sequences, batch_idx, config, vocab, root, step,
                        second_view=second_view, projection=projection, predictor=predictor,
                    )
                else:
                    mlm, cl, total = _cssl_step(
                        params, sequences, batch_idx, config, root, step, augmenter, predictor
                    )
                tape.backward(total)
            grads = _collect_grads(params)
            _clip_grads(grads, config.grad_clip)
            adamw_step(params, grads, state, config.learning_rate, weight_decay=config.weight_decay)
            trace.append({"step": step, "mlm": mlm, "cl": cl, "total": float(total.item())})
    return TrainResult(params=params, trace=trace, rng_state=loop_rng.bit_generator.state, step=step)


def _masked_step(
    params, sequences, batch_idx, config, vocab, root, step, second_view, projection, predictor
):
    """One CMLM/TAPT step; returns (mlm, cl, total) with total on the tape.

    second_view: "crm" for the complementary pair, "drm" for the
    no-complement ablation, None for TAPT (base view only).
    """
    with_contrastive = second_view is not None
    for attempt in range(_MAX_REMASK_ATTEMPTS):
        masked = []
        for j, idx in enumerate(batch_idx):
            mask_rng = derive_rng(root, _TAG_MASK, step, j, attempt)
            seq = sequences[idx]
            if second_view == "crm":
                t0, tks = make_crm_batch(seq, config.K, config.p_m, config.p_c, vocab, mask_rng)
            elif second_view == "drm":
                t0 = drm(seq, config.p_m, vocab, mask_rng)
                tks = [drm(seq, config.p_c, vocab, mask_rng) for _ in range(config.K)]
            else:
                t0, tks = drm(seq, config.p_m, vocab, mask_rng), []
            masked.append((t0, tks))
        if any(np.any(t0.labels != LABEL_IGNORE) for t0, _ in masked):
            break
    else:
        raise ValueError(f"no positions selected after {_MAX_REMASK_ATTEMPTS} re-mask attempts (p_m={config.p_m})")

    H0s, labels = [], []
    pooled: list[list[Tensor]] = [[] for _ in range(config.K + 1)]
    for j, (t0, tks) in enumerate(masked):
        h0 = encode_tokens(params, t0, train_mode=True, rng=derive_rng(root, _TAG_DROPOUT, step, j, 0))
        H0s.append(h0)
        labels.append(t0.labels)
        if with_contrastive:
            pooled[0].append(pool_first(h0))
            for k, tk in enumerate(tks, start=1):
                hk = encode_tokens(params, tk, train_mode=True, rng=derive_rng(root, _TAG_DROPOUT, step, j, k))
                pooled[k].append(pool_first(hk))

    if with_contrastive:
        views = [ag.concat([ag.reshape(h, (1, h.shape[0])) for h in row]) for row in pooled]
        cbatch = objectives.ContrastiveBatch(views)
        breakdown = objectives.cmlm_loss(
            H0s, labels, projection, cbatch, config.alpha, config.cl_variant, config.tau, predictor
        )
        return float(breakdown.mlm.item()), float(breakdown.cl.item()), breakdown.total
    mlm = objectives.mlm_loss(H0s, labels, projection)
    return float(mlm.item()), 0.0, mlm


def _cssl_step(params, sequences, batch_idx, config, root, step, augmenter, predictor):
    rows0, rows1 = [], []
    for j, idx in enumerate(batch_idx):
        v0, v1 = augmenter(sequences[idx], derive_rng(root, _TAG_MASK, step, j, 0))
        h0 = encode_tokens(params, v0, train_mode=True, rng=derive_rng(root, _TAG_DROPOUT, step, j, 0))
        h1 = encode_tokens(params, v1, train_mode=True, rng=derive_rng(root, _TAG_DROPOUT, step, j, 1))
        rows0.append(ag.reshape(pool_first(h0), (1, params.config.hidden)))
        rows1.append(ag.reshape(pool_first(h1), (1, params.config.hidden)))
    cbatch = objectives.ContrastiveBatch([ag.concat(rows0), ag.concat(rows1)])
    cl = objectives.cssl_loss(cbatch, config.cl_variant, config.tau, predictor)
    return 0.0, float(cl.item()), cl


# ---------------------------------------------------------------------------
# fine-tuning


@dataclass
class FineTuneResult:
    params: EncoderParams
    history: list[tuple[int, float]]
    best_step: int
    best_metric: float
    rng_state: dict | None = None


def predict(params: EncoderParams, seqs: list[TokenSequence]) -> np.ndarray:
    """Argmax class per sequence, eval mode (no dropout, no tape)."""
    out = []
    for seq in seqs:
        h = pool_first(encode_tokens(params, seq, train_mode=False))
        out.append(int(np.argmax(classifier_logits(params, h).data)))
    return np.asarray(out, dtype=np.int64)


def select_best(history: list[tuple[int, float]]) -> tuple[int, float]:
    """Highest metric, earliest step on ties."""
    if not history:
        raise ValueError("empty evaluation history")
    best_step, best = history[0]
    for step, metric in history[1:]:
        if metric > best:
            best_step, best = step, metric
    return best_step, best


def fine_tune(
    params: EncoderParams,
    train_set: list[tuple[TokenSequence, int]],
    dev_set: list[tuple[TokenSequence, int]],
    config: TrainConfig,
    rng: np.random.Generator | int | None = None,
) -> FineTuneResult:
    """Train the classifier head (and the whole stack) on uncorrupted sequences.

    Dev accuracy is measured every checkpoint_interval steps and at the end;
    the returned params are the snapshot with the best dev accuracy
    (earliest step on ties).
    """
    if not train_set or not dev_set:
        raise ValueError("fine_tune needs non-empty train and dev sets")
    if params.config.num_classes <= 0:
        raise ValueError("params carry no classifier head; init with num_classes > 0")
    root = _root_seed(rng, config.seed)
    loop_rng = derive_rng(root, _TAG_SHUFFLE)
    state = AdamWState()
    dev_seqs = [s for s, _ in dev_set]
    dev_labels = np.asarray([y for _, y in dev_set])

    history: list[tuple[int, float]] = []
    best_snapshot: list = [None]  # only the running best is kept

    def evaluate(step: int) -> None:
        acc = float((predict(params, dev_seqs) == dev_labels).mean())
        history.append((step, acc))
        if best_snapshot[0] is None or acc > best_snapshot[0][1]:
            best_snapshot[0] = (step, acc, params.copy())

    step = 0
    for _epoch in range(config.epochs):
        order = loop_rng.permutation(len(train_set))
        for batch_idx in _batches(order, config.batch_size):
            step += 1
            params.zero_grads()
            with Tape() as tape:
                rows, targets = [], []
                for j, idx in enumerate(batch_idx):
                    seq, label = train_set[idx]
                    h = pool_first(
                        encode_tokens(params, seq, train_mode=True, rng=derive_rng(root, _TAG_FINETUNE, step, j))
                    )
                    logits = classifier_logits(params, h)
                    rows.append(ag.reshape(logits, (1, logits.shape[0])))
                    targets.append(label)
                loss = ag.mean(ag.cross_entropy(ag.concat(rows), np.asarray(targets)))
                tape.backward(loss)
            grads = _collect_grads(params)
            _clip_grads(grads, config.grad_clip)
            adamw_step(params, grads, state, config.learning_rate, weight_decay=config.weight_decay)
            if step % config.checkpoint_interval == 0:
                evaluate(step)
    if not history or history[-1][0] != step:
        evaluate(step)
    best_step, best = select_best(history)
    assert best_snapshot[0] is not None and best_snapshot[0][0] == best_step
    return FineTuneResult(
        params=best_snapshot[0][2], history=history, best_step=best_step,
        best_metric=best, rng_state=loop_rng.bit_generator.state,
    )


# ---------------------------------------------------------------------------
# checkpoints


CKPT_MAGIC = b"CMLMCKPT"
CKPT_VERSION = 1


class CheckpointError(Exception):
    """Base class for checkpoint load failures."""


class CheckpointFormatError(CheckpointError):
    """Bad magic bytes, malformed header, or truncated payload."""


class CheckpointVersionError(CheckpointError):
    """Format version not supported by this reader."""


class CheckpointShapeError(CheckpointError):
    """A tensor's shape disagrees with the recorded config."""


@dataclass
class Checkpoint:
    config: dict
    step: int
    rng_state: dict | None
    tensors: dict[str, np.ndarray]


def save_checkpoint(ckpt: Checkpoint, path: str) -> None:
    """magic | version byte | u32 header length | JSON header | float32 payloads."""
    manifest = []
    offset = 0
    payloads = []
    for name, arr in ckpt.tensors.items():
        if arr.dtype != np.float32:
            raise ValueError(f"checkpoint tensors must be float32, got {arr.dtype} for {name!r}")
        raw = np.ascontiguousarray(arr).astype("<f4").tobytes()
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        payloads.append(raw)
        offset += len(raw)
    header = json.dumps(
        {"config": ckpt.config, "step": ckpt.step, "rng_state": ckpt.rng_state, "manifest": manifest},
        sort_keys=True,
    ).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(bytes([CKPT_VERSION]))
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        for raw in payloads:
            f.write(raw)


def load_checkpoint(path: str) -> Checkpoint:
    with open(path, "rb") as f:
        blob = f.read()
    fixed = len(CKPT_MAGIC) + 1 + 4
    if len(blob) < fixed:
        raise CheckpointFormatError(f"{path}: truncated file ({len(blob)} bytes)")
    if blob[: len(CKPT_MAGIC)] != CKPT_MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic bytes")
    version = blob[len(CKPT_MAGIC)]
    if version != CKPT_VERSION:
        raise CheckpointVersionError(f"{path}: format version {version}, expected {CKPT_VERSION}")
    (header_len,) = struct.unpack_from("<I", blob, len(CKPT_MAGIC) + 1)
    if fixed + header_len > len(blob):
        raise CheckpointFormatError(f"{path}: truncated header")
    try:
        header = json.loads(blob[fixed : fixed + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointFormatError(f"{path}: malformed header: {e}") from e
    payload = blob[fixed + header_len :]
    tensors: dict[str, np.ndarray] = {}
    try:
        manifest = [(e["name"], tuple(e["shape"]), int(e["offset"])) for e in header["manifest"]]
        step = int(header["step"])
    except (KeyError, TypeError, ValueError) as e:
        raise CheckpointFormatError(f"{path}: malformed header fields: {e}") from e
    expected = None
    if isinstance(header.get("config"), dict) and "encoder" in header["config"]:
        expected = param_shapes(EncoderConfig.from_dict(header["config"]["encoder"]))
    for name, shape, offset in manifest:
        if expected is not None:
            if name not in expected:
                raise CheckpointShapeError(f"{path}: unexpected tensor {name!r} for recorded config")
            if expected[name] != shape:
                raise CheckpointShapeError(
                    f"{path}: tensor {name!r} has shape {shape}, config expects {expected[name]}"
                )
        count = int(np.prod(shape)) if shape else 1
        end = offset + 4 * count
        if end > len(payload):
            raise CheckpointFormatError(f"{path}: truncated payload for tensor {name!r}")
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=offset).reshape(shape).copy()
        tensors[name] = arr
    if expected is not None and set(expected) != set(tensors):
        missing = sorted(set(expected) - set(tensors))
        raise CheckpointShapeError(f"{path}: missing tensors for recorded config: {missing}")
    return Checkpoint(config=header.get("config", {}), step=step, rng_state=header.get("rng_state"), tensors=tensors)


def checkpoint_from_params(
    params: EncoderParams, run_config: dict, step: int = 0, rng_state: dict | None = None
) -> Checkpoint:
    config = dict(run_config)
    config["encoder"] = params.config.to_dict()
    tensors = {n: t.data.astype(np.float32, copy=True) for n, t in params.items()}
    return Checkpoint(config=config, step=step, rng_state=rng_state, tensors=tensors)


def params_from_checkpoint(ckpt: Checkpoint) -> EncoderParams:
    cfg = EncoderConfig.from_dict(ckpt.config["encoder"])
    tensors = {
        n: Tensor(ckpt.tensors[n].copy(), requires_grad=True, name=n) for n in param_shapes(cfg)
    }
    return EncoderParams(cfg, tensors)


def sequences_and_labels(
    examples: list[LabeledExample], vocab: Vocabulary, max_len: int
) -> list[tuple[TokenSequence, int]]:
    from .data import encode

    out = []
    for ex in examples:
        if ex.label is None:
            raise ValueError("labeled example required for fine-tuning/evaluation")
        out.append((encode(ex, vocab, max_len), int(ex.label)))
    return out
