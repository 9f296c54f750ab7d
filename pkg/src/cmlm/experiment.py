"""Few-shot evaluation protocol, metrics, synthetic tasks, and reports.

A report aggregates one run per (subset, seed) pair — by default 5 subsets
times seeds (31, 42, 53) = 15 records — as mean plus population standard
deviation. Failed runs abort the whole report rather than being dropped.
"""

from __future__ import annotations

import hashlib
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone

import numpy as np

from .data import LabeledExample, Vocabulary, build_vocab, encode, sample_few_shot
from .encoder import EncoderConfig, init_params
from .training import TrainConfig, fine_tune, post_train, predict, sequences_and_labels

DEFAULT_SEEDS = (31, 42, 53)
DEFAULT_NUM_SUBSETS = 5
METHODS = ("ft", "tapt", "cmlm")  # plus "cssl:<augmenter>"
SWEEP_AXES = ("unlabeled_count", "K", "alpha", "p_c")

_TAG_PROTOCOL, _TAG_INIT, _TAG_RUN = 11, 12, 13


class ProtocolError(ValueError):
    """Bad method name or unrunnable protocol configuration."""


# ---------------------------------------------------------------------------
# metrics


def accuracy(preds, golds) -> float:
    preds = np.asarray(preds)
    golds = np.asarray(golds)
    if preds.size == 0 or preds.shape != golds.shape:
        raise ValueError(f"accuracy needs equal non-empty inputs, got {preds.shape} vs {golds.shape}")
    return float((preds == golds).mean())


def mcc(preds, golds) -> float:
    """Matthews correlation for binary labels; 0 when any marginal is empty."""
    preds = np.asarray(preds)
    golds = np.asarray(golds)
    if preds.size == 0 or preds.shape != golds.shape:
        raise ValueError(f"mcc needs equal non-empty inputs, got {preds.shape} vs {golds.shape}")
    values = set(np.unique(preds)) | set(np.unique(golds))
    if not values <= {0, 1}:
        raise ValueError(f"mcc needs binary labels in {{0, 1}}, saw {sorted(values)}")
    tp = int(((preds == 1) & (golds == 1)).sum())
    tn = int(((preds == 0) & (golds == 0)).sum())
    fp = int(((preds == 1) & (golds == 0)).sum())
    fn = int(((preds == 0) & (golds == 1)).sum())
    denom = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn)
    if denom == 0:
        return 0.0
    return float((tp * tn - fp * fn) / np.sqrt(denom))


METRICS = {"acc": accuracy, "mcc": mcc}


# ---------------------------------------------------------------------------
# synthetic tasks


@dataclass
class SyntheticTask:
    generator: str
    num_classes: int
    words: list[str]
    class_dists: list[np.ndarray]  # per-class token distribution over `words`
    train_pool: list[LabeledExample]
    eval_pool: list[LabeledExample]
    unlabeled_pool: list[LabeledExample] = field(default_factory=list)

    @property
    def name(self) -> str:
        return self.generator

    def texts(self) -> list[str]:
        pools = self.train_pool + self.unlabeled_pool
        return [ex.text_a for ex in pools]


def _sample_sentence(words, dist, rng, lo=4, hi=10) -> str:
    n = int(rng.integers(lo, hi + 1))
    idx = rng.choice(len(words), size=n, p=dist)
    return " ".join(words[int(i)] for i in idx)


def _pool(words, dists, size, rng, labeled=True, lo=4, hi=10) -> list[LabeledExample]:
    out = []
    for i in range(size):
        label = i % len(dists)
        text = _sample_sentence(words, dists[label], rng, lo, hi)
        out.append(LabeledExample(text, None, label if labeled else None))
    return out


def make_synthetic_task(kind: str, sizes: dict[str, int], rng: np.random.Generator) -> SyntheticTask:
    """Two-class token-distribution tasks.

    "separable": the classes draw from disjoint high-probability token sets.
    "domain-shift": classes share a vocabulary with different topic-token
    frequencies, plus a larger unlabeled pool whose token frequencies are
    shifted relative to the labeled pools (and carries no labels).
    """
    train_n = sizes.get("train_pool", 200)
    eval_n = sizes.get("eval_pool", 200)
    unlabeled_n = sizes.get("unlabeled_pool", 0)
    if kind == "separable":
        words = [f"red{i}" for i in range(25)] + [f"blue{i}" for i in range(25)]
        d0 = np.array([1.0] * 25 + [0.0] * 25)
        d1 = np.array([0.0] * 25 + [1.0] * 25)
        dists = [d0 / d0.sum(), d1 / d1.sum()]
        task = SyntheticTask(
            "separable", 2, words, dists,
            _pool(words, dists, train_n, rng), _pool(words, dists, eval_n, rng),
        )
        if unlabeled_n:
            task.unlabeled_pool = _pool(words, dists, unlabeled_n, rng, labeled=False)
        return task
    if kind == "domain-shift":
        # short sentences and a modest topic-token mass keep the Bayes rate
        # below the ceiling, so post-training effects are visible
        topic0 = [f"topic0w{i}" for i in range(20)]
        topic1 = [f"topic1w{i}" for i in range(20)]
        common = [f"common{i}" for i in range(30)]
        words = topic0 + topic1 + common
        d0 = np.array([0.45 / 20] * 20 + [0.0] * 20 + [0.55 / 30] * 30)
        d1 = np.array([0.0] * 20 + [0.45 / 20] * 20 + [0.55 / 30] * 30)
        dists = [d0 / d0.sum(), d1 / d1.sum()]
        # unlabeled pool: same vocabulary, shifted frequencies (flatter topics,
        # heavier common words), mixing both classes
        u0 = np.array([0.35 / 20] * 20 + [0.05 / 20] * 20 + [0.6 / 30] * 30)
        u1 = np.array([0.05 / 20] * 20 + [0.35 / 20] * 20 + [0.6 / 30] * 30)
        udists = [u0 / u0.sum(), u1 / u1.sum()]
        task = SyntheticTask(
            "domain-shift", 2, words, dists,
            _pool(words, dists, train_n, rng, lo=3, hi=8),
            _pool(words, dists, eval_n, rng, lo=3, hi=8),
            _pool(words, udists, unlabeled_n, rng, labeled=False, lo=3, hi=8),
        )
        return task
    raise ValueError(f"unknown synthetic task kind: {kind!r}")


# ---------------------------------------------------------------------------
# protocol


@dataclass
class ProtocolConfig:
    """Everything a (subset, seed) run needs beyond the task itself."""

    train: TrainConfig
    encoder: EncoderConfig
    metric: str = "acc"
    subset_size: int = 100
    num_subsets: int = DEFAULT_NUM_SUBSETS
    seeds: tuple[int, ...] = DEFAULT_SEEDS
    dev_size: int = 500
    vocab_size: int = 400
    max_len: int = 16
    post_train_epochs: int = 1
    post_train_batch_size: int = 8
    fine_tune_epochs: int = 8
    fine_tune_batch_size: int = 16
    protocol_seed: int = 0

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["train"] = dict(self.train.__dict__)
        d["encoder"] = self.encoder.to_dict()
        d["seeds"] = list(self.seeds)
        return d


def _method_objective(method: str) -> str:
    base = method.split(":", 1)[0]
    if method == "ft":
        return "none"
    if method in ("tapt", "cmlm", "cmlm:drm") or (base == "cssl" and ":" in method):
        return method
    raise ProtocolError(
        f"unsupported method: {method!r} (expected ft, tapt, cmlm, cmlm:drm, or cssl:<augmenter>)"
    )


def _run_one(args) -> float:
    """One (subset, seed) run: optional post-training, fine-tune, test metric."""
    (method, subset, dev, test, post_texts, vocab_tokens, pconf) = args
    vocab = Vocabulary(vocab_tokens)
    seed_value, subset_idx, run_seed = pconf["seed_value"], pconf["subset_idx"], pconf["run_seed"]
    encoder_cfg = EncoderConfig.from_dict(pconf["encoder"])
    params = init_params(encoder_cfg, np.random.default_rng((run_seed, _TAG_INIT, subset_idx)))

    objective = _method_objective(method)
    if objective != "none":
        tc = TrainConfig(**{**pconf["train"], "objective": objective,
                            "epochs": pconf["post_train_epochs"],
                            "batch_size": pconf["post_train_batch_size"],
                            "seed": seed_value})
        seqs = [encode(ex, vocab, pconf["max_len"]) for ex in post_texts]
        post_train(params, seqs, tc, vocab, rng=seed_value)

    ft_cfg = TrainConfig(**{**pconf["train"], "objective": "none",
                            "epochs": pconf["fine_tune_epochs"],
                            "batch_size": pconf["fine_tune_batch_size"],
                            "seed": seed_value + 1})
    train_pairs = sequences_and_labels(subset, vocab, pconf["max_len"])
    dev_pairs = sequences_and_labels(dev, vocab, pconf["max_len"])
    result = fine_tune(params, train_pairs, dev_pairs, ft_cfg, rng=seed_value + 1)

    test_pairs = sequences_and_labels(test, vocab, pconf["max_len"])
    preds = predict(result.params, [s for s, _ in test_pairs])
    golds = [y for _, y in test_pairs]
    return METRICS[pconf["metric"]](preds, golds)


def run_protocol(
    task: SyntheticTask,
    method: str,
    config: ProtocolConfig,
    jobs: int = 1,
    resolved_config: dict | None = None,
) -> dict:
    """Full protocol: num_subsets subsets x seeds runs, aggregated mean +- std.

    ``resolved_config`` overrides the config echoed into the report (the CLI
    passes its flat run config so reports are rerunnable from their echo).
    """
    _method_objective(method)  # validate early
    if config.metric not in METRICS:
        raise ProtocolError(f"unknown metric: {config.metric!r}")
    rng = np.random.default_rng((config.protocol_seed, _TAG_PROTOCOL))
    split = sample_few_shot(
        task.train_pool, task.eval_pool, config.subset_size, config.num_subsets, rng, config.dev_size
    )
    vocab = build_vocab(task.texts(), config.vocab_size)
    encoder_cfg = replace(config.encoder, num_classes=task.num_classes)

    warnings = []
    for i, subset in enumerate(split.subsets):
        present = {ex.label for ex in subset}
        missing = sorted(set(range(task.num_classes)) - present)
        if missing:
            warnings.append(f"subset {i} missing classes {missing}")

    run_args = []
    base = {
        "train": dict(config.train.__dict__),
        "encoder": encoder_cfg.to_dict(),
        "metric": config.metric,
        "max_len": config.max_len,
        "post_train_epochs": config.post_train_epochs,
        "post_train_batch_size": config.post_train_batch_size,
        "fine_tune_epochs": config.fine_tune_epochs,
        "fine_tune_batch_size": config.fine_tune_batch_size,
    }
    post_texts = task.unlabeled_pool if task.unlabeled_pool else None
    for subset_idx, subset in enumerate(split.subsets):
        for seed in config.seeds:
            pconf = dict(base)
            pconf.update({"seed_value": int(seed), "subset_idx": subset_idx,
                          "run_seed": int(seed) * 1000 + subset_idx})
            texts = post_texts if post_texts is not None else subset
            run_args.append((method, subset, split.dev, split.test, texts, list(vocab.id_to_token), pconf))

    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            values = list(pool.map(_run_one, run_args))
    else:
        values = [_run_one(a) for a in run_args]

    records = []
    i = 0
    for subset_idx in range(config.num_subsets):
        for seed in config.seeds:
            records.append({"seed": int(seed), "subset": subset_idx,
                            "metric": config.metric, "value": float(values[i])})
            i += 1
    vals = np.array([r["value"] for r in records], dtype=np.float64)
    if resolved_config is not None:
        resolved = dict(resolved_config)
    else:
        resolved = config.to_dict()
    resolved["method"] = method
    report = {
        "task": task.name,
        "method": method,
        "subset_size": config.subset_size,
        "records": records,
        "mean": float(vals.mean()),
        "std": float(vals.std()),  # population std over the fixed run census
        "std_kind": "population",
        "warnings": warnings,
        "resolved_config": resolved,
        "config_fingerprint": config_fingerprint(resolved),
        "timestamp": datetime.now(timezone.utc).isoformat(),
    }
    return report


def config_fingerprint(resolved: dict) -> str:
    blob = json.dumps(resolved, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


def report_to_json(report: dict) -> str:
    return json.dumps(report, sort_keys=True, indent=2) + "\n"


def sweep(
    task: SyntheticTask,
    axis: str,
    values: list,
    method: str,
    config: ProtocolConfig,
    jobs: int = 1,
) -> list[dict]:
    """run_protocol per swept value; rows carry (value, mean, std, fingerprint)."""
    if axis not in SWEEP_AXES:
        raise ProtocolError(f"unknown sweep axis: {axis!r} (choose from {SWEEP_AXES})")
    if not values:
        raise ProtocolError("sweep needs at least one value")
    rows = []
    for v in values:
        if axis == "unlabeled_count":
            n = int(v)
            if n > len(task.unlabeled_pool):
                raise ProtocolError(f"unlabeled_count {n} exceeds pool of {len(task.unlabeled_pool)}")
            swept_task = replace(task, unlabeled_pool=task.unlabeled_pool[:n])
            swept_config = config
        else:
            swept_task = task
            field_name = {"K": "K", "alpha": "alpha", "p_c": "p_c"}[axis]
            swept_config = replace(config, train=replace(config.train, **{field_name: type(getattr(config.train, field_name))(v)}))
        report = run_protocol(swept_task, method, swept_config, jobs=jobs)
        rows.append({
            "axis": axis,
            "value": v,
            "mean": report["mean"],
            "std": report["std"],
            "config_fingerprint": report["config_fingerprint"],
        })
    return rows
