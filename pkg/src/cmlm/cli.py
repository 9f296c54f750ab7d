"""Command-line entry point for batch and CI use.

Exit codes: 0 success, 1 usage/config error, 2 runtime/data error,
3 verification failure (grad-check). Config files are flat JSON documents;
unknown keys are hard errors. CMLM_SEED is the global seed fallback.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace

import numpy as np

from . import audits, experiment
from .autograd import Tensor
from .data import DataError, build_vocab, encode, load_jsonl, load_vocab, save_vocab
from .encoder import EncoderConfig, EncoderParams, init_params, param_shapes
from .masking import make_crm_batch, render_masked_pair
from .training import (
    CheckpointError,
    TrainConfig,
    checkpoint_from_params,
    fine_tune,
    load_checkpoint,
    params_from_checkpoint,
    post_train,
    predict,
    save_checkpoint,
    sequences_and_labels,
)

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_VERIFY = 0, 1, 2, 3


class ConfigError(ValueError):
    """Unknown key, bad type, or out-of-range value in a run config."""


def _seed_default() -> int:
    env = os.environ.get("CMLM_SEED")
    return int(env) if env else 0


# key -> (type, default); None defaults are resolved by rules below
CONFIG_SCHEMA: dict[str, tuple[type, object]] = {
    "seed": (int, None),
    "objective": (str, "cmlm"),
    "method": (str, "ft"),
    "alpha": (float, 0.5),
    "p_m": (float, 0.15),
    "p_c": (float, 0.7),
    "K": (int, 1),
    "tau": (float, 0.1),
    "cl_variant": (str, "simsiam"),
    "eda_rate": (float, 0.1),
    "learning_rate": (float, 1e-5),
    "weight_decay": (float, 0.01),
    "grad_clip": (float, 0.0),
    "dropout": (float, 0.1),
    "post_train_epochs": (int, None),
    "post_train_batch_size": (int, 8),
    "fine_tune_epochs": (int, None),
    "fine_tune_batch_size": (int, 16),
    "checkpoint_interval": (int, 100),
    "layers": (int, 2),
    "heads": (int, 4),
    "hidden": (int, 64),
    "ffn": (int, 256),
    "vocab_size": (int, 2000),
    "max_len": (int, 64),
    "ln_eps": (float, 1e-5),
    "task": (str, "separable"),
    "task_seed": (int, 7),
    "train_pool": (int, 200),
    "eval_pool": (int, 200),
    "unlabeled_pool": (int, 0),
    "subset_size": (int, 100),
    "num_subsets": (int, 5),
    "seeds": (list, [31, 42, 53]),
    "dev_size": (int, 500),
    "metric": (str, "acc"),
    "vocab": (str, None),
}


def _default_epochs(subset_size: int) -> tuple[int, int]:
    """(post-train, fine-tune) epoch defaults by labeled-subset size."""
    if subset_size <= 20:
        return 200, 350
    if subset_size <= 100:
        return 50, 100
    return 5, 10


def resolve_config(raw: dict) -> dict:
    for key in raw:
        if key not in CONFIG_SCHEMA:
            raise ConfigError(f"unknown config key: {key!r}")
    resolved: dict = {}
    for key, (typ, default) in CONFIG_SCHEMA.items():
        if key in raw:
            value = raw[key]
            if typ is float and isinstance(value, int) and not isinstance(value, bool):
                value = float(value)
            if typ is list:
                if not isinstance(value, list) or not all(isinstance(v, int) for v in value):
                    raise ConfigError(f"config key {key!r} must be a list of integers")
            elif value is not None and (not isinstance(value, typ) or isinstance(value, bool)):
                raise ConfigError(f"config key {key!r} must be {typ.__name__}, got {type(value).__name__}")
            resolved[key] = value
        else:
            resolved[key] = default
    if resolved["seed"] is None:
        resolved["seed"] = _seed_default()
    if resolved["seed"] < 0 or any(s < 0 for s in resolved["seeds"]):
        raise ConfigError("seeds must be non-negative")
    pt, ft = _default_epochs(resolved["subset_size"])
    if resolved["post_train_epochs"] is None:
        resolved["post_train_epochs"] = pt
    if resolved["fine_tune_epochs"] is None:
        resolved["fine_tune_epochs"] = ft
    return resolved


def load_config(path: str) -> dict:
    try:
        with open(path, encoding="utf-8") as f:
            raw = json.load(f)
    except OSError as e:
        raise DataError(f"cannot read config {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"config {path} is not valid JSON: {e}") from e
    if not isinstance(raw, dict):
        raise ConfigError(f"config {path} must be a flat JSON object")
    return resolve_config(raw)


def _train_config(cfg: dict, objective: str, epochs: int, batch_size: int, seed: int) -> TrainConfig:
    try:
        return TrainConfig(
            learning_rate=cfg["learning_rate"], epochs=epochs, batch_size=batch_size,
            alpha=cfg["alpha"], p_m=cfg["p_m"], p_c=cfg["p_c"], K=cfg["K"], tau=cfg["tau"],
            cl_variant=cfg["cl_variant"], objective=objective, seed=seed,
            weight_decay=cfg["weight_decay"], dropout=cfg["dropout"],
            checkpoint_interval=cfg["checkpoint_interval"], grad_clip=cfg["grad_clip"],
            eda_rate=cfg["eda_rate"],
        )
    except ValueError as e:
        raise ConfigError(str(e)) from e


def _encoder_config(cfg: dict, vocab_size: int, num_classes: int = 0) -> EncoderConfig:
    try:
        return EncoderConfig(
            layers=cfg["layers"], heads=cfg["heads"], hidden=cfg["hidden"], ffn=cfg["ffn"],
            vocab=vocab_size, max_len=cfg["max_len"], dropout=cfg["dropout"],
            ln_eps=cfg["ln_eps"], num_classes=num_classes,
        )
    except ValueError as e:
        raise ConfigError(str(e)) from e


def _resolve_vocab(cfg: dict, texts: list[str]):
    if cfg["vocab"]:
        return load_vocab(cfg["vocab"])
    return build_vocab(texts, cfg["vocab_size"])


def _with_classifier(params: EncoderParams, num_classes: int, rng: np.random.Generator) -> EncoderParams:
    """Attach a fresh classifier head unless one of matching width exists."""
    if params.config.num_classes == num_classes:
        return params
    cfg = replace(params.config, num_classes=num_classes)
    tensors = {n: t for n, t in params.items() if not n.startswith("classifier.")}
    d = cfg.hidden
    tensors["classifier.w"] = Tensor(
        rng.normal(0.0, 0.02, size=(d, num_classes)).astype(np.float32), requires_grad=True, name="classifier.w"
    )
    tensors["classifier.b"] = Tensor(np.zeros(num_classes, dtype=np.float32), requires_grad=True, name="classifier.b")
    ordered = {n: tensors[n] for n in param_shapes(cfg)}
    return EncoderParams(cfg, ordered)


# ---------------------------------------------------------------------------
# commands


def cmd_build_vocab(args) -> int:
    examples, _ = load_jsonl(args.input, allow_unlabeled=True)
    texts = [ex.text_a + (" " + ex.text_b if ex.text_b else "") for ex in examples]
    vocab = build_vocab(texts, args.max_size)
    save_vocab(vocab, args.out)
    print(f"wrote {vocab.size} tokens to {args.out}")
    return EXIT_OK


def cmd_mask(args) -> int:
    if not 0.0 <= args.pm <= 1.0 or not 0.0 <= args.pc <= 1.0:
        raise ConfigError(f"probabilities must be in [0, 1]: --pm {args.pm} --pc {args.pc}")
    if args.k < 1:
        raise ConfigError(f"--k must be >= 1, got {args.k}")
    vocab = load_vocab(args.vocab)
    examples, _ = load_jsonl(args.input, allow_unlabeled=True)
    rng = np.random.default_rng(args.seed)
    for i, ex in enumerate(examples):
        seq = encode(ex, vocab, args.max_len)
        t0, tks = make_crm_batch(seq, args.k, args.pm, args.pc, vocab, rng)
        print(f"## example {i}")
        print(render_masked_pair(seq, [t0, *tks], vocab))
    return EXIT_OK


def cmd_post_train(args) -> int:
    cfg = load_config(args.config)
    if cfg["objective"].split(":", 1)[0] not in ("cmlm", "tapt", "cssl"):
        raise ConfigError(f"objective {cfg['objective']!r} is not a post-training objective")
    examples, _ = load_jsonl(args.data, allow_unlabeled=True)
    texts = [ex.text_a + (" " + ex.text_b if ex.text_b else "") for ex in examples]
    vocab = _resolve_vocab(cfg, texts)
    encoder_cfg = _encoder_config(cfg, vocab.size)
    params = init_params(encoder_cfg, np.random.default_rng((cfg["seed"], 0)))
    tc = _train_config(cfg, cfg["objective"], cfg["post_train_epochs"], cfg["post_train_batch_size"], cfg["seed"])
    seqs = [encode(ex, vocab, cfg["max_len"]) for ex in examples]
    result = post_train(params, seqs, tc, vocab)
    snapshot = {"run": cfg, "vocab": list(vocab.id_to_token), "labels": []}
    ckpt = checkpoint_from_params(params, snapshot, step=result.step, rng_state=result.rng_state)
    save_checkpoint(ckpt, args.out)
    first, last = result.trace[0]["total"], result.trace[-1]["total"]
    print(f"post-trained {result.step} steps; loss {first:.4f} -> {last:.4f}; wrote {args.out}")
    return EXIT_OK


def cmd_fine_tune(args) -> int:
    cfg = load_config(args.config)
    train_examples, label_names = load_jsonl(args.train)
    dev_examples, label_names = load_jsonl(args.dev, label_names=label_names)
    num_classes = len(label_names)
    if num_classes < 2:
        raise DataError(f"need at least 2 classes to fine-tune, got {num_classes}")
    if args.init:
        ckpt = load_checkpoint(args.init)
        params = params_from_checkpoint(ckpt)
        vocab = load_vocab_tokens(ckpt.config.get("vocab"))
    else:
        vocab = _resolve_vocab(cfg, [ex.text_a + (" " + ex.text_b if ex.text_b else "") for ex in train_examples])
        params = init_params(_encoder_config(cfg, vocab.size), np.random.default_rng((cfg["seed"], 0)))
    params = _with_classifier(params, num_classes, np.random.default_rng((cfg["seed"], 1)))
    tc = _train_config(cfg, "none", cfg["fine_tune_epochs"], cfg["fine_tune_batch_size"], cfg["seed"])
    train_pairs = sequences_and_labels(train_examples, vocab, cfg["max_len"])
    dev_pairs = sequences_and_labels(dev_examples, vocab, cfg["max_len"])
    result = fine_tune(params, train_pairs, dev_pairs, tc)
    snapshot = {"run": cfg, "vocab": list(vocab.id_to_token), "labels": label_names}
    ckpt = checkpoint_from_params(result.params, snapshot, step=result.best_step, rng_state=result.rng_state)
    save_checkpoint(ckpt, args.out)
    print(f"best dev accuracy {result.best_metric:.4f} at step {result.best_step}; wrote {args.out}")
    return EXIT_OK


def load_vocab_tokens(tokens):
    from .data import Vocabulary

    if not tokens:
        raise DataError("checkpoint carries no vocabulary")
    return Vocabulary(list(tokens))


def cmd_evaluate(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    params = params_from_checkpoint(ckpt)
    if params.config.num_classes <= 0:
        raise DataError(f"{args.ckpt}: checkpoint has no classifier head; fine-tune first")
    vocab = load_vocab_tokens(ckpt.config.get("vocab"))
    label_names = list(ckpt.config.get("labels") or [])
    max_len = int(ckpt.config.get("run", {}).get("max_len", params.config.max_len))
    examples, label_names = load_jsonl(args.test, label_names=label_names)
    if len(label_names) > params.config.num_classes:
        raise DataError("test set contains labels unseen at fine-tuning time")
    pairs = sequences_and_labels(examples, vocab, max_len)
    preds = predict(params, [s for s, _ in pairs])
    golds = [y for _, y in pairs]
    value = experiment.METRICS[args.metric](preds, golds)
    print(f"{args.metric}: {value:.6f} over {len(golds)} examples")
    return EXIT_OK


def _protocol_config(cfg: dict) -> experiment.ProtocolConfig:
    tc = _train_config(cfg, "cmlm" if cfg["alpha"] > 0 else "tapt", 1, cfg["post_train_batch_size"], cfg["seed"])
    enc = _encoder_config(cfg, cfg["vocab_size"])
    return experiment.ProtocolConfig(
        train=tc, encoder=enc, metric=cfg["metric"], subset_size=cfg["subset_size"],
        num_subsets=cfg["num_subsets"], seeds=tuple(cfg["seeds"]), dev_size=cfg["dev_size"],
        vocab_size=cfg["vocab_size"], max_len=cfg["max_len"],
        post_train_epochs=cfg["post_train_epochs"], post_train_batch_size=cfg["post_train_batch_size"],
        fine_tune_epochs=cfg["fine_tune_epochs"], fine_tune_batch_size=cfg["fine_tune_batch_size"],
        protocol_seed=cfg["seed"],
    )


def _make_task(cfg: dict) -> experiment.SyntheticTask:
    sizes = {"train_pool": cfg["train_pool"], "eval_pool": cfg["eval_pool"], "unlabeled_pool": cfg["unlabeled_pool"]}
    try:
        return experiment.make_synthetic_task(cfg["task"], sizes, np.random.default_rng((cfg["task_seed"], 99)))
    except ValueError as e:
        raise ConfigError(str(e)) from e


def cmd_run_experiment(args) -> int:
    cfg = load_config(args.config)
    method = args.method or cfg["method"]
    cfg["method"] = method
    try:
        experiment._method_objective(method)
    except experiment.ProtocolError as e:
        raise ConfigError(str(e)) from e
    task = _make_task(cfg)
    report = experiment.run_protocol(task, method, _protocol_config(cfg), jobs=args.jobs, resolved_config=cfg)
    with open(args.out, "w", encoding="utf-8") as f:
        f.write(experiment.report_to_json(report))
    print(f"{task.name} / {method} / size {cfg['subset_size']}: "
          f"{report['mean']:.4f} +- {report['std']:.4f} over {len(report['records'])} runs; wrote {args.out}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = load_config(args.config)
    method = args.method or cfg["method"]
    cfg["method"] = method
    values = []
    for item in args.values.split(","):
        item = item.strip()
        if not item:
            continue
        values.append(int(item) if args.axis in ("unlabeled_count", "K") else float(item))
    if not values:
        raise ConfigError("--values must list at least one number")
    task = _make_task(cfg)
    try:
        rows = experiment.sweep(task, args.axis, values, method, _protocol_config(cfg), jobs=args.jobs)
    except experiment.ProtocolError as e:
        raise ConfigError(str(e)) from e
    with open(args.out, "w", encoding="utf-8") as f:
        f.write(json.dumps(rows, sort_keys=True, indent=2) + "\n")
    for row in rows:
        print(f"{args.axis}={row['value']}: {row['mean']:.4f} +- {row['std']:.4f}")
    return EXIT_OK


def cmd_grad_check(args) -> int:
    if args.precision != 64:
        raise ConfigError("only 64-bit audits are supported (tolerances are defined at float64)")
    results = audits.run_audits(args.scope, seed=args.seed)
    worst = max(results, key=lambda r: r.error / r.tolerance)
    failed = [r for r in results if not r.passed]
    for r in results:
        status = "ok" if r.passed else "FAIL"
        print(f"{status:4} {r.name:24} rel_err={r.error:.3e} tol={r.tolerance:.0e}")
    if failed:
        print(f"worst offender: {worst.name} rel_err={worst.error:.3e} (tol {worst.tolerance:.0e})", file=sys.stderr)
        return EXIT_VERIFY
    print(f"all {len(results)} audits passed; worst {worst.name} at {worst.error:.3e}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse defaults to exit code 2; usage errors are 1 here
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="cmlm", description="Complementary-masking post-training laboratory")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("build-vocab", help="build a vocabulary file from JSONL text")
    sp.add_argument("--input", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--max-size", type=int, default=2000)
    sp.set_defaults(fn=cmd_build_vocab)

    sp = sub.add_parser("mask", help="print aligned original / T^0 / T^k rows")
    sp.add_argument("--input", required=True)
    sp.add_argument("--vocab", required=True)
    sp.add_argument("--pm", type=float, default=0.15)
    sp.add_argument("--pc", type=float, default=0.7)
    sp.add_argument("--k", type=int, default=1)
    sp.add_argument("--seed", type=int, default=_seed_default())
    sp.add_argument("--max-len", type=int, default=64)
    sp.set_defaults(fn=cmd_mask)

    sp = sub.add_parser("post-train", help="post-train an encoder on unlabeled JSONL text")
    sp.add_argument("--config", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_post_train)

    sp = sub.add_parser("fine-tune", help="fine-tune a classifier head")
    sp.add_argument("--config", required=True)
    sp.add_argument("--train", required=True)
    sp.add_argument("--dev", required=True)
    sp.add_argument("--init", default=None, help="optional checkpoint to start from")
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_fine_tune)

    sp = sub.add_parser("evaluate", help="evaluate a fine-tuned checkpoint on JSONL test data")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--test", required=True)
    sp.add_argument("--metric", choices=sorted(experiment.METRICS), default="acc")
    sp.set_defaults(fn=cmd_evaluate)

    sp = sub.add_parser("run-experiment", help="run the few-shot protocol on a synthetic task")
    sp.add_argument("--config", required=True)
    sp.add_argument("--method", default=None,
                    help="ft, tapt, cmlm, cmlm:drm (no-complement ablation), or cssl:<augmenter>")
    sp.add_argument("--out", required=True)
    sp.add_argument("--jobs", type=int, default=1)
    sp.set_defaults(fn=cmd_run_experiment)

    sp = sub.add_parser("sweep", help="run the protocol across one hyperparameter axis")
    sp.add_argument("--config", required=True)
    sp.add_argument("--axis", choices=experiment.SWEEP_AXES, required=True)
    sp.add_argument("--values", required=True, help="comma-separated values")
    sp.add_argument("--method", default=None)
    sp.add_argument("--out", required=True)
    sp.add_argument("--jobs", type=int, default=1)
    sp.set_defaults(fn=cmd_sweep)

    sp = sub.add_parser("grad-check", help="finite-difference gradient audits")
    sp.add_argument("--scope", choices=audits.SCOPES, required=True)
    sp.add_argument("--precision", type=int, default=64)
    sp.add_argument("--seed", type=int, default=_seed_default())
    sp.set_defaults(fn=cmd_grad_check)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"cmlm: config error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CheckpointError, OSError) as e:
        print(f"cmlm: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except (ValueError, FloatingPointError) as e:
        print(f"cmlm: runtime error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
