"""Tokenization, vocabulary, JSONL ingestion, and few-shot subset sampling."""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

SPECIAL_TOKENS = ("[BOS]", "[SEP]", "[MASK]", "[PAD]", "[UNK]")
BOS_ID, SEP_ID, MASK_ID, PAD_ID, UNK_ID = range(5)
NUM_SPECIALS = len(SPECIAL_TOKENS)


class DataError(ValueError):
    """Malformed dataset or vocabulary input."""


@dataclass
class Vocabulary:
    """Dense token ids 0..V-1; ids 0-4 are BOS, SEP, MASK, PAD, UNK."""

    id_to_token: list[str]
    token_to_id: dict[str, int] = field(init=False)

    def __post_init__(self):
        if tuple(self.id_to_token[:NUM_SPECIALS]) != SPECIAL_TOKENS:
            raise DataError(f"vocabulary must start with specials {SPECIAL_TOKENS}")
        self.token_to_id = {tok: i for i, tok in enumerate(self.id_to_token)}
        if len(self.token_to_id) != len(self.id_to_token):
            raise DataError("duplicate tokens in vocabulary")

    @property
    def size(self) -> int:
        return len(self.id_to_token)

    @property
    def num_non_special(self) -> int:
        return self.size - NUM_SPECIALS

    def id_of(self, token: str) -> int:
        return self.token_to_id.get(token, UNK_ID)

    def token_of(self, idx: int) -> str:
        return self.id_to_token[idx]


def build_vocab(corpus: list[str], max_size: int) -> Vocabulary:
    """Keep the most frequent lowercased whitespace tokens (ties lexicographic).

    Specials take ids 0-4, so at most max_size - 5 corpus tokens survive.
    """
    if not corpus:
        raise DataError("empty corpus")
    if max_size <= NUM_SPECIALS:
        raise DataError(f"max_size must exceed {NUM_SPECIALS}, got {max_size}")
    counts = Counter()
    for text in corpus:
        for tok in text.lower().split():
            if tok in SPECIAL_TOKENS:
                continue
            counts[tok] += 1
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    kept = [tok for tok, _ in ranked[: max_size - NUM_SPECIALS]]
    return Vocabulary(list(SPECIAL_TOKENS) + kept)


def save_vocab(vocab: Vocabulary, path: str) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for tok in vocab.id_to_token:
            f.write(tok + "\n")


def load_vocab(path: str) -> Vocabulary:
    with open(path, encoding="utf-8") as f:
        tokens = [line.rstrip("\n") for line in f if line.rstrip("\n")]
    return Vocabulary(tokens)


@dataclass
class LabeledExample:
    text_a: str
    text_b: str | None = None
    label: int | None = None


@dataclass
class TokenSequence:
    """Fixed-length id row: [BOS, a..., (SEP, b...)?, PAD...].

    ``maskable`` is False at BOS/SEP/PAD positions.
    """

    ids: np.ndarray
    maskable: np.ndarray

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.maskable = np.asarray(self.maskable, dtype=bool)
        if self.ids.shape != self.maskable.shape or self.ids.ndim != 1:
            raise DataError(f"ids {self.ids.shape} vs maskable {self.maskable.shape}")
        if self.ids[0] != BOS_ID:
            raise DataError("sequence must start with BOS")
        pad = self.ids == PAD_ID
        if pad.any() and not pad[int(np.argmax(pad)) :].all():
            raise DataError("PAD ids must form a contiguous suffix")
        if int((self.ids == SEP_ID).sum()) > 1:
            raise DataError("at most one SEP separator allowed")
        if self.maskable[pad].any() or self.maskable[0] or self.maskable[self.ids == SEP_ID].any():
            raise DataError("BOS/SEP/PAD positions cannot be maskable")

    def __len__(self) -> int:
        return int(self.ids.shape[0])

    @property
    def pad_mask(self) -> np.ndarray:
        """True at PAD positions (always a contiguous suffix)."""
        return self.ids == PAD_ID

    @property
    def n_real(self) -> int:
        return int((~self.pad_mask).sum())


def encode(example: LabeledExample, vocab: Vocabulary, max_len: int) -> TokenSequence:
    """Lay out [BOS, a, (SEP, b)?, PAD...]; overflow drops the longer segment's tail."""
    if max_len < 3:
        raise DataError(f"max_len must be >= 3, got {max_len}")
    seg_a = example.text_a.lower().split()
    seg_b = example.text_b.lower().split() if example.text_b is not None else None
    budget = max_len - 1 - (1 if seg_b is not None else 0)
    while len(seg_a) + (len(seg_b) if seg_b is not None else 0) > budget:
        if seg_b is not None and len(seg_b) >= len(seg_a):
            seg_b.pop()
        else:
            seg_a.pop()
    ids = [BOS_ID] + [vocab.id_of(t) for t in seg_a]
    maskable = [False] + [True] * len(seg_a)
    if seg_b is not None:
        ids += [SEP_ID] + [vocab.id_of(t) for t in seg_b]
        maskable += [False] + [True] * len(seg_b)
    pad = max_len - len(ids)
    ids += [PAD_ID] * pad
    maskable += [False] * pad
    return TokenSequence(np.array(ids), np.array(maskable))


def decode(ids, vocab: Vocabulary) -> list[str]:
    """Tokens of the non-PAD, non-special region, in order."""
    out = []
    for i in np.asarray(ids, dtype=np.int64):
        if i in (BOS_ID, SEP_ID, PAD_ID):
            continue
        out.append(vocab.token_of(int(i)))
    return out


@dataclass
class FewShotSplit:
    subsets: list[list[LabeledExample]]
    dev: list[LabeledExample]
    test: list[LabeledExample]
    subset_size: int
    num_subsets: int


def sample_few_shot(
    train_pool: list[LabeledExample],
    eval_pool: list[LabeledExample],
    size: int,
    num_subsets: int,
    rng: np.random.Generator,
    dev_size: int = 500,
) -> FewShotSplit:
    """Draw ``num_subsets`` training subsets of ``size`` with replacement.

    The dev set is sampled without replacement from the eval pool (all of it
    if the pool is smaller than ``dev_size``); the remainder is the test set,
    shared by every subset.
    """
    if size < 1:
        raise DataError(f"subset size must be >= 1, got {size}")
    if num_subsets < 1:
        raise DataError(f"num_subsets must be >= 1, got {num_subsets}")
    if len(train_pool) < size:
        raise DataError(f"train pool has {len(train_pool)} examples, need >= {size}")
    subsets = []
    for _ in range(num_subsets):
        idx = rng.integers(0, len(train_pool), size=size)
        subsets.append([train_pool[int(i)] for i in idx])
    perm = rng.permutation(len(eval_pool))
    n_dev = min(dev_size, len(eval_pool))
    dev = [eval_pool[int(i)] for i in perm[:n_dev]]
    test = [eval_pool[int(i)] for i in perm[n_dev:]]
    if not test:
        raise DataError(f"eval pool of {len(eval_pool)} leaves an empty test set at dev_size {dev_size}")
    return FewShotSplit(subsets, dev, test, size, num_subsets)


def load_jsonl(
    path: str, allow_unlabeled: bool = False, label_names: list[str] | None = None
) -> tuple[list[LabeledExample], list[str]]:
    """Read one object per line: text_a (required), text_b (optional), label.

    The label vocabulary is built in first-seen order; labels may be strings
    or integers. Pass ``label_names`` to continue an existing vocabulary so
    dev or test files map onto the training label ids. ``allow_unlabeled``
    lets records omit the label entirely (post-training data never reads it).
    """
    examples: list[LabeledExample] = []
    label_names = list(label_names or [])
    label_ids: dict[str, int] = {name: i for i, name in enumerate(label_names)}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise DataError(f"{path}:{lineno}: invalid JSON: {e}") from e
            if "text_a" not in obj or not isinstance(obj["text_a"], str):
                raise DataError(f"{path}:{lineno}: missing or non-string text_a")
            text_b = obj.get("text_b")
            if text_b is not None and not isinstance(text_b, str):
                raise DataError(f"{path}:{lineno}: text_b must be a string")
            if "label" not in obj:
                if not allow_unlabeled:
                    raise DataError(f"{path}:{lineno}: missing label")
                label = None
            else:
                key = str(obj["label"])
                if key not in label_ids:
                    label_ids[key] = len(label_names)
                    label_names.append(key)
                label = label_ids[key]
            examples.append(LabeledExample(obj["text_a"], text_b, label))
    if not examples:
        raise DataError(f"{path}: no examples")
    return examples, label_names
