"""Dynamic and complementary random masking, plus sequence augmenters.

DRM selects each maskable position independently with probability p_m.
CRM selects with probability p_c only at maskable positions the base
pattern did NOT select, so base and complement views never overlap.
Selected positions get the BERT replacement rule: 80% MASK, 10% keep,
10% a random non-special vocabulary token. Special positions (BOS, SEP,
PAD) are never selected and never altered.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .data import BOS_ID, MASK_ID, NUM_SPECIALS, PAD_ID, SEP_ID, TokenSequence, Vocabulary

LABEL_IGNORE = -1


class MaskAction(enum.IntEnum):
    MASK = 0
    KEEP = 1
    RANDOM = 2


NO_ACTION = -1  # actions array value at unselected positions


@dataclass
class MaskPattern:
    """selected[i] marks chosen positions; actions[i] is a MaskAction there, -1 elsewhere."""

    selected: np.ndarray
    actions: np.ndarray

    def __post_init__(self):
        self.selected = np.asarray(self.selected, dtype=bool)
        self.actions = np.asarray(self.actions, dtype=np.int8)
        if self.selected.shape != self.actions.shape:
            raise ValueError(f"selected {self.selected.shape} vs actions {self.actions.shape}")


@dataclass
class MaskedSequence:
    """A corrupted view of ``source`` plus the MLM labels it implies."""

    source: TokenSequence
    ids: np.ndarray
    pattern: MaskPattern
    labels: np.ndarray  # original id at selected positions, LABEL_IGNORE elsewhere

    @property
    def maskable(self) -> np.ndarray:
        return self.source.maskable

    @property
    def pad_mask(self) -> np.ndarray:
        return self.source.pad_mask

    def __len__(self) -> int:
        return int(self.ids.shape[0])


def apply_replacement(
    selected_positions: np.ndarray, vocab: Vocabulary, rng: np.random.Generator
) -> list[tuple[MaskAction, int | None]]:
    """Draw the 80/10/10 action per selected position, in position order.

    Returns (action, replacement id) pairs; the id is set only for RANDOM and
    is drawn uniformly from non-special vocabulary ids.
    """
    out: list[tuple[MaskAction, int | None]] = []
    for _ in np.asarray(selected_positions).reshape(-1):
        u = rng.random()
        if u < 0.8:
            out.append((MaskAction.MASK, None))
        elif u < 0.9:
            out.append((MaskAction.KEEP, None))
        else:
            if vocab.num_non_special == 0:
                raise ValueError("vocabulary has no non-special tokens to draw from")
            out.append((MaskAction.RANDOM, int(rng.integers(NUM_SPECIALS, vocab.size))))
    return out


def _corrupt(seq: TokenSequence, selected: np.ndarray, vocab: Vocabulary, rng: np.random.Generator) -> MaskedSequence:
    n = len(seq)
    positions = np.flatnonzero(selected)
    pairs = apply_replacement(positions, vocab, rng)
    ids = seq.ids.copy()
    actions = np.full(n, NO_ACTION, dtype=np.int8)
    labels = np.full(n, LABEL_IGNORE, dtype=np.int64)
    for pos, (action, rand_id) in zip(positions, pairs):
        actions[pos] = int(action)
        labels[pos] = seq.ids[pos]
        if action is MaskAction.MASK:
            ids[pos] = MASK_ID
        elif action is MaskAction.RANDOM:
            ids[pos] = rand_id
    return MaskedSequence(seq, ids, MaskPattern(selected, actions), labels)


def drm(seq: TokenSequence, p_m: float, vocab: Vocabulary, rng: np.random.Generator) -> MaskedSequence:
    """Select each maskable position independently with probability p_m."""
    if not 0.0 <= p_m <= 1.0:
        raise ValueError(f"p_m must be in [0, 1], got {p_m}")
    selected = seq.maskable & (rng.random(len(seq)) < p_m)
    return _corrupt(seq, selected, vocab, rng)


def crm(
    seq: TokenSequence, base: MaskPattern, p_c: float, vocab: Vocabulary, rng: np.random.Generator
) -> MaskedSequence:
    """Select with probability p_c only where maskable and not selected in ``base``."""
    if not 0.0 <= p_c <= 1.0:
        raise ValueError(f"p_c must be in [0, 1], got {p_c}")
    if base.selected.shape[0] != len(seq):
        raise ValueError(f"base pattern length {base.selected.shape[0]} vs sequence length {len(seq)}")
    eligible = seq.maskable & ~base.selected
    selected = eligible & (rng.random(len(seq)) < p_c)
    return _corrupt(seq, selected, vocab, rng)


def make_crm_batch(
    seq: TokenSequence, K: int, p_m: float, p_c: float, vocab: Vocabulary, rng: np.random.Generator
) -> tuple[MaskedSequence, list[MaskedSequence]]:
    """One DRM view plus K CRM views, all complements of the same base pattern."""
    if K < 1:
        raise ValueError(f"K must be >= 1, got {K}")
    t0 = drm(seq, p_m, vocab, rng)
    tks = [crm(seq, t0.pattern, p_c, vocab, rng) for _ in range(K)]
    return t0, tks


# ---------------------------------------------------------------------------
# EDA augmentation (deletion / swap / insertion / synonym substitution)


def _segments(seq: TokenSequence) -> tuple[list[int], list[int] | None]:
    ids = seq.ids
    sep = np.flatnonzero(ids == SEP_ID)
    real = ids[~seq.pad_mask]
    if sep.size == 0:
        return [int(i) for i in real[1:]], None
    cut = int(sep[0])
    seg_a = [int(i) for i in ids[1:cut]]
    seg_b = [int(i) for i in real[cut + 1 :]]
    return seg_a, seg_b


def _relayout(seg_a: list[int], seg_b: list[int] | None, max_len: int) -> TokenSequence:
    budget = max_len - 1 - (1 if seg_b is not None else 0)
    a, b = list(seg_a), None if seg_b is None else list(seg_b)
    while len(a) + (len(b) if b is not None else 0) > budget:
        if b is not None and len(b) >= len(a):
            b.pop()
        else:
            a.pop()
    ids = [BOS_ID] + a
    maskable = [False] + [True] * len(a)
    if b is not None:
        ids += [SEP_ID] + b
        maskable += [False] + [True] * len(b)
    pad = max_len - len(ids)
    return TokenSequence(np.array(ids + [PAD_ID] * pad), np.array(maskable + [False] * pad))


def eda_augment(
    seq: TokenSequence,
    rate: float,
    rng: np.random.Generator,
    synonyms: dict[int, list[int]] | None = None,
) -> TokenSequence:
    """Apply one uniformly chosen EDA operation to ceil(rate * n_maskable) positions.

    Operations: random deletion, random swap, random insertion of an existing
    in-sequence token, or synonym substitution from ``synonyms`` (empty table
    makes substitution a no-op). Degenerate cases return the sequence unchanged.
    """
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"rate must be in [0, 1], got {rate}")
    n_maskable = int(seq.maskable.sum())
    if rate == 0.0 or n_maskable == 0:
        return seq
    m = math.ceil(rate * n_maskable)
    op = int(rng.integers(0, 4))
    seg_a, seg_b = _segments(seq)
    max_len = len(seq)

    if op == 0:  # deletion: each segment must keep at least one token
        removable = n_maskable - (1 if seg_a else 0) - (1 if seg_b else 0)
        if removable <= 0:
            return seq
        m = min(m, removable)
        flat = [(0, i) for i in range(len(seg_a))] + ([(1, i) for i in range(len(seg_b))] if seg_b else [])
        order = rng.permutation(len(flat))
        dropped: set[tuple[int, int]] = set()
        remaining = {0: len(seg_a), 1: len(seg_b) if seg_b else 0}
        for j in order:
            if len(dropped) == m:
                break
            which, i = flat[int(j)]
            if remaining[which] <= 1:
                continue
            dropped.add((which, i))
            remaining[which] -= 1
        seg_a = [t for i, t in enumerate(seg_a) if (0, i) not in dropped]
        if seg_b is not None:
            seg_b = [t for i, t in enumerate(seg_b) if (1, i) not in dropped]
    elif op == 1:  # swap
        flat = seg_a + (seg_b or [])
        if len(flat) < 2:
            return seq
        for _ in range(m):
            i, j = rng.integers(0, len(flat), size=2)
            flat[int(i)], flat[int(j)] = flat[int(j)], flat[int(i)]
        seg_a, seg_b = flat[: len(seg_a)], (flat[len(seg_a) :] if seg_b is not None else None)
    elif op == 2:  # insertion of an existing in-sequence token
        pool = seg_a + (seg_b or [])
        if not pool:
            return seq
        for _ in range(m):
            tok = pool[int(rng.integers(0, len(pool)))]
            if seg_b is not None and rng.random() < len(seg_b) / max(len(seg_a) + len(seg_b), 1):
                seg_b.insert(int(rng.integers(0, len(seg_b) + 1)), tok)
            else:
                seg_a.insert(int(rng.integers(0, len(seg_a) + 1)), tok)
    else:  # synonym substitution
        table = synonyms or {}
        flat = seg_a + (seg_b or [])
        if not flat:
            return seq
        positions = rng.permutation(len(flat))[:m]
        for p in positions:
            options = table.get(flat[int(p)])
            if options:
                flat[int(p)] = int(options[int(rng.integers(0, len(options)))])
        seg_a, seg_b = flat[: len(seg_a)], (flat[len(seg_a) :] if seg_b is not None else None)

    return _relayout(seg_a, seg_b, max_len)


AUGMENTER_NAMES = ("crm-pair", "drm-pair", "eda-pair", "identity")


def augmenter_for(
    name: str,
    vocab: Vocabulary,
    p_m: float = 0.15,
    p_c: float = 0.7,
    eda_rate: float = 0.1,
    synonyms: dict[int, list[int]] | None = None,
):
    """Return a strategy fn(seq, rng) -> (view0, view1) producing a pair of views."""
    if name == "back-translation":
        raise ValueError("unsupported augmenter: back-translation (needs an external translation system)")
    if name == "crm-pair":

        def pair(seq: TokenSequence, rng: np.random.Generator):
            t0 = drm(seq, p_m, vocab, rng)
            return t0, crm(seq, t0.pattern, p_c, vocab, rng)

    elif name == "drm-pair":

        def pair(seq, rng):
            return drm(seq, p_m, vocab, rng), drm(seq, p_m, vocab, rng)

    elif name == "eda-pair":

        def pair(seq, rng):
            return eda_augment(seq, eda_rate, rng, synonyms), eda_augment(seq, eda_rate, rng, synonyms)

    elif name == "identity":

        def pair(seq, rng):
            return seq, seq

    else:
        raise ValueError(f"unknown augmenter: {name!r} (choose from {AUGMENTER_NAMES})")
    return pair


def render_masked_pair(
    seq: TokenSequence, views: list[MaskedSequence], vocab: Vocabulary
) -> str:
    """Aligned original / T^0 / T^k rows with selected positions bracketed."""
    rows = [("orig", [vocab.token_of(int(i)) for i in seq.ids])]
    for k, view in enumerate(views):
        toks = []
        for pos in range(len(seq)):
            t = vocab.token_of(int(view.ids[pos]))
            toks.append(f"[{t}]" if view.pattern.selected[pos] else t)
        rows.append((f"t{k}", toks))
    widths = [max(len(r[1][p]) for r in rows) for p in range(len(seq))]
    lines = []
    for label, toks in rows:
        cells = " ".join(t.ljust(w) for t, w in zip(toks, widths))
        lines.append(f"{label:>5}: {cells.rstrip()}")
    return "\n".join(lines)
