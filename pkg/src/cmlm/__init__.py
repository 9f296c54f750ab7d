"""Complementary random masking and contrastive masked language modeling.

A desk-scale laboratory: whitespace tokenizer and few-shot sampling, the
DRM/CRM masking pair, a numpy reverse-mode tape, a small transformer
encoder, the MLM/SimCLR/SimSiam objectives, AdamW training loops, and the
5-subsets x 3-seeds evaluation protocol.
"""

from . import audits, autograd, cli, data, encoder, experiment, masking, objectives, training
from .autograd import Tape, Tensor, finite_diff_check
from .data import (
    LabeledExample,
    TokenSequence,
    Vocabulary,
    build_vocab,
    encode,
    load_jsonl,
    sample_few_shot,
)
from .encoder import EncoderConfig, EncoderParams, encode_tokens, init_params, pool_first
from .experiment import accuracy, make_synthetic_task, mcc, run_protocol, sweep
from .masking import MaskAction, MaskedSequence, MaskPattern, augmenter_for, crm, drm, eda_augment, make_crm_batch
from .objectives import ContrastiveBatch, LossBreakdown, cmlm_loss, cosine_sim, cssl_loss, mlm_loss, simclr_loss, simsiam_loss
from .training import (
    AdamWState,
    Checkpoint,
    TrainConfig,
    adamw_step,
    fine_tune,
    load_checkpoint,
    post_train,
    save_checkpoint,
)

__version__ = "0.1.0"
