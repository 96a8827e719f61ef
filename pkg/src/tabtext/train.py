"""Masked-language and classification fine-tuning loops.

MF masks a ratio of content tokens per sentence and minimizes the masked
cross-entropy; the checkpoint with the lowest validation loss wins. CF
re-initializes the classification head, minimizes binary cross-entropy on
the [CLS] embedding, and keeps the checkpoint with the best validation AUC.
Adam with global-norm clipping and linear warmup throughout.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .checkpoint import CheckpointMeta, config_digest
from .errors import ContractError, NumericError, TabTextError
from .model import (
    ModelConfig,
    Parameters,
    cls_logits_batch,
    cls_loss_and_grads,
    init_params,
    mlm_loss_and_grads,
    zero_grads,
)
from .seeding import named_rng
from .textualize import Corpus
from .tokenizer import MASK_ID, TokenSequence, Vocabulary, encode, split_tokens

# ids below this are reserved specials and never masked
FIRST_CONTENT_ID = 5

LogFn = Callable[[dict], None]


class NothingToMask(TabTextError):
    """Skip-sample signal: the sequence has no maskable position."""


@dataclass(frozen=True)
class MaskPlan:
    """Masked positions (strictly increasing) and the ids they replaced."""

    positions: tuple[int, ...]
    original_ids: tuple[int, ...]

    def __post_init__(self):
        if len(self.positions) != len(self.original_ids):
            raise ContractError("positions and original_ids must align")
        if not self.positions:
            raise ContractError("a mask plan needs at least one position")
        if any(b <= a for a, b in zip(self.positions, self.positions[1:])):
            raise ContractError("positions must be strictly increasing")

    @property
    def k(self) -> int:
        return len(self.positions)


@dataclass(frozen=True)
class TrainConfig:
    """One stage's optimization settings (defaults follow the MF recipe)."""

    batch_size: int = 16
    learning_rate: float = 4e-5
    epochs: int = 10
    warmup_steps: int | None = None  # None -> 10% of total steps
    mask_ratio: float = 0.15
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float | None = 1.0

    def __post_init__(self):
        if not 0.0 < self.mask_ratio <= 1.0:
            raise ContractError(f"mask_ratio must be in (0, 1], got {self.mask_ratio}")
        if self.batch_size < 1 or self.epochs < 0 or self.learning_rate <= 0:
            raise ContractError("invalid training configuration")


def mf_config(**overrides) -> TrainConfig:
    """Documented masked-fine-tuning defaults: batch 16, lr 4e-5, 10 epochs,
    mask ratio 0.15."""
    return TrainConfig(**overrides)


def cf_config(**overrides) -> TrainConfig:
    """Documented classification defaults: batch 16, lr 2e-5, 40 epochs."""
    overrides.setdefault("learning_rate", 2e-5)
    overrides.setdefault("epochs", 40)
    return TrainConfig(**overrides)


def eligible_positions(seq: TokenSequence) -> np.ndarray:
    """Real positions holding content tokens (no [CLS]/[SEP]/[PAD]/etc.)."""
    return np.flatnonzero((seq.ids >= FIRST_CONTENT_ID) & seq.pad_mask)


def plan_mask(
    seq: TokenSequence, ratio: float, rng: np.random.Generator
) -> tuple[TokenSequence, MaskPlan]:
    """Independently mask each eligible position with probability ``ratio``;
    if none is drawn, force one uniformly at random."""
    if not 0.0 <= ratio <= 1.0:
        raise ContractError(f"mask ratio must be in [0, 1], got {ratio}")
    eligible = eligible_positions(seq)
    if eligible.size == 0:
        raise NothingToMask("sequence has no maskable content token")
    chosen = eligible[rng.random(eligible.size) < ratio]
    if chosen.size == 0:
        chosen = np.array([rng.choice(eligible)])
    chosen = np.sort(chosen)
    ids = seq.ids.copy()
    originals = ids[chosen].copy()
    ids[chosen] = MASK_ID
    masked = dataclasses.replace(seq, ids=ids)
    plan = MaskPlan(
        positions=tuple(int(p) for p in chosen),
        original_ids=tuple(int(t) for t in originals),
    )
    return masked, plan


def lr_at(step: int, config: TrainConfig) -> float:
    """base_lr * min(1, step / warmup_steps); constant once warmed up."""
    if step < 1:
        raise ContractError(f"step must be >= 1, got {step}")
    warmup = config.warmup_steps
    if not warmup:
        return config.learning_rate
    return config.learning_rate * min(1.0, step / warmup)


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0


def init_optimizer(params: Parameters) -> OptimizerState:
    return OptimizerState(m=zero_grads(params), v=zero_grads(params))


def global_norm(grads: dict[str, np.ndarray]) -> float:
    return math.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values()))


def adam_step(
    params: Parameters,
    grads: dict[str, np.ndarray],
    state: OptimizerState,
    lr: float,
    *,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    clip_norm: float | None = None,
) -> tuple[Parameters, OptimizerState]:
    """Adam with bias correction; grads are globally clipped first.

    Updates ``params`` and ``state`` in place and returns them; a
    non-finite gradient aborts the step untouched.
    """
    norm = global_norm(grads)
    if not math.isfinite(norm):
        raise NumericError("non-finite gradients; step aborted")
    scale = 1.0
    if clip_norm is not None and norm > clip_norm:
        scale = clip_norm / norm
    state.step += 1
    bc1 = 1.0 - beta1**state.step
    bc2 = 1.0 - beta2**state.step
    for name, tensor in params.tensors.items():
        g = grads[name] if scale == 1.0 else grads[name] * scale
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * np.square(g)
        tensor -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    return params, state


@dataclass
class TrainResult:
    """Selected parameters plus per-epoch history records."""

    params: Parameters
    meta: CheckpointMeta
    history: list[dict] = field(default_factory=list)


def _resolve_warmup(config: TrainConfig, total_steps: int) -> TrainConfig:
    if config.warmup_steps is not None:
        return config
    return replace(config, warmup_steps=max(1, round(0.1 * total_steps)))


def _encode_corpus(
    corpus: Corpus, vocab: Vocabulary, max_len: int
) -> list[TokenSequence]:
    return [encode(s, vocab, max_len) for s in corpus.sentences]


def pick_encode_len(corpora: Sequence[Corpus], model_config: ModelConfig) -> int:
    """Smallest length holding every sentence plus [CLS], capped by the
    model's position table (pad invariance makes this output-neutral)."""
    longest = 0
    for corpus in corpora:
        for sentence in corpus.sentences:
            longest = max(longest, len(split_tokens(sentence.rendered)) + 1)
    return max(4, min(model_config.max_len, longest))


def _batch_arrays(seqs: Sequence[TokenSequence], idx: Sequence[int]):
    ids = np.stack([seqs[i].ids for i in idx])
    pad = np.stack([seqs[i].pad_mask for i in idx])
    return ids, pad


def _mlm_corpus_loss(params, seqs, plans, batch_size) -> float:
    """Mean per-sentence masked loss over a frozen-mask validation set."""
    total = 0.0
    for start in range(0, len(seqs), batch_size):
        idx = range(start, min(start + batch_size, len(seqs)))
        ids = np.stack([seqs[i].ids for i in idx])
        pad = np.stack([seqs[i].pad_mask for i in idx])
        loss, _ = mlm_loss_and_grads(
            params, ids, pad, [plans[i] for i in idx], with_grads=False
        )
        total += loss * len(idx)
    return total / len(seqs)


def mf_train(
    corpus: Corpus,
    vocab: Vocabulary,
    config: TrainConfig,
    model_config: ModelConfig,
    val_corpus: Corpus,
    *,
    init: Parameters | None = None,
    encode_len: int | None = None,
    log: LogFn | None = None,
) -> TrainResult:
    """Masked-language fine-tuning; keeps the lowest-validation-loss epoch.

    Validation mask plans are frozen once so epochs compare like with
    like. Sentences with no maskable token are excluded.
    """
    if not corpus.sentences or not val_corpus.sentences:
        raise ContractError("mf_train needs nonempty train and validation corpora")
    if encode_len is None:
        encode_len = pick_encode_len([corpus, val_corpus], model_config)

    train_seqs = [
        s for s in _encode_corpus(corpus, vocab, encode_len)
        if eligible_positions(s).size > 0
    ]
    val_seqs = [
        s for s in _encode_corpus(val_corpus, vocab, encode_len)
        if eligible_positions(s).size > 0
    ]
    if not train_seqs or not val_seqs:
        raise ContractError("no maskable sentences after encoding")

    params = init.copy() if init is not None else init_params(model_config, config.seed)
    shuffle_rng = named_rng(config.seed, "shuffle")
    mask_rng = named_rng(config.seed, "mask")
    drop_rng = named_rng(config.seed, "dropout")
    val_rng = named_rng(config.seed, "val-mask")

    val_masked = [plan_mask(s, config.mask_ratio, val_rng) for s in val_seqs]
    val_ms = [m for m, _ in val_masked]
    val_plans = [p for _, p in val_masked]

    n = len(train_seqs)
    steps_per_epoch = math.ceil(n / config.batch_size)
    config = _resolve_warmup(config, config.epochs * steps_per_epoch)
    state = init_optimizer(params)

    best_loss = math.inf
    best_epoch = -1
    best_params = params.copy()
    history: list[dict] = []
    if config.epochs == 0:
        best_loss = _mlm_corpus_loss(params, val_ms, val_plans, config.batch_size)

    step = 0
    for epoch in range(config.epochs):
        order = shuffle_rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            masked = [plan_mask(train_seqs[i], config.mask_ratio, mask_rng) for i in idx]
            ids = np.stack([m.ids for m, _ in masked])
            pad = np.stack([m.pad_mask for m, _ in masked])
            plans = [p for _, p in masked]
            step += 1
            loss, grads = mlm_loss_and_grads(
                params, ids, pad, plans, train=model_config.dropout > 0, rng=drop_rng
            )
            adam_step(
                params, grads, state, lr_at(step, config),
                beta1=config.beta1, beta2=config.beta2, eps=config.eps,
                clip_norm=config.clip_norm,
            )
            epoch_loss += loss * len(idx)
        val_loss = _mlm_corpus_loss(params, val_ms, val_plans, config.batch_size)
        record = {
            "stage": "MF", "epoch": epoch, "train_loss": epoch_loss / n,
            "val_loss": val_loss, "lr": lr_at(step, config),
        }
        history.append(record)
        if log:
            log(record)
        if val_loss < best_loss:
            best_loss = val_loss
            best_epoch = epoch
            best_params = params.copy()

    meta = CheckpointMeta(
        stage="MF",
        epoch=best_epoch,
        metric=best_loss,
        provenance=dict(corpus.provenance),
        config_digest=config_digest(model_config),
    )
    return TrainResult(params=best_params, meta=meta, history=history)


def init_cf_params(base: Parameters, seed: int) -> Parameters:
    """Copy of ``base`` with a freshly random classification head."""
    params = base.copy()
    rng = named_rng(seed, "cls-head")
    d = params.config.hidden
    params.tensors["cls_head.weight"] = rng.normal(0.0, 0.02, size=(d, 2)).astype(
        params.dtype
    )
    params.tensors["cls_head.bias"] = np.zeros(2, dtype=params.dtype)
    return params


def predict_positive_scores(
    params: Parameters, seqs: Sequence[TokenSequence], batch_size: int = 64
) -> np.ndarray:
    """P(label=1) for each sequence via softmax over the two cls logits."""
    out = np.empty(len(seqs), dtype=np.float64)
    for start in range(0, len(seqs), batch_size):
        idx = range(start, min(start + batch_size, len(seqs)))
        ids, pad = _batch_arrays(seqs, idx)
        logits = cls_logits_batch(params, ids, pad).astype(np.float64)
        shifted = logits - logits.max(axis=1, keepdims=True)
        probs = np.exp(shifted)
        out[idx.start : idx.stop] = probs[:, 1] / probs.sum(axis=1)
    return out


def cf_train(
    corpus: Corpus,
    vocab: Vocabulary,
    config: TrainConfig,
    val_corpus: Corpus,
    *,
    init: Parameters | None = None,
    model_config: ModelConfig | None = None,
    encode_len: int | None = None,
    log: LogFn | None = None,
) -> TrainResult:
    """Classification fine-tuning; keeps the best-validation-AUC epoch.

    ``init`` carries the encoder from the MF stage (its weights are copied
    bit-exactly and the classification head is re-drawn); passing
    ``model_config`` instead trains from random init (the skip-MF ablation).
    """
    from .evaluate import auc  # local import; evaluate builds on this module

    if corpus.labels is None or val_corpus.labels is None:
        raise ContractError("cf_train needs labeled train and validation corpora")
    if not corpus.sentences or not val_corpus.sentences:
        raise ContractError("cf_train needs nonempty corpora")
    if (init is None) == (model_config is None):
        raise ContractError("pass exactly one of init or model_config")
    if init is not None:
        params = init_cf_params(init, config.seed)
        model_config = params.config
    else:
        params = init_params(model_config, config.seed)
    if encode_len is None:
        encode_len = pick_encode_len([corpus, val_corpus], model_config)

    train_seqs = _encode_corpus(corpus, vocab, encode_len)
    val_seqs = _encode_corpus(val_corpus, vocab, encode_len)
    labels = list(corpus.labels)
    val_labels = np.asarray(val_corpus.labels)

    shuffle_rng = named_rng(config.seed, "shuffle")
    drop_rng = named_rng(config.seed, "dropout")
    n = len(train_seqs)
    steps_per_epoch = math.ceil(n / config.batch_size)
    config = _resolve_warmup(config, config.epochs * steps_per_epoch)
    state = init_optimizer(params)

    best_auc = -math.inf
    best_epoch = -1
    best_params = params.copy()
    history: list[dict] = []
    if config.epochs == 0:
        best_auc = auc(predict_positive_scores(params, val_seqs), val_labels)

    step = 0
    for epoch in range(config.epochs):
        order = shuffle_rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            ids, pad = _batch_arrays(train_seqs, idx)
            step += 1
            loss, grads = cls_loss_and_grads(
                params, ids, pad, [labels[i] for i in idx],
                train=model_config.dropout > 0, rng=drop_rng,
            )
            adam_step(
                params, grads, state, lr_at(step, config),
                beta1=config.beta1, beta2=config.beta2, eps=config.eps,
                clip_norm=config.clip_norm,
            )
            epoch_loss += loss * len(idx)
        val_auc = auc(predict_positive_scores(params, val_seqs), val_labels)
        record = {
            "stage": "CF", "epoch": epoch, "train_loss": epoch_loss / n,
            "val_auc": val_auc, "lr": lr_at(step, config),
        }
        history.append(record)
        if log:
            log(record)
        if val_auc > best_auc:
            best_auc = val_auc
            best_epoch = epoch
            best_params = params.copy()

    meta = CheckpointMeta(
        stage="CF",
        epoch=best_epoch,
        metric=best_auc,
        provenance=dict(corpus.provenance),
        config_digest=config_digest(model_config),
    )
    return TrainResult(params=best_params, meta=meta, history=history)
