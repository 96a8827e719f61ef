"""AUC metric, cross-validation driver, and the semi-supervised protocol.

Per fold: textualize, build the vocabulary from the training split only,
masked-LM fine-tune on the training sentences, classification fine-tune on
the labeled subset, then score the held-out test split. Reports carry
per-fold AUCs with mean and sample standard deviation.
"""

from __future__ import annotations

import csv
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, UndefinedMetricError
from .model import ModelConfig
from .seeding import derive_seed
from .tables import TableDataset, make_folds, subsample_labeled
from .textualize import Corpus, TextualizeOptions, textualize_dataset
from .tokenizer import build_vocab, encode
from .train import (
    TrainConfig,
    cf_train,
    mf_train,
    pick_encode_len,
    predict_positive_scores,
)

SEMI_SUPERVISED_SIZES = (50, 200, 500)


@dataclass(frozen=True)
class ScoredExample:
    """A positive-class probability paired with the true binary label."""

    score: float
    label: int

    def __post_init__(self):
        if not np.isfinite(self.score):
            raise ContractError("score must be finite")
        if self.label not in (0, 1):
            raise ContractError("label must be 0 or 1")


def auc(scores: Sequence[float] | np.ndarray, labels: Sequence[int] | np.ndarray) -> float:
    """Mann-Whitney AUC with ties credited half, via average ranks.

    O(n log n); equals brute-force pair counting:
    (concordant + 0.5 * tied) / (n_pos * n_neg).
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ContractError("scores and labels must be aligned 1-d sequences")
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs at least one positive and one negative")

    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(len(scores), dtype=np.float64)
    sorted_scores = scores[order]
    # average rank within each tie group
    boundaries = np.flatnonzero(np.diff(sorted_scores)) + 1
    starts = np.concatenate([[0], boundaries])
    ends = np.concatenate([boundaries, [len(scores)]])
    for s, e in zip(starts, ends):
        ranks[order[s:e]] = 0.5 * (s + 1 + e)
    u = ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auc_of(examples: Sequence[ScoredExample]) -> float:
    return auc([e.score for e in examples], [e.label for e in examples])


def _ablation_tag(flags: dict[str, bool]) -> str:
    parts = []
    if not flags.get("use_sep", True):
        parts.append("-sep")
    if flags.get("skip_mf", False):
        parts.append("-mlm")
    return "".join(parts) or "full"


@dataclass(frozen=True)
class MetricReport:
    """Per-fold AUCs with mean and sample standard deviation."""

    dataset: str
    protocol: str  # "full" or "n=<labeled count>"
    flags: dict[str, bool]
    fold_aucs: tuple[float, ...]
    mean: float
    std: float

    @classmethod
    def from_folds(cls, dataset, protocol, flags, fold_aucs) -> "MetricReport":
        aucs = np.asarray(fold_aucs, dtype=np.float64)
        std = float(aucs.std(ddof=1)) if len(aucs) > 1 else 0.0
        return cls(
            dataset=dataset,
            protocol=protocol,
            flags=dict(flags),
            fold_aucs=tuple(float(a) for a in aucs),
            mean=float(aucs.mean()),
            std=std,
        )

    @property
    def k(self) -> int:
        return len(self.fold_aucs)

    def to_dict(self) -> dict:
        return {
            "dataset": self.dataset,
            "protocol": self.protocol,
            "flags": self.flags,
            "fold_aucs": list(self.fold_aucs),
            "mean": self.mean,
            "std": self.std,
        }

    def write_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", "utf-8")

    def write_csv(self, path: str | Path) -> None:
        write_report_csv([self], path, include_avg=False)


def format_mean_std(mean: float, std: float) -> str:
    return f"{mean:.3f}±{std:.3f}"


def aggregate(reports: Sequence[MetricReport]) -> "ComparisonTable":
    """Per-dataset mean±std rows plus an unweighted AVG row."""
    if not reports:
        raise ContractError("aggregate needs at least one report")
    ks = {r.k for r in reports}
    if len(ks) != 1:
        raise ContractError(f"reports disagree on fold count: {sorted(ks)}")
    means = np.asarray([r.mean for r in reports])
    avg_std = float(means.std(ddof=1)) if len(means) > 1 else 0.0
    return ComparisonTable(
        reports=tuple(reports),
        avg_mean=float(means.mean()),
        avg_std=avg_std,
    )


@dataclass(frozen=True)
class ComparisonTable:
    reports: tuple[MetricReport, ...]
    avg_mean: float
    avg_std: float

    def render(self) -> str:
        lines = [
            f"{r.dataset}\t{format_mean_std(r.mean, r.std)}\t{r.protocol}"
            f"\t{_ablation_tag(r.flags)}"
            for r in self.reports
        ]
        lines.append(f"AVG\t{format_mean_std(self.avg_mean, self.avg_std)}")
        return "\n".join(lines)

    def write_csv(self, path: str | Path) -> None:
        write_report_csv(list(self.reports), path, include_avg=True,
                         avg=(self.avg_mean, self.avg_std))


def write_report_csv(
    reports: Sequence[MetricReport],
    path: str | Path,
    *,
    include_avg: bool = False,
    avg: tuple[float, float] | None = None,
) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["dataset", "fold", "auc", "mean", "std", "protocol", "flags"])
        for r in reports:
            tag = _ablation_tag(r.flags)
            for fold, value in enumerate(r.fold_aucs):
                writer.writerow(
                    [r.dataset, fold, f"{value:.6f}", f"{r.mean:.6f}",
                     f"{r.std:.6f}", r.protocol, tag]
                )
        if include_avg and avg is not None:
            writer.writerow(["AVG", "", "", f"{avg[0]:.6f}", f"{avg[1]:.6f}", "", ""])


@dataclass(frozen=True)
class PipelineConfig:
    """Everything one fold needs: textualization, vocab, model, both stages.

    ``model.vocab_size`` is a placeholder; each fold fills it from its own
    training-split vocabulary.
    """

    textualize: TextualizeOptions = TextualizeOptions()
    min_freq: int = 1
    max_vocab: int | None = None
    model: ModelConfig = ModelConfig(vocab_size=6)
    mf: TrainConfig = TrainConfig()
    cf: TrainConfig = TrainConfig(learning_rate=2e-5, epochs=40)
    seed: int = 0
    skip_mf: bool = False

    @property
    def flags(self) -> dict[str, bool]:
        return {"use_sep": self.textualize.use_sep, "skip_mf": self.skip_mf}


def run_fold(
    dataset: TableDataset,
    cfg: PipelineConfig,
    fold: tuple[tuple[int, ...], tuple[int, ...], tuple[int, ...]],
    fold_index: int,
    n_labeled: int | None = None,
    log: Callable[[dict], None] | None = None,
) -> float:
    """Train both stages on one fold and return the test AUC."""
    train_idx, val_idx, test_idx = fold
    corpus = textualize_dataset(dataset, cfg.textualize)
    train_corpus = corpus.subset(train_idx)
    val_corpus = corpus.subset(val_idx)
    test_corpus = corpus.subset(test_idx)

    # vocabulary from the training split only: no test/val leakage
    vocab = build_vocab([train_corpus], cfg.min_freq, cfg.max_vocab)
    model_config = replace(cfg.model, vocab_size=vocab.size)
    encode_len = pick_encode_len([corpus], model_config)
    fold_seed = derive_seed(cfg.seed, "fold", str(fold_index))

    mf_result = None
    if not cfg.skip_mf:
        mf_result = mf_train(
            train_corpus.without_labels(),
            vocab,
            replace(cfg.mf, seed=fold_seed),
            model_config,
            val_corpus.without_labels(),
            encode_len=encode_len,
            log=log,
        )

    if n_labeled is None:
        labeled_corpus = train_corpus
    else:
        subset = subsample_labeled(train_idx, dataset.labels, n_labeled, fold_seed)
        position_of = {ds_idx: i for i, ds_idx in enumerate(train_idx)}
        labeled_corpus = train_corpus.subset(
            [position_of[i] for i in subset.labeled_indices]
        )

    cf_result = cf_train(
        labeled_corpus,
        vocab,
        replace(cfg.cf, seed=fold_seed),
        val_corpus,
        init=None if cfg.skip_mf else mf_result.params,
        model_config=model_config if cfg.skip_mf else None,
        encode_len=encode_len,
        log=log,
    )

    test_seqs = [encode(s, vocab, encode_len) for s in test_corpus.sentences]
    scores = predict_positive_scores(cf_result.params, test_seqs)
    return auc(scores, np.asarray(test_corpus.labels))


def _run_fold_job(args) -> float:
    dataset, cfg, fold, fold_index, n_labeled = args
    return run_fold(dataset, cfg, fold, fold_index, n_labeled)


def _run_protocol(
    dataset: TableDataset,
    cfg: PipelineConfig,
    k: int,
    n_labeled: int | None,
    jobs: int,
    log: Callable[[dict], None] | None,
) -> MetricReport:
    plan = make_folds(dataset, k, cfg.seed)
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            aucs = list(
                pool.map(
                    _run_fold_job,
                    [(dataset, cfg, plan.folds[f], f, n_labeled) for f in range(k)],
                )
            )
    else:
        aucs = [
            run_fold(dataset, cfg, plan.folds[f], f, n_labeled, log=log)
            for f in range(k)
        ]
    protocol = "full" if n_labeled is None else f"n={n_labeled}"
    return MetricReport.from_folds(dataset.name, protocol, cfg.flags, aucs)


def cross_validate(
    dataset: TableDataset,
    cfg: PipelineConfig,
    k: int = 5,
    *,
    jobs: int = 1,
    log: Callable[[dict], None] | None = None,
) -> MetricReport:
    """Fully supervised k-fold evaluation."""
    return _run_protocol(dataset, cfg, k, None, jobs, log)


def semi_supervised_eval(
    dataset: TableDataset,
    n_labeled: int,
    cfg: PipelineConfig,
    k: int = 5,
    *,
    jobs: int = 1,
    log: Callable[[dict], None] | None = None,
) -> MetricReport:
    """MF on all training sentences; CF on a stratified labeled subset."""
    if n_labeled < 1:
        raise ContractError("n_labeled must be positive")
    return _run_protocol(dataset, cfg, k, n_labeled, jobs, log)
