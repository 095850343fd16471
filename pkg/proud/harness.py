# proud/harness.py
"""
Experiment orchestration: (labeled, test) combinations over seeds, the
labeled-only baseline and the ablation variants, score aggregation and the
exported result files (metrics.csv, summary.json, embeddings.bin).
"""

from __future__ import annotations

import hashlib
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from proud import __version__
from proud.algorithm import ProudResult, normalized_features, proud_train
from proud.autodiff import SGD, one_hot
from proud.datagen import (
    METRICS,
    Arrangement,
    DatasetSuite,
    DomainDataset,
    GroundTruthLedger,
    MetricsCapability,
    make_domain_suite,
    split,
)
from proud.errors import ConfigError, FormatError, IsolationError
from proud.model import Model, init_model, predict, pretrain, supervised_epoch
from proud.schemas import (
    AblationOut,
    AblationReport,
    CombinationSummary,
    EpochRecord,
    ExperimentConfig,
    MatrixReport,
    PretrainEpoch,
    ProudHyper,
    RunReport,
    RunSummaryOut,
    SummaryOut,
    VariantDiff,
)
from proud.store import EmbeddingEntry, load_suite, save_embeddings

logger = logging.getLogger(__name__)

ABLATION_VARIANTS = ("proud", "no_udmix", "no_pml")

PretrainCache = Dict[Tuple[int, int, int], Tuple[Dict[str, np.ndarray], List[PretrainEpoch]]]

# rng stream keys under (seed, labeled, test)
INIT_STREAM, SPLIT_STREAM, PRETRAIN_STREAM, TRAIN_STREAM = range(4)


# ------------------------------------------------------------------ #
#  ISOLATION
# ------------------------------------------------------------------ #
class SealedDomain:
    """The test domain; its inputs are handed out only to the metrics path and every read is counted."""

    def __init__(self, dataset: DomainDataset):
        self._dataset = dataset
        self.reads: List[str] = []

    @property
    def source_index(self) -> int:
        return self._dataset.source_index

    @property
    def n(self) -> int:
        return self._dataset.n

    def inputs(self, capability: MetricsCapability, purpose: str = "evaluate") -> np.ndarray:
        if not isinstance(capability, MetricsCapability):
            raise IsolationError("test-domain inputs are readable only by the metrics path")
        self.reads.append(purpose)
        return self._dataset.inputs


def make_evaluator(sealed: SealedDomain, ledger: GroundTruthLedger):
    def evaluate(m: Model) -> float:
        predicted = predict(m, sealed.inputs(METRICS))
        return ledger.accuracy(sealed.source_index, predicted, METRICS)

    return evaluate


# ------------------------------------------------------------------ #
#  HELPERS
# ------------------------------------------------------------------ #
def stream_seed(seed: int, *keys: int) -> int:
    """Independent integer seed for the stream (seed, *keys)."""
    return int(np.random.SeedSequence([seed, *keys]).generate_state(1)[0])


def config_fingerprint(cfg: ExperimentConfig) -> str:
    payload = cfg.model_dump_json() + "|" + __version__
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def load_suite_for(cfg: ExperimentConfig) -> DatasetSuite:
    if cfg.dataset_path is not None:
        return load_suite(cfg.dataset_path)
    return make_domain_suite(cfg.generator)


def variant_hyper(
    cfg: ExperimentConfig,
    variant: Optional[str] = None,
    suite: Optional[DatasetSuite] = None,
) -> ProudHyper:
    """ProudHyper with the switches of an ablation variant applied and the ensemble jitter resolved."""
    variant = variant or cfg.variant
    updates = {
        "no_udmix": {"mixing": "uniform"},
        "no_pml": {"alpha": 0.0},
        "naive_pseudo": {"mixing": "fixed", "fixed_lambda": 1.0, "alpha": 0.0},
        "domain_agnostic": {"domain_aware": False},
    }.get(variant, {})
    if cfg.proud.augment_noise_sigma is None:
        generator = suite.gen_config if suite is not None and suite.gen_config is not None else cfg.generator
        updates = {**updates, "augment_noise_sigma": generator.noise_sigma}
    return cfg.proud.model_copy(update=updates)


def final_score(history: Sequence[EpochRecord], window: int, fallback: float = 0.0) -> float:
    """Mean test accuracy over the last ``window`` epochs (all of them if fewer)."""
    if not history:
        return fallback
    return float(np.mean([r.test_acc for r in history[-window:]]))


# ------------------------------------------------------------------ #
#  ONE COMBINATION
# ------------------------------------------------------------------ #
def pretrain_stage(
    cfg: ExperimentConfig,
    suite: DatasetSuite,
    arrangement: Arrangement,
    seed: int,
    cache: Optional[PretrainCache] = None,
) -> Tuple[Model, List[PretrainEpoch], DomainDataset]:
    """Split the labeled domain, pretrain (or reuse a cached pretraining), return (model, history, train split)."""
    labeled, test = arrangement.labeled.source_index, arrangement.test.source_index
    train, val = split(arrangement.labeled, cfg.split_ratio, seed=stream_seed(seed, labeled, test, SPLIT_STREAM))
    m = init_model(
        suite.input_dim,
        cfg.model.hidden,
        cfg.model.feature_dim,
        suite.num_classes,
        stream_seed(seed, labeled, test, INIT_STREAM),
    )
    key = (labeled, test, seed)
    if cache is not None and key in cache:
        state, history = cache[key]
        m.load_state_dict(state)
        return m, list(history), train

    m, history = pretrain(m, train, val, cfg.pretrain, stream_seed(seed, labeled, test, PRETRAIN_STREAM))
    if cache is not None:
        cache[key] = (m.state_dict(), list(history))
    return m, history, train


def _train_labeled_only(
    m: Model,
    train: DomainDataset,
    evaluate,
    hyper: ProudHyper,
    seed: int,
) -> List[EpochRecord]:
    """Keep training on the labeled split alone, recording test accuracy per epoch."""
    rng = np.random.default_rng(seed)
    optimizer = SGD(m.parameters(), hyper.lr, hyper.momentum, hyper.weight_decay)
    targets = one_hot(train.labels, m.num_classes)
    history = []
    for epoch in range(1, hyper.epochs + 1):
        loss = supervised_epoch(m, train.inputs, targets, optimizer, hyper.batch_size, rng)
        history.append(EpochRecord(epoch=epoch, test_acc=evaluate(m), loss_ce=loss))
    return history


def _embeddings(
    m: Model,
    train: DomainDataset,
    arrangement: Arrangement,
    sealed: SealedDomain,
    result: Optional[ProudResult],
) -> List[EmbeddingEntry]:
    bank = result.bank if result is not None else None
    entries: List[EmbeddingEntry] = []
    for ds in [train, *arrangement.unlabeled]:
        prototypes = bank.prototypes.get(ds.domain_id) if bank is not None else None
        entries.append((ds.source_index, ds.role, normalized_features(m, ds.inputs), prototypes))
    test_features = normalized_features(m, sealed.inputs(METRICS, purpose="export"))
    entries.append((sealed.source_index, "test", test_features, None))
    return entries


def run_combination(
    cfg: ExperimentConfig,
    labeled: int,
    test: int,
    seed: int,
    suite: Optional[DatasetSuite] = None,
    variant: Optional[str] = None,
    pretrain_cache: Optional[PretrainCache] = None,
    audit: Optional[Dict[str, object]] = None,
) -> RunReport:
    """
    Pretrain on the labeled domain, run one variant, score on the untouched test domain.

    When ``audit`` is given it receives the sealed test domain and the hidden-label ledger.
    """
    started = time.perf_counter()
    variant = variant or cfg.variant
    suite = suite or load_suite_for(cfg)
    arrangement = suite.arrange(labeled, test)
    sealed = SealedDomain(arrangement.test)
    if audit is not None:
        audit.update(sealed=sealed, ledger=arrangement.ledger)
    evaluate = make_evaluator(sealed, arrangement.ledger)
    hyper = variant_hyper(cfg, variant, suite)
    if cfg.pretrain.epochs == 0 and variant != "erm_labeled_only":
        raise ConfigError(f"variant {variant} pseudo-labels with the pretrained model: pretrain.epochs must be >= 1")

    m, pretrain_history, train = pretrain_stage(cfg, suite, arrangement, seed, pretrain_cache)
    train_seed = stream_seed(seed, labeled, test, TRAIN_STREAM)
    result: Optional[ProudResult] = None
    if variant == "erm_labeled_only":
        history = _train_labeled_only(m, train, evaluate, hyper, train_seed)
    else:
        result = proud_train(m, train, arrangement.unlabeled, evaluate, hyper, train_seed, arrangement.ledger)
        history = result.history

    fallback = evaluate(m) if not history else 0.0
    report = RunReport(
        variant=variant,
        labeled=labeled,
        test=test,
        unlabeled=[ds.source_index for ds in arrangement.unlabeled],
        seed=seed,
        history=history,
        pretrain_history=pretrain_history,
        final_score=final_score(history, cfg.score_window, fallback),
        wall_seconds=time.perf_counter() - started,
        fingerprint=config_fingerprint(cfg.model_copy(update={"variant": variant})),
        code_version=__version__,
        embeddings=_embeddings(m, train, arrangement, sealed, result),
    )
    logger.info(
        "%s L=%d T=%d seed=%d score=%.4f (%.1fs)",
        variant, labeled, test, seed, report.final_score, report.wall_seconds,
    )
    return report


# ------------------------------------------------------------------ #
#  MATRIX & ABLATION
# ------------------------------------------------------------------ #
def _run_job(args) -> RunReport:
    cfg, labeled, test, seed, suite, variant = args
    return run_combination(cfg, labeled, test, seed, suite=suite, variant=variant)


def summarize(variant: str, window: int, runs: List[RunReport]) -> MatrixReport:
    """Combination means over seeds; Avg and (population) Std over the combination means."""
    by_combination: Dict[Tuple[int, int], List[float]] = {}
    for run in runs:
        by_combination.setdefault((run.labeled, run.test), []).append(run.final_score)
    combinations = [
        CombinationSummary(labeled=l, test=t, scores=scores, mean=float(np.mean(scores)))
        for (l, t), scores in by_combination.items()
    ]
    means = np.array([c.mean for c in combinations])
    return MatrixReport(
        variant=variant,
        score_window=window,
        runs=runs,
        combinations=combinations,
        avg=float(means.mean()) if means.size else 0.0,
        std=float(means.std(ddof=0)) if means.size else 0.0,
    )


def run_matrix(
    cfg: ExperimentConfig,
    suite: Optional[DatasetSuite] = None,
    variant: Optional[str] = None,
    pretrain_cache: Optional[PretrainCache] = None,
) -> MatrixReport:
    """Every selected (labeled, test) pair times every seed."""
    suite = suite or load_suite_for(cfg)
    variant = variant or cfg.variant
    if suite.n_domains < 3:
        raise ConfigError(f"a combination matrix needs at least 3 domains, suite has {suite.n_domains}")

    jobs = [(l, t, seed) for (l, t) in cfg.combinations(suite.n_domains) for seed in cfg.seeds]
    logger.info("%s: %d runs over %d workers", variant, len(jobs), cfg.workers)
    if cfg.workers > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            runs = list(pool.map(_run_job, [(cfg, l, t, seed, suite, variant) for l, t, seed in jobs]))
    else:
        runs = [
            run_combination(cfg, l, t, seed, suite=suite, variant=variant, pretrain_cache=pretrain_cache)
            for l, t, seed in jobs
        ]
    return summarize(variant, cfg.score_window, runs)


def run_ablation(
    cfg: ExperimentConfig,
    variants: Sequence[str] = ABLATION_VARIANTS,
    suite: Optional[DatasetSuite] = None,
) -> AblationReport:
    """Same suite and seeds for every variant; pretraining is shared through a cache."""
    suite = suite or load_suite_for(cfg)
    cache: PretrainCache = {}
    matrices = {v: run_matrix(cfg, suite=suite, variant=v, pretrain_cache=cache) for v in variants}
    reference = matrices[variants[0]]
    diffs = {
        v: VariantDiff(avg=matrices[v].avg - reference.avg, std=matrices[v].std - reference.std)
        for v in variants[1:]
    }
    return AblationReport(matrices=matrices, diffs=diffs)


# ------------------------------------------------------------------ #
#  EXPORT
# ------------------------------------------------------------------ #
def metrics_frame(report: MatrixReport) -> pd.DataFrame:
    """One row per (combination, seed, epoch); per-domain columns follow role positions 1..T."""
    positions = sorted({t for run in report.runs for r in run.history for t in (*r.pl_acc, *r.mean_lambda)})
    if not positions and report.runs:
        positions = list(range(1, len(report.runs[0].unlabeled) + 1))
    columns = ["labeled", "test", "seed", "epoch", "test_acc"]
    for t in positions:
        columns += [f"pl_acc_{t}", f"mean_lambda_{t}"]
    columns += ["loss_ce", "loss_pml", "prototype_spread"]

    rows = []
    for run in report.runs:
        for r in run.history:
            row = {"labeled": run.labeled, "test": run.test, "seed": run.seed, "epoch": r.epoch, "test_acc": r.test_acc}
            for t in positions:
                row[f"pl_acc_{t}"] = r.pl_acc.get(t, np.nan)
                row[f"mean_lambda_{t}"] = r.mean_lambda.get(t, np.nan)
            row.update(loss_ce=r.loss_ce, loss_pml=r.loss_pml, prototype_spread=r.prototype_spread)
            rows.append(row)
    return pd.DataFrame(rows, columns=columns)


def summary_out(report: MatrixReport) -> SummaryOut:
    return SummaryOut(
        variant=report.variant,
        avg=report.avg,
        std=report.std,
        score_window=report.score_window,
        code_version=__version__,
        combinations=report.combinations,
        runs=[
            RunSummaryOut(
                labeled=r.labeled,
                test=r.test,
                seed=r.seed,
                final_score=r.final_score,
                wall_seconds=r.wall_seconds,
                fingerprint=r.fingerprint,
            )
            for r in report.runs
        ],
    )


def export_report(report: Union[MatrixReport, AblationReport], out_dir: Union[str, Path]) -> List[Path]:
    """
    metrics.csv, summary.json and embeddings.bin (first run's final features and prototypes).
    An ablation writes one subdirectory per variant plus ablation.json.
    """
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        if isinstance(report, AblationReport):
            written = []
            for variant, matrix in report.matrices.items():
                written += export_report(matrix, out_dir / variant)
            path = out_dir / "ablation.json"
            listing = AblationOut(variants=list(report.matrices), diffs=report.diffs)
            path.write_text(listing.model_dump_json(indent=2), encoding="utf-8")
            return written + [path]

        metrics_path, summary_path = out_dir / "metrics.csv", out_dir / "summary.json"
        metrics_frame(report).to_csv(metrics_path, index=False)
        summary_path.write_text(summary_out(report).model_dump_json(indent=2), encoding="utf-8")
    except OSError as exc:
        raise FormatError(f"{exc.filename or out_dir}: cannot write report ({exc.strerror})") from exc

    written = [metrics_path, summary_path]
    first = report.runs[0] if report.runs else None
    if first is not None and first.embeddings:
        embeddings_path = out_dir / "embeddings.bin"
        save_embeddings(first.embeddings, first.embeddings[0][2].shape[1], embeddings_path)
        written.append(embeddings_path)
    return written


def aggregate_metrics_csv(path: Union[str, Path], window: int) -> Tuple[float, float]:
    """Recompute (Avg, Std) from metrics.csv alone."""
    frame = pd.read_csv(path)
    frame = frame.sort_values(["labeled", "test", "seed", "epoch"])
    scores = frame.groupby(["labeled", "test", "seed"])["test_acc"].apply(lambda s: s.tail(window).mean())
    means = scores.groupby(level=["labeled", "test"]).mean().to_numpy()
    return float(means.mean()), float(means.std(ddof=0))


def format_report(in_dir: Union[str, Path]) -> str:
    """
    Combination table with an Avg/Std footer, read back from summary.json.
    An ablation directory prints every variant in run order, then the diffs.
    """
    in_dir = Path(in_dir)
    ablation_path = in_dir / "ablation.json"
    if not (in_dir / "summary.json").is_file() and ablation_path.is_file():
        listing = AblationOut.model_validate_json(ablation_path.read_text(encoding="utf-8"))
        sections = [_format_summary(in_dir / variant) for variant in listing.variants]
        reference = listing.variants[0]
        sections += [
            f"{variant} vs {reference}: Avg {100.0 * diff.avg:+.2f}  Std {100.0 * diff.std:+.2f}"
            for variant, diff in listing.diffs.items()
        ]
        return "\n\n".join(sections)
    return _format_summary(in_dir)


def _format_summary(in_dir: Path) -> str:
    path = in_dir / "summary.json"
    if not path.is_file():
        raise ConfigError(f"no summary.json in {in_dir}")
    summary = SummaryOut.model_validate_json(path.read_text(encoding="utf-8"))

    table = pd.DataFrame(
        {
            "labeled": [c.labeled for c in summary.combinations],
            "test": [c.test for c in summary.combinations],
            "mean": [100.0 * c.mean for c in summary.combinations],
            "seeds": [" ".join(f"{100.0 * s:.1f}" for s in c.scores) for c in summary.combinations],
        }
    )
    ref = summary.reference
    lines = [
        f"📊 {summary.variant} (last {summary.score_window} epochs, code {summary.code_version})",
        table.to_string(index=False, float_format=lambda v: f"{v:.2f}"),
        f"Avg {100.0 * summary.avg:.2f}  Std {100.0 * summary.std:.2f}",
        f"reference ({ref.dataset}, full scale): Avg {ref.avg:.1f}  Std {ref.std:.1f}",
    ]
    return "\n".join(lines)
