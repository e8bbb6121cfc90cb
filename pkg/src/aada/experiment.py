"""End-to-end pipelines shared by the CLI and the scenario checks."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import torch

from .config import ExperimentConfig
from .data import DataError, DomainDataset, NormalizationStats, RasterSample, normalize_dataset, resample_sample, resample_to_common_gsd
from .evaluation import ConfusionMatrix, metrics
from .inference import TilingPlan, predict_full, sliding_window_predict, upsample_scores
from .losses import ClassWeights
from .networks import ModelBundle, build_adapter, build_classifier, build_discriminator
from .selection import CheckpointRecord, select_last, select_parameters
from .synth import SynthShiftConfig, render_domain, synth_domain_pair
from .training import EpochStats, TrainLog, da_train, source_train

logger = logging.getLogger(__name__)


def seed_everything(seed: int) -> np.random.Generator:
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True, warn_only=True)
    return np.random.default_rng(seed)


def prepare_domains(source: DomainDataset, target: DomainDataset):
    """Resample to a common GSD, then normalise each domain with its own stats.

    Returns ``(source, target, working_gsd)``.
    """
    source, target, gsd = resample_to_common_gsd(source, target)
    source = normalize_dataset(source, source.height_channel)
    target = normalize_dataset(target, target.height_channel)
    return source, target, gsd


def new_classifier(cfg: ExperimentConfig, n: int, l: int, rng: np.random.Generator):
    return build_classifier(cfg.model.classifier_spec(n, l), int(rng.integers(2**31)))


def new_bundle(cfg: ExperimentConfig, classifier, n: int, rng: np.random.Generator) -> ModelBundle:
    adapter = build_adapter(cfg.model.adapter_spec(n), int(rng.integers(2**31)))
    disc = build_discriminator(cfg.model.disc_spec(n), int(rng.integers(2**31)))
    return ModelBundle(classifier, adapter, disc)


def evaluate(model, dataset: DomainDataset, tta: bool = False, plan: TilingPlan | None = None) -> dict:
    """Score a labelled dataset with plain or tiled TTA inference."""
    cm = ConfusionMatrix(dataset.class_count)
    for s in dataset.samples:
        if tta:
            _, pred = sliding_window_predict(model, s.channels, plan)
        else:
            pred = predict_full(model, s.channels).argmax(-1)
        cm.accumulate(pred, s.labels)
    return metrics(cm)


def predict_at_resolution(model, channels: np.ndarray, out_size: tuple[int, int], plan: TilingPlan | None = None, tta: bool = True):
    """Predict at the working resolution and upsample scores to ``out_size``.

    Returns ``(labels, scores)`` at ``out_size``.
    """
    if tta:
        scores, _ = sliding_window_predict(model, channels, plan)
    else:
        scores = predict_full(model, channels)
    return upsample_scores(scores, size=out_size)


def predict_tile(
    model,
    sample: RasterSample,
    stats: NormalizationStats,
    working_gsd: float,
    tta: bool = True,
    plan: TilingPlan | None = None,
):
    """Classify a raw tile and return labels and scores on its own pixel grid.

    The tile is resampled to the working GSD when it is finer, normalised
    with frozen domain statistics, classified, and the class scores are
    bilinearly upsampled back to the input size.
    """
    work = resample_sample(sample, working_gsd, keep_labels=False) if sample.gsd < working_gsd else sample
    return predict_at_resolution(model, stats.apply(work.channels), sample.shape, plan, tta)


def evaluate_original_resolution(
    model, dataset: DomainDataset, stats: NormalizationStats, working_gsd: float, tta: bool = True, plan: TilingPlan | None = None
) -> tuple[dict, ConfusionMatrix]:
    """Score raw labelled tiles at their own resolution."""
    cm = ConfusionMatrix(dataset.class_count)
    for s in dataset.samples:
        if s.labels is None:
            raise DataError("evaluation needs labelled tiles")
        labels, _ = predict_tile(model, s, stats, working_gsd, tta, plan)
        cm.accumulate(labels, s.labels)
    return metrics(cm), cm


@dataclass
class ScenarioResult:
    seed: int
    baseline: dict
    source_history: list[EpochStats]
    records: list[CheckpointRecord]
    epoch_metrics: dict[int, dict] = field(default_factory=dict)
    selected_epoch: int | None = None
    last_epoch: int | None = None

    @property
    def selected(self) -> dict:
        return self.epoch_metrics[self.selected_epoch]

    @property
    def last(self) -> dict:
        return self.epoch_metrics[self.last_epoch]


def synth_scenario_data(shift: SynthShiftConfig, seed: int, test_tiles: int = 4):
    """Source, unlabelled-target and held-out target test sets, normalised."""
    rng = np.random.default_rng(seed)
    source, target = synth_domain_pair(shift, rng)
    test = render_domain(shift, True, test_tiles, rng)
    source_n, target_n, _ = prepare_domains(source, target)
    test_n = normalize_dataset(test, stats=target_n.normalization_stats)
    return source_n, target_n, test_n


def train_source_model(cfg: ExperimentConfig, source: DomainDataset, rng: np.random.Generator, log: TrainLog | None = None):
    model = new_classifier(cfg, source.n_channels, source.class_count, rng)
    history = source_train(model, source, cfg.source, rng, cfg.augment, log=log)
    return model, history


def run_scenario(
    cfg: ExperimentConfig,
    shift: SynthShiftConfig,
    seed: int,
    data=None,
    source_model=None,
    log: TrainLog | None = None,
) -> ScenarioResult:
    """Source training, adaptation and per-epoch target scoring on synthetic data.

    Target labels are read only to score checkpoints; training and selection
    never see them.
    """
    rng = seed_everything(seed)
    source, target, test = data if data is not None else synth_scenario_data(shift, seed)
    if source_model is None:
        model, history = train_source_model(cfg, source, rng)
    else:
        model, history = source_model
        model = _clone(cfg, model, source)
    baseline = evaluate(model, test)
    bundle = new_bundle(cfg, model, source.n_channels, rng)
    initial = history[-1].next_weights if history else ClassWeights.uniform(source.class_count)
    epoch_metrics: dict[int, dict] = {}

    def score(epoch, b):
        epoch_metrics[epoch] = evaluate(b.classifier, test)

    records = da_train(
        bundle, source, target.unlabelled(), cfg.da, rng, cfg.source, cfg.augment, initial, log=log, on_epoch_end=score
    )
    result = ScenarioResult(seed, baseline, history, records, epoch_metrics)
    result.selected_epoch = select_parameters(records).epoch
    result.last_epoch = select_last(records).epoch
    return result


def _clone(cfg: ExperimentConfig, model, source: DomainDataset):
    copy = build_classifier(model.spec)
    copy.load_state_dict(model.state_dict())
    return copy
