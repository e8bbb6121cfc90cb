"""Command-line entry point: ``aada <command> [options]``.

Commands: ``synth-gen``, ``source-train``, ``adapt``, ``infer``, ``evaluate``.
Logs go to stderr; every artefact is written under ``--output-dir``.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch
from scipy.stats import wasserstein_distance

from . import __version__
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ConfigError, ExperimentConfig, read_config_file, resolve
from .data import DataError, DomainDataset, NormalizationStats, RasterSample, load_domain, load_meta, normalize_dataset, resample_dataset, save_domain
from .evaluation import ConfusionMatrix, histogram_distribution, js_divergence, metrics, write_metrics
from .experiment import evaluate_original_resolution, new_bundle, predict_tile, prepare_domains, seed_everything, train_source_model
from .inference import TTA_VARIANTS, TilingPlan
from .losses import ClassWeights, DivergenceError
from .networks import ModelBundle
from .selection import SelectionError, select_last, select_parameters, selection_report, write_report
from .synth import CHANNEL_NAMES, SynthShiftConfig, render_domain, synth_domain_pair
from .training import TrainLog, da_train

logger = logging.getLogger("aada")

EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGENCE = 2, 3, 4
SEED_ENV = "AADA_SEED"
# pixels per channel drawn for the manifest's distribution distances
MANIFEST_PIXELS = 20000


def _parse_set(items: list[str]) -> dict[str, str]:
    out = {}
    for item in items:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def build_config(args: argparse.Namespace) -> ExperimentConfig:
    """Profile defaults, then the config file, then flags (highest)."""
    file_values = read_config_file(args.config) if args.config else {}
    cli: dict[str, object] = {}
    if args.seed is not None:
        cli["seed"] = args.seed
    elif "seed" not in file_values and os.environ.get(SEED_ENV):
        try:
            cli["seed"] = int(os.environ[SEED_ENV])
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer") from None
    for key in ("source_dir", "target_dir", "output_dir"):
        value = getattr(args, key, None)
        if value is not None:
            cli[key] = value
    if getattr(args, "loss", None):
        cli["source.loss"] = args.loss
    if getattr(args, "rho", None) is not None:
        cli["da.lw.rho"] = args.rho
    cli.update(_parse_set(args.set))
    return resolve(args.profile, file_values, cli)


def _require_dir(path: str | None, what: str) -> Path:
    if not path:
        raise ConfigError(f"{what} is required")
    p = Path(path)
    if not p.is_dir():
        raise DataError(f"{what} does not exist: {p}")
    return p


def _output_dir(cfg: ExperimentConfig) -> Path:
    if not cfg.output_dir:
        raise ConfigError("--output-dir is required")
    out = Path(cfg.output_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create output directory {out}: {exc}") from exc
    if not os.access(out, os.W_OK):
        raise DataError(f"output directory is not writable: {out}")
    return out


def _plan(args) -> TilingPlan:
    """Sliding windows with all flips, or with the identity view only."""
    return TilingPlan(tta=("identity",) if args.no_tta else TTA_VARIANTS)


# -- synth-gen ----------------------------------------------------------------


def channel_distances(a: DomainDataset, b: DomainDataset, rng: np.random.Generator) -> list[float]:
    """Per-channel 1-D Wasserstein distance between pixel samples of two domains."""

    def pixels(ds):
        x = np.concatenate([s.channels.reshape(-1, ds.n_channels) for s in ds.samples])
        idx = rng.choice(len(x), size=min(MANIFEST_PIXELS, len(x)), replace=False)
        return x[np.sort(idx)].astype(np.float64)

    pa, pb = pixels(a), pixels(b)
    return [float(wasserstein_distance(pa[:, c], pb[:, c])) for c in range(a.n_channels)]


def cmd_synth_gen(args, cfg: ExperimentConfig) -> int:
    out = _output_dir(cfg)
    shift = SynthShiftConfig.preset(args.shift)
    if args.tiles is not None:
        shift.source_tiles = shift.target_tiles = args.tiles
    if args.tile_size is not None:
        shift.tile_size = args.tile_size
    rng = np.random.default_rng(cfg.seed)
    source, target = synth_domain_pair(shift, rng)
    test = render_domain(shift, True, args.test_tiles, rng)
    if args.target_gsd is not None and args.target_gsd != shift.gsd:
        target = resample_dataset(target, args.target_gsd)
        test = resample_dataset(test, args.target_gsd)
    names = CHANNEL_NAMES[: source.n_channels]
    save_domain(source, out / "source", names)
    save_domain(target, out / "target", names)
    save_domain(test, out / "target_test", names)
    manifest = {
        "seed": cfg.seed,
        "shift": shift.to_dict(),
        "label_jsd": js_divergence(
            histogram_distribution(source.class_histogram()), histogram_distribution(target.class_histogram())
        ),
        "channel_names": names,
        "channel_wasserstein": channel_distances(source, target, np.random.default_rng(cfg.seed)),
        "source_gsd": source.gsd,
        "target_gsd": target.gsd,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    logger.info("wrote %s (label JSD %.4f)", out, manifest["label_jsd"])
    return 0


# -- source-train -------------------------------------------------------------


def _load_training_domains(cfg: ExperimentConfig, need_target: bool):
    source = load_domain(_require_dir(cfg.source_dir, "--source-dir"), require_labels=True)
    target = None
    if need_target or cfg.target_dir:
        target = load_domain(_require_dir(cfg.target_dir, "--target-dir"))
    return source, target


def _normalise_source_only(source: DomainDataset, target: DomainDataset | None):
    if target is not None:
        source, target, gsd = prepare_domains(source, target.unlabelled())
        return source, target, gsd
    return normalize_dataset(source, source.height_channel), None, source.gsd


def _checkpoint_extra(cfg: ExperimentConfig, stats: NormalizationStats, working_gsd: float, weights: ClassWeights | None, **more):
    extra = {
        "normalization_stats": stats.to_dict(),
        "working_gsd": working_gsd,
        "config": cfg.flat(),
        "class_weights": None if weights is None else weights.w.tolist(),
    }
    extra.update(more)
    return extra


def _eval_dataset(path: str | None) -> DomainDataset | None:
    if not path:
        return None
    return load_domain(_require_dir(path, "--eval-dir"), require_labels=True)


def cmd_source_train(args, cfg: ExperimentConfig) -> int:
    out = _output_dir(cfg)
    rng = seed_everything(cfg.seed)
    source, target, gsd = _normalise_source_only(*_load_training_domains(cfg, need_target=False))
    log = TrainLog(out / "source_log.csv")
    try:
        model, history = train_source_model(cfg, source, rng, log)
    finally:
        log.close()
    weights = history[-1].next_weights if history else None
    save_checkpoint(
        out / "source.pt",
        ModelBundle(model),
        **_checkpoint_extra(cfg, source.normalization_stats, gsd, weights, source_gsd=source.gsd),
    )
    evaluation = _eval_dataset(args.eval_dir)
    if evaluation is not None:
        # held-out split from the source domain: reuse the frozen source statistics
        values, cm = evaluate_original_resolution(model, evaluation, source.normalization_stats, gsd, plan=_plan(args))
        write_metrics(out / "source_metrics.json", values)
        cm.to_csv(out / "source_confusion.csv")
    logger.info("source training done: %s", out / "source.pt")
    return 0


# -- adapt --------------------------------------------------------------------


def _relative(path: str | None, root: Path) -> str | None:
    if path is None:
        return None
    try:
        return str(Path(path).resolve().relative_to(root.resolve()))
    except ValueError:
        return path


def cmd_adapt(args, cfg: ExperimentConfig) -> int:
    out = _output_dir(cfg)
    rng = seed_everything(cfg.seed)
    source_raw, target_raw = _load_training_domains(cfg, need_target=True)
    # target labels, when present, are for scoring only
    source, target, gsd = prepare_domains(source_raw, target_raw.unlabelled())
    if args.source_checkpoint:
        bundle_in, payload = load_checkpoint(args.source_checkpoint)
        model = bundle_in.classifier
        if payload.get("working_gsd") not in (None, gsd):
            raise ConfigError(f"source checkpoint was trained at GSD {payload['working_gsd']}, adaptation runs at {gsd}")
        weights = payload.get("class_weights")
        initial = ClassWeights(np.asarray(weights), cfg.source.kappa) if weights is not None else None
    else:
        log = TrainLog(out / "source_log.csv")
        try:
            model, history = train_source_model(cfg, source, rng, log)
        finally:
            log.close()
        initial = history[-1].next_weights if history else None
        save_checkpoint(out / "source.pt", ModelBundle(model), **_checkpoint_extra(cfg, source.normalization_stats, gsd, initial))
    if model.spec.input_channels != source.n_channels or model.spec.class_count != source.class_count:
        raise ConfigError("source checkpoint does not match the data's channels or classes")

    evaluation = _eval_dataset(args.eval_dir)
    if evaluation is None and all(s.labels is not None for s in target_raw.samples):
        evaluation = target_raw
    target_stats = target.normalization_stats
    before = None
    if evaluation is not None:
        before, _ = evaluate_original_resolution(model, evaluation, target_stats, gsd, plan=_plan(args))

    bundle = new_bundle(cfg, model, source.n_channels, rng)
    extra = _checkpoint_extra(cfg, target_stats, gsd, None, target_gsd=target_raw.gsd)
    log = TrainLog(out / "da_log.csv")
    try:
        records = da_train(
            bundle,
            source,
            target.unlabelled(),
            cfg.da,
            rng,
            cfg.source,
            cfg.augment,
            initial,
            checkpoint_dir=out / "checkpoints",
            log=log,
            checkpoint_extra=extra,
        )
    finally:
        log.close()
    for r in records:
        r.checkpoint_path = _relative(r.checkpoint_path, out)
    chosen = select_parameters(records) if args.select == "entropy" else select_last(records)
    report = selection_report(records, chosen, rule=args.select, last_epoch=select_last(records).epoch, working_gsd=gsd)
    write_report(out / "selection_report.json", report)

    model.load_state_dict(chosen.state)
    save_checkpoint(out / "selected.pt", ModelBundle(model, epoch=chosen.epoch), **extra)
    if evaluation is not None:
        after, cm = evaluate_original_resolution(model, evaluation, target_stats, gsd, plan=_plan(args))
        write_metrics(out / "evaluation.json", {"before": before, "after": after, "selected_epoch": chosen.epoch})
        cm.to_csv(out / "confusion.csv")
        logger.info("target mean F1 %.4f -> %.4f", before["mean_f1"], after["mean_f1"])
    logger.info("selected epoch %d (%s)", chosen.epoch, args.select)
    return 0


# -- infer / evaluate ---------------------------------------------------------


def _tiles(directory: Path) -> list[tuple[str, Path]]:
    paths = sorted(directory.glob("*.img.npy"))
    if not paths:
        raise DataError(f"no *.img.npy tiles in {directory}")
    return [(p.name[: -len(".img.npy")], p) for p in paths]


def cmd_infer(args, cfg: ExperimentConfig) -> int:
    out = _output_dir(cfg)
    seed_everything(cfg.seed)
    if not args.checkpoint or not Path(args.checkpoint).is_file():
        raise DataError(f"checkpoint not found: {args.checkpoint}")
    bundle, payload = load_checkpoint(args.checkpoint)
    stats_dict = payload.get("normalization_stats")
    if stats_dict is None:
        raise DataError("checkpoint carries no normalisation statistics")
    stats = NormalizationStats.from_dict(stats_dict)
    working_gsd = float(payload["working_gsd"])
    directory = _require_dir(args.input_dir or cfg.target_dir, "--input-dir")
    meta = load_meta(directory)
    gsd = float(meta["gsd"])
    plan = _plan(args)
    model = bundle.classifier
    for name, path in _tiles(directory):
        sample = RasterSample(np.load(path), None, gsd)
        labels, scores = predict_tile(model, sample, stats, working_gsd, plan=plan)
        np.save(out / f"{name}.lbl.npy", labels.astype(np.uint8), allow_pickle=False)
        if args.probabilities:
            np.save(out / f"{name}.prob.npy", scores.astype(np.float32), allow_pickle=False)
    (out / "meta.json").write_text(
        json.dumps({"gsd": gsd, "class_count": model.spec.class_count, "tta": list(plan.tta)}, indent=2, sort_keys=True)
    )
    logger.info("wrote predictions to %s", out)
    return 0


def cmd_evaluate(args, cfg: ExperimentConfig) -> int:
    out = _output_dir(cfg)
    pred_dir = _require_dir(args.predictions, "--predictions")
    ref_dir = _require_dir(args.reference, "--reference")
    classes = int(load_meta(ref_dir)["class_count"])
    cm = ConfusionMatrix(classes)
    names = [n for n, _ in _tiles(ref_dir)]
    for name in names:
        ref_path, pred_path = ref_dir / f"{name}.lbl.npy", pred_dir / f"{name}.lbl.npy"
        if not ref_path.is_file():
            raise DataError(f"missing reference labels for tile {name}")
        if not pred_path.is_file():
            raise DataError(f"missing prediction for tile {name}")
        pred, ref = np.load(pred_path), np.load(ref_path)
        if pred.shape != ref.shape:
            raise DataError(f"tile {name}: prediction {pred.shape} vs reference {ref.shape}")
        cm.accumulate(pred, ref)
    values = metrics(cm)
    write_metrics(out / "metrics.json", values)
    cm.to_csv(out / "confusion.csv")
    logger.info("OA %.4f mean F1 %.4f", values["oa"], values["mean_f1"])
    return 0


COMMANDS = {
    "synth-gen": cmd_synth_gen,
    "source-train": cmd_source_train,
    "adapt": cmd_adapt,
    "infer": cmd_infer,
    "evaluate": cmd_evaluate,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--profile", choices=["paper", "desk"], default=None, help="hyper-parameter profile (default: paper)")
    common.add_argument("--config", help="flat key = value config file")
    common.add_argument("--seed", type=int, default=None, help=f"random seed (fallback: ${SEED_ENV})")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key, e.g. da.lw.rho=0")
    common.add_argument("--output-dir", dest="output_dir")
    common.add_argument("--dump-config", action="store_true", help="print the resolved config and exit")
    common.add_argument("-v", "--verbose", action="count", default=0)

    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--source-dir", dest="source_dir")
    data.add_argument("--target-dir", dest="target_dir")
    data.add_argument("--eval-dir", dest="eval_dir", help="labelled target tiles used only for scoring")
    data.add_argument("--no-tta", action="store_true", help="sliding windows without flip averaging")

    parser = argparse.ArgumentParser(prog="aada", description="Adversarial appearance adaptation for aerial image segmentation.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-gen", parents=[common], help="render a synthetic source/target pair")
    p.add_argument("--shift", choices=["none", "radiometric", "skewed"], default="radiometric")
    p.add_argument("--tiles", type=int, default=None, help="tiles per domain")
    p.add_argument("--tile-size", dest="tile_size", type=int, default=None)
    p.add_argument("--test-tiles", dest="test_tiles", type=int, default=4)
    p.add_argument("--target-gsd", dest="target_gsd", type=float, default=None, help="resample the target domain to this GSD")

    p = sub.add_parser("source-train", parents=[common, data], help="train the classifier on the source domain")
    p.add_argument("--loss", choices=["ace", "ce", "focal"])

    p = sub.add_parser("adapt", parents=[common, data], help="adversarial adaptation plus checkpoint selection")
    p.add_argument("--loss", choices=["ace", "ce", "focal"])
    p.add_argument("--rho", type=float, default=None, help="discriminator regulariser weight (0 disables it)")
    p.add_argument("--select", choices=["entropy", "last"], default="entropy")
    p.add_argument("--source-checkpoint", dest="source_checkpoint")

    p = sub.add_parser("infer", parents=[common], help="label maps at the input resolution")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input-dir", dest="input_dir")
    p.add_argument("--target-dir", dest="target_dir")
    p.add_argument("--no-tta", action="store_true", help="sliding windows without flip averaging")
    p.add_argument("--probabilities", action="store_true", help="also write per-class scores")

    p = sub.add_parser("evaluate", parents=[common], help="metrics of predicted against reference label maps")
    p.add_argument("--predictions", required=True)
    p.add_argument("--reference", required=True)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING if args.verbose == 0 else logging.INFO if args.verbose == 1 else logging.DEBUG
    logging.basicConfig(level=level, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s", force=True)
    torch.set_num_threads(1)
    try:
        cfg = build_config(args)
        if args.dump_config:
            sys.stdout.write(cfg.dump())
            return 0
        return COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        logger.error("config error: %s", exc)
        return EXIT_CONFIG
    except (DataError, SelectionError) as exc:
        logger.error("data error: %s", exc)
        return EXIT_DATA
    except DivergenceError as exc:
        logger.error("training diverged: %s", exc)
        return EXIT_DIVERGENCE


if __name__ == "__main__":
    sys.exit(main())
