"""
DRIFTREC COMMAND LINE
train | eval-stream | export-factors | gradcheck | synth
Logs go to stderr, machine-readable results to stdout
"""

import argparse
import copy
import logging
import math
import sys
from pathlib import Path
from typing import Hashable, List, Optional, Sequence, Tuple

import pandas as pd

from driftrec.data.config import RunConfig, load_config
from driftrec.data.ratings import RatingEvent, chrono_split, parse_ratings
from driftrec.data.synth import generate_synthetic, write_synthetic
from driftrec.engine.gradcheck_suite import run_gradcheck
from driftrec.engine.inference import TrainingResult, train_offline
from driftrec.errors import DataFormatError, DriftRecError, UnknownEntityError
from driftrec.model.checkpoint import build_optimizer, load_checkpoint, save_checkpoint
from driftrec.model.model import DriftRecModel, ModelSettings
from driftrec.model.state import EntityKind, EntityTable
from driftrec.streaming.export import export_factors
from driftrec.streaming.harness import prequential_eval

logger = logging.getLogger("driftrec.cli")

VERBS = ("train", "eval-stream", "export-factors", "gradcheck", "synth")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="driftrec", description="Streaming recommender with drifting latent factors")
    parser.add_argument("verb", choices=VERBS)
    parser.add_argument("--config", type=Path, default=None, help="key = value run configuration")
    parser.add_argument("--out", type=Path, default=Path("."), help="output directory")
    parser.add_argument("--seed", type=int, default=None, help="overrides the configured seed")
    parser.add_argument("--checkpoint", type=Path, default=None)
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="configuration override, repeatable")
    parser.add_argument("--entities", default=None,
                        help="export-factors selection, e.g. user:1,user:7,item:32 (default: all)")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    config = load_config(args.config).with_overrides(args.overrides)
    if args.seed is not None:
        config = config.with_overrides([f"seed={args.seed}"])
    return config


def _load_events(config: RunConfig) -> List[RatingEvent]:
    if not config.dataset_path:
        raise DataFormatError("no dataset_path configured")
    path = Path(config.dataset_path)
    if not path.is_file():
        raise DataFormatError(f"dataset not found: {path}")
    return parse_ratings(path, config.dataset_format, (config.rating_min, config.rating_max))


def _split(config: RunConfig) -> Tuple[List[RatingEvent], List[RatingEvent], List[RatingEvent]]:
    return chrono_split(_load_events(config), config.split_ratios, config.split_mode)


def _format_rmse(value: Optional[float]) -> str:
    return "absent" if value is None or math.isnan(value) else f"{value:.10g}"


# ----------------------------------------------------------------------------
# Verbs
# ----------------------------------------------------------------------------

def cmd_train(config: RunConfig, out: Path) -> int:
    train, validation, _ = _split(config)
    model = DriftRecModel(ModelSettings.from_config(config), seed=config.seed)
    if train:
        model.set_global_bias(sum(e.rating for e in train) / len(train))
    optimizer = build_optimizer(model, config.optimizer_settings())

    log_rows = []

    def validate(epoch: int, result: TrainingResult):
        trial_model, trial_optimizer = copy.deepcopy((result.model, result.optimizer))
        rmse = None
        if validation:
            rmse = prequential_eval(trial_model, trial_optimizer, validation, config.granularity_seconds,
                                    config.test_iterations, config.seed, config.update_interval_steps).overall_rmse
        log_rows.append({"epoch": epoch + 1, "elbo": result.epoch_elbo[-1],
                         "validation_rmse": math.nan if rmse is None else rmse})
        logger.info("📊 Epoch %d validation RMSE %s", epoch + 1, _format_rmse(rmse))

    train_offline(model, optimizer, train, config.granularity_seconds, config.truncation_steps,
                  config.epochs, config.train_iterations, config.seed, on_epoch=validate)
    if config.epochs > 0 and validation:
        prequential_eval(model, optimizer, validation, config.granularity_seconds,
                         config.test_iterations, config.seed, config.update_interval_steps)

    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out / "checkpoint.pt", model, optimizer)
    pd.DataFrame(log_rows, columns=["epoch", "elbo", "validation_rmse"]).to_csv(
        out / "training_log.csv", index=False, na_rep="", float_format="%.10g")
    (out / "config.txt").write_text(config.to_text(), encoding="utf-8")
    print(f"checkpoint={out / 'checkpoint.pt'}")
    print(f"validation_rmse={_format_rmse(log_rows[-1]['validation_rmse'] if log_rows else None)}")
    return 0


def cmd_eval_stream(config: RunConfig, out: Path, checkpoint: Path) -> int:
    _, _, test = _split(config)
    model, optimizer = load_checkpoint(checkpoint)
    if config.record_factors:
        model.settings.record_factors = True
    result = prequential_eval(model, optimizer, test, config.granularity_seconds, config.test_iterations,
                              config.seed, config.update_interval_steps)
    out.mkdir(parents=True, exist_ok=True)
    csv_text = result.to_csv()
    (out / "stream_rmse.csv").write_text(csv_text, encoding="utf-8")
    save_checkpoint(out / "checkpoint_stream.pt", model, optimizer)
    sys.stdout.write(csv_text)
    print(f"cold_skipped={result.n_cold_skipped}")
    print(f"overall_rmse={_format_rmse(result.overall_rmse)}")
    return 0


def _entity_id(table: EntityTable, raw: str) -> Hashable:
    if raw in table:
        return raw
    try:
        if int(raw) in table:
            return int(raw)
    except ValueError:
        pass
    raise UnknownEntityError(table.kind.value, raw)


def parse_entities(model: DriftRecModel, text: Optional[str]) -> Tuple[Optional[list], Optional[list]]:
    """``user:ID,item:ID,...`` → (user ids, item ids); a kind with no entries means all"""
    if not text:
        return None, None
    users, items = [], []
    for token in (t.strip() for t in text.split(",") if t.strip()):
        kind, sep, raw = token.partition(":")
        if not sep or kind not in ("user", "item"):
            raise DataFormatError(f"entity '{token}' is not user:ID or item:ID")
        table = model.table(EntityKind(kind))
        (users if kind == "user" else items).append(_entity_id(table, raw))
    return users or None, items or None


def cmd_export_factors(out: Path, checkpoint: Path, entities: Optional[str]) -> int:
    model, _ = load_checkpoint(checkpoint)
    user_ids, item_ids = parse_entities(model, entities)
    for name, path in export_factors(model, out, user_ids, item_ids).items():
        print(f"{name}={path}")
    return 0


def cmd_gradcheck(seed: int) -> int:
    suite = run_gradcheck(seed)
    sys.stdout.write(suite.to_frame().to_csv(index=False, float_format="%.3e"))
    if suite.passed:
        print("gradcheck=pass")
        return 0
    check, parameter, error = suite.worst
    print("gradcheck=fail")
    print(f"❌ gradient check failed: {check} / {parameter} relative error {error:.3e}", file=sys.stderr)
    return 1


def cmd_synth(config: RunConfig, out: Path) -> int:
    stream = generate_synthetic(config, config.seed)
    for name, path in write_synthetic(stream, out).items():
        print(f"{name}={path}")
    return 0


def _checkpoint_path(args: argparse.Namespace, default_name: str) -> Path:
    path = args.checkpoint or args.out / default_name
    if not path.is_file():
        raise DataFormatError(f"checkpoint not found: {path}")
    return path


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING if not args.verbose else logging.INFO if args.verbose == 1 else logging.DEBUG
    logging.basicConfig(level=level, stream=sys.stderr,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        config = resolve_config(args)
        if args.verb == "train":
            return cmd_train(config, args.out)
        if args.verb == "eval-stream":
            return cmd_eval_stream(config, args.out, _checkpoint_path(args, "checkpoint.pt"))
        if args.verb == "export-factors":
            return cmd_export_factors(args.out, _checkpoint_path(args, "checkpoint_stream.pt"), args.entities)
        if args.verb == "gradcheck":
            return cmd_gradcheck(config.seed)
        return cmd_synth(config, args.out)
    except (DriftRecError, OSError) as exc:
        print(f"❌ driftrec {args.verb}: {exc}", file=sys.stderr)
        return 1
