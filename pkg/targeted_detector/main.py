"""
Command-line entry point for the targeted detector.

    python -m targeted_detector.main gen --n 32 --size 64 --seed 7 --out data
    python -m targeted_detector.main convert --config configs/overfit.conf
    python -m targeted_detector.main stats --config configs/overfit.conf
    python -m targeted_detector.main train --config configs/overfit.conf
    python -m targeted_detector.main eval --config configs/overfit.conf --protocol targeted_only
    python -m targeted_detector.main attn --config configs/overfit.conf --image-id 3 --target circle
"""
import argparse
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional

from targeted_detector.attention_dump import dump_attention, dump_predictions
from targeted_detector.config import RunConfig, load_config
from targeted_detector.dataprep import (
    AnnotationStore,
    TargetedSample,
    convert_dataset,
    dataset_stats,
    load_targeted_dataset,
    source_class_ratios,
    write_targeted_dataset,
)
from targeted_detector.errors import AnnotationError, ConfigError, DatasetError, TargetedDetectorError
from targeted_detector.evaluation import (
    PROTOCOLS,
    conditioning_purity,
    deceptive_eval,
    evaluate,
    format_deceptive_table,
    format_deceptive_text,
)
from targeted_detector.shapes import generate_shapes_dataset, write_shapes_dataset
from targeted_detector.tensor import set_debug_checks
from targeted_detector.tokenizer import ALL, Tokenizer
from targeted_detector.trainer import Trainer, build_example, load_trained_model

logger = logging.getLogger(__name__)


def setup_logging(cfg: Optional[RunConfig] = None) -> None:
    """Logs go to stderr so reports on stdout stay byte-identical between runs."""
    level = getattr(logging, cfg.log_level.upper(), logging.INFO) if cfg else logging.INFO
    fmt = cfg.log_format if cfg else "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
    logging.basicConfig(
        level=level,
        format=fmt,
        handlers=[logging.StreamHandler(sys.stderr)],
        force=True,
    )


def _parse_set(values: List[str]) -> Dict[str, str]:
    pairs = {}
    for item in values:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects section.field=value, got {item!r}")
        pairs[key.strip()] = value.strip()
    return pairs


def _parse_rates(text: str) -> List[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise ConfigError(f"invalid --rates value {text!r}") from exc


def build_config(args: argparse.Namespace) -> RunConfig:
    """File values, then ``--set`` pairs, then dedicated flags; later wins."""
    overrides = _parse_set(args.set or [])
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    if args.out is not None:
        overrides["paths.out_dir"] = args.out
    for flag, key in (
        ("workers", "workers"),
        ("annotations", "paths.annotations"),
        ("dataset", "paths.dataset"),
        ("checkpoint", "paths.checkpoint"),
        ("all_prob", "sampling.all_token_probability"),
        ("deceptive_rate", "sampling.deceptive_rate"),
        ("epochs", "train.epochs_of_sampling"),
        ("steps", "train.steps"),
        ("size", "model.image_size"),
    ):
        value = getattr(args, flag, None)
        if value is not None:
            overrides[key] = str(value)
    cfg = load_config(args.config, overrides)
    cfg.sampling.global_seed = cfg.seed
    return cfg


def _load_store(cfg: RunConfig) -> AnnotationStore:
    path = Path(cfg.paths.annotations)
    if not path.exists():
        raise ConfigError(f"annotation file {path} does not exist")
    return AnnotationStore.load(path)


def cmd_gen(cfg: RunConfig, args: argparse.Namespace) -> int:
    store = generate_shapes_dataset(args.n, cfg.model.image_size, cfg.seed)
    out_dir = args.out or str(Path(cfg.paths.annotations).parent)
    annotation_path = write_shapes_dataset(store, out_dir)
    print(f"images = {len(store.images)}")
    print(f"instances = {len(store.instances)}")
    print(f"categories = {len(store.categories)}")
    print(f"annotations = {annotation_path}")
    return 0


def cmd_convert(cfg: RunConfig, args: argparse.Namespace) -> int:
    store = _load_store(cfg)
    samples = convert_dataset(store, cfg.sampling, cfg.train.epochs_of_sampling, cfg.workers)
    out_path = Path(cfg.paths.dataset)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    count = write_targeted_dataset(samples, out_path)
    print(f"records = {count}")
    print(f"dataset = {out_path}")
    return 0


def cmd_stats(cfg: RunConfig, args: argparse.Namespace) -> int:
    path = Path(args.path or cfg.paths.dataset)
    if not path.exists():
        raise DatasetError(f"targeted dataset {path} does not exist")
    stats = dataset_stats(load_targeted_dataset(path))
    class_names = None
    store = None
    if Path(cfg.paths.annotations).exists():
        store = _load_store(cfg)
        class_names = store.category_names
    print(stats.format_report(class_names))
    if store is not None:
        print("category ratio (converted vs source):")
        source = source_class_ratios(store)
        for class_id, ratio in stats.class_ratios().items():
            print(f"  {class_names[class_id]:<20} {ratio:.4f} {source.get(class_id, 0.0):.4f}")
    return 0


def cmd_train(cfg: RunConfig, args: argparse.Namespace) -> int:
    store = _load_store(cfg)
    samples = load_targeted_dataset(cfg.paths.dataset)
    tokenizer = Tokenizer.from_category_names(store.category_names)
    out_dir = Path(cfg.paths.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.txt").write_text(cfg.to_text(), encoding="utf-8")

    trainer = Trainer(cfg, store, samples, tokenizer)
    history = trainer.run(resume=not args.fresh)
    if history:
        last = history[-1]
        print(f"step = {trainer.step}")
        print(f"loss = {last.total!r}")
    print(f"checkpoint = {cfg.paths.checkpoint}")
    print(f"loss_log = {trainer.log_path}")
    return 0


def cmd_eval(cfg: RunConfig, args: argparse.Namespace) -> int:
    store = _load_store(cfg)
    tokenizer = Tokenizer.from_category_names(store.category_names)
    model = load_trained_model(cfg, store, tokenizer)
    out_dir = Path(cfg.paths.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    protocols = PROTOCOLS if args.protocol == "every" else (args.protocol,)
    text = []
    for protocol in protocols:
        report = evaluate(model, store, tokenizer, cfg.eval, protocol, cfg.seed, workers=cfg.workers)
        text.append(report.to_text(prefix=f"{protocol}." if len(protocols) > 1 else ""))
        print(report.format_table())
    if args.rates:
        rows = deceptive_eval(
            model, store, tokenizer, cfg.eval, _parse_rates(args.rates), cfg.seed, workers=cfg.workers
        )
        text.append(format_deceptive_text(rows))
        print(format_deceptive_table(rows))
    if args.purity is not None:
        purity = conditioning_purity(model, store, tokenizer, cfg.eval, args.purity)
        value = "absent" if purity.purity is None else repr(purity.purity)
        text.append(f"purity = {value}\npurity.detections = {purity.detections}\n")
        print(f"conditioning purity = {value} ({purity.on_target}/{purity.detections})")

    report_path = out_dir / "eval_report.txt"
    report_path.write_text("".join(text), encoding="utf-8")
    logger.info("Wrote evaluation report to %s", report_path)
    return 0


def cmd_attn(cfg: RunConfig, args: argparse.Namespace) -> int:
    store = _load_store(cfg)
    tokenizer = Tokenizer.from_category_names(store.category_names)
    model = load_trained_model(cfg, store, tokenizer)
    try:
        store.image(args.image_id)
    except AnnotationError:
        raise DatasetError(f"unknown image id {args.image_id}") from None

    phrases = tuple(args.target or [ALL])
    sample = TargetedSample(args.image_id, phrases, (), cfg.seed)
    example = build_example(sample, store, tokenizer, model.cfg)
    pred = model.forward(example.image, example.tokens, capture_attention=True, block_text=args.block_text)

    out_dir = Path(cfg.paths.out_dir) / "attention"
    written = dump_attention(out_dir, pred.attention, model.cfg.grid_size, write_rasters=not args.no_rasters)
    dump_predictions(out_dir / "predictions.csv", pred, store.category_names)
    print(f"files = {len(written) + 1}")
    print(f"attention = {out_dir}")
    return 0


COMMANDS = {
    "gen": cmd_gen,
    "convert": cmd_convert,
    "stats": cmd_stats,
    "train": cmd_train,
    "eval": cmd_eval,
    "attn": cmd_attn,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat section.field = value config file")
    common.add_argument("--seed", type=int, help="run seed (mandatory here or in the config)")
    common.add_argument("--out", help="output directory")
    common.add_argument("--workers", type=int, help="worker threads for conversion and evaluation")
    common.add_argument(
        "--set", action="append", metavar="KEY=VALUE", help="override any config key; repeatable"
    )

    parser = argparse.ArgumentParser(prog="targeted_detector", description="Language-targeted object detector")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", parents=[common], help="generate a synthetic shapes dataset")
    gen.add_argument("--n", type=int, default=32, help="number of images")
    gen.add_argument("--size", type=int, help="image side in pixels")

    convert = sub.add_parser("convert", parents=[common], help="convert annotations to targeted samples")
    convert.add_argument("--annotations")
    convert.add_argument("--dataset", help="output targeted dataset file")
    convert.add_argument("--all-prob", dest="all_prob", type=float)
    convert.add_argument("--deceptive-rate", dest="deceptive_rate", type=float)
    convert.add_argument("--epochs", type=int)

    stats = sub.add_parser("stats", parents=[common], help="print targeted dataset statistics")
    stats.add_argument("path", nargs="?", help="targeted dataset file")
    stats.add_argument("--annotations")

    train = sub.add_parser("train", parents=[common], help="train, resuming from the checkpoint if present")
    train.add_argument("--annotations")
    train.add_argument("--dataset")
    train.add_argument("--checkpoint")
    train.add_argument("--steps", type=int)
    train.add_argument("--fresh", action="store_true", help="ignore an existing checkpoint")

    evaluate_cmd = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    evaluate_cmd.add_argument("--annotations")
    evaluate_cmd.add_argument("--checkpoint")
    evaluate_cmd.add_argument("--protocol", choices=PROTOCOLS + ("every",), default="all")
    evaluate_cmd.add_argument("--rates", help="comma-separated deceptive rates, e.g. 0,0.1,0.2")
    evaluate_cmd.add_argument(
        "--purity", type=float, nargs="?", const=0.5, help="report single-target purity above this score"
    )

    attn = sub.add_parser("attn", parents=[common], help="dump decoder attention for one image")
    attn.add_argument("--annotations")
    attn.add_argument("--checkpoint")
    attn.add_argument("--image-id", dest="image_id", type=int, required=True)
    attn.add_argument("--target", action="append", help="target phrase; repeatable (default [all])")
    attn.add_argument("--block-text", dest="block_text", action="store_true")
    attn.add_argument("--no-rasters", dest="no_rasters", action="store_true")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """Main entry point; returns the process exit status."""
    args = build_parser().parse_args(argv)
    try:
        cfg = build_config(args)
    except TargetedDetectorError as exc:
        setup_logging()
        logger.error("%s", exc)
        return 1
    setup_logging(cfg)
    set_debug_checks(cfg.debug_checks)

    try:
        return COMMANDS[args.command](cfg, args)
    except KeyboardInterrupt:
        logger.info("Interrupted")
        return 130
    except TargetedDetectorError as exc:
        logger.error("%s", exc)
        return 1
    except Exception as exc:
        logger.exception("Fatal error: %s", exc)
        return 1
    finally:
        set_debug_checks(False)


if __name__ == "__main__":
    sys.exit(main())
