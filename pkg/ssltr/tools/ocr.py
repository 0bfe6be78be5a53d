"""Text recognition: train from scratch, fine-tune a checkpoint, evaluate.

Usage: python -m ssltr.tools.ocr train --corpus MANIFEST --out DIR
       python -m ssltr.tools.ocr finetune CKPT --corpus MANIFEST --out DIR
       python -m ssltr.tools.ocr eval CKPT --corpus MANIFEST [--predictions FILE]
"""

import argparse
import logging
import sys
from pathlib import Path

from ssltr.backbone import HeadSpec, LineModel, load_checkpoint, save_checkpoint
from ssltr.config import write_config
from ssltr.dataset import Charset, load_manifest
from ssltr.errors import SsltrError
from ssltr.ocr import evaluate, train_ocr
from ssltr.schedule import schedule_from_table
from ssltr.tools import (
    add_common_arguments,
    add_config_arguments,
    config_from_args,
    setup_logging,
)
from ssltr.training import MetricsStream, select_device, set_seed
from ssltr.types import Phase

log = logging.getLogger(__name__)


parser = argparse.ArgumentParser(description="CTC text recognition")
add_common_arguments(parser)
commands = parser.add_subparsers(dest="command", required=True)


def _training_arguments(sub):
    add_config_arguments(sub)
    sub.add_argument("--corpus", metavar="MANIFEST", required=True)
    sub.add_argument("--validation", metavar="MANIFEST", default=None)
    sub.add_argument("--out", metavar="DIR", required=True)


train_parser = commands.add_parser("train", help="Train from scratch")
_training_arguments(train_parser)

finetune_parser = commands.add_parser("finetune", help="Fine-tune a checkpoint")
finetune_parser.add_argument("checkpoint", metavar="CKPT")
_training_arguments(finetune_parser)

eval_parser = commands.add_parser("eval", help="Greedy decoding and CER")
eval_parser.add_argument("checkpoint", metavar="CKPT")
eval_parser.add_argument("--corpus", metavar="MANIFEST", required=True)
eval_parser.add_argument("--batch-size", type=int, default=16)
eval_parser.add_argument("--device", default=None)
eval_parser.add_argument("--predictions", metavar="FILE", default=None)
eval_parser.add_argument("--json", metavar="FILE", default=None)


def checkpoint_charset(extra, corpus) -> Charset:
    if "charset" in extra:
        return Charset(tuple(extra["charset"]), extra.get("capacity"))
    return corpus.charset


def train(args):
    config = config_from_args(args)
    out = Path(args.out)
    write_config(config, out)
    device = select_device(config.training.device)
    t = config.training
    corpus = load_manifest(args.corpus, workers=config.data.workers)
    validation = None
    texts = [e.text for e in corpus if e.text]
    if args.validation:
        validation = load_manifest(args.validation, workers=config.data.workers)
        texts += [e.text for e in validation if e.text]
    charset = Charset.from_texts(texts, config.data.charset_capacity)
    if validation is not None:
        validation = validation.with_charset(charset)

    set_seed(config.seed)
    if args.command == "train":
        phase = Phase.OCR_SCRATCH
        start = LineModel(config.model.model_config(HeadSpec.linear(charset.num_classes)))
    else:
        phase = Phase.OCR_FINETUNE
        start = Path(args.checkpoint)
    schedule = schedule_from_table(phase, t.scale, t.batch_scale, t.max_batch)
    with MetricsStream(out / "metrics.jsonl") as metrics:
        result = train_ocr(
            start,
            corpus,
            schedule,
            augmentation=config.augmentation_for(schedule.augmentation),
            charset=charset,
            seed=config.seed,
            validation=validation,
            metrics=metrics,
            checkpoint_dir=out,
            device=device,
            prefetch=t.prefetch,
            log_every=t.log_every,
            progress=t.progress,
        )
    path = save_checkpoint(
        out / "ocr.pt",
        result.model,
        {"charset": list(charset.symbols), "capacity": charset.capacity, "phase": phase.value},
    )
    if result.best_cer is not None:
        log.info("Best validation CER %.4f", result.best_cer)
    log.info("Wrote %s", path)


def main():
    args = parser.parse_args()
    setup_logging(args)
    try:
        if args.command == "eval":
            device = select_device(args.device)
            model, extra = load_checkpoint(args.checkpoint, device)
            corpus = load_manifest(args.corpus)
            charset = checkpoint_charset(extra, corpus)
            report = evaluate(model, corpus, charset, args.batch_size, device)
            print(report.format_table())
            if args.predictions:
                report.write_predictions(args.predictions)
            if args.json:
                report.write_json(args.json)
        else:
            train(args)
    except (SsltrError, ValueError, OSError) as e:
        log.error("%s", e)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
